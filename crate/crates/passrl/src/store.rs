//! Durable store for IR artifacts, transitions, runtimes, states, and
//! run metadata. Layout under the root:
//!
//! ```text
//! ir/<hex id>.ll        content-addressed IR bodies (canonical text)
//! artifacts.jsonl       artifact origins
//! transitions.jsonl     append-only transition log; last record per key wins
//! runtimes.jsonl        ir id -> median seconds; last record wins
//! states.jsonl          state fingerprint -> agent state
//! programs.jsonl        program id -> base/O3 artifact ids and runtimes
//! faults.jsonl          recorded task faults
//! runs/<run id>.json    config snapshot per run
//! checkpoints/          weight checkpoints (written by the orchestrator)
//! ```
//!
//! All writes go through one internal lock (single writer); loads replay
//! the logs in order so re-opened stores see exactly the committed state.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{
    hash_ir, unix_now, AgentState, ArtifactId, IrArtifact, IrOrigin, ProgramId,
    StateFingerprint, TransitionKey, TransitionRecord,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("artifact {id} failed its integrity check (stored body rehashes differently)")]
    Integrity { id: ArtifactId },
    #[error("artifact {id} is not in the store")]
    MissingArtifact { id: ArtifactId },
    #[error("transition references IR {id} that is not stored")]
    DanglingIr { id: ArtifactId },
    #[error("store io at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt store record in {path}: {reason}")]
    Corrupt { path: String, reason: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArtifactMeta {
    id: ArtifactId,
    origin: IrOrigin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRecord {
    pub ir: ArtifactId,
    pub runtime: f64,
    pub measured_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramRecord {
    pub program_id: ProgramId,
    pub base_ir: ArtifactId,
    pub o3_ir: ArtifactId,
    pub base_runtime: f64,
    pub o3_runtime: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaultRecord {
    pub program_id: ProgramId,
    pub context: String,
    pub message: String,
    pub at: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateRow {
    fingerprint: StateFingerprint,
    state: AgentState,
}

struct Tables {
    artifacts: HashMap<ArtifactId, IrOrigin>,
    transitions: HashMap<TransitionKey, TransitionRecord>,
    transition_order: Vec<TransitionKey>,
    runtimes: HashMap<ArtifactId, RuntimeRecord>,
    states: HashMap<StateFingerprint, AgentState>,
    programs: HashMap<ProgramId, ProgramRecord>,
    writers: HashMap<&'static str, BufWriter<File>>,
}

pub struct Store {
    root: PathBuf,
    inner: Mutex<Tables>,
}

const ARTIFACTS: &str = "artifacts.jsonl";
const TRANSITIONS: &str = "transitions.jsonl";
const RUNTIMES: &str = "runtimes.jsonl";
const STATES: &str = "states.jsonl";
const PROGRAMS: &str = "programs.jsonl";
const FAULTS: &str = "faults.jsonl";

impl Store {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| StoreError::Io { path, source }
        };
        for sub in ["ir", "runs", "checkpoints"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }

        let mut tables = Tables {
            artifacts: HashMap::new(),
            transitions: HashMap::new(),
            transition_order: Vec::new(),
            runtimes: HashMap::new(),
            states: HashMap::new(),
            programs: HashMap::new(),
            writers: HashMap::new(),
        };

        for row in load_jsonl::<ArtifactMeta>(&root.join(ARTIFACTS))? {
            tables.artifacts.insert(row.id, row.origin);
        }
        for row in load_jsonl::<TransitionRecord>(&root.join(TRANSITIONS))? {
            if tables.transitions.insert(row.key, row.clone()).is_none() {
                tables.transition_order.push(row.key);
            }
        }
        for row in load_jsonl::<RuntimeRecord>(&root.join(RUNTIMES))? {
            tables.runtimes.insert(row.ir, row);
        }
        for row in load_jsonl::<StateRow>(&root.join(STATES))? {
            tables.states.insert(row.fingerprint, row.state);
        }
        for row in load_jsonl::<ProgramRecord>(&root.join(PROGRAMS))? {
            tables.programs.insert(row.program_id.clone(), row);
        }

        for name in [ARTIFACTS, TRANSITIONS, RUNTIMES, STATES, PROGRAMS, FAULTS] {
            let path = root.join(name);
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            tables.writers.insert(name, BufWriter::new(file));
        }

        Ok(Self { root: root.to_path_buf(), inner: Mutex::new(tables) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    fn ir_path(&self, id: &ArtifactId) -> PathBuf {
        self.root.join("ir").join(format!("{}.ll", id.to_hex()))
    }

    fn append(&self, tables: &mut Tables, file: &'static str, row: &impl Serialize) -> Result<(), StoreError> {
        let writer = tables.writers.get_mut(file).expect("writer exists");
        let line = serde_json::to_string(row)
            .map_err(|e| StoreError::Corrupt { path: file.into(), reason: e.to_string() })?;
        writeln!(writer, "{line}")
            .and_then(|_| writer.flush())
            .map_err(|source| StoreError::Io { path: file.into(), source })
    }

    /// Store an artifact's body and origin; putting an existing id again
    /// is a no-op.
    pub fn put_ir(&self, artifact: &IrArtifact) -> Result<(), StoreError> {
        let mut tables = self.inner.lock().unwrap();
        if tables.artifacts.contains_key(&artifact.id) {
            return Ok(());
        }
        let path = self.ir_path(&artifact.id);
        fs::write(&path, &artifact.body)
            .map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
        let meta = ArtifactMeta { id: artifact.id, origin: artifact.origin.clone() };
        self.append(&mut tables, ARTIFACTS, &meta)?;
        tables.artifacts.insert(artifact.id, artifact.origin.clone());
        Ok(())
    }

    pub fn has_ir(&self, id: &ArtifactId) -> bool {
        self.inner.lock().unwrap().artifacts.contains_key(id)
    }

    /// Read an artifact body back, verifying that it still hashes to its
    /// id.
    pub fn get_ir(&self, id: &ArtifactId) -> Result<String, StoreError> {
        if !self.has_ir(id) {
            return Err(StoreError::MissingArtifact { id: *id });
        }
        let path = self.ir_path(id);
        let body = fs::read_to_string(&path)
            .map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
        let canonical = crate::state::canonicalize_ir(&body);
        if hash_ir(&canonical) != *id {
            return Err(StoreError::Integrity { id: *id });
        }
        Ok(canonical)
    }

    pub fn get_artifact(&self, id: &ArtifactId) -> Result<IrArtifact, StoreError> {
        let origin = self
            .inner
            .lock()
            .unwrap()
            .artifacts
            .get(id)
            .cloned()
            .ok_or(StoreError::MissingArtifact { id: *id })?;
        let body = self.get_ir(id)?;
        Ok(IrArtifact { id: *id, body, origin })
    }

    /// Insert or replace the record for its key. The result IR must
    /// already be stored.
    pub fn upsert_transition(&self, record: &TransitionRecord) -> Result<(), StoreError> {
        let mut tables = self.inner.lock().unwrap();
        if !tables.artifacts.contains_key(&record.result_ir) {
            return Err(StoreError::DanglingIr { id: record.result_ir });
        }
        self.append(&mut tables, TRANSITIONS, record)?;
        if tables.transitions.insert(record.key, record.clone()).is_none() {
            tables.transition_order.push(record.key);
        }
        Ok(())
    }

    pub fn lookup_transition(&self, key: &TransitionKey) -> Option<TransitionRecord> {
        self.inner.lock().unwrap().transitions.get(key).cloned()
    }

    /// All transitions in first-insertion order.
    pub fn transitions_snapshot(&self) -> Vec<TransitionRecord> {
        let tables = self.inner.lock().unwrap();
        tables
            .transition_order
            .iter()
            .filter_map(|k| tables.transitions.get(k).cloned())
            .collect()
    }

    pub fn transition_count(&self) -> usize {
        self.inner.lock().unwrap().transitions.len()
    }

    pub fn put_runtime(&self, ir: ArtifactId, runtime: f64) -> Result<(), StoreError> {
        let mut tables = self.inner.lock().unwrap();
        let row = RuntimeRecord { ir, runtime, measured_at: unix_now() };
        self.append(&mut tables, RUNTIMES, &row)?;
        tables.runtimes.insert(ir, row);
        Ok(())
    }

    pub fn runtime(&self, ir: &ArtifactId) -> Option<f64> {
        self.inner.lock().unwrap().runtimes.get(ir).map(|r| r.runtime)
    }

    pub fn put_state(&self, state: &AgentState) -> Result<(), StoreError> {
        let mut tables = self.inner.lock().unwrap();
        let fingerprint = state.fingerprint();
        if tables.states.contains_key(&fingerprint) {
            return Ok(());
        }
        let row = StateRow { fingerprint, state: state.clone() };
        self.append(&mut tables, STATES, &row)?;
        tables.states.insert(fingerprint, state.clone());
        Ok(())
    }

    pub fn get_state(&self, fingerprint: &StateFingerprint) -> Option<AgentState> {
        self.inner.lock().unwrap().states.get(fingerprint).cloned()
    }

    pub fn states_snapshot(&self) -> HashMap<StateFingerprint, AgentState> {
        self.inner.lock().unwrap().states.clone()
    }

    pub fn put_program(&self, record: &ProgramRecord) -> Result<(), StoreError> {
        let mut tables = self.inner.lock().unwrap();
        self.append(&mut tables, PROGRAMS, record)?;
        tables.programs.insert(record.program_id.clone(), record.clone());
        Ok(())
    }

    pub fn program(&self, id: &str) -> Option<ProgramRecord> {
        self.inner.lock().unwrap().programs.get(id).cloned()
    }

    pub fn record_fault(&self, fault: &FaultRecord) -> Result<(), StoreError> {
        let mut tables = self.inner.lock().unwrap();
        self.append(&mut tables, FAULTS, fault)
    }

    pub fn save_run_meta(&self, run_id: &str, meta: &serde_json::Value) -> Result<(), StoreError> {
        let path = self.root.join("runs").join(format!("{run_id}.json"));
        fs::write(&path, serde_json::to_string_pretty(meta).unwrap())
            .map_err(|source| StoreError::Io { path: path.display().to_string(), source })
    }

    pub fn load_run_meta(&self, run_id: &str) -> Option<serde_json::Value> {
        let path = self.root.join("runs").join(format!("{run_id}.json"));
        let text = fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Re-hash every stored artifact; lists the ids that no longer match.
    pub fn verify(&self) -> Result<VerifyReport, StoreError> {
        let ids: Vec<ArtifactId> =
            self.inner.lock().unwrap().artifacts.keys().copied().collect();
        let mut report = VerifyReport { checked: 0, corrupted: vec![] };
        for id in ids {
            report.checked += 1;
            match self.get_ir(&id) {
                Ok(_) => {}
                Err(StoreError::Integrity { id }) => report.corrupted.push(id),
                Err(other) => return Err(other),
            }
        }
        Ok(report)
    }
}

#[derive(Debug)]
pub struct VerifyReport {
    pub checked: usize,
    pub corrupted: Vec<ArtifactId>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.corrupted.is_empty()
    }
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let text = fs::read_to_string(path)
        .map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        (dir, store)
    }

    fn record_for(store: &Store, tag: &str) -> TransitionRecord {
        let parent = IrArtifact::base(&format!("parent {tag}"));
        let child = IrArtifact::optimized(&format!("child {tag}"), parent.id, 1);
        store.put_ir(&parent).unwrap();
        store.put_ir(&child).unwrap();
        let state = AgentState::base(parent.id, "p");
        TransitionRecord {
            key: TransitionKey { state: state.fingerprint(), action: 1 },
            result_ir: child.id,
            reward: 0.1,
            runtime_after: 0.5,
            measured_at: 7,
        }
    }

    #[test]
    fn put_get_round_trips() {
        let (_dir, store) = fresh();
        let artifact = IrArtifact::base("add add\nmul");
        store.put_ir(&artifact).unwrap();
        assert_eq!(store.get_ir(&artifact.id).unwrap(), artifact.body);
    }

    #[test]
    fn double_put_is_a_noop() {
        let (dir, store) = fresh();
        let artifact = IrArtifact::base("once");
        store.put_ir(&artifact).unwrap();
        store.put_ir(&artifact).unwrap();
        let entries = fs::read_dir(dir.path().join("ir")).unwrap().count();
        assert_eq!(entries, 1);
    }

    #[test]
    fn tampered_bodies_fail_integrity() {
        let (dir, store) = fresh();
        let artifact = IrArtifact::base("pristine body");
        store.put_ir(&artifact).unwrap();
        let path = dir.path().join("ir").join(format!("{}.ll", artifact.id.to_hex()));
        fs::write(&path, "tampered body").unwrap();
        assert!(matches!(
            store.get_ir(&artifact.id),
            Err(StoreError::Integrity { id }) if id == artifact.id
        ));
        let report = store.verify().unwrap();
        assert_eq!(report.checked, 1);
        assert_eq!(report.corrupted, vec![artifact.id]);
    }

    #[test]
    fn transition_lookup_and_upsert_semantics() {
        let (_dir, store) = fresh();
        let record = record_for(&store, "a");
        assert!(store.lookup_transition(&record.key).is_none());
        store.upsert_transition(&record).unwrap();
        assert_eq!(store.lookup_transition(&record.key).unwrap(), record);

        let mut newer = record.clone();
        newer.reward = 0.9;
        store.upsert_transition(&newer).unwrap();
        assert_eq!(store.transition_count(), 1, "upsert replaces, never duplicates");
        assert_eq!(store.lookup_transition(&record.key).unwrap().reward, 0.9);
    }

    #[test]
    fn dangling_result_ir_is_rejected() {
        let (_dir, store) = fresh();
        let ghost = IrArtifact::base("never stored");
        let parent = IrArtifact::base("stored parent");
        store.put_ir(&parent).unwrap();
        let record = TransitionRecord {
            key: TransitionKey {
                state: AgentState::base(parent.id, "p").fingerprint(),
                action: 0,
            },
            result_ir: ghost.id,
            reward: 0.0,
            runtime_after: 1.0,
            measured_at: 0,
        };
        assert!(matches!(
            store.upsert_transition(&record),
            Err(StoreError::DanglingIr { .. })
        ));
    }

    #[test]
    fn reopened_store_sees_committed_state() {
        let dir = tempfile::tempdir().unwrap();
        let record = {
            let store = Store::open(dir.path()).unwrap();
            let record = record_for(&store, "warm");
            store.upsert_transition(&record).unwrap();
            store.put_runtime(record.result_ir, 0.5).unwrap();
            store
                .put_program(&ProgramRecord {
                    program_id: "p".into(),
                    base_ir: record.result_ir,
                    o3_ir: record.result_ir,
                    base_runtime: 1.0,
                    o3_runtime: 0.4,
                })
                .unwrap();
            record
        };
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.lookup_transition(&record.key).unwrap(), record);
        assert_eq!(store.runtime(&record.result_ir), Some(0.5));
        assert_eq!(store.program("p").unwrap().base_runtime, 1.0);
        assert_eq!(store.transitions_snapshot().len(), 1);
    }

    #[test]
    fn run_meta_round_trips() {
        let (_dir, store) = fresh();
        let meta = serde_json::json!({"seed": 42, "level": "H"});
        store.save_run_meta("r1", &meta).unwrap();
        assert_eq!(store.load_run_meta("r1").unwrap(), meta);
        assert!(store.load_run_meta("r2").is_none());
    }
}
