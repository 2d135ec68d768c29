//! Core domain values: IR artifacts, agent states, experiences, and the
//! transition cache records keyed by state-action fingerprints.
//!
//! Everything here is an immutable value after construction and can be
//! shared or sent across threads freely.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::PendingSelection;

/// Index of an action within its [`crate::action::ActionSpace`].
pub type ActionId = u32;

/// Identifier of a source program (the file stem of its dataset entry).
pub type ProgramId = String;

macro_rules! hash_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name([u8; 32]);

        impl $name {
            pub fn from_bytes(bytes: [u8; 32]) -> Self {
                Self(bytes)
            }

            pub fn as_bytes(&self) -> &[u8; 32] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
                let raw = hex::decode(s)?;
                let bytes: [u8; 32] = raw
                    .try_into()
                    .map_err(|_| hex::FromHexError::InvalidStringLength)?;
                Ok(Self(bytes))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({}..)"), &self.to_hex()[..12])
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

hash_newtype!(
    /// Content hash of a canonicalized IR body.
    ArtifactId
);

hash_newtype!(
    /// Fixed-width hash identifying an [`AgentState`].
    StateFingerprint
);

/// Where an IR artifact came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IrOrigin {
    /// Unoptimized IR emitted straight from the frontend.
    Base,
    /// Result of applying one action to a parent artifact.
    Optimized { parent: ArtifactId, action: ActionId },
    /// The built-in aggressive pipeline applied to a base artifact.
    O3Baseline,
}

/// An IR text plus its content address.
///
/// The body is stored in canonical form (comments stripped, whitespace
/// normalized) so that incidental formatting never creates distinct
/// artifacts; the id is the SHA-256 digest of that canonical text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrArtifact {
    pub id: ArtifactId,
    pub body: String,
    pub origin: IrOrigin,
}

impl IrArtifact {
    pub fn new(body: &str, origin: IrOrigin) -> Self {
        let body = canonicalize_ir(body);
        let id = hash_ir(&body);
        Self { id, body, origin }
    }

    pub fn base(body: &str) -> Self {
        Self::new(body, IrOrigin::Base)
    }

    pub fn o3(body: &str) -> Self {
        Self::new(body, IrOrigin::O3Baseline)
    }

    pub fn optimized(body: &str, parent: ArtifactId, action: ActionId) -> Self {
        Self::new(body, IrOrigin::Optimized { parent, action })
    }
}

/// Canonical form used for hashing and storage: per line, everything from
/// the first `;` is dropped, surrounding whitespace is trimmed, internal
/// whitespace runs collapse to a single space, and empty lines vanish.
pub fn canonicalize_ir(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let line = match line.find(';') {
            Some(pos) => &line[..pos],
            None => line,
        };
        let mut first = true;
        let mut wrote = false;
        for word in line.split_whitespace() {
            if !first {
                out.push(' ');
            }
            out.push_str(word);
            first = false;
            wrote = true;
        }
        if wrote {
            out.push('\n');
        }
    }
    if out.ends_with('\n') {
        out.pop();
    }
    out
}

/// SHA-256 of an already-canonical IR body.
pub fn hash_ir(canonical_body: &str) -> ArtifactId {
    let mut hasher = Sha256::new();
    hasher.update(b"passrl-ir-v1\0");
    hasher.update(canonical_body.as_bytes());
    ArtifactId::from_bytes(hasher.finalize().into())
}

/// The bounded action history carried inside an agent state.
///
/// `entries` records every chosen action id in order, including the
/// parameter-value sub-actions of level L. Only pass-level actions count
/// toward the μ budget, tracked separately in `pass_count`.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActionHistory {
    entries: Vec<ActionId>,
    pass_count: usize,
    pending: Option<PendingSelection>,
}

impl ActionHistory {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ActionId] {
        &self.entries
    }

    /// Number of pass-level actions taken, i.e. the μ budget used so far.
    pub fn pass_count(&self) -> usize {
        self.pass_count
    }

    pub fn pending(&self) -> Option<&PendingSelection> {
        self.pending.as_ref()
    }

    pub fn is_mid_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Used by [`crate::action`] when applying an action; not public API.
    pub(crate) fn push(
        &self,
        action: ActionId,
        counts_toward_budget: bool,
        pending: Option<PendingSelection>,
    ) -> Self {
        let mut next = self.clone();
        next.entries.push(action);
        if counts_toward_budget {
            next.pass_count += 1;
        }
        next.pending = pending;
        next
    }
}

/// What the Q-function scores: one IR artifact plus the action history
/// that produced it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub ir: ArtifactId,
    pub history: ActionHistory,
    pub program_id: ProgramId,
}

impl AgentState {
    /// The starting state of an episode: base IR, empty history.
    pub fn base(ir: ArtifactId, program_id: impl Into<ProgramId>) -> Self {
        Self { ir, history: ActionHistory::empty(), program_id: program_id.into() }
    }

    pub fn fingerprint(&self) -> StateFingerprint {
        fingerprint(self)
    }
}

/// Hash of (ir id, history entries, pending selection). The program id is
/// deliberately excluded: two programs that reach the same IR through the
/// same actions share transitions.
pub fn fingerprint(state: &AgentState) -> StateFingerprint {
    let mut hasher = Sha256::new();
    hasher.update(b"passrl-state-v1\0");
    hasher.update(state.ir.as_bytes());
    hasher.update([0xff]);
    for entry in &state.history.entries {
        hasher.update(entry.to_le_bytes());
    }
    hasher.update([0xfe]);
    if let Some(pending) = &state.history.pending {
        hasher.update(pending.pass.as_bytes());
        hasher.update([0x00]);
        for (name, value) in &pending.bound {
            hasher.update(name.as_bytes());
            hasher.update([0x01]);
            hasher.update(value.as_bytes());
            hasher.update([0x02]);
        }
        for name in &pending.remaining {
            hasher.update(name.as_bytes());
            hasher.update([0x03]);
        }
    }
    StateFingerprint::from_bytes(hasher.finalize().into())
}

/// One replay-memory element: a transition `{s, a, r, s'}` with its
/// per-transition discount and terminal flag.
///
/// Intermediate parameter-selection transitions (level L) carry reward 0
/// and discount 1; every other transition carries the configured γ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: StateFingerprint,
    pub action: ActionId,
    pub reward: f64,
    pub next_state: StateFingerprint,
    pub discount: f64,
    pub terminal: bool,
}

/// Cache key for a deterministic state transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionKey {
    pub state: StateFingerprint,
    pub action: ActionId,
}

/// Cached result of executing one (state, action) pair. One record per
/// key: re-measurement replaces, never duplicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub key: TransitionKey,
    pub result_ir: ArtifactId,
    pub reward: f64,
    pub runtime_after: f64,
    pub measured_at: u64,
}

/// Seconds since the Unix epoch; good enough for `measured_at` stamps.
pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Linearizable in-memory view of the transition table, shared between
/// the learner (reads) and the manager (inserts).
#[derive(Default)]
pub struct TransitionCache {
    inner: std::sync::Mutex<HashMap<TransitionKey, TransitionRecord>>,
    inserted: std::sync::Condvar,
}

impl TransitionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &TransitionKey) -> Option<TransitionRecord> {
        self.inner.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, record: TransitionRecord) {
        self.inner.lock().unwrap().insert(record.key, record);
        self.inserted.notify_all();
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Block until `key` appears or the deadline passes.
    pub fn wait_for(
        &self,
        key: &TransitionKey,
        timeout: std::time::Duration,
    ) -> Option<TransitionRecord> {
        let deadline = std::time::Instant::now() + timeout;
        let mut guard = self.inner.lock().unwrap();
        loop {
            if let Some(record) = guard.get(key) {
                return Some(record.clone());
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return None;
            }
            let (g, res) = self.inserted.wait_timeout(guard, deadline - now).unwrap();
            guard = g;
            if res.timed_out() && guard.get(key).is_none() {
                return None;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn artifact(body: &str) -> IrArtifact {
        IrArtifact::base(body)
    }

    fn state_with(ir: ArtifactId, entries: &[ActionId]) -> AgentState {
        let mut history = ActionHistory::empty();
        for &a in entries {
            history = history.push(a, true, None);
        }
        AgentState { ir, history, program_id: "p".into() }
    }

    #[test]
    fn identical_bodies_share_ids() {
        let a = artifact("add add\nmul");
        let b = artifact("add add\nmul");
        assert_eq!(a.id, b.id);
    }

    #[test]
    fn canonicalization_strips_comments_and_whitespace() {
        let a = artifact("  add   add ; trailing comment\n\n\tmul  \n; full comment line\n");
        let b = artifact("add add\nmul");
        assert_eq!(a.id, b.id);
        assert_eq!(a.body, "add add\nmul");
    }

    #[test]
    fn different_bodies_differ() {
        assert_ne!(artifact("add").id, artifact("mul").id);
    }

    #[test]
    fn fingerprint_is_deterministic() {
        let ir = artifact("add").id;
        let a = state_with(ir, &[1, 3]);
        let b = state_with(ir, &[1, 3]);
        assert_eq!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn fingerprint_is_order_sensitive() {
        let ir = artifact("add").id;
        assert_ne!(
            fingerprint(&state_with(ir, &[1, 3])),
            fingerprint(&state_with(ir, &[3, 1]))
        );
    }

    #[test]
    fn fingerprint_depends_on_ir() {
        let a = state_with(artifact("add").id, &[1, 3]);
        let b = state_with(artifact("mul").id, &[1, 3]);
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn fingerprint_sees_pending_selection() {
        let ir = artifact("add").id;
        let plain = state_with(ir, &[2]);
        let mut with_pending = plain.clone();
        with_pending.history.pending = Some(PendingSelection {
            pass: "gvn".into(),
            bound: vec![],
            remaining: vec!["enable-pre".into()],
        });
        assert_ne!(fingerprint(&plain), fingerprint(&with_pending));
    }

    #[test]
    fn fingerprint_has_no_collisions_on_random_corpus() {
        // 10^4 random distinct states must map to 10^4 distinct hashes.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let irs: Vec<ArtifactId> =
            (0..64).map(|i| artifact(&format!("body {i}")).id).collect();
        let mut seen_states = std::collections::HashSet::new();
        let mut seen_hashes = std::collections::HashSet::new();
        let mut generated = 0usize;
        while generated < 10_000 {
            let ir = irs[rng.gen_range(0..irs.len())];
            let len = rng.gen_range(0..8);
            let entries: Vec<ActionId> = (0..len).map(|_| rng.gen_range(0..50)).collect();
            let state = state_with(ir, &entries);
            if !seen_states.insert((ir, entries)) {
                continue;
            }
            generated += 1;
            assert!(
                seen_hashes.insert(fingerprint(&state)),
                "collision after {generated} states"
            );
        }
    }

    #[test]
    fn hex_round_trip() {
        let id = artifact("x").id;
        assert_eq!(ArtifactId::from_hex(&id.to_hex()).unwrap(), id);
    }

    #[test]
    fn cache_wait_returns_inserted_record() {
        let cache = std::sync::Arc::new(TransitionCache::new());
        let key = TransitionKey { state: fingerprint(&state_with(artifact("a").id, &[])), action: 0 };
        let record = TransitionRecord {
            key,
            result_ir: artifact("b").id,
            reward: 0.5,
            runtime_after: 1.0,
            measured_at: 0,
        };
        let c2 = cache.clone();
        let r2 = record.clone();
        let handle = std::thread::spawn(move || {
            std::thread::sleep(std::time::Duration::from_millis(20));
            c2.insert(r2);
        });
        let got = cache.wait_for(&key, std::time::Duration::from_secs(5));
        handle.join().unwrap();
        assert_eq!(got.unwrap(), record);
    }

    #[test]
    fn cache_wait_times_out_when_absent() {
        let cache = TransitionCache::new();
        let key = TransitionKey { state: fingerprint(&state_with(artifact("a").id, &[])), action: 9 };
        assert!(cache.wait_for(&key, std::time::Duration::from_millis(10)).is_none());
    }
}
