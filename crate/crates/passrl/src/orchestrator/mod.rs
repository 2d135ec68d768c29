//! The learner/manager pair: dataset split, batched ε-greedy exploration
//! with server-side replay of cached transitions, task dispatch, the
//! training loop, and periodic greedy evaluation.
//!
//! The learner thread explores and trains; results flow back through
//! [`on_result`], the single mutation point for the store, the replay
//! memory, and the transition cache. With an empty `manager.listen`
//! address everything runs in-process through [`LocalBroker`]; otherwise
//! a TCP manager serves external workers.

mod manager;

pub use manager::ManagerHandle;

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::action::{ActionCatalogs, ActionSpace, CatalogError};
use crate::agent::{
    load_checkpoint, masked_argmax, save_checkpoint, BatchResolver, CheckpointError,
    CheckpointMeta, Learner, NetConfig, QFunction, QNetwork, TrainConfig, TrainError,
    TrainingBatch, CHECKPOINT_FORMAT_VERSION,
};
use crate::config::{BackendKind, ConfigError, RunConfig};
use crate::encode::{HistogramEncoder, OpcodeVocab, StateEncoder};
use crate::env::{
    execute_task, Backend, EnvError, LlvmBackend, ProgramSource, SyntheticBackend, Task,
    TaskKind, TaskOutcome, TaskResult,
};
use crate::replay::ReplayMemory;
use crate::report::{geometric_mean, RunLogWriter};
use crate::state::{
    fingerprint, unix_now, ActionId, AgentState, ArtifactId, IrArtifact, ProgramId,
    StateFingerprint, TransitionCache, TransitionKey, TransitionRecord,
};
use crate::store::{FaultRecord, ProgramRecord, Store, StoreError};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Action(#[from] crate::action::ActionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io at {what}: {source}")]
    Io { what: String, source: std::io::Error },
    #[error("configuration: {0}")]
    Invalid(String),
    #[error("baselines stalled: {done} of {total} programs ready after {waited:?}")]
    BaselineStalled { done: usize, total: usize, waited: Duration },
    #[error(
        "replay memory starved at {size} experiences (needs {required}); the reachable \
         transition space is exhausted — lower replay_min_fill or enlarge the problem"
    )]
    ReplayStarved { size: usize, required: usize },
}

/// A task waiting for a result, with its retry count.
#[derive(Clone, Debug)]
pub struct OutstandingTask {
    pub task: Task,
    pub attempts: u32,
}

/// State shared between the learner and the result-processing side.
pub struct Shared {
    pub replay: ReplayMemory,
    pub cache: TransitionCache,
    pub states: Mutex<HashMap<StateFingerprint, AgentState>>,
    pub bodies: Mutex<HashMap<ArtifactId, Arc<String>>>,
    pub runtimes: Mutex<HashMap<ArtifactId, f64>>,
    pub programs: Mutex<HashMap<ProgramId, ProgramRecord>>,
    pub excluded: Mutex<HashMap<ProgramId, String>>,
    pub best: Mutex<HashMap<ProgramId, f64>>,
    pub inflight: Mutex<HashSet<TransitionKey>>,
    pub outstanding: Mutex<HashMap<u64, OutstandingTask>>,
    pub snapshot: RwLock<Arc<QNetwork>>,
    encodings: Mutex<HashMap<StateFingerprint, Arc<Vec<f64>>>>,
}

#[derive(Default)]
pub struct Counters {
    pub tasks_issued: AtomicU64,
    pub baseline_tasks_issued: AtomicU64,
    pub results_processed: AtomicU64,
    pub faults: AtomicU64,
    pub experiences: AtomicU64,
    pub train_steps: AtomicU64,
}

pub struct RunContext {
    pub config: RunConfig,
    pub train_cfg: TrainConfig,
    pub space: Arc<ActionSpace>,
    pub encoder: Arc<HistogramEncoder>,
    pub store: Arc<Store>,
    pub sources: HashMap<ProgramId, ProgramSource>,
    pub train_set: Vec<ProgramId>,
    pub val_set: Vec<ProgramId>,
    pub shared: Arc<Shared>,
    pub counters: Counters,
    log: Mutex<RunLogWriter>,
    next_task_id: AtomicU64,
}

impl RunContext {
    pub fn mu_max(&self) -> usize {
        self.train_cfg.mu_max
    }

    fn next_task_id(&self) -> u64 {
        self.next_task_id.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub fn log(&self, step: u64, phase: &str, program: &str, metric: &str, value: serde_json::Value) {
        if let Err(e) = self.log.lock().unwrap().log(step, phase, program, metric, value) {
            log::error!("run log write failed: {e}");
        }
    }

    /// Build the configured backend.
    pub fn make_backend(&self) -> Result<Arc<dyn Backend>, OrchestratorError> {
        make_backend(&self.config)
    }

    pub fn body_of(&self, ir: &ArtifactId) -> Option<Arc<String>> {
        self.shared.bodies.lock().unwrap().get(ir).cloned()
    }

    pub fn runtime_of(&self, ir: &ArtifactId) -> Option<f64> {
        self.shared.runtimes.lock().unwrap().get(ir).copied()
    }

    pub fn base_state(&self, program: &str) -> Option<AgentState> {
        let programs = self.shared.programs.lock().unwrap();
        programs.get(program).map(|p| AgentState::base(p.base_ir, program))
    }

    /// Programs of both sets that are neither excluded by config nor
    /// dropped for baseline faults.
    pub fn active_programs(&self) -> Vec<ProgramId> {
        let excluded = self.shared.excluded.lock().unwrap();
        self.train_set
            .iter()
            .chain(self.val_set.iter())
            .filter(|p| !excluded.contains_key(*p))
            .cloned()
            .collect()
    }

    pub fn active_training(&self) -> Vec<ProgramId> {
        let excluded = self.shared.excluded.lock().unwrap();
        self.train_set.iter().filter(|p| !excluded.contains_key(*p)).cloned().collect()
    }

    fn remember_state(&self, state: &AgentState) -> Result<StateFingerprint, StoreError> {
        let fp = fingerprint(state);
        {
            let mut states = self.shared.states.lock().unwrap();
            if states.contains_key(&fp) {
                return Ok(fp);
            }
            states.insert(fp, state.clone());
        }
        self.store.put_state(state)?;
        Ok(fp)
    }

    fn remember_body(&self, artifact: &IrArtifact) {
        self.shared
            .bodies
            .lock()
            .unwrap()
            .entry(artifact.id)
            .or_insert_with(|| Arc::new(artifact.body.clone()));
    }

    fn remember_runtime(&self, ir: ArtifactId, runtime: f64) -> Result<(), StoreError> {
        self.shared.runtimes.lock().unwrap().insert(ir, runtime);
        self.store.put_runtime(ir, runtime)
    }

    pub fn encoded(&self, state: &AgentState) -> Arc<Vec<f64>> {
        let fp = fingerprint(state);
        if let Some(hit) = self.shared.encodings.lock().unwrap().get(&fp) {
            return hit.clone();
        }
        let body = self.body_of(&state.ir).unwrap_or_default();
        let encoded = Arc::new(self.encoder.encode(&body, &state.history));
        self.shared.encodings.lock().unwrap().insert(fp, encoded.clone());
        encoded
    }

    pub fn published_q(&self) -> Arc<QNetwork> {
        self.shared.snapshot.read().unwrap().clone()
    }

    pub fn publish(&self, net: &QNetwork) {
        *self.shared.snapshot.write().unwrap() = Arc::new(net.clone());
    }
}

pub fn make_backend(config: &RunConfig) -> Result<Arc<dyn Backend>, OrchestratorError> {
    match config.backend.kind {
        BackendKind::Synthetic => {
            Ok(Arc::new(SyntheticBackend::new(config.backend.synthetic.clone())))
        }
        BackendKind::Llvm => Ok(Arc::new(LlvmBackend::new(config.backend.llvm.clone())?)),
    }
}

/// Build the action space a config describes (shared by `init_run` and
/// the checkpoint-driven commands).
pub fn build_space_for(config: &RunConfig) -> Result<ActionSpace, OrchestratorError> {
    let catalogs = match (&config.catalog.actions, &config.catalog.parameters) {
        (Some(actions), Some(parameters)) => ActionCatalogs::load(actions, parameters)?,
        (Some(actions), None) => ActionCatalogs {
            passes: crate::action::PassCatalog::from_file(actions)?,
            parameters: Default::default(),
        },
        (None, _) if config.backend.kind == BackendKind::Synthetic => {
            ActionCatalogs::synthetic(config.backend.synthetic.n_actions)
        }
        (None, _) => {
            return Err(OrchestratorError::Invalid(
                "catalog.actions is required for the llvm backend".into(),
            ))
        }
    };
    Ok(ActionSpace::build(config.level, &catalogs)?)
}

fn build_vocab(config: &RunConfig) -> Result<OpcodeVocab, OrchestratorError> {
    match &config.catalog.vocab {
        Some(path) => OpcodeVocab::from_file(path)
            .map_err(|source| OrchestratorError::Io { what: path.display().to_string(), source }),
        None if config.backend.kind == BackendKind::Synthetic => {
            Ok(OpcodeVocab::for_token_alphabet(config.backend.synthetic.alphabet))
        }
        None => Err(OrchestratorError::Invalid(
            "catalog.vocab is required for the llvm backend".into(),
        )),
    }
}

/// Scan the dataset root: every regular file is one program, identified
/// by its file stem, ordered by name for reproducibility.
fn scan_dataset(config: &RunConfig) -> Result<Vec<ProgramSource>, OrchestratorError> {
    let root = &config.dataset.root;
    let entries = std::fs::read_dir(root)
        .map_err(|source| OrchestratorError::Io { what: root.display().to_string(), source })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut sources = Vec::new();
    for path in paths {
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        if name.starts_with('.') {
            continue;
        }
        let id = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        if config.dataset.exclude.contains(&id) {
            continue;
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|source| OrchestratorError::Io { what: path.display().to_string(), source })?;
        sources.push(ProgramSource { id, name, text });
    }
    if sources.is_empty() {
        return Err(ConfigError::EmptyDataset(root.display().to_string()).into());
    }
    Ok(sources)
}

/// Seeded shuffle, then split by the ratio with the training side taking
/// the floor (109 programs at 4:1 give 87 training / 22 validation). A
/// non-empty dataset always yields a non-empty training set.
pub fn split_dataset(
    ids: &[ProgramId],
    ratio: (u64, u64),
    shuffle_seed: u64,
) -> (Vec<ProgramId>, Vec<ProgramId>) {
    let mut shuffled: Vec<ProgramId> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    shuffled.shuffle(&mut rng);
    let (t, v) = ratio;
    let train_len =
        (((shuffled.len() as u64) * t) / (t + v)).max(1).min(shuffled.len() as u64) as usize;
    let val = shuffled.split_off(train_len);
    (shuffled, val)
}

/// Load catalogs, open the store, split the dataset, rebuild the
/// in-memory mirrors and the replay memory from stored transitions, and
/// persist the run metadata.
pub fn init_run(config: RunConfig) -> Result<Arc<RunContext>, OrchestratorError> {
    config.validate().map_err(OrchestratorError::Invalid)?;
    let train_cfg = config.train_config();
    let space = Arc::new(build_space_for(&config)?);
    let vocab = build_vocab(&config)?;
    let encoder =
        Arc::new(HistogramEncoder::new(vocab, space.len(), train_cfg.mu_max));

    std::fs::create_dir_all(&config.persist_root).map_err(|source| OrchestratorError::Io {
        what: config.persist_root.display().to_string(),
        source,
    })?;
    let store = Arc::new(Store::open(&config.persist_root)?);
    let evals_dir = config.persist_root.join("evals");
    std::fs::create_dir_all(&evals_dir)
        .map_err(|source| OrchestratorError::Io { what: evals_dir.display().to_string(), source })?;

    let sources = scan_dataset(&config)?;
    let ids: Vec<ProgramId> = sources.iter().map(|s| s.id.clone()).collect();
    let ratio = config.dataset.split_parts().map_err(OrchestratorError::Invalid)?;
    let (train_set, val_set) = split_dataset(&ids, ratio, config.dataset.shuffle_seed);

    let shared = Arc::new(Shared {
        replay: ReplayMemory::new(config.loop_cfg.replay_capacity, config.replay_min_fill()),
        cache: TransitionCache::new(),
        states: Mutex::new(HashMap::new()),
        bodies: Mutex::new(HashMap::new()),
        runtimes: Mutex::new(HashMap::new()),
        programs: Mutex::new(HashMap::new()),
        excluded: Mutex::new(HashMap::new()),
        best: Mutex::new(HashMap::new()),
        inflight: Mutex::new(HashSet::new()),
        outstanding: Mutex::new(HashMap::new()),
        snapshot: RwLock::new(Arc::new(QNetwork::zeros(NetConfig {
            input_dim: encoder.dim(),
            width: config.loop_cfg.width,
            blocks: config.loop_cfg.blocks,
            n_actions: space.len(),
        }))),
        encodings: Mutex::new(HashMap::new()),
    });

    let log_path = config.persist_root.join("run.log");
    let log = RunLogWriter::create(&log_path)
        .map_err(|source| OrchestratorError::Io { what: log_path.display().to_string(), source })?;

    let ctx = Arc::new(RunContext {
        train_cfg,
        space,
        encoder,
        store,
        sources: sources.into_iter().map(|s| (s.id.clone(), s)).collect(),
        train_set,
        val_set,
        shared,
        counters: Counters::default(),
        log: Mutex::new(log),
        next_task_id: AtomicU64::new(0),
        config,
    });

    warm_load(&ctx)?;
    ctx.store.save_run_meta(&ctx.config.run_id, &ctx.config.metadata())?;
    Ok(ctx)
}

/// Rebuild mirrors and the replay memory from the store: IR bodies and
/// runtimes come back verbatim; each stored transition replays into an
/// experience by re-applying its action to the stored state.
fn warm_load(ctx: &RunContext) -> Result<(), OrchestratorError> {
    let active: HashSet<&ProgramId> = ctx.train_set.iter().chain(ctx.val_set.iter()).collect();
    {
        let mut programs = ctx.shared.programs.lock().unwrap();
        for id in &ctx.train_set {
            if let Some(record) = ctx.store.program(id) {
                programs.insert(id.clone(), record);
            }
        }
        for id in &ctx.val_set {
            if let Some(record) = ctx.store.program(id) {
                programs.insert(id.clone(), record);
            }
        }
    }
    {
        let mut states = ctx.shared.states.lock().unwrap();
        states.extend(ctx.store.states_snapshot());
    }
    // Bodies and runtimes for everything referenced by a known program
    // or transition chain; the store is the backing source either way.
    let records = ctx.store.transitions_snapshot();
    let mut wanted: HashSet<ArtifactId> = HashSet::new();
    for record in &records {
        wanted.insert(record.result_ir);
    }
    for record in ctx.shared.programs.lock().unwrap().values() {
        wanted.insert(record.base_ir);
        wanted.insert(record.o3_ir);
    }
    for state in ctx.shared.states.lock().unwrap().values() {
        wanted.insert(state.ir);
    }
    {
        let mut bodies = ctx.shared.bodies.lock().unwrap();
        let mut runtimes = ctx.shared.runtimes.lock().unwrap();
        for id in wanted {
            if let Ok(body) = ctx.store.get_ir(&id) {
                bodies.insert(id, Arc::new(body));
            }
            if let Some(runtime) = ctx.store.runtime(&id) {
                runtimes.insert(id, runtime);
            }
        }
    }

    let mu = ctx.mu_max();
    let mut replayed = 0usize;
    for record in records {
        ctx.shared.cache.insert(record.clone());
        let Some(state) = ctx.shared.states.lock().unwrap().get(&record.key.state).cloned()
        else {
            continue;
        };
        if !active.contains(&state.program_id) {
            continue;
        }
        let Ok(applied) = ctx.space.apply_action(&state.history, record.key.action, mu) else {
            // Catalog changed since this record was written; skip it.
            continue;
        };
        let next_state = AgentState {
            ir: record.result_ir,
            history: applied.history,
            program_id: state.program_id.clone(),
        };
        let next_fp = ctx.remember_state(&next_state)?;
        let discount =
            if applied.invocation.is_some() { ctx.train_cfg.gamma } else { 1.0 };
        let terminal = structurally_terminal(ctx, &next_state);
        ctx.shared.replay.insert(crate::state::Experience {
            state: record.key.state,
            action: record.key.action,
            reward: record.reward,
            next_state: next_fp,
            discount,
            terminal,
        });
        replayed += 1;
    }
    if replayed > 0 {
        log::info!("replay repopulated with {replayed} stored transitions");
    }
    Ok(())
}

/// Terminal by structure alone: the pass budget is spent and no
/// selection is pending. (Stops caused by non-positive Q-values depend
/// on the weights of the moment and are applied where they are observed.)
fn structurally_terminal(ctx: &RunContext, state: &AgentState) -> bool {
    state.history.pending().is_none() && state.history.pass_count() >= ctx.mu_max()
}

// ---------------------------------------------------------------------
// Brokers: how tasks reach a backend.
// ---------------------------------------------------------------------

/// In-process execution: submitted tasks queue up and `pump` runs them
/// on the calling thread. Deterministic and socket-free.
pub struct LocalBroker {
    backend: Arc<dyn Backend>,
    queue: Mutex<VecDeque<u64>>,
}

impl LocalBroker {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self { backend, queue: Mutex::new(VecDeque::new()) }
    }
}

#[derive(Clone)]
pub enum Broker {
    Local(Arc<LocalBroker>),
    Remote(Arc<ManagerHandle>),
}

impl Broker {
    pub fn local(backend: Arc<dyn Backend>) -> Self {
        Broker::Local(Arc::new(LocalBroker::new(backend)))
    }

    /// Queue a task; its result eventually flows through [`on_result`].
    pub fn submit(&self, ctx: &RunContext, task: Task) {
        let id = task.id;
        if matches!(task.kind, TaskKind::Baseline { .. }) {
            ctx.counters.baseline_tasks_issued.fetch_add(1, Ordering::Relaxed);
        }
        ctx.counters.tasks_issued.fetch_add(1, Ordering::Relaxed);
        ctx.shared
            .outstanding
            .lock()
            .unwrap()
            .insert(id, OutstandingTask { task, attempts: 0 });
        match self {
            Broker::Local(local) => local.queue.lock().unwrap().push_back(id),
            Broker::Remote(handle) => handle.enqueue(id),
        }
    }

    /// Re-queue a still-outstanding task (fault retry or worker loss).
    fn requeue(&self, id: u64) {
        match self {
            Broker::Local(local) => local.queue.lock().unwrap().push_back(id),
            Broker::Remote(handle) => handle.enqueue(id),
        }
    }

    /// Tasks submitted but not yet resolved.
    pub fn pending(&self, ctx: &RunContext) -> usize {
        ctx.shared.outstanding.lock().unwrap().len()
    }

    /// Local mode: execute everything queued right now on this thread.
    /// Remote mode: results arrive asynchronously, nothing to do.
    pub fn pump(&self, ctx: &RunContext) -> usize {
        match self {
            Broker::Remote(_) => 0,
            Broker::Local(local) => {
                let mut processed = 0;
                loop {
                    let id = match local.queue.lock().unwrap().pop_front() {
                        Some(id) => id,
                        None => break,
                    };
                    let Some(entry) =
                        ctx.shared.outstanding.lock().unwrap().get(&id).cloned()
                    else {
                        continue; // stale queue entry, task already done
                    };
                    let result = execute_task(local.backend.as_ref(), &entry.task, "local");
                    on_result(ctx, self, result);
                    processed += 1;
                }
                processed
            }
        }
    }

    /// Resolve one transition synchronously (evaluation path): replay the
    /// cache when possible, otherwise execute the task and wait for it.
    pub fn resolve_blocking(
        &self,
        ctx: &RunContext,
        state: &AgentState,
        action: ActionId,
        invocation: crate::action::Invocation,
        timeout: Duration,
    ) -> Result<TransitionRecord, String> {
        let key = TransitionKey { state: fingerprint(state), action };
        if let Some(record) = ctx.shared.cache.get(&key) {
            return Ok(record);
        }
        let already_inflight = !ctx.shared.inflight.lock().unwrap().insert(key);
        if !already_inflight {
            let body = ctx
                .body_of(&state.ir)
                .ok_or_else(|| format!("no body for {}", state.ir))?;
            let task = Task {
                id: ctx.next_task_id(),
                program_id: state.program_id.clone(),
                kind: TaskKind::Transition {
                    state: key.state,
                    action,
                    ir_id: state.ir,
                    ir_body: Some(body.as_ref().clone()),
                    invocation,
                },
                policy: ctx.config.benchmark.clone(),
            };
            self.submit(ctx, task);
        }
        match self {
            Broker::Local(_) => {
                self.pump(ctx);
                ctx.shared
                    .cache
                    .get(&key)
                    .ok_or_else(|| "transition task faulted".to_string())
            }
            Broker::Remote(_) => ctx
                .shared
                .cache
                .wait_for(&key, timeout)
                .ok_or_else(|| "transition did not resolve before the timeout".to_string()),
        }
    }

    pub fn shutdown(&self) {
        if let Broker::Remote(handle) = self {
            handle.shutdown();
        }
    }
}

// ---------------------------------------------------------------------
// Result handling (the manager's write side).
// ---------------------------------------------------------------------

/// Fold one task result into the store, the caches, and the replay
/// memory. Unknown or duplicate task ids are logged and dropped, which
/// gives at-least-once delivery an exactly-once effect.
pub fn on_result(ctx: &RunContext, broker: &Broker, result: TaskResult) {
    let entry = ctx.shared.outstanding.lock().unwrap().remove(&result.task_id);
    let Some(entry) = entry else {
        log::debug!("dropping result for unknown task {}", result.task_id);
        return;
    };
    ctx.counters.results_processed.fetch_add(1, Ordering::Relaxed);
    match result.outcome {
        TaskOutcome::Fault { message, missing_ir } => {
            handle_fault(ctx, broker, entry, message, missing_ir)
        }
        TaskOutcome::Baseline { base_ir, base_runtime, o3_ir, o3_runtime } => {
            if let Err(e) = handle_baseline(
                ctx,
                &entry.task.program_id,
                base_ir,
                base_runtime,
                o3_ir,
                o3_runtime,
            ) {
                log::error!("baseline result for {} failed: {e}", entry.task.program_id);
            }
        }
        TaskOutcome::Transition { result_ir, runtime } => {
            if let Err(e) = handle_transition(ctx, &entry.task, result_ir, runtime) {
                log::error!("transition result for task {} failed: {e}", entry.task.id);
            }
        }
    }
}

fn handle_fault(
    ctx: &RunContext,
    broker: &Broker,
    mut entry: OutstandingTask,
    message: String,
    missing_ir: bool,
) {
    let id = entry.task.id;
    if !missing_ir {
        entry.attempts += 1;
    }
    if missing_ir || entry.attempts <= ctx.config.manager.retry_budget {
        log::warn!("task {id} faulted ({message}); retrying (attempt {})", entry.attempts);
        ctx.shared.outstanding.lock().unwrap().insert(id, entry);
        broker.requeue(id);
        return;
    }
    ctx.counters.faults.fetch_add(1, Ordering::Relaxed);
    let program = entry.task.program_id.clone();
    let context = match &entry.task.kind {
        TaskKind::Baseline { .. } => {
            // A program whose baseline cannot be produced leaves the run.
            ctx.shared.excluded.lock().unwrap().insert(program.clone(), message.clone());
            "baseline".to_string()
        }
        TaskKind::Transition { state, action, .. } => {
            ctx.shared
                .inflight
                .lock()
                .unwrap()
                .remove(&TransitionKey { state: *state, action: *action });
            format!("transition action {action}")
        }
    };
    ctx.log(0, "fault", &program, "task_failed", serde_json::json!(message));
    if let Err(e) = ctx.store.record_fault(&FaultRecord {
        program_id: program,
        context,
        message,
        at: unix_now(),
    }) {
        log::error!("fault record write failed: {e}");
    }
}

fn handle_baseline(
    ctx: &RunContext,
    program: &str,
    base_ir: String,
    base_runtime: f64,
    o3_ir: String,
    o3_runtime: f64,
) -> Result<(), OrchestratorError> {
    let base = IrArtifact::base(&base_ir);
    let o3 = IrArtifact::o3(&o3_ir);
    ctx.store.put_ir(&base)?;
    ctx.store.put_ir(&o3)?;
    ctx.remember_body(&base);
    ctx.remember_body(&o3);
    ctx.remember_runtime(base.id, base_runtime)?;
    ctx.remember_runtime(o3.id, o3_runtime)?;
    let record = ProgramRecord {
        program_id: program.to_string(),
        base_ir: base.id,
        o3_ir: o3.id,
        base_runtime,
        o3_runtime,
    };
    ctx.store.put_program(&record)?;
    ctx.remember_state(&AgentState::base(base.id, program))?;
    ctx.shared.programs.lock().unwrap().insert(program.to_string(), record);
    ctx.log(0, "baseline", program, "base_runtime", serde_json::json!(base_runtime));
    ctx.log(0, "baseline", program, "o3_runtime", serde_json::json!(o3_runtime));
    Ok(())
}

fn handle_transition(
    ctx: &RunContext,
    task: &Task,
    result_ir: String,
    runtime: f64,
) -> Result<(), OrchestratorError> {
    let TaskKind::Transition { state: state_fp, action, ir_id: parent, .. } = &task.kind else {
        unreachable!("transition outcome for a baseline task");
    };
    let key = TransitionKey { state: *state_fp, action: *action };
    ctx.shared.inflight.lock().unwrap().remove(&key);

    let Some(prev_runtime) = ctx.runtime_of(parent) else {
        return Err(OrchestratorError::Invalid(format!(
            "no recorded runtime for predecessor {parent}"
        )));
    };
    let Some(prev_state) = ctx.shared.states.lock().unwrap().get(state_fp).cloned() else {
        return Err(OrchestratorError::Invalid(format!("unknown state {state_fp}")));
    };

    let reward = crate::env::reward(prev_runtime, runtime)?;
    let artifact = IrArtifact::optimized(&result_ir, *parent, *action);
    ctx.store.put_ir(&artifact)?;
    ctx.remember_body(&artifact);
    ctx.remember_runtime(artifact.id, runtime)?;

    let record = TransitionRecord {
        key,
        result_ir: artifact.id,
        reward,
        runtime_after: runtime,
        measured_at: unix_now(),
    };
    ctx.store.upsert_transition(&record)?;

    let applied = ctx.space.apply_action(&prev_state.history, *action, ctx.mu_max())?;
    let next_state = AgentState {
        ir: artifact.id,
        history: applied.history,
        program_id: prev_state.program_id.clone(),
    };
    let next_fp = ctx.remember_state(&next_state)?;

    // Terminal by structure (budget spent); the choice to stop earlier
    // enters training through the stop option in the bootstrap instead,
    // so stored experiences never bake in one moment's weights.
    let terminal = structurally_terminal(ctx, &next_state);

    ctx.shared.replay.insert(crate::state::Experience {
        state: key.state,
        action: key.action,
        reward,
        next_state: next_fp,
        discount: ctx.train_cfg.gamma,
        terminal,
    });
    ctx.counters.experiences.fetch_add(1, Ordering::Relaxed);

    if let Some(program) = ctx.shared.programs.lock().unwrap().get(&task.program_id) {
        let speedup = program.base_runtime / runtime;
        let mut best = ctx.shared.best.lock().unwrap();
        let entry = best.entry(task.program_id.clone()).or_insert(speedup);
        if speedup > *entry {
            *entry = speedup;
        }
    }
    ctx.log(
        ctx.counters.train_steps.load(Ordering::Relaxed),
        "explore",
        &task.program_id,
        "reward",
        serde_json::json!(reward),
    );

    // The cache insert is last: evaluation waiters observe a fully
    // committed transition.
    ctx.shared.cache.insert(record);
    Ok(())
}

// ---------------------------------------------------------------------
// Exploration.
// ---------------------------------------------------------------------

/// Pick an action under the stop rule. `None` means the rollout ends:
/// no legal action remains, or the policy is acting greedily and no
/// legal action has a positive Q-value. The ε coin is tossed per action
/// step, before the stop check, so exploration is never starved by a
/// pessimistic initialization; a pending parameter selection is always
/// completed regardless of predicted values.
pub fn choose_action(
    q: &[f64],
    mask: &[bool],
    mid_pending: bool,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Option<ActionId> {
    let (greedy, best_q) = masked_argmax(q, mask)?;
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        let legal: Vec<ActionId> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| l.then_some(i as ActionId))
            .collect();
        return Some(legal[rng.gen_range(0..legal.len())]);
    }
    if !mid_pending && best_q <= 0.0 {
        return None;
    }
    Some(greedy)
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ExploreStats {
    pub rollouts: usize,
    pub tasks_emitted: usize,
    pub cached_advances: usize,
    pub intermediate_steps: usize,
}

/// One batched exploration pass: sample base states from the training
/// set and walk each forward under the ε-greedy policy, replaying
/// transitions already in memory server-side; the first cache miss per
/// rollout becomes a worker task and ends that rollout.
pub fn explore_step(
    ctx: &RunContext,
    broker: &Broker,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> ExploreStats {
    let mut stats = ExploreStats::default();
    let training = ctx.active_training();
    if training.is_empty() {
        return stats;
    }
    let batch = ctx.config.explore_batch(training.len());
    let picks = rand::seq::index::sample(rng, training.len(), batch.min(training.len()));
    let q = ctx.published_q();

    for pick in picks {
        let program = &training[pick];
        let Some(mut state) = ctx.base_state(program) else { continue };
        stats.rollouts += 1;
        loop {
            let mask = ctx.space.legal_actions(&state.history, ctx.mu_max());
            let qvals = q.q(&ctx.encoded(&state));
            let Some(action) =
                choose_action(&qvals, &mask, state.history.is_mid_pending(), epsilon, rng)
            else {
                break;
            };
            let key = TransitionKey { state: fingerprint(&state), action };
            if let Some(record) = ctx.shared.cache.get(&key) {
                match advance(ctx, &state, action, &record) {
                    Some(next) => {
                        stats.cached_advances += 1;
                        state = next;
                        continue;
                    }
                    None => break,
                }
            }
            let applied = match ctx.space.apply_action(&state.history, action, ctx.mu_max()) {
                Ok(applied) => applied,
                Err(e) => {
                    log::error!("explore chose an illegal action: {e}");
                    break;
                }
            };
            match applied.invocation {
                None => {
                    // Intermediate parameter selection: transition locally,
                    // reward 0, discount 1, no backend involvement.
                    match intermediate_transition(ctx, &state, action, applied.history) {
                        Ok(next) => {
                            stats.intermediate_steps += 1;
                            state = next;
                            continue;
                        }
                        Err(e) => {
                            log::error!("intermediate transition failed: {e}");
                            break;
                        }
                    }
                }
                Some(invocation) => {
                    if !ctx.shared.inflight.lock().unwrap().insert(key) {
                        break; // already being measured for another rollout
                    }
                    let Some(body) = ctx.body_of(&state.ir) else {
                        log::error!("no body for {} while exploring", state.ir);
                        ctx.shared.inflight.lock().unwrap().remove(&key);
                        break;
                    };
                    let task = Task {
                        id: ctx.next_task_id(),
                        program_id: state.program_id.clone(),
                        kind: TaskKind::Transition {
                            state: key.state,
                            action,
                            ir_id: state.ir,
                            ir_body: Some(body.as_ref().clone()),
                            invocation,
                        },
                        policy: ctx.config.benchmark.clone(),
                    };
                    broker.submit(ctx, task);
                    stats.tasks_emitted += 1;
                    break;
                }
            }
        }
    }
    stats
}

/// Follow a cached transition record to the successor state.
fn advance(
    ctx: &RunContext,
    state: &AgentState,
    action: ActionId,
    record: &TransitionRecord,
) -> Option<AgentState> {
    let applied = ctx.space.apply_action(&state.history, action, ctx.mu_max()).ok()?;
    let next = AgentState {
        ir: record.result_ir,
        history: applied.history,
        program_id: state.program_id.clone(),
    };
    ctx.remember_state(&next).ok()?;
    Some(next)
}

/// A level-L sub-action that did not complete its pass: recorded as a
/// zero-reward, discount-1 transition without touching any backend.
fn intermediate_transition(
    ctx: &RunContext,
    state: &AgentState,
    action: ActionId,
    next_history: crate::state::ActionHistory,
) -> Result<AgentState, OrchestratorError> {
    let key = TransitionKey { state: fingerprint(state), action };
    let runtime = ctx
        .runtime_of(&state.ir)
        .ok_or_else(|| OrchestratorError::Invalid(format!("no runtime for {}", state.ir)))?;
    let next_state = AgentState {
        ir: state.ir,
        history: next_history,
        program_id: state.program_id.clone(),
    };
    let next_fp = ctx.remember_state(&next_state)?;
    let record = TransitionRecord {
        key,
        result_ir: state.ir,
        reward: 0.0,
        runtime_after: runtime,
        measured_at: unix_now(),
    };
    ctx.store.upsert_transition(&record)?;
    ctx.shared.replay.insert(crate::state::Experience {
        state: key.state,
        action,
        reward: 0.0,
        next_state: next_fp,
        discount: 1.0,
        terminal: false,
    });
    ctx.counters.experiences.fetch_add(1, Ordering::Relaxed);
    ctx.shared.cache.insert(record);
    Ok(next_state)
}

// ---------------------------------------------------------------------
// Batch resolution for training.
// ---------------------------------------------------------------------

/// Resolves experiences against the context's state index and encoder.
pub struct ContextResolver<'a> {
    pub ctx: &'a RunContext,
}

impl BatchResolver for ContextResolver<'_> {
    fn resolve(&self, experiences: &[crate::state::Experience]) -> TrainingBatch {
        let ctx = self.ctx;
        let dim = ctx.encoder.dim();
        let n = experiences.len();
        let mut states = Vec::with_capacity(n * dim);
        let mut next_states = Vec::with_capacity(n * dim);
        let mut next_masks = Vec::with_capacity(n);
        let mut next_can_stop = Vec::with_capacity(n);
        for e in experiences {
            let state = ctx
                .shared
                .states
                .lock()
                .unwrap()
                .get(&e.state)
                .cloned()
                .expect("sampled experience references an indexed state");
            let next = ctx
                .shared
                .states
                .lock()
                .unwrap()
                .get(&e.next_state)
                .cloned()
                .expect("sampled experience references an indexed next state");
            states.extend(ctx.encoded(&state).iter());
            next_states.extend(ctx.encoded(&next).iter());
            next_masks.push(ctx.space.legal_actions(&next.history, ctx.mu_max()));
            next_can_stop.push(!next.history.is_mid_pending());
        }
        TrainingBatch {
            states: ndarray::Array2::from_shape_vec((n, dim), states).unwrap(),
            actions: experiences.iter().map(|e| e.action).collect(),
            rewards: experiences.iter().map(|e| e.reward).collect(),
            next_states: ndarray::Array2::from_shape_vec((n, dim), next_states).unwrap(),
            next_masks,
            next_can_stop,
            discounts: experiences.iter().map(|e| e.discount).collect(),
            terminals: experiences.iter().map(|e| e.terminal).collect(),
        }
    }
}

// ---------------------------------------------------------------------
// Greedy rollout and evaluation.
// ---------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub actions: Vec<ActionId>,
    pub rewards: Vec<f64>,
    pub final_state: AgentState,
    pub final_runtime: f64,
    pub fault: Option<String>,
}

impl Trajectory {
    /// `a→b→c` rendering of the chosen action ids.
    pub fn arrow_sequence(&self) -> String {
        self.actions.iter().map(ToString::to_string).collect::<Vec<_>>().join("→")
    }
}

/// Walk one program greedily from its base state, replaying cached
/// transitions and resolving misses through the broker. A mid-pending
/// selection is always completed before the stop rule applies.
pub fn greedy_rollout(
    ctx: &RunContext,
    broker: &Broker,
    q: &dyn QFunction,
    program: &str,
) -> Result<Trajectory, String> {
    let mut state =
        ctx.base_state(program).ok_or_else(|| format!("no baseline for {program}"))?;
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut fault = None;
    let timeout = Duration::from_secs(ctx.config.manager.eval_timeout_secs);
    // The ε=0 path never consults the rng; any fixed seed keeps this pure.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    loop {
        let mask = ctx.space.legal_actions(&state.history, ctx.mu_max());
        let qvals = q.q(&ctx.encoded(&state));
        let Some(action) =
            choose_action(&qvals, &mask, state.history.is_mid_pending(), 0.0, &mut rng)
        else {
            break;
        };
        let applied = ctx
            .space
            .apply_action(&state.history, action, ctx.mu_max())
            .map_err(|e| e.to_string())?;
        let next = match applied.invocation {
            None => {
                rewards.push(0.0);
                intermediate_transition(ctx, &state, action, applied.history)
                    .map_err(|e| e.to_string())?
            }
            Some(invocation) => {
                match broker.resolve_blocking(ctx, &state, action, invocation, timeout) {
                    Ok(record) => {
                        rewards.push(record.reward);
                        match advance(ctx, &state, action, &record) {
                            Some(next) => next,
                            None => break,
                        }
                    }
                    Err(message) => {
                        fault = Some(message);
                        break;
                    }
                }
            }
        };
        actions.push(action);
        state = next;
    }
    let final_runtime = ctx
        .runtime_of(&state.ir)
        .ok_or_else(|| format!("no runtime for final state of {program}"))?;
    Ok(Trajectory { actions, rewards, final_state: state, final_runtime, fault })
}

#[derive(Clone, Debug)]
pub struct ProgramEval {
    pub program_id: ProgramId,
    pub set: &'static str,
    pub sequence: String,
    pub agent_speedup: f64,
    pub o3_speedup: f64,
    pub best_speedup: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetAggregates {
    pub agent: f64,
    pub best: f64,
    pub o3: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub step: u64,
    pub programs: Vec<ProgramEval>,
    pub training: Option<SetAggregates>,
    pub validation: Option<SetAggregates>,
    pub faults: Vec<(ProgramId, String)>,
}

/// Greedy evaluation over every base state in the dataset. Exploration
/// and training are quiesced by construction: the learner thread runs
/// this between train steps. Faulted programs are listed and excluded
/// from the aggregates.
pub fn evaluate(ctx: &RunContext, broker: &Broker, q: &dyn QFunction, step: u64) -> EvalReport {
    let mut report = EvalReport {
        step,
        programs: Vec::new(),
        training: None,
        validation: None,
        faults: Vec::new(),
    };
    let train: HashSet<&ProgramId> = ctx.train_set.iter().collect();
    for program in ctx.active_programs() {
        let set = if train.contains(&program) { "training" } else { "validation" };
        let outcome = greedy_rollout(ctx, broker, q, &program);
        let (trajectory, fault) = match outcome {
            Ok(t) if t.fault.is_none() => (Some(t), None),
            Ok(t) => {
                let fault = t.fault.clone().unwrap_or_default();
                (None, Some(fault))
            }
            Err(message) => (None, Some(message)),
        };
        if let Some(message) = fault {
            report.faults.push((program.clone(), message));
            continue;
        }
        let trajectory = trajectory.expect("fault-free trajectory");
        let Some(record) = ctx.shared.programs.lock().unwrap().get(&program).cloned() else {
            report.faults.push((program.clone(), "no baseline record".into()));
            continue;
        };
        let agent_speedup = record.base_runtime / trajectory.final_runtime;
        let o3_speedup = record.base_runtime / record.o3_runtime;
        let best_speedup = {
            let mut best = ctx.shared.best.lock().unwrap();
            let entry = best.entry(program.clone()).or_insert(agent_speedup);
            if agent_speedup > *entry {
                *entry = agent_speedup;
            }
            *entry
        };
        report.programs.push(ProgramEval {
            program_id: program,
            set,
            sequence: trajectory.arrow_sequence(),
            agent_speedup,
            o3_speedup,
            best_speedup,
        });
    }

    for set in ["training", "validation"] {
        let rows: Vec<&ProgramEval> =
            report.programs.iter().filter(|p| p.set == set).collect();
        let aggregates = match (
            geometric_mean(rows.iter().map(|p| p.agent_speedup)),
            geometric_mean(rows.iter().map(|p| p.best_speedup)),
            geometric_mean(rows.iter().map(|p| p.o3_speedup)),
        ) {
            (Some(agent), Some(best), Some(o3)) => Some(SetAggregates { agent, best, o3 }),
            _ => None,
        };
        match set {
            "training" => report.training = aggregates,
            _ => report.validation = aggregates,
        }
    }

    log_eval(ctx, &report);
    report
}

fn log_eval(ctx: &RunContext, report: &EvalReport) {
    for row in &report.programs {
        ctx.log(report.step, "eval", &row.program_id, "set", serde_json::json!(row.set));
        ctx.log(
            report.step,
            "eval",
            &row.program_id,
            "sequence",
            serde_json::json!(row.sequence),
        );
        for (metric, value) in [
            ("agent_speedup", row.agent_speedup),
            ("o3_speedup", row.o3_speedup),
            ("best_speedup", row.best_speedup),
        ] {
            ctx.log(report.step, "eval", &row.program_id, metric, serde_json::json!(value));
        }
    }
    for (set, aggregates) in
        [("training", &report.training), ("validation", &report.validation)]
    {
        if let Some(a) = aggregates {
            ctx.log(report.step, "eval", set, "geomean_agent", serde_json::json!(a.agent));
            ctx.log(report.step, "eval", set, "geomean_best", serde_json::json!(a.best));
            ctx.log(report.step, "eval", set, "geomean_o3", serde_json::json!(a.o3));
        }
    }
    for (program, message) in &report.faults {
        ctx.log(report.step, "eval", program, "fault", serde_json::json!(message));
    }

    // Per-evaluation table file.
    let path = ctx
        .config
        .persist_root
        .join("evals")
        .join(format!("eval_step_{:08}.tsv", report.step));
    let mut out = String::from("program\tset\tsequence\to3\tagent\tbest\n");
    for row in &report.programs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\n",
            row.program_id, row.set, row.sequence, row.o3_speedup, row.agent_speedup,
            row.best_speedup
        ));
    }
    if let Err(e) = std::fs::write(&path, out) {
        log::error!("eval table write failed: {e}");
    }
}

// ---------------------------------------------------------------------
// Baselines and the training loop.
// ---------------------------------------------------------------------

/// Issue baseline tasks for programs the store does not already cover
/// and wait until every program has baselines or is excluded.
pub fn ensure_baselines(ctx: &RunContext, broker: &Broker) -> Result<(), OrchestratorError> {
    let all: Vec<ProgramId> =
        ctx.train_set.iter().chain(ctx.val_set.iter()).cloned().collect();
    let missing: Vec<ProgramId> = {
        let programs = ctx.shared.programs.lock().unwrap();
        all.iter().filter(|id| !programs.contains_key(*id)).cloned().collect()
    };
    for id in missing {
        let Some(source) = ctx.sources.get(&id) else { continue };
        let task = Task {
            id: ctx.next_task_id(),
            program_id: id.clone(),
            kind: TaskKind::Baseline {
                source_name: source.name.clone(),
                source_text: source.text.clone(),
            },
            policy: ctx.config.benchmark.clone(),
        };
        broker.submit(ctx, task);
    }
    wait_for_baselines(ctx, broker, &all)
}

fn wait_for_baselines(
    ctx: &RunContext,
    broker: &Broker,
    all: &[ProgramId],
) -> Result<(), OrchestratorError> {
    let started = Instant::now();
    let mut last_progress = Instant::now();
    let mut last_done = 0usize;
    loop {
        broker.pump(ctx);
        let done = {
            let programs = ctx.shared.programs.lock().unwrap();
            let excluded = ctx.shared.excluded.lock().unwrap();
            all.iter()
                .filter(|p| programs.contains_key(*p) || excluded.contains_key(*p))
                .count()
        };
        if done == all.len() {
            return Ok(());
        }
        if done > last_done {
            last_done = done;
            last_progress = Instant::now();
        }
        let stall_limit =
            Duration::from_secs(ctx.config.manager.failure_timeout_secs.max(10) * 20);
        if last_progress.elapsed() > stall_limit {
            return Err(OrchestratorError::BaselineStalled {
                done,
                total: all.len(),
                waited: started.elapsed(),
            });
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub evaluations: Vec<EvalReport>,
    pub checkpoint: Option<PathBuf>,
}

/// The full learner/manager loop: baselines, then interleaved
/// exploration, training, and periodic greedy evaluation with
/// checkpoints, until the step budget is reached.
pub fn run_training(ctx: &Arc<RunContext>, broker: &Broker) -> Result<TrainOutcome, OrchestratorError> {
    let net_cfg = NetConfig {
        input_dim: ctx.encoder.dim(),
        width: ctx.config.loop_cfg.width,
        blocks: ctx.config.loop_cfg.blocks,
        n_actions: ctx.space.len(),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(ctx.config.seed);
    let mut learner = match latest_checkpoint(ctx) {
        Some(path) => {
            let (net, meta) = load_checkpoint(&path)?;
            if net.config() != net_cfg {
                return Err(OrchestratorError::Invalid(format!(
                    "checkpoint {} does not match the configured network shape",
                    path.display()
                )));
            }
            let mut learner =
                Learner::new(net, ctx.train_cfg.tau, ctx.train_cfg.learning_rate);
            learner.resume_at(meta.train_step);
            log::info!("resumed from {} at step {}", path.display(), meta.train_step);
            learner
        }
        None => Learner::new(
            QNetwork::new(net_cfg, &mut init_rng),
            ctx.train_cfg.tau,
            ctx.train_cfg.learning_rate,
        ),
    };
    ctx.publish(learner.net());
    ctx.counters.train_steps.store(learner.step(), Ordering::Relaxed);

    ensure_baselines(ctx, broker)?;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed.wrapping_add(0x9e3779b9));
    let mut outcome = TrainOutcome { steps: learner.step(), evaluations: Vec::new(), checkpoint: None };
    let resolver = ContextResolver { ctx };
    let budget = ctx.config.loop_cfg.step_budget;
    let mut starved_rounds = 0u32;
    let mut last_eval_step = learner.step();

    while learner.step() < budget {
        broker.pump(ctx);
        let epsilon = ctx.train_cfg.epsilon(learner.step());
        let explore_low_water = ctx.config.explore_batch(ctx.active_training().len().max(1));
        if broker.pending(ctx) < explore_low_water {
            explore_step(ctx, broker, epsilon, &mut rng);
            broker.pump(ctx);
        }

        match ctx.shared.replay.sample(ctx.train_cfg.batch_size, &mut rng) {
            Err(not_ready) => {
                starved_rounds += 1;
                if broker.pending(ctx) > 0 {
                    starved_rounds = 0;
                    if matches!(broker, Broker::Remote(_)) {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                } else if starved_rounds > 2000 {
                    return Err(OrchestratorError::ReplayStarved {
                        size: not_ready.size,
                        required: not_ready.required,
                    });
                }
                continue;
            }
            Ok(experiences) => {
                starved_rounds = 0;
                let batch = resolver.resolve(&experiences);
                let stats = learner.train_on(&batch)?;
                ctx.counters.train_steps.store(stats.step, Ordering::Relaxed);
                if stats.synced {
                    ctx.publish(learner.net());
                }
                if stats.step % 500 == 0 {
                    ctx.log(stats.step, "train", "", "loss", serde_json::json!(stats.loss));
                }
                if stats.step % ctx.train_cfg.delta == 0 {
                    let report = evaluate(ctx, broker, learner.net(), stats.step);
                    outcome.evaluations.push(report);
                    outcome.checkpoint = Some(write_checkpoint(ctx, &learner)?);
                    last_eval_step = stats.step;
                }
            }
        }
    }

    if learner.step() > last_eval_step {
        let report = evaluate(ctx, broker, learner.net(), learner.step());
        outcome.evaluations.push(report);
        outcome.checkpoint = Some(write_checkpoint(ctx, &learner)?);
    }
    outcome.steps = learner.step();
    Ok(outcome)
}

fn checkpoint_dir(ctx: &RunContext) -> PathBuf {
    ctx.store.checkpoints_dir().join(&ctx.config.run_id)
}

pub fn latest_checkpoint(ctx: &RunContext) -> Option<PathBuf> {
    let pointer = checkpoint_dir(ctx).join("latest.txt");
    let name = std::fs::read_to_string(pointer).ok()?;
    let path = checkpoint_dir(ctx).join(name.trim());
    path.exists().then_some(path)
}

fn write_checkpoint(ctx: &RunContext, learner: &Learner) -> Result<PathBuf, OrchestratorError> {
    let dir = checkpoint_dir(ctx);
    std::fs::create_dir_all(&dir)
        .map_err(|source| OrchestratorError::Io { what: dir.display().to_string(), source })?;
    let name = format!("step-{:08}.qnet", learner.step());
    let path = dir.join(&name);
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        level: ctx.config.level,
        input_dim: ctx.encoder.dim(),
        width: ctx.config.loop_cfg.width,
        blocks: ctx.config.loop_cfg.blocks,
        n_actions: ctx.space.len(),
        mu_max: ctx.mu_max(),
        train_step: learner.step(),
        optimizer: "adam".into(),
        vocab: ctx.encoder.vocab().words().to_vec(),
    };
    save_checkpoint(&path, learner.net(), &meta)?;
    let pointer = dir.join("latest.txt");
    std::fs::write(&pointer, &name)
        .map_err(|source| OrchestratorError::Io { what: pointer.display().to_string(), source })?;
    Ok(path)
}

// ---------------------------------------------------------------------
// Standalone greedy optimization (no store, no manager).
// ---------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub actions: Vec<ActionId>,
    pub final_ir: IrArtifact,
    pub base_runtime: f64,
    pub final_runtime: f64,
    /// Backend failure that truncated the rollout; `actions` then holds
    /// the partial sequence up to the failure.
    pub fault: Option<String>,
}

impl OptimizeOutcome {
    pub fn arrow_sequence(&self) -> String {
        self.actions.iter().map(ToString::to_string).collect::<Vec<_>>().join("→")
    }

    pub fn speedup(&self) -> f64 {
        self.base_runtime / self.final_runtime
    }
}

/// Greedy rollout straight against an environment: used by the
/// `optimize` command and the desk-scale oracle tests. Stops when every
/// legal action predicts a slowdown or the pass budget is spent; a
/// pending parameter selection is always completed first. A failing
/// backend truncates the rollout and reports the partial sequence.
pub fn optimize_once<B: Backend + ?Sized>(
    space: &ActionSpace,
    encoder: &dyn StateEncoder,
    env: &crate::env::Environment<B>,
    q: &dyn QFunction,
    source: &ProgramSource,
    mu_max: usize,
) -> Result<OptimizeOutcome, EnvError> {
    let base_body = env.backend.base_ir(&source.name, &source.text)?;
    let base = IrArtifact::base(&base_body);
    let base_runtime = env.measure_runtime(&source.id, &base.body)?;
    let mut state = AgentState::base(base.id, source.id.clone());
    let mut body = base.clone();
    let mut runtime = base_runtime;
    let mut actions = Vec::new();
    let mut fault = None;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    loop {
        let mask = space.legal_actions(&state.history, mu_max);
        let encoded = encoder.encode(&body.body, &state.history);
        let qvals = q.q(&encoded);
        let Some(action) =
            choose_action(&qvals, &mask, state.history.is_mid_pending(), 0.0, &mut rng)
        else {
            break;
        };
        let outcome = match env.step(space, &state, &body.body, runtime, action, mu_max) {
            Ok(outcome) => outcome,
            Err(e) => {
                fault = Some(e.to_string());
                break;
            }
        };
        actions.push(action);
        state = outcome.next_state;
        if let Some((artifact, measured)) = outcome.result {
            body = artifact;
            runtime = measured;
        }
    }
    Ok(OptimizeOutcome { actions, final_ir: body, base_runtime, final_runtime: runtime, fault })
}
