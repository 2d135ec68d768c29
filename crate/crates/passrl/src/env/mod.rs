//! Applying decoded actions to IR through a pluggable backend,
//! benchmarking the result, and turning runtimes into rewards.

mod llvm;
mod synthetic;

pub use llvm::{LlvmBackend, LlvmBackendConfig};
pub use synthetic::{SyntheticBackend, SyntheticConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionSpace, Invocation};
use crate::state::{
    ActionId, AgentState, ArtifactId, IrArtifact, ProgramId, StateFingerprint,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("backend process failed: {stderr}")]
    BackendFailed { stderr: String },
    #[error("measurement run {run} failed: {message}")]
    RunFailed { run: u32, message: String },
    #[error("{what} exceeded its {seconds}s timeout")]
    Timeout { what: String, seconds: u64 },
    #[error("runtime must be strictly positive, got {value}")]
    NonPositiveRuntime { value: f64 },
    #[error("invalid IR for this backend: {reason}")]
    InvalidIr { reason: String },
    #[error("action error: {0}")]
    Action(#[from] crate::action::ActionError),
    #[error("io error during {what}: {source}")]
    Io { what: String, source: std::io::Error },
}

/// Applies optimizations and produces runtime samples. Implementations
/// are shared by concurrent workers; each call owns its scratch state.
pub trait Backend: Send + Sync {
    /// Compile a source program to its unoptimized IR.
    fn base_ir(&self, source_name: &str, source_text: &str) -> Result<String, EnvError>;

    /// The built-in aggressive pipeline, applied to a base IR.
    fn o3_ir(&self, base_ir: &str) -> Result<String, EnvError>;

    /// Apply one decoded invocation. Deterministic in (ir, invocation).
    fn optimize(&self, ir: &str, invocation: &Invocation) -> Result<String, EnvError>;

    /// Compile the IR and execute it once, returning wall-clock seconds.
    fn compile_and_run(&self, program_id: &str, ir: &str) -> Result<f64, EnvError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn base_ir(&self, source_name: &str, source_text: &str) -> Result<String, EnvError> {
        (**self).base_ir(source_name, source_text)
    }

    fn o3_ir(&self, base_ir: &str) -> Result<String, EnvError> {
        (**self).o3_ir(base_ir)
    }

    fn optimize(&self, ir: &str, invocation: &Invocation) -> Result<String, EnvError> {
        (**self).optimize(ir, invocation)
    }

    fn compile_and_run(&self, program_id: &str, ir: &str) -> Result<f64, EnvError> {
        (**self).compile_and_run(program_id, ir)
    }
}

/// How many times to benchmark an IR, chosen from a single probe run.
/// Repetitions are non-increasing in probe runtime and always land in
/// [20, 1000]; the median of the repeated samples is reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPolicy {
    /// `(probe upper bound in seconds, repetitions)`, ascending bounds.
    pub tiers: Vec<(f64, u32)>,
    /// Repetitions for probes at or beyond the last bound.
    pub floor_reps: u32,
}

pub const MIN_REPETITIONS: u32 = 20;
pub const MAX_REPETITIONS: u32 = 1000;

impl Default for BenchmarkPolicy {
    fn default() -> Self {
        Self {
            tiers: vec![(0.01, 1000), (0.1, 300), (1.0, 100)],
            floor_reps: 20,
        }
    }
}

impl BenchmarkPolicy {
    pub fn validate(&self) -> Result<(), String> {
        let mut prev_bound = 0.0;
        let mut prev_reps = u32::MAX;
        for &(bound, reps) in &self.tiers {
            if bound <= prev_bound {
                return Err(format!("tier bounds must be ascending, got {bound}"));
            }
            if reps > prev_reps {
                return Err("repetitions must be non-increasing in runtime".into());
            }
            if !(MIN_REPETITIONS..=MAX_REPETITIONS).contains(&reps) {
                return Err(format!("repetitions {reps} outside [20, 1000]"));
            }
            prev_bound = bound;
            prev_reps = reps;
        }
        if !(MIN_REPETITIONS..=MAX_REPETITIONS).contains(&self.floor_reps)
            || self.floor_reps > prev_reps
        {
            return Err(format!("floor repetitions {} invalid", self.floor_reps));
        }
        Ok(())
    }

    /// Repetition count for a probe runtime, clamped to [20, 1000].
    pub fn repetitions(&self, probe_seconds: f64) -> u32 {
        for &(bound, reps) in &self.tiers {
            if probe_seconds < bound {
                return reps.clamp(MIN_REPETITIONS, MAX_REPETITIONS);
            }
        }
        self.floor_reps.clamp(MIN_REPETITIONS, MAX_REPETITIONS)
    }
}

/// ln(t_before / t_after): positive for speedups, negative for slowdowns,
/// additive along a trajectory.
pub fn reward(t_before: f64, t_after: f64) -> Result<f64, EnvError> {
    for value in [t_before, t_after] {
        if !(value > 0.0) || !value.is_finite() {
            return Err(EnvError::NonPositiveRuntime { value });
        }
    }
    Ok((t_before / t_after).ln())
}

/// Median of the samples; even-length inputs average the middle pair.
pub fn median(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "median of no samples");
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Outcome of one environment step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub next_state: AgentState,
    pub reward: f64,
    /// Present iff the action produced an invocation; intermediate
    /// parameter selections carry `None` and never touch the backend.
    pub result: Option<(IrArtifact, f64)>,
}

impl StepOutcome {
    /// True for level-L steps that only narrowed a parameter selection.
    pub fn is_intermediate(&self) -> bool {
        self.result.is_none()
    }
}

/// A backend paired with a benchmarking policy.
pub struct Environment<B: Backend + ?Sized> {
    pub policy: BenchmarkPolicy,
    pub backend: B,
}

impl<B: Backend> Environment<B> {
    pub fn new(backend: B, policy: BenchmarkPolicy) -> Self {
        Self { policy, backend }
    }
}

impl<B: Backend + ?Sized> Environment<B> {
    /// One probe run picks the repetition count; the median of that many
    /// further runs is the measured runtime.
    pub fn measure_runtime(&self, program_id: &str, ir: &str) -> Result<f64, EnvError> {
        measure_runtime(&self.backend, &self.policy, program_id, ir)
    }

    /// Apply `action` to `state`, benchmarking only when the action
    /// completes an invocation. `runtime_before` is the known runtime of
    /// the state's IR. The input state is never mutated.
    pub fn step(
        &self,
        space: &ActionSpace,
        state: &AgentState,
        ir_body: &str,
        runtime_before: f64,
        action: ActionId,
        mu_max: usize,
    ) -> Result<StepOutcome, EnvError> {
        let applied = space.apply_action(&state.history, action, mu_max)?;
        match applied.invocation {
            None => Ok(StepOutcome {
                next_state: AgentState {
                    ir: state.ir,
                    history: applied.history,
                    program_id: state.program_id.clone(),
                },
                reward: 0.0,
                result: None,
            }),
            Some(invocation) => {
                let optimized = self.backend.optimize(ir_body, &invocation)?;
                let artifact = IrArtifact::optimized(&optimized, state.ir, action);
                let runtime = self.measure_runtime(&state.program_id, &artifact.body)?;
                Ok(StepOutcome {
                    next_state: AgentState {
                        ir: artifact.id,
                        history: applied.history,
                        program_id: state.program_id.clone(),
                    },
                    reward: reward(runtime_before, runtime)?,
                    result: Some((artifact, runtime)),
                })
            }
        }
    }

    /// Produce and benchmark the base IR and its O3 counterpart.
    pub fn baseline(&self, source: &ProgramSource) -> Result<Baseline, EnvError> {
        let base_body = self.backend.base_ir(&source.name, &source.text)?;
        let base = IrArtifact::base(&base_body);
        let base_runtime = self.measure_runtime(&source.id, &base.body)?;
        let o3_body = self.backend.o3_ir(&base.body)?;
        let o3 = IrArtifact::o3(&o3_body);
        let o3_runtime = self.measure_runtime(&source.id, &o3.body)?;
        Ok(Baseline { base, base_runtime, o3, o3_runtime })
    }
}

pub fn measure_runtime(
    backend: &(impl Backend + ?Sized),
    policy: &BenchmarkPolicy,
    program_id: &str,
    ir: &str,
) -> Result<f64, EnvError> {
    let probe = backend
        .compile_and_run(program_id, ir)
        .map_err(|e| EnvError::RunFailed { run: 0, message: e.to_string() })?;
    let reps = policy.repetitions(probe);
    let mut samples = Vec::with_capacity(reps as usize);
    for run in 1..=reps {
        let sample = backend
            .compile_and_run(program_id, ir)
            .map_err(|e| EnvError::RunFailed { run, message: e.to_string() })?;
        samples.push(sample);
    }
    Ok(median(&samples))
}

/// A dataset entry: the program id, the file name it came from (the
/// extension selects the frontend language), and its text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramSource {
    pub id: ProgramId,
    pub name: String,
    pub text: String,
}

/// Result of [`Environment::baseline`].
#[derive(Clone, Debug)]
pub struct Baseline {
    pub base: IrArtifact,
    pub base_runtime: f64,
    pub o3: IrArtifact,
    pub o3_runtime: f64,
}

/// A unit of work for a worker: either establish a program's baselines or
/// execute one state-action transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub program_id: ProgramId,
    pub kind: TaskKind,
    pub policy: BenchmarkPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    Baseline {
        source_name: String,
        source_text: String,
    },
    Transition {
        state: StateFingerprint,
        action: ActionId,
        ir_id: ArtifactId,
        /// Omitted on the wire when the worker already holds the body.
        ir_body: Option<String>,
        invocation: Invocation,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: u64,
    pub worker: String,
    pub outcome: TaskOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskOutcome {
    Baseline {
        base_ir: String,
        base_runtime: f64,
        o3_ir: String,
        o3_runtime: f64,
    },
    Transition {
        result_ir: String,
        runtime: f64,
    },
    Fault {
        message: String,
        /// Missing IR body faults are retried after the manager re-sends
        /// the body; other faults consume the retry budget.
        missing_ir: bool,
    },
}

/// Execute a task against a backend. Faults are folded into the outcome
/// so workers always have something to report.
pub fn execute_task(
    backend: &(impl Backend + ?Sized),
    task: &Task,
    worker: &str,
) -> TaskResult {
    let outcome = match &task.kind {
        TaskKind::Baseline { source_name, source_text } => {
            let source = ProgramSource {
                id: task.program_id.clone(),
                name: source_name.clone(),
                text: source_text.clone(),
            };
            run_baseline(backend, &task.policy, &source)
        }
        TaskKind::Transition { ir_body, invocation, .. } => match ir_body {
            None => TaskOutcome::Fault {
                message: "ir body not available on this worker".into(),
                missing_ir: true,
            },
            Some(body) => run_transition(backend, &task.policy, &task.program_id, body, invocation),
        },
    };
    TaskResult { task_id: task.id, worker: worker.to_string(), outcome }
}

fn run_baseline(
    backend: &(impl Backend + ?Sized),
    policy: &BenchmarkPolicy,
    source: &ProgramSource,
) -> TaskOutcome {
    let attempt = || -> Result<TaskOutcome, EnvError> {
        let base = backend.base_ir(&source.name, &source.text)?;
        let base = crate::state::canonicalize_ir(&base);
        let base_runtime = measure_runtime(backend, policy, &source.id, &base)?;
        let o3 = backend.o3_ir(&base)?;
        let o3 = crate::state::canonicalize_ir(&o3);
        let o3_runtime = measure_runtime(backend, policy, &source.id, &o3)?;
        Ok(TaskOutcome::Baseline { base_ir: base, base_runtime, o3_ir: o3, o3_runtime })
    };
    attempt().unwrap_or_else(|e| TaskOutcome::Fault { message: e.to_string(), missing_ir: false })
}

fn run_transition(
    backend: &(impl Backend + ?Sized),
    policy: &BenchmarkPolicy,
    program_id: &str,
    ir_body: &str,
    invocation: &Invocation,
) -> TaskOutcome {
    let attempt = || -> Result<TaskOutcome, EnvError> {
        let optimized = backend.optimize(ir_body, invocation)?;
        let optimized = crate::state::canonicalize_ir(&optimized);
        let runtime = measure_runtime(backend, policy, program_id, &optimized)?;
        Ok(TaskOutcome::Transition { result_ir: optimized, runtime })
    };
    attempt().unwrap_or_else(|e| TaskOutcome::Fault { message: e.to_string(), missing_ir: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Backend with a fixed true runtime and optional multiplicative
    /// gaussian noise; used to exercise the benchmarking policy.
    struct FixedRuntimeBackend {
        runtime: f64,
        sigma: f64,
        rng: Mutex<rand_chacha::ChaCha8Rng>,
    }

    impl FixedRuntimeBackend {
        fn new(runtime: f64, sigma: f64, seed: u64) -> Self {
            use rand::SeedableRng;
            Self { runtime, sigma, rng: Mutex::new(rand_chacha::ChaCha8Rng::seed_from_u64(seed)) }
        }
    }

    impl Backend for FixedRuntimeBackend {
        fn base_ir(&self, _: &str, text: &str) -> Result<String, EnvError> {
            Ok(text.to_string())
        }

        fn o3_ir(&self, ir: &str) -> Result<String, EnvError> {
            Ok(ir.to_string())
        }

        fn optimize(&self, ir: &str, _: &Invocation) -> Result<String, EnvError> {
            Ok(ir.to_string())
        }

        fn compile_and_run(&self, _: &str, _: &str) -> Result<f64, EnvError> {
            if self.sigma == 0.0 {
                return Ok(self.runtime);
            }
            use rand_distr::Distribution;
            let normal = rand_distr::Normal::new(0.0, self.sigma).unwrap();
            let factor = (1.0 + normal.sample(&mut *self.rng.lock().unwrap())).max(0.01);
            Ok(self.runtime * factor)
        }
    }

    #[test]
    fn reward_matches_log_speedup() {
        assert!((reward(2.0, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(reward(1.5, 1.5).unwrap(), 0.0);
        assert!((reward(1.0, 3.0).unwrap() - (-(3f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn reward_telescopes_along_a_chain() {
        let r = reward(4.0, 2.0).unwrap() + reward(2.0, 1.0).unwrap();
        assert!((r - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reward_rejects_non_positive_runtimes() {
        assert!(reward(0.0, 1.0).is_err());
        assert!(reward(1.0, -2.0).is_err());
    }

    #[test]
    fn policy_tiers_match_decided_schedule() {
        let policy = BenchmarkPolicy::default();
        policy.validate().unwrap();
        assert_eq!(policy.repetitions(0.005), 1000);
        assert_eq!(policy.repetitions(0.05), 300);
        assert_eq!(policy.repetitions(0.5), 100);
        assert_eq!(policy.repetitions(2.0), 20);
    }

    #[test]
    fn repetitions_always_in_bounds() {
        let policy = BenchmarkPolicy::default();
        let mut probe = 1e-6;
        while probe < 1e3 {
            let reps = policy.repetitions(probe);
            assert!((MIN_REPETITIONS..=MAX_REPETITIONS).contains(&reps), "probe {probe}");
            probe *= 3.0;
        }
    }

    #[test]
    fn invalid_policies_are_rejected() {
        let increasing = BenchmarkPolicy { tiers: vec![(0.1, 100), (1.0, 300)], floor_reps: 20 };
        assert!(increasing.validate().is_err());
        let out_of_bounds = BenchmarkPolicy { tiers: vec![(0.1, 5000)], floor_reps: 20 };
        assert!(out_of_bounds.validate().is_err());
    }

    #[test]
    fn median_of_odd_and_even_sample_counts() {
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0, 100.0]), 3.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn measure_runtime_returns_truth_without_noise() {
        let backend = FixedRuntimeBackend::new(0.5, 0.0, 1);
        let got = measure_runtime(&backend, &BenchmarkPolicy::default(), "p", "ir").unwrap();
        assert_eq!(got, 0.5);
    }

    #[test]
    fn median_estimate_is_robust_to_five_percent_noise() {
        // At 101 repetitions the median must land within 2% of truth in
        // at least 99% of 1000 trials.
        let policy = BenchmarkPolicy { tiers: vec![(f64::MAX, 101)], floor_reps: 101 };
        let truth = 0.5;
        let mut within = 0;
        for trial in 0..1000u64 {
            let backend = FixedRuntimeBackend::new(truth, 0.05, trial);
            let estimate = measure_runtime(&backend, &policy, "p", "ir").unwrap();
            if (estimate - truth).abs() / truth <= 0.02 {
                within += 1;
            }
        }
        assert!(within >= 990, "only {within}/1000 trials within 2%");
    }

    #[test]
    fn execute_task_reports_missing_ir_body() {
        let backend = FixedRuntimeBackend::new(0.5, 0.0, 1);
        let task = Task {
            id: 1,
            program_id: "p".into(),
            kind: TaskKind::Transition {
                state: crate::state::fingerprint(&AgentState::base(
                    IrArtifact::base("x").id,
                    "p",
                )),
                action: 0,
                ir_id: IrArtifact::base("x").id,
                ir_body: None,
                invocation: Invocation::passes(&["s0"]),
            },
            policy: BenchmarkPolicy::default(),
        };
        let result = execute_task(&backend, &task, "w");
        assert!(matches!(result.outcome, TaskOutcome::Fault { missing_ir: true, .. }));
    }
}
