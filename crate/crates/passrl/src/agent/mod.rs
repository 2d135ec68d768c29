//! Action selection, the ε schedule, TD-loss with fixed targets, and the
//! training step that drives the Q-network.

mod checkpoint;
mod net;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta,
    CHECKPOINT_FORMAT_VERSION,
};
pub use net::{Adam, DimensionMismatch, GradientSet, NetConfig, QNetwork};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{ActionId, Experience};

/// Training hyperparameters. `delta` (evaluation period) must be a
/// positive multiple of `tau` (target-sync period).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau: u64,
    pub delta: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    pub mu_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            tau: 100,
            delta: 1000,
            batch_size: 32,
            learning_rate: 1e-3,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_anneal_steps: 10_000,
            mu_max: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.tau == 0 {
            return Err("tau must be positive".into());
        }
        if self.delta == 0 || self.delta % self.tau != 0 {
            return Err(format!(
                "delta {} must be a positive multiple of tau {}",
                self.delta, self.tau
            ));
        }
        if self.batch_size == 0 {
            return Err("batch size must be positive".into());
        }
        for (name, value) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(format!("{name} {value} outside [0, 1]"));
            }
        }
        if self.mu_max == 0 {
            return Err("mu_max must be positive".into());
        }
        Ok(())
    }

    /// Linearly annealed exploration rate, clamped at `epsilon_end`.
    pub fn epsilon(&self, step: u64) -> f64 {
        if self.epsilon_anneal_steps == 0 {
            return self.epsilon_end;
        }
        let slope = (self.epsilon_start - self.epsilon_end) / self.epsilon_anneal_steps as f64;
        (self.epsilon_start - step as f64 * slope).max(self.epsilon_end)
    }
}

/// Anything that scores encoded states; lets rollouts run against the
/// real network or a scripted stand-in.
pub trait QFunction {
    fn q(&self, encoded: &[f64]) -> Vec<f64>;
}

impl QFunction for QNetwork {
    fn q(&self, encoded: &[f64]) -> Vec<f64> {
        self.q_values(encoded).expect("encoder and network dimensions agree")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no legal action in mask")]
pub struct NoLegalAction;

/// Greedy argmax over legal actions; ties break toward the lowest id.
pub fn masked_argmax(q: &[f64], mask: &[bool]) -> Option<(ActionId, f64)> {
    let mut best: Option<(ActionId, f64)> = None;
    for (i, (&value, &legal)) in q.iter().zip(mask).enumerate() {
        if !legal {
            continue;
        }
        match best {
            Some((_, best_value)) if value <= best_value => {}
            _ => best = Some((i as ActionId, value)),
        }
    }
    best
}

/// ε-greedy selection: with probability ε a uniform draw over legal
/// actions, otherwise the masked argmax.
pub fn select_action(
    net: &impl QFunction,
    encoded: &[f64],
    epsilon: f64,
    mask: &[bool],
    rng: &mut impl Rng,
) -> Result<ActionId, NoLegalAction> {
    let legal: Vec<ActionId> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| l.then_some(i as ActionId))
        .collect();
    if legal.is_empty() {
        return Err(NoLegalAction);
    }
    if rng.gen::<f64>() < epsilon {
        return Ok(legal[rng.gen_range(0..legal.len())]);
    }
    let q = net.q(encoded);
    Ok(masked_argmax(&q, mask).expect("legal set is non-empty").0)
}

/// A dense batch ready for the network: experiences resolved into encoded
/// states, next-state legality masks, per-transition discounts, and
/// terminal flags.
pub struct TrainingBatch {
    pub states: Array2<f64>,
    pub actions: Vec<ActionId>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub next_masks: Vec<Vec<bool>>,
    /// Whether the episode may end by choice in the next state (it may
    /// whenever no parameter selection is pending there). When set, the
    /// bootstrap maximum includes the stop option, worth 0.
    pub next_can_stop: Vec<bool>,
    pub discounts: Vec<f64>,
    pub terminals: Vec<bool>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Resolves sampled experiences into a [`TrainingBatch`]. The
/// orchestrator backs this with its state index; tests use table lookups.
pub trait BatchResolver {
    fn resolve(&self, experiences: &[Experience]) -> TrainingBatch;
}

/// Per-example fixed targets: `r` when terminal, otherwise
/// `r + d · max over legal a' of Q_target(s', a')`. Where the episode may
/// end by choice (`next_can_stop`), the maximum also ranges over the stop
/// option, worth 0 — the value an agent attains by simply finishing. The
/// maximum over an empty legal set contributes nothing.
fn fixed_targets(batch: &TrainingBatch, target_net: &QNetwork) -> Vec<f64> {
    let q_next = target_net.forward(&batch.next_states);
    (0..batch.len())
        .map(|i| {
            if batch.terminals[i] {
                return batch.rewards[i];
            }
            let row: Vec<f64> = q_next.row(i).to_vec();
            let continued = masked_argmax(&row, &batch.next_masks[i])
                .map(|(_, v)| v)
                .unwrap_or(0.0);
            let bootstrap =
                if batch.next_can_stop[i] { continued.max(0.0) } else { continued };
            batch.rewards[i] + batch.discounts[i] * bootstrap
        })
        .collect()
}

/// Mean squared gap between predicted Q-values and the fixed targets;
/// targets are constants with no gradient through the target network.
pub fn td_loss(batch: &TrainingBatch, net: &QNetwork, target_net: &QNetwork) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty(), "td_loss of an empty batch");
    let q = net.forward(&batch.states);
    let targets = fixed_targets(batch, target_net);
    let loss = batch
        .actions
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let diff = q[[i, a as usize]] - targets[i];
            diff * diff
        })
        .sum::<f64>()
        / batch.len() as f64;
    (loss, targets)
}

/// Analytic gradients of [`td_loss`] with respect to every weight.
pub fn gradients(
    net: &QNetwork,
    target_net: &QNetwork,
    batch: &TrainingBatch,
) -> (f64, GradientSet) {
    assert!(!batch.is_empty(), "gradients of an empty batch");
    let (q, cache) = net.forward_cached(&batch.states);
    let targets = fixed_targets(batch, target_net);
    let n = batch.len() as f64;
    let mut dq = Array2::zeros(q.raw_dim());
    let mut loss = 0.0;
    for (i, &a) in batch.actions.iter().enumerate() {
        let diff = q[[i, a as usize]] - targets[i];
        loss += diff * diff;
        dq[[i, a as usize]] = 2.0 * diff / n;
    }
    (loss / n, net.backward(&cache, &dq))
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}; batch dump: {dump}")]
    NonFiniteLoss { step: u64, dump: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStats {
    pub step: u64,
    pub loss: f64,
    /// Whether this step copied the online weights into the target.
    pub synced: bool,
}

/// Owns the online and target networks and applies one gradient step per
/// batch; every `tau` steps the target becomes an exact copy.
pub struct Learner {
    net: QNetwork,
    target: QNetwork,
    optimizer: Adam,
    tau: u64,
    step: u64,
}

impl Learner {
    pub fn new(net: QNetwork, tau: u64, learning_rate: f64) -> Self {
        assert!(tau > 0, "tau must be positive");
        let target = net.clone();
        Self { net, target, optimizer: Adam::new(learning_rate), tau, step: 0 }
    }

    pub fn net(&self) -> &QNetwork {
        &self.net
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Continue counting from a checkpointed step (target stays a copy).
    pub fn resume_at(&mut self, step: u64) {
        self.step = step;
    }

    pub fn train_on(&mut self, batch: &TrainingBatch) -> Result<TrainStats, TrainError> {
        let (loss, grads) = gradients(&self.net, &self.target, batch);
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                dump: format!(
                    "batch of {} (rewards {:?}, discounts {:?}, terminals {:?})",
                    batch.len(),
                    batch.rewards,
                    batch.discounts,
                    batch.terminals
                ),
            });
        }
        self.optimizer.apply(&mut self.net, &grads);
        self.step += 1;
        let synced = self.step % self.tau == 0;
        if synced {
            self.target = self.net.clone();
        }
        Ok(TrainStats { step: self.step, loss, synced })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct FixedQ(Vec<f64>);

    impl QFunction for FixedQ {
        fn q(&self, _: &[f64]) -> Vec<f64> {
            self.0.clone()
        }
    }

    fn batch_of(rows: Vec<(Vec<f64>, ActionId, f64, Vec<f64>, Vec<bool>, f64, bool)>) -> TrainingBatch {
        let dim = rows[0].0.len();
        let n = rows.len();
        let mut states = Vec::new();
        let mut next_states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut next_masks = Vec::new();
        let mut discounts = Vec::new();
        let mut terminals = Vec::new();
        for (s, a, r, s2, mask, d, t) in rows {
            states.extend(s);
            next_states.extend(s2);
            actions.push(a);
            rewards.push(r);
            next_masks.push(mask);
            discounts.push(d);
            terminals.push(t);
        }
        TrainingBatch {
            states: Array2::from_shape_vec((n, dim), states).unwrap(),
            actions,
            rewards,
            next_states: Array2::from_shape_vec((n, dim), next_states).unwrap(),
            next_masks,
            next_can_stop: vec![false; n],
            discounts,
            terminals,
        }
    }

    fn tiny(seed: u64) -> QNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QNetwork::new(NetConfig { input_dim: 3, width: 8, blocks: 1, n_actions: 3 }, &mut rng)
    }

    #[test]
    fn epsilon_anneals_linearly_and_clamps() {
        let cfg = TrainConfig {
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_anneal_steps: 1000,
            ..Default::default()
        };
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(500) - 0.55).abs() < 1e-12);
        assert_eq!(cfg.epsilon(1_000_000), 0.1);
    }

    #[test]
    fn delta_must_be_a_multiple_of_tau() {
        let mut cfg = TrainConfig::default();
        cfg.tau = 3;
        cfg.delta = 10;
        assert!(cfg.validate().is_err());
        cfg.delta = 9;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn greedy_ties_break_to_lowest_id() {
        let q = FixedQ(vec![0.2, 0.7, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let action = select_action(&q, &[0.0], 0.0, &[true, true, true], &mut rng).unwrap();
        assert_eq!(action, 1);
    }

    #[test]
    fn masked_greedy_ignores_the_global_argmax() {
        let q = FixedQ(vec![0.2, 0.9, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let action = select_action(&q, &[0.0], 0.0, &[true, false, true], &mut rng).unwrap();
        assert_eq!(action, 2);
    }

    #[test]
    fn empty_mask_signals_no_legal_action() {
        let q = FixedQ(vec![1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            select_action(&q, &[0.0], 0.5, &[false, false], &mut rng),
            Err(NoLegalAction)
        );
    }

    #[test]
    fn full_exploration_is_uniform_over_the_legal_set() {
        // χ²-style check over 10^4 draws with 3 legal actions: each count
        // within 5σ of n/3.
        let q = FixedQ(vec![9.0, 0.0, 0.0, 0.0]);
        let mask = [true, true, false, true];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0u32; 4];
        let n = 10_000;
        for _ in 0..n {
            let a = select_action(&q, &[0.0], 1.0, &mask, &mut rng).unwrap();
            counts[a as usize] += 1;
        }
        assert_eq!(counts[2], 0);
        let p: f64 = 1.0 / 3.0;
        let expected = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &i in &[0usize, 1, 3] {
            assert!(
                (counts[i] as f64 - expected).abs() < 5.0 * sigma,
                "action {i} drawn {} times",
                counts[i]
            );
        }
    }

    #[test]
    fn argmax_is_invariant_under_output_bias_shift() {
        let mut net = tiny(3);
        let encoded = [0.2, -0.1, 0.4];
        let mask = [true, true, true];
        let before = masked_argmax(&net.q(&encoded), &mask).unwrap().0;
        net.shift_output_bias(17.5);
        let after = masked_argmax(&net.q(&encoded), &mask).unwrap().0;
        assert_eq!(before, after);
    }

    #[test]
    fn targets_follow_the_bellman_form() {
        let mut target = tiny(1);
        // Zero the target net so Q_target == 0 everywhere, then check the
        // three contract cases against hand-computed values.
        let (mats, vecs) = target.tensors_mut();
        for m in mats {
            m.fill(0.0);
        }
        for v in vecs {
            v.fill(0.0);
        }
        let all = vec![true, true, true];
        let batch = batch_of(vec![
            (vec![0.0; 3], 0, 0.5, vec![0.0; 3], all.clone(), 0.9, false),
            (vec![0.0; 3], 1, -0.2, vec![0.0; 3], all.clone(), 0.9, true),
            (vec![0.0; 3], 2, 0.0, vec![0.0; 3], all, 1.0, false),
        ]);
        let targets = fixed_targets(&batch, &target);
        assert_eq!(targets, vec![0.5, -0.2, 0.0]);
    }

    #[test]
    fn stop_option_floors_the_bootstrap_where_stopping_is_allowed() {
        let mut target = tiny(2);
        let (mats, vecs) = target.tensors_mut();
        for m in mats {
            m.fill(0.0);
        }
        for v in vecs {
            v.fill(0.0);
        }
        // Zero net plus a negative output bias: every Q_target is -0.4.
        target.shift_output_bias(-0.4);
        let all = vec![true, true, true];
        let mut batch = batch_of(vec![
            (vec![0.0; 3], 0, 0.5, vec![0.0; 3], all.clone(), 1.0, false),
            (vec![0.0; 3], 0, 0.5, vec![0.0; 3], all, 1.0, false),
        ]);
        batch.next_can_stop = vec![true, false];
        let targets = fixed_targets(&batch, &target);
        assert_eq!(targets[0], 0.5, "stopping is worth more than any continuation");
        assert!((targets[1] - 0.1).abs() < 1e-12, "without the stop option the max is -0.4");
    }

    #[test]
    fn nonterminal_target_bootstraps_with_per_transition_discount() {
        struct Case {
            q_next: Vec<f64>,
            discount: f64,
            reward: f64,
            expected: f64,
        }
        // r + d·maxQ, max over legal actions only.
        let cases = [
            Case { q_next: vec![1.0, 0.3], discount: 0.9, reward: 0.5, expected: 1.4 },
            Case { q_next: vec![2.0, 0.3], discount: 1.0, reward: 0.0, expected: 2.0 },
        ];
        for case in cases {
            let bootstrap = masked_argmax(&case.q_next, &[true, true]).unwrap().1;
            let target = case.reward + case.discount * bootstrap;
            assert!((target - case.expected).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_training_on_one_batch_reduces_loss() {
        let net = tiny(5);
        let mut learner = Learner::new(net, 10, 1e-2);
        let all = vec![true, true, true];
        let batch = batch_of(vec![
            (vec![1.0, 0.0, 0.0], 0, 0.7, vec![0.0, 1.0, 0.0], all.clone(), 0.9, true),
            (vec![0.0, 1.0, 0.0], 2, -0.3, vec![0.0, 0.0, 1.0], all, 0.9, true),
        ]);
        let initial = learner.train_on(&batch).unwrap().loss;
        let mut last = initial;
        for _ in 0..99 {
            last = learner.train_on(&batch).unwrap().loss;
        }
        assert!(last < initial, "loss {initial} -> {last} did not decrease");
    }

    #[test]
    fn target_syncs_exactly_every_tau_steps() {
        let net = tiny(6);
        let mut learner = Learner::new(net, 4, 1e-3);
        let all = vec![true, true, true];
        let batch = batch_of(vec![(
            vec![0.5, 0.5, 0.5],
            1,
            0.2,
            vec![0.1, 0.1, 0.1],
            all,
            0.9,
            false,
        )]);
        for i in 1..=12u64 {
            let stats = learner.train_on(&batch).unwrap();
            assert_eq!(stats.synced, i % 4 == 0, "step {i}");
            if stats.synced {
                assert_eq!(learner.net(), learner.target(), "sync must be an exact copy");
            } else {
                assert_ne!(learner.net(), learner.target(), "target frozen between syncs");
            }
        }
    }
}
