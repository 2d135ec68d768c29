//! End-to-end checks of the learner/manager machinery on the synthetic
//! backend, all in-process through the local broker.

use std::path::Path;
use std::sync::Arc;

use passrl::config::RunConfig;
use passrl::env::{SyntheticBackend, SyntheticConfig};
use passrl::orchestrator::{
    ensure_baselines, evaluate, explore_step, init_run, run_training, Broker, RunContext,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_synthetic_dataset(dir: &Path, cfg: &SyntheticConfig, count: u32) {
    for index in 0..count {
        let body = SyntheticBackend::generate_program(cfg, index);
        std::fs::write(dir.join(format!("prog{index:02}.tok")), body).unwrap();
    }
}

fn small_config(root: &Path, programs: u32, step_budget: u64) -> RunConfig {
    let synth = SyntheticConfig { seed: 11, token_len: 12, alphabet: 8, n_actions: 5, noise_sigma: 0.0 };
    let dataset_dir = root.join("programs");
    std::fs::create_dir_all(&dataset_dir).unwrap();
    write_synthetic_dataset(&dataset_dir, &synth, programs);
    let toml_text = format!(
        r#"
            run_id = "itest"
            level = "H"
            seed = 5
            persist_root = {persist:?}

            [dataset]
            root = {dataset:?}
            split_ratio = "4:1"
            shuffle_seed = 3

            [backend]
            kind = "synthetic"
            [backend.synthetic]
            seed = 11
            token_len = 12
            alphabet = 8
            n_actions = 5

            [train]
            gamma = 0.9
            tau = 20
            delta = 200
            batch_size = 16
            learning_rate = 1e-3
            epsilon_start = 1.0
            epsilon_end = 0.1
            epsilon_anneal_steps = 400
            mu_max = 3

            [loop]
            step_budget = {step_budget}
            replay_capacity = 50000
            replay_min_fill = 32
            blocks = 1
            width = 32

            [manager]
            eval_timeout_secs = 2
        "#,
        persist = root.join("run").to_string_lossy(),
        dataset = dataset_dir.to_string_lossy(),
        step_budget = step_budget,
    );
    let config: RunConfig = toml::from_str(&toml_text).unwrap();
    config.validate().unwrap();
    config
}

fn local_broker(ctx: &Arc<RunContext>) -> Broker {
    Broker::local(ctx.make_backend().unwrap())
}

#[test]
fn split_honors_ratio_and_rounding() {
    let ids: Vec<String> = (0..109).map(|i| format!("p{i:03}")).collect();
    let (train, val) = passrl::orchestrator::split_dataset(&ids, (4, 1), 7);
    assert_eq!(train.len(), 87);
    assert_eq!(val.len(), 22);
    let (train2, val2) = passrl::orchestrator::split_dataset(&ids, (4, 1), 7);
    assert_eq!(train, train2, "same shuffle seed, same split");
    assert_eq!(val, val2);
    let mut all: Vec<String> = train.iter().chain(val.iter()).cloned().collect();
    all.sort();
    let mut expected = ids.clone();
    expected.sort();
    assert_eq!(all, expected, "split is a partition");
}

#[test]
fn training_runs_end_to_end_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 5, 400);
    let ctx = init_run(config).unwrap();
    let broker = local_broker(&ctx);
    let outcome = run_training(&ctx, &broker).unwrap();
    assert_eq!(outcome.steps, 400);
    assert!(!outcome.evaluations.is_empty());
    let report = outcome.evaluations.last().unwrap();
    let training = report.training.expect("training aggregates");
    assert!(training.agent > 0.0 && training.agent.is_finite());
    assert!(training.best >= training.agent - 1e-12, "best observed bounds the agent");
    assert!(outcome.checkpoint.as_ref().unwrap().exists());

    // Every experience in replay must reference a stored transition.
    for experience in ctx.shared.replay.snapshot() {
        let key = passrl::state::TransitionKey {
            state: experience.state,
            action: experience.action,
        };
        assert!(
            ctx.store.lookup_transition(&key).is_some(),
            "experience without a stored transition record"
        );
    }

    // The run log feeds the report pipeline.
    let records = passrl::report::parse_run_log(&ctx.config.persist_root.join("run.log")).unwrap();
    let tables = passrl::report::build_report(&records).unwrap();
    assert!(!tables.rows.is_empty());
    assert!(!tables.series.is_empty());
    // The best-observed curve never decreases.
    for set in ["training", "validation"] {
        let best: Vec<f64> = tables
            .series
            .iter()
            .filter(|p| p.set == set)
            .map(|p| p.best_geomean)
            .collect();
        for pair in best.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "best-observed series decreased: {best:?}");
        }
    }
}

#[test]
fn warm_restart_reissues_no_baselines_and_repopulates_replay() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 5, 150);
    let (first_baselines, stored_transitions) = {
        let ctx = init_run(config.clone()).unwrap();
        let broker = local_broker(&ctx);
        run_training(&ctx, &broker).unwrap();
        (
            ctx.counters.baseline_tasks_issued.load(std::sync::atomic::Ordering::Relaxed),
            ctx.store.transition_count(),
        )
    };
    assert_eq!(first_baselines, 5, "cold start runs baselines for all programs");
    assert!(stored_transitions > 0);

    let ctx = init_run(config).unwrap();
    assert_eq!(
        ctx.shared.replay.len(),
        stored_transitions,
        "replay repopulates with exactly the stored transitions"
    );
    let broker = local_broker(&ctx);
    ensure_baselines(&ctx, &broker).unwrap();
    assert_eq!(
        ctx.counters.baseline_tasks_issued.load(std::sync::atomic::Ordering::Relaxed),
        0,
        "warm store schedules no duplicate baseline work"
    );
}

#[test]
fn evaluation_is_deterministic_on_a_cached_graph() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 5, 150);
    let ctx = init_run(config).unwrap();
    let broker = local_broker(&ctx);
    run_training(&ctx, &broker).unwrap();

    let q = ctx.published_q();
    let first = evaluate(&ctx, &broker, q.as_ref(), 9999);
    let second = evaluate(&ctx, &broker, q.as_ref(), 9999);
    assert_eq!(first.programs.len(), second.programs.len());
    for (a, b) in first.programs.iter().zip(&second.programs) {
        assert_eq!(a.program_id, b.program_id);
        assert_eq!(a.sequence, b.sequence, "frozen weights, frozen sequences");
        assert_eq!(a.agent_speedup, b.agent_speedup);
    }
    assert_eq!(first.training, second.training);
}

#[test]
fn learner_trains_while_worker_pool_is_stalled() {
    // A remote broker with no workers leaves tasks queued; with a filled
    // replay the learner must keep stepping anyway.
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path(), 5, 80);
    // Fill the store first with a local run.
    let ctx = init_run(config.clone()).unwrap();
    let broker = local_broker(&ctx);
    run_training(&ctx, &broker).unwrap();
    drop(ctx);

    // Now a manager with zero connected workers.
    config.manager.listen = "127.0.0.1:0".into();
    config.loop_cfg.step_budget = 160;
    let ctx = init_run(config).unwrap();
    let handle =
        passrl::orchestrator::ManagerHandle::start(ctx.clone(), "127.0.0.1:0").unwrap();
    let broker = Broker::Remote(handle);
    assert!(ctx.shared.replay.is_ready(), "warm replay is ready before any worker exists");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    explore_step(&ctx, &broker, 0.5, &mut rng);
    let outcome = run_training(&ctx, &broker).unwrap();
    broker.shutdown();
    assert_eq!(outcome.steps, 160, "training advanced despite the stalled pool");
}
