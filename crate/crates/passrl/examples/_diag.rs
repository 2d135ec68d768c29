// scratch diagnostic for the oracle-equivalence criterion (removed later)
use std::collections::HashMap;
use std::sync::Arc;

use passrl::action::Invocation;
use passrl::config::RunConfig;
use passrl::env::{Backend, SyntheticBackend, SyntheticConfig};
use passrl::orchestrator::{greedy_rollout, init_run, run_training, Broker};

fn oracle_tree(
    backend: &SyntheticBackend,
    ir: &str,
    n_actions: u32,
    depth_left: usize,
    best: &mut f64,
    best_seq: &mut Vec<u32>,
    prefix: &mut Vec<u32>,
) {
    let runtime = backend.true_runtime(ir).unwrap();
    if runtime < *best {
        *best = runtime;
        *best_seq = prefix.clone();
    }
    if depth_left == 0 {
        return;
    }
    for action in 0..n_actions {
        let inv = Invocation::passes(&[&format!("s{action}")]);
        let next = backend.optimize(ir, &inv).unwrap();
        prefix.push(action);
        oracle_tree(backend, &next, n_actions, depth_left - 1, best, best_seq, prefix);
        prefix.pop();
    }
}

// Exact tabular Q with gamma=1 and the stop option; returns V(base) and the
// greedy-optimal-stopping path.
fn tabular_value(
    backend: &SyntheticBackend,
    ir: &str,
    n_actions: u32,
    depth_left: usize,
    memo: &mut HashMap<(String, usize), f64>,
) -> f64 {
    if depth_left == 0 {
        return 0.0;
    }
    let key = (ir.to_string(), depth_left);
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let runtime = backend.true_runtime(ir).unwrap();
    let mut best = 0.0f64; // stop option
    for action in 0..n_actions {
        let inv = Invocation::passes(&[&format!("s{action}")]);
        let next = backend.optimize(ir, &inv).unwrap();
        let next_runtime = backend.true_runtime(&next).unwrap();
        let q = (runtime / next_runtime).ln()
            + tabular_value(backend, &next, n_actions, depth_left - 1, memo);
        best = best.max(q);
    }
    memo.insert(key, best);
    best
}

fn main() {
    for run_seed in [11u64, 22, 33] {
        run_one(run_seed);
    }
}

fn run_one(run_seed: u64) {
    let n_actions = 6u32;
    let mu = 4usize;
    let synth = SyntheticConfig {
        seed: 77,
        token_len: 48,
        alphabet: 32,
        n_actions,
        noise_sigma: 0.0,
    };
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("programs");
    std::fs::create_dir_all(&dataset).unwrap();
    for index in 0..7 {
        let body = SyntheticBackend::generate_program(&synth, index);
        std::fs::write(dataset.join(format!("prog{index:02}.tok")), body).unwrap();
    }
    let toml_text = format!(
        r#"
            run_id = "diag"
            level = "H"
            seed = {run_seed}
            persist_root = {persist:?}
            [dataset]
            root = {dataset:?}
            split_ratio = "4:1"
            shuffle_seed = 1
            [backend]
            kind = "synthetic"
            [backend.synthetic]
            seed = 77
            token_len = 48
            alphabet = 32
            n_actions = {n_actions}
            [train]
            gamma = 1.0
            tau = 200
            delta = 1000
            batch_size = 64
            learning_rate = 8e-4
            epsilon_start = 1.0
            epsilon_end = 0.10
            epsilon_anneal_steps = 9000
            mu_max = {mu}
            [loop]
            step_budget = 20000
            replay_capacity = 200000
            replay_min_fill = 200
            blocks = 2
            width = 128
            [manager]
            eval_timeout_secs = 60
        "#,
        persist = dir.path().join("run").to_string_lossy(),
        dataset = dataset.to_string_lossy(),
    );
    let toml_text = toml_text.replace("{run_seed}", &run_seed.to_string());
    let config: RunConfig = toml::from_str(&toml_text).unwrap();
    let ctx = init_run(config).unwrap();
    let broker = Broker::local(ctx.make_backend().unwrap());
    let outcome = run_training(&ctx, &broker).unwrap();
    println!(
        "steps {} | cache {} transitions | replay {} | tasks issued {}",
        outcome.steps,
        ctx.shared.cache.len(),
        ctx.shared.replay.len(),
        ctx.counters.tasks_issued.load(std::sync::atomic::Ordering::Relaxed),
    );
    for report in &outcome.evaluations {
        if let Some(t) = report.training {
            println!(
                "eval@{}: train agent {:.4} best {:.4} o3 {:.4}",
                report.step, t.agent, t.best, t.o3
            );
        }
    }

    let backend = SyntheticBackend::new(synth.clone());
    let q = ctx.published_q();
    for program in ctx.train_set.clone() {
        let record = ctx.store.program(&program).unwrap();
        let base_body = ctx.store.get_ir(&record.base_ir).unwrap();
        let mut best = f64::INFINITY;
        let mut best_seq = Vec::new();
        oracle_tree(&backend, &base_body, n_actions, mu, &mut best, &mut best_seq, &mut Vec::new());
        let mut memo = HashMap::new();
        let v_star = tabular_value(&backend, &base_body, n_actions, mu, &mut memo);
        let base_runtime = record.base_runtime;
        let implied = base_runtime / v_star.exp(); // runtime the perfect policy reaches

        let trajectory = greedy_rollout(&ctx, &broker, q.as_ref(), &program).unwrap();
        let base_state = ctx.base_state(&program).unwrap();
        let encoded = ctx.encoded(&base_state);
        let q_base: Vec<String> =
            passrl::agent::QFunction::q(q.as_ref(), &encoded).iter().map(|v| format!("{v:+.3}")).collect();
        println!(
            "{program}: base {base_runtime:.6} oracle {best:.6} (seq {best_seq:?}) \
             tabular-implied {implied:.6} | agent {:.6} (seq {:?}) ratio-to-oracle {:.3} | Qbase {:?}",
            trajectory.final_runtime,
            trajectory.actions,
            trajectory.final_runtime / best,
            q_base,
        );
    }
    let _ = Arc::strong_count(&ctx);
}

