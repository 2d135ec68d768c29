//! A deterministic, desk-scale stand-in for the compiler toolchain.
//!
//! IR bodies are comma-separated integer token sequences. Optimizing with
//! an invocation rewrites the sequence through a pseudorandom
//! permutation-and-substitution table keyed by (hash of the body,
//! invocation), so action order matters and everything reproduces from
//! the seed. The runtime of a body is a pure function of its hash:
//! `0.001 * (1 + (hash mod 1000) / 1000)` seconds, with optional seeded
//! multiplicative noise on individual samples.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, EnvError};
use crate::action::Invocation;
use crate::state::canonicalize_ir;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Tokens per generated program.
    #[serde(default = "default_token_len")]
    pub token_len: usize,
    /// Token alphabet size; bodies hold values in `0..alphabet`.
    #[serde(default = "default_alphabet")]
    pub alphabet: u32,
    /// Number of actions the synthetic H space exposes.
    #[serde(default = "default_n_actions")]
    pub n_actions: u32,
    /// Standard deviation of multiplicative gaussian noise on runtime
    /// samples; 0 disables noise.
    #[serde(default)]
    pub noise_sigma: f64,
}

fn default_token_len() -> usize {
    32
}

fn default_alphabet() -> u32 {
    16
}

fn default_n_actions() -> u32 {
    8
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            token_len: default_token_len(),
            alphabet: default_alphabet(),
            n_actions: default_n_actions(),
            noise_sigma: 0.0,
        }
    }
}

pub struct SyntheticBackend {
    cfg: SyntheticConfig,
    noise: Mutex<ChaCha8Rng>,
}

impl SyntheticBackend {
    pub fn new(cfg: SyntheticConfig) -> Self {
        let noise = Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973_65u64));
        Self { cfg, noise }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    /// Deterministic program source for dataset generation: `index`
    /// selects one of the backend's reproducible token sequences.
    pub fn generate_program(cfg: &SyntheticConfig, index: u32) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(
            stable_hash(&format!("program\x1f{}\x1f{}", cfg.seed, index)),
        );
        let tokens: Vec<String> = (0..cfg.token_len.max(1))
            .map(|_| rng.gen_range(0..cfg.alphabet).to_string())
            .collect();
        tokens.join(",")
    }

    fn parse_tokens(&self, body: &str) -> Result<Vec<u32>, EnvError> {
        let body = body.trim();
        if body.is_empty() {
            return Err(EnvError::InvalidIr { reason: "empty token sequence".into() });
        }
        body.split(',')
            .map(|tok| {
                let tok = tok.trim();
                tok.parse::<u32>()
                    .map_err(|_| EnvError::InvalidIr {
                        reason: format!("token `{tok}` is not an integer"),
                    })
                    .map(|t| t % self.cfg.alphabet.max(1))
            })
            .collect()
    }

    /// Rewrite a token sequence under a label-keyed pseudorandom table.
    fn transform(&self, body: &str, label: &str) -> Result<String, EnvError> {
        let tokens = self.parse_tokens(body)?;
        let canonical = canonicalize_ir(body);
        let mut hasher = Sha256::new();
        hasher.update(b"passrl-synth-v1\0");
        hasher.update(self.cfg.seed.to_le_bytes());
        hasher.update(canonical.as_bytes());
        hasher.update([0x1f]);
        hasher.update(label.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());

        let alphabet = self.cfg.alphabet.max(1);
        let mut substitution: Vec<u32> = (0..alphabet).collect();
        for i in (1..substitution.len()).rev() {
            substitution.swap(i, rng.gen_range(0..=i));
        }
        let rotation = rng.gen_range(0..tokens.len());
        let n = tokens.len();
        let rewritten: Vec<String> = (0..n)
            .map(|i| substitution[tokens[(i + rotation) % n] as usize].to_string())
            .collect();
        Ok(rewritten.join(","))
    }

    /// The deterministic runtime of a body, before noise.
    pub fn true_runtime(&self, ir: &str) -> Result<f64, EnvError> {
        self.parse_tokens(ir)?;
        let h = stable_hash(&canonicalize_ir(ir));
        Ok(0.001 * (1.0 + (h % 1000) as f64 / 1000.0))
    }
}

/// First eight bytes of a SHA-256, as a stable cross-run hash.
fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

impl Backend for SyntheticBackend {
    fn base_ir(&self, _source_name: &str, source_text: &str) -> Result<String, EnvError> {
        self.parse_tokens(source_text)?;
        Ok(canonicalize_ir(source_text))
    }

    fn o3_ir(&self, base_ir: &str) -> Result<String, EnvError> {
        self.transform(base_ir, "synthetic-o3")
    }

    fn optimize(&self, ir: &str, invocation: &Invocation) -> Result<String, EnvError> {
        self.transform(ir, &invocation.canonical())
    }

    fn compile_and_run(&self, _program_id: &str, ir: &str) -> Result<f64, EnvError> {
        let runtime = self.true_runtime(ir)?;
        if self.cfg.noise_sigma == 0.0 {
            return Ok(runtime);
        }
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0, self.cfg.noise_sigma)
            .map_err(|e| EnvError::InvalidIr { reason: e.to_string() })?;
        let factor = (1.0 + normal.sample(&mut *self.noise.lock().unwrap())).max(0.01);
        Ok(runtime * factor)
    }
}
