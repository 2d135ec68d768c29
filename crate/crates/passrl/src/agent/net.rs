//! The residual Q-network: an input affine layer, a stack of residual
//! blocks (two affine+rectifier layers with an identity skip each), and
//! an affine head producing one Q-value per action. Forward, analytic
//! backward, and a small Adam optimizer, all in f64 on ndarray.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub n_actions: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    cfg: NetConfig,
    stem_w: Array2<f64>,
    stem_b: Array1<f64>,
    blocks: Vec<Block>,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
}

/// Gradients (or optimizer moments) for every parameter tensor, in the
/// network's canonical tensor order.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub mats: Vec<Array2<f64>>,
    pub vecs: Vec<Array1<f64>>,
}

impl GradientSet {
    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.mats {
            m.mapv_inplace(|v| v * factor);
        }
        for v in &mut self.vecs {
            v.mapv_inplace(|x| x * factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mats = self.mats.iter().flat_map(|m| m.iter());
        let vecs = self.vecs.iter().flat_map(|v| v.iter());
        mats.chain(vecs).fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Derivative mask of the rectifier; exactly-zero pre-activations get 0.
fn relu_mask(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Everything backward needs from a forward pass.
pub struct ForwardCache {
    x: Array2<f64>,
    z0: Array2<f64>,
    /// h[0] is the stem activation; h[k+1] the output of block k.
    h: Vec<Array2<f64>>,
    z1: Vec<Array2<f64>>,
    u: Vec<Array2<f64>>,
    z2: Vec<Array2<f64>>,
}

impl QNetwork {
    /// Fresh network with scaled-uniform fan-in initialization:
    /// each layer draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn new(cfg: NetConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.input_dim > 0 && cfg.width > 0 && cfg.n_actions > 0);
        fn init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        }
        fn init_bias(rng: &mut impl Rng, len: usize, fan_in: usize) -> Array1<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array1::from_shape_fn(len, |_| rng.gen_range(-bound..bound))
        }
        let stem_w = init(rng, cfg.width, cfg.input_dim, cfg.input_dim);
        let stem_b = init_bias(rng, cfg.width, cfg.input_dim);
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                w1: init(rng, cfg.width, cfg.width, cfg.width),
                b1: init_bias(rng, cfg.width, cfg.width),
                w2: init(rng, cfg.width, cfg.width, cfg.width),
                b2: init_bias(rng, cfg.width, cfg.width),
            })
            .collect();
        let head_w = init(rng, cfg.n_actions, cfg.width, cfg.width);
        let head_b = init_bias(rng, cfg.n_actions, cfg.width);
        Self { cfg, stem_w, stem_b, blocks, head_w, head_b }
    }

    /// All-zero network of the given shape (used when loading checkpoints).
    pub fn zeros(cfg: NetConfig) -> Self {
        Self {
            cfg,
            stem_w: Array2::zeros((cfg.width, cfg.input_dim)),
            stem_b: Array1::zeros(cfg.width),
            blocks: (0..cfg.blocks)
                .map(|_| Block {
                    w1: Array2::zeros((cfg.width, cfg.width)),
                    b1: Array1::zeros(cfg.width),
                    w2: Array2::zeros((cfg.width, cfg.width)),
                    b2: Array1::zeros(cfg.width),
                })
                .collect(),
            head_w: Array2::zeros((cfg.n_actions, cfg.width)),
            head_b: Array1::zeros(cfg.n_actions),
        }
    }

    pub fn config(&self) -> NetConfig {
        self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.input_dim
    }

    pub fn n_actions(&self) -> usize {
        self.cfg.n_actions
    }

    /// Shift every Q-output by a constant (argmax-invariance tests).
    pub fn shift_output_bias(&mut self, delta: f64) {
        self.head_b.mapv_inplace(|v| v + delta);
    }

    /// Q-values for one encoded state.
    pub fn q_values(&self, encoded: &[f64]) -> Result<Vec<f64>, DimensionMismatch> {
        if encoded.len() != self.cfg.input_dim {
            return Err(DimensionMismatch { expected: self.cfg.input_dim, got: encoded.len() });
        }
        let x = Array2::from_shape_vec((1, encoded.len()), encoded.to_vec()).unwrap();
        Ok(self.forward(&x).row(0).to_vec())
    }

    /// Batched forward pass: rows of `x` are encoded states.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = relu(&(x.dot(&self.stem_w.t()) + &self.stem_b));
        for block in &self.blocks {
            let u = relu(&(h.dot(&block.w1.t()) + &block.b1));
            let r = relu(&(u.dot(&block.w2.t()) + &block.b2));
            h = h + r;
        }
        h.dot(&self.head_w.t()) + &self.head_b
    }

    /// Forward pass that keeps the intermediates backward needs.
    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let z0 = x.dot(&self.stem_w.t()) + &self.stem_b;
        let mut h = vec![relu(&z0)];
        let mut z1 = Vec::with_capacity(self.blocks.len());
        let mut u = Vec::with_capacity(self.blocks.len());
        let mut z2 = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let h_in = h.last().unwrap();
            let z1_k = h_in.dot(&block.w1.t()) + &block.b1;
            let u_k = relu(&z1_k);
            let z2_k = u_k.dot(&block.w2.t()) + &block.b2;
            let h_out = h_in + &relu(&z2_k);
            z1.push(z1_k);
            u.push(u_k);
            z2.push(z2_k);
            h.push(h_out);
        }
        let q = h.last().unwrap().dot(&self.head_w.t()) + &self.head_b;
        (q, ForwardCache { x: x.clone(), z0, h, z1, u, z2 })
    }

    /// Analytic gradients for an upstream `d_loss/d_q` of shape
    /// (batch, n_actions). Tensors come out in canonical order.
    pub fn backward(&self, cache: &ForwardCache, dq: &Array2<f64>) -> GradientSet {
        let n_blocks = self.blocks.len();
        let mut mats: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); 1 + 2 * n_blocks + 1];
        let mut vecs: Vec<Array1<f64>> = vec![Array1::zeros(0); 1 + 2 * n_blocks + 1];

        let h_last = &cache.h[n_blocks];
        mats[1 + 2 * n_blocks] = dq.t().dot(h_last);
        vecs[1 + 2 * n_blocks] = dq.sum_axis(Axis(0));
        let mut dh = dq.dot(&self.head_w);

        for (k, block) in self.blocks.iter().enumerate().rev() {
            let dz2 = &dh * &relu_mask(&cache.z2[k]);
            mats[2 + 2 * k] = dz2.t().dot(&cache.u[k]);
            vecs[2 + 2 * k] = dz2.sum_axis(Axis(0));
            let du = dz2.dot(&block.w2);
            let dz1 = &du * &relu_mask(&cache.z1[k]);
            mats[1 + 2 * k] = dz1.t().dot(&cache.h[k]);
            vecs[1 + 2 * k] = dz1.sum_axis(Axis(0));
            // Identity skip: upstream gradient flows through unchanged.
            dh = dh + dz1.dot(&block.w1);
        }

        let dz0 = &dh * &relu_mask(&cache.z0);
        mats[0] = dz0.t().dot(&cache.x);
        vecs[0] = dz0.sum_axis(Axis(0));
        GradientSet { mats, vecs }
    }

    /// Parameter tensors in canonical order: stem, per block (w1, w2),
    /// head; biases follow the same order in the vector list.
    pub fn tensors(&self) -> (Vec<&Array2<f64>>, Vec<&Array1<f64>>) {
        let mut mats = vec![&self.stem_w];
        let mut vecs = vec![&self.stem_b];
        for block in &self.blocks {
            mats.push(&block.w1);
            mats.push(&block.w2);
            vecs.push(&block.b1);
            vecs.push(&block.b2);
        }
        mats.push(&self.head_w);
        vecs.push(&self.head_b);
        (mats, vecs)
    }

    pub fn tensors_mut(&mut self) -> (Vec<&mut Array2<f64>>, Vec<&mut Array1<f64>>) {
        let mut mats = vec![&mut self.stem_w];
        let mut vecs = vec![&mut self.stem_b];
        for block in &mut self.blocks {
            mats.push(&mut block.w1);
            mats.push(&mut block.w2);
            vecs.push(&mut block.b1);
            vecs.push(&mut block.b2);
        }
        mats.push(&mut self.head_w);
        vecs.push(&mut self.head_b);
        (mats, vecs)
    }

    /// Total parameter count.
    pub fn parameter_count(&self) -> usize {
        let (mats, vecs) = self.tensors();
        mats.iter().map(|m| m.len()).sum::<usize>() + vecs.iter().map(|v| v.len()).sum::<usize>()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("encoded state has length {got}, network expects {expected}")]
pub struct DimensionMismatch {
    pub expected: usize,
    pub got: usize,
}

/// Adam with per-parameter step sizes; the run metadata records its use.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Option<GradientSet>,
    v: Option<GradientSet>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: None, v: None }
    }

    pub fn apply(&mut self, net: &mut QNetwork, grads: &GradientSet) {
        if self.m.is_none() {
            let zero_like = GradientSet {
                mats: grads.mats.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
                vecs: grads.vecs.iter().map(|v| Array1::zeros(v.raw_dim())).collect(),
            };
            self.m = Some(zero_like.clone());
            self.v = Some(zero_like);
        }
        self.t += 1;
        let (lr, beta1, beta2, eps) = (self.learning_rate, self.beta1, self.beta2, self.eps);
        let bias1 = 1.0 - beta1.powi(self.t as i32);
        let bias2 = 1.0 - beta2.powi(self.t as i32);
        let m = self.m.as_mut().unwrap();
        let v = self.v.as_mut().unwrap();
        let (mats, vecs) = net.tensors_mut();

        for ((param, grad), (m, v)) in mats
            .into_iter()
            .zip(&grads.mats)
            .zip(m.mats.iter_mut().zip(v.mats.iter_mut()))
        {
            ndarray::Zip::from(param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + eps);
                });
        }
        for ((param, grad), (m, v)) in vecs
            .into_iter()
            .zip(&grads.vecs)
            .zip(m.vecs.iter_mut().zip(v.vecs.iter_mut()))
        {
            ndarray::Zip::from(param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(seed: u64) -> QNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QNetwork::new(
            NetConfig { input_dim: 5, width: 8, blocks: 2, n_actions: 3 },
            &mut rng,
        )
    }

    #[test]
    fn forward_is_deterministic() {
        let net = tiny_net(1);
        let x = vec![0.1, -0.2, 0.3, 0.0, 0.7];
        assert_eq!(net.q_values(&x).unwrap(), net.q_values(&x).unwrap());
    }

    #[test]
    fn zero_head_gives_zero_q() {
        let mut net = tiny_net(2);
        net.head_w.fill(0.0);
        net.head_b.fill(0.0);
        let q = net.q_values(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(q, vec![0.0; 3]);
    }

    #[test]
    fn dimension_mismatch_is_a_contract_error() {
        let net = tiny_net(3);
        assert_eq!(
            net.q_values(&[1.0, 2.0]).unwrap_err(),
            DimensionMismatch { expected: 5, got: 2 }
        );
    }

    #[test]
    fn input_perturbation_changes_output() {
        // Non-degenerate net: finite-difference sensitivity of the first
        // coordinate must be nonzero for some output.
        let net = tiny_net(4);
        let x = vec![0.3, 0.1, -0.4, 0.2, 0.5];
        let mut x2 = x.clone();
        let h = 1e-5;
        x2[0] += h;
        let q1 = net.q_values(&x).unwrap();
        let q2 = net.q_values(&x2).unwrap();
        let sensitivity: f64 =
            q1.iter().zip(&q2).map(|(a, b)| ((b - a) / h).abs()).sum();
        assert!(sensitivity > 1e-6, "network is degenerate: {sensitivity}");
    }

    #[test]
    fn batch_and_single_forward_agree() {
        let net = tiny_net(5);
        let rows = [
            vec![0.1, 0.2, 0.3, 0.4, 0.5],
            vec![-1.0, 0.0, 1.0, 2.0, -2.0],
        ];
        let mut flat = Vec::new();
        for r in &rows {
            flat.extend_from_slice(r);
        }
        let batch = Array2::from_shape_vec((2, 5), flat).unwrap();
        let q = net.forward(&batch);
        for (i, row) in rows.iter().enumerate() {
            let single = net.q_values(row).unwrap();
            for (a, &expected) in single.iter().enumerate() {
                assert!((q[[i, a]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_with_zero_learning_rate_leaves_weights_unchanged() {
        let mut net = tiny_net(6);
        let before = net.clone();
        let x = Array2::from_shape_vec((1, 5), vec![0.5; 5]).unwrap();
        let (q, cache) = net.forward_cached(&x);
        let mut dq = Array2::zeros(q.raw_dim());
        dq[[0, 0]] = 1.0;
        let grads = net.backward(&cache, &dq);
        let mut adam = Adam::new(0.0);
        adam.apply(&mut net, &grads);
        assert_eq!(net, before);
    }

    #[test]
    fn gradient_scales_linearly_with_upstream() {
        let net = tiny_net(7);
        let x = Array2::from_shape_vec((2, 5), vec![0.3; 10]).unwrap();
        let (_, cache) = net.forward_cached(&x);
        let mut dq = Array2::zeros((2, 3));
        dq[[0, 1]] = 0.7;
        dq[[1, 2]] = -0.2;
        let g1 = net.backward(&cache, &dq);
        let g3 = net.backward(&cache, &dq.mapv(|v| 3.0 * v));
        for (a, b) in g1.mats.iter().zip(&g3.mats) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((3.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_of_unused_head_rows_are_zero() {
        let net = tiny_net(8);
        let x = Array2::from_shape_vec((1, 5), vec![0.4; 5]).unwrap();
        let (_, cache) = net.forward_cached(&x);
        let mut dq = Array2::zeros((1, 3));
        dq[[0, 1]] = 1.0;
        let grads = net.backward(&cache, &dq);
        let head_w_grad = grads.mats.last().unwrap();
        assert!(head_w_grad.row(0).iter().all(|&v| v == 0.0));
        assert!(head_w_grad.row(2).iter().all(|&v| v == 0.0));
        assert!(head_w_grad.row(1).iter().any(|&v| v != 0.0));
    }
}
