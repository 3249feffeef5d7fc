//! Minimal feed-forward networks with hand-written reverse-mode gradients.
//!
//! Two networks are needed: a policy net mapping mean-field features to the
//! mean and log-standard-deviation of a diagonal Gaussian over ξ, and a
//! scalar critic.  Both are plain affine–tanh stacks (two hidden layers of
//! 256 by default) with a linear output layer, so the backward pass is short
//! enough to write by hand and check against finite differences.
//!
//! Everything here is deterministic given parameters and inputs; sampling
//! takes an explicit RNG.  Parameters flatten into a single `Vec<f64>` in a
//! fixed layer order (weights row-major, then bias, per layer) — the same
//! order the Adam state and the checkpoint format use.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Clamp bounds for the Gaussian head's log-standard-deviation outputs.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.8378770664093453;

// ─── MLP ───────────────────────────────────────────────────────────────────

/// Activation applied after every hidden layer (the output is always linear).
///
/// `Identity` exists for tests that want a purely linear network with exact
/// closed-form gradients; real policies and critics use `Tanh`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// Fully-connected network: `sizes[0]` inputs, hidden layers, `sizes.last()`
/// outputs.  Weight `l` has shape `(sizes[l], sizes[l+1])`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
}

/// Layer inputs recorded by `forward`, consumed by `backward`.
///
/// `inputs[l]` is the batch fed into layer `l`; for `l > 0` that is the
/// post-activation output of layer `l-1`, which is exactly what the tanh
/// derivative `1 - a²` needs.
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
}

/// Gradients with the same shapes as the network's parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Mlp {
    /// Builds a network with "normc" initialization: every weight column is
    /// a random Gaussian direction rescaled to norm `hidden_std` (hidden
    /// layers) or `final_std` (output layer), biases zero.  A small
    /// `final_std` keeps the initial policy head near the origin, so the
    /// initial ξ distribution is centered with moderate spread.
    pub fn new(
        sizes: &[usize],
        hidden_std: f64,
        final_std: f64,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let n_layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (rows, cols) = (sizes[l], sizes[l + 1]);
            let std = if l + 1 == n_layers { final_std } else { hidden_std };
            let mut w = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
            for mut col in w.columns_mut() {
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    col.mapv_inplace(|v| v * std / norm);
                }
            }
            weights.push(w);
            biases.push(Array1::zeros(cols));
        }
        Mlp { sizes: sizes.to_vec(), weights, biases, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Batched forward pass.  Rows of `x` are samples.  Returns the linear
    /// outputs together with the cache needed by `backward`.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
        assert_eq!(x.ncols(), self.input_dim(), "input width mismatch");
        assert!(x.iter().all(|v| v.is_finite()), "non-finite network input");
        let n_layers = self.weights.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut a = x.to_owned();
        for l in 0..n_layers {
            let mut z = a.dot(&self.weights[l]);
            z += &self.biases[l];
            inputs.push(a);
            a = if l + 1 < n_layers && self.activation == Activation::Tanh {
                z.mapv_into(f64::tanh)
            } else {
                z
            };
        }
        (a, ForwardCache { inputs })
    }

    /// Convenience single-row forward without keeping the cache.
    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let (out, _) = self.forward(view);
        out.row(0).to_vec()
    }

    /// Exact reverse-mode gradients for a batch.  `output_grad` holds
    /// ∂L/∂output row per sample; the returned gradients are summed over the
    /// batch (scale `output_grad` by 1/batch for means).  Also returns
    /// ∂L/∂input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> (MlpGrads, Array2<f64>) {
        let n_layers = self.weights.len();
        assert_eq!(cache.inputs.len(), n_layers, "cache does not match network");
        assert_eq!(output_grad.ncols(), self.output_dim(), "output grad width mismatch");
        let mut gw = vec![Array2::zeros((0, 0)); n_layers];
        let mut gb = vec![Array1::zeros(0); n_layers];
        let mut g = output_grad.to_owned();
        for l in (0..n_layers).rev() {
            let a_in = &cache.inputs[l];
            gw[l] = a_in.t().dot(&g);
            gb[l] = g.sum_axis(Axis(0));
            let g_in = g.dot(&self.weights[l].t());
            g = if l > 0 && self.activation == Activation::Tanh {
                // a_in is tanh output of layer l-1: d tanh = 1 - a².
                g_in * a_in.mapv(|a| 1.0 - a * a)
            } else {
                g_in
            };
        }
        (MlpGrads { weights: gw, biases: gb }, g)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flattens parameters layer by layer: weights in row-major order, then
    /// the bias vector.  `set_from_flat` and `MlpGrads::to_flat` use the same
    /// layout.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            out.extend(self.weights[l].iter());
            out.extend(self.biases[l].iter());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length mismatch");
        let mut k = 0;
        for l in 0..self.weights.len() {
            for v in self.weights[l].iter_mut() {
                *v = flat[k];
                k += 1;
            }
            for v in self.biases[l].iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
    }
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let n: usize =
            self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>();
        let mut out = Vec::with_capacity(n);
        for l in 0..self.weights.len() {
            out.extend(self.weights[l].iter());
            out.extend(self.biases[l].iter());
        }
        out
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * s);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * s);
        }
    }
}

// ─── Diagonal Gaussian head ────────────────────────────────────────────────

/// Diagonal Gaussian read off the policy network's raw output row: the first
/// half is the mean, the second half the log-standard-deviation clamped into
/// `[LOG_STD_MIN, LOG_STD_MAX]`.  `clamped` records where the clamp was
/// active so gradients through those components can be zeroed.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub clamped: Vec<bool>,
}

impl GaussianHead {
    pub fn from_raw(raw: &[f64]) -> Self {
        assert!(raw.len() % 2 == 0, "head output length must be even");
        let k = raw.len() / 2;
        let mean = raw[..k].to_vec();
        let mut log_std = Vec::with_capacity(k);
        let mut clamped = Vec::with_capacity(k);
        for &v in &raw[k..] {
            let c = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
            clamped.push(c != v);
            log_std.push(c);
        }
        GaussianHead { mean, log_std, clamped }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density of `xi` under the (pre-clamp) diagonal Gaussian.
    pub fn logprob(&self, xi: &[f64]) -> f64 {
        assert_eq!(xi.len(), self.dim());
        let mut lp = 0.0;
        for i in 0..self.dim() {
            let std = self.log_std[i].exp();
            let z = (xi[i] - self.mean[i]) / std;
            lp += -0.5 * z * z - self.log_std[i] - 0.5 * LN_2PI;
        }
        lp
    }

    /// Draws mean + std ⊙ z with z standard normal.  The caller clamps the
    /// result into Ξ = [-1,1]^k; log-probs always refer to the pre-clamp
    /// sample.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.mean[i] + self.log_std[i].exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (1.0 + LN_2PI)).sum()
    }

    /// KL(self ‖ other) between diagonal Gaussians, in nats.  Non-negative.
    pub fn kl_to(&self, other: &GaussianHead) -> f64 {
        assert_eq!(self.dim(), other.dim());
        let mut kl = 0.0;
        for i in 0..self.dim() {
            let so = self.log_std[i].exp();
            let sn = other.log_std[i].exp();
            let dm = self.mean[i] - other.mean[i];
            kl += other.log_std[i] - self.log_std[i] + (so * so + dm * dm) / (2.0 * sn * sn) - 0.5;
        }
        kl.max(0.0)
    }

    /// ∂logprob(xi)/∂mean and ∂logprob(xi)/∂log_std, componentwise.
    pub fn grad_logprob(&self, xi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.dim();
        let mut dmean = vec![0.0; k];
        let mut dlogstd = vec![0.0; k];
        for i in 0..k {
            let var = (2.0 * self.log_std[i]).exp();
            let d = xi[i] - self.mean[i];
            dmean[i] = d / var;
            dlogstd[i] = d * d / var - 1.0;
        }
        (dmean, dlogstd)
    }

    /// Gradients of KL(old ‖ new) with respect to the NEW head's mean and
    /// log_std (`self` is old, `new` is the head being updated).
    pub fn grad_kl_wrt_new(&self, new: &GaussianHead) -> (Vec<f64>, Vec<f64>) {
        let k = self.dim();
        let mut dmean = vec![0.0; k];
        let mut dlogstd = vec![0.0; k];
        for i in 0..k {
            let vo = (2.0 * self.log_std[i]).exp();
            let vn = (2.0 * new.log_std[i]).exp();
            let dm = new.mean[i] - self.mean[i];
            dmean[i] = dm / vn;
            dlogstd[i] = 1.0 - (vo + dm * dm) / vn;
        }
        (dmean, dlogstd)
    }

    /// Assembles per-component mean / log_std gradients back into a gradient
    /// over the raw network output row, zeroing log_std components where the
    /// clamp was active.
    pub fn raw_grad(&self, dmean: &[f64], dlogstd: &[f64]) -> Vec<f64> {
        let k = self.dim();
        assert_eq!(dmean.len(), k);
        assert_eq!(dlogstd.len(), k);
        let mut out = Vec::with_capacity(2 * k);
        out.extend_from_slice(dmean);
        for i in 0..k {
            out.push(if self.clamped[i] { 0.0 } else { dlogstd[i] });
        }
        out
    }
}

/// Clamp a sampled ξ into Ξ = [-1,1]^k.
pub fn clamp_to_box(xi: &[f64]) -> Vec<f64> {
    xi.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
}

// ─── Adam ──────────────────────────────────────────────────────────────────

/// Adam over one flat parameter vector (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    /// One descent step in place: params ← params − lr · m̂ / (√v̂ + ε).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / bc1;
            let vh = self.v[k] / bc2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

// ─── Tests ─────────────────────────────────────────────────────────────────
