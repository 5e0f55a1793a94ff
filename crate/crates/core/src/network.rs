//! The trainable blocks: a shared pre-feature layer (linear → batchnorm →
//! ReLU), a feature head ending in per-sample L2 normalization, and a
//! cluster head ending in a Gumbel-Softmax. Forward and reverse passes are
//! written out by hand.
//!
//! Activations are row-major `n×width` (one sample per row). The feature
//! head's output is handed to the objective transposed, as the `d×n`
//! embedding matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coding_rate::Membership;
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Mat};

/// Clamp for the uniform draws feeding `−log(−log u)`.
pub const GUMBEL_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm, Gumbel noise in the cluster head.
    Train,
    /// Running statistics, noiseless tempered softmax.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    /// Hidden `linear → ReLU` blocks in each head.
    pub depth: usize,
    pub embed_dim: usize,
    pub clusters: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.embed_dim == 0 || self.clusters == 0 {
            return Err(Error::param(format!("all layer widths must be positive: {self:?}")));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::param(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out×in`
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Kaiming-uniform (fan-in, ReLU gain) weights; bias uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn kaiming(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = Mat::from_fn(out_dim, in_dim, |_, _| rng.random_range(-bound..bound));
        let bias_bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight,
            bias: (0..out_dim).map(|_| rng.random_range(-bias_bound..bias_bound)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Mat) -> Result<Mat> {
        let mut y = x.matmul_t(&self.weight)?;
        for r in 0..y.rows() {
            axpy(1.0, &self.bias, y.row_mut(r));
        }
        Ok(y)
    }

    /// Returns `dX`, writing `dW`, `db` into `grads`.
    fn backward(&self, x: &Mat, dy: &Mat, gw: &mut [f64], gb: &mut [f64]) -> Result<Mat> {
        let dw = dy.t_matmul(x)?;
        axpy(1.0, dw.data(), gw);
        for r in 0..dy.rows() {
            axpy(1.0, dy.row(r), gb);
        }
        dy.matmul(&self.weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

/// Normalized activations `x̂` before scale/shift, with the per-feature
/// inverse standard deviations used.
struct BnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Batch statistics (mean, biased variance) per column.
fn column_stats(x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let (n, w) = x.shape();
    let mut mean = vec![0.0; w];
    for r in 0..n {
        axpy(1.0, x.row(r), &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; w];
    for r in 0..n {
        for ((v, xv), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *v += (xv - m) * (xv - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

fn bn_apply(x: &Mat, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> (Mat, Mat) {
    let mut xhat = x.clone();
    for r in 0..xhat.rows() {
        for ((v, m), s) in xhat.row_mut(r).iter_mut().zip(mean).zip(inv_std) {
            *v = (*v - m) * s;
        }
    }
    let mut y = xhat.clone();
    for r in 0..y.rows() {
        for ((v, g), b) in y.row_mut(r).iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
    (xhat, y)
}

/// Per-feature batch normalization with batch statistics (as in train mode),
/// without touching running statistics. Returns `(x̂, y)`.
pub fn batchnorm_train_output(bn: &BatchNorm, x: &Mat) -> (Mat, Mat) {
    let (mean, var) = column_stats(x);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    bn_apply(x, &mean, &inv_std, &bn.gamma, &bn.beta)
}

fn relu(x: &Mat) -> Mat {
    x.map(|v| v.max(0.0))
}

fn relu_backward(pre: &Mat, dy: &mut Mat) {
    for (g, v) in dy.data_mut().iter_mut().zip(pre.data()) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `linear → ReLU` blocks followed by an output linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

struct MlpCache {
    /// Input of every linear layer, in order (hidden..., out).
    inputs: Vec<Mat>,
    /// Pre-activation of every hidden layer.
    pre_acts: Vec<Mat>,
}

impl Mlp {
    fn new(in_dim: usize, hidden: usize, depth: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut width = in_dim;
        for _ in 0..depth {
            layers.push(Linear::kaiming(width, hidden, rng));
            width = hidden;
        }
        Mlp {
            hidden: layers,
            out: Linear::kaiming(width, out_dim, rng),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.hidden.iter().chain(std::iter::once(&self.out))
    }

    fn forward(&self, x: &Mat) -> Result<(Mat, MlpCache)> {
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut pre_acts = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for layer in &self.hidden {
            let pre = layer.forward(&h)?;
            inputs.push(h);
            h = relu(&pre);
            pre_acts.push(pre);
        }
        let y = self.out.forward(&h)?;
        inputs.push(h);
        Ok((y, MlpCache { inputs, pre_acts }))
    }

    /// `grads` holds (weight, bias) slots for every layer in order.
    fn backward(&self, cache: &MlpCache, dy: &Mat, grads: &mut [Vec<f64>]) -> Result<Mat> {
        let nh = self.hidden.len();
        let (gw, rest) = grads[2 * nh..].split_at_mut(1);
        let mut d = self.out.backward(&cache.inputs[nh], dy, &mut gw[0], &mut rest[0])?;
        for l in (0..nh).rev() {
            relu_backward(&cache.pre_acts[l], &mut d);
            let (gw, rest) = grads[2 * l..].split_at_mut(1);
            d = self.hidden[l].backward(&cache.inputs[l], &d, &mut gw[0], &mut rest[0])?;
        }
        Ok(d)
    }
}

fn l2_normalize_rows(h: &Mat) -> (Mat, Vec<f64>) {
    let mut z = h.clone();
    let mut norms = Vec::with_capacity(h.rows());
    for r in 0..z.rows() {
        let row = z.row_mut(r);
        let norm = dot(row, row).sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    (z, norms)
}

/// `dh = (dz − z ⟨z, dz⟩) / ‖h‖` per row.
pub fn l2_normalize_backward(z: &Mat, norms: &[f64], dz: &Mat) -> Mat {
    let mut dh = dz.clone();
    for r in 0..z.rows() {
        let zr = z.row(r);
        let proj = dot(zr, dz.row(r));
        let row = dh.row_mut(r);
        axpy(-proj, zr, row);
        row.iter_mut().for_each(|v| *v /= norms[r]);
    }
    dh
}

/// Row-wise `softmax(x / τ)`.
pub fn tempered_softmax(x: &Mat, tau: f64) -> Mat {
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    y
}

/// `dx = y ⊙ (dy − ⟨dy, y⟩) / τ` per row.
pub fn tempered_softmax_backward(y: &Mat, dy: &Mat, tau: f64) -> Mat {
    let mut dx = Mat::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let inner = dot(yr, dy.row(r));
        for ((d, yv), g) in dx.row_mut(r).iter_mut().zip(yr).zip(dy.row(r)) {
            *d = yv * (g - inner) / tau;
        }
    }
    dx
}

/// Standard Gumbel draws `−log(−log u)`, `u` clamped away from 0 and 1.
pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| {
        let u: f64 = rng.random::<f64>().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
        -(-u.ln()).ln()
    })
}

/// Row-wise `softmax((logits + G) / τ)` with fresh Gumbel noise `G`.
pub fn gumbel_softmax(logits: &Mat, tau: f64, rng: &mut impl Rng) -> Result<Mat> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    let g = sample_gumbel(logits.rows(), logits.cols(), rng);
    Ok(tempered_softmax(&logits.add(&g)?, tau))
}

/// All trainable parameters plus the Gumbel noise generator.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub arch: Architecture,
    pub pre: Linear,
    pub bn: BatchNorm,
    pub feature_head: Mlp,
    pub cluster_head: Mlp,
    pub rng: ChaCha8Rng,
    version: u64,
}

/// Intermediate values from one forward pass, consumed by `backward`.
pub struct ForwardCache {
    version: u64,
    mode: Mode,
    x: Mat,
    bn_in: Mat,
    bn: BnCache,
    /// Post-ReLU shared pre-feature.
    shared: Mat,
    feat: MlpCache,
    z_rows: Mat,
    z_norms: Vec<f64>,
    clus: MlpCache,
    pi: Mat,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `d×n`, unit-norm columns.
    pub z: Mat,
    pub membership: Membership,
}

/// Gradients aligned with [`ModelParams::param_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_slice())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max |g| over tensors whose name starts with `prefix`.
    pub fn max_abs_prefix(&self, prefix: &str) -> f64 {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, v)| v.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl ModelParams {
    /// Fresh parameters. Initialization and Gumbel noise use separate
    /// streams of a generator seeded with `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let pre = Linear::kaiming(arch.input_dim, arch.hidden, &mut init);
        let feature_head = Mlp::new(arch.hidden, arch.hidden, arch.depth, arch.embed_dim, &mut init);
        let cluster_head = Mlp::new(arch.hidden, arch.hidden, arch.depth, arch.clusters, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(ModelParams {
            arch,
            pre,
            bn: BatchNorm::new(arch.hidden),
            feature_head,
            cluster_head,
            rng,
            version: 0,
        })
    }

    pub(crate) fn from_parts(
        arch: Architecture,
        pre: Linear,
        bn: BatchNorm,
        feature_head: Mlp,
        cluster_head: Mlp,
        rng: ChaCha8Rng,
    ) -> Self {
        ModelParams {
            arch,
            pre,
            bn,
            feature_head,
            cluster_head,
            rng,
            version: 0,
        }
    }

    /// Marks parameters as changed so older forward caches are rejected.
    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["pre.weight".to_string(), "pre.bias".into(), "bn.gamma".into(), "bn.beta".into()];
        for (head, mlp) in [("feature", &self.feature_head), ("cluster", &self.cluster_head)] {
            for (i, _) in mlp.hidden.iter().enumerate() {
                names.push(format!("{head}.hidden{i}.weight"));
                names.push(format!("{head}.hidden{i}.bias"));
            }
            names.push(format!("{head}.out.weight"));
            names.push(format!("{head}.out.bias"));
        }
        names
    }

    /// Trainable tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.pre.weight.data(), &self.pre.bias, &self.bn.gamma, &self.bn.beta];
        for mlp in [&self.feature_head, &self.cluster_head] {
            for layer in mlp.layers() {
                out.push(layer.weight.data());
                out.push(&layer.bias);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.pre.weight.data_mut(),
            &mut self.pre.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ];
        for mlp in [&mut self.feature_head, &mut self.cluster_head] {
            for layer in mlp.hidden.iter_mut().chain(std::iter::once(&mut mlp.out)) {
                out.push(layer.weight.data_mut());
                out.push(&mut layer.bias);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            names: self.param_names(),
            values: self.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Forward pass. Train mode updates batchnorm running statistics and
    /// advances the Gumbel generator.
    pub fn forward(&mut self, x: &Mat, mode: Mode) -> Result<(ForwardOutput, ForwardCache)> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => {
                let noise = sample_gumbel(x.rows(), self.arch.clusters, &mut self.rng);
                let out = self.forward_impl(x, Some(&noise))?;
                let n = x.rows() as f64;
                let (mean, var) = column_stats(&out.1.bn_in);
                let mom = self.bn.momentum;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for j in 0..self.bn.width() {
                    self.bn.running_mean[j] = (1.0 - mom) * self.bn.running_mean[j] + mom * mean[j];
                    self.bn.running_var[j] = (1.0 - mom) * self.bn.running_var[j] + mom * var[j] * unbias;
                }
                Ok(out)
            }
        }
    }

    /// Deterministic eval-mode forward pass.
    pub fn forward_eval(&self, x: &Mat) -> Result<(ForwardOutput, ForwardCache)> {
        self.forward_impl(x, None)
    }

    /// Train-mode forward with caller-supplied Gumbel noise; does not touch
    /// running statistics or the generator.
    pub fn forward_with_noise(&self, x: &Mat, noise: &Mat) -> Result<(ForwardOutput, ForwardCache)> {
        if noise.shape() != (x.rows(), self.arch.clusters) {
            return Err(Error::dim(format!(
                "noise is {}x{}, expected {}x{}",
                noise.rows(),
                noise.cols(),
                x.rows(),
                self.arch.clusters
            )));
        }
        self.forward_impl(x, Some(noise))
    }

    fn forward_impl(&self, x: &Mat, noise: Option<&Mat>) -> Result<(ForwardOutput, ForwardCache)> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::dim(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.arch.input_dim
            )));
        }
        if x.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let mode = if noise.is_some() { Mode::Train } else { Mode::Eval };
        let bn_in = self.pre.forward(x)?;
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let (mean, var) = column_stats(&bn_in);
                (mean, var.iter().map(|v| 1.0 / (v + self.bn.eps).sqrt()).collect::<Vec<_>>())
            }
            Mode::Eval => (
                self.bn.running_mean.clone(),
                self.bn.running_var.iter().map(|v| 1.0 / (v + self.bn.eps).sqrt()).collect(),
            ),
        };
        let (xhat, bn_out) = bn_apply(&bn_in, &mean, &inv_std, &self.bn.gamma, &self.bn.beta);
        let shared = relu(&bn_out);

        let (h, feat) = self.feature_head.forward(&shared)?;
        let (z_rows, z_norms) = l2_normalize_rows(&h);

        let (logits, clus) = self.cluster_head.forward(&shared)?;
        let pi = match noise {
            Some(g) => tempered_softmax(&logits.add(g)?, self.arch.tau),
            None => tempered_softmax(&logits, self.arch.tau),
        };
        if !z_rows.is_finite() || !pi.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }

        let out = ForwardOutput {
            z: z_rows.transpose(),
            membership: Membership::new_unchecked(pi.clone()),
        };
        let cache = ForwardCache {
            version: self.version,
            mode,
            x: x.clone(),
            bn_in,
            bn: BnCache {
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            shared,
            feat,
            z_rows,
            z_norms,
            clus,
            pi,
        };
        Ok((out, cache))
    }

    /// Reverse pass: `grad_z` (`d×n`) through the feature head, `grad_pi`
    /// (`n×k`) through the cluster head, both accumulated into the shared
    /// pre-feature layer.
    pub fn backward(&self, cache: &ForwardCache, grad_z: &Mat, grad_pi: &Mat) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {} used with version {}",
                cache.version, self.version
            )));
        }
        let n = cache.x.rows();
        if grad_z.shape() != (self.arch.embed_dim, n) || grad_pi.shape() != (n, self.arch.clusters) {
            return Err(Error::dim(format!(
                "upstream gradients {:?} / {:?} do not match a batch of {n}",
                grad_z.shape(),
                grad_pi.shape()
            )));
        }
        let mut grads = self.zero_gradients();
        let nh = self.feature_head.hidden.len();
        let head_slots = 2 * (nh + 1);
        let (base, heads) = grads.values.split_at_mut(4);
        let (feat_slots, clus_slots) = heads.split_at_mut(head_slots);

        let dz_rows = grad_z.transpose();
        let dh = l2_normalize_backward(&cache.z_rows, &cache.z_norms, &dz_rows);
        let mut d_shared = self.feature_head.backward(&cache.feat, &dh, feat_slots)?;

        let dlogits = tempered_softmax_backward(&cache.pi, grad_pi, self.arch.tau);
        let d_shared_c = self.cluster_head.backward(&cache.clus, &dlogits, clus_slots)?;
        d_shared.add_scaled(1.0, &d_shared_c)?;

        // ReLU after batchnorm: shared = max(bn_out, 0).
        let mut d_bn_out = d_shared;
        for (g, s) in d_bn_out.data_mut().iter_mut().zip(cache.shared.data()) {
            if *s <= 0.0 {
                *g = 0.0;
            }
        }

        let w = self.bn.width();
        let xhat = &cache.bn.xhat;
        let (gamma_slot, rest) = base[2..].split_at_mut(1);
        let beta_slot = &mut rest[0];
        let mut sum_dxhat = vec![0.0; w];
        let mut sum_dxhat_xhat = vec![0.0; w];
        let mut dxhat = d_bn_out.clone();
        for r in 0..n {
            for j in 0..w {
                let dy = d_bn_out[(r, j)];
                gamma_slot[0][j] += dy * xhat[(r, j)];
                beta_slot[j] += dy;
                let dxh = dy * self.bn.gamma[j];
                dxhat[(r, j)] = dxh;
                sum_dxhat[j] += dxh;
                sum_dxhat_xhat[j] += dxh * xhat[(r, j)];
            }
        }
        let mut d_bn_in = dxhat;
        let nf = n as f64;
        for r in 0..n {
            for j in 0..w {
                let s = cache.bn.inv_std[j];
                let v = d_bn_in[(r, j)];
                d_bn_in[(r, j)] = if cache.bn.batch_stats {
                    s * (v - sum_dxhat[j] / nf - xhat[(r, j)] * sum_dxhat_xhat[j] / nf)
                } else {
                    s * v
                };
            }
        }
        let (gw, rest) = base.split_at_mut(1);
        self.pre.backward(&cache.x, &d_bn_in, &mut gw[0], &mut rest[0])?;

        debug_assert!(cache.mode == Mode::Train || !cache.bn.batch_stats);
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 6,
            hidden: 8,
            depth: 1,
            embed_dim: 4,
            clusters: 3,
            tau: 1.0,
        }
    }

    fn input(n: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_cluster_output_gives_uniform_membership() {
        let mut p = ModelParams::new(tiny_arch(), 0).unwrap();
        p.cluster_head.out.weight = Mat::zeros(3, 8);
        p.cluster_head.out.bias = vec![0.0; 3];
        let (out, _) = p.forward_eval(&input(5, 6, 1)).unwrap();
        for r in 0..5 {
            for v in out.membership.pi().row(r) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn outputs_satisfy_invariants() {
        let mut p = ModelParams::new(tiny_arch(), 2).unwrap();
        let x = input(10, 6, 3);
        for mode in [Mode::Train, Mode::Eval] {
            let (out, _) = p.forward(&x, mode).unwrap();
            for n in out.z.col_norms() {
                assert!((n - 1.0).abs() < 1e-12);
            }
            assert!(Membership::new(out.membership.pi().clone()).is_ok());
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let p = ModelParams::new(tiny_arch(), 4).unwrap();
        let x = input(7, 6, 5);
        let a = p.forward_eval(&x).unwrap().0;
        let b = p.forward_eval(&x).unwrap().0;
        assert_eq!(a.z, b.z);
        assert_eq!(a.membership.pi(), b.membership.pi());
    }

    #[test]
    fn seeded_train_forward_repeats() {
        let x = input(9, 6, 5);
        let mut a = ModelParams::new(tiny_arch(), 11).unwrap();
        let mut b = ModelParams::new(tiny_arch(), 11).unwrap();
        for _ in 0..3 {
            let oa = a.forward(&x, Mode::Train).unwrap().0;
            let ob = b.forward(&x, Mode::Train).unwrap().0;
            assert_eq!(oa.membership.pi(), ob.membership.pi());
            assert_eq!(oa.z, ob.z);
        }
        assert_eq!(a.bn, b.bn);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut p = ModelParams::new(tiny_arch(), 1).unwrap();
        let (_, cache) = p.forward(&input(6, 6, 2), Mode::Train).unwrap();
        let g = p.backward(&cache, &Mat::zeros(4, 6), &Mat::zeros(6, 3)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut p = ModelParams::new(tiny_arch(), 1).unwrap();
        let (_, cache) = p.forward(&input(6, 6, 2), Mode::Train).unwrap();
        p.bump_version();
        let err = p.backward(&cache, &Mat::zeros(4, 6), &Mat::zeros(6, 3)).unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)));
    }

    #[test]
    fn dimension_mismatch() {
        let p = ModelParams::new(tiny_arch(), 1).unwrap();
        assert!(matches!(p.forward_eval(&input(3, 5, 0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn gumbel_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Mat::from_rows(&[vec![0.0, 3.0, -2.0], vec![5.0, 1.0, 1.0]]).unwrap();
        let y = gumbel_softmax(&logits, 1e6, &mut rng).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-4);
        }
        let plain = tempered_softmax(&logits, 0.7);
        let with_zero_noise = tempered_softmax(&logits.add(&Mat::zeros(2, 3)).unwrap(), 0.7);
        assert_eq!(plain, with_zero_noise);
        assert!(gumbel_softmax(&logits, 0.0, &mut rng).is_err());
    }

    #[test]
    fn l2norm_backward_is_orthogonal_to_output() {
        let h = input(5, 4, 9);
        let (z, norms) = l2_normalize_rows(&h);
        let dz = input(5, 4, 10);
        let dh = l2_normalize_backward(&z, &norms, &dz);
        for r in 0..5 {
            assert!(dot(dh.row(r), z.row(r)).abs() < 1e-14);
        }
    }
}
