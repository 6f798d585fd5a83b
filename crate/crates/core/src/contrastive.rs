//! Query-side contrastive alignment: a small trainable projector, one-way
//! InfoNCE against frozen targets, and an Adam-style optimizer.
//!
//! The temperature is parameterized as `τ = exp(log_tau)` and is clamped to
//! `τ ≥ 0.01` after every update. All training math runs in `f64`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_fit, plan_epoch, ClusterModel, DEFAULT_MAX_ITER};
use crate::embedding::{normalize_f64, Embedding};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const DEFAULT_TAU: f64 = 0.05;
pub const MIN_TAU: f64 = 0.01;
pub const DEFAULT_LR: f64 = 1e-4;

pub const PROJECTOR_MAGIC: &[u8; 4] = b"CVRP";
pub const PROJECTOR_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 1,
            Activation::Gelu => 2,
        }
    }
}

/// `y = W x + b`, with `W` stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut a = Self::zeros(dim, dim);
        for i in 0..dim {
            a.weights[i * dim + i] = 1.0;
        }
        a
    }

    /// Glorot-uniform weights, zero bias.
    pub fn random(in_dim: usize, out_dim: usize, rng: &mut crate::rng::Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut a = Self::zeros(in_dim, out_dim);
        a.weights.iter_mut().for_each(|w| *w = rng.random_range(-limit..limit));
        a
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub layers: Vec<Affine>,
    pub activation: Option<Activation>,
    pub log_tau: f64,
}

/// Intermediate values from one forward pass, kept for backprop.
struct Trace {
    input: Vec<f64>,
    /// Pre-activation of the hidden layer (two-layer projectors only).
    hidden_pre: Option<Vec<f64>>,
    hidden: Option<Vec<f64>>,
    out_norm: f64,
    unit: Vec<f64>,
}

impl Projector {
    pub fn new(layers: Vec<Affine>, activation: Option<Activation>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let p = Self {
            layers,
            activation,
            log_tau: tau.ln(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn identity(dim: usize, tau: f64) -> Result<Self> {
        Self::new(vec![Affine::identity(dim)], None, tau)
    }

    pub fn linear(in_dim: usize, out_dim: usize, tau: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        Self::new(vec![Affine::random(in_dim, out_dim, &mut rng)], None, tau)
    }

    pub fn mlp(in_dim: usize, hidden: usize, out_dim: usize, activation: Activation, tau: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let l1 = Affine::random(in_dim, hidden, &mut rng);
        let l2 = Affine::random(hidden, out_dim, &mut rng);
        Self::new(vec![l1, l2], Some(activation), tau)
    }

    pub fn validate(&self) -> Result<()> {
        match self.layers.len() {
            1 | 2 => {}
            n => return Err(Error::invalid(format!("projector needs 1 or 2 layers, got {n}"))),
        }
        for l in &self.layers {
            if l.in_dim == 0 || l.out_dim == 0 || l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::invalid("inconsistent affine layer shape"));
            }
        }
        if self.layers.len() == 2 && self.layers[0].out_dim != self.layers[1].in_dim {
            return Err(Error::DimMismatch {
                expected: self.layers[0].out_dim,
                actual: self.layers[1].in_dim,
            });
        }
        if !self.log_tau.is_finite() {
            return Err(Error::non_finite("log_tau"));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum::<usize>() + 1
    }

    /// Parameters in a fixed order: per layer weights then bias, then `log_tau`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out.push(self.log_tau);
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter vector length");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        self.log_tau = params[off];
    }

    fn trace(&self, pooled: &[f32]) -> Result<Trace> {
        if pooled.len() != self.in_dim() {
            return Err(Error::DimMismatch {
                expected: self.in_dim(),
                actual: pooled.len(),
            });
        }
        let input: Vec<f64> = pooled.iter().map(|&v| f64::from(v)).collect();
        let (hidden_pre, hidden, mut out) = if self.layers.len() == 2 {
            let pre = self.layers[0].forward(&input);
            let h: Vec<f64> = match self.activation {
                Some(act) => pre.iter().map(|&x| act.apply(x)).collect(),
                None => pre.clone(),
            };
            let out = self.layers[1].forward(&h);
            (Some(pre), Some(h), out)
        } else {
            (None, None, self.layers[0].forward(&input))
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("projector activations"));
        }
        let out_norm = normalize_f64(&mut out)?;
        Ok(Trace {
            input,
            hidden_pre,
            hidden,
            out_norm,
            unit: out,
        })
    }

    /// Projects a pooled feature and ℓ₂-normalizes the result.
    pub fn forward(&self, pooled: &[f32]) -> Result<Embedding> {
        Embedding::from_f64(&self.trace(pooled)?.unit)
    }

    /// Accumulates parameter gradients for one sample given `∂L/∂e`.
    fn backward(&self, t: &Trace, d_unit: &[f64], grads: &mut [(Vec<f64>, Vec<f64>)]) {
        let proj: f64 = t.unit.iter().zip(d_unit).map(|(e, g)| e * g).sum();
        let d_out: Vec<f64> = d_unit
            .iter()
            .zip(&t.unit)
            .map(|(g, e)| (g - e * proj) / t.out_norm)
            .collect();

        let last = self.layers.len() - 1;
        let last_in = t.hidden.as_deref().unwrap_or(&t.input);
        accumulate_affine(&mut grads[last], &d_out, last_in);

        if last == 1 {
            let l2 = &self.layers[1];
            let mut d_hidden = vec![0.0; l2.in_dim];
            for (row, g) in l2.weights.chunks_exact(l2.in_dim).zip(&d_out) {
                for (dh, w) in d_hidden.iter_mut().zip(row) {
                    *dh += w * g;
                }
            }
            if let (Some(act), Some(pre)) = (self.activation, &t.hidden_pre) {
                for (dh, &x) in d_hidden.iter_mut().zip(pre) {
                    *dh *= act.derivative(x);
                }
            }
            accumulate_affine(&mut grads[0], &d_hidden, &t.input);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PROJECTOR_MAGIC)?;
        w.write_all(&PROJECTOR_VERSION.to_le_bytes())?;
        w.write_all(&[self.activation.map_or(0, Activation::code)])?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.in_dim as u32).to_le_bytes())?;
            w.write_all(&(l.out_dim as u32).to_le_bytes())?;
            for v in l.weights.iter().chain(&l.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&self.log_tau.to_le_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &'static str| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or(Error::Truncated(what))?;
            pos += n;
            Ok(s)
        };
        if take(4, "magic")? != PROJECTOR_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
        if version == 0 || version > PROJECTOR_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: PROJECTOR_VERSION,
            });
        }
        let activation = match take(1, "activation")?[0] {
            0 => None,
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Gelu),
            c => return Err(Error::invalid(format!("unknown activation code {c}"))),
        };
        let n_layers = u32::from_le_bytes(take(4, "layer count")?.try_into().unwrap()) as usize;
        if !(1..=2).contains(&n_layers) {
            return Err(Error::invalid(format!("projector needs 1 or 2 layers, got {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = u32::from_le_bytes(take(4, "layer shape")?.try_into().unwrap()) as usize;
            let out_dim = u32::from_le_bytes(take(4, "layer shape")?.try_into().unwrap()) as usize;
            let n = in_dim
                .checked_mul(out_dim)
                .and_then(|w| w.checked_add(out_dim))
                .and_then(|n| n.checked_mul(8))
                .ok_or(Error::Truncated("layer"))?;
            let vals: Vec<f64> = take(n, "layer")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (w, b) = vals.split_at(in_dim * out_dim);
            layers.push(Affine {
                in_dim,
                out_dim,
                weights: w.to_vec(),
                bias: b.to_vec(),
            });
        }
        let log_tau = f64::from_le_bytes(take(8, "log_tau")?.try_into().unwrap());
        let p = Projector {
            layers,
            activation,
            log_tau,
        };
        p.validate()?;
        Ok(p)
    }
}

fn accumulate_affine(grad: &mut (Vec<f64>, Vec<f64>), d_out: &[f64], input: &[f64]) {
    let in_dim = input.len();
    for (o, &g) in d_out.iter().enumerate() {
        for (dw, x) in grad.0[o * in_dim..(o + 1) * in_dim].iter_mut().zip(input) {
            *dw += g * x;
        }
        grad.1[o] += g;
    }
}

pub fn projector_forward(p: &Projector, pooled: &[f32]) -> Result<Embedding> {
    p.forward(pooled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    /// `∂L/∂q_i` for each query row.
    pub d_queries: Vec<Vec<f64>>,
    pub d_log_tau: f64,
}

fn sum_sorted(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// One-way (query → target) InfoNCE over a batch of unit rows.
///
/// Sums over rows and over each row's logits are taken in sorted order, so
/// permuting `(queries, targets)` together leaves the loss bit-identical.
pub fn infonce_loss_and_grad<Q: AsRef<[f64]>, T: AsRef<[f64]>>(queries: &[Q], targets: &[T], tau: f64) -> Result<InfoNceOutput> {
    let b = queries.len();
    if b == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    if targets.len() != b {
        return Err(Error::DimMismatch {
            expected: b,
            actual: targets.len(),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let dim = queries[0].as_ref().len();
    for row in queries.iter().map(AsRef::as_ref).chain(targets.iter().map(AsRef::as_ref)) {
        if row.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("contrastive batch"));
        }
    }

    let bf = b as f64;
    let mut row_losses = Vec::with_capacity(b);
    let mut d_queries = vec![vec![0.0; dim]; b];
    let mut d_log_tau_terms = Vec::with_capacity(b);
    for (i, q) in queries.iter().enumerate() {
        let q = q.as_ref();
        let logits: Vec<f64> = targets
            .iter()
            .map(|t| q.iter().zip(t.as_ref()).map(|(a, c)| a * c).sum::<f64>() / tau)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let denom = sum_sorted(exps.clone());
        row_losses.push(max + denom.ln() - logits[i]);

        let mut weighted_logit = Vec::with_capacity(b);
        for (j, (t, e)) in targets.iter().zip(&exps).enumerate() {
            let coef = e / denom - if i == j { 1.0 } else { 0.0 };
            if coef != 0.0 {
                for (d, x) in d_queries[i].iter_mut().zip(t.as_ref()) {
                    *d += coef * x / (bf * tau);
                }
            }
            weighted_logit.push(coef * logits[j]);
        }
        d_log_tau_terms.push(-sum_sorted(weighted_logit) / bf);
    }
    let loss = sum_sorted(row_losses) / bf;
    if !loss.is_finite() {
        return Err(Error::non_finite("InfoNCE loss"));
    }
    Ok(InfoNceOutput {
        loss,
        d_queries,
        d_log_tau: sum_sorted(d_log_tau_terms),
    })
}

fn unit_targets<T: AsRef<[f32]>>(targets: &[T]) -> Result<Vec<Vec<f64>>> {
    targets
        .iter()
        .map(|t| {
            let mut v: Vec<f64> = t.as_ref().iter().map(|&x| f64::from(x)).collect();
            normalize_f64(&mut v)?;
            Ok(v)
        })
        .collect()
}

/// Loss and flat parameter gradient (same order as [`Projector::flat_params`]).
pub fn loss_and_grad<P: AsRef<[f32]>, T: AsRef<[f32]>>(p: &Projector, pooled: &[P], targets: &[T]) -> Result<(f64, Vec<f64>)> {
    if pooled.len() != targets.len() {
        return Err(Error::invalid("pooled and target batches differ in size"));
    }
    let traces = pooled.iter().map(|x| p.trace(x.as_ref())).collect::<Result<Vec<_>>>()?;
    let targets = unit_targets(targets)?;
    let queries: Vec<&[f64]> = traces.iter().map(|t| t.unit.as_slice()).collect();
    let out = infonce_loss_and_grad(&queries, &targets, p.tau())?;

    let mut grads: Vec<(Vec<f64>, Vec<f64>)> = p
        .layers
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
        .collect();
    for (t, dq) in traces.iter().zip(&out.d_queries) {
        p.backward(t, dq, &mut grads);
    }
    let mut flat = Vec::with_capacity(p.param_count());
    for (w, b) in grads {
        flat.extend(w);
        flat.extend(b);
    }
    flat.push(out.d_log_tau);
    Ok((out.loss, flat))
}

pub fn batch_loss<P: AsRef<[f32]>, T: AsRef<[f32]>>(p: &Projector, pooled: &[P], targets: &[T]) -> Result<f64> {
    let queries = pooled
        .iter()
        .map(|x| p.trace(x.as_ref()).map(|t| t.unit))
        .collect::<Result<Vec<_>>>()?;
    Ok(infonce_loss_and_grad(&queries, &unit_targets(targets)?, p.tau())?.loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Max relative error over every parameter.
    pub max_rel_error: f64,
    /// Relative error of the `log_tau` component alone.
    pub log_tau_rel_error: f64,
}

fn rel_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8)
}

/// Central finite differences against the analytic gradient.
pub fn grad_check<P: AsRef<[f32]>, T: AsRef<[f32]>>(p: &Projector, pooled: &[P], targets: &[T], epsilon: f64) -> Result<GradCheck> {
    let (_, analytic) = loss_and_grad(p, pooled, targets)?;
    let base = p.flat_params();
    let mut probe = p.clone();
    let mut errors = Vec::with_capacity(base.len());
    for (i, an) in analytic.iter().enumerate() {
        let mut params = base.clone();
        params[i] = base[i] + epsilon;
        probe.set_flat_params(&params);
        let plus = batch_loss(&probe, pooled, targets)?;
        params[i] = base[i] - epsilon;
        probe.set_flat_params(&params);
        let minus = batch_loss(&probe, pooled, targets)?;
        errors.push(rel_error((plus - minus) / (2.0 * epsilon), *an));
    }
    Ok(GradCheck {
        max_rel_error: errors.iter().copied().fold(0.0, f64::max),
        log_tau_rel_error: *errors.last().expect("log_tau is always a parameter"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(p: &Projector) -> Self {
        Self {
            step: 0,
            m: vec![0.0; p.param_count()],
            v: vec![0.0; p.param_count()],
            losses: Vec::new(),
        }
    }
}

/// Forward, backprop and one Adam update of every projector parameter and `log_tau`.
pub fn train_step<P: AsRef<[f32]>, T: AsRef<[f32]>>(
    p: &mut Projector,
    state: &mut TrainState,
    pooled: &[P],
    targets: &[T],
    lr: f64,
    opt: &AdamConfig,
) -> Result<f64> {
    if state.m.len() != p.param_count() {
        return Err(Error::invalid("train state does not match projector shape"));
    }
    let (loss, grad) = loss_and_grad(p, pooled, targets).map_err(|e| Error::Diverged {
        step: state.step + 1,
        detail: format!("{e} (tau={})", p.tau()),
    })?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            step: state.step + 1,
            detail: format!("loss={loss}, tau={}", p.tau()),
        });
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let mut params = p.flat_params();
    for (i, (x, g)) in params.iter_mut().zip(&grad).enumerate() {
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        *x -= lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * *x);
    }
    p.set_flat_params(&params);
    p.log_tau = p.log_tau.max(MIN_TAU.ln());
    state.losses.push(loss);
    Ok(loss)
}

/// Cosine annealing from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub clusters: usize,
    pub batch_size: usize,
    pub epochs: u64,
    pub lr: f64,
    pub seed: u64,
    pub drop_last: bool,
    pub cosine_anneal: bool,
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub init_tau: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clusters: 64,
            batch_size: 512,
            epochs: 1,
            lr: DEFAULT_LR,
            seed: 0,
            drop_last: false,
            cosine_anneal: false,
            hidden: None,
            activation: Activation::Gelu,
            init_tau: DEFAULT_TAU,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub projector: Projector,
    pub state: TrainState,
    pub epoch_mean_loss: Vec<f64>,
    /// The k-means model the batches were drawn from.
    pub clusters: ClusterModel,
}

/// Full desk-scale training run: cluster the targets, then step through
/// cluster-pure batches, re-planning each epoch.
pub fn train_projector<P: AsRef<[f32]>, T: AsRef<[f32]>>(pooled: &[P], targets: &[T], cfg: &TrainConfig) -> Result<TrainReport> {
    if pooled.len() != targets.len() {
        return Err(Error::invalid("pooled and target sets differ in size"));
    }
    if pooled.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let in_dim = pooled[0].as_ref().len();
    let out_dim = targets[0].as_ref().len();
    let mut p = match cfg.hidden {
        Some(h) => Projector::mlp(in_dim, h, out_dim, cfg.activation, cfg.init_tau, cfg.seed)?,
        None => Projector::linear(in_dim, out_dim, cfg.init_tau, cfg.seed)?,
    };
    let model = kmeans_fit(targets, cfg.clusters.min(targets.len()), cfg.seed, DEFAULT_MAX_ITER)?;
    let mut state = TrainState::new(&p);

    let plans = (0..cfg.epochs)
        .map(|e| plan_epoch(&model, cfg.batch_size, cfg.seed, e, cfg.drop_last))
        .collect::<Result<Vec<_>>>()?;
    let total_steps: u64 = plans.iter().map(|p| p.len() as u64).sum();
    let mut epoch_mean_loss = Vec::with_capacity(plans.len());
    for plan in &plans {
        let mut losses = Vec::with_capacity(plan.len());
        for batch in &plan.batches {
            let xs: Vec<&[f32]> = batch.samples.iter().map(|&i| pooled[i].as_ref()).collect();
            let ts: Vec<&[f32]> = batch.samples.iter().map(|&i| targets[i].as_ref()).collect();
            let lr = if cfg.cosine_anneal {
                cosine_lr(cfg.lr, state.step, total_steps)
            } else {
                cfg.lr
            };
            losses.push(train_step(&mut p, &mut state, &xs, &ts, lr, &cfg.adam)?);
        }
        epoch_mean_loss.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(TrainReport {
        projector: p,
        state,
        epoch_mean_loss,
        clusters: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identity_forward() {
        let p = Projector::identity(2, DEFAULT_TAU).unwrap();
        let e = p.forward(&[3.0, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-7 && (e.as_slice()[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_weights_error() {
        let p = Projector::new(vec![Affine::zeros(2, 2)], None, DEFAULT_TAU).unwrap();
        assert!(matches!(p.forward(&[3.0, 4.0]), Err(Error::ZeroNorm)));
        assert!(matches!(p.forward(&[3.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn forward_is_unit() {
        let p = Projector::mlp(5, 7, 3, Activation::Gelu, 0.05, 3).unwrap();
        let e = p.forward(&[0.1, -2.0, 0.3, 1.0, 0.0]).unwrap();
        assert!((e.norm() - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn single_row_batch() {
        let out = infonce_loss_and_grad(&[vec![0.6, 0.8]], &[vec![1.0, 0.0]], 0.05).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.d_queries[0].iter().all(|&g| g == 0.0));
        assert_eq!(out.d_log_tau, 0.0);
    }

    #[test]
    fn two_point_closed_form() {
        let q = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = infonce_loss_and_grad(&q, &q, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn equal_similarity_closed_form() {
        // Regular simplex-ish: q_i = t_i = e_i in 4-D, so s_on = 1, s_off = 0.
        let b = 4;
        let rows: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let tau = 0.3;
        let out = infonce_loss_and_grad(&rows, &rows, tau).unwrap();
        let expected = (1.0 + (b as f64 - 1.0) * ((0.0 - 1.0) / tau).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn infonce_errors() {
        let q = [vec![1.0, 0.0]];
        assert!(infonce_loss_and_grad(&q, &[vec![1.0, 0.0, 0.0]], 1.0).is_err());
        assert!(infonce_loss_and_grad(&q, &[vec![f64::NAN, 0.0]], 1.0).is_err());
        assert!(infonce_loss_and_grad(&q, &q, 0.0).is_err());
        let empty: [Vec<f64>; 0] = [];
        assert!(infonce_loss_and_grad(&empty, &empty, 1.0).is_err());
    }

    fn gaussian_batch(rng: &mut crate::rng::Rng, b: usize, d: usize) -> Vec<Vec<f32>> {
        (0..b)
            .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    }

    #[test]
    fn grad_check_small() {
        let mut rng = seeded(42);
        let p = Projector::mlp(6, 5, 4, Activation::Tanh, 0.2, 1).unwrap();
        let x = gaussian_batch(&mut rng, 4, 6);
        let t = gaussian_batch(&mut rng, 4, 4);
        let gc = grad_check(&p, &x, &t, 1e-4).unwrap();
        assert!(gc.max_rel_error < 1e-4, "{gc:?}");
        assert!(gc.log_tau_rel_error < 1e-4, "{gc:?}");
    }

    #[test]
    fn grad_check_zero_gradient_point() {
        let mut rng = seeded(7);
        let p = Projector::linear(3, 3, 0.1, 2).unwrap();
        let x = gaussian_batch(&mut rng, 1, 3);
        let t = gaussian_batch(&mut rng, 1, 3);
        let gc = grad_check(&p, &x, &t, 1e-4).unwrap();
        assert_eq!(gc.max_rel_error, 0.0);
    }

    fn toy_batch() -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut rng = seeded(5);
        let pooled = gaussian_batch(&mut rng, 8, 8);
        let targets = (0..8)
            .map(|i| (0..8).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        (pooled, targets)
    }

    #[test]
    fn loss_decreases_on_separable_batch() {
        let (x, t) = toy_batch();
        let mut p = Projector::linear(8, 8, DEFAULT_TAU, 11).unwrap();
        let mut st = TrainState::new(&p);
        let opt = AdamConfig::default();
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let l = train_step(&mut p, &mut st, &x, &t, 1e-2, &opt).unwrap();
            assert!(l < prev, "loss went from {prev} to {l}");
            prev = l;
        }
        for _ in 0..450 {
            train_step(&mut p, &mut st, &x, &t, 1e-2, &opt).unwrap();
        }
        let last = batch_loss(&p, &x, &t).unwrap();
        assert!(last < 0.05, "final loss {last}");
        assert!(p.tau() >= MIN_TAU);
    }

    #[test]
    fn zero_lr_is_null_update() {
        let (x, t) = toy_batch();
        let mut p = Projector::mlp(8, 6, 8, Activation::Gelu, DEFAULT_TAU, 2).unwrap();
        let before = p.clone();
        let mut st = TrainState::new(&p);
        let l0 = train_step(&mut p, &mut st, &x, &t, 0.0, &AdamConfig::default()).unwrap();
        let l1 = train_step(&mut p, &mut st, &x, &t, 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(l0, l1);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, t) = toy_batch();
        let run = || {
            let mut p = Projector::linear(8, 8, DEFAULT_TAU, 3).unwrap();
            let mut st = TrainState::new(&p);
            for _ in 0..20 {
                train_step(&mut p, &mut st, &x, &t, 1e-3, &AdamConfig::default()).unwrap();
            }
            st.losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tau_clamped() {
        let (x, t) = toy_batch();
        let mut p = Projector::linear(8, 8, 0.0101, 3).unwrap();
        let mut st = TrainState::new(&p);
        for _ in 0..200 {
            train_step(&mut p, &mut st, &x, &t, 0.5, &AdamConfig::default()).unwrap();
            assert!(p.tau() >= MIN_TAU * (1.0 - 1e-12));
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let p = Projector::mlp(4, 3, 2, Activation::Tanh, 0.07, 9).unwrap();
        p.save(&path).unwrap();
        assert_eq!(Projector::load(&path).unwrap(), p);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[5] = 9;
        assert!(matches!(Projector::from_bytes(&bytes), Err(Error::UnsupportedVersion { .. })));
        bytes[0] = 0;
        assert!(matches!(Projector::from_bytes(&bytes), Err(Error::BadMagic)));
        let good = std::fs::read(&path).unwrap();
        assert!(matches!(Projector::from_bytes(&good[..good.len() - 3]), Err(Error::Truncated(_))));
    }

    #[test]
    fn trainer_runs_cluster_pure_epochs() {
        let mut rng = seeded(8);
        let pooled = gaussian_batch(&mut rng, 64, 6);
        let targets = gaussian_batch(&mut rng, 64, 4);
        let cfg = TrainConfig {
            clusters: 4,
            batch_size: 8,
            epochs: 3,
            lr: 1e-2,
            seed: 1,
            cosine_anneal: true,
            hidden: Some(8),
            ..TrainConfig::default()
        };
        let a = train_projector(&pooled, &targets, &cfg).unwrap();
        let b = train_projector(&pooled, &targets, &cfg).unwrap();
        assert_eq!(a.state.losses, b.state.losses);
        assert_eq!(a.epoch_mean_loss.len(), 3);
        assert_eq!(a.clusters.cluster_sizes().iter().sum::<usize>(), 64);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
    }
}
