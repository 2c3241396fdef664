//! MLP feature extractor with variational heads, plus the checkpoint format.
//!
//! The backbone is a plain relu MLP; the heads turn its output `h` into
//! posterior parameters. Per-sample scale parameters (σ² for the Gaussian
//! head, k for the Weibull head) are single scalars broadcast across the
//! latent dimension by default, which keeps the head overhead at d×1
//! parameters; a per-dimension variant sits behind `per_dim_scale`.
//!
//! The Weibull scale uses softplus(·) + 1e-6 instead of a bare relu so λ stays
//! strictly positive while the posterior mean remains exactly the positive
//! head output: λ = (softplus(f_λ(h)) + 1e-6)/Γ(1 + 1/k), hence
//! E[θ] = softplus(f_λ(h)) + 1e-6. The relu variant of the scale head is
//! available behind `strict_relu_scale` for ablations.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distributions::{
    gamma_one_plus_inv, weibull_mean, GaussianParams, WeibullParams, WEIBULL_K_MAX, WEIBULL_K_MIN,
};
use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::special;
use crate::tensor::Tensor;

pub const SCALE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Gaussian,
    Weibull,
    Deterministic,
}

/// One linear layer, weights `[in, out]`, bias `[out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
}

impl Dense {
    fn glorot(input: usize, output: usize, rng: &mut Pcg32) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = Tensor::from_raw(
            vec![input, output],
            (0..input * output).map(|_| rng.uniform_range(-bound, bound)).collect(),
        );
        Dense { w, b: Tensor::zeros(vec![output]) }
    }

    fn apply_value(&self, x: &[f64]) -> Vec<f64> {
        let (input, output) = (self.w.shape()[0], self.w.shape()[1]);
        debug_assert_eq!(x.len(), input);
        let mut out = self.b.data().to_vec();
        for p in 0..input {
            let xv = x[p];
            if xv == 0.0 {
                continue;
            }
            for j in 0..output {
                out[j] += xv * self.w.data()[p * output + j];
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum HeadWeights {
    Gaussian { mu: Dense, sigma: Dense },
    Weibull { k: Dense, lam: Dense },
    Deterministic { z: Dense },
}

/// MLP backbone plus a variational (or plain linear) head.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    /// Full layer widths: input dim, hidden sizes, feature dim h.
    pub arch: Vec<usize>,
    pub layers: Vec<Dense>,
    pub head_kind: HeadKind,
    pub latent_dim: usize,
    pub per_dim_scale: bool,
    pub strict_relu_scale: bool,
    pub head: HeadWeights,
}

/// Variational posterior of one sample, or the point output of the
/// deterministic head.
#[derive(Clone, Debug)]
pub enum Posterior {
    Gaussian(GaussianParams<f64>),
    Weibull(WeibullParams<f64>),
    Point(Vec<f64>),
}

impl Posterior {
    /// Posterior mean, the deterministic feature of a sample.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            Posterior::Gaussian(p) => p.mu().to_vec(),
            Posterior::Weibull(p) => weibull_mean(p),
            Posterior::Point(z) => z.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// One reparameterized sample.
    Stochastic,
    /// Degenerate posterior: θ is the posterior mean, no noise consumed.
    /// Realizes the σ → 0 (Gaussian) and k → ∞ (Weibull) reductions.
    Deterministic,
}

impl EncoderModel {
    /// Fresh model with glorot-uniform weights. Scale-head biases start at
    /// softplus⁻¹(1) so training begins at σ² = 1 / k = 1.
    pub fn init(
        arch: &[usize],
        head_kind: HeadKind,
        latent_dim: usize,
        per_dim_scale: bool,
        strict_relu_scale: bool,
        rng: &mut Pcg32,
    ) -> Result<Self> {
        if arch.len() < 2 {
            return Err(Error::Contract("arch needs at least input and feature widths".into()));
        }
        if latent_dim == 0 {
            return Err(Error::Contract("latent_dim must be at least 1".into()));
        }
        let layers: Vec<Dense> = arch.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
        let h_dim = *arch.last().expect("non-empty arch");
        let scale_out = if per_dim_scale { latent_dim } else { 1 };
        let scale_bias = special::softplus_inverse(1.0f64);
        // Scale heads start with zero weights so softplus(bias) really does
        // put σ² = 1 / k = 1 on every sample at step 0; glorot weights on a
        // large-norm h would saturate the softplus (and the k clamp) from the
        // start and kill those gradients.
        let head = match head_kind {
            HeadKind::Gaussian => {
                let mu = Dense::glorot(h_dim, latent_dim, rng);
                let mut sigma = Dense::glorot(h_dim, scale_out, rng);
                sigma.w.data_mut().fill(0.0);
                sigma.b.data_mut().fill(scale_bias);
                HeadWeights::Gaussian { mu, sigma }
            }
            HeadKind::Weibull => {
                let mut k = Dense::glorot(h_dim, scale_out, rng);
                k.w.data_mut().fill(0.0);
                k.b.data_mut().fill(scale_bias);
                let lam = Dense::glorot(h_dim, latent_dim, rng);
                HeadWeights::Weibull { k, lam }
            }
            HeadKind::Deterministic => {
                HeadWeights::Deterministic { z: Dense::glorot(h_dim, latent_dim, rng) }
            }
        };
        Ok(EncoderModel {
            arch: arch.to_vec(),
            layers,
            head_kind,
            latent_dim,
            per_dim_scale,
            strict_relu_scale,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    /// Named parameter tensors in declaration (checkpoint) order.
    pub fn params(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("mlp.{i}.w"), &layer.w));
            out.push((format!("mlp.{i}.b"), &layer.b));
        }
        match &self.head {
            HeadWeights::Gaussian { mu, sigma } => {
                out.push(("head.mu.w".into(), &mu.w));
                out.push(("head.mu.b".into(), &mu.b));
                out.push(("head.sigma.w".into(), &sigma.w));
                out.push(("head.sigma.b".into(), &sigma.b));
            }
            HeadWeights::Weibull { k, lam } => {
                out.push(("head.k.w".into(), &k.w));
                out.push(("head.k.b".into(), &k.b));
                out.push(("head.lam.w".into(), &lam.w));
                out.push(("head.lam.b".into(), &lam.b));
            }
            HeadWeights::Deterministic { z } => {
                out.push(("head.z.w".into(), &z.w));
                out.push(("head.z.b".into(), &z.b));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("mlp.{i}.w"), &mut layer.w));
            out.push((format!("mlp.{i}.b"), &mut layer.b));
        }
        match &mut self.head {
            HeadWeights::Gaussian { mu, sigma } => {
                out.push(("head.mu.w".into(), &mut mu.w));
                out.push(("head.mu.b".into(), &mut mu.b));
                out.push(("head.sigma.w".into(), &mut sigma.w));
                out.push(("head.sigma.b".into(), &mut sigma.b));
            }
            HeadWeights::Weibull { k, lam } => {
                out.push(("head.k.w".into(), &mut k.w));
                out.push(("head.k.b".into(), &mut k.b));
                out.push(("head.lam.w".into(), &mut lam.w));
                out.push(("head.lam.b".into(), &mut lam.b));
            }
            HeadWeights::Deterministic { z } => {
                out.push(("head.z.w".into(), &mut z.w));
                out.push(("head.z.b".into(), &mut z.b));
            }
        }
        out
    }

    // ---- tape route (batched) ----

    /// Registers every parameter as a leaf, in `params()` order.
    pub fn register(&self, tape: &mut Tape<f64>) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    /// Gradients in `params()` order after a backward pass.
    pub fn collect_grads(&self, tape: &Tape<f64>, vars: &[Var]) -> Result<Vec<Tensor<f64>>> {
        self.params()
            .iter()
            .zip(vars)
            .map(|((name, t), &v)| {
                let g = tape
                    .grad(v)
                    .ok_or_else(|| Error::Numeric(format!("no gradient for parameter {name}")))?;
                Ok(Tensor::from_raw(t.shape().to_vec(), g.to_vec()))
            })
            .collect()
    }

    /// MLP forward on the tape: relu between layers, none after the last.
    pub fn encode_on(&self, tape: &mut Tape<f64>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, _) in self.layers.iter().enumerate() {
            let w = vars[2 * i];
            let b = vars[2 * i + 1];
            let lin = tape.matmul(h, w)?;
            h = tape.add_rowvec(lin, b)?;
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Head forward on the tape. Scale-like outputs keep their head shape
    /// (`[B, 1]` shared, `[B, d]` per-dimension).
    pub fn head_on(&self, tape: &mut Tape<f64>, vars: &[Var], h: Var) -> Result<HeadOutputs> {
        let base = 2 * self.layers.len();
        match self.head_kind {
            HeadKind::Gaussian => {
                let mu_lin = tape.matmul(h, vars[base])?;
                let mu = tape.add_rowvec(mu_lin, vars[base + 1])?;
                let s_lin = tape.matmul(h, vars[base + 2])?;
                let s_raw = tape.add_rowvec(s_lin, vars[base + 3])?;
                let sigma2 = tape.softplus(s_raw);
                Ok(HeadOutputs::Gaussian { mu, sigma2 })
            }
            HeadKind::Weibull => {
                let k_lin = tape.matmul(h, vars[base])?;
                let k_raw = tape.add_rowvec(k_lin, vars[base + 1])?;
                let k_sp = tape.softplus(k_raw);
                let k = tape.clamp(k_sp, WEIBULL_K_MIN, WEIBULL_K_MAX);
                let l_lin = tape.matmul(h, vars[base + 2])?;
                let l_raw = tape.add_rowvec(l_lin, vars[base + 3])?;
                let scale = if self.strict_relu_scale {
                    tape.relu(l_raw)
                } else {
                    let sp = tape.softplus(l_raw);
                    tape.add_scalar(sp, SCALE_EPS)
                };
                let gamma_term = Self::gamma_term_on(tape, k)?;
                let lam = if self.per_dim_scale {
                    tape.div(scale, gamma_term)?
                } else {
                    tape.div_colvec(scale, gamma_term)?
                };
                Ok(HeadOutputs::Weibull { k, lam })
            }
            HeadKind::Deterministic => {
                let z_lin = tape.matmul(h, vars[base])?;
                let z = tape.add_rowvec(z_lin, vars[base + 1])?;
                Ok(HeadOutputs::Deterministic { z })
            }
        }
    }

    /// Γ(1 + 1/k) on the tape; mirrors
    /// [`crate::distributions::gamma_one_plus_inv`] operation for operation.
    fn gamma_term_on(tape: &mut Tape<f64>, k: Var) -> Result<Var> {
        let kinv = tape.recip(k);
        let one_plus = tape.add_scalar(kinv, 1.0);
        let lg = tape.lgamma(one_plus)?;
        Ok(tape.exp(lg))
    }

    /// Reparameterized (or deterministic) latent θ for a whole batch.
    ///
    /// `noise` carries standard-normal draws for the Gaussian head or
    /// `ln(−ln(1−ε))` values for the Weibull head, shape `[B, d]`; it is
    /// ignored in deterministic mode.
    pub fn theta_on(
        &self,
        tape: &mut Tape<f64>,
        outputs: &HeadOutputs,
        noise: Option<Var>,
        mode: ForwardMode,
    ) -> Result<Var> {
        match (outputs, mode) {
            (HeadOutputs::Gaussian { mu, .. }, ForwardMode::Deterministic) => Ok(*mu),
            (HeadOutputs::Gaussian { mu, sigma2 }, ForwardMode::Stochastic) => {
                let eps =
                    noise.ok_or_else(|| Error::Contract("stochastic mode needs noise".into()))?;
                let sigma = tape.sqrt(*sigma2)?;
                let scaled = if self.per_dim_scale {
                    tape.mul(eps, sigma)?
                } else {
                    tape.mul_colvec(eps, sigma)?
                };
                tape.add(*mu, scaled)
            }
            (HeadOutputs::Weibull { k, lam }, ForwardMode::Deterministic) => {
                let gamma_term = Self::gamma_term_on(tape, *k)?;
                if self.per_dim_scale {
                    tape.mul(*lam, gamma_term)
                } else {
                    tape.mul_colvec(*lam, gamma_term)
                }
            }
            (HeadOutputs::Weibull { k, lam }, ForwardMode::Stochastic) => {
                let ln_u =
                    noise.ok_or_else(|| Error::Contract("stochastic mode needs noise".into()))?;
                let kinv = tape.recip(*k);
                let pow = if self.per_dim_scale {
                    tape.mul(kinv, ln_u)?
                } else {
                    let (_, d) = tape.value(ln_u).matrix_dims()?;
                    let kinv_b = tape.broadcast_col(kinv, d)?;
                    tape.mul(kinv_b, ln_u)?
                };
                let u_pow = tape.exp(pow);
                tape.mul(*lam, u_pow)
            }
            (HeadOutputs::Deterministic { z }, _) => Ok(*z),
        }
    }

    // ---- value route (per sample) ----

    /// MLP forward for a single feature vector.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, encoder wants {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply_value(&h);
            if i != last {
                for v in &mut h {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(h)
    }

    fn broadcast_scale(&self, raw: Vec<f64>) -> Vec<f64> {
        if self.per_dim_scale {
            raw
        } else {
            vec![raw[0]; self.latent_dim]
        }
    }

    /// Posterior parameters (or point output) for a single sample.
    pub fn posterior(&self, x: &[f64]) -> Result<Posterior> {
        let h = self.encode(x)?;
        match &self.head {
            HeadWeights::Gaussian { mu, sigma } => {
                let mu_v = mu.apply_value(&h);
                let s_raw = sigma.apply_value(&h);
                let sigma2 =
                    self.broadcast_scale(s_raw.into_iter().map(special::softplus).collect());
                Ok(Posterior::Gaussian(GaussianParams::new(mu_v, sigma2)?))
            }
            HeadWeights::Weibull { k, lam } => {
                let k_raw = k.apply_value(&h);
                let k_v = self.broadcast_scale(
                    k_raw
                        .into_iter()
                        .map(|v| special::softplus(v).max(WEIBULL_K_MIN).min(WEIBULL_K_MAX))
                        .collect(),
                );
                let scale: Vec<f64> = lam
                    .apply_value(&h)
                    .into_iter()
                    .map(|v| {
                        if self.strict_relu_scale {
                            v.max(0.0)
                        } else {
                            special::softplus(v) + SCALE_EPS
                        }
                    })
                    .collect();
                let lam_v: Vec<f64> = scale
                    .iter()
                    .zip(&k_v)
                    .map(|(&s, &kk)| s / gamma_one_plus_inv(kk))
                    .collect();
                Ok(Posterior::Weibull(WeibullParams::new(k_v, lam_v)?))
            }
            HeadWeights::Deterministic { z } => Ok(Posterior::Point(z.apply_value(&h))),
        }
    }

    /// Single-sample forward: θ plus the posterior it was drawn from.
    ///
    /// `noise` is d standard-normal draws (Gaussian head) or d uniforms
    /// (Weibull head); unused by the deterministic head or mode.
    pub fn forward(
        &self,
        x: &[f64],
        noise: &[f64],
        mode: ForwardMode,
    ) -> Result<(Vec<f64>, Posterior)> {
        let post = self.posterior(x)?;
        let theta = match (&post, mode) {
            (_, ForwardMode::Deterministic) => post.mean(),
            (Posterior::Gaussian(p), ForwardMode::Stochastic) => {
                crate::distributions::gaussian_sample(p, noise)?
            }
            (Posterior::Weibull(p), ForwardMode::Stochastic) => {
                crate::distributions::weibull_sample(p, noise)?
            }
            (Posterior::Point(_), ForwardMode::Stochastic) => post.mean(),
        };
        Ok((theta, post))
    }
}

/// Head outputs on a tape, shapes `[B, d]` except the shared-scale variants
/// (`sigma2`, `k`) which stay `[B, 1]` until broadcast.
pub enum HeadOutputs {
    Gaussian { mu: Var, sigma2: Var },
    Weibull { k: Var, lam: Var },
    Deterministic { z: Var },
}

// ---- checkpoint format ----

const MAGIC: &[u8; 4] = b"CFAK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Vec<usize>,
    pub head_kind: HeadKind,
    pub latent_dim: usize,
    pub per_dim_scale: bool,
    pub strict_relu_scale: bool,
    /// "mlp" or "table".
    pub model_kind: String,
    /// Rows of the free embedding table; 0 for MLP checkpoints.
    pub table_rows: usize,
    pub seed: u64,
    /// Resolved training configuration, if the checkpoint came from `train`.
    pub train_config: Option<serde_json::Value>,
    /// Shapes of the weight tensors that follow, in order.
    pub tensor_shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f64>>,
}

impl Checkpoint {
    pub fn from_model(
        model: &EncoderModel,
        seed: u64,
        train_config: Option<serde_json::Value>,
    ) -> Self {
        let tensors: Vec<Tensor<f64>> =
            model.params().into_iter().map(|(_, t)| t.clone()).collect();
        let header = CheckpointHeader {
            arch: model.arch.clone(),
            head_kind: model.head_kind,
            latent_dim: model.latent_dim,
            per_dim_scale: model.per_dim_scale,
            strict_relu_scale: model.strict_relu_scale,
            model_kind: "mlp".into(),
            table_rows: 0,
            seed,
            train_config,
            tensor_shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
        };
        Checkpoint { header, tensors }
    }

    pub fn from_table(
        table: &Tensor<f64>,
        seed: u64,
        train_config: Option<serde_json::Value>,
    ) -> Self {
        let header = CheckpointHeader {
            arch: vec![],
            head_kind: HeadKind::Deterministic,
            latent_dim: table.shape()[1],
            per_dim_scale: false,
            strict_relu_scale: false,
            model_kind: "table".into(),
            table_rows: table.shape()[0],
            seed,
            train_config,
            tensor_shapes: vec![table.shape().to_vec()],
        };
        Checkpoint { header, tensors: vec![table.clone()] }
    }

    /// Rebuilds the encoder; errors on table checkpoints.
    pub fn to_model(&self) -> Result<EncoderModel> {
        if self.header.model_kind != "mlp" {
            return Err(Error::Contract(format!(
                "checkpoint holds a '{}' model, not an encoder",
                self.header.model_kind
            )));
        }
        // Template with the right layout, then overwritten with stored weights.
        let mut rng = Pcg32::new(0);
        let mut model = EncoderModel::init(
            &self.header.arch,
            self.header.head_kind,
            self.header.latent_dim,
            self.header.per_dim_scale,
            self.header.strict_relu_scale,
            &mut rng,
        )?;
        let params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} tensors, model wants {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for ((name, slot), stored) in params.into_iter().zip(&self.tensors) {
            if slot.shape() != stored.shape() {
                return Err(Error::Parse(format!(
                    "tensor {name}: shape {:?} vs stored {:?}",
                    slot.shape(),
                    stored.shape()
                )));
            }
            slot.data_mut().copy_from_slice(stored.data());
        }
        Ok(model)
    }

    pub fn to_table(&self) -> Result<Tensor<f64>> {
        if self.header.model_kind != "table" {
            return Err(Error::Contract("checkpoint does not hold a table model".into()));
        }
        Ok(self.tensors[0].clone())
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header =
        serde_json::to_vec(&ckpt.header).map_err(|e| Error::Parse(format!("header encode: {e}")))?;
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    for t in &ckpt.tensors {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("bad checkpoint magic".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    file.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Parse(format!("header decode: {e}")))?;

    let mut tensors = Vec::with_capacity(header.tensor_shapes.len());
    for shape in &header.tensor_shapes {
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        file.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor::from_raw(shape.clone(), data));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Parse(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    Ok(Checkpoint { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use approx::assert_abs_diff_eq;

    fn small_model(head: HeadKind, per_dim: bool) -> EncoderModel {
        let mut rng = Pcg32::new(7);
        EncoderModel::init(&[3, 8, 4], head, 2, per_dim, false, &mut rng).unwrap()
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut model = small_model(HeadKind::Deterministic, false);
        for (_, t) in model.params_mut() {
            t.data_mut().fill(0.0);
        }
        model.layers.last_mut().unwrap().b.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let h = model.encode(&[5.0, -1.0, 2.0]).unwrap();
        assert_eq!(h, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut rng = Pcg32::new(3);
        let mut model =
            EncoderModel::init(&[2, 2], HeadKind::Deterministic, 2, false, false, &mut rng)
                .unwrap();
        let layer = &mut model.layers[0];
        layer.w.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        layer.b.data_mut().fill(0.0);
        // No relu after the last (only) layer, so negatives pass through.
        assert_eq!(model.encode(&[-3.0, 4.0]).unwrap(), vec![-3.0, 4.0]);
    }

    #[test]
    fn gaussian_head_shared_scale() {
        let model = small_model(HeadKind::Gaussian, false);
        let post = model.posterior(&[0.3, -0.2, 0.9]).unwrap();
        let Posterior::Gaussian(p) = post else { panic!("wrong head") };
        assert_eq!(p.dim(), 2);
        assert_eq!(p.sigma2()[0], p.sigma2()[1]);
        assert!(p.sigma2()[0] > 0.0);
    }

    #[test]
    fn gaussian_sigma_softplus_of_zero_and_large_negative() {
        let mut model = small_model(HeadKind::Gaussian, false);
        for (name, t) in model.params_mut() {
            if name.starts_with("head.sigma") {
                t.data_mut().fill(0.0);
            }
        }
        let Posterior::Gaussian(p) = model.posterior(&[0.1, 0.2, 0.3]).unwrap() else { panic!() };
        assert_abs_diff_eq!(p.sigma2()[0], std::f64::consts::LN_2, epsilon = 1e-12);

        let mut model = small_model(HeadKind::Gaussian, false);
        for (name, t) in model.params_mut() {
            if name == "head.sigma.w" {
                t.data_mut().fill(0.0);
            }
            if name == "head.sigma.b" {
                t.data_mut().fill(-40.0);
            }
        }
        let Posterior::Gaussian(p) = model.posterior(&[0.1, 0.2, 0.3]).unwrap() else { panic!() };
        assert!(p.sigma2()[0] > 0.0 && p.sigma2()[0] < 1e-15);
    }

    #[test]
    fn gaussian_mu_is_hand_computed_affine() {
        let mut rng = Pcg32::new(5);
        let mut model =
            EncoderModel::init(&[2, 2], HeadKind::Gaussian, 2, false, false, &mut rng).unwrap();
        model.layers[0].w.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        model.layers[0].b.data_mut().fill(0.0);
        let HeadWeights::Gaussian { mu, .. } = &mut model.head else { unreachable!() };
        mu.w.data_mut().copy_from_slice(&[2.0, -1.0, 0.5, 3.0]);
        mu.b.data_mut().copy_from_slice(&[0.25, -0.5]);
        let Posterior::Gaussian(p) = model.posterior(&[1.0, 2.0]).unwrap() else { panic!() };
        // μ = xᵀW + b = [1·2 + 2·0.5 + 0.25, 1·(−1) + 2·3 − 0.5]
        assert_abs_diff_eq!(p.mu()[0], 3.25, epsilon = 1e-14);
        assert_abs_diff_eq!(p.mu()[1], 4.5, epsilon = 1e-14);
    }

    #[test]
    fn weibull_head_mean_identity() {
        // E[θ] = softplus(f_λ(h)) + ε regardless of k, by construction.
        let model = small_model(HeadKind::Weibull, false);
        let x = [0.4, 0.1, -0.3];
        let h = model.encode(&x).unwrap();
        let HeadWeights::Weibull { lam, .. } = &model.head else { unreachable!() };
        let expect: Vec<f64> =
            lam.apply_value(&h).into_iter().map(|v| special::softplus(v) + SCALE_EPS).collect();
        let Posterior::Weibull(p) = model.posterior(&x).unwrap() else { panic!() };
        let mean = weibull_mean(&p);
        for (a, b) in mean.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn weibull_lambda_at_zero_raw_k_one() {
        let mut model = small_model(HeadKind::Weibull, false);
        for (name, t) in model.params_mut() {
            if name.starts_with("head.") {
                t.data_mut().fill(0.0);
            }
        }
        for (name, t) in model.params_mut() {
            if name == "head.k.b" {
                t.data_mut().fill(special::softplus_inverse(1.0));
            }
        }
        let Posterior::Weibull(p) = model.posterior(&[0.0, 0.0, 0.0]).unwrap() else { panic!() };
        assert_abs_diff_eq!(p.k()[0], 1.0, epsilon = 1e-12);
        // λ = (ln 2 + ε)/Γ(2) = ln 2 + ε
        assert_abs_diff_eq!(p.lam()[0], std::f64::consts::LN_2 + SCALE_EPS, epsilon = 1e-12);
    }

    #[test]
    fn weibull_head_invariants_random_sweep() {
        let mut rng = Pcg32::new(88);
        for per_dim in [false, true] {
            let model = small_model(HeadKind::Weibull, per_dim);
            for _ in 0..1000 {
                let x: Vec<f64> = (0..3).map(|_| rng.uniform_range(-20.0, 20.0)).collect();
                let Posterior::Weibull(p) = model.posterior(&x).unwrap() else { panic!() };
                for (&k, &lam) in p.k().iter().zip(p.lam()) {
                    assert!((WEIBULL_K_MIN..=WEIBULL_K_MAX).contains(&k));
                    assert!(lam > 0.0 && lam.is_finite());
                }
            }
        }
    }

    #[test]
    fn deterministic_forward_is_pure() {
        let model = small_model(HeadKind::Gaussian, false);
        let x = [0.5, 0.5, 0.5];
        let (t1, _) = model.forward(&x, &[], ForwardMode::Deterministic).unwrap();
        let (t2, _) = model.forward(&x, &[], ForwardMode::Deterministic).unwrap();
        assert!(t1.iter().zip(&t2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn stochastic_forward_reproducible_with_pinned_noise() {
        let model = small_model(HeadKind::Weibull, false);
        let x = [0.5, -0.5, 0.2];
        let noise = [0.3, 0.8];
        let (t1, _) = model.forward(&x, &noise, ForwardMode::Stochastic).unwrap();
        let (t2, _) = model.forward(&x, &noise, ForwardMode::Stochastic).unwrap();
        assert_eq!(t1, t2);
        assert!(t1.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn stochastic_gaussian_spread_matches_sigma() {
        let model = small_model(HeadKind::Gaussian, false);
        let x = [1.0, 0.0, -1.0];
        let Posterior::Gaussian(p) = model.posterior(&x).unwrap() else { panic!() };
        let sigma = p.sigma2()[0].sqrt();
        let det = model.forward(&x, &[], ForwardMode::Deterministic).unwrap().0;
        let mut rng = Pcg32::new(4242);
        let n = 100_000usize;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let noise: Vec<f64> = (0..2).map(|_| rng.normal()).collect();
            let (theta, _) = model.forward(&x, &noise, ForwardMode::Stochastic).unwrap();
            sumsq += (theta[0] - det[0]).powi(2);
        }
        let emp = (sumsq / n as f64).sqrt();
        assert!((emp - sigma).abs() / sigma < 0.02, "empirical {emp} vs sigma {sigma}");
    }

    #[test]
    fn tape_and_value_routes_agree_bitwise() {
        for head in [HeadKind::Gaussian, HeadKind::Weibull, HeadKind::Deterministic] {
            let model = small_model(head, false);
            let xs = Tensor::from_rows(&[vec![0.2, -0.4, 0.6], vec![1.0, 0.5, -0.1]]).unwrap();
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let x = tape.constant(&xs);
            let h = model.encode_on(&mut tape, &vars, x).unwrap();
            let outs = model.head_on(&mut tape, &vars, h).unwrap();
            let theta =
                model.theta_on(&mut tape, &outs, None, ForwardMode::Deterministic).unwrap();
            let batch_theta = tape.value(theta).clone();
            for (i, row) in [[0.2, -0.4, 0.6], [1.0, 0.5, -0.1]].iter().enumerate() {
                let (want, _) = model.forward(row, &[], ForwardMode::Deterministic).unwrap();
                for (j, w) in want.iter().enumerate() {
                    assert_eq!(
                        batch_theta.at2(i, j).to_bits(),
                        w.to_bits(),
                        "head {head:?} row {i} dim {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn end_to_end_gradients_pass_finite_difference() {
        // Gradient through sampler, head, and MLP w.r.t. every parameter
        // tensor, one at a time by substitution.
        let mut rng = Pcg32::new(909);
        for (head, per_dim) in [
            (HeadKind::Gaussian, false),
            (HeadKind::Gaussian, true),
            (HeadKind::Weibull, false),
            (HeadKind::Weibull, true),
            (HeadKind::Deterministic, false),
        ] {
            for trial in 0..4 {
                let model = EncoderModel::init(
                    &[3, 6, 4],
                    head,
                    2,
                    per_dim,
                    false,
                    &mut Pcg32::new(100 + trial),
                )
                .unwrap();
                let xs = Tensor::from_rows(&[
                    (0..3).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                    (0..3).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                ])
                .unwrap();
                let noise_vals = match head {
                    HeadKind::Gaussian => {
                        Tensor::from_raw(vec![2, 2], (0..4).map(|_| rng.normal()).collect())
                    }
                    _ => Tensor::from_raw(
                        vec![2, 2],
                        (0..4)
                            .map(|_| (-(1.0 - rng.uniform_range(0.2, 0.8)).ln()).ln())
                            .collect(),
                    ),
                };
                let n_params = model.params().len();
                for pi in 0..n_params {
                    let point = model.params()[pi].1.clone();
                    let err = finite_diff_check(
                        |tape, x| {
                            let mut vars = Vec::with_capacity(n_params);
                            for (j, (_, t)) in model.params().into_iter().enumerate() {
                                if j == pi {
                                    vars.push(x);
                                } else {
                                    vars.push(tape.constant(t));
                                }
                            }
                            let xc = tape.constant(&xs);
                            let h = model.encode_on(tape, &vars, xc)?;
                            let outs = model.head_on(tape, &vars, h)?;
                            let nv = tape.constant(&noise_vals);
                            let theta =
                                model.theta_on(tape, &outs, Some(nv), ForwardMode::Stochastic)?;
                            let sq = tape.mul(theta, theta)?;
                            Ok(tape.sum(sq))
                        },
                        &point,
                        1e-6,
                    )
                    .unwrap();
                    assert!(
                        err < 1e-4,
                        "FD err {err:e} head {head:?} per_dim {per_dim} param {pi}"
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_bytes() {
        let model = small_model(HeadKind::Weibull, true);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = Checkpoint::from_model(&model, 99, None);
        write_checkpoint(&p1, &ckpt).unwrap();
        let back = read_checkpoint(&p1).unwrap();
        assert_eq!(back.header.seed, 99);
        let model2 = back.to_model().unwrap();
        for ((_, a), (_, b)) in model.params().iter().zip(model2.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
        write_checkpoint(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOPE00000000").unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Parse(_))));
    }
}
