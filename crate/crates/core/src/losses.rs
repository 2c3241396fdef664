//! The four objectives: InfoNCE, spectral contrastive, CFA, CNFA.
//!
//! Batch losses pair each anchor with its own positive and use the other
//! anchors' positives as the M = B−1 negatives. The population spectral loss
//! over an enumerated world differs from the matrix-factorization residual
//! `‖Ā − FFᵀ‖²` by exactly `‖Ā‖²_F` when `F[x,:] = √P(x)·f(x)`; that identity
//! is the module's flagship test and acceptance gate.
//!
//! The inner-product form used everywhere is
//! `−2·E[θᵀθ₊] + E[(θᵀθ₋)²]` — anchor–positive cross term, anchor–negative
//! cross term. Embeddings are not normalized for the spectral losses; InfoNCE
//! L2-normalizes rows first (its similarities are cosines).

use crate::augraph::CoMatrix;
use crate::autodiff::{Tape, Var};
use crate::distributions::{
    tape_gaussian_kl, tape_weibull_gamma_kl, UNIFORM_EPS,
};
use crate::encoder::{EncoderModel, ForwardMode, HeadOutputs};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minibatch of positive pairs; `x[i]` and `x_pos[i]` are augmentations of the
/// natural sample `natural_ids[i]`.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub x: Tensor<f64>,
    pub x_pos: Tensor<f64>,
    pub natural_ids: Vec<usize>,
}

impl PairBatch {
    pub fn batch_size(&self) -> usize {
        self.natural_ids.len()
    }
}

/// Scalar loss with its decomposition; `total = recon_term + β·kl_term` for
/// the variational losses, `kl_term = 0` for the deterministic ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub recon_term: f64,
    pub kl_term: f64,
}

/// Loss nodes still on the tape, for callers that need the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

impl LossParts {
    pub fn value(&self, tape: &Tape<f64>) -> LossValue {
        LossValue {
            total: tape.value(self.total).data()[0],
            recon_term: tape.value(self.recon).data()[0],
            kl_term: tape.value(self.kl).data()[0],
        }
    }
}

/// Per-sample noise for the variational losses: one `(anchor, positive)` pair
/// of `[B, d]` tensors per Monte-Carlo sample. Standard normals for the
/// Gaussian head, Uniform(0,1) draws for the Weibull head.
pub type PairNoise = Vec<(Tensor<f64>, Tensor<f64>)>;

// ---- core batch objectives ----

fn l2_normalize_rows(tape: &mut Tape<f64>, z: Var) -> Result<Var> {
    let sq = tape.mul(z, z)?;
    let rs = tape.row_sum(sq)?;
    if tape.value(rs).data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain("info_nce requires L2-normalizable (non-zero) rows".into()));
    }
    let norm = tape.sqrt(rs)?;
    tape.div_colvec(z, norm)
}

/// InfoNCE over a batch: rows are L2-normalized, every anchor scores against
/// its positive and the other B−1 positives as negatives.
pub fn info_nce_on(tape: &mut Tape<f64>, z: Var, z_pos: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Contract("temperature must be positive".into()));
    }
    let (b, _) = tape.value(z).matrix_dims()?;
    if tape.value(z_pos).matrix_dims()? != tape.value(z).matrix_dims()? {
        return Err(Error::Shape("z and z_pos must have equal shapes".into()));
    }
    if b < 2 {
        return Err(Error::Contract("info_nce needs at least 2 pairs for negatives".into()));
    }
    let zn = l2_normalize_rows(tape, z)?;
    let zpn = l2_normalize_rows(tape, z_pos)?;
    let zpt = tape.transpose(zpn)?;
    let sims = tape.matmul(zn, zpt)?;
    let s = tape.scale(sims, 1.0 / tau);

    // Log-sum-exp per row, stabilized with a detached row max (exact for both
    // value and gradient since LSE(x) = m + LSE(x − m) for any constant m).
    let s_val = tape.value(s).clone();
    let maxes: Vec<f64> = (0..b)
        .map(|i| s_val.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mx = tape.constant(&Tensor::from_raw(vec![b, 1], maxes));
    let shifted = tape.sub_colvec(s, mx)?;
    let e = tape.exp(shifted);
    let rs = tape.row_sum(e)?;
    let ln_rs = tape.ln(rs)?;
    let lse = tape.add(ln_rs, mx)?;
    let pos = tape.diag(s)?;
    let per_anchor = tape.sub(lse, pos)?;
    Ok(tape.mean(per_anchor))
}

/// Spectral contrastive loss over a batch:
/// `−2/B Σ_i θ_iᵀθ₊_i + 1/(B(B−1)) Σ_{i≠j} (θ_iᵀθ₊_j)²`.
pub fn spectral_loss_on(tape: &mut Tape<f64>, z: Var, z_pos: Var) -> Result<Var> {
    let (b, _) = tape.value(z).matrix_dims()?;
    if tape.value(z_pos).matrix_dims()? != tape.value(z).matrix_dims()? {
        return Err(Error::Shape("z and z_pos must have equal shapes".into()));
    }
    if b < 2 {
        return Err(Error::Contract("spectral loss needs at least 2 pairs for negatives".into()));
    }
    let zpt = tape.transpose(z_pos)?;
    let gram = tape.matmul(z, zpt)?;
    let diag = tape.diag(gram)?;
    let pos_sum = tape.sum(diag);
    let pos_term = tape.scale(pos_sum, -2.0 / b as f64);

    let g2 = tape.mul(gram, gram)?;
    let all_sq = tape.sum(g2);
    let d2 = tape.mul(diag, diag)?;
    let diag_sq = tape.sum(d2);
    let neg_diag = tape.neg(diag_sq);
    let off_sq = tape.add(all_sq, neg_diag)?;
    let neg_term = tape.scale(off_sq, 1.0 / (b * (b - 1)) as f64);
    tape.add(pos_term, neg_term)
}

/// Value-level convenience wrappers over scratch tapes.
pub fn info_nce(z: &Tensor<f64>, z_pos: &Tensor<f64>, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z);
    let b = tape.constant(z_pos);
    let loss = info_nce_on(&mut tape, a, b, tau)?;
    Ok(tape.value(loss).data()[0])
}

pub fn spectral_loss(z: &Tensor<f64>, z_pos: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z);
    let b = tape.constant(z_pos);
    let loss = spectral_loss_on(&mut tape, a, b)?;
    Ok(tape.value(loss).data()[0])
}

// ---- population (full-world) objective ----

/// Exact population spectral loss over an enumerated world:
/// `−2 Σ_{x,x'} A[x,x']·f_xᵀf_{x'} + Σ_{x,x'} P(x)P(x')·(f_xᵀf_{x'})²`
/// with `feats[x, :] = f(x)`.
pub fn population_spectral_loss(cm: &CoMatrix<f64>, feats: &Tensor<f64>) -> Result<f64> {
    let n = cm.d_marg.len();
    let (rows, _) = feats.matrix_dims()?;
    if rows != n {
        return Err(Error::Shape(format!("feats has {rows} rows, world has {n}")));
    }
    let gram = feats.matmul(&feats.transpose()?)?;
    let mut t1 = 0.0;
    let mut t2 = 0.0;
    for x in 0..n {
        for xp in 0..n {
            let g = gram.at2(x, xp);
            t1 += cm.a.at2(x, xp) * g;
            t2 += cm.d_marg[x] * cm.d_marg[xp] * g * g;
        }
    }
    Ok(-2.0 * t1 + t2)
}

/// The same objective as a tape expression over a trainable embedding table
/// (`emb[x, :] = f(x)`), for full-batch training.
pub fn population_spectral_loss_on(
    tape: &mut Tape<f64>,
    emb: Var,
    cm: &CoMatrix<f64>,
) -> Result<Var> {
    let n = cm.d_marg.len();
    let (rows, _) = tape.value(emb).matrix_dims()?;
    if rows != n {
        return Err(Error::Shape(format!("embedding has {rows} rows, world has {n}")));
    }
    let et = tape.transpose(emb)?;
    let gram = tape.matmul(emb, et)?;
    let a_const = tape.constant(&cm.a);
    let ag = tape.mul(a_const, gram)?;
    let t1 = tape.sum(ag);
    let mut ppt = Tensor::zeros(vec![n, n]);
    for x in 0..n {
        for xp in 0..n {
            ppt.set2(x, xp, cm.d_marg[x] * cm.d_marg[xp]);
        }
    }
    let ppt_const = tape.constant(&ppt);
    let g2 = tape.mul(gram, gram)?;
    let pg = tape.mul(ppt_const, g2)?;
    let t2 = tape.sum(pg);
    let t1s = tape.scale(t1, -2.0);
    tape.add(t1s, t2)
}

// ---- variational losses ----

struct EncodedPair {
    outs: HeadOutputs,
    outs_pos: HeadOutputs,
}

fn encode_pair(
    tape: &mut Tape<f64>,
    model: &EncoderModel,
    vars: &[Var],
    batch: &PairBatch,
) -> Result<EncodedPair> {
    let x = tape.constant(&batch.x);
    let xp = tape.constant(&batch.x_pos);
    let h = model.encode_on(tape, vars, x)?;
    let hp = model.encode_on(tape, vars, xp)?;
    let outs = model.head_on(tape, vars, h)?;
    let outs_pos = model.head_on(tape, vars, hp)?;
    Ok(EncodedPair { outs, outs_pos })
}

/// Expands a `[B, 1]` shared-scale head output to `[B, d]`; identity when the
/// head is already per-dimension.
fn expand_scale(tape: &mut Tape<f64>, v: Var, d: usize) -> Result<Var> {
    if tape.value(v).shape() == [tape.value(v).shape()[0], 1] && d != 1 {
        tape.broadcast_col(v, d)
    } else {
        Ok(v)
    }
}

/// Converts Uniform(0,1) noise into the `ln(−ln(1−ε))` constants the Weibull
/// reparameterization consumes, with the sampler's clamp applied.
fn weibull_noise_const(tape: &mut Tape<f64>, eps: &Tensor<f64>) -> Result<Var> {
    if eps.data().iter().any(|&e| !(0.0..=1.0).contains(&e)) {
        return Err(Error::Domain("weibull noise must lie in [0, 1]".into()));
    }
    let data: Vec<f64> = eps
        .data()
        .iter()
        .map(|&e| {
            let e = e.max(UNIFORM_EPS).min(1.0 - UNIFORM_EPS);
            (-(1.0 - e).ln()).ln()
        })
        .collect();
    Ok(tape.constant(&Tensor::from_raw(eps.shape().to_vec(), data)))
}

/// CFA objective: spectral reconstruction on reparameterized Gaussian samples
/// plus β times the mean KL(q ‖ N(0, I)) over all 2B encoded samples.
///
/// In deterministic mode the total collapses to the spectral loss of the
/// posterior means (the σ → 0 reduction) and `kl` is reported as 0.
pub fn cfa_loss_on(
    tape: &mut Tape<f64>,
    model: &EncoderModel,
    vars: &[Var],
    batch: &PairBatch,
    beta: f64,
    noise: &PairNoise,
    deterministic: bool,
) -> Result<LossParts> {
    if beta < 0.0 {
        return Err(Error::Contract("beta must be non-negative".into()));
    }
    if model.head_kind != crate::encoder::HeadKind::Gaussian {
        return Err(Error::Contract("cfa_loss needs a gaussian head".into()));
    }
    let b = batch.batch_size();
    let d = model.latent_dim;
    let pair = encode_pair(tape, model, vars, batch)?;

    let recon = if deterministic {
        let theta = model.theta_on(tape, &pair.outs, None, ForwardMode::Deterministic)?;
        let theta_p = model.theta_on(tape, &pair.outs_pos, None, ForwardMode::Deterministic)?;
        spectral_loss_on(tape, theta, theta_p)?
    } else {
        if noise.is_empty() {
            return Err(Error::Contract("stochastic cfa_loss needs at least one noise draw".into()));
        }
        let mut acc: Option<Var> = None;
        for (eps, eps_pos) in noise {
            let ea = tape.constant(eps);
            let ep = tape.constant(eps_pos);
            let theta = model.theta_on(tape, &pair.outs, Some(ea), ForwardMode::Stochastic)?;
            let theta_p =
                model.theta_on(tape, &pair.outs_pos, Some(ep), ForwardMode::Stochastic)?;
            let l = spectral_loss_on(tape, theta, theta_p)?;
            acc = Some(match acc {
                None => l,
                Some(prev) => tape.add(prev, l)?,
            });
        }
        tape.scale(acc.expect("non-empty noise"), 1.0 / noise.len() as f64)
    };

    let kl = if deterministic {
        tape.scalar_const(0.0)
    } else {
        let zeros = tape.constant(&Tensor::zeros(vec![b, d]));
        let ones = tape.constant(&Tensor::ones(vec![b, d]));
        let mut kl_sum: Option<Var> = None;
        for outs in [&pair.outs, &pair.outs_pos] {
            let HeadOutputs::Gaussian { mu, sigma2 } = outs else { unreachable!() };
            let s2 = expand_scale(tape, *sigma2, d)?;
            let kl_part = tape_gaussian_kl(tape, *mu, s2, zeros, ones)?;
            kl_sum = Some(match kl_sum {
                None => kl_part,
                Some(prev) => tape.add(prev, kl_part)?,
            });
        }
        tape.scale(kl_sum.expect("two sides"), 1.0 / (2 * b) as f64)
    };

    let total = if deterministic {
        recon
    } else {
        let weighted = tape.scale(kl, beta);
        tape.add(recon, weighted)?
    };
    Ok(LossParts { total, recon, kl })
}

/// CNFA objective: spectral reconstruction on reparameterized Weibull samples
/// (all θ > 0) plus β times the mean KL(q ‖ Gamma(1, 1)).
///
/// In deterministic mode the total collapses to the spectral loss of the
/// posterior means (the k → ∞ reduction) and `kl` is reported as 0.
pub fn cnfa_loss_on(
    tape: &mut Tape<f64>,
    model: &EncoderModel,
    vars: &[Var],
    batch: &PairBatch,
    beta: f64,
    noise: &PairNoise,
    deterministic: bool,
) -> Result<LossParts> {
    if beta < 0.0 {
        return Err(Error::Contract("beta must be non-negative".into()));
    }
    if model.head_kind != crate::encoder::HeadKind::Weibull {
        return Err(Error::Contract("cnfa_loss needs a weibull head".into()));
    }
    let b = batch.batch_size();
    let d = model.latent_dim;
    let pair = encode_pair(tape, model, vars, batch)?;

    let recon = if deterministic {
        let theta = model.theta_on(tape, &pair.outs, None, ForwardMode::Deterministic)?;
        let theta_p = model.theta_on(tape, &pair.outs_pos, None, ForwardMode::Deterministic)?;
        spectral_loss_on(tape, theta, theta_p)?
    } else {
        if noise.is_empty() {
            return Err(Error::Contract("stochastic cnfa_loss needs at least one noise draw".into()));
        }
        let mut acc: Option<Var> = None;
        for (eps, eps_pos) in noise {
            let ea = weibull_noise_const(tape, eps)?;
            let ep = weibull_noise_const(tape, eps_pos)?;
            let theta = model.theta_on(tape, &pair.outs, Some(ea), ForwardMode::Stochastic)?;
            let theta_p =
                model.theta_on(tape, &pair.outs_pos, Some(ep), ForwardMode::Stochastic)?;
            let l = spectral_loss_on(tape, theta, theta_p)?;
            acc = Some(match acc {
                None => l,
                Some(prev) => tape.add(prev, l)?,
            });
        }
        tape.scale(acc.expect("non-empty noise"), 1.0 / noise.len() as f64)
    };

    let kl = if deterministic {
        tape.scalar_const(0.0)
    } else {
        let ones_a = tape.constant(&Tensor::ones(vec![b, d]));
        let ones_b = tape.constant(&Tensor::ones(vec![b, d]));
        let mut kl_sum: Option<Var> = None;
        for outs in [&pair.outs, &pair.outs_pos] {
            let HeadOutputs::Weibull { k, lam } = outs else { unreachable!() };
            let k_e = expand_scale(tape, *k, d)?;
            let kl_part = tape_weibull_gamma_kl(tape, k_e, *lam, ones_a, ones_b)?;
            kl_sum = Some(match kl_sum {
                None => kl_part,
                Some(prev) => tape.add(prev, kl_part)?,
            });
        }
        tape.scale(kl_sum.expect("two sides"), 1.0 / (2 * b) as f64)
    };

    let total = if deterministic {
        recon
    } else {
        let weighted = tape.scale(kl, beta);
        tape.add(recon, weighted)?
    };
    Ok(LossParts { total, recon, kl })
}
