//! SEPIN@k: unsupervised disentanglement via conditional mutual information.
//!
//! Per-dimension conditional MI I(x; f_i | f_{≠i}) is estimated by the chain
//! rule as the difference of two InfoNCE lower bounds, Î(x; f) − Î(x; f_{≠i}),
//! each from a seeded bilinear critic trained with Adam. InfoNCE estimates are
//! lower bounds capped at ln(batch size), so absolute values are conservative;
//! orderings across models are the comparable quantity.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::tensor::Tensor;
use crate::trainer::{adam_step, AdamState};

#[derive(Clone, Debug)]
pub struct CriticCfg {
    pub steps: usize,
    /// Training minibatch size; capped at the sample count.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CriticCfg {
    fn default() -> Self {
        CriticCfg { steps: 1500, batch_size: 256, learning_rate: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SepinResult {
    /// Conditional MI estimate per feature dimension, clamped at 0.
    pub per_dim: Vec<f64>,
    /// Standard error of each per-dimension estimate.
    pub per_dim_se: Vec<f64>,
    /// Dimensions ranked by estimate, descending; defines the top-k set.
    pub ranking: Vec<usize>,
    pub k: usize,
    /// Mean of the top-k per-dimension estimates.
    pub sepin_at_k: f64,
    /// Î(x; f) with the full feature vector, for reference.
    pub full_mi: f64,
}

/// InfoNCE loss of a score matrix: mean over anchors of `LSE(row) − s_ii`,
/// stabilized with a detached row max.
fn nce_from_scores(tape: &mut Tape<f64>, s: Var) -> Result<Var> {
    let (b, _) = tape.value(s).matrix_dims()?;
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
    let diag = tape.diag(s)?;
    let per_anchor = tape.sub(lse, diag)?;
    Ok(tape.mean(per_anchor))
}

fn gather_rows(t: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let cols = t.shape()[1];
    let mut out = Tensor::zeros(vec![idx.len(), cols]);
    for (r, &i) in idx.iter().enumerate() {
        for j in 0..cols {
            out.set2(r, j, t.at2(i, j));
        }
    }
    out
}

/// InfoNCE lower bound on I(u; v) from a trained bilinear critic
/// `s(u, v) = uᵀWv` over paired rows.
///
/// Returns the estimate `ln N − mean loss` on the full set together with the
/// standard error of the per-anchor values. Diverging critics (non-finite
/// loss) abort with a numeric error.
pub fn infonce_mi_estimate(
    u: &Tensor<f64>,
    v: &Tensor<f64>,
    cfg: &CriticCfg,
) -> Result<(f64, f64)> {
    let (n, du) = u.matrix_dims()?;
    let (nv, dv) = v.matrix_dims()?;
    if n != nv {
        return Err(Error::Shape("paired inputs must have the same row count".into()));
    }
    if n < 2 {
        return Err(Error::Contract("mi estimation needs at least 2 samples".into()));
    }
    let mut rng = Pcg32::new(cfg.seed);
    let mut w = Tensor::from_raw(
        vec![du, dv],
        (0..du * dv).map(|_| 0.01 * rng.normal()).collect(),
    );
    let mut adam = AdamState::new(&[du * dv]);
    let batch = cfg.batch_size.min(n);

    let mut pool: Vec<usize> = (0..n).collect();
    let mut cursor = pool.len();
    for step in 0..cfg.steps {
        let (bu, bv) = if batch == n {
            (u.clone(), v.clone())
        } else {
            // Epoch-style coverage: reshuffle when the pool is exhausted.
            if cursor + batch > pool.len() {
                rng.shuffle(&mut pool);
                cursor = 0;
            }
            let idx = &pool[cursor..cursor + batch];
            cursor += batch;
            (gather_rows(u, idx), gather_rows(v, idx))
        };
        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let uc = tape.constant(&bu);
        let vc = tape.constant(&bv);
        let proj = tape.matmul(uc, wv)?;
        let vt = tape.transpose(vc)?;
        let scores = tape.matmul(proj, vt)?;
        let loss = nce_from_scores(&mut tape, scores)?;
        let loss_val = tape.value(loss).data()[0];
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "critic training diverged at step {step} (loss {loss_val})"
            )));
        }
        tape.backward(loss)?;
        let grad = Tensor::from_raw(vec![du, dv], tape.grad(wv).expect("leaf").to_vec());
        let mut params = vec![("critic.w".to_string(), &mut w)];
        adam_step(&mut params, &[grad], &mut adam, cfg.learning_rate, 0.9, 0.999, 1e-8)?;
    }

    // Final full-set evaluation; per-anchor losses give the standard error.
    let proj = u.matmul(&w)?;
    let scores = proj.matmul(&v.transpose()?)?;
    let mut per_anchor = Vec::with_capacity(n);
    for i in 0..n {
        let row = scores.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        per_anchor.push(lse - scores.at2(i, i));
    }
    let mean_loss = per_anchor.iter().sum::<f64>() / n as f64;
    let var = per_anchor.iter().map(|l| (l - mean_loss) * (l - mean_loss)).sum::<f64>()
        / n as f64;
    let estimate = (n as f64).ln() - mean_loss;
    if !estimate.is_finite() {
        return Err(Error::Numeric("critic evaluation produced a non-finite estimate".into()));
    }
    Ok((estimate, (var / n as f64).sqrt()))
}

fn drop_column(t: &Tensor<f64>, col: usize) -> Tensor<f64> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(vec![n, d - 1]);
    for i in 0..n {
        let mut jj = 0;
        for j in 0..d {
            if j == col {
                continue;
            }
            out.set2(i, jj, t.at2(i, j));
            jj += 1;
        }
    }
    out
}

/// SEPIN@k over feature columns: per-dimension conditional MI via the
/// chain-rule difference of InfoNCE bounds, negative estimates clamped to 0,
/// dimensions ranked descending, and the top-k mean reported.
pub fn sepin_at_k(
    features: &Tensor<f64>,
    raw_inputs: &Tensor<f64>,
    k: usize,
    cfg: &CriticCfg,
) -> Result<SepinResult> {
    let (n, d) = features.matrix_dims()?;
    let (nr, _) = raw_inputs.matrix_dims()?;
    if n != nr {
        return Err(Error::Shape("features and raw inputs must pair up row-wise".into()));
    }
    if k == 0 || k > d {
        return Err(Error::Contract(format!("k = {k} outside [1, {d}]")));
    }
    if d < 2 {
        return Err(Error::Contract("sepin needs at least 2 feature dimensions".into()));
    }

    let full_cfg = CriticCfg { seed: cfg.seed, ..cfg.clone() };
    let (full_mi, full_se) = infonce_mi_estimate(raw_inputs, features, &full_cfg)?;

    let mut per_dim = Vec::with_capacity(d);
    let mut per_dim_se = Vec::with_capacity(d);
    for i in 0..d {
        let rest = drop_column(features, i);
        let rest_cfg = CriticCfg { seed: cfg.seed.wrapping_add(1 + i as u64), ..cfg.clone() };
        let (rest_mi, rest_se) = infonce_mi_estimate(raw_inputs, &rest, &rest_cfg)?;
        per_dim.push((full_mi - rest_mi).max(0.0));
        per_dim_se.push((full_se * full_se + rest_se * rest_se).sqrt());
    }

    let mut ranking: Vec<usize> = (0..d).collect();
    ranking.sort_by(|&a, &b| {
        per_dim[b].partial_cmp(&per_dim[a]).expect("finite estimates").then(a.cmp(&b))
    });
    let sepin = ranking[..k].iter().map(|&i| per_dim[i]).sum::<f64>() / k as f64;
    Ok(SepinResult { per_dim, per_dim_se, ranking, k, sepin_at_k: sepin, full_mi })
}
