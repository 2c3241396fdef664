//! Finite augmentation worlds and their exact co-occurrence spectra.
//!
//! A world enumerates natural samples, an augmentation kernel, and the
//! augmented-sample features, which makes the co-occurrence matrix
//! `A[x, x'] = E_x̄[𝒜(x|x̄)·𝒜(x'|x̄)]` and its symmetric normalization Ā exactly
//! computable. The truncated eigendecomposition of Ā is the Eckart–Young
//! optimum of `‖Ā − FFᵀ‖²`, which is what grounds every equivalence test in
//! this crate.

mod jacobi;
pub mod worldfile;

pub use jacobi::jacobi_eigh;

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Finite natural-sample set with an augmentation kernel.
#[derive(Clone, Debug)]
pub struct AugmentationWorld<S = f64> {
    /// 𝒫(x̄), one probability per natural sample; sums to 1.
    pub natural_probs: Vec<S>,
    /// Row-stochastic kernel 𝒜(x|x̄), `[n_natural, n_aug]`.
    pub kernel: Tensor<S>,
    /// Feature vectors of the augmented samples, `[n_aug, feature_dim]`.
    pub features: Tensor<S>,
    /// Class label per augmented sample.
    pub labels: Vec<usize>,
}

impl<S: Scalar> AugmentationWorld<S> {
    pub fn new(
        natural_probs: Vec<S>,
        kernel: Tensor<S>,
        features: Tensor<S>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let world = Self { natural_probs, kernel, features, labels };
        world.validate()?;
        Ok(world)
    }

    pub fn n_natural(&self) -> usize {
        self.natural_probs.len()
    }

    pub fn n_aug(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let tol = c::<S>(1e-9);
        let (kn, ka) = self.kernel.matrix_dims()?;
        if kn != self.natural_probs.len() {
            return Err(Error::Contract("kernel rows must match natural count".into()));
        }
        let (fa, _) = self.features.matrix_dims()?;
        if fa != ka || self.labels.len() != ka {
            return Err(Error::Contract("feature rows and labels must match augmented count".into()));
        }
        if self.natural_probs.iter().any(|&p| p < S::zero()) {
            return Err(Error::Contract("natural probabilities must be non-negative".into()));
        }
        let total: S = self.natural_probs.iter().copied().sum();
        if (total - S::one()).abs() > tol {
            return Err(Error::Contract(format!("natural probabilities sum to {total}, not 1")));
        }
        for row in 0..kn {
            let r = self.kernel.row(row);
            if r.iter().any(|&p| p < S::zero()) {
                return Err(Error::Contract(format!("kernel row {row} has a negative entry")));
            }
            let sum: S = r.iter().copied().sum();
            if (sum - S::one()).abs() > tol {
                return Err(Error::Contract(format!("kernel row {row} sums to {sum}, not 1")));
            }
        }
        Ok(())
    }
}

/// Co-occurrence matrix `A`, its normalization `Ā = D^{-1/2} A D^{-1/2}`, and
/// the marginals `d_marg = 𝒫(x)`.
#[derive(Clone, Debug)]
pub struct CoMatrix<S = f64> {
    pub a: Tensor<S>,
    pub abar: Tensor<S>,
    pub d_marg: Vec<S>,
    /// Augmented samples with zero marginal; excluded from loss sampling by
    /// construction (they are never drawn) and produce zero rows in `abar`.
    pub zero_marginals: Vec<usize>,
}

/// Exact expectation `A[x, x'] = Σ_x̄ 𝒫(x̄)·𝒜(x|x̄)·𝒜(x'|x̄)` plus the
/// symmetric normalization.
///
/// The marginal identity (row sums equal column sums equal 𝒫(x)) holds
/// analytically; it is asserted here rather than choosing one side.
pub fn build_cooccurrence<S: Scalar>(world: &AugmentationWorld<S>) -> Result<CoMatrix<S>> {
    world.validate()?;
    let n_nat = world.n_natural();
    let n_aug = world.n_aug();

    // A = Kᵀ diag(p) K, assembled as a weighted sum of row outer products.
    let mut a = vec![S::zero(); n_aug * n_aug];
    for b in 0..n_nat {
        let p = world.natural_probs[b];
        if p == S::zero() {
            continue;
        }
        let row = world.kernel.row(b);
        for x in 0..n_aug {
            let w = p * row[x];
            if w == S::zero() {
                continue;
            }
            for xp in 0..n_aug {
                a[x * n_aug + xp] = a[x * n_aug + xp] + w * row[xp];
            }
        }
    }
    let a = Tensor::from_raw(vec![n_aug, n_aug], a);

    let tol = c::<S>(1e-12);
    let mut d_marg = vec![S::zero(); n_aug];
    let mut grand = S::zero();
    for x in 0..n_aug {
        let row_sum: S = a.row(x).iter().copied().sum();
        let col_sum: S = (0..n_aug).map(|i| a.at2(i, x)).sum();
        if (row_sum - col_sum).abs() > tol {
            return Err(Error::Numeric(format!(
                "marginal identity violated at sample {x}: row {row_sum} vs col {col_sum}"
            )));
        }
        d_marg[x] = row_sum;
        grand = grand + row_sum;
    }
    if (grand - S::one()).abs() > tol {
        return Err(Error::Numeric(format!("co-occurrence grand sum is {grand}, not 1")));
    }

    let zero_marginals: Vec<usize> =
        (0..n_aug).filter(|&x| d_marg[x] == S::zero()).collect();
    if !zero_marginals.is_empty() {
        log::warn!(
            "{} augmented sample(s) have zero marginal and are excluded from loss sampling: {:?}",
            zero_marginals.len(),
            zero_marginals
        );
    }

    let inv_sqrt: Vec<S> = d_marg
        .iter()
        .map(|&d| if d > S::zero() { d.sqrt().recip() } else { S::zero() })
        .collect();
    let mut abar = vec![S::zero(); n_aug * n_aug];
    for x in 0..n_aug {
        for xp in 0..n_aug {
            abar[x * n_aug + xp] = inv_sqrt[x] * a.at2(x, xp) * inv_sqrt[xp];
        }
    }
    let abar = Tensor::from_raw(vec![n_aug, n_aug], abar);

    Ok(CoMatrix { a, abar, d_marg, zero_marginals })
}

/// Eckart–Young optimal rank-`d` factor of Ā: `F = V_d · diag(√max(w_d, 0))`.
///
/// Negative eigenvalues are clamped to zero: `FFᵀ` is positive semi-definite,
/// so the optimum cannot represent them and drops their full mass into the
/// residual.
pub fn spectral_embedding<S: Scalar>(cm: &CoMatrix<S>, d: usize) -> Result<Tensor<S>> {
    let n = cm.d_marg.len();
    if d == 0 || d > n {
        return Err(Error::Contract(format!("embedding rank {d} outside [1, {n}]")));
    }
    let (w, v) = jacobi_eigh(&cm.abar)?;
    let mut f = vec![S::zero(); n * d];
    for j in 0..d {
        let scale = w[j].max(S::zero()).sqrt();
        for i in 0..n {
            f[i * d + j] = v.at2(i, j) * scale;
        }
    }
    Ok(Tensor::from_raw(vec![n, d], f))
}

/// `‖Ā − FFᵀ‖²_F`.
pub fn mf_residual<S: Scalar>(cm: &CoMatrix<S>, f: &Tensor<S>) -> Result<S> {
    let n = cm.d_marg.len();
    let (fn_, _) = f.matrix_dims()?;
    if fn_ != n {
        return Err(Error::Shape(format!("embedding has {fn_} rows, world has {n}")));
    }
    let ft = f.transpose()?;
    let gram = f.matmul(&ft)?;
    let mut total = S::zero();
    for i in 0..n * n {
        let diff = cm.abar.data()[i] - gram.data()[i];
        total = total + diff * diff;
    }
    Ok(total)
}
