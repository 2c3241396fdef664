//! Reparameterizable Gaussian, Weibull, and Gamma distributions.
//!
//! Every closed form exists twice: once as a plain value function over
//! parameter vectors (used by evaluation and by the Monte-Carlo oracles in the
//! tests) and once as a tape composite built from autodiff primitives (used by
//! the variational losses). The two routes are cross-checked in the tests.
//!
//! Note the Gaussian KL here carries the −1/2 constant; the closed form is the
//! correct one (KL between identical Gaussians is zero), which the Monte-Carlo
//! oracle in the test suite confirms. Gamma is parameterized by shape α and
//! rate β.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::special;

pub use crate::special::EULER_MASCHERONI;

/// Clamp range for the Weibull shape parameter; outside it the quantile
/// transform and Γ(1 + 1/k) lose precision.
pub const WEIBULL_K_MIN: f64 = 0.05;
pub const WEIBULL_K_MAX: f64 = 75.0;

/// Uniform draws are clamped into [ε, 1−ε] before the Weibull quantile
/// transform to avoid ±∞.
pub const UNIFORM_EPS: f64 = 1e-7;

/// Diagonal Gaussian N(μ, diag σ²).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<S = f64> {
    mu: Vec<S>,
    sigma2: Vec<S>,
}

impl<S: Scalar> GaussianParams<S> {
    pub fn new(mu: Vec<S>, sigma2: Vec<S>) -> Result<Self> {
        if mu.len() != sigma2.len() {
            return Err(Error::Shape(format!("mu dim {} vs sigma2 dim {}", mu.len(), sigma2.len())));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("gaussian mu must be finite".into()));
        }
        if sigma2.iter().any(|&v| !(v > S::zero()) || !v.is_finite()) {
            return Err(Error::Domain("gaussian sigma2 must be strictly positive".into()));
        }
        Ok(Self { mu, sigma2 })
    }

    /// Standard normal prior N(0, I) in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self { mu: vec![S::zero(); d], sigma2: vec![S::one(); d] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[S] {
        &self.mu
    }

    pub fn sigma2(&self) -> &[S] {
        &self.sigma2
    }
}

/// Weibull(k, λ) with shape clamped into [`WEIBULL_K_MIN`, `WEIBULL_K_MAX`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeibullParams<S = f64> {
    k: Vec<S>,
    lam: Vec<S>,
}

impl<S: Scalar> WeibullParams<S> {
    pub fn new(k: Vec<S>, lam: Vec<S>) -> Result<Self> {
        if k.len() != lam.len() {
            return Err(Error::Shape(format!("k dim {} vs lam dim {}", k.len(), lam.len())));
        }
        if k.iter().any(|v| !v.is_finite() || *v <= S::zero()) {
            return Err(Error::Domain("weibull k must be finite and positive".into()));
        }
        if lam.iter().any(|&v| !(v > S::zero()) || !v.is_finite()) {
            return Err(Error::Domain("weibull lambda must be strictly positive".into()));
        }
        let lo = c::<S>(WEIBULL_K_MIN);
        let hi = c::<S>(WEIBULL_K_MAX);
        let k = k.into_iter().map(|v| v.max(lo).min(hi)).collect();
        Ok(Self { k, lam })
    }

    pub fn dim(&self) -> usize {
        self.k.len()
    }

    pub fn k(&self) -> &[S] {
        &self.k
    }

    pub fn lam(&self) -> &[S] {
        &self.lam
    }
}

/// Gamma(shape α, rate β).
#[derive(Clone, Debug, PartialEq)]
pub struct GammaParams<S = f64> {
    alpha: Vec<S>,
    beta: Vec<S>,
}

impl<S: Scalar> GammaParams<S> {
    pub fn new(alpha: Vec<S>, beta: Vec<S>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::Shape(format!(
                "alpha dim {} vs beta dim {}",
                alpha.len(),
                beta.len()
            )));
        }
        if alpha.iter().chain(beta.iter()).any(|&v| !(v > S::zero()) || !v.is_finite()) {
            return Err(Error::Domain("gamma parameters must be strictly positive".into()));
        }
        Ok(Self { alpha, beta })
    }

    /// Gamma(1, 1) prior in `d` dimensions, the CNFA default.
    pub fn unit(d: usize) -> Self {
        Self { alpha: vec![S::one(); d], beta: vec![S::one(); d] }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[S] {
        &self.alpha
    }

    pub fn beta(&self) -> &[S] {
        &self.beta
    }
}

// ---- sampling ----

/// θ = μ + ε·σ for standard-normal ε.
pub fn gaussian_sample<S: Scalar>(p: &GaussianParams<S>, eps: &[S]) -> Result<Vec<S>> {
    if eps.len() != p.dim() {
        return Err(Error::Shape(format!("eps dim {} vs params dim {}", eps.len(), p.dim())));
    }
    Ok(p.mu
        .iter()
        .zip(&p.sigma2)
        .zip(eps)
        .map(|((&m, &s2), &e)| m + e * s2.sqrt())
        .collect())
}

/// θ = λ·(−ln(1−ε))^{1/k} for ε ~ Uniform(0,1); ε is clamped into
/// [`UNIFORM_EPS`, 1−`UNIFORM_EPS`] first.
pub fn weibull_sample<S: Scalar>(p: &WeibullParams<S>, eps: &[S]) -> Result<Vec<S>> {
    if eps.len() != p.dim() {
        return Err(Error::Shape(format!("eps dim {} vs params dim {}", eps.len(), p.dim())));
    }
    if eps.iter().any(|&e| e < S::zero() || e > S::one() || !e.is_finite()) {
        return Err(Error::Domain("weibull sampler noise must lie in [0, 1]".into()));
    }
    let lo = c::<S>(UNIFORM_EPS);
    let hi = S::one() - lo;
    Ok(p.k
        .iter()
        .zip(&p.lam)
        .zip(eps)
        .map(|((&k, &lam), &e)| {
            let e = e.max(lo).min(hi);
            lam * (-(S::one() - e).ln()).powf(k.recip())
        })
        .collect())
}

/// Γ(1 + 1/k) evaluated exactly like the tape composite (recip, add, lgamma,
/// exp), so value and tape routes agree bit for bit.
#[inline]
pub fn gamma_one_plus_inv<S: Scalar>(k: S) -> S {
    special::lgamma(S::one() + k.recip()).exp()
}

/// E[θ] = λ·Γ(1 + 1/k) per element.
pub fn weibull_mean<S: Scalar>(p: &WeibullParams<S>) -> Vec<S> {
    p.k.iter().zip(&p.lam).map(|(&k, &lam)| lam * gamma_one_plus_inv(k)).collect()
}

// ---- KL divergences ----

/// KL(N(μ₁,σ₁²) ‖ N(μ₂,σ₂²)) summed over dimensions.
pub fn gaussian_kl<S: Scalar>(q: &GaussianParams<S>, p: &GaussianParams<S>) -> Result<S> {
    if q.dim() != p.dim() {
        return Err(Error::Shape(format!("kl dims {} vs {}", q.dim(), p.dim())));
    }
    let half = c::<S>(0.5);
    let mut total = S::zero();
    for m in 0..q.dim() {
        let (m1, s1) = (q.mu[m], q.sigma2[m]);
        let (m2, s2) = (p.mu[m], p.sigma2[m]);
        let dm = m1 - m2;
        total = total + half * (s2.ln() - s1.ln()) + (s1 + dm * dm) / (s2 + s2) - half;
    }
    Ok(total)
}

/// KL(Weibull(k,λ) ‖ Gamma(α,β)) summed over dimensions:
/// γα/k − α ln λ + ln k + βλΓ(1+1/k) − γ − 1 − α ln β + ln Γ(α).
pub fn weibull_gamma_kl<S: Scalar>(q: &WeibullParams<S>, p: &GammaParams<S>) -> Result<S> {
    if q.dim() != p.dim() {
        return Err(Error::Shape(format!("kl dims {} vs {}", q.dim(), p.dim())));
    }
    let euler = c::<S>(EULER_MASCHERONI);
    let mut total = S::zero();
    for m in 0..q.dim() {
        let (k, lam) = (q.k[m], q.lam[m]);
        let (alpha, beta) = (p.alpha[m], p.beta[m]);
        total = total + euler * alpha / k - alpha * lam.ln() + k.ln()
            + beta * lam * gamma_one_plus_inv(k)
            - euler
            - S::one()
            - alpha * beta.ln()
            + special::lgamma(alpha);
    }
    Ok(total)
}

// ---- entropies ----

/// H = Σ ln(σ √(2πe)).
pub fn gaussian_entropy<S: Scalar>(p: &GaussianParams<S>) -> S {
    let half = c::<S>(0.5);
    let ln_two_pi_e = c::<S>((2.0 * std::f64::consts::PI * std::f64::consts::E).ln());
    p.sigma2.iter().map(|&s2| half * s2.ln() + half * ln_two_pi_e).sum()
}

/// H = Σ (k−1)γ/k + ln(λ/k) + 1.
pub fn weibull_entropy<S: Scalar>(p: &WeibullParams<S>) -> S {
    let euler = c::<S>(EULER_MASCHERONI);
    p.k.iter()
        .zip(&p.lam)
        .map(|(&k, &lam)| (k - S::one()) * euler / k + (lam / k).ln() + S::one())
        .sum()
}

// ---- log densities (Monte-Carlo oracle support) ----

/// Σ ln N(θ_m; μ_m, σ²_m).
pub fn gaussian_logpdf<S: Scalar>(theta: &[S], p: &GaussianParams<S>) -> Result<S> {
    if theta.len() != p.dim() {
        return Err(Error::Shape("theta dim mismatch".into()));
    }
    let half = c::<S>(0.5);
    let ln_two_pi = c::<S>((2.0 * std::f64::consts::PI).ln());
    let mut total = S::zero();
    for m in 0..theta.len() {
        let d = theta[m] - p.mu[m];
        total = total - half * (ln_two_pi + p.sigma2[m].ln()) - d * d / (p.sigma2[m] + p.sigma2[m]);
    }
    Ok(total)
}

/// Σ ln Weibull(θ_m; k_m, λ_m); requires θ > 0.
pub fn weibull_logpdf<S: Scalar>(theta: &[S], p: &WeibullParams<S>) -> Result<S> {
    if theta.len() != p.dim() {
        return Err(Error::Shape("theta dim mismatch".into()));
    }
    if theta.iter().any(|&t| t <= S::zero()) {
        return Err(Error::Domain("weibull support is theta > 0".into()));
    }
    let mut total = S::zero();
    for m in 0..theta.len() {
        let (k, lam) = (p.k[m], p.lam[m]);
        let z = theta[m] / lam;
        total = total + k.ln() - lam.ln() + (k - S::one()) * z.ln() - z.powf(k);
    }
    Ok(total)
}

/// Σ ln Gamma(θ_m; α_m, rate β_m); requires θ > 0.
pub fn gamma_logpdf<S: Scalar>(theta: &[S], p: &GammaParams<S>) -> Result<S> {
    if theta.len() != p.dim() {
        return Err(Error::Shape("theta dim mismatch".into()));
    }
    if theta.iter().any(|&t| t <= S::zero()) {
        return Err(Error::Domain("gamma support is theta > 0".into()));
    }
    let mut total = S::zero();
    for m in 0..theta.len() {
        let (alpha, beta) = (p.alpha[m], p.beta[m]);
        total = total + alpha * beta.ln() - special::lgamma(alpha)
            + (alpha - S::one()) * theta[m].ln()
            - beta * theta[m];
    }
    Ok(total)
}

// ---- tape composites ----
//
// All composites take same-shaped matrices (callers broadcast shared per-sample
// scalars first, e.g. with `Tape::broadcast_col`) and reduce to a `[1]` scalar
// by summing over every element.

/// θ = μ + ε·√σ², elementwise on the tape.
pub fn tape_gaussian_sample<S: Scalar>(
    tape: &mut Tape<S>,
    mu: Var,
    sigma2: Var,
    eps: Var,
) -> Result<Var> {
    let sigma = tape.sqrt(sigma2)?;
    let scaled = tape.mul(eps, sigma)?;
    tape.add(mu, scaled)
}

/// θ = λ·(−ln(1−ε))^{1/k} via exp((1/k)·ln u) with u = −ln(1−ε) precomputed
/// by the caller as a positive constant.
pub fn tape_weibull_sample<S: Scalar>(
    tape: &mut Tape<S>,
    k: Var,
    lam: Var,
    ln_u: Var,
) -> Result<Var> {
    let kinv = tape.recip(k);
    let pow = tape.mul(kinv, ln_u)?;
    let u_pow = tape.exp(pow);
    tape.mul(lam, u_pow)
}

/// Σ KL(N(μ₁,σ₁²) ‖ N(μ₂,σ₂²)) over all elements.
pub fn tape_gaussian_kl<S: Scalar>(
    tape: &mut Tape<S>,
    mu1: Var,
    sigma2_1: Var,
    mu2: Var,
    sigma2_2: Var,
) -> Result<Var> {
    let half = c::<S>(0.5);
    let ln1 = tape.ln(sigma2_1)?;
    let ln2 = tape.ln(sigma2_2)?;
    let ln_ratio = tape.sub(ln2, ln1)?;
    let log_term = tape.scale(ln_ratio, half);
    let dm = tape.sub(mu1, mu2)?;
    let dm2 = tape.mul(dm, dm)?;
    let num = tape.add(sigma2_1, dm2)?;
    let den = tape.scale(sigma2_2, c::<S>(2.0));
    let quad = tape.div(num, den)?;
    let partial = tape.add(log_term, quad)?;
    let elem = tape.add_scalar(partial, -half);
    Ok(tape.sum(elem))
}

/// Σ KL(Weibull(k,λ) ‖ Gamma(α,β)) over all elements, differentiable in all
/// four parameter blocks.
pub fn tape_weibull_gamma_kl<S: Scalar>(
    tape: &mut Tape<S>,
    k: Var,
    lam: Var,
    alpha: Var,
    beta: Var,
) -> Result<Var> {
    let euler = c::<S>(EULER_MASCHERONI);
    let kinv = tape.recip(k);
    let a_over_k = tape.mul(alpha, kinv)?;
    let t1 = tape.scale(a_over_k, euler);
    let ln_lam = tape.ln(lam)?;
    let t2 = tape.mul(alpha, ln_lam)?;
    let t3 = tape.ln(k)?;
    let one_plus = tape.add_scalar(kinv, S::one());
    let lg = tape.lgamma(one_plus)?;
    let gamma_term = tape.exp(lg);
    let bl = tape.mul(beta, lam)?;
    let t4 = tape.mul(bl, gamma_term)?;
    let ln_beta = tape.ln(beta)?;
    let t5 = tape.mul(alpha, ln_beta)?;
    let t6 = tape.lgamma(alpha)?;

    let mut acc = tape.sub(t1, t2)?;
    acc = tape.add(acc, t3)?;
    acc = tape.add(acc, t4)?;
    acc = tape.sub(acc, t5)?;
    acc = tape.add(acc, t6)?;
    let acc = tape.add_scalar(acc, -(euler + S::one()));
    Ok(tape.sum(acc))
}

/// Σ ln(σ √(2πe)) over all elements.
pub fn tape_gaussian_entropy<S: Scalar>(tape: &mut Tape<S>, sigma2: Var) -> Result<Var> {
    let half = c::<S>(0.5);
    let ln_two_pi_e = c::<S>((2.0 * std::f64::consts::PI * std::f64::consts::E).ln());
    let ln_s2 = tape.ln(sigma2)?;
    let scaled = tape.scale(ln_s2, half);
    let shifted = tape.add_scalar(scaled, half * ln_two_pi_e);
    Ok(tape.sum(shifted))
}

/// Σ (k−1)γ/k + ln(λ/k) + 1 over all elements.
pub fn tape_weibull_entropy<S: Scalar>(tape: &mut Tape<S>, k: Var, lam: Var) -> Result<Var> {
    let euler = c::<S>(EULER_MASCHERONI);
    let kinv = tape.recip(k);
    let neg_inv = tape.scale(kinv, -euler);
    let t1 = tape.add_scalar(neg_inv, euler); // γ(k−1)/k = γ − γ/k
    let ratio = tape.div(lam, k)?;
    let t2 = tape.ln(ratio)?;
    let s = tape.add(t1, t2)?;
    let s = tape.add_scalar(s, S::one());
    Ok(tape.sum(s))
}

/// Σ ln N(θ; μ, σ²) over all elements.
pub fn tape_gaussian_logpdf<S: Scalar>(
    tape: &mut Tape<S>,
    theta: Var,
    mu: Var,
    sigma2: Var,
) -> Result<Var> {
    let half = c::<S>(0.5);
    let ln_two_pi = c::<S>((2.0 * std::f64::consts::PI).ln());
    let d = tape.sub(theta, mu)?;
    let d2 = tape.mul(d, d)?;
    let den = tape.scale(sigma2, c::<S>(2.0));
    let quad = tape.div(d2, den)?;
    let ln_s2 = tape.ln(sigma2)?;
    let norm = tape.scale(ln_s2, half);
    let sum = tape.add(norm, quad)?;
    let sum = tape.add_scalar(sum, half * ln_two_pi);
    let neg = tape.neg(sum);
    Ok(tape.sum(neg))
}

/// Σ ln Weibull(θ; k, λ) over all elements.
pub fn tape_weibull_logpdf<S: Scalar>(
    tape: &mut Tape<S>,
    theta: Var,
    k: Var,
    lam: Var,
) -> Result<Var> {
    let z = tape.div(theta, lam)?;
    let ln_z = tape.ln(z)?;
    let km1 = tape.add_scalar(k, -S::one());
    let t_pow = tape.mul(km1, ln_z)?;
    let k_lnz = tape.mul(k, ln_z)?;
    let z_k = tape.exp(k_lnz); // (θ/λ)^k
    let ln_k = tape.ln(k)?;
    let ln_lam = tape.ln(lam)?;
    let mut acc = tape.sub(ln_k, ln_lam)?;
    acc = tape.add(acc, t_pow)?;
    acc = tape.sub(acc, z_k)?;
    Ok(tape.sum(acc))
}

/// Σ ln Gamma(θ; α, β) over all elements.
pub fn tape_gamma_logpdf<S: Scalar>(
    tape: &mut Tape<S>,
    theta: Var,
    alpha: Var,
    beta: Var,
) -> Result<Var> {
    let ln_beta = tape.ln(beta)?;
    let t1 = tape.mul(alpha, ln_beta)?;
    let t2 = tape.lgamma(alpha)?;
    let ln_theta = tape.ln(theta)?;
    let am1 = tape.add_scalar(alpha, -S::one());
    let t3 = tape.mul(am1, ln_theta)?;
    let t4 = tape.mul(beta, theta)?;
    let mut acc = tape.sub(t1, t2)?;
    acc = tape.add(acc, t3)?;
    acc = tape.sub(acc, t4)?;
    Ok(tape.sum(acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::rng::Pcg32;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    // ---- oracle helpers ----

    /// Adaptive Simpson quadrature.
    fn simpson<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
        fn rule<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
            let m = 0.5 * (a + b);
            (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
        }
        fn go<F: Fn(f64) -> f64 + Copy>(
            f: F,
            a: f64,
            b: f64,
            whole: f64,
            tol: f64,
            depth: usize,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let left = rule(&f, a, m);
            let right = rule(&f, m, b);
            if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                go(f, a, m, left, tol / 2.0, depth - 1) + go(f, m, b, right, tol / 2.0, depth - 1)
            }
        }
        go(f, a, b, rule(&f, a, b), tol, depth)
    }

    /// −∫ p ln p via the quantile substitution: −E[ln p(θ)] = −∫₀¹ ln p(q(t)) dt.
    fn weibull_entropy_quadrature(k: f64, lam: f64) -> f64 {
        let p = WeibullParams::new(vec![k], vec![lam]).unwrap();
        let integrand = |t: f64| -> f64 {
            let theta = lam * (-(1.0 - t).ln()).powf(1.0 / k);
            -weibull_logpdf(&[theta], &p).unwrap()
        };
        let delta = 1e-9;
        simpson(integrand, delta, 1.0 - delta, 1e-10, 40)
    }

    fn gaussian_entropy_quadrature(mu: f64, sigma2: f64) -> f64 {
        let p = GaussianParams::new(vec![mu], vec![sigma2]).unwrap();
        let s = sigma2.sqrt();
        let integrand = |x: f64| -> f64 {
            let lp = gaussian_logpdf(&[x], &p).unwrap();
            -lp.exp() * lp
        };
        simpson(integrand, mu - 10.0 * s, mu + 10.0 * s, 1e-11, 40)
    }

    /// Monte-Carlo estimate of KL(q‖p) = E_q[ln q − ln p] with its standard
    /// error, via the log-densities only.
    fn mc_kl<Q, P>(n: usize, rng: &mut Pcg32, sample: Q, logratio: P) -> (f64, f64)
    where
        Q: Fn(&mut Pcg32) -> f64,
        P: Fn(f64) -> f64,
    {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = logratio(sample(rng));
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        (mean, (var / n as f64).sqrt())
    }

    // ---- samplers ----

    #[test]
    fn gaussian_sample_closed_forms() {
        let p = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        assert_eq!(gaussian_sample(&p, &[0.5]).unwrap(), vec![0.5]);
        let p = GaussianParams::new(vec![2.0], vec![9.0]).unwrap();
        assert_eq!(gaussian_sample(&p, &[-1.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn gaussian_sample_monte_carlo_moments() {
        let p = GaussianParams::new(vec![1.0], vec![4.0]).unwrap();
        let mut rng = Pcg32::new(101);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = gaussian_sample(&p, &[rng.normal()]).unwrap()[0];
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        // SE of the mean is σ/√n; SE of the variance is σ²√(2/n) for a Gaussian.
        let se_mean = 2.0 / (n as f64).sqrt();
        let se_var = 4.0 * (2.0 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - 4.0).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn weibull_sample_closed_forms() {
        let p = WeibullParams::new(vec![1.0], vec![1.0]).unwrap();
        let eps = 1.0 - (-1.0f64).exp();
        assert_abs_diff_eq!(weibull_sample(&p, &[eps]).unwrap()[0], 1.0, epsilon = 1e-12);
        let p = WeibullParams::new(vec![2.0], vec![3.0]).unwrap();
        let eps = 1.0 - (-4.0f64).exp();
        assert_abs_diff_eq!(weibull_sample(&p, &[eps]).unwrap()[0], 6.0, epsilon = 1e-10);
    }

    #[test]
    fn weibull_sample_rejects_bad_noise() {
        let p = WeibullParams::new(vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(weibull_sample(&p, &[1.5]), Err(Error::Domain(_))));
        assert!(matches!(weibull_sample(&p, &[-0.1]), Err(Error::Domain(_))));
        // Boundary values are legal and clamped away from the poles.
        let v: f64 = weibull_sample(&p, &[1.0]).unwrap()[0];
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn weibull_sample_monte_carlo_mean() {
        let p = WeibullParams::new(vec![2.0], vec![1.0]).unwrap();
        let expect = weibull_mean(&p)[0];
        assert_abs_diff_eq!(expect, 0.8862269254527580, epsilon = 1e-12);
        let mut rng = Pcg32::new(77);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = weibull_sample(&p, &[rng.uniform()]).unwrap()[0];
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let sd = (sumsq / n as f64 - mean * mean).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "mean {mean} vs {expect}");
    }

    #[test]
    fn weibull_mean_closed_forms() {
        let p = WeibullParams::new(vec![1.0], vec![2.0]).unwrap();
        assert_abs_diff_eq!(weibull_mean(&p)[0], 2.0, epsilon = 1e-12);
        let p = WeibullParams::new(vec![50.0], vec![3.0]).unwrap();
        assert_abs_diff_eq!(weibull_mean(&p)[0], 2.9665326097917398, epsilon = 1e-12);
    }

    #[test]
    fn samplers_pass_kolmogorov_smirnov() {
        // KS at the 1% level: critical value 1.62762/√n for large n.
        let n = 100_000usize;
        let crit = 1.62762 / (n as f64).sqrt();

        let gp = GaussianParams::new(vec![0.7], vec![2.3]).unwrap();
        let mut rng = Pcg32::new(404);
        let mut xs: Vec<f64> =
            (0..n).map(|_| gaussian_sample(&gp, &[rng.normal()]).unwrap()[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let normal = statrs::distribution::Normal::new(0.7, 2.3f64.sqrt()).unwrap();
        let mut d = 0.0f64;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = statrs::distribution::ContinuousCDF::cdf(&normal, x);
            d = d.max((cdf - i as f64 / n as f64).abs());
            d = d.max(((i + 1) as f64 / n as f64 - cdf).abs());
        }
        assert!(d < crit, "gaussian KS statistic {d} >= {crit}");

        let wp = WeibullParams::new(vec![1.7], vec![0.8]).unwrap();
        let mut xs: Vec<f64> =
            (0..n).map(|_| weibull_sample(&wp, &[rng.uniform()]).unwrap()[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d = 0.0f64;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = 1.0 - (-(x / 0.8f64).powf(1.7)).exp();
            d = d.max((cdf - i as f64 / n as f64).abs());
            d = d.max(((i + 1) as f64 / n as f64 - cdf).abs());
        }
        assert!(d < crit, "weibull KS statistic {d} >= {crit}");
    }

    // ---- KL closed forms ----

    #[test]
    fn gaussian_kl_identities() {
        let std1 = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(gaussian_kl(&std1, &std1).unwrap(), 0.0, epsilon = 1e-15);
        let q = GaussianParams::new(vec![1.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(gaussian_kl(&q, &std1).unwrap(), 0.5, epsilon = 1e-15);
        let q = GaussianParams::new(vec![0.0], vec![4.0]).unwrap();
        assert_abs_diff_eq!(
            gaussian_kl(&q, &std1).unwrap(),
            -(2.0f64.ln()) + 2.0 - 0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let mut rng = Pcg32::new(2718);
        let n = 1_000_000usize;
        // The spec's reference point plus random parameter points.
        let mut points = vec![(0.0, 4.0, 0.0, 1.0)];
        for _ in 0..10 {
            points.push((
                rng.uniform_range(-2.0, 2.0),
                rng.uniform_range(0.3, 4.0),
                rng.uniform_range(-2.0, 2.0),
                rng.uniform_range(0.3, 4.0),
            ));
        }
        for (m1, s1, m2, s2) in points {
            let q = GaussianParams::new(vec![m1], vec![s1]).unwrap();
            let p = GaussianParams::new(vec![m2], vec![s2]).unwrap();
            let analytic = gaussian_kl(&q, &p).unwrap();
            let (mc, se) = mc_kl(
                n,
                &mut rng,
                |r| gaussian_sample(&q, &[r.normal()]).unwrap()[0],
                |x| {
                    gaussian_logpdf(&[x], &q).unwrap() - gaussian_logpdf(&[x], &p).unwrap()
                },
            );
            assert!(
                (analytic - mc).abs() < 3.0 * se.max(1e-9),
                "KL({m1},{s1}||{m2},{s2}): analytic {analytic} vs MC {mc} (se {se})"
            );
        }
    }

    #[test]
    fn weibull_gamma_kl_zero_at_coinciding_exponentials() {
        // Weibull(1, λ) and Gamma(1, 1/λ) are both Exponential(rate 1/λ).
        for lam in [0.5, 1.0, 4.0] {
            let q = WeibullParams::new(vec![1.0], vec![lam]).unwrap();
            let p = GammaParams::new(vec![1.0], vec![1.0 / lam]).unwrap();
            assert_abs_diff_eq!(weibull_gamma_kl(&q, &p).unwrap(), 0.0, epsilon = 1e-12);
        }
        let q = WeibullParams::new(vec![1.0], vec![1.0]).unwrap();
        let p = GammaParams::unit(1);
        assert_abs_diff_eq!(weibull_gamma_kl(&q, &p).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn weibull_gamma_kl_reference_point() {
        let q = WeibullParams::new(vec![2.0], vec![1.0]).unwrap();
        let p = GammaParams::unit(1);
        // γ/2 + ln 2 + Γ(3/2) − γ − 1
        assert_abs_diff_eq!(
            weibull_gamma_kl(&q, &p).unwrap(),
            0.2907662735619369,
            epsilon = 1e-12
        );
    }

    #[test]
    fn weibull_gamma_kl_matches_monte_carlo() {
        let mut rng = Pcg32::new(31415);
        let n = 1_000_000usize;
        let mut points = vec![(2.0, 1.0, 1.0, 1.0)];
        for _ in 0..10 {
            points.push((
                rng.uniform_range(0.5, 4.0),
                rng.uniform_range(0.3, 3.0),
                rng.uniform_range(0.5, 3.0),
                rng.uniform_range(0.3, 3.0),
            ));
        }
        for (k, lam, alpha, beta) in points {
            let q = WeibullParams::new(vec![k], vec![lam]).unwrap();
            let p = GammaParams::new(vec![alpha], vec![beta]).unwrap();
            let analytic = weibull_gamma_kl(&q, &p).unwrap();
            let (mc, se) = mc_kl(
                n,
                &mut rng,
                |r| weibull_sample(&q, &[r.uniform()]).unwrap()[0],
                |x| weibull_logpdf(&[x], &q).unwrap() - gamma_logpdf(&[x], &p).unwrap(),
            );
            assert!(
                (analytic - mc).abs() < 3.0 * se.max(1e-9),
                "KL(W({k},{lam})||G({alpha},{beta})): analytic {analytic} vs MC {mc} (se {se})"
            );
        }
    }

    #[test]
    fn kl_non_negative_on_random_sweep() {
        let mut rng = Pcg32::new(555);
        for _ in 0..1000 {
            let d = 1 + rng.below(4);
            let q = GaussianParams::new(
                (0..d).map(|_| rng.uniform_range(-3.0, 3.0)).collect(),
                (0..d).map(|_| rng.uniform_range(0.05, 5.0)).collect(),
            )
            .unwrap();
            let p = GaussianParams::new(
                (0..d).map(|_| rng.uniform_range(-3.0, 3.0)).collect(),
                (0..d).map(|_| rng.uniform_range(0.05, 5.0)).collect(),
            )
            .unwrap();
            assert!(gaussian_kl(&q, &p).unwrap() >= -1e-12);

            let w = WeibullParams::new(
                (0..d).map(|_| rng.uniform_range(0.2, 8.0)).collect(),
                (0..d).map(|_| rng.uniform_range(0.1, 5.0)).collect(),
            )
            .unwrap();
            let g = GammaParams::new(
                (0..d).map(|_| rng.uniform_range(0.2, 5.0)).collect(),
                (0..d).map(|_| rng.uniform_range(0.1, 5.0)).collect(),
            )
            .unwrap();
            assert!(weibull_gamma_kl(&w, &g).unwrap() >= -1e-12);
        }
    }

    // ---- entropies ----

    #[test]
    fn gaussian_entropy_closed_forms() {
        let p = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(gaussian_entropy(&p), 1.4189385332046727, epsilon = 1e-12);
        let p2 = GaussianParams::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(gaussian_entropy(&p2), 2.0 * 1.4189385332046727, epsilon = 1e-12);
        // σ² scaled by 4 adds d·ln 2.
        let p4 = GaussianParams::new(vec![0.0, 0.0], vec![4.0, 4.0]).unwrap();
        assert_abs_diff_eq!(
            gaussian_entropy(&p4) - gaussian_entropy(&p2),
            2.0 * 2.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn weibull_entropy_closed_forms() {
        let p = WeibullParams::new(vec![1.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(weibull_entropy(&p), 1.0, epsilon = 1e-15);
        let p = WeibullParams::new(vec![1.0], vec![std::f64::consts::E]).unwrap();
        assert_abs_diff_eq!(weibull_entropy(&p), 2.0, epsilon = 1e-15);
        // Frozen from the quadrature oracle below.
        let p = WeibullParams::new(vec![2.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(weibull_entropy(&p), 0.5954606518908211, epsilon = 1e-10);
    }

    #[test]
    fn entropies_match_quadrature() {
        let mut rng = Pcg32::new(808);
        for _ in 0..10 {
            let mu = rng.uniform_range(-2.0, 2.0);
            let s2 = rng.uniform_range(0.2, 4.0);
            let p = GaussianParams::new(vec![mu], vec![s2]).unwrap();
            assert_abs_diff_eq!(
                gaussian_entropy(&p),
                gaussian_entropy_quadrature(mu, s2),
                epsilon = 1e-6
            );
        }
        for _ in 0..10 {
            let k = rng.uniform_range(0.5, 5.0);
            let lam = rng.uniform_range(0.2, 5.0);
            let p = WeibullParams::new(vec![k], vec![lam]).unwrap();
            assert_abs_diff_eq!(
                weibull_entropy(&p),
                weibull_entropy_quadrature(k, lam),
                epsilon = 1e-6
            );
        }
        // The reference point of the frozen value.
        assert_abs_diff_eq!(
            weibull_entropy_quadrature(2.0, 1.0),
            0.5954606518908211,
            epsilon = 1e-7
        );
    }

    // ---- log densities ----

    #[test]
    fn logpdf_closed_forms() {
        let w = WeibullParams::new(vec![1.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(weibull_logpdf(&[1.0], &w).unwrap(), -1.0, epsilon = 1e-14);
        let g = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(
            gaussian_logpdf(&[0.0], &g).unwrap(),
            -0.9189385332046727,
            epsilon = 1e-14
        );
        let gm = GammaParams::unit(1);
        assert_abs_diff_eq!(gamma_logpdf(&[1.0], &gm).unwrap(), -1.0, epsilon = 1e-14);
    }

    #[test]
    fn logpdf_support_errors() {
        let w = WeibullParams::new(vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(weibull_logpdf(&[-1.0], &w), Err(Error::Domain(_))));
        let g = GammaParams::unit(1);
        assert!(matches!(gamma_logpdf(&[0.0], &g), Err(Error::Domain(_))));
    }

    // ---- parameter invariants ----

    #[test]
    fn param_invariants_enforced() {
        assert!(GaussianParams::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianParams::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(WeibullParams::new(vec![1.0], vec![0.0]).is_err());
        assert!(GammaParams::new(vec![0.0], vec![1.0]).is_err());
        // k clamps into [K_MIN, K_MAX].
        let p = WeibullParams::new(vec![1e-4, 200.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(p.k(), &[WEIBULL_K_MIN, WEIBULL_K_MAX]);
    }

    // ---- tape composites: value agreement and gradients ----

    #[test]
    fn tape_routes_match_value_routes() {
        let mut rng = Pcg32::new(90);
        for _ in 0..50 {
            let d = 1 + rng.below(3);
            let mu: Vec<f64> = (0..d).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
            let s2: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.2, 3.0)).collect();
            let q = GaussianParams::new(mu.clone(), s2.clone()).unwrap();
            let p = GaussianParams::standard(d);

            let mut tape = Tape::new();
            let vmu = tape.leaf(&Tensor::vector(mu.clone()));
            let vs2 = tape.leaf(&Tensor::vector(s2.clone()));
            let vmu2 = tape.constant(&Tensor::vector(vec![0.0; d]));
            let vs22 = tape.constant(&Tensor::vector(vec![1.0; d]));
            let kl = tape_gaussian_kl(&mut tape, vmu, vs2, vmu2, vs22).unwrap();
            assert_abs_diff_eq!(
                tape.value(kl).data()[0],
                gaussian_kl(&q, &p).unwrap(),
                epsilon = 1e-12
            );

            let ent = tape_gaussian_entropy(&mut tape, vs2).unwrap();
            assert_abs_diff_eq!(
                tape.value(ent).data()[0],
                gaussian_entropy(&q),
                epsilon = 1e-12
            );

            let k: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.3, 5.0)).collect();
            let lam: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.2, 3.0)).collect();
            let w = WeibullParams::new(k.clone(), lam.clone()).unwrap();
            let g = GammaParams::unit(d);
            let vk = tape.leaf(&Tensor::vector(k.clone()));
            let vlam = tape.leaf(&Tensor::vector(lam.clone()));
            let valpha = tape.constant(&Tensor::vector(vec![1.0; d]));
            let vbeta = tape.constant(&Tensor::vector(vec![1.0; d]));
            let wkl = tape_weibull_gamma_kl(&mut tape, vk, vlam, valpha, vbeta).unwrap();
            assert_abs_diff_eq!(
                tape.value(wkl).data()[0],
                weibull_gamma_kl(&w, &g).unwrap(),
                epsilon = 1e-12
            );

            let went = tape_weibull_entropy(&mut tape, vk, vlam).unwrap();
            assert_abs_diff_eq!(
                tape.value(went).data()[0],
                weibull_entropy(&w),
                epsilon = 1e-12
            );

            // Samplers agree given the same noise.
            let eps: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let veps = tape.constant(&Tensor::vector(eps.clone()));
            let theta = tape_gaussian_sample(&mut tape, vmu, vs2, veps).unwrap();
            let want = gaussian_sample(&q, &eps).unwrap();
            for (a, b) in tape.value(theta).data().iter().zip(&want) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }

            let u: Vec<f64> = (0..d)
                .map(|_| rng.uniform_range(0.05, 0.95))
                .map(|e: f64| -(1.0 - e).ln())
                .collect();
            let ln_u = tape.constant(&Tensor::vector(u.iter().map(|v| v.ln()).collect()));
            let wtheta = tape_weibull_sample(&mut tape, vk, vlam, ln_u).unwrap();
            for (m, (a, &uu)) in tape.value(wtheta).data().iter().zip(&u).enumerate() {
                let want = lam[m] * uu.powf(1.0 / k[m]);
                assert_abs_diff_eq!(a, &want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn weibull_mean_matches_tape_bitwise() {
        // The head and the eval path must agree bit for bit; both go through
        // gamma_one_plus_inv and the same op order.
        let mut rng = Pcg32::new(91);
        for _ in 0..200 {
            let k = rng.uniform_range(0.1, 60.0);
            let lam = rng.uniform_range(0.01, 10.0);
            let p = WeibullParams::new(vec![k], vec![lam]).unwrap();
            let value = weibull_mean(&p)[0];

            let mut tape = Tape::new();
            let vk = tape.constant(&Tensor::scalar(k));
            let vlam = tape.constant(&Tensor::scalar(lam));
            let kinv = tape.recip(vk);
            let one_plus = tape.add_scalar(kinv, 1.0);
            let lg = tape.lgamma(one_plus).unwrap();
            let gm = tape.exp(lg);
            let mean = tape.mul(vlam, gm).unwrap();
            assert_eq!(tape.value(mean).data()[0].to_bits(), value.to_bits());
        }
    }

    #[test]
    fn gradients_pass_finite_difference() {
        // All four Weibull/Gamma KL parameters at the spec's reference point,
        // then random sweeps for every composite.
        let pack = |vals: &[f64]| Tensor::vector(vals.to_vec());
        let kl4 = |tape: &mut Tape<f64>, x: crate::autodiff::Var| {
            // x = [k, lam, alpha, beta] packed into one vector: split by
            // elementwise masks.
            let mk = tape.constant(&pack(&[1.0, 0.0, 0.0, 0.0]));
            let ml = tape.constant(&pack(&[0.0, 1.0, 0.0, 0.0]));
            let ma = tape.constant(&pack(&[0.0, 0.0, 1.0, 0.0]));
            let mb = tape.constant(&pack(&[0.0, 0.0, 0.0, 1.0]));
            let gather = |tape: &mut Tape<f64>, mask| -> crate::Result<crate::autodiff::Var> {
                let masked = tape.mul(x, mask)?;
                Ok(tape.sum(masked))
            };
            let k = gather(tape, mk)?;
            let lam = gather(tape, ml)?;
            let alpha = gather(tape, ma)?;
            let beta = gather(tape, mb)?;
            tape_weibull_gamma_kl(tape, k, lam, alpha, beta)
        };
        let err = finite_diff_check(kl4, &pack(&[2.0, 1.0, 1.0, 1.0]), 1e-5).unwrap();
        assert!(err < 1e-5, "weibull_gamma_kl FD error {err:e} at reference point");

        let mut rng = Pcg32::new(92);
        for _ in 0..100 {
            let point = pack(&[
                rng.uniform_range(0.5, 4.0),
                rng.uniform_range(0.3, 3.0),
                rng.uniform_range(0.5, 3.0),
                rng.uniform_range(0.3, 3.0),
            ]);
            let err = finite_diff_check(kl4, &point, 1e-5).unwrap();
            assert!(err < 1e-5, "weibull_gamma_kl FD error {err:e} at {point:?}");
        }

        // Gaussian KL in all four parameters.
        for _ in 0..100 {
            let point = pack(&[
                rng.uniform_range(-2.0, 2.0),
                rng.uniform_range(0.3, 3.0),
                rng.uniform_range(-2.0, 2.0),
                rng.uniform_range(0.3, 3.0),
            ]);
            let err = finite_diff_check(
                |tape, x| {
                    let mk = tape.constant(&pack(&[1.0, 0.0, 0.0, 0.0]));
                    let ml = tape.constant(&pack(&[0.0, 1.0, 0.0, 0.0]));
                    let ma = tape.constant(&pack(&[0.0, 0.0, 1.0, 0.0]));
                    let mb = tape.constant(&pack(&[0.0, 0.0, 0.0, 1.0]));
                    let gather = |tape: &mut Tape<f64>, mask| -> crate::Result<crate::autodiff::Var> {
                        let masked = tape.mul(x, mask)?;
                        Ok(tape.sum(masked))
                    };
                    let mu1 = gather(tape, mk)?;
                    let s1 = gather(tape, ml)?;
                    let mu2 = gather(tape, ma)?;
                    let s2 = gather(tape, mb)?;
                    tape_gaussian_kl(tape, mu1, s1, mu2, s2)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "gaussian_kl FD error {err:e}");
        }

        // Samplers and entropies with pinned noise.
        for _ in 0..100 {
            let point = pack(&[rng.uniform_range(-1.5, 1.5), rng.uniform_range(0.3, 3.0)]);
            let eps = rng.normal();
            let err = finite_diff_check(
                |tape, x| {
                    let mm = tape.constant(&pack(&[1.0, 0.0]));
                    let ms = tape.constant(&pack(&[0.0, 1.0]));
                    let mum = tape.mul(x, mm)?;
                    let mu = tape.sum(mum);
                    let s2m = tape.mul(x, ms)?;
                    let s2 = tape.sum(s2m);
                    let e = tape.scalar_const(eps);
                    let theta = tape_gaussian_sample(tape, mu, s2, e)?;
                    let ent = tape_gaussian_entropy(tape, s2)?;
                    let t2 = tape.mul(theta, theta)?;
                    tape.add(t2, ent)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "gaussian sampler/entropy FD error {err:e}");

            let point = pack(&[rng.uniform_range(0.4, 4.0), rng.uniform_range(0.3, 3.0)]);
            let u = -(1.0f64 - rng.uniform_range(0.1, 0.9)).ln();
            let err = finite_diff_check(
                |tape, x| {
                    let mk = tape.constant(&pack(&[1.0, 0.0]));
                    let ml = tape.constant(&pack(&[0.0, 1.0]));
                    let km = tape.mul(x, mk)?;
                    let k = tape.sum(km);
                    let lm = tape.mul(x, ml)?;
                    let lam = tape.sum(lm);
                    let ln_u = tape.scalar_const(u.ln());
                    let theta = tape_weibull_sample(tape, k, lam, ln_u)?;
                    let ent = tape_weibull_entropy(tape, k, lam)?;
                    let t2 = tape.mul(theta, theta)?;
                    tape.add(t2, ent)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "weibull sampler/entropy FD error {err:e}");
        }

        // Log densities in their parameters.
        for _ in 0..100 {
            let theta = rng.uniform_range(0.2, 3.0);
            let point = pack(&[rng.uniform_range(0.5, 3.0), rng.uniform_range(0.3, 3.0)]);
            let err = finite_diff_check(
                |tape, x| {
                    let m1 = tape.constant(&pack(&[1.0, 0.0]));
                    let m2 = tape.constant(&pack(&[0.0, 1.0]));
                    let am = tape.mul(x, m1)?;
                    let a = tape.sum(am);
                    let bm = tape.mul(x, m2)?;
                    let b = tape.sum(bm);
                    let th = tape.scalar_const(theta);
                    let lw = tape_weibull_logpdf(tape, th, a, b)?;
                    let lg = tape_gamma_logpdf(tape, th, a, b)?;
                    let ln = tape_gaussian_logpdf(tape, th, a, b)?;
                    let s = tape.add(lw, lg)?;
                    tape.add(s, ln)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "logpdf FD error {err:e}");
        }
    }
}
