//! Synthetic enumerable worlds.
//!
//! Cluster worlds stand in for image datasets: class centers on an orthogonal
//! frame, naturals scattered around them, augmentations as jittered copies.
//! Factor worlds enumerate a grid of independent generative factors embedded
//! in disjoint feature blocks, which gives exact per-factor entropies for the
//! mutual-information oracles. Everything is a pure function of config + seed.

use serde::{Deserialize, Serialize};

use crate::augraph::AugmentationWorld;
use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterWorldConfig {
    pub num_classes: usize,
    pub naturals_per_class: usize,
    pub augs_per_natural: usize,
    pub feature_dim: usize,
    pub class_center_scale: f64,
    pub augmentation_noise: f64,
    /// Odd-indexed classes get 4× noise, driving the entropy–accuracy split.
    pub heteroscedastic: bool,
    pub seed: u64,
}

/// Reference world for the acceptance runs: 8×32×4 = 1024 augmented samples.
pub fn reference_cluster_config(seed: u64) -> ClusterWorldConfig {
    ClusterWorldConfig {
        num_classes: 8,
        naturals_per_class: 32,
        augs_per_natural: 4,
        feature_dim: 32,
        class_center_scale: 5.0,
        augmentation_noise: 0.6,
        heteroscedastic: false,
        seed,
    }
}

pub fn reference_heteroscedastic_config(seed: u64) -> ClusterWorldConfig {
    ClusterWorldConfig { heteroscedastic: true, ..reference_cluster_config(seed) }
}

const HETERO_NOISE_MULTIPLIER: f64 = 4.0;

/// Orthonormal class directions from Gram–Schmidt on Gaussian draws; falls
/// back to plain unit vectors when there are more classes than dimensions.
fn class_centers(k: usize, dim: usize, scale: f64, rng: &mut Pcg32) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if c < dim {
            for prev in &centers {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                let scale_prev = dot / scale / scale;
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= scale_prev * pi;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for vi in &mut v {
            *vi *= scale / norm;
        }
        centers.push(v);
    }
    centers
}

pub fn make_cluster_world(cfg: &ClusterWorldConfig) -> Result<AugmentationWorld<f64>> {
    if cfg.num_classes == 0 || cfg.naturals_per_class == 0 || cfg.augs_per_natural == 0 {
        return Err(Error::Contract("cluster world counts must be at least 1".into()));
    }
    if cfg.augmentation_noise < 0.0 {
        return Err(Error::Contract("augmentation noise must be non-negative".into()));
    }
    let mut rng = Pcg32::new(cfg.seed);
    let centers =
        class_centers(cfg.num_classes, cfg.feature_dim, cfg.class_center_scale, &mut rng);

    let n_natural = cfg.num_classes * cfg.naturals_per_class;
    let n_aug = n_natural * cfg.augs_per_natural;
    let mut features = Tensor::zeros(vec![n_aug, cfg.feature_dim]);
    let mut kernel = Tensor::zeros(vec![n_natural, n_aug]);
    let mut labels = vec![0usize; n_aug];

    // The heteroscedastic multiplier scales the natural scatter only: class
    // ambiguity is intrinsic to the samples, while the augmentation pipeline
    // (the jitter) is shared across classes, as in real SSL setups.
    let mut aug_id = 0usize;
    for class in 0..cfg.num_classes {
        let natural_noise = if cfg.heteroscedastic && class % 2 == 1 {
            cfg.augmentation_noise * HETERO_NOISE_MULTIPLIER
        } else {
            cfg.augmentation_noise
        };
        for n in 0..cfg.naturals_per_class {
            let nat_id = class * cfg.naturals_per_class + n;
            let natural: Vec<f64> =
                centers[class].iter().map(|&c| c + natural_noise * rng.normal()).collect();
            let row_prob = 1.0 / cfg.augs_per_natural as f64;
            for _ in 0..cfg.augs_per_natural {
                for (j, &nv) in natural.iter().enumerate() {
                    features.set2(aug_id, j, nv + cfg.augmentation_noise * rng.normal());
                }
                kernel.set2(nat_id, aug_id, row_prob);
                labels[aug_id] = class;
                aug_id += 1;
            }
        }
    }
    let natural_probs = vec![1.0 / n_natural as f64; n_natural];
    AugmentationWorld::new(natural_probs, kernel, features, labels)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorWorldConfig {
    pub num_factors: usize,
    pub values_per_factor: usize,
    pub feature_dim: usize,
    pub augs_per_natural: usize,
    pub jitter: f64,
    pub factor_scale: f64,
    pub seed: u64,
}

/// Factor grid world plus the ground-truth factor values per augmented
/// sample, for the mutual-information oracles.
pub fn make_factor_world_cfg(
    cfg: &FactorWorldConfig,
) -> Result<(AugmentationWorld<f64>, Vec<Vec<usize>>)> {
    if cfg.num_factors < 2 {
        return Err(Error::Contract("factor world needs at least 2 factors".into()));
    }
    if cfg.values_per_factor < 2 {
        return Err(Error::Contract("factors need at least 2 values".into()));
    }
    if cfg.feature_dim % cfg.num_factors != 0 {
        return Err(Error::Contract(format!(
            "feature_dim {} must divide evenly into {} factor blocks",
            cfg.feature_dim, cfg.num_factors
        )));
    }
    let block = cfg.feature_dim / cfg.num_factors;
    let mut rng = Pcg32::new(cfg.seed);

    // One unit vector per (factor, value), confined to the factor's block:
    // block disjointness gives zero mutual coherence by construction.
    let mut embeddings = vec![vec![vec![0.0f64; block]; cfg.values_per_factor]; cfg.num_factors];
    for femb in embeddings.iter_mut() {
        for vemb in femb.iter_mut() {
            let raw: Vec<f64> = (0..block).map(|_| rng.normal()).collect();
            let norm: f64 = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (slot, r) in vemb.iter_mut().zip(raw) {
                *slot = r / norm * cfg.factor_scale;
            }
        }
    }

    let n_natural = cfg.values_per_factor.pow(cfg.num_factors as u32);
    let n_aug = n_natural * cfg.augs_per_natural;
    let mut features = Tensor::zeros(vec![n_aug, cfg.feature_dim]);
    let mut kernel = Tensor::zeros(vec![n_natural, n_aug]);
    let mut labels = vec![0usize; n_aug];
    let mut factor_values = vec![vec![0usize; cfg.num_factors]; n_aug];

    let mut aug_id = 0usize;
    for nat in 0..n_natural {
        // Grid coordinates of this natural, base values_per_factor.
        let mut rest = nat;
        let coords: Vec<usize> = (0..cfg.num_factors)
            .map(|_| {
                let v = rest % cfg.values_per_factor;
                rest /= cfg.values_per_factor;
                v
            })
            .collect();
        let mut natural = vec![0.0f64; cfg.feature_dim];
        for (f, &v) in coords.iter().enumerate() {
            for (j, &e) in embeddings[f][v].iter().enumerate() {
                natural[f * block + j] = e;
            }
        }
        let row_prob = 1.0 / cfg.augs_per_natural as f64;
        for _ in 0..cfg.augs_per_natural {
            for (j, &nv) in natural.iter().enumerate() {
                features.set2(aug_id, j, nv + cfg.jitter * rng.normal());
            }
            kernel.set2(nat, aug_id, row_prob);
            labels[aug_id] = coords[0];
            factor_values[aug_id] = coords.clone();
            aug_id += 1;
        }
    }
    let natural_probs = vec![1.0 / n_natural as f64; n_natural];
    let world = AugmentationWorld::new(natural_probs, kernel, features, labels)?;
    Ok((world, factor_values))
}

/// Factor world with default augmentation settings (8 jittered copies per
/// natural, jitter 0.05, block scale 2).
pub fn make_factor_world(
    num_factors: usize,
    values_per_factor: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<(AugmentationWorld<f64>, Vec<Vec<usize>>)> {
    make_factor_world_cfg(&FactorWorldConfig {
        num_factors,
        values_per_factor,
        feature_dim,
        augs_per_natural: 8,
        jitter: 0.05,
        factor_scale: 2.0,
        seed,
    })
}

/// Fully supported random world with a dense kernel; used by the spectral
/// equivalence tests where a rich Ā spectrum matters.
pub fn make_random_world(
    n_natural: usize,
    n_aug: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<AugmentationWorld<f64>> {
    if n_natural == 0 || n_aug == 0 || feature_dim == 0 {
        return Err(Error::Contract("random world dimensions must be at least 1".into()));
    }
    let mut rng = Pcg32::new(seed);
    let raw: Vec<f64> = (0..n_natural).map(|_| rng.uniform_range(0.2, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    let natural_probs: Vec<f64> = raw.into_iter().map(|p| p / total).collect();
    let mut kernel = Tensor::zeros(vec![n_natural, n_aug]);
    for b in 0..n_natural {
        let row: Vec<f64> = (0..n_aug).map(|_| rng.uniform_range(0.1, 1.0)).collect();
        let s: f64 = row.iter().sum();
        for (x, v) in row.into_iter().enumerate() {
            kernel.set2(b, x, v / s);
        }
    }
    let features = Tensor::from_raw(
        vec![n_aug, feature_dim],
        (0..n_aug * feature_dim).map(|_| rng.normal()).collect(),
    );
    let labels = (0..n_aug).map(|x| x % 2).collect();
    AugmentationWorld::new(natural_probs, kernel, features, labels)
}
