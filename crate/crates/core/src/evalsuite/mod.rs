//! Downstream evaluation: linear probing, entropy-based uncertainty with
//! PAvPU, entropy-bucket accuracy tables, and SEPIN@k disentanglement.
//!
//! Probe features are posterior means, never samples, so every number here is
//! deterministic given a checkpoint. Entropy scores share a single code path
//! with the distributions module.

mod sepin;

pub use sepin::{infonce_mi_estimate, sepin_at_k, CriticCfg, SepinResult};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::augraph::AugmentationWorld;
use crate::distributions::{gaussian_entropy, weibull_entropy};
use crate::encoder::{Checkpoint, EncoderModel, Posterior};
use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

/// Per-sample uncertainty bookkeeping. `certain` is owned by [`pavpu`]: the M
/// highest-entropy samples are the uncertain ones.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyRecord {
    pub sample_id: usize,
    pub entropy: f64,
    pub pred: usize,
    pub label: usize,
    pub certain: bool,
}

impl UncertaintyRecord {
    pub fn accurate(&self) -> bool {
        self.pred == self.label
    }
}

/// The four accuracy×certainty counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PavpuCounts {
    pub n_ac: usize,
    pub n_au: usize,
    pub n_ic: usize,
    pub n_iu: usize,
}

impl PavpuCounts {
    pub fn total(&self) -> usize {
        self.n_ac + self.n_au + self.n_ic + self.n_iu
    }

    pub fn pavpu(&self) -> f64 {
        (self.n_ac + self.n_iu) as f64 / self.total() as f64
    }

    /// Top-1 accuracy reconstructed from the counts.
    pub fn top1(&self) -> f64 {
        (self.n_ac + self.n_au) as f64 / self.total() as f64
    }
}

// ---- features and entropies ----

/// Posterior-mean feature per augmented sample (μ for the Gaussian head,
/// λΓ(1+1/k) for the Weibull head, the head output for the deterministic one).
pub fn extract_features(
    model: &EncoderModel,
    world: &AugmentationWorld<f64>,
) -> Result<Tensor<f64>> {
    let n = world.n_aug();
    let d = model.latent_dim;
    let mut out = Tensor::zeros(vec![n, d]);
    for x in 0..n {
        let mean = model.posterior(world.features.row(x))?.mean();
        for (j, v) in mean.into_iter().enumerate() {
            out.set2(x, j, v);
        }
    }
    Ok(out)
}

/// Features for either checkpoint kind; a table checkpoint's rows are its
/// features directly.
pub fn features_from_checkpoint(
    ckpt: &Checkpoint,
    world: &AugmentationWorld<f64>,
) -> Result<Tensor<f64>> {
    match ckpt.header.model_kind.as_str() {
        "mlp" => extract_features(&ckpt.to_model()?, world),
        "table" => {
            let table = ckpt.to_table()?;
            if table.shape()[0] != world.n_aug() {
                return Err(Error::Shape(format!(
                    "table has {} rows, world has {} samples",
                    table.shape()[0],
                    world.n_aug()
                )));
            }
            Ok(table)
        }
        other => Err(Error::Contract(format!("unknown model kind '{other}'"))),
    }
}

/// Posterior entropy per sample via the matching closed form (Gaussian or
/// Weibull); deterministic checkpoints have no posterior to score.
pub fn entropy_scores(model: &EncoderModel, world: &AugmentationWorld<f64>) -> Result<Vec<f64>> {
    (0..world.n_aug())
        .map(|x| match model.posterior(world.features.row(x))? {
            Posterior::Gaussian(p) => Ok(gaussian_entropy(&p)),
            Posterior::Weibull(p) => Ok(weibull_entropy(&p)),
            Posterior::Point(_) => Err(Error::Contract(
                "entropy is undefined for a deterministic head".into(),
            )),
        })
        .collect()
}

// ---- linear probe ----

/// Index partition for probing.
#[derive(Clone, Debug)]
pub struct Split {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl Split {
    /// Seeded stratified split: each class is shuffled and cut at
    /// `train_frac`, with at least one sample per side when possible.
    pub fn stratified(labels: &[usize], train_frac: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&train_frac) || train_frac == 0.0 {
            return Err(Error::Contract("train_frac must lie in (0, 1)".into()));
        }
        let mut rng = Pcg32::new(seed);
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for (_, mut idx) in by_class {
            rng.shuffle(&mut idx);
            let cut = ((idx.len() as f64 * train_frac).round() as usize)
                .clamp(1, idx.len().saturating_sub(1).max(1));
            train_idx.extend_from_slice(&idx[..cut]);
            test_idx.extend_from_slice(&idx[cut..]);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        Ok(Split { train_idx, test_idx })
    }
}

#[derive(Clone, Debug)]
pub struct ProbeCfg {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop when the L2 norm of the full gradient drops below this.
    pub grad_tol: f64,
    /// Standardize features with train-split statistics first.
    pub standardize: bool,
}

impl Default for ProbeCfg {
    fn default() -> Self {
        ProbeCfg { learning_rate: 0.5, max_iters: 10_000, grad_tol: 1e-6, standardize: true }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Predictions aligned with the split's `test_idx`.
    pub test_preds: Vec<usize>,
    pub iterations: usize,
}

fn softmax_rows(logits: &mut [f64], n: usize, c: usize) {
    for i in 0..n {
        let row = &mut logits[i * c..(i + 1) * c];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Argmax with ties broken toward the lowest class index.
fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Multinomial logistic regression by full-batch gradient descent.
pub fn linear_probe(
    features: &Tensor<f64>,
    labels: &[usize],
    split: &Split,
    cfg: &ProbeCfg,
) -> Result<ProbeResult> {
    let (n, d) = features.matrix_dims()?;
    if labels.len() != n {
        return Err(Error::Shape("label count must match feature rows".into()));
    }
    let mut train_classes: Vec<usize> = split.train_idx.iter().map(|&i| labels[i]).collect();
    train_classes.sort_unstable();
    train_classes.dedup();
    if train_classes.len() < 2 {
        return Err(Error::Contract("probe train split must contain at least 2 classes".into()));
    }
    let c = labels.iter().copied().max().expect("non-empty labels") + 1;

    // Standardization statistics from the train split only.
    let (mean, std) = if cfg.standardize {
        let mut mean = vec![0.0; d];
        for &i in &split.train_idx {
            for j in 0..d {
                mean[j] += features.at2(i, j);
            }
        }
        for m in &mut mean {
            *m /= split.train_idx.len() as f64;
        }
        let mut var = vec![0.0; d];
        for &i in &split.train_idx {
            for j in 0..d {
                let diff = features.at2(i, j) - mean[j];
                var[j] += diff * diff;
            }
        }
        let std: Vec<f64> =
            var.iter().map(|v| (v / split.train_idx.len() as f64).sqrt().max(1e-8)).collect();
        (mean, std)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let feat = |i: usize, j: usize| (features.at2(i, j) - mean[j]) / std[j];

    let nt = split.train_idx.len();
    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut iterations = 0usize;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        // p = softmax(XW + b)
        let mut logits = vec![0.0; nt * c];
        for (row, &i) in split.train_idx.iter().enumerate() {
            for j in 0..d {
                let xv = feat(i, j);
                for cc in 0..c {
                    logits[row * c + cc] += xv * w[j * c + cc];
                }
            }
            for cc in 0..c {
                logits[row * c + cc] += b[cc];
            }
        }
        softmax_rows(&mut logits, nt, c);
        // grad = Xᵀ(p − y)/n
        for (row, &i) in split.train_idx.iter().enumerate() {
            logits[row * c + labels[i]] -= 1.0;
        }
        let inv_n = 1.0 / nt as f64;
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        for (row, &i) in split.train_idx.iter().enumerate() {
            for j in 0..d {
                let xv = feat(i, j) * inv_n;
                for cc in 0..c {
                    gw[j * c + cc] += xv * logits[row * c + cc];
                }
            }
            for cc in 0..c {
                gb[cc] += logits[row * c + cc] * inv_n;
            }
        }
        let gnorm: f64 = gw.iter().chain(gb.iter()).map(|g| g * g).sum::<f64>().sqrt();
        for (wv, gv) in w.iter_mut().zip(&gw) {
            *wv -= cfg.learning_rate * gv;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= cfg.learning_rate * gv;
        }
        if gnorm < cfg.grad_tol {
            break;
        }
    }

    let predict = |i: usize| -> usize {
        let mut row = b.clone();
        for j in 0..d {
            let xv = feat(i, j);
            for cc in 0..c {
                row[cc] += xv * w[j * c + cc];
            }
        }
        argmax_lowest(&row)
    };
    let train_hits =
        split.train_idx.iter().filter(|&&i| predict(i) == labels[i]).count();
    let test_preds: Vec<usize> = split.test_idx.iter().map(|&i| predict(i)).collect();
    let test_hits = split
        .test_idx
        .iter()
        .zip(&test_preds)
        .filter(|(&i, &p)| labels[i] == p)
        .count();
    Ok(ProbeResult {
        train_accuracy: train_hits as f64 / nt as f64,
        test_accuracy: test_hits as f64 / split.test_idx.len().max(1) as f64,
        test_preds,
        iterations,
    })
}

// ---- PAvPU ----

/// Marks the M most-entropic records uncertain (ties at the boundary broken
/// by ascending sample id) and returns the counts with the PAvPU score.
pub fn pavpu(records: &mut [UncertaintyRecord], m: usize) -> Result<(PavpuCounts, f64)> {
    if m > records.len() {
        return Err(Error::Contract(format!(
            "M = {m} exceeds the {} evaluation records",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .entropy
            .partial_cmp(&records[a].entropy)
            .expect("finite entropies")
            .then(records[a].sample_id.cmp(&records[b].sample_id))
    });
    for (rank, &idx) in order.iter().enumerate() {
        records[idx].certain = rank >= m;
    }
    let mut counts = PavpuCounts::default();
    for r in records.iter() {
        match (r.accurate(), r.certain) {
            (true, true) => counts.n_ac += 1,
            (true, false) => counts.n_au += 1,
            (false, true) => counts.n_ic += 1,
            (false, false) => counts.n_iu += 1,
        }
    }
    let score = counts.pavpu();
    Ok((counts, score))
}

// ---- entropy buckets ----

#[derive(Clone, Debug)]
pub struct BucketRow {
    pub bucket: usize,
    pub mean_entropy: f64,
    pub accuracy: f64,
    pub size: usize,
}

#[derive(Clone, Debug)]
pub struct BucketTable {
    pub rows: Vec<BucketRow>,
    /// Spearman rank correlation between bucket index and bucket accuracy.
    pub spearman: f64,
    /// True when the correlation is undefined (all accuracies tied) and
    /// reported as 0.
    pub degenerate: bool,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Sorts records by entropy ascending, splits them into `n_buckets` contiguous
/// near-equal groups (remainder spread over the earlier buckets), and reports
/// mean entropy plus Top-1 accuracy per bucket.
pub fn entropy_buckets(records: &[UncertaintyRecord], n_buckets: usize) -> Result<BucketTable> {
    if n_buckets == 0 || records.len() < n_buckets {
        return Err(Error::Contract(format!(
            "need at least {n_buckets} records for {n_buckets} buckets, have {}",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .entropy
            .partial_cmp(&records[b].entropy)
            .expect("finite entropies")
            .then(records[a].sample_id.cmp(&records[b].sample_id))
    });
    let base = records.len() / n_buckets;
    let remainder = records.len() % n_buckets;
    let mut rows = Vec::with_capacity(n_buckets);
    let mut cursor = 0usize;
    for bucket in 0..n_buckets {
        let size = base + usize::from(bucket < remainder);
        let members = &order[cursor..cursor + size];
        cursor += size;
        let mean_entropy =
            members.iter().map(|&i| records[i].entropy).sum::<f64>() / size as f64;
        let hits = members.iter().filter(|&&i| records[i].accurate()).count();
        rows.push(BucketRow { bucket, mean_entropy, accuracy: hits as f64 / size as f64, size });
    }
    let idx: Vec<f64> = (0..n_buckets).map(|b| b as f64).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let (spearman, degenerate) = match pearson(&average_ranks(&idx), &average_ranks(&acc)) {
        Some(r) => (r, false),
        None => (0.0, true),
    };
    Ok(BucketTable { rows, spearman, degenerate })
}

// ---- report CSVs ----

pub fn write_probe_csv(path: &Path, result: &ProbeResult) -> Result<()> {
    let mut out = String::from("split,accuracy\n");
    out.push_str(&format!("train,{}\n", result.train_accuracy));
    out.push_str(&format!("test,{}\n", result.test_accuracy));
    fs::write(path, out)?;
    Ok(())
}

pub fn write_uncertainty_csv(path: &Path, records: &[UncertaintyRecord]) -> Result<()> {
    let mut out = String::from("sample_id,entropy,pred,label,certain\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sample_id, r.entropy, r.pred, r.label, r.certain
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_pavpu_csv(path: &Path, rows: &[(usize, PavpuCounts)]) -> Result<()> {
    let mut out = String::from("M,n_ac,n_au,n_ic,n_iu,pavpu,top1\n");
    for (m, c) in rows {
        out.push_str(&format!(
            "{m},{},{},{},{},{},{}\n",
            c.n_ac,
            c.n_au,
            c.n_ic,
            c.n_iu,
            c.pavpu(),
            c.top1()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_buckets_csv(path: &Path, table: &BucketTable) -> Result<()> {
    let mut out = String::from("bucket,mean_entropy,accuracy\n");
    for r in &table.rows {
        out.push_str(&format!("{},{},{}\n", r.bucket, r.mean_entropy, r.accuracy));
    }
    out.push_str(&format!("spearman,{},{}\n", table.spearman, table.degenerate));
    fs::write(path, out)?;
    Ok(())
}

pub fn write_sepin_csv(path: &Path, result: &SepinResult) -> Result<()> {
    let mut out = String::from("dim,mi_estimate\n");
    for (dim, mi) in result.per_dim.iter().enumerate() {
        out.push_str(&format!("{dim},{mi}\n"));
    }
    out.push_str(&format!("sepin@{},{}\n", result.k, result.sepin_at_k));
    fs::write(path, out)?;
    Ok(())
}
