// Scratch harness for tuning acceptance-run hyperparameters. Not shipped.

use cfa_core::datagen;
use cfa_core::evalsuite::{
    entropy_scores, extract_features, entropy_buckets, linear_probe, pavpu, sepin_at_k,
    CriticCfg, ProbeCfg, Split, UncertaintyRecord,
};
use cfa_core::trainer::{train, LossKind, ModelKind, TrainConfig, TrainedModel};

fn probe_acc(
    model: &cfa_core::encoder::EncoderModel,
    world: &cfa_core::AugmentationWorld,
    frac: f64,
    seed: u64,
) -> f64 {
    let feats = extract_features(model, world).unwrap();
    let split = Split::stratified(&world.labels, frac, seed).unwrap();
    linear_probe(&feats, &world.labels, &split, &ProbeCfg::default()).unwrap().test_accuracy
}

fn main() {
    let t0 = std::time::Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let what = args.get(1).map(String::as_str).unwrap_or("quality");
    let beta: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    match what {
        "quality" => {
            for seed in [1u64, 2, 3] {
                let world = datagen::make_cluster_world(&datagen::reference_cluster_config(seed))
                    .unwrap();
                // Raw-feature probe as a sanity reference.
                let split = Split::stratified(&world.labels, 0.8, seed).unwrap();
                let raw = linear_probe(&world.features, &world.labels, &split, &ProbeCfg::default())
                    .unwrap()
                    .test_accuracy;
                println!("seed {seed}: raw-feature probe {raw:.4} ({:?})", t0.elapsed());

                for (name, kind) in [
                    ("spectral", LossKind::Spectral),
                    ("cfa", LossKind::Cfa),
                    ("cnfa", LossKind::Cnfa),
                ] {
                    let cfg = TrainConfig {
                        loss_kind: kind,
                        epochs,
                        beta_kl: beta,
                        seed,
                        ..TrainConfig::default()
                    };
                    let dir = tempfile::tempdir().unwrap();
                    let out = train(&cfg, &world, dir.path()).unwrap();
                    let TrainedModel::Mlp(model) = out.model else { panic!() };
                    let acc = probe_acc(&model, &world, 0.8, seed);
                    println!(
                        "seed {seed} {name}: probe {acc:.4} final loss {:+.4} (recon {:+.4} kl {:.4}) [{:?}]",
                        out.final_loss.total, out.final_loss.recon_term, out.final_loss.kl_term,
                        t0.elapsed()
                    );
                }
            }
        }
        "uncertainty" | "uncertainty_cfa" => {
            let kind = if what == "uncertainty_cfa" { LossKind::Cfa } else { LossKind::Cnfa };
            for seed in [1u64, 2, 3] {
                let world = datagen::make_cluster_world(
                    &datagen::reference_heteroscedastic_config(seed),
                )
                .unwrap();
                let cfg = TrainConfig {
                    loss_kind: kind,
                    epochs,
                    beta_kl: beta,
                    learning_rate: lr,
                    seed,
                    ..TrainConfig::default()
                };
                let dir = tempfile::tempdir().unwrap();
                let out = train(&cfg, &world, dir.path()).unwrap();
                let TrainedModel::Mlp(model) = out.model else { panic!() };
                let feats = extract_features(&model, &world).unwrap();
                let split = Split::stratified(&world.labels, 0.5, seed).unwrap();
                let probe =
                    linear_probe(&feats, &world.labels, &split, &ProbeCfg::default()).unwrap();
                let entropies = entropy_scores(&model, &world).unwrap();
                let mut records: Vec<UncertaintyRecord> = split
                    .test_idx
                    .iter()
                    .zip(&probe.test_preds)
                    .map(|(&i, &p)| UncertaintyRecord {
                        sample_id: i,
                        entropy: entropies[i],
                        pred: p,
                        label: world.labels[i],
                        certain: false,
                    })
                    .collect();
                print!(
                    "seed {seed}: top1 {:.4} | pavpu:",
                    probe.test_accuracy
                );
                for m in [32usize, 64, 128] {
                    let (_, score) = pavpu(&mut records, m).unwrap();
                    print!(" @{m}={score:.4}");
                }
                let table = entropy_buckets(&records, 5).unwrap();
                println!(" | spearman {:.3} (buckets: {:?}) [{:?}]",
                    table.spearman,
                    table.rows.iter().map(|r| (r.accuracy * 100.0).round() / 100.0).collect::<Vec<_>>(),
                    t0.elapsed()
                );
                // Per-class diagnostics: is entropy tracking the noisy classes?
                let mut per_class = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); 8];
                for x in 0..world.n_aug() {
                    let (scale_param, spread_param) =
                        match model.posterior(world.features.row(x)).unwrap() {
                            cfa_core::encoder::Posterior::Weibull(p) => (
                                p.k()[0],
                                p.lam().iter().sum::<f64>() / p.lam().len() as f64,
                            ),
                            cfa_core::encoder::Posterior::Gaussian(p) => (
                                p.sigma2()[0],
                                p.mu().iter().map(|m| m * m).sum::<f64>().sqrt(),
                            ),
                            _ => panic!(),
                        };
                    let c = world.labels[x];
                    per_class[c].0 += entropies[x];
                    per_class[c].1 += scale_param;
                    per_class[c].2 += spread_param;
                    per_class[c].3 += 1;
                }
                for (c, (h, k, lam, n)) in per_class.iter().enumerate() {
                    let n = *n as f64;
                    println!(
                        "  class {c} ({}): H {:.3} k {:.3} lam {:.3}",
                        if c % 2 == 1 { "noisy" } else { "clean" },
                        h / n,
                        k / n,
                        lam / n
                    );
                }
            }
        }
        "sepin" => {
            for seed in [1u64, 2, 3] {
                let (world, _) = datagen::make_factor_world(4, 2, 32, seed).unwrap();
                let mut line = format!("seed {seed}:");
                for (name, kind) in [("cfa", LossKind::Cfa), ("cnfa", LossKind::Cnfa)] {
                    let cfg = TrainConfig {
                        loss_kind: kind,
                        epochs,
                        beta_kl: beta,
                        latent_dim: 8,
                        arch: vec![64, 32],
                        batch_size: 16,
                        seed,
                        ..TrainConfig::default()
                    };
                    let dir = tempfile::tempdir().unwrap();
                    let out = train(&cfg, &world, dir.path()).unwrap();
                    let TrainedModel::Mlp(model) = out.model else { panic!() };
                    let feats = extract_features(&model, &world).unwrap();
                    let critic = CriticCfg { seed, ..CriticCfg::default() };
                    let result = sepin_at_k(&feats, &world.features, 4, &critic).unwrap();
                    line.push_str(&format!(
                        " {name}: sepin@4 {:.4} full_mi {:.3} per_dim {:?}",
                        result.sepin_at_k,
                        result.full_mi,
                        result
                            .per_dim
                            .iter()
                            .map(|v| (v * 1000.0).round() / 1000.0)
                            .collect::<Vec<_>>()
                    ));
                }
                println!("{line} [{:?}]", t0.elapsed());
            }
        }
        "table" => {
            for seed in [1u64, 2, 3] {
                let world = datagen::make_random_world(8, 32, 4, seed).unwrap();
                let cm = cfa_core::augraph::build_cooccurrence(&world).unwrap();
                let opt = cfa_core::augraph::mf_residual(
                    &cm,
                    &cfa_core::augraph::spectral_embedding(&cm, 8).unwrap(),
                )
                .unwrap();
                let cfg = TrainConfig {
                    loss_kind: LossKind::Spectral,
                    model_kind: ModelKind::Table,
                    epochs,
                    learning_rate: beta, // reuse arg slot as lr
                    latent_dim: 8,
                    seed,
                    ..TrainConfig::default()
                };
                let dir = tempfile::tempdir().unwrap();
                let out = train(&cfg, &world, dir.path()).unwrap();
                let TrainedModel::Table(table) = out.model else { panic!() };
                let mut f = table.clone();
                for x in 0..32 {
                    for j in 0..8 {
                        let v = f.at2(x, j) * cm.d_marg[x].sqrt();
                        f.set2(x, j, v);
                    }
                }
                let reached = cfa_core::augraph::mf_residual(&cm, &f).unwrap();
                println!(
                    "seed {seed}: optimum {opt:.6} reached {reached:.6} ratio {:.4} [{:?}]",
                    reached / opt,
                    t0.elapsed()
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
