//! Deterministic seeded training loop.
//!
//! One PCG32 stream drives weight init, batch sampling, and reparameterization
//! noise, so a `(config, world, seed)` triple fixes every byte of the
//! checkpoint and loss trace. Besides the MLP encoder there is a free
//! embedding-table mode (one trainable row per augmented sample, trained
//! full-batch on the exact population loss) that tests the spectral/MF
//! equivalence without encoder confounds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augraph::{build_cooccurrence, AugmentationWorld};
use crate::autodiff::Tape;
use crate::encoder::{
    write_checkpoint, Checkpoint, EncoderModel, ForwardMode, HeadKind,
};
use crate::error::{Error, Result};
use crate::losses::{
    cfa_loss_on, cnfa_loss_on, info_nce_on, spectral_loss_on, LossParts, LossValue, PairBatch,
    PairNoise, population_spectral_loss_on,
};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[serde(rename = "infonce")]
    InfoNce,
    Spectral,
    Cfa,
    Cnfa,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(LossKind::InfoNce),
            "spectral" => Ok(LossKind::Spectral),
            "cfa" => Ok(LossKind::Cfa),
            "cnfa" => Ok(LossKind::Cnfa),
            other => Err(Error::Parse(format!("unknown loss kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Table,
}

/// Flat training configuration; the JSON config file mirrors these fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub beta_kl: f64,
    pub seed: u64,
    pub deterministic_mode: bool,
    pub latent_dim: usize,
    /// Hidden widths plus feature width; the world's feature dim is prepended.
    pub arch: Vec<usize>,
    pub model_kind: ModelKind,
    pub per_dim_scale: bool,
    pub strict_relu_scale: bool,
    pub temperature: f64,
    pub mc_samples: usize,
    pub cosine_lr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: LossKind::Spectral,
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            beta_kl: 1.0,
            seed: 0,
            deterministic_mode: false,
            latent_dim: 16,
            arch: vec![128, 128, 64],
            model_kind: ModelKind::Mlp,
            per_dim_scale: false,
            strict_relu_scale: false,
            temperature: 0.5,
            mc_samples: 1,
            cosine_lr: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Contract("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Contract("batch_size must be at least 2".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Contract("learning_rate must be positive".into()));
        }
        if self.beta_kl < 0.0 {
            return Err(Error::Contract("beta_kl must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Contract("adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Contract("adam_eps must be positive".into()));
        }
        if self.latent_dim < 1 {
            return Err(Error::Contract("latent_dim must be at least 1".into()));
        }
        if self.mc_samples < 1 {
            return Err(Error::Contract("mc_samples must be at least 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Contract("temperature must be positive".into()));
        }
        if self.model_kind == ModelKind::Mlp && self.arch.is_empty() {
            return Err(Error::Contract("mlp model needs a non-empty arch".into()));
        }
        if self.model_kind == ModelKind::Table && self.loss_kind != LossKind::Spectral {
            return Err(Error::Contract("table mode only trains the spectral loss".into()));
        }
        Ok(())
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.loss_kind {
            LossKind::Cfa => HeadKind::Gaussian,
            LossKind::Cnfa => HeadKind::Weibull,
            LossKind::InfoNce | LossKind::Spectral => HeadKind::Deterministic,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update over a named parameter list.
///
/// Aborts with a diagnostic naming the parameter on any non-finite gradient.
pub fn adam_step(
    params: &mut [(String, &mut Tensor<f64>)],
    grads: &[Tensor<f64>],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("adam_step parameter/gradient count mismatch".into()));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {name} at adam step {}",
                state.t + 1
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let corr1 = 1.0 - beta1.powi(t);
    let corr2 = 1.0 - beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, g) in grads[i].data().iter().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            p.data_mut()[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Draws B naturals by their probabilities, then two independent
/// augmentations per natural from its kernel row.
pub fn sample_pair_batch(
    world: &AugmentationWorld<f64>,
    batch_size: usize,
    rng: &mut Pcg32,
) -> PairBatch {
    let dim = world.feature_dim();
    let mut x = Tensor::zeros(vec![batch_size, dim]);
    let mut x_pos = Tensor::zeros(vec![batch_size, dim]);
    let mut natural_ids = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let nat = rng.choose_weighted(&world.natural_probs);
        let row = world.kernel.row(nat);
        let a = rng.choose_weighted(row);
        let b = rng.choose_weighted(row);
        for j in 0..dim {
            x.set2(i, j, world.features.at2(a, j));
            x_pos.set2(i, j, world.features.at2(b, j));
        }
        natural_ids.push(nat);
    }
    PairBatch { x, x_pos, natural_ids }
}

/// Trained weights, in memory.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Mlp(EncoderModel),
    Table(Tensor<f64>),
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub checkpoint_path: PathBuf,
    pub trace_path: PathBuf,
    pub final_loss: LossValue,
}

fn draw_noise(
    rng: &mut Pcg32,
    kind: LossKind,
    mc_samples: usize,
    b: usize,
    d: usize,
) -> PairNoise {
    let mut draws = Vec::with_capacity(mc_samples);
    for _ in 0..mc_samples {
        let pair = match kind {
            LossKind::Cfa => (
                Tensor::from_raw(vec![b, d], (0..b * d).map(|_| rng.normal()).collect()),
                Tensor::from_raw(vec![b, d], (0..b * d).map(|_| rng.normal()).collect()),
            ),
            LossKind::Cnfa => (
                Tensor::from_raw(vec![b, d], (0..b * d).map(|_| rng.uniform()).collect()),
                Tensor::from_raw(vec![b, d], (0..b * d).map(|_| rng.uniform()).collect()),
            ),
            _ => unreachable!("only variational losses draw noise"),
        };
        draws.push(pair);
    }
    draws
}

/// Runs `epochs × max(1, n_natural/B)` steps (table mode: one full-batch step
/// per epoch), writing `checkpoint.cfak` and `trace.csv` under `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    world: &AugmentationWorld<f64>,
    out_dir: &Path,
) -> Result<TrainOutput> {
    cfg.validate()?;
    world.validate()?;
    fs::create_dir_all(out_dir)?;

    let mut rng = Pcg32::new(cfg.seed);
    let mut trace = String::from("step,epoch,total,recon,kl\n");
    let mut last = LossValue { total: f64::NAN, recon_term: f64::NAN, kl_term: f64::NAN };

    let trained = match cfg.model_kind {
        ModelKind::Mlp => {
            let mut arch = Vec::with_capacity(cfg.arch.len() + 1);
            arch.push(world.feature_dim());
            arch.extend_from_slice(&cfg.arch);
            let mut model = EncoderModel::init(
                &arch,
                cfg.head_kind(),
                cfg.latent_dim,
                cfg.per_dim_scale,
                cfg.strict_relu_scale,
                &mut rng,
            )?;
            let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
            let mut adam = AdamState::new(&sizes);
            let steps_per_epoch = (world.n_natural() / cfg.batch_size).max(1);
            let total_steps = cfg.epochs * steps_per_epoch;
            let mut step = 0usize;
            for epoch in 1..=cfg.epochs {
                for _ in 0..steps_per_epoch {
                    step += 1;
                    let lr = if cfg.cosine_lr {
                        cfg.learning_rate
                            * 0.5
                            * (1.0 + (std::f64::consts::PI * (step - 1) as f64
                                / total_steps as f64)
                                .cos())
                    } else {
                        cfg.learning_rate
                    };
                    let batch = sample_pair_batch(world, cfg.batch_size, &mut rng);
                    let noise = match cfg.loss_kind {
                        LossKind::Cfa | LossKind::Cnfa if !cfg.deterministic_mode => draw_noise(
                            &mut rng,
                            cfg.loss_kind,
                            cfg.mc_samples,
                            cfg.batch_size,
                            cfg.latent_dim,
                        ),
                        _ => Vec::new(),
                    };

                    let mut tape = Tape::new();
                    let vars = model.register(&mut tape);
                    let parts = build_loss(&mut tape, &model, &vars, &batch, cfg, &noise)?;
                    last = parts.value(&tape);
                    tape.backward(parts.total)?;
                    let grads = model.collect_grads(&tape, &vars)?;
                    let mut params = model.params_mut();
                    adam_step(
                        &mut params,
                        &grads,
                        &mut adam,
                        lr,
                        cfg.adam_beta1,
                        cfg.adam_beta2,
                        cfg.adam_eps,
                    )?;
                    trace.push_str(&format!(
                        "{step},{epoch},{},{},{}\n",
                        last.total, last.recon_term, last.kl_term
                    ));
                }
            }
            TrainedModel::Mlp(model)
        }
        ModelKind::Table => {
            let cm = build_cooccurrence(world)?;
            let n = world.n_aug();
            let mut table = Tensor::from_raw(
                vec![n, cfg.latent_dim],
                (0..n * cfg.latent_dim).map(|_| 0.1 * rng.normal()).collect(),
            );
            let mut adam = AdamState::new(&[table.numel()]);
            for epoch in 1..=cfg.epochs {
                let lr = if cfg.cosine_lr {
                    cfg.learning_rate
                        * 0.5
                        * (1.0 + (std::f64::consts::PI * (epoch - 1) as f64 / cfg.epochs as f64)
                            .cos())
                } else {
                    cfg.learning_rate
                };
                let mut tape = Tape::new();
                let emb = tape.leaf(&table);
                let loss = population_spectral_loss_on(&mut tape, emb, &cm)?;
                last = LossValue {
                    total: tape.value(loss).data()[0],
                    recon_term: tape.value(loss).data()[0],
                    kl_term: 0.0,
                };
                tape.backward(loss)?;
                let grad = Tensor::from_raw(
                    table.shape().to_vec(),
                    tape.grad(emb).expect("leaf gradient").to_vec(),
                );
                let mut params = vec![("table".to_string(), &mut table)];
                adam_step(
                    &mut params,
                    &[grad],
                    &mut adam,
                    lr,
                    cfg.adam_beta1,
                    cfg.adam_beta2,
                    cfg.adam_eps,
                )?;
                trace.push_str(&format!(
                    "{epoch},{epoch},{},{},0\n",
                    last.total, last.recon_term
                ));
            }
            TrainedModel::Table(table)
        }
    };

    let cfg_json =
        serde_json::to_value(cfg).map_err(|e| Error::Parse(format!("config encode: {e}")))?;
    let ckpt = match &trained {
        TrainedModel::Mlp(model) => Checkpoint::from_model(model, cfg.seed, Some(cfg_json)),
        TrainedModel::Table(table) => Checkpoint::from_table(table, cfg.seed, Some(cfg_json)),
    };
    let checkpoint_path = out_dir.join("checkpoint.cfak");
    write_checkpoint(&checkpoint_path, &ckpt)?;
    let trace_path = out_dir.join("trace.csv");
    fs::write(&trace_path, trace)?;

    Ok(TrainOutput { model: trained, checkpoint_path, trace_path, final_loss: last })
}

fn build_loss(
    tape: &mut Tape<f64>,
    model: &EncoderModel,
    vars: &[crate::autodiff::Var],
    batch: &PairBatch,
    cfg: &TrainConfig,
    noise: &PairNoise,
) -> Result<LossParts> {
    match cfg.loss_kind {
        LossKind::Cfa => {
            cfa_loss_on(tape, model, vars, batch, cfg.beta_kl, noise, cfg.deterministic_mode)
        }
        LossKind::Cnfa => {
            cnfa_loss_on(tape, model, vars, batch, cfg.beta_kl, noise, cfg.deterministic_mode)
        }
        LossKind::Spectral | LossKind::InfoNce => {
            let x = tape.constant(&batch.x);
            let xp = tape.constant(&batch.x_pos);
            let h = model.encode_on(tape, vars, x)?;
            let hp = model.encode_on(tape, vars, xp)?;
            let outs = model.head_on(tape, vars, h)?;
            let outs_p = model.head_on(tape, vars, hp)?;
            let z = model.theta_on(tape, &outs, None, ForwardMode::Deterministic)?;
            let zp = model.theta_on(tape, &outs_p, None, ForwardMode::Deterministic)?;
            let total = if cfg.loss_kind == LossKind::Spectral {
                spectral_loss_on(tape, z, zp)?
            } else {
                info_nce_on(tape, z, zp, cfg.temperature)?
            };
            let kl = tape.scalar_const(0.0);
            Ok(LossParts { total, recon: total, kl })
        }
    }
}
