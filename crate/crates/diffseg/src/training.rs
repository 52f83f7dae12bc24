//! Training loop: noised-target construction, composite loss, AdamW with
//! linear warmup + cosine annealing, gradient clipping, checkpointing, and
//! periodic fused-inference validation.
//!
//! Every random draw is derived from (master seed, epoch), so a run resumed
//! from an epoch-boundary checkpoint is bit-identical to the uninterrupted
//! run.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_argmax, encode_one_hot, LabelVolume};
use crate::data::{augment, sample_patches, Patch, VolumeRecord};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::infer::{infer_volume, FusionMode, InferOptions};
use crate::losses::{total_loss_and_grad, LossReport};
use crate::metrics::dice_score;
use crate::model::{DiffUnet, ImageVolume, ModelConfig};
use crate::nn::params::{Grads, Params};
use crate::sliding::Blend;
use crate::Real;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Fraction of total epochs spent in linear warmup; in (0, 1).
    pub warmup_fraction: f64,
    /// Patches per optimizer step.
    pub batch_size: usize,
    /// Patches sampled per case per epoch.
    pub patches_per_case: usize,
    pub patch_size: [usize; 3],
    pub fg_bias: f64,
    pub augment: bool,
    pub grad_clip: f64,
    pub seed: u64,
    /// Diffusion timesteps T.
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Validate every this many epochs (also at the final epoch).
    pub val_interval: usize,
    /// DDIM steps K during validation.
    pub val_ddim_steps: usize,
    /// Stochastic trajectories S during validation.
    pub val_samples: usize,
    /// Train with the feature encoder fused in; false trains the
    /// zero-fusion ("basic") ablation arm.
    pub use_fe: bool,
    /// Stop once train and val Dice both exceed these, checked at
    /// validation time. Zero disables the corresponding bound.
    pub stop_train_dice: f64,
    pub stop_val_dice: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 1e-3,
            weight_decay: 1e-5,
            warmup_fraction: 0.1,
            batch_size: 2,
            patches_per_case: 2,
            patch_size: [32, 32, 32],
            fg_bias: 0.5,
            augment: true,
            grad_clip: 1.0,
            seed: 0,
            total_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            val_interval: 10,
            val_ddim_steps: 10,
            val_samples: 4,
            use_fe: true,
            stop_train_dice: 0.0,
            stop_val_dice: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in (0,1), got {}",
                self.warmup_fraction
            )));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_case == 0 {
            return Err(Error::Config(
                "epochs, batch_size, patches_per_case must be >= 1".into(),
            ));
        }
        if self.val_interval == 0 {
            return Err(Error::Config("val_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear ramp to `base_lr` over `[0, warmup]`, then cosine annealing to 0.
pub fn lr_at(progress: f64, cfg: &TrainConfig) -> f64 {
    debug_assert!((0.0..=1.0).contains(&progress));
    let w = cfg.warmup_fraction;
    if progress < w {
        cfg.base_lr * progress / w
    } else {
        let p = (progress - w) / (1.0 - w);
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    m: Vec<ArrayD<Real>>,
    v: Vec<ArrayD<Real>>,
}

impl AdamW {
    pub fn new(params: &Params<Real>, weight_decay: f64) -> Self {
        let m = params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        let v = params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn apply(&mut self, params: &mut Params<Real>, grads: &Grads<Real>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as Real, self.beta2 as Real);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            let p = params.get_mut(id);
            let lr_r = lr as Real;
            let wd = (lr * self.weight_decay) as Real;
            let (bc1, bc2, eps) = (bc1 as Real, bc2 as Real, self.eps as Real);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= lr_r * m_hat / (v_hat.sqrt() + eps) + wd * *p;
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Single optimization step

pub struct StepOutcome {
    pub report: LossReport,
    /// True when the gradient norm exceeded the clip threshold.
    pub clipped: bool,
    pub grad_norm: f64,
}

/// One optimizer update over a batch of aligned image/label patches.
/// Timestep and noise are drawn per sample from `rng`.
pub fn train_step(
    model: &mut DiffUnet<Real>,
    opt: &mut AdamW,
    batch: &[Patch],
    sched: &NoiseSchedule<Real>,
    lr: f64,
    grad_clip: f64,
    step: usize,
    with_fe: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Empty("empty training batch".into()));
    }
    let n = model.config.num_classes;
    let mut grads = Grads::for_params(&model.params);
    let mut agg = LossReport {
        dice: 0.0,
        bce: 0.0,
        mse: 0.0,
        total: 0.0,
    };
    let inv = 1.0 / batch.len() as f64;
    for patch in batch {
        let labels = LabelVolume::with_unit_spacing(patch.labels.clone());
        let x0 = encode_one_hot::<Real>(&labels, n)?;
        let t = rng.gen_range(0..sched.total_steps);
        let mut eps = ndarray::Array4::<Real>::zeros(x0.data.raw_dim());
        eps.mapv_inplace(|_| crate::Scalar::standard_normal(rng));
        let x_t = q_sample(x0.data.view(), t, eps.view(), sched)?;
        let image = ImageVolume::new(patch.image.clone(), [1.0; 3]);
        let (pred, cache) = model.forward_with_cache(&image, x_t.view(), t, with_fe)?;
        let (report, mut d_pred) = total_loss_and_grad(pred.view(), x0.data.view())?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                report: format!("{report:?} at t={t}"),
            });
        }
        d_pred.mapv_inplace(|g| g * inv as Real);
        model.backward(&cache, d_pred.view(), &mut grads)?;
        agg.dice += report.dice * inv;
        agg.bce += report.bce * inv;
        agg.mse += report.mse * inv;
        agg.total += report.total * inv;
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            report: format!("gradient norm {norm} with loss {agg:?}"),
        });
    }
    let clipped = norm > grad_clip;
    if clipped {
        grads.scale((grad_clip / norm) as Real);
    }
    opt.apply(&mut model.params, &grads, lr);
    Ok(StepOutcome {
        report: agg,
        clipped,
        grad_norm: norm,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epochs fully completed when this checkpoint was written.
    pub epoch: usize,
    pub global_step: usize,
    pub opt_step: usize,
    pub rng_seed: u64,
    pub best_val_dice: Option<f64>,
    params: Vec<ParamEntry>,
}

fn flatten(arrays: &[&ArrayD<Real>], out: &mut Vec<u8>) {
    for a in arrays {
        for v in a.as_standard_layout().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize model weights plus optimizer moments (JSON header, raw
/// little-endian f32 payload: params, then Adam m, then Adam v).
pub fn save_checkpoint(
    path: &Path,
    model: &DiffUnet<Real>,
    opt: &AdamW,
    train: &TrainConfig,
    epoch: usize,
    global_step: usize,
    best_val_dice: Option<f64>,
) -> Result<()> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        train: train.clone(),
        epoch,
        global_step,
        opt_step: opt.step,
        rng_seed: train.seed,
        best_val_dice,
        params: model
            .params
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.to_string(),
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let json =
        serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(json.as_bytes());
    let param_refs: Vec<&ArrayD<Real>> = model.params.iter().map(|(_, p)| p).collect();
    flatten(&param_refs, &mut bytes);
    flatten(&opt.m.iter().collect::<Vec<_>>(), &mut bytes);
    flatten(&opt.v.iter().collect::<Vec<_>>(), &mut bytes);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn take_arrays(
    entries: &[ParamEntry],
    payload: &[u8],
    offset: &mut usize,
) -> Result<Vec<ArrayD<Real>>> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let len: usize = e.shape.iter().product();
        let bytes = payload
            .get(*offset..*offset + len * 4)
            .ok_or_else(|| Error::Checkpoint("payload truncated".into()))?;
        let vals: Vec<Real> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *offset += len * 4;
        out.push(
            ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    Ok(out)
}

pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub model: DiffUnet<Real>,
    pub opt: AdamW,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file too short for header length".into()));
    }
    let json_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let json = bytes
        .get(8..8 + json_len)
        .ok_or_else(|| Error::Checkpoint("header length exceeds file".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload = &bytes[8 + json_len..];

    let mut model = DiffUnet::<Real>::new(header.model.clone(), 0)?;
    // the architecture must register exactly the names the header lists
    let expected: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
    let listed: Vec<&str> = header.params.iter().map(|e| e.name.as_str()).collect();
    if expected != listed {
        return Err(Error::Checkpoint(format!(
            "parameter set mismatch: checkpoint has {} entries, model has {}",
            listed.len(),
            expected.len()
        )));
    }
    let mut offset = 0usize;
    let params = take_arrays(&header.params, payload, &mut offset)?;
    let m = take_arrays(&header.params, payload, &mut offset)?;
    let v = take_arrays(&header.params, payload, &mut offset)?;
    if offset != payload.len() {
        return Err(Error::Checkpoint(format!(
            "trailing bytes: payload {} vs consumed {offset}",
            payload.len()
        )));
    }
    for (e, value) in header.params.iter().zip(params) {
        model.params.set_by_name(&e.name, value)?;
    }
    let mut opt = AdamW::new(&model.params, header.train.weight_decay);
    opt.step = header.opt_step;
    opt.m = m;
    opt.v = v;
    Ok(LoadedCheckpoint { header, model, opt })
}

// ---------------------------------------------------------------------------
// Validation

/// Mean Dice over the foreground classes of one case, argmax decode.
pub fn case_dice(pred_labels: &ndarray::Array3<u8>, gt: &LabelVolume, num_classes: usize) -> f64 {
    let mut sum = 0.0;
    let fg = num_classes - 1;
    for k in 1..num_classes as u8 {
        let p = pred_labels.map(|&v| v == k);
        let g = gt.data.map(|&v| v == k);
        sum += dice_score(p.view(), g.view()).expect("aligned shapes");
    }
    sum / fg as f64
}

/// Fused-inference Dice averaged over cases.
pub fn evaluate_records(
    model: &DiffUnet<Real>,
    records: &[VolumeRecord],
    sched: &NoiseSchedule<Real>,
    opts: &InferOptions,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no cases to evaluate".into()));
    }
    let mut sum = 0.0;
    for rec in records {
        let pred = infer_volume(model, &rec.image, sched, opts)?;
        let labels = decode_argmax(pred.view());
        sum += case_dice(&labels, &rec.labels, model.config.num_classes);
    }
    Ok(sum / records.len() as f64)
}

// ---------------------------------------------------------------------------
// Fit

#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub dice: f64,
    pub bce: f64,
    pub mse: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dice: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub best_val_dice: Option<f64>,
    pub last_val_dice: Option<f64>,
    pub last_train_dice: Option<f64>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// Stable seed derivation for per-(epoch, stream) RNGs.
fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over a fixed combination
    let mut z = master
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn epoch_patches(
    train: &[VolumeRecord],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Patch>> {
    let mut patches = Vec::with_capacity(train.len() * cfg.patches_per_case);
    for (ci, rec) in train.iter().enumerate() {
        let seed = derive_seed(cfg.seed, epoch as u64, ci as u64);
        let drawn = sample_patches(rec, cfg.patch_size, cfg.patches_per_case, seed, cfg.fg_bias)?;
        for (pi, p) in drawn.into_iter().enumerate() {
            patches.push(if cfg.augment {
                augment(&p, derive_seed(cfg.seed, epoch as u64, (ci * 1001 + pi) as u64 + 1_000_003))
            } else {
                p
            });
        }
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX));
    patches.shuffle(&mut order_rng);
    Ok(patches)
}

/// Where a training run picks up and (optionally) pauses. The learning-rate
/// schedule always spans `cfg.epochs`, so a run split across sessions is
/// identical to an uninterrupted one.
#[derive(Debug, Clone, Default)]
pub struct FitSession {
    /// Epochs already completed (from a checkpoint header).
    pub start_epoch: usize,
    /// Pause after this epoch count instead of `cfg.epochs`.
    pub end_epoch: Option<usize>,
    pub global_step: usize,
    pub best_val_dice: Option<f64>,
}

impl FitSession {
    pub fn resume(header: &CheckpointHeader) -> Self {
        FitSession {
            start_epoch: header.epoch,
            end_epoch: None,
            global_step: header.global_step,
            best_val_dice: header.best_val_dice,
        }
    }
}

/// Train `model` on the given records, validating periodically with fused
/// inference and persisting `best.ckpt` / `last.ckpt` under `out_dir`.
pub fn fit(
    model: &mut DiffUnet<Real>,
    opt: &mut AdamW,
    train: &[VolumeRecord],
    val: &[VolumeRecord],
    cfg: &TrainConfig,
    out_dir: &Path,
    session: FitSession,
) -> Result<FitReport> {
    let mut global_step = session.global_step;
    let mut best_val_dice = session.best_val_dice;
    let start_epoch = session.start_epoch;
    let end_epoch = session.end_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let sched = NoiseSchedule::<Real>::linear(cfg.total_steps, cfg.beta_start, cfg.beta_end)?;
    let val_opts = InferOptions {
        ddim_steps: cfg.val_ddim_steps,
        eta: 0.0,
        num_samples: cfg.val_samples,
        fusion: FusionMode::Suf,
        use_fe: cfg.use_fe,
        patch_size: cfg.patch_size,
        overlap: 0.5,
        blend: Blend::Gaussian,
        seed: derive_seed(cfg.seed, 0x5EED, 0),
    };

    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let mut final_loss = f64::NAN;
    let mut last_val = None;
    let mut last_train_dice = None;
    let mut epochs_run = start_epoch;

    for epoch in start_epoch..end_epoch {
        let lr = lr_at(epoch as f64 / cfg.epochs as f64, cfg);
        let patches = epoch_patches(train, cfg, epoch)?;
        let mut step_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0xABCD));
        for batch in patches.chunks(cfg.batch_size) {
            let outcome = train_step(
                model,
                opt,
                batch,
                &sched,
                lr,
                cfg.grad_clip,
                global_step,
                cfg.use_fe,
                &mut step_rng,
            )?;
            global_step += 1;
            final_loss = outcome.report.total;
            let rec = LogRecord {
                epoch,
                step: global_step,
                lr,
                dice: outcome.report.dice,
                bce: outcome.report.bce,
                mse: outcome.report.mse,
                total: outcome.report.total,
                grad_norm: outcome.grad_norm,
                clipped: outcome.clipped,
                val_dice: None,
                train_dice: None,
            };
            writeln!(log, "{}", serde_json::to_string(&rec).unwrap())
                .map_err(|e| Error::io(&log_path, e))?;
        }
        epochs_run = epoch + 1;

        let is_last = epoch + 1 == end_epoch;
        if (epoch + 1) % cfg.val_interval == 0 || is_last {
            let val_dice = if val.is_empty() {
                None
            } else {
                Some(evaluate_records(model, val, &sched, &val_opts)?)
            };
            let train_dice = Some(evaluate_records(model, train, &sched, &val_opts)?);
            last_val = val_dice;
            last_train_dice = train_dice;
            let rec = LogRecord {
                epoch,
                step: global_step,
                lr,
                dice: 0.0,
                bce: 0.0,
                mse: 0.0,
                total: final_loss,
                grad_norm: 0.0,
                clipped: false,
                val_dice,
                train_dice,
            };
            writeln!(log, "{}", serde_json::to_string(&rec).unwrap())
                .map_err(|e| Error::io(&log_path, e))?;

            let score = val_dice.or(train_dice);
            if let Some(s) = score {
                if best_val_dice.map_or(true, |b| s > b) {
                    best_val_dice = Some(s);
                    save_checkpoint(
                        &best_path,
                        model,
                        opt,
                        cfg,
                        epoch + 1,
                        global_step,
                        best_val_dice,
                    )?;
                }
            }
            save_checkpoint(&last_path, model, opt, cfg, epoch + 1, global_step, best_val_dice)?;

            let train_ok =
                cfg.stop_train_dice <= 0.0 || train_dice.map_or(false, |d| d > cfg.stop_train_dice);
            let val_ok =
                cfg.stop_val_dice <= 0.0 || val_dice.map_or(false, |d| d > cfg.stop_val_dice);
            if (cfg.stop_train_dice > 0.0 || cfg.stop_val_dice > 0.0) && train_ok && val_ok {
                break;
            }
        } else {
            save_checkpoint(&last_path, model, opt, cfg, epoch + 1, global_step, best_val_dice)?;
        }
    }
    if !best_path.exists() {
        save_checkpoint(&best_path, model, opt, cfg, epochs_run, global_step, best_val_dice)?;
    }
    Ok(FitReport {
        epochs_run,
        final_loss,
        best_val_dice,
        last_val_dice: last_val,
        last_train_dice,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}
