//! Training loop: Adam updates, reconstruction-only warm-up epochs, then
//! alternating discriminator/generator steps, with per-step CSV logging and
//! per-epoch checkpoints. Fully deterministic for a given seed, including
//! across a checkpoint/resume boundary.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::checkpoint::{Checkpoint, CheckpointError, OptimizerState};
use crate::data::{DataError, PairedDataset};
use crate::loss::{
    g_adv_loss, overall_loss, perceptual_loss, rec_loss, transferal_perceptual_loss,
    FeatureExtractorPlug, LossWeights,
};
use crate::network::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{seeded, Rng, Stream};
use crate::tensor::conv::PoolKind;
use crate::tensor::ops;
use crate::tensor::resize::bicubic_resize;
use crate::tensor::{Element, Tensor, TensorError};
use crate::transformer::Scale;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("non-finite loss at step {step}; state dumped to {dump}")]
    NonFiniteLoss { step: u64, dump: PathBuf },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub adam: AdamConfig,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// LR patch extent; the HR/Ref patch extent is fixed at 4x this.
    pub lr_patch: usize,
    /// Random flip/rotation augmentation of each pair. On for real training;
    /// off makes overfitting tests and ablations target the raw pairs.
    pub augment: bool,
    /// Per-epoch learning-rate multiplier (1.0 = constant). Epoch `e` runs at
    /// `lr * lr_decay^e` for both optimizers.
    pub lr_decay: f64,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub disc_base_channels: usize,
    /// discriminator steps per generator step after warm-up
    pub d_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            adam: AdamConfig::default(),
            warmup_epochs: 2,
            total_epochs: 5,
            batch_size: 4,
            lr_patch: 16,
            augment: true,
            lr_decay: 1.0,
            weights: LossWeights::default(),
            generator: GeneratorConfig::tiny(),
            disc_base_channels: 8,
            d_steps: 1,
        }
    }
}

impl TrainConfig {
    /// Paper-scale settings (slow on CPU; the default is the toy profile).
    pub fn full() -> Self {
        TrainConfig {
            warmup_epochs: 2,
            total_epochs: 52,
            batch_size: 9,
            lr_patch: 40,
            generator: GeneratorConfig::default(),
            disc_base_channels: 32,
            ..TrainConfig::default()
        }
    }

    pub fn hr_patch(&self) -> usize {
        self.lr_patch * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs < self.warmup_epochs {
            return Err(TrainError::Config(format!(
                "total_epochs {} < warmup_epochs {}",
                self.total_epochs, self.warmup_epochs
            )));
        }
        if self.batch_size == 0 || self.lr_patch == 0 {
            return Err(TrainError::Config("batch_size and lr_patch must be positive".into()));
        }
        if self.hr_patch() % 32 != 0 {
            return Err(TrainError::Config(format!(
                "HR patch extent {} must divide by 32 for the discriminator",
                self.hr_patch()
            )));
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file; `#` starts a comment. Unknown
    /// keys are rejected. See the README for the key list.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|msg| {
                TrainError::Config(format!("{}:{}: {}", path.display(), lineno + 1, msg))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad numeric value `{v}`"))
        }
        fn boolean(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(format!("bad boolean `{v}`")),
            }
        }
        match key {
            "seed" => self.seed = num(value)?,
            "lr" => self.adam.lr = num(value)?,
            "beta1" => self.adam.beta1 = num(value)?,
            "beta2" => self.adam.beta2 = num(value)?,
            "eps_adam" => self.adam.eps = num(value)?,
            "warmup_epochs" => self.warmup_epochs = num(value)?,
            "total_epochs" => self.total_epochs = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "lr_patch" => self.lr_patch = num(value)?,
            "w_rec" => self.weights.rec = num(value)?,
            "w_adv" => self.weights.adv = num(value)?,
            "w_per" => self.weights.per = num(value)?,
            "w_gp" => self.weights.gp = num(value)?,
            "base_channels" => self.generator.base_channels = num(value)?,
            "blocks" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num(p.trim()))
                    .collect::<std::result::Result<_, _>>()?;
                self.generator.blocks = parts
                    .try_into()
                    .map_err(|_| "blocks needs exactly 4 comma-separated counts".to_string())?;
            }
            "csfi" => self.generator.csfi = boolean(value)?,
            "augment" => self.augment = boolean(value)?,
            "lr_decay" => self.lr_decay = num(value)?,
            "scales" => {
                let mut scales = Vec::new();
                if value != "none" {
                    for part in value.split(',') {
                        scales.push(match part.trim() {
                            "1" => Scale::X1,
                            "2" => Scale::X2,
                            "4" => Scale::X4,
                            other => return Err(format!("bad scale `{other}` (want 1, 2 or 4)")),
                        });
                    }
                }
                self.generator.scales = scales;
            }
            "pool" => {
                self.generator.pool = match value {
                    "average" => PoolKind::Average,
                    "max" => PoolKind::Max,
                    _ => return Err(format!("bad pool `{value}` (want average or max)")),
                }
            }
            "disc_base_channels" => self.disc_base_channels = num(value)?,
            "d_steps" => self.d_steps = num(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}

/// Flip/rotate draw applied to one training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    /// quarter turns, 0..=3
    pub rot: u8,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip_h: false,
        flip_v: false,
        rot: 0,
    };

    pub fn sample(rng: &mut Rng) -> AugmentDraw {
        AugmentDraw {
            flip_h: rng.random_range(0..2) == 1,
            flip_v: rng.random_range(0..2) == 1,
            rot: rng.random_range(0..4) as u8,
        }
    }
}

/// Horizontal flip of `[N, C, H, W]` (mirror along width).
pub fn flip_h<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let v = x.to_vec();
    let mut out = v.clone();
    for img in 0..v.len() / (h * w) {
        for y in 0..h {
            for xx in 0..w {
                out[img * h * w + y * w + xx] = v[img * h * w + y * w + (w - 1 - xx)];
            }
        }
    }
    Tensor::new(&s, out)
}

/// Vertical flip of `[N, C, H, W]` (mirror along height).
pub fn flip_v<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let v = x.to_vec();
    let mut out = v.clone();
    for img in 0..v.len() / (h * w) {
        for y in 0..h {
            let src = img * h * w + (h - 1 - y) * w;
            out[img * h * w + y * w..img * h * w + (y + 1) * w]
                .copy_from_slice(&v[src..src + w]);
        }
    }
    Tensor::new(&s, out)
}

/// Counter-clockwise quarter turn of square images.
pub fn rot90<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    if h != w {
        return Err(TensorError::Geometry {
            op: "rot90",
            msg: format!("rotation requires square patches, got {h}x{w}"),
        }
        .into());
    }
    let v = x.to_vec();
    let mut out = v.clone();
    for img in 0..v.len() / (h * w) {
        for y in 0..h {
            for xx in 0..w {
                // (y, x) <- (x, w-1-y)
                out[img * h * w + y * w + xx] = v[img * h * w + xx * w + (w - 1 - y)];
            }
        }
    }
    Ok(Tensor::new(&s, out))
}

/// Apply one draw to a tensor.
pub fn apply_augment<E: Element>(x: &Tensor<E>, draw: AugmentDraw) -> Result<Tensor<E>> {
    let mut y = x.clone();
    if draw.flip_h {
        y = flip_h(&y);
    }
    if draw.flip_v {
        y = flip_v(&y);
    }
    for _ in 0..draw.rot {
        y = rot90(&y)?;
    }
    Ok(y)
}

/// Augment an HR/Ref pair with one random draw (shared by both images) and
/// regenerate the LR patch from the augmented HR by bicubic 1/4 downscale.
/// Returns `(lr, hr, ref)`.
pub fn augment<E: Element>(
    hr: &Tensor<E>,
    reference: &Tensor<E>,
    rng: &mut Rng,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let draw = AugmentDraw::sample(rng);
    let hr_a = apply_augment(hr, draw)?;
    let ref_a = apply_augment(reference, draw)?;
    let lr = bicubic_resize(&hr_a, 0.25).map_err(TensorError::from)?;
    Ok((lr, hr_a, ref_a))
}

/// Stack `[1, C, H, W]` tensors into one `[N, C, H, W]` batch (plain data,
/// no gradient linkage to the parts).
pub fn stack_batch<E: Element>(parts: &[Tensor<E>]) -> Tensor<E> {
    let s = parts[0].shape().to_vec();
    let mut shape = s.clone();
    shape[0] = parts.len();
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in parts {
        assert_eq!(p.shape(), &s[..]);
        data.extend(p.to_vec());
    }
    Tensor::new(&shape, data)
}

/// Random square crop of extent `e` from a `[1, C, H, W]` tensor.
fn random_crop<E: Element>(x: &Tensor<E>, e: usize, rng: &mut Rng) -> Result<Tensor<E>> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    if h < e || w < e {
        return Err(TensorError::Geometry {
            op: "random_crop",
            msg: format!("patch {e} larger than image {h}x{w}"),
        }
        .into());
    }
    let oy = rng.random_range(0..=(h - e));
    let ox = rng.random_range(0..=(w - e));
    let v = x.to_vec();
    let mut out = vec![E::zero(); c * e * e];
    for ch in 0..c {
        for y in 0..e {
            let src = (ch * h + oy + y) * w + ox;
            out[(ch * e + y) * e..(ch * e + y + 1) * e].copy_from_slice(&v[src..src + e]);
        }
    }
    Ok(Tensor::new(&[1, c, e, e], out))
}

/// Serialized trainer progress: completed epochs plus every RNG stream.
#[derive(serde::Serialize, serde::Deserialize)]
struct TrainerRngState {
    epochs_done: usize,
    /// optimizer step counters; the two differ because of warm-up
    g_steps: u64,
    d_steps: u64,
    shuffle: Rng,
    augment: Rng,
    gp_mix: Rng,
    data: Rng,
}

/// One row of the loss log.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub l_rec: f64,
    pub l_adv: f64,
    pub l_per: f64,
    pub l_d: f64,
    pub gp: f64,
}

pub struct TrainReport {
    /// mean reconstruction L1 over the final epoch
    pub final_rec: f64,
    pub steps: u64,
    pub log_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_HEADER: &str = "step,epoch,l_rec,l_adv,l_per,l_d,gp";

fn fmt_row(r: &LogRow) -> String {
    format!(
        "{},{},{:.8},{:.8},{:.8},{:.8},{:.8}",
        r.step, r.epoch, r.l_rec, r.l_adv, r.l_per, r.l_d, r.gp
    )
}

/// Train on a paired dataset, writing `loss_log.csv` and per-epoch
/// checkpoints (`epoch_NNN.ckpt`) under `out_dir`. `resume` continues from a
/// checkpoint produced by the same config, appending to the existing log.
pub fn train(
    dataset: &PairedDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| TrainError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    let mut init_rng = seeded(cfg.seed, Stream::Init);
    let gen: Generator<f32> = Generator::new(cfg.generator.clone(), &mut init_rng);
    let disc: Discriminator<f32> = Discriminator::new(
        DiscriminatorConfig {
            input_extent: cfg.hr_patch(),
            base_channels: cfg.disc_base_channels,
        },
        &mut init_rng,
    );
    let plug = FeatureExtractorPlug::<f32>::frozen_random(cfg.seed ^ 0x70c5);

    let gen_params = gen.params();
    let disc_params = disc.params();
    let mut g_opt = Adam::new(gen_params.clone(), cfg.adam);
    let mut d_opt = Adam::new(disc_params.clone(), cfg.adam);

    let mut rngs = TrainerRngState {
        epochs_done: 0,
        g_steps: 0,
        d_steps: 0,
        shuffle: seeded(cfg.seed, Stream::Shuffle),
        augment: seeded(cfg.seed, Stream::Augment),
        gp_mix: seeded(cfg.seed, Stream::GpMix),
        data: seeded(cfg.seed, Stream::Data),
    };
    let mut step: u64 = 0;

    if let Some(ckpt_path) = resume {
        let ck = Checkpoint::load(ckpt_path)?;
        ck.load_into(&gen_params)?;
        ck.load_into(&disc_params)?;
        rngs = serde_json::from_str(&ck.rng_json).map_err(CheckpointError::Config)?;
        if let Some(opt) = &ck.optimizer {
            let ng = gen_params.len();
            g_opt.restore_state(rngs.g_steps, opt.m[..ng].to_vec(), opt.v[..ng].to_vec())?;
            d_opt.restore_state(rngs.d_steps, opt.m[ng..].to_vec(), opt.v[ng..].to_vec())?;
        }
        step = ck.step;
    }

    let log_path = out_dir.join("loss_log.csv");
    let mut log = if resume.is_some() && log_path.exists() {
        fs::read_to_string(&log_path).map_err(|e| TrainError::Io {
            path: log_path.clone(),
            source: e,
        })?
    } else {
        format!("{LOG_HEADER}\n")
    };

    let config_json = serde_json::to_string(cfg).map_err(CheckpointError::Config)?;
    let mut checkpoints = Vec::new();
    let mut final_rec = f64::NAN;

    let save = |g_opt: &Adam<f32>,
                d_opt: &Adam<f32>,
                rngs: &TrainerRngState,
                step: u64,
                path: &Path|
     -> Result<()> {
        let mut ck = Checkpoint::new(
            config_json.clone(),
            serde_json::to_string(rngs).map_err(CheckpointError::Config)?,
        );
        ck.insert_params(&gen_params);
        ck.insert_params(&disc_params);
        let (gs, gm, gv) = g_opt.state();
        let (_, dm, dv) = d_opt.state();
        let mut m = gm.to_vec();
        m.extend(dm.to_vec());
        let mut v = gv.to_vec();
        v.extend(dv.to_vec());
        ck.optimizer = Some(OptimizerState { step: gs, m, v });
        ck.step = step;
        ck.save(path)?;
        Ok(())
    };

    let start_epoch = rngs.epochs_done;
    for epoch in start_epoch..cfg.total_epochs {
        let warm_up = epoch < cfg.warmup_epochs;
        let epoch_lr = cfg.adam.lr * cfg.lr_decay.powi(epoch as i32);
        g_opt.config.lr = epoch_lr;
        d_opt.config.lr = epoch_lr;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rngs.shuffle);
        let mut epoch_rec_sum = 0.0;
        let mut epoch_rec_n = 0usize;

        for batch_ids in order.chunks(cfg.batch_size) {
            // assemble the batch: crop, augment, derive LR
            let mut lrs = Vec::new();
            let mut hrs = Vec::new();
            let mut refs = Vec::new();
            for &i in batch_ids {
                let pair = dataset.load_pair::<f32>(i)?;
                let hr = random_crop(&pair.hr, cfg.hr_patch(), &mut rngs.data)?;
                let rf = random_crop(&pair.reference, cfg.hr_patch(), &mut rngs.data)?;
                let (lr, hr, rf) = if cfg.augment {
                    augment(&hr, &rf, &mut rngs.augment)?
                } else {
                    let lr = bicubic_resize(&hr, 0.25).map_err(TensorError::from)?;
                    (lr, hr, rf)
                };
                lrs.push(lr);
                hrs.push(hr);
                refs.push(rf);
            }
            let lr = stack_batch(&lrs);
            let hr = stack_batch(&hrs);
            let rf = stack_batch(&refs);

            let (mut l_d, mut gp_val) = (0.0, 0.0);
            if !warm_up {
                for _ in 0..cfg.d_steps {
                    d_opt.zero_grads();
                    let fake = gen.forward(&lr, &rf)?.sr.detach();
                    let pen = crate::loss::gradient_penalty(&disc, &hr, &fake, &mut rngs.gp_mix)?;
                    gp_val = pen.item() as f64;
                    let gap = ops::sub(
                        &ops::mean(&disc.forward(&fake)?),
                        &ops::mean(&disc.forward(&hr)?),
                    )?;
                    let dl = ops::add(&gap, &ops::mul_scalar(&pen, cfg.weights.gp as f32))?;
                    l_d = dl.item() as f64;
                    if !l_d.is_finite() {
                        let dump = out_dir.join("abort.ckpt");
                        save(&g_opt, &d_opt, &rngs, step, &dump)?;
                        return Err(TrainError::NonFiniteLoss { step, dump });
                    }
                    dl.backward()?;
                    d_opt.step()?;
                }
            }

            g_opt.zero_grads();
            let out = gen.forward(&lr, &rf)?;
            let rec = rec_loss(&out.sr, &hr)?;
            let l_rec = rec.item() as f64;
            let (total, l_adv, l_per) = if warm_up {
                (overall_loss(&rec, &rec, &rec, &cfg.weights, true)?, 0.0, 0.0)
            } else {
                let adv = g_adv_loss(&disc, &out.sr)?;
                let mut per = perceptual_loss(&out.sr, &hr, &plug)?;
                if let Some(state) = &out.state {
                    if let Some(t3) = state.transferred.for_scale(Scale::X1) {
                        per = ops::add(
                            &per,
                            &transferal_perceptual_loss(&out.sr, t3, &gen.transformer.lte)?,
                        )?;
                    }
                }
                let (a, p) = (adv.item() as f64, per.item() as f64);
                (overall_loss(&rec, &adv, &per, &cfg.weights, false)?, a, p)
            };
            if !total.item().is_finite() {
                let dump = out_dir.join("abort.ckpt");
                save(&g_opt, &d_opt, &rngs, step, &dump)?;
                return Err(TrainError::NonFiniteLoss { step, dump });
            }
            total.backward()?;
            g_opt.step()?;
            step += 1;
            epoch_rec_sum += l_rec;
            epoch_rec_n += 1;

            let row = LogRow {
                step,
                epoch,
                l_rec,
                l_adv,
                l_per,
                l_d,
                gp: gp_val,
            };
            let _ = writeln!(log, "{}", fmt_row(&row));
        }

        rngs.epochs_done = epoch + 1;
        rngs.g_steps = g_opt.step_count();
        rngs.d_steps = d_opt.step_count();
        final_rec = epoch_rec_sum / epoch_rec_n.max(1) as f64;

        let ckpt_path = out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
        save(&g_opt, &d_opt, &rngs, step, &ckpt_path)?;
        checkpoints.push(ckpt_path);
        fs::write(&log_path, &log).map_err(|e| TrainError::Io {
            path: log_path.clone(),
            source: e,
        })?;
    }

    // cover the resume-with-nothing-to-do case
    fs::write(&log_path, &log).map_err(|e| TrainError::Io {
        path: log_path.clone(),
        source: e,
    })?;

    Ok(TrainReport {
        final_rec,
        steps: step,
        log_path,
        checkpoints,
    })
}

/// Rebuild a generator from a training checkpoint.
pub fn load_generator<E: Element>(ckpt_path: &Path) -> Result<(Generator<E>, TrainConfig)> {
    let ck = Checkpoint::load(ckpt_path)?;
    let cfg: TrainConfig =
        serde_json::from_str(&ck.config_json).map_err(CheckpointError::Config)?;
    let mut rng = seeded(cfg.seed, Stream::Init);
    let gen = Generator::new(cfg.generator.clone(), &mut rng);
    ck.load_into(&gen.params())?;
    Ok((gen, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_synthetic_dataset;
    use crate::nn::uniform;

    fn toy_dataset(dir: &Path, n: usize, extent: usize) -> PairedDataset {
        let mut rng = seeded(42, Stream::Data);
        write_synthetic_dataset(dir, n, extent, &mut rng).unwrap();
        PairedDataset::open(dir).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            total_epochs: 3,
            warmup_epochs: 1,
            batch_size: 2,
            lr_patch: 8,
            generator: GeneratorConfig {
                base_channels: 8,
                blocks: [1, 1, 1, 1],
                ..GeneratorConfig::tiny()
            },
            disc_base_channels: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn flips_are_involutions_and_rotation_obeys_group_law() {
        let mut r = seeded(0, Stream::Init);
        let x = uniform::<f32>(&[1, 3, 6, 6], -1.0, 1.0, &mut r);
        assert_eq!(flip_h(&flip_h(&x)).to_vec(), x.to_vec());
        assert_eq!(flip_v(&flip_v(&x)).to_vec(), x.to_vec());
        let r1 = rot90(&rot90(&x).unwrap()).unwrap();
        let r2 = apply_augment(&x, AugmentDraw { flip_h: false, flip_v: false, rot: 2 }).unwrap();
        assert_eq!(r1.to_vec(), r2.to_vec());
        // four quarter turns restore the original
        let mut y = x.clone();
        for _ in 0..4 {
            y = rot90(&y).unwrap();
        }
        assert_eq!(y.to_vec(), x.to_vec());
        // identity draw leaves the pair unchanged
        let id = apply_augment(&x, AugmentDraw::IDENTITY).unwrap();
        assert_eq!(id.to_vec(), x.to_vec());
    }

    #[test]
    fn rot90_requires_square() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 6]);
        assert!(rot90(&x).is_err());
    }

    #[test]
    fn augment_regenerates_lr_from_augmented_hr() {
        let mut r = seeded(3, Stream::Augment);
        let hr = uniform::<f32>(&[1, 3, 16, 16], -0.9, 0.9, &mut r);
        let rf = uniform::<f32>(&[1, 3, 16, 16], -0.9, 0.9, &mut r);
        let (lr, hr_a, _) = augment(&hr, &rf, &mut r).unwrap();
        assert_eq!(lr.shape(), &[1, 3, 4, 4]);
        let expect = bicubic_resize(&hr_a, 0.25).unwrap();
        assert_eq!(lr.to_vec(), expect.to_vec());
    }

    #[test]
    fn config_file_parsing_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        fs::write(
            &path,
            "seed = 7\nlr = 2e-4 # comment\nblocks = 2,2,1,1\nscales = 1,4\ncsfi = off\npool = max\nbatch_size = 3\n",
        )
        .unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.adam.lr, 2e-4);
        assert_eq!(cfg.generator.blocks, [2, 2, 1, 1]);
        assert_eq!(cfg.generator.scales, vec![Scale::X1, Scale::X4]);
        assert!(!cfg.generator.csfi);
        assert_eq!(cfg.batch_size, 3);

        fs::write(&path, "bogus_key = 1\n").unwrap();
        assert!(TrainConfig::from_file(&path).is_err());
        fs::write(&path, "warmup_epochs = 9\ntotal_epochs = 2\n").unwrap();
        assert!(TrainConfig::from_file(&path).is_err());
    }

    #[test]
    fn warm_up_only_run_keeps_adversarial_columns_zero_and_disc_frozen() {
        let data_dir = tempfile::tempdir().unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(data_dir.path(), 2, 32);
        let cfg = TrainConfig {
            total_epochs: 2,
            warmup_epochs: 2,
            ..quick_cfg()
        };
        let report = train(&ds, &cfg, out_dir.path(), None).unwrap();
        let log = fs::read_to_string(&report.log_path).unwrap();
        for line in log.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0, "l_adv in {line}");
            assert_eq!(cols[4].parse::<f64>().unwrap(), 0.0, "l_per in {line}");
            assert_eq!(cols[5].parse::<f64>().unwrap(), 0.0, "l_d in {line}");
        }

        // discriminator parameters never moved: compare to a fresh init
        let mut rng = seeded(cfg.seed, Stream::Init);
        let _fresh_gen: Generator<f32> = Generator::new(cfg.generator.clone(), &mut rng);
        let fresh_disc: Discriminator<f32> = Discriminator::new(
            DiscriminatorConfig {
                input_extent: cfg.hr_patch(),
                base_channels: cfg.disc_base_channels,
            },
            &mut rng,
        );
        let ck = Checkpoint::load(report.checkpoints.last().unwrap()).unwrap();
        for p in fresh_disc.params() {
            let rec = ck.get(p.name()).unwrap();
            let live: Vec<f64> = p.tensor().to_vec().iter().map(|v| *v as f64).collect();
            assert_eq!(rec.data, live, "{} changed during warm-up", p.name());
        }
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical() {
        let data_dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(data_dir.path(), 2, 32);
        let cfg = quick_cfg();
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        let r1 = train(&ds, &cfg, out1.path(), None).unwrap();
        let r2 = train(&ds, &cfg, out2.path(), None).unwrap();
        assert_eq!(
            fs::read_to_string(&r1.log_path).unwrap(),
            fs::read_to_string(&r2.log_path).unwrap()
        );
        assert_eq!(
            fs::read(r1.checkpoints.last().unwrap()).unwrap(),
            fs::read(r2.checkpoints.last().unwrap()).unwrap()
        );
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data_dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(data_dir.path(), 2, 32);
        let cfg = quick_cfg(); // 3 epochs, 1 warm-up

        let full_out = tempfile::tempdir().unwrap();
        let full = train(&ds, &cfg, full_out.path(), None).unwrap();

        let part_out = tempfile::tempdir().unwrap();
        let cfg_short = TrainConfig {
            total_epochs: 2,
            ..cfg.clone()
        };
        let part = train(&ds, &cfg_short, part_out.path(), None).unwrap();
        let resumed = train(
            &ds,
            &cfg,
            part_out.path(),
            Some(part.checkpoints.last().unwrap().as_path()),
        )
        .unwrap();

        assert_eq!(
            fs::read_to_string(&full.log_path).unwrap(),
            fs::read_to_string(&resumed.log_path).unwrap()
        );
        assert_eq!(
            fs::read(full.checkpoints.last().unwrap()).unwrap(),
            fs::read(resumed.checkpoints.last().unwrap()).unwrap()
        );
    }

    #[test]
    fn adversarial_phase_produces_nonzero_columns() {
        let data_dir = tempfile::tempdir().unwrap();
        let out_dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(data_dir.path(), 2, 32);
        let cfg = TrainConfig {
            total_epochs: 2,
            warmup_epochs: 0,
            ..quick_cfg()
        };
        let report = train(&ds, &cfg, out_dir.path(), None).unwrap();
        let log = fs::read_to_string(&report.log_path).unwrap();
        let mut saw_d = false;
        for line in log.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols[5].parse::<f64>().unwrap() != 0.0 {
                saw_d = true;
            }
        }
        assert!(saw_d, "discriminator loss never logged:\n{log}");
    }
}
