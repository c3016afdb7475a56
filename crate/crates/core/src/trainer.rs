//! Reconstruction training with coarse-to-fine level growth.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{Dataset, Frame, Split};
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::metrics::{image_to_srgb, ssim};
use crate::optim::{adam_step, add_l1_subgrad, reconstruction_loss, AdamConfig, AdamState, LossReport};
use crate::renderer::{make_rays, render_image, render_rays, RenderOptions, RenderPass};
use crate::triplane::{ModelConfig, ParamGrads, TriNeRFLet};
use crate::wavelet::{FilterKind, Plane, WaveletPyramid};

pub use crate::metrics::psnr;

/// One row of the published configuration table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub n_ll: usize,
    pub levels: usize,
    pub n_base: usize,
    pub n_final: usize,
    pub channels: usize,
    pub gamma: f64,
    pub width: usize,
    pub d_density: usize,
    pub d_color: usize,
    pub steps: usize,
    /// Trainable parameter count in millions, as listed (`n_final^2 * channels`).
    pub trainable_params_m: f64,
}

pub const PRESETS: [Preset; 5] = [
    Preset {
        name: "small",
        n_ll: 64,
        levels: 4,
        n_base: 512,
        n_final: 1024,
        channels: 16,
        gamma: 0.2,
        width: 64,
        d_density: 1,
        d_color: 2,
        steps: 6_000,
        trainable_params_m: 17.0,
    },
    Preset {
        name: "base-light",
        n_ll: 64,
        levels: 5,
        n_base: 512,
        n_final: 2048,
        channels: 32,
        gamma: 0.4,
        width: 64,
        d_density: 1,
        d_color: 2,
        steps: 10_000,
        trainable_params_m: 134.0,
    },
    Preset {
        name: "base",
        n_ll: 64,
        levels: 5,
        n_base: 512,
        n_final: 2048,
        channels: 32,
        gamma: 0.4,
        width: 64,
        d_density: 1,
        d_color: 2,
        steps: 43_000,
        trainable_params_m: 134.0,
    },
    Preset {
        name: "large",
        n_ll: 64,
        levels: 5,
        n_base: 512,
        n_final: 2048,
        channels: 48,
        gamma: 0.6,
        width: 128,
        d_density: 1,
        d_color: 2,
        steps: 83_000,
        trainable_params_m: 201.0,
    },
    Preset {
        name: "micro",
        n_ll: 16,
        levels: 3,
        n_base: 32,
        n_final: 128,
        channels: 8,
        gamma: 0.4,
        width: 32,
        d_density: 1,
        d_color: 2,
        steps: 2_000,
        trainable_params_m: 0.131,
    },
];

pub fn preset(name: &str) -> Result<Preset> {
    let key = name.to_ascii_lowercase().replace('_', "-");
    PRESETS
        .iter()
        .find(|p| p.name == key)
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_ll: usize,
    pub levels: usize,
    pub n_base: usize,
    pub n_final: usize,
    pub channels: usize,
    pub gamma: f64,
    pub width: usize,
    pub d_density: usize,
    pub d_color: usize,
    pub total_steps: usize,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub filter: FilterKind,
    pub seed: u64,
    /// Coarse-to-fine growth. When off, training runs at full depth throughout.
    pub c2f: bool,
    /// Explicit `(step, depth)` pairs; equal splits from `n_base` to `n_final` when empty.
    pub c2f_schedule: Vec<(usize, usize)>,
    pub lr: f64,
    pub decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplies `gamma` in the objective.
    pub reg_scale: f64,
    pub val_every: usize,
    pub background: [f64; 3],
    pub geo_features: usize,
    pub dir_bands: usize,
    pub logit_max: f64,
    /// Validation PSNR on sRGB-encoded images instead of linear ones.
    pub psnr_srgb: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::from_preset(&preset("micro").expect("micro preset"))
    }
}

impl TrainConfig {
    pub fn from_preset(p: &Preset) -> Self {
        let field = FieldConfig::default();
        let adam = AdamConfig::default();
        TrainConfig {
            n_ll: p.n_ll,
            levels: p.levels,
            n_base: p.n_base,
            n_final: p.n_final,
            channels: p.channels,
            gamma: p.gamma,
            width: p.width,
            d_density: p.d_density,
            d_color: p.d_color,
            total_steps: p.steps,
            rays_per_batch: 4096,
            samples_per_ray: 128,
            filter: FilterKind::Bior6_8,
            seed: 0,
            c2f: true,
            c2f_schedule: Vec::new(),
            lr: adam.lr,
            decay_rate: adam.decay_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            reg_scale: 1.0,
            val_every: 500,
            background: [1.0; 3],
            geo_features: field.geo_features,
            dir_bands: field.dir_bands,
            logit_max: field.logit_max,
            psnr_srgb: true,
        }
    }

    pub fn base_depth(&self) -> Result<usize> {
        depth_of(self.n_ll, self.n_base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ll == 0 || self.channels == 0 || self.width == 0 {
            return Err(Error::Config("n_ll, channels and width must be positive".into()));
        }
        if self.n_final != self.n_ll << self.levels {
            return Err(Error::Config(format!(
                "n_final {} != n_ll {} * 2^{}",
                self.n_final, self.n_ll, self.levels
            )));
        }
        if self.base_depth()? > self.levels {
            return Err(Error::Config("n_base exceeds n_final".into()));
        }
        if self.total_steps == 0 || self.rays_per_batch == 0 || self.samples_per_ray == 0 {
            return Err(Error::Config("steps, rays and samples must be positive".into()));
        }
        if self.gamma < 0.0 || self.reg_scale < 0.0 {
            return Err(Error::Config("gamma and reg_scale must be non-negative".into()));
        }
        let sched = self.schedule()?;
        if sched.first().map(|s| s.0) != Some(0) {
            return Err(Error::Config("schedule must start at step 0".into()));
        }
        for w in sched.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 < w[0].1 {
                return Err(Error::Config("schedule steps must increase and depths must not decrease".into()));
            }
        }
        if sched.last().map(|s| s.1) != Some(self.levels) {
            return Err(Error::Config(format!("schedule must end at depth {}", self.levels)));
        }
        Ok(())
    }

    /// `(first step, depth)` pairs of the coarse-to-fine schedule.
    pub fn schedule(&self) -> Result<Vec<(usize, usize)>> {
        if !self.c2f {
            return Ok(vec![(0, self.levels)]);
        }
        if !self.c2f_schedule.is_empty() {
            return Ok(self.c2f_schedule.clone());
        }
        Ok(equal_split_schedule(self.base_depth()?, self.levels, self.total_steps))
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            width: self.width,
            d_density: self.d_density,
            d_color: self.d_color,
            geo_features: self.geo_features,
            dir_bands: self.dir_bands,
            logit_max: self.logit_max,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            decay_rate: self.decay_rate,
            decay_steps: self.total_steps,
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            samples_per_ray: self.samples_per_ray,
            stratified: true,
            background: self.background,
            ..RenderOptions::default()
        }
    }

    pub fn eval_options(&self) -> RenderOptions {
        RenderOptions {
            stratified: false,
            ..self.render_options()
        }
    }

    pub fn model_config(&self, dataset: &Dataset, levels: usize) -> ModelConfig {
        ModelConfig {
            n_ll: self.n_ll,
            levels,
            channels: self.channels,
            filter: self.filter,
            bbox: dataset.bbox,
            field: self.field_config(),
        }
    }
}

fn depth_of(n_ll: usize, side: usize) -> Result<usize> {
    let mut d = 0;
    while n_ll << d < side {
        d += 1;
    }
    if n_ll << d != side {
        return Err(Error::Config(format!("{side} is not n_ll {n_ll} times a power of two")));
    }
    Ok(d)
}

/// Equal step splits for every depth from `from` to `to`.
pub fn equal_split_schedule(from: usize, to: usize, total_steps: usize) -> Vec<(usize, usize)> {
    let stages = to - from + 1;
    (0..stages).map(|k| (k * total_steps / stages, from + k)).collect()
}

pub fn depth_at(schedule: &[(usize, usize)], step: usize) -> usize {
    schedule
        .iter()
        .take_while(|(s, _)| *s <= step)
        .last()
        .map_or(schedule[0].1, |&(_, d)| d)
}

/// Gradient of reconstruct-to-`depth` with respect to the coefficients of a
/// pyramid shaped `(n_ll, levels, channels)`.
pub fn wavelet_adjoint(
    grad: &Plane,
    n_ll: usize,
    levels: usize,
    channels: usize,
    filter: FilterKind,
    depth: usize,
) -> Result<WaveletPyramid> {
    WaveletPyramid::zeros(n_ll, channels, levels, filter).reconstruct_adjoint(grad, depth)
}

/// Back-propagates color gradients of a render pass at `depth` into `grads`.
pub fn accumulate_render_grads(
    model: &TriNeRFLet,
    pass: &RenderPass,
    depth: usize,
    d_colors: &[[f64; 3]],
    grads: &mut ParamGrads,
) -> Result<()> {
    let (plane_grads, mlp_grads) = pass.backward(model.mlp(), d_colors)?;
    for (g, s) in grads.iter_mut().zip(mlp_grads.slices()) {
        for (a, b) in g.iter_mut().zip(s) {
            *a += b;
        }
    }
    model.accumulate_plane_grads(&plane_grads, depth, grads)
}

pub trait TrainObserver {
    fn on_level_appended(&mut self, _step: usize, _before: &TriNeRFLet, _after: &TriNeRFLet) {}
    fn on_step(&mut self, _step: usize, _report: &LossReport) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_data: f64,
    pub loss_reg: f64,
    pub lr: f64,
    pub depth: usize,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub model: TriNeRFLet,
    pub log: Vec<LogRow>,
    pub best_val_psnr: Option<f64>,
}

/// A batch of pixels drawn uniformly with replacement from the given frames.
pub struct RayBatch {
    pub rays: Vec<crate::renderer::Ray>,
    pub colors: Vec<[f64; 3]>,
}

pub fn sample_ray_batch<R: Rng>(frames: &[&Frame], n: usize, rng: &mut R) -> Result<RayBatch> {
    let mut rays = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let f = frames[rng.random_range(0..frames.len())];
        let u = rng.random_range(0..f.camera.width);
        let v = rng.random_range(0..f.camera.height);
        rays.push(f.camera.ray(u, v)?);
        let t = f.image.texel(v, u);
        colors.push([t[0], t[1], t[2]]);
    }
    Ok(RayBatch { rays, colors })
}

pub fn train(config: &TrainConfig, dataset: &Dataset, observer: &mut dyn TrainObserver, run: &RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let train_frames: Vec<&Frame> = dataset.split(Split::Train).collect();
    if train_frames.is_empty() {
        return Err(Error::Config("dataset has no training frames".into()));
    }
    let val_frame = dataset
        .split(Split::Val)
        .chain(dataset.split(Split::Test))
        .next()
        .or(train_frames.first().copied());
    let schedule = config.schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = TriNeRFLet::new(&config.model_config(dataset, schedule[0].1), &mut rng)?;
    let mut adam = AdamState::new(config.adam_config());
    let opts = config.render_options();
    let (near, far) = dataset.depth_range();
    let gamma = config.gamma * config.reg_scale;
    let mut log = Vec::with_capacity(config.total_steps);
    let mut best: Option<f64> = None;
    let mut writer = match &run.metrics_csv {
        Some(p) => Some(csv::Writer::from_path(p).map_err(|e| Error::Io(e.into()))?),
        None => None,
    };

    for step in 0..config.total_steps {
        let target = depth_at(&schedule, step);
        while model.depth() < target {
            let before = model.clone();
            model.append_level();
            log::info!("step {step}: grew to depth {}", model.depth());
            observer.on_level_appended(step, &before, &model);
        }
        let depth = model.depth();
        let batch = sample_ray_batch(&train_frames, config.rays_per_batch, &mut rng)?;
        let planes = model.reconstruct_planes(depth)?;
        let pass = match render_rays(&planes, model.mlp(), &model.bbox(), &batch.rays, near, far, &opts, true, &mut rng) {
            Ok(p) => p,
            Err(Error::NonFinite(detail)) => return Err(diverge(&model, run, step, detail)),
            Err(e) => return Err(e),
        };
        let (report, d_colors) = reconstruction_loss(&pass.colors(), &batch.colors, &model, gamma)?;
        if !report.total.is_finite() {
            return Err(diverge(&model, run, step, format!("loss is {}", report.total)));
        }
        let mut grads = model.zero_grads();
        accumulate_render_grads(&model, &pass, depth, &d_colors, &mut grads)?;
        add_l1_subgrad(&model, &mut grads, gamma);
        let lr = adam.lr();
        if let Err(e) = adam_step(&mut model.param_slices_mut(), &grads, &mut adam) {
            return Err(match e {
                Error::NonFinite(detail) => diverge(&model, run, step, detail),
                other => other,
            });
        }
        observer.on_step(step, &report);

        let last = step + 1 == config.total_steps;
        let val_psnr = match val_frame {
            Some(f) if config.val_every > 0 && ((step + 1) % config.val_every == 0 || last) => {
                let p = eval_frame(&model, f, &config.eval_options(), config.psnr_srgb)?.psnr;
                if best.is_none_or(|b| p > b) {
                    best = Some(p);
                    if let Some(dir) = &run.checkpoint_dir {
                        checkpoint::save(&model, &dir.join("best.trnl"), checkpoint::Dtype::F32)?;
                    }
                }
                Some(p)
            }
            _ => None,
        };
        let row = LogRow {
            step,
            loss_data: report.data,
            loss_reg: report.reg,
            lr,
            depth,
            val_psnr,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row).map_err(|e| Error::Io(e.into()))?;
        }
        if let Some(p) = val_psnr {
            log::info!("step {step}: loss {:.5} val psnr {p:.2}", report.total);
        }
        log.push(row);
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &run.checkpoint_dir {
        checkpoint::save(&model, &dir.join("final.trnl"), checkpoint::Dtype::F32)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        best_val_psnr: best,
    })
}

fn diverge(model: &TriNeRFLet, run: &RunOptions, step: usize, detail: String) -> Error {
    if let Some(dir) = &run.checkpoint_dir {
        let path = dir.join("diverged.trnl");
        if let Err(e) = checkpoint::save(model, &path, checkpoint::Dtype::F64) {
            log::warn!("could not write {}: {e}", path.display());
        }
    }
    Error::Diverged { step, detail }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrameScore {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn eval_frame(model: &TriNeRFLet, frame: &Frame, opts: &RenderOptions, srgb: bool) -> Result<FrameScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = render_image(model, &frame.camera, model.depth(), opts, &mut rng)?;
    score(&img, &frame.image, frame.id, srgb)
}

pub fn score(img: &Plane, gt: &Plane, frame: usize, srgb: bool) -> Result<FrameScore> {
    let (a, b) = if srgb {
        (image_to_srgb(img), image_to_srgb(gt))
    } else {
        (img.clone(), gt.clone())
    };
    let s = if a.height() >= 11 && a.width() >= 11 {
        ssim(&a, &b)?
    } else {
        f64::NAN
    };
    Ok(FrameScore {
        frame,
        psnr: psnr(&a, &b)?,
        ssim: s,
    })
}

/// Scores every frame of a split.
pub fn evaluate(model: &TriNeRFLet, dataset: &Dataset, split: Split, opts: &RenderOptions, srgb: bool) -> Result<Vec<FrameScore>> {
    dataset.split(split).map(|f| eval_frame(model, f, opts, srgb)).collect()
}

pub fn mean_psnr(scores: &[FrameScore]) -> f64 {
    scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len().max(1) as f64
}

/// Renders selected pixels of one camera.
pub fn render_pixels<R: Rng>(
    model: &TriNeRFLet,
    frame: &Frame,
    pixels: &[(usize, usize)],
    depth: usize,
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    let planes = model.reconstruct_planes(depth)?;
    let rays = make_rays(&frame.camera, pixels)?;
    let pass = render_rays(
        &planes,
        model.mlp(),
        &model.bbox(),
        &rays,
        frame.camera.near,
        frame.camera.far,
        opts,
        false,
        rng,
    )?;
    Ok(pass.colors())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_splits_equally() {
        assert_eq!(equal_split_schedule(1, 3, 2000), vec![(0, 1), (666, 2), (1333, 3)]);
        assert_eq!(equal_split_schedule(3, 3, 100), vec![(0, 3)]);
        let s = equal_split_schedule(1, 3, 2000);
        assert_eq!(depth_at(&s, 0), 1);
        assert_eq!(depth_at(&s, 665), 1);
        assert_eq!(depth_at(&s, 666), 2);
        assert_eq!(depth_at(&s, 1999), 3);
    }

    #[test]
    fn preset_lookup() {
        assert_eq!(preset("Base-Light").unwrap().steps, 10_000);
        assert_eq!(preset("base_light").unwrap().channels, 32);
        assert!(preset("huge").is_err());
        for p in PRESETS {
            let cfg = TrainConfig::from_preset(&p);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        let mut cfg = TrainConfig { c2f_schedule: vec![(0, 2), (10, 1), (20, 3)], ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.c2f_schedule = vec![(0, 1), (10, 2)];
        assert!(cfg.validate().is_err());
        cfg.c2f_schedule = vec![(0, 1), (10, 3)];
        assert!(cfg.validate().is_ok());
        cfg.n_final = 100;
        assert!(cfg.validate().is_err());
    }
}
