//! Multi-view super-resolution: a low-resolution consistency term on the
//! coarse wavelet levels plus refined high-resolution targets on the full
//! pyramid, with a periodically refreshed cache of refined frames.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Frame, Split};
use crate::error::{Error, Result};
use crate::metrics::bicubic_resize;
use crate::optim::{adam_step, add_l1_subgrad, l1_with_grad, mse_with_grad, AdamState};
use crate::renderer::{make_rays, render_image, render_rays, Camera, RenderOptions};
use crate::scene::SyntheticScene;
use crate::trainer::{accumulate_render_grads, sample_ray_batch, TrainConfig};
use crate::triplane::TriNeRFLet;
use crate::wavelet::Plane;

pub mod external;
pub mod perceptual;

pub use external::{ExternalRefiner, Transport};
pub use perceptual::{GradSsimLoss, PerceptualLoss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualRef {
    RefinedHr,
    UpsampledLr,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrConfig {
    /// Wavelet depth rendered for the low-resolution images.
    pub l_lr: usize,
    /// Full depth rendered for high-resolution images.
    pub l: usize,
    /// Steps of low-resolution-only training.
    pub s_lr: usize,
    /// Total steps.
    pub s: usize,
    pub s_refresh: usize,
    pub t_min: f64,
    pub t_max0: f64,
    pub t_max_final: f64,
    pub lambda: f64,
    pub alpha: f64,
    /// Image upscaling factor between the low- and high-resolution frames.
    pub scale: usize,
    /// Pad or crop refiner inputs to the refiner's native sizes when it reports them.
    pub pad_crop: bool,
    pub perceptual_ref: PerceptualRef,
    /// Low-resolution rays per step.
    pub lr_rays: usize,
    /// Side of the square high-resolution patch rendered per step.
    pub hr_patch: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig {
            l_lr: 3,
            l: 5,
            s_lr: 6_000,
            s: 16_000,
            s_refresh: 500,
            t_min: 0.02,
            t_max0: 0.98,
            t_max_final: 0.25,
            lambda: 0.1,
            alpha: 7.5,
            scale: 4,
            pad_crop: true,
            perceptual_ref: PerceptualRef::RefinedHr,
            lr_rays: 1024,
            hr_patch: 32,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_lr >= self.l {
            return Err(Error::Config(format!("l_lr {} must be below l {}", self.l_lr, self.l)));
        }
        if self.s_lr > self.s || self.s_refresh == 0 {
            return Err(Error::Config("need s_lr <= s and s_refresh > 0".into()));
        }
        if !(0.0 <= self.t_min && self.t_min < self.t_max_final && self.t_max_final <= self.t_max0 && self.t_max0 <= 1.0) {
            return Err(Error::Config("need 0 <= t_min < t_max_final <= t_max0 <= 1".into()));
        }
        if self.lambda < 0.0 || self.scale < 2 || self.hr_patch == 0 || self.lr_rays == 0 {
            return Err(Error::Config("invalid lambda, scale, hr_patch or lr_rays".into()));
        }
        Ok(())
    }
}

/// Upper bound on the diffusion time, linear from `t_max0` at `s_lr` to
/// `t_max_final` at `s` and clamped outside that range.
pub fn tmax_schedule(step: usize, cfg: &SrConfig) -> f64 {
    let span = cfg.s.saturating_sub(cfg.s_lr);
    let frac = if span == 0 {
        1.0
    } else {
        (step.saturating_sub(cfg.s_lr) as f64 / span as f64).min(1.0)
    };
    (cfg.t_max0 + frac * (cfg.t_max_final - cfg.t_max0)).max(cfg.t_min)
}

pub fn is_refresh_step(step: usize, cfg: &SrConfig) -> bool {
    step >= cfg.s_lr && (step - cfg.s_lr).is_multiple_of(cfg.s_refresh)
}

/// `eps_uncond + alpha * (eps_lr_cond - eps_uncond)`.
pub fn guided_denoise_direction(eps_uncond: &Plane, eps_lr_cond: &Plane, alpha: f64) -> Result<Plane> {
    if eps_uncond.shape() != eps_lr_cond.shape() {
        return Err(Error::Shape(format!(
            "noise estimates differ: {:?} vs {:?}",
            eps_uncond.shape(),
            eps_lr_cond.shape()
        )));
    }
    let mut out = eps_uncond.clone();
    for (o, c) in out.data_mut().iter_mut().zip(eps_lr_cond.data()) {
        *o += alpha * (c - *o);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(img: &Plane) -> Self {
        Region {
            y: 0,
            x: 0,
            height: img.height(),
            width: img.width(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlacementKind {
    Identity,
    Pad,
    Crop,
}

/// Where the native-size refiner inputs came from. Content occupies the
/// top-left `height x width` of each native image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub kind: PlacementKind,
    pub lr: Region,
    pub hr: Region,
}

fn copy_region(src: &Plane, r: Region, out_h: usize, out_w: usize) -> Plane {
    let mut out = Plane::zeros(out_h, out_w, src.channels());
    for y in 0..r.height {
        for x in 0..r.width {
            out.texel_mut(y, x).copy_from_slice(src.texel(r.y + y, r.x + x));
        }
    }
    out
}

/// Brings an LR/HR pair to the refiner's native sizes: short sides are
/// zero-padded, long sides randomly cropped with the HR box at exactly the
/// scaled LR box.
pub fn pad_or_crop_pair<R: Rng + ?Sized>(
    x_lr: &Plane,
    x_hr: &Plane,
    native_lr: usize,
    native_hr: usize,
    rng: &mut R,
) -> Result<(Plane, Plane, Placement)> {
    if native_lr == 0 || !native_hr.is_multiple_of(native_lr) {
        return Err(Error::Config(format!("native sizes {native_lr}/{native_hr} are not an integer ratio")));
    }
    let ratio = native_hr / native_lr;
    if x_hr.height() != ratio * x_lr.height() || x_hr.width() != ratio * x_lr.width() {
        return Err(Error::Config(format!(
            "HR {}x{} is not {ratio}x the LR {}x{}",
            x_hr.height(),
            x_hr.width(),
            x_lr.height(),
            x_lr.width()
        )));
    }
    let mut axis = |n: usize| -> (usize, usize) {
        if n <= native_lr {
            (0, n)
        } else {
            (rng.random_range(0..=n - native_lr), native_lr)
        }
    };
    let (y, h) = axis(x_lr.height());
    let (x, w) = axis(x_lr.width());
    let lr = Region { y, x, height: h, width: w };
    let hr = Region {
        y: y * ratio,
        x: x * ratio,
        height: h * ratio,
        width: w * ratio,
    };
    let kind = if x_lr.height() == native_lr && x_lr.width() == native_lr {
        PlacementKind::Identity
    } else if x_lr.height() > native_lr || x_lr.width() > native_lr {
        PlacementKind::Crop
    } else {
        PlacementKind::Pad
    };
    Ok((
        copy_region(x_lr, lr, native_lr, native_lr),
        copy_region(x_hr, hr, native_hr, native_hr),
        Placement { kind, lr, hr },
    ))
}

/// Pastes the content part of a native-size refined image into `base` at the recorded HR box.
pub fn map_back(refined: &Plane, placement: &Placement, base: &Plane) -> Result<Plane> {
    let r = placement.hr;
    if refined.height() < r.height || refined.width() < r.width || refined.channels() != base.channels() {
        return Err(Error::Shape("refined image smaller than the recorded region".into()));
    }
    let mut out = base.clone();
    for y in 0..r.height {
        for x in 0..r.width {
            out.texel_mut(r.y + y, r.x + x).copy_from_slice(refined.texel(y, x));
        }
    }
    Ok(out)
}

pub struct RefineRequest<'a> {
    pub frame: usize,
    pub step: usize,
    pub hr_estimate: &'a Plane,
    pub lr_gt: &'a Plane,
    pub t: f64,
}

pub trait Refiner {
    /// Returns a refined image the size of `hr_estimate`.
    fn refine(&mut self, req: &RefineRequest) -> Result<Plane>;

    /// `(lr, hr)` sides the backend works at, when it has fixed ones.
    fn native_sizes(&self) -> Option<(usize, usize)> {
        None
    }

    fn name(&self) -> &str;
}

/// Returns the estimate unchanged.
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(&mut self, req: &RefineRequest) -> Result<Plane> {
        Ok(req.hr_estimate.clone())
    }

    fn name(&self) -> &str {
        "identity"
    }
}

/// Stand-in refiner for analytic scenes: returns the true high-resolution view.
pub struct OracleRefiner {
    scene: SyntheticScene,
    cameras: BTreeMap<usize, Camera>,
    supersample: usize,
}

impl OracleRefiner {
    pub fn new(scene: SyntheticScene, cameras: BTreeMap<usize, Camera>, supersample: usize) -> Self {
        OracleRefiner {
            scene,
            cameras,
            supersample,
        }
    }

    /// High-resolution cameras for every frame of `lr_dataset`.
    pub fn for_dataset(scene: SyntheticScene, lr_dataset: &Dataset, scale: usize) -> Self {
        let ss = scene.spec.supersample;
        let cameras = lr_dataset
            .frames
            .iter()
            .map(|f| (f.id, f.camera.scaled(scale as f64)))
            .collect();
        OracleRefiner::new(scene, cameras, ss)
    }

    pub fn render(&self, frame: usize) -> Result<Plane> {
        let cam = self
            .cameras
            .get(&frame)
            .ok_or_else(|| Error::Refiner(format!("oracle has no camera for frame {frame}")))?;
        Ok(self.scene.render(cam, self.supersample))
    }
}

impl Refiner for OracleRefiner {
    fn refine(&mut self, req: &RefineRequest) -> Result<Plane> {
        let img = self.render(req.frame)?;
        if img.shape() != req.hr_estimate.shape() {
            return Err(Error::Refiner("oracle camera does not match the requested size".into()));
        }
        Ok(img)
    }

    fn name(&self) -> &str {
        "oracle"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HrEntry {
    pub target: Plane,
    /// Part of `target` that holds refined content.
    pub region: Region,
}

/// Refined high-resolution targets for the current refresh window. A `None`
/// entry marks a frame whose refinement failed in this window.
#[derive(Clone, Debug, Default)]
pub struct HrSet {
    entries: BTreeMap<usize, Option<HrEntry>>,
}

impl HrSet {
    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn get(&self, frame: usize) -> Option<&Option<HrEntry>> {
        self.entries.get(&frame)
    }

    pub fn insert(&mut self, frame: usize, entry: Option<HrEntry>) {
        self.entries.insert(frame, entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SrLogRow {
    pub step: usize,
    pub frame: usize,
    pub loss_lr: f64,
    pub loss_hr: f64,
    pub loss_perceptual: f64,
    pub loss_reg: f64,
    pub t_max: f64,
    pub hr_active: bool,
}

pub struct SrOutcome {
    pub model: TriNeRFLet,
    pub log: Vec<SrLogRow>,
    pub refine_calls: usize,
    pub refine_failures: usize,
}

pub fn sr_train(sr: &SrConfig, train: &TrainConfig, lr_dataset: &Dataset, refiner: &mut dyn Refiner) -> Result<SrOutcome> {
    sr_train_with(sr, train, lr_dataset, refiner, &GradSsimLoss::default())
}

pub fn sr_train_with(
    sr: &SrConfig,
    train: &TrainConfig,
    lr_dataset: &Dataset,
    refiner: &mut dyn Refiner,
    perceptual: &dyn PerceptualLoss,
) -> Result<SrOutcome> {
    sr.validate()?;
    let frames: Vec<&Frame> = lr_dataset.split(Split::Train).collect();
    if frames.is_empty() {
        return Err(Error::Config("dataset has no training frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = TriNeRFLet::new(&train.model_config(lr_dataset, sr.l), &mut rng)?;
    let mut adam = AdamState::new(crate::optim::AdamConfig {
        decay_steps: sr.s,
        ..train.adam_config()
    });
    let opts = train.render_options();
    let gamma = train.gamma * train.reg_scale;
    let (near, far) = lr_dataset.depth_range();
    let mut hr_set = HrSet::default();
    let mut log = Vec::with_capacity(sr.s);
    let (mut calls, mut failures) = (0, 0);

    for step in 0..sr.s {
        let frame = frames[rng.random_range(0..frames.len())];
        let mut row = SrLogRow {
            step,
            frame: frame.id,
            t_max: tmax_schedule(step, sr),
            ..Default::default()
        };
        let mut grads = model.zero_grads();

        let batch = sample_ray_batch(&[frame], sr.lr_rays, &mut rng)?;
        let planes = model.reconstruct_planes(sr.l_lr)?;
        let pass = render_rays(&planes, model.mlp(), &model.bbox(), &batch.rays, near, far, &opts, true, &mut rng)?;
        let (loss_lr, d_lr) = mse_with_grad(&pass.colors(), &batch.colors);
        accumulate_render_grads(&model, &pass, sr.l_lr, &d_lr, &mut grads)?;
        row.loss_lr = loss_lr;

        if step >= sr.s_lr {
            if is_refresh_step(step, sr) {
                hr_set.clear();
            }
            if hr_set.get(frame.id).is_none() {
                let (entry, c, f) = refine_frame(&model, frame, sr, step, &train.eval_options(), refiner, &mut rng)?;
                calls += c;
                failures += f;
                hr_set.insert(frame.id, entry);
            }
            if let Some(Some(entry)) = hr_set.get(frame.id) {
                row.hr_active = true;
                let (l1, perc) = hr_patch_step(&model, frame, entry, sr, train, perceptual, &mut grads, &mut rng)?;
                row.loss_hr = l1;
                row.loss_perceptual = perc;
            }
        }

        row.loss_reg = gamma * model.high_freq_l1();
        add_l1_subgrad(&model, &mut grads, gamma);
        let total = row.loss_lr + row.loss_hr + sr.lambda * row.loss_perceptual + row.loss_reg;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("super-resolution loss is {total}"),
            });
        }
        adam_step(&mut model.param_slices_mut(), &grads, &mut adam)?;
        if step % 250 == 0 {
            log::info!(
                "sr step {step}: lr {:.5} hr {:.5} perceptual {:.5}",
                row.loss_lr,
                row.loss_hr,
                row.loss_perceptual
            );
        }
        log.push(row);
    }
    Ok(SrOutcome {
        model,
        log,
        refine_calls: calls,
        refine_failures: failures,
    })
}

/// Renders the current HR estimate and asks the refiner for a target,
/// retrying once. Returns the entry and the number of calls and failures.
#[allow(clippy::too_many_arguments)]
fn refine_frame<R: Rng>(
    model: &TriNeRFLet,
    frame: &Frame,
    sr: &SrConfig,
    step: usize,
    opts: &RenderOptions,
    refiner: &mut dyn Refiner,
    rng: &mut R,
) -> Result<(Option<HrEntry>, usize, usize)> {
    let cam = frame.camera.scaled(sr.scale as f64);
    let estimate = render_image(model, &cam, sr.l, opts, rng)?;
    let t_max = tmax_schedule(step, sr);
    let t = sr.t_min + (t_max - sr.t_min) * rng.random::<f64>();
    let native = if sr.pad_crop { refiner.native_sizes() } else { None };
    let (est_in, lr_in, placement) = match native {
        Some((nl, nh)) => {
            let (l, h, p) = pad_or_crop_pair(&frame.image, &estimate, nl, nh, rng)?;
            (h, l, Some(p))
        }
        None => (estimate.clone(), frame.image.clone(), None),
    };
    let req = RefineRequest {
        frame: frame.id,
        step,
        hr_estimate: &est_in,
        lr_gt: &lr_in,
        t,
    };
    let (mut calls, mut failures) = (0, 0);
    for attempt in 0..2 {
        calls += 1;
        match refiner.refine(&req) {
            Ok(img) => {
                let entry = match &placement {
                    Some(p) => HrEntry {
                        target: map_back(&img, p, &estimate)?,
                        region: p.hr,
                    },
                    None => {
                        if img.shape() != estimate.shape() {
                            return Err(Error::Refiner(format!(
                                "{} returned {:?}, expected {:?}",
                                refiner.name(),
                                img.shape(),
                                estimate.shape()
                            )));
                        }
                        HrEntry {
                            region: Region::full(&img),
                            target: img,
                        }
                    }
                };
                return Ok((Some(entry), calls, failures));
            }
            Err(e) => {
                failures += 1;
                log::warn!("refiner {} failed on frame {} (attempt {}): {e}", refiner.name(), frame.id, attempt + 1);
            }
        }
    }
    log::warn!("skipping frame {} until the next refresh", frame.id);
    Ok((None, calls, failures))
}

#[allow(clippy::too_many_arguments)]
fn hr_patch_step<R: Rng>(
    model: &TriNeRFLet,
    frame: &Frame,
    entry: &HrEntry,
    sr: &SrConfig,
    train: &TrainConfig,
    perceptual: &dyn PerceptualLoss,
    grads: &mut Vec<Vec<f64>>,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let r = entry.region;
    let ph = sr.hr_patch.min(r.height);
    let pw = sr.hr_patch.min(r.width);
    let y0 = r.y + rng.random_range(0..=r.height - ph);
    let x0 = r.x + rng.random_range(0..=r.width - pw);
    let pixels: Vec<(usize, usize)> = (0..ph)
        .flat_map(|y| (0..pw).map(move |x| (x0 + x, y0 + y)))
        .collect();
    let cam = frame.camera.scaled(sr.scale as f64);
    let rays = make_rays(&cam, &pixels)?;
    let planes = model.reconstruct_planes(sr.l)?;
    let opts = train.render_options();
    let pass = render_rays(&planes, model.mlp(), &model.bbox(), &rays, cam.near, cam.far, &opts, true, rng)?;
    let pred = pass.colors();
    let target: Vec<[f64; 3]> = pixels
        .iter()
        .map(|&(u, v)| {
            let t = entry.target.texel(v, u);
            [t[0], t[1], t[2]]
        })
        .collect();
    let (l1, mut d) = l1_with_grad(&pred, &target);
    let mut perc = 0.0;
    if sr.lambda > 0.0 {
        let pred_img = Plane::from_vec(ph, pw, 3, pred.iter().flatten().copied().collect())?;
        let reference = match sr.perceptual_ref {
            PerceptualRef::RefinedHr => Plane::from_vec(ph, pw, 3, target.iter().flatten().copied().collect())?,
            PerceptualRef::UpsampledLr => {
                let up = bicubic_resize(&frame.image, cam.height, cam.width);
                Plane::from_fn(ph, pw, 3, |y, x, c| up.get(y0 + y, x0 + x, c))
            }
        };
        let (p, g) = perceptual.loss_and_grad(&pred_img, &reference)?;
        perc = p;
        for (k, dk) in d.iter_mut().enumerate() {
            let t = g.texel(k / pw, k % pw);
            for c in 0..3 {
                dk[c] += sr.lambda * t[c];
            }
        }
    }
    accumulate_render_grads(model, &pass, sr.l, &d, grads)?;
    Ok((l1, perc))
}
