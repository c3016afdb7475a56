#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trinerflet::dataset::Dataset;
use trinerflet::field::{encode_direction, field_backward, field_eval, EvalOptions, FieldConfig, MlpWeights};
use trinerflet::geom::Aabb;
use trinerflet::optim::mse_with_grad;
use trinerflet::renderer::{composite, composite_backward, render_rays, Camera, Ray, RenderOptions};
use trinerflet::scene::{make_synthetic, SyntheticSpec};
use trinerflet::superres::{RefineRequest, Refiner, SrConfig};
use trinerflet::trainer::{accumulate_render_grads, TrainConfig, TrainObserver};
use trinerflet::triplane::{ModelConfig, TriNeRFLet};
use trinerflet::wavelet::{FilterKind, Plane};

pub const FD_H: f64 = 1e-4;

/// Central difference from `f(x + h), f(x), f(x - h)`, or `None` when the two
/// one-sided differences disagree by more than 0.2%, which means the stencil
/// straddles a ReLU kink where the derivative is undefined.
pub fn central_difference(fp: f64, f0: f64, fm: f64) -> Option<f64> {
    let fwd = (fp - f0) / FD_H;
    let bwd = (f0 - fm) / FD_H;
    let scale = fwd.abs().max(bwd.abs()).max(1e-6);
    ((fwd - bwd).abs() <= 2e-3 * scale).then_some(0.5 * (fwd + bwd))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_plane<R: Rng>(h: usize, w: usize, c: usize, rng: &mut R) -> Plane {
    Plane::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Relative error with a small absolute floor so that two near-zero values agree.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Sequential scalar transcription of the discrete volume rendering sum.
pub fn composite_oracle(delta: &[f64], sigma: &[f64], rgb: &[[f64; 3]], bg: [f64; 3]) -> ([f64; 3], Vec<f64>, f64) {
    let mut out = [0.0; 3];
    let mut weights = Vec::new();
    for i in 0..sigma.len() {
        let mut acc = 0.0;
        for j in 0..i {
            acc += sigma[j] * delta[j];
        }
        let t_i = (-acc).exp();
        let w = t_i * (1.0 - (-sigma[i] * delta[i]).exp());
        weights.push(w);
        for k in 0..3 {
            out[k] += w * rgb[i][k];
        }
    }
    let total: f64 = sigma.iter().zip(delta).map(|(s, d)| s * d).sum();
    let t_end = (-total).exp();
    for k in 0..3 {
        out[k] += t_end * bg[k];
    }
    (out, weights, t_end)
}

pub fn small_field() -> FieldConfig {
    FieldConfig {
        width: 16,
        d_density: 1,
        d_color: 2,
        geo_features: 7,
        dir_bands: 2,
        logit_max: 15.0,
    }
}

/// A model with random LL and detail bands so every part of the pyramid matters.
pub fn random_model(n_ll: usize, levels: usize, channels: usize, filter: FilterKind, seed: u64) -> TriNeRFLet {
    let mut r = rng(seed);
    let cfg = ModelConfig {
        n_ll,
        levels,
        channels,
        filter,
        bbox: Aabb::cube(1.0),
        field: small_field(),
    };
    let mut m = TriNeRFLet::new(&cfg, &mut r).unwrap();
    for p in m.pyramids_mut() {
        for v in p.ll.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
        for l in &mut p.levels {
            for b in l.bands_mut() {
                for v in b.data_mut() {
                    *v = r.random_range(-0.2..0.2);
                }
            }
        }
    }
    m
}

/// Mean squared pixel loss of a fixed ray set, rendered with deterministic sampling.
pub struct PixelLoss {
    pub rays: Vec<Ray>,
    pub target: Vec<[f64; 3]>,
    pub opts: RenderOptions,
    pub depth: usize,
}

impl PixelLoss {
    pub fn new(seed: u64, depth: usize) -> Self {
        let mut r = rng(seed);
        let cam = Camera::look_at([0.3, -2.5, 1.2], [0.0; 3], [0.0, 0.0, 1.0], 20.0, 16, 16, 0.5, 6.0).unwrap();
        let rays = (0..12)
            .map(|_| cam.ray(r.random_range(0..16), r.random_range(0..16)).unwrap())
            .collect();
        let target = (0..12).map(|_| std::array::from_fn(|_| r.random_range(0.0..1.0))).collect();
        PixelLoss {
            rays,
            target,
            opts: RenderOptions {
                samples_per_ray: 24,
                stratified: false,
                ..Default::default()
            },
            depth,
        }
    }

    pub fn value(&self, model: &TriNeRFLet) -> f64 {
        let planes = model.reconstruct_planes(self.depth).unwrap();
        let mut r = rng(0);
        let pass = render_rays(&planes, model.mlp(), &model.bbox(), &self.rays, 0.5, 6.0, &self.opts, false, &mut r).unwrap();
        mse_with_grad(&pass.colors(), &self.target).0
    }

    pub fn grads(&self, model: &TriNeRFLet) -> Vec<Vec<f64>> {
        let planes = model.reconstruct_planes(self.depth).unwrap();
        let mut r = rng(0);
        let pass = render_rays(&planes, model.mlp(), &model.bbox(), &self.rays, 0.5, 6.0, &self.opts, true, &mut r).unwrap();
        let (_, d) = mse_with_grad(&pass.colors(), &self.target);
        let mut g = model.zero_grads();
        accumulate_render_grads(model, &pass, self.depth, &d, &mut g).unwrap();
        g
    }
}

/// Central-difference check on `count` wavelet coefficients that receive gradient.
/// Returns the worst relative error.
pub fn check_wavelet_grads(model: &TriNeRFLet, loss: &PixelLoss, count: usize, seed: u64) -> f64 {
    let g = loss.grads(model);
    let m = model.mlp_slice_count();
    let mut candidates = Vec::new();
    for (s, gs) in g.iter().enumerate().skip(m) {
        for (k, &v) in gs.iter().enumerate() {
            if v.abs() > 1e-9 {
                candidates.push((s, k));
            }
        }
    }
    assert!(candidates.len() >= count, "only {} coefficients receive gradient", candidates.len());
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    while checked < count {
        let (s, k) = candidates[r.random_range(0..candidates.len())];
        let f0 = loss.value(model);
        let mut p = model.clone();
        p.param_slices_mut()[s][k] += FD_H;
        let mut q = model.clone();
        q.param_slices_mut()[s][k] -= FD_H;
        let Some(fd) = central_difference(loss.value(&p), f0, loss.value(&q)) else {
            skipped += 1;
            continue;
        };
        worst = worst.max(rel_err(g[s][k], fd));
        checked += 1;
    }
    assert!(skipped * 4 <= checked, "{skipped} probes straddled a kink, {checked} checked");
    worst
}


fn random_dirs<R: Rng>(n: usize, bands: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n, 3 + 6 * bands));
    for i in 0..n {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let enc = encode_direction([v[0] / norm, v[1] / norm, v[2] / norm], bands).unwrap();
        for (j, e) in enc.into_iter().enumerate() {
            out[[i, j]] = e;
        }
    }
    out
}

/// Worst relative error of `field_backward` against central differences on
/// `probes` random feature and weight entries, for the loss `<gs, sigma> + <gc, rgb>`.
pub fn field_fd_worst(seed: u64, probes: usize) -> f64 {
    let mut r = rng(seed);
    let cfg = small_field();
    let (fw, n) = (12, 6);
    let w = MlpWeights::init(cfg, fw, &mut r);
    let feats = Array2::from_shape_fn((n, fw), |_| r.random_range(-1.0..1.0));
    let dirs = random_dirs(n, cfg.dir_bands, &mut r);
    let gs = Array1::from_shape_fn(n, |_| r.random_range(-1.0..1.0));
    let gc = Array2::from_shape_fn((n, 3), |_| r.random_range(-1.0..1.0));
    let loss = |f: &Array2<f64>, w: &MlpWeights| {
        let out = field_eval(f.view(), dirs.view(), w, EvalOptions::default()).unwrap();
        (&out.sigma * &gs).sum() + (&out.rgb * &gc).sum()
    };
    let out = field_eval(
        feats.view(),
        dirs.view(),
        &w,
        EvalOptions {
            retain: true,
            ..Default::default()
        },
    )
    .unwrap();
    let g = field_backward(&out, &w, &gs, &gc).unwrap();
    let f0 = loss(&feats, &w);
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    while checked < probes {
        let (analytic, fp, fm) = if checked % 2 == 0 {
            let (i, j) = (r.random_range(0..n), r.random_range(0..fw));
            let mut p = feats.clone();
            p[[i, j]] += FD_H;
            let mut m = feats.clone();
            m[[i, j]] -= FD_H;
            (g.features[[i, j]], loss(&p, &w), loss(&m, &w))
        } else {
            let slices = g.weights.slices();
            let s = r.random_range(0..slices.len());
            let k = r.random_range(0..slices[s].len());
            let mut wp = w.clone();
            wp.slices_mut()[s][k] += FD_H;
            let mut wm = w.clone();
            wm.slices_mut()[s][k] -= FD_H;
            (slices[s][k], loss(&feats, &wp), loss(&feats, &wm))
        };
        match central_difference(fp, f0, fm) {
            Some(fd) => {
                worst = worst.max(rel_err(analytic, fd));
                checked += 1;
            }
            None => skipped += 1,
        }
    }
    assert!(skipped * 4 <= checked, "{skipped} probes straddled a kink");
    worst
}

/// Worst relative error of `composite_backward` against central differences.
pub fn composite_fd_worst(seed: u64, probes: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < probes {
        let n = 12;
        let delta: Vec<f64> = (0..n).map(|_| r.random_range(0.01..0.3)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
        let rgb: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| r.random_range(0.0..1.0))).collect();
        let bg = [r.random(), r.random(), r.random()];
        let gcol: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let loss = |s: &[f64], c: &[[f64; 3]]| {
            let out = composite(&delta, s, c, bg).unwrap();
            (0..3).map(|k| gcol[k] * out.color[k]).sum::<f64>()
        };
        let fwd = composite(&delta, &sigma, &rgb, bg).unwrap();
        let (ds, dc) = composite_backward(&delta, &rgb, bg, &fwd, gcol);
        for _ in 0..4 {
            let i = r.random_range(0..n);
            let mut p = sigma.clone();
            p[i] += FD_H;
            let mut m = sigma.clone();
            m[i] = (m[i] - FD_H).max(0.0);
            let fd = (loss(&p, &rgb) - loss(&m, &rgb)) / (p[i] - m[i]);
            worst = worst.max(rel_err(ds[i], fd));
            let k = r.random_range(0..3);
            let mut p = rgb.clone();
            p[i][k] += FD_H;
            let mut m = rgb.clone();
            m[i][k] -= FD_H;
            let fd = (loss(&sigma, &p) - loss(&sigma, &m)) / (2.0 * FD_H);
            worst = worst.max(rel_err(dc[i][k], fd));
            checked += 2;
        }
    }
    worst
}

/// One logged refiner invocation.
#[derive(Clone, Debug)]
pub struct RefineCall {
    pub frame: usize,
    pub step: usize,
    pub t: f64,
    pub hr_shape: (usize, usize, usize),
    pub lr_shape: (usize, usize, usize),
}

/// Refiner that logs every call and fails on the call indices in `fail_on`.
pub struct ScriptedRefiner {
    pub calls: Vec<RefineCall>,
    pub fail_on: Vec<usize>,
    pub fail_always: bool,
    pub native: Option<(usize, usize)>,
}

impl ScriptedRefiner {
    pub fn new() -> Self {
        ScriptedRefiner {
            calls: Vec::new(),
            fail_on: Vec::new(),
            fail_always: false,
            native: None,
        }
    }
}

impl Refiner for ScriptedRefiner {
    fn refine(&mut self, req: &RefineRequest) -> trinerflet::Result<Plane> {
        let index = self.calls.len();
        self.calls.push(RefineCall {
            frame: req.frame,
            step: req.step,
            t: req.t,
            hr_shape: req.hr_estimate.shape(),
            lr_shape: req.lr_gt.shape(),
        });
        if self.fail_always || self.fail_on.contains(&index) {
            return Err(trinerflet::Error::Refiner(format!("scripted failure {index}")));
        }
        Ok(req.hr_estimate.clone())
    }

    fn native_sizes(&self) -> Option<(usize, usize)> {
        self.native
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

/// Small super-resolution setup: 16x16 views, 2x upscaling, 60 steps.
pub fn sr_fixture() -> (SrConfig, TrainConfig, Dataset) {
    let (ds, _) = make_synthetic(SyntheticSpec::default(), 6, 16, 3).unwrap();
    let sr = SrConfig {
        l_lr: 1,
        l: 2,
        s_lr: 20,
        s: 60,
        s_refresh: 15,
        scale: 2,
        lr_rays: 32,
        hr_patch: 8,
        ..SrConfig::default()
    };
    let train = TrainConfig {
        samples_per_ray: 12,
        ..TrainConfig::default()
    };
    (sr, train, ds)
}

/// Records, for every level append, whether the earlier coefficients survived
/// bit for bit and the new ones start at zero.
#[derive(Default)]
pub struct NestingObserver {
    pub appends: Vec<(usize, usize, bool)>,
}

impl TrainObserver for NestingObserver {
    fn on_level_appended(&mut self, step: usize, before: &TriNeRFLet, after: &TriNeRFLet) {
        let mut ok = after.mlp().slices() == before.mlp().slices();
        for (b, a) in before.pyramids().iter().zip(after.pyramids()) {
            let (bs, as_) = (b.slices(), a.slices());
            ok &= as_.len() == bs.len() + 3;
            ok &= as_[..bs.len()] == bs[..];
            ok &= as_[bs.len()..].iter().all(|s| s.iter().all(|&v| v == 0.0));
        }
        self.appends.push((step, after.depth(), ok));
    }
}

/// Preset rows as printed in the published configuration table.
pub const PRESET_TABLE: [(&str, [f64; 11]); 4] = [
    ("small", [64.0, 4.0, 512.0, 1024.0, 16.0, 0.2, 64.0, 1.0, 2.0, 6_000.0, 17.0]),
    ("base-light", [64.0, 5.0, 512.0, 2048.0, 32.0, 0.4, 64.0, 1.0, 2.0, 10_000.0, 134.0]),
    ("base", [64.0, 5.0, 512.0, 2048.0, 32.0, 0.4, 64.0, 1.0, 2.0, 43_000.0, 134.0]),
    ("large", [64.0, 5.0, 512.0, 2048.0, 48.0, 0.6, 128.0, 1.0, 2.0, 83_000.0, 201.0]),
];

/// The first ten table fields as expanded by `trinerflet preset <name>`,
/// followed by the trainable parameter count in millions.
pub fn expanded_preset_fields(cfg: &toml::Table) -> [f64; 11] {
    let num = |k: &str| -> f64 {
        match &cfg[k] {
            toml::Value::Integer(i) => *i as f64,
            toml::Value::Float(f) => *f,
            other => panic!("{k} is {other:?}"),
        }
    };
    let keys = ["n_ll", "levels", "n_base", "n_final", "channels", "gamma", "width", "d_density", "d_color", "total_steps"];
    let mut out = [0.0; 11];
    for (o, k) in out.iter_mut().zip(keys) {
        *o = num(k);
    }
    out[10] = (num("n_final").powi(2) * num("channels") / 1e6).round();
    out
}
