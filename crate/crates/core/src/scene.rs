//! Analytic test scene: a shaded sphere seen from a ring of cameras.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Frame, Split};
use crate::error::{Error, Result};
use crate::geom::{self, Aabb, Vec3};
use crate::renderer::{Camera, Ray};
use crate::wavelet::Plane;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub radius: f64,
    pub center: Vec3,
    /// Amplitude of latitude stripes on top of the normal-based color.
    pub stripes: f64,
    pub stripe_frequency: f64,
    pub background: [f64; 3],
    pub camera_distance: f64,
    pub camera_angle_x: f64,
    /// Train cameras alternate between these elevations (radians).
    pub elevations: [f64; 2],
    pub holdout_views: usize,
    pub holdout_elevation: f64,
    /// Random azimuth perturbation, as a fraction of the view spacing.
    pub jitter: f64,
    pub bbox_half_extent: f64,
    /// Samples per pixel side when rendering ground truth.
    pub supersample: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            radius: 0.6,
            center: [0.0; 3],
            stripes: 0.0,
            stripe_frequency: 6.0,
            background: [1.0; 3],
            camera_distance: 3.0,
            camera_angle_x: 0.7,
            elevations: [0.25, 0.6],
            holdout_views: 4,
            holdout_elevation: 0.4,
            jitter: 0.2,
            bbox_half_extent: 1.0,
            supersample: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
}

impl SyntheticScene {
    pub fn new(spec: SyntheticSpec) -> Self {
        SyntheticScene { spec }
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::cube(self.spec.bbox_half_extent)
    }

    pub fn surface_color(&self, n: Vec3) -> [f64; 3] {
        let s = &self.spec;
        let stripe = 1.0 + s.stripes * (s.stripe_frequency * std::f64::consts::PI * n[2]).sin();
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = ((0.5 + 0.4 * n[k]) * stripe).clamp(0.0, 1.0);
        }
        c
    }

    pub fn trace(&self, ray: &Ray) -> [f64; 3] {
        let s = &self.spec;
        let oc = geom::sub(ray.origin, s.center);
        let b = geom::dot(oc, ray.dir);
        let c = geom::dot(oc, oc) - s.radius * s.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return s.background;
        }
        let t = -b - disc.sqrt();
        if t <= 0.0 {
            return s.background;
        }
        let n = geom::scale(geom::sub(ray.at(t), s.center), 1.0 / s.radius);
        self.surface_color(n)
    }

    /// Ground-truth image with `ss x ss` samples per pixel averaged.
    pub fn render(&self, cam: &Camera, ss: usize) -> Plane {
        let ss = ss.max(1);
        let inv = 1.0 / (ss * ss) as f64;
        let mut img = Plane::zeros(cam.height, cam.width, 3);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let mut acc = [0.0; 3];
                for j in 0..ss {
                    for i in 0..ss {
                        let x = u as f64 + (i as f64 + 0.5) / ss as f64;
                        let y = v as f64 + (j as f64 + 0.5) / ss as f64;
                        let c = self.trace(&cam.ray_at(x, y));
                        for (a, v) in acc.iter_mut().zip(c) {
                            *a += v;
                        }
                    }
                }
                for (k, a) in acc.iter().enumerate() {
                    img.set(v, u, k, a * inv);
                }
            }
        }
        img
    }

    pub fn camera(&self, azimuth: f64, elevation: f64, resolution: usize) -> Result<Camera> {
        let s = &self.spec;
        let d = s.camera_distance;
        let eye = [
            d * elevation.cos() * azimuth.cos(),
            d * elevation.cos() * azimuth.sin(),
            d * elevation.sin(),
        ];
        let focal = 0.5 * resolution as f64 / (0.5 * s.camera_angle_x).tan();
        let reach = geom::norm(self.bbox().extent()) * 0.5;
        let near = (d - reach).max(0.05);
        let far = d + reach;
        Camera::look_at(eye, s.center, [0.0, 0.0, 1.0], focal, resolution, resolution, near, far)
    }
}

/// Renders `n_views` training views plus `spec.holdout_views` test views.
pub fn make_synthetic(spec: SyntheticSpec, n_views: usize, resolution: usize, seed: u64) -> Result<(Dataset, SyntheticScene)> {
    if n_views == 0 {
        return Err(Error::Config("at least one view is required".into()));
    }
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let scene = SyntheticScene::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = std::f64::consts::TAU / n_views as f64;
    let mut frames = Vec::new();
    for k in 0..n_views {
        let jitter = spec.jitter * step * (rng.random::<f64>() - 0.5);
        let cam = scene.camera(k as f64 * step + jitter, spec.elevations[k % 2], resolution)?;
        frames.push(Frame {
            id: k,
            image: scene.render(&cam, spec.supersample),
            camera: cam,
            split: Split::Train,
        });
    }
    let hstep = std::f64::consts::TAU / spec.holdout_views.max(1) as f64;
    for k in 0..spec.holdout_views {
        let cam = scene.camera((k as f64 + 0.5) * hstep + 0.5 * step, spec.holdout_elevation, resolution)?;
        frames.push(Frame {
            id: n_views + k,
            image: scene.render(&cam, spec.supersample),
            camera: cam,
            split: Split::Test,
        });
    }
    Ok((Dataset::new(frames, scene.bbox())?, scene))
}
