//! Camera rays, depth sampling, and front-to-back alpha compositing.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{encode_direction, field_backward, field_eval, EvalOptions, FieldOutput, MlpWeights};
use crate::geom::{self, Aabb, Vec3};
use crate::triplane::{sample_features, sample_features_backward, FeaturePlanes, Footprint, TriNeRFLet};
use crate::wavelet::Plane;

/// Pinhole camera, OpenGL convention: looks down its local `-z`, `+y` up,
/// image rows grow downward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-world, row-major.
    pub c2w: [[f64; 4]; 4],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        focal: f64,
        width: usize,
        height: usize,
        c2w: [[f64; 4]; 4],
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Camera {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            c2w,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Config(format!("focal length {} must be positive", self.focal)));
        }
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(Error::Config(format!("need 0 <= near < far, got {} and {}", self.near, self.far)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("empty image".into()));
        }
        if self.c2w.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera pose".into()));
        }
        let r = |i: usize, j: usize| self.c2w[i][j];
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..3).map(|k| r(k, a) * r(k, b)).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-6 {
                    return Err(Error::Config("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn origin(&self) -> Vec3 {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    /// Same view at `factor` times the resolution.
    pub fn scaled(&self, factor: f64) -> Camera {
        Camera {
            focal: self.focal * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width: (self.width as f64 * factor).round() as usize,
            height: (self.height as f64 * factor).round() as usize,
            ..*self
        }
    }

    /// Camera at `eye` looking at `target` with world `up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize, near: f64, far: f64) -> Result<Camera> {
        let back = geom::normalize(geom::sub(eye, target));
        let right = geom::normalize(geom::cross(up, back));
        let true_up = geom::cross(back, right);
        let c2w = [
            [right[0], true_up[0], back[0], eye[0]],
            [right[1], true_up[1], back[1], eye[1]],
            [right[2], true_up[2], back[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Camera::new(focal, width, height, c2w, near, far)
    }

    /// Ray through the centre of pixel `(u, v)` (column, row).
    pub fn ray(&self, u: usize, v: usize) -> Result<Ray> {
        if u >= self.width || v >= self.height {
            return Err(Error::Range(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.ray_at(u as f64 + 0.5, v as f64 + 0.5))
    }

    /// Ray through continuous image position `(x, y)` in pixel units.
    pub fn ray_at(&self, x: f64, y: f64) -> Ray {
        let d = [(x - self.cx) / self.focal, -(y - self.cy) / self.focal, -1.0];
        let m = &self.c2w;
        let world = [
            m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2],
            m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2],
            m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2],
        ];
        Ray {
            origin: self.origin(),
            dir: geom::normalize(world),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        geom::add(self.origin, geom::scale(self.dir, t))
    }
}

pub fn make_rays(cam: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(u, v)| cam.ray(u, v)).collect()
}

/// `n` depths in `[near, far]`: bin midpoints, or one uniform draw per bin.
pub fn sample_depths<R: Rng + ?Sized>(near: f64, far: f64, n: usize, stratified: bool, rng: &mut R) -> Vec<f64> {
    let step = (far - near) / n as f64;
    (0..n)
        .map(|i| {
            let jitter = if stratified { rng.random::<f64>() } else { 0.5 };
            near + (i as f64 + jitter) * step
        })
        .collect()
}

/// Interval lengths `t_{i+1} - t_i`; the last one is `(far - near) / n`.
pub fn deltas(t: &[f64], near: f64, far: f64) -> Vec<f64> {
    let n = t.len();
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if n > 0 {
        d.push((far - near) / n as f64);
    }
    d
}

/// Per-sample state of a set of rays. Ray `r` owns samples `offsets[r]..offsets[r+1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySampleBatch {
    pub offsets: Vec<usize>,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
}

impl RaySampleBatch {
    pub fn ray_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn range(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }
}

/// Result of compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// `T_1 .. T_N` followed by the residual transmittance `T_{N+1}`.
    pub transmittance: Vec<f64>,
}

/// `C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_{N+1} * background`.
pub fn composite(delta: &[f64], sigma: &[f64], rgb: &[[f64; 3]], background: [f64; 3]) -> Result<Composite> {
    let n = sigma.len();
    if delta.len() != n || rgb.len() != n {
        return Err(Error::Shape("composite inputs differ in length".into()));
    }
    let mut trans = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n);
    let mut t = 1.0;
    let mut color = [0.0; 3];
    for i in 0..n {
        if sigma[i] < 0.0 || sigma[i].is_nan() {
            return Err(Error::Contract(format!("density {} at sample {i}", sigma[i])));
        }
        trans.push(t);
        let survive = (-sigma[i] * delta[i]).exp();
        let w = t * (1.0 - survive);
        for k in 0..3 {
            color[k] += w * rgb[i][k];
        }
        weights.push(w);
        t *= survive;
    }
    trans.push(t);
    for k in 0..3 {
        color[k] += t * background[k];
    }
    Ok(Composite {
        color,
        opacity: 1.0 - t,
        weights,
        transmittance: trans,
    })
}

/// Gradients of `<d_color, C>` with respect to every `sigma_i` and `c_i`.
pub fn composite_backward(
    delta: &[f64],
    rgb: &[[f64; 3]],
    background: [f64; 3],
    fwd: &Composite,
    d_color: [f64; 3],
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = rgb.len();
    let mut d_sigma = vec![0.0; n];
    let mut d_rgb = vec![[0.0; 3]; n];
    // suffix = sum_{i > k} w_i <d_color, c_i - bg>
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let proj: f64 = (0..3).map(|j| d_color[j] * (rgb[k][j] - background[j])).sum();
        d_sigma[k] = delta[k] * (fwd.transmittance[k + 1] * proj - suffix);
        suffix += fwd.weights[k] * proj;
        for j in 0..3 {
            d_rgb[k][j] = fwd.weights[k] * d_color[j];
        }
    }
    (d_sigma, d_rgb)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub background: [f64; 3],
    /// Rays per chunk for full-image rendering.
    pub chunk: usize,
    #[serde(skip)]
    pub logit_override: Option<f64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            samples_per_ray: 128,
            stratified: false,
            background: [1.0; 3],
            chunk: 4096,
            logit_override: None,
        }
    }
}

/// Forward state of one rendered ray set, kept for the backward pass.
pub struct RenderPass {
    pub batch: RaySampleBatch,
    pub composites: Vec<Composite>,
    footprints: Vec<Footprint>,
    field: Option<FieldOutput>,
    background: [f64; 3],
    side: usize,
    channels: usize,
}

impl RenderPass {
    pub fn colors(&self) -> Vec<[f64; 3]> {
        self.composites.iter().map(|c| c.color).collect()
    }

    /// Back-propagates per-ray color gradients to feature-plane and MLP gradients.
    pub fn backward(&self, mlp: &MlpWeights, d_colors: &[[f64; 3]]) -> Result<([Plane; 3], MlpWeights)> {
        if d_colors.len() != self.composites.len() {
            return Err(Error::Shape("one color gradient per ray expected".into()));
        }
        let n = self.batch.sigma.len();
        let Some(field) = &self.field else {
            return Ok((
                std::array::from_fn(|_| Plane::zeros(self.side, self.side, self.channels)),
                MlpWeights::zeros(mlp.config, mlp.feature_width),
            ));
        };
        let mut d_sigma = Array1::zeros(n);
        let mut d_rgb = Array2::zeros((n, 3));
        for (r, comp) in self.composites.iter().enumerate() {
            let range = self.batch.range(r);
            if range.is_empty() {
                continue;
            }
            let (ds, dc) = composite_backward(
                &self.batch.delta[range.clone()],
                &self.batch.rgb[range.clone()],
                self.background,
                comp,
                d_colors[r],
            );
            for (k, i) in range.enumerate() {
                d_sigma[i] = ds[k];
                for j in 0..3 {
                    d_rgb[[i, j]] = dc[k][j];
                }
            }
        }
        let grads = field_backward(field, mlp, &d_sigma, &d_rgb)?;
        let planes = sample_features_backward(self.side, self.channels, &self.footprints, grads.features.view());
        Ok((planes, grads.weights))
    }
}

/// Renders a set of rays through the given feature planes.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<R: Rng + ?Sized>(
    planes: &FeaturePlanes,
    mlp: &MlpWeights,
    bbox: &Aabb,
    rays: &[Ray],
    near: f64,
    far: f64,
    opts: &RenderOptions,
    retain: bool,
    rng: &mut R,
) -> Result<RenderPass> {
    let mut batch = RaySampleBatch {
        offsets: vec![0],
        ..Default::default()
    };
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    let bands = mlp.config.dir_bands;
    for ray in rays {
        if let Some((t0, t1)) = bbox.intersect(ray.origin, ray.dir) {
            let lo = t0.max(near);
            let hi = t1.min(far);
            if lo < hi {
                let t = sample_depths(lo, hi, opts.samples_per_ray, opts.stratified, rng);
                let d = deltas(&t, lo, hi);
                let enc = encode_direction(ray.dir, bands)?;
                for &ti in &t {
                    points.push(ray.at(ti));
                    dirs.push(enc.clone());
                }
                batch.t.extend(t);
                batch.delta.extend(d);
            }
        }
        batch.offsets.push(batch.t.len());
    }
    let side = planes.side();
    let channels = planes.channels();
    let n = points.len();
    let (field, footprints) = if n > 0 {
        let (features, footprints) = sample_features(planes, bbox, &points)?;
        let width = mlp.config.dir_width();
        let flat: Vec<f64> = dirs.into_iter().flatten().collect();
        let dir_mat = Array2::from_shape_vec((n, width), flat).expect("direction matrix");
        let out = field_eval(
            features.view(),
            dir_mat.view(),
            mlp,
            EvalOptions {
                retain,
                logit_override: opts.logit_override,
            },
        )?;
        batch.sigma = out.sigma.to_vec();
        batch.rgb = out.rgb.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        (Some(out), footprints)
    } else {
        (None, Vec::new())
    };
    let mut composites = Vec::with_capacity(rays.len());
    for r in 0..rays.len() {
        let range = batch.range(r);
        composites.push(composite(
            &batch.delta[range.clone()],
            &batch.sigma[range.clone()],
            &batch.rgb[range],
            opts.background,
        )?);
    }
    Ok(RenderPass {
        batch,
        composites,
        footprints: if retain { footprints } else { Vec::new() },
        field: if retain { field } else { None },
        background: opts.background,
        side,
        channels,
    })
}

/// Renders a full `height × width × 3` image at the given wavelet depth.
pub fn render_image<R: Rng + ?Sized>(
    model: &TriNeRFLet,
    cam: &Camera,
    depth: usize,
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<Plane> {
    let planes = model.reconstruct_planes(depth)?;
    render_image_with(&planes, model, cam, opts, rng)
}

pub fn render_image_with<R: Rng + ?Sized>(
    planes: &FeaturePlanes,
    model: &TriNeRFLet,
    cam: &Camera,
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<Plane> {
    cam.validate()?;
    let pixels: Vec<(usize, usize)> = (0..cam.height)
        .flat_map(|v| (0..cam.width).map(move |u| (u, v)))
        .collect();
    let mut img = Plane::zeros(cam.height, cam.width, 3);
    let chunk = opts.chunk.max(1);
    let bbox = model.bbox();
    for (ci, px) in pixels.chunks(chunk).enumerate() {
        let rays = make_rays(cam, px)?;
        let pass = render_rays(planes, model.mlp(), &bbox, &rays, cam.near, cam.far, opts, false, rng)?;
        for (k, c) in pass.composites.iter().enumerate() {
            let idx = ci * chunk + k;
            let (u, v) = (idx % cam.width, idx / cam.width);
            for j in 0..3 {
                img.set(v, u, j, c.color[j].clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const IDENTITY: [[f64; 4]; 4] = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];

    #[test]
    fn principal_ray_is_optical_axis() {
        let cam = Camera::new(10.0, 5, 5, IDENTITY, 0.1, 5.0).unwrap();
        let r = cam.ray(2, 2).unwrap();
        assert_eq!(r.origin, [0.0, 0.0, 0.0]);
        assert!((r.dir[2] + 1.0).abs() < 1e-15 && r.dir[0].abs() < 1e-15);
        assert!(matches!(cam.ray(5, 0), Err(Error::Range(_))));
    }

    #[test]
    fn rotated_pose_rotates_axis() {
        // 90 degrees about y: local -z maps to world -x
        let pose = [
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 1.0, 0.0, 2.0],
            [-1.0, 0.0, 0.0, 3.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let cam = Camera::new(10.0, 5, 5, pose, 0.1, 5.0).unwrap();
        let r = cam.ray(2, 2).unwrap();
        assert_eq!(r.origin, [1.0, 2.0, 3.0]);
        assert!((r.dir[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        assert!(Camera::new(0.0, 4, 4, IDENTITY, 0.1, 1.0).is_err());
        assert!(Camera::new(1.0, 4, 4, IDENTITY, 1.0, 0.5).is_err());
        let mut skew = IDENTITY;
        skew[0][1] = 0.1;
        assert!(Camera::new(1.0, 4, 4, skew, 0.1, 1.0).is_err());
    }

    #[test]
    fn single_midpoint_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_depths(2.0, 6.0, 1, false, &mut rng), vec![4.0]);
    }

    #[test]
    fn stratified_is_reproducible() {
        let a = sample_depths(0.0, 1.0, 8, true, &mut ChaCha8Rng::seed_from_u64(11));
        let b = sample_depths(0.0, 1.0, 8, true, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn empty_space_is_background() {
        let c = composite(&[0.5; 4], &[0.0; 4], &[[0.2, 0.3, 0.4]; 4], [1.0, 0.5, 0.0]).unwrap();
        assert_eq!(c.color, [1.0, 0.5, 0.0]);
        assert_eq!(c.opacity, 0.0);
    }

    #[test]
    fn half_absorbing_sample() {
        let ln2 = std::f64::consts::LN_2;
        let c = composite(&[1.0], &[ln2], &[[1.0, 0.0, 0.0]], [0.0; 3]).unwrap();
        assert!((c.color[0] - 0.5).abs() < 1e-15);
        assert_eq!(c.color[1], 0.0);
        assert!((c.opacity - 0.5).abs() < 1e-15);
    }

    #[test]
    fn negative_density_is_rejected() {
        assert!(matches!(
            composite(&[1.0], &[-0.1], &[[0.0; 3]], [0.0; 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn color_gradient_is_weight() {
        let delta = [0.3, 0.2, 0.4];
        let sigma = [1.0, 2.0, 0.5];
        let rgb = [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [0.9, 0.1, 0.0]];
        let c = composite(&delta, &sigma, &rgb, [1.0; 3]).unwrap();
        let (_, d_rgb) = composite_backward(&delta, &rgb, [1.0; 3], &c, [1.0, 0.0, 0.0]);
        for i in 0..3 {
            let alpha = 1.0 - (-sigma[i] * delta[i]).exp();
            assert_eq!(d_rgb[i][0], c.transmittance[i] * alpha);
            assert_eq!(d_rgb[i][1], 0.0);
        }
    }

    #[test]
    fn zero_density_sigma_gradient() {
        let delta = [0.3, 0.2, 0.4];
        let rgb = [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [0.9, 0.1, 0.0]];
        let bg = [1.0, 0.5, 0.25];
        let c = composite(&delta, &[0.0; 3], &rgb, bg).unwrap();
        let up = [0.7, -0.2, 1.3];
        let (ds, _) = composite_backward(&delta, &rgb, bg, &c, up);
        for i in 0..3 {
            let expect: f64 = (0..3).map(|j| up[j] * delta[i] * (rgb[i][j] - bg[j])).sum();
            assert!((ds[i] - expect).abs() < 1e-15);
        }
    }
}
