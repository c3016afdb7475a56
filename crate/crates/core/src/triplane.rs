//! The scene model: three axis-aligned wavelet pyramids and the field MLP.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, MlpWeights};
use crate::geom::{Aabb, Vec3};
use crate::wavelet::{FilterKind, Plane, WaveletPyramid};

/// Plane order used everywhere: features are concatenated XY ‖ XZ ‖ YZ.
pub const PLANE_NAMES: [&str; 3] = ["xy", "xz", "yz"];

/// World axes feeding (width, height) of each plane.
const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Half-width of the uniform LL initialization.
pub const LL_INIT_RANGE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_ll: usize,
    /// Initial number of detail levels.
    pub levels: usize,
    pub channels: usize,
    pub filter: FilterKind,
    pub bbox: Aabb,
    pub field: FieldConfig,
}

/// Reconstructed feature planes at one depth, scaled by `2^depth` so a
/// smooth plane reads the same magnitude at every depth.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePlanes {
    pub depth: usize,
    pub scale: f64,
    pub planes: [Plane; 3],
}

impl FeaturePlanes {
    pub fn side(&self) -> usize {
        self.planes[0].height()
    }

    pub fn channels(&self) -> usize {
        self.planes[0].channels()
    }

    pub fn feature_width(&self) -> usize {
        3 * self.channels()
    }
}

/// Bilinear footprint of one point on the three planes: texel indices and weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub texels: [[usize; 4]; 3],
    pub weights: [[f64; 4]; 3],
}

#[derive(Clone, Debug)]
pub struct TriNeRFLet {
    pyramids: [WaveletPyramid; 3],
    bbox: Aabb,
    mlp: MlpWeights,
    cache: Option<FeaturePlanes>,
}

impl PartialEq for TriNeRFLet {
    fn eq(&self, other: &Self) -> bool {
        self.pyramids == other.pyramids && self.bbox == other.bbox && self.mlp == other.mlp
    }
}

/// Flattened per-parameter gradients in [`TriNeRFLet::param_slices`] order.
pub type ParamGrads = Vec<Vec<f64>>;

impl TriNeRFLet {
    /// LL uniform in `[-LL_INIT_RANGE, LL_INIT_RANGE]`, detail bands zero, MLP Kaiming-uniform.
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        if !config.bbox.is_valid() {
            return Err(Error::Config("invalid bounding box".into()));
        }
        if config.n_ll == 0 || config.channels == 0 {
            return Err(Error::Config("n_ll and channels must be positive".into()));
        }
        let pyramids = std::array::from_fn(|_| {
            let mut p = WaveletPyramid::zeros(config.n_ll, config.channels, config.levels, config.filter);
            for v in p.ll.data_mut() {
                *v = rng.random_range(-LL_INIT_RANGE..LL_INIT_RANGE);
            }
            p
        });
        let mlp = MlpWeights::init(config.field, 3 * config.channels, rng);
        Ok(TriNeRFLet {
            pyramids,
            bbox: config.bbox,
            mlp,
            cache: None,
        })
    }

    pub fn from_parts(pyramids: [WaveletPyramid; 3], bbox: Aabb, mlp: MlpWeights) -> Result<Self> {
        for p in &pyramids {
            p.validate()?;
        }
        let (a, b) = (&pyramids[0], &pyramids[1..]);
        for p in b {
            if p.n_ll() != a.n_ll() || p.depth() != a.depth() || p.channels() != a.channels() || p.filter != a.filter {
                return Err(Error::Shape("the three pyramids must share shape parameters".into()));
            }
        }
        if mlp.feature_width != 3 * a.channels() {
            return Err(Error::Shape(format!(
                "MLP expects {} features, planes provide {}",
                mlp.feature_width,
                3 * a.channels()
            )));
        }
        mlp.validate()?;
        if !bbox.is_valid() {
            return Err(Error::Config("invalid bounding box".into()));
        }
        Ok(TriNeRFLet {
            pyramids,
            bbox,
            mlp,
            cache: None,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_ll: self.n_ll(),
            levels: self.depth(),
            channels: self.channels(),
            filter: self.filter(),
            bbox: self.bbox,
            field: self.mlp.config,
        }
    }

    pub fn pyramids(&self) -> &[WaveletPyramid; 3] {
        &self.pyramids
    }

    /// Mutable coefficient access; invalidates the plane cache.
    pub fn pyramids_mut(&mut self) -> &mut [WaveletPyramid; 3] {
        self.cache = None;
        &mut self.pyramids
    }

    pub fn mlp(&self) -> &MlpWeights {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut MlpWeights {
        &mut self.mlp
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn n_ll(&self) -> usize {
        self.pyramids[0].n_ll()
    }

    pub fn depth(&self) -> usize {
        self.pyramids[0].depth()
    }

    pub fn channels(&self) -> usize {
        self.pyramids[0].channels()
    }

    pub fn filter(&self) -> FilterKind {
        self.pyramids[0].filter
    }

    pub fn feature_width(&self) -> usize {
        3 * self.channels()
    }

    /// Feature planes from the first `depth` levels (no caching).
    pub fn reconstruct_planes(&self, depth: usize) -> Result<FeaturePlanes> {
        if depth > self.depth() {
            return Err(Error::Range(format!("depth {depth} exceeds model depth {}", self.depth())));
        }
        let scale = 2f64.powi(depth as i32);
        let mut planes = Vec::with_capacity(3);
        for p in &self.pyramids {
            let mut plane = p.reconstruct_to(depth)?;
            plane.scale(scale);
            planes.push(plane);
        }
        let planes: [Plane; 3] = planes.try_into().expect("three planes");
        Ok(FeaturePlanes { depth, scale, planes })
    }

    /// Cached variant of [`Self::reconstruct_planes`]; the cache is dropped on any coefficient change.
    pub fn planes_cached(&mut self, depth: usize) -> Result<&FeaturePlanes> {
        let hit = matches!(&self.cache, Some(c) if c.depth == depth);
        if !hit {
            self.cache = Some(self.reconstruct_planes(depth)?);
        }
        Ok(self.cache.as_ref().expect("cache filled"))
    }

    pub fn cached_depth(&self) -> Option<usize> {
        self.cache.as_ref().map(|c| c.depth)
    }

    pub fn invalidate_cache(&mut self) {
        self.cache = None;
    }

    /// Adds an all-zero finer level to every pyramid.
    pub fn append_level(&mut self) {
        self.cache = None;
        for p in &mut self.pyramids {
            p.push_zero_level();
        }
    }

    /// `sum_l |LH_l|_1 + |HL_l|_1 + |HH_l|_1` over the three planes.
    pub fn high_freq_l1(&self) -> f64 {
        self.pyramids.iter().map(WaveletPyramid::detail_l1).sum()
    }

    pub fn detail_coefficients(&self) -> impl Iterator<Item = f64> + '_ {
        self.pyramids
            .iter()
            .flat_map(|p| p.levels.iter())
            .flat_map(|l| l.bands())
            .flat_map(|b| b.data().iter().copied())
    }

    pub fn sample_features(&self, points: &[Vec3], depth: usize) -> Result<Array2<f64>> {
        let planes = self.reconstruct_planes(depth)?;
        Ok(sample_features(&planes, &self.bbox, points)?.0)
    }

    /// Number of parameter slices holding MLP weights (they come first).
    pub fn mlp_slice_count(&self) -> usize {
        2 * self.mlp.layers().count()
    }

    /// All trainable parameters: MLP (per layer W, b), the three LL bands,
    /// then level by level the LH, HL, HH bands of each plane. Appending a
    /// level only appends slices.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.mlp.slices();
        for p in &self.pyramids {
            out.push(p.ll.data());
        }
        for lvl in 0..self.depth() {
            for p in &self.pyramids {
                for b in p.levels[lvl].bands() {
                    out.push(b.data());
                }
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.cache = None;
        let depth = self.depth();
        let mut out = self.mlp.slices_mut();
        let mut lls = Vec::new();
        let mut levels: Vec<Vec<&mut [f64]>> = (0..depth).map(|_| Vec::new()).collect();
        for p in self.pyramids.iter_mut() {
            lls.push(p.ll.data_mut());
            for (lvl, l) in p.levels.iter_mut().enumerate() {
                for band in l.bands_mut() {
                    levels[lvl].push(band.data_mut());
                }
            }
        }
        out.extend(lls);
        for lvl in levels {
            out.extend(lvl);
        }
        out
    }

    /// Marks which parameter slices are wavelet detail bands.
    pub fn detail_slice_mask(&self) -> Vec<bool> {
        let m = self.mlp_slice_count();
        let total = m + 3 + 9 * self.depth();
        (0..total).map(|i| i >= m + 3).collect()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.param_slices().iter().map(|s| vec![0.0; s.len()]).collect()
    }

    /// Chain rule from feature-plane gradients to coefficient gradients,
    /// accumulated into `grads` (in parameter order).
    pub fn accumulate_plane_grads(&self, plane_grads: &[Plane; 3], depth: usize, grads: &mut ParamGrads) -> Result<()> {
        let m = self.mlp_slice_count();
        let scale = 2f64.powi(depth as i32);
        for (pi, (pyr, g)) in self.pyramids.iter().zip(plane_grads).enumerate() {
            let mut g = g.clone();
            g.scale(scale);
            let adj = pyr.reconstruct_adjoint(&g, depth)?;
            add_into(&mut grads[m + pi], adj.ll.data());
            for (lvl, l) in adj.levels.iter().enumerate().take(depth) {
                for (bi, band) in l.bands().into_iter().enumerate() {
                    add_into(&mut grads[m + 3 + lvl * 9 + pi * 3 + bi], band.data());
                }
            }
        }
        Ok(())
    }

    /// Copy of the model with every parameter rounded to `f32`.
    pub fn rounded_to_f32(&self) -> Self {
        let mut m = self.clone();
        for s in m.param_slices_mut() {
            for v in s.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        m
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Half-texel-centred linear interpolation weights along one axis.
#[inline]
fn linear_taps(u: f64, n: usize) -> (usize, usize, f64) {
    let f = u * n as f64 - 0.5;
    if n == 1 || f <= 0.0 {
        return (0, 0, 0.0);
    }
    let last = (n - 1) as f64;
    if f >= last {
        return (n - 1, n - 1, 0.0);
    }
    let i0 = f.floor() as usize;
    (i0, i0 + 1, f - i0 as f64)
}

const BBOX_TOL: f64 = 1e-9;

/// Maps a world point to `[0, 1]^3` by the box; points farther than a
/// rounding tolerance outside the box are a contract violation.
pub fn normalize_point(bbox: &Aabb, p: Vec3) -> Result<Vec3> {
    let mut out = [0.0; 3];
    for i in 0..3 {
        let u = (p[i] - bbox.min[i]) / (bbox.max[i] - bbox.min[i]);
        if !u.is_finite() || !(-BBOX_TOL..=1.0 + BBOX_TOL).contains(&u) {
            return Err(Error::Contract(format!("point {p:?} lies outside the scene box")));
        }
        out[i] = u.clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn footprint(n: usize, u: Vec3) -> Footprint {
    let mut texels = [[0usize; 4]; 3];
    let mut weights = [[0.0; 4]; 3];
    for (pi, &(ax, ay)) in PLANE_AXES.iter().enumerate() {
        let (x0, x1, tx) = linear_taps(u[ax], n);
        let (y0, y1, ty) = linear_taps(u[ay], n);
        texels[pi] = [y0 * n + x0, y0 * n + x1, y1 * n + x0, y1 * n + x1];
        weights[pi] = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
    }
    Footprint { texels, weights }
}

/// Bilinear samples of the three planes, concatenated XY ‖ XZ ‖ YZ (`n × 3C`).
pub fn sample_features(planes: &FeaturePlanes, bbox: &Aabb, points: &[Vec3]) -> Result<(Array2<f64>, Vec<Footprint>)> {
    let n = planes.side();
    let c = planes.channels();
    let mut feats = Array2::zeros((points.len(), 3 * c));
    let mut prints = Vec::with_capacity(points.len());
    for (row, &p) in points.iter().enumerate() {
        let fp = footprint(n, normalize_point(bbox, p)?);
        let mut out = feats.row_mut(row);
        let out = out.as_slice_mut().expect("row-major");
        for pi in 0..3 {
            let data = planes.planes[pi].data();
            let dst = &mut out[pi * c..(pi + 1) * c];
            for k in 0..4 {
                let w = fp.weights[pi][k];
                if w == 0.0 {
                    continue;
                }
                let src = &data[fp.texels[pi][k] * c..(fp.texels[pi][k] + 1) * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        prints.push(fp);
    }
    Ok((feats, prints))
}

/// Transpose of [`sample_features`]: scatters feature gradients onto plane gradients.
pub fn sample_features_backward(side: usize, channels: usize, prints: &[Footprint], grad: ArrayView2<f64>) -> [Plane; 3] {
    let mut out: [Plane; 3] = std::array::from_fn(|_| Plane::zeros(side, side, channels));
    let c = channels;
    for (fp, g) in prints.iter().zip(grad.rows()) {
        for pi in 0..3 {
            let data = out[pi].data_mut();
            for k in 0..4 {
                let w = fp.weights[pi][k];
                if w == 0.0 {
                    continue;
                }
                let t = fp.texels[pi][k];
                for ch in 0..c {
                    data[t * c + ch] += w * g[pi * c + ch];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(levels: usize) -> ModelConfig {
        ModelConfig {
            n_ll: 4,
            levels,
            channels: 2,
            filter: FilterKind::Haar,
            bbox: Aabb::cube(1.0),
            field: FieldConfig {
                width: 8,
                ..FieldConfig::default()
            },
        }
    }

    fn model(levels: usize, seed: u64) -> TriNeRFLet {
        TriNeRFLet::new(&config(levels), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn init_has_zero_details_and_small_ll() {
        let m = model(2, 1);
        assert_eq!(m.high_freq_l1(), 0.0);
        for p in m.pyramids() {
            assert!(p.ll.max_abs() <= LL_INIT_RANGE);
        }
    }

    #[test]
    fn depth_zero_is_ll() {
        let m = model(2, 2);
        let fp = m.reconstruct_planes(0).unwrap();
        for (a, b) in fp.planes.iter().zip(m.pyramids()) {
            assert_eq!(a, &b.ll);
        }
        assert!(matches!(m.reconstruct_planes(3), Err(Error::Range(_))));
    }

    #[test]
    fn constant_planes_sample_exactly() {
        let mut m = model(2, 3);
        for p in m.pyramids_mut() {
            p.ll = Plane::filled(4, 4, 2, 0.25);
        }
        let f = m.sample_features(&[[0.0, 0.0, 0.0], [0.99, -0.7, 0.3]], 2).unwrap();
        assert!(f.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn grid_node_returns_texel_value() {
        let m = model(0, 4);
        // texel centre (i + 0.5) / 4 in normalized units for i = 1, 2, 3
        let u = [1.5 / 4.0, 2.5 / 4.0, 3.5 / 4.0];
        let p = [u[0] * 2.0 - 1.0, u[1] * 2.0 - 1.0, u[2] * 2.0 - 1.0];
        let f = m.sample_features(&[p], 0).unwrap();
        let py = m.pyramids();
        assert_eq!(f[[0, 0]], py[0].ll.get(2, 1, 0));
        assert_eq!(f[[0, 3]], py[1].ll.get(3, 1, 1));
        assert_eq!(f[[0, 4]], py[2].ll.get(3, 2, 0));
    }

    #[test]
    fn outside_point_is_rejected() {
        let m = model(1, 5);
        assert!(matches!(m.sample_features(&[[1.1, 0.0, 0.0]], 1), Err(Error::Contract(_))));
        // rounding-level excursions are accepted
        assert!(m.sample_features(&[[1.0 + 1e-12, 0.0, 0.0]], 1).is_ok());
    }

    #[test]
    fn cache_is_transparent_and_invalidated() {
        let mut m = model(2, 6);
        let direct = m.reconstruct_planes(2).unwrap();
        assert_eq!(m.planes_cached(2).unwrap(), &direct);
        assert_eq!(m.cached_depth(), Some(2));
        m.pyramids_mut()[0].levels[1].hh.set(0, 0, 0, 1.0);
        assert_eq!(m.cached_depth(), None);
        let changed = m.planes_cached(2).unwrap().clone();
        assert_ne!(changed, direct);
        assert_eq!(changed, m.reconstruct_planes(2).unwrap());
    }

    #[test]
    fn param_order_is_stable_under_append() {
        let mut m = model(1, 7);
        let before: Vec<Vec<f64>> = m.param_slices().iter().map(|s| s.to_vec()).collect();
        m.append_level();
        let after = m.param_slices();
        assert_eq!(after.len(), before.len() + 9);
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.as_slice(), *b);
        }
        let mask = m.detail_slice_mask();
        assert_eq!(mask.len(), after.len());
        assert_eq!(mask.iter().filter(|&&d| d).count(), 18);
    }

    #[test]
    fn single_detail_coefficient_l1() {
        let mut m = model(2, 8);
        m.pyramids_mut()[2].levels[0].lh.set(1, 1, 1, -3.0);
        assert_eq!(m.high_freq_l1(), 3.0);
    }
}
