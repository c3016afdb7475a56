//! Point features plus view direction to density and color.
//!
//! Density branch: `3C -> [W]*D_density -> 1 + G` (ReLU hidden), density is
//! `exp(min(logit, logit_max))`. Color branch: `G + (3 + 6K) -> [W]*D_color -> 3`,
//! sigmoid output.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Hidden width `W`.
    pub width: usize,
    pub d_density: usize,
    pub d_color: usize,
    /// Geometry feature width `G` passed from the density to the color branch.
    pub geo_features: usize,
    /// Direction frequency bands `K`.
    pub dir_bands: usize,
    pub logit_max: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            width: 64,
            d_density: 1,
            d_color: 2,
            geo_features: 15,
            dir_bands: 4,
            logit_max: 15.0,
        }
    }
}

impl FieldConfig {
    pub fn dir_width(&self) -> usize {
        3 + 6 * self.dir_bands
    }
}

/// Frequency encoding of a unit direction: `[d, sin(2^0 pi d), cos(2^0 pi d), ...]`,
/// each block holding the three axes.
pub fn encode_direction(d: [f64; 3], bands: usize) -> Result<Vec<f64>> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("direction norm {norm} is not 1")));
    }
    let mut out = Vec::with_capacity(3 + 6 * bands);
    out.extend_from_slice(&d);
    for k in 0..bands {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(d.iter().map(|v| (f * v).sin()));
        out.extend(d.iter().map(|v| (f * v).cos()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    fn kaiming<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
            b: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w);
        z += &self.b;
        z
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }
}

/// Weights of both MLP branches.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub config: FieldConfig,
    pub feature_width: usize,
    pub density: Vec<Linear>,
    pub color: Vec<Linear>,
}

fn layer_dims(input: usize, width: usize, hidden: usize, output: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(hidden + 1);
    let mut prev = input;
    for _ in 0..hidden {
        dims.push((prev, width));
        prev = width;
    }
    dims.push((prev, output));
    dims
}

impl MlpWeights {
    #[allow(clippy::type_complexity)]
    fn dims(config: &FieldConfig, feature_width: usize) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        (
            layer_dims(feature_width, config.width, config.d_density, 1 + config.geo_features),
            layer_dims(
                config.geo_features + config.dir_width(),
                config.width,
                config.d_color,
                3,
            ),
        )
    }

    pub fn zeros(config: FieldConfig, feature_width: usize) -> Self {
        let (dd, cd) = Self::dims(&config, feature_width);
        MlpWeights {
            config,
            feature_width,
            density: dd.into_iter().map(|(i, o)| Linear::zeros(i, o)).collect(),
            color: cd.into_iter().map(|(i, o)| Linear::zeros(i, o)).collect(),
        }
    }

    /// Uniform Kaiming initialization scaled by fan-in; zero biases.
    pub fn init<R: Rng>(config: FieldConfig, feature_width: usize, rng: &mut R) -> Self {
        let (dd, cd) = Self::dims(&config, feature_width);
        MlpWeights {
            config,
            feature_width,
            density: dd.into_iter().map(|(i, o)| Linear::kaiming(i, o, rng)).collect(),
            color: cd.into_iter().map(|(i, o)| Linear::kaiming(i, o, rng)).collect(),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.density.iter().chain(self.color.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.density.iter_mut().chain(self.color.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameter slices in storage order (per layer: weights then biases).
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.w.as_slice().expect("standard layout"), l.b.as_slice().expect("standard layout")])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.layers_mut() {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let expect = Self::zeros(self.config, self.feature_width);
        for (a, b) in self.layers().zip(expect.layers()) {
            if a.w.dim() != b.w.dim() || a.b.len() != b.b.len() {
                return Err(Error::Shape(format!(
                    "layer {:?} does not match configured {:?}",
                    a.w.dim(),
                    b.w.dim()
                )));
            }
        }
        if self.layers().count() != expect.layers().count() {
            return Err(Error::Shape("layer count mismatch".into()));
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("MLP weight".into()));
        }
        Ok(())
    }
}

/// Activations kept by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct FieldTape {
    /// Inputs to each density layer.
    density_inputs: Vec<Array2<f64>>,
    /// Inputs to each color layer.
    color_inputs: Vec<Array2<f64>>,
    logits: Array1<f64>,
    logit_max: f64,
}

#[derive(Clone, Debug)]
pub struct FieldOutput {
    pub sigma: Array1<f64>,
    /// `n × 3`
    pub rgb: Array2<f64>,
    pub tape: Option<FieldTape>,
}

/// Gradients with respect to the field inputs and weights.
#[derive(Clone, Debug)]
pub struct FieldGrads {
    /// `n × 3C`
    pub features: Array2<f64>,
    pub weights: MlpWeights,
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// Keep activations for [`field_backward`].
    pub retain: bool,
    /// Replaces every density logit (test hook; `-inf` empties the scene).
    pub logit_override: Option<f64>,
}

/// Batched forward pass. `features` is `n × 3C`, `dirs` is `n × (3 + 6K)`.
pub fn field_eval(
    features: ArrayView2<f64>,
    dirs: ArrayView2<f64>,
    w: &MlpWeights,
    opts: EvalOptions,
) -> Result<FieldOutput> {
    let n = features.nrows();
    if dirs.nrows() != n {
        return Err(Error::Shape(format!("{n} feature rows but {} direction rows", dirs.nrows())));
    }
    if features.ncols() != w.feature_width || dirs.ncols() != w.config.dir_width() {
        return Err(Error::Shape(format!(
            "field expects {} feature and {} direction columns, got {} and {}",
            w.feature_width,
            w.config.dir_width(),
            features.ncols(),
            dirs.ncols()
        )));
    }
    if features.iter().chain(dirs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("field input".into()));
    }
    let g = w.config.geo_features;
    let mut density_inputs = Vec::new();
    let mut h = features.to_owned();
    let last = w.density.len() - 1;
    for (i, layer) in w.density.iter().enumerate() {
        let mut z = layer.forward(h.view());
        if i < last {
            relu_inplace(&mut z);
        }
        if opts.retain {
            density_inputs.push(std::mem::replace(&mut h, z));
        } else {
            h = z;
        }
    }
    let mut logits = h.column(0).to_owned();
    if let Some(v) = opts.logit_override {
        logits.fill(v);
    }
    let lmax = w.config.logit_max;
    let sigma = logits.mapv(|l| l.min(lmax).exp());

    let mut color_in = Array2::zeros((n, g + dirs.ncols()));
    color_in.slice_mut(s![.., ..g]).assign(&h.slice(s![.., 1..]));
    color_in.slice_mut(s![.., g..]).assign(&dirs);
    let mut color_inputs = Vec::new();
    let mut h = color_in;
    let last = w.color.len() - 1;
    for (i, layer) in w.color.iter().enumerate() {
        let mut z = layer.forward(h.view());
        if i < last {
            relu_inplace(&mut z);
        }
        if opts.retain {
            color_inputs.push(std::mem::replace(&mut h, z));
        } else {
            h = z;
        }
    }
    let rgb = h.mapv(sigmoid);
    if sigma.iter().any(|v| v.is_nan()) || rgb.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("field output".into()));
    }
    let tape = opts.retain.then(|| FieldTape {
        density_inputs,
        color_inputs,
        logits,
        logit_max: lmax,
    });
    Ok(FieldOutput { sigma, rgb, tape })
}

/// Backward through a chain of linear layers with ReLU between them.
/// `dz` is the gradient at the last layer's pre-activation. Returns the input gradient.
fn backprop_chain(layers: &[Linear], inputs: &[Array2<f64>], mut dz: Array2<f64>, grads: &mut [Linear]) -> Array2<f64> {
    for i in (0..layers.len()).rev() {
        let a = &inputs[i];
        grads[i].w = a.t().dot(&dz);
        grads[i].b = dz.sum_axis(Axis(0));
        let mut da = dz.dot(&layers[i].w.t());
        if i > 0 {
            // inputs[i] is relu(z_{i-1}); positive entries mark the active units
            ndarray::Zip::from(&mut da).and(a).for_each(|d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        dz = da;
    }
    dz
}

/// Gradients of a scalar loss given its gradients with respect to `sigma` and `rgb`.
pub fn field_backward(
    out: &FieldOutput,
    w: &MlpWeights,
    d_sigma: &Array1<f64>,
    d_rgb: &Array2<f64>,
) -> Result<FieldGrads> {
    let tape = out
        .tape
        .as_ref()
        .ok_or_else(|| Error::State("forward activations were not retained".into()))?;
    let n = out.sigma.len();
    if d_sigma.len() != n || d_rgb.dim() != (n, 3) {
        return Err(Error::Shape("upstream gradient shape".into()));
    }
    let g = w.config.geo_features;
    let mut grads = MlpWeights::zeros(w.config, w.feature_width);

    let mut dz = d_rgb.clone();
    ndarray::Zip::from(&mut dz).and(&out.rgb).for_each(|d, &s| *d *= s * (1.0 - s));
    let d_color_in = backprop_chain(&w.color, &tape.color_inputs, dz, &mut grads.color);

    let mut d_out = Array2::zeros((n, 1 + g));
    for i in 0..n {
        let active = tape.logits[i] < tape.logit_max;
        d_out[[i, 0]] = if active { d_sigma[i] * out.sigma[i] } else { 0.0 };
    }
    d_out.slice_mut(s![.., 1..]).assign(&d_color_in.slice(s![.., ..g]));
    let d_features = backprop_chain(&w.density, &tape.density_inputs, d_out, &mut grads.density);
    Ok(FieldGrads {
        features: d_features,
        weights: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> FieldConfig {
        FieldConfig {
            width: 8,
            d_density: 1,
            d_color: 2,
            geo_features: 4,
            dir_bands: 2,
            logit_max: 15.0,
        }
    }

    #[test]
    fn encode_axis_direction() {
        let e = encode_direction([1.0, 0.0, 0.0], 1).unwrap();
        let expect = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 1.0, 1.0];
        assert_eq!(e.len(), 9);
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(encode_direction([0.0, 0.6, 0.8], 0).unwrap(), vec![0.0, 0.6, 0.8]);
        assert!(matches!(encode_direction([1.0, 1.0, 0.0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_network_outputs() {
        let cfg = small_config();
        let w = MlpWeights::zeros(cfg, 6);
        let f = Array2::from_elem((3, 6), 0.3);
        let d = Array2::from_elem((3, cfg.dir_width()), 0.1);
        let out = field_eval(f.view(), d.view(), &w, EvalOptions::default()).unwrap();
        assert!(out.sigma.iter().all(|&s| s == 1.0));
        assert!(out.rgb.iter().all(|&c| c == 0.5));
    }

    #[test]
    fn logit_override_empties_density() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = MlpWeights::init(cfg, 6, &mut rng);
        let f = Array2::from_elem((2, 6), 0.3);
        let d = Array2::from_elem((2, cfg.dir_width()), 0.1);
        let opts = EvalOptions {
            retain: false,
            logit_override: Some(f64::NEG_INFINITY),
        };
        let out = field_eval(f.view(), d.view(), &w, opts).unwrap();
        assert!(out.sigma.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn nan_input_is_an_error() {
        let cfg = small_config();
        let w = MlpWeights::zeros(cfg, 6);
        let mut f = Array2::from_elem((2, 6), 0.3);
        f[[1, 2]] = f64::NAN;
        let d = Array2::from_elem((2, cfg.dir_width()), 0.1);
        assert!(matches!(
            field_eval(f.view(), d.view(), &w, EvalOptions::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn backward_without_tape_is_a_state_error() {
        let cfg = small_config();
        let w = MlpWeights::zeros(cfg, 6);
        let f = Array2::from_elem((2, 6), 0.3);
        let d = Array2::from_elem((2, cfg.dir_width()), 0.1);
        let out = field_eval(f.view(), d.view(), &w, EvalOptions::default()).unwrap();
        let r = field_backward(&out, &w, &Array1::zeros(2), &Array2::zeros((2, 3)));
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = MlpWeights::init(cfg, 6, &mut rng);
        let f = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let d = Array2::from_elem((4, cfg.dir_width()), 0.2);
        let out = field_eval(f.view(), d.view(), &w, EvalOptions { retain: true, logit_override: None }).unwrap();
        let g = field_backward(&out, &w, &Array1::zeros(4), &Array2::zeros((4, 3))).unwrap();
        assert!(g.features.iter().all(|&v| v == 0.0));
        assert!(g.weights.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sigma_gradient_wrt_logit_is_sigma() {
        // zero density network except the output bias: logit = b, dsigma/db = sigma
        let cfg = small_config();
        let mut w = MlpWeights::zeros(cfg, 6);
        w.density.last_mut().unwrap().b[0] = 0.7;
        let f = Array2::from_elem((1, 6), 0.0);
        let d = Array2::from_elem((1, cfg.dir_width()), 0.0);
        let out = field_eval(f.view(), d.view(), &w, EvalOptions { retain: true, logit_override: None }).unwrap();
        let g = field_backward(&out, &w, &Array1::ones(1), &Array2::zeros((1, 3))).unwrap();
        let got = g.weights.density.last().unwrap().b[0];
        assert!((got - 0.7f64.exp()).abs() < 1e-12);
    }
}
