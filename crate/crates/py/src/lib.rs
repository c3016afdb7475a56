use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trinerflet::checkpoint::{self, Dtype};
use trinerflet::dataset::Split;
use trinerflet::metrics;
use trinerflet::renderer::{render_image, Camera, RenderOptions};
use trinerflet::scene::{make_synthetic, SyntheticSpec};
use trinerflet::trainer::{self, NoopObserver, RunOptions, TrainConfig};
use trinerflet::triplane::TriNeRFLet;
use trinerflet::wavelet::{FilterKind, Plane, WaveletPyramid};

fn to_py(e: trinerflet::Error) -> PyErr {
    match e {
        trinerflet::Error::Io(_) | trinerflet::Error::Diverged { .. } | trinerflet::Error::Refiner(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn plane(data: Vec<f64>, height: usize, width: usize, channels: usize) -> PyResult<Plane> {
    Plane::from_vec(height, width, channels, data).map_err(to_py)
}

fn filter(name: &str) -> PyResult<FilterKind> {
    name.parse().map_err(to_py)
}

/// Image as `(height, width, channels, flat row-major data)`.
type Image = (usize, usize, usize, Vec<f64>);

fn image(p: Plane) -> Image {
    let (h, w, c) = p.shape();
    (h, w, c, p.data().to_vec())
}

/// Multilevel 2D wavelet decomposition of an `H x W x C` plane.
#[pyclass(name = "WaveletPyramid", module = "trinerflet_py")]
pub struct PyPyramid {
    inner: WaveletPyramid,
}

#[pymethods]
impl PyPyramid {
    #[staticmethod]
    #[pyo3(signature = (data, height, width, channels, levels, filter_name = "bior6.8"))]
    fn decompose(data: Vec<f64>, height: usize, width: usize, channels: usize, levels: usize, filter_name: &str) -> PyResult<Self> {
        let p = plane(data, height, width, channels)?;
        let inner = WaveletPyramid::decompose(&p, levels, filter(filter_name)?).map_err(to_py)?;
        Ok(PyPyramid { inner })
    }

    /// Synthesis down to `depth` levels (all levels by default).
    #[pyo3(signature = (depth = None))]
    fn reconstruct(&self, depth: Option<usize>) -> PyResult<Image> {
        let d = depth.unwrap_or(self.inner.depth());
        Ok(image(self.inner.reconstruct_to(d).map_err(to_py)?))
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn n_ll(&self) -> usize {
        self.inner.ll.height()
    }

    #[getter]
    fn coefficient_count(&self) -> usize {
        self.inner.coefficient_count()
    }

    fn append_level(&mut self) {
        self.inner = self.inner.append_level();
    }
}

#[pyclass(name = "Model", module = "trinerflet_py")]
pub struct PyModel {
    inner: TriNeRFLet,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(path.as_ref()).map_err(to_py)?,
        })
    }

    #[pyo3(signature = (path, dtype = "f32"))]
    fn save(&self, path: &str, dtype: &str) -> PyResult<()> {
        let dtype = match dtype {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(PyValueError::new_err(format!("dtype must be f32 or f64, got {other:?}"))),
        };
        checkpoint::save(&self.inner, path.as_ref(), dtype).map_err(to_py)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn n_ll(&self) -> usize {
        self.inner.n_ll()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn filter(&self) -> String {
        self.inner.filter().to_string()
    }

    fn detail_l1(&self) -> f64 {
        self.inner.high_freq_l1()
    }

    fn parameter_count(&self) -> usize {
        self.inner.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Renders a `width x height` linear RGB image from `eye` looking at `target` (z up).
    #[pyo3(signature = (eye, target, width, height, focal, depth = None, samples = 64, near = 0.5, far = 6.0))]
    #[allow(clippy::too_many_arguments)]
    fn render(
        &self,
        eye: [f64; 3],
        target: [f64; 3],
        width: usize,
        height: usize,
        focal: f64,
        depth: Option<usize>,
        samples: usize,
        near: f64,
        far: f64,
    ) -> PyResult<Image> {
        let cam = Camera::look_at(eye, target, [0.0, 0.0, 1.0], focal, width, height, near, far).map_err(to_py)?;
        let opts = RenderOptions {
            samples_per_ray: samples,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = render_image(&self.inner, &cam, depth.unwrap_or(self.inner.depth()), &opts, &mut rng).map_err(to_py)?;
        Ok(image(img))
    }
}

/// The eleven table fields of a named preset.
#[pyfunction]
fn preset(py: Python<'_>, name: &str) -> PyResult<Py<PyAny>> {
    let p = trainer::preset(name).map_err(to_py)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("n_ll", p.n_ll)?;
    d.set_item("levels", p.levels)?;
    d.set_item("n_base", p.n_base)?;
    d.set_item("n_final", p.n_final)?;
    d.set_item("channels", p.channels)?;
    d.set_item("gamma", p.gamma)?;
    d.set_item("width", p.width)?;
    d.set_item("d_density", p.d_density)?;
    d.set_item("d_color", p.d_color)?;
    d.set_item("steps", p.steps)?;
    d.set_item("trainable_params_m", p.trainable_params_m)?;
    Ok(d.into_any().unbind())
}

/// Trains the micro preset on the synthetic sphere and returns the model with
/// its mean held-out PSNR.
#[pyfunction]
#[pyo3(signature = (views = 8, resolution = 32, steps = 200, rays = 256, samples = 24, seed = 0))]
fn train_synthetic(
    py: Python<'_>,
    views: usize,
    resolution: usize,
    steps: usize,
    rays: usize,
    samples: usize,
    seed: u64,
) -> PyResult<(PyModel, f64)> {
    let cfg = TrainConfig {
        total_steps: steps,
        rays_per_batch: rays,
        samples_per_ray: samples,
        seed,
        val_every: 0,
        ..TrainConfig::default()
    };
    py.detach(|| {
        let (ds, _) = make_synthetic(SyntheticSpec::default(), views, resolution, seed)?;
        let out = trainer::train(&cfg, &ds, &mut NoopObserver, &RunOptions::default())?;
        let scores = trainer::evaluate(&out.model, &ds, Split::Test, &cfg.eval_options(), cfg.psnr_srgb)?;
        Ok((PyModel { inner: out.model }, trainer::mean_psnr(&scores)))
    })
    .map_err(to_py)
}

#[pyfunction]
fn psnr(a: Image, b: Image) -> PyResult<f64> {
    metrics::psnr(&plane(a.3, a.0, a.1, a.2)?, &plane(b.3, b.0, b.1, b.2)?).map_err(to_py)
}

#[pyfunction]
fn ssim(a: Image, b: Image) -> PyResult<f64> {
    metrics::ssim(&plane(a.3, a.0, a.1, a.2)?, &plane(b.3, b.0, b.1, b.2)?).map_err(to_py)
}

#[pymodule]
fn trinerflet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPyramid>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(train_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add("FILTERS", FilterKind::ALL.iter().map(|f| f.to_string()).collect::<Vec<_>>())?;
    Ok(())
}
