//! Python bindings: the radiance-field network, checkpoint rendering, and the
//! metric/encoding helpers, exposed as the `torchfield` extension module.

use ndarray::Array3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use torchfield::adam::decayed_lr;
use torchfield::checkpoint::load_checkpoint;
use torchfield::dataset::load_dataset;
use torchfield::img::Image;
use torchfield::model::{NetworkConfig, RaySamples, RadianceSample, TorchFieldNetwork};
use torchfield::render::{composite_patch, render_image, RenderMode, RenderOptions};
use torchfield::tensor::Tape;
use torchfield::trainer::Trainer;

fn to_py_err(e: torchfield::Error) -> PyErr {
    match e {
        torchfield::Error::Numerical(msg) => PyRuntimeError::new_err(msg),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image_from_flat(flat: Vec<f64>, height: usize, width: usize) -> PyResult<Image> {
    let rgb = Array3::from_shape_vec((height, width, 3), flat).map_err(|_| {
        PyValueError::new_err("pixel buffer length must equal height * width * 3")
    })?;
    Ok(Image { width, height, rgb })
}

/// Sinusoidal positional encoding: x followed by sin/cos at doubling
/// frequencies, `levels` octaves per input dimension.
#[pyfunction]
fn positional_encode(x: Vec<f64>, levels: usize) -> Vec<f64> {
    torchfield::model::positional_encode(&x, levels)
}

/// Cosine distance-aware kernel scales for one window of sample depths.
#[pyfunction]
fn distance_weights(t_window: Vec<f64>, anchor_index: usize) -> PyResult<Vec<f64>> {
    torchfield::model::distance_weights(&t_window, anchor_index).map_err(to_py_err)
}

/// Center-emphasizing patch loss weights, flattened row-major (p*p values).
#[pyfunction]
fn patch_weights(p: usize) -> Vec<f64> {
    torchfield::metrics::patch_weights(p).to_vec()
}

/// Exponentially decayed learning rate at `iteration` of `total`.
#[pyfunction]
fn lr_at(lr: f64, lr_final: f64, iteration: u64, total: u64) -> f64 {
    decayed_lr(lr, lr_final, iteration, total)
}

/// PSNR in dB between two images given as flat row-major RGB buffers in [0, 1].
#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    let ia = image_from_flat(a, height, width)?;
    let ib = image_from_flat(b, height, width)?;
    torchfield::metrics::psnr(&ia, &ib).map_err(to_py_err)
}

/// Mean 8x8-windowed SSIM between two images given as flat row-major RGB
/// buffers in [0, 1].
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    let ia = image_from_flat(a, height, width)?;
    let ib = image_from_flat(b, height, width)?;
    torchfield::metrics::ssim_images(&ia, &ib).map_err(to_py_err)
}

/// A randomly initialized patch-rendering radiance field.
#[pyclass]
struct Network {
    inner: TorchFieldNetwork,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (patch_size=5, kernel_size=3, channels=None, l_pos=10, l_dir=4, seed=0))]
    fn new(
        patch_size: usize,
        kernel_size: usize,
        channels: Option<Vec<usize>>,
        l_pos: usize,
        l_dir: usize,
        seed: u64,
    ) -> PyResult<Network> {
        let config = NetworkConfig {
            patch_size,
            kernel_size,
            channels: channels.unwrap_or_else(|| NetworkConfig::default().channels),
            l_pos,
            l_dir,
        };
        let inner = TorchFieldNetwork::init(config, seed).map_err(to_py_err)?;
        Ok(Network { inner })
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.config.patch_size
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params().iter().map(|p| p.len()).sum()
    }

    /// Density patches along one ray: a (len(t), p*p) nested list.
    fn density(
        &self,
        origin: [f64; 3],
        direction: [f64; 3],
        t: Vec<f64>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let bound = self.inner.bind(&tape, false);
        let rays = [RaySamples::from_ray(origin, direction, t)];
        let out = bound.forward(&rays, true, false).map_err(to_py_err)?;
        let sigma = out.sigma.value();
        let sigma = sigma
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(sigma.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Alpha-composite one ray into its p x p patch; returns the flat
    /// row-major RGB buffer (p*p*3 values in [0, 1]).
    fn render_patch(
        &self,
        origin: [f64; 3],
        direction: [f64; 3],
        t: Vec<f64>,
        far: f64,
    ) -> PyResult<Vec<f64>> {
        if t.is_empty() {
            return Err(PyValueError::new_err("need at least one sample depth"));
        }
        let n = t.len();
        let mut deltas: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        deltas.push(far - t[n - 1]);
        let tape = Tape::new();
        let bound = self.inner.bind(&tape, false);
        let rays = [RaySamples::from_ray(origin, direction, t)];
        let out = bound.forward(&rays, false, false).map_err(to_py_err)?;
        let p = self.inner.config.patch_size;
        let pp = p * p;
        let sigma = out.sigma.value();
        let color = out.color.expect("full forward returns color").value();
        let samples: Vec<RadianceSample> = (0..n)
            .map(|s| {
                let density_patch =
                    ndarray::Array2::from_shape_fn((p, p), |(i, j)| sigma[[s, i * p + j]]);
                let color_patch = Array3::from_shape_fn((p, p, 3), |(i, j, c)| {
                    color[[s, c * pp + i * p + j]]
                });
                RadianceSample {
                    density_patch,
                    color_patch,
                }
            })
            .collect();
        let patch = composite_patch(&samples, &deltas, (0, 0)).map_err(to_py_err)?;
        Ok(patch.rgb.iter().copied().collect())
    }
}

/// A training checkpoint, loadable for inspection and rendering.
#[pyclass]
struct Checkpoint {
    trainer: Trainer,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Checkpoint> {
        let ckpt = load_checkpoint(std::path::Path::new(path)).map_err(to_py_err)?;
        let trainer = Trainer::from_checkpoint(ckpt).map_err(to_py_err)?;
        Ok(Checkpoint { trainer })
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.trainer.iteration
    }

    #[getter]
    fn strategy(&self) -> String {
        self.trainer.config.strategy.as_str().to_string()
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.trainer.config.patch_size
    }

    /// Render one dataset view; returns (height, width, flat row-major RGB).
    #[pyo3(signature = (data_dir, camera_index, mode="center"))]
    fn render(
        &self,
        data_dir: &str,
        camera_index: usize,
        mode: &str,
    ) -> PyResult<(usize, usize, Vec<f64>)> {
        let (dataset, _) =
            load_dataset(std::path::Path::new(data_dir)).map_err(to_py_err)?;
        let camera = dataset
            .cameras
            .get(camera_index)
            .ok_or_else(|| PyValueError::new_err("camera index out of range"))?;
        let opts = RenderOptions {
            mode: RenderMode::parse(mode).map_err(to_py_err)?,
            n_coarse: self.trainer.config.n_coarse,
            n_fine: self.trainer.config.n_fine,
            ..RenderOptions::default()
        };
        let (image, _rays) =
            render_image(&self.trainer.render_pair(), camera, &opts).map_err(to_py_err)?;
        Ok((
            image.height,
            image.width,
            image.rgb.iter().copied().collect(),
        ))
    }
}

#[pymodule]
#[pyo3(name = "torchfield")]
fn torchfield_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(positional_encode, m)?)?;
    m.add_function(wrap_pyfunction!(distance_weights, m)?)?;
    m.add_function(wrap_pyfunction!(patch_weights, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_class::<Network>()?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
