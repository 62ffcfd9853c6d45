//! Python bindings for the core library: tensors, images, the generator,
//! relevance embedding, and the Y-channel metrics.
//!
//! Build as an extension module with `cargo build -p ttsr-py`, then rename
//! `libttsr_py.so` to `ttsr_py.so` somewhere on `sys.path` (see
//! `python/smoke_test.py`, which automates this).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ttsr_core::data::ImageU8;
use ttsr_core::eval::infer;
use ttsr_core::network::{Generator, GeneratorConfig};
use ttsr_core::rng::{seeded, Stream};
use ttsr_core::tensor::conv::PatchGeometry;
use ttsr_core::train::load_generator;
use ttsr_core::transformer::{attention_maps, relevance_embedding};
use ttsr_core::Tensor as CoreTensor;

fn val_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Dense float32 tensor, row-major.
#[pyclass(unsendable, name = "Tensor")]
struct PyTensor {
    inner: CoreTensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(PyValueError::new_err(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(PyTensor {
            inner: CoreTensor::new(&shape, data),
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// 8-bit RGB image.
#[pyclass(unsendable, name = "Image")]
struct PyImage {
    inner: ImageU8,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Self> {
        if pixels.len() != width * height * 3 {
            return Err(PyValueError::new_err(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(PyImage {
            inner: ImageU8::new(width, height, pixels),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyImage {
            inner: ImageU8::load(path.as_ref()).map_err(val_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(run_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.pixels.clone()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width, self.inner.height)
    }
}

/// Reference-based 4x super-resolution generator.
#[pyclass(unsendable, name = "Generator")]
struct PyGenerator {
    inner: Generator<f32>,
}

#[pymethods]
impl PyGenerator {
    /// Randomly initialized generator. `blocks` are the residual-block
    /// counts of the four stages (LR trunk, 1x, 2x, 4x).
    #[new]
    #[pyo3(signature = (seed=0, base_channels=64, blocks=None, csfi=true))]
    fn new(seed: u64, base_channels: usize, blocks: Option<[usize; 4]>, csfi: bool) -> Self {
        let cfg = GeneratorConfig {
            base_channels,
            blocks: blocks.unwrap_or(GeneratorConfig::default().blocks),
            csfi,
            ..GeneratorConfig::default()
        };
        let mut rng = seeded(seed, Stream::Init);
        PyGenerator {
            inner: Generator::new(cfg, &mut rng),
        }
    }

    /// Load weights and config from a training checkpoint.
    #[staticmethod]
    fn from_checkpoint(path: &str) -> PyResult<Self> {
        let (gen, _cfg) = load_generator::<f32>(path.as_ref()).map_err(run_err)?;
        Ok(PyGenerator { inner: gen })
    }

    fn count_params(&self) -> usize {
        self.inner.count_params()
    }

    /// Super-resolve `lr` by 4x, guided by the reference image.
    fn infer(&self, lr: &PyImage, reference: &PyImage) -> PyResult<PyImage> {
        Ok(PyImage {
            inner: infer(&self.inner, &lr.inner, &reference.inner).map_err(run_err)?,
        })
    }
}

/// Normalized patch-wise relevance between `q` and `k` feature maps
/// (`[N,C,H,W]`). Returns the relevance tensor `[N, L_q, L_k]` and the
/// hard-attention argmax indices, row-major over the query grid.
#[pyfunction]
#[pyo3(signature = (q, k, kernel=3, stride=1, pad=1))]
fn relevance(
    q: &PyTensor,
    k: &PyTensor,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> PyResult<(PyTensor, Vec<usize>)> {
    let rel = relevance_embedding(&q.inner, &k.inner, PatchGeometry::new(kernel, stride, pad))
        .map_err(val_err)?;
    let maps = attention_maps(&rel).map_err(val_err)?;
    Ok((PyTensor { inner: rel.r }, maps.hard.indices))
}

/// Y-channel peak signal-to-noise ratio in dB (capped at 100).
#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    ttsr_core::metrics::psnr(&a.inner, &b.inner).map_err(val_err)
}

/// Y-channel structural similarity (11x11 Gaussian window).
#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    ttsr_core::metrics::ssim(&a.inner, &b.inner).map_err(val_err)
}

/// Bicubic 4x downsample used to derive LR inputs from HR images.
#[pyfunction]
fn make_lr(hr: &PyImage) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: ttsr_core::data::make_lr(&hr.inner).map_err(val_err)?,
    })
}

#[pymodule]
fn ttsr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(relevance, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(make_lr, m)?)?;
    Ok(())
}
