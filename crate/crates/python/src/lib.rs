//! Python bindings: wavelet transforms, label encoding, ROC/AUC and the
//! network. Images cross the boundary as lists of rows.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use chestwave::dataset::{self, Labels, CLASS_NAMES};
use chestwave::metrics;
use chestwave::model::{self, OptimizerState};
use chestwave::pipeline;
use chestwave::raster::Image;
use chestwave::wavelet::{self, SubbandSet, WaveletFilter};

type Rows = Vec<Vec<f64>>;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn filter(name: &str) -> PyResult<WaveletFilter> {
    WaveletFilter::by_name(name).map_err(value_err)
}

fn image(rows: Rows) -> PyResult<Image> {
    Image::from_rows(&rows).ok_or_else(|| PyValueError::new_err("rows must be non-empty and equally long"))
}

/// Single-level 1D analysis; returns `(approx, detail)`.
#[pyfunction]
#[pyo3(signature = (signal, wavelet = "haar"))]
fn dwt1d(signal: Vec<f64>, wavelet: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
    wavelet::dwt1d(&signal, &filter(wavelet)?).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (approx, detail, wavelet = "haar"))]
fn idwt1d(approx: Vec<f64>, detail: Vec<f64>, wavelet: &str) -> PyResult<Vec<f64>> {
    wavelet::idwt1d(&approx, &detail, &filter(wavelet)?).map_err(value_err)
}

/// Single-level 2D analysis; returns `(ll, lh, hl, hh)`.
#[pyfunction]
#[pyo3(signature = (rows, wavelet = "haar"))]
fn dwt2d(rows: Rows, wavelet: &str) -> PyResult<(Rows, Rows, Rows, Rows)> {
    let s = wavelet::dwt2d(&image(rows)?, &filter(wavelet)?).map_err(value_err)?;
    Ok((s.ll.to_rows(), s.lh.to_rows(), s.hl.to_rows(), s.hh.to_rows()))
}

#[pyfunction]
#[pyo3(signature = (ll, lh, hl, hh, wavelet = "haar"))]
fn idwt2d(ll: Rows, lh: Rows, hl: Rows, hh: Rows, wavelet: &str) -> PyResult<Rows> {
    let set = SubbandSet {
        ll: image(ll)?,
        lh: image(lh)?,
        hl: image(hl)?,
        hh: image(hh)?,
    };
    Ok(wavelet::idwt2d(&set, &filter(wavelet)?).map_err(value_err)?.to_rows())
}

/// Decomposes to `depth` levels and reconstructs.
#[pyfunction]
#[pyo3(signature = (rows, wavelet = "haar", depth = 1))]
fn round_trip(rows: Rows, wavelet: &str, depth: usize) -> PyResult<Rows> {
    let pyramid = wavelet::decompose(&image(rows)?, &filter(wavelet)?, depth).map_err(value_err)?;
    Ok(pyramid.reconstruct().map_err(value_err)?.to_rows())
}

/// Rescaled `(vertical, horizontal)` detail images at pyramid level `depth`.
#[pyfunction]
#[pyo3(signature = (rows, wavelet = "haar", depth = 1))]
fn detail_images(rows: Rows, wavelet: &str, depth: usize) -> PyResult<(Rows, Rows)> {
    let (v, h) = wavelet::detail_images_at(&image(rows)?, &filter(wavelet)?, depth).map_err(value_err)?;
    Ok((v.to_rows(), h.to_rows()))
}

#[pyfunction]
fn resize_bilinear(rows: Rows, width: usize, height: usize) -> PyResult<Rows> {
    Ok(pipeline::resize_bilinear(&image(rows)?, width, height)
        .map_err(value_err)?
        .to_rows())
}

#[pyfunction]
fn load_image(path: &str) -> PyResult<Rows> {
    pipeline::load_image(path)
        .map(|i| i.to_rows())
        .map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pyfunction]
fn class_names() -> Vec<&'static str> {
    CLASS_NAMES.to_vec()
}

/// Class indices present in a `|`-separated label string.
#[pyfunction]
fn encode_labels(label_string: &str) -> PyResult<Vec<usize>> {
    Ok(dataset::encode_labels(label_string).map_err(value_err)?.indices().collect())
}

#[pyfunction]
fn decode_labels(indices: Vec<usize>) -> PyResult<String> {
    if let Some(bad) = indices.iter().find(|&&i| i >= CLASS_NAMES.len()) {
        return Err(PyValueError::new_err(format!("class index {bad} out of range")));
    }
    Ok(dataset::decode_labels(Labels::from_indices(indices)))
}

/// Returns `(points, auc)` with points as `(threshold, fpr, tpr)`.
#[pyfunction]
fn roc_curve(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<(Vec<(f64, f64, f64)>, f64)> {
    let c = metrics::roc_curve(&scores, &labels).map_err(value_err)?;
    Ok((c.points.iter().map(|p| (p.threshold, p.fpr, p.tpr)).collect(), c.auc))
}

#[pyfunction]
fn auc_pairwise_oracle(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auc_pairwise_oracle(&scores, &labels).map_err(value_err)
}

/// The default network with its momentum state.
#[pyclass(name = "Model")]
struct PyModel {
    inner: model::Model,
    state: OptimizerState,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (channels, height, width, seed = 0))]
    fn new(channels: usize, height: usize, width: usize, seed: u64) -> PyResult<Self> {
        let input = model::Shape::new(channels, height, width);
        let inner = model::init_model(input, &model::default_architecture(input), seed).map_err(value_err)?;
        let state = OptimizerState::new(&inner);
        Ok(Self { inner, state })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = model::load_checkpoint(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let state = OptimizerState::new(&inner);
        Ok(Self { inner, state })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(&self.inner, path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.input_shape();
        (s.channels, s.height, s.width)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.layers.len()
    }

    fn frozen(&self) -> Vec<bool> {
        self.inner.layers.iter().map(|l| l.spec.frozen).collect()
    }

    /// Freezes the first `k` layers (and resets the momentum state).
    fn freeze_first(&mut self, k: usize) -> PyResult<()> {
        self.inner = model::freeze_first(self.inner.clone(), k).map_err(value_err)?;
        self.state = OptimizerState::new(&self.inner);
        Ok(())
    }

    /// Per-class probabilities for one channel-major flattened input.
    fn predict(&self, input: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict_flat(&input).map_err(value_err)
    }

    /// One momentum SGD step on a batch; returns the batch loss before the
    /// update.
    #[pyo3(signature = (inputs, targets, learning_rate = 3e-4, momentum = 0.9))]
    fn train_step(
        &mut self,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        learning_rate: f64,
        momentum: f64,
    ) -> PyResult<f64> {
        let grads = self.inner.backward_flat(&inputs, &targets).map_err(value_err)?;
        model::sgdm_step(&mut self.inner, &mut self.state, &grads, learning_rate, momentum).map_err(value_err)?;
        Ok(grads.loss)
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.input_shape();
        format!("Model(input=({c}, {h}, {w}), parameters={})", self.parameter_count())
    }
}

#[pymodule]
fn pychestwave(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dwt1d, m)?)?;
    m.add_function(wrap_pyfunction!(idwt1d, m)?)?;
    m.add_function(wrap_pyfunction!(dwt2d, m)?)?;
    m.add_function(wrap_pyfunction!(idwt2d, m)?)?;
    m.add_function(wrap_pyfunction!(round_trip, m)?)?;
    m.add_function(wrap_pyfunction!(detail_images, m)?)?;
    m.add_function(wrap_pyfunction!(resize_bilinear, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(class_names, m)?)?;
    m.add_function(wrap_pyfunction!(encode_labels, m)?)?;
    m.add_function(wrap_pyfunction!(decode_labels, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(auc_pairwise_oracle, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
