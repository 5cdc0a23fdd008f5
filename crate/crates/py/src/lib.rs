//! Python bindings for the puzzle classifier.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use mmfuse::autodiff::Tape;
use mmfuse::data::{self, PuzzleInstance, Split};
use mmfuse::encoders::RgbImage;
use mmfuse::harness::{self, GridConfig, RunConfig};
use mmfuse::model::PuzzleModel;
use mmfuse::nn;
use mmfuse::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// One five-option puzzle. `image` is packed RGB bytes, row-major.
#[pyclass(name = "Puzzle", module = "mmfuse_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPuzzle {
    inner: PuzzleInstance,
}

#[pymethods]
impl PyPuzzle {
    #[new]
    fn new(
        root_id: u32,
        instance_id: u32,
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        question: String,
        options: Vec<String>,
        answer: usize,
    ) -> PyResult<Self> {
        let image = RgbImage::new(width, height, pixels).map_err(py_err)?;
        let inner = PuzzleInstance::new(root_id, instance_id, image, question, options, answer).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn root_id(&self) -> u32 {
        self.inner.root_id
    }
    #[getter]
    fn instance_id(&self) -> u32 {
        self.inner.instance_id
    }
    #[getter]
    fn question(&self) -> &str {
        &self.inner.question
    }
    #[getter]
    fn options(&self) -> Vec<String> {
        self.inner.options.to_vec()
    }
    #[getter]
    fn answer(&self) -> usize {
        self.inner.answer
    }
    #[getter]
    fn answer_letter(&self) -> char {
        self.inner.answer_letter()
    }
    #[getter]
    fn width(&self) -> usize {
        self.inner.image.width()
    }
    #[getter]
    fn height(&self) -> usize {
        self.inner.image.height()
    }
    #[getter]
    fn image<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.image.pixels())
    }

    fn __repr__(&self) -> String {
        format!(
            "Puzzle(root_id={}, instance_id={}, question={:?}, answer={:?})",
            self.inner.root_id,
            self.inner.instance_id,
            self.inner.question,
            self.inner.answer_letter()
        )
    }
}

fn unwrap_puzzles(puzzles: &[PyRef<'_, PyPuzzle>]) -> Vec<PuzzleInstance> {
    puzzles.iter().map(|p| p.inner.clone()).collect()
}

/// A trained or freshly initialised model.
#[pyclass(name = "Model", module = "mmfuse_py")]
struct PyModel {
    inner: PuzzleModel,
    split_seed: u64,
}

#[pymethods]
impl PyModel {
    /// Untrained model from a `[model]` TOML table (the `train --config`
    /// format); the vocabulary is built from `puzzles`.
    #[staticmethod]
    fn from_config(config_toml: &str, puzzles: Vec<PyRef<'_, PyPuzzle>>) -> PyResult<Self> {
        let cfg = RunConfig::from_toml(config_toml).map_err(py_err)?;
        let data = unwrap_puzzles(&puzzles);
        let vocab = harness::build_vocab(&data, cfg.model.text.vocab_size).map_err(py_err)?;
        let inner = PuzzleModel::new(cfg.model, vocab).map_err(py_err)?;
        Ok(Self {
            inner,
            split_seed: cfg.split_seed,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, split_seed) = harness::load_model(&path).map_err(py_err)?;
        Ok(Self { inner, split_seed })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        harness::save_model(&self.inner, self.split_seed, &path).map_err(py_err)
    }

    /// The raw `MMF1` parameter container.
    fn checkpoint_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &harness::save_checkpoint(&self.inner))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_values()
    }

    #[getter]
    fn config_toml(&self) -> String {
        self.inner.config().to_toml()
    }

    fn logits(&self, puzzle: PyRef<'_, PyPuzzle>) -> PyResult<Vec<f64>> {
        let x = self.inner.encode(&puzzle.inner).map_err(py_err)?;
        Ok(self.inner.logits(&x).map_err(py_err)?.0.to_vec())
    }

    fn predict(&self, puzzle: PyRef<'_, PyPuzzle>) -> PyResult<usize> {
        let x = self.inner.encode(&puzzle.inner).map_err(py_err)?;
        self.inner.predict(&x).map_err(py_err)
    }

    fn evaluate(&self, puzzles: Vec<PyRef<'_, PyPuzzle>>) -> PyResult<f64> {
        harness::evaluate(&self.inner, &unwrap_puzzles(&puzzles)).map_err(py_err)
    }
}

#[pyfunction]
fn synth_puzzles(seed: u64, n_roots: u32, n_per_root: u32) -> PyResult<Vec<PyPuzzle>> {
    let data = data::synth_puzzles(seed, n_roots, n_per_root).map_err(py_err)?;
    Ok(data.into_iter().map(|inner| PyPuzzle { inner }).collect())
}

#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Vec<PyPuzzle>> {
    let data = data::load_manifest(&data::manifest_path(&path)).map_err(py_err)?;
    Ok(data.into_iter().map(|inner| PyPuzzle { inner }).collect())
}

#[pyfunction]
fn write_dataset(path: PathBuf, puzzles: Vec<PyRef<'_, PyPuzzle>>) -> PyResult<PathBuf> {
    data::write_dataset(&path, &unwrap_puzzles(&puzzles)).map_err(py_err)
}

/// `(train, val, test)` root-id lists.
#[pyfunction]
fn puzzle_split(root_ids: Vec<u32>, seed: u64) -> PyResult<(Vec<u32>, Vec<u32>, Vec<u32>)> {
    let s = data::puzzle_split(&root_ids, seed).map_err(py_err)?;
    let v = |split| s.roots(split).iter().copied().collect();
    Ok((v(Split::Train), v(Split::Val), v(Split::Test)))
}

/// Trains per the `train --config` TOML on the root split of `puzzles`.
/// Returns the best-validation model and per-epoch
/// `(epoch, train_loss, val_accuracy)` tuples.
#[pyfunction]
fn train(
    py: Python<'_>,
    config_toml: &str,
    puzzles: Vec<PyRef<'_, PyPuzzle>>,
) -> PyResult<(PyModel, Vec<(usize, f64, f64)>)> {
    let cfg = RunConfig::from_toml(config_toml).map_err(py_err)?;
    let data = unwrap_puzzles(&puzzles);
    let roots: Vec<u32> = data.iter().map(|p| p.root_id).collect();
    let split = data::puzzle_split(&roots, cfg.split_seed).map_err(py_err)?;
    let out = py
        .detach(|| harness::train(&cfg.model, &cfg.train, &data, &split))
        .map_err(py_err)?;
    let metrics = out
        .metrics
        .iter()
        .map(|m| (m.epoch, m.train_loss, m.val_accuracy))
        .collect();
    Ok((
        PyModel {
            inner: out.model,
            split_seed: cfg.split_seed,
        },
        metrics,
    ))
}

/// Runs an `ablate --grid` TOML over `puzzles`; returns the CSV report.
#[pyfunction]
fn ablate(py: Python<'_>, grid_toml: &str, puzzles: Vec<PyRef<'_, PyPuzzle>>) -> PyResult<String> {
    let grid = GridConfig::from_toml(grid_toml).map_err(py_err)?;
    let data = unwrap_puzzles(&puzzles);
    let roots: Vec<u32> = data.iter().map(|p| p.root_id).collect();
    let split = data::puzzle_split(&roots, grid.split_seed).map_err(py_err)?;
    let report = py
        .detach(|| harness::ablate(&grid.model, &grid.train, &data, &split, |_| {}))
        .map_err(py_err)?;
    Ok(report.to_csv())
}

/// Worst finite-difference relative error per tape operation.
#[pyfunction]
fn gradcheck_ops(seed: u64) -> PyResult<Vec<(&'static str, f64)>> {
    harness::op_gradchecks(seed).map_err(py_err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

/// Multi-head scaled dot-product attention on plain nested lists; `mask`
/// marks which key rows may be attended.
#[pyfunction]
#[pyo3(signature = (q, k, v, n_heads, mask=None))]
fn cross_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    n_heads: usize,
    mask: Option<Vec<bool>>,
) -> PyResult<Vec<Vec<f64>>> {
    let mut t = Tape::new();
    let q = t.constant(matrix(q)?);
    let k = t.constant(matrix(k)?);
    let v = t.constant(matrix(v)?);
    let out = nn::attention(&mut t, q, k, v, mask.as_deref(), n_heads).map_err(py_err)?;
    let out = t.value(out);
    let (n, _) = out.dims2().map_err(py_err)?;
    Ok((0..n).map(|i| out.row(i).to_vec()).collect())
}

#[pymodule]
fn mmfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPuzzle>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_puzzles, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(puzzle_split, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_ops, m)?)?;
    m.add_function(wrap_pyfunction!(cross_attention, m)?)?;
    Ok(())
}
