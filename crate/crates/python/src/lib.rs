//! Python module `apis_lab`: configs, datasets, experiment runs and the
//! uncertainty/selection primitives.

use std::path::PathBuf;

use apis_core::budget::CostModel;
use apis_core::driver::{self, Data, ExperimentConfig};
use apis_core::segmodel::{PredictionMode, PredictionSet};
use apis_core::selection::{self, PointStrategy, SelectionDomain};
use apis_core::synthgen::{encode_ppm, generate_dataset, read_dataset, write_dataset, DatasetMeta};
use apis_core::types::{BBox, InstanceKey};
use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn to_py(e: apis_core::Error) -> PyErr {
    use apis_core::Error as E;
    match e {
        E::Config { .. }
        | E::InvalidValue(_)
        | E::InvalidConstant(_)
        | E::DomainError(_)
        | E::DegenerateBox(_)
        | E::EmptyDomain(_)
        | E::EmptyPredictionSet => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

type BoxTuple = (u32, u32, u32, u32);

fn bbox((x0, y0, x1, y1): BoxTuple) -> PyResult<BBox> {
    BBox::new(x0, y0, x1, y1).map_err(to_py)
}

/// Binary entropy in nats.
#[pyfunction]
fn entropy(p: f64) -> PyResult<f64> {
    apis_core::uncertainty::entropy(p).map_err(to_py)
}

/// Masks whose annotation time matches `n_points` point labels.
#[pyfunction]
#[pyo3(signature = (n_points, t_point = 0.9, t_mask = 79.2))]
fn budget_equivalent_masks(n_points: u64, t_point: f64, t_mask: f64) -> PyResult<u64> {
    CostModel::from_seconds(t_point, t_mask)
        .and_then(|c| c.budget_equivalent_masks(n_points))
        .map_err(to_py)
}

/// Generalized IoU of two inclusive pixel boxes `(x_min, y_min, x_max, y_max)`.
#[pyfunction]
fn giou(a: BoxTuple, b: BoxTuple) -> PyResult<f64> {
    Ok(selection::giou(bbox(a)?, bbox(b)?))
}

/// Picks one pixel of `box` from `maps` (K row-major probability maps over
/// the box), skipping `labeled` pixels.
#[pyfunction]
#[pyo3(signature = (strategy, maps, r#box, labeled = Vec::new(), seed = 0))]
fn select_point(
    strategy: &str,
    maps: Vec<Vec<f64>>,
    r#box: BoxTuple,
    labeled: Vec<(u32, u32)>,
    seed: u64,
) -> PyResult<(u32, u32)> {
    let strategy: PointStrategy = strategy.parse().map_err(to_py)?;
    let region = bbox(r#box)?;
    if let Some(m) = maps.iter().find(|m| m.len() as u64 != region.area()) {
        return Err(PyValueError::new_err(format!(
            "map has {} values, box has {} pixels",
            m.len(),
            region.area()
        )));
    }
    let ps = PredictionSet {
        key: InstanceKey::new(0, 0),
        region,
        maps,
        mode: PredictionMode::A,
    };
    let domain = SelectionDomain::new(region, labeled);
    let mut rng = apis_core::rng::stream(seed, "select", &[]);
    selection::select_point(strategy, &ps, &domain, &mut rng).map_err(to_py)
}

/// Run settings. Keyword arguments override defaults; unknown keys raise.
#[pyclass(name = "Config", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(ExperimentConfig::default()).expect("config serialization");
        if let Some(kw) = overrides {
            let dumps = py.import("json")?.getattr("dumps")?;
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let text: String = dumps.call1((v,))?.extract()?;
                let v: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
                value[key] = v;
            }
        }
        let inner = ExperimentConfig::from_json(&value.to_string()).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_json(text).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        json_to_py(py, &self.inner.to_json())
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn strategy(&self) -> &str {
        &self.inner.strategy
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn steps(&self) -> u32 {
        self.inner.steps
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(name={:?}, strategy={:?}, seed={}, steps={})",
            self.inner.name, self.inner.strategy, self.inner.seed, self.inner.steps
        )
    }
}

/// Train and test splits with their hidden ground truth.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    data: Data,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (seed = 0, n_train = 200, n_test = 100))]
    fn generate(py: Python<'_>, seed: u64, n_train: usize, n_test: usize) -> PyResult<Self> {
        let cfg = ExperimentConfig::default();
        let (train, test) = py
            .detach(|| generate_dataset(seed, n_train, n_test, &cfg.scene))
            .map_err(to_py)?;
        Ok(Self {
            data: Data {
                train: train.into(),
                test: test.into(),
            },
        })
    }

    #[staticmethod]
    fn for_config(py: Python<'_>, config: &PyConfig) -> PyResult<Self> {
        let data = py.detach(|| Data::load(&config.inner)).map_err(to_py)?;
        Ok(Self { data })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (train, test, _) = read_dataset(&dir).map_err(to_py)?;
        Ok(Self {
            data: Data {
                train: train.into(),
                test: test.into(),
            },
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        write_dataset(&dir, &self.data.train, &self.data.test, &DatasetMeta::default()).map_err(to_py)
    }

    /// Instance count of the training split.
    #[getter]
    fn q(&self) -> usize {
        self.data.train.q()
    }

    #[getter]
    fn q_test(&self) -> usize {
        self.data.test.q()
    }

    #[getter]
    fn n_images(&self) -> usize {
        self.data.train.dataset.images().len()
    }

    /// Binary PPM bytes of training image `image_id`.
    fn image_ppm<'py>(&self, py: Python<'py>, image_id: u32) -> PyResult<Bound<'py, PyBytes>> {
        let image = self
            .data
            .train
            .dataset
            .image(image_id)
            .ok_or_else(|| PyIndexError::new_err(format!("no image {image_id}")))?;
        Ok(PyBytes::new(py, &encode_ppm(image)))
    }

    /// `(instance_id, category_id, box)` for each instance of an image.
    fn instances(&self, image_id: u32) -> Vec<(u32, u8, BoxTuple)> {
        self.data
            .train
            .dataset
            .instances_of(image_id)
            .map(|r| {
                let b = r.bbox;
                (r.instance_id, r.category_id, (b.x_min, b.y_min, b.x_max, b.y_max))
            })
            .collect()
    }
}

/// Runs `config` with the simulated annotator; returns the run report.
#[pyfunction]
#[pyo3(signature = (config, dataset = None, out = None))]
fn run_experiment(
    py: Python<'_>,
    config: &PyConfig,
    dataset: Option<&PyDataset>,
    out: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let cfg = config.inner.clone();
    let data = dataset.map(|d| d.data.clone());
    let report = py
        .detach(move || {
            let data = match data {
                Some(d) => d,
                None => Data::load(&cfg)?,
            };
            driver::run_experiment(cfg, data, out)
        })
        .map_err(to_py)?;
    json_to_py(py, &serde_json::to_string(&report).expect("report serialization"))
}

/// Runs every strategy × seed of `config`; returns the summary rows.
#[pyfunction]
#[pyo3(signature = (config, dataset = None, out = None))]
fn run_sweep(
    py: Python<'_>,
    config: &PyConfig,
    dataset: Option<&PyDataset>,
    out: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let cfg = config.inner.clone();
    let data = dataset.map(|d| d.data.clone());
    let summary = py
        .detach(move || {
            let data = match data {
                Some(d) => d,
                None => Data::load(&cfg)?,
            };
            driver::run_sweep(&cfg, &data, out.as_deref())
        })
        .map_err(to_py)?;
    json_to_py(py, &serde_json::to_string(&summary.rows).expect("summary serialization"))
}

#[pymodule]
fn apis_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(budget_equivalent_masks, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(select_point, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    Ok(())
}
