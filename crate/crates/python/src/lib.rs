//! Python bindings: tensor sets, feature detection, pair matching, index
//! build/query and evaluation. Configuration crosses the boundary as JSON text.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use dsm::config::Config;
use dsm::eval::{evaluate as eval_runs, GroundTruth, Setup};
use dsm::features::{detect_features as detect, Role};
use dsm::index::{build_index, dataset_delta, index_from_bytes, index_to_bytes, read_index, write_index};
use dsm::matcher::{match_multiscale, similarity};
use dsm::query::{query_trace, QueryOptions, RankedEntry, RankedList, Stage};
use dsm::synth::{synth_dataset, SynthConfig};
use dsm::tensor::{read_tensor_set, tensor_set_to_bytes, FeatureTensor, ScaledTensor, TensorSet};

create_exception!(dsm_py, DsmError, PyValueError);

fn err(e: dsm::DsmError) -> PyErr {
    match e {
        dsm::DsmError::Io(io) => PyIOError::new_err(io.to_string()),
        other => DsmError::new_err(other.to_string()),
    }
}

fn config(json: Option<&str>) -> PyResult<Config> {
    json.map_or_else(|| Ok(Config::default()), |t| Config::from_json(t).map_err(err))
}

fn role(name: &str) -> PyResult<Role> {
    match name {
        "query" => Ok(Role::Query),
        "database" => Ok(Role::Database),
        _ => Err(PyValueError::new_err(format!("role must be 'query' or 'database', got {name:?}"))),
    }
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Cosine => "cosine",
        Stage::Spatial => "spatial",
        Stage::Diffusion => "diffusion",
    }
}

/// Activation tensors of one image at one or more scales.
#[pyclass(name = "TensorSet", module = "dsm_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyTensorSet(TensorSet);

#[pymethods]
impl PyTensorSet {
    /// Single-scale set from channel-major values of shape `(channels, height, width)`.
    #[new]
    fn new(image_id: String, channels: usize, height: usize, width: usize, values: Vec<f32>) -> PyResult<Self> {
        let t = FeatureTensor::new(channels, height, width, values).map_err(err)?;
        Ok(PyTensorSet(TensorSet::single(image_id, t)))
    }

    /// Multi-scale set from `(factor, channels, height, width, values)` tuples.
    #[staticmethod]
    fn from_scales(image_id: String, scales: Vec<(f64, usize, usize, usize, Vec<f32>)>) -> PyResult<Self> {
        let scales = scales
            .into_iter()
            .map(|(factor, k, h, w, v)| Ok(ScaledTensor { factor, tensor: FeatureTensor::new(k, h, w, v)? }))
            .collect::<dsm::Result<Vec<_>>>()
            .map_err(err)?;
        Ok(PyTensorSet(TensorSet::new(image_id, "python", scales).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Ok(PyTensorSet(read_tensor_set(&mut BufReader::new(f)).map_err(err)?))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyTensorSet(read_tensor_set(&mut &data[..]).map_err(err)?))
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        tensor_set_to_bytes(&self.0).map_err(err)
    }

    #[getter]
    fn image_id(&self) -> String {
        self.0.image_id.clone()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    /// `(factor, height, width)` per scale.
    #[getter]
    fn scales(&self) -> Vec<(f64, usize, usize)> {
        self.0.scales.iter().map(|s| (s.factor, s.tensor.height(), s.tensor.width())).collect()
    }

    /// Channel-major values of scale `scale`.
    fn values(&self, scale: usize) -> PyResult<Vec<f32>> {
        self.0
            .scales
            .get(scale)
            .map(|s| s.tensor.values().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("no scale {scale}")))
    }

    fn __repr__(&self) -> String {
        format!("TensorSet({:?}, channels={}, scales={})", self.0.image_id, self.0.channels(), self.0.scales.len())
    }
}

/// A local feature as `(channel, scale, (col, row), (s_cc, s_cr, s_rr), strength)`.
type FeatureTuple = (u32, u8, (f64, f64), (f64, f64, f64), f64);

/// Features of `set` with the MSER step taken from `set` itself.
#[pyfunction]
#[pyo3(signature = (set, role = "query", config_json = None))]
fn detect_features(set: &PyTensorSet, role: &str, config_json: Option<&str>) -> PyResult<Vec<FeatureTuple>> {
    let cfg = config(config_json)?;
    let delta = dataset_delta(std::slice::from_ref(&set.0), cfg.delta_fraction).map_err(err)?;
    let f = detect(&set.0, &cfg.detector_params(delta), self::role(role)?, &cfg.feature_params()).map_err(err)?;
    Ok(f.iter()
        .map(|p| (p.channel, p.scale_index, (p.mu[0], p.mu[1]), (p.sigma[0], p.sigma[1], p.sigma[2]), p.strength))
        .collect())
}

/// `(channel, (col, row) in a, (col, row) in b)`.
type Pair = (u32, (f64, f64), (f64, f64));

/// Outcome of matching two sets.
#[pyclass(name = "Match", module = "dsm_py", frozen, get_all)]
struct PyMatch {
    inliers: usize,
    /// `(a, b, c, tx, ty)` of the winning upright transform.
    transform: (f64, f64, f64, f64, f64),
    residual: f64,
    scale_pair: (usize, usize),
    correspondences: Vec<Pair>,
}

#[pymethods]
impl PyMatch {
    fn __repr__(&self) -> String {
        format!("Match(inliers={}, scale_pair={:?})", self.inliers, self.scale_pair)
    }
}

/// Detects features in both sets with a shared MSER step and matches them.
#[pyfunction]
#[pyo3(signature = (a, b, config_json = None))]
fn match_pair(py: Python<'_>, a: &PyTensorSet, b: &PyTensorSet, config_json: Option<&str>) -> PyResult<PyMatch> {
    let cfg = config(config_json)?;
    let (a, b) = (&a.0, &b.0);
    py.detach(|| {
        let delta = dataset_delta(&[a.clone(), b.clone()], cfg.delta_fraction)?;
        let det = cfg.detector_params(delta);
        let f1 = detect(a, &det, Role::Query, &cfg.feature_params())?;
        let f2 = detect(b, &det, Role::Database, &cfg.feature_params())?;
        let m =
            match_multiscale(&f1.split_scales(a.scales.len()), &f2.split_scales(b.scales.len()), &cfg.match_params());
        let t = m.transform;
        Ok(PyMatch {
            inliers: similarity(&m),
            transform: (t.a, t.b, t.c, t.tx, t.ty),
            residual: m.residual,
            scale_pair: m.scale_pair,
            correspondences: m
                .iter_inliers()
                .map(|c| (c.channel, (c.p1.mu[0], c.p1.mu[1]), (c.p2.mu[0], c.p2.mu[1])))
                .collect(),
        })
    })
    .map_err(err)
}

/// Retrieval index over a database of tensor sets.
#[pyclass(name = "Index", module = "dsm_py", frozen)]
struct PyIndex(dsm::index::Index);

#[pymethods]
impl PyIndex {
    /// `pairs` lists matching image ids for supervised whitening.
    #[staticmethod]
    #[pyo3(signature = (sets, config_json = None, pairs = None))]
    fn build(
        py: Python<'_>,
        sets: Vec<PyTensorSet>,
        config_json: Option<&str>,
        pairs: Option<Vec<(String, String)>>,
    ) -> PyResult<Self> {
        let cfg = config(config_json)?;
        let sets: Vec<TensorSet> = sets.into_iter().map(|s| s.0).collect();
        py.detach(|| build_index(sets, &cfg, pairs.as_deref())).map(PyIndex).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Ok(PyIndex(read_index(&mut BufReader::new(f)).map_err(err)?))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyIndex(index_from_bytes(data).map_err(err)?))
    }

    fn save(&self, path: &str) -> PyResult<usize> {
        let f = File::create(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let mut w = BufWriter::new(f);
        let n = write_index(&self.0, &mut w).map_err(err)?;
        w.flush().map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(n)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        index_to_bytes(&self.0).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn image_ids(&self) -> Vec<String> {
        self.0.image_ids.clone()
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.0.delta
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Ranking of the whole database as `(id, score, stage)` triples.
    #[pyo3(signature = (set, rerank = None, diffuse = false))]
    fn query(
        &self,
        py: Python<'_>,
        set: &PyTensorSet,
        rerank: Option<usize>,
        diffuse: bool,
    ) -> PyResult<Vec<(String, f64, &'static str)>> {
        let mut opts = QueryOptions::from_index(&self.0);
        opts.diffuse = diffuse;
        if let Some(r) = rerank {
            opts.rerank_top = r;
        }
        let trace = py.detach(|| query_trace(&self.0, &set.0, &opts)).map_err(err)?;
        Ok(trace.final_list().results.iter().map(|e| (e.id.clone(), e.score, stage_name(e.stage))).collect())
    }

    fn __repr__(&self) -> String {
        format!("Index(images={}, channels={})", self.0.len(), self.0.channels)
    }
}

/// `{query_id: [result ids in rank order]}` scored against ground-truth JSON.
/// Returns `(mAP, mP@10)`.
#[pyfunction]
#[pyo3(signature = (runs, gt_json, setup = "medium"))]
fn evaluate(runs: Vec<(String, Vec<String>)>, gt_json: &str, setup: &str) -> PyResult<(f64, f64)> {
    let setup = match setup {
        "medium" => Setup::Medium,
        "hard" => Setup::Hard,
        _ => return Err(PyValueError::new_err(format!("setup must be 'medium' or 'hard', got {setup:?}"))),
    };
    let gt = GroundTruth::from_json(gt_json).map_err(err)?;
    let runs: Vec<RankedList> = runs
        .into_iter()
        .map(|(query, ids)| RankedList {
            query,
            results: ids.into_iter().map(|id| RankedEntry { id, score: 0.0, stage: Stage::Cosine }).collect(),
        })
        .collect();
    let m = eval_runs(&runs, &gt, setup).map_err(err)?;
    Ok((m.map, m.mp10))
}

/// Synthetic retrieval fixture: `(database, queries, ground_truth_json)`.
#[pyfunction]
#[pyo3(signature = (seed = 7, queries = 10, positives = 4, channels = 64, multiscale = true))]
fn synth(
    seed: u64,
    queries: usize,
    positives: usize,
    channels: usize,
    multiscale: bool,
) -> PyResult<(Vec<PyTensorSet>, Vec<PyTensorSet>, String)> {
    let ds = synth_dataset(&SynthConfig { seed, queries, positives, channels, multiscale, ..SynthConfig::default() })
        .map_err(err)?;
    let gt = serde_json::to_string(&ds.ground_truth).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((ds.database.into_iter().map(PyTensorSet).collect(), ds.queries.into_iter().map(PyTensorSet).collect(), gt))
}

/// Default configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&Config::default()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn dsm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DsmError", m.py().get_type::<DsmError>())?;
    m.add_class::<PyTensorSet>()?;
    m.add_class::<PyMatch>()?;
    m.add_class::<PyIndex>()?;
    m.add_function(wrap_pyfunction!(detect_features, m)?)?;
    m.add_function(wrap_pyfunction!(match_pair, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
