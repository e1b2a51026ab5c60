//! Python bindings for the ctxedit pipeline: dataset generation, editing,
//! evaluation, and a few numeric helpers.

use pyo3::exceptions::PyRuntimeError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ctxedit::checkpoint::Checkpoint;
use ctxedit::editor::GuidanceConfig;
use ctxedit::error::PipelineError;
use ctxedit::image::Image;
use ctxedit::metrics::evaluate;
use ctxedit::model::Pipeline;
use ctxedit::numerics::tape::Tape;
use ctxedit::trainer::{train_phase, Phase, TrainConfig};
use ctxedit::vocab;
use ctxedit::world;

fn err(e: PipelineError) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn werr(e: world::WorldError) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// The assembled editing pipeline.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    inner: Pipeline,
}

/// Result of one editing run.
#[pyclass(name = "EditResult")]
struct PyEditResult {
    #[pyo3(get)]
    labels: Vec<String>,
    #[pyo3(get)]
    alignment: Vec<usize>,
    edited_ppm: Vec<u8>,
    masks_pgm: Vec<Vec<u8>>,
}

#[pymethods]
impl PyEditResult {
    /// Edited image as binary PPM bytes.
    fn edited_ppm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &self.edited_ppm)
    }

    /// Per-instruction binary masks as PGM bytes.
    fn masks_pgm<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyBytes>> {
        self.masks_pgm
            .iter()
            .map(|m| PyBytes::new_bound(py, m))
            .collect()
    }
}

impl PyPipeline {
    fn edit_inner(
        &self,
        image: &Image,
        instruction_texts: &[String],
        seed: u64,
        s_img: f64,
        s_text: f64,
    ) -> PyResult<PyEditResult> {
        let prompt_text = instruction_texts
            .iter()
            .map(|t| format!("{t} {}", vocab::SEP))
            .collect::<Vec<_>>()
            .join(" ");
        let prompt = vocab::tokenize(&prompt_text).map_err(|e| err(e.into()))?;
        let inf = self
            .inner
            .infer(image, &prompt, GuidanceConfig { s_img, s_text }, seed)
            .map_err(err)?;
        Ok(PyEditResult {
            labels: inf
                .labels
                .iter()
                .map(|l| if l.editable() { "MASK".into() } else { "NEG".into() })
                .collect(),
            alignment: inf.alignment,
            edited_ppm: inf.edited.to_ppm(),
            masks_pgm: inf.masks.iter().map(|m| m.to_pgm()).collect(),
        })
    }
}

#[pymethods]
impl PyPipeline {
    /// Freshly seeded (untrained) pipeline.
    #[staticmethod]
    fn seeded(seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: Pipeline::seeded(seed).map_err(err)?,
        })
    }

    /// Load a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            inner: Pipeline::from_checkpoint(&ck).map_err(err)?,
        })
    }

    /// Save the parameters under the given phase tag.
    fn save(&self, path: PathBuf, phase: &str) -> PyResult<()> {
        self.inner.to_checkpoint(phase).save(&path).map_err(err)
    }

    /// Edit the scene of an episode file.
    #[pyo3(signature = (episode_path, seed = 0, s_img = 1.5, s_text = 7.5))]
    fn edit_episode(
        &self,
        episode_path: PathBuf,
        seed: u64,
        s_img: f64,
        s_text: f64,
    ) -> PyResult<PyEditResult> {
        let ep = world::load_episode(&episode_path).map_err(werr)?;
        let texts: Vec<String> = ep.instructions.iter().map(|i| i.text.clone()).collect();
        self.edit_inner(&ep.scene.image, &texts, seed, s_img, s_text)
    }

    /// Edit a raw PPM image with a list of instruction texts.
    #[pyo3(signature = (ppm_bytes, instructions, seed = 0, s_img = 1.5, s_text = 7.5))]
    fn edit_image(
        &self,
        ppm_bytes: &[u8],
        instructions: Vec<String>,
        seed: u64,
        s_img: f64,
        s_text: f64,
    ) -> PyResult<PyEditResult> {
        let image = Image::from_ppm(ppm_bytes).map_err(|e| err(e.into()))?;
        self.edit_inner(&image, &instructions, seed, s_img, s_text)
    }

    /// Run one training phase over a generated dataset directory.
    #[pyo3(signature = (phase, data_dir, config_text = None))]
    fn train(&mut self, phase: &str, data_dir: PathBuf, config_text: Option<&str>) -> PyResult<()> {
        let phase = Phase::from_name(phase)
            .ok_or_else(|| PyRuntimeError::new_err(format!("unknown phase {phase:?}")))?;
        let cfg = match config_text {
            Some(t) => TrainConfig::from_config_text(t).map_err(err)?,
            None => TrainConfig::default(),
        };
        let train = world::load_split(&data_dir, "train").map_err(werr)?;
        let val = world::load_split(&data_dir, "val").map_err(werr)?;
        train_phase(&mut self.inner, phase, &cfg, &train, &val).map_err(err)?;
        Ok(())
    }

    /// Evaluate on a split; returns a metric-name -> value dict.
    #[pyo3(signature = (data_dir, split = "test", seed = 0, s_img = 1.5, s_text = 7.5))]
    fn evaluate(
        &self,
        data_dir: PathBuf,
        split: &str,
        seed: u64,
        s_img: f64,
        s_text: f64,
    ) -> PyResult<BTreeMap<String, f64>> {
        let episodes = world::load_split(&data_dir, split).map_err(werr)?;
        let m = evaluate(&self.inner, &episodes, GuidanceConfig { s_img, s_text }, seed)
            .map_err(err)?;
        let mut out = BTreeMap::new();
        out.insert("l1".to_string(), m.l1);
        out.insert("l2".to_string(), m.l2);
        out.insert("sim_i".to_string(), m.sim_i);
        out.insert("sim_t".to_string(), m.sim_t);
        out.insert("sim_dir".to_string(), m.sim_dir);
        out.insert("token_accuracy".to_string(), m.token_accuracy);
        out.insert("iou".to_string(), m.iou);
        out.insert("dice".to_string(), m.dice);
        Ok(out)
    }
}

/// Generate train/val/test episode files; returns the number written.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, train = 256, val = 32, test = 64))]
fn generate_dataset(
    out_dir: PathBuf,
    seed: u64,
    train: usize,
    val: usize,
    test: usize,
) -> PyResult<usize> {
    let written = world::build_split(world::SplitCounts { train, val, test }, seed, &out_dir)
        .map_err(werr)?;
    Ok(written.len())
}

/// Generate one episode file; returns (instruction_texts, applicability).
#[pyfunction]
#[pyo3(signature = (path, seed, n_applicable = 2, n_nonapplicable = 1))]
fn generate_episode(
    path: PathBuf,
    seed: u64,
    n_applicable: usize,
    n_nonapplicable: usize,
) -> PyResult<(Vec<String>, Vec<bool>)> {
    let ep = world::gen_episode(
        seed,
        &world::EpisodeConfig {
            scene: world::SceneConfig {
                min_objects: n_applicable.clamp(1, 4),
                max_objects: 4,
                ..world::SceneConfig::default()
            },
            n_applicable,
            n_nonapplicable,
        },
    )
    .map_err(werr)?;
    world::save_episode(&ep, Path::new(&path)).map_err(werr)?;
    Ok((
        ep.instructions.iter().map(|i| i.text.clone()).collect(),
        ep.applicability(),
    ))
}

/// Tokenize text against the closed vocabulary.
#[pyfunction]
fn tokenize(text: &str) -> PyResult<Vec<usize>> {
    vocab::tokenize(text).map_err(|e| err(e.into()))
}

/// The full vocabulary, id-ordered.
#[pyfunction]
fn vocabulary() -> Vec<String> {
    vocab::WORDS.iter().map(|w| w.to_string()).collect()
}

/// Numerically stable softmax over a flat vector (tape-backed).
#[pyfunction]
fn softmax(values: Vec<f64>) -> PyResult<Vec<f64>> {
    let n = values.len();
    let mut tape = Tape::new();
    let x = tape.constant(values, vec![n]).map_err(|e| err(e.into()))?;
    let s = tape.softmax(x, 0).map_err(|e| err(e.into()))?;
    Ok(tape.data(s).to_vec())
}

#[pymodule]
fn ctxedit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyEditResult>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(generate_episode, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(vocabulary, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    Ok(())
}
