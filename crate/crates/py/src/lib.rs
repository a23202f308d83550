use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use asymforge_core::eval::{self, Combination};
use asymforge_core::kdtrain::{self, KDSchedule, Regime, ToyModel, TrainConfig};
use asymforge_core::symmetry::calibrate_detailed;
use asymforge_core::synth::{self, SynthConfig};
use asymforge_core::volume::normalize_sample;
use asymforge_core::{io, phantom, Axis, BrainMask, Dims, Error, Modality};

fn py_err(e: Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn modality(name: &str) -> PyResult<Modality> {
    Modality::ALL
        .into_iter()
        .find(|m| m.stem() == name.to_ascii_lowercase() || m.short() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown modality {name:?}")))
}

/// A labelled multi-modal sample.
#[pyclass(name = "Sample", module = "asymforge", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: asymforge_core::Sample,
}

#[pymethods]
impl PySample {
    /// Loads a sample directory holding flair/t1ce/t1/t2 and label volumes.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySample {
            inner: io::load_labelled_dir(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_sample(&path, &self.inner.image, Some(&self.inner.labels)).map_err(py_err)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    /// `(depth, height, width)`
    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d.depth, d.height, d.width)
    }

    #[getter]
    fn availability(&self) -> Vec<bool> {
        self.inner.image.availability().to_vec()
    }

    /// Voxel counts for labels 0, 1, 2, 4.
    fn label_histogram(&self) -> Vec<usize> {
        self.inner.labels.histogram().to_vec()
    }

    /// Flat voxel values of one modality (x fastest), or None when absent.
    fn modality(&self, name: &str) -> PyResult<Option<Vec<f32>>> {
        Ok(self.inner.image.get(modality(name)?).map(|v| v.data().to_vec()))
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels.data().to_vec()
    }

    /// Copy with every present modality z-scored over the brain.
    fn normalized(&self) -> PyResult<Self> {
        let mut s = self.inner.clone();
        s.image = normalize_sample(&s.image).map_err(py_err)?;
        Ok(PySample { inner: s })
    }

    /// Copy with only the listed modalities, e.g. `"F+T1ce"`.
    fn restrict(&self, combination: &str) -> PyResult<Self> {
        let c: Combination = combination.parse().map_err(py_err)?;
        let mut s = self.inner.clone();
        s.image = s.image.restrict(c.mask()).map_err(py_err)?;
        Ok(PySample { inner: s })
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, dims={})", self.inner.id, self.inner.dims())
    }
}

/// Tumor-bearing symmetric phantoms.
#[pyfunction]
#[pyo3(signature = (n, size=16, seed=0))]
fn phantom_cohort(n: usize, size: usize, seed: u64) -> Vec<PySample> {
    phantom::cohort(n, Dims::cube(size), seed)
        .into_iter()
        .map(|inner| PySample { inner })
        .collect()
}

/// Returns `(offset, [(offset, cost), ...])`.
#[pyfunction]
#[pyo3(signature = (sample, radius=10))]
fn calibrate(sample: &PySample, radius: usize) -> PyResult<(i32, Vec<(i32, usize)>)> {
    let c = calibrate_detailed(&sample.inner.image, Axis::Width, radius).map_err(py_err)?;
    Ok((c.spec.offset, c.costs))
}

/// Transplants the donor's tumor into the host (both normalized). Returns
/// the synthetic sample and its provenance as JSON.
#[pyfunction]
#[pyo3(signature = (host, donor, seed=0, mask_to_brain=false))]
fn synthesize(host: &PySample, donor: &PySample, seed: u64, mask_to_brain: bool) -> PyResult<(PySample, String)> {
    let cfg = SynthConfig {
        mask_to_brain,
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = synth::synthesize(&host.inner, &donor.inner, &cfg, seed, &mut rng).map_err(py_err)?;
    let prov = serde_json::to_string(&s.provenance).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let id = format!("{}+{}", host.inner.id, donor.inner.id);
    Ok((PySample { inner: s.into_sample(id) }, prov))
}

#[pyfunction]
fn fuse_label(a: u8, b: u8) -> PyResult<u8> {
    synth::fuse_label_voxel(a, b).map_err(py_err)
}

#[pyfunction]
fn dice(pred: Vec<bool>, gt: Vec<bool>) -> PyResult<f64> {
    let d = Dims::new(1, 1, pred.len());
    let p = BrainMask::new(d, pred).map_err(py_err)?;
    let g = BrainMask::new(Dims::new(1, 1, gt.len()), gt).map_err(py_err)?;
    eval::dice(&p, &g).map_err(py_err)
}

/// The 15 modality combinations in report order.
#[pyfunction]
fn combinations() -> Vec<String> {
    eval::combinations().iter().map(|c| c.to_string()).collect()
}

fn samples_of(samples: &[PySample]) -> Vec<asymforge_core::Sample> {
    samples.iter().map(|s| s.inner.clone()).collect()
}

/// The per-voxel segmentation model.
#[pyclass(name = "Model", module = "asymforge", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ToyModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (hidden=16, seed=0))]
    fn new(hidden: usize, seed: u64) -> PyResult<Self> {
        if hidden == 0 {
            return Err(PyValueError::new_err("hidden must be >= 1"));
        }
        Ok(PyModel {
            inner: ToyModel::random(hidden, &mut ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: kdtrain::load_checkpoint(&path).map_err(py_err)?,
        })
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns the descriptor path.
    #[pyo3(signature = (dir, stem="model"))]
    fn save(&self, dir: PathBuf, stem: &str) -> PyResult<PathBuf> {
        kdtrain::save_checkpoint(&self.inner, &dir, stem).map_err(py_err)
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.hidden
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }

    /// Trains in place; returns the per-epoch segmentation loss.
    #[pyo3(signature = (samples, epochs, lr=2e-4, seed=0, modalities=None))]
    fn train(&mut self, samples: Vec<PySample>, epochs: usize, lr: f64, seed: u64, modalities: Option<&str>) -> PyResult<Vec<f64>> {
        let regime = match modalities {
            Some(m) => Regime::OneToOne(m.parse().map_err(py_err)?),
            None => Regime::Full,
        };
        let cfg = TrainConfig {
            epochs,
            lr,
            seed,
            regime,
            ..TrainConfig::default()
        };
        let (m, log) = kdtrain::train_standard(&self.inner, &samples_of(&samples), &[], &cfg, "train").map_err(py_err)?;
        self.inner = m;
        Ok(log.iter().map(|e| e.l_seg).collect())
    }

    /// Distillation post-training; returns a new student model and the
    /// per-epoch `(l_seg, l_kd, l_post)`.
    #[pyo3(signature = (samples, epochs, k=5, lr=2e-4, seed=0))]
    fn post_train(&self, samples: Vec<PySample>, epochs: usize, k: usize, lr: f64, seed: u64) -> PyResult<(PyModel, Vec<(f64, f64, f64)>)> {
        let sched = KDSchedule {
            k,
            epochs,
            lr,
            ..KDSchedule::default()
        };
        let out = kdtrain::post_train(&self.inner, &samples_of(&samples), &[], &sched, seed).map_err(py_err)?;
        let log = out.log.iter().map(|e| (e.l_seg, e.l_kd, e.l_post)).collect();
        Ok((PyModel { inner: out.student }, log))
    }

    /// Labels predicted for a sample (flat, x fastest).
    fn predict(&self, sample: &PySample) -> Vec<u8> {
        kdtrain::predict(&self.inner, &sample.inner.image).data().to_vec()
    }

    /// Mean `(WT, TC, ET)` Dice with only `combination` available.
    #[pyo3(signature = (samples, combination="F+T1ce+T1+T2"))]
    fn evaluate(&self, samples: Vec<PySample>, combination: &str) -> PyResult<(f64, f64, f64)> {
        let c: Combination = combination.parse().map_err(py_err)?;
        let d = eval::evaluate(&self.inner, &samples_of(&samples), c).map_err(py_err)?;
        Ok((d.wt, d.tc, d.et))
    }

    /// The 15-combination report as CSV.
    fn report(&self, samples: Vec<PySample>) -> PyResult<String> {
        Ok(eval::evaluate_all(&self.inner, &samples_of(&samples)).map_err(py_err)?.to_csv())
    }
}

#[pymodule]
fn asymforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(phantom_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_label, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(combinations, m)?)?;
    Ok(())
}
