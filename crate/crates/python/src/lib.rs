//! Python bindings: volumes, models, the risk and metric functions and the
//! command-line entry point.

use pyo3::prelude::*;

#[pymodule]
mod pylogomr {
    use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
    use pyo3::prelude::*;
    use pyo3::types::PyBytes;

    use logomr::aggregator::Mode;
    use logomr::encoder::EncoderConfig;
    use logomr::metrics::{self, SurvivalPoint};
    use logomr::model::{ModelConfig, PlaneModel};
    use logomr::model_io;
    use logomr::multiplane::{self, RiskModel, TriPlaneModel};
    use logomr::risk::{self, ExamRecord, LabelVector};
    use logomr::synthcohort::{self, CohortConfig};
    use logomr::volume::{self, Plane};
    use logomr::Error;

    fn to_py(e: Error) -> PyErr {
        match e {
            Error::Io { .. } | Error::Csv { .. } => PyIOError::new_err(e.to_string()),
            Error::Numeric { .. } | Error::Training(_) => PyArithmeticError::new_err(e.to_string()),
            _ => PyValueError::new_err(e.to_string()),
        }
    }

    fn record(event_year: u32, followup_years: f64) -> ExamRecord {
        ExamRecord {
            exam_id: String::new(),
            patient_id: String::new(),
            volume_path: String::new(),
            event_year,
            followup_years,
        }
    }

    /// A dense `d × h × w` intensity volume.
    #[pyclass(name = "Volume", module = "pylogomr", skip_from_py_object)]
    #[derive(Clone)]
    struct PyVolume(volume::Volume);

    #[pymethods]
    impl PyVolume {
        #[new]
        fn new(dims: [usize; 3], voxels: Vec<f64>) -> PyResult<Self> {
            volume::Volume::new(dims, voxels).map(PyVolume).map_err(to_py)
        }

        #[staticmethod]
        fn zeros(dims: [usize; 3]) -> Self {
            PyVolume(volume::Volume::zeros(dims))
        }

        #[staticmethod]
        fn load(path: &str) -> PyResult<Self> {
            volume::Volume::load(path).map(PyVolume).map_err(to_py)
        }

        #[staticmethod]
        fn from_bytes(data: &[u8]) -> PyResult<Self> {
            volume::Volume::from_bytes(data).map(PyVolume).map_err(to_py)
        }

        fn save(&self, path: &str) -> PyResult<()> {
            self.0.save(path).map_err(to_py)
        }

        fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
            PyBytes::new(py, &self.0.to_bytes())
        }

        #[getter]
        fn dims(&self) -> [usize; 3] {
            self.0.dims()
        }

        fn voxels(&self) -> Vec<f64> {
            self.0.voxels().to_vec()
        }

        fn get(&self, d: usize, h: usize, w: usize) -> PyResult<f64> {
            let [dd, hh, ww] = self.0.dims();
            if d >= dd || h >= hh || w >= ww {
                return Err(PyValueError::new_err(format!("voxel ({d}, {h}, {w}) outside {dd}x{hh}x{ww}")));
            }
            Ok(self.0.get(d, h, w))
        }

        fn __repr__(&self) -> String {
            let [d, h, w] = self.0.dims();
            format!("Volume({d}x{h}x{w})")
        }
    }

    fn model_config(mode: &str, gap: usize, widths: Option<Vec<usize>>, target_dims: Option<[usize; 3]>) -> PyResult<ModelConfig> {
        let defaults = ModelConfig::default();
        let encoder = match widths {
            Some(widths) => EncoderConfig { widths, ..EncoderConfig::default() },
            None => defaults.encoder.clone(),
        };
        Ok(ModelConfig {
            ffn_dim: 4 * encoder.embed_dim(),
            encoder,
            mode: mode.parse::<Mode>().map_err(to_py)?,
            gap,
            target_dims: target_dims.unwrap_or(defaults.target_dims),
            ..defaults
        })
    }

    /// A single-plane or tri-plane risk model.
    #[pyclass(name = "Model", module = "pylogomr")]
    struct PyModel(RiskModel);

    #[pymethods]
    impl PyModel {
        /// Freshly initialized model for one plane, or all three when
        /// `plane` is `"all"`.
        #[new]
        #[pyo3(signature = (mode = "logo", plane = "axial", seed = 0, gap = 5, widths = None, target_dims = None))]
        fn new(
            mode: &str,
            plane: &str,
            seed: u64,
            gap: usize,
            widths: Option<Vec<usize>>,
            target_dims: Option<[usize; 3]>,
        ) -> PyResult<Self> {
            let cfg = model_config(mode, gap, widths, target_dims)?;
            let model = if plane == "all" {
                RiskModel::Tri(TriPlaneModel::new(&cfg, seed).map_err(to_py)?)
            } else {
                let plane = plane.parse::<Plane>().map_err(to_py)?;
                RiskModel::Single(PlaneModel::new(&cfg, plane, seed).map_err(to_py)?)
            };
            Ok(PyModel(model))
        }

        #[staticmethod]
        fn load(path: &str) -> PyResult<Self> {
            model_io::load_model(path).map(PyModel).map_err(to_py)
        }

        fn save(&self, path: &str) -> PyResult<()> {
            model_io::save_model(&self.0, path).map_err(to_py)
        }

        #[getter]
        fn planes(&self) -> Vec<String> {
            self.0.planes().iter().map(|p| p.name().to_string()).collect()
        }

        #[getter]
        fn mode(&self) -> String {
            self.0.config().mode.to_string()
        }

        #[getter]
        fn gap(&self) -> usize {
            self.0.config().gap
        }

        #[getter]
        fn horizons(&self) -> usize {
            self.0.config().horizons
        }

        /// Per-year probabilities followed by the event-free bin.
        fn predict(&self, volume: &PyVolume) -> PyResult<Vec<f64>> {
            self.0.predict(&volume.0).map_err(to_py)
        }

        /// Slice attention per plane, in plane order.
        fn attention(&self, volume: &PyVolume) -> PyResult<Vec<Vec<f64>>> {
            match &self.0 {
                RiskModel::Single(m) => Ok(vec![m.predict(&volume.0).map_err(to_py)?.alpha]),
                RiskModel::Tri(t) => {
                    let out = t.forward(&volume.0).map_err(to_py)?;
                    Ok(Plane::ALL.iter().map(|&p| out.alpha(p).to_vec()).collect())
                }
            }
        }

        /// Voxel saliency of a tri-plane model, at the volume's own dims.
        fn saliency(&self, volume: &PyVolume) -> PyResult<PyVolume> {
            let RiskModel::Tri(t) = &self.0 else {
                return Err(PyValueError::new_err("saliency needs a tri-plane model"));
            };
            let out = t.forward(&volume.0).map_err(to_py)?;
            let dims = volume.0.dims();
            let w: Vec<Vec<f64>> = Plane::ALL
                .iter()
                .map(|&p| multiplane::resample_weights(out.alpha(p), dims[p.axis()]))
                .collect::<Result<_, _>>()
                .map_err(to_py)?;
            let map = multiplane::saliency_map(&w[0], &w[1], &w[2], dims).map_err(to_py)?;
            Ok(PyVolume(map.as_volume().clone()))
        }

        fn flops(&self) -> u64 {
            let cfg = self.0.config();
            self.0.planes().iter().map(|&p| metrics::count_flops(cfg, cfg.target_dims, p)).sum()
        }

        fn __repr__(&self) -> String {
            format!("Model(mode={}, planes={})", self.0.config().mode, self.planes().join("+"))
        }
    }

    #[pyfunction]
    fn cumulative_risk(p: Vec<f64>, m: usize) -> PyResult<f64> {
        risk::cumulative_risk(&p, m).map_err(to_py)
    }

    /// `(target, mask)` for an exam; `event_year` 0 means no event.
    #[pyfunction]
    #[pyo3(signature = (event_year, followup_years, horizons = 5))]
    fn encode_label(event_year: u32, followup_years: f64, horizons: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let label = risk::encode_label(&record(event_year, followup_years), horizons).map_err(to_py)?;
        Ok((label.target, label.mask))
    }

    #[pyfunction]
    fn masked_bce(p: Vec<f64>, target: Vec<f64>, mask: Vec<f64>) -> PyResult<f64> {
        risk::masked_bce(&p, &LabelVector { target, mask }).map_err(to_py)
    }

    #[pyfunction]
    fn c_index(scores: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
        if scores.len() != times.len() || scores.len() != events.len() {
            return Err(PyValueError::new_err("scores, times and events differ in length"));
        }
        let points: Vec<SurvivalPoint> = scores
            .iter()
            .zip(&times)
            .zip(&events)
            .map(|((&score, &time), &event)| SurvivalPoint { score, time, event })
            .collect();
        metrics::c_index(&points).map_err(to_py)
    }

    #[pyfunction]
    fn horizon_auc(scores: Vec<f64>, event_years: Vec<u32>, followup_years: Vec<f64>, m: usize) -> PyResult<f64> {
        if scores.len() != event_years.len() || scores.len() != followup_years.len() {
            return Err(PyValueError::new_err("scores, event_years and followup_years differ in length"));
        }
        let records: Vec<ExamRecord> = event_years.iter().zip(&followup_years).map(|(&y, &f)| record(y, f)).collect();
        metrics::horizon_auc(&records, &scores, m).map_err(to_py)
    }

    #[pyfunction]
    fn saliency_map(axial: Vec<f64>, coronal: Vec<f64>, sagittal: Vec<f64>, dims: [usize; 3]) -> PyResult<PyVolume> {
        let map = multiplane::saliency_map(&axial, &coronal, &sagittal, dims).map_err(to_py)?;
        Ok(PyVolume(map.as_volume().clone()))
    }

    /// Writes a synthetic cohort into `out` and returns its manifest rows as
    /// `(exam_id, patient_id, volume_path, event_year, followup_years)`.
    #[pyfunction]
    #[pyo3(signature = (out, exams = 600, seed = 0, dims = None))]
    fn generate_cohort(out: &str, exams: usize, seed: u64, dims: Option<[usize; 3]>) -> PyResult<Vec<(String, String, String, u32, f64)>> {
        let defaults = CohortConfig::default();
        let cfg = CohortConfig {
            exams,
            seed,
            dims: dims.unwrap_or(defaults.dims),
            ..defaults
        };
        let records = synthcohort::generate_cohort(&cfg, out).map_err(to_py)?;
        Ok(records
            .into_iter()
            .map(|r| (r.exam_id, r.patient_id, r.volume_path, r.event_year, r.followup_years))
            .collect())
    }

    /// Runs the command-line tool in-process and returns its exit code.
    #[pyfunction]
    fn run_cli(args: Vec<String>) -> i32 {
        logomr::cli::run(std::iter::once("logomr".to_string()).chain(args))
    }
}
