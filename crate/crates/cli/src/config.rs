//! Pipeline configuration file.

use std::path::Path;

use mmtomo::dynamics::{prepare_named_state, run_sequence, NamedState, PulseSequence, RabiCalibration};
use mmtomo::fitting::{w_manifold_subset, Constraint, FitOptions, RowSelection};
use mmtomo::fockspace::{DensityMatrix, HilbertConfig, PureState};
use mmtomo::measurement::{uniform_times, SampleOptions};
use mmtomo::pipeline::ReadoutSpec;
use mmtomo::reconstruction::DisplacementGrid;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA: &str = "mmtomo/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub hilbert: HilbertConfig,
    pub preparation: PreparationSpec,
    #[serde(default)]
    pub readout: Option<ReadoutConfig>,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub fit: Option<FitSpec>,
    #[serde(default)]
    pub reconstruction: Option<ReconstructionSpec>,
    #[serde(default)]
    pub verification: Option<VerificationSpec>,
    #[serde(default)]
    pub calibration: Option<CalibrationSpec>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreparationSpec {
    pub calibration: RabiCalibration,
    pub state: StateSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpec {
    Named(NamedState),
    Sequence(PulseSequence),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutConfig {
    /// Blue-sideband Rabi frequency of readout ion `j` on mode `j`.
    pub rabi_frequencies: Vec<f64>,
    /// Explicit durations; overrides `span`/`points`.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    /// Defaults to `2π / min Ω`.
    #[serde(default)]
    pub span: Option<f64>,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_points() -> usize {
    100
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    #[serde(default)]
    pub shots: Option<u64>,
    #[serde(default)]
    pub decoherence_tau: Option<f64>,
    #[serde(default)]
    pub readout_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubsetSpec {
    Named(String),
    Explicit(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub k_max: usize,
    #[serde(default)]
    pub constraint: Constraint,
    #[serde(default)]
    pub rows: RowSelection,
    #[serde(default)]
    pub subset: Option<SubsetSpec>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_resamples: usize,
}

fn default_bootstrap() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionSpec {
    pub n_max: usize,
    pub magnitudes: Vec<f64>,
    /// Per-mode displacement phase offsets (radians).
    #[serde(default)]
    pub phase_offsets: Vec<f64>,
    /// Realize the displacements with the two-tone Hamiltonian.
    #[serde(default)]
    pub two_tone: bool,
    /// Defaults to the ideal version of a named preparation.
    #[serde(default)]
    pub target: Option<NamedState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationSpec {
    #[serde(default)]
    pub pairs: Option<Vec<(usize, usize)>>,
    #[serde(default = "default_phase_points")]
    pub phase_points: usize,
    #[serde(default)]
    pub shots: Option<u64>,
    /// Scan the fully dephased state instead of the prepared one.
    #[serde(default)]
    pub dephase: bool,
}

fn default_phase_points() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Hardware phase offset injected into the simulation (radians).
    pub injected_offset: f64,
    #[serde(default = "default_calibration_points")]
    pub phase_points: usize,
    #[serde(default = "default_push")]
    pub push: f64,
    #[serde(default)]
    pub shots: Option<u64>,
    #[serde(default)]
    pub thermal: Option<ThermalSpec>,
}

fn default_calibration_points() -> usize {
    36
}

fn default_push() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalSpec {
    pub nbar: f64,
    #[serde(default = "default_thermal_points")]
    pub points: usize,
    #[serde(default = "default_thermal_span")]
    pub span: f64,
    #[serde(default = "default_thermal_cutoff")]
    pub cutoff: usize,
}

fn default_thermal_points() -> usize {
    400
}

fn default_thermal_span() -> f64 {
    20.0
}

fn default_thermal_cutoff() -> usize {
    30
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema != SCHEMA {
            return Err(CliError::Config(format!(
                "unsupported schema '{}', expected '{SCHEMA}'",
                self.schema
            )));
        }
        self.preparation.calibration.validate()?;
        if self.hilbert.num_spins() == 0 {
            return Err(CliError::Config("preparation needs at least one spin".into()));
        }
        let d = self.hilbert.num_modes();
        if let Some(r) = &self.readout {
            if r.rabi_frequencies.len() != d {
                return Err(CliError::Config(format!(
                    "readout lists {} Rabi frequencies for {d} modes",
                    r.rabi_frequencies.len()
                )));
            }
        }
        if let (Some(fit), Some(rec)) = (&self.fit, &self.reconstruction) {
            if fit.k_max < rec.n_max {
                return Err(CliError::Config(format!(
                    "fit.k_max = {} must be at least reconstruction.n_max = {}",
                    fit.k_max, rec.n_max
                )));
            }
        }
        if let Some(rec) = &self.reconstruction {
            self.grid_from(rec)?;
        }
        Ok(())
    }

    pub fn readout(&self) -> Result<ReadoutSpec, CliError> {
        let r = self
            .readout
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no readout section".into()))?;
        let calibration = RabiCalibration::readout(&r.rabi_frequencies);
        calibration.validate()?;
        let times = match &r.times {
            Some(t) => t.clone(),
            None => {
                let min = r.rabi_frequencies.iter().cloned().fold(f64::INFINITY, f64::min);
                let span = r.span.unwrap_or(2.0 * std::f64::consts::PI / min);
                uniform_times(span, r.points)
            }
        };
        Ok(ReadoutSpec { calibration, times })
    }

    pub fn sample_options(&self, seed: u64) -> SampleOptions {
        SampleOptions {
            shots: self.sampling.shots,
            seed,
            decoherence_tau: self.sampling.decoherence_tau,
            readout_error: self.sampling.readout_error,
        }
    }

    pub fn fit_spec(&self) -> Result<&FitSpec, CliError> {
        self.fit
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no fit section".into()))
    }

    pub fn fit_options(&self, seed: u64) -> Result<FitOptions, CliError> {
        let f = self.fit_spec()?;
        Ok(FitOptions {
            rows: f.rows,
            constraint: f.constraint,
            bootstrap_resamples: f.bootstrap_resamples,
            bootstrap_seed: seed,
            ..FitOptions::default()
        })
    }

    pub fn fit_subset(&self) -> Result<Option<Vec<Vec<usize>>>, CliError> {
        match &self.fit_spec()?.subset {
            None => Ok(None),
            Some(SubsetSpec::Explicit(list)) => Ok(Some(list.clone())),
            Some(SubsetSpec::Named(name)) if name == "w_manifold" => Ok(Some(w_manifold_subset(self.hilbert.num_modes()))),
            Some(SubsetSpec::Named(name)) => Err(CliError::Config(format!("unknown basis subset '{name}'"))),
        }
    }

    fn grid_from(&self, rec: &ReconstructionSpec) -> Result<DisplacementGrid, CliError> {
        if rec.magnitudes.len() != self.hilbert.num_modes() {
            return Err(CliError::Config(format!(
                "reconstruction lists {} magnitudes for {} modes",
                rec.magnitudes.len(),
                self.hilbert.num_modes()
            )));
        }
        let grid = DisplacementGrid::new(rec.magnitudes.clone(), rec.n_max)?;
        if rec.phase_offsets.is_empty() {
            Ok(grid)
        } else {
            Ok(grid.with_phase_offsets(rec.phase_offsets.clone())?)
        }
    }

    pub fn grid(&self) -> Result<(DisplacementGrid, &ReconstructionSpec), CliError> {
        let rec = self
            .reconstruction
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no reconstruction section".into()))?;
        Ok((self.grid_from(rec)?, rec))
    }

    /// Prepared state with its spins back in `↓`.
    pub fn prepared_state(&self) -> Result<PureState, CliError> {
        let calib = &self.preparation.calibration;
        let psi = match &self.preparation.state {
            StateSpec::Named(name) => prepare_named_state(name, &self.hilbert, calib)?,
            StateSpec::Sequence(seq) => run_sequence(seq, &self.hilbert, calib)?,
        };
        Ok(psi.motional_part()?)
    }

    pub fn prepared_density(&self) -> Result<DensityMatrix, CliError> {
        Ok(self.prepared_state()?.to_density())
    }

    pub fn target(&self) -> Result<Option<PureState>, CliError> {
        let named = match (&self.reconstruction, &self.preparation.state) {
            (Some(ReconstructionSpec { target: Some(t), .. }), _) => t,
            (_, StateSpec::Named(n)) => n,
            _ => return Ok(None),
        };
        Ok(Some(named.ideal_state(&self.hilbert.motional())?))
    }
}
