//! Joint-spin time scans: analytic expectation curves, full unitary readout
//! simulation and finite-shot sampling.
//!
//! Ion `j` reads mode `j` through a blue sideband with frequency `Ω_j`
//! (`calibration.sideband[j][j]`). Joint spin configurations are indexed by
//! their bits with spin 0 most significant, so for two ions the order is
//! `↓↓, ↓↑, ↑↓, ↑↑` and the serialized labels are `dd, du, ud, uu`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dynamics::{sideband_generator, RabiCalibration};
use crate::error::{Error, Result};
use crate::fitting::FockDistribution;
use crate::fockspace::{DensityMatrix, PureState, Spin};
use crate::linalg::{apply_local, HermitianPropagator, C64};

/// Tolerance on the per-time population sum of noiseless scans.
pub const ANALYTIC_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanMetadata {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub decoherence_tau: Option<f64>,
    #[serde(default)]
    pub readout_error: f64,
}

/// Joint-spin populations versus readout pulse duration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeScanData {
    pub num_modes: usize,
    /// Pulse durations in seconds.
    pub times: Vec<f64>,
    /// `populations[config][time]`.
    #[serde(with = "config_map")]
    pub populations: Vec<Vec<f64>>,
    /// Shots per time point; `None` for noiseless curves.
    pub shots: Option<u64>,
    pub calibration: RabiCalibration,
    #[serde(default)]
    pub metadata: ScanMetadata,
}

pub fn spin_config(index: usize, d: usize) -> Vec<Spin> {
    (0..d).map(|j| Spin::from_bit((index >> (d - 1 - j)) & 1)).collect()
}

pub fn spin_config_label(index: usize, d: usize) -> String {
    spin_config(index, d).into_iter().map(Spin::symbol).collect()
}

fn label_index(label: &str) -> Option<usize> {
    label.chars().try_fold(0usize, |acc, ch| match ch {
        'd' => Some(acc * 2),
        'u' => Some(acc * 2 + 1),
        _ => None,
    })
}

mod config_map {
    use super::*;

    pub fn serialize<S: Serializer>(pops: &[Vec<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
        let d = pops.len().trailing_zeros() as usize;
        let map: BTreeMap<String, &Vec<f64>> = pops
            .iter()
            .enumerate()
            .map(|(i, v)| (spin_config_label(i, d), v))
            .collect();
        map.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Vec<f64>>, D::Error> {
        use serde::de::Error as _;
        let map = BTreeMap::<String, Vec<f64>>::deserialize(d)?;
        let modes = map.keys().next().map_or(0, |k| k.len());
        if modes == 0 || map.len() != 1 << modes || map.keys().any(|k| k.len() != modes) {
            return Err(D::Error::custom("populations must list every joint spin configuration"));
        }
        let mut out = vec![Vec::new(); map.len()];
        for (k, v) in map {
            let i = label_index(&k).ok_or_else(|| D::Error::custom(format!("bad spin label '{k}'")))?;
            out[i] = v;
        }
        Ok(out)
    }
}

impl TimeScanData {
    pub fn num_configs(&self) -> usize {
        1 << self.num_modes
    }

    /// Readout frequencies `Ω_j` for every mode.
    pub fn rabi_frequencies(&self) -> Result<Vec<f64>> {
        self.calibration.readout_frequencies(self.num_modes)
    }

    pub fn population(&self, config: usize, time: usize) -> f64 {
        self.populations[config][time]
    }

    /// Structural and normalization checks.
    pub fn validate(&self) -> Result<()> {
        if self.num_modes == 0 {
            return Err(Error::InvalidConfig("scan needs at least one mode".into()));
        }
        if self.times.is_empty() {
            return Err(Error::InsufficientData("scan has no time points".into()));
        }
        if self.times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidConfig("scan times must be finite and non-negative".into()));
        }
        if self.populations.len() != self.num_configs() {
            return Err(Error::DimensionMismatch {
                expected: self.num_configs(),
                found: self.populations.len(),
            });
        }
        for row in &self.populations {
            if row.len() != self.times.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.times.len(),
                    found: row.len(),
                });
            }
            if row.iter().any(|p| !p.is_finite() || *p < -1e-12 || *p > 1.0 + 1e-12) {
                return Err(Error::NonPhysical("population outside [0, 1]".into()));
            }
        }
        if self.shots == Some(0) {
            return Err(Error::InvalidConfig("shots must be at least 1".into()));
        }
        let tol = match self.shots {
            None => ANALYTIC_SUM_TOLERANCE,
            Some(n) => 3.0 / (n as f64).sqrt(),
        };
        for t in 0..self.times.len() {
            let sum: f64 = self.populations.iter().map(|row| row[t]).sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::NonPhysical(format!("populations at time index {t} sum to {sum}")));
            }
        }
        self.rabi_frequencies()?;
        Ok(())
    }

    /// One row per time: `time,<label>...`.
    pub fn to_csv(&self) -> String {
        let d = self.num_modes;
        let mut out = String::from("time");
        for i in 0..self.num_configs() {
            out.push(',');
            out.push_str(&format!("P_{}", spin_config_label(i, d)));
        }
        out.push('\n');
        for (t, time) in self.times.iter().enumerate() {
            out.push_str(&format!("{time:e}"));
            for row in &self.populations {
                out.push_str(&format!(",{:.12e}", row[t]));
            }
            out.push('\n');
        }
        out
    }
}

/// `cos²(√(k+1)Ωt)` for `↓`, `sin²` for `↑`.
pub fn basis_factor(spin: Spin, k: usize, omega: f64, t: f64) -> f64 {
    let c = ((k as f64 + 1.0).sqrt() * omega * t).cos();
    match spin {
        Spin::Down => c * c,
        Spin::Up => 1.0 - c * c,
    }
}

/// `Π_j f_{s_j}(k_j, Ω_j t)` for joint configuration `config`.
pub fn config_basis(config: usize, k: &[usize], omegas: &[f64], t: f64) -> f64 {
    let d = k.len();
    (0..d)
        .map(|j| basis_factor(Spin::from_bit((config >> (d - 1 - j)) & 1), k[j], omegas[j], t))
        .product()
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InsufficientData("time grid is empty".into()));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidConfig("scan times must be finite and non-negative".into()));
    }
    Ok(())
}

/// Expected populations for a Fock distribution (the cosine-product model).
pub fn analytic_scan(p: &FockDistribution, calib: &RabiCalibration, times: &[f64]) -> Result<TimeScanData> {
    check_times(times)?;
    let d = p.num_modes;
    let omegas = calib.readout_frequencies(d)?;
    let total: f64 = p.values.iter().sum();
    if p.values.iter().any(|v| *v < -1e-9) || total > 1.0 + 1e-9 {
        return Err(Error::NonPhysical(format!(
            "Fock distribution must be non-negative with total ≤ 1 (total {total})"
        )));
    }
    let populations = (0..1usize << d)
        .map(|s| {
            times
                .iter()
                .map(|&t| {
                    p.indices
                        .iter()
                        .zip(&p.values)
                        .map(|(k, v)| v * config_basis(s, k, &omegas, t))
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(TimeScanData {
        num_modes: d,
        times: times.to_vec(),
        populations,
        shots: None,
        calibration: calib.clone(),
        metadata: ScanMetadata {
            label: p.source.clone(),
            ..ScanMetadata::default()
        },
    })
}

/// Exact joint-spin probabilities `[time][config]` from simulating the
/// d-mode blue-sideband Hamiltonian on a motional pure state.
fn simulate_pure(motional: &PureState, omegas: &[f64], times: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = omegas.len();
    let mut psi = motional.with_spins_down(d)?;
    if psi.config().guard_levels() == 0 {
        // one extra level is enough: |↓,c⟩ only couples to |↑,c+1⟩
        let cfg = psi.config().clone().with_guard_levels(1)?;
        psi = PureState::new(cfg, psi.amplitudes().clone())?;
    }
    let (work, v0) = psi.embed_all_guards()?;
    let dims = work.factor_dims();
    let props: Vec<HermitianPropagator> = (0..d)
        .map(|j| HermitianPropagator::new(&sideband_generator(work.cutoff(j) + 1, 0.0, true)))
        .collect();
    let m = work.motional_dim();
    Ok(times
        .par_iter()
        .map(|&t| {
            let mut v: DVector<C64> = v0.clone();
            for j in 0..d {
                apply_local(&mut v, &dims, &[j, d + j], &props[j].at(omegas[j] * t));
            }
            (0..1usize << d)
                .map(|s| (0..m).map(|k| v[s * m + k].norm_sqr()).sum())
                .collect()
        })
        .collect())
}

fn transpose(rows: Vec<Vec<f64>>, configs: usize) -> Vec<Vec<f64>> {
    (0..configs).map(|s| rows.iter().map(|r| r[s]).collect()).collect()
}

/// Full unitary readout simulation of a motional pure state (spins, if any,
/// must all be down and are replaced by the `d` readout ions).
pub fn exact_scan_pure(state: &PureState, calib: &RabiCalibration, times: &[f64]) -> Result<TimeScanData> {
    check_times(times)?;
    let motional = if state.config().num_spins() == 0 {
        state.clone()
    } else {
        state.motional_part()?
    };
    let d = motional.config().num_modes();
    let omegas = calib.readout_frequencies(d)?;
    let rows = simulate_pure(&motional, &omegas, times)?;
    Ok(TimeScanData {
        num_modes: d,
        times: times.to_vec(),
        populations: transpose(rows, 1 << d),
        shots: None,
        calibration: calib.clone(),
        metadata: ScanMetadata::default(),
    })
}

/// Full unitary readout simulation of a motional density matrix, through its
/// eigen-ensemble.
pub fn exact_scan(rho: &DensityMatrix, calib: &RabiCalibration, times: &[f64]) -> Result<TimeScanData> {
    check_times(times)?;
    if rho.config().num_spins() != 0 {
        return Err(Error::InvalidConfig("readout simulation takes a motional density matrix".into()));
    }
    let d = rho.config().num_modes();
    let omegas = calib.readout_frequencies(d)?;
    let mut acc = vec![vec![0.0; 1 << d]; times.len()];
    for (w, psi) in rho.eigen_ensemble()? {
        let rows = simulate_pure(&psi, &omegas, times)?;
        for (a, r) in acc.iter_mut().zip(rows) {
            for (x, y) in a.iter_mut().zip(r) {
                *x += w * y;
            }
        }
    }
    Ok(TimeScanData {
        num_modes: d,
        times: times.to_vec(),
        populations: transpose(acc, 1 << d),
        shots: None,
        calibration: calib.clone(),
        metadata: ScanMetadata::default(),
    })
}

/// Phenomenological motional decoherence: every population relaxes towards
/// `2^{−d}` as `(p − 2^{−d}) e^{−t/τ} + 2^{−d}`. `τ = ∞` is the identity.
pub fn apply_decoherence(scan: &TimeScanData, tau: f64) -> Result<TimeScanData> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("decoherence time must be positive, got {tau}")));
    }
    let mut out = scan.clone();
    if tau.is_infinite() {
        return Ok(out);
    }
    let mean = 1.0 / scan.num_configs() as f64;
    for row in &mut out.populations {
        for (p, t) in row.iter_mut().zip(&scan.times) {
            *p = (*p - mean) * (-t / tau).exp() + mean;
        }
    }
    out.metadata.decoherence_tau = Some(tau);
    Ok(out)
}

/// Independent symmetric misassignment of every ion with probability `eps`.
pub fn apply_readout_error(scan: &TimeScanData, eps: f64) -> Result<TimeScanData> {
    if !(0.0..=0.5).contains(&eps) {
        return Err(Error::InvalidConfig(format!("readout error must lie in [0, 0.5], got {eps}")));
    }
    let mut out = scan.clone();
    if eps == 0.0 {
        return Ok(out);
    }
    let n = scan.num_configs();
    let d = scan.num_modes;
    for t in 0..scan.times.len() {
        for s in 0..n {
            out.populations[s][t] = (0..n)
                .map(|s2| {
                    let flips = (s ^ s2).count_ones() as i32;
                    scan.populations[s2][t] * eps.powi(flips) * (1.0 - eps).powi(d as i32 - flips)
                })
                .sum();
        }
    }
    out.metadata.readout_error = eps;
    Ok(out)
}

fn multinomial(rng: &mut ChaCha8Rng, shots: u64, probs: &[f64]) -> Result<Vec<u64>> {
    let clipped: Vec<f64> = probs.iter().map(|p| p.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NonPhysical("all outcome probabilities vanish".into()));
    }
    let mut counts = vec![0; probs.len()];
    let mut remaining = shots;
    let mut mass = 1.0;
    for (i, p) in clipped.iter().map(|p| p / total).enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() {
            counts[i] = remaining;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(remaining, q)
            .map_err(|e| Error::Numerical(format!("binomial sampler: {e}")))?
            .sample(rng);
        counts[i] = draw;
        remaining -= draw;
        mass -= p;
    }
    Ok(counts)
}

/// Frequencies from a multinomial draw of `shots` outcomes per time point.
/// Time point `i` uses a ChaCha8 stream `i` of `seed`, so the result does
/// not depend on evaluation order.
pub fn sample_populations(scan: &TimeScanData, shots: u64, seed: u64) -> Result<TimeScanData> {
    if shots == 0 {
        return Err(Error::InvalidConfig("shots must be at least 1".into()));
    }
    let n = scan.num_configs();
    let rows: Vec<Vec<f64>> = (0..scan.times.len())
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let probs: Vec<f64> = (0..n).map(|s| scan.populations[s][t]).collect();
            let counts = multinomial(&mut rng, shots, &probs)?;
            Ok(counts.iter().map(|&c| c as f64 / shots as f64).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = scan.clone();
    out.populations = transpose(rows, n);
    out.shots = Some(shots);
    out.metadata.seed = Some(seed);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    /// `None` keeps the exact curves.
    pub shots: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub decoherence_tau: Option<f64>,
    #[serde(default)]
    pub readout_error: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            shots: None,
            seed: 0,
            decoherence_tau: None,
            readout_error: 0.0,
        }
    }
}

/// Applies the optional decoherence envelope and readout error to exact
/// curves, then samples shots.
pub fn corrupt_and_sample(exact: &TimeScanData, options: &SampleOptions) -> Result<TimeScanData> {
    let mut scan = exact.clone();
    if let Some(tau) = options.decoherence_tau {
        scan = apply_decoherence(&scan, tau)?;
    }
    scan = apply_readout_error(&scan, options.readout_error)?;
    match options.shots {
        Some(shots) => sample_populations(&scan, shots, options.seed),
        None => Ok(scan),
    }
}

/// Full readout simulation of `rho` followed by [`corrupt_and_sample`].
pub fn sample_scan(
    rho: &DensityMatrix,
    calib: &RabiCalibration,
    times: &[f64],
    options: &SampleOptions,
) -> Result<TimeScanData> {
    corrupt_and_sample(&exact_scan(rho, calib, times)?, options)
}

/// Uniform grid of `points` durations over `[0, span]`.
pub fn uniform_times(span: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![0.0; points];
    }
    (0..points).map(|i| span * i as f64 / (points - 1) as f64).collect()
}
