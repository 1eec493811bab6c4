//! End-to-end tomography: prepared state, displacement grid, readout scans,
//! per-setting fits and reconstruction.
//!
//! A grid setting is realized with the spin-dependent push of the
//! preparation ion: `R_C(π/2, 0)` puts the spin in the `+1` eigenstate of the
//! calibrated push, the push displaces every mode by `−α_j`, and
//! `R_C(π/2, π)` returns the spin to `↓`. The motional state is then
//! `D(−α) ρ D(−α)†`, whose Fock populations are `Q_k(α)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{apply_sequence, PulseOp, RabiCalibration};
use crate::error::{Error, Result};
use crate::fitting::{fit_fock_distribution, FitOptions, FockDistribution};
use crate::fockspace::{displaced_populations, DensityMatrix, FockTensor, PureState};
use crate::linalg::{c, derive_seed, C64};
use crate::measurement::{corrupt_and_sample, exact_scan, SampleOptions, TimeScanData};
use crate::reconstruction::{reconstruct, DisplacementGrid, QDataset, ReconstructedState};

/// Extra Fock levels kept above `max(cutoff, k_max)` for displaced states.
pub const DISPLACEMENT_HEADROOM: usize = 5;

/// Exact `Q_k(α_p)` for every grid setting, truncated to `k ≤ k_max`.
pub fn exact_qdataset(rho: &DensityMatrix, grid: &DisplacementGrid, k_max: usize) -> Result<QDataset> {
    let d = grid.num_modes();
    if rho.config().num_modes() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: rho.config().num_modes(),
        });
    }
    let cutoffs: Vec<usize> = rho
        .config()
        .cutoffs()
        .iter()
        .map(|&c| c.max(k_max) + DISPLACEMENT_HEADROOM + 3)
        .collect();
    let padded = rho.pad_cutoffs(&cutoffs)?;
    let entries: Vec<(Vec<i32>, FockDistribution)> = grid
        .settings()
        .into_par_iter()
        .map(|s| {
            let full = displaced_populations(&padded, &grid.alphas(&s))?;
            let mut t = FockTensor::zeros(vec![k_max + 1; d]);
            for (i, k) in crate::fockspace::fock_tuples(&t.shape.clone()).iter().enumerate() {
                t.values[i] = full.get(k);
            }
            Ok((s, FockDistribution::from_tensor(&t, "exact")))
        })
        .collect::<Result<_>>()?;
    let mut q = QDataset::new(grid.clone(), k_max);
    for (s, dist) in entries {
        q.insert(s, dist);
    }
    Ok(q)
}

/// Pulses that displace every mode by `−α_j` through the push of `spin`.
pub fn displacement_pulses(alphas: &[C64], spin: usize, calib: &RabiCalibration, two_tone: bool) -> Vec<PulseOp> {
    let mut ops = vec![PulseOp::Carrier {
        spin,
        angle: std::f64::consts::FRAC_PI_2,
        phase: 0.0,
    }];
    for (mode, &alpha) in alphas.iter().enumerate() {
        ops.push(PulseOp::SpinDepDisplace {
            spin,
            mode,
            alpha: -alpha,
            spin_phase: calib.spin_phase_offset,
            two_tone,
        });
    }
    ops.push(PulseOp::Carrier {
        spin,
        angle: std::f64::consts::FRAC_PI_2,
        phase: std::f64::consts::PI,
    });
    ops
}

/// `D(−α) ρ D(−α)†` realized with pulses on a single preparation spin.
pub fn displaced_state(
    rho: &DensityMatrix,
    alphas: &[C64],
    calib: &RabiCalibration,
    headroom_cutoffs: &[usize],
    two_tone: bool,
) -> Result<DensityMatrix> {
    let padded = rho.pad_cutoffs(headroom_cutoffs)?;
    let cfg = padded.config().clone();
    let ops = displacement_pulses(alphas, 0, calib, two_tone);
    let dim = cfg.dim();
    let mut acc = nalgebra::DMatrix::<C64>::zeros(dim, dim);
    for (w, psi) in padded.eigen_ensemble()? {
        let out = apply_sequence(&psi.with_spins_down(1)?, &ops, calib)?;
        let motion = out.motional_part()?;
        let v = motion.amplitudes();
        acc += v * v.adjoint() * c(w, 0.0);
    }
    DensityMatrix::from_raw(cfg, acc)
}

/// Readout settings shared by every grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutSpec {
    pub calibration: RabiCalibration,
    pub times: Vec<f64>,
}

/// Exact readout scans of the displaced state for every grid setting.
pub fn exact_grid_scans(
    rho: &DensityMatrix,
    grid: &DisplacementGrid,
    k_max: usize,
    prep: &RabiCalibration,
    readout: &ReadoutSpec,
    two_tone: bool,
) -> Result<Vec<(Vec<i32>, TimeScanData)>> {
    let cutoffs: Vec<usize> = rho
        .config()
        .cutoffs()
        .iter()
        .map(|&c| c.max(k_max) + DISPLACEMENT_HEADROOM)
        .collect();
    grid.settings()
        .into_par_iter()
        .map(|s| {
            let displaced = displaced_state(rho, &grid.alphas(&s), prep, &cutoffs, two_tone)?;
            let mut scan = exact_scan(&displaced, &readout.calibration, &readout.times)?;
            scan.metadata.label = format!("setting {s:?}");
            Ok((s, scan))
        })
        .collect()
}

/// Samples every scan (setting `i` uses `derive_seed(options.seed, i)`) and
/// fits each one.
pub fn fit_grid_scans(
    scans: &[(Vec<i32>, TimeScanData)],
    grid: &DisplacementGrid,
    k_max: usize,
    sampling: &SampleOptions,
    fit: &FitOptions,
) -> Result<QDataset> {
    let fitted: Vec<(Vec<i32>, FockDistribution)> = scans
        .par_iter()
        .enumerate()
        .map(|(i, (s, exact))| {
            let opts = SampleOptions {
                seed: derive_seed(sampling.seed, i as u64),
                ..sampling.clone()
            };
            let data = corrupt_and_sample(exact, &opts)?;
            let fit_opts = FitOptions {
                bootstrap_seed: derive_seed(fit.bootstrap_seed, i as u64),
                ..fit.clone()
            };
            let mut dist = fit_fock_distribution(&data, k_max, &fit_opts)?;
            dist.source = format!("setting {s:?}");
            Ok((s.clone(), dist))
        })
        .collect::<Result<_>>()?;
    let mut q = QDataset::new(grid.clone(), k_max);
    for (s, d) in fitted {
        q.insert(s, d);
    }
    Ok(q)
}

/// One simulated tomography run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TomographyRun {
    pub dataset: QDataset,
    pub reconstruction: ReconstructedState,
}

/// Samples, fits and reconstructs from precomputed exact scans.
pub fn run_tomography(
    scans: &[(Vec<i32>, TimeScanData)],
    grid: &DisplacementGrid,
    k_max: usize,
    sampling: &SampleOptions,
    fit: &FitOptions,
    target: Option<&PureState>,
) -> Result<TomographyRun> {
    let dataset = fit_grid_scans(scans, grid, k_max, sampling, fit)?;
    let reconstruction = reconstruct(&dataset, target)?;
    Ok(TomographyRun {
        dataset,
        reconstruction,
    })
}
