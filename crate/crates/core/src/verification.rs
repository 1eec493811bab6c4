//! Protocol-level checks: two-mode phase scans on the single-phonon manifold
//! and the spin-phase calibration of the spin-dependent push.
//!
//! # Phase scan
//!
//! After a carrier π pulse the spin is `↑`. `BSB_i(π, −φ1)` returns the
//! `Fock(i)` component to `|↓, 0⟩`, then `BSB_j(π/2, φ2)` interferes it with
//! the `Fock(j)` component. For a state on the single-phonon manifold
//!
//! ```text
//! P(↓) = (P_i + P_j)/2 + |ρ_ij| cos(φ1 + φ2 + arg ρ_ij)
//! ```
//!
//! and the fitted harmonic amplitude estimates `|ρ_ij|`. The constant term
//! is half the sum of the two populations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{apply_sequence, PulseOp, RabiCalibration};
use crate::error::{Error, Result};
use crate::fockspace::{DensityMatrix, HilbertConfig, PureState, Spin};
use crate::linalg::{derive_seed, C64};

/// Population outside the single-phonon manifold that triggers a warning.
pub const MANIFOLD_WARNING: f64 = 0.01;
/// Population outside the single-phonon manifold that is rejected.
pub const MANIFOLD_LIMIT: f64 = 0.1;
/// Minimum fitted contrast of a calibration scan.
pub const CALIBRATION_MIN_CONTRAST: f64 = 0.05;

/// `n` evenly spaced phases on `[0, 2π)`.
pub fn phase_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| 2.0 * std::f64::consts::PI * i as f64 / n as f64).collect()
}

fn binomial_sample(p: f64, shots: u64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Binomial::new(shots, p.clamp(0.0, 1.0)).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(dist.sample(&mut rng) as f64 / shots as f64)
}

/// Weighted least squares on `[1, cos x, sin x]`; returns coefficients,
/// their covariance and the rms residual.
fn fit_harmonic(x: &[f64], y: &[f64], shots: Option<u64>) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let n = x.len();
    if n < 4 {
        return Err(Error::InsufficientData("a harmonic fit needs at least four points".into()));
    }
    let design = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => x[i].cos(),
        _ => x[i].sin(),
    });
    let solve = |w: &[f64]| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        let a = DMatrix::from_fn(n, 3, |i, j| design[(i, j)] * sw[i]);
        let b = DVector::from_fn(n, |i, _| y[i] * sw[i]);
        let normal = a.transpose() * &a;
        let inv = normal
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient {
                condition: f64::INFINITY,
                hint: "phase grid does not resolve the cos(φ1+φ2) harmonic".into(),
            })?;
        Ok((&inv * a.transpose() * b, inv))
    };
    let (mut beta, mut cov) = solve(&vec![1.0; n])?;
    match shots {
        Some(shots) => {
            let floor = 1.0 / (4.0 * shots as f64);
            for _ in 0..2 {
                let model = &design * &beta;
                let w: Vec<f64> = model
                    .iter()
                    .map(|m| {
                        let p = m.clamp(floor, 1.0 - floor);
                        shots as f64 / (p * (1.0 - p))
                    })
                    .collect();
                (beta, cov) = solve(&w)?;
            }
        }
        None => {
            let rss = (DVector::from_column_slice(y) - &design * &beta).norm_squared();
            cov *= rss / (n - 3) as f64;
        }
    }
    let rms = ((DVector::from_column_slice(y) - &design * &beta).norm_squared() / n as f64).sqrt();
    Ok((beta, cov, rms))
}

fn amplitude_with_sigma(beta: &DVector<f64>, cov: &DMatrix<f64>) -> (f64, f64) {
    let (a, b) = (beta[1], beta[2]);
    let amp = a.hypot(b);
    let sigma = if amp > 1e-12 {
        let g = [a / amp, b / amp];
        (g[0] * g[0] * cov[(1, 1)] + 2.0 * g[0] * g[1] * cov[(1, 2)] + g[1] * g[1] * cov[(2, 2)])
            .max(0.0)
            .sqrt()
    } else {
        (0.5 * (cov[(1, 1)] + cov[(2, 2)])).max(0.0).sqrt()
    };
    (amp, sigma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseScanResult {
    pub pair: (usize, usize),
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    /// `P(↓)` indexed `[φ1][φ2]`.
    pub p_down: Vec<Vec<f64>>,
    pub shots: Option<u64>,
    pub offset: f64,
    pub amplitude: f64,
    pub amplitude_sigma: f64,
    /// `arg ρ_ij` as fitted.
    pub phase: f64,
    pub residual_rms: f64,
    /// `|ρ_ij|` evaluated directly on the input state.
    pub direct_coherence: f64,
    pub off_manifold_population: f64,
    pub warnings: Vec<String>,
}

impl PhaseScanResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phi1,phi2,p_down\n");
        for (a, row) in self.phi1.iter().zip(&self.p_down) {
            for (b, p) in self.phi2.iter().zip(row) {
                out.push_str(&format!("{a},{b},{p}\n"));
            }
        }
        out
    }
}

fn single_phonon(d: usize, mode: usize) -> Vec<usize> {
    let mut k = vec![0; d];
    k[mode] = 1;
    k
}

/// Simulated two-mode phase scan on a motional state (spin starts `↓`).
/// `shots = None` returns exact probabilities.
#[allow(clippy::too_many_arguments)]
pub fn parity_phase_scan(
    rho: &DensityMatrix,
    pair: (usize, usize),
    phi1: &[f64],
    phi2: &[f64],
    calib: &RabiCalibration,
    spin: usize,
    shots: Option<u64>,
    seed: u64,
) -> Result<PhaseScanResult> {
    let cfg = rho.config();
    if cfg.num_spins() != 0 {
        return Err(Error::InvalidConfig("phase scan takes a motional density matrix".into()));
    }
    let d = cfg.num_modes();
    let (i, j) = pair;
    if i == j || i >= d || j >= d {
        return Err(Error::InvalidConfig(format!("invalid mode pair ({i}, {j}) for {d} modes")));
    }
    if shots == Some(0) {
        return Err(Error::InvalidConfig("shots must be positive".into()));
    }
    let pops = rho.fock_populations();
    let manifold: f64 = (0..d).map(|m| pops.get(&single_phonon(d, m))).sum();
    let off = (1.0 - manifold).max(0.0);
    let mut warnings = Vec::new();
    if off > MANIFOLD_LIMIT {
        return Err(Error::AssumptionViolated(format!(
            "population {off:.3} lies outside the single-phonon manifold"
        )));
    }
    if off > MANIFOLD_WARNING {
        warnings.push(format!("population {off:.3} lies outside the single-phonon manifold"));
    }
    let direct = rho.element(&single_phonon(d, i), &single_phonon(d, j))?.norm();

    // one extra level so sidebands acting on stray populations stay in range
    let padded = rho.pad_cutoffs(&cfg.cutoffs().iter().map(|c| c + 1).collect::<Vec<_>>())?;
    let spin_cfg = padded.config().with_spins(spin + 1)?;
    let ensemble: Vec<(f64, PureState)> = padded
        .eigen_ensemble()?
        .into_iter()
        .map(|(w, s)| Ok((w, s.with_spins_down(spin + 1)?)))
        .collect::<Result<_>>()?;
    debug_assert!(ensemble.iter().all(|(_, s)| s.config() == &spin_cfg));
    let points: Vec<(usize, usize)> = (0..phi1.len()).flat_map(|a| (0..phi2.len()).map(move |b| (a, b))).collect();
    let exact: Vec<f64> = points
        .par_iter()
        .map(|&(a, b)| {
            let ops = [
                PulseOp::Carrier {
                    spin,
                    angle: std::f64::consts::PI,
                    phase: 0.0,
                },
                PulseOp::Bsb {
                    spin,
                    mode: i,
                    angle: std::f64::consts::PI,
                    phase: -phi1[a],
                },
                PulseOp::Bsb {
                    spin,
                    mode: j,
                    angle: std::f64::consts::FRAC_PI_2,
                    phase: phi2[b],
                },
            ];
            let mut p = 0.0;
            for (w, s) in &ensemble {
                let out = apply_sequence(s, &ops, calib)?;
                p += w * out.spin_probability(spin, Spin::Down);
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let observed: Vec<f64> = match shots {
        None => exact,
        Some(n) => exact
            .iter()
            .enumerate()
            .map(|(idx, p)| binomial_sample(*p, n, derive_seed(seed, idx as u64)))
            .collect::<Result<_>>()?,
    };
    let x: Vec<f64> = points.iter().map(|&(a, b)| phi1[a] + phi2[b]).collect();
    let (beta, cov, rms) = fit_harmonic(&x, &observed, shots)?;
    let (amplitude, amplitude_sigma) = amplitude_with_sigma(&beta, &cov);
    let p_down = (0..phi1.len())
        .map(|a| observed[a * phi2.len()..(a + 1) * phi2.len()].to_vec())
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(PhaseScanResult {
        pair,
        phi1: phi1.to_vec(),
        phi2: phi2.to_vec(),
        p_down,
        shots,
        offset: beta[0],
        amplitude,
        amplitude_sigma,
        phase: (-beta[2]).atan2(beta[1]),
        residual_rms: rms,
        direct_coherence: direct,
        off_manifold_population: off,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub injected_offset: f64,
    pub phi_b: Vec<f64>,
    pub p_up: Vec<f64>,
    pub shots: Option<u64>,
    /// Blue-tone phase at which the spin returns to `↓`, in `[0, 2π)`.
    pub phi_b_min: f64,
    /// `φ_s = (φ_b + φ_r)/2` with `φ_r = 0`.
    pub spin_phase: f64,
    pub phi_b_min_sigma: f64,
    /// Fitted cosine amplitude of `P(↑)` versus `φ_b`.
    pub contrast: f64,
}

impl CalibrationResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phi_b,p_up\n");
        for (a, p) in self.phi_b.iter().zip(&self.p_up) {
            out.push_str(&format!("{a},{p}\n"));
        }
        out
    }
}

/// Simulates `R_C(π/2, 0)`, a two-tone push with `φ_r = 0` and scanned `φ_b`,
/// then `R_C(−π/2, 0)`, with a hardware phase offset between single- and
/// two-tone outputs. `P(↑) ∝ 1 − cos(φ_b − 2·offset)`, so the fitted minimum
/// gives `φ_s = φ_b/2`.
pub fn calibrate_spin_phase(
    injected_offset: f64,
    phi_b: &[f64],
    push: f64,
    omega: f64,
    shots: Option<u64>,
    seed: u64,
) -> Result<CalibrationResult> {
    if !(push.is_finite() && push >= 0.0) {
        return Err(Error::InvalidConfig(format!("push amplitude {push} must be non-negative")));
    }
    if shots == Some(0) {
        return Err(Error::InvalidConfig("shots must be positive".into()));
    }
    let cutoff = ((push + 1.0).powi(2) * 2.0 + 8.0).ceil() as usize;
    let cfg = HilbertConfig::new(1, cutoff, 1)?;
    let calib = RabiCalibration::new(vec![vec![omega]], vec![omega])?.with_spin_phase_offset(injected_offset);
    let ground = PureState::ground(&cfg);
    let exact: Vec<f64> = phi_b
        .par_iter()
        .map(|&pb| {
            let ops = [
                PulseOp::Carrier {
                    spin: 0,
                    angle: std::f64::consts::FRAC_PI_2,
                    phase: 0.0,
                },
                PulseOp::SimultaneousSidebands {
                    spin: 0,
                    mode: 0,
                    omega_t: push,
                    blue_phase: pb,
                    red_phase: 0.0,
                },
                PulseOp::Carrier {
                    spin: 0,
                    angle: std::f64::consts::FRAC_PI_2,
                    phase: std::f64::consts::PI,
                },
            ];
            Ok(apply_sequence(&ground, &ops, &calib)?.spin_probability(0, Spin::Up))
        })
        .collect::<Result<_>>()?;
    let p_up: Vec<f64> = match shots {
        None => exact,
        Some(n) => exact
            .iter()
            .enumerate()
            .map(|(idx, p)| binomial_sample(*p, n, derive_seed(seed, idx as u64)))
            .collect::<Result<_>>()?,
    };
    let (beta, cov, _) = fit_harmonic(phi_b, &p_up, shots)?;
    let (contrast, _) = amplitude_with_sigma(&beta, &cov);
    if contrast < CALIBRATION_MIN_CONTRAST {
        return Err(Error::NoClearMinimum { contrast });
    }
    let tau = 2.0 * std::f64::consts::PI;
    let phi_b_min = (-beta[2]).atan2(-beta[1]).rem_euclid(tau);
    // phase of (−a1, −b1) has gradient (b1, −a1)/contrast²
    let (a1, b1) = (beta[1], beta[2]);
    let r2 = contrast * contrast;
    let var = (b1 * b1 * cov[(1, 1)] - 2.0 * a1 * b1 * cov[(1, 2)] + a1 * a1 * cov[(2, 2)]) / (r2 * r2);
    Ok(CalibrationResult {
        injected_offset,
        phi_b: phi_b.to_vec(),
        p_up,
        shots,
        phi_b_min,
        spin_phase: phi_b_min / 2.0,
        phi_b_min_sigma: var.max(0.0).sqrt(),
        contrast,
    })
}

/// `|⟨Fock(i)|ρ|Fock(j)⟩|` for the single-phonon states of modes `i`, `j`.
pub fn single_phonon_coherence(rho: &DensityMatrix, i: usize, j: usize) -> Result<C64> {
    let d = rho.config().num_modes();
    rho.element(&single_phonon(d, i), &single_phonon(d, j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NamedState;

    fn w_rho(phases: (f64, f64, f64)) -> DensityMatrix {
        let cfg = HilbertConfig::new(3, 1, 0).unwrap();
        NamedState::WState {
            phi1: phases.0,
            phi2: phases.1,
            phi3: phases.2,
        }
        .ideal_state(&cfg)
        .unwrap()
        .to_density()
    }

    #[test]
    fn exact_scan_matches_model() {
        let rho = w_rho((0.3, 1.1, -0.4));
        let calib = RabiCalibration::uniform(1, 3, 1.0);
        let grid = phase_grid(8);
        let r = parity_phase_scan(&rho, (0, 2), &grid, &grid, &calib, 0, None, 0).unwrap();
        let c02 = single_phonon_coherence(&rho, 0, 2).unwrap();
        for (a, row) in r.p_down.iter().enumerate() {
            for (b, p) in row.iter().enumerate() {
                let model = 1.0 / 3.0 + c02.norm() * (grid[a] + grid[b] + c02.arg()).cos();
                assert!((p - model).abs() < 1e-9, "{p} vs {model}");
            }
        }
        assert!((r.amplitude - 1.0 / 3.0).abs() < 1e-9);
        assert!(r.residual_rms < 1e-9);
    }

    #[test]
    fn dephased_and_product_states_have_no_harmonic() {
        let calib = RabiCalibration::uniform(1, 3, 1.0);
        let grid = phase_grid(8);
        let dephased = w_rho((0.0, 0.0, 0.0)).dephased();
        let r = parity_phase_scan(&dephased, (0, 1), &grid, &grid, &calib, 0, None, 0).unwrap();
        assert!(r.amplitude < 1e-9);
        let cfg = HilbertConfig::new(3, 1, 0).unwrap();
        let product = PureState::superposition(&cfg, &[(C64::new(1.0, 0.0), vec![1, 0, 0])])
            .unwrap()
            .to_density();
        let r = parity_phase_scan(&product, (0, 1), &grid, &grid, &calib, 0, None, 0).unwrap();
        assert!(r.amplitude < 1e-9);
        assert!((r.offset - 0.5).abs() < 1e-9);
    }

    #[test]
    fn off_manifold_state_rejected() {
        let cfg = HilbertConfig::new(2, 1, 0).unwrap();
        let vac = PureState::ground(&cfg).to_density();
        let grid = phase_grid(4);
        let calib = RabiCalibration::uniform(1, 2, 1.0);
        assert!(matches!(
            parity_phase_scan(&vac, (0, 1), &grid, &grid, &calib, 0, None, 0),
            Err(Error::AssumptionViolated(_))
        ));
    }

    #[test]
    fn sampled_scan_is_deterministic() {
        let rho = w_rho((0.0, 0.0, 0.0));
        let calib = RabiCalibration::uniform(1, 3, 1.0);
        let grid = phase_grid(8);
        let a = parity_phase_scan(&rho, (1, 2), &grid, &grid, &calib, 0, Some(400), 9).unwrap();
        let b = parity_phase_scan(&rho, (1, 2), &grid, &grid, &calib, 0, Some(400), 9).unwrap();
        assert_eq!(a, b);
        assert!((a.amplitude - 1.0 / 3.0).abs() < 3.0 * a.amplitude_sigma);
    }

    #[test]
    fn calibration_recovers_offsets() {
        let grid = phase_grid(36);
        for deg in [0.0f64, 30.0, 55.0] {
            let r = calibrate_spin_phase(deg.to_radians(), &grid, 1.0, 1.0, None, 0).unwrap();
            let found = r.phi_b_min.to_degrees();
            let expect = 2.0 * deg;
            let diff = (found - expect + 180.0).rem_euclid(360.0) - 180.0;
            assert!(diff.abs() < 1e-6, "{deg}: {found}");
        }
    }

    #[test]
    fn calibration_curve_matches_closed_form() {
        let grid = phase_grid(12);
        let offset = 0.4;
        let r = calibrate_spin_phase(offset, &grid, 1.0, 1.0, None, 0).unwrap();
        for (pb, p) in grid.iter().zip(&r.p_up) {
            let chi = pb / 2.0 - offset;
            let model = chi.sin().powi(2) * (1.0 - (-2.0f64).exp()) / 2.0;
            assert!((p - model).abs() < 1e-6, "{pb}: {p} vs {model}");
        }
    }

    #[test]
    fn weak_push_has_no_minimum() {
        let grid = phase_grid(12);
        assert!(matches!(
            calibrate_spin_phase(0.3, &grid, 0.05, 1.0, None, 0),
            Err(Error::NoClearMinimum { .. })
        ));
    }
}
