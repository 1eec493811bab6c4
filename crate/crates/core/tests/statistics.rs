//! Seeded statistical checks of the noise model and of reported uncertainties.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use mmtomo::dynamics::RabiCalibration;
use mmtomo::fitting::{fit_fock_distribution, FitOptions};
use mmtomo::fockspace::{HilbertConfig, PureState};
use mmtomo::linalg::{c, C64};
use mmtomo::measurement::{exact_scan, sample_populations, uniform_times, SampleOptions};
use mmtomo::pipeline::{exact_grid_scans, run_tomography, ReadoutSpec};
use mmtomo::reconstruction::DisplacementGrid;
use mmtomo::verification::{parity_phase_scan, phase_grid, single_phonon_coherence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bell() -> PureState {
    let cfg = HilbertConfig::new(2, 1, 0).unwrap();
    PureState::superposition(&cfg, &[(c(FRAC_1_SQRT_2, 0.0), vec![0, 0]), (c(0.0, FRAC_1_SQRT_2), vec![1, 1])]).unwrap()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn sampling_noise_scales_as_inverse_sqrt_shots() {
    let rho = bell().to_density();
    let exact = exact_scan(&rho, &RabiCalibration::readout(&[1.0, 0.77]), &uniform_times(8.0, 200)).unwrap();
    for shots in [100u64, 10_000] {
        let mut z2 = Vec::new();
        for seed in 0..5 {
            let s = sample_populations(&exact, shots, seed).unwrap();
            for cfg in 0..4 {
                for t in 0..exact.times.len() {
                    let p = exact.population(cfg, t);
                    if p > 0.05 && p < 0.95 {
                        let var = p * (1.0 - p) / shots as f64;
                        z2.push((s.population(cfg, t) - p).powi(2) / var);
                    }
                }
            }
        }
        let (m, _) = mean_sd(&z2);
        assert!((m - 1.0).abs() < 0.1, "shots {shots}: mean z² {m}");
    }
}

#[test]
fn fit_covariance_matches_scatter() {
    let rho = bell().to_density();
    let exact = exact_scan(&rho, &RabiCalibration::readout(&[1.0, 0.77]), &uniform_times(2.0 * PI / 0.77, 60)).unwrap();
    let mut values = vec![Vec::new(); 4];
    let mut sigmas = vec![Vec::new(); 4];
    let keys = [[0, 0], [0, 1], [1, 0], [1, 1]];
    for seed in 0..200 {
        let scan = sample_populations(&exact, 100, seed).unwrap();
        let fit = fit_fock_distribution(&scan, 1, &FitOptions::default()).unwrap();
        for (i, k) in keys.iter().enumerate() {
            values[i].push(fit.get(k));
            sigmas[i].push(fit.sigma(k));
        }
    }
    for i in 0..4 {
        let (_, sd) = mean_sd(&values[i]);
        let (sigma, _) = mean_sd(&sigmas[i]);
        assert!((sigma / sd - 1.0).abs() < 0.25, "{:?}: reported {sigma} empirical {sd}", keys[i]);
    }
}

#[test]
fn reconstruction_variances_match_scatter() {
    let psi = bell();
    let grid = DisplacementGrid::new(vec![0.52, 0.51], 1).unwrap();
    let readout = ReadoutSpec {
        calibration: RabiCalibration::readout(&[1.0, 0.77]),
        times: uniform_times(2.0 * PI / 0.77, 100),
    };
    let prep = RabiCalibration::uniform(1, 2, 1.0);
    let scans = exact_grid_scans(&psi.to_density(), &grid, 3, &prep, &readout, false).unwrap();
    let elements = [(0, 3, true), (0, 3, false), (0, 0, true), (3, 3, true), (1, 2, true)];
    let mut values = vec![Vec::new(); elements.len()];
    let mut reported = vec![Vec::new(); elements.len()];
    for seed in 0..200 {
        let sampling = SampleOptions {
            shots: Some(100),
            seed,
            ..SampleOptions::default()
        };
        let run = run_tomography(&scans, &grid, 3, &sampling, &FitOptions::default(), None).unwrap();
        let r = run.reconstruction;
        for (e, &(i, j, real)) in elements.iter().enumerate() {
            let z = r.rho_raw[(i, j)];
            if real {
                values[e].push(z.re);
                reported[e].push(r.var_re[(i, j)].sqrt());
            } else {
                values[e].push(z.im);
                reported[e].push(r.var_im[(i, j)].sqrt());
            }
        }
    }
    for (e, el) in elements.iter().enumerate() {
        let (_, sd) = mean_sd(&values[e]);
        let (sigma, _) = mean_sd(&reported[e]);
        assert!((sigma / sd - 1.0).abs() < 0.25, "{el:?}: reported {sigma} empirical {sd}");
    }
}

#[test]
fn parity_amplitude_tracks_coherence_on_random_w_manifold_states() {
    let cfg = HilbertConfig::new(3, 1, 0).unwrap();
    let calib = RabiCalibration::uniform(1, 3, 1.0);
    let phases = phase_grid(8);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for n in 0..20u64 {
        let amps: Vec<C64> = (0..3)
            .map(|_| C64::from_polar(rng.random_range(0.2..1.0), rng.random_range(0.0..2.0 * PI)))
            .collect();
        let terms = vec![(amps[0], vec![1, 0, 0]), (amps[1], vec![0, 1, 0]), (amps[2], vec![0, 0, 1])];
        let rho = PureState::superposition(&cfg, &terms).unwrap().to_density();
        let direct = single_phonon_coherence(&rho, 0, 1).unwrap().norm();
        let r = parity_phase_scan(&rho, (0, 1), &phases, &phases, &calib, 0, Some(400), n).unwrap();
        let z = (r.amplitude - direct) / r.amplitude_sigma;
        assert!(z.abs() < 3.0, "state {n}: amplitude {} ± {} vs {direct}", r.amplitude, r.amplitude_sigma);
    }
}
