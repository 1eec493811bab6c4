use std::f64::consts::PI;

use mmtomo::fitting::{fit_fock_distribution, fit_fock_distribution_restricted, FitOptions, FockDistribution};
use mmtomo::fockspace::{displaced_populations, fock_tuples, DensityMatrix, FockTensor, HilbertConfig, PureState};
use mmtomo::linalg::{c, C64};
use mmtomo::measurement::{analytic_scan, uniform_times};
use mmtomo::dynamics::RabiCalibration;
use mmtomo::pipeline::exact_qdataset;
use mmtomo::reconstruction::{gamma_coefficient, reconstruct, DisplacementGrid};
use mmtomo::verification::calibrate_spin_phase;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn density(config: &HilbertConfig, re: &[f64], im: &[f64]) -> DensityMatrix {
    let n = config.dim();
    let g = DMatrix::from_fn(n, n, |i, j| c(re[i * n + j], im[i * n + j]));
    let m = &g * g.adjoint();
    let tr = m.trace();
    DensityMatrix::new(config.clone(), m / tr).unwrap()
}

fn distribution(d: usize, k_max: usize, weights: &[f64]) -> FockDistribution {
    let mut t = FockTensor::zeros(vec![k_max + 1; d]);
    let total: f64 = weights[..t.values.len()].iter().sum();
    for (v, w) in t.values.iter_mut().zip(weights) {
        *v = w / total;
    }
    FockDistribution::from_tensor(&t, "oracle")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn superpositions_are_normalized(amps in proptest::collection::vec(-1.0f64..1.0, 18)) {
        let cfg = HilbertConfig::new(2, 2, 0).unwrap();
        let terms: Vec<(C64, Vec<usize>)> = fock_tuples(&[3, 3])
            .into_iter()
            .enumerate()
            .map(|(i, k)| (c(amps[2 * i] + 1e-3, amps[2 * i + 1]), k))
            .collect();
        let psi = PureState::superposition(&cfg, &terms).unwrap();
        prop_assert!((psi.norm_sqr() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scan_populations_sum_to_one(weights in proptest::collection::vec(0.01f64..1.0, 9)) {
        let p = distribution(2, 2, &weights);
        let scan = analytic_scan(&p, &RabiCalibration::readout(&[1.0, 0.77]), &uniform_times(12.0, 25)).unwrap();
        for t in 0..scan.times.len() {
            let total: f64 = (0..4).map(|cfg| scan.population(cfg, t)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_fit_recovers_distribution(weights in proptest::collection::vec(0.0f64..1.0, 9)) {
        prop_assume!(weights.iter().sum::<f64>() > 0.1);
        let p = distribution(2, 2, &weights);
        let scan = analytic_scan(&p, &RabiCalibration::readout(&[1.0, 0.77]), &uniform_times(2.0 * PI / 0.77, 60)).unwrap();
        let fit = fit_fock_distribution(&scan, 2, &FitOptions::default()).unwrap();
        for k in &p.indices {
            prop_assert!((fit.get(k) - p.get(k)).abs() < 1e-7);
        }
    }

    #[test]
    fn restricted_fit_matches_full_fit(w in proptest::collection::vec(0.01f64..1.0, 4)) {
        // support on the single-excitation manifold plus vacuum
        let mut t = FockTensor::zeros(vec![2; 3]);
        let support = [vec![0, 0, 0], vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        let total: f64 = w.iter().sum();
        for (k, wi) in support.iter().zip(&w) {
            let i = t.flat_index(k).unwrap();
            t.values[i] = wi / total;
        }
        let p = FockDistribution::from_tensor(&t, "oracle");
        let scan = analytic_scan(&p, &RabiCalibration::readout(&[1.0, 0.77, 0.59]), &uniform_times(2.0 * PI / 0.59, 80)).unwrap();
        let full = fit_fock_distribution(&scan, 1, &FitOptions::default()).unwrap();
        let restricted = fit_fock_distribution_restricted(&scan, &support, &FitOptions::default()).unwrap();
        for k in &support {
            prop_assert!((full.get(k) - restricted.get(k)).abs() < 1e-7);
        }
    }

    #[test]
    fn reconstruction_round_trip(re in proptest::collection::vec(-1.0f64..1.0, 81), im in proptest::collection::vec(-1.0f64..1.0, 81), n_max in 1usize..3) {
        let cfg = HilbertConfig::new(2, n_max, 0).unwrap();
        let rho = density(&cfg, &re, &im);
        let grid = DisplacementGrid::new(vec![0.5, 0.45], n_max).unwrap();
        let r = reconstruct(&exact_qdataset(&rho, &grid, n_max + 1).unwrap(), None).unwrap();
        let err = (&r.rho_raw - rho.entries()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!(err < 1e-7, "{}", err);
    }

    #[test]
    fn reconstruction_is_linear(re in proptest::collection::vec(-1.0f64..1.0, 32), im in proptest::collection::vec(-1.0f64..1.0, 32), w in 0.0f64..1.0) {
        let cfg = HilbertConfig::new(2, 1, 0).unwrap();
        let a = density(&cfg, &re[..16], &im[..16]);
        let b = density(&cfg, &re[16..], &im[16..]);
        let mix = DensityMatrix::mixture(&[(w, a.clone()), (1.0 - w, b.clone())]).unwrap();
        let grid = DisplacementGrid::new(vec![0.52, 0.51], 1).unwrap();
        let raw = |rho: &DensityMatrix| reconstruct(&exact_qdataset(rho, &grid, 2).unwrap(), None).unwrap().rho_raw;
        let expect = raw(&a) * c(w, 0.0) + raw(&b) * c(1.0 - w, 0.0);
        let err = (raw(&mix) - expect).iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!(err < 1e-9);
    }

    #[test]
    fn gamma_diagonal_cross_check(weights in proptest::collection::vec(0.01f64..1.0, 4), alpha in 0.2f64..1.2) {
        let cfg = HilbertConfig::new(1, 3, 0).unwrap();
        let total: f64 = weights.iter().sum();
        let diag: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let m = DMatrix::from_diagonal(&DVector::from_iterator(4, diag.iter().map(|&p| c(p, 0.0))));
        let rho = DensityMatrix::new(cfg.clone(), m).unwrap().pad_cutoffs(&[40]).unwrap();
        let q = displaced_populations(&rho, &[c(alpha, 0.0)]).unwrap();
        for k in 0..8 {
            let direct: f64 = (0..4).map(|n| gamma_coefficient(k, n, 0, alpha).unwrap() * diag[n]).sum();
            prop_assert!((direct - q.get(&[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn noiseless_calibration_recovers_any_offset(offset_deg in 0.0f64..180.0) {
        let phi_b: Vec<f64> = (0..360).map(|i| (i as f64).to_radians()).collect();
        let r = calibrate_spin_phase(offset_deg.to_radians(), &phi_b, 1.0, 1.0, None, 0).unwrap();
        let err = (r.spin_phase - offset_deg.to_radians()).rem_euclid(PI);
        let err = err.min(PI - err);
        prop_assert!(err < 0.5f64.to_radians(), "{}", err.to_degrees());
    }
}
