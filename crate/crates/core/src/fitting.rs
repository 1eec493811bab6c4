//! Fock-state distributions from joint-spin time scans.
//!
//! The populations of every joint spin configuration are linear in the Fock
//! distribution `P_k` with the cosine-product basis of
//! [`config_basis`](crate::measurement::config_basis). All configurations
//! (minus the one fixed by normalization) enter one weighted least-squares
//! problem. With shot noise each time point contributes a multinomial block
//! covariance `(diag p − p pᵀ)/shots`; `p` is floored at `1/(4·shots)` and
//! the weights are refreshed from the model for a few reweighting passes.
//! Noiseless scans use ordinary least squares.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fockspace::{fock_tuples, FockTensor};
use crate::linalg::{condition_number, derive_seed};
use crate::measurement::{config_basis, TimeScanData};

/// Condition number above which the design is treated as singular.
pub const RANK_DEFICIENT_CONDITION: f64 = 1e12;
/// Condition number above which an overfitting warning is attached.
pub const OVERFIT_WARNING_CONDITION: f64 = 1e6;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub condition_number: f64,
    pub residual_rms: f64,
    /// Whitened residual sum of squares per degree of freedom (sampled data).
    pub chi2_per_dof: Option<f64>,
    pub rows: usize,
    pub parameters: usize,
    pub warnings: Vec<String>,
}

/// Fock distribution `P_k` over a list of occupation tuples, with covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FockDistribution {
    pub num_modes: usize,
    pub k_max: usize,
    pub indices: Vec<Vec<usize>>,
    pub values: Vec<f64>,
    #[serde(with = "crate::serde_util::real_matrix")]
    pub covariance: DMatrix<f64>,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub diagnostics: Option<FitDiagnostics>,
}

impl FockDistribution {
    /// Exact distribution (zero covariance) from a dense tensor.
    pub fn from_tensor(t: &FockTensor, source: &str) -> Self {
        let indices = fock_tuples(&t.shape);
        let n = indices.len();
        FockDistribution {
            num_modes: t.shape.len(),
            k_max: t.shape.iter().copied().max().unwrap_or(1).saturating_sub(1),
            indices,
            values: t.values.clone(),
            covariance: DMatrix::zeros(n, n),
            source: source.to_string(),
            diagnostics: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.indices.len();
        if self.values.len() != n || self.covariance.nrows() != n || self.covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.values.len(),
            });
        }
        if self.indices.iter().any(|k| k.len() != self.num_modes || k.iter().any(|&kj| kj > self.k_max)) {
            return Err(Error::InvalidConfig("Fock index outside the declared k_max".into()));
        }
        Ok(())
    }

    fn position(&self, k: &[usize]) -> Option<usize> {
        self.indices.iter().position(|i| i.as_slice() == k)
    }

    /// `P_k`, zero for indices outside the fitted set.
    pub fn get(&self, k: &[usize]) -> f64 {
        self.position(k).map_or(0.0, |i| self.values[i])
    }

    pub fn sigma(&self, k: &[usize]) -> f64 {
        self.position(k).map_or(0.0, |i| self.covariance[(i, i)].max(0.0).sqrt())
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn sigma_total(&self) -> f64 {
        self.covariance.sum().max(0.0).sqrt()
    }

    /// Dense tensor of shape `(k_max+1)^d`; entries outside the fitted set are zero.
    pub fn dense(&self, k_max: usize) -> FockTensor {
        let mut t = FockTensor::zeros(vec![k_max + 1; self.num_modes]);
        for (k, v) in self.indices.iter().zip(&self.values) {
            if let Some(i) = t.flat_index(k) {
                t.values[i] = *v;
            }
        }
        t
    }

    /// Covariance over the dense `(k_max+1)^d` flattening.
    pub fn dense_covariance(&self, k_max: usize) -> DMatrix<f64> {
        let probe = FockTensor::zeros(vec![k_max + 1; self.num_modes]);
        let n = probe.values.len();
        let map: Vec<Option<usize>> = self.indices.iter().map(|k| probe.flat_index(k)).collect();
        let mut cov = DMatrix::zeros(n, n);
        for (a, ia) in map.iter().enumerate() {
            for (b, ib) in map.iter().enumerate() {
                if let (Some(ia), Some(ib)) = (ia, ib) {
                    cov[(*ia, *ib)] = self.covariance[(a, b)];
                }
            }
        }
        cov
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSelection {
    /// Every joint configuration except the last, which normalization fixes.
    #[default]
    AllConfigs,
    /// Only the all-`↓` population.
    AllDownOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    #[default]
    None,
    NonNegative,
    /// `Σ P = 1`.
    Simplex,
    NonNegativeSimplex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub rows: RowSelection,
    pub constraint: Constraint,
    /// Reweighting passes after the first solve (shot-noise data only).
    pub irls_passes: usize,
    /// Bootstrap resamples for the covariance of non-negative fits.
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            rows: RowSelection::AllConfigs,
            constraint: Constraint::None,
            irls_passes: 2,
            bootstrap_resamples: 200,
            bootstrap_seed: 0,
        }
    }
}

/// Every tuple with total phonon number ≤ 2: the W-state components and all
/// states at most one phonon away from them.
pub fn w_manifold_subset(num_modes: usize) -> Vec<Vec<usize>> {
    fock_tuples(&vec![3; num_modes])
        .into_iter()
        .filter(|k| k.iter().sum::<usize>() <= 2)
        .collect()
}

struct Design {
    x: DMatrix<f64>,
    y: DVector<f64>,
    /// Included configurations per time block.
    configs: Vec<usize>,
    times: usize,
}

fn build_design(scan: &TimeScanData, indices: &[Vec<usize>], rows: RowSelection) -> Result<Design> {
    let omegas = scan.rabi_frequencies()?;
    let n_cfg = scan.num_configs();
    let configs: Vec<usize> = match rows {
        RowSelection::AllConfigs => (0..n_cfg - 1).collect(),
        RowSelection::AllDownOnly => vec![0],
    };
    let m = configs.len();
    let nt = scan.times.len();
    let mut x = DMatrix::zeros(nt * m, indices.len());
    let mut y = DVector::zeros(nt * m);
    for (i, &t) in scan.times.iter().enumerate() {
        for (r, &s) in configs.iter().enumerate() {
            y[i * m + r] = scan.populations[s][i];
            for (col, k) in indices.iter().enumerate() {
                x[(i * m + r, col)] = config_basis(s, k, &omegas, t);
            }
        }
    }
    Ok(Design {
        x,
        y,
        configs,
        times: nt,
    })
}

/// Whitening factors per time block, from outcome probabilities `q`
/// (included configurations followed by the remainder).
fn block_whiteners(probs: &[Vec<f64>], shots: u64) -> Result<Vec<DMatrix<f64>>> {
    let floor = 1.0 / (4.0 * shots as f64);
    probs
        .iter()
        .map(|q| {
            let floored: Vec<f64> = q.iter().map(|p| p.max(floor)).collect();
            let total: f64 = floored.iter().sum();
            let m = q.len() - 1;
            let p: Vec<f64> = floored[..m].iter().map(|v| v / total).collect();
            let cov = DMatrix::from_fn(m, m, |a, b| {
                let diag = if a == b { p[a] } else { 0.0 };
                (diag - p[a] * p[b]) / shots as f64
            });
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::Numerical("block covariance is not positive definite".into()))?;
            chol.l()
                .solve_lower_triangular(&DMatrix::identity(m, m))
                .ok_or_else(|| Error::Numerical("singular block covariance".into()))
        })
        .collect()
}

fn whiten(design: &Design, whiteners: &[DMatrix<f64>]) -> (DMatrix<f64>, DVector<f64>) {
    let m = design.configs.len();
    let p = design.x.ncols();
    let mut xw = DMatrix::zeros(design.x.nrows(), p);
    let mut yw = DVector::zeros(design.y.len());
    for (i, w) in whiteners.iter().enumerate() {
        let xb = w * design.x.rows(i * m, m);
        let yb = w * design.y.rows(i * m, m);
        xw.rows_mut(i * m, m).copy_from(&xb);
        yw.rows_mut(i * m, m).copy_from(&yb);
    }
    (xw, yw)
}

/// Outcome probabilities per time: included configurations, then the rest.
fn outcome_probs(design: &Design, fitted: &DVector<f64>) -> Vec<Vec<f64>> {
    let m = design.configs.len();
    (0..design.times)
        .map(|i| {
            let mut q: Vec<f64> = (0..m).map(|r| fitted[i * m + r].clamp(0.0, 1.0)).collect();
            let rest = (1.0 - q.iter().sum::<f64>()).max(0.0);
            q.push(rest);
            q
        })
        .collect()
}

/// Least squares via SVD; returns the solution and `(AᵀA)⁻¹`.
fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let p = a.ncols();
    let mut x = DVector::zeros(p);
    let mut cov = DMatrix::zeros(p, p);
    for k in 0..s.len() {
        if s[k] <= smax * 1e-14 {
            continue;
        }
        let v = vt.row(k).transpose();
        let coef = u.column(k).dot(b) / s[k];
        x += &v * coef;
        cov += &v * v.transpose() / (s[k] * s[k]);
    }
    Ok((x, cov))
}

/// Lawson-Hanson non-negative least squares.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.ncols();
    let tol = 10.0 * f64::EPSILON * a.norm() * a.nrows().max(n) as f64;
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let solve_passive = |passive: &[bool]| -> Result<DVector<f64>> {
        let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = a.select_columns(&cols);
        let (zs, _) = least_squares(&sub, b)?;
        let mut z = DVector::zeros(n);
        for (k, &j) in cols.iter().enumerate() {
            z[j] = zs[k];
        }
        Ok(z)
    };
    for _ in 0..3 * n + 10 {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else {
            return Ok(x);
        };
        passive[j] = true;
        loop {
            let z = solve_passive(&passive)?;
            if (0..n).filter(|&k| passive[k]).all(|k| z[k] > 0.0) {
                x = z;
                break;
            }
            let alpha = (0..n)
                .filter(|&k| passive[k] && z[k] <= 0.0)
                .map(|k| x[k] / (x[k] - z[k]))
                .fold(f64::INFINITY, f64::min);
            x += (&z - &x) * alpha;
            for k in 0..n {
                if passive[k] && x[k] <= tol {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    Err(Error::NonConvergence("non-negative least squares exceeded its iteration budget".into()))
}

/// Applies `Σ β = 1` to an unconstrained solution with covariance `cov`.
fn project_simplex(beta: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let ones = DVector::from_element(beta.len(), 1.0);
    let c1 = cov * &ones;
    let denom = ones.dot(&c1);
    if denom <= 0.0 {
        let shift = (beta.sum() - 1.0) / beta.len() as f64;
        return (beta.map(|v| v - shift), cov.clone());
    }
    let gap = beta.sum() - 1.0;
    let b = beta - &c1 * (gap / denom);
    let cv = cov - &c1 * c1.transpose() / denom;
    (b, cv)
}

/// One constrained solve of the whitened system.
fn solve(xw: &DMatrix<f64>, yw: &DVector<f64>, constraint: Constraint) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (beta, cov) = least_squares(xw, yw)?;
    match constraint {
        Constraint::None => Ok((beta, cov)),
        Constraint::Simplex => Ok(project_simplex(&beta, &cov)),
        Constraint::NonNegative => Ok((nnls(xw, yw)?, cov)),
        Constraint::NonNegativeSimplex => {
            // equality enforced by a heavily weighted extra row
            let p = xw.ncols();
            let scale = 1e4 * xw.norm() / (p as f64).sqrt();
            let mut a = xw.clone().insert_row(xw.nrows(), scale);
            a.row_mut(xw.nrows()).fill(scale);
            let b = yw.clone().insert_row(yw.len(), scale);
            Ok((nnls(&a, &b)?, cov))
        }
    }
}

fn check_indices(scan: &TimeScanData, indices: &[Vec<usize>]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("empty basis subset".into()));
    }
    for (i, k) in indices.iter().enumerate() {
        if k.len() != scan.num_modes {
            return Err(Error::DimensionMismatch {
                expected: scan.num_modes,
                found: k.len(),
            });
        }
        if indices[..i].contains(k) {
            return Err(Error::InvalidConfig(format!("duplicate Fock index {k:?}")));
        }
    }
    Ok(())
}

/// Fit over all `(k_max+1)^d` Fock states.
pub fn fit_fock_distribution(scan: &TimeScanData, k_max: usize, options: &FitOptions) -> Result<FockDistribution> {
    let indices = fock_tuples(&vec![k_max + 1; scan.num_modes]);
    fit_fock_distribution_restricted(scan, &indices, options)
}

/// Fit over the listed Fock states only; every other `P_k` is taken as zero.
pub fn fit_fock_distribution_restricted(
    scan: &TimeScanData,
    indices: &[Vec<usize>],
    options: &FitOptions,
) -> Result<FockDistribution> {
    scan.validate()?;
    check_indices(scan, indices)?;
    let design = build_design(scan, indices, options.rows)?;
    let (n, p) = design.x.shape();
    if n < p {
        return Err(Error::InsufficientData(format!(
            "{n} data rows cannot determine {p} Fock populations; add time points"
        )));
    }
    let condition = condition_number(&design.x);
    if !(condition <= RANK_DEFICIENT_CONDITION) {
        return Err(Error::RankDeficient {
            condition,
            hint: "basis curves are degenerate; choose distinct readout Rabi frequencies per mode or fewer Fock states".into(),
        });
    }
    let (beta, cov, chi2) = match scan.shots {
        None => {
            let (beta, unscaled) = solve(&design.x, &design.y, options.constraint)?;
            let rss = (&design.y - &design.x * &beta).norm_squared();
            let s2 = if n > p { rss / (n - p) as f64 } else { 0.0 };
            (beta, unscaled * s2, None)
        }
        Some(shots) => {
            let mut probs = outcome_probs(&design, &design.y);
            let mut result = None;
            for _ in 0..=options.irls_passes {
                let w = block_whiteners(&probs, shots)?;
                let (xw, yw) = whiten(&design, &w);
                let (beta, cov) = solve(&xw, &yw, options.constraint)?;
                let chi2 = (&yw - &xw * &beta).norm_squared();
                probs = outcome_probs(&design, &(&design.x * &beta));
                result = Some((beta, cov, chi2));
            }
            let (beta, mut cov, chi2) = result.expect("at least one pass");
            if matches!(options.constraint, Constraint::NonNegative | Constraint::NonNegativeSimplex) {
                cov = bootstrap_covariance(scan, indices, options, shots)?;
            }
            (beta, cov, Some(if n > p { chi2 / (n - p) as f64 } else { 0.0 }))
        }
    };
    let residual_rms = ((&design.y - &design.x * &beta).norm_squared() / n as f64).sqrt();
    let mut warnings = Vec::new();
    if condition > OVERFIT_WARNING_CONDITION {
        warnings.push(format!(
            "design condition number {condition:.3e} exceeds {OVERFIT_WARNING_CONDITION:.0e}; risk of overfitting, lower k_max or extend the time grid"
        ));
    }
    match chi2 {
        None if residual_rms > 1e-6 => warnings.push(format!(
            "residual rms {residual_rms:.3e} on noiseless data; populated Fock states are missing from the basis"
        )),
        Some(c) if c > 2.0 => warnings.push(format!(
            "chi2 per degree of freedom {c:.2} exceeds 2; the model does not describe the data"
        )),
        _ => {}
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FockDistribution {
        num_modes: scan.num_modes,
        k_max: indices.iter().flatten().copied().max().unwrap_or(0),
        indices: indices.to_vec(),
        values: beta.iter().copied().collect(),
        covariance: cov,
        source: scan.metadata.label.clone(),
        diagnostics: Some(FitDiagnostics {
            condition_number: condition,
            residual_rms,
            chi2_per_dof: chi2,
            rows: n,
            parameters: p,
            warnings,
        }),
    })
}

fn bootstrap_covariance(scan: &TimeScanData, indices: &[Vec<usize>], options: &FitOptions, shots: u64) -> Result<DMatrix<f64>> {
    let reps = options.bootstrap_resamples;
    if reps < 2 {
        return Err(Error::InvalidConfig("bootstrap needs at least two resamples".into()));
    }
    let inner = FitOptions {
        bootstrap_resamples: 0,
        ..options.clone()
    };
    let estimates: Vec<DVector<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let resampled = crate::measurement::sample_populations(scan, shots, derive_seed(options.bootstrap_seed, r as u64))?;
            let design = build_design(&resampled, indices, inner.rows)?;
            let probs = outcome_probs(&design, &design.y);
            let w = block_whiteners(&probs, shots)?;
            let (xw, yw) = whiten(&design, &w);
            Ok(solve(&xw, &yw, inner.constraint)?.0)
        })
        .collect::<Result<_>>()?;
    let p = indices.len();
    let mean = estimates.iter().fold(DVector::zeros(p), |acc, e| acc + e) / reps as f64;
    let mut cov = DMatrix::zeros(p, p);
    for e in &estimates {
        let d = e - &mean;
        cov += &d * d.transpose();
    }
    Ok(cov / (reps - 1) as f64)
}

/// One-parameter calibration fit result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarFit {
    pub value: f64,
    pub sigma: f64,
    pub chi2: f64,
    pub points: usize,
}

/// Thermal distribution `n̄^n/(1+n̄)^{n+1}`, cut where `p_n < 1e-6` and renormalized.
pub fn thermal_weights(nbar: f64) -> Vec<f64> {
    let ratio = nbar / (1.0 + nbar);
    let mut out = Vec::new();
    let mut p = 1.0 / (1.0 + nbar);
    while p >= 1e-6 && out.len() < 2000 {
        out.push(p);
        p *= ratio;
    }
    if out.is_empty() {
        out.push(1.0);
    }
    normalize(out)
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Poisson weights `e^{−|α|²}|α|^{2n}/n!`, cut past the mean where `p_n < 1e-6` and renormalized.
pub fn poisson_weights(alpha: f64) -> Vec<f64> {
    let x = alpha * alpha;
    let mut out = Vec::new();
    let mut p = (-x).exp();
    let mut n = 0usize;
    loop {
        out.push(p);
        n += 1;
        p *= x / n as f64;
        if (n as f64 > x && p < 1e-6) || n > 2000 {
            break;
        }
    }
    normalize(out)
}

fn single_mode_down(scan: &TimeScanData) -> Result<(Vec<f64>, f64)> {
    scan.validate()?;
    if scan.num_modes != 1 {
        return Err(Error::InvalidConfig(format!(
            "calibration fits take a single-mode scan, got {} modes",
            scan.num_modes
        )));
    }
    Ok((scan.populations[0].clone(), scan.rabi_frequencies()?[0]))
}

fn model_down(weights: &[f64], omega: f64, t: f64) -> f64 {
    weights
        .iter()
        .enumerate()
        .map(|(n, w)| w * ((n as f64 + 1.0).sqrt() * omega * t).cos().powi(2))
        .sum()
}

fn fit_scalar(scan: &TimeScanData, weights: impl Fn(f64) -> Vec<f64> + Sync, lo: f64, hi: f64) -> Result<ScalarFit> {
    let (y, omega) = single_mode_down(scan)?;
    let times = &scan.times;
    let model = |x: f64| -> Vec<f64> {
        let w = weights(x);
        times.iter().map(|&t| model_down(&w, omega, t)).collect()
    };
    let variances = |m: &[f64]| -> Vec<f64> {
        match scan.shots {
            None => vec![1.0; m.len()],
            Some(shots) => {
                let f = 1.0 / (4.0 * shots as f64);
                m.iter()
                    .map(|&q| (q * (1.0 - q)).max(f * (1.0 - f)) / shots as f64)
                    .collect()
            }
        }
    };
    let chi2 = |x: f64, var: &[f64]| -> f64 {
        model(x)
            .iter()
            .zip(&y)
            .zip(var)
            .map(|((m, o), v)| (m - o).powi(2) / v)
            .sum()
    };
    let mut var = variances(&y);
    let mut best = lo;
    let passes = if scan.shots.is_some() { 3 } else { 1 };
    for _ in 0..passes {
        let grid: Vec<f64> = (0..=400).map(|i| lo + (hi - lo) * i as f64 / 400.0).collect();
        let values: Vec<f64> = grid.par_iter().map(|&x| chi2(x, &var)).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonConvergence("non-finite objective".into()));
        }
        let i = (0..values.len()).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
        let (mut a, mut b) = (grid[i.saturating_sub(1)], grid[(i + 1).min(grid.len() - 1)]);
        // golden-section refinement
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (chi2(c, &var), chi2(d, &var));
        for _ in 0..200 {
            if (b - a).abs() < 1e-12 * (1.0 + best.abs()) {
                break;
            }
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = chi2(c, &var);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = chi2(d, &var);
            }
        }
        best = if chi2(lo, &var) <= fc.min(fd) { lo } else { (a + b) / 2.0 };
        if scan.shots.is_some() {
            var = variances(&model(best));
        }
    }
    if hi - best < 1e-9 * (hi - lo) {
        return Err(Error::NonConvergence(format!("estimate reached the search bound {hi}")));
    }
    let min = chi2(best, &var);
    let sigma = if scan.shots.is_none() {
        0.0
    } else {
        let crossing = |mut inside: f64, mut outside: f64| -> f64 {
            if chi2(outside, &var) < min + 1.0 {
                return outside;
            }
            for _ in 0..100 {
                let mid = 0.5 * (inside + outside);
                if chi2(mid, &var) < min + 1.0 {
                    inside = mid;
                } else {
                    outside = mid;
                }
            }
            0.5 * (inside + outside)
        };
        let right = crossing(best, hi) - best;
        let left = best - crossing(best, lo);
        if best - lo < 1e-12 || left >= best - lo {
            right
        } else {
            0.5 * (left + right)
        }
    };
    Ok(ScalarFit {
        value: best,
        sigma,
        chi2: min,
        points: y.len(),
    })
}

/// Mean phonon number of a thermal state from a single-mode BSB scan.
pub fn fit_thermal_nbar(scan: &TimeScanData) -> Result<ScalarFit> {
    fit_scalar(scan, thermal_weights, 0.0, 5.0)
}

/// Coherent amplitude `|α|` from a single-mode BSB scan.
pub fn fit_coherent_alpha(scan: &TimeScanData) -> Result<ScalarFit> {
    fit_scalar(scan, poisson_weights, 0.0, 4.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::RabiCalibration;
    use crate::measurement::{analytic_scan, sample_populations, uniform_times};
    use std::f64::consts::PI;

    fn dist(shape: Vec<usize>, entries: &[(Vec<usize>, f64)]) -> FockDistribution {
        let mut t = FockTensor::zeros(shape);
        for (k, v) in entries {
            let i = t.flat_index(k).unwrap();
            t.values[i] = *v;
        }
        FockDistribution::from_tensor(&t, "test")
    }

    fn readout2() -> RabiCalibration {
        RabiCalibration::readout(&[1.0, 0.77])
    }

    #[test]
    fn noiseless_bell_round_trip() {
        let truth = dist(vec![2, 2], &[(vec![0, 0], 0.5), (vec![1, 1], 0.5)]);
        let scan = analytic_scan(&truth, &readout2(), &uniform_times(2.0 * PI / 0.77, 60)).unwrap();
        let fit = fit_fock_distribution(&scan, 3, &FitOptions::default()).unwrap();
        for (k, v) in fit.indices.iter().zip(&fit.values) {
            assert!((v - truth.get(k)).abs() < 1e-8, "{k:?}: {v}");
        }
        assert!(fit.diagnostics.unwrap().warnings.is_empty());
    }

    #[test]
    fn all_down_only_rows() {
        let truth = dist(vec![2, 2], &[(vec![0, 0], 0.5), (vec![1, 1], 0.5)]);
        let scan = analytic_scan(&truth, &readout2(), &uniform_times(2.0 * PI / 0.77, 60)).unwrap();
        let opts = FitOptions {
            rows: RowSelection::AllDownOnly,
            ..FitOptions::default()
        };
        let fit = fit_fock_distribution(&scan, 2, &opts).unwrap();
        assert!((fit.get(&[1, 1]) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn identical_frequencies_are_rank_deficient() {
        let truth = dist(vec![2, 2], &[(vec![0, 0], 1.0)]);
        let cal = RabiCalibration::readout(&[1.0, 1.0]);
        let scan = analytic_scan(&truth, &cal, &uniform_times(7.0, 60)).unwrap();
        let opts = FitOptions {
            rows: RowSelection::AllDownOnly,
            ..FitOptions::default()
        };
        assert!(matches!(
            fit_fock_distribution(&scan, 2, &opts),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn too_few_points() {
        let truth = dist(vec![2, 2], &[(vec![0, 0], 1.0)]);
        let scan = analytic_scan(&truth, &readout2(), &uniform_times(7.0, 3)).unwrap();
        assert!(matches!(
            fit_fock_distribution(&scan, 3, &FitOptions::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn restricted_fit_flags_missing_state() {
        let truth = dist(vec![3, 3], &[(vec![0, 0], 0.5), (vec![2, 0], 0.5)]);
        let scan = analytic_scan(&truth, &readout2(), &uniform_times(2.0 * PI / 0.77, 60)).unwrap();
        let subset = vec![vec![0, 0], vec![1, 0], vec![0, 1]];
        let fit = fit_fock_distribution_restricted(&scan, &subset, &FitOptions::default()).unwrap();
        let diag = fit.diagnostics.unwrap();
        assert!(diag.residual_rms > 1e-3);
        assert!(!diag.warnings.is_empty());
    }

    #[test]
    fn constrained_fits_on_noisy_data() {
        let truth = dist(vec![2, 2], &[(vec![0, 0], 0.7), (vec![1, 0], 0.2), (vec![0, 1], 0.1)]);
        let scan = analytic_scan(&truth, &readout2(), &uniform_times(2.0 * PI / 0.77, 50)).unwrap();
        let noisy = sample_populations(&scan, 200, 5).unwrap();
        for constraint in [Constraint::Simplex, Constraint::NonNegative, Constraint::NonNegativeSimplex] {
            let opts = FitOptions {
                constraint,
                bootstrap_resamples: 40,
                ..FitOptions::default()
            };
            let fit = fit_fock_distribution(&noisy, 2, &opts).unwrap();
            if matches!(constraint, Constraint::Simplex | Constraint::NonNegativeSimplex) {
                assert!((fit.total() - 1.0).abs() < 1e-6, "{constraint:?}: {}", fit.total());
            }
            if matches!(constraint, Constraint::NonNegative | Constraint::NonNegativeSimplex) {
                assert!(fit.values.iter().all(|&v| v >= 0.0));
            }
            for k in [[0, 0], [1, 0], [0, 1]] {
                assert!((fit.get(&k) - truth.get(&k)).abs() < 4.0 * fit.sigma(&k) + 1e-3, "{constraint:?} {k:?}");
            }
        }
    }

    #[test]
    fn nnls_matches_known_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        let x = nnls(&a, &b).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && x[1] == 0.0);
    }

    #[test]
    fn thermal_and_coherent_noiseless() {
        let cal = RabiCalibration::readout(&[1.0]);
        let times = uniform_times(20.0, 80);
        let make = |w: Vec<f64>| {
            let t = FockTensor {
                shape: vec![w.len()],
                values: w,
            };
            analytic_scan(&FockDistribution::from_tensor(&t, "cal"), &cal, &times).unwrap()
        };
        let th = fit_thermal_nbar(&make(thermal_weights(0.3))).unwrap();
        assert!((th.value - 0.3).abs() < 1e-6);
        let zero = fit_thermal_nbar(&make(thermal_weights(0.0))).unwrap();
        assert!(zero.value <= 1e-3);
        let co = fit_coherent_alpha(&make(poisson_weights(0.52))).unwrap();
        assert!((co.value - 0.52).abs() < 1e-6);
    }

    #[test]
    fn condition_number_grows_with_k_max() {
        let truth = dist(vec![2, 2], &[(vec![0, 0], 1.0)]);
        let scan = analytic_scan(&truth, &readout2(), &uniform_times(2.0 * PI / 0.77, 60)).unwrap();
        let mut last = 0.0;
        for k in 0..4 {
            let design = build_design(&scan, &fock_tuples(&[k + 1, k + 1]), RowSelection::AllConfigs).unwrap();
            let c = condition_number(&design.x);
            assert!(c >= last * (1.0 - 1e-9));
            last = c;
        }
    }
}
