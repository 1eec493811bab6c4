//! Density-matrix reconstruction from displaced Fock distributions.
//!
//! Each mode is displaced around a circle, `α_{j,p} = |α_j| e^{i(πp/N + φ_j)}`
//! with `N = n_max + 1`, `p ∈ {−N, …, N−1}` and a per-mode phase offset `φ_j`.
//! Under a rotation of the displacement phase by `θ` the populations
//! `Q_k(α)` pick up `e^{iθ(m'−m)}` per element `ρ_{m,m'}`, so the component
//! of the DFT
//!
//! ```text
//! Q^{(l)}_k = (2N)^{-d} Σ_p Q_k(α_p) e^{−i Σ_j l_j p_j π/N}
//! ```
//!
//! isolates the elements `ρ_{n, n+l}` (row `n`, column `n+l`):
//!
//! ```text
//! Q^{(l)}_k = e^{i Σ_j l_j φ_j} Σ_n Π_j γ(k_j, n_j, l_j, |α_j|) ρ_{n, n+l}
//! ```
//!
//! with `γ(k, n, l, a) = ⟨n|D(a)|k⟩⟨n+l|D(a)|k⟩` for real `a`. For each `l`
//! the real matrix `Γ[k][n]` is inverted by least squares. Every element is
//! found twice (from `l` and `−l`); the two estimates are conjugates of one
//! another and [`hermitize`] merges them.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::FockDistribution;
use crate::fockspace::{fidelity, fock_tuples, trace_distance, DensityMatrix, HilbertConfig, PureState};
use crate::linalg::{c, hermitian_eigen, max_hermitian_defect, pseudo_inverse, C64};

/// Relative singular-value cutoff for the `Γ` pseudo-inverse.
pub const GAMMA_RCOND: f64 = 1e-10;
/// `Γ` condition number above which a warning is attached.
pub const GAMMA_WARNING_CONDITION: f64 = 1e6;

/// Displacement settings on a circle per mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementGrid {
    pub n_max: usize,
    pub magnitudes: Vec<f64>,
    /// Constant phase added to every setting of a mode (radians).
    #[serde(default)]
    pub phase_offsets: Vec<f64>,
}

impl DisplacementGrid {
    pub fn new(magnitudes: Vec<f64>, n_max: usize) -> Result<Self> {
        let grid = DisplacementGrid {
            n_max,
            phase_offsets: vec![0.0; magnitudes.len()],
            magnitudes,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn with_phase_offsets(mut self, offsets: Vec<f64>) -> Result<Self> {
        self.phase_offsets = offsets;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitudes.is_empty() {
            return Err(Error::InvalidConfig("displacement grid needs at least one mode".into()));
        }
        if let Some(a) = self.magnitudes.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "grid magnitude {a} must be positive; γ is degenerate at |α| = 0"
            )));
        }
        let offsets_ok = self.phase_offsets.is_empty() || self.phase_offsets.len() == self.magnitudes.len();
        if !offsets_ok || self.phase_offsets.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("phase_offsets must give one finite phase per mode".into()));
        }
        Ok(())
    }

    pub fn num_modes(&self) -> usize {
        self.magnitudes.len()
    }

    /// Settings per mode, `2N`.
    pub fn points_per_mode(&self) -> usize {
        2 * (self.n_max + 1)
    }

    fn offset(&self, mode: usize) -> f64 {
        self.phase_offsets.get(mode).copied().unwrap_or(0.0)
    }

    /// All `(2N)^d` index tuples, mode 0 slowest, each `p ∈ {−N, …, N−1}`.
    pub fn settings(&self) -> Vec<Vec<i32>> {
        let n = (self.n_max + 1) as i32;
        fock_tuples(&vec![self.points_per_mode(); self.num_modes()])
            .into_iter()
            .map(|t| t.into_iter().map(|v| v as i32 - n).collect())
            .collect()
    }

    pub fn alphas(&self, setting: &[i32]) -> Vec<C64> {
        let n = (self.n_max + 1) as f64;
        setting
            .iter()
            .enumerate()
            .map(|(j, &p)| C64::from_polar(self.magnitudes[j], std::f64::consts::PI * p as f64 / n + self.offset(j)))
            .collect()
    }
}

/// Fitted displaced distributions for every grid setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QDataset {
    pub grid: DisplacementGrid,
    pub k_max: usize,
    #[serde(with = "entry_list")]
    pub entries: BTreeMap<Vec<i32>, FockDistribution>,
}

mod entry_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        setting: Vec<i32>,
        distribution: FockDistribution,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<Vec<i32>, FockDistribution>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let list: Vec<Entry> = map
            .iter()
            .map(|(k, v)| Entry {
                setting: k.clone(),
                distribution: v.clone(),
            })
            .collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<Vec<i32>, FockDistribution>, D::Error> {
        let list = Vec::<Entry>::deserialize(d)?;
        Ok(list.into_iter().map(|e| (e.setting, e.distribution)).collect())
    }
}

impl QDataset {
    pub fn new(grid: DisplacementGrid, k_max: usize) -> Self {
        QDataset {
            grid,
            k_max,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, setting: Vec<i32>, q: FockDistribution) {
        self.entries.insert(setting, q);
    }

    pub fn missing_settings(&self) -> Vec<Vec<i32>> {
        self.grid
            .settings()
            .into_iter()
            .filter(|s| !self.entries.contains_key(s))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.k_max < self.grid.n_max {
            return Err(Error::InvalidConfig(format!(
                "k_max = {} must be at least n_max = {}",
                self.k_max, self.grid.n_max
            )));
        }
        let missing = self.missing_settings();
        if !missing.is_empty() {
            return Err(Error::IncompleteGrid { missing });
        }
        let d = self.grid.num_modes();
        for (setting, q) in &self.entries {
            if setting.len() != d || q.num_modes != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: q.num_modes,
                });
            }
            q.validate()?;
        }
        Ok(())
    }
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn factorial(n: usize) -> f64 {
    (2..=n).map(|i| i as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// `γ(k, n, l, |α|)`: weight of `ρ_{n, n+l}` in the `l`-th DFT component of
/// `Q_k`. Evaluated as the double binomial sum
///
/// ```text
/// e^{−a²} a^{2k}/k! Σ_{j ≤ min(k, n+l)} Σ_{j' ≤ min(k, n)} (−1)^{j+j'} C(k,j) C(k,j')
///     a^{2(n−j−j')+l} √(n!(n+l)!) / ((n−j')!(n+l−j)!)
/// ```
///
/// in the log domain once `k` or `n` exceeds 20.
pub fn gamma_coefficient(k: usize, n: usize, l: i64, alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("|α| = {alpha} must be positive")));
    }
    let m = n as i64 + l;
    if m < 0 {
        return Err(Error::InvalidConfig(format!("n + l = {m} is negative")));
    }
    let m = m as usize;
    let log_domain = k > 20 || n > 20 || m > 20;
    let ln_a = alpha.ln();
    let mut sum = 0.0;
    for j in 0..=k.min(m) {
        for jp in 0..=k.min(n) {
            // 2k + 2(n − j − j') + l ≥ 0 always
            let power = (2 * k + 2 * n + m - n) as i64 - 2 * (j + jp) as i64;
            let sign = if (j + jp) % 2 == 0 { 1.0 } else { -1.0 };
            let term = if log_domain {
                let ln = ln_factorial(k) - ln_factorial(j) - ln_factorial(k - j) + ln_factorial(k)
                    - ln_factorial(jp)
                    - ln_factorial(k - jp)
                    + 0.5 * (ln_factorial(n) + ln_factorial(m))
                    - ln_factorial(n - jp)
                    - ln_factorial(m - j)
                    - ln_factorial(k)
                    + power as f64 * ln_a
                    - alpha * alpha;
                ln.exp()
            } else {
                binomial(k, j) * binomial(k, jp) * (factorial(n) * factorial(m)).sqrt()
                    / (factorial(n - jp) * factorial(m - j))
                    * alpha.powi(power as i32)
                    * (-alpha * alpha).exp()
                    / factorial(k)
            };
            sum += sign * term;
        }
    }
    Ok(sum)
}

/// One DFT component with the covariance of its real and imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct DftComponent {
    pub l: Vec<i64>,
    /// Dense over `(k_max+1)^d`, mode 0 slowest.
    pub values: Vec<C64>,
    pub cov_re: DMatrix<f64>,
    pub cov_im: DMatrix<f64>,
    pub cov_re_im: DMatrix<f64>,
}

/// `Q^{(l)}_k = (2N)^{-d} Σ_p Q_k(α_p) e^{−i Σ_j l_j p_j π/N}`; covariance
/// propagates through the same linear map (settings are independent).
pub fn dft_transform(q: &QDataset, l: &[i64]) -> Result<DftComponent> {
    q.validate()?;
    let d = q.grid.num_modes();
    if l.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: l.len(),
        });
    }
    let n_max = q.grid.n_max as i64;
    if l.iter().any(|lj| lj.abs() > n_max) {
        return Err(Error::InvalidConfig(format!("|l| must not exceed n_max = {n_max}")));
    }
    let big_n = (q.grid.n_max + 1) as f64;
    let size = (q.k_max + 1).pow(d as u32);
    let norm = (2.0 * big_n).powi(d as i32);
    let mut values = vec![c(0.0, 0.0); size];
    let mut cov_re = DMatrix::zeros(size, size);
    let mut cov_im = DMatrix::zeros(size, size);
    let mut cov_re_im = DMatrix::zeros(size, size);
    for (setting, dist) in &q.entries {
        let theta: f64 = setting
            .iter()
            .zip(l)
            .map(|(&p, &lj)| lj as f64 * p as f64)
            .sum::<f64>()
            * std::f64::consts::PI
            / big_n;
        let (s, co) = theta.sin_cos();
        let dense = dist.dense(q.k_max);
        for (v, qk) in values.iter_mut().zip(&dense.values) {
            *v += C64::new(co, -s) * (*qk / norm);
        }
        if dist.covariance.iter().any(|v| *v != 0.0) {
            let cov = dist.dense_covariance(q.k_max) / (norm * norm);
            cov_re += &cov * (co * co);
            cov_im += &cov * (s * s);
            cov_re_im -= &cov * (co * s);
        }
    }
    Ok(DftComponent {
        l: l.to_vec(),
        values,
        cov_re,
        cov_im,
        cov_re_im,
    })
}

/// Raw estimate with per-element variances, before Hermitization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEstimate {
    pub rho: DMatrix<C64>,
    pub var_re: DMatrix<f64>,
    pub var_im: DMatrix<f64>,
    pub max_condition: f64,
}

fn l_tuples(d: usize, n_max: usize) -> Vec<Vec<i64>> {
    fock_tuples(&vec![2 * n_max + 1; d])
        .into_iter()
        .map(|t| t.into_iter().map(|v| v as i64 - n_max as i64).collect())
        .collect()
}

/// Solves `Γ x = Q^{(l)}` for every `|l_j| ≤ n_max` and assembles
/// `ρ_{n, n+l}` over `0 ≤ n_j, n_j + l_j ≤ n_max`.
pub fn invert_gamma(components: &[DftComponent], grid: &DisplacementGrid, k_max: usize) -> Result<RawEstimate> {
    grid.validate()?;
    let d = grid.num_modes();
    let n_max = grid.n_max;
    if k_max < n_max {
        return Err(Error::InvalidConfig(format!(
            "k_max = {k_max} must be at least n_max = {n_max}"
        )));
    }
    let config = HilbertConfig::new(d, n_max, 0)?;
    let k_tuples = fock_tuples(&vec![k_max + 1; d]);
    let by_l: BTreeMap<&[i64], &DftComponent> = components.iter().map(|c| (c.l.as_slice(), c)).collect();
    let solved: Vec<(Vec<(usize, usize, C64, f64, f64)>, f64)> = l_tuples(d, n_max)
        .par_iter()
        .map(|l| {
            let comp = by_l
                .get(l.as_slice())
                .ok_or_else(|| Error::InvalidConfig(format!("missing DFT component l = {l:?}")))?;
            if comp.values.len() != k_tuples.len() {
                return Err(Error::DimensionMismatch {
                    expected: k_tuples.len(),
                    found: comp.values.len(),
                });
            }
            let ranges: Vec<(usize, usize)> = l
                .iter()
                .map(|&lj| ((-lj).max(0) as usize, n_max - lj.max(0) as usize))
                .collect();
            let n_tuples: Vec<Vec<usize>> = fock_tuples(&ranges.iter().map(|(lo, hi)| hi - lo + 1).collect::<Vec<_>>())
                .into_iter()
                .map(|t| t.iter().zip(&ranges).map(|(v, (lo, _))| v + lo).collect())
                .collect();
            let mut gamma = DMatrix::zeros(k_tuples.len(), n_tuples.len());
            for (r, k) in k_tuples.iter().enumerate() {
                for (col, n) in n_tuples.iter().enumerate() {
                    let mut g = 1.0;
                    for j in 0..d {
                        g *= gamma_coefficient(k[j], n[j], l[j], grid.magnitudes[j])?;
                    }
                    gamma[(r, col)] = g;
                }
            }
            let pinv = pseudo_inverse(&gamma, GAMMA_RCOND)?;
            if pinv.rank < n_tuples.len() {
                return Err(Error::IllConditioned {
                    what: format!("Γ for l = {l:?}"),
                    condition: pinv.condition,
                    hint: "increase the grid magnitudes |α| or k_max".into(),
                });
            }
            let g = &pinv.matrix;
            let re = DMatrix::from_iterator(comp.values.len(), 1, comp.values.iter().map(|z| z.re));
            let im = DMatrix::from_iterator(comp.values.len(), 1, comp.values.iter().map(|z| z.im));
            let (xr, xi) = (g * re, g * im);
            let vrr = g * &comp.cov_re * g.transpose();
            let vii = g * &comp.cov_im * g.transpose();
            let vri = g * &comp.cov_re_im * g.transpose();
            let psi: f64 = -l.iter().enumerate().map(|(j, &lj)| lj as f64 * grid.offset(j)).sum::<f64>();
            let (s, co) = psi.sin_cos();
            let mut out = Vec::with_capacity(n_tuples.len());
            for (i, n) in n_tuples.iter().enumerate() {
                let col: Vec<usize> = n.iter().zip(l).map(|(&nj, &lj)| (nj as i64 + lj) as usize).collect();
                let row_idx = config.basis_index(&[], n)?;
                let col_idx = config.basis_index(&[], &col)?;
                let value = C64::new(xr[i], xi[i]) * C64::from_polar(1.0, psi);
                let var_re = co * co * vrr[(i, i)] - 2.0 * co * s * vri[(i, i)] + s * s * vii[(i, i)];
                let var_im = s * s * vrr[(i, i)] + 2.0 * co * s * vri[(i, i)] + co * co * vii[(i, i)];
                out.push((row_idx, col_idx, value, var_re.max(0.0), var_im.max(0.0)));
            }
            Ok((out, pinv.condition))
        })
        .collect::<Result<_>>()?;
    let dim = config.dim();
    let mut rho = DMatrix::zeros(dim, dim);
    let mut var_re = DMatrix::zeros(dim, dim);
    let mut var_im = DMatrix::zeros(dim, dim);
    let mut max_condition: f64 = 0.0;
    for (elements, cond) in solved {
        max_condition = max_condition.max(cond);
        for (r, col, v, vr, vi) in elements {
            rho[(r, col)] = v;
            var_re[(r, col)] = vr;
            var_im[(r, col)] = vi;
        }
    }
    Ok(RawEstimate {
        rho,
        var_re,
        var_im,
        max_condition,
    })
}

/// `(ρ + ρ†)/2`.
pub fn hermitize(rho: &DensityMatrix) -> DensityMatrix {
    let m = rho.entries();
    let h = (m + m.adjoint()) * c(0.5, 0.0);
    DensityMatrix::from_raw(rho.config().clone(), h).expect("shape preserved")
}

/// Clips negative eigenvalues to zero and rescales to unit trace. Before the
/// rescaling this is the Frobenius-nearest PSD matrix.
pub fn project_psd(rho: &DensityMatrix) -> Result<DensityMatrix> {
    let defect = rho.hermiticity_defect();
    if defect > 1e-9 {
        return Err(Error::NotHermitian(defect));
    }
    let (values, vectors) = hermitian_eigen(rho.entries());
    let clipped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return Err(Error::NonPhysical("no positive eigenvalue to project onto".into()));
    }
    let dim = values.len();
    let mut out = DMatrix::zeros(dim, dim);
    for (i, w) in clipped.iter().enumerate() {
        if *w > 0.0 {
            let v = vectors.column(i);
            out += v * v.adjoint() * c(w / total, 0.0);
        }
    }
    let h = (&out + out.adjoint()) * c(0.5, 0.0);
    DensityMatrix::new(rho.config().clone(), h)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionDiagnostics {
    /// Smallest eigenvalue of the Hermitized raw estimate.
    pub min_eigenvalue: f64,
    pub raw_trace: f64,
    /// Largest deviation of the raw estimate from Hermiticity before merging.
    pub hermiticity_defect: f64,
    pub max_gamma_condition: f64,
    pub trace_distance_raw_to_psd: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedState {
    pub n_max: usize,
    pub num_modes: usize,
    /// Hermitized, not renormalized.
    #[serde(with = "crate::serde_util::complex_matrix")]
    pub rho_raw: DMatrix<C64>,
    pub rho_psd: DensityMatrix,
    #[serde(with = "crate::serde_util::real_matrix")]
    pub var_re: DMatrix<f64>,
    #[serde(with = "crate::serde_util::real_matrix")]
    pub var_im: DMatrix<f64>,
    pub fidelity: Option<f64>,
    pub fidelity_raw: Option<f64>,
    pub diagnostics: ReconstructionDiagnostics,
}

impl ReconstructedState {
    pub fn raw_density(&self) -> DensityMatrix {
        DensityMatrix::from_raw(self.rho_psd.config().clone(), self.rho_raw.clone()).expect("shape checked")
    }

    pub fn element(&self, row: &[usize], col: &[usize]) -> Result<(C64, f64, f64)> {
        let cfg = self.rho_psd.config();
        let (r, k) = (cfg.basis_index(&[], row)?, cfg.basis_index(&[], col)?);
        Ok((self.rho_raw[(r, k)], self.var_re[(r, k)].sqrt(), self.var_im[(r, k)].sqrt()))
    }
}

/// Restricts a target to levels `≤ n_max` (spins, if any, must be down).
/// More than `1e-6` of weight above `n_max` is rejected.
pub fn restrict_target(target: &PureState, config: &HilbertConfig) -> Result<PureState> {
    let motional = if target.config().num_spins() > 0 {
        target.motional_part()?
    } else {
        target.clone()
    };
    if motional.config().num_modes() != config.num_modes() {
        return Err(Error::DimensionMismatch {
            expected: config.num_modes(),
            found: motional.config().num_modes(),
        });
    }
    let mut amps = nalgebra::DVector::zeros(config.dim());
    let mut dropped = 0.0;
    for (i, a) in motional.amplitudes().iter().enumerate() {
        let (_, occ) = motional.config().decompose(i);
        match config.basis_index(&[], &occ) {
            Ok(j) => amps[j] = *a,
            Err(_) => dropped += a.norm_sqr(),
        }
    }
    if dropped > 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "target has weight {dropped:.3e} above the reconstruction cutoff"
        )));
    }
    PureState::from_unnormalized(config.clone(), amps)
}

/// DFT over every `l`, inversion, Hermitization and PSD projection.
pub fn reconstruct(q: &QDataset, target: Option<&PureState>) -> Result<ReconstructedState> {
    q.validate()?;
    let d = q.grid.num_modes();
    let n_max = q.grid.n_max;
    let components: Vec<DftComponent> = l_tuples(d, n_max)
        .par_iter()
        .map(|l| dft_transform(q, l))
        .collect::<Result<_>>()?;
    let raw = invert_gamma(&components, &q.grid, q.k_max)?;
    let config = HilbertConfig::new(d, n_max, 0)?;
    let hermiticity_defect = max_hermitian_defect(&raw.rho);
    let raw_dm = hermitize(&DensityMatrix::from_raw(config.clone(), raw.rho)?);
    let var_re = (&raw.var_re + raw.var_re.transpose()) * 0.5;
    let var_im = (&raw.var_im + raw.var_im.transpose()) * 0.5;
    let rho_psd = project_psd(&raw_dm)?;
    let eig = raw_dm.eigenvalues();
    let min_eigenvalue = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw_trace = raw_dm.trace().re;
    let mut warnings = Vec::new();
    if raw.max_condition > GAMMA_WARNING_CONDITION {
        warnings.push(format!(
            "Γ condition number {:.3e}; consider larger |α| or k_max",
            raw.max_condition
        ));
    }
    if min_eigenvalue < -1e-9 {
        warnings.push(format!(
            "raw estimate has a negative eigenvalue {min_eigenvalue:.4}; PSD projection applied"
        ));
    }
    let unit = DensityMatrix::from_raw(config.clone(), raw_dm.entries() / c(raw_trace, 0.0))?;
    let trace_distance_raw_to_psd = trace_distance(&unit, &rho_psd).unwrap_or(f64::NAN);
    let (fid, fid_raw) = match target {
        Some(t) => {
            let t = restrict_target(t, &config)?;
            (Some(fidelity(&rho_psd, &t)?), Some(fidelity(&raw_dm, &t)?))
        }
        None => (None, None),
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ReconstructedState {
        n_max,
        num_modes: d,
        rho_raw: raw_dm.entries().clone(),
        rho_psd,
        var_re,
        var_im,
        fidelity: fid,
        fidelity_raw: fid_raw,
        diagnostics: ReconstructionDiagnostics {
            min_eigenvalue,
            raw_trace,
            hermiticity_defect,
            max_gamma_condition: raw.max_condition,
            trace_distance_raw_to_psd,
            warnings,
        },
    })
}
