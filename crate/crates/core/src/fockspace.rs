//! Truncated multi-mode Fock space: configurations, pure states, density
//! matrices, ladder and displacement operators.
//!
//! # Basis ordering
//!
//! Product-basis indices are spin-major: the spin factors come first (spin 0
//! slowest, `↓ = 0`, `↑ = 1`), followed by the motional modes (mode 0
//! slowest). A mode with cutoff `c` carries the levels `0..=c`. Serialized
//! vectors and matrices use this ordering.
//!
//! # Truncation
//!
//! States are stored on the reporting space (levels `0..=cutoff` per mode).
//! Operators that can raise the phonon number are evaluated on a working
//! space with `guard_levels` extra levels per mode; after the operation the
//! population found above the cutoff is the truncation leak. A leak above
//! [`LEAK_TOLERANCE`] is an error, otherwise the guard levels are dropped and
//! the state is renormalized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, hermitian_eigen, max_hermitian_defect, C64, I};

pub const DEFAULT_GUARD_LEVELS: usize = 3;
/// Largest population allowed to leak above the cutoff during an operation.
pub const LEAK_TOLERANCE: f64 = 1e-6;
/// Normalization and Hermiticity tolerance for validated states.
pub const STATE_TOLERANCE: f64 = 1e-9;
pub const MAX_STATE_DIMENSION: usize = 1 << 16;
/// Cap for operators materialized as dense matrices on the full product space.
pub const MAX_OPERATOR_DIMENSION: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spin {
    Down,
    Up,
}

impl Spin {
    pub fn bit(self) -> usize {
        match self {
            Spin::Down => 0,
            Spin::Up => 1,
        }
    }

    pub fn from_bit(bit: usize) -> Self {
        if bit == 0 {
            Spin::Down
        } else {
            Spin::Up
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Spin::Down => 'd',
            Spin::Up => 'u',
        }
    }
}

/// Dimensions of a truncated spin ⊗ multi-mode Fock product space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "HilbertConfigRepr")]
pub struct HilbertConfig {
    cutoffs: Vec<usize>,
    num_spins: usize,
    guard_levels: usize,
}

#[derive(Deserialize)]
struct HilbertConfigRepr {
    cutoffs: Vec<usize>,
    num_spins: usize,
    #[serde(default = "default_guard")]
    guard_levels: usize,
}

fn default_guard() -> usize {
    DEFAULT_GUARD_LEVELS
}

impl TryFrom<HilbertConfigRepr> for HilbertConfig {
    type Error = Error;

    fn try_from(r: HilbertConfigRepr) -> Result<Self> {
        let cfg = HilbertConfig {
            cutoffs: r.cutoffs,
            num_spins: r.num_spins,
            guard_levels: r.guard_levels,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl HilbertConfig {
    /// `num_modes` modes sharing one cutoff, default guard levels.
    pub fn new(num_modes: usize, cutoff: usize, num_spins: usize) -> Result<Self> {
        Self::from_cutoffs(vec![cutoff; num_modes], num_spins)
    }

    pub fn from_cutoffs(cutoffs: Vec<usize>, num_spins: usize) -> Result<Self> {
        let cfg = HilbertConfig {
            cutoffs,
            num_spins,
            guard_levels: DEFAULT_GUARD_LEVELS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_guard_levels(mut self, guard_levels: usize) -> Result<Self> {
        self.guard_levels = guard_levels;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.is_empty() {
            return Err(Error::InvalidConfig("at least one mode is required".into()));
        }
        if self.cutoffs.contains(&0) {
            return Err(Error::InvalidConfig("every mode cutoff must be at least 1".into()));
        }
        if self.num_spins > 16 {
            return Err(Error::DimensionOverflow {
                dim: usize::MAX,
                cap: MAX_STATE_DIMENSION,
            });
        }
        let mut dim: usize = 1 << self.num_spins;
        for &c in &self.cutoffs {
            dim = dim
                .checked_mul(c + self.guard_levels + 1)
                .filter(|&d| d <= MAX_STATE_DIMENSION)
                .ok_or(Error::DimensionOverflow {
                    dim: usize::MAX,
                    cap: MAX_STATE_DIMENSION,
                })?;
        }
        Ok(())
    }

    pub fn num_modes(&self) -> usize {
        self.cutoffs.len()
    }

    pub fn cutoffs(&self) -> &[usize] {
        &self.cutoffs
    }

    pub fn cutoff(&self, mode: usize) -> usize {
        self.cutoffs[mode]
    }

    pub fn num_spins(&self) -> usize {
        self.num_spins
    }

    pub fn guard_levels(&self) -> usize {
        self.guard_levels
    }

    pub fn mode_levels(&self) -> Vec<usize> {
        self.cutoffs.iter().map(|c| c + 1).collect()
    }

    pub fn motional_dim(&self) -> usize {
        self.cutoffs.iter().map(|c| c + 1).product()
    }

    pub fn spin_dim(&self) -> usize {
        1 << self.num_spins
    }

    pub fn dim(&self) -> usize {
        self.spin_dim() * self.motional_dim()
    }

    /// Tensor-factor dimensions, spins first.
    pub fn factor_dims(&self) -> Vec<usize> {
        let mut dims = vec![2; self.num_spins];
        dims.extend(self.cutoffs.iter().map(|c| c + 1));
        dims
    }

    pub fn spin_factor(&self, spin: usize) -> usize {
        spin
    }

    pub fn mode_factor(&self, mode: usize) -> usize {
        self.num_spins + mode
    }

    /// Same modes, no spins.
    pub fn motional(&self) -> Self {
        HilbertConfig {
            cutoffs: self.cutoffs.clone(),
            num_spins: 0,
            guard_levels: self.guard_levels,
        }
    }

    pub fn with_spins(&self, num_spins: usize) -> Result<Self> {
        let cfg = HilbertConfig {
            cutoffs: self.cutoffs.clone(),
            num_spins,
            guard_levels: self.guard_levels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_cutoffs(&self, cutoffs: Vec<usize>) -> Result<Self> {
        let cfg = HilbertConfig {
            cutoffs,
            num_spins: self.num_spins,
            guard_levels: self.guard_levels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration whose listed modes carry their guard levels as ordinary levels.
    fn extended(&self, modes: &[usize]) -> Self {
        let mut cutoffs = self.cutoffs.clone();
        for &m in modes {
            cutoffs[m] += self.guard_levels;
        }
        HilbertConfig {
            cutoffs,
            num_spins: self.num_spins,
            guard_levels: 0,
        }
    }

    pub fn basis_index(&self, spins: &[Spin], occupations: &[usize]) -> Result<usize> {
        if spins.len() != self.num_spins {
            return Err(Error::DimensionMismatch {
                expected: self.num_spins,
                found: spins.len(),
            });
        }
        if occupations.len() != self.num_modes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_modes(),
                found: occupations.len(),
            });
        }
        let mut idx = 0;
        for s in spins {
            idx = idx * 2 + s.bit();
        }
        for (j, &n) in occupations.iter().enumerate() {
            if n > self.cutoffs[j] {
                return Err(Error::IndexOutOfRange {
                    what: "Fock level",
                    index: n,
                    len: self.cutoffs[j] + 1,
                });
            }
            idx = idx * (self.cutoffs[j] + 1) + n;
        }
        Ok(idx)
    }

    pub fn decompose(&self, mut index: usize) -> (Vec<Spin>, Vec<usize>) {
        let mut occ = vec![0; self.num_modes()];
        for j in (0..self.num_modes()).rev() {
            let l = self.cutoffs[j] + 1;
            occ[j] = index % l;
            index /= l;
        }
        let mut spins = vec![Spin::Down; self.num_spins];
        for s in (0..self.num_spins).rev() {
            spins[s] = Spin::from_bit(index % 2);
            index /= 2;
        }
        (spins, occ)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.num_modes() {
            return Err(Error::IndexOutOfRange {
                what: "mode",
                index: mode,
                len: self.num_modes(),
            });
        }
        Ok(())
    }
}

/// All occupation tuples for the given per-mode level counts, row-major
/// (first mode slowest).
pub fn fock_tuples(levels: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = levels.iter().product();
    (0..total)
        .map(|mut i| {
            let mut t = vec![0; levels.len()];
            for j in (0..levels.len()).rev() {
                t[j] = i % levels[j];
                i /= levels[j];
            }
            t
        })
        .collect()
}

/// Real tensor indexed by occupation tuples, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FockTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl FockTensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        FockTensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn flat_index(&self, k: &[usize]) -> Option<usize> {
        if k.len() != self.shape.len() {
            return None;
        }
        let mut idx = 0;
        for (kj, &l) in k.iter().zip(&self.shape) {
            if *kj >= l {
                return None;
            }
            idx = idx * l + kj;
        }
        Some(idx)
    }

    /// Entry at `k`, zero outside the stored shape.
    pub fn get(&self, k: &[usize]) -> f64 {
        self.flat_index(k).map_or(0.0, |i| self.values[i])
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Normalized state vector over a [`HilbertConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct PureState {
    config: HilbertConfig,
    amplitudes: DVector<C64>,
}

impl PureState {
    pub fn new(config: HilbertConfig, amplitudes: DVector<C64>) -> Result<Self> {
        if amplitudes.len() != config.dim() {
            return Err(Error::DimensionMismatch {
                expected: config.dim(),
                found: amplitudes.len(),
            });
        }
        let n2 = amplitudes.norm_squared();
        if (n2 - 1.0).abs() > STATE_TOLERANCE {
            return Err(Error::NotNormalized(n2));
        }
        Ok(PureState { config, amplitudes })
    }

    pub fn from_unnormalized(config: HilbertConfig, amplitudes: DVector<C64>) -> Result<Self> {
        let n = amplitudes.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::NotNormalized(n * n));
        }
        Self::new(config, amplitudes / c(n, 0.0))
    }

    pub fn basis(config: &HilbertConfig, spins: &[Spin], occupations: &[usize]) -> Result<Self> {
        let idx = config.basis_index(spins, occupations)?;
        let mut amps = DVector::zeros(config.dim());
        amps[idx] = c(1.0, 0.0);
        Ok(PureState {
            config: config.clone(),
            amplitudes: amps,
        })
    }

    /// All spins down, all modes in vacuum.
    pub fn ground(config: &HilbertConfig) -> Self {
        let mut amps = DVector::zeros(config.dim());
        amps[0] = c(1.0, 0.0);
        PureState {
            config: config.clone(),
            amplitudes: amps,
        }
    }

    /// Normalized superposition of motional Fock states with every spin down.
    pub fn superposition(config: &HilbertConfig, terms: &[(C64, Vec<usize>)]) -> Result<Self> {
        let spins = vec![Spin::Down; config.num_spins()];
        let mut amps = DVector::zeros(config.dim());
        for (a, occ) in terms {
            amps[config.basis_index(&spins, occ)?] += a;
        }
        Self::from_unnormalized(config.clone(), amps)
    }

    /// Product of coherent states `|α_1⟩…|α_d⟩` (spins down), from the
    /// Poisson amplitudes. Fails if more than [`LEAK_TOLERANCE`] of the
    /// population lies above the cutoff.
    pub fn coherent(config: &HilbertConfig, alphas: &[C64]) -> Result<Self> {
        if alphas.len() != config.num_modes() {
            return Err(Error::DimensionMismatch {
                expected: config.num_modes(),
                found: alphas.len(),
            });
        }
        let per_mode: Vec<Vec<C64>> = alphas
            .iter()
            .zip(config.cutoffs())
            .map(|(a, &cut)| {
                let mut v = Vec::with_capacity(cut + 1);
                let mut term = c((-a.norm_sqr() / 2.0).exp(), 0.0);
                for n in 0..=cut {
                    if n > 0 {
                        term = term * a / c((n as f64).sqrt(), 0.0);
                    }
                    v.push(term);
                }
                v
            })
            .collect();
        let levels = config.mode_levels();
        let mut amps = DVector::zeros(config.dim());
        for (i, occ) in fock_tuples(&levels).iter().enumerate() {
            let mut a = c(1.0, 0.0);
            for (j, &n) in occ.iter().enumerate() {
                a *= per_mode[j][n];
            }
            amps[i] = a;
        }
        let kept = amps.norm_squared();
        if 1.0 - kept > LEAK_TOLERANCE {
            return Err(Error::TruncationLeak {
                leak: 1.0 - kept,
                tolerance: LEAK_TOLERANCE,
            });
        }
        Self::from_unnormalized(config.clone(), amps)
    }

    pub fn config(&self) -> &HilbertConfig {
        &self.config
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn amplitude(&self, spins: &[Spin], occupations: &[usize]) -> Result<C64> {
        Ok(self.amplitudes[self.config.basis_index(spins, occupations)?])
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.norm_squared()
    }

    pub fn overlap(&self, other: &PureState) -> Result<C64> {
        if self.config.dim() != other.config.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.config.dim(),
                found: other.config.dim(),
            });
        }
        Ok(self.amplitudes.dotc(&other.amplitudes))
    }

    /// `|⟨self|other⟩|²`.
    pub fn overlap_probability(&self, other: &PureState) -> Result<f64> {
        Ok(self.overlap(other)?.norm_sqr())
    }

    pub fn to_density(&self) -> DensityMatrix {
        DensityMatrix {
            config: self.config.clone(),
            entries: &self.amplitudes * self.amplitudes.adjoint(),
        }
    }

    /// Populations of the joint spin configurations, indexed by the spin bits
    /// (spin 0 most significant).
    /// Marginal probability that spin `spin` is found in `value`.
    pub fn spin_probability(&self, spin: usize, value: Spin) -> f64 {
        let n = self.config.num_spins();
        self.spin_populations()
            .iter()
            .enumerate()
            .filter(|(cfg, _)| spin < n && (cfg >> (n - 1 - spin)) & 1 == value.bit())
            .map(|(_, p)| p)
            .sum()
    }

    pub fn spin_populations(&self) -> Vec<f64> {
        let m = self.config.motional_dim();
        (0..self.config.spin_dim())
            .map(|s| (0..m).map(|k| self.amplitudes[s * m + k].norm_sqr()).sum())
            .collect()
    }

    /// Motional Fock populations with the spins traced out.
    pub fn fock_populations(&self) -> FockTensor {
        let m = self.config.motional_dim();
        let mut t = FockTensor::zeros(self.config.mode_levels());
        for (i, a) in self.amplitudes.iter().enumerate() {
            t.values[i % m] += a.norm_sqr();
        }
        t
    }

    /// Motional factor of a state whose spins are all down.
    pub fn motional_part(&self) -> Result<PureState> {
        let m = self.config.motional_dim();
        let down: f64 = (0..m).map(|k| self.amplitudes[k].norm_sqr()).sum();
        if 1.0 - down > STATE_TOLERANCE {
            return Err(Error::NonPhysical(format!(
                "spins are not all down (population {:.3e} elsewhere)",
                1.0 - down
            )));
        }
        let amps = DVector::from_iterator(m, self.amplitudes.iter().take(m).cloned());
        Self::from_unnormalized(self.config.motional(), amps)
    }

    /// `|↓…↓⟩ ⊗ motional` with `num_spins` spins prepended.
    pub fn with_spins_down(&self, num_spins: usize) -> Result<PureState> {
        let motional = if self.config.num_spins() == 0 {
            self.clone()
        } else {
            self.motional_part()?
        };
        let cfg = self.config.with_spins(num_spins)?;
        let mut amps = DVector::zeros(cfg.dim());
        amps.rows_mut(0, motional.amplitudes.len()).copy_from(&motional.amplitudes);
        Ok(PureState {
            config: cfg,
            amplitudes: amps,
        })
    }

    /// Same state on larger cutoffs (zero amplitude on the new levels).
    pub fn pad_cutoffs(&self, cutoffs: &[usize]) -> Result<PureState> {
        let cfg = self.config.with_cutoffs(cutoffs.to_vec())?;
        let amps = pad_vector(&self.config, &cfg, &self.amplitudes)?;
        Ok(PureState {
            config: cfg,
            amplitudes: amps,
        })
    }

    /// Applies `op`, which acts on the listed tensor factors of the working
    /// space where `modes` carry their guard levels, then truncates back.
    pub(crate) fn apply_with_guard(
        &self,
        modes: &[usize],
        factors: &[usize],
        op: &DMatrix<C64>,
    ) -> Result<PureState> {
        let work = self.config.extended(modes);
        let mut v = pad_vector(&self.config, &work, &self.amplitudes)?;
        linalg::apply_local(&mut v, &work.factor_dims(), factors, op);
        let (amps, leak) = truncate_vector(&work, &self.config, &v);
        if leak > LEAK_TOLERANCE {
            return Err(Error::TruncationLeak {
                leak,
                tolerance: LEAK_TOLERANCE,
            });
        }
        Self::from_unnormalized(self.config.clone(), amps)
    }

    /// Working-space embedding used by the readout simulator, where every
    /// mode carries its guard levels and nothing is truncated afterwards.
    pub(crate) fn embed_all_guards(&self) -> Result<(HilbertConfig, DVector<C64>)> {
        let modes: Vec<usize> = (0..self.config.num_modes()).collect();
        let work = self.config.extended(&modes);
        let v = pad_vector(&self.config, &work, &self.amplitudes)?;
        Ok((work, v))
    }
}

fn pad_vector(from: &HilbertConfig, to: &HilbertConfig, v: &DVector<C64>) -> Result<DVector<C64>> {
    if from.num_spins() != to.num_spins() || from.num_modes() != to.num_modes() {
        return Err(Error::DimensionMismatch {
            expected: from.dim(),
            found: to.dim(),
        });
    }
    if from.cutoffs().iter().zip(to.cutoffs()).any(|(a, b)| a > b) {
        return Err(Error::InvalidConfig("cannot pad to smaller cutoffs".into()));
    }
    let mut out = DVector::zeros(to.dim());
    for (i, a) in v.iter().enumerate() {
        let (spins, occ) = from.decompose(i);
        out[to.basis_index(&spins, &occ)?] = *a;
    }
    Ok(out)
}

/// Drops the levels above `to`'s cutoffs; returns the kept vector and the
/// dropped population.
fn truncate_vector(from: &HilbertConfig, to: &HilbertConfig, v: &DVector<C64>) -> (DVector<C64>, f64) {
    let mut out = DVector::zeros(to.dim());
    let mut leak = 0.0;
    for (i, a) in v.iter().enumerate() {
        let (spins, occ) = from.decompose(i);
        match to.basis_index(&spins, &occ) {
            Ok(j) => out[j] = *a,
            Err(_) => leak += a.norm_sqr(),
        }
    }
    (out, leak)
}

/// Hermitian, unit-trace matrix over a [`HilbertConfig`] (usually motional
/// only, i.e. `num_spins == 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensityMatrixRepr")]
pub struct DensityMatrix {
    config: HilbertConfig,
    #[serde(with = "crate::serde_util::complex_matrix")]
    entries: DMatrix<C64>,
}

#[derive(Deserialize)]
struct DensityMatrixRepr {
    config: HilbertConfig,
    #[serde(with = "crate::serde_util::complex_matrix")]
    entries: DMatrix<C64>,
}

impl TryFrom<DensityMatrixRepr> for DensityMatrix {
    type Error = Error;

    fn try_from(r: DensityMatrixRepr) -> Result<Self> {
        Self::from_raw(r.config, r.entries)
    }
}

impl DensityMatrix {
    /// Validated constructor: Hermitian and unit trace within [`STATE_TOLERANCE`].
    pub fn new(config: HilbertConfig, entries: DMatrix<C64>) -> Result<Self> {
        let rho = Self::from_raw(config, entries)?;
        let defect = rho.hermiticity_defect();
        if defect > STATE_TOLERANCE {
            return Err(Error::NotHermitian(defect));
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > STATE_TOLERANCE || tr.im.abs() > STATE_TOLERANCE {
            return Err(Error::NonPhysical(format!("trace {tr} differs from 1")));
        }
        Ok(rho)
    }

    /// Shape-checked only; used for raw reconstructions that may be
    /// non-Hermitian, non-positive or not unit-trace.
    pub fn from_raw(config: HilbertConfig, entries: DMatrix<C64>) -> Result<Self> {
        let d = config.dim();
        if entries.nrows() != d || entries.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: entries.nrows().max(entries.ncols()),
            });
        }
        Ok(DensityMatrix { config, entries })
    }

    pub fn from_pure(state: &PureState) -> Self {
        state.to_density()
    }

    pub fn maximally_mixed(config: &HilbertConfig) -> Self {
        let d = config.dim();
        DensityMatrix {
            config: config.clone(),
            entries: DMatrix::identity(d, d) * c(1.0 / d as f64, 0.0),
        }
    }

    /// Convex combination; weights must be non-negative and sum to one.
    pub fn mixture(parts: &[(f64, DensityMatrix)]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidConfig("empty mixture".into()))?;
        let mut acc = DMatrix::zeros(first.1.entries.nrows(), first.1.entries.ncols());
        for (w, rho) in parts {
            if *w < 0.0 {
                return Err(Error::NonPhysical("negative mixture weight".into()));
            }
            if rho.config != first.1.config {
                return Err(Error::DimensionMismatch {
                    expected: first.1.config.dim(),
                    found: rho.config.dim(),
                });
            }
            acc += &rho.entries * c(*w, 0.0);
        }
        Self::new(first.1.config.clone(), acc)
    }

    /// Product of thermal states with the given mean occupations on a
    /// motional configuration; the tail above the cutoff must stay below
    /// [`LEAK_TOLERANCE`].
    pub fn thermal(config: &HilbertConfig, nbars: &[f64]) -> Result<Self> {
        if config.num_spins() != 0 {
            return Err(Error::InvalidConfig("thermal states are motional only".into()));
        }
        if nbars.len() != config.num_modes() {
            return Err(Error::DimensionMismatch {
                expected: config.num_modes(),
                found: nbars.len(),
            });
        }
        if nbars.iter().any(|n| !(n.is_finite() && *n >= 0.0)) {
            return Err(Error::InvalidConfig("mean occupation must be non-negative".into()));
        }
        let mut kept = 1.0;
        let per_mode: Vec<Vec<f64>> = nbars
            .iter()
            .zip(config.cutoffs())
            .map(|(&nbar, &cut)| {
                let ratio = nbar / (1.0 + nbar);
                let p: Vec<f64> = (0..=cut).map(|n| ratio.powi(n as i32) / (1.0 + nbar)).collect();
                kept *= p.iter().sum::<f64>();
                p
            })
            .collect();
        if 1.0 - kept > LEAK_TOLERANCE {
            return Err(Error::TruncationLeak {
                leak: 1.0 - kept,
                tolerance: LEAK_TOLERANCE,
            });
        }
        let d = config.dim();
        let mut e = DMatrix::zeros(d, d);
        for (i, occ) in fock_tuples(&config.mode_levels()).iter().enumerate() {
            let p: f64 = occ.iter().enumerate().map(|(j, &n)| per_mode[j][n]).product();
            e[(i, i)] = c(p / kept, 0.0);
        }
        Ok(DensityMatrix {
            config: config.clone(),
            entries: e,
        })
    }

    pub fn config(&self) -> &HilbertConfig {
        &self.config
    }

    pub fn entries(&self) -> &DMatrix<C64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<C64> {
        self.entries
    }

    pub fn trace(&self) -> C64 {
        self.entries.trace()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        max_hermitian_defect(&self.entries)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.entries.diagonal().iter().map(|z| z.re).collect()
    }

    /// Fock populations with any spins traced out.
    pub fn fock_populations(&self) -> FockTensor {
        let m = self.config.motional_dim();
        let mut t = FockTensor::zeros(self.config.mode_levels());
        for i in 0..self.config.dim() {
            t.values[i % m] += self.entries[(i, i)].re;
        }
        t
    }

    /// Element `⟨row|ρ|col⟩` addressed by motional occupations (no spins).
    pub fn element(&self, row: &[usize], col: &[usize]) -> Result<C64> {
        let r = self.config.basis_index(&[], row)?;
        let cidx = self.config.basis_index(&[], col)?;
        Ok(self.entries[(r, cidx)])
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigen(&self.entries).0
    }

    /// Spectral decomposition into weighted pure states (weights > 1e-14).
    pub fn eigen_ensemble(&self) -> Result<Vec<(f64, PureState)>> {
        let (values, vectors) = hermitian_eigen(&self.entries);
        if let Some(&min) = values.first() {
            if min < -STATE_TOLERANCE {
                return Err(Error::NonPhysical(format!(
                    "density matrix has negative eigenvalue {min:.3e}"
                )));
            }
        }
        let mut out = Vec::new();
        for (k, &w) in values.iter().enumerate() {
            if w > 1e-14 {
                let v = vectors.column(k).into_owned();
                out.push((w, PureState::from_unnormalized(self.config.clone(), v)?));
            }
        }
        Ok(out)
    }

    /// Removes every off-diagonal coherence.
    pub fn dephased(&self) -> DensityMatrix {
        let d = self.entries.nrows();
        let mut e = DMatrix::zeros(d, d);
        for i in 0..d {
            e[(i, i)] = self.entries[(i, i)];
        }
        DensityMatrix {
            config: self.config.clone(),
            entries: e,
        }
    }

    pub fn transpose(&self) -> DensityMatrix {
        DensityMatrix {
            config: self.config.clone(),
            entries: self.entries.transpose(),
        }
    }

    pub fn pad_cutoffs(&self, cutoffs: &[usize]) -> Result<DensityMatrix> {
        let cfg = self.config.with_cutoffs(cutoffs.to_vec())?;
        let map: Vec<usize> = (0..self.config.dim())
            .map(|i| {
                let (s, o) = self.config.decompose(i);
                cfg.basis_index(&s, &o)
            })
            .collect::<Result<_>>()?;
        let mut e = DMatrix::zeros(cfg.dim(), cfg.dim());
        for (i, &pi) in map.iter().enumerate() {
            for (j, &pj) in map.iter().enumerate() {
                e[(pi, pj)] = self.entries[(i, j)];
            }
        }
        Ok(DensityMatrix { config: cfg, entries: e })
    }
}

/// Single-mode operators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeOperator {
    Lower {
        mode: usize,
    },
    Raise {
        mode: usize,
    },
    Number {
        mode: usize,
    },
    Displacement {
        mode: usize,
        #[serde(with = "crate::serde_util::complex")]
        alpha: C64,
    },
}

impl ModeOperator {
    pub fn mode(&self) -> usize {
        match *self {
            ModeOperator::Lower { mode }
            | ModeOperator::Raise { mode }
            | ModeOperator::Number { mode }
            | ModeOperator::Displacement { mode, .. } => mode,
        }
    }
}

/// Annihilation operator on `levels` Fock levels.
pub fn lowering_matrix(levels: usize) -> DMatrix<C64> {
    let mut a = DMatrix::zeros(levels, levels);
    for n in 1..levels {
        a[(n - 1, n)] = c((n as f64).sqrt(), 0.0);
    }
    a
}

/// `D(α) = exp(α a† − α* a)` evaluated on exactly `levels` levels, through
/// the eigendecomposition of the Hermitian generator `i(α a† − α* a)`.
pub fn displacement_matrix(levels: usize, alpha: C64) -> DMatrix<C64> {
    let a = lowering_matrix(levels);
    let gen = a.adjoint() * alpha - &a * alpha.conj();
    // exp(G) = exp(-i H) with H = iG Hermitian
    linalg::hermitian_exp(&(gen * I), 1.0)
}

/// `D(α)` on `cutoff + guard + 1` levels, restricted to the `0..=cutoff` block.
pub fn displacement_operator(cutoff: usize, guard: usize, alpha: C64) -> DMatrix<C64> {
    let full = displacement_matrix(cutoff + guard + 1, alpha);
    full.view((0, 0), (cutoff + 1, cutoff + 1)).into_owned()
}

/// Dense matrix of `op` on the full product space (identity on spins and on
/// the other modes).
pub fn build_operator(op: &ModeOperator, config: &HilbertConfig) -> Result<DMatrix<C64>> {
    config.check_mode(op.mode())?;
    let dim = config.dim();
    if dim > MAX_OPERATOR_DIMENSION {
        return Err(Error::DimensionOverflow {
            dim,
            cap: MAX_OPERATOR_DIMENSION,
        });
    }
    let j = op.mode();
    let levels = config.cutoff(j) + 1;
    let local = match *op {
        ModeOperator::Lower { .. } => lowering_matrix(levels),
        ModeOperator::Raise { .. } => lowering_matrix(levels).adjoint(),
        ModeOperator::Number { .. } => {
            DMatrix::from_fn(levels, levels, |r, col| if r == col { c(r as f64, 0.0) } else { c(0.0, 0.0) })
        }
        ModeOperator::Displacement { alpha, .. } => {
            displacement_operator(config.cutoff(j), config.guard_levels(), alpha)
        }
    };
    let before: usize = config.spin_dim() * config.cutoffs()[..j].iter().map(|c| c + 1).product::<usize>();
    let after: usize = config.cutoffs()[j + 1..].iter().map(|c| c + 1).product();
    let left = DMatrix::<C64>::identity(before, before);
    let right = DMatrix::<C64>::identity(after, after);
    Ok(linalg::kron(&linalg::kron(&left, &local), &right))
}

/// `Q_k(α) = ⟨k| D†(α) ρ D(α) |k⟩` for a motional density matrix, with one
/// displacement per mode. The result covers levels `0..=cutoff`; the
/// population pushed into the guard levels must stay below
/// [`LEAK_TOLERANCE`].
pub fn displaced_populations(rho: &DensityMatrix, alphas: &[C64]) -> Result<FockTensor> {
    let cfg = rho.config();
    if cfg.num_spins() != 0 {
        return Err(Error::InvalidConfig(
            "displaced populations need a motional density matrix (no spins)".into(),
        ));
    }
    if alphas.len() != cfg.num_modes() {
        return Err(Error::DimensionMismatch {
            expected: cfg.num_modes(),
            found: alphas.len(),
        });
    }
    let modes: Vec<usize> = (0..cfg.num_modes()).collect();
    let work = cfg.extended(&modes);
    let padded = rho.pad_cutoffs(work.cutoffs())?;
    let mut m = padded.entries;
    let dims = work.factor_dims();
    for (j, &alpha) in alphas.iter().enumerate() {
        if alpha == c(0.0, 0.0) {
            continue;
        }
        let d_dag = displacement_matrix(work.cutoff(j) + 1, -alpha);
        linalg::conjugate_local(&mut m, &dims, &[j], &d_dag);
    }
    let mut out = FockTensor::zeros(cfg.mode_levels());
    let mut leak = 0.0;
    for i in 0..work.dim() {
        let (_, occ) = work.decompose(i);
        let p = m[(i, i)].re;
        match out.flat_index(&occ) {
            Some(k) => out.values[k] = p,
            None => leak += p,
        }
    }
    if leak > LEAK_TOLERANCE {
        return Err(Error::TruncationLeak {
            leak,
            tolerance: LEAK_TOLERANCE,
        });
    }
    Ok(out)
}

/// `⟨ψ|ρ|ψ⟩`. A target carrying spins (all down) is reduced to its motional part.
pub fn fidelity(rho: &DensityMatrix, target: &PureState) -> Result<f64> {
    let reduced;
    let target = if target.config().num_spins() != rho.config().num_spins() {
        reduced = target.motional_part()?;
        &reduced
    } else {
        target
    };
    if target.config().dim() != rho.config().dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.config().dim(),
            found: target.config().dim(),
        });
    }
    let v = target.amplitudes();
    let value = v.dotc(&(rho.entries() * v));
    debug_assert!(rho.hermiticity_defect() > STATE_TOLERANCE || value.im.abs() < 1e-9);
    Ok(value.re)
}

/// `½ Σ |λ_i(a − b)|`.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    if a.config().dim() != b.config().dim() {
        return Err(Error::DimensionMismatch {
            expected: a.config().dim(),
            found: b.config().dim(),
        });
    }
    for m in [a, b] {
        let defect = m.hermiticity_defect();
        if defect > STATE_TOLERANCE {
            return Err(Error::NotHermitian(defect));
        }
    }
    let diff = a.entries() - b.entries();
    let (values, _) = hermitian_eigen(&diff);
    Ok(0.5 * values.iter().map(|v| v.abs()).sum::<f64>())
}
