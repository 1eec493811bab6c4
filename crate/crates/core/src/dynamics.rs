//! Interaction-picture spin-motion dynamics and state-preparation sequences.
//!
//! # Conventions
//!
//! Spin basis order is `(↓, ↑)`; `σ₊ = |↑⟩⟨↓|`.
//!
//! * Sidebands on the pair (spin `s`, mode `j`) evolve under
//!   `H_BSB = iΩ(σ₊a†e^{iφ} − σ₋a e^{−iφ})` and
//!   `H_RSB = iΩ(σ₊a e^{iφ} − σ₋a†e^{−iφ})`. A pulse of angle `θ` runs for
//!   `Ωt = θ/2`, so `BSB(θ, φ)` maps `|↓,n⟩ → cos(√(n+1)θ/2)|↓,n⟩ +
//!   e^{iφ} sin(√(n+1)θ/2)|↑,n+1⟩` and a π pulse transfers `|↓,0⟩` fully.
//!   The reverse direction picks up `−e^{−iφ}`.
//! * `Carrier(θ, φ) = exp(iθ/2 (σ₊e^{iφ} + σ₋e^{−iφ}))`, so
//!   `Carrier(π/2, 0)|↓⟩ = |+i⟩ = (|↓⟩ + i|↑⟩)/√2`. A rotation by `−θ` is
//!   written as `Carrier(θ, φ + π)`.
//! * `SpinDepDisplace(α, φ_s)` applies `D(α)` to the motion for spin
//!   component `(|↓⟩ + ie^{iφ}|↑⟩)/√2` and `D(−α)` for the orthogonal
//!   component, with `φ = φ_s − spin_phase_offset`. For `φ = 0` the `+1`
//!   eigenstate is `|+i⟩`.
//! * `SimultaneousSidebands` drives RSB and BSB with equal Ω for `Ωt =
//!   omega_t`; the hardware offset is subtracted from both tone phases. With
//!   `φ_s = (φ_b+φ_r)/2`, `φ_m = (φ_b−φ_r)/2` the `+1` eigenstate of
//!   `i(σ₊e^{iφ_s} − σ₋e^{−iφ_s})` is displaced by `−iΩt e^{iφ_m}`.
//!
//! Global phases are never tracked as meaningful.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fockspace::{displacement_matrix, lowering_matrix, HilbertConfig, PureState};
use crate::linalg::{c, hermitian_exp, kron, C64, I};

/// Sideband and carrier Rabi frequencies (rad/s) of every ion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RabiCalibration {
    /// `sideband[spin][mode]`; zero means the ion does not couple to the mode.
    pub sideband: Vec<Vec<f64>>,
    #[serde(default)]
    pub carrier: Vec<f64>,
    /// Constant phase offset between single-tone and two-tone drives.
    #[serde(default)]
    pub spin_phase_offset: f64,
}

impl RabiCalibration {
    pub fn new(sideband: Vec<Vec<f64>>, carrier: Vec<f64>) -> Result<Self> {
        let cal = RabiCalibration {
            sideband,
            carrier,
            spin_phase_offset: 0.0,
        };
        cal.validate()?;
        Ok(cal)
    }

    /// Every ion couples to every mode with the same frequency.
    pub fn uniform(num_spins: usize, num_modes: usize, omega: f64) -> Self {
        RabiCalibration {
            sideband: vec![vec![omega; num_modes]; num_spins],
            carrier: vec![omega; num_spins],
            spin_phase_offset: 0.0,
        }
    }

    /// Readout layout: ion `j` reads mode `j` with frequency `omegas[j]`.
    pub fn readout(omegas: &[f64]) -> Self {
        let d = omegas.len();
        let sideband = (0..d)
            .map(|s| (0..d).map(|j| if s == j { omegas[j] } else { 0.0 }).collect())
            .collect();
        RabiCalibration {
            sideband,
            carrier: omegas.to_vec(),
            spin_phase_offset: 0.0,
        }
    }

    pub fn with_spin_phase_offset(mut self, offset: f64) -> Self {
        self.spin_phase_offset = offset;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let modes = self.sideband.first().map_or(0, |r| r.len());
        if self.sideband.iter().any(|r| r.len() != modes) {
            return Err(Error::InvalidConfig("ragged sideband Rabi table".into()));
        }
        let bad = |v: &f64| !v.is_finite() || *v < 0.0;
        if self.sideband.iter().flatten().any(bad) || self.carrier.iter().any(bad) {
            return Err(Error::InvalidConfig(
                "Rabi frequencies must be finite and non-negative".into(),
            ));
        }
        if !self.carrier.is_empty() && self.carrier.len() != self.sideband.len() {
            return Err(Error::InvalidConfig(
                "carrier Rabi list must have one entry per spin".into(),
            ));
        }
        if !self.spin_phase_offset.is_finite() {
            return Err(Error::InvalidConfig("spin phase offset must be finite".into()));
        }
        Ok(())
    }

    pub fn num_spins(&self) -> usize {
        self.sideband.len()
    }

    /// Sideband frequency of the pair, failing for uncoupled or unknown pairs.
    pub fn sideband(&self, spin: usize, mode: usize) -> Result<f64> {
        let omega = self
            .sideband
            .get(spin)
            .and_then(|r| r.get(mode))
            .ok_or_else(|| Error::MissingCalibration(format!("no sideband Rabi frequency for spin {spin}, mode {mode}")))?;
        if *omega <= 0.0 {
            return Err(Error::NotCoupled { spin, mode });
        }
        Ok(*omega)
    }

    /// Readout frequencies `Ω_j` of ion `j` on mode `j`, for `d` modes.
    pub fn readout_frequencies(&self, d: usize) -> Result<Vec<f64>> {
        (0..d).map(|j| self.sideband(j, j)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PulseOp {
    Carrier {
        spin: usize,
        angle: f64,
        phase: f64,
    },
    Bsb {
        spin: usize,
        mode: usize,
        angle: f64,
        phase: f64,
    },
    Rsb {
        spin: usize,
        mode: usize,
        angle: f64,
        phase: f64,
    },
    SpinDepDisplace {
        spin: usize,
        mode: usize,
        #[serde(with = "crate::serde_util::complex")]
        alpha: C64,
        spin_phase: f64,
        /// Integrate the two-tone Hamiltonian instead of the exact
        /// conditional displacement.
        #[serde(default)]
        two_tone: bool,
    },
    SimultaneousSidebands {
        spin: usize,
        mode: usize,
        omega_t: f64,
        blue_phase: f64,
        red_phase: f64,
    },
}

impl PulseOp {
    fn spin(&self) -> usize {
        match *self {
            PulseOp::Carrier { spin, .. }
            | PulseOp::Bsb { spin, .. }
            | PulseOp::Rsb { spin, .. }
            | PulseOp::SpinDepDisplace { spin, .. }
            | PulseOp::SimultaneousSidebands { spin, .. } => spin,
        }
    }

    fn mode(&self) -> Option<usize> {
        match *self {
            PulseOp::Carrier { .. } => None,
            PulseOp::Bsb { mode, .. }
            | PulseOp::Rsb { mode, .. }
            | PulseOp::SpinDepDisplace { mode, .. }
            | PulseOp::SimultaneousSidebands { mode, .. } => Some(mode),
        }
    }

    fn validate(&self, config: &HilbertConfig) -> Result<()> {
        if self.spin() >= config.num_spins() {
            return Err(Error::IndexOutOfRange {
                what: "spin",
                index: self.spin(),
                len: config.num_spins(),
            });
        }
        if let Some(mode) = self.mode() {
            if mode >= config.num_modes() {
                return Err(Error::IndexOutOfRange {
                    what: "mode",
                    index: mode,
                    len: config.num_modes(),
                });
            }
        }
        let finite = match *self {
            PulseOp::Carrier { angle, phase, .. }
            | PulseOp::Bsb { angle, phase, .. }
            | PulseOp::Rsb { angle, phase, .. } => {
                if angle < 0.0 {
                    return Err(Error::InvalidConfig(format!("negative pulse angle {angle}")));
                }
                angle.is_finite() && phase.is_finite()
            }
            PulseOp::SpinDepDisplace { alpha, spin_phase, .. } => {
                alpha.re.is_finite() && alpha.im.is_finite() && spin_phase.is_finite()
            }
            PulseOp::SimultaneousSidebands {
                omega_t,
                blue_phase,
                red_phase,
                ..
            } => {
                if omega_t < 0.0 {
                    return Err(Error::InvalidConfig(format!("negative pulse area {omega_t}")));
                }
                omega_t.is_finite() && blue_phase.is_finite() && red_phase.is_finite()
            }
        };
        if !finite {
            return Err(Error::InvalidConfig("pulse parameters must be finite".into()));
        }
        Ok(())
    }
}

fn sigma_plus() -> DMatrix<C64> {
    DMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)])
}

pub fn carrier_matrix(angle: f64, phase: f64) -> DMatrix<C64> {
    let (s, co) = (angle / 2.0).sin_cos();
    DMatrix::from_row_slice(
        2,
        2,
        &[
            c(co, 0.0),
            I * C64::from_polar(s, -phase),
            I * C64::from_polar(s, phase),
            c(co, 0.0),
        ],
    )
}

/// Hermitian generator `i(σ₊ A e^{iφ} − σ₋ A† e^{−iφ})` on a (spin, mode)
/// pair with `levels` motional levels; `A = a†` for the blue sideband and
/// `A = a` for the red one.
pub(crate) fn sideband_generator(levels: usize, phase: f64, blue: bool) -> DMatrix<C64> {
    let a = lowering_matrix(levels);
    let motional = if blue { a.adjoint() } else { a };
    let term = kron(&sigma_plus(), &motional) * C64::from_polar(1.0, phase);
    (&term - term.adjoint()) * I
}

/// `Π₊ ⊗ D(α) + Π₋ ⊗ D(−α)` with `Π±` the projectors on `(|↓⟩ ± ie^{iφ}|↑⟩)/√2`.
fn conditional_displacement(levels: usize, alpha: C64, phase: f64) -> DMatrix<C64> {
    let e = I * C64::from_polar(1.0, phase);
    let proj = |sign: f64| {
        let v = [c(1.0, 0.0), e * sign];
        DMatrix::from_fn(2, 2, |r, col| v[r] * v[col].conj() * 0.5)
    };
    kron(&proj(1.0), &displacement_matrix(levels, alpha))
        + kron(&proj(-1.0), &displacement_matrix(levels, -alpha))
}

/// Applies one pulse. Operations touching a mode are evaluated with the
/// mode's guard levels and fail if population leaks above the cutoff.
pub fn evolve(state: &PureState, op: &PulseOp, calib: &RabiCalibration) -> Result<PureState> {
    let config = state.config();
    op.validate(config)?;
    let spin_factor = config.spin_factor(op.spin());
    match *op {
        PulseOp::Carrier { angle, phase, .. } => {
            state.apply_with_guard(&[], &[spin_factor], &carrier_matrix(angle, phase))
        }
        PulseOp::Bsb {
            spin,
            mode,
            angle,
            phase,
        }
        | PulseOp::Rsb {
            spin,
            mode,
            angle,
            phase,
        } => {
            calib.sideband(spin, mode)?;
            let levels = config.cutoff(mode) + config.guard_levels() + 1;
            let blue = matches!(op, PulseOp::Bsb { .. });
            let u = hermitian_exp(&sideband_generator(levels, phase, blue), angle / 2.0);
            state.apply_with_guard(&[mode], &[spin_factor, config.mode_factor(mode)], &u)
        }
        PulseOp::SpinDepDisplace {
            spin,
            mode,
            alpha,
            spin_phase,
            two_tone,
        } => {
            calib.sideband(spin, mode)?;
            if two_tone {
                let phi_m = alpha.arg() + FRAC_PI_2;
                let tones = PulseOp::SimultaneousSidebands {
                    spin,
                    mode,
                    omega_t: alpha.norm(),
                    blue_phase: spin_phase + phi_m,
                    red_phase: spin_phase - phi_m,
                };
                return evolve(state, &tones, calib);
            }
            let levels = config.cutoff(mode) + config.guard_levels() + 1;
            let u = conditional_displacement(levels, alpha, spin_phase - calib.spin_phase_offset);
            state.apply_with_guard(&[mode], &[spin_factor, config.mode_factor(mode)], &u)
        }
        PulseOp::SimultaneousSidebands {
            spin,
            mode,
            omega_t,
            blue_phase,
            red_phase,
        } => {
            calib.sideband(spin, mode)?;
            let levels = config.cutoff(mode) + config.guard_levels() + 1;
            let off = calib.spin_phase_offset;
            let h = sideband_generator(levels, blue_phase - off, true)
                + sideband_generator(levels, red_phase - off, false);
            let u = hermitian_exp(&h, omega_t);
            state.apply_with_guard(&[mode], &[spin_factor, config.mode_factor(mode)], &u)
        }
    }
}

/// Ordered pulse list acting on an initial product state with every spin
/// down; `initial` lists the starting motional Fock occupations (vacuum when
/// absent).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    #[serde(default)]
    pub initial: Option<Vec<usize>>,
    pub ops: Vec<PulseOp>,
}

impl PulseSequence {
    pub fn new(ops: Vec<PulseOp>) -> Self {
        PulseSequence { initial: None, ops }
    }

    pub fn initial_state(&self, config: &HilbertConfig) -> Result<PureState> {
        match &self.initial {
            None => Ok(PureState::ground(config)),
            Some(occ) => PureState::basis(config, &vec![crate::fockspace::Spin::Down; config.num_spins()], occ),
        }
    }
}

pub fn run_sequence(seq: &PulseSequence, config: &HilbertConfig, calib: &RabiCalibration) -> Result<PureState> {
    let start = seq.initial_state(config)?;
    apply_sequence(&start, &seq.ops, calib)
}

pub fn apply_sequence(state: &PureState, ops: &[PulseOp], calib: &RabiCalibration) -> Result<PureState> {
    ops.iter().try_fold(state.clone(), |s, op| evolve(&s, op, calib))
}

/// Pulse angle that moves a fraction `1/3` of `|↓,0⟩` into `|↑,1⟩`.
pub fn third_transfer_angle() -> f64 {
    2.0 * (1.0 / 3f64.sqrt()).asin()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum NamedState {
    Vacuum,
    /// `(|00⟩ + e^{iφ}|11⟩)/√2`.
    #[serde(rename = "bell_00_11")]
    Bell0011 { phi: f64 },
    /// `(|01⟩ + e^{iφ}|10⟩)/√2`.
    #[serde(rename = "bell_01_10")]
    Bell0110 { phi: f64 },
    CoherentProduct {
        #[serde(with = "crate::serde_util::complex")]
        alpha1: C64,
        #[serde(with = "crate::serde_util::complex")]
        alpha2: C64,
    },
    /// `(e^{iφ₁}|100⟩ + e^{iφ₂}|010⟩ + e^{iφ₃}|001⟩)/√3`.
    WState { phi1: f64, phi2: f64, phi3: f64 },
}

impl NamedState {
    pub fn min_modes(&self) -> usize {
        match self {
            NamedState::Vacuum => 1,
            NamedState::Bell0011 { .. } | NamedState::Bell0110 { .. } | NamedState::CoherentProduct { .. } => 2,
            NamedState::WState { .. } => 3,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            NamedState::Vacuum => "vacuum",
            NamedState::Bell0011 { .. } => "bell_00_11",
            NamedState::Bell0110 { .. } => "bell_01_10",
            NamedState::CoherentProduct { .. } => "coherent_product",
            NamedState::WState { .. } => "w_state",
        }
    }

    /// Preparation sequence driven by spin 0. `spin_phase_offset` is the
    /// calibrated two-tone offset, used so that pushes act on `|+i⟩`.
    pub fn sequence(&self, spin_phase_offset: f64) -> PulseSequence {
        let bsb = |mode, angle, phase| PulseOp::Bsb {
            spin: 0,
            mode,
            angle,
            phase,
        };
        let flip = PulseOp::Carrier {
            spin: 0,
            angle: PI,
            phase: 0.0,
        };
        let ops = match *self {
            NamedState::Vacuum => vec![],
            NamedState::Bell0011 { phi } => vec![
                bsb(0, FRAC_PI_2, phi),
                PulseOp::Rsb {
                    spin: 0,
                    mode: 1,
                    angle: PI,
                    phase: PI,
                },
            ],
            NamedState::Bell0110 { phi } => vec![bsb(0, FRAC_PI_2, phi), bsb(1, PI, 0.0), flip],
            NamedState::CoherentProduct { alpha1, alpha2 } => {
                let push = |mode, alpha| PulseOp::SpinDepDisplace {
                    spin: 0,
                    mode,
                    alpha,
                    spin_phase: spin_phase_offset,
                    two_tone: false,
                };
                vec![
                    PulseOp::Carrier {
                        spin: 0,
                        angle: FRAC_PI_2,
                        phase: 0.0,
                    },
                    push(0, alpha1),
                    push(1, alpha2),
                    PulseOp::Carrier {
                        spin: 0,
                        angle: FRAC_PI_2,
                        phase: PI,
                    },
                ]
            }
            NamedState::WState { phi1, phi2, phi3 } => vec![
                bsb(0, third_transfer_angle(), phi1),
                bsb(1, FRAC_PI_2, phi2),
                bsb(2, PI, phi3),
                flip,
            ],
        };
        PulseSequence::new(ops)
    }

    /// The ideal motional state (no spins) on `config`'s modes.
    pub fn ideal_state(&self, config: &HilbertConfig) -> Result<PureState> {
        let motional = config.motional();
        self.check_modes(&motional)?;
        let d = motional.num_modes();
        let unit = |j: usize| {
            let mut v = vec![0; d];
            v[j] = 1;
            v
        };
        let mut both = vec![0; d];
        match *self {
            NamedState::Vacuum => Ok(PureState::ground(&motional)),
            NamedState::Bell0011 { phi } => {
                both[0] = 1;
                both[1] = 1;
                PureState::superposition(&motional, &[(c(1.0, 0.0), vec![0; d]), (C64::from_polar(1.0, phi), both)])
            }
            NamedState::Bell0110 { phi } => PureState::superposition(
                &motional,
                &[(c(1.0, 0.0), unit(1)), (C64::from_polar(1.0, phi), unit(0))],
            ),
            NamedState::CoherentProduct { alpha1, alpha2 } => {
                let mut alphas = vec![c(0.0, 0.0); d];
                alphas[0] = alpha1;
                alphas[1] = alpha2;
                PureState::coherent(&motional, &alphas)
            }
            NamedState::WState { phi1, phi2, phi3 } => PureState::superposition(
                &motional,
                &[
                    (C64::from_polar(1.0, phi1), unit(0)),
                    (C64::from_polar(1.0, phi2), unit(1)),
                    (C64::from_polar(1.0, phi3), unit(2)),
                ],
            ),
        }
    }

    fn check_modes(&self, config: &HilbertConfig) -> Result<()> {
        if config.num_modes() < self.min_modes() {
            return Err(Error::InvalidConfig(format!(
                "{} needs at least {} modes, configuration has {}",
                self.label(),
                self.min_modes(),
                config.num_modes()
            )));
        }
        Ok(())
    }
}

/// Runs the preparation sequence of `name` from the ground state of `config`
/// (which must carry at least one spin); the spin ends in `↓`.
pub fn prepare_named_state(name: &NamedState, config: &HilbertConfig, calib: &RabiCalibration) -> Result<PureState> {
    name.check_modes(config)?;
    if config.num_spins() == 0 && !matches!(name, NamedState::Vacuum) {
        return Err(Error::InvalidConfig("state preparation needs at least one spin".into()));
    }
    run_sequence(&name.sequence(calib.spin_phase_offset), config, calib)
}

/// Parses a state name as used on the command line, e.g. `bell_00_11`.
pub fn named_state_from_str(name: &str) -> Result<NamedState> {
    match name {
        "vacuum" => Ok(NamedState::Vacuum),
        "bell_00_11" => Ok(NamedState::Bell0011 { phi: 0.0 }),
        "bell_01_10" => Ok(NamedState::Bell0110 { phi: 0.0 }),
        "coherent_product" => Ok(NamedState::CoherentProduct {
            alpha1: c(0.56, 0.0),
            alpha2: c(0.53, 0.0),
        }),
        "w_state" => Ok(NamedState::WState {
            phi1: 0.0,
            phi2: 0.0,
            phi3: 0.0,
        }),
        other => Err(Error::UnknownState(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fockspace::{build_operator, ModeOperator, Spin};
    use proptest::prelude::*;

    fn cfg(modes: usize, cutoff: usize, spins: usize) -> HilbertConfig {
        HilbertConfig::new(modes, cutoff, spins).unwrap()
    }

    fn amp(psi: &PureState, spins: &[Spin], occ: &[usize]) -> C64 {
        psi.amplitude(spins, occ).unwrap()
    }

    const D: Spin = Spin::Down;
    const U: Spin = Spin::Up;

    #[test]
    fn bsb_half_pulse_from_vacuum() {
        let config = cfg(1, 3, 1);
        let cal = RabiCalibration::uniform(1, 1, 1.0);
        let op = PulseOp::Bsb {
            spin: 0,
            mode: 0,
            angle: FRAC_PI_2,
            phase: 0.3,
        };
        let psi = evolve(&PureState::ground(&config), &op, &cal).unwrap();
        assert!((amp(&psi, &[D], &[0]).norm_sqr() - 0.5).abs() < 1e-12);
        let up = amp(&psi, &[U], &[1]);
        assert!((up - C64::from_polar(0.5f64.sqrt(), 0.3)).norm() < 1e-12);
    }

    #[test]
    fn rsb_leaves_vacuum_alone() {
        let config = cfg(1, 3, 1);
        let cal = RabiCalibration::uniform(1, 1, 1.0);
        for angle in [0.3, 1.0, PI, 5.0] {
            let op = PulseOp::Rsb {
                spin: 0,
                mode: 0,
                angle,
                phase: 0.7,
            };
            let psi = evolve(&PureState::ground(&config), &op, &cal).unwrap();
            assert!((amp(&psi, &[D], &[0]) - c(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn rsb_pi_pulse_from_excited_spin() {
        let config = cfg(1, 3, 1);
        let cal = RabiCalibration::uniform(1, 1, 1.0);
        let start = PureState::basis(&config, &[U], &[0]).unwrap();
        let op = PulseOp::Rsb {
            spin: 0,
            mode: 0,
            angle: PI,
            phase: 0.4,
        };
        let psi = evolve(&start, &op, &cal).unwrap();
        assert!((amp(&psi, &[D], &[1]) - (-C64::from_polar(1.0, -0.4))).norm() < 1e-12);
    }

    #[test]
    fn carrier_half_pulse_gives_plus_i() {
        let config = cfg(1, 1, 1);
        let cal = RabiCalibration::uniform(1, 1, 1.0);
        let op = PulseOp::Carrier {
            spin: 0,
            angle: FRAC_PI_2,
            phase: 0.0,
        };
        let psi = evolve(&PureState::ground(&config), &op, &cal).unwrap();
        let s = 0.5f64.sqrt();
        assert!((amp(&psi, &[D], &[0]) - c(s, 0.0)).norm() < 1e-14);
        assert!((amp(&psi, &[U], &[0]) - c(0.0, s)).norm() < 1e-14);
    }

    #[test]
    fn spin_dependent_push_on_plus_i_is_displacement() {
        let config = cfg(1, 10, 1);
        let cal = RabiCalibration::uniform(1, 1, 1.0);
        let alpha = C64::from_polar(0.56, 0.9);
        let ops = [
            PulseOp::Carrier {
                spin: 0,
                angle: FRAC_PI_2,
                phase: 0.0,
            },
            PulseOp::SpinDepDisplace {
                spin: 0,
                mode: 0,
                alpha,
                spin_phase: 0.0,
                two_tone: false,
            },
        ];
        let psi = apply_sequence(&PureState::ground(&config), &ops, &cal).unwrap();
        // oracle: D(α) from the fockspace operator applied to vacuum
        let motional = config.motional();
        let dop = build_operator(&ModeOperator::Displacement { mode: 0, alpha }, &motional).unwrap();
        let expected = dop.column(0).into_owned();
        let s = 0.5f64.sqrt();
        for n in 0..=10 {
            assert!((amp(&psi, &[D], &[n]) - expected[n] * s).norm() < 1e-9);
            assert!((amp(&psi, &[U], &[n]) - expected[n] * c(0.0, s)).norm() < 1e-9);
        }
        let pops = psi.fock_populations();
        let mean: f64 = (0..=10).map(|n| n as f64 * pops.get(&[n])).sum();
        assert!((mean - 0.56 * 0.56).abs() < 1e-8);
    }

    #[test]
    fn bell_sequence_phase() {
        let config = cfg(2, 3, 1);
        let cal = RabiCalibration::uniform(1, 2, 1.0);
        let (p1, p2) = (0.4, 1.1);
        let seq = PulseSequence::new(vec![
            PulseOp::Bsb {
                spin: 0,
                mode: 0,
                angle: FRAC_PI_2,
                phase: p1,
            },
            PulseOp::Rsb {
                spin: 0,
                mode: 1,
                angle: PI,
                phase: p2,
            },
        ]);
        let psi = run_sequence(&seq, &config, &cal).unwrap().motional_part().unwrap();
        let target = PureState::superposition(
            &config.motional(),
            &[(c(1.0, 0.0), vec![0, 0]), (-C64::from_polar(1.0, p1 - p2), vec![1, 1])],
        )
        .unwrap();
        assert!(psi.overlap_probability(&target).unwrap() > 1.0 - 1e-9);
    }

    #[test]
    fn named_states_match_ideal() {
        let cal = RabiCalibration::uniform(1, 3, 1.0);
        let names = [
            NamedState::Bell0011 { phi: FRAC_PI_2 },
            NamedState::Bell0110 { phi: 0.8 },
            NamedState::CoherentProduct {
                alpha1: c(0.56, 0.0),
                alpha2: C64::from_polar(0.53, 0.3),
            },
            NamedState::WState {
                phi1: 0.0,
                phi2: 0.0,
                phi3: 0.0,
            },
            NamedState::WState {
                phi1: 0.2,
                phi2: 1.3,
                phi3: -0.5,
            },
        ];
        let config = cfg(3, 9, 1);
        for name in &names {
            let psi = prepare_named_state(name, &config, &cal).unwrap();
            let motional = psi.motional_part().unwrap();
            let ideal = name.ideal_state(&config).unwrap();
            let f = motional.overlap_probability(&ideal).unwrap();
            assert!(f > 1.0 - 1e-9, "{name:?}: {f}");
        }
    }

    #[test]
    fn w_state_populations_are_thirds() {
        let config = cfg(3, 2, 1);
        let cal = RabiCalibration::uniform(1, 3, 1.0);
        let w = NamedState::WState {
            phi1: 0.0,
            phi2: 0.0,
            phi3: 0.0,
        };
        let pops = prepare_named_state(&w, &config, &cal).unwrap().fock_populations();
        for k in [[1, 0, 0], [0, 1, 0], [0, 0, 1]] {
            assert!((pops.get(&k) - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bell_01_10_has_no_00_or_11() {
        let config = cfg(2, 3, 1);
        let cal = RabiCalibration::uniform(1, 2, 1.0);
        let psi = prepare_named_state(&NamedState::Bell0110 { phi: 0.5 }, &config, &cal).unwrap();
        let pops = psi.fock_populations();
        assert!(pops.get(&[0, 0]) < 1e-9);
        assert!(pops.get(&[1, 1]) < 1e-9);
    }

    #[test]
    fn coherent_product_respects_spin_phase_offset() {
        let config = cfg(2, 9, 1);
        let offset = 55f64.to_radians();
        let cal = RabiCalibration::uniform(1, 2, 1.0).with_spin_phase_offset(offset);
        let name = NamedState::CoherentProduct {
            alpha1: c(0.56, 0.0),
            alpha2: c(0.53, 0.0),
        };
        let psi = prepare_named_state(&name, &config, &cal).unwrap();
        let f = psi
            .motional_part()
            .unwrap()
            .overlap_probability(&name.ideal_state(&config).unwrap())
            .unwrap();
        assert!(f > 1.0 - 1e-9);
    }

    #[test]
    fn empty_sequence_is_identity() {
        let config = cfg(2, 2, 1);
        let cal = RabiCalibration::uniform(1, 2, 1.0);
        let psi = run_sequence(&PulseSequence::default(), &config, &cal).unwrap();
        assert_eq!(psi, PureState::ground(&config));
    }

    #[test]
    fn errors_for_bad_indices_and_coupling() {
        let config = cfg(2, 2, 1);
        let cal = RabiCalibration::readout(&[1.0]);
        let ground = PureState::ground(&config);
        let bad_mode = PulseOp::Bsb {
            spin: 0,
            mode: 2,
            angle: 1.0,
            phase: 0.0,
        };
        assert!(matches!(evolve(&ground, &bad_mode, &cal), Err(Error::IndexOutOfRange { .. })));
        let uncoupled = PulseOp::Bsb {
            spin: 0,
            mode: 1,
            angle: 1.0,
            phase: 0.0,
        };
        assert!(evolve(&ground, &uncoupled, &cal).is_err());
        let leak = PulseOp::SpinDepDisplace {
            spin: 0,
            mode: 0,
            alpha: c(2.0, 0.0),
            spin_phase: 0.0,
            two_tone: false,
        };
        assert!(matches!(
            evolve(&ground, &leak, &RabiCalibration::uniform(1, 2, 1.0)),
            Err(Error::TruncationLeak { .. })
        ));
        assert!(matches!(named_state_from_str("ghz"), Err(Error::UnknownState(_))));
    }

    #[test]
    fn two_tone_flag_matches_exact_displacement() {
        let config = cfg(1, 12, 1);
        let cal = RabiCalibration::uniform(1, 1, 1.0).with_spin_phase_offset(0.4);
        let start = apply_sequence(
            &PureState::ground(&config),
            &[PulseOp::Carrier {
                spin: 0,
                angle: 1.1,
                phase: 0.3,
            }],
            &cal,
        )
        .unwrap();
        let alpha = C64::from_polar(0.5, -0.7);
        let run = |two_tone| {
            let op = PulseOp::SpinDepDisplace {
                spin: 0,
                mode: 0,
                alpha,
                spin_phase: 1.2,
                two_tone,
            };
            evolve(&start, &op, &cal).unwrap()
        };
        assert!(run(true).overlap_probability(&run(false)).unwrap() > 1.0 - 1e-8);
    }

    proptest! {
        #[test]
        fn bsb_populations_match_rabi_formula(n in 0usize..5, theta in 0.0f64..6.0) {
            let config = cfg(1, 6, 1);
            let cal = RabiCalibration::uniform(1, 1, 2.0);
            let start = PureState::basis(&config, &[D], &[n]).unwrap();
            let op = PulseOp::Bsb { spin: 0, mode: 0, angle: theta, phase: 0.2 };
            let psi = evolve(&start, &op, &cal).unwrap();
            // Ωt = θ/2
            let expected = ((n as f64 + 1.0).sqrt() * theta / 2.0).cos().powi(2);
            prop_assert!((amp(&psi, &[D], &[n]).norm_sqr() - expected).abs() < 1e-8);
            prop_assert!((psi.norm_sqr() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn two_tone_factorization(phi_b in -3.0f64..3.0, phi_r in -3.0f64..3.0, omega_t in 0.0f64..0.7, carrier in 0.0f64..3.0) {
            let config = cfg(1, 9, 1);
            let cal = RabiCalibration::uniform(1, 1, 1.0);
            let start = evolve(&PureState::ground(&config), &PulseOp::Carrier { spin: 0, angle: carrier, phase: 0.5 }, &cal).unwrap();
            let tones = PulseOp::SimultaneousSidebands { spin: 0, mode: 0, omega_t, blue_phase: phi_b, red_phase: phi_r };
            let phi_s = (phi_b + phi_r) / 2.0;
            let phi_m = (phi_b - phi_r) / 2.0;
            let alpha = -I * C64::from_polar(omega_t, phi_m);
            let exact = PulseOp::SpinDepDisplace { spin: 0, mode: 0, alpha, spin_phase: phi_s, two_tone: false };
            let a = evolve(&start, &tones, &cal).unwrap();
            let b = evolve(&start, &exact, &cal).unwrap();
            prop_assert!(a.overlap_probability(&b).unwrap() > 1.0 - 1e-8);
        }

        #[test]
        fn evolution_is_unitary(angle in 0.0f64..7.0, phase in -4.0f64..4.0, which in 0usize..4) {
            let config = cfg(2, 4, 2);
            let cal = RabiCalibration::uniform(2, 2, 1.0);
            let prep = PulseSequence::new(vec![
                PulseOp::Carrier { spin: 1, angle: 1.0, phase: 0.0 },
                PulseOp::Bsb { spin: 0, mode: 1, angle: 1.3, phase: 0.2 },
            ]);
            let start = run_sequence(&prep, &config, &cal).unwrap();
            let op = match which {
                0 => PulseOp::Carrier { spin: 0, angle, phase },
                1 => PulseOp::Bsb { spin: 1, mode: 0, angle, phase },
                2 => PulseOp::Rsb { spin: 0, mode: 1, angle, phase },
                _ => PulseOp::SpinDepDisplace { spin: 1, mode: 0, alpha: C64::from_polar(0.4, phase), spin_phase: angle, two_tone: false },
            };
            let psi = evolve(&start, &op, &cal).unwrap();
            prop_assert!((psi.norm_sqr() - 1.0).abs() < 1e-9);
        }
    }
}
