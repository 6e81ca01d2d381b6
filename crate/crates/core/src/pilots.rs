//! Orthogonal pilots and the two-phase pilot protocol.
//!
//! Received signals are row vectors in the model; they are stored here as
//! [`CVector`]s holding the row entries.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{reflect_vector, single_element_state, ChannelRealization, LisState, UserChannel};
use crate::config::DbConvention;
use crate::rng::complex_normal;
use crate::{CMatrix, CVector, Error, Result, C64};

/// Pilot matrices for phase I / approach-1 phase II (`x`, M x P) and for the
/// joint phase-II estimate (`x_bar`, ML x ML).
///
/// After [`corrupt_pilots`] the matrices hold what is actually transmitted
/// while [`PilotMatrix::nominal`] keeps the clean matrices known to the
/// receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    pub x: CMatrix,
    pub x_bar: Option<CMatrix>,
    /// Per-entry power of the clean pilots.
    pub symbol_power: f64,
    clean: Option<Box<PilotMatrix>>,
}

/// `rows x cols` block of a DFT matrix with unit-modulus entries.
fn dft_rows(rows: usize, cols: usize, amplitude: f64) -> CMatrix {
    CMatrix::from_fn(rows, cols, |r, c| {
        let phase = -2.0 * PI * ((r * c) % cols) as f64 / cols as f64;
        C64::from_polar(amplitude, phase)
    })
}

/// Deterministic discrete-Fourier pilots with unit-power entries.
///
/// `x` is `M x P` with `x x^H = P I`; when `l` is given, `x_bar` is the
/// `ML x ML` DFT matrix with `x_bar x_bar^H = ML I`.
pub fn make_pilots(m: usize, p: usize, l: Option<usize>) -> Result<PilotMatrix> {
    if m == 0 {
        return Err(Error::config("pilot matrix needs at least one antenna"));
    }
    if p < m {
        return Err(Error::config(format!("need P >= M for orthogonal pilots (P = {p}, M = {m})")));
    }
    let x_bar = match l {
        Some(0) => return Err(Error::config("joint pilots need at least one LIS element")),
        Some(l) => Some(dft_rows(m * l, m * l, 1.0)),
        None => None,
    };
    Ok(PilotMatrix { x: dft_rows(m, p, 1.0), x_bar, symbol_power: 1.0, clean: None })
}

impl PilotMatrix {
    /// Rescales every entry to the given per-entry power.
    pub fn with_symbol_power(mut self, symbol_power: f64) -> Result<Self> {
        if !(symbol_power > 0.0 && symbol_power.is_finite()) {
            return Err(Error::config("symbol_power must be positive"));
        }
        let s = C64::from((symbol_power / self.symbol_power).sqrt());
        self.x *= s;
        if let Some(xb) = self.x_bar.as_mut() {
            *xb *= s;
        }
        self.symbol_power = symbol_power;
        self.clean = None;
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// The clean pilots known at the receiver.
    pub fn nominal(&self) -> &PilotMatrix {
        self.clean.as_deref().unwrap_or(self)
    }

    pub fn is_corrupted(&self) -> bool {
        self.clean.is_some()
    }

    pub fn x_bar(&self) -> Result<&CMatrix> {
        self.x_bar
            .as_ref()
            .ok_or_else(|| Error::config("pilot set has no joint (ML x ML) matrix"))
    }
}

/// Adds CN(0, σ_X²) to every transmitted pilot entry, with σ_X² solved from
/// the pilot SNR for the per-entry power. An infinite SNR leaves the pilots
/// untouched. The clean matrices stay available through `nominal()`.
pub fn corrupt_pilots<R: Rng + ?Sized>(
    pilots: &PilotMatrix,
    snr_x_db: f64,
    convention: DbConvention,
    rng: &mut R,
) -> Result<PilotMatrix> {
    if snr_x_db.is_nan() || snr_x_db == f64::NEG_INFINITY {
        return Err(Error::config("pilot SNR must be a number or +inf"));
    }
    let clean = pilots.nominal().clone();
    if snr_x_db == f64::INFINITY {
        return Ok(clean);
    }
    let var = convention.variance(clean.symbol_power, snr_x_db);
    let mut out = clean.clone();
    out.x.iter_mut().for_each(|z| *z += complex_normal(rng, var));
    if let Some(xb) = out.x_bar.as_mut() {
        xb.iter_mut().for_each(|z| *z += complex_normal(rng, var));
    }
    out.clean = Some(Box::new(clean));
    Ok(out)
}

/// `h^H x + n` as a row, with n ~ CN(0, noise_power I).
fn transmit<R: Rng + ?Sized>(h: &CVector, x: &CMatrix, noise_power: f64, rng: &mut R) -> CVector {
    let mut y = x.tr_mul(&h.conjugate());
    if noise_power > 0.0 {
        y.iter_mut().for_each(|z| *z += complex_normal(rng, noise_power));
    }
    y
}

fn check_user(user: &UserChannel, pilots: &PilotMatrix) -> Result<()> {
    if user.m() != pilots.m() || user.g_cascaded.nrows() != pilots.m() {
        return Err(Error::dim(format!(
            "channel has {} antennas but pilots have {} rows",
            user.m(),
            pilots.m()
        )));
    }
    Ok(())
}

fn check_noise(noise_power: f64) -> Result<()> {
    if !(noise_power >= 0.0 && noise_power.is_finite()) {
        return Err(Error::config("noise power must be finite and nonnegative"));
    }
    Ok(())
}

/// Pilot reception of one user under an arbitrary LIS state:
/// `y = (h_D + G ψ)^H X + n`.
pub fn receive<R: Rng + ?Sized>(
    user: &UserChannel,
    lis: &LisState,
    pilots: &PilotMatrix,
    noise_power: f64,
    rng: &mut R,
) -> Result<CVector> {
    check_user(user, pilots)?;
    check_noise(noise_power)?;
    if lis.len() != user.l() {
        return Err(Error::dim(format!(
            "LIS state has {} elements, channel has {}",
            lis.len(),
            user.l()
        )));
    }
    let psi = reflect_vector(lis);
    Ok(transmit(&user.effective(&psi), &pilots.x, noise_power, rng))
}

/// Phase II, approach 1: element `l` ON, the others OFF.
pub fn receive_element<R: Rng + ?Sized>(
    user: &UserChannel,
    l: usize,
    pilots: &PilotMatrix,
    noise_power: f64,
    eps_on: f64,
    eps_off: f64,
    rng: &mut R,
) -> Result<CVector> {
    let state = single_element_state(l, user.l(), eps_on, eps_off)?;
    receive(user, &state, pilots, noise_power, rng)
}

/// Phase II, approach 1, for every element in order. Noise is redrawn per
/// element.
pub fn receive_all_elements<R: Rng + ?Sized>(
    user: &UserChannel,
    pilots: &PilotMatrix,
    noise_power: f64,
    eps_on: f64,
    eps_off: f64,
    rng: &mut R,
) -> Result<Vec<CVector>> {
    (0..user.l())
        .map(|l| receive_element(user, l, pilots, noise_power, eps_on, eps_off, rng))
        .collect()
}

/// Phase II, approach 2: all elements ON, `ȳ = (1_L ⊗ h_D + (1 - ε₁) ḡ)^H X̄ + n̄`
/// where `ḡ` stacks the columns of `G`.
pub fn receive_joint<R: Rng + ?Sized>(
    user: &UserChannel,
    pilots: &PilotMatrix,
    noise_power: f64,
    eps_on: f64,
    rng: &mut R,
) -> Result<CVector> {
    check_user(user, pilots)?;
    check_noise(noise_power)?;
    let x_bar = pilots.x_bar()?;
    let (m, l) = (user.m(), user.l());
    if x_bar.nrows() != m * l {
        return Err(Error::dim(format!(
            "joint pilots have {} rows, expected M L = {}",
            x_bar.nrows(),
            m * l
        )));
    }
    if !(0.0..=1.0).contains(&eps_on) {
        return Err(Error::config("eps_on must lie in [0, 1]"));
    }
    let on = C64::from(1.0 - eps_on);
    let stacked = CVector::from_iterator(
        m * l,
        (0..l).flat_map(|c| (0..m).map(move |r| (c, r))).map(|(c, r)| {
            user.h_direct[r] + on * user.g_cascaded[(r, c)]
        }),
    );
    Ok(transmit(&stacked, x_bar, noise_power, rng))
}

/// Phase I for every user: `lis` is normally [`LisState::all_off`].
pub fn phase1_receive<R: Rng + ?Sized>(
    ch: &ChannelRealization,
    lis: &LisState,
    pilots: &PilotMatrix,
    noise_power: f64,
    rng: &mut R,
) -> Result<Vec<CVector>> {
    ch.users.iter().map(|u| receive(u, lis, pilots, noise_power, rng)).collect()
}

/// Phase II, approach 1, element `l`, for every user.
pub fn phase2_element_receive<R: Rng + ?Sized>(
    ch: &ChannelRealization,
    l: usize,
    pilots: &PilotMatrix,
    noise_power: f64,
    eps_on: f64,
    eps_off: f64,
    rng: &mut R,
) -> Result<Vec<CVector>> {
    ch.users
        .iter()
        .map(|u| receive_element(u, l, pilots, noise_power, eps_on, eps_off, rng))
        .collect()
}

/// Phase II, approach 2, for every user.
pub fn phase2_joint_receive<R: Rng + ?Sized>(
    ch: &ChannelRealization,
    pilots: &PilotMatrix,
    noise_power: f64,
    eps_on: f64,
    rng: &mut R,
) -> Result<Vec<CVector>> {
    ch.users.iter().map(|u| receive_joint(u, pilots, noise_power, eps_on, rng)).collect()
}

/// Switching imperfections and noise applied to one protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub noise_power: f64,
    #[serde(default)]
    pub eps_on: f64,
    #[serde(default)]
    pub eps_off: f64,
    /// Also run the all-on joint phase II.
    #[serde(default = "yes")]
    pub joint: bool,
}

fn yes() -> bool {
    true
}

impl ProtocolParams {
    pub fn noiseless() -> Self {
        ProtocolParams { noise_power: 0.0, eps_on: 0.0, eps_off: 0.0, joint: true }
    }
}

/// Everything one user receives during both phases.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPilots {
    /// Phase I, length P.
    pub y_direct: CVector,
    /// Phase II approach 1: L rows of length P.
    pub y_cascaded_cols: Vec<CVector>,
    /// Phase II approach 2: length ML.
    pub y_cascaded_joint: Option<CVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedPilots {
    pub users: Vec<UserPilots>,
    pub snr_db: f64,
}

/// Runs the full protocol for one user. Noise draws follow the order
/// phase I, elements 0..L, joint.
pub fn run_protocol_user<R: Rng + ?Sized>(
    user: &UserChannel,
    pilots: &PilotMatrix,
    params: &ProtocolParams,
    rng: &mut R,
) -> Result<UserPilots> {
    let off = LisState::all_off(user.l(), params.eps_off)?;
    let y_direct = receive(user, &off, pilots, params.noise_power, rng)?;
    let y_cascaded_cols = receive_all_elements(
        user,
        pilots,
        params.noise_power,
        params.eps_on,
        params.eps_off,
        rng,
    )?;
    let y_cascaded_joint = if params.joint {
        Some(receive_joint(user, pilots, params.noise_power, params.eps_on, rng)?)
    } else {
        None
    };
    Ok(UserPilots { y_direct, y_cascaded_cols, y_cascaded_joint })
}

/// Runs the full protocol for every user of a realization.
pub fn run_protocol<R: Rng + ?Sized>(
    ch: &ChannelRealization,
    pilots: &PilotMatrix,
    params: &ProtocolParams,
    rng: &mut R,
) -> Result<ReceivedPilots> {
    let users = ch
        .users
        .iter()
        .map(|u| run_protocol_user(u, pilots, params, rng))
        .collect::<Result<_>>()?;
    let snr_db = if params.noise_power == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (pilots.symbol_power / params.noise_power).log10()
    };
    Ok(ReceivedPilots { users, snr_db })
}
