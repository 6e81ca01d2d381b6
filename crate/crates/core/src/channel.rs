//! Geometric channel model: steering vectors, direct / LIS-user / BS-LIS
//! channels, the cascaded channel and LIS reflect states.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::rng::{complex_normal, standard_normal};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Unit-norm response of a half-wavelength uniform linear array.
///
/// Entry `n` is `exp(j n π sin θ) / sqrt(n_elements)`.
pub fn steering_vector(n_elements: usize, theta: f64) -> CVector {
    let scale = 1.0 / (n_elements as f64).sqrt();
    let omega = PI * theta.sin();
    CVector::from_iterator(
        n_elements,
        (0..n_elements).map(|n| C64::from_polar(scale, n as f64 * omega)),
    )
}

/// Gains and angles of the paths of one user-side channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub gains: Vec<C64>,
    pub angles: Vec<f64>,
}

impl PathParams {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    fn draw<R: Rng + ?Sized>(n_paths: usize, range: [f64; 2], rng: &mut R) -> Self {
        let mut gains = Vec::with_capacity(n_paths);
        let mut angles = Vec::with_capacity(n_paths);
        for _ in 0..n_paths {
            gains.push(complex_normal(rng, 1.0));
            angles.push(uniform_angle(range, rng));
        }
        PathParams { gains, angles }
    }
}

/// Paths of the BS-LIS channel: gain, departure angle at the BS and arrival
/// angle at the LIS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsLisPaths {
    pub gains: Vec<C64>,
    pub bs_angles: Vec<f64>,
    pub lis_angles: Vec<f64>,
}

/// Every path parameter behind a [`ChannelRealization`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPaths {
    /// Direct BS-user paths, one entry per user.
    pub direct: Vec<PathParams>,
    /// LIS-user paths, one entry per user.
    pub lis_user: Vec<PathParams>,
    pub bs_lis: BsLisPaths,
}

fn uniform_angle<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    let [lo, hi] = range;
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// The two channels a user's estimator targets.
#[derive(Debug, Clone, PartialEq)]
pub struct UserChannel {
    /// `h_D,k`, length M.
    pub h_direct: CVector,
    /// `G_k`, M x L.
    pub g_cascaded: CMatrix,
}

impl UserChannel {
    pub fn m(&self) -> usize {
        self.h_direct.len()
    }

    pub fn l(&self) -> usize {
        self.g_cascaded.ncols()
    }

    /// Effective BS-to-user channel `h_D + G ψ` for a reflect vector `ψ`.
    pub fn effective(&self, psi: &CVector) -> CVector {
        &self.h_direct + &self.g_cascaded * psi
    }
}

/// One draw of all channels for all users.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub users: Vec<UserChannel>,
    /// `h_A,k`, length L, per user.
    pub h_lis_user: Vec<CVector>,
    /// `H`, M x L.
    pub h_bs_lis: CMatrix,
    pub paths: ChannelPaths,
}

impl ChannelRealization {
    /// Builds all channel matrices from explicit path parameters.
    pub fn synthesize(m: usize, l: usize, paths: ChannelPaths) -> Result<Self> {
        if paths.direct.len() != paths.lis_user.len() {
            return Err(Error::dim("direct and LIS-user path lists differ in user count"));
        }
        let bs = &paths.bs_lis;
        if bs.gains.len() != bs.bs_angles.len() || bs.gains.len() != bs.lis_angles.len() {
            return Err(Error::dim("BS-LIS path lists differ in length"));
        }
        let users_paths = paths.direct.iter().chain(&paths.lis_user);
        if users_paths.into_iter().any(|p| p.gains.len() != p.angles.len() || p.is_empty()) {
            return Err(Error::dim("user path gains and angles differ in length"));
        }

        let n_h = bs.gains.len() as f64;
        let mut h_bs_lis = CMatrix::zeros(m, l);
        for ((&alpha, &t_bs), &t_lis) in bs.gains.iter().zip(&bs.bs_angles).zip(&bs.lis_angles) {
            let a_bs = steering_vector(m, t_bs);
            let a_lis = steering_vector(l, t_lis);
            h_bs_lis += (a_bs * a_lis.adjoint()) * alpha;
        }
        h_bs_lis *= C64::from((m as f64 * l as f64 / n_h).sqrt());

        let mut users = Vec::with_capacity(paths.direct.len());
        let mut h_lis_user = Vec::with_capacity(paths.direct.len());
        for (direct, lis) in paths.direct.iter().zip(&paths.lis_user) {
            let h_direct = geometric_vector(m, direct);
            let h_a = geometric_vector(l, lis);
            let g_cascaded = cascade(&h_bs_lis, &h_a);
            users.push(UserChannel { h_direct, g_cascaded });
            h_lis_user.push(h_a);
        }
        Ok(ChannelRealization { users, h_lis_user, h_bs_lis, paths })
    }

    pub fn k(&self) -> usize {
        self.users.len()
    }

    pub fn m(&self) -> usize {
        self.h_bs_lis.nrows()
    }

    pub fn l(&self) -> usize {
        self.h_bs_lis.ncols()
    }

    /// LIS-reflected component `H diag(ψ) h_A,k`, evaluated without `G_k`.
    pub fn reflected(&self, user: usize, psi: &CVector) -> CVector {
        let weighted = psi.component_mul(&self.h_lis_user[user]);
        &self.h_bs_lis * weighted
    }
}

/// `sqrt(n / N) Σ α a(θ)` over the paths.
fn geometric_vector(n: usize, paths: &PathParams) -> CVector {
    let mut v = CVector::zeros(n);
    for (&alpha, &theta) in paths.gains.iter().zip(&paths.angles) {
        v += steering_vector(n, theta) * alpha;
    }
    v * C64::from((n as f64 / paths.len() as f64).sqrt())
}

/// `H diag(h_A)`: scales column `l` of `H` by `h_A[l]`.
fn cascade(h_bs_lis: &CMatrix, h_a: &CVector) -> CMatrix {
    let mut g = h_bs_lis.clone();
    for (mut col, &s) in g.column_iter_mut().zip(h_a.iter()) {
        col *= s;
    }
    g
}

/// Draws path parameters and synthesizes every channel of the scenario.
///
/// Gains are CN(0, 1); angles are uniform on `config.angle_range`. The draw
/// order is: BS-LIS paths, then for each user its direct paths followed by
/// its LIS-user paths.
pub fn draw_channels<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<ChannelRealization> {
    config.validate()?;
    let range = config.angle_range;
    let mut bs = BsLisPaths {
        gains: Vec::with_capacity(config.n_h),
        bs_angles: Vec::with_capacity(config.n_h),
        lis_angles: Vec::with_capacity(config.n_h),
    };
    for _ in 0..config.n_h {
        bs.gains.push(complex_normal(rng, 1.0));
        bs.bs_angles.push(uniform_angle(range, rng));
        bs.lis_angles.push(uniform_angle(range, rng));
    }
    let mut direct = Vec::with_capacity(config.k);
    let mut lis_user = Vec::with_capacity(config.k);
    for _ in 0..config.k {
        direct.push(PathParams::draw(config.n_d, range, rng));
        lis_user.push(PathParams::draw(config.n_a, range, rng));
    }
    ChannelRealization::synthesize(
        config.m,
        config.l,
        ChannelPaths { direct, lis_user, bs_lis: bs },
    )
}

/// Adds independent N(0, σ_θ²) offsets to every user-side arrival angle
/// (direct and LIS-user paths). Gains and the BS-LIS paths are untouched.
///
/// Offsets are drawn as `σ_θ · z` with standard normal `z`, so the same
/// generator state yields offsets proportional to `σ_θ`.
pub fn perturb_angles<R: Rng + ?Sized>(
    paths: &ChannelPaths,
    sigma_theta: f64,
    rng: &mut R,
) -> Result<ChannelPaths> {
    if !(sigma_theta >= 0.0 && sigma_theta.is_finite()) {
        return Err(Error::config("angle mismatch deviation must be finite and nonnegative"));
    }
    let mut out = paths.clone();
    for (direct, lis) in out.direct.iter_mut().zip(out.lis_user.iter_mut()) {
        for theta in direct.angles.iter_mut().chain(lis.angles.iter_mut()) {
            *theta += sigma_theta * standard_normal(rng);
        }
    }
    Ok(out)
}

/// Amplitude and phase state of every LIS element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LisState {
    /// On/off amplitudes β_l.
    pub beta: Vec<f64>,
    /// Phase shifts φ_l in [0, 2π).
    pub phi: Vec<f64>,
    /// Amplitude deficit ε₁ of an ON element.
    pub eps_on: f64,
    /// Amplitude leakage ε₀ of an OFF element.
    pub eps_off: f64,
}

impl LisState {
    /// Sets element states from ON flags with zero phase.
    pub fn from_flags(on: &[bool], eps_on: f64, eps_off: f64) -> Result<Self> {
        check_eps(eps_on, eps_off)?;
        let beta = on
            .iter()
            .map(|&is_on| if is_on { 1.0 - eps_on } else { eps_off })
            .collect();
        Ok(LisState { beta, phi: vec![0.0; on.len()], eps_on, eps_off })
    }

    pub fn all_off(l: usize, eps_off: f64) -> Result<Self> {
        Self::from_flags(&vec![false; l], 0.0, eps_off)
    }

    pub fn all_on(l: usize, eps_on: f64) -> Result<Self> {
        Self::from_flags(&vec![true; l], eps_on, 0.0)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Overrides the phase of every element, wrapping into [0, 2π).
    pub fn with_phases(mut self, phi: &[f64]) -> Result<Self> {
        if phi.len() != self.beta.len() {
            return Err(Error::dim(format!(
                "{} phases for {} elements",
                phi.len(),
                self.beta.len()
            )));
        }
        self.phi = phi.iter().map(|p| p.rem_euclid(2.0 * PI)).collect();
        Ok(self)
    }
}

fn check_eps(eps_on: f64, eps_off: f64) -> Result<()> {
    if !(eps_on >= 0.0 && eps_off >= 0.0 && 1.0 - eps_on >= eps_off) {
        return Err(Error::config(format!(
            "switching imperfections need eps >= 0 and 1 - eps_on >= eps_off (got {eps_on}, {eps_off})"
        )));
    }
    Ok(())
}

/// State with only element `l` ON (zero phase) and every other element OFF.
pub fn single_element_state(l: usize, n_elements: usize, eps_on: f64, eps_off: f64) -> Result<LisState> {
    if l >= n_elements {
        return Err(Error::IndexOutOfRange { index: l, len: n_elements });
    }
    let mut flags = vec![false; n_elements];
    flags[l] = true;
    LisState::from_flags(&flags, eps_on, eps_off)
}

/// Reflect vector ψ with `ψ_l = β_l exp(j φ_l)`.
pub fn reflect_vector(state: &LisState) -> CVector {
    CVector::from_iterator(
        state.beta.len(),
        state.beta.iter().zip(&state.phi).map(|(&b, &p)| C64::from_polar(b, p)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn steering_vector_examples() {
        let v = steering_vector(4, 0.0);
        assert!(v.iter().all(|&z| close(z, C64::new(0.5, 0.0), 1e-15)));

        let s = 1.0 / 2f64.sqrt();
        let v = steering_vector(2, PI / 2.0);
        assert!(close(v[0], C64::new(s, 0.0), 1e-15));
        assert!(close(v[1], C64::new(-s, 0.0), 1e-15));

        let v = steering_vector(2, PI / 6.0);
        assert!(close(v[1], C64::new(0.0, s), 1e-15));
    }

    fn single_path(gain: C64, theta: f64) -> PathParams {
        PathParams { gains: vec![gain], angles: vec![theta] }
    }

    #[test]
    fn single_path_broadside_gives_all_ones() {
        let paths = ChannelPaths {
            direct: vec![single_path(C64::new(1.0, 0.0), 0.0)],
            lis_user: vec![single_path(C64::new(1.0, 0.0), 0.3)],
            bs_lis: BsLisPaths {
                gains: vec![C64::new(1.0, 0.0)],
                bs_angles: vec![0.1],
                lis_angles: vec![-0.2],
            },
        };
        let ch = ChannelRealization::synthesize(9, 3, paths).unwrap();
        for z in ch.users[0].h_direct.iter() {
            assert!(close(*z, C64::new(1.0, 0.0), 1e-14));
        }
    }

    #[test]
    fn draw_is_deterministic_and_cascade_holds() {
        let cfg = ScenarioConfig::desk();
        let a = draw_channels(&cfg, &mut seeded(11)).unwrap();
        let b = draw_channels(&cfg, &mut seeded(11)).unwrap();
        assert_eq!(a, b);
        let c = draw_channels(&cfg, &mut seeded(12)).unwrap();
        assert_ne!(a, c);

        for (k, user) in a.users.iter().enumerate() {
            let expected = &a.h_bs_lis * CMatrix::from_diagonal(&a.h_lis_user[k]);
            let rel = (&user.g_cascaded - &expected).norm() / expected.norm();
            assert!(rel < 1e-12);
        }
        assert_eq!(a.users[0].h_direct.len(), 16);
        assert_eq!(a.users[0].g_cascaded.shape(), (16, 8));
        assert!(a
            .paths
            .direct
            .iter()
            .flat_map(|p| &p.angles)
            .all(|t| (-PI..PI).contains(t)));
    }

    #[test]
    fn reflect_vector_examples() {
        let psi = reflect_vector(&LisState::all_on(3, 0.0).unwrap());
        assert!(psi.iter().all(|&z| close(z, C64::new(1.0, 0.0), 0.0)));

        let psi = reflect_vector(&LisState::all_off(3, 0.0).unwrap());
        assert!(psi.iter().all(|&z| z == C64::new(0.0, 0.0)));

        let state = LisState::from_flags(&[true, false, false], 0.1, 0.01)
            .unwrap()
            .with_phases(&[PI, 0.0, 0.0])
            .unwrap();
        let psi = reflect_vector(&state);
        assert!(close(psi[0], C64::new(-0.9, 0.0), 1e-15));
        assert!(close(psi[1], C64::new(0.01, 0.0), 0.0));
    }

    #[test]
    fn single_element_state_examples() {
        let psi = reflect_vector(&single_element_state(0, 3, 0.0, 0.0).unwrap());
        assert_eq!(psi.as_slice(), &[C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]);

        let psi = reflect_vector(&single_element_state(2, 3, 0.1, 0.001).unwrap());
        assert!(close(psi[0], C64::new(0.001, 0.0), 1e-18));
        assert!(close(psi[1], C64::new(0.001, 0.0), 1e-18));
        assert!(close(psi[2], C64::new(0.9, 0.0), 1e-15));

        assert!(matches!(
            single_element_state(5, 3, 0.0, 0.0),
            Err(Error::IndexOutOfRange { index: 5, len: 3 })
        ));
        assert!(single_element_state(0, 3, 0.6, 0.5).is_err());
    }

    #[test]
    fn perturbation_keeps_gains() {
        let cfg = ScenarioConfig::desk();
        let ch = draw_channels(&cfg, &mut seeded(5)).unwrap();
        let same = perturb_angles(&ch.paths, 0.0, &mut seeded(1)).unwrap();
        assert_eq!(same, ch.paths);

        let moved = perturb_angles(&ch.paths, 0.05, &mut seeded(1)).unwrap();
        assert_eq!(moved.bs_lis, ch.paths.bs_lis);
        for (a, b) in moved.direct.iter().zip(&ch.paths.direct) {
            assert_eq!(a.gains, b.gains);
            assert_ne!(a.angles, b.angles);
        }
        assert!(perturb_angles(&ch.paths, -1.0, &mut seeded(1)).is_err());
    }
}
