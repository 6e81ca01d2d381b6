//! Closed-form least-squares estimators for the direct and cascaded channels.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::pilots::{PilotMatrix, UserPilots};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Ratio of smallest to largest singular value of `X X^H` below which the
/// pilot matrix is treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Which phase-II estimate produced the cascaded channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    LsDirect,
    LsPerColumn,
    LsJoint,
    ChannelNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub h_direct_hat: CVector,
    pub g_hat: CMatrix,
    pub method: EstimateMethod,
}

/// Factorized normal equations of one pilot matrix, reusable across received
/// signals: for a row `y` it returns `(y X^H (X X^H)^-1)^H = (X X^H)^-1 X y^H`.
#[derive(Debug, Clone)]
pub struct LsSolver {
    x: CMatrix,
    normal: Cholesky<C64, nalgebra::Dyn>,
}

impl LsSolver {
    pub fn new(x: &CMatrix) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() < x.nrows() {
            return Err(Error::RankDeficient { smallest: 0.0, largest: 0.0 });
        }
        let gram = x * x.adjoint();
        let sv = gram.singular_values();
        let largest = sv.max();
        let smallest = sv.min();
        if largest.is_nan() || largest <= 0.0 || smallest < RANK_TOLERANCE * largest {
            return Err(Error::RankDeficient { smallest, largest });
        }
        let normal = Cholesky::new(gram)
            .ok_or(Error::RankDeficient { smallest, largest })?;
        Ok(LsSolver { x: x.clone(), normal })
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn solve(&self, y: &CVector) -> Result<CVector> {
        if y.len() != self.x.ncols() {
            return Err(Error::dim(format!(
                "received {} samples for {} pilots",
                y.len(),
                self.x.ncols()
            )));
        }
        Ok(self.normal.solve(&(&self.x * y.conjugate())))
    }
}

/// LS estimate of the direct channel from the phase-I signal.
pub fn ls_direct(y_direct: &CVector, x: &CMatrix) -> Result<CVector> {
    LsSolver::new(x)?.solve(y_direct)
}

fn per_column(solver: &LsSolver, y_cols: &[CVector], h_direct_hat: &CVector) -> Result<CMatrix> {
    if h_direct_hat.len() != solver.rows() {
        return Err(Error::dim("direct estimate length differs from antenna count"));
    }
    if y_cols.is_empty() {
        return Err(Error::Empty("phase-II column list"));
    }
    let mut g = CMatrix::zeros(solver.rows(), y_cols.len());
    for (l, y) in y_cols.iter().enumerate() {
        g.set_column(l, &(solver.solve(y)? - h_direct_hat));
    }
    Ok(g)
}

/// Approach-1 cascaded estimate: column `l` is the LS estimate from the
/// element-`l` frame minus the direct estimate.
pub fn ls_cascaded_per_column(
    y_cols: &[CVector],
    x: &CMatrix,
    h_direct_hat: &CVector,
) -> Result<CMatrix> {
    per_column(&LsSolver::new(x)?, y_cols, h_direct_hat)
}

fn joint(solver: &LsSolver, y_joint: &CVector, h_direct_hat: &CVector) -> Result<CMatrix> {
    let m = h_direct_hat.len();
    let ml = solver.rows();
    if m == 0 || !ml.is_multiple_of(m) {
        return Err(Error::dim(format!("joint pilots of size {ml} do not fit M = {m}")));
    }
    let stacked = solver.solve(y_joint)?;
    Ok(CMatrix::from_fn(m, ml / m, |r, c| stacked[c * m + r] - h_direct_hat[r]))
}

/// Approach-2 cascaded estimate: LS on the all-on frame minus `1_L ⊗ ĥ_D`,
/// de-stacked column by column into M x L.
pub fn ls_cascaded_joint(
    y_joint: &CVector,
    x_bar: &CMatrix,
    h_direct_hat: &CVector,
) -> Result<CMatrix> {
    joint(&LsSolver::new(x_bar)?, y_joint, h_direct_hat)
}

/// LS estimators bound to the receiver's nominal pilots.
#[derive(Debug, Clone)]
pub struct LsEstimator {
    direct: LsSolver,
    joint: Option<LsSolver>,
}

impl LsEstimator {
    /// Uses `pilots.nominal()`, never the corrupted transmitted matrices.
    pub fn new(pilots: &PilotMatrix) -> Result<Self> {
        let nominal = pilots.nominal();
        let direct = LsSolver::new(&nominal.x)?;
        let joint = nominal.x_bar.as_ref().map(LsSolver::new).transpose()?;
        Ok(LsEstimator { direct, joint })
    }

    pub fn direct(&self, y_direct: &CVector) -> Result<CVector> {
        self.direct.solve(y_direct)
    }

    /// Direct plus cascaded estimate with the chosen phase-II approach.
    pub fn estimate(&self, rx: &UserPilots, method: EstimateMethod) -> Result<ChannelEstimate> {
        let h_direct_hat = self.direct(&rx.y_direct)?;
        let g_hat = match method {
            EstimateMethod::LsPerColumn | EstimateMethod::LsDirect => {
                per_column(&self.direct, &rx.y_cascaded_cols, &h_direct_hat)?
            }
            EstimateMethod::LsJoint => {
                let solver = self
                    .joint
                    .as_ref()
                    .ok_or_else(|| Error::config("joint LS needs the ML x ML pilot matrix"))?;
                let y = rx
                    .y_cascaded_joint
                    .as_ref()
                    .ok_or_else(|| Error::config("joint phase-II signal was not simulated"))?;
                joint(solver, y, &h_direct_hat)?
            }
            EstimateMethod::ChannelNet => {
                return Err(Error::config("ChannelNet is not a least-squares method"))
            }
        };
        Ok(ChannelEstimate { h_direct_hat, g_hat, method })
    }
}
