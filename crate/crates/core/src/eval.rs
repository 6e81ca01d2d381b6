//! NMSE and the Monte Carlo robustness sweeps (SNR, pilot SNR, angle
//! mismatch, switching imperfection).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{draw_channels, perturb_angles, ChannelRealization};
use crate::config::{noise_power_for_snr, snr_db, ScenarioConfig};
use crate::dataset::{realization, CascadedInput, SampleKind};
use crate::ls::{EstimateMethod, LsEstimator};
use crate::nn::TrainedNet;
use crate::pilots::{corrupt_pilots, make_pilots, run_protocol_user, PilotMatrix, ProtocolParams, UserPilots};
use crate::rng::{derived, stream};
use crate::{CMatrix, Error, Result};

/// `‖truth − estimate‖_F / ‖truth‖_F`, squared when `squared` is set.
pub fn nmse_ratio(truth: &CMatrix, estimate: &CMatrix, squared: bool) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(Error::dim(format!("truth is {:?}, estimate is {:?}", truth.shape(), estimate.shape())));
    }
    let t = truth.norm();
    if t == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let r = (truth - estimate).norm() / t;
    Ok(if squared { r * r } else { r })
}

/// Mean over trials of [`nmse_ratio`] against a fixed truth.
pub fn nmse(truth: &CMatrix, estimates: &[CMatrix], squared: bool) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Empty("trial estimates"));
    }
    let mut sum = 0.0;
    for e in estimates {
        sum += nmse_ratio(truth, e, squared)?;
    }
    Ok(sum / estimates.len() as f64)
}

/// `10 log10(x)`.
pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Grid is the received SNR in dB.
    Snr,
    /// Grid is the pilot SNR_X in dB; the received SNR is fixed.
    PilotSnr,
    /// Grid is the angle standard deviation in degrees.
    AngleMismatch,
    /// Grid is the switching imperfection, used for both ε₀ and ε₁.
    Epsilon,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Snr => "snr",
            SweepKind::PilotSnr => "pilot_snr",
            SweepKind::AngleMismatch => "angle_mismatch",
            SweepKind::Epsilon => "epsilon",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    LsPerColumn,
    LsJoint,
    Channelnet,
}

impl EstimatorId {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorId::LsPerColumn => "ls_per_column",
            EstimatorId::LsJoint => "ls_joint",
            EstimatorId::Channelnet => "channelnet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Direct,
    Cascaded,
}

fn default_snr() -> Vec<f64> {
    vec![10.0]
}

fn default_estimators() -> Vec<EstimatorId> {
    vec![EstimatorId::LsPerColumn, EstimatorId::LsJoint]
}

/// One Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    #[serde(with = "snr_db::list")]
    pub grid: Vec<f64>,
    /// J.
    pub trials: usize,
    /// Received SNR(s) in dB for every kind but `snr`. With several values
    /// trial `j` uses entry `j mod len`.
    #[serde(default = "default_snr", with = "snr_db::list")]
    pub snr_db: Vec<f64>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorId>,
    #[serde(default)]
    pub seed: u64,
    /// Draw a new channel for each trial instead of one per sweep.
    #[serde(default)]
    pub fresh_channel_per_trial: bool,
    /// Trial `j` uses realization `j mod V` of the training generator
    /// (seeded by the scenario seed). Overrides the two modes above.
    #[serde(default)]
    pub realization_pool: Option<usize>,
    #[serde(default)]
    pub squared_nmse: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config("sweep grid is empty"));
        }
        if self.trials == 0 {
            return Err(Error::config("a sweep needs at least one trial"));
        }
        if self.estimators.is_empty() {
            return Err(Error::config("no estimators listed"));
        }
        if self.kind != SweepKind::Snr && self.snr_db.is_empty() {
            return Err(Error::config("snr_db must list at least one value"));
        }
        if self.realization_pool == Some(0) {
            return Err(Error::config("realization_pool must be at least 1"));
        }
        let bad = |v: &f64| v.is_nan() || *v == f64::NEG_INFINITY;
        if self.grid.iter().chain(&self.snr_db).any(bad) {
            return Err(Error::config("grid and SNR values must be numbers or +inf"));
        }
        match self.kind {
            SweepKind::AngleMismatch if self.grid.iter().any(|g| !g.is_finite() || *g < 0.0) => {
                Err(Error::config("angle standard deviations must be finite and nonnegative"))
            }
            SweepKind::Epsilon if self.grid.iter().any(|g| !(0.0..=1.0).contains(g)) => {
                Err(Error::config("switching imperfections must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Trained networks available to the `channelnet` estimator. Either may be
/// missing; rows are produced only for the targets that have a network.
#[derive(Debug, Clone, Copy, Default)]
pub struct Nets<'a> {
    pub direct: Option<&'a TrainedNet>,
    pub cascaded: Option<&'a TrainedNet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(with = "snr_db")]
    pub grid_value: f64,
    pub estimator: EstimatorId,
    pub target: Target,
    /// Mean over users of the per-user NMSE.
    pub nmse: f64,
    #[serde(with = "snr_db")]
    pub nmse_db: f64,
    pub trials: usize,
    pub per_user: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub scenario: ScenarioConfig,
    pub rows: Vec<SweepRow>,
    pub config_hash: String,
    pub tool_version: String,
}

/// First 12 hex digits of the SHA-256 of the canonical JSON of the inputs.
pub fn config_hash(spec: &SweepSpec, scenario: &ScenarioConfig) -> Result<String> {
    let bytes = serde_json::to_vec(&(spec, scenario))?;
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(12);
    for b in &digest[..6] {
        write!(out, "{b:02x}").expect("writing to a String");
    }
    Ok(out)
}

struct TrialError {
    /// `[row][user]` NMSE of one trial, rows in output order.
    rows: Vec<Vec<f64>>,
}

fn row_plan(spec: &SweepSpec, nets: &Nets) -> Result<Vec<(EstimatorId, Target)>> {
    let mut plan = Vec::new();
    for &e in &spec.estimators {
        match e {
            EstimatorId::Channelnet => {
                if nets.direct.is_none() && nets.cascaded.is_none() {
                    return Err(Error::MissingNetwork(
                        "the channelnet estimator needs at least one trained network".into(),
                    ));
                }
                if nets.direct.is_some() {
                    plan.push((e, Target::Direct));
                }
                if nets.cascaded.is_some() {
                    plan.push((e, Target::Cascaded));
                }
            }
            _ => {
                plan.push((e, Target::Direct));
                plan.push((e, Target::Cascaded));
            }
        }
    }
    Ok(plan)
}

fn check_net(net: &TrainedNet, kind: SampleKind, scenario: &ScenarioConfig) -> Result<()> {
    if net.kind() != kind {
        return Err(Error::config(format!("expected a {kind:?} network, got {:?}", net.kind())));
    }
    if (net.layout.m, net.layout.l) != (scenario.m, scenario.l) {
        return Err(Error::config(format!(
            "network was trained for M={}, L={} but the scenario has M={}, L={}",
            net.layout.m, net.layout.l, scenario.m, scenario.l
        )));
    }
    Ok(())
}

struct Context<'a> {
    spec: &'a SweepSpec,
    scenario: &'a ScenarioConfig,
    nets: Nets<'a>,
    pilots: PilotMatrix,
    ls: LsEstimator,
    plan: Vec<(EstimatorId, Target)>,
    needs_joint: bool,
    shared: Option<ChannelRealization>,
}

impl Context<'_> {
    fn channel(&self, j: usize, grid_value: f64) -> Result<ChannelRealization> {
        let base = if let Some(pool) = self.spec.realization_pool {
            realization(self.scenario, self.scenario.seed, (j % pool) as u64)?
        } else if let Some(shared) = &self.shared {
            shared.clone()
        } else {
            draw_channels(self.scenario, &mut derived(self.spec.seed, &[stream::CHANNEL, j as u64]))?
        };
        if self.spec.kind == SweepKind::AngleMismatch {
            let sigma = grid_value.to_radians();
            let paths = perturb_angles(&base.paths, sigma, &mut derived(self.spec.seed, &[stream::ANGLE, j as u64]))?;
            return ChannelRealization::synthesize(self.scenario.m, self.scenario.l, paths);
        }
        Ok(base)
    }

    fn trial(&self, j: usize, grid_value: f64) -> Result<TrialError> {
        let spec = self.spec;
        let ch = self.channel(j, grid_value)?;
        let snr = match spec.kind {
            SweepKind::Snr => grid_value,
            _ => spec.snr_db[j % spec.snr_db.len()],
        };
        let eps = if spec.kind == SweepKind::Epsilon { grid_value } else { 0.0 };
        let params = ProtocolParams {
            noise_power: noise_power_for_snr(self.scenario.symbol_power, snr),
            eps_on: eps,
            eps_off: eps,
            joint: self.needs_joint,
        };
        let corrupted;
        let tx = if spec.kind == SweepKind::PilotSnr {
            corrupted = corrupt_pilots(
                &self.pilots,
                grid_value,
                self.scenario.db_convention,
                &mut derived(spec.seed, &[stream::CORRUPTION, j as u64]),
            )?;
            &corrupted
        } else {
            &self.pilots
        };
        let mut noise = derived(spec.seed, &[stream::RX_NOISE, j as u64]);
        let received: Vec<UserPilots> = ch
            .users
            .iter()
            .map(|u| run_protocol_user(u, tx, &params, &mut noise))
            .collect::<Result<_>>()?;

        let mut rows = vec![Vec::with_capacity(ch.k()); self.plan.len()];
        for (user, rx) in ch.users.iter().zip(&received) {
            let truth_d = CMatrix::from_column_slice(user.m(), 1, user.h_direct.as_slice());
            let mut ls_cache: Vec<(EstimatorId, crate::ls::ChannelEstimate)> = Vec::new();
            for (row, &(est, target)) in rows.iter_mut().zip(&self.plan) {
                let err = match est {
                    EstimatorId::LsPerColumn | EstimatorId::LsJoint => {
                        let method = if est == EstimatorId::LsJoint {
                            EstimateMethod::LsJoint
                        } else {
                            EstimateMethod::LsPerColumn
                        };
                        if !ls_cache.iter().any(|(e, _)| *e == est) {
                            ls_cache.push((est, self.ls.estimate(rx, method)?));
                        }
                        let e = &ls_cache.iter().find(|(e, _)| *e == est).expect("cached").1;
                        match target {
                            Target::Direct => nmse_ratio(
                                &truth_d,
                                &CMatrix::from_column_slice(user.m(), 1, e.h_direct_hat.as_slice()),
                                spec.squared_nmse,
                            )?,
                            Target::Cascaded => nmse_ratio(&user.g_cascaded, &e.g_hat, spec.squared_nmse)?,
                        }
                    }
                    EstimatorId::Channelnet => match target {
                        Target::Direct => {
                            let net = self.nets.direct.expect("planned only with a network");
                            let h = net.predict_direct(rx)?;
                            nmse_ratio(&truth_d, &CMatrix::from_column_slice(h.len(), 1, h.as_slice()), spec.squared_nmse)?
                        }
                        Target::Cascaded => {
                            let net = self.nets.cascaded.expect("planned only with a network");
                            nmse_ratio(&user.g_cascaded, &net.predict_cascaded(rx)?, spec.squared_nmse)?
                        }
                    },
                };
                row.push(err);
            }
        }
        Ok(TrialError { rows })
    }
}

/// Runs every grid point with `spec.trials` trials.
///
/// Trial `j` draws its receiver noise, pilot corruption and angle
/// perturbation from streams derived from `(spec.seed, j)` only, so
/// neighbouring grid points share their random numbers and differ only in
/// the swept quantity. Trials run in parallel; results are reduced in trial
/// order, so the output does not depend on the thread count.
pub fn run_sweep(spec: &SweepSpec, scenario: &ScenarioConfig, nets: Nets) -> Result<SweepResult> {
    spec.validate()?;
    scenario.validate()?;
    let plan = row_plan(spec, &nets)?;
    if let Some(n) = nets.direct {
        check_net(n, SampleKind::Direct, scenario)?;
    }
    if let Some(n) = nets.cascaded {
        check_net(n, SampleKind::Cascaded, scenario)?;
    }
    let needs_joint = spec.estimators.contains(&EstimatorId::LsJoint)
        || (spec.estimators.contains(&EstimatorId::Channelnet)
            && nets.cascaded.is_some_and(|n| n.layout.cascaded_input == CascadedInput::Joint));
    let pilots = make_pilots(scenario.m, scenario.p, needs_joint.then_some(scenario.l))?
        .with_symbol_power(scenario.symbol_power)?;
    let ls = LsEstimator::new(&pilots)?;
    let shared = if spec.realization_pool.is_none() && !spec.fresh_channel_per_trial {
        Some(draw_channels(scenario, &mut derived(spec.seed, &[stream::CHANNEL]))?)
    } else {
        None
    };
    let ctx = Context { spec, scenario, nets, pilots, ls, plan, needs_joint, shared };

    let mut rows = Vec::with_capacity(spec.grid.len() * ctx.plan.len());
    for &g in &spec.grid {
        let trials: Vec<TrialError> = (0..spec.trials)
            .into_par_iter()
            .map(|j| ctx.trial(j, g))
            .collect::<Result<_>>()?;
        for (r, &(estimator, target)) in ctx.plan.iter().enumerate() {
            let k = trials[0].rows[r].len();
            let mut per_user = vec![0.0; k];
            for t in &trials {
                for (acc, v) in per_user.iter_mut().zip(&t.rows[r]) {
                    *acc += v;
                }
            }
            for v in per_user.iter_mut() {
                *v /= spec.trials as f64;
            }
            let nmse = per_user.iter().sum::<f64>() / k as f64;
            rows.push(SweepRow {
                grid_value: g,
                estimator,
                target,
                nmse,
                nmse_db: to_db(nmse),
                trials: spec.trials,
                per_user,
            });
        }
    }
    Ok(SweepResult {
        spec: spec.clone(),
        scenario: scenario.clone(),
        rows,
        config_hash: config_hash(spec, scenario)?,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

impl SweepResult {
    /// Rows of one estimator and target, in grid order.
    pub fn series(&self, estimator: EstimatorId, target: Target) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.estimator == estimator && r.target == target).collect()
    }

    /// The result table as CSV: `grid_value, estimator, target, nmse,
    /// nmse_db, J` followed by one `nmse_user<k>` column per user.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let users = self.rows.first().map_or(0, |r| r.per_user.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["grid_value", "estimator", "target", "nmse", "nmse_db", "J"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..users).map(|k| format!("nmse_user{k}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.grid_value.to_string(),
                r.estimator.name().to_string(),
                match r.target {
                    Target::Direct => "direct".to_string(),
                    Target::Cascaded => "cascaded".to_string(),
                },
                r.nmse.to_string(),
                r.nmse_db.to_string(),
                r.trials.to_string(),
            ];
            rec.extend(r.per_user.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    /// `<kind>_<timestamp>_<hash>` without extension.
    pub fn file_stem(&self, timestamp: &str) -> String {
        format!("{}_{}_{}", self.spec.kind.name(), timestamp, self.config_hash)
    }
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir` and returns both paths.
pub fn emit(result: &SweepResult, dir: impl AsRef<Path>, timestamp: &str) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let stem = result.file_stem(timestamp);
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&csv_path, result.to_csv()?)?;
    std::fs::write(&json_path, result.to_json()?)?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::C64;

    fn mat(v: &[f64]) -> CMatrix {
        CMatrix::from_iterator(v.len(), 1, v.iter().map(|&x| C64::new(x, -0.5 * x)))
    }

    #[test]
    fn nmse_examples() {
        let g = mat(&[1.0, 2.0, -3.0]);
        assert_eq!(nmse(&g, &[g.clone(), g.clone()], false).unwrap(), 0.0);
        assert_eq!(nmse(&g, &[g.map(|_| C64::new(0.0, 0.0))], false).unwrap(), 1.0);
        assert!((nmse(&g, &[&g * C64::from(2.0)], false).unwrap() - 1.0).abs() < 1e-15);
        let half = &g * C64::from(0.5);
        assert!((nmse(&g, std::slice::from_ref(&half), true).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(nmse(&g, &[], false), Err(Error::Empty(_))));
        let z = mat(&[0.0, 0.0]);
        assert!(matches!(nmse(&z, std::slice::from_ref(&z), false), Err(Error::ZeroNorm)));
    }

    #[test]
    fn nmse_is_scale_free() {
        let g = mat(&[0.3, -1.2, 2.0]);
        let e = mat(&[0.1, -1.0, 2.5]);
        let c = C64::new(-3.0, 1.5);
        let a = nmse(&g, std::slice::from_ref(&e), false).unwrap();
        let b = nmse(&(&g * c), &[&e * c], false).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    fn ls_spec(kind: SweepKind, grid: Vec<f64>) -> SweepSpec {
        SweepSpec {
            kind,
            grid,
            trials: 4,
            snr_db: vec![10.0],
            estimators: default_estimators(),
            seed: 1,
            fresh_channel_per_trial: false,
            realization_pool: None,
            squared_nmse: false,
        }
    }

    #[test]
    fn csv_cardinality_and_round_trip() {
        let spec = ls_spec(SweepKind::Snr, vec![0.0, 10.0, 20.0, 30.0]);
        let res = run_sweep(&spec, &ScenarioConfig::desk(), Nets::default()).unwrap();
        let csv = String::from_utf8(res.to_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 1 + 16);
        assert!(csv.starts_with("grid_value,estimator,target,nmse,nmse_db,J,nmse_user0,nmse_user1\n"));
        let back = SweepResult::from_json(&res.to_json().unwrap()).unwrap();
        assert_eq!(back, res);
        let again = run_sweep(&spec, &ScenarioConfig::desk(), Nets::default()).unwrap();
        assert_eq!(again.to_csv().unwrap(), res.to_csv().unwrap());
    }

    #[test]
    fn channelnet_without_nets_is_rejected() {
        let mut spec = ls_spec(SweepKind::Snr, vec![10.0]);
        spec.estimators = vec![EstimatorId::Channelnet];
        assert!(matches!(
            run_sweep(&spec, &ScenarioConfig::desk(), Nets::default()),
            Err(Error::MissingNetwork(_))
        ));
    }

    #[test]
    fn invalid_specs() {
        let spec = ls_spec(SweepKind::Snr, vec![]);
        assert!(spec.validate().is_err());
        let mut spec = ls_spec(SweepKind::Snr, vec![1.0]);
        spec.trials = 0;
        assert!(spec.validate().is_err());
        assert!(ls_spec(SweepKind::Epsilon, vec![2.0]).validate().is_err());
        assert!(ls_spec(SweepKind::AngleMismatch, vec![-1.0]).validate().is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let s: SweepSpec = serde_json::from_str(r#"{"kind":"pilot_snr","grid":[10,"inf"],"trials":3}"#).unwrap();
        assert_eq!(s.snr_db, vec![10.0]);
        assert_eq!(s.grid, vec![10.0, f64::INFINITY]);
        assert_eq!(s.estimators, default_estimators());
    }

    #[test]
    fn infinite_pilot_snr_matches_clean_pilots() {
        let corrupted = run_sweep(&ls_spec(SweepKind::PilotSnr, vec![f64::INFINITY]), &ScenarioConfig::desk(), Nets::default()).unwrap();
        let mut clean = ls_spec(SweepKind::Snr, vec![10.0]);
        clean.kind = SweepKind::Snr;
        let clean = run_sweep(&clean, &ScenarioConfig::desk(), Nets::default()).unwrap();
        for (a, b) in corrupted.rows.iter().zip(&clean.rows) {
            assert_eq!(a.per_user, b.per_user);
        }
    }
}
