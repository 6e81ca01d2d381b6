use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use lisnet::channel::draw_channels;
use lisnet::config::{noise_power_for_snr, snr_db, ScenarioConfig};
use lisnet::dataset::{generate as generate_sets, CascadedInput, Dataset, GenParams};
use lisnet::eval::{nmse_ratio, run_sweep, Nets, SweepSpec};
use lisnet::nn::{fit, scaled_channelnet, Checkpoint, LayerSpec, TrainConfig};
use lisnet::pilots::{make_pilots, run_protocol, ProtocolParams};
use lisnet::rng::{derived, stream};
use lisnet::{CMatrix, Error};

use crate::manifest::{write_atomic, RunManifest};
use crate::Common;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    msg: String,
}

impl CliError {
    fn config(msg: impl fmt::Display) -> Self {
        CliError { code: EXIT_CONFIG, msg: msg.to_string() }
    }

    fn data(msg: impl fmt::Display) -> Self {
        CliError { code: EXIT_DATA, msg: msg.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::MissingNetwork(_) => EXIT_CONFIG,
            Error::RankDeficient { .. } | Error::ZeroNorm | Error::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Parses a config file; every failure here is a configuration error.
fn load_config<T: DeserializeOwned>(path: &Path) -> Result<(T, serde_json::Value)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let parsed = serde_json::from_value(value.clone())
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok((parsed, value))
}

/// Paths in a config are relative to the config file.
fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::data(format!("cannot create output directory {}: {e}", dir.display())))
}

fn resolved_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

#[derive(Debug, Serialize, Deserialize)]
struct GenerateFile {
    scenario: ScenarioConfig,
    generation: GenParams,
}

pub fn generate(c: &Common) -> Result<()> {
    let (mut cfg, _) = load_config::<GenerateFile>(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.scenario.seed = seed;
    }
    cfg.scenario.validate()?;
    prepare_out(&c.out)?;
    let mut manifest = RunManifest::new("generate", resolved_value(&cfg), cfg.scenario.seed);
    manifest.inputs.push(c.config.clone());

    let t = Instant::now();
    let (dc, cc) = generate_sets(&cfg.scenario, &cfg.generation)?;
    manifest.timings.insert("generate".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    for (ds, name) in [(&dc, "direct.lsds"), (&cc, "cascaded.lsds")] {
        let path = c.out.join(name);
        write_atomic(&path, &ds.to_bytes()?)?;
        eprintln!("wrote {} ({} samples)", path.display(), ds.len());
        manifest.outputs.push(path);
    }
    manifest.timings.insert("write".into(), t.elapsed().as_secs_f64());
    manifest.finish(&c.out)?;
    Ok(())
}

/// Network layers: an explicit list, or the ChannelNet topology with the
/// given widths (the full preset by default).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkFile {
    #[serde(default)]
    layers: Option<Vec<LayerSpec>>,
    #[serde(default = "d_filters")]
    filters: usize,
    #[serde(default = "d_fc1")]
    fc1: usize,
    #[serde(default = "d_fc2")]
    fc2: usize,
}

fn d_filters() -> usize {
    256
}
fn d_fc1() -> usize {
    1024
}
fn d_fc2() -> usize {
    2048
}

impl Default for NetworkFile {
    fn default() -> Self {
        NetworkFile { layers: None, filters: d_filters(), fc1: d_fc1(), fc2: d_fc2() }
    }
}

impl NetworkFile {
    fn specs(&self) -> Vec<LayerSpec> {
        self.layers.clone().unwrap_or_else(|| scaled_channelnet(self.filters, self.fc1, self.fc2))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainFile {
    dataset: PathBuf,
    #[serde(default)]
    network: NetworkFile,
    #[serde(default)]
    training: TrainConfig,
}

pub fn train(c: &Common) -> Result<()> {
    let (mut cfg, _) = load_config::<TrainFile>(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.training.seed = seed;
    }
    cfg.training.validate()?;
    let dataset_path = resolve(&c.config, &cfg.dataset);
    prepare_out(&c.out)?;
    let mut manifest = RunManifest::new("train", resolved_value(&cfg), cfg.training.seed);
    manifest.inputs.extend([c.config.clone(), dataset_path.clone()]);

    let t = Instant::now();
    let ds = Dataset::load(&dataset_path).map_err(|e| CliError::data(format!("{}: {e}", dataset_path.display())))?;
    manifest.timings.insert("load".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let started = Instant::now();
    let (net, log) = fit(&ds, &cfg.network.specs(), &cfg.training, |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val mse {:.5}  val nmse {:.4}  ({:.1} s)",
            r.epoch,
            r.train_loss,
            r.val_mse,
            r.val_nmse,
            started.elapsed().as_secs_f64()
        )
    })?;
    manifest.timings.insert("train".into(), t.elapsed().as_secs_f64());

    let stem = match ds.kind {
        lisnet::dataset::SampleKind::Direct => "direct",
        lisnet::dataset::SampleKind::Cascaded => "cascaded",
    };
    let ck_path = c.out.join(format!("{stem}.lsnn"));
    let log_path = c.out.join(format!("{stem}_train_log.csv"));
    let mut csv = String::from("epoch,train_loss,val_mse,val_nmse\n");
    for r in &log.epochs {
        csv.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_mse, r.val_nmse));
    }
    let ck = Checkpoint { net, training: cfg.training.clone(), log };
    write_atomic(&ck_path, &ck.to_bytes()?)?;
    write_atomic(&log_path, csv.as_bytes())?;
    eprintln!("wrote {} (best epoch {})", ck_path.display(), ck.log.best_epoch);
    manifest.outputs.extend([ck_path, log_path]);
    manifest.finish(&c.out)?;
    Ok(())
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
struct CheckpointPaths {
    #[serde(default)]
    direct: Option<PathBuf>,
    #[serde(default)]
    cascaded: Option<PathBuf>,
}

impl CheckpointPaths {
    fn load(&self, config_path: &Path) -> Result<(Option<Checkpoint>, Option<Checkpoint>, Vec<PathBuf>)> {
        let mut inputs = Vec::new();
        let mut one = |p: &Option<PathBuf>| -> Result<Option<Checkpoint>> {
            match p {
                None => Ok(None),
                Some(p) => {
                    let path = resolve(config_path, p);
                    let ck = Checkpoint::load(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
                    inputs.push(path);
                    Ok(Some(ck))
                }
            }
        };
        let d = one(&self.direct)?;
        let cc = one(&self.cascaded)?;
        Ok((d, cc, inputs))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepFile {
    scenario: ScenarioConfig,
    sweep: SweepSpec,
    #[serde(default)]
    checkpoints: CheckpointPaths,
}

pub fn sweep(c: &Common) -> Result<()> {
    let (mut cfg, _) = load_config::<SweepFile>(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.sweep.seed = seed;
    }
    cfg.sweep.validate()?;
    cfg.scenario.validate()?;
    prepare_out(&c.out)?;
    let mut manifest = RunManifest::new("sweep", resolved_value(&cfg), cfg.sweep.seed);
    manifest.inputs.push(c.config.clone());
    let (d, cc, inputs) = cfg.checkpoints.load(&c.config)?;
    manifest.inputs.extend(inputs);
    let nets = Nets { direct: d.as_ref().map(|c| &c.net), cascaded: cc.as_ref().map(|c| &c.net) };

    let t = Instant::now();
    let result = run_sweep(&cfg.sweep, &cfg.scenario, nets)?;
    manifest.timings.insert("sweep".into(), t.elapsed().as_secs_f64());

    let stem = result.file_stem(&chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string());
    let csv_path = c.out.join(format!("{stem}.csv"));
    let json_path = c.out.join(format!("{stem}.json"));
    write_atomic(&csv_path, &result.to_csv()?)?;
    write_atomic(&json_path, &result.to_json()?)?;
    for r in &result.rows {
        eprintln!(
            "{:>8} {:<14} {:<8} nmse {:.4e} ({:.2} dB)",
            r.grid_value,
            r.estimator.name(),
            format!("{:?}", r.target).to_lowercase(),
            r.nmse,
            r.nmse_db
        );
    }
    manifest.outputs.extend([csv_path, json_path]);
    manifest.finish(&c.out)?;
    Ok(())
}

fn d_snr() -> f64 {
    10.0
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictFile {
    scenario: ScenarioConfig,
    checkpoints: CheckpointPaths,
    #[serde(default = "d_snr", with = "snr_db")]
    snr_db: f64,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct UserReport {
    user: usize,
    nmse_direct: Option<f64>,
    nmse_cascaded: Option<f64>,
    /// `[re, im]` pairs, column-major for the cascaded channel.
    h_direct_hat: Option<Vec<[f64; 2]>>,
    g_cascaded_hat: Option<Vec<[f64; 2]>>,
}

fn pairs(m: &CMatrix) -> Vec<[f64; 2]> {
    m.iter().map(|z| [z.re, z.im]).collect()
}

pub fn predict(c: &Common) -> Result<()> {
    let (mut cfg, _) = load_config::<PredictFile>(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.scenario.validate()?;
    prepare_out(&c.out)?;
    let mut manifest = RunManifest::new("predict", resolved_value(&cfg), cfg.seed);
    manifest.inputs.push(c.config.clone());
    let (d, cc, inputs) = cfg.checkpoints.load(&c.config)?;
    manifest.inputs.extend(inputs);
    if d.is_none() && cc.is_none() {
        return Err(CliError::config("predict needs at least one checkpoint"));
    }

    let t = Instant::now();
    let s = &cfg.scenario;
    let joint = cc.as_ref().is_some_and(|c| c.net.layout.cascaded_input == CascadedInput::Joint);
    let pilots = make_pilots(s.m, s.p, joint.then_some(s.l))?.with_symbol_power(s.symbol_power)?;
    let ch = draw_channels(s, &mut derived(cfg.seed, &[stream::CHANNEL]))?;
    let params = ProtocolParams { noise_power: noise_power_for_snr(s.symbol_power, cfg.snr_db), eps_on: 0.0, eps_off: 0.0, joint };
    let rx = run_protocol(&ch, &pilots, &params, &mut derived(cfg.seed, &[stream::RX_NOISE]))?;
    let mut users = Vec::new();
    for (k, (user, r)) in ch.users.iter().zip(&rx.users).enumerate() {
        let mut rep = UserReport { user: k, nmse_direct: None, nmse_cascaded: None, h_direct_hat: None, g_cascaded_hat: None };
        if let Some(ck) = &d {
            let h = ck.net.predict_direct(r)?;
            let hm = CMatrix::from_column_slice(h.len(), 1, h.as_slice());
            let truth = CMatrix::from_column_slice(user.m(), 1, user.h_direct.as_slice());
            rep.nmse_direct = Some(nmse_ratio(&truth, &hm, false)?);
            rep.h_direct_hat = Some(pairs(&hm));
        }
        if let Some(ck) = &cc {
            let g = ck.net.predict_cascaded(r)?;
            rep.nmse_cascaded = Some(nmse_ratio(&user.g_cascaded, &g, false)?);
            rep.g_cascaded_hat = Some(pairs(&g));
        }
        eprintln!("user {k}: nmse direct {:?}, cascaded {:?}", rep.nmse_direct, rep.nmse_cascaded);
        users.push(rep);
    }
    manifest.timings.insert("predict".into(), t.elapsed().as_secs_f64());
    let path = c.out.join("prediction.json");
    let mut bytes = serde_json::to_vec_pretty(&users).map_err(CliError::data)?;
    bytes.push(b'\n');
    write_atomic(&path, &bytes)?;
    manifest.outputs.push(path);
    manifest.finish(&c.out)?;
    Ok(())
}
