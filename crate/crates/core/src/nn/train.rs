use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::LayerSpec;
use super::network::{Gradients, Mode, Network};
use super::predict::{InputLayout, TrainedNet};
use super::Scalar;
use crate::dataset::{split, Dataset};
use crate::rng::{derived, stream};
use crate::{Error, Result};

fn d_lr() -> f64 {
    0.0002
}
fn d_momentum() -> f64 {
    0.9
}
fn d_batch() -> usize {
    128
}
fn d_patience() -> usize {
    3
}
fn d_max_epochs() -> usize {
    100
}
fn d_fraction() -> f64 {
    0.7
}

/// Optimizer and stopping schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of a dataset used for training when it is split on the fly.
    #[serde(default = "d_fraction")]
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: d_lr(),
            momentum: d_momentum(),
            batch_size: d_batch(),
            patience: d_patience(),
            max_epochs: d_max_epochs(),
            seed: 0,
            train_fraction: d_fraction(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size, patience and max_epochs must be at least 1"));
        }
        Ok(())
    }
}

/// `v ← μ v − lr g; θ ← θ + v` for every parameter.
pub fn sgd_step<T: Scalar>(net: &mut Network<T>, grads: &Gradients<T>, cfg: &TrainConfig) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::dim("gradient layer count differs from the network"));
    }
    let lr = T::lit(cfg.learning_rate);
    let mu = T::lit(cfg.momentum);
    for ((layer, vel), grad) in net.layers.iter_mut().zip(net.velocity.iter_mut()).zip(&grads.layers) {
        match (layer.params_mut(), vel.as_mut(), grad) {
            (Some((w, b)), Some((vw, vb)), Some((gw, gb))) => {
                if w.len() != gw.len() || b.len() != gb.len() {
                    return Err(Error::dim("gradient shape differs from parameter shape"));
                }
                for ((p, v), &g) in w.iter_mut().zip(vw.iter_mut()).zip(gw).chain(b.iter_mut().zip(vb.iter_mut()).zip(gb)) {
                    *v = mu * *v - lr * g;
                    *p = *p + *v;
                }
            }
            (None, None, None) => {}
            _ => return Err(Error::dim("gradient layout differs from the network")),
        }
    }
    net.bump_version();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops after `patience` consecutive epochs without a new best (lowest)
/// validation metric.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, since_best: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if metric >= best => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::NoImprovement
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    /// `(epoch, metric)` of the best observation.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    /// Mean over validation samples of `‖ẑ − z‖ / ‖z‖`.
    pub val_nmse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

struct Prepared<T> {
    inputs: Vec<Vec<T>>,
    labels: Vec<Vec<T>>,
}

fn prepare<T: Scalar>(ds: &Dataset, norm: &crate::dataset::NormStats, net: &Network<T>) -> Result<Prepared<T>> {
    if let Some((rows, cols, label_len)) = ds.dims() {
        if (rows, cols) != net.input_dims() || label_len != net.output_dim() {
            return Err(Error::dim(format!(
                "dataset samples are {rows}x{cols} -> {label_len}, network expects {:?} -> {}",
                net.input_dims(),
                net.output_dim()
            )));
        }
    }
    let mut buf = Vec::new();
    let mut inputs = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        norm.apply(&s.input, &mut buf);
        inputs.push(buf.iter().map(|&x| T::lit(x)).collect());
        labels.push(s.label.iter().map(|&x| T::lit(x as f64)).collect());
    }
    Ok(Prepared { inputs, labels })
}

/// Mean per-sample MSE and NMSE of `net` on prepared data.
fn evaluate<T: Scalar>(net: &Network<T>, data: &Prepared<T>) -> Result<(f64, f64)> {
    let mut mse = 0.0;
    let mut nmse = 0.0;
    for (inputs, labels) in data.inputs.chunks(256).zip(data.labels.chunks(256)) {
        let refs: Vec<&[T]> = inputs.iter().map(|v| v.as_slice()).collect();
        for (pred, z) in net.predict(&refs)?.iter().zip(labels) {
            let err: f64 = pred.iter().zip(z).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum();
            let norm: f64 = z.iter().map(|&q| q.as_f64().powi(2)).sum();
            mse += err / z.len() as f64;
            nmse += if norm > 0.0 { (err / norm).sqrt() } else { 0.0 };
        }
    }
    let n = data.inputs.len() as f64;
    Ok((mse / n, nmse / n))
}

/// [`train_with_progress`] without a progress callback.
pub fn train<T: Scalar>(
    net: Network<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network<T>, TrainLog)> {
    train_with_progress(net, train_set, val_set, cfg, |_| {})
}

/// Mini-batch SGD with momentum and validation-based early stopping.
///
/// Inputs of both sets are standardized with `train_set.norm`. Each epoch
/// visits the training set in a seeded shuffled order; after each epoch the
/// validation MSE is computed in inference mode. Training stops after
/// `cfg.patience` epochs without improvement or at `cfg.max_epochs`, and the
/// parameters of the best validation epoch are returned.
pub fn train_with_progress<T: Scalar>(
    mut net: Network<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Network<T>, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let train_data = prepare(train_set, &train_set.norm, &net)?;
    let val_data = prepare(val_set, &train_set.norm, &net)?;

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = net.params_flat();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_data.inputs.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut derived(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<&[T]> = idx.iter().map(|&i| train_data.inputs[i].as_slice()).collect();
            let labels: Vec<&[T]> = idx.iter().map(|&i| train_data.labels[i].as_slice()).collect();
            let x = net.pack_batch(&inputs)?;
            let mut drop_rng = derived(cfg.seed, &[stream::DROPOUT, epoch as u64, bi as u64]);
            let fwd = net.forward_batch(&x, idx.len(), Mode::Train, &mut drop_rng)?;
            let (batch_loss, grads) = net.backward(&fwd, &labels)?;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged: non-finite loss in epoch {epoch}, batch {bi}"
                )));
            }
            sgd_step(&mut net, &grads, cfg)?;
            loss_sum += batch_loss * idx.len() as f64;
        }
        let (val_mse, val_nmse) = evaluate(&net, &val_data)?;
        if !val_mse.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss in epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_mse,
            val_nmse,
        };
        on_epoch(&record);
        log.epochs.push(record);
        match stopper.observe(epoch, val_mse) {
            StopDecision::Improved => best_params = net.params_flat(),
            StopDecision::NoImprovement => {}
            StopDecision::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.best_epoch = stopper.best().map(|(e, _)| e).unwrap_or(0);
    net.load_params(&best_params)?;
    Ok((net, log))
}

/// Splits `ds` with `cfg.train_fraction`, builds an f32 network from `specs`
/// seeded by `cfg.seed` and trains it.
pub fn fit(
    ds: &Dataset,
    specs: &[LayerSpec],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainedNet, TrainLog)> {
    cfg.validate()?;
    let (rows, cols, label_len) = ds.dims().ok_or(Error::Empty("dataset"))?;
    let (train_set, val_set) = split(ds, cfg.train_fraction, cfg.seed)?;
    let net = Network::<f32>::new(specs, rows, cols, label_len, cfg.seed)?;
    let (net, log) = train_with_progress(net, &train_set, &val_set, cfg, on_epoch)?;
    Ok((TrainedNet::new(net, train_set.norm, InputLayout::of_dataset(ds))?, log))
}

/// Validation metrics `(mse, nmse)` of a network on a dataset, standardized
/// with `norm`.
pub fn validation_metrics<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset,
    norm: &crate::dataset::NormStats,
) -> Result<(f64, f64)> {
    evaluate(net, &prepare(ds, norm, net)?)
}
