use rand::Rng;

use super::layers::{Cache, Layer, LayerSpec, Shape};
use super::Scalar;
use crate::rng::{derived, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout masks are drawn.
    Train,
    /// Deterministic; dropout is the identity.
    Infer,
}

/// Layer stack with parameters and momentum buffers.
#[derive(Debug, Clone)]
pub struct Network<T> {
    specs: Vec<LayerSpec>,
    input_rows: usize,
    input_cols: usize,
    output_dim: usize,
    seed: u64,
    pub(crate) layers: Vec<Layer<T>>,
    pub(crate) velocity: Vec<Option<(Vec<T>, Vec<T>)>>,
    version: u64,
}

/// Equal architecture, seed and parameters; optimizer state is ignored.
impl<T: Scalar> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs
            && self.input_dims() == other.input_dims()
            && self.output_dim == other.output_dim
            && self.seed == other.seed
            && self.layers == other.layers
    }
}

/// Result of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    caches: Vec<Cache<T>>,
    /// Predictions laid out `[output][batch]`.
    output: Vec<T>,
    batch: usize,
    version: u64,
}

impl<T: Scalar> Forward<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Prediction of sample `b`.
    pub fn prediction(&self, b: usize) -> Vec<T> {
        self.output.iter().skip(b).step_by(self.batch).copied().collect()
    }
}

/// Parameter gradients, one `(weight, bias)` pair per parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub(crate) layers: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> Gradients<T> {
    /// All gradient entries in parameter order (weights then bias, layer by layer).
    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    /// Gradient of the last parametric layer.
    pub fn output_layer(&self) -> Option<(&[T], &[T])> {
        self.layers.iter().rev().flatten().next().map(|(w, b)| (w.as_slice(), b.as_slice()))
    }
}

/// Mean squared error `(1/n) Σ (p - z)²`.
pub fn loss(prediction: &[f64], label: &[f64]) -> Result<f64> {
    if prediction.len() != label.len() || label.is_empty() {
        return Err(Error::dim(format!(
            "prediction length {} vs label length {}",
            prediction.len(),
            label.len()
        )));
    }
    let sum: f64 = prediction.iter().zip(label).map(|(p, z)| (p - z) * (p - z)).sum();
    Ok(sum / label.len() as f64)
}

impl<T: Scalar> Network<T> {
    /// Builds a network for `3 x rows x cols` inputs and `output_dim` outputs
    /// with seeded fan-in scaled uniform weights and zero biases.
    pub fn new(
        specs: &[LayerSpec],
        input_rows: usize,
        input_cols: usize,
        output_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::with_init_scale(specs, input_rows, input_cols, output_dim, seed, 1.0)
    }

    /// Like [`Network::new`] with the initialization range multiplied by
    /// `scale` (0 gives all-zero weights).
    pub fn with_init_scale(
        specs: &[LayerSpec],
        input_rows: usize,
        input_cols: usize,
        output_dim: usize,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        if specs.first() != Some(&LayerSpec::Input) {
            return Err(Error::config("the first layer must be the input layer"));
        }
        if specs.last() != Some(&LayerSpec::RegressionOutput) {
            return Err(Error::config("the last layer must be the regression output"));
        }
        if input_rows == 0 || input_cols == 0 || output_dim == 0 {
            return Err(Error::config("network input and output dimensions must be positive"));
        }
        let inner = &specs[1..specs.len() - 1];
        if inner.iter().any(|s| matches!(s, LayerSpec::Input | LayerSpec::RegressionOutput)) {
            return Err(Error::config("input and regression layers may only appear at the ends"));
        }
        // spatial index = col * rows + row
        let mut shape = Shape { c: 3, h: input_cols, w: input_rows };
        let mut layers = Vec::with_capacity(specs.len() - 1);
        for (i, spec) in specs.iter().enumerate().skip(1) {
            let mut rng = derived(seed, &[stream::INIT, i as u64]);
            let layer = match *spec {
                LayerSpec::Conv { filters, height, width, relu } => {
                    if layers.iter().any(|l| matches!(l, Layer::Dense(_))) {
                        return Err(Error::config("convolution after a fully connected layer"));
                    }
                    Layer::conv(shape, filters, height, width, relu, scale, &mut rng)?
                }
                LayerSpec::FullyConnected { units, relu } => {
                    Layer::dense(shape, units, relu, scale, &mut rng)?
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::config("dropout rate must lie in [0, 1)"));
                    }
                    Layer::Dropout { rate, shape }
                }
                LayerSpec::RegressionOutput => Layer::dense(shape, output_dim, false, scale, &mut rng)?,
                LayerSpec::Input => unreachable!(),
            };
            shape = layer.output_shape();
            layers.push(layer);
        }
        let velocity = layers
            .iter()
            .map(|l| l.params().map(|(w, b)| (vec![T::zero(); w.len()], vec![T::zero(); b.len()])))
            .collect();
        Ok(Network {
            specs: specs.to_vec(),
            input_rows,
            input_cols,
            output_dim,
            seed,
            layers,
            velocity,
            version: 0,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// `(rows, cols)` of the expected input tensor.
    pub fn input_dims(&self) -> (usize, usize) {
        (self.input_rows, self.input_cols)
    }

    pub fn input_len(&self) -> usize {
        3 * self.input_rows * self.input_cols
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.params()).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// All parameters in order (weights then bias, layer by layer).
    pub fn params_flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    fn param_slot(&mut self, mut index: usize) -> Option<&mut T> {
        for layer in &mut self.layers {
            if let Some((w, b)) = layer.params_mut() {
                if index < w.len() {
                    return w.get_mut(index);
                }
                index -= w.len();
                if index < b.len() {
                    return b.get_mut(index);
                }
                index -= b.len();
            }
        }
        None
    }

    pub fn param(&mut self, index: usize) -> Option<T> {
        self.param_slot(index).map(|p| *p)
    }

    pub fn set_param(&mut self, index: usize, value: T) -> Result<()> {
        let len = self.param_count();
        *self.param_slot(index).ok_or(Error::IndexOutOfRange { index, len })? = value;
        self.version += 1;
        Ok(())
    }

    /// Replaces every parameter from a flat list in [`Network::params_flat`] order.
    pub fn load_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(format!(
                "{} parameters supplied for a network with {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            if let Some((w, b)) = layer.params_mut() {
                let wl = w.len();
                w.copy_from_slice(&flat[at..at + wl]);
                at += wl;
                let bl = b.len();
                b.copy_from_slice(&flat[at..at + bl]);
                at += bl;
            }
        }
        self.version += 1;
        Ok(())
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Packs per-sample inputs (each `[channel][spatial]`) into the batch layout.
    pub fn pack_batch(&self, samples: &[&[T]]) -> Result<Vec<T>> {
        let len = self.input_len();
        if let Some(bad) = samples.iter().find(|s| s.len() != len) {
            return Err(Error::dim(format!("input of length {} where {len} is expected", bad.len())));
        }
        let s = self.input_rows * self.input_cols;
        let batch = samples.len();
        let mut x = vec![T::zero(); len * batch];
        for (b, sample) in samples.iter().enumerate() {
            for c in 0..3 {
                x[(c * batch + b) * s..(c * batch + b + 1) * s].copy_from_slice(&sample[c * s..(c + 1) * s]);
            }
        }
        Ok(x)
    }

    /// Forward pass over a packed batch. `rng` drives dropout in training mode.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        x: &[T],
        batch: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward<T>> {
        if batch == 0 || x.len() != self.input_len() * batch {
            return Err(Error::dim(format!(
                "batch buffer of {} values for {batch} inputs of length {}",
                x.len(),
                self.input_len()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for layer in &self.layers {
            let drop_rng = match mode {
                Mode::Train => Some(&mut *rng),
                Mode::Infer => None,
            };
            let (out, cache) = layer.forward(&act, batch, drop_rng);
            caches.push(cache);
            act = out;
        }
        Ok(Forward { caches, output: act, batch, version: self.version })
    }

    /// Prediction for one input tensor laid out `[channel][spatial]`.
    pub fn forward<R: Rng + ?Sized>(&self, input: &[T], mode: Mode, rng: &mut R) -> Result<Vec<T>> {
        Ok(self.forward_batch(&self.pack_batch(&[input])?, 1, mode, rng)?.output)
    }

    /// Inference on many inputs, returning one prediction per input.
    pub fn predict(&self, inputs: &[&[T]]) -> Result<Vec<Vec<T>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.pack_batch(inputs)?;
        let fwd = self.forward_batch(&x, inputs.len(), Mode::Infer, &mut crate::rng::seeded(0))?;
        Ok((0..inputs.len()).map(|b| fwd.prediction(b)).collect())
    }

    /// Backpropagates the batch-mean MSE against `labels` (one per sample).
    /// Returns the loss and exact parameter gradients.
    pub fn backward(&self, fwd: &Forward<T>, labels: &[&[T]]) -> Result<(f64, Gradients<T>)> {
        if fwd.version != self.version || fwd.caches.len() != self.layers.len() {
            return Err(Error::Numerical("forward activations are stale; rerun forward".into()));
        }
        let (batch, out_dim) = (fwd.batch, self.output_dim);
        if labels.len() != batch || labels.iter().any(|z| z.len() != out_dim) {
            return Err(Error::dim(format!("expected {batch} labels of length {out_dim}")));
        }
        let scale = T::lit(2.0 / (out_dim * batch) as f64);
        let mut grad = vec![T::zero(); out_dim * batch];
        let mut total = 0.0;
        for (b, z) in labels.iter().enumerate() {
            for (o, &zo) in z.iter().enumerate() {
                let diff = fwd.output[o * batch + b] - zo;
                total += diff.as_f64() * diff.as_f64();
                grad[o * batch + b] = scale * diff;
            }
        }
        let loss = total / (out_dim * batch) as f64;

        let mut grads = vec![None; self.layers.len()];
        for (i, (layer, cache)) in self.layers.iter().zip(&fwd.caches).enumerate().rev() {
            let (dx, dp) = layer.backward(cache, grad, batch, i > 0);
            grads[i] = dp;
            match dx {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok((loss, Gradients { layers: grads }))
    }

    /// Number of filters/units in each parametric layer, for diagnostics.
    pub fn widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.filters),
                Layer::Dense(d) => Some(d.units),
                Layer::Dropout { .. } => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scaled_channelnet;
    use crate::rng::seeded;

    fn tiny_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Input,
            LayerSpec::Conv { filters: 2, height: 3, width: 3, relu: true },
            LayerSpec::FullyConnected { units: 3, relu: true },
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::RegressionOutput,
        ]
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(loss(&[2.0], &[0.0]).unwrap(), 4.0);
        assert!(loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = Network::<f64>::with_init_scale(&tiny_specs(), 2, 2, 4, 1, 0.0).unwrap();
        let out = net.forward(&[0.0; 12], Mode::Infer, &mut seeded(0)).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn inference_is_deterministic() {
        let net = Network::<f32>::new(&scaled_channelnet(4, 8, 8), 4, 4, 32, 3).unwrap();
        let x: Vec<f32> = (0..48).map(|i| (i as f32 * 0.37).sin()).collect();
        let a = net.forward(&x, Mode::Infer, &mut seeded(1)).unwrap();
        let b = net.forward(&x, Mode::Infer, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        let c = net.forward(&x, Mode::Train, &mut seeded(1)).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.len(), 32);
        assert!(net.forward(&x[..47], Mode::Infer, &mut seeded(1)).is_err());
    }

    #[test]
    fn one_by_one_identity_filter() {
        let specs = [
            LayerSpec::Input,
            LayerSpec::Conv { filters: 1, height: 1, width: 1, relu: false },
            LayerSpec::RegressionOutput,
        ];
        let mut net = Network::<f64>::with_init_scale(&specs, 1, 1, 1, 0, 0.0).unwrap();
        // conv weights (1 x 3): pass channel 0 through; output layer weight 1
        net.load_params(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let out = net.forward(&[0.75, 5.0, 9.0], Mode::Infer, &mut seeded(0)).unwrap();
        assert_eq!(out, vec![0.75]);
    }

    #[test]
    fn same_padding_preserves_spatial_size() {
        let specs = [
            LayerSpec::Input,
            LayerSpec::Conv { filters: 5, height: 3, width: 3, relu: true },
            LayerSpec::Conv { filters: 2, height: 2, width: 4, relu: true },
            LayerSpec::RegressionOutput,
        ];
        let net = Network::<f64>::new(&specs, 3, 5, 2, 0).unwrap();
        let shapes: Vec<_> = net.layers.iter().map(|l| l.output_shape()).collect();
        assert_eq!((shapes[0].h, shapes[0].w, shapes[0].c), (5, 3, 5));
        assert_eq!((shapes[1].h, shapes[1].w, shapes[1].c), (5, 3, 2));
    }

    #[test]
    fn rejects_malformed_stacks() {
        let no_output = [LayerSpec::Input, LayerSpec::FullyConnected { units: 2, relu: true }];
        assert!(Network::<f64>::new(&no_output, 2, 2, 1, 0).is_err());
        let bad_drop = [LayerSpec::Input, LayerSpec::Dropout { rate: 1.0 }, LayerSpec::RegressionOutput];
        assert!(Network::<f64>::new(&bad_drop, 2, 2, 1, 0).is_err());
    }

    #[test]
    fn stale_forward_is_rejected() {
        let mut net = Network::<f64>::new(&tiny_specs(), 2, 2, 2, 0).unwrap();
        let x = net.pack_batch(&[&[0.1; 12]]).unwrap();
        let fwd = net.forward_batch(&x, 1, Mode::Train, &mut seeded(0)).unwrap();
        let z = [0.0, 0.0];
        assert!(net.backward(&fwd, &[&z]).is_ok());
        let p = net.param(0).unwrap();
        net.set_param(0, p + 1.0).unwrap();
        assert!(matches!(net.backward(&fwd, &[&z]), Err(Error::Numerical(_))));
    }
}
