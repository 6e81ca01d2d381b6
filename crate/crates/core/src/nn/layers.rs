use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, Scalar};
use crate::{Error, Result};

/// Declarative description of one network layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Input,
    /// Stride-1 convolution with zero padding that preserves the spatial size.
    Conv { filters: usize, height: usize, width: usize, relu: bool },
    FullyConnected { units: usize, relu: bool },
    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`
    /// during training so inference needs no rescaling.
    Dropout { rate: f64 },
    /// Linear map to the label dimension, trained with mean squared error.
    RegressionOutput,
}

/// The nine-layer ChannelNet: three 256-filter 3x3 convolutions, fully
/// connected layers of 1024 and 2048 units each followed by 50% dropout,
/// and a regression output.
pub fn channelnet_preset() -> Vec<LayerSpec> {
    scaled_channelnet(256, 1024, 2048)
}

/// ChannelNet topology with custom widths.
pub fn scaled_channelnet(filters: usize, fc1: usize, fc2: usize) -> Vec<LayerSpec> {
    let conv = LayerSpec::Conv { filters, height: 3, width: 3, relu: true };
    vec![
        LayerSpec::Input,
        conv.clone(),
        conv.clone(),
        conv,
        LayerSpec::FullyConnected { units: fc1, relu: true },
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::FullyConnected { units: fc2, relu: true },
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::RegressionOutput,
    ]
}

/// `(weight, bias)` gradient of a parametric layer; `None` for the rest.
pub(crate) type ParamGrad<T> = Option<(Vec<T>, Vec<T>)>;

/// Activation shape of one sample: channels x (height x width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn size(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv<T> {
    pub input: Shape,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub relu: bool,
    /// `filters x (c · kh · kw)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense<T> {
    pub input: Shape,
    pub units: usize,
    pub relu: bool,
    /// `units x inputs`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer<T> {
    Conv(Conv<T>),
    Dense(Dense<T>),
    Dropout { rate: f64, shape: Shape },
}

/// What a layer remembers from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub(crate) enum Cache<T> {
    Conv { cols: Vec<T>, out: Vec<T> },
    Dense { input: Vec<T>, out: Vec<T> },
    Dropout { mask: Vec<T> },
}

fn uniform_init<T: Scalar, R: Rng + ?Sized>(n: usize, limit: f64, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.random_range(-limit..=limit))).collect()
}

impl<T: Scalar> Layer<T> {
    pub fn output_shape(&self) -> Shape {
        match self {
            Layer::Conv(c) => Shape { c: c.filters, ..c.input },
            Layer::Dense(d) => Shape { c: d.units, h: 1, w: 1 },
            Layer::Dropout { shape, .. } => *shape,
        }
    }

    /// `scale` multiplies the fan-in limit `sqrt(6 / fan_in)`; zero gives
    /// all-zero weights.
    pub fn conv<R: Rng + ?Sized>(
        input: Shape,
        filters: usize,
        kh: usize,
        kw: usize,
        relu: bool,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if filters == 0 || kh == 0 || kw == 0 {
            return Err(Error::config("convolution needs filters and kernel sizes of at least 1"));
        }
        let fan_in = input.c * kh * kw;
        let limit = scale * (6.0 / fan_in as f64).sqrt();
        Ok(Layer::Conv(Conv {
            input,
            filters,
            kh,
            kw,
            relu,
            weight: uniform_init(filters * fan_in, limit, rng),
            bias: vec![T::zero(); filters],
        }))
    }

    pub fn dense<R: Rng + ?Sized>(
        input: Shape,
        units: usize,
        relu: bool,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if units == 0 {
            return Err(Error::config("fully connected layer needs at least one unit"));
        }
        let fan_in = input.size();
        let gain = if relu { 6.0 } else { 3.0 };
        let limit = scale * (gain / fan_in as f64).sqrt();
        Ok(Layer::Dense(Dense {
            input,
            units,
            relu,
            weight: uniform_init(units * fan_in, limit, rng),
            bias: vec![T::zero(); units],
        }))
    }

    pub fn params(&self) -> Option<(&[T], &[T])> {
        match self {
            Layer::Conv(c) => Some((&c.weight, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            Layer::Dropout { .. } => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Vec<T>, &mut Vec<T>)> {
        match self {
            Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            Layer::Dropout { .. } => None,
        }
    }

    /// Forward pass over a batch laid out `[channel][batch][spatial]`.
    /// `dropout_rng` is `None` in inference mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &[T],
        batch: usize,
        dropout_rng: Option<&mut R>,
    ) -> (Vec<T>, Cache<T>) {
        match self {
            Layer::Conv(c) => c.forward(x, batch),
            Layer::Dense(d) => d.forward(x, batch),
            Layer::Dropout { rate, .. } => {
                let mask: Vec<T> = match dropout_rng {
                    Some(rng) if *rate > 0.0 => {
                        let keep = T::lit(1.0 / (1.0 - rate));
                        (0..x.len())
                            .map(|_| if rng.random::<f64>() < *rate { T::zero() } else { keep })
                            .collect()
                    }
                    _ => vec![T::one(); x.len()],
                };
                let out = x.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                (out, Cache::Dropout { mask })
            }
        }
    }

    /// Backward pass: returns the input gradient (when requested) and the
    /// parameter gradients `(weight, bias)` for parametric layers.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        grad_out: Vec<T>,
        batch: usize,
        need_input_grad: bool,
    ) -> (Option<Vec<T>>, ParamGrad<T>) {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv { cols, out }) => {
                c.backward(cols, out, grad_out, batch, need_input_grad)
            }
            (Layer::Dense(d), Cache::Dense { input, out }) => {
                d.backward(input, out, grad_out, batch, need_input_grad)
            }
            (Layer::Dropout { .. }, Cache::Dropout { mask }) => {
                let g = grad_out.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                (Some(g), None)
            }
            _ => unreachable!("cache does not belong to this layer"),
        }
    }
}

fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn relu_mask<T: Scalar>(grad: &mut [T], out: &[T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Sums each row of a `rows x cols` row-major matrix.
fn row_sums<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows).map(|r| m[r * cols..(r + 1) * cols].iter().copied().sum()).collect()
}

impl<T: Scalar> Conv<T> {
    fn pads(&self) -> (usize, usize) {
        ((self.kh - 1) / 2, (self.kw - 1) / 2)
    }

    fn k(&self) -> usize {
        self.input.c * self.kh * self.kw
    }

    /// `(c · kh · kw) x (batch · h · w)` patch matrix.
    fn im2col(&self, x: &[T], batch: usize) -> Vec<T> {
        let Shape { c: ch, h, w } = self.input;
        let (ph, pw) = self.pads();
        let cols_n = batch * h * w;
        let mut cols = vec![T::zero(); self.k() * cols_n];
        for c in 0..ch {
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let row = (c * self.kh + di) * self.kw + dj;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..batch {
                        let src = &x[(c * batch + b) * h * w..(c * batch + b + 1) * h * w];
                        for i in 0..h {
                            let si = i + di;
                            if si < ph || si - ph >= h {
                                continue;
                            }
                            let si = si - ph;
                            for j in 0..w {
                                let sj = j + dj;
                                if sj < pw || sj - pw >= w {
                                    continue;
                                }
                                dst[(b * h + i) * w + j] = src[si * w + sj - pw];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], batch: usize) -> Vec<T> {
        let Shape { c: ch, h, w } = self.input;
        let (ph, pw) = self.pads();
        let cols_n = batch * h * w;
        let mut dx = vec![T::zero(); ch * cols_n];
        for c in 0..ch {
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let row = (c * self.kh + di) * self.kw + dj;
                    let src = &dcols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..batch {
                        let dst = &mut dx[(c * batch + b) * h * w..(c * batch + b + 1) * h * w];
                        for i in 0..h {
                            let si = i + di;
                            if si < ph || si - ph >= h {
                                continue;
                            }
                            let si = si - ph;
                            for j in 0..w {
                                let sj = j + dj;
                                if sj < pw || sj - pw >= w {
                                    continue;
                                }
                                dst[si * w + sj - pw] = dst[si * w + sj - pw] + src[(b * h + i) * w + j];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, x: &[T], batch: usize) -> (Vec<T>, Cache<T>) {
        let n = batch * self.input.spatial();
        let cols = self.im2col(x, batch);
        let mut out = vec![T::zero(); self.filters * n];
        for (f, row) in out.chunks_exact_mut(n).enumerate() {
            row.fill(self.bias[f]);
        }
        gemm(false, false, self.filters, n, self.k(), &self.weight, &cols, T::one(), &mut out);
        if self.relu {
            relu_in_place(&mut out);
        }
        let cache_out = if self.relu { out.clone() } else { Vec::new() };
        (out, Cache::Conv { cols, out: cache_out })
    }

    fn backward(
        &self,
        cols: &[T],
        out: &[T],
        mut g: Vec<T>,
        batch: usize,
        need_input_grad: bool,
    ) -> (Option<Vec<T>>, ParamGrad<T>) {
        if self.relu {
            relu_mask(&mut g, out);
        }
        let n = batch * self.input.spatial();
        let k = self.k();
        let mut dw = vec![T::zero(); self.filters * k];
        gemm(false, true, self.filters, k, n, &g, cols, T::zero(), &mut dw);
        let db = row_sums(&g, self.filters, n);
        let dx = need_input_grad.then(|| {
            let mut dcols = vec![T::zero(); k * n];
            gemm(true, false, k, n, self.filters, &self.weight, &g, T::zero(), &mut dcols);
            self.col2im(&dcols, batch)
        });
        (dx, Some((dw, db)))
    }
}

impl<T: Scalar> Dense<T> {
    fn inputs(&self) -> usize {
        self.input.size()
    }

    /// `[c][batch][s]` to `[c · s][batch]`.
    fn to_features(&self, x: &[T], batch: usize) -> Vec<T> {
        let s = self.input.spatial();
        if s == 1 {
            return x.to_vec();
        }
        let mut out = vec![T::zero(); x.len()];
        for c in 0..self.input.c {
            for b in 0..batch {
                for p in 0..s {
                    out[(c * s + p) * batch + b] = x[(c * batch + b) * s + p];
                }
            }
        }
        out
    }

    fn features_to_layout(&self, f: &[T], batch: usize) -> Vec<T> {
        let s = self.input.spatial();
        if s == 1 {
            return f.to_vec();
        }
        let mut out = vec![T::zero(); f.len()];
        for c in 0..self.input.c {
            for b in 0..batch {
                for p in 0..s {
                    out[(c * batch + b) * s + p] = f[(c * s + p) * batch + b];
                }
            }
        }
        out
    }

    fn forward(&self, x: &[T], batch: usize) -> (Vec<T>, Cache<T>) {
        let input = self.to_features(x, batch);
        let mut out = vec![T::zero(); self.units * batch];
        for (u, row) in out.chunks_exact_mut(batch).enumerate() {
            row.fill(self.bias[u]);
        }
        gemm(false, false, self.units, batch, self.inputs(), &self.weight, &input, T::one(), &mut out);
        if self.relu {
            relu_in_place(&mut out);
        }
        let cache_out = if self.relu { out.clone() } else { Vec::new() };
        (out, Cache::Dense { input, out: cache_out })
    }

    fn backward(
        &self,
        input: &[T],
        out: &[T],
        mut g: Vec<T>,
        batch: usize,
        need_input_grad: bool,
    ) -> (Option<Vec<T>>, ParamGrad<T>) {
        if self.relu {
            relu_mask(&mut g, out);
        }
        let fan_in = self.inputs();
        let mut dw = vec![T::zero(); self.units * fan_in];
        gemm(false, true, self.units, fan_in, batch, &g, input, T::zero(), &mut dw);
        let db = row_sums(&g, self.units, batch);
        let dx = need_input_grad.then(|| {
            let mut df = vec![T::zero(); fan_in * batch];
            gemm(true, false, fan_in, batch, self.units, &self.weight, &g, T::zero(), &mut df);
            self.features_to_layout(&df, batch)
        });
        (dx, Some((dw, db)))
    }
}
