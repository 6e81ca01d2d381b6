//! Training-set generation for the twin network, input tensors, label
//! vectors and the binary dataset container.
//!
//! # File layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | content                                        |
//! |--------|------|------------------------------------------------|
//! | 0      | 4    | magic `LSDS`                                   |
//! | 4      | 1    | format version (currently 1)                   |
//! | 5      | 3    | reserved, zero                                 |
//! | 8      | 8    | `u64` length `H` of the JSON header            |
//! | 16     | H    | UTF-8 JSON [`DatasetHeader`]                   |
//! | 16 + H | ...  | per sample: input `f32 × rows·cols·3`, then label `f32 × label_len` |
//!
//! Input tensors are written channel by channel (real, imaginary, magnitude),
//! each channel in column-major order.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{draw_channels, ChannelRealization, LisState, UserChannel};
use crate::config::{snr_db, DbConvention, ScenarioConfig};
use crate::pilots::{make_pilots, receive, receive_all_elements, receive_joint, PilotMatrix};
use crate::rng::{complex_normal, derived, stream};
use crate::{CMatrix, CVector, Error, Result, C64};

pub const MAGIC: &[u8; 4] = b"LSDS";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Direct,
    Cascaded,
}

/// Real three-channel tensor (real part, imaginary part, magnitude) of a
/// complex `rows x cols` map. Each channel is stored column-major, so the
/// channel block is exactly the vector that was refolded.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Tensor3<T> {
    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> T {
        self.data[channel * self.plane() + col * self.rows + row]
    }
}

/// Refolds a complex vector column-major into `rows x (len / rows)` and
/// splits it into the three real channels.
pub fn three_channel(y: &[C64], rows: usize) -> Result<Tensor3<f64>> {
    if rows == 0 || y.is_empty() || !y.len().is_multiple_of(rows) {
        return Err(Error::dim(format!("cannot refold {} entries into {rows} rows", y.len())));
    }
    let mut data = Vec::with_capacity(3 * y.len());
    data.extend(y.iter().map(|z| z.re));
    data.extend(y.iter().map(|z| z.im));
    data.extend(y.iter().map(|z| z.norm()));
    Ok(Tensor3 { rows, cols: y.len() / rows, data })
}

/// Inverse of [`three_channel`] using the first two channels.
pub fn unfold(t: &Tensor3<f64>) -> Vec<C64> {
    t.channel(0).iter().zip(t.channel(1)).map(|(&re, &im)| C64::new(re, im)).collect()
}

/// How the phase-I signal is folded into a 2-D map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    /// `sqrt(P) x sqrt(P)`; P must be a perfect square.
    #[default]
    Square,
    /// `r x P/r` with `r` the largest divisor of P not above `sqrt(P)`.
    Rectangular,
}

fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

impl InputShape {
    pub fn rows_for(self, n: usize) -> Result<usize> {
        let r = isqrt(n);
        match self {
            InputShape::Square if r * r == n => Ok(r),
            InputShape::Square => Err(Error::dim(format!(
                "{n} pilots cannot form a square input; use the rectangular layout"
            ))),
            InputShape::Rectangular => Ok((1..=r.max(1)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)),
        }
    }
}

/// Direct-channel input: the phase-I row refolded into `sqrt(M) x sqrt(M)`.
pub fn build_input_direct(y_direct: &CVector, shape: InputShape) -> Result<Tensor3<f64>> {
    three_channel(y_direct.as_slice(), shape.rows_for(y_direct.len())?)
}

/// Cascaded-channel input: the L phase-II rows stacked into one vector
/// and refolded column-major into `L x P`.
pub fn build_input_cascaded(y_cols: &[CVector]) -> Result<Tensor3<f64>> {
    let first = y_cols.first().ok_or(Error::Empty("phase-II row list"))?.len();
    if y_cols.iter().any(|y| y.len() != first) {
        return Err(Error::dim("phase-II rows differ in length"));
    }
    let stacked: Vec<C64> = y_cols.iter().flat_map(|y| y.iter().copied()).collect();
    three_channel(&stacked, y_cols.len())
}

/// Cascaded-channel input from the joint (all-on) signal, refolded `L x M`.
pub fn build_input_joint(y_joint: &CVector, l: usize) -> Result<Tensor3<f64>> {
    three_channel(y_joint.as_slice(), l)
}

/// `[Re h; Im h]`.
pub fn direct_label(h: &CVector) -> Vec<f64> {
    h.iter().map(|z| z.re).chain(h.iter().map(|z| z.im)).collect()
}

/// `[Re vec G; Im vec G]` with column-major `vec`.
pub fn cascaded_label(g: &CMatrix) -> Vec<f64> {
    g.iter().map(|z| z.re).chain(g.iter().map(|z| z.im)).collect()
}

/// Label vectors `(z_DC, z_CC)` of one user.
pub fn build_labels(user: &UserChannel) -> (Vec<f64>, Vec<f64>) {
    (direct_label(&user.h_direct), cascaded_label(&user.g_cascaded))
}

fn split_re_im(z: &[f64]) -> Result<Vec<C64>> {
    if !z.len().is_multiple_of(2) {
        return Err(Error::dim("label length must be even"));
    }
    let half = z.len() / 2;
    Ok((0..half).map(|i| C64::new(z[i], z[half + i])).collect())
}

/// Inverse of [`direct_label`].
pub fn unpack_direct(z: &[f64]) -> Result<CVector> {
    Ok(CVector::from_vec(split_re_im(z)?))
}

/// Inverse of [`cascaded_label`].
pub fn unpack_cascaded(z: &[f64], m: usize, l: usize) -> Result<CMatrix> {
    if z.len() != 2 * m * l {
        return Err(Error::dim(format!("label of length {} is not 2 M L = {}", z.len(), 2 * m * l)));
    }
    Ok(CMatrix::from_vec(m, l, split_re_im(z)?))
}

/// Adds CN(0, σ²) to every entry, σ² solved per entry from the label SNR.
pub fn noisy_label<R: Rng + ?Sized>(
    entries: &[C64],
    snr_label_db: f64,
    convention: DbConvention,
    rng: &mut R,
) -> Vec<C64> {
    if snr_label_db == f64::INFINITY {
        return entries.to_vec();
    }
    entries
        .iter()
        .map(|&z| z + complex_normal(rng, convention.variance(z.norm_sqr(), snr_label_db)))
        .collect()
}

/// Which phase-II signal feeds the cascaded network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CascadedInput {
    #[default]
    PerElement,
    Joint,
}

fn default_fraction() -> f64 {
    0.7
}

/// Knobs of the training-data generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// Noisy-label copies per realization.
    #[serde(rename = "U")]
    pub u: usize,
    /// Channel realizations.
    #[serde(rename = "V")]
    pub v: usize,
    /// Label SNRs in dB (`"inf"` for clean labels).
    #[serde(with = "snr_db::list")]
    pub label_snrs_db: Vec<f64>,
    /// Received SNRs in dB used while generating inputs.
    #[serde(with = "snr_db::list")]
    pub train_snrs_db: Vec<f64>,
    #[serde(default)]
    pub cascaded_input: CascadedInput,
    #[serde(default)]
    pub input_shape: InputShape,
    #[serde(default)]
    pub eps_on: f64,
    #[serde(default)]
    pub eps_off: f64,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
}

impl GenParams {
    pub fn combinations(&self) -> usize {
        self.label_snrs_db.len() * self.train_snrs_db.len()
    }

    /// Samples per dataset: `U V K` times the SNR combinations.
    pub fn total(&self, k: usize) -> usize {
        self.u * self.v * k * self.combinations()
    }

    fn validate(&self) -> Result<()> {
        if self.u == 0 || self.v == 0 {
            return Err(Error::config("U and V must be at least 1"));
        }
        if self.label_snrs_db.is_empty() || self.train_snrs_db.is_empty() {
            return Err(Error::config("label and train SNR lists must be nonempty"));
        }
        if self.label_snrs_db.iter().chain(&self.train_snrs_db).any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::config("SNR values must be numbers or +inf"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub user: u32,
    pub u: u32,
    pub v: u32,
    #[serde(with = "snr_db")]
    pub snr_db: f64,
    #[serde(with = "snr_db")]
    pub label_snr_db: f64,
}

/// One training pair, stored at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor3<f32>,
    pub label: Vec<f32>,
    pub kind: SampleKind,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn new(input: &Tensor3<f64>, label: &[f64], kind: SampleKind, meta: SampleMeta) -> Self {
        Sample {
            input: Tensor3 {
                rows: input.rows,
                cols: input.cols,
                data: input.data.iter().map(|&x| x as f32).collect(),
            },
            label: label.iter().map(|&x| x as f32).collect(),
            kind,
            meta,
        }
    }
}

/// Per-channel standardization statistics of the input tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats { mean: [0.0; 3], std: [1.0; 3] }
    }
}

impl NormStats {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for s in samples {
            let plane = s.input.plane();
            for (c, (sum_c, sq_c)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &x in s.input.channel(c) {
                    *sum_c += x as f64;
                    *sq_c += (x as f64) * (x as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return NormStats::default();
        }
        let n = count as f64;
        let mut stats = NormStats::default();
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            stats.mean[c] = mean;
            stats.std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        stats
    }

    /// Standardizes a tensor channel by channel into `out`.
    pub fn apply<T: Copy + Into<f64>>(&self, input: &Tensor3<T>, out: &mut Vec<f64>) {
        out.clear();
        let plane = input.plane();
        for (i, &x) in input.data.iter().enumerate() {
            let c = i / plane;
            out.push((x.into() - self.mean[c]) / self.std[c]);
        }
    }
}

/// One of the two datasets produced by [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: SampleKind,
    pub samples: Vec<Sample>,
    pub config: ScenarioConfig,
    pub gen: GenParams,
    pub norm: NormStats,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(rows, cols, label_len)` shared by all samples.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| (s.input.rows, s.input.cols, s.label.len()))
    }
}

/// Channel realization `v` of the generator stream seeded by `seed`.
pub fn realization(config: &ScenarioConfig, seed: u64, v: u64) -> Result<ChannelRealization> {
    draw_channels(config, &mut derived(seed, &[stream::CHANNEL, v]))
}

fn noisy_user<R: Rng + ?Sized>(
    user: &UserChannel,
    snr: f64,
    conv: DbConvention,
    rng: &mut R,
) -> UserChannel {
    let h = noisy_label(user.h_direct.as_slice(), snr, conv, rng);
    let g = noisy_label(user.g_cascaded.as_slice(), snr, conv, rng);
    UserChannel {
        h_direct: CVector::from_vec(h),
        g_cascaded: CMatrix::from_vec(user.g_cascaded.nrows(), user.g_cascaded.ncols(), g),
    }
}

fn samples_for_realization(
    config: &ScenarioConfig,
    gen: &GenParams,
    pilots: &PilotMatrix,
    v: usize,
) -> Result<Vec<(Sample, Sample)>> {
    let ch = realization(config, config.seed, v as u64)?;
    let mut rng = derived(config.seed, &[stream::LABEL_NOISE, v as u64]);
    let off = LisState::all_off(config.l, gen.eps_off)?;
    let mut out = Vec::with_capacity(gen.u * gen.combinations() * config.k);
    for u in 0..gen.u {
        for &snr in &gen.train_snrs_db {
            let noise = crate::config::noise_power_for_snr(config.symbol_power, snr);
            for &label_snr in &gen.label_snrs_db {
                for (k, user) in ch.users.iter().enumerate() {
                    let labelled = noisy_user(user, label_snr, config.db_convention, &mut rng);
                    let y_d = receive(&labelled, &off, pilots, noise, &mut rng)?;
                    let x_cc = match gen.cascaded_input {
                        CascadedInput::PerElement => build_input_cascaded(&receive_all_elements(
                            &labelled, pilots, noise, gen.eps_on, gen.eps_off, &mut rng,
                        )?)?,
                        CascadedInput::Joint => build_input_joint(
                            &receive_joint(&labelled, pilots, noise, gen.eps_on, &mut rng)?,
                            config.l,
                        )?,
                    };
                    let x_dc = build_input_direct(&y_d, gen.input_shape)?;
                    let (z_dc, z_cc) = build_labels(&labelled);
                    let meta = SampleMeta {
                        user: k as u32,
                        u: u as u32,
                        v: v as u32,
                        snr_db: snr,
                        label_snr_db: label_snr,
                    };
                    out.push((
                        Sample::new(&x_dc, &z_dc, SampleKind::Direct, meta),
                        Sample::new(&x_cc, &z_cc, SampleKind::Cascaded, meta),
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Generates the direct and cascaded datasets.
///
/// For each realization `v` (drawn from its own stream derived from
/// `config.seed`), for each noisy-label copy `u`, each training SNR, each
/// label SNR and each user, the noisy channel both generates the received
/// pilots and serves as the label. Realizations are processed in parallel;
/// output order and content do not depend on the thread count.
pub fn generate(config: &ScenarioConfig, gen: &GenParams) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    gen.validate()?;
    let joint = gen.cascaded_input == CascadedInput::Joint;
    let pilots = make_pilots(config.m, config.p, joint.then_some(config.l))?
        .with_symbol_power(config.symbol_power)?;
    let per_v: Vec<Vec<(Sample, Sample)>> = (0..gen.v)
        .into_par_iter()
        .map(|v| samples_for_realization(config, gen, &pilots, v))
        .collect::<Result<_>>()?;
    let (dc, cc): (Vec<Sample>, Vec<Sample>) = per_v.into_iter().flatten().unzip();
    let make = |kind, samples: Vec<Sample>| Dataset {
        kind,
        norm: NormStats::from_samples(&samples),
        samples,
        config: config.clone(),
        gen: gen.clone(),
    };
    Ok((make(SampleKind::Direct, dc), make(SampleKind::Cascaded, cc)))
}

/// Shuffled partition into `floor(T f)` training samples and the rest.
/// Both parts carry normalization statistics of the training part.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train fraction must lie strictly between 0 and 1"));
    }
    let n_train = (ds.len() as f64 * train_fraction).floor() as usize;
    if n_train == 0 {
        return Err(Error::Empty("training partition"));
    }
    if n_train == ds.len() {
        return Err(Error::Empty("validation partition"));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut derived(seed, &[stream::SPLIT]));
    let pick = |ids: &[usize]| -> Vec<Sample> { ids.iter().map(|&i| ds.samples[i].clone()).collect() };
    let train_samples = pick(&idx[..n_train]);
    let val_samples = pick(&idx[n_train..]);
    let norm = NormStats::from_samples(&train_samples);
    let part = |samples| Dataset { kind: ds.kind, samples, config: ds.config.clone(), gen: ds.gen.clone(), norm };
    Ok((part(train_samples), part(val_samples)))
}

/// JSON header of the dataset container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub kind: SampleKind,
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub label_len: usize,
    pub config: ScenarioConfig,
    pub generation: GenParams,
    pub normalization: NormStats,
    pub meta: Vec<SampleMeta>,
}

impl Dataset {
    pub fn header(&self) -> DatasetHeader {
        let (rows, cols, label_len) = self.dims().unwrap_or((0, 0, 0));
        DatasetHeader {
            kind: self.kind,
            count: self.len(),
            rows,
            cols,
            label_len,
            config: self.config.clone(),
            generation: self.gen.clone(),
            normalization: self.norm,
            meta: self.samples.iter().map(|s| s.meta).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = self.header();
        if self.samples.iter().any(|s| {
            (s.input.rows, s.input.cols, s.label.len()) != (header.rows, header.cols, header.label_len)
        }) {
            return Err(Error::dim("samples of one dataset must share their shapes"));
        }
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&[FORMAT_VERSION, 0, 0, 0])?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for s in &self.samples {
            buf.clear();
            for x in s.input.data.iter().chain(&s.label) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: &str| Error::Format { offset: offset as u64, reason: reason.into() };
        if bytes.len() < 16 {
            return Err(fail(bytes.len(), "truncated preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic"));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(fail(4, &format!("unsupported format version {}", bytes[4])));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| fail(8, "header length exceeds file size"))?;
        let header: DatasetHeader = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| fail(16 + e.column().saturating_sub(1), &format!("header: {e}")))?;
        if header.meta.len() != header.count {
            return Err(fail(16, "header meta count differs from sample count"));
        }
        let input_len = header.rows * header.cols * 3;
        let record = 4 * (input_len + header.label_len);
        let expected = body + record * header.count;
        if bytes.len() != expected {
            let at = bytes.len().min(expected);
            return Err(fail(at, &format!("expected {expected} bytes in total, found {}", bytes.len())));
        }
        let kind = header.kind;
        let floats = |start: usize, n: usize| -> Vec<f32> {
            bytes[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        let samples = header
            .meta
            .iter()
            .enumerate()
            .map(|(i, meta)| {
                let at = body + i * record;
                Sample {
                    input: Tensor3 { rows: header.rows, cols: header.cols, data: floats(at, input_len) },
                    label: floats(at + 4 * input_len, header.label_len),
                    kind,
                    meta: *meta,
                }
            })
            .collect();
        Ok(Dataset {
            kind,
            samples,
            config: header.config,
            gen: header.generation,
            norm: header.normalization,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ls::ls_direct;
    use crate::rng::seeded;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn direct_input_shapes() {
        let y = CVector::from_element(64, c(0.5, -0.5));
        let t = build_input_direct(&y, InputShape::Square).unwrap();
        assert_eq!((t.rows, t.cols, t.data.len()), (8, 8, 192));

        let y = CVector::from_element(16, c(1.0, 0.0));
        let t = build_input_direct(&y, InputShape::Square).unwrap();
        assert!(t.channel(0).iter().all(|&x| x == 1.0));
        assert!(t.channel(1).iter().all(|&x| x == 0.0));
        assert!(t.channel(2).iter().all(|&x| x == 1.0));

        let y = CVector::from_vec(vec![c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0), c(0.0, -1.0)]);
        let t = build_input_direct(&y, InputShape::Square).unwrap();
        assert_eq!((t.rows, t.cols), (2, 2));
        assert!(t.channel(2).iter().all(|&x| (x - 1.0).abs() < 1e-15));
        // column-major: second entry lands in row 1, column 0
        assert_eq!(t.at(1, 0, 1), 1.0);
        assert_eq!(t.at(0, 1, 0), -1.0);
    }

    #[test]
    fn non_square_needs_rectangular_layout() {
        let y = CVector::from_element(12, c(1.0, 1.0));
        assert!(build_input_direct(&y, InputShape::Square).is_err());
        let t = build_input_direct(&y, InputShape::Rectangular).unwrap();
        assert_eq!((t.rows, t.cols), (3, 4));
        let t = build_input_direct(&CVector::from_element(7, c(1.0, 1.0)), InputShape::Rectangular).unwrap();
        assert_eq!((t.rows, t.cols), (1, 7));
    }

    #[test]
    fn cascaded_input_refolds_stacked_rows() {
        let rows = vec![
            CVector::from_vec(vec![c(1.0, 0.0), c(2.0, 0.0)]),
            CVector::from_vec(vec![c(3.0, 0.0), c(4.0, 0.0)]),
        ];
        let t = build_input_cascaded(&rows).unwrap();
        assert_eq!((t.rows, t.cols), (2, 2));
        assert_eq!(t.channel(0), &[1.0, 2.0, 3.0, 4.0]);
        let back = unfold(&t);
        let stacked: Vec<C64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        assert_eq!(back, stacked);

        let zeros = vec![CVector::zeros(4); 3];
        let t = build_input_cascaded(&zeros).unwrap();
        assert!(t.data.iter().all(|&x| x == 0.0));

        assert!(build_input_cascaded(&[CVector::zeros(2), CVector::zeros(3)]).is_err());
        assert!(build_input_cascaded(&[]).is_err());
    }

    #[test]
    fn label_examples() {
        assert_eq!(direct_label(&CVector::from_vec(vec![c(1.0, 2.0)])), vec![1.0, 2.0]);
        assert_eq!(cascaded_label(&CMatrix::from_element(1, 1, c(0.0, 1.0))), vec![0.0, 1.0]);
        let g = CMatrix::from_fn(3, 2, |r, col| c(r as f64, col as f64));
        let z = cascaded_label(&g);
        assert_eq!(z.len(), 12);
        assert_eq!(unpack_cascaded(&z, 3, 2).unwrap(), g);
        assert!(unpack_cascaded(&z, 2, 2).is_err());
    }

    #[test]
    fn label_noise_variance() {
        let entries = vec![c(1.0, 0.0); 10_000];
        assert_eq!(noisy_label(&entries, f64::INFINITY, DbConvention::Literal20, &mut seeded(1)), entries);
        let noisy = noisy_label(&entries, 0.0, DbConvention::Literal20, &mut seeded(1));
        let var = noisy.iter().zip(&entries).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / 1e4;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    fn small_gen() -> GenParams {
        GenParams {
            u: 2,
            v: 3,
            label_snrs_db: vec![f64::INFINITY],
            train_snrs_db: vec![10.0],
            cascaded_input: CascadedInput::PerElement,
            input_shape: InputShape::Square,
            eps_on: 0.0,
            eps_off: 0.0,
            train_fraction: 0.7,
        }
    }

    fn small_config() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::desk();
        cfg.k = 4;
        cfg.l = 4;
        cfg
    }

    #[test]
    fn generate_counts_and_shapes() {
        let cfg = small_config();
        let (dc, cc) = generate(&cfg, &small_gen()).unwrap();
        assert_eq!(dc.len(), 24);
        assert_eq!(cc.len(), 24);
        assert_eq!(dc.dims(), Some((4, 4, 32)));
        assert_eq!(cc.dims(), Some((4, 16, 2 * 16 * 4)));
        for s in dc.samples.iter().chain(&cc.samples) {
            for i in 0..s.input.plane() {
                let (re, im, abs) = (s.input.channel(0)[i], s.input.channel(1)[i], s.input.channel(2)[i]);
                assert!(((re * re + im * im).sqrt() - abs).abs() <= 1e-6 * abs.max(1.0));
            }
        }

        let mut gen = small_gen();
        gen.train_snrs_db = vec![10.0, 20.0];
        gen.label_snrs_db = vec![20.0, 30.0, f64::INFINITY];
        assert_eq!(generate(&cfg, &gen).unwrap().0.len(), 24 * 6);
    }

    #[test]
    fn single_sample_label_inverts_to_channel() {
        let mut cfg = small_config();
        cfg.k = 1;
        let mut gen = small_gen();
        gen.u = 1;
        gen.v = 1;
        gen.train_snrs_db = vec![f64::INFINITY];
        let (dc, cc) = generate(&cfg, &gen).unwrap();
        assert_eq!(dc.len(), 1);
        let ch = realization(&cfg, cfg.seed, 0).unwrap();
        let h = unpack_direct(&dc.samples[0].label.iter().map(|&x| x as f64).collect::<Vec<_>>()).unwrap();
        assert!((&h - &ch.users[0].h_direct).norm() / h.norm() < 1e-6);
        let g = unpack_cascaded(&cc.samples[0].label.iter().map(|&x| x as f64).collect::<Vec<_>>(), 16, 4).unwrap();
        assert!((&g - &ch.users[0].g_cascaded).norm() / g.norm() < 1e-6);

        // the same pipeline at 64-bit precision: input inverts to the label
        let pilots = make_pilots(16, 16, None).unwrap();
        let off = LisState::all_off(4, 0.0).unwrap();
        let y = receive(&ch.users[0], &off, &pilots, 0.0, &mut seeded(0)).unwrap();
        let t = build_input_direct(&y, InputShape::Square).unwrap();
        let h_ls = ls_direct(&CVector::from_vec(unfold(&t)), &pilots.x).unwrap();
        let z = direct_label(&h_ls);
        let z_true = build_labels(&ch.users[0]).0;
        let err = z.iter().zip(&z_true).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let cfg = small_config();
        let (a, _) = generate(&cfg, &small_gen()).unwrap();
        let (b, _) = generate(&cfg, &small_gen()).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, b.to_bytes().unwrap());
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn corrupted_files_report_offsets() {
        let (a, _) = generate(&small_config(), &small_gen()).unwrap();
        let bytes = a.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let truncated = &bytes[..bytes.len() - 3];
        match Dataset::from_bytes(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, truncated.len()),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn split_sizes() {
        let cfg = small_config();
        let mut gen = small_gen();
        gen.u = 1;
        gen.v = 5;
        let mut cfg2 = cfg.clone();
        cfg2.k = 2;
        let (ds, _) = generate(&cfg2, &gen).unwrap();
        assert_eq!(ds.len(), 10);
        let (tr, va) = split(&ds, 0.7, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (7, 3));
        let (tr, va) = split(&ds, 0.999, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (9, 1));

        let mut all: Vec<_> = tr.samples.iter().chain(&va.samples).map(|s| (s.meta.v, s.meta.user)).collect();
        all.sort();
        let mut orig: Vec<_> = ds.samples.iter().map(|s| (s.meta.v, s.meta.user)).collect();
        orig.sort();
        assert_eq!(all, orig);

        assert!(split(&ds, 0.05, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
    }
}
