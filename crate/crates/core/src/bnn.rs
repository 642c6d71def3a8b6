//! Inference-only binarized CNN: two 3x3 binary convolution layers, 2x2 max
//! pooling, folded batch norm, sign activation and two binary fully-connected
//! layers.
//!
//! Layer schedule (input size -> output size):
//!
//! | # | layer        | shape                    |
//! |---|--------------|--------------------------|
//! | 1 | conv 3x3x64  | 28x28 -> 28x28x64        |
//! | 2 | max pool 2x2 | 28x28x64 -> 14x14x64     |
//! | 3 | batch norm   | 14x14x64                 |
//! | 4 | sign         | 14x14x64                 |
//! | 5 | conv 3x3x64x64 | 14x14x64 -> 14x14x64   |
//! | 6 | max pool 2x2 | 14x14x64 -> 7x7x64       |
//! | 7 | batch norm   | 7x7x64                   |
//! | 8 | sign         | 7x7x64                   |
//! | 9 | fc           | 3136 -> 500              |
//! | 10| batch norm   | 500                      |
//! | 11| sign         | 500                      |
//! | 12| fc           | 500 -> 10                |
//! | 13| batch norm   | 10                       |
//!
//! Normalized values are Q1.8 fixed point (8 fractional bits) clamped to
//! [-1, +1]; batch-norm parameters are stored as Q16.16.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Image, SIDE};

pub const CHANNELS: usize = 64;
pub const FC1_OUT: usize = 500;
pub const FC1_IN: usize = 7 * 7 * CHANNELS;
pub const CLASSES: usize = 10;

pub const FRAC_BITS: u32 = 8;
pub const FIXED_ONE: i32 = 1 << FRAC_BITS;
pub const PARAM_FRAC_BITS: u32 = 16;
pub const PARAM_ONE: i32 = 1 << PARAM_FRAC_BITS;

const MODEL_MAGIC: &[u8; 4] = b"BNNM";
const MODEL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum BnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pooling needs even dimensions, got {h}x{w}")]
    OddDimension { h: usize, w: usize },
    #[error("weight {0} is not -1 or +1")]
    InvalidWeight(i32),
    #[error("model parse failure: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 3x3 kernel with weights in {-1, +1}, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BinaryKernel3x3 {
    weights: [i8; 9],
}

impl BinaryKernel3x3 {
    pub fn new(weights: [i8; 9]) -> Result<Self, BnnError> {
        if let Some(&bad) = weights.iter().find(|&&w| w != 1 && w != -1) {
            return Err(BnnError::InvalidWeight(bad.into()));
        }
        Ok(Self { weights })
    }

    pub fn all(sign: i8) -> Self {
        Self::new([sign; 9]).expect("sign must be +-1")
    }

    /// Bit i set means weight i is +1.
    pub fn from_bits(bits: u16) -> Self {
        let mut weights = [-1i8; 9];
        for (i, w) in weights.iter_mut().enumerate() {
            if bits >> i & 1 == 1 {
                *w = 1;
            }
        }
        Self { weights }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_bits(rng.gen_range(0..512))
    }

    pub fn weights(&self) -> [i8; 9] {
        self.weights
    }

    pub fn at(&self, a: usize, b: usize) -> i32 {
        self.weights[a * 3 + b].into()
    }

    pub fn negated(&self) -> Self {
        Self { weights: self.weights.map(|w| -w) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Integer,
    /// Q1.8 fixed point, values in [-256, 256] representing [-1, 1].
    FixedQ8,
    Binary,
}

/// H x W x C feature map stored channel-innermost (HWC).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<i32>,
    pub kind: ValueKind,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<i32>, kind: ValueKind) -> Result<Self, BnnError> {
        if data.len() != h * w * c {
            return Err(BnnError::ShapeMismatch(format!(
                "{} values for a {h}x{w}x{c} map",
                data.len()
            )));
        }
        if kind == ValueKind::Binary && data.iter().any(|&v| v != 1 && v != -1) {
            return Err(BnnError::ShapeMismatch("binary map holds a non +-1 value".into()));
        }
        Ok(Self { h, w, c, data, kind })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: i32, kind: ValueKind) -> Self {
        Self { h, w, c, data: vec![value; h * w * c], kind }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> i32 {
        self.data[self.idx(y, x, ch)]
    }

    pub fn flatten(&self) -> &[i32] {
        &self.data
    }
}

/// Folded per-channel affine normalization, parameters in Q16.16.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub scale: Vec<i32>,
    pub shift: Vec<i32>,
}

impl BatchNorm {
    pub fn from_f64(scale: &[f64], shift: &[f64]) -> Self {
        let q = |v: f64| (v * f64::from(PARAM_ONE)).round() as i32;
        Self {
            scale: scale.iter().map(|&v| q(v)).collect(),
            shift: shift.iter().map(|&v| q(v)).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Dense binary weight matrix, rows x cols, entries in {-1, +1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<i8>,
}

impl BinaryMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self, BnnError> {
        if data.len() != rows * cols {
            return Err(BnnError::ShapeMismatch(format!("{} weights for {rows}x{cols}", data.len())));
        }
        if let Some(&bad) = data.iter().find(|&&w| w != 1 && w != -1) {
            return Err(BnnError::InvalidWeight(bad.into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.data
    }
}

/// First-layer convolution of the raw image with one kernel, zero padding 1.
pub fn conv2d_first_layer(image: &Image, kernel: &BinaryKernel3x3) -> Vec<i32> {
    let mut out = vec![0i32; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut acc = 0i32;
            for a in 0..3 {
                let Some(iy) = (y + a).checked_sub(1).filter(|&v| v < SIDE) else { continue };
                for b in 0..3 {
                    let Some(ix) = (x + b).checked_sub(1).filter(|&v| v < SIDE) else { continue };
                    acc += kernel.at(a, b) * i32::from(image.get(iy, ix));
                }
            }
            out[y * SIDE + x] = acc;
        }
    }
    out
}

/// All 64 first-layer output maps as a 28x28x64 integer map.
pub fn conv_layer1(image: &Image, kernels: &[BinaryKernel3x3]) -> FeatureMap {
    let c = kernels.len();
    let mut data = vec![0i32; SIDE * SIDE * c];
    for (ch, k) in kernels.iter().enumerate() {
        for (i, v) in conv2d_first_layer(image, k).into_iter().enumerate() {
            data[i * c + ch] = v;
        }
    }
    FeatureMap { h: SIDE, w: SIDE, c, data, kind: ValueKind::Integer }
}

/// Binary-input convolution summed over all input maps, zero padding 1,
/// stride 1. `kernels[out * in_c + in]`.
pub fn conv2d_binary_layer(
    input: &FeatureMap,
    kernels: &[BinaryKernel3x3],
    out_channels: usize,
) -> Result<FeatureMap, BnnError> {
    if input.kind != ValueKind::Binary {
        return Err(BnnError::ShapeMismatch("binary convolution needs a binary input map".into()));
    }
    if kernels.len() != out_channels * input.c {
        return Err(BnnError::ShapeMismatch(format!(
            "{} kernels for {} inputs x {out_channels} outputs",
            kernels.len(),
            input.c
        )));
    }
    let (h, w, in_c) = (input.h, input.w, input.c);
    let mut data = vec![0i32; h * w * out_channels];
    for y in 0..h {
        for x in 0..w {
            for a in 0..3 {
                let Some(iy) = (y + a).checked_sub(1).filter(|&v| v < h) else { continue };
                for b in 0..3 {
                    let Some(ix) = (x + b).checked_sub(1).filter(|&v| v < w) else { continue };
                    let base = input.idx(iy, ix, 0);
                    let pixels = &input.data[base..base + in_c];
                    for o in 0..out_channels {
                        let ks = &kernels[o * in_c..(o + 1) * in_c];
                        let s: i32 = ks.iter().zip(pixels).map(|(k, &p)| k.at(a, b) * p).sum();
                        data[(y * w + x) * out_channels + o] += s;
                    }
                }
            }
        }
    }
    Ok(FeatureMap { h, w, c: out_channels, data, kind: ValueKind::Integer })
}

pub fn max_pool_2x2(input: &FeatureMap) -> Result<FeatureMap, BnnError> {
    if !input.h.is_multiple_of(2) || !input.w.is_multiple_of(2) {
        return Err(BnnError::OddDimension { h: input.h, w: input.w });
    }
    let (h, w, c) = (input.h / 2, input.w / 2, input.c);
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| input.get(2 * y + dy, 2 * x + dx, ch))
                    .max()
                    .unwrap();
                data.push(m);
            }
        }
    }
    Ok(FeatureMap { h, w, c, data, kind: input.kind })
}

fn div_round_half_up(num: i64, shift: u32) -> i64 {
    (num + (1i64 << (shift - 1))) >> shift
}

/// `clamp(scale * x + shift, -1, 1)` in Q1.8, rounding half up.
pub fn batch_norm(input: &FeatureMap, bn: &BatchNorm) -> Result<FeatureMap, BnnError> {
    if bn.scale.len() != input.c || bn.shift.len() != input.c {
        return Err(BnnError::ShapeMismatch(format!(
            "batch norm has {} channels, map has {}",
            bn.channels(),
            input.c
        )));
    }
    let in_frac = if input.kind == ValueKind::FixedQ8 { FRAC_BITS } else { 0 };
    let shift_bits = PARAM_FRAC_BITS + in_frac - FRAC_BITS;
    let data = input
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % input.c;
            let acc = i64::from(bn.scale[ch]) * i64::from(v) + (i64::from(bn.shift[ch]) << in_frac);
            div_round_half_up(acc, shift_bits).clamp(-i64::from(FIXED_ONE), i64::from(FIXED_ONE)) as i32
        })
        .collect();
    Ok(FeatureMap { h: input.h, w: input.w, c: input.c, data, kind: ValueKind::FixedQ8 })
}

/// +1 for values >= 0, -1 otherwise.
pub fn sign_nonlinearity(input: &FeatureMap) -> FeatureMap {
    let data = input.data.iter().map(|&v| if v >= 0 { 1 } else { -1 }).collect();
    FeatureMap { h: input.h, w: input.w, c: input.c, data, kind: ValueKind::Binary }
}

pub fn fully_connected(input: &[i32], weights: &BinaryMatrix) -> Result<Vec<i32>, BnnError> {
    if input.len() != weights.cols {
        return Err(BnnError::ShapeMismatch(format!(
            "input length {} vs {} weight columns",
            input.len(),
            weights.cols
        )));
    }
    Ok((0..weights.rows)
        .map(|r| weights.row(r).iter().zip(input).map(|(&w, &x)| i32::from(w) * x).sum())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BnnModel {
    pub conv1: Vec<BinaryKernel3x3>,
    /// Indexed `out * 64 + in`.
    pub conv2: Vec<BinaryKernel3x3>,
    pub bn3: BatchNorm,
    pub bn7: BatchNorm,
    pub bn10: BatchNorm,
    pub bn13: BatchNorm,
    pub fc1: BinaryMatrix,
    pub fc2: BinaryMatrix,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inference {
    /// Q1.8 scores after the final batch norm.
    pub scores: [i32; CLASSES],
    pub class: usize,
}

fn random_bn<R: Rng + ?Sized>(rng: &mut R, channels: usize, scale: (f64, f64), shift: (f64, f64)) -> BatchNorm {
    let s: Vec<f64> = (0..channels).map(|_| rng.gen_range(scale.0..scale.1)).collect();
    let t: Vec<f64> = (0..channels).map(|_| rng.gen_range(shift.0..shift.1)).collect();
    BatchNorm::from_f64(&s, &t)
}

impl BnnModel {
    /// Synthetic model: weights uniform over {-1, +1}; batch-norm scales drawn
    /// from ranges sized to each layer's pre-activation span (layer 3:
    /// [1/2048, 1/256], layer 7: [1/512, 1/64], layer 10: [1/1024, 1/128],
    /// layer 13: [1/256, 1/32]) and shifts from [-0.25, 0.25].
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = (0..CHANNELS).map(|_| BinaryKernel3x3::random(&mut rng)).collect();
        let conv2 = (0..CHANNELS * CHANNELS).map(|_| BinaryKernel3x3::random(&mut rng)).collect();
        let shift = (-0.25, 0.25);
        let bn3 = random_bn(&mut rng, CHANNELS, (1.0 / 2048.0, 1.0 / 256.0), shift);
        let bn7 = random_bn(&mut rng, CHANNELS, (1.0 / 512.0, 1.0 / 64.0), shift);
        let fc1 = BinaryMatrix::random(FC1_OUT, FC1_IN, &mut rng);
        let bn10 = random_bn(&mut rng, FC1_OUT, (1.0 / 1024.0, 1.0 / 128.0), shift);
        let fc2 = BinaryMatrix::random(CLASSES, FC1_OUT, &mut rng);
        let bn13 = random_bn(&mut rng, CLASSES, (1.0 / 256.0, 1.0 / 32.0), shift);
        Self { conv1, conv2, bn3, bn7, bn10, bn13, fc1, fc2 }
    }

    pub fn validate(&self) -> Result<(), BnnError> {
        let expect = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(BnnError::ShapeMismatch(format!("{what}: {got} != {want}")))
            }
        };
        expect("conv1 kernels", self.conv1.len(), CHANNELS)?;
        expect("conv2 kernels", self.conv2.len(), CHANNELS * CHANNELS)?;
        expect("bn3 channels", self.bn3.channels(), CHANNELS)?;
        expect("bn7 channels", self.bn7.channels(), CHANNELS)?;
        expect("bn10 channels", self.bn10.channels(), FC1_OUT)?;
        expect("bn13 channels", self.bn13.channels(), CLASSES)?;
        expect("fc1 rows", self.fc1.rows, FC1_OUT)?;
        expect("fc1 cols", self.fc1.cols, FC1_IN)?;
        expect("fc2 rows", self.fc2.rows, CLASSES)?;
        expect("fc2 cols", self.fc2.cols, FC1_OUT)
    }

    /// Kernel 1 of layer 1, the one the attack observes.
    pub fn first_kernel(&self) -> BinaryKernel3x3 {
        self.conv1[0]
    }

    pub fn infer(&self, image: &Image) -> Result<Inference, BnnError> {
        let x = conv_layer1(image, &self.conv1);
        let x = max_pool_2x2(&x)?;
        let x = sign_nonlinearity(&batch_norm(&x, &self.bn3)?);
        let x = conv2d_binary_layer(&x, &self.conv2, CHANNELS)?;
        let x = max_pool_2x2(&x)?;
        let x = sign_nonlinearity(&batch_norm(&x, &self.bn7)?);
        let x = fully_connected(x.flatten(), &self.fc1)?;
        let x = FeatureMap::new(1, 1, FC1_OUT, x, ValueKind::Integer)?;
        let x = sign_nonlinearity(&batch_norm(&x, &self.bn10)?);
        let x = fully_connected(x.flatten(), &self.fc2)?;
        let x = FeatureMap::new(1, 1, CLASSES, x, ValueKind::Integer)?;
        let x = batch_norm(&x, &self.bn13)?;
        let scores: [i32; CLASSES] = x.data.try_into().expect("ten scores");
        Ok(Inference { scores, class: argmax_lowest(&scores) })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BnnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BnnError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Container layout: magic `BNNM`, u16 version, u16 section count, then a
    /// table of (tag[4], rows u32, cols u32, byte length u32) followed by the
    /// section payloads and a trailing SHA-256 over everything before it.
    /// Weight sections are bitplanes (+1 -> 1, -1 -> 0), MSB first, zero
    /// padded to a byte; batch-norm sections are little-endian i32 pairs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let sections: Vec<([u8; 4], usize, usize, Vec<u8>)> = vec![
            (*b"CNV1", CHANNELS, 9, pack_bits(self.conv1.iter().flat_map(|k| k.weights()))),
            (*b"CNV2", CHANNELS * CHANNELS, 9, pack_bits(self.conv2.iter().flat_map(|k| k.weights()))),
            (*b"BN03", CHANNELS, 2, pack_bn(&self.bn3)),
            (*b"BN07", CHANNELS, 2, pack_bn(&self.bn7)),
            (*b"FC09", FC1_OUT, FC1_IN, pack_bits(self.fc1.as_slice().iter().copied())),
            (*b"BN10", FC1_OUT, 2, pack_bn(&self.bn10)),
            (*b"FC12", CLASSES, FC1_OUT, pack_bits(self.fc2.as_slice().iter().copied())),
            (*b"BN13", CLASSES, 2, pack_bn(&self.bn13)),
        ];
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u16).to_le_bytes());
        for (tag, rows, cols, payload) in &sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(*rows as u32).to_le_bytes());
            out.extend_from_slice(&(*cols as u32).to_le_bytes());
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        }
        for (_, _, _, payload) in &sections {
            out.extend_from_slice(payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BnnError> {
        let parse = |m: &str| BnnError::Parse(m.to_string());
        if bytes.len() < 8 + 32 || &bytes[..4] != MODEL_MAGIC {
            return Err(parse("missing BNNM magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(parse("checksum mismatch"));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != MODEL_VERSION {
            return Err(BnnError::Parse(format!("unsupported version {version}")));
        }
        let count = u16::from_le_bytes([body[6], body[7]]) as usize;
        let table_end = 8 + count * 16;
        if body.len() < table_end {
            return Err(parse("truncated section table"));
        }
        let mut cursor = table_end;
        let mut sections = std::collections::HashMap::new();
        for i in 0..count {
            let e = &body[8 + i * 16..8 + (i + 1) * 16];
            let tag: [u8; 4] = e[..4].try_into().unwrap();
            let rows = u32::from_le_bytes(e[4..8].try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(e[8..12].try_into().unwrap()) as usize;
            let len = u32::from_le_bytes(e[12..16].try_into().unwrap()) as usize;
            let payload = body
                .get(cursor..cursor + len)
                .ok_or_else(|| parse("truncated section payload"))?;
            cursor += len;
            sections.insert(tag, (rows, cols, payload));
        }
        if cursor != body.len() {
            return Err(parse("trailing bytes after sections"));
        }
        let section = |tag: &[u8; 4], rows: usize, cols: usize| -> Result<&[u8], BnnError> {
            let &(r, c, p) = sections
                .get(tag)
                .ok_or_else(|| BnnError::Parse(format!("missing section {}", String::from_utf8_lossy(tag))))?;
            if (r, c) != (rows, cols) {
                return Err(BnnError::Parse(format!(
                    "section {} has shape {r}x{c}, expected {rows}x{cols}",
                    String::from_utf8_lossy(tag)
                )));
            }
            Ok(p)
        };
        let kernels = |bits: Vec<i8>| -> Result<Vec<BinaryKernel3x3>, BnnError> {
            bits.chunks_exact(9).map(|c| BinaryKernel3x3::new(c.try_into().unwrap())).collect()
        };
        let conv1 = kernels(unpack_bits(section(b"CNV1", CHANNELS, 9)?, CHANNELS * 9)?)?;
        let conv2 = kernels(unpack_bits(section(b"CNV2", CHANNELS * CHANNELS, 9)?, CHANNELS * CHANNELS * 9)?)?;
        let bn3 = unpack_bn(section(b"BN03", CHANNELS, 2)?, CHANNELS)?;
        let bn7 = unpack_bn(section(b"BN07", CHANNELS, 2)?, CHANNELS)?;
        let fc1 = BinaryMatrix::new(
            FC1_OUT,
            FC1_IN,
            unpack_bits(section(b"FC09", FC1_OUT, FC1_IN)?, FC1_OUT * FC1_IN)?,
        )?;
        let bn10 = unpack_bn(section(b"BN10", FC1_OUT, 2)?, FC1_OUT)?;
        let fc2 = BinaryMatrix::new(
            CLASSES,
            FC1_OUT,
            unpack_bits(section(b"FC12", CLASSES, FC1_OUT)?, CLASSES * FC1_OUT)?,
        )?;
        let bn13 = unpack_bn(section(b"BN13", CLASSES, 2)?, CLASSES)?;
        let model = Self { conv1, conv2, bn3, bn7, bn10, bn13, fc1, fc2 };
        model.validate()?;
        Ok(model)
    }
}

fn argmax_lowest(scores: &[i32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn pack_bits(weights: impl Iterator<Item = i8>) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, w) in weights.enumerate() {
        if i % 8 == 0 {
            out.push(0);
        }
        if w == 1 {
            *out.last_mut().unwrap() |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<i8>, BnnError> {
    if bytes.len() != n.div_ceil(8) {
        return Err(BnnError::Parse(format!("bitplane holds {} bytes for {n} weights", bytes.len())));
    }
    let pad = bytes.len() * 8 - n;
    if pad > 0 && bytes[bytes.len() - 1] & ((1u8 << pad) - 1) != 0 {
        return Err(BnnError::Parse("nonzero bitplane padding".into()));
    }
    Ok((0..n)
        .map(|i| if bytes[i / 8] & (0x80 >> (i % 8)) != 0 { 1 } else { -1 })
        .collect())
}

fn pack_bn(bn: &BatchNorm) -> Vec<u8> {
    bn.scale
        .iter()
        .zip(&bn.shift)
        .flat_map(|(s, t)| s.to_le_bytes().into_iter().chain(t.to_le_bytes()))
        .collect()
}

fn unpack_bn(bytes: &[u8], channels: usize) -> Result<BatchNorm, BnnError> {
    if bytes.len() != channels * 8 {
        return Err(BnnError::Parse(format!("batch norm section has {} bytes", bytes.len())));
    }
    let (scale, shift) = bytes
        .chunks_exact(8)
        .map(|c| {
            (
                i32::from_le_bytes(c[..4].try_into().unwrap()),
                i32::from_le_bytes(c[4..].try_into().unwrap()),
            )
        })
        .unzip();
    Ok(BatchNorm { scale, shift })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PIXELS;

    #[test]
    fn impulse_response_of_all_ones_kernel() {
        let mut px = [0u8; PIXELS];
        px[14 * SIDE + 14] = 255;
        let out = conv2d_first_layer(&Image::new(px), &BinaryKernel3x3::all(1));
        for y in 0..SIDE {
            for x in 0..SIDE {
                let expect = if y.abs_diff(14) <= 1 && x.abs_diff(14) <= 1 { 255 } else { 0 };
                assert_eq!(out[y * SIDE + x], expect, "({y},{x})");
            }
        }
        assert!(conv2d_first_layer(&Image::zeros(), &BinaryKernel3x3::from_bits(0x1a5))
            .iter()
            .all(|&v| v == 0));
    }

    #[test]
    fn layer2_constant_inputs() {
        let input = FeatureMap::filled(14, 14, CHANNELS, 1, ValueKind::Binary);
        let plus = vec![BinaryKernel3x3::all(1); CHANNELS * CHANNELS];
        let minus = vec![BinaryKernel3x3::all(-1); CHANNELS * CHANNELS];
        let out = conv2d_binary_layer(&input, &plus, CHANNELS).unwrap();
        assert_eq!(out.get(5, 5, 3), 576);
        assert_eq!(out.get(0, 0, 0), 4 * 64);
        assert_eq!(conv2d_binary_layer(&input, &minus, CHANNELS).unwrap().get(7, 7, 63), -576);
        assert!(conv2d_binary_layer(&input, &plus[..10], CHANNELS).is_err());
    }

    #[test]
    fn pooling() {
        let m = FeatureMap::new(2, 2, 1, vec![1, 2, 3, 4], ValueKind::Integer).unwrap();
        assert_eq!(max_pool_2x2(&m).unwrap().data, vec![4]);
        let c = FeatureMap::filled(4, 6, 2, -7, ValueKind::Integer);
        assert!(max_pool_2x2(&c).unwrap().data.iter().all(|&v| v == -7));
        let odd = FeatureMap::filled(3, 4, 1, 0, ValueKind::Integer);
        assert!(matches!(max_pool_2x2(&odd), Err(BnnError::OddDimension { .. })));
    }

    #[test]
    fn batch_norm_edge_cases() {
        let m = FeatureMap::new(1, 1, 3, vec![-200, 17, 256], ValueKind::FixedQ8).unwrap();
        let zero = BatchNorm::from_f64(&[0.0; 3], &[0.0; 3]);
        assert!(batch_norm(&m, &zero).unwrap().data.iter().all(|&v| v == 0));
        let ident = BatchNorm::from_f64(&[1.0; 3], &[0.0; 3]);
        assert_eq!(batch_norm(&m, &ident).unwrap().data, vec![-200, 17, 256]);
        let big = FeatureMap::new(1, 1, 1, vec![1000], ValueKind::Integer).unwrap();
        assert_eq!(batch_norm(&big, &BatchNorm::from_f64(&[1.0], &[0.0])).unwrap().data, vec![256]);
    }

    #[test]
    fn sign_tie_rule() {
        let m = FeatureMap::new(1, 1, 3, vec![128, -128, 0], ValueKind::FixedQ8).unwrap();
        assert_eq!(sign_nonlinearity(&m).data, vec![1, -1, 1]);
    }

    #[test]
    fn fc_simple_cases() {
        let ones = BinaryMatrix::new(2, 4, vec![1; 8]).unwrap();
        assert_eq!(fully_connected(&[1, 1, 1, 1], &ones).unwrap(), vec![4, 4]);
        let w = BinaryMatrix::new(1, 4, vec![1, -1, 1, -1]).unwrap();
        assert_eq!(fully_connected(&[1, 1, 1, 1], &w).unwrap(), vec![0]);
        assert!(fully_connected(&[1, 1], &w).is_err());
        assert!(BinaryMatrix::new(1, 2, vec![1, 2]).is_err());
    }

    #[test]
    fn random_model_deterministic_and_roundtrips() {
        let a = BnnModel::random(1);
        assert_eq!(a, BnnModel::random(1));
        assert_ne!(a.conv1, BnnModel::random(2).conv1);
        a.validate().unwrap();
        let back = BnnModel::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn edited_model_is_rejected() {
        let mut bytes = BnnModel::random(3).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(BnnModel::from_bytes(&bytes), Err(BnnError::Parse(_))));
        let mut bytes = BnnModel::random(3).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(BnnModel::from_bytes(&bytes), Err(BnnError::Parse(_))));
    }

    #[test]
    fn kernel_rejects_non_binary() {
        assert!(matches!(
            BinaryKernel3x3::new([1, 1, 1, 1, 2, 1, 1, 1, 1]),
            Err(BnnError::InvalidWeight(2))
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_lowest(&[3, 7, 7, 1]), 1);
        assert_eq!(argmax_lowest(&[0; 10]), 0);
    }
}
