//! MNIST / Fashion-MNIST ingestion (IDX), input perturbations and PGM output.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed IDX magic: expected {expected:#010x}, found {found:#010x}")]
    MalformedMagic { expected: u32, found: u32 },
    #[error("image dimensions {rows}x{cols} do not match 28x28")]
    DimensionMismatch { rows: u32, cols: u32 },
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("value {value} at index {index} outside [0, 255]")]
    OutOfRange { index: usize, value: f64 },
    #[error("invalid PGM: {0}")]
    InvalidPgm(String),
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A 28x28 grayscale input image, row-major.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Image {
    pub pixels: [u8; PIXELS],
    pub label: Option<u8>,
}

impl Image {
    pub fn new(pixels: [u8; PIXELS]) -> Self {
        Self { pixels, label: None }
    }

    pub fn zeros() -> Self {
        Self::new([0; PIXELS])
    }

    pub fn from_slice(data: &[u8]) -> Result<Self, DatasetError> {
        let pixels: [u8; PIXELS] = data.try_into().map_err(|_| DatasetError::Truncated {
            needed: PIXELS,
            found: data.len(),
        })?;
        Ok(Self::new(pixels))
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * SIDE + col]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }

    /// Number of pixels strictly above `threshold`.
    pub fn count_above(&self, threshold: u8) -> usize {
        self.pixels.iter().filter(|&&p| p > threshold).count()
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DatasetError> {
    let word = bytes
        .get(offset..offset + 4)
        .ok_or(DatasetError::Truncated { needed: offset + 4, found: bytes.len() })?;
    Ok(u32::from_be_bytes(word.try_into().unwrap()))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DatasetError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DatasetError::MalformedMagic { expected, found });
    }
    Ok(())
}

/// Parses the first `count` images of an in-memory IDX3 image file.
pub fn parse_idx_images(bytes: &[u8], count: usize) -> Result<Vec<Image>, DatasetError> {
    check_magic(bytes, IDX_IMAGE_MAGIC)?;
    let stored = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)?;
    let cols = be_u32(bytes, 12)?;
    if rows as usize != SIDE || cols as usize != SIDE {
        return Err(DatasetError::DimensionMismatch { rows, cols });
    }
    let needed = 16 + count * PIXELS;
    if count > stored || bytes.len() < needed {
        return Err(DatasetError::Truncated { needed, found: bytes.len() });
    }
    bytes[16..needed]
        .chunks_exact(PIXELS)
        .map(Image::from_slice)
        .collect()
}

/// Parses the first `count` labels of an in-memory IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], count: usize) -> Result<Vec<u8>, DatasetError> {
    check_magic(bytes, IDX_LABEL_MAGIC)?;
    let stored = be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if count > stored || bytes.len() < needed {
        return Err(DatasetError::Truncated { needed, found: bytes.len() });
    }
    Ok(bytes[8..needed].to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>, count: usize) -> Result<Vec<Image>, DatasetError> {
    parse_idx_images(&fs::read(path)?, count)
}

pub fn load_idx_labels(path: impl AsRef<Path>, count: usize) -> Result<Vec<u8>, DatasetError> {
    parse_idx_labels(&fs::read(path)?, count)
}

/// Number of images an IDX3 file declares in its header.
pub fn idx_image_count(path: impl AsRef<Path>) -> Result<usize, DatasetError> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, IDX_IMAGE_MAGIC)?;
    Ok(be_u32(&bytes, 4)? as usize)
}

/// Loads images and attaches labels from the companion label file.
pub fn load_labeled(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    count: usize,
) -> Result<Vec<Image>, DatasetError> {
    let mut imgs = load_idx_images(images, count)?;
    let labels = load_idx_labels(labels, count)?;
    for (img, label) in imgs.iter_mut().zip(labels) {
        img.label = Some(label);
    }
    Ok(imgs)
}

/// Index of the first image of each class 0..=9, in class order.
pub fn first_of_each_class(images: &[Image]) -> Vec<usize> {
    (0..10u8)
        .filter_map(|class| images.iter().position(|img| img.label == Some(class)))
        .collect()
}

/// Serializes images back into an IDX3 payload.
pub fn encode_idx_images(images: &[Image]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * PIXELS);
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(SIDE as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(&img.pixels);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerturbationKind {
    None,
    /// Replace every pixel whose value is exactly 0 with `value`.
    ConstantBackground { value: u8 },
    /// Flip the `bits` low bits of each pixel with the given probability.
    LsbFlip { probability: f64, bits: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPerturbation {
    #[serde(flatten)]
    pub kind: PerturbationKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PixelPerturbation {
    fn default() -> Self {
        Self::none()
    }
}

impl PixelPerturbation {
    pub fn none() -> Self {
        Self { kind: PerturbationKind::None, seed: 0 }
    }

    pub fn background(value: u8) -> Self {
        Self { kind: PerturbationKind::ConstantBackground { value }, seed: 0 }
    }

    pub fn lsb_flip(probability: f64, bits: u8, seed: u64) -> Result<Self, DatasetError> {
        let p = Self { kind: PerturbationKind::LsbFlip { probability, bits }, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if let PerturbationKind::LsbFlip { probability, bits } = self.kind {
            if !(0.0..=1.0).contains(&probability) {
                return Err(DatasetError::InvalidPerturbation(format!(
                    "flip probability {probability} outside [0, 1]"
                )));
            }
            if bits != 1 && bits != 2 {
                return Err(DatasetError::InvalidPerturbation(format!(
                    "bit count {bits} must be 1 or 2"
                )));
            }
        }
        Ok(())
    }

    /// True when repeated runs should each see an independently perturbed image.
    pub fn is_stochastic(&self) -> bool {
        matches!(self.kind, PerturbationKind::LsbFlip { probability, .. } if probability > 0.0 && probability < 1.0)
    }
}

/// Applies `p` deterministically, seeding the flip RNG from `p.seed`.
pub fn perturb(image: &Image, p: &PixelPerturbation) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    perturb_with_rng(image, &p.kind, &mut rng)
}

pub fn perturb_with_rng<R: Rng + ?Sized>(image: &Image, kind: &PerturbationKind, rng: &mut R) -> Image {
    let mut out = image.clone();
    match *kind {
        PerturbationKind::None => {}
        PerturbationKind::ConstantBackground { value } => {
            for px in out.pixels.iter_mut().filter(|px| **px == 0) {
                *px = value;
            }
        }
        PerturbationKind::LsbFlip { probability, bits } => {
            let mask = if bits == 2 { 0b11 } else { 0b01 };
            for px in out.pixels.iter_mut() {
                // p = 1 must flip every pixel; gen_bool(1.0) is exact but keep the draw count fixed.
                let draw: f64 = rng.gen();
                if draw < probability {
                    *px ^= mask;
                }
            }
        }
    }
    out
}

/// Writes a binary (P5) PGM with maxval 255. Values are rounded to the nearest integer.
pub fn write_pgm(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    values: &[f64],
) -> Result<(), DatasetError> {
    let bytes = encode_pgm(width, height, values)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>, DatasetError> {
    if values.len() != width * height {
        return Err(DatasetError::Truncated { needed: width * height, found: values.len() });
    }
    let mut payload = Vec::with_capacity(values.len());
    for (index, &value) in values.iter().enumerate() {
        if !(0.0..=255.0).contains(&value) {
            return Err(DatasetError::OutOfRange { index, value });
        }
        payload.push(value.round() as u8);
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_image_pgm(path: impl AsRef<Path>, image: &Image) -> Result<(), DatasetError> {
    write_pgm(path, SIDE, SIDE, &image.as_f64())
}

/// Reads a P5 PGM with maxval 255. Returns (width, height, pixels).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>), DatasetError> {
    decode_pgm(&fs::read(path)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), DatasetError> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DatasetError::InvalidPgm("header ended early".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(DatasetError::InvalidPgm(format!("unsupported magic {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| DatasetError::InvalidPgm(format!("bad header field {s}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(DatasetError::InvalidPgm(format!("maxval {maxval} unsupported")));
    }
    // single whitespace byte separates header and raster
    pos += 1;
    let needed = pos + width * height;
    if bytes.len() < needed {
        return Err(DatasetError::Truncated { needed, found: bytes.len() });
    }
    Ok((width, height, bytes[pos..needed].to_vec()))
}
