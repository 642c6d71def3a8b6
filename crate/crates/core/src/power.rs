//! Cycle-level model of the line-buffer convolution unit running the first
//! kernel of the first layer, and the per-cycle power proxy it produces.

use serde::{Deserialize, Serialize};

use crate::bnn::BinaryKernel3x3;
use crate::dataset::{Image, PIXELS, SIDE};

pub const CYCLES: usize = PIXELS;
/// Products, then 4 + 2 + 1 partial sums and the final accumulate.
pub const TREE_NODES: usize = 17;

/// Three chained shift rows of 28 words each. `rows[r][0]` is the entry end
/// of row `r`; new pixels enter `rows[2][0]` and the last word of a row
/// moves into word 0 of the row above it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineBufferState {
    pub rows: [[u8; SIDE]; 3],
    pub cycle: usize,
}

impl Default for LineBufferState {
    fn default() -> Self {
        Self { rows: [[0; SIDE]; 3], cycle: 0 }
    }
}

impl LineBufferState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Shift one pixel in and return the window P1..P9 (row-major).
    pub fn push(&mut self, pixel: u8) -> [u8; 9] {
        let carry2 = self.rows[2][SIDE - 1];
        let carry1 = self.rows[1][SIDE - 1];
        for row in self.rows.iter_mut() {
            row.copy_within(0..SIDE - 1, 1);
        }
        self.rows[0][0] = carry1;
        self.rows[1][0] = carry2;
        self.rows[2][0] = pixel;
        self.cycle += 1;
        self.window()
    }

    /// P9 is the pixel inserted most recently.
    pub fn window(&self) -> [u8; 9] {
        let mut w = [0u8; 9];
        for r in 0..3 {
            for c in 0..3 {
                w[r * 3 + c] = self.rows[r][2 - c];
            }
        }
        w
    }
}

pub fn step_line_buffer(state: &LineBufferState, pixel: u8) -> (LineBufferState, [u8; 9]) {
    let mut next = state.clone();
    let window = next.push(pixel);
    (next, window)
}

/// Signed adder-tree node values for one window: 9 products, L1 sums
/// (p1+p2, p3+p4, p5+p6, p7+p8), L2, L3 and the final sum with p9.
pub fn adder_tree(window: &[u8; 9], kernel: &BinaryKernel3x3) -> [i32; TREE_NODES] {
    let w = kernel.weights();
    let mut n = [0i32; TREE_NODES];
    for i in 0..9 {
        n[i] = i32::from(w[i]) * i32::from(window[i]);
    }
    n[9] = n[0] + n[1];
    n[10] = n[2] + n[3];
    n[11] = n[4] + n[5];
    n[12] = n[6] + n[7];
    n[13] = n[9] + n[10];
    n[14] = n[11] + n[12];
    n[15] = n[13] + n[14];
    n[16] = n[15] + n[8];
    n
}

/// Per-cycle activity model.
///
/// `power = alpha * (toggle_weight * toggles + operand_weight * node_width *
/// (|pixel| / 255)^operand_exponent + glitch) + other_kernels_power`
///
/// where `toggles` is the Hamming distance of all tree nodes (two's
/// complement, `node_width` bits) against the previous cycle and `pixel` is
/// the word entering the buffer. [`ActivityModel::toggle_only`] keeps only
/// the toggle term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivityModel {
    pub alpha: f64,
    pub node_width: u32,
    pub toggle_weight: f64,
    pub operand_weight: f64,
    pub operand_exponent: f64,
    /// Run-to-run glitch power: zero-mean with standard deviation
    /// `alpha * glitch_sigma * node_width` on cycles whose entering pixel is
    /// non-zero.
    pub glitch_sigma: f64,
    /// Fixed glitch pattern: on cycles whose entering pixel is in
    /// `1..=pattern_cutoff`, adds `alpha * pattern_weight * node_width * u[t]`
    /// with `u[t]` in [0, 1) a fixed pseudo-random value per cycle, identical
    /// across runs and images.
    pub pattern_weight: f64,
    pub pattern_cutoff: u8,
    /// Constant-rate activity of the other 63 kernels, off by default.
    pub other_kernels_power: f64,
}

impl Default for ActivityModel {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            node_width: 12,
            toggle_weight: 0.04,
            operand_weight: 1.0,
            operand_exponent: 2.0,
            glitch_sigma: 5.0,
            pattern_weight: 0.55,
            pattern_cutoff: 64,
            other_kernels_power: 0.0,
        }
    }
}

impl ActivityModel {
    pub fn toggle_only() -> Self {
        Self { toggle_weight: 1.0, operand_weight: 0.0, glitch_sigma: 0.0, pattern_weight: 0.0, ..Self::default() }
    }

    pub fn mask(&self) -> u32 {
        if self.node_width >= 32 {
            u32::MAX
        } else {
            (1u32 << self.node_width) - 1
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(1..=32).contains(&self.node_width) {
            return Err(format!("node width {} outside 1..=32", self.node_width));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("toggle_weight", self.toggle_weight),
            ("operand_weight", self.operand_weight),
            ("operand_exponent", self.operand_exponent),
            ("glitch_sigma", self.glitch_sigma),
            ("pattern_weight", self.pattern_weight),
            ("other_kernels_power", self.other_kernels_power),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Per-cycle mean power, one sample per output pixel, all samples
/// non-negative. `jitter` is the per-cycle standard deviation of the
/// zero-mean run-to-run component.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerTrace {
    pub samples: Vec<f64>,
    pub jitter: Vec<f64>,
}

impl PowerTrace {
    pub fn new(samples: Vec<f64>) -> Result<Self, String> {
        if samples.len() != CYCLES {
            return Err(format!("power trace needs {CYCLES} samples, got {}", samples.len()));
        }
        if let Some((i, v)) = samples.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(format!("sample {i} = {v} is not a non-negative number"));
        }
        Ok(Self { samples, jitter: vec![0.0; CYCLES] })
    }

    pub fn zeros() -> Self {
        Self { samples: vec![0.0; CYCLES], jitter: vec![0.0; CYCLES] }
    }

    pub fn has_jitter(&self) -> bool {
        self.jitter.iter().any(|&j| j > 0.0)
    }

    /// One run's power: mean plus a Gaussian draw per jittered cycle.
    pub fn realize<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.samples
            .iter()
            .zip(&self.jitter)
            .map(|(&p, &j)| if j > 0.0 { p + j * rng.sample::<f64, _>(rand_distr::StandardNormal) } else { p })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn simulate_first_kernel_trace(image: &Image, kernel: &BinaryKernel3x3, model: &ActivityModel) -> PowerTrace {
    let mask = model.mask();
    let mut state = LineBufferState::new();
    let mut prev = [0u32; TREE_NODES];
    let mut samples = Vec::with_capacity(CYCLES);
    let mut jitter = Vec::with_capacity(CYCLES);
    let pattern = glitch_pattern();
    for (t, &pixel) in image.pixels.iter().enumerate() {
        let window = state.push(pixel);
        let nodes = adder_tree(&window, kernel).map(|v| v as u32 & mask);
        let toggles: u32 = nodes.iter().zip(&prev).map(|(a, b)| (a ^ b).count_ones()).sum();
        prev = nodes;
        let width = f64::from(model.node_width);
        let operand = width * (f64::from(pixel) / 255.0).powf(model.operand_exponent);
        let glitch = if (1..=model.pattern_cutoff).contains(&pixel) {
            model.pattern_weight * width * pattern[t]
        } else {
            0.0
        };
        let p = model.alpha * (model.toggle_weight * f64::from(toggles) + model.operand_weight * operand + glitch)
            + model.other_kernels_power;
        samples.push(p);
        jitter.push(if pixel != 0 { model.alpha * model.glitch_sigma * width } else { 0.0 });
    }
    PowerTrace { samples, jitter }
}

/// Per-cycle values in [0, 1) from a fixed seed, so every image and run
/// sees the same pattern.
pub fn glitch_pattern() -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6c69_6e65);
    (0..CYCLES).map(|_| rng.gen::<f64>()).collect()
}

/// Cycles whose entering pixel is strictly above `threshold`.
pub fn foreground_cycle_set(image: &Image, threshold: u8) -> Vec<usize> {
    image
        .pixels
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Mean power over foreground cycles minus mean power over the rest.
pub fn foreground_contrast(trace: &PowerTrace, image: &Image) -> Option<f64> {
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (p, &px) in trace.samples.iter().zip(image.pixels.iter()) {
        if px > 0 {
            fg += p;
            nf += 1;
        } else {
            bg += p;
            nb += 1;
        }
    }
    (nf > 0 && nb > 0).then(|| fg / nf as f64 - bg / nb as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard() -> Image {
        let mut px = [0u8; PIXELS];
        for (i, p) in px.iter_mut().enumerate() {
            if (i / SIDE + i % SIDE) % 2 == 1 {
                *p = 255;
            }
        }
        Image::new(px)
    }

    #[test]
    fn zero_insert_keeps_buffer_zero() {
        let (s, w) = step_line_buffer(&LineBufferState::new(), 0);
        assert_eq!(w, [0; 9]);
        assert!(s.rows.iter().flatten().all(|&v| v == 0));
        assert_eq!(s.cycle, 1);
    }

    #[test]
    fn single_token_lands_in_p9() {
        let (s, w) = step_line_buffer(&LineBufferState::new(), 255);
        assert_eq!(w, [0, 0, 0, 0, 0, 0, 0, 0, 255]);
        let (_, w) = step_line_buffer(&s, 0);
        assert_eq!(w[7], 255);
    }

    #[test]
    fn token_reaches_top_row_after_two_rows() {
        let mut s = LineBufferState::new();
        s.push(9);
        for _ in 0..56 {
            s.push(0);
        }
        assert_eq!(s.window()[2], 9);
    }

    #[test]
    fn zero_image_draws_no_power() {
        let t = simulate_first_kernel_trace(&Image::zeros(), &BinaryKernel3x3::all(1), &ActivityModel::default());
        assert!(t.samples.iter().all(|&p| p == 0.0));
        let t = simulate_first_kernel_trace(&Image::zeros(), &BinaryKernel3x3::all(1), &ActivityModel::toggle_only());
        assert!(t.samples.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn checkerboard_toggles_every_cycle() {
        for model in [ActivityModel::default(), ActivityModel::toggle_only()] {
            let t = simulate_first_kernel_trace(&checkerboard(), &BinaryKernel3x3::all(1), &model);
            assert_eq!(t.len(), CYCLES);
            assert!(t.samples[1..].iter().all(|&p| p > 0.0), "{model:?}");
        }
    }

    #[test]
    fn foreground_sets() {
        assert!(foreground_cycle_set(&Image::zeros(), 0).is_empty());
        assert_eq!(foreground_cycle_set(&Image::new([255; PIXELS]), 0).len(), CYCLES);
    }

    #[test]
    fn adder_tree_final_equals_dot_product() {
        let k = BinaryKernel3x3::from_bits(0b101_100_111);
        let w = [10, 20, 30, 40, 50, 60, 70, 80, 90];
        let n = adder_tree(&w, &k);
        let dot: i32 = k.weights().iter().zip(&w).map(|(&a, &b)| i32::from(a) * i32::from(b)).sum();
        assert_eq!(n[16], dot);
    }

    #[test]
    fn other_kernels_add_constant() {
        let m = ActivityModel { other_kernels_power: 2.5, ..ActivityModel::default() };
        let t = simulate_first_kernel_trace(&Image::zeros(), &BinaryKernel3x3::all(1), &m);
        assert!(t.samples.iter().all(|&p| p == 2.5));
    }
}
