//! Image recovery from captured sensor traces: average, high-pass filter,
//! histogram threshold, binary reconstruction and ROF total-variation
//! denoising.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PIXELS, SIDE};
use crate::tdc::TdcTrace;

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("no traces to average")]
    EmptyTraceList,
    #[error("trace {index} has length {found}, expected {expected}")]
    LengthMismatch { index: usize, expected: usize, found: usize },
    #[error("all filtered values are equal ({0}); histogram range is degenerate")]
    DegenerateRange(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AveragedTrace {
    pub values: Vec<f64>,
    pub n_runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilteredTrace {
    pub values: Vec<f64>,
    pub filter: FilterKind,
}

pub fn average_traces(traces: &[TdcTrace]) -> Result<AveragedTrace, AttackError> {
    let first = traces.first().ok_or(AttackError::EmptyTraceList)?;
    let n = first.len();
    let mut sum = vec![0u64; n];
    for (index, t) in traces.iter().enumerate() {
        if t.len() != n {
            return Err(AttackError::LengthMismatch { index, expected: n, found: t.len() });
        }
        for (s, &h) in sum.iter_mut().zip(&t.hw) {
            *s += u64::from(h);
        }
    }
    let k = traces.len() as f64;
    Ok(AveragedTrace { values: sum.into_iter().map(|s| s as f64 / k).collect(), n_runs: traces.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FilterKind {
    /// `|x[t] - mean(x[t-window .. t-1])|`, zero for `t < window`.
    RunningMean { window: usize },
    /// First-order Butterworth high-pass (bilinear transform), magnitude of
    /// the output. `cutoff` is a fraction of the sample rate in (0, 0.5).
    Butterworth { cutoff: f64 },
}

impl Default for FilterKind {
    fn default() -> Self {
        FilterKind::RunningMean { window: 10 }
    }
}

impl FilterKind {
    pub fn apply(&self, x: &[f64]) -> Result<FilteredTrace, AttackError> {
        match *self {
            FilterKind::RunningMean { window } => highpass_filter(x, window),
            FilterKind::Butterworth { cutoff } => butterworth_highpass(x, cutoff),
        }
    }
}

pub fn highpass_filter(x: &[f64], window: usize) -> Result<FilteredTrace, AttackError> {
    if window == 0 {
        return Err(AttackError::InvalidParameter("filter window must be at least 1".into()));
    }
    let mut out = vec![0.0; x.len()];
    let mut acc: f64 = x.iter().take(window).sum();
    for t in window..x.len() {
        out[t] = (x[t] - acc / window as f64).abs();
        acc += x[t] - x[t - window];
    }
    Ok(FilteredTrace { values: out, filter: FilterKind::RunningMean { window } })
}

pub fn butterworth_highpass(x: &[f64], cutoff: f64) -> Result<FilteredTrace, AttackError> {
    if !(cutoff > 0.0 && cutoff < 0.5) {
        return Err(AttackError::InvalidParameter(format!("cutoff {cutoff} outside (0, 0.5)")));
    }
    let k = (std::f64::consts::PI * cutoff).tan();
    let b0 = 1.0 / (1.0 + k);
    let a1 = (1.0 - k) / (1.0 + k);
    let mut out = Vec::with_capacity(x.len());
    let (mut x_prev, mut y_prev) = (x.first().copied().unwrap_or(0.0), 0.0);
    for &xi in x {
        let y = b0 * (xi - x_prev) + a1 * y_prev;
        out.push(y.abs());
        x_prev = xi;
        y_prev = y;
    }
    Ok(FilteredTrace { values: out, filter: FilterKind::Butterworth { cutoff } })
}

/// Uniform bins over `[0, max]`; the last bin is closed.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn mids(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| (e[0] + e[1]) / 2.0).collect()
    }
}

pub fn build_histogram(values: &[f64], bins: usize) -> Result<Histogram, AttackError> {
    if bins < 2 {
        return Err(AttackError::InvalidParameter("need at least 2 bins".into()));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.is_empty() || max <= 0.0 || min == max {
        return Err(AttackError::DegenerateRange(max));
    }
    let width = max / bins as f64;
    let edges = (0..=bins).map(|i| i as f64 * width).collect::<Vec<_>>();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
#[derive(Default)]
pub enum ThresholdRule {
    /// Longest falling run ending in a near-empty bin; Otsu when none.
    Valley,
    Otsu,
    /// Upper cut of a three-class Otsu split.
    #[default]
    MultiOtsu,
    Manual(f64),
}


impl std::str::FromStr for ThresholdRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" | "valley" => Ok(ThresholdRule::Valley),
            "otsu" => Ok(ThresholdRule::Otsu),
            "multi-otsu" => Ok(ThresholdRule::MultiOtsu),
            v => v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map(ThresholdRule::Manual)
                .ok_or_else(|| format!("threshold must be auto, otsu, multi-otsu or a number, got '{v}'")),
        }
    }
}

impl TryFrom<String> for ThresholdRule {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ThresholdRule> for String {
    fn from(r: ThresholdRule) -> String {
        r.to_string()
    }
}

impl std::fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdRule::Valley => f.write_str("valley"),
            ThresholdRule::Otsu => f.write_str("otsu"),
            ThresholdRule::MultiOtsu => f.write_str("multi-otsu"),
            ThresholdRule::Manual(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub value: f64,
    pub rule: ThresholdRule,
    /// The requested rule found nothing and Otsu was used instead.
    pub fallback: bool,
}

/// A bin counts as near-empty when it holds at most this fraction of the
/// count at the start of the falling run.
pub const VALLEY_FRACTION: f64 = 0.1;
pub const VALLEY_MIN_RUN: usize = 3;

pub fn select_threshold(hist: &Histogram, rule: ThresholdRule) -> ThresholdChoice {
    let pick = |value, fallback| ThresholdChoice { value, rule, fallback };
    match rule {
        ThresholdRule::Manual(v) => pick(v, false),
        ThresholdRule::Otsu => pick(otsu(hist), false),
        ThresholdRule::MultiOtsu => match multi_otsu_upper(hist) {
            Some(v) => pick(v, false),
            None => pick(otsu(hist), true),
        },
        ThresholdRule::Valley => match valley(hist) {
            Some(v) => pick(v, false),
            None => pick(otsu(hist), true),
        },
    }
}

/// Upper edge of the last bin of the longest maximal non-increasing run that
/// ends in a near-empty bin other than the final one.
pub fn valley(hist: &Histogram) -> Option<f64> {
    let c = &hist.counts;
    let n = c.len();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && c[j + 1] <= c[j] {
            j += 1;
        }
        let len = j - i + 1;
        let near_empty = c[j] as f64 <= VALLEY_FRACTION * c[i] as f64;
        if len >= VALLEY_MIN_RUN && j < n - 1 && near_empty && best.is_none_or(|(l, _)| len > l) {
            best = Some((len, j));
        }
        i = j + 1;
    }
    best.map(|(_, j)| hist.edges[j + 1])
}

/// Between-class variance maximiser over bin boundaries; returns the lower
/// edge of the first upper-class bin.
pub fn otsu(hist: &Histogram) -> f64 {
    let mids = hist.mids();
    let c: Vec<f64> = hist.counts.iter().map(|&v| v as f64).collect();
    let mut best = (f64::NEG_INFINITY, 1);
    for k in 1..c.len() {
        let w0: f64 = c[..k].iter().sum();
        let w1: f64 = c[k..].iter().sum();
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = c[..k].iter().zip(&mids).map(|(a, b)| a * b).sum::<f64>() / w0;
        let m1 = c[k..].iter().zip(&mids[k..]).map(|(a, b)| a * b).sum::<f64>() / w1;
        let s = w0 * w1 * (m0 - m1).powi(2);
        if s > best.0 {
            best = (s, k);
        }
    }
    hist.edges[best.1]
}

/// Three-class Otsu; returns the cut between the middle and upper class.
pub fn multi_otsu_upper(hist: &Histogram) -> Option<f64> {
    let n = hist.bins();
    let mids = hist.mids();
    let total = hist.total() as f64;
    let mut cw = vec![0.0; n + 1];
    let mut cm = vec![0.0; n + 1];
    for i in 0..n {
        let p = hist.counts[i] as f64 / total;
        cw[i + 1] = cw[i] + p;
        cm[i + 1] = cm[i] + p * mids[i];
    }
    let mu = cm[n];
    let class = |lo: usize, hi: usize| {
        let w = cw[hi] - cw[lo];
        (w > 0.0).then(|| {
            let m = (cm[hi] - cm[lo]) / w;
            w * (m - mu).powi(2)
        })
    };
    let mut best: Option<(f64, usize)> = None;
    for a in 1..n - 1 {
        for b in a + 1..n {
            let (Some(x), Some(y), Some(z)) = (class(0, a), class(a, b), class(b, n)) else { continue };
            let s = x + y + z;
            if best.is_none_or(|(v, _)| s > v) {
                best = Some((s, b));
            }
        }
    }
    best.map(|(_, b)| hist.edges[b])
}

/// Pixel `i` is 255 when `f[i] > threshold`, else 0.
pub fn reconstruct_binary(f: &[f64], threshold: f64) -> Vec<f64> {
    f.iter().map(|&v| if v > threshold { 255.0 } else { 0.0 }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RofParams {
    pub tau: f64,
    pub tv_weight: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for RofParams {
    fn default() -> Self {
        Self { tau: 0.1, tv_weight: 40.0, max_iter: 200, tol: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RofResult {
    pub image: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective `0.5 |u - f|^2 + tv_weight * TV(u)` of every iterate,
    /// starting with `u = f`.
    pub energies: Vec<f64>,
}

fn gradient(u: &[f64], w: usize, h: usize, gx: &mut [f64], gy: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if x + 1 < w { u[i + 1] - u[i] } else { 0.0 };
            gy[i] = if y + 1 < h { u[i + w] - u[i] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`gradient`].
fn divergence(px: &[f64], py: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = if x == 0 {
                px[i]
            } else if x + 1 == w {
                -px[i - 1]
            } else {
                px[i] - px[i - 1]
            };
            let dy = if y == 0 {
                py[i]
            } else if y + 1 == h {
                -py[i - w]
            } else {
                py[i] - py[i - w]
            };
            out[i] = dx + dy;
        }
    }
}

pub fn total_variation(u: &[f64], w: usize, h: usize) -> f64 {
    let mut gx = vec![0.0; u.len()];
    let mut gy = vec![0.0; u.len()];
    gradient(u, w, h, &mut gx, &mut gy);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).sum()
}

pub fn rof_energy(u: &[f64], f: &[f64], w: usize, h: usize, tv_weight: f64) -> f64 {
    let fidelity: f64 = u.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum();
    0.5 * fidelity + tv_weight * total_variation(u, w, h)
}

/// Dual projection for `min_u 0.5 |u - f|^2 + tv_weight * TV(u)`:
/// `p <- (p + (tau / tv_weight) grad u) / max(1, |...|)`,
/// `u = f + tv_weight * div p`, stopping when the RMS change of `u` drops
/// below `tol`. The result is clamped to [0, 255].
pub fn rof_denoise(f: &[f64], w: usize, h: usize, params: &RofParams) -> Result<RofResult, AttackError> {
    if f.len() != w * h {
        return Err(AttackError::InvalidParameter(format!("{} values for a {w}x{h} image", f.len())));
    }
    if !(params.tau > 0.0 && params.tau <= 0.25) {
        return Err(AttackError::InvalidParameter(format!("tau {} outside (0, 0.25]", params.tau)));
    }
    if !(params.tv_weight > 0.0) {
        return Err(AttackError::InvalidParameter("tv_weight must be positive".into()));
    }
    let n = w * h;
    let step = params.tau / params.tv_weight;
    let (mut px, mut py) = (vec![0.0; n], vec![0.0; n]);
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    let mut div = vec![0.0; n];
    let mut u = f.to_vec();
    let mut energies = vec![rof_energy(&u, f, w, h, params.tv_weight)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        gradient(&u, w, h, &mut gx, &mut gy);
        for i in 0..n {
            let nx = px[i] + step * gx[i];
            let ny = py[i] + step * gy[i];
            let norm = nx.hypot(ny).max(1.0);
            px[i] = nx / norm;
            py[i] = ny / norm;
        }
        divergence(&px, &py, w, h, &mut div);
        let mut change = 0.0;
        for i in 0..n {
            let next = f[i] + params.tv_weight * div[i];
            change += (next - u[i]).powi(2);
            u[i] = next;
        }
        energies.push(rof_energy(&u, f, w, h, params.tv_weight));
        if (change / n as f64).sqrt() < params.tol {
            converged = true;
            break;
        }
    }
    let image = u.into_iter().map(|v| v.clamp(0.0, 255.0)).collect();
    Ok(RofResult { image, iterations, converged, energies })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackParams {
    pub filter: FilterKind,
    pub bins: usize,
    pub threshold: ThresholdRule,
    /// When false the denoised image equals the binary one.
    pub denoise: bool,
    pub rof: RofParams,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            filter: FilterKind::default(),
            bins: 40,
            threshold: ThresholdRule::default(),
            denoise: true,
            rof: RofParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredImage {
    pub averaged: AveragedTrace,
    pub filtered: FilteredTrace,
    /// `None` when the filtered trace had no spread.
    pub histogram: Option<Histogram>,
    pub threshold: ThresholdChoice,
    pub degenerate: bool,
    pub binary: Vec<f64>,
    pub denoised: Vec<f64>,
    pub rof_iterations: usize,
    pub rof_converged: bool,
}

/// Average, filter, histogram, threshold, binarise and denoise. A filtered
/// trace with no spread yields an all-background image flagged `degenerate`.
pub fn run_attack(traces: &[TdcTrace], params: &AttackParams) -> Result<RecoveredImage, AttackError> {
    let averaged = average_traces(traces)?;
    if averaged.values.len() != PIXELS {
        return Err(AttackError::LengthMismatch { index: 0, expected: PIXELS, found: averaged.values.len() });
    }
    attack_averaged(averaged, params)
}

pub fn attack_averaged(averaged: AveragedTrace, params: &AttackParams) -> Result<RecoveredImage, AttackError> {
    let filtered = params.filter.apply(&averaged.values)?;
    let (histogram, threshold, degenerate) = match build_histogram(&filtered.values, params.bins) {
        Ok(h) => {
            let t = select_threshold(&h, params.threshold);
            (Some(h), t, false)
        }
        Err(AttackError::DegenerateRange(max)) => {
            let value = match params.threshold {
                ThresholdRule::Manual(v) => v,
                _ => max,
            };
            (None, ThresholdChoice { value, rule: params.threshold, fallback: true }, true)
        }
        Err(e) => return Err(e),
    };
    let binary = reconstruct_binary(&filtered.values, threshold.value);
    let (denoised, rof_iterations, rof_converged) = if params.denoise {
        let r = rof_denoise(&binary, SIDE, SIDE, &params.rof)?;
        (r.image, r.iterations, r.converged)
    } else {
        (binary.clone(), 0, true)
    };
    Ok(RecoveredImage {
        averaged,
        filtered,
        histogram,
        threshold,
        degenerate,
        binary,
        denoised,
        rof_iterations,
        rof_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(counts: &[usize]) -> Histogram {
        Histogram { edges: (0..=counts.len()).map(|i| i as f64).collect(), counts: counts.to_vec() }
    }

    #[test]
    fn average_of_one_and_mirrored_pair() {
        let a = TdcTrace { hw: vec![100, 130, 128], run_id: 0 };
        assert_eq!(average_traces(&[a.clone()]).unwrap().values, vec![100.0, 130.0, 128.0]);
        let b = TdcTrace { hw: a.hw.iter().map(|&h| 256 - h).collect(), run_id: 1 };
        assert!(average_traces(&[a, b]).unwrap().values.iter().all(|&v| v == 128.0));
        assert_eq!(average_traces(&[]), Err(AttackError::EmptyTraceList));
        let short = TdcTrace { hw: vec![1], run_id: 2 };
        let long = TdcTrace { hw: vec![1, 2], run_id: 3 };
        assert!(matches!(average_traces(&[short, long]), Err(AttackError::LengthMismatch { index: 1, .. })));
    }

    #[test]
    fn filter_basics() {
        assert!(highpass_filter(&[7.5; 50], 10).unwrap().values.iter().all(|&v| v == 0.0));
        let mut x = vec![0.0; 50];
        x[20] = 3.0;
        let f = highpass_filter(&x, 10).unwrap().values;
        assert_eq!(f[20], 3.0);
        assert!(f[..10].iter().all(|&v| v == 0.0));
        let ramp: Vec<f64> = (0..100).map(|t| 0.5 * t as f64).collect();
        let f = highpass_filter(&ramp, 10).unwrap().values;
        assert!((f[60] - 0.5 * 11.0 / 2.0).abs() < 1e-12);
        assert!(highpass_filter(&x, 0).is_err());
    }

    #[test]
    fn butterworth_rejects_dc() {
        let f = butterworth_highpass(&[5.0; 100], 0.05).unwrap().values;
        assert!(f.iter().all(|&v| v.abs() < 1e-12));
        assert!(butterworth_highpass(&[1.0], 0.7).is_err());
    }

    #[test]
    fn histogram_cases() {
        assert!(matches!(build_histogram(&[0.0; 10], 40), Err(AttackError::DegenerateRange(_))));
        let mut v = vec![1.0; 700];
        v.extend(vec![4.0; 84]);
        let h = build_histogram(&v, 40).unwrap();
        assert_eq!(h.total(), 784);
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 2);
        assert_eq!(h.edges[40], 4.0);
    }

    #[test]
    fn valley_on_constructed_counts() {
        let h = hist(&[50, 40, 20, 5, 1, 0, 3, 8, 6, 2]);
        let t = select_threshold(&h, ThresholdRule::Valley);
        assert_eq!(t.value, 6.0);
        assert!(!t.fallback);
    }

    #[test]
    fn monotone_counts_fall_back_to_otsu() {
        let h = hist(&[90, 70, 50, 30, 20, 10, 5, 3, 2, 1]);
        let t = select_threshold(&h, ThresholdRule::Valley);
        assert!(t.fallback);
        assert_eq!(t.value, otsu(&h));
    }

    #[test]
    fn otsu_splits_two_clusters() {
        let h = hist(&[30, 40, 30, 0, 0, 0, 0, 10, 20, 10]);
        let t = otsu(&h);
        assert!((3.0..=7.0).contains(&t), "{t}");
        let m = multi_otsu_upper(&h).unwrap();
        assert!(m > 2.0, "{m}");
    }

    #[test]
    fn binary_thresholds() {
        let f = [0.0, 1.0, 2.0];
        assert_eq!(reconstruct_binary(&f, 5.0), vec![0.0; 3]);
        assert_eq!(reconstruct_binary(&f, 0.5), vec![0.0, 255.0, 255.0]);
    }

    #[test]
    fn rof_constant_fixed_point() {
        let r = rof_denoise(&vec![93.0; PIXELS], SIDE, SIDE, &RofParams::default()).unwrap();
        assert!(r.image.iter().all(|&v| v == 93.0));
        assert!(r.converged);
    }

    #[test]
    fn rof_suppresses_stray_pixel() {
        let mut f = vec![0.0; PIXELS];
        f[14 * SIDE + 14] = 255.0;
        let r = rof_denoise(&f, SIDE, SIDE, &RofParams::default()).unwrap();
        assert!(r.image[14 * SIDE + 14] < 255.0);
    }

    #[test]
    fn divergence_is_negative_adjoint() {
        let (w, h) = (5, 4);
        let u: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64).collect();
        let px: Vec<f64> = (0..20).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let py: Vec<f64> = (0..20).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let (mut gx, mut gy, mut d) = (vec![0.0; 20], vec![0.0; 20], vec![0.0; 20]);
        gradient(&u, w, h, &mut gx, &mut gy);
        divergence(&px, &py, w, h, &mut d);
        let lhs: f64 = (0..20).map(|i| gx[i] * px[i] + gy[i] * py[i]).sum();
        let rhs: f64 = (0..20).map(|i| -u[i] * d[i]).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn threshold_rule_parsing() {
        assert_eq!("auto".parse::<ThresholdRule>().unwrap(), ThresholdRule::Valley);
        assert_eq!("2.5".parse::<ThresholdRule>().unwrap(), ThresholdRule::Manual(2.5));
        assert!("nan".parse::<ThresholdRule>().is_err());
    }
}
