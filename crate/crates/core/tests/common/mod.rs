//! Brute-force reference implementations written straight from the layer and
//! metric definitions, kept independent of the library code.
#![allow(dead_code)]

use std::path::PathBuf;

use tdcleak_core::experiment::ExperimentSpec;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Default spec with dataset paths pinned to the bundled files, so tests do
/// not depend on the working directory.
pub fn spec() -> ExperimentSpec {
    let mut s = ExperimentSpec::default();
    let root = workspace_root();
    s.dataset.images = Some(root.join("data/mnist/t10k-images-idx3-ubyte"));
    s.dataset.labels = Some(root.join("data/mnist/t10k-labels-idx1-ubyte"));
    s
}

pub fn fashion_spec() -> ExperimentSpec {
    let mut s = spec();
    let root = workspace_root();
    s.dataset.kind = tdcleak_core::experiment::DatasetKind::FashionMnist;
    s.dataset.images = Some(root.join("data/fashion-mnist/fashion-sample-images-idx3-ubyte"));
    s.dataset.labels = Some(root.join("data/fashion-mnist/fashion-sample-labels-idx1-ubyte"));
    s
}

/// Zero-padded read of an H x W x C map stored as `[y][x][c]`.
fn at(data: &[i32], h: usize, w: usize, c: usize, y: i64, x: i64, ch: usize) -> i64 {
    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
        0
    } else {
        i64::from(data[(y as usize * w + x as usize) * c + ch])
    }
}

/// out[y][x] = sum_{a,b} K[a][b] * I[y+a-1][x+b-1], zero outside the image.
pub fn conv_first(img: &[u8], side: usize, k: &[i8; 9]) -> Vec<i64> {
    let data: Vec<i32> = img.iter().map(|&p| i32::from(p)).collect();
    let mut out = vec![0; side * side];
    for y in 0..side as i64 {
        for x in 0..side as i64 {
            let mut s = 0;
            for a in 0..3 {
                for b in 0..3 {
                    s += i64::from(k[(a * 3 + b) as usize]) * at(&data, side, side, 1, y + a - 1, x + b - 1, 0);
                }
            }
            out[(y as usize) * side + x as usize] = s;
        }
    }
    out
}

/// out[y][x][o] = sum_{i,a,b} K[o][i][a][b] * In[y+a-1][x+b-1][i].
pub fn conv_binary(input: &[i32], h: usize, w: usize, c: usize, kernels: &[[i8; 9]], out_c: usize) -> Vec<i64> {
    let mut out = vec![0; h * w * out_c];
    for o in 0..out_c {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut s = 0;
                for i in 0..c {
                    let k = &kernels[o * c + i];
                    for a in 0..3i64 {
                        for b in 0..3i64 {
                            s += i64::from(k[(a * 3 + b) as usize]) * at(input, h, w, c, y + a - 1, x + b - 1, i);
                        }
                    }
                }
                out[(y as usize * w + x as usize) * out_c + o] = s;
            }
        }
    }
    out
}

pub fn max_pool(input: &[i32], h: usize, w: usize, c: usize) -> Vec<i32> {
    let mut out = Vec::new();
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for ch in 0..c {
                let mut m = i32::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(input[((2 * y + dy) * w + 2 * x + dx) * c + ch]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Exact rational batch norm: value = (scale / 2^16) * (x / 2^in_frac) +
/// shift / 2^16, result = round-half-up(value * 2^8) clamped to [-256, 256].
pub fn batch_norm(x: i32, in_frac: u32, scale: i32, shift: i32) -> i32 {
    let num = i128::from(scale) * i128::from(x) * 256 + i128::from(shift) * 256 * (1i128 << in_frac);
    let den = (1i128 << 16) * (1i128 << in_frac);
    // floor(num / den + 1/2) = floor((2 num + den) / (2 den))
    let r = (2 * num + den).div_euclid(2 * den);
    r.clamp(-256, 256) as i32
}

pub fn sign(v: i32) -> i32 {
    if v >= 0 {
        1
    } else {
        -1
    }
}

pub fn fully_connected(x: &[i32], rows: usize, weights: &[i8]) -> Vec<i64> {
    let cols = x.len();
    (0..rows)
        .map(|r| (0..cols).map(|c| i64::from(weights[r * cols + c]) * i64::from(x[c])).sum())
        .collect()
}

pub fn ccr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - ma) * (b[i] - mb);
    }
    s
}

pub fn ccr_norm(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma) * (a[i] - ma);
        db += (b[i] - mb) * (b[i] - mb);
    }
    num / (da * db).sqrt()
}

/// Mean SSIM over every `win x win` window (stride 1), uniform weights,
/// population statistics, dynamic range 255.
pub fn mssim(a: &[f64], b: &[f64], w: usize, h: usize, win: usize) -> f64 {
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    sa += a[y * w + x];
                    sb += b[y * w + x];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    let (da, db) = (a[y * w + x] - ma, b[y * w + x] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / f64::from(count)
}

/// Window at cycle `t` of a three-row line buffer over a row-major image of
/// width `side`: P1..P3 are pixels t-2w-2..t-2w, P4..P6 are t-w-2..t-w, P7..P9
/// are t-2..t; indices before the first pixel read as zero.
pub fn line_buffer_window(img: &[u8], side: usize, t: usize) -> [u8; 9] {
    let get = |i: i64| if i < 0 { 0 } else { img[i as usize] };
    let t = t as i64;
    let w = side as i64;
    let mut out = [0u8; 9];
    for r in 0..3i64 {
        for c in 0..3i64 {
            out[(r * 3 + c) as usize] = get(t - (2 - r) * w - (2 - c));
        }
    }
    out
}
