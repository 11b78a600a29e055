//! Brute-force reference implementations and a finite-difference checker.
//!
//! The oracles are deliberately naive: direct loops over every index, no
//! factorization, no shared helpers with the library.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn grid(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * (i as f64) / ((n - 1) as f64)
}

pub fn softmax_plane(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn soft_argmax_plane(h: &[f64], rows: usize, cols: usize) -> [f64; 2] {
    let mut out = [0.0, 0.0];
    for i in 0..rows {
        for j in 0..cols {
            out[0] += h[i * cols + j] * grid(i, rows);
            out[1] += h[i * cols + j] * grid(j, cols);
        }
    }
    out
}

pub fn render_plane(point: [f64; 2], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let pr = (point[0] + 1.0) / 2.0 * (rows - 1) as f64;
    let pc = (point[1] + 1.0) / 2.0 * (cols - 1) as f64;
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let d2 = (i as f64 - pr).powi(2) + (j as f64 - pc).powi(2);
            out.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

/// `maps[b][k]` is one flattened heatmap.
pub fn separation(maps: &[Vec<Vec<f64>>], sigma: f64) -> f64 {
    let mut total = 0.0;
    for item in maps {
        for i in 0..item.len() {
            for j in 0..item.len() {
                if i == j {
                    continue;
                }
                let mut d2 = 0.0;
                for p in 0..item[i].len() {
                    d2 += (item[i][p] - item[j][p]).powi(2);
                }
                total += (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    total / maps.len() as f64
}

pub fn concentration(maps: &[Vec<Vec<f64>>], rows: usize, cols: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for item in maps {
        for h in item {
            let mu = soft_argmax_plane(h, rows, cols);
            let mut var = 0.0;
            for i in 0..rows {
                for j in 0..cols {
                    var += h[i * cols + j] * ((grid(i, rows) - mu[0]).powi(2) + (grid(j, cols) - mu[1]).powi(2));
                }
            }
            total += var;
            count += 1;
        }
    }
    total / count as f64
}

pub fn kl(mu_q: &[Vec<f64>], mu_p: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (q, p) in mu_q.iter().zip(mu_p) {
        let mut s = 0.0;
        for d in 0..q.len() {
            s += (q[d] - p[d]) * (q[d] - p[d]);
        }
        total += 0.5 * s;
    }
    total / mu_q.len() as f64
}

pub fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

pub fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

/// Gram distance for `(batch, C, H, W)` data given as nested vectors `[b][c][p]`.
pub fn gram_distance(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        let c = x.len();
        let n = x[0].len();
        for i in 0..c {
            for j in 0..c {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for p in 0..n {
                    gx += x[i][p] * x[j][p];
                    gy += y[i][p] * y[j][p];
                }
                let norm = (c * n) as f64;
                total += (gx / norm - gy / norm).powi(2);
            }
        }
    }
    total / a.len() as f64
}

/// SSIM from the definition: every 11x11 window weighted by a 2-D
/// Gaussian, statistics computed directly inside the window.
pub fn ssim_plane(x: &[f64], y: &[f64], rows: usize, cols: usize) -> (f64, usize) {
    let n = 11;
    let sigma: f64 = 1.5;
    let mut w = vec![0.0; n * n];
    let mut ws = 0.0;
    for a in 0..n {
        for b in 0..n {
            let d2 = (a as f64 - 5.0).powi(2) + (b as f64 - 5.0).powi(2);
            w[a * n + b] = (-d2 / (2.0 * sigma * sigma)).exp();
            ws += w[a * n + b];
        }
    }
    for v in &mut w {
        *v /= ws;
    }
    let c1 = (0.01f64 * 2.0).powi(2);
    let c2 = (0.03f64 * 2.0).powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for r0 in 0..=rows - n {
        for q0 in 0..=cols - n {
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    let p = (r0 + a) * cols + q0 + b;
                    mx += w[a * n + b] * x[p];
                    my += w[a * n + b] * y[p];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    let p = (r0 + a) * cols + q0 + b;
                    vx += w[a * n + b] * (x[p] - mx).powi(2);
                    vy += w[a * n + b] * (y[p] - my).powi(2);
                    cxy += w[a * n + b] * (x[p] - mx) * (y[p] - my);
                }
            }
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    (total, count)
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;
/// Absolute slack added to the relative bound. Central differences carry a
/// truncation error of order `step^2 * f'''`, around 1e-9 here, which
/// dominates for elements whose gradient is itself near zero.
pub const FD_ABS_TOL: f64 = 1e-8;

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
    /// Elements that needed the refined quotient.
    pub refined: usize,
    pub failures: Vec<String>,
}

/// Compares the autograd gradient of `f(x) . r` with central differences
/// for every element of `x`, where `r` is a fixed random projection of the
/// output (so every output element contributes).
///
/// An element that misses the plain quotient at `FD_STEP` is re-tested
/// against a Richardson-refined quotient (steps `FD_STEP` and `FD_STEP / 2`)
/// before it counts as a failure. The refinement cancels the leading
/// truncation term, so it separates quotient error on steep functions from
/// a wrong analytic gradient, which misses both.
pub fn check_gradient(x0: &[f64], shape: &[usize], seed: u64, f: &dyn Fn(&Tensor) -> Tensor) -> FdReport {
    let x = Var::from_tensor(&tensor(x0.to_vec(), shape)).unwrap();
    let y = f(x.as_tensor());
    let mut prng = rng(seed ^ 0x5eed);
    let r = tensor(uniform(&mut prng, y.elem_count(), -1.0, 1.0), y.dims());
    let objective = |t: &Tensor| -> f64 {
        let y = f(t);
        (y * &r).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
    };
    let loss = (y * &r).unwrap().sum_all().unwrap();
    let grads = loss.backward().unwrap();
    let analytic = values(grads.get(x.as_tensor()).expect("input receives a gradient"));

    let mut worst = 0.0f64;
    let mut refined = 0;
    let mut failures = Vec::new();
    for i in 0..x0.len() {
        let quotient = |step: f64| {
            let mut plus = x0.to_vec();
            plus[i] += step;
            let mut minus = x0.to_vec();
            minus[i] -= step;
            (objective(&tensor(plus, shape)) - objective(&tensor(minus, shape))) / (2.0 * step)
        };
        let a = analytic[i];
        let within = |numeric: f64| (a - numeric).abs() <= FD_REL_TOL * a.abs().max(numeric.abs()) + FD_ABS_TOL;
        let plain = quotient(FD_STEP);
        let scale = a.abs().max(plain.abs());
        if scale > 0.0 {
            worst = worst.max((a - plain).abs() / scale);
        }
        if within(plain) {
            continue;
        }
        let rich = (4.0 * quotient(FD_STEP / 2.0) - plain) / 3.0;
        if within(rich) {
            refined += 1;
        } else {
            failures.push(format!("element {i}: analytic {a:e}, numeric {plain:e}, refined {rich:e}"));
        }
    }
    FdReport {
        checked: x0.len(),
        worst_rel: worst,
        refined,
        failures,
    }
}
