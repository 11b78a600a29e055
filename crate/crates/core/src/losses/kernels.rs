//! Slice kernels for the prior terms. Inputs are `(batch, K, H, W)` heatmaps
//! in row-major order; outputs are scalars averaged over the batch.

use crate::geometry::kernels::axis_coord;
use crate::ops::Real;

/// Sum over ordered channel pairs `i != j` of `exp(-|h_i - h_j|^2 / (2 sigma^2))`, batch mean.
pub fn separation_forward<T: Real>(h: &[T], batch: usize, k: usize, sigma: f64) -> f64 {
    if batch == 0 || k < 2 {
        return 0.0;
    }
    let plane = h.len() / (batch * k);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut total = 0.0;
    for item in h.chunks_exact(k * plane) {
        for i in 0..k {
            for j in i + 1..k {
                let d = sq_dist(&item[i * plane..(i + 1) * plane], &item[j * plane..(j + 1) * plane]);
                total += 2.0 * (-d * inv).exp();
            }
        }
    }
    total / batch as f64
}

/// Gradient of [`separation_forward`] scaled by `upstream`.
pub fn separation_backward<T: Real>(h: &[T], batch: usize, k: usize, sigma: f64, upstream: f64) -> Vec<T> {
    let mut out = vec![T::zero(); h.len()];
    if batch == 0 || k < 2 {
        return out;
    }
    let plane = h.len() / (batch * k);
    let s2 = sigma * sigma;
    let inv = 1.0 / (2.0 * s2);
    // d/dh_i of the two ordered terms (i,j) and (j,i): -2 t_ij (h_i - h_j) / sigma^2
    let scale = upstream / batch as f64;
    for (item, g) in h.chunks_exact(k * plane).zip(out.chunks_exact_mut(k * plane)) {
        for i in 0..k {
            for j in i + 1..k {
                let hi = &item[i * plane..(i + 1) * plane];
                let hj = &item[j * plane..(j + 1) * plane];
                let t = (-sq_dist(hi, hj) * inv).exp();
                let c = -2.0 * t / s2 * scale;
                for p in 0..plane {
                    let diff = c * (hi[p].f() - hj[p].f());
                    g[i * plane + p] = T::of(g[i * plane + p].f() + diff);
                    g[j * plane + p] = T::of(g[j * plane + p].f() - diff);
                }
            }
        }
    }
    out
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.f() - y.f();
            d * d
        })
        .sum()
}

/// Spatial variance of each channel about its soft-argmax, mean over batch and channels.
pub fn concentration_forward<T: Real>(h: &[T], planes: usize, height: usize, width: usize) -> f64 {
    if planes == 0 {
        return 0.0;
    }
    let plane = height * width;
    let mut total = 0.0;
    for m in h.chunks_exact(plane) {
        let (mr, mc) = moments(m, height, width);
        let mut var = 0.0;
        for i in 0..height {
            let dr = axis_coord(i, height) - mr;
            for j in 0..width {
                let dc = axis_coord(j, width) - mc;
                var += m[i * width + j].f() * (dr * dr + dc * dc);
            }
        }
        total += var;
    }
    total / planes as f64
}

/// With `mu = sum_p h_p g_p` and `S = sum_p h_p`,
/// `dVar/dh_p = |g_p - mu|^2 - 2 (1 - S) mu . g_p`.
pub fn concentration_backward<T: Real>(h: &[T], planes: usize, height: usize, width: usize, upstream: f64) -> Vec<T> {
    let plane = height * width;
    let mut out = vec![T::zero(); h.len()];
    if planes == 0 {
        return out;
    }
    let scale = upstream / planes as f64;
    for (m, g) in h.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        let (mr, mc) = moments(m, height, width);
        let mass: f64 = m.iter().map(|v| v.f()).sum();
        for i in 0..height {
            let gr = axis_coord(i, height);
            for j in 0..width {
                let gc = axis_coord(j, width);
                let (dr, dc) = (gr - mr, gc - mc);
                let d = dr * dr + dc * dc - 2.0 * (1.0 - mass) * (mr * gr + mc * gc);
                g[i * width + j] = T::of(scale * d);
            }
        }
    }
    out
}

fn moments<T: Real>(m: &[T], height: usize, width: usize) -> (f64, f64) {
    let (mut r, mut c) = (0.0, 0.0);
    for i in 0..height {
        let gr = axis_coord(i, height);
        for j in 0..width {
            let v = m[i * width + j].f();
            r += v * gr;
            c += v * axis_coord(j, width);
        }
    }
    (r, c)
}
