//! Slice-level forward and backward kernels for the structure bottleneck.
//!
//! Layout is always row-major `(planes, height, width)` where a plane is one
//! `(batch, channel)` pair. Landmarks are stored as `(planes, 2)` in
//! `(row, col)` order.

use crate::ops::Real;

/// Normalized coordinate of pixel index `i` on an axis of length `n`.
///
/// Pixel 0 sits at -1 and pixel `n - 1` at +1. A length-one axis maps to 0.
#[inline]
pub fn axis_coord(i: usize, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Inverse of [`axis_coord`]: continuous pixel position of a normalized coordinate.
#[inline]
pub fn coord_to_pixel(c: f64, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        (c + 1.0) * 0.5 * (n - 1) as f64
    }
}

pub fn spatial_softmax_forward<T: Real>(raw: &[T], plane: usize, beta: f64) -> Vec<T> {
    let mut out = vec![T::zero(); raw.len()];
    for (src, dst) in raw.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        let max = src.iter().fold(f64::NEG_INFINITY, |m, v| m.max(beta * v.f()));
        let mut sum = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            let e = (beta * s.f() - max).exp();
            sum += e;
            *d = T::of(e);
        }
        let inv = 1.0 / sum;
        for d in dst.iter_mut() {
            *d = T::of(d.f() * inv);
        }
    }
    out
}

/// `d raw = beta * s * (g - <s, g>)` per plane.
pub fn spatial_softmax_backward<T: Real>(out: &[T], grad: &[T], plane: usize, beta: f64) -> Vec<T> {
    let mut dx = vec![T::zero(); out.len()];
    for ((s, g), d) in out
        .chunks_exact(plane)
        .zip(grad.chunks_exact(plane))
        .zip(dx.chunks_exact_mut(plane))
    {
        let dot: f64 = s.iter().zip(g).map(|(a, b)| a.f() * b.f()).sum();
        for ((di, si), gi) in d.iter_mut().zip(s).zip(g) {
            *di = T::of(beta * si.f() * (gi.f() - dot));
        }
    }
    dx
}

pub fn soft_argmax_forward<T: Real>(h: &[T], height: usize, width: usize) -> Vec<T> {
    let plane = height * width;
    let mut out = Vec::with_capacity(h.len() / plane * 2);
    for m in h.chunks_exact(plane) {
        let (mut r, mut c) = (0.0, 0.0);
        for i in 0..height {
            let gy = axis_coord(i, height);
            let row = &m[i * width..(i + 1) * width];
            let mut row_mass = 0.0;
            for (j, v) in row.iter().enumerate() {
                let v = v.f();
                row_mass += v;
                c += v * axis_coord(j, width);
            }
            r += row_mass * gy;
        }
        out.push(T::of(r));
        out.push(T::of(c));
    }
    out
}

/// The soft-argmax is linear in `h`, so `d h[p] = g_row * grid_row(p) + g_col * grid_col(p)`.
pub fn soft_argmax_backward<T: Real>(grad: &[T], height: usize, width: usize) -> Vec<T> {
    let plane = height * width;
    let mut dh = vec![T::zero(); grad.len() / 2 * plane];
    for (g, d) in grad.chunks_exact(2).zip(dh.chunks_exact_mut(plane)) {
        let (gr, gc) = (g[0].f(), g[1].f());
        for i in 0..height {
            let base = gr * axis_coord(i, height);
            for j in 0..width {
                d[i * width + j] = T::of(base + gc * axis_coord(j, width));
            }
        }
    }
    dh
}

pub fn render_forward<T: Real>(points: &[T], height: usize, width: usize, sigma: f64) -> Vec<T> {
    let plane = height * width;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![T::zero(); points.len() / 2 * plane];
    // exp(-(dy^2 + dx^2) / 2s^2) factorizes into a row term times a column term.
    let mut col_terms = vec![0.0; width];
    for (p, dst) in points.chunks_exact(2).zip(out.chunks_exact_mut(plane)) {
        let cy = coord_to_pixel(p[0].f(), height);
        let cx = coord_to_pixel(p[1].f(), width);
        for (j, t) in col_terms.iter_mut().enumerate() {
            let dx = j as f64 - cx;
            *t = (-dx * dx * inv).exp();
        }
        for i in 0..height {
            let dy = i as f64 - cy;
            let ry = (-dy * dy * inv).exp();
            for (d, t) in dst[i * width..(i + 1) * width].iter_mut().zip(&col_terms) {
                *d = T::of(ry * t);
            }
        }
    }
    out
}

/// Gradient of the rendered maps with respect to the normalized points.
pub fn render_backward<T: Real>(
    points: &[T],
    rendered: &[T],
    grad: &[T],
    height: usize,
    width: usize,
    sigma: f64,
) -> Vec<T> {
    let plane = height * width;
    let s2 = sigma * sigma;
    let scale_y = 0.5 * height.saturating_sub(1) as f64;
    let scale_x = 0.5 * width.saturating_sub(1) as f64;
    let mut out = Vec::with_capacity(points.len());
    for ((p, v), g) in points
        .chunks_exact(2)
        .zip(rendered.chunks_exact(plane))
        .zip(grad.chunks_exact(plane))
    {
        let cy = coord_to_pixel(p[0].f(), height);
        let cx = coord_to_pixel(p[1].f(), width);
        let (mut gy, mut gx) = (0.0, 0.0);
        for i in 0..height {
            let dy = i as f64 - cy;
            for j in 0..width {
                let w = v[i * width + j].f() * g[i * width + j].f();
                gy += w * dy;
                gx += w * (j as f64 - cx);
            }
        }
        out.push(T::of(gy / s2 * scale_y));
        out.push(T::of(gx / s2 * scale_x));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_endpoints() {
        assert_eq!(axis_coord(0, 5), -1.0);
        assert_eq!(axis_coord(4, 5), 1.0);
        assert_eq!(axis_coord(2, 5), 0.0);
        assert_eq!(coord_to_pixel(0.0, 5), 2.0);
        assert_eq!(axis_coord(0, 1), 0.0);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let raw = [0.3f64, -1.0, 2.5, 0.0];
        let shifted: Vec<f64> = raw.iter().map(|v| v + 1000.0).collect();
        let a = spatial_softmax_forward(&raw, 4, 1.0);
        let b = spatial_softmax_forward(&shifted, 4, 1.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn render_factorized_matches_direct() {
        let pts = [0.13f64, -0.4];
        let (h, w, s) = (7, 9, 1.7);
        let out = render_forward(&pts, h, w, s);
        let cy = coord_to_pixel(pts[0], h);
        let cx = coord_to_pixel(pts[1], w);
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                let want = (-d2 / (2.0 * s * s)).exp();
                assert!((out[i * w + j] - want).abs() < 1e-12);
            }
        }
    }
}
