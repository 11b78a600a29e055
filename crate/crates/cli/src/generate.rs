//! Swap grids, latent walks and landmark overlays rendered to images.

use anyhow::{bail, ensure, Result};
use candle_core::{DType, IndexOp, Tensor};
use disentangle::geometry::LandmarkSet;
use disentangle::networks::DisentangleModel;
use image::{Rgb, RgbImage};

/// Converts one `(3, S, S)` image in `[-1, 1]` to 8-bit RGB.
pub fn to_rgb(x: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = x.dims3()?;
    ensure!(c == 3, "expected 3 channels, got {c}");
    let v: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |col, row| {
        let i = row as usize * w + col as usize;
        let px = |ch: usize| (((v[ch * plane + i] + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

/// Places `tiles` on a grid with `cols` columns. `None` leaves a blank cell.
pub fn montage(tiles: &[Option<RgbImage>], cols: usize, tile: u32) -> RgbImage {
    let rows = tiles.len().div_ceil(cols);
    let mut out = RgbImage::from_pixel(cols as u32 * tile, rows as u32 * tile, Rgb([255, 255, 255]));
    for (i, t) in tiles.iter().enumerate() {
        if let Some(t) = t {
            let (r, c) = ((i / cols) as i64, (i % cols) as i64);
            image::imageops::overlay(&mut out, t, c * tile as i64, r * tile as i64);
        }
    }
    out
}

/// Every swap of `contents` (one per column) with `styles` (one per row).
///
/// Entry `[i][j]` is `swap(contents[j], styles[i])`, each decoded as its own
/// batch of one.
pub fn swap_grid(model: &DisentangleModel, contents: &Tensor, styles: &Tensor) -> Result<Vec<Vec<Tensor>>> {
    let (n, m) = (contents.dim(0)?, styles.dim(0)?);
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let s = styles.i(i..i + 1)?;
        let row = (0..n)
            .map(|j| Ok(model.swap(&contents.i(j..j + 1)?, &s)?.i(0)?))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// `(N+1) x (M+1)` montage: content sources along the top, style sources
/// down the left, swaps in the body.
pub fn swap_grid_image(model: &DisentangleModel, contents: &Tensor, styles: &Tensor) -> Result<RgbImage> {
    let grid = swap_grid(model, contents, styles)?;
    let n = contents.dim(0)?;
    let mut tiles = vec![None];
    for j in 0..n {
        tiles.push(Some(to_rgb(&contents.i(j)?)?));
    }
    for (i, row) in grid.iter().enumerate() {
        tiles.push(Some(to_rgb(&styles.i(i)?)?));
        for t in row {
            tiles.push(Some(to_rgb(t)?));
        }
    }
    Ok(montage(&tiles, n + 1, model.config().image_size as u32))
}

fn lerp(a: &Tensor, b: &Tensor, t: f64) -> Result<Tensor> {
    Ok(((a * (1.0 - t))? + (b * t)?)?)
}

fn fractions(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        bail!("interpolation needs at least 2 steps, got {steps}");
    }
    Ok((0..steps).map(|i| i as f64 / (steps - 1) as f64).collect())
}

fn single(x: &Tensor, what: &str) -> Result<()> {
    ensure!(x.dim(0)? == 1, "{what} must be a batch of one image, got {:?}", x.dims());
    Ok(())
}

/// Keeps the content of `a` and walks the style code from `a`'s to `b`'s
/// in `steps` evenly spaced frames.
pub fn interpolate_style(model: &DisentangleModel, a: &Tensor, b: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    single(a, "first image")?;
    single(b, "second image")?;
    let content = model.content_encoder(&model.bottleneck(a)?.structure)?;
    let (za, zb) = (model.style_encoder(a)?, model.style_encoder(b)?);
    fractions(steps)?
        .into_iter()
        .map(|t| Ok(model.decoder(&content.embedding, &lerp(&za, &zb, t)?, &content.skips)?.i(0)?))
        .collect()
}

/// Keeps the style of `a` and walks the landmark coordinates from `a`'s to
/// `b`'s, re-rendering the structure map at every frame.
pub fn interpolate_content(model: &DisentangleModel, a: &Tensor, b: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    single(a, "first image")?;
    single(b, "second image")?;
    let (pa, pb) = (model.bottleneck(a)?.landmarks, model.bottleneck(b)?.landmarks);
    let z = model.style_encoder(a)?;
    fractions(steps)?
        .into_iter()
        .map(|t| {
            let pts = LandmarkSet::new(lerp(pa.coords(), pb.coords(), t)?)?;
            Ok(model.decode_landmarks(&pts, &z)?.i(0)?)
        })
        .collect()
}

const MARKER_COLORS: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
];

/// Draws each landmark (normalized `(row, col)`) as a small filled square.
pub fn overlay(img: &RgbImage, points: &[[f64; 2]]) -> RgbImage {
    let mut out = img.clone();
    let (w, h) = (img.width() as f64, img.height() as f64);
    for (k, p) in points.iter().enumerate() {
        let row = ((p[0] + 1.0) / 2.0 * (h - 1.0)).round() as i64;
        let col = ((p[1] + 1.0) / 2.0 * (w - 1.0)).round() as i64;
        let color = Rgb(MARKER_COLORS[k % MARKER_COLORS.len()]);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (r, c) = (row + dr, col + dc);
                if r >= 0 && c >= 0 && (r as u32) < img.height() && (c as u32) < img.width() {
                    out.put_pixel(c as u32, r as u32, color);
                }
            }
        }
    }
    out
}
