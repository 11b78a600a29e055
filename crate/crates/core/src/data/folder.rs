use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GenericImageView};

use super::{Dataset, Item, Manifest, Pixels};
use crate::{Error, Result};

/// Images loaded from a directory, plus the files that could not be decoded.
#[derive(Clone, Debug)]
pub struct FolderDataset {
    pub dataset: Dataset,
    pub skipped: Vec<(PathBuf, String)>,
}

impl FolderDataset {
    /// Loaded paths in order, followed by skipped files and their reasons.
    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::default();
        m.set("kind", "image-folder");
        m.set("image_size", self.dataset.image_size().to_string());
        m.set("count", self.dataset.len().to_string());
        m.set("skipped", self.skipped.len().to_string());
        for i in 0..self.dataset.len() {
            m.push_record(vec![("index", i.to_string()), ("path", self.dataset.origin(i).to_string())]);
        }
        for (p, why) in &self.skipped {
            m.push_record(vec![("skipped", p.display().to_string()), ("reason", why.clone())]);
        }
        m
    }
}

/// Side length and offsets of a centered square crop covering `fraction`
/// of the shorter side.
pub(crate) fn center_crop_box(width: u32, height: u32, fraction: f64) -> (u32, u32, u32) {
    let side = ((width.min(height) as f64 * fraction).round() as u32).clamp(1, width.min(height));
    ((width - side) / 2, (height - side) / 2, side)
}

fn to_values(img: &DynamicImage, image_size: usize, crop: f64) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let (x, y, side) = center_crop_box(w, h, crop);
    let rgb = img.crop_imm(x, y, side, side).to_rgb32f();
    let s = image_size as u32;
    let rgb = if side == s {
        rgb
    } else {
        imageops::resize(&rgb, s, s, FilterType::Triangle)
    };
    let n = image_size * image_size;
    let mut out = vec![0.0f32; 3 * n];
    for (p, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + p] = 2.0 * px.0[c].clamp(0.0, 1.0) - 1.0;
        }
    }
    out
}

/// Loads every regular file of `dir` in lexicographic path order, center
/// crops it to a square of `crop` times its shorter side, and resizes to
/// `image_size`. Files that fail to decode are skipped with a warning.
pub fn load_image_folder(dir: &Path, image_size: usize, crop: f64) -> Result<FolderDataset> {
    if !(crop > 0.0 && crop <= 1.0) {
        return Err(Error::config(format!("crop fraction must be in (0, 1], got {crop}")));
    }
    if image_size == 0 {
        return Err(Error::config("image_size must be >= 1"));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Ingestion {
            path: dir.to_path_buf(),
            message: e.to_string(),
            hint: "point the data source at an existing directory of PNG or JPEG files".into(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();

    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        match image::open(&path) {
            Ok(img) => items.push(Item {
                pixels: Pixels::Rgb(to_values(&img, image_size, crop)),
                color: None,
                label: None,
                origin: path.display().to_string(),
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path, e.to_string()));
            }
        }
    }
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("folder");
    Ok(FolderDataset {
        dataset: Dataset::from_parts(name, image_size, None, items),
        skipped,
    })
}
