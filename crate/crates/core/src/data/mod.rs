//! Datasets: colorized MNIST built from IDX archives, and generic image
//! folders. Items are stored compactly and rendered to `(3, S, S)` tensors
//! in `[-1, 1]` on demand.
//!
//! Labels never appear in [`ImageBatch`]; they are reachable only through
//! [`Dataset::eval_view`].

mod folder;
pub mod idx;
mod manifest;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use folder::{load_image_folder, FolderDataset};
pub use manifest::Manifest;

use crate::{Error, Result};

/// Environment variable naming the root directory for prepared datasets.
pub const CACHE_ENV: &str = "DISENTANGLE_CACHE";

/// Root for prepared datasets: `$DISENTANGLE_CACHE`, else `./disentangle-cache`.
pub fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("disentangle-cache"))
}

/// Which part of a grayscale digit receives the color.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorMode {
    Digit,
    Background,
}

impl ColorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ColorMode::Digit => "digit",
            ColorMode::Background => "background",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "digit" => Some(ColorMode::Digit),
            "background" => Some(ColorMode::Background),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorizeSpec {
    pub mode: ColorMode,
    /// Each RGB channel is drawn uniformly from `[palette[0], palette[1]]`.
    #[serde(default = "default_palette")]
    pub palette: [f32; 2],
    #[serde(default)]
    pub seed: u64,
}

fn default_palette() -> [f32; 2] {
    [0.3, 1.0]
}

impl ColorizeSpec {
    pub fn new(mode: ColorMode, seed: u64) -> Self {
        Self {
            mode,
            palette: default_palette(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.palette;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("palette must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn sample_color(&self, rng: &mut impl Rng) -> [f32; 3] {
        let [lo, hi] = self.palette;
        std::array::from_fn(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
    }
}

/// Colors a `[0, 1]` grayscale image and rescales it to `[-1, 1]`.
///
/// Digit mode multiplies the stroke by `color`; background mode keeps
/// strokes white and tints the background. Output layout is `(3, H, W)`.
pub fn colorize(gray: &[f32], mode: ColorMode, color: [f32; 3]) -> Result<Vec<f32>> {
    if let Some(c) = color.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::config(format!("color components must lie in [0, 1], got {c}")));
    }
    let n = gray.len();
    let mut out = vec![0.0f32; 3 * n];
    for (ch, &c) in color.iter().enumerate() {
        let plane = &mut out[ch * n..(ch + 1) * n];
        for (o, &g) in plane.iter_mut().zip(gray) {
            let v = match mode {
                ColorMode::Digit => g * c,
                ColorMode::Background => g + (1.0 - g) * c,
            };
            *o = 2.0 * v - 1.0;
        }
    }
    Ok(out)
}

/// Bilinear resize of a single-channel `[0, 1]` image.
fn resize_gray(data: &[f32], height: usize, width: usize, size: usize) -> Vec<f32> {
    if height == size && width == size {
        return data.to_vec();
    }
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(width as u32, height as u32, data.to_vec()).expect("buffer matches dimensions");
    imageops::resize(&img, size as u32, size as u32, FilterType::Triangle).into_raw()
}

#[derive(Clone, Debug)]
enum Pixels {
    /// Grayscale source at native resolution, colorized when rendered.
    Gray { height: usize, width: usize, data: Vec<u8> },
    /// Ready `(3, S, S)` values in `[-1, 1]`.
    Rgb(Vec<f32>),
}

#[derive(Clone, Debug)]
struct Item {
    pixels: Pixels,
    color: Option<[f32; 3]>,
    label: Option<u32>,
    origin: String,
}

/// An immutable, indexable image collection at a fixed square size.
#[derive(Clone, Debug)]
pub struct Dataset {
    name: String,
    image_size: usize,
    mode: Option<ColorMode>,
    items: Vec<Item>,
}

impl Dataset {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn color(&self, i: usize) -> Option<[f32; 3]> {
        self.items[i].color
    }

    /// Where item `i` came from: an archive index or a file path.
    pub fn origin(&self, i: usize) -> &str {
        &self.items[i].origin
    }

    /// Item `i` as `(3, S, S)` values in `[-1, 1]`, row-major.
    pub fn image(&self, i: usize) -> Result<Vec<f32>> {
        let item = self.items.get(i).ok_or_else(|| Error::config(format!("index {i} out of range")))?;
        match (&item.pixels, item.color) {
            (Pixels::Rgb(v), _) => Ok(v.clone()),
            (Pixels::Gray { .. }, Some(color)) => self.render_recolored(i, color),
            (Pixels::Gray { .. }, None) => self.render_recolored(i, [1.0; 3]),
        }
    }

    /// A grayscale item rendered with a different color.
    pub fn render_recolored(&self, i: usize, color: [f32; 3]) -> Result<Vec<f32>> {
        let item = self.items.get(i).ok_or_else(|| Error::config(format!("index {i} out of range")))?;
        let Pixels::Gray { height, width, data } = &item.pixels else {
            return Err(Error::config(format!("item {i} of `{}` is not a grayscale source", self.name)));
        };
        let gray: Vec<f32> = data.iter().map(|&b| b as f32 / 255.0).collect();
        let up = resize_gray(&gray, *height, *width, self.image_size);
        colorize(&up, self.mode.unwrap_or(ColorMode::Digit), color)
    }

    /// Stacks the given items into a `(batch, 3, S, S)` `f32` tensor.
    pub fn tensor(&self, indices: &[usize], device: &Device) -> Result<Tensor> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            data.extend(self.image(i)?);
        }
        Ok(Tensor::from_vec(data, (indices.len(), 3, s, s), device)?)
    }

    /// The first `n` items (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            items: self.items.iter().take(n).cloned().collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            image_size: self.image_size,
            mode: self.mode,
            items: Vec::new(),
        }
    }

    /// Label access for evaluation code.
    pub fn eval_view(&self) -> EvalView<'_> {
        EvalView { dataset: self }
    }

    fn from_parts(name: &str, image_size: usize, mode: Option<ColorMode>, items: Vec<Item>) -> Self {
        Self {
            name: name.to_string(),
            image_size,
            mode,
            items,
        }
    }
}

/// Read-only label lookup for metrics such as retrieval recall.
#[derive(Clone, Copy)]
pub struct EvalView<'a> {
    dataset: &'a Dataset,
}

impl EvalView<'_> {
    pub fn label(&self, i: usize) -> Option<u32> {
        self.dataset.items.get(i).and_then(|it| it.label)
    }

    pub fn labels(&self, indices: &[usize]) -> Result<Vec<u32>> {
        indices
            .iter()
            .map(|&i| {
                self.label(i)
                    .ok_or_else(|| Error::MetricUnavailable {
                        metric: "labels".into(),
                        reason: format!("item {i} of `{}` has no label", self.dataset.name),
                    })
            })
            .collect()
    }
}

/// Images of one step. Carries dataset indices, never labels.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub values: Tensor,
    pub indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Incomplete final batch is dropped.
    Train,
    /// Every item is visited.
    Eval,
}

/// Deterministic batch order over a dataset.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    device: Device,
    dtype: DType,
}

/// Batches in an order fixed by `(shuffle_seed, epoch)`, or in index order
/// when `shuffle_seed` is `None`.
pub fn batch_iterator(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
    pass: Pass,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    if pass == Pass::Train {
        order.truncate(order.len() - order.len() % batch_size);
    }
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        pos: 0,
        device: Device::Cpu,
        dtype: DType::F32,
    })
}

impl BatchIter<'_> {
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    /// Number of batches still to come.
    pub fn remaining(&self) -> usize {
        (self.order.len() - self.pos).div_ceil(self.batch_size)
    }

    /// The index order of the whole pass.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<ImageBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let dtype = self.dtype;
        Some(
            self.dataset
                .tensor(&indices, &self.device)
                .and_then(|t| Ok(t.to_dtype(dtype)?))
                .map(|values| ImageBatch { values, indices }),
        )
    }
}

/// Train and test halves of a colorized MNIST build.
#[derive(Clone, Debug)]
pub struct MnistColor {
    pub train: Dataset,
    pub test: Dataset,
    pub spec: ColorizeSpec,
}

pub const MNIST_TRAIN_SIZE: usize = 50_000;
pub const MNIST_TEST_SIZE: usize = 10_000;

const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

struct RawSplit {
    images: idx::IdxArray,
    labels: idx::IdxArray,
}

fn read_split(dir: &Path, images: &str, labels: &str) -> Result<(RawSplit, [PathBuf; 2])> {
    let ip = idx::locate(dir, images)?;
    let lp = idx::locate(dir, labels)?;
    let images = idx::IdxArray::read(&ip)?;
    let labels = idx::IdxArray::read(&lp)?;
    if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return Err(Error::Ingestion {
            path: ip,
            message: format!("image dims {:?} do not match label dims {:?}", images.dims, labels.dims),
            hint: "the image and label files must come from the same MNIST split".into(),
        });
    }
    Ok((RawSplit { images, labels }, [ip, lp]))
}

fn gray_items(split: &RawSplit, take: usize, prefix: &str, spec: &ColorizeSpec, rng: &mut ChaCha8Rng) -> Vec<Item> {
    let (h, w) = (split.images.dims[1], split.images.dims[2]);
    (0..take.min(split.images.dims[0]))
        .map(|i| Item {
            pixels: Pixels::Gray {
                height: h,
                width: w,
                data: split.images.data[i * h * w..(i + 1) * h * w].to_vec(),
            },
            color: Some(spec.sample_color(rng)),
            label: Some(split.labels.data[i] as u32),
            origin: format!("{prefix}#{i}"),
        })
        .collect()
}

/// Builds MNIST-CD or MNIST-CB from the four MNIST IDX files in `source`.
///
/// The first 50,000 training images form the training split and the 10,000
/// `t10k` images the test split; a smaller archive yields proportionally
/// smaller splits. Colors come from one seeded stream, training items first.
pub fn make_mnist_color(source: &Path, spec: &ColorizeSpec, image_size: usize) -> Result<MnistColor> {
    spec.validate()?;
    if image_size < 2 {
        return Err(Error::config(format!("image_size must be >= 2, got {image_size}")));
    }
    let (train, train_paths) = read_split(source, TRAIN_IMAGES, TRAIN_LABELS)?;
    let (test, test_paths) = read_split(source, TEST_IMAGES, TEST_LABELS)?;
    let files: Vec<&Path> = train_paths.iter().chain(&test_paths).map(|p| p.as_path()).collect();
    if !idx::verify_checksums(source, &files)? {
        log::warn!("{} has no SHA256SUMS file; archive integrity not verified", source.display());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let name = match spec.mode {
        ColorMode::Digit => "mnist-cd",
        ColorMode::Background => "mnist-cb",
    };
    let train_items = gray_items(&train, MNIST_TRAIN_SIZE, "train", spec, &mut rng);
    let test_items = gray_items(&test, MNIST_TEST_SIZE, "test", spec, &mut rng);
    Ok(MnistColor {
        train: Dataset::from_parts(name, image_size, Some(spec.mode), train_items),
        test: Dataset::from_parts(name, image_size, Some(spec.mode), test_items),
        spec: spec.clone(),
    })
}

/// Outcome of [`prepare_mnist_color`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prepared {
    pub dir: PathBuf,
    pub manifest_digest: String,
    /// `false` when an identical manifest was already in place.
    pub written: bool,
}

const MANIFEST_FILE: &str = "manifest.txt";

impl MnistColor {
    fn manifest(&self) -> Manifest {
        let mut m = Manifest::default();
        m.set("kind", "mnist-color");
        m.set("name", self.train.name());
        m.set("mode", self.spec.mode.as_str());
        m.set("seed", self.spec.seed.to_string());
        m.set("palette", format!("{},{}", self.spec.palette[0], self.spec.palette[1]));
        m.set("image_size", self.train.image_size().to_string());
        for (split, ds) in [("train", &self.train), ("test", &self.test)] {
            m.set(&format!("{split}_count"), ds.len().to_string());
            for (i, item) in ds.items.iter().enumerate() {
                let color = item.color.unwrap_or([1.0; 3]);
                m.push_record(vec![
                    ("split", split.to_string()),
                    ("index", i.to_string()),
                    ("origin", item.origin.clone()),
                    ("label", item.label.map(|l| l.to_string()).unwrap_or_default()),
                    ("color", format!("{},{},{}", color[0], color[1], color[2])),
                ]);
            }
        }
        m
    }

    /// Writes the grayscale sources and a manifest of labels and colors into
    /// `dir`. Does nothing when `dir` already holds the same manifest.
    pub fn save(&self, dir: &Path) -> Result<Prepared> {
        let text = self.manifest().to_text();
        let digest = idx::sha256_hex(text.as_bytes());
        let manifest_path = dir.join(MANIFEST_FILE);
        if std::fs::read_to_string(&manifest_path).is_ok_and(|old| old == text) {
            return Ok(Prepared {
                dir: dir.to_path_buf(),
                manifest_digest: digest,
                written: false,
            });
        }
        std::fs::create_dir_all(dir)?;
        for (ds, images, labels) in [(&self.train, TRAIN_IMAGES, TRAIN_LABELS), (&self.test, TEST_IMAGES, TEST_LABELS)] {
            let (mut h, mut w) = (0, 0);
            let mut data = Vec::new();
            let mut lab = Vec::new();
            for item in &ds.items {
                if let Pixels::Gray { height, width, data: d } = &item.pixels {
                    (h, w) = (*height, *width);
                    data.extend_from_slice(d);
                }
                lab.push(item.label.unwrap_or(0) as u8);
            }
            idx::IdxArray {
                dims: vec![ds.len(), h, w],
                data,
            }
            .write_gz(&dir.join(format!("{images}.gz")))?;
            idx::IdxArray {
                dims: vec![ds.len()],
                data: lab,
            }
            .write_gz(&dir.join(format!("{labels}.gz")))?;
        }
        // The manifest goes last so a partial write never looks complete.
        let tmp = dir.join("manifest.tmp");
        std::fs::write(&tmp, &text)?;
        std::fs::rename(&tmp, &manifest_path)?;
        Ok(Prepared {
            dir: dir.to_path_buf(),
            manifest_digest: digest,
            written: true,
        })
    }

    /// Reads a directory written by [`MnistColor::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let bad = |message: String| Error::Ingestion {
            path: manifest_path.clone(),
            message,
            hint: "run `disentangle prepare` to rebuild the dataset cache".into(),
        };
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| bad(e.to_string()))?;
        let m = Manifest::parse(&text).map_err(bad)?;
        let get = |k: &str| m.get(k).ok_or_else(|| bad(format!("missing `{k}`")));
        let mode = ColorMode::parse(get("mode")?).ok_or_else(|| bad("unknown mode".into()))?;
        let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
        let palette = parse_floats::<2>(get("palette")?).ok_or_else(|| bad("bad palette".into()))?;
        let image_size: usize = get("image_size")?.parse().map_err(|_| bad("bad image_size".into()))?;
        let name = get("name")?.to_string();
        let spec = ColorizeSpec { mode, palette, seed };

        let mut splits = Vec::new();
        for (split, images, labels) in [("train", TRAIN_IMAGES, TRAIN_LABELS), ("test", TEST_IMAGES, TEST_LABELS)] {
            let (raw, _) = read_split(dir, images, labels)?;
            let (h, w) = (raw.images.dims[1], raw.images.dims[2]);
            let records: Vec<_> = m.records().iter().filter(|r| r.get("split").map(String::as_str) == Some(split)).collect();
            if records.len() != raw.images.dims[0] {
                return Err(bad(format!("{split}: {} records for {} images", records.len(), raw.images.dims[0])));
            }
            let items = records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let color = r.get("color").and_then(|c| parse_floats::<3>(c)).ok_or_else(|| bad(format!("{split} record {i}: bad color")))?;
                    Ok(Item {
                        pixels: Pixels::Gray {
                            height: h,
                            width: w,
                            data: raw.images.data[i * h * w..(i + 1) * h * w].to_vec(),
                        },
                        color: Some(color),
                        label: Some(raw.labels.data[i] as u32),
                        origin: r.get("origin").cloned().unwrap_or_default(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            splits.push(Dataset::from_parts(&name, image_size, Some(mode), items));
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        Ok(Self { train, test, spec })
    }
}

fn parse_floats<const N: usize>(s: &str) -> Option<[f32; N]> {
    let v: Vec<f32> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}
