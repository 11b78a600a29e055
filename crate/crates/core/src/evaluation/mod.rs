//! Retrieval recall, similarity metrics and report writing.

mod similarity;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::Serialize;

pub use similarity::{
    classifier_entropy_score, content_similarity, gram, landmark_error, ssim, style_similarity, Classifier,
    LandmarkNorm, SSIM_SIGMA, SSIM_WINDOW,
};

use crate::data::Dataset;
use crate::losses::FeatureExtractor;
use crate::networks::DisentangleModel;
use crate::{Error, Result};

/// Labelled vectors for nearest-neighbour retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    vectors: Vec<f32>,
    dim: usize,
    ids: Vec<u64>,
    labels: Vec<u32>,
}

impl EmbeddingIndex {
    pub fn new(vectors: Vec<f32>, dim: usize, ids: Vec<u64>, labels: Vec<u32>) -> Result<Self> {
        let n = ids.len();
        if labels.len() != n || vectors.len() != n * dim {
            return Err(Error::shape(format!(
                "{} ids, {} labels and {} values do not describe {n} vectors of dimension {dim}",
                ids.len(),
                labels.len(),
                vectors.len()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::config(format!("duplicate embedding id {dup}")));
        }
        Ok(Self {
            vectors,
            dim,
            ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Adds `offset` to every id, e.g. to keep two splits disjoint.
    pub fn with_id_offset(mut self, offset: u64) -> Self {
        for id in &mut self.ids {
            *id += offset;
        }
        self
    }

    fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.vectors, (self.len(), self.dim), &Device::Cpu)?)
    }

    /// Writes the vectors as little-endian `f32` to `path` and a JSON
    /// sidecar (`path` with `.json` appended) holding shape, dtype, ids and labels.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.vectors.len() * 4);
        for v in &self.vectors {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        #[derive(Serialize)]
        struct Sidecar<'a> {
            shape: [usize; 2],
            dtype: &'static str,
            ids: &'a [u64],
            labels: &'a [u32],
        }
        let sidecar = Sidecar {
            shape: [self.len(), self.dim],
            dtype: "f32-le",
            ids: &self.ids,
            labels: &self.labels,
        };
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        fs::write(side, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

const DISTANCE_BLOCK: usize = 256;

/// Fraction of queries whose `k` nearest database vectors (Euclidean,
/// ties broken by database order) include one with the query's label.
pub fn recall_at_k(database: &EmbeddingIndex, queries: &EmbeddingIndex, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    if k > database.len() {
        return Err(Error::config(format!("k = {k} exceeds the {} database vectors", database.len())));
    }
    if database.dim != queries.dim {
        return Err(Error::shape(format!("database dim {} and query dim {} differ", database.dim, queries.dim)));
    }
    if queries.is_empty() {
        return Err(Error::config("no queries"));
    }
    let db_ids: HashSet<u64> = database.ids.iter().copied().collect();
    if let Some(id) = queries.ids.iter().find(|id| db_ids.contains(id)) {
        return Err(Error::config(format!("id {id} appears in both queries and database")));
    }

    let db = database.tensor()?.to_dtype(DType::F64)?;
    let db_sq = db.sqr()?.sum(1)?.to_vec1::<f64>()?;
    let db_t = db.t()?.contiguous()?;
    let mut hits = 0usize;
    for start in (0..queries.len()).step_by(DISTANCE_BLOCK) {
        let n = DISTANCE_BLOCK.min(queries.len() - start);
        let q = queries.tensor()?.narrow(0, start, n)?.to_dtype(DType::F64)?;
        let q_sq = q.sqr()?.sum(1)?.to_vec1::<f64>()?;
        let cross = q.matmul(&db_t)?.to_vec2::<f64>()?;
        for (qi, row) in cross.iter().enumerate() {
            let mut order: Vec<(f64, usize)> = row
                .iter()
                .enumerate()
                .map(|(j, c)| (q_sq[qi] + db_sq[j] - 2.0 * c, j))
                .collect();
            order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let label = queries.labels[start + qi];
            if order[..k].iter().any(|&(_, j)| database.labels[j] == label) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// What vector represents an image for retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    /// The flattened image, `3 S^2` values.
    Pixel,
    /// Soft-argmax landmark coordinates, `2 K` values.
    Content,
    /// The flattened normalized heatmaps, `K S^2` values.
    ContentHeatmaps,
    /// The style posterior mean, `D` values.
    Style,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::Pixel => "pixel",
            Representation::Content => "content",
            Representation::ContentHeatmaps => "content-heatmaps",
            Representation::Style => "style",
        }
    }
}

/// `(batch, D')` embedding of images `x` under the model.
pub fn embed(model: &DisentangleModel, x: &Tensor, repr: Representation) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(match repr {
        Representation::Pixel => x.reshape((b, ()))?,
        Representation::Content => model.bottleneck(x)?.landmarks.coords().reshape((b, ()))?,
        Representation::ContentHeatmaps => model.bottleneck(x)?.heatmaps.values().reshape((b, ()))?,
        Representation::Style => model.style_encoder(x)?,
    })
}

pub const EVAL_BATCH: usize = 32;

/// Embeds `indices` of `dataset`, labelling each vector through the
/// dataset's evaluation view. Ids are the dataset indices.
pub fn embedding_index(
    model: &DisentangleModel,
    dataset: &Dataset,
    indices: &[usize],
    repr: Representation,
) -> Result<EmbeddingIndex> {
    let labels = dataset.eval_view().labels(indices)?;
    let mut vectors = Vec::new();
    let mut dim = 0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let x = dataset.tensor(chunk, model.device())?.to_dtype(model.dtype())?;
        let e = embed(model, &x, repr)?.to_dtype(DType::F32)?;
        dim = e.dim(1)?;
        vectors.extend(e.flatten_all()?.to_vec1::<f32>()?);
    }
    EmbeddingIndex::new(vectors, dim, indices.iter().map(|&i| i as u64).collect(), labels)
}

/// Which internal feature stack of a trained model to expose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelBranch {
    /// Style-encoder stages applied to the image.
    Style,
    /// Content-encoder stages applied to the rendered structure map.
    Content,
}

/// Intermediate activations of a trained model as a feature extractor.
pub struct ModelFeatures<'a> {
    model: &'a DisentangleModel,
    branch: ModelBranch,
    /// Number of leading stages to emit.
    depth: usize,
}

impl<'a> ModelFeatures<'a> {
    pub fn new(model: &'a DisentangleModel, branch: ModelBranch, depth: usize) -> Self {
        Self { model, branch, depth }
    }
}

impl FeatureExtractor for ModelFeatures<'_> {
    fn name(&self) -> &str {
        match self.branch {
            ModelBranch::Style => "model-style",
            ModelBranch::Content => "model-content",
        }
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let x = x.to_dtype(self.model.dtype())?;
        let mut stages = match self.branch {
            ModelBranch::Style => self.model.style_features(&x)?,
            ModelBranch::Content => self.model.content_encoder(&self.model.bottleneck(&x)?.structure)?.skips,
        };
        stages.truncate(self.depth);
        Ok(stages.into_iter().map(|t| t.detach()).collect())
    }
}

/// Mean style and content similarity over an N x M swap grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwapConsistency {
    /// Mean `style_similarity(swap(c_i, s_j), s_j)`.
    pub style: f64,
    /// Mean `content_similarity(swap(c_i, s_j), c_i)`.
    pub content: f64,
}

/// Decodes every content image with every style image and measures how
/// well each result keeps its row's style and its column's content.
pub fn swap_consistency(
    model: &DisentangleModel,
    contents: &Tensor,
    styles: &Tensor,
    style_features: &dyn FeatureExtractor,
    content_features: &dyn FeatureExtractor,
) -> Result<SwapConsistency> {
    let n = contents.dim(0)?;
    let m = styles.dim(0)?;
    let (mut style, mut content) = (0.0, 0.0);
    for j in 0..m {
        let s = styles.narrow(0, j, 1)?;
        let s_rep = s.repeat((n, 1, 1, 1))?;
        let out = model.swap(contents, &s_rep)?;
        style += style_similarity(&out, &s_rep, style_features)?;
        content += content_similarity(&out, contents, content_features)?;
    }
    Ok(SwapConsistency {
        style: style / m as f64,
        content: content / m as f64,
    })
}

/// Landmark coordinates of every image in `x`, for overlay drawing.
pub fn landmarks_of(model: &DisentangleModel, x: &Tensor) -> Result<Vec<Vec<[f64; 2]>>> {
    let pts = model.bottleneck(x)?.landmarks;
    (0..x.dim(0)?).map(|i| pts.points(i)).collect()
}

/// One evaluated quantity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub model_digest: String,
    pub config_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Metrics that could not run, with the reason.
    pub skipped: Vec<(String, String)>,
}

pub const REPORT_HEADER: &str = "metric,value,n,model_digest,config_digest";

impl MetricReport {
    pub fn push(&mut self, metric: &str, value: f64, n: usize, model_digest: &str, config_digest: &str) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::MetricUnavailable {
                metric: metric.into(),
                reason: format!("value is {value}"),
            });
        }
        self.rows.push(MetricRow {
            metric: metric.into(),
            value,
            n,
            model_digest: model_digest.into(),
            config_digest: config_digest.into(),
        });
        Ok(())
    }

    pub fn skip(&mut self, metric: &str, reason: impl Into<String>) {
        self.skipped.push((metric.into(), reason.into()));
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.metric, r.value, r.n, r.model_digest, r.config_digest));
        }
        out
    }

    pub fn summary(&self) -> String {
        let width = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!("{:width$}  {:>12.6}  (n={})\n", r.metric, r.value, r.n));
        }
        for (m, why) in &self.skipped {
            out.push_str(&format!("{m:width$}  skipped: {why}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}
