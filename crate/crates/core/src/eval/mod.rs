//! Embedding extraction, K-Means clustering and partition metrics.

mod export;
mod kmeans;
mod metrics;

pub use export::{read_embeddings_bin, read_embeddings_csv, write_embeddings_bin, write_embeddings_csv};
pub use kmeans::{kmeans, kmeans_restarts, ClusterAssignment};
pub(crate) use kmeans::plus_plus as plus_plus_seeds;
pub use metrics::{ami, ari, contingency, nmi, Contingency, Normalization};

use serde::{Deserialize, Serialize};

use crate::augment::center_views;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ClawsModel, ViewKind};
use crate::numerics::{l2_normalize, Tensor};
use crate::train::Checkpoint;

/// Which projection head produces the embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    #[default]
    Full,
    Crop,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Full => "full",
            Branch::Crop => "crop",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Branch::Full),
            "crop" => Ok(Branch::Crop),
            other => Err(Error::Config(format!("unknown branch {other:?}"))),
        }
    }

    fn kind(self) -> ViewKind {
        match self {
            Branch::Full => ViewKind::Full,
            Branch::Crop => ViewKind::Crop,
        }
    }
}

/// Unmasked projection-head outputs for a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub labels: Vec<Option<usize>>,
    /// `N×32`.
    pub matrix: Tensor,
    pub branch: Branch,
    pub checkpoint_id: String,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Rows scaled to unit length; a zero row is an error.
    pub fn normalized(&self) -> Result<EmbeddingSet> {
        let rows = self.matrix.rows().map(l2_normalize).collect::<Result<Vec<_>>>()?;
        Ok(EmbeddingSet {
            matrix: Tensor::from_rows(&rows)?,
            ..self.clone()
        })
    }

    /// Rows whose label equals `label`, in order.
    pub fn filter_label(&self, label: usize) -> Result<EmbeddingSet> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == Some(label)).collect();
        if keep.is_empty() {
            return Err(Error::Config(format!("no embeddings with label {label}")));
        }
        let rows: Vec<&[f64]> = keep.iter().map(|&i| self.matrix.row(i)).collect();
        Ok(EmbeddingSet {
            ids: keep.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            matrix: Tensor::from_rows(&rows)?,
            branch: self.branch,
            checkpoint_id: self.checkpoint_id.clone(),
        })
    }

    pub fn true_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.ids)
            .map(|(l, id)| l.ok_or_else(|| Error::Config(format!("sample {id} has no label"))))
            .collect()
    }
}

const EMBED_CHUNK: usize = 64;

/// Deterministic center-view embeddings of every sample.
pub fn embed_with_model(
    model: &ClawsModel,
    dataset: &Dataset,
    branch: Branch,
    checkpoint_id: &str,
    augment: &crate::augment::AugmentConfig,
) -> Result<EmbeddingSet> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot embed an empty dataset".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(s) = dataset.samples.iter().find(|s| !seen.insert(s.id.as_str())) {
        return Err(Error::Config(format!("duplicate sample id {}", s.id)));
    }
    let views = dataset
        .samples
        .iter()
        .map(|s| center_views(s, augment))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(dataset.len() * crate::model::EMBED_DIM);
    for chunk in views.chunks(EMBED_CHUNK) {
        let images: Vec<_> = chunk
            .iter()
            .map(|v| match branch {
                Branch::Full => &v.full,
                Branch::Crop => &v.crop,
            })
            .collect();
        data.extend(model.embed_views(branch.kind(), &images)?.into_data());
    }
    let matrix = Tensor::new(vec![dataset.len(), crate::model::EMBED_DIM], data)?;
    if !matrix.is_finite() {
        return Err(Error::NonFinite { op: "embed_dataset" });
    }
    Ok(EmbeddingSet {
        ids: dataset.samples.iter().map(|s| s.id.clone()).collect(),
        labels: dataset.samples.iter().map(|s| s.label).collect(),
        matrix,
        branch,
        checkpoint_id: checkpoint_id.to_string(),
    })
}

pub fn embed_dataset(ck: &Checkpoint, dataset: &Dataset, branch: Branch) -> Result<EmbeddingSet> {
    let model = ck.model()?;
    embed_with_model(&model, dataset, branch, &ck.id(), &ck.config.augment)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Number of clusters; 0 means the number of distinct true labels.
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub branch: Branch,
    pub normalization: Normalization,
    /// L2-normalize embeddings before clustering.
    pub normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 0,
            seed: 0,
            restarts: 10,
            max_iter: 300,
            tol: 1e-8,
            branch: Branch::Full,
            normalization: Normalization::Arithmetic,
            normalize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ami: f64,
    pub ari: f64,
    pub k: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub checkpoint_id: String,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "metrics report",
            detail: e.to_string(),
        })
    }
}

/// Clusters the embeddings and scores the clustering against their labels.
pub fn evaluate_embeddings(set: &EmbeddingSet, cfg: &EvalConfig) -> Result<(MetricsReport, ClusterAssignment)> {
    let truth = set.true_labels()?;
    let k = if cfg.k == 0 {
        let mut distinct = truth.clone();
        distinct.sort_unstable();
        distinct.dedup();
        distinct.len()
    } else {
        cfg.k
    };
    let matrix = if cfg.normalize {
        set.normalized()?.matrix
    } else {
        set.matrix.clone()
    };
    let assignment = kmeans_restarts(&matrix, k, cfg.seed, cfg.restarts, cfg.max_iter, cfg.tol)?;
    let report = MetricsReport {
        nmi: nmi(&truth, &assignment.labels, cfg.normalization)?,
        ami: ami(&truth, &assignment.labels, cfg.normalization)?,
        ari: ari(&truth, &assignment.labels)?,
        k,
        seed: cfg.seed,
        n_samples: set.len(),
        checkpoint_id: set.checkpoint_id.clone(),
    };
    Ok((report, assignment))
}

pub fn evaluate(ck: &Checkpoint, dataset: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    let set = embed_dataset(ck, dataset, cfg.branch)?;
    Ok(evaluate_embeddings(&set, cfg)?.0)
}
