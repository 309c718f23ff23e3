//! End-to-end workflows over files, shared by the command line and tests.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{ingest, Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::eval::{embed_dataset, evaluate_embeddings, EmbeddingSet, MetricsReport};
use crate::gmm::{detect_outliers, gmm_assign, gmm_fit, projection_csv, select_dims, standardize_columns, GmmModel, OutlierReport};
use crate::train::{Checkpoint, RunHistory, Trainer};

pub const HISTORY_FILE: &str = "history.csv";
pub const FINAL_CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Ingests with the crop size as the minimum side, the precondition of
/// every augmentation.
pub fn load_dataset(root: &Path, cfg: &RunConfig) -> Result<(Dataset, DatasetManifest)> {
    ingest(root, cfg.train.augment.crop_size)
}

pub fn history_provenance(cfg: &RunConfig) -> String {
    format!("config_hash={} seed={}", cfg.hash(), cfg.train.seed)
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: RunHistory,
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
}

/// Trains from scratch, or from `resume`, and writes the resolved config,
/// the history CSV and the final checkpoint into `out_dir`.
pub fn train_run(dataset: &Dataset, cfg: &mut RunConfig, out_dir: &Path, resume: Option<&Checkpoint>) -> Result<TrainOutput> {
    cfg.resolve_for(dataset)?;
    ensure_dir(out_dir)?;
    write(&out_dir.join(RESOLVED_CONFIG_FILE), cfg.to_kv())?;
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, cfg.train.clone(), dataset)?,
        None => Trainer::new(cfg.train.clone(), dataset)?,
    };
    let history = trainer.run(Some(out_dir))?;
    let checkpoint = trainer.checkpoint();
    let checkpoint_path = out_dir.join(FINAL_CHECKPOINT_FILE);
    checkpoint.save(&checkpoint_path)?;
    let history_path = out_dir.join(HISTORY_FILE);
    write(&history_path, history.to_csv(&history_provenance(cfg)))?;
    Ok(TrainOutput {
        checkpoint,
        history,
        checkpoint_path,
        history_path,
    })
}

/// Embedding-set rows must follow the checkpoint's class layout.
fn check_classes(ck: &Checkpoint, dataset: &Dataset) -> Result<()> {
    if ck.class_names != dataset.class_names {
        return Err(Error::Config(format!(
            "checkpoint classes {:?} differ from dataset classes {:?}",
            ck.class_names, dataset.class_names
        )));
    }
    Ok(())
}

pub fn embed_run(ck: &Checkpoint, dataset: &Dataset, cfg: &RunConfig) -> Result<EmbeddingSet> {
    check_classes(ck, dataset)?;
    embed_dataset(ck, dataset, cfg.eval.branch)
}

pub fn evaluate_run(ck: &Checkpoint, dataset: &Dataset, cfg: &RunConfig) -> Result<MetricsReport> {
    let set = embed_run(ck, dataset, cfg)?;
    Ok(evaluate_embeddings(&set, &cfg.eval)?.0)
}

pub struct GmmOutput {
    pub model: GmmModel,
    pub report: OutlierReport,
    pub dims: Vec<usize>,
    pub projection_csv: String,
}

/// Fits the mixture to one class's embeddings (or all of them) and
/// produces the outlier report and the 3-column inspection projection.
pub fn gmm_run(set: &EmbeddingSet, class: Option<usize>, cfg: &RunConfig) -> Result<GmmOutput> {
    let subset = match class {
        Some(c) => set.filter_label(c)?,
        None => set.clone(),
    };
    if cfg.gmm.dims != 3 {
        return Err(Error::Config("the projection export needs gmm_dims = 3".into()));
    }
    let subset = if cfg.gmm.normalize { subset.normalized()? } else { subset };
    let x = if cfg.gmm.standardize {
        standardize_columns(&subset.matrix)?
    } else {
        subset.matrix.clone()
    };
    let model = gmm_fit(&x, &cfg.gmm)?;
    let report = detect_outliers(&model, &x, &subset.ids, &subset.checkpoint_id)?;
    // The projection shows the fitted coordinates.
    let (projection, dims) = select_dims(&x, cfg.gmm.dims, cfg.gmm.seed)?;
    let components = gmm_assign(&model, &x)?.labels;
    let provenance = format!(
        "checkpoint_id={} config_hash={} seed={}",
        subset.checkpoint_id,
        cfg.hash(),
        cfg.gmm.seed
    );
    let projection_csv = projection_csv(&subset.ids, &projection, &dims, &components, &provenance)?;
    Ok(GmmOutput {
        model,
        report,
        dims,
        projection_csv,
    })
}
