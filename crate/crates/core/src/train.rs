//! Class-balanced sampling, the optimizer loop, checkpoints and run history.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{make_view_pair, AugmentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{claws_loss, degenerate_pairs, LossConfig};
use crate::model::{ClawsModel, ModelConfig};
use crate::numerics::{AdamConfig, AdamState, Graph, Tensor};
use crate::rng::{self, hash_str, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Images drawn from every class per batch; the batch holds
    /// `per_class · classes` images.
    pub per_class: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            per_class: 5,
            seed: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn classes(&self) -> usize {
        self.model.classes
    }

    pub fn batch_size(&self) -> usize {
        self.per_class * self.model.classes
    }

    /// Copies the augmentation geometry into the model section.
    pub fn sync_geometry(&mut self) {
        self.model.full_height = self.augment.full_height;
        self.model.full_width = self.augment.full_width;
        self.model.crop_size = self.augment.crop_size;
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        let a = &self.augment;
        let m = &self.model;
        if (a.full_height, a.full_width, a.crop_size) != (m.full_height, m.full_width, m.crop_size) {
            return Err(Error::Config(
                "augmentation and model geometries disagree".into(),
            ));
        }
        if !(self.adam.lr >= 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        self.augment.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub contrastive_loss: f64,
    pub supervised_loss: f64,
    pub mask_density: f64,
    pub degenerate_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunHistory {
    pub records: Vec<StepRecord>,
    /// Wall time per epoch. Not part of the CSV export, which must be
    /// reproducible.
    pub epoch_seconds: Vec<f64>,
}

pub const HISTORY_HEADER: &str =
    "step,epoch,contrastive_loss,supervised_loss,mask_density,degenerate_count";

impl RunHistory {
    /// CSV with a `#` provenance line followed by the column header.
    pub fn to_csv(&self, provenance: &str) -> String {
        let mut out = String::new();
        writeln!(out, "# {provenance}").unwrap();
        writeln!(out, "{HISTORY_HEADER}").unwrap();
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.epoch, r.contrastive_loss, r.supervised_loss, r.mask_density, r.degenerate_count
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "run history",
            detail,
        };
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(bad("missing header".into()));
        }
        let records = lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(bad(format!("row {line:?}")));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
                let int = |s: &str| s.parse::<u64>().map_err(|e| bad(e.to_string()));
                Ok(StepRecord {
                    step: int(f[0])?,
                    epoch: int(f[1])?,
                    contrastive_loss: num(f[2])?,
                    supervised_loss: num(f[3])?,
                    mask_density: num(f[4])?,
                    degenerate_count: int(f[5])? as usize,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            records,
            epoch_seconds: Vec::new(),
        })
    }
}

/// Exactly `m` distinct samples from every class, classes in label order.
pub fn sample_balanced_batch<R: Rng + ?Sized>(
    class_indices: &[Vec<usize>],
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut batch = Vec::with_capacity(m * class_indices.len());
    for (c, members) in class_indices.iter().enumerate() {
        if members.len() < m {
            return Err(Error::Config(format!(
                "class {c} has {} samples, fewer than per_class = {m}",
                members.len()
            )));
        }
        batch.extend(index::sample(rng, members.len(), m).into_iter().map(|i| members[i]));
    }
    Ok(batch)
}

/// Values a test needs to audit the mask contract of one step.
#[derive(Clone, Debug)]
pub struct StepInspection {
    pub mask: Tensor,
    pub z_full: Tensor,
    pub z_crop: Tensor,
    pub z_full_masked: Tensor,
    pub z_crop_masked: Tensor,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: StepRecord,
    pub inspection: StepInspection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub epoch: u64,
    pub step: u64,
    pub params: Vec<NamedTensor>,
    pub optimizer: AdamState,
}

pub const CHECKPOINT_FORMAT: &str = "claws-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("unsupported format {} v{}", ck.format, ck.version),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    /// Canonical bytes of the parameter tensors alone.
    pub fn param_payload(&self) -> Vec<u8> {
        serde_json::to_vec(&self.params).expect("params serialize")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::param_payload`].
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.param_payload());
        hex::encode(digest)[..16].to_string()
    }

    /// Rebuilds the model with these parameters.
    pub fn model(&self) -> Result<ClawsModel> {
        let mut model = ClawsModel::new(self.config.model.clone(), &mut rng::stream(&[0]))?;
        let names = model.params().names();
        if names.len() != self.params.len() || names.iter().zip(&self.params).any(|(a, b)| *a != b.name) {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "parameter names do not match the configured architecture".into(),
            });
        }
        model
            .params_mut()
            .load(self.params.iter().map(|p| p.tensor.clone()).collect())?;
        Ok(model)
    }
}

/// Drives optimization over one dataset.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    dataset: &'d Dataset,
    class_indices: Vec<Vec<usize>>,
    model: ClawsModel,
    adam: AdamState,
    epoch: u64,
    step: u64,
}

fn check_dataset(cfg: &TrainConfig, dataset: &Dataset) -> Result<Vec<Vec<usize>>> {
    if dataset.num_classes() != cfg.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, config expects {}",
            dataset.num_classes(),
            cfg.classes()
        )));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.label.is_none()) {
        return Err(Error::Config(format!("sample {} has no label", s.id)));
    }
    let idx = dataset.class_indices();
    for (c, members) in idx.iter().enumerate() {
        if members.len() < cfg.per_class {
            return Err(Error::Config(format!(
                "class {} has {} samples, fewer than per_class = {}",
                dataset.class_names[c],
                members.len(),
                cfg.per_class
            )));
        }
    }
    Ok(idx)
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        let class_indices = check_dataset(&cfg, dataset)?;
        let model = ClawsModel::new(cfg.model.clone(), &mut rng::stream(&[cfg.seed, tag::INIT]))?;
        let adam = AdamState::new(cfg.adam, model.params().tensors());
        Ok(Self {
            cfg,
            dataset,
            class_indices,
            model,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from a checkpoint. `epochs` and `checkpoint_every` may differ
    /// from the checkpoint's config; nothing else may.
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig, dataset: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        let comparable = |c: &TrainConfig| TrainConfig {
            epochs: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        if comparable(&cfg) != comparable(&ck.config) {
            return Err(Error::Config(
                "resume config differs from the checkpoint's beyond epochs/checkpoint_every".into(),
            ));
        }
        let class_indices = check_dataset(&cfg, dataset)?;
        let model = ck.model()?;
        Ok(Self {
            cfg,
            dataset,
            class_indices,
            model,
            adam: ck.optimizer.clone(),
            epoch: ck.epoch,
            step: ck.step,
        })
    }

    pub fn model(&self) -> &ClawsModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// `ceil(dataset size / batch size)`.
    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset.len().div_ceil(self.cfg.batch_size()) as u64
    }

    /// Samples this step's batch, then runs [`Self::train_step`].
    pub fn next_step(&mut self) -> Result<StepOutcome> {
        let mut batch_rng = rng::stream(&[self.cfg.seed, tag::BATCH, self.epoch, self.step]);
        let batch = sample_balanced_batch(&self.class_indices, self.cfg.per_class, &mut batch_rng)?;
        self.train_step(&batch)
    }

    /// Augment, forward, loss, backward and one Adam update on the given
    /// sample indices.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepOutcome> {
        let step = self.step;
        let abort = |reason: String| Error::TrainingAborted { step, reason };

        let pairs = batch
            .iter()
            .map(|&i| {
                let s = &self.dataset.samples[i];
                let mut r = rng::stream(&[self.cfg.seed, tag::AUGMENT, hash_str(&s.id), self.epoch, step]);
                make_view_pair(s, &self.cfg.augment, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = pairs.iter().map(|p| p.label.expect("checked labels")).collect();

        let mut g = Graph::new();
        let bound = self.model.params().bind(&mut g)?;
        let forward = self.model.forward_batch(&mut g, &bound, &pairs).map_err(|e| match e {
            Error::NonFinite { op } => abort(format!("non-finite value in forward op {op}")),
            other => other,
        })?;
        let degenerate = degenerate_pairs(&g, &forward);
        let n_degenerate = degenerate.iter().filter(|&&d| d).count();
        if 2 * n_degenerate > pairs.len() {
            return Err(abort(format!(
                "{n_degenerate} of {} pairs have all-zero masked embeddings",
                pairs.len()
            )));
        }
        let loss = claws_loss(&mut g, &forward, &labels, &self.cfg.loss).map_err(|e| match e {
            Error::NonFinite { op } => abort(format!("non-finite value in loss op {op}")),
            other => other,
        })?;
        let grads = g.backward(loss.total)?;
        let grad_tensors: Vec<Tensor> = bound.vars().iter().map(|&v| grads.get(v)).collect();
        if let Some(i) = grad_tensors.iter().position(|t| !t.is_finite()) {
            return Err(abort(format!(
                "non-finite gradient for {}",
                self.model.params().names()[i]
            )));
        }
        self.adam.update(self.model.params_mut().tensors_mut(), &grad_tensors)?;

        let inspection = StepInspection {
            mask: g.value(forward.mask).clone(),
            z_full: g.value(forward.z_full).clone(),
            z_crop: g.value(forward.z_crop).clone(),
            z_full_masked: g.value(forward.z_full_masked).clone(),
            z_crop_masked: g.value(forward.z_crop_masked).clone(),
        };
        let record = StepRecord {
            step,
            epoch: self.epoch,
            contrastive_loss: loss.contrastive,
            supervised_loss: loss.supervised,
            mask_density: loss.mask_density,
            degenerate_count: loss.degenerate,
        };
        self.step += 1;
        Ok(StepOutcome { record, inspection })
    }

    pub fn run_epoch(&mut self) -> Result<Vec<StepRecord>> {
        let records = (0..self.steps_per_epoch())
            .map(|_| self.next_step().map(|o| o.record))
            .collect::<Result<Vec<_>>>()?;
        self.epoch += 1;
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let ps = self.model.params();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            class_names: self.dataset.class_names.clone(),
            epoch: self.epoch,
            step: self.step,
            params: ps
                .names()
                .iter()
                .zip(ps.tensors())
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    tensor: t.clone(),
                })
                .collect(),
            optimizer: self.adam.clone(),
        }
    }

    /// Runs until `cfg.epochs` epochs are complete. Checkpoints go to
    /// `out_dir` as `checkpoint_epoch_NNNN.json` at the configured cadence.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<RunHistory> {
        let mut history = RunHistory::default();
        while self.epoch < self.cfg.epochs {
            let start = Instant::now();
            history.records.extend(self.run_epoch()?);
            history.epoch_seconds.push(start.elapsed().as_secs_f64());
            if let (Some(dir), every) = (out_dir, self.cfg.checkpoint_every) {
                if every > 0 && self.epoch.is_multiple_of(every) {
                    self.checkpoint().save(&checkpoint_path(dir, self.epoch))?;
                }
            }
        }
        Ok(history)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("checkpoint_epoch_{epoch:04}.json"))
}

/// Fresh training run; returns the final checkpoint (the initial one when
/// `epochs = 0`) and the step history.
pub fn train(dataset: &Dataset, cfg: TrainConfig, out_dir: Option<&Path>) -> Result<(Checkpoint, RunHistory)> {
    let mut trainer = Trainer::new(cfg, dataset)?;
    let history = trainer.run(out_dir)?;
    Ok((trainer.checkpoint(), history))
}
