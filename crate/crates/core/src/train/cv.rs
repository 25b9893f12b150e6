use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::metrics::{compute_metrics, Metrics, MetricsReport};
use super::optim::cosine_lr;
use super::trainer::{epoch_batches, Batch, Trainer};
use super::{derive_seed, TrainConfig};
use crate::data::{kfold_split, Sample};
use crate::error::{Error, Result};
use crate::frl;
use crate::mca::{label_cohesion, Projectors, NUM_BIOMARKERS};
use crate::model::{ModelConfig, Vit};
use crate::numerics::{Graph, Scalar, Tensor};

const SPLIT: u64 = 0;
const MODEL_INIT: u64 = 1;
const PROJECTOR_INIT: u64 = 2;
const SHUFFLE: u64 = 3;
const FOLD: u64 = 4;

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub fold: usize,
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub frl: f64,
    pub mca: f64,
    pub lr: f64,
}

/// Trains a fresh model on `train` for `config.epochs` epochs. All
/// randomness (init, shuffling, augmentation) derives from `seed`.
pub fn train_fold(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train: &[&Sample],
    seed: u64,
    fold: usize,
) -> Result<(Trainer, Vec<StepLog>)> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::BatchSize { got: train.len(), min: 2 });
    }
    let model = Vit::init(model_config.clone(), derive_seed(seed, MODEL_INIT, 0))?;
    let mut trainer = Trainer::new(model, config.clone(), derive_seed(seed, PROJECTOR_INIT, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE, 0));
    let n = train.len();
    let per_epoch = n / config.batch_size + usize::from(n % config.batch_size >= 2);
    let total_steps = per_epoch * config.epochs;
    let mut log = Vec::with_capacity(total_steps);
    for epoch in 0..config.epochs {
        let batches = epoch_batches(n, config.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        for idx in &batches {
            let samples: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let batch = Batch::from_samples(&samples, config.augment.then_some(&mut rng))?;
            let step = log.len();
            let lr = cosine_lr(step, total_steps, config.lr);
            let l = trainer.step(&batch, lr)?;
            epoch_loss += l.total;
            log.push(StepLog {
                fold,
                step,
                total: l.total,
                cls: l.cls,
                frl: l.frl,
                mca: l.mca,
                lr,
            });
        }
        log::info!(
            "fold {fold} epoch {}/{}: mean loss {:.4}",
            epoch + 1,
            config.epochs,
            epoch_loss / batches.len().max(1) as f64
        );
    }
    Ok((trainer, log))
}

/// Class probabilities `[n, K]` from the classifier alone, with the
/// background output dropped and the softmax renormalized over grades.
pub fn grade_probabilities<T: Scalar>(model: &Vit<T>, images: &[&Tensor<T>]) -> Result<Vec<f64>> {
    let k = model.config().num_grades;
    let outputs = model.config().num_outputs();
    let mut probs = Vec::with_capacity(images.len() * k);
    for chunk in images.chunks(EVAL_CHUNK) {
        let logits = model.logits(chunk)?;
        for row in logits.data().chunks(outputs) {
            let z: Vec<f64> = row[..k].iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            probs.extend(e.iter().map(|v| v / sum));
        }
    }
    Ok(probs)
}

/// Grading metrics from images alone.
pub fn evaluate(model: &Vit<f32>, samples: &[&Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty sample set".into()));
    }
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let probs = grade_probabilities(model, &images)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.grade).collect();
    Ok(compute_metrics(&probs, &labels, model.config().num_grades))
}

/// Mean IoU between `{A > theta}` for the ground-truth class and the
/// ground-truth focus mask, over samples of grade III or IV that carry a
/// mask. `None` if there are no such samples.
pub fn focus_iou(model: &Vit<f32>, samples: &[&Sample], theta: f64) -> Result<Option<f64>> {
    let eligible: Vec<&Sample> = samples
        .iter()
        .copied()
        .filter(|s| s.grade > 0 && s.focus_mask.is_some())
        .collect();
    if eligible.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for chunk in eligible.chunks(EVAL_CHUNK) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let targets: Vec<usize> = chunk.iter().map(|s| s.grade).collect();
        let maps = frl::contribution_maps(model, &images, &targets)?;
        for (s, m) in chunk.iter().zip(&maps) {
            let truth = s.focus_mask.as_deref().unwrap_or_default();
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &t) in m.scores.iter().zip(truth) {
                let p = a > theta;
                inter += usize::from(p && t);
                union += usize::from(p || t);
            }
            total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        }
    }
    Ok(Some(total / eligible.len() as f64))
}

/// Pooled encoder features `[n, d]` of the given images.
pub fn pooled_features(model: &Vit<f32>, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let d = model.config().embed_dim;
    let mut out = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let o = model.forward_graph(&mut g, &vars, chunk, false)?;
        out.extend_from_slice(g.data(o.pooled));
    }
    Tensor::new(&[images.len(), d], out)
}

/// Per biomarker, the mean intra-label and inter-label cosine similarity of
/// the samples' projected global embeddings.
pub fn embedding_cohesion(
    model: &Vit<f32>,
    projectors: &Projectors<f32>,
    samples: &[&Sample],
) -> Result<Vec<(Option<f64>, Option<f64>)>> {
    let panels = samples
        .iter()
        .map(|s| s.panel.ok_or_else(|| Error::Config(format!("sample {} has no biomarker panel", s.id))))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let feats = pooled_features(model, &images)?;
    let embs = projectors.embed(&feats)?;
    Ok((0..NUM_BIOMARKERS)
        .map(|n| {
            let rows: Vec<f64> = embs[n].data().iter().map(|&x| f64::from(x)).collect();
            let labels: Vec<usize> = panels.iter().map(|p| p.code(n)).collect();
            label_cohesion(&rows, embs[n].shape()[1], &labels)
        })
        .collect())
}

/// Result of training and testing one fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub report: MetricsReport,
    pub focus_iou: Option<f64>,
    /// Per biomarker `(intra, inter)` cosine similarity on test samples;
    /// empty without projection heads.
    pub cohesion: Vec<(Option<f64>, Option<f64>)>,
    pub losses: Vec<StepLog>,
    pub model: Vit<f32>,
    pub projectors: Option<Projectors<f32>>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl CvOutcome {
    /// Mean focus IoU over folds that have one.
    pub fn mean_focus_iou(&self) -> Option<f64> {
        let v: Vec<f64> = self.folds.iter().filter_map(|f| f.focus_iou).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Per biomarker, intra and inter similarity averaged over folds.
    pub fn mean_cohesion(&self) -> Vec<(Option<f64>, Option<f64>)> {
        let avg = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        (0..NUM_BIOMARKERS)
            .map(|n| {
                let col = |pick: fn(&(Option<f64>, Option<f64>)) -> Option<f64>| {
                    avg(self.folds.iter().filter_map(|f| f.cohesion.get(n).and_then(pick)).collect())
                };
                (col(|c| c.0), col(|c| c.1))
            })
            .collect()
    }

    pub fn metrics_json(&self) -> serde_json::Value {
        let folds: Vec<serde_json::Value> = self
            .folds
            .iter()
            .map(|f| {
                serde_json::json!({
                    "fold": f.fold,
                    "metrics": f.report,
                    "focus_iou": f.focus_iou,
                    "cohesion": f.cohesion.iter().map(|(a, b)| serde_json::json!({"intra": a, "inter": b})).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({ "folds": folds, "mean": self.mean, "std": self.std })
    }
}

/// Flat key-value view of the model and training configuration.
pub fn resolved_config(model: &ModelConfig, train: &TrainConfig) -> Result<serde_json::Value> {
    let mut out = serde_json::Map::new();
    for part in [serde_json::to_value(model)?, serde_json::to_value(train)?] {
        if let serde_json::Value::Object(map) = part {
            out.extend(map);
        }
    }
    Ok(serde_json::Value::Object(out))
}

/// Patient-level k-fold cross-validation with an independent model per fold.
///
/// With `out`, writes `config.json`, `metrics.json`, `loss_curve.csv`, and
/// per fold `fold{i}/model.ckpt`, `fold{i}/projectors.ckpt` (when present)
/// and `fold{i}/test_ids.txt`.
pub fn cross_validate(
    samples: &[Sample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<CvOutcome> {
    config.validate()?;
    model_config.validate()?;
    let splits = kfold_split(samples, config.folds, derive_seed(config.seed, SPLIT, 0))?;
    let mut folds = Vec::with_capacity(splits.len());
    for (f, split) in splits.iter().enumerate() {
        let train: Vec<&Sample> = split.train.iter().map(|&i| &samples[i]).collect();
        let test: Vec<&Sample> = split.test.iter().map(|&i| &samples[i]).collect();
        let (trainer, losses) = train_fold(model_config, config, &train, derive_seed(config.seed, FOLD, f as u64), f)?;
        let (model, projectors) = trainer.into_parts();
        let report = evaluate(&model, &test)?;
        let iou = focus_iou(&model, &test, config.theta)?;
        let cohesion = match &projectors {
            Some(p) if test.iter().all(|s| s.panel.is_some()) => embedding_cohesion(&model, p, &test)?,
            _ => Vec::new(),
        };
        log::info!(
            "fold {f}: accuracy {:.3} auc {:.3} iou {:?}",
            report.metrics.accuracy,
            report.metrics.auc,
            iou
        );
        folds.push(FoldOutcome {
            fold: f,
            test_ids: test.iter().map(|s| s.id.clone()).collect(),
            report,
            focus_iou: iou,
            cohesion,
            losses,
            model,
            projectors,
        });
    }
    let all: Vec<Metrics> = folds.iter().map(|f| f.report.metrics).collect();
    let (mean, std) = Metrics::aggregate(&all);
    let outcome = CvOutcome { folds, mean, std };
    if let Some(dir) = out {
        write_run(dir, &outcome, model_config, config)?;
    }
    Ok(outcome)
}

fn write_run(dir: &Path, run: &CvOutcome, model_config: &ModelConfig, config: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    write("config.json", serde_json::to_string_pretty(&resolved_config(model_config, config)?)?)?;
    write("metrics.json", serde_json::to_string_pretty(&run.metrics_json())?)?;

    let curve = dir.join("loss_curve.csv");
    let mut w = csv::Writer::from_path(&curve).map_err(|e| Error::io(&curve, e.into()))?;
    for row in run.folds.iter().flat_map(|f| &f.losses) {
        w.serialize(row).map_err(|e| Error::io(&curve, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&curve, e))?;

    for f in &run.folds {
        let fd = dir.join(format!("fold{}", f.fold));
        fs::create_dir_all(&fd).map_err(|e| Error::io(&fd, e))?;
        f.model.save(&fd.join("model.ckpt"))?;
        if let Some(p) = &f.projectors {
            p.save(&fd.join("projectors.ckpt"))?;
        }
        let ids = fd.join("test_ids.txt");
        fs::write(&ids, f.test_ids.join("\n") + "\n").map_err(|e| Error::io(&ids, e))?;
    }
    Ok(())
}
