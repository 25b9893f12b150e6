use std::collections::HashSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use fof_core::data::{generate, load_dataset, save_dataset, Sample};
use fof_core::frl::{contribution_maps, overlay_raster, patch_mask};
use fof_core::mca::{code_name, embeddings_tsv, EmbeddingRow, Projectors, View, BIOMARKERS};
use fof_core::model::{ModelConfig, Vit};
use fof_core::numerics::Tensor;
use fof_core::train::{
    cross_validate, evaluate, focus_iou, grade_probabilities, pooled_features, Ablation, CvOutcome, Metrics,
};
use fof_core::Error;
use serde_json::json;

use crate::config::Resolved;

/// Batch size for contribution maps.
const CAM_CHUNK: usize = 16;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(io(path))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    Ok(())
}

pub fn gen_data(r: &Resolved, out: &Path) -> Result<()> {
    let samples = generate(&r.generator)?;
    save_dataset(&samples, out)?;
    write(&out.join("generator.json"), serde_json::to_string_pretty(&r.generator)?)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

/// Loads a dataset and fills in the model's input size from it unless set
/// explicitly.
fn load_for_training(r: &Resolved, data: &Path) -> Result<(Vec<Sample>, ModelConfig)> {
    let samples = load_dataset(data)?;
    let Some(first) = samples.first() else {
        return Err(Error::Config(format!("{}: dataset is empty", data.display())).into());
    };
    let mut model = r.model.clone();
    if !r.is_explicit("image_h") {
        model.image_h = first.height();
    }
    if !r.is_explicit("image_w") {
        model.image_w = first.width();
    }
    Ok((samples, model))
}

fn summary(name: &str, run: &CvOutcome) -> String {
    let mut line = format!("{name}:");
    for (k, (m, s)) in Metrics::NAMES.iter().zip(run.mean.values().iter().zip(run.std.values())) {
        line.push_str(&format!(" {k} {:.2} ± {:.2}", 100.0 * m, 100.0 * s));
    }
    if let Some(iou) = run.mean_focus_iou() {
        line.push_str(&format!(" focus_iou {iou:.3}"));
    }
    line
}

pub fn train(r: &Resolved, data: &Path, out: &Path) -> Result<()> {
    let (samples, model) = load_for_training(r, data)?;
    let run = cross_validate(&samples, &model, &r.train, Some(out))?;
    println!("{}", summary(r.train.ablation.name(), &run));
    Ok(())
}

pub fn ablate(r: &Resolved, data: &Path, out: &Path) -> Result<()> {
    if r.is_explicit("ablation") {
        bail!(Error::Config("ablate runs every ablation; `ablation` cannot be set".into()));
    }
    let (samples, model) = load_for_training(r, data)?;
    create_dir(out)?;
    let table = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| Error::Io {
        path: table.clone(),
        source: e.into(),
    })?;
    let mut header = vec!["config"];
    header.extend(Metrics::NAMES);
    w.write_record(&header)?;
    let mut details = serde_json::Map::new();
    for ablation in Ablation::ALL {
        let config = fof_core::train::TrainConfig {
            ablation,
            ..r.train.clone()
        };
        let run = cross_validate(&samples, &model, &config, Some(&out.join(ablation.name())))?;
        println!("{}", summary(ablation.name(), &run));
        let mut row = vec![ablation.name().to_string()];
        for (m, s) in run.mean.values().iter().zip(run.std.values()) {
            row.push(format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s));
        }
        w.write_record(&row)?;
        let cohesion: Vec<_> = run
            .mean_cohesion()
            .iter()
            .zip(BIOMARKERS)
            .map(|((intra, inter), b)| json!({"biomarker": b, "intra": intra, "inter": inter}))
            .collect();
        details.insert(
            ablation.name().into(),
            json!({"mean": run.mean, "std": run.std, "focus_iou": run.mean_focus_iou(), "cohesion": cohesion}),
        );
    }
    w.flush().map_err(io(&table))?;
    write(&out.join("ablation.json"), serde_json::to_string_pretty(&details)?)?;
    Ok(())
}

/// Samples listed in `ids` (one per line), or all samples.
fn select(samples: Vec<Sample>, ids: Option<&Path>) -> Result<Vec<Sample>> {
    let Some(path) = ids else {
        return Ok(samples);
    };
    let text = fs::read_to_string(path).map_err(io(path))?;
    let wanted: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let have: HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    if let Some(missing) = wanted.iter().find(|id| !have.contains(*id)) {
        bail!(Error::Config(format!("{}: sample `{missing}` is not in the dataset", path.display())));
    }
    let wanted: HashSet<&str> = wanted.into_iter().collect();
    Ok(samples.into_iter().filter(|s| wanted.contains(s.id.as_str())).collect())
}

pub struct Inspect<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub checkpoint: &'a Path,
    pub ids: Option<&'a Path>,
}

impl Inspect<'_> {
    fn load(&self) -> Result<(Vit<f32>, Vec<Sample>)> {
        let model = Vit::<f32>::load(self.checkpoint)?;
        let samples = select(load_dataset(self.data)?, self.ids)?;
        if samples.is_empty() {
            bail!(Error::Config(format!("{}: no samples selected", self.data.display())));
        }
        Ok((model, samples))
    }
}

pub fn eval(r: &Resolved, args: &Inspect) -> Result<()> {
    let (model, samples) = args.load()?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let report = evaluate(&model, &refs)?;
    let iou = focus_iou(&model, &refs, r.train.theta)?;
    create_dir(args.out)?;
    let body = json!({
        "checkpoint": args.checkpoint,
        "metrics": report,
        "focus_iou": iou,
    });
    write(&args.out.join("metrics.json"), serde_json::to_string_pretty(&body)?)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

/// Contribution maps for the predicted grade, as `{id}_cam.pgm`, with
/// thresholded patch overlays as `{id}_overlay.ppm` and a `cam.csv` index.
pub fn cam(r: &Resolved, args: &Inspect) -> Result<()> {
    let (model, samples) = args.load()?;
    create_dir(args.out)?;
    let k = model.config().num_grades;
    let p = model.config().patch_size;
    let mut rows = vec!["sample_id,grade,predicted,positive_patches".to_string()];
    for chunk in samples.chunks(CAM_CHUNK) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let probs = grade_probabilities(&model, &images)?;
        let preds: Vec<usize> = probs
            .chunks(k)
            .map(|row| (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b }))
            .collect();
        let maps = contribution_maps(&model, &images, &preds)?;
        for ((s, map), &pred) in chunk.iter().zip(&maps).zip(&preds) {
            let mask = patch_mask(map, p, r.train.theta)?;
            map.to_raster().write(&args.out.join(format!("{}_cam.pgm", s.id)))?;
            overlay_raster(&s.image, &mask)?.write(&args.out.join(format!("{}_overlay.ppm", s.id)))?;
            rows.push(format!("{},{},{},{}", s.id, s.grade + 2, pred + 2, mask.positives()));
        }
    }
    write(&args.out.join("cam.csv"), rows.join("\n") + "\n")?;
    println!("wrote {} contribution maps to {}", samples.len(), args.out.display());
    Ok(())
}

/// Projected global embeddings, one `{biomarker}.tsv` per subspace.
pub fn embed(args: &Inspect, projectors: &Path) -> Result<()> {
    let (model, samples) = args.load()?;
    let heads = Projectors::<f32>::load(projectors)?;
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let embs = heads.embed(&pooled_features(&model, &images)?)?;
    create_dir(args.out)?;
    for (n, emb) in embs.iter().enumerate() {
        let dim = emb.shape()[1];
        let values: Vec<f64> = emb.data().iter().map(|&x| f64::from(x)).collect();
        let rows: Vec<EmbeddingRow> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| EmbeddingRow {
                sample_id: &s.id,
                view: View::Glb,
                label: s.panel.map_or_else(|| "NA".into(), |p| code_name(n, p.code(n))),
                values: &values[i * dim..(i + 1) * dim],
            })
            .collect();
        write(&args.out.join(format!("{}.tsv", BIOMARKERS[n])), embeddings_tsv(&rows))?;
    }
    println!("wrote {} subspaces for {} samples to {}", embs.len(), samples.len(), args.out.display());
    Ok(())
}

