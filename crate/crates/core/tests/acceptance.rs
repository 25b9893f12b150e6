//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 1-4 and 8 are exact or tolerance checks and fail the run when
//! violated. Criteria 5-7 are relative training outcomes on the synthetic
//! cohort; they are measured and reported with their numbers, and a FAIL
//! there is a finding about the method at this scale rather than a defect.
//!
//! Pass a substring (`cargo test --test acceptance -- gradients`) to run a
//! subset.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use fof_core::data::{generate, load_dataset, save_dataset, GeneratorConfig, Sample};
use fof_core::frl::{self, ContributionMap, PatchMask};
use fof_core::mca::{self, BiomarkerPanel, Codel, Idh, ProjectorConfig, Projectors, NUM_BIOMARKERS};
use fof_core::model::{ModelConfig, Vit};
use fof_core::numerics::gradcheck::check_gradients;
use fof_core::numerics::{Graph, Tensor, Var};
use fof_core::trace;
use fof_core::train::{
    self, cross_validate, objective, train_fold, Ablation, Batch, CvOutcome, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: String) -> Line {
    Line { pass, detail }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weigh(g: &mut Graph<f64>, x: Var, seed: u64) -> fof_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(randn(&mut rng, g.shape(x)));
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

type Probe = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> fof_core::Result<Var>>;

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn primitive_probes(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Probe)> {
    let a = randn(rng, &[3, 4]);
    let b = randn(rng, &[3, 4]);
    let c = randn(rng, &[4, 2]);
    let row = randn(rng, &[4]);
    let positive = Tensor::from_fn(&[3, 4], |i| 0.3 + 0.2 * i as f64);
    let off_kink = Tensor::from_fn(&[3, 4], |i| if i % 2 == 0 { 0.5 + i as f64 } else { -0.4 - i as f64 });
    let qkv = randn(rng, &[2 * 3, 3 * 4]);
    let ln = (randn(rng, &[3, 5]), randn(rng, &[5]), randn(rng, &[5]));
    vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.add(v[0], v[1])?; weigh(g, y, 1) })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; weigh(g, y, 2) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; weigh(g, y, 3) })),
        ("add_row", vec![a.clone(), row], Box::new(|g, v| { let y = g.add_row(v[0], v[1])?; weigh(g, y, 4) })),
        ("scale", vec![a.clone()], Box::new(|g, v| { let y = g.scale(v[0], -1.7); weigh(g, y, 5) })),
        ("add_scalar", vec![a.clone()], Box::new(|g, v| { let y = g.add_scalar(v[0], 0.4); let y = g.mul(y, y)?; weigh(g, y, 6) })),
        ("exp", vec![a.clone()], Box::new(|g, v| { let y = g.exp(v[0]); weigh(g, y, 7) })),
        ("log", vec![positive], Box::new(|g, v| { let y = g.log(v[0]); weigh(g, y, 8) })),
        ("relu", vec![off_kink], Box::new(|g, v| { let y = g.relu(v[0]); weigh(g, y, 9) })),
        ("gelu", vec![a.clone()], Box::new(|g, v| { let y = g.gelu(v[0]); weigh(g, y, 10) })),
        ("matmul", vec![a.clone(), c], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; weigh(g, y, 11) })),
        ("transpose", vec![a.clone()], Box::new(|g, v| { let y = g.transpose(v[0])?; weigh(g, y, 12) })),
        ("reshape", vec![a.clone()], Box::new(|g, v| { let y = g.reshape(v[0], &[6, 2])?; weigh(g, y, 13) })),
        ("softmax_rows", vec![a.clone()], Box::new(|g, v| { let y = g.softmax(v[0], 1)?; weigh(g, y, 14) })),
        ("softmax_cols", vec![a.clone()], Box::new(|g, v| { let y = g.softmax(v[0], 0)?; weigh(g, y, 15) })),
        ("log_softmax", vec![a.clone()], Box::new(|g, v| { let y = g.log_softmax(v[0])?; weigh(g, y, 16) })),
        ("layer_norm", vec![ln.0, ln.1, ln.2], Box::new(|g, v| { let y = g.layer_norm(v[0], v[1], v[2])?; weigh(g, y, 17) })),
        ("sum", vec![a.clone()], Box::new(|g, v| { let s = g.sum(v[0]); g.mul(s, s) })),
        ("mean", vec![a.clone()], Box::new(|g, v| { let m = g.mean(v[0]); let e = g.exp(v[0]); let s = g.sum(e); g.mul(m, s) })),
        ("sum_axis", vec![a.clone()], Box::new(|g, v| { let y = g.sum_axis(v[0], 0)?; weigh(g, y, 18) })),
        ("concat", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.concat(&[v[0], v[1], v[0]], 0)?; weigh(g, y, 19) })),
        ("slice", vec![a.clone()], Box::new(|g, v| { let y = g.slice(v[0], 1, 1, 2)?; weigh(g, y, 20) })),
        ("gather", vec![a.clone()], Box::new(|g, v| { let y = g.gather(v[0], &[2, 0, 2, 1])?; weigh(g, y, 21) })),
        ("attention", vec![qkv], Box::new(|g, v| { let y = g.attention(v[0], 2, 2)?; weigh(g, y, 22) })),
        ("cross_entropy", vec![a.clone()], Box::new(|g, v| g.cross_entropy(v[0], &[3, 0, 2]))),
        ("cosine_similarity", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.cosine_similarity(v[0], v[1])?; weigh(g, y, 23) })),
        ("l2_normalize", vec![a], Box::new(|g, v| { let y = g.l2_normalize(v[0])?; weigh(g, y, 24) })),
    ]
}

fn composite_check(ablation: Ablation) -> fof_core::Result<f64> {
    let model_config = ModelConfig {
        image_h: 16,
        image_w: 16,
        patch_size: 8,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    };
    let model = Vit::<f64>::init(model_config, 11)?;
    let proj = Projectors::<f64>::init(
        ProjectorConfig {
            embed_dim: 8,
            proj_dim: 4,
            heads: NUM_BIOMARKERS,
        },
        12,
    )?;
    let config = TrainConfig {
        ablation,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let images: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::from_fn(&[16, 16, 3], |_| rng.random_range(0.0..1.0))).collect();
    let grades = [1, 2];
    let panels = [
        Some(BiomarkerPanel::new(Idh::Mutant, Codel::Intact, [0, 1, -1, 0])?),
        Some(BiomarkerPanel::new(Idh::Wildtype, Codel::Intact, [0, 2, -1, 1])?),
    ];
    let masks = [
        PatchMask::from_cells(2, 2, 8, vec![true, false, false, true])?,
        PatchMask::from_cells(2, 2, 8, vec![false, true, true, true])?,
    ];
    let nm = model.params().len();
    let mut inputs: Vec<Tensor<f64>> = model.params().tensors().to_vec();
    if ablation.uses_mca() {
        inputs.extend(proj.params().tensors().iter().cloned());
    }
    // Zero biases can leave a projected row exactly at the origin, where the
    // normalization is not differentiable; check at a generic point instead.
    for t in &mut inputs {
        *t = Tensor::from_fn(t.shape(), |i| t.data()[i] + rng.random_range(-0.05..0.05));
    }
    let check = check_gradients(&inputs, 1e-5, |g, v| {
        let refs: Vec<&Tensor<f64>> = images.iter().collect();
        let heads = ablation.uses_mca().then(|| (&proj, &v[nm..]));
        let m = ablation.uses_frl().then_some(&masks[..]);
        Ok(objective(g, &model, &v[..nm], heads, &refs, &grades, &panels, m, &config)?.root)
    })?;
    Ok(check.max_relative_error())
}

fn criterion_gradients() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = (0.0f64, "");
    let mut errors = Vec::new();
    for (name, inputs, f) in primitive_probes(&mut rng) {
        match check_gradients(&inputs, 1e-5, |g, v| f(g, v)) {
            Ok(c) => {
                let e = c.max_relative_error();
                if e > worst.0 || !e.is_finite() {
                    worst = (e, name);
                }
            }
            Err(e) => errors.push(format!("{name}: {e}")),
        }
    }
    let mut composite = BTreeMap::new();
    for ablation in Ablation::ALL {
        match composite_check(ablation) {
            Ok(e) => {
                composite.insert(ablation.name(), e);
            }
            Err(e) => errors.push(format!("composite {ablation}: {e}")),
        }
    }
    let comp_worst = composite.values().cloned().fold(0.0, f64::max);
    let pass = errors.is_empty() && worst.0 < 1e-4 && comp_worst < 1e-3;
    line(
        pass,
        format!(
            "27 primitives max rel err {:.2e} ({}) < 1e-4; 2-sample composite {} < 1e-3{}",
            worst.0,
            worst.1,
            composite.iter().map(|(k, v)| format!("{k} {v:.2e}")).collect::<Vec<_>>().join(", "),
            if errors.is_empty() { String::new() } else { format!("; errors: {}", errors.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Closed-form loss values

fn scalar_of(f: impl FnOnce(&mut Graph<f64>) -> fof_core::Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).expect("closed-form probe evaluates");
    g.value(v).item()
}

fn criterion_closed_forms() -> Line {
    let mut notes = Vec::new();
    let mut pass = true;

    let mut ce_err = 0.0f64;
    for k in [2, 3, 4, 7] {
        let l = scalar_of(|g| {
            let z = g.constant(Tensor::full(&[5, k], 1.3));
            g.cross_entropy(z, &[0, 1, 1, 0, k - 1])
        });
        ce_err = ce_err.max((l - (k as f64).ln()).abs());
    }
    pass &= ce_err < 1e-6;
    notes.push(format!("CE uniform |Δ| {ce_err:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = randn(&mut rng, &[4, 6]);
    let mut sym_err = 0.0f64;
    for tau in [0.07, 0.5, 2.0] {
        let l = scalar_of(|g| {
            let x = g.constant(v.clone());
            frl::consistency_loss(g, x, x, x, tau)
        });
        sym_err = sym_err.max((l - 3f64.ln()).abs());
    }
    pass &= sym_err < 1e-6;
    notes.push(format!("L_FRL symmetric |Δ ln3| {sym_err:.1e}"));

    let tau = 0.07;
    let glb = Tensor::from_fn(&[3, 6], |i| if i % 6 < 3 { rng.random_range(0.2..1.0) } else { 0.0 });
    let neg = Tensor::from_fn(&[3, 6], |i| if i % 6 >= 3 { rng.random_range(0.2..1.0) } else { 0.0 });
    let l = scalar_of(|g| {
        let a = g.constant(glb.clone());
        let n = g.constant(neg.clone());
        frl::consistency_loss(g, a, a, n, tau)
    });
    let orth_err = (l - 2.0 * (-1.0 / tau).exp()).abs();
    pass &= orth_err < 1e-7;
    notes.push(format!("L_FRL glb=pos⟂neg {l:.3e} |Δ| {orth_err:.1e}"));

    let distinct = scalar_of(|g| {
        let e = g.constant(randn(&mut rng, &[6, 4]));
        let e = g.l2_normalize(e)?;
        mca::subspace_loss(g, e, &[0, 1, 2, 3, 4, 5], tau)
    });
    let pair = scalar_of(|g| {
        let e = g.constant(Tensor::from_f64(&[2, 3], &[0.48, 0.6, 0.64, 0.48, 0.6, 0.64])?);
        mca::subspace_loss(g, e, &[1, 1], tau)
    });
    pass &= distinct == 0.0 && pair == 0.0;
    notes.push(format!("L_MCA distinct {distinct}, identical pair {pair}"));
    line(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 3. FRL structural invariants

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_h: 32,
        image_w: 32,
        patch_size: 8,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

fn tiny_data(n_patients: usize, seed: u64) -> Vec<Sample> {
    generate(&GeneratorConfig {
        n_patients,
        image_size: 32,
        blob_radius: [4.0, 6.0],
        streak_length: [10.0, 18.0],
        seed,
        ..GeneratorConfig::default()
    })
    .expect("generator config is valid")
}

fn grads_of(t: &Trainer) -> Vec<Vec<f32>> {
    let mut out: Vec<Vec<f32>> = t.model().params().tensors().iter().map(|x| x.grad().map(<[f32]>::to_vec).unwrap_or_default()).collect();
    if let Some(p) = t.projectors() {
        out.extend(p.params().tensors().iter().map(|x| x.grad().map(<[f32]>::to_vec).unwrap_or_default()));
    }
    out
}

fn frl_invariants() -> fof_core::Result<Line> {
    let config = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut out_of_range, mut one_sided, mut not_partition, mut n) = (0, 0, 0, 0);
    for chunk in 0..20 {
        let model = Vit::<f32>::init(config.clone(), 100 + chunk)?;
        let images: Vec<Tensor<f32>> =
            (0..50).map(|_| Tensor::from_fn(&config.image_shape(), |_| rng.random_range(0.0..1.0))).collect();
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        let targets: Vec<usize> = (0..50).map(|_| rng.random_range(0..config.num_grades)).collect();
        let maps = frl::contribution_maps(&model, &refs, &targets)?;
        for (img, map) in images.iter().zip(&maps) {
            n += 1;
            if map.scores.iter().any(|a| !(0.0..=1.0).contains(a)) {
                out_of_range += 1;
            }
            let theta = rng.random_range(0.05..0.95);
            let mask = frl::patch_mask(map, config.patch_size, theta)?;
            if mask.positives() == 0 || mask.negatives() == 0 {
                one_sided += 1;
            }
            for x in [img.clone(), model.normalize(img)?] {
                let t = frl::split_regions(&x, &mask)?;
                let exact = t.pos.data().iter().zip(t.neg.data()).zip(t.glb.data()).all(|((p, q), g)| p + q == *g);
                if !exact || t.glb != x {
                    not_partition += 1;
                }
            }
        }
    }
    // Degenerate maps: all zero, all one, constant, a single spike, random.
    let side = 64;
    for i in 0..1000 {
        let scores: Vec<f64> = match i % 5 {
            0 => vec![0.0; side * side],
            1 => vec![1.0; side * side],
            2 => vec![rng.random_range(0.0..1.0); side * side],
            3 => {
                let k = rng.random_range(0..side * side);
                (0..side * side).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
            }
            _ => (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let map = ContributionMap {
            height: side,
            width: side,
            scores,
            raw: Vec::new(),
            alpha: Vec::new(),
            target_class: 0,
        };
        let mask = frl::patch_mask(&map, 8, rng.random_range(0.01..0.99))?;
        if mask.positives() == 0 || mask.negatives() == 0 {
            one_sided += 1;
        }
    }

    // Stop-gradient isolation: the second pass sees only the boolean mask.
    let data = tiny_data(4, 7);
    let refs: Vec<&Sample> = data.iter().take(4).collect();
    let batch = Batch::from_samples(&refs, None)?;
    let base = Trainer::new(Vit::init(tiny_model(), 5)?, TrainConfig::default(), 6)?;
    let mut live = base.clone();
    let live_masks = live.focus_masks(&batch)?.expect("full config builds masks");
    let untouched = live.model().params().flatten() == base.model().params().flatten()
        && live.model().params().tensors().iter().all(|t| t.grad().is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    live.accumulate(&batch, Some(&live_masks))?;

    let images: Vec<&Tensor<f32>> = batch.images.iter().collect();
    let frozen: Vec<ContributionMap> = frl::contribution_maps(base.model(), &images, &batch.grades)?
        .into_iter()
        .map(|m| ContributionMap {
            scores: m.scores.clone(),
            raw: Vec::new(),
            alpha: Vec::new(),
            ..m
        })
        .collect();
    let const_masks: Vec<PatchMask> =
        frozen.iter().map(|m| frl::patch_mask(m, 8, 0.5)).collect::<fof_core::Result<_>>()?;
    let mut constant = base.clone();
    constant.accumulate(&batch, Some(&const_masks))?;
    let same_masks = const_masks.iter().map(|m| &m.cells).eq(live_masks.iter().map(|m| &m.cells));
    let isolated = grads_of(&live) == grads_of(&constant);

    let pass = out_of_range == 0 && one_sided == 0 && not_partition == 0 && untouched && same_masks && isolated;
    Ok(line(
        pass,
        format!(
            "{n} model maps + 1000 degenerate maps: A out of [0,1] {out_of_range}, one-sided masks {one_sided}, \
             inexact pos+neg {not_partition}; pass 1 leaves model untouched {untouched}; \
             grads with constant-A masks bit-identical {isolated}"
        ),
    ))
}

fn criterion_frl() -> Line {
    frl_invariants().unwrap_or_else(|e| line(false, format!("error: {e}")))
}

// ---------------------------------------------------------------------------
// 4. Metric oracles

/// ROC area by sweeping every distinct score as a `>=` threshold.
fn oracle_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let p = truth.iter().filter(|&&t| t).count() as f64;
    let n = truth.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = scores.iter().zip(truth).filter(|(s, &y)| **s >= t && y).count() as f64;
        let fp = scores.iter().zip(truth).filter(|(s, &y)| **s >= t && !y).count() as f64;
        pts.push((fp / n, tp / p));
    }
    Some(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// `Σ (R_t − R_{t−1}) P_t` over distinct thresholds, descending.
fn oracle_ap(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let p = truth.iter().filter(|&&t| t).count() as f64;
    if p == 0.0 || p == truth.len() as f64 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut prev_recall, mut ap) = (0.0, 0.0);
    for t in thresholds {
        let tp = scores.iter().zip(truth).filter(|(s, &y)| **s >= t && y).count() as f64;
        let sel = scores.iter().filter(|s| **s >= t).count() as f64;
        let recall = tp / p;
        ap += (recall - prev_recall) * (tp / sel);
        prev_recall = recall;
    }
    Some(ap)
}

fn oracle_kappa(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let n = labels.len() as f64;
    let mut m = vec![vec![0.0; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        m[y][p] += 1.0;
    }
    let po: f64 = (0..k).map(|i| m[i][i]).sum::<f64>() / n;
    let pe: f64 = (0..k).map(|i| m[i].iter().sum::<f64>() * (0..k).map(|j| m[j][i]).sum::<f64>()).sum::<f64>() / (n * n);
    if pe == 1.0 {
        return if po == 1.0 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

fn criterion_metrics() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 3;
    let mut worst = 0.0f64;
    let mut mismatched_skips = 0;
    for set in 0..100 {
        let n = rng.random_range(2..=200);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut probs: Vec<f64> = (0..n * k).map(|_| rng.random_range(0.0..1.0)).collect();
        if set % 2 == 0 {
            // Coarse scores force ties.
            probs.iter_mut().for_each(|p| *p = (*p * 8.0).round() / 8.0);
        }
        let report = train::compute_metrics(&probs, &labels, k);
        let preds: Vec<usize> =
            probs.chunks(k).map(|r| (0..k).fold(0, |b, c| if r[c] > r[b] { c } else { b })).collect();
        let (mut aucs, mut aps, mut skipped) = (Vec::new(), Vec::new(), Vec::new());
        for c in 0..k {
            let s: Vec<f64> = probs.chunks(k).map(|r| r[c]).collect();
            let t: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            match (oracle_auc(&s, &t), oracle_ap(&s, &t)) {
                (Some(a), Some(p)) => {
                    aucs.push(a);
                    aps.push(p);
                }
                _ => skipped.push(c),
            }
        }
        if skipped != report.skipped_classes {
            mismatched_skips += 1;
        }
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let acc = preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / n as f64;
        let m = report.metrics;
        for (got, want) in [
            (m.auc, mean(&aucs)),
            (m.ap, mean(&aps)),
            (m.accuracy, acc),
            (m.kappa, oracle_kappa(&preds, &labels, k)),
        ] {
            let d = if got.is_nan() && want.is_nan() { 0.0 } else { (got - want).abs() };
            worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
        }
    }
    line(
        worst < 1e-9 && mismatched_skips == 0,
        format!("100 random sets (n <= 200, half with ties): max |Δ| {worst:.1e} < 1e-9, skip mismatches {mismatched_skips}"),
    )
}

// ---------------------------------------------------------------------------
// 5-7. Training outcomes on the synthetic cohort

struct Runs {
    by: HashMap<(Ablation, u64), CvOutcome>,
}

impl Runs {
    fn train() -> fof_core::Result<Self> {
        let model = ModelConfig::default();
        let mut by = HashMap::new();
        for seed in SEEDS {
            let data = generate(&GeneratorConfig {
                seed,
                ..GeneratorConfig::default()
            })?;
            for ablation in Ablation::ALL {
                let config = TrainConfig {
                    ablation,
                    seed,
                    ..TrainConfig::default()
                };
                let t = Instant::now();
                let run = cross_validate(&data, &model, &config, None)?;
                println!(
                    "      run {ablation:8} seed {seed}: accuracy {:.3} auc {:.3} focus IoU {:.3} ({:.0}s)",
                    run.mean.accuracy,
                    run.mean.auc,
                    run.mean_focus_iou().unwrap_or(f64::NAN),
                    t.elapsed().as_secs_f64()
                );
                by.insert((ablation, seed), run);
            }
        }
        Ok(Self { by })
    }

    fn mean(&self, ablation: Ablation, f: impl Fn(&CvOutcome) -> f64) -> f64 {
        SEEDS.iter().map(|s| f(&self.by[&(ablation, *s)])).sum::<f64>() / SEEDS.len() as f64
    }
}

fn iou(r: &CvOutcome) -> f64 {
    r.mean_focus_iou().unwrap_or(f64::NAN)
}

fn criterion_localization(runs: &Runs) -> Line {
    let (full, base) = (runs.mean(Ablation::Full, iou), runs.mean(Ablation::Baseline, iou));
    line(
        full - base >= 0.10,
        format!("mean focus IoU full {full:.3} vs baseline {base:.3}: gain {:+.3} (need >= +0.10)", full - base),
    )
}

fn criterion_grading(runs: &Runs) -> Line {
    let acc = |a| runs.mean(a, |r| r.mean.accuracy);
    let (full, base, no_frl, no_mca) = (acc(Ablation::Full), acc(Ablation::Baseline), acc(Ablation::NoFrl), acc(Ablation::NoMca));
    let pass = full - base >= 0.05 && full - no_frl >= 0.01 && full - no_mca >= 0.01;
    line(
        pass,
        format!(
            "mean accuracy full {:.2}, baseline {:.2}, no_frl {:.2}, no_mca {:.2}: full - baseline {:+.2} (need >= +5), \
             full - no_frl {:+.2}, full - no_mca {:+.2} (need >= +1)",
            100.0 * full,
            100.0 * base,
            100.0 * no_frl,
            100.0 * no_mca,
            100.0 * (full - base),
            100.0 * (full - no_frl),
            100.0 * (full - no_mca)
        ),
    )
}

fn criterion_alignment(runs: &Runs) -> Line {
    let mut parts = Vec::new();
    let mut pass = true;
    for (n, name) in mca::BIOMARKERS.iter().enumerate() {
        let pick = |intra: bool| {
            runs.mean(Ablation::Full, |r| {
                let c = r.mean_cohesion()[n];
                (if intra { c.0 } else { c.1 }).unwrap_or(f64::NAN)
            })
        };
        let (intra, inter) = (pick(true), pick(false));
        pass &= intra > inter;
        parts.push(format!("{name} {intra:.3}/{inter:.3}"));
    }
    line(pass, format!("intra/inter cosine on test glb embeddings: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 8. Inference purity

fn purity() -> fof_core::Result<Line> {
    let samples = generate(&GeneratorConfig {
        n_patients: 24,
        ..GeneratorConfig::default()
    })?;
    let (train_part, test_part) = samples.split_at(32);
    let config = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let train_refs: Vec<&Sample> = train_part.iter().collect();
    let (trainer, _) = train_fold(&ModelConfig::default(), &config, &train_refs, 9, 0)?;
    let dir = tempfile::tempdir().map_err(|e| fof_core::Error::Contract(e.to_string()))?;
    let (with, without) = (dir.path().join("with"), dir.path().join("without"));
    save_dataset(test_part, &with)?;
    let stripped: Vec<Sample> = test_part.iter().map(|s| Sample { panel: None, ..s.clone() }).collect();
    save_dataset(&stripped, &without)?;
    let (a, b) = (load_dataset(&with)?, load_dataset(&without)?);
    let panels_gone = b.iter().all(|s| s.panel.is_none()) && a.iter().all(|s| s.panel.is_some());

    trace::reset();
    let ra = train::evaluate(trainer.model(), &a.iter().collect::<Vec<_>>())?;
    let rb = train::evaluate(trainer.model(), &b.iter().collect::<Vec<_>>())?;
    let touched: u64 = [trace::CONTRIBUTION_MAP, trace::PATCH_MASK, trace::PROJECTOR].iter().map(|s| trace::count(s)).sum();
    Ok(line(
        panels_gone && ra == rb && touched == 0,
        format!(
            "{} test images, biomarker columns dropped on disk {panels_gone}: metrics identical {} (accuracy {:.3}); \
             focus/projector calls during evaluation {touched}",
            a.len(),
            ra == rb,
            ra.metrics.accuracy
        ),
    ))
}

fn criterion_purity() -> Line {
    purity().unwrap_or_else(|e| line(false, format!("error: {e}")))
}

// ---------------------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |key: &str| filters.is_empty() || filters.iter().any(|f| key.contains(f.as_str()));
    let mut results: Vec<(usize, bool, bool)> = Vec::new();
    let mut emit = |id: usize, key: &str, title: &str, hard: bool, f: &mut dyn FnMut() -> Line| {
        if !wanted(key) {
            return;
        }
        let t = Instant::now();
        let l = f();
        println!(
            "{} [{id}] {title}: {} ({:.1}s)",
            if l.pass { "PASS" } else { "FAIL" },
            l.detail,
            t.elapsed().as_secs_f64()
        );
        results.push((id, l.pass, hard));
    };

    emit(1, "gradients", "gradient correctness", true, &mut criterion_gradients);
    emit(2, "closed_forms", "closed-form loss values", true, &mut criterion_closed_forms);
    emit(3, "frl_invariants", "FRL structural invariants", true, &mut criterion_frl);
    emit(4, "metrics", "metric oracle equivalence", true, &mut criterion_metrics);

    let training = ["localization", "grading", "alignment"];
    if training.iter().any(|k| wanted(k)) {
        let t = Instant::now();
        println!("      training 4 configs x 3 seeds x 5 folds on the default cohort ...");
        match Runs::train() {
            Ok(runs) => {
                println!("      training took {:.0}s", t.elapsed().as_secs_f64());
                emit(5, "localization", "localization gain", false, &mut || criterion_localization(&runs));
                emit(6, "grading", "relative grading gains", false, &mut || criterion_grading(&runs));
                emit(7, "alignment", "alignment clustering", false, &mut || criterion_alignment(&runs));
            }
            Err(e) => {
                for (id, key) in [(5, "localization"), (6, "grading"), (7, "alignment")] {
                    emit(id, key, key, true, &mut || line(false, format!("training failed: {e}")));
                }
            }
        }
    }
    emit(8, "purity", "inference purity", true, &mut criterion_purity);

    let passed = results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let hard_failures: Vec<usize> = results.iter().filter(|r| r.2 && !r.1).map(|r| r.0).collect();
    if !hard_failures.is_empty() {
        eprintln!("exact criteria failed: {hard_failures:?}");
        std::process::exit(1);
    }
}
