use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::optim::AdamW;
use super::TrainConfig;
use crate::data::{Augment, Sample};
use crate::error::{Error, Result};
use crate::frl::{self, PatchMask, RegionTriplet};
use crate::mca::{self, BiomarkerPanel, ProjectorConfig, Projectors, NUM_BIOMARKERS};
use crate::model::Vit;
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Images and labels for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<Tensor<f32>>,
    pub grades: Vec<usize>,
    pub panels: Vec<Option<BiomarkerPanel>>,
}

impl Batch {
    /// Collects samples as they are, or augmented with draws from `rng`.
    pub fn from_samples(samples: &[&Sample], rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        let images = match rng {
            Some(rng) => samples
                .iter()
                .map(|s| Augment::draw(rng).apply_image(&s.image))
                .collect::<Result<_>>()?,
            None => samples.iter().map(|s| s.image.clone()).collect(),
        };
        Ok(Self {
            images,
            grades: samples.iter().map(|s| s.grade).collect(),
            panels: samples.iter().map(|s| s.panel).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loss terms of one step. `total` is `cls + λ1·frl + λ2·mca` evaluated in
/// f64 from the component values; terms that are switched off are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub frl: f64,
    pub mca: f64,
}

/// Model, projection heads, and their optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: Vit<f32>,
    projectors: Option<Projectors<f32>>,
    model_opt: AdamW,
    proj_opt: Option<AdamW>,
}

impl Trainer {
    /// Projection heads are created (from `projector_seed`) only when the
    /// ablation uses alignment.
    pub fn new(model: Vit<f32>, config: TrainConfig, projector_seed: u64) -> Result<Self> {
        config.validate()?;
        let projectors = if config.ablation.uses_mca() {
            let pc = ProjectorConfig {
                embed_dim: model.config().embed_dim,
                proj_dim: config.proj_dim,
                heads: NUM_BIOMARKERS,
            };
            Some(Projectors::init(pc, projector_seed)?)
        } else {
            None
        };
        let opt = |p| AdamW::new(p, config.betas[0], config.betas[1], config.eps, config.weight_decay);
        let model_opt = opt(model.params());
        let proj_opt = projectors.as_ref().map(|p| opt(p.params()));
        Ok(Self {
            config,
            model,
            projectors,
            model_opt,
            proj_opt,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Vit<f32> {
        &self.model
    }

    pub fn projectors(&self) -> Option<&Projectors<f32>> {
        self.projectors.as_ref()
    }

    pub fn into_parts(self) -> (Vit<f32>, Option<Projectors<f32>>) {
        (self.model, self.projectors)
    }

    /// First pass: patch masks from ground-truth-class contribution maps of
    /// the current model. `None` when the ablation has no focus branch.
    pub fn focus_masks(&self, batch: &Batch) -> Result<Option<Vec<PatchMask>>> {
        if !self.config.ablation.uses_frl() {
            return Ok(None);
        }
        let refs: Vec<&Tensor<f32>> = batch.images.iter().collect();
        let maps = frl::contribution_maps(&self.model, &refs, &batch.grades)?;
        let p = self.model.config().patch_size;
        maps.iter()
            .map(|m| frl::patch_mask(m, p, self.config.theta))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Second pass: clears all gradients, evaluates the objective on the
    /// batch with the given masks, and backpropagates it into the model and
    /// projector gradients. No parameters change.
    pub fn accumulate(&mut self, batch: &Batch, masks: Option<&[PatchMask]>) -> Result<LossBreakdown> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::BatchSize { got: b, min: 2 });
        }
        let ablation = self.config.ablation;
        if ablation.uses_frl() != masks.is_some() {
            return Err(Error::Contract(format!("ablation {ablation} got the wrong kind of mask input")));
        }
        self.model.zero_grad();
        if let Some(p) = &mut self.projectors {
            p.params_mut().zero_grad();
        }

        let mut g = Graph::new();
        let mvars = self.model.bind(&mut g, true);
        let pvars = self.projectors.as_ref().map(|p| p.bind(&mut g, true));
        let heads = self.projectors.as_ref().zip(pvars.as_deref());
        let images: Vec<&Tensor<f32>> = batch.images.iter().collect();
        let obj = objective(
            &mut g,
            &self.model,
            &mvars,
            heads,
            &images,
            &batch.grades,
            &batch.panels,
            masks,
            &self.config,
        )?;
        g.backward(obj.root)?;
        self.model.accumulate_grads(&g, &mvars);
        if let (Some(p), Some(pv)) = (&mut self.projectors, &pvars) {
            p.accumulate_grads(&g, pv);
        }
        Ok(obj.breakdown(&g, &self.config))
    }

    /// One AdamW update of the model and projectors from their gradients.
    pub fn update(&mut self, lr: f64) {
        self.model_opt.step(self.model.params_mut(), lr);
        if let (Some(p), Some(opt)) = (&mut self.projectors, &mut self.proj_opt) {
            opt.step(p.params_mut(), lr);
        }
    }

    /// Both passes and one update.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
        if batch.len() < 2 {
            return Err(Error::BatchSize { got: batch.len(), min: 2 });
        }
        let masks = self.focus_masks(batch)?;
        let losses = self.accumulate(batch, masks.as_deref())?;
        self.update(lr);
        Ok(losses)
    }
}

/// Shuffles `0..n` and cuts it into batches of `size`, dropping a final
/// batch of one.
pub(crate) fn epoch_batches(n: usize, size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Graph handles of the objective's terms; absent terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub root: Var,
    pub cls: Var,
    pub frl: Option<Var>,
    pub mca: Option<Var>,
}

impl Objective {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, config: &TrainConfig) -> LossBreakdown {
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().to_f64().unwrap_or(f64::NAN));
        let (cls, frl, mca) = (value(Some(self.cls)), value(self.frl), value(self.mca));
        LossBreakdown {
            total: cls + config.lambda1 * frl + config.lambda2 * mca,
            cls,
            frl,
            mca,
        }
    }
}

/// Records `L_CLS + λ1·L_FRL + λ2·L_MCA` for one batch on `g`.
///
/// With masks, every normalized image is split into global, positive, and
/// negative views that go through the model together, so masked patches
/// are zero in the encoder's input space. Without masks only the global
/// views are used and the classification term is plain cross-entropy. The
/// alignment term is added when projection heads are given, over all three
/// views with masks and over the global views otherwise.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &Vit<T>,
    model_vars: &[Var],
    heads: Option<(&Projectors<T>, &[Var])>,
    images: &[&Tensor<T>],
    grades: &[usize],
    panels: &[Option<BiomarkerPanel>],
    masks: Option<&[PatchMask]>,
    config: &TrainConfig,
) -> Result<Objective> {
    let b = images.len();
    if b < 2 {
        return Err(Error::BatchSize { got: b, min: 2 });
    }
    if grades.len() != b || panels.len() != b {
        return Err(Error::shape("objective", &[b], &[grades.len(), panels.len()]));
    }
    let tau = config.tau;
    let panels = || -> Result<Vec<BiomarkerPanel>> {
        panels
            .iter()
            .map(|p| p.ok_or_else(|| Error::Config("alignment needs biomarker panels for every sample".into())))
            .collect()
    };
    let (cls, frl_loss, mca_loss) = match masks {
        Some(masks) => {
            if masks.len() != b {
                return Err(Error::shape("masks", &[masks.len()], &[b]));
            }
            let triplets: Vec<RegionTriplet<T>> = images
                .iter()
                .zip(masks)
                .map(|(img, m)| frl::split_regions(&model.normalize(img)?, m))
                .collect::<Result<_>>()?;
            let views: Vec<&Tensor<T>> = triplets
                .iter()
                .map(|t| &t.glb)
                .chain(triplets.iter().map(|t| &t.pos))
                .chain(triplets.iter().map(|t| &t.neg))
                .collect();
            let out = model.forward_graph_normalized(g, model_vars, &views, false)?;
            let lg = g.slice(out.logits, 0, 0, b)?;
            let lp = g.slice(out.logits, 0, b, b)?;
            let ln = g.slice(out.logits, 0, 2 * b, b)?;
            let cls = frl::classification_loss(g, lg, lp, ln, grades, model.config().background_class())?;
            let fg = g.slice(out.pooled, 0, 0, b)?;
            let fp = g.slice(out.pooled, 0, b, b)?;
            let fneg = g.slice(out.pooled, 0, 2 * b, b)?;
            let frl_loss = frl::consistency_loss(g, fg, fp, fneg, tau)?;
            let mca_loss = match heads {
                Some((proj, pv)) => {
                    let labels = mca::view_labels(&panels()?)?;
                    Some(proj.total_loss(g, pv, out.pooled, &labels, tau)?)
                }
                None => None,
            };
            (cls, Some(frl_loss), mca_loss)
        }
        None => {
            let out = model.forward_graph(g, model_vars, images, false)?;
            let cls = g.cross_entropy(out.logits, grades)?;
            let mca_loss = match heads {
                Some((proj, pv)) => {
                    let labels = mca::glb_labels(&panels()?)?;
                    Some(proj.total_loss(g, pv, out.pooled, &labels, tau)?)
                }
                None => None,
            };
            (cls, None, mca_loss)
        }
    };
    let mut root = cls;
    for (term, weight) in [(frl_loss, config.lambda1), (mca_loss, config.lambda2)] {
        if let Some(t) = term {
            let w = g.scale(t, weight);
            root = g.add(root, w)?;
        }
    }
    Ok(Objective {
        root,
        cls,
        frl: frl_loss,
        mca: mca_loss,
    })
}
