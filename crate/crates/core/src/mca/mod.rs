//! Multi-view cross-modal alignment: per-biomarker projection heads and a
//! supervised contrastive loss over the pooled glb / pos / neg views.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{checkpoint, trunc_normal, ParamSet, INIT_STD};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::trace;

pub const NUM_BIOMARKERS: usize = 6;

/// Biomarker column names, in panel order.
pub const BIOMARKERS: [&str; NUM_BIOMARKERS] = ["idh", "codel_1p19q", "cnv_pten", "cnv_egfr", "cnv_card11", "cnv_fgfr2"];

/// Number of categories per biomarker.
pub const CARDINALITY: [usize; NUM_BIOMARKERS] = [2, 2, 5, 5, 5, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Idh {
    #[default]
    Wildtype,
    Mutant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Codel {
    #[default]
    Intact,
    Codeleted,
}

/// Molecular statuses of one sample: IDH, 1p/19q, then copy-number values of
/// PTEN, EGFR, CARD11 and FGFR2 in `-2..=2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BiomarkerPanel {
    idh: Idh,
    codel: Codel,
    cnv: [i8; 4],
}

impl BiomarkerPanel {
    pub fn new(idh: Idh, codel: Codel, cnv: [i8; 4]) -> Result<Self> {
        for (name, &v) in BIOMARKERS[2..].iter().zip(&cnv) {
            if !(-2..=2).contains(&v) {
                return Err(Error::Domain {
                    field: (*name).into(),
                    value: v.to_string(),
                });
            }
        }
        Ok(Self { idh, codel, cnv })
    }

    /// Wildtype, intact, no copy-number change.
    pub fn normal() -> Self {
        Self::default()
    }

    pub fn idh(&self) -> Idh {
        self.idh
    }

    pub fn codel(&self) -> Codel {
        self.codel
    }

    pub fn cnv(&self) -> [i8; 4] {
        self.cnv
    }

    /// Category index of biomarker `n` in `0..CARDINALITY[n]`.
    pub fn code(&self, n: usize) -> usize {
        match n {
            0 => self.idh as usize,
            1 => self.codel as usize,
            _ => (self.cnv[n - 2] + 2) as usize,
        }
    }

    pub fn codes(&self) -> [usize; NUM_BIOMARKERS] {
        std::array::from_fn(|n| self.code(n))
    }
}

/// On-disk spelling of category `code` of biomarker `n`.
pub fn code_name(n: usize, code: usize) -> String {
    match (n, code) {
        (0, 0) => "wt".into(),
        (0, _) => "mut".into(),
        (1, 0) => "intact".into(),
        (1, _) => "codel".into(),
        _ => (code as i64 - 2).to_string(),
    }
}

/// Per-biomarker labels for the view list `[glb_1..glb_B, pos_1..pos_B, neg_1..neg_B]`.
///
/// Positive views inherit the sample's status; negative views get the normal
/// status.
pub fn view_labels(panels: &[BiomarkerPanel]) -> Result<Vec<Vec<usize>>> {
    check_batch(panels.len())?;
    let normal = BiomarkerPanel::normal();
    Ok((0..NUM_BIOMARKERS)
        .map(|n| {
            let own = panels.iter().map(|p| p.code(n));
            own.clone()
                .chain(own)
                .chain(panels.iter().map(|_| normal.code(n)))
                .collect()
        })
        .collect())
}

/// Per-biomarker labels for global views only.
pub fn glb_labels(panels: &[BiomarkerPanel]) -> Result<Vec<Vec<usize>>> {
    check_batch(panels.len())?;
    Ok((0..NUM_BIOMARKERS)
        .map(|n| panels.iter().map(|p| p.code(n)).collect())
        .collect())
}

fn check_batch(b: usize) -> Result<()> {
    if b < 2 {
        return Err(Error::BatchSize { got: b, min: 2 });
    }
    Ok(())
}

/// Stacks the three `[B, d]` view features into `[3B, d]` and labels them.
pub fn assemble_views<T: Scalar>(
    g: &mut Graph<T>,
    glb: Var,
    pos: Var,
    neg: Var,
    panels: &[BiomarkerPanel],
) -> Result<(Var, Vec<Vec<usize>>)> {
    let labels = view_labels(panels)?;
    if g.shape(glb)[0] != panels.len() {
        return Err(Error::shape("assemble_views", g.shape(glb), &[panels.len()]));
    }
    Ok((g.concat(&[glb, pos, neg], 0)?, labels))
}

/// Supervised contrastive loss over `M` unit-norm embeddings `[M, d]`.
///
/// With `S = E Eᵀ / τ` and `ω_ij = e^{S_ij} / Σ_{k≠i} e^{S_ik}`, the loss is
/// `-(1/M) Σ_i Σ_{j≠i, y_j = y_i} log ω_ij`. Anchors without a same-label
/// partner contribute nothing.
pub fn subspace_loss<T: Scalar>(g: &mut Graph<T>, emb: Var, labels: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let m = g.shape(emb)[0];
    if labels.len() != m {
        return Err(Error::shape("subspace_loss", g.shape(emb), &[labels.len()]));
    }
    if m < 2 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let et = g.transpose(emb)?;
    let sim = g.matmul(emb, et)?;
    let sim = g.scale(sim, 1.0 / tau);
    let flat = g.reshape(sim, &[m * m, 1])?;
    let off_diag: Vec<usize> = (0..m * m).filter(|i| i / m != i % m).collect();
    let off = g.gather(flat, &off_diag)?;
    let off = g.reshape(off, &[m, m - 1])?;
    let log_omega = g.log_softmax(off)?;
    let positive: Vec<T> = off_diag
        .iter()
        .map(|&i| if labels[i / m] == labels[i % m] { T::one() } else { T::zero() })
        .collect();
    let positive = g.constant(Tensor::new(&[m, m - 1], positive)?);
    let picked = g.mul(log_omega, positive)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / m as f64))
}

/// Shape of the projection heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub heads: usize,
}

/// One two-layer head per biomarker (`d → d → d_proj`, ReLU between,
/// unit-normalized output), with independent weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Projectors<T> {
    config: ProjectorConfig,
    params: ParamSet<T>,
}

pub const DEFAULT_PROJ_DIM: usize = 32;

impl<T: Scalar> Projectors<T> {
    pub fn init(config: ProjectorConfig, seed: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.proj_dim == 0 || config.heads == 0 {
            return Err(Error::Config(format!("degenerate projector shape {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, p) = (config.embed_dim, config.proj_dim);
        let mut params = ParamSet::new();
        for n in 0..config.heads {
            params.push(format!("h{n}.fc1.weight"), trunc_normal(&mut rng, &[d, d], INIT_STD));
            params.push(format!("h{n}.fc1.bias"), Tensor::zeros(&[d]));
            params.push(format!("h{n}.fc2.weight"), trunc_normal(&mut rng, &[d, p], INIT_STD));
            params.push(format!("h{n}.fc2.bias"), Tensor::zeros(&[p]));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ProjectorConfig, params: ParamSet<T>) -> Result<Self> {
        let want = Self::init(config, 0)?;
        if want.params.names() != params.names()
            || want.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Config("projector parameters do not match their config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        self.params.accumulate_grads(g, vars);
    }

    /// Unit-norm embeddings `[M, d_proj]` of features `[M, d]` under head `n`.
    pub fn project(&self, g: &mut Graph<T>, vars: &[Var], n: usize, feats: Var) -> Result<Var> {
        trace::hit(trace::PROJECTOR);
        if n >= self.config.heads {
            return Err(Error::Config(format!("no projector head {n}")));
        }
        let v = &vars[4 * n..4 * n + 4];
        let h = g.matmul(feats, v[0])?;
        let h = g.add_row(h, v[1])?;
        let h = g.relu(h);
        let h = g.matmul(h, v[2])?;
        let h = g.add_row(h, v[3])?;
        g.l2_normalize(h)
    }

    /// `Σ_n subspace_loss(h^n(feats), labels[n])`.
    pub fn total_loss(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        feats: Var,
        labels: &[Vec<usize>],
        tau: f64,
    ) -> Result<Var> {
        if labels.len() != self.config.heads {
            return Err(Error::Config(format!(
                "{} label sets for {} projector heads",
                labels.len(),
                self.config.heads
            )));
        }
        let mut total: Option<Var> = None;
        for (n, y) in labels.iter().enumerate() {
            let e = self.project(g, vars, n, feats)?;
            let l = subspace_loss(g, e, y, tau)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(total.expect("at least one head"))
    }

    /// Embeddings of plain feature rows `[M, d]` under every head.
    pub fn embed(&self, feats: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let f = g.constant(feats.clone());
        (0..self.config.heads)
            .map(|n| {
                let e = self.project(&mut g, &vars, n, f)?;
                Ok(g.value(e).clone())
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &serde_json::to_string(&self.config)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (json, params) = checkpoint::load(path)?;
        Self::from_params(serde_json::from_str(&json)?, params)
    }
}

/// Mean pairwise cosine similarity of rows `[M, d]` within and across labels.
/// Either value is `None` when no such pair exists.
pub fn label_cohesion(rows: &[f64], dim: usize, labels: &[usize]) -> (Option<f64>, Option<f64>) {
    let m = labels.len();
    let norm = |i: usize| rows[i * dim..(i + 1) * dim].iter().map(|x| x * x).sum::<f64>().sqrt();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..m {
        for j in i + 1..m {
            let dot: f64 = (0..dim).map(|k| rows[i * dim + k] * rows[j * dim + k]).sum();
            let c = dot / (norm(i) * norm(j)).max(1e-12);
            let acc = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            acc.0 += c;
            acc.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    (mean(intra), mean(inter))
}

/// One row of an embedding export.
pub struct EmbeddingRow<'a> {
    pub sample_id: &'a str,
    pub view: View,
    pub label: String,
    pub values: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Glb,
    Pos,
    Neg,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Glb => "glb",
            View::Pos => "pos",
            View::Neg => "neg",
        })
    }
}

/// Tab-separated export: `sample_id, view, label, e0 .. e{d-1}`.
pub fn embeddings_tsv(rows: &[EmbeddingRow<'_>]) -> String {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("sample_id\tview\tlabel");
    for k in 0..dim {
        out.push_str(&format!("\te{k}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}", r.sample_id, r.view, r.label));
        for v in r.values {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    out
}
