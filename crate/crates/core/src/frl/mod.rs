//! Focus-oriented representation learning: gradient contribution maps, patch
//! masks, region splitting, and the three-region and consistency losses.

use crate::data::pnm::Raster;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Vit};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::trace;

/// Image and patch-grid dimensions shared by a model and its masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl Geometry {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

impl From<&ModelConfig> for Geometry {
    fn from(c: &ModelConfig) -> Self {
        Self {
            height: c.image_h,
            width: c.image_w,
            channels: c.channels,
            patch_size: c.patch_size,
        }
    }
}

/// Graph handles for a batch forward whose feature grid is watched.
#[derive(Debug, Clone)]
pub struct FocusOutputs {
    /// `[B, K + 1]`
    pub logits: Var,
    /// Leaf holding the feature grid; its gradient is `∂s/∂v`.
    pub grid: Var,
    /// `grid_rows[b * P + q]` is the row of `grid` for patch `q` of image `b`.
    pub grid_rows: Vec<usize>,
}

/// A classifier exposing a spatial feature grid to attribute against.
pub trait FocusModel<T: Scalar> {
    fn geometry(&self) -> Geometry;

    /// Number of grade classes `K`; the classifier emits `K + 1` logits.
    fn num_grades(&self) -> usize;

    /// Forward pass with parameters bound as constants and the grid recorded
    /// as a leaf that requires grad.
    fn focus_forward(&self, g: &mut Graph<T>, images: &[&Tensor<T>]) -> Result<FocusOutputs>;
}

impl<T: Scalar> FocusModel<T> for Vit<T> {
    fn geometry(&self) -> Geometry {
        Geometry::from(self.config())
    }

    fn num_grades(&self) -> usize {
        self.config().num_grades
    }

    fn focus_forward(&self, g: &mut Graph<T>, images: &[&Tensor<T>]) -> Result<FocusOutputs> {
        let vars = self.bind(g, false);
        let out = self.forward_graph(g, &vars, images, true)?;
        let np = self.config().num_patches();
        let grid_rows = (0..images.len())
            .flat_map(|b| (0..np).map(move |q| (b, q)))
            .map(|(b, q)| self.grid_row(b, q))
            .collect();
        Ok(FocusOutputs {
            logits: out.logits,
            grid: out.grid,
            grid_rows,
        })
    }
}

/// Per-pixel contribution scores for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `[H, W]` scores in `[0, 1]`.
    pub scores: Vec<f64>,
    /// Row-major patch-grid map `ReLU(Σ_k α_k v^k)` before resampling.
    pub raw: Vec<f64>,
    /// Channel weights `α_k`, one per feature channel.
    pub alpha: Vec<f64>,
    pub target_class: usize,
}

impl ContributionMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.scores[y * self.width + x]
    }

    pub fn is_zero(&self) -> bool {
        self.scores.iter().all(|&a| a == 0.0)
    }

    /// 8-bit grayscale rendering, `round(255 · A)`.
    pub fn to_raster(&self) -> Raster {
        let px = self.scores.iter().map(|&a| (255.0 * a).round().clamp(0.0, 255.0) as u8).collect();
        Raster::new(self.width, self.height, 1, px).expect("dimensions match")
    }
}

/// Contribution maps for a batch, one target class per image.
///
/// Runs one forward and one backward on a private graph, so the model is not
/// touched and nothing flows into later graphs.
pub fn contribution_maps<T: Scalar, M: FocusModel<T> + ?Sized>(
    model: &M,
    images: &[&Tensor<T>],
    targets: &[usize],
) -> Result<Vec<ContributionMap>> {
    if images.len() != targets.len() {
        return Err(Error::shape("contribution_maps", &[images.len()], &[targets.len()]));
    }
    let k = model.num_grades();
    if let Some((index, &label)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
        return Err(Error::Label { index, label, classes: k });
    }
    trace::hit(trace::CONTRIBUTION_MAP);
    let geo = model.geometry();
    let (gh, gw) = geo.grid();
    let np = gh * gw;

    let mut g = Graph::new();
    let out = model.focus_forward(&mut g, images)?;
    let outputs = k + 1;
    let mut select = vec![T::zero(); images.len() * outputs];
    for (b, &t) in targets.iter().enumerate() {
        select[b * outputs + t] = T::one();
    }
    let select = g.constant(Tensor::new(&[images.len(), outputs], select)?);
    let picked = g.mul(out.logits, select)?;
    let s = g.sum(picked);
    g.backward(s)?;

    let d = g.shape(out.grid)[1];
    let feats = g.data(out.grid);
    let zeros = vec![T::zero(); feats.len()];
    let grads = g.grad(out.grid).unwrap_or(&zeros);
    let row = |buf: &[T], r: usize| -> Vec<f64> {
        buf[r * d..(r + 1) * d].iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    };

    let mut maps = Vec::with_capacity(images.len());
    for (b, &target) in targets.iter().enumerate() {
        let rows = &out.grid_rows[b * np..(b + 1) * np];
        let mut alpha = vec![0.0; d];
        for &r in rows {
            for (a, x) in alpha.iter_mut().zip(row(grads, r)) {
                *a += x;
            }
        }
        let raw: Vec<f64> = rows
            .iter()
            .map(|&r| {
                let v = row(feats, r);
                alpha.iter().zip(&v).map(|(a, x)| a * x).sum::<f64>().max(0.0)
            })
            .collect();
        let mut scores = upsample_bilinear(&raw, gh, gw, geo.height, geo.width);
        min_max_normalize(&mut scores);
        maps.push(ContributionMap {
            height: geo.height,
            width: geo.width,
            scores,
            raw,
            alpha,
            target_class: target,
        });
    }
    Ok(maps)
}

pub fn contribution_map<T: Scalar, M: FocusModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    target: usize,
) -> Result<ContributionMap> {
    Ok(contribution_maps(model, &[image], &[target])?.remove(0))
}

/// Bilinear resampling of a row-major `[h, w]` grid to `[out_h, out_w]`
/// with half-pixel centers and edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let x = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Rescales to `[0, 1]`. An all-zero input stays zero and a constant positive
/// input becomes all ones.
pub fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        v.fill(fill);
        return;
    }
    let span = hi - lo;
    v.iter_mut().for_each(|a| *a = ((*a - lo) / span).clamp(0.0, 1.0));
}

/// Boolean patch grid marking positive (high-contribution) patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub theta: f64,
    /// Row-major `[grid_h, grid_w]`.
    pub cells: Vec<bool>,
}

impl PatchMask {
    pub fn from_cells(grid_h: usize, grid_w: usize, patch_size: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != grid_h * grid_w {
            return Err(Error::shape("patch mask", &[grid_h, grid_w], &[cells.len()]));
        }
        Ok(Self {
            grid_h,
            grid_w,
            patch_size,
            theta: f64::NAN,
            cells,
        })
    }

    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn negatives(&self) -> usize {
        self.cells.len() - self.positives()
    }

    /// Whether pixel `(y, x)` lies in a positive patch.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        self.cells[(y / self.patch_size) * self.grid_w + x / self.patch_size]
    }

    /// Pixel-level `[H, W]` expansion.
    pub fn to_pixels(&self) -> Vec<bool> {
        let (h, w) = (self.grid_h * self.patch_size, self.grid_w * self.patch_size);
        (0..h * w).map(|i| self.covers(i / w, i % w)).collect()
    }
}

/// Thresholds patch means of `A` at `theta`.
///
/// If every patch lands on one side, the extremal patch is moved to the other
/// side (highest mean becomes positive, or lowest mean becomes negative; ties
/// go to the smallest row-major index), so both regions are nonempty.
pub fn patch_mask(cmap: &ContributionMap, patch_size: usize, theta: f64) -> Result<PatchMask> {
    trace::hit(trace::PATCH_MASK);
    let p = patch_size;
    if p == 0 || cmap.height % p != 0 || cmap.width % p != 0 {
        return Err(Error::Config(format!(
            "patch size {p} does not tile a {}x{} map",
            cmap.height, cmap.width
        )));
    }
    let (gh, gw) = (cmap.height / p, cmap.width / p);
    if gh * gw < 2 {
        return Err(Error::Config("a patch mask needs at least two patches".into()));
    }
    let means: Vec<f64> = (0..gh * gw)
        .map(|cell| {
            let (i, j) = (cell / gw, cell % gw);
            let mut s = 0.0;
            for m in 0..p {
                for n in 0..p {
                    s += cmap.at(i * p + m, j * p + n);
                }
            }
            s / (p * p) as f64
        })
        .collect();
    let mut cells: Vec<bool> = means.iter().map(|&m| m > theta).collect();
    if cells.iter().all(|&c| !c) {
        let best = (0..means.len()).fold(0, |b, i| if means[i] > means[b] { i } else { b });
        cells[best] = true;
    } else if cells.iter().all(|&c| c) {
        let worst = (0..means.len()).fold(0, |b, i| if means[i] < means[b] { i } else { b });
        cells[worst] = false;
    }
    Ok(PatchMask {
        grid_h: gh,
        grid_w: gw,
        patch_size: p,
        theta,
        cells,
    })
}

/// The global image and its masked positive / negative parts.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTriplet<T> {
    pub glb: Tensor<T>,
    pub pos: Tensor<T>,
    pub neg: Tensor<T>,
}

/// Zeroes pixels by patch membership; `pos + neg == glb` exactly.
pub fn split_regions<T: Scalar>(image: &Tensor<T>, mask: &PatchMask) -> Result<RegionTriplet<T>> {
    let shape = image.shape();
    let (h, w) = (mask.grid_h * mask.patch_size, mask.grid_w * mask.patch_size);
    if shape.len() != 3 || shape[0] != h || shape[1] != w {
        return Err(Error::shape("split_regions", shape, &[h, w]));
    }
    let c = shape[2];
    let mut pos = image.clone();
    let mut neg = image.clone();
    for (i, (p, n)) in pos.data_mut().iter_mut().zip(neg.data_mut()).enumerate() {
        let px = i / c;
        if mask.covers(px / w, px % w) {
            *n = T::zero();
        } else {
            *p = T::zero();
        }
    }
    Ok(RegionTriplet {
        glb: image.clone(),
        pos,
        neg,
    })
}

/// `CE(glb, y) + CE(pos, y) + CE(neg, background)`, each averaged over the
/// batch. Labels must be grade classes, i.e. below `background`.
pub fn classification_loss<T: Scalar>(
    g: &mut Graph<T>,
    glb: Var,
    pos: Var,
    neg: Var,
    labels: &[usize],
    background: usize,
) -> Result<Var> {
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= background) {
        return Err(Error::Label {
            index,
            label,
            classes: background,
        });
    }
    let bg = vec![background; labels.len()];
    let a = g.cross_entropy(glb, labels)?;
    let b = g.cross_entropy(pos, labels)?;
    let c = g.cross_entropy(neg, &bg)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// `-(1/B) Σ log ψ` with `ψ = φ(glb,pos) / (φ(glb,pos) + φ(glb,neg) + φ(pos,neg))`
/// and `φ(a, b) = exp(cos(a, b) / τ)`. Inputs are `[B, d]`.
pub fn consistency_loss<T: Scalar>(g: &mut Graph<T>, glb: Var, pos: Var, neg: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let batch = g.shape(glb)[0];
    let mut cols = Vec::with_capacity(3);
    for (a, b) in [(glb, pos), (glb, neg), (pos, neg)] {
        let c = g.cosine_similarity(a, b)?;
        cols.push(g.reshape(c, &[batch, 1])?);
    }
    let sims = g.concat(&cols, 1)?;
    let logits = g.scale(sims, 1.0 / tau);
    // -log ψ is the cross-entropy of the (glb, pos) column.
    g.cross_entropy(logits, &vec![0; batch])
}

/// RGB rendering of `image` with positive patches tinted red.
pub fn overlay_raster<T: Scalar>(image: &Tensor<T>, mask: &PatchMask) -> Result<Raster> {
    let shape = image.shape();
    let (h, w) = (mask.grid_h * mask.patch_size, mask.grid_w * mask.patch_size);
    if shape != [h, w, 3] {
        return Err(Error::shape("overlay", shape, &[h, w, 3]));
    }
    let tint = [1.0, 0.0, 0.0];
    let px = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let v = v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
            let p = i / 3;
            let v = if mask.covers(p / w, p % w) {
                0.5 * v + 0.5 * tint[i % 3]
            } else {
                v
            };
            (255.0 * v).round() as u8
        })
        .collect();
    Raster::new(w, h, 3, px)
}
