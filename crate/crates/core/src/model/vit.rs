use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{trunc_normal, ParamSet, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of grade classes `K`; the classifier has `K + 1` outputs, the
    /// last one being the background class.
    pub num_grades: usize,
    /// Per-channel input normalization `(x - mean) / std`.
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_grades: 3,
            pixel_mean: vec![0.485, 0.456, 0.406],
            pixel_std: vec![0.229, 0.224, 0.225],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_h % p != 0 || self.image_w % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.image_h, self.image_w
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.num_grades == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if self.pixel_mean.len() != self.channels || self.pixel_std.len() != self.channels {
            return Err(Error::Config(format!(
                "pixel_mean and pixel_std need {} entries, got {} and {}",
                self.channels,
                self.pixel_mean.len(),
                self.pixel_std.len()
            )));
        }
        if self.pixel_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("pixel_std must be positive, got {:?}", self.pixel_std)));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Tokens per image, including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn num_outputs(&self) -> usize {
        self.num_grades + 1
    }

    pub fn background_class(&self) -> usize {
        self.num_grades
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_h, self.image_w, self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    cls: usize,
    pos: usize,
    blocks: Vec<BlockLayout>,
    norm_g: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn resolve<T: Scalar>(config: &ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let expect = |name: &str, shape: &[usize]| -> Result<usize> {
            let id = params.require(name)?;
            if params.get(id).shape() != shape {
                return Err(Error::shape("parameter", params.get(id).shape(), shape));
            }
            Ok(id)
        };
        let blocks = (0..config.depth)
            .map(|l| {
                let n = |s: &str| format!("blocks.{l}.{s}");
                Ok(BlockLayout {
                    ln1_g: expect(&n("ln1.gamma"), &[d])?,
                    ln1_b: expect(&n("ln1.beta"), &[d])?,
                    qkv_w: expect(&n("attn.qkv.weight"), &[d, 3 * d])?,
                    qkv_b: expect(&n("attn.qkv.bias"), &[3 * d])?,
                    proj_w: expect(&n("attn.proj.weight"), &[d, d])?,
                    proj_b: expect(&n("attn.proj.bias"), &[d])?,
                    ln2_g: expect(&n("ln2.gamma"), &[d])?,
                    ln2_b: expect(&n("ln2.beta"), &[d])?,
                    fc1_w: expect(&n("mlp.fc1.weight"), &[d, hidden])?,
                    fc1_b: expect(&n("mlp.fc1.bias"), &[hidden])?,
                    fc2_w: expect(&n("mlp.fc2.weight"), &[hidden, d])?,
                    fc2_b: expect(&n("mlp.fc2.bias"), &[d])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = Layout {
            patch_w: expect("patch_embed.weight", &[config.patch_dim(), d])?,
            patch_b: expect("patch_embed.bias", &[d])?,
            cls: expect("cls_token", &[1, d])?,
            pos: expect("pos_embed", &[config.seq_len(), d])?,
            blocks,
            norm_g: expect("norm.gamma", &[d])?,
            norm_b: expect("norm.beta", &[d])?,
            head_w: expect("head.weight", &[d, config.num_outputs()])?,
            head_b: expect("head.bias", &[config.num_outputs()])?,
        };
        let expected = 8 + 12 * config.depth;
        if params.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} parameter tensors, found {}",
                params.len()
            )));
        }
        Ok(layout)
    }
}

/// Everything the forward pass exposes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<T> {
    /// `[P_h, P_w, d]` feature grid read by the contribution map.
    pub token_grid: Tensor<T>,
    /// `[d]` encoder output at the class token.
    pub pooled: Tensor<T>,
    /// `[K + 1]` classifier output.
    pub logits: Tensor<T>,
}

/// Graph handles produced by [`Vit::forward_graph`] for a batch of `B` images.
#[derive(Debug, Clone, Copy)]
pub struct VitOutputs {
    /// `[B, K + 1]`
    pub logits: Var,
    /// `[B, d]`
    pub pooled: Var,
    /// `[B * (P + 1), d]` token features feeding the final block's attention
    /// (or the embedded sequence when `depth == 0`).
    pub grid: Var,
}

/// Vision transformer encoder `g` with a linear classifier head `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vit<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Scalar> Vit<T> {
    /// Truncated-normal weights (std 0.02), zero biases, unit layer-norm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let mut p = ParamSet::new();
        let mut tn = |shape: &[usize]| trunc_normal::<T>(&mut rng, shape, INIT_STD);
        p.push("patch_embed.weight", tn(&[config.patch_dim(), d]));
        p.push("patch_embed.bias", Tensor::zeros(&[d]));
        p.push("cls_token", tn(&[1, d]));
        p.push("pos_embed", tn(&[config.seq_len(), d]));
        for l in 0..config.depth {
            let n = |s: &str| format!("blocks.{l}.{s}");
            p.push(n("ln1.gamma"), Tensor::full(&[d], T::one()));
            p.push(n("ln1.beta"), Tensor::zeros(&[d]));
            p.push(n("attn.qkv.weight"), tn(&[d, 3 * d]));
            p.push(n("attn.qkv.bias"), Tensor::zeros(&[3 * d]));
            p.push(n("attn.proj.weight"), tn(&[d, d]));
            p.push(n("attn.proj.bias"), Tensor::zeros(&[d]));
            p.push(n("ln2.gamma"), Tensor::full(&[d], T::one()));
            p.push(n("ln2.beta"), Tensor::zeros(&[d]));
            p.push(n("mlp.fc1.weight"), tn(&[d, hidden]));
            p.push(n("mlp.fc1.bias"), Tensor::zeros(&[hidden]));
            p.push(n("mlp.fc2.weight"), tn(&[hidden, d]));
            p.push(n("mlp.fc2.bias"), Tensor::zeros(&[d]));
        }
        p.push("norm.gamma", Tensor::full(&[d], T::one()));
        p.push("norm.beta", Tensor::zeros(&[d]));
        p.push("head.weight", tn(&[d, config.num_outputs()]));
        p.push("head.bias", Tensor::zeros(&[config.num_outputs()]));
        Self::from_params(config, p)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
    }

    pub fn cast<U: Scalar>(&self) -> Vit<U> {
        Vit {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let want = self.config.image_shape();
        if image.shape() != want {
            return Err(Error::Config(format!(
                "image shape {:?} does not match model input {want:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Flattens non-overlapping patches of each image into rows of
    /// `[B * P, p * p * C]`, patches in row-major grid order.
    pub fn patchify(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let c = &self.config;
        let (gh, gw) = c.grid();
        let p = c.patch_size;
        let mut out = Vec::with_capacity(images.len() * c.num_patches() * c.patch_dim());
        for img in images {
            self.check_image(img)?;
            let px = img.data();
            for i in 0..gh {
                for j in 0..gw {
                    for m in 0..p {
                        let row = (i * p + m) * c.image_w + j * p;
                        out.extend_from_slice(&px[row * c.channels..(row + p) * c.channels]);
                    }
                }
            }
        }
        Tensor::new(&[images.len() * c.num_patches(), c.patch_dim()], out)
    }

    /// Applies `(x - pixel_mean) / pixel_std` per channel to channel-last data.
    fn normalize_in_place(&self, data: &mut [T]) {
        let c = &self.config;
        let shift: Vec<T> = c.pixel_mean.iter().map(|&m| T::lit(m)).collect();
        let scale: Vec<T> = c.pixel_std.iter().map(|&s| T::lit(1.0 / s)).collect();
        for (k, x) in data.iter_mut().enumerate() {
            let ch = k % c.channels;
            *x = (*x - shift[ch]) * scale[ch];
        }
    }

    /// The image as the encoder sees it, normalized per channel.
    pub fn normalize(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let mut out = image.clone();
        self.normalize_in_place(out.data_mut());
        Ok(out)
    }

    /// Records all parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        self.params.accumulate_grads(g, vars);
    }

    /// Token sequences `[B * (P + 1), d]`: class token, projected patches,
    /// plus positional embedding.
    fn embed(&self, g: &mut Graph<T>, vars: &[Var], images: &[&Tensor<T>], normalized: bool) -> Result<Var> {
        let lay = self.layout();
        let np = self.config.num_patches();
        let mut patches = self.patchify(images)?;
        if !normalized {
            self.normalize_in_place(patches.data_mut());
        }
        let patches = g.constant(patches);
        let emb = g.matmul(patches, vars[lay.patch_w])?;
        let emb = g.add_row(emb, vars[lay.patch_b])?;
        let mut seqs = Vec::with_capacity(images.len());
        for b in 0..images.len() {
            let rows = g.slice(emb, 0, b * np, np)?;
            let seq = g.concat(&[vars[lay.cls], rows], 0)?;
            seqs.push(g.add(seq, vars[lay.pos])?);
        }
        g.concat(&seqs, 0)
    }

    /// Embedded token sequence `[P + 1, d]` for one image (class token first).
    pub fn patch_embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = self.embed(&mut g, &vars, &[image], false)?;
        Ok(g.value(x).clone())
    }

    fn linear(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Batched forward pass on `g` with parameters bound as `vars`.
    ///
    /// With `watch_grid`, the grid features are re-recorded as a fresh leaf that
    /// requires grad, so backward yields `∂logits/∂grid` even when the
    /// parameters are bound as constants.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: &[&Tensor<T>],
        watch_grid: bool,
    ) -> Result<VitOutputs> {
        self.forward_inner(g, vars, images, false, watch_grid)
    }

    /// [`Vit::forward_graph`] for images already passed through
    /// [`Vit::normalize`].
    pub fn forward_graph_normalized(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: &[&Tensor<T>],
        watch_grid: bool,
    ) -> Result<VitOutputs> {
        self.forward_inner(g, vars, images, true, watch_grid)
    }

    fn forward_inner(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: &[&Tensor<T>],
        normalized: bool,
        watch_grid: bool,
    ) -> Result<VitOutputs> {
        let lay = self.layout();
        let batch = images.len();
        let t = self.config.seq_len();
        let mut x = self.embed(g, vars, images, normalized)?;
        let mut grid = x;
        for (l, blk) in lay.blocks.iter().enumerate() {
            let mut h = g.layer_norm(x, vars[blk.ln1_g], vars[blk.ln1_b])?;
            if l + 1 == lay.blocks.len() {
                if watch_grid {
                    let v = g.value(h).clone();
                    h = g.param(v);
                }
                grid = h;
            }
            let qkv = Self::linear(g, h, vars[blk.qkv_w], vars[blk.qkv_b])?;
            let a = g.attention(qkv, batch, self.config.heads)?;
            let a = Self::linear(g, a, vars[blk.proj_w], vars[blk.proj_b])?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, vars[blk.ln2_g], vars[blk.ln2_b])?;
            let h = Self::linear(g, h, vars[blk.fc1_w], vars[blk.fc1_b])?;
            let h = g.gelu(h);
            let h = Self::linear(g, h, vars[blk.fc2_w], vars[blk.fc2_b])?;
            x = g.add(x, h)?;
        }
        if lay.blocks.is_empty() {
            if watch_grid {
                let v = g.value(x).clone();
                x = g.param(v);
            }
            grid = x;
        }
        let xn = g.layer_norm(x, vars[lay.norm_g], vars[lay.norm_b])?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let pooled = g.gather(xn, &cls_rows)?;
        let logits = Self::linear(g, pooled, vars[lay.head_w], vars[lay.head_b])?;
        Ok(VitOutputs { logits, pooled, grid })
    }

    /// Row of `VitOutputs::grid` holding patch `q` of image `b`.
    pub fn grid_row(&self, b: usize, q: usize) -> usize {
        b * self.config.seq_len() + 1 + q
    }

    pub fn forward_batch(&self, images: &[&Tensor<T>]) -> Result<Vec<ForwardCache<T>>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, images, false)?;
        let c = &self.config;
        let (gh, gw) = c.grid();
        let (d, k) = (c.embed_dim, c.num_outputs());
        let grid = g.data(out.grid);
        let pooled = g.data(out.pooled);
        let logits = g.data(out.logits);
        (0..images.len())
            .map(|b| {
                let start = self.grid_row(b, 0) * d;
                Ok(ForwardCache {
                    token_grid: Tensor::new(&[gh, gw, d], grid[start..start + gh * gw * d].to_vec())?,
                    pooled: Tensor::new(&[d], pooled[b * d..(b + 1) * d].to_vec())?,
                    logits: Tensor::new(&[k], logits[b * k..(b + 1) * k].to_vec())?,
                })
            })
            .collect()
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardCache<T>> {
        Ok(self.forward_batch(&[image])?.remove(0))
    }

    /// Classifier outputs `[B, K + 1]` for a batch, without building caches.
    pub fn logits(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, images, false)?;
        Ok(g.value(out.logits).clone())
    }
}
