//! Patch feature extractor, latent classification head and the full-image
//! baseline models.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memcost::LayerFootprint;
use crate::tensor::{conv_output_size, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const HEAD_PREFIX: &str = "head.";
pub const CLASSIFIER_PREFIX: &str = "classifier.";

/// One hidden block of the feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// 3×3 convolution, padding 1, followed by ReLU.
    Conv { channels: usize, stride: usize },
    /// 2×2 max pool, stride 2.
    MaxPool,
}

impl Block {
    fn reduction(&self) -> usize {
        match self {
            Block::Conv { stride, .. } => *stride,
            Block::MaxPool => 2,
        }
    }
}

impl FromStr for Block {
    type Err = Error;

    /// `c16` (stride 1), `c16s2` (stride 2) or `mp`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad backbone block `{s}` (expected cN, cNsK or mp)"));
        if s == "mp" {
            return Ok(Block::MaxPool);
        }
        let rest = s.strip_prefix('c').ok_or_else(bad)?;
        let (ch, stride) = match rest.split_once('s') {
            Some((ch, st)) => (ch, st.parse().map_err(|_| bad())?),
            None => (rest, 1),
        };
        let channels: usize = ch.parse().map_err(|_| bad())?;
        if channels == 0 || stride == 0 {
            return Err(bad());
        }
        Ok(Block::Conv { channels, stride })
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Conv { channels, stride: 1 } => write!(f, "c{channels}"),
            Block::Conv { channels, stride } => write!(f, "c{channels}s{stride}"),
            Block::MaxPool => write!(f, "mp"),
        }
    }
}

/// Hidden blocks of the feature extractor. A final stride-2 3×3 convolution
/// to the embedding width is always appended, so the blocks must reduce the
/// patch by exactly `p / 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct DepthSpec {
    pub blocks: Vec<Block>,
}

impl DepthSpec {
    /// Stride-2 convolutions halving a `patch`-sized input down to 2×2,
    /// widths 8, 16, 16, 32, 32, ...
    pub fn halving(patch: usize) -> Result<Self> {
        check_patch_size(patch)?;
        let n = patch.trailing_zeros() as usize - 1;
        Ok(Self {
            blocks: (0..n)
                .map(|i| Block::Conv {
                    channels: 8 << i.div_ceil(2),
                    stride: 2,
                })
                .collect(),
        })
    }

    pub fn reduction(&self) -> usize {
        self.blocks.iter().map(Block::reduction).product::<usize>() * 2
    }
}

impl TryFrom<Vec<String>> for DepthSpec {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Ok(Self {
            blocks: v.iter().map(|s| s.parse()).collect::<Result<_>>()?,
        })
    }
}

impl From<DepthSpec> for Vec<String> {
    fn from(d: DepthSpec) -> Self {
        d.blocks.iter().map(ToString::to_string).collect()
    }
}

fn check_patch_size(patch: usize) -> Result<()> {
    if patch < 8 || !patch.is_power_of_two() {
        return Err(Error::Config(format!(
            "patch size must be a power of two >= 8, got {patch}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Conv {
        weight: ParamId,
        bias: ParamId,
        filters: usize,
        stride: usize,
        relu: bool,
    },
    MaxPool,
}

fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
) -> Result<(ParamId, ParamId)> {
    let w = store.add_kaiming(format!("{name}.weight"), &[out_ch, in_ch, 3, 3], in_ch * 9, rng)?;
    let b = store.add_zeros(format!("{name}.bias"), &[out_ch])?;
    Ok((w, b))
}

fn count<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId]) -> usize {
    ids.iter().map(|&id| store.value(id).len()).sum()
}

fn run_layers<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, layers: &[Layer], mut x: Var) -> Result<Var> {
    for layer in layers {
        x = match *layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                relu,
                ..
            } => {
                let w = g.param(store, weight);
                let b = g.param(store, bias);
                let y = g.conv2d(x, w, b, stride, 1)?;
                if relu {
                    g.relu(y)
                } else {
                    y
                }
            }
            Layer::MaxPool => g.max_pool2d(x, 2, 2)?,
        };
    }
    Ok(x)
}

/// Retained-input footprint of a layer stack at `batch × channels × h × w`.
fn profile_layers(
    layers: &[Layer],
    prefix: &str,
    batch: u64,
    mut channels: usize,
    mut h: usize,
    mut w: usize,
    out: &mut Vec<LayerFootprint>,
) -> Result<(usize, usize, usize)> {
    for (i, layer) in layers.iter().enumerate() {
        let input = batch * (channels * h * w) as u64;
        match *layer {
            Layer::Conv {
                filters, stride, relu, ..
            } => {
                h = conv_output_size(h, 3, stride, 1)
                    .ok_or_else(|| Error::dim("profile", "conv kernel exceeds input"))?;
                w = conv_output_size(w, 3, stride, 1)
                    .ok_or_else(|| Error::dim("profile", "conv kernel exceeds input"))?;
                channels = filters;
                let output = batch * (channels * h * w) as u64;
                out.push(LayerFootprint::new(format!("{prefix}conv{i}"), input, output));
                if relu {
                    out.push(LayerFootprint::new(format!("{prefix}relu{i}"), output, output));
                }
            }
            Layer::MaxPool => {
                h = conv_output_size(h, 2, 2, 0).ok_or_else(|| Error::dim("profile", "pool window exceeds input"))?;
                w = conv_output_size(w, 2, 2, 0).ok_or_else(|| Error::dim("profile", "pool window exceeds input"))?;
                let output = batch * (channels * h * w) as u64;
                out.push(LayerFootprint::new(format!("{prefix}pool{i}"), input, output));
            }
        }
    }
    Ok((channels, h, w))
}

/// `f_θ1`: maps a `p×p×C` patch to a `1×1×s` embedding. Applied to a larger
/// input it acts as a fully convolutional backbone with stride `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<Layer>,
    params: Vec<ParamId>,
    num_params: usize,
    patch_size: usize,
    in_channels: usize,
    embed_dim: usize,
}

impl FeatureExtractor {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        patch_size: usize,
        in_channels: usize,
        embed_dim: usize,
        depth: &DepthSpec,
    ) -> Result<Self> {
        check_patch_size(patch_size)?;
        if embed_dim == 0 || in_channels == 0 {
            return Err(Error::Config("embedding width and input channels must be >= 1".into()));
        }
        if depth.reduction() != patch_size {
            return Err(Error::Config(format!(
                "backbone [{}] reduces a patch by {} but the patch size is {patch_size}",
                Vec::<String>::from(depth.clone()).join(","),
                depth.reduction()
            )));
        }
        let mut layers = Vec::new();
        let mut params = Vec::new();
        let mut ch = in_channels;
        for (i, block) in depth.blocks.iter().enumerate() {
            match *block {
                Block::Conv { channels, stride } => {
                    let (w, b) = add_conv(store, rng, &format!("{BACKBONE_PREFIX}conv{i}"), ch, channels)?;
                    params.extend([w, b]);
                    layers.push(Layer::Conv {
                        weight: w,
                        bias: b,
                        filters: channels,
                        stride,
                        relu: true,
                    });
                    ch = channels;
                }
                Block::MaxPool => layers.push(Layer::MaxPool),
            }
        }
        let (w, b) = add_conv(store, rng, &format!("{BACKBONE_PREFIX}embed"), ch, embed_dim)?;
        params.extend([w, b]);
        layers.push(Layer::Conv {
            weight: w,
            bias: b,
            filters: embed_dim,
            stride: 2,
            relu: false,
        });
        Ok(Self {
            num_params: count(store, &params),
            layers,
            params,
            patch_size,
            in_channels,
            embed_dim,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Fully convolutional pass: `[B, C, H, W] -> [B, s, H/p, W/p]`.
    pub fn forward_map<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::dim(
                "feature_extractor",
                format!("input {s:?} must be [B, {}, H, W]", self.in_channels),
            ));
        }
        if !s[2].is_multiple_of(self.patch_size) || !s[3].is_multiple_of(self.patch_size) {
            return Err(Error::dim(
                "feature_extractor",
                format!(
                    "spatial size {}x{} (axes 2, 3) is not divisible by the backbone stride {}",
                    s[2], s[3], self.patch_size
                ),
            ));
        }
        run_layers(g, store, &self.layers, x)
    }

    /// `[k, C, p, p] -> [k, s]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, patches: Var) -> Result<Var> {
        let s = g.shape(patches).to_vec();
        if s.len() != 4 || s[2] != self.patch_size || s[3] != self.patch_size {
            return Err(Error::dim(
                "feature_extractor",
                format!("patches {s:?} must be [k, C, {p}, {p}]", p = self.patch_size),
            ));
        }
        let y = self.forward_map(g, store, patches)?;
        let ys = g.shape(y).to_vec();
        if ys[2] != 1 || ys[3] != 1 || ys[1] != self.embed_dim {
            return Err(Error::dim(
                "feature_extractor",
                format!("embedding {ys:?} is not [k, {}, 1, 1]", self.embed_dim),
            ));
        }
        g.reshape(y, &[s[0], self.embed_dim])
    }

    pub fn profile(&self, batch: u64, h: usize, w: usize) -> Result<Vec<LayerFootprint>> {
        let mut out = Vec::new();
        profile_layers(&self.layers, BACKBONE_PREFIX, batch, self.in_channels, h, w, &mut out)?;
        Ok(out)
    }
}

/// `g_θ2`: convolutions over the latent grid, global average pool and a
/// linear layer to class logits. Accepts any grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNet {
    layers: Vec<Layer>,
    fc: (ParamId, ParamId),
    params: Vec<ParamId>,
    num_params: usize,
    embed_dim: usize,
    classes: usize,
}

impl HeadNet {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        embed_dim: usize,
        channels: usize,
        depth: usize,
        classes: usize,
    ) -> Result<Self> {
        if classes < 2 || channels == 0 || embed_dim == 0 {
            return Err(Error::Config(format!(
                "head needs >= 2 classes and non-zero widths (classes {classes}, channels {channels}, s {embed_dim})"
            )));
        }
        let mut layers = Vec::new();
        let mut params = Vec::new();
        let mut ch = embed_dim;
        for i in 0..depth {
            let (w, b) = add_conv(store, rng, &format!("{HEAD_PREFIX}conv{i}"), ch, channels)?;
            params.extend([w, b]);
            layers.push(Layer::Conv {
                weight: w,
                bias: b,
                filters: channels,
                stride: 1,
                relu: true,
            });
            ch = channels;
        }
        let fw = store.add_kaiming(format!("{HEAD_PREFIX}fc.weight"), &[classes, ch], ch, rng)?;
        let fb = store.add_zeros(format!("{HEAD_PREFIX}fc.bias"), &[classes])?;
        params.extend([fw, fb]);
        Ok(Self {
            num_params: count(store, &params),
            layers,
            fc: (fw, fb),
            params,
            embed_dim,
            classes,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Logits for a latent grid laid out `[B, m, n, s]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 4 || s[3] != self.embed_dim {
            return Err(Error::dim(
                "head",
                format!(
                    "latent grid {s:?} must be [B, m, n, {}] (axis 3 = width)",
                    self.embed_dim
                ),
            ));
        }
        let x = g.nhwc_to_nchw(z)?;
        self.forward_nchw(g, store, x)
    }

    /// Logits for a feature map laid out `[B, s, m, n]`.
    pub fn forward_nchw<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.embed_dim {
            return Err(Error::dim(
                "head",
                format!(
                    "feature map {s:?} must be [B, {}, m, n] (axis 1 = width)",
                    self.embed_dim
                ),
            ));
        }
        let y = run_layers(g, store, &self.layers, x)?;
        let pooled = g.global_avg_pool(y)?;
        let w = g.param(store, self.fc.0);
        let b = g.param(store, self.fc.1);
        g.linear(pooled, w, b)
    }

    pub fn profile(&self, batch: u64, m: usize, n: usize) -> Result<Vec<LayerFootprint>> {
        let mut out = Vec::new();
        let (ch, h, w) = profile_layers(&self.layers, HEAD_PREFIX, batch, self.embed_dim, m, n, &mut out)?;
        let map = batch * (ch * h * w) as u64;
        let pooled = batch * ch as u64;
        let logits = batch * self.classes as u64;
        out.push(LayerFootprint::new(format!("{HEAD_PREFIX}pool"), map, pooled));
        out.push(LayerFootprint::new(format!("{HEAD_PREFIX}fc"), pooled, logits));
        out.push(LayerFootprint::new(format!("{HEAD_PREFIX}loss"), logits, 1));
        Ok(out)
    }
}

/// Global average pool plus linear layer, the plain GD classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledLinear {
    weight: ParamId,
    bias: ParamId,
    width: usize,
    classes: usize,
}

impl PooledLinear {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        width: usize,
        classes: usize,
    ) -> Result<Self> {
        let weight = store.add_kaiming(format!("{CLASSIFIER_PREFIX}weight"), &[classes, width], width, rng)?;
        let bias = store.add_zeros(format!("{CLASSIFIER_PREFIX}bias"), &[classes])?;
        Ok(Self {
            weight,
            bias,
            width,
            classes,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(pooled, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.classes * (self.width + 1)
    }

    fn profile(&self, batch: u64, m: usize, n: usize) -> Vec<LayerFootprint> {
        let width = self.width;
        let pooled = batch * width as u64;
        let logits = batch * self.classes as u64;
        vec![
            LayerFootprint::new(
                format!("{CLASSIFIER_PREFIX}pool"),
                batch * (width * m * n) as u64,
                pooled,
            ),
            LayerFootprint::new(format!("{CLASSIFIER_PREFIX}fc"), pooled, logits),
            LayerFootprint::new(format!("{CLASSIFIER_PREFIX}loss"), logits, 1),
        ]
    }
}

/// Architecture hyperparameters shared by every training mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub embed_dim: usize,
    /// Hidden backbone blocks; derived from the patch size when absent.
    pub backbone: Option<DepthSpec>,
    pub head_channels: usize,
    pub head_layers: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            embed_dim: 64,
            backbone: None,
            head_channels: 256,
            head_layers: 4,
            classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn depth_spec(&self, patch_size: usize) -> Result<DepthSpec> {
        match &self.backbone {
            Some(d) => Ok(d.clone()),
            None => DepthSpec::halving(patch_size),
        }
    }

    pub fn build_extractor<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        patch: usize,
    ) -> Result<FeatureExtractor> {
        FeatureExtractor::build(
            store,
            rng,
            patch,
            self.in_channels,
            self.embed_dim,
            &self.depth_spec(patch)?,
        )
    }

    pub fn build_head<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<HeadNet> {
        HeadNet::build(
            store,
            rng,
            self.embed_dim,
            self.head_channels,
            self.head_layers,
            self.classes,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeKind {
    Gd,
    GdExtended,
    /// `f_θ1` applied patch by patch with stride `p`, then `g_θ2`. Computes
    /// exactly what PatchGD computes with every cell refreshed.
    Patchwise,
}

/// Whole-image model trained by plain mini-batch GD.
#[derive(Debug, Clone, PartialEq)]
pub enum CompositeModel {
    Gd {
        backbone: FeatureExtractor,
        classifier: PooledLinear,
    },
    GdExtended {
        backbone: FeatureExtractor,
        head: HeadNet,
    },
    Patchwise {
        extractor: FeatureExtractor,
        head: HeadNet,
    },
}

impl CompositeModel {
    /// Builds the model, registering its parameters in `store`. The backbone
    /// is always created first, so equal seeds give equal backbone weights
    /// across kinds.
    pub fn build<T: Scalar>(
        kind: CompositeKind,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &ModelConfig,
        patch: usize,
    ) -> Result<Self> {
        let backbone = cfg.build_extractor(store, rng, patch)?;
        Ok(match kind {
            CompositeKind::Gd => CompositeModel::Gd {
                classifier: PooledLinear::build(store, rng, cfg.embed_dim, cfg.classes)?,
                backbone,
            },
            CompositeKind::GdExtended => CompositeModel::GdExtended {
                head: cfg.build_head(store, rng)?,
                backbone,
            },
            CompositeKind::Patchwise => CompositeModel::Patchwise {
                head: cfg.build_head(store, rng)?,
                extractor: backbone,
            },
        })
    }

    pub fn kind(&self) -> CompositeKind {
        match self {
            CompositeModel::Gd { .. } => CompositeKind::Gd,
            CompositeModel::GdExtended { .. } => CompositeKind::GdExtended,
            CompositeModel::Patchwise { .. } => CompositeKind::Patchwise,
        }
    }

    pub fn backbone(&self) -> &FeatureExtractor {
        match self {
            CompositeModel::Gd { backbone, .. } | CompositeModel::GdExtended { backbone, .. } => backbone,
            CompositeModel::Patchwise { extractor, .. } => extractor,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            CompositeModel::Gd { backbone, classifier } => backbone.num_params() + classifier.num_params(),
            CompositeModel::GdExtended { backbone, head } => backbone.num_params() + head.num_params(),
            CompositeModel::Patchwise { extractor, head } => extractor.num_params() + head.num_params(),
        }
    }

    /// Logits `[B, c]` for a whole-image batch `[B, C, M, N]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Var> {
        let s = images.shape();
        let p = self.backbone().patch_size();
        if s.len() != 4 || !s[2].is_multiple_of(p) || !s[3].is_multiple_of(p) {
            return Err(Error::dim(
                "gd_forward",
                format!("image batch {s:?} must be [B, C, M, N] with M and N divisible by {p}"),
            ));
        }
        match self {
            CompositeModel::Gd { backbone, classifier } => {
                let x = g.constant(images.clone());
                let map = backbone.forward_map(g, store, x)?;
                classifier.forward(g, store, map)
            }
            CompositeModel::GdExtended { backbone, head } => {
                let x = g.constant(images.clone());
                let map = backbone.forward_map(g, store, x)?;
                head.forward_nchw(g, store, map)
            }
            CompositeModel::Patchwise { extractor, head } => {
                let (b, m, n) = (s[0], s[2] / p, s[3] / p);
                let patches = g.constant(tile_nchw(images, p));
                let rows = extractor.embed(g, store, patches)?;
                let z = g.reshape(rows, &[b, m, n, extractor.embed_dim()])?;
                head.forward(g, store, z)
            }
        }
    }

    /// Layer footprints for a whole-image batch (inputs retained for backward).
    pub fn profile(&self, batch: u64, h: usize, w: usize) -> Result<Vec<LayerFootprint>> {
        let p = self.backbone().patch_size();
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::dim("profile", format!("{h}x{w} not divisible by {p}")));
        }
        let (m, n) = (h / p, w / p);
        Ok(match self {
            CompositeModel::Gd { backbone, classifier } => {
                let mut v = backbone.profile(batch, h, w)?;
                v.extend(classifier.profile(batch, m, n));
                v
            }
            CompositeModel::GdExtended { backbone, head } => {
                let mut v = backbone.profile(batch, h, w)?;
                v.extend(head.profile(batch, m, n)?);
                v
            }
            CompositeModel::Patchwise { extractor, head } => {
                let mut v = extractor.profile(batch * (m * n) as u64, p, p)?;
                v.extend(head.profile(batch, m, n)?);
                v
            }
        })
    }
}

/// `[B, C, M, N]` -> `[B*m*n, C, p, p]`, cells in row-major order per image.
pub fn tile_nchw<T: Scalar>(images: &Tensor<T>, p: usize) -> Tensor<T> {
    let s = images.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (m, n) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for a in 0..m {
            for bb in 0..n {
                for ch in 0..c {
                    let plane = &src[(bi * c + ch) * h * w..][..h * w];
                    for r in a * p..(a + 1) * p {
                        out.extend_from_slice(&plane[r * w + bb * p..][..p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * m * n, c, p, p], out).expect("tile sizes are consistent")
}
