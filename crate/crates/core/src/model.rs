//! The network: a full-view encoder and a crop-view encoder, one projection
//! head per branch mapping to 32 features, a 2-layer attention perceptron that
//! turns the crop projection into a binary mask, and a classifier head used
//! for weak supervision.
//!
//! Parameters live in a flat [`ParamSet`]; components refer to them by
//! [`ParamId`]. A forward pass binds the set into a fresh [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Image, ViewPair};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Width of every projection-head output.
pub const EMBED_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Format {
                what: "parameters",
                detail: format!("expected {} tensors, got {}", self.tensors.len(), tensors.len()),
            });
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::Format {
                    what: "parameters",
                    detail: format!("{name}: shape {:?}, expected {:?}", new.shape(), old.shape()),
                });
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }
}

/// Graph handles for a bound [`ParamSet`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Which input geometry an encoder accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Full,
    Crop,
}

/// One convolution block: `channels` filters of `kernel×kernel`, `stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
        }
    }
}

/// Parses `channels:kernel:stride` triples separated by commas.
pub fn parse_conv_stack(s: &str) -> Result<Vec<ConvSpec>> {
    s.split(',')
        .map(|part| {
            let nums: Vec<usize> = part
                .trim()
                .split(':')
                .map(|n| n.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("conv block {part:?}: {e}")))?;
            match nums.as_slice() {
                &[c, k, st] if c > 0 && k > 0 && st > 0 => Ok(ConvSpec::new(c, k, st)),
                _ => Err(Error::Config(format!(
                    "conv block {part:?} must be channels:kernel:stride with positive values"
                ))),
            }
        })
        .collect()
}

pub fn format_conv_stack(stack: &[ConvSpec]) -> String {
    stack
        .iter()
        .map(|c| format!("{}:{}:{}", c.channels, c.kernel, c.stride))
        .collect::<Vec<_>>()
        .join(",")
}

/// Full CLAWS or the single-encoder, mask-free baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Two encoders, two projection heads, shared hard mask.
    Claws,
    /// One encoder and projection head for both views; the crop is resized
    /// to the full-view geometry and no mask is applied.
    SharedNoMask,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Claws => "claws",
            Variant::SharedNoMask => "shared-no-mask",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "claws" => Ok(Variant::Claws),
            "shared-no-mask" => Ok(Variant::SharedNoMask),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

/// `Hard` thresholds the attention probabilities to {0,1} with a
/// straight-through backward pass. `Soft` uses the sigmoid output directly;
/// it exists for gradient checking the mask path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Hard,
    Soft,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Hard => "hard",
            MaskMode::Soft => "soft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(MaskMode::Hard),
            "soft" => Ok(MaskMode::Soft),
            _ => Err(Error::Config(format!("unknown mask mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub mask_mode: MaskMode,
    pub classes: usize,
    pub full_height: usize,
    pub full_width: usize,
    pub crop_size: usize,
    pub full_encoder: Vec<ConvSpec>,
    pub crop_encoder: Vec<ConvSpec>,
    /// Encoder output width `d_h`.
    pub hidden_dim: usize,
    pub projection_hidden: usize,
    pub attention_hidden: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Claws,
            mask_mode: MaskMode::Hard,
            classes: 11,
            full_height: 120,
            full_width: 190,
            crop_size: 32,
            full_encoder: vec![
                ConvSpec::new(8, 4, 4),
                ConvSpec::new(16, 3, 2),
                ConvSpec::new(32, 3, 2),
            ],
            crop_encoder: vec![
                ConvSpec::new(8, 3, 2),
                ConvSpec::new(16, 3, 2),
                ConvSpec::new(32, 3, 1),
            ],
            hidden_dim: 64,
            projection_hidden: 64,
            attention_hidden: 32,
            classifier_hidden: 32,
        }
    }
}

fn spatial_trace(h: usize, w: usize, stack: &[ConvSpec]) -> Result<(usize, usize)> {
    let (mut h, mut w) = (h, w);
    for (i, c) in stack.iter().enumerate() {
        if c.kernel > h || c.kernel > w {
            return Err(Error::Config(format!(
                "conv block {i} kernel {} does not fit a {h}×{w} feature map",
                c.kernel
            )));
        }
        h = (h - c.kernel) / c.stride + 1;
        w = (w - c.kernel) / c.stride + 1;
    }
    Ok((h, w))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("classes must be positive".into()));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("projection_hidden", self.projection_hidden),
            ("attention_hidden", self.attention_hidden),
            ("classifier_hidden", self.classifier_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.full_encoder.is_empty() || self.crop_encoder.is_empty() {
            return Err(Error::Config("encoders need at least one conv block".into()));
        }
        spatial_trace(self.full_height, self.full_width, &self.full_encoder)?;
        spatial_trace(self.crop_size, self.crop_size, &self.crop_encoder)?;
        Ok(())
    }

    fn input_hw(&self, kind: ViewKind) -> (usize, usize) {
        match kind {
            ViewKind::Full => (self.full_height, self.full_width),
            ViewKind::Crop => (self.crop_size, self.crop_size),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        Dense {
            w: ps.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng)),
            b: ps.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.affine(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Compact convolutional encoder: conv+ReLU blocks, global average pooling
/// and a final affine layer to `d_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    kind: ViewKind,
    input_hw: (usize, usize),
    blocks: Vec<ConvBlock>,
    head: Dense,
}

impl EncoderParams {
    fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        kind: ViewKind,
        input_hw: (usize, usize),
        stack: &[ConvSpec],
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut in_ch = 3;
        let blocks = stack
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let fan_in = (in_ch * c.kernel * c.kernel) as f64;
                let kernel = ps.add(
                    format!("{name}.conv{i}.kernel"),
                    Tensor::randn(&[c.channels, in_ch, c.kernel, c.kernel], (2.0 / fan_in).sqrt(), rng),
                );
                let bias = ps.add(format!("{name}.conv{i}.bias"), Tensor::zeros(&[c.channels]));
                in_ch = c.channels;
                ConvBlock {
                    kernel,
                    bias,
                    stride: c.stride,
                }
            })
            .collect();
        let head = Dense::new(ps, &format!("{name}.out"), in_ch, hidden_dim, rng);
        Self {
            kind,
            input_hw,
            blocks,
            head,
        }
    }

    pub fn kind(&self) -> ViewKind {
        self.kind
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    /// `x: N×3×H×W → N×d_h`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4("encode")?;
        if c != 3 || (h, w) != self.input_hw {
            return Err(Error::dim(
                "encode",
                format!(
                    "{:?} encoder takes 3×{}×{} input, got {c}×{h}×{w}",
                    self.kind, self.input_hw.0, self.input_hw.1
                ),
            ));
        }
        let mut cur = x;
        for b in &self.blocks {
            cur = g.conv2d(cur, p.var(b.kernel), b.stride)?;
            cur = g.channel_bias(cur, p.var(b.bias))?;
            cur = g.relu(cur)?;
        }
        let pooled = g.global_avg_pool(cur)?;
        self.head.apply(g, p, pooled)
    }
}

/// `d_h → hidden → 32` with a ReLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    first: Dense,
    second: Dense,
}

impl ProjectionHead {
    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let hidden = self.first.apply(g, p, h)?;
        let hidden = g.relu(hidden)?;
        self.second.apply(g, p, hidden)
    }
}

/// 2-layer perceptron `32 → hidden → 32` producing mask logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionNet {
    first: Dense,
    second: Dense,
}

impl AttentionNet {
    pub fn logits(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let hidden = self.first.apply(g, p, z)?;
        let hidden = g.relu(hidden)?;
        self.second.apply(g, p, hidden)
    }
}

/// `32 → hidden → C` label logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    first: Dense,
    second: Dense,
}

impl ClassifierHead {
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let hidden = self.first.apply(g, p, z)?;
        let hidden = g.relu(hidden)?;
        self.second.apply(g, p, hidden)
    }
}

/// A projection `z`, its mask and the masked product, for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedEmbedding {
    pub z: Tensor,
    pub mask: Tensor,
    pub z_masked: Tensor,
}

/// Graph handles produced by [`ClawsModel::forward_batch`]. Every matrix is
/// `N×32` except the logits, which are `N×C`.
#[derive(Clone, Copy, Debug)]
pub struct BatchForward {
    pub z_full: Var,
    pub z_crop: Var,
    pub mask: Var,
    pub z_full_masked: Var,
    pub z_crop_masked: Var,
    pub logits_full: Var,
    pub logits_crop: Var,
}

/// Values of one [`BatchForward`] row, i.e. one view pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairOutput {
    pub full: MaskedEmbedding,
    pub crop: MaskedEmbedding,
    pub logits_full: Tensor,
    pub logits_crop: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClawsModel {
    config: ModelConfig,
    params: ParamSet,
    full_encoder: EncoderParams,
    full_projection: ProjectionHead,
    crop_encoder: Option<EncoderParams>,
    crop_projection: Option<ProjectionHead>,
    attention: Option<AttentionNet>,
    classifier: ClassifierHead,
}

impl ClawsModel {
    /// Random He-normal initialization; biases start at zero.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::default();
        let c = &config;
        let full_encoder = EncoderParams::new(
            &mut ps,
            "full_encoder",
            ViewKind::Full,
            c.input_hw(ViewKind::Full),
            &c.full_encoder,
            c.hidden_dim,
            rng,
        );
        let full_projection = ProjectionHead {
            first: Dense::new(&mut ps, "full_projection.0", c.hidden_dim, c.projection_hidden, rng),
            second: Dense::new(&mut ps, "full_projection.1", c.projection_hidden, EMBED_DIM, rng),
        };
        let (crop_encoder, crop_projection, attention) = match c.variant {
            Variant::SharedNoMask => (None, None, None),
            Variant::Claws => {
                let enc = EncoderParams::new(
                    &mut ps,
                    "crop_encoder",
                    ViewKind::Crop,
                    c.input_hw(ViewKind::Crop),
                    &c.crop_encoder,
                    c.hidden_dim,
                    rng,
                );
                let proj = ProjectionHead {
                    first: Dense::new(&mut ps, "crop_projection.0", c.hidden_dim, c.projection_hidden, rng),
                    second: Dense::new(&mut ps, "crop_projection.1", c.projection_hidden, EMBED_DIM, rng),
                };
                let att = AttentionNet {
                    first: Dense::new(&mut ps, "attention.0", EMBED_DIM, c.attention_hidden, rng),
                    second: Dense::new(&mut ps, "attention.1", c.attention_hidden, EMBED_DIM, rng),
                };
                (Some(enc), Some(proj), Some(att))
            }
        };
        let classifier = ClassifierHead {
            first: Dense::new(&mut ps, "classifier.0", EMBED_DIM, c.classifier_hidden, rng),
            second: Dense::new(&mut ps, "classifier.1", c.classifier_hidden, c.classes, rng),
        };
        Ok(Self {
            config,
            params: ps,
            full_encoder,
            full_projection,
            crop_encoder,
            crop_projection,
            attention,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_mask_mode(&mut self, mode: MaskMode) {
        self.config.mask_mode = mode;
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.names.iter().position(|n| n == name).map(ParamId)
    }

    fn encoder(&self, kind: ViewKind) -> (&EncoderParams, &ProjectionHead) {
        match (kind, &self.crop_encoder, &self.crop_projection) {
            (ViewKind::Crop, Some(e), Some(p)) => (e, p),
            _ => (&self.full_encoder, &self.full_projection),
        }
    }

    /// Stacks images into an `N×3×H×W` leaf. In the shared-encoder variant,
    /// crop views are resized to the full geometry first.
    pub fn stack_views<'a, I>(&self, g: &mut Graph, kind: ViewKind, images: I) -> Result<Var>
    where
        I: IntoIterator<Item = &'a Image>,
    {
        let (enc, _) = self.encoder(kind);
        let (h, w) = enc.input_hw;
        let resize = kind == ViewKind::Crop && self.config.variant == Variant::SharedNoMask;
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            if resize {
                img.resize(h, w).write_chw(&mut data);
            } else {
                if (img.height(), img.width()) != (h, w) {
                    return Err(Error::dim(
                        "encode",
                        format!(
                            "{kind:?} encoder takes {h}×{w} images, got {}×{}",
                            img.height(),
                            img.width()
                        ),
                    ));
                }
                img.write_chw(&mut data);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::InsufficientBatch("no images".into()));
        }
        g.leaf(Tensor::new(vec![n, 3, h, w], data)?)
    }

    /// `H = f(X)` for full views, `g(X)` for crops.
    pub fn encode(&self, g: &mut Graph, p: &Bound, kind: ViewKind, x: Var) -> Result<Var> {
        self.encoder(kind).0.forward(g, p, x)
    }

    pub fn project(&self, g: &mut Graph, p: &Bound, kind: ViewKind, h: Var) -> Result<Var> {
        let want = self.config.hidden_dim;
        let (_, d) = g.value(h).dims2("project")?;
        if d != want {
            return Err(Error::dim("project", format!("hidden width {d}, expected {want}")));
        }
        self.encoder(kind).1.forward(g, p, h)
    }

    /// Binary mask from the crop projection: `step(sigmoid(m(z)))` in hard
    /// mode, `sigmoid(m(z))` in soft mode. All ones for the baseline.
    pub fn attention_mask(&self, g: &mut Graph, p: &Bound, z_crop: Var) -> Result<Var> {
        match &self.attention {
            None => {
                let shape = g.value(z_crop).shape().to_vec();
                g.leaf(Tensor::filled(&shape, 1.0))
            }
            Some(att) => {
                let logits = att.logits(g, p, z_crop)?;
                let probs = g.sigmoid(logits)?;
                match self.config.mask_mode {
                    MaskMode::Hard => g.straight_through_step(probs),
                    MaskMode::Soft => Ok(probs),
                }
            }
        }
    }

    /// `z ⊙ mask`. In hard mode the mask must be exactly binary.
    pub fn apply_mask_var(&self, g: &mut Graph, z: Var, mask: Var) -> Result<Var> {
        if self.config.mask_mode == MaskMode::Hard {
            check_binary(g.value(mask))?;
        }
        g.mul(z, mask)
    }

    pub fn classify(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let (_, d) = g.value(z).dims2("classify")?;
        if d != EMBED_DIM {
            return Err(Error::dim("classify", format!("input width {d}, expected {EMBED_DIM}")));
        }
        self.classifier.forward(g, p, z)
    }

    /// The whole forward pass for a batch of view pairs.
    pub fn forward_batch(&self, g: &mut Graph, p: &Bound, pairs: &[ViewPair]) -> Result<BatchForward> {
        let x_full = self.stack_views(g, ViewKind::Full, pairs.iter().map(|v| &v.full))?;
        let x_crop = self.stack_views(g, ViewKind::Crop, pairs.iter().map(|v| &v.crop))?;
        let h_full = self.encode(g, p, ViewKind::Full, x_full)?;
        let z_full = self.project(g, p, ViewKind::Full, h_full)?;
        let h_crop = self.encode(g, p, ViewKind::Crop, x_crop)?;
        let z_crop = self.project(g, p, ViewKind::Crop, h_crop)?;
        let mask = self.attention_mask(g, p, z_crop)?;
        let z_full_masked = self.apply_mask_var(g, z_full, mask)?;
        let z_crop_masked = self.apply_mask_var(g, z_crop, mask)?;
        let logits_full = self.classify(g, p, z_full)?;
        let logits_crop = self.classify(g, p, z_crop)?;
        Ok(BatchForward {
            z_full,
            z_crop,
            mask,
            z_full_masked,
            z_crop_masked,
            logits_full,
            logits_crop,
        })
    }

    /// Inference for one pair: `(z'_i, z'_j, logits_i, logits_j, M)`.
    pub fn forward_pair(&self, pair: &ViewPair) -> Result<PairOutput> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let out = self.forward_batch(&mut g, &p, std::slice::from_ref(pair))?;
        let row = |v: Var| Tensor::vector(g.value(v).row(0).to_vec());
        let mask = row(out.mask);
        Ok(PairOutput {
            full: MaskedEmbedding {
                z: row(out.z_full),
                mask: mask.clone(),
                z_masked: row(out.z_full_masked),
            },
            crop: MaskedEmbedding {
                z: row(out.z_crop),
                mask,
                z_masked: row(out.z_crop_masked),
            },
            logits_full: row(out.logits_full),
            logits_crop: row(out.logits_crop),
        })
    }

    /// Unmasked projections `N×32` of already-prepared views.
    pub fn embed_views(&self, kind: ViewKind, images: &[&Image]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let x = self.stack_views(&mut g, kind, images.iter().copied())?;
        let h = self.encode(&mut g, &p, kind, x)?;
        let z = self.project(&mut g, &p, kind, h)?;
        Ok(g.value(z).clone())
    }
}

fn check_binary(mask: &Tensor) -> Result<()> {
    match mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Contract(format!("mask entry {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// `z ⊙ mask` for plain tensors; rejects non-binary masks.
pub fn apply_mask(z: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if z.shape() != mask.shape() {
        return Err(Error::dim(
            "apply_mask",
            format!("{:?} vs {:?}", z.shape(), mask.shape()),
        ));
    }
    check_binary(mask)?;
    let data = z.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
    Tensor::new(z.shape().to_vec(), data)
}
