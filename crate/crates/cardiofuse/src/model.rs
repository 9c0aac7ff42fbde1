//! Model assembly: the bottleneck CNN (primary configuration and the
//! input-length variants), the MLP baseline, parameter/FLOP counters and
//! weight serialization.
//!
//! The CNN is: per-modality affine transform, a strided stem convolution
//! (adapted per input length so the output width stays 128), four
//! stride-1 inverted-residual bottleneck blocks, global average pooling and
//! a 2-class linear classifier. Every convolution is followed by batch
//! normalization and is bias-free; a bottleneck's expansion conv is omitted
//! when the expansion size equals its input channels, and a residual
//! connection is present exactly when input and output channels match.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{
    cross_entropy_from_logits, softmax, Activation, ActivationKind, AffineModality, BatchNorm1d,
    Conv1d, ConvSpec, GlobalAvgPool, Linear, NnError, Param, Scalar, Tensor,
};
use crate::util::fnv1a;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("bad magic: not a weight stream")]
    BadMagic,
    #[error("unsupported weight stream version {0}")]
    BadVersion(u16),
    #[error("config hash mismatch: stream {stream:#018x}, expected {expected:#018x}")]
    ConfigHashMismatch { stream: u64, expected: u64 },
    #[error("weight stream truncated")]
    TruncatedStream,
    #[error("malformed weight record: {0}")]
    BadRecord(String),
}

/// One inverted-residual block row of the architecture table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub in_ch: usize,
    pub exp_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub nonlin: ActivationKind,
}

impl BottleneckSpec {
    /// The expansion conv exists only when it changes the channel count.
    pub fn has_expand(&self) -> bool {
        self.exp_ch != self.in_ch
    }

    /// Residual connection iff input and output channels match (stride is
    /// always 1).
    pub fn has_residual(&self) -> bool {
        self.in_ch == self.out_ch
    }

    pub fn expand_spec(&self) -> ConvSpec {
        ConvSpec {
            in_ch: self.in_ch,
            out_ch: self.exp_ch,
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    pub fn depthwise_spec(&self) -> ConvSpec {
        ConvSpec {
            in_ch: self.exp_ch,
            out_ch: self.exp_ch,
            kernel: self.kernel,
            stride: 1,
            padding: (self.kernel - 1) / 2,
            groups: self.exp_ch,
        }
    }

    pub fn project_spec(&self) -> ConvSpec {
        ConvSpec {
            in_ch: self.exp_ch,
            out_ch: self.out_ch,
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// Full CNN shape description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub per_modality_len: usize,
    pub stem_out_ch: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_padding: usize,
    pub blocks: Vec<BottleneckSpec>,
    pub n_classes: usize,
}

fn default_blocks() -> Vec<BottleneckSpec> {
    use ActivationKind::{HardSwish, Relu};
    vec![
        BottleneckSpec { in_ch: 16, exp_ch: 16, out_ch: 16, kernel: 3, nonlin: Relu },
        BottleneckSpec { in_ch: 16, exp_ch: 72, out_ch: 24, kernel: 3, nonlin: Relu },
        BottleneckSpec { in_ch: 24, exp_ch: 88, out_ch: 24, kernel: 3, nonlin: Relu },
        BottleneckSpec { in_ch: 24, exp_ch: 96, out_ch: 40, kernel: 5, nonlin: HardSwish },
    ]
}

impl ModelConfig {
    /// Primary configuration: 128 samples per modality.
    pub fn cnn128() -> Self {
        Self::for_variant(128).unwrap()
    }

    /// One of the published input-length variants (64, 128, 1024, 6000
    /// samples per modality). Stems are chosen so the output width is
    /// always 128.
    pub fn for_variant(per_modality_len: usize) -> Result<Self, ModelError> {
        let (k, s, p) = match per_modality_len {
            64 => (3, 1, 1),
            128 => (3, 2, 1),
            1024 => (31, 16, 15),
            6000 => (187, 94, 93),
            other => {
                return Err(ModelError::InvalidConfig(format!(
                    "no stem defined for per-modality length {other}; use 64, 128, 1024 or 6000"
                )))
            }
        };
        let cfg = Self {
            per_modality_len,
            stem_out_ch: 16,
            stem_kernel: k,
            stem_stride: s,
            stem_padding: p,
            blocks: default_blocks(),
            n_classes: 2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn input_width(&self) -> usize {
        2 * self.per_modality_len
    }

    pub fn stem_spec(&self) -> ConvSpec {
        ConvSpec {
            in_ch: 1,
            out_ch: self.stem_out_ch,
            kernel: self.stem_kernel,
            stride: self.stem_stride,
            padding: self.stem_padding,
            groups: 1,
        }
    }

    pub fn stem_out_width(&self) -> usize {
        self.stem_spec().out_width(self.input_width())
    }

    pub fn classifier_in(&self) -> usize {
        self.blocks.last().map_or(self.stem_out_ch, |b| b.out_ch)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.per_modality_len == 0 {
            return fail("per_modality_len must be >= 1".into());
        }
        if self.stem_out_ch == 0 || self.n_classes < 2 {
            return fail("stem channels and class count must be positive".into());
        }
        if self.stem_stride == 0 {
            return fail("stem stride must be >= 1".into());
        }
        if self.input_width() + 2 * self.stem_padding < self.stem_kernel {
            return fail("stem kernel larger than padded input".into());
        }
        let mut ch = self.stem_out_ch;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_ch != ch {
                return fail(format!(
                    "block {i} expects {} input channels but gets {ch}",
                    b.in_ch
                ));
            }
            if b.kernel % 2 == 0 {
                return fail(format!("block {i} kernel must be odd"));
            }
            if b.exp_ch < b.in_ch {
                return fail(format!("block {i} expansion smaller than input"));
            }
            ch = b.out_ch;
        }
        Ok(())
    }

    /// Canonical flat text used for the config hash and the sidecar config
    /// file.
    pub fn canonical_text(&self) -> String {
        let mut out = String::from("arch=cnn\n");
        out.push_str(&format!("per_modality_len={}\n", self.per_modality_len));
        out.push_str(&format!(
            "stem={},{},{},{}\n",
            self.stem_out_ch, self.stem_kernel, self.stem_stride, self.stem_padding
        ));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push_str(&format!(
                "block{i}={},{},{},{},{}\n",
                b.in_ch, b.exp_ch, b.out_ch, b.kernel, b.nonlin
            ));
        }
        out.push_str(&format!("classes={}\n", self.n_classes));
        out
    }
}

/// Conv + batch norm + optional nonlinearity, the unit the CNN is wired
/// from.
#[derive(Debug, Clone)]
pub struct ConvBnAct<S> {
    pub conv: Conv1d<S>,
    pub bn: BatchNorm1d<S>,
    pub act: Option<Activation<S>>,
}

impl<S: Scalar> ConvBnAct<S> {
    fn new(
        name: &str,
        spec: ConvSpec,
        act: Option<ActivationKind>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv1d::new(&format!("{name}.conv"), spec, false, rng),
            bn: BatchNorm1d::new(&format!("{name}.bn"), spec.out_ch),
            act: act.map(Activation::new),
        }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        let y = self.bn.infer(&self.conv.infer(x));
        match &self.act {
            Some(a) => a.infer(&y),
            None => y,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let y = self.bn.forward_train(&self.conv.forward_train(x));
        match &mut self.act {
            Some(a) => a.forward_train(&y),
            None => y,
        }
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let d = match &mut self.act {
            Some(a) => a.backward(dy)?,
            None => dy.clone(),
        };
        self.conv.backward(&self.bn.backward(&d)?)
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck<S> {
    pub expand: Option<ConvBnAct<S>>,
    pub depthwise: ConvBnAct<S>,
    pub project: ConvBnAct<S>,
    pub residual: bool,
}

impl<S: Scalar> Bottleneck<S> {
    fn new(name: &str, spec: &BottleneckSpec, rng: &mut ChaCha8Rng) -> Self {
        let expand = spec.has_expand().then(|| {
            ConvBnAct::new(&format!("{name}.expand"), spec.expand_spec(), Some(spec.nonlin), rng)
        });
        let depthwise =
            ConvBnAct::new(&format!("{name}.dw"), spec.depthwise_spec(), Some(spec.nonlin), rng);
        let project = ConvBnAct::new(&format!("{name}.project"), spec.project_spec(), None, rng);
        Self {
            expand,
            depthwise,
            project,
            residual: spec.has_residual(),
        }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut h = match &self.expand {
            Some(e) => e.infer(x),
            None => x.clone(),
        };
        h = self.project.infer(&self.depthwise.infer(&h));
        if self.residual {
            for (o, &i) in h.data_mut().iter_mut().zip(x.data()) {
                *o += i;
            }
        }
        h
    }

    pub fn forward_train(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let mut h = match &mut self.expand {
            Some(e) => e.forward_train(x),
            None => x.clone(),
        };
        h = self.depthwise.forward_train(&h);
        h = self.project.forward_train(&h);
        if self.residual {
            for (o, &i) in h.data_mut().iter_mut().zip(x.data()) {
                *o += i;
            }
        }
        h
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let d = self.project.backward(dy)?;
        let d = self.depthwise.backward(&d)?;
        let mut d = match &mut self.expand {
            Some(e) => e.backward(&d)?,
            None => d,
        };
        if self.residual {
            for (o, &g) in d.data_mut().iter_mut().zip(dy.data()) {
                *o += g;
            }
        }
        Ok(d)
    }
}

#[derive(Debug, Clone)]
pub struct Cnn<S> {
    pub config: ModelConfig,
    pub affine: AffineModality<S>,
    pub stem: ConvBnAct<S>,
    pub blocks: Vec<Bottleneck<S>>,
    pub pool: GlobalAvgPool,
    pub classifier: Linear<S>,
}

/// Build the CNN with deterministic fan-in-scaled uniform initialization.
pub fn build_cnn<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Cnn<S>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let affine = AffineModality::identity("affine");
    let stem = ConvBnAct::new("stem", config.stem_spec(), Some(ActivationKind::HardSwish), &mut rng);
    let blocks = config
        .blocks
        .iter()
        .enumerate()
        .map(|(i, spec)| Bottleneck::new(&format!("block{i}"), spec, &mut rng))
        .collect();
    let classifier = Linear::new("classifier", config.classifier_in(), config.n_classes, &mut rng);
    Ok(Cnn {
        config: config.clone(),
        affine,
        stem,
        blocks,
        pool: GlobalAvgPool::new(),
        classifier,
    })
}

impl<S: Scalar> Cnn<S> {
    fn check_input(&self, x: &Tensor<S>) -> Result<(), NnError> {
        if x.channels() != 1 || x.width() != self.config.input_width() {
            return Err(NnError::ShapeMismatch {
                expected: format!("nx1x{}", self.config.input_width()),
                actual: x.shape_string(),
            });
        }
        Ok(())
    }

    pub fn infer_logits(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        self.check_input(x)?;
        let mut h = self.stem.infer(&self.affine.infer(x)?);
        for block in &self.blocks {
            h = block.infer(&h);
        }
        Ok(self.classifier.infer(&self.pool.infer(&h)))
    }

    pub fn forward_train(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        self.check_input(x)?;
        let mut h = self.stem.forward_train(&self.affine.forward_train(x)?);
        for block in &mut self.blocks {
            h = block.forward_train(&h);
        }
        Ok(self.classifier.forward_train(&self.pool.forward_train(&h)))
    }

    pub fn backward(&mut self, dlogits: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let d = self.classifier.backward(dlogits)?;
        let mut d = self.pool.backward(&d)?;
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(&d)?;
        }
        self.affine.backward(&self.stem.backward(&d)?)
    }
}

/// The MLP baseline: affine transform, four linear+BN+ReLU layers with
/// hidden sizes 37/35/55/54 on the 256-wide fused input, and a 2-class
/// output layer.
#[derive(Debug, Clone)]
pub struct Mlp<S> {
    pub affine: AffineModality<S>,
    pub hidden: Vec<MlpLayer<S>>,
    pub output: Linear<S>,
}

#[derive(Debug, Clone)]
pub struct MlpLayer<S> {
    pub linear: Linear<S>,
    pub bn: BatchNorm1d<S>,
    pub act: Activation<S>,
}

pub const MLP_INPUT: usize = 256;
pub const MLP_HIDDEN: [usize; 4] = [37, 35, 55, 54];

pub fn build_mlp<S: Scalar>(seed: u64) -> Mlp<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let affine = AffineModality::identity("affine");
    let mut hidden = Vec::new();
    let mut in_dim = MLP_INPUT;
    for (i, &out_dim) in MLP_HIDDEN.iter().enumerate() {
        hidden.push(MlpLayer {
            linear: Linear::new(&format!("mlp{i}.linear"), in_dim, out_dim, &mut rng),
            bn: BatchNorm1d::new(&format!("mlp{i}.bn"), out_dim),
            act: Activation::new(ActivationKind::Relu),
        });
        in_dim = out_dim;
    }
    let output = Linear::new("output", in_dim, 2, &mut rng);
    Mlp {
        affine,
        hidden,
        output,
    }
}

impl<S: Scalar> Mlp<S> {
    fn check_input(&self, x: &Tensor<S>) -> Result<(), NnError> {
        if x.channels() != 1 || x.width() != MLP_INPUT {
            return Err(NnError::ShapeMismatch {
                expected: format!("nx1x{MLP_INPUT}"),
                actual: x.shape_string(),
            });
        }
        Ok(())
    }

    /// Reinterpret (n, 1, w) as (n, w, 1) feature columns; same memory
    /// layout.
    fn to_features(x: &Tensor<S>) -> Tensor<S> {
        Tensor::from_vec(x.batch(), x.width(), 1, x.data().to_vec())
    }

    pub fn infer_logits(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        self.check_input(x)?;
        let mut h = Self::to_features(&self.affine.infer(x)?);
        for layer in &self.hidden {
            h = layer.act.infer(&layer.bn.infer(&layer.linear.infer(&h)));
        }
        Ok(self.output.infer(&h))
    }

    pub fn forward_train(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        self.check_input(x)?;
        let mut h = Self::to_features(&self.affine.forward_train(x)?);
        for layer in &mut self.hidden {
            h = layer
                .act
                .forward_train(&layer.bn.forward_train(&layer.linear.forward_train(&h)));
        }
        Ok(self.output.forward_train(&h))
    }

    pub fn backward(&mut self, dlogits: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let mut d = self.output.backward(dlogits)?;
        for layer in self.hidden.iter_mut().rev() {
            d = layer.linear.backward(&layer.bn.backward(&layer.act.backward(&d)?)?)?;
        }
        let d = Tensor::from_vec(d.batch(), 1, d.channels(), d.data().to_vec());
        self.affine.backward(&d)
    }
}

/// Which architecture a weight stream belongs to.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelArch {
    Cnn(ModelConfig),
    Mlp,
}

impl ModelArch {
    pub fn canonical_text(&self) -> String {
        match self {
            ModelArch::Cnn(cfg) => cfg.canonical_text(),
            ModelArch::Mlp => format!(
                "arch=mlp\ninput={MLP_INPUT}\nhidden={}\nclasses=2\n",
                MLP_HIDDEN.map(|d| d.to_string()).join(",")
            ),
        }
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a(self.canonical_text().as_bytes())
    }

    pub fn input_width(&self) -> usize {
        match self {
            ModelArch::Cnn(cfg) => cfg.input_width(),
            ModelArch::Mlp => MLP_INPUT,
        }
    }

    pub fn build<S: Scalar>(&self, seed: u64) -> Result<Model<S>, ModelError> {
        match self {
            ModelArch::Cnn(cfg) => Ok(Model::Cnn(build_cnn(cfg, seed)?)),
            ModelArch::Mlp => Ok(Model::Mlp(build_mlp(seed))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model<S> {
    Cnn(Cnn<S>),
    Mlp(Mlp<S>),
}

impl<S: Scalar> Model<S> {
    pub fn arch(&self) -> ModelArch {
        match self {
            Model::Cnn(c) => ModelArch::Cnn(c.config.clone()),
            Model::Mlp(_) => ModelArch::Mlp,
        }
    }

    pub fn input_width(&self) -> usize {
        self.arch().input_width()
    }

    pub fn infer_logits(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        match self {
            Model::Cnn(m) => m.infer_logits(x),
            Model::Mlp(m) => m.infer_logits(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        match self {
            Model::Cnn(m) => m.forward_train(x),
            Model::Mlp(m) => m.forward_train(x),
        }
    }

    pub fn backward(&mut self, dlogits: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        match self {
            Model::Cnn(m) => m.backward(dlogits),
            Model::Mlp(m) => m.backward(dlogits),
        }
    }

    /// Softmax class probabilities for one window; index 0 = normal,
    /// 1 = abnormal.
    pub fn predict(&self, window: &[S]) -> Result<Vec<S>, NnError> {
        let x = Tensor::from_window(window);
        let logits = self.infer_logits(&x)?;
        let row: Vec<S> = (0..logits.channels()).map(|c| logits.row(0, c)[0]).collect();
        Ok(softmax(&row))
    }

    /// One combined training step surface: forward, loss, backward.
    /// Gradients accumulate into the params; caller zeroes them.
    pub fn forward_backward(&mut self, x: &Tensor<S>, targets: &[usize]) -> Result<f64, NnError> {
        let logits = self.forward_train(x)?;
        let (loss, dlogits) = cross_entropy_from_logits(&logits, targets);
        self.backward(&dlogits)?;
        Ok(loss)
    }

    /// Visit every trainable parameter in a fixed canonical order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        match self {
            Model::Cnn(m) => {
                f(&mut m.affine.params);
                visit_cba(&mut m.stem, f);
                for b in &mut m.blocks {
                    if let Some(e) = &mut b.expand {
                        visit_cba(e, f);
                    }
                    visit_cba(&mut b.depthwise, f);
                    visit_cba(&mut b.project, f);
                }
                f(&mut m.classifier.weight);
                f(&mut m.classifier.bias);
            }
            Model::Mlp(m) => {
                f(&mut m.affine.params);
                for layer in &mut m.hidden {
                    f(&mut layer.linear.weight);
                    f(&mut layer.linear.bias);
                    f(&mut layer.bn.gamma);
                    f(&mut layer.bn.beta);
                }
                f(&mut m.output.weight);
                f(&mut m.output.bias);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Trainable parameter count: conv/linear weights and biases, batch-norm
    /// gamma and beta (not running statistics), and the 4 affine scalars.
    pub fn count_params(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |p| total += p.numel());
        total
    }
}

fn visit_cba<S: Scalar>(cba: &mut ConvBnAct<S>, f: &mut dyn FnMut(&mut Param<S>)) {
    f(&mut cba.conv.weight);
    if let Some(b) = &mut cba.conv.bias {
        f(b);
    }
    f(&mut cba.bn.gamma);
    f(&mut cba.bn.beta);
}

// ---------------------------------------------------------------------------
// Cost counting
// ---------------------------------------------------------------------------

/// One layer's contribution to the cost model.
#[derive(Debug, Clone)]
pub enum CostItem {
    /// Conv or linear: multiply-accumulates (bias adds count as MACs, the
    /// convention the published counts follow).
    MacLayer { name: String, macs: u64 },
    /// Elementwise op: one FLOP per output element.
    Elementwise { name: String, flops: u64 },
}

#[derive(Debug, Clone, Default)]
pub struct FlopsReport {
    pub items: Vec<CostItem>,
}

impl FlopsReport {
    pub fn conv_linear_macs(&self) -> u64 {
        self.items
            .iter()
            .map(|i| match i {
                CostItem::MacLayer { macs, .. } => *macs,
                CostItem::Elementwise { .. } => 0,
            })
            .sum()
    }

    /// Headline figure: 2 FLOPs per conv/linear MAC. This is the number
    /// matched against the published totals.
    pub fn headline_flops(&self) -> u64 {
        2 * self.conv_linear_macs()
    }

    pub fn elementwise_flops(&self) -> u64 {
        self.items
            .iter()
            .map(|i| match i {
                CostItem::Elementwise { flops, .. } => *flops,
                CostItem::MacLayer { .. } => 0,
            })
            .sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.headline_flops() + self.elementwise_flops()
    }

    pub fn mac_layers(&self) -> impl Iterator<Item = (&str, u64)> {
        self.items.iter().filter_map(|i| match i {
            CostItem::MacLayer { name, macs } => Some((name.as_str(), *macs)),
            CostItem::Elementwise { .. } => None,
        })
    }
}

/// FLOP/MAC breakdown for a CNN config, derived from shapes alone.
pub fn cnn_flops(cfg: &ModelConfig) -> FlopsReport {
    let mut items = Vec::new();
    let mac = |name: &str, macs: u64| CostItem::MacLayer { name: name.into(), macs };
    let elem = |name: &str, flops: u64| CostItem::Elementwise { name: name.into(), flops };

    items.push(elem("affine", cfg.input_width() as u64));

    let w = cfg.stem_out_width() as u64;
    let stem = cfg.stem_spec();
    items.push(mac("stem.conv", w * stem.out_ch as u64 * (stem.icpg() * stem.kernel) as u64));
    items.push(elem("stem.bn", w * stem.out_ch as u64));
    items.push(elem("stem.act", w * stem.out_ch as u64));

    for (i, b) in cfg.blocks.iter().enumerate() {
        let p = |suffix: &str| format!("block{i}.{suffix}");
        if b.has_expand() {
            items.push(mac(&p("expand.conv"), w * b.exp_ch as u64 * b.in_ch as u64));
            items.push(elem(&p("expand.bn"), w * b.exp_ch as u64));
            items.push(elem(&p("expand.act"), w * b.exp_ch as u64));
        }
        items.push(mac(&p("dw.conv"), w * b.exp_ch as u64 * b.kernel as u64));
        items.push(elem(&p("dw.bn"), w * b.exp_ch as u64));
        items.push(elem(&p("dw.act"), w * b.exp_ch as u64));
        items.push(mac(&p("project.conv"), w * b.out_ch as u64 * b.exp_ch as u64));
        items.push(elem(&p("project.bn"), w * b.out_ch as u64));
        if b.has_residual() {
            items.push(elem(&p("residual"), w * b.out_ch as u64));
        }
    }

    let in_dim = cfg.classifier_in() as u64;
    items.push(elem("pool", w * in_dim));
    items.push(mac("classifier", cfg.n_classes as u64 * (in_dim + 1)));
    items.push(elem("softmax", cfg.n_classes as u64));
    FlopsReport { items }
}

/// FLOP/MAC breakdown for the MLP baseline.
pub fn mlp_flops() -> FlopsReport {
    let mut items = Vec::new();
    items.push(CostItem::Elementwise { name: "affine".into(), flops: MLP_INPUT as u64 });
    let mut in_dim = MLP_INPUT as u64;
    for (i, &out) in MLP_HIDDEN.iter().enumerate() {
        let out = out as u64;
        items.push(CostItem::MacLayer { name: format!("mlp{i}.linear"), macs: out * (in_dim + 1) });
        items.push(CostItem::Elementwise { name: format!("mlp{i}.bn"), flops: out });
        items.push(CostItem::Elementwise { name: format!("mlp{i}.act"), flops: out });
        in_dim = out;
    }
    items.push(CostItem::MacLayer { name: "output".into(), macs: 2 * (in_dim + 1) });
    items.push(CostItem::Elementwise { name: "softmax".into(), flops: 2 });
    FlopsReport { items }
}

// ---------------------------------------------------------------------------
// Weight serialization
// ---------------------------------------------------------------------------

pub mod weights {
    //! Binary weight streams.
    //!
    //! Layout: magic `TNET`, version u16, config hash u64, then records
    //! until end of stream. Record: name (u16 length + UTF-8), dtype u8
    //! (0 = f32, 1 = i8), rank u32, dims u32 each, raw little-endian
    //! payload; i8 records are followed by their quantization parameters
    //! (scale f32, zero_point i32).

    use super::{Model, ModelArch, ModelError, Scalar};

    pub const MAGIC: &[u8; 4] = b"TNET";
    pub const VERSION: u16 = 1;

    pub const DTYPE_F32: u8 = 0;
    pub const DTYPE_I8: u8 = 1;

    /// One named tensor in a weight stream.
    #[derive(Debug, Clone, PartialEq)]
    pub struct Record {
        pub name: String,
        pub shape: Vec<usize>,
        pub payload: Payload,
    }

    #[derive(Debug, Clone, PartialEq)]
    pub enum Payload {
        F32(Vec<f32>),
        I8 { values: Vec<i8>, scale: f32, zero_point: i32 },
    }

    impl Record {
        pub fn f32(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Self {
            Self { name: name.into(), shape, payload: Payload::F32(values) }
        }

        pub fn i8(
            name: impl Into<String>,
            shape: Vec<usize>,
            values: Vec<i8>,
            scale: f32,
            zero_point: i32,
        ) -> Self {
            Self { name: name.into(), shape, payload: Payload::I8 { values, scale, zero_point } }
        }

        pub fn f32_values(&self) -> Option<&[f32]> {
            match &self.payload {
                Payload::F32(v) => Some(v),
                Payload::I8 { .. } => None,
            }
        }
    }

    pub fn write_stream(config_hash: u64, records: &[Record]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&config_hash.to_le_bytes());
        for rec in records {
            let name = rec.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            match &rec.payload {
                Payload::F32(values) => {
                    out.push(DTYPE_F32);
                    push_shape(&mut out, &rec.shape);
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::I8 { values, scale, zero_point } => {
                    out.push(DTYPE_I8);
                    push_shape(&mut out, &rec.shape);
                    for v in values {
                        out.push(*v as u8);
                    }
                    out.extend_from_slice(&scale.to_le_bytes());
                    out.extend_from_slice(&zero_point.to_le_bytes());
                }
            }
        }
        out
    }

    fn push_shape(out: &mut Vec<u8>, shape: &[usize]) {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }

    struct Reader<'a> {
        data: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
            let end = self.pos.checked_add(n).ok_or(ModelError::TruncatedStream)?;
            if end > self.data.len() {
                return Err(ModelError::TruncatedStream);
            }
            let s = &self.data[self.pos..end];
            self.pos = end;
            Ok(s)
        }

        fn u16(&mut self) -> Result<u16, ModelError> {
            Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
        }

        fn u32(&mut self) -> Result<u32, ModelError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }

        fn remaining(&self) -> usize {
            self.data.len() - self.pos
        }
    }

    /// Parse a stream; verifies magic/version and returns the config hash
    /// plus all records.
    pub fn read_stream(data: &[u8]) -> Result<(u64, Vec<Record>), ModelError> {
        let mut r = Reader { data, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(ModelError::BadVersion(version));
        }
        let config_hash = u64::from_le_bytes(r.take(8)?.try_into().unwrap());

        let mut records = Vec::new();
        while r.remaining() > 0 {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::BadRecord("record name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(ModelError::BadRecord(format!("rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_truncated()?;
                shape.push(d);
            }
            let elem_size = match dtype {
                DTYPE_F32 => 4,
                DTYPE_I8 => 1,
                other => return Err(ModelError::BadRecord(format!("unknown dtype {other}"))),
            };
            if numel.checked_mul(elem_size).ok_or_truncated()? > r.remaining() {
                return Err(ModelError::TruncatedStream);
            }
            let payload = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(numel * 4)?;
                    Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                }
                _ => {
                    let raw = r.take(numel)?;
                    let values = raw.iter().map(|&b| b as i8).collect();
                    let scale = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                    let zero_point = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
                    Payload::I8 { values, scale, zero_point }
                }
            };
            records.push(Record { name, shape, payload });
        }
        Ok((config_hash, records))
    }

    trait OkOrTruncated<T> {
        fn ok_or_truncated(self) -> Result<T, ModelError>;
    }

    impl<T> OkOrTruncated<T> for Option<T> {
        fn ok_or_truncated(self) -> Result<T, ModelError> {
            self.ok_or(ModelError::TruncatedStream)
        }
    }

    fn to_f32(values: &[impl Scalar + Copy]) -> Vec<f32> {
        values.iter().map(|v| v.as_f64() as f32).collect()
    }

    /// All state records of a float model: trainable params plus batch-norm
    /// running statistics, in canonical order.
    pub fn model_records(model: &mut Model<f32>) -> Vec<Record> {
        let mut records = Vec::new();
        model.visit_params(&mut |p| {
            records.push(Record::f32(p.name.clone(), p.shape.clone(), to_f32(&p.data)));
        });
        // Running stats, appended after the trainable params.
        let mut push_bn = |name: &str, bn: &crate::nn::BatchNorm1d<f32>| {
            records.push(Record::f32(
                format!("{name}.running_mean"),
                vec![bn.channels()],
                bn.running_mean.clone(),
            ));
            records.push(Record::f32(
                format!("{name}.running_var"),
                vec![bn.channels()],
                bn.running_var.clone(),
            ));
        };
        match model {
            Model::Cnn(m) => {
                push_bn("stem.bn", &m.stem.bn);
                for (i, b) in m.blocks.iter().enumerate() {
                    if let Some(e) = &b.expand {
                        push_bn(&format!("block{i}.expand.bn"), &e.bn);
                    }
                    push_bn(&format!("block{i}.dw.bn"), &b.depthwise.bn);
                    push_bn(&format!("block{i}.project.bn"), &b.project.bn);
                }
            }
            Model::Mlp(m) => {
                for (i, layer) in m.hidden.iter().enumerate() {
                    push_bn(&format!("mlp{i}.bn"), &layer.bn);
                }
            }
        }
        records
    }

    /// Serialize a float model.
    pub fn save_weights(model: &mut Model<f32>) -> Vec<u8> {
        let hash = model.arch().config_hash();
        let records = model_records(model);
        write_stream(hash, &records)
    }

    /// Rebuild a model from a stream produced by [`save_weights`]. The arch
    /// must hash to the stream's config hash.
    pub fn load_weights(data: &[u8], arch: &ModelArch) -> Result<Model<f32>, ModelError> {
        let (hash, records) = read_stream(data)?;
        let expected = arch.config_hash();
        if hash != expected {
            return Err(ModelError::ConfigHashMismatch { stream: hash, expected });
        }
        let mut model = arch.build::<f32>(0)?;
        apply_records(&mut model, records)?;
        Ok(model)
    }

    /// Fill a freshly built model from its canonical record sequence
    /// (trainable params then batch-norm running stats, as produced by
    /// [`model_records`]).
    pub fn apply_records(model: &mut Model<f32>, records: Vec<Record>) -> Result<(), ModelError> {
        let expected_records = model_records(model);
        if records.len() != expected_records.len() {
            return Err(ModelError::BadRecord(format!(
                "expected {} records, stream has {}",
                expected_records.len(),
                records.len()
            )));
        }
        let mut iter = records.into_iter();
        let mut fail: Option<ModelError> = None;
        let mut fill = |p: &mut crate::nn::Param<f32>| {
            if fail.is_some() {
                return;
            }
            let rec = iter.next().unwrap();
            match check_and_take(&rec, &p.name, p.numel()) {
                Ok(values) => p.data = values,
                Err(e) => fail = Some(e),
            }
        };
        model.visit_params(&mut fill);
        if let Some(e) = fail {
            return Err(e);
        }
        // Remaining records are running stats, in the same canonical order.
        let mut load_bn = |name: String, bn: &mut crate::nn::BatchNorm1d<f32>| -> Result<(), ModelError> {
            let rec = iter.next().unwrap();
            bn.running_mean = check_and_take(&rec, &format!("{name}.running_mean"), bn.channels())?;
            let rec = iter.next().unwrap();
            bn.running_var = check_and_take(&rec, &format!("{name}.running_var"), bn.channels())?;
            Ok(())
        };
        match model {
            Model::Cnn(m) => {
                load_bn("stem.bn".into(), &mut m.stem.bn)?;
                for (i, b) in m.blocks.iter_mut().enumerate() {
                    if let Some(e) = &mut b.expand {
                        load_bn(format!("block{i}.expand.bn"), &mut e.bn)?;
                    }
                    load_bn(format!("block{i}.dw.bn"), &mut b.depthwise.bn)?;
                    load_bn(format!("block{i}.project.bn"), &mut b.project.bn)?;
                }
            }
            Model::Mlp(m) => {
                for (i, layer) in m.hidden.iter_mut().enumerate() {
                    load_bn(format!("mlp{i}.bn"), &mut layer.bn)?;
                }
            }
        }
        Ok(())
    }

    fn check_and_take(rec: &Record, name: &str, numel: usize) -> Result<Vec<f32>, ModelError> {
        if rec.name != name {
            return Err(ModelError::BadRecord(format!(
                "expected record `{name}`, stream has `{}`",
                rec.name
            )));
        }
        let values = rec.f32_values().ok_or_else(|| {
            ModelError::BadRecord(format!("record `{name}` has wrong dtype"))
        })?;
        if values.len() != numel {
            return Err(ModelError::BadRecord(format!(
                "record `{name}` has {} values, expected {numel}",
                values.len()
            )));
        }
        Ok(values.to_vec())
    }
}
