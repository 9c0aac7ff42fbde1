//! 8-bit quantization: fake-quantization for quantization-aware training
//! (straight-through gradients) and a true int8 inference path.
//!
//! Scheme: per-tensor symmetric weights (zero point 0, range ±127), affine
//! activations over EMA-observed ranges (always covering zero so padding is
//! exact), round-half-away-from-zero everywhere. Batch norm stays in float
//! during QAT and is folded into the preceding convolution when the model is
//! converted; biases become int32 at scale `input_scale * weight_scale`;
//! requantization multipliers are precomputed int32 fixed-point. Elementwise
//! nonlinearities run from 256-entry lookup tables in the int8 path, and
//! conv/linear accumulate in int32 only.

use thiserror::Error;

use crate::model::{Cnn, ConvBnAct, ModelConfig, ModelError};
use crate::nn::{
    cross_entropy_from_logits, softmax, ActivationKind, BatchNorm1d, ConvSpec, NnError, Param,
    Tensor,
};
use crate::preprocess::FusedWindow;
use crate::train::Trainable;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("no calibration data")]
    NoData,
    #[error("activation ranges not calibrated (boundary `{0}`)")]
    NotCalibrated(String),
    #[error("int32 accumulator can overflow in layer `{layer}` (worst case {worst_case})")]
    AccumulatorOverflow { layer: String, worst_case: i64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Round half away from zero. `f64::round` already has these semantics;
/// the alias pins the convention the whole int8 path depends on.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantScheme {
    SymmetricWeight,
    AffineActivation,
}

/// Per-tensor quantization parameters: `q = clamp(round(x/scale) + zero_point,
/// -128, 127)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub scheme: QuantScheme,
}

impl QuantParams {
    /// Symmetric weight parameters covering ±max_abs with 127 steps each
    /// side; zero point is 0 by construction.
    pub fn symmetric_weight(max_abs: f64) -> Self {
        Self {
            scale: (max_abs.max(1e-12) / 127.0) as f32,
            zero_point: 0,
            scheme: QuantScheme::SymmetricWeight,
        }
    }

    /// Affine activation parameters covering `[min, max]`. The range is
    /// widened when degenerate and always extended to include zero, so the
    /// real value 0 maps exactly onto the zero point.
    pub fn affine_from_range(min: f64, max: f64) -> Self {
        let (mut min, mut max) = (min.min(max), max.max(min));
        if max - min < 1e-6 {
            let eps = 1e-3 * min.abs().max(1.0);
            min -= eps;
            max += eps;
        }
        min = min.min(0.0);
        max = max.max(0.0);
        let scale = (max - min) / 255.0;
        let zero_point = (-128.0 - round_half_away(min / scale)) as i32;
        Self {
            scale: scale as f32,
            zero_point: zero_point.clamp(-128, 127),
            scheme: QuantScheme::AffineActivation,
        }
    }

    #[inline]
    pub fn quantize_value(&self, x: f64) -> i8 {
        let q = round_half_away(x / f64::from(self.scale)) + f64::from(self.zero_point);
        q.clamp(-128.0, 127.0) as i8
    }

    /// Whether the value quantizes without saturating (the straight-through
    /// gradient is 1 exactly on this range).
    #[inline]
    pub fn in_range(&self, x: f64) -> bool {
        let q = round_half_away(x / f64::from(self.scale)) + f64::from(self.zero_point);
        (-128.0..=127.0).contains(&q)
    }

    #[inline]
    pub fn dequantize_value(&self, q: i8) -> f32 {
        (i32::from(q) - self.zero_point) as f32 * self.scale
    }

    pub fn quantize_tensor(&self, xs: &[f32]) -> Vec<i8> {
        xs.iter().map(|&x| self.quantize_value(f64::from(x))).collect()
    }

    /// quantize then dequantize, the fake-quant transfer function.
    #[inline]
    pub fn fake(&self, x: f32) -> f32 {
        self.dequantize_value(self.quantize_value(f64::from(x)))
    }
}

/// Exponential-moving-average min/max observer (momentum 0.99); the first
/// batch initializes the range directly.
#[derive(Debug, Clone, Copy)]
pub struct EmaMinMax {
    pub min: f64,
    pub max: f64,
    pub momentum: f64,
    initialized: bool,
}

impl Default for EmaMinMax {
    fn default() -> Self {
        Self { min: 0.0, max: 0.0, momentum: 0.99, initialized: false }
    }
}

impl EmaMinMax {
    pub fn update(&mut self, batch_min: f64, batch_max: f64) {
        if self.initialized {
            self.min = self.momentum * self.min + (1.0 - self.momentum) * batch_min;
            self.max = self.momentum * self.max + (1.0 - self.momentum) * batch_max;
        } else {
            self.min = batch_min;
            self.max = batch_max;
            self.initialized = true;
        }
    }

    pub fn initialized(&self) -> bool {
        self.initialized
    }

    pub fn to_qparams(&self) -> QuantParams {
        QuantParams::affine_from_range(self.min, self.max)
    }
}

/// Symmetric fake-quantization of a weight tensor from its current max
/// magnitude. Returns the quantized-dequantized weights and the pass-through
/// gradient mask.
pub fn fake_quant_weights(w: &[f32]) -> (Vec<f32>, Vec<bool>, QuantParams) {
    let max_abs = w.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    let qp = QuantParams::symmetric_weight(max_abs);
    let mut out = Vec::with_capacity(w.len());
    let mut mask = Vec::with_capacity(w.len());
    for &v in w {
        out.push(qp.fake(v));
        mask.push(qp.in_range(f64::from(v)));
    }
    (out, mask, qp)
}

/// One activation fake-quant boundary.
#[derive(Debug, Clone, Default)]
pub struct ActFq {
    pub observer: EmaMinMax,
    mask: Vec<bool>,
}

impl ActFq {
    /// Training-mode pass: update the observer, fake-quantize in place and
    /// record the straight-through mask.
    fn train_forward(&mut self, x: &mut Tensor<f32>) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in x.data() {
            lo = lo.min(f64::from(v));
            hi = hi.max(f64::from(v));
        }
        self.observer.update(lo, hi);
        let qp = self.observer.to_qparams();
        self.mask.clear();
        self.mask.reserve(x.data().len());
        for v in x.data_mut() {
            self.mask.push(qp.in_range(f64::from(*v)));
            *v = qp.fake(*v);
        }
    }

    fn apply_frozen(&self, x: &mut Tensor<f32>) {
        if self.observer.initialized() {
            let qp = self.observer.to_qparams();
            for v in x.data_mut() {
                *v = qp.fake(*v);
            }
        }
    }

    /// Straight-through estimator: upstream gradient inside the clamp
    /// range, zero outside.
    fn backward_mask(&mut self, dx: &mut Tensor<f32>) {
        debug_assert_eq!(self.mask.len(), dx.data().len());
        for (d, &m) in dx.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *d = 0.0;
            }
        }
    }

    fn qparams(&self, name: &str) -> Result<QuantParams, QuantError> {
        if !self.observer.initialized() {
            return Err(QuantError::NotCalibrated(name.to_string()));
        }
        Ok(self.observer.to_qparams())
    }
}

/// Fake-quant state of one conv(+bn+act) unit.
#[derive(Debug, Clone, Default)]
pub struct UnitFq {
    pub conv_out: ActFq,
    pub act_out: Option<ActFq>,
    weight_mask: Vec<bool>,
    weight_stash: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Default)]
pub struct BlockFq {
    pub expand: Option<UnitFq>,
    pub depthwise: UnitFq,
    pub project: UnitFq,
    pub residual_out: Option<ActFq>,
}

/// The CNN wrapped for quantization-aware training: every conv/linear weight
/// and every activation boundary passes through quantize→dequantize in the
/// forward pass; gradients use the straight-through estimator.
#[derive(Debug, Clone)]
pub struct QatCnn {
    pub cnn: Cnn<f32>,
    pub input_fq: ActFq,
    pub affine_fq: ActFq,
    pub stem_fq: UnitFq,
    pub block_fq: Vec<BlockFq>,
    pub pool_fq: ActFq,
    classifier_mask: Vec<bool>,
    classifier_stash: Option<Vec<f32>>,
    /// When false the wrapper is a bit-exact pass-through to the float model.
    pub enabled: bool,
}

impl QatCnn {
    pub fn new(cnn: Cnn<f32>) -> Self {
        let block_fq = cnn
            .blocks
            .iter()
            .map(|b| BlockFq {
                expand: b.expand.as_ref().map(|_| UnitFq {
                    act_out: Some(ActFq::default()),
                    ..UnitFq::default()
                }),
                depthwise: UnitFq { act_out: Some(ActFq::default()), ..UnitFq::default() },
                project: UnitFq::default(),
                residual_out: b.residual.then(ActFq::default),
            })
            .collect();
        Self {
            cnn,
            input_fq: ActFq::default(),
            affine_fq: ActFq::default(),
            stem_fq: UnitFq { act_out: Some(ActFq::default()), ..UnitFq::default() },
            block_fq,
            pool_fq: ActFq::default(),
            classifier_mask: Vec::new(),
            classifier_stash: None,
            enabled: true,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cnn.config
    }

    fn swap_in_fq_weights(p: &mut Param<f32>, mask: &mut Vec<bool>, stash: &mut Option<Vec<f32>>) {
        let (wq, m, _) = fake_quant_weights(&p.data);
        *mask = m;
        *stash = Some(std::mem::replace(&mut p.data, wq));
    }

    fn restore_weights(p: &mut Param<f32>, mask: &[bool], stash: &mut Option<Vec<f32>>) {
        p.data = stash.take().expect("weights were swapped in forward");
        for (g, &m) in p.grad.iter_mut().zip(mask) {
            if !m {
                *g = 0.0;
            }
        }
    }

    fn unit_forward_train(cba: &mut ConvBnAct<f32>, ufq: &mut UnitFq, x: &Tensor<f32>) -> Tensor<f32> {
        Self::swap_in_fq_weights(&mut cba.conv.weight, &mut ufq.weight_mask, &mut ufq.weight_stash);
        let y = cba.bn.forward_train(&cba.conv.forward_train(x));
        let mut y = y;
        ufq.conv_out.train_forward(&mut y);
        if let (Some(act), Some(afq)) = (&mut cba.act, &mut ufq.act_out) {
            let mut z = act.forward_train(&y);
            afq.train_forward(&mut z);
            return z;
        }
        y
    }

    fn unit_backward(
        cba: &mut ConvBnAct<f32>,
        ufq: &mut UnitFq,
        dy: &Tensor<f32>,
    ) -> Result<Tensor<f32>, NnError> {
        let mut d = dy.clone();
        if let (Some(act), Some(afq)) = (&mut cba.act, &mut ufq.act_out) {
            afq.backward_mask(&mut d);
            d = act.backward(&d)?;
        }
        ufq.conv_out.backward_mask(&mut d);
        let d = cba.bn.backward(&d)?;
        let dx = cba.conv.backward(&d)?;
        Self::restore_weights(&mut cba.conv.weight, &ufq.weight_mask, &mut ufq.weight_stash);
        Ok(dx)
    }

    fn forward_train_qat(&mut self, x: &Tensor<f32>) -> Result<Tensor<f32>, NnError> {
        let mut x = x.clone();
        self.input_fq.train_forward(&mut x);
        let mut h = self.cnn.affine.forward_train(&x)?;
        self.affine_fq.train_forward(&mut h);
        h = Self::unit_forward_train(&mut self.cnn.stem, &mut self.stem_fq, &h);
        for (block, bfq) in self.cnn.blocks.iter_mut().zip(&mut self.block_fq) {
            let input = h.clone();
            let mut t = match (&mut block.expand, &mut bfq.expand) {
                (Some(e), Some(efq)) => Self::unit_forward_train(e, efq, &input),
                _ => input.clone(),
            };
            t = Self::unit_forward_train(&mut block.depthwise, &mut bfq.depthwise, &t);
            t = Self::unit_forward_train(&mut block.project, &mut bfq.project, &t);
            if let Some(rfq) = &mut bfq.residual_out {
                for (o, &i) in t.data_mut().iter_mut().zip(input.data()) {
                    *o += i;
                }
                rfq.train_forward(&mut t);
            }
            h = t;
        }
        let mut p = self.cnn.pool.forward_train(&h);
        self.pool_fq.train_forward(&mut p);
        Self::swap_in_fq_weights(
            &mut self.cnn.classifier.weight,
            &mut self.classifier_mask,
            &mut self.classifier_stash,
        );
        Ok(self.cnn.classifier.forward_train(&p))
    }

    fn backward_qat(&mut self, dlogits: &Tensor<f32>) -> Result<(), NnError> {
        let d = self.cnn.classifier.backward(dlogits)?;
        Self::restore_weights(
            &mut self.cnn.classifier.weight,
            &self.classifier_mask,
            &mut self.classifier_stash,
        );
        let mut d = d;
        self.pool_fq.backward_mask(&mut d);
        let mut d = self.cnn.pool.backward(&d)?;
        for (block, bfq) in self.cnn.blocks.iter_mut().zip(&mut self.block_fq).rev() {
            if let Some(rfq) = &mut bfq.residual_out {
                rfq.backward_mask(&mut d);
            }
            let skip = bfq.residual_out.is_some().then(|| d.clone());
            let mut t = Self::unit_backward(&mut block.project, &mut bfq.project, &d)?;
            t = Self::unit_backward(&mut block.depthwise, &mut bfq.depthwise, &t)?;
            if let (Some(e), Some(efq)) = (&mut block.expand, &mut bfq.expand) {
                t = Self::unit_backward(e, efq, &t)?;
            }
            if let Some(skip) = skip {
                for (o, &g) in t.data_mut().iter_mut().zip(skip.data()) {
                    *o += g;
                }
            }
            d = t;
        }
        let mut d = Self::unit_backward(&mut self.cnn.stem, &mut self.stem_fq, &d)?;
        self.affine_fq.backward_mask(&mut d);
        let mut d = self.cnn.affine.backward(&d)?;
        self.input_fq.backward_mask(&mut d);
        Ok(())
    }

    fn unit_infer(cba: &ConvBnAct<f32>, ufq: &UnitFq, x: &Tensor<f32>) -> Tensor<f32> {
        let (wq, _, _) = fake_quant_weights(&cba.conv.weight.data);
        let y = crate::nn::conv1d_forward(x, &wq, None, &cba.conv.spec);
        let mut y = cba.bn.infer(&y);
        ufq.conv_out.apply_frozen(&mut y);
        if let (Some(act), Some(afq)) = (&cba.act, &ufq.act_out) {
            let mut z = act.infer(&y);
            afq.apply_frozen(&mut z);
            return z;
        }
        y
    }

    /// Fake-quant forward in inference mode (frozen observers). Before any
    /// calibration every boundary is an identity, so this matches the float
    /// model bit-exactly.
    pub fn forward_fake_quant(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, NnError> {
        if !self.enabled {
            return self.cnn.infer_logits(x);
        }
        let mut x = x.clone();
        self.input_fq.apply_frozen(&mut x);
        let mut h = self.cnn.affine.infer(&x)?;
        self.affine_fq.apply_frozen(&mut h);
        h = Self::unit_infer(&self.cnn.stem, &self.stem_fq, &h);
        for (block, bfq) in self.cnn.blocks.iter().zip(&self.block_fq) {
            let input = h.clone();
            let mut t = match (&block.expand, &bfq.expand) {
                (Some(e), Some(efq)) => Self::unit_infer(e, efq, &input),
                _ => input.clone(),
            };
            t = Self::unit_infer(&block.depthwise, &bfq.depthwise, &t);
            t = Self::unit_infer(&block.project, &bfq.project, &t);
            if let Some(rfq) = &bfq.residual_out {
                for (o, &i) in t.data_mut().iter_mut().zip(input.data()) {
                    *o += i;
                }
                rfq.apply_frozen(&mut t);
            }
            h = t;
        }
        let mut p = self.cnn.pool.infer(&h);
        self.pool_fq.apply_frozen(&mut p);
        let (wq, _, _) = fake_quant_weights(&self.cnn.classifier.weight.data);
        Ok(crate::nn::linear_forward(
            &p,
            &wq,
            &self.cnn.classifier.bias.data,
            self.cnn.classifier.in_dim,
            self.cnn.classifier.out_dim,
        ))
    }

    /// Run forwards over sample windows to populate the activation ranges.
    pub fn calibrate(&mut self, windows: &[FusedWindow], batch_size: usize) -> Result<(), QuantError> {
        if windows.is_empty() {
            return Err(QuantError::NoData);
        }
        for chunk in windows.chunks(batch_size.max(1)) {
            let views: Vec<&[f32]> = chunk.iter().map(|w| w.values.as_slice()).collect();
            let x = Tensor::stack_windows(&views);
            self.forward_train_qat(&x)?;
        }
        Ok(())
    }
}

impl Trainable for QatCnn {
    fn input_width(&self) -> usize {
        self.cnn.config.input_width()
    }

    fn forward_backward(&mut self, x: &Tensor<f32>, targets: &[usize]) -> Result<f64, NnError> {
        if !self.enabled {
            let logits = self.cnn.forward_train(x)?;
            let (loss, dlogits) = cross_entropy_from_logits(&logits, targets);
            self.cnn.backward(&dlogits)?;
            return Ok(loss);
        }
        let logits = self.forward_train_qat(x)?;
        let (loss, dlogits) = cross_entropy_from_logits(&logits, targets);
        self.backward_qat(&dlogits)?;
        Ok(loss)
    }

    fn predict(&self, window: &[f32]) -> Result<Vec<f32>, NnError> {
        let x = Tensor::from_window(window);
        let logits = self.forward_fake_quant(&x)?;
        let row: Vec<f32> = (0..logits.channels()).map(|c| logits.row(0, c)[0]).collect();
        Ok(softmax(&row))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        let m = &mut self.cnn;
        f(&mut m.affine.params);
        let mut visit = |cba: &mut ConvBnAct<f32>| {
            f(&mut cba.conv.weight);
            f(&mut cba.bn.gamma);
            f(&mut cba.bn.beta);
        };
        visit(&mut m.stem);
        for b in &mut m.blocks {
            if let Some(e) = &mut b.expand {
                visit(e);
            }
            visit(&mut b.depthwise);
            visit(&mut b.project);
        }
        f(&mut m.classifier.weight);
        f(&mut m.classifier.bias);
    }
}

// ---------------------------------------------------------------------------
// Fixed-point requantization
// ---------------------------------------------------------------------------

/// A positive real multiplier as `multiplier * 2^-(31 + shift)` with
/// `multiplier` normalized into [2^30, 2^31). Representation error is below
/// 2^-30 relative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedMult {
    pub multiplier: i32,
    pub shift: i32,
}

impl FixedMult {
    pub fn from_real(m_real: f64) -> Self {
        assert!(m_real > 0.0 && m_real.is_finite(), "multiplier must be positive");
        let mut shift = 0i32;
        let mut m = m_real;
        while m < 0.5 {
            m *= 2.0;
            shift += 1;
        }
        while m >= 1.0 {
            m /= 2.0;
            shift -= 1;
        }
        let mut q = round_half_away(m * (1u64 << 31) as f64) as i64;
        if q == 1i64 << 31 {
            q >>= 1;
            shift -= 1;
        }
        let total = 31 + shift;
        assert!((1..=62).contains(&total), "multiplier {m_real} out of encodable range");
        Self { multiplier: q as i32, shift }
    }

    pub fn to_real(self) -> f64 {
        self.multiplier as f64 * 2f64.powi(-(31 + self.shift))
    }

    /// `round_half_away(acc * M)` in integer arithmetic, saturating at the
    /// i32 rails.
    #[inline]
    pub fn apply(self, acc: i32) -> i32 {
        let prod = i64::from(acc) * i64::from(self.multiplier);
        let total = 31 + self.shift;
        let half = 1i64 << (total - 1);
        let r = if prod >= 0 { (prod + half) >> total } else { -((-prod + half) >> total) };
        r.clamp(i64::from(i32::MIN), i64::from(i32::MAX)) as i32
    }
}

// ---------------------------------------------------------------------------
// Int8 model
// ---------------------------------------------------------------------------

/// Width-1-batch int8 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub channels: usize,
    pub width: usize,
    pub data: Vec<i8>,
}

impl QTensor {
    pub fn row(&self, c: usize) -> &[i8] {
        &self.data[c * self.width..(c + 1) * self.width]
    }
}

/// One folded conv unit in the int8 graph.
#[derive(Debug, Clone)]
pub struct QuantConvUnit {
    pub name: String,
    pub spec: ConvSpec,
    pub weight_q: Vec<i8>,
    pub weight_qp: QuantParams,
    /// int32 bias at scale in_scale * weight_scale.
    pub bias_q: Vec<i32>,
    pub in_qp: QuantParams,
    pub out_qp: QuantParams,
    pub requant: FixedMult,
    /// conv-out q -> activation-out q, when the unit has a nonlinearity.
    pub act_lut: Option<Box<[i8; 256]>>,
    pub act_out_qp: Option<QuantParams>,
}

impl QuantConvUnit {
    fn final_qp(&self) -> QuantParams {
        self.act_out_qp.unwrap_or(self.out_qp)
    }

    /// Exact real requantization multiplier (the fixed-point encoding
    /// approximates this).
    pub fn real_multiplier(&self) -> f64 {
        f64::from(self.in_qp.scale) * f64::from(self.weight_qp.scale) / f64::from(self.out_qp.scale)
    }

    /// Integer-only convolution: int32 accumulation, fixed-point requant,
    /// optional LUT nonlinearity. With `exact_multiplier` the requant step
    /// uses the real-valued multiplier instead of its fixed-point encoding
    /// (the float simulation of the same graph).
    pub fn forward_with(&self, x: &QTensor, exact_multiplier: bool) -> QTensor {
        let spec = &self.spec;
        debug_assert_eq!(x.channels, spec.in_ch);
        let out_w = spec.out_width(x.width);
        let (icpg, ocpg, k) = (spec.icpg(), spec.ocpg(), spec.kernel);
        let in_w = x.width as isize;
        let in_zp = self.in_qp.zero_point;
        let out_zp = self.out_qp.zero_point;
        let m_real = self.real_multiplier();

        let mut out = vec![0i8; spec.out_ch * out_w];
        for oc in 0..spec.out_ch {
            let g = oc / ocpg;
            let w_base = oc * icpg * k;
            for ow in 0..out_w {
                let origin = (ow * spec.stride) as isize - spec.padding as isize;
                let mut acc: i32 = self.bias_q[oc];
                for icl in 0..icpg {
                    let x_row = x.row(g * icpg + icl);
                    for kk in 0..k {
                        let iw = origin + kk as isize;
                        if iw >= 0 && iw < in_w {
                            let xv = i32::from(x_row[iw as usize]) - in_zp;
                            let wv = i32::from(self.weight_q[w_base + icl * k + kk]);
                            acc += xv * wv;
                        }
                    }
                }
                let r = if exact_multiplier {
                    round_half_away(f64::from(acc) * m_real) as i32
                } else {
                    self.requant.apply(acc)
                };
                let q = (r + out_zp).clamp(-128, 127) as i8;
                out[oc * out_w + ow] = match &self.act_lut {
                    Some(lut) => lut[(q as u8) as usize],
                    None => q,
                };
            }
        }
        QTensor { channels: spec.out_ch, width: out_w, data: out }
    }

    pub fn forward(&self, x: &QTensor) -> QTensor {
        self.forward_with(x, false)
    }

    /// Worst-case |int32 accumulator| bound: terms x max|x - zp| x max|w|
    /// plus the bias.
    fn worst_case_acc(&self) -> i64 {
        let terms = (self.spec.icpg() * self.spec.kernel) as i64;
        let max_x = (i64::from(self.in_qp.zero_point) + 128).max(127 - i64::from(self.in_qp.zero_point));
        let max_bias = self.bias_q.iter().map(|b| i64::from(b.unsigned_abs())).max().unwrap_or(0);
        terms * max_x * 128 + max_bias
    }
}

/// Elementwise per-half affine as two lookup tables.
#[derive(Debug, Clone)]
pub struct QuantAffine {
    pub in_qp: QuantParams,
    pub out_qp: QuantParams,
    pub lut_ecg: Box<[i8; 256]>,
    pub lut_pcg: Box<[i8; 256]>,
}

impl QuantAffine {
    fn forward(&self, x: &QTensor) -> QTensor {
        let half = x.width / 2;
        let mut data = Vec::with_capacity(x.data.len());
        for (i, &q) in x.data.iter().enumerate() {
            let lut = if i % x.width < half { &self.lut_ecg } else { &self.lut_pcg };
            data.push(lut[(q as u8) as usize]);
        }
        QTensor { channels: x.channels, width: x.width, data }
    }
}

/// Residual add with both operands rescaled to the output scale.
#[derive(Debug, Clone)]
pub struct QuantResidual {
    pub a_qp: QuantParams,
    pub b_qp: QuantParams,
    pub out_qp: QuantParams,
    pub m_a: FixedMult,
    pub m_b: FixedMult,
}

impl QuantResidual {
    fn forward_with(&self, a: &QTensor, b: &QTensor, exact: bool) -> QTensor {
        debug_assert_eq!(a.data.len(), b.data.len());
        let ma_real = f64::from(self.a_qp.scale) / f64::from(self.out_qp.scale);
        let mb_real = f64::from(self.b_qp.scale) / f64::from(self.out_qp.scale);
        let rescale = |m: FixedMult, m_real: f64, acc: i32| -> i32 {
            if exact {
                round_half_away(f64::from(acc) * m_real) as i32
            } else {
                m.apply(acc)
            }
        };
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&qa, &qb)| {
                let ra = rescale(self.m_a, ma_real, i32::from(qa) - self.a_qp.zero_point);
                let rb = rescale(self.m_b, mb_real, i32::from(qb) - self.b_qp.zero_point);
                (ra + rb + self.out_qp.zero_point).clamp(-128, 127) as i8
            })
            .collect();
        QTensor { channels: a.channels, width: a.width, data }
    }
}

#[derive(Debug, Clone)]
pub struct QuantBlock {
    pub expand: Option<QuantConvUnit>,
    pub depthwise: QuantConvUnit,
    pub project: QuantConvUnit,
    pub residual: Option<QuantResidual>,
}

#[derive(Debug, Clone)]
pub struct QuantPool {
    pub in_qp: QuantParams,
    pub out_qp: QuantParams,
    pub requant: FixedMult,
}

impl QuantPool {
    fn forward_with(&self, x: &QTensor, exact: bool) -> QTensor {
        let m_real =
            f64::from(self.in_qp.scale) / (x.width as f64 * f64::from(self.out_qp.scale));
        let data = (0..x.channels)
            .map(|c| {
                let acc: i32 = x.row(c).iter().map(|&q| i32::from(q) - self.in_qp.zero_point).sum();
                let r = if exact {
                    round_half_away(f64::from(acc) * m_real) as i32
                } else {
                    self.requant.apply(acc)
                };
                (r + self.out_qp.zero_point).clamp(-128, 127) as i8
            })
            .collect();
        QTensor { channels: x.channels, width: 1, data }
    }
}

#[derive(Debug, Clone)]
pub struct QuantLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_q: Vec<i8>,
    pub weight_qp: QuantParams,
    pub bias_q: Vec<i32>,
    pub in_qp: QuantParams,
}

impl QuantLinear {
    /// int32 accumulation, then dequantized float logits.
    fn forward(&self, x: &QTensor) -> Vec<f32> {
        debug_assert_eq!(x.channels, self.in_dim);
        let scale = self.in_qp.scale * self.weight_qp.scale;
        (0..self.out_dim)
            .map(|o| {
                let mut acc: i32 = self.bias_q[o];
                for i in 0..self.in_dim {
                    let xv = i32::from(x.data[i]) - self.in_qp.zero_point;
                    acc += xv * i32::from(self.weight_q[o * self.in_dim + i]);
                }
                acc as f32 * scale
            })
            .collect()
    }

    fn worst_case_acc(&self) -> i64 {
        let max_x = (i64::from(self.in_qp.zero_point) + 128).max(127 - i64::from(self.in_qp.zero_point));
        let max_bias = self.bias_q.iter().map(|b| i64::from(b.unsigned_abs())).max().unwrap_or(0);
        self.in_dim as i64 * max_x * 128 + max_bias
    }
}

/// The deployable int8 network: int8 weights, int32 biases, precomputed
/// requantization multipliers and activation LUTs.
#[derive(Debug, Clone)]
pub struct QuantModel {
    pub config: ModelConfig,
    pub input_qp: QuantParams,
    pub affine: QuantAffine,
    pub affine_params: [f32; 4],
    pub stem: QuantConvUnit,
    pub blocks: Vec<QuantBlock>,
    pub pool: QuantPool,
    pub classifier: QuantLinear,
}

fn build_act_lut(kind: ActivationKind, in_qp: QuantParams, out_qp: QuantParams) -> Box<[i8; 256]> {
    let mut lut = [0i8; 256];
    for (i, slot) in lut.iter_mut().enumerate() {
        let q = i as u8 as i8;
        let real = f64::from(in_qp.dequantize_value(q));
        *slot = out_qp.quantize_value(kind.apply(real));
    }
    Box::new(lut)
}

fn build_affine_lut(scale: f64, shift: f64, in_qp: QuantParams, out_qp: QuantParams) -> Box<[i8; 256]> {
    let mut lut = [0i8; 256];
    for (i, slot) in lut.iter_mut().enumerate() {
        let q = i as u8 as i8;
        let real = f64::from(in_qp.dequantize_value(q));
        *slot = out_qp.quantize_value(scale * real + shift);
    }
    Box::new(lut)
}

/// Fold batch norm (running statistics) into the preceding convolution:
/// returns per-output-channel folded weights and biases.
fn fold_bn(conv_w: &[f32], spec: &ConvSpec, bn: &BatchNorm1d<f32>) -> (Vec<f32>, Vec<f32>) {
    let per_oc = spec.icpg() * spec.kernel;
    let mut w = Vec::with_capacity(conv_w.len());
    let mut b = Vec::with_capacity(spec.out_ch);
    for oc in 0..spec.out_ch {
        let inv_std = 1.0 / (f64::from(bn.running_var[oc]) + bn.eps).sqrt();
        let g = f64::from(bn.gamma.data[oc]) * inv_std;
        for i in 0..per_oc {
            w.push((f64::from(conv_w[oc * per_oc + i]) * g) as f32);
        }
        b.push((f64::from(bn.beta.data[oc]) - g * f64::from(bn.running_mean[oc])) as f32);
    }
    (w, b)
}

fn quantize_bias(bias: &[f32], in_scale: f32, w_scale: f32) -> Vec<i32> {
    let s = f64::from(in_scale) * f64::from(w_scale);
    bias.iter()
        .map(|&b| round_half_away(f64::from(b) / s).clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32)
        .collect()
}

fn convert_unit(
    name: &str,
    cba: &ConvBnAct<f32>,
    ufq: &UnitFq,
    in_qp: QuantParams,
) -> Result<QuantConvUnit, QuantError> {
    let (w_folded, b_folded) = fold_bn(&cba.conv.weight.data, &cba.conv.spec, &cba.bn);
    let max_abs = w_folded.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    let weight_qp = QuantParams::symmetric_weight(max_abs);
    let weight_q = weight_qp.quantize_tensor(&w_folded);
    let bias_q = quantize_bias(&b_folded, in_qp.scale, weight_qp.scale);
    let out_qp = ufq.conv_out.qparams(&format!("{name}.conv_out"))?;
    let requant = FixedMult::from_real(
        f64::from(in_qp.scale) * f64::from(weight_qp.scale) / f64::from(out_qp.scale),
    );
    let (act_lut, act_out_qp) = match (&cba.act, &ufq.act_out) {
        (Some(act), Some(afq)) => {
            let aqp = afq.qparams(&format!("{name}.act_out"))?;
            (Some(build_act_lut(act.kind, out_qp, aqp)), Some(aqp))
        }
        _ => (None, None),
    };
    Ok(QuantConvUnit {
        name: name.to_string(),
        spec: cba.conv.spec,
        weight_q,
        weight_qp,
        bias_q,
        in_qp,
        out_qp,
        requant,
        act_lut,
        act_out_qp,
    })
}

/// Convert a calibrated QAT model into the int8 deployment form.
pub fn quantize_model(qat: &QatCnn) -> Result<QuantModel, QuantError> {
    let cnn = &qat.cnn;
    let input_qp = qat.input_fq.qparams("input")?;
    let affine_out_qp = qat.affine_fq.qparams("affine")?;
    let ap = &cnn.affine.params.data;
    let affine = QuantAffine {
        in_qp: input_qp,
        out_qp: affine_out_qp,
        lut_ecg: build_affine_lut(f64::from(ap[0]), f64::from(ap[1]), input_qp, affine_out_qp),
        lut_pcg: build_affine_lut(f64::from(ap[2]), f64::from(ap[3]), input_qp, affine_out_qp),
    };

    let stem = convert_unit("stem", &cnn.stem, &qat.stem_fq, affine_out_qp)?;
    let mut boundary_qp = stem.final_qp();

    let mut blocks = Vec::with_capacity(cnn.blocks.len());
    for (i, (block, bfq)) in cnn.blocks.iter().zip(&qat.block_fq).enumerate() {
        let block_in_qp = boundary_qp;
        let expand = match (&block.expand, &bfq.expand) {
            (Some(e), Some(efq)) => Some(convert_unit(&format!("block{i}.expand"), e, efq, block_in_qp)?),
            _ => None,
        };
        let dw_in = expand.as_ref().map_or(block_in_qp, |u| u.final_qp());
        let depthwise = convert_unit(&format!("block{i}.dw"), &block.depthwise, &bfq.depthwise, dw_in)?;
        let project =
            convert_unit(&format!("block{i}.project"), &block.project, &bfq.project, depthwise.final_qp())?;
        let residual = match &bfq.residual_out {
            Some(rfq) => {
                let out_qp = rfq.qparams(&format!("block{i}.residual"))?;
                let a_qp = project.final_qp();
                Some(QuantResidual {
                    a_qp,
                    b_qp: block_in_qp,
                    out_qp,
                    m_a: FixedMult::from_real(f64::from(a_qp.scale) / f64::from(out_qp.scale)),
                    m_b: FixedMult::from_real(f64::from(block_in_qp.scale) / f64::from(out_qp.scale)),
                })
            }
            None => None,
        };
        boundary_qp = residual.as_ref().map_or(project.final_qp(), |r| r.out_qp);
        blocks.push(QuantBlock { expand, depthwise, project, residual });
    }

    let pool_out_qp = qat.pool_fq.qparams("pool")?;
    let pool = QuantPool {
        in_qp: boundary_qp,
        out_qp: pool_out_qp,
        requant: FixedMult::from_real(
            f64::from(boundary_qp.scale) / (cnn.config.stem_out_width() as f64 * f64::from(pool_out_qp.scale)),
        ),
    };

    let (wq, _, weight_qp) = fake_quant_weights(&cnn.classifier.weight.data);
    let _ = wq;
    let weight_q = weight_qp.quantize_tensor(&cnn.classifier.weight.data);
    let classifier = QuantLinear {
        in_dim: cnn.classifier.in_dim,
        out_dim: cnn.classifier.out_dim,
        weight_q,
        weight_qp,
        bias_q: quantize_bias(&cnn.classifier.bias.data, pool_out_qp.scale, weight_qp.scale),
        in_qp: pool_out_qp,
    };

    let model = QuantModel {
        config: cnn.config.clone(),
        input_qp,
        affine_params: [ap[0], ap[1], ap[2], ap[3]],
        affine,
        stem,
        blocks,
        pool,
        classifier,
    };
    model.audit_accumulators()?;
    Ok(model)
}

impl QuantModel {
    /// Quantize a float window with the input parameters.
    pub fn quantize_input(&self, window: &[f32]) -> QTensor {
        QTensor {
            channels: 1,
            width: window.len(),
            data: self.input_qp.quantize_tensor(window),
        }
    }

    fn forward_q(&self, x: &QTensor, exact: bool) -> Vec<f32> {
        let mut h = self.affine.forward(x);
        h = self.stem.forward_with(&h, exact);
        for block in &self.blocks {
            let input = h.clone();
            let mut t = match &block.expand {
                Some(e) => e.forward_with(&input, exact),
                None => input.clone(),
            };
            t = block.depthwise.forward_with(&t, exact);
            t = block.project.forward_with(&t, exact);
            if let Some(r) = &block.residual {
                t = r.forward_with(&t, &input, exact);
            }
            h = t;
        }
        let p = self.pool.forward_with(&h, exact);
        self.classifier.forward(&p)
    }

    fn check_width(&self, window: &[f32]) -> Result<(), NnError> {
        if window.len() != self.config.input_width() {
            return Err(NnError::ShapeMismatch {
                expected: format!("1x1x{}", self.config.input_width()),
                actual: format!("1x1x{}", window.len()),
            });
        }
        Ok(())
    }

    /// Dequantized logits of the integer-only path.
    pub fn logits(&self, window: &[f32]) -> Result<Vec<f32>, NnError> {
        self.check_width(window)?;
        Ok(self.forward_q(&self.quantize_input(window), false))
    }

    /// Logits of the float simulation of the same quantized graph: identical
    /// boundaries and rounding points, but exact real multipliers instead of
    /// their fixed-point encodings.
    pub fn simulate_logits(&self, window: &[f32]) -> Result<Vec<f32>, NnError> {
        self.check_width(window)?;
        Ok(self.forward_q(&self.quantize_input(window), true))
    }

    /// The size of one logit step: input and weight scale of the final
    /// linear layer.
    pub fn logit_scale(&self) -> f32 {
        self.classifier.in_qp.scale * self.classifier.weight_qp.scale
    }

    /// Integer-only inference: probabilities via dequantized logits and a
    /// float softmax.
    pub fn predict(&self, window: &[f32]) -> Result<Vec<f32>, NnError> {
        Ok(softmax(&self.logits(window)?))
    }

    /// Static audit: every int32 accumulator stays below 2^31 in the worst
    /// case (max terms per accumulation x max |product| + bias).
    pub fn audit_accumulators(&self) -> Result<Vec<(String, i64)>, QuantError> {
        let mut report = Vec::new();
        let mut check = |name: &str, worst: i64| -> Result<(), QuantError> {
            report.push((name.to_string(), worst));
            if worst >= i64::from(i32::MAX) {
                return Err(QuantError::AccumulatorOverflow {
                    layer: name.to_string(),
                    worst_case: worst,
                });
            }
            Ok(())
        };
        check(&self.stem.name.clone(), self.stem.worst_case_acc())?;
        for b in &self.blocks {
            if let Some(e) = &b.expand {
                check(&e.name.clone(), e.worst_case_acc())?;
            }
            check(&b.depthwise.name.clone(), b.depthwise.worst_case_acc())?;
            check(&b.project.name.clone(), b.project.worst_case_acc())?;
        }
        check("classifier", self.classifier.worst_case_acc())?;
        Ok(report)
    }
}

pub mod bundle {
    //! Self-contained quantized weight streams: the QAT float model (with
    //! batch-norm state), the activation quantization parameters per
    //! boundary, and the int8 payloads. Lookup tables and fixed-point
    //! multipliers are recomputed from the stored scales on load, so a
    //! save/load/save round trip is byte-identical.

    use super::*;
    use crate::model::weights::{self, Payload, Record};
    use crate::model::{Model, ModelArch};
    use crate::util::fnv1a;

    pub fn quant_config_hash(cfg: &ModelConfig) -> u64 {
        let text = format!("{}quantized=1\n", cfg.canonical_text());
        fnv1a(text.as_bytes())
    }

    fn qp_record(name: &str, qp: QuantParams) -> Record {
        Record::f32(name, vec![2], vec![qp.scale, qp.zero_point as f32])
    }

    fn qp_from_record(rec: &Record, name: &str, scheme: QuantScheme) -> Result<QuantParams, QuantError> {
        let bad = |msg: String| QuantError::Model(ModelError::BadRecord(msg));
        if rec.name != name {
            return Err(bad(format!("expected record `{name}`, stream has `{}`", rec.name)));
        }
        let values = rec
            .f32_values()
            .ok_or_else(|| bad(format!("record `{name}` has wrong dtype")))?;
        if values.len() != 2 || !values[0].is_finite() || values[0] <= 0.0 {
            return Err(bad(format!("record `{name}` is not a quantization parameter pair")));
        }
        let zero_point = values[1] as i32;
        if !(-128..=127).contains(&zero_point) {
            return Err(bad(format!("record `{name}` zero point out of range")));
        }
        Ok(QuantParams { scale: values[0], zero_point, scheme })
    }

    /// Invert [`QuantParams::affine_from_range`]: reconstruct observer
    /// bounds that map back to exactly these parameters.
    fn observer_from_qp(qp: QuantParams) -> EmaMinMax {
        let s = f64::from(qp.scale);
        let mut obs = EmaMinMax::default();
        obs.update(s * f64::from(-128 - qp.zero_point), s * f64::from(127 - qp.zero_point));
        obs
    }

    fn unit_records(out: &mut Vec<Record>, unit: &QuantConvUnit) {
        let name = &unit.name;
        out.push(Record::i8(
            format!("int8.{name}.weight"),
            vec![unit.spec.out_ch, unit.spec.icpg(), unit.spec.kernel],
            unit.weight_q.clone(),
            unit.weight_qp.scale,
            unit.weight_qp.zero_point,
        ));
        out.push(Record::f32(
            format!("int8.{name}.bias"),
            vec![unit.bias_q.len()],
            unit.bias_q.iter().map(|&b| b as f32).collect(),
        ));
        out.push(qp_record(&format!("qp.{name}.conv_out"), unit.out_qp));
        if let Some(aqp) = unit.act_out_qp {
            out.push(qp_record(&format!("qp.{name}.act_out"), aqp));
        }
    }

    /// Serialize a converted model together with its QAT source.
    pub fn save(qat: &QatCnn, qm: &QuantModel) -> Vec<u8> {
        let mut model = Model::Cnn(qat.cnn.clone());
        let mut records = weights::model_records(&mut model);

        records.push(qp_record("qp.input", qm.input_qp));
        records.push(qp_record("qp.affine", qm.affine.out_qp));
        unit_records(&mut records, &qm.stem);
        for (i, b) in qm.blocks.iter().enumerate() {
            if let Some(e) = &b.expand {
                unit_records(&mut records, e);
            }
            unit_records(&mut records, &b.depthwise);
            unit_records(&mut records, &b.project);
            if let Some(r) = &b.residual {
                records.push(qp_record(&format!("qp.block{i}.residual"), r.out_qp));
            }
        }
        records.push(qp_record("qp.pool", qm.pool.out_qp));
        records.push(Record::i8(
            "int8.classifier.weight",
            vec![qm.classifier.out_dim, qm.classifier.in_dim],
            qm.classifier.weight_q.clone(),
            qm.classifier.weight_qp.scale,
            qm.classifier.weight_qp.zero_point,
        ));
        records.push(Record::f32(
            "int8.classifier.bias",
            vec![qm.classifier.bias_q.len()],
            qm.classifier.bias_q.iter().map(|&b| b as f32).collect(),
        ));

        weights::write_stream(quant_config_hash(&qm.config), &records)
    }

    struct RecordCursor {
        records: std::vec::IntoIter<Record>,
    }

    impl RecordCursor {
        fn next(&mut self, name: &str) -> Result<Record, QuantError> {
            self.records.next().ok_or_else(|| {
                QuantError::Model(ModelError::BadRecord(format!("missing record `{name}`")))
            })
        }

        fn qp(&mut self, name: &str) -> Result<QuantParams, QuantError> {
            qp_from_record(&self.next(name)?, name, QuantScheme::AffineActivation)
        }

        fn i8_payload(&mut self, name: &str, numel: usize) -> Result<(Vec<i8>, QuantParams), QuantError> {
            let bad = |msg: String| QuantError::Model(ModelError::BadRecord(msg));
            let rec = self.next(name)?;
            if rec.name != name {
                return Err(bad(format!("expected record `{name}`, stream has `{}`", rec.name)));
            }
            match rec.payload {
                Payload::I8 { values, scale, zero_point } => {
                    if values.len() != numel {
                        return Err(bad(format!("record `{name}` has wrong element count")));
                    }
                    if !(scale.is_finite() && scale > 0.0) || zero_point != 0 {
                        return Err(bad(format!("record `{name}` has invalid weight parameters")));
                    }
                    Ok((values, QuantParams { scale, zero_point, scheme: QuantScheme::SymmetricWeight }))
                }
                Payload::F32(_) => Err(bad(format!("record `{name}` has wrong dtype"))),
            }
        }

        fn bias(&mut self, name: &str, numel: usize) -> Result<Vec<i32>, QuantError> {
            let bad = |msg: String| QuantError::Model(ModelError::BadRecord(msg));
            let rec = self.next(name)?;
            if rec.name != name {
                return Err(bad(format!("expected record `{name}`, stream has `{}`", rec.name)));
            }
            let values = rec
                .f32_values()
                .ok_or_else(|| bad(format!("record `{name}` has wrong dtype")))?;
            if values.len() != numel {
                return Err(bad(format!("record `{name}` has wrong element count")));
            }
            values
                .iter()
                .map(|&v| {
                    if v.is_finite() && v.abs() < 2f32.powi(24) && v.fract() == 0.0 {
                        Ok(v as i32)
                    } else {
                        Err(bad(format!("record `{name}` is not an int32 bias")))
                    }
                })
                .collect()
        }

        fn unit(
            &mut self,
            name: &str,
            spec: ConvSpec,
            in_qp: QuantParams,
            act: Option<ActivationKind>,
        ) -> Result<QuantConvUnit, QuantError> {
            let (weight_q, weight_qp) =
                self.i8_payload(&format!("int8.{name}.weight"), spec.weight_numel())?;
            let bias_q = self.bias(&format!("int8.{name}.bias"), spec.out_ch)?;
            let out_qp = self.qp(&format!("qp.{name}.conv_out"))?;
            let requant = FixedMult::from_real(
                f64::from(in_qp.scale) * f64::from(weight_qp.scale) / f64::from(out_qp.scale),
            );
            let (act_lut, act_out_qp) = match act {
                Some(kind) => {
                    let aqp = self.qp(&format!("qp.{name}.act_out"))?;
                    (Some(build_act_lut(kind, out_qp, aqp)), Some(aqp))
                }
                None => (None, None),
            };
            Ok(QuantConvUnit {
                name: name.to_string(),
                spec,
                weight_q,
                weight_qp,
                bias_q,
                in_qp,
                out_qp,
                requant,
                act_lut,
                act_out_qp,
            })
        }
    }

    /// Load a bundle produced by [`save`].
    pub fn load(data: &[u8], cfg: &ModelConfig) -> Result<(QatCnn, QuantModel), QuantError> {
        let (hash, records) = weights::read_stream(data)?;
        let expected = quant_config_hash(cfg);
        if hash != expected {
            return Err(QuantError::Model(ModelError::ConfigHashMismatch {
                stream: hash,
                expected,
            }));
        }

        // Leading records are the float QAT model.
        let mut model = ModelArch::Cnn(cfg.clone()).build::<f32>(0)?;
        let n_model = weights::model_records(&mut model).len();
        if records.len() < n_model {
            return Err(QuantError::Model(ModelError::TruncatedStream));
        }
        let mut records = records;
        let quant_records = records.split_off(n_model);
        weights::apply_records(&mut model, records)?;
        let cnn = match model {
            Model::Cnn(c) => c,
            Model::Mlp(_) => unreachable!("arch is cnn"),
        };

        let mut cur = RecordCursor { records: quant_records.into_iter() };
        let input_qp = cur.qp("qp.input")?;
        let affine_out_qp = cur.qp("qp.affine")?;
        let ap = [
            cnn.affine.params.data[0],
            cnn.affine.params.data[1],
            cnn.affine.params.data[2],
            cnn.affine.params.data[3],
        ];
        let affine = QuantAffine {
            in_qp: input_qp,
            out_qp: affine_out_qp,
            lut_ecg: build_affine_lut(f64::from(ap[0]), f64::from(ap[1]), input_qp, affine_out_qp),
            lut_pcg: build_affine_lut(f64::from(ap[2]), f64::from(ap[3]), input_qp, affine_out_qp),
        };

        let stem = cur.unit("stem", cfg.stem_spec(), affine_out_qp, Some(ActivationKind::HardSwish))?;
        let mut boundary_qp = stem.final_qp();
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for (i, spec) in cfg.blocks.iter().enumerate() {
            let block_in_qp = boundary_qp;
            let expand = if spec.has_expand() {
                Some(cur.unit(
                    &format!("block{i}.expand"),
                    spec.expand_spec(),
                    block_in_qp,
                    Some(spec.nonlin),
                )?)
            } else {
                None
            };
            let dw_in = expand.as_ref().map_or(block_in_qp, |u| u.final_qp());
            let depthwise =
                cur.unit(&format!("block{i}.dw"), spec.depthwise_spec(), dw_in, Some(spec.nonlin))?;
            let project =
                cur.unit(&format!("block{i}.project"), spec.project_spec(), depthwise.final_qp(), None)?;
            let residual = if spec.has_residual() {
                let out_qp = cur.qp(&format!("qp.block{i}.residual"))?;
                let a_qp = project.final_qp();
                Some(QuantResidual {
                    a_qp,
                    b_qp: block_in_qp,
                    out_qp,
                    m_a: FixedMult::from_real(f64::from(a_qp.scale) / f64::from(out_qp.scale)),
                    m_b: FixedMult::from_real(f64::from(block_in_qp.scale) / f64::from(out_qp.scale)),
                })
            } else {
                None
            };
            boundary_qp = residual.as_ref().map_or(project.final_qp(), |r| r.out_qp);
            blocks.push(QuantBlock { expand, depthwise, project, residual });
        }

        let pool_out_qp = cur.qp("qp.pool")?;
        let pool = QuantPool {
            in_qp: boundary_qp,
            out_qp: pool_out_qp,
            requant: FixedMult::from_real(
                f64::from(boundary_qp.scale)
                    / (cfg.stem_out_width() as f64 * f64::from(pool_out_qp.scale)),
            ),
        };

        let in_dim = cfg.classifier_in();
        let (weight_q, weight_qp) =
            cur.i8_payload("int8.classifier.weight", cfg.n_classes * in_dim)?;
        let bias_q = cur.bias("int8.classifier.bias", cfg.n_classes)?;
        let classifier = QuantLinear {
            in_dim,
            out_dim: cfg.n_classes,
            weight_q,
            weight_qp,
            bias_q,
            in_qp: pool_out_qp,
        };

        let qm = QuantModel {
            config: cfg.clone(),
            input_qp,
            affine_params: ap,
            affine,
            stem,
            blocks,
            pool,
            classifier,
        };

        // Rebuild the QAT wrapper with observers frozen at the stored
        // boundaries so its fake-quant forward reproduces the saved model.
        let mut qat = QatCnn::new(cnn);
        qat.input_fq.observer = observer_from_qp(qm.input_qp);
        qat.affine_fq.observer = observer_from_qp(qm.affine.out_qp);
        let restore_unit = |ufq: &mut UnitFq, unit: &QuantConvUnit| {
            ufq.conv_out.observer = observer_from_qp(unit.out_qp);
            if let (Some(afq), Some(aqp)) = (&mut ufq.act_out, unit.act_out_qp) {
                afq.observer = observer_from_qp(aqp);
            }
        };
        restore_unit(&mut qat.stem_fq, &qm.stem);
        for (bfq, qb) in qat.block_fq.iter_mut().zip(&qm.blocks) {
            if let (Some(efq), Some(e)) = (&mut bfq.expand, &qb.expand) {
                restore_unit(efq, e);
            }
            restore_unit(&mut bfq.depthwise, &qb.depthwise);
            restore_unit(&mut bfq.project, &qb.project);
            if let (Some(rfq), Some(r)) = (&mut bfq.residual_out, &qb.residual) {
                rfq.observer = observer_from_qp(r.out_qp);
            }
        }
        qat.pool_fq.observer = observer_from_qp(qm.pool.out_qp);

        Ok((qat, qm))
    }
}
