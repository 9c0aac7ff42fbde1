//! The numerical kernels behind the layers: direct-sum convolution (cross-
//! correlation, zero padding, grouped), batch normalization, elementwise
//! activations, pooling, the affine map and stable softmax/cross-entropy.
//! Forward and backward are plain loops; the ordering is fixed so results
//! are bit-deterministic.

use super::{Scalar, Tensor};

/// Convolution geometry. `groups == 1` is a dense convolution; `groups ==
/// in_ch == out_ch` is depthwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn out_width(&self, in_width: usize) -> usize {
        (in_width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// in-channels per group.
    pub fn icpg(&self) -> usize {
        self.in_ch / self.groups
    }

    /// out-channels per group.
    pub fn ocpg(&self) -> usize {
        self.out_ch / self.groups
    }

    /// Weight element count: (out_ch, in_ch/groups, kernel).
    pub fn weight_numel(&self) -> usize {
        self.out_ch * self.icpg() * self.kernel
    }

    pub fn validate(&self, in_width: usize) {
        assert!(self.groups >= 1 && self.in_ch % self.groups == 0 && self.out_ch % self.groups == 0,
            "groups must divide in_ch and out_ch");
        assert!(self.stride >= 1, "stride must be >= 1");
        assert!(
            in_width + 2 * self.padding >= self.kernel,
            "input width {} + 2*padding {} shorter than kernel {}",
            in_width, self.padding, self.kernel
        );
    }
}

/// Output positions for one kernel tap: the `ow` range where
/// `ow*stride + kk - padding` stays inside the input, plus the first input
/// index it touches. The tight loops below run branch-free over this range.
#[inline]
fn tap_range(kk: usize, spec: &ConvSpec, in_w: usize, out_w: usize) -> Option<(usize, usize, usize)> {
    let off = kk as isize - spec.padding as isize;
    let ow_lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(spec.stride) };
    let hi_num = in_w as isize - 1 - off;
    if hi_num < 0 {
        return None;
    }
    let ow_hi = ((hi_num as usize) / spec.stride).min(out_w - 1);
    if ow_lo > ow_hi {
        return None;
    }
    let x_start = (ow_lo * spec.stride) as isize + off;
    Some((ow_lo, ow_hi, x_start as usize))
}

pub fn conv1d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &[S],
    bias: Option<&[S]>,
    spec: &ConvSpec,
) -> Tensor<S> {
    assert_eq!(x.channels(), spec.in_ch, "conv input channel mismatch");
    spec.validate(x.width());
    let in_w = x.width();
    let out_w = spec.out_width(in_w);
    let (icpg, ocpg, k) = (spec.icpg(), spec.ocpg(), spec.kernel);
    let mut y = Tensor::zeros(x.batch(), spec.out_ch, out_w);

    for b in 0..x.batch() {
        for oc in 0..spec.out_ch {
            let g = oc / ocpg;
            let w_base = oc * icpg * k;
            let out_row = y.row_mut(b, oc);
            if let Some(bv) = bias {
                out_row.fill(bv[oc]);
            }
            for icl in 0..icpg {
                let x_row = x.row(b, g * icpg + icl);
                for kk in 0..k {
                    let wv = weight[w_base + icl * k + kk];
                    let Some((ow_lo, ow_hi, x_start)) = tap_range(kk, spec, in_w, out_w) else {
                        continue;
                    };
                    let len = ow_hi - ow_lo + 1;
                    if spec.stride == 1 {
                        let xs = &x_row[x_start..x_start + len];
                        for (o, &xv) in out_row[ow_lo..ow_lo + len].iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    } else {
                        for (i, o) in out_row[ow_lo..=ow_hi].iter_mut().enumerate() {
                            *o += wv * x_row[x_start + i * spec.stride];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients of [`conv1d_forward`]: returns dx and accumulates into
/// `dweight`/`dbias` (so batched steps can reuse the buffers).
pub fn conv1d_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &[S],
    spec: &ConvSpec,
    dy: &Tensor<S>,
    dweight: &mut [S],
    mut dbias: Option<&mut [S]>,
) -> Tensor<S> {
    let in_w = x.width();
    let out_w = dy.width();
    let (icpg, ocpg, k) = (spec.icpg(), spec.ocpg(), spec.kernel);
    let mut dx = Tensor::zeros(x.batch(), x.channels(), x.width());

    for b in 0..x.batch() {
        for oc in 0..spec.out_ch {
            let g = oc / ocpg;
            let w_base = oc * icpg * k;
            let dy_row = dy.row(b, oc).to_vec();
            if let Some(db) = dbias.as_deref_mut() {
                db[oc] += dy_row.iter().copied().sum();
            }
            for icl in 0..icpg {
                let ic = g * icpg + icl;
                let x_row = x.row(b, ic).to_vec();
                let dx_row = dx.row_mut(b, ic);
                for kk in 0..k {
                    let Some((ow_lo, ow_hi, x_start)) = tap_range(kk, spec, in_w, out_w) else {
                        continue;
                    };
                    let len = ow_hi - ow_lo + 1;
                    let wv = weight[w_base + icl * k + kk];
                    let mut wgrad = S::zero();
                    if spec.stride == 1 {
                        let dys = &dy_row[ow_lo..ow_lo + len];
                        let xs = &x_row[x_start..x_start + len];
                        let dxs = &mut dx_row[x_start..x_start + len];
                        for ((&d, &xv), dxv) in dys.iter().zip(xs).zip(dxs) {
                            wgrad += d * xv;
                            *dxv += wv * d;
                        }
                    } else {
                        for (i, &d) in dy_row[ow_lo..=ow_hi].iter().enumerate() {
                            let iw = x_start + i * spec.stride;
                            wgrad += d * x_row[iw];
                            dx_row[iw] += wv * d;
                        }
                    }
                    dweight[w_base + icl * k + kk] += wgrad;
                }
            }
        }
    }
    dx
}

/// Cache produced by the training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnCache<S> {
    pub x_hat: Tensor<S>,
    pub inv_std: Vec<S>,
}

/// Batch statistics (population variance) per channel over batch x width.
pub fn batch_stats<S: Scalar>(x: &Tensor<S>) -> (Vec<S>, Vec<S>) {
    let m = S::from_f64((x.batch() * x.width()) as f64);
    let mut mean = vec![S::zero(); x.channels()];
    let mut var = vec![S::zero(); x.channels()];
    for c in 0..x.channels() {
        let mut sum = S::zero();
        for b in 0..x.batch() {
            for &v in x.row(b, c) {
                sum += v;
            }
        }
        mean[c] = sum / m;
        let mut sq = S::zero();
        for b in 0..x.batch() {
            for &v in x.row(b, c) {
                let d = v - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / m;
    }
    (mean, var)
}

pub fn batchnorm_forward_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    eps: f64,
) -> (Tensor<S>, Vec<S>, Vec<S>, BnCache<S>) {
    let (mean, var) = batch_stats(x);
    let inv_std: Vec<S> = var
        .iter()
        .map(|&v| S::one() / (v + S::from_f64(eps)).sqrt())
        .collect();
    let mut x_hat = Tensor::zeros(x.batch(), x.channels(), x.width());
    let mut y = Tensor::zeros(x.batch(), x.channels(), x.width());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let xr = x.row(b, c);
            let xh = x_hat.row_mut(b, c);
            for (h, &v) in xh.iter_mut().zip(xr) {
                *h = (v - mean[c]) * inv_std[c];
            }
        }
        for c in 0..x.channels() {
            let xh: Vec<S> = x_hat.row(b, c).to_vec();
            let yr = y.row_mut(b, c);
            for (o, h) in yr.iter_mut().zip(xh) {
                *o = gamma[c] * h + beta[c];
            }
        }
    }
    (y, mean, var, BnCache { x_hat, inv_std })
}

pub fn batchnorm_forward_infer<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
    eps: f64,
) -> Tensor<S> {
    let mut y = Tensor::zeros(x.batch(), x.channels(), x.width());
    for c in 0..x.channels() {
        let inv_std = S::one() / (running_var[c] + S::from_f64(eps)).sqrt();
        let scale = gamma[c] * inv_std;
        let shift = beta[c] - scale * running_mean[c];
        for b in 0..x.batch() {
            let xr = x.row(b, c);
            let yr = y.row_mut(b, c);
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = scale * v + shift;
            }
        }
    }
    y
}

pub fn batchnorm_backward<S: Scalar>(
    dy: &Tensor<S>,
    cache: &BnCache<S>,
    gamma: &[S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) -> Tensor<S> {
    let x_hat = &cache.x_hat;
    let m = S::from_f64((dy.batch() * dy.width()) as f64);
    let mut dx = Tensor::zeros(dy.batch(), dy.channels(), dy.width());

    for c in 0..dy.channels() {
        let mut sum_dy = S::zero();
        let mut sum_dy_xhat = S::zero();
        for b in 0..dy.batch() {
            for (&d, &h) in dy.row(b, c).iter().zip(x_hat.row(b, c)) {
                sum_dy += d;
                sum_dy_xhat += d * h;
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;

        let scale = gamma[c] * cache.inv_std[c];
        for b in 0..dy.batch() {
            let dyr = dy.row(b, c);
            let xhr = x_hat.row(b, c);
            let dxr = dx.row_mut(b, c);
            for i in 0..dyr.len() {
                dxr[i] = scale * (dyr[i] - sum_dy / m - xhr[i] * sum_dy_xhat / m);
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Relu6,
    HardSwish,
}

impl ActivationKind {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        let zero = S::zero();
        match self {
            ActivationKind::Relu => x.max(zero),
            ActivationKind::Relu6 => x.max(zero).min(S::from_f64(6.0)),
            ActivationKind::HardSwish => {
                let six = S::from_f64(6.0);
                let three = S::from_f64(3.0);
                x * (x + three).max(zero).min(six) / six
            }
        }
    }

    /// Derivative at the pre-activation value (subgradient at kinks).
    #[inline]
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        let zero = S::zero();
        let one = S::one();
        match self {
            ActivationKind::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            ActivationKind::Relu6 => {
                if x > zero && x < S::from_f64(6.0) {
                    one
                } else {
                    zero
                }
            }
            ActivationKind::HardSwish => {
                let three = S::from_f64(3.0);
                if x <= -three {
                    zero
                } else if x >= three {
                    one
                } else {
                    (S::from_f64(2.0) * x + three) / S::from_f64(6.0)
                }
            }
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::Relu6 => write!(f, "relu6"),
            ActivationKind::HardSwish => write!(f, "hardswish"),
        }
    }
}

pub fn global_avg_pool_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let w = S::from_f64(x.width() as f64);
    let mut y = Tensor::zeros(x.batch(), x.channels(), 1);
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let sum: S = x.row(b, c).iter().copied().sum();
            y.row_mut(b, c)[0] = sum / w;
        }
    }
    y
}

pub fn global_avg_pool_backward<S: Scalar>(dy: &Tensor<S>, in_width: usize) -> Tensor<S> {
    let w = S::from_f64(in_width as f64);
    let mut dx = Tensor::zeros(dy.batch(), dy.channels(), in_width);
    for b in 0..dy.batch() {
        for c in 0..dy.channels() {
            let g = dy.row(b, c)[0] / w;
            dx.row_mut(b, c).fill(g);
        }
    }
    dx
}

/// Affine map on a (n, in) input laid out as (n, in, 1): y = W x + b with
/// W stored row-major (out, in).
pub fn linear_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &[S],
    bias: &[S],
    in_dim: usize,
    out_dim: usize,
) -> Tensor<S> {
    assert_eq!(x.channels(), in_dim, "linear input dim mismatch");
    assert_eq!(x.width(), 1, "linear expects width-1 input");
    let mut y = Tensor::zeros(x.batch(), out_dim, 1);
    for b in 0..x.batch() {
        for o in 0..out_dim {
            let mut acc = bias[o];
            let wrow = &weight[o * in_dim..(o + 1) * in_dim];
            for (i, &wv) in wrow.iter().enumerate() {
                acc += wv * x.row(b, i)[0];
            }
            y.row_mut(b, o)[0] = acc;
        }
    }
    y
}

pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &[S],
    in_dim: usize,
    out_dim: usize,
    dy: &Tensor<S>,
    dweight: &mut [S],
    dbias: &mut [S],
) -> Tensor<S> {
    let mut dx = Tensor::zeros(x.batch(), in_dim, 1);
    for b in 0..x.batch() {
        for o in 0..out_dim {
            let d = dy.row(b, o)[0];
            dbias[o] += d;
            for i in 0..in_dim {
                dweight[o * in_dim + i] += d * x.row(b, i)[0];
                dx.row_mut(b, i)[0] += d * weight[o * in_dim + i];
            }
        }
    }
    dx
}

/// Numerically stable softmax of one logit row (max-subtraction).
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Batch-mean cross-entropy from logits; returns the loss and the gradient
/// with respect to the logits ((softmax − one-hot) / batch).
pub fn cross_entropy_from_logits<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
) -> (f64, Tensor<S>) {
    assert_eq!(logits.batch(), targets.len(), "target count mismatch");
    assert_eq!(logits.width(), 1);
    let n = logits.batch();
    let k = logits.channels();
    let inv_n = S::from_f64(1.0 / n as f64);
    let mut dlogits = Tensor::zeros(n, k, 1);
    let mut loss = 0.0;

    for b in 0..n {
        let row: Vec<S> = (0..k).map(|c| logits.row(b, c)[0]).collect();
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum_exp: S = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let t = targets[b];
        assert!(t < k, "target class {t} out of range");
        loss += (lse - row[t]).as_f64();
        for c in 0..k {
            let p = (row[c] - lse).exp();
            let one_hot = if c == t { S::one() } else { S::zero() };
            dlogits.row_mut(b, c)[0] = (p - one_hot) * inv_n;
        }
    }
    (loss / n as f64, dlogits)
}
