//! Stateful layers: parameters plus the cached intermediates their backward
//! passes need. `forward_train` records, `infer` is pure and shareable
//! across threads, `backward` consumes the recording and accumulates
//! parameter gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ActivationKind, BnCache, ConvSpec};
use super::{NnError, Param, Scalar, Tensor};

fn uniform_init<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<S> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

/// Per-modality trainable scale and shift on the fused input: the first half
/// of the width is ECG, the second half PCG. Four parameters in the order
/// [scale_ecg, shift_ecg, scale_pcg, shift_pcg].
#[derive(Debug, Clone)]
pub struct AffineModality<S> {
    pub params: Param<S>,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> AffineModality<S> {
    pub fn identity(name: &str) -> Self {
        let data = vec![S::one(), S::zero(), S::one(), S::zero()];
        Self {
            params: Param::new(format!("{name}.affine"), vec![4], data),
            cache: None,
        }
    }

    pub fn set(&mut self, scale_ecg: f64, shift_ecg: f64, scale_pcg: f64, shift_pcg: f64) {
        self.params.data = vec![
            S::from_f64(scale_ecg),
            S::from_f64(shift_ecg),
            S::from_f64(scale_pcg),
            S::from_f64(shift_pcg),
        ];
    }

    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        if x.width() % 2 != 0 {
            return Err(NnError::OddWidth(x.width()));
        }
        let half = x.width() / 2;
        let [se, he, sp, hp] = [
            self.params.data[0],
            self.params.data[1],
            self.params.data[2],
            self.params.data[3],
        ];
        let mut y = x.clone();
        for b in 0..x.batch() {
            for c in 0..x.channels() {
                let row = y.row_mut(b, c);
                for v in row[..half].iter_mut() {
                    *v = se * *v + he;
                }
                for v in row[half..].iter_mut() {
                    *v = sp * *v + hp;
                }
            }
        }
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        self.apply(x)
    }

    pub fn forward_train(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let y = self.apply(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let x = self.cache.take().ok_or(NnError::GraphNotRecorded)?;
        let half = x.width() / 2;
        let [se, _, sp, _] = [
            self.params.data[0],
            self.params.data[1],
            self.params.data[2],
            self.params.data[3],
        ];
        let mut dx = Tensor::zeros(x.batch(), x.channels(), x.width());
        let g = &mut self.params.grad;
        for b in 0..x.batch() {
            for c in 0..x.channels() {
                let xr = x.row(b, c);
                let dyr = dy.row(b, c);
                let dxr = dx.row_mut(b, c);
                for i in 0..half {
                    g[0] += dyr[i] * xr[i];
                    g[1] += dyr[i];
                    dxr[i] = dyr[i] * se;
                }
                for i in half..x.width() {
                    g[2] += dyr[i] * xr[i];
                    g[3] += dyr[i];
                    dxr[i] = dyr[i] * sp;
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d<S> {
    pub spec: ConvSpec,
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Conv1d<S> {
    /// Fan-in-scaled uniform initialization; `with_bias` is false for convs
    /// followed by batch norm.
    pub fn new(name: &str, spec: ConvSpec, with_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = spec.icpg() * spec.kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            vec![spec.out_ch, spec.icpg(), spec.kernel],
            uniform_init(rng, spec.weight_numel(), fan_in),
        );
        let bias = with_bias.then(|| {
            Param::new(
                format!("{name}.bias"),
                vec![spec.out_ch],
                uniform_init(rng, spec.out_ch, fan_in),
            )
        });
        Self {
            spec,
            weight,
            bias,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        kernels::conv1d_forward(
            x,
            &self.weight.data,
            self.bias.as_ref().map(|b| b.data.as_slice()),
            &self.spec,
        )
    }

    pub fn forward_train(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let x = self.cache.take().ok_or(NnError::GraphNotRecorded)?;
        let dbias = self.bias.as_mut().map(|b| b.grad.as_mut_slice());
        Ok(kernels::conv1d_backward(
            &x,
            &self.weight.data,
            &self.spec,
            dy,
            &mut self.weight.grad,
            dbias,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<S>>,
}

impl<S: Scalar> BatchNorm1d<S> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![S::one(); channels]),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        kernels::batchnorm_forward_infer(
            x,
            &self.gamma.data,
            &self.beta.data,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }

    /// Normalizes by batch statistics and folds them into the running
    /// estimates: running = (1 - momentum) * running + momentum * batch.
    pub fn forward_train(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let (y, mean, var, cache) =
            kernels::batchnorm_forward_train(x, &self.gamma.data, &self.beta.data, self.eps);
        let mom = S::from_f64(self.momentum);
        let keep = S::one() - mom;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + mom * mean[c];
            self.running_var[c] = keep * self.running_var[c] + mom * var[c];
        }
        self.cache = Some(cache);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let cache = self.cache.take().ok_or(NnError::GraphNotRecorded)?;
        Ok(kernels::batchnorm_backward(
            dy,
            &cache,
            &self.gamma.data,
            &mut self.gamma.grad,
            &mut self.beta.grad,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Activation<S> {
    pub kind: ActivationKind,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Activation<S> {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, cache: None }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut y = x.clone();
        for v in y.data_mut() {
            *v = self.kind.apply(*v);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let x = self.cache.take().ok_or(NnError::GraphNotRecorded)?;
        let mut dx = dy.clone();
        for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
            *d = *d * self.kind.derivative(xv);
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache_width: Option<usize>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer<S: Scalar>(&self, x: &Tensor<S>) -> Tensor<S> {
        kernels::global_avg_pool_forward(x)
    }

    pub fn forward_train<S: Scalar>(&mut self, x: &Tensor<S>) -> Tensor<S> {
        self.cache_width = Some(x.width());
        self.infer(x)
    }

    pub fn backward<S: Scalar>(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let w = self.cache_width.take().ok_or(NnError::GraphNotRecorded)?;
        Ok(kernels::global_avg_pool_backward(dy, w))
    }
}

#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param<S>,
    pub bias: Param<S>,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_dim, in_dim],
                uniform_init(rng, out_dim * in_dim, in_dim),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![out_dim],
                uniform_init(rng, out_dim, in_dim),
            ),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        kernels::linear_forward(x, &self.weight.data, &self.bias.data, self.in_dim, self.out_dim)
    }

    pub fn forward_train(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let x = self.cache.take().ok_or(NnError::GraphNotRecorded)?;
        Ok(kernels::linear_backward(
            &x,
            &self.weight.data,
            self.in_dim,
            self.out_dim,
            dy,
            &mut self.weight.grad,
            &mut self.bias.grad,
        ))
    }
}
