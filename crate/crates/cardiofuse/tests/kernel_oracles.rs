//! Forward kernels against naive reference implementations.
//!
//! The references here are deliberately written differently from the
//! production kernels: the convolution oracle materializes an explicitly
//! zero-padded input and walks it with unconditional triple loops, batch
//! norm recomputes statistics with two-pass accumulation over flattened
//! copies, and so on. Over a thousand random cases everything must agree to
//! 1e-5 relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cardiofuse::nn::{
    conv1d_forward, linear_forward, ActivationKind, BatchNorm1d, ConvSpec, GlobalAvgPool, Tensor,
};

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Reference convolution: pad explicitly, then direct triple loop.
#[allow(clippy::needless_range_loop)]
fn conv_reference(
    x: &[Vec<Vec<f64>>], // [batch][channel][width]
    w: &[Vec<Vec<f64>>], // [out_ch][in_ch_per_group][k]
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Vec<Vec<Vec<f64>>> {
    let in_ch = x[0].len();
    let out_ch = w.len();
    let k = w[0][0].len();
    let icpg = in_ch / groups;
    let ocpg = out_ch / groups;

    let padded: Vec<Vec<Vec<f64>>> = x
        .iter()
        .map(|sample| {
            sample
                .iter()
                .map(|row| {
                    let mut p = vec![0.0; padding];
                    p.extend_from_slice(row);
                    p.extend(vec![0.0; padding]);
                    p
                })
                .collect()
        })
        .collect();

    let out_w = (x[0][0].len() + 2 * padding - k) / stride + 1;
    let mut out = vec![vec![vec![0.0; out_w]; out_ch]; x.len()];
    for b in 0..x.len() {
        for oc in 0..out_ch {
            for ow in 0..out_w {
                let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                for icl in 0..icpg {
                    let ic = (oc / ocpg) * icpg + icl;
                    for kk in 0..k {
                        acc += w[oc][icl][kk] * padded[b][ic][ow * stride + kk];
                    }
                }
                out[b][oc][ow] = acc;
            }
        }
    }
    out
}

fn to_nested(t: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    (0..t.batch())
        .map(|b| (0..t.channels()).map(|c| t.row(b, c).to_vec()).collect())
        .collect()
}

#[test]
fn conv_matches_reference_over_1000_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..1000 {
        let groups_choice = [1usize, 2, 4][rng.gen_range(0..3)];
        let icpg = rng.gen_range(1..=3);
        let ocpg = rng.gen_range(1..=3);
        let (in_ch, out_ch) = (groups_choice * icpg, groups_choice * ocpg);
        let kernel = [1usize, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let padding = rng.gen_range(0..=2);
        let width = rng.gen_range(kernel.max(3)..=32);
        let batch = rng.gen_range(1..=2);
        if width + 2 * padding < kernel {
            continue;
        }
        let spec = ConvSpec { in_ch, out_ch, kernel, stride, padding, groups: groups_choice };

        let x = Tensor::from_vec(
            batch,
            in_ch,
            width,
            (0..batch * in_ch * width).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let weight: Vec<f64> =
            (0..spec.weight_numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let with_bias = rng.gen_bool(0.5);
        let bias: Vec<f64> = (0..out_ch).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let got = conv1d_forward(&x, &weight, with_bias.then_some(bias.as_slice()), &spec);

        let w_nested: Vec<Vec<Vec<f64>>> = (0..out_ch)
            .map(|oc| {
                (0..icpg)
                    .map(|icl| {
                        (0..kernel).map(|kk| weight[(oc * icpg + icl) * kernel + kk]).collect()
                    })
                    .collect()
            })
            .collect();
        let expected = conv_reference(
            &to_nested(&x),
            &w_nested,
            with_bias.then_some(bias.as_slice()),
            stride,
            padding,
            groups_choice,
        );

        for b in 0..batch {
            for oc in 0..out_ch {
                for (ow, &e) in expected[b][oc].iter().enumerate() {
                    let g = got.row(b, oc)[ow];
                    assert!(rel_close(g, e, 1e-5), "case {case} b{b} oc{oc} ow{ow}: {g} vs {e}");
                }
            }
        }
    }
}

#[test]
fn depthwise_equals_per_channel_independent_convolution() {
    // groups == in_ch == out_ch: each channel convolved on its own.
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..200 {
        let ch = rng.gen_range(1..=8);
        let kernel = [1usize, 3, 5][rng.gen_range(0..3)];
        let width = rng.gen_range(kernel..=32);
        let padding = (kernel - 1) / 2;
        let spec = ConvSpec { in_ch: ch, out_ch: ch, kernel, stride: 1, padding, groups: ch };

        let x = Tensor::from_vec(
            1,
            ch,
            width,
            (0..ch * width).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let weight: Vec<f64> = (0..ch * kernel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = conv1d_forward(&x, &weight, None, &spec);

        for c in 0..ch {
            let single = ConvSpec { in_ch: 1, out_ch: 1, kernel, stride: 1, padding, groups: 1 };
            let xc = Tensor::from_vec(1, 1, width, x.row(0, c).to_vec());
            let yc = conv1d_forward(&xc, &weight[c * kernel..(c + 1) * kernel], None, &single);
            assert_eq!(got.row(0, c), yc.row(0, 0), "channel {c}");
        }
    }
}

#[test]
fn batchnorm_matches_two_pass_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for case in 0..400 {
        let (n, c, w) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=8));
        let mut bn = BatchNorm1d::<f64>::new("t", c);
        for g in &mut bn.gamma.data {
            *g = rng.gen_range(-1.5..1.5);
        }
        for b in &mut bn.beta.data {
            *b = rng.gen_range(-1.0..1.0);
        }
        let x = Tensor::from_vec(n, c, w, (0..n * c * w).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let got = bn.forward_train(&x);

        for ch in 0..c {
            // Two-pass reference over a flattened copy of the channel.
            let mut flat = Vec::new();
            for b in 0..n {
                flat.extend_from_slice(x.row(b, ch));
            }
            let mean: f64 = flat.iter().sum::<f64>() / flat.len() as f64;
            let var: f64 = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / flat.len() as f64;
            for b in 0..n {
                for (i, &xv) in x.row(b, ch).iter().enumerate() {
                    let expected =
                        bn.gamma.data[ch] * (xv - mean) / (var + bn.eps).sqrt() + bn.beta.data[ch];
                    let g = got.row(b, ch)[i];
                    assert!(rel_close(g, expected, 1e-5), "case {case}: {g} vs {expected}");
                }
            }
        }
    }
}

#[test]
fn pool_and_linear_match_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let pool = GlobalAvgPool::new();
    for _ in 0..300 {
        let (n, c, w) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=16));
        let x = Tensor::from_vec(n, c, w, (0..n * c * w).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let got = pool.infer(&x);
        for b in 0..n {
            for ch in 0..c {
                let expected = x.row(b, ch).iter().sum::<f64>() / w as f64;
                assert!(rel_close(got.row(b, ch)[0], expected, 1e-5));
            }
        }
    }

    for _ in 0..300 {
        let (n, i, o) = (rng.gen_range(1..=3), rng.gen_range(1..=8), rng.gen_range(1..=5));
        let x = Tensor::from_vec(n, i, 1, (0..n * i).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let w: Vec<f64> = (0..o * i).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = linear_forward(&x, &w, &b, i, o);
        for bb in 0..n {
            for oo in 0..o {
                let mut expected = b[oo];
                for ii in 0..i {
                    expected += w[oo * i + ii] * x.row(bb, ii)[0];
                }
                assert!(rel_close(got.row(bb, oo)[0], expected, 1e-5));
            }
        }
    }
}

#[test]
fn activations_match_reference_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    for _ in 0..2000 {
        let x: f64 = rng.gen_range(-8.0..8.0);
        let relu = if x > 0.0 { x } else { 0.0 };
        let relu6 = relu.min(6.0);
        let hs = x * (x + 3.0).clamp(0.0, 6.0) / 6.0;
        assert!(rel_close(ActivationKind::Relu.apply(x), relu, 1e-12));
        assert!(rel_close(ActivationKind::Relu6.apply(x), relu6, 1e-12));
        assert!(rel_close(ActivationKind::HardSwish.apply(x), hs, 1e-12));
    }
}

#[test]
fn softmax_is_always_a_probability_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for _ in 0..1000 {
        let k = rng.gen_range(2..=6);
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let p = cardiofuse::nn::softmax(&logits);
        assert!(p.iter().all(|&v| v > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
