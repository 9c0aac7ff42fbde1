//! Int8 path verification: the integer kernels against float references of
//! the dequantized operands, the full int8 graph against its float
//! simulation, and bundle serialization round trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cardiofuse::io::Label;
use cardiofuse::model::{build_cnn, BottleneckSpec, Model, ModelConfig};
use cardiofuse::nn::{ActivationKind, ConvSpec, Tensor};
use cardiofuse::preprocess::FusedWindow;
use cardiofuse::quant::{
    bundle, quantize_model, round_half_away, FixedMult, QTensor, QatCnn, QuantConvUnit,
    QuantParams, QuantScheme,
};
use cardiofuse::train::Trainable;

fn random_windows(rng: &mut ChaCha8Rng, n: usize, width: usize) -> Vec<FusedWindow> {
    (0..n)
        .map(|i| FusedWindow {
            values: (0..width).map(|_| rng.gen_range(-2.5..2.5)).collect(),
            record_id: format!("r{i}"),
            window_index: 0,
            label: if i % 2 == 0 { Label::Normal } else { Label::Abnormal },
        })
        .collect()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        per_modality_len: 8,
        stem_out_ch: 2,
        stem_kernel: 3,
        stem_stride: 1,
        stem_padding: 1,
        blocks: vec![
            BottleneckSpec { in_ch: 2, exp_ch: 2, out_ch: 2, kernel: 3, nonlin: ActivationKind::Relu },
            BottleneckSpec {
                in_ch: 2,
                exp_ch: 4,
                out_ch: 3,
                kernel: 3,
                nonlin: ActivationKind::HardSwish,
            },
        ],
        n_classes: 2,
    }
}

#[test]
fn uncalibrated_fake_quant_matches_float_bit_exactly() {
    // Identity fake-quant: before calibration every boundary passes values
    // through untouched (weights are still fake-quantized, so compare with
    // quantization disabled too).
    let cfg = ModelConfig::cnn128();
    let cnn = build_cnn::<f32>(&cfg, 9).unwrap();
    let float_model = Model::Cnn(cnn.clone());
    let mut qat = QatCnn::new(cnn);
    qat.enabled = false;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let window: Vec<f32> = (0..256).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p_float = float_model.predict(&window).unwrap();
        let p_qat = qat.predict(&window).unwrap();
        assert_eq!(p_float, p_qat);
    }
}

#[test]
fn ste_passes_upstream_gradient_for_in_range_values() {
    // Train one step on a model whose boundaries are calibrated over the
    // input range: all values in range, so the input gradient equals the
    // plain float gradient of the fake-quantized function (nonzero).
    let cfg = tiny_config();
    let cnn = build_cnn::<f32>(&cfg, 3).unwrap();
    let mut qat = QatCnn::new(cnn);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let windows = random_windows(&mut rng, 8, cfg.input_width());
    qat.calibrate(&windows, 4).unwrap();

    let views: Vec<&[f32]> = windows.iter().take(4).map(|w| w.values.as_slice()).collect();
    let x = Tensor::stack_windows(&views);
    qat.zero_grads();
    let loss = qat.forward_backward(&x, &[0, 1, 0, 1]).unwrap();
    assert!(loss.is_finite());
    let mut any_nonzero = false;
    qat.visit_params(&mut |p| {
        any_nonzero |= p.grad.iter().any(|&g| g != 0.0);
    });
    assert!(any_nonzero, "gradients flow through the fake-quant graph");
}

#[test]
fn int8_conv_unit_matches_dequantized_float_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..300 {
        let groups = [1usize, 2][rng.gen_range(0..2)];
        let icpg = rng.gen_range(1..=3);
        let ocpg = rng.gen_range(1..=3);
        let spec = ConvSpec {
            in_ch: groups * icpg,
            out_ch: groups * ocpg,
            kernel: [1, 3, 5][rng.gen_range(0..3)],
            stride: rng.gen_range(1..=2),
            padding: rng.gen_range(0..=2),
            groups,
        };
        let width = rng.gen_range(spec.kernel.max(4)..=16);

        let in_qp = QuantParams::affine_from_range(rng.gen_range(-3.0..-0.1), rng.gen_range(0.1..3.0));
        let out_qp = QuantParams::affine_from_range(rng.gen_range(-5.0..-0.1), rng.gen_range(0.1..5.0));
        let weight_qp = QuantParams::symmetric_weight(rng.gen_range(0.1..2.0));
        let weight_q: Vec<i8> =
            (0..spec.weight_numel()).map(|_| rng.gen_range(-127i32..=127) as i8).collect();
        let bias_q: Vec<i32> = (0..spec.out_ch).map(|_| rng.gen_range(-500..500)).collect();

        let unit = QuantConvUnit {
            name: format!("case{case}"),
            spec,
            weight_q: weight_q.clone(),
            weight_qp,
            bias_q: bias_q.clone(),
            in_qp,
            out_qp,
            requant: FixedMult::from_real(
                f64::from(in_qp.scale) * f64::from(weight_qp.scale) / f64::from(out_qp.scale),
            ),
            act_lut: None,
            act_out_qp: None,
        };

        let x = QTensor {
            channels: spec.in_ch,
            width,
            data: (0..spec.in_ch * width).map(|_| rng.gen_range(-128i32..=127) as i8).collect(),
        };
        let got = unit.forward(&x);

        // Float reference over dequantized operands; zero padding in real
        // space corresponds to the input zero point in q space.
        let out_w = spec.out_width(width);
        for oc in 0..spec.out_ch {
            for ow in 0..out_w {
                let mut acc = f64::from(bias_q[oc]) * f64::from(in_qp.scale) * f64::from(weight_qp.scale);
                let origin = (ow * spec.stride) as isize - spec.padding as isize;
                for icl in 0..spec.icpg() {
                    let ic = (oc / spec.ocpg()) * spec.icpg() + icl;
                    for kk in 0..spec.kernel {
                        let iw = origin + kk as isize;
                        if iw >= 0 && (iw as usize) < width {
                            let xr = f64::from(in_qp.dequantize_value(x.row(ic)[iw as usize]));
                            let wr = f64::from(weight_q[(oc * spec.icpg() + icl) * spec.kernel + kk])
                                * f64::from(weight_qp.scale);
                            acc += xr * wr;
                        }
                    }
                }
                let expected = (round_half_away(acc / f64::from(out_qp.scale)) as i32
                    + out_qp.zero_point)
                    .clamp(-128, 127);
                let g = i32::from(got.row(oc)[ow]);
                assert!(
                    (g - expected).abs() <= 1,
                    "case {case} oc{oc} ow{ow}: int8 {g} vs float {expected}"
                );
            }
        }
    }
}

#[test]
fn int8_graph_matches_float_simulation_on_small_models() {
    // Exhaustive small-model comparison: int8 logits vs the float
    // simulation of the same quantized graph, within one logit step.
    for seed in 0..8u64 {
        let cfg = tiny_config();
        let cnn = build_cnn::<f32>(&cfg, seed).unwrap();
        let mut qat = QatCnn::new(cnn);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let windows = random_windows(&mut rng, 16, cfg.input_width());
        qat.calibrate(&windows, 8).unwrap();
        let qm = quantize_model(&qat).unwrap();
        let step = f64::from(qm.logit_scale());

        for _ in 0..100 {
            let window: Vec<f32> = (0..cfg.input_width()).map(|_| rng.gen_range(-2.5..2.5)).collect();
            let int8 = qm.logits(&window).unwrap();
            let sim = qm.simulate_logits(&window).unwrap();
            for (a, b) in int8.iter().zip(&sim) {
                assert!(
                    (f64::from(*a) - f64::from(*b)).abs() <= step + 1e-6,
                    "seed {seed}: int8 {a} vs sim {b} (step {step})"
                );
            }
        }
    }
}

#[test]
fn dequantized_weights_stay_within_half_a_step_of_folded_weights() {
    let cfg = tiny_config();
    let cnn = build_cnn::<f32>(&cfg, 21).unwrap();
    let mut qat = QatCnn::new(cnn);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let windows = random_windows(&mut rng, 12, cfg.input_width());
    qat.calibrate(&windows, 6).unwrap();
    let qm = quantize_model(&qat).unwrap();

    // Recompute the BN fold independently and compare against the
    // dequantized int8 payloads.
    let check_unit = |unit: &QuantConvUnit, cba: &cardiofuse::model::ConvBnAct<f32>| {
        let per_oc = unit.spec.icpg() * unit.spec.kernel;
        for oc in 0..unit.spec.out_ch {
            let g = f64::from(cba.bn.gamma.data[oc])
                / (f64::from(cba.bn.running_var[oc]) + cba.bn.eps).sqrt();
            for i in 0..per_oc {
                let folded = f64::from(cba.conv.weight.data[oc * per_oc + i]) * g;
                let deq = f64::from(unit.weight_q[oc * per_oc + i]) * f64::from(unit.weight_qp.scale);
                assert!(
                    (folded - deq).abs() <= f64::from(unit.weight_qp.scale) / 2.0 + 1e-9,
                    "{} oc{oc} i{i}: folded {folded} vs dequantized {deq}",
                    unit.name
                );
            }
        }
    };
    check_unit(&qm.stem, &qat.cnn.stem);
    for (qb, b) in qm.blocks.iter().zip(&qat.cnn.blocks) {
        if let (Some(qe), Some(e)) = (&qb.expand, &b.expand) {
            check_unit(qe, e);
        }
        check_unit(&qb.depthwise, &b.depthwise);
        check_unit(&qb.project, &b.project);
    }
}

#[test]
fn accumulator_audit_passes_for_the_published_shapes() {
    let cfg = ModelConfig::cnn128();
    let cnn = build_cnn::<f32>(&cfg, 5).unwrap();
    let mut qat = QatCnn::new(cnn);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let windows = random_windows(&mut rng, 8, 256);
    qat.calibrate(&windows, 8).unwrap();
    let qm = quantize_model(&qat).unwrap();

    let report = qm.audit_accumulators().unwrap();
    // Worst accumulation: 96-term project conv at 255 * 128 per term.
    for (layer, worst) in &report {
        assert!(*worst < i64::from(i32::MAX), "{layer}: {worst}");
    }
    let max = report.iter().map(|(_, w)| *w).max().unwrap();
    assert!(max < 8_000_000, "ample headroom, got {max}");
}

#[test]
fn bundle_roundtrip_preserves_int8_payloads_bit_exactly() {
    let cfg = ModelConfig::cnn128();
    let cnn = build_cnn::<f32>(&cfg, 31).unwrap();
    let mut qat = QatCnn::new(cnn);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let windows = random_windows(&mut rng, 8, 256);
    qat.calibrate(&windows, 8).unwrap();
    let qm = quantize_model(&qat).unwrap();

    let bytes = bundle::save(&qat, &qm);
    let (qat2, qm2) = bundle::load(&bytes, &cfg).unwrap();
    assert_eq!(qm.stem.weight_q, qm2.stem.weight_q);
    assert_eq!(qm.classifier.weight_q, qm2.classifier.weight_q);
    assert_eq!(qm.classifier.bias_q, qm2.classifier.bias_q);

    // save -> load -> save is byte-identical.
    let again = bundle::save(&qat2, &qm2);
    assert_eq!(bytes, again);

    // Both inference paths survive the round trip.
    for _ in 0..10 {
        let window: Vec<f32> = (0..256).map(|_| rng.gen_range(-2.0..2.0)).collect();
        assert_eq!(qm.predict(&window).unwrap(), qm2.predict(&window).unwrap());
        assert_eq!(qat.predict(&window).unwrap(), qat2.predict(&window).unwrap());
    }

    // Wrong config is rejected.
    let other = ModelConfig::for_variant(64).unwrap();
    assert!(bundle::load(&bytes, &other).is_err());
    // Arbitrary truncation is an error, not a panic.
    assert!(bundle::load(&bytes[..bytes.len() / 3], &cfg).is_err());
}

#[test]
fn quant_schemes_enforced() {
    let qp = QuantParams::symmetric_weight(2.0);
    assert_eq!(qp.scheme, QuantScheme::SymmetricWeight);
    assert_eq!(qp.zero_point, 0);
    let qp = QuantParams::affine_from_range(-0.5, 2.0);
    assert_eq!(qp.scheme, QuantScheme::AffineActivation);
}
