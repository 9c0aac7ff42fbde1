//! End-to-end training on synthetic separable data, the cross-validation
//! protocol, and the grid-search oracle.

mod common;

use cardiofuse::io::Label;
use cardiofuse::model::{build_cnn, Model, ModelArch, ModelConfig};
use cardiofuse::preprocess::PreprocessConfig;
use cardiofuse::quant::{quantize_model, QatCnn};
use cardiofuse::synth::SynthConfig;
use cardiofuse::train::{
    cross_validate, default_affine_grid, evaluate_recordings, grid_search_affine_init,
    train_model, window_accuracy, AffineInit, FoldPlan, TrainConfig, Trainable,
};

use common::{flat_windows, split_train_test, synthetic_record_windows};

fn fast_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, seed, ..TrainConfig::default() }
}

fn recording_accuracy<T: Trainable>(model: &T, records: &[cardiofuse::train::RecordWindows]) -> f64 {
    let refs: Vec<&cardiofuse::train::RecordWindows> = records.iter().collect();
    let (confusion, _, _) = evaluate_recordings(model, &refs).unwrap();
    let total = confusion.tp + confusion.tn + confusion.fp + confusion.fn_;
    (confusion.tp + confusion.tn) as f64 / total as f64
}

#[test]
fn float_training_separates_the_synthetic_corpus() {
    let synth = SynthConfig { n_normal: 12, n_abnormal: 12, seed: 77, ..SynthConfig::default() };
    let records = synthetic_record_windows(&synth, &PreprocessConfig::default());
    let (train, test) = split_train_test(records, 4);
    assert_eq!(test.len(), 8);
    let train_windows = flat_windows(&train);

    let cfg = fast_train_config(30, 7);
    let model = Model::Cnn(build_cnn::<f32>(&ModelConfig::cnn128(), 7).unwrap());
    let (model, history) = train_model(&train_windows, &cfg, model).unwrap();

    assert_eq!(history.len(), 30);
    assert!(
        history.last().unwrap() < &history[0],
        "loss should drop: {:?} -> {:?}",
        history[0],
        history.last().unwrap()
    );

    let train_acc = window_accuracy(&model, &train_windows).unwrap();
    assert!(train_acc >= 0.95, "train window accuracy {train_acc}");

    let acc = recording_accuracy(&model, &test);
    assert!(acc >= 0.95, "held-out recording accuracy {acc}");
}

#[test]
fn qat_reaches_90_percent_and_does_not_beat_float() {
    let synth = SynthConfig { n_normal: 12, n_abnormal: 12, seed: 78, ..SynthConfig::default() };
    let records = synthetic_record_windows(&synth, &PreprocessConfig::default());
    let (train, test) = split_train_test(records, 4);
    let train_windows = flat_windows(&train);

    // Float training first.
    let cfg = fast_train_config(30, 11);
    let model = Model::Cnn(build_cnn::<f32>(&ModelConfig::cnn128(), 11).unwrap());
    let (model, _) = train_model(&train_windows, &cfg, model).unwrap();
    let float_acc = recording_accuracy(&model, &test);

    // QAT fine-tune from the trained weights.
    let cnn = match model {
        Model::Cnn(c) => c,
        Model::Mlp(_) => unreachable!(),
    };
    let mut qat = QatCnn::new(cnn);
    qat.calibrate(&train_windows, 32).unwrap();
    let finetune = TrainConfig { epochs: 10, lr: 2e-4, seed: 12, ..TrainConfig::default() };
    let (qat, _) = train_model(&train_windows, &finetune, qat).unwrap();
    let qat_acc = recording_accuracy(&qat, &test);

    assert!(qat_acc >= 0.90, "QAT recording accuracy {qat_acc}");
    assert!(qat_acc <= float_acc + 1e-9, "QAT {qat_acc} must not beat float {float_acc}");

    // Converted int8 model agrees with the fake-quant path on nearly every
    // window decision.
    let qm = quantize_model(&qat).unwrap();
    let all_windows: Vec<_> = flat_windows(&train).into_iter().chain(flat_windows(&test)).collect();
    let mut agree = 0usize;
    for w in &all_windows {
        let fq = qat.predict(&w.values).unwrap();
        let i8p = qm.predict(&w.values).unwrap();
        let d_fq = fq[1] >= fq[0];
        let d_i8 = i8p[1] >= i8p[0];
        if d_fq == d_i8 {
            agree += 1;
        }
    }
    let rate = agree as f64 / all_windows.len() as f64;
    assert!(rate >= 0.99, "int8 vs fake-quant decision agreement {rate}");

    // The int8 model still classifies the held-out recordings well.
    let mut confusion = cardiofuse::train::ConfusionCounts::default();
    for rec in &test {
        let probs: Vec<f64> = rec
            .windows
            .iter()
            .map(|w| f64::from(qm.predict(&w.values).unwrap()[1]))
            .collect();
        confusion.add(rec.label, cardiofuse::stream::recording_decision(&probs));
    }
    let int8_acc =
        (confusion.tp + confusion.tn) as f64 / test.len() as f64;
    assert!(int8_acc >= 0.85, "int8 recording accuracy {int8_acc}");
}

#[test]
fn zero_epochs_leaves_the_model_unchanged_and_seeds_reproduce() {
    let synth = SynthConfig { n_normal: 3, n_abnormal: 3, ..SynthConfig::default() };
    let records = synthetic_record_windows(&synth, &PreprocessConfig::default());
    let windows = flat_windows(&records);

    let mut before = Model::Cnn(build_cnn::<f32>(&ModelConfig::cnn128(), 5).unwrap());
    let mut snapshot = Vec::new();
    before.visit_params(&mut |p| snapshot.extend_from_slice(&p.data));
    let (mut after, history) =
        train_model(&windows, &fast_train_config(0, 5), before).unwrap();
    assert!(history.is_empty());
    let mut post = Vec::new();
    after.visit_params(&mut |p| post.extend_from_slice(&p.data));
    assert_eq!(snapshot, post);

    let run = |seed: u64| -> f64 {
        let model = Model::Cnn(build_cnn::<f32>(&ModelConfig::cnn128(), 1).unwrap());
        let (_, history) = train_model(&windows, &fast_train_config(3, seed), model).unwrap();
        *history.last().unwrap()
    };
    assert_eq!(run(9).to_bits(), run(9).to_bits(), "same seed, bit-identical loss");
    assert_ne!(run(9).to_bits(), run(10).to_bits());
}

#[test]
fn cross_validation_protocol_50_runs_no_leakage_deterministic() {
    let synth = SynthConfig {
        n_normal: 10,
        n_abnormal: 10,
        duration_s: 9.0,
        seed: 90,
        ..SynthConfig::default()
    };
    let records = synthetic_record_windows(&synth, &PreprocessConfig::default());
    assert_eq!(records.len(), 20);
    let ids: Vec<(String, Label)> =
        records.iter().map(|r| (r.record_id.clone(), r.label)).collect();
    let plan = FoldPlan::stratified(&ids, 5, 10, 42).unwrap();

    // Short training: this exercises the protocol, not the accuracy.
    let cfg = fast_train_config(2, 42);
    let arch = ModelArch::Cnn(ModelConfig::cnn128());
    let report = cross_validate(&records, &plan, &cfg, &arch).unwrap();
    assert_eq!(report.runs.len(), 50, "10 repeats x 5 folds");

    // Every recording held out exactly once per repeat.
    for assignment in &plan.assignments {
        for fold in 0..plan.k {
            let held: Vec<&String> = assignment
                .iter()
                .filter(|(_, &f)| f == fold)
                .map(|(id, _)| id)
                .collect();
            assert_eq!(held.len(), 4);
        }
    }

    // Determinism: the full report serializes identically under the same
    // seed.
    let again = cross_validate(&records, &plan, &cfg, &arch).unwrap();
    assert_eq!(report.to_csv(), again.to_csv());

    let other_plan = FoldPlan::stratified(&ids, 5, 2, 43).unwrap();
    assert_ne!(plan.assignments[0], other_plan.assignments[0]);
}

#[test]
fn grid_search_prefers_the_informative_modality() {
    // PCG is pure noise: damping the ECG while amplifying the noise must
    // lose to the opposite assignment, so the selected PCG scale cannot
    // exceed the ECG scale.
    let synth = SynthConfig {
        n_normal: 8,
        n_abnormal: 8,
        duration_s: 6.0,
        pcg_informative: false,
        spike_amplitude: 1.5,
        noise: 0.4,
        seed: 55,
        ..SynthConfig::default()
    };
    let records = synthetic_record_windows(&synth, &PreprocessConfig::default());

    let grid = vec![
        AffineInit { scale_ecg: 4.0, shift_ecg: 0.0, scale_pcg: 0.25, shift_pcg: 0.0 },
        AffineInit { scale_ecg: 0.25, shift_ecg: 0.0, scale_pcg: 4.0, shift_pcg: 0.0 },
    ];
    let cfg = fast_train_config(0, 31);
    let arch = ModelArch::Cnn(ModelConfig::cnn128());
    let best = grid_search_affine_init(&records, &grid, 8, &cfg, &arch).unwrap();
    assert!(
        best.scale_pcg <= best.scale_ecg,
        "selected scales: ecg {} pcg {}",
        best.scale_ecg,
        best.scale_pcg
    );

    // Degenerate grids resolve by the declared rules.
    let identity_only = vec![AffineInit::identity()];
    let got = grid_search_affine_init(&records, &identity_only, 1, &cfg, &arch).unwrap();
    assert_eq!(got, AffineInit::identity());

    let duplicates = vec![
        AffineInit { scale_ecg: 3.0, shift_ecg: 0.0, scale_pcg: 3.0, shift_pcg: 0.0 },
        AffineInit { scale_ecg: 3.0, shift_ecg: 0.0, scale_pcg: 3.0, shift_pcg: 0.0 },
    ];
    let got = grid_search_affine_init(&records, &duplicates, 1, &cfg, &arch).unwrap();
    assert_eq!(got, duplicates[0], "ties keep the first grid point");

    assert_eq!(default_affine_grid().len(), 16);
}
