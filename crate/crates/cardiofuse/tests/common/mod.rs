//! Shared helpers for the integration tests: synthetic corpora pushed
//! through the real preprocessing pipeline.

use cardiofuse::preprocess::{preprocess_record, PreprocessConfig};
use cardiofuse::synth::{generate_corpus, SynthConfig};
use cardiofuse::train::{group_by_recording, RecordWindows};

/// Synthetic recordings preprocessed into per-recording window sets.
pub fn synthetic_record_windows(synth: &SynthConfig, pre: &PreprocessConfig) -> Vec<RecordWindows> {
    let records = generate_corpus(synth);
    let mut windows = Vec::new();
    for rec in &records {
        windows.extend(preprocess_record(rec, pre).expect("synthetic record preprocesses"));
    }
    group_by_recording(windows)
}

/// Stratified head/tail split at the recording level: the first
/// `n_test_per_class` of each class become the held-out set.
pub fn split_train_test(
    records: Vec<RecordWindows>,
    n_test_per_class: usize,
) -> (Vec<RecordWindows>, Vec<RecordWindows>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut taken = std::collections::BTreeMap::new();
    for rec in records {
        let count = taken.entry(rec.label).or_insert(0usize);
        if *count < n_test_per_class {
            *count += 1;
            test.push(rec);
        } else {
            train.push(rec);
        }
    }
    (train, test)
}

pub fn flat_windows(records: &[RecordWindows]) -> Vec<cardiofuse::preprocess::FusedWindow> {
    records.iter().flat_map(|r| r.windows.iter().cloned()).collect()
}
