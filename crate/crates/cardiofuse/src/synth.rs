//! Deterministic synthetic ECG+PCG corpus for tests and demos.
//!
//! Normal recordings are periodic heartbeat-like bumps (ECG) and noisy
//! heart-sound bursts (PCG); abnormal recordings add a strong localized
//! spike train to the ECG. The classes stay separable after the aggressive
//! downsampling, so a trained model must reach high recording accuracy.
//! Records can also be written out in the dataset layout
//! (`<id>.hea`/`<id>.dat`/`<id>.wav` + `REFERENCE.csv`).

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::io::{self, Label, Modality, PairedRecord, Signal};
use crate::util::sub_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub duration_s: f64,
    pub rate: f64,
    /// Amplitude of the abnormal spike train relative to the base beat.
    pub spike_amplitude: f64,
    pub noise: f64,
    /// When false the PCG channel is pure noise and carries no class
    /// information.
    pub pcg_informative: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal: 12,
            n_abnormal: 12,
            duration_s: 9.0,
            rate: 2000.0,
            spike_amplitude: 3.0,
            noise: 0.05,
            pcg_informative: true,
            seed: 0,
        }
    }
}

fn gaussian_bump(t: f64, center: f64, width: f64) -> f64 {
    let d = (t - center) / width;
    (-0.5 * d * d).exp()
}

fn synth_record(cfg: &SynthConfig, label: Label, index: usize) -> PairedRecord {
    let record_id = match label {
        Label::Normal => format!("sn{index:03}"),
        Label::Abnormal => format!("sa{index:03}"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("synth.{record_id}")));
    let n = (cfg.duration_s * cfg.rate) as usize;
    let beat_period = 0.75 + rng.gen_range(-0.05..0.05);
    let phase = rng.gen_range(0.0..beat_period);

    let mut ecg = Vec::with_capacity(n);
    let mut pcg = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / cfg.rate;

        // Base beat: one sharp bump per period plus a smaller repolarization
        // wave.
        let tb = (t + phase).rem_euclid(beat_period);
        let mut e = gaussian_bump(tb, 0.2, 0.018) + 0.3 * gaussian_bump(tb, 0.45, 0.06);
        let mut p = 0.4 * gaussian_bump(tb, 0.22, 0.03) + 0.25 * gaussian_bump(tb, 0.52, 0.03);
        p *= (2.0 * PI * 35.0 * t).sin().abs();

        if label == Label::Abnormal {
            // Localized spike train, wide enough to survive downsampling.
            let ts = (t + phase).rem_euclid(beat_period);
            let spike = cfg.spike_amplitude * gaussian_bump(ts, 0.6, 0.04);
            e += spike;
            if cfg.pcg_informative {
                p += 0.6 * spike;
            }
        }

        e += rng.gen_range(-cfg.noise..cfg.noise);
        p += rng.gen_range(-3.0 * cfg.noise..3.0 * cfg.noise);
        ecg.push(e);
        pcg.push(p);
    }

    PairedRecord {
        record_id,
        ecg: Signal { samples: ecg, rate: cfg.rate, modality: Modality::Ecg },
        pcg: Signal { samples: pcg, rate: cfg.rate, modality: Modality::Pcg },
        label,
        duration_s: cfg.duration_s,
    }
}

/// Generate the full corpus, normals first, deterministically from the seed.
pub fn generate_corpus(cfg: &SynthConfig) -> Vec<PairedRecord> {
    let mut records = Vec::with_capacity(cfg.n_normal + cfg.n_abnormal);
    for i in 0..cfg.n_normal {
        records.push(synth_record(cfg, Label::Normal, i));
    }
    for i in 0..cfg.n_abnormal {
        records.push(synth_record(cfg, Label::Abnormal, i));
    }
    records
}

/// Write records in the dataset directory layout: a one-channel format-16
/// WFDB pair for the ECG, a PCM16 WAV for the PCG, and `REFERENCE.csv`.
pub fn write_corpus_dir(dir: &Path, records: &[PairedRecord]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut reference = String::new();
    for rec in records {
        let gain = 1000.0;
        let raw: Vec<i16> = rec
            .ecg
            .samples
            .iter()
            .map(|v| (v * gain).round().clamp(-32767.0, 32767.0) as i16)
            .collect();
        let header = format!(
            "{id} 1 {rate} {n}\n{id}.dat 16 {gain}/mV 16 0 0 0 0 ECG\n",
            id = rec.record_id,
            rate = rec.ecg.rate,
            n = raw.len(),
        );
        std::fs::write(dir.join(format!("{}.hea", rec.record_id)), header)?;
        let mut dat = Vec::with_capacity(raw.len() * 2);
        for v in &raw {
            dat.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(format!("{}.dat", rec.record_id)), dat)?;

        let peak = rec.pcg.samples.iter().fold(1e-9f64, |m, v| m.max(v.abs()));
        let wav_samples: Vec<i16> = rec
            .pcg
            .samples
            .iter()
            .map(|v| (v / peak * 30000.0).round() as i16)
            .collect();
        std::fs::write(
            dir.join(format!("{}.wav", rec.record_id)),
            io::write_wav_pcm(&wav_samples, rec.pcg.rate as u32),
        )?;

        let value = match rec.label {
            Label::Normal => -1,
            Label::Abnormal => 1,
        };
        reference.push_str(&format!("{},{}\n", rec.record_id, value));
    }
    std::fs::write(dir.join("REFERENCE.csv"), reference)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_labeled() {
        let cfg = SynthConfig { n_normal: 2, n_abnormal: 3, ..SynthConfig::default() };
        let a = generate_corpus(&cfg);
        let b = generate_corpus(&cfg);
        assert_eq!(a.len(), 5);
        assert_eq!(a.iter().filter(|r| r.label == Label::Abnormal).count(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ecg.samples, y.ecg.samples);
            assert_eq!(x.pcg.samples, y.pcg.samples);
        }
    }

    #[test]
    fn spike_separates_the_classes() {
        let cfg = SynthConfig { n_normal: 1, n_abnormal: 1, ..SynthConfig::default() };
        let records = generate_corpus(&cfg);
        let peak = |r: &PairedRecord| r.ecg.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak(&records[1]) > 1.8 * peak(&records[0]));
    }

    #[test]
    fn written_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n_normal: 2, n_abnormal: 2, duration_s: 9.0, ..SynthConfig::default() };
        let records = generate_corpus(&cfg);
        write_corpus_dir(dir.path(), &records).unwrap();

        let corpus = io::load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.records.len(), 4);
        assert!(corpus.missing_modality.is_empty());
        for orig in &records {
            let loaded = corpus
                .records
                .iter()
                .find(|r| r.record_id == orig.record_id)
                .expect("record loads back");
            assert_eq!(orig.label, loaded.label);
            assert_eq!(loaded.ecg.samples.len(), 18000);
            // Quantization to 16-bit counts keeps the waveform close.
            let err = orig
                .ecg
                .samples
                .iter()
                .zip(&loaded.ecg.samples)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-3, "max ecg error {err}");
        }
    }
}
