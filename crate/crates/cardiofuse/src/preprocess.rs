//! Signal conditioning and window extraction.
//!
//! The fixed order is: fill missing values by linear interpolation, linearly
//! downsample each modality to `per_modality_len` samples per window, z-score
//! per recording per modality, slice into overlapping windows, and fuse the
//! two modalities side by side (ECG first half, PCG second half).
//!
//! Defaults follow the primary configuration: 3 s windows with 2 s overlap at
//! 128 samples per modality, i.e. a 42.667 Hz target rate and a 256-wide
//! fused input.

use thiserror::Error;

use crate::io::{Label, PairedRecord, Signal};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("signal has no valid samples to interpolate from")]
    AllMissing,
    #[error("resampling from {source_hz} Hz to {target_hz} Hz would upsample")]
    UpsamplingRequested { source_hz: f64, target_hz: f64 },
    #[error("recording of {duration_s}s is shorter than one {window_s}s window")]
    RecordingTooShort { duration_s: f64, window_s: f64 },
    #[error("modality windows have different lengths: {ecg} vs {pcg}")]
    LengthMismatch { ecg: usize, pcg: usize },
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
}

/// Windowing and fusion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Samples per modality per window (64, 128, 1024, 6000 or custom).
    pub per_modality_len: usize,
    pub window_s: f64,
    pub overlap_s: f64,
    /// Zero-variance guard for normalization.
    pub epsilon: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            per_modality_len: 128,
            window_s: 3.0,
            overlap_s: 2.0,
            epsilon: 1e-8,
        }
    }
}

impl PreprocessConfig {
    pub fn with_per_modality_len(len: usize) -> Self {
        Self {
            per_modality_len: len,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.per_modality_len == 0 {
            return Err(PreprocessError::InvalidConfig(
                "per_modality_len must be >= 1".into(),
            ));
        }
        if !(self.window_s > 0.0) {
            return Err(PreprocessError::InvalidConfig("window_s must be > 0".into()));
        }
        if !(0.0..self.window_s).contains(&self.overlap_s) {
            return Err(PreprocessError::InvalidConfig(
                "need 0 <= overlap_s < window_s".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(PreprocessError::InvalidConfig("epsilon must be > 0".into()));
        }
        Ok(())
    }

    /// Target sampling rate implied by the window geometry.
    pub fn target_rate(&self) -> f64 {
        self.per_modality_len as f64 / self.window_s
    }

    /// Fused window width (both modalities concatenated).
    pub fn fused_len(&self) -> usize {
        2 * self.per_modality_len
    }

    pub fn stride_s(&self) -> f64 {
        self.window_s - self.overlap_s
    }
}

/// The fused per-window input tensor: ECG in `values[..len/2]`, PCG in
/// `values[len/2..]`, plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedWindow {
    pub values: Vec<f32>,
    pub record_id: String,
    pub window_index: u32,
    pub label: Label,
}

/// Fill NaN markers: interior gaps by linear interpolation between the
/// nearest valid neighbors, leading/trailing gaps by the nearest valid value.
/// Non-missing samples pass through unchanged.
pub fn interpolate_missing(s: &Signal) -> Result<Signal, PreprocessError> {
    let n = s.samples.len();
    let mut out = s.samples.clone();

    let valid: Vec<usize> = (0..n).filter(|&i| !s.samples[i].is_nan()).collect();
    if valid.is_empty() {
        return Err(PreprocessError::AllMissing);
    }

    let (first, last) = (valid[0], *valid.last().unwrap());
    for v in out.iter_mut().take(first) {
        *v = s.samples[first];
    }
    for v in out.iter_mut().skip(last + 1) {
        *v = s.samples[last];
    }
    for pair in valid.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b > a + 1 {
            let (ya, yb) = (s.samples[a], s.samples[b]);
            let span = (b - a) as f64;
            for i in a + 1..b {
                let t = (i - a) as f64 / span;
                out[i] = ya + (yb - ya) * t;
            }
        }
    }

    Ok(Signal {
        samples: out,
        rate: s.rate,
        modality: s.modality,
    })
}

/// Linear downsampling to the rate implied by `target_len_per_window`
/// samples over `window_s` seconds. Output sample `j` is interpolated at
/// source position `j * source_rate / target_rate`; output length is
/// `round(len * target_rate / source_rate)`.
pub fn resample(
    s: &Signal,
    target_len_per_window: usize,
    window_s: f64,
) -> Result<Signal, PreprocessError> {
    let target_rate = target_len_per_window as f64 / window_s;
    if target_rate > s.rate {
        return Err(PreprocessError::UpsamplingRequested {
            source_hz: s.rate,
            target_hz: target_rate,
        });
    }
    let ratio = target_rate / s.rate;
    if ratio == 1.0 {
        return Ok(Signal {
            rate: target_rate,
            ..s.clone()
        });
    }

    let n = s.samples.len();
    let out_len = (n as f64 * ratio).round() as usize;
    let max_pos = (n - 1) as f64;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let pos = (j as f64 / ratio).min(max_pos);
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        let v = if frac == 0.0 {
            s.samples[i0]
        } else {
            s.samples[i0] + (s.samples[i0 + 1] - s.samples[i0]) * frac
        };
        out.push(v);
    }

    Ok(Signal {
        samples: out,
        rate: target_rate,
        modality: s.modality,
    })
}

/// Z-score to mean 0, population standard deviation 1. Signals with
/// population std below `epsilon` become all zeros.
pub fn normalize(s: &Signal, epsilon: f64) -> Signal {
    let n = s.samples.len() as f64;
    let mean = s.samples.iter().sum::<f64>() / n;
    let var = s.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let samples = if std < epsilon {
        vec![0.0; s.samples.len()]
    } else {
        s.samples.iter().map(|v| (v - mean) / std).collect()
    };
    Signal {
        samples,
        rate: s.rate,
        modality: s.modality,
    }
}

/// Number of windows and the integer sample stride for a signal of `len`
/// samples at the config's target rate.
///
/// The window count follows the time-domain rule
/// `floor((duration - window_s)/stride_s) + 1`; the sample stride is
/// `floor(stride_s * rate)` so every window stays inside the signal even
/// when the stride in samples is fractional (42.667 Hz makes a 1 s stride
/// 42.67 samples).
fn window_layout(len: usize, cfg: &PreprocessConfig) -> Option<(usize, usize)> {
    let window_len = cfg.per_modality_len;
    if len < window_len {
        return None;
    }
    let stride_samples_exact = cfg.stride_s() * cfg.target_rate();
    let count = ((len - window_len) as f64 / stride_samples_exact + 1e-9).floor() as usize + 1;
    let stride = stride_samples_exact.floor() as usize;
    Some((count, stride.max(1)))
}

/// Slice two same-rate, same-duration signals into overlapping windows and
/// fuse each pair. Both signals must already be at the target rate and
/// normalized per recording.
pub fn extract_windows(
    ecg: &Signal,
    pcg: &Signal,
    record_id: &str,
    label: Label,
    cfg: &PreprocessConfig,
) -> Result<Vec<FusedWindow>, PreprocessError> {
    cfg.validate()?;
    if ecg.samples.len() != pcg.samples.len() {
        return Err(PreprocessError::LengthMismatch {
            ecg: ecg.samples.len(),
            pcg: pcg.samples.len(),
        });
    }
    let len = ecg.samples.len();
    let window_len = cfg.per_modality_len;
    let (count, stride) = window_layout(len, cfg).ok_or(PreprocessError::RecordingTooShort {
        duration_s: len as f64 / cfg.target_rate(),
        window_s: cfg.window_s,
    })?;

    let mut windows = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * stride;
        debug_assert!(start + window_len <= len);
        let ecg_win = &ecg.samples[start..start + window_len];
        let pcg_win = &pcg.samples[start..start + window_len];
        let mut fused = fuse(ecg_win, pcg_win)?;
        fused.record_id = record_id.to_string();
        fused.window_index = k as u32;
        fused.label = label;
        windows.push(fused);
    }
    Ok(windows)
}

/// Concatenate one ECG window and one PCG window in the width dimension:
/// ECG occupies the first half, PCG the second.
pub fn fuse(ecg_win: &[f64], pcg_win: &[f64]) -> Result<FusedWindow, PreprocessError> {
    if ecg_win.len() != pcg_win.len() {
        return Err(PreprocessError::LengthMismatch {
            ecg: ecg_win.len(),
            pcg: pcg_win.len(),
        });
    }
    let mut values = Vec::with_capacity(2 * ecg_win.len());
    values.extend(ecg_win.iter().map(|&v| v as f32));
    values.extend(pcg_win.iter().map(|&v| v as f32));
    Ok(FusedWindow {
        values,
        record_id: String::new(),
        window_index: 0,
        label: Label::Normal,
    })
}

/// Full pipeline for one recording: interpolate, resample, normalize,
/// window, fuse.
pub fn preprocess_record(
    record: &PairedRecord,
    cfg: &PreprocessConfig,
) -> Result<Vec<FusedWindow>, PreprocessError> {
    let mut prepared = Vec::with_capacity(2);
    for sig in [&record.ecg, &record.pcg] {
        let filled = interpolate_missing(sig)?;
        let resampled = resample(&filled, cfg.per_modality_len, cfg.window_s)?;
        prepared.push(normalize(&resampled, cfg.epsilon));
    }
    // Different source rates can resample to lengths off by one; align on
    // the shorter before windowing.
    let common = prepared[0].samples.len().min(prepared[1].samples.len());
    for sig in &mut prepared {
        sig.samples.truncate(common);
    }
    extract_windows(&prepared[0], &prepared[1], &record.record_id, record.label, cfg)
}

pub mod cache {
    //! Flat binary cache of fused windows.
    //!
    //! Layout: magic `FWIN`, version u16, count u32, then per window:
    //! record id (u16 length + UTF-8 bytes), window_index u32, label u8
    //! (0 = normal, 1 = abnormal), and `2 * per_modality_len` little-endian
    //! f32 values (256 for the primary configuration). The reader must know
    //! the fused width, which comes from the preprocess config.

    use super::FusedWindow;
    use crate::io::Label;
    use thiserror::Error;

    pub const MAGIC: &[u8; 4] = b"FWIN";
    pub const VERSION: u16 = 1;

    #[derive(Debug, Error)]
    pub enum CacheError {
        #[error("bad magic: not a window cache")]
        BadMagic,
        #[error("unsupported cache version {0}")]
        BadVersion(u16),
        #[error("cache truncated")]
        Truncated,
        #[error("record id is not valid UTF-8")]
        BadRecordId,
        #[error("bad label byte {0}")]
        BadLabel(u8),
        #[error("trailing bytes after the declared window count")]
        TrailingBytes,
        #[error("non-finite value in cached window")]
        NonFinite,
    }

    pub fn write(windows: &[FusedWindow]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(windows.len() as u32).to_le_bytes());
        for w in windows {
            let id = w.record_id.as_bytes();
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id);
            out.extend_from_slice(&w.window_index.to_le_bytes());
            out.push(w.label.class_index() as u8);
            for v in &w.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a cache produced by [`write`]. `fused_len` is the expected
    /// number of f32 values per window (2 × per-modality length).
    pub fn read(data: &[u8], fused_len: usize) -> Result<Vec<FusedWindow>, CacheError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CacheError> {
            let end = pos.checked_add(n).ok_or(CacheError::Truncated)?;
            if end > data.len() {
                return Err(CacheError::Truncated);
            }
            let slice = &data[*pos..end];
            *pos = end;
            Ok(slice)
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(CacheError::BadMagic);
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(CacheError::BadVersion(version));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

        // Cheap sanity bound before allocating: every window needs at least
        // its fixed-size fields.
        let min_window = 2 + 4 + 1 + fused_len * 4;
        if count.saturating_mul(min_window) > data.len() {
            return Err(CacheError::Truncated);
        }

        let mut windows = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(take(&mut pos, id_len)?)
                .map_err(|_| CacheError::BadRecordId)?
                .to_string();
            let window_index = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            let label_byte = take(&mut pos, 1)?[0];
            let label = Label::from_class_index(label_byte as usize)
                .ok_or(CacheError::BadLabel(label_byte))?;
            let mut values = Vec::with_capacity(fused_len);
            for chunk in take(&mut pos, fused_len * 4)?.chunks_exact(4) {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(CacheError::NonFinite);
                }
                values.push(v);
            }
            windows.push(FusedWindow {
                values,
                record_id: id,
                window_index,
                label,
            });
        }
        if pos != data.len() {
            return Err(CacheError::TrailingBytes);
        }
        Ok(windows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Modality;

    fn sig(samples: Vec<f64>, rate: f64) -> Signal {
        Signal {
            samples,
            rate,
            modality: Modality::Ecg,
        }
    }

    #[test]
    fn interpolates_interior_gap_linearly() {
        let s = sig(vec![1.0, f64::NAN, 3.0], 10.0);
        assert_eq!(interpolate_missing(&s).unwrap().samples, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn fills_edges_with_nearest_valid() {
        let s = sig(vec![f64::NAN, 5.0, 5.0], 10.0);
        assert_eq!(interpolate_missing(&s).unwrap().samples, vec![5.0, 5.0, 5.0]);
        let s = sig(vec![2.0, f64::NAN, f64::NAN], 10.0);
        assert_eq!(interpolate_missing(&s).unwrap().samples, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn interpolation_is_identity_without_missing() {
        let s = sig(vec![0.5, -1.0, 2.0], 10.0);
        assert_eq!(interpolate_missing(&s).unwrap().samples, s.samples);
    }

    #[test]
    fn all_missing_is_an_error() {
        let s = sig(vec![f64::NAN, f64::NAN], 10.0);
        assert!(matches!(
            interpolate_missing(&s),
            Err(PreprocessError::AllMissing)
        ));
    }

    #[test]
    fn resample_6000_at_2000hz_gives_128_at_42_667hz() {
        let s = sig((0..6000).map(f64::from).collect(), 2000.0);
        let r = resample(&s, 128, 3.0).unwrap();
        assert_eq!(r.samples.len(), 128);
        assert!((r.rate - 128.0 / 3.0).abs() < 1e-12);
        assert!((r.rate - 42.667).abs() < 1e-3);
    }

    #[test]
    fn resample_identity_at_equal_rate() {
        let s = sig(vec![1.0, 4.0, 9.0, 16.0, 25.0, 36.0], 2.0);
        let r = resample(&s, 6, 3.0).unwrap();
        assert_eq!(r.samples, s.samples);
    }

    #[test]
    fn resample_rejects_upsampling() {
        let s = sig(vec![0.0; 10], 10.0);
        assert!(matches!(
            resample(&s, 128, 3.0),
            Err(PreprocessError::UpsamplingRequested { .. })
        ));
    }

    #[test]
    fn resample_preserves_affine_ramps() {
        // Linear interpolation reproduces affine functions exactly; fit the
        // best line through the output and check residuals.
        let s = sig((0..6000).map(|i| 0.25 * f64::from(i) - 3.0).collect(), 2000.0);
        let r = resample(&s, 128, 3.0).unwrap();
        let n = r.samples.len() as f64;
        let xs: Vec<f64> = (0..r.samples.len()).map(|i| i as f64).collect();
        let mean_x = xs.iter().sum::<f64>() / n;
        let mean_y = r.samples.iter().sum::<f64>() / n;
        let slope = xs
            .iter()
            .zip(&r.samples)
            .map(|(x, y)| (x - mean_x) * (y - mean_y))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mean_x).powi(2)).sum::<f64>();
        let max_dev = xs
            .iter()
            .zip(&r.samples)
            .map(|(x, y)| (y - (mean_y + slope * (x - mean_x))).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-9, "max deviation {max_dev}");
    }

    #[test]
    fn normalize_two_point_contract() {
        let s = sig(vec![0.0, 2.0], 10.0);
        assert_eq!(normalize(&s, 1e-8).samples, vec![-1.0, 1.0]);
    }

    #[test]
    fn normalize_constant_signal_becomes_zeros() {
        let s = sig(vec![5.0, 5.0, 5.0], 10.0);
        assert_eq!(normalize(&s, 1e-8).samples, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let s = sig(vec![1.0, -0.5, 0.25, 3.0, -2.0], 10.0);
        let once = normalize(&s, 1e-8);
        let twice = normalize(&once, 1e-8);
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            assert!((a - b).abs() < 1e-6);
        }
        let mean: f64 = once.samples.iter().sum::<f64>() / once.samples.len() as f64;
        let var: f64 =
            once.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / once.samples.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    fn window_count_for_duration(dur_s: f64) -> usize {
        let cfg = PreprocessConfig::default();
        let src = sig(vec![0.1; (dur_s * 2000.0) as usize], 2000.0);
        let r = resample(&src, cfg.per_modality_len, cfg.window_s).unwrap();
        let e = Signal { modality: Modality::Ecg, ..r.clone() };
        let p = Signal { modality: Modality::Pcg, ..r };
        extract_windows(&e, &p, "t", Label::Normal, &cfg)
            .unwrap()
            .len()
    }

    #[test]
    fn window_counts_match_duration_formula() {
        assert_eq!(window_count_for_duration(9.0), 7);
        assert_eq!(window_count_for_duration(3.0), 1);
        assert_eq!(window_count_for_duration(37.0), 35);
    }

    #[test]
    fn too_short_recording_is_an_error() {
        let cfg = PreprocessConfig::default();
        let e = sig(vec![0.0; 100], cfg.target_rate());
        let p = Signal { modality: Modality::Pcg, ..e.clone() };
        assert!(matches!(
            extract_windows(&e, &p, "t", Label::Normal, &cfg),
            Err(PreprocessError::RecordingTooShort { .. })
        ));
    }

    #[test]
    fn fuse_placement_and_split_inverse() {
        let ecg = vec![1.0; 128];
        let pcg = vec![2.0; 128];
        let w = fuse(&ecg, &pcg).unwrap();
        assert_eq!(w.values.len(), 256);
        assert_eq!(w.values[0], 1.0);
        assert_eq!(w.values[127], 1.0);
        assert_eq!(w.values[128], 2.0);
        assert_eq!(w.values[255], 2.0);
        let (e2, p2) = w.values.split_at(128);
        assert!(e2.iter().all(|&v| v == 1.0) && p2.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn fuse_rejects_mismatched_lengths() {
        assert!(matches!(
            fuse(&vec![0.0; 128], &vec![0.0; 64]),
            Err(PreprocessError::LengthMismatch { ecg: 128, pcg: 64 })
        ));
    }

    #[test]
    fn windows_overlap_by_config() {
        // Integer-rate config: 10 Hz, 3 s window, 2 s overlap -> stride 10,
        // overlap exactly 20 samples.
        let cfg = PreprocessConfig {
            per_modality_len: 30,
            window_s: 3.0,
            overlap_s: 2.0,
            epsilon: 1e-8,
        };
        let e = sig((0..100).map(f64::from).collect(), 10.0);
        let p = Signal { modality: Modality::Pcg, ..e.clone() };
        let ws = extract_windows(&e, &p, "t", Label::Normal, &cfg).unwrap();
        assert_eq!(ws.len(), 8);
        for pair in ws.windows(2) {
            let prev = &pair[0].values[..30];
            let next = &pair[1].values[..30];
            assert_eq!(&prev[10..], &next[..20]);
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let rec = PairedRecord {
            record_id: "d".into(),
            ecg: sig((0..18000).map(|i| (f64::from(i) * 0.01).sin()).collect(), 2000.0),
            pcg: Signal {
                modality: Modality::Pcg,
                ..sig((0..18000).map(|i| (f64::from(i) * 0.02).cos()).collect(), 2000.0)
            },
            label: Label::Abnormal,
            duration_s: 9.0,
        };
        let cfg = PreprocessConfig::default();
        let a = preprocess_record(&rec, &cfg).unwrap();
        let b = preprocess_record(&rec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert!(a.iter().all(|w| w.values.len() == 256));
        assert!(a.iter().all(|w| w.values.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn cache_roundtrip_and_errors() {
        let windows = vec![
            FusedWindow {
                values: vec![0.5; 8],
                record_id: "a1".into(),
                window_index: 0,
                label: Label::Normal,
            },
            FusedWindow {
                values: vec![-0.25; 8],
                record_id: "a1".into(),
                window_index: 1,
                label: Label::Abnormal,
            },
        ];
        let bytes = cache::write(&windows);
        let back = cache::read(&bytes, 8).unwrap();
        assert_eq!(back, windows);
        // Re-encoding is bit-identical.
        assert_eq!(cache::write(&back), bytes);

        assert!(matches!(
            cache::read(b"NOPE", 8),
            Err(cache::CacheError::BadMagic)
        ));
        assert!(matches!(
            cache::read(&bytes[..bytes.len() - 3], 8),
            Err(cache::CacheError::Truncated)
        ));
        // Wrong fused_len is detected (either short read or trailing bytes).
        assert!(cache::read(&bytes, 4).is_err());
    }
}
