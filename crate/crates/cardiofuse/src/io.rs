//! Reading PhysioNet-style records: WFDB-subset headers and signal files,
//! 16-bit PCM WAV for the PCG audio, and the `REFERENCE.csv` label index.
//!
//! Only the pieces the target dataset needs are implemented: WFDB storage
//! format 16 (16-bit two's complement, little-endian, frame-interleaved),
//! canonical mono PCM16 WAV, and two-column label files. Everything here is
//! a pure function over bytes; nothing panics on malformed input.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

/// WFDB sentinel for an invalid/missing sample in format 16.
pub const WFDB_MISSING: i16 = i16::MIN;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("malformed header: {reason} (line {line})")]
    MalformedHeader { line: usize, reason: String },
    #[error("unsupported storage format `{0}` (only format 16 is supported)")]
    UnsupportedFormat(String),
    #[error("signal data length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("channel {channel} out of range for {n_channels}-channel record")]
    ChannelOutOfRange { channel: usize, n_channels: usize },
    #[error("not a RIFF/WAVE stream")]
    NotRiff,
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("duplicate record id `{0}` in label index")]
    DuplicateRecord(String),
    #[error("bad label value `{value}` for record `{record}` (expected -1 or 1)")]
    BadLabelValue { record: String, value: String },
    #[error("record `{record}` is missing a {modality} source")]
    MissingModality { record: String, modality: Modality },
    #[error("record `{0}` has no entry in the label index")]
    MissingLabel(String),
    #[error("channel description `{0}` matches neither ECG nor PCG")]
    UnknownModality(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which sensor a signal came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Ecg,
    Pcg,
}

impl Modality {
    /// Case-insensitive match against a WFDB channel description.
    pub fn from_description(desc: &str) -> Option<Self> {
        let upper = desc.to_ascii_uppercase();
        if upper.contains("ECG") {
            Some(Modality::Ecg)
        } else if upper.contains("PCG") {
            Some(Modality::Pcg)
        } else {
            None
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Ecg => write!(f, "ECG"),
            Modality::Pcg => write!(f, "PCG"),
        }
    }
}

/// Recording-level class label. Index convention everywhere: 0 = Normal,
/// 1 = Abnormal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn from_class_index(idx: usize) -> Option<Self> {
        match idx {
            0 => Some(Label::Normal),
            1 => Some(Label::Abnormal),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Normal => write!(f, "Normal"),
            Label::Abnormal => write!(f, "Abnormal"),
        }
    }
}

/// One channel's layout in a WFDB header.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub description: String,
    /// ADC counts per physical unit; samples are converted as (raw - baseline)/gain.
    pub gain: f64,
    pub baseline: i32,
}

/// Parsed `<record>.hea` file (WFDB subset: single segment, format 16).
#[derive(Debug, Clone, PartialEq)]
pub struct RecordHeader {
    pub record_id: String,
    pub n_channels: usize,
    pub sampling_rate: f64,
    pub n_samples: usize,
    pub channels: Vec<ChannelSpec>,
}

/// One modality's sample sequence. Samples are in physical units; missing
/// values are marked with NaN and only appear before preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub rate: f64,
    pub modality: Modality,
}

impl Signal {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate
    }

    pub fn has_missing(&self) -> bool {
        self.samples.iter().any(|v| v.is_nan())
    }
}

/// A labeled recording with both modalities covering the same time interval.
#[derive(Debug, Clone)]
pub struct PairedRecord {
    pub record_id: String,
    pub ecg: Signal,
    pub pcg: Signal,
    pub label: Label,
    pub duration_s: f64,
}

fn header_err(line: usize, reason: impl Into<String>) -> IoError {
    IoError::MalformedHeader {
        line,
        reason: reason.into(),
    }
}

/// Parse a WFDB-subset header.
///
/// First line: `record_id n_channels sampling_rate n_samples` (extra fields
/// such as base time/date are tolerated and ignored), then one line per
/// channel: `file format gain[(baseline)][/units] [adc_res adc_zero ...]
/// description`. Only storage format 16 is accepted.
pub fn parse_wfdb_header(text: &str) -> Result<RecordHeader, IoError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (line_no, first) = lines.next().ok_or_else(|| header_err(0, "empty header"))?;
    let fields: Vec<&str> = first.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(header_err(
            line_no,
            format!("record line has {} fields, need 4", fields.len()),
        ));
    }
    let record_id = fields[0].to_string();
    let n_channels: usize = fields[1]
        .parse()
        .map_err(|_| header_err(line_no, "non-numeric channel count"))?;
    let sampling_rate: f64 = fields[2]
        .parse()
        .map_err(|_| header_err(line_no, "non-numeric sampling rate"))?;
    let n_samples: usize = fields[3]
        .parse()
        .map_err(|_| header_err(line_no, "non-numeric sample count"))?;
    if n_channels == 0 {
        return Err(header_err(line_no, "channel count must be >= 1"));
    }
    if !(sampling_rate.is_finite() && sampling_rate > 0.0) {
        return Err(header_err(line_no, "sampling rate must be > 0"));
    }
    if n_samples == 0 {
        return Err(header_err(line_no, "sample count must be > 0"));
    }

    let mut channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let (line_no, line) = lines
            .next()
            .ok_or_else(|| header_err(0, "fewer channel lines than declared channels"))?;
        channels.push(parse_channel_line(line_no, line)?);
    }

    Ok(RecordHeader {
        record_id,
        n_channels,
        sampling_rate,
        n_samples,
        channels,
    })
}

fn parse_channel_line(line_no: usize, line: &str) -> Result<ChannelSpec, IoError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() < 2 {
        return Err(header_err(line_no, "channel line needs file and format"));
    }
    if tokens[1] != "16" {
        return Err(IoError::UnsupportedFormat(tokens[1].to_string()));
    }

    // gain spec: `gain`, `gain(baseline)`, optionally followed by `/units`.
    let (mut gain, mut baseline) = (200.0, None); // WFDB defaults
    if let Some(spec) = tokens.get(2) {
        let spec = spec.split('/').next().unwrap_or(spec);
        let (gain_str, base_str) = match spec.split_once('(') {
            Some((g, rest)) => (g, rest.strip_suffix(')')),
            None => (spec, None),
        };
        gain = gain_str
            .parse::<f64>()
            .map_err(|_| header_err(line_no, "non-numeric gain"))?;
        if let Some(b) = base_str {
            baseline = Some(
                b.parse::<i32>()
                    .map_err(|_| header_err(line_no, "non-numeric baseline"))?,
            );
        }
    }
    if gain == 0.0 {
        gain = 200.0; // WFDB: a gain of zero means "use the default"
    }
    if !gain.is_finite() {
        return Err(header_err(line_no, "gain must be finite"));
    }

    // Baseline falls back to the ADC zero field when not given in parens.
    let adc_zero = tokens.get(4).and_then(|t| t.parse::<i32>().ok());
    let baseline = baseline.or(adc_zero).unwrap_or(0);

    // Description: everything after the 8 numeric fields, else the last token.
    let description = if tokens.len() > 8 {
        tokens[8..].join(" ")
    } else {
        tokens.last().map_or(String::new(), |t| t.to_string())
    };

    Ok(ChannelSpec {
        description,
        gain,
        baseline,
    })
}

/// Decode one channel from a frame-interleaved format-16 signal file.
///
/// Raw counts are converted to physical units as `(raw - baseline) / gain`;
/// the WFDB sentinel −32768 becomes a NaN missing marker.
pub fn read_wfdb_signal(
    header: &RecordHeader,
    data: &[u8],
    channel: usize,
) -> Result<Signal, IoError> {
    if channel >= header.n_channels {
        return Err(IoError::ChannelOutOfRange {
            channel,
            n_channels: header.n_channels,
        });
    }
    let expected = header
        .n_samples
        .checked_mul(header.n_channels)
        .and_then(|v| v.checked_mul(2))
        .ok_or(IoError::LengthMismatch {
            expected: usize::MAX,
            actual: data.len(),
        })?;
    if data.len() != expected {
        return Err(IoError::LengthMismatch {
            expected,
            actual: data.len(),
        });
    }

    let spec = &header.channels[channel];
    let modality = Modality::from_description(&spec.description)
        .ok_or_else(|| IoError::UnknownModality(spec.description.clone()))?;

    let frame_bytes = header.n_channels * 2;
    let offset = channel * 2;
    let mut samples = Vec::with_capacity(header.n_samples);
    for frame in data.chunks_exact(frame_bytes) {
        let raw = i16::from_le_bytes([frame[offset], frame[offset + 1]]);
        if raw == WFDB_MISSING {
            samples.push(f64::NAN);
        } else {
            samples.push((f64::from(raw) - f64::from(spec.baseline)) / spec.gain);
        }
    }

    Ok(Signal {
        samples,
        rate: header.sampling_rate,
        modality,
    })
}

fn read_u16(data: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_le_bytes([*data.get(at)?, *data.get(at + 1)?]))
}

fn read_u32(data: &[u8], at: usize) -> Option<u32> {
    Some(u32::from_le_bytes([
        *data.get(at)?,
        *data.get(at + 1)?,
        *data.get(at + 2)?,
        *data.get(at + 3)?,
    ]))
}

/// Decode a canonical mono PCM16 RIFF/WAVE stream. Samples are scaled to
/// [−1, 1) by dividing by 32768.
pub fn read_wav_pcm(data: &[u8]) -> Result<Signal, IoError> {
    if data.len() < 12 || &data[0..4] != b"RIFF" || &data[8..12] != b"WAVE" {
        return Err(IoError::NotRiff);
    }

    let mut pos = 12;
    let mut format: Option<(u16, u32, u16, u16)> = None; // (audio_fmt, rate, channels, bits)
    let mut pcm: Option<&[u8]> = None;

    while pos + 8 <= data.len() {
        let id = &data[pos..pos + 4];
        let size = read_u32(data, pos + 4).ok_or(IoError::NotRiff)? as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).ok_or(IoError::NotRiff)?;
        if body_end > data.len() {
            return Err(IoError::NotRiff);
        }
        let body = &data[body_start..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(IoError::UnsupportedEncoding("short fmt chunk".into()));
                }
                let audio_fmt = read_u16(body, 0).unwrap();
                let channels = read_u16(body, 2).unwrap();
                let rate = read_u32(body, 4).unwrap();
                let bits = read_u16(body, 14).unwrap();
                format = Some((audio_fmt, rate, channels, bits));
            }
            b"data" => pcm = Some(body),
            _ => {} // skip unknown chunks (LIST, fact, ...)
        }
        // chunks are word-aligned: odd sizes carry a pad byte
        pos = body_end + (size & 1);
    }

    let (audio_fmt, rate, channels, bits) =
        format.ok_or_else(|| IoError::UnsupportedEncoding("missing fmt chunk".into()))?;
    if audio_fmt != 1 {
        return Err(IoError::UnsupportedEncoding(format!(
            "audio format {audio_fmt}, want PCM (1)"
        )));
    }
    if bits != 16 {
        return Err(IoError::UnsupportedEncoding(format!(
            "{bits}-bit samples, want 16"
        )));
    }
    if channels != 1 {
        return Err(IoError::UnsupportedEncoding(format!(
            "{channels} channels, want mono"
        )));
    }
    if rate == 0 {
        return Err(IoError::UnsupportedEncoding("zero sample rate".into()));
    }
    let pcm = pcm.ok_or_else(|| IoError::UnsupportedEncoding("missing data chunk".into()))?;
    if pcm.len() % 2 != 0 {
        return Err(IoError::UnsupportedEncoding(
            "data chunk not a whole number of samples".into(),
        ));
    }

    let samples = pcm
        .chunks_exact(2)
        .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0)
        .collect();

    Ok(Signal {
        samples,
        rate: f64::from(rate),
        modality: Modality::Pcg,
    })
}

/// Write a canonical mono PCM16 WAV stream; inverse of [`read_wav_pcm`] for
/// raw i16 payloads.
pub fn write_wav_pcm(samples: &[i16], rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Parse a `REFERENCE.csv`-style label index: `record_id,label` per line with
/// label −1 (normal) or 1 (abnormal).
pub fn load_label_index(csv_text: &str) -> Result<BTreeMap<String, Label>, IoError> {
    let mut index = BTreeMap::new();
    for raw in csv_text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (id, value) = line.split_once(',').ok_or_else(|| IoError::BadLabelValue {
            record: line.to_string(),
            value: String::new(),
        })?;
        let id = id.trim();
        let label = match value.trim() {
            "-1" => Label::Normal,
            "1" => Label::Abnormal,
            other => {
                return Err(IoError::BadLabelValue {
                    record: id.to_string(),
                    value: other.to_string(),
                })
            }
        };
        if index.insert(id.to_string(), label).is_some() {
            return Err(IoError::DuplicateRecord(id.to_string()));
        }
    }
    Ok(index)
}

/// Find a channel whose description matches the modality.
fn find_channel(header: &RecordHeader, modality: Modality) -> Option<usize> {
    header
        .channels
        .iter()
        .position(|c| Modality::from_description(&c.description) == Some(modality))
}

/// Load one record from a dataset directory: `<id>.hea` + `<id>.dat`, with
/// the PCG taken from `<id>.wav` when present (the canonical container),
/// falling back to a WFDB channel described as PCG.
///
/// Both signals are trimmed to their common duration. Records lacking either
/// modality fail with [`IoError::MissingModality`], which corpus loading
/// treats as an exclusion rather than a hard error.
pub fn load_record(
    directory: &Path,
    record_id: &str,
    index: &BTreeMap<String, Label>,
) -> Result<PairedRecord, IoError> {
    let label = *index
        .get(record_id)
        .ok_or_else(|| IoError::MissingLabel(record_id.to_string()))?;

    let header_text = std::fs::read_to_string(directory.join(format!("{record_id}.hea")))?;
    let header = parse_wfdb_header(&header_text)?;
    let dat = std::fs::read(directory.join(format!("{record_id}.dat")))?;

    let ecg = match find_channel(&header, Modality::Ecg) {
        Some(ch) => read_wfdb_signal(&header, &dat, ch)?,
        None => {
            return Err(IoError::MissingModality {
                record: record_id.to_string(),
                modality: Modality::Ecg,
            })
        }
    };

    let wav_path = directory.join(format!("{record_id}.wav"));
    let pcg = if wav_path.is_file() {
        read_wav_pcm(&std::fs::read(wav_path)?)?
    } else if let Some(ch) = find_channel(&header, Modality::Pcg) {
        read_wfdb_signal(&header, &dat, ch)?
    } else {
        return Err(IoError::MissingModality {
            record: record_id.to_string(),
            modality: Modality::Pcg,
        });
    };

    Ok(pair_signals(record_id, ecg, pcg, label))
}

/// Trim to the common duration and attach the label. The expected dataset
/// range is 9–37 s; anything outside is only warned about.
pub fn pair_signals(record_id: &str, mut ecg: Signal, mut pcg: Signal, label: Label) -> PairedRecord {
    let duration_s = ecg.duration_s().min(pcg.duration_s());
    for sig in [&mut ecg, &mut pcg] {
        let keep = ((duration_s * sig.rate) + 1e-9).floor() as usize;
        sig.samples.truncate(keep);
    }
    if !(9.0..=37.0).contains(&duration_s) {
        log::warn!("record {record_id}: duration {duration_s:.2}s outside the expected 9-37s range");
    }
    PairedRecord {
        record_id: record_id.to_string(),
        ecg,
        pcg,
        label,
        duration_s,
    }
}

/// Result of scanning a dataset directory.
#[derive(Debug, Default)]
pub struct Corpus {
    pub records: Vec<PairedRecord>,
    /// Records excluded because one modality was absent (the dataset's
    /// 409 → 405 filtering).
    pub missing_modality: Vec<String>,
}

/// Load every record with a `<id>.hea` file in `directory`, using
/// `REFERENCE.csv` from the same directory for labels.
///
/// Invariant: `records.len() + missing_modality.len()` equals the number of
/// header files.
pub fn load_corpus(directory: &Path) -> Result<Corpus, IoError> {
    let index = load_label_index(&std::fs::read_to_string(directory.join("REFERENCE.csv"))?)?;

    let mut ids = Vec::new();
    for entry in std::fs::read_dir(directory)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "hea") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();

    let mut corpus = Corpus::default();
    for id in ids {
        match load_record(directory, &id, &index) {
            Ok(rec) => corpus.records.push(rec),
            Err(IoError::MissingModality { record, .. }) => corpus.missing_modality.push(record),
            Err(e) => return Err(e),
        }
    }
    Ok(corpus)
}
