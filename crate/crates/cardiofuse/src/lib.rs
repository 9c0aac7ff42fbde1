//! End-to-end toolkit for classifying synchronized ECG + PCG recordings with a
//! tiny 1-D CNN that fits on a sensor patch.
//!
//! The pipeline is: parse PhysioNet-style records ([`io`]), resample and fuse
//! the two modalities into fixed-length windows ([`preprocess`]), train a small
//! bottleneck CNN from scratch ([`nn`], [`model`], [`train`]), optionally
//! quantize it to int8 with quantization-aware training ([`quant`]), and run
//! streaming majority-vote classification with an energy cost model for the
//! inference-vs-transmit trade-off ([`stream`]).
//!
//! Everything is deterministic under a seed: same inputs, same config, same
//! seed, bit-identical outputs.

pub mod io;
pub mod kvcfg;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod quant;
pub mod stream;
pub mod synth;
pub mod train;
pub mod util;

pub use io::{Label, Modality, PairedRecord, RecordHeader, Signal};
pub use preprocess::{FusedWindow, PreprocessConfig};
pub use train::{Metrics, MetricsReport, TrainConfig};
