//! Training and evaluation: AdamW with decoupled weight decay, inverse-
//! frequency weighted sampling, the affine-init grid search, repeated
//! stratified recording-level k-fold cross-validation and the metric suite.
//!
//! Everything is deterministic under the config seed: fold assignment,
//! initialization, sampling and therefore the full metrics report.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::io::Label;
use crate::kvcfg::{KvError, KvMap};
use crate::model::{Model, ModelArch, ModelError};
use crate::nn::{NnError, Param, Scalar, Tensor};
use crate::preprocess::FusedWindow;
use crate::stream::recording_decision;
use crate::util::sub_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need both classes present, found only one")]
    SingleClass,
    #[error("class {class} has {count} recordings, fewer than k = {k}")]
    TooFewRecordings { class: Label, count: usize, k: usize },
    #[error("bad fold plan: {0}")]
    BadFoldPlan(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] KvError),
}

/// Initial values for the per-modality affine transform, found by grid
/// search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineInit {
    pub scale_ecg: f64,
    pub shift_ecg: f64,
    pub scale_pcg: f64,
    pub shift_pcg: f64,
}

impl AffineInit {
    pub fn identity() -> Self {
        Self { scale_ecg: 1.0, shift_ecg: 0.0, scale_pcg: 1.0, shift_pcg: 0.0 }
    }
}

/// Training protocol parameters. Defaults follow the published protocol:
/// 300 epochs, AdamW at lr 1e-3, batch size 32. Weight decay is our knob
/// (the protocol leaves it unstated).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub affine_init: AffineInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            affine_init: AffineInit::identity(),
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        let mut cfg = Self::default();
        if let Some(v) = kv.get_parsed("epochs", "usize")? {
            cfg.epochs = v;
        }
        if let Some(v) = kv.get_parsed("lr", "f64")? {
            cfg.lr = v;
        }
        if let Some(v) = kv.get_parsed("batch_size", "usize")? {
            cfg.batch_size = v;
        }
        if let Some(v) = kv.get_parsed("weight_decay", "f64")? {
            cfg.weight_decay = v;
        }
        if let Some(v) = kv.get_parsed("beta1", "f64")? {
            cfg.beta1 = v;
        }
        if let Some(v) = kv.get_parsed("beta2", "f64")? {
            cfg.beta2 = v;
        }
        if let Some(v) = kv.get_parsed("eps", "f64")? {
            cfg.eps = v;
        }
        if let Some(v) = kv.get_parsed("seed", "u64")? {
            cfg.seed = v;
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("epochs", self.epochs);
        kv.set("lr", self.lr);
        kv.set("batch_size", self.batch_size);
        kv.set("weight_decay", self.weight_decay);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("seed", self.seed);
        kv
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// Per-parameter AdamW state.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// One AdamW update on a flat parameter tensor: bias-corrected adaptive term
/// plus decoupled decay `p <- p - lr * wd * p`, both computed from the
/// incoming parameter value.
pub fn adamw_update<S: Scalar>(
    data: &mut [S],
    grad: &[S],
    state: &mut AdamState<S>,
    step: u64,
    cfg: &TrainConfig,
) {
    if state.m.is_empty() {
        state.m = vec![S::zero(); data.len()];
        state.v = vec![S::zero(); data.len()];
    }
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let lr = S::from_f64(cfg.lr);
    let eps = S::from_f64(cfg.eps);
    let wd = S::from_f64(cfg.weight_decay);
    let corr1 = S::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let corr2 = S::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let one = S::one();

    for i in 0..data.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / corr1;
        let v_hat = state.v[i] / corr2;
        let p = data[i];
        data[i] = p - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * p;
    }
}

/// Optimizer over every parameter a [`Trainable`] exposes, in visit order.
#[derive(Debug)]
pub struct AdamW {
    cfg: TrainConfig,
    step: u64,
    state: Vec<AdamState<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { cfg: cfg.clone(), step: 0, state: Vec::new() }
    }

    pub fn step<T: Trainable + ?Sized>(&mut self, model: &mut T) {
        self.step += 1;
        let step = self.step;
        let cfg = self.cfg.clone();
        let state = &mut self.state;
        let mut idx = 0;
        model.visit_params(&mut |p: &mut Param<f32>| {
            if state.len() == idx {
                state.push(AdamState::default());
            }
            adamw_update(&mut p.data, &p.grad, &mut state[idx], step, &cfg);
            idx += 1;
        });
    }
}

// ---------------------------------------------------------------------------
// Trainable surface
// ---------------------------------------------------------------------------

/// Anything the training loop can drive: the float model and the
/// fake-quantized model both implement this.
pub trait Trainable {
    fn input_width(&self) -> usize;
    /// Forward + loss + backward on one batch; gradients accumulate into
    /// the parameters (call [`Trainable::zero_grads`] first).
    fn forward_backward(&mut self, x: &Tensor<f32>, targets: &[usize]) -> Result<f64, NnError>;
    /// Class probabilities for one window (inference mode).
    fn predict(&self, window: &[f32]) -> Result<Vec<f32>, NnError>;
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f32>));
    fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }
}

impl Trainable for Model<f32> {
    fn input_width(&self) -> usize {
        Model::input_width(self)
    }

    fn forward_backward(&mut self, x: &Tensor<f32>, targets: &[usize]) -> Result<f64, NnError> {
        Model::forward_backward(self, x, targets)
    }

    fn predict(&self, window: &[f32]) -> Result<Vec<f32>, NnError> {
        Model::predict(self, window)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        Model::visit_params(self, f)
    }
}

// ---------------------------------------------------------------------------
// Weighted sampling
// ---------------------------------------------------------------------------

/// Infinite with-replacement index stream where each window is drawn with
/// probability proportional to 1 / count(its class), balancing the classes
/// in expectation.
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl WeightedSampler {
    pub fn new(labels: &[Label], seed: u64) -> Result<Self, TrainError> {
        let n_abnormal = labels.iter().filter(|l| **l == Label::Abnormal).count();
        let n_normal = labels.len() - n_abnormal;
        if n_normal == 0 || n_abnormal == 0 {
            return Err(TrainError::SingleClass);
        }
        let weights: Vec<f64> = labels
            .iter()
            .map(|l| match l {
                Label::Normal => 1.0 / n_normal as f64,
                Label::Abnormal => 1.0 / n_abnormal as f64,
            })
            .collect();
        Ok(Self {
            dist: WeightedIndex::new(weights).expect("weights are positive"),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Iterator for WeightedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.dist.sample(&mut self.rng))
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Train for `cfg.epochs` epochs of `ceil(N / batch_size)` steps each,
/// drawing batches from the weighted sampler. Returns the model and the
/// per-epoch mean loss history.
pub fn train_model<T: Trainable>(
    windows: &[FusedWindow],
    cfg: &TrainConfig,
    mut model: T,
) -> Result<(T, Vec<f64>), TrainError> {
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let labels: Vec<Label> = windows.iter().map(|w| w.label).collect();
    let mut sampler = WeightedSampler::new(&labels, sub_seed(cfg.seed, "sampler"))?;
    let mut optimizer = AdamW::new(cfg);
    let steps_per_epoch = windows.len().div_ceil(cfg.batch_size);

    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let idx: Vec<usize> = (&mut sampler).take(cfg.batch_size).collect();
            let views: Vec<&[f32]> = idx.iter().map(|&i| windows[i].values.as_slice()).collect();
            let x = Tensor::stack_windows(&views);
            let targets: Vec<usize> = idx.iter().map(|&i| windows[i].label.class_index()).collect();
            model.zero_grads();
            epoch_loss += model.forward_backward(&x, &targets)?;
            optimizer.step(&mut model);
        }
        history.push(epoch_loss / steps_per_epoch as f64);
    }
    Ok((model, history))
}

/// Fraction of windows whose argmax class matches the label.
pub fn window_accuracy<T: Trainable>(model: &T, windows: &[FusedWindow]) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for w in windows {
        let p = model.predict(&w.values)?;
        let pred = if p[1] >= p[0] { Label::Abnormal } else { Label::Normal };
        if pred == w.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / windows.len() as f64)
}

// ---------------------------------------------------------------------------
// Affine-init grid search
// ---------------------------------------------------------------------------

/// Default search grid: scales {0.5, 1, 2, 4} per modality, shifts 0.
pub fn default_affine_grid() -> Vec<AffineInit> {
    let scales = [0.5, 1.0, 2.0, 4.0];
    let mut grid = Vec::with_capacity(16);
    for &se in &scales {
        for &sp in &scales {
            grid.push(AffineInit { scale_ecg: se, shift_ecg: 0.0, scale_pcg: sp, shift_pcg: 0.0 });
        }
    }
    grid
}

/// Probe-train each grid point for `budget_epochs` on an inner 80/20
/// recording-level split of the training data and return the point with the
/// best held-out window accuracy. Ties keep the earlier grid point.
pub fn grid_search_affine_init(
    records: &[RecordWindows],
    grid: &[AffineInit],
    budget_epochs: usize,
    cfg: &TrainConfig,
    arch: &ModelArch,
) -> Result<AffineInit, TrainError> {
    assert!(!grid.is_empty(), "grid must be non-empty");
    if records.is_empty() {
        return Ok(grid[0]);
    }

    // Stratified inner split at the recording level.
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label.class_index()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "grid.split"));
    let mut holdout: BTreeSet<usize> = BTreeSet::new();
    for ids in by_class.values() {
        let mut ids = ids.clone();
        shuffle(&mut ids, &mut rng);
        let n_val = (ids.len() / 5).max(1);
        holdout.extend(ids.into_iter().take(n_val));
    }
    let train_windows: Vec<FusedWindow> = records
        .iter()
        .enumerate()
        .filter(|(i, _)| !holdout.contains(i))
        .flat_map(|(_, r)| r.windows.iter().cloned())
        .collect();
    let val_windows: Vec<FusedWindow> = records
        .iter()
        .enumerate()
        .filter(|(i, _)| holdout.contains(i))
        .flat_map(|(_, r)| r.windows.iter().cloned())
        .collect();
    if train_windows.is_empty() || val_windows.is_empty() {
        return Ok(grid[0]);
    }

    let probe_cfg = TrainConfig { epochs: budget_epochs, ..cfg.clone() };
    let mut best: Option<(f64, AffineInit)> = None;
    for init in grid {
        let mut model = arch.build::<f32>(sub_seed(cfg.seed, "grid.init"))?;
        set_affine(&mut model, *init);
        let (model, _) = train_model(&train_windows, &probe_cfg, model)?;
        let acc = window_accuracy(&model, &val_windows)?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, *init));
        }
    }
    Ok(best.expect("grid is non-empty").1)
}

/// Overwrite a model's affine transform parameters.
pub fn set_affine(model: &mut Model<f32>, init: AffineInit) {
    let affine = match model {
        Model::Cnn(m) => &mut m.affine,
        Model::Mlp(m) => &mut m.affine,
    };
    affine.set(init.scale_ecg, init.shift_ecg, init.scale_pcg, init.shift_pcg);
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Confusion counts with abnormal as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Abnormal, Label::Abnormal) => self.tp += 1,
            (Label::Abnormal, Label::Normal) => self.fn_ += 1,
            (Label::Normal, Label::Abnormal) => self.fp += 1,
            (Label::Normal, Label::Normal) => self.tn += 1,
        }
    }
}

/// Classification metrics; ratios with a zero denominator are absent and
/// excluded from aggregation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

pub const METRIC_NAMES: [&str; 6] =
    ["accuracy", "sensitivity", "specificity", "precision", "f1", "auc"];

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => self.accuracy,
            "sensitivity" => self.sensitivity,
            "specificity" => self.specificity,
            "precision" => self.precision,
            "f1" => self.f1,
            "auc" => self.auc,
            _ => None,
        }
    }
}

/// Standard definitions from confusion counts (AUC is threshold-free and
/// computed separately).
pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let total = c.tp + c.fp + c.tn + c.fn_;
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    Metrics {
        accuracy: ratio(c.tp + c.tn, total),
        sensitivity,
        specificity: ratio(c.tn, c.tn + c.fp),
        precision,
        f1,
        auc: None,
    }
}

/// Area under the ROC curve over recording-level abnormal scores, by
/// threshold sweep with trapezoidal integration. Equals the Mann-Whitney
/// statistic P(score_abnormal > score_normal) + 0.5 P(tie).
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64, TrainError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|l| **l == Label::Abnormal).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores must not be NaN"));

    // Sweep thresholds from +inf down; emit one ROC point per distinct
    // score so ties become diagonal segments.
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            match labels[order[i]] {
                Label::Abnormal => tp += 1,
                Label::Normal => fp += 1,
            }
            i += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(auc)
}

// ---------------------------------------------------------------------------
// Fold plans and cross-validation
// ---------------------------------------------------------------------------

/// All windows of one recording, the unit the cross-validation splits on.
#[derive(Debug, Clone)]
pub struct RecordWindows {
    pub record_id: String,
    pub label: Label,
    pub windows: Vec<FusedWindow>,
}

/// Group a flat window list by recording (sorted by id; windows keep their
/// order).
pub fn group_by_recording(windows: Vec<FusedWindow>) -> Vec<RecordWindows> {
    let mut map: BTreeMap<String, RecordWindows> = BTreeMap::new();
    for w in windows {
        map.entry(w.record_id.clone())
            .or_insert_with(|| RecordWindows {
                record_id: w.record_id.clone(),
                label: w.label,
                windows: Vec::new(),
            })
            .windows
            .push(w);
    }
    map.into_values().collect()
}

/// Per-repeat assignment of recordings to folds; all windows of a recording
/// share its fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    pub repeats: usize,
    /// `assignments[repeat][record_id] = fold`.
    pub assignments: Vec<BTreeMap<String, usize>>,
}

impl FoldPlan {
    /// Label-stratified assignment: within each class, recordings are
    /// shuffled (per-repeat derived seed) and dealt round-robin.
    pub fn stratified(
        records: &[(String, Label)],
        k: usize,
        repeats: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        assert!(k >= 2, "k must be >= 2");
        let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (id, label) in records {
            by_class.entry(label.class_index()).or_default().push(id);
        }
        if by_class.len() < 2 {
            return Err(TrainError::SingleClass);
        }
        for (class, ids) in &by_class {
            if ids.len() < k {
                return Err(TrainError::TooFewRecordings {
                    class: Label::from_class_index(*class).unwrap(),
                    count: ids.len(),
                    k,
                });
            }
        }

        let mut assignments = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("folds.r{r}")));
            let mut assignment = BTreeMap::new();
            for ids in by_class.values() {
                let mut ids: Vec<&str> = ids.clone();
                ids.sort_unstable();
                shuffle(&mut ids, &mut rng);
                for (i, id) in ids.into_iter().enumerate() {
                    assignment.insert(id.to_string(), i % k);
                }
            }
            assignments.push(assignment);
        }
        Ok(Self { k, repeats, assignments })
    }

    /// Text export: a `k=..`/`repeats=..` header then `repeat,record_id,fold`
    /// lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("k={}\nrepeats={}\n", self.k, self.repeats);
        for (r, assignment) in self.assignments.iter().enumerate() {
            for (id, fold) in assignment {
                out.push_str(&format!("{r},{id},{fold}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let bad = |msg: &str| TrainError::BadFoldPlan(msg.to_string());
        let mut k = None;
        let mut repeats = None;
        let mut rows: Vec<(usize, String, usize)> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            if let Some(v) = line.strip_prefix("k=") {
                k = Some(v.parse().map_err(|_| bad("bad k"))?);
            } else if let Some(v) = line.strip_prefix("repeats=") {
                repeats = Some(v.parse().map_err(|_| bad("bad repeats"))?);
            } else {
                let mut parts = line.splitn(3, ',');
                let r = parts.next().ok_or_else(|| bad("missing repeat"))?;
                let id = parts.next().ok_or_else(|| bad("missing record id"))?;
                let fold = parts.next().ok_or_else(|| bad("missing fold"))?;
                rows.push((
                    r.parse().map_err(|_| bad("bad repeat index"))?,
                    id.to_string(),
                    fold.parse().map_err(|_| bad("bad fold index"))?,
                ));
            }
        }
        let k = k.ok_or_else(|| bad("missing k header"))?;
        let repeats = repeats.ok_or_else(|| bad("missing repeats header"))?;
        if k < 2 || repeats == 0 {
            return Err(bad("need k >= 2 and repeats >= 1"));
        }
        let mut assignments = vec![BTreeMap::new(); repeats];
        for (r, id, fold) in rows {
            if r >= repeats {
                return Err(bad("repeat index out of range"));
            }
            if fold >= k {
                return Err(bad("fold index out of range"));
            }
            if assignments[r].insert(id, fold).is_some() {
                return Err(bad("duplicate record in repeat"));
            }
        }
        let ids: BTreeSet<&String> = assignments[0].keys().collect();
        if ids.is_empty() {
            return Err(bad("empty fold plan"));
        }
        for a in &assignments {
            if a.keys().collect::<BTreeSet<_>>() != ids {
                return Err(bad("repeats do not cover the same recordings"));
            }
        }
        Ok(Self { k, repeats, assignments })
    }
}

/// Metrics of one cross-validation run (one repeat x fold).
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub repeat: usize,
    pub fold: usize,
    pub metrics: Metrics,
}

/// Per-run metrics plus mean +/- std aggregation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
}

impl MetricsReport {
    /// Sample mean and standard deviation over the runs where the metric is
    /// defined.
    pub fn mean_std(&self, metric: &str) -> Option<(f64, f64, usize)> {
        let values: Vec<f64> = self.runs.iter().filter_map(|r| r.metrics.get(metric)).collect();
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some((mean, std, values.len()))
    }

    /// One row per run plus mean/std summary rows, comma-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repeat,fold");
        for name in METRIC_NAMES {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for run in &self.runs {
            out.push_str(&format!("{},{}", run.repeat, run.fold));
            for name in METRIC_NAMES {
                out.push(',');
                out.push_str(&fmt(run.metrics.get(name)));
            }
            out.push('\n');
        }
        for stat in ["mean", "std"] {
            out.push_str(stat);
            out.push(',');
            for name in METRIC_NAMES {
                out.push(',');
                if let Some((mean, std, _)) = self.mean_std(name) {
                    out.push_str(&format!("{:.6}", if stat == "mean" { mean } else { std }));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Flat key-value summary (`accuracy.mean=...`, `accuracy.std=...`).
    pub fn summary_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("runs", self.runs.len());
        for name in METRIC_NAMES {
            if let Some((mean, std, n)) = self.mean_std(name) {
                kv.set(&format!("{name}.mean"), format!("{mean:.6}"));
                kv.set(&format!("{name}.std"), format!("{std:.6}"));
                kv.set(&format!("{name}.n"), n);
            }
        }
        kv
    }
}

/// Recording-level evaluation of one model over held-out recordings:
/// majority-vote decisions fill the confusion counts, mean window abnormal
/// probability is the AUC score.
pub fn evaluate_recordings<T: Trainable>(
    model: &T,
    records: &[&RecordWindows],
) -> Result<(ConfusionCounts, Vec<f64>, Vec<Label>), TrainError> {
    let mut confusion = ConfusionCounts::default();
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for rec in records {
        let mut probs = Vec::with_capacity(rec.windows.len());
        for w in &rec.windows {
            probs.push(f64::from(model.predict(&w.values)?[1]));
        }
        let decision = recording_decision(&probs);
        confusion.add(rec.label, decision);
        scores.push(probs.iter().sum::<f64>() / probs.len() as f64);
        labels.push(rec.label);
    }
    Ok((confusion, scores, labels))
}

/// One full repeated k-fold cross-validation pass: for every repeat and
/// fold, trains a fresh seeded model on the other folds and evaluates
/// recording-level decisions on the held-out fold. Runs execute in
/// parallel; the report is sorted by (repeat, fold) so it is deterministic.
pub fn cross_validate(
    records: &[RecordWindows],
    plan: &FoldPlan,
    cfg: &TrainConfig,
    arch: &ModelArch,
) -> Result<MetricsReport, TrainError> {
    for a in &plan.assignments {
        for rec in records {
            if !a.contains_key(&rec.record_id) {
                return Err(TrainError::BadFoldPlan(format!(
                    "recording {} missing from fold plan",
                    rec.record_id
                )));
            }
        }
    }

    let run_ids: Vec<(usize, usize)> = (0..plan.repeats)
        .flat_map(|r| (0..plan.k).map(move |f| (r, f)))
        .collect();

    let mut runs = run_ids
        .into_par_iter()
        .map(|(repeat, fold)| -> Result<RunMetrics, TrainError> {
            let assignment = &plan.assignments[repeat];
            let train_windows: Vec<FusedWindow> = records
                .iter()
                .filter(|rec| assignment[&rec.record_id] != fold)
                .flat_map(|rec| rec.windows.iter().cloned())
                .collect();
            let test_records: Vec<&RecordWindows> = records
                .iter()
                .filter(|rec| assignment[&rec.record_id] == fold)
                .collect();

            // Recording-level leakage check, asserted every run.
            let test_ids: BTreeSet<&str> =
                test_records.iter().map(|r| r.record_id.as_str()).collect();
            assert!(
                train_windows.iter().all(|w| !test_ids.contains(w.record_id.as_str())),
                "train/test recording leakage in repeat {repeat} fold {fold}"
            );

            let run_seed = sub_seed(cfg.seed, &format!("cv.r{repeat}.f{fold}"));
            let mut model = arch.build::<f32>(sub_seed(run_seed, "init"))?;
            set_affine(&mut model, cfg.affine_init);
            let run_cfg = TrainConfig { seed: sub_seed(run_seed, "train"), ..cfg.clone() };
            let (model, _) = train_model(&train_windows, &run_cfg, model)?;

            let (confusion, scores, labels) = evaluate_recordings(&model, &test_records)?;
            let mut metrics = compute_metrics(&confusion);
            metrics.auc = roc_auc(&scores, &labels).ok();
            Ok(RunMetrics { repeat, fold, metrics })
        })
        .collect::<Result<Vec<_>, _>>()?;

    runs.sort_by_key(|r| (r.repeat, r.fold));
    Ok(MetricsReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut data = vec![1.0f64, -2.0, 0.5];
        let grad = vec![0.0; 3];
        let mut state = AdamState::default();
        adamw_update(&mut data, &grad, &mut state, 1, &cfg);
        assert_eq!(data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adamw_zero_grad_applies_pure_decay() {
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut data = vec![2.0f64];
        let mut state = AdamState::default();
        adamw_update(&mut data, &[0.0], &mut state, 1, &cfg);
        assert!((data[0] - 2.0 * (1.0 - cfg.lr * 0.1)).abs() < 1e-15);
        adamw_update(&mut data, &[0.0], &mut state, 2, &cfg);
        assert!((data[0] - 2.0 * (1.0 - cfg.lr * 0.1).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        // p=1, g=1: m_hat=1, v_hat=1 after bias correction, so the update is
        // lr/(1+eps) plus the decoupled decay lr*wd*p.
        let cfg = TrainConfig::default();
        let mut data = vec![1.0f64];
        let mut state = AdamState::default();
        adamw_update(&mut data, &[1.0], &mut state, 1, &cfg);
        let expected = 1.0 - cfg.lr / (1.0 + cfg.eps) - cfg.lr * cfg.weight_decay;
        assert!((data[0] - expected).abs() < 1e-15);
        assert!((data[0] - (1.0 - cfg.lr)).abs() < 2e-5);
    }

    #[test]
    fn sampler_needs_both_classes() {
        assert!(matches!(
            WeightedSampler::new(&[Label::Normal, Label::Normal], 0),
            Err(TrainError::SingleClass)
        ));
    }

    #[test]
    fn sampler_balances_classes() {
        // 117 normal vs 288 abnormal windows: long-run class ratio 0.5.
        let mut labels = vec![Label::Normal; 117];
        labels.extend(vec![Label::Abnormal; 288]);
        let sampler = WeightedSampler::new(&labels, 42).unwrap();
        let draws = 10_000;
        let abnormal = sampler
            .take(draws)
            .filter(|&i| labels[i] == Label::Abnormal)
            .count();
        let ratio = abnormal as f64 / draws as f64;
        assert!((ratio - 0.5).abs() < 0.02, "abnormal ratio {ratio}");
    }

    #[test]
    fn sampler_is_uniform_when_balanced() {
        let labels = vec![Label::Normal, Label::Abnormal];
        let sampler = WeightedSampler::new(&labels, 3).unwrap();
        let n0 = sampler.take(4000).filter(|&i| i == 0).count();
        assert!((n0 as f64 / 4000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn metrics_hand_values() {
        let m = compute_metrics(&ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        for name in ["accuracy", "sensitivity", "specificity", "precision", "f1"] {
            assert_eq!(m.get(name), Some(1.0), "{name}");
        }

        let m = compute_metrics(&ConfusionCounts { tp: 8, fn_: 2, tn: 7, fp: 3 });
        assert_eq!(m.sensitivity, Some(0.8));
        assert_eq!(m.specificity, Some(0.7));
        assert_eq!(m.accuracy, Some(0.75));
        assert_eq!(m.precision, Some(8.0 / 11.0));
        let (p, s) = (8.0 / 11.0, 0.8);
        assert!((m.f1.unwrap() - 2.0 * p * s / (p + s)).abs() < 1e-12);
    }

    #[test]
    fn undefined_precision_is_absent() {
        let m = compute_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 3, fn_: 2 });
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.specificity, Some(1.0));
    }

    #[test]
    fn auc_separated_ties_and_pairwise() {
        let labels = [Label::Abnormal, Label::Abnormal, Label::Normal, Label::Normal];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
        // Exhaustive pair counting: of the two abnormal/normal pairs,
        // (0.9 > 0.5) scores 1 and (0.4 < 0.5) scores 0.
        let auc = roc_auc(&[0.9, 0.4, 0.5], &[Label::Abnormal, Label::Abnormal, Label::Normal])
            .unwrap();
        assert_eq!(auc, 0.5);
        assert!(matches!(
            roc_auc(&[0.5], &[Label::Normal]),
            Err(TrainError::SingleClass)
        ));
    }

    fn toy_records(n_per_class: usize) -> Vec<(String, Label)> {
        let mut out = Vec::new();
        for i in 0..n_per_class {
            out.push((format!("n{i:02}"), Label::Normal));
            out.push((format!("a{i:02}"), Label::Abnormal));
        }
        out
    }

    #[test]
    fn fold_plan_partitions_and_stratifies() {
        let records = toy_records(10);
        let plan = FoldPlan::stratified(&records, 5, 10, 7).unwrap();
        assert_eq!(plan.assignments.len(), 10);
        for assignment in &plan.assignments {
            assert_eq!(assignment.len(), records.len());
            for fold in 0..5 {
                let ids: Vec<&String> = assignment
                    .iter()
                    .filter(|(_, &f)| f == fold)
                    .map(|(id, _)| id)
                    .collect();
                assert_eq!(ids.len(), 4);
                let normals = ids.iter().filter(|id| id.starts_with('n')).count();
                assert_eq!(normals, 2, "stratification per fold");
            }
        }
    }

    #[test]
    fn fold_plan_repeats_differ_and_are_seed_stable() {
        let records = toy_records(10);
        let plan = FoldPlan::stratified(&records, 5, 2, 7).unwrap();
        assert_ne!(plan.assignments[0], plan.assignments[1]);
        let again = FoldPlan::stratified(&records, 5, 2, 7).unwrap();
        assert_eq!(plan, again);
        let other = FoldPlan::stratified(&records, 5, 2, 8).unwrap();
        assert_ne!(plan.assignments[0], other.assignments[0]);
    }

    #[test]
    fn fold_plan_rejects_small_classes() {
        let mut records = toy_records(10);
        records.retain(|(id, _)| !id.starts_with('n') || id == "n00");
        assert!(matches!(
            FoldPlan::stratified(&records, 5, 1, 0),
            Err(TrainError::TooFewRecordings { .. })
        ));
    }

    #[test]
    fn fold_plan_text_roundtrip() {
        let plan = FoldPlan::stratified(&toy_records(5), 5, 2, 3).unwrap();
        let text = plan.to_text();
        assert_eq!(FoldPlan::parse(&text).unwrap(), plan);
        assert!(FoldPlan::parse("k=5\n").is_err());
        assert!(FoldPlan::parse("k=5\nrepeats=1\n0,x,9\n").is_err());
    }

    #[test]
    fn report_aggregation() {
        let run = |acc: f64| RunMetrics {
            repeat: 0,
            fold: 0,
            metrics: Metrics { accuracy: Some(acc), ..Metrics::default() },
        };
        let report = MetricsReport { runs: vec![run(0.8), run(1.0)] };
        let (mean, std, n) = report.mean_std("accuracy").unwrap();
        assert!((mean - 0.9).abs() < 1e-12);
        assert!((std - (0.02f64).sqrt()).abs() < 1e-12);
        assert_eq!(n, 2);
        assert_eq!(report.mean_std("auc"), None);
        let csv = report.to_csv();
        assert!(csv.starts_with("repeat,fold,accuracy"));
        assert_eq!(csv.lines().count(), 1 + 2 + 2);
    }
}
