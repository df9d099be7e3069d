//! Per-fault binary training, checkpoint selection, inference and compound
//! label assembly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{comparison_table, EvalError, EvalReport, ScoredRecording};
use crate::neuralnet::{
    sigmoid, Adam, AdamConfig, ArchSpec, Checkpoint, CheckpointError, LossWeights, ModelKind, NetError, Network,
    Tensor3,
};
use crate::pipeline::{
    all_channels, fit_norm_stats, normalize, select_channels, ChannelSelection, FeatureExtractor, NormStats,
    PipelineError, Representation, SliceFeatures, DEFAULT_SLIP_TOLERANCE_HZ,
};
use crate::synthdata::{load_recording, CompoundLabel, DataError, DatasetManifest, FaultCode, Recording, Split, SPEEDS_HZ};

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{fault}: no positive training samples")]
    InsufficientPositives { fault: FaultCode },
    #[error("{fault}: no {what} samples in the {split} split")]
    EmptySplit {
        fault: FaultCode,
        split: Split,
        what: &'static str,
    },
    #[error("{fault}: training diverged in epoch {epoch}")]
    TrainingDiverged { fault: FaultCode, epoch: usize },
    #[error("no trained model for {fault} ({path})")]
    MissingModel { fault: FaultCode, path: PathBuf },
    #[error("ablation cell `{0}` has no trained model set")]
    AblationIncomplete(String),
    #[error("recording {path}: {source}")]
    Recording {
        path: PathBuf,
        #[source]
        source: PipelineError,
    },
    #[error("{fault}: {source}")]
    Fault {
        fault: FaultCode,
        #[source]
        source: Box<DiagnosisError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl DiagnosisError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn for_fault(self, fault: FaultCode) -> Self {
        match self {
            e @ (Self::InsufficientPositives { .. }
            | Self::EmptySplit { .. }
            | Self::TrainingDiverged { .. }
            | Self::MissingModel { .. }
            | Self::Fault { .. }) => e,
            e => Self::Fault {
                fault,
                source: Box::new(e),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    #[default]
    Selected,
    All,
}

impl ChannelMode {
    pub fn selection(self, fault: FaultCode) -> ChannelSelection {
        match self {
            Self::Selected => select_channels(fault.component()),
            Self::All => all_channels(fault.component()),
        }
    }
}

impl std::fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Selected => "selected",
            Self::All => "all",
        })
    }
}

impl std::str::FromStr for ChannelMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "selected" => Ok(Self::Selected),
            "all" => Ok(Self::All),
            _ => Err(format!("unknown channel mode `{s}` (expected selected or all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub representation: Representation,
    pub channel_mode: ChannelMode,
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the convolution and batch-norm parameters.
    pub lr_cnn: f64,
    pub lr_dense: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub seed: u64,
    pub threshold: f64,
    pub slice_seconds: f64,
    pub slip_tolerance_hz: f64,
    pub conv_widths: Vec<usize>,
    pub dense_widths: Vec<usize>,
    /// Positive-class BCE weight; negatives/positives of the training split when unset.
    pub pos_weight: Option<f64>,
    /// Percentile of normal validation reconstruction errors used as the
    /// unsupervised autoencoder's threshold.
    pub unsup_percentile: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            representation: Representation::Fft,
            channel_mode: ChannelMode::Selected,
            model: ModelKind::Cnn,
            epochs: 100,
            batch_size: 32,
            lr_cnn: 1e-4,
            lr_dense: 1e-3,
            lambda0: 1.0,
            lambda1: 0.1,
            seed: 0,
            threshold: 0.5,
            slice_seconds: 1.0,
            slip_tolerance_hz: DEFAULT_SLIP_TOLERANCE_HZ,
            conv_widths: vec![16, 32, 64, 128],
            dense_widths: vec![32, 16, 16],
            pos_weight: None,
            unsup_percentile: 95.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiagnosisError> {
        let bad = |m: &str| Err(DiagnosisError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lambda0 >= 0.0 && self.lambda1 >= 0.0) {
            return bad("lambda0 and lambda1 must be non-negative");
        }
        if !(self.lr_cnn > 0.0 && self.lr_dense > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        if !(self.slice_seconds > 0.0) {
            return bad("slice_seconds must be positive");
        }
        if !(0.0..=100.0).contains(&self.unsup_percentile) {
            return bad("unsup_percentile must lie in [0, 100]");
        }
        if matches!(self.pos_weight, Some(w) if !(w > 0.0)) {
            return bad("pos_weight must be positive");
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) || self.dense_widths.contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn arch(&self, in_channels: usize, input_len: usize) -> ArchSpec {
        let mut arch = ArchSpec::new(self.model, in_channels, input_len);
        arch.conv_widths = self.conv_widths.clone();
        arch.dense_widths = self.dense_widths.clone();
        arch
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, DiagnosisError> {
        let cfg: Self = toml::from_str(text).map_err(|e| DiagnosisError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn loss_weights(&self, pos_weight: f64) -> LossWeights {
        LossWeights {
            pos_weight,
            classification: self.lambda0,
            reconstruction: self.lambda1,
        }
    }
}

fn fault_seed(seed: u64, fault: FaultCode) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fault.index() as u64 + 1);
    rng.gen()
}

// ---------------------------------------------------------------------------
// Feature store

#[derive(Debug, Clone, PartialEq)]
pub struct StoredRecording {
    pub path: PathBuf,
    pub label: CompoundLabel,
    pub split: Split,
    pub slices: Vec<SliceFeatures>,
}

/// Un-normalized slice features of every recording in some splits, held in
/// memory so the 17 fault models share one extraction pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub representation: Representation,
    pub recordings: Vec<StoredRecording>,
}

impl FeatureStore {
    /// Extracts features of the manifest entries in `splits`. With
    /// `shift_seed`, each recording is first circularly shifted by a random
    /// number of samples.
    pub fn load(
        manifest: &DatasetManifest,
        splits: &[Split],
        config: &TrainConfig,
        shift_seed: Option<u64>,
    ) -> Result<Self, DiagnosisError> {
        let mut extractor = FeatureExtractor::new(config.representation, config.slice_seconds, config.slip_tolerance_hz);
        let mut shift_rng = shift_seed.map(ChaCha8Rng::seed_from_u64);
        let mut recordings = Vec::new();
        for (index, entry) in manifest.entries.iter().enumerate() {
            if !splits.contains(&entry.split) {
                continue;
            }
            let path = manifest.resolve(entry);
            let mut rec = load_recording(&path)?;
            if let Some(rng) = shift_rng.as_mut() {
                let shift = rng.gen_range(0..rec.len().max(1));
                rec = rec.circularly_shifted(shift);
            }
            let slices = extractor
                .extract(&rec, index)
                .map_err(|source| DiagnosisError::Recording { path: path.clone(), source })?;
            recordings.push(StoredRecording {
                path,
                label: entry.label,
                split: entry.split,
                slices,
            });
        }
        Ok(Self {
            representation: config.representation,
            recordings,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &StoredRecording> {
        self.recordings.iter().filter(move |r| r.split == split)
    }

    /// Min-max statistics over the training split.
    pub fn fit_stats(&self) -> Result<NormStats, DiagnosisError> {
        let mut stats = fit_norm_stats(self.split(Split::Train).flat_map(|r| &r.slices), &SPEEDS_HZ)?;
        stats.representation = self.representation;
        Ok(stats)
    }
}

/// Normalized inputs and 0/1 targets of one split for one fault.
struct Batchable {
    data: Vec<f32>,
    targets: Vec<f32>,
    channels: usize,
    len: usize,
}

impl Batchable {
    fn count(&self) -> usize {
        self.targets.len()
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor3<f32>, Vec<f32>), NetError> {
        let stride = self.channels * self.len;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let x = Tensor3::from_vec(data, idx.len(), self.channels, self.len)?;
        Ok((x, idx.iter().map(|&i| self.targets[i]).collect()))
    }
}

fn build_inputs<'a, I>(
    recordings: I,
    stats: &NormStats,
    selection: &ChannelSelection,
    fault: FaultCode,
    negatives_only: bool,
) -> Result<Batchable, DiagnosisError>
where
    I: IntoIterator<Item = &'a StoredRecording>,
{
    let mut out = Batchable {
        data: Vec::new(),
        targets: Vec::new(),
        channels: selection.channels.len(),
        len: 0,
    };
    for rec in recordings {
        let positive = rec.label.contains(fault);
        if negatives_only && positive {
            continue;
        }
        for s in &rec.slices {
            let frame = normalize(s, stats, selection).map_err(|source| DiagnosisError::Recording {
                path: rec.path.clone(),
                source,
            })?;
            out.len = frame.length;
            out.data.extend_from_slice(&frame.data);
            out.targets.push(if positive { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub fault: FaultCode,
    pub model: ModelKind,
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    /// Epoch with the lowest validation loss; ties go to the earliest.
    pub fn best(&self) -> Option<EpochLog> {
        self.epochs
            .iter()
            .copied()
            .fold(None, |best: Option<EpochLog>, e| match best {
                Some(b) if b.val_loss <= e.val_loss => Some(b),
                _ => Some(e),
            })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# fault {} model {}\nepoch\ttrain_loss\tval_loss\n", self.fault, self.model);
        for e in &self.epochs {
            let _ = writeln!(out, "{}\t{}\t{}", e.epoch, e.train_loss, e.val_loss);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let head = lines.next().ok_or("empty log")?;
        let words: Vec<&str> = head.split_whitespace().collect();
        if words.len() != 5 || words[0] != "#" || words[1] != "fault" || words[3] != "model" {
            return Err(format!("bad log header {head:?}"));
        }
        let fault = words[2].parse().map_err(|e: DataError| e.to_string())?;
        let model = words[4].parse()?;
        lines.next();
        let mut epochs = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(format!("bad log line {line:?}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?}"));
            epochs.push(EpochLog {
                epoch: f[0].parse().map_err(|_| format!("bad epoch {:?}", f[0]))?,
                train_loss: num(f[1])?,
                val_loss: num(f[2])?,
            });
        }
        Ok(Self { fault, model, epochs })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub fault: FaultCode,
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

/// Shared inputs for training every fault model.
pub struct TrainingData<'a> {
    pub store: &'a FeatureStore,
    pub stats: &'a NormStats,
}

const EVAL_BATCH: usize = 64;

/// Mean loss over all samples, in inference mode.
fn dataset_loss(
    net: &mut Network<f32>,
    set: &Batchable,
    weights: &LossWeights,
) -> Result<f64, NetError> {
    let n = set.count();
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = set.gather(chunk)?;
        let out = net.forward(&x, false)?;
        let targets = net.kind().has_head().then_some(y.as_slice());
        let (parts, _) = net.loss(&out, &x, targets, weights)?;
        total += parts.total * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Mean squared reconstruction error of every sample.
fn reconstruction_errors(net: &mut Network<f32>, set: &Batchable) -> Result<Vec<f64>, NetError> {
    let stride = set.channels * set.len;
    let idx: Vec<usize> = (0..set.count()).collect();
    let mut errors = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = set.gather(chunk)?;
        let out = net.forward(&x, false)?;
        let recon = out
            .reconstruction
            .ok_or_else(|| NetError::ShapeError("model has no decoder".into()))?;
        for (a, b) in recon.data.chunks(stride).zip(x.data.chunks(stride)) {
            let se: f64 = a.iter().zip(b).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum();
            errors.push(se / stride as f64);
        }
    }
    Ok(errors)
}

/// Linear-interpolation percentile of `values`.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn meta_entry(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

/// Trains the binary model of one fault and keeps the parameters of the
/// epoch with the lowest validation loss.
pub fn train_fault_model(
    data: &TrainingData<'_>,
    fault: FaultCode,
    config: &TrainConfig,
) -> Result<TrainedModel, DiagnosisError> {
    train_inner(data, fault, config).map_err(|e| e.for_fault(fault))
}

fn train_inner(data: &TrainingData<'_>, fault: FaultCode, config: &TrainConfig) -> Result<TrainedModel, DiagnosisError> {
    config.validate()?;
    let unsup = config.model == ModelKind::UnsupAe;
    let selection = config.channel_mode.selection(fault);
    let train = build_inputs(data.store.split(Split::Train), data.stats, &selection, fault, unsup)?;
    let val = build_inputs(data.store.split(Split::Val), data.stats, &selection, fault, unsup)?;
    let positives = if unsup {
        data.store.split(Split::Train).filter(|r| r.label.contains(fault)).count()
    } else {
        train.targets.iter().filter(|&&t| t == 1.0).count()
    };
    if positives == 0 {
        return Err(DiagnosisError::InsufficientPositives { fault });
    }
    for (set, split) in [(&train, Split::Train), (&val, Split::Val)] {
        if set.count() == 0 {
            let what = if unsup { "normal" } else { "labelled" };
            return Err(DiagnosisError::EmptySplit { fault, split, what });
        }
    }
    let negatives = train.count() - positives.min(train.count());
    let pos_weight = match config.pos_weight {
        Some(w) => w,
        None if unsup => 1.0,
        None => (negatives as f64 / positives as f64).max(1e-6),
    };
    let weights = config.loss_weights(pos_weight);

    let seed = fault_seed(config.seed, fault);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let arch = config.arch(train.channels, train.len);
    let mut net = Network::<f32>::new(arch, &mut init_rng)?;
    let mut adam = Adam::new(AdamConfig::default());

    let mut log = TrainingLog {
        fault,
        model: config.model,
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut best: Option<(EpochLog, Vec<f32>)> = None;
    let mut order: Vec<usize> = (0..train.count()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = train.gather(chunk)?;
            let out = net.forward(&x, true)?;
            let targets = net.kind().has_head().then_some(y.as_slice());
            let (parts, grads) = net.loss(&out, &x, targets, &weights)?;
            if !parts.total.is_finite() {
                return Err(DiagnosisError::TrainingDiverged { fault, epoch });
            }
            net.zero_grad();
            net.backward(&grads)?;
            net.adam_step(&mut adam, config.lr_cnn, config.lr_dense)?;
            sum += parts.total * chunk.len() as f64;
        }
        let val_loss = dataset_loss(&mut net, &val, &weights)?;
        let params = net.export_params();
        if !val_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(DiagnosisError::TrainingDiverged { fault, epoch });
        }
        let entry = EpochLog {
            epoch,
            train_loss: sum / train.count() as f64,
            val_loss,
        };
        log.epochs.push(entry);
        if best.as_ref().map_or(true, |(b, _)| val_loss < b.val_loss) {
            best = Some((entry, params));
        }
    }
    let (best, params) = best.expect("at least one epoch");
    net.import_params(&params)?;

    let mut meta = BTreeMap::from([
        meta_entry("fault", fault),
        meta_entry("epoch", best.epoch),
        meta_entry("val_loss", best.val_loss),
        meta_entry("pos_weight", pos_weight),
        meta_entry("representation", config.representation),
        meta_entry("channel_mode", config.channel_mode),
    ]);
    if unsup {
        let errors = reconstruction_errors(&mut net, &val)?;
        meta.extend([meta_entry("recon_threshold", percentile(&errors, config.unsup_percentile))]);
    }
    Ok(TrainedModel {
        fault,
        checkpoint: Checkpoint::from_network(&mut net, meta),
        log,
    })
}

/// Loss of a stored checkpoint on the validation split, computed exactly as
/// during training.
pub fn validation_loss(
    data: &TrainingData<'_>,
    model: &TrainedModel,
    config: &TrainConfig,
) -> Result<f64, DiagnosisError> {
    let unsup = config.model == ModelKind::UnsupAe;
    let selection = config.channel_mode.selection(model.fault);
    let val = build_inputs(data.store.split(Split::Val), data.stats, &selection, model.fault, unsup)?;
    let pos_weight = model.checkpoint.meta_f64("pos_weight").unwrap_or(1.0);
    let mut net = model.checkpoint.to_network()?;
    Ok(dataset_loss(&mut net, &val, &config.loss_weights(pos_weight))?)
}

/// Trains `faults` (sequentially or one worker per fault) into a model set.
pub fn train_model_set(
    data: &TrainingData<'_>,
    config: &TrainConfig,
    faults: &[FaultCode],
    parallel: bool,
) -> Result<FaultModelSet, DiagnosisError> {
    config.validate()?;
    let results: Vec<Result<TrainedModel, DiagnosisError>> = if parallel {
        faults.par_iter().map(|&f| train_fault_model(data, f, config)).collect()
    } else {
        faults.iter().map(|&f| train_fault_model(data, f, config)).collect()
    };
    let mut models = BTreeMap::new();
    for r in results {
        let m = r?;
        models.insert(m.fault, m);
    }
    Ok(FaultModelSet {
        config: config.clone(),
        stats: data.stats.clone(),
        models,
    })
}

// ---------------------------------------------------------------------------
// Model sets and inference

pub const CONFIG_FILE: &str = "config.toml";
pub const STATS_FILE: &str = "norm_stats.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct FaultModelSet {
    pub config: TrainConfig,
    pub stats: NormStats,
    pub models: BTreeMap<FaultCode, TrainedModel>,
}

impl FaultModelSet {
    pub fn is_complete(&self) -> bool {
        FaultCode::ALL.iter().all(|f| self.models.contains_key(f))
    }

    /// Writes the config snapshot, the statistics, and `<FAULT>.ckpt` plus
    /// `<FAULT>.log` per trained fault.
    pub fn save(&self, dir: &Path) -> Result<(), DiagnosisError> {
        fs::create_dir_all(dir).map_err(|e| DiagnosisError::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.config.to_toml()).map_err(|e| DiagnosisError::io(&path, e))?;
        self.stats.save(&dir.join(STATS_FILE))?;
        for (fault, m) in &self.models {
            m.checkpoint.save(&dir.join(format!("{fault}.ckpt")))?;
            let path = dir.join(format!("{fault}.log"));
            fs::write(&path, m.log.to_text()).map_err(|e| DiagnosisError::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads whatever faults have checkpoints in `dir`.
    pub fn load(dir: &Path) -> Result<Self, DiagnosisError> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DiagnosisError::io(&path, e))?;
        let config = TrainConfig::from_toml(&text).map_err(|e| DiagnosisError::Malformed {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let stats = NormStats::load(&dir.join(STATS_FILE))?;
        let mut models = BTreeMap::new();
        for fault in FaultCode::ALL {
            let ck = dir.join(format!("{fault}.ckpt"));
            if !ck.exists() {
                continue;
            }
            let checkpoint = Checkpoint::load(&ck)?;
            let log_path = dir.join(format!("{fault}.log"));
            let text = fs::read_to_string(&log_path).map_err(|e| DiagnosisError::io(&log_path, e))?;
            let log = TrainingLog::from_text(&text).map_err(|reason| DiagnosisError::Malformed {
                path: log_path.clone(),
                reason,
            })?;
            models.insert(fault, TrainedModel { fault, checkpoint, log });
        }
        Ok(Self { config, stats, models })
    }

    /// Loads a set and requires all 17 fault models.
    pub fn load_complete(dir: &Path) -> Result<Self, DiagnosisError> {
        let set = Self::load(dir)?;
        if let Some(&fault) = FaultCode::ALL.iter().find(|f| !set.models.contains_key(f)) {
            return Err(DiagnosisError::MissingModel {
                fault,
                path: dir.join(format!("{fault}.ckpt")),
            });
        }
        Ok(set)
    }

    pub fn predictor(&self) -> Result<Predictor, DiagnosisError> {
        let mut models = Vec::new();
        for (fault, m) in &self.models {
            models.push(LoadedModel {
                fault: *fault,
                net: m.checkpoint.to_network()?,
                selection: self.config.channel_mode.selection(*fault),
                recon_threshold: m.checkpoint.meta_f64("recon_threshold"),
            });
        }
        Ok(Predictor {
            config: self.config.clone(),
            stats: self.stats.clone(),
            models,
            extractor: FeatureExtractor::new(
                self.config.representation,
                self.config.slice_seconds,
                self.config.slip_tolerance_hz,
            ),
        })
    }

    /// FLOPs per slice of one fault model's forward pass.
    pub fn flops(&self, fault: FaultCode) -> Option<u64> {
        self.models.get(&fault).and_then(|m| m.checkpoint.arch.flops().ok())
    }

    /// Mean per-slice FLOPs over the trained fault models.
    pub fn mean_flops(&self) -> Option<u64> {
        let v: Vec<u64> = self.models.keys().filter_map(|&f| self.flops(f)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<u64>() / v.len() as u64)
    }
}

struct LoadedModel {
    fault: FaultCode,
    net: Network<f32>,
    selection: ChannelSelection,
    recon_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// In [`FaultCode::ALL`] order.
    pub probabilities: Vec<f64>,
    pub decisions: Vec<bool>,
    pub label: CompoundLabel,
}

/// Thresholds per-fault probabilities and builds the compound label.
pub fn assemble(probabilities: &[f64], threshold: f64) -> Prediction {
    let decisions: Vec<bool> = probabilities.iter().map(|&p| p >= threshold).collect();
    let label = CompoundLabel::from_faults(
        FaultCode::ALL
            .into_iter()
            .zip(&decisions)
            .filter(|(_, &d)| d)
            .map(|(f, _)| f),
    );
    Prediction {
        probabilities: probabilities.to_vec(),
        decisions,
        label,
    }
}

/// Networks of a model set ready for inference.
pub struct Predictor {
    config: TrainConfig,
    stats: NormStats,
    models: Vec<LoadedModel>,
    extractor: FeatureExtractor,
}

impl Predictor {
    pub fn faults(&self) -> Vec<FaultCode> {
        self.models.iter().map(|m| m.fault).collect()
    }

    fn model_mut(&mut self, fault: FaultCode) -> Result<&mut LoadedModel, DiagnosisError> {
        self.models
            .iter_mut()
            .find(|m| m.fault == fault)
            .ok_or(DiagnosisError::MissingModel {
                fault,
                path: PathBuf::from(format!("{fault}.ckpt")),
            })
    }

    fn inputs(&self, selection: &ChannelSelection, slices: &[&SliceFeatures]) -> Result<Batchable, DiagnosisError> {
        let mut set = Batchable {
            data: Vec::new(),
            targets: Vec::new(),
            channels: selection.channels.len(),
            len: 0,
        };
        for s in slices {
            let frame = normalize(s, &self.stats, selection)?;
            set.len = frame.length;
            set.data.extend_from_slice(&frame.data);
            set.targets.push(0.0);
        }
        Ok(set)
    }

    /// Anomaly probability of each slice for one fault. The unsupervised
    /// autoencoder maps a reconstruction error `e` to `e / (e + threshold)`.
    pub fn slice_probabilities(&mut self, fault: FaultCode, slices: &[&SliceFeatures]) -> Result<Vec<f64>, DiagnosisError> {
        if slices.is_empty() {
            return Ok(Vec::new());
        }
        let selection = self.model_mut(fault)?.selection.clone();
        let set = self.inputs(&selection, slices)?;
        let model = self.model_mut(fault)?;
        if model.net.kind() == ModelKind::UnsupAe {
            let thr = model.recon_threshold.unwrap_or(f64::MIN_POSITIVE).max(f64::MIN_POSITIVE);
            let errors = reconstruction_errors(&mut model.net, &set)?;
            return Ok(errors.into_iter().map(|e| e / (e + thr)).collect());
        }
        let idx: Vec<usize> = (0..set.count()).collect();
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(EVAL_BATCH) {
            let (x, _) = set.gather(chunk)?;
            let logits = model.net.forward(&x, false)?.logits.expect("supervised model has a head");
            out.extend(logits.iter().map(|&z| sigmoid(z as f64)));
        }
        Ok(out)
    }

    /// Latent vectors (post global pooling) of each slice for one fault.
    pub fn latents(&mut self, fault: FaultCode, slices: &[&SliceFeatures]) -> Result<Vec<Vec<f64>>, DiagnosisError> {
        let selection = self.model_mut(fault)?.selection.clone();
        let set = self.inputs(&selection, slices)?;
        let model = self.model_mut(fault)?;
        let dim = model.net.arch().latent_dim();
        let idx: Vec<usize> = (0..set.count()).collect();
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(EVAL_BATCH) {
            let (x, _) = set.gather(chunk)?;
            let latent = model.net.forward(&x, false)?.latent;
            out.extend(latent.chunks(dim).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }

    /// Per-fault probabilities averaged over the slices of one recording.
    pub fn predict_slices(&mut self, slices: &[SliceFeatures]) -> Result<Prediction, DiagnosisError> {
        let refs: Vec<&SliceFeatures> = slices.iter().collect();
        let mut probabilities = Vec::with_capacity(FaultCode::ALL.len());
        for fault in FaultCode::ALL {
            let p = self.slice_probabilities(fault, &refs)?;
            probabilities.push(p.iter().sum::<f64>() / p.len().max(1) as f64);
        }
        Ok(assemble(&probabilities, self.config.threshold))
    }

    pub fn predict(&mut self, rec: &Recording, path: &Path) -> Result<Prediction, DiagnosisError> {
        let slices = self.extractor.extract(rec, 0).map_err(|source| DiagnosisError::Recording {
            path: path.to_path_buf(),
            source,
        })?;
        self.predict_slices(&slices)
    }

    /// Slice probabilities of every fault for every recording in `split`.
    pub fn score(&mut self, store: &FeatureStore, split: Split) -> Result<Vec<ScoredRecording>, DiagnosisError> {
        let recs: Vec<&StoredRecording> = store.split(split).collect();
        let slices: Vec<&SliceFeatures> = recs.iter().flat_map(|r| &r.slices).collect();
        let mut per_fault = Vec::with_capacity(FaultCode::ALL.len());
        for fault in FaultCode::ALL {
            per_fault.push(self.slice_probabilities(fault, &slices)?);
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(recs.len());
        for r in recs {
            let n = r.slices.len();
            out.push(ScoredRecording {
                truth: r.label,
                slice_probabilities: per_fault.iter().map(|p| p[offset..offset + n].to_vec()).collect(),
            });
            offset += n;
        }
        Ok(out)
    }

    /// Evaluation report of this set on one split of `store`.
    pub fn evaluate(
        &mut self,
        store: &FeatureStore,
        split: Split,
        name: &str,
        flops: Option<u64>,
    ) -> Result<EvalReport, DiagnosisError> {
        let scored = self.score(store, split)?;
        Ok(EvalReport::build(name, &scored, self.config.threshold, flops)?)
    }
}

/// Evaluates one trained model set per named ablation cell on `split`.
/// Feature extraction is shared between cells with the same input settings.
pub fn run_ablation(
    manifest: &DatasetManifest,
    cells: &[(String, Option<&FaultModelSet>)],
    split: Split,
    shift_seed: Option<u64>,
) -> Result<(Vec<EvalReport>, String), DiagnosisError> {
    if let Some((name, _)) = cells.iter().find(|(_, s)| s.map_or(true, |s| !s.is_complete())) {
        return Err(DiagnosisError::AblationIncomplete(name.clone()));
    }
    let mut stores: HashMap<(Representation, u64), FeatureStore> = HashMap::new();
    let mut reports = Vec::new();
    for (name, set) in cells {
        let set = set.expect("checked above");
        let key = (set.config.representation, set.config.slice_seconds.to_bits());
        if !stores.contains_key(&key) {
            stores.insert(key, FeatureStore::load(manifest, &[split], &set.config, shift_seed)?);
        }
        let store = &stores[&key];
        reports.push(set.predictor()?.evaluate(store, split, name, set.mean_flops())?);
    }
    let table = comparison_table(&reports);
    Ok((reports, table))
}
