//! Run configuration and the end-to-end commands behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::{
    train_model_set, ChannelMode, DiagnosisError, FaultModelSet, FeatureStore, Prediction, TrainConfig, TrainingData,
};
use crate::evaluate::{export_parallel_coordinates, pca_project, EvalError, EvalReport};
use crate::neuralnet::{ArchSpec, ModelKind};
use crate::pipeline::{normalize, PipelineError, Representation};
use crate::synthdata::{
    build_dataset, load_recording, DataError, DatasetManifest, DatasetSpec, FaultCode, GeneratorParams, Split,
};

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Diagnosis(#[from] DiagnosisError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl Error {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config { .. } => 1,
            Self::Diagnosis(e) => diagnosis_code(e),
            _ => 2,
        }
    }
}

fn diagnosis_code(e: &DiagnosisError) -> i32 {
    match e {
        DiagnosisError::InvalidConfig(_) => 1,
        DiagnosisError::InsufficientPositives { .. }
        | DiagnosisError::TrainingDiverged { .. }
        | DiagnosisError::EmptySplit { .. }
        | DiagnosisError::Net(_) => 3,
        DiagnosisError::Fault { source, .. } => diagnosis_code(source),
        _ => 2,
    }
}

/// Dataset generation settings. Unset counts fall back to the preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `desk` (1 kHz, small) or `reference` (64 kHz).
    pub preset: String,
    pub sample_rate: Option<u32>,
    pub duration_s: Option<f64>,
    pub noise_level: Option<f64>,
    /// Train and val recordings per single-fault label.
    pub single: Option<[usize; 2]>,
    /// Train and val recordings per training compound label.
    pub compound: Option<[usize; 2]>,
    /// Recordings per label in each test split.
    pub test: Option<usize>,
    pub hide_test_conditions: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            sample_rate: None,
            duration_s: None,
            noise_level: None,
            single: None,
            compound: None,
            test: None,
            hide_test_conditions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            models: "models".into(),
            reports: "reports".into(),
        }
    }
}

/// Everything a run needs. One seed drives data generation and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            train: desk_train_config(),
        }
    }
}

/// Training settings used at desk scale: the reference architecture and
/// batch size with fewer epochs and ten times the reference learning rates.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        lr_cnn: 1e-3,
        lr_dense: 1e-2,
        ..TrainConfig::default()
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|reason| Error::Config {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.dataset_spec()?;
        self.train_config().validate().map_err(|e| e.to_string())
    }

    /// The training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec, String> {
        let d = &self.data;
        let mut spec = match d.preset.as_str() {
            "desk" => DatasetSpec::desk_scale(),
            "reference" => DatasetSpec::reference_scale(),
            other => return Err(format!("unknown data preset `{other}` (expected desk or reference)")),
        };
        if d.single.is_some() || d.compound.is_some() || d.test.is_some() {
            let generator = spec.generator.clone();
            let default = |i: usize| spec.labels.iter().find(|l| l.counts[i] > 0).map_or(0, |l| l.counts[i]);
            let single = d.single.unwrap_or([default(0), default(1)]);
            let compound = d.compound.unwrap_or([
                spec.labels[17].counts[0],
                spec.labels[17].counts[1],
            ]);
            let test = d.test.unwrap_or(spec.labels[0].counts[3]);
            spec = DatasetSpec {
                generator,
                ..DatasetSpec::from_reference(single, compound, test)
            };
        }
        let g = &mut spec.generator;
        *g = GeneratorParams {
            sample_rate: d.sample_rate.unwrap_or(g.sample_rate),
            duration_s: d.duration_s.unwrap_or(g.duration_s),
            noise_level: d.noise_level.unwrap_or(g.noise_level),
        };
        spec.seed = self.seed;
        spec.hide_test_conditions = d.hide_test_conditions;
        Ok(spec)
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const RUN_SNAPSHOT: &str = "run.toml";

/// Generates the dataset and snapshots the config next to it.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DatasetManifest, Error> {
    let spec = cfg.dataset_spec().map_err(Error::Usage)?;
    let manifest = build_dataset(&spec, &cfg.paths.dataset)?;
    write(&cfg.paths.dataset.join(RUN_SNAPSHOT), &cfg.to_toml())?;
    Ok(manifest)
}

/// Fits min-max statistics on the training split and writes them to `out`.
pub fn cmd_preprocess_fit(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let manifest = DatasetManifest::load(&cfg.paths.dataset)?;
    let store = FeatureStore::load(&manifest, &[Split::Train], &cfg.train_config(), None)?;
    let stats = store.fit_stats()?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    stats.save(out)?;
    Ok(())
}

/// Normalized model input of one recording for one fault's channel
/// selection, as comma-separated rows `slice,channel,values...`.
pub fn cmd_preprocess_apply(cfg: &RunConfig, stats_path: &Path, recording: &Path, fault: FaultCode) -> Result<String, Error> {
    let stats = crate::pipeline::NormStats::load(stats_path)?;
    let tc = cfg.train_config();
    let rec = load_recording(recording)?;
    let mut fx = crate::pipeline::FeatureExtractor::new(tc.representation, tc.slice_seconds, tc.slip_tolerance_hz);
    let slices = fx.extract(&rec, 0).map_err(|source| DiagnosisError::Recording {
        path: recording.to_path_buf(),
        source,
    })?;
    let selection = tc.channel_mode.selection(fault);
    let mut out = String::new();
    for s in &slices {
        let frame = normalize(s, &stats, &selection)?;
        for (row, ch) in frame.data.chunks(frame.length.max(1)).zip(&selection.channels) {
            out.push_str(&format!("{},{}", s.slice, ch));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains the requested faults into `out` (default: the configured model dir).
pub fn cmd_train(cfg: &RunConfig, faults: &[FaultCode], out: &Path, parallel: bool) -> Result<FaultModelSet, Error> {
    if faults.is_empty() {
        return Err(Error::Usage("no fault selected (use --fault <code> or --all)".into()));
    }
    let tc = cfg.train_config();
    tc.validate()?;
    let manifest = DatasetManifest::load(&cfg.paths.dataset)?;
    let store = FeatureStore::load(&manifest, &[Split::Train, Split::Val], &tc, None)?;
    let stats = store.fit_stats()?;
    let data = TrainingData {
        store: &store,
        stats: &stats,
    };
    let set = train_model_set(&data, &tc, faults, parallel)?;
    set.save(out)?;
    write(&out.join(RUN_SNAPSHOT), &cfg.to_toml())?;
    Ok(set)
}

/// Evaluates a model set on one split and writes `report.txt` and
/// `report.csv` into `out`.
pub fn cmd_evaluate(
    dataset: &Path,
    model_dir: &Path,
    split: Split,
    shift_seed: Option<u64>,
    with_flops: bool,
    out: &Path,
) -> Result<EvalReport, Error> {
    let set = FaultModelSet::load_complete(model_dir)?;
    let manifest = DatasetManifest::load(dataset)?;
    if manifest.split(split).next().is_none() {
        return Err(EvalError::EmptyEvaluation.into());
    }
    let store = FeatureStore::load(&manifest, &[split], &set.config, shift_seed)?;
    let name = format!(
        "{}-{}-{}",
        set.config.representation, set.config.channel_mode, set.config.model
    );
    let flops = if with_flops { set.mean_flops() } else { None };
    let report = set.predictor()?.evaluate(&store, split, &name, flops)?;
    write(&out.join("report.txt"), &report.to_table())?;
    write(&out.join("report.csv"), &report.to_csv())?;
    Ok(report)
}

pub fn cmd_diagnose(model_dir: &Path, recording: &Path) -> Result<Prediction, Error> {
    let set = FaultModelSet::load_complete(model_dir)?;
    let rec = load_recording(recording)?;
    Ok(set.predictor()?.predict(&rec, recording)?)
}

/// Network input length for one slice under `cfg`.
pub fn input_len(cfg: &RunConfig) -> Result<usize, Error> {
    let spec = cfg.dataset_spec().map_err(Error::Usage)?;
    let samples = (cfg.train.slice_seconds * spec.generator.sample_rate as f64).round() as usize;
    Ok(match cfg.train.representation {
        Representation::Fft => samples / 2,
        Representation::Raw => samples,
    })
}

/// Per-slice FLOPs of every model variant for each component's input width.
pub fn cmd_flops(cfg: &RunConfig) -> Result<String, Error> {
    let len = input_len(cfg)?;
    let mut out = format!("input length {len}\n{:<12} {:<10} {:>9} {:>14}\n", "model", "component", "channels", "flops");
    for kind in ModelKind::ALL {
        for component in crate::synthdata::Component::ALL {
            let fault = FaultCode::new(component, 1)?;
            let channels = cfg.train.channel_mode.selection(fault).channels.len();
            let mut tc = cfg.train.clone();
            tc.model = kind;
            let arch: ArchSpec = tc.arch(channels, len);
            let flops = arch.flops().map_err(DiagnosisError::from)?;
            out.push_str(&format!("{:<12} {:<10} {:>9} {:>14}\n", kind.as_str(), component.prefix(), channels, flops));
        }
    }
    Ok(out)
}

/// PCA of one fault model's latent vectors on a split, exported for
/// parallel-coordinates plotting. Rows are labelled `anomaly` or `normal`.
pub fn cmd_export_features(
    dataset: &Path,
    model_dir: &Path,
    fault: FaultCode,
    split: Split,
    components: usize,
    out: &Path,
) -> Result<usize, Error> {
    let set = FaultModelSet::load(model_dir)?;
    if !set.models.contains_key(&fault) {
        return Err(DiagnosisError::MissingModel {
            fault,
            path: model_dir.join(format!("{fault}.ckpt")),
        }
        .into());
    }
    let manifest = DatasetManifest::load(dataset)?;
    let store = FeatureStore::load(&manifest, &[split], &set.config, None)?;
    let slices: Vec<_> = store.split(split).flat_map(|r| r.slices.iter().map(move |s| (r.label, s))).collect();
    let refs: Vec<_> = slices.iter().map(|(_, s)| *s).collect();
    let latents = set.predictor()?.latents(fault, &refs)?;
    let pca = pca_project(&latents, components)?;
    let labels: Vec<String> = slices
        .iter()
        .map(|(l, _)| if l.contains(fault) { "anomaly" } else { "normal" }.to_string())
        .collect();
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    export_parallel_coordinates(&pca.projected, &labels, out)?;
    Ok(labels.len())
}

/// Helper for naming model-set directories of ablation cells.
pub fn cell_name(representation: Representation, mode: ChannelMode, model: ModelKind) -> String {
    format!("{representation}-{mode}-{model}")
}
