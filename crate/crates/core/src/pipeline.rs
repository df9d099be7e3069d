//! Recording -> model input: per-slice spectra, speed identification from
//! the motor current, topology-based channel selection and per-condition
//! min-max scaling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::signal::{self, FftPlan, HalfMagnitudeSpectrum, SignalError};
use crate::synthdata::{Component, Recording, CHANNEL_COUNT, SPEEDS_HZ};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid component `{0}`")]
    InvalidComponent(String),
    #[error("no speed candidate within {tolerance} Hz of the current peak at {peak_hz} Hz")]
    SpeedUnidentified { peak_hz: f64, tolerance: f64 },
    #[error("spectrum resolution {0} Hz is coarser than 1 Hz")]
    ResolutionTooCoarse(f64),
    #[error("no normalization statistics for speed {speed} Hz, channel {channel}")]
    MissingConditionStats { speed: u32, channel: u8 },
    #[error("stats representation is {stats}, frame is {frame}")]
    RepresentationMismatch {
        stats: Representation,
        frame: Representation,
    },
    #[error("malformed stats file: {0}")]
    MalformedStats(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Input representation fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Half-magnitude spectrum, N/2 bins per channel.
    #[default]
    Fft,
    /// The time-domain slice itself.
    Raw,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Fft => "fft",
            Representation::Raw => "raw",
        })
    }
}

impl FromStr for Representation {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fft" => Ok(Representation::Fft),
            "raw" => Ok(Representation::Raw),
            _ => Err(PipelineError::MalformedStats(format!("unknown representation `{s}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Channel selection

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSelection {
    pub component: Component,
    /// Ascending 1-based channel ids.
    pub channels: Vec<u8>,
}

/// Channels wired to a component's fault models: its own sensors plus the
/// sensors of every directly connected component. Motor and both axle
/// boxes attach to the gearbox, so the gearbox sees all 21 channels.
pub fn select_channels(component: Component) -> ChannelSelection {
    let neighbours: &[Component] = match component {
        Component::Gearbox => &[Component::Motor, Component::LeftAxle, Component::RightAxle],
        _ => &[Component::Gearbox],
    };
    let mut channels: Vec<u8> = component.own_channels().collect();
    for n in neighbours {
        channels.extend(n.own_channels());
    }
    channels.sort_unstable();
    ChannelSelection {
        component,
        channels,
    }
}

pub fn select_channels_by_name(name: &str) -> Result<ChannelSelection, PipelineError> {
    let component: Component = name
        .parse()
        .map_err(|_| PipelineError::InvalidComponent(name.to_string()))?;
    Ok(select_channels(component))
}

/// Every channel, for the all-features ablation.
pub fn all_channels(component: Component) -> ChannelSelection {
    ChannelSelection {
        component,
        channels: (1..=CHANNEL_COUNT as u8).collect(),
    }
}

// ---------------------------------------------------------------------------
// Speed identification

pub const DEFAULT_SLIP_TOLERANCE_HZ: f64 = 5.0;
const SPEED_SEARCH_BAND_HZ: (f64, f64) = (5.0, 80.0);

/// Picks the speed candidate nearest to the dominant current line within
/// 5-80 Hz, provided it lies within `slip_tolerance` of the peak.
pub fn identify_speed(
    ch7: &HalfMagnitudeSpectrum,
    candidates: &[u32],
    slip_tolerance: f64,
) -> Result<u32, PipelineError> {
    let res = ch7.bin_resolution;
    if !(res > 0.0 && res <= 1.0 + 1e-12) {
        return Err(PipelineError::ResolutionTooCoarse(res));
    }
    let lo = (SPEED_SEARCH_BAND_HZ.0 / res).ceil() as usize;
    let hi = ((SPEED_SEARCH_BAND_HZ.1 / res).floor() as usize).min(ch7.amplitudes.len().saturating_sub(1));
    let mut best: Option<usize> = None;
    for k in lo..=hi {
        // first maximum wins ties
        if best.map_or(true, |b| ch7.amplitudes[k] > ch7.amplitudes[b]) {
            best = Some(k);
        }
    }
    let peak_hz = best.map_or(f64::NAN, |k| ch7.frequency(k));
    candidates
        .iter()
        .map(|&c| (c, (c as f64 - peak_hz).abs()))
        .filter(|&(_, d)| d <= slip_tolerance)
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(c, _)| c)
        .ok_or(PipelineError::SpeedUnidentified {
            peak_hz,
            tolerance: slip_tolerance,
        })
}

// ---------------------------------------------------------------------------
// Feature extraction

/// Un-normalized per-slice features for all 21 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceFeatures {
    pub speed: u32,
    pub representation: Representation,
    /// One sequence per channel, CH1 first.
    pub channels: Vec<Vec<f32>>,
    pub recording: usize,
    pub slice: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub representation: Representation,
    pub slice_seconds: f64,
    pub slip_tolerance: f64,
    plans: HashMap<usize, FftPlan>,
}

impl FeatureExtractor {
    pub fn new(representation: Representation, slice_seconds: f64, slip_tolerance: f64) -> Self {
        Self {
            representation,
            slice_seconds,
            slip_tolerance,
            plans: HashMap::new(),
        }
    }

    fn half_spectrum(&mut self, x: &[f64], rate: f64) -> HalfMagnitudeSpectrum {
        let n = x.len();
        let plan = self.plans.entry(n).or_insert_with(|| FftPlan::new(n));
        let spec = signal::ComplexSpectrum {
            bins: plan.forward_real(x),
            bin_resolution: rate / n as f64,
        };
        signal::half_magnitude(&spec)
    }

    /// Slices `rec` and extracts features for every slice. `recording` is an
    /// identifier carried into each slice's origin.
    pub fn extract(&mut self, rec: &Recording, recording: usize) -> Result<Vec<SliceFeatures>, PipelineError> {
        let groups = signal::slice_recording(rec, self.slice_seconds)?;
        let rate = rec.sample_rate as f64;
        let mut out = Vec::with_capacity(groups.len());
        for (slice, group) in groups.into_iter().enumerate() {
            for s in &group {
                if let Some(index) = s.samples.iter().position(|v| !v.is_finite()) {
                    return Err(SignalError::InvalidSignal { index }.into());
                }
            }
            let current = self.half_spectrum(&group[6].samples, rate);
            let speed = identify_speed(&current, &SPEEDS_HZ, self.slip_tolerance)?;
            let channels = match self.representation {
                Representation::Fft => group
                    .iter()
                    .map(|s| {
                        self.half_spectrum(&s.samples, rate)
                            .amplitudes
                            .into_iter()
                            .map(|v| v as f32)
                            .collect()
                    })
                    .collect(),
                Representation::Raw => group
                    .iter()
                    .map(|s| s.samples.iter().map(|&v| v as f32).collect())
                    .collect(),
            };
            out.push(SliceFeatures {
                speed,
                representation: self.representation,
                channels,
                recording,
                slice,
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrema {
    pub min: f64,
    pub max: f64,
}

/// Training-split extrema per (speed, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub representation: Representation,
    pub extrema: BTreeMap<(u32, u8), Extrema>,
}

const STATS_HEADER: &str = "#fftcnn-normstats v1";

/// Min and max over all bins of all training slices, per speed and channel.
/// Every speed in `speeds` must be represented for every channel.
pub fn fit_norm_stats<'a, I>(frames: I, speeds: &[u32]) -> Result<NormStats, PipelineError>
where
    I: IntoIterator<Item = &'a SliceFeatures>,
{
    let mut extrema: BTreeMap<(u32, u8), Extrema> = BTreeMap::new();
    let mut representation = None;
    for f in frames {
        match representation {
            None => representation = Some(f.representation),
            Some(r) if r != f.representation => {
                return Err(PipelineError::RepresentationMismatch {
                    stats: r,
                    frame: f.representation,
                })
            }
            _ => {}
        }
        for (c, values) in f.channels.iter().enumerate() {
            let e = extrema.entry((f.speed, c as u8 + 1)).or_insert(Extrema {
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            });
            for &v in values {
                let v = v as f64;
                e.min = e.min.min(v);
                e.max = e.max.max(v);
            }
        }
    }
    for &speed in speeds {
        for channel in 1..=CHANNEL_COUNT as u8 {
            if !extrema.contains_key(&(speed, channel)) {
                return Err(PipelineError::MissingConditionStats { speed, channel });
            }
        }
    }
    Ok(NormStats {
        representation: representation.unwrap_or_default(),
        extrema,
    })
}

impl NormStats {
    pub fn get(&self, speed: u32, channel: u8) -> Result<Extrema, PipelineError> {
        self.extrema
            .get(&(speed, channel))
            .copied()
            .ok_or(PipelineError::MissingConditionStats { speed, channel })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{STATS_HEADER}\nrepresentation={}\n", self.representation);
        for (&(speed, channel), e) in &self.extrema {
            out.push_str(&format!("{speed}\t{channel}\t{}\t{}\n", e.min, e.max));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let bad = |m: &str| PipelineError::MalformedStats(m.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(STATS_HEADER) {
            return Err(bad("missing header"));
        }
        let representation = lines
            .next()
            .and_then(|l| l.strip_prefix("representation="))
            .ok_or_else(|| bad("missing representation"))?
            .parse()?;
        let mut extrema = BTreeMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(line));
            }
            let speed: u32 = cols[0].parse().map_err(|_| bad(line))?;
            let channel: u8 = cols[1].parse().map_err(|_| bad(line))?;
            let min: f64 = cols[2].parse().map_err(|_| bad(line))?;
            let max: f64 = cols[3].parse().map_err(|_| bad(line))?;
            if !(min.is_finite() && max.is_finite() && min <= max) {
                return Err(bad(line));
            }
            extrema.insert((speed, channel), Extrema { min, max });
        }
        Ok(Self {
            representation,
            extrema,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_text()).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }
}

/// Model input for one slice and one channel selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFrame {
    /// Row-major `(channels, length)`.
    pub data: Vec<f32>,
    pub channels: usize,
    pub length: usize,
    pub speed: u32,
    pub recording: usize,
    pub slice: usize,
}

/// Scales each selected channel with `(a - min) / (max - min)`; a channel
/// whose training min equals its max maps to zeros. Values are not clipped.
pub fn normalize(
    frame: &SliceFeatures,
    stats: &NormStats,
    selection: &ChannelSelection,
) -> Result<SpectrumFrame, PipelineError> {
    if frame.representation != stats.representation {
        return Err(PipelineError::RepresentationMismatch {
            stats: stats.representation,
            frame: frame.representation,
        });
    }
    let length = frame.channels.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(length * selection.channels.len());
    for &ch in &selection.channels {
        let e = stats.get(frame.speed, ch)?;
        let values = &frame.channels[ch as usize - 1];
        let range = e.max - e.min;
        if range > 0.0 {
            data.extend(values.iter().map(|&v| ((v as f64 - e.min) / range) as f32));
        } else {
            data.extend(std::iter::repeat(0.0).take(values.len()));
        }
    }
    Ok(SpectrumFrame {
        data,
        channels: selection.channels.len(),
        length,
        speed: frame.speed,
        recording: frame.recording,
        slice: frame.slice,
    })
}
