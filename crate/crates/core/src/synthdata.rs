//! Synthetic 21-channel bogie recordings, compound fault labels, and the
//! on-disk dataset layout (recording files plus a tab-separated manifest).
//!
//! Every recording is the sum of a baseline (shaft harmonics, gear mesh,
//! three-phase supply current, Gaussian noise) and one tone set per active
//! fault. The random draws of each term come from their own ChaCha stream
//! keyed by the recording seed, so the baseline and every fault term are
//! identical whichever other faults are present. A compound recording is
//! therefore exactly the baseline plus the single-fault deltas.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const CHANNEL_COUNT: usize = 21;
/// Sample rate of the production recordings.
pub const PRODUCTION_SAMPLE_RATE: u32 = 64_000;
pub const SPEEDS_HZ: [u32; 3] = [20, 40, 60];
pub const LOADS_KN: [i32; 3] = [-10, 0, 10];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid compound label `{0}`")]
    InvalidLabel(String),
    #[error("invalid working condition: {0}")]
    InvalidCondition(String),
    #[error("invalid fault code `{0}`")]
    InvalidFaultCode(String),
    #[error("invalid generator parameter: {0}")]
    InvalidParameter(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Record {
        path: PathBuf,
        #[source]
        source: RecordError,
    },
    #[error("manifest {path} line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures decoding a recording file.
#[derive(Debug, Error)]
pub enum RecordError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported recording format version {0}")]
    UnsupportedVersion(u32),
    #[error("expected {expected} channels, found {found}")]
    ChannelCountMismatch { expected: usize, found: usize },
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

// ---------------------------------------------------------------------------
// Labels

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Motor,
    Gearbox,
    LeftAxle,
    RightAxle,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Motor,
        Component::Gearbox,
        Component::LeftAxle,
        Component::RightAxle,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Motor => "M",
            Component::Gearbox => "G",
            Component::LeftAxle => "LA",
            Component::RightAxle => "RA",
        }
    }

    /// Number of distinct single faults of this component.
    pub fn fault_count(self) -> u8 {
        match self {
            Component::Motor => 4,
            Component::Gearbox => 8,
            Component::LeftAxle => 4,
            Component::RightAxle => 1,
        }
    }

    /// Sensor channels mounted on the component (1-based ids).
    pub fn own_channels(self) -> std::ops::RangeInclusive<u8> {
        match self {
            Component::Motor => 1..=9,
            Component::Gearbox => 10..=15,
            Component::LeftAxle => 16..=18,
            Component::RightAxle => 19..=21,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl FromStr for Component {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "M" => Ok(Component::Motor),
            "G" => Ok(Component::Gearbox),
            "LA" => Ok(Component::LeftAxle),
            "RA" => Ok(Component::RightAxle),
            _ => Err(DataError::InvalidFaultCode(s.to_string())),
        }
    }
}

/// One of the 17 single fault types, e.g. `G5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FaultCode {
    component: Component,
    number: u8,
}

impl FaultCode {
    pub const ALL: [FaultCode; 17] = [
        FaultCode::raw(Component::Motor, 1),
        FaultCode::raw(Component::Motor, 2),
        FaultCode::raw(Component::Motor, 3),
        FaultCode::raw(Component::Motor, 4),
        FaultCode::raw(Component::Gearbox, 1),
        FaultCode::raw(Component::Gearbox, 2),
        FaultCode::raw(Component::Gearbox, 3),
        FaultCode::raw(Component::Gearbox, 4),
        FaultCode::raw(Component::Gearbox, 5),
        FaultCode::raw(Component::Gearbox, 6),
        FaultCode::raw(Component::Gearbox, 7),
        FaultCode::raw(Component::Gearbox, 8),
        FaultCode::raw(Component::LeftAxle, 1),
        FaultCode::raw(Component::LeftAxle, 2),
        FaultCode::raw(Component::LeftAxle, 3),
        FaultCode::raw(Component::LeftAxle, 4),
        FaultCode::raw(Component::RightAxle, 1),
    ];

    const fn raw(component: Component, number: u8) -> Self {
        Self { component, number }
    }

    pub fn new(component: Component, number: u8) -> Result<Self, DataError> {
        if number == 0 || number > component.fault_count() {
            return Err(DataError::InvalidFaultCode(format!(
                "{}{}",
                component.prefix(),
                number
            )));
        }
        Ok(Self { component, number })
    }

    pub fn component(self) -> Component {
        self.component
    }

    pub fn number(self) -> u8 {
        self.number
    }

    /// Position in [`FaultCode::ALL`].
    pub fn index(self) -> usize {
        FaultCode::ALL.iter().position(|&f| f == self).unwrap()
    }
}

impl fmt::Display for FaultCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.component.prefix(), self.number)
    }
}

impl FromStr for FaultCode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let split = s
            .find(|c: char| c.is_ascii_digit())
            .ok_or_else(|| DataError::InvalidFaultCode(s.to_string()))?;
        let component: Component = s[..split]
            .parse()
            .map_err(|_| DataError::InvalidFaultCode(s.to_string()))?;
        let number: u8 = s[split..]
            .parse()
            .map_err(|_| DataError::InvalidFaultCode(s.to_string()))?;
        FaultCode::new(component, number).map_err(|_| DataError::InvalidFaultCode(s.to_string()))
    }
}

/// Multi-component fault label; bit `i-1` of a component mask is fault `i`.
/// An empty mask means the component is healthy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct CompoundLabel {
    masks: [u8; 4],
}

impl CompoundLabel {
    /// Size of the full label space: 16 x 256 x 16 x 2.
    pub const SPACE_SIZE: usize = 131_072;

    pub fn normal() -> Self {
        Self::default()
    }

    pub fn from_masks(motor: u8, gearbox: u8, left_axle: u8, right_axle: u8) -> Result<Self, DataError> {
        let masks = [motor, gearbox, left_axle, right_axle];
        for (c, &m) in Component::ALL.iter().zip(&masks) {
            if u16::from(m) >= 1 << c.fault_count() {
                return Err(DataError::InvalidLabel(format!(
                    "{} mask {m:#b} out of range",
                    c.prefix()
                )));
            }
        }
        Ok(Self { masks })
    }

    pub fn from_faults<I: IntoIterator<Item = FaultCode>>(faults: I) -> Self {
        let mut label = Self::default();
        for f in faults {
            label.insert(f);
        }
        label
    }

    /// Inverse of [`CompoundLabel::index`].
    pub fn from_index(index: usize) -> Result<Self, DataError> {
        if index >= Self::SPACE_SIZE {
            return Err(DataError::InvalidLabel(format!("label index {index}")));
        }
        Self::from_masks(
            (index & 0xF) as u8,
            ((index >> 4) & 0xFF) as u8,
            ((index >> 12) & 0xF) as u8,
            ((index >> 16) & 0x1) as u8,
        )
    }

    /// Dense index in `0..SPACE_SIZE`.
    pub fn index(&self) -> usize {
        self.masks[0] as usize
            | (self.masks[1] as usize) << 4
            | (self.masks[2] as usize) << 12
            | (self.masks[3] as usize) << 16
    }

    pub fn insert(&mut self, fault: FaultCode) {
        self.masks[fault.component.slot()] |= 1 << (fault.number - 1);
    }

    pub fn contains(&self, fault: FaultCode) -> bool {
        self.masks[fault.component.slot()] & (1 << (fault.number - 1)) != 0
    }

    pub fn is_normal(&self) -> bool {
        self.masks.iter().all(|&m| m == 0)
    }

    pub fn mask(&self, component: Component) -> u8 {
        self.masks[component.slot()]
    }

    /// Active faults in canonical order.
    pub fn faults(&self) -> impl Iterator<Item = FaultCode> + '_ {
        FaultCode::ALL.into_iter().filter(move |f| self.contains(*f))
    }
}

impl fmt::Display for CompoundLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in Component::ALL.iter().enumerate() {
            if i > 0 {
                f.write_str("_")?;
            }
            let mask = self.masks[i];
            if mask == 0 {
                write!(f, "{}0", c.prefix())?;
                continue;
            }
            let mut first = true;
            for n in 1..=c.fault_count() {
                if mask & (1 << (n - 1)) != 0 {
                    if !first {
                        f.write_str("+")?;
                    }
                    write!(f, "{}{}", c.prefix(), n)?;
                    first = false;
                }
            }
        }
        Ok(())
    }
}

impl FromStr for CompoundLabel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::InvalidLabel(s.to_string());
        let parts: Vec<&str> = s.split('_').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let mut masks = [0u8; 4];
        for ((part, component), mask) in parts.iter().zip(Component::ALL).zip(masks.iter_mut()) {
            let prefix = component.prefix();
            if *part == format!("{prefix}0") {
                continue;
            }
            let mut last = 0u8;
            for item in part.split('+') {
                let digits = item.strip_prefix(prefix).ok_or_else(bad)?;
                if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                let n: u8 = digits.parse().map_err(|_| bad())?;
                // ascending, no repeats, in range
                if n <= last || n > component.fault_count() {
                    return Err(bad());
                }
                *mask |= 1 << (n - 1);
                last = n;
            }
        }
        CompoundLabel::from_masks(masks[0], masks[1], masks[2], masks[3])
    }
}

/// The 42 compound labels of the reference dataset, with whether each
/// appears in the training, preliminary-test, and final-test splits.
pub const REFERENCE_LABELS: [(&str, bool, bool); 42] = [
    ("M0_G0_LA0_RA0", true, true),
    ("M1_G0_LA0_RA0", true, true),
    ("M2_G0_LA0_RA0", true, true),
    ("M3_G0_LA0_RA0", true, true),
    ("M4_G0_LA0_RA0", true, true),
    ("M0_G1_LA0_RA0", true, true),
    ("M0_G2_LA0_RA0", true, true),
    ("M0_G3_LA0_RA0", true, true),
    ("M0_G4_LA0_RA0", true, true),
    ("M0_G5_LA0_RA0", true, true),
    ("M0_G6_LA0_RA0", true, true),
    ("M0_G7_LA0_RA0", true, true),
    ("M0_G8_LA0_RA0", true, true),
    ("M0_G0_LA1_RA0", true, true),
    ("M0_G0_LA2_RA0", true, true),
    ("M0_G0_LA3_RA0", true, true),
    ("M0_G0_LA4_RA0", true, true),
    ("M0_G0_LA1+LA2+LA4_RA0", true, false),
    ("M0_G4+G5_LA0_RA0", true, false),
    ("M1_G0_LA1_RA1", true, false),
    ("M0_G3_LA1_RA0", true, false),
    ("M1_G0_LA1_RA0", true, false),
    ("M4_G3_LA0_RA0", false, false),
    ("M0_G1+G5_LA0_RA0", false, false),
    ("M0_G0_LA2+LA3_RA0", false, false),
    ("M2_G0_LA1_RA0", false, false),
    ("M0_G0_LA2+LA4_RA0", false, false),
    ("M3_G3_LA0_RA0", false, false),
    ("M1_G5_LA0_RA0", false, false),
    ("M0_G2+G5_LA0_RA0", false, false),
    ("M0_G0_LA1+LA2_RA0", false, false),
    ("M1_G3_LA0_RA0", false, false),
    ("M3_G0_LA1_RA0", false, false),
    ("M3_G5_LA0_RA0", false, false),
    ("M0_G0_LA1_RA1", false, false),
    ("M0_G3+G5_LA0_RA0", false, false),
    ("M0_G0_LA1+LA2+LA3+LA4_RA0", false, false),
    ("M0_G0_LA1+LA2+LA3_RA0", false, false),
    ("M2_G5_LA0_RA0", false, false),
    ("M4_G5_LA0_RA0", false, false),
    ("M2_G3_LA0_RA0", false, false),
    ("M2_G0_LA1_RA1", false, false),
];

pub fn reference_labels() -> Vec<CompoundLabel> {
    REFERENCE_LABELS
        .iter()
        .map(|(s, _, _)| s.parse().expect("reference label table is well formed"))
        .collect()
}

// ---------------------------------------------------------------------------
// Working conditions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkingCondition {
    pub speed_hz: u32,
    pub lateral_load_kn: i32,
}

impl WorkingCondition {
    pub fn new(speed_hz: u32, lateral_load_kn: i32) -> Result<Self, DataError> {
        if !SPEEDS_HZ.contains(&speed_hz) {
            return Err(DataError::InvalidCondition(format!("speed {speed_hz} Hz")));
        }
        if !LOADS_KN.contains(&lateral_load_kn) {
            return Err(DataError::InvalidCondition(format!(
                "lateral load {lateral_load_kn} kN"
            )));
        }
        Ok(Self {
            speed_hz,
            lateral_load_kn,
        })
    }

    /// All nine speed/load combinations.
    pub fn all() -> Vec<WorkingCondition> {
        SPEEDS_HZ
            .iter()
            .flat_map(|&s| {
                LOADS_KN.iter().map(move |&l| WorkingCondition {
                    speed_hz: s,
                    lateral_load_kn: l,
                })
            })
            .collect()
    }

    /// Vibration RMS multiplier applied for the lateral load level.
    pub fn load_gain(&self) -> f64 {
        match self.lateral_load_kn {
            -10 => 0.85,
            10 => 1.15,
            _ => 1.0,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        Self::new(self.speed_hz, self.lateral_load_kn).map(|_| ())
    }
}

impl fmt::Display for WorkingCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.speed_hz, self.lateral_load_kn)
    }
}

impl FromStr for WorkingCondition {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::InvalidCondition(s.to_string());
        let (speed, load) = s.split_once(',').ok_or_else(bad)?;
        WorkingCondition::new(
            speed.trim().parse().map_err(|_| bad())?,
            load.trim().parse().map_err(|_| bad())?,
        )
    }
}

fn format_condition(c: Option<WorkingCondition>) -> String {
    c.map_or_else(|| "unknown".to_string(), |c| c.to_string())
}

fn parse_condition(s: &str) -> Result<Option<WorkingCondition>, DataError> {
    if s == "unknown" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

// ---------------------------------------------------------------------------
// Recording

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    /// `CHANNEL_COUNT` equal-length channels, CH1 first.
    pub channels: Vec<Vec<f32>>,
    pub sample_rate: u32,
    pub label: CompoundLabel,
    pub condition: Option<WorkingCondition>,
    pub seed: u64,
}

impl Recording {
    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 1-based channel accessor.
    pub fn channel(&self, id: u8) -> &[f32] {
        &self.channels[id as usize - 1]
    }

    /// Rotates every channel right by `shift` samples.
    pub fn circularly_shifted(&self, shift: usize) -> Recording {
        Recording {
            channels: self
                .channels
                .iter()
                .map(|c| crate::signal::circular_shift(c, shift))
                .collect(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Fault signatures

/// Synthetic tone set emitted by one fault. Tones sit at `h * base` shaft
/// orders for `h = 1..=harmonics`; with a sideband spacing the tones are
/// instead `h * base +/- spacing` and the carrier itself belongs to the
/// baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultSignature {
    pub fault: FaultCode,
    pub base_multiplier: f64,
    pub harmonics: u32,
    /// Peak amplitude on home channels, before per-axis gain.
    pub amplitude: f64,
    pub sideband_spacing: Option<f64>,
    pub home_channels: Vec<u8>,
    pub coupled_channels: Vec<u8>,
    pub coupling: f64,
}

impl FaultSignature {
    /// Tone frequencies as multiples of shaft speed.
    pub fn orders(&self) -> Vec<f64> {
        (1..=self.harmonics)
            .flat_map(|h| {
                let c = h as f64 * self.base_multiplier;
                match self.sideband_spacing {
                    Some(s) => vec![c - s, c + s],
                    None => vec![c],
                }
            })
            .collect()
    }

    /// Gain of this fault on channel `id`: full on home channels,
    /// `coupling` on coupled channels, zero elsewhere.
    pub fn channel_gain(&self, id: u8) -> f64 {
        if self.home_channels.contains(&id) {
            1.0
        } else if self.coupled_channels.contains(&id) {
            self.coupling
        } else {
            0.0
        }
    }
}

/// Fault tones leak onto neighbouring components at this attenuation.
pub const COUPLING_ATTENUATION: f64 = 0.3;
/// Gear-mesh order of the baseline gearbox signal.
pub const MESH_ORDER: f64 = 5.0;
const SIGNATURE_AMPLITUDE: f64 = 0.35;

/// Shaft orders: (fault, base, harmonics, sideband spacing).
/// Motor electrical faults are sidebands of the 1x line, gear tooth faults
/// are sidebands of the mesh order, bearing faults are discrete
/// defect orders. All tones are at least 0.15 orders apart from each other
/// and from the baseline lines 1x, 2x, 3x and the mesh.
const SIGNATURE_TABLE: [(&str, f64, u32, Option<f64>); 17] = [
    ("M1", 1.0, 1, Some(0.30)),
    ("M2", 1.0, 1, Some(0.15)),
    ("M3", 3.60, 2, None),
    ("M4", 2.40, 1, None),
    ("G1", MESH_ORDER, 1, Some(0.25)),
    ("G2", MESH_ORDER, 1, Some(0.50)),
    ("G3", MESH_ORDER, 1, Some(0.75)),
    ("G4", MESH_ORDER, 1, Some(1.00)),
    ("G5", 6.45, 1, None),
    ("G6", 3.15, 2, None),
    ("G7", 2.70, 1, None),
    ("G8", 0.40, 1, None),
    ("LA1", 7.55, 1, None),
    ("LA2", 3.85, 1, None),
    ("LA3", 1.80, 1, None),
    ("LA4", 0.55, 1, None),
    ("RA1", 6.85, 1, None),
];

pub fn signature(fault: FaultCode) -> FaultSignature {
    let (_, base, harmonics, spacing) = SIGNATURE_TABLE[fault.index()];
    let component = fault.component();
    let home: Vec<u8> = component.own_channels().collect();
    let coupled: Vec<u8> = match component {
        Component::Gearbox => (1..=6).chain(16..=21).collect(),
        _ => Component::Gearbox.own_channels().collect(),
    };
    FaultSignature {
        fault,
        base_multiplier: base,
        harmonics,
        amplitude: SIGNATURE_AMPLITUDE,
        sideband_spacing: spacing,
        home_channels: home,
        coupled_channels: coupled,
        coupling: COUPLING_ATTENUATION,
    }
}

/// True for the three-phase current channels CH7-CH9.
pub fn is_current_channel(id: u8) -> bool {
    (7..=9).contains(&id)
}

/// Per-axis sensitivity of tri-axial accelerometers. Motor faults show up
/// strongly in the stator current, hence the larger current gain.
fn axis_gain(id: u8) -> f64 {
    if is_current_channel(id) {
        return CURRENT_FAULT_GAIN;
    }
    [1.0, 0.8, 0.6][(id as usize - 1) % 3]
}

/// Supply current amplitude on CH7-CH9.
pub const CURRENT_AMPLITUDE: f64 = 3.0;
const CURRENT_FAULT_GAIN: f64 = 3.0;
/// Noise level of the desk-scale dataset preset.
pub const DESK_NOISE_LEVEL: f64 = 0.3;
/// Bound on the random supply-frequency slip.
pub const MAX_SLIP_HZ: f64 = 2.0;
const SHAFT_HARMONICS: [(f64, f64); 3] = [(1.0, 1.0), (2.0, 0.5), (3.0, 0.25)];
const MESH_AMPLITUDE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub sample_rate: u32,
    pub duration_s: f64,
    pub noise_level: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            sample_rate: PRODUCTION_SAMPLE_RATE,
            duration_s: 1.0,
            noise_level: 1.0,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn add_tone(buf: &mut [f64], rate: f64, freq: f64, amplitude: f64, phase: f64) {
    if amplitude == 0.0 || freq <= 0.0 || freq >= rate / 2.0 {
        return;
    }
    let w = 2.0 * PI * freq / rate;
    for (n, v) in buf.iter_mut().enumerate() {
        *v += amplitude * (w * n as f64 + phase).sin();
    }
}

/// Baseline-only channel data in f64. Used by [`generate_recording`] and by
/// superposition checks.
pub fn baseline_signals(
    condition: WorkingCondition,
    params: &GeneratorParams,
    seed: u64,
) -> Vec<Vec<f64>> {
    let rate = params.sample_rate as f64;
    let len = (params.duration_s * rate).round() as usize;
    let speed = condition.speed_hz as f64;
    let load = condition.load_gain();
    let mut rng = stream_rng(seed, 0);
    let slip = rng.gen_range(-MAX_SLIP_HZ..=MAX_SLIP_HZ);
    let supply_phase = rng.gen_range(0.0..2.0 * PI);

    (1..=CHANNEL_COUNT as u8)
        .map(|id| {
            let mut buf = vec![0.0; len];
            if is_current_channel(id) {
                let offset = (id - 7) as f64 * 2.0 * PI / 3.0;
                add_tone(&mut buf, rate, speed + slip, CURRENT_AMPLITUDE, supply_phase - offset);
                for v in buf.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += params.noise_level * z;
                }
                return buf;
            }
            let g = axis_gain(id);
            for &(order, amp) in &SHAFT_HARMONICS {
                let phase = rng.gen_range(0.0..2.0 * PI);
                add_tone(&mut buf, rate, order * speed, amp * g, phase);
            }
            if Component::Gearbox.own_channels().contains(&id) {
                let phase = rng.gen_range(0.0..2.0 * PI);
                add_tone(&mut buf, rate, MESH_ORDER * speed, MESH_AMPLITUDE * g, phase);
            }
            for v in buf.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + params.noise_level * z) * load;
            }
            buf
        })
        .collect()
}

/// The additive contribution of one fault, in f64.
pub fn fault_delta(
    fault: FaultCode,
    condition: WorkingCondition,
    params: &GeneratorParams,
    seed: u64,
) -> Vec<Vec<f64>> {
    let rate = params.sample_rate as f64;
    let len = (params.duration_s * rate).round() as usize;
    let speed = condition.speed_hz as f64;
    let sig = signature(fault);
    let mut rng = stream_rng(seed, 1 + fault.index() as u64);
    // severity varies between recordings
    let severity = rng.gen_range(0.75..1.25);
    let orders = sig.orders();
    let phases: Vec<f64> = orders.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    (1..=CHANNEL_COUNT as u8)
        .map(|id| {
            let mut buf = vec![0.0; len];
            let gain = sig.channel_gain(id);
            if gain == 0.0 {
                return buf;
            }
            let load = if is_current_channel(id) { 1.0 } else { condition.load_gain() };
            let amp = sig.amplitude * severity * gain * axis_gain(id) * load;
            for (order, phase) in orders.iter().zip(&phases) {
                add_tone(&mut buf, rate, order * speed, amp, *phase);
            }
            buf
        })
        .collect()
}

/// Deterministic synthetic recording for `label` under `condition`.
pub fn generate_recording(
    label: CompoundLabel,
    condition: WorkingCondition,
    params: &GeneratorParams,
    seed: u64,
) -> Result<Recording, DataError> {
    condition.validate()?;
    CompoundLabel::from_masks(label.masks[0], label.masks[1], label.masks[2], label.masks[3])?;
    if !(params.duration_s >= 1.0 && params.duration_s.is_finite()) {
        return Err(DataError::InvalidParameter(format!(
            "duration {} s (must be >= 1 s)",
            params.duration_s
        )));
    }
    if !(params.noise_level >= 0.0 && params.noise_level.is_finite()) {
        return Err(DataError::InvalidParameter(format!(
            "noise level {}",
            params.noise_level
        )));
    }
    if params.sample_rate == 0 {
        return Err(DataError::InvalidParameter("sample rate 0".into()));
    }
    let mut signals = baseline_signals(condition, params, seed);
    for fault in label.faults() {
        for (acc, d) in signals
            .iter_mut()
            .zip(fault_delta(fault, condition, params, seed))
        {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += b;
            }
        }
    }
    Ok(Recording {
        channels: signals
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f32).collect())
            .collect(),
        sample_rate: params.sample_rate,
        label,
        condition: Some(condition),
        seed,
    })
}

// ---------------------------------------------------------------------------
// Recording file format

const RECORD_MAGIC: &str = "FFTCNN-REC";
const RECORD_VERSION: u32 = 1;
/// Bytes reserved for the textual header.
pub const RECORD_HEADER_LEN: usize = 512;

/// Serializes a recording: a space-padded 512-byte text header followed by
/// channel-major little-endian f32 samples.
pub fn write_recording<W: Write>(rec: &Recording, mut w: W) -> Result<(), RecordError> {
    let mut header = format!(
        "{RECORD_MAGIC}\nversion={RECORD_VERSION}\nchannels={}\nsample_rate={}\nlength={}\nlabel={}\ncondition={}\nseed={}\n",
        rec.channels.len(),
        rec.sample_rate,
        rec.len(),
        rec.label,
        format_condition(rec.condition),
        rec.seed,
    );
    if header.len() >= RECORD_HEADER_LEN {
        return Err(RecordError::MalformedHeader("header overflow".into()));
    }
    header.extend(std::iter::repeat(' ').take(RECORD_HEADER_LEN - 1 - header.len()));
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut payload = Vec::with_capacity(rec.channels.len() * rec.len() * 4);
    for ch in &rec.channels {
        for v in ch {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_recording<R: Read>(mut r: R) -> Result<Recording, RecordError> {
    let mut head = vec![0u8; RECORD_HEADER_LEN];
    let mut got = 0;
    while got < RECORD_HEADER_LEN {
        let n = r.read(&mut head[got..])?;
        if n == 0 {
            return Err(RecordError::MalformedHeader(format!(
                "file ends after {got} header bytes"
            )));
        }
        got += n;
    }
    let text = std::str::from_utf8(&head)
        .map_err(|_| RecordError::MalformedHeader("header is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some(RECORD_MAGIC) {
        return Err(RecordError::MalformedHeader("bad magic".into()));
    }
    let mut fields = std::collections::HashMap::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| RecordError::MalformedHeader(format!("bad line `{line}`")))?;
        fields.insert(k, v);
    }
    let field = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| RecordError::MalformedHeader(format!("missing `{k}`")))
    };
    let num = |k: &str| -> Result<u64, RecordError> {
        field(k)?
            .parse()
            .map_err(|_| RecordError::MalformedHeader(format!("bad `{k}`")))
    };
    let version = num("version")? as u32;
    if version != RECORD_VERSION {
        return Err(RecordError::UnsupportedVersion(version));
    }
    let channels = num("channels")? as usize;
    if channels != CHANNEL_COUNT {
        return Err(RecordError::ChannelCountMismatch {
            expected: CHANNEL_COUNT,
            found: channels,
        });
    }
    let sample_rate = num("sample_rate")? as u32;
    let length = num("length")? as usize;
    let label: CompoundLabel = field("label")?
        .parse()
        .map_err(|e: DataError| RecordError::MalformedHeader(e.to_string()))?;
    let condition = parse_condition(field("condition")?)
        .map_err(|e| RecordError::MalformedHeader(e.to_string()))?;
    let seed = num("seed")?;

    let expected = channels * length * 4;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(RecordError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(RecordError::TrailingBytes(payload.len() - expected));
    }
    let channels = payload
        .chunks_exact(length * 4)
        .map(|ch| {
            ch.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect();
    Ok(Recording {
        channels,
        sample_rate,
        label,
        condition,
        seed,
    })
}

pub fn save_recording(rec: &Recording, path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = io::BufWriter::new(file);
    write_recording(rec, &mut w).map_err(|source| DataError::Record {
        path: path.to_path_buf(),
        source,
    })?;
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn load_recording(path: &Path) -> Result<Recording, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    read_recording(io::BufReader::new(file)).map_err(|source| DataError::Record {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    TestPrelim,
    TestFinal,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestPrelim, Split::TestFinal];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestPrelim => "test_prelim",
            Split::TestFinal => "test_final",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: CompoundLabel,
    pub condition: Option<WorkingCondition>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "#fftcnn-manifest v1";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.path.display(),
                e.label,
                format_condition(e.condition),
                e.split
            ));
        }
        out
    }

    pub fn save(&self) -> Result<PathBuf, DataError> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| DataError::io(&path, e))?;
        Ok(path)
    }

    /// Reads `manifest.tsv` from `path` (a file or its directory) and checks
    /// that paths are unique and every file exists.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&file).map_err(|e| DataError::io(&file, e))?;
        let err = |line: usize, reason: String| DataError::Manifest {
            path: file.clone(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => return Err(err(1, "missing manifest header".into())),
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(err(i + 1, format!("expected 4 fields, got {}", cols.len())));
            }
            let entry = ManifestEntry {
                path: PathBuf::from(cols[0]),
                label: cols[1].parse().map_err(|e: DataError| err(i + 1, e.to_string()))?,
                condition: parse_condition(cols[2]).map_err(|e| err(i + 1, e.to_string()))?,
                split: cols[3].parse().map_err(|e| err(i + 1, e))?,
            };
            if !seen.insert(entry.path.clone()) {
                return Err(err(i + 1, format!("duplicate path {}", cols[0])));
            }
            if !root.join(&entry.path).is_file() {
                return Err(err(i + 1, format!("missing file {}", cols[0])));
            }
            entries.push(entry);
        }
        Ok(Self { root, entries })
    }
}

/// Entries paired with their 0/1 target for `fault`.
pub fn binary_labels<'a, I>(entries: I, fault: FaultCode) -> Vec<(&'a ManifestEntry, u8)>
where
    I: IntoIterator<Item = &'a ManifestEntry>,
{
    entries
        .into_iter()
        .map(|e| (e, u8::from(e.label.contains(fault))))
        .collect()
}

/// String-keyed variant of [`binary_labels`].
pub fn binary_labels_for_code<'a>(
    manifest: &'a DatasetManifest,
    code: &str,
) -> Result<Vec<(&'a ManifestEntry, u8)>, DataError> {
    let fault: FaultCode = code.parse()?;
    Ok(binary_labels(&manifest.entries, fault))
}

// ---------------------------------------------------------------------------
// Dataset construction

/// Recording counts for one compound label, indexed like [`Split::ALL`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCounts {
    pub label: CompoundLabel,
    pub counts: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub labels: Vec<LabelCounts>,
    pub conditions: Vec<WorkingCondition>,
    pub generator: GeneratorParams,
    pub seed: u64,
    /// Record test-split conditions as `unknown`, as in the challenge data.
    pub hide_test_conditions: bool,
}

impl DatasetSpec {
    pub fn empty() -> Self {
        Self {
            labels: Vec::new(),
            conditions: WorkingCondition::all(),
            generator: GeneratorParams::default(),
            seed: 0,
            hide_test_conditions: true,
        }
    }

    /// Reference label inventory with per-split counts: rows 1-17 get
    /// `single`, training compounds (rows 18-22) get `compound`, and every
    /// row gets `test` recordings in the final test split.
    pub fn from_reference(single: [usize; 2], compound: [usize; 2], test: usize) -> Self {
        let labels = REFERENCE_LABELS
            .iter()
            .enumerate()
            .map(|(row, (s, in_train, in_prelim))| {
                let (train, val) = match (row < 17, in_train) {
                    (true, _) => (single[0], single[1]),
                    (false, true) => (compound[0], compound[1]),
                    _ => (0, 0),
                };
                LabelCounts {
                    label: s.parse().unwrap(),
                    counts: [train, val, if *in_prelim { test } else { 0 }, test],
                }
            })
            .collect();
        Self {
            labels,
            ..Self::empty()
        }
    }

    /// Small synthetic dataset: 40 train / 10 val recordings per
    /// single-fault row, 20 / 5 per training compound, and 6 recordings of
    /// every label in each test split (102 preliminary, 252 final).
    /// Sampled at 1 kHz with a lower noise level, since a 1000-point
    /// spectrum gains far less over the noise floor than a 64000-point one.
    pub fn desk_scale() -> Self {
        Self {
            generator: GeneratorParams {
                sample_rate: 1_000,
                duration_s: 1.0,
                noise_level: DESK_NOISE_LEVEL,
            },
            ..Self::from_reference([40, 10], [20, 5], 6)
        }
    }

    /// Training-split proportions of the reference dataset, in slices.
    pub fn reference_scale() -> Self {
        Self {
            ..Self::from_reference([40, 20], [20, 5], 6)
        }
    }

    pub fn total(&self) -> usize {
        self.labels.iter().map(|l| l.counts.iter().sum::<usize>()).sum()
    }

    /// The manifest `build_dataset` would write, without generating data.
    pub fn plan(&self) -> Vec<(ManifestEntry, WorkingCondition, u64)> {
        let mut out = Vec::with_capacity(self.total());
        let mut cond_rng = stream_rng(self.seed, u64::MAX);
        let mut index = 0u64;
        for split in Split::ALL {
            for lc in &self.labels {
                let count = lc.counts[split as usize];
                // rotate through conditions from a random start so every
                // label sees every condition
                let start = if self.conditions.is_empty() {
                    0
                } else {
                    cond_rng.gen_range(0..self.conditions.len())
                };
                for i in 0..count {
                    let condition = self.conditions[(start + i) % self.conditions.len()];
                    let seed = splitmix(self.seed ^ splitmix(index));
                    let name = format!("{}/{:05}_{}.rec", split, index, lc.label);
                    let hidden = self.hide_test_conditions
                        && matches!(split, Split::TestPrelim | Split::TestFinal);
                    out.push((
                        ManifestEntry {
                            path: PathBuf::from(name),
                            label: lc.label,
                            condition: if hidden { None } else { Some(condition) },
                            split,
                        },
                        condition,
                        seed,
                    ));
                    index += 1;
                }
            }
        }
        out
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generates every planned recording under `dir` and writes the manifest.
pub fn build_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest, DataError> {
    if spec.conditions.is_empty() && spec.total() > 0 {
        return Err(DataError::InvalidCondition("no working conditions".into()));
    }
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let plan = spec.plan();
    for split in Split::ALL {
        if plan.iter().any(|(e, _, _)| e.split == split) {
            let sub = dir.join(split.as_str());
            fs::create_dir_all(&sub).map_err(|e| DataError::io(&sub, e))?;
        }
    }
    let mut entries = Vec::with_capacity(plan.len());
    for (entry, condition, seed) in plan {
        let mut rec = generate_recording(entry.label, condition, &spec.generator, seed)?;
        rec.condition = entry.condition;
        save_recording(&rec, &dir.join(&entry.path))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}
