//! Discrete Fourier transforms and half-magnitude spectra.
//!
//! Power-of-two lengths go through an iterative radix-2 even/odd
//! decimation; every other length (including the 64 000-sample slices of
//! the production layout) is reduced to a power-of-two convolution with
//! Bluestein's chirp-z trick.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::synthdata::Recording;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("signal contains a non-finite sample at index {index}")]
    InvalidSignal { index: usize },
    #[error("empty signal")]
    EmptySignal,
    #[error("recording of {available} samples is shorter than one slice of {slice_len}")]
    EmptySliceSet { available: usize, slice_len: usize },
    #[error("slice length {0} s x sample rate is not a positive integer sample count")]
    InvalidSliceLength(f64),
}

/// One channel's worth of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlice {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub channel_id: u8,
}

impl TimeSlice {
    pub fn new(samples: Vec<f64>, sample_rate: f64, channel_id: u8) -> Self {
        Self {
            samples,
            sample_rate,
            channel_id,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn validate(&self) -> Result<(), SignalError> {
        validate_samples(&self.samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub bins: Vec<Complex64>,
    /// Hz per bin, `sample_rate / N`.
    pub bin_resolution: f64,
}

impl ComplexSpectrum {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.bins.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalfMagnitudeSpectrum {
    pub amplitudes: Vec<f64>,
    pub bin_resolution: f64,
}

impl HalfMagnitudeSpectrum {
    /// Frequency in Hz of bin `k`.
    pub fn frequency(&self, k: usize) -> f64 {
        k as f64 * self.bin_resolution
    }
}

/// How a complex bin is reduced to an amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagnitudeMode {
    /// `sqrt(re^2 + im^2)`.
    Modulus,
    /// `|re|` only, kept for comparison runs.
    RealPart,
}

impl MagnitudeMode {
    #[cfg(not(feature = "real-part-magnitude"))]
    pub const DEFAULT: MagnitudeMode = MagnitudeMode::Modulus;
    #[cfg(feature = "real-part-magnitude")]
    pub const DEFAULT: MagnitudeMode = MagnitudeMode::RealPart;
}

fn validate_samples(samples: &[f64]) -> Result<(), SignalError> {
    if samples.is_empty() {
        return Err(SignalError::EmptySignal);
    }
    match samples.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(SignalError::InvalidSignal { index }),
        None => Ok(()),
    }
}

/// Splits every channel of `recording` into contiguous, non-overlapping
/// windows of `slice_seconds`. The trailing remainder is dropped.
///
/// Returns one group per window, each group holding one slice per channel.
pub fn slice_recording(
    recording: &Recording,
    slice_seconds: f64,
) -> Result<Vec<Vec<TimeSlice>>, SignalError> {
    let rate = recording.sample_rate as f64;
    let slice_len = slice_length(slice_seconds, rate)?;
    let available = recording.len();
    if available < slice_len {
        return Err(SignalError::EmptySliceSet {
            available,
            slice_len,
        });
    }
    let groups = available / slice_len;
    Ok((0..groups)
        .map(|g| {
            recording
                .channels
                .iter()
                .enumerate()
                .map(|(c, ch)| {
                    let window = &ch[g * slice_len..(g + 1) * slice_len];
                    TimeSlice::new(
                        window.iter().map(|&v| v as f64).collect(),
                        rate,
                        (c + 1) as u8,
                    )
                })
                .collect()
        })
        .collect())
}

pub(crate) fn slice_length(slice_seconds: f64, rate: f64) -> Result<usize, SignalError> {
    let raw = slice_seconds * rate;
    let rounded = raw.round();
    if !(raw.is_finite() && rounded >= 1.0 && (raw - rounded).abs() < 1e-9) {
        return Err(SignalError::InvalidSliceLength(slice_seconds));
    }
    Ok(rounded as usize)
}

/// Direct O(N^2) evaluation of the DFT sum. Used as the reference for
/// [`fft`].
pub fn dft_naive(x: &TimeSlice) -> Result<ComplexSpectrum, SignalError> {
    x.validate()?;
    let n = x.len();
    // exp(-2 pi i m / N) for every residue m, so k*n is reduced mod N
    // before the lookup and each angle is computed directly
    let roots: Vec<Complex64> = (0..n)
        .map(|m| Complex64::from_polar(1.0, m as f64 * (-2.0 * PI / n as f64)))
        .collect();
    let bins = (0..n)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut m = 0;
            for &v in &x.samples {
                acc += roots[m] * v;
                m += k;
                if m >= n {
                    m -= n;
                }
            }
            acc
        })
        .collect();
    Ok(ComplexSpectrum {
        bins,
        bin_resolution: x.sample_rate / n as f64,
    })
}

/// Fast transform of a real slice.
pub fn fft(x: &TimeSlice) -> Result<ComplexSpectrum, SignalError> {
    x.validate()?;
    let plan = FftPlan::new(x.len());
    let mut buf: Vec<Complex64> = x.samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan.forward(&mut buf);
    Ok(ComplexSpectrum {
        bins: buf,
        bin_resolution: x.sample_rate / x.len() as f64,
    })
}

/// First `floor(N/2)` amplitudes of a real signal's spectrum.
pub fn half_magnitude(spectrum: &ComplexSpectrum) -> HalfMagnitudeSpectrum {
    half_magnitude_with(spectrum, MagnitudeMode::DEFAULT)
}

pub fn half_magnitude_with(spectrum: &ComplexSpectrum, mode: MagnitudeMode) -> HalfMagnitudeSpectrum {
    let half = spectrum.len() / 2;
    let amplitudes = spectrum.bins[..half]
        .iter()
        .map(|c| match mode {
            MagnitudeMode::Modulus => c.norm(),
            MagnitudeMode::RealPart => c.re.abs(),
        })
        .collect();
    HalfMagnitudeSpectrum {
        amplitudes,
        bin_resolution: spectrum.bin_resolution,
    }
}

/// Rotates `x` right by `shift` samples: `y[n] = x[(n - shift) mod N]`.
pub fn circular_shift<T: Copy>(x: &[T], shift: usize) -> Vec<T> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let s = shift % n;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&x[n - s..]);
    out.extend_from_slice(&x[..n - s]);
    out
}

/// Precomputed tables for repeated transforms of one length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    kind: PlanKind,
}

#[derive(Debug, Clone)]
enum PlanKind {
    Radix2(Radix2),
    Bluestein {
        inner: Radix2,
        /// `exp(-j*pi*k^2/N)` for k in 0..N
        chirp: Vec<Complex64>,
        /// transform of the zero-padded conjugate chirp filter
        filter: Vec<Complex64>,
    },
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "transform length must be positive");
        let kind = if n.is_power_of_two() {
            PlanKind::Radix2(Radix2::new(n))
        } else {
            let m = (2 * n - 1).next_power_of_two();
            let inner = Radix2::new(m);
            let two_n = 2 * n as u128;
            let chirp: Vec<Complex64> = (0..n)
                .map(|k| {
                    // k^2 mod 2N keeps the angle exact for large N
                    let q = ((k as u128 * k as u128) % two_n) as f64;
                    Complex64::from_polar(1.0, -PI * q / n as f64)
                })
                .collect();
            let mut filter = vec![Complex64::new(0.0, 0.0); m];
            filter[0] = chirp[0].conj();
            for k in 1..n {
                filter[k] = chirp[k].conj();
                filter[m - k] = chirp[k].conj();
            }
            inner.forward(&mut filter);
            PlanKind::Bluestein {
                inner,
                chirp,
                filter,
            }
        };
        Self { n, kind }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform. `buf.len()` must equal the plan length.
    pub fn forward(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "buffer length does not match plan");
        match &self.kind {
            PlanKind::Radix2(r) => r.forward(buf),
            PlanKind::Bluestein {
                inner,
                chirp,
                filter,
            } => {
                let m = inner.n;
                let mut work = vec![Complex64::new(0.0, 0.0); m];
                for (w, (x, c)) in work.iter_mut().zip(buf.iter().zip(chirp)) {
                    *w = x * c;
                }
                inner.forward(&mut work);
                for (w, f) in work.iter_mut().zip(filter) {
                    *w *= f;
                }
                inner.inverse_unscaled(&mut work);
                let scale = 1.0 / m as f64;
                for (k, out) in buf.iter_mut().enumerate() {
                    *out = work[k] * chirp[k] * scale;
                }
            }
        }
    }

    /// Transform of a real sequence.
    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }
}

#[derive(Debug, Clone)]
struct Radix2 {
    n: usize,
    /// `exp(-j*2*pi*k/N)` for k in 0..N/2
    twiddles: Vec<Complex64>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Self { n, twiddles }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    fn inverse_unscaled(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
    }

    /// Bit-reversal permutation followed by log2(N) butterfly passes; each
    /// pass merges the even- and odd-indexed half transforms.
    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        if n <= 1 {
            return;
        }
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if inverse {
                        w = w.conj();
                    }
                    let even = buf[start + k];
                    let odd = buf[start + k + half] * w;
                    buf[start + k] = even + odd;
                    buf[start + k + half] = even - odd;
                }
            }
            size *= 2;
        }
    }
}
