//! Transmit pulse synthesis and envelope detection.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::f64::consts::PI;

use crate::error::{param, Result};

pub const CENTER_FREQUENCY: f64 = 7.8e6;
pub const SAMPLING_FREQUENCY: f64 = 31.24e6;
pub const PULSE_CYCLES: u32 = 2;

/// Hann-weighted tone burst, sampled at the acquisition rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Pulse {
    pub center_frequency: f64,
    pub n_cycles: u32,
    pub sampling_frequency: f64,
    pub samples: Vec<f64>,
    /// Normalization applied to the continuous waveform.
    pub scale: f64,
}

impl Pulse {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.n_cycles as f64 / self.center_frequency
    }

    /// Time from pulse onset to its envelope peak.
    pub fn center_offset(&self) -> f64 {
        (self.samples.len() as f64 - 1.0) / 2.0 / self.sampling_frequency
    }

    pub fn wavelength(&self, c: f64) -> f64 {
        c / self.center_frequency
    }

    /// Continuous pulse value at a fractional sample index; zero outside
    /// the burst. Agrees with `samples` at integer positions.
    #[inline]
    pub fn sample_at(&self, pos: f64) -> f64 {
        let last = self.samples.len() as f64 - 1.0;
        if !(pos > 0.0 && pos < last) {
            return 0.0;
        }
        burst(pos, last, self.center_frequency / self.sampling_frequency) * self.scale
    }
}

fn burst(pos: f64, last: f64, cycles_per_sample: f64) -> f64 {
    let hann = 0.5 * (1.0 - (2.0 * PI * pos / last).cos());
    (2.0 * PI * cycles_per_sample * (pos - last / 2.0)).cos() * hann
}

/// Tone burst of `cycles` periods at `f0` under a Hann window spanning the
/// burst. The carrier phase is referenced to the window center so the burst
/// is symmetric and peaks on its middle sample.
pub fn make_pulse(f0: f64, cycles: u32, fs: f64) -> Result<Pulse> {
    if !(f0 > 0.0) || !(fs > 2.0 * f0) {
        return Err(param(format!("sampling frequency {fs} Hz must exceed twice {f0} Hz")));
    }
    if cycles < 1 {
        return Err(param("pulse needs at least one cycle"));
    }
    let n = (cycles as f64 * fs / f0).round() as usize + 1;
    let last = n as f64 - 1.0;
    let mut samples: Vec<f64> = (0..n).map(|k| burst(k as f64, last, f0 / fs)).collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for s in &mut samples {
        *s /= peak;
    }
    Ok(Pulse { center_frequency: f0, n_cycles: cycles, sampling_frequency: fs, samples, scale: 1.0 / peak })
}

/// Analytic signal of `trace`, resampled `upsample` times finer by spectral
/// zero padding. Entry `j` approximates the analytic signal at sample
/// position `j / upsample`.
pub fn analytic_signal(trace: &[f64], upsample: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex<f64>> {
    let n = trace.len();
    let m = n * upsample.max(1);
    if n == 0 {
        return Vec::new();
    }
    let mut spec: Vec<Complex<f64>> = trace.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut spec);

    let mut out = vec![Complex::new(0.0, 0.0); m];
    out[0] = spec[0];
    let half = n / 2;
    for k in 1..n.div_ceil(2) {
        out[k] = spec[k] * 2.0;
    }
    if n.is_multiple_of(2) && half > 0 {
        // Nyquist bin: keep once so the real part reproduces the input.
        out[half] = spec[half];
    }
    planner.plan_fft_inverse(m).process(&mut out);
    let scale = 1.0 / n as f64;
    for v in &mut out {
        *v *= scale;
    }
    out
}

/// Magnitude of the analytic signal.
pub fn envelope(trace: &[f64]) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    analytic_signal(trace, 1, &mut planner).iter().map(|c| c.norm()).collect()
}
