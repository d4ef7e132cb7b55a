//! Log-mel spectrogram front end.
//!
//! Periodic Hann window, one-sided power STFT without padding (partial tail
//! frames are dropped), HTK mel triangles snapped to FFT bins with peak 1,
//! and a -100 dB floor.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::synth::AudioClip;

pub const POWER_FLOOR: f64 = 1e-10;
/// `10 * log10(POWER_FLOOR)`.
pub const FLOOR_DB: f64 = -100.0;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 - 0.5 * (std::f64::consts::TAU * k as f64 / n as f64).cos())
        .collect()
}

pub fn frame_count(num_samples: usize, n_fft: usize, hop: usize) -> usize {
    if num_samples < n_fft {
        0
    } else {
        1 + (num_samples - n_fft) / hop
    }
}

fn check_stft_args(n_fft: usize, hop: usize) -> Result<()> {
    if !n_fft.is_power_of_two() || n_fft < 2 {
        return Err(Error::Dsp(format!("n_fft {n_fft} must be a power of two >= 2")));
    }
    if hop == 0 {
        return Err(Error::Dsp("hop must be >= 1".into()));
    }
    Ok(())
}

struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(n_fft: usize, hop: usize) -> Result<Self> {
        check_stft_args(n_fft, hop)?;
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Stft { n_fft, hop, window: hann_window(n_fft), fft })
    }

    /// Calls `f(frame_index, power_bins)` for each full frame.
    fn for_each_frame(&self, samples: &[f32], mut f: impl FnMut(usize, &[f64])) {
        let frames = frame_count(samples.len(), self.n_fft, self.hop);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        for t in 0..frames {
            let start = t * self.hop;
            for (k, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(samples[start + k] as f64 * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            f(t, &power);
        }
    }
}

/// Windowed power spectrum per frame, bins `0..=n_fft/2`.
pub fn power_stft(samples: &[f32], n_fft: usize, hop: usize) -> Result<Matrix> {
    let stft = Stft::new(n_fft, hop)?;
    let mut out = Matrix::zeros(frame_count(samples.len(), n_fft, hop), n_fft / 2 + 1);
    let cols = out.cols;
    stft.for_each_frame(samples, |t, p| out.data[t * cols..(t + 1) * cols].copy_from_slice(p));
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// FFT bins of the `n_mels + 2` mel-equispaced edge points; filter `i`
/// rises from bin `i`, peaks at `i + 1` and falls to `i + 2`.
fn mel_edge_bins(n_mels: usize, n_fft: usize, sr: u32, fmin: f64, fmax: f64) -> Result<Vec<usize>> {
    if n_mels == 0 {
        return Err(Error::Dsp("n_mels must be >= 1".into()));
    }
    if !(0.0 <= fmin && fmin < fmax && fmax <= sr as f64 / 2.0) {
        return Err(Error::Dsp(format!(
            "need 0 <= fmin < fmax <= sr/2, got fmin {fmin} fmax {fmax} sr {sr}"
        )));
    }
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let bins: Vec<usize> = (0..n_mels + 2)
        .map(|i| {
            let hz = mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64);
            ((hz * n_fft as f64 / sr as f64).round() as usize).min(n_fft / 2)
        })
        .collect();
    if let Some(w) = bins.windows(2).position(|w| w[0] == w[1]) {
        return Err(Error::Dsp(format!(
            "mel points {w} and {} share FFT bin {}; use a larger n_fft or fewer mels",
            w + 1,
            bins[w]
        )));
    }
    Ok(bins)
}

/// Triangular filters, `n_mels x (n_fft/2 + 1)`, each with peak value 1.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sr: u32, fmin: f64, fmax: f64) -> Result<Matrix> {
    let edges = mel_edge_bins(n_mels, n_fft, sr, fmin, fmax)?;
    let mut fb = Matrix::zeros(n_mels, n_fft / 2 + 1);
    for m in 0..n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for j in l..=r {
            let w = if j <= c {
                (j - l) as f64 / (c - l) as f64
            } else {
                (r - j) as f64 / (r - c) as f64
            };
            fb.data[m * fb.cols + j] = w;
        }
    }
    Ok(fb)
}

/// Peak frequency of each mel filter (its snapped FFT bin), in Hz.
pub fn mel_center_frequencies(n_mels: usize, n_fft: usize, sr: u32, fmin: f64, fmax: f64) -> Result<Vec<f64>> {
    let edges = mel_edge_bins(n_mels, n_fft, sr, fmin, fmax)?;
    Ok(edges[1..=n_mels].iter().map(|&b| b as f64 * sr as f64 / n_fft as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig { n_fft: 2048, hop: 480, n_mels: 64, fmin: 20.0, fmax: 24_000.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    /// `frames x n_mels`, in dB.
    pub values: Matrix,
    pub n_mels: usize,
    pub frame_hop_s: f64,
}

impl LogMelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.rows
    }

    /// `frames:u32, n_mels:u32`, then row-major `f32`, all little-endian.
    pub fn to_dump(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(8 + self.values.data.len() * 4);
        b.extend_from_slice(&(self.values.rows as u32).to_le_bytes());
        b.extend_from_slice(&(self.values.cols as u32).to_le_bytes());
        for &v in &self.values.data {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
        b
    }

    pub fn from_dump(bytes: &[u8], frame_hop_s: f64) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Dsp("spectrogram dump too short".into()));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
            return Err(Error::Dsp(format!("dump size mismatch for {rows}x{cols}")));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(LogMelSpectrogram { values: Matrix { rows, cols, data }, n_mels: cols, frame_hop_s })
    }
}

/// Reusable extractor: window, FFT plan and sparse filterbank built once.
pub struct LogMelExtractor {
    config: LogMelConfig,
    stft: Stft,
    /// Per mel band: first bin and weights.
    bands: Vec<(usize, Vec<f64>)>,
}

impl LogMelExtractor {
    pub fn new(config: LogMelConfig) -> Result<Self> {
        let stft = Stft::new(config.n_fft, config.hop)?;
        let fb = mel_filterbank(config.n_mels, config.n_fft, crate::synth::SAMPLE_RATE, config.fmin, config.fmax)?;
        let bands = (0..fb.rows)
            .map(|m| {
                let row = fb.row(m);
                let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (first, row[first..=last].to_vec())
            })
            .collect();
        Ok(LogMelExtractor { config, stft, bands })
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.config
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<LogMelSpectrogram> {
        if clip.sample_rate != crate::synth::SAMPLE_RATE {
            return Err(Error::Dsp(format!(
                "sample rate {} Hz, expected {}",
                clip.sample_rate,
                crate::synth::SAMPLE_RATE
            )));
        }
        let n_mels = self.config.n_mels;
        let mut values = Matrix::zeros(frame_count(clip.samples.len(), self.config.n_fft, self.config.hop), n_mels);
        self.stft.for_each_frame(&clip.samples, |t, power| {
            let row = &mut values.data[t * n_mels..(t + 1) * n_mels];
            for (out, (first, w)) in row.iter_mut().zip(&self.bands) {
                let p: f64 = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
                *out = if p <= POWER_FLOOR { FLOOR_DB } else { 10.0 * p.log10() };
            }
        });
        Ok(LogMelSpectrogram {
            values,
            n_mels,
            frame_hop_s: self.config.hop as f64 / crate::synth::SAMPLE_RATE as f64,
        })
    }
}

pub fn log_mel(clip: &AudioClip, config: &LogMelConfig) -> Result<LogMelSpectrogram> {
    LogMelExtractor::new(*config)?.extract(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_examples() {
        assert_eq!(hann_window(2), vec![0.0, 1.0]);
        for n in 2..50 {
            assert_eq!(hann_window(n)[0], 0.0);
        }
        let s: f64 = hann_window(1024).iter().sum();
        assert!((s - 512.0).abs() < 1e-9);
    }

    #[test]
    fn frame_law() {
        assert_eq!(frame_count(48_000, 2048, 480), 96);
        assert_eq!(frame_count(2047, 2048, 480), 0);
        assert_eq!(frame_count(2048, 2048, 480), 1);
        assert_eq!(power_stft(&[0.0; 100], 128, 10).unwrap().rows, 0);
        assert!(power_stft(&[0.0; 100], 100, 10).is_err());
    }

    #[test]
    fn mel_formula() {
        assert!((hz_to_mel(440.0) - 549.64).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rows() {
        let fb = mel_filterbank(64, 2048, 48_000, 20.0, 24_000.0).unwrap();
        assert_eq!((fb.rows, fb.cols), (64, 1025));
        for m in 0..64 {
            let row = fb.row(m);
            assert_eq!(row.iter().cloned().fold(f64::MIN, f64::max), 1.0);
            assert_eq!(row.iter().cloned().fold(f64::MAX, f64::min), 0.0);
        }
    }

    #[test]
    fn degenerate_filterbank_rejected() {
        let err = mel_filterbank(128, 256, 48_000, 0.0, 24_000.0).unwrap_err();
        assert!(err.to_string().contains("larger n_fft"));
        assert!(mel_filterbank(10, 2048, 48_000, 500.0, 100.0).is_err());
        assert!(mel_filterbank(10, 2048, 48_000, 0.0, 30_000.0).is_err());
    }

    #[test]
    fn silence_floor_and_wrong_rate() {
        let clip = AudioClip::new(vec![0.0; 48_000]);
        let lm = log_mel(&clip, &LogMelConfig::default()).unwrap();
        assert_eq!(lm.frames(), 96);
        assert!(lm.values.data.iter().all(|&v| v == -100.0));
        let mut bad = clip.clone();
        bad.sample_rate = 44_100;
        assert!(log_mel(&bad, &LogMelConfig::default()).is_err());
    }

    fn sine(freq: f64, amp: f64, n: usize) -> AudioClip {
        let sr = crate::synth::SAMPLE_RATE as f64;
        AudioClip::new((0..n).map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin()) as f32).collect())
    }

    #[test]
    fn sine_peaks_in_nearest_band() {
        let c = LogMelConfig::default();
        let centers = mel_center_frequencies(c.n_mels, c.n_fft, 48_000, c.fmin, c.fmax).unwrap();
        let nearest = argmin_by(&centers, |f| (f - 440.0).abs());
        let lm = log_mel(&sine(440.0, 0.5, 48_000), &c).unwrap();
        assert_eq!(lm.frames(), 96);
        for t in 0..lm.frames() {
            assert_eq!(argmin_by(lm.values.row(t), |v| -v), nearest, "frame {t}");
        }
    }

    fn argmin_by(xs: &[f64], f: impl Fn(f64) -> f64) -> usize {
        (0..xs.len()).min_by(|&a, &b| f(xs[a]).total_cmp(&f(xs[b]))).unwrap()
    }

    proptest::proptest! {
        #[test]
        fn gain_of_ten_adds_twenty_db(freq in 100.0f64..8000.0, amp in 0.01f64..0.09) {
            let c = LogMelConfig::default();
            // Samples on a 1/4096 grid so the gain of ten is exact in f32.
            let base: Vec<f32> = sine(freq, amp, 9600).samples.iter().map(|&x| (x * 4096.0).round() / 4096.0).collect();
            let quiet = log_mel(&AudioClip::new(base.clone()), &c).unwrap();
            let scaled: Vec<f32> = base.iter().map(|&x| x * 10.0).collect();
            let loud = log_mel(&AudioClip::new(scaled), &c).unwrap();
            for (q, l) in quiet.values.data.iter().zip(&loud.values.data) {
                if *q > FLOOR_DB + 40.0 {
                    proptest::prop_assert!((l - q - 20.0).abs() < 1e-6, "{q} -> {l}");
                }
            }
        }
    }

    #[test]
    fn dump_roundtrip() {
        let clip = AudioClip::new((0..5000).map(|i| ((i as f32) * 0.01).sin() * 0.3).collect());
        let lm = log_mel(&clip, &LogMelConfig::default()).unwrap();
        let back = LogMelSpectrogram::from_dump(&lm.to_dump(), lm.frame_hop_s).unwrap();
        assert_eq!(back.frames(), lm.frames());
        for (a, b) in back.values.data.iter().zip(&lm.values.data) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(LogMelSpectrogram::from_dump(&[1, 0, 0, 0, 1, 0, 0, 0], 0.01).is_err());
    }
}
