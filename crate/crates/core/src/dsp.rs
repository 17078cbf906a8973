//! Spectrogram front-end.
//!
//! A raw clip becomes a normalized 128x99 magnitude grid: resample to the
//! working rate, zero-pad (or truncate) to one second, windowed STFT,
//! drop the DC bin and keep the first 128 frequency bins, per-sample
//! standardize + min-max into [0,1], and derive a per-frame activity mask
//! marking which frames hold real audio rather than appended padding.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataio::AudioClip;
use crate::error::{Error, Result};
use crate::util::fnv1a64;

/// Working sample rate in Hz. Inputs at other rates are resampled.
pub const SAMPLE_RATE: u32 = 48_000;
/// Clip length after padding/truncation: exactly one second.
pub const TARGET_SAMPLES: usize = 48_000;
/// STFT window and transform length.
pub const FFT_SIZE: usize = 960;
/// STFT hop between frame starts.
pub const HOP: usize = 480;
/// Frequency bins kept after dropping DC.
pub const FREQ_BINS: usize = 128;
/// Time frames produced by a one-second clip.
pub const FRAMES: usize = 99;

/// One preprocessed clip: the model input grid plus its activity mask.
#[derive(Debug, Clone)]
pub struct SpectrogramSample {
    /// 128 frequency rows x 99 time columns, values in [0,1].
    pub grid: Array2<f32>,
    /// Per-frame activity: 1 while the frame starts inside real audio,
    /// 0 in the zero-padded tail. Always a prefix of ones.
    pub mask: Vec<u8>,
    /// Truth label 0..=9.
    pub digit: u8,
    pub clip_id: String,
}

impl SpectrogramSample {
    /// Check the structural invariants at the standard front-end geometry.
    pub fn validate(&self) -> Result<()> {
        self.validate_with_shape(FREQ_BINS, FRAMES)
    }

    /// Check the structural invariants against an explicit geometry:
    /// exact dims, [0,1] range, digit range, and the prefix-of-ones mask
    /// shape. Caches carry their own geometry in the header, so readers
    /// validate against that rather than the standard constants.
    pub fn validate_with_shape(&self, freq_bins: usize, frames: usize) -> Result<()> {
        let (f, t) = self.grid.dim();
        if f != freq_bins || t != frames {
            return Err(Error::Shape(format!(
                "grid must be {freq_bins}x{frames}, got {f}x{t}"
            )));
        }
        if self.mask.len() != frames {
            return Err(Error::Shape(format!(
                "mask must have {frames} entries, got {}",
                self.mask.len()
            )));
        }
        if self.digit > 9 {
            return Err(Error::InvalidArg(format!(
                "digit {} out of 0..=9",
                self.digit
            )));
        }
        if self.grid.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArg("grid value outside [0,1]".into()));
        }
        let mut seen_zero = false;
        for &m in &self.mask {
            match m {
                1 if seen_zero => {
                    return Err(Error::InvalidArg("mask is not a prefix of ones".into()))
                }
                0 => seen_zero = true,
                1 => {}
                other => return Err(Error::InvalidArg(format!("mask entry {other} not binary"))),
            }
        }
        Ok(())
    }

    /// Number of active (unpadded) frames.
    pub fn active_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Front-end configuration, recorded as a content hash in caches and
/// checkpoints so that evaluation refuses data preprocessed differently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub target_samples: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub freq_bins: usize,
    pub frames: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sample_rate: SAMPLE_RATE,
            target_samples: TARGET_SAMPLES,
            fft_size: FFT_SIZE,
            hop: HOP,
            freq_bins: FREQ_BINS,
            frames: FRAMES,
        }
    }
}

impl DspConfig {
    pub fn content_hash(&self) -> u64 {
        let s = format!(
            "rate={};target={};fft={};hop={};bins={};frames={};window=hann-periodic;norm=per-sample-standardize-minmax",
            self.sample_rate, self.target_samples, self.fft_size, self.hop, self.freq_bins, self.frames
        );
        fnv1a64(s.as_bytes())
    }
}

/// Linear-interpolation resampler. Adequate for integer-ratio conversions
/// of speech; anything fancier is out of scope for this front-end.
pub fn resample_linear(samples: &[f32], from_rate: u32, to_rate: u32) -> Vec<f32> {
    assert!(
        from_rate > 0 && to_rate > 0,
        "sample rates must be positive"
    );
    if from_rate == to_rate || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = f64::from(from_rate) / f64::from(to_rate);
    let out_len = ((samples.len() as f64) / ratio).round() as usize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(samples.len() - 1);
        let frac = (pos - lo as f64) as f32;
        let lo = lo.min(samples.len() - 1);
        out.push(samples[lo] * (1.0 - frac) + samples[hi] * frac);
    }
    out
}

/// Zero-pad to `target_samples`, keeping the original samples at the front.
/// Longer inputs are truncated to `target_samples`.
pub fn pad_to_duration(samples: &[f32], target_samples: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(target_samples);
    let keep = samples.len().min(target_samples);
    out.extend_from_slice(&samples[..keep]);
    out.resize(target_samples, 0.0);
    out
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
        .collect()
}

/// One-sided magnitude STFT: Hann window of `FFT_SIZE`, hop `HOP`, no
/// center padding. Returns `[FFT_SIZE/2 + 1]` frequency rows by
/// `floor((len - FFT_SIZE)/HOP) + 1` frame columns.
pub fn stft_magnitude(samples: &[f32]) -> Result<Array2<f64>> {
    if samples.len() < FFT_SIZE {
        return Err(Error::InvalidArg(format!(
            "need at least {FFT_SIZE} samples for one frame, got {}",
            samples.len()
        )));
    }
    let frames = (samples.len() - FFT_SIZE) / HOP + 1;
    let bins = FFT_SIZE / 2 + 1;
    let window = hann_window(FFT_SIZE);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];

    let mut mag = Array2::<f64>::zeros((bins, frames));
    for t in 0..frames {
        let start = t * HOP;
        for j in 0..FFT_SIZE {
            buf[j] = Complex::new(f64::from(samples[start + j]) * window[j], 0.0);
        }
        fft.process(&mut buf);
        for (b, v) in buf.iter().take(bins).enumerate() {
            mag[[b, t]] = v.norm();
        }
    }
    Ok(mag)
}

/// Drop the zero-frequency row and keep rows 1..=FREQ_BINS.
pub fn crop_and_select_bins(mag: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, _) = mag.dim();
    if rows < FREQ_BINS + 1 {
        return Err(Error::Shape(format!(
            "need at least {} frequency rows, got {rows}",
            FREQ_BINS + 1
        )));
    }
    Ok(mag.slice(ndarray::s![1..=FREQ_BINS, ..]).to_owned())
}

/// Per-sample standardization followed by min-max into [0,1].
/// A constant matrix maps to all zeros.
pub fn normalize(mag: &Array2<f64>) -> Array2<f64> {
    assert!(!mag.is_empty(), "normalize requires a non-empty matrix");
    let n = mag.len() as f64;
    let mean = mag.sum() / n;
    let var = mag.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Array2::zeros(mag.raw_dim());
    }
    let standardized = mag.mapv(|v| (v - mean) / std);
    let min = standardized.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = standardized
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Array2::zeros(mag.raw_dim());
    }
    standardized.mapv(|v| (v - min) / (max - min))
}

/// Frame-level activity: frame `t` is active iff its window start
/// `t * HOP` lies before the end of the real (unpadded) audio.
pub fn activity_mask(original_length: usize, frames: usize) -> Vec<u8> {
    (0..frames)
        .map(|t| u8::from(t * HOP < original_length))
        .collect()
}

/// Full front-end: resample -> pad -> STFT -> bin crop -> normalize -> mask.
pub fn preprocess(clip: &AudioClip) -> Result<SpectrogramSample> {
    let resampled;
    let working: &[f32] = if clip.sample_rate == SAMPLE_RATE {
        &clip.samples
    } else {
        resampled = resample_linear(&clip.samples, clip.sample_rate, SAMPLE_RATE);
        &resampled
    };
    let original_length = working.len().min(TARGET_SAMPLES);
    let padded = pad_to_duration(working, TARGET_SAMPLES);
    let mag = stft_magnitude(&padded)?;
    let cropped = crop_and_select_bins(&mag)?;
    let grid = normalize(&cropped);
    let mask = activity_mask(original_length, FRAMES);

    let sample = SpectrogramSample {
        grid: grid.mapv(|v| v as f32),
        mask,
        digit: clip.digit,
        clip_id: clip.id.clone(),
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::AudioClip;

    fn clip_from(samples: Vec<f32>, rate: u32, digit: u8) -> AudioClip {
        AudioClip::new("test".into(), samples, rate, digit, "spk".into()).unwrap()
    }

    /// O(n^2) discrete-Fourier-sum of one windowed frame: the independent
    /// oracle for the FFT path.
    fn dft_frame_magnitudes(frame: &[f32]) -> Vec<f64> {
        let n = frame.len();
        let window = hann_window(n);
        let bins = n / 2 + 1;
        let mut mags = Vec::with_capacity(bins);
        for k in 0..bins {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (j, &x) in frame.iter().enumerate() {
                let angle = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                let v = f64::from(x) * window[j];
                re += v * angle.cos();
                im += v * angle.sin();
            }
            mags.push((re * re + im * im).sqrt());
        }
        mags
    }

    #[test]
    fn pad_shorter_clip_appends_zeros() {
        let input: Vec<f32> = (0..30_000).map(|i| (i % 7) as f32).collect();
        let out = pad_to_duration(&input, 48_000);
        assert_eq!(out.len(), 48_000);
        assert_eq!(&out[..30_000], &input[..]);
        assert!(out[30_000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_exact_length_is_identity() {
        let input: Vec<f32> = (0..48_000).map(|i| (i as f32).sin()).collect();
        assert_eq!(pad_to_duration(&input, 48_000), input);
    }

    #[test]
    fn pad_longer_clip_truncates() {
        let input: Vec<f32> = (0..50_000).map(|i| i as f32).collect();
        let out = pad_to_duration(&input, 48_000);
        assert_eq!(&out[..], &input[..48_000]);
    }

    #[test]
    fn stft_one_second_gives_99_frames() {
        let samples = vec![0.25f32; 48_000];
        let mag = stft_magnitude(&samples).unwrap();
        assert_eq!(mag.dim(), (481, 99));
    }

    #[test]
    fn stft_of_zeros_is_zero() {
        let mag = stft_magnitude(&vec![0.0f32; 48_000]).unwrap();
        assert!(mag.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stft_rejects_short_input() {
        assert!(stft_magnitude(&vec![0.0f32; 959]).is_err());
    }

    #[test]
    fn stft_sinusoid_peaks_at_expected_bin() {
        // 1 kHz at 48 kHz with 50 Hz bin spacing -> bin 20 in every frame.
        let samples: Vec<f32> = (0..48_000)
            .map(|i| (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / 48_000.0).sin())
            .collect();
        let mag = stft_magnitude(&samples).unwrap();
        for t in 0..mag.ncols() {
            let col = mag.column(t);
            let peak = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(peak, 20, "frame {t} peaked at bin {peak}");
        }
    }

    #[test]
    fn stft_frame_matches_direct_fourier_sum() {
        // Deterministic pseudo-random frame, compared bin-by-bin.
        let frame: Vec<f32> = (0..FFT_SIZE)
            .map(|i| ((i as f32 * 12.9898).sin() * 43758.547).fract())
            .collect();
        let mag = stft_magnitude(&frame).unwrap();
        assert_eq!(mag.dim(), (481, 1));
        let oracle = dft_frame_magnitudes(&frame);
        for b in 0..481 {
            let got = mag[[b, 0]];
            let want = oracle[b];
            let rel = (got - want).abs() / want.abs().max(1e-9);
            assert!(rel < 1e-6, "bin {b}: fft {got} vs dft {want} (rel {rel})");
        }
    }

    #[test]
    fn crop_drops_dc_and_keeps_128_rows() {
        let mut mag = Array2::<f64>::zeros((481, 99));
        for ((r, c), v) in mag.indexed_iter_mut() {
            *v = (r * 1000 + c) as f64;
        }
        let out = crop_and_select_bins(&mag).unwrap();
        assert_eq!(out.dim(), (128, 99));
        for r in 0..128 {
            for c in 0..99 {
                assert_eq!(out[[r, c]], mag[[r + 1, c]]);
            }
        }
    }

    #[test]
    fn crop_removes_dc_energy() {
        let mut mag = Array2::<f64>::zeros((481, 5));
        mag.row_mut(0).fill(1.0);
        let out = crop_and_select_bins(&mag).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_matches_manual_slice_on_small_matrix() {
        let mag =
            Array2::<f64>::from_shape_fn((481, 3), |(r, c)| ((r * 31 + c * 17) % 101) as f64 / 7.0);
        let out = crop_and_select_bins(&mag).unwrap();
        let manual = mag.slice(ndarray::s![1..129, ..]).to_owned();
        assert_eq!(out, manual);
    }

    #[test]
    fn crop_rejects_too_few_rows() {
        let mag = Array2::<f64>::zeros((100, 99));
        assert!(crop_and_select_bins(&mag).is_err());
    }

    #[test]
    fn normalize_hits_zero_and_one() {
        let mag = Array2::from_shape_vec((2, 3), vec![0.3, 1.7, 0.9, 2.4, 0.1, 1.0]).unwrap();
        let out = normalize(&mag);
        let min = out.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn normalize_constant_matrix_is_zero() {
        let mag = Array2::from_elem((4, 4), 3.25);
        assert!(normalize(&mag).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_hand_example() {
        let mag = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = normalize(&mag);
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in out.iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn mask_full_audio_is_all_ones() {
        assert!(activity_mask(48_000, 99).iter().all(|&m| m == 1));
    }

    #[test]
    fn mask_empty_audio_is_all_zeros() {
        assert!(activity_mask(0, 99).iter().all(|&m| m == 0));
    }

    #[test]
    fn mask_half_second_covers_50_frames() {
        let mask = activity_mask(24_000, 99);
        // Window starts t*480 < 24000 hold for t = 0..=49.
        let expected: Vec<u8> = (0..99).map(|t| u8::from(t < 50)).collect();
        assert_eq!(mask, expected);
    }

    #[test]
    fn resample_triples_length_for_16k_to_48k() {
        let input: Vec<f32> = (0..1600).map(|i| (i as f32 / 50.0).sin()).collect();
        let out = resample_linear(&input, 16_000, 48_000);
        assert_eq!(out.len(), 4800);
        // Every third output sample lands exactly on an input sample.
        for (i, &v) in input.iter().enumerate() {
            assert!((out[3 * i] - v).abs() < 1e-6);
        }
    }

    #[test]
    fn preprocess_meets_all_invariants() {
        let samples: Vec<f32> = (0..30_000)
            .map(|i| (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 48_000.0).sin() * 0.5)
            .collect();
        let clip = clip_from(samples, 48_000, 3);
        let s = preprocess(&clip).unwrap();
        s.validate().unwrap();
        assert_eq!(s.grid.dim(), (128, 99));
        assert_eq!(s.digit, 3);
        let expected: usize = activity_mask(30_000, 99).iter().map(|&m| m as usize).sum();
        assert_eq!(s.active_frames(), expected);
    }

    #[test]
    fn preprocess_zero_clip_gives_zero_grid_and_half_mask() {
        let clip = clip_from(vec![0.0; 24_000], 48_000, 0);
        let s = preprocess(&clip).unwrap();
        assert!(s.grid.iter().all(|&v| v == 0.0));
        assert_eq!(s.active_frames(), 50);
    }

    #[test]
    fn preprocess_is_deterministic() {
        let samples: Vec<f32> = (0..20_000)
            .map(|i| ((i * i) % 997) as f32 / 997.0)
            .collect();
        let clip = clip_from(samples, 48_000, 7);
        let a = preprocess(&clip).unwrap();
        let b = preprocess(&clip).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn trailing_file_zeros_change_mask_but_not_grid() {
        // Same audible content; one clip carries explicit trailing zeros in
        // the file, so its unpadded length is larger.
        let audio: Vec<f32> = (0..20_000)
            .map(|i| (2.0 * std::f32::consts::PI * 700.0 * i as f32 / 48_000.0).sin())
            .collect();
        let mut with_zeros = audio.clone();
        with_zeros.extend(std::iter::repeat(0.0).take(10_000));

        let a = preprocess(&clip_from(audio, 48_000, 1)).unwrap();
        let b = preprocess(&clip_from(with_zeros, 48_000, 1)).unwrap();
        assert_eq!(a.grid, b.grid);
        assert!(a.active_frames() < b.active_frames());
    }

    #[test]
    fn dsp_config_hash_is_stable_and_sensitive() {
        let base = DspConfig::default();
        assert_eq!(base.content_hash(), DspConfig::default().content_hash());
        let mut other = DspConfig::default();
        other.hop = 240;
        assert_ne!(base.content_hash(), other.content_hash());
    }
}
