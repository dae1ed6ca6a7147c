//! Log-mel front end: WAV loading, Mel-spectrograms, and per-video-frame chunks.
//!
//! Each video frame is paired with a 16x80 slice of the spectrogram. At the
//! fixed 16 kHz / hop 200 configuration the spectrogram advances 80 steps per
//! second, i.e. 3.2 steps per frame at 25 fps.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const CHUNK_STEPS: usize = 16;
pub const N_MELS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "unsupported sample rate {sample_rate} Hz: expected {SAMPLE_RATE} Hz (resampling is not performed)"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Audio("audio clip is empty".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Audio(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono PCM WAV file (16-bit integer or 32-bit float).
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = hound::WavReader::open(path)
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Audio(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .into_samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<_, _>>(),
            (hound::SampleFormat::Float, 32) => {
                reader.into_samples::<f32>().collect::<std::result::Result<_, _>>()
            }
            (fmt, bits) => {
                return Err(Error::Audio(format!(
                    "{}: unsupported WAV encoding {fmt:?}/{bits} bit",
                    path.display()
                )))
            }
        }
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes the clip as 16-bit PCM.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let wrap = |e: hound::Error| Error::Audio(format!("{}: {e}", path.display()));
        let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
        for &v in &self.samples {
            let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(q).map_err(wrap)?;
        }
        writer.finalize().map_err(wrap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            window: 800,
            hop: 200,
            n_mels: N_MELS,
            fmin: 55.0,
            fmax: 7600.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window < self.hop {
            return Err(Error::Audio(format!(
                "window ({}) must be >= hop ({}) > 0",
                self.window, self.hop
            )));
        }
        if self.n_mels == 0 || !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return Err(Error::Audio("invalid mel band configuration".into()));
        }
        if self.fmax > SAMPLE_RATE as f64 / 2.0 {
            return Err(Error::Audio(format!(
                "fmax {} exceeds Nyquist frequency",
                self.fmax
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Audio("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / SAMPLE_RATE as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `num_steps x n_mels` natural-log mel energies.
    pub values: Array2<f32>,
    pub hop_seconds: f64,
}

impl MelSpectrogram {
    pub fn num_steps(&self) -> usize {
        self.values.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelChunk {
    pub values: Array2<f32>,
    pub frame_index: usize,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels x (n_fft/2 + 1)`, peak 1.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f32> {
    let n_fft = cfg.window;
    let n_bins = n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / n_fft as f64;
    let mut fb = Array2::<f32>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, b]] = w as f32;
        }
    }
    fb
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Index into `0..len` under repeated mirror reflection (edge sample not repeated).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

pub fn reflect_pad(samples: &[f32], pad: usize) -> Vec<f32> {
    let n = samples.len();
    (0..n + 2 * pad)
        .map(|j| samples[reflect_index(j as isize - pad as isize, n)])
        .collect()
}

/// Short-time power spectra of the reflection-padded signal, one row per step.
fn power_frames(samples: &[f32], cfg: &MelConfig, fft: &Arc<dyn Fft<f64>>) -> Array2<f64> {
    let padded = reflect_pad(samples, cfg.window / 2);
    let n_steps = (padded.len() - cfg.window) / cfg.hop + 1;
    let n_bins = cfg.window / 2 + 1;
    let window = hann_window(cfg.window);
    let mut out = Array2::<f64>::zeros((n_steps, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
    for step in 0..n_steps {
        let start = step * cfg.hop;
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(padded[start + k] as f64 * window[k], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..n_bins {
            out[[step, b]] = buf[b].norm_sqr();
        }
    }
    out
}

pub fn compute_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.window);
    let power = power_frames(clip.samples(), cfg, &fft);
    let fb = mel_filterbank(cfg).mapv(|v| v as f64);
    let mel = power.dot(&fb.t());
    let floor = cfg.log_floor;
    let values = mel.mapv(|e| e.max(floor).ln() as f32);
    Ok(MelSpectrogram {
        values,
        hop_seconds: cfg.hop_seconds(),
    })
}

/// Spectrogram step closest to the timestamp of `frame_index`.
pub fn frame_center_step(frame_index: usize, fps: u32, hop_seconds: f64) -> usize {
    let t = frame_index as f64 / fps as f64;
    (t / hop_seconds).round() as usize
}

/// The 16 steps `center-8 .. center+7`, edge-replicated outside the spectrogram.
pub fn chunk_for_frame(mel: &MelSpectrogram, frame_index: usize, fps: u32) -> MelChunk {
    let center = frame_center_step(frame_index, fps, mel.hop_seconds) as isize;
    let last = mel.num_steps() as isize - 1;
    let n_mels = mel.values.ncols();
    let mut values = Array2::<f32>::zeros((CHUNK_STEPS, n_mels));
    for r in 0..CHUNK_STEPS {
        let src = (center - (CHUNK_STEPS as isize / 2) + r as isize).clamp(0, last) as usize;
        values.row_mut(r).assign(&mel.values.row(src));
    }
    MelChunk {
        values,
        frame_index,
    }
}

/// How far (in seconds) the chunk for `frame_index` reaches past the end of the audio.
pub fn chunk_overrun_secs(mel: &MelSpectrogram, frame_index: usize, fps: u32) -> f64 {
    let center = frame_center_step(frame_index, fps, mel.hop_seconds) as isize;
    let needed_last = center + CHUNK_STEPS as isize / 2 - 1;
    let have_last = mel.num_steps() as isize - 1;
    (needed_last - have_last).max(0) as f64 * mel.hop_seconds
}

impl MelChunk {
    pub fn rows(&self, range: std::ops::Range<usize>) -> Array2<f32> {
        self.values.slice(s![range, ..]).to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, amp: f32) -> AudioClip {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| {
                amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()
                    as f32
            })
            .collect();
        AudioClip::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_81_steps() {
        // padded length 16000 + 2*400 = 16800; (16800 - 800)/200 + 1 = 81
        let clip = sine(440.0, 1.0, 0.5);
        let mel = compute_mel(&clip, &MelConfig::default()).unwrap();
        assert_eq!(mel.num_steps(), 81);
        assert_eq!(mel.values.ncols(), 80);
    }

    #[test]
    fn silence_hits_the_floor() {
        let clip = AudioClip::new(vec![0.0; 4000], SAMPLE_RATE).unwrap();
        let cfg = MelConfig::default();
        let mel = compute_mel(&clip, &cfg).unwrap();
        let floor = (cfg.log_floor).ln() as f32;
        assert!(mel.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn rejects_bad_clips() {
        assert!(AudioClip::new(vec![], SAMPLE_RATE).is_err());
        let err = AudioClip::new(vec![0.0; 10], 44_100).unwrap_err();
        assert!(err.to_string().contains("44100"));
        assert!(AudioClip::new(vec![f32::NAN], SAMPLE_RATE).is_err());
    }

    #[test]
    fn every_filter_has_support() {
        let fb = mel_filterbank(&MelConfig::default());
        for (m, row) in fb.rows().into_iter().enumerate() {
            assert!(row.sum() > 0.0, "filter {m} is empty");
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        assert_eq!(reflect_pad(&[1.0, 2.0, 3.0], 2), vec![3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        // longer than the signal: keeps folding
        assert_eq!(reflect_pad(&[1.0, 2.0], 3), vec![2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0]);
        assert_eq!(reflect_pad(&[5.0], 2), vec![5.0; 5]);
    }

    /// O(n^2) DFT used as an independent spectrum.
    fn naive_power(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn tone_peaks_in_its_mel_bin() {
        let cfg = MelConfig::default();
        let clip = sine(440.0, 1.0, 0.5);
        // Oracle: brute-force DFT of one interior window through the filterbank.
        let window = hann_window(cfg.window);
        let frame: Vec<f64> = (0..cfg.window)
            .map(|k| clip.samples()[4000 + k] as f64 * window[k])
            .collect();
        let power = naive_power(&frame);
        let fb = mel_filterbank(&cfg);
        let energies: Vec<f64> = fb
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&power).map(|(&w, &p)| w as f64 * p).sum())
            .collect();
        let oracle_bin = energies
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // The oracle bin is the triangle with the largest response at 440 Hz.
        let bin_440 = (440.0 / (SAMPLE_RATE as f64 / cfg.window as f64)) as usize;
        let best_at_440 = (0..cfg.n_mels)
            .max_by(|&a, &b| fb[[a, bin_440]].partial_cmp(&fb[[b, bin_440]]).unwrap())
            .unwrap();
        assert_eq!(oracle_bin, best_at_440);

        let mel = compute_mel(&clip, &cfg).unwrap();
        let hits = mel
            .values
            .rows()
            .into_iter()
            .filter(|row| {
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                arg == oracle_bin
            })
            .count();
        assert!(hits as f64 >= 0.95 * mel.num_steps() as f64, "{hits}/{}", mel.num_steps());
    }

    #[test]
    fn amplitude_scaling_shifts_log_mel() {
        let cfg = MelConfig::default();
        let a = compute_mel(&sine(300.0, 0.5, 0.1), &cfg).unwrap();
        let b = compute_mel(&sine(300.0, 0.5, 0.3), &cfg).unwrap();
        let shift = (9.0f64).ln() as f32;
        let floor = cfg.log_floor.ln() as f32;
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            if *x > floor + 1.0 && *y > floor + 1.0 {
                assert!((y - x - shift).abs() < 1e-4, "{x} {y}");
            }
        }
    }

    #[test]
    fn compute_mel_is_deterministic() {
        let clip = sine(523.0, 0.3, 0.2);
        let a = compute_mel(&clip, &MelConfig::default()).unwrap();
        let b = compute_mel(&clip, &MelConfig::default()).unwrap();
        assert_eq!(a.values, b.values);
    }

    fn ramp_mel(steps: usize) -> MelSpectrogram {
        let values = Array2::from_shape_fn((steps, 80), |(r, c)| (r * 1000 + c) as f32);
        MelSpectrogram {
            values,
            hop_seconds: 200.0 / 16000.0,
        }
    }

    #[test]
    fn first_frame_replicates_left_edge() {
        let mel = ramp_mel(81);
        let chunk = chunk_for_frame(&mel, 0, 25);
        assert_eq!(chunk.values.dim(), (16, 80));
        for r in 0..8 {
            assert_eq!(chunk.values.row(r), mel.values.row(0));
        }
        for r in 8..16 {
            assert_eq!(chunk.values.row(r), mel.values.row(r - 8));
        }
    }

    #[test]
    fn center_frame_reads_centered_rows() {
        // 50 fps: frame 25 sits at t = 0.5 s, exactly step 40 of 81.
        let mel = ramp_mel(81);
        let chunk = chunk_for_frame(&mel, 25, 50);
        for r in 0..16 {
            assert_eq!(chunk.values.row(r), mel.values.row(32 + r));
        }
    }

    #[test]
    fn adjacent_frames_overlap_by_thirteen_rows() {
        let mel = ramp_mel(400);
        let first_row = |f: usize| chunk_for_frame(&mel, f, 25).values[[0, 0]] as usize / 1000;
        let mut thirteen = 0;
        for f in 3..90 {
            let overlap = 16 - (first_row(f + 1) - first_row(f));
            assert!(overlap == 12 || overlap == 13, "frame {f}: {overlap}");
            thirteen += usize::from(overlap == 13);
        }
        assert!(thirteen > 87 / 2);
    }

    #[test]
    fn chunks_never_leave_the_spectrogram() {
        let mel = ramp_mel(5);
        for f in [0usize, 1, 7, 1000] {
            let chunk = chunk_for_frame(&mel, f, 25);
            assert_eq!(chunk.values.dim(), (16, 80));
        }
    }
}
