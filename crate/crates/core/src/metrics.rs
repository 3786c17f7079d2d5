//! Objective evaluation metrics: WER, mel-cepstral distortion, F0 and energy
//! distances, cosine similarity, Pearson correlation, and a toy sync-distance
//! between decoded frames and lip features.

use ndarray::{Array2, ArrayView2};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::visual::FeatureStreams;

pub const SAMPLE_RATE_HZ: u32 = 16000;

/// 16 kHz mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("waveform contains non-finite samples"));
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        SAMPLE_RATE_HZ
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE_HZ as f64
    }
}

/// Word-level Levenshtein distance divided by the reference length.
pub fn wer<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::validation("WER reference must be non-empty"));
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = if reference[i - 1].as_ref() == hypothesis[j - 1].as_ref() {
                prev[j - 1]
            } else {
                prev[j - 1] + 1
            };
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m] as f64 / n as f64)
}

pub const STFT_WINDOW: usize = 640;
pub const STFT_HOP: usize = 160;
const FFT_SIZE: usize = 1024;
pub const NUM_MEL_FILTERS: usize = 26;
pub const NUM_MFCC: usize = 13;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude spectrogram with a Hann window of `STFT_WINDOW` samples and a
/// hop of `STFT_HOP`. Rows are frames, columns the FFT_SIZE/2 + 1 bins.
pub fn stft_magnitude(wave: &Waveform) -> Result<Array2<f64>> {
    let x = wave.samples();
    if x.len() < STFT_WINDOW {
        return Err(Error::validation(format!(
            "input shorter than one window ({} < {STFT_WINDOW})",
            x.len()
        )));
    }
    let num_frames = (x.len() - STFT_WINDOW) / STFT_HOP + 1;
    let window = hann(STFT_WINDOW);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let bins = FFT_SIZE / 2 + 1;
    let mut out = Array2::<f64>::zeros((num_frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for f in 0..num_frames {
        let start = f * STFT_HOP;
        for i in 0..FFT_SIZE {
            let v = if i < STFT_WINDOW {
                x[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (b, out_v) in out.row_mut(f).iter_mut().enumerate().take(bins) {
            *out_v = buf[b].norm();
        }
    }
    Ok(out)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// 13-order MFCCs (c1..c13, excluding c0) from a 26-filter mel bank.
pub fn mfcc(wave: &Waveform) -> Result<Array2<f64>> {
    let mag = stft_magnitude(wave)?;
    let bins = mag.ncols();
    let sr = SAMPLE_RATE_HZ as f64;
    let f_max = sr / 2.0;
    let mel_points: Vec<f64> = (0..NUM_MEL_FILTERS + 2)
        .map(|i| mel_to_hz(hz_to_mel(f_max) * i as f64 / (NUM_MEL_FILTERS + 1) as f64))
        .collect();
    let bin_of = |f: f64| f / sr * FFT_SIZE as f64;

    let mut filters = Array2::<f64>::zeros((NUM_MEL_FILTERS, bins));
    for m in 0..NUM_MEL_FILTERS {
        let (lo, center, hi) = (
            bin_of(mel_points[m]),
            bin_of(mel_points[m + 1]),
            bin_of(mel_points[m + 2]),
        );
        for b in 0..bins {
            let fb = b as f64;
            let w = if fb >= lo && fb <= center && center > lo {
                (fb - lo) / (center - lo)
            } else if fb > center && fb <= hi && hi > center {
                (hi - fb) / (hi - center)
            } else {
                0.0
            };
            filters[[m, b]] = w;
        }
    }

    let num_frames = mag.nrows();
    let mut out = Array2::<f64>::zeros((num_frames, NUM_MFCC));
    let scale = (2.0 / NUM_MEL_FILTERS as f64).sqrt();
    for f in 0..num_frames {
        let power: Vec<f64> = mag.row(f).iter().map(|&v| v * v).collect();
        let mut log_e = [0.0f64; NUM_MEL_FILTERS];
        for m in 0..NUM_MEL_FILTERS {
            let e: f64 = (0..bins).map(|b| filters[[m, b]] * power[b]).sum();
            log_e[m] = e.max(1e-10).ln();
        }
        for i in 1..=NUM_MFCC {
            let c: f64 = (0..NUM_MEL_FILTERS)
                .map(|j| {
                    log_e[j]
                        * (std::f64::consts::PI * i as f64 * (j as f64 + 0.5)
                            / NUM_MEL_FILTERS as f64)
                            .cos()
                })
                .sum::<f64>()
                * scale;
            out[[f, i - 1]] = c;
        }
    }
    Ok(out)
}

/// Frame-aligned mel-cepstral distortion over precomputed MFCC matrices.
pub fn mcd_from_mfcc(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::validation("MFCC dimension mismatch"));
    }
    let frames = a.nrows().min(b.nrows());
    if frames == 0 {
        return Err(Error::validation("no frames to compare"));
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let mut total = 0.0;
    for f in 0..frames {
        let sq: f64 = a
            .row(f)
            .iter()
            .zip(b.row(f).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += k * (2.0 * sq).sqrt();
    }
    Ok(total / frames as f64)
}

/// MCD between two waveforms, trimmed to the shorter duration.
pub fn mcd(reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
    let n = reference.len().min(hypothesis.len());
    if n < STFT_WINDOW {
        return Err(Error::validation("input shorter than one analysis frame"));
    }
    let r = Waveform::new(reference.samples()[..n].to_vec())?;
    let h = Waveform::new(hypothesis.samples()[..n].to_vec())?;
    mcd_from_mfcc(mfcc(&r)?.view(), mfcc(&h)?.view())
}

const F0_MIN_HZ: f64 = 80.0;
const F0_MAX_HZ: f64 = 600.0;
const VOICING_THRESHOLD: f64 = 0.5;

/// Per-frame pitch track: `Some(f0)` for voiced frames, `None` otherwise.
/// Autocorrelation restricted to the 80-600 Hz lag range with a normalized
/// peak threshold as the voicing decision.
pub fn f0_track(wave: &Waveform) -> Result<Vec<Option<f64>>> {
    let x = wave.samples();
    if x.len() < STFT_WINDOW {
        return Err(Error::validation("input shorter than one analysis frame"));
    }
    let sr = SAMPLE_RATE_HZ as f64;
    let min_lag = (sr / F0_MAX_HZ).ceil() as usize;
    let max_lag = (sr / F0_MIN_HZ).floor() as usize;
    let num_frames = (x.len() - STFT_WINDOW) / STFT_HOP + 1;
    let mut track = Vec::with_capacity(num_frames);
    let mut r = vec![0.0f64; max_lag + 2];
    for f in 0..num_frames {
        let seg = &x[f * STFT_HOP..f * STFT_HOP + STFT_WINDOW];
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        let seg: Vec<f64> = seg.iter().map(|v| v - mean).collect();
        for (lag, r_v) in r.iter_mut().enumerate().take(max_lag + 2) {
            if lag == 0 || lag + 1 >= seg.len() {
                *r_v = 0.0;
                continue;
            }
            let n = seg.len() - lag;
            let mut dot = 0.0;
            let mut e1 = 0.0;
            let mut e2 = 0.0;
            for i in 0..n {
                dot += seg[i] * seg[i + lag];
                e1 += seg[i] * seg[i];
                e2 += seg[i + lag] * seg[i + lag];
            }
            *r_v = if e1 > 0.0 && e2 > 0.0 {
                dot / (e1 * e2).sqrt()
            } else {
                0.0
            };
        }
        let mut best = f64::NEG_INFINITY;
        for &v in r.iter().take(max_lag + 1).skip(min_lag) {
            if v > best {
                best = v;
            }
        }
        if best < VOICING_THRESHOLD {
            track.push(None);
            continue;
        }
        // Earliest lag within a whisker of the max avoids octave doubling
        // when a multiple of the period scores equally.
        let mut lag = min_lag;
        for l in min_lag..=max_lag {
            if r[l] >= best - 1e-6 {
                lag = l;
                break;
            }
        }
        // Parabolic refinement around the peak.
        let mut lag_f = lag as f64;
        if lag > min_lag && lag < max_lag {
            let denom = r[lag - 1] - 2.0 * r[lag] + r[lag + 1];
            if denom.abs() > 1e-12 {
                let delta = 0.5 * (r[lag - 1] - r[lag + 1]) / denom;
                if delta.abs() <= 0.5 {
                    lag_f += delta;
                }
            }
        }
        track.push(Some(sr / lag_f));
    }
    Ok(track)
}

/// Mean absolute F0 difference over frames voiced in both signals.
pub fn f0_distance(reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
    let min_samples = (SAMPLE_RATE_HZ as f64 * 0.1) as usize;
    if reference.len() < min_samples || hypothesis.len() < min_samples {
        return Err(Error::validation("f0_distance needs at least 100 ms of audio"));
    }
    let n = reference.len().min(hypothesis.len());
    let r = Waveform::new(reference.samples()[..n].to_vec())?;
    let h = Waveform::new(hypothesis.samples()[..n].to_vec())?;
    let tr = f0_track(&r)?;
    let th = f0_track(&h)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in tr.iter().zip(th.iter()) {
        if let (Some(fa), Some(fb)) = (a, b) {
            sum += (fa - fb).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedResult(
            "no mutually voiced frames".to_string(),
        ));
    }
    Ok(sum / count as f64)
}

/// Mean absolute difference of per-frame RMS of the STFT magnitude.
pub fn energy_distance(reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
    let n = reference.len().min(hypothesis.len());
    if n < STFT_WINDOW {
        return Err(Error::validation("input shorter than one analysis window"));
    }
    let r = Waveform::new(reference.samples()[..n].to_vec())?;
    let h = Waveform::new(hypothesis.samples()[..n].to_vec())?;
    let mr = stft_magnitude(&r)?;
    let mh = stft_magnitude(&h)?;
    let rms = |m: &Array2<f64>, f: usize| -> f64 {
        (m.row(f).iter().map(|v| v * v).sum::<f64>() / m.ncols() as f64).sqrt()
    };
    let frames = mr.nrows().min(mh.nrows());
    let total: f64 = (0..frames).map(|f| (rms(&mr, f) - rms(&mh, f)).abs()).sum();
    Ok(total / frames as f64)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation("embedding length mismatch"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::validation("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::validation(
            "pearson needs equal-length sequences of at least 2",
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedResult("constant input to pearson".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// 1 - correlation between the decoded frames' energy envelope (2x
/// downsampled) and the lip aperture channel; 0 on perfect sync, 2 on exact
/// anti-correlation. `energy_dims` designates how many leading frame channels
/// form the energy envelope.
pub fn toy_sync_distance(
    grid_frames: ArrayView2<f64>,
    features: &FeatureStreams,
    energy_dims: usize,
) -> Result<f64> {
    let m = features.num_frames();
    if grid_frames.nrows() != 2 * m {
        return Err(Error::validation(format!(
            "expected {} decoded frames for {m} feature rows, got {}",
            2 * m,
            grid_frames.nrows()
        )));
    }
    if energy_dims == 0 || energy_dims > grid_frames.ncols() {
        return Err(Error::validation("bad energy channel count"));
    }
    let env: Vec<f64> = (0..2 * m)
        .map(|t| {
            grid_frames
                .row(t)
                .iter()
                .take(energy_dims)
                .sum::<f64>()
                / energy_dims as f64
        })
        .collect();
    let env25: Vec<f64> = (0..m).map(|i| 0.5 * (env[2 * i] + env[2 * i + 1])).collect();
    let aperture: Vec<f64> = (0..m).map(|i| features.lip[[i, 0]]).collect();
    let r = pearson(&env25, &aperture).map_err(|e| match e {
        Error::UndefinedResult(_) => {
            Error::UndefinedResult("constant envelope in sync distance".into())
        }
        other => other,
    })?;
    Ok(1.0 - r)
}

/// Deterministic providers plugged into evaluation: a transcriber, a sync
/// scorer, and two embedders.
pub struct ScorerProviders<'a> {
    pub transcriber: Box<dyn Fn(ArrayView2<f64>) -> Result<String> + 'a>,
    pub sync_scorer: Box<dyn Fn(ArrayView2<f64>, &FeatureStreams) -> Result<f64> + 'a>,
    pub speaker_embedder: Box<dyn Fn(&Waveform) -> Result<Vec<f64>> + 'a>,
    pub emotion_embedder: Box<dyn Fn(&FeatureStreams) -> Result<Vec<f64>> + 'a>,
}
