//! Deterministic synthetic audio-visual corpus.
//!
//! Each utterance pairs a 16 kHz waveform, 50 Hz analysis frames, a
//! transcript, and 25 fps lip/face features with exact alignment. Frames
//! carry a phoneme-identity code sub-vector so an oracle transcriber exists
//! without any learned recognizer, and the lip stream carries an aperture
//! channel tied to the frame energy envelope plus a viseme code usable by an
//! oracle video-to-text provider.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::container::{read_container, write_container, ArrayData};
use crate::error::{Error, Result};
use crate::frontend::{g2p, Lexicon, PhonemeVocab, SEP_ID};
use crate::metrics::Waveform;
use crate::visual::FeatureStreams;

pub const SAMPLE_RATE_HZ: u32 = 16000;
/// Samples per 50 Hz codec frame.
pub const FRAME_HOP: usize = 320;

pub const FRAME_SPECTRAL_DIMS: usize = 12;
pub const FRAME_F0_CHANNEL: usize = 12;
pub const FRAME_VOICING_CHANNEL: usize = 13;
pub const FRAME_CODE_OFFSET: usize = 14;
pub const FRAME_CODE_DIMS: usize = 12;
pub const FRAME_DIM: usize = 26;

pub const LIP_DIM: usize = 24;
pub const LIP_VISEME_OFFSET: usize = 1;
pub const FACE_DIM: usize = 8;

/// Amplitude of the phoneme code planted in frames.
pub const CODE_AMP: f64 = 2.0;
/// Amplitude of the viseme code planted in lip features.
pub const VISEME_AMP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emotion {
    Neutral,
    Happy,
    Sad,
    Angry,
}

pub const EMOTIONS: [Emotion; 4] = [
    Emotion::Neutral,
    Emotion::Happy,
    Emotion::Sad,
    Emotion::Angry,
];

impl Emotion {
    pub fn index(&self) -> usize {
        EMOTIONS.iter().position(|e| e == self).unwrap()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Angry => "angry",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Voicing {
    Voiced,
    Unvoiced,
    Silence,
}

fn voicing_of(symbol: &str) -> Voicing {
    const VOICED: [&str; 30] = [
        "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
        "B", "D", "DH", "G", "JH", "L", "M", "N", "NG", "R", "V", "W", "Y", "Z", "ZH",
    ];
    const UNVOICED: [&str; 9] = ["CH", "F", "HH", "K", "P", "S", "SH", "T", "TH"];
    if VOICED.contains(&symbol) {
        Voicing::Voiced
    } else if UNVOICED.contains(&symbol) || symbol == "<unk>" {
        Voicing::Unvoiced
    } else {
        Voicing::Silence
    }
}

/// Deterministic unit code vector for a phoneme id.
pub fn phone_code(id: u32) -> [f64; FRAME_CODE_DIMS] {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE_0000_u64 + id as u64);
    let mut v = [0.0f64; FRAME_CODE_DIMS];
    let mut norm = 0.0;
    for x in v.iter_mut() {
        *x = crate::nn::standard_normal(&mut rng);
        norm += *x * *x;
    }
    let norm = norm.sqrt().max(1e-9);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Deterministic spectral band weights for a phoneme id.
fn band_profile(id: u32) -> [f64; FRAME_SPECTRAL_DIMS] {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBA7D_0000_u64 + id as u64);
    let mut v = [0.0f64; FRAME_SPECTRAL_DIMS];
    for x in v.iter_mut() {
        *x = rng.random_range(0.2..1.0);
    }
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceSpec {
    pub speaker_id: String,
    pub transcript: String,
    pub phonemes: Vec<u32>,
    /// Per-phoneme duration in 50 Hz frames, each at least 2.
    pub durations: Vec<u32>,
    pub f0_base_hz: f64,
    pub emotion: Emotion,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub split: Split,
    pub transcript: String,
    pub emotion: Emotion,
    pub waveform: Waveform,
    pub frames: Array2<f64>,
    pub features: FeatureStreams,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn duration_s(&self) -> f64 {
        self.num_frames() as f64 / 50.0
    }
}

const FFT_SIZE: usize = 512;
const MAX_HARMONIC_HZ: f64 = 7600.0;
const BAND_SCALE: f64 = 0.4;

fn spectral_bands(frame: &[f64], fft: &std::sync::Arc<dyn rustfft::Fft<f64>>) -> [f64; FRAME_SPECTRAL_DIMS] {
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    // Hann window keeps band magnitudes nearly phase-invariant, so the
    // envelope is flat across a steady phoneme.
    let n = frame.len();
    for (i, &v) in frame.iter().enumerate() {
        let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
        buf[i] = Complex::new(v * w, 0.0);
    }
    fft.process(&mut buf);
    let bins = FFT_SIZE / 2; // skip DC, use bins 1..=256
    let per_band = bins / FRAME_SPECTRAL_DIMS;
    let mut out = [0.0f64; FRAME_SPECTRAL_DIMS];
    for (b, out_v) in out.iter_mut().enumerate() {
        let lo = 1 + b * per_band;
        let hi = if b == FRAME_SPECTRAL_DIMS - 1 {
            bins + 1
        } else {
            1 + (b + 1) * per_band
        };
        let mean: f64 =
            buf[lo..hi].iter().map(|c| c.norm()).sum::<f64>() / (hi - lo) as f64;
        *out_v = (1.0 + BAND_SCALE * mean).ln();
    }
    out
}

fn band_of_freq(freq: f64) -> usize {
    // Bands cover bins 1..=256 of a 512-point FFT at 16 kHz.
    let bin = freq / SAMPLE_RATE_HZ as f64 * FFT_SIZE as f64;
    let per_band = (FFT_SIZE / 2) / FRAME_SPECTRAL_DIMS;
    (((bin - 1.0) / per_band as f64).floor() as usize).min(FRAME_SPECTRAL_DIMS - 1)
}

/// Emotion-dependent multiplicative f0 contour.
fn f0_modulation(emotion: Emotion, frame: usize, total: usize, rng_jitter: &[f64]) -> f64 {
    let t_sec = frame as f64 / 50.0;
    match emotion {
        Emotion::Neutral => 1.0 + 0.01 * (2.0 * std::f64::consts::PI * 0.5 * t_sec).sin(),
        Emotion::Happy => 1.0 + 0.04 * (2.0 * std::f64::consts::PI * 5.5 * t_sec).sin(),
        Emotion::Sad => 1.0 - 0.10 * frame as f64 / total.max(1) as f64,
        Emotion::Angry => 1.0 + 0.05 * rng_jitter[frame],
    }
}

/// Generate the paired waveform, frames, and features for a spec.
pub fn make_utterance(spec: &UtteranceSpec, vocab: &PhonemeVocab) -> Result<Utterance> {
    if spec.phonemes.len() != spec.durations.len() {
        return Err(Error::validation("phonemes/durations length mismatch"));
    }
    if spec.phonemes.is_empty() {
        return Err(Error::validation("empty phoneme sequence"));
    }
    if spec.durations.iter().any(|&d| d < 2) {
        return Err(Error::validation("phoneme durations must be at least 2 frames"));
    }
    if !(80.0..=300.0).contains(&spec.f0_base_hz) {
        return Err(Error::validation("f0 base must be in [80, 300] Hz"));
    }
    let total_frames: usize = spec.durations.iter().map(|&d| d as usize).sum();
    if total_frames % 2 != 0 {
        return Err(Error::validation(
            "total frame count must be even (25 fps video alignment)",
        ));
    }
    for &p in &spec.phonemes {
        if vocab.symbol(p).is_none() {
            return Err(Error::validation(format!("phoneme id {p} not in vocab")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Per-phoneme-instance amplitude, constant within the phoneme.
    let amps: Vec<f64> = spec
        .phonemes
        .iter()
        .map(|&p| match voicing_of(vocab.symbol(p).unwrap()) {
            Voicing::Voiced => rng.random_range(0.22..0.44),
            Voicing::Unvoiced => rng.random_range(0.08..0.16),
            Voicing::Silence => 0.0,
        })
        .collect();
    // Smoothed jitter track for the angry contour.
    let raw_jitter: Vec<f64> = (0..total_frames)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let jitter: Vec<f64> = (0..total_frames)
        .map(|t| {
            let lo = t.saturating_sub(1);
            let hi = (t + 2).min(total_frames);
            raw_jitter[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();

    // Per-frame phoneme index.
    let mut frame_phone = Vec::with_capacity(total_frames);
    for (i, &d) in spec.durations.iter().enumerate() {
        for _ in 0..d {
            frame_phone.push(i);
        }
    }

    // Waveform synthesis with per-harmonic phase continuity. Schroeder-style
    // initial phases keep the crest factor low enough for 16-bit storage.
    let mut samples = vec![0.0f64; total_frames * FRAME_HOP];
    let mut phases = [0.0f64; 24];
    for (h, p) in phases.iter_mut().enumerate() {
        *p = std::f64::consts::PI * (h * (h + 1)) as f64 / phases.len() as f64;
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x015E));
    for t in 0..total_frames {
        let pi_idx = frame_phone[t];
        let phone = spec.phonemes[pi_idx];
        let symbol = vocab.symbol(phone).unwrap();
        let amp = amps[pi_idx];
        let f0 = spec.f0_base_hz * f0_modulation(spec.emotion, t, total_frames, &jitter);
        let profile = band_profile(phone);
        match voicing_of(symbol) {
            Voicing::Voiced => {
                let n_harm = ((MAX_HARMONIC_HZ / f0).floor() as usize).clamp(1, phases.len());
                let norm = amp / (n_harm as f64).sqrt();
                for i in 0..FRAME_HOP {
                    let mut v = 0.0;
                    for (h, phase) in phases.iter_mut().enumerate().take(n_harm) {
                        let freq = (h + 1) as f64 * f0;
                        *phase += 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE_HZ as f64;
                        v += norm * profile[band_of_freq(freq)] * phase.sin();
                    }
                    samples[t * FRAME_HOP + i] = v;
                }
            }
            Voicing::Unvoiced => {
                for i in 0..FRAME_HOP {
                    let shaped: f64 = noise_rng.random_range(-1.0..1.0);
                    samples[t * FRAME_HOP + i] = amp * shaped;
                }
            }
            Voicing::Silence => {}
        }
    }

    // Keep clear of 16-bit clipping.
    let peak = samples.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if peak > 0.95 {
        let scale = 0.95 / peak;
        for v in samples.iter_mut() {
            *v *= scale;
        }
    }

    // Frames: spectral bands + f0/voicing channels + phoneme code.
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let mut frames = Array2::<f64>::zeros((total_frames, FRAME_DIM));
    for t in 0..total_frames {
        let seg = &samples[t * FRAME_HOP..(t + 1) * FRAME_HOP];
        let bands = spectral_bands(seg, &fft);
        for (b, &v) in bands.iter().enumerate() {
            frames[[t, b]] = v;
        }
        let pi_idx = frame_phone[t];
        let phone = spec.phonemes[pi_idx];
        let symbol = vocab.symbol(phone).unwrap();
        let voiced = voicing_of(symbol) == Voicing::Voiced;
        let f0 = spec.f0_base_hz * f0_modulation(spec.emotion, t, total_frames, &jitter);
        frames[[t, FRAME_F0_CHANNEL]] = if voiced { f0 / 400.0 } else { 0.0 };
        frames[[t, FRAME_VOICING_CHANNEL]] = if voiced { 1.0 } else { 0.0 };
        let code = phone_code(phone);
        for (c, &v) in code.iter().enumerate() {
            frames[[t, FRAME_CODE_OFFSET + c]] = v * CODE_AMP;
        }
    }

    // Features at 25 fps.
    let m_frames = total_frames / 2;
    let env: Vec<f64> = (0..total_frames)
        .map(|t| {
            (0..FRAME_SPECTRAL_DIMS).map(|b| frames[[t, b]]).sum::<f64>()
                / FRAME_SPECTRAL_DIMS as f64
        })
        .collect();
    let mut feat_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0xFEA7));
    let mut lip = Array2::<f64>::zeros((m_frames, LIP_DIM));
    let mut face = Array2::<f64>::zeros((m_frames, FACE_DIM));
    for m in 0..m_frames {
        lip[[m, 0]] = 0.5 * (env[2 * m] + env[2 * m + 1]);
        let phone = spec.phonemes[frame_phone[2 * m]];
        let code = phone_code(phone);
        for (c, &v) in code.iter().enumerate() {
            lip[[m, LIP_VISEME_OFFSET + c]] = v * VISEME_AMP;
        }
        for c in LIP_VISEME_OFFSET + FRAME_CODE_DIMS..LIP_DIM {
            lip[[m, c]] = 0.05 * crate::nn::standard_normal(&mut feat_rng);
        }
        face[[m, spec.emotion.index()]] = 1.0;
        for c in 4..FACE_DIM {
            face[[m, c]] = 0.1 * crate::nn::standard_normal(&mut feat_rng);
        }
    }

    Ok(Utterance {
        id: String::new(),
        speaker_id: spec.speaker_id.clone(),
        split: Split::Train,
        transcript: spec.transcript.clone(),
        emotion: spec.emotion,
        waveform: Waveform::new(samples)?,
        frames,
        features: FeatureStreams::new(lip, face)?,
    })
}

/// Rough inverse of the frame analysis: re-synthesize a waveform from frames.
/// Harmonic amplitudes come from the stored band magnitudes and the f0 track;
/// unvoiced frames become shaped noise.
pub fn frames_to_waveform(frames: ArrayView2<f64>, seed: u64) -> Result<Waveform> {
    if frames.ncols() < FRAME_CODE_OFFSET {
        return Err(Error::validation("frames too narrow for synthesis"));
    }
    let total = frames.nrows();
    let mut samples = vec![0.0f64; total * FRAME_HOP];
    let mut phases = [0.0f64; 24];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..total {
        let f0 = frames[[t, FRAME_F0_CHANNEL]] * 400.0;
        let voiced = frames[[t, FRAME_VOICING_CHANNEL]] > 0.5 && f0 > 60.0;
        let mags: Vec<f64> = (0..FRAME_SPECTRAL_DIMS)
            .map(|b| (frames[[t, b]].max(0.0).exp() - 1.0).max(0.0) / BAND_SCALE / FRAME_HOP as f64 * 8.0)
            .collect();
        let mean_mag = mags.iter().sum::<f64>() / mags.len() as f64;
        if voiced {
            let n_harm = ((MAX_HARMONIC_HZ / f0).floor() as usize).clamp(1, phases.len());
            for i in 0..FRAME_HOP {
                let mut v = 0.0;
                for (h, phase) in phases.iter_mut().enumerate().take(n_harm) {
                    let freq = (h + 1) as f64 * f0;
                    *phase += 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE_HZ as f64;
                    v += mags[band_of_freq(freq)] / (n_harm as f64).sqrt() * phase.sin() * 2.0;
                }
                samples[t * FRAME_HOP + i] = v;
            }
        } else if mean_mag > 0.003 {
            for i in 0..FRAME_HOP {
                samples[t * FRAME_HOP + i] = 2.0 * mean_mag * rng.random_range(-1.0..1.0);
            }
        }
    }
    Waveform::new(samples)
}

/// Decode the phoneme-code sub-vector of each frame, collapse runs, and
/// invert the lexicon. Words whose phone group cannot be inverted come back
/// as `<unk>`.
pub fn oracle_transcribe(
    frames: ArrayView2<f64>,
    lexicon: &Lexicon,
    vocab: &PhonemeVocab,
) -> Result<String> {
    if frames.ncols() < FRAME_CODE_OFFSET + FRAME_CODE_DIMS {
        return Err(Error::validation("frames have no code channels"));
    }
    let ids: Vec<Option<u32>> = (0..frames.nrows())
        .map(|t| {
            let code: Vec<f64> = (0..FRAME_CODE_DIMS)
                .map(|c| frames[[t, FRAME_CODE_OFFSET + c]])
                .collect();
            decode_code(&code, CODE_AMP, vocab)
        })
        .collect();
    Ok(ids_to_words(&ids, lexicon, vocab))
}

/// Oracle video-to-text provider: reads the viseme code planted in the lip
/// features (no audio involved).
pub fn oracle_lip_transcribe(
    features: &FeatureStreams,
    lexicon: &Lexicon,
    vocab: &PhonemeVocab,
) -> Result<String> {
    if features.lip.ncols() < LIP_VISEME_OFFSET + FRAME_CODE_DIMS {
        return Err(Error::validation("lip features have no viseme channels"));
    }
    let ids: Vec<Option<u32>> = (0..features.num_frames())
        .map(|m| {
            let code: Vec<f64> = (0..FRAME_CODE_DIMS)
                .map(|c| features.lip[[m, LIP_VISEME_OFFSET + c]])
                .collect();
            decode_code(&code, VISEME_AMP, vocab)
        })
        .collect();
    Ok(ids_to_words(&ids, lexicon, vocab))
}

/// Nearest phoneme code, or None for silence/garbage vectors.
fn decode_code(code: &[f64], amp: f64, vocab: &PhonemeVocab) -> Option<u32> {
    let norm = code.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 0.5 * amp {
        return None;
    }
    let mut best: Option<(u32, f64)> = None;
    for id in 2..vocab.len() as u32 {
        let c = phone_code(id);
        let d: f64 = code
            .iter()
            .zip(c.iter())
            .map(|(x, y)| (x - y * amp) * (x - y * amp))
            .sum();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((id, d));
        }
    }
    let (id, d) = best?;
    if d.sqrt() > 0.6 * amp {
        return None;
    }
    Some(id)
}

fn ids_to_words(ids: &[Option<u32>], lexicon: &Lexicon, vocab: &PhonemeVocab) -> String {
    // Collapse runs.
    let mut seq: Vec<u32> = Vec::new();
    for id in ids.iter().copied().map(|i| i.unwrap_or(SEP_ID)) {
        if seq.last() != Some(&id) {
            seq.push(id);
        }
    }
    let inverse = lexicon.inverse();
    let mut words = Vec::new();
    for group in seq.split(|&id| id == SEP_ID) {
        if group.is_empty() {
            continue;
        }
        let phones: Vec<String> = group
            .iter()
            .filter_map(|&id| vocab.symbol(id).map(|s| s.to_string()))
            .collect();
        match inverse.get(&phones) {
            Some(word) => words.push(word.clone()),
            None => words.push("<unk>".to_string()),
        }
    }
    words.join(" ")
}

/// Long-term average spectrum speaker embedding and mean-face emotion
/// embedding for an utterance.
pub fn toy_embedders(utt: &Utterance) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        speaker_embedding(&utt.waveform)?,
        emotion_embedding(&utt.features),
    ))
}

pub fn speaker_embedding(wave: &Waveform) -> Result<Vec<f64>> {
    const WIN: usize = 1024;
    const HOP: usize = 512;
    let x = wave.samples();
    if x.len() < WIN {
        return Err(Error::validation("waveform too short for an embedding"));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(WIN);
    let frames = (x.len() - WIN) / HOP + 1;
    let bins = WIN / 2;
    let mut acc = vec![0.0f64; bins];
    let window: Vec<f64> = (0..WIN)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / WIN as f64).cos())
        .collect();
    let mut buf = vec![Complex::new(0.0, 0.0); WIN];
    for f in 0..frames {
        for i in 0..WIN {
            buf[i] = Complex::new(x[f * HOP + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (b, a) in acc.iter_mut().enumerate() {
            *a += buf[b].norm();
        }
    }
    let mut emb: Vec<f64> = acc
        .iter()
        .map(|&v| (1.0 + v / frames as f64).ln())
        .collect();
    let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in emb.iter_mut() {
        *v /= norm;
    }
    Ok(emb)
}

pub fn emotion_embedding(features: &FeatureStreams) -> Vec<f64> {
    let m = features.num_frames() as f64;
    let mut emb: Vec<f64> = (0..features.face.ncols())
        .map(|c| features.face.column(c).sum() / m)
        .collect();
    let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in emb.iter_mut() {
        *v /= norm;
    }
    emb
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusGenConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub seed: u64,
    /// Fraction of non-anchor utterances assigned to the test split.
    pub test_fraction: f64,
    /// Target utterance length range in 50 Hz frames (2-6 s by default).
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for CorpusGenConfig {
    fn default() -> Self {
        CorpusGenConfig {
            num_speakers: 10,
            utterances_per_speaker: 5,
            seed: 0,
            test_fraction: 0.2,
            min_frames: 100,
            max_frames: 300,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn train(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(|u| u.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(|u| u.split == Split::Test)
    }

    pub fn by_id(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Train-split utterances of a speaker, excluding `except`.
    pub fn prompt_candidates(&self, speaker_id: &str, except: &str) -> Vec<&Utterance> {
        self.train()
            .filter(|u| u.speaker_id == speaker_id && u.id != except)
            .collect()
    }
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0x85EB_CA6B))
        .wrapping_add(b.wrapping_mul(0xC2B2_AE35))
}

/// Generate specs with speaker-consistent f0, durations in the configured
/// range, and a train/test split where every test speaker keeps at least one
/// train utterance.
pub fn make_corpus(
    cfg: &CorpusGenConfig,
    lexicon: &Lexicon,
    vocab: &PhonemeVocab,
) -> Result<Corpus> {
    if lexicon.is_empty() {
        return Err(Error::validation("lexicon must be non-empty"));
    }
    let words = lexicon.invertible_words();
    let mut utterances = Vec::new();
    for s in 0..cfg.num_speakers {
        let mut spk_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, s as u64, 0));
        let spread = 295.0 - 85.0;
        let f0_base = (85.0 + spread * (s as f64 + 0.5) / cfg.num_speakers as f64
            + spk_rng.random_range(-3.0..3.0))
        .clamp(80.0, 300.0);
        let speaker_id = format!("spk{s:03}");
        for u in 0..cfg.utterances_per_speaker {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, s as u64, 1 + u as u64));
            let target = rng.random_range(cfg.min_frames..=cfg.max_frames);
            let mut phonemes: Vec<u32> = vec![SEP_ID];
            let mut durations: Vec<u32> = vec![rng.random_range(2..=5)];
            let mut transcript_words: Vec<String> = Vec::new();
            let mut total: usize = durations[0] as usize;
            loop {
                // Sample the next word segment (phones plus a trailing gap).
                let word = &words[rng.random_range(0..words.len())];
                let phones = lexicon.lookup(word).expect("invertible word in lexicon");
                let mut seg_p: Vec<u32> = Vec::with_capacity(phones.len() + 1);
                let mut seg_d: Vec<u32> = Vec::with_capacity(phones.len() + 1);
                for p in phones {
                    seg_p.push(vocab.id(p).expect("lexicon phones in vocab"));
                    seg_d.push(if voicing_of(p) == Voicing::Voiced {
                        rng.random_range(4..=11)
                    } else {
                        rng.random_range(2..=6)
                    });
                }
                seg_p.push(SEP_ID);
                seg_d.push(rng.random_range(2..=7));
                let seg_frames: usize = seg_d.iter().map(|&d| d as usize).sum();
                if !transcript_words.is_empty() && total + seg_frames > cfg.max_frames {
                    break;
                }
                phonemes.extend(seg_p);
                durations.extend(seg_d);
                total += seg_frames;
                transcript_words.push(word.clone());
                if total >= target {
                    break;
                }
            }
            if total % 2 != 0 {
                *durations.last_mut().unwrap() += 1;
            }
            let emotion = EMOTIONS[rng.random_range(0..EMOTIONS.len())];
            let spec = UtteranceSpec {
                speaker_id: speaker_id.clone(),
                transcript: transcript_words.join(" "),
                phonemes,
                durations,
                f0_base_hz: f0_base,
                emotion,
                seed: derive_seed(cfg.seed, 7777 + s as u64, u as u64),
            };
            let mut utt = make_utterance(&spec, vocab)?;
            utt.id = format!("{speaker_id}_utt{u:03}");
            // The first utterance anchors the speaker in the train split so a
            // source prompt always exists.
            utt.split = if u > 0 && rng.random_range(0.0..1.0) < cfg.test_fraction {
                Split::Test
            } else {
                Split::Train
            };
            utterances.push(utt);
        }
    }
    Ok(Corpus { utterances })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub speaker_id: String,
    pub split: Split,
    pub transcript: String,
    pub duration_s: f64,
    pub emotion: Emotion,
    pub wav: String,
    pub frames: String,
    pub features: String,
}

/// Write waveforms, frame/feature containers, and a JSONL manifest.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir.join("wav"))?;
    std::fs::create_dir_all(dir.join("frames"))?;
    std::fs::create_dir_all(dir.join("features"))?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
    for utt in &corpus.utterances {
        let rec = ManifestRecord {
            id: utt.id.clone(),
            speaker_id: utt.speaker_id.clone(),
            split: utt.split,
            transcript: utt.transcript.clone(),
            duration_s: utt.duration_s(),
            emotion: utt.emotion,
            wav: format!("wav/{}.wav", utt.id),
            frames: format!("frames/{}.nac", utt.id),
            features: format!("features/{}.nac", utt.id),
        };
        write_wav(&dir.join(&rec.wav), &utt.waveform)?;
        write_container(
            &dir.join(&rec.frames),
            &serde_json::json!({"format": "frames", "id": utt.id}),
            &[(
                "frames".to_string(),
                ArrayData::F64(utt.frames.clone().into_dyn()),
            )],
        )?;
        write_container(
            &dir.join(&rec.features),
            &serde_json::json!({"format": "features", "id": utt.id}),
            &[
                (
                    "lip".to_string(),
                    ArrayData::F64(utt.features.lip.clone().into_dyn()),
                ),
                (
                    "face".to_string(),
                    ArrayData::F64(utt.features.face.clone().into_dyn()),
                ),
            ],
        )?;
        let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(manifest, "{line}")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let records = read_manifest(dir)?;
    let mut utterances = Vec::with_capacity(records.len());
    for rec in records {
        let waveform = read_wav(&dir.join(&rec.wav))?;
        let (_, frame_arrays) = read_container(&dir.join(&rec.frames))?;
        let frames = frame_arrays
            .get("frames")
            .ok_or_else(|| Error::Format("missing frames array".into()))?
            .as_f64()?
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Format(e.to_string()))?;
        let (_, feat_arrays) = read_container(&dir.join(&rec.features))?;
        let get2 = |name: &str| -> Result<Array2<f64>> {
            feat_arrays
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing {name} array")))?
                .as_f64()?
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::Format(e.to_string()))
        };
        utterances.push(Utterance {
            id: rec.id,
            speaker_id: rec.speaker_id,
            split: rec.split,
            transcript: rec.transcript,
            emotion: rec.emotion,
            waveform,
            frames,
            features: FeatureStreams::new(get2("lip")?, get2("face")?)?,
        });
    }
    Ok(Corpus { utterances })
}

/// Minimal 16-bit PCM mono WAV writer.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = wave.len() as u32;
    let data_len = n * 2;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&SAMPLE_RATE_HZ.to_le_bytes())?;
    w.write_all(&(SAMPLE_RATE_HZ * 2).to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?;
    w.write_all(&16u16.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in wave.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a WAV file".into()));
    }
    // Walk chunks to find fmt and data.
    let mut pos = 12;
    let mut data: Option<&[u8]> = None;
    let mut sample_rate = 0u32;
    let mut channels = 0u16;
    let mut bits = 0u16;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = &bytes[pos + 8..(pos + 8 + size).min(bytes.len())];
        match id {
            b"fmt " => {
                channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size % 2);
    }
    if channels != 1 || sample_rate != SAMPLE_RATE_HZ || bits != 16 {
        return Err(Error::Format(format!(
            "expected 16 kHz mono PCM16, got {channels}ch {sample_rate}Hz {bits}bit"
        )));
    }
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32767.0)
        .collect();
    Waveform::new(samples)
}

/// Table S1-style statistics over a set of manifest records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub clip_count: usize,
    pub speaker_count: usize,
    pub mean_utterances_per_speaker: f64,
    pub mean_duration_s: f64,
}

pub fn corpus_stats(records: &[ManifestRecord]) -> CorpusStats {
    let mut per_speaker: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *per_speaker.entry(r.speaker_id.as_str()).or_default() += 1;
    }
    let clip_count = records.len();
    let speaker_count = per_speaker.len();
    CorpusStats {
        clip_count,
        speaker_count,
        mean_utterances_per_speaker: if speaker_count == 0 {
            0.0
        } else {
            clip_count as f64 / speaker_count as f64
        },
        mean_duration_s: if clip_count == 0 {
            0.0
        } else {
            records.iter().map(|r| r.duration_s).sum::<f64>() / clip_count as f64
        },
    }
}
