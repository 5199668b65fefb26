//! Dataset manifests, the synthetic expressive-speech corpus and
//! language-balanced sampling.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One line of a JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub audio_path: PathBuf,
    pub language_id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            entries.push(entry);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { root, entries };
        m.check_unique_ids()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn audio_path(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.audio_path.is_absolute() {
            entry.audio_path.clone()
        } else {
            self.root.join(&entry.audio_path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utterance_id {:?}", e.utterance_id)));
            }
        }
        Ok(())
    }

    /// Checks every entry against the corpus config; returns one message per problem.
    pub fn validate(&self, cfg: &CorpusConfig) -> Vec<String> {
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.utterance_id.as_str()) {
                problems.push(format!("{}: duplicate utterance_id", e.utterance_id));
            }
            if !cfg.languages.iter().any(|l| l == &e.language_id) {
                problems.push(format!("{}: language {:?} not in configured set", e.utterance_id, e.language_id));
            }
            let path = self.audio_path(e);
            match hound::WavReader::open(&path) {
                Ok(r) => {
                    let spec = r.spec();
                    let secs = r.duration() as f64 / spec.sample_rate as f64;
                    if e.split == Split::Train && secs < cfg.min_train_duration_s {
                        problems.push(format!(
                            "{}: duration {secs:.3} s below minimum {:.3} s",
                            e.utterance_id, cfg.min_train_duration_s
                        ));
                    }
                    if spec.channels != 1 {
                        problems.push(format!("{}: expected mono audio, found {} channels", e.utterance_id, spec.channels));
                    }
                }
                Err(err) => problems.push(format!("{}: cannot read {}: {err}", e.utterance_id, path.display())),
            }
        }
        problems
    }
}

/// Parameters of one synthetic utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUtteranceSpec {
    pub fundamental_hz: f64,
    /// (center Hz, bandwidth Hz) scaling of the vowel formants for this speaker.
    pub formant_profile: Vec<(f64, f64)>,
    pub noise_floor_db: f64,
    pub duration_s: f64,
    pub style_label: String,
    pub speaker_label: String,
}

/// Prosodic character of a style, applied on top of the speaker's voice.
#[derive(Debug, Clone, Copy)]
struct StyleShape {
    /// Relative pitch excursion of the intonation contour.
    contour_depth: f64,
    /// Intonation cycles per second.
    contour_rate: f64,
    /// Pitch shift relative to the speaker's base (multiplicative).
    pitch_shift: f64,
    /// Amplitude modulation depth and rate.
    am_depth: f64,
    am_rate: f64,
    /// Harmonic roll-off exponent: larger is darker.
    tilt: f64,
    /// Mean segment duration in seconds.
    segment_s: f64,
    gain: f64,
}

const STYLES: [StyleShape; 4] = [
    // calm: flat, steady, dark
    StyleShape {
        contour_depth: 0.04,
        contour_rate: 0.6,
        pitch_shift: 1.0,
        am_depth: 0.05,
        am_rate: 2.0,
        tilt: 1.4,
        segment_s: 0.16,
        gain: 0.5,
    },
    // excited: wide fast contour, bright, loud
    StyleShape {
        contour_depth: 0.25,
        contour_rate: 2.5,
        pitch_shift: 1.25,
        am_depth: 0.4,
        am_rate: 5.0,
        tilt: 0.7,
        segment_s: 0.10,
        gain: 0.8,
    },
    // sad: low, falling, slow, soft
    StyleShape {
        contour_depth: 0.12,
        contour_rate: 0.3,
        pitch_shift: 0.85,
        am_depth: 0.15,
        am_rate: 1.0,
        tilt: 1.8,
        segment_s: 0.22,
        gain: 0.3,
    },
    // confused: rising wobbling pitch
    StyleShape {
        contour_depth: 0.18,
        contour_rate: 1.5,
        pitch_shift: 1.1,
        am_depth: 0.25,
        am_rate: 3.5,
        tilt: 1.0,
        segment_s: 0.13,
        gain: 0.6,
    },
];

const STYLE_NAMES: [&str; 4] = ["calm", "excited", "sad", "confused"];

/// Vowel-like formant targets (F1, F2, F3) in Hz.
const VOWELS: [[f64; 3]; 8] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [660.0, 1720.0, 2410.0],
    [440.0, 1020.0, 2240.0],
    [390.0, 1990.0, 2550.0],
];

fn style_for(index: usize) -> (StyleShape, String) {
    let name = if index < STYLE_NAMES.len() {
        STYLE_NAMES[index].to_string()
    } else {
        format!("style{index}")
    };
    (STYLES[index % STYLES.len()], name)
}

fn speaker_voice(index: usize, n_speakers: usize) -> (f64, Vec<(f64, f64)>) {
    // base pitch spread over [95, 260] Hz; formants scale with a shorter vocal tract
    let frac = if n_speakers > 1 {
        index as f64 / (n_speakers - 1) as f64
    } else {
        0.5
    };
    let f0 = 95.0 * (260.0f64 / 95.0).powf(frac);
    let scale = 0.9 + 0.25 * frac;
    let profile = vec![(scale, 80.0 + 40.0 * frac), (scale, 110.0 + 40.0 * frac), (scale, 160.0 + 40.0 * frac)];
    (f0, profile)
}

/// Round-robin label assignment: speaker cycles fastest, then style, then language.
pub fn assignment(index: usize, n_speakers: usize, n_styles: usize, n_languages: usize) -> (usize, usize, usize) {
    let speaker = index % n_speakers;
    let style = (index / n_speakers) % n_styles;
    let language = (index / (n_speakers * n_styles)) % n_languages.max(1);
    (speaker, style, language)
}

/// Renders one utterance. Pitch, amplitude and spectral tilt carry the style;
/// base pitch and formant scaling carry the speaker; the segment sequence is
/// the "linguistic" content.
pub fn synthesize(spec: &SyntheticUtteranceSpec, style_index: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let n = (spec.duration_s * sr).round() as usize;
    let style = STYLES[style_index % STYLES.len()];
    let hop = 80usize;
    let n_ctrl = n / hop + 2;

    // segment plan
    struct Segment {
        end: usize,
        vowel: usize,
        voiced: bool,
    }
    let mut segments = Vec::new();
    let mut pos = 0usize;
    while pos < n {
        let len_s = style.segment_s * (0.6 + 0.8 * rng.random::<f64>());
        let len = ((len_s * sr) as usize).max(hop * 4);
        let voiced = rng.random::<f64>() > 0.15;
        segments.push(Segment {
            end: (pos + len).min(n),
            vowel: rng.random_range(0..VOWELS.len()),
            voiced,
        });
        pos += len;
    }

    let phase0 = rng.random::<f64>() * 2.0 * PI;
    let mut f0_ctrl = vec![0.0; n_ctrl];
    let mut amp_ctrl = vec![0.0; n_ctrl];
    let mut voiced_ctrl = vec![false; n_ctrl];
    let mut formants_ctrl = vec![[0.0f64; 3]; n_ctrl];
    let mut seg_idx = 0;
    let mut prev_formants = VOWELS[segments[0].vowel];
    let mut seg_start = 0usize;
    for c in 0..n_ctrl {
        let sample = (c * hop).min(n.saturating_sub(1));
        while seg_idx + 1 < segments.len() && sample >= segments[seg_idx].end {
            prev_formants = VOWELS[segments[seg_idx].vowel];
            seg_start = segments[seg_idx].end;
            seg_idx += 1;
        }
        let seg = &segments[seg_idx];
        let t = sample as f64 / sr;
        let progress = t / spec.duration_s.max(1e-9);
        let contour = style.contour_depth * (2.0 * PI * style.contour_rate * t + phase0).sin();
        let drift = match style_index % STYLES.len() {
            2 => -0.15 * progress,
            3 => 0.2 * progress,
            _ => -0.05 * progress,
        };
        f0_ctrl[c] = (spec.fundamental_hz * style.pitch_shift * (1.0 + contour + drift)).clamp(60.0, 400.0);
        let am = 1.0 + style.am_depth * (2.0 * PI * style.am_rate * t).sin();
        // short onset/offset ramps per segment
        let into = (sample.saturating_sub(seg_start)) as f64 / sr;
        let left = (seg.end.saturating_sub(sample)) as f64 / sr;
        let ramp = (into / 0.015).min(1.0) * (left / 0.015).min(1.0);
        amp_ctrl[c] = style.gain * am * (0.3 + 0.7 * ramp);
        voiced_ctrl[c] = seg.voiced;
        let target = VOWELS[seg.vowel];
        let w = (into / 0.03).min(1.0);
        for k in 0..3 {
            let f = prev_formants[k] + (target[k] - prev_formants[k]) * w;
            formants_ctrl[c][k] = f * spec.formant_profile[k].0;
        }
    }

    let max_freq = 7000.0;
    let envelope = |freq: f64, formants: &[f64; 3]| -> f64 {
        let mut g = 0.02;
        for (k, &fc) in formants.iter().enumerate() {
            let bw = spec.formant_profile[k].1;
            let d = (freq - fc) / bw;
            g += [1.0, 0.7, 0.4][k] * (-0.5 * d * d).exp();
        }
        g
    };

    let mut out = vec![0.0; n];
    let mut phase = 0.0f64;
    let max_h = (max_freq / 60.0) as usize + 1;
    let mut amps_a = vec![0.0; max_h];
    let mut amps_b = vec![0.0; max_h];
    let mut hp_state = 0.0;
    let mut prev_noise = 0.0;
    for c in 0..n_ctrl - 1 {
        let start = c * hop;
        if start >= n {
            break;
        }
        let end = (start + hop).min(n);
        let (fa, fb) = (f0_ctrl[c], f0_ctrl[c + 1]);
        for (amps, cc) in [(&mut amps_a, c), (&mut amps_b, c + 1)] {
            let f0 = f0_ctrl[cc];
            for (h, a) in amps.iter_mut().enumerate() {
                let freq = (h + 1) as f64 * f0;
                *a = if voiced_ctrl[cc] && freq < max_freq {
                    amp_ctrl[cc] * envelope(freq, &formants_ctrl[cc]) / ((h + 1) as f64).powf(style.tilt)
                } else {
                    0.0
                };
            }
        }
        for i in start..end {
            let frac = (i - start) as f64 / hop as f64;
            let f0 = fa + (fb - fa) * frac;
            phase += 2.0 * PI * f0 / sr;
            if phase > 2.0 * PI * 1e4 {
                phase -= 2.0 * PI * 1e4;
            }
            let mut s = 0.0;
            for h in 0..max_h {
                let a = amps_a[h] + (amps_b[h] - amps_a[h]) * frac;
                if a != 0.0 {
                    s += a * ((h + 1) as f64 * phase).sin();
                }
            }
            if !voiced_ctrl[c] {
                // fricative: high-passed white noise
                let w: f64 = StandardNormal.sample(rng);
                hp_state = 0.7 * (hp_state + w - prev_noise);
                prev_noise = w;
                s += 0.25 * amp_ctrl[c] * hp_state;
            }
            out[i] = s;
        }
    }

    let floor_std = 10f64.powf(spec.noise_floor_db / 20.0);
    for s in out.iter_mut() {
        let w: f64 = StandardNormal.sample(rng);
        *s += floor_std * w;
    }
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.9 {
        let g = 0.9 / peak;
        out.iter_mut().for_each(|s| *s *= g);
    }
    out
}

/// Writes `n_utterances` synthetic waveforms plus `manifest.jsonl` into `out_dir`.
/// Output is a pure function of `(cfg, n_utterances, seed)`.
pub fn generate_synthetic_corpus(cfg: &CorpusConfig, n_utterances: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n_utterances < 1 {
        return Err(Error::InvalidArgument("n_utterances must be ≥ 1".to_string()));
    }
    if cfg.languages.is_empty() || cfg.n_speakers == 0 || cfg.n_styles == 0 {
        return Err(Error::InvalidArgument(
            "corpus config needs at least one language, speaker and style".to_string(),
        ));
    }
    let corpus_err = |path: &Path, source| Error::CorpusIo {
        path: path.to_path_buf(),
        source,
    };
    let wav_dir = out_dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| corpus_err(&wav_dir, e))?;
    let mut entries = Vec::with_capacity(n_utterances);
    for i in 0..n_utterances {
        let (spk, sty, lang) = assignment(i, cfg.n_speakers, cfg.n_styles, cfg.languages.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let duration_s = cfg.min_duration_s + (cfg.max_duration_s - cfg.min_duration_s) * rng.random::<f64>();
        let (f0, profile) = speaker_voice(spk, cfg.n_speakers);
        let (_, style_name) = style_for(sty);
        let spec = SyntheticUtteranceSpec {
            fundamental_hz: f0,
            formant_profile: profile,
            noise_floor_db: -60.0,
            duration_s,
            style_label: style_name,
            speaker_label: format!("spk{spk}"),
        };
        let samples = synthesize(&spec, sty, &mut rng);
        let id = format!("utt{i:05}");
        let rel = PathBuf::from("wavs").join(format!("{id}.wav"));
        let abs = out_dir.join(&rel);
        crate::audio::write_wav(&abs, &samples).map_err(|e| match e {
            Error::Wav(hound::Error::IoError(source)) => corpus_err(&abs, source),
            other => other,
        })?;
        entries.push(ManifestEntry {
            utterance_id: id,
            audio_path: rel,
            language_id: cfg.languages[lang].clone(),
            split: Split::Train,
            speaker_label: Some(spec.speaker_label),
            style_label: Some(spec.style_label),
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    let manifest_path = out_dir.join("manifest.jsonl");
    manifest.write(&manifest_path).map_err(|e| match e {
        Error::Io { source, .. } => corpus_err(&manifest_path, source),
        other => other,
    })?;
    Ok(manifest)
}

/// Language sampling probabilities proportional to `(n_i / N)^(1/T)`.
pub fn temperature_resample(counts: &BTreeMap<String, usize>, temperature: f64) -> Result<BTreeMap<String, f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("all language counts are zero".to_string()));
    }
    let weights: BTreeMap<&String, f64> = counts
        .iter()
        .map(|(k, &c)| (k, (c as f64 / total as f64).powf(1.0 / temperature)))
        .collect();
    let z: f64 = weights.values().sum();
    Ok(weights.into_iter().map(|(k, w)| (k.clone(), w / z)).collect())
}

/// Weighted sampling with replacement: pick a language by its resampled
/// probability, then an utterance uniformly within it.
#[derive(Debug, Clone)]
pub struct LanguageSampler {
    groups: Vec<Vec<usize>>,
    cumulative: Vec<f64>,
}

impl LanguageSampler {
    /// `languages[i]` is the language of item `i`.
    pub fn new(languages: &[&str], temperature: f64) -> Result<Self> {
        let mut index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, l) in languages.iter().enumerate() {
            index.entry(l.to_string()).or_default().push(i);
        }
        let counts = index.iter().map(|(k, v)| (k.clone(), v.len())).collect();
        let probs = temperature_resample(&counts, temperature)?;
        let mut acc = 0.0;
        let cumulative = probs
            .values()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            groups: index.into_values().collect(),
            cumulative,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let g = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.groups.len() - 1);
        let group = &self.groups[g];
        group[rng.random_range(0..group.len())]
    }
}
