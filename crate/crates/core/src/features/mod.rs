//! Waveform → feature conversion and the per-utterance feature cache.

pub mod mel;
pub mod prosody;
pub mod units;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use mel::{MelExtractor, MelSpectrogram, NormStats};
pub use prosody::{AutocorrelationPitch, PitchExtractor, PitchTrack};
pub use units::{Codebook, UnitSequence};

use crate::config::FeatureConfig;
use crate::container::{BlobData, Container, ContainerKind};
use crate::corpus::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::MEL_BANDS;

/// Audio known to be free of augmentation. Discrete units are only ever
/// computed from this type, so noisy crops cannot reach the unit path.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanWaveform(Vec<f64>);

impl CleanWaveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self(samples)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::audio::read_wav(path).map(Self)
    }

    pub fn samples(&self) -> &[f64] {
        &self.0
    }
}

/// Per-unit prosody targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyTrack {
    pub log_f0: Vec<f64>,
    pub vuv: Vec<bool>,
    pub log_energy: Vec<f64>,
}

impl ProsodyTrack {
    pub fn len(&self) -> usize {
        self.log_f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_f0.is_empty()
    }
}

/// Everything the trainer needs for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub utterance_id: String,
    pub language_id: String,
    pub speaker_label: Option<String>,
    pub style_label: Option<String>,
    /// Normalized Mel truncated to `2·Σ durations` frames.
    pub mel: MelSpectrogram,
    pub units: UnitSequence,
    pub prosody: ProsodyTrack,
}

/// Feature extraction front end with a pluggable pitch tracker.
pub struct FeatureFrontend {
    pub config: FeatureConfig,
    pub mel: MelExtractor,
    pub pitch: Box<dyn PitchExtractor>,
}

impl FeatureFrontend {
    pub fn new(config: &FeatureConfig) -> Self {
        Self {
            mel: MelExtractor::new(config.log_floor),
            pitch: Box::new(AutocorrelationPitch::new(
                config.f0_min_hz,
                config.f0_max_hz,
                config.voicing_threshold,
                config.unvoiced_default_hz,
            )),
            config: config.clone(),
        }
    }

    pub fn with_pitch(mut self, pitch: Box<dyn PitchExtractor>) -> Self {
        self.pitch = pitch;
        self
    }

    /// Raw unit stream (20 ms steps) from clean audio.
    pub fn raw_units(&self, clean: &CleanWaveform, stats: &NormStats, codebook: &Codebook) -> Result<Vec<u32>> {
        let mel = stats.normalize(&self.mel.extract(clean.samples())?);
        codebook.quantize(&mel)
    }

    pub fn units(&self, clean: &CleanWaveform, stats: &NormStats, codebook: &Codebook) -> Result<UnitSequence> {
        units::deduplicate(&self.raw_units(clean, stats, codebook)?)
    }

    pub fn record(
        &self,
        entry: &ManifestEntry,
        clean: &CleanWaveform,
        stats: &NormStats,
        codebook: &Codebook,
    ) -> Result<FeatureRecord> {
        let wave = clean.samples();
        let mel = stats.normalize(&self.mel.extract(wave)?);
        let raw = codebook.quantize(&mel)?;
        let seq = units::deduplicate(&raw)?;
        let mel = mel.slice_frames(0, seq.mel_frames())?;
        let pitch = self.pitch.extract(wave)?;
        let energy = prosody::extract_energy(wave, self.config.log_floor)?;
        let prosody = ProsodyTrack {
            log_f0: units::pool_to_units(&pitch.log_f0, &seq)?,
            vuv: units::pool_vuv(&pitch.vuv, &seq)?,
            log_energy: units::pool_to_units(&energy, &seq)?,
        };
        Ok(FeatureRecord {
            utterance_id: entry.utterance_id.clone(),
            language_id: entry.language_id.clone(),
            speaker_label: entry.speaker_label.clone(),
            style_label: entry.style_label.clone(),
            mel,
            units: seq,
            prosody,
        })
    }

    /// Fits normalization stats and a `vocab_size`-entry codebook on the
    /// manifest's training split.
    pub fn fit_codebook(&self, manifest: &Manifest, vocab_size: usize) -> Result<(NormStats, Codebook)> {
        let mut mels = Vec::new();
        for e in manifest.split(Split::Train) {
            let wave = crate::audio::read_wav(&manifest.audio_path(e))?;
            mels.push(self.mel.extract(&wave)?);
        }
        if mels.is_empty() {
            return Err(Error::Feature("manifest has no training entries".into()));
        }
        let stats = NormStats::fit(&mels)?;
        let points: Vec<Vec<f64>> = mels
            .iter()
            .flat_map(|m| units::pool_pairs(&stats.normalize(m)))
            .collect();
        let book = units::train_codebook(
            &points,
            vocab_size,
            self.config.kmeans_seed,
            self.config.kmeans_max_iters,
            self.config.kmeans_tol,
        )?;
        Ok((stats, book))
    }

    pub fn extract_manifest(&self, manifest: &Manifest, stats: &NormStats, codebook: &Codebook) -> Result<FeatureSet> {
        let records = manifest
            .entries
            .iter()
            .map(|e| {
                let clean = CleanWaveform::load(&manifest.audio_path(e))?;
                self.record(e, &clean, stats, codebook)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureSet {
            stats: stats.clone(),
            codebook: codebook.clone(),
            records,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    utterance_id: String,
    language_id: String,
    speaker_label: Option<String>,
    style_label: Option<String>,
}

/// Feature cache: normalization stats, codebook and every utterance record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub stats: NormStats,
    pub codebook: Codebook,
    pub records: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn vocab_size(&self) -> usize {
        self.codebook.size()
    }

    pub fn by_id(&self) -> BTreeMap<&str, &FeatureRecord> {
        self.records.iter().map(|r| (r.utterance_id.as_str(), r)).collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let metas: Vec<RecordMeta> = self
            .records
            .iter()
            .map(|r| RecordMeta {
                utterance_id: r.utterance_id.clone(),
                language_id: r.language_id.clone(),
                speaker_label: r.speaker_label.clone(),
                style_label: r.style_label.clone(),
            })
            .collect();
        let mut c = Container::new(
            ContainerKind::Features,
            json!({"stats": self.stats, "records": metas}),
        );
        put_codebook(&mut c, &self.codebook)?;
        for (i, r) in self.records.iter().enumerate() {
            let p = format!("rec{i:06}");
            c.put(format!("{p}/mel"), vec![MEL_BANDS, r.mel.frames], BlobData::F64(r.mel.values.clone()))?;
            let n = r.units.len();
            c.put(format!("{p}/units"), vec![n], BlobData::I64(r.units.units.iter().map(|&u| u as i64).collect()))?;
            c.put(
                format!("{p}/durations"),
                vec![n],
                BlobData::I64(r.units.durations.iter().map(|&d| d as i64).collect()),
            )?;
            c.put(format!("{p}/log_f0"), vec![n], BlobData::F64(r.prosody.log_f0.clone()))?;
            c.put(
                format!("{p}/vuv"),
                vec![n],
                BlobData::I64(r.prosody.vuv.iter().map(|&v| v as i64).collect()),
            )?;
            c.put(format!("{p}/log_energy"), vec![n], BlobData::F64(r.prosody.log_energy.clone()))?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let stats: NormStats = serde_json::from_value(c.meta["stats"].clone())?;
        let metas: Vec<RecordMeta> = serde_json::from_value(c.meta["records"].clone())?;
        let codebook = get_codebook(c)?;
        let mut records = Vec::with_capacity(metas.len());
        for (i, m) in metas.into_iter().enumerate() {
            let p = format!("rec{i:06}");
            let (shape, mel) = c.f64s(&format!("{p}/mel"))?;
            let mut mel = MelSpectrogram::new(shape[1], mel.to_vec())?;
            mel.norm = Some(stats.clone());
            let to_u32 = |name: &str| -> Result<Vec<u32>> {
                c.i64s(&format!("{p}/{name}"))?
                    .1
                    .iter()
                    .map(|&v| u32::try_from(v).map_err(|_| Error::Container(format!("{p}/{name}: negative value"))))
                    .collect()
            };
            let seq = UnitSequence::new(to_u32("units")?, to_u32("durations")?)?;
            let prosody = ProsodyTrack {
                log_f0: c.f64s(&format!("{p}/log_f0"))?.1.to_vec(),
                vuv: c.i64s(&format!("{p}/vuv"))?.1.iter().map(|&v| v != 0).collect(),
                log_energy: c.f64s(&format!("{p}/log_energy"))?.1.to_vec(),
            };
            if prosody.len() != seq.len() || mel.frames != seq.mel_frames() {
                return Err(Error::Container(format!("{}: inconsistent record shapes", m.utterance_id)));
            }
            records.push(FeatureRecord {
                utterance_id: m.utterance_id,
                language_id: m.language_id,
                speaker_label: m.speaker_label,
                style_label: m.style_label,
                mel,
                units: seq,
                prosody,
            });
        }
        Ok(Self {
            stats,
            codebook,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, ContainerKind::Features)?)
    }
}

fn put_codebook(c: &mut Container, book: &Codebook) -> Result<()> {
    c.put("codebook", vec![book.size(), book.dim], BlobData::F64(book.centroids.clone()))
}

fn get_codebook(c: &Container) -> Result<Codebook> {
    let (shape, data) = c.f64s("codebook")?;
    Codebook::new(shape[1], data.to_vec())
}

/// Writes normalization stats plus codebook as a standalone container.
pub fn save_codebook(path: &Path, stats: &NormStats, book: &Codebook) -> Result<()> {
    let mut c = Container::new(ContainerKind::Codebook, json!({ "stats": stats }));
    put_codebook(&mut c, book)?;
    c.write(path)
}

pub fn load_codebook(path: &Path) -> Result<(NormStats, Codebook)> {
    let c = Container::read(path, ContainerKind::Codebook)?;
    let stats = serde_json::from_value(c.meta["stats"].clone())?;
    Ok((stats, get_codebook(&c)?))
}
