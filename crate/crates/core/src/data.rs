//! Corpus manifests, synthetic corpora, and padded batching.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MOS_MIN: f64 = 1.0;
pub const MOS_MAX: f64 = 5.0;
pub const MANIFEST_HEADER: &str = "id|audio_path|system_id|mos|split";
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("synthetic corpus needs at least 3 utterances, got {0}")]
    InvalidCount(usize),
    #[error("cannot collate an empty batch")]
    EmptyBatch,
    #[error("audio for {id:?} has not been loaded into memory")]
    AudioNotLoaded { id: String },
    #[error("audio error for {path}: {reason}")]
    Audio { path: PathBuf, reason: String },
    #[error("{path} is sampled at {found} Hz, manifest expects {expected} Hz")]
    SampleRateMismatch { path: PathBuf, expected: u32, found: u32 },
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Where an utterance's samples live.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioSource {
    /// A WAV file.
    Path(PathBuf),
    /// A record in a float32 sidecar (`<file>.bin#<key>`, indexed by `<file>.idx`).
    Sidecar { bin: PathBuf, key: String },
    /// Samples already in memory.
    Inline(Arc<Vec<f32>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: AudioSource,
    pub system_id: String,
    pub mos: f64,
    pub split: Split,
}

impl Utterance {
    pub fn waveform(&self) -> Result<&[f32], DataError> {
        match &self.audio {
            AudioSource::Inline(w) => Ok(w),
            _ => Err(DataError::AudioNotLoaded { id: self.id.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub name: String,
    pub sample_rate: u32,
    pub entries: Vec<Utterance>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.entries.iter().filter(|u| u.split == split).collect()
    }

    pub fn subset(&self, split: Split) -> CorpusManifest {
        CorpusManifest {
            name: self.name.clone(),
            sample_rate: self.sample_rate,
            entries: self.entries.iter().filter(|u| u.split == split).cloned().collect(),
        }
    }

    /// Serializes the manifest text. Inline audio is written as
    /// `<sidecar>#<id>`; `sidecar` must be given if any entry is inline.
    pub fn to_text(&self, sidecar: Option<&str>) -> String {
        let mut out = format!("# name={}\n# sample_rate={}\n{MANIFEST_HEADER}\n", self.name, self.sample_rate);
        for u in &self.entries {
            let path = match &u.audio {
                AudioSource::Path(p) => p.display().to_string(),
                AudioSource::Sidecar { bin, key } => format!("{}#{key}", bin.display()),
                AudioSource::Inline(_) => format!("{}#{}", sidecar.unwrap_or("waveforms.bin"), u.id),
            };
            out.push_str(&format!("{}|{}|{}|{}|{}\n", u.id, path, u.system_id, u.mos, u.split.as_str()));
        }
        out
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> DataError {
    DataError::MalformedRow {
        line,
        reason: reason.into(),
    }
}

/// Reads a `|`-delimited manifest. Lines starting with `#` before the header
/// may carry `name=` and `sample_rate=` metadata. Relative audio paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    let mut sample_rate = DEFAULT_SAMPLE_RATE;
    let mut header_seen = false;
    let mut entries = Vec::new();
    let mut ids = HashSet::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if let Some(meta) = trimmed.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    match k.trim() {
                        "name" => name = v.trim().to_string(),
                        "sample_rate" => {
                            sample_rate = v
                                .trim()
                                .parse()
                                .map_err(|_| malformed(line_no, format!("bad sample_rate {v:?}")))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if trimmed.trim() != MANIFEST_HEADER {
                return Err(malformed(line_no, format!("expected header {MANIFEST_HEADER:?}")));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = trimmed.split('|').collect();
        if fields.len() != 5 {
            return Err(malformed(line_no, format!("expected 5 fields, found {}", fields.len())));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(malformed(line_no, "empty id"));
        }
        let mos: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| malformed(line_no, format!("bad mos {:?}", fields[3])))?;
        if !(MOS_MIN..=MOS_MAX).contains(&mos) {
            return Err(malformed(line_no, format!("mos {mos} outside [1, 5]")));
        }
        let split = Split::parse(fields[4].trim())
            .ok_or_else(|| malformed(line_no, format!("bad split {:?}", fields[4])))?;
        if !ids.insert(id.to_string()) {
            return Err(DataError::DuplicateId(id.to_string()));
        }
        let audio_field = fields[1].trim();
        let audio = match audio_field.split_once('#') {
            Some((bin, key)) => AudioSource::Sidecar {
                bin: base.join(bin),
                key: key.to_string(),
            },
            None => AudioSource::Path(base.join(audio_field)),
        };
        entries.push(Utterance {
            id: id.to_string(),
            audio,
            system_id: fields[2].trim().to_string(),
            mos,
            split,
        });
    }
    if !header_seen {
        return Err(malformed(1, "missing header"));
    }
    Ok(CorpusManifest {
        name,
        sample_rate,
        entries,
    })
}

/// Sidecar samples and the `(offset, len)` of each utterance in them.
type SidecarIndex = (Arc<Vec<f32>>, HashMap<String, (usize, usize)>);

/// Resolves audio sources to samples, caching sidecar indices.
#[derive(Default)]
pub struct AudioLoader {
    sidecars: HashMap<PathBuf, SidecarIndex>,
}

impl AudioLoader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(&mut self, source: &AudioSource, sample_rate: u32) -> Result<Arc<Vec<f32>>, DataError> {
        match source {
            AudioSource::Inline(w) => Ok(w.clone()),
            AudioSource::Path(p) => read_wav(p, sample_rate).map(Arc::new),
            AudioSource::Sidecar { bin, key } => {
                if !self.sidecars.contains_key(bin) {
                    let loaded = read_sidecar(bin)?;
                    self.sidecars.insert(bin.clone(), loaded);
                }
                let (data, index) = &self.sidecars[bin];
                let &(offset, len) = index.get(key).ok_or_else(|| DataError::Audio {
                    path: bin.clone(),
                    reason: format!("no record {key:?} in index"),
                })?;
                Ok(Arc::new(data[offset..offset + len].to_vec()))
            }
        }
    }
}

/// Returns a copy of the manifest with every utterance's audio in memory.
pub fn materialize(manifest: &CorpusManifest) -> Result<CorpusManifest, DataError> {
    let mut loader = AudioLoader::new();
    let entries = manifest
        .entries
        .iter()
        .map(|u| {
            let w = loader.load(&u.audio, manifest.sample_rate)?;
            Ok(Utterance {
                audio: AudioSource::Inline(w),
                ..u.clone()
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(CorpusManifest {
        entries,
        ..manifest.clone()
    })
}

/// Mono float samples from a WAV file; multi-channel input is averaged.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f32>, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let audio_err = |e: hound::Error| DataError::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = hound::WavReader::open(path).map_err(audio_err)?;
    let spec = reader.spec();
    if spec.sample_rate != expected_rate {
        return Err(DataError::SampleRateMismatch {
            path: path.to_path_buf(),
            expected: expected_rate,
            found: spec.sample_rate,
        });
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>().map_err(audio_err)?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()
                .map_err(audio_err)?
        }
    };
    let ch = spec.channels.max(1) as usize;
    Ok(interleaved
        .chunks(ch)
        .map(|frame| frame.iter().sum::<f32>() / ch as f32)
        .collect())
}

fn sidecar_index_path(bin: &Path) -> PathBuf {
    bin.with_extension("idx")
}

type SidecarContents = (Arc<Vec<f32>>, HashMap<String, (usize, usize)>);

fn read_sidecar(bin: &Path) -> Result<SidecarContents, DataError> {
    let idx_path = sidecar_index_path(bin);
    for p in [bin, idx_path.as_path()] {
        if !p.is_file() {
            return Err(DataError::MissingFile(p.to_path_buf()));
        }
    }
    let bytes = fs::read(bin)?;
    if bytes.len() % 4 != 0 {
        return Err(DataError::Audio {
            path: bin.to_path_buf(),
            reason: "length is not a multiple of 4 bytes".into(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut index = HashMap::new();
    for (i, line) in fs::read_to_string(&idx_path)?.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || DataError::Audio {
            path: idx_path.clone(),
            reason: format!("bad index line {}", i + 1),
        };
        if parts.len() != 3 {
            return Err(bad());
        }
        let offset: usize = parts[1].parse().map_err(|_| bad())?;
        let len: usize = parts[2].parse().map_err(|_| bad())?;
        if offset + len > data.len() {
            return Err(bad());
        }
        index.insert(parts[0].to_string(), (offset, len));
    }
    Ok((Arc::new(data), index))
}

/// Writes `manifest.txt` plus a `waveforms.bin`/`waveforms.idx` sidecar
/// holding every inline waveform. Returns the manifest path.
pub fn write_corpus(manifest: &CorpusManifest, dir: &Path) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir)?;
    let mut bin = fs::File::create(dir.join("waveforms.bin"))?;
    let mut idx = String::new();
    let mut offset = 0usize;
    for u in &manifest.entries {
        if let AudioSource::Inline(w) = &u.audio {
            let bytes: Vec<u8> = w.iter().flat_map(|s| s.to_le_bytes()).collect();
            bin.write_all(&bytes)?;
            idx.push_str(&format!("{} {} {}\n", u.id, offset, w.len()));
            offset += w.len();
        }
    }
    fs::write(dir.join("waveforms.idx"), idx)?;
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest.to_text(Some("waveforms.bin")))?;
    Ok(path)
}

/// MOS assigned to a synthetic corruption level in `[0, 1]`, on the
/// 1/8-point grid of an eight-listener average.
pub fn synthetic_mos(corruption: f64) -> f64 {
    let raw = MOS_MAX - (MOS_MAX - MOS_MIN) * corruption.clamp(0.0, 1.0);
    (raw * 8.0).round() / 8.0
}

/// Corruption level and system index for each synthetic utterance.
pub fn synthetic_levels(n_utts: usize, seed: u64) -> Vec<(f64, usize)> {
    let n_systems = (n_utts / 6).clamp(2, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e7e15);
    (0..n_utts)
        .map(|i| {
            let sys = i % n_systems;
            let base = sys as f64 / (n_systems - 1) as f64;
            let level = if i == 0 {
                0.0
            } else if i == n_systems - 1 {
                1.0
            } else {
                (base + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0)
            };
            (level, sys)
        })
        .collect()
}

/// Voiced tone mixture with additive noise and clipping, both growing with
/// `corruption`.
pub fn synthesize_waveform<R: Rng>(rng: &mut R, corruption: f64, sample_rate: u32) -> Vec<f32> {
    let sr = sample_rate as f64;
    let duration = rng.random_range(0.4..0.8);
    let n = (duration * sr) as usize;
    let f0 = rng.random_range(120.0..400.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let am_rate = rng.random_range(3.0..6.0);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let clip = 1.0 - 0.6 * corruption;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let w = std::f64::consts::TAU * f0 * t;
            let tone = 0.4 * w.sin() + 0.2 * (2.0 * w + phase).sin() + 0.1 * (3.0 * w).sin();
            let env = 0.6 + 0.4 * (std::f64::consts::TAU * am_rate * t).sin();
            let s = tone * env + 0.5 * corruption * noise.sample(rng);
            s.clamp(-clip, clip) as f32
        })
        .collect()
}

/// Deterministic desk-scale corpus: MOS is a monotone function of a hidden
/// corruption level, level 0 maps to MOS 5 and level 1 to MOS 1.
pub fn generate_synthetic_corpus(n_utts: usize, seed: u64) -> Result<CorpusManifest, DataError> {
    if n_utts < 3 {
        return Err(DataError::InvalidCount(n_utts));
    }
    let levels = synthetic_levels(n_utts, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_utts).collect();
    order.shuffle(&mut rng);
    let n_heldout = (n_utts * 15 / 100).max(1);
    let mut splits = vec![Split::Train; n_utts];
    for &i in &order[..n_heldout] {
        splits[i] = Split::Valid;
    }
    for &i in &order[n_heldout..2 * n_heldout] {
        splits[i] = Split::Test;
    }
    let entries = levels
        .iter()
        .enumerate()
        .map(|(i, &(level, sys))| Utterance {
            id: format!("utt{i:04}"),
            audio: AudioSource::Inline(Arc::new(synthesize_waveform(&mut rng, level, DEFAULT_SAMPLE_RATE))),
            system_id: format!("sys{sys:02}"),
            mos: synthetic_mos(level),
            split: splits[i],
        })
        .collect();
    Ok(CorpusManifest {
        name: format!("synthetic-{n_utts}-{seed}"),
        sample_rate: DEFAULT_SAMPLE_RATE,
        entries,
    })
}

/// Zero-padded waveform batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<String>,
    pub system_ids: Vec<String>,
    pub waveforms: Array2<f32>,
    pub lengths: Vec<usize>,
    pub mos: Vec<f64>,
    pub mask: Array2<bool>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// The unpadded samples of item `b`.
    pub fn waveform(&self, b: usize) -> ndarray::ArrayView1<'_, f32> {
        self.waveforms.slice(ndarray::s![b, ..self.lengths[b]])
    }
}

pub fn collate(utts: &[&Utterance]) -> Result<PaddedBatch, DataError> {
    if utts.is_empty() {
        return Err(DataError::EmptyBatch);
    }
    let waves = utts.iter().map(|u| u.waveform()).collect::<Result<Vec<_>, _>>()?;
    let lengths: Vec<usize> = waves.iter().map(|w| w.len()).collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    let mut waveforms = Array2::zeros((utts.len(), t_max));
    let mut mask = Array2::from_elem((utts.len(), t_max), false);
    for (b, w) in waves.iter().enumerate() {
        for (t, &s) in w.iter().enumerate() {
            waveforms[[b, t]] = s;
            mask[[b, t]] = true;
        }
    }
    Ok(PaddedBatch {
        ids: utts.iter().map(|u| u.id.clone()).collect(),
        system_ids: utts.iter().map(|u| u.system_id.clone()).collect(),
        waveforms,
        lengths,
        mos: utts.iter().map(|u| u.mos).collect(),
        mask,
    })
}
