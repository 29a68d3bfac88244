//! Speech Commands ingestion: vocabularies, split manifest, batching.

mod batches;
pub mod fetch;
pub mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::NoiseBank;
use crate::error::{KwsError, Result};
use crate::frontend::{decode_wav, fit_length, AudioClip, CLIP_SAMPLES};

pub use batches::{make_batches, Batch, BatchItem, ClipSource, Composition, Loader};

pub const CORE_KEYWORDS: [&str; 10] = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];
pub const DIGITS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
pub const AUX_KEYWORDS: [&str; 15] = [
    "backward", "bed", "bird", "cat", "dog", "follow", "forward", "happy", "house", "learn", "marvin", "sheila",
    "tree", "visual", "wow",
];
pub const UNKNOWN: &str = "_unknown_";
pub const SILENCE: &str = "_silence_";
pub const NOISE_DIR: &str = "_background_noise_";
pub const VALIDATION_LIST: &str = "validation_list.txt";
pub const TESTING_LIST: &str = "testing_list.txt";

/// Every keyword folder of the v2 archive.
pub fn all_keywords() -> Vec<&'static str> {
    let mut v: Vec<&str> = CORE_KEYWORDS.iter().chain(&DIGITS).chain(&AUX_KEYWORDS).copied().collect();
    v.sort_unstable();
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subtask {
    Ten,
    Twenty,
    ThirtyFive,
}

impl Subtask {
    pub fn number(self) -> usize {
        match self {
            Subtask::Ten => 10,
            Subtask::Twenty => 20,
            Subtask::ThirtyFive => 35,
        }
    }

    pub fn from_number(n: usize) -> Result<Self> {
        match n {
            10 => Ok(Subtask::Ten),
            20 => Ok(Subtask::Twenty),
            35 => Ok(Subtask::ThirtyFive),
            _ => Err(KwsError::config(format!("subtask must be 10, 20 or 35, got {n}"))),
        }
    }
}

impl FromStr for Subtask {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        let n = s.trim().parse().map_err(|_| KwsError::config(format!("subtask {s:?} is not a number")))?;
        Self::from_number(n)
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Output classes of a subtask. Keywords come first, then `unknown` and
/// `silence` where the subtask has them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubtaskVocabulary {
    pub subtask: Subtask,
    pub keywords: Vec<String>,
    pub unknown: bool,
    pub silence: bool,
}

impl SubtaskVocabulary {
    pub fn new(subtask: Subtask) -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match subtask {
            Subtask::Ten => SubtaskVocabulary { subtask, keywords: own(&CORE_KEYWORDS), unknown: true, silence: true },
            Subtask::Twenty => {
                let mut k = own(&CORE_KEYWORDS);
                k.extend(own(&DIGITS));
                SubtaskVocabulary { subtask, keywords: k, unknown: true, silence: false }
            }
            Subtask::ThirtyFive => {
                SubtaskVocabulary { subtask, keywords: own(&all_keywords()), unknown: false, silence: false }
            }
        }
    }

    pub fn classes(&self) -> Vec<String> {
        let mut c = self.keywords.clone();
        if self.unknown {
            c.push(UNKNOWN.into());
        }
        if self.silence {
            c.push(SILENCE.into());
        }
        c
    }

    pub fn num_classes(&self) -> usize {
        self.keywords.len() + self.unknown as usize + self.silence as usize
    }

    pub fn unknown_label(&self) -> Option<usize> {
        self.unknown.then_some(self.keywords.len())
    }

    pub fn silence_label(&self) -> Option<usize> {
        self.silence.then_some(self.keywords.len() + self.unknown as usize)
    }

    /// Class index of a keyword folder; out-of-vocabulary words map to
    /// `unknown` when the subtask has it.
    pub fn label_of(&self, keyword: &str) -> Option<usize> {
        self.keywords.iter().position(|k| k == keyword).or(self.unknown_label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(KwsError::config(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub keyword: String,
    pub label: usize,
    pub speaker: String,
    pub split: Split,
}

/// Speaker id of a Speech Commands file name: the part before `_nohash_`.
pub fn speaker_of(file_name: &str) -> &str {
    let stem = file_name.strip_suffix(".wav").unwrap_or(file_name);
    stem.split_once("_nohash_").map_or(stem, |(s, _)| s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub vocab: SubtaskVocabulary,
    pub entries: Vec<ManifestEntry>,
}

fn read_list(root: &Path, name: &str) -> Result<HashSet<String>> {
    let path = root.join(name);
    let text = fs::read_to_string(&path).map_err(|e| KwsError::Dataset { path: path.clone(), msg: e.to_string() })?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn sorted_dir(path: &Path) -> Result<Vec<fs::DirEntry>> {
    let rd = fs::read_dir(path).map_err(|e| KwsError::io(path, e))?;
    let mut v = rd.collect::<std::io::Result<Vec<_>>>().map_err(|e| KwsError::io(path, e))?;
    v.sort_by_key(|e| e.file_name());
    Ok(v)
}

/// Indexes an extracted dataset. Splits come from the shipped validation
/// and testing lists; everything else is training data.
pub fn build_manifest(root: &Path, subtask: Subtask) -> Result<DatasetManifest> {
    let validation = read_list(root, VALIDATION_LIST)?;
    let testing = read_list(root, TESTING_LIST)?;
    let vocab = SubtaskVocabulary::new(subtask);
    let mut entries = Vec::new();
    for dir in sorted_dir(root)? {
        let keyword = dir.file_name().to_string_lossy().into_owned();
        if keyword.starts_with('_') || !dir.path().is_dir() {
            continue;
        }
        let label = vocab.label_of(&keyword).ok_or_else(|| KwsError::Dataset {
            path: dir.path(),
            msg: format!("keyword {keyword:?} is not in the {subtask}-keyword vocabulary"),
        })?;
        let before = entries.len();
        for f in sorted_dir(&dir.path())? {
            let name = f.file_name().to_string_lossy().into_owned();
            if !name.ends_with(".wav") {
                continue;
            }
            let path = format!("{keyword}/{name}");
            let split = if testing.contains(&path) {
                Split::Test
            } else if validation.contains(&path) {
                Split::Validation
            } else {
                Split::Train
            };
            let speaker = speaker_of(&name).to_string();
            entries.push(ManifestEntry { path, keyword: keyword.clone(), label, speaker, split });
        }
        if entries.len() == before {
            return Err(KwsError::Dataset { path: dir.path(), msg: "keyword folder has no .wav files".into() });
        }
    }
    if entries.is_empty() {
        return Err(KwsError::Dataset { path: root.into(), msg: "no keyword folders found".into() });
    }
    let m = DatasetManifest { root: root.into(), vocab, entries };
    m.check_speakers()?;
    Ok(m)
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.vocab.num_classes()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.vocab.classes()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// Entries per keyword folder.
    pub fn keyword_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for e in &self.entries {
            *h.entry(e.keyword.clone()).or_default() += 1;
        }
        h
    }

    pub fn label_histogram(&self, split: Split) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for e in self.entries.iter().filter(|e| e.split == split) {
            h[e.label] += 1;
        }
        h
    }

    /// Fails if any speaker has recordings in more than one split.
    pub fn check_speakers(&self) -> Result<()> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for e in &self.entries {
            match seen.insert(&e.speaker, e.split) {
                Some(s) if s != e.split => {
                    return Err(KwsError::Dataset {
                        path: self.root.join(&e.path),
                        msg: format!("speaker {} appears in both {s} and {}", e.speaker, e.split),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Keeps at most `per_class` entries of every class, chosen at random
    /// under `seed`. Split assignments are untouched.
    pub fn subsample(&self, per_class: usize, seed: u64) -> DatasetManifest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes()];
        for (i, e) in self.entries.iter().enumerate() {
            by_label[e.label].push(i);
        }
        let mut keep = Vec::new();
        for mut idx in by_label {
            idx.shuffle(&mut rng);
            idx.truncate(per_class);
            keep.extend(idx);
        }
        keep.sort_unstable();
        DatasetManifest {
            root: self.root.clone(),
            vocab: self.vocab.clone(),
            entries: keep.into_iter().map(|i| self.entries[i].clone()).collect(),
        }
    }

    /// `path,label,split` with the class name as label.
    pub fn to_csv(&self) -> String {
        let names = self.class_names();
        let mut s = String::from("path,label,split\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.path, names[e.label], e.split));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| KwsError::io(path, e))
    }

    pub fn load_clip(&self, index: usize) -> Result<AudioClip> {
        let e = &self.entries[index];
        let path = self.root.join(&e.path);
        let bytes = fs::read(&path).map_err(|err| KwsError::io(&path, err))?;
        let clip = decode_wav(&bytes).map_err(|err| KwsError::Dataset { path: path.clone(), msg: err.to_string() })?;
        Ok(AudioClip { samples: fit_length(clip.samples, CLIP_SAMPLES), ..clip }.with_label(e.label))
    }

    /// The recordings under `_background_noise_`, or an empty bank when the
    /// folder is absent.
    pub fn noise_bank(&self) -> Result<NoiseBank> {
        load_noise_bank(&self.root)
    }
}

pub fn load_noise_bank(root: &Path) -> Result<NoiseBank> {
    let dir = root.join(NOISE_DIR);
    if !dir.is_dir() {
        return Ok(NoiseBank::default());
    }
    let mut clips = Vec::new();
    for f in sorted_dir(&dir)? {
        let path = f.path();
        if path.extension().is_some_and(|x| x == "wav") {
            let bytes = fs::read(&path).map_err(|e| KwsError::io(&path, e))?;
            let clip = decode_wav(&bytes).map_err(|e| KwsError::Dataset { path: path.clone(), msg: e.to_string() })?;
            if clip.samples.len() >= CLIP_SAMPLES {
                clips.push(clip.samples);
            } else {
                log::warn!("skipping {}: shorter than one second", path.display());
            }
        }
    }
    NoiseBank::new(clips)
}

/// A random one-second crop of a random noise recording at a random gain
/// in `[0, 1]`.
pub fn sample_silence<R: Rng + ?Sized>(bank: &NoiseBank, rng: &mut R) -> Result<AudioClip> {
    let seg = bank
        .segment(rng)
        .ok_or_else(|| KwsError::config("silence needs a non-empty background-noise bank"))?;
    let gain: f64 = rng.gen_range(0.0..=1.0);
    Ok(AudioClip::new(seg.iter().map(|v| v * gain).collect()))
}
