//! Eye records, the JSONL dataset manifest, and subject-exclusive stratified splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
    Unlabeled,
}

impl Label {
    /// Class index used by classifier heads: normal = 0, abnormal = 1.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Normal => Some(0),
            Label::Abnormal => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn from_class_index(i: usize) -> Label {
        if i == 0 {
            Label::Normal
        } else {
            Label::Abnormal
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unassigned,
}

macro_rules! string_enum {
    ($ty:ty { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(<$ty>::$variant => $s),+ })
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok(<$ty>::$variant),)+
                    other => Err(format!("unknown {} `{}`", stringify!($ty).to_lowercase(), other)),
                }
            }
        }
    };
}

string_enum!(Side { Left => "left", Right => "right" });
string_enum!(Label { Normal => "normal", Abnormal => "abnormal", Unlabeled => "unlabeled" });
string_enum!(Split { Train => "train", Validation => "validation", Test => "test", Unassigned => "unassigned" });

/// One eye image with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeRecord {
    pub id: String,
    pub subject_id: String,
    pub side: Side,
    pub image: RgbImage,
    pub label: Label,
    pub split: Split,
    /// Set once the left-eye mirroring convention has been applied.
    pub mirrored: bool,
}

/// Horizontally flips every left-eye image and marks it mirrored. Right eyes
/// pass through untouched. Pixel data flips on every call; the flag is a
/// boolean, so it stays set after repeated application.
pub fn mirror_left_eyes(records: Vec<EyeRecord>) -> Vec<EyeRecord> {
    records
        .into_iter()
        .map(|mut r| {
            if r.side == Side::Left {
                r.image = r.image.flip_horizontal();
                r.mirrored = true;
            }
            r
        })
        .collect()
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub subject_id: String,
    pub path: PathBuf,
    pub side: Side,
    pub label: Label,
    pub split: Split,
}

/// Validated dataset description with label and split tallies.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
    pub label_counts: BTreeMap<Label, usize>,
    pub split_counts: BTreeMap<Split, usize>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id `{}`", e.id)));
            }
        }
        let mut m = Self {
            entries,
            root: root.into(),
            label_counts: BTreeMap::new(),
            split_counts: BTreeMap::new(),
        };
        m.recount();
        Ok(m)
    }

    fn recount(&mut self) {
        self.label_counts.clear();
        self.split_counts.clear();
        for e in &self.entries {
            *self.label_counts.entry(e.label).or_default() += 1;
            *self.split_counts.entry(e.split).or_default() += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label, split: Split) -> usize {
        self.entries.iter().filter(|e| e.label == label && e.split == split).count()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Loads the image for `entry` into an [`EyeRecord`] (not yet mirrored).
    pub fn load_record(&self, entry: &ManifestEntry) -> Result<EyeRecord> {
        Ok(EyeRecord {
            id: entry.id.clone(),
            subject_id: entry.subject_id.clone(),
            side: entry.side,
            image: RgbImage::load(&self.resolve(entry))?,
            label: entry.label,
            split: entry.split,
            mirrored: false,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries always serialize"));
            out.push('\n');
        }
        out
    }

    /// Writes the manifest as JSONL. When `path` lives outside the manifest
    /// root, relative image paths are rewritten as absolute ones so the saved
    /// file still resolves.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let same_root = match (std::path::absolute(&dir), std::path::absolute(&self.root)) {
            (Ok(a), Ok(b)) => a == b,
            _ => dir == self.root,
        };
        let text = if same_root {
            self.to_jsonl()
        } else {
            let mut moved = self.clone();
            for e in &mut moved.entries {
                let p = self.resolve(e);
                e.path = std::path::absolute(&p).map_err(|err| Error::io(&p, err))?;
            }
            moved.to_jsonl()
        };
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Deserialize)]
struct RawEntry {
    id: String,
    subject_id: String,
    path: PathBuf,
    side: String,
    label: String,
    split: String,
}

/// Parses manifest JSONL text; blank lines are skipped. Does not touch the filesystem.
pub fn parse_manifest(text: &str, root: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: lineno, message };
        let raw: RawEntry = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        entries.push(ManifestEntry {
            side: raw.side.parse().map_err(parse_err)?,
            label: raw.label.parse().map_err(parse_err)?,
            split: raw.split.parse().map_err(parse_err)?,
            id: raw.id,
            subject_id: raw.subject_id,
            path: raw.path,
        });
    }
    DatasetManifest::new(entries, root)
}

/// Reads and validates a manifest file. Relative image paths resolve against the
/// manifest's directory and must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, root)?;
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| !manifest.resolve(e).is_file())
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Integrity(missing));
    }
    Ok(manifest)
}

/// Fractions for (train, validation, test).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.5,
            validation: 0.25,
            test: 0.25,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = Self { train, validation, test };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::config("split ratios must be finite and non-negative"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios must sum to 1, got {}",
                parts.iter().sum::<f64>()
            )));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

const SPLITS: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

/// Assigns every entry to train/validation/test.
///
/// Subjects are the unit of assignment, so both eyes of a child always share a
/// split. Subjects are grouped into strata by their sorted label multiset,
/// shuffled per stratum with a ChaCha8 stream seeded from `seed` and the stratum
/// key (after sorting by subject id), then dealt greedily to whichever split is
/// furthest behind its quota. For single-record subjects this keeps every
/// class within one record of its target count in every split.
pub fn split_dataset(manifest: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
    ratios.validate()?;
    if let Some(e) = manifest.entries.iter().find(|e| e.split != Split::Unassigned) {
        return Err(Error::config(format!(
            "entry `{}` already assigned to {}; splitting requires unassigned entries",
            e.id, e.split
        )));
    }

    let mut subjects: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        subjects.entry(e.subject_id.as_str()).or_default().push(i);
    }

    let mut strata: BTreeMap<Vec<Label>, Vec<&str>> = BTreeMap::new();
    for (subject, idx) in &subjects {
        let mut key: Vec<Label> = idx.iter().map(|&i| manifest.entries[i].label).collect();
        key.sort();
        strata.entry(key).or_default().push(subject);
    }

    let mut assigned: BTreeMap<Label, [usize; 3]> = BTreeMap::new();
    let mut dealt: BTreeMap<Label, usize> = BTreeMap::new();
    let fractions = ratios.as_array();
    let mut out = manifest.clone();

    for (key, mut members) in strata {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stratum_hash(&key));
        members.shuffle(&mut rng);
        for subject in members {
            let idx = &subjects[subject];
            let mut per_class: BTreeMap<Label, usize> = BTreeMap::new();
            for &i in idx {
                *per_class.entry(manifest.entries[i].label).or_default() += 1;
            }
            // Deficit each split would still have after taking this subject.
            let best = (0..3)
                .filter(|&s| fractions[s] > 0.0)
                .max_by(|&a, &b| {
                    let score = |s: usize| -> f64 {
                        per_class
                            .iter()
                            .map(|(c, &k)| {
                                let done = dealt.get(c).copied().unwrap_or(0) + k;
                                let have = assigned.get(c).map_or(0, |v| v[s]);
                                fractions[s] * done as f64 - have as f64
                            })
                            .sum()
                    };
                    score(a)
                        .partial_cmp(&score(b))
                        .unwrap_or(std::cmp::Ordering::Equal)
                        // ties go to the earlier split
                        .then(b.cmp(&a))
                })
                .expect("at least one ratio is positive");
            for (c, k) in per_class {
                assigned.entry(c).or_insert([0; 3])[best] += k;
                *dealt.entry(c).or_default() += k;
            }
            for &i in idx {
                out.entries[i].split = SPLITS[best];
            }
        }
    }
    out.recount();
    Ok(out)
}

fn stratum_hash(key: &[Label]) -> u64 {
    // FNV-1a over the label tags; stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for l in key {
        h ^= *l as u64 + 1;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
