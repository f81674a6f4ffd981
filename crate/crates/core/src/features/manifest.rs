//! Dataset manifests: `path,label[|label...][,split]` rows with `#` comments.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::cache::read_features;
use crate::features::mfcc::{FeatureMatrix, MfccExtractor};
use crate::features::wav::{load_wav, write_wav, AudioClip};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// As written in the manifest; relative paths resolve against the root.
    pub path: PathBuf,
    pub labels: BTreeSet<String>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Sorted union of every entry's labels.
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InsufficientData("manifest has no entries".into()));
        }
        let class_names =
            entries.iter().flat_map(|e| e.labels.iter().cloned()).collect::<BTreeSet<_>>().into_iter().collect();
        Ok(Self { root: root.into(), entries, class_names })
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |why: &str| Error::Parse(format!("manifest line {}: {why}", n + 1));
            if !(2..=3).contains(&fields.len()) {
                return Err(bad("expected `path,labels[,split]`"));
            }
            if fields[0].is_empty() {
                return Err(bad("empty path"));
            }
            let labels: BTreeSet<String> = fields[1].split('|').map(|l| l.trim().to_string()).collect();
            if labels.iter().any(String::is_empty) {
                return Err(bad("empty label"));
            }
            let split = fields.get(2).map(|s| s.parse()).transpose()?;
            entries.push(ManifestEntry { path: fields[0].into(), labels, split });
        }
        Self::new(root, entries)
    }

    /// Reads a manifest; relative clip paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let labels: Vec<&str> = e.labels.iter().map(String::as_str).collect();
            out.push_str(&format!("{},{}", e.path.display(), labels.join("|")));
            if let Some(s) = e.split {
                out.push_str(&format!(",{s}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.binary_search_by(|c| c.as_str().cmp(name)).ok()
    }

    /// Entries of one split; the class list is kept from the full manifest.
    pub fn subset(&self, split: Split) -> Result<Self> {
        let entries: Vec<_> = self.entries.iter().filter(|e| e.split == Some(split)).cloned().collect();
        if entries.is_empty() {
            return Err(Error::InsufficientData(format!("no {split} entries in manifest")));
        }
        Ok(Self { root: self.root.clone(), entries, class_names: self.class_names.clone() })
    }

    pub fn is_multi_label(&self) -> bool {
        self.entries.iter().any(|e| e.labels.len() > 1)
    }

    /// Label indices per entry, in class order.
    pub fn label_indices(&self) -> Vec<Vec<usize>> {
        self.entries.iter().map(|e| e.labels.iter().filter_map(|l| self.class_index(l)).collect()).collect()
    }

    pub fn load_clip<T: Scalar>(&self, i: usize) -> Result<AudioClip<T>> {
        load_wav(self.resolve(&self.entries[i]))
    }

    /// Features of every entry, in manifest order. Entries ending in
    /// `.feat` are read as feature caches; anything else is decoded as audio.
    pub fn materialize<T: Scalar>(&self, extractor: &MfccExtractor<T>) -> Result<Vec<FeatureMatrix<T>>> {
        (0..self.entries.len())
            .map(|i| {
                let path = self.resolve(&self.entries[i]);
                if path.extension().is_some_and(|e| e == "feat") {
                    read_features(&path)
                } else {
                    extractor.extract(&self.load_clip(i)?)
                }
            })
            .collect()
    }
}

/// Builds a multi-label corpus by concatenating pairs of clips from the same
/// split. Each source clip is the first half of exactly one pair; its partner
/// is drawn from the seeded RNG. Clips are written under `out_dir` together
/// with `manifest.csv`.
pub fn synth_multilabel(src: &DatasetManifest, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if src.entries.len() < 2 {
        return Err(Error::InsufficientData("need at least two clips to pair".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<(Option<Split>, Vec<usize>)> = Vec::new();
    for (i, e) in src.entries.iter().enumerate() {
        match groups.iter_mut().find(|(s, _)| *s == e.split) {
            Some((_, v)) => v.push(i),
            None => groups.push((e.split, vec![i])),
        }
    }
    let mut entries = Vec::new();
    for (split, members) in &groups {
        if members.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "split {} has fewer than two clips",
                split.map_or("unassigned", Split::as_str)
            )));
        }
        for &a in members {
            let b = *members.choose(&mut rng).expect("non-empty group");
            let first: AudioClip<f64> = src.load_clip(a)?;
            let second = src.load_clip::<f64>(b)?.resampled(first.sample_rate);
            let mut samples = first.samples;
            samples.extend(second.samples);
            let name = format!("mix_{:05}.wav", entries.len());
            write_wav(out_dir.join(&name), &AudioClip::new(samples, first.sample_rate)?)?;
            let labels = src.entries[a].labels.union(&src.entries[b].labels).cloned().collect();
            entries.push(ManifestEntry { path: name.into(), labels, split: *split });
        }
    }
    let manifest = DatasetManifest::new(out_dir, entries)?;
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
