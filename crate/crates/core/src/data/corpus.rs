use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::edit::{apply_edit, sample_edit, EditedSample, Family};
use super::scene::{check_size, generate_scene};
use crate::error::{invalid, Error, Result};
use crate::image::{BinaryMask, RgbImage};

pub const TRAIN: &str = "train";
pub const SEEN_TEST: &str = "seen_test";
pub const UNSEEN_TEST: &str = "unseen_test";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train: usize,
    pub seen: usize,
    pub unseen: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: 32,
            seen: 16,
            unseen: 16,
            size: 64,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    /// `(split, family, first sample seed, count)`; seed ranges never overlap.
    pub fn split_plan(&self) -> [(&'static str, Family, u64, usize); 3] {
        let base = self.seed.wrapping_mul(1_000_003) << 20;
        let seen_start = base + self.train as u64;
        let unseen_start = seen_start + self.seen as u64;
        [
            (TRAIN, Family::A, base, self.train),
            (SEEN_TEST, Family::A, seen_start, self.seen),
            (UNSEEN_TEST, Family::B, unseen_start, self.unseen),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub instruction: String,
    pub family: Family,
    pub seed: u64,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub splits: BTreeMap<String, Vec<SampleRecord>>,
    pub vocab_seed: u64,
}

impl CorpusManifest {
    pub fn split(&self, name: &str) -> Result<&[SampleRecord]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingSplit(name.to_string()))
    }

    pub fn instructions(&self) -> impl Iterator<Item = &str> {
        self.splits.values().flatten().map(|r| r.instruction.as_str())
    }

    pub fn records(&self) -> impl Iterator<Item = &SampleRecord> {
        self.splits.values().flatten()
    }

    /// JSONL rendering: one record per line, splits in `train`, `seen_test`,
    /// `unseen_test` order, then any others alphabetically.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for name in self.ordered_split_names() {
            for r in &self.splits[name] {
                out.push_str(&serde_json::to_string(r)?);
                out.push('\n');
            }
        }
        Ok(out)
    }

    fn ordered_split_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = [TRAIN, SEEN_TEST, UNSEEN_TEST]
            .into_iter()
            .filter(|n| self.splits.contains_key(*n))
            .collect();
        names.extend(
            self.splits
                .keys()
                .map(String::as_str)
                .filter(|n| ![TRAIN, SEEN_TEST, UNSEEN_TEST].contains(n)),
        );
        names
    }

    pub fn from_jsonl(text: &str, vocab_seed: u64) -> Result<Self> {
        let mut splits: BTreeMap<String, Vec<SampleRecord>> = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: SampleRecord = serde_json::from_str(line)?;
            splits.entry(r.split.clone()).or_default().push(r);
        }
        Ok(Self { splits, vocab_seed })
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?.as_bytes())))
    }
}

/// Samples generated in memory, in split order.
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub samples: BTreeMap<String, Vec<EditedSample>>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[EditedSample]> {
        self.samples
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingSplit(name.to_string()))
    }
}

/// Scene + edit for one seed; a seed whose edits all fail falls through to
/// derived seeds until one succeeds.
pub fn generate_sample(id: &str, seed: u64, size: usize, family: Family) -> Result<EditedSample> {
    let mut last = None;
    for attempt in 0..16u64 {
        let s = seed.wrapping_add(attempt << 48);
        let scene = generate_scene(s, size, size)?;
        let edit = match sample_edit(&scene, family, s) {
            Ok(e) => e,
            Err(e) => {
                last = Some(e);
                continue;
            }
        };
        match apply_edit(&scene, &edit, s) {
            Ok(mut sample) => {
                sample.id = id.to_string();
                sample.seed = seed;
                return Ok(sample);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| invalid!("could not generate sample {id}")))
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    check_size(config.size, config.size)?;
    if config.train == 0 || config.seen == 0 || config.unseen == 0 {
        return Err(invalid!("every split needs at least one sample"));
    }
    let mut splits = BTreeMap::new();
    let mut samples = BTreeMap::new();
    for (split, family, start, count) in config.split_plan() {
        let mut records = Vec::with_capacity(count);
        let mut generated = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{split}-{i:05}");
            let seed = start + i as u64;
            let sample = generate_sample(&id, seed, config.size, family)?;
            records.push(SampleRecord {
                id: id.clone(),
                image: format!("images/{id}.png"),
                mask: format!("masks/{id}.png"),
                instruction: sample.instruction.clone(),
                family,
                seed,
                split: split.to_string(),
            });
            generated.push(sample);
        }
        splits.insert(split.to_string(), records);
        samples.insert(split.to_string(), generated);
    }
    Ok(Corpus {
        manifest: CorpusManifest {
            splits,
            vocab_seed: config.seed,
        },
        samples,
    })
}

/// Generates the corpus and writes `images/`, `masks/`, `manifest.jsonl` and
/// `corpus.json` under `root`.
pub fn build_corpus(config: &CorpusConfig, root: &Path) -> Result<CorpusManifest> {
    let corpus = generate_corpus(config)?;
    write_corpus(&corpus, config, root)?;
    Ok(corpus.manifest)
}

pub fn write_corpus(corpus: &Corpus, config: &CorpusConfig, root: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for split in corpus.samples.values() {
        for s in split {
            s.image.save_png(&root.join("images").join(format!("{}.png", s.id)))?;
            s.mask.save_png(&root.join("masks").join(format!("{}.png", s.id)))?;
        }
    }
    let path = root.join("manifest.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(corpus.manifest.to_jsonl()?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    let path = root.join("corpus.json");
    fs::write(&path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// A corpus directory on disk.
#[derive(Debug, Clone)]
pub struct CorpusDir {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

impl CorpusDir {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.jsonl");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let vocab_seed = match fs::read_to_string(root.join("corpus.json")) {
            Ok(c) => serde_json::from_str::<CorpusConfig>(&c)?.seed,
            Err(_) => 0,
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest: CorpusManifest::from_jsonl(&text, vocab_seed)?,
        })
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<EditedSample>> {
        self.manifest
            .split(name)?
            .iter()
            .map(|r| {
                Ok(EditedSample {
                    id: r.id.clone(),
                    image: RgbImage::load_png(&self.root.join(&r.image))?,
                    mask: BinaryMask::load_png(&self.root.join(&r.mask))?,
                    instruction: r.instruction.clone(),
                    family: r.family,
                    seed: r.seed,
                    source: None,
                })
            })
            .collect()
    }

    /// Hash over the manifest and every referenced file.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.manifest.to_jsonl()?.as_bytes());
        for r in self.manifest.records() {
            for rel in [&r.image, &r.mask] {
                let p = self.root.join(rel);
                h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Hash of in-memory samples, matching what [`CorpusDir::digest`] would see
/// modulo PNG encoding; used when training directly from a generated corpus.
pub fn samples_digest<'a>(samples: impl IntoIterator<Item = &'a EditedSample>) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        h.update(s.instruction.as_bytes());
        h.update(s.image.to_rgb8());
        h.update(s.mask.0.as_slice().expect("standard layout"));
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_respect_family_and_seed_hygiene() {
        let cfg = CorpusConfig {
            train: 6,
            seen: 3,
            unseen: 4,
            size: 32,
            seed: 7,
        };
        let c = generate_corpus(&cfg).unwrap();
        let m = &c.manifest;
        assert!(m.split(TRAIN).unwrap().iter().all(|r| r.family == Family::A));
        assert!(m.split(SEEN_TEST).unwrap().iter().all(|r| r.family == Family::A));
        assert!(m.split(UNSEEN_TEST).unwrap().iter().all(|r| r.family == Family::B));
        let mut seeds: Vec<u64> = m.records().map(|r| r.seed).collect();
        let n = seeds.len();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), n);
    }

    #[test]
    fn zero_count_is_rejected() {
        let cfg = CorpusConfig {
            train: 0,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn unwritable_root_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let cfg = CorpusConfig {
            train: 1,
            seen: 1,
            unseen: 1,
            size: 32,
            seed: 1,
        };
        assert!(matches!(build_corpus(&cfg, &blocker.join("sub")), Err(Error::Io { .. })));
    }
}
