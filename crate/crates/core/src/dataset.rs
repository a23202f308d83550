//! Splits, host/donor pairing, and synthetic corpus generation.
//!
//! Every synthetic entry draws from its own RNG stream keyed by
//! `(global seed, entry index)`, so the output does not depend on how entries
//! are scheduled across workers.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::synth::{mixup_synthesize, synthesize, Provenance, SynthConfig, SyntheticSample};
use crate::volume::{normalize_sample, Sample};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SYNTHETIC_DIR: &str = "synthetic";
pub const THREADS_ENV: &str = "ASYMFORGE_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Real,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub id: String,
    pub kind: Kind,
    pub split: Split,
    /// Sample directory. Real entries are relative to `real_root`, synthetic
    /// entries to the manifest's own directory.
    pub dir: String,
    /// Whether the stored volumes are already z-scored.
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    /// Synthetic entries per real training entry.
    pub ratio: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_root: Option<String>,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn entries_of(&self, kind: Kind, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries
            .iter()
            .filter(move |e| e.kind == kind && e.split == split)
    }

    pub fn real_train_ids(&self) -> Vec<String> {
        self.entries_of(Kind::Real, Split::Train)
            .map(|e| e.id.clone())
            .collect()
    }

    pub fn synthetic_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == Kind::Synthetic).count()
    }

    /// Checks id uniqueness, leakage, and the synthetic-to-real ratio.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate id '{}'", e.id)));
            }
        }
        let train: HashSet<&str> = self
            .entries_of(Kind::Real, Split::Train)
            .map(|e| e.id.as_str())
            .collect();
        for e in self.entries.iter().filter(|e| e.kind == Kind::Synthetic) {
            let p = e
                .provenance
                .as_ref()
                .ok_or_else(|| Error::InvalidManifest(format!("synthetic '{}' has no provenance", e.id)))?;
            for src in [&p.host, &p.donor] {
                if !train.contains(src.as_str()) {
                    return Err(Error::InvalidManifest(format!(
                        "synthetic '{}' references '{}', which is not a real training sample",
                        e.id, src
                    )));
                }
            }
        }
        let n_syn = self.synthetic_count();
        if n_syn > 0 && n_syn != self.ratio as usize * train.len() {
            return Err(Error::InvalidManifest(format!(
                "{n_syn} synthetic entries for {} real training entries at ratio {}",
                train.len(),
                self.ratio
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Absolute-or-relative location of an entry's sample directory.
    pub fn resolve(&self, entry: &Entry, manifest_dir: &Path) -> PathBuf {
        match (entry.kind, &self.real_root) {
            (Kind::Real, Some(root)) => Path::new(root).join(&entry.dir),
            _ => manifest_dir.join(&entry.dir),
        }
    }

    /// Loads an entry and z-scores it unless it is stored normalized.
    pub fn load_entry(&self, entry: &Entry, manifest_dir: &Path) -> Result<Sample> {
        let mut s = io::load_labelled_dir(&self.resolve(entry, manifest_dir))?;
        s.id = entry.id.clone();
        if !entry.normalized {
            s.image = normalize_sample(&s.image)?;
        }
        Ok(s)
    }

    pub fn load_split(&self, kind: Kind, split: Split, manifest_dir: &Path) -> Result<Vec<Sample>> {
        self.entries_of(kind, split)
            .map(|e| self.load_entry(e, manifest_dir))
            .collect()
    }
}

/// Seeded partition of `ids` into train/val/test of the requested sizes.
/// Real entries point at `<real_root>/<id>`.
pub fn make_splits(ids: &[String], counts: (usize, usize, usize), seed: u64) -> Result<Manifest> {
    let (n_train, n_val, n_test) = counts;
    let requested = n_train + n_val + n_test;
    if requested > ids.len() {
        return Err(Error::InsufficientSamples {
            requested,
            available: ids.len(),
        });
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut entries = Vec::with_capacity(requested);
    let bounds = [(Split::Train, 0, n_train), (Split::Val, n_train, n_train + n_val), (Split::Test, n_train + n_val, requested)];
    for (split, lo, hi) in bounds {
        let mut chosen: Vec<&String> = order[lo..hi].iter().map(|&i| &ids[i]).collect();
        chosen.sort();
        entries.extend(chosen.into_iter().map(|id| Entry {
            id: id.clone(),
            kind: Kind::Real,
            split,
            dir: id.clone(),
            normalized: false,
            provenance: None,
        }));
    }
    let m = Manifest {
        seed,
        ratio: 0,
        real_root: None,
        entries,
    };
    m.validate()?;
    Ok(m)
}

fn draw_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    let host = rng.random_range(0..n);
    let mut donor = rng.random_range(0..n - 1);
    if donor >= host {
        donor += 1;
    }
    (host, donor)
}

/// Uniform ordered pairs with `host != donor`, drawn with replacement.
pub fn sample_pairs(train_ids: &[String], n_pairs: usize, seed: u64) -> Result<Vec<(String, String)>> {
    if train_ids.len() < 2 {
        return Err(Error::TooFewSamples(train_ids.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_pairs)
        .map(|_| {
            let (h, d) = draw_pair(train_ids.len(), &mut rng);
            (train_ids[h].clone(), train_ids[d].clone())
        })
        .collect())
}

/// Independent RNG stream for entry `index`.
pub fn entry_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Caps a requested worker count by `ASYMFORGE_THREADS` when set.
pub fn effective_workers(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let n = requested.max(1);
    cap.map_or(n, |c| n.min(c))
}

pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(effective_workers(workers))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum CorpusMethod {
    Transplant,
    Mixup { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusOptions {
    pub ratio: u32,
    pub workers: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    pub method: CorpusMethod,
}

impl CorpusOptions {
    pub fn new(ratio: u32, workers: usize, seed: u64) -> Self {
        CorpusOptions {
            ratio,
            workers,
            seed,
            synth: SynthConfig::default(),
            method: CorpusMethod::Transplant,
        }
    }
}

fn check_ratio(ratio: u32) -> Result<()> {
    if ratio == 0 {
        return Err(Error::InvalidConfig("ratio must be at least 1".into()));
    }
    if ratio > 8 {
        warn!("ratio={ratio} exceeds 8; gains from more synthetic data are expected to saturate");
    }
    Ok(())
}

fn synth_one(host: &Sample, donor: &Sample, opts: &CorpusOptions, index: u64) -> Result<SyntheticSample> {
    let mut rng = entry_rng(opts.seed, index);
    match opts.method {
        CorpusMethod::Transplant => synthesize(host, donor, &opts.synth, opts.seed, &mut rng),
        CorpusMethod::Mixup { alpha } => mixup_synthesize(host, donor, alpha, opts.seed, &mut rng),
    }
}

/// Synthesizes `ratio × real.len()` samples from in-memory, normalized real
/// samples. Output order is by entry index.
pub fn generate_in_memory(real: &[Sample], opts: &CorpusOptions) -> Result<Vec<SyntheticSample>> {
    check_ratio(opts.ratio)?;
    let ids: Vec<String> = real.iter().map(|s| s.id.clone()).collect();
    let n = opts.ratio as usize * real.len();
    let pairs = pair_indices(ids.len(), n, opts.seed)?;
    let pool = worker_pool(opts.workers)?;
    pool.install(|| {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, &(h, d))| synth_one(&real[h], &real[d], opts, i as u64))
            .collect()
    })
}

fn pair_indices(n_ids: usize, n_pairs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n_ids < 2 {
        return Err(Error::TooFewSamples(n_ids));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_pairs).map(|_| draw_pair(n_ids, &mut rng)).collect())
}

#[derive(Clone, Debug)]
pub struct CorpusReport {
    pub manifest: Manifest,
    /// `(entry id, error)` for entries that were skipped.
    pub failures: Vec<(String, String)>,
}

/// Writes `ratio × (#real train)` synthetic samples under
/// `<out_dir>/synthetic/` and returns the extended manifest. Entries that fail
/// are reported and left out; the manifest ratio then no longer validates and
/// callers are expected to exit nonzero.
pub fn generate_corpus(manifest: &Manifest, manifest_dir: &Path, out_dir: &Path, opts: &CorpusOptions) -> Result<CorpusReport> {
    check_ratio(opts.ratio)?;
    let train: Vec<&Entry> = manifest.entries_of(Kind::Real, Split::Train).collect();
    let ids: Vec<String> = train.iter().map(|e| e.id.clone()).collect();
    let n = opts.ratio as usize * train.len();
    let pairs = sample_pairs(&ids, n, opts.seed)?;
    let index_of = |id: &str| ids.iter().position(|x| x == id).expect("pair ids come from train");
    let pool = worker_pool(opts.workers)?;
    info!(
        "generating {n} synthetic samples from {} real training samples with {} workers",
        train.len(),
        pool.current_num_threads()
    );

    let results: Vec<(usize, Result<Entry>)> = pool.install(|| {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, (h, d))| {
                let id = format!("syn_{i:05}");
                let rel = format!("{SYNTHETIC_DIR}/{id}");
                let run = || -> Result<Entry> {
                    let host = manifest.load_entry(train[index_of(h)], manifest_dir)?;
                    let donor = manifest.load_entry(train[index_of(d)], manifest_dir)?;
                    let s = synth_one(&host, &donor, opts, i as u64)?;
                    io::save_sample(&out_dir.join(&rel), &s.image, Some(&s.labels))?;
                    Ok(Entry {
                        id: id.clone(),
                        kind: Kind::Synthetic,
                        split: Split::Train,
                        dir: rel.clone(),
                        normalized: true,
                        provenance: Some(s.provenance),
                    })
                };
                (i, run())
            })
            .collect()
    });

    let mut out = manifest.clone();
    let replaced = out.synthetic_count();
    if replaced > 0 {
        warn!("replacing {replaced} existing synthetic entries");
        out.entries.retain(|e| e.kind != Kind::Synthetic);
    }
    if out.real_root.is_none() {
        out.real_root = Some(manifest_dir.to_string_lossy().into_owned());
    }
    out.ratio = opts.ratio;
    let mut failures = Vec::new();
    for (i, r) in results {
        match r {
            Ok(e) => out.entries.push(e),
            Err(e) => {
                warn!("entry syn_{i:05} failed: {e}");
                failures.push((format!("syn_{i:05}"), e.to_string()));
            }
        }
    }
    Ok(CorpusReport {
        manifest: out,
        failures,
    })
}
