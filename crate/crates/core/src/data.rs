//! Synthetic action-grammar episodes, their binary file format, corpus
//! manifests and the observation/anticipation windowing protocol.
//!
//! An episode is a run of action segments drawn from a Markov chain over
//! hidden states. Each state emits one action class, so two states may share
//! a label; with the identity emission this is a plain Markov chain over
//! classes. Frame features are the class prototype plus Gaussian noise.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::binio::{put_f64s, put_u32, to_u32, Reader};
use crate::error::{param_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Generative description of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GrammarSpec {
    pub n_classes: usize,
    /// Row-stochastic `[S, S]` matrix over hidden states.
    pub transition: Vec<Vec<f64>>,
    /// Distribution of the first state.
    pub initial: Vec<f64>,
    /// Class emitted by each state.
    pub state_class: Vec<usize>,
    /// Inclusive segment length range per state.
    pub duration: Vec<(usize, usize)>,
    /// Inclusive episode length range.
    pub n_frames: (usize, usize),
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// `[n_c, n_d]`.
    pub prototypes: Tensor,
}

const PROTOTYPE_SEED: u64 = 0x5eed_cafe;

fn prototypes(n_classes: usize, feature_dim: usize) -> Result<Tensor> {
    Tensor::randn(&[n_classes, feature_dim], &mut Rng::new(PROTOTYPE_SEED), 0.0, 1.0)
}

impl Default for GrammarSpec {
    fn default() -> Self {
        Self::branching(8, 16).expect("valid default grammar")
    }
}

impl GrammarSpec {
    /// Each class `c` is followed by `c+1` (p = 0.7) or `c+3` (p = 0.3)
    /// modulo `n_classes`; segments of 30–110 frames in episodes of 200–600
    /// frames, which gives roughly 3–10 segments per episode.
    pub fn branching(n_classes: usize, feature_dim: usize) -> Result<Self> {
        if n_classes < 2 || feature_dim == 0 {
            return param_err("a branching grammar needs at least two classes and one feature");
        }
        let n = n_classes;
        let transition = (0..n)
            .map(|c| {
                let mut row = vec![0.0; n];
                row[(c + 1) % n] += 0.7;
                row[(c + 3) % n] += 0.3;
                row
            })
            .collect();
        let spec = Self {
            n_classes: n,
            transition,
            initial: vec![1.0 / n as f64; n],
            state_class: (0..n).collect(),
            duration: vec![(30, 110); n],
            n_frames: (200, 600),
            feature_dim,
            feature_noise: 0.5,
            prototypes: prototypes(n, feature_dim)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A grammar in which the action after a shared middle step is decided
    /// by the first action of the episode.
    ///
    /// There are `n_recipes` recipes `r`: an opening class `r`, a middle
    /// class shared by all recipes, and a closing class `n_recipes + 1 + r`
    /// specific to the recipe; the episode then restarts with a random
    /// recipe. Observing the middle step alone does not tell which closing
    /// step comes next; the opening segment does.
    pub fn recipes(n_recipes: usize, feature_dim: usize) -> Result<Self> {
        if n_recipes < 2 || feature_dim == 0 {
            return param_err("a recipe grammar needs at least two recipes");
        }
        let n_classes = 2 * n_recipes + 1;
        let middle = n_recipes;
        // states: opening r, middle-of-r, closing r
        let n_states = 3 * n_recipes;
        let mut transition = vec![vec![0.0; n_states]; n_states];
        let mut state_class = vec![0; n_states];
        for r in 0..n_recipes {
            let (open, mid, close) = (3 * r, 3 * r + 1, 3 * r + 2);
            state_class[open] = r;
            state_class[mid] = middle;
            state_class[close] = middle + 1 + r;
            transition[open][mid] = 1.0;
            transition[mid][close] = 1.0;
            for r2 in 0..n_recipes {
                transition[close][3 * r2] = 1.0 / n_recipes as f64;
            }
        }
        let mut initial = vec![0.0; n_states];
        for r in 0..n_recipes {
            initial[3 * r] = 1.0 / n_recipes as f64;
        }
        let spec = Self {
            n_classes,
            transition,
            initial,
            state_class,
            duration: vec![(30, 110); n_states],
            n_frames: (200, 600),
            feature_dim,
            feature_noise: 0.5,
            prototypes: prototypes(n_classes, feature_dim)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_states(&self) -> usize {
        self.transition.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let s = self.n_states();
        if s == 0 || self.n_classes == 0 {
            return bad("grammar needs at least one state and one class".into());
        }
        let stochastic = |row: &[f64]| {
            row.iter().all(|p| p.is_finite() && *p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != s {
                return bad(format!("transition row {i} has {} entries, expected {s}", row.len()));
            }
            if !stochastic(row) {
                return bad(format!("transition row {i} is not a probability distribution"));
            }
        }
        if self.initial.len() != s || !stochastic(&self.initial) {
            return bad("initial distribution must have one probability per state".into());
        }
        if self.state_class.len() != s {
            return bad(format!("state_class has {} entries, expected {s}", self.state_class.len()));
        }
        if let Some(c) = self.state_class.iter().find(|c| **c >= self.n_classes) {
            return bad(format!("state emits class {c} but there are {} classes", self.n_classes));
        }
        if self.duration.len() != s {
            return bad(format!("duration has {} entries, expected {s}", self.duration.len()));
        }
        if let Some((lo, hi)) = self.duration.iter().find(|(lo, hi)| *lo < 1 || lo > hi) {
            return bad(format!("invalid duration range [{lo}, {hi}]"));
        }
        let (lo, hi) = self.n_frames;
        if lo < 1 || lo > hi {
            return bad(format!("invalid episode length range [{lo}, {hi}]"));
        }
        if self.feature_dim == 0 || self.feature_noise.is_nan() || self.feature_noise < 0.0 {
            return bad("feature_dim must be positive and feature_noise nonnegative".into());
        }
        if self.prototypes.shape() != [self.n_classes, self.feature_dim] {
            return bad(format!(
                "prototypes must be [{}, {}], got {:?}",
                self.n_classes,
                self.feature_dim,
                self.prototypes.shape()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub n_classes: usize,
    /// Per-frame action ids.
    pub labels: Vec<usize>,
    /// `[n_v, n_d]`.
    pub features: Tensor,
}

impl Episode {
    pub fn new(id: impl Into<String>, n_classes: usize, labels: Vec<usize>, features: Tensor) -> Result<Self> {
        if labels.is_empty() {
            return shape_err("episode has no frames");
        }
        if features.rank() != 2 || features.rows() != labels.len() {
            return shape_err(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            ));
        }
        if let Some(&l) = labels.iter().find(|l| **l >= n_classes) {
            return Err(Error::InvalidLabel { label: l, n_classes });
        }
        Ok(Self { id: id.into(), n_classes, labels, features })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Maximal runs of equal labels as `(class, start, length)`.
    pub fn segments(&self) -> Vec<(usize, usize, usize)> {
        let mut out: Vec<(usize, usize, usize)> = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            match out.last_mut() {
                Some((c, _, len)) if *c == l => *len += 1,
                _ => out.push((l, i, 1)),
            }
        }
        out
    }
}

/// Draw `count` episodes; episode `i` uses its own stream of `seed`, so any
/// prefix of a corpus is itself a valid corpus.
pub fn grammar_generate(spec: &GrammarSpec, count: usize, seed: u64) -> Result<Vec<Episode>> {
    spec.validate()?;
    let root = Rng::new(seed);
    (0..count)
        .map(|i| generate_one(spec, format!("ep{i:05}"), &mut root.split(i as u64)))
        .collect()
}

fn generate_one(spec: &GrammarSpec, id: String, rng: &mut Rng) -> Result<Episode> {
    let n_v = rng.int_inclusive(spec.n_frames.0, spec.n_frames.1);
    let mut labels = Vec::with_capacity(n_v);
    let mut state = rng.categorical(&spec.initial);
    while labels.len() < n_v {
        let (lo, hi) = spec.duration[state];
        let len = rng.int_inclusive(lo, hi).min(n_v - labels.len());
        labels.extend(std::iter::repeat_n(spec.state_class[state], len));
        state = rng.categorical(&spec.transition[state]);
    }
    let nd = spec.feature_dim;
    let mut feats = Vec::with_capacity(n_v * nd);
    for &l in &labels {
        for j in 0..nd {
            feats.push(spec.prototypes.data()[l * nd + j] + spec.feature_noise * rng.normal());
        }
    }
    Episode::new(id, spec.n_classes, labels, Tensor::from_vec(&[n_v, nd], feats)?)
}

const EPISODE_MAGIC: &[u8; 5] = b"MNTAE";
const EPISODE_VERSION: u32 = 1;

pub fn write_episode(w: &mut impl Write, e: &Episode) -> Result<()> {
    w.write_all(EPISODE_MAGIC)?;
    put_u32(w, EPISODE_VERSION)?;
    put_u32(w, to_u32(e.len(), "frame count")?)?;
    put_u32(w, to_u32(e.n_classes, "class count")?)?;
    put_u32(w, to_u32(e.features.cols(), "feature dim")?)?;
    let mut buf = Vec::with_capacity(4 * e.len());
    for &l in &e.labels {
        buf.extend_from_slice(&to_u32(l, "label")?.to_le_bytes());
    }
    w.write_all(&buf)?;
    put_f64s(w, e.features.data())?;
    Ok(())
}

pub fn read_episode(r: impl Read, id: impl Into<String>) -> Result<Episode> {
    let mut r = Reader::new(r);
    if &r.bytes(5, "magic")?[..] != EPISODE_MAGIC {
        return Err(Error::Format { offset: 0, msg: "not an episode file".into() });
    }
    let version = r.u32("version")?;
    if version != EPISODE_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let n_v = r.u32("frame count")? as usize;
    let n_c = r.u32("class count")? as usize;
    let n_d = r.u32("feature dim")? as usize;
    if n_v == 0 || n_d == 0 {
        return shape_err(format!("episode file declares {n_v} frames of dimension {n_d}"));
    }
    let mut labels = Vec::with_capacity(n_v);
    for _ in 0..n_v {
        let at = r.offset();
        let l = r.u32("label")? as usize;
        if l >= n_c {
            return Err(Error::Format { offset: at, msg: format!("label {l} out of range for {n_c} classes") });
        }
        labels.push(l);
    }
    let feats = r.f64s(n_v * n_d, "features")?;
    r.expect_end()?;
    Episode::new(id, n_c, labels, Tensor::from_vec(&[n_v, n_d], feats)?)
}

pub fn save_episode(path: impl AsRef<Path>, e: &Episode) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_episode(&mut w, e)?;
    w.flush()?;
    Ok(())
}

/// Load an episode; its id is the file stem.
pub fn load_episode(path: impl AsRef<Path>) -> Result<Episode> {
    let path = path.as_ref();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_episode(BufReader::new(File::open(path)?), id)
}

/// Observed prefix and the labels to reconstruct.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Observed frames `P`.
    pub observed_len: usize,
    /// Anticipated frames `F`.
    pub future_len: usize,
    /// `[P, n_d]`.
    pub observed: Tensor,
    /// Labels of the first `P + F` frames.
    pub target_labels: Vec<usize>,
}

/// `⌊r·n⌋`, forgiving the representation error of decimal ratios such as
/// `0.3·10`.
fn frames_of(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Observe `P = ⌊α·n_v⌋` frames and anticipate the next `F = ⌊β·n_v⌋`.
pub fn window(e: &Episode, alpha: f64, beta: f64) -> Result<Window> {
    if !(alpha > 0.0 && alpha < 1.0) || !(beta > 0.0 && beta <= 1.0) {
        return param_err(format!("ratios must satisfy 0 < α < 1, 0 < β ≤ 1; got α={alpha}, β={beta}"));
    }
    let n_v = e.len();
    let (p, f) = (frames_of(alpha, n_v), frames_of(beta, n_v));
    if p < 1 {
        return param_err(format!("α={alpha} observes no frame of a {n_v}-frame episode"));
    }
    if p + f > n_v {
        return param_err(format!("α={alpha}, β={beta} need {} frames, episode has {n_v}", p + f));
    }
    let nd = e.features.cols();
    let observed = Tensor::from_vec(&[p, nd], e.features.data()[..p * nd].to_vec())?;
    Ok(Window { observed_len: p, future_len: f, observed, target_labels: e.labels[..p + f].to_vec() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// One manifest line: episode path (relative to the manifest) and split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        writeln!(w, "{}\t{}", e.path.display(), e.split)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let file = BufReader::new(File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((p, split)) = line.split_once('\t') else {
            return param_err(format!("manifest line {}: expected `path<TAB>split`", i + 1));
        };
        let split = split.trim().parse().map_err(|e: String| Error::InvalidParameter(format!("manifest line {}: {e}", i + 1)))?;
        out.push(ManifestEntry { path: PathBuf::from(p), split });
    }
    Ok(out)
}

/// Load every episode of `split` listed in the manifest at `path`.
pub fn load_split(path: impl AsRef<Path>, split: Split) -> Result<Vec<Episode>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| load_episode(base.join(e.path)))
        .collect()
}

/// Generate a corpus into `dir`: one file per episode under a directory per
/// split and a `manifest.tsv`. Splits draw from disjoint streams of `seed`.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    spec: &GrammarSpec,
    counts: [(Split, usize); 3],
    seed: u64,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut entries = Vec::new();
    for (k, (split, n)) in counts.into_iter().enumerate() {
        let sub = dir.join(split.to_string());
        fs::create_dir_all(&sub)?;
        let split_seed = Rng::new(seed).split(k as u64).next_u64();
        for e in grammar_generate(spec, n, split_seed)? {
            let rel = PathBuf::from(split.to_string()).join(format!("{}.mntae", e.id));
            save_episode(dir.join(&rel), &e)?;
            entries.push(ManifestEntry { path: rel, split });
        }
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(n: usize) -> Episode {
        let labels = (0..n).map(|i| i % 3).collect();
        Episode::new("e", 3, labels, Tensor::zeros(&[n, 2]).unwrap()).unwrap()
    }

    #[test]
    fn window_examples() {
        let w = window(&episode(100), 0.2, 0.3).unwrap();
        assert_eq!((w.observed_len, w.future_len), (20, 30));
        assert_eq!(w.target_labels.len(), 50);
        let w = window(&episode(100), 0.3, 0.5).unwrap();
        assert_eq!((w.observed_len, w.future_len), (30, 50));
        let w = window(&episode(10), 0.2, 0.1).unwrap();
        assert_eq!((w.observed_len, w.future_len), (2, 1));
        assert_eq!(w.observed.shape(), &[2, 2]);
    }

    #[test]
    fn window_rejects_bad_ratios() {
        let e = episode(10);
        assert!(window(&e, 0.0, 0.1).is_err());
        assert!(window(&e, 1.0, 0.1).is_err());
        assert!(window(&e, 0.5, 0.0).is_err());
        assert!(window(&e, 0.05, 0.1).is_err());
        assert!(window(&e, 0.6, 0.5).is_err());
    }

    #[test]
    fn floor_survives_decimal_ratios() {
        for n in 1..2000 {
            for (r, num) in [(0.1, 1), (0.2, 2), (0.3, 3), (0.5, 5)] {
                assert_eq!(frames_of(r, n), n * num / 10, "r={r} n={n}");
            }
        }
    }

    #[test]
    fn segments_cover_episode() {
        let e = Episode::new("e", 3, vec![0, 0, 1, 1, 1, 0, 2], Tensor::zeros(&[7, 1]).unwrap()).unwrap();
        assert_eq!(e.segments(), vec![(0, 0, 2), (1, 2, 3), (0, 5, 1), (2, 6, 1)]);
    }

    #[test]
    fn invalid_specs() {
        let mut s = GrammarSpec::default();
        s.transition[2][3] += 0.1;
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        let mut s = GrammarSpec::default();
        s.duration[0] = (0, 4);
        assert!(s.validate().is_err());
        let mut s = GrammarSpec::default();
        s.state_class[1] = 8;
        assert!(s.validate().is_err());
        assert!(GrammarSpec::recipes(1, 16).is_err());
        assert!(GrammarSpec::branching(1, 16).is_err());
    }

    #[test]
    fn episode_rejects_mismatch() {
        assert!(Episode::new("e", 2, vec![0, 1], Tensor::zeros(&[3, 1]).unwrap()).is_err());
        assert!(Episode::new("e", 2, vec![0, 2], Tensor::zeros(&[2, 1]).unwrap()).is_err());
    }
}
