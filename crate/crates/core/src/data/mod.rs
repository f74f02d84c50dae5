//! Dataset manifests, binary labelling, oversampling and stratified folds.

mod image;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use self::image::{decode_image, hflip, rotate, Augmenter, Normalization, Preprocess, RawImage};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("manifest header must be `path,label`, found `{0}`")]
    BadHeader(String),
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate path `{path}`")]
    DuplicatePath { line: usize, path: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("the {0} class has no samples")]
    EmptyClass(&'static str),
    #[error("k must be at least 2 for held-out folds, got {0}")]
    InvalidK(usize),
    #[error("the {class} class has {count} samples, fewer than k = {k}")]
    ClassSmallerThanK {
        class: &'static str,
        count: usize,
        k: usize,
    },
    #[error("fold plan: {0}")]
    FoldPlan(String),
    #[error("{path}: unsupported image format (PNG and JPEG are accepted)")]
    UnsupportedFormat { path: PathBuf },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("image has zero extent ({height}×{width})")]
    ZeroExtent { height: usize, width: usize },
    #[error("expected 3 colour channels, got {0}")]
    Channels(usize),
    #[error("image buffer holds {actual} bytes, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// The twelve image classes of the skin-condition corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkinClass {
    BowensDisease,
    Chickenpox,
    ChiggerBites,
    Dermatofibroma,
    Eczema,
    Enterovirus,
    Keratosis,
    Measles,
    NormalSkin,
    Psoriasis,
    Ringworm,
    Scabies,
}

impl SkinClass {
    pub const ALL: [SkinClass; 12] = [
        SkinClass::BowensDisease,
        SkinClass::Chickenpox,
        SkinClass::ChiggerBites,
        SkinClass::Dermatofibroma,
        SkinClass::Eczema,
        SkinClass::Enterovirus,
        SkinClass::Keratosis,
        SkinClass::Measles,
        SkinClass::NormalSkin,
        SkinClass::Psoriasis,
        SkinClass::Ringworm,
        SkinClass::Scabies,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SkinClass::BowensDisease => "bowens_disease",
            SkinClass::Chickenpox => "chickenpox",
            SkinClass::ChiggerBites => "chigger_bites",
            SkinClass::Dermatofibroma => "dermatofibroma",
            SkinClass::Eczema => "eczema",
            SkinClass::Enterovirus => "enterovirus",
            SkinClass::Keratosis => "keratosis",
            SkinClass::Measles => "measles",
            SkinClass::NormalSkin => "normal_skin",
            SkinClass::Psoriasis => "psoriasis",
            SkinClass::Ringworm => "ringworm",
            SkinClass::Scabies => "scabies",
        }
    }

    /// Measles is the positive class of the screening task.
    pub fn is_positive(self) -> bool {
        self == SkinClass::Measles
    }
}

impl fmt::Display for SkinClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SkinClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SkinClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Row index in the manifest.
    pub id: usize,
    pub path: PathBuf,
    pub label: SkinClass,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.label.is_positive()
    }

    /// Class index used as the training target: 1 = positive, 0 = negative.
    pub fn target(&self) -> usize {
        usize::from(self.is_positive())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    samples: Vec<Sample>,
    counts: BTreeMap<SkinClass, usize>,
    /// Directory relative image paths are resolved against.
    base_dir: PathBuf,
}

impl DatasetManifest {
    /// Builds a manifest from samples; ids are reassigned to row order.
    pub fn from_samples(
        samples: impl IntoIterator<Item = (PathBuf, SkinClass)>,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (i, (path, label)) in samples.into_iter().enumerate() {
            if !seen.insert(path.clone()) {
                return Err(DataError::DuplicatePath {
                    line: i + 2,
                    path: path.display().to_string(),
                });
            }
            out.push(Sample { id: i, path, label });
        }
        if out.is_empty() {
            return Err(DataError::EmptyManifest);
        }
        let mut counts = BTreeMap::new();
        for s in &out {
            *counts.entry(s.label).or_insert(0) += 1;
        }
        Ok(DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            samples: out,
            counts,
            base_dir: base_dir.into(),
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, class: SkinClass) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<SkinClass, usize> {
        &self.counts
    }

    pub fn positives(&self) -> usize {
        self.count(SkinClass::Measles)
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn binary_labels(&self) -> Vec<bool> {
        self.samples.iter().map(Sample::is_positive).collect()
    }

    pub fn resolve(&self, sample: &Sample) -> PathBuf {
        if sample.path.is_absolute() {
            sample.path.clone()
        } else {
            self.base_dir.join(&sample.path)
        }
    }
}

/// Reads a `path,label` CSV manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<DatasetManifest> {
    if text.trim().is_empty() {
        return Err(DataError::EmptyManifest);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| DataError::Malformed {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.len() != 2 || &header[0] != "path" || &header[1] != "label" {
        return Err(DataError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| DataError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let (p, l) = (&record[0], &record[1]);
        if p.is_empty() {
            return Err(DataError::Malformed {
                line,
                message: "empty path".into(),
            });
        }
        let label = l
            .parse::<SkinClass>()
            .map_err(|label| DataError::UnknownLabel { line, label })?;
        rows.push((PathBuf::from(p), label));
    }
    DatasetManifest::from_samples(rows, base_dir)
}

/// Serializes a manifest back to its CSV form.
pub fn manifest_to_csv(manifest: &DatasetManifest) -> String {
    let mut out = String::from("path,label\n");
    for s in manifest.samples() {
        out.push_str(&format!("{},{}\n", s.path.display(), s.label));
    }
    out
}

/// Minority-class duplication result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Oversampled {
    /// Original indices followed by the duplicates.
    pub indices: Vec<usize>,
    pub duplicated: usize,
    pub warning: Option<String>,
}

/// Duplicates minority-class entries of `indices` round-robin until both
/// classes have the same count. `labels` is indexed by sample id.
pub fn oversample_indices(indices: &[usize], labels: &[bool]) -> Result<Oversampled> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = indices.iter().partition(|&&i| labels[i]);
    if pos.is_empty() {
        return Err(DataError::EmptyClass("positive"));
    }
    if neg.is_empty() {
        return Err(DataError::EmptyClass("negative"));
    }
    let (minority, target) = if pos.len() < neg.len() {
        (&pos, neg.len())
    } else {
        (&neg, pos.len())
    };
    let needed = target - minority.len();
    let mut out = indices.to_vec();
    out.extend(minority.iter().cycle().take(needed));
    let warning = (needed > 0 && needed >= 10 * minority.len()).then(|| {
        format!(
            "oversampling repeats {} minority samples {:.0}× on average",
            minority.len(),
            target as f64 / minority.len() as f64
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(Oversampled {
        indices: out,
        duplicated: needed,
        warning,
    })
}

/// Balances the whole manifest; see [`oversample_indices`].
pub fn oversample(manifest: &DatasetManifest) -> Result<Oversampled> {
    let all: Vec<usize> = (0..manifest.len()).collect();
    oversample_indices(&all, &manifest.binary_labels())
}

/// A k-fold partition of sample ids; each fold is used once for validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn from_folds(folds: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        let k = folds.len();
        if k < 2 {
            return Err(DataError::InvalidK(k));
        }
        let mut seen = HashSet::new();
        for &i in folds.iter().flatten() {
            if !seen.insert(i) {
                return Err(DataError::FoldPlan(format!("sample {i} appears in two folds")));
            }
        }
        let mut folds = folds;
        folds.iter_mut().for_each(|f| f.sort_unstable());
        Ok(FoldPlan { k, seed, folds })
    }

    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn sample_count(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    /// `(sample_id, fold)` pairs ordered by sample id.
    pub fn assignments(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .folds
            .iter()
            .enumerate()
            .flat_map(|(f, ids)| ids.iter().map(move |&i| (i, f)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,fold\n");
        for (id, fold) in self.assignments() {
            out.push_str(&format!("{id},{fold}\n"));
        }
        out
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| DataError::FoldPlan(e.to_string()))?
            .clone();
        if header.iter().collect::<Vec<_>>() != ["sample_id", "fold"] {
            return Err(DataError::FoldPlan("header must be `sample_id,fold`".into()));
        }
        let mut folds: Vec<Vec<usize>> = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| DataError::FoldPlan(e.to_string()))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| DataError::FoldPlan(format!("line {}: `{s}` is not an index", i + 2)))
            };
            let (id, fold) = (parse(&rec[0])?, parse(&rec[1])?);
            if folds.len() <= fold {
                folds.resize(fold + 1, Vec::new());
            }
            folds[fold].push(id);
        }
        Self::from_folds(folds, seed)
    }
}

/// Stratified k-fold split on binary labels (indexed by sample id).
///
/// Each class is shuffled with the seed, then dealt round-robin; negatives
/// continue the deal where positives stopped, so fold totals also differ by at
/// most one.
pub fn stratified_kfold_labels(labels: &[bool], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(DataError::InvalidK(k));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    for (name, class) in [("positive", &pos), ("negative", &neg)] {
        if class.len() < k {
            return Err(DataError::ClassSmallerThanK {
                class: name,
                count: class.len(),
                k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (slot, id) in pos.into_iter().chain(neg).enumerate() {
        folds[slot % k].push(id);
    }
    FoldPlan::from_folds(folds, seed)
}

pub fn stratified_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    stratified_kfold_labels(&manifest.binary_labels(), k, seed)
}

/// Anything that can hand out preprocessed samples and their binary targets
/// by sample id.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 1 for the positive class, 0 otherwise.
    fn target(&self, id: usize) -> usize;

    fn load(&self, id: usize) -> Result<Tensor<f32>>;

    fn labels(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.target(i) == 1).collect()
    }
}

/// Preprocessed tensors held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct InMemorySource {
    tensors: Vec<Tensor<f32>>,
    targets: Vec<usize>,
}

impl InMemorySource {
    pub fn new(tensors: Vec<Tensor<f32>>, targets: Vec<usize>) -> Result<Self> {
        if tensors.len() != targets.len() {
            return Err(DataError::Malformed {
                line: 0,
                message: format!("{} tensors but {} targets", tensors.len(), targets.len()),
            });
        }
        Ok(InMemorySource { tensors, targets })
    }
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.tensors.len()
    }

    fn target(&self, id: usize) -> usize {
        self.targets[id]
    }

    fn load(&self, id: usize) -> Result<Tensor<f32>> {
        Ok(self.tensors[id].clone())
    }
}

/// Decodes and preprocesses manifest images on demand.
#[derive(Clone, Debug)]
pub struct ManifestSource {
    pub manifest: DatasetManifest,
    pub preprocess: Preprocess,
}

impl ManifestSource {
    pub fn new(manifest: DatasetManifest, preprocess: Preprocess) -> Self {
        ManifestSource { manifest, preprocess }
    }

    /// Checks that every image file exists.
    pub fn check_files(&self) -> Result<()> {
        for s in self.manifest.samples() {
            let p = self.manifest.resolve(s);
            if !p.is_file() {
                return Err(DataError::Io {
                    path: p,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
                });
            }
        }
        Ok(())
    }

    /// Decodes every image once and keeps the tensors.
    pub fn preload(&self) -> Result<InMemorySource> {
        let tensors = crate::parallel::try_map_range(self.len(), |i| self.load(i))?;
        InMemorySource::new(tensors, (0..self.len()).map(|i| self.target(i)).collect())
    }
}

impl SampleSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn target(&self, id: usize) -> usize {
        self.manifest.samples()[id].target()
    }

    fn load(&self, id: usize) -> Result<Tensor<f32>> {
        let sample = &self.manifest.samples()[id];
        self.preprocess.load(&self.manifest.resolve(sample))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_with(pos: usize, neg: usize) -> DatasetManifest {
        let rows = (0..pos)
            .map(|i| (PathBuf::from(format!("m{i}.png")), SkinClass::Measles))
            .chain((0..neg).map(|i| (PathBuf::from(format!("e{i}.png")), SkinClass::Eczema)));
        DatasetManifest::from_samples(rows, ".").unwrap()
    }

    #[test]
    fn parses_labels_and_counts() {
        let m = parse_manifest(
            "path,label\na.png,measles\nb.jpg,normal_skin\nc.png,chigger_bites\n",
            "/data",
        )
        .unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.positives(), 1);
        assert_eq!(m.count(SkinClass::NormalSkin), 1);
        assert_eq!(m.resolve(&m.samples()[0]), PathBuf::from("/data/a.png"));
        assert_eq!(m.samples()[2].target(), 0);
    }

    #[test]
    fn rejects_bad_manifests() {
        assert!(matches!(parse_manifest("", "."), Err(DataError::EmptyManifest)));
        assert!(matches!(
            parse_manifest("path,label\n", "."),
            Err(DataError::EmptyManifest)
        ));
        match parse_manifest("path,label\na.png,smallpox\n", ".") {
            Err(e @ DataError::UnknownLabel { .. }) => assert!(e.to_string().contains("smallpox")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_manifest("path,label\na.png,measles\na.png,eczema\n", "."),
            Err(DataError::DuplicatePath { line: 3, .. })
        ));
        assert!(matches!(
            parse_manifest("file,class\na,measles\n", "."),
            Err(DataError::BadHeader(_))
        ));
        assert!(matches!(
            load_manifest("/definitely/not/here.csv"),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let m = manifest_with(3, 4);
        assert_eq!(parse_manifest(&manifest_to_csv(&m), ".").unwrap(), m);
    }

    #[test]
    fn oversampling_balances_and_keeps_originals() {
        let m = manifest_with(158, 1158);
        let o = oversample(&m).unwrap();
        let labels = m.binary_labels();
        let pos = o.indices.iter().filter(|&&i| labels[i]).count();
        let neg = o.indices.len() - pos;
        assert_eq!(neg, 1158);
        assert!((1157..=1158).contains(&pos));
        assert!(o.indices[..m.len()].iter().copied().eq(0..m.len()));
        assert!(o.warning.is_none());
    }

    #[test]
    fn oversampling_edge_cases() {
        let m = manifest_with(5, 5);
        assert_eq!(oversample(&m).unwrap().duplicated, 0);
        let single = oversample(&manifest_with(1, 1158)).unwrap();
        assert_eq!(single.duplicated, 1157);
        assert!(single.warning.is_some());
        assert!(matches!(
            oversample(&manifest_with(0, 3)),
            Err(DataError::EmptyClass("positive"))
        ));
    }

    #[test]
    fn stratified_counts_for_reference_class_sizes() {
        let m = manifest_with(158, 1158);
        let plan = stratified_kfold(&m, 5, 7).unwrap();
        let labels = m.binary_labels();
        let mut pos: Vec<usize> = plan
            .folds()
            .iter()
            .map(|f| f.iter().filter(|&&i| labels[i]).count())
            .collect();
        pos.sort_unstable();
        assert_eq!(pos, vec![31, 31, 32, 32, 32]);
        assert!(plan.folds().iter().all(|f| (263..=264).contains(&f.len())));
    }

    #[test]
    fn kfold_errors() {
        let m = manifest_with(10, 10);
        assert!(matches!(stratified_kfold(&m, 1, 0), Err(DataError::InvalidK(1))));
        assert!(matches!(
            stratified_kfold(&manifest_with(3, 10), 5, 0),
            Err(DataError::ClassSmallerThanK { class: "positive", .. })
        ));
    }

    #[test]
    fn fold_csv_roundtrip() {
        let plan = stratified_kfold(&manifest_with(12, 30), 4, 3).unwrap();
        let back = FoldPlan::from_csv(&plan.to_csv(), 3).unwrap();
        assert_eq!(back, plan);
        assert!(FoldPlan::from_csv("sample_id,fold\n1,0\n1,1\n", 0).is_err());
    }
}
