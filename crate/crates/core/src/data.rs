//! Domain sequences: synthetic rotated Gaussian clusters, CSV ingestion, and
//! the labeled source split.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CodagError, Result};
use crate::rng;

/// Share of each class mean's norm that lives in the rotated plane.
const PLANE_WEIGHT: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    SyntheticRotated,
    CsvFolder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub kind: DomainKind,
    /// Radians, applied in the plane of the first two coordinates.
    #[serde(default)]
    pub rotation_angle: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "one")]
    pub scale: f64,
    /// Empty means no shift.
    #[serde(default)]
    pub shift: Vec<f64>,
    /// Seed of the class means. Shared by every domain of a sequence.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn rotated(id: usize, degrees: f64, noise_sigma: f64, seed: u64) -> Self {
        Self {
            id,
            kind: DomainKind::SyntheticRotated,
            rotation_angle: degrees.to_radians().rem_euclid(2.0 * PI),
            noise_sigma,
            scale: 1.0,
            shift: Vec::new(),
            seed,
            path: None,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid(format!(
                "domain {}: noise_sigma must be >= 0",
                self.id
            )));
        }
        if !(self.scale > 0.0) {
            return Err(invalid(format!("domain {}: scale must be > 0", self.id)));
        }
        if !self.shift.is_empty() && self.shift.len() != d {
            return Err(invalid(format!(
                "domain {}: shift has length {}, expected {d}",
                self.id,
                self.shift.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub domain_id: usize,
}

/// An immutable set of samples from one domain.
///
/// Features are stored row-major in one matrix. Labels may be hidden, in
/// which case [`Dataset::label`] refuses to reveal them; this is how target
/// domains are presented to the training code.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<Option<usize>>,
    domain_id: usize,
    k: usize,
    labels_hidden: bool,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, k: usize, d: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("dataset must be nonempty"));
        }
        Self::from_samples(samples, k, d)
    }

    fn from_samples(samples: Vec<Sample>, k: usize, d: usize) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(invalid("k and d must be positive"));
        }
        let domain_id = samples.first().map_or(0, |s| s.domain_id);
        let mut features = Array2::zeros((samples.len(), d));
        let mut labels = Vec::with_capacity(samples.len());
        for (i, s) in samples.into_iter().enumerate() {
            if s.features.len() != d {
                return Err(invalid(format!(
                    "sample {i} has {} features, expected {d}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("sample {i} has non-finite features")));
            }
            if s.domain_id != domain_id {
                return Err(invalid("all samples of a dataset must share a domain"));
            }
            if let Some(l) = s.label {
                if l >= k {
                    return Err(invalid(format!("label {l} out of range for k = {k}")));
                }
            }
            features
                .row_mut(i)
                .assign(&ArrayView1::from(&s.features[..]));
            labels.push(s.label);
        }
        Ok(Self {
            features,
            labels,
            domain_id,
            k,
            labels_hidden: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn domain_id(&self) -> usize {
        self.domain_id
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels_hidden(&self) -> bool {
        self.labels_hidden
    }

    /// Label of sample `i`. Fails if labels are hidden or absent.
    pub fn label(&self, i: usize) -> Result<usize> {
        if self.labels_hidden {
            return Err(CodagError::HiddenLabel {
                domain_id: self.domain_id,
                index: i,
            });
        }
        self.labels
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| invalid(format!("sample {i} has no label")))
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            features: self.features.row(i).to_vec(),
            label: if self.labels_hidden {
                None
            } else {
                self.labels[i]
            },
            domain_id: self.domain_id,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    /// Training view of the same samples with labels hidden.
    pub fn hide_labels(&self) -> Dataset {
        Dataset {
            labels_hidden: true,
            ..self.clone()
        }
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domain_id: self.domain_id,
            k: self.k,
            labels_hidden: self.labels_hidden,
        }
    }
}

/// `k` unit vectors in `R^d`, a pure function of `seed`.
///
/// Most of each vector's norm lies in the first two coordinates, spread
/// evenly around the circle, so that rotating that plane is a real shift.
pub fn class_means(seed: u64, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = rng::from_seed(rng::derive_seed(seed, &["class-means"]));
    let offset: f64 = rng.random::<f64>() * 2.0 * PI;
    (0..k)
        .map(|c| {
            let phi = offset + 2.0 * PI * c as f64 / k as f64;
            let mut v = vec![0.0; d];
            if d == 2 {
                v[0] = phi.cos();
                v[1] = phi.sin();
                return v;
            }
            v[0] = PLANE_WEIGHT * phi.cos();
            v[1] = PLANE_WEIGHT * phi.sin();
            let rest: Vec<f64> = (2..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = rest.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let rest_weight = (1.0 - PLANE_WEIGHT * PLANE_WEIGHT).sqrt();
            for (dst, r) in v[2..].iter_mut().zip(rest) {
                *dst = rest_weight * r / norm;
            }
            v
        })
        .collect()
}

pub fn make_rotated_clusters(spec: &DomainSpec, n: usize, k: usize, d: usize) -> Result<Dataset> {
    if d < 2 {
        return Err(invalid(format!("d must be >= 2, got {d}")));
    }
    make_clusters_from_means(spec, n, &class_means(spec.seed, k, d))
}

/// Generates `n` samples cycling through the given class means, then applies
/// the domain transform of `spec`.
pub fn make_clusters_from_means(
    spec: &DomainSpec,
    n: usize,
    means: &[Vec<f64>],
) -> Result<Dataset> {
    let k = means.len();
    let d = means.first().map_or(0, Vec::len);
    if k == 0 || n < k {
        return Err(invalid(format!("n ({n}) must be >= k ({k})")));
    }
    if d < 2 {
        return Err(invalid(format!("d must be >= 2, got {d}")));
    }
    if means.iter().any(|m| m.len() != d) {
        return Err(invalid("class means must share a dimension"));
    }
    spec.validate(d)?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let id = spec.id.to_string();
    let mut rng = rng::from_seed(rng::derive_seed(spec.seed, &["domain-noise", &id]));
    let (sin, cos) = spec.rotation_angle.sin_cos();
    let samples = (0..n)
        .map(|i| {
            let label = i % k;
            let mut x = means[label].clone();
            let (a, b) = (x[0], x[1]);
            x[0] = cos * a - sin * b;
            x[1] = sin * a + cos * b;
            for (j, v) in x.iter_mut().enumerate() {
                *v *= spec.scale;
                if let Some(s) = spec.shift.get(j) {
                    *v += s;
                }
                if spec.noise_sigma > 0.0 {
                    *v += noise.sample(&mut rng);
                }
            }
            Sample {
                features: x,
                label: Some(label),
                domain_id: spec.id,
            }
        })
        .collect();
    Dataset::new(samples, k, d)
}

/// Random partition into a training part of size `round(fraction * n)` and
/// a test part holding the rest. The test part may be empty.
pub fn split_source(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    dataset.labels()?;
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut rng::from_seed(seed));
    let n_train = ((fraction * dataset.len() as f64).round() as usize).min(dataset.len());
    let (train, test) = indices.split_at(n_train);
    Ok((dataset.subset(train), dataset.subset(test)))
}

/// Reads one domain from CSV: `d` float columns followed by an integer label.
/// A single header line is skipped when its first field is not a number.
pub fn load_csv_domain(path: &Path, k: usize, d: usize, domain_id: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: usize, message: String| CodagError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    for (row_index, record) in reader.records().enumerate() {
        let line = row_index + 1;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if row_index == 0 && record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() != d + 1 {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", d + 1, record.len()),
            ));
        }
        let features = record
            .iter()
            .take(d)
            .enumerate()
            .map(|(col, field)| {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        parse_err(line, format!("column {}: bad number {field:?}", col + 1))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let raw_label = &record[d];
        let label: usize = raw_label
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {raw_label:?}")))?;
        if label >= k {
            return Err(parse_err(
                line,
                format!("label out of range: {label} >= {k}"),
            ));
        }
        samples.push(Sample {
            features,
            label: Some(label),
            domain_id,
        });
    }
    if samples.is_empty() {
        return Err(parse_err(0, "no data rows".into()));
    }
    Dataset::new(samples, k, d)
}

/// Writes a labeled dataset in the format read by [`load_csv_domain`].
pub fn write_csv_domain(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CodagError::Io {
        context: format!("creating {}", path.display()),
        source: e.into(),
    })?;
    let mut header: Vec<String> = (0..dataset.d()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    let labels = dataset.labels()?;
    let write = |w: &mut csv::Writer<std::fs::File>, row: Vec<String>| {
        w.write_record(row).map_err(|e| CodagError::Io {
            context: format!("writing {}", path.display()),
            source: e.into(),
        })
    };
    write(&mut writer, header)?;
    for (row, label) in dataset.features().rows().into_iter().zip(labels) {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        fields.push(label.to_string());
        write(&mut writer, fields)?;
    }
    writer
        .flush()
        .map_err(io_err(format!("flushing {}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub k: usize,
    pub d: usize,
    pub n_per_domain: usize,
    pub source_train_fraction: f64,
    /// Seed of the source train/test shuffle.
    pub split_seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        let seed = 7;
        Self {
            k: 5,
            d: 16,
            n_per_domain: 500,
            source_train_fraction: 0.8,
            split_seed: seed,
            domains: [0.0, 30.0, 60.0, 90.0, 120.0]
                .iter()
                .enumerate()
                .map(|(id, &deg)| DomainSpec::rotated(id, deg, 0.15, seed))
                .collect(),
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(invalid("sequence needs at least one domain"));
        }
        for (i, spec) in self.domains.iter().enumerate() {
            if spec.id != i {
                return Err(invalid(format!(
                    "domain ids must be contiguous from 0; position {i} has id {}",
                    spec.id
                )));
            }
            spec.validate(self.d)?;
        }
        Ok(())
    }
}

/// Source train/test split plus every target domain.
///
/// For targets the training view and the test set hold the same samples;
/// only the test set exposes labels.
#[derive(Debug, Clone)]
pub struct DomainSequence {
    pub specs: Vec<DomainSpec>,
    pub train_sets: Vec<Dataset>,
    pub test_sets: Vec<Dataset>,
}

impl DomainSequence {
    pub fn build(config: &SequenceConfig) -> Result<Self> {
        config.validate()?;
        let mut train_sets = Vec::new();
        let mut test_sets = Vec::new();
        for spec in &config.domains {
            let full = match spec.kind {
                DomainKind::SyntheticRotated => {
                    make_rotated_clusters(spec, config.n_per_domain, config.k, config.d)?
                }
                DomainKind::CsvFolder => {
                    let path = spec.path.as_deref().ok_or_else(|| {
                        invalid(format!("domain {}: csv-folder needs a path", spec.id))
                    })?;
                    load_csv_domain(path, config.k, config.d, spec.id)?
                }
            };
            if spec.id == 0 {
                let (train, test) =
                    split_source(&full, config.source_train_fraction, config.split_seed)?;
                train_sets.push(train);
                test_sets.push(test);
            } else {
                train_sets.push(full.hide_labels());
                test_sets.push(full);
            }
        }
        Ok(Self {
            specs: config.domains.clone(),
            train_sets,
            test_sets,
        })
    }

    /// Number of domains, `T + 1`.
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec(angle: f64, noise: f64) -> DomainSpec {
        DomainSpec {
            id: 0,
            kind: DomainKind::SyntheticRotated,
            rotation_angle: angle,
            noise_sigma: noise,
            scale: 1.0,
            shift: Vec::new(),
            seed: 3,
            path: None,
        }
    }

    #[test]
    fn zero_noise_samples_equal_class_means() {
        let ds = make_rotated_clusters(&spec(0.0, 0.0), 20, 4, 6).unwrap();
        let means = class_means(3, 4, 6);
        for i in 0..ds.len() {
            let l = ds.label(i).unwrap();
            assert_eq!(ds.features().row(i).to_vec(), means[l]);
        }
    }

    #[test]
    fn class_means_are_unit_vectors() {
        for m in class_means(11, 5, 16) {
            let n: f64 = m.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_by_pi_negates_plane() {
        let means = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let ds = make_clusters_from_means(&spec(PI, 0.0), 4, &means).unwrap();
        for i in 0..ds.len() {
            let x = ds.features().row(i).to_vec();
            let want = if ds.label(i).unwrap() == 0 { -1.0 } else { 1.0 };
            assert!((x[0] - want).abs() < 1e-12 && x[1].abs() < 1e-12, "{x:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(0.7, 0.3);
        let a = make_rotated_clusters(&s, 50, 5, 8).unwrap();
        let b = make_rotated_clusters(&s, 50, 5, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classes_are_balanced() {
        let ds = make_rotated_clusters(&spec(0.0, 0.1), 23, 5, 4).unwrap();
        let mut counts = [0usize; 5];
        for l in ds.labels().unwrap() {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn generator_argument_errors() {
        assert!(matches!(
            make_rotated_clusters(&spec(0.0, 0.0), 3, 5, 4),
            Err(CodagError::InvalidArgument(_))
        ));
        assert!(matches!(
            make_rotated_clusters(&spec(0.0, 0.0), 10, 5, 1),
            Err(CodagError::InvalidArgument(_))
        ));
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = make_rotated_clusters(&spec(0.0, 0.2), 10, 2, 3).unwrap();
        let (train, test) = split_source(&ds, 0.8, 1).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut all: Vec<Vec<u64>> = train
            .samples()
            .chain(test.samples())
            .map(|s| s.features.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> = ds
            .samples()
            .map(|s| s.features.iter().map(|v| v.to_bits()).collect())
            .collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_full_fraction_leaves_empty_test() {
        let ds = make_rotated_clusters(&spec(0.0, 0.2), 10, 2, 3).unwrap();
        let (train, test) = split_source(&ds, 1.0, 1).unwrap();
        assert_eq!(train.len(), 10);
        assert!(test.is_empty());
        assert!(split_source(&ds, 0.0, 1).is_err());
        assert!(split_source(&ds, 1.5, 1).is_err());
    }

    #[test]
    fn hidden_labels_refuse_access() {
        let ds = make_rotated_clusters(&spec(0.0, 0.2), 10, 2, 3).unwrap();
        let hidden = ds.hide_labels();
        assert!(matches!(
            hidden.label(0),
            Err(CodagError::HiddenLabel { .. })
        ));
        assert!(split_source(&hidden, 0.8, 1).is_err());
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_parses_valid_rows() {
        let f = write_tmp("a,b,label\n0.1,0.2,0\n0.3,0.4,1\n1,2,0\n3,4,1\n5,6,0\n7,8,1\n");
        let ds = load_csv_domain(f.path(), 2, 2, 3).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.domain_id(), 3);
        assert_eq!(ds.labels().unwrap(), vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn csv_short_row_names_line() {
        let f = write_tmp("0.1,0.2,0\n0.3,1\n");
        match load_csv_domain(f.path(), 2, 2, 0) {
            Err(CodagError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_label_out_of_range() {
        let f = write_tmp("0.1,0.2,2\n");
        let err = load_csv_domain(f.path(), 2, 2, 0).unwrap_err();
        assert!(err.to_string().contains("label out of range"), "{err}");
        assert!(load_csv_domain(Path::new("/nonexistent/x.csv"), 2, 2, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = make_rotated_clusters(&spec(0.3, 0.2), 12, 3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv_domain(&ds, &path).unwrap();
        let back = load_csv_domain(&path, 3, 4, 0).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn default_sequence_shapes() {
        let seq = DomainSequence::build(&SequenceConfig::default()).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.train_sets[0].len(), 400);
        assert_eq!(seq.test_sets[0].len(), 100);
        for t in 1..5 {
            assert!(seq.train_sets[t].labels_hidden());
            assert_eq!(seq.train_sets[t].features(), seq.test_sets[t].features());
        }
    }
}
