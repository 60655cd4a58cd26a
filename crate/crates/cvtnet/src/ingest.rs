//! Loading and validation of classifier score records and labeled feature
//! datasets, plus a seeded synthetic generator that plants a known
//! hierarchy for end-to-end runs.
//!
//! File formats are line oriented UTF-8 text:
//!
//! * score records: `#manifest C=<int> normalized=<true|false>` then one
//!   `sample_id,true_label,score_0,...,score_{C-1}` line per sample;
//! * labeled samples: `#manifest C=<int> dim=<int>` then
//!   `sample_id,fine_label,f_0,...,f_{dim-1}`;
//! * category names: one name per line, line index = category index.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cvt::ConfusionVisualTree;
use crate::error::{Error, Result};

/// One sample's class-score vector plus its ground-truth category.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub true_label: usize,
    pub scores: Vec<f64>,
}

/// A training input: flattened feature vector plus fine category index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample_id: String,
    pub features: Vec<f64>,
    pub fine_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub category_names: Vec<String>,
    pub feature_dim: usize,
    pub sample_count: usize,
}

/// A batch of prediction records together with the header facts they
/// were validated against.
#[derive(Debug, Clone)]
pub struct RecordSet {
    pub num_categories: usize,
    /// True when the scores are already probabilities (sum to one).
    pub normalized: bool,
    pub records: Vec<PredictionRecord>,
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub num_categories: usize,
    pub feature_dim: usize,
    pub samples: Vec<LabeledSample>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_header_kv<'a>(header: &'a str, prefix: &str, keys: &[&str]) -> Result<Vec<&'a str>> {
    let rest = header
        .strip_prefix(prefix)
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("expected header starting with `{prefix}`"),
        })?
        .trim();
    let mut out = Vec::with_capacity(keys.len());
    let fields: Vec<&str> = rest.split_whitespace().collect();
    for (i, key) in keys.iter().enumerate() {
        let field = fields.get(i).ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("missing header field `{key}`"),
        })?;
        let value = field.strip_prefix(&format!("{key}=")).ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("expected `{key}=<value>`, got `{field}`"),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Load score records. Validates every line against the header's category
/// count and, when `normalized=true`, checks each row is a probability
/// vector (entries in [0,1], sum within 1e-6 of 1).
pub fn load_records(path: &Path) -> Result<RecordSet> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file, expected `#manifest` header".into(),
    })?;
    let vals = parse_header_kv(header, "#manifest", &["C", "normalized"])?;
    let num_categories: usize = vals[0].parse().map_err(|_| Error::Parse {
        line: 1,
        msg: format!("invalid C `{}`", vals[0]),
    })?;
    let normalized: bool = vals[1].parse().map_err(|_| Error::Parse {
        line: 1,
        msg: format!("invalid normalized flag `{}`", vals[1]),
    })?;

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        let sample_id = parts.next().unwrap_or("").to_string();
        if sample_id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty sample id".into(),
            });
        }
        let label_str = parts.next().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "missing true_label field".into(),
        })?;
        let true_label: usize = label_str.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid true_label `{label_str}`"),
        })?;
        let scores = parse_floats(parts, line_no)?;
        if scores.len() != num_categories {
            return Err(Error::Schema {
                line: line_no,
                msg: format!(
                    "expected {num_categories} scores, got {}",
                    scores.len()
                ),
            });
        }
        if true_label >= num_categories {
            return Err(Error::Schema {
                line: line_no,
                msg: format!("true_label {true_label} out of range for C={num_categories}"),
            });
        }
        if normalized {
            let sum: f64 = scores.iter().sum();
            if scores.iter().any(|&s| !(0.0..=1.0).contains(&s)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Schema {
                    line: line_no,
                    msg: "normalized scores must lie in [0,1] and sum to 1".into(),
                });
            }
        }
        records.push(PredictionRecord {
            sample_id,
            true_label,
            scores,
        });
    }
    Ok(RecordSet {
        num_categories,
        normalized,
        records,
    })
}

fn parse_floats<'a, I: Iterator<Item = &'a str>>(parts: I, line_no: usize) -> Result<Vec<f64>> {
    parts
        .map(|s| {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid number `{s}`"),
            })
        })
        .collect()
}

/// Write records in the same line format `load_records` reads.
pub fn write_records(set: &RecordSet) -> String {
    let mut out = format!(
        "#manifest C={} normalized={}\n",
        set.num_categories, set.normalized
    );
    for r in &set.records {
        let _ = write!(out, "{},{}", r.sample_id, r.true_label);
        for s in &r.scores {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
    }
    out
}

/// Load labeled feature samples.
pub fn load_samples(path: &Path) -> Result<SampleSet> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file, expected `#manifest` header".into(),
    })?;
    let vals = parse_header_kv(header, "#manifest", &["C", "dim"])?;
    let num_categories: usize = vals[0].parse().map_err(|_| Error::Parse {
        line: 1,
        msg: format!("invalid C `{}`", vals[0]),
    })?;
    let feature_dim: usize = vals[1].parse().map_err(|_| Error::Parse {
        line: 1,
        msg: format!("invalid dim `{}`", vals[1]),
    })?;

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        let sample_id = parts.next().unwrap_or("").to_string();
        let label_str = parts.next().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "missing fine_label field".into(),
        })?;
        let fine_label: usize = label_str.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("invalid fine_label `{label_str}`"),
        })?;
        let features = parse_floats(parts, line_no)?;
        if features.len() != feature_dim {
            return Err(Error::Schema {
                line: line_no,
                msg: format!("expected {feature_dim} features, got {}", features.len()),
            });
        }
        if fine_label >= num_categories {
            return Err(Error::Schema {
                line: line_no,
                msg: format!("fine_label {fine_label} out of range for C={num_categories}"),
            });
        }
        samples.push(LabeledSample {
            sample_id,
            features,
            fine_label,
        });
    }
    Ok(SampleSet {
        num_categories,
        feature_dim,
        samples,
    })
}

pub fn write_samples(set: &SampleSet) -> String {
    let mut out = format!("#manifest C={} dim={}\n", set.num_categories, set.feature_dim);
    for s in &set.samples {
        let _ = write!(out, "{},{}", s.sample_id, s.fine_label);
        for f in &s.features {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
    }
    out
}

/// Category-name file: one name per line.
pub fn load_names(path: &Path) -> Result<Vec<String>> {
    let text = read_to_string(path)?;
    let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    if names.len() < 2 {
        return Err(Error::Schema {
            line: 1,
            msg: "need at least 2 category names".into(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for (i, n) in names.iter().enumerate() {
        if !seen.insert(n) {
            return Err(Error::Schema {
                line: i + 1,
                msg: format!("duplicate category name `{n}`"),
            });
        }
    }
    Ok(names)
}

/// Numerically stable softmax with max subtraction. Preserves argmax and
/// sums to 1 within 1e-12.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Precondition("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input contains NaN or Inf".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Description of a planted hierarchy: branching factors from the root's
/// children downward, isotropic Gaussian clusters at the leaves.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    /// Children per node at each internal level; leaves = product.
    pub branching: Vec<usize>,
    pub samples_per_leaf: usize,
    pub feature_dim: usize,
    /// Distance scale of the top-level community centers from the origin.
    pub separation: f64,
    /// Standard deviation of the per-sample isotropic noise.
    pub noise: f64,
}

/// Deterministically generate a dataset with a planted hierarchy.
///
/// Cluster means are placed recursively: each node's children sit around
/// the parent's center at a scale that shrinks by 4x per level, so sibling
/// leaves are always closer to each other than to non-siblings.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(DatasetManifest, Vec<LabeledSample>, ConfusionVisualTree)> {
    if spec.branching.is_empty() {
        return Err(Error::Config("branching must be non-empty".into()));
    }
    if spec.branching.iter().any(|&b| b == 0) {
        return Err(Error::Config("branching factors must be positive".into()));
    }
    if spec.noise <= 0.0 || spec.separation <= 0.0 {
        return Err(Error::Config("separation and noise must be positive".into()));
    }
    if spec.feature_dim == 0 {
        return Err(Error::Config("feature_dim must be positive".into()));
    }
    let num_leaves: usize = spec.branching.iter().product();
    if num_leaves < 2 {
        return Err(Error::Config("planted tree must have at least 2 leaves".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Leaf means, in leaf (= category) index order.
    let mut centers: Vec<Vec<f64>> = vec![vec![0.0; spec.feature_dim]];
    let mut scale = spec.separation;
    for &b in &spec.branching {
        let mut next = Vec::with_capacity(centers.len() * b);
        for parent in &centers {
            for _ in 0..b {
                let dir = random_unit(&mut rng, spec.feature_dim);
                let child: Vec<f64> = parent
                    .iter()
                    .zip(&dir)
                    .map(|(p, d)| p + scale * d)
                    .collect();
                next.push(child);
            }
        }
        centers = next;
        scale /= 4.0;
    }
    debug_assert_eq!(centers.len(), num_leaves);

    let names: Vec<String> = (0..num_leaves).map(|i| format!("cat{i}")).collect();
    let tree = ConfusionVisualTree::from_branching(&spec.branching, &names)?;

    let mut samples = Vec::with_capacity(num_leaves * spec.samples_per_leaf);
    for (leaf, mean) in centers.iter().enumerate() {
        for j in 0..spec.samples_per_leaf {
            let features: Vec<f64> = mean
                .iter()
                .map(|m| m + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(LabeledSample {
                sample_id: format!("s{leaf}_{j}"),
                features,
                fine_label: leaf,
            });
        }
    }
    // Interleave classes so mini-batches see a mixture.
    samples.shuffle(&mut rng);

    let manifest = DatasetManifest {
        category_names: names,
        feature_dim: spec.feature_dim,
        sample_count: samples.len(),
    };
    Ok((manifest, samples, tree))
}

/// Score records from a nearest-mean classifier over the samples: class
/// means are estimated from the data and each sample is scored by
/// negative squared distance to every mean, scaled by the bandwidth.
/// A desk-scale stand-in for a trained classifier's score vectors;
/// confusable (nearby) categories receive correlated scores.
pub fn mean_classifier_records(
    set: &SampleSet,
    bandwidth: f64,
) -> Result<RecordSet> {
    if set.samples.is_empty() {
        return Err(Error::Precondition("no samples to score".into()));
    }
    if bandwidth <= 0.0 {
        return Err(Error::Config("bandwidth must be positive".into()));
    }
    let c = set.num_categories;
    let mut means = vec![vec![0.0; set.feature_dim]; c];
    let mut counts = vec![0usize; c];
    for s in &set.samples {
        counts[s.fine_label] += 1;
        for (m, &x) in means[s.fine_label].iter_mut().zip(&s.features) {
            *m += x;
        }
    }
    for (mean, &n) in means.iter_mut().zip(&counts) {
        if n == 0 {
            return Err(Error::Precondition("a category has no samples".into()));
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
    }
    let records = set
        .samples
        .iter()
        .map(|s| PredictionRecord {
            sample_id: s.sample_id.clone(),
            true_label: s.fine_label,
            scores: means
                .iter()
                .map(|mean| {
                    let d2: f64 = mean
                        .iter()
                        .zip(&s.features)
                        .map(|(m, x)| (x - m) * (x - m))
                        .sum();
                    -d2 / (2.0 * bandwidth * bandwidth)
                })
                .collect(),
        })
        .collect();
    Ok(RecordSet {
        num_categories: c,
        normalized: false,
        records,
    })
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn temp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_record_file_gives_empty_sequence() {
        let f = temp_file("#manifest C=3 normalized=false\n");
        let set = load_records(f.path()).unwrap();
        assert_eq!(set.num_categories, 3);
        assert!(set.records.is_empty());
    }

    #[test]
    fn parses_documented_line_format() {
        let f = temp_file("#manifest C=3 normalized=true\ns1,0,0.5,0.3,0.2\n");
        let set = load_records(f.path()).unwrap();
        assert_eq!(set.records.len(), 1);
        let r = &set.records[0];
        assert_eq!(r.sample_id, "s1");
        assert_eq!(r.true_label, 0);
        assert_eq!(r.scores, vec![0.5, 0.3, 0.2]);
    }

    #[test]
    fn wrong_score_count_names_the_line() {
        let f = temp_file("#manifest C=3 normalized=false\ns1,0,0.5,0.3,0.2,0.1\n");
        match load_records(f.path()) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        let f = temp_file("#manifest C=3 normalized=false\ns1,3,0.5,0.3,0.2\n");
        assert!(matches!(load_records(f.path()), Err(Error::Schema { .. })));
    }

    #[test]
    fn record_round_trip() {
        let text = "#manifest C=3 normalized=false\ns1,0,0.5,0.3,0.2\ns2,2,-1.25,0.125,7\n";
        let f = temp_file(text);
        let set = load_records(f.path()).unwrap();
        assert_eq!(write_records(&set), text);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let p = softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        for x in &p {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[3f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_no_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
        assert!(p[1] < 1e-12);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(matches!(softmax(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax(&[0.3, -1.2, 2.5]).unwrap();
        let b = softmax(&[0.3 + 7.0, -1.2 + 7.0, 2.5 + 7.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_degenerate_count() {
        let spec = SyntheticSpec {
            branching: vec![2, 2],
            samples_per_leaf: 0,
            feature_dim: 3,
            separation: 10.0,
            noise: 1.0,
        };
        let (manifest, samples, tree) = generate_synthetic(&spec, 1).unwrap();
        assert!(samples.is_empty());
        assert_eq!(manifest.category_names.len(), 4);
        assert_eq!(tree.depth(), 3);
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticSpec {
            branching: vec![2, 4],
            samples_per_leaf: 50,
            feature_dim: 6,
            separation: 10.0,
            noise: 1.0,
        };
        let (m1, s1, _) = generate_synthetic(&spec, 7).unwrap();
        assert_eq!(s1.len(), 400);
        assert_eq!(m1.category_names.len(), 8);
        let (m2, s2, _) = generate_synthetic(&spec, 7).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        let spec = SyntheticSpec {
            branching: vec![2, 0],
            samples_per_leaf: 1,
            feature_dim: 2,
            separation: 10.0,
            noise: 1.0,
        };
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Config(_))));
        let spec = SyntheticSpec {
            branching: vec![2, 2],
            samples_per_leaf: 1,
            feature_dim: 2,
            separation: 10.0,
            noise: 0.0,
        };
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sibling_leaves_are_closer_than_non_siblings() {
        let spec = SyntheticSpec {
            branching: vec![2, 2],
            samples_per_leaf: 20,
            feature_dim: 8,
            separation: 10.0,
            noise: 0.5,
        };
        let (_, samples, _) = generate_synthetic(&spec, 3).unwrap();
        let mean = |label: usize| -> Vec<f64> {
            let sel: Vec<_> = samples.iter().filter(|s| s.fine_label == label).collect();
            let mut m = vec![0.0; 8];
            for s in &sel {
                for (a, b) in m.iter_mut().zip(&s.features) {
                    *a += b / sel.len() as f64;
                }
            }
            m
        };
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        // Leaves 0,1 share a parent; 2,3 share the other.
        let (m0, m1, m2) = (mean(0), mean(1), mean(2));
        assert!(dist(&m0, &m1) < dist(&m0, &m2));
    }
}
