//! Synthetic structural-connectivity cohorts with planted class signatures.
//!
//! Base counts are lognormal (heavily skewed, like real fiber counts). Every
//! class owns a few regions whose whole row and column are scaled by
//! `effect_size` in that class's subjects, so the discriminative
//! sub-networks are known exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::connectome::{load_matrix, log_normalize, to_subnetworks, ConnectivityMatrix, MatrixFormat, SubNetworkBatch};
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, sub_stream, Stream};

pub const LABELS_FILE: &str = "labels.csv";
pub const SUBJECTS_DIR: &str = "subjects";
pub const SPEC_FILE: &str = "spec.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_regions: usize,
    pub n_classes: usize,
    pub subjects_per_class: usize,
    /// Per-class planted regions; `None` spreads two regions per class over the index range.
    pub planted_regions: Option<Vec<Vec<usize>>>,
    pub effect_size: f64,
    /// Mean fiber count of the base distribution.
    pub base_scale: f64,
    /// Log-space standard deviation of the base distribution.
    pub dispersion: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_regions: 32,
            n_classes: 3,
            subjects_per_class: 50,
            planted_regions: None,
            effect_size: 1.6,
            base_scale: 50.0,
            dispersion: 0.5,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Planted regions per class, resolving the default layout.
    pub fn planted(&self) -> Vec<Vec<usize>> {
        match &self.planted_regions {
            Some(p) => p.clone(),
            None => (0..self.n_classes)
                .map(|k| {
                    let center = (2 * k + 1) * self.n_regions / (2 * self.n_classes);
                    vec![center.saturating_sub(1), center]
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 2 || self.n_classes < 2 || self.subjects_per_class == 0 {
            return Err(Error::Spec(format!(
                "need at least 2 regions, 2 classes and 1 subject per class (got {}, {}, {})",
                self.n_regions, self.n_classes, self.subjects_per_class
            )));
        }
        if !(self.effect_size.is_finite() && self.effect_size > 0.0) || self.effect_size == 1.0 {
            return Err(Error::Spec(format!(
                "effect_size must be positive and different from 1, got {}",
                self.effect_size
            )));
        }
        if !(self.base_scale.is_finite() && self.base_scale > 0.0) {
            return Err(Error::Spec(format!("base_scale must be positive, got {}", self.base_scale)));
        }
        if !(self.dispersion.is_finite() && self.dispersion > 0.0) {
            return Err(Error::Spec(format!("dispersion must be positive, got {}", self.dispersion)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Spec(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.planted_regions.is_none() && self.n_regions < 2 * self.n_classes {
            return Err(Error::Spec(format!(
                "default planted regions need at least 2 regions per class ({} regions, {} classes)",
                self.n_regions, self.n_classes
            )));
        }
        let planted = self.planted();
        if planted.len() != self.n_classes {
            return Err(Error::Spec(format!(
                "planted regions given for {} classes, spec has {}",
                planted.len(),
                self.n_classes
            )));
        }
        let mut seen = BTreeSet::new();
        for (k, regions) in planted.iter().enumerate() {
            for &r in regions {
                if r >= self.n_regions {
                    return Err(Error::Spec(format!("planted region {r} of class {k} is out of range")));
                }
                if !seen.insert(r) {
                    return Err(Error::Spec(format!("planted region {r} is used by more than one class")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub matrix: ConnectivityMatrix,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Value(format!("unknown split {other:?} (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub n_classes: usize,
    pub subjects: Vec<Subject>,
    /// Sorted subject indices.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Cohort {
    pub fn n_regions(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.matrix.n_regions())
    }

    pub fn region_labels(&self) -> &[String] {
        self.subjects.first().map_or(&[], |s| s.matrix.region_labels())
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.subjects[i].class).collect()
    }

    /// Normalized sub-network sequences for the given subjects.
    pub fn subnetworks(&self, indices: &[usize]) -> Result<Vec<SubNetworkBatch>> {
        indices
            .iter()
            .map(|&i| {
                let s = &self.subjects[i];
                Ok(to_subnetworks(&log_normalize(&s.matrix)?, s.id.clone()))
            })
            .collect()
    }

    /// Writes `subjects/<id>.csv`, `labels.csv` and, when given, `spec.json`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, spec: Option<&SynthSpec>) -> Result<()> {
        let dir = dir.as_ref();
        let subjects_dir = dir.join(SUBJECTS_DIR);
        fs::create_dir_all(&subjects_dir).map_err(|e| Error::io(&subjects_dir, e))?;
        for s in &self.subjects {
            let path = subjects_dir.join(format!("{}.csv", s.id));
            fs::write(&path, s.matrix.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        let test: BTreeSet<usize> = self.test.iter().copied().collect();
        let train: BTreeSet<usize> = self.train.iter().copied().collect();
        let mut labels = String::from("subject_id,class,split\n");
        for (i, s) in self.subjects.iter().enumerate() {
            let split = if test.contains(&i) {
                "test"
            } else if train.contains(&i) {
                "train"
            } else {
                ""
            };
            writeln!(labels, "{},{},{split}", s.id, s.class).expect("write to string");
        }
        let path = dir.join(LABELS_FILE);
        fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
        if let Some(spec) = spec {
            let path = dir.join(SPEC_FILE);
            let text = serde_json::to_string_pretty(spec).expect("spec serializes");
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads a cohort directory written by [`Cohort::write_dir`].
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let labels_path = dir.join(LABELS_FILE);
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: labels_path.clone(),
            msg: format!("line {line}: {msg}"),
        };
        let mut subjects = Vec::new();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [id, class, split] = fields[..] else {
                return Err(parse_err(lineno + 1, format!("expected 3 fields, got {}", fields.len())));
            };
            let class: usize = class
                .parse()
                .map_err(|_| parse_err(lineno + 1, format!("class {class:?} is not an integer")))?;
            let index = subjects.len();
            match split {
                "train" => train.push(index),
                "test" => test.push(index),
                "" => {}
                other => return Err(parse_err(lineno + 1, format!("unknown split {other:?}"))),
            }
            let matrix = load_matrix(dir.join(SUBJECTS_DIR).join(format!("{id}.csv")), MatrixFormat::Csv)?;
            subjects.push(Subject {
                id: id.to_string(),
                matrix,
                class,
            });
        }
        if subjects.is_empty() {
            return Err(parse_err(1, "no subjects listed".into()));
        }
        let n = subjects[0].matrix.n_regions();
        if let Some(bad) = subjects.iter().find(|s| s.matrix.n_regions() != n) {
            return Err(Error::shape(format!(
                "subject {} has {} regions, cohort has {n}",
                bad.id,
                bad.matrix.n_regions()
            )));
        }
        let n_classes = subjects.iter().map(|s| s.class).max().unwrap_or(0) + 1;
        Ok(Self {
            n_classes,
            subjects,
            train,
            test,
        })
    }
}

/// Draws the cohort described by `spec` (no split yet).
pub fn generate(spec: &SynthSpec) -> Result<Cohort> {
    spec.validate()?;
    let n = spec.n_regions;
    let planted = spec.planted();
    let base = LogNormal::new(spec.base_scale.ln() - spec.dispersion * spec.dispersion / 2.0, spec.dispersion)
        .map_err(|e| Error::Spec(format!("base distribution: {e}")))?;
    let mut subjects = Vec::with_capacity(spec.n_classes * spec.subjects_per_class);
    for class in 0..spec.n_classes {
        let mut factor = vec![1.0; n];
        for &r in &planted[class] {
            factor[r] = spec.effect_size;
        }
        for _ in 0..spec.subjects_per_class {
            let index = subjects.len();
            let mut rng = indexed_stream(spec.seed, Stream::Data, index as u32);
            let mut values = vec![0.0; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    let v = (base.sample(&mut rng) * factor[i] * factor[j]).round();
                    values[i * n + j] = v;
                    values[j * n + i] = v;
                }
            }
            subjects.push(Subject {
                id: format!("sub-{index:04}"),
                matrix: ConnectivityMatrix::from_flat(n, values, None)?,
                class,
            });
        }
    }
    Ok(Cohort {
        n_classes: spec.n_classes,
        subjects,
        train: Vec::new(),
        test: Vec::new(),
    })
}

/// Per-class split: `round(count * test_fraction)` test subjects per class,
/// at least one, and at least one left for training.
pub fn split_stratified(mut cohort: Cohort, test_fraction: f64, seed: u64) -> Result<Cohort> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Spec(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut rng = sub_stream(seed, Stream::Split);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..cohort.n_classes {
        let mut members: Vec<usize> = (0..cohort.subjects.len())
            .filter(|&i| cohort.subjects[i].class == class)
            .collect();
        if members.len() < 2 {
            return Err(Error::Spec(format!(
                "class {class} has {} subjects, a split needs at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    cohort.train = train;
    cohort.test = test;
    Ok(cohort)
}

/// Generates and splits in one go using the spec's own seed and fraction.
pub fn generate_split(spec: &SynthSpec) -> Result<Cohort> {
    split_stratified(generate(spec)?, spec.test_fraction, spec.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_regions: 12,
            subjects_per_class: 10,
            ..Default::default()
        }
    }

    #[test]
    fn spec_errors() {
        let bad = SynthSpec {
            effect_size: 1.0,
            ..Default::default()
        };
        assert!(matches!(generate(&bad), Err(Error::Spec(_))));
        let overlap = SynthSpec {
            planted_regions: Some(vec![vec![1, 2], vec![2, 3], vec![4, 5]]),
            ..Default::default()
        };
        assert!(matches!(generate(&overlap), Err(Error::Spec(_))));
        let out_of_range = SynthSpec {
            planted_regions: Some(vec![vec![1], vec![2], vec![99]]),
            ..Default::default()
        };
        assert!(out_of_range.validate().is_err());
    }

    #[test]
    fn default_planted_layout_is_disjoint_and_away_from_index_zero() {
        let spec = SynthSpec::default();
        assert_eq!(spec.planted(), vec![vec![4, 5], vec![15, 16], vec![25, 26]]);
        for (n, k) in [(4, 2), (6, 3), (7, 3), (10, 5), (148, 3)] {
            let s = SynthSpec {
                n_regions: n,
                n_classes: k,
                ..SynthSpec::default()
            };
            s.validate().unwrap_or_else(|e| panic!("{n}/{k}: {e}"));
        }
        let tight = SynthSpec {
            n_regions: 5,
            n_classes: 3,
            ..SynthSpec::default()
        };
        assert!(matches!(tight.validate(), Err(Error::Spec(_))));
        spec.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.subjects.len(), 30);
        for s in &a.subjects {
            let m = &s.matrix;
            for i in 0..m.n_regions() {
                assert_eq!(m.get(i, i), 0.0);
                for j in 0..m.n_regions() {
                    assert_eq!(m.get(i, j), m.get(j, i));
                    assert!(m.get(i, j) >= 0.0 && m.get(i, j).fract() == 0.0);
                }
            }
        }
        let other = generate(&SynthSpec {
            seed: 1,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn planted_rows_carry_the_effect() {
        let spec = SynthSpec::default();
        let cohort = generate(&spec).unwrap();
        let n = spec.n_regions;
        for (k, regions) in spec.planted().iter().enumerate() {
            let mean_row = |own: bool| {
                let mut sum = 0.0;
                let mut count = 0.0;
                for s in cohort.subjects.iter().filter(|s| (s.class == k) == own) {
                    for &r in regions {
                        for j in (0..n).filter(|&j| j != r) {
                            sum += s.matrix.get(r, j);
                            count += 1.0;
                        }
                    }
                }
                sum / count
            };
            let ratio = mean_row(true) / mean_row(false);
            assert!((ratio / spec.effect_size - 1.0).abs() < 0.1, "class {k}: ratio {ratio}");
        }
    }

    #[test]
    fn split_arithmetic_and_partition() {
        let cohort = split_stratified(generate(&small_spec()).unwrap(), 0.2, 3).unwrap();
        assert_eq!(cohort.test.len(), 6);
        for k in 0..3 {
            assert_eq!(cohort.labels(&cohort.test).iter().filter(|&&c| c == k).count(), 2);
        }
        let mut all: Vec<usize> = cohort.train.iter().chain(&cohort.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        let again = split_stratified(generate(&small_spec()).unwrap(), 0.2, 3).unwrap();
        assert_eq!(cohort.test, again.test);
    }

    #[test]
    fn split_needs_two_per_class() {
        let spec = SynthSpec {
            subjects_per_class: 1,
            ..small_spec()
        };
        assert!(matches!(
            split_stratified(generate(&spec).unwrap(), 0.2, 0),
            Err(Error::Spec(_))
        ));
        assert!(split_stratified(generate(&small_spec()).unwrap(), 1.0, 0).is_err());
    }

    #[test]
    fn tiny_fraction_still_tests_one_per_class() {
        let cohort = split_stratified(generate(&small_spec()).unwrap(), 0.01, 0).unwrap();
        assert_eq!(cohort.test.len(), 3);
    }

    #[test]
    fn directory_round_trip() {
        let spec = small_spec();
        let cohort = generate_split(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cohort.write_dir(dir.path(), Some(&spec)).unwrap();
        let back = Cohort::read_dir(dir.path()).unwrap();
        assert_eq!(back, cohort);
        let labels = fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap();
        assert!(labels.starts_with("subject_id,class,split\nsub-0000,0,"));
    }

    /// Nearest class mean on log planted-row sums: the task is learnable.
    #[test]
    fn nearest_class_mean_oracle_beats_80_percent() {
        let spec = SynthSpec::default();
        let cohort = generate_split(&spec).unwrap();
        let rows: Vec<usize> = spec.planted().concat();
        let n = spec.n_regions;
        let features = |i: usize| -> Vec<f64> {
            let m = &cohort.subjects[i].matrix;
            rows.iter().map(|&r| (0..n).map(|j| m.get(r, j)).sum::<f64>().ln()).collect()
        };
        let mut means = vec![vec![0.0; rows.len()]; spec.n_classes];
        let mut counts = vec![0.0; spec.n_classes];
        for &i in &cohort.train {
            let c = cohort.subjects[i].class;
            counts[c] += 1.0;
            for (m, f) in means[c].iter_mut().zip(features(i)) {
                *m += f;
            }
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= c);
        }
        let correct = cohort
            .test
            .iter()
            .filter(|&&i| {
                let f = features(i);
                let dist = |m: &Vec<f64>| m.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let best = (0..spec.n_classes)
                    .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                    .unwrap();
                best == cohort.subjects[i].class
            })
            .count();
        let acc = correct as f64 / cohort.test.len() as f64;
        assert!(acc > 0.8, "oracle accuracy {acc}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(40))]
            #[test]
            fn split_is_a_stratified_partition(
                per_class in 2usize..12,
                fraction in 0.05f64..0.95,
                seed in any::<u64>(),
            ) {
                let spec = SynthSpec { n_regions: 8, subjects_per_class: per_class, seed, ..Default::default() };
                let cohort = split_stratified(generate(&spec).unwrap(), fraction, seed).unwrap();
                let mut all: Vec<usize> = cohort.train.iter().chain(&cohort.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..cohort.subjects.len()).collect::<Vec<_>>());
                for k in 0..spec.n_classes {
                    let n_test = cohort.labels(&cohort.test).iter().filter(|&&c| c == k).count();
                    let want = ((per_class as f64 * fraction).round() as usize).clamp(1, per_class - 1);
                    prop_assert_eq!(n_test, want);
                }
            }

            #[test]
            fn generated_matrices_are_symmetric_counts(seed in any::<u64>()) {
                let spec = SynthSpec { n_regions: 6, subjects_per_class: 2, seed, ..Default::default() };
                for s in generate(&spec).unwrap().subjects {
                    for i in 0..6 {
                        prop_assert_eq!(s.matrix.get(i, i), 0.0);
                        for j in 0..6 {
                            let v = s.matrix.get(i, j);
                            prop_assert!(v >= 0.0 && v.fract() == 0.0);
                            prop_assert_eq!(v, s.matrix.get(j, i));
                        }
                    }
                }
            }
        }
    }
}
