//! Synthetic open-set benchmarks: Gaussian clusters for in-classes and
//! out-of-classes, with a controllable out-of-class proportion in the
//! unlabeled pool.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, stream};
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    /// Out-class means are drawn as fresh directions.
    Independent,
    /// Out-class `j` sits next to in-class `j mod C`, offset by half the separation.
    Related,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub dim: usize,
    pub in_classes: usize,
    pub out_classes: usize,
    /// Distance between cluster means, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub mode: CorrelationMode,
    pub total_unlabeled: usize,
    pub out_proportion: f64,
    pub labels_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            dim: 16,
            in_classes: 8,
            out_classes: 8,
            separation: 6.0,
            sigma: 1.0,
            mode: CorrelationMode::Independent,
            total_unlabeled: 5000,
            out_proportion: 0.8,
            labels_per_class: 4,
            test_per_class: 100,
            seed: 0,
        }
    }
}

/// Half-up rounding of `p · n`.
pub fn out_of_class_count(p: f64, n: usize) -> usize {
    (p * n as f64 + 0.5).floor() as usize
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_classes < 2 {
            return Err(Error::config("benchmark needs at least 2 in-classes"));
        }
        if self.dim == 0 {
            return Err(Error::config("benchmark dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.out_proportion) {
            return Err(Error::config(format!(
                "out_proportion {} outside [0, 1]",
                self.out_proportion
            )));
        }
        if !(self.sigma > 0.0) || !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::config(
                "sigma must be positive and separation finite and nonnegative",
            ));
        }
        if self.labels_per_class == 0 {
            return Err(Error::config(
                "insufficient samples per class: labels_per_class is 0",
            ));
        }
        if self.test_per_class == 0 {
            return Err(Error::config(
                "insufficient samples per class: test_per_class is 0",
            ));
        }
        if self.out_classes == 0 && self.out_count() > 0 {
            return Err(Error::config(
                "out_proportion > 0 requires at least one out-class",
            ));
        }
        Ok(())
    }

    pub fn out_count(&self) -> usize {
        out_of_class_count(self.out_proportion, self.total_unlabeled)
    }

    pub fn in_count(&self) -> usize {
        self.total_unlabeled - self.out_count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    In,
    Out,
}

/// A training or evaluation sample. Hidden ground truth lives in a separate
/// [`TruthManifest`] so training code never sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    /// In-class label, `None` for unlabeled samples.
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Truth {
    /// Class id over in-classes `0..C` followed by out-classes `C..C+M`.
    pub class: usize,
    pub origin: Origin,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TruthManifest {
    entries: BTreeMap<u64, Truth>,
}

impl TruthManifest {
    pub fn insert(&mut self, id: u64, truth: Truth) {
        self.entries.insert(id, truth);
    }

    pub fn get(&self, id: u64) -> Option<Truth> {
        self.entries.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: &TruthManifest) {
        self.entries
            .extend(other.entries.iter().map(|(k, v)| (*k, *v)));
    }
}

/// Rows of one dataset file: samples plus their hidden truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub samples: Vec<Sample>,
    pub truth: TruthManifest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
    pub truth: TruthManifest,
}

/// Stacks sample features into a matrix.
pub fn feature_matrix(samples: &[Sample]) -> Result<Array> {
    Array::from_rows(
        &samples
            .iter()
            .map(|s| s.features.as_slice())
            .collect::<Vec<_>>(),
    )
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `count` unit directions; the first `min(count, dim)` are orthonormal.
fn directions(rng: &mut impl Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(unit(v));
        }
    }
    out
}

/// Cluster means for the `C + M` classes; depends only on the seed and geometry fields.
pub fn cluster_means(spec: &BenchmarkSpec) -> Vec<Vec<f64>> {
    let mut rng = keyed_rng(spec.seed, &[stream::GEOMETRY]);
    let (c, m) = (spec.in_classes, spec.out_classes);
    let dirs = directions(&mut rng, spec.dim, c + m);
    let radius = spec.separation * spec.sigma / std::f64::consts::SQRT_2;
    let scaled = |d: &[f64], s: f64| d.iter().map(|x| x * s).collect::<Vec<f64>>();
    let mut means: Vec<Vec<f64>> = dirs[..c].iter().map(|d| scaled(d, radius)).collect();
    for j in 0..m {
        let mean = match spec.mode {
            CorrelationMode::Independent => scaled(&dirs[c + j], radius),
            CorrelationMode::Related => {
                let offset = spec.separation * spec.sigma / 2.0;
                means[j % c]
                    .iter()
                    .zip(&dirs[c + j])
                    .map(|(a, d)| a + offset * d)
                    .collect()
            }
        };
        means.push(mean);
    }
    means
}

fn draw(rng: &mut impl Rng, mean: &[f64], sigma: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let means = cluster_means(spec);
    let c = spec.in_classes;
    let mut truth = TruthManifest::default();
    let mut next_id = 0u64;

    let mut labeled = Vec::with_capacity(c * spec.labels_per_class);
    let mut rng = keyed_rng(spec.seed, &[stream::LABELED_SAMPLES]);
    for (class, mean) in means.iter().enumerate().take(c) {
        for _ in 0..spec.labels_per_class {
            labeled.push(Sample {
                id: next_id,
                features: draw(&mut rng, mean, spec.sigma),
                label: Some(class),
            });
            truth.insert(
                next_id,
                Truth {
                    class,
                    origin: Origin::In,
                },
            );
            next_id += 1;
        }
    }

    let mut rng = keyed_rng(spec.seed, &[stream::UNLABELED_SAMPLES]);
    let (n_in, n_out) = (spec.in_count(), spec.out_count());
    let mut classes: Vec<usize> = (0..n_in).map(|i| i % c).collect();
    classes.extend((0..n_out).map(|i| c + i % spec.out_classes.max(1)));
    classes.shuffle(&mut rng);
    let mut unlabeled = Vec::with_capacity(classes.len());
    for class in classes {
        unlabeled.push(Sample {
            id: next_id,
            features: draw(&mut rng, &means[class], spec.sigma),
            label: None,
        });
        let origin = if class < c { Origin::In } else { Origin::Out };
        truth.insert(next_id, Truth { class, origin });
        next_id += 1;
    }

    let mut rng = keyed_rng(spec.seed, &[stream::TEST_SAMPLES]);
    let mut test = Vec::with_capacity(c * spec.test_per_class);
    for (class, mean) in means.iter().enumerate().take(c) {
        for _ in 0..spec.test_per_class {
            test.push(Sample {
                id: next_id,
                features: draw(&mut rng, mean, spec.sigma),
                label: Some(class),
            });
            truth.insert(
                next_id,
                Truth {
                    class,
                    origin: Origin::In,
                },
            );
            next_id += 1;
        }
    }

    Ok(Benchmark {
        spec: spec.clone(),
        labeled,
        unlabeled,
        test,
        truth,
    })
}

/// One benchmark per proportion, sharing cluster geometry, labeled set and test set.
pub fn sweep_proportions(spec: &BenchmarkSpec, proportions: &[f64]) -> Result<Vec<Benchmark>> {
    proportions
        .iter()
        .map(|&p| {
            generate(&BenchmarkSpec {
                out_proportion: p,
                ..spec.clone()
            })
        })
        .collect()
}

impl Benchmark {
    fn split(&self, samples: &[Sample]) -> Dataset {
        let mut truth = TruthManifest::default();
        for s in samples {
            if let Some(t) = self.truth.get(s.id) {
                truth.insert(s.id, t);
            }
        }
        Dataset {
            dim: self.spec.dim,
            samples: samples.to_vec(),
            truth,
        }
    }

    /// Writes `spec.json`, `labeled.csv`, `unlabeled.csv` and `test.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("spec.json"),
            serde_json::to_string_pretty(&self.spec)?,
        )?;
        crate::dataset_io::write_dataset(&dir.join("labeled.csv"), &self.split(&self.labeled))?;
        crate::dataset_io::write_dataset(&dir.join("unlabeled.csv"), &self.split(&self.unlabeled))?;
        crate::dataset_io::write_dataset(&dir.join("test.csv"), &self.split(&self.test))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: BenchmarkSpec =
            serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
        let mut truth = TruthManifest::default();
        let mut part = |name: &str| -> Result<Vec<Sample>> {
            let d = crate::dataset_io::read_dataset(&dir.join(name))?;
            truth.extend(&d.truth);
            Ok(d.samples)
        };
        let labeled = part("labeled.csv")?;
        let unlabeled = part("unlabeled.csv")?;
        let test = part("test.csv")?;
        Ok(Benchmark {
            spec,
            labeled,
            unlabeled,
            test,
            truth,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec() -> BenchmarkSpec {
        BenchmarkSpec {
            total_unlabeled: 500,
            test_per_class: 5,
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn zero_proportion_has_no_out_samples() {
        let b = generate(&BenchmarkSpec {
            out_proportion: 0.0,
            ..spec()
        })
        .unwrap();
        assert!(b
            .unlabeled
            .iter()
            .all(|s| b.truth.get(s.id).unwrap().origin == Origin::In));
        assert_eq!(b.unlabeled.len(), 500);
    }

    #[test]
    fn out_counts_follow_half_up_rounding() {
        assert_eq!(out_of_class_count(0.8, 50_000), 40_000);
        assert_eq!(out_of_class_count(0.5, 3), 2);
        assert_eq!(out_of_class_count(0.25, 2), 1);
        for p in [0.0, 0.2, 0.37, 0.8, 1.0] {
            let b = generate(&BenchmarkSpec {
                out_proportion: p,
                total_unlabeled: 333,
                ..spec()
            })
            .unwrap();
            let outs = b
                .unlabeled
                .iter()
                .filter(|s| b.truth.get(s.id).unwrap().origin == Origin::Out)
                .count();
            assert_eq!(outs, (p * 333.0 + 0.5).floor() as usize);
        }
    }

    #[test]
    fn labeled_split_has_exact_counts_and_disjoint_ids() {
        let b = generate(&spec()).unwrap();
        for c in 0..8 {
            assert_eq!(b.labeled.iter().filter(|s| s.label == Some(c)).count(), 4);
        }
        let mut ids = HashSet::new();
        for s in b.labeled.iter().chain(&b.unlabeled).chain(&b.test) {
            assert!(ids.insert(s.id));
        }
        for s in &b.labeled {
            let t = b.truth.get(s.id).unwrap();
            assert!(t.origin == Origin::In && t.class < 8);
        }
        assert!(b.unlabeled.iter().all(|s| s.label.is_none()));
    }

    #[test]
    fn independent_means_are_separated_exactly() {
        let s = spec();
        let means = cluster_means(&s);
        for i in 0..16 {
            for j in (i + 1)..16 {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d - 6.0).abs() < 1e-9, "{i} {j} {d}");
            }
        }
    }

    #[test]
    fn related_out_classes_sit_next_to_their_parent() {
        let s = BenchmarkSpec {
            mode: CorrelationMode::Related,
            ..spec()
        };
        let means = cluster_means(&s);
        for j in 0..8 {
            let d: f64 = means[8 + j]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sweep_shares_geometry_and_labeled_set() {
        let runs = sweep_proportions(&spec(), &[0.0, 0.8]).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(cluster_means(&runs[0].spec), cluster_means(&runs[1].spec));
        assert_eq!(runs[0].labeled, runs[1].labeled);
        assert_eq!(runs[0].test, runs[1].test);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&BenchmarkSpec {
            labels_per_class: 0,
            ..spec()
        })
        .is_err());
        assert!(generate(&BenchmarkSpec {
            out_classes: 0,
            ..spec()
        })
        .is_err());
        assert!(generate(&BenchmarkSpec {
            out_classes: 0,
            out_proportion: 0.0,
            ..spec()
        })
        .is_ok());
        assert!(generate(&BenchmarkSpec {
            in_classes: 1,
            ..spec()
        })
        .is_err());
    }

    #[test]
    fn regeneration_is_bit_identical() {
        assert_eq!(generate(&spec()).unwrap(), generate(&spec()).unwrap());
    }
}
