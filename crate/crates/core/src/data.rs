//! Synthetic dataset generation, label-skew partitioning across clients,
//! neighboring-dataset construction for stability measurement, and flat-file
//! ingestion.
//!
//! Partition design: the label space is divided into m equal shards by
//! sorting samples class-major and slicing the sorted order into m
//! contiguous, balanced pools. When the class count is at least m this gives
//! (nearly) whole-class shards; when it is smaller, a boundary class
//! straddles two shards at sample granularity, which keeps every skew level
//! feasible for any client count. Client i then draws (100−(m−1)·a)% of its
//! samples from its own shard and a% from each other client's shard.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core_math::{project_lp, NormP, RngStream, Vector};
use crate::error::{FalError, Result};
use crate::models::Label;

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vector,
    pub y: Label,
}

/// Parameters of the synthetic Gaussian-mixture generator: one spherical
/// unit-variance component per class, means on a centered regular simplex
/// with pairwise distance `separation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    /// When set, inputs are projected onto the l2 ball of this radius
    /// (the bounded-domain mode used for constant-validation runs).
    pub clip_radius: Option<f64>,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(FalError::invalid("generator needs at least 2 classes"));
        }
        if self.dim == 0 {
            return Err(FalError::invalid("generator needs dim >= 1"));
        }
        if self.per_class == 0 {
            return Err(FalError::invalid("generator needs per_class >= 1"));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(FalError::invalid(format!(
                "separation must be >= 0, got {}",
                self.separation
            )));
        }
        if self.separation > 0.0 && self.dim < self.classes - 1 {
            return Err(FalError::invalid(format!(
                "dim must be >= classes - 1 to place {} equidistant class means, got dim {}",
                self.classes, self.dim
            )));
        }
        if let Some(c) = self.clip_radius {
            if !c.is_finite() || c <= 0.0 {
                return Err(FalError::invalid(format!(
                    "clip_radius must be > 0, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// Class means: the k vertices of a centered regular simplex with
    /// pairwise distance `separation`, expressed in the first k−1
    /// coordinates (Helmert basis) and zero elsewhere.
    pub fn class_means(&self) -> Vec<Vector> {
        let k = self.classes;
        let scale = self.separation / 2.0f64.sqrt();
        (0..k)
            .map(|i| {
                let mut mean = vec![0.0; self.dim];
                if self.separation > 0.0 {
                    // coordinate j of vertex i: centered basis vector e_i
                    // expressed against Helmert row j+1 of length k
                    for (j, slot) in mean.iter_mut().take(k - 1).enumerate() {
                        let jj = (j + 1) as f64;
                        let norm = (jj * (jj + 1.0)).sqrt();
                        *slot = scale
                            * if i < j + 1 {
                                1.0 / norm
                            } else if i == j + 1 {
                                -jj / norm
                            } else {
                                0.0
                            };
                    }
                }
                Vector::from_raw(mean)
            })
            .collect()
    }

    /// One draw from the class-conditional distribution.
    pub fn sample_of_class(&self, class: usize, rng: &mut RngStream) -> Result<Sample> {
        if class >= self.classes {
            return Err(FalError::LabelOutOfRange {
                got: class,
                classes: self.classes,
            });
        }
        let mean = &self.class_means()[class];
        let mut x = Vector::from_raw(
            (0..self.dim)
                .map(|j| mean[j] + rng.sample_normal())
                .collect(),
        );
        if let Some(c) = self.clip_radius {
            x = project_lp(&x, &Vector::zeros(self.dim), c, NormP::L2)?;
        }
        Ok(Sample {
            x,
            y: Label::Class(class),
        })
    }

    /// Full balanced dataset, class-major sample order.
    pub fn generate(&self, name: &str, seed: u64, rng: &mut RngStream) -> Result<Dataset> {
        self.validate()?;
        let mut samples = Vec::with_capacity(self.classes * self.per_class);
        for class in 0..self.classes {
            for _ in 0..self.per_class {
                samples.push(self.sample_of_class(class, rng)?);
            }
        }
        Ok(Dataset {
            name: name.to_string(),
            samples,
            classes: Some(self.classes),
            seed: Some(seed),
            generator: Some(self.clone()),
        })
    }
}

/// A supervised dataset. Generated datasets carry their generator so that
/// stability experiments can draw fresh replacement samples from the same
/// distribution; ingested (CSV) datasets cannot, and support gap measurement
/// only.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    /// Number of classes for classification data, None for regression.
    pub classes: Option<usize>,
    pub seed: Option<u64>,
    pub generator: Option<GeneratorSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.dim())
    }

    /// Label range / dimension consistency check.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(FalError::Empty(format!("dataset {}", self.name)));
        }
        let dim = self.input_dim();
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.dim() != dim {
                return Err(FalError::DimensionMismatch {
                    expected: dim,
                    got: s.x.dim(),
                });
            }
            match (self.classes, s.y) {
                (Some(k), Label::Class(c)) => {
                    if c >= k {
                        return Err(FalError::LabelOutOfRange { got: c, classes: k });
                    }
                }
                (None, Label::Real(_)) => {}
                (Some(_), Label::Real(_)) => {
                    return Err(FalError::invalid(format!(
                        "sample {i} has a real label in a classification dataset"
                    )))
                }
                (None, Label::Class(_)) => {
                    return Err(FalError::invalid(format!(
                        "sample {i} has a class label in a regression dataset"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Samples selected by a partition, in the partition's index order.
    pub fn subset(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

/// Convenience wrapper: balanced unclipped Gaussian-mixture dataset.
pub fn generate_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    name: &str,
    seed: u64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    GeneratorSpec {
        classes,
        dim,
        per_class,
        separation,
        clip_radius: None,
    }
    .generate(name, seed, rng)
}

/// One client's slice of a parent dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client: usize,
    /// Indices into the parent dataset, ascending.
    pub indices: Vec<usize>,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Largest-remainder apportionment of `total` units over nonnegative
/// weights; ties broken by lowest index. Exact: result sums to `total`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        let mut out = vec![0; weights.len()];
        if !weights.is_empty() {
            // degenerate: spread evenly
            let base = total / weights.len();
            let extra = total % weights.len();
            for (i, o) in out.iter_mut().enumerate() {
                *o = base + usize::from(i < extra);
            }
        }
        return out;
    }
    let quotas: Vec<f64> = weights
        .iter()
        .map(|w| total as f64 * w / wsum)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Splits a classification dataset across `m` clients with label skew `a`
/// (a percentage). Client i holds (100−(m−1)·a)% of its samples from its own
/// class shard and a% from each other client's shard; per-client totals are
/// balanced within ±1 sample. Partitions are disjoint and cover the dataset.
pub fn partition_skew(
    dataset: &Dataset,
    m: usize,
    a: f64,
    rng: &mut RngStream,
) -> Result<Vec<ClientPartition>> {
    dataset.validate()?;
    if dataset.classes.is_none() {
        return Err(FalError::invalid(
            "label-skew partitioning needs a classification dataset",
        ));
    }
    if m == 0 {
        return Err(FalError::invalid("client count m must be >= 1"));
    }
    if !a.is_finite() || a < 0.0 {
        return Err(FalError::invalid(format!("skew a must be >= 0, got {a}")));
    }
    if (m as f64 - 1.0) * a > 100.0 + 1e-9 {
        return Err(FalError::invalid(format!(
            "infeasible skew: (m-1)*a = {} > 100",
            (m as f64 - 1.0) * a
        )));
    }
    if dataset.len() < m {
        return Err(FalError::invalid(format!(
            "dataset of {} samples cannot serve {m} clients",
            dataset.len()
        )));
    }

    let n = dataset.len();

    // class-major sample order defines the m shards (pools)
    let mut by_class: Vec<usize> = (0..n).collect();
    by_class.sort_by_key(|&i| {
        (
            match dataset.samples[i].y {
                Label::Class(c) => c,
                Label::Real(_) => 0,
            },
            i,
        )
    });
    let pool_sizes = apportion(n, &vec![1.0; m]);
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(m);
    let mut cursor = 0;
    for size in &pool_sizes {
        let mut pool: Vec<usize> = by_class[cursor..cursor + size].to_vec();
        // randomize which representatives of the shard each taker receives
        rng.shuffle(&mut pool);
        pools.push(pool);
        cursor += size;
    }

    // per-client demand on each donor pool
    let p_each = a / 100.0;
    let p_own = 1.0 - (m as f64 - 1.0) * p_each;
    let demand: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            let weights: Vec<f64> = (0..m)
                .map(|j| if i == j { p_own } else { p_each })
                .collect();
            apportion(pool_sizes[i], &weights)
        })
        .collect();

    // main allocation pass: serve demand while the donor pool lasts
    let mut partitions: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut pool_cursor = vec![0usize; m];
    let mut shortfall: Vec<usize> = vec![0; m];
    for i in 0..m {
        for j in 0..m {
            let want = demand[i][j];
            let available = pools[j].len() - pool_cursor[j];
            let take = want.min(available);
            partitions[i].extend_from_slice(&pools[j][pool_cursor[j]..pool_cursor[j] + take]);
            pool_cursor[j] += take;
            shortfall[i] += want - take;
        }
    }
    // backfill pass: leftover supply covers rounding shortfalls, ascending
    // (client, pool) order so the outcome is deterministic
    for i in 0..m {
        let mut need = shortfall[i];
        for j in 0..m {
            if need == 0 {
                break;
            }
            let available = pools[j].len() - pool_cursor[j];
            let take = need.min(available);
            partitions[i].extend_from_slice(&pools[j][pool_cursor[j]..pool_cursor[j] + take]);
            pool_cursor[j] += take;
            need -= take;
        }
    }

    Ok(partitions
        .into_iter()
        .enumerate()
        .map(|(client, mut indices)| {
            indices.sort_unstable();
            ClientPartition { client, indices }
        })
        .collect())
}

/// A single-sample replacement: the recipe for a neighboring dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSpec {
    /// Target client i′.
    pub client: usize,
    /// Position j within that client's partition.
    pub index: usize,
    /// The fresh sample z′.
    pub replacement: Sample,
}

impl NeighborSpec {
    /// Degenerate spec whose replacement equals the original sample — the
    /// null case for coupling-soundness checks.
    pub fn identity(
        dataset: &Dataset,
        partitions: &[ClientPartition],
        client: usize,
        index: usize,
    ) -> Result<Self> {
        let global = partition_index(partitions, client, index)?;
        Ok(NeighborSpec {
            client,
            index,
            replacement: dataset.samples[global].clone(),
        })
    }
}

fn partition_index(partitions: &[ClientPartition], client: usize, index: usize) -> Result<usize> {
    let part = partitions.get(client).ok_or_else(|| {
        FalError::invalid(format!(
            "client {client} out of range (m = {})",
            partitions.len()
        ))
    })?;
    part.indices.get(index).copied().ok_or_else(|| {
        FalError::invalid(format!(
            "sample index {index} out of range for client {client} (n_i = {})",
            part.len()
        ))
    })
}

/// Draws a replacement sample z′ from client i′'s distribution: its class
/// mixture is the client's empirical label mixture, the feature draw comes
/// from the dataset's generator. Guaranteed to differ from the sample it
/// replaces.
pub fn draw_replacement(
    dataset: &Dataset,
    partitions: &[ClientPartition],
    client: usize,
    index: usize,
    rng: &mut RngStream,
) -> Result<NeighborSpec> {
    let generator = dataset.generator.as_ref().ok_or_else(|| {
        FalError::Unsupported(
            "replacement draws need a generated dataset (ingested data has no known distribution)"
                .into(),
        )
    })?;
    let global = partition_index(partitions, client, index)?;
    let original = &dataset.samples[global];
    // the client's label mixture
    let class_of = |i: usize| match dataset.samples[i].y {
        Label::Class(c) => c,
        Label::Real(_) => 0,
    };
    let members = &partitions[client].indices;
    loop {
        let pick = members[rng.gen_usize(members.len())];
        let replacement = generator.sample_of_class(class_of(pick), rng)?;
        if replacement != *original {
            return Ok(NeighborSpec {
                client,
                index,
                replacement,
            });
        }
    }
}

/// The neighboring dataset: identical to `dataset` except that the sample at
/// the spec's (client, index) position is replaced. Partition structure is
/// unchanged, so the existing `ClientPartition`s apply to the result.
pub fn make_neighbor(
    dataset: &Dataset,
    partitions: &[ClientPartition],
    spec: &NeighborSpec,
) -> Result<Dataset> {
    let global = partition_index(partitions, spec.client, spec.index)?;
    if let (Some(k), Label::Class(c)) = (dataset.classes, spec.replacement.y) {
        if c >= k {
            return Err(FalError::LabelOutOfRange { got: c, classes: k });
        }
    }
    let mut neighbor = dataset.clone();
    neighbor.samples[global] = spec.replacement.clone();
    Ok(neighbor)
}

/// Number of sample positions at which two same-shape datasets differ.
pub fn hamming_distance(a: &Dataset, b: &Dataset) -> usize {
    a.samples
        .iter()
        .zip(&b.samples)
        .filter(|(sa, sb)| sa != sb)
        .count()
}

/// Reads a dataset from a `y,x0,x1,...` CSV file. Labels that all parse as
/// nonnegative integers give a classification dataset (classes = max+1);
/// otherwise labels are real-valued.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let io_err = |source| FalError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(io_err)?,
        None => return Err(FalError::Empty(format!("csv file {}", path.display()))),
    };
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"y") || columns.len() < 2 {
        return Err(FalError::CsvParse {
            line: 1,
            msg: format!("header must be y,x0,x1,...; got {header:?}"),
        });
    }
    let dim = columns.len() - 1;

    let mut raw_labels: Vec<f64> = Vec::new();
    let mut features: Vec<Vector> = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let line_no = line_no + 2; // 1-based, after the header
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(FalError::CsvParse {
                line: line_no,
                msg: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| FalError::CsvParse {
                line: line_no,
                msg: format!("not a number: {s:?}"),
            })?;
            if !v.is_finite() {
                return Err(FalError::CsvParse {
                    line: line_no,
                    msg: format!("non-finite value: {s:?}"),
                });
            }
            Ok(v)
        };
        raw_labels.push(parse(fields[0])?);
        let xs: Vec<f64> = fields[1..]
            .iter()
            .map(|f| parse(f))
            .collect::<Result<_>>()?;
        features.push(Vector::from_raw(xs));
    }
    if raw_labels.is_empty() {
        return Err(FalError::Empty(format!(
            "csv file {} has no data rows",
            path.display()
        )));
    }

    let all_integer = raw_labels
        .iter()
        .all(|y| y.fract() == 0.0 && *y >= 0.0 && *y <= usize::MAX as f64);
    let (classes, labels): (Option<usize>, Vec<Label>) = if all_integer {
        let as_class: Vec<usize> = raw_labels.iter().map(|y| *y as usize).collect();
        let k = as_class.iter().max().copied().unwrap_or(0) + 1;
        (Some(k.max(2)), as_class.into_iter().map(Label::Class).collect())
    } else {
        (None, raw_labels.into_iter().map(Label::Real).collect())
    };

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let dataset = Dataset {
        name,
        samples: features
            .into_iter()
            .zip(labels)
            .map(|(x, y)| Sample { x, y })
            .collect(),
        classes,
        seed: None,
        generator: None,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes a dataset in the `load_csv` schema. Floats are printed in Rust's
/// shortest round-trip form, so save→load→save is byte-stable.
pub fn save_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let io_err = |source| FalError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let dim = dataset.input_dim();
    let header: Vec<String> = std::iter::once("y".to_string())
        .chain((0..dim).map(|j| format!("x{j}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io_err)?;
    for s in &dataset.samples {
        let y = match s.y {
            Label::Class(c) => c.to_string(),
            Label::Real(v) => format!("{v}"),
        };
        let xs: Vec<String> = s.x.as_slice().iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{y},{}", xs.join(",")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_math::StreamKey;

    fn stream(seed: u64, purpose: &'static str) -> RngStream {
        RngStream::new(seed, &StreamKey::new(0, 0, purpose))
    }

    fn desk_generator(classes: usize, dim: usize, per_class: usize, sep: f64) -> GeneratorSpec {
        GeneratorSpec {
            classes,
            dim,
            per_class,
            separation: sep,
            clip_radius: None,
        }
    }

    #[test]
    fn class_means_are_equidistant_and_centered() {
        for k in [2, 3, 4, 7] {
            let gen = desk_generator(k, 16, 10, 3.0);
            let means = gen.class_means();
            assert_eq!(means.len(), k);
            let mut centroid = Vector::zeros(16);
            for m in &means {
                centroid.axpy_mut(1.0 / k as f64, m);
            }
            assert!(centroid.norm_l2() < 1e-12);
            for i in 0..k {
                for j in (i + 1)..k {
                    let d = means[i].sub(&means[j]).norm_l2();
                    assert!((d - 3.0).abs() < 1e-12, "k={k}: |m{i}-m{j}| = {d}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_well_formed() {
        let gen = desk_generator(4, 8, 25, 2.0);
        let a = gen.generate("d", 5, &mut stream(5, "data")).unwrap();
        let b = gen.generate("d", 5, &mut stream(5, "data")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(a.classes, Some(4));
        a.validate().unwrap();
        // class-major order
        let labels: Vec<usize> = a
            .samples
            .iter()
            .map(|s| s.y.as_class().unwrap())
            .collect();
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        assert_eq!(labels, sorted);
    }

    #[test]
    fn clipping_bounds_inputs() {
        let mut gen = desk_generator(2, 6, 50, 1.0);
        gen.clip_radius = Some(2.0);
        let d = gen.generate("clipped", 3, &mut stream(3, "data")).unwrap();
        for s in &d.samples {
            assert!(s.x.norm_l2() <= 2.0 + 1e-12);
        }
    }

    /// Nearest-empirical-class-mean classifier: a linear decision rule for
    /// spherical classes, used as a training-free accuracy oracle.
    fn nearest_mean_accuracy(train: &Dataset, test: &Dataset) -> f64 {
        let k = train.classes.unwrap();
        let dim = train.input_dim();
        let mut means = vec![Vector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for s in &train.samples {
            let c = s.y.as_class().unwrap();
            means[c].axpy_mut(1.0, &s.x);
            counts[c] += 1;
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.scale_mut(1.0 / (*c).max(1) as f64);
        }
        let correct = test
            .samples
            .iter()
            .filter(|s| {
                let mut best = (f64::INFINITY, 0);
                for (c, m) in means.iter().enumerate() {
                    let d = s.x.sub(m).norm_l2();
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1 == s.y.as_class().unwrap()
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn wide_separation_is_linearly_separable() {
        let gen = desk_generator(2, 2, 200, 20.0);
        let train = gen.generate("train", 1, &mut stream(1, "train")).unwrap();
        let test = gen.generate("test", 2, &mut stream(2, "test")).unwrap();
        let acc = nearest_mean_accuracy(&train, &test);
        assert!(acc > 0.99, "accuracy {acc}");
    }

    #[test]
    fn zero_separation_is_chance_level() {
        let gen = desk_generator(4, 8, 200, 0.0);
        let train = gen.generate("train", 1, &mut stream(10, "train")).unwrap();
        let test = gen.generate("test", 2, &mut stream(20, "test")).unwrap();
        let acc = nearest_mean_accuracy(&train, &test);
        let se = (0.25f64 * 0.75 / 800.0).sqrt();
        assert!((acc - 0.25).abs() < 4.0 * se, "accuracy {acc}");
    }

    fn check_partition_shape(d: &Dataset, parts: &[ClientPartition]) {
        let mut seen = vec![false; d.len()];
        for p in parts {
            for &i in &p.indices {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|s| *s), "partition does not cover dataset");
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let (lo, hi) = (
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap(),
        );
        assert!(hi - lo <= 1, "unbalanced partition: {sizes:?}");
    }

    /// Fraction of client i's samples that came from its own shard, computed
    /// from the class-major pool boundaries.
    fn own_shard_fractions(d: &Dataset, parts: &[ClientPartition]) -> Vec<f64> {
        let n = d.len();
        let m = parts.len();
        let mut by_class: Vec<usize> = (0..n).collect();
        by_class.sort_by_key(|&i| (d.samples[i].y.as_class().unwrap(), i));
        let mut pool_of = vec![0usize; n];
        let base = n / m;
        let extra = n % m;
        let mut cursor = 0;
        for (j, pool_of_j) in (0..m).map(|j| (j, base + usize::from(j < extra))) {
            for &idx in &by_class[cursor..cursor + pool_of_j] {
                pool_of[idx] = j;
            }
            cursor += pool_of_j;
        }
        parts
            .iter()
            .map(|p| {
                let own = p.indices.iter().filter(|&&i| pool_of[i] == p.client).count();
                own as f64 / p.len() as f64
            })
            .collect()
    }

    #[test]
    fn skew_partition_matches_design_fractions() {
        // k >= m: classic shard case
        let d = desk_generator(10, 10, 40, 1.0)
            .generate("d", 1, &mut stream(1, "data"))
            .unwrap();
        let parts = partition_skew(&d, 2, 10.0, &mut stream(1, "part")).unwrap();
        check_partition_shape(&d, &parts);
        for f in own_shard_fractions(&d, &parts) {
            assert!((f - 0.90).abs() < 2.0 / 200.0 + 1e-9, "own fraction {f}");
        }

        // k < m with exact integer demands
        let d = desk_generator(4, 8, 200, 1.0)
            .generate("d", 2, &mut stream(2, "data"))
            .unwrap();
        let parts = partition_skew(&d, 10, 5.0, &mut stream(2, "part")).unwrap();
        check_partition_shape(&d, &parts);
        for f in own_shard_fractions(&d, &parts) {
            assert!((f - 0.55).abs() < 2.0 / 80.0 + 1e-9, "own fraction {f}");
        }
    }

    #[test]
    fn zero_skew_gives_disjoint_shards() {
        let d = desk_generator(4, 8, 50, 1.0)
            .generate("d", 3, &mut stream(3, "data"))
            .unwrap();
        for m in [4, 10] {
            let parts = partition_skew(&d, m, 0.0, &mut stream(3, "part")).unwrap();
            check_partition_shape(&d, &parts);
            for f in own_shard_fractions(&d, &parts) {
                assert_eq!(f, 1.0);
            }
        }
    }

    #[test]
    fn single_client_owns_everything() {
        let d = desk_generator(4, 8, 10, 1.0)
            .generate("d", 4, &mut stream(4, "data"))
            .unwrap();
        let parts = partition_skew(&d, 1, 99.0, &mut stream(4, "part")).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), d.len());
    }

    #[test]
    fn infeasible_skew_rejected() {
        let d = desk_generator(4, 8, 10, 1.0)
            .generate("d", 5, &mut stream(5, "data"))
            .unwrap();
        let err = partition_skew(&d, 10, 25.0, &mut stream(5, "part")).unwrap_err();
        assert!(err.to_string().contains("(m-1)*a"), "{err}");
    }

    #[test]
    fn partitioning_is_deterministic() {
        let d = desk_generator(4, 8, 50, 1.0)
            .generate("d", 6, &mut stream(6, "data"))
            .unwrap();
        let a = partition_skew(&d, 5, 10.0, &mut stream(6, "part")).unwrap();
        let b = partition_skew(&d, 5, 10.0, &mut stream(6, "part")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn neighbor_differs_in_exactly_one_position() {
        let d = desk_generator(4, 8, 25, 2.0)
            .generate("d", 7, &mut stream(7, "data"))
            .unwrap();
        let parts = partition_skew(&d, 4, 10.0, &mut stream(7, "part")).unwrap();
        let spec = draw_replacement(&d, &parts, 2, 3, &mut stream(7, "neighbor")).unwrap();
        let neighbor = make_neighbor(&d, &parts, &spec).unwrap();
        assert_eq!(hamming_distance(&d, &neighbor), 1);
        // the changed position is the one named by the spec
        let global = parts[2].indices[3];
        assert_ne!(d.samples[global], neighbor.samples[global]);

        // determinism of the draw and of make_neighbor
        let spec2 = draw_replacement(&d, &parts, 2, 3, &mut stream(7, "neighbor")).unwrap();
        assert_eq!(spec, spec2);
        let neighbor2 = make_neighbor(&d, &parts, &spec2).unwrap();
        assert_eq!(neighbor, neighbor2);
    }

    #[test]
    fn identity_neighbor_is_the_null_case() {
        let d = desk_generator(4, 8, 10, 2.0)
            .generate("d", 8, &mut stream(8, "data"))
            .unwrap();
        let parts = partition_skew(&d, 2, 10.0, &mut stream(8, "part")).unwrap();
        let spec = NeighborSpec::identity(&d, &parts, 1, 0).unwrap();
        let neighbor = make_neighbor(&d, &parts, &spec).unwrap();
        assert_eq!(hamming_distance(&d, &neighbor), 0);
        assert_eq!(d, neighbor);
    }

    #[test]
    fn neighbor_bounds_checked() {
        let d = desk_generator(4, 8, 10, 2.0)
            .generate("d", 9, &mut stream(9, "data"))
            .unwrap();
        let parts = partition_skew(&d, 2, 10.0, &mut stream(9, "part")).unwrap();
        assert!(draw_replacement(&d, &parts, 5, 0, &mut stream(9, "n")).is_err());
        assert!(draw_replacement(&d, &parts, 0, 10_000, &mut stream(9, "n")).is_err());
    }

    #[test]
    fn ingested_data_cannot_be_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "y,x0\n0,1.5\n1,-0.5\n0,0.25\n1,2.0\n").unwrap();
        let d = load_csv(&path).unwrap();
        let parts = partition_skew(&d, 2, 0.0, &mut stream(10, "part")).unwrap();
        let err = draw_replacement(&d, &parts, 0, 0, &mut stream(10, "n")).unwrap_err();
        assert!(matches!(err, FalError::Unsupported(_)));
    }

    #[test]
    fn csv_hand_written_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        std::fs::write(&path, "y,x0,x1\n0,1.5,-2\n1,0.25,3.5\n0,0,0\n").unwrap();
        let d = load_csv(&path).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.classes, Some(2));
        assert_eq!(d.samples[0].x.as_slice(), &[1.5, -2.0]);
        assert_eq!(d.samples[1].y, Label::Class(1));
        assert_eq!(d.samples[2].x.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let gen = desk_generator(3, 5, 20, 1.5);
        let d = gen.generate("rt", 11, &mut stream(11, "data")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        save_csv(&p1, &d).unwrap();
        let loaded = load_csv(&p1).unwrap();
        assert_eq!(loaded.samples, d.samples);
        assert_eq!(loaded.classes, d.classes);
        save_csv(&p2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }

    #[test]
    fn csv_real_labels_are_regression() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.csv");
        std::fs::write(&path, "y,x0\n0.5,1\n-1.25,2\n").unwrap();
        let d = load_csv(&path).unwrap();
        assert_eq!(d.classes, None);
        assert_eq!(d.samples[0].y, Label::Real(0.5));
    }

    #[test]
    fn csv_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();

        let nan = dir.path().join("nan.csv");
        std::fs::write(&nan, "y,x0\n0,1.0\n1,NaN\n").unwrap();
        match load_csv(&nan).unwrap_err() {
            FalError::CsvParse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "y,x0,x1\n0,1.0\n").unwrap();
        match load_csv(&ragged).unwrap_err() {
            FalError::CsvParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(load_csv(&empty).unwrap_err(), FalError::Empty(_)));

        let header_only = dir.path().join("h.csv");
        std::fs::write(&header_only, "y,x0\n").unwrap();
        assert!(matches!(
            load_csv(&header_only).unwrap_err(),
            FalError::Empty(_)
        ));

        let bad_header = dir.path().join("bh.csv");
        std::fs::write(&bad_header, "label,x0\n0,1\n").unwrap();
        assert!(matches!(
            load_csv(&bad_header).unwrap_err(),
            FalError::CsvParse { line: 1, .. }
        ));
    }

    #[test]
    fn apportion_is_exact_and_deterministic() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(80, &[0.55, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05]),
            vec![44, 4, 4, 4, 4, 4, 4, 4, 4, 4]);
        let counts = apportion(7, &[0.2, 0.5, 0.3]);
        assert_eq!(counts.iter().sum::<usize>(), 7);
        assert_eq!(apportion(5, &[0.0, 0.0]), vec![3, 2]);
    }
}
