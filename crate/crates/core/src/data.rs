//! Datasets, global imbalance induction and Dirichlet client partitioning.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, FalError, Result};
use crate::rng::{derive_seed, rng_from, Stream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const SCALING_TOL: f64 = 1e-6;
/// Near-decomposable draws at small alpha need far more than a thousand sweeps.
pub const SCALING_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

/// A borrowed (features, label) pair used by the trainer.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(invalid("dataset must contain at least one example"));
        }
        if num_classes == 0 {
            return Err(invalid("dataset needs at least one class"));
        }
        let dim = examples[0].features.len();
        for ex in &examples {
            if ex.features.len() != dim {
                return Err(FalError::ShapeMismatch {
                    expected: dim,
                    actual: ex.features.len(),
                });
            }
            if ex.label >= num_classes {
                return Err(invalid(format!(
                    "label {} out of range for {num_classes} classes",
                    ex.label
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn label(&self, index: usize) -> usize {
        self.examples[index].label
    }

    pub fn features(&self, index: usize) -> &[f64] {
        &self.examples[index].features
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    pub fn samples(&self, indices: &[usize]) -> Vec<Sample<'_>> {
        indices
            .iter()
            .map(|&i| Sample {
                features: &self.examples[i].features,
                label: self.examples[i].label,
            })
            .collect()
    }

    pub fn all_samples(&self) -> Vec<Sample<'_>> {
        self.examples
            .iter()
            .map(|e| Sample {
                features: &e.features,
                label: e.label,
            })
            .collect()
    }
}

/// Dirichlet concentration; `Infinite` is the perfectly homogeneous limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Concentration {
    Finite(f64),
    Infinite,
}

impl Concentration {
    pub fn is_valid(&self) -> bool {
        match *self {
            Concentration::Finite(a) => a.is_finite() && a > 0.0,
            Concentration::Infinite => true,
        }
    }
}

impl fmt::Display for Concentration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Concentration::Finite(a) => write!(f, "{a}"),
            Concentration::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Concentration {
    type Err = FalError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "∞" => Ok(Concentration::Infinite),
            other => other
                .parse::<f64>()
                .map(Concentration::Finite)
                .map_err(|_| invalid(format!("bad concentration value {s:?}"))),
        }
    }
}

impl Serialize for Concentration {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Concentration::Finite(a) => serializer.serialize_f64(*a),
            Concentration::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Concentration {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(a) if a == f64::INFINITY => Ok(Concentration::Infinite),
            Raw::Num(a) => Ok(Concentration::Finite(a)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: Concentration,
    pub rho: f64,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(invalid("partitioning needs at least 2 clients"));
        }
        if !self.alpha.is_valid() {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.rho >= 1.0) || !self.rho.is_finite() {
            return Err(invalid(format!("rho must be >= 1, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Per-client lists of dataset positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub clients: Vec<Vec<usize>>,
}

impl ClientSplit {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Clients × classes count matrix.
    pub fn class_matrix(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut row = vec![0; dataset.num_classes];
                for &i in idx {
                    row[dataset.label(i)] += 1;
                }
                row
            })
            .collect()
    }

    pub fn write_matrix_csv<W: Write>(&self, dataset: &Dataset, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["client".to_string()];
        header.extend((0..dataset.num_classes).map(|c| format!("c{c}")));
        w.write_record(&header)?;
        for (k, row) in self.class_matrix(dataset).iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Class means drawn at random and rescaled so the closest pair sits exactly
/// `separation` apart.
pub fn synthetic_means(
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if num_classes < 2 || dim < 2 || !(separation > 0.0) {
        return Err(invalid(
            "synthetic data needs >= 2 classes, >= 2 dimensions and positive separation",
        ));
    }
    let mut rng = rng_from(derive_seed(seed, Stream::Dataset, 0, 0));
    let mut means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..num_classes {
        for b in (a + 1)..num_classes {
            min_dist = min_dist.min(crate::linalg::sq_dist(&means[a], &means[b]).sqrt());
        }
    }
    if !(min_dist > 0.0) {
        return Err(invalid("degenerate class means"));
    }
    let scale = separation / min_dist;
    for m in &mut means {
        m.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(means)
}

/// Unit-variance isotropic Gaussian samples around each mean, class-major order.
pub fn sample_clusters(means: &[Vec<f64>], per_class: usize, seed: u64, name: &str) -> Result<Dataset> {
    if per_class == 0 {
        return Err(invalid("per_class must be >= 1"));
    }
    let mut rng = rng_from(seed);
    let mut examples = Vec::with_capacity(means.len() * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect();
            examples.push(Example {
                id: examples.len(),
                features,
                label,
            });
        }
    }
    Dataset::new(name, means.len(), examples)
}

pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let means = synthetic_means(num_classes, dim, separation, seed)?;
    sample_clusters(
        &means,
        per_class,
        derive_seed(seed, Stream::Dataset, 1, 0),
        "synthetic",
    )
}

/// Held-out split sharing the class means of `generate_synthetic(.., seed)`.
pub fn generate_synthetic_test(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let means = synthetic_means(num_classes, dim, separation, seed)?;
    sample_clusters(
        &means,
        per_class,
        derive_seed(seed, Stream::Dataset, 2, 0),
        "synthetic-test",
    )
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FalError::Format("truncated IDX header".into()))
}

pub fn decode_idx(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let magic = read_u32_be(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FalError::Format(format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32_be(images, 4)? as usize;
    let rows = read_u32_be(images, 8)? as usize;
    let cols = read_u32_be(images, 12)? as usize;
    let pixels = rows * cols;
    if images.len() != 16 + n * pixels {
        return Err(FalError::Format(format!(
            "image payload is {} bytes, header implies {}",
            images.len().saturating_sub(16),
            n * pixels
        )));
    }
    let magic = read_u32_be(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FalError::Format(format!("bad label magic {magic:#010x}")));
    }
    let n_labels = read_u32_be(labels, 4)? as usize;
    if labels.len() != 8 + n_labels {
        return Err(FalError::Format("label payload length mismatch".into()));
    }
    if n_labels != n {
        return Err(FalError::Format(format!("{n} images but {n_labels} labels")));
    }
    if n == 0 {
        return Err(FalError::Format("empty IDX file".into()));
    }
    let examples: Vec<Example> = images[16..]
        .chunks_exact(pixels.max(1))
        .zip(&labels[8..])
        .enumerate()
        .map(|(id, (px, &label))| Example {
            id,
            features: px.iter().map(|&p| f64::from(p) / 255.0).collect(),
            label: usize::from(label),
        })
        .collect();
    let num_classes = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    Dataset::new(name, num_classes, examples)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    decode_idx(&images, &labels, &name)
}

/// Reads `label,f0,f1,...` rows.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("label") || headers.len() < 2 {
        return Err(FalError::Format("CSV header must be label,f0,f1,...".into()));
    }
    for (i, h) in headers.iter().skip(1).enumerate() {
        if h != format!("f{i}") {
            return Err(FalError::Format(format!("unexpected CSV column {h:?}")));
        }
    }
    let mut examples = Vec::new();
    for (id, record) in reader.records().enumerate() {
        let record = record?;
        let label = record[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| FalError::Format(format!("row {id}: bad label {:?}", &record[0])))?;
        let features = record
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| FalError::Format(format!("row {id}: bad feature value")))?;
        examples.push(Example { id, features, label });
    }
    let num_classes = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(name, num_classes, examples)
}

/// Per-class target counts under the exponential long-tail profile
/// `n_c = n_max * rho^(-c/(C-1))`.
pub fn imbalance_profile(class_counts: &[usize], rho: f64) -> Result<Vec<usize>> {
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(invalid(format!("rho must be >= 1, got {rho}")));
    }
    if class_counts.contains(&0) {
        return Err(invalid("every class needs at least one example"));
    }
    let num_classes = class_counts.len();
    if num_classes <= 1 {
        return Ok(class_counts.to_vec());
    }
    let decay = |c: usize| rho.powf(-(c as f64) / (num_classes - 1) as f64);
    let n_max = class_counts
        .iter()
        .enumerate()
        .map(|(c, &n)| (n as f64 / decay(c) + 1e-9).floor())
        .fold(f64::INFINITY, f64::min);
    Ok(class_counts
        .iter()
        .enumerate()
        .map(|(c, &n)| ((n_max * decay(c)).round() as usize).clamp(1, n))
        .collect())
}

pub fn induce_global_imbalance(dataset: &Dataset, rho: f64, seed: u64) -> Result<Dataset> {
    let targets = imbalance_profile(&dataset.class_counts(), rho)?;
    let mut rng = rng_from(seed);
    let mut keep = vec![false; dataset.len()];
    for (class, &target) in targets.iter().enumerate() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.label(i) == class)
            .collect();
        members.shuffle(&mut rng);
        for &i in &members[..target] {
            keep[i] = true;
        }
    }
    let examples = dataset
        .examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    Dataset::new(
        format!("{}-rho{rho}", dataset.name),
        dataset.num_classes,
        examples,
    )
}

/// Alternating row/column normalisation until column sums match within `tol`
/// (relative). Row sums are exact after every sweep.
pub fn scale_to_margins(
    matrix: &mut [Vec<f64>],
    row_targets: &[f64],
    col_targets: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<usize> {
    let cols = col_targets.len();
    let mut residual = f64::INFINITY;
    for iter in 0..max_iters {
        for c in 0..cols {
            let sum: f64 = matrix.iter().map(|row| row[c]).sum();
            let factor = if col_targets[c] == 0.0 || sum == 0.0 {
                0.0
            } else {
                col_targets[c] / sum
            };
            matrix.iter_mut().for_each(|row| row[c] *= factor);
        }
        for (row, &target) in matrix.iter_mut().zip(row_targets) {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                let factor = target / sum;
                row.iter_mut().for_each(|v| *v *= factor);
            }
        }
        residual = (0..cols)
            .map(|c| {
                let sum: f64 = matrix.iter().map(|row| row[c]).sum();
                (sum - col_targets[c]).abs() / col_targets[c].max(1.0)
            })
            .fold(0.0, f64::max);
        if residual < tol {
            return Ok(iter + 1);
        }
    }
    Err(FalError::NonConvergence {
        iterations: max_iters,
        residual,
    })
}

/// Integer matrix with exact row and column sums, close to `real`: floors
/// first, then one extra unit per non-integer cell handed out by largest
/// fractional part. When the greedy pass gets stuck, augmenting paths move
/// units between cells so every entry ends at its floor or ceiling whenever
/// the margins allow it.
pub fn round_to_margins(real: &[Vec<f64>], row_targets: &[usize], col_targets: &[usize]) -> Vec<Vec<usize>> {
    let rows = real.len();
    let cols = col_targets.len();
    let mut out: Vec<Vec<usize>> = real
        .iter()
        .map(|r| r.iter().map(|v| v.max(0.0).floor() as usize).collect())
        .collect();
    let mut row_need: Vec<i64> = (0..rows)
        .map(|k| row_targets[k] as i64 - out[k].iter().sum::<usize>() as i64)
        .collect();
    let mut col_need: Vec<i64> = (0..cols)
        .map(|c| col_targets[c] as i64 - out.iter().map(|r| r[c]).sum::<usize>() as i64)
        .collect();

    let mut cells: Vec<(usize, usize, f64)> = (0..rows)
        .flat_map(|k| (0..cols).map(move |c| (k, c)))
        .map(|(k, c)| (k, c, real[k][c] - real[k][c].floor()))
        .collect();
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let open: Vec<Vec<bool>> = real.iter().map(|r| r.iter().map(|v| v.max(0.0).fract() > 0.0).collect()).collect();
    let mut bumped = vec![vec![false; cols]; rows];
    for &(k, c, _) in &cells {
        if open[k][c] && row_need[k] > 0 && col_need[c] > 0 {
            bumped[k][c] = true;
            row_need[k] -= 1;
            col_need[c] -= 1;
        }
    }
    while let Some((row, col)) = augment(&mut bumped, &open, &row_need, &col_need) {
        row_need[row] -= 1;
        col_need[col] -= 1;
    }
    for (k, c) in (0..rows).flat_map(|k| (0..cols).map(move |c| (k, c))) {
        out[k][c] += usize::from(bumped[k][c]);
    }
    // Margins that no within-one rounding can meet (only possible when the
    // real matrix misses them): any cell with both deficits will do.
    for k in 0..rows {
        for c in 0..cols {
            while row_need[k] > 0 && col_need[c] > 0 {
                out[k][c] += 1;
                row_need[k] -= 1;
                col_need[c] -= 1;
            }
        }
    }
    debug_assert!(row_need.iter().all(|&v| v == 0) && col_need.iter().all(|&v| v == 0));
    out
}

/// Breadth-first search for an alternating path from a row with a deficit to
/// a column with one: open unbumped cells are entered row→column, bumped cells
/// column→row. Flipping the path places one more unit.
fn augment(bumped: &mut [Vec<bool>], open: &[Vec<bool>], row_need: &[i64], col_need: &[i64]) -> Option<(usize, usize)> {
    let rows = bumped.len();
    let cols = col_need.len();
    let mut row_from: Vec<Option<usize>> = vec![None; rows];
    let mut col_from: Vec<Option<usize>> = vec![None; cols];
    let mut row_seen = vec![false; rows];
    let mut queue: std::collections::VecDeque<usize> = (0..rows).filter(|&k| row_need[k] > 0).collect();
    queue.iter().for_each(|&k| row_seen[k] = true);
    while let Some(k) = queue.pop_front() {
        for c in 0..cols {
            if !open[k][c] || bumped[k][c] || col_from[c].is_some() {
                continue;
            }
            col_from[c] = Some(k);
            if col_need[c] > 0 {
                let end = c;
                let mut c = c;
                loop {
                    let k = col_from[c].expect("visited column");
                    bumped[k][c] = true;
                    match row_from[k] {
                        Some(prev) => {
                            bumped[k][prev] = false;
                            c = prev;
                        }
                        None => return Some((k, end)),
                    }
                }
            }
            for next in 0..rows {
                if bumped[next][c] && !row_seen[next] {
                    row_seen[next] = true;
                    row_from[next] = Some(c);
                    queue.push_back(next);
                }
            }
        }
    }
    None
}

/// Equal-sized client shares whose class mix follows `Dir(alpha·1)`, scaled so
/// the columns reproduce the dataset's class counts.
pub fn partition_counts(class_counts: &[usize], config: &PartitionConfig) -> Result<Vec<Vec<usize>>> {
    config.validate()?;
    let k = config.num_clients;
    let total: usize = class_counts.iter().sum();
    if total < k {
        return Err(invalid(format!("{total} examples cannot fill {k} clients")));
    }
    let col_targets: Vec<f64> = class_counts.iter().map(|&n| n as f64).collect();
    let row_real = vec![total as f64 / k as f64; k];
    let row_targets: Vec<usize> = (0..k).map(|i| total / k + usize::from(i < total % k)).collect();

    let real = match config.alpha {
        Concentration::Infinite => (0..k)
            .map(|_| col_targets.iter().map(|&n| n / k as f64).collect())
            .collect::<Vec<Vec<f64>>>(),
        Concentration::Finite(alpha) => {
            let mut rng = rng_from(derive_seed(config.seed, Stream::Partition, 0, 0));
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid(e.to_string()))?;
            let mut m: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let draws: Vec<f64> = (0..class_counts.len())
                        .map(|_| gamma.sample(&mut rng).max(f64::MIN_POSITIVE))
                        .collect();
                    let s: f64 = draws.iter().sum();
                    draws.into_iter().map(|v| v / s).collect()
                })
                .collect();
            scale_to_margins(&mut m, &row_real, &col_targets, SCALING_TOL, SCALING_MAX_ITERS)?;
            m
        }
    };
    Ok(round_to_margins(&real, &row_targets, class_counts))
}

pub fn partition_dirichlet(dataset: &Dataset, config: &PartitionConfig) -> Result<ClientSplit> {
    let counts = partition_counts(&dataset.class_counts(), config)?;
    let mut rng = rng_from(derive_seed(config.seed, Stream::Partition, 1, 0));
    let mut clients = vec![Vec::new(); config.num_clients];
    for class in 0..dataset.num_classes {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.label(i) == class)
            .collect();
        members.shuffle(&mut rng);
        let mut cursor = 0;
        for (client, row) in clients.iter_mut().zip(&counts) {
            client.extend_from_slice(&members[cursor..cursor + row[class]]);
            cursor += row[class];
        }
    }
    clients.iter_mut().for_each(|c| c.sort_unstable());
    Ok(ClientSplit { clients })
}

/// Normalised label histogram; the empty set maps to the uniform vector.
pub fn class_distribution(labels: &[usize], num_classes: usize) -> Vec<f64> {
    if labels.is_empty() {
        return vec![1.0 / num_classes as f64; num_classes];
    }
    let mut dist = vec![0.0; num_classes];
    for &l in labels {
        dist[l] += 1.0;
    }
    let n = labels.len() as f64;
    dist.iter_mut().for_each(|v| *v /= n);
    dist
}
