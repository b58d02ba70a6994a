//! Synthetic datasets, Dirichlet non-IID partitioning, client sampling and
//! batch drawing.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::models::{Batch, Labels, ModelError};
use crate::numkit::RngStream;

/// Stream tags. Every consumer of randomness hangs off the root stream under
/// one of these.
pub mod tags {
    pub const DATASET: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const CLIENT_SAMPLE: u64 = 3;
    pub const LOCAL_BATCH: u64 = 4;
    pub const INIT: u64 = 5;
    pub const TRAIN_LOSS: u64 = 6;
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),
    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },
    #[error("cannot sample {count} clients out of {clients}")]
    TooManySampled { count: usize, clients: usize },
    #[error("client shard {0} is empty")]
    EmptyShard(usize),
    #[error("{path}: line {line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("{path}: labels are not contiguous, class {missing} is absent (max label {max})")]
    NonContiguousLabels { path: String, missing: usize, max: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("partition is not a disjoint cover: {0}")]
    BadPartition(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(DataError::InvalidParams(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::InvalidParams(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|r| r.len() != first.len()) {
                return Err(DataError::InvalidParams("ragged feature rows".into()));
            }
        }
        Ok(Self {
            features,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Batch> {
        let features = indices.iter().map(|&i| self.features[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Batch::new(features, Labels::Classes(labels))?)
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Ok(Batch::new(self.features.clone(), Labels::Classes(self.labels.clone()))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blobs {
    pub train: Dataset,
    pub test: Dataset,
}

/// `classes` isotropic Gaussian clusters whose means lie on a sphere of
/// radius `separation`. The test split has `ceil(0.2 * classes * per_class)`
/// points with labels assigned round-robin.
pub fn make_blobs(
    classes: usize,
    per_class: usize,
    d_in: usize,
    separation: f64,
    noise: f64,
    stream: &RngStream,
) -> Result<Blobs> {
    if classes < 2 || per_class < 1 || d_in < 1 {
        return Err(DataError::InvalidParams(format!(
            "need classes >= 2, per_class >= 1, d_in >= 1 (got {classes}, {per_class}, {d_in})"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) || !(noise > 0.0 && noise.is_finite()) {
        return Err(DataError::InvalidParams(format!(
            "separation and noise must be positive (got {separation}, {noise})"
        )));
    }
    let mut rng = stream.child(0).rng();
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..d_in).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| separation * x / n).collect();
            }
        })
        .collect();

    let draw = |rng: &mut rand_chacha::ChaCha12Rng, label: usize| -> Vec<f64> {
        means[label]
            .iter()
            .map(|m| m + noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let mut rng = stream.child(1).rng();
    let mut train_x = Vec::with_capacity(classes * per_class);
    let mut train_y = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            train_x.push(draw(&mut rng, c));
            train_y.push(c);
        }
    }
    let n_test = (2 * classes * per_class).div_ceil(10);
    let mut rng = stream.child(2).rng();
    let (test_x, test_y): (Vec<_>, Vec<_>) = (0..n_test).map(|i| (draw(&mut rng, i % classes), i % classes)).unzip();

    Ok(Blobs {
        train: Dataset::new(train_x, train_y, classes, Split::Train)?,
        test: Dataset::new(test_x, test_y, classes, Split::Test)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Sorted TRAIN indices owned by this client.
    pub indices: Vec<usize>,
    /// The sampled class distribution.
    pub p: Vec<f64>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<ClientShard>,
    pub alpha: f64,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    /// Verifies the shards are nonempty, pairwise disjoint and together cover
    /// `0..n` exactly, and that every `p` is a simplex point.
    pub fn check_cover(&self, n: usize) -> Result<()> {
        let mut owner = vec![usize::MAX; n];
        for shard in &self.shards {
            if shard.indices.is_empty() {
                return Err(DataError::BadPartition(format!("client {} is empty", shard.client_id)));
            }
            let sum: f64 = shard.p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || shard.p.iter().any(|&v| !(v >= 0.0)) {
                return Err(DataError::BadPartition(format!(
                    "client {} has invalid class distribution (sum {sum})",
                    shard.client_id
                )));
            }
            for &i in &shard.indices {
                if i >= n {
                    return Err(DataError::BadPartition(format!("index {i} out of range {n}")));
                }
                if owner[i] != usize::MAX {
                    return Err(DataError::BadPartition(format!(
                        "index {i} owned by clients {} and {}",
                        owner[i], shard.client_id
                    )));
                }
                owner[i] = shard.client_id;
            }
        }
        match owner.iter().position(|&o| o == usize::MAX) {
            Some(i) => Err(DataError::BadPartition(format!("index {i} unassigned"))),
            None => Ok(()),
        }
    }
}

/// Dirichlet(alpha, ..., alpha) draw via normalized Gamma(alpha, 1) variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, classes: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| DataError::InvalidParams(format!("alpha {alpha}: {e}")))?;
    // Tiny alpha can underflow every component to zero; redraw in that case.
    for _ in 0..1000 {
        let g: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = g.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(g.into_iter().map(|v| v / sum).collect());
        }
    }
    Err(DataError::InvalidParams(format!("alpha {alpha} too small to sample")))
}

/// Total-variation distance to the uniform distribution.
pub fn tv_to_uniform(p: &[f64]) -> f64 {
    let u = 1.0 / p.len() as f64;
    0.5 * p.iter().map(|v| (v - u).abs()).sum::<f64>()
}

/// Splits `total` items proportionally to `weights` with largest-remainder
/// rounding; ties go to the lower index.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| total as f64 * w / sum).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Non-IID split: each client draws `p_i ~ Dirichlet(alpha)`, then each
/// class's samples are divided across clients in proportion to the column
/// `(p_1[c], ..., p_M[c])`. Empty clients take one sample from the largest
/// shard until none are empty.
pub fn dirichlet_partition(dataset: &Dataset, clients: usize, alpha: f64, stream: &RngStream) -> Result<Partition> {
    if clients == 0 {
        return Err(DataError::InvalidParams("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::InvalidParams(format!("alpha must be positive, got {alpha}")));
    }
    if clients > dataset.len() {
        return Err(DataError::TooManyClients {
            clients,
            samples: dataset.len(),
        });
    }
    let classes = dataset.classes;
    let mut rng = stream.child(0).rng();
    let ps = (0..clients)
        .map(|_| sample_dirichlet(alpha, classes, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = stream.child(1).rng();
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let column: Vec<f64> = ps.iter().map(|p| p[c]).collect();
        let counts = largest_remainder(members.len(), &column);
        let mut rest = members.as_slice();
        for (client, &k) in counts.iter().enumerate() {
            let (take, tail) = rest.split_at(k);
            owned[client].extend_from_slice(take);
            rest = tail;
        }
    }

    while let Some(empty) = owned.iter().position(Vec::is_empty) {
        let largest = (0..clients).fold(0, |b, i| if owned[i].len() > owned[b].len() { i } else { b });
        let moved = owned[largest].pop().expect("largest shard is nonempty");
        owned[empty].push(moved);
    }

    let shards = owned
        .into_iter()
        .zip(ps)
        .enumerate()
        .map(|(client_id, (mut indices, p))| {
            indices.sort_unstable();
            ClientShard { client_id, indices, p }
        })
        .collect();
    let partition = Partition { shards, alpha };
    partition.check_cover(dataset.len())?;
    Ok(partition)
}

/// Uniform sample of `count` distinct client ids for `round`, sorted.
pub fn sample_clients(clients: usize, count: usize, round: u64, stream: &RngStream) -> Result<Vec<usize>> {
    if count == 0 || count > clients {
        return Err(DataError::TooManySampled { count, clients });
    }
    let mut rng = stream.descend(&[round, tags::CLIENT_SAMPLE]).rng();
    let mut ids = index::sample(&mut rng, clients, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Draws `min(batch_size, |shard|)` indices uniformly with replacement from
/// the shard. `stream` identifies the (round, client); `step` selects the
/// sub-stream.
pub fn next_batch(
    shard: &ClientShard,
    dataset: &Dataset,
    batch_size: usize,
    stream: &RngStream,
    step: u64,
) -> Result<Batch> {
    if shard.is_empty() {
        return Err(DataError::EmptyShard(shard.client_id));
    }
    if batch_size == 0 {
        return Err(DataError::InvalidParams("batch size must be positive".into()));
    }
    let mut rng = stream.child(step).rng();
    let n = batch_size.min(shard.len());
    let picks: Vec<usize> = (0..n)
        .map(|_| shard.indices[rng.random_range(0..shard.len())])
        .collect();
    dataset.subset(&picks)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a `f0,...,f{d-1},label` CSV. The class count is `max label + 1`
/// and every class below it must occur.
pub fn load_csv(path: &Path, split: Split) -> Result<Dataset> {
    let shown = path.display().to_string();
    let malformed = |line: usize, msg: String| DataError::Malformed {
        path: shown.clone(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path)(io),
            other => malformed(1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let width = header.len();
    if width < 2 {
        return Err(malformed(1, "header needs at least one feature and a label".into()));
    }
    for (i, name) in header.iter().take(width - 1).enumerate() {
        if name != format!("f{i}") {
            return Err(malformed(1, format!("expected column f{i}, found '{name}'")));
        }
    }
    if &header[width - 1] != "label" {
        return Err(malformed(
            1,
            format!("last column must be 'label', found '{}'", &header[width - 1]),
        ));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| malformed(line, e.to_string()))?;
        if record.len() != width {
            return Err(malformed(
                line,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        let row = record
            .iter()
            .take(width - 1)
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| malformed(line, format!("bad feature value '{f}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = record[width - 1]
            .parse::<usize>()
            .map_err(|_| malformed(line, format!("bad label '{}'", &record[width - 1])))?;
        features.push(row);
        labels.push(label);
    }
    let max = labels
        .iter()
        .copied()
        .max()
        .ok_or_else(|| malformed(2, "no data rows".into()))?;
    let mut seen = vec![false; max + 1];
    for &y in &labels {
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(DataError::NonContiguousLabels {
            path: shown,
            missing,
            max,
        });
    }
    Dataset::new(features, labels, max + 1, split)
}

/// Writes a dataset in the format read by [`load_csv`]. Reals use the
/// shortest representation that round-trips.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path)(io),
        other => DataError::InvalidParams(format!("{other:?}")),
    })?;
    let wrap = |e: csv::Error| DataError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut header: Vec<String> = (0..dataset.d_in()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(wrap)?;
    for (x, y) in dataset.features.iter().zip(&dataset.labels) {
        let mut row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        row.push(y.to_string());
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Monte-Carlo statistics of `TV(p, uniform)` for `p ~ Dirichlet(alpha)`.
pub fn dirichlet_tv_stats(alpha: f64, classes: usize, draws: usize, stream: &RngStream) -> Result<TvStats> {
    if draws == 0 || classes < 2 {
        return Err(DataError::InvalidParams("need draws >= 1 and classes >= 2".into()));
    }
    let mut rng = stream.rng();
    let tvs = (0..draws)
        .map(|_| sample_dirichlet(alpha, classes, &mut rng).map(|p| tv_to_uniform(&p)))
        .collect::<Result<Vec<f64>>>()?;
    let n = draws as f64;
    let mean = tvs.iter().sum::<f64>() / n;
    let var = tvs.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok(TvStats {
        mean,
        std: var.sqrt(),
        min: tvs.iter().cloned().fold(f64::INFINITY, f64::min),
        max: tvs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Model;
    use crate::numkit::ParamVector;

    fn blobs(seed: u64) -> Blobs {
        make_blobs(4, 30, 3, 4.0, 0.5, &RngStream::new(seed).child(tags::DATASET)).unwrap()
    }

    #[test]
    fn blob_counts() {
        let b = make_blobs(2, 10, 2, 3.0, 1.0, &RngStream::new(0)).unwrap();
        assert_eq!(b.train.len(), 20);
        assert_eq!(b.train.class_counts(), vec![10, 10]);
        assert_eq!(b.test.len(), 4);
        assert_eq!(b.train.split, Split::Train);
        assert_eq!(b.test.split, Split::Test);
        assert_eq!(make_blobs(3, 7, 2, 1.0, 1.0, &RngStream::new(0)).unwrap().test.len(), 5);
    }

    #[test]
    fn blob_determinism_and_errors() {
        assert_eq!(blobs(3), blobs(3));
        assert_ne!(blobs(3), blobs(4));
        assert!(make_blobs(1, 10, 2, 1.0, 1.0, &RngStream::new(0)).is_err());
        assert!(make_blobs(2, 0, 2, 1.0, 1.0, &RngStream::new(0)).is_err());
        assert!(make_blobs(2, 5, 2, 0.0, 1.0, &RngStream::new(0)).is_err());
        assert!(make_blobs(2, 5, 2, 1.0, 0.0, &RngStream::new(0)).is_err());
    }

    #[test]
    fn nearly_noiseless_blobs_are_linearly_separable() {
        // plain gradient descent on the logistic model reaches 100% train accuracy
        let b = make_blobs(3, 20, 4, 5.0, 1e-3, &RngStream::new(1)).unwrap();
        let m = Model::logistic(4, 3).unwrap();
        let batch = b.train.as_batch().unwrap();
        let mut w = ParamVector::zeros(m.param_dim()).unwrap();
        for _ in 0..300 {
            let g = m.grad(&w, &batch).unwrap();
            w.axpy(-0.5, &g).unwrap();
        }
        let correct = b
            .train
            .features
            .iter()
            .zip(&b.train.labels)
            .filter(|(x, &y)| m.predict(&w, x).unwrap() == crate::models::Prediction::Class(y))
            .count();
        assert_eq!(correct, b.train.len());
    }

    #[test]
    fn single_client_owns_everything() {
        let b = blobs(0);
        let p = dirichlet_partition(&b.train, 1, 0.3, &RngStream::new(0)).unwrap();
        assert_eq!(p.shards.len(), 1);
        assert_eq!(p.shards[0].indices, (0..b.train.len()).collect::<Vec<_>>());
        assert!((p.shards[0].p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn partition_errors() {
        let b = blobs(0);
        assert!(matches!(
            dirichlet_partition(&b.train, b.train.len() + 1, 1.0, &RngStream::new(0)),
            Err(DataError::TooManyClients { .. })
        ));
        assert!(dirichlet_partition(&b.train, 0, 1.0, &RngStream::new(0)).is_err());
        assert!(dirichlet_partition(&b.train, 2, 0.0, &RngStream::new(0)).is_err());
    }

    #[test]
    fn partition_repairs_empty_shards() {
        // as many clients as samples with heavy skew forces repairs
        let b = make_blobs(2, 6, 2, 1.0, 1.0, &RngStream::new(2)).unwrap();
        let p = dirichlet_partition(&b.train, 12, 0.05, &RngStream::new(9)).unwrap();
        assert!(p.shards.iter().all(|s| s.len() == 1));
        p.check_cover(12).unwrap();
    }

    #[test]
    fn check_cover_detects_overlap_and_gaps() {
        let shard = |id, idx: Vec<usize>| ClientShard {
            client_id: id,
            indices: idx,
            p: vec![0.5, 0.5],
        };
        let overlap = Partition {
            shards: vec![shard(0, vec![0, 1]), shard(1, vec![1, 2])],
            alpha: 1.0,
        };
        assert!(overlap.check_cover(3).is_err());
        let gap = Partition {
            shards: vec![shard(0, vec![0]), shard(1, vec![2])],
            alpha: 1.0,
        };
        assert!(gap.check_cover(3).is_err());
    }

    #[test]
    fn largest_remainder_sums_exactly_and_breaks_ties_low() {
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(5, &[0.0, 0.0]), vec![3, 2]);
        assert_eq!(largest_remainder(7, &[0.7, 0.2, 0.1]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn client_sampling() {
        let s = RngStream::new(4);
        assert_eq!(sample_clients(5, 5, 0, &s).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_clients(1, 1, 7, &s).unwrap(), vec![0]);
        let a = sample_clients(50, 10, 3, &s).unwrap();
        assert_eq!(a, sample_clients(50, 10, 3, &s).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            sample_clients(3, 4, 0, &s),
            Err(DataError::TooManySampled { .. })
        ));
    }

    #[test]
    fn batch_from_single_point_shard() {
        let b = blobs(0);
        let shard = ClientShard {
            client_id: 0,
            indices: vec![7],
            p: vec![0.25; 4],
        };
        let batch = next_batch(&shard, &b.train, 10, &RngStream::new(0), 0).unwrap();
        assert_eq!(batch.size(), 1);
        assert_eq!(batch.features[0], b.train.features[7]);
        let empty = ClientShard {
            indices: vec![],
            ..shard
        };
        assert!(matches!(
            next_batch(&empty, &b.train, 10, &RngStream::new(0), 0),
            Err(DataError::EmptyShard(0))
        ));
    }

    #[test]
    fn batch_draws_are_uniform_and_replayable() {
        // chi-square over 10 shard slots, 400 steps of batch 5
        let b = blobs(0);
        let shard = ClientShard {
            client_id: 0,
            indices: (0..10).collect(),
            p: vec![0.25; 4],
        };
        let s = RngStream::new(1).descend(&[3, 0]);
        let mut counts = [0usize; 10];
        for step in 0..400 {
            let batch = next_batch(&shard, &b.train, 5, &s, step).unwrap();
            assert_eq!(batch, next_batch(&shard, &b.train, 5, &s, step).unwrap());
            for x in &batch.features {
                let i = b.train.features.iter().position(|f| f == x).unwrap();
                counts[i] += 1;
            }
        }
        let expected = 200.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 9 dof, p = 0.001 critical value
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let b = blobs(5);
        let path = dir.path().join("train.csv");
        save_csv(&b.train, &path).unwrap();
        assert_eq!(load_csv(&path, Split::Train).unwrap(), b.train);

        let small = dir.path().join("small.csv");
        std::fs::write(&small, "f0,f1,label\n1.0,2.0,0\n3,4,1\n-1,0.5,1\n").unwrap();
        let d = load_csv(&small, Split::Train).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.classes, 2);

        let gap = dir.path().join("gap.csv");
        std::fs::write(&gap, "f0,label\n1.0,0\n2.0,2\n").unwrap();
        assert!(matches!(
            load_csv(&gap, Split::Train),
            Err(DataError::NonContiguousLabels { missing: 1, .. })
        ));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "f0,label\n1.0,0\nabc,1\n").unwrap();
        match load_csv(&bad, Split::Train) {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let short = dir.path().join("short.csv");
        std::fs::write(&short, "f0,f1,label\n1.0,0\n").unwrap();
        assert!(matches!(
            load_csv(&short, Split::Train),
            Err(DataError::Malformed { line: 2, .. })
        ));
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv"), Split::Train),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_to_uniform(&[0.5, 0.5]), 0.0);
        assert!((tv_to_uniform(&[1.0, 0.0, 0.0, 0.0]) - 0.75).abs() < 1e-15);
    }
}
