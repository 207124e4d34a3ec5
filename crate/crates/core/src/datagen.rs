//! Synthetic class-incremental task streams and non-IID client partitioners.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dirichlet_sample, RngStream, Vector};
use crate::ClassId;

/// Assignment redraws allowed before quantity-based partitioning gives up.
pub const COVERAGE_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vector,
    pub label: ClassId,
}

/// Disjoint class sets, one per stage, in stage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub tasks: Vec<Vec<ClassId>>,
}

impl TaskSchedule {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes of tasks `0..=stage` (zero-based stage index).
    pub fn seen_through(&self, stage: usize) -> Vec<ClassId> {
        let mut all: Vec<ClassId> = self.tasks[..=stage].iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionMode {
    /// Every client holds exactly `alpha` labels of the task.
    Quantity { alpha: usize },
    /// Per-class client shares drawn from Dirichlet(`beta`).
    Dirichlet { beta: f64 },
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionMode::Quantity { alpha } => write!(f, "quantity(alpha={alpha})"),
            PartitionMode::Dirichlet { beta } => write!(f, "dirichlet(beta={beta})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients: must be >= 1".into()));
        }
        match self.mode {
            PartitionMode::Quantity { alpha: 0 } => {
                Err(Error::Config("alpha: must be >= 1".into()))
            }
            PartitionMode::Dirichlet { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(Error::Config("beta: must be > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Partitions one task's samples. `stage` keys the random stream.
    pub fn partition(
        &self,
        task_samples: &[LabeledSample],
        task_classes: &[ClassId],
        stage: usize,
    ) -> Result<Vec<ClientShard>> {
        let seed = crate::numkit::derive_seed(self.seed, "partition", &[stage as u64]);
        match self.mode {
            PartitionMode::Quantity { alpha } => {
                partition_quantity(task_samples, task_classes, self.num_clients, alpha, seed)
            }
            PartitionMode::Dirichlet { beta } => {
                partition_dirichlet(task_samples, task_classes, self.num_clients, beta, seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<LabeledSample>,
}

impl ClientShard {
    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.label).or_insert(0) += 1;
        }
        counts
    }
}

/// Gaussian blobs: one uniform center per class in `[-scale, scale]^dim`.
pub fn synth_gaussian(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    center_scale: f64,
    noise_stddev: f64,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if num_classes == 0 || input_dim == 0 || per_class == 0 {
        return Err(Error::InvalidArgument(
            "synth_gaussian needs num_classes, input_dim and per_class >= 1".into(),
        ));
    }
    if !(noise_stddev.is_finite() && noise_stddev >= 0.0) || !center_scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "synth_gaussian needs finite scale and noise >= 0, got {center_scale}, {noise_stddev}"
        )));
    }
    let root = RngStream::new(seed);
    let mut centers_rng = root.derive("synth-centers", &[]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..input_dim)
                .map(|_| centers_rng.uniform_range(-center_scale, center_scale))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        let mut noise = root.derive("synth-noise", &[c as u64]);
        for _ in 0..per_class {
            let features = center.iter().map(|&m| noise.normal(m, noise_stddev)).collect();
            out.push(LabeledSample {
                features: Vector(features),
                label: c as ClassId,
            });
        }
    }
    Ok(out)
}

/// Seeded permutation of `class_ids` cut into `t` equal tasks.
pub fn split_tasks(class_ids: &[ClassId], t: usize, seed: u64) -> Result<TaskSchedule> {
    let unique: BTreeSet<ClassId> = class_ids.iter().copied().collect();
    if unique.len() != class_ids.len() {
        return Err(Error::InvalidArgument("duplicate class ids".into()));
    }
    if t == 0 || class_ids.is_empty() || !class_ids.len().is_multiple_of(t) {
        return Err(Error::InvalidArgument(format!(
            "{} classes cannot be split into {t} equal tasks",
            class_ids.len()
        )));
    }
    let mut perm: Vec<ClassId> = unique.into_iter().collect();
    RngStream::new(seed).derive("task-order", &[]).shuffle(&mut perm);
    let per = perm.len() / t;
    let tasks = perm
        .chunks(per)
        .map(|chunk| {
            let mut c = chunk.to_vec();
            c.sort_unstable();
            c
        })
        .collect();
    Ok(TaskSchedule { tasks })
}

fn group_by_class<'a>(
    samples: &'a [LabeledSample],
    task_classes: &[ClassId],
) -> Result<BTreeMap<ClassId, Vec<&'a LabeledSample>>> {
    let mut groups: BTreeMap<ClassId, Vec<&LabeledSample>> =
        task_classes.iter().map(|&c| (c, Vec::new())).collect();
    for s in samples {
        groups
            .get_mut(&s.label)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "sample label {} is not one of the task classes",
                    s.label
                ))
            })?
            .push(s);
    }
    Ok(groups)
}

fn empty_shards(k: usize) -> Vec<ClientShard> {
    (0..k)
        .map(|client_id| ClientShard {
            client_id,
            samples: Vec::new(),
        })
        .collect()
}

/// Each client draws `alpha` distinct labels; each label's samples are split
/// evenly among its holders. Draws repeat until every label has a holder.
pub fn partition_quantity(
    task_samples: &[LabeledSample],
    task_classes: &[ClassId],
    k: usize,
    alpha: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if k == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if alpha == 0 || alpha > task_classes.len() {
        return Err(Error::Partition(format!(
            "alpha = {alpha} must be in 1..={} (task class count)",
            task_classes.len()
        )));
    }
    if k * alpha < task_classes.len() {
        return Err(Error::Partition(format!(
            "coverage impossible: {k} clients x {alpha} labels < {} classes",
            task_classes.len()
        )));
    }
    let groups = group_by_class(task_samples, task_classes)?;
    let classes: Vec<ClassId> = groups.keys().copied().collect();
    let root = RngStream::new(seed);
    let mut assign_rng = root.derive("quantity-assign", &[]);

    let mut holders: Option<BTreeMap<ClassId, Vec<usize>>> = None;
    for _ in 0..COVERAGE_RETRIES {
        let mut h: BTreeMap<ClassId, Vec<usize>> =
            classes.iter().map(|&c| (c, Vec::new())).collect();
        for client in 0..k {
            let mut pool = classes.clone();
            // Partial Fisher-Yates: the first `alpha` slots are the draw.
            for i in 0..alpha {
                let j = i + assign_rng.below(pool.len() - i);
                pool.swap(i, j);
                h.get_mut(&pool[i]).expect("class in map").push(client);
            }
        }
        if h.values().all(|v| !v.is_empty()) {
            holders = Some(h);
            break;
        }
    }
    let holders = holders.ok_or_else(|| {
        Error::Partition(format!(
            "no assignment covering every class within {COVERAGE_RETRIES} draws"
        ))
    })?;

    let mut shards = empty_shards(k);
    let mut cursor = 0usize;
    for (class, members) in &holders {
        let mut samples = groups[class].clone();
        root.derive("quantity-split", &[u64::from(*class)])
            .shuffle(&mut samples);
        let base = samples.len() / members.len();
        let extra = samples.len() % members.len();
        let mut counts = vec![base; members.len()];
        for i in 0..extra {
            counts[(cursor + i) % members.len()] += 1;
        }
        cursor = (cursor + extra) % members.len().max(1);
        let mut it = samples.into_iter();
        for (&client, &n) in members.iter().zip(&counts) {
            shards[client].samples.extend(it.by_ref().take(n).cloned());
        }
    }
    Ok(shards)
}

/// Largest-remainder rounding of `props · total`; sums to `total` exactly.
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per class, client shares drawn from Dirichlet(`beta`) and rounded by
/// largest remainder.
pub fn partition_dirichlet(
    task_samples: &[LabeledSample],
    task_classes: &[ClassId],
    k: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if k == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    let groups = group_by_class(task_samples, task_classes)?;
    let root = RngStream::new(seed);
    let mut shards = empty_shards(k);
    for (class, samples) in groups {
        let mut rng = root.derive("dirichlet", &[u64::from(class)]);
        let props = dirichlet_sample(beta, k, &mut rng)?;
        let counts = largest_remainder(&props, samples.len());
        let mut samples = samples;
        rng.shuffle(&mut samples);
        let mut it = samples.into_iter();
        for (shard, n) in shards.iter_mut().zip(counts) {
            shard.samples.extend(it.by_ref().take(n).cloned());
        }
    }
    Ok(shards)
}

/// Splits each class into (train, test) with `test_fraction` held out.
pub fn train_test_split(
    samples: &[LabeledSample],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config("test_fraction: must be in [0, 1)".into()));
    }
    let mut by_class: BTreeMap<ClassId, Vec<&LabeledSample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.label).or_default().push(s);
    }
    let root = RngStream::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut group) in by_class {
        root.derive("holdout", &[u64::from(class)]).shuffle(&mut group);
        let n_test = (group.len() as f64 * test_fraction).round() as usize;
        let n_test = n_test.min(group.len().saturating_sub(1));
        for (i, s) in group.into_iter().enumerate() {
            if i < n_test {
                test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientCounts {
    pub client_id: usize,
    pub counts: BTreeMap<ClassId, usize>,
}

/// Per-client per-class sample counts for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub stage: usize,
    pub classes: Vec<ClassId>,
    pub clients: Vec<ClientCounts>,
    pub class_totals: BTreeMap<ClassId, usize>,
}

impl PartitionReport {
    pub fn from_shards(stage: usize, task_classes: &[ClassId], shards: &[ClientShard]) -> Self {
        let mut class_totals: BTreeMap<ClassId, usize> =
            task_classes.iter().map(|&c| (c, 0)).collect();
        let clients = shards
            .iter()
            .map(|s| {
                let mut counts: BTreeMap<ClassId, usize> =
                    task_classes.iter().map(|&c| (c, 0)).collect();
                for (c, n) in s.class_counts() {
                    *counts.entry(c).or_insert(0) += n;
                    *class_totals.entry(c).or_insert(0) += n;
                }
                ClientCounts {
                    client_id: s.client_id,
                    counts,
                }
            })
            .collect();
        let mut classes = task_classes.to_vec();
        classes.sort_unstable();
        Self {
            stage,
            classes,
            clients,
            class_totals,
        }
    }

    /// Client shares of `class` (client order), or `None` if the class is empty.
    pub fn shares(&self, class: ClassId) -> Option<Vec<f64>> {
        let total = *self.class_totals.get(&class)?;
        if total == 0 {
            return None;
        }
        Some(
            self.clients
                .iter()
                .map(|c| c.counts.get(&class).copied().unwrap_or(0) as f64 / total as f64)
                .collect(),
        )
    }

    /// Mean over classes of the largest single-client share.
    pub fn mean_max_share(&self) -> f64 {
        let shares: Vec<f64> = self
            .classes
            .iter()
            .filter_map(|&c| self.shares(c))
            .map(|s| s.into_iter().fold(0.0, f64::max))
            .collect();
        if shares.is_empty() {
            return 0.0;
        }
        shares.iter().sum::<f64>() / shares.len() as f64
    }
}

/// Reads `label,f1,f2,...` rows (no header).
pub fn load_feature_csv(path: &Path) -> Result<Vec<LabeledSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    let mut width: Option<usize> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        match width {
            None => {
                if rec.len() < 2 {
                    return Err(Error::CsvRagged {
                        path: path.to_path_buf(),
                        line,
                        expected: 2,
                        found: rec.len(),
                    });
                }
                width = Some(rec.len());
            }
            Some(w) if w != rec.len() => {
                return Err(Error::CsvRagged {
                    path: path.to_path_buf(),
                    line,
                    expected: w,
                    found: rec.len(),
                })
            }
            Some(_) => {}
        }
        let field_err = |field: &str, what| Error::CsvField {
            path: path.to_path_buf(),
            line,
            field: field.to_string(),
            what,
        };
        let label_s = &rec[0];
        let label: ClassId = label_s
            .parse()
            .map_err(|_| field_err(label_s, "class label"))?;
        let features = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| field_err(f, "finite number"))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(LabeledSample {
            features: Vector(features),
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::CsvEmpty {
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

pub fn write_feature_csv(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let mut text = String::new();
    for s in samples {
        text.push_str(&s.label.to_string());
        for v in s.features.iter() {
            text.push(',');
            text.push_str(&format!("{v:?}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blobs(classes: &[ClassId], per_class: usize) -> Vec<LabeledSample> {
        classes
            .iter()
            .flat_map(|&c| {
                (0..per_class).map(move |i| LabeledSample {
                    features: Vector(vec![c as f64, i as f64]),
                    label: c,
                })
            })
            .collect()
    }

    fn per_label_total(shards: &[ClientShard], c: ClassId) -> usize {
        shards.iter().map(|s| s.class_counts().get(&c).copied().unwrap_or(0)).sum()
    }

    #[test]
    fn synth_noise_free_and_counts() {
        let s = synth_gaussian(3, 4, 5, 2.0, 0.0, 1).unwrap();
        assert_eq!(s.len(), 15);
        for c in 0..3 {
            let group: Vec<_> = s.iter().filter(|x| x.label == c).collect();
            assert_eq!(group.len(), 5);
            assert!(group.iter().all(|x| x.features == group[0].features));
            assert!(group[0].features.iter().all(|v| v.abs() <= 2.0));
        }
        assert_eq!(s, synth_gaussian(3, 4, 5, 2.0, 0.0, 1).unwrap());
    }

    #[test]
    fn synth_is_nearly_separable_by_nearest_center() {
        let s = synth_gaussian(20, 32, 50, 5.0, 0.1, 3).unwrap();
        let mut centers: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
        for c in 0..20 {
            let group: Vec<_> = s.iter().filter(|x| x.label == c).collect();
            let mut m = vec![0.0; 32];
            for x in &group {
                for (a, b) in m.iter_mut().zip(x.features.iter()) {
                    *a += b / group.len() as f64;
                }
            }
            centers.insert(c, m);
        }
        let correct = s
            .iter()
            .filter(|x| {
                let best = centers
                    .iter()
                    .min_by(|a, b| {
                        crate::numkit::sq_dist(&x.features, a.1)
                            .unwrap()
                            .total_cmp(&crate::numkit::sq_dist(&x.features, b.1).unwrap())
                    })
                    .unwrap()
                    .0;
                *best == x.label
            })
            .count();
        assert!(correct as f64 / s.len() as f64 >= 0.99);
    }

    #[test]
    fn split_tasks_cases() {
        let ids: Vec<ClassId> = (0..100).collect();
        let sched = split_tasks(&ids, 10, 4).unwrap();
        assert_eq!(sched.len(), 10);
        assert!(sched.tasks.iter().all(|t| t.len() == 10));
        let one = split_tasks(&ids, 1, 4).unwrap();
        assert_eq!(one.tasks, vec![ids.clone()]);
        assert!(split_tasks(&ids, 7, 4).is_err());
        assert!(split_tasks(&ids, 0, 4).is_err());
    }

    #[test]
    fn quantity_full_assignment_is_even() {
        let classes = [3, 5, 8];
        let data = blobs(&classes, 23);
        let shards = partition_quantity(&data, &classes, 4, 3, 9).unwrap();
        for &c in &classes {
            let counts: Vec<usize> = shards
                .iter()
                .map(|s| s.class_counts().get(&c).copied().unwrap_or(0))
                .collect();
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            assert!(max - min <= 1, "{counts:?}");
            assert_eq!(counts.iter().sum::<usize>(), 23);
        }
    }

    #[test]
    fn quantity_single_client_and_errors() {
        let classes = [0, 1];
        let data = blobs(&classes, 5);
        let shards = partition_quantity(&data, &classes, 1, 2, 0).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].samples.len(), 10);
        assert!(matches!(
            partition_quantity(&data, &classes, 1, 1, 0),
            Err(Error::Partition(_))
        ));
        assert!(partition_quantity(&data, &classes, 3, 3, 0).is_err());
        assert!(partition_quantity(&data, &classes, 3, 0, 0).is_err());
    }

    #[test]
    fn dirichlet_concentrated_is_near_uniform() {
        let classes = [0];
        let data = blobs(&classes, 500);
        let mut avg = [0.0; 5];
        for seed in 0..20 {
            let shards = partition_dirichlet(&data, &classes, 5, 1000.0, seed).unwrap();
            for (a, s) in avg.iter_mut().zip(&shards) {
                *a += s.samples.len() as f64 / 20.0;
            }
        }
        for a in avg {
            assert!((a - 100.0).abs() <= 10.0, "{a}");
        }
    }

    #[test]
    fn dirichlet_single_client_gets_everything() {
        let data = blobs(&[1, 2], 7);
        let shards = partition_dirichlet(&data, &[1, 2], 1, 0.1, 3).unwrap();
        assert_eq!(shards[0].samples.len(), 14);
    }

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.1, 0.2, 0.7], 10), vec![1, 2, 7]);
        assert_eq!(largest_remainder(&[1.0], 0), vec![0]);
    }

    #[test]
    fn report_counts_and_shares() {
        let classes = [0, 1];
        let data = blobs(&classes, 10);
        let shards = partition_quantity(&data, &classes, 2, 1, 5).unwrap();
        let rep = PartitionReport::from_shards(0, &classes, &shards);
        for c in classes {
            assert_eq!(rep.class_totals[&c], 10);
            let s = rep.shares(c).unwrap();
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for row in &rep.clients {
            assert_eq!(row.counts.values().filter(|&&n| n > 0).count(), 1);
        }
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<PartitionReport>(&json).unwrap(), rep);
    }

    #[test]
    fn holdout_split_per_class() {
        let data = blobs(&[0, 1], 10);
        let (train, test) = train_test_split(&data, 0.2, 1).unwrap();
        assert_eq!(test.len(), 4);
        assert_eq!(train.len(), 16);
        assert_eq!(test.iter().filter(|s| s.label == 0).count(), 2);
    }

    #[test]
    fn csv_single_row_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.csv");
        std::fs::write(&p, "3,0.5,-1.0\n").unwrap();
        let s = load_feature_csv(&p).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].label, 3);
        assert_eq!(s[0].features.0, vec![0.5, -1.0]);

        let data = synth_gaussian(3, 4, 3, 1.0, 0.3, 2).unwrap();
        let q = dir.path().join("rt.csv");
        write_feature_csv(&q, &data).unwrap();
        assert_eq!(load_feature_csv(&q).unwrap(), data);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "1,0.1,0.2\n2,0.3\n").unwrap();
        match load_feature_csv(&p) {
            Err(Error::CsvRagged { line, expected, found, .. }) => {
                assert_eq!((line, expected, found), (2, 3, 2));
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "1,0.1\n1,abc\n").unwrap();
        match load_feature_csv(&p) {
            Err(e @ Error::CsvField { line: 2, .. }) => assert!(e.to_string().contains(":2:")),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_feature_csv(&p), Err(Error::CsvEmpty { .. })));
        std::fs::write(&p, "x,1.0\n").unwrap();
        assert!(matches!(load_feature_csv(&p), Err(Error::CsvField { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn partitioners_conserve_samples(
            n_classes in 1usize..6, per_class in 0usize..40, k in 1usize..8,
            alpha_pick in 0usize..6, beta in 0.05f64..50.0, seed in any::<u64>()
        ) {
            let classes: Vec<ClassId> = (0..n_classes as ClassId).map(|c| c * 3 + 1).collect();
            let data = blobs(&classes, per_class);
            let shards = partition_dirichlet(&data, &classes, k, beta, seed).unwrap();
            prop_assert_eq!(shards.iter().map(|s| s.samples.len()).sum::<usize>(), data.len());
            for &c in &classes {
                prop_assert_eq!(per_label_total(&shards, c), per_class);
            }

            let alpha = 1 + alpha_pick % n_classes;
            match partition_quantity(&data, &classes, k, alpha, seed) {
                Ok(shards) => {
                    prop_assert!(k * alpha >= n_classes);
                    for &c in &classes {
                        prop_assert_eq!(per_label_total(&shards, c), per_class);
                    }
                }
                Err(Error::Partition(_)) => prop_assert!(k * alpha < n_classes),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn partitioning_is_deterministic(seed in any::<u64>()) {
            let classes = [0, 1, 2, 3];
            let data = blobs(&classes, 11);
            prop_assert_eq!(
                partition_quantity(&data, &classes, 5, 2, seed).unwrap(),
                partition_quantity(&data, &classes, 5, 2, seed).unwrap()
            );
            prop_assert_eq!(
                partition_dirichlet(&data, &classes, 5, 0.3, seed).unwrap(),
                partition_dirichlet(&data, &classes, 5, 0.3, seed).unwrap()
            );
        }
    }
}
