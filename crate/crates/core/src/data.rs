//! Datasets, non-IID partitioning and per-client train/test/val splits.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, RngStream, StreamTag};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × k` feature matrix.
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Patient / session identity per sample, densified to `0..groups`.
    pub group_ids: Option<Vec<usize>>,
    /// Generating cluster per sample (synthetic data only).
    pub cluster_ids: Option<Vec<usize>>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        group_ids: Option<Vec<usize>>,
        classes: usize,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::input(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {bad} outside 0..{classes}")));
        }
        if let Some(g) = &group_ids {
            if g.len() != labels.len() {
                return Err(Error::input(format!(
                    "{} group ids for {} samples",
                    g.len(),
                    labels.len()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            group_ids,
            cluster_ids: None,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// New dataset holding the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let k = self.dim();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Dataset {
            features: Matrix::new(indices.len(), k, data).expect("rows of a valid matrix"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            group_ids: self
                .group_ids
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i]).collect()),
            cluster_ids: self
                .cluster_ids
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            classes: self.classes,
        }
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Random subset of `round(fraction·n)` rows (at least one), original order kept.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(
                "dataset.subsample_fraction",
                format!("{fraction} must lie in (0, 1]"),
            ));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let keep = ((fraction * self.len() as f64).round() as usize).max(1);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut RngStream::named(seed, StreamTag::Subsample, 0, 0));
        idx.truncate(keep);
        idx.sort_unstable();
        Ok(self.select(&idx))
    }
}

/// Shannon entropy (nats) of a label histogram.
pub fn entropy(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// How inputs relate across clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterGeometry {
    /// One set of class means for all clusters.
    #[default]
    Shared,
    /// Each cluster draws its own class means.
    Distinct,
    /// Every cluster owns a set of class means and every sample adds one
    /// mean from each set, picked independently. Inputs are identically
    /// distributed across clusters; a sample of cluster `c` is labelled by
    /// the mean it took from set `c`.
    Factored,
}

/// Gaussian class blobs, optionally replicated over clusters that each
/// relabel the blobs with their own permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub classes: usize,
    pub dim: usize,
    /// Samples per class within each cluster.
    pub samples_per_class: usize,
    /// Norm of each class mean.
    pub separation: f64,
    pub noise_std: f64,
    /// Give every cluster after the first a distinct non-identity label permutation.
    pub permute_labels: bool,
    pub geometry: ClusterGeometry,
    /// Norm of a random per-cluster shift added to every input of that cluster.
    pub cluster_offset: f64,
    /// When set, each cluster's samples are dealt round-robin into this many
    /// groups, filling `group_ids`.
    pub groups_per_cluster: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 1,
            classes: 10,
            dim: 16,
            samples_per_class: 300,
            separation: 3.0,
            noise_std: 1.0,
            permute_labels: false,
            geometry: ClusterGeometry::Shared,
            cluster_offset: 0.0,
            groups_per_cluster: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("dataset.synthetic.{f}");
        if self.classes < 2 {
            return Err(Error::config(field("classes"), "need at least 2 classes"));
        }
        if self.dim == 0 {
            return Err(Error::config(field("dim"), "must be ≥ 1"));
        }
        if self.clusters == 0 {
            return Err(Error::config(field("clusters"), "must be ≥ 1"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config(field("samples_per_class"), "must be ≥ 1"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::config(field("separation"), "must be finite and ≥ 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(field("noise_std"), "must be finite and ≥ 0"));
        }
        if !(self.cluster_offset >= 0.0 && self.cluster_offset.is_finite()) {
            return Err(Error::config(field("cluster_offset"), "must be finite and ≥ 0"));
        }
        if self.permute_labels && self.clusters > factorial_capped(self.classes) {
            return Err(Error::config(
                field("clusters"),
                "more clusters than distinct label permutations",
            ));
        }
        if self.groups_per_cluster == Some(0) {
            return Err(Error::config(field("groups_per_cluster"), "must be ≥ 1"));
        }
        Ok(())
    }
}

fn factorial_capped(n: usize) -> usize {
    (1..=n).try_fold(1usize, |acc, v| acc.checked_mul(v)).unwrap_or(usize::MAX)
}

/// Rows are emitted cluster-major, then class, then sample.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RngStream::named(seed, StreamTag::Synthetic, 0, 0);
    let draw_means = |rng: &mut RngStream| -> Vec<Vec<f64>> {
        (0..spec.classes)
            .map(|_| {
                let v: Vec<f64> = (0..spec.dim).map(|_| rng.standard_normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| spec.separation * x / norm).collect()
            })
            .collect()
    };
    let mean_sets: Vec<Vec<Vec<f64>>> = match spec.geometry {
        ClusterGeometry::Shared => vec![draw_means(&mut rng)],
        ClusterGeometry::Distinct | ClusterGeometry::Factored => {
            (0..spec.clusters).map(|_| draw_means(&mut rng)).collect()
        }
    };

    let offsets: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| {
            if spec.cluster_offset == 0.0 {
                return vec![0.0; spec.dim];
            }
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.standard_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| spec.cluster_offset * x / norm).collect()
        })
        .collect();

    let identity: Vec<usize> = (0..spec.classes).collect();
    let mut perms = vec![identity.clone()];
    while perms.len() < spec.clusters {
        if spec.permute_labels {
            let mut p = identity.clone();
            p.shuffle(&mut rng);
            if !perms.contains(&p) {
                perms.push(p);
            }
        } else {
            perms.push(identity.clone());
        }
    }

    let n = spec.clusters * spec.classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(n);
    for (c, perm) in perms.iter().enumerate() {
        for blob in 0..spec.classes {
            for _ in 0..spec.samples_per_class {
                let mut x: Vec<f64> = (0..spec.dim).map(|_| spec.noise_std * rng.standard_normal()).collect();
                let mut add = |mean: &[f64]| x.iter_mut().zip(mean).for_each(|(v, m)| *v += m);
                match spec.geometry {
                    ClusterGeometry::Shared => add(&mean_sets[0][blob]),
                    ClusterGeometry::Distinct => add(&mean_sets[c][blob]),
                    ClusterGeometry::Factored => {
                        for (set_id, set) in mean_sets.iter().enumerate() {
                            let pick = if set_id == c {
                                blob
                            } else {
                                (rng.uniform() * spec.classes as f64) as usize % spec.classes
                            };
                            add(&set[pick]);
                        }
                    }
                }
                add(&offsets[c]);
                data.extend(x);
                labels.push(perm[blob]);
                clusters.push(c);
            }
        }
    }

    let group_ids = spec.groups_per_cluster.map(|g| {
        let mut ids = vec![0; n];
        let per_cluster = spec.classes * spec.samples_per_class;
        for c in 0..spec.clusters {
            let mut members: Vec<usize> = (c * per_cluster..(c + 1) * per_cluster).collect();
            members.shuffle(&mut rng);
            for (pos, i) in members.into_iter().enumerate() {
                ids[i] = c * g + pos % g;
            }
        }
        ids
    });

    let mut ds = Dataset::new(Matrix::new(n, spec.dim, data)?, labels, group_ids, spec.classes)?;
    ds.cluster_ids = Some(clusters);
    Ok(ds)
}

fn densify(map: &mut HashMap<String, usize>, key: &str) -> usize {
    let next = map.len();
    *map.entry(key.to_string()).or_insert(next)
}

/// Reads a CSV with a header. `label` is required, `group` optional, every
/// other column is a numeric feature. Labels and groups are densified in
/// order of first appearance.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::input(format!("{}: header: {e}", path.display())))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::input(format!("{}: missing `label` column", path.display())))?;
    let group_col = headers.iter().position(|h| h == "group");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_col && Some(c) != group_col)
        .collect();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut label_map = HashMap::new();
    let mut group_map = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record =
            record.map_err(|e| Error::input(format!("{}: row {line}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(Error::input(format!(
                "{}: row {line}: expected {} fields, found {}",
                path.display(),
                headers.len(),
                record.len()
            )));
        }
        for &c in &feature_cols {
            let raw = record[c].trim();
            let v: f64 = raw.parse().map_err(|_| {
                Error::input(format!(
                    "{}: row {line}: column `{}` value `{raw}` is not numeric",
                    path.display(),
                    &headers[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::input(format!(
                    "{}: row {line}: column `{}` is not finite",
                    path.display(),
                    &headers[c]
                )));
            }
            data.push(v);
        }
        labels.push(densify(&mut label_map, record[label_col].trim()));
        if let Some(g) = group_col {
            groups.push(densify(&mut group_map, record[g].trim()));
        }
    }
    if labels.is_empty() {
        return Err(Error::input(format!("{}: no data rows", path.display())));
    }
    let classes = label_map.len().max(2);
    let features = Matrix::new(labels.len(), feature_cols.len(), data)?;
    Dataset::new(features, labels, group_col.map(|_| groups), classes)
}

/// Writes `f0..fk, label[, group]` with shortest round-trip float formatting.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::input(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(io)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    if dataset.group_ids.is_some() {
        header.push("group".into());
    }
    w.write_record(&header).map_err(io)?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset.sample(i).iter().map(|v| v.to_string()).collect();
        row.push(dataset.labels[i].to_string());
        if let Some(g) = &dataset.group_ids {
            row.push(g[i].to_string());
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Dirichlet,
    Natural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub alpha: Option<f64>,
    pub clients: Vec<Vec<usize>>,
}

impl PartitionSpec {
    /// Disjoint, covers `0..n` exactly once, no empty client.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (c, list) in self.clients.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Partition(format!("client {c} is empty")));
            }
            for &i in list {
                if i >= n {
                    return Err(Error::Partition(format!("index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("sample {missing} unassigned")));
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletOptions {
    pub clients: usize,
    pub alpha: f64,
    pub min_per_client: usize,
    pub max_retries: usize,
}

impl Default for DirichletOptions {
    fn default() -> Self {
        Self {
            clients: 20,
            alpha: 0.1,
            min_per_client: 5,
            max_retries: 10,
        }
    }
}

fn dirichlet_draw(alpha: f64, n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config("partition.alpha", e.to_string()))?;
    for _ in 0..100 {
        let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = g.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(g.into_iter().map(|v| v / sum).collect());
        }
    }
    Err(Error::Partition(format!("Dirichlet({alpha}) draws underflowed")))
}

/// Per class, draw client proportions from `Dirichlet(α·1)` and deal the
/// shuffled class members by cumulative proportion. The whole draw is
/// repeated until every client holds at least `min_per_client` samples.
pub fn dirichlet_partition(
    labels: &[usize],
    opts: DirichletOptions,
    seed: u64,
) -> Result<PartitionSpec> {
    let DirichletOptions {
        clients: n_clients,
        alpha,
        min_per_client,
        max_retries,
    } = opts;
    if n_clients == 0 {
        return Err(Error::config("partition.clients", "need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("partition.alpha", format!("{alpha} must be > 0")));
    }
    let min = min_per_client.max(1);
    if n_clients * min > labels.len() {
        return Err(Error::Partition(format!(
            "{n_clients} clients × {min} samples exceeds {} samples",
            labels.len()
        )));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    for attempt in 0..=max_retries {
        let mut rng = RngStream::named(seed, StreamTag::Partition, attempt as u64, 0);
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = dirichlet_draw(alpha, n_clients, &mut rng)?;
            let mut start = 0;
            let mut cum = 0.0;
            for (c, p) in props.iter().enumerate() {
                cum += p;
                let end = if c + 1 == n_clients {
                    members.len()
                } else {
                    ((cum * members.len() as f64).floor() as usize).clamp(start, members.len())
                };
                assigned[c].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if assigned.iter().all(|a| a.len() >= min) {
            for a in &mut assigned {
                a.sort_unstable();
            }
            return Ok(PartitionSpec {
                kind: PartitionKind::Dirichlet,
                alpha: Some(alpha),
                clients: assigned,
            });
        }
    }
    Err(Error::Partition(format!(
        "no Dirichlet(α = {alpha}) draw gave all {n_clients} clients ≥ {min} samples in {} attempts",
        max_retries + 1
    )))
}

/// Assigns whole groups to clients round-robin in order of descending size
/// (ties by group id), so no group is split.
pub fn natural_partition(dataset: &Dataset, clients: usize) -> Result<PartitionSpec> {
    let groups = dataset
        .group_ids
        .as_ref()
        .ok_or_else(|| Error::input("natural partition needs group ids"))?;
    if clients == 0 {
        return Err(Error::config("partition.clients", "need at least one client"));
    }
    let n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    let mut order: Vec<usize> = (0..n_groups).filter(|&g| !members[g].is_empty()).collect();
    if order.len() < clients {
        return Err(Error::input(format!(
            "{} groups cannot cover {clients} clients",
            order.len()
        )));
    }
    order.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(a.cmp(&b)));
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (pos, g) in order.into_iter().enumerate() {
        assigned[pos % clients].extend_from_slice(&members[g]);
    }
    for a in &mut assigned {
        a.sort_unstable();
    }
    Ok(PartitionSpec {
        kind: PartitionKind::Natural,
        alpha: None,
        clients: assigned,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffles, then takes `round(0.4n)` for train, `round(0.3n)` for test and
/// the remainder for validation.
pub fn split_4_3_3(indices: &[usize], rng: &mut RngStream) -> Result<Splits> {
    let n = indices.len();
    if n < 3 {
        return Err(Error::input(format!("cannot split {n} samples three ways")));
    }
    let mut idx = indices.to_vec();
    idx.shuffle(rng);
    let n_train = (0.4 * n as f64).round() as usize;
    let n_test = (0.3 * n as f64).round() as usize;
    let val = idx.split_off(n_train + n_test);
    let test = idx.split_off(n_train);
    Ok(Splits {
        train: idx,
        test,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toy(groups: Vec<usize>) -> Dataset {
        let n = groups.len();
        Dataset::new(
            Matrix::zeros(n, 1),
            (0..n).map(|i| i % 2).collect(),
            Some(groups),
            2,
        )
        .unwrap()
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            clusters: 2,
            permute_labels: true,
            groups_per_cluster: Some(3),
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec, 5).unwrap();
        let b = generate_synthetic(&spec, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&spec, 6).unwrap());
        assert_eq!(a.len(), 2 * 10 * 300);
        assert_eq!(a.group_ids.as_ref().unwrap().iter().max(), Some(&5));
    }

    #[test]
    fn synthetic_clusters_conflict() {
        let spec = SyntheticSpec {
            clusters: 2,
            classes: 3,
            samples_per_class: 2,
            permute_labels: true,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, 1).unwrap();
        let (c0, c1) = ds.labels.split_at(6);
        assert_eq!(c0, &[0, 0, 1, 1, 2, 2]);
        assert_ne!(c0, c1);
    }

    #[test]
    fn degenerate_synthetic_rejected() {
        let spec = SyntheticSpec {
            classes: 1,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Config { .. })));
        let spec = SyntheticSpec {
            dim: 0,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn csv_label_densification() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x,y,label\n1,2,b\n3,4,a\n5,6.5,b\n").unwrap();
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.classes, 2);
        assert!(ds.group_ids.is_none());
        assert_eq!(ds.sample(2), &[5.0, 6.5]);
    }

    #[test]
    fn csv_group_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "group,x,label\np9,1,0\np3,2,1\np9,3,1\n").unwrap();
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.group_ids, Some(vec![0, 1, 0]));
        assert_eq!(ds.dim(), 1);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "x,y\n1,2\n").unwrap();
        assert!(load_csv(&p).unwrap_err().to_string().contains("label"));

        std::fs::write(&p, "x,label\n1,a\nfoo,b\n").unwrap();
        let msg = load_csv(&p).unwrap_err().to_string();
        assert!(msg.contains("row 3"), "{msg}");

        std::fs::write(&p, "x,y,label\n1,2,a\n1,b\n").unwrap();
        let msg = load_csv(&p).unwrap_err().to_string();
        assert!(msg.contains("row 3"), "{msg}");
    }

    #[test]
    fn csv_round_trip() {
        let spec = SyntheticSpec {
            classes: 3,
            dim: 4,
            samples_per_class: 7,
            groups_per_cluster: Some(2),
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        write_csv(&ds, &p).unwrap();
        let back = load_csv(&p).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let p = dirichlet_partition(
            &labels,
            DirichletOptions {
                clients: 1,
                alpha: 0.5,
                min_per_client: 1,
                max_retries: 0,
            },
            0,
        )
        .unwrap();
        assert_eq!(p.clients, vec![(0..50).collect::<Vec<_>>()]);
    }

    #[test]
    fn large_alpha_is_nearly_iid() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 5).collect();
        let p = dirichlet_partition(
            &labels,
            DirichletOptions {
                clients: 4,
                alpha: 1000.0,
                min_per_client: 5,
                max_retries: 10,
            },
            11,
        )
        .unwrap();
        p.validate(labels.len()).unwrap();
        for client in &p.clients {
            let mut h = [0usize; 5];
            for &i in client {
                h[labels[i]] += 1;
            }
            for &c in &h {
                let prop = c as f64 / client.len() as f64;
                assert!((prop - 0.2).abs() <= 0.1 * 0.2, "{h:?}");
            }
        }
    }

    #[test]
    fn partition_errors() {
        let labels = vec![0, 1, 0];
        let opts = DirichletOptions {
            clients: 4,
            alpha: 1.0,
            min_per_client: 1,
            max_retries: 3,
        };
        assert!(matches!(dirichlet_partition(&labels, opts, 0), Err(Error::Partition(_))));
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let opts = DirichletOptions {
            clients: 8,
            alpha: 0.01,
            min_per_client: 5,
            max_retries: 2,
        };
        assert!(matches!(dirichlet_partition(&labels, opts, 0), Err(Error::Partition(_))));
    }

    #[test]
    fn natural_one_group_per_client() {
        let ds = toy(vec![2, 0, 1, 2, 0, 1]);
        let p = natural_partition(&ds, 3).unwrap();
        p.validate(6).unwrap();
        for list in &p.clients {
            let g: HashSet<usize> = list.iter().map(|&i| ds.group_ids.as_ref().unwrap()[i]).collect();
            assert_eq!(g.len(), 1);
        }
    }

    #[test]
    fn natural_round_robin_by_size() {
        let sizes = [50, 40, 30, 20, 10];
        let mut groups = Vec::new();
        // interleave group ids so order in the file is not size order
        for (g, &s) in sizes.iter().enumerate().rev() {
            groups.extend(std::iter::repeat_n(g, s));
        }
        let ds = toy(groups.clone());
        let p = natural_partition(&ds, 2).unwrap();
        let sizes_of = |list: &Vec<usize>| {
            let mut per: HashMap<usize, usize> = HashMap::new();
            for &i in list {
                *per.entry(groups[i]).or_default() += 1;
            }
            let mut v: Vec<usize> = per.into_values().collect();
            v.sort_unstable_by(|a, b| b.cmp(a));
            v
        };
        assert_eq!(sizes_of(&p.clients[0]), vec![50, 30, 10]);
        assert_eq!(sizes_of(&p.clients[1]), vec![40, 20]);
    }

    #[test]
    fn natural_partition_errors() {
        let mut ds = toy(vec![0, 0, 1]);
        assert!(matches!(natural_partition(&ds, 3), Err(Error::Input(_))));
        ds.group_ids = None;
        assert!(matches!(natural_partition(&ds, 1), Err(Error::Input(_))));
    }

    #[test]
    fn split_sizes() {
        let mut rng = RngStream::named(1, StreamTag::Split, 0, 0);
        let s = split_4_3_3(&(0..100).collect::<Vec<_>>(), &mut rng).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.val.len()), (40, 30, 30));
        let s = split_4_3_3(&(0..10).collect::<Vec<_>>(), &mut rng).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.val.len()), (4, 3, 3));
        assert!(split_4_3_3(&[1, 2], &mut rng).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let mut rng = RngStream::named(2, StreamTag::Split, 0, 0);
        for n in 3..120 {
            let input: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
            let s = split_4_3_3(&input, &mut rng).unwrap();
            assert!(!s.val.is_empty());
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).chain(&s.val).copied().collect();
            all.sort_unstable();
            assert_eq!(all, input);
        }
    }

    #[test]
    fn entropy_of_histograms() {
        assert_eq!(entropy(&[10, 0, 0]), 0.0);
        assert!((entropy(&[5, 5]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[]), 0.0);
    }

    #[test]
    fn partition_json_shape() {
        let p = PartitionSpec {
            kind: PartitionKind::Dirichlet,
            alpha: Some(0.1),
            clients: vec![vec![0, 2], vec![1]],
        };
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["kind"], "dirichlet");
        assert_eq!(v["clients"][0][1], 2);
    }
}
