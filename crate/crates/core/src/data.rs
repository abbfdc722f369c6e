//! Datasets, the synthetic two-domain generator, and episodic samplers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::AnchorSet;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{0}: empty dataset")]
    EmptyFile(String),
    #[error("io error on {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid episode spec: {0}")]
    EpisodeSpec(String),
    #[error("class {class} has {available} rows, episode needs {needed}")]
    InsufficientRows {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("dataset has {available} classes, episode needs {needed}")]
    InsufficientClasses { available: usize, needed: usize },
    #[error("cannot sample {requested} anchors from {available}")]
    AnchorCount { requested: usize, available: usize },
    #[error("feature width mismatch: {0} vs {1}")]
    Width(usize, usize),
    #[error("class {0} appears in both datasets")]
    Overlap(usize),
    #[error("exemplars: {0}")]
    Exemplars(String),
}

/// Labelled feature rows with a per-class row index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_index: BTreeMap<usize, Vec<usize>>,
    split_name: String,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        split_name: impl Into<String>,
    ) -> Result<Self, DataError> {
        if features.ndim() != 2 || features.rows() != labels.len() {
            return Err(DataError::Width(features.rows(), labels.len()));
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            class_index.entry(y).or_default().push(i);
        }
        Ok(Self {
            features,
            labels,
            class_index,
            split_name: split_name.into(),
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split_name(&self) -> &str {
        &self.split_name
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

    /// Sorted class ids.
    pub fn class_ids(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn class_rows(&self, class: usize) -> &[usize] {
        self.class_index.get(&class).map_or(&[], Vec::as_slice)
    }

    /// Fewest rows of any class (0 if empty).
    pub fn min_class_size(&self) -> usize {
        self.class_index.values().map(Vec::len).min().unwrap_or(0)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.split_name = name.into();
        self
    }

    /// Rows whose label is in `classes`, in original order.
    pub fn restrict(&self, classes: &[usize], name: impl Into<String>) -> Dataset {
        let keep: std::collections::BTreeSet<_> = classes.iter().copied().collect();
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.features.select_rows(&rows), labels, name)
            .expect("row selection is consistent")
    }

    /// Concatenates two class-disjoint datasets.
    pub fn union(&self, other: &Dataset, name: impl Into<String>) -> Result<Dataset, DataError> {
        if self.is_empty() {
            return Ok(other.clone().with_name(name));
        }
        if other.is_empty() {
            return Ok(self.clone().with_name(name));
        }
        if self.dim() != other.dim() {
            return Err(DataError::Width(self.dim(), other.dim()));
        }
        if let Some(&c) = other
            .class_index
            .keys()
            .find(|c| self.class_index.contains_key(c))
        {
            return Err(DataError::Overlap(c));
        }
        let features = Tensor::vstack(&[&self.features, &other.features]).expect("widths checked");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(features, labels, name)
    }
}

/// Two Gaussian-cluster domains. Domain A holds classes `0..C`, domain B
/// classes `C..2C` with centers shifted by `domain_offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes_per_domain: usize,
    pub dim: usize,
    pub cluster_std: f64,
    pub domain_offset: Vec<f64>,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Selects an independent sample stream over the same class centers.
    #[serde(default)]
    pub sample_stream: u64,
}

impl SyntheticSpec {
    /// Offset with equal components and Euclidean norm `magnitude`.
    pub fn uniform_offset(dim: usize, magnitude: f64) -> Vec<f64> {
        vec![magnitude / (dim as f64).sqrt(); dim]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes_per_domain == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(DataError::Spec(
                "classes_per_domain, dim and samples_per_class must be > 0".into(),
            ));
        }
        if !(self.cluster_std >= 0.0) || !self.cluster_std.is_finite() {
            return Err(DataError::Spec(
                "cluster_std must be finite and >= 0".into(),
            ));
        }
        if self.domain_offset.len() != self.dim {
            return Err(DataError::Spec(format!(
                "domain_offset has {} components, dim is {}",
                self.domain_offset.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn domain_a_classes(&self) -> Vec<usize> {
        (0..self.classes_per_domain).collect()
    }

    pub fn domain_b_classes(&self) -> Vec<usize> {
        (self.classes_per_domain..2 * self.classes_per_domain).collect()
    }
}

/// Class centers `[2C, dim]`: uniform in `[-1, 1]^dim`, domain B shifted.
pub fn class_centers(spec: &SyntheticSpec) -> Result<Tensor, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.classes_per_domain;
    let mut data = Vec::with_capacity(2 * c * spec.dim);
    for class in 0..2 * c {
        for j in 0..spec.dim {
            let u: f64 = rng.random_range(-1.0..=1.0);
            data.push(if class < c {
                u
            } else {
                u + spec.domain_offset[j]
            });
        }
    }
    Ok(Tensor::matrix(2 * c, spec.dim, data).expect("sized above"))
}

/// Draws `samples_per_class` Gaussian rows around every class center.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    let centers = class_centers(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + spec.sample_stream);
    let n_classes = centers.rows();
    let mut data = Vec::with_capacity(n_classes * spec.samples_per_class * spec.dim);
    let mut labels = Vec::with_capacity(n_classes * spec.samples_per_class);
    for class in 0..n_classes {
        let center = centers.row(class);
        for _ in 0..spec.samples_per_class {
            for &m in center {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + spec.cluster_std * z);
            }
            labels.push(class);
        }
    }
    let features = Tensor::matrix(labels.len(), spec.dim, data).expect("sized above");
    Dataset::new(features, labels, "synthetic")
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a CSV file with header `label,f0,f1,...`.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let shown = path.display().to_string();
    let parse = |line: u64, message: String| DataError::Parse {
        path: shown.clone(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path, io),
            other => parse(1, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| parse(1, e.to_string()))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::EmptyFile(shown));
    }
    if &header[0] != "label" || header.len() < 2 {
        return Err(parse(1, "header must be `label,f0,f1,...`".into()));
    }
    let width = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width + 1 {
            return Err(parse(
                line,
                format!("expected {} fields, found {}", width + 1, record.len()),
            ));
        }
        let label = record[0]
            .parse::<usize>()
            .map_err(|e| parse(line, format!("label {:?}: {e}", &record[0])))?;
        for field in record.iter().skip(1) {
            let v = field
                .parse::<f64>()
                .map_err(|e| parse(line, format!("feature {field:?}: {e}")))?;
            data.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DataError::EmptyFile(shown));
    }
    let name = path.file_stem().map_or_else(
        || "dataset".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    let features = Tensor::matrix(labels.len(), width, data).expect("widths checked per row");
    Dataset::new(features, labels, name)
}

/// Writes the CSV format read by [`load_dataset`]. Values use the shortest
/// representation that parses back to the same bits.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => io_err(path, std::io::Error::other(format!("{other:?}"))),
    })?;
    let to_io = |e: csv::Error| io_err(path, std::io::Error::other(e.to_string()));
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.dim()).map(|j| format!("f{j}")));
    writer.write_record(&header).map_err(to_io)?;
    for i in 0..dataset.len() {
        let mut row = vec![dataset.labels[i].to_string()];
        row.extend(dataset.features.row(i).iter().map(|v| format!("{v:?}")));
        writer.write_record(&row).map_err(to_io)?;
    }
    writer.flush().map_err(|e| io_err(path, e))
}

/// Assigns whole classes to (old, new, unseen) at random. A split with a
/// nonzero fraction must receive at least two classes; a zero fraction
/// yields an empty split.
pub fn split_classes(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let (fo, fn_, fu) = fractions;
    if [fo, fn_, fu].iter().any(|f| !(0.0..=1.0).contains(f)) || (fo + fn_ + fu - 1.0).abs() > 1e-9
    {
        return Err(DataError::Split(format!(
            "fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut classes = dataset.class_ids();
    let n = classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = index::sample(&mut rng, n, n).into_vec();
    classes = order.into_iter().map(|i| classes[i]).collect();
    let n_old = (fo * n as f64).round() as usize;
    let n_new = ((fn_ * n as f64).round() as usize).min(n - n_old);
    let n_unseen = n - n_old - n_new;
    for (name, frac, count) in [
        ("old", fo, n_old),
        ("new", fn_, n_new),
        ("unseen", fu, n_unseen),
    ] {
        if frac > 0.0 && count < 2 {
            return Err(DataError::Split(format!(
                "{name} split receives {count} classes, needs at least 2"
            )));
        }
    }
    let mut old = classes[..n_old].to_vec();
    let mut new = classes[n_old..n_old + n_new].to_vec();
    let mut unseen = classes[n_old + n_new..].to_vec();
    old.sort_unstable();
    new.sort_unstable();
    unseen.sort_unstable();
    Ok((
        dataset.restrict(&old, "old"),
        dataset.restrict(&new, "new"),
        dataset.restrict(&unseen, "unseen"),
    ))
}

/// `ways`-way `shots`-shot episodes with `queries` query rows per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Self {
        Self {
            ways,
            shots,
            queries,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.ways < 2 {
            return Err(DataError::EpisodeSpec(format!(
                "ways must be > 1, got {}",
                self.ways
            )));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(DataError::EpisodeSpec(
                "shots and queries must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn rows_per_class(&self) -> usize {
        self.shots + self.queries
    }

    /// Checks that `dataset` can supply this episode shape.
    pub fn check(&self, dataset: &Dataset) -> Result<(), DataError> {
        self.validate()?;
        if dataset.num_classes() < self.ways {
            return Err(DataError::InsufficientClasses {
                available: dataset.num_classes(),
                needed: self.ways,
            });
        }
        for (&class, rows) in &dataset.class_index {
            if rows.len() < self.rows_per_class() {
                return Err(DataError::InsufficientRows {
                    class,
                    available: rows.len(),
                    needed: self.rows_per_class(),
                });
            }
        }
        Ok(())
    }
}

/// One sampled task. Local labels index into `class_map`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub class_map: Vec<usize>,
    /// Dataset row indices, parallel to `support_y` and `query_y`.
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_map.len()
    }

    /// Support rows followed by query rows.
    pub fn all_x(&self) -> Tensor {
        Tensor::vstack(&[&self.support_x, &self.query_x]).expect("same width")
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode, DataError> {
    spec.check(dataset)?;
    let classes = dataset.class_ids();
    let chosen = index::sample(rng, classes.len(), spec.ways).into_vec();
    let class_map: Vec<usize> = chosen.iter().map(|&i| classes[i]).collect();
    let mut support_rows = Vec::with_capacity(spec.ways * spec.shots);
    let mut query_rows = Vec::with_capacity(spec.ways * spec.queries);
    let mut support_y = Vec::with_capacity(spec.ways * spec.shots);
    let mut query_y = Vec::with_capacity(spec.ways * spec.queries);
    for (local, &class) in class_map.iter().enumerate() {
        let rows = dataset.class_rows(class);
        let picks = index::sample(rng, rows.len(), spec.rows_per_class());
        for (j, p) in picks.iter().enumerate() {
            if j < spec.shots {
                support_rows.push(rows[p]);
                support_y.push(local);
            } else {
                query_rows.push(rows[p]);
                query_y.push(local);
            }
        }
    }
    Ok(Episode {
        support_x: dataset.features.select_rows(&support_rows),
        support_y,
        query_x: dataset.features.select_rows(&query_rows),
        query_y,
        class_map,
        support_rows,
        query_rows,
    })
}

/// `k` distinct anchors, uniformly without replacement.
pub fn sample_anchor_subset<R: Rng + ?Sized>(
    anchors: &AnchorSet,
    k: usize,
    rng: &mut R,
) -> Result<AnchorSet, DataError> {
    if k == 0 || k > anchors.len() {
        return Err(DataError::AnchorCount {
            requested: k,
            available: anchors.len(),
        });
    }
    let picks = index::sample(rng, anchors.len(), k).into_vec();
    Ok(anchors.subset(&picks).expect("indices in range"))
}

/// Raw rows retained per old class.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarSet {
    class_ids: Vec<usize>,
    rows: Vec<Tensor>,
}

impl ExemplarSet {
    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn rows(&self, i: usize) -> &Tensor {
        &self.rows[i]
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.rows.iter().map(Tensor::rows).collect()
    }

    pub fn total_rows(&self) -> usize {
        self.counts().iter().sum()
    }

    /// Pools two class-disjoint exemplar sets.
    pub fn union(&self, other: &ExemplarSet) -> Result<ExemplarSet, DataError> {
        if let Some(&c) = other.class_ids.iter().find(|c| self.class_ids.contains(c)) {
            return Err(DataError::Overlap(c));
        }
        let mut out = self.clone();
        out.class_ids.extend_from_slice(&other.class_ids);
        out.rows.extend(other.rows.iter().cloned());
        Ok(out)
    }
}

/// Keeps `per_class` random rows of every class (the whole class if smaller).
pub fn reserve_exemplars<R: Rng + ?Sized>(
    dataset: &Dataset,
    per_class: usize,
    rng: &mut R,
) -> Result<ExemplarSet, DataError> {
    if per_class == 0 {
        return Err(DataError::Exemplars("per_class must be >= 1".into()));
    }
    let mut class_ids = Vec::new();
    let mut rows = Vec::new();
    for (&class, idx) in &dataset.class_index {
        let take = per_class.min(idx.len());
        let mut picks: Vec<usize> = index::sample(rng, idx.len(), take)
            .iter()
            .map(|p| idx[p])
            .collect();
        picks.sort_unstable();
        class_ids.push(class);
        rows.push(dataset.features.select_rows(&picks));
    }
    Ok(ExemplarSet { class_ids, rows })
}

/// Exemplar rows of `ways` old classes, used both to rebuild prototypes and
/// as alignment points.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarEpisode {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub class_map: Vec<usize>,
}

/// Samples `ways` exemplar classes and up to `max_per_class` rows of each.
pub fn sample_exemplar_episode<R: Rng + ?Sized>(
    exemplars: &ExemplarSet,
    ways: usize,
    max_per_class: usize,
    rng: &mut R,
) -> Result<ExemplarEpisode, DataError> {
    if ways == 0 || ways > exemplars.num_classes() {
        return Err(DataError::Exemplars(format!(
            "cannot sample {ways} classes from {}",
            exemplars.num_classes()
        )));
    }
    if max_per_class == 0 {
        return Err(DataError::Exemplars("max_per_class must be >= 1".into()));
    }
    let chosen = index::sample(rng, exemplars.num_classes(), ways).into_vec();
    let mut parts = Vec::with_capacity(ways);
    let mut labels = Vec::new();
    let mut class_map = Vec::with_capacity(ways);
    for (local, &c) in chosen.iter().enumerate() {
        let rows = &exemplars.rows[c];
        if rows.rows() == 0 {
            return Err(DataError::Exemplars(format!(
                "class {} has no exemplars",
                exemplars.class_ids[c]
            )));
        }
        let take = max_per_class.min(rows.rows());
        let picks = index::sample(rng, rows.rows(), take).into_vec();
        parts.push(rows.select_rows(&picks));
        labels.extend(std::iter::repeat_n(local, take));
        class_map.push(exemplars.class_ids[c]);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(ExemplarEpisode {
        x: Tensor::vstack(&refs).expect("same width"),
        labels,
        class_map,
    })
}
