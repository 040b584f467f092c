//! Task streams: class-split and pixel-permuted MNIST, plus synthetic
//! Gaussian blobs.

mod idx;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, HeadSpec};

pub use idx::{load_idx, read_images, read_labels, IMAGES_MAGIC, LABELS_MAGIC};

/// Mixes a run seed with a purpose tag into an independent stream seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// A labeled subset of a shared feature matrix, optionally viewed through a
/// fixed permutation of the feature columns.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Arc<Array2<f64>>,
    rows: Vec<usize>,
    labels: Vec<usize>,
    permutation: Option<Arc<Vec<usize>>>,
}

impl Dataset {
    pub fn new(
        features: Arc<Array2<f64>>,
        rows: Vec<usize>,
        labels: Vec<usize>,
        permutation: Option<Arc<Vec<usize>>>,
    ) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", rows.len(), labels.len())));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= features.nrows()) {
            return Err(Error::Shape(format!("row {r} out of range")));
        }
        if let Some(p) = &permutation {
            if p.len() != features.ncols() {
                return Err(Error::Shape("permutation length differs from feature count".into()));
            }
        }
        Ok(Dataset {
            features,
            rows,
            labels,
            permutation,
        })
    }

    /// Wraps a whole matrix.
    pub fn from_matrix(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let rows = (0..features.nrows()).collect();
        Self::new(Arc::new(features), rows, labels, None)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Source row indices backing this dataset.
    pub fn source_rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn permutation(&self) -> Option<&[usize]> {
        self.permutation.as_deref().map(Vec::as_slice)
    }

    fn write_row(&self, source_row: ArrayView1<'_, f64>, mut out: ndarray::ArrayViewMut1<'_, f64>) {
        match &self.permutation {
            None => out.assign(&source_row),
            Some(p) => {
                for (o, &j) in out.iter_mut().zip(p.iter()) {
                    *o = source_row[j];
                }
            }
        }
    }

    /// Inputs for the given positions within this dataset.
    pub fn gather(&self, positions: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((positions.len(), self.dim()));
        for (mut row, &pos) in out.rows_mut().into_iter().zip(positions) {
            self.write_row(self.features.row(self.rows[pos]), row.view_mut());
        }
        out
    }

    pub fn gather_labels(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.labels[p]).collect()
    }

    /// Inputs and labels for a contiguous range of positions.
    pub fn slice(&self, range: std::ops::Range<usize>) -> (Array2<f64>, &[usize]) {
        let positions: Vec<usize> = range.clone().collect();
        (self.gather(&positions), &self.labels[range])
    }

    pub fn to_batch(&self, task_id: usize) -> Batch {
        let (inputs, labels) = self.slice(0..self.len());
        Batch {
            inputs,
            labels: labels.to_vec(),
            task_id,
        }
    }

    fn subset(&self, positions: &[usize]) -> Dataset {
        Dataset {
            features: Arc::clone(&self.features),
            rows: positions.iter().map(|&p| self.rows[p]).collect(),
            labels: self.gather_labels(positions),
            permutation: self.permutation.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub task_id: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub num_classes: usize,
    pub description: String,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub name: String,
    pub seed: u64,
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn input_dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }

    pub fn heads(&self) -> Vec<HeadSpec> {
        self.tasks
            .iter()
            .map(|t| HeadSpec {
                task_id: t.task_id,
                num_classes: t.num_classes,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Images and labels of a train/test source split.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub train_images: Arc<Array2<f64>>,
    pub train_labels: Vec<usize>,
    pub test_images: Arc<Array2<f64>>,
    pub test_labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(train: (Array2<f64>, Vec<usize>), test: (Array2<f64>, Vec<usize>)) -> Result<Self> {
        if train.0.nrows() != train.1.len() || test.0.nrows() != test.1.len() {
            return Err(Error::CountMismatch {
                images: train.0.nrows() + test.0.nrows(),
                labels: train.1.len() + test.1.len(),
            });
        }
        if train.0.ncols() != test.0.ncols() {
            return Err(Error::Shape("train and test feature counts differ".into()));
        }
        Ok(LabeledImages {
            train_images: Arc::new(train.0),
            train_labels: train.1,
            test_images: Arc::new(test.0),
            test_labels: test.1,
        })
    }

    fn num_classes(&self) -> usize {
        self.train_labels
            .iter()
            .chain(&self.test_labels)
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Split and subsampling options shared by the MNIST stream builders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    /// Fraction of each task's training data held out for validation.
    pub val_fraction: f64,
    /// Keep at most this many training samples per task (before the
    /// validation hold-out).
    pub max_train_per_task: Option<usize>,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            val_fraction: 0.1,
            max_train_per_task: None,
        }
    }
}

/// Shuffles `positions` and splits off the validation share.
fn hold_out(mut positions: Vec<usize>, options: &SplitOptions, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    positions.shuffle(rng);
    if let Some(max) = options.max_train_per_task {
        positions.truncate(max);
    }
    let n_val = (positions.len() as f64 * options.val_fraction).round() as usize;
    let train = positions.split_off(n_val);
    (train, positions)
}

/// Splits the classes into consecutive groups of `classes_per_task`; task
/// `k` holds classes `(k-1)·c .. k·c-1` relabeled to `0..c-1`.
pub fn build_split_stream(
    source: &LabeledImages,
    classes_per_task: usize,
    options: SplitOptions,
    seed: u64,
) -> Result<TaskStream> {
    let total = source.num_classes();
    if classes_per_task < 2 || !total.is_multiple_of(classes_per_task) {
        return Err(Error::config(
            "stream.classes_per_task",
            format!("{total} classes cannot be split into groups of {classes_per_task}"),
        ));
    }
    let all_train = Dataset::new(
        Arc::clone(&source.train_images),
        (0..source.train_labels.len()).collect(),
        source.train_labels.clone(),
        None,
    )?;
    let all_test = Dataset::new(
        Arc::clone(&source.test_images),
        (0..source.test_labels.len()).collect(),
        source.test_labels.clone(),
        None,
    )?;
    let mut tasks = Vec::new();
    for k in 0..total / classes_per_task {
        let classes = k * classes_per_task..(k + 1) * classes_per_task;
        let pick =
            |ds: &Dataset| -> Vec<usize> { (0..ds.len()).filter(|&i| classes.contains(&ds.labels()[i])).collect() };
        let mut rng = rng_for(seed, 0x5e11 + k as u64);
        let (train_pos, val_pos) = hold_out(pick(&all_train), &options, &mut rng);
        let relabel = |mut ds: Dataset| {
            ds.labels.iter_mut().for_each(|y| *y -= classes.start);
            ds
        };
        tasks.push(TaskData {
            task_id: k + 1,
            train: relabel(all_train.subset(&train_pos)),
            val: relabel(all_train.subset(&val_pos)),
            test: relabel(all_test.subset(&pick(&all_test))),
            num_classes: classes_per_task,
            description: format!("classes {}..={}", classes.start, classes.end - 1),
        });
    }
    Ok(TaskStream {
        name: "split_mnist".into(),
        seed,
        tasks,
    })
}

/// Task 1 is the source data; tasks `2..=T` apply distinct seeded pixel
/// permutations to every split.
pub fn build_permuted_stream(
    source: &LabeledImages,
    num_tasks: usize,
    options: SplitOptions,
    seed: u64,
) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::config("stream.num_tasks", "must be positive"));
    }
    let dim = source.train_images.ncols();
    let classes = source.num_classes();
    let identity: Vec<usize> = (0..dim).collect();
    let mut permutations: Vec<Vec<usize>> = vec![identity.clone()];
    let mut perm_rng = rng_for(seed, 0x9e4a);
    while permutations.len() < num_tasks {
        let mut p = identity.clone();
        p.shuffle(&mut perm_rng);
        if !permutations.contains(&p) {
            permutations.push(p);
        }
    }
    let mut tasks = Vec::new();
    for (k, perm) in permutations.into_iter().enumerate() {
        let perm = (k > 0).then(|| Arc::new(perm));
        let mut rng = rng_for(seed, 0x9e4b + k as u64);
        let (train_pos, val_pos) = hold_out((0..source.train_labels.len()).collect(), &options, &mut rng);
        let train_all = Dataset::new(
            Arc::clone(&source.train_images),
            (0..source.train_labels.len()).collect(),
            source.train_labels.clone(),
            perm.clone(),
        )?;
        let test = Dataset::new(
            Arc::clone(&source.test_images),
            (0..source.test_labels.len()).collect(),
            source.test_labels.clone(),
            perm,
        )?;
        tasks.push(TaskData {
            task_id: k + 1,
            train: train_all.subset(&train_pos),
            val: train_all.subset(&val_pos),
            test,
            num_classes: classes,
            description: if k == 0 {
                "identity".into()
            } else {
                format!("permutation {k}")
            },
        });
    }
    Ok(TaskStream {
        name: "pmnist".into(),
        seed,
        tasks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianStreamParams {
    pub num_tasks: usize,
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
}

/// Isotropic unit-variance blobs whose class means lie on a sphere of
/// radius `separation`, drawn afresh for every task; split 80/10/10.
pub fn build_gaussian_stream(params: GaussianStreamParams, seed: u64) -> Result<TaskStream> {
    let GaussianStreamParams {
        num_tasks,
        classes,
        dim,
        samples_per_class,
        separation,
    } = params;
    if num_tasks == 0 || dim == 0 || samples_per_class == 0 {
        return Err(Error::config(
            "stream",
            "num_tasks, dim and samples_per_class must be positive",
        ));
    }
    if classes < 2 {
        return Err(Error::config("stream.classes", "must be at least 2"));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::config("stream.separation", "must be non-negative"));
    }
    let mut tasks = Vec::new();
    for k in 0..num_tasks {
        let mut rng = rng_for(seed, 0x6a55 + k as u64);
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm * separation).collect()
            })
            .collect();
        let n = classes * samples_per_class;
        let mut features = Array2::<f64>::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for (i, mut row) in features.rows_mut().into_iter().enumerate() {
            let y = i / samples_per_class;
            for (x, m) in row.iter_mut().zip(&means[y]) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *x = m + noise;
            }
            labels.push(y);
        }
        let all = Dataset::from_matrix(features, labels)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_val = n / 10;
        let n_test = n / 10;
        let (val_pos, rest) = order.split_at(n_val);
        let (test_pos, train_pos) = rest.split_at(n_test);
        tasks.push(TaskData {
            task_id: k + 1,
            train: all.subset(train_pos),
            val: all.subset(val_pos),
            test: all.subset(test_pos),
            num_classes: classes,
            description: format!("gaussian blobs, {classes} classes in {dim} dims"),
        });
    }
    Ok(TaskStream {
        name: "gaussian".into(),
        seed,
        tasks,
    })
}

/// Locations of the four MNIST IDX files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistFiles {
    /// Directory holding the files under their usual names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl MnistFiles {
    fn resolve(&self, explicit: &Option<PathBuf>, field: &str, stems: &[&str]) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.clone());
        }
        let Some(dir) = &self.mnist_dir else {
            return Err(Error::config(
                format!("stream.{field}"),
                "required (or set stream.mnist_dir)",
            ));
        };
        stems.iter().map(|s| dir.join(s)).find(|p| p.exists()).ok_or_else(|| {
            Error::config(
                format!("stream.{field}"),
                format!("no {} under {}", stems[0], dir.display()),
            )
        })
    }

    pub fn paths(&self) -> Result<[PathBuf; 4]> {
        Ok([
            self.resolve(
                &self.train_images,
                "train_images",
                &["train-images-idx3-ubyte", "train-images.idx3-ubyte"],
            )?,
            self.resolve(
                &self.train_labels,
                "train_labels",
                &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"],
            )?,
            self.resolve(
                &self.test_images,
                "test_images",
                &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"],
            )?,
            self.resolve(
                &self.test_labels,
                "test_labels",
                &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"],
            )?,
        ])
    }

    pub fn load(&self) -> Result<LabeledImages> {
        let [ti, tl, si, sl] = self.paths()?;
        LabeledImages::new(load_idx(&ti, &tl)?, load_idx(&si, &sl)?)
    }
}

fn default_classes_per_task() -> usize {
    2
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_pmnist_tasks() -> usize {
    10
}

/// Stream section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamConfig {
    SplitMnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mnist_dir: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_labels: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default = "default_classes_per_task")]
        classes_per_task: usize,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_train_per_task: Option<usize>,
    },
    Pmnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mnist_dir: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_labels: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default = "default_pmnist_tasks")]
        num_tasks: usize,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_train_per_task: Option<usize>,
    },
    Gaussian {
        num_tasks: usize,
        classes: usize,
        dim: usize,
        samples_per_class: usize,
        separation: f64,
    },
}

impl StreamConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StreamConfig::SplitMnist { .. } => "split_mnist",
            StreamConfig::Pmnist { .. } => "pmnist",
            StreamConfig::Gaussian { .. } => "gaussian",
        }
    }

    fn mnist_files(&self) -> Option<MnistFiles> {
        match self {
            StreamConfig::SplitMnist {
                mnist_dir,
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            }
            | StreamConfig::Pmnist {
                mnist_dir,
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => Some(MnistFiles {
                mnist_dir: mnist_dir.clone(),
                train_images: train_images.clone(),
                train_labels: train_labels.clone(),
                test_images: test_images.clone(),
                test_labels: test_labels.clone(),
            }),
            StreamConfig::Gaussian { .. } => None,
        }
    }

    /// Makes relative data paths relative to `base`.
    pub fn resolve_relative(&mut self, base: &Path) {
        if let StreamConfig::SplitMnist {
            mnist_dir,
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        }
        | StreamConfig::Pmnist {
            mnist_dir,
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = self
        {
            for p in [mnist_dir, train_images, train_labels, test_images, test_labels]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(files) = self.mnist_files() {
            files.paths()?;
        }
        match *self {
            StreamConfig::SplitMnist {
                classes_per_task,
                val_fraction,
                max_train_per_task,
                ..
            } => {
                if classes_per_task < 2 {
                    return Err(Error::config("stream.classes_per_task", "must be at least 2"));
                }
                check_split(val_fraction, max_train_per_task)
            }
            StreamConfig::Pmnist {
                num_tasks,
                val_fraction,
                max_train_per_task,
                ..
            } => {
                if num_tasks == 0 {
                    return Err(Error::config("stream.num_tasks", "must be positive"));
                }
                check_split(val_fraction, max_train_per_task)
            }
            StreamConfig::Gaussian {
                num_tasks,
                classes,
                dim,
                samples_per_class,
                separation,
            } => {
                for (field, v) in [
                    ("num_tasks", num_tasks),
                    ("dim", dim),
                    ("samples_per_class", samples_per_class),
                ] {
                    if v == 0 {
                        return Err(Error::config(format!("stream.{field}"), "must be positive"));
                    }
                }
                if classes < 2 {
                    return Err(Error::config("stream.classes", "must be at least 2"));
                }
                if !(separation.is_finite() && separation >= 0.0) {
                    return Err(Error::config("stream.separation", "must be non-negative"));
                }
                Ok(())
            }
        }
    }

    /// Loads sources and builds the stream for `seed`.
    pub fn build(&self, seed: u64) -> Result<TaskStream> {
        self.validate()?;
        match *self {
            StreamConfig::SplitMnist {
                classes_per_task,
                val_fraction,
                max_train_per_task,
                ..
            } => {
                let source = self.mnist_files().expect("mnist stream").load()?;
                let options = SplitOptions {
                    val_fraction,
                    max_train_per_task,
                };
                build_split_stream(&source, classes_per_task, options, seed)
            }
            StreamConfig::Pmnist {
                num_tasks,
                val_fraction,
                max_train_per_task,
                ..
            } => {
                let source = self.mnist_files().expect("mnist stream").load()?;
                let options = SplitOptions {
                    val_fraction,
                    max_train_per_task,
                };
                build_permuted_stream(&source, num_tasks, options, seed)
            }
            StreamConfig::Gaussian {
                num_tasks,
                classes,
                dim,
                samples_per_class,
                separation,
            } => build_gaussian_stream(
                GaussianStreamParams {
                    num_tasks,
                    classes,
                    dim,
                    samples_per_class,
                    separation,
                },
                seed,
            ),
        }
    }
}

fn check_split(val_fraction: f64, max_train: Option<usize>) -> Result<()> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config("stream.val_fraction", "must be in [0, 1)"));
    }
    if max_train == Some(0) {
        return Err(Error::config("stream.max_train_per_task", "must be positive"));
    }
    Ok(())
}

/// Convenience for tests and tools: paths of an MNIST directory.
pub fn mnist_dir_files(dir: &Path) -> MnistFiles {
    MnistFiles {
        mnist_dir: Some(dir.to_path_buf()),
        ..MnistFiles::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_source(n_train: usize, n_test: usize) -> LabeledImages {
        let make = |n: usize, offset: usize| {
            let x = Array2::from_shape_fn((n, 6), |(i, j)| ((i + offset) * 6 + j) as f64 / 1000.0);
            let y = (0..n).map(|i| (i + offset) % 10).collect::<Vec<_>>();
            (x, y)
        };
        LabeledImages::new(make(n_train, 0), make(n_test, 7)).unwrap()
    }

    #[test]
    fn split_stream_partitions_classes() {
        let source = toy_source(200, 50);
        let stream = build_split_stream(&source, 2, SplitOptions::default(), 3).unwrap();
        assert_eq!(stream.len(), 5);
        let first = &stream.tasks[0];
        assert_eq!(first.description, "classes 0..=1");
        let mut seen = vec![0usize; 200];
        for (k, task) in stream.tasks.iter().enumerate() {
            assert_eq!(task.task_id, k + 1);
            for ds in [&task.train, &task.val] {
                for (pos, &row) in ds.source_rows().iter().enumerate() {
                    seen[row] += 1;
                    assert_eq!(source.train_labels[row] - 2 * k, ds.labels()[pos]);
                }
            }
            assert!(task.test.labels().iter().all(|&y| y < 2));
            assert_eq!(task.val.len(), 4);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn split_stream_single_task_keeps_labels() {
        let source = toy_source(100, 20);
        let stream = build_split_stream(&source, 10, SplitOptions::default(), 3).unwrap();
        assert_eq!(stream.len(), 1);
        let t = &stream.tasks[0];
        for (pos, &row) in t.train.source_rows().iter().enumerate() {
            assert_eq!(t.train.labels()[pos], source.train_labels[row]);
        }
        assert!(build_split_stream(&source, 3, SplitOptions::default(), 3).is_err());
    }

    #[test]
    fn permuted_stream_properties() {
        let source = toy_source(40, 10);
        let stream = build_permuted_stream(&source, 4, SplitOptions::default(), 11).unwrap();
        assert_eq!(stream.len(), 4);
        let t1 = &stream.tasks[0];
        assert!(t1.train.permutation().is_none());
        let (x, _) = t1.test.slice(0..10);
        assert_eq!(x, source.test_images.slice(ndarray::s![0..10, ..]));
        let perms: Vec<&[usize]> = stream.tasks[1..]
            .iter()
            .map(|t| t.train.permutation().unwrap())
            .collect();
        for i in 0..perms.len() {
            for j in i + 1..perms.len() {
                assert_ne!(perms[i], perms[j]);
            }
        }
        for t in &stream.tasks {
            assert_eq!(t.train.len() + t.val.len(), 40);
            assert_eq!(t.test.len(), 10);
            assert_eq!(t.num_classes, 10);
        }
        // undoing the permutation restores the source row
        let p = perms[0];
        let mut inverse = vec![0; p.len()];
        for (i, &j) in p.iter().enumerate() {
            inverse[j] = i;
        }
        let (permuted, _) = stream.tasks[1].test.slice(0..1);
        let restored: Vec<f64> = inverse.iter().map(|&i| permuted[[0, i]]).collect();
        assert_eq!(restored, source.test_images.row(0).to_vec());
    }

    #[test]
    fn gaussian_stream_is_deterministic() {
        let params = GaussianStreamParams {
            num_tasks: 3,
            classes: 3,
            dim: 4,
            samples_per_class: 20,
            separation: 5.0,
        };
        let a = build_gaussian_stream(params, 5).unwrap();
        let b = build_gaussian_stream(params, 5).unwrap();
        let c = build_gaussian_stream(params, 6).unwrap();
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(x.train.to_batch(1).inputs, y.train.to_batch(1).inputs);
            assert_eq!(x.test.labels(), y.test.labels());
        }
        assert_ne!(a.tasks[0].train.to_batch(1).inputs, c.tasks[0].train.to_batch(1).inputs);
        let t = &a.tasks[0];
        assert_eq!((t.train.len(), t.val.len(), t.test.len()), (48, 6, 6));
    }

    #[test]
    fn mnist_paths_required() {
        let cfg: StreamConfig = serde_json::from_str(r#"{"name": "split_mnist"}"#).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("stream.train_images"), "{err}");
    }
}
