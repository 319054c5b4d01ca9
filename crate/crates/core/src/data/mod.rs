//! Datasets, splits, normalization and the batch pipeline.

mod augment;
mod formats;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{augment, hflip, rotate, AugmentConfig};
pub use formats::{cifar10_dataset, idx_dataset, load_cifar10_bin, load_idx, parse_idx, IdxArray, CIFAR_RECORD};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Environment variable naming the directory that holds the dataset folders.
pub const DATA_DIR_ENV: &str = "BNN_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, c, h, w]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[c, h, w]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
        })
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }
}

/// Seeded shuffle, then the first `fraction` of samples train and the rest validate.
pub fn split_train_val(ds: &Dataset, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut idx);
    let cut = (ds.len() as f64 * fraction).round() as usize;
    Ok((
        ds.subset(&idx[..cut], Split::Train)?,
        ds.subset(&idx[cut..], Split::Val)?,
    ))
}

/// Per-channel standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population mean and standard deviation per channel; a constant channel keeps std 1.
    pub fn fit(train: &Dataset) -> Self {
        let s = train.images.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for (i, chunk) in train.images.data().chunks(plane).enumerate() {
            for &v in chunk {
                sum[i % c] += v as f64;
                sq[i % c] += (v as f64) * (v as f64);
            }
        }
        let count = (train.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / count - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = images.shape();
        if images.rank() != 4 || s[1] != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                expected: vec![self.mean.len()],
                actual: s.to_vec(),
            });
        }
        let (c, plane) = (s[1], s[2] * s[3]);
        let mut out = images.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let (m, sd) = (self.mean[i % c], self.std[i % c]);
            for v in chunk {
                *v = (*v - m) / sd;
            }
        }
        Tensor::new(s.to_vec(), out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    /// Shuffled batches, augmented; only the training split is accepted.
    Train,
    /// Sequential batches, never augmented.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPipeline {
    pub mode: PipelineMode,
    pub batch_size: usize,
    augment: AugmentConfig,
    pub normalization: Normalization,
    /// A trailing batch smaller than this is folded into the one before it.
    pub min_batch: usize,
}

impl BatchPipeline {
    pub fn train(batch_size: usize, augment: AugmentConfig, normalization: Normalization) -> Result<Self> {
        augment.validate()?;
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            mode: PipelineMode::Train,
            batch_size,
            augment,
            normalization,
            min_batch: 1,
        })
    }

    pub fn eval(batch_size: usize, normalization: Normalization) -> Self {
        Self {
            mode: PipelineMode::Eval,
            batch_size: batch_size.max(1),
            augment: AugmentConfig::none(),
            normalization,
            min_batch: 1,
        }
    }

    pub fn with_min_batch(mut self, min_batch: usize) -> Self {
        self.min_batch = min_batch.max(1);
        self
    }

    pub fn augmentation(&self) -> &AugmentConfig {
        &self.augment
    }

    /// Index batches for one pass over `n` samples.
    pub fn epoch(&self, n: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        if self.mode == PipelineMode::Train {
            rng.shuffle(&mut idx);
        }
        let mut batches: Vec<Vec<usize>> = idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().unwrap().len() < self.min_batch {
            let tail = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(tail);
        }
        batches
    }

    /// Gathers, augments (training only) and normalizes one batch.
    pub fn batch(&self, ds: &Dataset, indices: &[usize], rng: &mut Rng) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images = ds.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| ds.labels[i]).collect();
        let images = match self.mode {
            PipelineMode::Train => {
                if ds.split != Split::Train {
                    return Err(Error::InvalidArgument(format!(
                        "training pipeline given the {:?} split",
                        ds.split
                    )));
                }
                augment(&images, &self.augment, rng)?
            }
            PipelineMode::Eval => {
                assert!(self.augment.is_identity(), "evaluation pipelines never augment");
                images
            }
        };
        Ok((self.normalization.apply(&images)?, labels))
    }
}

/// Gaussian clusters around random per-class prototypes, clipped to `[0, 1]`.
pub fn synthetic_blobs(n: usize, classes: usize, shape: &[usize], noise: f64, rng: &mut Rng) -> Result<Dataset> {
    if classes == 0 || shape.len() != 3 {
        return Err(Error::InvalidArgument("need classes >= 1 and a [c, h, w] shape".into()));
    }
    let d: usize = shape.iter().product();
    let prototypes: Tensor<f32> = rng.uniform(&[classes, d], 0.2, 0.8)?;
    let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
    let noise_t: Tensor<f32> = rng.normal(&[n.max(1), d], 0.0, noise)?;
    let mut data = Vec::with_capacity(n * d);
    for (i, &l) in labels.iter().enumerate() {
        let proto = &prototypes.data()[l * d..(l + 1) * d];
        let eps = &noise_t.data()[i * d..(i + 1) * d];
        data.extend(proto.iter().zip(eps).map(|(p, e)| (p + e).clamp(0.0, 1.0)));
    }
    let mut full = vec![n];
    full.extend(shape);
    Dataset::new(Tensor::new(full, data)?, labels, classes, Split::Train)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Mnist,
    FashionMnist,
    Cifar10,
    /// Generated 4-class 8×8 blobs, for quick runs without files.
    Synthetic,
}

impl DatasetId {
    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Synthetic => "synthetic",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetId::Synthetic => 4,
            _ => 10,
        }
    }

    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetId::Mnist | DatasetId::FashionMnist => [1, 28, 28],
            DatasetId::Cifar10 => [3, 32, 32],
            DatasetId::Synthetic => [1, 8, 8],
        }
    }

    /// Conventional augmentation: no flips for digits and clothing, flips for natural images.
    pub fn default_augment(self) -> AugmentConfig {
        match self {
            DatasetId::Cifar10 => AugmentConfig::natural_images(),
            DatasetId::Synthetic => AugmentConfig::none(),
            _ => AugmentConfig::digits(),
        }
    }

    fn folder(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
            DatasetId::Cifar10 => "cifar-10-batches-bin",
            DatasetId::Synthetic => "",
        }
    }

    /// Loads `(train, test)` from `<root>/<folder>`.
    pub fn load(self, root: &Path) -> Result<(Dataset, Dataset)> {
        let dir = root.join(self.folder());
        let (mut train, mut test) = match self {
            DatasetId::Mnist | DatasetId::FashionMnist => (
                load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?,
                load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?,
            ),
            DatasetId::Cifar10 => {
                let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                (
                    load_cifar10_bin(&train)?,
                    load_cifar10_bin(&[dir.join("test_batch.bin")])?,
                )
            }
            DatasetId::Synthetic => {
                let mut rng = Rng::new(0x5eed);
                let all = synthetic_blobs(2500, 4, &self.input_shape(), 0.15, &mut rng)?;
                let idx: Vec<usize> = (0..2500).collect();
                (
                    all.subset(&idx[..2000], Split::Train)?,
                    all.subset(&idx[2000..], Split::Test)?,
                )
            }
        };
        train.num_classes = self.num_classes();
        test.num_classes = self.num_classes();
        test.split = Split::Test;
        Ok((train, test))
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "mnist" => DatasetId::Mnist,
            "fashion-mnist" | "fashion" => DatasetId::FashionMnist,
            "cifar10" | "cifar-10" => DatasetId::Cifar10,
            "synthetic" => DatasetId::Synthetic,
            other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
        })
    }
}

/// `explicit`, else `$BNN_DATA_DIR`, else `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize) -> Dataset {
        synthetic_blobs(n, 3, &[2, 3, 3], 0.1, &mut Rng::new(7)).unwrap()
    }

    #[test]
    fn ninety_ten_split_is_disjoint_and_exhaustive() {
        let ds = blobs(100);
        let (tr, va) = split_train_val(&ds, 0.9, &mut Rng::new(1)).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        assert_eq!((tr.split, va.split), (Split::Train, Split::Val));
        // identify samples by their pixels, which are distinct with noise
        let key = |d: &Dataset, i: usize| {
            d.images
                .slice_rows(i, 1)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        let mut all: Vec<_> = (0..90)
            .map(|i| key(&tr, i))
            .chain((0..10).map(|i| key(&va, i)))
            .collect();
        all.sort();
        let mut orig: Vec<_> = (0..100).map(|i| key(&ds, i)).collect();
        orig.sort();
        assert_eq!(all, orig);
        let (tr2, va2) = split_train_val(&ds, 0.9, &mut Rng::new(1)).unwrap();
        assert_eq!((tr, va), (tr2, va2));
        assert!(split_train_val(&ds, 1.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn normalization_standardizes_channels() {
        let ds = blobs(200);
        let norm = Normalization::fit(&ds);
        let z = norm.apply(&ds.images).unwrap();
        let fitted = Normalization::fit(&Dataset {
            images: z.map(|v| (v + 10.0) / 20.0),
            ..ds.clone()
        });
        for (m, s) in fitted.mean.iter().zip(&fitted.std) {
            assert!((m - 0.5).abs() < 1e-4 && (s - 0.05).abs() < 1e-4, "{m} {s}");
        }
    }

    #[test]
    fn eval_pipeline_is_sequential_and_unaugmented() {
        let ds = blobs(10);
        let p = BatchPipeline::eval(4, Normalization::identity(2));
        let order = p.epoch(10, &mut Rng::new(0));
        assert_eq!(order, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
        let (x, y) = p.batch(&ds, &order[0], &mut Rng::new(0)).unwrap();
        assert_eq!(x, ds.images.slice_rows(0, 4).unwrap());
        assert_eq!(y, ds.labels[..4]);
    }

    #[test]
    fn train_pipeline_refuses_other_splits() {
        let mut ds = blobs(10);
        ds.split = Split::Test;
        let p = BatchPipeline::train(4, AugmentConfig::digits(), Normalization::identity(2)).unwrap();
        assert!(p.batch(&ds, &[0, 1], &mut Rng::new(0)).is_err());
    }

    #[test]
    fn small_tail_batches_are_folded() {
        let p = BatchPipeline::train(4, AugmentConfig::none(), Normalization::identity(1))
            .unwrap()
            .with_min_batch(4);
        let order = p.epoch(10, &mut Rng::new(3));
        assert_eq!(order.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 6]);
        let mut flat: Vec<usize> = order.concat();
        flat.sort();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_dataset_is_valid_and_seeded() {
        let (tr, te) = DatasetId::Synthetic.load(Path::new("/nonexistent")).unwrap();
        assert_eq!((tr.len(), te.len(), tr.num_classes), (2000, 500, 4));
        assert_eq!(te.split, Split::Test);
        assert_eq!(DatasetId::Synthetic.load(Path::new("")).unwrap().0, tr);
    }

    #[test]
    fn dataset_ids_parse() {
        for id in [
            DatasetId::Mnist,
            DatasetId::FashionMnist,
            DatasetId::Cifar10,
            DatasetId::Synthetic,
        ] {
            assert_eq!(id.name().parse::<DatasetId>().unwrap(), id);
        }
    }
}
