//! Datasets: MNIST IDX files, seeded Gaussian blobs, shuffled minibatches.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::{Scalar, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Size of the validation split carved from the end of the MNIST training set.
pub const MNIST_VAL_SIZE: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// Pixel bytes divided by 255.
    Scale255,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    /// `N × sample_shape`.
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub name: String,
    pub normalization: Normalization,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        inputs: Tensor<T>,
        labels: Vec<usize>,
        name: impl Into<String>,
        normalization: Normalization,
        num_classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::InvalidShape {
                shape: inputs.shape().to_vec(),
                reason: format!("dataset `{name}` needs N ≥ 1 samples matching {} labels", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!("dataset `{name}`: label {bad} outside [0, {num_classes})")));
        }
        if !inputs.all_finite() {
            return Err(Error::Config(format!("dataset `{name}`: non-finite input")));
        }
        Ok(Dataset {
            inputs,
            labels,
            name,
            normalization,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Same samples viewed with a different per-sample shape of equal size.
    pub fn reshape_samples(mut self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.inputs = self.inputs.into_shape(full)?;
        Ok(self)
    }

    /// Copies the listed samples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let d = self.sample_len();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let x = Tensor::new(shape, data).expect("gathered length matches shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Contiguous sub-range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize, name: impl Into<String>) -> Result<Self> {
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = self.gather(&idx);
        Dataset::new(x, y, name, self.normalization, self.num_classes)
    }

    /// Splits off the last `n` samples, without shuffling.
    pub fn split_tail(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!("cannot hold out {n} of {} samples", self.len())));
        }
        let cut = self.len() - n;
        Ok((
            self.slice(0, cut, format!("{}-train", self.name))?,
            self.slice(cut, self.len(), format!("{}-val", self.name))?,
        ))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Header of an IDX file: magic, then dimension sizes. Returns dims and payload offset.
fn idx_header(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, usize)> {
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(Error::format(path, "truncated header"));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::format(path, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    if bytes.len() < header {
        return Err(Error::format(path, "truncated header"));
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let want: usize = dims.iter().product();
    if bytes.len() - header < want {
        return Err(Error::format(
            path,
            format!("truncated payload: {} bytes, expected {want}", bytes.len() - header),
        ));
    }
    Ok((dims, header))
}

/// Reads an IDX image/label pair; pixels are scaled by 1/255 and shaped `N × 1 × rows × cols`.
pub fn read_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let (idims, ioff) = idx_header(images_path, &img, IMAGES_MAGIC)?;
    let (ldims, loff) = idx_header(labels_path, &lab, LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::format(
            labels_path,
            format!("count mismatch: {} images but {} labels", idims[0], ldims[0]),
        ));
    }
    let n = idims[0];
    let pixels = n * idims[1] * idims[2];
    let data: Vec<T> = img[ioff..ioff + pixels].iter().map(|&b| T::of(b as f64 / 255.0)).collect();
    let labels: Vec<usize> = lab[loff..loff + n].iter().map(|&b| b as usize).collect();
    let inputs = Tensor::new([n, 1, idims[1], idims[2]], data)?;
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(inputs, labels, name, Normalization::Scale255, num_classes)
}

/// Writes a scaled image dataset back to IDX. Samples must be `rows × cols` or `1 × rows × cols`.
pub fn write_idx<T: Scalar>(data: &Dataset<T>, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = data.sample_shape();
    let (rows, cols) = match *s {
        [r, c] | [1, r, c] => (r, c),
        _ => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "IDX images need rows × cols samples".into(),
            })
        }
    };
    let factor = match data.normalization {
        Normalization::Scale255 => 255.0,
        Normalization::None => 1.0,
    };
    let n = data.len();
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.inputs.data().iter().map(|x| (x.as_f64() * factor).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(data.labels.iter().map(|&y| y as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

fn blobs_with_stream<T: Scalar>(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    stream: &str,
) -> Dataset<T> {
    assert!(num_classes > 0 && per_class > 0 && dim > 0, "blob counts must be positive");
    let mut centers_rng = derive_rng(seed, "blobs/centers");
    let centers: Vec<f64> = (0..num_classes * dim)
        .map(|_| StandardNormal.sample(&mut centers_rng))
        .collect();
    let mut rng = derive_rng(seed, stream);
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        for _ in 0..per_class {
            for d in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(T::of(centers[c * dim + d] + spread * z));
            }
            labels.push(c);
        }
    }
    let inputs = Tensor::new([num_classes * per_class, dim], data).expect("sized above");
    Dataset::new(inputs, labels, format!("blobs-{stream}"), Normalization::None, num_classes)
        .expect("labels in range")
}

/// Isotropic Gaussian clusters around standard-normal centers, grouped by class.
pub fn synth_blobs<T: Scalar>(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Dataset<T> {
    blobs_with_stream(num_classes, per_class, dim, spread, seed, "train")
}

/// Fresh points around the same centers as [`synth_blobs`] with equal `seed`.
pub fn synth_blobs_split<T: Scalar>(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    split: &str,
) -> Dataset<T> {
    blobs_with_stream(num_classes, per_class, dim, spread, seed, split)
}

/// Seeded permutation of `0..n` cut into batches; the last batch may be short.
pub fn minibatches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Config(format!("batch size {batch_size} outside [1, {n}]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// MNIST directory: `$WTONP_MNIST_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("WTONP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// Train, validation and test splits.
#[derive(Debug, Clone)]
pub struct Splits<T: Scalar> {
    pub train: Dataset<T>,
    pub val: Option<Dataset<T>>,
    pub test: Dataset<T>,
}

impl<T: Scalar> Splits<T> {
    pub fn reshape_samples(self, shape: &[usize]) -> Result<Self> {
        Ok(Splits {
            train: self.train.reshape_samples(shape)?,
            val: self.val.map(|v| v.reshape_samples(shape)).transpose()?,
            test: self.test.reshape_samples(shape)?,
        })
    }

    pub fn get(&self, split: &str) -> Option<&Dataset<T>> {
        match split {
            "train" => Some(&self.train),
            "val" => self.val.as_ref(),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// MNIST with the last [`MNIST_VAL_SIZE`] training images held out.
pub fn load_mnist<T: Scalar>(dir: &Path) -> Result<Splits<T>> {
    let full = read_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let (mut train, mut val) = full.split_tail(MNIST_VAL_SIZE)?;
    train.name = "mnist-train".into();
    val.name = "mnist-val".into();
    let mut test = read_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    test.name = "mnist-test".into();
    Ok(Splits {
        train,
        val: Some(val),
        test,
    })
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        /// Use only the first `limit` training images (after the validation hold-out).
        #[serde(default)]
        limit: Option<usize>,
    },
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
}

fn default_test_per_class() -> usize {
    100
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Mnist { dir: None, limit: None }
    }
}

impl DatasetSpec {
    pub fn load<T: Scalar>(&self) -> Result<Splits<T>> {
        match self {
            DatasetSpec::Mnist { dir, limit } => {
                let dir = dir.clone().unwrap_or_else(mnist_dir);
                let mut s = load_mnist(&dir)?;
                if let Some(l) = *limit {
                    if l == 0 || l > s.train.len() {
                        return Err(Error::Config(format!("mnist limit {l} outside [1, {}]", s.train.len())));
                    }
                    s.train = s.train.slice(0, l, "mnist-train")?;
                }
                Ok(s)
            }
            &DatasetSpec::Blobs {
                classes,
                per_class,
                dim,
                spread,
                seed,
                test_per_class,
            } => {
                if classes == 0 || per_class == 0 || dim == 0 || test_per_class == 0 {
                    return Err(Error::Config("blob counts must be positive".into()));
                }
                Ok(Splits {
                    train: synth_blobs(classes, per_class, dim, spread, seed),
                    val: Some(synth_blobs_split(classes, test_per_class, dim, spread, seed, "val")),
                    test: synth_blobs_split(classes, test_per_class, dim, spread, seed, "test"),
                })
            }
        }
    }

    /// Parses `mnist[:DIR]` or `blobs:classes=3,per_class=50,dim=8,spread=0.1,seed=1[,test_per_class=N]`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "mnist" => Ok(DatasetSpec::Mnist {
                dir: (!rest.is_empty()).then(|| PathBuf::from(rest)),
                limit: None,
            }),
            "blobs" => {
                let mut table = toml::Table::new();
                for kv in rest.split(',').filter(|kv| !kv.is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
                    let value = v
                        .parse::<i64>()
                        .map(toml::Value::Integer)
                        .or_else(|_| v.parse::<f64>().map(toml::Value::Float))
                        .map_err(|_| Error::Config(format!("`{k}` is not a number")))?;
                    table.insert(k.to_string(), value);
                }
                table.insert("kind".into(), toml::Value::String("blobs".into()));
                if let Some(toml::Value::Integer(i)) = table.get("spread").cloned() {
                    table.insert("spread".into(), toml::Value::Float(i as f64));
                }
                table
                    .try_into()
                    .map_err(|e| Error::Config(format!("dataset `{s}`: {e}")))
            }
            _ => Err(Error::Config(format!("unknown dataset `{s}`"))),
        }
    }
}
