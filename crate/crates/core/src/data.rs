//! Dataset loaders (MNIST IDX, CIFAR-10 binary) and checkpoint files.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes  "EMRCKPT1"
//! spec       u32 length, then that many UTF-8 bytes (ModelSpec::encode)
//! count      u32 number of tensor records
//! record     u32 name length, name bytes, u8 dtype (1 = f32, 2 = f64),
//!            u32 rank, rank × u64 dims, product(dims) values
//! checksum   u32 CRC-32 (IEEE) of every byte between magic and checksum
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Network, Parameter};
use crate::tensor::{DType, Scalar, Tensor};

pub const MNIST_IMAGE_MAGIC: u32 = 2051;
pub const MNIST_LABEL_MAGIC: u32 = 2049;
pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMRCKPT1";

/// A source file and the SHA-256 of its contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub path: String,
    pub sha256: String,
}

/// Images in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    /// `N×C×H×W`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Vec<Provenance>,
}

impl<T: Scalar> DatasetSplit<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for images {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Usage(format!("label {y} at {i} out of range for {num_classes} classes")));
        }
        Ok(DatasetSplit {
            images,
            labels,
            num_classes,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, e.g. `[1, 28, 28]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Rows `start..end` as an image batch and its labels.
    pub fn batch(&self, start: usize, end: usize) -> Result<(Tensor<T>, &[usize])> {
        Ok((self.images.slice_rows(start, end)?, &self.labels[start..end]))
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(DatasetSplit {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        })
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn cast<U: Scalar>(&self) -> DatasetSplit<U> {
        DatasetSplit {
            images: self.images.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }
}

/// Splits off `n_val` samples chosen by a seeded permutation. Both parts
/// keep the original sample order.
pub fn split_validation<T: Scalar>(
    train: &DatasetSplit<T>,
    n_val: usize,
    seed: u64,
) -> Result<(DatasetSplit<T>, DatasetSplit<T>)> {
    if n_val >= train.len() && n_val > 0 {
        return Err(Error::Usage(format!(
            "validation size {n_val} must be smaller than the training set ({})",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_val = vec![false; train.len()];
    for &i in &order[..n_val] {
        in_val[i] = true;
    }
    let (val, rest): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| in_val[i]);
    Ok((train.select(&rest)?, train.select(&val)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_file(path: &Path) -> Result<(Vec<u8>, Provenance)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let provenance = Provenance {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    };
    Ok((bytes, provenance))
}

fn format_error(path: &str, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn pixels<T: Scalar>(raw: &[u8]) -> Vec<T> {
    let scale = T::of(255.0);
    raw.iter().map(|&b| T::of(b as f64) / scale).collect()
}

/// Parses an IDX3 image file; returns `(count, rows, cols, pixel bytes)`.
pub fn parse_idx_images<'a>(bytes: &'a [u8], path: &str) -> Result<(usize, usize, usize, &'a [u8])> {
    if bytes.len() < 16 {
        return Err(format_error(path, bytes.len(), "truncated IDX image header (16 bytes expected)"));
    }
    let magic = be_u32(bytes, 0);
    if magic != MNIST_IMAGE_MAGIC {
        return Err(format_error(path, 0, format!("bad magic {magic}, expected {MNIST_IMAGE_MAGIC}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(format_error(
            path,
            bytes.len(),
            format!("truncated pixel data: {n}×{rows}×{cols} needs {need} bytes after the header, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(format_error(path, 16 + need, "trailing bytes after pixel data"));
    }
    Ok((n, rows, cols, body))
}

/// Parses an IDX1 label file; returns the label bytes.
pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &str) -> Result<&'a [u8]> {
    if bytes.len() < 8 {
        return Err(format_error(path, bytes.len(), "truncated IDX label header (8 bytes expected)"));
    }
    let magic = be_u32(bytes, 0);
    if magic != MNIST_LABEL_MAGIC {
        return Err(format_error(path, 0, format!("bad magic {magic}, expected {MNIST_LABEL_MAGIC}")));
    }
    let n = be_u32(bytes, 4) as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(format_error(path, bytes.len(), format!("truncated labels: {n} expected, found {}", body.len())));
    }
    if body.len() > n {
        return Err(format_error(path, 8 + n, "trailing bytes after labels"));
    }
    if let Some(i) = body.iter().position(|&y| y > 9) {
        return Err(format_error(path, 8 + i, format!("label {} outside 0..=9", body[i])));
    }
    Ok(body)
}

fn load_idx_pair<T: Scalar>(images: &Path, labels: &Path) -> Result<DatasetSplit<T>> {
    let (img_bytes, img_prov) = read_file(images)?;
    let (lbl_bytes, lbl_prov) = read_file(labels)?;
    let img_path = images.display().to_string();
    let lbl_path = labels.display().to_string();
    let (n, rows, cols, raw) = parse_idx_images(&img_bytes, &img_path)?;
    let lbl = parse_idx_labels(&lbl_bytes, &lbl_path)?;
    if lbl.len() != n {
        return Err(format_error(
            &lbl_path,
            4,
            format!("label count {} does not match image count {n} in {img_path}", lbl.len()),
        ));
    }
    let tensor = Tensor::new(vec![n, 1, rows, cols], pixels(raw))?;
    let mut split = DatasetSplit::new(tensor, lbl.iter().map(|&y| y as usize).collect(), 10)?;
    split.provenance = vec![img_prov, lbl_prov];
    Ok(split)
}

/// Loads `(train, test)` from the four uncompressed IDX files in `dir`.
pub fn load_mnist<T: Scalar>(dir: impl AsRef<Path>) -> Result<(DatasetSplit<T>, DatasetSplit<T>)> {
    let dir = dir.as_ref();
    let train = load_idx_pair(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx_pair(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Parses concatenated CIFAR-10 records into `(labels, pixel bytes)`.
pub fn parse_cifar_records<'a>(bytes: &'a [u8], path: &str) -> Result<Vec<(u8, &'a [u8])>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let whole = bytes.len() - bytes.len() % CIFAR_RECORD_BYTES;
        return Err(format_error(
            path,
            whole,
            format!("size {} is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] > 9 {
                Err(format_error(path, i * CIFAR_RECORD_BYTES, format!("label {} outside 0..=9", rec[0])))
            } else {
                Ok((rec[0], &rec[1..]))
            }
        })
        .collect()
}

fn load_cifar_files<T: Scalar>(files: &[PathBuf]) -> Result<DatasetSplit<T>> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for file in files {
        let (bytes, prov) = read_file(file)?;
        for (y, px) in parse_cifar_records(&bytes, &prov.path)? {
            labels.push(y as usize);
            data.extend(pixels::<T>(px));
        }
        provenance.push(prov);
    }
    let n = labels.len();
    let mut split = DatasetSplit::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10)?;
    split.provenance = provenance;
    Ok(split)
}

/// Loads `(train, test)` from the binary CIFAR-10 batches in `dir` (or its
/// `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10<T: Scalar>(dir: impl AsRef<Path>) -> Result<(DatasetSplit<T>, DatasetSplit<T>)> {
    let mut dir = dir.as_ref().to_path_buf();
    if !dir.join("data_batch_1.bin").exists() && dir.join("cifar-10-batches-bin").is_dir() {
        dir = dir.join("cifar-10-batches-bin");
    }
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    Ok((load_cifar_files(&train)?, load_cifar_files(&[dir.join("test_batch.bin")])?))
}

/// MNIST-like synthetic data: sparse per-class stroke prototypes (about a
/// fifth of the pixels lit) copied with random intensity jitter and
/// background speckle. Pixels sit on the 1/255 grid so that they survive a
/// round trip through the byte formats.
///
/// Splits drawn with the same `proto_seed` share prototypes; `sample_seed`
/// picks the noise. Labels cycle through the classes.
pub fn synthetic_split<T: Scalar>(n: usize, shape: [usize; 3], classes: usize, proto_seed: u64, sample_seed: u64) -> Result<DatasetSplit<T>> {
    use rand::Rng;
    let classes = classes.max(1);
    let d: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(proto_seed);
    let protos: Vec<f64> = (0..classes * d)
        .map(|_| if rng.random_bool(0.2) { rng.random_range(0.6..1.0) } else { 0.0 })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let y = i % classes;
        for &p in &protos[y * d..(y + 1) * d] {
            let v = if p > 0.0 {
                if rng.random_bool(0.15) { 0.0 } else { p * rng.random_range(0.7..1.0) }
            } else if rng.random_bool(0.05) {
                rng.random_range(0.0..0.6)
            } else {
                0.0
            };
            data.push(T::of((v * 255.0).round() / 255.0));
        }
    }
    let labels = (0..n).map(|i| i % classes).collect();
    DatasetSplit::new(Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?, labels, classes)
}

/// IDX3 image file bytes for `n` images of `rows × cols` pixels.
pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(16 + pixels.len());
    for x in [MNIST_IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        v.extend_from_slice(&x.to_be_bytes());
    }
    v.extend_from_slice(pixels);
    v
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(8 + labels.len());
    v.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    v.extend_from_slice(labels);
    v
}

/// Pixels rounded to bytes (`round(255·x)`, clamped).
fn quantize<T: Scalar>(split: &DatasetSplit<T>) -> Vec<u8> {
    split
        .images
        .data()
        .iter()
        .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn label_bytes<T>(split: &DatasetSplit<T>) -> Result<Vec<u8>> {
    split
        .labels
        .iter()
        .map(|&y| u8::try_from(y).ok().filter(|&b| b <= 9).ok_or_else(|| Error::Usage(format!("label {y} outside 0..=9"))))
        .collect()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `[N, 1, H, W]` splits as the four MNIST IDX files.
pub fn write_mnist<T: Scalar>(dir: impl AsRef<Path>, train: &DatasetSplit<T>, test: &DatasetSplit<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (split, img, lbl) in [
        (train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let shape = split.sample_shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::Usage(format!("MNIST files hold [1, H, W] samples, got {shape:?}")));
        }
        write_bytes(&dir.join(img), &encode_idx_images(split.len(), shape[1], shape[2], &quantize(split)))?;
        write_bytes(&dir.join(lbl), &encode_idx_labels(&label_bytes(split)?))?;
    }
    Ok(())
}

/// Writes `[N, 3, 32, 32]` splits as CIFAR-10 binary batches; the training
/// split is dealt over the five `data_batch_*.bin` files.
pub fn write_cifar10<T: Scalar>(dir: impl AsRef<Path>, train: &DatasetSplit<T>, test: &DatasetSplit<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = |split: &DatasetSplit<T>, range: std::ops::Range<usize>| -> Result<Vec<u8>> {
        if split.sample_shape() != [3, 32, 32] {
            return Err(Error::Usage(format!("CIFAR-10 files hold [3, 32, 32] samples, got {:?}", split.sample_shape())));
        }
        let px = quantize(split);
        let labels = label_bytes(split)?;
        let mut out = Vec::with_capacity(range.len() * CIFAR_RECORD_BYTES);
        for i in range {
            out.push(labels[i]);
            out.extend_from_slice(&px[i * 3072..(i + 1) * 3072]);
        }
        Ok(out)
    };
    let n = train.len();
    for b in 0..5 {
        let bytes = records(train, b * n / 5..(b + 1) * n / 5)?;
        write_bytes(&dir.join(format!("data_batch_{}.bin", b + 1)), &bytes)?;
    }
    write_bytes(&dir.join("test_batch.bin"), &records(test, 0..test.len())?)
}

/// Serializes a network built from a [`ModelSpec`].
pub fn encode_checkpoint<T: Scalar>(net: &Network<T>) -> Result<Vec<u8>> {
    let spec = net
        .spec()
        .ok_or_else(|| Error::Usage("only networks built from a model spec can be checkpointed".into()))?;
    let id = spec.encode();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id.as_bytes());
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out[CHECKPOINT_MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_error(self.path, self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let start = self.pos;
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| format_error(self.path, start, format!("{what} is not UTF-8")))
    }
}

struct Header<'a> {
    spec: ModelSpec,
    body: Cursor<'a>,
}

fn read_header<'a>(bytes: &'a [u8], path: &'a str) -> Result<Header<'a>> {
    let magic_len = CHECKPOINT_MAGIC.len();
    if bytes.len() < magic_len || &bytes[..magic_len] != CHECKPOINT_MAGIC {
        return Err(format_error(path, 0, "not a checkpoint (bad magic)"));
    }
    if bytes.len() < magic_len + 4 {
        return Err(format_error(path, bytes.len(), "truncated checkpoint"));
    }
    let end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[magic_len..end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut body = Cursor {
        bytes: &bytes[..end],
        pos: magic_len,
        path,
    };
    let spec = ModelSpec::decode(&body.string("spec id")?)?;
    Ok(Header { spec, body })
}

/// Element type stored in a checkpoint.
pub fn checkpoint_dtype(bytes: &[u8], path: &str) -> Result<DType> {
    let mut h = read_header(bytes, path)?;
    let count = h.body.u32("tensor count")?;
    if count == 0 {
        return Err(format_error(path, h.body.pos, "checkpoint holds no tensors"));
    }
    h.body.string("tensor name")?;
    let pos = h.body.pos;
    let code = h.body.take(1, "dtype")?[0];
    DType::from_code(code).ok_or_else(|| format_error(path, pos, format!("unknown dtype code {code}")))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &str) -> Result<Network<T>> {
    let Header { spec, mut body } = read_header(bytes, path)?;
    let count = body.u32("tensor count")? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let record_start = body.pos;
        let name = body.string("tensor name")?;
        let pos = body.pos;
        let code = body.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| format_error(path, pos, format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::DtypeMismatch {
                found: dtype.name(),
                expected: T::DTYPE.name(),
            });
        }
        let rank = body.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| body.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = body.take(n * dtype.size(), "tensor values")?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        let value = Tensor::new(dims, data).map_err(|e| format_error(path, record_start, e.to_string()))?;
        params.push(Parameter { name, value });
    }
    if body.pos != body.bytes.len() {
        return Err(format_error(path, body.pos, "unexpected bytes after the last tensor record"));
    }
    Network::with_params(&spec, params).map_err(|e| format_error(path, CHECKPOINT_MAGIC.len(), e.to_string()))
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(net)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
