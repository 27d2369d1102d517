//! Dataset ingestion (IDX container), synthetic dataset generation, and
//! deterministic epoch batching.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// IDX container parse failures, each carrying the byte offset it was
/// detected at.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("bad magic at byte {offset}: expected 0x00, found {found:#04x}")]
    BadMagic { offset: usize, found: u8 },
    #[error("unsupported type code {code:#04x} at byte 2: only 0x08 (unsigned byte) is supported")]
    UnsupportedType { code: u8 },
    #[error("truncated at byte {offset}: needed {needed} more byte(s)")]
    Truncated { offset: usize, needed: u128 },
    #[error("{extra} trailing byte(s) after payload at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

/// Parses an IDX container down to its raw shape and unsigned-byte payload.
///
/// Layout: two zero bytes, a type code (`0x08`), a rank byte, `rank`
/// big-endian u32 dimensions, then the row-major payload.
#[allow(clippy::needless_range_loop)] // offset doubles as the reported error position
pub fn parse_idx_bytes(bytes: &[u8]) -> std::result::Result<(Vec<usize>, Vec<u8>), IdxError> {
    let need = |offset: usize, len: usize| -> std::result::Result<(), IdxError> {
        if bytes.len() < offset + len {
            Err(IdxError::Truncated {
                offset: bytes.len(),
                needed: (offset + len - bytes.len()) as u128,
            })
        } else {
            Ok(())
        }
    };
    for offset in 0..2 {
        need(offset, 1)?;
        if bytes[offset] != 0 {
            return Err(IdxError::BadMagic {
                offset,
                found: bytes[offset],
            });
        }
    }
    need(2, 1)?;
    if bytes[2] != 0x08 {
        return Err(IdxError::UnsupportedType { code: bytes[2] });
    }
    need(3, 1)?;
    let rank = bytes[3] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut offset = 4;
    for _ in 0..rank {
        need(offset, 4)?;
        let dim = u32::from_be_bytes([
            bytes[offset],
            bytes[offset + 1],
            bytes[offset + 2],
            bytes[offset + 3],
        ]) as usize;
        shape.push(dim);
        offset += 4;
    }
    let payload_len: u128 = shape.iter().map(|&d| d as u128).product();
    let available = (bytes.len() - offset) as u128;
    if available < payload_len {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed: payload_len - available,
        });
    }
    if available > payload_len {
        return Err(IdxError::TrailingBytes {
            offset: offset + payload_len as usize,
            extra: (available - payload_len) as usize,
        });
    }
    Ok((shape, bytes[offset..].to_vec()))
}

/// Parses an IDX container into a tensor, mapping the unsigned-byte payload
/// into `[0, 1]` by dividing by 255.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let (shape, payload) = parse_idx_bytes(bytes)?;
    Ok(Tensor::raw(
        shape,
        payload.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

/// Serializes raw unsigned-byte data into the IDX container format.
pub fn write_idx_bytes(shape: &[usize], payload: &[u8]) -> Result<Vec<u8>> {
    if shape.len() > 255 {
        return Err(Error::Argument(format!("idx rank {} > 255", shape.len())));
    }
    let expected: usize = shape.iter().product();
    if expected != payload.len() {
        return Err(Error::shape("write_idx_bytes", shape, &[payload.len()]));
    }
    let mut out = Vec::with_capacity(4 + 4 * shape.len() + payload.len());
    out.extend_from_slice(&[0, 0, 0x08, shape.len() as u8]);
    for &dim in shape {
        if dim > u32::MAX as usize {
            return Err(Error::Argument(format!("idx dimension {dim} exceeds u32")));
        }
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    Ok(out)
}

/// Inverse of [`parse_idx`]: quantizes values in `[0, 1]` back to bytes, so
/// `write_idx(parse_idx(b)) == b` for any well-formed input.
pub fn write_idx(tensor: &Tensor) -> Result<Vec<u8>> {
    let payload = tensor
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect::<Vec<u8>>();
    write_idx_bytes(tensor.shape(), &payload)
}

/// Affine record of the normalization applied to stored inputs:
/// `stored = raw * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
        }
    }

    pub fn byte_to_unit() -> Self {
        Self {
            scale: 1.0 / 255.0,
            offset: 0.0,
        }
    }
}

/// Labeled classification dataset; immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Tensor>,
        labels: Vec<usize>,
        num_classes: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = inputs.first() {
            let dim = first.len();
            if inputs.iter().any(|x| x.len() != dim) {
                return Err(Error::Argument("inconsistent input dimensions".into()));
            }
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            normalization,
        })
    }

    /// Builds a dataset from an IDX image file and an IDX label file. The
    /// leading image dimension indexes examples; the rest are flattened.
    pub fn from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Self> {
        let (img_shape, img_payload) = parse_idx_bytes(image_bytes)?;
        let (lbl_shape, lbl_payload) = parse_idx_bytes(label_bytes)?;
        if img_shape.is_empty() {
            return Err(Error::Argument("image idx has rank 0".into()));
        }
        if lbl_shape.len() != 1 {
            return Err(Error::Argument(format!(
                "label idx must have rank 1, got {}",
                lbl_shape.len()
            )));
        }
        let n = img_shape[0];
        if lbl_shape[0] != n {
            return Err(Error::Argument(format!(
                "{n} images vs {} labels",
                lbl_shape[0]
            )));
        }
        let dim: usize = img_shape[1..].iter().product();
        let inputs = (0..n)
            .map(|i| {
                Tensor::raw(
                    vec![dim],
                    img_payload[i * dim..(i + 1) * dim]
                        .iter()
                        .map(|&b| b as f64 / 255.0)
                        .collect(),
                )
            })
            .collect();
        let labels: Vec<usize> = lbl_payload.iter().map(|&b| b as usize).collect();
        let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
        Dataset::new(inputs, labels, num_classes, Normalization::byte_to_unit())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::len)
    }

    /// Gathers the examples selected by an index slice.
    pub fn select(&self, indices: &[usize]) -> (Vec<Tensor>, Vec<usize>) {
        let xs = indices.iter().map(|&i| self.inputs[i].clone()).collect();
        let ys = indices.iter().map(|&i| self.labels[i]).collect();
        (xs, ys)
    }
}

/// Synthetic dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    TwoGaussians,
    TwoMoons,
}

/// Generator parameters for a synthetic two-class dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub dim: usize,
    pub examples: usize,
    /// Separation between the class means along the first axis
    /// (two-gaussians only).
    #[serde(default)]
    pub margin: f64,
    pub noise: f64,
    pub seed: u64,
}

/// Deterministically generates a two-class dataset. Class means sit at
/// `+-margin/2` on the first axis for the gaussian family; labels alternate
/// so both classes are balanced. Inputs are left unnormalized (identity
/// record).
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.examples < 2 {
        return Err(Error::Argument(format!(
            "synthetic dataset needs >= 2 examples, got {}",
            spec.examples
        )));
    }
    if spec.dim < 1 {
        return Err(Error::Argument("synthetic dim must be >= 1".into()));
    }
    if spec.noise < 0.0 {
        return Err(Error::Argument(format!("negative noise {}", spec.noise)));
    }
    if spec.kind == SyntheticKind::TwoMoons && spec.dim < 2 {
        return Err(Error::Argument("two_moons needs dim >= 2".into()));
    }
    let mut rng = Rng::new(spec.seed);
    let mut inputs = Vec::with_capacity(spec.examples);
    let mut labels = Vec::with_capacity(spec.examples);
    for i in 0..spec.examples {
        let label = i % 2;
        let mut x = vec![0.0; spec.dim];
        match spec.kind {
            SyntheticKind::TwoGaussians => {
                x[0] = if label == 0 {
                    -spec.margin / 2.0
                } else {
                    spec.margin / 2.0
                };
                for v in x.iter_mut() {
                    *v += spec.noise * rng.next_normal();
                }
            }
            SyntheticKind::TwoMoons => {
                let t = std::f64::consts::PI * rng.next_f64();
                if label == 0 {
                    x[0] = t.cos();
                    x[1] = t.sin();
                } else {
                    x[0] = 1.0 - t.cos();
                    x[1] = 0.5 - t.sin();
                }
                for v in x.iter_mut() {
                    *v += spec.noise * rng.next_normal();
                }
            }
        }
        inputs.push(Tensor::raw(vec![spec.dim], x));
        labels.push(label);
    }
    Dataset::new(inputs, labels, 2, Normalization::identity())
}

/// Seeded per-epoch permutation of the dataset indices, partitioned into
/// `ceil(N / batch_size)` slices; the last slice may be short. Every index
/// appears exactly once per epoch.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be >= 1".into()));
    }
    let n = ds.len();
    let mut indices: Vec<usize> = (0..n).collect();
    // Stream label keeps shuffling independent of any other rng consumer.
    let mut rng = Rng::new(seed).derive_path(&[0x5348_5546_464c, epoch as u64]);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
    Ok(indices.chunks(batch_size).map(|c| c.to_vec()).collect())
}
