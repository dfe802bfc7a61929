//! Dense n-dimensional tensors.
//!
//! The canonical image layout is `[batch, channels, height, width]`, row-major.
//! Two scalar precisions are supported through the [`Scalar`] trait: `f32` for
//! training and inference, `f64` for oracle tests and gradient checking.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type usable by every kernel in the crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Convert from an exactly representable `f64` constant.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    /// Widen to `f64` (lossless for both supported precisions).
    fn wide(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense tensor: a shape and contiguous row-major data.
///
/// Rank 0 (empty shape, one element) is the scalar produced by full
/// reductions. All extents must be at least 1 and the data length must equal
/// the product of the extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n = numel_of(&shape);
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        assert!(shape.iter().all(|&e| e >= 1), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel_of(shape)],
            requires_grad: false,
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark the tensor as a differentiation leaf when placed on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn detached(mut self) -> Self {
        self.requires_grad = false;
        self
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on {:?}", self.shape);
        self.data[0]
    }

    /// Extents of a rank-4 tensor as `(n, c, h, w)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::invalid(op, format!("expected rank-4 tensor, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Row-major element accessor for rank-4 tensors (unchecked beyond debug).
    #[inline]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (ch, h, w) = (self.shape[1], self.shape[2], self.shape[3]);
        debug_assert!(n < self.shape[0] && c < ch && y < h && x < w);
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    /// Convert between scalar precisions.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.wide())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Debug-mode guard: forward kernels must not produce NaN/Inf from finite
    /// inputs.
    #[inline]
    pub fn debug_assert_finite(&self, op: &str) {
        if cfg!(debug_assertions) {
            for (i, v) in self.data.iter().enumerate() {
                assert!(v.is_finite(), "{op}: non-finite value {v} at flat index {i}");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// DLT1 binary tensor format: magic "DLT1", u32 rank, u32 extents
// (little-endian), then raw little-endian f32 scalars.
// ---------------------------------------------------------------------------

pub const DLT1_MAGIC: &[u8; 4] = b"DLT1";

const MAX_RANK: u32 = 16;

/// Byte reader that tracks its offset so format errors can name it.
pub(crate) struct Cursor<R: Read> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> Cursor<R> {
    pub fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    pub fn read_exact(&mut self, buf: &mut [u8], path: &Path, format: &'static str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    path: path.to_path_buf(),
                    format,
                    offset: at,
                    what: "truncated file".into(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn read_u16(&mut self, path: &Path, format: &'static str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, path, format)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn read_u32(&mut self, path: &Path, format: &'static str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, path, format)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&mut self, path: &Path, format: &'static str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, path, format)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Read one `rank, extents, f32 data` tensor body. Shared by DLT1/DLW1/DLO1.
pub(crate) fn read_tensor_body<T: Scalar, R: Read>(
    cur: &mut Cursor<R>,
    path: &Path,
    format: &'static str,
) -> Result<Tensor<T>> {
    let rank_at = cur.offset;
    let rank = cur.read_u32(path, format)?;
    if rank > MAX_RANK {
        return Err(Error::Format {
            path: path.to_path_buf(),
            format,
            offset: rank_at,
            what: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let at = cur.offset;
        let e = cur.read_u32(path, format)?;
        if e == 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                format,
                offset: at,
                what: "zero extent".into(),
            });
        }
        shape.push(e as usize);
    }
    let numel: usize = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        format,
        offset: rank_at,
        what: "element count overflow".into(),
    })?;
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        cur.read_exact(&mut buf, path, format)?;
        data.push(T::of(f32::from_le_bytes(buf) as f64));
    }
    Tensor::new(shape, data)
}

pub(crate) fn write_tensor_body<T: Scalar, W: Write>(t: &Tensor<T>, out: &mut W) -> std::io::Result<()> {
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        out.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&(v.wide() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Write a tensor in the DLT1 container. Data is stored as little-endian f32
/// regardless of the in-memory precision.
pub fn write_dlt1<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        out.write_all(DLT1_MAGIC)?;
        write_tensor_body(t, &mut out)?;
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_dlt1<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(BufReader::new(file));
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic, path, "DLT1")?;
    if &magic != DLT1_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            format: "DLT1",
            offset: 0,
            what: format!("bad magic {magic:?}"),
        });
    }
    read_tensor_body(&mut cur, path, "DLT1")
}
