//! Dense row-major tensors of 64-bit floats.
//!
//! `Tensor` is the universal numeric value of the crate: immutable once
//! built, cheap to clone (the buffer is shared behind an `Arc`), and safe to
//! hand across threads. Rank 0 is allowed and represents a scalar.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Result, SibError};

pub const SIBT_MAGIC: &[u8; 4] = b"SIBT";

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl Tensor {
    /// Builds a tensor from user-facing input, rejecting shape/length
    /// mismatches and non-finite elements.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(SibError::shape(
                "tensor.new",
                format!("zero-sized dimension in shape {shape:?}"),
            ));
        }
        if data.len() != numel {
            return Err(SibError::shape(
                "tensor.new",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(SibError::domain(
                "tensor.new",
                format!("non-finite element {} at flat index {bad}", data[bad]),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Internal constructor for op results; skips the finiteness scan.
    pub(crate) fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(SibError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of same-shape tensors (no broadcasting).
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(SibError::shape(
                "tensor.zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor::from_vec(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Materializes this tensor broadcast up to `shape` (numpy rules,
    /// trailing-axis alignment).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if !broadcast_compatible(&self.shape, shape) {
            return Err(SibError::shape(
                "broadcast_to",
                format!("{:?} does not broadcast to {shape:?}", self.shape),
            ));
        }
        let out_numel: usize = shape.iter().product();
        let mut out = vec![0.0; out_numel];
        // Effective source strides aligned to the target rank: size-1 and
        // missing leading axes contribute stride 0.
        let offset = shape.len() - self.shape.len();
        let src_strides = self.strides();
        let mut eff = vec![0usize; shape.len()];
        for (i, &d) in self.shape.iter().enumerate() {
            eff[offset + i] = if d == 1 { 0 } else { src_strides[i] };
        }
        let out_strides = strides_of(shape);
        let mut idx = vec![0usize; shape.len()];
        for (flat, slot) in out.iter_mut().enumerate() {
            let mut rem = flat;
            let mut src = 0usize;
            for (k, &os) in out_strides.iter().enumerate() {
                idx[k] = rem / os;
                rem %= os;
                src += idx[k] * eff[k];
            }
            *slot = self.data[src];
        }
        Ok(Tensor::from_vec(shape, out))
    }

    // -- SIBT flat binary format -------------------------------------------
    //
    // magic "SIBT" | u32 LE rank | rank x u64 LE dims | numel x f64 LE

    pub fn write_sibt(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(SIBT_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one SIBT block. `base_offset` is the stream position of the
    /// block start, used to report absolute byte offsets on corruption.
    pub fn read_sibt(r: &mut impl Read, base_offset: u64) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        read_exact_at(r, &mut magic, base_offset, "SIBT magic")?;
        if &magic != SIBT_MAGIC {
            return Err(SibError::Parse {
                offset: base_offset,
                detail: format!("bad magic {magic:?}, expected \"SIBT\""),
            });
        }
        let mut rank_buf = [0u8; 4];
        read_exact_at(r, &mut rank_buf, base_offset + 4, "tensor rank")?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        if rank > 8 {
            return Err(SibError::Parse {
                offset: base_offset + 4,
                detail: format!("implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        let mut pos = base_offset + 8;
        for _ in 0..rank {
            let mut dim_buf = [0u8; 8];
            read_exact_at(r, &mut dim_buf, pos, "tensor dim")?;
            shape.push(u64::from_le_bytes(dim_buf) as usize);
            pos += 8;
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut v_buf = [0u8; 8];
            read_exact_at(r, &mut v_buf, pos, "tensor payload")?;
            data.push(f64::from_le_bytes(v_buf));
            pos += 8;
        }
        Ok(Tensor::from_vec(&shape, data))
    }

    /// Size in bytes of this tensor's SIBT encoding.
    pub fn sibt_len(&self) -> u64 {
        4 + 4 + 8 * self.rank() as u64 + 8 * self.numel() as u64
    }
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| SibError::Parse {
        offset,
        detail: format!("truncated while reading {what}: {e}"),
    })
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Whether `src` broadcasts to `dst` under numpy trailing-axis rules
/// (each aligned axis must match or be 1 in `src`; `src` rank <= `dst` rank).
pub fn broadcast_compatible(src: &[usize], dst: &[usize]) -> bool {
    if src.len() > dst.len() {
        return false;
    }
    let offset = dst.len() - src.len();
    src.iter()
        .enumerate()
        .all(|(i, &d)| d == dst[offset + i] || d == 1)
}

/// Common broadcast shape of two operands, or an error naming both shapes.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i >= rank - a.len() { a[i - (rank - a.len())] } else { 1 };
        let db = if i >= rank - b.len() { b[i - (rank - b.len())] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(SibError::shape(
                op,
                format!("cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"),
            ));
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch_and_nonfinite() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(&[2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(4.25);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.25);
    }

    #[test]
    fn broadcast_to_expands_rows_and_scalars() {
        let row = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = row.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(b.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let s = Tensor::scalar(7.0);
        let b = s.broadcast_to(&[2, 2]).unwrap();
        assert_eq!(b.data(), &[7.0; 4]);

        assert!(Tensor::zeros(&[2, 3]).broadcast_to(&[2, 4]).is_err());
    }

    #[test]
    fn broadcast_shapes_follows_numpy_rules() {
        assert_eq!(broadcast_shapes("t", &[4, 1, 3], &[2, 3]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shapes("t", &[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shapes("t", &[3], &[2]).is_err());
    }

    #[test]
    fn sibt_round_trip_is_bitwise() {
        let t = Tensor::new(&[2, 3], vec![0.5, -1.25, 3e-7, 1e12, 0.0, -0.0]).unwrap();
        let mut buf = Vec::new();
        t.write_sibt(&mut buf).unwrap();
        assert_eq!(buf.len() as u64, t.sibt_len());
        let back = Tensor::read_sibt(&mut buf.as_slice(), 0).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sibt_truncation_reports_offset() {
        let t = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.write_sibt(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match Tensor::read_sibt(&mut buf.as_slice(), 0) {
            Err(SibError::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn sibt_rejects_bad_magic() {
        let buf = b"NOPE\x00\x00\x00\x00".to_vec();
        assert!(matches!(
            Tensor::read_sibt(&mut buf.as_slice(), 0),
            Err(SibError::Parse { offset: 0, .. })
        ));
    }
}
