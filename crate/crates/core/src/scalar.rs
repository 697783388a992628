//! Scalar bounds shared by every kernel.
//!
//! Verification paths run in `f64`; `f32` is available for throughput runs
//! where the 1e-12 equivalence bounds do not apply.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by the tensor kernels and the wire format.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Encoded size in bytes on the simulated wire.
    const BYTES: usize;
    /// Short name used in reports (`"f32"` / `"f64"`).
    const NAME: &'static str;

    /// Appends the little-endian encoding of `self`.
    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes from exactly `Self::BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }

    /// Conversion from a count.
    #[inline]
    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count fits in scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(buf)
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Scalar>(v: T) -> T {
        let mut out = Vec::new();
        v.write_le(&mut out);
        assert_eq!(out.len(), T::BYTES);
        T::read_le(&out)
    }

    #[test]
    fn le_roundtrip_is_bit_exact() {
        for v in [0.0f64, -1.5, 1e-300, f64::MAX, std::f64::consts::PI] {
            assert_eq!(roundtrip(v).to_bits(), v.to_bits());
        }
        for v in [0.0f32, -1.5, 1e-30, f32::MAX] {
            assert_eq!(roundtrip(v).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn le_layout() {
        let mut out = Vec::new();
        1.0f32.write_le(&mut out);
        assert_eq!(out, vec![0x00, 0x00, 0x80, 0x3f]);
    }
}
