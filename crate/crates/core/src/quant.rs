//! Block-wise affine integer quantization for frozen weights.
//!
//! The flattened matrix is cut into contiguous blocks of `block_size` values.
//! Each block stores `offset = min` and `scale = (max − min) / (2^bits − 1)`
//! and every value becomes `round((w − offset) / scale)`. Reconstruction is
//! `code · scale + offset`, which is off by at most `scale / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bits {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Bits {
    pub fn from_count(bits: u32) -> Result<Self> {
        match bits {
            4 => Ok(Bits::Four),
            8 => Ok(Bits::Eight),
            other => Err(Error::Config(format!("unsupported bit width {other}"))),
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Bits::Four => 4,
            Bits::Eight => 8,
        }
    }

    pub fn levels(self) -> u32 {
        (1 << self.count()) - 1
    }

    /// Checkpoint dtype tag.
    pub fn tag(self) -> &'static str {
        match self {
            Bits::Four => "q4",
            Bits::Eight => "q8",
        }
    }

    fn packed_len(self, n: usize) -> usize {
        match self {
            Bits::Four => n.div_ceil(2),
            Bits::Eight => n,
        }
    }
}

/// A frozen weight held as packed integer codes plus per-block affine
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    shape: Vec<usize>,
    bits: Bits,
    block_size: usize,
    /// Two codes per byte (low nibble first) at 4 bits, one per byte at 8.
    codes: Vec<u8>,
    scales: Vec<f64>,
    offsets: Vec<f64>,
}

impl QuantizedMatrix {
    pub fn quantize<T: Element>(w: &Tensor<T>, bits: Bits, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Config("block_size must be positive".into()));
        }
        w.ensure_finite("quantize")?;
        let values: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
        let levels = f64::from(bits.levels());
        let n_blocks = values.len().div_ceil(block_size);
        let mut scales = Vec::with_capacity(n_blocks);
        let mut offsets = Vec::with_capacity(n_blocks);
        let mut raw = Vec::with_capacity(values.len());
        for block in values.chunks(block_size) {
            let min = block.iter().copied().fold(f64::INFINITY, f64::min);
            let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let scale = if max > min {
                canonical_scale((max - min) / levels, min, levels)
            } else {
                1.0
            };
            scales.push(scale);
            offsets.push(min);
            raw.extend(
                block
                    .iter()
                    .map(|&v| ((v - min) / scale).round().clamp(0.0, levels) as u8),
            );
        }
        Ok(Self {
            shape: w.shape().to_vec(),
            bits,
            block_size,
            codes: pack(&raw, bits),
            scales,
            offsets,
        })
    }

    /// Reassembles a matrix from stored parts, checking that they agree.
    pub fn from_parts(
        shape: Vec<usize>,
        bits: Bits,
        block_size: usize,
        codes: Vec<u8>,
        scales: Vec<f64>,
        offsets: Vec<f64>,
    ) -> Result<Self> {
        let q = Self {
            shape,
            bits,
            block_size,
            codes,
            scales,
            offsets,
        };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<()> {
        let n = self.numel();
        if self.block_size == 0 {
            return Err(Error::Data("block_size is zero".into()));
        }
        let n_blocks = n.div_ceil(self.block_size);
        if self.codes.len() != self.bits.packed_len(n) {
            return Err(Error::Data(format!(
                "{} code bytes for {n} values at {} bits",
                self.codes.len(),
                self.bits.count()
            )));
        }
        if self.scales.len() != n_blocks || self.offsets.len() != n_blocks {
            return Err(Error::Data(format!(
                "{} scales / {} offsets for {n_blocks} blocks",
                self.scales.len(),
                self.offsets.len()
            )));
        }
        if self.bits == Bits::Four && n % 2 == 1 && self.codes[n / 2] >> 4 != 0 {
            return Err(Error::Data("padding nibble is not zero".into()));
        }
        if self
            .scales
            .iter()
            .chain(&self.offsets)
            .any(|v| !v.is_finite())
            || self.scales.iter().any(|&s| s <= 0.0)
        {
            return Err(Error::Data("non-finite or non-positive block parameters".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> Bits {
        self.bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn n_blocks(&self) -> usize {
        self.scales.len()
    }

    /// Unpacked code of element `i`.
    pub fn code(&self, i: usize) -> u8 {
        match self.bits {
            Bits::Eight => self.codes[i],
            Bits::Four => {
                let byte = self.codes[i / 2];
                if i % 2 == 0 {
                    byte & 0x0F
                } else {
                    byte >> 4
                }
            }
        }
    }

    pub fn block_scale(&self, block: usize) -> f64 {
        self.scales[block]
    }

    /// Bytes needed for codes plus per-block scale and offset.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + 16 * self.n_blocks()
    }

    pub fn dequantize_f64(&self) -> Result<Vec<f64>> {
        self.validate()?;
        Ok((0..self.numel())
            .map(|i| {
                let b = i / self.block_size;
                f64::from(self.code(i)) * self.scales[b] + self.offsets[b]
            })
            .collect())
    }

    pub fn dequantize<T: Element>(&self) -> Result<Tensor<T>> {
        let data = self
            .dequantize_f64()?
            .into_iter()
            .map(T::from_f64_lossy)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Picks a scale within a few ulps of `scale` that survives a
/// dequantize/quantize cycle unchanged: the top code reconstructs to
/// `levels * scale + min`, and the range recomputed from it must give back
/// the same scale.
fn canonical_scale(scale: f64, min: f64, levels: f64) -> f64 {
    let roundtrip = |s: f64| ((levels * s + min) - min) / levels;
    let (mut up, mut down) = (scale, scale);
    for _ in 0..64 {
        if roundtrip(up) == up {
            return up;
        }
        if roundtrip(down) == down && down > 0.0 {
            return down;
        }
        up = up.next_up();
        down = down.next_down();
    }
    scale
}

fn pack(raw: &[u8], bits: Bits) -> Vec<u8> {
    match bits {
        Bits::Eight => raw.to_vec(),
        Bits::Four => raw
            .chunks(2)
            .map(|pair| pair[0] | pair.get(1).map_or(0, |&hi| hi << 4))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_block_is_exact() {
        let w = Tensor::<f64>::full([64], 5.0);
        let q = QuantizedMatrix::quantize(&w, Bits::Four, 64).unwrap();
        assert!((0..64).all(|i| q.code(i) == 0));
        assert_eq!(q.offsets(), &[5.0]);
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.dequantize::<f64>().unwrap(), w);
    }

    #[test]
    fn ramp_zero_to_fifteen_is_exact_at_four_bits() {
        let w = Tensor::<f64>::new([16], (0..16).map(f64::from).collect()).unwrap();
        let q = QuantizedMatrix::quantize(&w, Bits::Four, 16).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!((0..16).map(|i| q.code(i)).collect::<Vec<_>>(), (0..16).collect::<Vec<u8>>());
        assert_eq!(q.dequantize::<f64>().unwrap(), w);
    }

    #[test]
    fn tail_block_keeps_shape() {
        let w = Tensor::<f32>::new([3, 7], (0..21).map(|i| i as f32 * 0.1).collect()).unwrap();
        let q = QuantizedMatrix::quantize(&w, Bits::Four, 8).unwrap();
        assert_eq!(q.n_blocks(), 3);
        assert_eq!(q.codes().len(), 11);
        assert_eq!(q.dequantize::<f32>().unwrap().shape(), &[3, 7]);
    }

    #[test]
    fn non_finite_input() {
        let w = Tensor::<f64>::new([2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            QuantizedMatrix::quantize(&w, Bits::Eight, 64),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn corrupted_parts_are_data_errors() {
        let bad_len = QuantizedMatrix::from_parts(vec![4], Bits::Four, 4, vec![0; 3], vec![1.0], vec![0.0]);
        assert!(matches!(bad_len, Err(Error::Data(_))));
        let bad_pad = QuantizedMatrix::from_parts(vec![3], Bits::Four, 4, vec![0, 0x10], vec![1.0], vec![0.0]);
        assert!(matches!(bad_pad, Err(Error::Data(_))));
    }

    #[test]
    fn four_bit_storage_is_an_eighth_plus_overhead() {
        let w = Tensor::<f32>::zeros([128, 128]);
        let q = QuantizedMatrix::quantize(&w, Bits::Four, 64).unwrap();
        let float_bytes = 128 * 128 * 4;
        assert_eq!(q.codes().len() * 8, float_bytes);
        assert_eq!(q.storage_bytes(), float_bytes / 8 + 256 * 16);
    }

    fn matrix() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 1..300)
    }

    proptest! {
        #[test]
        fn reconstruction_within_half_scale(values in matrix(), block in 1usize..80) {
            let w = Tensor::new([values.len()], values.clone()).unwrap();
            for bits in [Bits::Four, Bits::Eight] {
                let q = QuantizedMatrix::quantize(&w, bits, block).unwrap();
                let back = q.dequantize_f64().unwrap();
                for (i, (&orig, &rec)) in values.iter().zip(&back).enumerate() {
                    let s = q.block_scale(i / block);
                    prop_assert!((orig - rec).abs() <= s / 2.0 + 1e-12);
                }
            }
        }

        #[test]
        fn eight_bits_never_worse_blockwise(values in matrix(), block in 1usize..80) {
            let w = Tensor::new([values.len()], values.clone()).unwrap();
            let q4 = QuantizedMatrix::quantize(&w, Bits::Four, block).unwrap().dequantize_f64().unwrap();
            let q8 = QuantizedMatrix::quantize(&w, Bits::Eight, block).unwrap().dequantize_f64().unwrap();
            for (b, chunk) in values.chunks(block).enumerate() {
                let err = |rec: &[f64]| chunk.iter().enumerate()
                    .map(|(j, &v)| (v - rec[b * block + j]).abs()).fold(0.0, f64::max);
                prop_assert!(err(&q8) <= err(&q4) + 1e-12);
            }
        }

        #[test]
        fn requantizing_the_lattice_is_a_fixed_point(values in matrix(), block in 1usize..80) {
            let w = Tensor::new([values.len()], values).unwrap();
            for bits in [Bits::Four, Bits::Eight] {
                let q = QuantizedMatrix::quantize(&w, bits, block).unwrap();
                let again = QuantizedMatrix::quantize(&q.dequantize::<f64>().unwrap(), bits, block).unwrap();
                prop_assert_eq!(&again, &q);
            }
        }
    }
}
