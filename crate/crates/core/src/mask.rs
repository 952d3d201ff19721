use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Row-major binary grid with entries in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::data(format!(
                "mask of {height}x{width} needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::data(format!("mask entry {bad} is not binary")));
        }
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x) as u8);
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Indices of set cells in row-major order.
    pub fn on_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    /// `(Σx, Σy) / area` over set cells, using cell centres.
    pub fn center(&self) -> Option<(f64, f64)> {
        let mut sx = 0f64;
        let mut sy = 0f64;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Intersection and union pixel counts.
    pub fn overlap(&self, other: &BinaryMask) -> Result<(u64, u64)> {
        if self.dims() != other.dims() {
            return Err(Error::data(format!(
                "mask sizes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b) as u64;
            union += (a | b) as u64;
        }
        Ok((inter, union))
    }

    pub fn union_with(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims() != other.dims() {
            return Err(Error::data("mask sizes differ in union"));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([self.height, self.width], |i| self.bits[i] as f32)
    }

    /// Run lengths over the row-major cells, alternating background and
    /// foreground and starting with background (possibly a zero run).
    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(height: usize, width: usize, counts: &[u32]) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        for (i, &c) in counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
        }
        if bits.len() != height * width {
            return Err(Error::data(format!(
                "rle covers {} cells, mask has {}",
                bits.len(),
                height * width
            )));
        }
        Ok(Self { height, width, bits })
    }

    /// Nested 0/1 rows.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.bits.chunks(self.width.max(1)).map(<[u8]>::to_vec).collect()
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::data("ragged mask rows"));
        }
        Self::new(h, w, rows.concat())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_starts_with_background() {
        let m = BinaryMask::new(1, 5, vec![1, 1, 0, 1, 0]).unwrap();
        assert_eq!(m.to_rle(), vec![0, 2, 1, 1, 1]);
        assert_eq!(BinaryMask::from_rle(1, 5, &m.to_rle()).unwrap(), m);
        assert!(BinaryMask::from_rle(1, 4, &m.to_rle()).is_err());
    }

    #[test]
    fn rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn overlap_counts() {
        let a = BinaryMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let b = BinaryMask::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(a.overlap(&b).unwrap(), (1, 3));
    }
}
