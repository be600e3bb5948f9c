//! Dense row-major 2-D fields: images, probability maps and binary masks.

use crate::error::{Error, Result};

/// A row-major `height × width` field of values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Grayscale intensities, normalized to `[0, 1]`.
pub type Image = Grid<f32>;
/// Per-pixel foreground probabilities in `[0, 1]`.
pub type ProbMap = Grid<f32>;
/// Binary segmentation mask with values in `{0, 1}`.
pub type BinMask = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    pub(crate) fn ensure_same_dims<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

impl BinMask {
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Pixelwise union of two masks of equal shape.
    pub fn union(&self, other: &BinMask) -> Result<BinMask> {
        self.ensure_same_dims(other, "mask union")?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| u8::from(a != 0 || b != 0))
                .collect(),
        })
    }
}

impl ProbMap {
    /// Foreground where the probability meets `threshold` (`p >= threshold`).
    pub fn threshold(&self, threshold: f64) -> BinMask {
        self.map(|p| u8::from(f64::from(p) >= threshold))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Grid::from_vec(2, 3, vec![0u8; 5]).is_err());
        let g = Grid::from_vec(2, 3, (0..6u8).collect()).unwrap();
        assert_eq!(g.get(1, 2), 5);
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = Grid::from_vec(1, 3, vec![0.49f32, 0.5, 0.51]).unwrap();
        assert_eq!(p.threshold(0.5).data(), &[0, 1, 1]);
    }

    #[test]
    fn union_rejects_mismatched_shapes() {
        let a = BinMask::filled(2, 2, 0);
        let b = BinMask::filled(2, 3, 0);
        assert!(a.union(&b).is_err());
    }
}
