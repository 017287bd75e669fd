//! Single-channel depth maps with validity masks.

use crate::error::{Error, Result};

/// Nonnegative depth values on a pixel grid, with a per-pixel validity mask.
/// Values are normalized to [0, 1] at the dataset boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || valid.len() != height * width {
            return Err(Error::shape(format!(
                "depth map {height}x{width} implies {} pixels, got {} values / {} mask entries",
                height * width,
                values.len(),
                valid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("depth map contains non-finite values"));
        }
        Ok(DepthMap {
            height,
            width,
            values,
            valid,
        })
    }

    /// All pixels valid.
    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let valid = vec![true; values.len()];
        DepthMap::new(height, width, values, valid)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Flat indices of valid pixels, in row-major order.
    pub fn valid_indices(&self) -> Vec<usize> {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
            .collect()
    }

    pub fn same_shape(&self, other: &DepthMap, what: &str) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(format!(
                "{what}: depth map shapes differ, {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_lengths() {
        assert!(DepthMap::new(2, 2, vec![0.0; 3], vec![true; 4]).is_err());
        assert!(DepthMap::new(2, 2, vec![0.0; 4], vec![true; 3]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(DepthMap::from_values(1, 2, vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn valid_indices_respect_mask() {
        let d = DepthMap::new(2, 2, vec![0.1; 4], vec![true, false, true, false]).unwrap();
        assert_eq!(d.valid_indices(), vec![0, 2]);
        assert_eq!(d.valid_count(), 2);
    }
}
