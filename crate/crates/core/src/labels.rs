//! Per-pixel class-index maps. Class ids live in `[0, |C|)`; the value
//! 255 marks pixels excluded from losses and metrics.

use crate::error::{Error, Result};

/// Ignore marker for boundary / unlabeled pixels.
pub const IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "label data length {} for {height}x{width}",
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    /// Check every value is a valid class id or the ignore marker.
    pub fn validate(&self, classes: usize) -> Result<()> {
        for &v in &self.data {
            if v != IGNORE && usize::from(v) >= classes {
                return Err(Error::InvalidLabel { label: v, classes });
            }
        }
        Ok(())
    }
}
