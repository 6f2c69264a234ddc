//! Synthetic large-image data: digit banks (IDX files or procedural
//! glyphs), the UltraMNIST-style generator and the on-disk dataset format.

mod glyphs;
mod idx;
mod io;
mod ultra;

pub use glyphs::procedural_digits;
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use io::{load_dataset, save_dataset, INDEX_FILE, RECORD_DIR};
pub use ultra::{generate_ultramnist, PlacedDigit, Provenance, UltraConfig, UltraSample};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankSource {
    IdxFiles,
    Procedural,
}

/// Grayscale digit exemplars in `[0, 1]`, all `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitBank {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
    pub source: BankSource,
    by_class: Vec<Vec<usize>>,
}

impl DigitBank {
    pub fn new(
        height: usize,
        width: usize,
        images: Vec<Vec<f32>>,
        labels: Vec<u8>,
        source: BankSource,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} digit images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let mut by_class = vec![Vec::new(); 10];
        for (i, (img, &l)) in images.iter().zip(&labels).enumerate() {
            if l > 9 {
                return Err(Error::Validation(format!(
                    "digit label {l} at index {i} is not in 0..=9"
                )));
            }
            if img.len() != height * width {
                return Err(Error::Validation(format!(
                    "digit {i} has {} pixels, expected {}",
                    img.len(),
                    height * width
                )));
            }
            by_class[l as usize].push(i);
        }
        Ok(Self {
            height,
            width,
            images,
            labels,
            source,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Exemplar indices of `class`.
    pub fn class_members(&self, class: u8) -> &[usize] {
        &self.by_class[class as usize]
    }

    /// Errors unless every class 0..=9 has at least one exemplar.
    pub fn check_complete(&self) -> Result<()> {
        match self.by_class.iter().position(Vec::is_empty) {
            Some(c) => Err(Error::Validation(format!("digit bank has no exemplar of class {c}"))),
            None => Ok(()),
        }
    }
}
