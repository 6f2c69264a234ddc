//! Image tiling: grid geometry, padding, patch extraction and the
//! without-replacement patch sampler used by the inner iterations.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Single image, `height × width × channels`, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::dim(
                "image",
                format!(
                    "{height}x{width}x{channels} image needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }
}

/// Stacks images into an NCHW tensor. All images must share one shape.
pub fn images_to_nchw<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::dim(
                "images_to_nchw",
                format!(
                    "image {}x{}x{} differs from batch shape {h}x{w}x{c}",
                    img.height, img.width, img.channels
                ),
            ));
        }
        for ch in 0..c {
            data.extend(img.data.iter().skip(ch).step_by(c).map(|&v| T::from_f32(v).unwrap()));
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Tiling of an `height × width` image into `rows × cols` patches of side
/// `patch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "degenerate grid {height}x{width} with patch {patch}"
            )));
        }
        if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::dim(
                "grid",
                format!("{height}x{width} is not divisible by patch size {patch}; pad first"),
            ));
        }
        Ok(Self {
            height,
            width,
            patch,
            rows: height / patch,
            cols: width / patch,
        })
    }

    pub fn for_image(image: &Image, patch: usize) -> Result<Self> {
        Self::new(image.height, image.width, patch)
    }

    /// Grid a padded image of this raw size would have.
    pub fn padded(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Self::new(height.div_ceil(patch) * patch, width.div_ceil(patch) * patch, patch)
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell_position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }
}

/// Number of cells selected by a fraction of the grid, rounded up and at
/// least one. A tiny tolerance keeps e.g. `0.7 * 10` from rounding to 8.
pub fn cells_for_fraction(fraction: f64, cells: usize) -> usize {
    ((fraction * cells as f64 - 1e-9).ceil() as usize).clamp(1, cells.max(1))
}

/// Pads the bottom and right edges with `fill` until both spatial sizes are
/// multiples of `patch`. Never resizes.
pub fn pad_to_grid(image: &Image, patch: usize, fill: f32) -> Image {
    let h = image.height.div_ceil(patch) * patch;
    let w = image.width.div_ceil(patch) * patch;
    if (h, w) == (image.height, image.width) {
        return image.clone();
    }
    let c = image.channels;
    let mut out = Image::filled(h, w, c, fill);
    for r in 0..image.height {
        out.data[r * w * c..(r * w + image.width) * c]
            .copy_from_slice(&image.data[r * image.width * c..(r + 1) * image.width * c]);
    }
    out
}

fn check_cell(grid: &GridSpec, a: usize, b: usize) -> Result<()> {
    if a >= grid.rows || b >= grid.cols {
        return Err(Error::Index(format!(
            "patch ({a}, {b}) outside {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    Ok(())
}

/// Copy of patch `(a, b)` as a `[p, p, C]` tensor.
pub fn patch_extractor(image: &Image, a: usize, b: usize, patch: usize) -> Result<Tensor<f32>> {
    let grid = GridSpec::for_image(image, patch)?;
    check_cell(&grid, a, b)?;
    let c = image.channels;
    let mut data = Vec::with_capacity(patch * patch * c);
    for r in a * patch..(a + 1) * patch {
        let start = (r * image.width + b * patch) * c;
        data.extend_from_slice(&image.data[start..start + patch * c]);
    }
    Tensor::new(vec![patch, patch, c], data)
}

/// Patches at `positions` stacked as an NCHW `[k, C, p, p]` tensor.
pub fn patches_nchw<T: Scalar>(image: &Image, positions: &[(usize, usize)], patch: usize) -> Result<Tensor<T>> {
    let grid = GridSpec::for_image(image, patch)?;
    let c = image.channels;
    let mut data = Vec::with_capacity(positions.len() * c * patch * patch);
    for &(a, b) in positions {
        check_cell(&grid, a, b)?;
        for ch in 0..c {
            for r in a * patch..(a + 1) * patch {
                let row = &image.data[(r * image.width + b * patch) * c..][..patch * c];
                data.extend(row.iter().skip(ch).step_by(c).map(|&v| T::from_f32(v).unwrap()));
            }
        }
    }
    Tensor::new(vec![positions.len(), c, patch, patch], data)
}

/// Patches drawn for one image in one inner iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub patches: Vec<Tensor<f32>>,
    pub positions: Vec<(usize, usize)>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `[k, C, p, p]` view of the patches.
    pub fn to_nchw<T: Scalar>(&self) -> Result<Tensor<T>> {
        let first = self
            .patches
            .first()
            .ok_or_else(|| Error::Contract("empty patch batch".into()))?;
        let (p, c) = (first.shape()[0], first.shape()[2]);
        let mut data = Vec::with_capacity(self.len() * p * p * c);
        for patch in &self.patches {
            for ch in 0..c {
                data.extend(
                    patch
                        .data()
                        .iter()
                        .skip(ch)
                        .step_by(c)
                        .map(|&v| T::from_f32(v).unwrap()),
                );
            }
        }
        Tensor::new(vec![self.len(), c, p, p], data)
    }
}

/// Per-image sampling state: a permutation of all grid cells consumed
/// front to back, capped at `⌈μ·m·n⌉` cells per outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    order: Vec<usize>,
    cursor: usize,
    budget: usize,
    max_coverage: f64,
}

impl SamplerState {
    pub fn new(grid: &GridSpec, max_coverage: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(max_coverage > 0.0 && max_coverage <= 1.0) {
            return Err(Error::Config(format!(
                "max coverage must lie in (0, 1], got {max_coverage}"
            )));
        }
        let mut state = Self {
            order: (0..grid.cells()).collect(),
            cursor: 0,
            budget: cells_for_fraction(max_coverage, grid.cells()),
            max_coverage,
        };
        state.reset(rng);
        Ok(state)
    }

    /// Draws a fresh permutation for a new outer iteration.
    pub fn reset(&mut self, rng: &mut impl Rng) {
        self.order.sort_unstable();
        self.order.shuffle(rng);
        self.cursor = 0;
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn max_coverage(&self) -> f64 {
        self.max_coverage
    }

    pub fn emitted(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.cursor
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.budget
    }

    /// Next `min(k, remaining)` cell indices, or `None` once exhausted.
    pub fn next_cells(&mut self, k: usize) -> Option<&[usize]> {
        if self.is_exhausted() || k == 0 {
            return None;
        }
        let take = k.min(self.remaining());
        let start = self.cursor;
        self.cursor += take;
        Some(&self.order[start..self.cursor])
    }
}

/// Draws the next patches for `image`; `None` signals an exhausted sampler.
pub fn sample_patches(image: &Image, patch: usize, k: usize, state: &mut SamplerState) -> Result<Option<PatchBatch>> {
    let grid = GridSpec::for_image(image, patch)?;
    if state.order.len() != grid.cells() {
        return Err(Error::Contract(format!(
            "sampler built for {} cells used on a {}-cell grid",
            state.order.len(),
            grid.cells()
        )));
    }
    let Some(cells) = state.next_cells(k) else {
        return Ok(None);
    };
    let positions: Vec<(usize, usize)> = cells.iter().map(|&i| grid.cell_position(i)).collect();
    let patches = positions
        .iter()
        .map(|&(a, b)| patch_extractor(image, a, b, patch))
        .collect::<Result<_>>()?;
    Ok(Some(PatchBatch { patches, positions }))
}
