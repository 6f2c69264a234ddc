//! The latent grid `Z`: one `s`-wide embedding per patch cell.
//!
//! Stored values are always plain numbers. Cells refreshed during the
//! current inner iteration are additionally recorded as scatters of
//! gradient-tracked rows, so [`ZBlock::read`] yields a tensor whose only
//! gradient paths run through those cells.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::FeatureExtractor;
use crate::patching::{patches_nchw, GridSpec, Image, PatchBatch};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

const DUMP_MAGIC: &[u8; 8] = b"PGDZBLK1";

#[derive(Debug, Clone)]
pub struct ZBlock<T> {
    grid: GridSpec,
    batch: usize,
    width: usize,
    values: Option<Tensor<T>>,
    active: Vec<bool>,
    staleness: Vec<u32>,
    pending: Vec<(Var, Vec<usize>)>,
}

impl<T: Scalar> ZBlock<T> {
    /// Unfilled block for `batch` images.
    pub fn new(batch: usize, grid: GridSpec, width: usize) -> Result<Self> {
        if batch == 0 || width == 0 {
            return Err(Error::Config(format!(
                "latent grid needs batch and width >= 1 (got {batch}, {width})"
            )));
        }
        let cells = batch * grid.cells();
        Ok(Self {
            grid,
            batch,
            width,
            values: None,
            active: vec![false; cells],
            staleness: vec![0; cells],
            pending: Vec::new(),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.grid.rows, self.grid.cols, self.width]
    }

    pub fn is_filled(&self) -> bool {
        self.values.is_some()
    }

    /// `[B, m, n, s]` stored values.
    pub fn values(&self) -> Result<&Tensor<T>> {
        self.values
            .as_ref()
            .ok_or_else(|| Error::State("latent grid read before it was filled".into()))
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Inner iterations since each cell was last written, `[B, m, n]`.
    pub fn staleness(&self) -> &[u32] {
        &self.staleness
    }

    fn row(&self, image: usize, a: usize, b: usize) -> Result<usize> {
        if image >= self.batch || a >= self.grid.rows || b >= self.grid.cols {
            return Err(Error::Index(format!(
                "cell ({image}, {a}, {b}) outside [{}, {}, {}]",
                self.batch, self.grid.rows, self.grid.cols
            )));
        }
        Ok(image * self.grid.cells() + self.grid.cell_index(a, b))
    }

    pub fn cell(&self, image: usize, a: usize, b: usize) -> Result<&[T]> {
        let row = self.row(image, a, b)?;
        Ok(&self.values()?.data()[row * self.width..][..self.width])
    }

    /// Fills every cell with `embed(patches)`, `chunk` patches per call, in
    /// row-major cell order. `embed` maps `[k, C, p, p]` to `[k, s]`.
    pub fn fill_with(
        &mut self,
        images: &[&Image],
        chunk: usize,
        mut embed: impl FnMut(Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<()> {
        if images.len() != self.batch {
            return Err(Error::dim(
                "z_fill",
                format!("{} images for a latent grid of batch {}", images.len(), self.batch),
            ));
        }
        let cells = self.grid.cells();
        let chunk = chunk.max(1);
        let mut data = Vec::with_capacity(self.batch * cells * self.width);
        for image in images {
            let grid = GridSpec::for_image(image, self.grid.patch)?;
            if grid != self.grid {
                return Err(Error::dim(
                    "z_fill",
                    format!(
                        "image {}x{} does not match grid {}x{}",
                        image.height, image.width, self.grid.height, self.grid.width
                    ),
                ));
            }
            for start in (0..cells).step_by(chunk) {
                let positions: Vec<_> = (start..(start + chunk).min(cells))
                    .map(|i| grid.cell_position(i))
                    .collect();
                let out = embed(patches_nchw(image, &positions, grid.patch)?)?;
                if out.shape() != [positions.len(), self.width] {
                    return Err(Error::dim(
                        "z_fill",
                        format!(
                            "embedding {:?} is not [{}, {}] (axis 1 = width)",
                            out.shape(),
                            positions.len(),
                            self.width
                        ),
                    ));
                }
                data.extend_from_slice(out.data());
            }
        }
        self.values = Some(Tensor::new(self.shape().to_vec(), data)?);
        self.active.fill(false);
        self.staleness.fill(0);
        self.pending.clear();
        Ok(())
    }

    /// Fills every cell with `f_θ1` under stop-gradient.
    pub fn fill(
        &mut self,
        images: &[&Image],
        extractor: &FeatureExtractor,
        store: &ParamStore<T>,
        chunk: usize,
    ) -> Result<()> {
        if extractor.embed_dim() != self.width {
            return Err(Error::dim(
                "z_fill",
                format!(
                    "extractor width {} vs latent width {}",
                    extractor.embed_dim(),
                    self.width
                ),
            ));
        }
        self.fill_with(images, chunk, |patches| {
            let mut g = Graph::inference();
            let x = g.constant(patches);
            let y = extractor.embed(&mut g, store, x)?;
            Ok(g.value(y).clone())
        })
    }

    /// Starts an inner iteration: clears the active mask and ages every cell.
    pub fn begin_step(&mut self) {
        self.active.fill(false);
        self.pending.clear();
        for s in &mut self.staleness {
            *s = s.saturating_add(1);
        }
    }

    /// Replaces cells `(image, a, b)` with the rows of `rows` (`[k, s]`,
    /// living in `g`). The stored values take the new numbers; the tracked
    /// rows are spliced in by the next [`ZBlock::read`] on the same graph.
    pub fn scatter(&mut self, g: &Graph<T>, rows: Var, cells: &[(usize, usize, usize)]) -> Result<()> {
        let shape = g.shape(rows);
        if shape != [cells.len(), self.width] {
            return Err(Error::dim(
                "z_update",
                format!(
                    "rows {shape:?} must be [{}, {}] (axis 1 = width)",
                    cells.len(),
                    self.width
                ),
            ));
        }
        let mut idx = Vec::with_capacity(cells.len());
        for &(image, a, b) in cells {
            let r = self.row(image, a, b)?;
            if self.active[r] || idx.contains(&r) {
                return Err(Error::Contract(format!(
                    "cell ({image}, {a}, {b}) updated twice in one inner iteration"
                )));
            }
            idx.push(r);
        }
        let width = self.width;
        let src = g.value(rows).data().to_vec();
        let values = self
            .values
            .as_mut()
            .ok_or_else(|| Error::State("latent grid updated before it was filled".into()))?;
        for (k, &r) in idx.iter().enumerate() {
            values.data_mut()[r * width..][..width].copy_from_slice(&src[k * width..][..width]);
            self.active[r] = true;
            self.staleness[r] = 0;
        }
        self.pending.push((rows, idx));
        Ok(())
    }

    /// Embeds one image's patch batch with `f_θ1` on `g` and scatters it.
    pub fn update(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        extractor: &FeatureExtractor,
        image: usize,
        batch: &PatchBatch,
    ) -> Result<Var> {
        let x = g.constant(batch.to_nchw()?);
        let rows = extractor.embed(g, store, x)?;
        let cells: Vec<_> = batch.positions.iter().map(|&(a, b)| (image, a, b)).collect();
        self.scatter(g, rows, &cells)?;
        Ok(rows)
    }

    /// `[B, m, n, s]` tensor: stored values as a constant, with this
    /// step's tracked rows spliced in.
    pub fn read(&self, g: &mut Graph<T>) -> Result<Var> {
        let all: Vec<usize> = (0..self.batch).collect();
        self.read_images(g, &all)
    }

    /// Like [`ZBlock::read`] but restricted to the listed images, in order.
    pub fn read_images(&self, g: &mut Graph<T>, images: &[usize]) -> Result<Var> {
        let values = self.values()?;
        let cells = self.grid.cells();
        let w = self.width;
        let mut local = vec![usize::MAX; self.batch];
        let mut data = Vec::with_capacity(images.len() * cells * w);
        for (pos, &img) in images.iter().enumerate() {
            if img >= self.batch {
                return Err(Error::Index(format!("image {img} outside batch of {}", self.batch)));
            }
            local[img] = pos;
            data.extend_from_slice(&values.data()[img * cells * w..][..cells * w]);
        }
        let mut z = g.constant(Tensor::new(vec![images.len() * cells, w], data)?);
        for (rows, idx) in &self.pending {
            let mut keep = Vec::new();
            let mut targets = Vec::new();
            for (k, &r) in idx.iter().enumerate() {
                let img = r / cells;
                if local[img] != usize::MAX {
                    keep.push(k);
                    targets.push(local[img] * cells + r % cells);
                }
            }
            if keep.is_empty() {
                continue;
            }
            if keep.len() != idx.len() {
                return Err(Error::Contract(
                    "a scatter spans images outside the requested read; read every image it touched".into(),
                ));
            }
            z = g.scatter_rows(z, *rows, &targets)?;
        }
        g.reshape(z, &[images.len(), self.grid.rows, self.grid.cols, w])
    }

    /// Writes the stored values as a little-endian binary tensor with a
    /// short header (magic, dtype, four u64 dims).
    pub fn dump(&self, path: &Path) -> Result<()> {
        let values = self.values()?;
        let mut out = Vec::with_capacity(48 + values.len() * T::DTYPE.size_bytes() as usize);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&(T::DTYPE.size_bytes()).to_le_bytes());
        for d in self.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in values.data() {
            v.write_le(&mut out);
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Builds and fills a latent grid for `images` (already padded to the grid).
pub fn z_fill<T: Scalar>(
    images: &[&Image],
    extractor: &FeatureExtractor,
    store: &ParamStore<T>,
    chunk: usize,
) -> Result<ZBlock<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("z_fill needs at least one image".into()))?;
    let grid = GridSpec::for_image(first, extractor.patch_size())?;
    let mut z = ZBlock::new(images.len(), grid, extractor.embed_dim())?;
    z.fill(images, extractor, store, chunk)?;
    Ok(z)
}
