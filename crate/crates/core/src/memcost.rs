//! Analytic activation-memory model.
//!
//! Every figure is shape × dtype width. A layer retains its input for the
//! backward pass; parameters, gradient buffers and optimizer moments are
//! fixed costs. Allocator overhead and workspace buffers are ignored.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::model::{CompositeModel, FeatureExtractor, HeadNet};
use crate::patching::GridSpec;
use crate::tensor::{DType, OptimizerKind};

/// Element counts of one layer's input and output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerFootprint {
    pub name: String,
    pub input_elems: u64,
    pub output_elems: u64,
}

impl LayerFootprint {
    pub fn new(name: impl Into<String>, input_elems: u64, output_elems: u64) -> Self {
        Self {
            name: name.into(),
            input_elems,
            output_elems,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Whole-image GD step.
    Step,
    /// PatchGD inner iteration, backbone on the sampled patches.
    Patches,
    /// PatchGD inner iteration, head over the full latent grid.
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerBytes {
    pub name: String,
    pub phase: Phase,
    pub forward_bytes: u64,
    pub retained_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub mode: String,
    pub height: usize,
    pub width: usize,
    pub batch: u64,
    pub dtype: DType,
    pub patch_size: Option<usize>,
    pub patches_per_step: Option<usize>,
    pub layers: Vec<LayerBytes>,
    /// Activations retained for backward during one training step.
    pub activation_bytes: u64,
    pub patch_activation_bytes: u64,
    pub head_activation_bytes: u64,
    /// Transient peak while filling the latent grid without gradients.
    pub fill_bytes: u64,
    pub param_bytes: u64,
    pub gradient_bytes: u64,
    pub optimizer_bytes: u64,
    pub z_bytes: u64,
    pub peak_bytes: u64,
}

impl MemoryReport {
    pub fn fixed_bytes(&self) -> u64 {
        self.param_bytes + self.gradient_bytes + self.optimizer_bytes
    }

    /// `(component, bytes)` pairs in display order.
    pub fn components(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("activations", self.activation_bytes),
            ("patch_activations", self.patch_activation_bytes),
            ("head_activations", self.head_activation_bytes),
            ("fill_transient", self.fill_bytes),
            ("parameters", self.param_bytes),
            ("gradients", self.gradient_bytes),
            ("optimizer_state", self.optimizer_bytes),
            ("z_block", self.z_bytes),
            ("peak", self.peak_bytes),
        ]
    }
}

fn fixed(params: usize, dtype: DType, optimizer: OptimizerKind) -> (u64, u64, u64) {
    let p = params as u64 * dtype.size_bytes();
    let moments = match optimizer {
        OptimizerKind::Adam => 2,
        OptimizerKind::Sgd => 0,
    };
    (p, p, moments * p)
}

fn to_bytes(layers: &[LayerFootprint], phase: Phase, dtype: DType) -> Vec<LayerBytes> {
    layers
        .iter()
        .map(|l| LayerBytes {
            name: l.name.clone(),
            phase,
            forward_bytes: l.output_elems * dtype.size_bytes(),
            retained_bytes: l.input_elems * dtype.size_bytes(),
        })
        .collect()
}

/// Anything with a whole-image activation profile.
pub trait Profiled {
    fn profile(&self, batch: u64, height: usize, width: usize) -> Result<Vec<LayerFootprint>>;
    fn param_count(&self) -> usize;
    fn label(&self) -> &'static str;
}

impl Profiled for FeatureExtractor {
    fn profile(&self, batch: u64, height: usize, width: usize) -> Result<Vec<LayerFootprint>> {
        FeatureExtractor::profile(self, batch, height, width)
    }

    fn param_count(&self) -> usize {
        self.num_params()
    }

    fn label(&self) -> &'static str {
        "backbone"
    }
}

impl Profiled for CompositeModel {
    fn profile(&self, batch: u64, height: usize, width: usize) -> Result<Vec<LayerFootprint>> {
        CompositeModel::profile(self, batch, height, width)
    }

    fn param_count(&self) -> usize {
        self.num_params()
    }

    fn label(&self) -> &'static str {
        match self {
            CompositeModel::Gd { .. } => "gd",
            CompositeModel::GdExtended { .. } => "gd_extended",
            CompositeModel::Patchwise { .. } => "patchwise",
        }
    }
}

/// Whole-image training step: retained activations plus fixed costs.
pub fn estimate_gd(
    model: &impl Profiled,
    height: usize,
    width: usize,
    batch: u64,
    dtype: DType,
    optimizer: OptimizerKind,
) -> Result<MemoryReport> {
    let layers = to_bytes(&model.profile(batch, height, width)?, Phase::Step, dtype);
    let activation_bytes = layers.iter().map(|l| l.retained_bytes).sum();
    let (param_bytes, gradient_bytes, optimizer_bytes) = fixed(model.param_count(), dtype, optimizer);
    Ok(MemoryReport {
        mode: model.label().to_string(),
        height,
        width,
        batch,
        dtype,
        patch_size: None,
        patches_per_step: None,
        layers,
        activation_bytes,
        patch_activation_bytes: 0,
        head_activation_bytes: 0,
        fill_bytes: 0,
        param_bytes,
        gradient_bytes,
        optimizer_bytes,
        z_bytes: 0,
        peak_bytes: param_bytes + gradient_bytes + optimizer_bytes + activation_bytes,
    })
}

/// PatchGD: the larger of the gradient-free fill phase (one chunk of `k`
/// patches in flight) and an inner iteration (`B·k` patches with retained
/// activations, the latent grid and the head).
#[allow(clippy::too_many_arguments)]
pub fn estimate_patchgd(
    extractor: &FeatureExtractor,
    head: &HeadNet,
    height: usize,
    width: usize,
    k: usize,
    batch: u64,
    dtype: DType,
    optimizer: OptimizerKind,
) -> Result<MemoryReport> {
    let p = extractor.patch_size();
    let grid = GridSpec::padded(height, width, p)?;
    let k = k.clamp(1, grid.cells());
    let bytes = dtype.size_bytes();

    let patch_layers = to_bytes(&extractor.profile(batch * k as u64, p, p)?, Phase::Patches, dtype);
    let head_layers = to_bytes(&head.profile(batch, grid.rows, grid.cols)?, Phase::Head, dtype);
    let patch_activation_bytes: u64 = patch_layers.iter().map(|l| l.retained_bytes).sum();
    let head_activation_bytes: u64 = head_layers.iter().map(|l| l.retained_bytes).sum();

    let fill_transient = extractor
        .profile(k as u64, p, p)?
        .iter()
        .map(|l| (l.input_elems + l.output_elems) * bytes)
        .max()
        .unwrap_or(0);
    let z_bytes = batch * (grid.cells() * extractor.embed_dim()) as u64 * bytes;
    let (param_bytes, gradient_bytes, optimizer_bytes) =
        fixed(extractor.num_params() + head.num_params(), dtype, optimizer);
    let fixed_total = param_bytes + gradient_bytes + optimizer_bytes;
    let activation_bytes = patch_activation_bytes + head_activation_bytes;
    let fill_peak = fixed_total + z_bytes + fill_transient;
    let inner_peak = fixed_total + z_bytes + activation_bytes;

    let mut layers = patch_layers;
    layers.extend(head_layers);
    Ok(MemoryReport {
        mode: "patchgd".to_string(),
        height,
        width,
        batch,
        dtype,
        patch_size: Some(p),
        patches_per_step: Some(k),
        layers,
        activation_bytes,
        patch_activation_bytes,
        head_activation_bytes,
        fill_bytes: fill_transient,
        param_bytes,
        gradient_bytes,
        optimizer_bytes,
        z_bytes,
        peak_bytes: fill_peak.max(inner_peak),
    })
}

/// Largest batch whose modeled peak fits in `budget_bytes`; 0 when even a
/// single image does not fit.
pub fn max_feasible_batch(build: impl Fn(u64) -> Result<MemoryReport>, budget_bytes: u64) -> Result<u64> {
    const CAP: u64 = 1 << 40;
    let fits = |b: u64| -> Result<bool> { Ok(build(b)?.peak_bytes <= budget_bytes) };
    if !fits(1)? {
        return Ok(0);
    }
    let mut lo = 1;
    let mut hi = 2;
    while fits(hi)? {
        lo = hi;
        if hi >= CAP {
            return Ok(hi);
        }
        hi *= 2;
    }
    // lo fits, hi does not
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

pub const REPORT_CSV_HEADER: [&str; 7] = ["mode", "height", "width", "batch", "dtype", "component", "bytes"];

/// Long-format CSV: one row per (report, component), then per layer.
pub fn write_csv(reports: &[MemoryReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        let head = [
            r.mode.clone(),
            r.height.to_string(),
            r.width.to_string(),
            r.batch.to_string(),
            r.dtype.name().to_string(),
        ];
        for (name, bytes) in r.components() {
            let mut row = head.to_vec();
            row.extend([name.to_string(), bytes.to_string()]);
            w.write_record(&row).map_err(csv_err)?;
        }
        for l in &r.layers {
            let mut row = head.to_vec();
            row.extend([format!("layer:{}", l.name), l.retained_bytes.to_string()]);
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

/// Human-readable size with binary units.
pub fn human_bytes(bytes: u64) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = bytes as f64;
    let mut unit = 0;
    while v >= 1024.0 && unit + 1 < UNITS.len() {
        v /= 1024.0;
        unit += 1;
    }
    if unit == 0 {
        format!("{bytes} B")
    } else {
        format!("{v:.2} {}", UNITS[unit])
    }
}

/// Side-by-side table of several reports.
pub struct ReportTable<'a>(pub &'a [MemoryReport]);

impl fmt::Display for ReportTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let titles: Vec<String> = self
            .0
            .iter()
            .map(|r| format!("{} {}x{} B={}", r.mode, r.height, r.width, r.batch))
            .collect();
        let width = titles.iter().map(String::len).max().unwrap_or(0).max(12) + 2;
        write!(f, "{:<20}", "component")?;
        for t in &titles {
            write!(f, "{t:>width$}")?;
        }
        writeln!(f)?;
        let rows = self.0.first().map(|r| r.components().len()).unwrap_or(0);
        for i in 0..rows {
            write!(f, "{:<20}", self.0[0].components()[i].0)?;
            for r in self.0 {
                write!(f, "{:>width$}", human_bytes(r.components()[i].1))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
