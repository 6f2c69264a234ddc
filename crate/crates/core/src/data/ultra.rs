use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DigitBank;
use crate::error::{Error, Result};
use crate::patching::Image;
use crate::seed::{derive_seed, rng_for};

/// Generator settings. Digit sizes are fractions of the image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UltraConfig {
    pub image_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub min_digits: usize,
    pub max_digits: usize,
    /// Placement attempts per digit before the whole layout is redrawn.
    pub placement_attempts: usize,
    /// Layout redraws before giving up.
    pub max_layouts: usize,
}

impl Default for UltraConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            scale_min: 0.05,
            scale_max: 0.6,
            min_digits: 3,
            max_digits: 5,
            placement_attempts: 100,
            max_layouts: 10_000,
        }
    }
}

impl UltraConfig {
    /// Digit side range in pixels.
    pub fn pixel_range(&self) -> (usize, usize) {
        let m = self.image_size as f64;
        (
            ((self.scale_min * m).round() as usize).max(1),
            (self.scale_max * m).round() as usize,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max <= 1 (fractions of the image side)",
                self.scale_min, self.scale_max
            )));
        }
        let (lo, hi) = self.pixel_range();
        if lo > hi || hi > self.image_size {
            return Err(Error::Config(format!(
                "scale range maps to {lo}..={hi} px on a {} px image",
                self.image_size
            )));
        }
        if self.min_digits == 0 || self.min_digits > self.max_digits {
            return Err(Error::Config(format!(
                "digit count range {}..={} is empty",
                self.min_digits, self.max_digits
            )));
        }
        // the smallest layout must fit and admit a digit sum below 10
        if self.min_digits * lo * lo > self.image_size * self.image_size {
            return Err(Error::Config(
                "minimum digits at minimum scale cannot fit without overlap".into(),
            ));
        }
        if self.placement_attempts == 0 || self.max_layouts == 0 {
            return Err(Error::Config(
                "placement attempts and layout retries must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedDigit {
    pub class: u8,
    pub exemplar: usize,
    pub size: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub layout_attempt: u32,
    pub digits: Vec<PlacedDigit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UltraSample {
    pub image: Image,
    pub label: u8,
    pub provenance: Provenance,
}

/// Digit tuples of length `min..=max` with values 0..=9 summing to `label`.
fn compositions(label: u8, min: usize, max: usize) -> Vec<Vec<u8>> {
    fn rec(left: u8, slots: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if slots == 0 {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        for d in 0..=left.min(9) {
            cur.push(d);
            rec(left - d, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for n in min..=max {
        rec(label, n, &mut Vec::new(), &mut out);
    }
    out
}

fn overlaps(a: &PlacedDigit, b: &PlacedDigit) -> bool {
    a.row < b.row + b.size && b.row < a.row + a.size && a.col < b.col + b.size && b.col < a.col + a.size
}

/// Bilinear resize of a square exemplar to `size × size`.
fn resize(src: &[f32], h: usize, w: usize, size: usize) -> Vec<f32> {
    let mut out = vec![0.0; size * size];
    let sy = h as f32 / size as f32;
    let sx = w as f32 / size as f32;
    for r in 0..size {
        let y = ((r as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let (y0, fy) = (y.floor() as usize, y.fract());
        let y1 = (y0 + 1).min(h - 1);
        for c in 0..size {
            let x = ((c as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let (x0, fx) = (x.floor() as usize, x.fract());
            let x1 = (x0 + 1).min(w - 1);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[r * size + c] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn layout(bank: &DigitBank, cfg: &UltraConfig, classes: &[u8], rng: &mut impl Rng) -> Option<Vec<PlacedDigit>> {
    let (lo, hi) = cfg.pixel_range();
    let m = cfg.image_size;
    let mut placed: Vec<PlacedDigit> = Vec::with_capacity(classes.len());
    for &class in classes {
        let members = bank.class_members(class);
        let exemplar = members[rng.gen_range(0..members.len())];
        let size = rng.gen_range(lo..=hi);
        let mut ok = None;
        for _ in 0..cfg.placement_attempts {
            let cand = PlacedDigit {
                class,
                exemplar,
                size,
                row: rng.gen_range(0..=m - size),
                col: rng.gen_range(0..=m - size),
            };
            if placed.iter().all(|p| !overlaps(p, &cand)) {
                ok = Some(cand);
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

/// Label of sample `index`: every aligned block of ten indices holds each
/// label exactly once in a seeded order.
fn stratified_label(seed: u64, index: usize) -> u8 {
    let mut perm: Vec<u8> = (0..10).collect();
    perm.shuffle(&mut rng_for(seed, &[0x1abe1, (index / 10) as u64]));
    perm[index % 10]
}

fn sample(bank: &DigitBank, cfg: &UltraConfig, comps: &[Vec<Vec<u8>>], seed: u64, index: usize) -> Result<UltraSample> {
    let label = stratified_label(seed, index);
    let m = cfg.image_size;
    for attempt in 0..cfg.max_layouts as u64 {
        let sub_seed = derive_seed(seed, &[index as u64, attempt]);
        let mut rng = rng_for(sub_seed, &[]);
        let options = &comps[label as usize];
        let classes = &options[rng.gen_range(0..options.len())];
        let Some(digits) = layout(bank, cfg, classes, &mut rng) else {
            continue;
        };
        let mut image = Image::filled(m, m, 1, 0.0);
        for d in &digits {
            let px = resize(&bank.images[d.exemplar], bank.height, bank.width, d.size);
            for r in 0..d.size {
                for c in 0..d.size {
                    // quantized to 8 bits so records roundtrip exactly
                    let v = (px[r * d.size + c].clamp(0.0, 1.0) * 255.0).round() / 255.0;
                    image.set(d.row + r, d.col + c, 0, v);
                }
            }
        }
        return Ok(UltraSample {
            image,
            label,
            provenance: Provenance {
                seed: sub_seed,
                layout_attempt: attempt as u32,
                digits,
            },
        });
    }
    Err(Error::State(format!(
        "sample {index}: no overlap-free layout after {} attempts",
        cfg.max_layouts
    )))
}

/// `count` samples whose label is the sum (< 10) of 3–5 placed digits.
/// Sample `i` depends only on `(seed, i)`.
pub fn generate_ultramnist(bank: &DigitBank, count: usize, cfg: &UltraConfig, seed: u64) -> Result<Vec<UltraSample>> {
    cfg.validate()?;
    bank.check_complete()?;
    let comps: Vec<_> = (0..10)
        .map(|l| compositions(l, cfg.min_digits, cfg.max_digits))
        .collect();
    if let Some(l) = comps.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "no digit tuple of the allowed lengths sums to {l}"
        )));
    }
    (0..count).map(|i| sample(bank, cfg, &comps, seed, i)).collect()
}
