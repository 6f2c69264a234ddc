use std::f32::consts::TAU;

use super::{BankSource, DigitBank};

const SIZE: usize = 28;
const STROKE: f32 = 1.4;

type Stroke = Vec<(f32, f32)>;

fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32, from: f32, to: f32, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f32 / steps as f32;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Polylines in unit coordinates (x right, y down).
fn strokes(digit: u8) -> Vec<Stroke> {
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.22, 0.34, 0.0, TAU, 24)],
        1 => vec![
            vec![(0.36, 0.28), (0.52, 0.15), (0.52, 0.85)],
            vec![(0.38, 0.85), (0.66, 0.85)],
        ],
        2 => vec![vec![
            (0.28, 0.3),
            (0.36, 0.18),
            (0.5, 0.14),
            (0.64, 0.18),
            (0.71, 0.3),
            (0.66, 0.45),
            (0.28, 0.85),
            (0.74, 0.85),
        ]],
        3 => vec![vec![
            (0.28, 0.2),
            (0.5, 0.14),
            (0.69, 0.22),
            (0.68, 0.38),
            (0.48, 0.48),
            (0.7, 0.58),
            (0.72, 0.74),
            (0.52, 0.86),
            (0.28, 0.8),
        ]],
        4 => vec![vec![(0.62, 0.86), (0.62, 0.14), (0.24, 0.62), (0.78, 0.62)]],
        5 => vec![vec![
            (0.72, 0.15),
            (0.32, 0.15),
            (0.29, 0.47),
            (0.5, 0.41),
            (0.69, 0.5),
            (0.72, 0.7),
            (0.56, 0.85),
            (0.28, 0.8),
        ]],
        6 => {
            let mut s = vec![(0.68, 0.16), (0.48, 0.2), (0.34, 0.36)];
            s.extend(ellipse(
                0.5,
                0.66,
                0.2,
                0.19,
                std::f32::consts::PI * 1.05,
                std::f32::consts::PI * 3.05,
                20,
            ));
            vec![s]
        }
        7 => vec![vec![(0.25, 0.15), (0.76, 0.15), (0.42, 0.86)]],
        8 => vec![
            ellipse(0.5, 0.31, 0.17, 0.16, 0.0, TAU, 20),
            ellipse(0.5, 0.67, 0.21, 0.19, 0.0, TAU, 20),
        ],
        9 => vec![
            ellipse(0.5, 0.35, 0.19, 0.19, 0.0, TAU, 20),
            vec![(0.69, 0.35), (0.62, 0.86)],
        ],
        _ => unreachable!("digits are 0..=9"),
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn rasterize(digit: u8) -> Vec<f32> {
    let scale = (SIZE - 1) as f32;
    let lines: Vec<Vec<(f32, f32)>> = strokes(digit)
        .into_iter()
        .map(|s| s.into_iter().map(|(x, y)| (x * scale, y * scale)).collect())
        .collect();
    let mut out = vec![0.0; SIZE * SIZE];
    for r in 0..SIZE {
        for c in 0..SIZE {
            let p = (c as f32, r as f32);
            let d = lines
                .iter()
                .flat_map(|l| l.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f32::INFINITY, f32::min);
            // one-pixel linear falloff outside the stroke core
            out[r * SIZE + c] = (1.0 - (d - STROKE).max(0.0)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Ten vector-stroke digits rasterized at 28×28, one per class.
pub fn procedural_digits() -> DigitBank {
    let images = (0..10).map(rasterize).collect();
    DigitBank::new(SIZE, SIZE, images, (0..10).collect(), BankSource::Procedural).expect("glyph bank is well formed")
}
