use serde::{Deserialize, Serialize};

use crate::imagecore::{to_grayscale, Image};

const GRID: usize = 8;
const BINS: usize = 8;
const CELLS: usize = 2;

pub const DESCRIPTOR_LEN: usize = GRID * GRID + CELLS * CELLS * BINS;

/// Hand-crafted whole-image descriptor: a coarse grid of mean intensities
/// (mean removed) and gradient-orientation histograms over image quadrants.
/// Each part is normalized on its own before the whole vector is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescriptor {
    pub values: Vec<f64>,
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
        true
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        false
    }
}

impl GlobalDescriptor {
    pub fn compute(img: &Image) -> Self {
        let g = to_grayscale(img);
        let (h, w) = (g.height(), g.width());
        let px = |y: usize, x: usize| g.data()[y * w + x] as f64;

        let mut blocks = vec![0.0; GRID * GRID];
        for by in 0..GRID {
            for bx in 0..GRID {
                let (y0, y1) = (by * h / GRID, ((by + 1) * h / GRID).max(by * h / GRID + 1).min(h));
                let (x0, x1) = (bx * w / GRID, ((bx + 1) * w / GRID).max(bx * w / GRID + 1).min(w));
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += px(y, x);
                    }
                }
                blocks[by * GRID + bx] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
        let mean = blocks.iter().sum::<f64>() / blocks.len() as f64;
        blocks.iter_mut().for_each(|b| *b -= mean);

        let mut hist = vec![0.0; CELLS * CELLS * BINS];
        for y in 0..h {
            for x in 0..w {
                let gx = px(y, (x + 1).min(w - 1)) - px(y, x.saturating_sub(1));
                let gy = px((y + 1).min(h - 1), x) - px(y.saturating_sub(1), x);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                // unsigned orientation in [0, pi)
                let mut angle = gy.atan2(gx);
                if angle < 0.0 {
                    angle += std::f64::consts::PI;
                }
                let bin = ((angle / std::f64::consts::PI * BINS as f64) as usize).min(BINS - 1);
                let cell = (y * CELLS / h) * CELLS + x * CELLS / w;
                hist[cell * BINS + bin] += mag;
            }
        }

        let a = normalize(&mut blocks);
        let b = normalize(&mut hist);
        let mut values = blocks;
        values.extend(hist);
        if !(a || b) {
            // featureless image
            values.iter_mut().for_each(|v| *v = 1.0);
        }
        normalize(&mut values);
        Self { values }
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}
