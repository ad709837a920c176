use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::imagecore::{BinaryMask, Image};

use super::EvalError;

pub const DEFAULT_FMM_RADIUS: f64 = 5.0;
pub const DEFAULT_DIFFUSION_ITERS: usize = 10_000;

const KNOWN: u8 = 0;
const BAND: u8 = 1;
const INSIDE: u8 = 2;

fn check(img: &Image, mask: &BinaryMask) -> Result<(), EvalError> {
    if !mask.matches(img) {
        return Err(EvalError::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    if mask.count() == mask.data().len() && !mask.is_empty() {
        return Err(EvalError::NoKnownPixels);
    }
    Ok(())
}

fn neighbors4(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    [
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

/// Fast-marching inpainting: hole pixels are filled in order of arrival time
/// of a front started at the hole boundary, each as a normalized weighted
/// mean of already known pixels within `radius`. Weights combine direction
/// to the front normal, inverse squared distance and arrival-time similarity.
pub fn inpaint_fmm(img: &Image, mask: &BinaryMask, radius: f64) -> Result<Image, EvalError> {
    check(img, mask)?;
    if !(radius >= 1.0) {
        return Err(EvalError::Config(format!("radius {radius} must be >= 1")));
    }
    if mask.is_empty() {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let p = h * w;
    let mut data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut state: Vec<u8> = mask.data().iter().map(|&m| if m == 1 { INSIDE } else { KNOWN }).collect();
    let mut time = vec![f64::INFINITY; p];
    let mut heap = BinaryHeap::new();
    for i in 0..p {
        if state[i] == KNOWN {
            time[i] = 0.0;
            if neighbors4(i, h, w).any(|n| state[n] == INSIDE) {
                state[i] = BAND;
                heap.push(Reverse((0u64, i)));
            }
        }
    }
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    while let Some(Reverse((_, i))) = heap.pop() {
        if state[i] == KNOWN {
            continue;
        }
        state[i] = KNOWN;
        for n in neighbors4(i, h, w).collect::<Vec<_>>() {
            if state[n] != INSIDE {
                continue;
            }
            let t = arrival_time(n, h, w, &state, &time);
            time[n] = t;
            let (gy, gx) = time_gradient(n, h, w, &state, &time);
            let (ny, nx) = ((n / w) as isize, (n % w) as isize);
            let mut acc = vec![0.0f64; c];
            let mut total = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ky, kx) = (ny + dy, nx + dx);
                    if ky < 0 || kx < 0 || ky >= h as isize || kx >= w as isize || (dy == 0 && dx == 0) {
                        continue;
                    }
                    let d2 = (dy * dy + dx * dx) as f64;
                    let k = ky as usize * w + kx as usize;
                    if d2 > r2 || state[k] == INSIDE {
                        continue;
                    }
                    // r points from the known pixel to the one being filled
                    let (ry, rx) = (-dy as f64, -dx as f64);
                    let mut dir = (ry * gy + rx * gx).abs() / d2.sqrt();
                    if dir <= 0.01 {
                        dir = 1e-6;
                    }
                    let dst = 1.0 / d2;
                    let lev = 1.0 / (1.0 + (time[k] - t).abs());
                    let wt = dir * dst * lev;
                    total += wt;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += wt * data[ch * p + k];
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                data[ch * p + n] = a / total;
            }
            state[n] = BAND;
            heap.push(Reverse((t.to_bits(), n)));
        }
    }
    to_image(img, data)
}

/// Upwind solution of `|grad T| = 1` at `i` from its non-hole neighbours.
fn arrival_time(i: usize, h: usize, w: usize, state: &[u8], time: &[f64]) -> f64 {
    let (y, x) = (i / w, i % w);
    let pick = |cands: [Option<usize>; 2]| {
        cands
            .into_iter()
            .flatten()
            .filter(|&k| state[k] != INSIDE)
            .map(|k| time[k])
            .fold(f64::INFINITY, f64::min)
    };
    let a = pick([(x > 0).then(|| i - 1), (x + 1 < w).then(|| i + 1)]);
    let b = pick([(y > 0).then(|| i - w), (y + 1 < h).then(|| i + w)]);
    if a.is_infinite() || b.is_infinite() || (a - b).abs() >= 1.0 {
        return a.min(b) + 1.0;
    }
    (a + b + (2.0 - (a - b) * (a - b)).sqrt()) / 2.0
}

/// Unit normal of the front at `i`, `(y, x)`; zero when undefined.
fn time_gradient(i: usize, h: usize, w: usize, state: &[u8], time: &[f64]) -> (f64, f64) {
    let (y, x) = (i / w, i % w);
    let t = time[i];
    let diff = |prev: Option<usize>, next: Option<usize>| {
        let ok = |k: Option<usize>| k.filter(|&k| state[k] != INSIDE);
        match (ok(prev), ok(next)) {
            (Some(a), Some(b)) => (time[b] - time[a]) / 2.0,
            (Some(a), None) => t - time[a],
            (None, Some(b)) => time[b] - t,
            (None, None) => 0.0,
        }
    };
    let gx = diff((x > 0).then(|| i - 1), (x + 1 < w).then(|| i + 1));
    let gy = diff((y > 0).then(|| i - w), (y + 1 < h).then(|| i + w));
    let norm = (gx * gx + gy * gy).sqrt();
    if norm > 0.0 {
        (gy / norm, gx / norm)
    } else {
        (0.0, 0.0)
    }
}

fn to_image(img: &Image, data: Vec<f64>) -> Result<Image, EvalError> {
    let (lo, hi) = img.range().bounds();
    let data = data.into_iter().map(|v| (v as f32).clamp(lo, hi)).collect();
    Image::new(img.height(), img.width(), img.channels(), img.range(), data).map_err(|e| EvalError::Shape(e.to_string()))
}

/// Harmonic fill: hole pixels start at the mean of the known pixels and are
/// repeatedly replaced by the mean of their 4-neighbours (Gauss-Seidel) until
/// the largest update falls below 1e-10 or `max_iters` sweeps have run.
/// Known pixels are fixed.
pub fn inpaint_diffusion(img: &Image, mask: &BinaryMask, max_iters: usize) -> Result<Image, EvalError> {
    check(img, mask)?;
    if mask.is_empty() {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let p = h * w;
    let hole: Vec<usize> = (0..p).filter(|&i| mask.data()[i] == 1).collect();
    let adjacency: Vec<Vec<usize>> = hole.iter().map(|&i| neighbors4(i, h, w).collect()).collect();
    let mut data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    for ch in 0..c {
        let plane = &mut data[ch * p..(ch + 1) * p];
        let known = (0..p).filter(|&i| mask.data()[i] == 0);
        let (sum, n) = known.fold((0.0, 0usize), |(s, n), i| (s + plane[i], n + 1));
        let init = sum / n as f64;
        hole.iter().for_each(|&i| plane[i] = init);
        for _ in 0..max_iters {
            let mut change = 0.0f64;
            for (&i, nbrs) in hole.iter().zip(&adjacency) {
                let v = nbrs.iter().map(|&k| plane[k]).sum::<f64>() / nbrs.len() as f64;
                change = change.max((v - plane[i]).abs());
                plane[i] = v;
            }
            if change < 1e-10 {
                break;
            }
        }
    }
    to_image(img, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::ValueRange;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect_mask(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> BinaryMask {
        let data = (0..h * w).map(|i| ((y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))) as u8).collect();
        BinaryMask::new(h, w, data).unwrap()
    }

    #[test]
    fn constant_image_is_filled_with_the_constant() {
        let img = Image::filled(20, 24, 3, ValueRange::Unit, 0.37);
        let mask = rect_mask(20, 24, 3, 15, 5, 20);
        for out in [inpaint_fmm(&img, &mask, 5.0).unwrap(), inpaint_diffusion(&img, &mask, 10_000).unwrap()] {
            assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-3));
        }
    }

    #[test]
    fn fmm_follows_a_horizontal_ramp() {
        let (h, w) = (32, 64);
        let data = (0..h * w).map(|i| (i % w) as f32 / (w - 1) as f32).collect();
        let img = Image::new(h, w, 1, ValueRange::Unit, data).unwrap();
        let mask = rect_mask(h, w, 14, 18, 30, 34);
        let out = inpaint_fmm(&img, &mask, 5.0).unwrap();
        for i in (0..h * w).filter(|&i| mask.data()[i] == 1) {
            let ramp = (i % w) as f32 / (w - 1) as f32;
            assert!((out.data()[i] - ramp).abs() < 0.05, "pixel {i}: {} vs {ramp}", out.data()[i]);
        }
    }

    #[test]
    fn empty_hole_is_identity_and_full_hole_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Image::new(8, 8, 1, ValueRange::Unit, (0..64).map(|_| rng.random()).collect()).unwrap();
        assert_eq!(inpaint_fmm(&img, &BinaryMask::zeros(8, 8), 5.0).unwrap(), img);
        assert_eq!(inpaint_diffusion(&img, &BinaryMask::zeros(8, 8), 10).unwrap(), img);
        assert!(matches!(inpaint_fmm(&img, &BinaryMask::ones(8, 8), 5.0), Err(EvalError::NoKnownPixels)));
        assert!(matches!(inpaint_diffusion(&img, &BinaryMask::ones(8, 8), 5), Err(EvalError::NoKnownPixels)));
    }

    #[test]
    fn zero_iterations_leave_the_initial_fill() {
        let data: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 0.2 } else { 0.6 }).collect();
        let img = Image::new(8, 8, 1, ValueRange::Unit, data).unwrap();
        let mask = rect_mask(8, 8, 2, 4, 2, 4);
        let out = inpaint_diffusion(&img, &mask, 0).unwrap();
        let known: Vec<f64> = (0..64).filter(|&i| mask.data()[i] == 0).map(|i| img.data()[i] as f64).collect();
        let mean = (known.iter().sum::<f64>() / known.len() as f64) as f32;
        for i in (0..64).filter(|&i| mask.data()[i] == 1) {
            assert!((out.data()[i] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn known_pixels_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Image::new(16, 16, 3, ValueRange::Unit, (0..768).map(|_| rng.random()).collect()).unwrap();
        let mask = rect_mask(16, 16, 0, 6, 3, 9);
        for out in [inpaint_fmm(&img, &mask, 3.0).unwrap(), inpaint_diffusion(&img, &mask, 50).unwrap()] {
            for c in 0..3 {
                for i in (0..256).filter(|&i| mask.data()[i] == 0) {
                    assert_eq!(out.plane(c)[i].to_bits(), img.plane(c)[i].to_bits());
                }
            }
        }
    }
}
