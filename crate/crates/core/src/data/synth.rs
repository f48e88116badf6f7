//! Procedural knee-joint radiograph stand-ins.
//!
//! Each half of a bilateral canvas holds one joint: a femur band above and a
//! tibia band below a dark joint space. The space narrows with grade and the
//! grade also sets how many bright marginal spurs are drawn. Away from the
//! joint, dark scar bands of random thickness cross the shafts and blobs of
//! random size and brightness are scattered; neither carries label
//! information.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Roi, Side};
use crate::tensor::Tensor;

/// Joint-space height as a fraction of image height, per grade.
pub const GAP_FRACTION: [f64; 5] = [0.16, 0.12, 0.085, 0.055, 0.03];

const BACKGROUND: f64 = 0.22;
const BONE: f64 = 0.72;
const GAP: f64 = 0.10;
const SPUR: f64 = 0.88;

/// One joint drawn in the canonical (left knee) orientation, medial side to
/// the right.
pub(crate) struct Joint {
    pub image: Vec<f64>,
    pub roi: Roi,
}

fn disc(image: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, r: f64, value: f64) {
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
    let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                image[y * w + x] = value;
            }
        }
    }
}

pub(crate) fn draw_joint(grade: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Joint {
    let (hf, wf) = (h as f64, w as f64);
    let noise = Normal::new(0.0, 0.04).unwrap();
    let mut image: Vec<f64> = (0..h * w).map(|_| BACKGROUND + noise.sample(rng)).collect();

    let cx = wf * (0.5 + rng.random_range(-0.04..0.04));
    let half_width = wf * rng.random_range(0.27..0.31);
    let cy = hf * 0.5 + rng.random_range(-1.0..1.0) * hf / 16.0;
    let gap = hf * GAP_FRACTION[grade] * rng.random_range(0.9..1.1);
    let bow = hf * 0.02;

    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5 - cx) / half_width;
            if u.abs() > 1.0 {
                continue;
            }
            let yy = y as f64 + 0.5;
            let top = cy - gap / 2.0 - bow * u * u;
            let bottom = cy + gap / 2.0 + bow * u * u;
            image[y * w + x] = if yy < top || yy > bottom {
                BONE + noise.sample(rng) * 1.2
            } else {
                GAP + noise.sample(rng) * 0.6
            };
        }
    }

    let spur_r = hf * 0.035;
    // Medial margins first, then lateral.
    let corners = [(1.0, -1.0), (1.0, 1.0), (-1.0, -1.0), (-1.0, 1.0)];
    for &(side, vertical) in corners.iter().take(grade) {
        let r = spur_r * rng.random_range(0.8..1.2);
        let sx = cx + side * half_width;
        let sy = cy + vertical * (gap / 2.0 + bow + r * 0.5);
        disc(&mut image, h, w, sy, sx, r, SPUR + noise.sample(rng) * 0.3);
    }

    let margin = (2.0 * spur_r).max(hf * 0.06);
    let top = (cy - gap / 2.0 - margin).floor().max(0.0) as usize;
    let bottom = ((cy + gap / 2.0 + margin).ceil() as usize).min(h);
    let left = (cx - half_width - 1.3 * spur_r).floor().max(0.0) as usize;
    let right = ((cx + half_width + 1.3 * spur_r).ceil() as usize).min(w);
    let roi = Roi {
        top,
        left,
        height: bottom - top,
        width: right - left,
    };

    // Dark bands across the shafts that mimic a joint space of random grade.
    let scars = rng.random_range(1..=2);
    for _ in 0..scars {
        let thick = hf * GAP_FRACTION[rng.random_range(0..GAP_FRACTION.len())] * rng.random_range(0.9..1.1);
        let above = rng.random_bool(0.5);
        let (lo, hi) = if above {
            (hf * 0.03, roi.top as f64 - thick - 2.0)
        } else {
            ((roi.top + roi.height) as f64 + 2.0, hf * 0.97 - thick)
        };
        if hi <= lo {
            continue;
        }
        let y0 = rng.random_range(lo..hi);
        for y in (y0.floor() as usize)..((y0 + thick).ceil() as usize).min(h) {
            for x in 0..w {
                if ((x as f64 + 0.5 - cx) / half_width).abs() <= 1.0 {
                    image[y * w + x] = GAP + noise.sample(rng) * 0.6;
                }
            }
        }
    }

    let blobs = rng.random_range(1..=3);
    let mut placed = 0;
    for _ in 0..50 {
        if placed == blobs {
            break;
        }
        let r = hf * rng.random_range(0.04..0.08);
        let by = rng.random_range(0.0..hf);
        let bx = rng.random_range(0.0..wf);
        let clear_y = by + r < roi.top as f64 || by - r > (roi.top + roi.height) as f64;
        let clear_x = bx + r < roi.left as f64 || bx - r > (roi.left + roi.width) as f64;
        if clear_y || clear_x {
            disc(&mut image, h, w, by, bx, r, rng.random_range(0.3..0.95));
            placed += 1;
        }
    }

    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }
    Joint { image, roi }
}

fn mirror_into(dst: &mut [f64], dst_w: usize, offset: usize, src: &[f64], src_w: usize, mirrored: bool) {
    for (y, row) in src.chunks_exact(src_w).enumerate() {
        for (x, &v) in row.iter().enumerate() {
            let col = if mirrored { src_w - 1 - x } else { x };
            dst[y * dst_w + offset + col] = v;
        }
    }
}

/// Draws a bilateral canvas of `h` x `2 * half_w + 1` holding the graded joint
/// on `side` and a joint of random grade on the other side. Both joints face
/// the center column. Returns the canvas and the graded joint's roi in
/// canonical half-image coordinates.
pub(crate) fn draw_bilateral(grade: usize, side: Side, h: usize, half_w: usize, rng: &mut ChaCha8Rng) -> (Tensor, Roi) {
    let other_grade = rng.random_range(0..GAP_FRACTION.len());
    let graded = draw_joint(grade, h, half_w, rng);
    let other = draw_joint(other_grade, h, half_w, rng);
    let (left, right) = match side {
        Side::Left => (&graded, &other),
        Side::Right => (&other, &graded),
    };
    let width = 2 * half_w + 1;
    let noise = Normal::new(BACKGROUND, 0.04).unwrap();
    let mut canvas: Vec<f64> = (0..h * width).map(|_| noise.sample(rng).clamp(0.0, 1.0)).collect();
    mirror_into(&mut canvas, width, 0, &left.image, half_w, false);
    mirror_into(&mut canvas, width, half_w + 1, &right.image, half_w, true);
    (Tensor::new(&[h, width, 1], canvas).expect("canvas size"), graded.roi)
}
