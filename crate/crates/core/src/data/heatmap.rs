//! Where do overlapping boxes overlap? Each pair is expressed in the unit
//! frame of its first box and the intersection is rasterised onto a grid.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::data::select::{select_boxes, PairGuard};
use crate::mask::BBox;

pub const DEFAULT_GRID: usize = 64;

/// Row-major `n × n` grid of overlap frequencies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub n: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean over cells whose centres fall in the centred square covering
    /// `fraction` of the unit area.
    pub fn central_mean(&self, fraction: f64) -> f64 {
        let half = fraction.sqrt() / 2.0;
        let n = self.n as f64;
        let inside = |i: usize| ((i as f64 + 0.5) / n - 0.5).abs() <= half;
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..self.n {
            for c in 0..self.n {
                if inside(r) && inside(c) {
                    sum += self.get(c, r);
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    /// Mean over the outermost ring of cells.
    pub fn border_mean(&self) -> f64 {
        let last = self.n - 1;
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..self.n {
            for c in 0..self.n {
                if r == 0 || c == 0 || r == last || c == last {
                    sum += self.get(c, r);
                    count += 1;
                }
            }
        }
        sum / count as f64
    }
}

/// Average indicator of `A ∩ B` in `A`'s unit frame, sampled at cell
/// centres. Every pair must intersect.
pub fn overlap_heatmap(pairs: &[(BBox, BBox)], n: usize) -> Result<Heatmap> {
    if n == 0 {
        return Err(invalid("heatmap grid must be non-empty"));
    }
    if pairs.is_empty() {
        return Err(invalid("no pairs to accumulate"));
    }
    let mut counts = vec![0u64; n * n];
    let mut cols = Vec::with_capacity(n);
    for (k, (a, b)) in pairs.iter().enumerate() {
        let inter = a
            .intersection(b)
            .ok_or_else(|| invalid(format!("pair {k} does not intersect")))?;
        let to_u = |x: u32| (x as f64 - a.x0() as f64) / a.width() as f64;
        let to_v = |y: u32| (y as f64 - a.y0() as f64) / a.height() as f64;
        let (u0, u1, v0, v1) = (to_u(inter.x0()), to_u(inter.x1()), to_v(inter.y0()), to_v(inter.y1()));
        cols.clear();
        cols.extend((0..n).filter(|&c| {
            let u = (c as f64 + 0.5) / n as f64;
            u0 <= u && u < u1
        }));
        for r in 0..n {
            let v = (r as f64 + 0.5) / n as f64;
            if v0 <= v && v < v1 {
                for &c in &cols {
                    counts[r * n + c] += 1;
                }
            }
        }
    }
    let total = pairs.len() as f64;
    Ok(Heatmap {
        n,
        values: counts.into_iter().map(|c| c as f64 / total).collect(),
    })
}

fn random_box<R: Rng + ?Sized>(width: u32, height: u32, min_side: u32, max_side: u32, rng: &mut R) -> BBox {
    let (w, h) = (rng.random_range(min_side..=max_side), rng.random_range(min_side..=max_side));
    let (x0, y0) = (rng.random_range(0..=width - w), rng.random_range(0..=height - h));
    BBox::new(x0, y0, x0 + w, y0 + h).expect("positive sides")
}

fn check_sides(width: u32, height: u32, min_side: u32, max_side: u32) -> Result<()> {
    if min_side == 0 || min_side > max_side || max_side > width.min(height) {
        return Err(invalid(format!(
            "side range [{min_side}, {max_side}] does not fit a {width}x{height} canvas"
        )));
    }
    Ok(())
}

/// `count` pairs of uniformly placed boxes on a `width × height` canvas,
/// rejection-sampled until they intersect. Sides are drawn from
/// `[min_side, max_side]`.
pub fn sample_intersecting_pairs<R: Rng + ?Sized>(
    count: usize,
    width: u32,
    height: u32,
    min_side: u32,
    max_side: u32,
    rng: &mut R,
) -> Result<Vec<(BBox, BBox)>> {
    check_sides(width, height, min_side, max_side)?;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (a, b) = (
            random_box(width, height, min_side, max_side, rng),
            random_box(width, height, min_side, max_side, rng),
        );
        if a.intersects(&b) {
            out.push((a, b));
        }
    }
    Ok(out)
}

/// Pairs as a dataset pipeline would see them: each layout holds
/// `per_layout` uniformly placed boxes and contributes the pair that
/// [`select_boxes`] picks; layouts yielding no pair are redrawn.
pub fn sample_selected_pairs<R: Rng + ?Sized>(
    count: usize,
    per_layout: usize,
    width: u32,
    height: u32,
    (min_side, max_side): (u32, u32),
    guard: PairGuard,
    rng: &mut R,
) -> Result<Vec<(BBox, BBox)>> {
    check_sides(width, height, min_side, max_side)?;
    let needed = match guard {
        PairGuard::Literal => 3,
        PairGuard::Relaxed => 2,
    };
    if per_layout < needed {
        return Err(invalid(format!("{per_layout} boxes per layout can never yield a pair")));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let boxes: Vec<BBox> = (0..per_layout)
            .map(|_| random_box(width, height, min_side, max_side, rng))
            .collect();
        if let Some((i, j)) = select_boxes(&boxes, guard) {
            out.push((boxes[i], boxes[j]));
        }
    }
    Ok(out)
}
