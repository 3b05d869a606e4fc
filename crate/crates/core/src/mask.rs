//! Boxes, occupancy masks and the region partition that routes features to
//! experts.
//!
//! Pair masks follow the boolean construction union / intersection /
//! exclusive-a / exclusive-b. Routing masks generalise that partition to `M`
//! objects (background, one exclusive region per object, and a single
//! overlap region covered by two or more objects), are formed in image space
//! and then bilinearly downsampled component by component. Bilinear sampling
//! is linear in the input, so the partition of unity survives downsampling up
//! to rounding.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::raster::Image;

/// Half-open integer rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidBox(x0, y0, x1, y1));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> u32 {
        self.x0
    }
    pub fn y0(&self) -> u32 {
        self.y0
    }
    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn as_usize(&self) -> (usize, usize, usize, usize) {
        (self.x0 as usize, self.y0 as usize, self.x1 as usize, self.y1 as usize)
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(BBox { x0, y0, x1, y1 })
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.intersection(other).is_some()
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [u32; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// A `width × height` grid of values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("mask dimensions must be positive"));
        }
        if values.len() != width * height {
            return Err(shape_err(
                "mask",
                format!("{width}x{height} needs {} values, got {}", width * height, values.len()),
            ));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("mask values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(shape_err("mask", "ragged rows"));
        }
        Self::new(width, height, rows.concat())
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            values: vec![v; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1.0)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(if f(x, y) { 1.0 } else { 0.0 });
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of cells at or above 0.5.
    pub fn count_on(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn same_dims(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn zip(&self, other: &Mask, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mask> {
        if !self.same_dims(other) {
            return Err(shape_err(
                op,
                format!("{}x{} vs {}x{}", self.width, self.height, other.width, other.height),
            ));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, "mask or", |a, b| a.max(b))
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, "mask and", |a, b| a.min(b))
    }

    /// `self ∧ ¬other`.
    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, "mask and_not", |a, b| a.min(1.0 - b))
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Tight bounding box of the cells at or above 0.5.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) >= 0.5 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x1 > 0).then(|| BBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32).expect("non-empty extent"))
    }

    pub fn as_image(&self) -> Image {
        Image::new(self.width, self.height, 1, self.values.clone()).expect("mask dims are valid")
    }

    /// ASCII PGM (P2), maxval 255, values rounded to the nearest level.
    pub fn write_pgm<W: Write>(&self, w: W) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        PnmEncoder::new(w)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Ascii))
            .write_image(&bytes, self.width as u32, self.height as u32, ExtendedColorType::L8)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_pgm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Mask> {
        let img = Image::load_pnm(path)?;
        if img.channels() != 1 {
            return Err(invalid("mask file must be single-channel"));
        }
        Mask::new(img.width(), img.height(), img.data().to_vec())
    }
}

/// Output of the pairwise boolean construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMasks {
    pub union: Mask,
    pub overlap: Mask,
    pub a_exclusive: Mask,
    pub b_exclusive: Mask,
}

fn require_binary(m: &Mask, what: &str) -> Result<()> {
    if m.is_binary() {
        Ok(())
    } else {
        Err(invalid(format!("{what} must be binary")))
    }
}

pub fn build_pair_masks(a: &Mask, b: &Mask) -> Result<PairMasks> {
    require_binary(a, "m_a")?;
    require_binary(b, "m_b")?;
    Ok(PairMasks {
        union: a.or(b)?,
        overlap: a.and(b)?,
        a_exclusive: a.and_not(b)?,
        b_exclusive: b.and_not(a)?,
    })
}

/// `(1 − m_u) ⊙ x` for every channel.
pub fn masked_background(x: &Image, union: &Mask) -> Result<Image> {
    if x.width() != union.width() || x.height() != union.height() {
        return Err(shape_err(
            "masked_background",
            format!("image {}x{} vs mask {}x{}", x.width(), x.height(), union.width(), union.height()),
        ));
    }
    let mut out = x.clone();
    let c = x.channels();
    for (i, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
        let keep = 1.0 - union.values[i];
        for v in px {
            *v *= keep;
        }
    }
    Ok(out)
}

pub fn bbox_to_mask(b: &BBox, width: usize, height: usize) -> Result<Mask> {
    let (x0, y0, x1, y1) = b.as_usize();
    if x1 > width || y1 > height {
        return Err(invalid(format!("box {b:?} does not fit a {width}x{height} grid")));
    }
    Ok(Mask::from_fn(width, height, |x, y| x0 <= x && x < x1 && y0 <= y && y < y1))
}

/// Bilinear downsampling with half-pixel centres and edge clamping.
pub fn downsample_mask(m: &Mask, height: usize, width: usize) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(invalid("target dimensions must be positive"));
    }
    if height > m.height || width > m.width {
        return Err(invalid(format!(
            "upsampling {}x{} to {width}x{height} is not supported",
            m.width, m.height
        )));
    }
    if height == m.height && width == m.width {
        return Ok(m.clone());
    }
    let (sx_scale, sy_scale) = (m.width as f64 / width as f64, m.height as f64 / height as f64);
    let mut values = Vec::with_capacity(width * height);
    for i in 0..height {
        let sy = ((i as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (m.height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(m.height - 1);
        let ty = sy - y0 as f64;
        for j in 0..width {
            let sx = ((j as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (m.width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(m.width - 1);
            let tx = sx - x0 as f64;
            let top = m.get(x0, y0) * (1.0 - tx) + m.get(x1, y0) * tx;
            let bot = m.get(x0, y1) * (1.0 - tx) + m.get(x1, y1) * tx;
            values.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
        }
    }
    Ok(Mask {
        width,
        height,
        values,
    })
}

/// Feature-resolution partition into background, per-object exclusive
/// regions and one overlap region.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingMasks {
    pub background: Mask,
    pub exclusive: Vec<Mask>,
    pub overlap: Mask,
}

pub const PARTITION_TOL: f64 = 1e-6;

impl RoutingMasks {
    pub fn width(&self) -> usize {
        self.background.width
    }

    pub fn height(&self) -> usize {
        self.background.height
    }

    pub fn object_count(&self) -> usize {
        self.exclusive.len()
    }

    /// Re-orders the exclusive regions; `order[i]` is the old index that
    /// lands in slot `i`.
    pub fn permuted(&self, order: &[usize]) -> RoutingMasks {
        RoutingMasks {
            background: self.background.clone(),
            exclusive: order.iter().map(|&i| self.exclusive[i].clone()).collect(),
            overlap: self.overlap.clone(),
        }
    }

    /// Largest deviation of `bg + Σ ex + overlap` from one.
    pub fn partition_error(&self) -> f64 {
        (0..self.background.values.len())
            .map(|i| {
                let s = self.background.values[i]
                    + self.exclusive.iter().map(|m| m.values[i]).sum::<f64>()
                    + self.overlap.values[i];
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(&self.background)
            .chain(&self.exclusive)
            .chain(std::iter::once(&self.overlap));
        for m in all {
            if !m.same_dims(&self.background) {
                return Err(Error::Partition("components differ in resolution".into()));
            }
            if m.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Partition("value outside [0, 1]".into()));
            }
        }
        let err = self.partition_error();
        if err > PARTITION_TOL {
            return Err(Error::Partition(format!("components sum to 1 ± {err:e}")));
        }
        Ok(())
    }

    /// Background + one exclusive region, no overlap; used when a single
    /// object is composited.
    pub fn single(mask: &Mask, height: usize, width: usize) -> Result<RoutingMasks> {
        require_binary(mask, "object mask")?;
        let bg = mask.complement();
        Ok(RoutingMasks {
            background: downsample_mask(&bg, height, width)?,
            exclusive: vec![downsample_mask(mask, height, width)?],
            overlap: Mask::zeros(width, height),
        })
    }
}

/// Builds the partition from `M ≥ 2` binary image-space masks and
/// downsamples each component to `height × width`.
pub fn build_routing_masks(masks: &[Mask], height: usize, width: usize) -> Result<RoutingMasks> {
    if masks.len() < 2 {
        return Err(invalid(format!("routing needs at least two objects, got {}", masks.len())));
    }
    let (w, h) = (masks[0].width, masks[0].height);
    for (i, m) in masks.iter().enumerate() {
        if m.width != w || m.height != h {
            return Err(shape_err("build_routing_masks", format!("mask {i} differs in size")));
        }
        require_binary(m, "object mask")?;
    }
    let coverage: Vec<usize> = (0..w * h)
        .map(|i| masks.iter().filter(|m| m.values[i] == 1.0).count())
        .collect();
    let from_cov = |f: &dyn Fn(usize, usize) -> bool| Mask::from_fn(w, h, |x, y| f(y * w + x, coverage[y * w + x]));
    let bg = from_cov(&|_, c| c == 0);
    let overlap = from_cov(&|_, c| c >= 2);
    let exclusive: Vec<Mask> = masks
        .iter()
        .map(|m| from_cov(&|i, c| c == 1 && m.values[i] == 1.0))
        .collect();
    Ok(RoutingMasks {
        background: downsample_mask(&bg, height, width)?,
        exclusive: exclusive
            .iter()
            .map(|m| downsample_mask(m, height, width))
            .collect::<Result<_>>()?,
        overlap: downsample_mask(&overlap, height, width)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn pair_masks_truth_table() {
        let a = Mask::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]).unwrap();
        let b = Mask::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]).unwrap();
        let p = build_pair_masks(&a, &b).unwrap();
        assert_eq!(p.union, Mask::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]).unwrap());
        assert_eq!(p.overlap, Mask::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap());
        assert_eq!(p.a_exclusive, Mask::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap());
        assert_eq!(p.b_exclusive, Mask::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]).unwrap());
    }

    #[test]
    fn pair_masks_idempotent_and_disjoint() {
        let a = Mask::from_fn(4, 3, |x, y| (x + y) % 2 == 0);
        let p = build_pair_masks(&a, &a).unwrap();
        assert_eq!(p.overlap, a);
        assert_eq!(p.a_exclusive.count_on(), 0);
        assert_eq!(p.b_exclusive.count_on(), 0);

        let b = a.complement();
        let p = build_pair_masks(&a, &b).unwrap();
        assert_eq!(p.overlap.count_on(), 0);
        assert_eq!(p.a_exclusive, a);
        assert_eq!(p.b_exclusive, b);
    }

    #[test]
    fn pair_masks_reject_mismatch_and_soft_input() {
        assert!(matches!(
            build_pair_masks(&Mask::zeros(2, 2), &Mask::zeros(3, 2)),
            Err(Error::Shape { .. })
        ));
        assert!(build_pair_masks(&Mask::filled(2, 2, 0.5), &Mask::zeros(2, 2)).is_err());
    }

    #[test]
    fn masked_background_cases() {
        let x = Image::new(2, 2, 1, vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let m = Mask::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(masked_background(&x, &m).unwrap().data(), &[0.0, 4.0, 6.0, 0.0]);
        assert_eq!(masked_background(&x, &Mask::zeros(2, 2)).unwrap(), x);
        assert!(masked_background(&x, &Mask::ones(2, 2)).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(masked_background(&x, &Mask::ones(3, 2)).is_err());
    }

    #[test]
    fn rasterize_boxes() {
        let m = bbox_to_mask(&bx(0, 0, 2, 1), 3, 2).unwrap();
        assert_eq!(m, Mask::from_rows(&[&[1.0, 1.0, 0.0], &[0.0, 0.0, 0.0]]).unwrap());
        assert_eq!(bbox_to_mask(&bx(0, 0, 3, 2), 3, 2).unwrap(), Mask::ones(3, 2));
        let m = bbox_to_mask(&bx(1, 1, 2, 2), 2, 2).unwrap();
        assert_eq!(m, Mask::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]).unwrap());
        assert!(bbox_to_mask(&bx(1, 1, 4, 2), 3, 3).is_err());
    }

    #[test]
    fn box_validation_and_json_form() {
        assert!(BBox::new(2, 0, 2, 3).is_err());
        let b: BBox = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(b, bx(1, 2, 3, 4));
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        assert!(serde_json::from_str::<BBox>("[3,2,1,4]").is_err());
    }

    #[test]
    fn iou_examples() {
        let b = bx(3, 1, 9, 5);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bx(0, 0, 2, 2), &bx(4, 4, 6, 6)), 0.0);
        // Rasterized: both boxes cover 4 cells, they share exactly one.
        let (a, c) = (bx(0, 0, 2, 2), bx(1, 1, 3, 3));
        let ma = bbox_to_mask(&a, 3, 3).unwrap();
        let mc = bbox_to_mask(&c, 3, 3).unwrap();
        let inter = ma.and(&mc).unwrap().count_on();
        let union = ma.or(&mc).unwrap().count_on();
        assert_eq!((inter, union), (1, 7));
        assert_eq!(iou(&a, &c), 1.0 / 7.0);
    }

    #[test]
    fn downsample_examples() {
        let m = Mask::from_fn(5, 4, |x, y| x > y);
        assert_eq!(downsample_mask(&m, 4, 5).unwrap(), m);
        let m = Mask::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]).unwrap();
        // Oracle: the half-pixel centre of the single output cell sits at
        // (0.5, 0.5), equidistant from the four inputs.
        let oracle = (1.0 + 1.0 + 0.0 + 0.0) / 4.0;
        assert_eq!(downsample_mask(&m, 1, 1).unwrap().values(), &[oracle]);
        let d = downsample_mask(&Mask::ones(9, 7), 3, 2).unwrap();
        assert!(d.values().iter().all(|&v| v == 1.0));
        assert!(downsample_mask(&m, 0, 1).is_err());
        assert!(downsample_mask(&m, 3, 1).is_err());
    }

    #[test]
    fn routing_special_cases() {
        let a = Mask::from_fn(8, 8, |x, _| x < 3);
        let b = Mask::from_fn(8, 8, |x, _| x > 5);
        for res in [8, 4, 2] {
            let r = build_routing_masks(&[a.clone(), b.clone()], res, res).unwrap();
            assert!(r.overlap.values().iter().all(|&v| v == 0.0));
            r.validate().unwrap();
        }
        let one = Mask::ones(8, 8);
        let r = build_routing_masks(&[one.clone(), one], 4, 4).unwrap();
        assert!(r.background.values().iter().all(|&v| v == 0.0));
        assert!(r.exclusive.iter().all(|m| m.values().iter().all(|&v| v == 0.0)));
        assert!(r.overlap.values().iter().all(|&v| v == 1.0));
        assert!(build_routing_masks(&[a], 4, 4).is_err());
    }

    #[test]
    fn routing_reduces_to_pair_masks_at_full_resolution() {
        let a = Mask::from_fn(6, 6, |x, y| x < 4 && y < 4);
        let b = Mask::from_fn(6, 6, |x, y| x >= 2 && y >= 2);
        let p = build_pair_masks(&a, &b).unwrap();
        let r = build_routing_masks(&[a, b], 6, 6).unwrap();
        assert_eq!(r.overlap, p.overlap);
        assert_eq!(r.exclusive[0], p.a_exclusive);
        assert_eq!(r.exclusive[1], p.b_exclusive);
        assert_eq!(r.background, p.union.complement());
    }

    #[test]
    fn pgm_is_ascii_p2_and_round_trips() {
        let m = Mask::from_fn(3, 2, |x, y| x == y);
        let mut buf = Vec::new();
        m.write_pgm(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("P2"));
        assert!(text.contains("255"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        m.save_pgm(&p).unwrap();
        assert_eq!(Mask::load_pgm(&p).unwrap(), m);
    }

    fn binary_mask(w: usize, h: usize) -> impl Strategy<Value = Mask> {
        prop::collection::vec(any::<bool>(), w * h)
            .prop_map(move |bits| Mask::from_fn(w, h, |x, y| bits[y * w + x]))
    }

    fn any_box() -> impl Strategy<Value = BBox> {
        (0u32..20, 0u32..20, 1u32..12, 1u32..12).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn partition_of_unity(a in binary_mask(16, 16), b in binary_mask(16, 16), c in binary_mask(16, 16),
                              res in prop::sample::select(vec![16usize, 8, 4, 3, 1])) {
            let r = build_routing_masks(&[a.clone(), b.clone()], res, res).unwrap();
            prop_assert!(r.partition_error() <= 1e-6);
            let r = build_routing_masks(&[a, b, c], res, res).unwrap();
            prop_assert!(r.partition_error() <= 1e-6);
        }

        #[test]
        fn pair_masks_commute(a in binary_mask(5, 4), b in binary_mask(5, 4)) {
            let ab = build_pair_masks(&a, &b).unwrap();
            let ba = build_pair_masks(&b, &a).unwrap();
            prop_assert_eq!(&ab.union, &ba.union);
            prop_assert_eq!(&ab.overlap, &ba.overlap);
            prop_assert_eq!(&ab.a_exclusive, &ba.b_exclusive);
            prop_assert_eq!(&ab.b_exclusive, &ba.a_exclusive);
        }

        #[test]
        fn iou_symmetric_bounded_and_matches_raster(a in any_box(), b in any_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            let ma = bbox_to_mask(&a, 32, 32).unwrap();
            let mb = bbox_to_mask(&b, 32, 32).unwrap();
            let inter = ma.and(&mb).unwrap().count_on() as f64;
            let union = ma.or(&mb).unwrap().count_on() as f64;
            prop_assert_eq!(v, inter / union);
        }

        #[test]
        fn downsample_monotone_and_constant(a in binary_mask(12, 12), b in binary_mask(12, 12),
                                            c in 0.0f64..=1.0, res in 1usize..=12) {
            let lo = a.and(&b).unwrap();
            let dl = downsample_mask(&lo, res, res).unwrap();
            let dh = downsample_mask(&a, res, res).unwrap();
            prop_assert!(dl.values().iter().zip(dh.values()).all(|(x, y)| x <= y));
            let k = downsample_mask(&Mask::filled(12, 12, c), res, res).unwrap();
            prop_assert!(k.values().iter().all(|&v| (v - c).abs() < 1e-12));
        }
    }
}
