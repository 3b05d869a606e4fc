//! Synthetic scenes of solid shapes over a textured background, their
//! on-disk layout, and the split into background + object crops used as
//! recomposition training pairs.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::select::painter_order;
use crate::error::{invalid, Result};
use crate::mask::{masked_background, BBox, Mask};
use crate::raster::Image;

/// Minimum number of pixels shared by the amodal masks of the two shapes
/// that are placed to interact.
const MIN_OVERLAP_PX: usize = 6;
/// Minimum L1 distance between the colours of any two shapes.
const MIN_COLOR_GAP: f64 = 0.6;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    /// Full-extent (amodal) occupancy, including occluded parts.
    pub mask: Mask,
    /// 0 = farthest.
    pub depth_rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub image: Image,
    pub instances: Vec<Instance>,
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    bbox: BBox,
    depth_rank: usize,
    mask: String,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    width: usize,
    height: usize,
    provenance: String,
    instances: Vec<InstanceFile>,
}

impl SceneRecord {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }

    /// Masks binary and inside their boxes, sizes consistent, depth ranks a
    /// permutation of `0..n`.
    pub fn validate(&self) -> Result<()> {
        let n = self.instances.len();
        let mut seen = vec![false; n];
        for (k, inst) in self.instances.iter().enumerate() {
            let m = &inst.mask;
            if m.width() != self.width() || m.height() != self.height() {
                return Err(invalid(format!("instance {k}: mask size differs from the image")));
            }
            if !m.is_binary() {
                return Err(invalid(format!("instance {k}: mask is not binary")));
            }
            for y in 0..m.height() {
                for x in 0..m.width() {
                    if m.get(x, y) == 1.0 && !inst.bbox.contains(x as u32, y as u32) {
                        return Err(invalid(format!("instance {k}: mask pixel ({x}, {y}) outside its box")));
                    }
                }
            }
            if inst.depth_rank >= n || std::mem::replace(&mut seen[inst.depth_rank], true) {
                return Err(invalid(format!("instance {k}: depth ranks are not a permutation")));
            }
        }
        Ok(())
    }

    /// Pixels where instance `k` is the nearest object.
    pub fn visible_mask(&self, k: usize) -> Mask {
        let me = &self.instances[k];
        Mask::from_fn(self.width(), self.height(), |x, y| {
            me.mask.get(x, y) == 1.0
                && !self
                    .instances
                    .iter()
                    .any(|o| o.depth_rank > me.depth_rank && o.mask.get(x, y) == 1.0)
        })
    }

    /// Writes `image.ppm`, `instances.json` and one `mask_NN.pgm` per
    /// instance into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.image.save_pnm(dir.join("image.ppm"))?;
        let mut instances = Vec::with_capacity(self.instances.len());
        for (k, inst) in self.instances.iter().enumerate() {
            let name = format!("mask_{k:02}.pgm");
            inst.mask.save_pgm(dir.join(&name))?;
            instances.push(InstanceFile {
                bbox: inst.bbox,
                depth_rank: inst.depth_rank,
                mask: name,
            });
        }
        let file = SceneFile {
            width: self.width(),
            height: self.height(),
            provenance: self.provenance.clone(),
            instances,
        };
        fs::write(dir.join("instances.json"), serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<SceneRecord> {
        let dir = dir.as_ref();
        let file: SceneFile = serde_json::from_str(&fs::read_to_string(dir.join("instances.json"))?)?;
        let image = Image::load_pnm(dir.join("image.ppm"))?;
        if image.width() != file.width || image.height() != file.height {
            return Err(invalid(format!("{}: image size disagrees with instances.json", dir.display())));
        }
        let instances = file
            .instances
            .into_iter()
            .map(|i| {
                Ok(Instance {
                    bbox: i.bbox,
                    mask: Mask::load_pgm(dir.join(&i.mask))?,
                    depth_rank: i.depth_rank,
                })
            })
            .collect::<Result<_>>()?;
        let scene = SceneRecord {
            image,
            instances,
            provenance: file.provenance,
        };
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Rect,
    Disk,
    Triangle,
}

fn rasterize(kind: ShapeKind, x0: f64, y0: f64, w: f64, h: f64, width: usize, height: usize) -> Mask {
    Mask::from_fn(width, height, |x, y| {
        let (u, v) = ((x as f64 + 0.5 - x0) / w, (y as f64 + 0.5 - y0) / h);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match kind {
            ShapeKind::Rect => true,
            ShapeKind::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // Apex at the top centre, base along the bottom edge.
            ShapeKind::Triangle => (u - 0.5).abs() <= v / 2.0,
        }
    })
}

fn random_color<R: Rng + ?Sized>(rng: &mut R, taken: &[[f64; 3]]) -> Result<[f64; 3]> {
    for _ in 0..MAX_ATTEMPTS {
        let c = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        if taken
            .iter()
            .all(|t| t.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum::<f64>() >= MIN_COLOR_GAP)
        {
            return Ok(c);
        }
    }
    Err(invalid("could not find distinct shape colours"))
}

fn background<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> Image {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let freq = rng.random_range(0.3..0.9);
    let (ca, sa) = (angle.cos(), angle.sin());
    Image::from_fn(width, height, 3, |x, y, c| {
        let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
        let t = (u * ca + v * sa).rem_euclid(1.0);
        let stripe = 0.06 * ((x as f64 * ca - y as f64 * sa) * freq).sin();
        (c0[c] * (1.0 - t) + c1[c] * t + stripe).clamp(0.0, 1.0)
    })
}

/// One deterministic scene with `n_objects ≥ 2` shapes. Shapes 0 and 1 are
/// placed so that their masks overlap; the rest are placed uniformly. Depth
/// ranks follow [`painter_order`] and the image is quantized to 8 bits so
/// it survives a save/load cycle unchanged.
pub fn generate_scene(seed: u64, width: usize, height: usize, n_objects: usize) -> Result<SceneRecord> {
    if n_objects < 2 {
        return Err(invalid(format!("a scene needs at least two objects, got {n_objects}")));
    }
    let short = width.min(height);
    if short < 8 {
        return Err(invalid(format!("{width}x{height} canvas is too small for shapes")));
    }
    let (min_side, max_side) = ((short / 4).max(3) as f64, (short / 2) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(&mut rng, width, height);

    let mut masks: Vec<Mask> = Vec::with_capacity(n_objects);
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Rect,
                1 => ShapeKind::Disk,
                _ => ShapeKind::Triangle,
            };
            let (w, h) = (
                rng.random_range(min_side..=max_side).round(),
                rng.random_range(min_side..=max_side).round(),
            );
            let (x0, y0) = if k == 1 {
                let on: Vec<(usize, usize)> = (0..height)
                    .flat_map(|y| (0..width).map(move |x| (x, y)))
                    .filter(|&(x, y)| masks[0].get(x, y) == 1.0)
                    .collect();
                let (cx, cy) = on[rng.random_range(0..on.len())];
                (
                    (cx as f64 + 0.5 - w / 2.0).round().clamp(0.0, width as f64 - w),
                    (cy as f64 + 0.5 - h / 2.0).round().clamp(0.0, height as f64 - h),
                )
            } else {
                (
                    rng.random_range(0.0..=width as f64 - w).round(),
                    rng.random_range(0.0..=height as f64 - h).round(),
                )
            };
            let m = rasterize(kind, x0, y0, w, h, width, height);
            if m.count_on() == 0 {
                continue;
            }
            if k == 1 {
                let shared = m.and(&masks[0])?.count_on();
                if shared < MIN_OVERLAP_PX || shared == m.count_on() || shared == masks[0].count_on() {
                    continue;
                }
            }
            placed = Some(m);
            break;
        }
        masks.push(placed.ok_or_else(|| invalid("could not place a shape"))?);
        colors.push(random_color(&mut rng, &colors)?);
    }

    let boxes: Vec<BBox> = masks.iter().map(|m| m.bbox().expect("non-empty mask")).collect();
    let order = painter_order(&boxes);
    let mut ranks = vec![0; n_objects];
    for (r, &k) in order.iter().enumerate() {
        ranks[k] = r;
    }
    let mut image = bg;
    for &k in &order {
        for y in 0..height {
            for x in 0..width {
                if masks[k].get(x, y) == 1.0 {
                    image.set_pixel(x, y, &colors[k]);
                }
            }
        }
    }
    let instances = masks
        .into_iter()
        .zip(boxes)
        .zip(ranks)
        .map(|((mask, bbox), depth_rank)| Instance { bbox, mask, depth_rank })
        .collect();
    Ok(SceneRecord {
        image: image.quantized(),
        instances,
        provenance: format!("synthetic:seed={seed}"),
    })
}

/// Per-scene seeds derived from one corpus seed.
pub fn corpus_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Background plus selected objects of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// Image with the union of the selected objects' visible pixels zeroed.
    pub background: Image,
    /// Image restricted to each object's visible mask, cropped to its box.
    pub object_crops: Vec<Image>,
    /// Full-frame amodal masks, which drive feature routing.
    pub masks: Vec<Mask>,
    /// Full-frame visible masks.
    pub visible: Vec<Mask>,
    pub boxes: Vec<BBox>,
    pub depth_ranks: Vec<usize>,
    pub target: Image,
}

impl TrainSample {
    pub fn object_count(&self) -> usize {
        self.boxes.len()
    }

    /// Same sample with objects listed in `order` (`order[i]` is the old
    /// index placed at slot `i`).
    pub fn reordered(&self, order: &[usize]) -> TrainSample {
        fn pick<T: Clone>(v: &[T], order: &[usize]) -> Vec<T> {
            order.iter().map(|&i| v[i].clone()).collect()
        }
        TrainSample {
            background: self.background.clone(),
            object_crops: pick(&self.object_crops, order),
            masks: pick(&self.masks, order),
            visible: pick(&self.visible, order),
            boxes: pick(&self.boxes, order),
            depth_ranks: pick(&self.depth_ranks, order),
            target: self.target.clone(),
        }
    }

    /// Cells where every selected object is present (amodally).
    pub fn overlap_mask(&self) -> Result<Mask> {
        let mut m = self.masks[0].clone();
        for other in &self.masks[1..] {
            m = m.and(other)?;
        }
        Ok(m)
    }

    /// Index (into this sample) of the nearest selected object covering
    /// `(x, y)`, if any.
    pub fn front_object(&self, x: usize, y: usize) -> Option<usize> {
        (0..self.object_count())
            .filter(|&i| self.masks[i].get(x, y) == 1.0)
            .max_by_key(|&i| self.depth_ranks[i])
    }
}

/// Splits `scene` into background and the crops of `selected` objects.
/// Every selected box after the first must intersect the first.
pub fn decompose(scene: &SceneRecord, selected: &[usize]) -> Result<TrainSample> {
    if selected.len() < 2 {
        return Err(invalid("decomposition needs at least two objects"));
    }
    if let Some(&k) = selected.iter().find(|&&k| k >= scene.instances.len()) {
        return Err(invalid(format!("instance {k} does not exist")));
    }
    let anchor = scene.instances[selected[0]].bbox;
    if selected[1..].iter().any(|&k| !scene.instances[k].bbox.intersects(&anchor)) {
        return Err(invalid("selected boxes do not intersect"));
    }
    let visible: Vec<Mask> = selected.iter().map(|&k| scene.visible_mask(k)).collect();
    let mut union = visible[0].clone();
    for v in &visible[1..] {
        union = union.or(v)?;
    }
    let object_crops = selected
        .iter()
        .zip(&visible)
        .map(|(&k, vis)| masked_background(&scene.image, &vis.complement())?.crop(&scene.instances[k].bbox))
        .collect::<Result<_>>()?;
    Ok(TrainSample {
        background: masked_background(&scene.image, &union)?,
        object_crops,
        masks: selected.iter().map(|&k| scene.instances[k].mask.clone()).collect(),
        visible,
        boxes: selected.iter().map(|&k| scene.instances[k].bbox).collect(),
        depth_ranks: selected.iter().map(|&k| scene.instances[k].depth_rank).collect(),
        target: scene.image.clone(),
    })
}

/// Pastes the crops back onto the background far to near.
pub fn recompose(sample: &TrainSample) -> Image {
    let mut out = sample.background.clone();
    let mut order: Vec<usize> = (0..sample.object_count()).collect();
    order.sort_by_key(|&i| sample.depth_ranks[i]);
    for i in order {
        let (x0, y0, x1, y1) = sample.boxes[i].as_usize();
        for y in y0..y1 {
            for x in x0..x1 {
                if sample.visible[i].get(x, y) == 1.0 {
                    out.set_pixel(x, y, sample.object_crops[i].pixel(x - x0, y - y0));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::select::{select_boxes, PairGuard};

    #[test]
    fn scenes_are_deterministic_and_valid() {
        for seed in 0..30 {
            let a = generate_scene(seed, 32, 32, 3).unwrap();
            assert_eq!(a, generate_scene(seed, 32, 32, 3).unwrap());
            a.validate().unwrap();
            let shared = a.instances[0].mask.and(&a.instances[1].mask).unwrap().count_on();
            assert!(shared >= MIN_OVERLAP_PX);
            assert!(select_boxes(&a.boxes(), PairGuard::Literal).is_some());
        }
        assert!(generate_scene(1, 32, 32, 1).is_err());
        assert!(generate_scene(1, 4, 4, 2).is_err());
    }

    #[test]
    fn nearer_object_wins_overlap_pixels() {
        for seed in 0..20 {
            let s = generate_scene(seed, 32, 32, 2).unwrap();
            let (a, b) = (&s.instances[0], &s.instances[1]);
            let front = if a.depth_rank > b.depth_rank { 0 } else { 1 };
            let vis = s.visible_mask(front);
            let overlap = a.mask.and(&b.mask).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    if overlap.get(x, y) == 1.0 {
                        assert_eq!(vis.get(x, y), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn decompose_recompose_round_trip() {
        for seed in 0..20 {
            let s = generate_scene(seed, 32, 32, 3).unwrap();
            let (i, j) = select_boxes(&s.boxes(), PairGuard::Literal).unwrap();
            let t = decompose(&s, &[i, j]).unwrap();
            assert_eq!(recompose(&t), s.image);
            let union = t.visible[0].or(&t.visible[1]).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    if union.get(x, y) == 1.0 {
                        assert!(t.background.pixel(x, y).iter().all(|&v| v == 0.0));
                    }
                }
            }
            for (crop, b) in t.object_crops.iter().zip(&t.boxes) {
                assert_eq!((crop.width(), crop.height()), (b.width() as usize, b.height() as usize));
            }
            assert_eq!(recompose(&t.reordered(&[1, 0])), s.image);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(4, 32, 24, 3).unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(SceneRecord::load(dir.path()).unwrap(), s);
    }
}
