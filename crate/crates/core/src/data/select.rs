//! Choosing which boxes of an annotated image to composite together.

use crate::mask::{iou, BBox};

/// Minimum box area (px²) kept by [`select_multi`].
pub const MULTI_AREA_THRESHOLD: u64 = 64;

/// Length guard applied before pair selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PairGuard {
    /// Lists with two or fewer boxes are rejected, as in the reference
    /// pseudocode.
    #[default]
    Literal,
    /// Only lists with fewer than two boxes are rejected.
    Relaxed,
}

/// Full IoU matrix with a zeroed diagonal.
pub fn iou_matrix(boxes: &[BBox]) -> Vec<Vec<f64>> {
    let n = boxes.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i][j] = iou(&boxes[i], &boxes[j]);
            }
        }
    }
    m
}

/// Highest-IoU pair `(i, j)`, or `None` (the sentinel) when the guard trips
/// or no two boxes overlap. Ties resolve to the first maximum in a
/// row-major scan, which always yields `i < j`.
pub fn select_boxes(boxes: &[BBox], guard: PairGuard) -> Option<(usize, usize)> {
    let too_few = match guard {
        PairGuard::Literal => boxes.len() <= 2,
        PairGuard::Relaxed => boxes.len() < 2,
    };
    if too_few {
        return None;
    }
    let m = iou_matrix(boxes);
    let mut best = (0, 0, f64::NEG_INFINITY);
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > best.2 {
                best = (i, j, v);
            }
        }
    }
    (best.2 > 0.0).then_some((best.0, best.1))
}

/// Anchor plus its `m − 1` highest-IoU neighbours, as indices into
/// `boxes`; the anchor is the box with the largest summed IoU among those
/// of area at least `area_threshold`. Neighbours need only overlap the
/// anchor. Returns `None` when fewer than `m − 1` neighbours qualify.
pub fn select_multi(boxes: &[BBox], m: usize, area_threshold: u64) -> Option<Vec<usize>> {
    if m < 2 {
        return None;
    }
    let kept: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].area() >= area_threshold).collect();
    if kept.len() < m {
        return None;
    }
    let score = |i: usize| -> f64 {
        kept.iter().filter(|&&j| j != i).map(|&j| iou(&boxes[i], &boxes[j])).sum()
    };
    let mut anchor = kept[0];
    let mut best = score(anchor);
    for &i in &kept[1..] {
        let s = score(i);
        if s > best {
            anchor = i;
            best = s;
        }
    }
    let mut neighbours: Vec<(usize, f64)> = kept
        .iter()
        .filter(|&&j| j != anchor)
        .map(|&j| (j, iou(&boxes[anchor], &boxes[j])))
        .filter(|&(_, v)| v > 0.0)
        .collect();
    if neighbours.len() < m - 1 {
        return None;
    }
    neighbours.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = vec![anchor];
    out.extend(neighbours.iter().take(m - 1).map(|&(j, _)| j));
    Some(out)
}

/// Far-to-near compositing order: ascending bottom edge, then left edge,
/// then input index.
pub fn painter_order(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by_key(|&i| (boxes[i].y1(), boxes[i].x0(), i));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn literal_guard_rejects_two_boxes() {
        let two = [bx(0, 0, 4, 4), bx(1, 1, 5, 5)];
        assert_eq!(select_boxes(&two, PairGuard::Literal), None);
        assert_eq!(select_boxes(&two, PairGuard::Relaxed), Some((0, 1)));
        assert_eq!(select_boxes(&two[..1], PairGuard::Relaxed), None);
    }

    #[test]
    fn picks_the_overlapping_pair() {
        let boxes = [bx(0, 0, 2, 2), bx(1, 1, 3, 3), bx(10, 10, 12, 12)];
        assert_eq!(select_boxes(&boxes, PairGuard::Literal), Some((0, 1)));
        let disjoint = [bx(0, 0, 1, 1), bx(2, 2, 3, 3), bx(4, 4, 5, 5)];
        assert_eq!(select_boxes(&disjoint, PairGuard::Literal), None);
    }

    #[test]
    fn ties_take_the_first_row_major_max() {
        let boxes = [bx(0, 0, 4, 4), bx(10, 0, 14, 4), bx(2, 0, 6, 4), bx(12, 0, 16, 4)];
        assert_eq!(select_boxes(&boxes, PairGuard::Literal), Some((0, 2)));
    }

    #[test]
    fn multi_selection() {
        let tri = [bx(0, 0, 10, 10), bx(4, 0, 14, 10), bx(2, 2, 12, 12)];
        let sel = select_multi(&tri, 3, MULTI_AREA_THRESHOLD).unwrap();
        assert_eq!(sel.len(), 3);
        assert_eq!(sel[0], 2);

        let chain = [bx(0, 0, 10, 10), bx(8, 0, 18, 10), bx(40, 0, 50, 10)];
        assert_eq!(select_multi(&chain, 3, MULTI_AREA_THRESHOLD), None);

        let with_tiny = [bx(0, 0, 10, 10), bx(4, 0, 14, 10), bx(5, 5, 6, 6)];
        assert_eq!(select_multi(&with_tiny, 3, MULTI_AREA_THRESHOLD), None);
        assert_eq!(select_multi(&with_tiny, 2, MULTI_AREA_THRESHOLD), Some(vec![0, 1]));
    }

    #[test]
    fn painter_order_rules() {
        assert_eq!(painter_order(&[bx(0, 0, 4, 5), bx(0, 0, 4, 9)]), vec![0, 1]);
        assert_eq!(painter_order(&[bx(0, 0, 4, 9), bx(0, 0, 4, 5)]), vec![1, 0]);
        assert_eq!(painter_order(&[bx(3, 0, 6, 9), bx(1, 0, 4, 9)]), vec![1, 0]);
        assert_eq!(painter_order(&[bx(1, 0, 4, 9), bx(1, 2, 4, 9)]), vec![0, 1]);
    }
}
