//! Object encoder and the geometry augmentations applied to object crops:
//! synthetic multi-view renders, view fusion, and in-plane rotation.

use std::f64::consts::FRAC_PI_6;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::mask::Mask;
use crate::raster::Image;
use crate::tensor::nn::{Init, LayerNorm, Linear};
use crate::tensor::{concat, Bound, ParamStore, Tensor, Var};

pub const DEFAULT_VIEWS: usize = 6;
pub const MAX_ROTATION: f64 = FRAC_PI_6;

/// Splits an image into non-overlapping `ps × ps` patches, one row per
/// patch in row-major patch order; each row is laid out `[dy][dx][c]`.
pub fn patchify(x: &Image, ps: usize) -> Result<Tensor> {
    if ps == 0 || x.width() % ps != 0 || x.height() % ps != 0 {
        return Err(shape_err(
            "patchify",
            format!("{}x{} is not divisible by patch size {ps}", x.width(), x.height()),
        ));
    }
    let (gw, gh, c) = (x.width() / ps, x.height() / ps, x.channels());
    let mut data = Vec::with_capacity(x.data().len());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..ps {
                let y = py * ps + dy;
                let start = (y * x.width() + px * ps) * c;
                data.extend_from_slice(&x.data()[start..start + ps * c]);
            }
        }
    }
    Tensor::new([gw * gh, ps * ps * c], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(t: &Tensor, width: usize, height: usize, channels: usize, ps: usize) -> Result<Image> {
    let (gw, gh) = (width / ps, height / ps);
    if ps == 0 || gw * ps != width || gh * ps != height || t.shape() != [gw * gh, ps * ps * channels] {
        return Err(shape_err(
            "unpatchify",
            format!("{:?} does not tile {width}x{height}x{channels} with patch {ps}", t.shape()),
        ));
    }
    let mut img = Image::zeros(width, height, channels);
    let row_len = ps * channels;
    for py in 0..gh {
        for px in 0..gw {
            let token = t.row(py * gw + px);
            for dy in 0..ps {
                let start = ((py * ps + dy) * width + px * ps) * channels;
                img.data_mut()[start..start + row_len].copy_from_slice(&token[dy * row_len..(dy + 1) * row_len]);
            }
        }
    }
    Ok(img)
}

/// Trainable linear patch embedding standing in for a frozen image encoder.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub patch: usize,
    pub channels: usize,
    pub proj: Linear,
}

impl PatchEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        patch: usize,
        channels: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = Linear::new(store, name, patch * patch * channels, dim, false, Init::FanIn, rng)?;
        Ok(Self { patch, channels, proj })
    }

    /// `(H/ps)·(W/ps)` tokens of width `d`.
    pub fn encode<'g>(&self, p: &Bound<'g>, x: &Image) -> Result<Var<'g>> {
        if x.channels() != self.channels {
            return Err(shape_err(
                "encode_object",
                format!("expected {} channels, got {}", self.channels, x.channels()),
            ));
        }
        let patches = p.var(self.proj.weight).graph().constant(patchify(x, self.patch)?);
        self.proj.forward(p, patches)
    }
}

/// `LN` over concatenated views followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct MultiViewFuser {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MultiViewFuser {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 2 * dim, true, Init::FanIn, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 2 * dim, dim, true, Init::FanIn, rng)?,
        })
    }

    /// Concatenation stage only: `codes[perm[0]] ; codes[perm[1]] ; …`.
    pub fn stack_views<'g>(codes: &[Var<'g>], perm: &[usize]) -> Result<Var<'g>> {
        if codes.is_empty() {
            return Err(invalid("no views to fuse"));
        }
        let shape = codes[0].shape();
        if codes.iter().any(|c| c.shape() != shape) {
            return Err(shape_err("fuse_multiview", "views differ in shape".to_string()));
        }
        let mut seen = vec![false; codes.len()];
        if perm.len() != codes.len() || !perm.iter().all(|&i| i < codes.len() && !std::mem::replace(&mut seen[i], true)) {
            return Err(invalid(format!("{perm:?} is not a permutation of {} views", codes.len())));
        }
        let ordered: Vec<_> = perm.iter().map(|&i| codes[i]).collect();
        concat(&ordered, 0)
    }

    /// Fused descriptor with `K·n` tokens.
    pub fn fuse<'g>(&self, p: &Bound<'g>, codes: &[Var<'g>], perm: &[usize]) -> Result<Var<'g>> {
        let stacked = Self::stack_views(codes, perm)?;
        let h = self.fc1.forward(p, self.norm.forward(p, stacked)?)?.gelu()?;
        self.fc2.forward(p, h)
    }
}

/// Uniformly random permutation of `k` views.
pub fn random_permutation<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    perm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewSource {
    SyntheticStub,
    Single,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub views: Vec<Image>,
    pub source: ViewSource,
}

/// Resamples `x` through the inverse of the centred linear map `a`
/// (`out(p) = x(a⁻¹ (p − c) + c)`); outside samples are zero.
fn warp(x: &Image, a: [[f64; 2]; 2]) -> Image {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let (cx, cy) = (x.width() as f64 / 2.0, x.height() as f64 / 2.0);
    let mut out = Image::zeros(x.width(), x.height(), x.channels());
    let mut px = vec![0.0; x.channels()];
    for y in 0..x.height() {
        for xx in 0..x.width() {
            let (dx, dy) = (xx as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            if x.sample_bilinear(sx, sy, &mut px) {
                out.set_pixel(xx, y, &px);
            }
        }
    }
    out
}

/// `k` pseudo-views of one object: view 0 is `x` itself, the rest are
/// random scale/shear warps about the centre.
pub fn synth_multiview(x: &Image, k: usize, seed: u64) -> Result<ViewSet> {
    if k == 0 {
        return Err(invalid("at least one view is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(k);
    views.push(x.clone());
    for _ in 1..k {
        let (sx, sy) = (rng.random_range(0.8..=1.2), rng.random_range(0.8..=1.2));
        let (hx, hy) = (rng.random_range(-0.2..=0.2), rng.random_range(-0.2..=0.2));
        views.push(warp(x, [[sx, hx], [hy, sy]]));
    }
    Ok(ViewSet {
        views,
        source: if k == 1 { ViewSource::Single } else { ViewSource::SyntheticStub },
    })
}

pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(-MAX_ROTATION..=MAX_ROTATION)
}

/// Rotates image and mask by `theta` radians about the centre. The image
/// is sampled bilinearly, the mask by nearest neighbour thresholded at
/// 0.5; uncovered samples become 0.
pub fn rotate_augment(x: &Image, m: &Mask, theta: f64) -> Result<(Image, Mask)> {
    if m.width() != x.width() || m.height() != x.height() {
        return Err(shape_err("rotate_augment", "image and mask differ in size".to_string()));
    }
    if theta == 0.0 {
        return Ok((x.clone(), m.clone()));
    }
    let (s, c) = theta.sin_cos();
    let img = warp(x, [[c, -s], [s, c]]);
    let (w, h) = (m.width() as f64, m.height() as f64);
    let mask = Mask::from_fn(m.width(), m.height(), |xx, y| {
        let (dx, dy) = (xx as f64 + 0.5 - w / 2.0, y as f64 + 0.5 - h / 2.0);
        let sx = c * dx + s * dy + w / 2.0;
        let sy = -s * dx + c * dy + h / 2.0;
        if sx < 0.0 || sy < 0.0 || sx >= w || sy >= h {
            return false;
        }
        m.get(sx as usize, sy as usize) >= 0.5
    });
    Ok((img, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::psnr;
    use crate::tensor::Graph;

    fn smooth(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 3, |x, y, c| {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            0.5 + 0.3 * ((u * 3.0 + c as f64).sin() * (v * 2.0).cos())
        })
    }

    #[test]
    fn patchify_round_trip_and_layout() {
        let x = Image::from_fn(4, 2, 2, |x, y, c| (100 * y + 10 * x + c) as f64);
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.shape(), &[2, 8]);
        assert_eq!(t.row(1), &[20.0, 21.0, 30.0, 31.0, 120.0, 121.0, 130.0, 131.0]);
        assert_eq!(unpatchify(&t, 4, 2, 2, 2).unwrap(), x);
        assert!(patchify(&x, 3).is_err());
    }

    #[test]
    fn encoder_token_count_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = PatchEncoder::new(&mut store, "enc", 8, 3, 16, &mut rng).unwrap();
        let x = smooth(32, 32);
        let g = Graph::new();
        let p = store.bind(&g);
        let a = enc.encode(&p, &x).unwrap().value();
        assert_eq!(a.shape(), &[16, 16]);
        let b = enc.encode(&p, &x.map(|v| 2.5 * v)).unwrap().value();
        assert!(b.max_abs_diff(&a.map(|v| 2.5 * v)) < 1e-9);
        let zero = enc.encode(&p, &Image::zeros(32, 32, 3)).unwrap().value();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(enc.encode(&p, &Image::zeros(30, 32, 3)).is_err());
    }

    #[test]
    fn one_patch_changes_one_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = PatchEncoder::new(&mut store, "enc", 8, 3, 16, &mut rng).unwrap();
        let x = smooth(32, 32);
        let mut y = x.clone();
        y.set(9, 17, 1, 0.0);
        let g = Graph::new();
        let p = store.bind(&g);
        let (a, b) = (enc.encode(&p, &x).unwrap().value(), enc.encode(&p, &y).unwrap().value());
        let changed: Vec<_> = (0..16).filter(|&i| a.row(i) != b.row(i)).collect();
        assert_eq!(changed, vec![2 * 4 + 1]);
    }

    #[test]
    fn fusion_shapes_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let fuser = MultiViewFuser::new(&mut store, "mv", 8, &mut rng).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let views: Vec<_> = (0..3).map(|_| g.constant(Tensor::randn([4, 8], 1.0, &mut rng))).collect();
        let out = fuser.fuse(&p, &views, &[0, 1, 2]).unwrap();
        assert_eq!(out.shape(), vec![12, 8]);

        let same = vec![views[0]; 3];
        let a = fuser.fuse(&p, &same, &[0, 1, 2]).unwrap().value();
        let b = fuser.fuse(&p, &same, &[2, 0, 1]).unwrap().value();
        assert_eq!(a, b);

        let s1 = MultiViewFuser::stack_views(&views, &[0, 1, 2]).unwrap().value();
        let s2 = MultiViewFuser::stack_views(&views, &[2, 0, 1]).unwrap().value();
        let mut r1: Vec<Vec<u64>> = (0..12).map(|i| s1.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut r2: Vec<Vec<u64>> = (0..12).map(|i| s2.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        r1.sort();
        r2.sort();
        assert_eq!(r1, r2);

        assert!(fuser.fuse(&p, &views, &[0, 0, 1]).is_err());
        let ragged = [views[0], g.constant(Tensor::zeros([3, 8]))];
        assert!(fuser.fuse(&p, &ragged, &[0, 1]).is_err());
    }

    #[test]
    fn single_view_fusion_is_ln_then_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let fuser = MultiViewFuser::new(&mut store, "mv", 8, &mut rng).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let c = g.constant(Tensor::randn([5, 8], 1.0, &mut rng));
        let fused = fuser.fuse(&p, &[c], &[0]).unwrap().value();
        let direct = fuser
            .fc2
            .forward(&p, fuser.fc1.forward(&p, fuser.norm.forward(&p, c).unwrap()).unwrap().gelu().unwrap())
            .unwrap()
            .value();
        assert_eq!(fused, direct);
    }

    #[test]
    fn multiview_identity_view_and_determinism() {
        let x = smooth(16, 16);
        let one = synth_multiview(&x, 1, 5).unwrap();
        assert_eq!(one.views, vec![x.clone()]);
        assert_eq!(one.source, ViewSource::Single);
        let a = synth_multiview(&x, DEFAULT_VIEWS, 5).unwrap();
        assert_eq!(a, synth_multiview(&x, DEFAULT_VIEWS, 5).unwrap());
        assert_eq!(a.views[0], x);
        assert_ne!(a.views[1], x);
        assert!(synth_multiview(&x, 0, 5).is_err());
    }

    #[test]
    fn zero_rotation_is_identity() {
        let x = smooth(16, 12);
        let m = Mask::from_fn(16, 12, |x, y| x > 3 && y < 7);
        let (xr, mr) = rotate_augment(&x, &m, 0.0).unwrap();
        assert_eq!(xr, x);
        assert_eq!(mr, m);
    }

    #[test]
    fn rotation_round_trip_and_mask_area() {
        let (w, h) = (48, 48);
        // Smooth content that fades to zero well inside the frame.
        let x = Image::from_fn(w, h, 3, |x, y, c| {
            let (dx, dy) = (x as f64 + 0.5 - 24.0, y as f64 + 0.5 - 24.0);
            let r2 = (dx * dx + dy * dy) / 200.0;
            (-r2).exp() * (0.6 + 0.2 * ((dx + c as f64) / 6.0).sin())
        });
        let disk = Mask::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - 24.0, y as f64 + 0.5 - 24.0);
            dx * dx + dy * dy <= 144.0
        });
        for theta in [0.3, -0.5, MAX_ROTATION] {
            let (xr, mr) = rotate_augment(&x, &disk, theta).unwrap();
            let (back, _) = rotate_augment(&xr, &mr, -theta).unwrap();
            assert!(psnr(&x, &back, None).unwrap() > 30.0);
            assert!(mr.is_binary());
            let (a0, a1) = (disk.count_on() as f64, mr.count_on() as f64);
            assert!((a1 - a0).abs() <= 0.05 * a0, "{a0} vs {a1}");
        }
    }

    #[test]
    fn sampled_angles_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10_000 {
            let t = sample_rotation(&mut rng);
            assert!((-MAX_ROTATION..=MAX_ROTATION).contains(&t));
        }
    }
}
