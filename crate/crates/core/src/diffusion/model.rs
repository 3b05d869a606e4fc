//! The ε-prediction network, its optimizer state and its checkpoint form.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{Config, ModelConfig, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::itb::{GateVars, ItbStack};
use crate::mask::{BBox, RoutingMasks};
use crate::raster::Image;
use crate::shape_prior::{patchify, synth_multiview, unpatchify, MultiViewFuser, PatchEncoder};
use crate::tensor::checkpoint::{self, round_to_f32};
use crate::tensor::nn::{Init, LayerNorm, Linear};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

const CHANNELS: usize = 3;

/// Maps a unit-range image to latent tokens in `[-1, 1]`.
pub fn image_to_tokens(img: &Image, patch: usize) -> Result<Tensor> {
    patchify(&img.map(|v| 2.0 * v - 1.0), patch)
}

/// Inverse of [`image_to_tokens`], clamped to the unit range.
pub fn tokens_to_image(t: &Tensor, width: usize, height: usize, patch: usize) -> Result<Image> {
    Ok(unpatchify(t, width, height, CHANNELS, patch)?.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)))
}

/// Sinusoidal embedding of a timestep, `[1, dim]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[i] = arg.sin();
        data[half + i] = arg.cos();
    }
    Tensor::new([1, dim], data).expect("finite embedding")
}

/// Octaves of the placement features: `sin/cos(2^k·π·u)` per axis.
pub const PLACEMENT_OCTAVES: usize = 4;

/// Fourier features of normalised image positions, `[n, 4·octaves]`.
pub fn placement_features(points: &[(f64, f64)]) -> Tensor {
    let mut data = Vec::with_capacity(points.len() * 4 * PLACEMENT_OCTAVES);
    for &(u, v) in points {
        for coord in [u, v] {
            for k in 0..PLACEMENT_OCTAVES {
                let arg = std::f64::consts::PI * (1u32 << k) as f64 * coord;
                data.push(arg.sin());
                data.push(arg.cos());
            }
        }
    }
    Tensor::new([points.len(), 4 * PLACEMENT_OCTAVES], data).expect("finite features")
}

/// How object codes are produced from crops.
#[derive(Clone, Debug)]
pub enum CodeSpec {
    /// The learned null code (unconditional branch).
    Null,
    /// One crop with the box it came from, optionally with multi-view
    /// synthesis seed and view order.
    Crop {
        image: Image,
        bbox: BBox,
        views: Option<(u64, Vec<usize>)>,
    },
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: ModelConfig,
    pub width: usize,
    pub height: usize,
    pub in_proj: Linear,
    pub pos: ParamId,
    pub time_proj: Linear,
    pub stack: ItbStack,
    pub out_norm: LayerNorm,
    pub head: Linear,
    pub encoder: PatchEncoder,
    pub fuser: Option<MultiViewFuser>,
    /// Shared embedding of image positions, added to latent tokens at their
    /// cell centres and to code tokens where their crop patch sits.
    pub place: Linear,
    pub null_code: ParamId,
}

/// Network output for one noisy input.
pub struct Prediction<'g> {
    pub eps: Var<'g>,
    pub gates: Vec<Option<GateVars<'g>>>,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = config.dim;
        let ps = config.latent_patch;
        if ps == 0 || width % (ps << config.levels) != 0 || height % (ps << config.levels) != 0 {
            return Err(invalid(format!(
                "{width}x{height} does not tile with patch {ps} and {} levels",
                config.levels
            )));
        }
        let token_dim = ps * ps * CHANNELS;
        let tokens = (width / ps) * (height / ps);
        let code_tokens = (config.crop_size / config.crop_patch).pow(2);
        Ok(Self {
            config: config.clone(),
            width,
            height,
            in_proj: Linear::new(store, "in_proj", 2 * token_dim, d, true, Init::FanIn, rng)?,
            pos: store.insert("pos", Tensor::randn([tokens, d], 0.02, rng))?,
            time_proj: Linear::new(store, "time_proj", d, d, true, Init::FanIn, rng)?,
            stack: ItbStack::new(store, "itb", d, config.levels, config.tau, rng)?,
            out_norm: LayerNorm::new(store, "out_norm", d)?,
            head: Linear::new(store, "head", d, token_dim, true, Init::Zeros, rng)?,
            encoder: PatchEncoder::new(store, "shape.enc", config.crop_patch, CHANNELS, d, rng)?,
            fuser: if config.multiview {
                Some(MultiViewFuser::new(store, "shape.fuse", d, rng)?)
            } else {
                None
            },
            place: Linear::new(store, "place", 4 * PLACEMENT_OCTAVES, d, false, Init::FanIn, rng)?,
            null_code: store.insert("null_code", Tensor::randn([code_tokens, d], 0.02, rng))?,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.config.latent_patch, self.width / self.config.latent_patch)
    }

    pub fn token_dim(&self) -> usize {
        self.config.latent_patch.pow(2) * CHANNELS
    }

    /// Routing masks at every stack resolution from full-frame masks.
    pub fn routings(&self, masks: &[crate::mask::Mask]) -> Result<Vec<RoutingMasks>> {
        let (gh, gw) = self.grid();
        (0..=self.config.levels)
            .map(|l| match masks {
                [single] => RoutingMasks::single(single, gh >> l, gw >> l),
                _ => crate::mask::build_routing_masks(masks, gh >> l, gw >> l),
            })
            .collect()
    }

    /// Resizes a crop to the encoder's input size.
    pub fn prepare_crop(&self, crop: &Image) -> Image {
        crop.resize(self.config.crop_size, self.config.crop_size)
    }

    /// Normalised centres of the latent cells, row-major.
    fn latent_points(&self) -> Vec<(f64, f64)> {
        let (gh, gw) = self.grid();
        (0..gh)
            .flat_map(|r| (0..gw).map(move |c| ((c as f64 + 0.5) / gw as f64, (r as f64 + 0.5) / gh as f64)))
            .collect()
    }

    /// Normalised image positions of the crop-patch centres inside `bbox`.
    fn crop_points(&self, bbox: &BBox) -> Vec<(f64, f64)> {
        let g = self.config.crop_size / self.config.crop_patch;
        let (bw, bh) = (bbox.width() as f64, bbox.height() as f64);
        (0..g)
            .flat_map(|r| {
                (0..g).map(move |c| {
                    let x = bbox.x0() as f64 + (c as f64 + 0.5) / g as f64 * bw;
                    let y = bbox.y0() as f64 + (r as f64 + 0.5) / g as f64 * bh;
                    (x / self.width as f64, y / self.height as f64)
                })
            })
            .collect()
    }

    fn placement<'g>(&self, p: &Bound<'g>, points: &[(f64, f64)]) -> Result<Var<'g>> {
        let g = p[self.place.weight].graph();
        self.place.forward(p, g.constant(placement_features(points)))
    }

    pub fn encode<'g>(&self, p: &Bound<'g>, spec: &CodeSpec) -> Result<Var<'g>> {
        let (image, bbox, views) = match spec {
            CodeSpec::Null => return Ok(p[self.null_code]),
            CodeSpec::Crop { image, bbox, views } => (image, bbox, views),
        };
        let code = match (&self.fuser, views) {
            (Some(fuser), Some((seed, perm))) => {
                let set = synth_multiview(image, perm.len(), *seed)?;
                let codes = set
                    .views
                    .iter()
                    .map(|v| self.encoder.encode(p, v))
                    .collect::<Result<Vec<_>>>()?;
                fuser.fuse(p, &codes, perm)?
            }
            (None, _) => self.encoder.encode(p, image)?,
            (Some(_), None) => return Err(invalid("multi-view model needs a view seed and order")),
        };
        // Every view tiles the crop the same way, so token i sits at patch
        // i mod g² of the box.
        let cell = self.crop_points(bbox);
        let n = code.shape()[0];
        let points: Vec<(f64, f64)> = (0..n).map(|i| cell[i % cell.len()]).collect();
        code.add(&self.placement(p, &points)?)
    }

    /// `ε̂(z_t, t | background, codes)` on the token grid.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        z_t: &Tensor,
        background: &Tensor,
        t: usize,
        codes: &[Var<'g>],
        routings: &[RoutingMasks],
    ) -> Result<Prediction<'g>> {
        let (gh, gw) = self.grid();
        let td = self.token_dim();
        let n = gh * gw;
        if z_t.shape() != [n, td] || background.shape() != [n, td] {
            return Err(crate::error::Error::Shape {
                op: "denoiser",
                detail: format!("expected [{n}, {td}] tokens, got {:?} and {:?}", z_t.shape(), background.shape()),
            });
        }
        let mut input = Vec::with_capacity(n * 2 * td);
        for i in 0..n {
            input.extend_from_slice(z_t.row(i));
            input.extend_from_slice(background.row(i));
        }
        let g = p[self.pos].graph();
        let x = g.constant(Tensor::new([n, 2 * td], input)?);
        let temb = self.time_proj.forward(p, g.constant(timestep_embedding(t, self.config.dim)))?;
        let h = self
            .in_proj
            .forward(p, x)?
            .add(&p[self.pos])?
            .add(&self.placement(p, &self.latent_points())?)?
            .add(&temb)?;
        let out = self.stack.forward(p, h, gh, gw, codes, routings, self.config.bg_mode)?;
        let eps = self.head.forward(p, self.out_norm.forward(p, out.features)?)?;
        Ok(Prediction { eps, gates: out.gates })
    }
}

/// Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update. Parameters and moments are rounded to
    /// `f32` afterwards so checkpoints reproduce the state exactly.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(invalid(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let param = store.get_mut(id);
            for (((w, g), m), v) in param.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                let g = g * scale;
                *m = (b1 * *m + (1.0 - b1) * g) as f32 as f64;
                *v = (b2 * *v + (1.0 - b2) * g * g) as f32 as f64;
                *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
            round_to_f32(param);
        }
        Ok(())
    }
}

/// Everything a training run owns.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: Config,
    pub store: ParamStore,
    pub model: Denoiser,
    pub adam: Adam,
    pub step: u64,
}

impl ModelState {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = Denoiser::new(&mut store, &config.model, config.data.width, config.data.height, &mut rng)?;
        for id in store.ids().collect::<Vec<_>>() {
            round_to_f32(store.get_mut(id));
        }
        let adam = Adam::new(&store);
        Ok(Self {
            config: config.clone(),
            store,
            model,
            adam,
            step: 0,
        })
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        self.store.bind(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut all = self.store.clone();
        for (k, (_, name, _)) in self.store.iter().enumerate() {
            all.insert(format!("adam.m.{name}"), self.adam.m[k].clone())?;
            all.insert(format!("adam.v.{name}"), self.adam.v[k].clone())?;
        }
        let meta = json!({
            "step": self.step,
            "adam_t": self.adam.t,
            "config": self.config,
        });
        checkpoint::save(path, &all, &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (all, meta) = checkpoint::load(path)?;
        let config: Config = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut state = ModelState::new(&config)?;
        let fetch = |name: &str| -> Result<Tensor> {
            let id = all
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            Ok(all.get(id).clone())
        };
        let names: Vec<(ParamId, String)> = state.store.iter().map(|(id, n, _)| (id, n.to_owned())).collect();
        for (k, (id, name)) in names.into_iter().enumerate() {
            state
                .store
                .set(id, fetch(&name)?)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            state.adam.m[k] = fetch(&format!("adam.m.{name}"))?;
            state.adam.v[k] = fetch(&format!("adam.v.{name}"))?;
        }
        if all.len() != 3 * state.store.len() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        state.step = meta["step"].as_u64().ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        state.adam.t = meta["adam_t"].as_u64().ok_or_else(|| Error::Checkpoint("missing adam_t".into()))?;
        Ok(state)
    }

    /// Same weights and optimizer state, compared bit for bit.
    pub fn bit_identical(&self, other: &ModelState) -> bool {
        let bits = |ts: &[Tensor]| ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        self.step == other.step
            && self.adam.t == other.adam.t
            && self.store.bit_identical(&other.store)
            && bits(&self.adam.m) == bits(&other.adam.m)
            && bits(&self.adam.v) == bits(&other.adam.v)
    }
}
