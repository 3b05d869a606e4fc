use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::model::{image_to_tokens, tokens_to_image, CodeSpec, ModelState};
use super::schedule::NoiseSchedule;
use crate::config::SampleConfig;
use crate::data::TrainSample;
use crate::error::{invalid, Result};
use crate::itb::OverlapGateReport;
use crate::mask::{bbox_to_mask, BBox, masked_background, Mask, RoutingMasks};
use crate::raster::{psnr, ssim, Image};
use crate::tensor::{Graph, Tensor};

/// Everything the sampler conditions on, already in model space.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub background: Tensor,
    pub codes: Vec<Tensor>,
    pub routings: Vec<RoutingMasks>,
}

/// `Δs` over the finest token grid at one sampler step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaSMap {
    pub step: usize,
    pub t: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub image: Image,
    pub tokens: Tensor,
    pub delta_s: Vec<DeltaSMap>,
}

/// FNV-1a over the pixel bits, mixed with `seed`.
fn content_seed(image: &Image, seed: u64) -> u64 {
    image
        .data()
        .iter()
        .flat_map(|v| v.to_bits().to_le_bytes())
        .fold(0xcbf2_9ce4_8422_2325 ^ seed, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Object codes for inference: crops are resized and views keep their
/// natural order. Multi-view synthesis is seeded from `seed` and the crop's
/// own pixels, so an object's code does not depend on its position in the
/// list.
pub fn inference_codes(state: &ModelState, crops: &[Image], boxes: &[BBox], seed: u64) -> Result<Vec<Tensor>> {
    if crops.len() != boxes.len() {
        return Err(invalid(format!("{} crops with {} boxes", crops.len(), boxes.len())));
    }
    let model = &state.model;
    let g = Graph::new();
    let p = state.store.bind_frozen(&g);
    crops
        .iter()
        .zip(boxes)
        .map(|(crop, &bbox)| {
            let image = model.prepare_crop(crop);
            let views = model
                .config
                .multiview
                .then(|| (content_seed(&image, seed), (0..model.config.views).collect()));
            let spec = CodeSpec::Crop { image, bbox, views };
            Ok((*model.encode(&p, &spec)?.value()).clone())
        })
        .collect()
}

/// Conditioning for recomposing `sample` with all its objects at once.
pub fn conditioning(state: &ModelState, sample: &TrainSample, seed: u64) -> Result<Conditioning> {
    Ok(Conditioning {
        background: image_to_tokens(&sample.background, state.model.config.latent_patch)?,
        codes: inference_codes(state, &sample.object_crops, &sample.boxes, seed)?,
        routings: state.model.routings(&sample.masks)?,
    })
}

/// Noise prediction plus, when requested, the last block's `Δs` map.
pub fn predict_eps(
    state: &ModelState,
    z_t: &Tensor,
    t: usize,
    background: &Tensor,
    codes: &[Tensor],
    routings: &[RoutingMasks],
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let g = Graph::new();
    let p = state.store.bind_frozen(&g);
    let vars: Vec<_> = codes.iter().map(|c| g.constant(c.clone())).collect();
    let pred = state.model.forward(&p, z_t, background, t, &vars, routings)?;
    let delta_s = pred
        .gates
        .last()
        .and_then(|g| g.as_ref())
        .and_then(|g| OverlapGateReport::from_vars(g).delta_s);
    Ok(((*pred.eps.value()).clone(), delta_s))
}

/// `ε_u + s·(ε_c − ε_u)`. Scale 1 returns `ε_c` and scale 0 returns `ε_u`
/// unchanged, so both endpoints are exact.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u))
}

/// Deterministic (η = 0) update from `ᾱ_t` to `ᾱ_prev`; returns
/// `(x_prev, x̂0)`.
pub fn ddim_step(x: &Tensor, eps: &Tensor, ab: f64, ab_prev: f64, clip: bool) -> Result<(Tensor, Tensor)> {
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0 = x.zip_map(eps, |x, e| {
        let v = (x - sb * e) / sa;
        if clip {
            v.clamp(-1.0, 1.0)
        } else {
            v
        }
    })?;
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let prev = x0.zip_map(eps, |x0, e| pa * x0 + pb * e)?;
    Ok((prev, x0))
}

/// DDIM with classifier-free guidance; the unconditional branch swaps every
/// object code for the learned null code.
pub fn ddim_sample(
    state: &ModelState,
    cond: &Conditioning,
    cfg: &SampleConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<SampleOutput> {
    if !(cfg.cfg_scale >= 0.0) {
        return Err(invalid(format!("guidance scale must be non-negative, got {}", cfg.cfg_scale)));
    }
    let ts = schedule.ddim_timesteps(cfg.steps)?;
    let model = &state.model;
    let (gh, gw) = model.grid();
    let null = state.store.get(model.null_code).clone();
    let null_codes = vec![null; cond.codes.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = gh * gw * model.token_dim();
    let mut x = Tensor::new(
        [gh * gw, model.token_dim()],
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )?;
    let mut delta_s = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let (eps_c, ds) = predict_eps(state, &x, t, &cond.background, &cond.codes, &cond.routings)?;
        if let (true, Some(values)) = (cfg.record_steps.contains(&i), ds) {
            delta_s.push(DeltaSMap {
                step: i,
                t,
                width: gw,
                height: gh,
                values,
            });
        }
        let eps = if cfg.cfg_scale == 1.0 {
            eps_c
        } else {
            let (eps_u, _) = predict_eps(state, &x, t, &cond.background, &null_codes, &cond.routings)?;
            cfg_combine(&eps_u, &eps_c, cfg.cfg_scale)?
        };
        let ab_prev = ts.get(i + 1).map_or(1.0, |&tp| schedule.alpha_bar(tp));
        x = ddim_step(&x, &eps, schedule.alpha_bar(t), ab_prev, cfg.clip_x0)?.0;
    }
    Ok(SampleOutput {
        image: tokens_to_image(&x, model.width, model.height, model.config.latent_patch)?,
        tokens: x,
        delta_s,
    })
}

/// Composites the objects one per turn in `order` (indices into the
/// sample), each turn treating the previous output as the background with
/// the remaining objects' regions erased.
pub fn sequential_baseline(
    state: &ModelState,
    sample: &TrainSample,
    order: &[usize],
    cfg: &SampleConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Image> {
    let m = sample.object_count();
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..m).collect::<Vec<_>>() {
        return Err(invalid(format!("{order:?} is not a permutation of {m} objects")));
    }
    let ps = state.model.config.latent_patch;
    let mut current = sample.background.clone();
    for (k, &obj) in order.iter().enumerate() {
        let mut erase = sample.masks[obj].clone();
        for &later in &order[k + 1..] {
            erase = erase.or(&sample.masks[later])?;
        }
        let cond = Conditioning {
            background: image_to_tokens(&masked_background(&current, &erase)?, ps)?,
            codes: inference_codes(
                state,
                std::slice::from_ref(&sample.object_crops[obj]),
                std::slice::from_ref(&sample.boxes[obj]),
                seed ^ obj as u64,
            )?,
            routings: state.model.routings(std::slice::from_ref(&sample.masks[obj]))?,
        };
        current = ddim_sample(state, &cond, cfg, schedule, seed.wrapping_add(k as u64))?.image;
    }
    Ok(current)
}

/// Cells inside every selected object's box.
pub fn box_intersection_mask(sample: &TrainSample) -> Result<Mask> {
    let mut inter = sample.boxes[0];
    for b in &sample.boxes[1..] {
        inter = inter
            .intersection(b)
            .ok_or_else(|| invalid("selected boxes do not share an intersection"))?;
    }
    bbox_to_mask(&inter, sample.target.width(), sample.target.height())
}

/// Averages over held-out scenes; `m`-prefixed fields are restricted to
/// the intersection of the selected boxes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub scenes: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mpsnr: f64,
    pub mssim: f64,
}

pub fn eval_recomposition(
    state: &ModelState,
    samples: &[TrainSample],
    cfg: &SampleConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<EvalRecord> {
    if samples.is_empty() {
        return Err(invalid("no evaluation scenes"));
    }
    let mut acc = [0.0; 4];
    for (i, s) in samples.iter().enumerate() {
        let scene_seed = seed.wrapping_add(i as u64);
        let out = ddim_sample(state, &conditioning(state, s, scene_seed)?, cfg, schedule, scene_seed)?;
        let region = box_intersection_mask(s)?;
        acc[0] += psnr(&out.image, &s.target, None)?;
        acc[1] += ssim(&out.image, &s.target, None)?;
        acc[2] += psnr(&out.image, &s.target, Some(&region))?;
        acc[3] += ssim(&out.image, &s.target, Some(&region))?;
    }
    let n = samples.len() as f64;
    Ok(EvalRecord {
        scenes: samples.len(),
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        mpsnr: acc[2] / n,
        mssim: acc[3] / n,
    })
}
