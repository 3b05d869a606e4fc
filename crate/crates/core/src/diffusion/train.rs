use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::{image_to_tokens, CodeSpec, Denoiser, ModelState};
use super::schedule::NoiseSchedule;
use crate::data::TrainSample;
use crate::error::{invalid, Error, Result};
use crate::mask::{BBox, RoutingMasks};
use crate::raster::Image;
use crate::shape_prior::{random_permutation, rotate_augment, sample_rotation};
use crate::tensor::{Bound, Graph, Tensor, Var};

/// A training sample converted to the model's working representation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub x0: Tensor,
    pub background: Tensor,
    /// Crops resized to the encoder input, with their visible masks.
    pub crops: Vec<(Image, crate::mask::Mask)>,
    pub boxes: Vec<BBox>,
    pub routings: Vec<RoutingMasks>,
}

pub fn prepare(model: &Denoiser, sample: &TrainSample) -> Result<Prepared> {
    let ps = model.config.latent_patch;
    let crops = sample
        .object_crops
        .iter()
        .zip(&sample.visible)
        .zip(&sample.boxes)
        .map(|((crop, vis), b)| {
            let m = vis.as_image().crop(b)?;
            let size = model.config.crop_size;
            let m = m.resize(size, size);
            let m = crate::mask::Mask::new(size, size, m.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect())?;
            Ok((model.prepare_crop(crop), m))
        })
        .collect::<Result<_>>()?;
    Ok(Prepared {
        x0: image_to_tokens(&sample.target, ps)?,
        background: image_to_tokens(&sample.background, ps)?,
        crops,
        boxes: sample.boxes.clone(),
        routings: model.routings(&sample.masks)?,
    })
}

/// One fully specified loss term: every random choice already drawn.
#[derive(Clone, Debug)]
pub struct LossItem {
    pub x0: Tensor,
    pub background: Tensor,
    pub codes: Vec<CodeSpec>,
    pub routings: Vec<RoutingMasks>,
    pub t: usize,
    pub eps: Tensor,
}

fn normal_like<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("finite draws")
}

fn view_spec<R: Rng + ?Sized>(model: &Denoiser, rng: &mut R, shuffle: bool) -> Option<(u64, Vec<usize>)> {
    model.config.multiview.then(|| {
        let k = model.config.views;
        let seed = rng.random();
        let perm = if shuffle { random_permutation(k, rng) } else { (0..k).collect() };
        (seed, perm)
    })
}

/// Draws the randomness of one training example.
pub fn draw_item<R: Rng + ?Sized>(
    state: &ModelState,
    sample: &Prepared,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossItem> {
    let tc = &state.config.train;
    let model = &state.model;
    let m = sample.crops.len();
    let order: Vec<usize> = if tc.shuffle_objects { random_permutation(m, rng) } else { (0..m).collect() };
    let uncond = rng.random::<f64>() < tc.p_uncond;
    let mut codes = Vec::with_capacity(m);
    for &k in &order {
        let (crop, mask) = &sample.crops[k];
        let image = if rng.random::<f64>() < tc.rotate_prob {
            rotate_augment(crop, mask, sample_rotation(rng))?.0
        } else {
            crop.clone()
        };
        let views = view_spec(model, rng, true);
        codes.push(if uncond {
            CodeSpec::Null
        } else {
            CodeSpec::Crop {
                image,
                bbox: sample.boxes[k],
                views,
            }
        });
    }
    let t = rng.random_range(1..=schedule.steps());
    let eps = normal_like(sample.x0.shape(), rng);
    Ok(LossItem {
        x0: sample.x0.clone(),
        background: sample.background.clone(),
        codes,
        routings: sample.routings.iter().map(|r| r.permuted(&order)).collect(),
        t,
        eps,
    })
}

/// Deterministic, augmentation-free draw for loss monitoring.
pub fn draw_eval_item<R: Rng + ?Sized>(
    model: &Denoiser,
    sample: &Prepared,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> LossItem {
    let codes = sample
        .crops
        .iter()
        .zip(&sample.boxes)
        .map(|((crop, _), &bbox)| CodeSpec::Crop {
            image: crop.clone(),
            bbox,
            views: view_spec(model, rng, false),
        })
        .collect();
    let t = rng.random_range(1..=schedule.steps());
    LossItem {
        x0: sample.x0.clone(),
        background: sample.background.clone(),
        codes,
        routings: sample.routings.clone(),
        t,
        eps: normal_like(sample.x0.shape(), rng),
    }
}

/// Mean over items of the per-element squared error between predicted and
/// true noise.
pub fn batch_loss<'g>(
    model: &Denoiser,
    p: &Bound<'g>,
    schedule: &NoiseSchedule,
    items: &[LossItem],
) -> Result<Var<'g>> {
    if items.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut total: Option<Var<'g>> = None;
    for item in items {
        let codes = item
            .codes
            .iter()
            .map(|c| model.encode(p, c))
            .collect::<Result<Vec<_>>>()?;
        let z_t = schedule.q_sample(&item.x0, item.t, &item.eps)?;
        let pred = model.forward(p, &z_t, &item.background, item.t, &codes, &item.routings)?;
        let diff = pred.eps.sub(&p[model.null_code].graph().constant(item.eps.clone()))?;
        let loss = diff.mul(&diff)?.mean()?;
        total = Some(match total {
            Some(t) => t.add(&loss)?,
            None => loss,
        });
    }
    total.expect("non-empty batch").scale(1.0 / items.len() as f64)
}

/// One optimizer step on `batch`; returns the batch loss before the update.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut ModelState,
    batch: &[&Prepared],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let items = batch
        .iter()
        .map(|s| draw_item(state, s, schedule, rng))
        .collect::<Result<Vec<_>>>()?;
    let g = Graph::new();
    let p = state.store.bind(&g);
    let loss = match batch_loss(&state.model, &p, schedule, &items) {
        Ok(l) => l,
        Err(Error::NonFinite(op)) => {
            log::error!("non-finite value from {op} at step {}", state.step);
            return Err(Error::Diverged {
                step: state.step,
                loss: f64::NAN,
            });
        }
        Err(e) => return Err(e),
    };
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::Diverged { step: state.step, loss: value });
    }
    let grads = g.backward(loss)?;
    let grads = p.collect(&grads);
    drop(p);
    state.adam.step(&mut state.store, &grads, &state.config.train)?;
    state.step += 1;
    Ok(value)
}

/// Loss on a fixed batch with noise drawn from `seed`, without updating.
pub fn evaluate_loss(state: &ModelState, batch: &[&Prepared], schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<LossItem> = batch
        .iter()
        .map(|s| draw_eval_item(&state.model, s, schedule, &mut rng))
        .collect();
    let g = Graph::new();
    let p = state.store.bind_frozen(&g);
    Ok(batch_loss(&state.model, &p, schedule, &items)?.value().item())
}

/// Summary of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

/// Number of corpus samples in the fixed monitoring set.
pub const MONITOR_SAMPLES: usize = 32;

/// `steps` optimizer steps with minibatches drawn from `corpus`; the
/// monitored loss is evaluated on the first [`MONITOR_SAMPLES`] samples
/// with fixed noise before and after.
pub fn train(state: &mut ModelState, corpus: &[Prepared], steps: usize, seed: u64) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(invalid("empty training corpus"));
    }
    let schedule = NoiseSchedule::from_config(&state.config.schedule)?;
    let bs = state.config.train.batch;
    let monitor: Vec<&Prepared> = corpus.iter().take(MONITOR_SAMPLES).collect();
    let eval_seed = seed ^ 0x5eed_0f_e7a1;
    let initial_eval = evaluate_loss(state, &monitor, &schedule, eval_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(steps);
    let log_every = state.config.train.log_every.max(1);
    for step in 0..steps {
        let batch: Vec<&Prepared> = (0..bs).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect();
        let loss = train_step(state, &batch, &schedule, &mut rng)?;
        if step % log_every == 0 || step + 1 == steps {
            log::info!("step {:>5}  loss {loss:.5}", state.step);
        }
        losses.push(loss);
    }
    let final_eval = evaluate_loss(state, &monitor, &schedule, eval_seed)?;
    Ok(TrainReport {
        losses,
        initial_eval,
        final_eval,
    })
}
