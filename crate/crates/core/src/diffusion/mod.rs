//! Denoising diffusion around the interaction-block stack: noise schedule,
//! ε-prediction training, guided DDIM sampling, a one-object-per-turn
//! baseline, and recomposition metrics.

pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use model::{Adam, CodeSpec, Denoiser, ModelState};
pub use sample::{
    cfg_combine, ddim_sample, ddim_step, eval_recomposition, sequential_baseline, Conditioning, DeltaSMap,
    EvalRecord, SampleOutput,
};
pub use schedule::NoiseSchedule;
pub use train::{evaluate_loss, prepare, train, train_step, Prepared, TrainReport};
