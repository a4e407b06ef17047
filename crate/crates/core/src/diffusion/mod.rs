//! Discrete-time conditional diffusion: schedule, forward process,
//! noise-prediction network, loss and ancestral sampler.

mod loss;
mod model;
mod sampler;
mod schedule;

pub use loss::{
    diffusion_loss, diffusion_loss_grad, diffusion_loss_on, diffusion_loss_value, mean_sq_error,
    Batch, NoiseDraws,
};
pub use model::{
    time_embedding, Activation, Conditioning, Denoiser, DenoiserParams, ModelConfig, ParamLayout,
    Segment, SegmentGroup, B_HEAD, B_IN, B_MID, B_TIME, MAX_PARAMS, W_HEAD, W_IN, W_K, W_MID, W_O,
    W_Q, W_TIME, W_V,
};
pub use sampler::{reverse_step, sample};
pub use schedule::{forward_diffuse, NoiseSchedule, ScheduleConfig};
