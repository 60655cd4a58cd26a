//! Toy-scale differentiable branch network: shared base layers with
//! branch taps, per-branch class-score heads, the probabilistic
//! averaging of the fine prediction, weighted per-branch losses and a
//! two-phase weight schedule, all with hand-written gradients.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod tensor;
pub mod train;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use layers::{Layer, LayerSpec};
pub use net::{
    coarse_loss, fine_loss, prob_average, BranchOutputs, FineLossMode, VtNet, VtNetConfig,
};
pub use tensor::Tensor;
pub use train::{evaluate, metrics_to_csv, train, LrSchedule, MetricRow, TrainPhase};
