pub mod adamw;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod pointnet;
pub mod policy;

pub use adamw::{AdamWConfig, AdamWState};
pub use checkpoint::Checkpoint;
pub use mlp::{Mlp, MlpCache, MlpSpec, OutputActivation};
pub use params::{Dense, ParamBuilder, PolicyParams, Precision, TensorDesc};
pub use pointnet::{PointEncoder, PointEncoderCache, PointEncoderSpec};
pub use policy::{
    gaussian_entropy, gaussian_log_prob, ActorCritic, ActorCriticCache, ActorCriticSpec,
    RunningNorm, StudentCache, StudentPolicy, StudentSpec,
};
