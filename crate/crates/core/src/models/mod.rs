//! Networks for the fields, time functions, conformal factors and interpolant.

pub mod checkpoint;
pub mod frame;
pub mod mlp;

pub use frame::{
    init_frame_model, BoundFrame, FieldValues, FrameArchitecture, FrameConfig, FrameModel,
};
pub use mlp::{Activation, BoundMlp, Head, Init, Mlp, MlpSpec};
