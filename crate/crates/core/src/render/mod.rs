//! Rays, sample placement, volume compositing and image output.

pub mod camera;
pub mod composite;
pub mod frame;
pub mod image;
pub mod proposal;
pub mod sampling;

pub use camera::{Aabb, PinholeCamera, Ray};
pub use composite::{
    composite, composite_weights, dynamic_weight, render_dynamic_weight, render_uncertainty, weighted_color,
    weighted_sum, weights_backward, Weights,
};
pub use frame::{
    render_frame, render_video_full, render_video_incremental, IncrementalOptions, IncrementalVideo, RayField,
    RayOutput, RenderedFrame,
};
pub use image::Image;
pub use proposal::{ProposalConfig, ProposalEval, ProposalField, ProposalGrads};
pub use sampling::{proposal_resample, resample_edges, stratified_samples, uniform_edges, RESAMPLE_FLOOR};
