//! Synthetic blurry multi-view datasets from analytic scenes.

mod dataset;
mod degrade;
mod scene;

pub use dataset::{
    format_pose, generate_dataset, orbit_camera, parse_key_values, read_dataset, read_intrinsics, read_poses,
    view_rig, write_dataset, write_poses, BlurKind, Dataset, DatasetMeta, SynthConfig,
};
pub use degrade::{
    axis_angle, synth_defocus_blur, synth_motion_blur, DefocusBlurSpec, DefocusRange, MotionBlurSpec, MotionRange,
};
pub use scene::{render_reference, AnalyticScene, Blob, SCENE_NAMES};
