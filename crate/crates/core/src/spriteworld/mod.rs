//! Procedural talking-sprite clips, the aperture oracle and lip-region masking.

mod clip;
mod dataset;
mod image;
mod render;

pub use clip::{
    aperture_trace, generate_clip, generate_clip_with_trace, group_means, pose_walk, render_clip, Clip, ClipParams,
    SAMPLES_PER_FRAME,
};
pub use dataset::{
    clip_seed, encode_png, generate_dataset, read_clip_dir, read_dataset, write_dataset, write_generated_dataset,
    Manifest, MANIFEST_FILE,
};
pub use image::{luma, Image, CHANNELS, IMAGE_SIZE};
pub use render::{
    mask_lower_half, measure_aperture, render_frame, IdentityParams, PoseParams, BACKGROUND, EYE_COLOR, MOUTH_COLOR,
};
