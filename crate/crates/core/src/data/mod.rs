//! Dataset schema, file formats, stereo geometry and the procedural scene
//! generator.

pub mod block_match;
pub mod generator;
pub mod geometry;
pub mod pfm;
pub mod sample;

pub use block_match::block_match;
pub use generator::{generate_toy_scene, ToySceneSpec};
pub use geometry::{
    depth_to_disparity, disparity_map_to_depth, disparity_to_depth, export_pointcloud, CameraRig, PointCloud,
};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use sample::{
    load_sample, save_sample, DatasetManifest, ManifestEntry, ObjectPose, ObjectShape, SceneMeta, Split,
    StereoSample,
};
