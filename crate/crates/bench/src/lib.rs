//! Shared fixtures for the benchmarks.

use consac::data::{generate_homography_scene, generate_line_scene, SynthHomographyConfig, SynthLineConfig};
use consac::Scene;

pub fn line_scene(seed: u64) -> Scene {
    generate_line_scene(&SynthLineConfig::default(), seed).expect("default config is valid")
}

pub fn homography_scene(seed: u64) -> Scene {
    generate_homography_scene(&SynthHomographyConfig::default(), seed).expect("default config is valid")
}
