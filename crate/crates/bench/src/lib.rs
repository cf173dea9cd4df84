//! Fixtures shared by the benchmarks.

use wsss_core::annotation::{synth_scene, synth_scribbles, SceneSpec};
use wsss_core::autodiff::Tensor;
use wsss_core::{Image, LabelMask};

/// Deterministic tensor with values in `[-1, 1]`.
pub fn wave_tensor(shape: &[usize], phase: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|i| (i as f64 * 0.618 + phase).sin()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Synthetic scene with its full mask and width-`width` scribbles.
pub fn scene(side: usize, classes: usize, width: usize, seed: u64) -> (Image, LabelMask, LabelMask) {
    let (image, full) = synth_scene(&SceneSpec::new(side, side, classes), seed).expect("valid scene spec");
    let scribbles = synth_scribbles(&full, width, seed).expect("scribbles fit");
    (image, full, scribbles)
}
