//! Shared inputs for the criterion benchmarks.

use rtda_core::data::{generate_synthetic, SyntheticSpec};
use rtda_core::{build_model, Model, ModelConfig, ParameterSet, Tensor};

/// The default model and a batch of `batch` benchmark images with labels.
pub fn fixture(batch: usize) -> (Model, ParameterSet, Tensor, Vec<usize>) {
    let (model, params) = build_model(&ModelConfig::default()).expect("default model");
    let ds = generate_synthetic(&SyntheticSpec {
        samples_per_class: batch.div_ceil(2),
        ..Default::default()
    })
    .expect("default generator");
    let idx: Vec<usize> = (0..batch).collect();
    let (x, y) = ds.batch(&idx).expect("batch in range");
    (model, params, x, y)
}
