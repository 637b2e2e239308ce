//! Shared fixtures for the criterion benchmarks.

use flowtrack_core::model::ModelConfig;
use flowtrack_core::pipeline::RunConfig;
use flowtrack_core::synth_bench::{
    build_sample, gen_sequence, SampleSpec, SynthConfig, SynthSequence, TrainingSample,
};
use flowtrack_core::{ParamStore, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` matrix, deterministic in `seed`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// A toy model of `variant` with initial parameters, one synthetic sequence
/// and a training sample cut from it.
pub struct ToyFixture {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub run: RunConfig,
    pub sequence: SynthSequence,
    pub sample: TrainingSample,
}

impl ToyFixture {
    pub fn new(variant: Variant) -> Self {
        let model = ModelConfig::toy(variant);
        let params = model.init_params(0).expect("toy config is valid");
        let run = RunConfig::default();
        let sequence = gen_sequence(&SynthConfig {
            seed: 5,
            length: 12,
            ..SynthConfig::default()
        })
        .expect("default synth config is valid");
        let spec = SampleSpec {
            sequence: 0,
            frame: 6,
            dynamic_frame: 3,
            shift: (0.2, -0.1),
            log_scale: 0.0,
            flip: false,
        };
        let sample =
            build_sample(&model, &run, &sequence, &spec).expect("sample fits the sequence");
        Self {
            model,
            params,
            run,
            sequence,
            sample,
        }
    }
}
