//! Fixtures shared by the step benchmarks.

use rgd_core::datagen::{gaussian_mixture_classification, seeded_rng};
use rgd_core::{Batch, Dataset, ModelSpec, ModelState, OptimizerState, TrainConfig, WeightingRule};
use rand::Rng;

pub const BATCH: usize = 64;

/// A 32-feature, 10-class mixture and a 32-64-64-10 tanh MLP.
pub struct MlpFixture {
    pub data: Dataset,
    pub state: OptimizerState,
    pub config: TrainConfig,
    pub rule: WeightingRule,
    pub batches: Vec<Batch>,
}

impl MlpFixture {
    pub fn new(batches: usize) -> Self {
        let data = gaussian_mixture_classification(10, 200, 32, 2.0, 9).expect("valid mixture");
        let model = ModelState::init(ModelSpec::mlp(32, vec![64, 64], 10), 0).expect("valid spec");
        let config = TrainConfig::sgd(0.05, usize::MAX, BATCH, 0);
        let mut rng = seeded_rng(9, 1);
        let batches = (0..batches)
            .map(|_| {
                let idx: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..data.len())).collect();
                data.batch(&idx).expect("indices in range")
            })
            .collect();
        Self {
            state: OptimizerState::for_config(model, &config),
            data,
            config,
            rule: WeightingRule::kl(1.0).expect("positive tau"),
            batches,
        }
    }
}
