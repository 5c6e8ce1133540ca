//! Fixtures shared by the engine benchmarks.

use curvmatch::{data, EncodedDataset, FairModel, SynthSpec, TrainConfig};

/// Default-width model and the synthetic training split with `d` features.
pub fn fixture(n: usize, d: usize) -> (FairModel, EncodedDataset) {
    let synth = data::synth_biased(&SynthSpec::new(n, d, 0.7, 0.5, 1)).expect("valid generator spec");
    let model = FairModel::init(TrainConfig::default().mlp_spec(d)).expect("valid model spec");
    (model, synth.train)
}
