#![allow(dead_code)]

use kgpath_core::encoder::HashingProvider;
use kgpath_core::numerics::ParamStore;
use kgpath_core::pipeline::Pipeline;
use kgpath_core::synth::SyntheticData;

pub fn pipeline_for(data: &SyntheticData, embed_dim: usize, seed: u64) -> Pipeline {
    Pipeline::new(
        data.graph(),
        &data.train,
        Box::new(HashingProvider::new(embed_dim, seed)),
    )
    .unwrap()
}

/// Parameter values as raw bits, in store order.
pub fn param_bits(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .map(|(_, p)| {
            (
                p.name.clone(),
                p.value.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}
