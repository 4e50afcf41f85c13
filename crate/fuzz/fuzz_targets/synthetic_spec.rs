#![no_main]

//! Generator settings as read by `prepare-data --synthetic`. Sizes are
//! capped so the fuzzer spends its time on the decoder, not on big graphs.

use libfuzzer_sys::fuzz_target;
use opencil::dataset::{synthetic_graph, SyntheticSpec};

fuzz_target!(|text: &str| {
    let Ok(spec) = toml::from_str::<SyntheticSpec>(text) else {
        return;
    };
    let nodes = spec.classes.saturating_mul(spec.nodes_per_class);
    let edges = nodes.saturating_mul(spec.intra_edges.saturating_add(spec.inter_edges));
    if nodes <= 2000 && spec.feature_dim <= 64 && edges <= 20_000 {
        let _ = synthetic_graph(&spec);
    }
});
