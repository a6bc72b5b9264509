#![allow(dead_code)]

use std::collections::BTreeMap;

use sarseg::format::Dataset;
use sarseg::pipeline::{build_dataset, synthesize, BuildConfig};
use sarseg_core::sampling::Split;

/// Four 128 px scenes cut into 64 px patches: two training scenes (8
/// patches), one validation and one pretraining scene.
pub fn small_dataset(seed: u64) -> Dataset {
    let scenes = synthesize(4, 128, seed).unwrap();
    let splits: BTreeMap<String, Split> =
        [("m00", Split::Train), ("m01", Split::Train), ("m02", Split::Val), ("m03", Split::Pretrain)]
            .into_iter()
            .map(|(t, s)| (t.to_string(), s))
            .collect();
    let cfg = BuildConfig { anchors: 4000, seed, splits: Some(splits), ..BuildConfig::default() };
    let ds = build_dataset(&scenes, &cfg).unwrap();
    assert_eq!(ds.split(Split::Train).len(), 8);
    ds
}
