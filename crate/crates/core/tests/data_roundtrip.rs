//! Saving and reloading datasets through the manifest format.

use std::fs;

use rgi::data::{self, GraphDataset, Labels, SbmConfig};
use rgi::Tensor;

fn sbm() -> GraphDataset {
    data::generate_sbm(&SbmConfig {
        num_blocks: 2,
        nodes_per_block: 12,
        p_in: 0.4,
        p_out: 0.05,
        feature_dim: 6,
        signal: 1.0,
        noise_sigma: 0.5,
        seed: 2,
    })
    .unwrap()
}

#[test]
fn multiclass_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = sbm();
    let manifest = data::save_dataset(&ds, dir.path()).unwrap();
    let back = data::load_manifest(&manifest).unwrap();
    assert_eq!(back.graph, ds.graph);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.features, ds.features);
}

#[test]
fn multilabel_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = sbm();
    let y = Tensor::from_fn(ds.num_nodes(), 4, |i, j| f64::from(u8::from((i + j) % 3 == 0)));
    let ds = GraphDataset { labels: Labels::Multilabel(y), ..ds };
    let back = data::load_manifest(&data::save_dataset(&ds, dir.path()).unwrap()).unwrap();
    assert_eq!(back.labels, ds.labels);
}

#[test]
fn generation_is_a_pure_function_of_the_config() {
    let (a, b) = (sbm(), sbm());
    assert_eq!(a.graph, b.graph);
    assert_eq!(a.features, b.features);
}

#[test]
fn short_feature_file_is_a_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let ds = sbm();
    let manifest = data::save_dataset(&ds, dir.path()).unwrap();
    let m = data::Manifest::read(&manifest).unwrap();
    let [_, features, _] = m.resolved_paths(&manifest);
    let text = fs::read_to_string(&features).unwrap();
    let truncated: Vec<&str> = text.lines().take(ds.num_nodes() - 1).collect();
    fs::write(&features, truncated.join("\n")).unwrap();
    let err = data::load_manifest(&manifest).unwrap_err();
    assert!(matches!(err, rgi::Error::CountMismatch(_)), "{err}");
}
