mod common;

use common::*;
use nfr::flow::{FlowArch, LatentState};
use nfr::training::*;

#[test]
fn default_recipe_learns_and_stores_a_consistent_reference() {
    let ck = default_fixture();
    assert_eq!(ck.curve.len(), 30);
    let first = ck.curve[0].nats;
    let last = ck.curve.last().unwrap().nats;
    assert!(last < first, "final NLL {last} not below first-epoch NLL {first}");
    let data = build_dataset(FlowArch::default().dims, &TrainConfig::default()).unwrap();
    let reference = compute_reference(&data, &ck.flow).unwrap();
    assert!((reference.c - ck.c).abs() <= 1e-9 * ck.c.abs().max(1.0), "{} vs {}", reference.c, ck.c);
}

#[test]
fn samples_look_like_phantoms() {
    let ck = default_fixture();
    let mut r = rng(77);
    let mut inside = 0usize;
    let mut total = 0usize;
    for _ in 0..8 {
        let z = LatentState::sample(&ck.flow.arch, 1.0, &mut r);
        let x = ck.flow.generate(&z).unwrap();
        inside += x.data().iter().filter(|v| (-0.1..=1.1).contains(*v)).count();
        total += x.len();
    }
    let frac = inside as f64 / total as f64;
    assert!(frac > 0.9, "only {frac} of sampled voxels in [-0.1, 1.1]");
}

#[test]
fn checkpoint_file_round_trip_reproduces_reference() {
    let ck = default_fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.nfck");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.flow.params_flat(), ck.flow.params_flat());
    assert_eq!(back.c.to_bits(), ck.c.to_bits());
    let x =
        build_dataset(FlowArch::default().dims, &TrainConfig { dataset_size: 1, ..TrainConfig::default() }).unwrap();
    assert_eq!(back.flow.neg_log_density(&x[0]).unwrap(), ck.flow.neg_log_density(&x[0]).unwrap());
}

#[test]
fn cropped_datasets_have_flow_dims() {
    let cfg = TrainConfig { dataset_size: 3, source_dims: Some([24, 20, 16]), ..TrainConfig::default() };
    let data = build_dataset([16, 16, 16], &cfg).unwrap();
    assert_eq!(data.len(), 3);
    assert!(data.iter().all(|v| v.dims() == [16, 16, 16]));
    assert_eq!(data, build_dataset([16, 16, 16], &cfg).unwrap());
    let bad = TrainConfig { source_dims: Some([8, 32, 32]), ..cfg };
    assert!(build_dataset([16, 16, 16], &bad).is_err());
}
