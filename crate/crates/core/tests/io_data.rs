mod common;

use aurel_core::data::{generate, sample_labels, Dataset, LabelTable, SyntheticSpec};
use aurel_core::io::{decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, load_tensor, save_tensor};
use aurel_core::params::ParamStore;
use aurel_core::tensor::Tensor;
use aurel_core::Error;
use common::*;
use proptest::prelude::*;

fn pair_spec(coupling: f64, persistence: f64, videos: usize, frames: usize) -> SyntheticSpec {
    SyntheticSpec {
        m: 2,
        videos,
        frames,
        image_size: 8,
        cooccurrence: vec![vec![1.0, coupling], vec![coupling, 1.0]],
        persistence: vec![persistence; 2],
        centers: vec![[2.0, 2.0], [5.0, 5.0]],
        radius: vec![2.0; 2],
        noise: 0.1,
        amplitude: 1.0,
        seed: 4,
    }
}

fn label_matrix(seqs: &[Vec<Vec<bool>>], m: usize) -> T64 {
    let data: Vec<f64> = seqs.iter().flatten().flat_map(|row| row.iter().map(|&b| b as u8 as f64)).collect();
    Tensor::new(&[data.len() / m, m], data).unwrap()
}

fn pair_pcc(coupling: f64) -> f64 {
    let spec = pair_spec(coupling, 0.9, 10, 1000);
    let seqs = sample_labels(&spec, &mut rng(17));
    pcc_oracle(&label_matrix(&seqs, 2))[0][1]
}

#[test]
fn uncoupled_chains_are_uncorrelated() {
    let r = pair_pcc(0.0);
    assert!(r.abs() < 0.1, "{r}");
}

#[test]
fn coupling_sets_the_sign_of_correlation() {
    let pos = pair_pcc(0.8);
    let neg = pair_pcc(-0.8);
    assert!(pos >= 0.5, "{pos}");
    assert!(neg <= -0.5, "{neg}");
}

#[test]
fn flip_rate_follows_persistence() {
    let spec = pair_spec(0.0, 0.8, 10, 1000);
    let seqs = sample_labels(&spec, &mut rng(2));
    let (mut flips, mut steps) = (0usize, 0usize);
    for v in &seqs {
        for w in v.windows(2) {
            flips += (w[0][0] != w[1][0]) as usize;
            steps += 1;
        }
    }
    let rate = flips as f64 / steps as f64;
    assert!((rate - 0.2).abs() < 0.02, "{rate}");
}

#[test]
fn tensor_files_round_trip_in_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let t = uniform(&[2, 3, 4], -5.0, 5.0, &mut rng(1));
    let p = dir.path().join("a.stnt");
    save_tensor(&p, &t).unwrap();
    assert_eq!(load_tensor::<f64>(&p).unwrap(), t);
    let t32: Tensor<f32> = t.cast();
    save_tensor(&p, &t32).unwrap();
    assert_eq!(load_tensor::<f32>(&p).unwrap(), t32);
    let widened: Tensor<f64> = load_tensor(&p).unwrap();
    assert_eq!(widened, t32.cast::<f64>());
}

#[test]
fn every_truncation_is_a_format_error_with_offset() {
    let t = uniform(&[3, 2], -1.0, 1.0, &mut rng(2));
    let bytes = encode_tensor(&t);
    for cut in 0..bytes.len() {
        match decode_tensor::<f64>(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut, "cut {cut}: offset {offset}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_tensor::<f64>(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes;
    bad[5] = 0x07;
    assert!(matches!(decode_tensor::<f64>(&bad), Err(Error::Format { offset: 5, .. })));
}

#[test]
fn checkpoints_round_trip_in_order_and_reject_trailing_bytes() {
    let mut store = ParamStore::new();
    let mut r = rng(3);
    for name in ["z.last", "a.first", "m.middle"] {
        store.insert(name.to_string(), uniform(&[2, 2], -1.0, 1.0, &mut r)).unwrap();
    }
    let bytes = encode_checkpoint(&store);
    let back: ParamStore<f64> = decode_checkpoint(&bytes).unwrap();
    let names: Vec<_> = back.iter().map(|(n, _)| n.to_string()).collect();
    assert_eq!(names, ["z.last", "a.first", "m.middle"]);
    assert_eq!(encode_checkpoint(&back), bytes);
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint::<f64>(&long), Err(Error::Format { offset, .. }) if offset as usize == bytes.len()));
}

#[test]
fn dataset_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&pair_spec(0.5, 0.9, 3, 5)).unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::<f64>::load(dir.path()).unwrap();
    assert_eq!(back.videos, ds.videos);
    assert_eq!(back.m, 2);
}

#[test]
fn missing_label_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("labels.csv");
    std::fs::write(&p, "video_id,frame_idx,au_1,au_3\nv,0,1,0\n").unwrap();
    let err = LabelTable::<f64>::read(&p).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("au_2"), "{err}");
    std::fs::write(&p, "frame_idx,au_1\n0,1\n").unwrap();
    assert!(LabelTable::<f64>::read(&p).unwrap_err().to_string().contains("video_id"));
}

#[test]
fn non_binary_labels_and_gaps_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("labels.csv");
    std::fs::write(&p, "video_id,frame_idx,au_1\nv,0,1\nv,1,0.5\n").unwrap();
    let err = LabelTable::<f64>::read(&p).unwrap_err();
    assert!(matches!(err, Error::Format { offset, .. } if offset > 0), "{err}");
    std::fs::write(&p, "video_id,frame_idx,au_1\nv,0,1\nv,2,0\n").unwrap();
    assert!(LabelTable::<f64>::read(&p).unwrap().by_video().is_err());
}

#[test]
fn generation_is_seed_deterministic() {
    let spec = pair_spec(0.3, 0.9, 2, 4);
    assert_eq!(generate(&spec).unwrap().videos, generate(&spec).unwrap().videos);
    let other = SyntheticSpec { seed: 5, ..spec.clone() };
    assert_ne!(generate(&other).unwrap().videos, generate(&spec).unwrap().videos);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_bytes_round_trip(seed in any::<u64>(), dims in proptest::collection::vec(1usize..5, 0..4)) {
        let t = uniform(&dims, -1e3, 1e3, &mut rng(seed));
        let bytes = encode_tensor(&t);
        prop_assert_eq!(bytes.len(), 10 + 4 * dims.len() + 8 * t.len());
        prop_assert_eq!(decode_tensor::<f64>(&bytes).unwrap(), t);
    }
}
