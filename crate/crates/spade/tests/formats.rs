use std::fs;

use proptest::prelude::*;
use spade::bank_io::{load_bank, save_bank, EMBEDDINGS, MANIFEST};
use spade::models::{load_cluster_model, load_expert, load_head, save_cluster_model, save_expert, save_head, HeadFile, Task};
use spade::tensor::{read_tensor, write_tensor, Tensor};
use spade::SpadeError;
use spade_core::clustering::{coarse_cluster, fine_cluster, KmeansParams};
use spade_core::corpus::{ExpressionKind, PairedSpotBank, SpotRecord};
use spade_core::experts::{ExpertDims, ExpertModel};
use spade_core::mil::{AbmilArch, AbmilModel, SurvivalSpec};
use spade_core::rng::rng_from;
use spade_core::synth::{generate, SynthConfig};

fn small_bank(values: &[f32], n: usize, m: usize, g: usize) -> PairedSpotBank {
    let records = (0..n)
        .map(|i| SpotRecord {
            id: 100 + i as u64,
            slide_id: format!("s{}", i % 3),
            patient_id: format!("p{}", i % 2),
            organ: if i % 3 == 0 { "lung".into() } else { "liver".into() },
            spot_xy: (i as f64 * 0.5, -(i as f64)),
        })
        .collect();
    PairedSpotBank::new(
        records,
        m,
        g,
        (0..g).map(|j| format!("gene{j}")).collect(),
        vec!["liver".into(), "lung".into()],
        "unit test".into(),
        ExpressionKind::Normalized,
        (0..n * m).map(|i| values[i % values.len()]).collect(),
        (0..n * g).map(|i| values[(i * 7) % values.len()].abs()).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bank_round_trip_is_bit_exact(
        values in prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO, 1..50),
        n in 1usize..12, m in 1usize..6, g in 0usize..5,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let bank = small_bank(&values, n, m, g);
        save_bank(&bank, dir.path()).unwrap();
        let back = load_bank(dir.path()).unwrap();
        prop_assert_eq!(back.records, bank.records.clone());
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.embeddings), bits(&bank.embeddings));
        prop_assert_eq!(bits(&back.expression), bits(&bank.expression));
        prop_assert_eq!(back.gene_names, bank.gene_names);
    }
}

#[test]
fn header_dimension_disagreement_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    save_bank(&small_bank(&[1.0, 2.0], 4, 3, 2), dir.path()).unwrap();
    write_tensor(&dir.path().join(EMBEDDINGS), &Tensor::new(4, 2, vec![0.0; 8])).unwrap();
    let err = load_bank(dir.path()).unwrap_err();
    assert_eq!(err.kind(), "DimMismatch", "{err}");
}

#[test]
fn non_finite_embedding_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_bank(&small_bank(&[1.0, 2.0], 4, 3, 2), dir.path()).unwrap();
    let mut data = vec![0.5; 12];
    data[7] = f32::NAN;
    write_tensor(&dir.path().join(EMBEDDINGS), &Tensor::new(4, 3, data)).unwrap();
    let err = load_bank(dir.path()).unwrap_err();
    assert!(matches!(err.kind(), "NonFiniteValue" | "MalformedManifest"), "{err}");
    assert!(err.to_string().to_lowercase().contains("finite") || err.to_string().contains("NaN"), "{err}");
}

#[test]
fn manifest_problems_are_malformed_manifest() {
    let dir = tempfile::tempdir().unwrap();
    save_bank(&small_bank(&[1.0], 3, 2, 1), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&path).unwrap();

    fs::write(&path, text.replace("\"row\": 2", "\"row\": 9")).unwrap();
    assert_eq!(load_bank(dir.path()).unwrap_err().kind(), "MalformedManifest");

    fs::write(&path, text.replace("\"row\": 2", "\"row\": 1")).unwrap();
    assert_eq!(load_bank(dir.path()).unwrap_err().kind(), "MalformedManifest");

    fs::write(&path, "{ not json").unwrap();
    let err = load_bank(dir.path()).unwrap_err();
    assert_eq!(err.kind(), "MalformedManifest");
    assert!(err.to_json().contains("bank.json"));
}

#[test]
fn missing_bank_names_the_path() {
    let err = load_bank(std::path::Path::new("/nonexistent/bank")).unwrap_err();
    assert!(matches!(err, SpadeError::Io { .. }));
    let json: serde_json::Value = serde_json::from_str(&err.to_json()).unwrap();
    assert!(json["path"].as_str().unwrap().contains("/nonexistent/bank"));
}

#[test]
fn truncated_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_bank(&small_bank(&[1.0, 2.0], 4, 3, 2), dir.path()).unwrap();
    let path = dir.path().join(EMBEDDINGS);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(load_bank(dir.path()).unwrap_err().kind(), "MalformedTensor");
    fs::write(&path, b"SPDX").unwrap();
    assert!(read_tensor(&path).is_err());
}

#[test]
fn model_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (bank, _) = generate(&SynthConfig {
        spots_per_cluster: 20,
        ..SynthConfig::default()
    })
    .unwrap();
    let params = KmeansParams::default();
    let fine = fine_cluster(&bank, 3, 1, &params).unwrap();
    let model = coarse_cluster(&fine, 4, 2, &params).unwrap();
    save_cluster_model(&model, dir.path()).unwrap();
    let once = load_cluster_model(dir.path()).unwrap();
    assert_eq!(once.fine_to_coarse, model.fine_to_coarse);
    save_cluster_model(&once, dir.path()).unwrap();
    assert_eq!(load_cluster_model(dir.path()).unwrap(), once);

    let dims = ExpertDims { m: 5, g: 4, hidden: 6, d: 3 };
    let mut expert = ExpertModel::init(dims, 10.0, 2, vec![0.25; 5], &mut rng_from(3)).unwrap();
    expert.image_head.input_shift = vec![0.5, -1.0, 0.0, 2.0, 0.125];
    let path = save_expert(&expert, dir.path()).unwrap();
    let once = load_expert(&path).unwrap();
    assert_eq!(once.image_head.input_shift, expert.image_head.input_shift);
    let path = save_expert(&once, dir.path()).unwrap();
    assert_eq!(load_expert(&path).unwrap(), once);

    let spec = SurvivalSpec::new(vec![1.0, 2.0, 4.0]).unwrap();
    let mut arch = AbmilArch::new(3, spec.n_bins());
    arch.hidden = 5;
    arch.attn = 4;
    let head = HeadFile {
        task: Task::Survival,
        model: AbmilModel::init(&arch, &mut rng_from(4)).unwrap(),
        survival: Some(spec),
    };
    let path = save_head(&head, dir.path()).unwrap();
    let once = load_head(&path).unwrap();
    assert_eq!(once.survival, head.survival);
    let path = save_head(&once, dir.path()).unwrap();
    assert_eq!(load_head(&path).unwrap(), once);
}
