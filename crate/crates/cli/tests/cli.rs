//! File formats, configuration loading and the `vpr` binary.

use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use vpr_cli::commands::{self, INDEX_FILE, RECALL_JSON};
use vpr_cli::formats::*;
use vpr_cli::{exit_code, Preset, RunConfig, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC};
use vpr_core::retrieval::{PlaceRecord, Split};
use vpr_core::{Error, ParamStore};
use vpr_tensor::{DType, Tensor};

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(1usize..4, 0..4), any::<bool>()).prop_flat_map(|(shape, double)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e6f64..1e6, n).prop_map(move |data| {
            let dtype = if double { DType::F64 } else { DType::F32 };
            Tensor::new(&shape, data, dtype).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn tensor_files_round_trip_bit_identically(t in tensor_strategy()) {
        let mut bytes = Vec::new();
        encode_tensor(&t, &mut bytes).unwrap();
        let back = decode_tensor(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.dtype(), t.dtype());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
        let mut again = Vec::new();
        encode_tensor(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn any_checkpoint_corruption_is_detected(
        tensors in prop::collection::vec(tensor_strategy(), 1..4),
        pos in any::<prop::sample::Index>(),
        flip in 1u8..=255,
    ) {
        let entries: Vec<(String, Tensor)> = tensors.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect();
        let mut bytes = encode_checkpoint(&entries).unwrap();
        prop_assert_eq!(decode_checkpoint(&bytes, Path::new("mem")).unwrap(), entries);
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(decode_checkpoint(&bytes, Path::new("mem")).is_err());
    }
}

#[test]
fn tensor_header_layout() {
    let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], DType::F32).unwrap();
    let mut b = Vec::new();
    encode_tensor(&t, &mut b).unwrap();
    assert_eq!(&b[..4], b"DTNS");
    assert_eq!(&b[4..8], &[1, 0, 2, 0]);
    assert_eq!(&b[8..16], &2u64.to_le_bytes());
    assert_eq!(&b[16..24], &3u64.to_le_bytes());
    assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
    assert_eq!(b.len(), 24 + 6 * 4);
}

fn format_field(err: Error) -> String {
    match err {
        Error::Format { field, .. } => field,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn malformed_tensor_files_name_the_field() {
    let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0], DType::F64).unwrap();
    let mut good = Vec::new();
    encode_tensor(&t, &mut good).unwrap();
    let p = Path::new("x.dtns");

    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(format_field(decode_tensor(&bad, p).unwrap_err()), "magic");
    let mut bad = good.clone();
    bad[4] = 2;
    assert_eq!(format_field(decode_tensor(&bad, p).unwrap_err()), "version");
    let mut bad = good.clone();
    bad[5] = 7;
    assert_eq!(format_field(decode_tensor(&bad, p).unwrap_err()), "dtype");
    assert_eq!(
        format_field(decode_tensor(&good[..good.len() - 1], p).unwrap_err()),
        "payload"
    );
    assert_eq!(format_field(decode_tensor(&good[..10], p).unwrap_err()), "extents[0]");
    let mut long = good.clone();
    long.push(0);
    assert_eq!(format_field(decode_tensor(&long, p).unwrap_err()), "payload");
    let msg = decode_tensor(&bad, p).unwrap_err().to_string();
    assert!(msg.contains("x.dtns") && msg.contains("dtype"), "{msg}");
}

#[test]
fn checkpoint_names_are_unique_and_checked_against_the_model() {
    let t = Tensor::zeros(&[2], DType::F32);
    assert!(encode_checkpoint(&[("a".into(), t.clone()), ("a".into(), t.clone())]).is_err());

    let mut store = ParamStore::new();
    store.insert("w", Tensor::zeros(&[2], DType::F32)).unwrap();
    store.insert("b", Tensor::zeros(&[1], DType::F32)).unwrap();
    let p = Path::new("m.ckpt");
    let ones = Tensor::full(&[2], 1.0, DType::F32);
    let err = load_into(&mut store.clone(), vec![("w".into(), ones.clone())], p).unwrap_err();
    assert_eq!(format_field(err), "b");
    let err = load_into(
        &mut store.clone(),
        vec![("w".into(), Tensor::zeros(&[3], DType::F32)), ("b".into(), t.clone())],
        p,
    )
    .unwrap_err();
    assert_eq!(format_field(err), "w");
    load_into(
        &mut store,
        vec![
            ("w".into(), ones.clone()),
            ("b".into(), Tensor::zeros(&[1], DType::F32)),
        ],
        p,
    )
    .unwrap();
    assert_eq!(store.tensor("w").unwrap(), &ones);

    let bytes = encode_checkpoint(&store_entries(&store)).unwrap();
    assert_eq!(&bytes[..5], b"DCKP\x01");
    assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
    let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
    assert_eq!(&bytes[bytes.len() - 4..], &crc.to_le_bytes());
}

#[test]
fn manifest_round_trip_and_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let records = vec![
        PlaceRecord {
            id: 3,
            tensor: "images/000003.dtns".into(),
            easting: 10.5,
            northing: -2.25,
            heading: Some(90.0),
            frame_index: Some(7),
            place_id: 1,
            split: Split::Query,
        },
        PlaceRecord {
            id: 4,
            tensor: "images/000004.dtns".into(),
            easting: 0.0,
            northing: 0.0,
            heading: None,
            frame_index: None,
            place_id: 1,
            split: Split::Database,
        },
    ];
    write_manifest(&path, &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains("\"split\":\"query\""));
    assert_eq!(read_manifest(&path).unwrap(), records);

    std::fs::write(&path, format!("{}\n{{\"id\": 9}}\n", text.lines().next().unwrap())).unwrap();
    assert_eq!(format_field(read_manifest(&path).unwrap_err()), "line 2");
    std::fs::write(&path, format!("{0}\n{0}\n", text.lines().next().unwrap())).unwrap();
    assert!(read_manifest(&path).unwrap_err().to_string().contains("duplicate id 3"));
}

#[test]
fn config_overrides_presets_and_rejects_unknown_keys() {
    let cfg = RunConfig::from_json(serde_json::json!({"seed": 5, "finetune": {"epochs": 2}}), None).unwrap();
    assert_eq!(cfg.preset, Preset::Toy);
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.finetune.epochs, 2);
    assert_eq!(
        cfg.finetune.places_per_batch,
        RunConfig::toy().finetune.places_per_batch
    );

    let full = RunConfig::from_json(serde_json::json!({"preset": "full"}), None).unwrap();
    assert_eq!(full.model.descriptor_dim(), 10752);
    assert_eq!(full.distill.optim.lr, 2.5e-5);
    assert_eq!(full.distill.batch_size, 8);
    assert_eq!(full.finetune.optim.lr, 2e-4);
    assert_eq!(full.finetune.places_per_batch * full.finetune.images_per_place, 128);
    assert_eq!(full.pca_dim, Some(4096));

    let err = RunConfig::from_json(serde_json::json!({"finetune": {"epochz": 2}}), None).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
    assert!(err.to_string().contains("epochz"), "{err}");
    let err = RunConfig::from_json(serde_json::json!({"bogus": 1}), None).unwrap_err();
    assert!(err.to_string().contains("bogus"), "{err}");
    for bad in [
        serde_json::json!({"eval_batch": 0}),
        serde_json::json!({"recall_ns": [5, 1]}),
        serde_json::json!({"pca_dim": 10000}),
        serde_json::json!({"ground_truth": {"mode": "gps"}}),
        serde_json::json!({"distill": {"seed": 3}}),
        serde_json::json!({"data": {"image_size": 32}}),
    ] {
        let err = RunConfig::from_json(bad.clone(), None).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG, "{bad}");
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
    assert_eq!(exit_code(&Error::format("f", "magic", "bad")), EXIT_DATA);
    assert_eq!(exit_code(&Error::Dimension("x".into())), EXIT_DATA);
    assert_eq!(exit_code(&Error::Numeric("nan".into())), EXIT_NUMERIC);
}

fn small_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        data_dir: root.join("data"),
        work_dir: root.join("work"),
        ..RunConfig::toy()
    };
    cfg.data.num_places = 12;
    cfg.distill.epochs = 1;
    cfg.finetune.epochs = 2;
    cfg
}

#[test]
fn extraction_batch_size_is_irrelevant_without_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.model.encoder.enabled = false;
    cfg.pca_dim = None;
    commands::gen_data(&cfg).unwrap();
    commands::train_distill(&cfg).unwrap();
    commands::train_finetune(&cfg).unwrap();
    let mut reports = Vec::new();
    for batch in [1, 8] {
        cfg.eval_batch = batch;
        commands::extract(&cfg).unwrap();
        commands::index_build(&cfg).unwrap();
        let r = commands::eval(&cfg).unwrap();
        assert!(r.is_monotone());
        reports.push((r, std::fs::read(cfg.work_dir.join(INDEX_FILE)).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn pca_stage_reduces_descriptors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.pca_dim = Some(8);
    commands::gen_data(&cfg).unwrap();
    commands::train_distill(&cfg).unwrap();
    commands::train_finetune(&cfg).unwrap();
    let raw = commands::extract(&cfg).unwrap();
    assert_eq!(raw.dim, 448);
    assert_eq!(raw.descriptors, 24);
    let fit = commands::pca_fit(&cfg).unwrap();
    assert_eq!((fit.in_dim, fit.out_dim, fit.fitted_on), (448, 8, 12));
    let reduced = commands::pca_apply(&cfg).unwrap();
    assert_eq!(reduced.dim, 8);
    let idx = commands::index_build(&cfg).unwrap();
    assert_eq!((idx.entries, idx.dim), (12, 8));
    let r = commands::eval(&cfg).unwrap();
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cfg.work_dir.join(RECALL_JSON)).unwrap()).unwrap();
    assert_eq!(json["recall"].as_array().unwrap().len(), 3);
    assert_eq!(json["evaluated"], 12);
    assert!(r.is_monotone());
}

#[test]
fn missing_and_corrupt_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let err = commands::train_distill(&cfg).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_DATA);
    assert!(err.to_string().contains("manifest.jsonl"));

    commands::gen_data(&cfg).unwrap();
    let img = cfg.data_dir.join("images/000000.dtns");
    let mut bytes = std::fs::read(&img).unwrap();
    bytes[5] = 9;
    std::fs::write(&img, bytes).unwrap();
    let err = commands::train_distill(&cfg).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_DATA);
    assert!(
        err.to_string().contains("000000.dtns") && err.to_string().contains("dtype"),
        "{err}"
    );
}

fn vpr(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vpr"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn binary_runs_analysis_and_reports_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = vpr(&["analyze", "--preset", "full", "--work-dir", "w"], dir.path());
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    let drm = table.lines().find(|l| l.contains("drm")).unwrap();
    assert!(drm.contains("1.1804"), "{drm}");
    assert!(dir.path().join("w/analysis.csv").exists());

    std::fs::write(dir.path().join("bad.json"), r#"{"sed": 1}"#).unwrap();
    let out = vpr(&["gen-data", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed"));

    let out = vpr(&["eval", "--work-dir", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_DATA));

    let out = vpr(&["extract", "--batch", "0"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn nan_parameters_exit_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    commands::gen_data(&cfg).unwrap();
    commands::train_distill(&cfg).unwrap();
    let ckpt = cfg.work_dir.join(commands::DISTILL_CKPT);
    let mut entries = read_checkpoint(&ckpt).unwrap();
    entries[0].1.data_mut()[0] = f64::NAN;
    write_checkpoint(&ckpt, &entries).unwrap();
    let err = commands::train_finetune(&cfg).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_NUMERIC, "{err}");
}
