use proptest::prelude::*;

use snn_lottery::error::ParseLocation;
use snn_lottery::io::{
    decode_tensor, encode_tensor, load_checkpoint, load_mask, load_params, load_ticket, save_checkpoint, save_mask,
    save_params, save_ticket, Payload, TensorRecord,
};
use snn_lottery::metrics::LayerSparsity;
use snn_lottery::pruner::random_mask;
use snn_lottery::record::{config_hash, ExperimentRecord, RecordStore};
use snn_lottery::report::{build_report, emit_report, ReportKind};
use snn_lottery::snn::lif::LifParams;
use snn_lottery::snn::network::{LayerSpec, NetworkSpec, NeuronMode};
use snn_lottery::tickets::{KlProfile, Ticket, TicketMetadata, TicketMethod};
use snn_lottery::trainer::{Checkpoint, EpochStats, RngState};
use snn_lottery::Error;

fn small_spec() -> NetworkSpec {
    NetworkSpec {
        input_shape: [1, 4, 4],
        num_classes: 3,
        layers: vec![
            LayerSpec::Conv2d {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
            LayerSpec::Norm,
            LayerSpec::Pool { window: 2 },
            LayerSpec::Dense {
                out_features: 3,
                bias: true,
            },
        ],
        neuron: NeuronMode::Lif,
        timesteps: 3,
        lif: LifParams::default(),
        exempt_first_last: false,
    }
}

fn parse_offset(e: &Error) -> Option<u64> {
    match e {
        Error::Parse {
            location: ParseLocation::ByteOffset(o),
            ..
        } => Some(*o),
        _ => None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn tensor_bytes_round_trip(
        name in "[a-z0-9._]{0,20}",
        dims in prop::collection::vec(1usize..5, 0..4),
        bits in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let n: usize = dims.iter().product();
        let payload = if bits {
            Payload::Bits((0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect())
        } else {
            Payload::F32((0..n).map(|i| f32::from_bits((seed as u32).wrapping_add((i as u32).wrapping_mul(2654435761)) & 0x7f7f_ffff)).collect())
        };
        let t = TensorRecord { name, shape: dims, payload };
        let bytes = encode_tensor(&t).unwrap();
        prop_assert_eq!(decode_tensor(&bytes, "mem").unwrap(), t);
        if !bytes.is_empty() {
            let cut = (seed as usize) % bytes.len();
            prop_assert!(decode_tensor(&bytes[..cut], "mem").is_err());
        }
    }
}

#[test]
fn malformed_tensor_files_report_offsets() {
    let t = TensorRecord {
        name: "w".into(),
        shape: vec![2, 2],
        payload: Payload::F32(vec![1.0, -2.0, 3.5, 0.0]),
    };
    let bytes = encode_tensor(&t).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(parse_offset(&decode_tensor(&bad, "x").unwrap_err()), Some(0));

    let truncated = decode_tensor(&bytes[..bytes.len() - 1], "x").unwrap_err();
    assert!(parse_offset(&truncated).is_some());

    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(parse_offset(&decode_tensor(&long, "x").unwrap_err()), Some(bytes.len() as u64));
}

#[test]
fn params_masks_checkpoints_and_tickets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let params = spec.init_params(3, 1.0).unwrap();
    let mask = random_mask(&params, 0.4, 9);

    save_params(&dir.path().join("p"), &params).unwrap();
    assert!(load_params(&dir.path().join("p")).unwrap().bitwise_eq(&params));

    save_mask(&dir.path().join("m"), &mask).unwrap();
    assert_eq!(load_mask(&dir.path().join("m")).unwrap(), mask);

    let mut ckpt = Checkpoint::initial(params.clone(), 5);
    ckpt.epoch = 7;
    ckpt.rng = RngState { seed: 5, stream: 7 };
    ckpt.velocity.iter_mut().for_each(|v| v.value.data_mut().iter_mut().for_each(|x| *x = 0.125));
    save_checkpoint(&dir.path().join("c"), &ckpt).unwrap();
    let back = load_checkpoint(&dir.path().join("c")).unwrap();
    assert_eq!(back.epoch, 7);
    assert_eq!(back.rng, ckpt.rng);
    assert!(back.params.bitwise_eq(&ckpt.params));
    assert!(back.velocity.bitwise_eq(&ckpt.velocity));

    let mut meta = TicketMetadata::new(TicketMethod::ImpEt, NeuronMode::Lif, 2, 5);
    meta.t_early = Some(2);
    meta.kl_profile = Some(KlProfile::from_raw(vec![0.3, 0.1], 4).unwrap());
    meta.round = Some(3);
    let ticket = Ticket::new(mask.clone(), &params, meta).unwrap();
    let tdir = dir.path().join("ticket");
    save_ticket(&tdir, &ticket).unwrap();
    save_ticket(&tdir, &ticket).unwrap();
    let loaded = load_ticket(&tdir).unwrap();
    assert_eq!(loaded.mask, ticket.mask);
    assert!(loaded.rewind_params.bitwise_eq(&ticket.rewind_params));
    assert_eq!(loaded.metadata, ticket.metadata);
}

#[test]
fn tampered_ticket_sparsity_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let params = small_spec().init_params(1, 1.0).unwrap();
    let ticket = Ticket::new(
        random_mask(&params, 0.5, 1),
        &params,
        TicketMetadata::new(TicketMethod::Random, NeuronMode::Lif, 3, 1),
    )
    .unwrap();
    save_ticket(dir.path(), &ticket).unwrap();
    let path = dir.path().join("ticket.json");
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["metadata"]["achieved_sparsity"] = serde_json::json!(0.1);
    std::fs::write(&path, json.to_string()).unwrap();
    assert!(matches!(load_ticket(dir.path()), Err(Error::Contract(_))));
}

fn record(method: TicketMethod, sparsity: f64, seed: u64, acc: f64) -> ExperimentRecord {
    ExperimentRecord {
        key: Some(format!("{}-{sparsity}-{seed}", method.label())),
        config: serde_json::json!({"method": method, "seed": seed}),
        method,
        seed,
        target_sparsity: Some(sparsity),
        achieved_sparsity: sparsity - 0.001,
        layer_sparsity: vec![LayerSparsity {
            name: "layer0.weight".into(),
            total: 100,
            surviving: 40,
            sparsity: 0.6,
        }],
        trajectory: vec![EpochStats {
            epoch: 1,
            lr: 0.1,
            train_loss: 2.0 / 3.0,
            train_accuracy: 0.1 + 0.2,
            test_accuracy: None,
        }],
        final_test_accuracy: acc,
        mean_spikes_per_image: Some(acc * 100.0),
        timesteps: 5,
        search_timesteps: 5,
        search_wall_seconds: 1.0 / 7.0,
        search_cpu_seconds: Some(0.5),
        ..ExperimentRecord::default()
    }
}

#[test]
fn records_round_trip_losslessly() {
    let r = record(TicketMethod::EbEt, 0.7, 2, 0.812_345_678_901_234_5);
    let back = ExperimentRecord::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.search_wall_seconds.to_bits(), r.search_wall_seconds.to_bits());
}

#[test]
fn config_hash_ignores_key_order() {
    let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": [1, 2]}}"#).unwrap();
    let b: serde_json::Value = serde_json::from_str(r#"{"a": {"x": [1, 2], "y": 2}, "b": 1}"#).unwrap();
    assert_eq!(config_hash(&a), config_hash(&b));
    assert_eq!(config_hash(&a).len(), 64);
    let c: serde_json::Value = serde_json::from_str(r#"{"a": {"x": [2, 1], "y": 2}, "b": 1}"#).unwrap();
    assert_ne!(config_hash(&a), config_hash(&c));
}

#[test]
fn store_is_append_only() {
    let dir = tempfile::tempdir().unwrap();
    let store = RecordStore::new(dir.path());
    let first = record(TicketMethod::Imp, 0.5, 1, 0.8);
    let key = store.put(&first).unwrap();
    assert!(store.contains(&key));
    let mut second = first.clone();
    second.final_test_accuracy = 0.1;
    assert_eq!(store.put(&second).unwrap(), key);
    assert_eq!(store.get(&key).unwrap().unwrap().final_test_accuracy, 0.8);

    let mut unkeyed = first.clone();
    unkeyed.key = None;
    let hashed = store.put(&unkeyed).unwrap();
    assert_eq!(hashed.len(), 64);

    let failed = ExperimentRecord::failed(Some("cell".into()), serde_json::Value::Null, TicketMethod::Eb, 1, "boom".into());
    store.put_failure(&failed).unwrap();
    store.put_failure(&failed).unwrap();
    assert!(!store.contains("cell"));
    let all = store.list().unwrap();
    assert_eq!(all.len(), 3);
    assert_eq!(all.iter().filter(|r| !r.is_ok()).count(), 1);
}

fn grid() -> Vec<ExperimentRecord> {
    let mut out = Vec::new();
    for (i, method) in [TicketMethod::Imp, TicketMethod::Random].into_iter().enumerate() {
        for s in [0.9, 0.5, 0.7] {
            for seed in 1..=3 {
                out.push(record(method, s, seed, 0.9 - s / 10.0 - i as f64 * 0.05 + seed as f64 * 0.001));
            }
        }
    }
    out
}

#[test]
fn reports_are_deterministic_and_sorted() {
    let records = grid();
    let mut reversed = records.clone();
    reversed.reverse();
    for kind in [ReportKind::AccuracyVsSparsity, ReportKind::SearchTime, ReportKind::SpikesVsSparsity, ReportKind::LayerSparsity] {
        let a = build_report(&records, kind).unwrap();
        let b = build_report(&reversed, kind).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
    let acc = build_report(&records, ReportKind::AccuracyVsSparsity).unwrap();
    assert_eq!(acc.columns, ["method", "sparsity", "n", "accuracy_mean", "accuracy_std"]);
    assert_eq!(acc.rows.len(), 6);
    let sparsities: Vec<f64> = acc.rows.iter().map(|r| r[1].as_f64().unwrap()).collect();
    assert!(sparsities.windows(2).all(|w| w[0] <= w[1]));
    for row in &acc.rows {
        assert_eq!(row[2], 3);
        let std = row[4].as_f64().unwrap();
        assert!((std - 0.001).abs() < 1e-6, "std {std}");
    }
}

#[test]
fn single_seed_cells_have_zero_std_and_failures_are_skipped() {
    let mut records = vec![record(TicketMethod::Imp, 0.5, 1, 0.8)];
    records.push(ExperimentRecord::failed(None, serde_json::Value::Null, TicketMethod::Imp, 2, "x".into()));
    let acc = build_report(&records, ReportKind::AccuracyVsSparsity).unwrap();
    assert_eq!(acc.rows.len(), 1);
    assert_eq!(acc.rows[0][2], 1);
    assert_eq!(acc.rows[0][4], 0.0);
}

#[test]
fn empty_and_missing_field_reports() {
    assert!(matches!(build_report(&[], ReportKind::AccuracyVsSparsity), Err(Error::EmptyReport(_))));
    assert!(matches!(build_report(&grid(), ReportKind::KlProfile), Err(Error::EmptyReport(_))));
    assert!(matches!(build_report(&grid(), ReportKind::EbEpoch), Err(Error::EmptyReport(_))));

    let mut eb = record(TicketMethod::Eb, 0.5, 1, 0.8);
    eb.eb_converged = Some(false);
    let report = build_report(&[eb], ReportKind::EbEpoch).unwrap();
    assert!(report.to_tsv().lines().nth(1).unwrap().contains("NA"));
}

#[test]
fn kl_report_averages_profiles() {
    let mut a = record(TicketMethod::ImpEt, 0.5, 1, 0.8);
    a.kl_profile = Some(KlProfile::from_raw(vec![0.4, 0.2, 0.1], 5).unwrap());
    a.t_early = Some(3);
    let mut b = a.clone();
    b.seed = 2;
    b.kl_profile = Some(KlProfile::from_raw(vec![0.2, 0.1, 0.02], 5).unwrap());
    b.t_early = Some(4);
    let report = build_report(&[a, b], ReportKind::KlProfile).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[0][2], 2);
    assert!((report.rows[0][3].as_f64().unwrap() - 0.3).abs() < 1e-9);
    assert_eq!(report.rows[0][5].as_f64().unwrap(), 1.0);
    assert!((report.rows[0][7].as_f64().unwrap() - 3.5).abs() < 1e-9);
}

#[test]
fn emitted_files_match_the_in_memory_report() {
    let dir = tempfile::tempdir().unwrap();
    let (tsv, json) = emit_report(&grid(), ReportKind::AccuracyVsSparsity, &dir.path().join("acc")).unwrap();
    let report = build_report(&grid(), ReportKind::AccuracyVsSparsity).unwrap();
    assert_eq!(std::fs::read_to_string(tsv).unwrap(), report.to_tsv());
    assert_eq!(std::fs::read_to_string(json).unwrap(), report.to_json().unwrap());
}
