mod common;

use icl_uq::io::checkpoint::{decode, encode, to_raw, MAGIC};
use icl_uq::io::{
    apply_override, load_checkpoint, load_raw, parse_config, read_csv, save_checkpoint, write_csv, write_suite,
    write_svg, PlotSpec, RunConfig,
};
use icl_uq::montecarlo::MetricSeries;
use icl_uq::trainer::{train, TrainConfig};
use icl_uq::Error;
use proptest::prelude::*;

fn trained_checkpoint() -> icl_uq::trainer::Checkpoint {
    let cfg = parse_config(
        r#"
seed = 4
[prior]
d = 2
[model]
layers = 2
heads = 2
d_model = 6
d_key = 3
d_hidden = 8
window = 5
pos_mode = "segment"
[train]
steps = 3
batch = 2
seq_len = 6
pool_size = 0
"#,
        &[],
    )
    .unwrap();
    let setup = cfg.train_setup().unwrap();
    train(&setup, &mut |_| Ok(())).unwrap().checkpoint
}

fn format_offset(e: Error) -> (u64, String) {
    match e {
        Error::Format { offset, msg } => (offset, msg),
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let ckpt = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&a, &ckpt).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded, ckpt);
    save_checkpoint(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn checkpoint_inventory_lists_everything() {
    let ckpt = trained_checkpoint();
    let raw = to_raw(&ckpt);
    let inv = raw.inventory();
    let names: Vec<&str> = inv.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names[0], "config/model");
    let n_params = ckpt.params.tensors().len();
    assert_eq!(names.iter().filter(|n| n.starts_with("param/")).count(), n_params);
    assert_eq!(names.iter().filter(|n| n.starts_with("opt/m/")).count(), n_params);
    assert_eq!(names.iter().filter(|n| n.starts_with("opt/v/")).count(), n_params);
    assert!(names.ends_with(&["opt/t", "state/step", "state/rng"]));
    assert_eq!(raw.get("state/step").unwrap().data(), &[3.0]);
    for (name, t) in ckpt.params.named() {
        let stored = raw.get(&format!("param/{name}")).unwrap();
        assert_eq!(stored.shape(), t.shape());
    }
}

#[test]
fn seeds_above_32_bits_survive() {
    let mut ckpt = trained_checkpoint();
    ckpt.seed = u64::MAX - 12345;
    let back = icl_uq::io::checkpoint::from_raw(&decode(&encode(&to_raw(&ckpt))).unwrap()).unwrap();
    assert_eq!(back.seed, ckpt.seed);
}

#[test]
fn corrupt_checkpoints_report_offsets() {
    let bytes = encode(&to_raw(&trained_checkpoint()));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let (off, msg) = format_offset(decode(&bad_magic).unwrap_err());
    assert_eq!(off, 0);
    assert!(msg.contains("magic"));

    let mut bad_version = bytes.clone();
    bad_version[MAGIC.len()] = 9;
    let (off, msg) = format_offset(decode(&bad_version).unwrap_err());
    assert_eq!(off, MAGIC.len() as u64);
    assert!(msg.contains("version 9"));

    for cut in [3, MAGIC.len() + 2, 60, bytes.len() / 2, bytes.len() - 1] {
        let (off, _) = format_offset(decode(&bytes[..cut]).unwrap_err());
        assert!(off as usize <= cut, "cut {cut}: offset {off}");
    }

    let mut trailing = bytes.clone();
    trailing.push(0);
    let (off, msg) = format_offset(decode(&trailing).unwrap_err());
    assert_eq!(off as usize, bytes.len());
    assert!(msg.contains("trailing"));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cut.ckpt");
    std::fs::write(&p, &bytes[..100]).unwrap();
    assert!(matches!(load_raw(&p), Err(Error::Format { .. })));
    assert!(matches!(load_raw(&dir.path().join("missing")), Err(Error::Io(_))));
}

#[test]
fn config_defaults_and_overrides() {
    let d = RunConfig::default();
    assert_eq!(d.prior.d, 8);
    assert_eq!(d.prior.tau_shape, 20.0);
    assert_eq!(d.model.d_in, 8);
    let o = parse_config("", &["prior.d=3".into(), "train.lr=0.5".into(), "model.pos_mode=builtin".into()]).unwrap();
    assert_eq!(o.prior.d, 3);
    assert_eq!(o.model.d_in, 3);
    assert_eq!(o.train.lr, 0.5);
    assert_ne!(o.hash(), d.hash());
    // Overrides and inline values hash the same.
    let inline = parse_config("[prior]\nd = 3\n[train]\nlr = 0.5\n[model]\npos_mode = \"builtin\"\n", &[]).unwrap();
    assert_eq!(inline.hash(), o.hash());
    assert_eq!(inline.hash_hex().len(), 64);
}

#[test]
fn out_dir_does_not_change_the_hash() {
    let a = parse_config("out_dir = \"x\"", &[]).unwrap();
    let b = parse_config("out_dir = \"y\"", &[]).unwrap();
    assert_ne!(a.out_dir, b.out_dir);
    assert_eq!(a.hash(), b.hash());
}

#[test]
fn config_errors_carry_line_numbers() {
    let err = parse_config("seed = 1\n[train]\nlr = \"fast\"\n", &[]).unwrap_err();
    assert!(matches!(err, Error::Config { line: Some(3), .. }), "{err}");
    let err = parse_config("seed = 1\n\n[nonsense]\n", &[]).unwrap_err();
    assert!(matches!(err, Error::Config { line: Some(3), .. }), "{err}");
    for bad in ["prior.tau_shape=0.5", "model.d_in=3", "train.batch=0", "experiment.b_h=-1"] {
        let err = parse_config("", &[bad.into()]).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{bad}: {err}");
    }
    let mut t = toml::Table::new();
    assert!(apply_override(&mut t, "novalue").is_err());
    assert!(apply_override(&mut t, "a..b=1").is_err());
    apply_override(&mut t, "a.b=hello world").unwrap();
    assert_eq!(t["a"]["b"].as_str(), Some("hello world"));
}

#[test]
fn train_config_validation_matches_struct_defaults() {
    let d = RunConfig::default();
    assert_eq!(d.train, TrainConfig::default());
}

#[test]
fn csv_round_trip_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = MetricSeries::new("id/bayes/avg_sigma");
    s.push(1.0, 0.1 + 0.2, 1e-300);
    s.push(2.0, -1.0 / 3.0, 0.0);
    s.push(3.0, std::f64::consts::PI * 1e20, 5e-324);
    let p = dir.path().join("s.csv");
    write_csv(&p, &s).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text.lines().next(), Some("x,mean,stderr"));
    let back = read_csv(&p).unwrap();
    assert_eq!(back.x, s.x);
    assert_eq!(back.mean, s.mean);
    assert_eq!(back.stderr, s.stderr);

    let paths = write_suite(dir.path(), "suite", &[s], "abc123").unwrap();
    assert_eq!(paths[0], dir.path().join("suite").join("id.bayes.avg_sigma_abc123.csv"));
}

#[test]
fn svg_output() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PlotSpec {
        title: "t".into(),
        x_label: "x".into(),
        y_label: "y".into(),
    };
    let p = dir.path().join("empty.svg");
    assert!(!write_svg(&p, &[], &spec).unwrap());
    assert!(!p.exists());
    let mut s = MetricSeries::new("a");
    for i in 1..=5 {
        s.push(i as f64, (i * i) as f64, 0.1);
    }
    let p = dir.path().join("one.svg");
    assert!(write_svg(&p, &[s], &spec).unwrap());
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("<svg") || text.starts_with("<?xml"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_values_round_trip_exactly(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let mut s = MetricSeries::new("p");
        for (i, &v) in vals.iter().enumerate() {
            s.push(i as f64 + 1.0, v, v.abs());
        }
        let p = dir.path().join("p.csv");
        write_csv(&p, &s).unwrap();
        let back = read_csv(&p).unwrap();
        prop_assert_eq!(back.mean, s.mean);
        prop_assert_eq!(back.stderr, s.stderr);
    }

    #[test]
    fn random_bytes_never_panic_the_decoder(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode(&bytes);
        let mut framed = MAGIC.to_vec();
        framed.extend_from_slice(&1u32.to_le_bytes());
        framed.extend_from_slice(&bytes);
        let _ = decode(&framed);
    }
}
