//! Drives the `fireseg` binary end to end on small inputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fireseg::dataset::{Mask, FIRE, NO_FIRE, WATER};
use fireseg::tensor::Tensor;
use fireseg::unet::{LayerKind, UNetConfig, UNetParams};
use fireseg_cli::formats::{decode_fsk, decode_msk, encode_checkpoint, encode_fsk, encode_msk, FeatureStack};
use fireseg_cli::records::Csv;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fireseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fireseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fireseg(args);
    assert!(
        out.status.success(),
        "fireseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing run.
fn fails(args: &[&str]) -> (i32, String) {
    let out = fireseg(args);
    assert!(!out.status.success(), "fireseg {args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "stderr is not one line: {err:?}");
    assert!(err.starts_with("error: "), "{err:?}");
    (out.status.code().unwrap(), err.trim_end().to_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(p: &Path) -> Csv {
    Csv::parse(&fs::read_to_string(p).unwrap()).unwrap()
}

const SMALL: &str = "\
height = 64
width = 64
days = 9
holdout_days = 2
target_fire_rate = 0.004
init_features = 2
max_epochs = 3
patience = 1
batch_size = 8
";

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let (data, prep, run) = (d.join("data"), d.join("prep"), d.join("run"));

    ok(&["generate", "--config", s(&cfg), "--seed", "5", "--out", s(&data)]);
    for f in [
        "schema.json",
        "days.csv",
        "rule.json",
        "days/d000.fsk",
        "masks/d008.msk",
    ] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let schema = fs::read_to_string(data.join("schema.json")).unwrap();
    assert!(!schema.contains("coefficients"), "planted rule leaked into the schema");

    ok(&[
        "prepare",
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--data",
        s(&data),
        "--out",
        s(&prep),
    ]);
    let stack = fs::read(prep.join("days/d000.fsk")).unwrap();
    assert_eq!(encode_fsk(&decode_fsk(&stack).unwrap()).unwrap(), stack);
    assert_eq!(decode_fsk(&stack).unwrap().names.len(), 10);
    let holdout = read_csv(&prep.join("tiles_holdout.csv"));
    assert!(holdout
        .rows
        .iter()
        .all(|r| r[4] == "holdout" && (r[0] == "d007" || r[0] == "d008")));
    let sampled = read_csv(&prep.join("tiles_sampled.csv"));
    assert!(sampled.rows.iter().all(|r| r[4] == "sampled" && r[3] != "water"));

    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--data",
        s(&prep),
        "--out",
        s(&run),
        "--tr",
        "1,4",
        "--fire-buffer",
        "train",
        "--folds",
        "3",
    ]);
    let v = read_csv(&run.join("validation.csv"));
    assert_eq!(
        v.header,
        "tr,fb,if,es,row,sens,spec,sh1,sh2,sens_full,spec_full,sh1_full,sh2_full"
            .split(',')
            .collect::<Vec<_>>()
    );
    assert_eq!(v.rows.len(), 2 * (3 + 1));
    for block in v.rows.chunks(4) {
        let rows: Vec<&str> = block.iter().map(|r| r[4].as_str()).collect();
        assert_eq!(rows, ["fold0", "fold1", "fold2", "mean"]);
        for r in block {
            let (sens, spec): (f64, f64) = (r[9].parse().unwrap(), r[10].parse().unwrap());
            assert_eq!(r[5], format!("{sens:.4}"));
            assert!((r[11].parse::<f64>().unwrap() - (sens + spec)).abs() < 1e-12);
        }
    }
    for f in ["model.unc", "model.unc.metrics.csv", "selection.json", "audit.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(run.join("tr4_fb-train_if2_sh2/fold2.unc.metrics.csv").is_file());
    assert!(run.join("tr1_fb-train_if2_sh2/trace_fold0.csv").is_file());

    let model = run.join("model.unc");
    let eval = d.join("eval");
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&model),
        "--data",
        s(&prep),
        "--out",
        s(&eval),
    ]);
    let h = read_csv(&eval.join("holdout.csv"));
    assert_eq!(h.rows.len(), 1);
    assert_eq!(&h.header[..3], ["model", "holdout_sens", "holdout_spec"]);

    let pred = d.join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&model),
        "--data",
        s(&prep),
        "--out",
        s(&pred),
        "--days",
        "d007",
        "--tiles",
        "d008:32:0",
        "--render",
        "--scale",
        "2",
    ]);
    let m = decode_msk(&fs::read(pred.join("d007.msk")).unwrap()).unwrap();
    let truth = decode_msk(&fs::read(prep.join("masks/d007.msk")).unwrap()).unwrap();
    assert_eq!((m.height(), m.width()), (64, 64));
    for (p, t) in m.labels().iter().zip(truth.labels()) {
        assert_eq!(*p == WATER, *t == WATER);
    }
    let ppm = fs::read(pred.join("d007.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n258 128\n255\n"));
    assert!(pred.join("d008_r32_c0.ppm").is_file());
    assert_eq!(
        decode_msk(&fs::read(pred.join("d008_r32_c0.msk")).unwrap())
            .unwrap()
            .height(),
        32
    );
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let (data, prep) = (d.join("data"), d.join("prep"));
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["prepare", "--config", s(&cfg), "--data", s(&data), "--out", s(&prep)]);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let run = d.join(format!("run{threads}"));
        ok(&[
            "train",
            "--config",
            s(&cfg),
            "--threads",
            threads,
            "--data",
            s(&prep),
            "--out",
            s(&run),
            "--folds",
            "2",
            "--max-epochs",
            "2",
        ]);
        outputs.push((
            fs::read(run.join("model.unc")).unwrap(),
            fs::read(run.join("validation.csv")).unwrap(),
        ));
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn unknown_config_key_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 3\n# comment\nlearning_rate = 0.1\n").unwrap();
    let (code, err) = fails(&["generate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code, 1);
    assert!(err.contains("line 3: unknown key `learning_rate`"), "{err}");
}

#[test]
fn bad_inputs_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let (_, err) = fails(&["prepare", "--data", s(&missing), "--out", s(dir.path())]);
    assert!(err.contains("does not exist"), "{err}");
    let (_, err) = fails(&["train", "--data", s(&missing)]);
    assert!(err.contains("--out"), "{err}");
    let (_, err) = fails(&["train", "--fire-buffer", "sometimes", "--data", "x", "--out", "y"]);
    assert!(err.contains("--fire-buffer"), "{err}");
    let (_, err) = fails(&["frobnicate"]);
    assert!(err.starts_with("error: usage:"), "{err}");
    // nothing was written for the failed commands
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

/// Raw dataset whose first channel is 1 exactly on fire pixels.
fn leak_dataset(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let schema = r#"{"channels":[{"name":"leak","kind":"numeric"},{"name":"noise","kind":"numeric"},
        {"name":"lc","kind":"categorical","categories":["a","b"]}]}"#;
    fs::write(dir.join("schema.json"), schema).unwrap();
    let days = ["2019-07-01", "2019-07-02", "2019-07-03", "2019-08-01", "2020-07-01"];
    let roles = ["trainval", "trainval", "trainval", "holdout", "holdout"];
    let mut list = String::from("day_id,role\n");
    fs::create_dir_all(dir.join("days")).unwrap();
    fs::create_dir_all(dir.join("masks")).unwrap();
    for (id, role) in days.iter().zip(roles) {
        list.push_str(&format!("{id},{role}\n"));
        let (h, w) = (40, 70);
        let labels: Vec<u8> = (0..h * w)
            .map(|i| match (i % w >= 60, rng.random_bool(0.02)) {
                (true, _) => WATER,
                (false, true) => FIRE,
                _ => NO_FIRE,
            })
            .collect();
        let mut data: Vec<f32> = labels.iter().map(|&l| f32::from(l == FIRE)).collect();
        data.extend((0..h * w).map(|_| rng.random_range(-5.0..5.0f32)));
        data.extend((0..h * w).map(|_| rng.random_range(0..2) as f32));
        let stack = FeatureStack {
            names: vec!["leak".into(), "noise".into(), "lc".into()],
            data: Tensor::new(&[3, h, w], data).unwrap(),
        };
        fs::write(dir.join(format!("days/{id}.fsk")), encode_fsk(&stack).unwrap()).unwrap();
        let mask = Mask::new(h, w, labels).unwrap();
        fs::write(dir.join(format!("masks/{id}.msk")), encode_msk(&mask).unwrap()).unwrap();
    }
    fs::write(dir.join("days.csv"), list).unwrap();
}

/// Copies encoded channel 0 through the first skip to the head:
/// fire logit `2·x − 1`, no-fire logit 0.
fn oracle_checkpoint(in_channels: usize) -> UNetParams {
    let cfg = UNetConfig::new(in_channels, 2);
    let specs = cfg.layers();
    let mut ts: Vec<Vec<f32>> = Vec::new();
    for s in &specs {
        ts.push(vec![0.0; s.weight_shape().iter().product()]);
        ts.push(vec![0.0; s.out_channels]);
    }
    ts[0][4] = 1.0;
    ts[2][4] = 1.0;
    let dec = specs.len() - 2;
    assert_eq!(specs[dec].kind, LayerKind::Conv3x3);
    ts[2 * dec][(specs[dec].in_channels - 2) * 9 + 4] = 1.0;
    let head = specs.len() - 1;
    ts[2 * head][2] = 2.0;
    ts[2 * head + 1][1] = -1.0;
    let tensors = specs
        .iter()
        .zip(ts.chunks(2))
        .flat_map(|(s, wb)| {
            [
                Tensor::new(&s.weight_shape(), wb[0].clone()).unwrap(),
                Tensor::new(&[s.out_channels], wb[1].clone()).unwrap(),
            ]
        })
        .collect();
    UNetParams::from_tensors(cfg, tensors).unwrap()
}

#[test]
fn perfect_oracle_scores_one_per_period() {
    let dir = tempfile::tempdir().unwrap();
    let (raw, prep) = (dir.path().join("raw"), dir.path().join("prep"));
    fs::create_dir_all(&raw).unwrap();
    leak_dataset(&raw);
    ok(&["prepare", "--data", s(&raw), "--out", s(&prep), "--tr", "2"]);
    let ckpt = dir.path().join("oracle.unc");
    fs::write(&ckpt, encode_checkpoint(&oracle_checkpoint(4)).unwrap()).unwrap();
    let eval = dir.path().join("eval");
    let stdout = ok(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&prep),
        "--out",
        s(&eval),
    ]);
    assert!(stdout.contains("2019: sens 1.0000 spec 1.0000"), "{stdout}");
    let h = read_csv(&eval.join("holdout.csv"));
    assert_eq!(
        &h.header[..5],
        ["model", "2019_sens", "2019_spec", "2020_sens", "2020_spec"]
    );
    assert_eq!(&h.rows[0][..5], ["oracle", "1.0000", "1.0000", "1.0000", "1.0000"]);

    // a checkpoint for a different channel count is refused
    fs::write(&ckpt, encode_checkpoint(&oracle_checkpoint(3)).unwrap()).unwrap();
    let (_, err) = fails(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&prep),
        "--out",
        s(&eval),
    ]);
    assert!(err.contains("input channels"), "{err}");
}
