use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use labelprop_core::scheduler::split_features;
use labelprop_core::tensorio::{load_feature_volume, save_feature_volume, save_label_grid};
use labelprop_core::{plan_clips, MaskSequence};

fn labelprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelprop"))
        .args(args)
        .output()
        .expect("spawn labelprop")
}

fn ok(args: &[&str]) -> String {
    let out = labelprop(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = labelprop(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(
        err.trim_end().lines().count(),
        1,
        "diagnostic should be one line: {err}"
    );
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two short default-size videos.
fn small_benchmark() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen",
        "--out",
        s(&data),
        "--videos",
        "2",
        "--frames",
        "4",
        "--seed",
        "5",
    ]);
    (dir, data)
}

#[test]
fn gen_writes_manifest_and_videos() {
    let (_dir, data) = small_benchmark();
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("video_000 ") && lines[0].ends_with(" 4 64 64"));
    for f in [
        "frame_00000.ppm",
        "frame_00003.ppm",
        "gt.tedl",
        "oracle_motion.tedf",
        "oracle_appearance.tedf",
    ] {
        assert!(data.join("video_001").join(f).is_file(), "{f}");
    }
    assert!(!data.join("video_001").join("frame_00004.ppm").exists());
}

#[test]
fn propagate_then_eval() {
    let (dir, data) = small_benchmark();
    let v = data.join("video_000");
    let pred = dir.path().join("pred.tedl");
    let out = ok(&[
        "propagate",
        "--features",
        s(&v.join("oracle_motion.tedf")),
        "--labels",
        s(&v.join("gt.tedl")),
        "--out",
        s(&pred),
        "--profile",
        "kubric",
    ]);
    assert!(out.contains("wrote 4 frames"));
    let report = ok(&[
        "eval",
        "--preds",
        s(&pred),
        "--labels",
        s(&v.join("gt.tedl")),
    ]);
    assert!(report.lines().any(|l| l.starts_with("Jm=")));

    // identical predictions score perfectly
    let perfect = ok(&[
        "eval",
        "--preds",
        s(&v.join("gt.tedl")),
        "--labels",
        s(&v.join("gt.tedl")),
    ]);
    assert!(
        perfect.contains("Jm=1.000000\nFm=1.000000\nJFm=1.000000\n"),
        "{perfect}"
    );

    let csv = dir.path().join("scores.csv");
    let file_report = dir.path().join("report.txt");
    ok(&[
        "eval",
        "--preds",
        s(&pred),
        "--labels",
        s(&v.join("gt.tedl")),
        "--out",
        s(&file_report),
        "--csv",
        s(&csv),
    ]);
    assert_eq!(fs::read_to_string(&file_report).unwrap(), report);
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().next(), Some("video,object,frame,J,F"));
    assert_eq!(rows.lines().count(), 1 + 2 * 3);
}

#[test]
fn propagate_is_deterministic() {
    let (dir, data) = small_benchmark();
    let v = data.join("video_001");
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        ok(&[
            "propagate",
            "--threads",
            threads,
            "--features",
            s(&v.join("oracle_motion.tedf")),
            "--features-appearance",
            s(&v.join("oracle_appearance.tedf")),
            "--labels",
            s(&v.join("gt.tedl")),
            "--out",
            s(&out),
            "--lambda",
            "0.5",
        ]);
        fs::read(out).unwrap()
    };
    assert_eq!(run("a.tedl", "1"), run("b.tedl", "2"));
}

#[test]
fn propagate_stitches_clip_files() {
    let (dir, data) = small_benchmark();
    let v = data.join("video_000");
    let whole = load_feature_volume(&v.join("oracle_motion.tedf")).unwrap();
    let plan = plan_clips(4, 3, 1).unwrap();
    let mut args: Vec<String> = vec!["propagate".into()];
    for (k, clip) in split_features(&plan, &whole).unwrap().iter().enumerate() {
        let p = dir.path().join(format!("clip{k}.tedf"));
        save_feature_volume(&p, clip).unwrap();
        args.extend(["--features".into(), s(&p).into()]);
    }
    let stitched = dir.path().join("stitched.tedl");
    let direct = dir.path().join("direct.tedl");
    let gt = s(&v.join("gt.tedl")).to_string();
    args.extend([
        "--labels".into(),
        gt.clone(),
        "--window".into(),
        "3".into(),
        "--overlap".into(),
        "1".into(),
    ]);
    args.extend(["--out".into(), s(&stitched).into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    ok(&[
        "propagate",
        "--features",
        s(&v.join("oracle_motion.tedf")),
        "--labels",
        &gt,
        "--out",
        s(&direct),
    ]);
    assert_eq!(fs::read(stitched).unwrap(), fs::read(direct).unwrap());
}

#[test]
fn timing_report_goes_to_stderr() {
    let (dir, data) = small_benchmark();
    let v = data.join("video_000");
    let out = labelprop(&[
        "propagate",
        "--features",
        s(&v.join("oracle_motion.tedf")),
        "--labels",
        s(&v.join("gt.tedl")),
        "--out",
        s(&dir.path().join("p.tedl")),
        "--profile-timing",
    ]);
    assert!(out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let frames: Vec<&str> = err.lines().map(|l| l.split(' ').nth(1).unwrap()).collect();
    assert_eq!(frames, ["2", "3", "4"]);
}

#[test]
fn shape_mismatch_leaves_no_output() {
    let (dir, data) = small_benchmark();
    let v = data.join("video_000");
    let small = dir.path().join("small.tedl");
    save_label_grid(
        &small,
        &MaskSequence::new(4, 8, 8, 2, vec![0; 4 * 64]).unwrap(),
    )
    .unwrap();
    let out = dir.path().join("pred.tedl");
    let err = fails_with(
        &[
            "propagate",
            "--features",
            s(&v.join("oracle_motion.tedf")),
            "--labels",
            s(&small),
            "--out",
            s(&out),
        ],
        5,
    );
    assert!(err.contains("shape error"));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn failure_classes_have_distinct_exit_codes() {
    let (dir, data) = small_benchmark();
    let gt = data.join("video_000").join("gt.tedl");
    let missing = dir.path().join("nope.tedl");
    let err = fails_with(&["eval", "--preds", s(&missing), "--labels", s(&gt)], 3);
    assert!(err.contains("missing file") && err.contains("nope.tedl"));

    let garbage = dir.path().join("garbage.tedl");
    fs::write(&garbage, b"not a label grid").unwrap();
    assert!(
        fails_with(&["eval", "--preds", s(&garbage), "--labels", s(&gt)], 4)
            .contains("format error")
    );

    let feats = data.join("video_000").join("oracle_motion.tedf");
    let out = dir.path().join("x.tedl");
    let args = [
        "propagate",
        "--features",
        s(&feats),
        "--features-appearance",
        s(&feats),
        "--labels",
        s(&gt),
    ];
    let mut bad_lambda = args.to_vec();
    bad_lambda.extend(["--out", s(&out), "--lambda", "1.5"]);
    assert!(fails_with(&bad_lambda, 6).contains("config error"));
    assert!(!out.exists());

    assert_eq!(labelprop(&["propagate"]).status.code(), Some(2));
}

#[test]
fn sweep_tables() {
    let (dir, data) = small_benchmark();
    let csv = ok(&[
        "sweep",
        "--data",
        s(&data),
        "--axis",
        "lambda",
        "--values",
        "0,0.5,1",
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "video,axis,value,Jm,Fm,JFm");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("all,lambda,0,"));
    assert!(lines[3].starts_with("all,lambda,1,"));

    let out = dir.path().join("overlap.csv");
    ok(&[
        "sweep",
        "--data",
        s(&data),
        "--axis",
        "overlap",
        "--values",
        "0,2",
        "--window",
        "3",
        "--out",
        s(&out),
        "--per-video",
    ]);
    let table = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 + 4);
    assert!(
        rows[2].starts_with("video_000,overlap,0,") && rows[3].starts_with("video_000,overlap,2,")
    );

    let err = fails_with(
        &[
            "sweep",
            "--data",
            s(&data),
            "--axis",
            "tau",
            "--values",
            "300,900",
        ],
        6,
    );
    assert!(
        err.contains("motion_tau300.tedf")
            && err.contains("motion_tau900.tedf")
            && err.contains("video_001")
    );

    fails_with(
        &[
            "sweep",
            "--data",
            s(&data),
            "--axis",
            "lambda",
            "--values",
            "2",
        ],
        6,
    );
}

#[test]
fn config_file_defaults_and_flag_precedence() {
    let (dir, data) = small_benchmark();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# sweep defaults\nlambda = 7\nwindow=3\n").unwrap();
    let args = [
        "sweep",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--axis",
        "overlap",
        "--values",
        "0",
    ];
    fails_with(&args, 6);
    let mut with_flag = args.to_vec();
    with_flag.extend(["--lambda", "1"]);
    assert_eq!(ok(&with_flag).lines().count(), 2);

    fs::write(&cfg, "lambda 1\n").unwrap();
    fails_with(&args, 6);
}

#[test]
fn bench_reports_summary() {
    let (_dir, data) = small_benchmark();
    let out = ok(&[
        "bench",
        "--data",
        s(&data),
        "--source",
        "motion",
        "--profile",
        "kubric",
    ]);
    assert!(out.contains("profile=kubric videos=2 objects=4"));
    assert!(out.lines().any(|l| l.starts_with("seconds=")));
}

#[test]
fn viz_outputs() {
    let (dir, data) = small_benchmark();
    let v = data.join("video_000");
    let pca = dir.path().join("pca");
    ok(&[
        "viz",
        "pca",
        "--features",
        s(&v.join("oracle_motion.tedf")),
        "--features-appearance",
        s(&v.join("oracle_appearance.tedf")),
        "--out",
        s(&pca),
    ]);
    assert!(
        pca.join("a").join("frame_00003.ppm").is_file()
            && pca.join("b").join("frame_00000.ppm").is_file()
    );

    let overlay = dir.path().join("overlay");
    ok(&[
        "viz",
        "overlay",
        "--frames",
        s(&v),
        "--labels",
        s(&v.join("gt.tedl")),
        "--out",
        s(&overlay),
        "--alpha",
        "0.6",
    ]);
    let a = fs::read(overlay.join("frame_00000.ppm")).unwrap();
    let b = fs::read(v.join("frame_00000.ppm")).unwrap();
    assert_eq!(a.len(), b.len());
    assert_ne!(a, b);
}
