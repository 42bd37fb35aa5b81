use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use logomr::metrics::count_flops;
use logomr::model_io::load_model;
use logomr::volume::{Plane, Volume};

const TINY: &str = "\
dims = 16x16x16
exams = 40
frac_short = 0.4
frac_long = 0.2
frac_healthy = 0.3
frac_censored = 0.1
widths = 4,8
heads = 2
layers = 1
gap = 2
lr = 1e-3
epochs = 2
patience = 2
seed = 3
";

fn logomr(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_logomr"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = logomr(args);
    assert_eq!(code, 0, "{args:?} failed: {stderr}");
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn generate_train_eval_single_plane() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cohort = dir.path().join("cohort");
    ok(&["generate", "--config", s(&cfg), "--out", s(&cohort)]);
    for name in ["manifest", "train", "val", "test"] {
        assert_eq!(
            header(&cohort.join(format!("{name}.csv"))),
            "exam_id,patient_id,volume_path,event_year,followup_years"
        );
    }
    let first = Volume::load(cohort.join("exam_0000.vol")).unwrap();
    assert_eq!(first.dims(), [16, 16, 16]);

    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--cohort", s(&cohort), "--out", s(&run)]);
    assert_eq!(header(&run.join("train_log.csv")), "epoch,train_loss,val_cindex,elapsed_seconds");
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().nth(1).unwrap().starts_with("0,,"));

    let eval = dir.path().join("eval");
    let model = run.join("model.lgmm");
    ok(&[
        "eval", "--model", s(&model), "--cohort", s(&cohort), "--split", "val", "--bootstrap", "50", "--out", s(&eval),
    ]);
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "metric,horizon,point,ci_low,ci_high,B,seed");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("cindex,,"));
    for (m, line) in lines[2..].iter().enumerate() {
        assert!(line.starts_with(&format!("auc,{},", m + 1)));
        assert!(line.ends_with(",50,0"));
    }
    assert_eq!(
        header(&eval.join("predictions.csv")),
        "exam_id,p_1,p_2,p_3,p_4,p_5,p_6,risk_1,risk_2,risk_3,risk_4,risk_5"
    );

    let (code, _, err) = logomr(&["saliency", "--model", s(&model), "--volume", s(&cohort.join("exam_0000.vol")),
        "--out-volume", s(&dir.path().join("sal.vol")), "--out-mip-prefix", s(&dir.path().join("m_"))]);
    assert_eq!(code, 2, "{err}");

    let row = ok(&["bench", "--model", s(&model), "--volume", s(&cohort.join("exam_0000.vol")), "--reps", "2"]);
    let fields: Vec<&str> = row.trim().split(',').collect();
    assert_eq!(fields[0], "axial");
    let cfg = load_model(&model).unwrap();
    assert_eq!(fields[1].parse::<u64>().unwrap(), count_flops(cfg.config(), [16, 16, 16], Plane::Axial));
    assert!(fields[2].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn tri_plane_training_saliency_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1\n");
    let cohort = dir.path().join("cohort");
    ok(&["generate", "--config", s(&cfg), "--out", s(&cohort)]);
    let run = dir.path().join("tri");
    ok(&["train", "--config", s(&cfg), "--cohort", s(&cohort), "--plane", "all", "--out", s(&run)]);
    for plane in Plane::ALL {
        assert!(run.join(format!("train_log_{plane}.csv")).exists());
    }
    let model = run.join("model.lgmm");
    let vol = cohort.join("exam_0001.vol");
    let prefix = dir.path().join("mip_");
    let sal = dir.path().join("sal.vol");
    ok(&["saliency", "--model", s(&model), "--volume", s(&vol), "--out-volume", s(&sal), "--out-mip-prefix", s(&prefix)]);
    let map = Volume::load(&sal).unwrap();
    assert_eq!(map.dims(), [16, 16, 16]);
    assert!((map.voxels().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for kind in ["input", "saliency", "mask"] {
        for plane in Plane::ALL {
            let bytes = fs::read(format!("{}{kind}_{plane}.pgm", prefix.display())).unwrap();
            assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
            assert_eq!(bytes.len(), 13 + 256);
        }
    }
    let alpha = fs::read_to_string(format!("{}alpha.csv", prefix.display())).unwrap();
    assert_eq!(alpha.lines().next().unwrap(), "plane,index,weight");
    assert_eq!(alpha.lines().count(), 1 + 48);

    let row = ok(&["bench", "--model", s(&model), "--volume", s(&vol), "--reps", "2"]);
    let fields: Vec<&str> = row.trim().split(',').collect();
    assert_eq!(fields[0], "axial+coronal+sagittal");
    let m = load_model(&model).unwrap();
    let per_plane: u64 = Plane::ALL.iter().map(|&p| count_flops(m.config(), [16, 16, 16], p)).sum();
    assert_eq!(fields[1].parse::<u64>().unwrap(), per_plane);

    let eval = dir.path().join("eval");
    ok(&["eval", "--model", s(&model), "--cohort", s(&cohort), "--split", "val", "--bootstrap", "20", "--out", s(&eval)]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "learning_rate = 1\n").unwrap();
    let out = dir.path().join("x");
    assert_eq!(logomr(&["generate", "--config", s(&bad), "--out", s(&out)]).0, 2);
    assert_eq!(logomr(&["generate", "--bogus-flag"]).0, 2);
    assert_eq!(logomr(&["--help"]).0, 0);
    let missing = dir.path().join("missing.cfg");
    assert_eq!(logomr(&["generate", "--config", s(&missing), "--out", s(&out)]).0, 3);

    let cfg = write_config(dir.path(), "");
    assert_eq!(
        logomr(&["train", "--config", s(&cfg), "--cohort", s(&dir.path().join("nowhere")), "--out", s(&out)]).0,
        3
    );
    fs::write(dir.path().join("junk.lgmm"), b"LGMM\x07\x00").unwrap();
    let (code, _, _) = logomr(&[
        "bench", "--model", s(&dir.path().join("junk.lgmm")), "--volume", s(&dir.path().join("v.vol")),
    ]);
    assert_eq!(code, 3);

    let cohort = dir.path().join("cohort");
    ok(&["generate", "--config", s(&cfg), "--out", s(&cohort)]);
    let blowup = write_config(dir.path(), "lr = 1e300\nepochs = 3\n");
    let (code, _, err) = logomr(&["train", "--config", s(&blowup), "--cohort", s(&cohort), "--out", s(&out)]);
    assert_eq!(code, 4, "{err}");

    // A cohort without year-1 events leaves the 1-year AUC undefined.
    let no_short = dir.path().join("noshort.cfg");
    fs::write(&no_short, TINY.replace("frac_short = 0.4", "frac_short = 0.0").replace("frac_healthy = 0.3", "frac_healthy = 0.7")).unwrap();
    let cohort2 = dir.path().join("cohort2");
    ok(&["generate", "--config", s(&no_short), "--out", s(&cohort2)]);
    let run = dir.path().join("run2");
    ok(&["train", "--config", s(&no_short), "--cohort", s(&cohort2), "--out", s(&run)]);
    let (code, _, err) = logomr(&[
        "eval", "--model", s(&run.join("model.lgmm")), "--cohort", s(&cohort2), "--bootstrap", "10", "--out", s(&out),
    ]);
    assert_eq!(code, 5, "{err}");
}

#[test]
fn generation_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "exams = 12\n");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["generate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["generate", "--config", s(&cfg), "--out", s(&b)]);
    ok(&["generate", "--config", s(&cfg), "--out", s(&c), "--seed", "99"]);
    for name in ["manifest.csv", "train.csv", "exam_0003.vol"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    assert_ne!(fs::read(a.join("exam_0003.vol")).unwrap(), fs::read(c.join("exam_0003.vol")).unwrap());
}
