use std::path::Path;
use std::process::{Command, Output};

fn lts(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lts"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn lts")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn verify_product_reports_and_writes_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let out = lts(dir.path(), &["verify-product", "--samples", "1000000", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("bimodal.mean_inverse_abs_w"));
    assert!(text.contains("divergence.ratio"));
    for f in ["product_bimodal.csv", "product_divergence.csv"] {
        let csv = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(csv.starts_with("bin_value,density\n-1.00,"));
        assert_eq!(csv.lines().count(), 202);
    }
    let log = std::fs::read_to_string(dir.path().join("run.log")).unwrap();
    assert!(log.contains("seed = 7") && log.contains("tau = 0.7") && log.contains("status = ok"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lts(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn negative_tau_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = lts(dir.path(), &["prune", "--in", "pool.lts", "--tau", "-1", "--out", "p.lts"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("tau must be ≥ 0"));
}

#[test]
fn bad_config_values_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "sbr.l = 0\n").unwrap();
    let out = lts(dir.path(), &["--config", "bad.cfg", "gradcheck", "--suite", "nn"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sbr.l"));
    let out = lts(dir.path(), &["--set", "no_such_key=1", "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
    let missing = lts(dir.path(), &["prune", "--in", "absent.lts", "--out", "p.lts"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn gradcheck_suites_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = lts(dir.path(), &["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("PASS").count(), 5, "{text}");
}

/// Runs the whole command chain on a small scene, twice, and compares the
/// artifacts byte for byte.
#[test]
fn full_pipeline_is_reproducible() {
    let run = |dir: &Path| {
        std::fs::write(
            dir.join("desk.cfg"),
            "tau = 0.002\ndidl.lr = 0.001\ndidl.batch = 256\ndidl.first_epochs = 4\ndidl.later_epochs = 2\n\
             didl.iterations = 2\nsbr.lr = 0.001\nsbr.scales = 16,32\nsbr.batches = 32,8\nsbr.patches = 16,4\nsbr.l = 2\n",
        )
        .unwrap();
        let steps: Vec<Vec<&str>> = vec![
            vec!["synth", "--out", "scene", "--height", "32", "--width", "32", "--frames", "16", "--square", "6"],
            vec!["extract", "--frames", "scene/input", "--gt", "scene/groundtruth", "--stride", "4", "--out", "pool.lts"],
            vec!["prune", "--in", "pool.lts", "--out", "pruned.lts"],
            vec!["train-didl", "--pool", "pruned.lts", "--init-frac", "0.5", "--out", "didl.ltsm", "--report", "didl.csv"],
            vec!["infer", "--model", "didl.ltsm", "--frames", "scene/input", "--t", "5", "--out", "pred/bin000005.png"],
            vec!["train-sbr", "--synthetic", "1", "--epochs", "1", "--width", "4", "--out", "sbr.ltsm"],
            vec![
                "refine", "--didl", "didl.ltsm", "--sbr", "sbr.ltsm", "--frames", "scene/input", "--t", "6",
                "--out", "pred/bin000006.png", "--heatmap", "heat.png",
            ],
            vec!["evaluate", "--pred", "pred", "--gt", "scene/groundtruth", "--report", "scores.csv"],
        ];
        for step in steps {
            let mut args = vec!["--config", "desk.cfg", "--seed", "11"];
            args.extend(step.iter().copied());
            let out = lts(dir, &args);
            assert_eq!(out.status.code(), Some(0), "{step:?}: {}", stderr(&out));
        }
        ["didl.csv", "pred/bin000005.png", "pred/bin000006.png", "heat.png", "scores.csv", "didl.ltsm", "sbr.ltsm"]
            .iter()
            .map(|f| std::fs::read(dir.join(f)).unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(a.path());
    assert_eq!(first, run(b.path()));
    let scores = String::from_utf8(first[4].clone()).unwrap();
    assert!(scores.starts_with("video,frames_scored,TP,FP,FN,TN,precision,recall,f_measure\npred,2,"));
}
