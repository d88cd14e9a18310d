use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn crystal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crystal"))
        .args(args)
        .output()
        .expect("spawn crystal")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    let o = crystal(&[
        "synth",
        "--out",
        p(dir),
        "--train-subjects",
        "4",
        "--test-subjects",
        "6",
        "--dim",
        "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn alpha_bound_prints_four_decimals() {
    let o = crystal(&["alpha-bound", "13403", "0.9"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "11.7003");
}

#[test]
fn exit_codes() {
    assert_eq!(crystal(&["--help"]).status.code(), Some(0));
    assert_eq!(crystal(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        crystal(&["alpha-bound", "13403", "1.5"]).status.code(),
        Some(1)
    );
    assert_eq!(crystal(&["alpha-bound", "2", "0.9"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let o = crystal(&[
        "pool",
        "--input",
        p(&missing),
        "--out",
        p(&dir.path().join("o.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "lambda = 0.2\ngamma = 0.8\n").unwrap();
    let out = dir.path().join("eval");
    let (features, pairs) = (dir.path().join("test.csv"), dir.path().join("pairs.csv"));
    let base = [
        "eval-verify",
        "--features",
        p(&features),
        "--pairs",
        p(&pairs),
        "--out",
        p(&out),
    ];
    let mut args = base.to_vec();
    args.extend(["--config", p(&cfg)]);
    let o = crystal(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));

    let mut args = base.to_vec();
    args.extend(["--set", "det_threshold=2"]);
    let o = crystal(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("det_threshold"), "{}", stderr(&o));
}

#[test]
fn lambda_zero_equals_media_average_on_single_item_media() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    fs::write(
        &input,
        "subject_id,template_id,media_id,detection_score,f0,f1\n\
         a,t1,m1,0.9,1,0\n\
         a,t1,m2,0.3,0,1\n\
         a,t1,m3,0.6,0.5,0.5\n\
         b,t2,m4,0.8,-1,2\n",
    )
    .unwrap();
    let (q, m) = (dir.path().join("q.csv"), dir.path().join("m.csv"));
    assert!(crystal(&[
        "pool",
        "--input",
        p(&input),
        "--out",
        p(&q),
        "--lambda",
        "0"
    ])
    .status
    .success());
    assert!(crystal(&[
        "pool",
        "--input",
        p(&input),
        "--out",
        p(&m),
        "--media-average"
    ])
    .status
    .success());
    assert_eq!(
        fs::read_to_string(&q).unwrap(),
        fs::read_to_string(&m).unwrap()
    );
}

#[test]
fn evaluation_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = crystal(&[
            "eval-identify",
            "--features",
            p(&dir.path().join("test.csv")),
            "--gallery",
            p(&dir.path().join("gallery_open.txt")),
            "--probes",
            p(&dir.path().join("probes.txt")),
            "--open-set",
            "--set",
            "attenuate=true",
            "--out",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (
            stdout(&o),
            fs::read(out.join("open_set.csv")).unwrap(),
            fs::read(out.join("cmc.csv")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn grad_check_passes() {
    let o = crystal(&["grad-check", "--configs", "12", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn sweep_prints_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = crystal(&[
        "sweep",
        "--features",
        p(&dir.path().join("test.csv")),
        "--pairs",
        p(&dir.path().join("pairs.csv")),
        "--param",
        "gamma",
        "--values",
        "1,1.2",
        "--far",
        "0.1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines[0], "gamma,tar@1e-1");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("1.2,"));
}
