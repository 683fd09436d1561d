use std::path::Path;
use std::process::Command;

use bundleflow::cli::{run_scenario, RunArgs};
use bundleflow::config::RunConfig;
use bundleflow::flow::read_checkpoint;

const DIAG: &str = "[[[[2.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.5, 0.0]]]]";
const JORDAN: &str = "[[[[1.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]]]]";

fn circle_config(sites: usize, monodromy: &str, extra_solver: &str) -> String {
    format!(
        r#"scenario = "solve_harmonic"
[domain]
kind = "circle"
sites = [{sites}]
lengths = [1.0]
[bundle]
rank = 2
monodromy = {monodromy}
[initial]
kind = "random"
amplitude = 0.4
[solver]
tol = 1e-9
{extra_solver}
"#
    )
}

fn bin(config: &str, dir: &Path, extra: &[&str]) -> (i32, String) {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bundleflow"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn report_value(report: &str, key: &str) -> f64 {
    let line = report.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no `{key}` in {report}"));
    line[key.len()..].trim().parse().unwrap()
}

fn run(cfg: &str, out: &Path, resume: Option<&Path>) -> bundleflow::cli::Outcome {
    let cfg = RunConfig::parse(cfg).unwrap();
    run_scenario(&cfg, &RunArgs { resume: resume.map(Path::to_path_buf), out: Some(out.to_path_buf()), seed: Some(5) })
        .unwrap()
}

#[test]
fn circle_scenario_converges() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = bin(&circle_config(24, DIAG, ""), dir.path(), &["--threads", "2", "--seed", "3"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("verdict: converged"));
    assert!(report_value(&text, "final residual sup:") < 1e-9);
    for f in ["run.csv", "report.txt", "final.ckpt"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("out/run.csv")).unwrap();
    assert!(csv.starts_with("# bundleflow run.csv v1\nstep,time,dt,energy"));
}

#[test]
fn jordan_block_scenario_diverges() {
    // the metric escapes logarithmically; a small threshold detects it fast
    let dir = tempfile::tempdir().unwrap();
    let cfg = circle_config(16, JORDAN, "divergence_threshold = 4.0\n")
        .replace("tol = 1e-9", "tol = 1e-12")
        .replace("kind = \"random\"\namplitude = 0.4", "kind = \"identity\"");
    let (code, text) = bin(&cfg, dir.path(), &[]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("verdict: diverged"));
    assert!(report_value(&text, "sup |log h|:") > 4.0);
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = circle_config(16, DIAG, "").replace(&format!("monodromy = {DIAG}"), "");
    let (code, text) = bin(&cfg, dir.path(), &[]);
    assert_eq!(code, 1);
    assert!(text.contains("bundle.monodromy"), "{text}");
    let (code, _) = bin(&circle_config(16, DIAG, ""), dir.path(), &["--bogus"]);
    assert_eq!(code, 1);
    let (code, text) = bin(&circle_config(16, DIAG, ""), dir.path(), &["--resume", "/nonexistent.ckpt"]);
    assert_eq!(code, 1, "{text}");
}

#[test]
fn split_run_replays_unsplit_run() {
    let base = circle_config(20, DIAG, "policy = \"adaptive\"\nmax_steps = 400\n");
    let whole = tempfile::tempdir().unwrap();
    run(&base, whole.path(), None);

    let split = tempfile::tempdir().unwrap();
    run(&base.replace("max_steps = 400", "max_steps = 150"), split.path(), None);
    let ck = split.path().join("first.ckpt");
    std::fs::rename(split.path().join("final.ckpt"), &ck).unwrap();
    let o = run(&base, split.path(), Some(&ck));
    assert!(o.report.contains("resumed at step 150"));

    let read = |p: &Path| read_checkpoint(std::io::BufReader::new(std::fs::File::open(p).unwrap())).unwrap();
    let a = read(&whole.path().join("final.ckpt"));
    let b = read(&split.path().join("final.ckpt"));
    assert_eq!(a.meta.step, b.meta.step);
    for (x, y) in a.h.0.iter().zip(&b.h.0) {
        assert!((x - y).norm() <= 1e-12);
    }
    let csv_a = std::fs::read_to_string(whole.path().join("run.csv")).unwrap();
    let csv_b = std::fs::read_to_string(split.path().join("run.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn periodic_checkpoints_do_not_change_the_run() {
    let base = circle_config(20, DIAG, "max_steps = 300\n");
    let plain = tempfile::tempdir().unwrap();
    run(&base, plain.path(), None);
    let chunked = tempfile::tempdir().unwrap();
    run(&format!("{base}[output]\ncheckpoint_every = 100\n"), chunked.path(), None);
    assert!(chunked.path().join("step_100.ckpt").exists());
    assert!(chunked.path().join("step_200.ckpt").exists());
    for f in ["run.csv", "final.ckpt"] {
        assert_eq!(
            std::fs::read(plain.path().join(f)).unwrap(),
            std::fs::read(chunked.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_checks_rank_and_flags_policy_change() {
    let base = circle_config(16, DIAG, "max_steps = 50\n");
    let dir = tempfile::tempdir().unwrap();
    run(&base, dir.path(), None);
    let ck = dir.path().join("final.ckpt");

    let cfg = RunConfig::parse(&format!("{base}dt = 1e-4\n").replace("max_steps = 50", "max_steps = 80")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = run_scenario(&cfg, &RunArgs { resume: Some(ck.clone()), out: Some(out.path().into()), seed: Some(5) }).unwrap();
    assert!(o.report.contains("policy changed on resume"), "{}", o.report);

    let rank1 = r#"scenario = "solve_harmonic"
[domain]
kind = "circle"
sites = [16]
lengths = [1.0]
[bundle]
rank = 1
monodromy = [[[[2.0, 0.0]]]]
"#;
    let cfg = RunConfig::parse(rank1).unwrap();
    let e = run_scenario(&cfg, &RunArgs { resume: Some(ck), out: Some(out.path().into()), seed: None }).unwrap_err();
    assert!(e.to_string().contains("rank"), "{e}");
}

#[test]
fn identical_configs_give_identical_csv() {
    let cfg = circle_config(20, DIAG, "max_steps = 200\n");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    bin(&cfg, a.path(), &["--threads", "1", "--seed", "9"]);
    bin(&cfg, b.path(), &["--threads", "1", "--seed", "9"]);
    assert_eq!(
        std::fs::read(a.path().join("out/run.csv")).unwrap(),
        std::fs::read(b.path().join("out/run.csv")).unwrap()
    );
}

#[test]
fn other_scenarios_run() {
    let dirichlet = r#"scenario = "dirichlet"
[domain]
kind = "rectangle"
sites = [8, 8]
lengths = [1.0, 1.0]
[bundle]
rank = 2
monodromy = []
[reference]
kind = "random"
amplitude = 0.5
[initial]
kind = "identity"
[solver]
tol = 1e-8
"#;
    let d = tempfile::tempdir().unwrap();
    let o = run(dirichlet, d.path(), None);
    assert_eq!(o.status, 0);
    assert!(o.report.contains("verdict: converged"), "{}", o.report);

    let stability = r#"scenario = "stability"
[domain]
kind = "circle"
sites = [32]
lengths = [1.0]
[bundle]
rank = 2
monodromy = [[[[4.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.25, 0.0]]]]
"#;
    let d = tempfile::tempdir().unwrap();
    let o = run(stability, d.path(), None);
    assert!(o.report.contains("verdict: strictly semistable"), "{}", o.report);
    assert!(d.path().join("stability.csv").exists());

    let higgs = r#"scenario = "higgs_roundtrip"
[domain]
kind = "torus"
sites = [8, 8]
lengths = [1.0, 1.0]
[bundle]
rank = 2
monodromy = [[[[2.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.5, 0.0]]], [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]]]]
[solver]
tol = 1e-10
"#;
    let d = tempfile::tempdir().unwrap();
    let o = run(higgs, d.path(), None);
    assert_eq!(o.status, 0);
    assert!(report_value(&o.report, "holonomy eigenvalue deviation:") < 1e-6, "{}", o.report);
    let ck = read_checkpoint(std::io::BufReader::new(std::fs::File::open(d.path().join("final.ckpt")).unwrap())).unwrap();
    assert_eq!(ck.blocks[0].0, "theta");

    let exhaustion = r#"scenario = "exhaustion"
[domain]
kind = "annulus"
sites = [8, 8]
lengths = [1.0, 1.0]
[bundle]
rank = 2
monodromy = [[[[2.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.5, 0.0]]]]
[exhaustion]
levels = [0.5, 0.8]
[solver]
tol = 1e-8
"#;
    let d = tempfile::tempdir().unwrap();
    let o = run(exhaustion, d.path(), None);
    assert_eq!(o.status, 0);
    assert!(o.report.contains("level,interior_sites"), "{}", o.report);
}
