use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cirbench"));
    c.env_remove("CIRBENCH_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--out-dir", p(&root)]);
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train(&self, kind: &str, epochs: &str) -> PathBuf {
        let ckpt = self.path(&format!("{kind}.ckpt"));
        ok(&[
            "train",
            "--features",
            p(&self.path("features.cfv")),
            "--train",
            p(&self.path("cap.synth.train.json")),
            "--kind",
            kind,
            "--d-model",
            "16",
            "--d-ff",
            "32",
            "--heads",
            "2",
            "--epochs",
            epochs,
            "--out",
            p(&ckpt),
        ]);
        ckpt
    }
}

#[test]
fn synth_stats_and_captions() {
    let ws = Workspace::new();
    let stats = ok(&[
        "stats",
        "--json",
        p(&ws.path("cap.synth.train.json")),
        p(&ws.path("cap.synth.val.json")),
    ]);
    let rows: Vec<serde_json::Value> = serde_json::from_str(&stats).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["split"], "train");
    assert_eq!(rows[0]["pairs_per_subset"], 9.0);
    let table = ok(&["stats", "--dialogue", p(&ws.path("cap.synth.val.json"))]);
    assert!(table.contains("100.0% of subsets"), "{table}");
    let captions = ok(&["analyze-captions", "--json", p(&ws.path("cap.synth.train.json"))]);
    let c: serde_json::Value = serde_json::from_str(&captions).unwrap();
    assert!(c["mean"].as_f64().unwrap() >= 3.0);
}

#[test]
fn local_eval_equals_gold_scoring_of_the_submission() {
    let ws = Workspace::new();
    let ckpt = ws.train("gated_residual", "2");
    let features = ws.path("features.cfv");
    let model = ["--checkpoint", p(&ckpt), "--features", p(&features)];
    let val = p(&ws.path("cap.synth.val.json")).to_string();
    let mut args = vec!["eval", "--json", "--dataset", &val];
    args.extend(model);
    let local = ok(&args);
    let sub = ws.path("sub.json");
    let mut args = vec!["retrieve", "--dataset", &val, "--out", p(&sub)];
    args.extend(model);
    ok(&args);
    let scored = ok(&["submit", "--json", "--submission", p(&sub), "--gold", &val]);
    assert_eq!(local, scored);
    let report: serde_json::Value = serde_json::from_str(&local).unwrap();
    assert_eq!(report["queries"], 72);

    let emb = ws.path("emb.jsonl");
    let mut args = vec!["embed", "--dataset", &val, "--out", p(&emb)];
    args.extend(model);
    ok(&args);
    let text = std::fs::read_to_string(&emb).unwrap();
    let queries = text.lines().filter(|l| l.contains("\"query\"")).count();
    assert_eq!(queries, 72);
}

#[test]
fn hidden_test_split_goes_through_the_server() {
    let ws = Workspace::new();
    let ckpt = ws.train("concat_mlp", "1");
    let test = p(&ws.path("cap.synth.test.json")).to_string();
    let gold = p(&ws.path("gold.synth.test.json")).to_string();
    let features = p(&ws.path("features.cfv")).to_string();
    let model = ["--checkpoint", p(&ckpt), "--features", &features, "--dataset", &test];

    let mut args = vec!["eval"];
    args.extend(model);
    assert_eq!(run(&args).status.code(), Some(2));

    let sub = ws.path("sub.json");
    let mut args = vec!["retrieve", "--out", p(&sub)];
    args.extend(model);
    ok(&args);

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let server = Server(bin().args(["serve", "--gold", &gold, "--addr", &addr]).spawn().unwrap());
    let deadline = Instant::now() + Duration::from_secs(20);
    while TcpStream::connect(&addr).is_err() {
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }
    let url = format!("http://{addr}");
    let remote = ok(&["submit", "--json", "--submission", p(&sub), "--server", &url]);
    let local = ok(&["submit", "--json", "--submission", p(&sub), "--gold", &gold]);
    assert_eq!(remote, local);

    let mut broken: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&sub).unwrap()).unwrap();
    let first = broken["rankings"].as_object().unwrap().keys().next().unwrap().clone();
    broken["rankings"].as_object_mut().unwrap().remove(&first);
    let bad = ws.path("bad.json");
    std::fs::write(&bad, broken.to_string()).unwrap();
    let out = run(&["submit", "--submission", p(&bad), "--server", &url]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("pair {first}")));
    drop(server);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn mining_pairs_and_splits() {
    let ws = Workspace::new();
    let subsets = ws.path("mined.json");
    let out = ok(&["mine", "--features", p(&ws.path("features.cfv")), "--count", "20", "--out", p(&subsets)]);
    assert!(out.contains("mined"));
    let mined: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&subsets).unwrap()).unwrap();
    assert!(!mined.is_empty());
    let pairs = ws.path("pairs.json");
    ok(&["pairs", "--subsets", p(&subsets), "--out", p(&pairs)]);
    let pairs: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&pairs).unwrap()).unwrap();
    assert_eq!(pairs.len(), 9 * mined.len());
    let split = ws.path("split.json");
    ok(&["split", "--subsets", p(&subsets), "--out", p(&split)]);
    let a: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&split).unwrap()).unwrap();
    assert_eq!(a["assignment"].as_object().unwrap().len(), mined.len());
}

#[test]
fn seed_environment_variable_overrides_the_default() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    bin().args(["synth", "--out-dir", p(a.path())]).output().unwrap();
    bin().args(["synth", "--out-dir", p(b.path())]).env("CIRBENCH_SEED", "99").output().unwrap();
    bin().args(["synth", "--out-dir", p(c.path()), "--seed", "99"]).output().unwrap();
    let read = |d: &Path| std::fs::read(d.join("features.cfv")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
    assert_eq!(read(b.path()), read(c.path()));
}

#[test]
fn exit_codes_follow_error_classes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["grad-check", "--kind", "nope"]).status.code(), Some(1));
    assert_eq!(run(&["stats", "/nonexistent/cap.val.json"]).status.code(), Some(2));
    let out = run(&["grad-check", "--kind", "concat_mlp", "--tolerance", "1e-15"]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&["grad-check", "--kind", "concat_mlp", "--kind", "transformer"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("all groups below"));
}

#[test]
fn diverging_training_exits_with_numerical_failure() {
    let ws = Workspace::new();
    let out = run(&[
        "train",
        "--features",
        p(&ws.path("features.cfv")),
        "--train",
        p(&ws.path("cap.synth.train.json")),
        "--kind",
        "concat_mlp",
        "--optimizer",
        "sgd",
        "--lr",
        "1e300",
        "--epochs",
        "1",
        "--out",
        p(&ws.path("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
