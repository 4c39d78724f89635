use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use plainmatte::data::io::{load_gray, save_gray_png, save_rgb_png};
use plainmatte::plane::Plane;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_plainmatte"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().unwrap_or("")).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero_everywhere() {
    for sub in ["", "train", "eval", "infer", "flops", "dataset-build", "serve"] {
        let mut args: Vec<&str> = if sub.is_empty() { vec![] } else { vec![sub] };
        args.push("--help");
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{sub} --help");
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("--seed") && text.contains("--json"), "{sub} must accept --seed and --json");
    }
}

#[test]
fn usage_errors_exit_one() {
    let o = run(&["infer", "--image", "x.png", "--out", "a.png"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&["flops", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["flops", "--res", "12"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    let o = run(&["flops", "--globals", "99", "--json"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&o)["error"]["code"], "usage");
}

#[test]
fn runtime_errors_exit_two_with_json_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["infer", "--image", "/nonexistent.png", "--trimap", "/nonexistent.png", "--out", p(&dir.path().join("a.png")), "--json"]);
    assert_eq!(o.status.code(), Some(2));
    let v = json(&o);
    assert_eq!(v["error"]["code"], "runtime");
    assert!(v["error"]["message"].as_str().unwrap().contains("nonexistent"));
}

#[test]
fn flops_four_globals_is_half_of_all_global() {
    let o = run(&["flops", "--preset", "vits", "--res", "2048x2048", "--globals", "4", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v = json(&o);
    let r = v["ratio_vs_all_global"].as_f64().unwrap();
    assert!((r - 0.50).abs() < 0.02, "ratio {r}");
    assert_eq!(v["globals"], 4);
    let macs = v["macs"].as_f64().unwrap();
    assert!((macs / 1.65e12 - 1.0).abs() < 0.05, "macs {macs}");
}

#[test]
fn flops_monotone_and_grid_lowers_memory() {
    let get = |g: &str, strategy: &str| {
        json(&run(&["flops", "--preset", "vits", "--res", "1024x1024", "--globals", g, "--strategy", strategy, "--json"]))
    };
    let flops: Vec<f64> = ["0", "2", "4", "8", "12"].iter().map(|g| get(g, "normal")["flops"].as_f64().unwrap()).collect();
    assert!(flops.windows(2).all(|w| w[0] < w[1]), "{flops:?}");
    let normal = get("4", "normal")["peak_memory_bytes"].as_f64().unwrap();
    let grid = get("4", "grid")["peak_memory_bytes"].as_f64().unwrap();
    assert!(grid < normal);
    let o = run(&["flops", "--res", "512x512", "--decoder", "sfp"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("decoder.pyramid"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "preset = \"vits\"\n[backbone]\nglobal_blocks = 2\n").unwrap();
    let from_file = json(&run(&["flops", "--config", p(&cfg), "--res", "512x512", "--json"]));
    assert_eq!(from_file["globals"], 2);
    let flagged = json(&run(&["flops", "--config", p(&cfg), "--res", "512x512", "--globals", "4", "--json"]));
    assert_eq!(flagged["globals"], 4);
    std::fs::write(&cfg, "[backbone]\nglobals = 2\n").unwrap();
    assert_eq!(run(&["flops", "--config", p(&cfg)]).status.code(), Some(2));
}

fn write_pair(dir: &Path) -> (String, String) {
    let img = Plane::from_fn(3, 40, 24, |c, y, x| ((c * 5 + y + 2 * x) % 9) as f32 / 8.0).unwrap();
    let tri = Plane::from_fn(1, 40, 24, |_, y, _| [0.0, 0.5, 1.0][y * 3 / 40]).unwrap();
    let (i, t) = (dir.join("img.png"), dir.join("tri.png"));
    save_rgb_png(&i, &img).unwrap();
    save_gray_png(&t, &tri).unwrap();
    (p(&i).to_string(), p(&t).to_string())
}

#[test]
fn eval_identical_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (_, tri) = write_pair(dir.path());
    let a = dir.path().join("a.png");
    save_gray_png(&a, &Plane::from_fn(1, 40, 24, |_, y, x| ((y * 24 + x) % 256) as f32 / 255.0).unwrap()).unwrap();
    let o = run(&["eval", "--pred", p(&a), "--gt", p(&a), "--trimap", &tri, "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v = json(&o);
    for k in ["sad", "mse", "grad", "conn"] {
        assert_eq!(v["mean"][k], 0.0, "{k}");
        assert_eq!(v["images"][0][k], 0.0, "{k}");
    }
    assert!(v["images"][0]["pixels"].as_u64().unwrap() > 0);
}

#[test]
fn dataset_build_is_seeded() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["dataset-build", "--out", p(d), "--count", "3", "--backgrounds", "2", "--size", "32x48", "--seed", "5", "--json"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let side: Value = serde_json::from_str(&std::fs::read_to_string(a.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(side["seed"], 5);
    for sub in ["fg", "alpha", "trimap"] {
        for i in 0..3 {
            let name = format!("{sub}/fg_{i:04}.png");
            assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name}");
        }
    }
    let t = load_gray(&a.join("trimap/fg_0000.png")).unwrap();
    assert_eq!(t.dims(), (32, 48));
    assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0 || (v - 128.0 / 255.0).abs() < 1e-6));
}

#[test]
fn train_resume_then_infer() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let ckpt = root.path().join("ckpt");
    assert_eq!(run(&["dataset-build", "--out", p(&data), "--count", "2", "--backgrounds", "1", "--size", "64x64"]).status.code(), Some(0));

    let common = ["train", "--data", p(&data), "--out", p(&ckpt), "--steps-per-epoch", "1", "--batch-size", "2", "--seed", "3", "--json"];
    let o = bin().args(common).args(["--epochs", "2"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["event"], "epoch");
    assert!(lines[1]["loss"]["total"].as_f64().unwrap().is_finite());
    assert_eq!(lines[2]["steps"], 2);

    let o = bin().args(common).args(["--epochs", "3", "--resume"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o)["steps"], 3);
    let log = std::fs::read_to_string(ckpt.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let (img, tri) = write_pair(root.path());
    for grid in [false, true] {
        let out = root.path().join(format!("alpha_{grid}.png"));
        let mut cmd = bin();
        cmd.args(["infer", "--image", &img, "--trimap", &tri, "--out", p(&out), "--checkpoint", p(&ckpt), "--json"]);
        if grid {
            cmd.arg("--grid-sample");
        }
        let o = cmd.output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(json(&o)["strategy"], if grid { "grid_sample" } else { "normal" });
        assert_eq!(load_gray(&out).unwrap().dims(), (40, 24));
    }
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_answers_healthz() {
    let port = 20000 + (std::process::id() % 20000) as u16;
    let mut child = bin()
        .args(["serve", "--addr", &format!("127.0.0.1:{port}"), "--seed", "1"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let mut reply = None;
    while Instant::now() < deadline {
        if let Some(r) = http_get(port, "/healthz") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    child.kill().ok();
    child.wait().ok();
    let reply = reply.expect("service did not come up");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"status\":\"ok\""));
}
