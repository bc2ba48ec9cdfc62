use std::fs;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use boxforge_core::review::{Decision, ReviewSession};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_boxforge"));
    c.env_remove("BOXFORGE_MANIFEST").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn image(path: &Path, w: u32, h: u32) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_pixel(w, h, image::Rgb([90, 90, 90]))
        .save(path)
        .unwrap();
}

/// 72 reviewed images (every eighth a negative) plus one unlabeled.
fn split_fixture(root: &Path) {
    for i in 0..72 {
        let img = root.join(format!("img_{i:03}.png"));
        image(&img, 8, 8);
        let text = if i % 8 == 0 {
            ""
        } else {
            "0 0.500000 0.500000 0.250000 0.250000\n"
        };
        fs::write(img.with_extension("txt"), text).unwrap();
    }
    image(&root.join("pending.png"), 8, 8);
}

#[test]
fn help_documents_file_formats_on_every_subcommand() {
    let expectations = [
        ("index", "<class_id> <cx> <cy> <w> <h>"),
        ("split", "empty label file"),
        ("crop", "JSON lines"),
        ("diagnose", "<class_id> <cx> <cy> <w> <h>"),
        ("eval", "best_f1_confidence"),
        ("import", "journal.jsonl"),
        ("serve", "/api/items"),
        ("export", "<class_id> <cx> <cy> <w> <h>"),
        ("ledger", "step,value"),
    ];
    for (cmd, needle) in expectations {
        let out = run(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd}");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains(needle), "{cmd} --help lacks `{needle}`");
    }
}

#[test]
fn usage_errors_exit_one_with_usage() {
    for args in [
        &["frobnicate"][..],
        &["split", "--root", "x"],
        &["index", "--root", "x", "--bogus"],
        &[],
    ] {
        let out = run(args);
        assert_eq!(code(&out), 1, "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("Usage"), "{args:?}: {err}");
    }
}

#[test]
fn index_classifies_the_tree() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    image(&root.join("a.png"), 10, 10);
    fs::write(
        root.join("a.txt"),
        "0 0.5 0.5 0.2 0.2\n0 1.0000004 0.5 0.2 0.2\n",
    )
    .unwrap();
    image(&root.join("b.png"), 10, 10);
    fs::write(root.join("b.txt"), "").unwrap();
    image(&root.join("c.png"), 10, 10);
    fs::write(root.join("stray.txt"), "0 0.5 0.5 0.2 0.2\n").unwrap();
    let out_dir = root.join("reports");
    let v = ok_json(&["index", "--root", s(root), "--out", s(&out_dir)]);
    assert_eq!(v["images"], 3);
    assert_eq!(
        (
            v["labeled"].as_u64(),
            v["negative"].as_u64(),
            v["unlabeled"].as_u64()
        ),
        (Some(1), Some(1), Some(1))
    );
    assert_eq!(v["boxes"], 2);
    assert_eq!(v["orphans"][0], "stray.txt");
    assert_eq!(v["clamped"][0]["line"], 2);
    assert!(out_dir.join("index.json").is_file());

    let strict = run(&["index", "--root", s(root), "--strict"]);
    assert_eq!(code(&strict), 1);
    let missing = run(&["index", "--root", s(&root.join("nope"))]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn split_is_reproducible_and_writes_lists() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    split_fixture(&root);
    let args = [
        "split",
        "--root",
        s(&root),
        "--ratio",
        "0.22",
        "--seed",
        "7",
    ];
    let first = run(&args);
    let second = run(&args);
    assert_eq!(code(&first), 0);
    assert_eq!(first.stdout, second.stdout);
    let v: Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(
        (v["val_count"].as_u64(), v["train_count"].as_u64()),
        (Some(16), Some(56))
    );

    let out = dir.path().join("lists");
    let mut with_out = args.to_vec();
    with_out.extend(["--out", s(&out)]);
    ok_json(&with_out);
    let val = fs::read_to_string(out.join("val.txt")).unwrap();
    assert_eq!(val.lines().count(), 16);
    assert!(val.lines().all(|l| Path::new(l).is_file()));
    assert_eq!(
        fs::read_to_string(out.join("train.txt"))
            .unwrap()
            .lines()
            .count(),
        56
    );

    let degenerate = run(&[
        "split",
        "--root",
        s(&root),
        "--ratio",
        "0.001",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&degenerate), 1);
}

fn write_dets(path: &Path, lines: &[&str]) {
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn eval_reports_metrics_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("val");
    image(&gt.join("a.png"), 100, 100);
    fs::write(
        gt.join("a.txt"),
        "0 0.25 0.25 0.2 0.2\n0 0.75 0.75 0.2 0.2\n",
    )
    .unwrap();
    image(&gt.join("b.png"), 100, 100);
    fs::write(gt.join("b.txt"), "").unwrap();
    let dets = dir.path().join("dets.jsonl");
    write_dets(
        &dets,
        &[
            r#"{"image_id":"a","class_id":0,"cx":0.25,"cy":0.25,"w":0.2,"h":0.2,"confidence":0.9}"#,
            r#"{"image_id":"b","class_id":0,"cx":0.5,"cy":0.5,"w":0.2,"h":0.2,"confidence":0.8}"#,
            r#"{"image_id":"a","class_id":0,"cx":0.75,"cy":0.75,"w":0.2,"h":0.2,"confidence":0.7}"#,
        ],
    );
    let out = dir.path().join("report");
    let v = ok_json(&[
        "eval",
        "--dets",
        s(&dets),
        "--gt",
        s(&gt),
        "--iou",
        "0.5:0.95:0.05",
        "--out",
        s(&out),
        "--iteration",
        "it1",
    ]);
    // Ranking TP, FP, TP: envelope 1 up to recall 0.5, then 2/3.
    let expected_ap = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    assert!((v["ap50"].as_f64().unwrap() - expected_ap).abs() < 1e-12);
    assert!((v["ap50_95"].as_f64().unwrap() - expected_ap).abs() < 1e-12);
    assert!((v["precision"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(v["recall"], 1.0);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("iteration,ap50,ap50_95,best_f1,best_f1_confidence\nit1,"));
    assert!(out.join("metrics.json").is_file());

    let csv_out = run(&[
        "eval",
        "--dets",
        s(&dets),
        "--gt",
        s(&gt),
        "--format",
        "csv",
        "--iteration",
        "it1",
    ]);
    assert_eq!(String::from_utf8(csv_out.stdout).unwrap(), csv);

    let bad = dir.path().join("bad.jsonl");
    write_dets(&bad, &[r#"{"image_id":"a","class_id":0,"cx":0.5}"#]);
    let out = run(&["eval", "--dets", s(&bad), "--gt", s(&gt)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    assert_eq!(
        code(&run(&[
            "eval",
            "--dets",
            s(&dir.path().join("none.jsonl")),
            "--gt",
            s(&gt)
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "eval",
            "--dets",
            s(&dets),
            "--gt",
            s(&gt),
            "--iou",
            "0.9:0.5:0.1"
        ])),
        1
    );
}

#[test]
fn diagnose_and_crop_follow_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("full");
    image(&root.join("street.png"), 400, 400);
    // Wheel at pixels (100,100)-(200,200) and a tiny one near the corner.
    fs::write(
        root.join("street.txt"),
        "0 0.375 0.375 0.25 0.25\n0 0.9 0.9 0.002 0.002\n",
    )
    .unwrap();
    let v = ok_json(&[
        "diagnose",
        "--root",
        s(&root),
        "--input-side",
        "512",
        "--min-px",
        "2",
    ]);
    assert_eq!(
        (v["boxes"].as_u64(), v["flagged"].as_u64()),
        (Some(2), Some(1))
    );
    assert_eq!(v["findings"][0]["box_index"], 1);

    let dets = dir.path().join("vehicles.jsonl");
    write_dets(
        &dets,
        &[
            // Car over (150,0)-(350,200); a person over the lower-left.
            r#"{"image_id":"street","class_id":2,"cx":0.625,"cy":0.25,"w":0.5,"h":0.5,"confidence":0.9}"#,
            r#"{"image_id":"street","class_id":0,"cx":0.25,"cy":0.75,"w":0.2,"h":0.2,"confidence":0.8}"#,
        ],
    );
    let out = dir.path().join("crops");
    let v = ok_json(&[
        "crop",
        "--root",
        s(&root),
        "--dets",
        s(&dets),
        "--out",
        s(&out),
        "--pad",
        "0",
    ]);
    assert_eq!(v["report"]["positive_written"], 1);
    assert_eq!(v["report"]["negative_written"], 1);
    assert_eq!(
        fs::read_to_string(out.join("street__roi_150_0_350_200.txt")).unwrap(),
        "0 0.125000 0.750000 0.250000 0.500000\n"
    );
    assert_eq!(
        fs::read_to_string(out.join("street__neg_60_260_140_340.txt")).unwrap(),
        ""
    );
    assert!(out.join("crop_report.json").is_file());
    let again = ok_json(&["index", "--root", s(&out)]);
    assert_eq!(
        (again["labeled"].as_u64(), again["negative"].as_u64()),
        (Some(1), Some(1))
    );
}

fn review_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let images = dir.join("images");
    image(&images.join("a.png"), 50, 50);
    image(&images.join("b.png"), 50, 50);
    let dets = dir.join("dets.jsonl");
    write_dets(
        &dets,
        &[
            r#"{"image_id":"a","class_id":0,"cx":0.3,"cy":0.3,"w":0.2,"h":0.2,"confidence":0.6}"#,
            r#"{"image_id":"a","class_id":0,"cx":0.7,"cy":0.7,"w":0.2,"h":0.2,"confidence":0.9}"#,
            r#"{"image_id":"b","class_id":0,"cx":0.5,"cy":0.5,"w":0.2,"h":0.2,"confidence":0.5}"#,
            r#"{"image_id":"b","class_id":0,"cx":0.1,"cy":0.1,"w":0.1,"h":0.1,"confidence":0.1}"#,
        ],
    );
    (images, dets)
}

#[test]
fn import_then_local_export() {
    let dir = tempfile::tempdir().unwrap();
    let (images, dets) = review_fixture(dir.path());
    let queue = dir.path().join("review/queue.json");
    let v = ok_json(&[
        "import",
        "--dets",
        s(&dets),
        "--images",
        s(&images),
        "--queue",
        s(&queue),
    ]);
    assert_eq!(
        (v["items"].as_u64(), v["dropped"].as_u64()),
        (Some(3), Some(1))
    );
    assert!(queue.with_extension("journal.jsonl").is_file());
    assert_eq!(
        code(&run(&[
            "import",
            "--dets",
            s(&dets),
            "--images",
            s(&images),
            "--queue",
            s(&queue)
        ])),
        1
    );

    let out = dir.path().join("reviewed");
    let pending = run(&["export", "--queue", s(&queue), "--out", s(&out)]);
    assert_eq!(code(&pending), 1);
    assert!(String::from_utf8_lossy(&pending.stderr).contains("pending"));

    let mut session = ReviewSession::open(&queue).unwrap();
    let ids: Vec<String> = session
        .queue()
        .items
        .iter()
        .map(|i| i.item_id.clone())
        .collect();
    session.decide(&ids[0], Decision::Accept).unwrap();
    session.decide(&ids[1], Decision::Reject).unwrap();
    session.decide(&ids[2], Decision::Reject).unwrap();
    let v = ok_json(&["export", "--queue", s(&queue), "--out", s(&out)]);
    assert_eq!(
        (v["labeled_images"].as_u64(), v["negative_images"].as_u64()),
        (Some(1), Some(1))
    );
    assert_eq!(
        fs::read_to_string(out.join("a.txt")).unwrap(),
        "0 0.700000 0.700000 0.200000 0.200000\n"
    );
    assert_eq!(fs::read_to_string(out.join("b.txt")).unwrap(), "");
    assert!(out.join("a.png").is_file());
}

struct ServeGuard(Child);

impl Drop for ServeGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http_get(addr: &str, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(addr).ok()?;
    write!(
        stream,
        "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .ok()?;
    let mut body = String::new();
    stream.read_to_string(&mut body).ok()?;
    Some(body)
}

#[test]
fn serve_and_remote_export() {
    let dir = tempfile::tempdir().unwrap();
    let (images, dets) = review_fixture(dir.path());
    let queue = dir.path().join("queue.json");
    ok_json(&[
        "import",
        "--dets",
        s(&dets),
        "--images",
        s(&images),
        "--queue",
        s(&queue),
    ]);

    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let export_root = dir.path().join("served");
    let child = bin()
        .args([
            "serve",
            "--addr",
            &addr,
            "--queue",
            s(&queue),
            "--export-root",
            s(&export_root),
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let _guard = ServeGuard(child);
    let deadline = Instant::now() + Duration::from_secs(20);
    let overview = loop {
        if let Some(resp) = http_get(&addr, "/api/queue") {
            break resp;
        }
        assert!(Instant::now() < deadline, "service did not come up");
        sleep(Duration::from_millis(50));
    };
    assert!(overview.contains("\"pending\":3"), "{overview}");

    let url = format!("http://{addr}");
    let refused = run(&["export", "--server", &url]);
    assert_eq!(code(&refused), 1);
    let v = ok_json(&["export", "--server", &url, "--force"]);
    assert_eq!(v["skipped_images"].as_array().unwrap().len(), 2);
    assert!(export_root.is_dir());

    let unreachable = run(&["export", "--server", "http://127.0.0.1:9", "--force"]);
    assert_eq!(code(&unreachable), 2);
}

#[test]
fn ledger_records_lineage_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("initial");
    split_fixture(&data);
    let manifest = dir.path().join("ledger/manifest.json");
    let m = s(&manifest);
    let env_run = |args: &[&str]| -> Output {
        bin()
            .env("BOXFORGE_MANIFEST", m)
            .args(args)
            .output()
            .unwrap()
    };

    ok_json(&[
        "ledger",
        "--manifest",
        m,
        "add-dataset",
        "--id",
        "initial",
        "--root",
        s(&data),
    ]);

    let metrics = dir.path().join("metrics.json");
    fs::write(
        &metrics,
        r#"{"ap50":0.8,"ap50_95":0.5,"best_f1":0.7,"best_f1_confidence":0.4,"precision":0.6,"recall":0.9,
            "total_gt":10,"total_detections":15,"pr_points":[],"f1_points":[],"per_threshold":[],"per_class":[]}"#,
    )
    .unwrap();
    let loss = dir.path().join("box_loss.csv");
    fs::write(&loss, "step,value\n0,0.9\n10,0.5\n20,0.25\n").unwrap();

    let record = |id: &str, parent: &str, extra: &[&str]| {
        let mut args = vec![
            "ledger",
            "record",
            "--iteration",
            id,
            "--dataset",
            "initial",
            "--batch-size",
            "16",
            "--ratio",
            "0.22",
            "--seed",
            "7",
            "--parent-weights",
            parent,
        ];
        args.extend_from_slice(extra);
        env_run(&args)
    };
    let first = record(
        "it1",
        "yolov5m.pt",
        &[
            "--metrics",
            s(&metrics),
            "--series",
            &format!("box_loss={}", loss.display()),
        ],
    );
    assert_eq!(
        code(&first),
        0,
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let rec: Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(
        (rec["val_count"].as_u64(), rec["train_count"].as_u64()),
        (Some(16), Some(56))
    );

    assert_eq!(code(&record("it2", "runs/it1/weights/last.pt", &[])), 0);
    assert_eq!(code(&record("it2", "last.pt", &[])), 1);
    assert_eq!(
        code(&env_run(&[
            "ledger",
            "record",
            "--iteration",
            "x",
            "--dataset",
            "nope",
            "--batch-size",
            "1",
            "--ratio",
            "0.2",
            "--seed",
            "1",
            "--parent-weights",
            "a.pt"
        ])),
        1
    );

    let lineage: Value =
        serde_json::from_slice(&env_run(&["ledger", "lineage", "it2"]).stdout).unwrap();
    let chain: Vec<&str> = lineage
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["iteration_id"].as_str().unwrap())
        .collect();
    assert_eq!(chain, ["it2", "it1"]);

    let csv = env_run(&["ledger", "compare", "it1", "it2", "--format", "csv"]);
    assert_eq!(
        String::from_utf8(csv.stdout).unwrap(),
        "iteration,parent_weights,train_count,val_count,ap50,ap50_95,best_f1,box_loss_final\n\
         it1,yolov5m.pt,56,16,0.8,0.5,0.7,0.25\n\
         it2,runs/it1/weights/last.pt,56,16,,,,\n"
    );
    let shown: Value = serde_json::from_slice(&env_run(&["ledger", "show"]).stdout).unwrap();
    assert_eq!(shown["version"], 1);
    assert_eq!(shown["iterations"].as_array().unwrap().len(), 2);
    assert_eq!(code(&env_run(&["ledger", "show", "it9"])), 1);
}
