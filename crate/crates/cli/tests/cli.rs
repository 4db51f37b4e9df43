use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn attnmil(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnmil"))
        .current_dir(cwd)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TRAIN: &[&str] = &[
    "train",
    "--data-dir",
    "data",
    "--output-dir",
    "run",
    "--backbone",
    "small-cnn",
    "--patch-size",
    "16",
    "--frozen-epochs",
    "0",
    "--head-lr",
    "1e-3",
    "--backbone-lr",
    "1e-3",
];

fn synth(dir: &Path, n: &str) {
    let out = attnmil(dir, &["synth", "--seed", "7", "--n-images", n, "--image-size", "64", "--data-dir", "data"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_is_deterministic_and_balanced() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), "40");
    synth(b.path(), "40");
    let ma = fs::read_to_string(a.path().join("data/manifest.tsv")).unwrap();
    assert_eq!(ma, fs::read_to_string(b.path().join("data/manifest.tsv")).unwrap());
    let rows: Vec<&str> = ma.lines().skip(1).collect();
    assert_eq!(rows.len(), 40);
    let pos = rows.iter().filter(|r| r.split('\t').nth(4) == Some("positive")).count();
    assert!((16..=24).contains(&pos), "{pos} positives");
    let img = fs::read(a.path().join("data/images/synth0007_00000.png")).unwrap();
    assert_eq!(img, fs::read(b.path().join("data/images/synth0007_00000.png")).unwrap());
}

#[test]
fn train_segment_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "24");

    let mut args = TRAIN.to_vec();
    args.extend(["--epochs", "2"]);
    let out = attnmil(d, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("run/checkpoint.safetensors").is_file());
    assert_eq!(fs::read_to_string(d.join("run/train_log.txt")).unwrap().lines().count(), 2);

    let mut args = TRAIN.to_vec();
    args.extend(["--epochs", "3", "--resume"]);
    let out = attnmil(d, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("epoch 3:"));
    assert_eq!(fs::read_to_string(d.join("run/train_log.txt")).unwrap().lines().count(), 3);

    let out = attnmil(
        d,
        &["segment", "--data-dir", "data", "--output-dir", "run", "--threshold", "0", "synth0007_00001"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for ext in ["heat.png", "seg.png", "meta.json"] {
        assert!(d.join(format!("run/segment/synth0007_00001.{ext}")).is_file(), "{ext}");
    }
    let heat = fs::read(d.join("run/segment/synth0007_00001.heat.png")).unwrap();
    let seg = fs::read(d.join("run/segment/synth0007_00001.seg.png")).unwrap();
    let out = attnmil(
        d,
        &["segment", "--data-dir", "data", "--output-dir", "run", "--threshold", "1", "synth0007_00001"],
    );
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(d.join("run/segment/synth0007_00001.heat.png")).unwrap(), heat);
    assert_ne!(fs::read(d.join("run/segment/synth0007_00001.seg.png")).unwrap(), seg);

    let out = attnmil(d, &["eval", "--data-dir", "data", "--output-dir", "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let kv = fs::read_to_string(d.join("run/eval/metrics.txt")).unwrap();
    assert!(kv.contains("mean_iou = ") && kv.contains("mean_ap = "));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/eval/metrics.json")).unwrap()).unwrap();
    assert!(json["accuracy"].as_f64().unwrap() <= 1.0);

    let out = attnmil(d, &["eval", "--data-dir", "data", "--output-dir", "run", "--skip-pixel"]);
    assert_eq!(code(&out), 0);
    let kv = fs::read_to_string(d.join("run/eval/metrics.txt")).unwrap();
    assert!(kv.contains("accuracy = ") && !kv.contains("mean_iou"));
}

#[test]
fn validation_failures_exit_one_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "12");

    let mut args = TRAIN.to_vec();
    args.extend(["--epochs", "2", "--frozen-epochs", "5"]);
    assert_eq!(code(&attnmil(d, &args)), 1);
    assert!(!d.join("run").exists());

    let out = attnmil(d, &["train", "--data-dir", "data", "--output-dir", "run", "--epochs", "1", "--frozen-epochs", "0"]);
    assert_eq!(code(&out), 1, "resnet without weights");
    assert!(!d.join("run").exists());

    assert_eq!(code(&attnmil(d, &["train", "--no-such-flag"])), 1);
    assert_eq!(code(&attnmil(d, &["eval", "--data-dir", "missing"])), 1);
    assert_eq!(code(&attnmil(d, &["segment", "--data-dir", "data", "x"])), 1);

    fs::write(d.join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    assert_eq!(code(&attnmil(d, &["--config", "bad.toml", "synth"])), 1);

    let out = attnmil(d, &["prepare", "--data-dir", "prep"]);
    assert_eq!(code(&out), 1);
    assert!(!d.join("prep").exists());

    assert_eq!(code(&attnmil(d, &["--help"])), 0);
}

#[test]
fn unknown_segment_ids_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "12");
    let mut args = TRAIN.to_vec();
    args.extend(["--epochs", "1"]);
    assert_eq!(code(&attnmil(d, &args)), 0);
    let out = attnmil(d, &["segment", "--data-dir", "data", "--output-dir", "run", "ghost_a", "synth0007_00000", "ghost_b"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ghost_a") && err.contains("ghost_b") && !err.contains("synth0007_00000"));
    assert!(!d.join("run/segment").exists());
}

#[test]
fn prepare_reports_counts_and_missing_masks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let raw = d.join("raw/Images");
    for split in ["train", "test"] {
        fs::create_dir_all(raw.join("img_dir").join(split)).unwrap();
        fs::create_dir_all(raw.join("ann_dir").join(split)).unwrap();
    }
    let empty = attnmil(d, &["prepare", "--raw-root", "raw", "--data-dir", "prep"]);
    assert_eq!(code(&empty), 2, "empty input is an error");

    // Two tiny images: one fully bread (class 58), one background.
    let write = |split: &str, stem: &str, class: u8| {
        let img = raw.join("img_dir").join(split).join(format!("{stem}.png"));
        let mask = raw.join("ann_dir").join(split).join(format!("{stem}.png"));
        write_png(&img, 8, 3, &vec![128; 8 * 8 * 3]);
        write_png(&mask, 8, 1, &vec![class; 64]);
    };
    write("train", "a", 58);
    write("train", "b", 0);
    write("test", "c", 58);
    let args = [
        "prepare",
        "--raw-root",
        "raw",
        "--data-dir",
        "prep",
        "--target-size",
        "8",
        "--pixel-threshold",
        "10",
    ];
    let out = attnmil(d, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("train: 1 positive, 1 negative"), "{text}");
    assert!(text.contains("test: 1 positive, 0 negative"), "{text}");
    let first = fs::read(d.join("prep/manifest.tsv")).unwrap();
    assert_eq!(code(&attnmil(d, &args)), 0);
    assert_eq!(fs::read(d.join("prep/manifest.tsv")).unwrap(), first, "idempotent");

    fs::remove_file(raw.join("ann_dir/test/c.png")).unwrap();
    let out = attnmil(d, &args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("c.png"));
}

fn write_png(path: &Path, size: u32, channels: u8, data: &[u8]) {
    use std::io::Write;
    // Minimal uncompressed PNG writer keeps this test free of image crates.
    fn crc(bytes: &[u8]) -> u32 {
        let mut c = 0xffff_ffffu32;
        for &b in bytes {
            c ^= b as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
            }
        }
        !c
    }
    fn adler(bytes: &[u8]) -> u32 {
        let (mut a, mut b) = (1u32, 0u32);
        for &x in bytes {
            a = (a + x as u32) % 65521;
            b = (b + a) % 65521;
        }
        (b << 16) | a
    }
    let chunk = |out: &mut Vec<u8>, tag: &[u8], body: &[u8]| {
        out.extend((body.len() as u32).to_be_bytes());
        let mut t = tag.to_vec();
        t.extend(body);
        out.extend(&t);
        out.extend(crc(&t).to_be_bytes());
    };
    let row = size as usize * channels as usize;
    let mut raw = Vec::new();
    for r in data.chunks(row) {
        raw.push(0);
        raw.extend(r);
    }
    let mut z = vec![0x78, 0x01, 1];
    z.extend((raw.len() as u16).to_le_bytes());
    z.extend((!(raw.len() as u16)).to_le_bytes());
    z.extend(&raw);
    z.extend(adler(&raw).to_be_bytes());
    let mut ihdr = Vec::new();
    ihdr.extend(size.to_be_bytes());
    ihdr.extend(size.to_be_bytes());
    ihdr.extend([8, if channels == 3 { 2 } else { 0 }, 0, 0, 0]);
    let mut png = vec![0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
    chunk(&mut png, b"IHDR", &ihdr);
    chunk(&mut png, b"IDAT", &z);
    chunk(&mut png, b"IEND", &[]);
    fs::File::create(path).unwrap().write_all(&png).unwrap();
}
