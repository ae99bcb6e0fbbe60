use std::path::Path;
use std::process::{Command, Output};

use mobiface::graph::{Architecture, MOBIFACE};
use mobiface::image::encode_ppm;
use mobiface::tensor::Tensor;
use mobiface::weights::{init_random, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn mobiface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mobiface")).args(args).output().expect("spawn mobiface")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = mobiface(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).expect("valid json")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_face(path: &Path, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::from_fn(&[3, 112, 112], |_| rng.random_range(0..=255u8) as f32).unwrap();
    std::fs::write(path, encode_ppm(&t).unwrap()).unwrap();
}

fn random_weights(path: &Path, seed: u64, identity_head: bool) {
    let arch = Architecture::by_name(MOBIFACE).unwrap();
    let mut store = init_random(&arch.weight_bindings(), seed).unwrap();
    if identity_head {
        store.set_identity_flip_head(512).unwrap();
    }
    store.save(path).unwrap();
}

#[test]
fn describe_prints_the_stage_trace() {
    let text = ok(&["describe", "--arch", "mobiface"]);
    let rows: Vec<&str> = text.lines().skip(2).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(
        rows,
        [
            "112×112×3", "56×56×64", "56×56×64", "28×28×64", "28×28×64", "14×14×128", "14×14×128", "7×7×256",
            "7×7×256", "7×7×512", "512"
        ]
    );

    let doc = json(&["describe", "--arch", "mobiface-flipped", "--json"]);
    assert_eq!(doc["stages"].as_array().unwrap().len(), 11);
    assert_eq!(doc["stages"][10]["shape"], serde_json::json!([512]));
    assert_eq!(doc["flip_head"]["hidden"], 512);

    let bad = mobiface(&["describe", "--arch", "resnet"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).starts_with("error:"));
    assert_eq!(mobiface(&[]).status.code(), Some(1));
}

#[test]
fn analyze_totals_are_column_sums_and_match_init() {
    let dir = tempfile::tempdir().unwrap();
    for arch in ["mobiface", "mobiface-flipped"] {
        let doc = json(&["analyze", "--arch", arch, "--json"]);
        let rows = doc["rows"].as_array().unwrap();
        for col in ["params", "buffers", "macs", "act_bytes"] {
            let sum: u64 = rows.iter().map(|r| r[col].as_u64().unwrap()).sum();
            assert_eq!(sum, doc["totals"][col].as_u64().unwrap(), "{arch} {col}");
        }
        let path = dir.path().join(format!("{arch}.mbfw"));
        ok(&["init", "--arch", arch, "--out", p(&path)]);
        let floats = WeightStore::load(&path).unwrap().float_count() as u64;
        let t = &doc["totals"];
        assert_eq!(t["params"].as_u64().unwrap() + t["buffers"].as_u64().unwrap(), floats);

        let inputs: Vec<u64> =
            doc["downsampling"]["events"].as_array().unwrap().iter().map(|e| e["in_spatial"][0].as_u64().unwrap()).collect();
        assert_eq!(inputs, [112, 56, 28, 14]);
    }
    let table = ok(&["analyze"]);
    assert!(table.contains("1 MAC = 2 FLOPs"));
    assert!(table.contains("NOTE:") && table.contains("9.3 MB"));
}

#[test]
fn init_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["init", "--out", p(&a)]);
    ok(&["init", "--seed", "42", "--out", p(&b)]);
    ok(&["init", "--seed", "7", "--out", p(&c)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn embed_outputs_are_deterministic_and_identity_head_is_transparent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (weights, image) = (d.join("w.mbfw"), d.join("face.ppm"));
    random_weights(&weights, 3, true);
    write_face(&image, 1);

    let (a, b) = (d.join("a.mbfw"), d.join("b.mbfw"));
    ok(&["embed", "--weights", p(&weights), "--image", p(&image), "--out", p(&a)]);
    ok(&["embed", "--weights", p(&weights), "--image", p(&image), "--out", p(&b), "--threads", "2"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let e = WeightStore::load(&a).unwrap();
    assert_eq!(e.get("embedding").unwrap().shape(), &[512]);

    let plain = json(&["embed", "--weights", p(&weights), "--image", p(&image)]);
    let flipped = json(&["embed", "--weights", p(&weights), "--image", p(&image), "--flip-head"]);
    assert_eq!(plain["embedding"], flipped["embedding"]);
    assert_eq!(plain["embedding"].as_array().unwrap().len(), 512);

    let js = d.join("e.json");
    ok(&["embed", "--weights", p(&weights), "--image", p(&image), "--out", p(&js)]);
    let from_file: Value = serde_json::from_str(&std::fs::read_to_string(&js).unwrap()).unwrap();
    assert_eq!(from_file["embedding"], plain["embedding"]);
}

#[test]
fn embed_reports_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let image = d.join("face.ppm");
    write_face(&image, 2);

    let missing = mobiface(&["embed", "--weights", p(&d.join("nope.mbfw")), "--image", p(&image)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).starts_with("error:") && stderr(&missing).contains("nope.mbfw"));

    let weights = d.join("w.mbfw");
    random_weights(&weights, 1, false);
    let no_head = mobiface(&["embed", "--weights", p(&weights), "--image", p(&image), "--flip-head"]);
    assert_eq!(no_head.status.code(), Some(2));

    let small = d.join("small.ppm");
    std::fs::write(&small, encode_ppm(&Tensor::zeros(&[3, 100, 100]).unwrap()).unwrap()).unwrap();
    let wrong = mobiface(&["embed", "--weights", p(&weights), "--image", p(&small)]);
    assert_eq!(wrong.status.code(), Some(2));
    assert!(stderr(&wrong).starts_with("error:"));
}

fn write_pairs(d: &Path) -> std::path::PathBuf {
    let mut text = String::from("#folds=10\n");
    for i in 0..10 {
        write_face(&d.join(format!("f{i}.ppm")), i);
        text.push_str(&format!("f{i}.ppm\tf{i}.ppm\t1\n"));
        text.push_str(&format!("f{i}.ppm\tf{}.ppm\t0\n", (i + 1) % 10));
    }
    let path = d.join("pairs.txt");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn verify_separable_set_and_stable_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let weights = d.join("w.mbfw");
    random_weights(&weights, 5, true);
    let pairs = write_pairs(d);

    let first = ok(&["verify", "--weights", p(&weights), "--pairs", p(&pairs), "--json"]);
    let second = ok(&["verify", "--weights", p(&weights), "--pairs", p(&pairs), "--json", "--threads", "3"]);
    assert_eq!(first, second);
    let doc: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(doc["mean_accuracy"], 1.0);
    assert_eq!(doc["folds"].as_array().unwrap().len(), 10);

    let flipped = ok(&["verify", "--weights", p(&weights), "--pairs", p(&pairs), "--json", "--flip-head"]);
    assert_eq!(first, flipped);
    assert!(ok(&["verify", "--weights", p(&weights), "--pairs", p(&pairs)]).contains("mean accuracy 1.0000"));
}

#[test]
fn verify_rejects_malformed_pair_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let weights = d.join("w.mbfw");
    random_weights(&weights, 5, false);
    let pairs = d.join("pairs.txt");
    std::fs::write(&pairs, "#folds=2\na.ppm\tb.ppm\t1\na.ppm\tb.ppm\n").unwrap();
    let o = mobiface(&["verify", "--weights", p(&weights), "--pairs", p(&pairs)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn selftest_passes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.mbfw");
    random_weights(&weights, 9, false);
    let out = ok(&["selftest", "--weights", p(&weights)]);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 8, "{out}");
    assert!(out.lines().filter(|l| l.starts_with("PASS")).all(|l| l.contains(" ms ")));

    let mut bytes = std::fs::read(&weights).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&weights, &bytes).unwrap();
    let o = mobiface(&["selftest", "--weights", p(&weights)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL weights-file"));
    assert!(stderr(&o).starts_with("error:"));

    bytes.truncate(n / 2);
    std::fs::write(&weights, &bytes).unwrap();
    assert_eq!(mobiface(&["selftest", "--weights", p(&weights)]).status.code(), Some(2));
}

#[test]
fn bench_reports_each_thread_count() {
    let doc = json(&["bench", "--iters", "1", "--threads", "1,4", "--json"]);
    let results = doc["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0]["threads"], 1);
    assert_eq!(results[1]["threads"], 4);
    for r in results {
        assert_eq!(r["iters"], 1);
        for k in ["mean_ms", "median_ms", "p95_ms", "wall_ms"] {
            assert!(r[k].as_f64().unwrap() > 0.0);
        }
    }
    assert!(doc["disclaimer"].as_str().unwrap().contains("host CPU"));
    assert!(ok(&["bench", "--iters", "1"]).contains("note:"));
    assert_eq!(mobiface(&["bench", "--iters", "0"]).status.code(), Some(2));
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (weights, dump, back) = (d.join("w.mbfw"), d.join("w.json"), d.join("back.mbfw"));
    random_weights(&weights, 12, true);
    ok(&["export", "--weights", p(&weights), "--out", p(&dump)]);
    ok(&["import", "--json", p(&dump), "--out", p(&back)]);
    assert_eq!(std::fs::read(&weights).unwrap(), std::fs::read(&back).unwrap());

    std::fs::write(&dump, "{\"format_version\": 1, \"tensors\": [{\"name\": \"x\", \"shape\": [2], \"data\": [1.0]}]}")
        .unwrap();
    assert_eq!(mobiface(&["import", "--json", p(&dump), "--out", p(&back)]).status.code(), Some(2));
}
