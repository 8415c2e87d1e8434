use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "model_dim=16",
    "heads=2",
    "encoder_layers=1",
    "ffn_ratio=2",
    "image_size=16",
    "backbone_dim=16",
    "feature_hw=4",
    "max_len=12",
    "batch_size=4",
    "epochs=1",
];

fn satcap(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_satcap")).args(args).output().expect("spawn satcap");
    assert!(
        out.status.success(),
        "satcap {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not JSON: {l} ({e})")))
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    args
}

#[test]
fn gen_train_eval_caption_score() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let dump = dir.path().join("hyps.jsonl");
    let attn = dir.path().join("attn.json");

    let gen = satcap(&["gen-data", "--seed", "3", "--pairs", "24", "--size", "16", "--out", p(&data)]);
    let gen = &json_lines(&gen)[0];
    assert_eq!(gen["pairs"], 24);
    let manifest = gen["manifest"].as_str().unwrap().to_string();

    let train = satcap(&with_tiny(vec!["train", "--data", &manifest, "--out", p(&run)]));
    let epochs = json_lines(&train);
    assert_eq!(epochs.len(), 1);
    assert!(run.join("last.satc").exists() && run.join("best.satc").exists());

    // one more epoch from the saved state
    let resumed = satcap(&["train", "--data", &manifest, "--out", p(&run), "--resume", "--epochs", "2"]);
    assert_eq!(json_lines(&resumed).len(), 1);

    let best = run.join("best.satc");
    let eval = satcap(&[
        "eval", "--ckpt", p(&best), "--data", &manifest, "--split", "train", "--stratify", "each", "--dump", p(&dump),
    ]);
    let reports = json_lines(&eval);
    assert!(!reports.is_empty());
    assert!(dump.exists());

    // re-scoring the dump reproduces the unstratified report
    let all = satcap(&["eval", "--ckpt", p(&best), "--data", &manifest, "--split", "train"]);
    let rescored = satcap(&["score", "--hyp-refs", p(&dump)]);
    assert_eq!(json_lines(&all)[0]["metrics"], json_lines(&rescored)[0]);

    let ppm: Vec<_> = std::fs::read_dir(data.join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    let before = ppm.iter().find(|p| p.to_string_lossy().contains("before")).expect("a before image");
    let after = before.to_string_lossy().replace("before", "after");
    let cap = satcap(&[
        "caption", "--ckpt", p(&best), "--before", p(before), "--after", &after, "--export-attention", p(&attn),
    ]);
    assert!(json_lines(&cap)[0]["caption"].is_string());
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&attn).unwrap()).unwrap();
    assert_eq!(doc["height"], 4);
    assert_eq!(doc["tokens"].as_array().unwrap().len(), doc["attention"].as_array().unwrap().len());

    let beam = satcap(&["caption", "--ckpt", p(&best), "--before", p(before), "--after", &after, "--beam", "3"]);
    assert!(json_lines(&beam)[0]["caption"].is_string());
}

#[test]
fn bad_override_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_satcap"))
        .args(["train", "--data", "missing.json", "--out", p(dir.path()), "--set", "no_such_key=1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn layer_gradient_checks_pass() {
    let out = satcap(&["grad-check", "--seeds", "1"]);
    let rows = json_lines(&out);
    assert!(rows.len() > 5);
    assert!(rows.iter().all(|r| r["pass"] == true));
}
