use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_infometic"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn infometic")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small corpus, its training sets and a briefly trained checkpoint.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(images: usize, iters: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        ok(&[
            "synth",
            "--out-dir",
            s(&f.corpus()),
            "--images",
            &images.to_string(),
        ]);
        ok(&[
            "datagen",
            "--dataset",
            s(&f.dataset()),
            "--out-dir",
            s(&f.sets()),
        ]);
        ok(&[
            "train",
            "--data-dir",
            s(&f.sets()),
            "--out-dir",
            s(&f.run_dir()),
            "--iters",
            &iters.to_string(),
        ]);
        let regions = r#"{"boxes": [[20, 32, 43, 52], [58, 2, 78, 31], [15, 64, 46, 95]]}"#;
        std::fs::write(f.regions(), regions).unwrap();
        f
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }
    fn corpus(&self) -> PathBuf {
        self.path("corpus")
    }
    fn dataset(&self) -> PathBuf {
        self.path("corpus/dataset.jsonl")
    }
    fn sets(&self) -> PathBuf {
        self.path("sets")
    }
    fn run_dir(&self) -> PathBuf {
        self.path("run")
    }
    fn checkpoint(&self) -> PathBuf {
        self.path("run/checkpoint")
    }
    fn image(&self) -> PathBuf {
        self.path("corpus/synth0_00000.png")
    }
    fn regions(&self) -> PathBuf {
        self.path("regions.json")
    }

    fn score_pair(&self, extra: &[&str]) -> Output {
        let ckpt = self.checkpoint();
        let image = self.image();
        let regions = self.regions();
        let mut args = vec![
            "--checkpoint",
            s(&ckpt),
            "score",
            "--image",
            s(&image),
            "--regions",
            s(&regions),
            "--caption",
            "a/DET dog/NOUN near/ADP a/DET fish/NOUN",
        ];
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON value")
}

#[test]
fn single_pair_report_schema() {
    let f = Fixture::new(12, 8);
    let out = f.score_pair(&[]);
    assert!(out.status.success());
    let v = json(&out);
    for key in [
        "precision",
        "recall",
        "overall",
        "alpha_v",
        "alpha_t",
        "null_score",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let p = v["precision"].as_f64().unwrap();
    let r = v["recall"].as_f64().unwrap();
    assert_eq!(v["overall"].as_f64().unwrap(), r + p);
    assert_eq!(v["regions"].as_array().unwrap().len(), 3);
    assert_eq!(v["alpha_v"].as_array().unwrap().len(), 4);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("resolved config:"), "{stderr}");
}

#[test]
fn beta_changes_masks_not_scores() {
    let f = Fixture::new(12, 8);
    let a = json(&f.score_pair(&[]));
    let b = json(&f.score_pair(&["--beta", "0.2"]));
    for key in ["precision", "recall", "overall", "alpha_v", "alpha_t"] {
        assert_eq!(a[key], b[key], "{key}");
    }
    assert_eq!(b["beta"].as_f64(), Some(0.2));
    let mentioned = |v: &Value, beta: f64| -> Vec<bool> {
        v["alpha_v"].as_array().unwrap()[..3]
            .iter()
            .map(|x| x.as_f64().unwrap() > beta)
            .collect()
    };
    let got: Vec<bool> = b["regions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["mentioned"].as_bool().unwrap())
        .collect();
    assert_eq!(got, mentioned(&a, 0.2));
}

#[test]
fn plus_without_temperature_exits_2() {
    let f = Fixture::new(12, 8);
    let features = f.path("features.json");
    std::fs::write(&features, r#"{"dim": 16}"#).unwrap();
    let out = f.score_pair(&[
        "--plus",
        "--backbone",
        "pretrained-adapter",
        "--features",
        s(&features),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));
    // The synthetic backbone exports a temperature.
    let v = json(&f.score_pair(&["--plus"]));
    let gap = v["plus"].as_f64().unwrap() - v["overall"].as_f64().unwrap();
    assert!(gap.abs() <= 100.0 + 1e-9, "{gap}");
}

#[test]
fn exit_codes() {
    let f = Fixture::new(12, 8);
    assert_eq!(run(&["score", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let bad_caption = run(&[
        "--checkpoint",
        s(&f.checkpoint()),
        "score",
        "--image",
        s(&f.image()),
        "--regions",
        s(&f.regions()),
        "--caption",
        "a dog",
    ]);
    assert_eq!(bad_caption.status.code(), Some(1));
    for beta in ["0", "1"] {
        assert_eq!(f.score_pair(&["--beta", beta]).status.code(), Some(1));
    }
    let missing = f.path("nowhere");
    let bad_ckpt = run(&[
        "--checkpoint",
        s(&missing),
        "score",
        "--image",
        s(&f.image()),
        "--regions",
        s(&f.regions()),
        "--caption",
        "a/DET dog/NOUN",
    ]);
    assert_eq!(bad_ckpt.status.code(), Some(2));
    // A 32-d adapter cannot feed a 16-d model.
    let features = f.path("features32.json");
    std::fs::write(&features, r#"{"dim": 32}"#).unwrap();
    let out = f.score_pair(&[
        "--backbone",
        "pretrained-adapter",
        "--features",
        s(&features),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn batch_scoring_is_ordered_for_any_jobs() {
    let f = Fixture::new(12, 8);
    let ckpt = f.checkpoint();
    let data = f.dataset();
    let one = ok(&["--checkpoint", s(&ckpt), "score", "--input-jsonl", s(&data)]);
    let four = ok(&[
        "--checkpoint",
        s(&ckpt),
        "score",
        "--input-jsonl",
        s(&data),
        "--jobs",
        "4",
    ]);
    assert_eq!(one.stdout, four.stdout);
    let lines: Vec<Value> = String::from_utf8(one.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() >= 12 * 3);
    assert_eq!(lines[0]["image_id"], "synth0_00000");
    assert_eq!(lines[0]["caption_idx"], 0);
}

#[test]
fn datagen_writes_validated_sets() {
    let f = Fixture::new(20, 4);
    for file in [
        "coarse.jsonl",
        "htn.jsonl",
        "fine_text.jsonl",
        "fine_vision.jsonl",
    ] {
        let text = std::fs::read_to_string(f.sets().join(file)).unwrap();
        assert!(!text.is_empty(), "{file} is empty");
    }
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(f.sets().join("datagen.json")).unwrap())
            .unwrap();
    let v = &manifest["validation"];
    assert_eq!(v["htn_ordered"], v["htn_total"]);
    assert_eq!(v["fine_text_valid"], v["fine_text_total"]);
    assert_eq!(v["round_trip"], true);
    assert!(v["problems"].as_array().unwrap().is_empty());
}

#[test]
fn train_log_alternates_three_to_one() {
    let f = Fixture::new(12, 16);
    let log = std::fs::read_to_string(f.run_dir().join("metrics.jsonl")).unwrap();
    let tasks: Vec<String> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["task"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(tasks.len(), 16);
    for (i, t) in tasks.iter().enumerate() {
        let want = if i % 4 == 3 { "fine" } else { "coarse" };
        assert_eq!(t, want, "step {i}");
    }
}

#[test]
fn train_is_deterministic() {
    let f = Fixture::new(12, 12);
    let again = f.path("run2");
    ok(&[
        "train",
        "--data-dir",
        s(&f.sets()),
        "--out-dir",
        s(&again),
        "--iters",
        "12",
    ]);
    for file in [
        "metrics.jsonl",
        "checkpoint/config.json",
        "checkpoint/params.safetensors",
    ] {
        let a = std::fs::read(f.run_dir().join(file)).unwrap();
        let b = std::fs::read(again.join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let other = f.path("run3");
    ok(&[
        "--seed",
        "1",
        "train",
        "--data-dir",
        s(&f.sets()),
        "--out-dir",
        s(&other),
        "--iters",
        "12",
    ]);
    assert_ne!(
        std::fs::read(f.run_dir().join("checkpoint/params.safetensors")).unwrap(),
        std::fs::read(other.join("checkpoint/params.safetensors")).unwrap()
    );
}

#[test]
fn config_file_mirrors_flags() {
    let f = Fixture::new(12, 8);
    let cfg = f.path("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "checkpoint = {:?}\n[score]\nbeta = 0.3\nimage = {:?}\nregions = {:?}\ncaption = \"a/DET dog/NOUN\"\n",
            s(&f.checkpoint()),
            s(&f.image()),
            s(&f.regions())
        ),
    )
    .unwrap();
    let v = json(&ok(&["--config", s(&cfg), "score"]));
    assert_eq!(v["beta"].as_f64(), Some(0.3));
    let v = json(&ok(&["--config", s(&cfg), "score", "--beta", "0.05"]));
    assert_eq!(v["beta"].as_f64(), Some(0.05));
    std::fs::write(&cfg, "[score]\nbetta = 0.3\n").unwrap();
    assert_eq!(run(&["--config", s(&cfg), "score"]).status.code(), Some(1));
}

#[test]
fn bench_is_deterministic() {
    let f = Fixture::new(12, 8);
    let scores = f.path("scores.jsonl");
    ok(&[
        "--checkpoint",
        s(&f.checkpoint()),
        "score",
        "--input-jsonl",
        s(&f.dataset()),
        "--out",
        s(&scores),
    ]);
    let text = std::fs::read_to_string(&scores).unwrap();
    let judgments: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let v: Value = serde_json::from_str(l).unwrap();
            format!(
                "{{\"image_id\": {}, \"caption_idx\": {}, \"human\": {{\"scores\": [{}]}}}}\n",
                v["image_id"],
                v["caption_idx"],
                (i * 7 % 5) as f64
            )
        })
        .collect();
    let jpath = f.path("judgments.jsonl");
    std::fs::write(&jpath, judgments).unwrap();
    let args = [
        "bench",
        "--scores",
        s(&scores),
        "--judgments",
        s(&jpath),
        "--stats",
        "kendall-b,kendall-c,pearson",
    ];
    let a = ok(&args);
    let b = ok(&args);
    assert_eq!(a.stdout, b.stdout);
    let v = json(&a);
    for k in ["tau_b", "tau_c", "pearson"] {
        let x = v["correlation"]["values"][k].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&x), "{k} = {x}");
    }
}

#[test]
fn visualize_references_each_region_once() {
    let f = Fixture::new(12, 8);
    let html = f.path("pair.html");
    let out = ok(&[
        "--checkpoint",
        s(&f.checkpoint()),
        "visualize",
        "--image",
        s(&f.image()),
        "--regions",
        s(&f.regions()),
        "--caption",
        "a/DET dog/NOUN near/ADP a/DET <fish>/NOUN",
        "--out",
        s(&html),
    ]);
    let report = json(&out);
    let page = std::fs::read_to_string(&html).unwrap();
    let n = report["regions"].as_array().unwrap().len();
    for i in 0..n {
        assert_eq!(page.matches(&format!("data-region=\"{i}\"")).count(), 1);
    }
    assert_eq!(page.matches("data-region=").count(), n);
    assert!(page.contains("data:image/png;base64,"));
    assert!(page.contains("&lt;fish&gt;") && !page.contains("<fish>"));
    assert!(!page.contains("src=\"http") && !page.contains("href=\"http"));

    // Re-rendering the saved report needs no checkpoint.
    let saved = f.path("report.json");
    std::fs::write(&saved, &out.stdout).unwrap();
    let html2 = f.path("again.html");
    ok(&[
        "visualize",
        "--image",
        s(&f.image()),
        "--report",
        s(&saved),
        "--out",
        s(&html2),
    ]);
    assert_eq!(page, std::fs::read_to_string(&html2).unwrap());
}
