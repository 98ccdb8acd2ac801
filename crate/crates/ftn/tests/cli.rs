use std::path::{Path, PathBuf};

use clap::Parser;
use ftn::cli::{main_with, run, Cli};
use ftn::config::HarnessConfig;
use ftn::store::ModelState;
use ftn::train;

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = HarnessConfig::default();
    cfg.data.source_train = 64;
    cfg.data.target_train = 32;
    cfg.data.test = 32;
    cfg.backbone.epochs = 1;
    cfg.adapt.epochs = 1;
    cfg.finetune.epochs = 1;
    cfg.probe = 4;
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn code(args: &[&str]) -> i32 {
    main_with(std::iter::once("ftn").chain(args.iter().copied()))
}

/// Runs a command and returns its stdout.
fn output(args: &[&str]) -> String {
    let cli = Cli::try_parse_from(std::iter::once("ftn").chain(args.iter().copied())).unwrap();
    let mut buf = Vec::new();
    run(cli.command, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

fn records(out: &str, kind: &str) -> Vec<serde_json::Value> {
    out.lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|v| v["record"] == kind)
        .collect()
}

#[test]
fn budget_tables_and_records() {
    let out = output(&["budget", "--spec", "resnet34"]);
    assert!(out.contains("16291"), "{out}");
    let b = &records(&out, "budget")[0];
    assert_eq!(b["adapter_per_task"], 16291);
    let out = output(&["budget", "--spec", "vit_b32", "--rank", "4", "--k", "4"]);
    let methods: Vec<(String, u64)> = records(&out, "baseline")
        .iter()
        .map(|v| (v["method"].as_str().unwrap().to_string(), v["per_task"].as_u64().unwrap()))
        .collect();
    assert!(methods.contains(&("ftn-o".into(), 40_512)));
    assert!(methods.contains(&("ftn-qv".into(), 81_024)));
    assert!(methods.contains(&("lora".into(), 147_456)));
    assert!(methods.iter().any(|(m, _)| m == "kadaptation"));
}

#[test]
fn exit_codes_for_bad_input() {
    assert_eq!(code(&["budget", "--spec", "toy4"]), 0);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["budget", "--spec", "nonexistent"]), 2);
    assert_eq!(code(&["budget", "--spec", "toy4", "--variant", "kv"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["budget", "--rank", "many"]), 2);
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ftnc");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let j = junk.to_str().unwrap();
    assert_eq!(code(&["eval", "--checkpoint", j]), 2);
    assert_eq!(code(&["train-backbone", "--spec", "toy4"]), 2, "--out is required");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"data\": 1}").unwrap();
    assert_eq!(code(&["budget", "--config", bad.to_str().unwrap()]), 0, "budget ignores the config");
    assert_eq!(code(&["train-backbone", "--out", j, "--config", bad.to_str().unwrap()]), 2);
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let (b0, m1, m2, m3) = (p("b0.ftnc"), p("m1.ftnc"), p("m2.ftnc"), p("m3.ftnc"));

    let out = output(&["train-backbone", "--spec", "toy4", "--seed", "2", "--config", c, "--out", &b0]);
    assert_eq!(records(&out, "eval")[0]["task"], "source");
    let out = output(&["adapt", "--checkpoint", &b0, "--task", "rot", "--domain", "rotation", "--rank", "2", "--config", c, "--out", &m1]);
    assert_eq!(records(&out, "train")[0]["trainable_params"], 698);
    output(&["adapt", "--checkpoint", &m1, "--task", "ft", "--domain", "hue", "--mode", "finetune", "--config", c, "--out", &m2]);

    let state = ModelState::load(Path::new(&m2)).unwrap();
    assert_eq!(state.task_ids(), vec!["source", "rot", "ft"]);
    let base = ModelState::load(Path::new(&b0)).unwrap();
    assert_eq!(state.backbone_digest, base.backbone_digest);

    let out = output(&["eval", "--checkpoint", &m2, "--config", c]);
    let evals = records(&out, "eval");
    assert_eq!(evals.len(), 3);
    let cfgv = HarnessConfig::load(&cfg).unwrap();
    let (_, te) = train::domain_data(state.spec(), "rotation", 8, &cfgv, 0).unwrap();
    let direct = train::evaluate(&state, "rot", &te).unwrap();
    assert_eq!(evals[1]["accuracy"].as_f64().unwrap(), direct.accuracy);

    let report = p("prune.json");
    let out = output(&["prune", "--checkpoint", &m2, "--task", "rot", "--thresholds", "4", "--config", c, "--out", &report]);
    assert_eq!(records(&out, "prune").len(), 4);
    assert!(std::fs::read_to_string(&report).unwrap().contains("removed"));

    let pruned = p("pruned");
    let out = output(&[
        "prune", "--checkpoint", &m2, "--task", "rot", "--threshold-list", "0,1e9", "--prune-dir", &pruned, "--config", c,
    ]);
    let pts = records(&out, "prune");
    assert_eq!((pts[0]["removed"].as_u64(), pts[1]["removed"].as_u64()), (Some(0), Some(3)));
    let same = ModelState::load(&Path::new(&pruned).join("rot-t0.ftnc")).unwrap();
    let all = ModelState::load(&Path::new(&pruned).join("rot-t1.ftnc")).unwrap();
    assert_eq!(same.task("rot").unwrap().set, state.task("rot").unwrap().set);
    assert!(all.task("rot").unwrap().set.adapters.iter().all(|(_, a)| a.is_zero()));
    assert_eq!(train::evaluate(&all, "rot", &te).unwrap().accuracy, pts[1]["accuracy"].as_f64().unwrap());
    assert_eq!(all.backbone_digest, state.backbone_digest);
    assert_eq!(code(&["prune", "--checkpoint", &m2, "--task", "rot", "--threshold-list", "-1", "--config", c]), 2);

    let out = output(&["factorize", "--checkpoint", &m2, "--task", "ft", "--ranks", "1,2", "--config", c]);
    assert!(!records(&out, "factorization").is_empty(), "{out}");
    let with_base = output(&["factorize", "--checkpoint", &m2, "--base", &b0, "--task", "ft", "--ranks", "1,2", "--config", c]);
    assert_eq!(records(&with_base, "aggregate"), records(&out, "aggregate"));
    assert_eq!(code(&["factorize", "--checkpoint", &m2, "--task", "rot", "--config", c]), 2);

    let out = output(&["sweep-rank", "--checkpoint", &b0, "--ranks", "1", "--seeds", "1", "--baselines", "--config", c]);
    assert_eq!(records(&out, "run").len(), 4, "{out}");
    assert_eq!(records(&out, "mean").len(), 4);

    assert_eq!(code(&["adapt", "--checkpoint", &m2, "--task", "rot", "--domain", "hue", "--config", c, "--out", &m3]), 2);
    assert_eq!(code(&["adapt", "--checkpoint", &m2, "--task", "x", "--domain", "fog", "--config", c, "--out", &m3]), 2);
    assert_eq!(code(&["eval", "--checkpoint", &m2, "--spec", "resnet18", "--config", c]), 2);

    // a checkpoint whose backbone drifted from its recorded digest
    let mut tampered = state.clone();
    tampered.backbone.conv_weight_mut(1).unwrap().data_mut()[0] += 1.0;
    let t = p("t.ftnc");
    let mut ct = tampered.to_container().unwrap();
    let (_, orig) = state.to_container().unwrap().tensors.into_iter().find(|(n, _)| n == "probe/input").unwrap();
    assert!(ct.get("probe/input").unwrap().bit_eq(&orig));
    ct.manifest = state.to_container().unwrap().manifest;
    ct.save(Path::new(&t)).unwrap();
    assert_eq!(code(&["eval", "--checkpoint", &t, "--config", c]), 4);
    assert_eq!(code(&["adapt", "--checkpoint", &t, "--task", "y", "--domain", "hue", "--config", c, "--out", &m3]), 4);
}
