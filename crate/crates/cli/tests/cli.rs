use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cgmf_core::io::{ConfigFile, TensorContainer};
use cgmf_core::{FusionConfig, Toggles};

fn cgmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgmf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    ConfigFile::from_config(&FusionConfig::tiny(), Some(3))
        .write(&path)
        .unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_is_deterministic_and_records_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a.cgmf");
    let b = dir.path().join("b.cgmf");
    for out in [&a, &b] {
        let o = cgmf(&["gen", "--config", p(&cfg), "--seed", "5", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = TensorContainer::read(&a).unwrap();
    assert_eq!(c.get("f_v").unwrap().shape, vec![2, 4, 8]);
    assert_eq!(c.get("f_s").unwrap().shape, vec![2, 6, 6]);
    assert_eq!(c.get("f_c").unwrap().shape, vec![2, 1, 6]);

    let other = dir.path().join("c.cgmf");
    cgmf(&["gen", "--config", p(&cfg), "--seed", "6", "--out", p(&other)]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn invalid_config_is_a_validation_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let mut file = ConfigFile::from_config(&FusionConfig::tiny(), None);
    file.n_heads = 3;
    std::fs::write(&cfg, file.to_toml()).unwrap();
    let o = cgmf(&["gen", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("d_attn"), "{}", stderr(&o));
}

#[test]
fn fuse_with_zero_gate_reproduces_f_v() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let input = dir.path().join("in.cgmf");
    let weights = dir.path().join("w.cgmf");
    let out = dir.path().join("out.cgmf");
    assert_eq!(code(&cgmf(&["gen", "--config", p(&cfg), "--out", p(&input)])), 0);
    let before = std::fs::read(&input).unwrap();
    assert_eq!(
        code(&cgmf(&["init", "--config", p(&cfg), "--zero-gate", "--out", p(&weights)])),
        0
    );
    let o = cgmf(&[
        "fuse", "--config", p(&cfg), "--input", p(&input), "--weights", p(&weights), "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("tokens/s"));
    assert!(stdout(&o).contains("attend"));

    let fused = TensorContainer::read(&out).unwrap();
    let streams = TensorContainer::read(&input).unwrap();
    let f = fused.get("f_fused").unwrap();
    let v = streams.get("f_v").unwrap();
    assert_eq!(f.shape, v.shape);
    let bits = |t: &cgmf_core::io::StoredTensor| -> Vec<u64> {
        t.data.to_f64().iter().map(|x| x.to_bits()).collect()
    };
    assert_eq!(bits(f), bits(v));
    // Inputs are never rewritten.
    assert_eq!(std::fs::read(&input).unwrap(), before);
}

#[test]
fn fuse_shape_mismatch_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let wide = dir.path().join("wide.toml");
    ConfigFile::from_config(
        &FusionConfig {
            d_spatial: 5,
            ..FusionConfig::tiny()
        },
        None,
    )
    .write(&wide)
    .unwrap();
    let input = dir.path().join("in.cgmf");
    cgmf(&["gen", "--config", p(&wide), "--out", p(&input)]);
    let o = cgmf(&[
        "fuse", "--config", p(&cfg), "--input", p(&input), "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("f_s"), "{}", stderr(&o));
}

#[test]
fn fuse_needs_exactly_one_input_source() {
    let o = cgmf(&["fuse", "--out", "x"]);
    assert_eq!(code(&o), 2);
    let o = cgmf(&["fuse", "--seed", "1", "--input", "y", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fuse_from_seed_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o.cgmf");
    let o = cgmf(&[
        "fuse", "--config", p(&cfg), "--seed", "4", "--init-seed", "9", "--no-gate", "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let config = FusionConfig::tiny().with_toggles(Toggles {
        enable_gate: false,
        ..Toggles::all()
    });
    let inputs = cgmf_core::pipeline::synth_tokens(
        &config,
        4,
        cgmf_core::pipeline::TokenDistribution::Gaussian,
    )
    .unwrap();
    let w = cgmf_core::CgmfWeights::init(&config, 9).unwrap();
    let want = cgmf_core::fuse(&inputs, &w, &config).unwrap();
    let got = TensorContainer::read(&out).unwrap().get("f_fused").unwrap().to_tokens("f_fused").unwrap();
    assert!(got.bit_eq(&want));
}

#[test]
fn gradcheck_exit_codes() {
    let o = cgmf(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("pass"));
    for group in ["p_q.weight", "geo_mlp.0.weight", "ln_s.gain", "p_g2.bias"] {
        let o = cgmf(&["gradcheck", "--corrupt-vjp", group]);
        assert_eq!(code(&o), 4, "{group}");
        assert!(stderr(&o).contains(group));
    }
    let o = cgmf(&["gradcheck", "--tolerance", "0"]);
    assert_eq!(code(&o), 4);
    let o = cgmf(&["gradcheck", "--corrupt-vjp", "nonexistent"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_refuses_large_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("big.toml");
    ConfigFile::from_config(
        &FusionConfig {
            d_visual: 128,
            d_spatial: 128,
            d_attn: 128,
            ..FusionConfig::tiny()
        },
        None,
    )
    .write(&cfg)
    .unwrap();
    let o = cgmf(&["gradcheck", "--config", p(&cfg)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("50000"), "{}", stderr(&o));
}

#[test]
fn ablate_prints_four_distinct_rows() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("ablate.json");
    let o = cgmf(&["ablate", "--seed", "2", "--out", p(&json)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for label in ["shallow", "+twMLP", "+geoMLP", "full"] {
        assert!(text.contains(label), "{text}");
    }
    let mut sink = Vec::new();
    let table = cgmf_cli::ablate(
        &cgmf_cli::AblateArgs {
            model: Default::default(),
            seed: Some(2),
            weights: None,
            out: None,
        },
        &mut sink,
    )
    .unwrap();
    assert_eq!(table.rows.len(), 4);
    for i in 0..4 {
        assert_eq!(table.pairwise[i][i], 0.0);
        for j in 0..4 {
            if i != j {
                assert!(table.pairwise[i][j] > 0.0);
            }
        }
    }
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(written["rows"].as_array().unwrap().len(), 4);
}

fn write_records(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n")).unwrap();
    path
}

#[test]
fn score_vsi_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let subtasks = cgmf_core::metrics::VSI_SUBTASKS;
    let lines: Vec<String> = subtasks
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i < 4 {
                format!(r#"{{"id":"{i}","subtask":"{s}","answer_type":"numerical","prediction":3.5,"ground_truth":3.5}}"#)
            } else {
                format!(r#"{{"id":"{i}","subtask":"{s}","answer_type":"multiple_choice","prediction":"B. left","ground_truth":"B"}}"#)
            }
        })
        .collect();
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    let path = write_records(dir.path(), "vsi.jsonl", &refs);
    let o = cgmf(&["score", p(&path), "--protocol", "vsi"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("vsi.jsonl.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["average"], 1.0);
    for s in report["subtasks"].as_array().unwrap() {
        assert_eq!(s["score"], 1.0);
    }
}

#[test]
fn score_sqa3d_exact_and_refined() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_records(
        dir.path(),
        "sqa.jsonl",
        &[
            r#"{"id":"a","subtask":"what","answer_type":"free_text","prediction":"The Chair.","ground_truth":"the chair"}"#,
            r#"{"id":"b","subtask":"what","answer_type":"free_text","prediction":"a brown chair","ground_truth":"chair"}"#,
        ],
    );
    let out = dir.path().join("r.json");
    let o = cgmf(&["score", p(&path), "--protocol", "sqa3d", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let exact: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(exact["average"], 0.5);
    let o = cgmf(&["score", p(&path), "--protocol", "sqa3d", "--refined", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let refined: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(refined["average"], 1.0);
}

#[test]
fn score_mra_example_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = vec![
        r#"{"id":"x","subtask":"si","answer_type":"numerical","prediction":13,"ground_truth":10}"#,
        r#"{"id":"y","subtask":"si","answer_type":"multiple_choice","prediction":"A","ground_truth":"A"}"#,
        r#"{"id":"z","subtask":"mv","answer_type":"numerical","prediction":"7","ground_truth":7}"#,
        r#"{"id":"w","subtask":"mv","answer_type":"multiple_choice","prediction":"(C)","ground_truth":"D"}"#,
    ];
    let path = write_records(dir.path(), "sp.jsonl", &lines);
    let out = dir.path().join("sp.json");
    let o = cgmf(&["score", p(&path), "--protocol", "spbench", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("overall"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let close = |v: &serde_json::Value, x: f64| (v.as_f64().unwrap() - x).abs() < 1e-12;
    assert!(close(&r["si_nq"], 0.4));
    assert!(close(&r["si_mcq"], 1.0));
    assert!(close(&r["mv_nq"], 1.0));
    assert!(close(&r["mv_mcq"], 0.0));
    assert!(close(&r["scores"]["si"], 0.7));
    assert!(close(&r["scores"]["mv"], 0.5));
    assert!(close(&r["scores"]["overall"], 0.6));

    lines.insert(2, "{not json");
    let bad = write_records(dir.path(), "bad.jsonl", &lines);
    let o = cgmf(&["score", p(&bad), "--protocol", "spbench"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = cgmf(&["score", p(&dir.path().join("absent.jsonl")), "--protocol", "vsi"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bench_single_rep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let json = dir.path().join("bench.json");
    let o = cgmf(&["bench", "--config", p(&cfg), "--reps", "1", "--threads", "1", "--out", p(&json)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(stats["samples"].as_array().unwrap().len(), 1);
    assert_eq!(stats["median"], stats["p95"]);
    assert!(stats["tokens_per_second"].as_f64().unwrap() > 0.0);
    assert_eq!(stats["threads"], 1);
    let o = cgmf(&["bench", "--config", p(&cfg), "--reps", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(code(&cgmf(&["frobnicate"])), 2);
    assert_eq!(code(&cgmf(&["--help"])), 0);
}
