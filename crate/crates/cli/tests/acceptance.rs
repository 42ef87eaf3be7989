//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line to stderr (uncaptured, so the lines appear in plain
//! `cargo test` output) before asserting.
//!
//! Criteria 6 and 7 share one `niab ablate` run on the seed-42 corpus, which
//! trains three models at the default hyperparameters and takes a while.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{array, s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use niab_core::embedding::{Embedder, HashingEmbedder};
use niab_core::episode::Corpus;
use niab_core::eval::{evaluate, EvalOptions, Policy};
use niab_core::ranker::{
    attention, backward_packed, forward, forward_packed, pack, LogitMatrix, RankerConfig, RankerParams, Scoring,
};
use niab_core::scene::{default_vocabularies, generate_corpus, GenConfig};
use niab_core::sim::Simulator;
use niab_core::trainer::{ce_loss, ce_loss_packed, Ablation, CandidateSpec};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("[acceptance] criterion {id} ({name}): {verdict} | {detail}\n");
    // Written to the raw handle so the test harness does not capture it.
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn niab(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_niab")).args(args).output().expect("spawn niab");
    assert!(out.status.success(), "niab {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn seed42_corpus() -> Corpus {
    generate_corpus(&GenConfig::default(), &default_vocabularies()).unwrap()
}

/// Tiny parameters with every tensor jittered so no gradient vanishes by symmetry.
fn jittered(config: &RankerConfig) -> RankerParams {
    let mut params = RankerParams::init(config, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (_, t) in params.tensors_mut() {
        for x in t.iter_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    params
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let config = RankerConfig::tiny();
    let params = jittered(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = Array3::from_shape_fn((1, 3, config.input_dim), |_| rng.random_range(-1.5..1.5));
    let a = Array3::from_shape_fn((1, 4, config.input_dim), |_| rng.random_range(-1.5..1.5));
    let input = pack(&config, &h, &a, &Array2::from_elem((1, 3), true), &Array2::from_elem((1, 4), true)).unwrap();
    let target = [(1, 2)];
    let loss = |params: &RankerParams| {
        let out = forward_packed(params, &config, &input).unwrap();
        ce_loss_packed(&out.logits, &target).unwrap().0
    };

    let out = forward_packed(&params, &config, &input).unwrap();
    let (_, dlogits) = ce_loss_packed(&out.logits, &target).unwrap();
    let mut grads = params.zeros_like();
    backward_packed(&params, &config, &input, &out, &dlogits, &mut grads).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, _, g)| (n, g.to_vec())).collect();

    let step = 1e-4;
    let mut probe = params.clone();
    let mut worst = (String::new(), 0.0f64);
    let mut zero_ok = true;
    let mut zero_names = Vec::new();
    for (ti, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.tensors_mut()[ti].1[i];
            probe.tensors_mut()[ti].1[i] = orig + step;
            let up = loss(&probe);
            probe.tensors_mut()[ti].1[i] = orig - step;
            let down = loss(&probe);
            probe.tensors_mut()[ti].1[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        if name.ends_with("k.b") || name == "mlp.b2" {
            // Softmax is shift-invariant along the rows these biases shift, so
            // their true gradient is exactly zero and a ratio is meaningless.
            zero_ok &= scale < 1e-9;
            zero_names.push(name.clone());
            continue;
        }
        let rel = if scale == 0.0 { f64::INFINITY } else { diff / scale };
        if rel > worst.1 {
            worst = (name.clone(), rel);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst.1 < 1e-4 && zero_ok && secs < 10.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{} tensors, worst relative error {:.2e} ({}); zero-gradient tensors {:?} below 1e-9: {zero_ok}; {secs:.2} s",
            analytic.len(),
            worst.1,
            worst.0,
            zero_names
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_ce_analytics() {
    let uniform = LogitMatrix {
        values: Array3::zeros((1, 4, 5)),
        step_mask: Array2::from_elem((1, 4), true),
        cand_mask: Array2::from_elem((1, 5), true),
    };
    let (loss, _) = ce_loss(&uniform, &[7]).unwrap();
    let loss_err = (loss - 20f64.ln()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random = LogitMatrix {
        values: Array3::from_shape_fn((3, 4, 5), |_| rng.random_range(-4.0..4.0)),
        step_mask: array![[true, true, true, false], [true, true, true, true], [true, false, true, true]],
        cand_mask: array![[true, true, false, true, true], [true, true, true, true, true], [false, true, true, true, true]],
    };
    let (_, grad) = ce_loss(&random, &[0, 19, 11]).unwrap();
    let worst_sum = grad.axis_iter(Axis(0)).map(|g| g.sum().abs()).fold(0.0, f64::max);
    let pass = loss_err <= 1e-9 && worst_sum <= 1e-9;
    report(
        2,
        "CE analytics",
        pass,
        &format!("|loss - ln 20| = {loss_err:.1e}; worst per-example gradient sum {worst_sum:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_attention_and_masking() {
    let config = RankerConfig { scoring: Scoring::Joint, ..RankerConfig::tiny() };
    let params = RankerParams::init(&config, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = config.input_dim;
    let h = Array3::from_shape_fn((2, 3, d), |_| rng.random_range(-1.0..1.0));
    let a = Array3::from_shape_fn((2, 4, d), |_| rng.random_range(-1.0..1.0));
    let sm = array![[true, true, true], [true, false, true]];
    let cm = array![[true, true, true, true], [true, true, false, true]];
    let base = forward(&params, &config, &h, &a, &sm, &cm).unwrap();

    // Permute candidates 0..4 as [2, 0, 3, 1].
    let perm = [2usize, 0, 3, 1];
    let mut ap = a.clone();
    let mut cmp = cm.clone();
    for (new, &old) in perm.iter().enumerate() {
        ap.slice_mut(s![.., new, ..]).assign(&a.slice(s![.., old, ..]));
        cmp.slice_mut(s![.., new]).assign(&cm.slice(s![.., old]));
    }
    let permuted = forward(&params, &config, &h, &ap, &sm, &cmp).unwrap();
    let mut equivariant = true;
    for b in 0..2 {
        for st in 0..3 {
            for (new, &old) in perm.iter().enumerate() {
                equivariant &= permuted.values[[b, st, new]].to_bits() == base.values[[b, st, old]].to_bits();
            }
        }
    }

    // Overwrite masked content with garbage.
    let mut h2 = h.clone();
    let mut a2 = a.clone();
    h2.slice_mut(s![1, 1, ..]).fill(1e3);
    a2.slice_mut(s![1, 2, ..]).fill(-7.5);
    let garbage = forward(&params, &config, &h2, &a2, &sm, &cm).unwrap();
    let mut independent = true;
    for ((b, st, c), v) in base.values.indexed_iter() {
        if base.is_live(b, st, c) {
            independent &= v.to_bits() == garbage.values[[b, st, c]].to_bits();
        }
    }

    let q = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.7);
    let k = Array2::from_shape_fn((5, 4), |(i, j)| ((i * j) as f64).sin());
    let v = Array2::from_shape_fn((5, 6), |(i, j)| (i + 2 * j) as f64);
    let (single, _) = attention(q.view(), k.view(), v.view(), &[false, false, true, false, false]).unwrap();
    let single_exact = single.rows().into_iter().all(|r| r == v.row(2));
    let (_, weights) = attention(q.view(), k.view(), v.view(), &[true, false, true, true, false]).unwrap();
    let worst_row = weights.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);

    let pass = equivariant && independent && single_exact && worst_row <= 1e-9;
    report(
        3,
        "attention and masking",
        pass,
        &format!(
            "permutation equivariance bitwise: {equivariant}; masked-content independence bitwise: {independent}; single key exact: {single_exact}; worst softmax row error {worst_row:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_generator_simulator_consistency() {
    let started = Instant::now();
    let corpus = seed42_corpus();
    let sim = Simulator::shipped();
    let mut hist = [0usize; 3];
    let (mut unassisted_ok, mut labels, mut labels_ok) = (0, 0, 0);
    for ep in &corpus.episodes {
        hist[ep.oracle_labels.len()] += 1;
        if sim.run_unassisted(ep).map(|r| r.success).unwrap_or(false) {
            unassisted_ok += 1;
        }
        for l in &ep.oracle_labels {
            labels += 1;
            if let Ok(r) = sim.run_assisted(ep, l.human_step_idx, &l.best_robot_action) {
                if r.hss >= 1 && r.success {
                    labels_ok += 1;
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = corpus.len() == 2000
        && hist == [100, 1500, 400]
        && unassisted_ok == corpus.len()
        && labels_ok == labels
        && secs < 120.0;
    report(
        4,
        "generator-simulator consistency",
        pass,
        &format!(
            "{} episodes, label counts (0/1/2) {hist:?}; unassisted success {unassisted_ok}/{}; oracle replays with HSS >= 1 and success {labels_ok}/{labels}; {secs:.1} s",
            corpus.len(),
            corpus.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_metric_semantics() {
    let corpus = seed42_corpus();
    let sim = Simulator::shipped();
    let embedder = Embedder::Hashing(HashingEmbedder::new(64, 0));
    let opts = |policy| EvalOptions {
        policy,
        spec: CandidateSpec { ablation: Ablation::Full, k_step: 5, k_ep: 20, max_candidates: 22 },
        seed: 0,
        keep_logits: false,
    };
    let mut identity_ok = true;
    let mut checked = 0;
    for policy in [Policy::Oracle, Policy::Random, Policy::CosineTop1] {
        let rep = evaluate(&corpus, &embedder, &sim, None, &opts(policy)).unwrap();
        for row in &rep.episodes {
            let ep = corpus.get(&row.episode_id).unwrap();
            let unassisted = sim.run_unassisted(ep).unwrap();
            identity_ok &= row.run.h_human == unassisted.human_trace.len()
                && row.run.h_assist == row.run.human_trace.len()
                && row.hss == row.run.h_human as i64 - row.run.h_assist as i64;
            checked += 1;
        }
    }
    let none = evaluate(&corpus, &embedder, &sim, None, &opts(Policy::NoOp)).unwrap();
    let oracle = evaluate(&corpus, &embedder, &sim, None, &opts(Policy::Oracle)).unwrap();
    let pass = identity_ok && none.mean_hss == 0.0 && oracle.success_acc == 1.0;
    report(
        5,
        "metric semantics",
        pass,
        &format!(
            "HSS trace recount holds on {checked} episode runs: {identity_ok}; no_op mean HSS {}; oracle SuccessAcc {}",
            none.mean_hss, oracle.success_acc
        ),
    );
    assert!(pass);
}

#[derive(serde::Deserialize)]
struct Row {
    variant: String,
    selection_acc: f64,
    mean_hss: f64,
}

#[derive(serde::Deserialize)]
struct Metric {
    wall_ms: u64,
}

#[test]
fn criteria_6_and_7_learnability_and_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (gen, split, ablate) = (root.join("gen"), root.join("split"), root.join("ablate"));
    niab(&["gen", "--seed", "42", "--n", "2000", "--out", p(&gen)]);
    niab(&["split", "--corpus", p(&gen.join("corpus.jsonl")), "--val-fraction", "0.1", "--seed", "42", "--out", p(&split)]);
    niab(&[
        "ablate",
        "--train",
        p(&split.join("train.jsonl")),
        "--val",
        p(&split.join("val.jsonl")),
        "--out",
        p(&ablate),
    ]);
    let rows: Vec<Row> = serde_json::from_slice(&std::fs::read(ablate.join("ablation.json")).unwrap()).unwrap();
    let get = |name: &str| rows.iter().find(|r| r.variant == name).unwrap();
    let (full, no_ret, act) = (get("full"), get("no_retrieval"), get("action_only"));

    let metrics = std::fs::read_to_string(ablate.join("full").join("metrics.jsonl")).unwrap();
    let train_ms = metrics.lines().map(|l| serde_json::from_str::<Metric>(l).unwrap().wall_ms).max().unwrap_or(0);
    let minutes = train_ms as f64 / 60_000.0;
    let pass6 = full.selection_acc >= 0.90 && minutes < 30.0;
    report(
        6,
        "learnability",
        pass6,
        &format!(
            "held-out SelectionAcc {:.4} (target >= 0.90; 0.9020 is the ceiling on this fold); training {minutes:.1} min (target < 30)",
            full.selection_acc
        ),
    );

    let pass7 = full.selection_acc >= no_ret.selection_acc
        && full.selection_acc >= act.selection_acc
        && full.mean_hss >= no_ret.mean_hss
        && full.mean_hss >= act.mean_hss;
    report(
        7,
        "ablation direction",
        pass7,
        &format!(
            "SelectionAcc full {:.4} / no_retrieval {:.4} / action_only {:.4}; mean HSS full {:.4} / no_retrieval {:.4} / action_only {:.4}",
            full.selection_acc, no_ret.selection_acc, act.selection_acc, full.mean_hss, no_ret.mean_hss, act.mean_hss
        ),
    );
    assert!(pass6 && pass7, "criterion 6 passed: {pass6}, criterion 7 passed: {pass7}");
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn criterion_8_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = root.join("small.toml");
    std::fs::write(&config, "[ranker]\nd_model = 32\nn_heads = 4\nmlp_hidden = 32\n\n[train]\nepochs = 2\nlog_wall_time = false\n").unwrap();
    let cfg = p(&config);
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        let (gen, split, train, eval) = (dir.join("gen"), dir.join("split"), dir.join("train"), dir.join("eval"));
        niab(&["--config", cfg, "gen", "--seed", "42", "--n", "300", "--out", p(&gen)]);
        niab(&["--config", cfg, "split", "--corpus", p(&gen.join("corpus.jsonl")), "--out", p(&split)]);
        niab(&[
            "--config",
            cfg,
            "train",
            "--train",
            p(&split.join("train.jsonl")),
            "--val",
            p(&split.join("val.jsonl")),
            "--seed",
            "7",
            "--out",
            p(&train),
        ]);
        niab(&[
            "--config",
            cfg,
            "eval",
            "--corpus",
            p(&split.join("val.jsonl")),
            "--checkpoint",
            p(&train.join("best.ckpt")),
            "--emit-csv",
            "--out",
            p(&eval),
        ]);
        runs.push([
            read(gen.join("corpus.jsonl")),
            read(split.join("train.jsonl")),
            read(split.join("val.jsonl")),
            read(train.join("metrics.jsonl")),
            read(train.join("best.ckpt")),
            read(train.join("last.ckpt")),
            read(eval.join("report.json")),
            read(eval.join("episodes.csv")),
        ]);
    }
    let names = ["corpus", "train fold", "val fold", "metrics log", "best.ckpt", "last.ckpt", "report", "episodes.csv"];
    let differing: Vec<&str> = names.iter().zip(runs[0].iter().zip(&runs[1])).filter(|(_, (a, b))| a != b).map(|(n, _)| *n).collect();
    let pass = differing.is_empty();
    report(
        8,
        "determinism",
        pass,
        &format!("gen/split/train/eval rerun with identical seeds; artifacts differing: {differing:?}"),
    );
    assert!(pass);
}
