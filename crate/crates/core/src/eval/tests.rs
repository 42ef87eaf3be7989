use super::*;
use crate::embedding::HashingEmbedder;
use crate::episode::{OracleLabel, Scene};
use crate::scene::{default_vocabularies, generate_corpus, split_corpus, GenConfig};
use crate::trainer::Ablation;

fn tok(s: &str) -> ActionToken {
    ActionToken::new(s).unwrap()
}

fn episode(id: &str, labels: &[(usize, &str)]) -> Episode {
    Episode {
        episode_id: id.into(),
        scene: Scene::Kitchen,
        human_task_seq: vec![tok("find_knife"), tok("cut_tomato"), tok("wash_tomato")],
        robot_vocab: vec![tok("bring_knife_to_countertop"), tok("wash_tomato"), ActionToken::no_op()],
        oracle_labels: labels
            .iter()
            .map(|&(s, a)| OracleLabel { human_step_idx: s, best_robot_action: tok(a) })
            .collect(),
    }
}

fn pred(id: &str, step: usize, action: &str) -> Prediction {
    Prediction { episode_id: id.into(), step, action: tok(action), candidates: vec![], logits: None }
}

#[test]
fn argmax_rules() {
    let mut m = Array2::zeros((3, 8));
    m[[2, 7]] = 4.0;
    m[[1, 1]] = 3.9;
    assert_eq!(argmax_flat(&m), (2, 7));
    assert_eq!(argmax_flat(&Array2::from_elem((3, 8), 0.25)), (0, 0));
    let mut tie = Array2::zeros((2, 2));
    tie[[0, 1]] = 1.0;
    tie[[1, 0]] = 1.0;
    assert_eq!(argmax_flat(&tie), (0, 1));
}

#[test]
fn selection_semantics() {
    let corpus = Corpus::new(vec![
        episode("a", &[(0, "bring_knife_to_countertop")]),
        episode("b", &[(0, "bring_knife_to_countertop"), (2, "wash_tomato")]),
        episode("c", &[]),
        episode("d", &[(0, "bring_knife_to_countertop")]),
    ]);
    let preds = vec![
        pred("a", 0, "bring_knife_to_countertop"),
        pred("b", 2, "wash_tomato"),
        pred("c", 1, "no_op"),
        pred("d", 1, "bring_knife_to_countertop"),
    ];
    let s = selection_acc(&preds, &corpus).unwrap();
    assert!((s.pair - (1.0 + 0.5 + 1.0 + 0.0) / 4.0).abs() < 1e-15);
    assert!((s.pair_units - 3.0 / 5.0).abs() < 1e-15);
    assert!((s.action_only - (1.0 + 0.5 + 1.0 + 1.0) / 4.0).abs() < 1e-15);
    assert!(matches!(selection_acc(&preds[..3], &corpus), Err(EvalError::MissingPrediction(id)) if id == "d"));
    let wrong_zero = selection_acc(&[pred("c", 0, "wash_tomato")], &Corpus::new(vec![episode("c", &[])])).unwrap();
    assert_eq!(wrong_zero.pair, 0.0);
}

fn seed42() -> Corpus {
    generate_corpus(&GenConfig::default(), &default_vocabularies()).unwrap()
}

fn opts(policy: Policy) -> EvalOptions {
    EvalOptions {
        policy,
        spec: CandidateSpec { ablation: Ablation::Full, k_step: 5, k_ep: 20, max_candidates: 22 },
        seed: 7,
        keep_logits: false,
    }
}

fn hashing() -> Embedder {
    Embedder::Hashing(HashingEmbedder::new(64, 0))
}

#[test]
fn baseline_policies_on_generated_corpus() {
    let corpus = generate_corpus(&GenConfig { n_episodes: 120, seed: 5, ..GenConfig::default() }, &default_vocabularies()).unwrap();
    let sim = Simulator::shipped();
    let emb = hashing();
    let oracle = evaluate(&corpus, &emb, &sim, None, &opts(Policy::Oracle)).unwrap();
    assert_eq!(oracle.success_acc, 1.0);
    assert!(oracle.mean_hss > 0.0);
    let cap: f64 = corpus.episodes.iter().map(|e| if e.oracle_labels.len() == 2 { 0.5 } else { 1.0 }).sum();
    assert!((oracle.selection_acc - cap / corpus.len() as f64).abs() < 1e-12);
    let none = evaluate(&corpus, &emb, &sim, None, &opts(Policy::NoOp)).unwrap();
    assert_eq!(none.mean_hss, 0.0);
    assert!(none.episodes.iter().all(|r| r.hss == 0 && r.run.robot_trace.is_empty()));
    let random = evaluate(&corpus, &emb, &sim, None, &opts(Policy::Random)).unwrap();
    assert!(random.mean_hss <= oracle.mean_hss);
    assert_eq!(random, evaluate(&corpus, &emb, &sim, None, &opts(Policy::Random)).unwrap());
    let cos = evaluate(&corpus, &emb, &sim, None, &opts(Policy::CosineTop1)).unwrap();
    assert!(cos.episodes.iter().all(|r| !r.action.is_no_op()));

    for rep in [&oracle, &none, &random, &cos] {
        let (sel, hss, succ) = rep.recompute();
        assert_eq!((sel, hss, succ), (rep.selection_acc, rep.mean_hss, rep.success_acc));
        assert!(rep.episodes.windows(2).all(|w| w[0].episode_id < w[1].episode_id));
        assert_eq!(rep.corpus_id, corpus_id(&corpus));
        assert_eq!(rep.corpus_id.len(), 16);
    }
    assert_ne!(oracle.config_hash, random.config_hash);
    let csv = random.summary_csv();
    assert!(csv.starts_with(CSV_HEADER));
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(random.episodes_csv().lines().count(), corpus.len() + 1);
    let json = serde_json::to_string(&random).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, random);
    assert!(matches!(evaluate(&corpus, &emb, &sim, None, &opts(Policy::Model)), Err(EvalError::MissingModel)));
}

/// The random policy's expected per-episode score is `1/(S·C)` when the
/// labels are among the candidates (each of two labels is hit with that
/// probability and weighs one half), and `1/C` for zero-label episodes.
#[test]
fn random_selection_matches_analytic_expectation() {
    let corpus = seed42();
    let (_, val) = split_corpus(&corpus, (0.9, 0.1), 0).unwrap();
    let emb = hashing();
    let o = opts(Policy::Random);
    let preds = policy_predictions(&val, &emb, None, &o).unwrap();
    let (mut mean, mut var) = (0.0, 0.0);
    for (ep, p) in val.episodes.iter().zip(&preds) {
        let (s, c) = (ep.num_steps() as f64, p.candidates.len() as f64);
        let per_label: Vec<f64> = ep
            .oracle_labels
            .iter()
            .map(|l| if p.candidates.contains(&l.best_robot_action) { 1.0 / (s * c) } else { 0.0 })
            .collect();
        let (m, second) = if per_label.is_empty() {
            (1.0 / c, 1.0 / c)
        } else {
            let w = 1.0 / per_label.len() as f64;
            // Labels are distinct cells, so hits are mutually exclusive.
            (per_label.iter().sum::<f64>() * w, per_label.iter().sum::<f64>() * w * w)
        };
        mean += m;
        var += second - m * m;
    }
    let n = val.len() as f64;
    let expected = mean / n;
    let sigma = var.sqrt() / n;
    let got = selection_acc(&preds, &val).unwrap().pair;
    assert!((got - expected).abs() <= 3.0 * sigma, "got {got}, expected {expected} ± {}", 3.0 * sigma);
}

#[test]
fn model_predictions_come_from_candidates() {
    let corpus = generate_corpus(&GenConfig { n_episodes: 10, seed: 2, ..GenConfig::default() }, &default_vocabularies()).unwrap();
    let emb = hashing();
    let spec = opts(Policy::Model).spec;
    for scoring in [Scoring::Joint, Scoring::ActionOnly] {
        let config = RankerConfig { d_model: 16, n_heads: 2, n_layers: 1, mlp_hidden: 8, scoring, ..RankerConfig::default() };
        let params = RankerParams::init(&config, 1);
        for ep in &corpus.episodes {
            let p = predict(&params, &config, ep, &emb, &spec).unwrap();
            assert!(p.step < ep.num_steps());
            assert!(p.candidates.contains(&p.action));
            let logits = p.logits.unwrap();
            let rows = if scoring == Scoring::Joint { ep.num_steps() } else { 1 };
            assert_eq!(logits.len(), rows);
            assert_eq!(logits[0].len(), p.candidates.len());
        }
        let o = EvalOptions { policy: Policy::Model, ..opts(Policy::Model) };
        let sim = Simulator::shipped();
        let rep = evaluate(&corpus, &emb, &sim, Some((&params, &config)), &o).unwrap();
        assert_eq!(rep.n_episodes, 10);
    }
}

#[test]
fn policy_names_round_trip() {
    for p in Policy::ALL {
        assert_eq!(Policy::parse(p.as_str()), Some(p));
    }
    assert_eq!(Policy::parse("noop"), None);
}
