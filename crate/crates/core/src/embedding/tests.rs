use proptest::prelude::*;

use super::*;
use crate::episode::Scene;

fn tok(s: &str) -> ActionToken {
    ActionToken::new(s).unwrap()
}

fn episode(seq: &[&str], vocab: &[&str]) -> Episode {
    Episode {
        episode_id: "t".into(),
        scene: Scene::Kitchen,
        human_task_seq: seq.iter().map(|s| tok(s)).collect(),
        robot_vocab: vocab.iter().map(|s| tok(s)).collect(),
        oracle_labels: vec![],
    }
}

fn toy() -> (Episode, Embedder) {
    let entries = [
        ("find_cup", [1.0, 0.0]),
        ("wash_cup", [0.0, 1.0]),
        ("no_op", [0.0, -1.0]),
        ("a_b", [1.0, 0.0]),
        ("c_d", [0.0, 1.0]),
        ("e_f", [-1.0, 0.0]),
        ("g_h", [0.6, 0.8]),
    ];
    let table = EmbeddingTable::new(2, entries.iter().map(|(t, v)| (t.to_string(), v.to_vec())).collect()).unwrap();
    (episode(&["find_cup", "wash_cup"], &["no_op", "a_b", "c_d", "e_f", "g_h"]), Embedder::Table(table))
}

#[test]
fn cosine_basics() {
    let v = [0.3, -1.2, 4.0];
    assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!((cosine(&v, &v.map(|x| -x)).unwrap() + 1.0).abs() < 1e-12);
    assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(EmbeddingError::ZeroVector(_))));
}

#[test]
fn toy_retrieval_matches_hand_ranking() {
    let (ep, emb) = toy();
    let r = retrieve(&ep, &emb, 5, 3, None).unwrap();
    let ranks: Vec<Vec<usize>> = r.per_step_topk.iter().map(|l| l.iter().map(|p| p.0).collect()).collect();
    assert_eq!(ranks, vec![vec![1, 4, 0, 2, 3], vec![2, 4, 1, 3, 0]]);
    assert!((r.per_step_topk[0][1].1 - 0.6).abs() < 1e-7);
    // Episode ranking by best similarity: a_b, c_d (1.0 each), g_h, then no_op appended.
    assert_eq!(r.candidate_indices, vec![1, 2, 4, 0]);
    let top1 = retrieve(&ep, &emb, 1, 2, Some(&tok("e_f"))).unwrap();
    assert_eq!(top1.per_step_topk, vec![vec![(1, 1.0)], vec![(2, 1.0)]]);
    assert_eq!(top1.candidate_indices, vec![1, 2, 0, 3]);
}

#[test]
fn missing_token_and_bad_sizes() {
    let (mut ep, emb) = toy();
    assert!(matches!(retrieve(&ep, &emb, 0, 5, None), Err(EmbeddingError::BadK(_))));
    assert!(matches!(retrieve(&ep, &emb, 1, 1, None), Err(EmbeddingError::BadK(_))));
    assert!(matches!(
        retrieve(&ep, &emb, 1, 2, Some(&tok("zzz"))),
        Err(EmbeddingError::ForceNotInVocab(_))
    ));
    ep.robot_vocab.push(tok("unknown_token"));
    assert_eq!(
        retrieve(&ep, &emb, 1, 2, None).unwrap_err(),
        EmbeddingError::TokenMissing("unknown_token".into())
    );
    ep.robot_vocab.clear();
    assert!(matches!(retrieve(&ep, &emb, 1, 2, None), Err(EmbeddingError::EmptyVocab(_))));
}

#[test]
fn large_k_returns_whole_vocab_sorted() {
    let ep = episode(&["find_cup", "bring_cup_to_sink"], &["no_op", "wash_cup", "find_cup", "clean_sink", "toggle_stove"]);
    let emb = Embedder::Hashing(HashingEmbedder::default());
    let r = retrieve(&ep, &emb, 50, 50, None).unwrap();
    for list in &r.per_step_topk {
        assert_eq!(list.len(), 5);
        assert!(list.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

fn vocab_strategy() -> impl Strategy<Value = Vec<String>> {
    let words = prop::sample::select(vec!["cup", "knife", "sink", "table", "wash", "find", "bring", "to", "apple", "shelf"]);
    prop::collection::vec(prop::collection::vec(words, 1..4).prop_map(|w| w.join("_")), 2..25)
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(u in prop::collection::vec(-5.0f64..5.0, 6), v in prop::collection::vec(-5.0f64..5.0, 6),
                                 a in 0.01f64..100.0, b in 0.01f64..100.0) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let su: Vec<f64> = u.iter().map(|x| x * a).collect();
        let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
        prop_assert!((cosine(&u, &v).unwrap() - cosine(&su, &sv).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn retrieval_is_prefix_monotone_and_duplicate_free(raw in vocab_strategy(), steps in vocab_strategy(), k_ep in 2usize..20) {
        let mut vocab: Vec<String> = vec!["no_op".into()];
        for t in raw {
            if !vocab.contains(&t) {
                vocab.push(t);
            }
        }
        let refs: Vec<&str> = vocab.iter().map(String::as_str).collect();
        let srefs: Vec<&str> = steps.iter().map(String::as_str).collect();
        let ep = episode(&srefs, &refs);
        let emb = Embedder::Hashing(HashingEmbedder::default());
        let force = ep.robot_vocab.last().cloned();
        let small = retrieve(&ep, &emb, 3, k_ep, force.as_ref()).unwrap();
        let large = retrieve(&ep, &emb, 3, k_ep + 1, None).unwrap();
        let base = k_ep.min(ep.robot_vocab.len());
        prop_assert_eq!(&small.candidate_indices[..base], &large.candidate_indices[..base]);
        let mut seen = std::collections::HashSet::new();
        prop_assert!(small.candidate_indices.iter().all(|i| seen.insert(*i)));
        prop_assert!(small.episode_candidates.iter().any(ActionToken::is_no_op));
        prop_assert!(small.episode_candidates.contains(force.as_ref().unwrap()));
    }

    #[test]
    fn rescaling_table_rows_keeps_rankings(scales in prop::collection::vec(0.1f32..10.0, 7)) {
        let (ep, emb) = toy();
        let Embedder::Table(t) = &emb else { unreachable!() };
        let scaled = EmbeddingTable::new(2, t.tokens().iter().zip(&scales)
            .map(|(tok, s)| (tok.clone(), t.get(tok).unwrap().iter().map(|x| x * s).collect()))
            .collect()).unwrap();
        let a = retrieve(&ep, &emb, 5, 3, None).unwrap();
        let b = retrieve(&ep, &Embedder::Table(scaled), 5, 3, None).unwrap();
        prop_assert_eq!(&a.candidate_indices, &b.candidate_indices);
        let idx = |r: &RetrievalResult| r.per_step_topk.iter().map(|l| l.iter().map(|p| p.0).collect::<Vec<_>>()).collect::<Vec<_>>();
        prop_assert_eq!(idx(&a), idx(&b));
    }
}
