//! Stratified train/validation splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SceneError;
use crate::episode::{Corpus, Split};

/// Rounds to the nearest integer, halves away from zero.
pub fn round_half_away(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// Splits `corpus` into (train, val), stratified jointly on scene and label count.
///
/// Within every (scene, label-count) cell the episodes are shuffled with `seed`
/// and `round_half_away(val * n)` of them go to validation. Both folds keep the
/// corpus order.
pub fn split_corpus(corpus: &Corpus, fractions: (f64, f64), seed: u64) -> Result<(Corpus, Corpus), SceneError> {
    let (train, val) = fractions;
    if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || (train + val - 1.0).abs() > 1e-9 {
        return Err(SceneError::BadConfig(format!("split fractions ({train}, {val}) must sum to 1")));
    }
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, ep) in corpus.episodes.iter().enumerate() {
        let scene = crate::episode::Scene::ALL.iter().position(|s| *s == ep.scene).unwrap();
        cells.entry((scene, ep.oracle_labels.len())).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_val = vec![false; corpus.len()];
    for members in cells.values_mut() {
        members.shuffle(&mut rng);
        let n_val = round_half_away(val * members.len() as f64).min(members.len());
        for &i in &members[..n_val] {
            in_val[i] = true;
        }
    }
    let (mut train_eps, mut val_eps) = (Vec::new(), Vec::new());
    for (ep, v) in corpus.episodes.iter().zip(in_val) {
        if v { val_eps.push(ep.clone()) } else { train_eps.push(ep.clone()) }
    }
    for (fold, frac, eps) in [("train", train, &train_eps), ("val", val, &val_eps)] {
        if frac > 0.0 && eps.is_empty() && !corpus.is_empty() {
            return Err(SceneError::EmptyStratum { stratum: "all cells".into(), fold: fold.into() });
        }
    }
    Ok((
        Corpus::new(train_eps).with_split(Split::Train),
        Corpus::new(val_eps).with_split(Split::Val),
    ))
}
