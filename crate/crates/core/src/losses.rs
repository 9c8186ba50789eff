//! Output-layer objectives over a full softmax.
//!
//! The sense-aware losses share one denominator: every active sense of every
//! token. All gradients are exact.

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, DenseMatrix};
use crate::senses::SenseStore;

/// Log-partition and target logits of one softmax evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxEval {
    pub log_z: f64,
    pub max_logit: f64,
}

/// Core kernel: softmax cross entropy over `n` candidate vectors against a
/// weighted set of target candidates.
///
/// Adds `scale · ∂loss/∂h` into `grad_h` and reports `∂loss/∂w_j = coef · h`
/// through `sink(j, scale · coef)` for every candidate. Returns the
/// log-partition; the loss is `log_z · Σw − Σ wₜ zₜ`.
pub(crate) fn softmax_xent<'a>(
    h: &[f64],
    n: usize,
    candidate: impl Fn(usize) -> &'a [f64],
    targets: &[(usize, f64)],
    scale: f64,
    grad_h: &mut [f64],
    mut sink: impl FnMut(usize, f64),
    logits: &mut Vec<f64>,
) -> SoftmaxEval {
    logits.clear();
    logits.extend((0..n).map(|j| dot(h, candidate(j))));
    let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max_logit).exp();
        sum += *z;
    }
    let log_z = max_logit + sum.ln();
    let inv = 1.0 / sum;
    for j in 0..n {
        let mut coef = logits[j] * inv;
        for &(t, w) in targets {
            if t == j {
                coef -= w;
            }
        }
        let c = scale * coef;
        if c != 0.0 {
            axpy(c, candidate(j), grad_h);
        }
        sink(j, c);
    }
    SoftmaxEval { log_z, max_logit }
}

/// Loss value with gradients for one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient with respect to the prediction representation.
    pub grad_h: Vec<f64>,
    /// Gradients with respect to output vectors, keyed by flat slot
    /// (`token * S + sense`; the token id for the baseline).
    pub grad_w: Vec<(u32, Vec<f64>)>,
    pub selected: (TokenId, usize),
    pub translation_selected: Option<(TokenId, usize)>,
}

fn collect_output(
    h: &[f64],
    slot_of: impl Fn(usize) -> u32,
    coefs: Vec<(usize, f64)>,
) -> Vec<(u32, Vec<f64>)> {
    coefs
        .into_iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|(j, c)| (slot_of(j), h.iter().map(|x| c * x).collect()))
        .collect()
}

/// Standard cross entropy with one output embedding per token (`V × d`).
pub fn baseline_ce(h: &[f64], target: TokenId, output_embeddings: &DenseMatrix) -> Result<LossOutput> {
    let v = output_embeddings.rows();
    if target as usize >= v || output_embeddings.cols() != h.len() {
        return Err(Error::Shape("target or width outside output embeddings".into()));
    }
    let mut grad_h = vec![0.0; h.len()];
    let mut coefs = Vec::with_capacity(v);
    let mut logits = Vec::new();
    let eval = softmax_xent(
        h,
        v,
        |j| output_embeddings.row(j),
        &[(target as usize, 1.0)],
        1.0,
        &mut grad_h,
        |j, c| coefs.push((j, c)),
        &mut logits,
    );
    let value = eval.log_z - dot(h, output_embeddings.row(target as usize));
    Ok(LossOutput {
        value,
        grad_h,
        grad_w: collect_output(h, |j| j as u32, coefs),
        selected: (target, 0),
        translation_selected: None,
    })
}

fn active_position(store: &SenseStore, token: TokenId, sense: usize) -> Result<usize> {
    if token as usize >= store.vocab_size() || sense >= store.num_senses() {
        return Err(Error::Shape(format!("sense ({token}, {sense}) out of range")));
    }
    let slot = (token as usize * store.num_senses() + sense) as u32;
    store
        .active_slots()
        .binary_search(&slot)
        .map_err(|_| Error::Invariant(format!("sense ({token}, {sense}) is not active")))
}

/// Weighted sense-aware cross entropy; `targets` are `(token, sense, weight)`.
/// Shared implementation of the sense, translation and joint losses.
pub(crate) fn weighted_sense_ce(
    h: &[f64],
    targets: &[(TokenId, usize, f64)],
    store: &SenseStore,
    scale: f64,
    grad_h: &mut [f64],
    sink: impl FnMut(u32, f64),
    logits: &mut Vec<f64>,
) -> Result<(f64, Vec<f64>)> {
    if h.len() != store.dim() {
        return Err(Error::Shape("representation width differs from sense store".into()));
    }
    let mut positioned = Vec::with_capacity(targets.len());
    for &(t, s, w) in targets {
        positioned.push((active_position(store, t, s)?, w));
    }
    let slots = store.active_slots();
    let mut sink = sink;
    let eval = softmax_xent(
        h,
        slots.len(),
        |j| store.slot_vector(slots[j]),
        &positioned,
        scale,
        grad_h,
        |j, c| sink(slots[j], c),
        logits,
    );
    let per_target = targets
        .iter()
        .map(|&(t, s, _)| eval.log_z - dot(h, store.sense_vector(t, s)))
        .collect();
    Ok((eval.log_z, per_target))
}

fn sense_output(
    h: &[f64],
    targets: &[(TokenId, usize, f64)],
    store: &SenseStore,
) -> Result<(f64, Vec<f64>, Vec<(u32, Vec<f64>)>)> {
    let mut grad_h = vec![0.0; h.len()];
    let mut coefs = Vec::new();
    let mut logits = Vec::new();
    let (_, per_target) = weighted_sense_ce(
        h,
        targets,
        store,
        1.0,
        &mut grad_h,
        |slot, c| coefs.push((slot as usize, c)),
        &mut logits,
    )?;
    let value = targets
        .iter()
        .zip(&per_target)
        .map(|(&(_, _, w), l)| w * l)
        .sum();
    Ok((value, grad_h, collect_output(h, |j| j as u32, coefs)))
}

/// `−log p(sense | context)` with the denominator over all active senses.
pub fn sense_ce(h: &[f64], selected: (TokenId, usize), store: &SenseStore) -> Result<LossOutput> {
    let (value, grad_h, grad_w) = sense_output(h, &[(selected.0, selected.1, 1.0)], store)?;
    Ok(LossOutput {
        value,
        grad_h,
        grad_w,
        selected,
        translation_selected: None,
    })
}

/// `−log p(translation sense | context)`, same denominator as [`sense_ce`].
pub fn translation_ce(
    h: &[f64],
    translation: (TokenId, usize),
    store: &SenseStore,
) -> Result<LossOutput> {
    let (value, grad_h, grad_w) =
        sense_output(h, &[(translation.0, translation.1, 1.0)], store)?;
    Ok(LossOutput {
        value,
        grad_h,
        grad_w,
        selected: translation,
        translation_selected: Some(translation),
    })
}

/// Average of the sense and translation losses when a translation is
/// available, otherwise the sense loss alone.
pub fn joint_loss(
    h: &[f64],
    source: (TokenId, usize),
    translation: Option<(TokenId, usize)>,
    store: &SenseStore,
) -> Result<LossOutput> {
    let targets: Vec<(TokenId, usize, f64)> = match translation {
        Some(t) => vec![(source.0, source.1, 0.5), (t.0, t.1, 0.5)],
        None => vec![(source.0, source.1, 1.0)],
    };
    let (value, grad_h, grad_w) = sense_output(h, &targets, store)?;
    Ok(LossOutput {
        value,
        grad_h,
        grad_w,
        selected: source,
        translation_selected: translation,
    })
}

/// Softmax probabilities over the active senses, aligned with
/// [`SenseStore::active_slots`].
pub fn sense_probabilities(h: &[f64], store: &SenseStore) -> Vec<f64> {
    let slots = store.active_slots();
    let logits: Vec<f64> = slots.iter().map(|&s| dot(h, store.slot_vector(s))).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct log-sum-exp without max subtraction or shared code.
    fn oracle(h: &[f64], vectors: &[Vec<f64>], target: usize) -> f64 {
        let z: Vec<f64> = vectors
            .iter()
            .map(|w| w.iter().zip(h).map(|(a, b)| a * b).sum())
            .collect();
        let lse = z.iter().map(|x| x.exp()).sum::<f64>().ln();
        lse - z[target]
    }

    #[test]
    fn baseline_uniform_two_tokens() {
        let w = DenseMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let out = baseline_ce(&[0.3, 0.7], 1, &w).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn baseline_saturates_with_scale() {
        let h = [1.0, 0.0, 0.0];
        let mut prev = f64::INFINITY;
        for scale in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let w = DenseMatrix::from_rows(&[
                [scale, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ])
            .unwrap();
            let v = baseline_ce(&h, 0, &w).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn baseline_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..7).map(|_| random_vec(&mut rng, 5)).collect();
        let w = DenseMatrix::from_rows(&rows).unwrap();
        let h = random_vec(&mut rng, 5);
        for t in 0..7 {
            let v = baseline_ce(&h, t, &w).unwrap().value;
            assert!((v - oracle(&h, &rows, t as usize)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sense_equals_baseline_bitwise() {
        let store = SenseStore::new(6, 1, 4, 0.1, 0.01, 2).unwrap();
        let w = DenseMatrix::from_vec(6, 4, store.sense_vectors().to_vec()).unwrap();
        let h = [0.2, -0.4, 0.9, 0.1];
        let a = baseline_ce(&h, 3, &w).unwrap();
        let b = sense_ce(&h, (3, 0), &store).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.grad_h, b.grad_h);
        assert_eq!(a.grad_w, b.grad_w);
    }

    #[test]
    fn uniform_over_all_senses() {
        let mut store = SenseStore::new(2, 2, 2, 0.1, 0.01, 2).unwrap();
        for x in store.sense_vectors_mut().chunks_mut(2) {
            x.copy_from_slice(&[1.0, 1.0]);
        }
        let out = sense_ce(&[0.5, -0.2], (1, 1), &store).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-15);
        let tr = translation_ce(&[0.5, -0.2], (0, 1), &store).unwrap();
        assert!((tr.value - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn translation_two_tokens_single_sense() {
        let mut store = SenseStore::new(2, 1, 2, 0.1, 0.01, 2).unwrap();
        store.sense_vectors_mut().copy_from_slice(&[0.0, 1.0, 0.0, 1.0]);
        let out = translation_ce(&[1.0, 2.0], (1, 0), &store).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pruned_senses_match_brute_force() {
        let mut store = SenseStore::new(5, 3, 4, 0.1, 0.01, 9).unwrap();
        for (t, s) in [(0, 1), (2, 0), (3, 2), (4, 1)] {
            store.set_active(t, s, false);
        }
        assert_eq!(store.active_count(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_vec(&mut rng, 4);
        let active: Vec<(TokenId, usize)> = (0..5)
            .flat_map(|t| (0..3).map(move |s| (t, s)))
            .filter(|&(t, s)| store.is_active(t, s))
            .collect();
        let vectors: Vec<Vec<f64>> = active
            .iter()
            .map(|&(t, s)| store.sense_vector(t, s).to_vec())
            .collect();
        for (i, &(t, s)) in active.iter().enumerate() {
            let v = sense_ce(&h, (t, s), &store).unwrap().value;
            assert!((v - oracle(&h, &vectors, i)).abs() < 1e-12);
        }
        assert!(sense_ce(&h, (2, 0), &store).is_err());
        let grads = sense_ce(&h, (1, 1), &store).unwrap().grad_w;
        assert!(grads.iter().all(|(slot, _)| store.active_slots().contains(slot)));
    }

    #[test]
    fn joint_branches() {
        let store = SenseStore::new(4, 2, 3, 0.1, 0.01, 1).unwrap();
        let h = [0.3, -0.1, 0.5];
        let mono = joint_loss(&h, (2, 1), None, &store).unwrap();
        let s = sense_ce(&h, (2, 1), &store).unwrap();
        assert_eq!(mono.value, s.value);
        let same = joint_loss(&h, (2, 1), Some((2, 1)), &store).unwrap();
        assert!((same.value - s.value).abs() < 1e-15);
        let t = translation_ce(&h, (3, 0), &store).unwrap();
        let both = joint_loss(&h, (2, 1), Some((3, 0)), &store).unwrap();
        assert!((both.value - (s.value + t.value) / 2.0).abs() < 1e-12);
        assert!(both.value >= s.value.min(t.value));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let store = SenseStore::new(10, 3, 5, 0.1, 0.01, 4).unwrap();
        let p = sense_probabilities(&[3.0, -2.0, 1.0, 0.5, 0.0], &store);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
