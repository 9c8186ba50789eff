//! Oracles and fixtures shared by the integration tests and the acceptance
//! harness. Nothing here calls into the library's linear algebra.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sensealign::config::TrainConfig;
use sensealign::corpus::{count_tokens, TokenId, TokenSequence, Vocabulary};
use sensealign::senses::SenseStore;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Five-point central difference; `f(delta)` evaluates the objective with
/// one coordinate shifted by `delta`.
pub fn derivative(mut f: impl FnMut(f64) -> f64) -> f64 {
    let eps = 1e-4;
    (8.0 * (f(eps) - f(-eps)) - (f(2.0 * eps) - f(-2.0 * eps))) / (12.0 * eps)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-10 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Store with random sense vectors and a random subset of senses switched
/// off (at least one per token survives).
pub fn random_store(rng: &mut ChaCha8Rng, v: usize, s: usize, d: usize) -> SenseStore {
    let mut store = SenseStore::new(v, s, d, 0.1, 0.01, rng.random()).unwrap();
    for x in store.sense_vectors_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    for t in 0..v as TokenId {
        let keep = rng.random_range(0..s);
        for sense in 0..s {
            if sense != keep && rng.random::<f64>() < 0.3 {
                store.set_active(t, sense, false);
            }
        }
    }
    store
}

/// Brute-force softmax over every active `(token, sense)` slot, in slot order.
pub fn oracle_probabilities(h: &[f64], store: &SenseStore) -> Vec<((TokenId, usize), f64)> {
    let mut logits = Vec::new();
    for t in 0..store.vocab_size() as TokenId {
        for s in 0..store.num_senses() {
            if store.is_active(t, s) {
                logits.push(((t, s), dot(h, store.sense_vector(t, s))));
            }
        }
    }
    let m = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x.1 - m).exp()).sum();
    logits.into_iter().map(|(k, l)| (k, (l - m).exp() / z)).collect()
}

/// Weighted negative log-likelihood of the given slots.
pub fn oracle_nll(h: &[f64], store: &SenseStore, targets: &[((TokenId, usize), f64)]) -> f64 {
    let probs = oracle_probabilities(h, store);
    targets
        .iter()
        .map(|(k, w)| {
            let p = probs.iter().find(|(slot, _)| slot == k).expect("active target").1;
            -w * p.ln()
        })
        .sum()
}

/// Random active `(token, sense)` of a store.
pub fn random_active(rng: &mut ChaCha8Rng, store: &SenseStore) -> (TokenId, usize) {
    let t = rng.random_range(0..store.vocab_size()) as TokenId;
    let senses = store.active_senses(t);
    (t, senses[rng.random_range(0..senses.len())])
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues in descending order with unit eigenvectors as columns of a
/// row-major `n × n` matrix.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + i];
        }
    }
    (values, vectors)
}

/// Top-`k` principal directions of the rows (mean-centered covariance),
/// as `k` unit vectors.
pub fn batch_pca(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    let (_, vecs) = jacobi_eigen(&cov, d);
    (0..k).map(|c| (0..d).map(|r| vecs[r * d + c]).collect()).collect()
}

/// Gram-Schmidt orthonormalization of a set of vectors.
pub fn orthonormalize(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let mut u = v.clone();
        for b in &out {
            let p = dot(&u, b);
            for (x, y) in u.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = dot(&u, &u).sqrt();
        out.push(u.into_iter().map(|x| x / n).collect());
    }
    out
}

/// Largest principal angle between the spans of two equally sized sets of
/// vectors.
pub fn max_principal_angle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let qa = orthonormalize(a);
    let qb = orthonormalize(b);
    let k = qa.len();
    let m: Vec<f64> = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| dot(&qa[i], &qb[j])).collect();
    // Singular values of m are the square roots of the eigenvalues of mᵀm.
    let mut mtm = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            mtm[i * k + j] = (0..k).map(|r| m[r * k + i] * m[r * k + j]).sum();
        }
    }
    let (vals, _) = jacobi_eigen(&mtm, k);
    let smallest = vals.last().copied().unwrap_or(0.0).max(0.0).sqrt().min(1.0);
    smallest.acos()
}

/// A small corpus of cued sentences with a handful of ambiguous tokens.
pub fn toy_sentences(n: usize, seed: u64) -> Vec<Vec<String>> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(4..10);
            (0..len)
                .map(|_| {
                    let w = rng.random_range(0..24);
                    if w < 3 { format!("amb{w}") } else { format!("w{w}") }
                })
                .collect()
        })
        .collect()
}

pub fn toy_data(n: usize, seed: u64) -> (Vocabulary, Vec<TokenSequence>) {
    let sentences = toy_sentences(n, seed);
    let vocab = Vocabulary::from_counts(count_tokens(&[(&sentences, "en")]), 1).unwrap();
    let corpus = sentences.iter().map(|s| vocab.encode_sentence(s, "en")).collect();
    (vocab, corpus)
}

/// Small, fast configuration that still crosses warm-up, a projection
/// refresh and a pruning check within a few dozen steps.
pub fn small_config(steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("hidden_dim", "8"),
        ("embed_dim", "6"),
        ("cluster_proj_dim", "4"),
        ("batch_size", "4"),
        ("unroll_steps", "6"),
        ("proj_update_interval", "40"),
        ("pca_sample", "200"),
        ("prune_interval", "15"),
        ("warmup_steps", "10"),
        ("min_count", "1"),
        ("metrics_interval", "5"),
        ("seed", "11"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.steps = steps;
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Sense,
    Translation,
    Joint,
    /// Joint loss for a token without a dictionary translation.
    JointNoTranslation,
}

pub const LOSS_KINDS: [LossKind; 4] = [
    LossKind::Sense,
    LossKind::Translation,
    LossKind::Joint,
    LossKind::JointNoTranslation,
];

fn eval_loss(
    kind: LossKind,
    h: &[f64],
    src: (TokenId, usize),
    tr: (TokenId, usize),
    store: &SenseStore,
) -> sensealign::losses::LossOutput {
    use sensealign::losses::{joint_loss, sense_ce, translation_ce};
    match kind {
        LossKind::Sense => sense_ce(h, src, store),
        LossKind::Translation => translation_ce(h, tr, store),
        LossKind::Joint => joint_loss(h, src, Some(tr), store),
        LossKind::JointNoTranslation => joint_loss(h, src, None, store),
    }
    .unwrap()
}

fn oracle_targets(kind: LossKind, src: (TokenId, usize), tr: (TokenId, usize)) -> Vec<((TokenId, usize), f64)> {
    match kind {
        LossKind::Sense | LossKind::JointNoTranslation => vec![(src, 1.0)],
        LossKind::Translation => vec![(tr, 1.0)],
        LossKind::Joint => vec![(src, 0.5), (tr, 0.5)],
    }
}

/// One random instance: returns the largest relative error between the
/// analytic gradient (w.r.t. `h` and every sense vector) and central
/// differences, after checking the value against the brute-force oracle.
pub fn loss_gradient_error(kind: LossKind, rng: &mut ChaCha8Rng) -> f64 {
    let (v, s, d) = (5, 3, 4);
    let mut store = random_store(rng, v, s, d);
    let h = rand_vec(rng, d, 1.5);
    let src = random_active(rng, &store);
    let mut tr = random_active(rng, &store);
    while tr.0 == src.0 {
        tr = random_active(rng, &store);
    }
    let out = eval_loss(kind, &h, src, tr, &store);
    let oracle = oracle_nll(&h, &store, &oracle_targets(kind, src, tr));
    assert!(
        (out.value - oracle).abs() <= 1e-12 * oracle.abs().max(1.0),
        "{kind:?}: value {} vs oracle {oracle}",
        out.value
    );

    let mut worst: f64 = 0.0;
    for i in 0..d {
        let fd = derivative(|delta| {
            let mut hd = h.clone();
            hd[i] += delta;
            eval_loss(kind, &hd, src, tr, &store).value
        });
        worst = worst.max(rel_err(out.grad_h[i], fd));
    }
    for t in 0..v as TokenId {
        for sense in 0..s {
            let slot = t * s as u32 + sense as u32;
            let analytic = out.grad_w.iter().find(|(k, _)| *k == slot).map(|(_, g)| g.clone());
            if !store.is_active(t, sense) {
                assert!(analytic.is_none(), "{kind:?}: gradient for inactive slot {slot}");
                continue;
            }
            let analytic = analytic.unwrap_or_else(|| vec![0.0; d]);
            for i in 0..d {
                let orig = store.sense_vector(t, sense)[i];
                let fd = derivative(|delta| {
                    store.sense_vector_mut(t, sense)[i] = orig + delta;
                    eval_loss(kind, &h, src, tr, &store).value
                });
                store.sense_vector_mut(t, sense)[i] = orig;
                worst = worst.max(rel_err(analytic[i], fd));
            }
        }
    }
    worst
}

/// Encoder followed by the joint loss at every target of a small batch, with
/// fixed sense choices. Compares the chained analytic gradient (through
/// `grad_h` and the encoder backward pass) with central differences over
/// every encoder parameter and every sense vector.
pub fn composition_gradient_error(mode: sensealign::corpus::Mode, rng: &mut ChaCha8Rng) -> f64 {
    use sensealign::corpus::{Batch, Mode};
    use sensealign::encoder::{EncoderState, TENSOR_NAMES};
    use sensealign::losses::joint_loss;

    let (v, s, e, d) = (7, 2, 3, 4);
    let (rows, len) = (2, 3);
    let encoder = EncoderState::new(v, e, d, rng.random());
    let mut store = random_store(rng, v, s, d);
    let ids = |rng: &mut ChaCha8Rng| -> Vec<TokenId> { (0..rows * len).map(|_| rng.random_range(2..v as u32)).collect() };
    let targets = ids(rng);
    let inputs = match mode {
        Mode::Forward => ids(rng),
        Mode::Masked => targets.iter().map(|&t| if rng.random::<f64>() < 0.5 { 1 } else { t }).collect(),
    };
    let batch = Batch {
        mode,
        rows,
        len,
        inputs,
        targets: targets.clone(),
        target_mask: vec![true; rows * len],
    };
    let choices: Vec<((TokenId, usize), Option<(TokenId, usize)>)> = targets
        .iter()
        .map(|&t| {
            let senses = store.active_senses(t);
            let src = (t, senses[rng.random_range(0..senses.len())]);
            let tr = (rng.random::<f64>() < 0.5).then(|| random_active(rng, &store));
            (src, tr)
        })
        .collect();

    let objective = |enc: &EncoderState, store: &SenseStore| -> f64 {
        let ctx = enc.encode(&batch).unwrap();
        let mut total = 0.0;
        for r in 0..rows {
            for k in 0..len {
                let (src, tr) = choices[r * len + k];
                total += joint_loss(ctx.prediction_rep(r, k), src, tr, store).unwrap().value;
            }
        }
        total
    };

    let ctx = encoder.encode(&batch).unwrap();
    let mut grad_pred = vec![0.0; rows * len * d];
    let mut grad_w = vec![0.0; store.sense_vectors().len()];
    for r in 0..rows {
        for k in 0..len {
            let (src, tr) = choices[r * len + k];
            let out = joint_loss(ctx.prediction_rep(r, k), src, tr, &store).unwrap();
            grad_pred[(r * len + k) * d..][..d].copy_from_slice(&out.grad_h);
            for (slot, g) in out.grad_w {
                for (acc, x) in grad_w[slot as usize * d..][..d].iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }
    let grads = encoder.backward(&ctx, &grad_pred).unwrap();

    let mut worst: f64 = 0.0;
    for (ti, name) in TENSOR_NAMES.iter().enumerate() {
        for idx in 0..grads.tensors()[ti].len() {
            let fd = derivative(|delta| {
                let mut shifted = encoder.clone();
                shifted.tensors_mut()[ti][idx] += delta;
                objective(&shifted, &store)
            });
            let err = rel_err(grads.tensors()[ti][idx], fd);
            assert!(err.is_finite(), "{name}[{idx}]");
            worst = worst.max(err);
        }
    }
    for idx in 0..grad_w.len() {
        let orig = store.sense_vectors()[idx];
        let fd = derivative(|delta| {
            store.sense_vectors_mut()[idx] = orig + delta;
            objective(&encoder, &store)
        });
        store.sense_vectors_mut()[idx] = orig;
        worst = worst.max(rel_err(grad_w[idx], fd));
    }
    worst
}

/// Random orthogonal `d × d` matrix (Gram-Schmidt on Gaussian-ish columns).
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> sensealign::linalg::DenseMatrix {
    let cols: Vec<Vec<f64>> = (0..d).map(|_| rand_vec(rng, d, 1.0)).collect();
    let q = orthonormalize(&cols);
    let mut data = vec![0.0; d * d];
    for (c, col) in q.iter().enumerate() {
        for r in 0..d {
            data[r * d + c] = col[r];
        }
    }
    sensealign::linalg::DenseMatrix::from_vec(d, d, data).unwrap()
}

/// `n` random source rows and their exact images `W aᵢ`.
pub fn mapped_pairs(
    rng: &mut ChaCha8Rng,
    w: &sensealign::linalg::DenseMatrix,
    n: usize,
) -> (sensealign::linalg::DenseMatrix, sensealign::linalg::DenseMatrix) {
    use sensealign::linalg::DenseMatrix;
    let d = w.rows();
    let a: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(rng, d, 2.0)).collect();
    let b: Vec<Vec<f64>> = a
        .iter()
        .map(|x| (0..d).map(|r| dot(w.row(r), x)).collect())
        .collect();
    (DenseMatrix::from_rows(&a).unwrap(), DenseMatrix::from_rows(&b).unwrap())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Two clusters at means `±µ(t)`, where `µ` rotates at `drift` per step. A single token with two senses follows the stream through
/// sense selection; returns the selection purity over the last `tail` steps.
pub fn drifting_stream_purity(seed: u64, steps: usize, tail: usize, drift: f64, alpha: f64, d: usize, proj_dim: usize) -> f64 {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    use sensealign::senses::ProjectionState;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut store = SenseStore::new(1, 2, d, 0.1, alpha, rng.random()).unwrap();
    let mut proj = ProjectionState::new(d, proj_dim, 500, 2000, 1, rng.random()).unwrap();
    let radius = 1.0;
    // Angular speed so that each mean moves `drift` per step.
    let omega = drift / radius;
    let mut counts = [[0usize; 2]; 2];
    for t in 0..steps {
        let c = rng.random_range(0..2);
        let sign = if c == 0 { 1.0 } else { -1.0 };
        let phase = omega * t as f64;
        let mut h: Vec<f64> = (0..d).map(|_| noise.sample(&mut rng)).collect();
        h[0] += sign * radius * phase.cos();
        h[1] += sign * radius * phase.sin();
        let s = store.select_sense(&mut proj, 0, &h).unwrap();
        if t >= steps - tail {
            counts[c][s] += 1;
        }
    }
    let majority: usize = (0..2).map(|s| counts[0][s].max(counts[1][s])).sum();
    majority as f64 / tail as f64
}

/// Offers a planted rank-`k` stream (distinct variances, small isotropic
/// noise) to the projection. Returns the largest principal angle between
/// the refreshed `P` and the planted subspace, and the largest deviation of
/// `P` from an independent batch PCA of the final queue (column signs
/// aligned).
pub fn planted_subspace(seed: u64, d: usize, k: usize, offers: usize) -> (f64, f64) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    use sensealign::senses::ProjectionState;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = orthonormalize(&(0..k).map(|_| rand_vec(&mut rng, d, 1.0)).collect::<Vec<_>>());
    let unit = Normal::new(0.0, 1.0).unwrap();
    let interval = 500;
    assert_eq!(offers % interval, 0, "the last offer must trigger a refresh");
    let mut proj = ProjectionState::new(d, k, interval as u64, 2000, 1, rng.random()).unwrap();
    for _ in 0..offers {
        let mut x: Vec<f64> = (0..d).map(|_| 0.05 * unit.sample(&mut rng)).collect();
        for (j, b) in basis.iter().enumerate() {
            let z = (4.0 - 0.1 * j as f64) * unit.sample(&mut rng);
            for (xi, bi) in x.iter_mut().zip(b) {
                *xi += z * bi;
            }
        }
        proj.offer(&x).unwrap();
    }
    assert!(proj.refreshes() > 0);
    let p = proj.matrix();
    let cols: Vec<Vec<f64>> = (0..k).map(|c| p.column(c)).collect();
    let angle = max_principal_angle(&cols, &basis);

    let queue: Vec<Vec<f64>> = proj.queue().map(<[f64]>::to_vec).collect();
    let oracle = batch_pca(&queue, k);
    let mut worst: f64 = 0.0;
    for (got, want) in cols.iter().zip(&oracle) {
        let sign = if dot(got, want) < 0.0 { -1.0 } else { 1.0 };
        let flipped: Vec<f64> = want.iter().map(|x| sign * x).collect();
        worst = worst.max(max_abs_diff(got, &flipped));
    }
    (angle, worst)
}

/// Selects sense `s` of `token` exactly (its own center as the context).
pub fn select_exact(store: &mut SenseStore, proj: &mut sensealign::senses::ProjectionState, token: TokenId, s: usize) {
    let h = store.center(token, s).to_vec();
    let got = store.select_sense(proj, token, &h).unwrap();
    assert_eq!(got, s);
}

/// The three pruning cases. Returns a description of the first violation.
pub fn pruning_cases(beta: f64) -> Result<(), String> {
    use sensealign::senses::ProjectionState;
    let d = 6;
    let fresh_proj = || ProjectionState::new(d, d, u64::MAX, 10, 1, 3).unwrap();

    // A planted sense that is never selected goes at the first check.
    let mut store = SenseStore::new(2, 3, d, 0.5, 0.01, 1).unwrap();
    let mut proj = fresh_proj();
    for i in 0..100 {
        select_exact(&mut store, &mut proj, 0, i % 2);
        select_exact(&mut store, &mut proj, 1, i % 3);
    }
    let removed = store.prune_senses(beta).map_err(|e| e.to_string())?;
    if removed != vec![(0, 2)] {
        return Err(format!("planted case removed {removed:?}"));
    }

    // Uniform selection over five senses removes nothing.
    let mut store = SenseStore::new(3, 5, d, 0.5, 0.01, 2).unwrap();
    let mut proj = fresh_proj();
    for i in 0..250 {
        for t in 0..3 {
            select_exact(&mut store, &mut proj, t, i % 5);
        }
    }
    let removed = store.prune_senses(beta).map_err(|e| e.to_string())?;
    if !removed.is_empty() || store.active_count() != 15 {
        return Err(format!("uniform case removed {removed:?}"));
    }

    // One sense always survives, even when every sense falls below the
    // threshold and across repeated checks.
    let mut rng = {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(4)
    };
    let mut store = SenseStore::new(20, 5, d, 0.5, 0.01, 3).unwrap();
    let mut proj = fresh_proj();
    for _round in 0..5 {
        for t in 0..20 {
            let active = store.active_senses(t);
            for _ in 0..rng.random_range(0..30) {
                let s = active[rng.random_range(0..active.len())];
                select_exact(&mut store, &mut proj, t, s);
            }
        }
        store.prune_senses(0.99).map_err(|e| e.to_string())?;
        store.check_invariants().map_err(|e| e.to_string())?;
    }
    Ok(())
}
