//! Recurrent contextual encoder with exact reverse-mode gradients.
//!
//! A single tanh recurrent layer reads input embeddings left to right. For
//! masked prediction a second, separately parameterized layer reads the
//! sequence right to left and the two hidden states are summed per position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Batch, Mode, TokenId, BOS};
use crate::error::{Error, Result};
use crate::linalg::axpy;

/// Parameters of one recurrent direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCell {
    /// `e × d`
    pub w_in: Vec<f64>,
    /// `d × d`
    pub w_rec: Vec<f64>,
    pub bias: Vec<f64>,
}

impl RecurrentCell {
    fn zeros(e: usize, d: usize) -> Self {
        Self {
            w_in: vec![0.0; e * d],
            w_rec: vec![0.0; d * d],
            bias: vec![0.0; d],
        }
    }

    fn random(e: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut fill = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        Self {
            w_in: fill(e * d, e),
            w_rec: fill(d * d, d),
            bias: fill(d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    vocab_size: usize,
    embed_dim: usize,
    hidden_dim: usize,
    /// `V × e`, distinct from the output sense vectors.
    pub embeddings: Vec<f64>,
    pub forward: RecurrentCell,
    /// Right-to-left direction, only used in masked mode.
    pub backward: RecurrentCell,
}

/// Gradients with the same layout as [`EncoderState`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub embeddings: Vec<f64>,
    pub forward: RecurrentCell,
    pub backward: RecurrentCell,
}

impl EncoderGrads {
    pub fn zeros_like(state: &EncoderState) -> Self {
        Self {
            embeddings: vec![0.0; state.embeddings.len()],
            forward: RecurrentCell::zeros(state.embed_dim, state.hidden_dim),
            backward: RecurrentCell::zeros(state.embed_dim, state.hidden_dim),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.embeddings,
            &self.forward.w_in,
            &self.forward.w_rec,
            &self.forward.bias,
            &self.backward.w_in,
            &self.backward.w_rec,
            &self.backward.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.embeddings,
            &mut self.forward.w_in,
            &mut self.forward.w_rec,
            &mut self.forward.bias,
            &mut self.backward.w_in,
            &mut self.backward.w_rec,
            &mut self.backward.bias,
        ]
    }

    pub fn norm_sq(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| *x == 0.0))
    }
}

/// Names of the parameter tensors in [`EncoderState::tensors`] order.
pub const TENSOR_NAMES: [&str; 7] = [
    "embeddings",
    "forward.w_in",
    "forward.w_rec",
    "forward.bias",
    "backward.w_in",
    "backward.w_rec",
    "backward.bias",
];

impl EncoderState {
    /// Uniform init in `±1/√fan_in`; embeddings use fan-in 1 (one-hot lookup).
    pub fn new(vocab_size: usize, embed_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = (0..vocab_size * embed_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let forward = RecurrentCell::random(embed_dim, hidden_dim, &mut rng);
        let backward = RecurrentCell::random(embed_dim, hidden_dim, &mut rng);
        Self {
            vocab_size,
            embed_dim,
            hidden_dim,
            embeddings,
            forward,
            backward,
        }
    }

    pub(crate) fn from_parts(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        embeddings: Vec<f64>,
        forward: RecurrentCell,
        backward: RecurrentCell,
    ) -> Result<Self> {
        let e = embed_dim;
        let d = hidden_dim;
        let ok_cell = |c: &RecurrentCell| {
            c.w_in.len() == e * d && c.w_rec.len() == d * d && c.bias.len() == d
        };
        if embeddings.len() != vocab_size * e || !ok_cell(&forward) || !ok_cell(&backward) {
            return Err(Error::Shape("encoder tensors do not match dimensions".into()));
        }
        Ok(Self {
            vocab_size,
            embed_dim,
            hidden_dim,
            embeddings,
            forward,
            backward,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.embeddings,
            &self.forward.w_in,
            &self.forward.w_rec,
            &self.forward.bias,
            &self.backward.w_in,
            &self.backward.w_rec,
            &self.backward.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.embeddings,
            &mut self.forward.w_in,
            &mut self.forward.w_rec,
            &mut self.forward.bias,
            &mut self.backward.w_in,
            &mut self.backward.w_rec,
            &mut self.backward.bias,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `params -= lr * grads`
    pub fn apply_sgd(&mut self, grads: &EncoderGrads, lr: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            axpy(-lr, g, p);
        }
    }

    fn embedding(&self, id: TokenId) -> &[f64] {
        let e = self.embed_dim;
        &self.embeddings[id as usize * e..(id as usize + 1) * e]
    }

    /// Runs one direction over `tokens`; returns `len × d` hidden states.
    fn run_direction(&self, cell: &RecurrentCell, tokens: &[TokenId], reverse: bool) -> Vec<f64> {
        let d = self.hidden_dim;
        let n = tokens.len();
        let mut states = vec![0.0; n * d];
        let mut pre = vec![0.0; d];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        let mut prev: Option<usize> = None;
        for t in order {
            pre.copy_from_slice(&cell.bias);
            for (i, &x) in self.embedding(tokens[t]).iter().enumerate() {
                axpy(x, &cell.w_in[i * d..(i + 1) * d], &mut pre);
            }
            if let Some(p) = prev {
                for i in 0..d {
                    let h = states[p * d + i];
                    axpy(h, &cell.w_rec[i * d..(i + 1) * d], &mut pre);
                }
            }
            for (s, a) in states[t * d..(t + 1) * d].iter_mut().zip(&pre) {
                *s = a.tanh();
            }
            prev = Some(t);
        }
        states
    }

    /// Encodes a batch. Token ids must be `< V`.
    pub fn encode(&self, batch: &Batch) -> Result<ContextBatch> {
        let seqs: Vec<Vec<TokenId>> = (0..batch.rows).map(|r| batch.encoder_sequence(r)).collect();
        self.encode_sequences(&seqs, batch.mode, batch.len)
    }

    /// Encodes equally long token sequences. `targets_per_row` is the number
    /// of prediction positions per row (`seq_len - 1` in forward mode).
    pub fn encode_sequences(
        &self,
        seqs: &[Vec<TokenId>],
        mode: Mode,
        targets_per_row: usize,
    ) -> Result<ContextBatch> {
        let d = self.hidden_dim;
        let seq_len = seqs.first().map_or(0, Vec::len);
        let expected = match mode {
            Mode::Forward => targets_per_row + 1,
            Mode::Masked => targets_per_row,
        };
        if seq_len != expected {
            return Err(Error::Shape(format!(
                "sequence length {seq_len} does not fit {targets_per_row} targets in {} mode",
                mode.as_str()
            )));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            if s.len() != seq_len {
                return Err(Error::Shape("ragged batch".into()));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::Shape(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
            tokens.extend_from_slice(s);
        }

        let mut fwd_states = Vec::with_capacity(seqs.len() * seq_len * d);
        let mut bwd_states = Vec::new();
        for s in seqs {
            fwd_states.extend(self.run_direction(&self.forward, s, false));
            if mode == Mode::Masked {
                bwd_states.extend(self.run_direction(&self.backward, s, true));
            }
        }
        let reps = match mode {
            Mode::Forward => fwd_states.clone(),
            Mode::Masked => fwd_states
                .iter()
                .zip(&bwd_states)
                .map(|(a, b)| a + b)
                .collect(),
        };
        Ok(ContextBatch {
            mode,
            rows: seqs.len(),
            seq_len,
            targets_per_row,
            dim: d,
            reps,
            cache: Some(Cache {
                tokens,
                fwd_states,
                bwd_states,
            }),
        })
    }

    /// One contextual representation per token of a sentence: in forward mode
    /// the state after reading the token (with a leading BOS), in masked mode
    /// the bidirectional state over the unmasked sentence.
    pub fn token_reps(&self, ids: &[TokenId], mode: Mode) -> Result<Vec<Vec<f64>>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.hidden_dim;
        let (seq, offset) = match mode {
            Mode::Forward => {
                let mut s = vec![BOS];
                s.extend_from_slice(ids);
                (s, 1)
            }
            Mode::Masked => (ids.to_vec(), 0),
        };
        let targets = match mode {
            Mode::Forward => seq.len() - 1,
            Mode::Masked => seq.len(),
        };
        let ctx = self.encode_sequences(&[seq], mode, targets)?;
        Ok((0..ids.len())
            .map(|k| ctx.reps[(k + offset) * d..(k + offset + 1) * d].to_vec())
            .collect())
    }

    /// Reverse-mode gradients of `Σ grad_pred · prediction_reps`.
    ///
    /// `grad_pred` is `rows × targets_per_row × d`, aligned with
    /// [`ContextBatch::prediction_rep`].
    pub fn backward(&self, ctx: &ContextBatch, grad_pred: &[f64]) -> Result<EncoderGrads> {
        let cache = ctx
            .cache
            .as_ref()
            .ok_or_else(|| Error::Invariant("context batch has no activation cache".into()))?;
        let d = self.hidden_dim;
        let e = self.embed_dim;
        let n = ctx.seq_len;
        if grad_pred.len() != ctx.rows * ctx.targets_per_row * d {
            return Err(Error::Shape(format!(
                "gradient has {} values, expected {}",
                grad_pred.len(),
                ctx.rows * ctx.targets_per_row * d
            )));
        }
        let mut grads = EncoderGrads::zeros_like(self);
        let mut grad_reps = vec![0.0; n * d];
        let mut dh = vec![0.0; d];
        let mut da = vec![0.0; d];

        for r in 0..ctx.rows {
            // gradient w.r.t. the per-position output reps of this row
            grad_reps.iter_mut().for_each(|g| *g = 0.0);
            let src = &grad_pred[r * ctx.targets_per_row * d..(r + 1) * ctx.targets_per_row * d];
            grad_reps[..src.len()].copy_from_slice(src);

            let tokens = &cache.tokens[r * n..(r + 1) * n];
            let fwd = &cache.fwd_states[r * n * d..(r + 1) * n * d];
            dh.iter_mut().for_each(|x| *x = 0.0);
            for t in (0..n).rev() {
                let prev = if t > 0 { Some(&fwd[(t - 1) * d..t * d]) } else { None };
                self.step_backward(
                    &self.forward,
                    &mut grads.embeddings,
                    &mut grads.forward,
                    tokens[t],
                    &fwd[t * d..(t + 1) * d],
                    prev,
                    &grad_reps[t * d..(t + 1) * d],
                    &mut dh,
                    &mut da,
                    e,
                );
            }

            if ctx.mode == Mode::Masked {
                let bwd = &cache.bwd_states[r * n * d..(r + 1) * n * d];
                dh.iter_mut().for_each(|x| *x = 0.0);
                for t in 0..n {
                    let prev = if t + 1 < n {
                        Some(&bwd[(t + 1) * d..(t + 2) * d])
                    } else {
                        None
                    };
                    self.step_backward(
                        &self.backward,
                        &mut grads.embeddings,
                        &mut grads.backward,
                        tokens[t],
                        &bwd[t * d..(t + 1) * d],
                        prev,
                        &grad_reps[t * d..(t + 1) * d],
                        &mut dh,
                        &mut da,
                        e,
                    );
                }
            }
        }
        Ok(grads)
    }

    /// Backpropagates through one recurrent step. `dh` carries the gradient
    /// arriving from the later step in and the gradient for `prev` out.
    #[allow(clippy::too_many_arguments)]
    fn step_backward(
        &self,
        cell: &RecurrentCell,
        grad_emb: &mut [f64],
        grad_cell: &mut RecurrentCell,
        token: TokenId,
        state: &[f64],
        prev: Option<&[f64]>,
        grad_out: &[f64],
        dh: &mut [f64],
        da: &mut [f64],
        e: usize,
    ) {
        let d = self.hidden_dim;
        for i in 0..d {
            let g = dh[i] + grad_out[i];
            da[i] = g * (1.0 - state[i] * state[i]);
        }
        axpy(1.0, da, &mut grad_cell.bias);
        let x = self.embedding(token);
        let ge = &mut grad_emb[token as usize * e..(token as usize + 1) * e];
        for i in 0..e {
            axpy(x[i], da, &mut grad_cell.w_in[i * d..(i + 1) * d]);
            ge[i] += crate::linalg::dot(&cell.w_in[i * d..(i + 1) * d], da);
        }
        match prev {
            Some(p) => {
                for i in 0..d {
                    axpy(p[i], da, &mut grad_cell.w_rec[i * d..(i + 1) * d]);
                    dh[i] = crate::linalg::dot(&cell.w_rec[i * d..(i + 1) * d], da);
                }
            }
            None => dh.iter_mut().for_each(|x| *x = 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Cache {
    tokens: Vec<TokenId>,
    fwd_states: Vec<f64>,
    bwd_states: Vec<f64>,
}

/// Encoder output for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    pub mode: Mode,
    pub rows: usize,
    /// Encoder positions per row.
    pub seq_len: usize,
    pub targets_per_row: usize,
    pub dim: usize,
    /// `rows × seq_len × d` final contextual representations.
    pub reps: Vec<f64>,
    cache: Option<Cache>,
}

impl ContextBatch {
    pub fn rep(&self, row: usize, pos: usize) -> &[f64] {
        let base = (row * self.seq_len + pos) * self.dim;
        &self.reps[base..base + self.dim]
    }

    /// Representation fed to the softmax for target `k` of `row`.
    pub fn prediction_rep(&self, row: usize, k: usize) -> &[f64] {
        self.rep(row, k)
    }

    /// Representation of the target token itself, used for sense selection.
    pub fn selection_rep(&self, row: usize, k: usize) -> &[f64] {
        match self.mode {
            Mode::Forward => self.rep(row, k + 1),
            Mode::Masked => self.rep(row, k),
        }
    }

    pub fn discard_cache(&mut self) {
        self.cache = None;
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_grad(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn objective(state: &EncoderState, batch: &Batch, g: &[f64]) -> f64 {
        let ctx = state.encode(batch).unwrap();
        let mut total = 0.0;
        for r in 0..ctx.rows {
            for k in 0..ctx.targets_per_row {
                let gr = &g[(r * ctx.targets_per_row + k) * ctx.dim..][..ctx.dim];
                total += crate::linalg::dot(ctx.prediction_rep(r, k), gr);
            }
        }
        total
    }

    fn check_gradients(mode: Mode) {
        let state = EncoderState::new(9, 4, 5, 3);
        let batch = Batch {
            mode,
            rows: 2,
            len: 3,
            inputs: vec![1, 4, 5, 6, 7, 8],
            targets: vec![4, 5, 6, 7, 8, 4],
            target_mask: vec![true; 6],
        };
        let g = random_grad(2 * 3 * 5, 17);
        let ctx = state.encode(&batch).unwrap();
        let grads = state.backward(&ctx, &g).unwrap();
        let eps = 1e-5;
        for (ti, name) in TENSOR_NAMES.iter().enumerate() {
            let analytic = grads.tensors()[ti];
            for idx in 0..analytic.len() {
                let mut plus = state.clone();
                plus.tensors_mut()[ti][idx] += eps;
                let mut minus = state.clone();
                minus.tensors_mut()[ti][idx] -= eps;
                let fd = (objective(&plus, &batch, &g) - objective(&minus, &batch, &g)) / (2.0 * eps);
                let a = analytic[idx];
                let denom = a.abs().max(fd.abs()).max(1e-7);
                assert!(
                    (a - fd).abs() / denom <= 1e-5 || (a - fd).abs() < 1e-10,
                    "{name}[{idx}] analytic {a} fd {fd} ({mode:?})"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_forward() {
        check_gradients(Mode::Forward);
    }

    #[test]
    fn gradients_match_finite_differences_masked() {
        check_gradients(Mode::Masked);
    }

    #[test]
    fn zero_upstream_gradient() {
        let state = EncoderState::new(8, 3, 4, 0);
        let batch = Batch::from_sentence(&[4, 5, 6], Mode::Forward);
        let ctx = state.encode(&batch).unwrap();
        let grads = state.backward(&ctx, &vec![0.0; 3 * 4]).unwrap();
        assert!(grads.is_zero());
    }

    #[test]
    fn missing_cache_is_an_error() {
        let state = EncoderState::new(8, 3, 4, 0);
        let batch = Batch::from_sentence(&[4, 5], Mode::Forward);
        let mut ctx = state.encode(&batch).unwrap();
        ctx.discard_cache();
        assert!(state.backward(&ctx, &vec![0.0; 2 * 4]).is_err());
    }

    #[test]
    fn single_token_uses_bos_state() {
        let state = EncoderState::new(8, 3, 4, 1);
        let ctx = state.encode(&Batch::from_sentence(&[5], Mode::Forward)).unwrap();
        let bos_only = state.encode_sequences(&[vec![BOS]], Mode::Forward, 0).unwrap();
        assert_eq!(ctx.prediction_rep(0, 0), bos_only.rep(0, 0));
        assert_eq!(ctx.selection_rep(0, 0), ctx.rep(0, 1));
    }

    #[test]
    fn identical_rows_identical_reps() {
        let state = EncoderState::new(10, 3, 4, 2);
        let seq = vec![1, 4, 5, 6];
        let ctx = state
            .encode_sequences(&[seq.clone(), seq], Mode::Masked, 4)
            .unwrap();
        for k in 0..4 {
            assert_eq!(ctx.rep(0, k), ctx.rep(1, k));
        }
    }

    #[test]
    fn forward_mode_is_causal() {
        let state = EncoderState::new(12, 4, 6, 5);
        let a: Vec<TokenId> = vec![1, 4, 5, 6, 7, 8, 9, 10];
        let mut b = a.clone();
        b[5] = 11;
        let ca = state.encode_sequences(&[a], Mode::Forward, 7).unwrap();
        let cb = state.encode_sequences(&[b], Mode::Forward, 7).unwrap();
        for k in 0..5 {
            assert_eq!(ca.rep(0, k), cb.rep(0, k));
        }
        assert_ne!(ca.rep(0, 5), cb.rep(0, 5));
    }

    #[test]
    fn future_tokens_get_no_gradient_in_forward_mode() {
        let state = EncoderState::new(12, 3, 4, 6);
        // token 9 only appears after the position whose loss is active
        let seq: Vec<TokenId> = vec![1, 4, 5, 9];
        let ctx = state.encode_sequences(&[seq], Mode::Forward, 3).unwrap();
        let mut g = vec![0.0; 3 * 4];
        g[4..8].copy_from_slice(&[1.0, -0.5, 0.3, 0.2]); // position 1 only
        let grads = state.backward(&ctx, &g).unwrap();
        assert!(grads.embeddings[9 * 3..10 * 3].iter().all(|x| *x == 0.0));
        assert!(grads.embeddings[5 * 3..6 * 3].iter().all(|x| *x == 0.0));
        assert!(grads.embeddings[4 * 3..5 * 3].iter().any(|x| *x != 0.0));
        assert!(grads.backward.w_in.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        let state = EncoderState::new(6, 2, 3, 0);
        assert!(state.encode_sequences(&[vec![1, 6]], Mode::Forward, 1).is_err());
    }
}
