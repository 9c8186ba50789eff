//! Per-token sense vectors, online sense clustering and the shared
//! dimension-reduction projection.
//!
//! Cluster centers are not trainable parameters: they move only through the
//! exponential-average update applied to the winning sense on selection.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::linalg::{cosine, pca_components, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SenseStore {
    pub(crate) vocab_size: usize,
    pub(crate) num_senses: usize,
    pub(crate) dim: usize,
    /// Sense learning rate for the center update.
    pub(crate) alpha: f64,
    /// `V × S × d`, trained by gradient.
    pub(crate) sense_vectors: Vec<f64>,
    /// `V × S × d`, updated only by selection.
    pub(crate) centers: Vec<f64>,
    /// `V × S`
    pub(crate) active: Vec<bool>,
    /// `V × S` selections since the last pruning check.
    pub(crate) counts: Vec<u64>,
    /// Flat `(i * S + s)` indices of active senses, ascending.
    active_list: Vec<u32>,
}

impl SenseStore {
    /// Centers are drawn from `N(0, σ²)`, sense vectors from `N(0, 1/d)`.
    pub fn new(
        vocab_size: usize,
        num_senses: usize,
        dim: usize,
        center_std: f64,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_senses < 1 || dim < 1 {
            return Err(Error::Config("senses and dimension must be >= 1".into()));
        }
        if !(center_std >= 0.0) || !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "invalid center std {center_std} or sense learning rate {alpha}"
            )));
        }
        let n = vocab_size * num_senses * dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center_dist = Normal::new(0.0, center_std).expect("finite std");
        let centers: Vec<f64> = (0..n).map(|_| center_dist.sample(&mut rng)).collect();
        let vec_dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("finite std");
        let sense_vectors: Vec<f64> = (0..n).map(|_| vec_dist.sample(&mut rng)).collect();
        let mut store = Self {
            vocab_size,
            num_senses,
            dim,
            alpha,
            sense_vectors,
            centers,
            active: vec![true; vocab_size * num_senses],
            counts: vec![0; vocab_size * num_senses],
            active_list: Vec::new(),
        };
        store.rebuild_active_list();
        Ok(store)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        vocab_size: usize,
        num_senses: usize,
        dim: usize,
        alpha: f64,
        sense_vectors: Vec<f64>,
        centers: Vec<f64>,
        active: Vec<bool>,
        counts: Vec<u64>,
    ) -> Result<Self> {
        let n = vocab_size * num_senses;
        if sense_vectors.len() != n * dim
            || centers.len() != n * dim
            || active.len() != n
            || counts.len() != n
        {
            return Err(Error::Shape("sense store tensors do not match dimensions".into()));
        }
        let mut store = Self {
            vocab_size,
            num_senses,
            dim,
            alpha,
            sense_vectors,
            centers,
            active,
            counts,
            active_list: Vec::new(),
        };
        store.rebuild_active_list();
        store.check_invariants()?;
        Ok(store)
    }

    fn rebuild_active_list(&mut self) {
        self.active_list = self
            .active
            .iter()
            .enumerate()
            .filter(|(_, a)| **a)
            .map(|(i, _)| i as u32)
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_senses(&self) -> usize {
        self.num_senses
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    #[inline]
    fn slot(&self, token: TokenId, sense: usize) -> usize {
        token as usize * self.num_senses + sense
    }

    pub fn sense_vector(&self, token: TokenId, sense: usize) -> &[f64] {
        let i = self.slot(token, sense) * self.dim;
        &self.sense_vectors[i..i + self.dim]
    }

    pub fn sense_vector_mut(&mut self, token: TokenId, sense: usize) -> &mut [f64] {
        let i = self.slot(token, sense) * self.dim;
        &mut self.sense_vectors[i..i + self.dim]
    }

    /// All sense vectors, `V × S × d`.
    pub fn sense_vectors(&self) -> &[f64] {
        &self.sense_vectors
    }

    pub fn sense_vectors_mut(&mut self) -> &mut [f64] {
        &mut self.sense_vectors
    }

    /// Sense vectors at flat slot `i * S + s`.
    #[inline]
    pub fn slot_vector(&self, slot: u32) -> &[f64] {
        let i = slot as usize * self.dim;
        &self.sense_vectors[i..i + self.dim]
    }

    pub fn center(&self, token: TokenId, sense: usize) -> &[f64] {
        let i = self.slot(token, sense) * self.dim;
        &self.centers[i..i + self.dim]
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn is_active(&self, token: TokenId, sense: usize) -> bool {
        self.active[self.slot(token, sense)]
    }

    /// Active `(i * S + s)` slots in ascending order.
    pub fn active_slots(&self) -> &[u32] {
        &self.active_list
    }

    pub fn active_senses(&self, token: TokenId) -> Vec<usize> {
        (0..self.num_senses)
            .filter(|&s| self.is_active(token, s))
            .collect()
    }

    pub fn active_count(&self) -> usize {
        self.active_list.len()
    }

    pub fn count(&self, token: TokenId, sense: usize) -> u64 {
        self.counts[self.slot(token, sense)]
    }

    /// Relative selection frequency of each sense of `token`; `None` when
    /// the token has not been selected since the last reset.
    pub fn relative_frequencies(&self, token: TokenId) -> Option<Vec<f64>> {
        let base = self.slot(token, 0);
        let counts = &self.counts[base..base + self.num_senses];
        let total: u64 = counts.iter().sum();
        (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn set_active(&mut self, token: TokenId, sense: usize, on: bool) {
        let i = self.slot(token, sense);
        self.active[i] = on;
        self.rebuild_active_list();
    }

    fn set_mask_all(&mut self, mask: impl Fn(usize) -> bool) {
        for t in 0..self.vocab_size {
            for s in 0..self.num_senses {
                self.active[t * self.num_senses + s] = mask(s);
            }
        }
        self.rebuild_active_list();
    }

    pub fn reset_counts(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    /// Restricts every token to sense 0 (warm-up phase).
    pub fn enter_warmup(&mut self) {
        self.set_mask_all(|s| s == 0);
    }

    /// Leaves the warm-up phase and resets the selection counters.
    pub fn apply_warmup_transition(&mut self, policy: WarmupPolicy) -> Result<()> {
        match policy {
            WarmupPolicy::KeepWarmupSense => self.set_mask_all(|_| true),
            WarmupPolicy::DiscardWarmupSense => {
                if self.num_senses < 2 {
                    return Err(Error::Config(
                        "discarding the warm-up sense requires at least 2 senses".into(),
                    ));
                }
                self.set_mask_all(|s| s != 0);
            }
        }
        self.reset_counts();
        Ok(())
    }

    /// Verifies that every token keeps at least one active sense.
    pub fn check_invariants(&self) -> Result<()> {
        for t in 0..self.vocab_size {
            let base = t * self.num_senses;
            if !self.active[base..base + self.num_senses].iter().any(|a| *a) {
                return Err(Error::Invariant(format!("token {t} has no active sense")));
            }
        }
        Ok(())
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.vocab_size {
            return Err(Error::Shape(format!("token {token} outside sense store")));
        }
        Ok(())
    }

    /// Best active sense of `token` for contextual representation `h`
    /// without updating anything. Ties go to the lowest sense index.
    pub fn nearest_sense(&self, proj: &ProjectionState, token: TokenId, h: &[f64]) -> Result<usize> {
        self.check_token(token)?;
        let hp = proj.project(h);
        let mut best: Option<(usize, f64)> = None;
        let mut cp = vec![0.0; proj.proj_dim()];
        for s in 0..self.num_senses {
            if !self.is_active(token, s) {
                continue;
            }
            proj.project_into(self.center(token, s), &mut cp);
            let sim = cosine(&cp, &hp);
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((s, sim));
            }
        }
        best.map(|(s, _)| s)
            .ok_or_else(|| Error::Invariant(format!("token {token} has no active sense")))
    }

    /// Selects the sense of `token` whose projected center is most
    /// cosine-similar to the projected `h`, moves that center towards `h`,
    /// counts the selection and offers `h` to the projection queue.
    ///
    /// `h` must be the representation of the token itself, not the one used
    /// to predict it.
    pub fn select_sense(
        &mut self,
        proj: &mut ProjectionState,
        token: TokenId,
        h: &[f64],
    ) -> Result<usize> {
        let s = self.nearest_sense(proj, token, h)?;
        let slot = self.slot(token, s);
        let alpha = self.alpha;
        let c = &mut self.centers[slot * self.dim..(slot + 1) * self.dim];
        for (ci, hi) in c.iter_mut().zip(h) {
            *ci = (1.0 - alpha) * *ci + alpha * hi;
        }
        self.counts[slot] += 1;
        proj.offer(h)?;
        Ok(s)
    }

    /// Best `(translation, sense)` among all active senses of `translations`.
    /// Centers are left unchanged. Ties go to the lowest token id, then the
    /// lowest sense.
    pub fn select_translation_sense(
        &self,
        proj: &ProjectionState,
        translations: &[TokenId],
        h: &[f64],
    ) -> Result<(TokenId, usize)> {
        if translations.is_empty() {
            return Err(Error::Invariant("no translations to select from".into()));
        }
        let mut sorted = translations.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let hp = proj.project(h);
        let mut cp = vec![0.0; proj.proj_dim()];
        let mut best: Option<(TokenId, usize, f64)> = None;
        for &j in &sorted {
            self.check_token(j)?;
            for s in 0..self.num_senses {
                if !self.is_active(j, s) {
                    continue;
                }
                proj.project_into(self.center(j, s), &mut cp);
                let sim = cosine(&cp, &hp);
                if best.is_none_or(|(_, _, b)| sim > b) {
                    best = Some((j, s, sim));
                }
            }
        }
        best.map(|(j, s, _)| (j, s))
            .ok_or_else(|| Error::Invariant("translations have no active sense".into()))
    }

    /// Deactivates senses whose relative selection frequency is below
    /// `beta`, never touching the most frequent sense of a token. Counters
    /// are reset afterwards. Returns the deactivated `(token, sense)` pairs.
    pub fn prune_senses(&mut self, beta: f64) -> Result<Vec<(TokenId, usize)>> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!(
                "pruning threshold must be in [0, 1), got {beta}"
            )));
        }
        let mut removed = Vec::new();
        for t in 0..self.vocab_size {
            let base = t * self.num_senses;
            let counts = &self.counts[base..base + self.num_senses];
            let total: u64 = counts.iter().sum();
            if total == 0 {
                continue;
            }
            let mut top = 0;
            for s in 1..self.num_senses {
                if counts[s] > counts[top] {
                    top = s;
                }
            }
            for s in 0..self.num_senses {
                let rho = counts[s] as f64 / total as f64;
                if s != top && self.active[base + s] && rho < beta {
                    self.active[base + s] = false;
                    removed.push((t as TokenId, s));
                }
            }
        }
        self.reset_counts();
        if !removed.is_empty() {
            self.rebuild_active_list();
        }
        Ok(removed)
    }
}

/// How the warm-up phase ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmupPolicy {
    /// All senses become selectable, the warm-up sense included.
    KeepWarmupSense,
    /// The warm-up sense is disabled and the remaining senses enabled.
    DiscardWarmupSense,
}

impl WarmupPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            WarmupPolicy::KeepWarmupSense => "keep_warmup_sense",
            WarmupPolicy::DiscardWarmupSense => "discard_warmup_sense",
        }
    }
}

impl std::str::FromStr for WarmupPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep_warmup_sense" | "keep" => Ok(WarmupPolicy::KeepWarmupSense),
            "discard_warmup_sense" | "discard" => Ok(WarmupPolicy::DiscardWarmupSense),
            other => Err(Error::Config(format!("unknown warm-up policy '{other}'"))),
        }
    }
}

/// Shared `d × d'` projection refreshed from a queue of recent representations.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionState {
    pub(crate) p: DenseMatrix,
    pub(crate) queue: VecDeque<Vec<f64>>,
    /// Offers since the last refresh.
    pub(crate) since_refresh: u64,
    pub(crate) interval: u64,
    pub(crate) capacity: usize,
    /// Only every `stride`-th offer is enqueued.
    pub(crate) stride: u64,
    pub(crate) offers_seen: u64,
    pub(crate) refreshes: u64,
}

impl ProjectionState {
    /// `P` starts as i.i.d. `N(0, 1)` entries.
    pub fn new(
        dim: usize,
        proj_dim: usize,
        interval: u64,
        capacity: usize,
        stride: u64,
        seed: u64,
    ) -> Result<Self> {
        if proj_dim < 1 || proj_dim > dim {
            return Err(Error::Config(format!(
                "projection width {proj_dim} must be in 1..={dim}"
            )));
        }
        if interval < 1 || capacity < 1 || stride < 1 {
            return Err(Error::Config(
                "projection interval, queue size and stride must be >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..dim * proj_dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            p: DenseMatrix::from_vec(dim, proj_dim, data)?,
            queue: VecDeque::with_capacity(capacity.min(1 << 16)),
            since_refresh: 0,
            interval,
            capacity,
            stride,
            offers_seen: 0,
            refreshes: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }

    pub fn proj_dim(&self) -> usize {
        self.p.cols()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.p
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn queue(&self) -> impl Iterator<Item = &[f64]> {
        self.queue.iter().map(Vec::as_slice)
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.proj_dim()];
        self.project_into(v, &mut out);
        out
    }

    #[inline]
    pub fn project_into(&self, v: &[f64], out: &mut [f64]) {
        self.p.left_mul(v, out);
    }

    /// Enqueues `h` (subject to the stride) and refreshes `P` every
    /// `interval` enqueued vectors. Returns whether a refresh happened.
    pub fn offer(&mut self, h: &[f64]) -> Result<bool> {
        if h.len() != self.dim() {
            return Err(Error::Shape(format!(
                "offered vector has {} values, expected {}",
                h.len(),
                self.dim()
            )));
        }
        self.offers_seen += 1;
        if self.offers_seen % self.stride != 0 {
            return Ok(false);
        }
        self.since_refresh += 1;
        if self.queue.len() == self.capacity {
            self.queue.pop_front();
        }
        self.queue.push_back(h.to_vec());
        if self.since_refresh >= self.interval {
            return self.refresh_projection();
        }
        Ok(false)
    }

    /// Replaces `P` with the leading principal components of the queue.
    /// Deferred (returns false) while the queue holds fewer than `d'` vectors.
    pub fn refresh_projection(&mut self) -> Result<bool> {
        if self.queue.len() < self.proj_dim() {
            return Ok(false);
        }
        let rows: Vec<&[f64]> = self.queue.iter().map(Vec::as_slice).collect();
        let samples = DenseMatrix::from_rows(&rows)?;
        let pca = pca_components(&samples, self.proj_dim())?;
        self.p = pca.components;
        self.since_refresh = 0;
        self.refreshes += 1;
        Ok(true)
    }
}
