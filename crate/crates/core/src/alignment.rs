//! Per-token anchor embeddings and the post-hoc linear map between languages.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::corpus::{BilingualDictionary, Mode, TokenId, TokenSequence, Vocabulary, NUM_RESERVED};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::linalg::{least_squares, orthogonal_procrustes, pair_residual, DenseMatrix};

/// Sum and count of the contextual representations of each token.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTable {
    dim: usize,
    entries: BTreeMap<TokenId, (Vec<f64>, u64)>,
}

impl AnchorTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, token: TokenId, rep: &[f64]) -> Result<()> {
        if rep.len() != self.dim {
            return Err(Error::Shape(format!(
                "representation has {} values, anchors have {}",
                rep.len(),
                self.dim
            )));
        }
        let (sum, count) = self
            .entries
            .entry(token)
            .or_insert_with(|| (vec![0.0; rep.len()], 0));
        for (s, r) in sum.iter_mut().zip(rep) {
            *s += r;
        }
        *count += 1;
        Ok(())
    }

    /// Inserts a finished anchor (as read from an anchor file).
    pub fn insert_anchor(&mut self, token: TokenId, anchor: &[f64], count: u64) -> Result<()> {
        if anchor.len() != self.dim || count == 0 {
            return Err(Error::Shape("anchor width or count is invalid".into()));
        }
        let sum = anchor.iter().map(|a| a * count as f64).collect();
        self.entries.insert(token, (sum, count));
        Ok(())
    }

    pub fn count(&self, token: TokenId) -> u64 {
        self.entries.get(&token).map_or(0, |e| e.1)
    }

    /// Mean representation; `None` for tokens never seen.
    pub fn anchor(&self, token: TokenId) -> Option<Vec<f64>> {
        self.entries
            .get(&token)
            .map(|(sum, n)| sum.iter().map(|s| s / *n as f64).collect())
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.keys().copied()
    }

    /// Anchor table restricted to `keep`.
    pub fn filtered(&self, keep: impl Fn(TokenId) -> bool) -> Self {
        Self {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .filter(|(t, _)| keep(**t))
                .map(|(t, e)| (*t, e.clone()))
                .collect(),
        }
    }

    /// Applies `W` to every anchor.
    pub fn projected(&self, w: &DenseMatrix) -> Result<Self> {
        check_map(w, self.dim)?;
        Ok(Self {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|(t, (sum, n))| (*t, (w.mul_vec(sum), *n)))
                .collect(),
        })
    }

    /// `token<TAB>count<TAB>values`, one line per anchor, for tokens of `lang`.
    pub fn to_text(&self, vocab: &Vocabulary, lang: Option<&str>) -> String {
        let mut out = String::new();
        for token in self.tokens() {
            let (name, l) = vocab.decode(token);
            if lang.is_some_and(|want| want != l) {
                continue;
            }
            let anchor = self.anchor(token).expect("listed token has an anchor");
            let _ = write!(out, "{name}\t{}", self.count(token));
            for v in anchor {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, vocab: &Vocabulary, lang: &str) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Shape(format!("anchor line {}: malformed", i + 1));
            let mut fields = line.split('\t');
            let token = fields.next().ok_or_else(bad)?;
            let count: u64 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let values = fields
                .map(|f| f.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let id = vocab.id(token, lang).ok_or_else(|| {
                Error::Shape(format!("anchor line {}: '{token}' not in vocabulary", i + 1))
            })?;
            let t = table.get_or_insert_with(|| Self::new(values.len()));
            t.insert_anchor(id, &values, count)?;
        }
        table.ok_or_else(|| Error::Shape("anchor file is empty".into()))
    }
}

/// Anchors of every non-reserved token over `corpus`, using final-layer
/// representations of the unmasked sentences.
pub fn compute_anchors_with(
    encoder: &EncoderState,
    mode: Mode,
    corpus: &[TokenSequence],
) -> Result<AnchorTable> {
    let mut table = AnchorTable::new(encoder.hidden_dim());
    for sentence in corpus {
        let reps = encoder.token_reps(&sentence.ids, mode)?;
        for (&id, rep) in sentence.ids.iter().zip(&reps) {
            if id as usize >= NUM_RESERVED {
                table.add(id, rep)?;
            }
        }
    }
    Ok(table)
}

pub fn compute_anchors(checkpoint: &Checkpoint, corpus: &[TokenSequence]) -> Result<AnchorTable> {
    compute_anchors_with(&checkpoint.encoder, checkpoint.config.mode, corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    #[default]
    LeastSquares,
    Orthogonal,
}

impl Solver {
    pub fn as_str(self) -> &'static str {
        match self {
            Solver::LeastSquares => "least_squares",
            Solver::Orthogonal => "orthogonal",
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least_squares" | "lstsq" => Ok(Solver::LeastSquares),
            "orthogonal" | "procrustes" => Ok(Solver::Orthogonal),
            other => Err(Error::Config(format!(
                "unknown solver '{other}' (expected least_squares or orthogonal)"
            ))),
        }
    }
}

/// Anchor rows paired through a dictionary.
#[derive(Debug, Clone)]
pub struct AnchorPairs {
    pub source: DenseMatrix,
    pub target: DenseMatrix,
    pub pairs: Vec<(TokenId, TokenId)>,
    /// Dictionary pairs with at least one anchor missing.
    pub skipped: usize,
}

pub fn anchor_pairs(
    source: &AnchorTable,
    target: &AnchorTable,
    dictionary: &BilingualDictionary,
) -> Result<AnchorPairs> {
    if source.dim() != target.dim() {
        return Err(Error::Shape("anchor tables differ in width".into()));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for &(s, t) in dictionary.pairs() {
        match (source.anchor(s), target.anchor(t)) {
            (Some(x), Some(y)) => {
                a.push(x);
                b.push(y);
                pairs.push((s, t));
            }
            _ => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::Shape(format!(
            "no dictionary pair has both anchors ({skipped} skipped)"
        )));
    }
    Ok(AnchorPairs {
        source: DenseMatrix::from_rows(&a)?,
        target: DenseMatrix::from_rows(&b)?,
        pairs,
        skipped,
    })
}

/// Fitted map with its residuals `Σ‖W a − b‖²` before (identity) and after.
#[derive(Debug, Clone)]
pub struct ProjectionFit {
    pub w: DenseMatrix,
    pub solver: Solver,
    pub ridge: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
    pub residual_before: f64,
    pub residual_after: f64,
    /// Orthogonal solver only: the solution is not unique.
    pub degenerate: bool,
}

/// Default ridge for `n` pairs.
pub fn default_ridge(n: usize) -> f64 {
    1e-6 * n as f64
}

/// Fits `W` on the rows of `pairs`. `ridge = None` uses [`default_ridge`];
/// it is ignored by the orthogonal solver.
pub fn fit_pairs(pairs: &AnchorPairs, solver: Solver, ridge: Option<f64>) -> Result<ProjectionFit> {
    let (a, b) = (&pairs.source, &pairs.target);
    let (n, d) = (a.rows(), a.cols());
    let ridge = ridge.unwrap_or_else(|| default_ridge(n));
    let (w, degenerate) = match solver {
        Solver::LeastSquares => {
            if n < d && ridge == 0.0 {
                return Err(Error::Singular(format!(
                    "{n} usable pairs for dimension {d}; least squares needs a positive ridge"
                )));
            }
            (least_squares(a, b, ridge)?, false)
        }
        Solver::Orthogonal => {
            let p = orthogonal_procrustes(a, b)?;
            (p.w, p.degenerate)
        }
    };
    Ok(ProjectionFit {
        residual_before: pair_residual(&DenseMatrix::identity(d), a, b),
        residual_after: pair_residual(&w, a, b),
        w,
        solver,
        ridge: if solver == Solver::LeastSquares { ridge } else { 0.0 },
        pairs_used: n,
        pairs_skipped: pairs.skipped,
        degenerate,
    })
}

pub fn fit_projection(
    source: &AnchorTable,
    target: &AnchorTable,
    dictionary: &BilingualDictionary,
    solver: Solver,
    ridge: Option<f64>,
) -> Result<ProjectionFit> {
    let pairs = anchor_pairs(source, target, dictionary)?;
    if pairs.skipped > 0 {
        log::warn!("{} dictionary pairs skipped for missing anchors", pairs.skipped);
    }
    fit_pairs(&pairs, solver, ridge)
}

fn check_map(w: &DenseMatrix, d: usize) -> Result<()> {
    if w.rows() != d || w.cols() != d {
        return Err(Error::Shape(format!(
            "map is {}x{}, representations have width {d}",
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// `W · rep` for every representation.
pub fn project(reps: &[Vec<f64>], w: &DenseMatrix) -> Result<Vec<Vec<f64>>> {
    reps.iter()
        .map(|r| {
            check_map(w, r.len())?;
            Ok(w.mul_vec(r))
        })
        .collect()
}

/// `d` lines of `d` tab-separated values.
pub fn matrix_to_text(w: &DenseMatrix) -> String {
    let mut out = String::new();
    for r in 0..w.rows() {
        let line: Vec<String> = w.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
    out
}

pub fn matrix_from_text(text: &str) -> Result<DenseMatrix> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Shape(format!("matrix line {}: bad value '{v}'", i + 1)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let m = DenseMatrix::from_rows(&rows)?;
    if m.rows() != m.cols() {
        return Err(Error::Shape(format!("map must be square, got {}x{}", m.rows(), m.cols())));
    }
    Ok(m)
}

pub fn save_matrix(path: &Path, w: &DenseMatrix) -> Result<()> {
    fs::write(path, matrix_to_text(w)).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    matrix_from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
