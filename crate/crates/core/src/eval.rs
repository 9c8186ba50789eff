//! Evaluation: nearest-anchor WSD, anchor separation, translation retrieval
//! and 2-D sense-vector export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::alignment::AnchorTable;
use crate::corpus::{Mode, TokenId, TokenSequence, Vocabulary};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::linalg::{cosine, pca_components, DenseMatrix};
use crate::senses::SenseStore;

/// Gold sense tag of one token occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SenseLabel {
    pub sentence: usize,
    pub position: usize,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SenseLabeledCorpus {
    pub sentences: Vec<TokenSequence>,
    pub labels: Vec<SenseLabel>,
}

impl SenseLabeledCorpus {
    pub fn token_at(&self, label: &SenseLabel) -> Option<TokenId> {
        self.sentences
            .get(label.sentence)
            .and_then(|s| s.ids.get(label.position))
            .copied()
    }

    /// Labeled tokens with their distinct tags.
    pub fn target_tags(&self) -> BTreeMap<TokenId, BTreeSet<String>> {
        let mut out: BTreeMap<TokenId, BTreeSet<String>> = BTreeMap::new();
        for l in &self.labels {
            if let Some(t) = self.token_at(l) {
                out.entry(t).or_default().insert(l.tag.clone());
            }
        }
        out
    }

    /// Every label points at a token, and (with `require_ambiguity`) every
    /// labeled token carries at least two tags.
    pub fn validate(&self, require_ambiguity: bool) -> Result<()> {
        for l in &self.labels {
            if self.token_at(l).is_none() {
                return Err(Error::Eval(format!(
                    "label at sentence {} position {} is out of range",
                    l.sentence, l.position
                )));
            }
        }
        if require_ambiguity {
            if let Some((t, _)) = self.target_tags().iter().find(|(_, tags)| tags.len() < 2) {
                return Err(Error::Eval(format!("target token {t} has a single sense tag")));
            }
        }
        Ok(())
    }

    /// One sentence per line: tokens, a TAB, then `position=tag` entries.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut by_sentence: BTreeMap<usize, Vec<&SenseLabel>> = BTreeMap::new();
        for l in &self.labels {
            by_sentence.entry(l.sentence).or_default().push(l);
        }
        let mut out = String::new();
        for (i, s) in self.sentences.iter().enumerate() {
            let words: Vec<&str> = s.ids.iter().map(|&id| vocab.decode(id).0).collect();
            out.push_str(&words.join(" "));
            out.push('\t');
            let tags: Vec<String> = by_sentence
                .get(&i)
                .into_iter()
                .flatten()
                .map(|l| format!("{}={}", l.position, l.tag))
                .collect();
            out.push_str(&tags.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, vocab: &Vocabulary, lang: &str) -> Result<Self> {
        let mut corpus = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (words, tags) = line.split_once('\t').unwrap_or((line, ""));
            let tokens: Vec<String> = words.split_whitespace().map(str::to_lowercase).collect();
            let sentence = corpus.sentences.len();
            for entry in tags.split_whitespace() {
                let (pos, tag) = entry
                    .split_once('=')
                    .and_then(|(p, t)| Some((p.parse::<usize>().ok()?, t)))
                    .ok_or_else(|| Error::Eval(format!("line {}: bad label '{entry}'", i + 1)))?;
                if pos >= tokens.len() {
                    return Err(Error::Eval(format!(
                        "line {}: label position {pos} beyond sentence",
                        i + 1
                    )));
                }
                corpus.labels.push(SenseLabel {
                    sentence,
                    position: pos,
                    tag: tag.to_string(),
                });
            }
            corpus.sentences.push(vocab.encode_sentence(&tokens, lang));
        }
        Ok(corpus)
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        fs::write(path, self.to_text(vocab)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab: &Vocabulary, lang: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, vocab, lang)
    }
}

/// A labeled occurrence with its contextual representation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRep {
    pub token: TokenId,
    pub tag: String,
    pub rep: Vec<f64>,
}

/// Representations of all labeled occurrences, in label order.
pub fn labeled_reps(
    encoder: &EncoderState,
    mode: Mode,
    corpus: &SenseLabeledCorpus,
) -> Result<Vec<LabeledRep>> {
    corpus.validate(false)?;
    let mut by_sentence: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in corpus.labels.iter().enumerate() {
        by_sentence.entry(l.sentence).or_default().push(i);
    }
    let mut out: Vec<Option<LabeledRep>> = vec![None; corpus.labels.len()];
    for (s, idxs) in by_sentence {
        let sentence = &corpus.sentences[s];
        let reps = encoder.token_reps(&sentence.ids, mode)?;
        for i in idxs {
            let l = &corpus.labels[i];
            out[i] = Some(LabeledRep {
                token: sentence.ids[l.position],
                tag: l.tag.clone(),
                rep: reps[l.position].clone(),
            });
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every label visited")).collect())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenScore {
    pub correct: usize,
    pub total: usize,
    /// Test occurrences whose gold tag has no training anchor.
    pub unseen: usize,
}

impl TokenScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WsdReport {
    pub per_token: BTreeMap<TokenId, TokenScore>,
    pub correct: usize,
    pub total: usize,
    pub unseen: usize,
}

impl WsdReport {
    /// Micro-averaged F1, equal to accuracy with one label per occurrence.
    pub fn f1(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Per-(token, tag) means of the training reps.
pub fn sense_anchors(train: &[LabeledRep]) -> BTreeMap<TokenId, Vec<(String, Vec<f64>)>> {
    let mut sums: BTreeMap<(TokenId, &str), (Vec<f64>, usize)> = BTreeMap::new();
    for r in train {
        let e = sums
            .entry((r.token, r.tag.as_str()))
            .or_insert_with(|| (vec![0.0; r.rep.len()], 0));
        for (s, v) in e.0.iter_mut().zip(&r.rep) {
            *s += v;
        }
        e.1 += 1;
    }
    let mut out: BTreeMap<TokenId, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    for ((token, tag), (sum, n)) in sums {
        let mean = sum.iter().map(|s| s / n as f64).collect();
        out.entry(token).or_default().push((tag.to_string(), mean));
    }
    out
}

/// Classifies each test occurrence by the cosine-nearest training sense
/// anchor of the same token. Ties go to the lexicographically first tag.
pub fn wsd_from_reps(train: &[LabeledRep], test: &[LabeledRep]) -> WsdReport {
    let anchors = sense_anchors(train);
    let mut report = WsdReport::default();
    for r in test {
        let score = report.per_token.entry(r.token).or_default();
        score.total += 1;
        report.total += 1;
        let candidates = anchors.get(&r.token).map(Vec::as_slice).unwrap_or(&[]);
        if !candidates.iter().any(|(tag, _)| *tag == r.tag) {
            score.unseen += 1;
            report.unseen += 1;
            continue;
        }
        let mut best: Option<(&str, f64)> = None;
        for (tag, anchor) in candidates {
            let sim = cosine(&r.rep, anchor);
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((tag, sim));
            }
        }
        if best.is_some_and(|(tag, _)| tag == r.tag) {
            score.correct += 1;
            report.correct += 1;
        }
    }
    if report.unseen > 0 {
        log::warn!("{} test occurrences carry a sense unseen in training", report.unseen);
    }
    report
}

pub fn wsd_nearest_anchor(
    encoder: &EncoderState,
    mode: Mode,
    train: &SenseLabeledCorpus,
    test: &SenseLabeledCorpus,
) -> Result<WsdReport> {
    let train_reps = labeled_reps(encoder, mode, train)?;
    let test_reps = labeled_reps(encoder, mode, test)?;
    Ok(wsd_from_reps(&train_reps, &test_reps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    /// `None` when the ratio is undefined (zero denominator or fewer than two
    /// usable tokens).
    pub ratio: Option<f64>,
    pub within: f64,
    pub between: f64,
    pub tokens_used: Vec<TokenId>,
    pub tokens_skipped: Vec<TokenId>,
}

/// Mean cosine distance of reps to their own token's anchor, divided by the
/// mean pairwise cosine distance between anchors of distinct tokens.
pub fn separation_from_reps(
    groups: &BTreeMap<TokenId, Vec<Vec<f64>>>,
    min_occurrences: usize,
) -> SeparationReport {
    let mut used = Vec::new();
    let mut skipped = Vec::new();
    let mut anchors = Vec::new();
    let mut within_sum = 0.0;
    let mut within_n = 0usize;
    for (&token, reps) in groups {
        if reps.len() < min_occurrences.max(1) {
            log::warn!("token {token} has {} occurrences; skipped", reps.len());
            skipped.push(token);
            continue;
        }
        let d = reps[0].len();
        let mut mean = vec![0.0; d];
        for r in reps {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= reps.len() as f64);
        for r in reps {
            within_sum += 1.0 - cosine(r, &mean);
            within_n += 1;
        }
        anchors.push(mean);
        used.push(token);
    }
    let mut between_sum = 0.0;
    let mut between_n = 0usize;
    for i in 0..anchors.len() {
        for j in i + 1..anchors.len() {
            between_sum += 1.0 - cosine(&anchors[i], &anchors[j]);
            between_n += 1;
        }
    }
    let within = if within_n > 0 { within_sum / within_n as f64 } else { 0.0 };
    let between = if between_n > 0 { between_sum / between_n as f64 } else { 0.0 };
    let ratio = (between_n > 0 && between > 1e-15).then(|| within / between);
    SeparationReport {
        ratio,
        within,
        between,
        tokens_used: used,
        tokens_skipped: skipped,
    }
}

pub const MIN_SEPARATION_OCCURRENCES: usize = 10;

pub fn anchor_separation_ratio(
    encoder: &EncoderState,
    mode: Mode,
    corpus: &[TokenSequence],
    targets: &[TokenId],
) -> Result<SeparationReport> {
    let wanted: BTreeSet<TokenId> = targets.iter().copied().collect();
    let mut groups: BTreeMap<TokenId, Vec<Vec<f64>>> =
        wanted.iter().map(|&t| (t, Vec::new())).collect();
    for sentence in corpus {
        if !sentence.ids.iter().any(|id| wanted.contains(id)) {
            continue;
        }
        let reps = encoder.token_reps(&sentence.ids, mode)?;
        for (id, rep) in sentence.ids.iter().zip(reps) {
            if let Some(g) = groups.get_mut(id) {
                g.push(rep);
            }
        }
    }
    Ok(separation_from_reps(&groups, MIN_SEPARATION_OCCURRENCES))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub precision_at_1: f64,
    pub precision_at_5: f64,
    pub evaluated: usize,
    /// Source tokens without an anchor or without any gold anchor.
    pub skipped: usize,
}

/// For each source token of `test`, ranks the `candidates` anchors of
/// `target` by cosine (ties by token id) and checks whether a gold
/// translation is among the top 1 and top 5.
pub fn translation_retrieval(
    source: &AnchorTable,
    target: &AnchorTable,
    candidates: &[TokenId],
    test: &crate::corpus::BilingualDictionary,
) -> Result<RetrievalReport> {
    let pool: Vec<(TokenId, Vec<f64>)> = candidates
        .iter()
        .filter_map(|&t| target.anchor(t).map(|a| (t, a)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Eval("no candidate target anchors".into()));
    }
    let sources: BTreeSet<TokenId> = test.pairs().iter().map(|p| p.0).collect();
    let mut hits1 = 0;
    let mut hits5 = 0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for s in sources {
        let gold = test.translations(s);
        let Some(query) = source.anchor(s) else {
            skipped += 1;
            continue;
        };
        if !gold.iter().any(|g| pool.iter().any(|(t, _)| t == g)) {
            skipped += 1;
            continue;
        }
        let mut ranked: Vec<(TokenId, f64)> =
            pool.iter().map(|(t, a)| (*t, cosine(&query, a))).collect();
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        if gold.contains(&ranked[0].0) {
            hits1 += 1;
        }
        if ranked.iter().take(5).any(|(t, _)| gold.contains(t)) {
            hits5 += 1;
        }
        evaluated += 1;
    }
    if skipped > 0 {
        log::warn!("{skipped} test source tokens skipped for missing anchors");
    }
    if evaluated == 0 {
        return Err(Error::Eval("no test pair has usable anchors".into()));
    }
    Ok(RetrievalReport {
        precision_at_1: hits1 as f64 / evaluated as f64,
        precision_at_5: hits5 as f64 / evaluated as f64,
        evaluated,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenseCoordinate {
    pub token: TokenId,
    pub sense: usize,
    pub active: bool,
    pub coords: Vec<f64>,
}

/// PCA coordinates of the sense vectors (all senses, active or not) of the
/// given tokens.
pub fn export_sense_vectors(
    store: &SenseStore,
    tokens: &[TokenId],
    dims: usize,
) -> Result<Vec<SenseCoordinate>> {
    let mut keys = Vec::new();
    let mut rows: Vec<&[f64]> = Vec::new();
    for &t in tokens {
        if t as usize >= store.vocab_size() {
            return Err(Error::Eval(format!("token {t} outside the sense store")));
        }
        for s in 0..store.num_senses() {
            keys.push((t, s));
            rows.push(store.sense_vector(t, s));
        }
    }
    if rows.len() < 2 {
        return Err(Error::Eval(format!(
            "need at least 2 sense vectors to export, got {}",
            rows.len()
        )));
    }
    let samples = DenseMatrix::from_rows(&rows)?;
    let pca = pca_components(&samples, dims.min(rows.len()).min(store.dim()))?;
    Ok(keys
        .into_iter()
        .zip(rows)
        .map(|((token, sense), v)| SenseCoordinate {
            token,
            sense,
            active: store.is_active(token, sense),
            coords: pca.transform(v),
        })
        .collect())
}

/// `token<TAB>sense<TAB>active<TAB>x<TAB>y` rows.
pub fn sense_coordinates_text(coords: &[SenseCoordinate], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for c in coords {
        let _ = write!(out, "{}\t{}\t{}", vocab.decode(c.token).0, c.sense, c.active as u8);
        for x in &c.coords {
            let _ = write!(out, "\t{x}");
        }
        out.push('\n');
    }
    out
}

/// `name<TAB>value` lines; undefined values are written as `undefined`.
pub fn summary_text(metrics: &[(String, Option<f64>)]) -> String {
    let mut out = String::new();
    for (name, value) in metrics {
        match value {
            Some(v) => {
                let _ = writeln!(out, "{name}\t{v}");
            }
            None => {
                let _ = writeln!(out, "{name}\tundefined");
            }
        }
    }
    out
}

/// Parses a summary file back into a map; `undefined` becomes `None`.
pub fn parse_summary(text: &str) -> BTreeMap<String, Option<f64>> {
    text.lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(k, v)| (k.to_string(), v.trim().parse::<f64>().ok()))
        .collect()
}
