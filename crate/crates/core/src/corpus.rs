//! Corpus ingestion: vocabularies, bilingual dictionaries and batch streaming.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

/// Language tag carried by the reserved entries.
pub const RESERVED_LANG: &str = "*";
const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<unk>", "<s>", "</s>", "<mask>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabEntry {
    pub token: String,
    pub lang: String,
    pub freq: u64,
}

/// Token-string plus language tag to dense id mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<(String, String), TokenId>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<VocabEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index
                .insert((e.token.clone(), e.lang.clone()), i as TokenId)
                .is_some()
            {
                return Err(Error::Config(format!(
                    "duplicate vocabulary entry {}/{}",
                    e.token, e.lang
                )));
            }
        }
        Ok(Self { entries, index })
    }

    fn reserved() -> Vec<VocabEntry> {
        RESERVED_TOKENS
            .iter()
            .map(|t| VocabEntry {
                token: (*t).to_string(),
                lang: RESERVED_LANG.to_string(),
                freq: 0,
            })
            .collect()
    }

    /// Builds a vocabulary from token counts, keeping tokens with
    /// `count >= min_count`, sorted by descending count then token then tag.
    pub fn from_counts(counts: HashMap<(String, String), u64>, min_count: u64) -> Result<Self> {
        let mut kept: Vec<VocabEntry> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .map(|((token, lang), freq)| VocabEntry { token, lang, freq })
            .collect();
        kept.sort_by(|a, b| {
            b.freq
                .cmp(&a.freq)
                .then_with(|| a.token.cmp(&b.token))
                .then_with(|| a.lang.cmp(&b.lang))
        });
        let mut entries = Self::reserved();
        entries.extend(kept);
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn entry(&self, id: TokenId) -> &VocabEntry {
        &self.entries[id as usize]
    }

    pub fn id(&self, token: &str, lang: &str) -> Option<TokenId> {
        self.index
            .get(&(token.to_string(), lang.to_string()))
            .copied()
    }

    /// Like [`Vocabulary::id`] but maps unknown tokens to [`UNK`].
    pub fn encode(&self, token: &str, lang: &str) -> TokenId {
        self.id(token, lang).unwrap_or(UNK)
    }

    pub fn decode(&self, id: TokenId) -> (&str, &str) {
        let e = &self.entries[id as usize];
        (&e.token, &e.lang)
    }

    /// Distinct non-reserved language tags in order of first appearance.
    pub fn languages(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries[NUM_RESERVED.min(self.entries.len())..] {
            if !seen.contains(&e.lang) {
                seen.push(e.lang.clone());
            }
        }
        seen
    }

    /// Ids of all content tokens tagged with `lang`.
    pub fn ids_for_lang(&self, lang: &str) -> Vec<TokenId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(i, e)| *i >= NUM_RESERVED && e.lang == lang)
            .map(|(i, _)| i as TokenId)
            .collect()
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < NUM_RESERVED
    }

    pub fn encode_sentence(&self, tokens: &[String], lang: &str) -> TokenSequence {
        TokenSequence {
            ids: tokens.iter().map(|t| self.encode(t, lang)).collect(),
            lang: lang.to_string(),
        }
    }

    /// `token<TAB>lang<TAB>freq` per line, ordered by id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.token, e.lang, e.freq));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Config(format!(
                    "vocabulary line {} has {} columns",
                    n + 1,
                    cols.len()
                )));
            }
            let freq = cols[2].parse::<u64>().map_err(|e| {
                Error::Config(format!("vocabulary line {}: bad frequency: {e}", n + 1))
            })?;
            entries.push(VocabEntry {
                token: cols[0].to_string(),
                lang: cols[1].to_string(),
                freq,
            });
        }
        let reserved = Self::reserved();
        if entries.len() < NUM_RESERVED || entries[..NUM_RESERVED] != reserved[..] {
            return Err(Error::Config(
                "vocabulary does not start with the reserved entries".into(),
            ));
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// One sentence as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub lang: String,
}

/// Reads a pre-tokenized corpus (one sentence per line), lowercased.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Ingest {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.to_lowercase())
                .collect::<Vec<_>>()
        })
        .filter(|s| !s.is_empty())
        .collect())
}

/// Counts tokens across `(path, language)` corpora and builds the joint vocabulary.
pub fn build_vocabulary(corpora: &[(PathBuf, String)], min_count: u64) -> Result<Vocabulary> {
    let mut loaded = Vec::with_capacity(corpora.len());
    for (path, lang) in corpora {
        loaded.push((read_corpus(path)?, lang.as_str()));
    }
    let views: Vec<(&[Vec<String>], &str)> =
        loaded.iter().map(|(s, l)| (s.as_slice(), *l)).collect();
    let counts = count_tokens(&views);
    if counts.is_empty() {
        let names: Vec<String> = corpora.iter().map(|(p, _)| p.display().to_string()).collect();
        return Err(Error::EmptyCorpus(names.join(", ")));
    }
    Vocabulary::from_counts(counts, min_count)
}

/// Token counts over in-memory `(sentences, language)` corpora.
pub fn count_tokens(corpora: &[(&[Vec<String>], &str)]) -> HashMap<(String, String), u64> {
    let mut counts: HashMap<(String, String), u64> = HashMap::new();
    for (sentences, lang) in corpora {
        for tok in sentences.iter().flatten() {
            *counts.entry((tok.clone(), lang.to_string())).or_default() += 1;
        }
    }
    counts
}

/// Reads and encodes every sentence of a corpus.
pub fn load_corpus(path: &Path, lang: &str, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    let sentences = read_corpus(path)?;
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(sentences
        .iter()
        .map(|s| vocab.encode_sentence(s, lang))
        .collect())
}

/// Source-to-target translation pairs over a joint vocabulary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BilingualDictionary {
    pairs: Vec<(TokenId, TokenId)>,
    by_source: BTreeMap<TokenId, Vec<TokenId>>,
}

impl BilingualDictionary {
    /// Builds a dictionary from pairs, dropping duplicates and keeping the
    /// first-seen order.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (TokenId, TokenId)>) -> Self {
        let mut seen = BTreeSet::new();
        let mut kept = Vec::new();
        let mut by_source: BTreeMap<TokenId, Vec<TokenId>> = BTreeMap::new();
        for (s, t) in pairs {
            if seen.insert((s, t)) {
                kept.push((s, t));
                by_source.entry(s).or_default().push(t);
            }
        }
        for targets in by_source.values_mut() {
            targets.sort_unstable();
        }
        Self {
            pairs: kept,
            by_source,
        }
    }

    pub fn pairs(&self) -> &[(TokenId, TokenId)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Translations of `source`, sorted by id; empty when there are none.
    pub fn translations(&self, source: TokenId) -> &[TokenId] {
        self.by_source.get(&source).map_or(&[], |v| v.as_slice())
    }

    pub fn contains(&self, source: TokenId, target: TokenId) -> bool {
        self.translations(source).binary_search(&target).is_ok()
    }

    /// Target-to-source view.
    pub fn reversed(&self) -> Self {
        Self::from_pairs(self.pairs.iter().map(|&(s, t)| (t, s)))
    }

    /// Union of both directions.
    pub fn symmetrized(&self) -> Self {
        Self::from_pairs(
            self.pairs
                .iter()
                .copied()
                .chain(self.pairs.iter().map(|&(s, t)| (t, s))),
        )
    }

    /// Largest number of translations of any source token.
    pub fn max_translations(&self) -> usize {
        self.by_source.values().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct DictionaryOptions {
    pub source_lang: String,
    pub target_lang: String,
    /// Adds `(t, t)` for every token string present in both languages.
    pub add_identity: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DictionaryReport {
    pub lines: usize,
    pub malformed: usize,
    /// Lines whose source or target is not in the vocabulary.
    pub out_of_vocab: usize,
    pub duplicates: usize,
    pub identity_added: usize,
}

impl DictionaryReport {
    pub fn dropped(&self) -> usize {
        self.malformed + self.out_of_vocab + self.duplicates
    }
}

/// Parses a two-column dictionary and restricts it to `vocab`.
pub fn parse_dictionary(
    text: &str,
    vocab: &Vocabulary,
    opts: &DictionaryOptions,
) -> Result<(BilingualDictionary, DictionaryReport)> {
    let mut report = DictionaryReport::default();
    let mut pairs = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 2 {
            log::warn!("dictionary line {} has {} columns, skipped", n + 1, cols.len());
            report.malformed += 1;
            continue;
        }
        let src = vocab.id(&cols[0].to_lowercase(), &opts.source_lang);
        let tgt = vocab.id(&cols[1].to_lowercase(), &opts.target_lang);
        match (src, tgt) {
            (Some(s), Some(t)) => {
                if seen.insert((s, t)) {
                    pairs.push((s, t));
                } else {
                    report.duplicates += 1;
                }
            }
            _ => report.out_of_vocab += 1,
        }
    }
    if opts.add_identity {
        for s in vocab.ids_for_lang(&opts.source_lang) {
            let token = &vocab.entry(s).token;
            if let Some(t) = vocab.id(token, &opts.target_lang) {
                if seen.insert((s, t)) {
                    pairs.push((s, t));
                    report.identity_added += 1;
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dictionary(format!(
            "no usable pairs ({} lines, {} dropped)",
            report.lines,
            report.dropped()
        )));
    }
    Ok((BilingualDictionary::from_pairs(pairs), report))
}

pub fn load_dictionary(
    path: &Path,
    vocab: &Vocabulary,
    opts: &DictionaryOptions,
) -> Result<(BilingualDictionary, DictionaryReport)> {
    let text = fs::read_to_string(path).map_err(|source| Error::Ingest {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dictionary(&text, vocab, opts)
}

/// Writes `source<TAB>target` token strings, one pair per line.
pub fn write_dictionary(path: &Path, dict: &BilingualDictionary, vocab: &Vocabulary) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for &(s, t) in dict.pairs() {
        writeln!(f, "{}\t{}", vocab.entry(s).token, vocab.entry(t).token)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Prediction task the batches are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Next-token prediction.
    Forward,
    /// Masked-token prediction.
    Masked,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::Masked => "masked",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Mode::Forward),
            "masked" => Ok(Mode::Masked),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StreamConfig {
    pub batch_size: usize,
    pub unroll_steps: usize,
    pub mode: Mode,
    pub mask_rate: f64,
    pub seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.unroll_steps < 1 {
            return Err(Error::Config(
                "batch_size and unroll_steps must be at least 1".into(),
            ));
        }
        if self.mode == Mode::Masked && !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config(format!(
                "mask_rate must be in (0, 1], got {}",
                self.mask_rate
            )));
        }
        Ok(())
    }
}

/// A fixed-length slice of one sentence.
#[derive(Debug, Clone, PartialEq)]
struct Window {
    inputs: Vec<TokenId>,
    targets: Vec<TokenId>,
    valid: Vec<bool>,
}

/// `rows × len` token grid with per-position targets.
///
/// In forward mode the encoder consumes `inputs` followed by the last target
/// of each row, so that every target token also has a representation of its
/// own (used for sense selection). In masked mode the encoder consumes
/// `inputs` only.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub mode: Mode,
    pub rows: usize,
    pub len: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    /// False for padding and, in masked mode, for unmasked positions.
    pub target_mask: Vec<bool>,
}

impl Batch {
    pub fn input_row(&self, r: usize) -> &[TokenId] {
        &self.inputs[r * self.len..(r + 1) * self.len]
    }

    pub fn target_row(&self, r: usize) -> &[TokenId] {
        &self.targets[r * self.len..(r + 1) * self.len]
    }

    pub fn mask_row(&self, r: usize) -> &[bool] {
        &self.target_mask[r * self.len..(r + 1) * self.len]
    }

    /// Token sequence fed to the encoder for row `r`.
    pub fn encoder_sequence(&self, r: usize) -> Vec<TokenId> {
        let mut seq = self.input_row(r).to_vec();
        if self.mode == Mode::Forward {
            seq.push(self.target_row(r)[self.len - 1]);
        }
        seq
    }

    pub fn num_targets(&self) -> usize {
        self.target_mask.iter().filter(|m| **m).count()
    }

    /// Builds a single-row batch from one sentence (no masking in masked mode).
    pub fn from_sentence(ids: &[TokenId], mode: Mode) -> Self {
        let (inputs, targets) = match mode {
            Mode::Forward => {
                let mut inputs = vec![BOS];
                inputs.extend_from_slice(&ids[..ids.len().saturating_sub(1)]);
                (inputs, ids.to_vec())
            }
            Mode::Masked => (ids.to_vec(), ids.to_vec()),
        };
        let len = targets.len();
        Self {
            mode,
            rows: 1,
            len,
            inputs,
            targets,
            target_mask: vec![mode == Mode::Forward; len],
        }
    }
}

/// Serializable position of a [`BatchStream`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamState {
    pub epoch: u64,
    pub cursor: u64,
    pub order: Vec<u32>,
    pub rng_word_pos: u128,
}

/// Endless, seeded stream of batches over a corpus; reshuffles every epoch.
#[derive(Debug, Clone)]
pub struct BatchStream {
    config: StreamConfig,
    windows: Vec<Window>,
    order: Vec<u32>,
    cursor: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

fn make_windows(corpus: &[TokenSequence], unroll: usize, mode: Mode) -> Vec<Window> {
    let mut windows = Vec::new();
    for seq in corpus {
        let ids = &seq.ids;
        let mut start = 0;
        while start < ids.len() {
            let end = (start + unroll).min(ids.len());
            let mut targets: Vec<TokenId> = ids[start..end].to_vec();
            let mut inputs: Vec<TokenId> = match mode {
                Mode::Forward => (start..end)
                    .map(|k| if k == 0 { BOS } else { ids[k - 1] })
                    .collect(),
                Mode::Masked => targets.clone(),
            };
            let mut valid = vec![true; targets.len()];
            targets.resize(unroll, EOS);
            inputs.resize(unroll, EOS);
            valid.resize(unroll, false);
            windows.push(Window {
                inputs,
                targets,
                valid,
            });
            start = end;
        }
    }
    windows
}

impl BatchStream {
    pub fn new(corpus: &[TokenSequence], config: StreamConfig) -> Result<Self> {
        config.validate()?;
        let windows = make_windows(corpus, config.unroll_steps, config.mode);
        if windows.is_empty() {
            return Err(Error::EmptyCorpus("no sentences to stream".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<u32> = (0..windows.len() as u32).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            config,
            windows,
            order,
            cursor: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    /// Batches needed to visit every window once.
    pub fn batches_per_epoch(&self) -> usize {
        self.windows.len().div_ceil(self.config.batch_size)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            epoch: self.epoch,
            cursor: self.cursor as u64,
            order: self.order.clone(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(&mut self, state: &StreamState) -> Result<()> {
        if state.order.len() != self.windows.len() || state.cursor as usize > state.order.len() {
            return Err(Error::Checkpoint(
                "stream state does not match this corpus".into(),
            ));
        }
        self.epoch = state.epoch;
        self.cursor = state.cursor as usize;
        self.order = state.order.clone();
        self.rng.set_word_pos(state.rng_word_pos);
        Ok(())
    }

    fn next_window(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order.shuffle(&mut self.rng);
        }
        let w = self.order[self.cursor] as usize;
        self.cursor += 1;
        w
    }

    pub fn next_batch(&mut self) -> Batch {
        let rows = self.config.batch_size;
        let len = self.config.unroll_steps;
        let mut batch = Batch {
            mode: self.config.mode,
            rows,
            len,
            inputs: Vec::with_capacity(rows * len),
            targets: Vec::with_capacity(rows * len),
            target_mask: Vec::with_capacity(rows * len),
        };
        for _ in 0..rows {
            let w = self.next_window();
            let window = &self.windows[w];
            batch.targets.extend_from_slice(&window.targets);
            match self.config.mode {
                Mode::Forward => {
                    batch.inputs.extend_from_slice(&window.inputs);
                    batch.target_mask.extend_from_slice(&window.valid);
                }
                Mode::Masked => {
                    let mut inputs = window.inputs.clone();
                    let mut masked = vec![false; len];
                    let rate = self.config.mask_rate;
                    for k in 0..len {
                        if window.valid[k] && self.rng.random::<f64>() < rate {
                            masked[k] = true;
                            inputs[k] = MASK;
                        }
                    }
                    batch.inputs.extend_from_slice(&inputs);
                    batch.target_mask.extend_from_slice(&masked);
                }
            }
        }
        batch
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Convenience constructor matching the streaming entry point.
pub fn stream_batches(corpus: &[TokenSequence], config: StreamConfig) -> Result<BatchStream> {
    BatchStream::new(corpus, config)
}
