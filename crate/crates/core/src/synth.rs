//! Synthetic corpora: a pseudo-homonym WSD task and a two-language task
//! generated from one concept chain.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Vocabulary, count_tokens};
use crate::error::{Error, Result};
use crate::eval::{SenseLabel, SenseLabeledCorpus};

fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("spec line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .replace(['_', ','], "")
        .parse()
        .map_err(|_| Error::Config(format!("spec key '{key}': cannot parse '{value}'")))
}

/// Pseudo-homonym task. Sentences look like
/// `fillers* cues fillers{gap} HOMONYM fillers*`, where the cue run comes from
/// a token set owned by one sense of the homonym.
#[derive(Debug, Clone, PartialEq)]
pub struct WsdSpec {
    pub n_pseudo_homonyms: usize,
    pub senses_per_homonym: usize,
    /// Size of each sense's cue-token set.
    pub contexts_per_sense: usize,
    /// Labeled sentences per (homonym, sense), train and test together.
    pub sentences_per_sense: usize,
    pub test_fraction: f64,
    /// Cue tokens per sentence, drawn from the same sense set.
    pub cue_run_min: usize,
    pub cue_run_max: usize,
    pub filler_vocab: usize,
    /// Unlabeled filler-only sentences added to the training corpus.
    pub filler_sentences: usize,
    pub gap_min: usize,
    pub gap_max: usize,
    pub edge_max: usize,
    /// Adds a second cue run (same sense) after the homonym.
    pub cues_after: bool,
    /// Probability that a sentence's cue is drawn from a random sense of the
    /// same homonym instead of the gold one.
    pub noise_rate: f64,
    pub lang: String,
    pub seed: u64,
}

impl Default for WsdSpec {
    fn default() -> Self {
        Self {
            n_pseudo_homonyms: 3,
            senses_per_homonym: 2,
            contexts_per_sense: 4,
            sentences_per_sense: 200,
            test_fraction: 0.5,
            cue_run_min: 2,
            cue_run_max: 3,
            filler_vocab: 40,
            filler_sentences: 600,
            gap_min: 0,
            gap_max: 3,
            edge_max: 3,
            cues_after: false,
            noise_rate: 0.0,
            lang: "syn".into(),
            seed: 1,
        }
    }
}

impl WsdSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_pseudo_homonyms" => self.n_pseudo_homonyms = num(key, value)?,
            "senses_per_homonym" => self.senses_per_homonym = num(key, value)?,
            "contexts_per_sense" => self.contexts_per_sense = num(key, value)?,
            "sentences_per_sense" => self.sentences_per_sense = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "cue_run_min" => self.cue_run_min = num(key, value)?,
            "cue_run_max" => self.cue_run_max = num(key, value)?,
            "filler_vocab" => self.filler_vocab = num(key, value)?,
            "filler_sentences" => self.filler_sentences = num(key, value)?,
            "gap_min" => self.gap_min = num(key, value)?,
            "gap_max" => self.gap_max = num(key, value)?,
            "edge_max" => self.edge_max = num(key, value)?,
            "cues_after" => self.cues_after = num(key, value)?,
            "noise_rate" => self.noise_rate = num(key, value)?,
            "lang" => self.lang = value.to_string(),
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown wsd spec key '{key}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "task = wsd\nn_pseudo_homonyms = {}\nsenses_per_homonym = {}\ncontexts_per_sense = {}\n\
             sentences_per_sense = {}\ntest_fraction = {}\ncue_run_min = {}\ncue_run_max = {}\nfiller_vocab = {}\nfiller_sentences = {}\n\
             gap_min = {}\ngap_max = {}\nedge_max = {}\ncues_after = {}\nnoise_rate = {}\nlang = {}\nseed = {}\n",
            self.n_pseudo_homonyms,
            self.senses_per_homonym,
            self.contexts_per_sense,
            self.sentences_per_sense,
            self.test_fraction,
            self.cue_run_min,
            self.cue_run_max,
            self.filler_vocab,
            self.filler_sentences,
            self.gap_min,
            self.gap_max,
            self.edge_max,
            self.cues_after,
            self.noise_rate,
            self.lang,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("wsd spec: {m}")));
        if self.n_pseudo_homonyms == 0 || self.senses_per_homonym == 0 {
            return bad("need at least one homonym and one sense");
        }
        if self.contexts_per_sense == 0 || self.sentences_per_sense == 0 {
            return bad("contexts_per_sense and sentences_per_sense must be >= 1");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must be in [0, 1)");
        }
        if self.filler_vocab == 0 && (self.gap_max > 0 || self.edge_max > 0 || self.filler_sentences > 0) {
            return bad("fillers requested with an empty filler vocabulary");
        }
        if self.cue_run_min == 0 || self.cue_run_min > self.cue_run_max {
            return bad("cue runs must satisfy 1 <= cue_run_min <= cue_run_max");
        }
        if self.gap_min > self.gap_max {
            return bad("gap_min exceeds gap_max");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise_rate must be in [0, 1]");
        }
        if self.lang.is_empty() || self.lang.contains(char::is_whitespace) {
            return bad("lang must be a non-empty word");
        }
        Ok(())
    }

    pub fn homonym(&self, h: usize) -> String {
        format!("h{h}")
    }

    pub fn cue(&self, h: usize, s: usize, j: usize) -> String {
        format!("c{h}s{s}x{j}")
    }

    pub fn tag(&self, h: usize, s: usize) -> String {
        format!("h{h}.{s}")
    }

    /// Cue-token sets, indexed `[homonym][sense]`.
    pub fn context_sets(&self) -> Vec<Vec<BTreeSet<String>>> {
        (0..self.n_pseudo_homonyms)
            .map(|h| {
                (0..self.senses_per_homonym)
                    .map(|s| (0..self.contexts_per_sense).map(|j| self.cue(h, s, j)).collect())
                    .collect()
            })
            .collect()
    }
}

/// Rejects context sets that share a token between senses of one homonym.
pub fn check_disjoint(sets: &[Vec<BTreeSet<String>>]) -> Result<()> {
    for (h, senses) in sets.iter().enumerate() {
        for a in 0..senses.len() {
            for b in a + 1..senses.len() {
                if let Some(t) = senses[a].intersection(&senses[b]).next() {
                    return Err(Error::Config(format!(
                        "homonym {h}: senses {a} and {b} share context token '{t}'"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Token strings with gold tags; converted to ids once a vocabulary exists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSentences {
    pub sentences: Vec<Vec<String>>,
    pub labels: Vec<SenseLabel>,
}

impl LabeledSentences {
    pub fn to_corpus(&self, vocab: &Vocabulary, lang: &str) -> SenseLabeledCorpus {
        SenseLabeledCorpus {
            sentences: self
                .sentences
                .iter()
                .map(|s| vocab.encode_sentence(s, lang))
                .collect(),
            labels: self.labels.clone(),
        }
    }

    /// Same layout as [`SenseLabeledCorpus::to_text`].
    pub fn to_text(&self) -> String {
        let mut tags: Vec<Vec<String>> = vec![Vec::new(); self.sentences.len()];
        for l in &self.labels {
            tags[l.sentence].push(format!("{}={}", l.position, l.tag));
        }
        let mut out = String::new();
        for (s, t) in self.sentences.iter().zip(tags) {
            let _ = writeln!(out, "{}\t{}", s.join(" "), t.join(" "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsdData {
    /// Unlabeled training corpus: the train split plus filler sentences.
    pub corpus: Vec<Vec<String>>,
    pub train: LabeledSentences,
    pub test: LabeledSentences,
    pub homonyms: Vec<String>,
}

impl WsdData {
    pub fn labeled_count(&self, tag: &str) -> usize {
        self.train
            .labels
            .iter()
            .chain(&self.test.labels)
            .filter(|l| l.tag == tag)
            .count()
    }
}

fn fillers(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<String> {
    (0..n).map(|_| format!("f{}", rng.random_range(0..vocab))).collect()
}

pub fn generate_synthetic_wsd(spec: &WsdSpec) -> Result<WsdData> {
    spec.validate()?;
    let sets = spec.context_sets();
    check_disjoint(&sets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_test = (spec.sentences_per_sense as f64 * spec.test_fraction).round() as usize;

    let mut train = LabeledSentences::default();
    let mut test = LabeledSentences::default();
    for h in 0..spec.n_pseudo_homonyms {
        for s in 0..spec.senses_per_homonym {
            for i in 0..spec.sentences_per_sense {
                let cue_sense = if rng.random::<f64>() < spec.noise_rate {
                    rng.random_range(0..spec.senses_per_homonym)
                } else {
                    s
                };
                let run = rng.random_range(spec.cue_run_min..=spec.cue_run_max);
                let lead = rng.random_range(0..=spec.edge_max);
                let gap = rng.random_range(spec.gap_min..=spec.gap_max);
                let tail = rng.random_range(0..=spec.edge_max);
                let mut sentence = fillers(&mut rng, spec.filler_vocab, lead);
                for _ in 0..run {
                    sentence.push(spec.cue(h, cue_sense, rng.random_range(0..spec.contexts_per_sense)));
                }
                sentence.extend(fillers(&mut rng, spec.filler_vocab, gap));
                let position = sentence.len();
                sentence.push(spec.homonym(h));
                if spec.cues_after {
                    let gap = rng.random_range(spec.gap_min..=spec.gap_max);
                    sentence.extend(fillers(&mut rng, spec.filler_vocab, gap));
                    let run = rng.random_range(spec.cue_run_min..=spec.cue_run_max);
                    for _ in 0..run {
                        sentence.push(spec.cue(h, cue_sense, rng.random_range(0..spec.contexts_per_sense)));
                    }
                }
                sentence.extend(fillers(&mut rng, spec.filler_vocab, tail));
                let split = if i < n_test { &mut test } else { &mut train };
                split.labels.push(SenseLabel {
                    sentence: split.sentences.len(),
                    position,
                    tag: spec.tag(h, s),
                });
                split.sentences.push(sentence);
            }
        }
    }
    let mut corpus = train.sentences.clone();
    for _ in 0..spec.filler_sentences {
        let len = rng.random_range(spec.gap_max + 2..=spec.gap_max + 2 * spec.edge_max + 2);
        corpus.push(fillers(&mut rng, spec.filler_vocab, len));
    }
    corpus.shuffle(&mut rng);
    Ok(WsdData {
        corpus,
        train,
        test,
        homonyms: (0..spec.n_pseudo_homonyms).map(|h| spec.homonym(h)).collect(),
    })
}

/// Two non-parallel corpora sampled from one first-order chain over concepts.
/// The second language names every concept with its own token; the first
/// merges designated concept pairs into one shared token (a pseudo-homonym).
#[derive(Debug, Clone, PartialEq)]
pub struct BilingualSpec {
    pub n_concepts: usize,
    /// Distinct successors per concept in the chain.
    pub successors: usize,
    /// Concept pairs sharing one first-language token.
    pub homonym_pairs: usize,
    pub sentences_per_language: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of translation pairs in the training dictionary.
    pub dict_fraction: f64,
    pub lang1: String,
    pub lang2: String,
    pub seed: u64,
}

impl Default for BilingualSpec {
    fn default() -> Self {
        Self {
            n_concepts: 200,
            successors: 4,
            homonym_pairs: 3,
            sentences_per_language: 5000,
            min_len: 6,
            max_len: 12,
            dict_fraction: 0.5,
            lang1: "l1".into(),
            lang2: "l2".into(),
            seed: 1,
        }
    }
}

impl BilingualSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_concepts" => self.n_concepts = num(key, value)?,
            "successors" => self.successors = num(key, value)?,
            "homonym_pairs" => self.homonym_pairs = num(key, value)?,
            "sentences_per_language" => self.sentences_per_language = num(key, value)?,
            "min_len" => self.min_len = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "dict_fraction" => self.dict_fraction = num(key, value)?,
            "lang1" => self.lang1 = value.to_string(),
            "lang2" => self.lang2 = value.to_string(),
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown bilingual spec key '{key}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "task = bilingual\nn_concepts = {}\nsuccessors = {}\nhomonym_pairs = {}\n\
             sentences_per_language = {}\nmin_len = {}\nmax_len = {}\ndict_fraction = {}\n\
             lang1 = {}\nlang2 = {}\nseed = {}\n",
            self.n_concepts,
            self.successors,
            self.homonym_pairs,
            self.sentences_per_language,
            self.min_len,
            self.max_len,
            self.dict_fraction,
            self.lang1,
            self.lang2,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("bilingual spec: {m}")));
        if self.n_concepts < 4 || self.successors == 0 || self.successors > self.n_concepts {
            return bad("need n_concepts >= 4 and 1 <= successors <= n_concepts");
        }
        if 2 * self.homonym_pairs > self.n_concepts {
            return bad("too many homonym pairs for the concept count");
        }
        if self.min_len < 2 || self.min_len > self.max_len || self.sentences_per_language == 0 {
            return bad("sentence lengths must satisfy 2 <= min_len <= max_len");
        }
        if !(self.dict_fraction > 0.0 && self.dict_fraction < 1.0) {
            return bad("dict_fraction must be in (0, 1)");
        }
        if self.lang1 == self.lang2 || self.lang1.is_empty() || self.lang2.is_empty() {
            return bad("languages must be distinct non-empty names");
        }
        Ok(())
    }

    /// First-language token of concept `c`.
    pub fn word1(&self, c: usize) -> String {
        if c < 2 * self.homonym_pairs {
            format!("a{}", c - c % 2)
        } else {
            format!("a{c}")
        }
    }

    pub fn word2(&self, c: usize) -> String {
        format!("b{c}")
    }
}

/// Token-level translation pairs, `(first-language, second-language)`.
pub type StringPairs = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq)]
pub struct BilingualData {
    pub corpus1: Vec<Vec<String>>,
    pub corpus2: Vec<Vec<String>>,
    pub train_dict: StringPairs,
    pub test_dict: StringPairs,
}

pub fn generate_synthetic_bilingual(spec: &BilingualSpec) -> Result<BilingualData> {
    spec.validate()?;
    let n = spec.n_concepts;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chain: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|_| {
            let mut next: Vec<usize> = (0..n).collect();
            next.shuffle(&mut rng);
            next.truncate(spec.successors);
            let weights: Vec<f64> = (0..spec.successors).map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = weights.iter().sum();
            next.into_iter().zip(weights.into_iter().map(|w| w / total)).collect()
        })
        .collect();

    let walk = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut c = rng.random_range(0..n);
        let mut out = vec![c];
        while out.len() < len {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = chain[c].last().expect("successors").0;
            for &(next, p) in &chain[c] {
                acc += p;
                if u < acc {
                    pick = next;
                    break;
                }
            }
            c = pick;
            out.push(c);
        }
        out
    };

    let mut rng1 = ChaCha8Rng::seed_from_u64(rng.random());
    let mut rng2 = ChaCha8Rng::seed_from_u64(rng.random());
    let corpus1 = (0..spec.sentences_per_language)
        .map(|_| walk(&mut rng1).into_iter().map(|c| spec.word1(c)).collect())
        .collect();
    let corpus2 = (0..spec.sentences_per_language)
        .map(|_| walk(&mut rng2).into_iter().map(|c| spec.word2(c)).collect())
        .collect();

    let homonym_concepts = 2 * spec.homonym_pairs;
    let mut plain: Vec<usize> = (homonym_concepts..n).collect();
    plain.shuffle(&mut rng);
    let n_train = ((n as f64 * spec.dict_fraction).round() as usize)
        .saturating_sub(homonym_concepts)
        .min(plain.len().saturating_sub(1));
    let pair = |c: usize| (spec.word1(c), spec.word2(c));
    let mut train_dict: StringPairs = (0..homonym_concepts).map(pair).collect();
    train_dict.extend(plain[..n_train].iter().map(|&c| pair(c)));
    let mut test_concepts = plain[n_train..].to_vec();
    test_concepts.sort_unstable();
    let test_dict = test_concepts.into_iter().map(pair).collect();
    Ok(BilingualData {
        corpus1,
        corpus2,
        train_dict,
        test_dict,
    })
}

/// A parsed synthetic-task spec file (`task = wsd | bilingual`).
#[derive(Debug, Clone, PartialEq)]
pub enum SynthSpec {
    Wsd(WsdSpec),
    Bilingual(BilingualSpec),
}

impl SynthSpec {
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let task = pairs
            .iter()
            .find(|(k, _)| k == "task")
            .map(|(_, v)| v.as_str())
            .unwrap_or("wsd");
        let rest = pairs.iter().filter(|(k, _)| k != "task");
        match task {
            "wsd" => {
                let mut spec = WsdSpec::default();
                for (k, v) in rest {
                    spec.set(k, v)?;
                }
                spec.validate()?;
                Ok(SynthSpec::Wsd(spec))
            }
            "bilingual" => {
                let mut spec = BilingualSpec::default();
                for (k, v) in rest {
                    spec.set(k, v)?;
                }
                spec.validate()?;
                Ok(SynthSpec::Bilingual(spec))
            }
            other => Err(Error::Config(format!(
                "unknown synthetic task '{other}' (expected wsd or bilingual)"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        match self {
            SynthSpec::Wsd(s) => s.to_text(),
            SynthSpec::Bilingual(s) => s.to_text(),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            SynthSpec::Wsd(s) => s.seed = seed,
            SynthSpec::Bilingual(s) => s.seed = seed,
        }
    }
}

/// Joint vocabulary over in-memory `(sentences, language)` corpora.
pub fn vocabulary_for(corpora: &[(&[Vec<String>], &str)], min_count: u64) -> Result<Vocabulary> {
    let counts = count_tokens(corpora);
    if counts.is_empty() {
        return Err(Error::EmptyCorpus("synthetic corpus".into()));
    }
    Vocabulary::from_counts(counts, min_count)
}

pub fn sentences_text(sentences: &[Vec<String>]) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    out
}

pub fn pairs_text(pairs: &StringPairs) -> String {
    let mut out = String::new();
    for (a, b) in pairs {
        let _ = writeln!(out, "{a}\t{b}");
    }
    out
}
