//! Binary checkpoint: every tensor, the vocabulary, the resolved config and
//! the training progress, stored little-endian in tagged sections.
//!
//! ```text
//! magic "SNSALGN\0" | version u32 | section count u32
//! section: tag [u8; 4] | payload length u64 | payload
//! ```
//!
//! The `ENCD` payload depends only on the vocabulary size and the encoder
//! widths, so encoder weights can be read without knowing the sense layout.

use std::collections::VecDeque;
use std::path::Path;

use crate::config::TrainConfig;
use crate::corpus::{BilingualDictionary, StreamState, Vocabulary};
use crate::encoder::{EncoderState, RecurrentCell};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::senses::{ProjectionState, SenseStore};
use crate::trainer::{MetricsState, TrainProgress};

pub const MAGIC: [u8; 8] = *b"SNSALGN\0";
pub const FORMAT_VERSION: u32 = 1;

pub const TAG_CONFIG: [u8; 4] = *b"CONF";
pub const TAG_VOCAB: [u8; 4] = *b"VOCB";
pub const TAG_ENCODER: [u8; 4] = *b"ENCD";
pub const TAG_SENSES: [u8; 4] = *b"SENS";
pub const TAG_PROJECTION: [u8; 4] = *b"PROJ";
pub const TAG_DICTIONARY: [u8; 4] = *b"DICT";
pub const TAG_PROGRESS: [u8; 4] = *b"TRNR";

/// Complete model and training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    /// Dictionary used by the translation objective, as trained.
    pub dictionary: Option<BilingualDictionary>,
    pub encoder: EncoderState,
    pub store: SenseStore,
    pub projection: ProjectionState,
    pub progress: Option<TrainProgress>,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint(format!("truncated {} section", self.what)));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::Checkpoint(format!("oversized length in {} section", self.what)))
    }
    /// Length prefix that must fit in the remaining bytes at `width` each.
    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.checked_mul(width).is_none_or(|b| b > self.buf.len()) {
            return Err(Error::Checkpoint(format!("truncated {} section", self.what)));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn text(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.bytes()?)
            .map_err(|_| Error::Checkpoint(format!("{} section is not UTF-8", self.what)))
    }
    fn finish(&self) -> Result<()> {
        if !self.buf.is_empty() {
            return Err(Error::Checkpoint(format!("trailing bytes in {} section", self.what)));
        }
        Ok(())
    }
}

fn write_cell(w: &mut Writer, cell: &RecurrentCell) {
    w.f64s(&cell.w_in);
    w.f64s(&cell.w_rec);
    w.f64s(&cell.bias);
}

fn read_cell(r: &mut Reader) -> Result<RecurrentCell> {
    Ok(RecurrentCell {
        w_in: r.f64s()?,
        w_rec: r.f64s()?,
        bias: r.f64s()?,
    })
}

fn encode_encoder(enc: &EncoderState) -> Vec<u8> {
    let mut w = Writer::default();
    w.usize(enc.vocab_size());
    w.usize(enc.embed_dim());
    w.usize(enc.hidden_dim());
    w.f64s(&enc.embeddings);
    write_cell(&mut w, &enc.forward);
    write_cell(&mut w, &enc.backward);
    w.buf
}

fn decode_encoder(buf: &[u8]) -> Result<EncoderState> {
    let mut r = Reader { buf, what: "encoder" };
    let (v, e, d) = (r.usize()?, r.usize()?, r.usize()?);
    let embeddings = r.f64s()?;
    let forward = read_cell(&mut r)?;
    let backward = read_cell(&mut r)?;
    r.finish()?;
    EncoderState::from_parts(v, e, d, embeddings, forward, backward)
}

fn encode_store(store: &SenseStore) -> Vec<u8> {
    let mut w = Writer::default();
    w.usize(store.vocab_size);
    w.usize(store.num_senses);
    w.usize(store.dim);
    w.f64(store.alpha);
    w.f64s(&store.sense_vectors);
    w.f64s(&store.centers);
    w.usize(store.active.len());
    for &a in &store.active {
        w.u8(a as u8);
    }
    w.usize(store.counts.len());
    for &c in &store.counts {
        w.u64(c);
    }
    w.buf
}

fn decode_store(buf: &[u8]) -> Result<SenseStore> {
    let mut r = Reader { buf, what: "sense" };
    let (v, s, d) = (r.usize()?, r.usize()?, r.usize()?);
    let alpha = r.f64()?;
    let sense_vectors = r.f64s()?;
    let centers = r.f64s()?;
    let n = r.len(1)?;
    let active = (0..n)
        .map(|_| match r.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("bad active flag {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let n = r.len(8)?;
    let counts = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    SenseStore::from_parts(v, s, d, alpha, sense_vectors, centers, active, counts)
        .map_err(|e| Error::Checkpoint(format!("invalid sense store: {e}")))
}

fn encode_projection(p: &ProjectionState) -> Vec<u8> {
    let mut w = Writer::default();
    w.usize(p.dim());
    w.usize(p.proj_dim());
    w.u64(p.interval);
    w.usize(p.capacity);
    w.u64(p.stride);
    w.u64(p.offers_seen);
    w.u64(p.since_refresh);
    w.u64(p.refreshes);
    w.f64s(p.p.as_slice());
    w.usize(p.queue.len());
    for h in &p.queue {
        w.f64s(h);
    }
    w.buf
}

fn decode_projection(buf: &[u8]) -> Result<ProjectionState> {
    let mut r = Reader { buf, what: "projection" };
    let (d, k) = (r.usize()?, r.usize()?);
    let interval = r.u64()?;
    let capacity = r.usize()?;
    let stride = r.u64()?;
    let offers_seen = r.u64()?;
    let since_refresh = r.u64()?;
    let refreshes = r.u64()?;
    let p = DenseMatrix::from_vec(d, k, r.f64s()?)
        .map_err(|e| Error::Checkpoint(format!("invalid projection: {e}")))?;
    let n = r.len(8)?;
    let mut queue = VecDeque::with_capacity(n);
    for _ in 0..n {
        let h = r.f64s()?;
        if h.len() != d {
            return Err(Error::Checkpoint("projection queue entry has wrong width".into()));
        }
        queue.push_back(h);
    }
    r.finish()?;
    if k < 1 || k > d || interval < 1 || capacity < 1 || stride < 1 || queue.len() > capacity {
        return Err(Error::Checkpoint("inconsistent projection state".into()));
    }
    Ok(ProjectionState {
        p,
        queue,
        since_refresh,
        interval,
        capacity,
        stride,
        offers_seen,
        refreshes,
    })
}

fn encode_dictionary(dict: &BilingualDictionary) -> Vec<u8> {
    let mut w = Writer::default();
    w.usize(dict.len());
    for &(s, t) in dict.pairs() {
        w.u32(s);
        w.u32(t);
    }
    w.buf
}

fn decode_dictionary(buf: &[u8]) -> Result<BilingualDictionary> {
    let mut r = Reader { buf, what: "dictionary" };
    let n = r.len(8)?;
    let pairs = (0..n)
        .map(|_| Ok((r.u32()?, r.u32()?)))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(BilingualDictionary::from_pairs(pairs))
}

fn encode_progress(p: &TrainProgress) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(p.step);
    w.u8(p.warmup_done as u8);
    w.u64(p.stream.epoch);
    w.u64(p.stream.cursor);
    w.usize(p.stream.order.len());
    for &i in &p.stream.order {
        w.u32(i);
    }
    w.buf.extend_from_slice(&p.stream.rng_word_pos.to_le_bytes());
    for v in [p.metrics.loss_ema, p.metrics.sense_ema, p.metrics.tran_ema] {
        w.u8(v.is_some() as u8);
        w.f64(v.unwrap_or(0.0));
    }
    w.u64(p.metrics.pruned_total);
    w.buf
}

fn decode_progress(buf: &[u8]) -> Result<TrainProgress> {
    let mut r = Reader { buf, what: "progress" };
    let step = r.u64()?;
    let warmup_done = r.u8()? != 0;
    let epoch = r.u64()?;
    let cursor = r.u64()?;
    let n = r.len(4)?;
    let order = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut ema = || -> Result<Option<f64>> {
        let present = r.u8()? != 0;
        let v = r.f64()?;
        Ok(present.then_some(v))
    };
    let (loss_ema, sense_ema, tran_ema) = (ema()?, ema()?, ema()?);
    let pruned_total = r.u64()?;
    r.finish()?;
    Ok(TrainProgress {
        step,
        warmup_done,
        stream: StreamState {
            epoch,
            cursor,
            order,
            rng_word_pos,
        },
        metrics: MetricsState {
            loss_ema,
            sense_ema,
            tran_ema,
            pruned_total,
        },
    })
}

fn text_section(text: &str) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(text.as_bytes());
    w.buf
}

fn read_text_section(buf: &[u8], what: &'static str) -> Result<String> {
    let mut r = Reader { buf, what };
    let text = r.text()?.to_string();
    r.finish()?;
    Ok(text)
}

/// Raw `(tag, payload)` sections of a checkpoint file.
pub fn read_sections(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    let mut r = Reader { buf: bytes, what: "header" };
    if bytes.len() < MAGIC.len() || r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a sensealign checkpoint".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32()?;
    let mut sections = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.len(1)?;
        sections.push((tag, r.take(len)?));
    }
    r.what = "checkpoint";
    r.finish()?;
    Ok(sections)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections = vec![
            (TAG_CONFIG, text_section(&self.config.to_text())),
            (TAG_VOCAB, text_section(&self.vocab.to_text())),
            (TAG_ENCODER, encode_encoder(&self.encoder)),
            (TAG_SENSES, encode_store(&self.store)),
            (TAG_PROJECTION, encode_projection(&self.projection)),
        ];
        if let Some(dict) = &self.dictionary {
            sections.push((TAG_DICTIONARY, encode_dictionary(dict)));
        }
        if let Some(p) = &self.progress {
            sections.push((TAG_PROGRESS, encode_progress(p)));
        }
        let mut w = Writer::default();
        w.buf.extend_from_slice(&MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(sections.len() as u32);
        for (tag, payload) in sections {
            w.buf.extend_from_slice(&tag);
            w.bytes(&payload);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = read_sections(bytes)?;
        let find = |tag: [u8; 4]| sections.iter().find(|(t, _)| *t == tag).map(|(_, p)| *p);
        let need = |tag: [u8; 4]| {
            find(tag).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "missing {} section",
                    String::from_utf8_lossy(&tag)
                ))
            })
        };
        let config = TrainConfig::from_text(&read_text_section(need(TAG_CONFIG)?, "config")?)
            .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
        let vocab = Vocabulary::from_text(&read_text_section(need(TAG_VOCAB)?, "vocabulary")?)
            .map_err(|e| Error::Checkpoint(format!("invalid vocabulary: {e}")))?;
        let encoder = decode_encoder(need(TAG_ENCODER)?)?;
        let store = decode_store(need(TAG_SENSES)?)?;
        let projection = decode_projection(need(TAG_PROJECTION)?)?;
        let dictionary = find(TAG_DICTIONARY).map(decode_dictionary).transpose()?;
        let progress = find(TAG_PROGRESS).map(decode_progress).transpose()?;

        let v = vocab.len();
        let d = config.hidden_dim;
        let consistent = encoder.vocab_size() == v
            && encoder.embed_dim() == config.embed_dim
            && encoder.hidden_dim() == d
            && store.vocab_size() == v
            && store.num_senses() == config.n_context
            && store.dim() == d
            && projection.dim() == d
            && projection.proj_dim() == config.cluster_proj_dim;
        if !consistent {
            return Err(Error::Checkpoint(
                "tensor shapes disagree with the stored config or vocabulary".into(),
            ));
        }
        if let Some(dict) = &dictionary {
            if dict.pairs().iter().any(|&(s, t)| s as usize >= v || t as usize >= v) {
                return Err(Error::Checkpoint("dictionary ids outside the vocabulary".into()));
            }
        }
        Ok(Self {
            config,
            vocab,
            dictionary,
            encoder,
            store,
            projection,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
