//! Pretraining loop: encoder, sense selection, losses, clipped SGD, and the
//! warm-up, projection and pruning schedules.

use crate::checkpoint::Checkpoint;
use crate::config::{Objective, TrainConfig};
use crate::corpus::{BatchStream, BilingualDictionary, StreamState, TokenId, TokenSequence, Vocabulary};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};
use crate::losses::{softmax_xent, weighted_sense_ce};
use crate::senses::{ProjectionState, SenseStore};
use crate::{derive_seed, SeedStream};

const EMA_DECAY: f64 = 0.98;

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub sense_loss: f64,
    /// `NaN` until a translation loss has been observed.
    pub tran_loss: f64,
    pub active_senses: usize,
    pub pruned_total: u64,
    pub projection_refreshes: u64,
}

impl MetricsRecord {
    /// `step loss sense_loss tran_loss active_senses`, tab separated.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.step, self.loss, self.sense_loss, self.tran_loss, self.active_senses
        )
    }
}

/// Running loss averages carried across checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsState {
    pub loss_ema: Option<f64>,
    pub sense_ema: Option<f64>,
    pub tran_ema: Option<f64>,
    pub pruned_total: u64,
}

fn ema(slot: &mut Option<f64>, value: f64) {
    *slot = Some(match *slot {
        Some(prev) => EMA_DECAY * prev + (1.0 - EMA_DECAY) * value,
        None => value,
    });
}

/// Progress needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainProgress {
    pub step: u64,
    pub warmup_done: bool,
    pub stream: StreamState,
    pub metrics: MetricsState,
}

/// Mean losses of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub sense_loss: f64,
    pub tran_loss: Option<f64>,
    pub targets: usize,
}

/// A center update, recorded when selection logging is on.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionEvent {
    pub token: TokenId,
    pub sense: usize,
    pub h: Vec<f64>,
}

struct Item {
    row: usize,
    pos: usize,
    target: TokenId,
    sense: usize,
    translation: Option<(TokenId, usize)>,
}

pub struct Trainer {
    config: TrainConfig,
    vocab: Vocabulary,
    dictionary: Option<BilingualDictionary>,
    encoder: EncoderState,
    store: SenseStore,
    projection: ProjectionState,
    stream: BatchStream,
    step: u64,
    warmup_done: bool,
    metrics: MetricsState,
    log: Vec<MetricsRecord>,
    selection_log: Option<Vec<SelectionEvent>>,
    grad_pred: Vec<f64>,
    grad_w: Vec<f64>,
    logits: Vec<f64>,
}

fn check_dictionary(dict: &BilingualDictionary, vocab: &Vocabulary) -> Result<()> {
    let v = vocab.len() as TokenId;
    if dict.pairs().iter().any(|&(s, t)| s >= v || t >= v) {
        return Err(Error::Dictionary("dictionary references ids outside the vocabulary".into()));
    }
    Ok(())
}

impl Trainer {
    /// Fresh trainer. `dictionary` enables the translation objective; it is
    /// symmetrized when the config asks for it.
    pub fn new(
        config: TrainConfig,
        vocab: Vocabulary,
        corpus: &[TokenSequence],
        dictionary: Option<BilingualDictionary>,
    ) -> Result<Self> {
        config.validate()?;
        let v = vocab.len();
        if let Some(bad) = corpus.iter().flat_map(|s| &s.ids).find(|&&id| id as usize >= v) {
            return Err(Error::Shape(format!("corpus token {bad} outside vocabulary")));
        }
        let dictionary = match dictionary {
            Some(d) => {
                check_dictionary(&d, &vocab)?;
                if config.objective == Objective::Baseline {
                    return Err(Error::Config(
                        "the baseline objective cannot use a dictionary".into(),
                    ));
                }
                Some(if config.symmetrize_dictionary { d.symmetrized() } else { d })
            }
            None => None,
        };
        let seed = config.seed;
        let encoder = EncoderState::new(
            v,
            config.embed_dim,
            config.hidden_dim,
            derive_seed(seed, SeedStream::Encoder),
        );
        let mut store = SenseStore::new(
            v,
            config.n_context,
            config.hidden_dim,
            config.center_init_std,
            config.sense_learning_rate,
            derive_seed(seed, SeedStream::Senses),
        )?;
        let projection = ProjectionState::new(
            config.hidden_dim,
            config.cluster_proj_dim,
            config.proj_update_interval,
            config.pca_sample,
            config.proj_offer_stride,
            derive_seed(seed, SeedStream::Projection),
        )?;
        let warmup_done = config.warmup_steps == 0;
        if !warmup_done && config.objective == Objective::Sense {
            store.enter_warmup();
        }
        let stream = BatchStream::new(corpus, config.stream_config())?;
        Ok(Self::assemble(
            config, vocab, dictionary, encoder, store, projection, stream, 0, warmup_done,
            MetricsState::default(),
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        vocab: Vocabulary,
        dictionary: Option<BilingualDictionary>,
        encoder: EncoderState,
        store: SenseStore,
        projection: ProjectionState,
        stream: BatchStream,
        step: u64,
        warmup_done: bool,
        metrics: MetricsState,
    ) -> Self {
        let grad_w = vec![0.0; store.sense_vectors().len()];
        Self {
            config,
            vocab,
            dictionary,
            encoder,
            store,
            projection,
            stream,
            step,
            warmup_done,
            metrics,
            log: Vec::new(),
            selection_log: None,
            grad_pred: Vec::new(),
            grad_w,
            logits: Vec::new(),
        }
    }

    /// Continues from a checkpoint over the same corpus.
    pub fn resume(checkpoint: Checkpoint, corpus: &[TokenSequence]) -> Result<Self> {
        let Checkpoint {
            config,
            vocab,
            dictionary,
            encoder,
            store,
            projection,
            progress,
        } = checkpoint;
        config.validate()?;
        let mut stream = BatchStream::new(corpus, config.stream_config())?;
        let progress = progress
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training progress".into()))?;
        stream.restore(&progress.stream)?;
        Ok(Self::assemble(
            config,
            vocab,
            dictionary,
            encoder,
            store,
            projection,
            stream,
            progress.step,
            progress.warmup_done,
            progress.metrics,
        ))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn encoder(&self) -> &EncoderState {
        &self.encoder
    }

    pub fn store(&self) -> &SenseStore {
        &self.store
    }

    pub fn projection(&self) -> &ProjectionState {
        &self.projection
    }

    pub fn dictionary(&self) -> Option<&BilingualDictionary> {
        self.dictionary.as_ref()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.stream.batches_per_epoch()
    }

    pub fn metrics_log(&self) -> &[MetricsRecord] {
        &self.log
    }

    /// Records every center update from now on.
    pub fn record_selections(&mut self) {
        self.selection_log.get_or_insert_with(Vec::new);
    }

    pub fn selection_log(&self) -> Option<&[SelectionEvent]> {
        self.selection_log.as_deref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            dictionary: self.dictionary.clone(),
            encoder: self.encoder.clone(),
            store: self.store.clone(),
            projection: self.projection.clone(),
            progress: Some(TrainProgress {
                step: self.step,
                warmup_done: self.warmup_done,
                stream: self.stream.state(),
                metrics: self.metrics.clone(),
            }),
        }
    }

    fn select(&mut self, batch: &crate::corpus::Batch, ctx: &crate::encoder::ContextBatch) -> Result<Vec<Item>> {
        let mut items = Vec::with_capacity(batch.num_targets());
        for row in 0..batch.rows {
            for pos in 0..batch.len {
                if !batch.mask_row(row)[pos] {
                    continue;
                }
                let target = batch.target_row(row)[pos];
                let (sense, translation) = match self.config.objective {
                    Objective::Baseline => (0, None),
                    Objective::Sense => {
                        let h = ctx.selection_rep(row, pos);
                        let sense = self.store.select_sense(&mut self.projection, target, h)?;
                        if let Some(log) = self.selection_log.as_mut() {
                            log.push(SelectionEvent {
                                token: target,
                                sense,
                                h: h.to_vec(),
                            });
                        }
                        let translation = match &self.dictionary {
                            Some(dict) if !dict.translations(target).is_empty() => Some(
                                self.store.select_translation_sense(
                                    &self.projection,
                                    dict.translations(target),
                                    h,
                                )?,
                            ),
                            _ => None,
                        };
                        (sense, translation)
                    }
                };
                items.push(Item {
                    row,
                    pos,
                    target,
                    sense,
                    translation,
                });
            }
        }
        Ok(items)
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.stream.next_batch();
        let ctx = self.encoder.encode(&batch)?;
        let items = self.select(&batch, &ctx)?;
        let d = self.config.hidden_dim;

        let mut report = StepReport {
            step: self.step + 1,
            loss: 0.0,
            sense_loss: 0.0,
            tran_loss: None,
            targets: items.len(),
        };

        if !items.is_empty() {
            let scale = 1.0 / items.len() as f64;
            self.grad_pred.clear();
            self.grad_pred.resize(batch.rows * batch.len * d, 0.0);
            self.grad_w.iter_mut().for_each(|g| *g = 0.0);

            let mut loss_sum = 0.0;
            let mut sense_sum = 0.0;
            let mut tran_sum = 0.0;
            let mut tran_n = 0usize;
            for item in &items {
                let h = ctx.prediction_rep(item.row, item.pos);
                let off = (item.row * batch.len + item.pos) * d;
                let gh = &mut self.grad_pred[off..off + d];
                let grad_w = &mut self.grad_w;
                let mut sink = |slot: u32, c: f64| {
                    let i = slot as usize * d;
                    axpy(c, h, &mut grad_w[i..i + d]);
                };
                match self.config.objective {
                    Objective::Baseline => {
                        let vectors = self.store.sense_vectors();
                        let t = item.target as usize;
                        let eval = softmax_xent(
                            h,
                            self.store.vocab_size(),
                            |j| &vectors[j * d..(j + 1) * d],
                            &[(t, 1.0)],
                            scale,
                            gh,
                            |j, c| sink(j as u32, c),
                            &mut self.logits,
                        );
                        let l = eval.log_z - dot(h, &vectors[t * d..(t + 1) * d]);
                        loss_sum += l;
                        sense_sum += l;
                    }
                    Objective::Sense => {
                        let mut targets = vec![(item.target, item.sense, 1.0)];
                        if let Some((j, s)) = item.translation {
                            targets[0].2 = 0.5;
                            targets.push((j, s, 0.5));
                        }
                        let (_, per) = weighted_sense_ce(
                            h,
                            &targets,
                            &self.store,
                            scale,
                            gh,
                            sink,
                            &mut self.logits,
                        )?;
                        match per.get(1) {
                            Some(&tl) => {
                                loss_sum += 0.5 * (per[0] + tl);
                                tran_sum += tl;
                                tran_n += 1;
                            }
                            None => loss_sum += per[0],
                        }
                        sense_sum += per[0];
                    }
                }
            }
            report.loss = loss_sum * scale;
            report.sense_loss = sense_sum * scale;
            report.tran_loss = (tran_n > 0).then(|| tran_sum / tran_n as f64);
            if !report.loss.is_finite() {
                return Err(Error::Diverged {
                    step: self.step + 1,
                    detail: format!(
                        "loss {} (sense {}) over {} targets",
                        report.loss, report.sense_loss, report.targets
                    ),
                });
            }

            let mut enc_grads = self.encoder.backward(&ctx, &self.grad_pred)?;
            let sq = enc_grads.norm_sq() + self.grad_w.iter().map(|g| g * g).sum::<f64>();
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    step: self.step + 1,
                    detail: format!("gradient norm {norm}"),
                });
            }
            if norm > self.config.all_clip_norm_val {
                let factor = self.config.all_clip_norm_val / norm;
                enc_grads.scale(factor);
                self.grad_w.iter_mut().for_each(|g| *g *= factor);
            }
            let lr = self.config.learning_rate;
            self.encoder.apply_sgd(&enc_grads, lr);
            axpy(-lr, &self.grad_w, self.store.sense_vectors_mut());

            ema(&mut self.metrics.loss_ema, report.loss);
            ema(&mut self.metrics.sense_ema, report.sense_loss);
            if let Some(t) = report.tran_loss {
                ema(&mut self.metrics.tran_ema, t);
            }
        }

        self.step += 1;
        self.after_step()?;
        Ok(report)
    }

    fn after_step(&mut self) -> Result<()> {
        if self.config.objective == Objective::Sense {
            if !self.warmup_done && self.step == self.config.warmup_steps {
                self.store.apply_warmup_transition(self.config.warmup_policy)?;
                self.warmup_done = true;
                log::info!("step {}: warm-up finished", self.step);
            }
            let e = self.config.prune_interval;
            if e > 0 && self.step % e == 0 {
                let removed = self
                    .store
                    .prune_senses(self.config.remove_less_freqent_contexts)?;
                self.metrics.pruned_total += removed.len() as u64;
                if !removed.is_empty() {
                    log::info!("step {}: pruned {} senses", self.step, removed.len());
                }
            }
        }
        if self.step % self.config.metrics_interval == 0 {
            self.log.push(self.current_metrics());
        }
        Ok(())
    }

    pub fn current_metrics(&self) -> MetricsRecord {
        MetricsRecord {
            step: self.step,
            loss: self.metrics.loss_ema.unwrap_or(f64::NAN),
            sense_loss: self.metrics.sense_ema.unwrap_or(f64::NAN),
            tran_loss: self.metrics.tran_ema.unwrap_or(f64::NAN),
            active_senses: self.store.active_count(),
            pruned_total: self.metrics.pruned_total,
            projection_refreshes: self.projection.refreshes(),
        }
    }

    /// Steps until `config.steps` is reached; returns the per-step reports.
    pub fn run_to_end(&mut self) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        while self.step < self.config.steps {
            reports.push(self.step()?);
        }
        Ok(reports)
    }
}

/// Trains from scratch and returns the final checkpoint with the metrics log.
pub fn train(
    config: TrainConfig,
    vocab: Vocabulary,
    corpus: &[TokenSequence],
    dictionary: Option<BilingualDictionary>,
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(config, vocab, corpus, dictionary)?;
    trainer.run_to_end()?;
    Ok((trainer.checkpoint(), trainer.metrics_log().to_vec()))
}
