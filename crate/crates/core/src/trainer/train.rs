use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::NONE_LABEL;
use crate::error::{Error, Result};
use crate::tensor::Tape;

use super::adam::Adam;
use super::config::TrainConfig;
use super::eval::{evaluate, EvalReport};
use super::model::{labels_from_corpus, Dataset, EmbeddingInit, GatedGcnModel, SentenceEncoding};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: EvalReport,
}

impl EpochRecord {
    /// `epoch\tloss\tP\tR\tF`
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}",
            self.epoch, self.train_loss, self.dev.precision, self.dev.recall, self.dev.f1
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev F1 (earliest on ties).
    pub model: GatedGcnModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| r.log_line() + "\n").collect()
    }
}

/// Candidates as `(sentence ordinal, 1-based token, gold class index)`.
/// Gold labels missing from the model's label set are an error here.
pub fn training_candidates(
    model: &GatedGcnModel,
    data: &Dataset,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::with_capacity(data.candidate_count());
    for (ordinal, s) in data.sentences.iter().enumerate() {
        for (i, label) in s.gold_labels.iter().enumerate() {
            let y = model.label_index(label).ok_or_else(|| {
                Error::invalid(
                    "training_candidates",
                    format!("label `{label}` of sentence {ordinal} is not in the label set"),
                )
            })?;
            out.push((ordinal, i + 1, y));
        }
    }
    Ok(out)
}

/// Mean combined loss of `batch` on a fresh tape, after backward. Returns
/// the tape so callers can read gradients or intermediate values.
pub fn batch_loss(
    model: &GatedGcnModel,
    data: &Dataset,
    batch: &[(usize, usize, usize)],
) -> Result<(Tape, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch_loss", "empty batch"));
    }
    let mut tape = Tape::new();
    let mut encodings: Vec<Option<SentenceEncoding>> = vec![None; data.len()];
    let mut totals = Vec::with_capacity(batch.len());
    for &(ordinal, t, y) in batch {
        if encodings[ordinal].is_none() {
            encodings[ordinal] = Some(model.encode_sentence(&mut tape, data, ordinal)?);
        }
        let enc = encodings[ordinal].as_ref().expect("encoded above");
        let out = model.forward_candidate(&mut tape, &data.sentences[ordinal], enc, t, Some(y))?;
        totals.push(out.losses.expect("gold given").total);
    }
    let stacked = tape.concat_rows(&totals)?;
    let sum = tape.sum_all(stacked)?;
    let mean = tape.scale(sum, 1.0 / batch.len() as f64)?;
    tape.backward(mean)?;
    let value = tape.scalar(mean);
    Ok((tape, value))
}

/// Builds a model for the training corpus and trains it.
pub fn train(
    cfg: &TrainConfig,
    embedding: EmbeddingInit,
    train_data: &Dataset,
    dev: &Dataset,
) -> Result<TrainOutcome> {
    train_with(cfg, embedding, train_data, dev, |_| {})
}

pub fn train_with(
    cfg: &TrainConfig,
    embedding: EmbeddingInit,
    train_data: &Dataset,
    dev: &Dataset,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_data.is_empty() {
        return Err(Error::invalid("train", "training corpus is empty"));
    }
    let labels = labels_from_corpus(&train_data.sentences)?;
    let model = GatedGcnModel::new(cfg.clone(), labels, embedding)?;
    train_model(model, train_data, dev, on_epoch)
}

/// Mini-batch Adam over shuffled candidates. `None` candidates are kept
/// with probability `negative_keep_prob`, redrawn every epoch.
pub fn train_model(
    mut model: GatedGcnModel,
    train_data: &Dataset,
    dev: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_data.is_empty() {
        return Err(Error::invalid("train", "training corpus is empty"));
    }
    model.check_dataset(train_data)?;
    model.check_dataset(dev)?;
    let cfg = model.config.clone();
    let all = training_candidates(&model, train_data)?;
    let none = model.label_index(NONE_LABEL);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::tensor::ParamSet)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<(usize, usize, usize)> = if cfg.negative_keep_prob < 1.0 {
            all.iter()
                .copied()
                .filter(|&(_, _, y)| Some(y) != none || rng.gen::<f64>() < cfg.negative_keep_prob)
                .collect()
        } else {
            all.clone()
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (tape, loss) = batch_loss(&model, train_data, batch)?;
            tape.collect_param_grads(&mut model.params)?;
            adam.step(&mut model.params)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = if order.is_empty() {
            0.0
        } else {
            loss_sum / order.len() as f64
        };
        let report = evaluate(&model, dev)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            dev: report,
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(f, _, _)| record.dev.f1 > *f) {
            best = Some((record.dev.f1, epoch, model.params.clone()));
        }
        log.push(record);
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    model.params.zero_grads();
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
    })
}
