use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consistency::{isc_loss, model_scores, ConsistencyParams, ModelScores};
use crate::corpus::{build_graph, graph_distances, Sentence, SentenceGraph, NONE_LABEL};
use crate::encoder::{
    bilstm, encode, BiLstmParams, ContextualStore, EmbeddingProvider, LookupEmbeddings,
};
use crate::error::{Error, Result};
use crate::gated_gcn::{apply_gates, compute_gates, gate_diversity_loss, gcn_stack, GcnParams};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

use super::config::{GateSource, TrainConfig};

/// Two-layer feed-forward head: ReLU hidden layer, then `C` logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierParams {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        input_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(
                "ClassifierParams::init",
                format!("need at least 2 classes, got {classes}"),
            ));
        }
        let k1 = 1.0 / (input_dim as f64).sqrt();
        let k2 = 1.0 / (hidden as f64).sqrt();
        let hidden_w = params.add(
            "classifier.hidden.weight",
            Tensor::uniform(vec![input_dim, hidden], k1, rng)?.with_grad(),
        );
        let hidden_b = params.add(
            "classifier.hidden.bias",
            Tensor::zeros(vec![1, hidden])?.with_grad(),
        );
        let out_w = params.add(
            "classifier.out.weight",
            Tensor::uniform(vec![hidden, classes], k2, rng)?.with_grad(),
        );
        let out_b = params.add(
            "classifier.out.bias",
            Tensor::zeros(vec![1, classes])?.with_grad(),
        );
        Ok(Self {
            hidden_w,
            hidden_b,
            out_w,
            out_b,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.hidden_w, self.hidden_b, self.out_w, self.out_b]
    }
}

/// `V_t = [e_t, m^L_t, maxpool_i m^L_i]`; `t0` is 0-based.
pub fn build_feature(tape: &mut Tape, e_t: Var, filtered_last: Var, t0: usize) -> Result<Var> {
    let m_t = tape.select_row(filtered_last, t0)?;
    let pooled = tape.max_pool_rows(filtered_last)?;
    tape.concat_cols(&[e_t, m_t, pooled])
}

pub fn classifier_logits(
    tape: &mut Tape,
    params: &ParamSet,
    feature: Var,
    cls: &ClassifierParams,
) -> Result<Var> {
    let w1 = tape.param(params, cls.hidden_w);
    let b1 = tape.param(params, cls.hidden_b);
    let w2 = tape.param(params, cls.out_w);
    let b2 = tape.param(params, cls.out_b);
    let h = tape.matmul(feature, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h)?;
    let z = tape.matmul(h, w2)?;
    tape.add(z, b2)
}

/// Class distribution for one feature row.
pub fn classify(
    tape: &mut Tape,
    params: &ParamSet,
    feature: Var,
    cls: &ClassifierParams,
) -> Result<Var> {
    let z = classifier_logits(tape, params, feature, cls)?;
    tape.softmax(z)
}

/// `ce + alpha * gd + beta * isc`; absent terms are not added at all.
pub fn combined_loss(
    tape: &mut Tape,
    ce: Var,
    gd: Option<Var>,
    isc: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut total = ce;
    if let Some(gd) = gd {
        let w = tape.scale(gd, alpha)?;
        total = tape.add(total, w)?;
    }
    if let Some(isc) = isc {
        let w = tape.scale(isc, beta)?;
        total = tape.add(total, w)?;
    }
    Ok(total)
}

/// Label vocabulary with `None` at index 0 and the rest sorted.
pub fn labels_from_corpus(sentences: &[Sentence]) -> Result<Vec<String>> {
    let mut others: Vec<&str> = sentences
        .iter()
        .flat_map(|s| s.gold_labels.iter())
        .map(String::as_str)
        .filter(|l| *l != NONE_LABEL)
        .collect();
    others.sort_unstable();
    others.dedup();
    if others.is_empty() {
        return Err(Error::invalid(
            "labels_from_corpus",
            "training corpus has no event triggers",
        ));
    }
    Ok(std::iter::once(NONE_LABEL)
        .chain(others)
        .map(str::to_string)
        .collect())
}

/// How the embedding layer is initialized.
#[derive(Debug, Clone)]
pub enum EmbeddingInit {
    Lookup(LookupEmbeddings),
    Contextual { dim: usize },
}

/// A corpus with its graphs and, for contextual models, its vectors.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub graphs: Vec<SentenceGraph>,
    pub contextual: Option<ContextualStore>,
}

impl Dataset {
    pub fn new(sentences: Vec<Sentence>, contextual: Option<ContextualStore>) -> Self {
        let graphs = sentences.iter().map(build_graph).collect();
        Self {
            sentences,
            graphs,
            contextual,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn candidate_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}

/// Per-sentence tape values shared by all candidates of that sentence.
#[derive(Debug, Clone)]
pub struct SentenceEncoding {
    pub embeddings: Var,
    pub h0: Var,
    /// `h^1..h^L`.
    pub layers: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    pub gd: Option<Var>,
    pub isc: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone)]
pub struct CandidateOutput {
    pub feature: Var,
    pub logits: Var,
    pub probs: Var,
    pub gates: Vec<Var>,
    /// `m^1..m^L`; the raw layers when gates are disabled.
    pub filtered: Vec<Var>,
    pub scores: Option<ModelScores>,
    pub losses: Option<LossVars>,
}

/// Scalar values of the loss terms for one candidate or batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub gd: Option<f64>,
    pub isc: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, l: &LossVars) -> Self {
        Self {
            ce: tape.scalar(l.ce),
            gd: l.gd.map(|v| tape.scalar(v)),
            isc: l.isc.map(|v| tape.scalar(v)),
            total: tape.scalar(l.total),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatedGcnModel {
    pub config: TrainConfig,
    pub labels: Vec<String>,
    pub params: ParamSet,
    pub provider: EmbeddingProvider,
    pub lstm: BiLstmParams,
    pub gcn: GcnParams,
    pub consistency: ConsistencyParams,
    pub classifier: ClassifierParams,
}

impl GatedGcnModel {
    /// Registers all parameters in a fixed order, drawing from a ChaCha8
    /// stream seeded with `config.seed`.
    pub fn new(config: TrainConfig, labels: Vec<String>, embedding: EmbeddingInit) -> Result<Self> {
        config.validate()?;
        if labels.first().map(String::as_str) != Some(NONE_LABEL) {
            return Err(Error::invalid(
                "GatedGcnModel::new",
                "label set must start with `None`",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let provider = match embedding {
            EmbeddingInit::Lookup(lookup) => {
                EmbeddingProvider::register_lookup(&mut params, lookup)
            }
            EmbeddingInit::Contextual { dim } => EmbeddingProvider::Contextual { dim },
        };
        let embed_dim = provider.dim(&params);
        let lstm =
            BiLstmParams::init(&mut params, "lstm", embed_dim, config.lstm_hidden, &mut rng)?;
        let gate_input = match config.gate_source {
            GateSource::Embedding => embed_dim,
            GateSource::Hidden => lstm.output_dim(),
        };
        let gcn = GcnParams::init(
            &mut params,
            config.gcn_layers,
            lstm.output_dim(),
            gate_input,
            config.gcn_dim,
            &mut rng,
        )?;
        let feature_dim = embed_dim + 2 * config.gcn_dim;
        let consistency = ConsistencyParams::init(
            &mut params,
            feature_dim,
            config.gcn_dim,
            config.score_dim,
            &mut rng,
        )?;
        let classifier = ClassifierParams::init(
            &mut params,
            feature_dim,
            config.ffn_hidden,
            labels.len(),
            &mut rng,
        )?;
        Ok(Self {
            config,
            labels,
            params,
            provider,
            lstm,
            gcn,
            consistency,
            classifier,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn embed_dim(&self) -> usize {
        self.provider.dim(&self.params)
    }

    pub fn feature_dim(&self) -> usize {
        self.embed_dim() + 2 * self.config.gcn_dim
    }

    /// Embeddings, BiLSTM and the GCN stack for one sentence.
    pub fn encode_sentence(
        &self,
        tape: &mut Tape,
        data: &Dataset,
        ordinal: usize,
    ) -> Result<SentenceEncoding> {
        let sentence = data.sentences.get(ordinal).ok_or_else(|| {
            Error::invalid(
                "encode_sentence",
                format!("sentence {ordinal} out of range"),
            )
        })?;
        let embeddings = encode(
            tape,
            &self.params,
            &self.provider,
            sentence,
            ordinal,
            data.contextual.as_ref(),
        )?;
        let h0 = bilstm(tape, &self.params, embeddings, &self.lstm)?;
        let layers = gcn_stack(tape, &self.params, h0, &data.graphs[ordinal], &self.gcn)?;
        Ok(SentenceEncoding {
            embeddings,
            h0,
            layers,
        })
    }

    /// Forward pass for the 1-based candidate `t`. With `gold` set, the loss
    /// terms enabled by the config are added to the tape.
    pub fn forward_candidate(
        &self,
        tape: &mut Tape,
        sentence: &Sentence,
        enc: &SentenceEncoding,
        t: usize,
        gold: Option<usize>,
    ) -> Result<CandidateOutput> {
        if t == 0 || t > sentence.len() {
            return Err(Error::invalid(
                "forward_candidate",
                format!("trigger index {t} outside 1..={}", sentence.len()),
            ));
        }
        let cfg = &self.config;
        let t0 = t - 1;
        let e_t = tape.select_row(enc.embeddings, t0)?;
        let (gates, filtered, pooled) = if cfg.use_gates {
            let source = match cfg.gate_source {
                GateSource::Embedding => e_t,
                GateSource::Hidden => tape.select_row(enc.h0, t0)?,
            };
            let gates = compute_gates(tape, &self.params, source, &self.gcn)?;
            let gated = apply_gates(tape, &enc.layers, &gates)?;
            (gates, gated.filtered, Some(gated.pooled))
        } else {
            (Vec::new(), enc.layers.clone(), None)
        };
        let last = *filtered.last().expect("at least one GCN layer");
        let feature = build_feature(tape, e_t, last, t0)?;
        let logits = classifier_logits(tape, &self.params, feature, &self.classifier)?;
        let probs = tape.softmax(logits)?;
        let scores = if cfg.use_consistency {
            Some(model_scores(
                tape,
                &self.params,
                feature,
                last,
                &self.consistency,
            )?)
        } else {
            None
        };
        let losses = match gold {
            None => None,
            Some(y) => {
                let ce = tape.cross_entropy(logits, y)?;
                let gd = match (&pooled, cfg.use_diversity) {
                    (Some(pooled), true) => {
                        Some(gate_diversity_loss(tape, pooled, cfg.gd_pair_mean)?)
                    }
                    _ => None,
                };
                let isc = match scores {
                    Some(s) => {
                        let p = graph_distances(sentence, t)?.p_dist;
                        Some(isc_loss(tape, &p, s.q_dist, cfg.isc_form)?)
                    }
                    None => None,
                };
                let total = combined_loss(tape, ce, gd, isc, cfg.alpha, cfg.beta)?;
                Some(LossVars { ce, gd, isc, total })
            }
        };
        Ok(CandidateOutput {
            feature,
            logits,
            probs,
            gates,
            filtered,
            scores,
            losses,
        })
    }

    /// Normalized model scores `Q` for candidate `t`, computed whether or
    /// not consistency is enabled.
    pub fn importance_scores(&self, data: &Dataset, ordinal: usize, t: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let enc = self.encode_sentence(&mut tape, data, ordinal)?;
        let sentence = &data.sentences[ordinal];
        let out = self.forward_candidate(&mut tape, sentence, &enc, t, None)?;
        let scores = match out.scores {
            Some(s) => s,
            None => model_scores(
                &mut tape,
                &self.params,
                out.feature,
                *out.filtered.last().expect("at least one GCN layer"),
                &self.consistency,
            )?,
        };
        Ok(tape.value(scores.q_dist).values().to_vec())
    }

    /// Class distributions for every token of sentence `ordinal`.
    pub fn predict_sentence(&self, data: &Dataset, ordinal: usize) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let enc = self.encode_sentence(&mut tape, data, ordinal)?;
        let sentence = &data.sentences[ordinal];
        (1..=sentence.len())
            .map(|t| {
                let out = self.forward_candidate(&mut tape, sentence, &enc, t, None)?;
                Ok(tape.value(out.probs).values().to_vec())
            })
            .collect()
    }

    /// Checks that the dataset fits the embedding backend.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if let EmbeddingProvider::Contextual { dim } = self.provider {
            let store = data.contextual.as_ref().ok_or_else(|| {
                Error::Config("contextual model needs contextual vectors for every corpus".into())
            })?;
            if store.dim() != dim || store.len() != data.len() {
                return Err(Error::Config(format!(
                    "contextual vectors are {}-dimensional for {} sentences; model expects {dim} for {}",
                    store.dim(),
                    store.len(),
                    data.len()
                )));
            }
        }
        Ok(())
    }
}
