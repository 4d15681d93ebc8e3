//! Token embeddings and the bidirectional LSTM over them.
//!
//! Two embedding backends are supported: a word lookup table (optionally
//! trainable, row 0 reserved for unknown words) and a frozen store of
//! precomputed contextual vectors, one `n x d` block per sentence.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

const UNK_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `word` if absent; returns whether it was new.
    pub fn insert(&mut self, word: &str) -> bool {
        if self.index.contains_key(word) {
            return false;
        }
        self.index.insert(word.to_string(), self.words.len());
        self.words.push(word.to_string());
        true
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Table row for `word`; unknown words map to row 0.
    pub fn row(&self, word: &str) -> usize {
        self.index.get(word).map_or(0, |i| i + 1)
    }
}

impl FromIterator<String> for Vocab {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        let mut v = Vocab::new();
        for w in iter {
            v.insert(&w);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupEmbeddings {
    pub vocab: Vocab,
    /// `(|vocab| + 1) x dim`, row 0 is the UNK vector.
    pub table: Tensor,
    pub trainable: bool,
}

impl LookupEmbeddings {
    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Parses the text format: optional `V D` header line, then a word and
    /// `D` reals per line. `fallback_dim` applies when the file gives no
    /// dimension at all (an empty file).
    pub fn parse(text: &str, trainable: bool, seed: u64, fallback_dim: usize) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut vocab = Vocab::new();
        let mut rows: Vec<f64> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if i == 0 && fields.len() == 2 {
                if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    dim = Some(d);
                    continue;
                }
            }
            let d = *dim.get_or_insert(fields.len() - 1);
            if fields.len() != d + 1 || d == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "expected a word and {d} values, found {} fields",
                        fields.len()
                    ),
                });
            }
            let values = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: "embedding value is not a finite real".into(),
                })?;
            if vocab.insert(fields[0]) {
                rows.extend(values);
            }
        }
        let dim = match dim {
            Some(0) | None => fallback_dim,
            Some(d) => d,
        };
        Self::assemble(vocab, rows, dim, trainable, seed)
    }

    /// Random table (uniform in `[-0.1, 0.1]`) over the given words.
    pub fn random<'a>(
        words: impl IntoIterator<Item = &'a str>,
        dim: usize,
        trainable: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut vocab = Vocab::new();
        for w in words {
            vocab.insert(w);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_eed0_fe4b);
        let rows = (0..vocab.len() * dim)
            .map(|_| rng.gen_range(-UNK_RANGE..=UNK_RANGE))
            .collect();
        Self::assemble(vocab, rows, dim, trainable, seed)
    }

    fn assemble(
        vocab: Vocab,
        rows: Vec<f64>,
        dim: usize,
        trainable: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<f64> = (0..dim)
            .map(|_| rng.gen_range(-UNK_RANGE..=UNK_RANGE))
            .collect();
        values.extend(rows);
        let table = Tensor::matrix(vocab.len() + 1, dim, values)?;
        Ok(Self {
            vocab,
            table,
            trainable,
        })
    }
}

pub fn load_lookup_embeddings(
    path: impl AsRef<Path>,
    trainable: bool,
    seed: u64,
    fallback_dim: usize,
) -> Result<LookupEmbeddings> {
    LookupEmbeddings::parse(&fs::read_to_string(path)?, trainable, seed, fallback_dim)
}

/// Frozen per-sentence vectors, aligned with a corpus by ordinal.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualStore {
    blocks: Vec<Tensor>,
    dim: usize,
}

impl ContextualStore {
    pub fn parse(text: &str, corpus: &[Sentence]) -> Result<Self> {
        let mut blocks: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut current: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                if !current.is_empty() {
                    blocks.push(std::mem::take(&mut current));
                }
                continue;
            }
            let ordinal = blocks.len();
            let row = line
                .split_whitespace()
                .map(|f| f.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Alignment {
                    ordinal,
                    msg: "embedding value is not a finite real".into(),
                })?;
            current.push(row);
        }
        if !current.is_empty() {
            blocks.push(current);
        }
        if blocks.len() != corpus.len() {
            return Err(Error::Alignment {
                ordinal: blocks.len().min(corpus.len()),
                msg: format!(
                    "contextual file has {} blocks but the corpus has {} sentences",
                    blocks.len(),
                    corpus.len()
                ),
            });
        }
        let dim = blocks.first().map_or(0, |b| b[0].len());
        let mut tensors = Vec::with_capacity(blocks.len());
        for (ordinal, (block, sentence)) in blocks.into_iter().zip(corpus).enumerate() {
            if block.len() != sentence.len() {
                return Err(Error::Alignment {
                    ordinal,
                    msg: format!(
                        "block has {} rows but the sentence has {} tokens",
                        block.len(),
                        sentence.len()
                    ),
                });
            }
            if dim == 0 || block.iter().any(|r| r.len() != dim) {
                return Err(Error::Alignment {
                    ordinal,
                    msg: format!("rows must all have {dim} values"),
                });
            }
            let rows = block.len();
            tensors.push(Tensor::matrix(rows, dim, block.concat())?);
        }
        Ok(Self {
            blocks: tensors,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, ordinal: usize) -> Option<&Tensor> {
        self.blocks.get(ordinal)
    }
}

pub fn load_contextual_embeddings(
    path: impl AsRef<Path>,
    corpus: &[Sentence],
) -> Result<ContextualStore> {
    ContextualStore::parse(&fs::read_to_string(path)?, corpus)
}

/// The model-side view of the embedding backend.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingProvider {
    /// Lookup table stored as parameter `table` (trainable or frozen).
    Lookup { vocab: Vocab, table: ParamId },
    /// Vectors come from a [`ContextualStore`] supplied per corpus.
    Contextual { dim: usize },
}

impl EmbeddingProvider {
    pub fn dim(&self, params: &ParamSet) -> usize {
        match self {
            EmbeddingProvider::Lookup { table, .. } => params.get(*table).cols(),
            EmbeddingProvider::Contextual { dim } => *dim,
        }
    }

    /// Registers a lookup table in `params`.
    pub fn register_lookup(params: &mut ParamSet, lookup: LookupEmbeddings) -> Self {
        let LookupEmbeddings {
            vocab,
            mut table,
            trainable,
        } = lookup;
        table.requires_grad = trainable;
        let table = params.add("embedding.table", table);
        EmbeddingProvider::Lookup { vocab, table }
    }
}

/// `n x d_e` matrix of token embeddings for sentence `ordinal`.
pub fn encode(
    tape: &mut Tape,
    params: &ParamSet,
    provider: &EmbeddingProvider,
    sentence: &Sentence,
    ordinal: usize,
    contextual: Option<&ContextualStore>,
) -> Result<Var> {
    match provider {
        EmbeddingProvider::Lookup { vocab, table } => {
            let rows: Vec<usize> = sentence.tokens.iter().map(|w| vocab.row(w)).collect();
            let table = tape.param(params, *table);
            tape.gather_rows(table, &rows)
        }
        EmbeddingProvider::Contextual { dim } => {
            let store = contextual.ok_or_else(|| Error::Alignment {
                ordinal,
                msg: "no contextual embeddings supplied for this corpus".into(),
            })?;
            let block = store.block(ordinal).ok_or_else(|| Error::Alignment {
                ordinal,
                msg: "contextual store has no block for this sentence".into(),
            })?;
            if block.rows() != sentence.len() || block.cols() != *dim {
                return Err(Error::Alignment {
                    ordinal,
                    msg: format!(
                        "block is {}x{} but the sentence needs {}x{}",
                        block.rows(),
                        block.cols(),
                        sentence.len(),
                        dim
                    ),
                });
            }
            Ok(tape.constant(block.clone()))
        }
    }
}

/// Weights of one LSTM direction, gates packed as `[input, forget, cell, output]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmDirection {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstmParams {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BiLstmParams {
    /// Weights uniform in `[-1/sqrt(hidden), 1/sqrt(hidden)]`, forget-gate
    /// bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut direction = |name: &str, rng: &mut R| -> Result<LstmDirection> {
            let w_input = params.add(
                format!("{prefix}.{name}.w_input"),
                Tensor::uniform(vec![input_dim, 4 * hidden], k, rng)?.with_grad(),
            );
            let w_hidden = params.add(
                format!("{prefix}.{name}.w_hidden"),
                Tensor::uniform(vec![hidden, 4 * hidden], k, rng)?.with_grad(),
            );
            let mut b = vec![0.0; 4 * hidden];
            b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
            let bias = params.add(
                format!("{prefix}.{name}.bias"),
                Tensor::matrix(1, 4 * hidden, b)?.with_grad(),
            );
            Ok(LstmDirection {
                w_input,
                w_hidden,
                bias,
            })
        };
        let forward = direction("fwd", rng)?;
        let backward = direction("bwd", rng)?;
        Ok(Self {
            forward,
            backward,
            input_dim,
            hidden,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// The same network with the two directions exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            forward: self.backward,
            backward: self.forward,
            ..*self
        }
    }
}

/// Runs one direction over `order`, returning the hidden state per position
/// (indexed by position, not by step).
fn run_direction(
    tape: &mut Tape,
    params: &ParamSet,
    projected: Var,
    dir: &LstmDirection,
    hidden: usize,
    order: impl Iterator<Item = usize>,
    n: usize,
) -> Result<Vec<Var>> {
    let w_hidden = tape.param(params, dir.w_hidden);
    let zeros = Tensor::zeros(vec![1, hidden])?;
    let mut h = tape.constant(zeros.clone());
    let mut c = tape.constant(zeros);
    let mut outputs = vec![None; n];
    for pos in order {
        let x = tape.select_row(projected, pos)?;
        let rec = tape.matmul(h, w_hidden)?;
        let z = tape.add(x, rec)?;
        let i_pre = tape.slice_cols(z, 0, hidden)?;
        let f_pre = tape.slice_cols(z, hidden, hidden)?;
        let g_pre = tape.slice_cols(z, 2 * hidden, hidden)?;
        let o_pre = tape.slice_cols(z, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let g = tape.tanh(g_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let squashed = tape.tanh(c)?;
        h = tape.mul(o, squashed)?;
        outputs[pos] = Some(h);
    }
    Ok(outputs
        .into_iter()
        .map(|v| v.expect("every position visited"))
        .collect())
}

/// `n x 2*hidden` output; row `i` is `[forward_i ; backward_i]`, both
/// directions starting from zero state.
pub fn bilstm(
    tape: &mut Tape,
    params: &ParamSet,
    embeddings: Var,
    lstm: &BiLstmParams,
) -> Result<Var> {
    let input = tape.value(embeddings);
    let n = input.rows();
    if input.cols() != lstm.input_dim {
        return Err(Error::shape(
            "bilstm",
            input.shape(),
            &[lstm.input_dim, 4 * lstm.hidden],
        ));
    }
    let mut directional = Vec::with_capacity(2);
    for (dir, reverse) in [(&lstm.forward, false), (&lstm.backward, true)] {
        let w_input = tape.param(params, dir.w_input);
        let bias = tape.param(params, dir.bias);
        let xw = tape.matmul(embeddings, w_input)?;
        let projected = tape.add(xw, bias)?;
        let states = if reverse {
            run_direction(tape, params, projected, dir, lstm.hidden, (0..n).rev(), n)?
        } else {
            run_direction(tape, params, projected, dir, lstm.hidden, 0..n, n)?
        };
        directional.push(tape.concat_rows(&states)?);
    }
    tape.concat_cols(&directional)
}
