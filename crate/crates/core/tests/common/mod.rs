#![allow(dead_code)]

use gatedgcn::corpus::{parse_corpus, Sentence};
use gatedgcn::encoder::LookupEmbeddings;
use gatedgcn::trainer::{Dataset, EmbeddingInit, GatedGcnModel, TrainConfig};
use rand::Rng;

pub const SYNTHETIC: &str = include_str!("../../data/synthetic.tsv");
pub const TREES: &str = include_str!("../../data/trees.tsv");

/// Random rooted tree over `n` nodes as 1-based heads (0 = root).
pub fn random_heads<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (1..=n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut heads = vec![0; n];
    for k in 1..n {
        heads[order[k] - 1] = order[rng.gen_range(0..k)];
    }
    heads
}

pub fn random_sentence<R: Rng>(n: usize, rng: &mut R) -> Sentence {
    let heads = random_heads(n, rng);
    let tokens = (0..n)
        .map(|i| format!("w{}", rng.gen_range(0..5) + i))
        .collect();
    let deprels = (0..n).map(|_| "dep".to_string()).collect();
    let labels = (0..n)
        .map(|_| {
            if rng.gen_bool(0.2) {
                "Ev".to_string()
            } else {
                "None".to_string()
            }
        })
        .collect();
    Sentence::new(tokens, heads, deprels, labels).unwrap()
}

/// All-pairs shortest paths on the undirected tree, by Floyd-Warshall.
pub fn floyd_warshall(heads: &[usize]) -> Vec<Vec<usize>> {
    let n = heads.len();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for (i, &h) in heads.iter().enumerate() {
        if h != 0 {
            d[i][h - 1] = 1;
            d[h - 1][i] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// `ReLU(D^-1 A H W)` with `A` the adjacency plus self-loops, by dense loops.
pub fn dense_gcn(heads: &[usize], h: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = heads.len();
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for (i, &p) in heads.iter().enumerate() {
        if p != 0 {
            a[i][p - 1] = 1.0;
            a[p - 1][i] = 1.0;
        }
    }
    let din = h[0].len();
    let dout = w[0].len();
    let mut out = vec![vec![0.0; dout]; n];
    for i in 0..n {
        let deg: f64 = a[i].iter().sum();
        let mut avg = vec![0.0; din];
        for j in 0..n {
            for c in 0..din {
                avg[c] += a[i][j] * h[j][c];
            }
        }
        for c in 0..dout {
            let mut s = 0.0;
            for k in 0..din {
                s += avg[k] / deg * w[k][c];
            }
            out[i][c] = s.max(0.0);
        }
    }
    out
}

pub fn dataset(text: &str) -> Dataset {
    Dataset::new(parse_corpus(text).unwrap(), None)
}

/// Small widths so full-model tests run quickly.
pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        lstm_hidden: 3,
        gcn_dim: 4,
        score_dim: 3,
        ffn_hidden: 5,
        embed_dim: 4,
        ..Default::default()
    }
}

pub fn random_lookup(cfg: &TrainConfig, data: &Dataset) -> EmbeddingInit {
    let words = data
        .sentences
        .iter()
        .flat_map(|s| s.tokens.iter().map(String::as_str));
    EmbeddingInit::Lookup(LookupEmbeddings::random(words, cfg.embed_dim, true, cfg.seed).unwrap())
}

pub fn model_for(cfg: TrainConfig, data: &Dataset) -> GatedGcnModel {
    let labels = gatedgcn::trainer::labels_from_corpus(&data.sentences).unwrap();
    let emb = random_lookup(&cfg, data);
    GatedGcnModel::new(cfg, labels, emb).unwrap()
}

/// Settings for the desk-scale learning runs on the synthetic corpus.
pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        learning_rate: 5e-3,
        batch_size: 16,
        epochs: 200,
        lstm_hidden: 32,
        gcn_dim: 32,
        score_dim: 32,
        ffn_hidden: 32,
        embed_dim: 32,
        ..Default::default()
    }
}
