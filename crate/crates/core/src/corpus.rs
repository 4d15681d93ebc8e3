//! Event-labelled dependency corpora.
//!
//! The file format is one token per line with five tab-separated columns
//! (`index form head deprel label`), a blank line between sentences and
//! `#` comment lines. Label `O` is read as `None`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::softmax_values;

pub const NONE_LABEL: &str = "None";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    /// 0 marks the root, otherwise the 1-based index of the head.
    pub heads: Vec<usize>,
    pub deprels: Vec<String>,
    pub gold_labels: Vec<String>,
}

impl Sentence {
    /// Validates lengths and the tree shape of `heads`.
    pub fn new(
        tokens: Vec<String>,
        heads: Vec<usize>,
        deprels: Vec<String>,
        gold_labels: Vec<String>,
    ) -> Result<Self> {
        let s = Self {
            tokens,
            heads,
            deprels,
            gold_labels,
        };
        s.validate()
            .map_err(|msg| Error::invalid("sentence", msg))?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        if n == 0 {
            return Err("sentence has no tokens".into());
        }
        if self.heads.len() != n || self.deprels.len() != n || self.gold_labels.len() != n {
            return Err("token, head, relation and label columns differ in length".into());
        }
        check_tree(&self.heads)
    }

    pub fn trigger_count(&self) -> usize {
        self.gold_labels.iter().filter(|l| *l != NONE_LABEL).count()
    }
}

fn check_tree(heads: &[usize]) -> std::result::Result<(), String> {
    let n = heads.len();
    if let Some((i, h)) = heads.iter().enumerate().find(|(_, &h)| h > n) {
        return Err(format!(
            "token {} has head {h} beyond sentence length {n}",
            i + 1
        ));
    }
    let roots = heads.iter().filter(|&&h| h == 0).count();
    if roots != 1 {
        return Err(format!("expected exactly one root, found {roots}"));
    }
    for start in 0..n {
        let mut cur = start + 1;
        let mut steps = 0;
        while heads[cur - 1] != 0 {
            cur = heads[cur - 1];
            steps += 1;
            if steps > n {
                return Err(format!("token {} is on a head cycle", start + 1));
            }
        }
    }
    Ok(())
}

/// Parses a whole corpus. Errors carry the 1-based line number.
pub fn parse_corpus(text: &str) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.starts_with('#') {
            continue;
        }
        if line.trim().is_empty() {
            if !block.is_empty() {
                sentences.push(parse_block(&block)?);
                block.clear();
            }
            continue;
        }
        block.push((line_no, line));
    }
    if !block.is_empty() {
        sentences.push(parse_block(&block)?);
    }
    Ok(sentences)
}

fn parse_block(lines: &[(usize, &str)]) -> Result<Sentence> {
    let mut tokens = Vec::with_capacity(lines.len());
    let mut heads = Vec::with_capacity(lines.len());
    let mut deprels = Vec::with_capacity(lines.len());
    let mut labels = Vec::with_capacity(lines.len());
    for (pos, &(line, text)) in lines.iter().enumerate() {
        let cols: Vec<&str> = text.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 tab-separated columns, found {}", cols.len()),
            });
        }
        let index: usize = cols[0].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("token index `{}` is not an integer", cols[0]),
        })?;
        if index != pos + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected token index {}, found {index}", pos + 1),
            });
        }
        let head: usize = cols[2].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("head `{}` is not a non-negative integer", cols[2]),
        })?;
        let label = match cols[4].trim() {
            "O" | "" => NONE_LABEL.to_string(),
            other => other.to_string(),
        };
        tokens.push(cols[1].to_string());
        heads.push(head);
        deprels.push(cols[3].to_string());
        labels.push(label);
    }
    check_tree(&heads).map_err(|msg| Error::Parse {
        line: lines[0].0,
        msg: format!("sentence starting here is not a dependency tree: {msg}"),
    })?;
    Ok(Sentence {
        tokens,
        heads,
        deprels,
        gold_labels: labels,
    })
}

pub fn serialize_corpus(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for (k, s) in sentences.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        for i in 0..s.len() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                i + 1,
                s.tokens[i],
                s.heads[i],
                s.deprels[i],
                s.gold_labels[i]
            );
        }
    }
    out
}

/// Dependency edges plus their reverses and a self-loop per node, as
/// 0-based neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceGraph {
    neighbors: Arc<Vec<Vec<usize>>>,
}

impl SentenceGraph {
    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    /// 0-based neighbors of 0-based node `i`, sorted, self included.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn neighbor_lists(&self) -> Arc<Vec<Vec<usize>>> {
        Arc::clone(&self.neighbors)
    }
}

pub fn build_graph(s: &Sentence) -> SentenceGraph {
    let n = s.len();
    let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for (dep, &head) in s.heads.iter().enumerate() {
        if head != 0 {
            neighbors[dep].push(head - 1);
            neighbors[head - 1].push(dep);
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }
    SentenceGraph {
        neighbors: Arc::new(neighbors),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphScores {
    pub distances: Vec<usize>,
    pub raw_p: Vec<f64>,
    pub p_dist: Vec<f64>,
}

/// Tree distance from every token to the 1-based trigger `t`, with the
/// softmax of the negated distances.
pub fn graph_distances(s: &Sentence, t: usize) -> Result<GraphScores> {
    let n = s.len();
    if t == 0 || t > n {
        return Err(Error::invalid(
            "graph_distances",
            format!("trigger index {t} outside 1..={n}"),
        ));
    }
    let graph = build_graph(s);
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::from([t - 1]);
    dist[t - 1] = 0;
    while let Some(u) = queue.pop_front() {
        for &v in graph.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let raw_p: Vec<f64> = dist.iter().map(|&d| -(d as f64)).collect();
    let p_dist = softmax_values(&raw_p);
    Ok(GraphScores {
        distances: dist,
        raw_p,
        p_dist,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub sentence: usize,
    /// 1-based token position.
    pub t: usize,
    pub gold: String,
}

/// Every token of sentence `ordinal` becomes a candidate.
pub fn make_candidates(s: &Sentence, ordinal: usize) -> Vec<Candidate> {
    s.gold_labels
        .iter()
        .enumerate()
        .map(|(i, gold)| Candidate {
            sentence: ordinal,
            t: i + 1,
            gold: gold.clone(),
        })
        .collect()
}
