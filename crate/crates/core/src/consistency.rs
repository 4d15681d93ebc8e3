//! Model-based importance scores and the graph/model consistency loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsistencyParams {
    /// `W^v`, `feature_dim x score_dim`.
    pub w_feature: ParamId,
    /// `W^m`, `gcn_dim x score_dim`.
    pub w_filtered: ParamId,
    pub score_dim: usize,
}

impl ConsistencyParams {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        feature_dim: usize,
        gcn_dim: usize,
        score_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let kv = 1.0 / (feature_dim as f64).sqrt();
        let km = 1.0 / (gcn_dim as f64).sqrt();
        let w_feature = params.add(
            "consistency.w_feature",
            Tensor::uniform(vec![feature_dim, score_dim], kv, rng)?.with_grad(),
        );
        let w_filtered = params.add(
            "consistency.w_filtered",
            Tensor::uniform(vec![gcn_dim, score_dim], km, rng)?.with_grad(),
        );
        Ok(Self {
            w_feature,
            w_filtered,
            score_dim,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelScores {
    /// `1 x n` raw scores `q_i`.
    pub raw_q: Var,
    /// `1 x n` softmax of `raw_q`.
    pub q_dist: Var,
}

/// `q_i = sigmoid(V_t W^v) . sigmoid(m^L_i W^m)` and its softmax.
pub fn model_scores(
    tape: &mut Tape,
    params: &ParamSet,
    feature: Var,
    filtered_last: Var,
    cp: &ConsistencyParams,
) -> Result<ModelScores> {
    let wv = tape.param(params, cp.w_feature);
    let wm = tape.param(params, cp.w_filtered);
    let fv = tape.matmul(feature, wv)?;
    let fv = tape.sigmoid(fv)?;
    let fm = tape.matmul(filtered_last, wm)?;
    let fm = tape.sigmoid(fm)?;
    let fm_t = tape.transpose(fm)?;
    let raw_q = tape.matmul(fv, fm_t)?;
    let q_dist = tape.softmax(raw_q)?;
    Ok(ModelScores { raw_q, q_dist })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IscForm {
    /// `sum_i p_i log(p_i / q_i)`
    #[default]
    Kl,
    /// `-sum_i p_i (p_i / q_i)`
    Literal,
}

impl fmt::Display for IscForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IscForm::Kl => "kl",
            IscForm::Literal => "literal",
        })
    }
}

impl FromStr for IscForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(IscForm::Kl),
            "literal" => Ok(IscForm::Literal),
            other => Err(Error::Config(format!(
                "isc-form must be `kl` or `literal`, got `{other}`"
            ))),
        }
    }
}

const NORMALIZATION_TOL: f64 = 1e-4;

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(
            "isc_loss",
            format!("{name} is not a probability vector (sum {sum})"),
        ));
    }
    Ok(())
}

/// Consistency loss between the fixed graph distribution `p_dist` and the
/// model distribution `q_dist`.
pub fn isc_loss(tape: &mut Tape, p_dist: &[f64], q_dist: Var, form: IscForm) -> Result<Var> {
    let q = tape.value(q_dist);
    if q.len() != p_dist.len() {
        return Err(Error::invalid(
            "isc_loss",
            format!("P has {} entries but Q has {}", p_dist.len(), q.len()),
        ));
    }
    check_distribution("P", p_dist)?;
    check_distribution("Q", q.values())?;
    let shape = q.shape().to_vec();
    let p = tape.constant(Tensor::new(shape.clone(), p_dist.to_vec())?);
    match form {
        IscForm::Kl => {
            let log_p: Vec<f64> = p_dist
                .iter()
                .map(|&x| if x > 0.0 { x.ln() } else { 0.0 })
                .collect();
            let log_p = tape.constant(Tensor::new(shape, log_p)?);
            let log_q = tape.log(q_dist)?;
            let diff = tape.sub(log_p, log_q)?;
            let weighted = tape.mul(p, diff)?;
            tape.sum_all(weighted)
        }
        IscForm::Literal => {
            let p_sq = tape.mul(p, p)?;
            let ratio = tape.div(p_sq, q_dist)?;
            let total = tape.sum_all(ratio)?;
            tape.scale(total, -1.0)
        }
    }
}

/// `sum_i p_i log(p_i / q_i)` with `0 log 0 = 0`, outside any tape.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}
