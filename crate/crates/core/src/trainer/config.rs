use std::fmt;
use std::str::FromStr;

use crate::consistency::IscForm;
use crate::error::{Error, Result};

/// Where the per-layer gates read the trigger candidate from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateSource {
    /// The token embedding `e_t`.
    #[default]
    Embedding,
    /// The BiLSTM state `h0_t` (ablation).
    Hidden,
}

impl fmt::Display for GateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateSource::Embedding => "embedding",
            GateSource::Hidden => "h0",
        })
    }
}

impl FromStr for GateSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(GateSource::Embedding),
            "h0" => Ok(GateSource::Hidden),
            other => Err(Error::Config(format!(
                "gate-source must be `embedding` or `h0`, got `{other}`"
            ))),
        }
    }
}

/// Hyperparameters, ablation switches and layer widths.
///
/// Key names in [`TrainConfig::set`] and [`TrainConfig::to_pairs`] match the
/// command-line flags without the leading dashes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_gates: bool,
    pub use_diversity: bool,
    pub use_consistency: bool,
    pub isc_form: IscForm,
    pub negative_keep_prob: f64,
    pub gd_pair_mean: bool,
    pub gate_source: GateSource,
    pub gcn_layers: usize,
    /// Per direction; the BiLSTM output is twice this wide.
    pub lstm_hidden: usize,
    pub gcn_dim: usize,
    pub score_dim: usize,
    pub ffn_hidden: usize,
    /// Width of randomly initialized lookup tables.
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.2,
            learning_rate: 5e-5,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            use_gates: true,
            use_diversity: true,
            use_consistency: true,
            isc_form: IscForm::Kl,
            negative_keep_prob: 1.0,
            gd_pair_mean: false,
            gate_source: GateSource::Embedding,
            gcn_layers: 2,
            lstm_hidden: 128,
            gcn_dim: 128,
            score_dim: 128,
            ffn_hidden: 128,
            embed_dim: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Gate diversity contributes only when gates exist.
    pub fn diversity_active(&self) -> bool {
        self.use_gates && self.use_diversity
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be a finite value >= 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail("beta must be a finite value >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("lr must be > 0");
        }
        if !(self.negative_keep_prob > 0.0 && self.negative_keep_prob <= 1.0) {
            return fail("negative-keep-prob must be in (0, 1]");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch-size must be positive");
        }
        if [
            self.gcn_layers,
            self.lstm_hidden,
            self.gcn_dim,
            self.score_dim,
            self.ffn_hidden,
            self.embed_dim,
        ]
        .contains(&0)
        {
            return fail("layer counts and widths must be positive");
        }
        Ok(())
    }

    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lr" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch-size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "no-gates" => self.use_gates = !parse::<bool>(key, value)?,
            "no-diversity" => self.use_diversity = !parse::<bool>(key, value)?,
            "no-consistency" => self.use_consistency = !parse::<bool>(key, value)?,
            "isc-form" => self.isc_form = value.trim().parse()?,
            "negative-keep-prob" => self.negative_keep_prob = parse(key, value)?,
            "gd-pair-mean" => self.gd_pair_mean = parse(key, value)?,
            "gate-source" => self.gate_source = value.trim().parse()?,
            "gcn-layers" => self.gcn_layers = parse(key, value)?,
            "lstm-hidden" => self.lstm_hidden = parse(key, value)?,
            "gcn-dim" => self.gcn_dim = parse(key, value)?,
            "score-dim" => self.score_dim = parse(key, value)?,
            "ffn-hidden" => self.ffn_hidden = parse(key, value)?,
            "embed-dim" => self.embed_dim = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        Self::default().to_pairs().iter().any(|(k, _)| *k == key)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch-size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("no-gates", (!self.use_gates).to_string()),
            ("no-diversity", (!self.use_diversity).to_string()),
            ("no-consistency", (!self.use_consistency).to_string()),
            ("isc-form", self.isc_form.to_string()),
            ("negative-keep-prob", self.negative_keep_prob.to_string()),
            ("gd-pair-mean", self.gd_pair_mean.to_string()),
            ("gate-source", self.gate_source.to_string()),
            ("gcn-layers", self.gcn_layers.to_string()),
            ("lstm-hidden", self.lstm_hidden.to_string()),
            ("gcn-dim", self.gcn_dim.to_string()),
            ("score-dim", self.score_dim.to_string()),
            ("ffn-hidden", self.ffn_hidden.to_string()),
            ("embed-dim", self.embed_dim.to_string()),
        ]
    }

    /// `key = value` lines, the same syntax as config files.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text)? {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }
}

/// Reads `key = value` lines; `#` starts a comment line, blank lines are
/// skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, found `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            alpha: 0.3,
            learning_rate: 1.25e-3,
            use_gates: false,
            isc_form: IscForm::Literal,
            gate_source: GateSource::Hidden,
            ..Default::default()
        };
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("gamma", "1").is_err());
        assert!(cfg.set("alpha", "x").is_err());
        assert!(TrainConfig::is_key("alpha"));
        assert!(!TrainConfig::is_key("gamma"));
    }

    #[test]
    fn validation_bounds() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alpha = -0.1;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            negative_keep_prob: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let kv = parse_key_values("# c\n\nalpha = 0.5\n  beta=0.1  \n").unwrap();
        assert_eq!(
            kv,
            vec![
                ("alpha".into(), "0.5".into()),
                ("beta".into(), "0.1".into())
            ]
        );
        assert!(parse_key_values("alpha 0.5").is_err());
    }
}
