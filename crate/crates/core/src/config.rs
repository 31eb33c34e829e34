//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated,
//! booleans are `true`/`false`, and the reference distance is either
//! `positive` or `fixed:<value>`. Setting `loss` first selects the defaults
//! for that objective, regardless of where the key appears in the file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::augment::ReferenceDistance;
use crate::error::{Error, Result};
use crate::metric::LossKind;
use crate::train::TrainConfig;

/// Every recognised key, in the order they are written.
pub const CONFIG_KEYS: &[&str] = &[
    "loss",
    "alpha",
    "beta",
    "lambda_balance",
    "margin",
    "npair_n",
    "batch_size",
    "samples_per_class",
    "epochs",
    "learning_rate",
    "lr_multiplier",
    "seed",
    "embed_dim",
    "extractor_hidden",
    "generator_hidden",
    "eval_every",
    "ks",
    "hdml",
    "syn_grad_to_extractor",
    "normalize_embeddings",
    "reference_distance",
    "train_fraction",
    "split_seed",
];

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)));
        };
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::Config(format!("line {}: unknown key {key:?}", i + 1)));
        }
        if pairs.iter().any(|(_, k, _)| *k == key) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
        pairs.push((i + 1, key, value.trim()));
    }

    let loss = match pairs.iter().find(|(_, k, _)| *k == "loss") {
        Some(&(line, _, v)) => v
            .parse::<LossKind>()
            .map_err(|e| Error::Config(format!("line {line}: {e}")))?,
        None => LossKind::Triplet,
    };
    let mut config = TrainConfig::for_loss(loss);
    for (line, key, value) in pairs {
        apply(&mut config, key, value).map_err(|msg| Error::Config(format!("line {line}: {key}: {msg}")))?;
    }
    config.validate()?;
    Ok(config)
}

fn scalar<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn list(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| scalar(v.trim())).collect()
}

fn apply(c: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    match key {
        "loss" => {}
        "alpha" => c.alpha = scalar(value)?,
        "beta" => c.beta = scalar(value)?,
        "lambda_balance" => c.lambda_balance = scalar(value)?,
        "margin" => c.margin = scalar(value)?,
        "npair_n" => c.npair_n = scalar(value)?,
        "batch_size" => c.batch_size = scalar(value)?,
        "samples_per_class" => c.samples_per_class = scalar(value)?,
        "epochs" => c.epochs = scalar(value)?,
        "learning_rate" => c.learning_rate = scalar(value)?,
        "lr_multiplier" => c.lr_multiplier = scalar(value)?,
        "seed" => c.seed = scalar(value)?,
        "embed_dim" => c.embed_dim = scalar(value)?,
        "extractor_hidden" => c.extractor_hidden = list(value)?,
        "generator_hidden" => c.generator_hidden = list(value)?,
        "eval_every" => c.eval_every = scalar(value)?,
        "ks" => c.ks = list(value)?,
        "hdml" => c.hdml = scalar(value)?,
        "syn_grad_to_extractor" => c.syn_grad_to_extractor = scalar(value)?,
        "normalize_embeddings" => c.normalize_embeddings = scalar(value)?,
        "reference_distance" => c.reference_distance = parse_reference(value)?,
        "train_fraction" => c.train_fraction = scalar(value)?,
        "split_seed" => c.split_seed = scalar(value)?,
        other => return Err(format!("unknown key {other:?}")),
    }
    Ok(())
}

fn parse_reference(value: &str) -> std::result::Result<ReferenceDistance, String> {
    if value == "positive" {
        return Ok(ReferenceDistance::Positive);
    }
    match value.strip_prefix("fixed:") {
        Some(v) => Ok(ReferenceDistance::Fixed(scalar(v.trim())?)),
        None => Err(format!("expected `positive` or `fixed:<value>`, got {value:?}")),
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Writes every key, so that parsing the output reproduces `config` exactly.
pub fn config_to_string(c: &TrainConfig) -> String {
    let reference = match c.reference_distance {
        ReferenceDistance::Positive => "positive".to_string(),
        ReferenceDistance::Fixed(v) => format!("fixed:{v:?}"),
    };
    let mut out = String::new();
    let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
    put("loss", c.loss.to_string());
    put("alpha", format!("{:?}", c.alpha));
    put("beta", format!("{:?}", c.beta));
    put("lambda_balance", format!("{:?}", c.lambda_balance));
    put("margin", format!("{:?}", c.margin));
    put("npair_n", c.npair_n.to_string());
    put("batch_size", c.batch_size.to_string());
    put("samples_per_class", c.samples_per_class.to_string());
    put("epochs", c.epochs.to_string());
    put("learning_rate", format!("{:?}", c.learning_rate));
    put("lr_multiplier", format!("{:?}", c.lr_multiplier));
    put("seed", c.seed.to_string());
    put("embed_dim", c.embed_dim.to_string());
    put("extractor_hidden", join(&c.extractor_hidden));
    put("generator_hidden", join(&c.generator_hidden));
    put("eval_every", c.eval_every.to_string());
    put("ks", join(&c.ks));
    put("hdml", c.hdml.to_string());
    put("syn_grad_to_extractor", c.syn_grad_to_extractor.to_string());
    put("normalize_embeddings", c.normalize_embeddings.to_string());
    put("reference_distance", reference);
    put("train_fraction", format!("{:?}", c.train_fraction));
    put("split_seed", c.split_seed.to_string());
    out
}
