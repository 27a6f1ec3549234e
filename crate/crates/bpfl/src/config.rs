//! Experiment configuration: a flat `key = value` text format with `#`
//! comments, parsed strictly (unknown keys and malformed values are errors
//! with line numbers), plus regime-dependent defaults.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::protocol::{AblationFlags, LossWeights};
use crate::util::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    MhPflgb,
    LocalOnly,
    FedAvg,
    FedAvgFt,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::MhPflgb => "mh-pflgb",
            Protocol::LocalOnly => "local-only",
            Protocol::FedAvg => "fedavg",
            Protocol::FedAvgFt => "fedavg-ft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    LabelSkew,
    Resolution,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::LabelSkew => "label-skew",
            Regime::Resolution => "resolution",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Protocol,
    pub regime: Regime,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub classes: usize,
    pub samples: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub alpha: f64,
    pub resolution_factors: Vec<usize>,
    pub client_widths: Vec<Vec<usize>>,
    pub bypass_widths: Vec<usize>,
    pub batch_size: usize,
    pub epochs_local: usize,
    pub epochs_global: usize,
    pub lr_local: f64,
    pub lr_global: f64,
    pub optimizer: OptimizerKind,
    pub loss_weights: LossWeights,
    pub ablation: AblationFlags,
    pub uniform_aggregation: bool,
    pub finetune_epochs: usize,
}

/// Default client architectures for the label-skew regime (8 clients).
pub const LABEL_SKEW_WIDTHS: [&[usize]; 8] = [
    &[64, 32],
    &[56, 28],
    &[48, 24],
    &[40, 20],
    &[64, 16],
    &[48, 32],
    &[56, 20],
    &[40, 28],
];

/// Default client architectures for the resolution regime (4 clients).
pub const RESOLUTION_WIDTHS: [&[usize]; 4] = [&[64, 48, 32], &[56, 32], &[48, 24], &[40, 16]];

impl ExperimentConfig {
    /// Spec-level defaults for a regime; callers then override from text.
    pub fn defaults(regime: Regime) -> Self {
        let (clients, classes, widths, factors) = match regime {
            Regime::LabelSkew => (
                8,
                4,
                LABEL_SKEW_WIDTHS.iter().map(|w| w.to_vec()).collect::<Vec<_>>(),
                vec![1; 8],
            ),
            Regime::Resolution => (
                4,
                3,
                RESOLUTION_WIDTHS.iter().map(|w| w.to_vec()).collect::<Vec<_>>(),
                vec![1, 2, 4, 8],
            ),
        };
        ExperimentConfig {
            method: Protocol::MhPflgb,
            regime,
            seed: 0,
            rounds: 100,
            clients,
            classes,
            samples: 2000,
            input_dim: 32,
            separation: 2.5,
            alpha: 0.5,
            resolution_factors: factors,
            client_widths: widths,
            bypass_widths: vec![12],
            batch_size: 8,
            epochs_local: 4,
            epochs_global: 1,
            lr_local: 1e-4,
            lr_global: 1e-5,
            optimizer: OptimizerKind::Adam,
            loss_weights: LossWeights::default(),
            ablation: AblationFlags::default(),
            uniform_aggregation: false,
            finetune_epochs: 5,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        // Two passes: the regime decides which defaults the remaining keys
        // override, so it is picked up first.
        let pairs = lex(text)?;
        let mut regime = Regime::LabelSkew;
        for (line, key, value) in &pairs {
            if key == "regime" {
                regime = match value.as_str() {
                    "label-skew" => Regime::LabelSkew,
                    "resolution" => Regime::Resolution,
                    other => {
                        return Err(Error::Config(format!(
                            "line {line}: unknown regime {other:?}"
                        )))
                    }
                };
            }
        }
        let mut cfg = ExperimentConfig::defaults(regime);
        let mut seen: Vec<&str> = Vec::new();
        for (line, key, value) in &pairs {
            if seen.contains(&key.as_str()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key:?}")));
            }
            cfg.apply(*line, key, value)?;
            seen.push(key.as_str());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let err = |msg: String| Error::Config(format!("line {line}: {msg}"));
        match key {
            "method" => {
                self.method = match value {
                    "mh-pflgb" => Protocol::MhPflgb,
                    "local-only" => Protocol::LocalOnly,
                    "fedavg" => Protocol::FedAvg,
                    "fedavg-ft" => Protocol::FedAvgFt,
                    other => return Err(err(format!("unknown method {other:?}"))),
                }
            }
            "regime" => {} // consumed in the first pass
            "seed" => self.seed = parse_scalar(line, key, value)?,
            "rounds" => self.rounds = parse_scalar(line, key, value)?,
            "clients" => self.clients = parse_scalar(line, key, value)?,
            "classes" => self.classes = parse_scalar(line, key, value)?,
            "samples" => self.samples = parse_scalar(line, key, value)?,
            "input_dim" => self.input_dim = parse_scalar(line, key, value)?,
            "separation" => self.separation = parse_scalar(line, key, value)?,
            "alpha" => self.alpha = parse_scalar(line, key, value)?,
            "resolution_factors" => self.resolution_factors = parse_int_list(line, value)?,
            "client_widths" => self.client_widths = parse_nested_int_list(line, value)?,
            "bypass_widths" => self.bypass_widths = parse_int_list(line, value)?,
            "batch_size" => self.batch_size = parse_scalar(line, key, value)?,
            "epochs_local" => self.epochs_local = parse_scalar(line, key, value)?,
            "epochs_global" => self.epochs_global = parse_scalar(line, key, value)?,
            "lr_local" => self.lr_local = parse_scalar(line, key, value)?,
            "lr_global" => self.lr_global = parse_scalar(line, key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => return Err(err(format!("unknown optimizer {other:?}"))),
                }
            }
            "lambda_l_loc" => self.loss_weights.lambda_l_loc = parse_scalar(line, key, value)?,
            "lambda_g_loc" => self.loss_weights.lambda_g_loc = parse_scalar(line, key, value)?,
            "lambda_g_glob" => self.loss_weights.lambda_g_glob = parse_scalar(line, key, value)?,
            "lambda_l_glob" => self.loss_weights.lambda_l_glob = parse_scalar(line, key, value)?,
            "no_global_head" => self.ablation.no_global_head = parse_scalar(line, key, value)?,
            "no_global_body" => self.ablation.no_global_body = parse_scalar(line, key, value)?,
            "no_fusion" => self.ablation.no_fusion = parse_scalar(line, key, value)?,
            "uniform_aggregation" => self.uniform_aggregation = parse_scalar(line, key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse_scalar(line, key, value)?,
            other => return Err(err(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.samples < self.classes {
            return Err(Error::Config(format!(
                "{} samples cannot cover {} classes",
                self.samples, self.classes
            )));
        }
        if self.input_dim < self.classes {
            return Err(Error::Config(format!(
                "input_dim {} must be at least the class count {}",
                self.input_dim, self.classes
            )));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config("separation must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs_local == 0 {
            return Err(Error::Config("epochs_local must be positive".into()));
        }
        if !(self.lr_local > 0.0) || !(self.lr_global > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.client_widths.len() != self.clients {
            return Err(Error::Config(format!(
                "client_widths lists {} architectures for {} clients",
                self.client_widths.len(),
                self.clients
            )));
        }
        for (k, w) in self.client_widths.iter().enumerate() {
            if w.is_empty() || w.contains(&0) {
                return Err(Error::Config(format!("client {k}: invalid widths {w:?}")));
            }
        }
        if self.bypass_widths.is_empty() || self.bypass_widths.contains(&0) {
            return Err(Error::Config(format!(
                "invalid bypass widths {:?}",
                self.bypass_widths
            )));
        }
        match self.regime {
            Regime::Resolution => {
                if self.resolution_factors.len() != self.clients {
                    return Err(Error::Config(format!(
                        "{} resolution factors for {} clients",
                        self.resolution_factors.len(),
                        self.clients
                    )));
                }
                for &f in &self.resolution_factors {
                    if ![1, 2, 4, 8].contains(&f) {
                        return Err(Error::Config(format!(
                            "resolution factor {f} not in {{1,2,4,8}}"
                        )));
                    }
                    if self.input_dim % f != 0 {
                        return Err(Error::Config(format!(
                            "input_dim {} not divisible by factor {f}",
                            self.input_dim
                        )));
                    }
                }
            }
            Regime::LabelSkew => {
                if self.resolution_factors.iter().any(|&f| f != 1) {
                    return Err(Error::Config(
                        "resolution_factors only apply to the resolution regime".into(),
                    ));
                }
            }
        }
        for (name, v) in [
            ("lambda_l_loc", self.loss_weights.lambda_l_loc),
            ("lambda_g_loc", self.loss_weights.lambda_g_loc),
            ("lambda_g_glob", self.loss_weights.lambda_g_glob),
            ("lambda_l_glob", self.loss_weights.lambda_l_glob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if matches!(self.method, Protocol::FedAvg | Protocol::FedAvgFt) {
            let first = &self.client_widths[0];
            if self.client_widths.iter().any(|w| w != first) {
                return Err(Error::Config(
                    "fedavg requires identical client architectures".into(),
                ));
            }
        }
        Ok(())
    }

    /// Canonical key-sorted dump; `parse(dump)` reproduces the config.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let w = &self.loss_weights;
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "bypass_widths = {}", fmt_int_list(&self.bypass_widths));
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "client_widths = {}", fmt_nested_int_list(&self.client_widths));
        let _ = writeln!(s, "clients = {}", self.clients);
        let _ = writeln!(s, "epochs_global = {}", self.epochs_global);
        let _ = writeln!(s, "epochs_local = {}", self.epochs_local);
        let _ = writeln!(s, "finetune_epochs = {}", self.finetune_epochs);
        let _ = writeln!(s, "input_dim = {}", self.input_dim);
        let _ = writeln!(s, "lambda_g_glob = {}", w.lambda_g_glob);
        let _ = writeln!(s, "lambda_g_loc = {}", w.lambda_g_loc);
        let _ = writeln!(s, "lambda_l_glob = {}", w.lambda_l_glob);
        let _ = writeln!(s, "lambda_l_loc = {}", w.lambda_l_loc);
        let _ = writeln!(s, "lr_global = {}", self.lr_global);
        let _ = writeln!(s, "lr_local = {}", self.lr_local);
        let _ = writeln!(s, "method = {}", self.method.as_str());
        let _ = writeln!(s, "no_fusion = {}", self.ablation.no_fusion);
        let _ = writeln!(s, "no_global_body = {}", self.ablation.no_global_body);
        let _ = writeln!(s, "no_global_head = {}", self.ablation.no_global_head);
        let _ = writeln!(
            s,
            "optimizer = {}",
            match self.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
        );
        let _ = writeln!(s, "regime = {}", self.regime.as_str());
        let _ = writeln!(s, "resolution_factors = {}", fmt_int_list(&self.resolution_factors));
        let _ = writeln!(s, "rounds = {}", self.rounds);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "separation = {}", self.separation);
        let _ = writeln!(s, "uniform_aggregation = {}", self.uniform_aggregation);
        s
    }

    /// Stable identity of everything that affects results; stored in
    /// checkpoints to detect config drift across resume.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_canonical_string().as_bytes())
    }
}

/// Splits the text into `(line_number, key, value)` triples.
fn lex(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {line}: expected `key = value`, got {stripped:?}"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "line {line}: empty key or value in {stripped:?}"
            )));
        }
        out.push((line, key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn parse_scalar<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "line {line}: cannot parse {value:?} for key {key:?} as {}",
            std::any::type_name::<T>()
        ))
    })
}

/// `[a, b, c]`
fn parse_int_list(line: usize, value: &str) -> Result<Vec<usize>> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .ok_or_else(|| Error::Config(format!("line {line}: expected a [..] list, got {value:?}")))?;
    let inner = inner.trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|part| {
            part.trim().parse().map_err(|_| {
                Error::Config(format!("line {line}: {:?} is not an integer", part.trim()))
            })
        })
        .collect()
}

/// `[[a, b], [c], ...]`
fn parse_nested_int_list(line: usize, value: &str) -> Result<Vec<Vec<usize>>> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .ok_or_else(|| Error::Config(format!("line {line}: expected a [[..],..] list, got {value:?}")))?;
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = None;
    for (i, ch) in inner.char_indices() {
        match ch {
            '[' => {
                if depth > 0 {
                    return Err(Error::Config(format!("line {line}: lists nest at most twice")));
                }
                depth += 1;
                start = Some(i);
            }
            ']' => {
                if depth == 0 {
                    return Err(Error::Config(format!("line {line}: unbalanced brackets")));
                }
                depth -= 1;
                let s = start.take().expect("opened above");
                out.push(parse_int_list(line, &inner[s..=i])?);
            }
            ',' | ' ' | '\t' => {}
            other if depth > 0 => {
                // digits inside the inner list are consumed by parse_int_list
                let _ = other;
            }
            other => {
                return Err(Error::Config(format!(
                    "line {line}: unexpected {other:?} between lists"
                )))
            }
        }
    }
    if depth != 0 {
        return Err(Error::Config(format!("line {line}: unbalanced brackets")));
    }
    Ok(out)
}

fn fmt_int_list(v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}

fn fmt_nested_int_list(v: &[Vec<usize>]) -> String {
    let items: Vec<String> = v.iter().map(|w| fmt_int_list(w)).collect();
    format!("[{}]", items.join(", "))
}
