//! Experiment configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! [sampling]
//! alpha = 0.5
//! lambda_new = 1.02
//!
//! [model]
//! model_kind = neumf
//! ```
//!
//! Section headers group keys for readability; every key is globally unique
//! and may appear under any known section (or before the first header).
//! Absent keys keep their defaults.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gmf,
    Mlp,
    NeuMf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Stratified, time-aware sampling over new data and the reservoir.
    Sts,
    /// New data only.
    Ndo,
    /// Uniform over new data plus reservoir.
    Rr,
    /// Uniform over the most recent window.
    Sw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuserKind {
    /// Per-target confidence weighting from the accuracy memories.
    Ael,
    Avg,
    /// Odds weighting of each model's global accuracy on the last batch.
    AdaW,
}

macro_rules! keyword_enum {
    ($ty:ident, $field:literal, { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::invalid(
                        $field,
                        format!("unknown value `{}` (expected one of: {})", other, [$($name),+].join(", ")),
                    )),
                }
            }
        }
    };
}

keyword_enum!(ModelKind, "model_kind", { Gmf => "gmf", Mlp => "mlp", NeuMf => "neumf" });
keyword_enum!(SamplerKind, "sampler_kind", { Sts => "sts", Ndo => "ndo", Rr => "rr", Sw => "sw" });
keyword_enum!(FuserKind, "fuser_kind", { Ael => "ael", Avg => "avg", AdaW => "adaw" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub lambda_new: f64,
    pub lambda_res: f64,
    pub reservoir_capacity: usize,
    pub batch_size: usize,
    pub n_p: usize,
    pub n_r: usize,
    pub num_models: usize,
    pub model_kind: ModelKind,
    pub embedding_dim: usize,
    /// MLP tower widths; the first entry is the input width (twice the
    /// embedding dimension), the last feeds the output layer.
    pub mlp_layer_widths: Vec<usize>,
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub negative_ratio: usize,
    pub memory_top_e: usize,
    pub eval_negatives: usize,
    pub top_k: usize,
    pub rng_seed: u64,
    pub sampler_kind: SamplerKind,
    pub fuser_kind: FuserKind,
    pub train_fraction: f64,
    /// Sliding-window length for the SW sampler; `None` means `batch_size`.
    pub window_size: Option<usize>,
    /// Parallel training/scoring workers. Results do not depend on it.
    pub workers: usize,
    /// Write wall-clock columns; disable for byte-reproducible CSVs.
    pub timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alpha: 0.5,
            lambda_new: 1.02,
            lambda_res: 1.005,
            reservoir_capacity: 10_000,
            batch_size: 256,
            n_p: 256,
            n_r: 256,
            num_models: 8,
            model_kind: ModelKind::NeuMf,
            embedding_dim: 16,
            mlp_layer_widths: vec![32, 16, 8],
            learning_rate: 0.001,
            l2_weight: 1e-6,
            negative_ratio: 4,
            memory_top_e: 10,
            eval_negatives: 99,
            top_k: 10,
            rng_seed: 42,
            sampler_kind: SamplerKind::Sts,
            fuser_kind: FuserKind::Ael,
            train_fraction: 0.9,
            window_size: None,
            workers: 1,
            timings: true,
        }
    }
}

impl ExperimentConfig {
    pub fn window(&self) -> usize {
        self.window_size.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: usize) -> Result<()> {
            if v == 0 {
                Err(Error::invalid(name, "must be a positive integer"))
            } else {
                Ok(())
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", "alpha ∈ [0,1]"));
        }
        if !(self.lambda_new >= 1.0 && self.lambda_new.is_finite()) {
            return Err(Error::invalid("lambda_new", "lambda_new ≥ 1"));
        }
        if !(self.lambda_res >= 1.0 && self.lambda_res.is_finite()) {
            return Err(Error::invalid("lambda_res", "lambda_res ≥ 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction", "train_fraction ∈ (0,1)"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "learning_rate ≥ 0"));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(Error::invalid("l2_weight", "l2_weight ≥ 0"));
        }
        positive("reservoir_capacity", self.reservoir_capacity)?;
        positive("batch_size", self.batch_size)?;
        positive("n_p", self.n_p)?;
        positive("n_r", self.n_r)?;
        positive("num_models", self.num_models)?;
        positive("embedding_dim", self.embedding_dim)?;
        positive("memory_top_e", self.memory_top_e)?;
        positive("eval_negatives", self.eval_negatives)?;
        positive("top_k", self.top_k)?;
        positive("workers", self.workers)?;
        if let Some(w) = self.window_size {
            positive("window_size", w)?;
        }
        if self.mlp_layer_widths.len() < 2 {
            return Err(Error::invalid(
                "mlp_layer_widths",
                "needs the input width and at least one hidden width",
            ));
        }
        if self.mlp_layer_widths.contains(&0) {
            return Err(Error::invalid("mlp_layer_widths", "widths must be positive"));
        }
        if self.mlp_layer_widths[0] != 2 * self.embedding_dim {
            return Err(Error::invalid(
                "mlp_layer_widths",
                format!(
                    "first width must equal 2 * embedding_dim = {}",
                    2 * self.embedding_dim
                ),
            ));
        }
        Ok(())
    }
}

/// Everything needed to launch one (possibly repeated) experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub config: ExperimentConfig,
    pub dataset: Option<PathBuf>,
    pub delimiter: String,
    pub out_dir: PathBuf,
    pub label: String,
    pub repeats: usize,
    pub subsample_users: Option<usize>,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            config: ExperimentConfig::default(),
            dataset: None,
            delimiter: "::".to_string(),
            out_dir: PathBuf::from("runs/default"),
            label: "default".to_string(),
            repeats: 1,
            subsample_users: None,
        }
    }
}

const SECTIONS: &[&str] = &["experiment", "sampling", "model", "ensemble", "evaluation", "run"];

fn canonical_key(key: &str) -> Option<&'static str> {
    Some(match key {
        "alpha" => "alpha",
        "lambda_new" => "lambda_new",
        "lambda_res" => "lambda_res",
        "reservoir_capacity" | "reservoir" => "reservoir_capacity",
        "batch_size" | "bs" => "batch_size",
        "n_p" => "n_p",
        "n_r" => "n_r",
        "num_models" | "o" => "num_models",
        "model_kind" | "model" => "model_kind",
        "embedding_dim" | "d" => "embedding_dim",
        "mlp_layer_widths" => "mlp_layer_widths",
        "learning_rate" | "lr" => "learning_rate",
        "l2_weight" | "l2" => "l2_weight",
        "negative_ratio" | "neg_ratio" => "negative_ratio",
        "memory_top_e" | "e" => "memory_top_e",
        "eval_negatives" => "eval_negatives",
        "top_k" | "k" => "top_k",
        "rng_seed" | "seed" => "rng_seed",
        "sampler_kind" | "sampler" => "sampler_kind",
        "fuser_kind" | "fuser" => "fuser_kind",
        "train_fraction" => "train_fraction",
        "window_size" => "window_size",
        "workers" => "workers",
        "timings" => "timings",
        "dataset" => "dataset",
        "delimiter" => "delimiter",
        "out" | "out_dir" => "out",
        "label" => "label",
        "repeats" => "repeats",
        "subsample_users" => "subsample_users",
        _ => return None,
    })
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::invalid(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

impl RunSpec {
    /// Sets one key. Unknown keys are reported with `line` (0 for CLI
    /// overrides). Does not validate cross-field invariants.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        let canon = canonical_key(key).ok_or_else(|| Error::UnknownKey {
            key: key.to_string(),
            line,
        })?;
        let c = &mut self.config;
        match canon {
            "alpha" => c.alpha = parse_num(canon, value)?,
            "lambda_new" => c.lambda_new = parse_num(canon, value)?,
            "lambda_res" => c.lambda_res = parse_num(canon, value)?,
            "reservoir_capacity" => c.reservoir_capacity = parse_num(canon, value)?,
            "batch_size" => c.batch_size = parse_num(canon, value)?,
            "n_p" => c.n_p = parse_num(canon, value)?,
            "n_r" => c.n_r = parse_num(canon, value)?,
            "num_models" => c.num_models = parse_num(canon, value)?,
            "model_kind" => c.model_kind = value.parse()?,
            "embedding_dim" => c.embedding_dim = parse_num(canon, value)?,
            "mlp_layer_widths" => {
                c.mlp_layer_widths = value
                    .split(',')
                    .map(|w| parse_num(canon, w.trim()))
                    .collect::<Result<_>>()?
            }
            "learning_rate" => c.learning_rate = parse_num(canon, value)?,
            "l2_weight" => c.l2_weight = parse_num(canon, value)?,
            "negative_ratio" => c.negative_ratio = parse_num(canon, value)?,
            "memory_top_e" => c.memory_top_e = parse_num(canon, value)?,
            "eval_negatives" => c.eval_negatives = parse_num(canon, value)?,
            "top_k" => c.top_k = parse_num(canon, value)?,
            "rng_seed" => c.rng_seed = parse_num(canon, value)?,
            "sampler_kind" => c.sampler_kind = value.parse()?,
            "fuser_kind" => c.fuser_kind = value.parse()?,
            "train_fraction" => c.train_fraction = parse_num(canon, value)?,
            "window_size" => c.window_size = parse_optional(canon, value)?,
            "workers" => c.workers = parse_num(canon, value)?,
            "timings" => c.timings = parse_bool(canon, value)?,
            "dataset" => {
                self.dataset = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "delimiter" => {
                if value.is_empty() {
                    return Err(Error::invalid("delimiter", "must not be empty"));
                }
                self.delimiter = value.to_string()
            }
            "out" => self.out_dir = PathBuf::from(value),
            "label" => self.label = value.to_string(),
            "repeats" => self.repeats = parse_num(canon, value)?,
            "subsample_users" => self.subsample_users = parse_optional(canon, value)?,
            _ => unreachable!("canonical key table out of sync: {canon}"),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::invalid(kv, "override must have the form key=value"))?;
        self.set(k, v, 0)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.repeats == 0 {
            return Err(Error::invalid("repeats", "must be ≥ 1"));
        }
        if self.subsample_users == Some(0) {
            return Err(Error::invalid("subsample_users", "must be positive"));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = RunSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(section) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let section = section.trim();
                if !SECTIONS.contains(&section) {
                    return Err(Error::UnknownSection {
                        section: section.to_string(),
                        line: line_no,
                    });
                }
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid(line, format!("line {line_no}: expected `key = value`"))
            })?;
            spec.set(k, v, line_no)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_config_string())` reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let c = &self.config;
        let widths = c
            .mlp_layer_widths
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        let mut s = String::new();
        s.push_str("[experiment]\n");
        s.push_str(&format!("rng_seed = {}\n", c.rng_seed));
        s.push_str(&format!("train_fraction = {:?}\n", c.train_fraction));
        s.push_str(&format!("n_p = {}\n", c.n_p));
        s.push_str(&format!("n_r = {}\n", c.n_r));
        s.push_str(&format!("workers = {}\n", c.workers));
        s.push_str(&format!("timings = {}\n", c.timings));
        s.push_str("\n[sampling]\n");
        s.push_str(&format!("sampler_kind = {}\n", c.sampler_kind));
        s.push_str(&format!("alpha = {:?}\n", c.alpha));
        s.push_str(&format!("lambda_new = {:?}\n", c.lambda_new));
        s.push_str(&format!("lambda_res = {:?}\n", c.lambda_res));
        s.push_str(&format!("reservoir_capacity = {}\n", c.reservoir_capacity));
        s.push_str(&format!("batch_size = {}\n", c.batch_size));
        s.push_str(&format!("window_size = {}\n", opt(c.window_size)));
        s.push_str(&format!("negative_ratio = {}\n", c.negative_ratio));
        s.push_str("\n[model]\n");
        s.push_str(&format!("model_kind = {}\n", c.model_kind));
        s.push_str(&format!("num_models = {}\n", c.num_models));
        s.push_str(&format!("embedding_dim = {}\n", c.embedding_dim));
        s.push_str(&format!("mlp_layer_widths = {widths}\n"));
        s.push_str(&format!("learning_rate = {:?}\n", c.learning_rate));
        s.push_str(&format!("l2_weight = {:?}\n", c.l2_weight));
        s.push_str("\n[ensemble]\n");
        s.push_str(&format!("fuser_kind = {}\n", c.fuser_kind));
        s.push_str(&format!("memory_top_e = {}\n", c.memory_top_e));
        s.push_str("\n[evaluation]\n");
        s.push_str(&format!("eval_negatives = {}\n", c.eval_negatives));
        s.push_str(&format!("top_k = {}\n", c.top_k));
        s.push_str("\n[run]\n");
        if let Some(d) = &self.dataset {
            s.push_str(&format!("dataset = {}\n", d.display()));
        }
        s.push_str(&format!("delimiter = {}\n", self.delimiter));
        s.push_str(&format!("out = {}\n", self.out_dir.display()));
        s.push_str(&format!("label = {}\n", self.label));
        s.push_str(&format!("repeats = {}\n", self.repeats));
        s.push_str(&format!("subsample_users = {}\n", opt(self.subsample_users)));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let spec = RunSpec::parse("").unwrap();
        assert_eq!(spec, RunSpec::default());
        let c = &spec.config;
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.lambda_new, 1.02);
        assert_eq!(c.lambda_res, 1.005);
        assert_eq!((c.batch_size, c.n_p), (256, 256));
        assert_eq!((c.num_models, c.memory_top_e, c.embedding_dim), (8, 10, 16));
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.l2_weight, 1e-6);
        assert_eq!(c.negative_ratio, 4);
        assert_eq!(c.reservoir_capacity, 10_000);
        assert_eq!((c.eval_negatives, c.top_k), (99, 10));
        assert_eq!(c.train_fraction, 0.9);
        assert_eq!(c.window(), 256);
    }

    #[test]
    fn alpha_out_of_range_names_bound() {
        let err = RunSpec::parse("alpha = 1.5").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alpha ∈ [0,1]"), "{msg}");
        assert!(msg.contains("`alpha`"), "{msg}");
    }

    #[test]
    fn lr_alias_sets_learning_rate() {
        let spec = RunSpec::parse("[model]\nlr = 0.001\n").unwrap();
        assert_eq!(spec.config.learning_rate, 0.001);
    }

    #[test]
    fn unknown_key_and_section_are_named() {
        let err = RunSpec::parse("\n\nbogus_key = 3").unwrap_err();
        assert_eq!(err.to_string(), "unknown config key `bogus_key` at line 3");
        let err = RunSpec::parse("[nope]\n").unwrap_err();
        assert!(err.to_string().contains("[nope]"));
    }

    #[test]
    fn bad_values_name_the_key() {
        for (text, key) in [
            ("lambda_new = 0.5", "lambda_new"),
            ("lambda_res = 0.9", "lambda_res"),
            ("batch_size = 0", "batch_size"),
            ("n_r = x", "n_r"),
            ("sampler = fancy", "sampler_kind"),
            ("fuser = attw", "fuser_kind"),
            ("model = bpr", "model_kind"),
            ("train_fraction = 1.0", "train_fraction"),
            ("mlp_layer_widths = 10,5", "mlp_layer_widths"),
            ("repeats = 0", "repeats"),
            ("timings = maybe", "timings"),
            ("no equals sign", "no equals sign"),
        ] {
            let msg = RunSpec::parse(text).unwrap_err().to_string();
            assert!(msg.contains(key), "`{text}` -> {msg}");
        }
    }

    #[test]
    fn overrides_and_comments() {
        let mut spec =
            RunSpec::parse("# header\n[sampling]\nalpha = 0.25 # trailing\nsampler = ndo\n")
                .unwrap();
        assert_eq!(spec.config.alpha, 0.25);
        assert_eq!(spec.config.sampler_kind, SamplerKind::Ndo);
        spec.apply_override("o=1").unwrap();
        spec.apply_override("fuser=avg").unwrap();
        assert_eq!(spec.config.num_models, 1);
        assert_eq!(spec.config.fuser_kind, FuserKind::Avg);
        assert!(spec.apply_override("o").is_err());
        assert!(matches!(
            spec.apply_override("zzz=1"),
            Err(Error::UnknownKey { line: 0, .. })
        ));
    }

    fn arb_spec() -> impl Strategy<Value = RunSpec> {
        (
            (0.0f64..=1.0, 1.0f64..3.0, 1.0f64..3.0, 1usize..50_000, 1usize..1024),
            (1usize..1024, 1usize..2048, 1usize..16, 0usize..3, 1usize..64),
            (1e-6f64..1.0, 0.0f64..1e-2, 0usize..10, any::<u64>(), 0usize..4, 0usize..3),
            (0.01f64..0.99, proptest::option::of(1usize..500), any::<bool>(), proptest::option::of(1usize..9999)),
        )
            .prop_map(|(a, b, c, d)| {
                let mut s = RunSpec::default();
                let cfg = &mut s.config;
                (cfg.alpha, cfg.lambda_new, cfg.lambda_res, cfg.reservoir_capacity, cfg.batch_size) = a;
                let (n_p, n_r, o, kind, dim) = b;
                (cfg.n_p, cfg.n_r, cfg.num_models, cfg.embedding_dim) = (n_p, n_r, o, dim);
                cfg.model_kind = [ModelKind::Gmf, ModelKind::Mlp, ModelKind::NeuMf][kind];
                cfg.mlp_layer_widths = vec![2 * dim, dim, (dim / 2).max(1)];
                let (lr, l2, neg, seed, sampler, fuser) = c;
                (cfg.learning_rate, cfg.l2_weight, cfg.negative_ratio, cfg.rng_seed) = (lr, l2, neg, seed);
                cfg.sampler_kind = [SamplerKind::Sts, SamplerKind::Ndo, SamplerKind::Rr, SamplerKind::Sw][sampler];
                cfg.fuser_kind = [FuserKind::Ael, FuserKind::Avg, FuserKind::AdaW][fuser];
                let (tf, window, timings, sub) = d;
                (cfg.train_fraction, cfg.window_size, cfg.timings) = (tf, window, timings);
                s.subsample_users = sub;
                s.dataset = Some(PathBuf::from("data/ratings.dat"));
                s.label = format!("run-{seed}");
                s
            })
    }

    proptest! {
        #[test]
        fn config_round_trip(spec in arb_spec()) {
            let text = spec.to_config_string();
            let back = RunSpec::parse(&text).unwrap();
            prop_assert_eq!(back, spec);
        }
    }
}
