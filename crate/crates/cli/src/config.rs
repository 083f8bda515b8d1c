//! Flat key-value experiment configuration with command-line overrides.
//!
//! The file format is one `key = value` pair per line; `#` starts a comment.
//! Numeric values accept plain decimals or fractions like `60/255`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ask_core::attack::StepRule;
use ask_core::knn::ReferenceMode;
use ask_core::{Error, Metric, Result};

/// Raw parsed key-value pairs, before typing.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    pairs: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::rejected(format!("config line {}: expected key = value", lineno + 1))
            })?;
            pairs.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KeyValues { pairs })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::rejected(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` override strings on top of the file contents.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::rejected(format!("override '{o}' is not key=value")))?;
            self.pairs
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }

    /// Canonical text form used for the reproducibility hash.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

pub fn parse_number(s: &str) -> Result<f64> {
    if let Some((a, b)) = s.split_once('/') {
        let num: f64 = a
            .trim()
            .parse()
            .map_err(|_| Error::rejected(format!("bad numerator in '{s}'")))?;
        let den: f64 = b
            .trim()
            .parse()
            .map_err(|_| Error::rejected(format!("bad denominator in '{s}'")))?;
        if den == 0.0 {
            return Err(Error::rejected(format!("zero denominator in '{s}'")));
        }
        Ok(num / den)
    } else {
        s.trim()
            .parse()
            .map_err(|_| Error::rejected(format!("bad number '{s}'")))
    }
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| f(p.trim()))
        .collect()
}

/// How the encoder is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderSpec {
    /// Zero-parameter identity map over the input.
    Identity,
    /// Seeded MLP with the given layer dimensions (input first).
    Mlp(Vec<usize>),
    /// Load an `ASKE` file.
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub encoder: EncoderSpec,
    pub taps: Vec<usize>,
    pub attack_layers: Vec<usize>,
    pub metric: Metric,
    pub classifier_k: usize,
    pub k_pos: usize,
    pub k_neg: usize,
    pub epsilons: Vec<f64>,
    pub steps: usize,
    pub step_rule: StepRule,
    pub tau: f64,
    pub omegas: Vec<f64>,
    pub reference_mode: ReferenceMode,
    pub train_subset: usize,
    pub test_subset: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub save_adversarial: bool,
    /// Tuning stage runs when nonempty.
    pub tune_taus: Vec<f64>,
    pub tune_batch: usize,
    /// Defense stage runs when true.
    pub defend: bool,
    pub defense_lambda: f64,
    pub defense_epochs: usize,
    pub defense_batch_size: usize,
    pub defense_lr: f64,
    pub defense_momentum: f64,
    pub defense_m: usize,
    pub defense_tau: f64,
    pub defense_epsilon: f64,
    pub defense_steps: usize,
}

impl ExperimentConfig {
    pub fn from_keyvalues(kv: &KeyValues) -> Result<Self> {
        let path = |key: &str| -> Result<PathBuf> {
            kv.get(key)
                .map(PathBuf::from)
                .ok_or_else(|| Error::rejected(format!("missing config key '{key}'")))
        };
        let num = |key: &str, default: f64| -> Result<f64> {
            kv.get(key).map_or(Ok(default), parse_number)
        };
        let int = |key: &str, default: usize| -> Result<usize> {
            match kv.get(key) {
                None => Ok(default),
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::rejected(format!("bad integer for '{key}': {s}"))),
            }
        };
        let flag = |key: &str, default: bool| -> Result<bool> {
            match kv.get(key) {
                None => Ok(default),
                Some("true") | Some("1") | Some("yes") => Ok(true),
                Some("false") | Some("0") | Some("no") => Ok(false),
                Some(s) => Err(Error::rejected(format!("bad boolean for '{key}': {s}"))),
            }
        };

        let encoder = match kv.get("encoder").unwrap_or("identity") {
            "identity" => EncoderSpec::Identity,
            s if s.starts_with("mlp:") => {
                let dims = parse_list(&s[4..], |p| {
                    p.parse::<usize>()
                        .map_err(|_| Error::rejected(format!("bad mlp dimension '{p}'")))
                })?;
                if dims.len() < 2 {
                    return Err(Error::rejected("mlp spec needs at least two dimensions"));
                }
                EncoderSpec::Mlp(dims)
            }
            s => EncoderSpec::File(PathBuf::from(s)),
        };

        let taps = match kv.get("taps") {
            None => vec![0],
            Some(s) => parse_list(s, |p| {
                p.parse::<usize>()
                    .map_err(|_| Error::rejected(format!("bad tap '{p}'")))
            })?,
        };
        let attack_layers = match kv.get("attack_layers") {
            None => taps.clone(),
            Some(s) => parse_list(s, |p| {
                p.parse::<usize>()
                    .map_err(|_| Error::rejected(format!("bad attack layer '{p}'")))
            })?,
        };
        let metric = match kv.get("metric").unwrap_or("negl2") {
            "negl2" | "neg-l2" | "l2" => Metric::NegL2,
            "cosine" => Metric::Cosine,
            s => return Err(Error::rejected(format!("unknown metric '{s}'"))),
        };
        let step_rule = match kv.get("step_rule") {
            None => StepRule::Relative(2.5),
            Some(s) if s.starts_with("fixed:") => StepRule::Fixed(parse_number(&s[6..])?),
            Some(s) if s.starts_with("relative:") => StepRule::Relative(parse_number(&s[9..])?),
            Some(s) => return Err(Error::rejected(format!("unknown step rule '{s}'"))),
        };
        let reference_mode = match kv.get("reference_mode").unwrap_or("knn") {
            "knn" => ReferenceMode::Knn,
            "random" => ReferenceMode::Random,
            s => return Err(Error::rejected(format!("unknown reference mode '{s}'"))),
        };
        let epsilons = match kv.get("epsilons") {
            None => return Err(Error::rejected("missing config key 'epsilons'")),
            Some(s) => parse_list(s, parse_number)?,
        };
        let omegas = match kv.get("omega") {
            None => vec![1.0 / attack_layers.len() as f64; attack_layers.len()],
            Some(s) => parse_list(s, parse_number)?,
        };
        let tune_taus = match kv.get("tune_taus") {
            None => Vec::new(),
            Some(s) => parse_list(s, parse_number)?,
        };

        let cfg = ExperimentConfig {
            train_images: path("train_images")?,
            train_labels: path("train_labels")?,
            test_images: path("test_images")?,
            test_labels: path("test_labels")?,
            encoder,
            taps,
            attack_layers,
            metric,
            classifier_k: int("k", 5)?,
            k_pos: int("k_attack_pos", int("k", 5)?)?,
            k_neg: int("k_attack_neg", int("k", 5)?)?,
            epsilons,
            steps: int("steps", 20)?,
            step_rule,
            tau: num("tau", 0.1)?,
            omegas,
            reference_mode,
            train_subset: int("train_subset", 0)?,
            test_subset: int("test_subset", 0)?,
            seed: int("seed", 42)? as u64,
            output_dir: path("output_dir")?,
            save_adversarial: flag("save_adversarial", false)?,
            tune_taus,
            tune_batch: int("tune_batch", 100)?,
            defend: flag("defend", false)?,
            defense_lambda: num("defense_lambda", 1.0)?,
            defense_epochs: int("defense_epochs", 10)?,
            defense_batch_size: int("defense_batch_size", 50)?,
            defense_lr: num("defense_lr", 0.01)?,
            defense_momentum: num("defense_momentum", 0.9)?,
            defense_m: int("defense_m", 8)?,
            defense_tau: num("defense_tau", 0.1)?,
            defense_epsilon: num("defense_epsilon", 0.1)?,
            defense_steps: int("defense_steps", 10)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::rejected("epsilon list must not be empty"));
        }
        for &e in &self.epsilons {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::rejected(format!("epsilon {e} outside (0,1)")));
            }
        }
        if self.omegas.len() != self.attack_layers.len() {
            return Err(Error::rejected(format!(
                "{} omega values for {} attack layers",
                self.omegas.len(),
                self.attack_layers.len()
            )));
        }
        let total: f64 = self.omegas.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::rejected("omega values must sum to 1"));
        }
        if self.tau <= 0.0 || self.tau.is_nan() || self.defense_tau <= 0.0 || self.defense_tau.is_nan() {
            return Err(Error::rejected("temperatures must be positive"));
        }
        if self.classifier_k == 0 || self.k_pos == 0 || self.k_neg == 0 {
            return Err(Error::rejected("k values must be positive"));
        }
        for l in &self.attack_layers {
            if !self.taps.contains(l) {
                return Err(Error::rejected(format!("attack layer {l} is not tapped")));
            }
        }
        Ok(())
    }

    /// Every referenced input file must exist before any compute starts.
    pub fn check_files(&self) -> Result<()> {
        for p in [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ] {
            if !p.is_file() {
                return Err(Error::rejected(format!("input file missing: {}", p.display())));
            }
        }
        if let EncoderSpec::File(p) = &self.encoder {
            if !p.is_file() {
                return Err(Error::rejected(format!("encoder file missing: {}", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
        train_images = a.idx
        train_labels = b.idx
        test_images = c.idx
        test_labels = d.idx
        epsilons = 60/255
        output_dir = out
    ";

    #[test]
    fn parses_minimal_config_with_defaults() {
        let kv = KeyValues::parse(MINIMAL).unwrap();
        let cfg = ExperimentConfig::from_keyvalues(&kv).unwrap();
        assert_eq!(cfg.classifier_k, 5);
        assert_eq!(cfg.taps, vec![0]);
        assert!((cfg.epsilons[0] - 60.0 / 255.0).abs() < 1e-12);
        assert_eq!(cfg.encoder, EncoderSpec::Identity);
    }

    #[test]
    fn fractions_and_comments_parse() {
        let kv = KeyValues::parse("a = 1/4 # comment\n# full comment\nb = 0.5").unwrap();
        assert_eq!(parse_number(kv.get("a").unwrap()).unwrap(), 0.25);
        assert_eq!(parse_number(kv.get("b").unwrap()).unwrap(), 0.5);
    }

    #[test]
    fn overrides_win() {
        let mut kv = KeyValues::parse(MINIMAL).unwrap();
        kv.apply_overrides(&["k=9".into(), "metric=cosine".into()]).unwrap();
        let cfg = ExperimentConfig::from_keyvalues(&kv).unwrap();
        assert_eq!(cfg.classifier_k, 9);
        assert_eq!(cfg.metric, Metric::Cosine);
    }

    #[test]
    fn rejects_bad_epsilon_and_omegas() {
        let mut kv = KeyValues::parse(MINIMAL).unwrap();
        kv.apply_overrides(&["epsilons=1.5".into()]).unwrap();
        assert!(ExperimentConfig::from_keyvalues(&kv).is_err());

        let mut kv = KeyValues::parse(MINIMAL).unwrap();
        kv.apply_overrides(&["omega=0.4,0.4".into()]).unwrap();
        assert!(ExperimentConfig::from_keyvalues(&kv).is_err());
    }

    #[test]
    fn mlp_spec_parses() {
        let mut kv = KeyValues::parse(MINIMAL).unwrap();
        kv.apply_overrides(&["encoder=mlp:784,64,32".into(), "taps=1".into()])
            .unwrap();
        let cfg = ExperimentConfig::from_keyvalues(&kv).unwrap();
        assert_eq!(cfg.encoder, EncoderSpec::Mlp(vec![784, 64, 32]));
        assert_eq!(cfg.taps, vec![1]);
    }

    #[test]
    fn canonical_text_is_sorted_and_stable() {
        let kv1 = KeyValues::parse("b = 2\na = 1").unwrap();
        let kv2 = KeyValues::parse("a = 1\nb = 2").unwrap();
        assert_eq!(kv1.canonical_text(), kv2.canonical_text());
    }
}
