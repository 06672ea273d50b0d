//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; later lines override earlier
//! ones. [`RunConfig::to_text`] writes every key, so a written file pins the
//! whole run.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::ordo::OrdoConfig;

pub const KEYS: [&str; 18] = [
    "m",
    "n_cs",
    "d_e",
    "d_mlp",
    "heads",
    "k",
    "layers",
    "k_m",
    "n_h",
    "latent_scale",
    "order",
    "sfg",
    "weights",
    "seed",
    "alpha0",
    "gamma",
    "steps",
    "lambda",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub codec: CodecConfig,
    /// Weights file; seeded weights are generated when absent.
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub ordo: OrdoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_codec(CodecConfig::full())
    }
}

impl RunConfig {
    pub fn with_codec(codec: CodecConfig) -> Self {
        Self {
            codec,
            weights: None,
            seed: 0,
            ordo: OrdoConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self::with_codec(CodecConfig::desk())
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (full, desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.ordo.validate()
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.codec.model;
        Ok(match key {
            "m" => m.m.to_string(),
            "n_cs" => m.n_cs.to_string(),
            "d_e" => m.d_e.to_string(),
            "d_mlp" => m.d_mlp.to_string(),
            "heads" => m.heads.to_string(),
            "k" => m.k.to_string(),
            "layers" => m.layers.to_string(),
            "k_m" => m.k_m.to_string(),
            "n_h" => self.codec.n_h.to_string(),
            "latent_scale" => self.codec.latent_scale.to_string(),
            "order" => self.codec.order.to_string(),
            "sfg" => self.codec.sfg.to_string(),
            "weights" => self
                .weights
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "seed" => self.seed.to_string(),
            "alpha0" => self.ordo.alpha0.to_string(),
            "gamma" => self.ordo.gamma.to_string(),
            "steps" => self.ordo.steps.to_string(),
            "lambda" => self.ordo.lambda.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
        }
        let v = value.trim();
        let m = &mut self.codec.model;
        match key {
            "m" => m.m = num(key, v)?,
            "n_cs" => m.n_cs = num(key, v)?,
            "d_e" => m.d_e = num(key, v)?,
            "d_mlp" => m.d_mlp = num(key, v)?,
            "heads" => m.heads = num(key, v)?,
            "k" => m.k = num(key, v)?,
            "layers" => m.layers = num(key, v)?,
            "k_m" => m.k_m = num(key, v)?,
            "n_h" => self.codec.n_h = num(key, v)?,
            "latent_scale" => self.codec.latent_scale = num(key, v)?,
            "order" => self.codec.order = v.parse()?,
            "sfg" => self.codec.sfg = num(key, v)?,
            "weights" => self.weights = (!v.is_empty()).then(|| PathBuf::from(v)),
            "seed" => self.seed = num(key, v)?,
            "alpha0" => self.ordo.alpha0 = num(key, v)?,
            "gamma" => self.ordo.gamma = num(key, v)?,
            "steps" => self.ordo.steps = num(key, v)?,
            "lambda" => self.ordo.lambda = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Parses a file's text over the default configuration.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::Order;

    #[test]
    fn parse_overrides_and_roundtrips() {
        let c = RunConfig::parse("# desk run\nm = 16\n n_cs=2 \norder = sfo\nsfg = false\nweights = w.bin\nlambda = 0.0035\n").unwrap();
        assert_eq!(c.codec.model.m, 16);
        assert_eq!(c.codec.model.n_cs, 2);
        assert_eq!(c.codec.order, Order::Sfo);
        assert!(!c.codec.sfg);
        assert_eq!(c.weights, Some(PathBuf::from("w.bin")));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::desk().to_text()).unwrap(), RunConfig::desk());
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("m = 4\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(RunConfig::parse("m = four").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }
}
