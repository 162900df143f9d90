//! Tunable parameter spaces: definition, sampling, validation, and numeric
//! encoding for surrogate models.
//!
//! A space is an ordered list of parameter definitions. Configurations are
//! full assignments of in-domain values, identified by a stable 64-bit
//! content hash so the same knob settings always map to the same id.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Continuous,
    Integer,
    Categorical,
}

/// A single parameter value. JSON form is a bare number or string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Choice(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Float(v) => Some(*v),
            ParamValue::Choice(_) => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterDef {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    #[serde(default)]
    pub log_scale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParamValue>,
}

impl ParameterDef {
    pub fn continuous(name: &str, lower: f64, upper: f64) -> Self {
        Self {
            name: name.to_string(),
            kind: ParamKind::Continuous,
            lower: Some(lower),
            upper: Some(upper),
            choices: Vec::new(),
            log_scale: false,
            default: None,
        }
    }

    pub fn integer(name: &str, lower: i64, upper: i64) -> Self {
        Self {
            name: name.to_string(),
            kind: ParamKind::Integer,
            lower: Some(lower as f64),
            upper: Some(upper as f64),
            choices: Vec::new(),
            log_scale: false,
            default: None,
        }
    }

    pub fn categorical(name: &str, choices: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: ParamKind::Categorical,
            lower: None,
            upper: None,
            choices: choices.iter().map(|s| s.to_string()).collect(),
            log_scale: false,
            default: None,
        }
    }

    pub fn log_scale(mut self) -> Self {
        self.log_scale = true;
        self
    }

    pub fn with_default(mut self, v: ParamValue) -> Self {
        self.default = Some(v);
        self
    }

    fn bounds(&self) -> Result<(f64, f64)> {
        match (self.lower, self.upper) {
            (Some(lo), Some(hi)) => Ok((lo, hi)),
            _ => Err(Error::Validation(format!(
                "parameter '{}' requires lower and upper bounds",
                self.name
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            ParamKind::Continuous | ParamKind::Integer => {
                let (lo, hi) = self.bounds()?;
                if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                    return Err(Error::Validation(format!(
                        "parameter '{}': lower must be < upper and finite",
                        self.name
                    )));
                }
                if self.log_scale && lo <= 0.0 {
                    return Err(Error::Validation(format!(
                        "parameter '{}': log_scale requires lower > 0",
                        self.name
                    )));
                }
                if self.kind == ParamKind::Integer
                    && (lo.fract() != 0.0 || hi.fract() != 0.0)
                {
                    return Err(Error::Validation(format!(
                        "parameter '{}': integer bounds must be whole numbers",
                        self.name
                    )));
                }
                if !self.choices.is_empty() {
                    return Err(Error::Validation(format!(
                        "parameter '{}': choices only valid for categorical",
                        self.name
                    )));
                }
            }
            ParamKind::Categorical => {
                let mut distinct = self.choices.clone();
                distinct.sort();
                distinct.dedup();
                if distinct.len() < 2 || distinct.len() != self.choices.len() {
                    return Err(Error::Validation(format!(
                        "parameter '{}': categorical needs >= 2 distinct choices",
                        self.name
                    )));
                }
                if self.lower.is_some() || self.upper.is_some() || self.log_scale {
                    return Err(Error::Validation(format!(
                        "parameter '{}': bounds/log_scale not valid for categorical",
                        self.name
                    )));
                }
            }
        }
        if let Some(d) = &self.default {
            self.check_value(d)?;
        }
        Ok(())
    }

    /// Canonicalize a raw value into this parameter's domain.
    fn check_value(&self, v: &ParamValue) -> Result<ParamValue> {
        match self.kind {
            ParamKind::Continuous => {
                let (lo, hi) = self.bounds()?;
                let x = v.as_f64().ok_or_else(|| self.type_err(v))?;
                if !x.is_finite() || x < lo || x > hi {
                    return Err(self.domain_err(v));
                }
                Ok(ParamValue::Float(x))
            }
            ParamKind::Integer => {
                let (lo, hi) = self.bounds()?;
                let x = match v {
                    ParamValue::Int(i) => *i,
                    ParamValue::Float(f) if f.fract() == 0.0 && f.is_finite() => *f as i64,
                    _ => return Err(self.type_err(v)),
                };
                if (x as f64) < lo || (x as f64) > hi {
                    return Err(self.domain_err(v));
                }
                Ok(ParamValue::Int(x))
            }
            ParamKind::Categorical => match v {
                ParamValue::Choice(s) if self.choices.iter().any(|x| x == s) => {
                    Ok(ParamValue::Choice(s.clone()))
                }
                _ => Err(self.domain_err(v)),
            },
        }
    }

    fn type_err(&self, v: &ParamValue) -> Error {
        Error::Validation(format!(
            "parameter '{}': value {v:?} has the wrong type",
            self.name
        ))
    }

    fn domain_err(&self, v: &ParamValue) -> Error {
        Error::Validation(format!(
            "parameter '{}': value {v:?} outside domain",
            self.name
        ))
    }

    /// Number of coordinates this parameter contributes to the encoding.
    fn encoded_width(&self) -> usize {
        match self.kind {
            ParamKind::Categorical => self.choices.len(),
            _ => 1,
        }
    }

    /// Default per the declared default or the midpoint rule.
    fn default_value(&self) -> ParamValue {
        if let Some(d) = &self.default {
            return d.clone();
        }
        match self.kind {
            ParamKind::Continuous => {
                let (lo, hi) = self.bounds().expect("validated");
                let mid = if self.log_scale {
                    ((lo.ln() + hi.ln()) / 2.0).exp()
                } else {
                    (lo + hi) / 2.0
                };
                ParamValue::Float(mid)
            }
            ParamKind::Integer => {
                let (lo, hi) = self.bounds().expect("validated");
                let mid = if self.log_scale {
                    ((lo.ln() + hi.ln()) / 2.0).exp()
                } else {
                    (lo + hi) / 2.0
                };
                ParamValue::Int(round_ties_even_clamped(mid, lo, hi))
            }
            ParamKind::Categorical => ParamValue::Choice(self.choices[0].clone()),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> ParamValue {
        match self.kind {
            ParamKind::Continuous => {
                let (lo, hi) = self.bounds().expect("validated");
                let u: f64 = rng.gen();
                let x = if self.log_scale {
                    (lo.ln() + u * (hi.ln() - lo.ln())).exp().clamp(lo, hi)
                } else {
                    lo + u * (hi - lo)
                };
                ParamValue::Float(x)
            }
            ParamKind::Integer => {
                let (lo, hi) = self.bounds().expect("validated");
                let u: f64 = rng.gen();
                let x = if self.log_scale {
                    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
                } else {
                    lo + u * (hi - lo)
                };
                ParamValue::Int(round_ties_even_clamped(x, lo, hi))
            }
            ParamKind::Categorical => {
                let i = rng.gen_range(0..self.choices.len());
                ParamValue::Choice(self.choices[i].clone())
            }
        }
    }
}

fn round_ties_even_clamped(x: f64, lo: f64, hi: f64) -> i64 {
    x.round_ties_even().clamp(lo, hi) as i64
}

/// A full assignment of values to a space's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    config_id: u64,
    values: BTreeMap<String, ParamValue>,
}

impl Configuration {
    pub fn id(&self) -> u64 {
        self.config_id
    }

    pub fn values(&self) -> &BTreeMap<String, ParamValue> {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.values.get(name)
    }

    /// Serialize as the configuration file format: a bare JSON map.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.values).expect("param values serialize")
    }
}

/// Wire form used in `configs.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigurationRecord {
    pub config_id: u64,
    pub values: BTreeMap<String, ParamValue>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigSpace {
    parameters: Vec<ParameterDef>,
}

impl ConfigSpace {
    pub fn new(parameters: Vec<ParameterDef>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &parameters {
            p.validate()?;
            if !seen.insert(p.name.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate parameter name '{}'",
                    p.name
                )));
            }
        }
        Ok(Self { parameters })
    }

    pub fn parameters(&self) -> &[ParameterDef] {
        &self.parameters
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let space: ConfigSpace = serde_json::from_str(json)?;
        Self::new(space.parameters)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("space serializes")
    }

    /// Total length of the numeric encoding.
    pub fn encoded_len(&self) -> usize {
        self.parameters.iter().map(|p| p.encoded_width()).sum()
    }

    /// Build a configuration from raw values, canonicalizing and validating.
    pub fn configuration(&self, raw: &BTreeMap<String, ParamValue>) -> Result<Configuration> {
        if raw.len() != self.parameters.len() {
            return Err(Error::Validation(format!(
                "expected {} values, got {}",
                self.parameters.len(),
                raw.len()
            )));
        }
        let mut values = BTreeMap::new();
        for p in &self.parameters {
            let v = raw.get(&p.name).ok_or_else(|| {
                Error::Validation(format!("missing value for parameter '{}'", p.name))
            })?;
            values.insert(p.name.clone(), p.check_value(v)?);
        }
        let config_id = self.hash_values(&values);
        Ok(Configuration { config_id, values })
    }

    pub fn configuration_from_json(&self, json: &str) -> Result<Configuration> {
        let raw: BTreeMap<String, ParamValue> = serde_json::from_str(json)?;
        self.configuration(&raw)
    }

    /// Content hash over canonical values in space order. Insensitive to the
    /// key ordering of the input map by construction.
    fn hash_values(&self, values: &BTreeMap<String, ParamValue>) -> u64 {
        let mut bytes = Vec::with_capacity(self.parameters.len() * 16);
        for p in &self.parameters {
            bytes.extend_from_slice(p.name.as_bytes());
            bytes.push(0x1f);
            match &values[&p.name] {
                ParamValue::Float(f) => {
                    bytes.push(b'f');
                    bytes.extend_from_slice(&f.to_bits().to_le_bytes());
                }
                ParamValue::Int(i) => {
                    bytes.push(b'i');
                    bytes.extend_from_slice(&i.to_le_bytes());
                }
                ParamValue::Choice(s) => {
                    bytes.push(b'c');
                    bytes.extend_from_slice(s.as_bytes());
                }
            }
            bytes.push(0x1e);
        }
        crate::rng::hash_bytes(&bytes)
    }

    /// Draw `n` in-domain configurations. Deterministic for a given seed;
    /// log-scale parameters are sampled uniformly in log space.
    pub fn sample_random(&self, rng_seed: u64, n: usize) -> Result<Vec<Configuration>> {
        if self.parameters.is_empty() {
            return Err(Error::Domain("cannot sample from an empty space".into()));
        }
        if n < 1 {
            return Err(Error::Domain("sample count must be >= 1".into()));
        }
        let mut rng = derive_rng(rng_seed, "space.sample", &[]);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut values = BTreeMap::new();
            for p in &self.parameters {
                values.insert(p.name.clone(), p.sample(&mut rng));
            }
            let config_id = self.hash_values(&values);
            out.push(Configuration { config_id, values });
        }
        Ok(out)
    }

    /// The default configuration: declared defaults, or the midpoint rule
    /// (geometric midpoint for log-scale, first choice for categorical).
    pub fn default_config(&self) -> Result<Configuration> {
        if self.parameters.is_empty() {
            return Err(Error::Domain("empty space has no default".into()));
        }
        let mut values = BTreeMap::new();
        for p in &self.parameters {
            values.insert(p.name.clone(), p.default_value());
        }
        let config_id = self.hash_values(&values);
        Ok(Configuration { config_id, values })
    }

    /// Encode to a fixed-width numeric vector: continuous/integer normalized
    /// to [0,1] (log-space first if log-scale), categoricals one-hot.
    pub fn encode<T: Scalar>(&self, config: &Configuration) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for p in &self.parameters {
            let v = config.get(&p.name).ok_or_else(|| {
                Error::Validation(format!("configuration missing parameter '{}'", p.name))
            })?;
            let v = p.check_value(v)?;
            match p.kind {
                ParamKind::Continuous | ParamKind::Integer => {
                    let (lo, hi) = p.bounds()?;
                    let x = v.as_f64().expect("numeric");
                    let z = if p.log_scale {
                        (x.ln() - lo.ln()) / (hi.ln() - lo.ln())
                    } else {
                        (x - lo) / (hi - lo)
                    };
                    out.push(c::<T>(z));
                }
                ParamKind::Categorical => {
                    let chosen = match &v {
                        ParamValue::Choice(s) => s,
                        _ => unreachable!("canonicalized"),
                    };
                    for ch in &p.choices {
                        out.push(if ch == chosen { T::one() } else { T::zero() });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode`]: integers round half-to-even, categoricals take
    /// the arg-max coordinate of their one-hot block.
    pub fn decode<T: Scalar>(&self, encoded: &[T]) -> Result<Configuration> {
        if encoded.len() != self.encoded_len() {
            return Err(Error::Validation(format!(
                "encoded vector has length {}, expected {}",
                encoded.len(),
                self.encoded_len()
            )));
        }
        let mut values = BTreeMap::new();
        let mut i = 0;
        for p in &self.parameters {
            match p.kind {
                ParamKind::Continuous | ParamKind::Integer => {
                    let (lo, hi) = p.bounds()?;
                    let z = encoded[i].to_f64().unwrap_or(f64::NAN);
                    if !z.is_finite() || !(0.0..=1.0).contains(&z) {
                        return Err(Error::Validation(format!(
                            "coordinate {z} for '{}' outside [0,1]",
                            p.name
                        )));
                    }
                    let x = if p.log_scale {
                        (lo.ln() + z * (hi.ln() - lo.ln())).exp().clamp(lo, hi)
                    } else {
                        lo + z * (hi - lo)
                    };
                    values.insert(
                        p.name.clone(),
                        match p.kind {
                            ParamKind::Integer => {
                                ParamValue::Int(round_ties_even_clamped(x, lo, hi))
                            }
                            _ => ParamValue::Float(x),
                        },
                    );
                    i += 1;
                }
                ParamKind::Categorical => {
                    let block = &encoded[i..i + p.choices.len()];
                    let mut best = 0;
                    for (j, &v) in block.iter().enumerate() {
                        if v > block[best] {
                            best = j;
                        }
                    }
                    values.insert(p.name.clone(), ParamValue::Choice(p.choices[best].clone()));
                    i += p.choices.len();
                }
            }
        }
        self.configuration(&values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_space() -> ConfigSpace {
        ConfigSpace::new(vec![
            ParameterDef::continuous("x", 0.0, 100.0),
            ParameterDef::continuous("rate", 1.0, 10_000.0).log_scale(),
            ParameterDef::integer("workers", 1, 64),
            ParameterDef::categorical("policy", &["a", "b", "c"]),
        ])
        .unwrap()
    }

    #[test]
    fn sampling_is_deterministic_and_in_domain() {
        let space = ConfigSpace::new(vec![ParameterDef::continuous("p", 0.0, 1.0)]).unwrap();
        let a = space.sample_random(7, 3).unwrap();
        let b = space.sample_random(7, 3).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id(), y.id());
            let v = x.get("p").unwrap().as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn categorical_sampling_covers_choices() {
        // brute-force frequency check over 1000 draws
        let space = ConfigSpace::new(vec![ParameterDef::categorical("c", &["a", "b"])]).unwrap();
        let draws = space.sample_random(11, 1000).unwrap();
        let count_a = draws
            .iter()
            .filter(|cfg| cfg.get("c") == Some(&ParamValue::Choice("a".into())))
            .count();
        assert!(count_a > 0 && count_a < 1000);
    }

    #[test]
    fn zero_samples_is_a_domain_error() {
        let space = ConfigSpace::new(vec![ParameterDef::continuous("p", 0.0, 1.0)]).unwrap();
        assert!(matches!(space.sample_random(1, 0), Err(Error::Domain(_))));
        let empty = ConfigSpace::new(vec![]).unwrap();
        assert!(matches!(empty.sample_random(1, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn defaults_follow_declared_then_midpoint() {
        let space = ConfigSpace::new(vec![
            ParameterDef::integer("p", 0, 10).with_default(ParamValue::Int(5)),
            ParameterDef::continuous("q", 2.0, 10.0),
            ParameterDef::continuous("r", 1.0, 10_000.0).log_scale(),
            ParameterDef::categorical("s", &["x", "y"]),
        ])
        .unwrap();
        let d = space.default_config().unwrap();
        assert_eq!(d.get("p"), Some(&ParamValue::Int(5)));
        assert_eq!(d.get("q"), Some(&ParamValue::Float(6.0)));
        let r = d.get("r").unwrap().as_f64().unwrap();
        assert!((r - 100.0).abs() < 1e-9);
        assert_eq!(d.get("s"), Some(&ParamValue::Choice("x".into())));
        // hash stability under repeated construction
        assert_eq!(d.id(), space.default_config().unwrap().id());
    }

    #[test]
    fn encoding_matches_definitions() {
        let space = small_space();
        let mut raw = BTreeMap::new();
        raw.insert("x".to_string(), ParamValue::Float(25.0));
        raw.insert("rate".to_string(), ParamValue::Float(100.0));
        raw.insert("workers".to_string(), ParamValue::Int(1));
        raw.insert("policy".to_string(), ParamValue::Choice("b".into()));
        let cfg = space.configuration(&raw).unwrap();
        let enc: Vec<f64> = space.encode(&cfg).unwrap();
        assert!((enc[0] - 0.25).abs() < 1e-12);
        assert!((enc[1] - 0.5).abs() < 1e-12); // log10(100)/log10(10000)
        assert!((enc[2] - 0.0).abs() < 1e-12);
        assert_eq!(&enc[3..6], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let space = small_space();
        let mut raw = BTreeMap::new();
        raw.insert("x".to_string(), ParamValue::Float(101.0));
        raw.insert("rate".to_string(), ParamValue::Float(100.0));
        raw.insert("workers".to_string(), ParamValue::Int(1));
        raw.insert("policy".to_string(), ParamValue::Choice("b".into()));
        assert!(matches!(
            space.configuration(&raw),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn config_id_ignores_input_key_order() {
        let space = small_space();
        let json_a = r#"{"x": 25.0, "rate": 100.0, "workers": 3, "policy": "b"}"#;
        let json_b = r#"{"policy": "b", "workers": 3, "x": 25.0, "rate": 100.0}"#;
        let a = space.configuration_from_json(json_a).unwrap();
        let b = space.configuration_from_json(json_b).unwrap();
        assert_eq!(a.id(), b.id());
    }

    #[test]
    fn encode_decode_round_trip() {
        let space = small_space();
        for cfg in space.sample_random(3, 64).unwrap() {
            let enc: Vec<f64> = space.encode(&cfg).unwrap();
            let back = space.decode(&enc).unwrap();
            assert_eq!(back.get("workers"), cfg.get("workers"));
            assert_eq!(back.get("policy"), cfg.get("policy"));
            let orig = cfg.get("x").unwrap().as_f64().unwrap();
            let rt = back.get("x").unwrap().as_f64().unwrap();
            assert!((orig - rt).abs() < 1e-9);
            let orig = cfg.get("rate").unwrap().as_f64().unwrap();
            let rt = back.get("rate").unwrap().as_f64().unwrap();
            assert!((orig - rt).abs() / orig < 1e-9);
        }
    }

    #[test]
    fn sampled_configs_pass_validation() {
        let space = small_space();
        for cfg in space.sample_random(5, 200).unwrap() {
            assert!(space.configuration(cfg.values()).is_ok());
        }
    }

    #[test]
    fn space_json_round_trip() {
        let space = small_space();
        let json = serde_json::to_string(&space.to_json()).unwrap();
        let back = ConfigSpace::from_json(&json).unwrap();
        assert_eq!(back.encoded_len(), space.encoded_len());
        assert_eq!(
            back.default_config().unwrap().id(),
            space.default_config().unwrap().id()
        );
    }

    #[test]
    fn invalid_definitions_rejected() {
        assert!(ConfigSpace::new(vec![ParameterDef::continuous("p", 1.0, 1.0)]).is_err());
        assert!(ConfigSpace::new(vec![ParameterDef::continuous("p", -1.0, 1.0).log_scale()])
            .is_err());
        assert!(ConfigSpace::new(vec![ParameterDef::categorical("c", &["a"])]).is_err());
        assert!(ConfigSpace::new(vec![ParameterDef::categorical("c", &["a", "a"])]).is_err());
        assert!(ConfigSpace::new(vec![
            ParameterDef::continuous("p", 0.0, 1.0),
            ParameterDef::continuous("p", 0.0, 2.0),
        ])
        .is_err());
    }

    #[test]
    fn integer_rounding_is_half_to_even() {
        assert_eq!(round_ties_even_clamped(2.5, 0.0, 10.0), 2);
        assert_eq!(round_ties_even_clamped(3.5, 0.0, 10.0), 4);
        assert_eq!(round_ties_even_clamped(2.6, 0.0, 10.0), 3);
        assert_eq!(round_ties_even_clamped(10.4, 0.0, 10.0), 10);
    }
}
