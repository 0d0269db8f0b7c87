//! `name[:key=value,...]` method descriptors.

use std::fmt;
use std::str::FromStr;

use xplain_core::analyzer::{Method, MethodId};
use xplain_core::prop::Patterns;

use crate::error::{CliError, CliResult, Stage};

/// A method id with string parameters, validated against the method's keys.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub id: MethodId,
    pub params: Vec<(String, String)>,
}

pub fn parse_key_value(s: &str) -> CliResult<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(CliError::Usage(format!("expected key=value, got `{s}`"))),
    }
}

impl MethodSpec {
    pub fn new(id: MethodId) -> Self {
        Self { id, params: Vec::new() }
    }

    /// Adds parameters; later values win.
    pub fn with_params(mut self, extra: &[(String, String)]) -> CliResult<Self> {
        self.params.extend_from_slice(extra);
        self.check_keys()?;
        Ok(self)
    }

    fn check_keys(&self) -> CliResult<()> {
        match self.params.iter().find(|(k, _)| !self.id.keys().contains(&k.as_str())) {
            Some((k, _)) => Err(CliError::Usage(format!(
                "unknown parameter `{k}` for method `{}` (accepted: {})",
                self.id,
                if self.id.keys().is_empty() { "none".to_string() } else { self.id.keys().join(", ") }
            ))),
            None => Ok(()),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.params.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.params.retain(|(k, _)| k != key);
        self.params.push((key.to_string(), value.into()));
    }

    pub fn to_method(&self, patterns: Option<Patterns>) -> CliResult<Method> {
        Method::from_params(self.id, &self.params, patterns).at_compile()
    }
}

impl FromStr for MethodSpec {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let id: MethodId = name.trim().parse().map_err(|e| match e {
            xplain_core::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Usage(other.to_string()),
        })?;
        let params = rest
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(parse_key_value)
            .collect::<CliResult<Vec<_>>>()?;
        let spec = Self { id, params };
        spec.check_keys()?;
        Ok(spec)
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id)?;
        for (i, (k, v)) in self.params.iter().enumerate() {
            write!(f, "{}{k}={v}", if i == 0 { ':' } else { ',' })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_names_and_params() {
        let s: MethodSpec = "integrated_gradients:steps=8,reference=0".parse().unwrap();
        assert_eq!(s.id, MethodId::IntegratedGradients);
        assert_eq!(s.get("steps"), Some("8"));
        assert_eq!(s.to_string(), "integrated_gradients:steps=8,reference=0");
        let g: MethodSpec = "gradient".parse().unwrap();
        assert!(g.params.is_empty());
    }

    #[test]
    fn rejects_unknown_names_and_keys() {
        for bad in ["nope", "gradient:steps=3", "lrp_epsilon:eps=1", "smoothgrad:n"] {
            let e = bad.parse::<MethodSpec>().unwrap_err();
            assert!(matches!(e, CliError::Usage(_)), "{bad}");
        }
        let s: MethodSpec = "smoothgrad".parse().unwrap();
        assert!(s.with_params(&[("bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn later_params_win() {
        let s: MethodSpec = "occlusion:psize=4".parse().unwrap();
        let s = s.with_params(&[("psize".into(), "2".into())]).unwrap();
        assert_eq!(s.get("psize"), Some("2"));
    }
}
