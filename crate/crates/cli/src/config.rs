//! Run configuration: file loading, flag overlay, grid syntax.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use repmut::experiments::ReferenceMode;
use repmut::model::{self, ModelConfig, PRESETS};
use repmut::LinearGaussianModel;
use serde::{Deserialize, Serialize};

/// Bad invocation; reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

/// Everything a command reads. Every field is optional; commands fill in
/// their own defaults and the resolved copy is echoed next to the outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ns: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nx: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_particles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?,
        };
        Ok(parsed)
    }

    /// Fields set in `other` win.
    pub fn overlay(&mut self, other: &RunConfig) {
        overlay!(self, other; preset, model, seed, dt, delta_d, t_end, ns, r, s, r_grid, s_grid, nx, n_particles, variant, eps, reference, t_max);
    }

    /// Inline model if given, otherwise the named preset (or `default`).
    /// The resolved model is stored back so the echo is self-contained.
    pub fn resolve_model(&mut self, default: &str) -> Result<LinearGaussianModel> {
        if let Some(m) = &self.model {
            return Ok(m.build()?);
        }
        let name = self.preset.get_or_insert_with(|| default.to_string()).clone();
        if !PRESETS.contains(&name.as_str()) {
            return usage(format!("unknown preset '{name}'; available presets: {}", PRESETS.join(", ")));
        }
        let m = model::preset(&name)?;
        self.model = Some(m.to_config());
        Ok(m)
    }
}

/// `log:a:b:n`, `lin:a:b:n`, or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let spec = spec.trim();
    let bad = |why: &str| usage(format!("invalid grid '{spec}': {why}"));
    let values = if let Some(rest) = spec.strip_prefix("log:").or_else(|| spec.strip_prefix("lin:")) {
        let log = spec.starts_with("log:");
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return bad("expected <a>:<b>:<n>");
        }
        let (Ok(a), Ok(b), Ok(n)) = (parts[0].parse::<f64>(), parts[1].parse::<f64>(), parts[2].parse::<usize>()) else {
            return bad("could not parse bounds or count");
        };
        if log && !(a > 0.0 && b > 0.0) {
            return bad("log grid needs positive bounds");
        }
        let (a, b) = if log { (a.ln(), b.ln()) } else { (a, b) };
        (0..n)
            .map(|k| {
                let v = if n == 1 { a } else { a + (b - a) * k as f64 / (n - 1) as f64 };
                if log {
                    v.exp()
                } else {
                    v
                }
            })
            .collect()
    } else {
        let mut out = Vec::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.parse::<f64>() {
                Ok(v) => out.push(v),
                Err(_) => return bad(&format!("'{item}' is not a number")),
            }
        }
        out
    };
    if values.is_empty() {
        return bad("grid is empty");
    }
    if values.iter().any(|v: &f64| !v.is_finite()) {
        return bad("non-finite value");
    }
    Ok(values)
}
