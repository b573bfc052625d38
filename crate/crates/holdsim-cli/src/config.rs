//! TOML configuration schema and its resolution into experiment settings.
//!
//! The file format mirrors the library types section by section:
//!
//! ```toml
//! seed = 42
//!
//! [model]
//! kind = "linear"          # or "nonlinear"
//! system = "scalar_s1"     # named system; see `holdsim --verb list-systems`
//!
//! [dist]
//! kind = "exponential"     # deterministic | uniform | exponential | gamma
//! rate = 1.0
//!
//! [regime]
//! kind = "r1"              # r1 | r2 | r3
//! delta = 0.5              # r1 only; r2 takes `c` instead
//!
//! [sweep]
//! n_values = [256, 512, 1024]
//! replications = 100
//! horizon = 1.0
//! pitch = 0.00390625
//!
//! [metrics]
//! kinds = ["lln_p1", "clt"]
//! ```
//!
//! Unknown keys anywhere are rejected, and every resolution error names the
//! offending key (for example `regime.c required`). The raw text is echoed
//! into the run manifest, so a round trip through the manifest reproduces the
//! exact configuration.

use std::path::Path;

use serde::Deserialize;

use holdsim::experiments::{ExperimentConfig, MetricKind, ModelSpec, Regime};
use holdsim::linalg::{LinearSystem, Vector};
use holdsim::nonlindyn;
use holdsim::renewal::Interarrival;

use crate::CliError;

/// Direct image of the TOML file. Optional sections stay optional here so the
/// verbs can demand only what they use.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: Option<ModelSection>,
    pub dist: DistSection,
    #[serde(default)]
    pub regime: Option<RegimeSection>,
    pub sweep: SweepSection,
    #[serde(default)]
    pub metrics: Option<MetricsSection>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub system: String,
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistSection {
    pub kind: String,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default)]
    pub shape: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    pub kind: String,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub n_values: Vec<u64>,
    pub replications: u32,
    pub horizon: f64,
    pub pitch: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub kinds: Vec<String>,
}

/// Everything the `check` verb needs: the gap law plus sampling scale taken
/// from the sweep section (largest n, its replication count and horizon) and
/// the mesh pitch for the fluctuation variance check.
#[derive(Debug, Clone)]
pub struct CheckParams {
    pub dist: Interarrival,
    pub n: u64,
    pub horizon: f64,
    pub replications: u32,
    pub pitch: f64,
    pub seed: u64,
}

/// Reads and parses a config file. Returns the parsed form together with the
/// raw text so the manifest can echo it byte for byte.
pub fn parse_config(path: &Path) -> Result<(RawConfig, String), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
    let raw = parse_config_str(&text)?;
    Ok((raw, text))
}

/// Parses config text; exposed separately so tests and the manifest round
/// trip can reuse it.
pub fn parse_config_str(text: &str) -> Result<RawConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Parse(format!("config parse error: {e}")))
}

fn parse_err(msg: impl Into<String>) -> CliError {
    CliError::Parse(msg.into())
}

fn resolve_dist(d: &DistSection) -> Result<Interarrival, CliError> {
    let need =
        |field: &str, v: Option<f64>| v.ok_or_else(|| parse_err(format!("dist.{field} required")));
    let dist = match d.kind.as_str() {
        "deterministic" => Interarrival::Deterministic { a: need("a", d.a)? },
        "uniform" => Interarrival::Uniform {
            a: need("a", d.a)?,
            b: need("b", d.b)?,
        },
        "exponential" => Interarrival::Exponential {
            rate: need("rate", d.rate)?,
        },
        "gamma" => Interarrival::Gamma {
            shape: need("shape", d.shape)?,
            scale: need("scale", d.scale)?,
        },
        other => {
            return Err(parse_err(format!(
                "dist.kind {other:?} must be one of deterministic, uniform, exponential, gamma"
            )))
        }
    };
    dist.validate(false)
        .map_err(|e| parse_err(format!("dist: {e}")))?;
    Ok(dist)
}

fn resolve_regime(r: &RegimeSection) -> Result<Regime, CliError> {
    match r.kind.as_str() {
        "r1" => Ok(Regime::R1 {
            delta: r.delta.ok_or_else(|| parse_err("regime.delta required"))?,
        }),
        "r2" => Ok(Regime::R2 {
            c: r.c.ok_or_else(|| parse_err("regime.c required"))?,
        }),
        "r3" => Ok(Regime::R3),
        other => Err(parse_err(format!(
            "regime.kind {other:?} must be one of r1, r2, r3"
        ))),
    }
}

fn resolve_model(m: &ModelSection) -> Result<ModelSpec, CliError> {
    match m.kind.as_str() {
        "linear" => {
            let base = match m.system.as_str() {
                "scalar_s1" => LinearSystem::scalar_s1(),
                "jordan_pair" => LinearSystem::jordan_pair(),
                other => {
                    return Err(parse_err(format!(
                        "model.system {other:?} unknown; linear systems: scalar_s1, jordan_pair"
                    )))
                }
            };
            let sys = match &m.y0 {
                Some(v) => LinearSystem::new(
                    base.a().clone(),
                    base.b().clone(),
                    base.k().clone(),
                    Vector::from_column_slice(v),
                )
                .map_err(|e| parse_err(format!("model.y0: {e}")))?,
                None => base,
            };
            Ok(ModelSpec::Linear(sys))
        }
        "nonlinear" => {
            let base = nonlindyn::builtin(&m.system).ok_or_else(|| {
                parse_err(format!(
                    "model.system {:?} unknown; nonlinear systems: {}",
                    m.system,
                    nonlindyn::builtin_names().join(", ")
                ))
            })?;
            let sys = match &m.y0 {
                Some(v) => base
                    .with_y0(Vector::from_column_slice(v))
                    .map_err(|e| parse_err(format!("model.y0: {e}")))?,
                None => base,
            };
            Ok(ModelSpec::Nonlinear(sys))
        }
        other => Err(parse_err(format!(
            "model.kind {other:?} must be linear or nonlinear"
        ))),
    }
}

fn parse_metric(s: &str) -> Result<MetricKind, CliError> {
    if s == "clt" {
        return Ok(MetricKind::CltSup);
    }
    if s == "regime3" {
        return Ok(MetricKind::Regime3Sup);
    }
    if let Some(rest) = s.strip_prefix("lln_p") {
        let p: f64 = rest
            .parse()
            .map_err(|_| parse_err(format!("metrics.kinds: bad moment power in {s:?}")))?;
        return Ok(MetricKind::LlnSup { p });
    }
    Err(parse_err(format!(
        "metrics.kinds entry {s:?} must be lln_p<power>, clt, or regime3"
    )))
}

/// Resolves a raw config into a full experiment description for the `sweep`
/// and `path` verbs. `seed_override` comes from `--seed`.
pub fn resolve_experiment(
    raw: &RawConfig,
    seed_override: Option<u64>,
) -> Result<ExperimentConfig, CliError> {
    let model = raw
        .model
        .as_ref()
        .ok_or_else(|| parse_err("model section required"))?;
    let regime = raw
        .regime
        .as_ref()
        .ok_or_else(|| parse_err("regime section required"))?;
    let metrics_sec = raw
        .metrics
        .as_ref()
        .ok_or_else(|| parse_err("metrics section required"))?;
    let metrics = metrics_sec
        .kinds
        .iter()
        .map(|s| parse_metric(s))
        .collect::<Result<Vec<_>, _>>()?;

    let cfg = ExperimentConfig {
        model: resolve_model(model)?,
        dist: resolve_dist(&raw.dist)?,
        regime: resolve_regime(regime)?,
        n_values: raw.sweep.n_values.clone(),
        replications: raw.sweep.replications,
        horizon: raw.sweep.horizon,
        pitch: raw.sweep.pitch,
        seed: seed_override.unwrap_or(raw.seed),
        metrics,
    };
    cfg.validate().map_err(|e| parse_err(e.to_string()))?;
    Ok(cfg)
}

/// Resolves the parts the `check` verb uses. The model, regime, and metrics
/// sections may be absent.
pub fn resolve_check(raw: &RawConfig, seed_override: Option<u64>) -> Result<CheckParams, CliError> {
    let dist = resolve_dist(&raw.dist)?;
    let n = *raw
        .sweep
        .n_values
        .last()
        .ok_or_else(|| parse_err("sweep.n_values must not be empty"))?;
    Ok(CheckParams {
        dist,
        n,
        horizon: raw.sweep.horizon,
        replications: raw.sweep.replications,
        pitch: raw.sweep.pitch,
        seed: seed_override.unwrap_or(raw.seed),
    })
}
