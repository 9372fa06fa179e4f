use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use winsketch::query::EngineConfig;
use winsketch::{CacheConfig, RuleSpec, SketchConfig};

pub const ENV_LISTEN: &str = "WINSKETCH_LISTEN";
pub const ENV_SEED: &str = "WINSKETCH_SEED";

/// Service settings. Family sections only need the keys they change; the
/// rest come from that family's defaults.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen_addr: String,
    pub rules_file: Option<PathBuf>,
    pub snapshot_path: Option<PathBuf>,
    pub exact_buffer_slack: f64,
    pub min_retention_ms: i64,
    pub quantile: SketchConfig,
    pub gsum: SketchConfig,
    pub sample: SketchConfig,
    pub max_live_instances: Option<usize>,
    /// Alert events kept for `/api/v1/alerts`.
    pub alert_log_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen_addr: "127.0.0.1:9464".into(),
            rules_file: None,
            snapshot_path: None,
            exact_buffer_slack: 2.0,
            min_retention_ms: 3_600_000,
            quantile: SketchConfig::quantile_default(),
            gsum: SketchConfig::gsum_default(),
            sample: SketchConfig::sample_default(),
            max_live_instances: None,
            alert_log_capacity: 1_000,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    listen_addr: Option<String>,
    rules_file: Option<PathBuf>,
    snapshot_path: Option<PathBuf>,
    exact_buffer_slack: Option<f64>,
    min_retention_ms: Option<i64>,
    seed: Option<u64>,
    max_live_instances: Option<usize>,
    alert_log_capacity: Option<usize>,
    quantile: Option<toml::Table>,
    gsum: Option<toml::Table>,
    sample: Option<toml::Table>,
}

fn overlay(base: SketchConfig, patch: Option<toml::Table>, name: &str) -> anyhow::Result<SketchConfig> {
    let Some(patch) = patch else {
        return Ok(base);
    };
    let mut table = toml::Table::try_from(&base)?;
    for (k, v) in patch {
        if !table.contains_key(&k) {
            bail!("unknown key `{k}` in [{name}]");
        }
        table.insert(k, v);
    }
    table
        .try_into()
        .with_context(|| format!("invalid [{name}] section"))
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let raw: RawConfig = toml::from_str(text)?;
        let d = Self::default();
        let mut c = Self {
            listen_addr: raw.listen_addr.unwrap_or(d.listen_addr),
            rules_file: raw.rules_file,
            snapshot_path: raw.snapshot_path,
            exact_buffer_slack: raw.exact_buffer_slack.unwrap_or(d.exact_buffer_slack),
            min_retention_ms: raw.min_retention_ms.unwrap_or(d.min_retention_ms),
            quantile: overlay(d.quantile, raw.quantile, "quantile")?,
            gsum: overlay(d.gsum, raw.gsum, "gsum")?,
            sample: overlay(d.sample, raw.sample, "sample")?,
            max_live_instances: raw.max_live_instances,
            alert_log_capacity: raw.alert_log_capacity.unwrap_or(d.alert_log_capacity),
        };
        if let Some(seed) = raw.seed {
            c.set_seed(seed);
        }
        Ok(c)
    }

    /// Read a TOML file; relative rule and snapshot paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut c = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.rules_file, &mut c.snapshot_path].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn set_seed(&mut self, seed: u64) {
        for c in [&mut self.quantile, &mut self.gsum, &mut self.sample] {
            c.seed = seed;
        }
    }

    /// Apply `WINSKETCH_LISTEN` and `WINSKETCH_SEED`.
    pub fn apply_env(&mut self) -> anyhow::Result<()> {
        self.apply_overrides(std::env::var(ENV_LISTEN).ok(), std::env::var(ENV_SEED).ok())
    }

    pub fn apply_overrides(&mut self, listen: Option<String>, seed: Option<String>) -> anyhow::Result<()> {
        if let Some(l) = listen {
            self.listen_addr = l;
        }
        if let Some(s) = seed {
            let seed = s.trim().parse().with_context(|| format!("{ENV_SEED}={s} is not a u64"))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<SocketAddr> {
        let addr: SocketAddr = self
            .listen_addr
            .parse()
            .with_context(|| format!("listen_addr `{}` is not host:port", self.listen_addr))?;
        if self.exact_buffer_slack.is_nan() || self.exact_buffer_slack < 1.0 {
            bail!("exact_buffer_slack must be >= 1");
        }
        self.engine_config().validate()?;
        Ok(addr)
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            cache: CacheConfig {
                quantile: self.quantile.clone(),
                gsum: self.gsum.clone(),
                sample: self.sample.clone(),
                max_live_instances: self.max_live_instances,
            },
            exact_slack: self.exact_buffer_slack,
            min_retention_ms: self.min_retention_ms,
            use_cache: true,
        }
    }
}

/// Rules file: a JSON array of rule specs.
pub fn load_rules(path: &Path) -> anyhow::Result<Vec<RuleSpec>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing rules in {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_family_defaults() {
        let c = ServiceConfig::from_toml("listen_addr = \"0.0.0.0:1\"\nseed = 9\n[gsum]\nk_eh = 30\n").unwrap();
        assert_eq!(c.gsum.k_eh, 30);
        assert_eq!(c.gsum.map_threshold_bytes, SketchConfig::gsum_default().map_threshold_bytes);
        assert_eq!(c.quantile.k_eh, 50);
        assert_eq!(c.sample.seed, 9);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ServiceConfig::from_toml("[gsum]\nkeh = 3\n").is_err());
        assert!(ServiceConfig::from_toml("bogus = 1\n").is_err());
        let c = ServiceConfig::from_toml("exact_buffer_slack = 0.5\n").unwrap();
        assert!(c.validate().is_err());
        let c = ServiceConfig::from_toml("listen_addr = \"nowhere\"\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides() {
        let mut c = ServiceConfig::default();
        c.apply_overrides(Some("127.0.0.1:7000".into()), Some("42".into())).unwrap();
        assert_eq!(c.listen_addr, "127.0.0.1:7000");
        assert_eq!(c.quantile.seed, 42);
        assert!(c.apply_overrides(None, Some("x".into())).is_err());
    }
}
