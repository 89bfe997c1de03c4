//! Training configuration files.
//!
//! A config is a TOML document with a `version` key, an optional `preset`
//! (`"full"` or `"desk"`, default `"full"`) and any training settings that
//! override the preset:
//!
//! ```toml
//! version = 1
//! preset = "desk"
//! seed = 7
//! final_iters = 300
//!
//! [loss]
//! similarity = "mi"
//! hinge_weight = 0.0
//! ```

use patchmorph::trainer::TrainConfig;

pub const CONFIG_VERSION: i64 = 1;

/// Parse a config document into a training configuration.
pub fn parse_config(text: &str) -> Result<TrainConfig, String> {
    let mut doc: toml::Table = text.parse().map_err(|e| format!("config is not valid TOML: {e}"))?;
    match doc.remove("version") {
        Some(toml::Value::Integer(CONFIG_VERSION)) => {}
        Some(v) => return Err(format!("unsupported config version {v}, expected {CONFIG_VERSION}")),
        None => return Err("config lacks the `version` key".into()),
    }
    let base = match doc.remove("preset") {
        None => TrainConfig::full(),
        Some(toml::Value::String(s)) if s == "full" => TrainConfig::full(),
        Some(toml::Value::String(s)) if s == "desk" => TrainConfig::desk(),
        Some(v) => return Err(format!("unknown preset {v}; use \"full\" or \"desk\"")),
    };
    let mut merged = toml::Table::try_from(&base).map_err(|e| e.to_string())?;
    merge(&mut merged, doc);
    let cfg: TrainConfig = merged.try_into().map_err(|e| format!("invalid config: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Overlay `over` onto `base`, descending into nested tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// The document that reproduces `cfg` exactly.
pub fn render_config(cfg: &TrainConfig) -> String {
    let mut doc = toml::Table::new();
    doc.insert("version".into(), toml::Value::Integer(CONFIG_VERSION));
    let body = toml::Table::try_from(cfg).expect("training config serializes to a table");
    doc.extend(body);
    toml::to_string(&doc).expect("table renders")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_overrides() {
        let cfg = parse_config("version = 1\npreset = \"desk\"\nseed = 9\n[loss]\nhinge_weight = 0.0\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.loss.hinge_weight, 0.0);
        assert_eq!(cfg.loss.bending_weight, TrainConfig::desk().loss.bending_weight);
        assert_eq!(cfg.n_scales, 3);
    }

    #[test]
    fn version_is_required() {
        assert!(parse_config("seed = 1").unwrap_err().contains("version"));
        assert!(parse_config("version = 2").unwrap_err().contains("version"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_config("version = 1\nsede = 1\n").is_err());
    }

    #[test]
    fn rendered_config_round_trips() {
        let mut cfg = TrainConfig::desk();
        cfg.seed = 3;
        cfg.lr = 5e-4;
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
    }
}
