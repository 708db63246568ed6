//! Run configuration: TOML file, then `--set` overrides, then dedicated flags.

use std::path::Path;

use lmk3d_core::cost::Sweep;
use lmk3d_core::data::SynthSpec;
use lmk3d_core::network::{ModelConfig, Variant};
use lmk3d_core::train::{default_lr, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

/// Everything a command reads. The top-level `seed` drives synthesis,
/// initialization and benchmarking.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: Sweep,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

/// Applies one `a.b.c=value` override to `table`.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {spec:?}")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad --set key {key:?}")));
    }
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

/// Reads the optional config file and applies overrides in order: `--set`
/// entries, then `--seed`, then `--variant`. An unset `train.lr` takes the
/// variant's default.
pub fn resolve(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    variant: Option<Variant>,
) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for s in sets {
        apply_override(&mut table, s)?;
    }
    // synth.seed is derived; it may only repeat the top-level seed (as the
    // resolved-config echo does)
    let top = table.get("seed").cloned().unwrap_or(Value::Integer(0));
    if let Some(Value::Table(synth)) = table.get("synth") {
        if synth.get("seed").is_some_and(|s| *s != top) {
            return Err(CliError::Usage("synth.seed is derived from the top-level seed; set `seed` or --seed".into()));
        }
    }
    let lr_given = table.get("train").and_then(Value::as_table).is_some_and(|t| t.contains_key("lr"));
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    if !lr_given {
        cfg.train.lr = default_lr(cfg.model.variant);
    }
    cfg.synth.seed = cfg.seed;
    Ok(cfg)
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse_types() {
        let sets = [
            "train.lr=0.001".to_string(),
            "model.channels=[4, 8]".to_string(),
            "model.variant=anchor_based".to_string(),
            "synth.count = 3".to_string(),
        ];
        let cfg = resolve(None, &sets, Some(9), None).unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.model.channels, vec![4, 8]);
        assert_eq!(cfg.model.variant, Variant::AnchorBased);
        assert_eq!(cfg.synth.count, 3);
        assert_eq!((cfg.seed, cfg.synth.seed), (9, 9));
    }

    #[test]
    fn flags_win_over_sets() {
        let cfg = resolve(None, &["seed=3".into(), "model.variant=anchor_based".into()], Some(4), Some(Variant::AnchorFree))
            .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model.variant, Variant::AnchorFree);
    }

    #[test]
    fn lr_defaults_follow_the_variant() {
        let ab = resolve(None, &[], None, Some(Variant::AnchorBased)).unwrap();
        assert_eq!(ab.train.lr, default_lr(Variant::AnchorBased));
        let af = resolve(None, &[], None, None).unwrap();
        assert_eq!(af.train.lr, default_lr(Variant::AnchorFree));
        let set = resolve(None, &["train.lr=0.01".into()], None, Some(Variant::AnchorBased)).unwrap();
        assert_eq!(set.train.lr, 0.01);
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        for bad in ["train.lr", "model..x=1", "train.nope=1", "synth.seed=2", "train.lr.x=1"] {
            let err = resolve(None, &[bad.to_string()], None, None).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}: {err}");
        }
    }

    #[test]
    fn echo_roundtrips() {
        let cfg = resolve(None, &["train.steps=7".into()], Some(2), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
        assert_eq!(resolve(Some(&p), &[], None, None).unwrap(), cfg);
    }
}
