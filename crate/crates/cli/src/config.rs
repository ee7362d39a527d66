//! Experiment configuration files.
//!
//! A file may name a `preset`; its own keys are then merged over that preset
//! table by table, so a config only needs to spell out what it changes.

use std::path::Path;

use semfield_core::experiments::ExperimentConfig;
use semfield_core::{Error, Result};
use toml::{Table, Value};

pub const DEFAULT_PRESET: &str = "desk-scale";

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

pub fn from_toml(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let table: Table = text.parse().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    from_table(table, origin)
}

fn from_table(mut table: Table, origin: &str) -> Result<ExperimentConfig> {
    if let Some(preset) = table.remove("preset") {
        let name = preset.as_str().ok_or_else(|| Error::Config(format!("{origin}: `preset` must be a string")))?;
        let seed = match table.get("seed") {
            Some(v) => v.as_integer().ok_or_else(|| Error::Config(format!("{origin}: `seed` must be an integer")))?,
            None => 0,
        };
        let base = ExperimentConfig::preset(name, seed as u64)?;
        let mut merged: Table = to_toml(&base)?.parse().expect("serialized config parses");
        merge(&mut merged, table);
        table = merged;
    }
    let cfg: ExperimentConfig =
        Value::Table(table).try_into().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively overwrite `base` with `over`. A tagged table whose `kind`
/// changes replaces the old one outright.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) if b.get("kind") == o.get("kind") || o.get("kind").is_none() => {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: format!("cannot read config: {e}"),
    })?;
    from_toml(&text, &path.display().to_string())
}

/// Resolution order: `--config` file (which may itself name a preset), then
/// `--preset`, then the `config.toml` stored beside an input directory, then
/// the default preset. `--seed` applies last.
pub fn resolve(
    config: Option<&Path>,
    preset: Option<&str>,
    input_dir: Option<&Path>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut cfg = match (config, preset) {
        (Some(path), Some(name)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: format!("cannot read config: {e}"),
            })?;
            let mut table: Table =
                text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            table.entry("preset").or_insert_with(|| Value::String(name.to_string()));
            from_table(table, &path.display().to_string())?
        }
        (Some(path), None) => load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name, 0)?,
        (None, None) => match input_dir.map(|d| d.join("config.toml")).filter(|p| p.exists()) {
            Some(p) => load(&p)?,
            None => ExperimentConfig::preset(DEFAULT_PRESET, 0)?,
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use semfield_core::experiments::Degradation;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in ["desk-scale", "quick", "paper-scale"] {
            let cfg = ExperimentConfig::preset(name, 11).unwrap();
            let text = to_toml(&cfg).unwrap();
            assert_eq!(from_toml(&text, "test").unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn shipped_preset_files_match_the_built_in_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["desk-scale", "quick", "paper-scale"] {
            let cfg = load(&dir.join(format!("{name}.toml"))).unwrap();
            assert_eq!(cfg, ExperimentConfig::preset(name, 0).unwrap(), "{name}");
        }
    }

    #[test]
    fn preset_overrides_merge_per_key() {
        let text = r#"
            preset = "quick"
            seed = 4
            [train]
            iterations = 17
            [degradation]
            kind = "pixel_noise"
            ratio = 0.5
        "#;
        let cfg = from_toml(text, "test").unwrap();
        let base = ExperimentConfig::quick(4);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.iterations, 17);
        assert_eq!(cfg.train.batch_rays, base.train.batch_rays);
        assert_eq!(cfg.degradation, Degradation::PixelNoise { ratio: 0.5 });
        assert_eq!(cfg.field, base.field);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in ["preset = \"enormous\"", "seed = \"x\"", "preset = \"quick\"\n[split]\nstride = 0", "=="] {
            assert!(matches!(from_toml(text, "t"), Err(Error::Config(_))), "{text}");
        }
    }
}
