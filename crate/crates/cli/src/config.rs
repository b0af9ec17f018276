use std::path::{Path, PathBuf};

use nar_core::bench_data::{SplitConfig, SyntheticSpec};
use nar_core::encoding::EncodingLayout;
use nar_core::model::ModelConfig;
use nar_core::profile::Profile;
use nar_core::search::{SearchConfig, SearchMode};
use nar_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

/// Everything a command needs, resolved from profile defaults, an optional
/// JSON file, and command-line flags (in that order of precedence).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Run seed: model initialization, split, batch order and search draws.
    pub seed: u64,
    /// Record file; the synthetic space is generated when absent.
    pub records: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub checkpoint: Option<PathBuf>,
    pub repeats: usize,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        RunConfig {
            profile,
            seed: 0,
            records: None,
            synthetic: SyntheticSpec::default(),
            split: profile.split(),
            model: profile.model(),
            train: profile.train(),
            search: profile.search(),
            checkpoint: None,
            repeats: 1,
            out: PathBuf::from("nar-out"),
        }
    }

    /// Encoding layout: the profile's, or the configured synthetic space's.
    pub fn layout(&self) -> EncodingLayout {
        match self.profile {
            Profile::Synth => self.synthetic.layout(),
            p => p.layout(),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.ckpt"))
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub mode: Option<SearchMode>,
    pub repeats: Option<usize>,
    pub out: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Reads the optional config file and layers flags on top.
pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<(RunConfig, Option<String>), Failure> {
    let (raw, text) = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("reading {}: {e}", path.display())))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| Failure::config(format!("parsing {}: {e}", path.display())))?;
            if !value.is_object() {
                return Err(Failure::config("config must be a JSON object"));
            }
            (value, Some(text))
        }
        None => (Value::Object(Default::default()), None),
    };
    let profile = match (flags.profile, raw.get("profile")) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone())
            .map_err(|e| Failure::config(format!("profile: {e}")))?,
        (None, None) => Profile::Synth,
    };
    let mut value = serde_json::to_value(RunConfig::defaults(profile)).expect("serializable defaults");
    let explicit_shape = raw
        .get("model")
        .is_some_and(|m| m.get("channels").is_some() || m.get("resolution").is_some());
    merge(&mut value, raw);
    value["profile"] = serde_json::to_value(profile).expect("profile");
    let mut config: RunConfig =
        serde_json::from_value(value).map_err(|e| Failure::config(format!("config: {e}")))?;

    if let Some(s) = flags.seed {
        config.seed = s;
    }
    if let Some(m) = flags.mode {
        config.search.mode = m;
    }
    if let Some(r) = flags.repeats {
        config.repeats = r;
    }
    if let Some(o) = &flags.out {
        config.out = o.clone();
    }
    if let Some(r) = &flags.records {
        config.records = Some(r.clone());
    }
    if let Some(c) = &flags.checkpoint {
        config.checkpoint = Some(c.clone());
    }
    let layout = config.layout();
    if explicit_shape {
        if (config.model.channels, config.model.resolution) != (layout.channels(), layout.resolution) {
            return Err(Failure::config(format!(
                "model input {}x{} does not match the {:?} layout ({}x{})",
                config.model.channels,
                config.model.resolution,
                config.profile,
                layout.channels(),
                layout.resolution
            )));
        }
    } else {
        config.model.channels = layout.channels();
        config.model.resolution = layout.resolution;
    }
    config.train.seed = config.seed;
    config.search.seed = config.seed;
    if config.repeats == 0 {
        return Err(Failure::config("repeats must be at least 1"));
    }
    config
        .model
        .validate()
        .and_then(|_| config.train.validate(config.model.tiers))
        .and_then(|_| config.search.validate())
        .map_err(|e| Failure::config(e.to_string()))?;
    Ok((config, text))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn profile_flags_set_reference_batches() {
        let flags = Overrides {
            profile: Some(Profile::Nb201),
            ..Overrides::default()
        };
        let (c, _) = resolve(None, &flags).unwrap();
        assert_eq!((c.train.batch_size, c.train.epochs, c.train.warmup), (128, 55, 30));
        let flags = Overrides {
            profile: Some(Profile::Nb101),
            ..Overrides::default()
        };
        let (c, _) = resolve(None, &flags).unwrap();
        assert_eq!((c.train.batch_size, c.train.epochs, c.train.warmup), (256, 35, 50));
    }

    #[test]
    fn file_overrides_nested_fields_only() {
        let f = write(r#"{"profile": "nb101", "train": {"epochs": 3}, "search": {"top_k": 1}}"#);
        let (c, text) = resolve(Some(f.path()), &Overrides::default()).unwrap();
        assert!(text.is_some());
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.search.top_k, 1);
        assert_eq!(c.search.sample_size, 256);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [r#"{"bogus": 1}"#, r#"{"train": {"epochz": 2}}"#, r#"{"search": {"rule": {"eta": 1}}}"#] {
            let f = write(text);
            assert!(resolve(Some(f.path()), &Overrides::default()).is_err(), "{text}");
        }
    }

    #[test]
    fn flags_beat_file() {
        let f = write(r#"{"seed": 4, "repeats": 2}"#);
        let flags = Overrides {
            seed: Some(9),
            mode: Some(SearchMode::Random),
            ..Overrides::default()
        };
        let (c, _) = resolve(Some(f.path()), &flags).unwrap();
        assert_eq!((c.seed, c.train.seed, c.search.seed, c.repeats), (9, 9, 9, 2));
        assert_eq!(c.search.mode, SearchMode::Random);
    }

    #[test]
    fn model_shape_follows_synthetic_spec() {
        let f = write(r#"{"synthetic": {"nodes": 5, "cells": 2}}"#);
        let (c, _) = resolve(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!((c.model.channels, c.model.resolution), (5, 5));
        let f = write(r#"{"model": {"channels": 19}}"#);
        assert_eq!(resolve(Some(f.path()), &Overrides::default()).unwrap_err().code, 2);
    }
}
