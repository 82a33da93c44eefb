//! Run configuration: a JSON object of sections, resolved as
//! defaults, then preset, then file keys, then command-line flags.
//!
//! ```json
//! {
//!   "preset": "mosi-like",
//!   "data": { "dir": "data/synth", "split": "val" },
//!   "output": { "dir": "runs/full" },
//!   "synth": { "n_samples": 800, "redundancy": 4 },
//!   "model": { "d": 16, "ablation": { "no_pcca": true } },
//!   "train": { "learning_rate": 0.001, "seed": 3 },
//!   "eval": { "checkpoint": "runs/full/best.ckpt" },
//!   "gradcheck": { "seed": 0 }
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use mods::dataio::SynthConfig;
use mods::trainer::{ModelConfig, Preset, TrainConfig, VAL_SPLIT};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    output: OutputSection,
    synth: Option<Map<String, Value>>,
    model: Option<Map<String, Value>>,
    train: Option<Map<String, Value>>,
    #[serde(default)]
    eval: EvalSection,
    #[serde(default)]
    gradcheck: GradcheckSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub split: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub seed: Option<u64>,
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ablation: Vec<String>,
    pub data: Option<PathBuf>,
    pub split: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

/// A fully resolved and validated configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub data: DataSection,
    pub output: OutputSection,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
}

/// Overlays `top` onto `base`, recursing into objects present in both.
fn merge(base: &mut Value, top: &Map<String, Value>) {
    let Value::Object(base) = base else {
        unreachable!("sections serialize to objects")
    };
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(b @ Value::Object(_)), Value::Object(t)) => merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn section<T: Serialize + DeserializeOwned>(name: &str, base: T, file: Option<&Map<String, Value>>) -> CliResult<T> {
    let Some(file) = file else { return Ok(base) };
    let mut value = serde_json::to_value(base).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
    merge(&mut value, file);
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("section `{name}`: {e}")))
}

impl RunConfig {
    /// Reads `path` (if any) and applies `o` on top.
    pub fn load(path: Option<&Path>, o: &Overrides) -> CliResult<Self> {
        let Some(p) = path else {
            return Self::resolve(RawConfig::default(), o);
        };
        let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
        Self::from_json(&text, o).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
            other => other,
        })
    }

    /// Resolves a configuration given as JSON text.
    pub fn from_json(text: &str, o: &Overrides) -> CliResult<Self> {
        let raw = serde_json::from_str::<RawConfig>(text).map_err(|e| CliError::Config(e.to_string()))?;
        Self::resolve(raw, o)
    }

    fn resolve(raw: RawConfig, o: &Overrides) -> CliResult<Self> {
        let preset = o
            .preset
            .as_deref()
            .or(raw.preset.as_deref())
            .map(|s| s.parse::<Preset>())
            .transpose()?;
        let (model_base, train_base) = preset.map(Preset::configs).unwrap_or_default();
        let synth_base = SynthConfig {
            label_range: preset.map_or(SynthConfig::default().label_range, Preset::label_range),
            ..SynthConfig::default()
        };
        let mut cfg = RunConfig {
            preset,
            data: raw.data,
            output: raw.output,
            synth: section("synth", synth_base, raw.synth.as_ref())?,
            model: section("model", model_base, raw.model.as_ref())?,
            train: section("train", train_base, raw.train.as_ref())?,
            eval: raw.eval,
            gradcheck: raw.gradcheck,
        };

        if let Some(seed) = o.seed {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
            cfg.gradcheck.seed = Some(seed);
        }
        if let Some(out) = &o.out {
            cfg.output.dir = Some(out.clone());
        }
        for flags in &o.ablation {
            for flag in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                cfg.model.ablation.apply(flag)?;
            }
        }
        if let Some(d) = &o.data {
            cfg.data.dir = Some(d.clone());
        }
        if let Some(s) = &o.split {
            cfg.data.split = Some(s.clone());
        }
        if let Some(c) = &o.checkpoint {
            cfg.eval.checkpoint = Some(c.clone());
        }

        cfg.synth.validate()?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn split(&self) -> &str {
        self.data.split.as_deref().unwrap_or(VAL_SPLIT)
    }

    pub fn data_dir(&self) -> CliResult<&Path> {
        self.data
            .dir
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset directory; set data.dir or pass --data".into()))
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.output
            .dir
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory; set output.dir or pass --out".into()))
    }

    pub fn checkpoint(&self) -> CliResult<&Path> {
        self.eval
            .checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Config("no checkpoint; set eval.checkpoint or pass --checkpoint".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(json: &str, o: &Overrides) -> CliResult<RunConfig> {
        RunConfig::from_json(json, o)
    }

    #[test]
    fn empty_config_gives_defaults() {
        let c = resolve("{}", &Overrides::default()).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.synth, SynthConfig::default());
        assert_eq!(c.split(), "val");
    }

    #[test]
    fn preset_then_file_then_flags() {
        let json = r#"{ "preset": "sims-like", "model": { "d": 32 }, "train": { "seed": 4 } }"#;
        let c = resolve(json, &Overrides::default()).unwrap();
        assert_eq!(c.model.d, 32);
        assert_eq!(c.model.alpha, 0.01);
        assert_eq!(c.train.weight_decay, 1e-2);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.synth.label_range, [-1.0, 1.0]);

        let o = Overrides {
            preset: Some("mosi-like".into()),
            seed: Some(9),
            ablation: vec!["no_pcca,fixed_a".into()],
            ..Overrides::default()
        };
        let c = resolve(json, &o).unwrap();
        assert_eq!(c.preset, Some(Preset::MosiLike));
        assert_eq!(c.model.d, 32);
        assert_eq!(c.model.alpha, 0.1);
        assert_eq!((c.train.seed, c.synth.seed), (9, 9));
        assert!(c.model.ablation.no_pcca);
        assert_eq!(c.model.ablation.fixed_primary, Some(mods::Modality::Acoustic));
    }

    #[test]
    fn nested_objects_merge_key_by_key() {
        let json = r#"{ "synth": { "seq_len": { "a": [2, 3] } } }"#;
        let c = resolve(json, &Overrides::default()).unwrap();
        assert_eq!(c.synth.seq_len.a, [2, 3]);
        assert_eq!(c.synth.seq_len.l, SynthConfig::default().seq_len.l);
    }

    #[test]
    fn rejects_unknown_keys_and_invalid_values() {
        let o = Overrides::default();
        for json in [
            r#"{ "bogus": 1 }"#,
            r#"{ "model": { "depth": 3 } }"#,
            r#"{ "data": { "path": "x" } }"#,
            r#"{ "preset": "cmu-like" }"#,
            r#"{ "synth": { "dominance_mix": [0.5, 0.5, 0.5] } }"#,
            r#"{ "model": { "heads": 3 } }"#,
            r#"{ "train": { "batch_size": 0 } }"#,
        ] {
            assert!(matches!(resolve(json, &o), Err(CliError::Config(_))), "{json}");
        }
        let bad_flag = Overrides {
            ablation: vec!["no_everything".into()],
            ..Overrides::default()
        };
        assert!(matches!(resolve("{}", &bad_flag), Err(CliError::Config(_))));
    }
}
