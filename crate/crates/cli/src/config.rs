use std::path::Path;

use dualview_core::engine::{AdaptConfig, PretrainConfig};
use dualview_core::eval::DEFAULT_BIN_EDGES_DEG;
use dualview_core::gradcheck::GradcheckOptions;
use dualview_core::simdata::{RecordingConfig, RefineConfig, SimConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub bin_edges_deg: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            bin_edges_deg: DEFAULT_BIN_EDGES_DEG.to_vec(),
        }
    }
}

/// Every tunable of every command. Written verbatim into each output file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalSettings,
    pub recording: RecordingConfig,
    pub refine: RefineConfig,
    pub gradcheck: GradcheckOptions,
}

pub const PRESETS: [&str; 2] = ["default", "quick"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "default" => Ok(RunConfig::default()),
            "quick" => {
                let mut c = RunConfig::default();
                c.sim.pretrain_samples = 2000;
                c.sim.rig_samples = 400;
                c.sim.probe_samples = 128;
                c.pretrain.iterations = 400;
                c.adapt.iterations = 100;
                c.adapt.probe_every = 25;
                c.recording.frames = 4;
                c.refine.steps = 300;
                c.gradcheck.configs = 5;
                Ok(c)
            }
            other => Err(CliError::Usage(format!(
                "unknown preset '{other}' (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// One seed for everything that draws random numbers.
    pub fn set_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.pretrain.seed = seed;
        self.adapt.seed = seed;
        self.recording.seed = seed;
        self.gradcheck.seed = seed;
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Builds the resolved config: preset, then config file, then `key=value`
/// overrides. Unknown keys are rejected.
pub fn resolve(preset: &str, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut value = RunConfig::preset(preset)?.to_value();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let file_value = serde_json::to_value(table).map_err(|e| CliError::Usage(e.to_string()))?;
        merge(&mut value, &file_value, "")?;
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{o}' is not of the form key=value")))?;
        let parsed = parse_scalar(raw.trim())?;
        set_path(&mut value, key.trim(), parsed)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

fn parse_scalar(raw: &str) -> Result<Value, CliError> {
    let doc: toml::Table = toml::from_str(&format!("v = {raw}"))
        .or_else(|_| toml::from_str(&format!("v = {}", toml::Value::String(raw.to_string()))))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    serde_json::to_value(&doc["v"]).map_err(|e| CliError::Usage(e.to_string()))
}

fn merge(dst: &mut Value, src: &Value, prefix: &str) -> Result<(), CliError> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = d.get_mut(k).ok_or_else(|| CliError::Usage(format!("unknown config key '{key}'")))?;
                if slot.is_object() && v.is_object() && !is_tagged(slot) {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        _ => Err(CliError::Usage(format!("config key '{prefix}' is not a table"))),
    }
}

// Tagged enums (the rig spec) are replaced as a whole so that switching the
// mode does not leave fields of the old variant behind.
fn is_tagged(v: &Value) -> bool {
    v.get("mode").is_some()
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("config key '{key}' does not name a value")))?;
        let last = i + 1 == parts.len();
        let next = obj.get_mut(*p).ok_or_else(|| CliError::Usage(format!("unknown config key '{key}'")))?;
        if last {
            *next = v;
            return Ok(());
        }
        cur = next;
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = resolve("default", None, &["adapt.lambda_stb=7".into(), "sim.noise.sigma1 = 0.1".into()]).unwrap();
        assert_eq!(c.adapt.lambda_stb, 7.0);
        assert_eq!(c.sim.noise.sigma1, 0.1);
        assert!(resolve("default", None, &["adapt.nope=1".into()]).is_err());
        assert!(resolve("default", None, &["adapt".into()]).is_err());
        assert!(resolve("nope", None, &[]).is_err());
    }

    #[test]
    fn config_file_uses_dotted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "adapt.lambda_stb = 50\nadapt.selection_mode = \"label\"\nsim.rig_samples = 10\n").unwrap();
        let c = resolve("quick", Some(&p), &["sim.rig_samples=11".into()]).unwrap();
        assert_eq!(c.sim.rig_samples, 11);
        assert_eq!(c.sim.pretrain_samples, 2000);
        assert_eq!(c.adapt.selection_mode, dualview_core::eval::SelectionMode::Label);
        std::fs::write(&p, "adapt.bogus = 1\n").unwrap();
        assert!(matches!(resolve("default", Some(&p), &[]), Err(CliError::Usage(_))));
    }

    #[test]
    fn rig_mode_can_be_switched() {
        let c = resolve("default", None, &["sim.rig.mode=random".into()]).unwrap();
        assert_eq!(c.sim.rig, dualview_core::simdata::RigSpec::Random { distance: 1.0 });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.toml");
        std::fs::write(&p, "[sim.rig]\nmode = \"random\"\ndistance = 1.2\n").unwrap();
        let c = resolve("default", Some(&p), &[]).unwrap();
        assert_eq!(c.sim.rig, dualview_core::simdata::RigSpec::Random { distance: 1.2 });
    }

    #[test]
    fn value_round_trips() {
        let c = RunConfig::preset("quick").unwrap();
        let back: RunConfig = serde_json::from_value(c.to_value()).unwrap();
        assert_eq!(back, c);
    }
}
