//! Run configuration: profile defaults, a TOML file on top, flags on top of that.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ccnet::backbone::{ModelConfig, Profile, Task};
use ccnet::data::DegradationKind;
use ccnet::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Name of the resolved configuration echoed into output directories.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root for training; synthesized in memory when absent.
    pub train: Option<PathBuf>,
    /// Dataset root for evaluation; the training set when absent.
    pub eval: Option<PathBuf>,
    /// Degradation for synthesized data; follows the task when absent.
    pub degradation: Option<DegradationKind>,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            eval: None,
            degradation: None,
            count: 16,
            height: 64,
            width: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub task: Task,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Values given on the command line; `None` leaves the file or default.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub task: Option<Task>,
    pub seed: Option<u64>,
}

pub fn task_degradation(task: Task) -> DegradationKind {
    match task {
        Task::Dehaze => DegradationKind::Haze,
        Task::Deblur => DegradationKind::MotionBlur,
        Task::Desnow => DegradationKind::Snow,
    }
}

impl RunConfig {
    pub fn defaults(profile: Profile, task: Task) -> Self {
        RunConfig {
            profile,
            task,
            model: ModelConfig::for_task(task, profile),
            train: TrainConfig::for_profile(profile),
            data: DataConfig::default(),
        }
    }

    /// Defaults for the chosen profile and task, then `file`, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let user = match file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("malformed config {}", path.display()))?
            }
            None => Table::new(),
        };
        Self::resolve_table(user, flags)
    }

    pub fn resolve_table(user: Table, flags: &Overrides) -> Result<Self> {
        let profile = match flags.profile {
            Some(p) => p,
            None => field(&user, "profile")?.unwrap_or(Profile::Desk),
        };
        let task = match flags.task {
            Some(t) => t,
            None => field(&user, "task")?.unwrap_or(Task::Dehaze),
        };
        let mut merged = Value::try_from(Self::defaults(profile, task)).context("serializing defaults")?;
        merge(&mut merged, Value::Table(user));
        let mut cfg: RunConfig = merged.try_into().context("invalid config")?;
        cfg.profile = profile;
        cfg.task = task;
        if let Some(seed) = flags.seed {
            cfg.train.seed = seed;
            cfg.data.seed = seed;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn degradation(&self) -> DegradationKind {
        self.data.degradation.unwrap_or_else(|| task_degradation(self.task))
    }

    /// Dataset paths named by the config must exist.
    pub fn check_paths(&self) -> Result<()> {
        for path in [&self.data.train, &self.data.eval].into_iter().flatten() {
            if !path.exists() {
                bail!("dataset path {} does not exist", path.display());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

fn field<T: DeserializeOwned>(table: &Table, key: &str) -> Result<Option<T>> {
    table
        .get(key)
        .map(|v| v.clone().try_into().with_context(|| format!("invalid `{key}`")))
        .transpose()
}

/// Recursively overlays `top` onto `base`; tables merge key by key.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(base), Value::Table(top)) => {
            for (key, value) in top {
                match base.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Parses an enum value by its serialized name.
pub fn parse_name<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    Value::String(s.to_string())
        .try_into()
        .map_err(|_| format!("unknown value `{s}`"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ccnet::backbone::BlockKind;

    #[test]
    fn field_overrides_keep_other_defaults() {
        let user: Table = "[model]\nblocks_per_scale = 7\n[train]\niterations = 5\n".parse().unwrap();
        let cfg = RunConfig::resolve_table(user, &Overrides::default()).unwrap();
        assert_eq!(cfg.model.blocks_per_scale, 7);
        assert_eq!(cfg.model.base_channels, 8);
        assert_eq!(cfg.model.block, BlockKind::Ersm);
        assert_eq!(cfg.train.iterations, 5);
        assert_eq!(cfg.train.lr_max, TrainConfig::for_profile(Profile::Desk).lr_max);
    }

    #[test]
    fn flags_beat_the_file() {
        let user: Table = "task = \"deblur\"\nprofile = \"desk\"\n[train]\nseed = 3\n".parse().unwrap();
        let flags = Overrides {
            profile: Some(Profile::Paper),
            seed: Some(9),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve_table(user, &flags).unwrap();
        assert_eq!(cfg.profile, Profile::Paper);
        assert_eq!(cfg.task, Task::Deblur);
        assert_eq!(cfg.model.blocks_per_scale, 15);
        assert_eq!(cfg.model.base_channels, 38);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn resolved_config_reingests_to_itself() {
        let flags = Overrides {
            task: Some(Task::Desnow),
            seed: Some(4),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve_table(Table::new(), &flags).unwrap();
        let again = RunConfig::resolve_table(cfg.to_toml().unwrap().parse().unwrap(), &Overrides::default()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let user: Table = "[model]\nwidth = 3\n".parse().unwrap();
        assert!(RunConfig::resolve_table(user, &Overrides::default()).is_err());
    }

    #[test]
    fn enum_names_parse() {
        assert_eq!(parse_name::<Task>("desnow"), Ok(Task::Desnow));
        assert!(parse_name::<Profile>("huge").is_err());
    }
}
