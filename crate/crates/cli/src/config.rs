//! Training configuration file (TOML) and flag overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use urveda::network::NetworkConfig;
use urveda::trainer::{LossMode, TrainConfig};

use crate::error::{CliError, Result};

/// ```toml
/// fold = 0            # optional: train this fold only
///
/// [network]
/// base_channels = 8
/// vit_depth = 2
/// embed_dim = 64
///
/// [training]
/// epochs = 20
/// lr = 0.01
/// ```
///
/// Unknown keys anywhere are rejected. Network extents and class count
/// come from the dataset manifest unless the file sets them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub fold: Option<usize>,
}

/// Which `[network]` keys the file set explicitly.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExplicitKeys {
    pub height: bool,
    pub width: bool,
    pub classes: bool,
}

pub fn parse_config(text: &str) -> Result<(RunConfig, ExplicitKeys)> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
    let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
    let net = table.get("network").and_then(|v| v.as_table());
    let has = |k: &str| net.is_some_and(|t| t.contains_key(k));
    Ok((
        cfg,
        ExplicitKeys {
            height: has("height"),
            width: has("width"),
            classes: has("classes"),
        },
    ))
}

pub fn load_config(path: &Path) -> Result<(RunConfig, ExplicitKeys)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub loss: Option<LossMode>,
    pub fold: Option<usize>,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        let t = &mut self.training;
        t.epochs = o.epochs.unwrap_or(t.epochs);
        t.batch_size = o.batch_size.unwrap_or(t.batch_size);
        t.lr = o.lr.unwrap_or(t.lr);
        t.folds = o.folds.unwrap_or(t.folds);
        t.seed = o.seed.unwrap_or(t.seed);
        t.loss = o.loss.unwrap_or(t.loss);
        if o.fold.is_some() {
            self.fold = o.fold;
        }
    }

    /// Fills extents and classes from the dataset, rejecting explicit
    /// values that disagree with it.
    pub fn bind_dataset(&mut self, explicit: ExplicitKeys, height: usize, width: usize, classes: usize) -> Result<()> {
        let n = &mut self.network;
        for (set, have, want, key) in [
            (explicit.height, &mut n.height, height, "height"),
            (explicit.width, &mut n.width, width, "width"),
            (explicit.classes, &mut n.classes, classes, "classes"),
        ] {
            if set && *have != want {
                return Err(CliError::Usage(format!(
                    "config sets network.{key} = {have}, dataset has {want}"
                )));
            }
            *have = want;
        }
        self.network.validate()?;
        self.training.validate()?;
        if let Some(f) = self.fold {
            if f >= self.training.folds {
                return Err(CliError::Usage(format!("fold {f} out of range for {} folds", self.training.folds)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let e = parse_config("[training]\nepochz = 3\n").unwrap_err();
        assert_eq!(e.code(), 1);
        assert!(e.to_string().contains("epochz"), "{e}");
        let e = parse_config("[network]\nbase = 3\n").unwrap_err();
        assert!(e.to_string().contains("base"), "{e}");
    }

    #[test]
    fn flags_override_file() {
        let (mut c, _) = parse_config("[training]\nepochs = 7\nlr = 0.5\n").unwrap();
        c.apply(&Overrides {
            epochs: Some(2),
            ..Default::default()
        });
        assert_eq!(c.training.epochs, 2);
        assert_eq!(c.training.lr, 0.5);
    }

    #[test]
    fn dataset_binding() {
        let (mut c, k) = parse_config("[network]\nbase_channels = 4\n").unwrap();
        c.bind_dataset(k, 32, 32, 4).unwrap();
        assert_eq!((c.network.height, c.network.width), (32, 32));

        let (mut c, k) = parse_config("[network]\nheight = 64\n").unwrap();
        assert_eq!(c.bind_dataset(k, 32, 32, 4).unwrap_err().code(), 1);
    }

    #[test]
    fn enum_names() {
        let (c, _) = parse_config(
            "[network]\nvit_placement = \"interleaved\"\ndam_mode = \"product\"\n[training]\nloss = \"cross-entropy+dice\"\n",
        )
        .unwrap();
        assert_eq!(c.training.loss, LossMode::CrossEntropyDice);
    }
}
