//! Plain-text "key = value" config files and flag/file/default merging for
//! the train command. Explicit flags win over file entries, file entries
//! win over built-in defaults, and unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use puflow::embedding::EmbedConfig;
use puflow::flow::FlowConfig;
use puflow::interpolation::InterpConfig;
use puflow::model::{ModelConfig, Variant};
use puflow::training::TrainConfig;

use crate::{CliError, TrainArgs};

const KNOWN_KEYS: [&str; 19] = [
    "epochs",
    "batch_size",
    "lr",
    "alpha",
    "beta",
    "clip_norm",
    "val_fraction",
    "jitter_sigma",
    "augment_rotate",
    "augment_jitter",
    "pairs",
    "patch_size",
    "ratio",
    "knn",
    "blocks",
    "cond_width",
    "hidden",
    "variant",
    "seed",
];

/// Parses a config file: one `key = value` per line, `#` comments, blank
/// lines ignored. Unknown or repeated keys are usage errors.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{}:{}: expected key = value, found {:?}",
                path.display(),
                idx + 1,
                raw.trim()
            ))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!(
                "{}:{}: unknown config key {key:?}",
                path.display(),
                idx + 1
            )));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(CliError::Usage(format!(
                "{}:{}: duplicate config key {key:?}",
                path.display(),
                idx + 1
            )));
        }
    }
    Ok(map)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key {key} has bad value {value:?}")))
}

/// Fully resolved training settings after flag/file/default merging.
pub struct TrainSettings {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub pairs: usize,
    pub patch_size: usize,
}

impl TrainSettings {
    pub fn resolve(args: &TrainArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => read_config_file(path)?,
            None => BTreeMap::new(),
        };
        // Flag wins, then file, then default.
        macro_rules! pick {
            ($flag:expr, $key:literal, $default:expr) => {
                match (&$flag, file.get($key)) {
                    (Some(v), _) => v.clone(),
                    (None, Some(raw)) => parse($key, raw)?,
                    (None, None) => $default,
                }
            };
        }

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            epochs: pick!(args.epochs, "epochs", defaults.epochs),
            batch_size: pick!(args.batch_size, "batch_size", defaults.batch_size),
            learning_rate: pick!(args.lr, "lr", defaults.learning_rate),
            alpha: pick!(args.alpha, "alpha", defaults.alpha),
            beta: pick!(args.beta, "beta", defaults.beta),
            clip_norm: pick!(args.clip_norm, "clip_norm", defaults.clip_norm),
            val_fraction: pick!(args.val_fraction, "val_fraction", defaults.val_fraction),
            jitter_sigma: pick!(args.jitter_sigma, "jitter_sigma", defaults.jitter_sigma),
            augment_rotate: pick!(args.augment_rotate, "augment_rotate", defaults.augment_rotate),
            augment_jitter: pick!(args.augment_jitter, "augment_jitter", defaults.augment_jitter),
            seed: pick!(args.seed, "seed", defaults.seed),
        };

        let pairs: usize = pick!(args.pairs, "pairs", 2000);
        let patch_size: usize = pick!(args.patch_size, "patch_size", 64);
        let ratio: usize = pick!(args.ratio, "ratio", 4);
        let knn: usize = pick!(args.knn, "knn", 16);
        let blocks: usize = pick!(args.blocks, "blocks", 8);
        let cond_width: usize = pick!(args.cond_width, "cond_width", 32);
        let hidden: usize = pick!(args.hidden, "hidden", 64);
        let variant_tag: String = pick!(args.variant, "variant", "full".to_string());
        let variant = Variant::from_tag(&variant_tag)
            .ok_or_else(|| CliError::Usage(format!("unknown variant {variant_tag:?}")))?;

        let model = ModelConfig {
            flow: FlowConfig {
                blocks,
                cond_width,
                hidden,
                ..FlowConfig::default()
            },
            embed: EmbedConfig {
                blocks,
                k: knn,
                cond_width,
                ..EmbedConfig::default()
            },
            interp: InterpConfig {
                k: knn,
                ratio,
                ..InterpConfig::default()
            },
            variant,
        };
        model.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        if patch_size <= knn {
            return Err(CliError::Usage(format!(
                "patch_size {patch_size} must exceed knn {knn}"
            )));
        }
        if pairs == 0 {
            return Err(CliError::Usage("pairs must be positive".into()));
        }
        Ok(TrainSettings {
            train,
            model,
            pairs,
            patch_size,
        })
    }

    /// Every effective setting as key = value lines, echoed into run logs.
    pub fn echo_lines(&self) -> Vec<String> {
        let t = &self.train;
        let m = &self.model;
        let mut lines = vec![
            format!("# epochs = {}", t.epochs),
            format!("# batch_size = {}", t.batch_size),
            format!("# lr = {:e}", t.learning_rate),
            format!("# alpha = {:e}", t.alpha),
            format!("# beta = {:e}", t.beta),
            format!("# clip_norm = {:e}", t.clip_norm),
            format!("# val_fraction = {:e}", t.val_fraction),
            format!("# jitter_sigma = {:e}", t.jitter_sigma),
            format!("# augment_rotate = {}", t.augment_rotate),
            format!("# augment_jitter = {}", t.augment_jitter),
            format!("# pairs = {}", self.pairs),
            format!("# patch_size = {}", self.patch_size),
            format!("# ratio = {}", m.interp.ratio),
            format!("# knn = {}", m.interp.k),
            format!("# blocks = {}", m.flow.blocks),
            format!("# cond_width = {}", m.flow.cond_width),
            format!("# hidden = {}", m.flow.hidden),
            format!("# variant = {}", m.variant.tag()),
            format!("# seed = {}", t.seed),
        ];
        lines.sort();
        lines
    }
}
