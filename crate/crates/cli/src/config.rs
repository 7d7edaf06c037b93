//! Sectioned `key = value` run-config files. Every key is checked against
//! the schema below so a typo fails loudly instead of silently using a
//! default; command-line flags override file values.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use glocal_core::{Error, Result};

/// section → allowed keys
const SCHEMA: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "train",
            "test",
            "vocab",
            "num_labels",
            "max_len",
            "min_freq",
            "max_vocab",
        ],
    ),
    (
        "model",
        &[
            "num_layers",
            "model_dim",
            "num_heads",
            "ffn_dim",
            "max_positions",
            "dropout",
            "pooler_dim",
            "pooler_tanh",
            "attn_dim",
            "value_dim",
            "hidden_dim",
            "tau",
            "n_local",
        ],
    ),
    (
        "train",
        &[
            "epochs",
            "batch_size",
            "lr_backbone",
            "lr_pooler",
            "lr_global",
            "lr_attention",
            "lr_mlp",
            "beta1",
            "beta2",
            "epsilon",
            "weight_decay",
            "grad_clip",
            "seed",
            "eval_every",
            "checkpoint",
            "log",
        ],
    ),
    ("eval", &["k", "batch_size", "source"]),
];

/// Parsed, schema-checked file settings.
#[derive(Debug, Default)]
pub struct RunConfig {
    values: HashMap<(String, String), String>,
    path: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = HashMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno,
                        msg: format!("unknown section [{name}]"),
                    });
                }
                section = name.to_owned();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("key {key:?} appears before any [section]"),
                });
            }
            let allowed = SCHEMA
                .iter()
                .find(|(s, _)| *s == section)
                .map(|(_, keys)| keys.contains(&key))
                .unwrap_or(false);
            if !allowed {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("unknown key {key:?} in section [{section}]"),
                });
            }
            if values
                .insert((section.clone(), key.to_owned()), value.to_owned())
                .is_some()
            {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("duplicate key {key:?} in section [{section}]"),
                });
            }
        }
        Ok(RunConfig {
            values,
            path: path.to_path_buf(),
        })
    }

    /// Typed lookup; absent keys are `None`, unparsable values an error.
    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.values.get(&(section.to_owned(), key.to_owned())) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| Error::Config(format!(
                "{}: [{section}] {key} = {raw:?} is not a valid value",
                self.path.display()
            ))),
        }
    }

    /// `none` (or absence) → None, anything else parsed as T.
    pub fn get_optional<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Option<T>>> {
        match self.values.get(&(section.to_owned(), key.to_owned())) {
            None => Ok(None),
            Some(raw) if raw == "none" => Ok(Some(None)),
            Some(raw) => raw.parse().map(|v| Some(Some(v))).map_err(|_| {
                Error::Config(format!(
                    "{}: [{section}] {key} = {raw:?} is not a valid value",
                    self.path.display()
                ))
            }),
        }
    }
}

/// First of: flag value, config-file value, default.
pub fn resolve<T: FromStr>(
    flag: Option<T>,
    file: &RunConfig,
    section: &str,
    key: &str,
    default: T,
) -> Result<T> {
    Ok(flag
        .map(Ok)
        .or_else(|| file.get(section, key).transpose())
        .transpose()?
        .unwrap_or(default))
}

/// Like [`resolve`] but with no default: the setting must come from a flag
/// or the file.
pub fn require<T: FromStr>(
    flag: Option<T>,
    file: &RunConfig,
    section: &str,
    key: &str,
) -> Result<T> {
    flag.map(Ok)
        .or_else(|| file.get(section, key).transpose())
        .transpose()?
        .ok_or_else(|| {
            Error::Config(format!(
                "missing required setting [{section}] {key} (flag or config file)"
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_config(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn parses_sections_comments_and_values() {
        let (_dir, path) = write_config(
            "# experiment\n[model]\nmodel_dim = 32\ntau = 0.5\n\n[train]\nseed = 7\n",
        );
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.get::<usize>("model", "model_dim").unwrap(), Some(32));
        assert_eq!(cfg.get::<f64>("model", "tau").unwrap(), Some(0.5));
        assert_eq!(cfg.get::<u64>("train", "seed").unwrap(), Some(7));
        assert_eq!(cfg.get::<usize>("train", "epochs").unwrap(), None);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let (_dir, path) = write_config("[model]\nmodle_dim = 32\n");
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("modle_dim"), "{err}");
        assert!(err.contains(":2"), "{err}");

        let (_dir2, path2) = write_config("[models]\nmodel_dim = 32\n");
        assert!(RunConfig::load(&path2).is_err());

        let (_dir3, path3) = write_config("model_dim = 32\n");
        assert!(RunConfig::load(&path3).is_err());

        let (_dir4, path4) = write_config("[model]\nmodel_dim = 32\nmodel_dim = 16\n");
        let err = RunConfig::load(&path4).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn flags_override_file_values() {
        let (_dir, path) = write_config("[train]\nepochs = 5\n");
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(resolve(None, &cfg, "train", "epochs", 1usize).unwrap(), 5);
        assert_eq!(resolve(Some(9), &cfg, "train", "epochs", 1usize).unwrap(), 9);
        assert_eq!(
            resolve(None, &cfg, "train", "batch_size", 8usize).unwrap(),
            8
        );
        assert!(require::<usize>(None, &cfg, "data", "num_labels").is_err());
    }

    #[test]
    fn optional_none_values_parse() {
        let (_dir, path) = write_config("[model]\npooler_dim = none\n[train]\ngrad_clip = 0.5\n");
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(
            cfg.get_optional::<usize>("model", "pooler_dim").unwrap(),
            Some(None)
        );
        assert_eq!(
            cfg.get_optional::<f64>("train", "grad_clip").unwrap(),
            Some(Some(0.5))
        );
        assert_eq!(cfg.get_optional::<usize>("model", "attn_dim").unwrap(), None);
    }

    #[test]
    fn bad_values_name_the_key() {
        let (_dir, path) = write_config("[model]\nmodel_dim = lots\n");
        let cfg = RunConfig::load(&path).unwrap();
        let err = cfg.get::<usize>("model", "model_dim").unwrap_err().to_string();
        assert!(err.contains("model_dim"), "{err}");
    }
}
