//! Pipeline configuration: a TOML key/value file merged with flag overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::aggregate::{Threshold, DEFAULT_SWEEP, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_Z;
use crate::preprocess::{CropSpec, SelectionPolicy, DEFAULT_KEEP_FRACTION};
use crate::scorer::{BaselineConfig, DEFAULT_SUBPROCESS_TIMEOUT};

/// Every setting optional, as read from a config file or collected from flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub keep_fraction: Option<f64>,
    /// `HEIGHTxWIDTH`, e.g. `227x300`.
    pub crop: Option<String>,
    /// `TOP,LEFT`.
    pub crop_offset: Option<String>,
    pub strict_dims: Option<bool>,
    /// `baseline`, `file` or `subprocess`.
    pub backend: Option<String>,
    pub scores_file: Option<PathBuf>,
    pub command: Option<String>,
    pub timeout_secs: Option<u64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub threshold: Option<f64>,
    pub thresholds: Option<Vec<f64>>,
    pub z: Option<f64>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

macro_rules! prefer {
    ($winner:ident, $base:ident; $($field:ident),* $(,)?) => {
        ConfigOverrides { $($field: $winner.$field.or($base.$field)),* }
    };
}

impl ConfigOverrides {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fields set in `self` win over `base`.
    pub fn over(self, base: ConfigOverrides) -> ConfigOverrides {
        let winner = self;
        prefer!(winner, base;
            root, manifest, out, keep_fraction, crop, crop_offset, strict_dims,
            backend, scores_file, command, timeout_secs, epochs, learning_rate,
            momentum, threshold, thresholds, z, jobs, seed,
        )
    }

    pub fn resolve(self) -> Result<PipelineConfig> {
        PipelineConfig::from_overrides(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendConfig {
    Baseline(BaselineConfig),
    File(PathBuf),
    Subprocess { command: Vec<String>, timeout: Duration },
}

impl BackendConfig {
    pub fn name(&self) -> &'static str {
        match self {
            BackendConfig::Baseline(_) => "baseline",
            BackendConfig::File(_) => "file",
            BackendConfig::Subprocess { .. } => "subprocess",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub selection: SelectionPolicy,
    pub crop: CropSpec,
    pub backend: BackendConfig,
    pub threshold: Threshold,
    pub thresholds: Vec<Threshold>,
    pub z: f64,
    pub jobs: usize,
    pub seed: u64,
}

pub fn parse_crop_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::invalid("crop", format!("expected HEIGHTxWIDTH, got {s:?}")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid("crop", format!("bad dimension {v:?} in {s:?}")))
    };
    Ok((parse(h)?, parse(w)?))
}

pub fn parse_crop_offset(s: &str) -> Result<(usize, usize)> {
    let (t, l) = s
        .split_once(',')
        .ok_or_else(|| Error::invalid("crop_offset", format!("expected TOP,LEFT, got {s:?}")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid("crop_offset", format!("bad offset {v:?} in {s:?}")))
    };
    Ok((parse(t)?, parse(l)?))
}

fn required(value: Option<PathBuf>, name: &'static str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::invalid(name, "missing"))
}

fn existing(path: PathBuf, name: &'static str) -> Result<PathBuf> {
    if !path.exists() {
        return Err(Error::invalid(name, format!("{} does not exist", path.display())));
    }
    Ok(path)
}

impl PipelineConfig {
    pub fn from_overrides(o: ConfigOverrides) -> Result<Self> {
        let selection = SelectionPolicy::new(o.keep_fraction.unwrap_or(DEFAULT_KEEP_FRACTION))?;
        let mut crop = CropSpec::default();
        if let Some(size) = &o.crop {
            (crop.crop_height, crop.crop_width) = parse_crop_size(size)?;
        }
        crop.offset = o.crop_offset.as_deref().map(parse_crop_offset).transpose()?;
        crop.strict_dims = o.strict_dims.unwrap_or(false);

        let threshold = Threshold::new(o.threshold.unwrap_or(DEFAULT_THRESHOLD))?;
        let thresholds = o
            .thresholds
            .unwrap_or_else(|| DEFAULT_SWEEP.to_vec())
            .into_iter()
            .map(Threshold::new)
            .collect::<Result<Vec<_>>>()?;
        if thresholds.is_empty() {
            return Err(Error::invalid("thresholds", "empty threshold list"));
        }
        let z = o.z.unwrap_or(DEFAULT_Z);
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::invalid("z", format!("must be positive, got {z}")));
        }
        let jobs = o.jobs.unwrap_or(1);
        if jobs == 0 {
            return Err(Error::invalid("jobs", "must be at least 1"));
        }
        let seed = o.seed.unwrap_or(0);

        let backend = match o.backend.as_deref().unwrap_or("baseline") {
            "baseline" => {
                let defaults = BaselineConfig::default();
                let config = BaselineConfig {
                    epochs: o.epochs.unwrap_or(defaults.epochs),
                    learning_rate: o.learning_rate.unwrap_or(defaults.learning_rate),
                    momentum: o.momentum.unwrap_or(defaults.momentum),
                    seed,
                };
                config.validate()?;
                BackendConfig::Baseline(config)
            }
            "file" => BackendConfig::File(existing(
                required(o.scores_file, "scores_file")?,
                "scores_file",
            )?),
            "subprocess" => {
                let command: Vec<String> = o
                    .command
                    .unwrap_or_default()
                    .split_whitespace()
                    .map(String::from)
                    .collect();
                if command.is_empty() {
                    return Err(Error::invalid("command", "missing scorer command"));
                }
                let timeout = o
                    .timeout_secs
                    .map(Duration::from_secs)
                    .unwrap_or(DEFAULT_SUBPROCESS_TIMEOUT);
                BackendConfig::Subprocess { command, timeout }
            }
            other => {
                return Err(Error::invalid(
                    "backend",
                    format!("unknown backend {other:?} (baseline, file, subprocess)"),
                ))
            }
        };

        let manifest = existing(required(o.manifest, "manifest")?, "manifest")?;
        let root = match o.root {
            Some(root) => existing(root, "root")?,
            None => manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
        };
        let out_dir = required(o.out, "out")?;

        Ok(Self {
            root,
            manifest,
            out_dir,
            selection,
            crop,
            backend,
            threshold,
            thresholds,
            z,
            jobs,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(dir: &Path) -> ConfigOverrides {
        let manifest = dir.join("manifest.csv");
        fs::write(&manifest, "patient_id,label,path\nP,covid,P\n").unwrap();
        ConfigOverrides {
            manifest: Some(manifest),
            out: Some(dir.join("out")),
            ..Default::default()
        }
    }

    #[test]
    fn defaults_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base(dir.path()).resolve().unwrap();
        assert_eq!(cfg.root, dir.path());
        assert_eq!(cfg.selection, SelectionPolicy::default());
        assert_eq!(cfg.crop, CropSpec::default());
        assert_eq!(cfg.threshold.value(), 0.7);
        assert_eq!(cfg.thresholds.len(), 4);
        assert_eq!(cfg.z, 1.96);
        assert_eq!(cfg.backend.name(), "baseline");
    }

    #[test]
    fn keep_fraction_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let o = ConfigOverrides { keep_fraction: Some(1.5), ..base(dir.path()) };
        assert!(matches!(
            o.resolve(),
            Err(Error::InvalidParameter { name: "keep_fraction", .. })
        ));
    }

    #[test]
    fn missing_manifest_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let absent = ConfigOverrides {
            manifest: Some(dir.path().join("nope.csv")),
            ..base(dir.path())
        };
        assert!(matches!(absent.resolve(), Err(Error::InvalidParameter { name: "manifest", .. })));
        let unset = ConfigOverrides { manifest: None, ..base(dir.path()) };
        assert!(matches!(unset.resolve(), Err(Error::InvalidParameter { name: "manifest", .. })));
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = ConfigOverrides::from_toml(
            "keep_fraction = 0.5\nthreshold = 0.6\ncrop = \"200x250\"\njobs = 4\n",
        )
        .unwrap()
        .over(base(dir.path()));
        let flags = ConfigOverrides { threshold: Some(0.8), ..Default::default() };
        let cfg = flags.over(file).resolve().unwrap();
        assert_eq!(cfg.threshold.value(), 0.8);
        assert_eq!(cfg.selection.keep_fraction(), 0.5);
        assert_eq!((cfg.crop.crop_height, cfg.crop.crop_width), (200, 250));
        assert_eq!(cfg.jobs, 4);
    }

    #[test]
    fn invalid_values() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ConfigOverrides { thresholds: Some(vec![0.5, 1.5]), ..base(dir.path()) },
            ConfigOverrides { thresholds: Some(vec![]), ..base(dir.path()) },
            ConfigOverrides { jobs: Some(0), ..base(dir.path()) },
            ConfigOverrides { crop: Some("227by300".into()), ..base(dir.path()) },
            ConfigOverrides { crop_offset: Some("1".into()), ..base(dir.path()) },
            ConfigOverrides { backend: Some("gpu".into()), ..base(dir.path()) },
            ConfigOverrides { backend: Some("file".into()), ..base(dir.path()) },
            ConfigOverrides { backend: Some("subprocess".into()), ..base(dir.path()) },
            ConfigOverrides { epochs: Some(0), ..base(dir.path()) },
            ConfigOverrides { out: None, ..base(dir.path()) },
        ];
        for case in cases {
            assert!(case.clone().resolve().is_err(), "{case:?}");
        }
        assert!(ConfigOverrides::from_toml("unknown_key = 1").is_err());
    }

    #[test]
    fn crop_parsing() {
        assert_eq!(parse_crop_size("227x300").unwrap(), (227, 300));
        assert_eq!(parse_crop_offset("142, 106").unwrap(), (142, 106));
        assert!(parse_crop_size("0x300").is_err());
    }
}
