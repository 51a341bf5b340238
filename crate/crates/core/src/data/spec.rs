//! Textual dataset references used by configuration files.
//!
//! - `idx:PATH`: an IDX image file
//! - `synthetic:FAMILY:N:RESOLUTION:SEED`: a generated image family
//! - `csv:PATH`: a vector CSV with a header row

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{gen_synthetic, load_idx, load_vectors_csv, Family, ImageDataset, VectorDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Idx(PathBuf),
    Synthetic {
        family: Family,
        n: usize,
        resolution: usize,
        seed: u64,
    },
    Csv(PathBuf),
}

impl DataSpec {
    pub fn is_images(&self) -> bool {
        !matches!(self, DataSpec::Csv(_))
    }

    /// Relative paths are resolved against `base`.
    pub fn resolve(&self, base: &Path) -> DataSpec {
        match self {
            DataSpec::Idx(p) => DataSpec::Idx(base.join(p)),
            DataSpec::Csv(p) => DataSpec::Csv(base.join(p)),
            other => other.clone(),
        }
    }

    pub fn load_images(&self) -> Result<ImageDataset> {
        match self {
            DataSpec::Idx(p) => load_idx(p),
            DataSpec::Synthetic {
                family,
                n,
                resolution,
                seed,
            } => gen_synthetic(*family, *n, *resolution, *seed),
            DataSpec::Csv(p) => Err(Error::config(format!(
                "{} is vector data, an image dataset is required here",
                p.display()
            ))),
        }
    }

    pub fn load_vectors(&self, label_column: Option<&str>) -> Result<VectorDataset> {
        match self {
            DataSpec::Csv(p) => load_vectors_csv(p, label_column),
            other => Err(Error::config(format!(
                "{other} is image data, a vector CSV is required here"
            ))),
        }
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::Idx(p) => write!(f, "idx:{}", p.display()),
            DataSpec::Synthetic {
                family,
                n,
                resolution,
                seed,
            } => write!(f, "synthetic:{family}:{n}:{resolution}:{seed}"),
            DataSpec::Csv(p) => write!(f, "csv:{}", p.display()),
        }
    }
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || {
            Error::config(format!(
                "dataset {s:?} must be idx:PATH, csv:PATH or synthetic:FAMILY:N:RESOLUTION:SEED"
            ))
        };
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "idx" if !rest.is_empty() => Ok(DataSpec::Idx(rest.into())),
            "csv" if !rest.is_empty() => Ok(DataSpec::Csv(rest.into())),
            "synthetic" => {
                let parts: Vec<&str> = rest.split(':').collect();
                if parts.len() != 4 {
                    return Err(bad());
                }
                Ok(DataSpec::Synthetic {
                    family: parts[0].parse()?,
                    n: parts[1].parse().map_err(|_| bad())?,
                    resolution: parts[2].parse().map_err(|_| bad())?,
                    seed: parts[3].parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_text() {
        for s in [
            "idx:data/train.idx",
            "csv:/tmp/x.csv",
            "synthetic:blobs:100:16:3",
        ] {
            assert_eq!(s.parse::<DataSpec>().unwrap().to_string(), s);
        }
        assert!("synthetic:blobs:100:16".parse::<DataSpec>().is_err());
        assert!("png:foo".parse::<DataSpec>().is_err());
    }
}
