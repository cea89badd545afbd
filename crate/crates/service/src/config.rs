use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

/// Where grids come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSource {
    /// A fixed pool of random grids generated from the seed.
    #[default]
    Random,
    /// Grid records from a file (e.g. synthesized grids), served before the
    /// random pool.
    Queue { path: PathBuf },
}

/// Service settings, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Image `i` is served as `{image_base_url}/{i}` unless `image_map` lists it.
    pub image_base_url: String,
    /// Optional text file with one URL per line; line `i` is image `i`.
    #[serde(default)]
    pub image_map: Option<PathBuf>,
    pub n_images: usize,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_min_grids")]
    pub min_grids: usize,
    /// Number of random grids in the pool.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default)]
    pub grid_source: GridSource,
    /// Directory holding the append-only logs.
    pub store_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_grid_size() -> usize {
    cen_core::annotation::DEFAULT_GRID_SIZE
}

fn default_min_grids() -> usize {
    10
}

fn default_pool_size() -> usize {
    620
}

impl ServiceConfig {
    pub fn new(n_images: usize, store_dir: impl Into<PathBuf>) -> Self {
        Self {
            listen: default_listen(),
            image_base_url: "http://localhost:8000/images".into(),
            image_map: None,
            n_images,
            grid_size: default_grid_size(),
            min_grids: default_min_grids(),
            pool_size: default_pool_size(),
            grid_source: GridSource::Random,
            store_dir: store_dir.into(),
            seed: 0,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.as_ref().display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 || self.grid_size > self.n_images {
            return Err(ServiceError::Config(format!(
                "grid size {} must be in 2..={}",
                self.grid_size, self.n_images
            )));
        }
        if self.pool_size == 0 && matches!(self.grid_source, GridSource::Random) {
            return Err(ServiceError::Config("random grid source needs a non-empty pool".into()));
        }
        Ok(())
    }

    /// URL of every image, in id order.
    pub fn image_urls(&self) -> Result<Vec<String>> {
        match &self.image_map {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
                let urls: Vec<String> = text.lines().map(str::to_string).collect();
                if urls.len() != self.n_images {
                    return Err(ServiceError::Config(format!(
                        "image map lists {} URLs for {} images",
                        urls.len(),
                        self.n_images
                    )));
                }
                Ok(urls)
            }
            None => {
                let base = self.image_base_url.trim_end_matches('/');
                Ok((0..self.n_images).map(|i| format!("{base}/{i}")).collect())
            }
        }
    }
}
