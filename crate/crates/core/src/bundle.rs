//! On-disk layout for an ingested dataset and its prepared walk samples.
//!
//! A bundle is a directory of three JSON files:
//!
//! * `manifest.json`: format version, the run config that produced the
//!   bundle, and summary statistics, in that order the quickest things a
//!   human or a version check needs.
//! * `dataset.json`: the graph, the labeled split, and the raw-id maps.
//! * `samples.json`: every prepared neighborhood sample.
//!
//! Ingestion writes a bundle once; training, evaluation, and export all
//! load it instead of re-reading the raw relation files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::ingest::{Dataset, DatasetStats};
use crate::sampler::SampleStore;

/// Version written into every manifest; bump on layout changes.
pub const FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const DATASET_FILE: &str = "dataset.json";
const SAMPLES_FILE: &str = "samples.json";

/// Errors from reading or writing a bundle directory.
#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("bundle format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
}

/// The quick-to-read part of a bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub stats: DatasetStats,
}

/// A fully loaded bundle.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub dataset: Dataset,
    pub store: SampleStore,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BundleError> {
    let text = serde_json::to_string(value).map_err(|source| BundleError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, BundleError> {
    let text = fs::read_to_string(path).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| BundleError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `dataset` and `store` under `dir`, creating it if needed.
pub fn save_bundle(
    dir: &Path,
    config: &RunConfig,
    dataset: &Dataset,
    store: &SampleStore,
) -> Result<(), BundleError> {
    fs::create_dir_all(dir).map_err(|source| BundleError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        stats: dataset.stats.clone(),
    };
    // Pretty-print the manifest alone; it is the file people open.
    let manifest_path = dir.join(MANIFEST_FILE);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|source| BundleError::Json {
            path: manifest_path.clone(),
            source,
        })?;
    fs::write(&manifest_path, text).map_err(|source| BundleError::Io {
        path: manifest_path,
        source,
    })?;
    write_json(&dir.join(DATASET_FILE), dataset)?;
    write_json(&dir.join(SAMPLES_FILE), store)?;
    Ok(())
}

/// Loads a bundle directory, rejecting unknown format versions before
/// touching the larger files.
pub fn load_bundle(dir: &Path) -> Result<Bundle, BundleError> {
    let manifest: BundleManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(BundleError::Version {
            found: manifest.format_version,
        });
    }
    let dataset: Dataset = read_json(&dir.join(DATASET_FILE))?;
    let store: SampleStore = read_json(&dir.join(SAMPLES_FILE))?;
    Ok(Bundle {
        manifest,
        dataset,
        store,
    })
}
