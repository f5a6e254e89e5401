//! Toy backbone weights: persistence in the cache container and a
//! train-on-miss loader keyed by configuration.

use std::path::{Path, PathBuf};

use baret_core::backbone::toy::{
    train_toy_backbone, Fnv64, ToyBackbone, ToyBackboneConfig, ToyUnet, TrainConfig, TrainReport,
};
use serde::{Deserialize, Serialize};

use crate::cache::{self, Kind};
use crate::error::{PipelineError, Result};

/// Environment variable overriding the cache directory.
pub const CACHE_DIR_ENV: &str = "BARET_CACHE_DIR";

pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".baret-cache"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub config: ToyBackboneConfig,
    pub train: TrainConfig,
    pub tensors: Vec<TensorEntry>,
    pub fingerprint: u64,
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
    pub loss_curve: Vec<f64>,
}

pub fn save_toy(
    path: &Path,
    backbone: &ToyBackbone,
    train: &TrainConfig,
    report: &TrainReport,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, data) in backbone.named_tensors() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        payload.extend_from_slice(data);
    }
    let header = WeightsHeader {
        config: backbone.config().clone(),
        train: train.clone(),
        tensors,
        fingerprint: backbone.weights_fingerprint(),
        initial_validation_loss: report.initial_validation_loss,
        final_validation_loss: report.final_validation_loss,
        loss_curve: report.loss_curve.clone(),
    };
    cache::write_file(path, Kind::Weights, &header, &payload)
        .map_err(|e| PipelineError::cache(path, e))
}

pub fn load_toy(path: &Path) -> Result<(ToyBackbone, WeightsHeader)> {
    let (header, payload): (WeightsHeader, Vec<f32>) =
        cache::read_file(path, Kind::Weights).map_err(|e| PipelineError::cache(path, e))?;
    let mut named = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload
            .get(offset..offset + n)
            .ok_or_else(|| {
                PipelineError::cache(path, cache::CacheError::Header("tensor table overruns payload".into()))
            })?
            .to_vec();
        offset += n;
        named.push((t.name.clone(), t.shape.clone(), data));
    }
    let backbone = ToyBackbone::from_unet(ToyUnet::from_named(&header.config, named)?)?;
    if backbone.weights_fingerprint() != header.fingerprint {
        return Err(PipelineError::cache(
            path,
            cache::CacheError::Header("weights fingerprint mismatch".into()),
        ));
    }
    Ok((backbone, header))
}

/// File name derived from both configurations, so changed settings never
/// pick up stale weights.
pub fn weights_file_name(config: &ToyBackboneConfig, train: &TrainConfig) -> String {
    let mut h = Fnv64::new();
    h.write(&serde_json::to_vec(config).expect("serializable"));
    h.write(&serde_json::to_vec(train).expect("serializable"));
    format!("toy-{:016x}.brtc", h.finish())
}

/// Loads cached weights for the configuration, training and caching them
/// first if absent.
pub fn load_or_train(
    config: &ToyBackboneConfig,
    train: &TrainConfig,
    dir: &Path,
    progress: impl FnMut(usize, f64),
) -> Result<(ToyBackbone, PathBuf)> {
    let path = dir.join(weights_file_name(config, train));
    if path.exists() {
        let (backbone, _) = load_toy(&path)?;
        return Ok((backbone, path));
    }
    let (backbone, report) = train_toy_backbone(config, train, progress)?;
    // Write to a temporary name first so a concurrent reader never sees a
    // partial file.
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    save_toy(&tmp, &backbone, train, &report)?;
    std::fs::rename(&tmp, &path).map_err(|e| PipelineError::io(&path, e))?;
    Ok((backbone, path))
}
