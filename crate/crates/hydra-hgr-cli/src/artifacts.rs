//! On-disk layout of datasets, decompositions, checkpoints and results.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hydra_hgr::eval::{FoldResult, ModelKind};
use hydra_hgr::features::{normalize_stack, window_hash, PreparedWindow};
use hydra_hgr::fusion::{FusionConfig, FusionHead};
use hydra_hgr::muap::MAX_SLOTS;
use hydra_hgr::nn::{load_params, read_manifest, save_checkpoint, Parameterized};
use hydra_hgr::vit::{VitConfig, VitModel};
use hydra_hgr::{read_tensor, write_tensor, SeededRng, Tensor};
use ndarray::{Array3, Array4, Axis, Ix3, Ix4};
use serde::{Deserialize, Serialize};

use crate::usage;

pub const MANIFEST: &str = "manifest.csv";
pub const RAW_DIR: &str = "raw";
pub const ENV_DIR: &str = "env";
pub const SPIKES: &str = "spikes.csv";
pub const SIL: &str = "sil.csv";
pub const IMAGES: &str = "muap_images.hydt";
pub const DECOMP_DIR: &str = "decomp";
pub const FOLD_RESULTS: &str = "fold_results.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Raw window, relative to the dataset directory. The μ-law envelope
    /// window has the same file name under `env/`.
    pub window_path: String,
    pub label: usize,
    pub repetition: usize,
    pub subject: u64,
}

pub fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("missing {}", path.display())));
    }
    Ok(())
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn window_file(index: usize) -> String {
    format!("w{index:05}.hydt")
}

pub fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest_csv(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    require(&path)?;
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} lists no windows", path.display());
    }
    Ok(rows)
}

pub fn num_classes(rows: &[ManifestRow]) -> usize {
    rows.iter().map(|r| r.label).max().map_or(0, |m| m + 1)
}

pub fn raw_path(dir: &Path, row: &ManifestRow) -> PathBuf {
    dir.join(&row.window_path)
}

pub fn env_path(dir: &Path, row: &ManifestRow) -> PathBuf {
    let name = Path::new(&row.window_path).file_name().unwrap_or_default();
    dir.join(ENV_DIR).join(name)
}

pub fn write_array3(path: &Path, a: &Array3<f64>) -> Result<()> {
    write_tensor(path, &Tensor::from_array_f64(a)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_window(path: &Path) -> Result<Array3<f64>> {
    require(path)?;
    let t = read_tensor(path)?;
    let a = t
        .to_array_f64()
        .into_dimensionality::<Ix3>()
        .map_err(|_| usage(format!("{} has dims {:?}, expected [512, 8, 16]", path.display(), t.dims())))?;
    if a.shape()[1..] != [8, 16] {
        bail!("{} has dims {:?}, expected [time, 8, 16]", path.display(), a.shape());
    }
    Ok(a)
}

/// MUAP images of a decomposition directory, [n, 7, 8, 16].
pub fn read_images(decomp: &Path) -> Result<Array4<f64>> {
    let path = decomp.join(IMAGES);
    require(&path)?;
    let t = read_tensor(&path)?;
    let a = t
        .to_array_f64()
        .into_dimensionality::<Ix4>()
        .with_context(|| format!("{} is not rank 4", path.display()))?;
    if a.shape()[1..] != [MAX_SLOTS, 8, 16] {
        bail!("{} has dims {:?}, expected [n, 7, 8, 16]", path.display(), a.shape());
    }
    Ok(a)
}

/// Loads a dataset and its decomposition as model-ready windows, in manifest
/// order.
pub fn load_prepared(data: &Path, decomp: &Path) -> Result<Vec<PreparedWindow>> {
    let rows = read_manifest_csv(data)?;
    let images = read_images(decomp)?;
    if images.len_of(Axis(0)) != rows.len() {
        bail!(
            "{} holds {} image stacks for {} manifest windows",
            decomp.join(IMAGES).display(),
            images.len_of(Axis(0)),
            rows.len()
        );
    }
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let raw = read_window(&raw_path(data, row))?;
            let envelope = read_window(&env_path(data, row))?;
            let mut stack = images.index_axis(Axis(0), i).to_owned();
            let num_sources = stack.outer_iter().filter(|s| s.iter().any(|&v| v != 0.0)).count();
            normalize_stack(&mut stack);
            Ok(PreparedWindow {
                label: row.label,
                repetition: row.repetition,
                index: i,
                id: window_hash(raw.view()),
                envelope,
                muap_stack: stack,
                num_sources,
            })
        })
        .collect()
}

pub const KIND_MACRO: &str = "macro";
pub const KIND_MICRO: &str = "micro";
pub const KIND_FUSION: &str = "fusion";

pub fn save_vit(dir: &Path, kind: &str, model: &VitModel) -> Result<()> {
    let cfg = serde_json::to_value(&model.cfg)?;
    save_checkpoint(dir, kind, cfg, model).with_context(|| format!("saving checkpoint {}", dir.display()))
}

pub fn load_vit(dir: &Path, expected_kind: &str) -> Result<VitModel> {
    require(&dir.join(hydra_hgr::nn::MANIFEST_FILE))?;
    let manifest = read_manifest(dir)?;
    if manifest.kind != expected_kind {
        return Err(usage(format!(
            "{} holds a {} checkpoint, expected {expected_kind}",
            dir.display(),
            manifest.kind
        )));
    }
    let cfg: VitConfig = serde_json::from_value(manifest.config.clone())
        .with_context(|| format!("checkpoint config in {}", dir.display()))?;
    let mut model = VitModel::new(cfg, &mut SeededRng::new(0))?;
    load_params(dir, &manifest, &mut model)?;
    Ok(model)
}

/// Fusion checkpoints carry copies of their frozen backbones.
pub fn save_fusion(dir: &Path, macro_model: &VitModel, micro_model: &VitModel, head: &FusionHead) -> Result<()> {
    save_vit(&dir.join(KIND_MACRO), KIND_MACRO, macro_model)?;
    save_vit(&dir.join(KIND_MICRO), KIND_MICRO, micro_model)?;
    let cfg = serde_json::to_value(head.config())?;
    save_checkpoint(dir, KIND_FUSION, cfg, head).with_context(|| format!("saving checkpoint {}", dir.display()))
}

pub fn load_fusion(dir: &Path) -> Result<(VitModel, VitModel, FusionHead)> {
    require(&dir.join(hydra_hgr::nn::MANIFEST_FILE))?;
    let manifest = read_manifest(dir)?;
    if manifest.kind != KIND_FUSION {
        return Err(usage(format!("{} holds a {} checkpoint, expected fusion", dir.display(), manifest.kind)));
    }
    let cfg: FusionConfig = serde_json::from_value(manifest.config.clone())?;
    let mut head = FusionHead::new(&cfg, &mut SeededRng::new(0));
    load_params(dir, &manifest, &mut head)?;
    Ok((load_vit(&dir.join(KIND_MACRO), KIND_MACRO)?, load_vit(&dir.join(KIND_MICRO), KIND_MICRO)?, head))
}

pub fn checkpoint_kind(dir: &Path) -> Result<String> {
    require(&dir.join(hydra_hgr::nn::MANIFEST_FILE))?;
    Ok(read_manifest(dir)?.kind)
}

pub fn checksum(model: &dyn Parameterized) -> String {
    model.checksum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResultRow {
    pub subject: u64,
    pub fold: usize,
    pub model: String,
    pub accuracy: f64,
}

pub fn fold_rows(subject: u64, models: &[ModelKind], results: &[FoldResult]) -> Vec<FoldResultRow> {
    results
        .iter()
        .flat_map(|r| {
            models.iter().map(move |&m| FoldResultRow {
                subject,
                fold: r.fold_idx,
                model: m.as_str().to_string(),
                accuracy: r.get(m),
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    require(path)?;
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}
