//! Per-window model inputs: the envelope window for the Macro path and the
//! decomposition-derived MUAP image stack for the Micro path.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::decomposition::{decompose_window, DecompositionParams, SourceEstimate};
use crate::error::{Error, Result};
use crate::layout::{from_grid, GRID_COLS, GRID_ROWS};
use crate::muap::{muap_feature_stack, p2p_image, sta_muap, MuapImage, MAX_SLOTS};
use crate::preprocess::{macro_windows, PreprocessConfig};
use crate::signal_model::{grid_windows, Recording};
use crate::vit::{micro_slots, patchify, VitConfig};

/// Sub-window over which spike-triggered segments are averaged.
pub const DEFAULT_STA_SUB_WINDOW: usize = 256;

/// (time, row, col) → (row, time, col): grid rows become image channels.
pub fn macro_image(window: ArrayView3<f64>) -> Result<Array3<f64>> {
    let (_, r, c) = window.dim();
    if (r, c) != (GRID_ROWS, GRID_COLS) {
        return Err(Error::Shape(format!("window {:?} is not (time, 8, 16)", window.shape())));
    }
    Ok(window.permuted_axes([1, 0, 2]).as_standard_layout().into_owned())
}

pub fn macro_slots(window: ArrayView3<f64>, cfg: &VitConfig) -> Result<Vec<Array2<f64>>> {
    Ok(vec![patchify(macro_image(window)?.view(), cfg)?])
}

/// Divides every slot by its own largest |value|; empty slots stay zero.
pub fn normalize_stack(stack: &mut Array3<f64>) {
    for mut img in stack.axis_iter_mut(Axis(0)) {
        let peak = img.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if peak > 0.0 {
            img.mapv_inplace(|v| v / peak);
        }
    }
}

#[derive(Debug, Clone)]
pub struct MicroExtraction {
    pub sources: Vec<SourceEstimate>,
    /// Images of the retained sources, strongest first.
    pub images: Vec<MuapImage>,
    /// [7, 8, 16], unnormalized.
    pub stack: Array3<f64>,
}

/// Decomposes one raw (time, row, col) window and builds its MUAP image stack.
/// Sources whose STA is empty are skipped; beyond seven, the weakest images
/// are dropped.
pub fn micro_extract(raw: ArrayView3<f64>, params: &DecompositionParams, sub_win: usize) -> Result<MicroExtraction> {
    let x = from_grid(raw);
    let sources = decompose_window(x.view(), params)?;
    let mut images = Vec::with_capacity(sources.len());
    for (idx, src) in sources.iter().enumerate() {
        let est = sta_muap(x.view(), &src.spikes.times, params.muap_len, sub_win, idx)?;
        if !est.empty {
            images.push(p2p_image(&est));
        }
    }
    images.sort_by(|a, b| b.energy().total_cmp(&a.energy()).then(a.source_idx.cmp(&b.source_idx)));
    images.truncate(MAX_SLOTS);
    let stack = muap_feature_stack(&images)?;
    Ok(MicroExtraction { sources, images, stack })
}

/// SHA-256 of a window's f32 little-endian payload, used to detect windows
/// shared between training and test folds.
pub fn window_hash(window: ArrayView3<f64>) -> String {
    let mut h = Sha256::new();
    for v in window.iter() {
        h.update((*v as f32).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything the models need from one window.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub label: usize,
    pub repetition: usize,
    pub index: usize,
    pub id: String,
    /// [512, 8, 16] μ-law envelope window.
    pub envelope: Array3<f64>,
    /// [7, 8, 16] normalized MUAP images.
    pub muap_stack: Array3<f64>,
    pub num_sources: usize,
}

impl PreparedWindow {
    pub fn macro_slots(&self, cfg: &VitConfig) -> Result<Vec<Array2<f64>>> {
        macro_slots(self.envelope.view(), cfg)
    }

    pub fn micro_slots(&self, cfg: &VitConfig) -> Result<Vec<Array2<f64>>> {
        micro_slots(self.muap_stack.view(), cfg)
    }
}

/// Windows every recording for both paths and decomposes the raw windows
/// (in parallel on the current rayon pool). Output order is recording order,
/// then window order.
pub fn prepare_recordings(
    recordings: &[Recording],
    pre: &PreprocessConfig,
    params: &DecompositionParams,
) -> Result<Vec<PreparedWindow>> {
    pre.validate()?;
    params.validate()?;
    let mut jobs = Vec::new();
    for rec in recordings {
        let env = macro_windows(rec.record.x.view(), pre)?;
        let raw = grid_windows(rec.record.x.view(), pre.window_len, pre.skip)?;
        for (index, (e, r)) in env.into_iter().zip(raw).enumerate() {
            jobs.push((rec.label, rec.repetition, index, e, r));
        }
    }
    jobs.into_par_iter()
        .map(|(label, repetition, index, envelope, raw)| {
            let mut ex = micro_extract(raw.view(), params, DEFAULT_STA_SUB_WINDOW)?;
            normalize_stack(&mut ex.stack);
            Ok(PreparedWindow {
                label,
                repetition,
                index,
                id: window_hash(raw.view()),
                envelope,
                muap_stack: ex.stack,
                num_sources: ex.images.len(),
            })
        })
        .collect()
}
