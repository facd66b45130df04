//! MUAP estimation by spike-triggered averaging and peak-to-peak images.

use std::cmp::Ordering;

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::layout::{grid_pos, GRID_COLS, GRID_ROWS, NUM_CHANNELS};

pub const MAX_SLOTS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct MuapEstimate {
    /// [8, 16, L] waveform per electrode.
    pub waveforms: Array3<f64>,
    pub source_idx: usize,
    pub first_spike: Option<usize>,
    /// True when no segment contributed (all-zero waveforms).
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuapImage {
    /// [8, 16] peak-to-peak amplitudes.
    pub p2p: Array2<f64>,
    pub source_idx: usize,
    pub first_spike: Option<usize>,
}

impl MuapImage {
    pub fn energy(&self) -> f64 {
        self.p2p.iter().map(|v| v * v).sum()
    }
}

/// Spike-triggered average of a raw [128, D] window.
///
/// The window is split into sub-windows of `sub_win` samples. In each, the
/// `l`-sample segments starting at the spikes that fall in it are averaged,
/// and the sub-window averages are summed. Segments running past the end of
/// the window are dropped.
pub fn sta_muap(x: ArrayView2<f64>, spikes: &[usize], l: usize, sub_win: usize, source_idx: usize) -> Result<MuapEstimate> {
    let (m, d) = x.dim();
    if m != NUM_CHANNELS {
        return Err(Error::Shape(format!("expected {NUM_CHANNELS} channels, got {m}")));
    }
    if l == 0 || sub_win == 0 {
        return Err(Error::InvalidParam("MUAP length and sub-window must be positive".into()));
    }
    if let Some(&t) = spikes.iter().find(|&&t| t >= d) {
        return Err(Error::InvalidParam(format!("spike at {t} outside window of {d} samples")));
    }
    let mut waveforms = Array3::zeros((GRID_ROWS, GRID_COLS, l));
    let mut contributed = false;
    let n_sub = d.div_ceil(sub_win);
    for k in 0..n_sub {
        let segs: Vec<usize> = spikes
            .iter()
            .copied()
            .filter(|&t| t / sub_win == k && t + l <= d)
            .collect();
        if segs.is_empty() {
            continue;
        }
        contributed = true;
        let inv = 1.0 / segs.len() as f64;
        for ch in 0..m {
            let (r, c) = grid_pos(ch);
            for &t in &segs {
                for j in 0..l {
                    waveforms[[r, c, j]] += inv * x[[ch, t + j]];
                }
            }
        }
    }
    Ok(MuapEstimate {
        waveforms,
        source_idx,
        first_spike: spikes.iter().copied().min(),
        empty: !contributed,
    })
}

pub fn p2p_image(m: &MuapEstimate) -> MuapImage {
    let (rows, cols, _) = m.waveforms.dim();
    let p2p = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let lane = m.waveforms.slice(ndarray::s![r, c, ..]);
        let mx = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mn = lane.iter().copied().fold(f64::INFINITY, f64::min);
        if mx.is_finite() && mn.is_finite() {
            mx - mn
        } else {
            0.0
        }
    });
    MuapImage {
        p2p,
        source_idx: m.source_idx,
        first_spike: m.first_spike,
    }
}

/// Canonical ordering: descending energy, then earlier first spike, then
/// source index.
fn slot_order(a: &MuapImage, b: &MuapImage) -> Ordering {
    b.energy()
        .total_cmp(&a.energy())
        .then(a.first_spike.unwrap_or(usize::MAX).cmp(&b.first_spike.unwrap_or(usize::MAX)))
        .then(a.source_idx.cmp(&b.source_idx))
}

/// Fixed [7, 8, 16] stack: images sorted canonically, zero-padded.
pub fn muap_feature_stack(images: &[MuapImage]) -> Result<Array3<f64>> {
    if images.len() > MAX_SLOTS {
        return Err(Error::InvalidParam(format!("{} images exceed {MAX_SLOTS} slots", images.len())));
    }
    let mut sorted: Vec<&MuapImage> = images.iter().collect();
    sorted.sort_by(|a, b| slot_order(a, b));
    let mut out = Array3::zeros((MAX_SLOTS, GRID_ROWS, GRID_COLS));
    for (slot, img) in sorted.into_iter().enumerate() {
        if img.p2p.dim() != (GRID_ROWS, GRID_COLS) {
            return Err(Error::Shape(format!("image shape {:?} is not 8×16", img.p2p.dim())));
        }
        out.slice_mut(ndarray::s![slot, .., ..]).assign(&img.p2p);
    }
    Ok(out)
}
