//! Electrode geometry shared by every module.
//!
//! Two 8×8 grids are concatenated along the column axis into one 8×16 image:
//! channels 0–63 form the extensor grid (columns 0–7, row-major) and channels
//! 64–127 the flexor grid (columns 8–15, row-major).

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

pub const NUM_CHANNELS: usize = 128;
pub const GRID_ROWS: usize = 8;
pub const GRID_COLS: usize = 16;
pub const SAMPLING_RATE_HZ: f64 = 2048.0;

const HALF_COLS: usize = 8;
const HALF_CHANNELS: usize = GRID_ROWS * HALF_COLS;

/// Grid (row, col) of a channel index.
pub fn grid_pos(ch: usize) -> (usize, usize) {
    if ch < HALF_CHANNELS {
        (ch / HALF_COLS, ch % HALF_COLS)
    } else {
        let c = ch - HALF_CHANNELS;
        (c / HALF_COLS, HALF_COLS + c % HALF_COLS)
    }
}

/// Channel index at grid (row, col).
pub fn channel_at(row: usize, col: usize) -> usize {
    if col < HALF_COLS {
        row * HALF_COLS + col
    } else {
        HALF_CHANNELS + row * HALF_COLS + (col - HALF_COLS)
    }
}

/// Squared Euclidean distance between two channels on the grid.
pub fn grid_dist2(a: usize, b: usize) -> f64 {
    let (ra, ca) = grid_pos(a);
    let (rb, cb) = grid_pos(b);
    let dr = ra as f64 - rb as f64;
    let dc = ca as f64 - cb as f64;
    dr * dr + dc * dc
}

/// Samples [start, start+len) of a [128, D] signal as a (time, row, col) window.
pub fn to_grid(x: ArrayView2<f64>, start: usize, len: usize) -> Array3<f64> {
    Array3::from_shape_fn((len, GRID_ROWS, GRID_COLS), |(t, r, c)| x[[channel_at(r, c), start + t]])
}

/// Inverse of [`to_grid`]: a (time, row, col) window back to [128, time].
pub fn from_grid(w: ArrayView3<f64>) -> Array2<f64> {
    let len = w.shape()[0];
    Array2::from_shape_fn((NUM_CHANNELS, len), |(ch, t)| {
        let (r, c) = grid_pos(ch);
        w[[t, r, c]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_a_bijection() {
        let mut seen = [false; NUM_CHANNELS];
        for ch in 0..NUM_CHANNELS {
            let (r, c) = grid_pos(ch);
            assert!(r < GRID_ROWS && c < GRID_COLS);
            assert_eq!(channel_at(r, c), ch);
            seen[r * GRID_COLS + c] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn flexor_grid_starts_at_column_eight() {
        assert_eq!(grid_pos(63), (7, 7));
        assert_eq!(grid_pos(64), (0, 8));
        assert_eq!(grid_pos(127), (7, 15));
        assert_eq!(grid_dist2(0, 9), 2.0);
    }

    #[test]
    fn grid_round_trip() {
        let x = Array2::from_shape_fn((NUM_CHANNELS, 10), |(c, t)| (c * 10 + t) as f64);
        let w = to_grid(x.view(), 2, 5);
        assert_eq!(w[[0, 0, 8]], x[[64, 2]]);
        assert_eq!(from_grid(w.view()), x.slice(ndarray::s![.., 2..7]));
    }
}
