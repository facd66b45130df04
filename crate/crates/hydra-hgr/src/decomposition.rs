//! Blind decomposition of a raw HD-sEMG window into motor-unit spike trains.
//!
//! The convolutive mixture becomes instantaneous after extending every channel
//! with T delayed copies. The extended observations are whitened, and each
//! source is then estimated in whitened coordinates, where the linear MMSE
//! spike-train estimator reduces to a projection ŝ = wᵀz:
//!
//! 1. initialize w at the most active unused time column of z,
//! 2. a few ascent steps on E{(wᵀz)⁴} and fastICA fixed-point steps,
//! 3. re-estimate w as the mean of z over the strongest discharges, keeping
//!    the subset that best separates spikes from background (silhouette),
//! 4. align detections to MUAP onsets and repeat the MMSE re-estimation at a
//!    canonical delay until the onset set is stable,
//! 5. accept the source if its silhouette clears the threshold and it does not
//!    duplicate an accepted source.
//!
//! Accepted separation vectors are deflated (Gram–Schmidt) from later
//! estimates.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::signal_model::SpikeTrain;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompositionParams {
    pub extension_factor: usize,
    /// Maximum number of accepted sources, also the number of estimation
    /// iterations per window.
    pub max_sources: usize,
    pub muap_len: usize,
    pub sil_threshold: f64,
    pub fixed_point_max_iters: usize,
    pub fixed_point_tol: f64,
    pub gradient_iters: usize,
    pub gradient_lr: f64,
    pub dedup_tolerance_samples: usize,
    pub dedup_overlap_frac: f64,
    /// Coincident discharges needed (in addition to the fraction) to call a
    /// candidate a duplicate.
    pub dedup_min_coincident: usize,
    pub refractory_samples: usize,
    /// Eigenvalues below this fraction of the largest are dropped.
    pub eigen_floor: f64,
    /// Eigenvalues at or below this multiple of the mean of the lower half of
    /// the spectrum are treated as noise subspace; 0 disables.
    pub noise_floor_factor: f64,
    pub min_spikes: usize,
    /// Largest number of top peaks tried when re-estimating w from discharges.
    pub refine_max_peaks: usize,
    pub mmse_rounds: usize,
    /// Fraction of channels (by STA peak-to-peak) used for onset alignment.
    pub align_channel_frac: f64,
    /// Half-width of the time neighbourhood excluded around an initialization.
    pub init_exclusion_radius: usize,
}

impl Default for DecompositionParams {
    fn default() -> Self {
        Self {
            extension_factor: 20,
            max_sources: 7,
            muap_len: 20,
            sil_threshold: 0.92,
            fixed_point_max_iters: 5,
            fixed_point_tol: 1e-6,
            gradient_iters: 5,
            gradient_lr: 0.1,
            dedup_tolerance_samples: 1,
            dedup_overlap_frac: 0.3,
            dedup_min_coincident: 2,
            refractory_samples: 41,
            eigen_floor: 1e-10,
            noise_floor_factor: 4.0,
            min_spikes: 2,
            refine_max_peaks: 8,
            mmse_rounds: 5,
            align_channel_frac: 0.05,
            init_exclusion_radius: 10,
        }
    }
}

impl DecompositionParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(-1.0..=1.0).contains(&self.sil_threshold) {
            return bad(format!("silhouette threshold {} outside [-1, 1]", self.sil_threshold));
        }
        if self.extension_factor == 0 || self.muap_len == 0 || self.max_sources == 0 {
            return bad("extension factor, MUAP length and max sources must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dedup_overlap_frac) {
            return bad("dedup_overlap_frac outside [0, 1]".into());
        }
        if !(self.align_channel_frac > 0.0 && self.align_channel_frac <= 1.0) {
            return bad("align_channel_frac outside (0, 1]".into());
        }
        Ok(())
    }
}

/// Whitened extended observations.
#[derive(Debug, Clone)]
pub struct ExtendedObservation {
    /// [K, D]: whitened observations on the K retained components.
    pub z: Array2<f64>,
    /// Retained covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// [MT] row means of the extended observation.
    pub mean: Array1<f64>,
    /// [K, MT] whitening matrix Λ^{-1/2}Uᵀ on the retained subspace, when
    /// the extended matrix was materialized.
    pub whitener: Option<Array2<f64>>,
}

impl ExtendedObservation {
    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn len(&self) -> usize {
        self.z.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Frobenius-relative distance of the sample covariance of z from I.
    pub fn whiteness_error(&self) -> f64 {
        whiteness_error(self.z.view())
    }
}

pub fn whiteness_error(z: ArrayView2<f64>) -> f64 {
    let (k, d) = z.dim();
    if k == 0 {
        return 0.0;
    }
    let means = z.mean_axis(Axis(1)).expect("non-empty");
    let zc = &z - &means.insert_axis(Axis(1));
    let cov = zc.dot(&zc.t()) / d as f64;
    let diff = &cov - &Array2::<f64>::eye(k);
    diff.iter().map(|v| v * v).sum::<f64>().sqrt() / (k as f64).sqrt()
}

/// Row block r of the output holds x delayed by r samples, zero-padded on
/// the left.
pub fn extend(x: ArrayView2<f64>, t_factor: usize) -> Array2<f64> {
    let (m, d) = x.dim();
    let mut out = Array2::zeros((m * t_factor, d));
    for r in 0..t_factor.min(d) {
        out.slice_mut(s![r * m..(r + 1) * m, r..])
            .assign(&x.slice(s![.., ..d - r]));
    }
    out
}

struct Spectrum {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
    order: Vec<usize>,
}

fn sorted_eigen(sym: DMatrix<f64>) -> Spectrum {
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    Spectrum {
        values: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
        vectors: eig.eigenvectors,
        order,
    }
}

/// Number of leading eigenvalues kept: above the relative floor, then above
/// the noise-floor multiple of the lower-half mean.
fn retained_count(lam: &[f64], eigen_floor: f64, noise_factor: f64) -> usize {
    let lmax = lam.first().copied().unwrap_or(0.0);
    let k = lam.iter().take_while(|&&l| l > eigen_floor * lmax && l > 0.0).count();
    if noise_factor <= 0.0 || k < 2 {
        return k;
    }
    let lower = &lam[k / 2..k];
    let thr = noise_factor * lower.iter().sum::<f64>() / lower.len() as f64;
    lam[..k].iter().take_while(|&&l| l > thr).count()
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

/// Whitening of an explicit [MT, D] matrix with the relative eigenvalue
/// floor only.
pub fn whiten(x_ext: ArrayView2<f64>) -> Result<ExtendedObservation> {
    whiten_with(x_ext, 1e-10, 0.0)
}

pub fn whiten_with(x_ext: ArrayView2<f64>, eigen_floor: f64, noise_factor: f64) -> Result<ExtendedObservation> {
    let (n, d) = x_ext.dim();
    if d < 2 {
        return Err(Error::DegenerateInput(format!("{d} samples, need at least 2")));
    }
    let mean = x_ext.mean_axis(Axis(1)).expect("d >= 2");
    let xc = &x_ext - &mean.view().insert_axis(Axis(1));
    if xc.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateInput("observations have zero variance".into()));
    }
    if n <= d {
        let cov = xc.dot(&xc.t()) / d as f64;
        let sp = sorted_eigen(to_dmatrix(&cov));
        let k = retained_count(&sp.values, eigen_floor, noise_factor);
        let whitener = Array2::from_shape_fn((k, n), |(i, j)| {
            sp.vectors[(j, sp.order[i])] / sp.values[i].sqrt()
        });
        let z = whitener.dot(&xc);
        Ok(ExtendedObservation {
            z,
            eigenvalues: sp.values[..k].to_vec(),
            mean,
            whitener: Some(whitener),
        })
    } else {
        let gram = xc.t().dot(&xc);
        let (z, lam) = whiten_from_gram(gram, eigen_floor, noise_factor);
        // U = xc V Λ^{-1/2} / √D, so Λ^{-1/2}Uᵀ = (zᵀ scaled) mapped back.
        let whitener = z.dot(&xc.t()) / d as f64;
        let whitener = Array2::from_shape_fn(whitener.dim(), |(i, j)| whitener[[i, j]] / lam[i]);
        Ok(ExtendedObservation {
            z,
            eigenvalues: lam,
            mean,
            whitener: Some(whitener),
        })
    }
}

/// z = √D·Vᵀ on retained eigenvectors of the centered Gram matrix.
fn whiten_from_gram(gram: Array2<f64>, eigen_floor: f64, noise_factor: f64) -> (Array2<f64>, Vec<f64>) {
    let d = gram.nrows();
    let sp = sorted_eigen(to_dmatrix(&gram));
    let lam: Vec<f64> = sp.values.iter().map(|v| v / d as f64).collect();
    let k = retained_count(&lam, eigen_floor, noise_factor);
    let scale = (d as f64).sqrt();
    let z = Array2::from_shape_fn((k, d), |(i, t)| scale * sp.vectors[(t, sp.order[i])]);
    (z, lam[..k].to_vec())
}

/// Centered Gram matrix of extend(x, T) without materializing it, via the
/// shift recursion G[t,u] = C[t,u] + G[t−1,u−1] − C[t−T,u−T] on C = xᵀx.
pub fn extended_gram(x: ArrayView2<f64>, t_factor: usize) -> (Array2<f64>, Array1<f64>) {
    let (m, d) = x.dim();
    let c = x.t().dot(&x);
    let mut g = Array2::<f64>::zeros((d, d));
    for t in 0..d {
        for u in 0..d {
            let mut v = c[[t, u]];
            if t > 0 && u > 0 {
                v += g[[t - 1, u - 1]];
                if t >= t_factor && u >= t_factor {
                    v -= c[[t - t_factor, u - t_factor]];
                }
            }
            g[[t, u]] = v;
        }
    }
    // Row (i, r) of the extension has mean Σ_{t < D−r} x[i,t] / D.
    let mut prefix = Array2::<f64>::zeros((m, d + 1));
    for i in 0..m {
        for t in 0..d {
            prefix[[i, t + 1]] = prefix[[i, t]] + x[[i, t]];
        }
    }
    let mut mean = Array1::zeros(m * t_factor);
    for r in 0..t_factor {
        for i in 0..m {
            mean[r * m + i] = prefix[[i, d.saturating_sub(r)]] / d as f64;
        }
    }
    // a[t] = Σ_rows mean_row · xe_row(t); c0 = Σ_rows mean_row².
    let mut a = Array1::<f64>::zeros(d);
    for t in 0..d {
        let mut acc = 0.0;
        for r in 0..t_factor.min(t + 1) {
            for i in 0..m {
                acc += mean[r * m + i] * x[[i, t - r]];
            }
        }
        a[t] = acc;
    }
    let c0 = mean.iter().map(|v| v * v).sum::<f64>();
    for t in 0..d {
        for u in 0..d {
            g[[t, u]] += c0 - a[t] - a[u];
        }
    }
    (g, mean)
}

/// Extension followed by whitening, computed from the time-domain Gram matrix.
pub fn whiten_extended(x: ArrayView2<f64>, params: &DecompositionParams) -> Result<ExtendedObservation> {
    let d = x.ncols();
    if d < 2 {
        return Err(Error::DegenerateInput(format!("{d} samples, need at least 2")));
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateInput("all-zero window".into()));
    }
    let (gram, mean) = extended_gram(x, params.extension_factor);
    if gram.iter().all(|&v| v.abs() == 0.0) {
        return Err(Error::DegenerateInput("observations have zero variance".into()));
    }
    let (z, eigenvalues) = whiten_from_gram(gram, params.eigen_floor, params.noise_floor_factor);
    Ok(ExtendedObservation {
        z,
        eigenvalues,
        mean,
        whitener: None,
    })
}

/// Removes the components along `basis` (orthonormal) and normalizes.
/// Returns `None` for a vector that vanishes after deflation.
pub fn orthonormalize(mut w: Array1<f64>, basis: &[Array1<f64>]) -> Option<Array1<f64>> {
    for b in basis {
        let p = b.dot(&w);
        w.scaled_add(-p, b);
    }
    let n = w.dot(&w).sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return None;
    }
    Some(w / n)
}

fn kurtosis_contrast(z: ArrayView2<f64>, w: ArrayView1<f64>) -> f64 {
    let y = w.dot(&z);
    y.iter().map(|v| v.powi(4)).sum::<f64>() / y.len() as f64
}

/// Time index of highest activity ‖z[:, t]‖² among unused columns.
pub fn activity_init(obs: &ExtendedObservation, used: &[bool]) -> Result<usize> {
    let norms = obs.z.map_axis(Axis(0), |c| c.dot(&c));
    (0..obs.len())
        .filter(|&t| !used.get(t).copied().unwrap_or(false))
        .max_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(b.cmp(&a)))
        .ok_or(Error::Exhausted)
}

/// Activity initialization followed by normalized gradient ascent on the
/// kurtosis contrast E{(wᵀz)⁴}, constrained to the unit sphere and the
/// complement of `accepted`. The step starts at `gradient_lr` and halves
/// whenever a step would decrease the contrast.
pub fn gckc_init_and_refine(
    obs: &ExtendedObservation,
    used: &[bool],
    accepted: &[Array1<f64>],
    params: &DecompositionParams,
) -> Result<(usize, Array1<f64>)> {
    let t0 = activity_init(obs, used)?;
    let z = obs.z.view();
    let mut w = orthonormalize(z.column(t0).to_owned(), accepted)
        .ok_or_else(|| Error::NumericalFailure("initial column lies in the deflated subspace".into()))?;
    let mut eta = params.gradient_lr;
    let mut c = kurtosis_contrast(z, w.view());
    let n = obs.len() as f64;
    for _ in 0..params.gradient_iters {
        let y = w.dot(&z);
        let mut g = z.dot(&y.mapv(|v| 4.0 * v * v * v)) / n;
        let radial = g.dot(&w);
        g.scaled_add(-radial, &w);
        let gn = g.dot(&g).sqrt();
        if !(gn > 0.0) {
            break;
        }
        let mut improved = false;
        while eta > 1e-6 {
            let cand = orthonormalize(&w + &(&g * (eta / gn)), accepted);
            if let Some(cand) = cand {
                let cn = kurtosis_contrast(z, cand.view());
                if cn >= c {
                    w = cand;
                    c = cn;
                    improved = true;
                    break;
                }
            }
            eta /= 2.0;
        }
        if !improved {
            break;
        }
    }
    Ok((t0, w))
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub w: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// fastICA fixed point w ← E{z g(wᵀz)} − E{g′(wᵀz)} w with g(u) = u³,
/// deflated against `accepted` and renormalized every iteration.
pub fn fastica_fixed_point(
    obs: &ExtendedObservation,
    w0: &Array1<f64>,
    accepted: &[Array1<f64>],
    params: &DecompositionParams,
) -> Result<FixedPointResult> {
    let z = obs.z.view();
    let n = obs.len() as f64;
    let mut w = w0.clone();
    for it in 1..=params.fixed_point_max_iters {
        let y = w.dot(&z);
        let g = y.mapv(|v| v * v * v);
        let gp_mean = y.iter().map(|v| 3.0 * v * v).sum::<f64>() / n;
        let mut wn = z.dot(&g) / n;
        wn.scaled_add(-gp_mean, &w);
        if wn.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite fixed-point update".into()));
        }
        let wn = orthonormalize(wn, accepted)
            .ok_or_else(|| Error::NumericalFailure("fixed-point update vanished".into()))?;
        let conv = wn.dot(&w).abs() > 1.0 - params.fixed_point_tol;
        w = wn;
        if conv {
            return Ok(FixedPointResult {
                w,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(FixedPointResult {
        w,
        iterations: params.fixed_point_max_iters,
        converged: false,
    })
}

/// Interior local maxima of `s2` (plateaus resolved to their left edge),
/// greedily accepted by height with a minimum separation, returned in time
/// order.
pub fn find_peaks(s2: &[f64], min_separation: usize) -> Vec<usize> {
    let n = s2.len();
    let mut cand: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&i| s2[i] >= s2[i - 1] && s2[i] > s2[i + 1])
        .collect();
    cand.sort_by(|&a, &b| s2[b].total_cmp(&s2[a]).then(a.cmp(&b)));
    let mut acc: Vec<usize> = Vec::new();
    for i in cand {
        if acc.iter().all(|&j| i.abs_diff(j) >= min_separation) {
            acc.push(i);
        }
    }
    acc.sort_unstable();
    acc
}

/// Two-cluster 1-D k-means initialized at the extremes. Returns the high and
/// low centroids and, per value, whether it belongs to the high cluster.
pub fn two_means(h: &[f64]) -> (f64, f64, Vec<bool>) {
    let mut hi = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = h.iter().copied().fold(f64::INFINITY, f64::min);
    let assign = |hi: f64, lo: f64| -> Vec<bool> { h.iter().map(|&v| (v - hi).abs() < (v - lo).abs()).collect() };
    let mut labels = assign(hi, lo);
    for _ in 0..100 {
        let (mut sh, mut nh, mut sl, mut nl) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &is_hi) in h.iter().zip(&labels) {
            if is_hi {
                sh += v;
                nh += 1;
            } else {
                sl += v;
                nl += 1;
            }
        }
        if nh == 0 || nl == 0 {
            break;
        }
        let (nhi, nlo) = (sh / nh as f64, sl / nl as f64);
        if nhi == hi && nlo == lo {
            break;
        }
        hi = nhi;
        lo = nlo;
        labels = assign(hi, lo);
    }
    (hi, lo, labels)
}

/// Silhouette of a two-cluster split: (d_between − d_within) / max of both.
pub fn silhouette(h: &[f64], hi: f64, lo: f64, labels: &[bool]) -> f64 {
    let dw = h
        .iter()
        .zip(labels)
        .map(|(&v, &is_hi)| (v - if is_hi { hi } else { lo }).abs())
        .sum::<f64>()
        / h.len() as f64;
    let db = (hi - lo).abs();
    let den = db.max(dw);
    if den > 0.0 {
        (db - dw) / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Local maxima of ŝ² assigned to the spike cluster, in time order.
    pub spikes: Vec<usize>,
    pub sil: f64,
    /// True when ŝ was negated so that its largest |peak| is positive.
    pub flipped: bool,
}

/// Spike detection on an estimated source: peaks of ŝ², 2-means on their
/// heights, spikes = high cluster. Fewer than two peaks gives sil = −1.
pub fn detect_spikes(s_hat: &[f64], refractory: usize) -> Detection {
    let mx = s_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mn = s_hat.iter().copied().fold(f64::INFINITY, f64::min);
    let flipped = mx.abs() < mn.abs();
    let s2: Vec<f64> = s_hat.iter().map(|v| v * v).collect();
    let peaks = find_peaks(&s2, refractory);
    if peaks.len() < 2 {
        return Detection {
            spikes: Vec::new(),
            sil: -1.0,
            flipped,
        };
    }
    let h: Vec<f64> = peaks.iter().map(|&p| s2[p]).collect();
    let (hi, lo, labels) = two_means(&h);
    let spikes = peaks.iter().zip(&labels).filter(|(_, &l)| l).map(|(&p, _)| p).collect();
    Detection {
        spikes,
        sil: silhouette(&h, hi, lo, &labels),
        flipped,
    }
}

/// Shift from detection times to MUAP onsets: the spike-triggered average over
/// lags [−max_lag, L) is restricted to the highest peak-to-peak channels, and
/// the onset is placed so that the L-sample window of maximum energy is
/// centered on its energy centroid.
pub fn onset_shift(x: ArrayView2<f64>, spikes: &[usize], l: usize, max_lag: usize, channel_frac: f64) -> isize {
    let (m, d) = x.dim();
    let span = max_lag + l;
    let mut acc = Array2::<f64>::zeros((m, span));
    let mut cnt = vec![0usize; span];
    for &t in spikes {
        for k in 0..span {
            let tt = t as isize - max_lag as isize + k as isize;
            if tt >= 0 && (tt as usize) < d {
                cnt[k] += 1;
                for ch in 0..m {
                    acc[[ch, k]] += x[[ch, tt as usize]];
                }
            }
        }
    }
    for k in 0..span {
        if cnt[k] > 0 {
            acc.column_mut(k).mapv_inplace(|v| v / cnt[k] as f64);
        }
    }
    let p2p: Vec<f64> = acc
        .axis_iter(Axis(0))
        .map(|r| {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mn = r.iter().copied().fold(f64::INFINITY, f64::min);
            mx - mn
        })
        .collect();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p2p[b].total_cmp(&p2p[a]).then(a.cmp(&b)));
    let top = ((channel_frac * m as f64) as usize).max(1);
    let energy: Vec<f64> = (0..span)
        .map(|k| idx[..top].iter().map(|&ch| acc[[ch, k]] * acc[[ch, k]]).sum())
        .collect();
    let mut best = (f64::NEG_INFINITY, 0usize);
    for i in 0..=span - l {
        let e: f64 = energy[i..i + l].iter().sum();
        if e > best.0 {
            best = (e, i);
        }
    }
    let seg = &energy[best.1..best.1 + l];
    let total: f64 = seg.iter().sum();
    if !(total > 0.0) {
        return 0;
    }
    let centroid = seg.iter().enumerate().map(|(k, e)| k as f64 * e).sum::<f64>() / total + best.1 as f64
        - max_lag as f64;
    (centroid - (l as f64 - 1.0) / 2.0).round() as isize
}

/// One motor unit found in a window.
#[derive(Debug, Clone)]
pub struct SourceEstimate {
    /// Unit-norm separation vector in whitened coordinates.
    pub w: Array1<f64>,
    /// ŝ = wᵀz, oriented so its largest |peak| is positive.
    pub s_hat: Array1<f64>,
    /// Detected local maxima of ŝ².
    pub peaks: Vec<usize>,
    /// Offset from `peaks` to the discharge (MUAP onset) times.
    pub onset_shift: isize,
    /// Discharge times: `peaks + onset_shift`, restricted to the window.
    pub spikes: SpikeTrain,
    pub sil: f64,
}

fn count_coincident(a: &[usize], b: &[usize], tol: usize) -> usize {
    a.iter().filter(|&&t| b.iter().any(|&u| t.abs_diff(u) <= tol)).count()
}

struct Candidate {
    w: Array1<f64>,
    peaks: Vec<usize>,
    shift: isize,
    onsets: Vec<usize>,
    sil: f64,
}

fn oriented(z: ArrayView2<f64>, w: Array1<f64>, refractory: usize) -> (Array1<f64>, Detection) {
    let s = w.dot(&z);
    let det = detect_spikes(s.as_slice().expect("contiguous"), refractory);
    let w = if det.flipped { -w } else { w };
    (w, det)
}

/// Re-estimates w as the normalized sum of z over the k strongest peaks,
/// k ∈ [2, refine_max_peaks], keeping the k with the best silhouette; repeats
/// until the chosen peak set is stable.
fn refine_by_top_peaks(
    z: ArrayView2<f64>,
    mut w: Array1<f64>,
    accepted: &[Array1<f64>],
    params: &DecompositionParams,
) -> Array1<f64> {
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..10 {
        let s = w.dot(&z);
        let s2: Vec<f64> = s.iter().map(|v| v * v).collect();
        let mut pk = find_peaks(&s2, params.refractory_samples);
        pk.sort_by(|&a, &b| s2[b].total_cmp(&s2[a]).then(a.cmp(&b)));
        pk.truncate(params.refine_max_peaks);
        let mut best: Option<(f64, Array1<f64>, Vec<usize>)> = None;
        for k in 2..=pk.len() {
            let mut sum = Array1::<f64>::zeros(z.nrows());
            for &t in &pk[..k] {
                sum += &z.column(t);
            }
            let Some(wk) = orthonormalize(sum, accepted) else { continue };
            let det = detect_spikes(wk.dot(&z).as_slice().expect("contiguous"), params.refractory_samples);
            if det.spikes.len() >= 2 && best.as_ref().is_none_or(|b| det.sil > b.0) {
                let mut set = pk[..k].to_vec();
                set.sort_unstable();
                best = Some((det.sil, wk, set));
            }
        }
        let Some((_, wk, set)) = best else { break };
        w = wk;
        if prev.as_ref() == Some(&set) {
            break;
        }
        prev = Some(set);
    }
    w
}

fn estimate_source(
    x: ArrayView2<f64>,
    obs: &ExtendedObservation,
    w: Array1<f64>,
    accepted: &[Array1<f64>],
    params: &DecompositionParams,
) -> Option<Candidate> {
    let z = obs.z.view();
    let d = obs.len();
    let l = params.muap_len;
    let max_lag = l + params.extension_factor - 2;
    let w = refine_by_top_peaks(z, w, accepted, params);
    let (mut w, mut det) = oriented(z, w, params.refractory_samples);
    if det.spikes.is_empty() {
        return None;
    }
    let mut shift = onset_shift(x, &det.spikes, l, max_lag, params.align_channel_frac);
    let to_onsets = |peaks: &[usize], shift: isize| -> Vec<usize> {
        peaks
            .iter()
            .map(|&p| p as isize + shift)
            .filter(|&t| t >= 0 && (t as usize) < d)
            .map(|t| t as usize)
            .collect()
    };
    let mut onsets = to_onsets(&det.spikes, shift);
    // MMSE re-estimation at the canonical delay L−1: w ∝ Σ z[:, onset + L − 1].
    for _ in 0..params.mmse_rounds {
        let cols: Vec<usize> = onsets.iter().map(|&t| t + l - 1).filter(|&t| t < d).collect();
        if cols.is_empty() {
            break;
        }
        let mut sum = Array1::<f64>::zeros(z.nrows());
        for &t in &cols {
            sum += &z.column(t);
        }
        let Some(wn) = orthonormalize(sum, accepted) else { break };
        let (wn, dn) = oriented(z, wn, params.refractory_samples);
        if dn.spikes.is_empty() {
            return None;
        }
        let sh = onset_shift(x, &dn.spikes, l, max_lag, params.align_channel_frac);
        let new = to_onsets(&dn.spikes, sh);
        w = wn;
        det = dn;
        shift = sh;
        if new == onsets {
            break;
        }
        onsets = new;
    }
    Some(Candidate {
        w,
        peaks: det.spikes,
        shift,
        onsets,
        sil: det.sil,
    })
}

/// Decomposes one raw [M, D] window into at most `max_sources` motor units.
pub fn decompose_window(x: ArrayView2<f64>, params: &DecompositionParams) -> Result<Vec<SourceEstimate>> {
    params.validate()?;
    let d = x.ncols();
    if d < params.muap_len + params.extension_factor {
        return Err(Error::Shape(format!(
            "window of {d} samples shorter than L + T = {}",
            params.muap_len + params.extension_factor
        )));
    }
    let obs = whiten_extended(x, params)?;
    decompose_whitened(x, &obs, params)
}

/// Source estimation loop on precomputed whitened observations.
pub fn decompose_whitened(
    x: ArrayView2<f64>,
    obs: &ExtendedObservation,
    params: &DecompositionParams,
) -> Result<Vec<SourceEstimate>> {
    let d = obs.len();
    let l = params.muap_len;
    let mut used = vec![false; d];
    let mut basis: Vec<Array1<f64>> = Vec::new();
    let mut out: Vec<SourceEstimate> = Vec::new();
    if obs.dim() == 0 {
        return Ok(out);
    }
    for _ in 0..params.max_sources {
        if basis.len() >= obs.dim() {
            break;
        }
        let (t0, w) = match gckc_init_and_refine(obs, &used, &basis, params) {
            Ok(v) => v,
            Err(Error::Exhausted) => break,
            Err(Error::NumericalFailure(_)) => {
                // Can only happen when the initial column is already spanned;
                // exclude it and move on.
                let t0 = activity_init(obs, &used)?;
                mark(&mut used, t0.saturating_sub(params.init_exclusion_radius), t0 + params.init_exclusion_radius + 1);
                continue;
            }
            Err(e) => return Err(e),
        };
        let w = match fastica_fixed_point(obs, &w, &basis, params) {
            Ok(r) => r.w,
            Err(Error::NumericalFailure(_)) => w,
            Err(e) => return Err(e),
        };
        let cand = estimate_source(x, obs, w.clone(), &basis, params);
        mark(&mut used, t0.saturating_sub(params.init_exclusion_radius), t0 + params.init_exclusion_radius + 1);
        let Some(cand) = cand else {
            basis.push(w);
            continue;
        };
        for &t in &cand.onsets {
            mark(&mut used, t.saturating_sub(1), t + l + params.extension_factor - 1);
        }
        let duplicate = out.iter().any(|o| {
            let co = count_coincident(&cand.onsets, &o.spikes.times, params.dedup_tolerance_samples);
            co >= params.dedup_min_coincident && co as f64 > params.dedup_overlap_frac * cand.onsets.len().max(1) as f64
        });
        let accept = cand.sil >= params.sil_threshold && !duplicate && cand.onsets.len() >= params.min_spikes;
        basis.push(cand.w.clone());
        if accept {
            let s_hat = cand.w.dot(&obs.z);
            out.push(SourceEstimate {
                w: cand.w,
                s_hat,
                peaks: cand.peaks,
                onset_shift: cand.shift,
                spikes: SpikeTrain::new(cand.onsets),
                sil: cand.sil,
            });
        }
    }
    Ok(out)
}

fn mark(used: &mut [bool], from: usize, to: usize) {
    let to = to.min(used.len());
    if from < to {
        used[from..to].iter_mut().for_each(|u| *u = true);
    }
}

/// Fraction matched / (matched + missed + false), greedy matching in time
/// order within ±`tol` samples.
pub fn rate_of_agreement(estimated: &[usize], truth: &[usize], tol: usize) -> f64 {
    let mut taken = vec![false; truth.len()];
    let mut matched = 0usize;
    for &t in estimated {
        if let Some(j) = (0..truth.len()).find(|&j| !taken[j] && t.abs_diff(truth[j]) <= tol) {
            taken[j] = true;
            matched += 1;
        }
    }
    let denom = estimated.len() + truth.len() - matched;
    if denom == 0 {
        1.0
    } else {
        matched as f64 / denom as f64
    }
}
