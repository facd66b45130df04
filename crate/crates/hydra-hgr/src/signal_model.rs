//! Convolutive mixture model of HD-sEMG: every motor unit fires a spike train
//! and contributes its action potential (MUAP) to every channel,
//!
//! ```text
//! x_i(t) = Σ_j Σ_l h_ij(l) · s_j(t − l) + ν_i(t)
//! ```
//!
//! plus a synthetic gesture dataset built on top of it.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::layout::{self, grid_dist2, NUM_CHANNELS, SAMPLING_RATE_HZ};
use crate::tensor_io::SeededRng;

pub const DEFAULT_MUAP_LEN: usize = 20;
pub const DEFAULT_REFRACTORY: usize = 41;
/// Minimum grid distance between MU centers when placing a bank.
pub const MIN_CENTER_SEPARATION: f64 = 3.0;
const PLACEMENT_ATTEMPTS: usize = 1000;
const ISI_JITTER: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct MuapBank {
    /// [N, M, L]
    pub h: Array3<f64>,
    /// Spatial center channel of every MU.
    pub centers: Vec<usize>,
}

impl MuapBank {
    pub fn num_mus(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn num_channels(&self) -> usize {
        self.h.shape()[1]
    }

    pub fn muap_len(&self) -> usize {
        self.h.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpikeTrain {
    pub times: Vec<usize>,
}

impl SpikeTrain {
    pub fn new(times: Vec<usize>) -> Self {
        Self { times }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrainSet {
    pub trains: Vec<SpikeTrain>,
    pub duration: usize,
    pub sampling_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub bank: MuapBank,
    pub trains: SpikeTrainSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    /// [M, D]
    pub x: Array2<f64>,
    pub truth: Option<Truth>,
    /// `f64::INFINITY` means noise was disabled.
    pub snr_db: f64,
}

impl SignalRecord {
    /// Noise-free part regenerated from the stored truth.
    pub fn clean(&self) -> Option<Array2<f64>> {
        self.truth
            .as_ref()
            .map(|t| convolve(&t.bank, &t.trains.trains, t.trains.duration))
    }
}

/// Random biphasic MUAP bank with Gaussian spatial falloff over the 8×16 grid.
///
/// Each MU's base waveform is the first derivative of a Gaussian of random
/// width in [1.5, 3] samples and random polarity, made zero-mean and scaled to
/// unit peak. Its amplitude at channel i is attenuated by exp(−d²/2σ²) where d
/// is the grid distance to the MU's center channel and σ ∈ [1.5, 2.5].
pub fn generate_muap_bank(
    n_mus: usize,
    m_channels: usize,
    l: usize,
    rng: &mut SeededRng,
) -> Result<MuapBank> {
    if n_mus == 0 {
        return Err(Error::InvalidParam("n_mus must be at least 1".into()));
    }
    if l < 4 {
        return Err(Error::InvalidParam(format!("MUAP length {l} < 4")));
    }
    if m_channels == 0 || m_channels > NUM_CHANNELS {
        return Err(Error::InvalidParam(format!(
            "channel count {m_channels} outside 1..={NUM_CHANNELS}"
        )));
    }
    let mut h = Array3::zeros((n_mus, m_channels, l));
    let mut centers: Vec<usize> = Vec::with_capacity(n_mus);
    let mid = (l as f64 - 1.0) / 2.0;
    for j in 0..n_mus {
        let width: f64 = rng.random_range(1.5..3.0);
        let polarity = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut base: Vec<f64> = (0..l)
            .map(|k| {
                let t = k as f64 - mid;
                -t * (-t * t / (2.0 * width * width)).exp() * polarity
            })
            .collect();
        let mean = base.iter().sum::<f64>() / l as f64;
        base.iter_mut().for_each(|v| *v -= mean);
        let peak = base.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        base.iter_mut().for_each(|v| *v /= peak);

        let mut center = rng.random_range(0..m_channels);
        for _ in 1..PLACEMENT_ATTEMPTS {
            let far = centers
                .iter()
                .all(|&c| grid_dist2(c, center) >= MIN_CENTER_SEPARATION * MIN_CENTER_SEPARATION);
            if far {
                break;
            }
            center = rng.random_range(0..m_channels);
        }
        centers.push(center);

        let sigma: f64 = rng.random_range(1.5..2.5);
        for ch in 0..m_channels {
            let gain = (-grid_dist2(ch, center) / (2.0 * sigma * sigma)).exp();
            for k in 0..l {
                h[[j, ch, k]] = base[k] * gain;
            }
        }
    }
    Ok(MuapBank { h, centers })
}

/// Jittered-regular discharge trains: first discharge uniform in one
/// inter-spike interval, then each interval is the nominal one scaled by a
/// uniform factor in [0.8, 1.2].
pub fn generate_spike_trains(
    n_mus: usize,
    duration: usize,
    rate_hz: f64,
    rng: &mut SeededRng,
) -> Result<SpikeTrainSet> {
    generate_spike_trains_with_refractory(n_mus, duration, rate_hz, DEFAULT_REFRACTORY, rng)
}

pub fn generate_spike_trains_with_refractory(
    n_mus: usize,
    duration: usize,
    rate_hz: f64,
    refractory: usize,
    rng: &mut SeededRng,
) -> Result<SpikeTrainSet> {
    if duration == 0 {
        return Err(Error::InvalidParam("duration must be at least 1".into()));
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::InvalidParam(format!("firing rate {rate_hz} must be positive")));
    }
    let isi = SAMPLING_RATE_HZ / rate_hz;
    // Flooring two jittered times can shorten an interval by up to one sample.
    if isi * (1.0 - ISI_JITTER) < (refractory + 1) as f64 {
        return Err(Error::InvalidParam(format!(
            "firing rate {rate_hz} Hz violates the {refractory}-sample refractory period"
        )));
    }
    let trains = (0..n_mus)
        .map(|_| {
            let mut t = rng.random_range(0.0..isi);
            let mut times = Vec::new();
            while t < duration as f64 {
                times.push(t as usize);
                t += isi * (1.0 + rng.random_range(-ISI_JITTER..ISI_JITTER));
            }
            SpikeTrain::new(times)
        })
        .collect();
    Ok(SpikeTrainSet {
        trains,
        duration,
        sampling_rate: SAMPLING_RATE_HZ,
    })
}

/// Exact discrete convolution of impulse trains with the bank, summed over MUs.
pub fn convolve(bank: &MuapBank, trains: &[SpikeTrain], duration: usize) -> Array2<f64> {
    let (m, l) = (bank.num_channels(), bank.muap_len());
    let mut x = Array2::zeros((m, duration));
    for (j, train) in trains.iter().enumerate() {
        for &t in &train.times {
            let n = l.min(duration.saturating_sub(t));
            for ch in 0..m {
                for k in 0..n {
                    x[[ch, t + k]] += bank.h[[j, ch, k]];
                }
            }
        }
    }
    x
}

/// Mixes the bank with the trains and adds white Gaussian noise scaled to
/// `snr_db` relative to the clean power over all channels and samples.
/// `snr_db = f64::INFINITY` disables noise.
pub fn mix(
    bank: &MuapBank,
    trains: &SpikeTrainSet,
    snr_db: f64,
    rng: &mut SeededRng,
) -> Result<SignalRecord> {
    if bank.num_mus() != trains.trains.len() {
        return Err(Error::Shape(format!(
            "bank has {} MUs but {} trains were given",
            bank.num_mus(),
            trains.trains.len()
        )));
    }
    let mut x = convolve(bank, &trains.trains, trains.duration);
    if snr_db.is_finite() {
        let power = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        for v in x.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += sigma * n;
        }
    }
    Ok(SignalRecord {
        x,
        truth: Some(Truth {
            bank: bank.clone(),
            trains: trains.clone(),
        }),
        snr_db,
    })
}

/// 10·log10(P_clean / P_noise) measured on a record with stored truth.
pub fn empirical_snr_db(record: &SignalRecord) -> Option<f64> {
    let clean = record.clean()?;
    let ps = clean.iter().map(|v| v * v).sum::<f64>();
    let pn = record
        .x
        .iter()
        .zip(clean.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    Some(10.0 * (ps / pn).log10())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GestureDatasetConfig {
    pub num_classes: usize,
    pub reps_per_class: usize,
    pub windows_per_rep: usize,
    pub mus_per_class: usize,
    /// Size of the MU pool the classes draw their disjoint subsets from.
    pub mu_pool_size: usize,
    pub firing_rate_hz: f64,
    pub snr_db: f64,
    pub window_len: usize,
    pub skip: usize,
    pub muap_len: usize,
    pub seed: u64,
}

impl Default for GestureDatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            reps_per_class: 5,
            windows_per_rep: 10,
            mus_per_class: 4,
            mu_pool_size: 64,
            firing_rate_hz: 15.0,
            snr_db: 20.0,
            window_len: 512,
            skip: 256,
            muap_len: DEFAULT_MUAP_LEN,
            seed: 0,
        }
    }
}

impl GestureDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.reps_per_class == 0 || self.windows_per_rep == 0 || self.mus_per_class == 0 {
            return bad("reps_per_class, windows_per_rep and mus_per_class must be positive".into());
        }
        if self.num_classes * self.mus_per_class > self.mu_pool_size {
            return bad(format!(
                "{} classes × {} MUs exceed the pool of {} MUs",
                self.num_classes, self.mus_per_class, self.mu_pool_size
            ));
        }
        if self.window_len == 0 || self.skip == 0 || self.skip > self.window_len {
            return bad("need 0 < skip <= window_len".into());
        }
        Ok(())
    }

    pub fn rep_duration(&self) -> usize {
        self.window_len + self.skip * (self.windows_per_rep - 1)
    }
}

/// One continuous repetition of one gesture.
#[derive(Debug, Clone)]
pub struct Recording {
    pub label: usize,
    pub repetition: usize,
    /// MU pool indices active in this recording (one per bank row).
    pub active_mus: Vec<usize>,
    pub record: SignalRecord,
}

/// Raw window cut from a recording, reshaped to (time, row, col).
#[derive(Debug, Clone)]
pub struct LabeledWindow {
    pub label: usize,
    pub repetition: usize,
    pub index: usize,
    pub start: usize,
    pub raw: Array3<f64>,
}

/// Synthetic gesture recordings: class k activates MUs
/// [k·mus_per_class, (k+1)·mus_per_class) of the pool, each class with its own
/// bank; repetitions share the bank but redraw spike timing and noise.
pub fn generate_gesture_dataset(cfg: &GestureDatasetConfig) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let duration = cfg.rep_duration();
    let mut out = Vec::with_capacity(cfg.num_classes * cfg.reps_per_class);
    for class in 0..cfg.num_classes {
        let mut bank_rng = root.derive(1 + class as u64);
        let bank = generate_muap_bank(cfg.mus_per_class, NUM_CHANNELS, cfg.muap_len, &mut bank_rng)?;
        let active: Vec<usize> = (class * cfg.mus_per_class..(class + 1) * cfg.mus_per_class).collect();
        for rep in 0..cfg.reps_per_class {
            let mut rng = root.derive(((class as u64) << 32) | (1 << 20) | rep as u64);
            let trains = generate_spike_trains(cfg.mus_per_class, duration, cfg.firing_rate_hz, &mut rng)?;
            let record = mix(&bank, &trains, cfg.snr_db, &mut rng)?;
            out.push(Recording {
                label: class,
                repetition: rep,
                active_mus: active.clone(),
                record,
            });
        }
    }
    Ok(out)
}

/// Cuts windows of `window_len` every `skip` samples, reshaped to the grid.
/// The trailing partial window is dropped.
pub fn grid_windows(x: ArrayView2<f64>, window_len: usize, skip: usize) -> Result<Vec<Array3<f64>>> {
    let (c, d) = x.dim();
    if c != NUM_CHANNELS {
        return Err(Error::Shape(format!("expected {NUM_CHANNELS} channels, got {c}")));
    }
    if window_len == 0 || skip == 0 || skip > window_len {
        return Err(Error::InvalidParam("need 0 < skip <= window_len".into()));
    }
    if d < window_len {
        return Err(Error::Shape(format!("signal of {d} samples shorter than window {window_len}")));
    }
    let count = (d - window_len) / skip + 1;
    Ok((0..count)
        .map(|k| layout::to_grid(x, k * skip, window_len))
        .collect())
}

pub fn dataset_windows(recordings: &[Recording], window_len: usize, skip: usize) -> Result<Vec<LabeledWindow>> {
    let mut out = Vec::new();
    for rec in recordings {
        for (index, raw) in grid_windows(rec.record.x.view(), window_len, skip)?.into_iter().enumerate() {
            out.push(LabeledWindow {
                label: rec.label,
                repetition: rec.repetition,
                index,
                start: index * skip,
                raw,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_channel_bank_is_zero_mean_unit_peak() {
        let bank = generate_muap_bank(1, 1, 20, &mut SeededRng::new(3)).unwrap();
        let w: Vec<f64> = bank.h.iter().copied().collect();
        assert_eq!(w.len(), 20);
        assert!(w.iter().sum::<f64>().abs() < 1e-12);
        let peak = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bank_shape_and_determinism() {
        let a = generate_muap_bank(4, 128, 20, &mut SeededRng::new(9)).unwrap();
        let b = generate_muap_bank(4, 128, 20, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a.h.shape(), &[4, 128, 20]);
        assert_eq!(a, b);
        for j in 0..4 {
            let peak = (0..128)
                .flat_map(|ch| (0..20).map(move |k| (ch, k)))
                .fold(0.0f64, |m, (ch, k)| m.max(a.h[[j, ch, k]].abs()));
            assert!((peak - 1.0).abs() < 1e-12);
            for ch in 0..128 {
                let s: f64 = (0..20).map(|k| a.h[[j, ch, k]]).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bank_preconditions() {
        let mut r = SeededRng::new(0);
        assert!(generate_muap_bank(0, 128, 20, &mut r).is_err());
        assert!(generate_muap_bank(1, 128, 3, &mut r).is_err());
    }

    #[test]
    fn refractory_violation_is_an_error() {
        let mut r = SeededRng::new(0);
        assert!(generate_spike_trains(1, 512, 60.0, &mut r).is_err());
        assert!(generate_spike_trains(1, 512, 0.0, &mut r).is_err());
        assert!(generate_spike_trains(1, 0, 15.0, &mut r).is_err());
    }

    #[test]
    fn single_spike_copies_the_muap() {
        let bank = generate_muap_bank(1, 1, 20, &mut SeededRng::new(1)).unwrap();
        let trains = SpikeTrainSet {
            trains: vec![SpikeTrain::new(vec![100])],
            duration: 300,
            sampling_rate: SAMPLING_RATE_HZ,
        };
        let rec = mix(&bank, &trains, f64::INFINITY, &mut SeededRng::new(2)).unwrap();
        for t in 0..300 {
            let expect = if (100..120).contains(&t) { bank.h[[0, 0, t - 100]] } else { 0.0 };
            assert_eq!(rec.x[[0, t]], expect);
        }
        assert_eq!(rec.clean().unwrap(), rec.x);
    }

    #[test]
    fn spike_at_the_edge_is_truncated() {
        let bank = generate_muap_bank(1, 2, 20, &mut SeededRng::new(1)).unwrap();
        let x = convolve(&bank, &[SpikeTrain::new(vec![95])], 100);
        for k in 0..5 {
            assert_eq!(x[[1, 95 + k]], bank.h[[0, 1, k]]);
        }
    }

    #[test]
    fn dataset_counts_and_disjoint_subsets() {
        let cfg = GestureDatasetConfig {
            windows_per_rep: 4,
            ..Default::default()
        };
        let recs = generate_gesture_dataset(&cfg).unwrap();
        let wins = dataset_windows(&recs, 512, 256).unwrap();
        assert_eq!(wins.len(), 4 * 5 * 4);
        assert_eq!(wins[0].raw.shape(), &[512, 8, 16]);
        let reps: std::collections::BTreeSet<_> = recs.iter().map(|r| r.repetition).collect();
        assert_eq!(reps.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let c0 = &recs.iter().find(|r| r.label == 0).unwrap().active_mus;
        let c1 = &recs.iter().find(|r| r.label == 1).unwrap().active_mus;
        assert!(c0.iter().all(|m| !c1.contains(m)));
    }

    #[test]
    fn too_many_classes_for_the_pool() {
        let cfg = GestureDatasetConfig {
            num_classes: 17,
            ..Default::default()
        };
        assert!(generate_gesture_dataset(&cfg).is_err());
    }
}
