//! Shared neural-network building blocks with hand-written gradients: dense
//! layers, layer normalization, GELU, softmax cross-entropy, an Adam
//! optimizer with decoupled weight decay, and checkpoint I/O.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, IxDyn};
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_io::{read_tensor, write_tensor, SeededRng, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Anything exposing an ordered, named list of parameter tensors.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>));

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    /// SHA-256 over names, shapes and little-endian f64 values.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, a| {
            h.update(name.as_bytes());
            for &d in a.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in a.iter() {
                h.update(v.to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }

    /// Rounds every parameter to the nearest f32.
    fn round_to_f32(&mut self) {
        self.visit_mut(&mut |_, mut a| a.mapv_inplace(|v| v as f32 as f64));
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, mut a| a.fill(0.0));
    }

    fn scale(&mut self, c: f64) {
        self.visit_mut(&mut |_, mut a| a.mapv_inplace(|v| v * c));
    }

    /// self += other (same structure).
    fn add_assign_from(&mut self, other: &dyn Parameterized) {
        let mut src: Vec<ArrayD<f64>> = Vec::new();
        other.visit(&mut |_, a| src.push(a.to_owned()));
        let mut i = 0;
        self.visit_mut(&mut |_, mut a| {
            a += &src[i];
            i += 1;
        });
    }
}

/// Dense layer y = x W + b with W of shape [in, out].
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    pub fn init(input: usize, output: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            w: gaussian((input, output), std, rng),
            b: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(&dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub fn backward_vec(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        let outer = x.insert_axis(Axis(1)).dot(&dy.insert_axis(Axis(0)));
        grad.w += &outer;
        grad.b += &dy;
        self.w.dot(&dy)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        f(&format!("{prefix}.w"), self.w.view().into_dyn());
        f(&format!("{prefix}.b"), self.b.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        f(&format!("{prefix}.w"), self.w.view_mut().into_dyn());
        f(&format!("{prefix}.b"), self.b.view_mut().into_dyn());
    }
}

pub fn gaussian(shape: (usize, usize), std: f64, rng: &mut SeededRng) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    /// Row-wise normalization (population variance) then scale and shift.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LnCache) {
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            *inv = standardize(row.view_mut());
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let s1 = g.sum();
            let s2 = g.dot(&xh);
            let k = cache.inv_std[i] / d;
            for j in 0..dy.ncols() {
                dx[[i, j]] = k * (d * g[j] - s1 - xh[j] * s2);
            }
        }
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view_mut().into_dyn());
    }
}

/// In-place (x − mean) / sqrt(var + ε) with population variance; returns the
/// inverse standard deviation.
fn standardize(mut row: ndarray::ArrayViewMut1<f64>) -> f64 {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    row.mapv_inplace(|v| (v - mean) * inv);
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable softmax of one vector.
pub fn softmax(v: ArrayView1<f64>) -> Array1<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = v.mapv(|x| (x - mx).exp());
    let s = e.sum();
    e / s
}

pub fn softmax_rows(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let p = softmax(row.view());
        row.assign(&p);
    }
    out
}

/// Cross-entropy of softmax(logits) against `label`, and dL/dlogits = p − y.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> (f64, Array1<f64>) {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut g = logits.mapv(|v| (v - lse).exp());
    g[label] -= 1.0;
    (loss, g)
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Round parameters to f32 after every step so checkpoints are exact.
    pub f32_storage: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            epochs: 20,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            f32_storage: true,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParam("learning rate and weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay:
/// p ← p − lr·(m̂ / (√v̂ + ε) + wd·p).
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
    pub params: TrainParams,
}

impl Adam {
    pub fn new(model: &dyn Parameterized, params: TrainParams) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |_, a| m.push(ArrayD::zeros(a.raw_dim())));
        Self {
            v: m.clone(),
            m,
            step: 0,
            params,
        }
    }

    pub fn update(&mut self, model: &mut dyn Parameterized, grads: &dyn Parameterized) {
        let mut g: Vec<ArrayD<f64>> = Vec::new();
        grads.visit(&mut |_, a| g.push(a.to_owned()));
        self.step += 1;
        let p = &self.params;
        let bc1 = 1.0 - p.beta1.powi(self.step as i32);
        let bc2 = 1.0 - p.beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_mut(&mut |_, mut w| {
            let gi = &g[i];
            m[i].zip_mut_with(gi, |mi, &gv| *mi = p.beta1 * *mi + (1.0 - p.beta1) * gv);
            v[i].zip_mut_with(gi, |vi, &gv| *vi = p.beta2 * *vi + (1.0 - p.beta2) * gv * gv);
            if p.lr != 0.0 {
                ndarray::Zip::from(&mut w).and(&m[i]).and(&v[i]).for_each(|w, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *w -= p.lr * (mhat / (vhat.sqrt() + p.eps) + p.weight_decay * *w);
                });
            }
            i += 1;
        });
        if p.f32_storage && p.lr != 0.0 {
            model.round_to_f32();
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes every parameter as `<name>.hydt` plus a JSON manifest.
pub fn save_checkpoint(dir: &Path, kind: &str, config: serde_json::Value, model: &dyn Parameterized) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    let mut result = Ok(());
    model.visit(&mut |name, a| {
        if result.is_err() {
            return;
        }
        let file = format!("{name}.hydt");
        let owned = a.to_owned();
        result = Tensor::from_array_f64(&owned).and_then(|t| write_tensor(dir.join(&file), &t));
        entries.push(ManifestEntry {
            name: name.to_string(),
            file,
            dims: a.shape().to_vec(),
        });
    });
    result?;
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        config,
        params: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Fills a model whose structure was built from the manifest config.
pub fn load_params(dir: &Path, manifest: &CheckpointManifest, model: &mut dyn Parameterized) -> Result<()> {
    let mut loaded = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let t = read_tensor(dir.join(&e.file))?;
        if t.dims() != e.dims.as_slice() {
            return Err(Error::Checkpoint(format!("{}: dims {:?} disagree with manifest", e.file, t.dims())));
        }
        loaded.push((e.name.clone(), t));
    }
    let names = model.param_names();
    if names.len() != loaded.len() || names.iter().zip(&loaded).any(|(a, (b, _))| a != b) {
        return Err(Error::Checkpoint("parameter list does not match the model configuration".into()));
    }
    let mut i = 0;
    let mut err = None;
    model.visit_mut(&mut |name, mut a| {
        let t = &loaded[i].1;
        if a.shape() != t.dims() {
            err = Some(Error::Checkpoint(format!("{name}: shape {:?} vs {:?}", a.shape(), t.dims())));
        } else {
            let src = ArrayD::from_shape_vec(IxDyn(t.dims()), t.data().iter().map(|&v| f64::from(v)).collect())
                .expect("consistent shape");
            a.assign(&src);
        }
        i += 1;
    });
    err.map_or(Ok(()), Err)
}
