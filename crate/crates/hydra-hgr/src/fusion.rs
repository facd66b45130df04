//! Late fusion of frozen Macro and Micro backbones: the Macro class token and
//! the seven Micro class tokens are concatenated into one (1 + 7)·d feature
//! vector and classified by two dense layers with a GELU between them.
//!
//! The head scales the Macro block of its input by the number of Micro slots
//! so both paths enter the first layer with the same total weight; otherwise
//! seven Micro tokens outvote the single Macro token and the head tends to
//! settle on the weaker path.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::muap::MAX_SLOTS;
use crate::nn::{argmax, cross_entropy, gelu, gelu_grad, softmax, Adam, Linear, Parameterized, TrainParams};
use crate::tensor_io::SeededRng;
use crate::vit::{EpochStats, VitModel, INIT_STD};

pub const DEFAULT_HIDDEN: usize = 128;

/// Multiplier the head applies to the Macro block of a fused vector.
pub const MACRO_BLOCK_WEIGHT: f64 = MAX_SLOTS as f64;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Parameterized for FusionHead {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        self.fc1.visit("fc1", f);
        self.fc2.visit("fc2", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        self.fc1.visit_mut("fc1", f);
        self.fc2.visit_mut("fc2", f);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl FusionConfig {
    pub fn input_dim(&self) -> usize {
        (1 + MAX_SLOTS) * self.embed_dim
    }
}

impl FusionHead {
    pub fn new(cfg: &FusionConfig, rng: &mut SeededRng) -> Self {
        Self {
            fc1: Linear::init(cfg.input_dim(), cfg.hidden, INIT_STD, rng),
            fc2: Linear::init(cfg.hidden, cfg.num_classes, INIT_STD, rng),
        }
    }

    pub fn config(&self) -> FusionConfig {
        FusionConfig {
            embed_dim: self.embed_dim(),
            hidden: self.fc1.w.ncols(),
            num_classes: self.fc2.w.ncols(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: Linear::zeros(self.fc1.w.nrows(), self.fc1.w.ncols()),
            fc2: Linear::zeros(self.fc2.w.nrows(), self.fc2.w.ncols()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.w.nrows()
    }

    fn embed_dim(&self) -> usize {
        self.input_dim() / (1 + MAX_SLOTS)
    }

    /// The fused vector with its Macro block reweighted.
    fn balanced(&self, features: ArrayView1<f64>) -> Array1<f64> {
        let mut x = features.to_owned();
        let d = self.embed_dim();
        x.slice_mut(s![..d]).mapv_inplace(|v| v * MACRO_BLOCK_WEIGHT);
        x
    }

    pub fn logits(&self, features: ArrayView1<f64>) -> Array1<f64> {
        let h = self.fc1.forward_vec(self.balanced(features).view());
        self.fc2.forward_vec(h.mapv(gelu).view())
    }

    fn accumulate_gradients(&self, features: ArrayView1<f64>, label: usize, grad: &mut FusionHead) -> (f64, Array1<f64>) {
        let x = self.balanced(features);
        let x = x.view();
        let h = self.fc1.forward_vec(x);
        let g = h.mapv(gelu);
        let logits = self.fc2.forward_vec(g.view());
        let (loss, dlogits) = cross_entropy(logits.view(), label);
        let dg = self.fc2.backward_vec(g.view(), dlogits.view(), &mut grad.fc2);
        let dh = &dg * &h.mapv(gelu_grad);
        self.fc1.backward_vec(x, dh.view(), &mut grad.fc1);
        (loss, logits)
    }
}

/// [macro | micro slot 0 | … | micro slot 6], each token kept contiguous.
pub fn fuse_features(macro_token: ArrayView1<f64>, micro_tokens: ArrayView2<f64>) -> Result<Array1<f64>> {
    let d = macro_token.len();
    if micro_tokens.dim() != (MAX_SLOTS, d) {
        return Err(Error::Shape(format!(
            "micro tokens {:?} do not match [{MAX_SLOTS}, {d}]",
            micro_tokens.shape()
        )));
    }
    let mut out = Array1::zeros((1 + MAX_SLOTS) * d);
    out.slice_mut(s![..d]).assign(&macro_token);
    for (i, row) in micro_tokens.rows().into_iter().enumerate() {
        out.slice_mut(s![(i + 1) * d..(i + 2) * d]).assign(&row);
    }
    Ok(out)
}

/// Inputs of one window for both backbones (patch matrices per slot).
#[derive(Debug, Clone)]
pub struct FusionSample {
    pub macro_slots: Vec<Array2<f64>>,
    pub micro_slots: Vec<Array2<f64>>,
    pub label: usize,
}

pub fn check_backbones(macro_model: &VitModel, micro_model: &VitModel, head: &FusionHead) -> Result<()> {
    let (dm, du) = (macro_model.cfg.embed_dim, micro_model.cfg.embed_dim);
    if dm != du {
        return Err(Error::Shape(format!("macro embed dim {dm} differs from micro embed dim {du}")));
    }
    if micro_model.cfg.head_tokens != MAX_SLOTS || macro_model.cfg.head_tokens != 1 {
        return Err(Error::Shape("expected a 1-slot macro and a 7-slot micro backbone".into()));
    }
    if head.input_dim() != (1 + MAX_SLOTS) * dm {
        return Err(Error::Shape(format!(
            "head takes {} features but backbones give {}",
            head.input_dim(),
            (1 + MAX_SLOTS) * dm
        )));
    }
    Ok(())
}

/// Fused feature vector of one sample from the frozen backbones.
pub fn extract_features(macro_model: &VitModel, micro_model: &VitModel, sample: &FusionSample) -> Result<Array1<f64>> {
    let m = macro_model.forward(&sample.macro_slots)?;
    let u = micro_model.forward(&sample.micro_slots)?;
    fuse_features(m.tokens.row(0), u.tokens.view())
}

/// Trains the head on cached features (one row per sample).
pub fn train_head(
    head: &mut FusionHead,
    features: &[Array1<f64>],
    labels: &[usize],
    params: &TrainParams,
    rng: &mut SeededRng,
) -> Result<Vec<EpochStats>> {
    params.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidParam("need one label per feature row and at least one row".into()));
    }
    let classes = head.fc2.w.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidParam(format!("label {bad} >= {classes} classes")));
    }
    if let Some(f) = features.iter().find(|f| f.len() != head.input_dim()) {
        return Err(Error::Shape(format!("feature of length {} for a head of width {}", f.len(), head.input_dim())));
    }
    let mut opt = Adam::new(head, params.clone());
    let mut grad = head.zeros_like();
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut curve = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in order.chunks(params.batch_size) {
            grad.zero();
            for &i in batch {
                let (loss, logits) = head.accumulate_gradients(features[i].view(), labels[i], &mut grad);
                total += loss;
                correct += usize::from(argmax(logits.view()) == labels[i]);
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.update(head, &grad);
        }
        if !head.all_finite() {
            return Err(Error::NumericalFailure(format!("non-finite head parameters after epoch {epoch}")));
        }
        curve.push(EpochStats {
            epoch,
            loss: total / features.len() as f64,
            train_acc: correct as f64 / features.len() as f64,
        });
    }
    Ok(curve)
}

/// Extracts features once with the frozen backbones, then trains the head.
pub fn train_fusion(
    macro_model: &VitModel,
    micro_model: &VitModel,
    head: &mut FusionHead,
    data: &[FusionSample],
    params: &TrainParams,
    rng: &mut SeededRng,
) -> Result<Vec<EpochStats>> {
    check_backbones(macro_model, micro_model, head)?;
    let features = data
        .iter()
        .map(|s| extract_features(macro_model, micro_model, s))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    train_head(head, &features, &labels, params, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Array1<f64>,
}

impl Prediction {
    pub fn confidence(&self) -> f64 {
        self.probabilities[self.label]
    }
}

pub fn predict_features(head: &FusionHead, features: ArrayView1<f64>) -> Prediction {
    let p = softmax(head.logits(features).view());
    Prediction {
        label: argmax(p.view()),
        probabilities: p,
    }
}

pub fn predict(macro_model: &VitModel, micro_model: &VitModel, head: &FusionHead, sample: &FusionSample) -> Result<Prediction> {
    check_backbones(macro_model, micro_model, head)?;
    let f = extract_features(macro_model, micro_model, sample)?;
    Ok(predict_features(head, f.view()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_fused_vector() {
        let d = 128;
        let mut m = Array1::zeros(d);
        m[0] = 1.0;
        let u = Array2::<f64>::zeros((7, d));
        let f = fuse_features(m.view(), u.view()).unwrap();
        assert_eq!(f.len(), 1024);
        assert!(f.iter().enumerate().all(|(i, &v)| (v != 0.0) == (i == 0)));
        let u = Array2::from_shape_fn((7, 4), |(i, j)| (i * 4 + j) as f64);
        let m = Array1::from(vec![-1.0, -2.0, -3.0, -4.0]);
        let f = fuse_features(m.view(), u.view()).unwrap();
        assert_eq!(f.slice(s![..4]), m);
        for i in 0..7 {
            assert_eq!(f.slice(s![(i + 1) * 4..(i + 2) * 4]), u.row(i));
        }
        assert!(fuse_features(m.view(), Array2::zeros((7, 5)).view()).is_err());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(8);
        let cfg = FusionConfig {
            embed_dim: 2,
            hidden: 5,
            num_classes: 3,
        };
        let mut head = FusionHead::new(&cfg, &mut rng);
        head.fc1.b.fill(0.1);
        let x = crate::nn::gaussian((1, 16), 1.0, &mut rng).row(0).to_owned();
        let mut grad = head.zeros_like();
        head.accumulate_gradients(x.view(), 2, &mut grad);
        let mut analytic = Vec::new();
        grad.visit(&mut |_, a| analytic.extend(a.iter().copied()));
        let n = analytic.len();
        let h = 1e-5;
        for k in 0..n {
            let loss_at = |delta: f64| {
                let mut p = head.clone();
                let mut idx = 0;
                p.visit_mut(&mut |_, mut a| {
                    for v in a.iter_mut() {
                        if idx == k {
                            *v += delta;
                        }
                        idx += 1;
                    }
                });
                cross_entropy(p.logits(x.view()).view(), 2).0
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn zero_lr_leaves_head_unchanged() {
        let mut rng = SeededRng::new(2);
        let cfg = FusionConfig {
            embed_dim: 2,
            hidden: 4,
            num_classes: 2,
        };
        let mut head = FusionHead::new(&cfg, &mut rng);
        let before = head.checksum();
        let feats = vec![Array1::ones(16), Array1::zeros(16)];
        let params = TrainParams {
            lr: 0.0,
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        train_head(&mut head, &feats, &[0, 1], &params, &mut rng).unwrap();
        assert_eq!(head.checksum(), before);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = SeededRng::new(5);
        let cfg = FusionConfig {
            embed_dim: 3,
            hidden: 6,
            num_classes: 4,
        };
        let head = FusionHead::new(&cfg, &mut rng);
        let f = Array1::from_shape_fn(24, |i| (i as f64).sin());
        let p = predict_features(&head, f.view());
        assert!((p.probabilities.sum() - 1.0).abs() < 1e-12);
        assert_eq!(p, predict_features(&head, f.view()));
    }
}
