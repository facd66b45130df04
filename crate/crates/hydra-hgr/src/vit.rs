//! Vision transformer with exact reverse-mode gradients.
//!
//! Image [C, H, W] → N = (H/pH)(W/pW) flattened patches → Z₀ = [x_cls; P E] + E_pos
//! → pre-LN encoder blocks
//!
//! ```text
//! Z' = MSA(LN(Z)) + Z
//! Z'' = FF(LN(Z')) + Z'
//! ```
//!
//! → the class-token row of the last block feeds a linear head. A model may
//! consume several images with shared weights (`head_tokens`), in which case
//! the head sees their class tokens concatenated.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{
    argmax, cross_entropy, gaussian, gelu, gelu_grad, softmax, softmax_rows, Adam, LayerNorm, LnCache, Linear,
    Parameterized, TrainParams,
};
use crate::tensor_io::SeededRng;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub in_channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    /// Images per sample sharing the backbone; the head input is
    /// `head_tokens · embed_dim`.
    pub head_tokens: usize,
    /// Scale attention logits by 1/√(d/heads) rather than 1/√d.
    pub per_head_scaling: bool,
}

impl VitConfig {
    /// Raw-signal path: 8 grid rows as channels of a 512×16 image, 8×16
    /// patches (64 temporal patches).
    pub fn macro_path(num_classes: usize) -> Self {
        Self {
            image_h: 512,
            image_w: 16,
            in_channels: 8,
            patch_h: 8,
            patch_w: 16,
            embed_dim: 128,
            num_heads: 8,
            num_layers: 2,
            mlp_hidden: 512,
            num_classes,
            head_tokens: 1,
            per_head_scaling: true,
        }
    }

    /// MUAP-image path: one 8×16 image per slot, two 8×8 spatial patches,
    /// seven slots.
    pub fn micro_path(num_classes: usize) -> Self {
        Self {
            image_h: 8,
            image_w: 16,
            in_channels: 1,
            patch_h: 8,
            patch_w: 8,
            head_tokens: 7,
            ..Self::macro_path(num_classes)
        }
    }

    pub fn with_dims(mut self, embed_dim: usize, num_heads: usize, num_layers: usize, mlp_hidden: usize) -> Self {
        self.embed_dim = embed_dim;
        self.num_heads = num_heads;
        self.num_layers = num_layers;
        self.mlp_hidden = mlp_hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.patch_h == 0 || self.patch_w == 0 || !self.image_h.is_multiple_of(self.patch_h) || !self.image_w.is_multiple_of(self.patch_w) {
            return bad(format!(
                "image {}×{} not divisible into {}×{} patches",
                self.image_h, self.image_w, self.patch_h, self.patch_w
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.head_tokens == 0 || self.mlp_hidden == 0 {
            return bad("channels, classes, head tokens and MLP width must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_h) * (self.image_w / self.patch_w)
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.patch_h * self.patch_w
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn attention_scale(&self) -> f64 {
        let d = if self.per_head_scaling { self.head_dim() } else { self.embed_dim };
        1.0 / (d as f64).sqrt()
    }
}

/// Flattens [C, H, W] into patch rows, patches enumerated left-to-right then
/// top-to-bottom, each flattened in (channel, row, col) order.
pub fn patchify(input: ArrayView3<f64>, cfg: &VitConfig) -> Result<Array2<f64>> {
    if input.dim() != (cfg.in_channels, cfg.image_h, cfg.image_w) {
        return Err(Error::Shape(format!(
            "input {:?} does not match [{}, {}, {}]",
            input.shape(),
            cfg.in_channels,
            cfg.image_h,
            cfg.image_w
        )));
    }
    let (ph, pw) = (cfg.patch_h, cfg.patch_w);
    let per_row = cfg.image_w / pw;
    Ok(Array2::from_shape_fn((cfg.num_patches(), cfg.patch_len()), |(p, k)| {
        let (pr, pc) = (p / per_row, p % per_row);
        let c = k / (ph * pw);
        let (i, j) = ((k % (ph * pw)) / pw, k % pw);
        input[[c, pr * ph + i, pc * pw + j]]
    }))
}

/// Softmax(Q Kᵀ · scale) V, returning the output and the attention weights.
pub fn scaled_dot_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    scale: f64,
) -> (Array2<f64>, Array2<f64>) {
    let p = softmax_rows((q.dot(&k.t()) * scale).view());
    (p.dot(&v), p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    h: Array2<f64>,
    g: Array2<f64>,
}

impl EncoderLayer {
    fn init(cfg: &VitConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.embed_dim;
        Self {
            ln1: LayerNorm::new(d),
            q: Linear::init(d, d, INIT_STD, rng),
            k: Linear::init(d, d, INIT_STD, rng),
            v: Linear::init(d, d, INIT_STD, rng),
            o: Linear::init(d, d, INIT_STD, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::init(d, cfg.mlp_hidden, INIT_STD, rng),
            fc2: Linear::init(cfg.mlp_hidden, d, INIT_STD, rng),
        }
    }

    fn zeros(cfg: &VitConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            ln1: LayerNorm::zeros(d),
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            fc1: Linear::zeros(d, cfg.mlp_hidden),
            fc2: Linear::zeros(cfg.mlp_hidden, d),
        }
    }

    /// Multi-head self-attention sub-block with residual: MSA(LN(Z)) + Z.
    pub fn msa(&self, z: ArrayView2<f64>, cfg: &VitConfig) -> Array2<f64> {
        self.msa_cached(z, cfg).0
    }

    fn msa_cached(&self, z: ArrayView2<f64>, cfg: &VitConfig) -> (Array2<f64>, LnCache, Array2<f64>, [Array2<f64>; 3], Vec<Array2<f64>>, Array2<f64>) {
        let (a, ln1) = self.ln1.forward(z);
        let q = self.q.forward(a.view());
        let k = self.k.forward(a.view());
        let v = self.v.forward(a.view());
        let dh = cfg.head_dim();
        let scale = cfg.attention_scale();
        let mut o = Array2::zeros(z.raw_dim());
        let mut attn = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (oh, p) = scaled_dot_attention(q.slice(cols), k.slice(cols), v.slice(cols), scale);
            o.slice_mut(cols).assign(&oh);
            attn.push(p);
        }
        let out = &z + &self.o.forward(o.view());
        (out, ln1, a, [q, k, v], attn, o)
    }

    /// Full encoder block: Z' = MSA(LN(Z)) + Z, then FF(LN(Z')) + Z'.
    pub fn encoder_block(&self, z: ArrayView2<f64>, cfg: &VitConfig) -> Array2<f64> {
        self.forward(z, cfg).0
    }

    fn forward(&self, z: ArrayView2<f64>, cfg: &VitConfig) -> (Array2<f64>, LayerCache) {
        let (z1, ln1, a, [q, k, v], attn, o) = self.msa_cached(z, cfg);
        let (b, ln2) = self.ln2.forward(z1.view());
        let h = self.fc1.forward(b.view());
        let g = h.mapv(gelu);
        let out = &z1 + &self.fc2.forward(g.view());
        (
            out,
            LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                attn,
                o,
                ln2,
                b,
                h,
                g,
            },
        )
    }

    fn backward(&self, c: &LayerCache, dout: ArrayView2<f64>, cfg: &VitConfig, grad: &mut EncoderLayer) -> Array2<f64> {
        // Feed-forward branch.
        let dg = self.fc2.backward(c.g.view(), dout, &mut grad.fc2);
        let dh = &dg * &c.h.mapv(gelu_grad);
        let db = self.fc1.backward(c.b.view(), dh.view(), &mut grad.fc1);
        let dz1 = &dout + &self.ln2.backward(&c.ln2, db.view(), &mut grad.ln2);

        // Attention branch.
        let d_o = self.o.backward(c.o.view(), dz1.view(), &mut grad.o);
        let dhd = cfg.head_dim();
        let scale = cfg.attention_scale();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, p) in c.attn.iter().enumerate() {
            let cols = s![.., h * dhd..(h + 1) * dhd];
            let doh = d_o.slice(cols);
            let dp = doh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let mut ds = p * &dp;
            for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let dot = row.sum();
                row.zip_mut_with(&prow, |r, &pv| *r -= pv * dot);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut da = self.q.backward(c.a.view(), dq.view(), &mut grad.q);
        da += &self.k.backward(c.a.view(), dk.view(), &mut grad.k);
        da += &self.v.backward(c.a.view(), dv.view(), &mut grad.v);
        &dz1 + &self.ln1.backward(&c.ln1, da.view(), &mut grad.ln1)
    }

    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        self.ln1.visit(&format!("{p}.ln1"), f);
        self.q.visit(&format!("{p}.q"), f);
        self.k.visit(&format!("{p}.k"), f);
        self.v.visit(&format!("{p}.v"), f);
        self.o.visit(&format!("{p}.o"), f);
        self.ln2.visit(&format!("{p}.ln2"), f);
        self.fc1.visit(&format!("{p}.fc1"), f);
        self.fc2.visit(&format!("{p}.fc2"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        self.ln1.visit_mut(&format!("{p}.ln1"), f);
        self.q.visit_mut(&format!("{p}.q"), f);
        self.k.visit_mut(&format!("{p}.k"), f);
        self.v.visit_mut(&format!("{p}.v"), f);
        self.o.visit_mut(&format!("{p}.o"), f);
        self.ln2.visit_mut(&format!("{p}.ln2"), f);
        self.fc1.visit_mut(&format!("{p}.fc1"), f);
        self.fc2.visit_mut(&format!("{p}.fc2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub cfg: VitConfig,
    /// [patch_len, d] patch embedding.
    pub e: Array2<f64>,
    /// [d] class token.
    pub cls: Array1<f64>,
    /// [N + 1, d] positional embeddings.
    pub pos: Array2<f64>,
    pub layers: Vec<EncoderLayer>,
    /// [head_tokens · d → classes].
    pub head: Linear,
}

impl Parameterized for VitModel {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        f("embed", self.e.view().into_dyn());
        f("cls", self.cls.view().into_dyn());
        f("pos", self.pos.view().into_dyn());
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layer{i}"), f);
        }
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        f("embed", self.e.view_mut().into_dyn());
        f("cls", self.cls.view_mut().into_dyn());
        f("pos", self.pos.view_mut().into_dyn());
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layer{i}"), f);
        }
        self.head.visit_mut("head", f);
    }
}

/// Class tokens of every input image and the head logits.
#[derive(Debug, Clone, PartialEq)]
pub struct VitOutput {
    /// [head_tokens, d]
    pub tokens: Array2<f64>,
    pub logits: Array1<f64>,
}

/// Training sample: one patch matrix per image slot.
#[derive(Debug, Clone)]
pub struct Sample {
    pub slots: Vec<Array2<f64>>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

struct EncodeCache {
    layers: Vec<LayerCache>,
}

impl VitModel {
    /// Gaussian(0, 0.02) projections and positions, zero biases and class
    /// token, unit LayerNorm scales.
    pub fn new(cfg: VitConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let e = gaussian((cfg.patch_len(), d), INIT_STD, rng);
        let pos = gaussian((cfg.num_patches() + 1, d), INIT_STD, rng);
        let layers = (0..cfg.num_layers).map(|_| EncoderLayer::init(&cfg, rng)).collect();
        let head = Linear::init(cfg.head_tokens * d, cfg.num_classes, INIT_STD, rng);
        Ok(Self {
            e,
            cls: Array1::zeros(d),
            pos,
            layers,
            head,
            cfg,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let cfg = &self.cfg;
        let d = cfg.embed_dim;
        Self {
            e: Array2::zeros(self.e.raw_dim()),
            cls: Array1::zeros(d),
            pos: Array2::zeros(self.pos.raw_dim()),
            layers: (0..cfg.num_layers).map(|_| EncoderLayer::zeros(cfg)).collect(),
            head: Linear::zeros(cfg.head_tokens * d, cfg.num_classes),
            cfg: cfg.clone(),
        }
    }

    /// Z₀ = [x_cls; P E] + E_pos.
    pub fn patchify_embed(&self, patches: ArrayView2<f64>) -> Result<Array2<f64>> {
        let cfg = &self.cfg;
        if patches.dim() != (cfg.num_patches(), cfg.patch_len()) {
            return Err(Error::Shape(format!(
                "patch matrix {:?} does not match [{}, {}]",
                patches.shape(),
                cfg.num_patches(),
                cfg.patch_len()
            )));
        }
        let mut z = Array2::zeros((cfg.num_patches() + 1, cfg.embed_dim));
        z.row_mut(0).assign(&self.cls);
        z.slice_mut(s![1.., ..]).assign(&patches.dot(&self.e));
        z += &self.pos;
        Ok(z)
    }

    /// Runs the encoder on an embedded sequence.
    pub fn encode_embedded(&self, z0: Array2<f64>) -> Result<Array2<f64>> {
        let mut z = z0;
        for (i, layer) in self.layers.iter().enumerate() {
            z = layer.encoder_block(z.view(), &self.cfg);
            check_finite(&z, i)?;
        }
        Ok(z)
    }

    fn encode(&self, patches: ArrayView2<f64>) -> Result<(Array1<f64>, EncodeCache)> {
        let mut z = self.patchify_embed(patches)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, c) = layer.forward(z.view(), &self.cfg);
            check_finite(&out, i)?;
            caches.push(c);
            z = out;
        }
        Ok((z.row(0).to_owned(), EncodeCache { layers: caches }))
    }

    /// Class-token output of one image.
    pub fn class_token(&self, patches: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.encode(patches)?.0)
    }

    pub fn forward(&self, slots: &[Array2<f64>]) -> Result<VitOutput> {
        self.check_slots(slots)?;
        let d = self.cfg.embed_dim;
        let mut tokens = Array2::zeros((slots.len(), d));
        for (i, p) in slots.iter().enumerate() {
            tokens.row_mut(i).assign(&self.class_token(p.view())?);
        }
        let flat = tokens.iter().copied().collect::<Array1<f64>>();
        let logits = self.head.forward_vec(flat.view());
        Ok(VitOutput { tokens, logits })
    }

    pub fn predict_proba(&self, slots: &[Array2<f64>]) -> Result<Array1<f64>> {
        Ok(softmax(self.forward(slots)?.logits.view()))
    }

    /// Attention weights of every layer and head for one image.
    pub fn attention_maps(&self, patches: ArrayView2<f64>) -> Result<Vec<Vec<Array2<f64>>>> {
        let (_, cache) = self.encode(patches)?;
        Ok(cache.layers.into_iter().map(|c| c.attn).collect())
    }

    fn check_slots(&self, slots: &[Array2<f64>]) -> Result<()> {
        if slots.len() != self.cfg.head_tokens {
            return Err(Error::Shape(format!(
                "model takes {} images per sample, got {}",
                self.cfg.head_tokens,
                slots.len()
            )));
        }
        Ok(())
    }

    /// Cross-entropy loss and logits; parameter gradients are added to `grad`.
    pub fn accumulate_gradients(&self, slots: &[Array2<f64>], label: usize, grad: &mut VitModel) -> Result<(f64, Array1<f64>)> {
        self.check_slots(slots)?;
        if label >= self.cfg.num_classes {
            return Err(Error::InvalidParam(format!("label {label} >= {} classes", self.cfg.num_classes)));
        }
        let d = self.cfg.embed_dim;
        let mut flat = Array1::zeros(slots.len() * d);
        let mut caches = Vec::with_capacity(slots.len());
        for (i, p) in slots.iter().enumerate() {
            let (tok, cache) = self.encode(p.view())?;
            flat.slice_mut(s![i * d..(i + 1) * d]).assign(&tok);
            caches.push(cache);
        }
        let logits = self.head.forward_vec(flat.view());
        let (loss, dlogits) = cross_entropy(logits.view(), label);
        let dflat = self.head.backward_vec(flat.view(), dlogits.view(), &mut grad.head);
        for (i, (p, cache)) in slots.iter().zip(&caches).enumerate() {
            let mut dz = Array2::zeros((self.cfg.num_patches() + 1, d));
            dz.row_mut(0).assign(&dflat.slice(s![i * d..(i + 1) * d]));
            for (l, c) in self.layers.iter().zip(&mut grad.layers).zip(&cache.layers).rev() {
                let (layer, g) = l;
                dz = layer.backward(c, dz.view(), &self.cfg, g);
            }
            grad.pos += &dz;
            grad.cls += &dz.row(0);
            grad.e += &p.t().dot(&dz.slice(s![1.., ..]));
        }
        Ok((loss, logits))
    }

    /// Loss and exact gradients for one sample.
    pub fn backward(&self, slots: &[Array2<f64>], label: usize) -> Result<(f64, VitModel)> {
        let mut grad = self.zeros_like();
        let (loss, _) = self.accumulate_gradients(slots, label, &mut grad)?;
        Ok((loss, grad))
    }
}

fn check_finite(z: &Array2<f64>, layer: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure(format!("non-finite activation in encoder layer {layer}")))
    }
}

/// Shared-weight forward over the slots of a (normalized) [7, 8, 16] MUAP
/// stack.
pub fn micro_forward(model: &VitModel, stack: ArrayView3<f64>) -> Result<VitOutput> {
    model.forward(&micro_slots(stack, &model.cfg)?)
}

/// Patch matrices of every slot of a [slots, H, W] single-channel stack.
pub fn micro_slots(stack: ArrayView3<f64>, cfg: &VitConfig) -> Result<Vec<Array2<f64>>> {
    stack
        .axis_iter(Axis(0))
        .map(|img| patchify(img.insert_axis(Axis(0)), cfg))
        .collect()
}

/// Mini-batch Adam training with seeded shuffling. Returns per-epoch mean
/// loss and training accuracy measured on the forward passes of that epoch.
pub fn train(model: &mut VitModel, data: &[Sample], params: &TrainParams, rng: &mut SeededRng) -> Result<Vec<EpochStats>> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidParam("empty training set".into()));
    }
    let mut opt = Adam::new(model, params.clone());
    let mut grad = model.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in order.chunks(params.batch_size) {
            grad.zero();
            for &i in batch {
                let (loss, logits) = model.accumulate_gradients(&data[i].slots, data[i].label, &mut grad)?;
                total += loss;
                correct += usize::from(argmax(logits.view()) == data[i].label);
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.update(model, &grad);
            if !model.all_finite() {
                return Err(Error::NumericalFailure(format!("non-finite parameters after epoch {epoch}")));
            }
        }
        curve.push(EpochStats {
            epoch,
            loss: total / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
        });
    }
    Ok(curve)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(model: &VitModel, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidParam("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for s in data {
        correct += usize::from(argmax(model.forward(&s.slots)?.logits.view()) == s.label);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Class-token features of one sample, flattened in slot order.
pub fn token_features(model: &VitModel, slots: &[Array2<f64>]) -> Result<Array1<f64>> {
    let out = model.forward(slots)?;
    Ok(out.tokens.iter().copied().collect())
}
