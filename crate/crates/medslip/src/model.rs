//! Dual-stream image-text alignment: gated disentanglement of feature
//! tokens, per-stream cross-attention query networks, and shared existence
//! predictors.

use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, FeatureMap, ImageTensor};
use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamVars};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::text::QueryEmbeddings;

pub const STREAM_ANATOMY: &str = "stream_a";
pub const STREAM_PATHOLOGY: &str = "stream_p";

/// Query-network and stream-routing settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualStreamConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub enable_dual_stream: bool,
    pub enable_mask_generator: bool,
}

impl Default for DualStreamConfig {
    fn default() -> Self {
        DualStreamConfig {
            layers: 2,
            heads: 4,
            d: 256,
            enable_dual_stream: true,
            enable_mask_generator: true,
        }
    }
}

/// Full model geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub stream: DualStreamConfig,
    pub d_t: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), stream: DualStreamConfig::default(), d_t: 384 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let s = &self.stream;
        if s.layers == 0 {
            return Err(Error::Config("query network needs at least one layer".into()));
        }
        if s.heads == 0 || s.d % s.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide model width {}",
                s.heads, s.d
            )));
        }
        if s.enable_mask_generator && !s.enable_dual_stream {
            return Err(Error::Config(
                "mask generator requires the dual stream to be enabled".into(),
            ));
        }
        if self.d_t == 0 {
            return Err(Error::Config("text dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn d_v(&self) -> usize {
        self.backbone.d_v
    }

    pub fn d(&self) -> usize {
        self.stream.d
    }
}

fn glorot(r: &mut impl Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(&[rows, cols]), || r.sample::<f64, _>(StandardNormal) * std)
}

/// Create every trainable tensor for the pre-training model.
///
/// Both stream parameter sets always exist so checkpoints keep one layout
/// across ablations; disabled components simply receive no gradient.
pub fn init_model_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let (d_v, d) = (cfg.d_v(), cfg.d());
    let mut params = ParamSet::new();
    backbone::init_backbone_params(&mut params, &cfg.backbone, seed)?;

    let mut r = rng::stream(seed, "model-init-projection", 0);
    params.insert("text_projection.weight", glorot(&mut r, cfg.d_t, d))?;
    params.insert("text_projection.bias", ArrayD::zeros(IxDyn(&[d])))?;

    let mut r = rng::stream(seed, "model-init-gate", 0);
    params.insert("gate.weight", glorot(&mut r, d_v, 2 * d_v))?;
    params.insert("gate.bias", ArrayD::zeros(IxDyn(&[2 * d_v])))?;

    for (si, stream) in [STREAM_ANATOMY, STREAM_PATHOLOGY].iter().enumerate() {
        for l in 0..cfg.stream.layers {
            let mut r = rng::stream(seed, "model-init-attention", (si * 64 + l) as u64);
            let p = format!("{stream}.layer{l}");
            params.insert(&format!("{p}.wq"), glorot(&mut r, d, d))?;
            params.insert(&format!("{p}.bq"), ArrayD::zeros(IxDyn(&[d])))?;
            params.insert(&format!("{p}.wk"), glorot(&mut r, d_v, d))?;
            params.insert(&format!("{p}.bk"), ArrayD::zeros(IxDyn(&[d])))?;
            params.insert(&format!("{p}.wv"), glorot(&mut r, d_v, d))?;
            params.insert(&format!("{p}.bv"), ArrayD::zeros(IxDyn(&[d])))?;
            params.insert(&format!("{p}.wo"), glorot(&mut r, d, d))?;
            params.insert(&format!("{p}.bo"), ArrayD::zeros(IxDyn(&[d])))?;
            params.insert(&format!("{p}.ff_w1"), glorot(&mut r, d, d))?;
            params.insert(&format!("{p}.ff_b1"), ArrayD::zeros(IxDyn(&[d])))?;
            params.insert(&format!("{p}.ff_w2"), glorot(&mut r, d, d))?;
            params.insert(&format!("{p}.ff_b2"), ArrayD::zeros(IxDyn(&[d])))?;
        }
        let mut r = rng::stream(seed, "model-init-predictor", si as u64);
        params.insert(&format!("{stream}.predictor.w1"), glorot(&mut r, d, d))?;
        params.insert(&format!("{stream}.predictor.b1"), ArrayD::zeros(IxDyn(&[d])))?;
        let w2 = ArrayD::from_shape_simple_fn(IxDyn(&[d]), || {
            r.sample::<f64, _>(StandardNormal) * (1.0 / d as f64).sqrt()
        });
        params.insert(&format!("{stream}.predictor.w2"), w2)?;
        params.insert(&format!("{stream}.predictor.b2"), crate::tape::scalar(0.0))?;
    }

    // correlation-logit gain, initialized to the inverse temperature
    params.insert("icl.scale", crate::tape::scalar(1.0 / 0.07))?;
    Ok(params)
}

/// Gated stream inputs.
pub struct GateVars {
    pub f_a: Var,
    pub f_p: Var,
    pub g_a: Option<Var>,
    pub g_p: Option<Var>,
}

/// Split tokens into the two stream inputs.
///
/// With the mask generator on, a per-token linear map plus sigmoid yields
/// gates `G_a, G_p` in (0,1) and `F_x = tokens ⊙ G_x`; with it off both
/// streams receive the tokens unchanged.
pub fn disentangle_on_tape(t: &mut Tape, pv: &ParamVars, tokens: Var, cfg: &ModelConfig) -> GateVars {
    if !cfg.stream.enable_mask_generator {
        return GateVars { f_a: tokens, f_p: tokens, g_a: None, g_p: None };
    }
    let d_v = cfg.d_v();
    let pre = t.matmul(tokens, pv.var("gate.weight"));
    let pre = t.add_row_bias(pre, pv.var("gate.bias"));
    let gates = t.sigmoid(pre);
    let g_a = t.slice_cols(gates, 0, d_v);
    let g_p = t.slice_cols(gates, d_v, d_v);
    let f_a = t.mul(tokens, g_a);
    let f_p = t.mul(tokens, g_p);
    GateVars { f_a, f_p, g_a: Some(g_a), g_p: Some(g_p) }
}

/// Multi-layer multi-head cross-attention from query embeddings onto
/// feature tokens.
///
/// Each layer projects the running queries to Q and the (fixed) tokens to
/// K/V, applies per-head scaled dot-product attention, an output
/// projection with residual, then a residual feed-forward. Returns the
/// final representations and the head-averaged attention of the last layer.
pub fn query_attend_on_tape(
    t: &mut Tape,
    pv: &ParamVars,
    stream: &str,
    f: Var,
    e: Var,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let (heads, d) = (cfg.stream.heads, cfg.d());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut cur = e;
    let mut last_attention = None;
    for l in 0..cfg.stream.layers {
        let p = format!("{stream}.layer{l}");
        let q = t.matmul(cur, pv.var(&format!("{p}.wq")));
        let q = t.add_row_bias(q, pv.var(&format!("{p}.bq")));
        let k = t.matmul(f, pv.var(&format!("{p}.wk")));
        let k = t.add_row_bias(k, pv.var(&format!("{p}.bk")));
        let v = t.matmul(f, pv.var(&format!("{p}.wv")));
        let v = t.add_row_bias(v, pv.var(&format!("{p}.bv")));

        let mut head_outputs = Vec::with_capacity(heads);
        let mut head_attention = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let kt = t.transpose(kh);
            let scores = t.matmul(qh, kt);
            let scores = t.scale(scores, scale);
            let probs = t.softmax_rows(scores);
            head_attention.push(probs);
            head_outputs.push(t.matmul(probs, vh));
        }
        let o = t.concat_cols(&head_outputs);
        let o = t.matmul(o, pv.var(&format!("{p}.wo")));
        let o = t.add_row_bias(o, pv.var(&format!("{p}.bo")));
        let e1 = t.add(cur, o);

        let ff = t.matmul(e1, pv.var(&format!("{p}.ff_w1")));
        let ff = t.add_row_bias(ff, pv.var(&format!("{p}.ff_b1")));
        let ff = t.tanh(ff);
        let ff = t.matmul(ff, pv.var(&format!("{p}.ff_w2")));
        let ff = t.add_row_bias(ff, pv.var(&format!("{p}.ff_b2")));
        cur = t.add(e1, ff);

        let mut avg = head_attention[0];
        for &ha in &head_attention[1..] {
            avg = t.add(avg, ha);
        }
        last_attention = Some(t.scale(avg, 1.0 / heads as f64));
    }
    Ok((cur, last_attention.expect("layers >= 1")))
}

/// Shared two-layer perceptron applied to each representation row,
/// returning one raw logit per query.
pub fn predict_existence_on_tape(t: &mut Tape, pv: &ParamVars, stream: &str, r: Var) -> Var {
    let p = format!("{stream}.predictor");
    let h = t.matmul(r, pv.var(&format!("{p}.w1")));
    let h = t.add_row_bias(h, pv.var(&format!("{p}.b1")));
    let h = t.tanh(h);
    let z = t.matvec(h, pv.var(&format!("{p}.w2")));
    t.add_scalar(z, pv.var(&format!("{p}.b2")))
}

/// Project raw (frozen-provider) query matrices through the learnable
/// linear layer on the tape.
pub fn project_queries_on_tape(
    t: &mut Tape,
    pv: &ParamVars,
    raw_a: &Array2<f64>,
    raw_p: &Array2<f64>,
) -> (Var, Var) {
    let w = pv.var("text_projection.weight");
    let b = pv.var("text_projection.bias");
    let ra = t.constant(raw_a.clone().into_dyn());
    let rp = t.constant(raw_p.clone().into_dyn());
    let ea = t.matmul(ra, w);
    let ea = t.add_row_bias(ea, b);
    let ep = t.matmul(rp, w);
    let ep = t.add_row_bias(ep, b);
    (ea, ep)
}

/// Fixed two-dimensional sinusoidal position code over the token grid.
///
/// Convolutional tokens are translation equivariant, so without a position
/// channel the queries could select only by content, never by place. Rows
/// follow the row-major token order; the first half of the channels encodes
/// the row coordinate, the second half the column, each as interleaved
/// sine/cosine pairs of increasing frequency over the normalized span.
pub fn positional_encoding(h: usize, w: usize, d_v: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((h * w, d_v));
    let half = d_v / 2;
    for y in 0..h {
        for x in 0..w {
            let tok = y * w + x;
            let ny = (y as f64 + 0.5) / h as f64;
            let nx = (x as f64 + 0.5) / w as f64;
            for c in 0..d_v {
                let (coord, i) = if c < half { (ny, c) } else { (nx, c - half) };
                let freq = ((i / 2) + 1) as f64 * std::f64::consts::PI;
                pe[[tok, c]] =
                    if i % 2 == 0 { (freq * coord).sin() } else { (freq * coord).cos() };
            }
        }
    }
    pe
}

/// Tape handles for one image's full forward pass.
pub struct ForwardVars {
    pub tokens: Var,
    pub r_a: Var,
    pub r_p: Var,
    pub a_a: Var,
    pub a_p: Var,
    pub z_a: Var,
    pub z_p: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
}

/// Compose encode, disentangle, per-stream attention, and existence
/// prediction. With the dual stream disabled one parameter set (the anatomy
/// stream's) serves both query sets over ungated tokens.
pub fn forward_on_tape(
    t: &mut Tape,
    pv: &ParamVars,
    img: &ImageTensor,
    e_a: Var,
    e_p: Var,
    cfg: &ModelConfig,
) -> Result<ForwardVars> {
    let enc = backbone::encode_on_tape(t, pv, img, &cfg.backbone)?;
    // gates act on content; the position code is appended afterwards so a
    // suppressed token still keeps its address visible to the attention
    let pe = t.constant(positional_encoding(enc.h, enc.w, cfg.d_v()).into_dyn());
    let (f_a, f_p, stream_for_p) = if cfg.stream.enable_dual_stream {
        let gates = disentangle_on_tape(t, pv, enc.tokens, cfg);
        (t.add(gates.f_a, pe), t.add(gates.f_p, pe), STREAM_PATHOLOGY)
    } else {
        let f = t.add(enc.tokens, pe);
        (f, f, STREAM_ANATOMY)
    };
    let (r_a, a_a) = query_attend_on_tape(t, pv, STREAM_ANATOMY, f_a, e_a, cfg)?;
    let (r_p, a_p) = query_attend_on_tape(t, pv, stream_for_p, f_p, e_p, cfg)?;
    let z_a = predict_existence_on_tape(t, pv, STREAM_ANATOMY, r_a);
    let z_p = predict_existence_on_tape(t, pv, stream_for_p, r_p);
    Ok(ForwardVars {
        tokens: enc.tokens,
        r_a,
        r_p,
        a_a,
        a_p,
        z_a,
        z_p,
        grid_h: enc.h,
        grid_w: enc.w,
        stride: enc.stride,
    })
}

/// Materialized forward outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBundle {
    pub r_a: Array2<f64>,
    pub r_p: Array2<f64>,
    pub a_a: Array2<f64>,
    pub a_p: Array2<f64>,
    pub z_a: Array1<f64>,
    pub z_p: Array1<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
}

impl StreamBundle {
    fn from_tape(t: &Tape, fv: &ForwardVars) -> Self {
        let m2 = |v: Var| t.value(v).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let m1 = |v: Var| t.value(v).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        StreamBundle {
            r_a: m2(fv.r_a),
            r_p: m2(fv.r_p),
            a_a: m2(fv.a_a),
            a_p: m2(fv.a_p),
            z_a: m1(fv.z_a),
            z_p: m1(fv.z_p),
            grid_h: fv.grid_h,
            grid_w: fv.grid_w,
            stride: fv.stride,
        }
    }
}

/// Forward pass with already-projected query embeddings.
pub fn forward(
    img: &ImageTensor,
    qe: &QueryEmbeddings,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<StreamBundle> {
    let mut t = Tape::new();
    let pv = params.register(&mut t);
    let e_a = t.constant(qe.e_a.clone().into_dyn());
    let e_p = t.constant(qe.e_p.clone().into_dyn());
    let fv = forward_on_tape(&mut t, &pv, img, e_a, e_p, cfg)?;
    Ok(StreamBundle::from_tape(&t, &fv))
}

/// Gated stream inputs outside training.
pub fn disentangle(
    fm: &FeatureMap,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if fm.tokens.ncols() != cfg.d_v() {
        return Err(Error::Shape(format!(
            "tokens are {} wide, model expects {}",
            fm.tokens.ncols(),
            cfg.d_v()
        )));
    }
    let mut t = Tape::new();
    let pv = params.register(&mut t);
    let tokens = t.constant(fm.tokens.clone().into_dyn());
    let gates = disentangle_on_tape(&mut t, &pv, tokens, cfg);
    let get = |v: Var| t.value(v).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    Ok((get(gates.f_a), get(gates.f_p)))
}

/// Cross-attention outside training: `(R, A)` for one stream.
pub fn query_attend(
    f: &Array2<f64>,
    e: &Array2<f64>,
    params: &ParamSet,
    stream: &str,
    cfg: &ModelConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut t = Tape::new();
    let pv = params.register(&mut t);
    let fv = t.constant(f.clone().into_dyn());
    let ev = t.constant(e.clone().into_dyn());
    let (r, a) = query_attend_on_tape(&mut t, &pv, stream, fv, ev, cfg)?;
    let get = |v: Var| t.value(v).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    Ok((get(r), get(a)))
}

/// Existence logits outside training.
pub fn predict_existence(r: &Array2<f64>, params: &ParamSet, stream: &str) -> Result<Array1<f64>> {
    let mut t = Tape::new();
    let pv = params.register(&mut t);
    let rv = t.constant(r.clone().into_dyn());
    let z = predict_existence_on_tape(&mut t, &pv, stream, rv);
    Ok(t.value(z).view().into_dimensionality::<Ix1>().unwrap().to_owned())
}
