//! Small convolutional image encoder producing flattened feature tokens,
//! with intermediate maps retained for the segmentation decoder.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamVars};
use crate::rng;
use crate::tape::{Tape, Var};

pub const MIN_SIDE: usize = 32;

/// Stage output channel widths; the last stage lands on the token width.
pub fn stage_channels(d_v: usize) -> [usize; 4] {
    [16, 32, 64, d_v]
}

/// Grayscale or RGB image, values in `[0,1]`, laid out `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Input(format!(
                "image {h}x{w} is below the {MIN_SIDE}px minimum side"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::Input(format!("image must have 1 or 3 channels, got {c}")));
        }
        if pixels.iter().any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("image values must be finite and within [0,1]".into()));
        }
        Ok(ImageTensor { pixels })
    }

    pub fn h(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn w(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    /// Channels-first copy for convolution.
    pub fn to_chw(&self) -> Array3<f64> {
        let (h, w, c) = self.pixels.dim();
        let mut out = Array3::zeros((c, h, w));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[ci, hi, wi]] = self.pixels[[hi, wi, ci]];
                }
            }
        }
        out
    }

    /// Load an 8-bit PNG as grayscale.
    pub fn from_png_gray(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Input(format!("read image {}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = img.dimensions();
        let mut pixels = Array3::zeros((h as usize, w as usize, 1));
        for (x, y, p) in img.enumerate_pixels() {
            pixels[[y as usize, x as usize, 0]] = p.0[0] as f64 / 255.0;
        }
        ImageTensor::new(pixels)
    }
}

/// Flattened tokens plus the spatial geometry they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tokens: Array2<f64>,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub pyramid: Option<Vec<PyramidLevel>>,
}

/// One retained stage output for the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub features: Array3<f64>,
    pub stride: usize,
}

/// Backbone geometry: four conv stages, each `3x3/pad 1` at its own stride.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_v: usize,
    pub in_channels: usize,
    pub stage_strides: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { d_v: 128, in_channels: 1, stage_strides: [2, 2, 2, 2] }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 {
            return Err(Error::Config("backbone d_v must be positive".into()));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config("backbone in_channels must be 1 or 3".into()));
        }
        if self.stage_strides.iter().any(|&s| s == 0 || s > 4) {
            return Err(Error::Config("stage strides must be in 1..=4".into()));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }
}

/// Insert freshly initialized backbone parameters (Glorot normal weights,
/// zero biases).
pub fn init_backbone_params(params: &mut ParamSet, cfg: &BackboneConfig, seed: u64) -> Result<()> {
    let channels = stage_channels(cfg.d_v);
    let mut ic = cfg.in_channels;
    for (i, &oc) in channels.iter().enumerate() {
        let mut r = rng::stream(seed, "backbone-init", i as u64);
        let fan_in = (ic * 9) as f64;
        let fan_out = (oc * 9) as f64;
        let std = (2.0 / (fan_in + fan_out)).sqrt();
        let w = ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[oc, ic, 3, 3]), || {
            r.sample::<f64, _>(StandardNormal) * std
        });
        params.insert(&format!("backbone.stage{i}.weight"), w)?;
        params.insert(&format!("backbone.stage{i}.bias"), ArrayD::zeros(ndarray::IxDyn(&[oc])))?;
        ic = oc;
    }
    Ok(())
}

/// Tape handles for an encoded image.
pub struct EncodedImage {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    /// Stage outputs `(var, cumulative stride)` in forward order.
    pub stages: Vec<(Var, usize)>,
}

/// Run the backbone on the tape: four `conv -> tanh` stages, then flatten
/// the final map into `(H'*W', d_v)` tokens.
pub fn encode_on_tape(
    t: &mut Tape,
    pv: &ParamVars,
    img: &ImageTensor,
    cfg: &BackboneConfig,
) -> Result<EncodedImage> {
    if img.channels() != cfg.in_channels {
        return Err(Error::Shape(format!(
            "backbone expects {} input channels, image has {}",
            cfg.in_channels,
            img.channels()
        )));
    }
    let mut x = t.constant(img.to_chw().into_dyn());
    let mut stages = Vec::with_capacity(4);
    let mut cumulative = 1usize;
    for (i, &stride) in cfg.stage_strides.iter().enumerate() {
        let w = pv.var(&format!("backbone.stage{i}.weight"));
        let b = pv.var(&format!("backbone.stage{i}.bias"));
        let conv = t.conv2d(x, w, b, stride, 1);
        x = t.tanh(conv);
        cumulative *= stride;
        stages.push((x, cumulative));
    }
    let shape = t.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let tokens = t.chw_to_tokens(x);
    Ok(EncodedImage { tokens, h, w, stride: cumulative, stages })
}

/// Encode an image outside any training step.
pub fn encode_image(
    img: &ImageTensor,
    params: &ParamSet,
    cfg: &BackboneConfig,
    want_pyramid: bool,
) -> Result<FeatureMap> {
    let mut t = Tape::new();
    let pv = params.register(&mut t);
    let enc = encode_on_tape(&mut t, &pv, img, cfg)?;
    let tokens = t.value(enc.tokens).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let pyramid = want_pyramid.then(|| {
        enc.stages
            .iter()
            .map(|&(v, stride)| PyramidLevel {
                features: t.value(v).view().into_dimensionality::<Ix3>().unwrap().to_owned(),
                stride,
            })
            .collect()
    });
    Ok(FeatureMap { tokens, h: enc.h, w: enc.w, stride: enc.stride, pyramid })
}

/// Map a flat token index back to its grid cell.
pub fn token_to_cell(index: usize, w: usize) -> (usize, usize) {
    (index / w, index % w)
}
