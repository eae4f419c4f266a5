//! Zero-shot evaluation: existence scores per pathology query, attention
//! heatmaps for grounding, and the latent-alignment divergence between
//! query-embedding similarity and corpus co-occurrence.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::backbone::ImageTensor;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{forward, StreamBundle};
use crate::params::ParamSet;
use crate::report::ExistenceMatrix;
use crate::text::{build_provider, build_query_embeddings, ProjectionParams, QueryEmbeddings};

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Query embeddings implied by a checkpoint's own provider and projection.
pub fn checkpoint_query_embeddings(ckpt: &Checkpoint) -> Result<QueryEmbeddings> {
    let provider = build_provider(&ckpt.config.provider)?;
    if provider.dim() != ckpt.config.model.d_t {
        return Err(Error::Compat(format!(
            "provider width {} does not match the checkpoint's text width {}",
            provider.dim(),
            ckpt.config.model.d_t
        )));
    }
    let weight = ckpt
        .params
        .get("text_projection.weight")
        .ok_or_else(|| Error::Compat("checkpoint lacks the text projection".into()))?;
    let bias = ckpt
        .params
        .get("text_projection.bias")
        .ok_or_else(|| Error::Compat("checkpoint lacks the projection bias".into()))?;
    let proj = ProjectionParams {
        weight: weight
            .view()
            .into_dimensionality()
            .map_err(|_| Error::Compat("text projection weight is not a matrix".into()))?
            .to_owned(),
        bias: bias
            .view()
            .into_dimensionality()
            .map_err(|_| Error::Compat("text projection bias is not a vector".into()))?
            .to_owned(),
    };
    build_query_embeddings(&ckpt.config.query_set, provider.as_ref(), &proj)
}

/// Sigmoid existence scores from the pathology stream, one row per image.
pub fn zero_shot_classify(
    params: &ParamSet,
    cfg: &crate::model::ModelConfig,
    qe: &QueryEmbeddings,
    images: &[ImageTensor],
) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> = images
        .par_iter()
        .map(|img| {
            let bundle = forward(img, qe, params, cfg)?;
            Ok(bundle.z_p.mapv(sigmoid))
        })
        .collect::<Result<_>>()?;
    let m = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::zeros((rows.len(), m));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// Localization output for one (image, pathology query) pair.
#[derive(Debug, Clone)]
pub struct GroundingResult {
    pub heatmap: Array2<f64>,
    /// Peak pixel as (x, y); row-major first on ties.
    pub peak: (usize, usize),
    pub binary_mask: Array2<u8>,
    pub threshold_used: f64,
    /// Constant attention carries no localization signal; the heatmap is
    /// defined to rescale to all zeros and the mask stays empty.
    pub degenerate: bool,
}

/// Bilinear upsample with half-pixel-centered sampling.
fn bilinear_upsample(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let mut out = Array2::zeros((out_h, out_w));
    for dy in 0..out_h {
        let sy = ((dy as f64 + 0.5) * sh as f64 / out_h as f64 - 0.5).clamp(0.0, sh as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f64;
        for dx in 0..out_w {
            let sx =
                ((dx as f64 + 0.5) * sw as f64 / out_w as f64 - 0.5).clamp(0.0, sw as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = sx - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
            let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
            out[[dy, dx]] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Nearest-rank quantile of the heatmap values.
fn quantile(values: &Array2<f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let idx = ((q * (v.len() - 1) as f64).floor() as usize).min(v.len() - 1);
    v[idx]
}

/// Build a grounding result from one attention row over the token grid.
pub fn ground_from_attention(
    attention_row: &Array1<f64>,
    grid_h: usize,
    grid_w: usize,
    out_h: usize,
    out_w: usize,
    threshold_quantile: f64,
) -> Result<GroundingResult> {
    if attention_row.len() != grid_h * grid_w {
        return Err(Error::Shape(format!(
            "attention row has {} entries, grid is {grid_h}x{grid_w}",
            attention_row.len()
        )));
    }
    if !(0.0..=1.0).contains(&threshold_quantile) {
        return Err(Error::Config(format!(
            "threshold quantile {threshold_quantile} outside [0,1]"
        )));
    }
    let grid = Array2::from_shape_vec((grid_h, grid_w), attention_row.to_vec())
        .expect("length checked");
    let up = bilinear_upsample(&grid, out_h, out_w);

    let (min, max) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let degenerate = !(max - min > 1e-12);
    let heatmap = if degenerate {
        Array2::zeros((out_h, out_w))
    } else {
        up.mapv(|v| (v - min) / (max - min))
    };

    let mut peak = (0usize, 0usize);
    if !degenerate {
        let mut best = f64::NEG_INFINITY;
        for ((y, x), &v) in heatmap.indexed_iter() {
            // strict comparison keeps the row-major first tie rule
            if v > best {
                best = v;
                peak = (x, y);
            }
        }
    }

    let (threshold_used, binary_mask) = if degenerate {
        (f64::INFINITY, Array2::zeros((out_h, out_w)))
    } else {
        let t = quantile(&heatmap, threshold_quantile);
        (t, heatmap.mapv(|v| u8::from(v >= t)))
    };
    Ok(GroundingResult { heatmap, peak, binary_mask, threshold_used, degenerate })
}

/// Run the forward pass and localize one pathology query.
pub fn zero_shot_ground(
    params: &ParamSet,
    cfg: &crate::model::ModelConfig,
    qe: &QueryEmbeddings,
    image: &ImageTensor,
    pathology_index: usize,
    threshold_quantile: f64,
) -> Result<GroundingResult> {
    let bundle = forward(image, qe, params, cfg)?;
    ground_for_bundle(&bundle, image, pathology_index, threshold_quantile)
}

/// Localization from an already-computed forward bundle.
pub fn ground_for_bundle(
    bundle: &StreamBundle,
    image: &ImageTensor,
    pathology_index: usize,
    threshold_quantile: f64,
) -> Result<GroundingResult> {
    if pathology_index >= bundle.a_p.nrows() {
        return Err(Error::Input(format!(
            "pathology index {pathology_index} out of range ({} queries)",
            bundle.a_p.nrows()
        )));
    }
    ground_from_attention(
        &bundle.a_p.row(pathology_index).to_owned(),
        bundle.grid_h,
        bundle.grid_w,
        image.h(),
        image.w(),
        threshold_quantile,
    )
}

/// Union of per-study existence matrices.
pub fn global_existence(matrices: &[ExistenceMatrix]) -> Result<Array2<f64>> {
    let Some(first) = matrices.first() else {
        return Err(Error::Input("no studies to aggregate".into()));
    };
    let mut l = Array2::zeros(first.l.dim());
    for em in matrices {
        if em.l.dim() != l.dim() {
            return Err(Error::Shape("existence matrices disagree in shape".into()));
        }
        l.zip_mut_with(&em.l, |a, &b| *a = f64::max(*a, b));
    }
    Ok(l)
}

/// KL divergence between the corpus co-occurrence distribution and the
/// softmax of the query-embedding cosine similarity matrix.
pub fn measure_latent_alignment(qe: &QueryEmbeddings, l_global: &Array2<f64>) -> Result<f64> {
    let (m, n) = (qe.e_p.nrows(), qe.e_a.nrows());
    if l_global.dim() != (m, n) {
        return Err(Error::Shape(format!(
            "co-occurrence matrix is {:?}, queries imply ({m}, {n})",
            l_global.dim()
        )));
    }
    if l_global.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input("co-occurrence entries must be 0 or 1".into()));
    }
    let total: f64 = l_global.sum();
    if total == 0.0 {
        return Err(Error::Input("co-occurrence matrix is all zero".into()));
    }

    let mut s = Array2::zeros((m, n));
    for i in 0..m {
        let p = qe.e_p.row(i);
        let pn = p.dot(&p).sqrt().max(1e-12);
        for j in 0..n {
            let a = qe.e_a.row(j);
            let an = a.dot(&a).sqrt().max(1e-12);
            s[[i, j]] = p.dot(&a) / (pn * an);
        }
    }
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp_sum: f64 = s.iter().map(|&v| (v - max).exp()).sum();

    const EPS: f64 = 1e-12;
    let mut kl = 0.0;
    for (&sv, &lv) in s.iter().zip(l_global.iter()) {
        let q = (sv - max).exp() / exp_sum;
        let p = lv / total;
        kl += p * ((p + EPS) / (q + EPS)).ln();
    }
    Ok(kl)
}

#[cfg(test)]
mod tests;
