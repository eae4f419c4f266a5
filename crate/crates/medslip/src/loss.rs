//! Training objectives: prototypical contrastive loss with sampled
//! negatives, inter-stream correlation BCE, existence BCE, and their
//! weighted total.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StreamBundle;
use crate::report::ExistenceMatrix;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::text::QueryEmbeddings;

/// Which contrastive denominator to use.
///
/// `Standard` includes the positive term and divides every score by the
/// temperature. `PaperLiteral` reproduces the published equation exactly:
/// no positive term and no temperature in the denominator, which makes the
/// loss unbounded below; it is kept selectable for fidelity experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtoCLVariant {
    Standard,
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoCLConfig {
    pub tau: f64,
    pub k: usize,
    pub variant: ProtoCLVariant,
    pub rng_seed: u64,
}

impl Default for ProtoCLConfig {
    fn default() -> Self {
        ProtoCLConfig { tau: 0.07, k: 8, variant: ProtoCLVariant::Standard, rng_seed: 0 }
    }
}

impl ProtoCLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::Config("negative count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean of the positive embeddings backing one contrastive term.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Array1<f64>,
    pub support: usize,
}

/// Loss weights `(protocl, icl, exist)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub protocl: f64,
    pub icl: f64,
    pub exist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { protocl: 1.0, icl: 1.0, exist: 1.0 }
    }
}

/// One training step's loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub protocl: f64,
    pub icl: f64,
    pub exist: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn compute_prototype(positives: &[Array1<f64>]) -> Result<Prototype> {
    let Some(first) = positives.first() else {
        return Err(Error::Input("prototype needs at least one positive".into()));
    };
    let d = first.len();
    let mut vector = Array1::zeros(d);
    for p in positives {
        if p.len() != d {
            return Err(Error::Shape(format!(
                "positive dimension {} does not match {d}",
                p.len()
            )));
        }
        vector += p;
    }
    vector /= positives.len() as f64;
    Ok(Prototype { vector, support: positives.len() })
}

/// One contrastive term on the tape. `pool` is the query embedding matrix
/// the positives and negatives index into.
pub fn protocl_term_on_tape(
    t: &mut Tape,
    r: Var,
    pool: Var,
    positive_idx: &[usize],
    negative_idx: &[usize],
    cfg: &ProtoCLConfig,
) -> Var {
    let positives = t.gather_rows(pool, positive_idx);
    let proto = t.mean_rows(positives);
    let sp = t.dot(r, proto);
    let sp_scaled = t.scale(sp, 1.0 / cfg.tau);
    let negs = t.gather_rows(pool, negative_idx);
    let neg_scores = t.matvec(negs, r);
    let denominator = match cfg.variant {
        ProtoCLVariant::Standard => {
            let neg_scaled = t.scale(neg_scores, 1.0 / cfg.tau);
            let all = t.concat_1d(&[sp_scaled, neg_scaled]);
            t.log_sum_exp(all)
        }
        // scores enter the denominator untempered and the positive is absent
        ProtoCLVariant::PaperLiteral => t.log_sum_exp(neg_scores),
    };
    t.sub(denominator, sp_scaled)
}

/// Contrastive loss of one representation against a prototype of its
/// positives and `k` sampled negatives.
pub fn protocl_loss(
    r: &Array1<f64>,
    positives: &[Array1<f64>],
    negatives: &[Array1<f64>],
    cfg: &ProtoCLConfig,
) -> Result<f64> {
    cfg.validate()?;
    if negatives.len() != cfg.k {
        return Err(Error::Input(format!(
            "expected {} negatives, got {}",
            cfg.k,
            negatives.len()
        )));
    }
    let finite = r.iter().all(|v| v.is_finite())
        && positives.iter().chain(negatives).all(|p| p.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Numeric("contrastive loss got a non-finite input".into()));
    }
    let proto = compute_prototype(positives)?;
    if proto.vector.len() != r.len() {
        return Err(Error::Shape("representation and prototype dimensions differ".into()));
    }
    let mut t = Tape::new();
    let mut rows = vec![proto.vector.clone()];
    rows.extend(negatives.iter().cloned());
    let mut pool = Array2::zeros((rows.len(), r.len()));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != r.len() {
            return Err(Error::Shape("negative dimension mismatch".into()));
        }
        pool.row_mut(i).assign(row);
    }
    let pool = t.constant(pool.into_dyn());
    let rv = t.constant(r.clone().into_dyn());
    let neg_idx: Vec<usize> = (1..=negatives.len()).collect();
    let term = protocl_term_on_tape(&mut t, rv, pool, &[0], &neg_idx, cfg);
    Ok(t.scalar_value(term))
}

/// Indices of `k` negatives drawn from the non-positive rows: without
/// replacement when the pool suffices, with replacement otherwise.
pub fn sample_negative_indices(
    rows: usize,
    positive: &BTreeSet<usize>,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..rows).filter(|i| !positive.contains(i)).collect();
    if pool.is_empty() {
        return Err(Error::Sampling("every row is positive, no negatives to draw".into()));
    }
    if pool.len() >= k {
        let mut pool = pool;
        // partial Fisher-Yates: the first k slots become the draw
        for i in 0..k {
            let j = i + rng.gen_range(0..pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    } else {
        Ok((0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
    }
}

/// Row vectors for the drawn negatives.
pub fn sample_negatives(
    qe_rows: &Array2<f64>,
    positive: &BTreeSet<usize>,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Array1<f64>>> {
    let idx = sample_negative_indices(qe_rows.nrows(), positive, k, rng)?;
    Ok(idx.into_iter().map(|i| qe_rows.row(i).to_owned()).collect())
}

/// Both directions of the prototypical loss for one image on the tape.
///
/// Anatomy direction: each anatomy query with at least one positive
/// pathology contrasts its representation against the prototype of those
/// pathology embeddings. Pathology direction is symmetric. Returns `None`
/// when no query contributes.
pub fn protocl_stream_loss_on_tape(
    t: &mut Tape,
    r_a: Var,
    r_p: Var,
    e_a: Var,
    e_p: Var,
    l: &Array2<f64>,
    cfg: &ProtoCLConfig,
    rng: &mut impl Rng,
) -> Result<Option<Var>> {
    cfg.validate()?;
    let (m, n) = l.dim();
    let mut terms = Vec::new();
    // anatomy representations against pathology prototypes
    for j in 0..n {
        let positive: BTreeSet<usize> = (0..m).filter(|&i| l[[i, j]] == 1.0).collect();
        if positive.is_empty() {
            continue;
        }
        let Ok(neg) = sample_negative_indices(m, &positive, cfg.k, rng) else { continue };
        let pos: Vec<usize> = positive.iter().copied().collect();
        let r = t.row(r_a, j);
        terms.push(protocl_term_on_tape(t, r, e_p, &pos, &neg, cfg));
    }
    // pathology representations against anatomy prototypes
    for i in 0..m {
        let positive: BTreeSet<usize> = (0..n).filter(|&j| l[[i, j]] == 1.0).collect();
        if positive.is_empty() {
            continue;
        }
        let Ok(neg) = sample_negative_indices(n, &positive, cfg.k, rng) else { continue };
        let pos: Vec<usize> = positive.iter().copied().collect();
        let r = t.row(r_p, i);
        terms.push(protocl_term_on_tape(t, r, e_a, &pos, &neg, cfg));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let stacked = t.concat_1d(&terms);
    Ok(Some(t.mean(stacked)))
}

/// Mean prototypical loss over both stream directions for one image.
pub fn protocl_stream_loss(
    bundle: &StreamBundle,
    em: &ExistenceMatrix,
    qe: &QueryEmbeddings,
    cfg: &ProtoCLConfig,
) -> Result<f64> {
    let mut t = Tape::new();
    let r_a = t.constant(bundle.r_a.clone().into_dyn());
    let r_p = t.constant(bundle.r_p.clone().into_dyn());
    let e_a = t.constant(qe.e_a.clone().into_dyn());
    let e_p = t.constant(qe.e_p.clone().into_dyn());
    let mut rng = rng::stream(cfg.rng_seed, "protocl-negatives", 0);
    let term =
        protocl_stream_loss_on_tape(&mut t, r_a, r_p, e_a, e_p, &em.l, cfg, &mut rng)?;
    Ok(term.map(|v| t.scalar_value(v)).unwrap_or(0.0))
}

/// Inter-stream correlation loss on the tape: BCE between the scaled
/// cosine-similarity matrix of the two streams' representations and `l`.
pub fn icl_loss_on_tape(
    t: &mut Tape,
    r_p: Var,
    r_a: Var,
    l: &Array2<f64>,
    scale: Var,
) -> Result<Var> {
    let (m, dp) = {
        let v = t.value(r_p);
        let v = v.view().into_dimensionality::<Ix2>().map_err(|_| {
            Error::Shape("pathology representations must be a matrix".into())
        })?;
        v.dim()
    };
    let (n, da) = {
        let v = t.value(r_a);
        let v = v.view().into_dimensionality::<Ix2>().map_err(|_| {
            Error::Shape("anatomy representations must be a matrix".into())
        })?;
        v.dim()
    };
    if dp != da {
        return Err(Error::Shape(format!("stream widths differ: {dp} vs {da}")));
    }
    if l.dim() != (m, n) {
        return Err(Error::Shape(format!(
            "existence matrix is {:?}, representations imply ({m}, {n})",
            l.dim()
        )));
    }
    let np = t.rows_l2_normalize(r_p, 1e-8);
    let na = t.rows_l2_normalize(r_a, 1e-8);
    let nat = t.transpose(na);
    let s = t.matmul(np, nat);
    let logits = t.mul_scalar(s, scale);
    Ok(t.bce_with_logits_mean(logits, &l.clone().into_dyn()))
}

/// Inter-stream correlation loss outside training.
pub fn icl_loss(r_p: &Array2<f64>, r_a: &Array2<f64>, l: &Array2<f64>, scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("cosine scale must be positive, got {scale}")));
    }
    let mut t = Tape::new();
    let rp = t.constant(r_p.clone().into_dyn());
    let ra = t.constant(r_a.clone().into_dyn());
    let sc = t.constant(crate::tape::scalar(scale));
    let loss = icl_loss_on_tape(&mut t, rp, ra, l, sc)?;
    Ok(t.scalar_value(loss))
}

/// Existence BCE on the tape.
pub fn exist_loss_on_tape(t: &mut Tape, logits: Var, y: &Array1<f64>) -> Result<Var> {
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input("existence labels must be 0 or 1".into()));
    }
    let len = t.value(logits).len();
    if len != y.len() {
        return Err(Error::Shape(format!("{len} logits against {} labels", y.len())));
    }
    Ok(t.bce_with_logits_mean(logits, &y.clone().into_dyn()))
}

/// Mean stable BCE of existence logits against binary labels.
pub fn exist_loss(logits: &Array1<f64>, y: &Array1<f64>) -> Result<f64> {
    let mut t = Tape::new();
    let z = t.constant(logits.clone().into_dyn());
    let loss = exist_loss_on_tape(&mut t, z, y)?;
    Ok(t.scalar_value(loss))
}

/// Weighted combination with the invariant `total = w·(terms)`.
pub fn total_loss(protocl: f64, icl: f64, exist: f64, weights: LossWeights) -> Result<LossReport> {
    if weights.protocl < 0.0 || weights.icl < 0.0 || weights.exist < 0.0 {
        return Err(Error::Config("loss weights must be nonnegative".into()));
    }
    let mut total = 0.0;
    for (name, w, v) in [
        ("protocl", weights.protocl, protocl),
        ("icl", weights.icl, icl),
        ("exist", weights.exist, exist),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
        let term = w * v;
        if !term.is_finite() {
            return Err(Error::Numeric(format!("{name} term is {term} after weighting")));
        }
        total += term;
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("combined loss is {total}")));
    }
    Ok(LossReport { protocl, icl, exist, total, weights })
}

#[cfg(test)]
mod tests;
