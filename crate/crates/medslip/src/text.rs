//! Text embeddings for query texts: a pluggable frozen provider followed by
//! a learnable linear projection.
//!
//! The default provider is a deterministic hash encoder so the whole
//! pipeline stays hermetic; precomputed embeddings from a real frozen
//! language model can be swapped in through the `external` provider.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::QuerySet;
use crate::rng;

/// Frozen-encoder output for one text.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTextEmbedding {
    pub vector: Array1<f64>,
    pub provider_id: String,
}

/// Learnable projection from provider space (d_t) to model space (d).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ProjectionParams {
    pub fn d_t(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d(&self) -> usize {
        self.weight.ncols()
    }
}

/// Projected query embeddings, rows aligned with the query set.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbeddings {
    pub e_a: Array2<f64>,
    pub e_p: Array2<f64>,
}

/// Provider selection, serialized into checkpoints so evaluation rebuilds
/// the exact same text path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub provider: String,
    pub seed: u64,
    pub d_t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings_path: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig { provider: "hash-fallback".into(), seed: 0, d_t: 384, embeddings_path: None }
    }
}

pub trait TextProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<RawTextEmbedding>;
    fn dim(&self) -> usize;
    fn id(&self) -> &str;
}

/// Bag-of-tokens hashed into `d_t` buckets, mixed by a fixed seeded Gaussian
/// matrix, then unit-normalized.
pub struct HashFallbackProvider {
    d_t: usize,
    mixer: Array2<f64>,
    id: String,
}

impl HashFallbackProvider {
    pub fn new(seed: u64, d_t: usize) -> Result<Self> {
        if d_t == 0 {
            return Err(Error::Config("hash-fallback d_t must be positive".into()));
        }
        let mut r = rng::stream(seed, "text-fallback-mixer", 0);
        let scale = 1.0 / (d_t as f64).sqrt();
        let mixer =
            Array2::from_shape_simple_fn((d_t, d_t), || r.sample::<f64, _>(StandardNormal) * scale);
        Ok(HashFallbackProvider { d_t, mixer, id: format!("hash-fallback-{seed}-{d_t}") })
    }
}

impl TextProvider for HashFallbackProvider {
    fn embed(&self, text: &str) -> Result<RawTextEmbedding> {
        let mut counts = Array1::zeros(self.d_t);
        let mut tokens = 0usize;
        for tok in text.split_whitespace() {
            let bucket = (rng::fnv1a(tok.as_bytes()) % self.d_t as u64) as usize;
            counts[bucket] += 1.0;
            tokens += 1;
        }
        if tokens == 0 {
            return Err(Error::Input(format!("cannot embed text without tokens: {text:?}")));
        }
        let mut v = self.mixer.dot(&counts);
        let norm = v.dot(&v).sqrt();
        v.mapv_inplace(|x| x / norm);
        Ok(RawTextEmbedding { vector: v, provider_id: self.id.clone() })
    }

    fn dim(&self) -> usize {
        self.d_t
    }

    fn id(&self) -> &str {
        &self.id
    }
}

/// Precomputed embeddings: little-endian f32 rows plus a JSON sidecar
/// listing the texts in row order.
pub struct ExternalProvider {
    vectors: BTreeMap<String, Array1<f64>>,
    d_t: usize,
    id: String,
}

#[derive(Deserialize)]
struct Sidecar {
    d_t: usize,
    texts: Vec<String>,
}

impl ExternalProvider {
    /// `path` names the binary matrix; the sidecar sits at `path + ".json"`.
    pub fn load(path: &Path) -> Result<Self> {
        let sidecar_path = PathBuf::from(format!("{}.json", path.display()));
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
            .map_err(|e| Error::Input(format!("sidecar {}: {e}", sidecar_path.display())))?;
        let bytes = std::fs::read(path)?;
        let expect = sidecar.texts.len() * sidecar.d_t * 4;
        if bytes.len() != expect {
            return Err(Error::Compat(format!(
                "embedding file {} holds {} bytes, sidecar implies {expect}",
                path.display(),
                bytes.len()
            )));
        }
        let mut vectors = BTreeMap::new();
        for (i, text) in sidecar.texts.iter().enumerate() {
            let start = i * sidecar.d_t * 4;
            let row: Array1<f64> = (0..sidecar.d_t)
                .map(|j| {
                    let o = start + j * 4;
                    f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64
                })
                .collect();
            vectors.insert(text.clone(), row);
        }
        Ok(ExternalProvider {
            vectors,
            d_t: sidecar.d_t,
            id: format!("external-{}", path.display()),
        })
    }
}

impl TextProvider for ExternalProvider {
    fn embed(&self, text: &str) -> Result<RawTextEmbedding> {
        let vector = self
            .vectors
            .get(text)
            .ok_or_else(|| Error::Input(format!("external provider has no embedding for {text:?}")))?
            .clone();
        Ok(RawTextEmbedding { vector, provider_id: self.id.clone() })
    }

    fn dim(&self) -> usize {
        self.d_t
    }

    fn id(&self) -> &str {
        &self.id
    }
}

pub fn build_provider(config: &ProviderConfig) -> Result<Box<dyn TextProvider>> {
    match config.provider.as_str() {
        "hash-fallback" => Ok(Box::new(HashFallbackProvider::new(config.seed, config.d_t)?)),
        "external" => {
            let path = config
                .embeddings_path
                .as_ref()
                .ok_or_else(|| Error::Config("external provider needs embeddings_path".into()))?;
            Ok(Box::new(ExternalProvider::load(path)?))
        }
        other => Err(Error::Config(format!("unknown text provider {other:?}"))),
    }
}

/// `weight^T . vector + bias`.
pub fn project(raw: &RawTextEmbedding, params: &ProjectionParams) -> Result<Array1<f64>> {
    if raw.vector.len() != params.d_t() {
        return Err(Error::Shape(format!(
            "projection expects d_t={}, embedding has {}",
            params.d_t(),
            raw.vector.len()
        )));
    }
    Ok(params.weight.t().dot(&raw.vector) + &params.bias)
}

/// Embed and project every query text, rows in query-set order.
pub fn build_query_embeddings(
    qs: &QuerySet,
    provider: &dyn TextProvider,
    params: &ProjectionParams,
) -> Result<QueryEmbeddings> {
    let d = params.d();
    let mut e_a = Array2::zeros((qs.n(), d));
    for (j, text) in qs.prompted_anatomy_texts.iter().enumerate() {
        e_a.row_mut(j).assign(&project(&provider.embed(text)?, params)?);
    }
    let mut e_p = Array2::zeros((qs.m(), d));
    for (i, text) in qs.enhanced_pathology_texts.iter().enumerate() {
        e_p.row_mut(i).assign(&project(&provider.embed(text)?, params)?);
    }
    Ok(QueryEmbeddings { e_a, e_p })
}

/// Raw (pre-projection) embeddings for every query text, one matrix per
/// stream, rows in query-set order. The training tape projects these itself
/// so projection gradients flow.
pub fn raw_query_matrices(
    qs: &QuerySet,
    provider: &dyn TextProvider,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let d_t = provider.dim();
    let mut raw_a = Array2::zeros((qs.n(), d_t));
    for (j, text) in qs.prompted_anatomy_texts.iter().enumerate() {
        raw_a.row_mut(j).assign(&provider.embed(text)?.vector);
    }
    let mut raw_p = Array2::zeros((qs.m(), d_t));
    for (i, text) in qs.enhanced_pathology_texts.iter().enumerate() {
        raw_p.row_mut(i).assign(&provider.embed(text)?.vector);
    }
    Ok((raw_a, raw_p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::KnowledgeTable;
    use crate::tape::fd::{fd_grad, max_rel_err, FD_STEP};
    use crate::tape::Tape;
    use rand::SeedableRng;

    fn provider() -> HashFallbackProvider {
        HashFallbackProvider::new(0, 64).unwrap()
    }

    #[test]
    fn same_text_embeds_identically() {
        let p = provider();
        let a = p.embed("opacity at left lung").unwrap();
        let b = p.embed("opacity at left lung").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_texts_embed_differently() {
        let p = provider();
        let a = p.embed("it is located at left lung").unwrap();
        let b = p.embed("it is located at right lung").unwrap();
        assert_ne!(a.vector, b.vector);
    }

    #[test]
    fn fallback_embedding_is_unit_norm() {
        let p = provider();
        for text in ["effusion", "no opacity at ribs", "collapse lung refers to pneumothorax"] {
            let v = p.embed(text).unwrap().vector;
            assert!((v.dot(&v).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn blank_text_is_rejected() {
        assert!(provider().embed("   ").is_err());
    }

    #[test]
    fn identity_projection_passes_through() {
        let params = ProjectionParams { weight: Array2::eye(3), bias: Array1::zeros(3) };
        let raw = RawTextEmbedding {
            vector: ndarray::array![0.1, -0.5, 2.0],
            provider_id: "t".into(),
        };
        assert_eq!(project(&raw, &params).unwrap(), raw.vector);
    }

    #[test]
    fn zero_weight_returns_bias() {
        let params =
            ProjectionParams { weight: Array2::zeros((3, 2)), bias: ndarray::array![5.0, -1.0] };
        let raw =
            RawTextEmbedding { vector: ndarray::array![1.0, 2.0, 3.0], provider_id: "t".into() };
        assert_eq!(project(&raw, &params).unwrap(), params.bias);
    }

    #[test]
    fn projection_matches_naive_loop() {
        let weight = ndarray::array![[0.5, -1.0], [2.0, 0.25], [-0.75, 3.0]];
        let bias = ndarray::array![0.1, -0.2];
        let v = ndarray::array![1.5, -2.0, 0.5];
        let raw = RawTextEmbedding { vector: v.clone(), provider_id: "t".into() };
        let got = project(&raw, &ProjectionParams { weight: weight.clone(), bias: bias.clone() })
            .unwrap();
        for j in 0..2 {
            let mut acc = bias[j];
            for i in 0..3 {
                acc += weight[[i, j]] * v[i];
            }
            assert!((got[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let params = ProjectionParams { weight: Array2::zeros((4, 2)), bias: Array1::zeros(2) };
        let raw =
            RawTextEmbedding { vector: ndarray::array![1.0, 2.0, 3.0], provider_id: "t".into() };
        assert!(matches!(project(&raw, &params), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_is_linear() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let weight = Array2::from_shape_simple_fn((5, 3), || r.gen_range(-1.0..1.0));
        let bias = Array1::from_shape_simple_fn(3, || r.gen_range(-1.0..1.0));
        let params = ProjectionParams { weight, bias: bias.clone() };
        let x = Array1::from_shape_simple_fn(5, || r.gen_range(-1.0..1.0));
        let y = Array1::from_shape_simple_fn(5, || r.gen_range(-1.0..1.0));
        let (alpha, beta) = (0.7, -1.3);
        let emb = |v: Array1<f64>| RawTextEmbedding { vector: v, provider_id: "t".into() };
        let lhs = project(&emb(&x * alpha + &y * beta), &params).unwrap();
        let rhs = project(&emb(x), &params).unwrap() * alpha
            + project(&emb(y), &params).unwrap() * beta
            - bias * (alpha + beta - 1.0);
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let raw = Array2::from_shape_simple_fn((3, 5), || r.gen_range(-1.0..1.0)).into_dyn();
        let weight = Array2::from_shape_simple_fn((5, 2), || r.gen_range(-1.0..1.0)).into_dyn();
        let bias = Array1::from_shape_simple_fn(2, || r.gen_range(-1.0..1.0)).into_dyn();
        let target = Array2::from_shape_simple_fn((3, 2), || r.gen_range(-1.0..1.0)).into_dyn();

        let run = |w: &ndarray::ArrayD<f64>, b: &ndarray::ArrayD<f64>| {
            let mut t = Tape::new();
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let rv = t.constant(raw.clone());
            let proj = t.matmul(rv, wv);
            let out = t.add_row_bias(proj, bv);
            let tv = t.constant(target.clone());
            let diff = t.sub(out, tv);
            let sq = t.mul(diff, diff);
            let loss = t.sum(sq);
            (t, wv, bv, loss)
        };

        let (t, wv, bv, loss) = run(&weight, &bias);
        let grads = t.backward(loss);
        let gw = grads.get(wv).unwrap().clone();
        let gb = grads.get(bv).unwrap().clone();
        let fw = fd_grad(|w| { let (t, _, _, l) = run(w, &bias); t.scalar_value(l) }, &weight, FD_STEP);
        let fb = fd_grad(|b| { let (t, _, _, l) = run(&weight, b); t.scalar_value(l) }, &bias, FD_STEP);
        assert!(max_rel_err(&gw, &fw, 1e-3) < 1e-4);
        assert!(max_rel_err(&gb, &fb, 1e-3) < 1e-4);
    }

    fn small_qs() -> QuerySet {
        let table = KnowledgeTable::default_table();
        QuerySet {
            anatomy_terms: vec!["left lung".into(), "ribs".into()],
            pathology_terms: vec!["opacity".into(), "effusion".into(), "collapse".into()],
            prompted_anatomy_texts: vec![
                "it is located at left lung".into(),
                "it is located at ribs".into(),
            ],
            enhanced_pathology_texts: vec![
                "opacity".into(),
                "effusion".into(),
                crate::report::enhance_pathology("collapse", &table),
            ],
        }
    }

    fn small_params(d_t: usize, d: usize, seed: u64) -> ProjectionParams {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ProjectionParams {
            weight: Array2::from_shape_simple_fn((d_t, d), || r.gen_range(-0.5..0.5)),
            bias: Array1::from_shape_simple_fn(d, || r.gen_range(-0.5..0.5)),
        }
    }

    #[test]
    fn query_embedding_shapes_follow_query_set() {
        let p = provider();
        let params = small_params(64, 16, 5);
        let qe = build_query_embeddings(&small_qs(), &p, &params).unwrap();
        assert_eq!(qe.e_a.dim(), (2, 16));
        assert_eq!(qe.e_p.dim(), (3, 16));
    }

    #[test]
    fn permuting_queries_permutes_rows() {
        let p = provider();
        let params = small_params(64, 16, 6);
        let qs = small_qs();
        let qe = build_query_embeddings(&qs, &p, &params).unwrap();
        let mut swapped = qs.clone();
        swapped.anatomy_terms.swap(0, 1);
        swapped.prompted_anatomy_texts.swap(0, 1);
        let qe2 = build_query_embeddings(&swapped, &p, &params).unwrap();
        assert_eq!(qe.e_a.row(0), qe2.e_a.row(1));
        assert_eq!(qe.e_a.row(1), qe2.e_a.row(0));
        assert_eq!(qe.e_p, qe2.e_p);
    }

    #[test]
    fn rebuilding_is_bitwise_identical() {
        let params = small_params(64, 16, 7);
        let a = build_query_embeddings(&small_qs(), &provider(), &params).unwrap();
        let b = build_query_embeddings(&small_qs(), &provider(), &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn external_provider_round_trips_f32_rows() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("emb.bin");
        let rows: Vec<Vec<f32>> = vec![vec![1.0, -0.5, 0.25], vec![0.0, 2.0, -3.0]];
        let mut bytes = Vec::new();
        for row in &rows {
            for v in row {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(&bin, bytes).unwrap();
        std::fs::write(
            format!("{}.json", bin.display()),
            serde_json::json!({"d_t": 3, "texts": ["alpha", "beta"]}).to_string(),
        )
        .unwrap();
        let p = ExternalProvider::load(&bin).unwrap();
        assert_eq!(p.dim(), 3);
        assert_eq!(p.embed("beta").unwrap().vector, ndarray::array![0.0, 2.0, -3.0]);
        assert!(p.embed("gamma").is_err());
    }

    #[test]
    fn external_provider_rejects_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("emb.bin");
        std::fs::write(&bin, [0u8; 10]).unwrap();
        std::fs::write(
            format!("{}.json", bin.display()),
            serde_json::json!({"d_t": 3, "texts": ["alpha"]}).to_string(),
        )
        .unwrap();
        assert!(matches!(ExternalProvider::load(&bin), Err(Error::Compat(_))));
    }

    #[test]
    fn unknown_provider_is_config_error() {
        let config = ProviderConfig { provider: "mystery".into(), ..Default::default() };
        assert!(matches!(build_provider(&config), Err(Error::Config(_))));
    }
}
