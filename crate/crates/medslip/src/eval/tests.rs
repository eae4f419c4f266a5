use super::*;
use crate::backbone::BackboneConfig;
use crate::model::{init_model_params, DualStreamConfig, ModelConfig};
use ndarray::{array, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { d_v: 6, in_channels: 1, stage_strides: [2, 2, 2, 2] },
        stream: DualStreamConfig {
            layers: 1,
            heads: 2,
            d: 8,
            enable_dual_stream: true,
            enable_mask_generator: true,
        },
        d_t: 12,
    }
}

fn tiny_queries(cfg: &ModelConfig, params: &ParamSet) -> QueryEmbeddings {
    let qs = crate::report::QuerySet {
        anatomy_terms: vec!["upper zone".into(), "lower zone".into()],
        pathology_terms: vec!["disc".into(), "ring".into(), "bar".into()],
        prompted_anatomy_texts: vec![
            "it is located at upper zone".into(),
            "it is located at lower zone".into(),
        ],
        enhanced_pathology_texts: vec!["disc".into(), "ring".into(), "bar".into()],
    };
    let provider =
        build_provider(&crate::text::ProviderConfig { d_t: cfg.d_t, ..Default::default() })
            .unwrap();
    let proj = ProjectionParams {
        weight: params
            .get("text_projection.weight")
            .unwrap()
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned(),
        bias: params
            .get("text_projection.bias")
            .unwrap()
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned(),
    };
    build_query_embeddings(&qs, provider.as_ref(), &proj).unwrap()
}

fn test_image(seed: u64) -> ImageTensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let px = Array3::from_shape_simple_fn((32, 32, 1), || r.gen_range(0.0..1.0));
    ImageTensor::new(px).unwrap()
}

#[test]
fn zeroed_final_layer_scores_exactly_half() {
    let cfg = tiny_model();
    let mut params = init_model_params(&cfg, 0).unwrap();
    let qe = tiny_queries(&cfg, &params);
    let d = cfg.d();
    params.set("stream_p.predictor.w2", ArrayD::zeros(IxDyn(&[d]))).unwrap();
    params.set("stream_p.predictor.b2", ArrayD::zeros(IxDyn(&[]))).unwrap();
    let scores =
        zero_shot_classify(&params, &cfg, &qe, &[test_image(1), test_image(2)]).unwrap();
    assert_eq!(scores.dim(), (2, 3));
    assert!(scores.iter().all(|&s| s == 0.5));
}

#[test]
fn scores_stay_in_the_unit_interval() {
    let cfg = tiny_model();
    let params = init_model_params(&cfg, 4).unwrap();
    let qe = tiny_queries(&cfg, &params);
    let imgs: Vec<ImageTensor> = (0..3).map(test_image).collect();
    let scores = zero_shot_classify(&params, &cfg, &qe, &imgs).unwrap();
    assert!(scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
    // deterministic across calls
    let again = zero_shot_classify(&params, &cfg, &qe, &imgs).unwrap();
    assert_eq!(scores, again);
}

#[test]
fn bilinear_upsample_identity_and_interpolation() {
    let src = array![[0.0, 1.0], [2.0, 3.0]];
    assert_eq!(bilinear_upsample(&src, 2, 2), src);

    // doubling: the two source centers map to output centers 0.5 and 2.5,
    // so columns 1 and 2 interpolate at 1/4 and 3/4
    let up = bilinear_upsample(&array![[0.0, 1.0]], 1, 4);
    let expect = array![[0.0, 0.25, 0.75, 1.0]];
    for (a, b) in up.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn constant_attention_is_degenerate() {
    let row = Array1::from_elem(9, 1.0 / 9.0);
    let g = ground_from_attention(&row, 3, 3, 48, 48, 0.95).unwrap();
    assert!(g.degenerate);
    assert!(g.heatmap.iter().all(|&v| v == 0.0));
    assert!(g.binary_mask.iter().all(|&v| v == 0));
    assert_eq!(g.peak, (0, 0));
}

#[test]
fn peaked_attention_localizes_to_the_matching_cell() {
    let mut row = Array1::zeros(9);
    row[5] = 1.0; // grid cell (row 1, col 2) of a 3x3 grid
    let g = ground_from_attention(&row, 3, 3, 48, 48, 0.95).unwrap();
    assert!(!g.degenerate);
    let (x, y) = g.peak;
    assert!((16..32).contains(&y), "peak y {y}");
    assert!((32..48).contains(&x), "peak x {x}");
    // rescaled to [0,1] with the max hit
    let max = g.heatmap.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = g.heatmap.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!((min, max), (0.0, 1.0));
    // the peak survives thresholding
    assert_eq!(g.binary_mask[[y, x]], 1);
    let kept: usize = g.binary_mask.iter().map(|&v| v as usize).sum();
    let frac = kept as f64 / (48.0 * 48.0);
    assert!(frac <= 0.06, "0.95 quantile should keep about 5%, kept {frac}");
}

#[test]
fn grounding_validates_inputs() {
    let row = Array1::zeros(8);
    assert!(matches!(
        ground_from_attention(&row, 3, 3, 48, 48, 0.95),
        Err(Error::Shape(_))
    ));
    let row = Array1::zeros(9);
    assert!(matches!(
        ground_from_attention(&row, 3, 3, 48, 48, 1.5),
        Err(Error::Config(_))
    ));
}

#[test]
fn grounding_through_the_model_has_image_shape() {
    let cfg = tiny_model();
    let params = init_model_params(&cfg, 7).unwrap();
    let qe = tiny_queries(&cfg, &params);
    let img = test_image(9);
    let g = zero_shot_ground(&params, &cfg, &qe, &img, 0, 0.95).unwrap();
    assert_eq!(g.heatmap.dim(), (32, 32));
    assert_eq!(g.binary_mask.dim(), (32, 32));
    assert!(zero_shot_ground(&params, &cfg, &qe, &img, 99, 0.95).is_err());
}

#[test]
fn uniform_cooccurrence_with_constant_similarity_has_zero_divergence() {
    // identical pathology rows and identical anatomy rows make every cosine
    // equal, so softmax(S) is uniform and matches uniform L exactly
    let e_p = Array2::from_shape_fn((3, 4), |(_, j)| j as f64 + 1.0);
    let e_a = Array2::from_shape_fn((2, 4), |(_, j)| 2.0 * j as f64 - 1.0);
    let l = Array2::ones((3, 2));
    let kl = measure_latent_alignment(&QueryEmbeddings { e_a, e_p }, &l).unwrap();
    assert!(kl.abs() < 1e-9, "kl = {kl}");
}

#[test]
fn alignment_improves_the_divergence() {
    // L concentrates mass on pair (0,0)
    let mut l = Array2::zeros((2, 2));
    l[[0, 0]] = 1.0;
    let aligned = QueryEmbeddings {
        e_p: array![[1.0, 0.0], [0.0, 1.0]],
        e_a: array![[1.0, 0.05], [0.05, 1.0]],
    };
    let misaligned = QueryEmbeddings {
        e_p: array![[1.0, 0.0], [0.0, 1.0]],
        e_a: array![[0.05, 1.0], [1.0, 0.05]],
    };
    let good = measure_latent_alignment(&aligned, &l).unwrap();
    let bad = measure_latent_alignment(&misaligned, &l).unwrap();
    assert!(good < bad, "aligned {good} should beat misaligned {bad}");
    assert!(good > 0.0);
}

#[test]
fn latent_alignment_rejects_bad_cooccurrence() {
    let qe = QueryEmbeddings { e_p: Array2::ones((2, 3)), e_a: Array2::ones((2, 3)) };
    assert!(matches!(
        measure_latent_alignment(&qe, &Array2::zeros((2, 2))),
        Err(Error::Input(_))
    ));
    assert!(matches!(
        measure_latent_alignment(&qe, &Array2::ones((3, 2))),
        Err(Error::Shape(_))
    ));
    let softl = Array2::from_elem((2, 2), 0.5);
    assert!(measure_latent_alignment(&qe, &softl).is_err());
}

#[test]
fn global_existence_is_the_entrywise_union() {
    let mk = |bits: [[f64; 2]; 2]| ExistenceMatrix {
        study_id: "s".into(),
        l: array![[bits[0][0], bits[0][1]], [bits[1][0], bits[1][1]]],
        y_pathology: Array1::zeros(2),
        y_anatomy: Array1::zeros(2),
    };
    let a = mk([[1.0, 0.0], [0.0, 0.0]]);
    let b = mk([[0.0, 0.0], [0.0, 1.0]]);
    let union = global_existence(&[a, b]).unwrap();
    assert_eq!(union, array![[1.0, 0.0], [0.0, 1.0]]);
    assert!(global_existence(&[]).is_err());
}

#[test]
fn checkpoint_embeddings_match_direct_construction() {
    use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointConfig};
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_model();
    let params = init_model_params(&cfg, 11).unwrap();
    let qs = crate::report::QuerySet {
        anatomy_terms: vec!["upper zone".into()],
        pathology_terms: vec!["disc".into(), "ring".into()],
        prompted_anatomy_texts: vec!["it is located at upper zone".into()],
        enhanced_pathology_texts: vec!["disc".into(), "ring".into()],
    };
    let provider_cfg = crate::text::ProviderConfig { d_t: 12, ..Default::default() };
    save_checkpoint(
        dir.path(),
        &params,
        &CheckpointConfig { model: cfg.clone(), query_set: qs, provider: provider_cfg },
    )
    .unwrap();
    let ckpt = load_checkpoint(dir.path()).unwrap();
    let qe = checkpoint_query_embeddings(&ckpt).unwrap();
    assert_eq!(qe.e_a.dim(), (1, 8));
    assert_eq!(qe.e_p.dim(), (2, 8));
    // the only difference from the pre-save params is f32 rounding
    let direct = tiny_queries(&cfg, &params);
    let direct_a = direct.e_a.row(0);
    for (a, b) in qe.e_a.row(0).iter().zip(direct_a.iter()) {
        assert!((a - b).abs() < 1e-5);
    }
}
