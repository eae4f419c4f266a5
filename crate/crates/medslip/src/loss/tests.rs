use super::*;
use crate::tape::fd::{fd_grad, max_rel_err, FD_STEP};
use ndarray::array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(tau: f64, k: usize, variant: ProtoCLVariant) -> ProtoCLConfig {
    ProtoCLConfig { tau, k, variant, rng_seed: 0 }
}

fn v(slice: &[f64]) -> Array1<f64> {
    Array1::from_vec(slice.to_vec())
}

fn rand1(d: usize, seed: u64) -> Array1<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array1::from_shape_simple_fn(d, || r.gen_range(-1.0..1.0))
}

fn rand2(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-1.0..1.0))
}

// -- prototype ---------------------------------------------------------------

#[test]
fn prototype_is_the_mean() {
    let p = compute_prototype(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap();
    assert_eq!(p.vector, v(&[0.5, 0.5]));
    assert_eq!(p.support, 2);
}

#[test]
fn single_positive_is_its_own_prototype() {
    let e = v(&[0.3, -0.7, 2.0]);
    let p = compute_prototype(std::slice::from_ref(&e)).unwrap();
    assert_eq!(p.vector, e);
    assert_eq!(p.support, 1);
}

#[test]
fn prototype_ignores_order() {
    let a = [v(&[1.0, 2.0]), v(&[-3.0, 0.5]), v(&[0.0, 0.0])];
    let b = [a[2].clone(), a[0].clone(), a[1].clone()];
    assert_eq!(compute_prototype(&a).unwrap().vector, compute_prototype(&b).unwrap().vector);
}

#[test]
fn empty_positives_are_rejected() {
    assert!(compute_prototype(&[]).is_err());
}

// -- contrastive scalar cases ------------------------------------------------

/// Independent scalar oracle for the standard variant with scores
/// `sp` (positive) and `sn` (negatives), all divided by `tau`:
/// `-log( exp(sp/t) / (exp(sp/t) + sum exp(sn_i/t)) )`.
fn standard_oracle(sp: f64, sn: &[f64], tau: f64) -> f64 {
    let top = (sp / tau).exp();
    let bottom: f64 = top + sn.iter().map(|s| (s / tau).exp()).sum::<f64>();
    -(top / bottom).ln()
}

#[test]
fn standard_variant_canonical_instance() {
    let r = v(&[1.0, 0.0]);
    let negs = [v(&[0.0, 1.0]), v(&[0.0, -1.0])];
    let got = protocl_loss(&r, std::slice::from_ref(&r), &negs, &cfg(1.0, 2, ProtoCLVariant::Standard))
        .unwrap();
    // -log(e / (e + 2)) = ln(1 + 2*e^-1)
    let oracle = (2.0 * (-1.0f64).exp()).ln_1p();
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 0.5514447).abs() < 1e-6);
    assert!((got - standard_oracle(1.0, &[0.0, 0.0], 1.0)).abs() < 1e-12);
}

#[test]
fn standard_variant_sharper_temperature() {
    let r = v(&[1.0, 0.0]);
    let negs = [v(&[0.0, 1.0]), v(&[0.0, -1.0])];
    let got = protocl_loss(&r, std::slice::from_ref(&r), &negs, &cfg(0.5, 2, ProtoCLVariant::Standard))
        .unwrap();
    // -log(e^2 / (e^2 + 2)) = ln(1 + 2*e^-2)
    let oracle = (2.0 * (-2.0f64).exp()).ln_1p();
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 0.2395447).abs() < 5e-6);
}

#[test]
fn paper_literal_variant_reproduces_typeset_equation() {
    let r = v(&[1.0, 0.0]);
    let negs = [v(&[0.0, 1.0]), v(&[0.0, -1.0])];
    let got = protocl_loss(
        &r,
        std::slice::from_ref(&r),
        &negs,
        &cfg(1.0, 2, ProtoCLVariant::PaperLiteral),
    )
    .unwrap();
    // -log(e / 2) = ln 2 - 1, negative: the literal form is unbounded below
    let oracle = std::f64::consts::LN_2 - 1.0;
    assert!((got - oracle).abs() < 1e-12);
    assert!((got + 0.3068528).abs() < 1e-6);
    assert!(got < 0.0);
}

#[test]
fn standard_variant_matches_textbook_infonce() {
    // single positive, so the prototype is the positive itself and the
    // term must equal InfoNCE computed as cross-entropy over logits
    for seed in 0..5u64 {
        let d = 6;
        let r = rand1(d, seed * 10 + 1);
        let pos = rand1(d, seed * 10 + 2);
        let negs: Vec<Array1<f64>> = (0..4).map(|i| rand1(d, seed * 10 + 3 + i)).collect();
        let tau = 0.2;
        let got =
            protocl_loss(&r, std::slice::from_ref(&pos), &negs, &cfg(tau, 4, ProtoCLVariant::Standard))
                .unwrap();

        let mut logits = vec![r.dot(&pos) / tau];
        logits.extend(negs.iter().map(|n| r.dot(n) / tau));
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        let infonce = lse - logits[0];
        assert!((got - infonce).abs() < 1e-12, "seed {seed}: {got} vs {infonce}");
    }
}

#[test]
fn contrastive_loss_ignores_list_order() {
    let r = rand1(5, 40);
    let pos: Vec<Array1<f64>> = (0..3).map(|i| rand1(5, 41 + i)).collect();
    let negs: Vec<Array1<f64>> = (0..4).map(|i| rand1(5, 44 + i)).collect();
    let c = cfg(0.3, 4, ProtoCLVariant::Standard);
    let base = protocl_loss(&r, &pos, &negs, &c).unwrap();
    let pos_r: Vec<_> = pos.iter().rev().cloned().collect();
    let negs_r: Vec<_> = negs.iter().rev().cloned().collect();
    assert!((protocl_loss(&r, &pos_r, &negs_r, &c).unwrap() - base).abs() < 1e-12);
}

#[test]
fn duplicating_positives_leaves_loss_unchanged() {
    let r = rand1(4, 50);
    let pos = vec![rand1(4, 51), rand1(4, 52)];
    let doubled = vec![pos[0].clone(), pos[0].clone(), pos[1].clone(), pos[1].clone()];
    let negs: Vec<Array1<f64>> = (0..3).map(|i| rand1(4, 53 + i)).collect();
    let c = cfg(0.5, 3, ProtoCLVariant::Standard);
    let a = protocl_loss(&r, &pos, &negs, &c).unwrap();
    let b = protocl_loss(&r, &doubled, &negs, &c).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn loss_decreases_as_alignment_grows() {
    let r = v(&[1.0, 0.0]);
    let negs: Vec<Array1<f64>> = (0..3).map(|i| rand1(2, 60 + i)).collect();
    let c = cfg(0.4, 3, ProtoCLVariant::Standard);
    let mut prev = f64::INFINITY;
    for step in 0..20 {
        let p = v(&[step as f64 * 0.1, 0.0]);
        let loss = protocl_loss(&r, std::slice::from_ref(&p), &negs, &c).unwrap();
        assert!(loss < prev, "not strictly decreasing at step {step}");
        prev = loss;
    }
}

#[test]
fn invalid_contrastive_inputs_error() {
    let r = v(&[1.0, 0.0]);
    let negs = [v(&[0.0, 1.0]), v(&[0.0, -1.0])];
    assert!(matches!(
        protocl_loss(&r, std::slice::from_ref(&r), &negs, &cfg(0.0, 2, ProtoCLVariant::Standard)),
        Err(Error::Config(_))
    ));
    let bad = v(&[f64::NAN, 0.0]);
    assert!(matches!(
        protocl_loss(&bad, std::slice::from_ref(&r), &negs, &cfg(1.0, 2, ProtoCLVariant::Standard)),
        Err(Error::Numeric(_))
    ));
    assert!(protocl_loss(&r, std::slice::from_ref(&r), &negs[..1], &cfg(1.0, 2, ProtoCLVariant::Standard))
        .is_err());
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let c = cfg(0.3, 3, ProtoCLVariant::Standard);
    let pool0 = rand2(6, 5, 70).into_dyn();
    let r0 = rand1(5, 71).into_dyn();
    let pos = [1usize, 4];
    let neg = [0usize, 2, 3];

    let run = |pool: &ndarray::ArrayD<f64>, r: &ndarray::ArrayD<f64>| {
        let mut t = Tape::new();
        let pl = t.leaf(pool.clone());
        let rl = t.leaf(r.clone());
        let term = protocl_term_on_tape(&mut t, rl, pl, &pos, &neg, &c);
        (t, pl, rl, term)
    };
    let (t, pl, rl, term) = run(&pool0, &r0);
    let grads = t.backward(term);
    let gp = grads.get(pl).unwrap().clone();
    let gr = grads.get(rl).unwrap().clone();
    let fp = fd_grad(|x| { let (t, _, _, l) = run(x, &r0); t.scalar_value(l) }, &pool0, FD_STEP);
    let fr = fd_grad(|x| { let (t, _, _, l) = run(&pool0, x); t.scalar_value(l) }, &r0, FD_STEP);
    assert!(max_rel_err(&gp, &fp, 1e-3) < 1e-4);
    assert!(max_rel_err(&gr, &fr, 1e-3) < 1e-4);

    let c2 = cfg(0.3, 3, ProtoCLVariant::PaperLiteral);
    let run2 = |pool: &ndarray::ArrayD<f64>| {
        let mut t = Tape::new();
        let pl = t.leaf(pool.clone());
        let rl = t.constant(r0.clone());
        let term = protocl_term_on_tape(&mut t, rl, pl, &pos, &neg, &c2);
        (t, pl, term)
    };
    let (t, pl, term) = run2(&pool0);
    let g = t.backward(term).get(pl).unwrap().clone();
    let f = fd_grad(|x| { let (t, _, l) = run2(x); t.scalar_value(l) }, &pool0, FD_STEP);
    assert!(max_rel_err(&g, &f, 1e-3) < 1e-4);
}

// -- negative sampling ---------------------------------------------------------

#[test]
fn draws_without_replacement_when_pool_suffices() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pos: BTreeSet<usize> = [0].into();
    let idx = sample_negative_indices(5, &pos, 2, &mut rng).unwrap();
    assert_eq!(idx.len(), 2);
    assert_ne!(idx[0], idx[1]);
    assert!(idx.iter().all(|&i| (1..5).contains(&i)));
}

#[test]
fn falls_back_to_replacement_on_small_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pos: BTreeSet<usize> = [0].into();
    let idx = sample_negative_indices(2, &pos, 3, &mut rng).unwrap();
    assert_eq!(idx, vec![1, 1, 1]);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let pos: BTreeSet<usize> = [2, 3].into();
    let a = sample_negative_indices(9, &pos, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = sample_negative_indices(9, &pos, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exhausted_pool_is_a_sampling_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pos: BTreeSet<usize> = [0, 1].into();
    assert!(matches!(
        sample_negative_indices(2, &pos, 1, &mut rng),
        Err(Error::Sampling(_))
    ));
}

#[test]
fn sampled_vectors_are_the_indexed_rows() {
    let rows = rand2(4, 3, 80);
    let pos: BTreeSet<usize> = [1].into();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let negs = sample_negatives(&rows, &pos, 2, &mut rng).unwrap();
    for n in &negs {
        assert!((0..4).any(|i| rows.row(i) == n.view()));
    }
}

// -- stream-level contrastive --------------------------------------------------

fn bundle(n: usize, m: usize, d: usize, seed: u64) -> StreamBundle {
    StreamBundle {
        r_a: rand2(n, d, seed),
        r_p: rand2(m, d, seed + 1),
        a_a: Array2::zeros((n, 4)),
        a_p: Array2::zeros((m, 4)),
        z_a: Array1::zeros(n),
        z_p: Array1::zeros(m),
        grid_h: 2,
        grid_w: 2,
        stride: 16,
    }
}

fn em_with(l: Array2<f64>) -> ExistenceMatrix {
    let n = l.ncols();
    ExistenceMatrix {
        study_id: "s".into(),
        y_pathology: l.rows().into_iter().map(|r| r.sum().min(1.0)).collect(),
        y_anatomy: (0..n).map(|j| l.column(j).sum().min(1.0)).collect(),
        l,
    }
}

#[test]
fn all_negative_studies_contribute_zero() {
    let qe = QueryEmbeddings { e_a: rand2(3, 4, 90), e_p: rand2(2, 4, 91) };
    let em = em_with(Array2::zeros((2, 3)));
    let c = cfg(0.1, 2, ProtoCLVariant::Standard);
    let got = protocl_stream_loss(&bundle(3, 2, 4, 92), &em, &qe, &c).unwrap();
    assert_eq!(got, 0.0);
}

#[test]
fn single_positive_creates_one_term_per_direction() {
    let d = 4;
    let qe = QueryEmbeddings { e_a: rand2(3, d, 93), e_p: rand2(2, d, 94) };
    let mut l = Array2::zeros((2, 3));
    l[[0, 1]] = 1.0;
    let em = em_with(l.clone());
    let sb = bundle(3, 2, d, 95);
    let c = cfg(0.25, 2, ProtoCLVariant::Standard);
    let got = protocl_stream_loss(&sb, &em, &qe, &c).unwrap();

    // oracle: replay the sampler in the implementation's iteration order
    let mut rng = crate::rng::stream(c.rng_seed, "protocl-negatives", 0);
    let neg_a = sample_negatives(&qe.e_p, &[0usize].into(), c.k, &mut rng).unwrap();
    let term_a = protocl_loss(
        &sb.r_a.row(1).to_owned(),
        &[qe.e_p.row(0).to_owned()],
        &neg_a,
        &c,
    )
    .unwrap();
    let neg_p = sample_negatives(&qe.e_a, &[1usize].into(), c.k, &mut rng).unwrap();
    let term_p = protocl_loss(
        &sb.r_p.row(0).to_owned(),
        &[qe.e_a.row(1).to_owned()],
        &neg_p,
        &c,
    )
    .unwrap();
    let expect = 0.5 * (term_a + term_p);
    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
}

#[test]
fn fully_positive_pool_skips_that_query() {
    // both pathologies positive at anatomy 0: no pathology negatives exist,
    // so the anatomy-direction term for j=0 is skipped, but each pathology
    // still has anatomy negatives
    let d = 4;
    let qe = QueryEmbeddings { e_a: rand2(2, d, 96), e_p: rand2(2, d, 97) };
    let mut l = Array2::zeros((2, 2));
    l[[0, 0]] = 1.0;
    l[[1, 0]] = 1.0;
    let em = em_with(l);
    let c = cfg(0.25, 2, ProtoCLVariant::Standard);
    let got = protocl_stream_loss(&bundle(2, 2, d, 98), &em, &qe, &c).unwrap();
    assert!(got.is_finite());
}

// -- inter-stream correlation ---------------------------------------------------

#[test]
fn correlation_matches_sigmoid_oracles() {
    let row = array![[0.6, 0.8]];
    let l1 = array![[1.0]];
    let got = icl_loss(&row, &row, &l1, 1.0).unwrap();
    // cosine of identical rows is 1: -log(sigmoid(1))
    let oracle = (1.0 + (-1.0f64).exp()).ln();
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 0.3132617).abs() < 1e-6);

    let l0 = array![[0.0]];
    let got0 = icl_loss(&row, &row, &l0, 1.0).unwrap();
    assert!((got0 - (1.0 + oracle)).abs() < 1e-9);
    assert!((got0 - 1.3132617).abs() < 1e-6);

    let a = array![[1.0, 0.0]];
    let b = array![[0.0, 1.0]];
    let ln2 = std::f64::consts::LN_2;
    assert!((icl_loss(&a, &b, &l1, 1.0).unwrap() - ln2).abs() < 1e-12);
    assert!((icl_loss(&a, &b, &l0, 1.0).unwrap() - ln2).abs() < 1e-12);
}

#[test]
fn correlation_is_cosine_not_dot() {
    // scaling a row must not change the loss
    let r_p = rand2(2, 3, 100);
    let r_a = rand2(4, 3, 101);
    let l = rand2(2, 4, 102).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let base = icl_loss(&r_p, &r_a, &l, 2.0).unwrap();
    let scaled = icl_loss(&(&r_p * 7.5), &r_a, &l, 2.0).unwrap();
    assert!((base - scaled).abs() < 1e-12);
}

#[test]
fn correlation_is_transpose_symmetric() {
    let r_p = rand2(3, 5, 103);
    let r_a = rand2(4, 5, 104);
    let l = rand2(3, 4, 105).mapv(|v| if v > 0.3 { 1.0 } else { 0.0 });
    let a = icl_loss(&r_p, &r_a, &l, 1.7).unwrap();
    let b = icl_loss(&r_a, &r_p, &l.t().to_owned(), 1.7).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn correlation_shape_mismatch_errors() {
    let r_p = rand2(2, 3, 106);
    let r_a = rand2(4, 3, 107);
    let wrong = Array2::zeros((3, 4));
    assert!(matches!(icl_loss(&r_p, &r_a, &wrong, 1.0), Err(Error::Shape(_))));
    let narrow = rand2(4, 2, 108);
    assert!(matches!(icl_loss(&r_p, &narrow, &Array2::zeros((2, 4)), 1.0), Err(Error::Shape(_))));
}

#[test]
fn correlation_gradients_match_finite_differences() {
    let l = rand2(3, 2, 110).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let rp0 = rand2(3, 4, 111).into_dyn();
    let ra0 = rand2(2, 4, 112).into_dyn();
    let sc0 = crate::tape::scalar(3.0);

    let run = |rp: &ndarray::ArrayD<f64>, ra: &ndarray::ArrayD<f64>, sc: &ndarray::ArrayD<f64>| {
        let mut t = Tape::new();
        let rpv = t.leaf(rp.clone());
        let rav = t.leaf(ra.clone());
        let scv = t.leaf(sc.clone());
        let loss = icl_loss_on_tape(&mut t, rpv, rav, &l, scv).unwrap();
        (t, rpv, rav, scv, loss)
    };
    let (t, rpv, rav, scv, loss) = run(&rp0, &ra0, &sc0);
    let grads = t.backward(loss);
    for (var, at) in [(rpv, &rp0), (rav, &ra0), (scv, &sc0)] {
        let analytic = grads.get(var).unwrap().clone();
        let numeric = fd_grad(
            |x| {
                let (rp, ra, sc) = match var {
                    v if v == rpv => (x.clone(), ra0.clone(), sc0.clone()),
                    v if v == rav => (rp0.clone(), x.clone(), sc0.clone()),
                    _ => (rp0.clone(), ra0.clone(), x.clone()),
                };
                let (t, _, _, _, l) = run(&rp, &ra, &sc);
                t.scalar_value(l)
            },
            at,
            FD_STEP,
        );
        assert!(max_rel_err(&analytic, &numeric, 1e-3) < 1e-4);
    }
}

// -- existence ------------------------------------------------------------------

#[test]
fn zero_logits_cost_log_two() {
    let z = Array1::zeros(5);
    let y = array![1.0, 0.0, 1.0, 0.0, 1.0];
    let got = exist_loss(&z, &y).unwrap();
    assert!((got - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn saturated_logits_stay_stable() {
    let got = exist_loss(&array![20.0], &array![1.0]).unwrap();
    // ln(1 + e^-20)
    let oracle = (-20.0f64).exp().ln_1p();
    assert!((got - oracle).abs() < 1e-15);
    assert!(got > 0.0 && got < 1e-8);

    let wrong = exist_loss(&array![-20.0], &array![1.0]).unwrap();
    assert!((wrong - 20.0).abs() < 1e-6);

    for extreme in [1e4, -1e4] {
        let v = exist_loss(&array![extreme], &array![0.0]).unwrap();
        assert!(v.is_finite());
    }
}

#[test]
fn labels_must_be_binary() {
    assert!(matches!(
        exist_loss(&array![0.0], &array![0.5]),
        Err(Error::Input(_))
    ));
    assert!(exist_loss(&array![0.0, 1.0], &array![1.0]).is_err());
}

#[test]
fn existence_gradients_match_finite_differences() {
    let y = array![1.0, 0.0, 1.0, 1.0].into_dyn();
    let z0 = rand1(4, 120).into_dyn();
    let run = |z: &ndarray::ArrayD<f64>| {
        let mut t = Tape::new();
        let zv = t.leaf(z.clone());
        let y1 = Array1::from_vec(y.iter().copied().collect());
        let loss = exist_loss_on_tape(&mut t, zv, &y1).unwrap();
        (t, zv, loss)
    };
    let (t, zv, loss) = run(&z0);
    let analytic = t.backward(loss).get(zv).unwrap().clone();
    let numeric = fd_grad(|z| { let (t, _, l) = run(z); t.scalar_value(l) }, &z0, FD_STEP);
    assert!(max_rel_err(&analytic, &numeric, 1e-3) < 1e-4);
}

// -- combination ------------------------------------------------------------------

#[test]
fn weighted_total_obeys_the_invariant() {
    let w = LossWeights { protocl: 1.0, icl: 1.0, exist: 1.0 };
    let r = total_loss(1.0, 2.0, 3.0, w).unwrap();
    assert_eq!(r.total, 6.0);

    let only_exist = LossWeights { protocl: 0.0, icl: 0.0, exist: 1.0 };
    assert_eq!(total_loss(1.0, 2.0, 3.0, only_exist).unwrap().total, 3.0);

    let no_icl = LossWeights { protocl: 1.0, icl: 0.0, exist: 1.0 };
    assert_eq!(total_loss(0.25, 99.0, 0.5, no_icl).unwrap().total, 0.75);
}

#[test]
fn non_finite_terms_are_numeric_errors() {
    let w = LossWeights::default();
    assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, w), Err(Error::Numeric(_))));
    assert!(matches!(total_loss(0.0, f64::INFINITY, 0.0, w), Err(Error::Numeric(_))));
    let huge = LossWeights { protocl: f64::MAX, icl: 1.0, exist: f64::MAX };
    assert!(total_loss(f64::MAX, 1.0, f64::MAX, huge).is_err());
}
