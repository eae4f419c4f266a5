//! Finite-difference verification of the analytic gradients, runnable from
//! the CLI as a self-check. Every parameter group touched by the selected
//! objective is compared against central differences at float64.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{BackboneConfig, ImageTensor};
use crate::error::{Error, Result};
use crate::loss::{
    exist_loss_on_tape, icl_loss_on_tape, protocl_stream_loss_on_tape, ProtoCLConfig,
    ProtoCLVariant,
};
use crate::model::{
    forward_on_tape, init_model_params, project_queries_on_tape, DualStreamConfig, ModelConfig,
};
use crate::params::ParamSet;
use crate::rng;
use crate::tape::fd::{fd_grad, max_rel_err, FD_STEP};
use crate::tape::{Tape, Var};

/// Largest acceptable relative disagreement.
pub const TOLERANCE: f64 = 1e-4;
/// Gradient norm bound at an exact optimum.
pub const STATIONARY_TOLERANCE: f64 = 1e-6;
/// Denominator floor so near-zero gradients do not inflate relative error.
const REL_FLOOR: f64 = 1e-3;
/// Entry budget per parameter group in the whole-model check.
const COORD_CAP: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Protocl,
    Icl,
    Exist,
    Forward,
}

impl LossKind {
    pub const ALL: [LossKind; 4] =
        [LossKind::Protocl, LossKind::Icl, LossKind::Exist, LossKind::Forward];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Protocl => "protocl",
            LossKind::Icl => "icl",
            LossKind::Exist => "exist",
            LossKind::Forward => "forward",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub loss: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub worst_group: String,
}

struct GroupCheck {
    group: String,
    rel_err: f64,
}

fn rand_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, span: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(&[rows, cols]), || r.gen_range(-span..span))
}

fn rand_binary(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || f64::from(r.gen_bool(0.5)))
}

/// Corrupt the analytic gradient of matching groups so the comparison must
/// fail; proves the harness actually detects disagreement.
fn tampered(analytic: ArrayD<f64>, group: &str, tamper: Option<&str>) -> ArrayD<f64> {
    match tamper {
        Some(needle) if group.contains(needle) => analytic + 0.5,
        _ => analytic,
    }
}

/// Compare analytic against central-difference gradients for a set of named
/// leaves feeding one scalar objective.
fn check_leaves(
    leaves: &[(&str, ArrayD<f64>)],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    tamper: Option<&str>,
) -> Result<Vec<GroupCheck>> {
    let mut t = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|(_, v)| t.leaf(v.clone())).collect();
    let loss = build(&mut t, &vars)?;
    let grads = t.backward(loss);

    let mut out = Vec::with_capacity(leaves.len());
    for (i, (name, at)) in leaves.iter().enumerate() {
        let analytic = tampered(grads.get_or_zeros(vars[i], at.shape()), name, tamper);
        let numeric = fd_grad(
            |x| {
                let mut t2 = Tape::new();
                let vs: Vec<Var> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, (_, v))| t2.leaf(if j == i { x.clone() } else { v.clone() }))
                    .collect();
                let l = build(&mut t2, &vs).expect("instance validated by the analytic pass");
                t2.scalar_value(l)
            },
            at,
            FD_STEP,
        );
        out.push(GroupCheck {
            group: name.to_string(),
            rel_err: max_rel_err(&analytic, &numeric, REL_FLOOR),
        });
    }
    Ok(out)
}

fn protocl_instance(seed: u64, i: u64, tamper: Option<&str>) -> Result<Vec<GroupCheck>> {
    let mut r = rng::stream(seed, "gradcheck-protocl", i);
    let m = r.gen_range(2..=4);
    let n = r.gen_range(2..=4);
    let d = r.gen_range(2..=6);
    let leaves = [
        ("anatomy representations", rand_matrix(&mut r, n, d, 1.0)),
        ("pathology representations", rand_matrix(&mut r, m, d, 1.0)),
        ("anatomy queries", rand_matrix(&mut r, n, d, 1.0)),
        ("pathology queries", rand_matrix(&mut r, m, d, 1.0)),
    ];
    let mut l = rand_binary(&mut r, m, n);
    // the first column keeps one positive and one negative so at least one
    // query always has both a prototype and a negative pool
    l[[0, 0]] = 1.0;
    l[[1, 0]] = 0.0;
    let variant = if i % 2 == 0 { ProtoCLVariant::Standard } else { ProtoCLVariant::PaperLiteral };
    let cfg = ProtoCLConfig { tau: 0.07, k: 2, variant, ..ProtoCLConfig::default() };
    check_leaves(
        &leaves,
        |t, vs| {
            // negatives must replay identically across the FD evaluations
            let mut neg_rng = rng::stream(seed, "gradcheck-protocl-negatives", i);
            protocl_stream_loss_on_tape(t, vs[0], vs[1], vs[2], vs[3], &l, &cfg, &mut neg_rng)?
                .ok_or_else(|| Error::Input("instance lost its positive pairs".into()))
        },
        tamper,
    )
}

fn icl_instance(seed: u64, i: u64, tamper: Option<&str>) -> Result<Vec<GroupCheck>> {
    let mut r = rng::stream(seed, "gradcheck-icl", i);
    let m = r.gen_range(2..=5);
    let n = r.gen_range(2..=5);
    let d = r.gen_range(2..=6);
    let scale = ArrayD::from_elem(IxDyn(&[]), r.gen_range(0.5..3.0));
    let leaves = [
        ("pathology representations", rand_matrix(&mut r, m, d, 1.0)),
        ("anatomy representations", rand_matrix(&mut r, n, d, 1.0)),
        ("correlation scale", scale),
    ];
    let l = rand_binary(&mut r, m, n);
    check_leaves(&leaves, |t, vs| icl_loss_on_tape(t, vs[0], vs[1], &l, vs[2]), tamper)
}

fn exist_instance(seed: u64, i: u64, tamper: Option<&str>) -> Result<Vec<GroupCheck>> {
    let mut r = rng::stream(seed, "gradcheck-exist", i);
    let d = r.gen_range(2..=8);
    let z = ArrayD::from_shape_simple_fn(IxDyn(&[d]), || r.gen_range(-3.0..3.0));
    let y = Array1::from_shape_simple_fn(d, || f64::from(r.gen_bool(0.5)));
    check_leaves(
        &[("existence logits", z)],
        |t, vs| exist_loss_on_tape(t, vs[0], &y),
        tamper,
    )
}

fn forward_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { d_v: 4, in_channels: 1, stage_strides: [2, 2, 2, 2] },
        stream: DualStreamConfig {
            layers: 1,
            heads: 2,
            d: 4,
            enable_dual_stream: true,
            enable_mask_generator: true,
        },
        d_t: 6,
    }
}

/// Whole-model instance: image through gates, attention, predictors, and
/// the text projection, with every objective attached.
fn forward_instance(seed: u64, i: u64, tamper: Option<&str>) -> Result<Vec<GroupCheck>> {
    let mut r = rng::stream(seed, "gradcheck-forward", i);
    let cfg = forward_model();
    let params = init_model_params(&cfg, r.gen())?;
    let px = ndarray::Array3::from_shape_simple_fn((32, 32, 1), || r.gen_range(0.0..1.0));
    let img = ImageTensor::new(px)?;
    let raw_a = rand_matrix(&mut r, 2, cfg.d_t, 1.0)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("built 2-d");
    let raw_p = rand_matrix(&mut r, 2, cfg.d_t, 1.0)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("built 2-d");
    let mut l = rand_binary(&mut r, 2, 2);
    l[[0, 0]] = 1.0;
    l[[1, 0]] = 0.0;
    let y_p = Array1::from_shape_simple_fn(2, || f64::from(r.gen_bool(0.5)));
    let y_a = Array1::from_shape_simple_fn(2, || f64::from(r.gen_bool(0.5)));
    let pcl_cfg = ProtoCLConfig { tau: 0.07, k: 2, ..ProtoCLConfig::default() };

    let objective = |ps: &ParamSet| -> Result<(Tape, crate::params::ParamVars, Var)> {
        let mut t = Tape::new();
        let pv = ps.register(&mut t);
        let (e_a, e_p) = project_queries_on_tape(&mut t, &pv, &raw_a, &raw_p);
        let fv = forward_on_tape(&mut t, &pv, &img, e_a, e_p, &cfg)?;
        let mut neg_rng = rng::stream(seed, "gradcheck-forward-negatives", i);
        let pcl =
            protocl_stream_loss_on_tape(&mut t, fv.r_a, fv.r_p, e_a, e_p, &l, &pcl_cfg, &mut neg_rng)?
                .ok_or_else(|| Error::Input("instance lost its positive pairs".into()))?;
        let icl = icl_loss_on_tape(&mut t, fv.r_p, fv.r_a, &l, pv.var("icl.scale"))?;
        let ep = exist_loss_on_tape(&mut t, fv.z_p, &y_p)?;
        let ea = exist_loss_on_tape(&mut t, fv.z_a, &y_a)?;
        let s1 = t.add(pcl, icl);
        let s2 = t.add(ep, ea);
        let total = t.add(s1, s2);
        Ok((t, pv, total))
    };

    let (t, pv, total) = objective(&params)?;
    let grads = t.backward(total);

    let mut out = Vec::new();
    for name in params.names() {
        let at = params.get(name).expect("listed name").clone();
        let analytic = tampered(grads.get_or_zeros(pv.var(name), at.shape()), name, tamper);
        let flat = analytic.as_slice().expect("standard layout");
        let len = at.len();
        let coords: Vec<usize> = if len <= COORD_CAP {
            (0..len).collect()
        } else {
            // distinct flat indices, instance-deterministic
            let mut order: Vec<usize> = (0..len).collect();
            for j in 0..COORD_CAP {
                let k = r.gen_range(j..len);
                order.swap(j, k);
            }
            order.truncate(COORD_CAP);
            order
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let mut plus = at.clone();
            let mut minus = at.clone();
            plus.as_slice_mut().expect("standard layout")[c] += FD_STEP;
            minus.as_slice_mut().expect("standard layout")[c] -= FD_STEP;
            let eval = |v: ArrayD<f64>| -> Result<f64> {
                let mut ps = params.clone();
                ps.set(name, v)?;
                let (t2, _, l2) = objective(&ps)?;
                Ok(t2.scalar_value(l2))
            };
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
            let a = flat[c];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        out.push(GroupCheck { group: name.to_string(), rel_err: worst });
    }
    Ok(out)
}

/// Run one selector over `instances` random instances; the report carries
/// the worst relative error and the group it came from.
pub fn check_loss(
    kind: LossKind,
    instances: usize,
    seed: u64,
    tamper: Option<&str>,
) -> Result<CheckReport> {
    if instances == 0 {
        return Err(Error::Config("gradient check needs at least one instance".into()));
    }
    let mut max_rel_err = 0.0f64;
    let mut worst_group = String::from("none");
    for i in 0..instances as u64 {
        let groups = match kind {
            LossKind::Protocl => protocl_instance(seed, i, tamper)?,
            LossKind::Icl => icl_instance(seed, i, tamper)?,
            LossKind::Exist => exist_instance(seed, i, tamper)?,
            LossKind::Forward => forward_instance(seed, i, tamper)?,
        };
        for g in groups {
            if g.rel_err > max_rel_err || !g.rel_err.is_finite() {
                max_rel_err = g.rel_err;
                worst_group = g.group;
            }
        }
    }
    Ok(CheckReport {
        loss: kind.name().to_string(),
        instances,
        max_rel_err,
        worst_group,
    })
}

/// Gradient norm of the existence objective at its exact minimum, where the
/// targets equal the predicted probabilities.
pub fn stationarity_gap(dim: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck-stationary", 0);
    let z = ArrayD::from_shape_simple_fn(IxDyn(&[dim]), || r.gen_range(-2.0..2.0));
    let targets = z.mapv(|v: f64| 1.0 / (1.0 + (-v).exp()));
    let mut t = Tape::new();
    let zv = t.leaf(z.clone());
    let loss = t.bce_with_logits_mean(zv, &targets);
    let grads = t.backward(loss);
    let g = grads.get_or_zeros(zv, z.shape());
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Full verification pass: every selector plus the stationarity probe.
/// Fails with the offending parameter group named.
pub fn run_suite(
    seed: u64,
    instances: usize,
    forward_instances: usize,
    tamper: Option<&str>,
) -> Result<Vec<CheckReport>> {
    let mut reports = vec![
        check_loss(LossKind::Protocl, instances, seed, tamper)?,
        check_loss(LossKind::Icl, instances, seed, tamper)?,
        check_loss(LossKind::Exist, instances, seed, tamper)?,
        check_loss(LossKind::Forward, forward_instances, seed, tamper)?,
    ];
    for r in &reports {
        if !(r.max_rel_err < TOLERANCE) {
            return Err(Error::CheckFailed(format!(
                "analytic gradient for {} ({} objective) disagrees with finite differences: \
                 relative error {:.3e} exceeds {TOLERANCE:.0e}",
                r.worst_group, r.loss, r.max_rel_err
            )));
        }
    }
    let gap = stationarity_gap(8, seed);
    reports.push(CheckReport {
        loss: "stationary".into(),
        instances: 1,
        max_rel_err: gap,
        worst_group: "existence logits".into(),
    });
    if !(gap < STATIONARY_TOLERANCE) {
        return Err(Error::CheckFailed(format!(
            "existence logits gradient norm {gap:.3e} at the exact optimum exceeds \
             {STATIONARY_TOLERANCE:.0e}"
        )));
    }
    Ok(reports)
}
