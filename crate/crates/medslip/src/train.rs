//! Pre-training loop: per-image tapes evaluated in parallel, gradients
//! reduced in a fixed order, AdamW updates under a cosine schedule, a CSV
//! loss trace, and a checkpoint refreshed every epoch.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::checkpoint::{save_checkpoint, CheckpointConfig};
use crate::error::{Error, Result};
use crate::loss::{
    exist_loss_on_tape, icl_loss_on_tape, protocl_stream_loss_on_tape, total_loss, LossWeights,
    ProtoCLConfig,
};
use crate::model::{forward_on_tape, init_model_params, project_queries_on_tape, ModelConfig};
use crate::params::{AdamW, ParamSet};
use crate::report::{build_existence_matrix, ExistenceMatrix, QuerySet};
use crate::rng;
use crate::synth::{Corpus, Split};
use crate::tape::Tape;
use crate::text::{build_provider, raw_query_matrices, ProviderConfig};

/// Component toggles matching the ablation grid: prototypical contrastive
/// loss, dual streams, the mask generator, and inter-stream correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub pcl: bool,
    pub ds: bool,
    pub mg: bool,
    pub icl: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { pcl: true, ds: true, mg: true, icl: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub seed: u64,
    pub flags: AblationFlags,
    pub weights: LossWeights,
    pub protocl: ProtoCLConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 20,
            lr: 3e-4,
            weight_decay: 1e-4,
            warmup_frac: 0.05,
            seed: 0,
            flags: AblationFlags::default(),
            weights: LossWeights::default(),
            protocl: ProtoCLConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup fraction {} outside [0,1]", self.warmup_frac)));
        }
        self.protocl.validate()
    }

    /// The mask generator only exists on top of separate streams.
    pub fn effective_model(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.stream.enable_dual_stream = self.flags.ds;
        cfg.stream.enable_mask_generator = self.flags.ds && self.flags.mg;
        cfg
    }
}

/// One study prepared for the loop: decoded image plus its label matrix.
pub struct TrainStudy {
    pub study_id: String,
    pub image: ImageTensor,
    pub em: ExistenceMatrix,
}

/// Decode a split into memory, with labels resolved against the query set.
pub fn load_studies(corpus: &Corpus, split: Split, qs: &QuerySet) -> Result<Vec<TrainStudy>> {
    let by_study = corpus.triplets_by_study()?;
    let ids = corpus.split_ids(split);
    if ids.is_empty() {
        return Err(Error::Config("selected split is empty".into()));
    }
    ids.par_iter()
        .map(|id| {
            let triplets = by_study.get(id).map(Vec::as_slice).unwrap_or(&[]);
            Ok(TrainStudy {
                study_id: id.clone(),
                image: corpus.image(id)?,
                em: build_existence_matrix(id, triplets, qs)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLoss {
    pub step: usize,
    pub protocl: f64,
    pub icl: f64,
    pub exist: f64,
    pub total: f64,
}

pub struct PretrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub trace_path: PathBuf,
    pub trace: Vec<StepLoss>,
    /// Mean total loss per epoch.
    pub epoch_means: Vec<f64>,
}

/// Loss components for one image: (protocl, icl, exist), with disabled
/// components reported as 0, plus gradients aligned with the parameter
/// index.
type ImageResult = (Vec<Option<ArrayD<f64>>>, [f64; 3]);

fn image_pass(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    raw_a: &ndarray::Array2<f64>,
    raw_p: &ndarray::Array2<f64>,
    study: &TrainStudy,
    pcl_stream_index: u64,
) -> Result<ImageResult> {
    let mut t = Tape::new();
    let pv = params.register(&mut t);
    let (e_a, e_p) = project_queries_on_tape(&mut t, &pv, raw_a, raw_p);
    let fv = forward_on_tape(&mut t, &pv, &study.image, e_a, e_p, model_cfg)?;

    let pcl_term = if cfg.flags.pcl {
        let mut pcl_rng = rng::stream(cfg.seed, "protocl-negatives", pcl_stream_index);
        protocl_stream_loss_on_tape(
            &mut t,
            fv.r_a,
            fv.r_p,
            e_a,
            e_p,
            &study.em.l,
            &cfg.protocl,
            &mut pcl_rng,
        )?
    } else {
        None
    };
    let icl_term = if cfg.flags.icl {
        Some(icl_loss_on_tape(&mut t, fv.r_p, fv.r_a, &study.em.l, pv.var("icl.scale"))?)
    } else {
        None
    };
    let ep = exist_loss_on_tape(&mut t, fv.z_p, &study.em.y_pathology)?;
    let ea = exist_loss_on_tape(&mut t, fv.z_a, &study.em.y_anatomy)?;
    let sum = t.add(ep, ea);
    let exist_term = t.scale(sum, 0.5);

    let components = [
        pcl_term.map(|v| t.scalar_value(v)).unwrap_or(0.0),
        icl_term.map(|v| t.scalar_value(v)).unwrap_or(0.0),
        t.scalar_value(exist_term),
    ];
    for (name, v) in ["protocl", "icl", "exist"].iter().zip(components) {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "{name} loss diverged to {v} on study {}",
                study.study_id
            )));
        }
    }

    let mut objective = t.scale(exist_term, cfg.weights.exist);
    if let Some(p) = pcl_term {
        let weighted = t.scale(p, cfg.weights.protocl);
        objective = t.add(objective, weighted);
    }
    if let Some(c) = icl_term {
        let weighted = t.scale(c, cfg.weights.icl);
        objective = t.add(objective, weighted);
    }

    let mut grads = t.backward(objective);
    let per_param = pv.ordered().iter().map(|&v| grads.take(v)).collect();
    Ok((per_param, components))
}

/// Run the pre-training loop and write `checkpoint/`, `trace.csv`.
pub fn pretrain(
    cfg: &TrainConfig,
    base_model: &ModelConfig,
    provider_cfg: &ProviderConfig,
    corpus: &Corpus,
    qs: &QuerySet,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.effective_model(base_model);
    model_cfg.validate()?;
    let provider = build_provider(provider_cfg)?;
    if provider.dim() != model_cfg.d_t {
        return Err(Error::Compat(format!(
            "text provider width {} does not match the model's {}",
            provider.dim(),
            model_cfg.d_t
        )));
    }
    let (raw_a, raw_p) = raw_query_matrices(qs, provider.as_ref())?;
    let studies = load_studies(corpus, Split::Train, qs)?;

    let mut params = init_model_params(&model_cfg, cfg.seed)?;
    let n = studies.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = ((total_steps as f64) * cfg.warmup_frac).round() as usize;
    let mut optimizer = AdamW::new(&params, cfg.lr, cfg.weight_decay, warmup, total_steps);

    fs::create_dir_all(out_dir)?;
    let checkpoint_dir = out_dir.join("checkpoint");
    let trace_path = out_dir.join("trace.csv");
    let ckpt_config = CheckpointConfig {
        model: model_cfg.clone(),
        query_set: qs.clone(),
        provider: provider_cfg.clone(),
    };

    let mut header = String::from("step");
    if cfg.flags.pcl {
        header.push_str(",protocl");
    }
    if cfg.flags.icl {
        header.push_str(",icl");
    }
    header.push_str(",exist,total\n");
    let mut trace_text = header;
    let mut trace = Vec::with_capacity(total_steps);
    let mut epoch_means = Vec::with_capacity(cfg.epochs);

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, "train-shuffle", epoch as u64);
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<ImageResult> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let pcl_index = (epoch * n + (step % steps_per_epoch) * cfg.batch_size + slot) as u64;
                    image_pass(&params, &model_cfg, cfg, &raw_a, &raw_p, &studies[idx], pcl_index)
                })
                .collect::<Result<_>>()?;

            let inv = 1.0 / batch.len() as f64;
            let mut grad_sum: Vec<Option<ArrayD<f64>>> = vec![None; params.len()];
            let mut comp_sum = [0.0f64; 3];
            for (grads, comps) in results {
                for (slot, g) in grad_sum.iter_mut().zip(grads) {
                    match (slot.as_mut(), g) {
                        (Some(acc), Some(g)) => *acc += &g,
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
                for (s, c) in comp_sum.iter_mut().zip(comps) {
                    *s += c;
                }
            }
            for g in grad_sum.iter_mut().flatten() {
                g.mapv_inplace(|v| v * inv);
            }
            let report = total_loss(
                comp_sum[0] * inv,
                comp_sum[1] * inv,
                comp_sum[2] * inv,
                cfg.weights,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                other => other,
            })?;

            optimizer.apply(&mut params, &grad_sum);

            let mut row = format!("{step}");
            if cfg.flags.pcl {
                let _ = write!(row, ",{:.12e}", report.protocl);
            }
            if cfg.flags.icl {
                let _ = write!(row, ",{:.12e}", report.icl);
            }
            let _ = writeln!(row, ",{:.12e},{:.12e}", report.exist, report.total);
            trace_text.push_str(&row);
            trace.push(StepLoss {
                step,
                protocl: report.protocl,
                icl: report.icl,
                exist: report.exist,
                total: report.total,
            });
            epoch_total += report.total;
            step += 1;
        }
        epoch_means.push(epoch_total / steps_per_epoch as f64);
        save_checkpoint(&checkpoint_dir, &params, &ckpt_config)?;
        log::info!(
            "epoch {epoch}: mean total loss {:.6}",
            epoch_means.last().copied().unwrap_or(f64::NAN)
        );
    }

    fs::write(&trace_path, trace_text)?;
    Ok(PretrainOutcome { checkpoint_dir, trace_path, trace, epoch_means })
}
