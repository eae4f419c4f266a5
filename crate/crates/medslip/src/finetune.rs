//! Supervised adaptation of a pre-trained checkpoint: an end-to-end linear
//! probe for classification and a U-Net style decoder for segmentation.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode_on_tape, stage_channels, EncodedImage, ImageTensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{classification_report, dice_iou, MetricReport};
use crate::params::{AdamW, ParamSet, ParamVars};
use crate::rng;
use crate::synth::{Corpus, Split};
use crate::tape::{Tape, Var};
use crate::train::{load_studies, TrainStudy};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 16,
            epochs: 20,
            lr: 3e-4,
            weight_decay: 1e-4,
            warmup_frac: 0.05,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Pick `ceil(fraction * n)` study indices, deterministic in the seed.
/// Returned indices are sorted ascending.
pub fn sample_fraction(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction.is_finite() && fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * n as f64).ceil() as usize;
    if k == 0 {
        return Err(Error::Input(format!("fraction {fraction} of {n} studies selects none")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, "finetune-sample", 0);
    for i in 0..k {
        let j = r.gen_range(i..n);
        order.swap(i, j);
    }
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn keep_indices<T>(items: Vec<T>, sorted_indices: &[usize]) -> Vec<T> {
    let mut keep = vec![false; items.len()];
    for &i in sorted_indices {
        keep[i] = true;
    }
    items
        .into_iter()
        .zip(keep)
        .filter_map(|(item, k)| k.then_some(item))
        .collect()
}

/// One image pass: scalar loss plus gradients aligned with the parameter
/// index.
type PassResult = (Vec<Option<ArrayD<f64>>>, f64);

/// Mini-batch AdamW loop shared by both heads; returns per-epoch mean loss.
fn run_epochs<S: Sync>(
    params: &mut ParamSet,
    studies: &[S],
    cfg: &FinetuneConfig,
    pass: impl Fn(&ParamSet, &S) -> Result<PassResult> + Sync,
) -> Result<Vec<f64>> {
    let n = studies.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = ((total_steps as f64) * cfg.warmup_frac).round() as usize;
    let mut optimizer = AdamW::new(params, cfg.lr, cfg.weight_decay, warmup, total_steps);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, "finetune-shuffle", epoch as u64);
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<PassResult> = batch
                .par_iter()
                .map(|&idx| pass(params, &studies[idx]))
                .collect::<Result<_>>()?;

            let inv = 1.0 / batch.len() as f64;
            let mut grad_sum: Vec<Option<ArrayD<f64>>> = vec![None; params.len()];
            for (grads, loss) in results {
                epoch_total += loss;
                for (slot, g) in grad_sum.iter_mut().zip(grads) {
                    match (slot.as_mut(), g) {
                        (Some(acc), Some(g)) => *acc += &g,
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
            }
            for g in grad_sum.iter_mut().flatten() {
                *g *= inv;
            }
            optimizer.apply(params, &grad_sum);
        }
        epoch_losses.push(epoch_total / n as f64);
    }
    Ok(epoch_losses)
}

// -- classification -----------------------------------------------------------

pub struct ClassifierOutcome {
    pub params: ParamSet,
    pub report: MetricReport,
    pub train_count: usize,
    pub epoch_losses: Vec<f64>,
}

fn classifier_logits(
    t: &mut Tape,
    pv: &ParamVars,
    enc: &EncodedImage,
) -> Var {
    let &(last, _) = enc.stages.last().expect("backbone has stages");
    let pooled = t.global_avg_pool(last);
    let z = t.matvec(pv.var("classifier.weight"), pooled);
    t.add(z, pv.var("classifier.bias"))
}

fn classify_pass(
    params: &ParamSet,
    cfg: &crate::backbone::BackboneConfig,
    study: &TrainStudy,
) -> Result<PassResult> {
    let mut t = Tape::new();
    let pv = params.register(&mut t);
    let enc = encode_on_tape(&mut t, &pv, &study.image, cfg)?;
    let z = classifier_logits(&mut t, &pv, &enc);
    let loss = t.bce_with_logits_mean(z, &study.em.y_pathology.clone().into_dyn());
    let v = t.scalar_value(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "classifier loss diverged to {v} on study {}",
            study.study_id
        )));
    }
    let mut grads = t.backward(loss);
    Ok((pv.ordered().iter().map(|&var| grads.take(var)).collect(), v))
}

/// Existence probabilities from the fine-tuned head, one row per study.
pub fn classifier_scores(
    params: &ParamSet,
    cfg: &crate::backbone::BackboneConfig,
    images: &[ImageTensor],
    m: usize,
) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> = images
        .par_iter()
        .map(|img| {
            let mut t = Tape::new();
            let pv = params.register(&mut t);
            let enc = encode_on_tape(&mut t, &pv, img, cfg)?;
            let z = classifier_logits(&mut t, &pv, &enc);
            let s = t.sigmoid(z);
            Ok(Array1::from_iter(t.value(s).iter().copied()))
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), m));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// Train a linear head over pooled backbone features on a labeled fraction
/// of the train split, end to end, and report test-split metrics.
pub fn finetune_classifier(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    fraction: f64,
    cfg: &FinetuneConfig,
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    let qs = &ckpt.config.query_set;
    let bb_cfg = &ckpt.config.model.backbone;
    let m = qs.pathology_terms.len();

    let all = load_studies(corpus, Split::Train, qs)?;
    let picked = sample_fraction(all.len(), fraction, cfg.seed)?;
    let train = keep_indices(all, &picked);
    let train_count = train.len();

    let mut params = ckpt.params.clone();
    let mut r = rng::stream(cfg.seed, "finetune-head-init", 0);
    let std = (2.0 / (m + bb_cfg.d_v) as f64).sqrt();
    let w = ArrayD::from_shape_simple_fn(IxDyn(&[m, bb_cfg.d_v]), || {
        r.sample::<f64, _>(StandardNormal) * std
    });
    params.insert("classifier.weight", w)?;
    params.insert("classifier.bias", ArrayD::zeros(IxDyn(&[m])))?;

    let epoch_losses =
        run_epochs(&mut params, &train, cfg, |p, s| classify_pass(p, bb_cfg, s))?;

    let test = load_studies(corpus, Split::Test, qs)?;
    let images: Vec<ImageTensor> = test.iter().map(|s| s.image.clone()).collect();
    let scores = classifier_scores(&params, bb_cfg, &images, m)?;
    let mut labels = Array2::zeros((test.len(), m));
    for (i, s) in test.iter().enumerate() {
        labels.row_mut(i).assign(&s.em.y_pathology);
    }
    let report = classification_report(&scores, &labels, &qs.pathology_terms, 0.5)?;
    Ok(ClassifierOutcome { params, report, train_count, epoch_losses })
}

// -- segmentation ---------------------------------------------------------------

/// A study paired with the union of its positive-region masks.
pub struct SegStudy {
    pub study_id: String,
    pub image: ImageTensor,
    pub mask: Array2<f64>,
}

/// Load a split with per-study union masks; studies without findings get an
/// all-background mask.
pub fn load_seg_studies(corpus: &Corpus, split: Split) -> Result<Vec<SegStudy>> {
    let regions = corpus.regions()?;
    let ids = corpus.split_ids(split);
    if ids.is_empty() {
        return Err(Error::Config("selected split is empty".into()));
    }
    ids.par_iter()
        .map(|id| {
            let image = corpus.image(id)?;
            let mut mask = Array2::zeros((image.h(), image.w()));
            for entry in regions.get(id).map(Vec::as_slice).unwrap_or(&[]) {
                let m = corpus.load_region_mask(entry)?;
                if m.dim() != mask.dim() {
                    return Err(Error::Shape(format!(
                        "mask {} is {:?}, image is {:?}",
                        entry.mask_file,
                        m.dim(),
                        mask.dim()
                    )));
                }
                mask.zip_mut_with(&m, |a, &b| {
                    if b != 0 {
                        *a = 1.0;
                    }
                });
            }
            Ok(SegStudy { study_id: id.clone(), image, mask })
        })
        .collect()
}

fn init_decoder_params(params: &mut ParamSet, d_v: usize, seed: u64) -> Result<()> {
    let ch = stage_channels(d_v);
    let (s2c, s3c) = (ch[1], ch[2]);
    let specs: [(&str, usize, usize); 4] = [
        ("seg.dec1", s3c, d_v + s3c),
        ("seg.dec2", s2c, s3c + s2c),
        ("seg.refine", 16, s2c),
        ("seg.out", 1, 16),
    ];
    for (i, (name, oc, ic)) in specs.iter().enumerate() {
        let mut r = rng::stream(seed, "finetune-decoder-init", i as u64);
        let std = (2.0 / ((ic + oc) * 9) as f64).sqrt();
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[*oc, *ic, 3, 3]), || {
            r.sample::<f64, _>(StandardNormal) * std
        });
        params.insert(&format!("{name}.weight"), w)?;
        params.insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[*oc])))?;
    }
    Ok(())
}

/// U-Net style decoder over the backbone pyramid: the deepest map is
/// upsampled and fused with the stride-8 then stride-4 skips, then refined
/// at full resolution into single-channel logits.
fn decode_on_tape(
    t: &mut Tape,
    pv: &ParamVars,
    enc: &EncodedImage,
    h: usize,
    w: usize,
) -> Var {
    let dims = |t: &Tape, v: Var| {
        let s = t.value(v).shape();
        (s[1], s[2])
    };
    let (s2, _) = enc.stages[1];
    let (s3, _) = enc.stages[2];
    let (s4, _) = enc.stages[3];

    let up = t.upsample_nearest2(s4);
    let (h3, w3) = dims(t, s3);
    let up = t.crop_hw(up, h3, w3);
    let cat = t.concat_channels(up, s3);
    let c = t.conv2d(cat, pv.var("seg.dec1.weight"), pv.var("seg.dec1.bias"), 1, 1);
    let d1 = t.tanh(c);

    let up = t.upsample_nearest2(d1);
    let (h2, w2) = dims(t, s2);
    let up = t.crop_hw(up, h2, w2);
    let cat = t.concat_channels(up, s2);
    let c = t.conv2d(cat, pv.var("seg.dec2.weight"), pv.var("seg.dec2.bias"), 1, 1);
    let d2 = t.tanh(c);

    let up = t.upsample_nearest2(d2);
    let up = t.upsample_nearest2(up);
    let up = t.crop_hw(up, h, w);
    let c = t.conv2d(up, pv.var("seg.refine.weight"), pv.var("seg.refine.bias"), 1, 1);
    let refined = t.tanh(c);
    t.conv2d(refined, pv.var("seg.out.weight"), pv.var("seg.out.bias"), 1, 1)
}

fn segment_pass(
    params: &ParamSet,
    cfg: &crate::backbone::BackboneConfig,
    study: &SegStudy,
) -> Result<PassResult> {
    let mut t = Tape::new();
    let pv = params.register(&mut t);
    let enc = encode_on_tape(&mut t, &pv, &study.image, cfg)?;
    let logits = decode_on_tape(&mut t, &pv, &enc, study.image.h(), study.image.w());
    let probs = t.sigmoid(logits);
    let target = study.mask.clone().insert_axis(Axis(0)).into_dyn();
    let loss = t.dice_loss(probs, &target, 1.0);
    let v = t.scalar_value(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "segmentation loss diverged to {v} on study {}",
            study.study_id
        )));
    }
    let mut grads = t.backward(loss);
    Ok((pv.ordered().iter().map(|&var| grads.take(var)).collect(), v))
}

/// Predicted foreground mask at probability threshold 0.5.
pub fn predict_mask(
    params: &ParamSet,
    cfg: &crate::backbone::BackboneConfig,
    image: &ImageTensor,
) -> Result<Array2<u8>> {
    let mut t = Tape::new();
    let pv = params.register(&mut t);
    let enc = encode_on_tape(&mut t, &pv, image, cfg)?;
    let logits = decode_on_tape(&mut t, &pv, &enc, image.h(), image.w());
    let probs = t.sigmoid(logits);
    let p = t.value(probs);
    let mut out = Array2::zeros((image.h(), image.w()));
    for ((_, y, x), &v) in p
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("decoder output is (1,H,W)")
        .indexed_iter()
    {
        out[[y, x]] = u8::from(v >= 0.5);
    }
    Ok(out)
}

pub struct SegmenterOutcome {
    pub params: ParamSet,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub train_count: usize,
    pub epoch_losses: Vec<f64>,
}

/// Train the decoder (and backbone) with Dice loss on a labeled fraction of
/// the train split; report mean test-split Dice and IoU.
pub fn finetune_segmenter(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    fraction: f64,
    cfg: &FinetuneConfig,
) -> Result<SegmenterOutcome> {
    cfg.validate()?;
    let bb_cfg = &ckpt.config.model.backbone;
    if bb_cfg.stage_strides != [2, 2, 2, 2] {
        return Err(Error::Config(
            "the segmentation decoder requires stride-2 backbone stages".into(),
        ));
    }

    let all = load_seg_studies(corpus, Split::Train)?;
    let picked = sample_fraction(all.len(), fraction, cfg.seed)?;
    let train = keep_indices(all, &picked);
    let train_count = train.len();

    let mut params = ckpt.params.clone();
    init_decoder_params(&mut params, bb_cfg.d_v, cfg.seed)?;

    let epoch_losses =
        run_epochs(&mut params, &train, cfg, |p, s| segment_pass(p, bb_cfg, s))?;

    let test = load_seg_studies(corpus, Split::Test)?;
    let pairs: Vec<(f64, f64)> = test
        .par_iter()
        .map(|s| {
            let pred = predict_mask(&params, bb_cfg, &s.image)?;
            let gt = s.mask.mapv(|v| u8::from(v != 0.0));
            dice_iou(&pred, &gt)
        })
        .collect::<Result<_>>()?;
    let count = pairs.len() as f64;
    let (dice_sum, iou_sum) = pairs
        .iter()
        .fold((0.0, 0.0), |(d, i), &(dd, ii)| (d + dd, i + ii));
    Ok(SegmenterOutcome {
        params,
        mean_dice: dice_sum / count,
        mean_iou: iou_sum / count,
        train_count,
        epoch_losses,
    })
}
