//! Inference post-processing (binarisation, size filter, category voting,
//! NMS) and the metric suite: average precision over IoU thresholds,
//! coverage metrics, and detection AP over fitted axis-aligned boxes.

use crate::error::{Error, Result};
use crate::mask::{self, MaskSet};
use crate::mat::Mat;
use crate::net::{decode_head_logits, encode, generate_filters, logits_to_probs, Head, NetworkParams};
use crate::par;
use crate::rng::{derive_seed, hash_str};
use crate::scene::{farthest_point_sample, Scene};
use std::collections::BTreeMap;

/// Default NMS overlap threshold.
pub const NMS_IOU: f64 = 0.3;
/// Minimum foreground size at full scan scale.
pub const MIN_POINTS_FULL_SCALE: usize = 50;

/// Axis-aligned bounding box in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn volume(&self) -> f64 {
        (0..3).map(|d| (self.max[d] - self.min[d]).max(0.0)).product()
    }
}

/// Volume IoU of two boxes; 0 when the union is empty.
pub fn box_iou(a: &Aabb, b: &Aabb) -> f64 {
    let mut inter = 1.0;
    for d in 0..3 {
        let lo = a.min[d].max(b.min[d]);
        let hi = a.max[d].min(b.max[d]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Tight box around a binary mask's foreground points.
pub fn fit_box(coords: &[[f64; 3]], mask: &[f64]) -> Result<Aabb> {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for (c, m) in coords.iter().zip(mask) {
        if *m == 1.0 {
            any = true;
            for d in 0..3 {
                min[d] = min[d].min(c[d]);
                max[d] = max[d].max(c[d]);
            }
        }
    }
    if !any {
        return Err(Error::invalid("cannot fit a box to an empty mask"));
    }
    Ok(Aabb { min, max })
}

/// One finalised instance: binary mask, ranking score (mean foreground
/// probability), voted category, fitted box.
#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub mask: Vec<f64>,
    pub score: f64,
    pub category: u32,
    pub bbox: Aabb,
}

impl InstancePrediction {
    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|v| **v == 1.0).count()
    }
}

/// Greedy descending-score suppression: a prediction is dropped when its
/// mask IoU with any kept prediction exceeds `iou_threshold`. Ties in score
/// break by original index, so the result is deterministic.
pub fn nms(preds: Vec<InstancePrediction>, iou_threshold: f64) -> Vec<InstancePrediction> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|a, b| {
        preds[*b].score.partial_cmp(&preds[*a].score).expect("finite scores").then(a.cmp(b))
    });
    let mut kept: Vec<InstancePrediction> = Vec::new();
    for idx in order {
        let candidate = &preds[idx];
        let overlaps = kept
            .iter()
            .any(|k| mask::iou(&k.mask, &candidate.mask).expect("equal lengths") > iou_threshold);
        if !overlaps {
            kept.push(candidate.clone());
        }
    }
    kept
}

/// Desk-scale size filter: 50 points at full scan sizes, scaled down with
/// the point count and floored at 5.
pub fn scaled_min_points(n_points: usize) -> usize {
    let scaled = (MIN_POINTS_FULL_SCALE as f64 * n_points as f64 / 50_000.0).round() as usize;
    scaled.max(5)
}

/// Turns soft main-head masks into final instances: binarise at 0.5, drop
/// masks below `min_points`, vote the category from the semantic argmax
/// inside the mask, score by mean foreground probability, fit boxes, NMS.
pub fn finalize(
    main_preds: &MaskSet,
    sem_logits: &Mat,
    coords: &[[f64; 3]],
    min_points: usize,
    nms_iou: f64,
) -> Vec<InstancePrediction> {
    let sem_argmax: Vec<u32> = (0..sem_logits.rows())
        .map(|i| {
            let row = sem_logits.row(i);
            let mut best = 0usize;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();

    let mut out = Vec::new();
    for k in 0..main_preds.len() {
        let soft = main_preds.row(k);
        let mask = mask::binarize_row(soft);
        let fg: Vec<usize> =
            mask.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect();
        if fg.len() < min_points.max(1) {
            continue;
        }
        let score = fg.iter().map(|i| soft[*i]).sum::<f64>() / fg.len() as f64;
        // Majority semantic vote, ties toward the lowest class id.
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in &fg {
            *votes.entry(sem_argmax[i]).or_insert(0) += 1;
        }
        let category =
            votes.iter().max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c))).map(|(c, _)| *c)
                .unwrap_or(0);
        let bbox = fit_box(coords, &mask).expect("nonempty after size filter");
        out.push(InstancePrediction { mask, score, category, bbox });
    }
    nms(out, nms_iou)
}

/// Ground truth of one scene in metric-ready form.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub masks: MaskSet,
    pub classes: Vec<u32>,
    pub boxes: Vec<Aabb>,
}

pub fn ground_truth_of(scene: &Scene) -> GroundTruth {
    let masks = scene.instance_masks();
    let classes = scene.instance_classes();
    let boxes = (0..masks.len())
        .map(|t| fit_box(scene.coords(), masks.row(t)).expect("instances are nonempty"))
        .collect();
    GroundTruth { masks, classes, boxes }
}

/// The ScanNet-style threshold grid 0.50:0.05:0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Pairwise IoU used by AP: mask IoU or box IoU.
enum MatchGeometry<'a> {
    Masks(&'a [Vec<InstancePrediction>], &'a [GroundTruth]),
    Boxes(&'a [Vec<InstancePrediction>], &'a [GroundTruth]),
}

impl MatchGeometry<'_> {
    fn iou(&self, scene: usize, pred: usize, gt: usize) -> f64 {
        match self {
            MatchGeometry::Masks(preds, gts) => {
                mask::iou(&preds[scene][pred].mask, gts[scene].masks.row(gt))
                    .expect("equal lengths")
            }
            MatchGeometry::Boxes(preds, gts) => {
                box_iou(&preds[scene][pred].bbox, &gts[scene].boxes[gt])
            }
        }
    }
}

/// All-point interpolated AP for one class at one IoU threshold.
fn ap_single(
    geometry: &MatchGeometry,
    preds: &[Vec<InstancePrediction>],
    gts: &[GroundTruth],
    class: u32,
    threshold: f64,
) -> f64 {
    let total_gt: usize =
        gts.iter().map(|g| g.classes.iter().filter(|c| **c == class).count()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    // Global score order, stable under reordering via (scene, index) ties.
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (s, scene_preds) in preds.iter().enumerate() {
        for (p, pred) in scene_preds.iter().enumerate() {
            if pred.category == class {
                entries.push((pred.score, s, p));
            }
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("finite scores").then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.classes.len()]).collect();
    let mut tps: Vec<bool> = Vec::with_capacity(entries.len());
    for (_, s, p) in &entries {
        let gt = &gts[*s];
        let mut best: Option<(usize, f64)> = None;
        for t in 0..gt.classes.len() {
            if gt.classes[t] != class || matched[*s][t] {
                continue;
            }
            let iou = geometry.iou(*s, *p, t);
            if iou >= threshold && best.map_or(true, |(_, bi)| iou > bi) {
                best = Some((t, iou));
            }
        }
        match best {
            Some((t, _)) => {
                matched[*s][t] = true;
                tps.push(true);
            }
            None => tps.push(false),
        }
    }

    // Precision-recall sweep with the monotone precision envelope.
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tps.len());
    for (rank, is_tp) in tps.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / total_gt as f64;
        points.push((recall, precision));
    }
    // Area under the precision envelope (all-point interpolation).
    let mut ap = 0.0;
    let mut envelope = vec![0.0f64; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        envelope[i] = running;
    }
    let mut last_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > last_recall {
            ap += (recall - last_recall) * envelope[i];
            last_recall = recall;
        }
    }
    ap
}

/// Per-class AP rows of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class: u32,
    /// `(iou_threshold, ap)` over the mAP grid plus 0.25.
    pub ap_at: Vec<(f64, f64)>,
}

/// The full metric suite over one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub mcov: f64,
    pub mwcov: f64,
    pub mprec: f64,
    pub mrec: f64,
    pub detection_ap50: f64,
}

fn gt_classes(gts: &[GroundTruth]) -> Vec<u32> {
    let mut classes: Vec<u32> = gts.iter().flat_map(|g| g.classes.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Mask AP over the threshold grid; per-class values plus the three
/// headline numbers.
pub fn average_precision(
    preds: &[Vec<InstancePrediction>],
    gts: &[GroundTruth],
) -> (Vec<ClassAp>, f64, f64, f64) {
    let classes = gt_classes(gts);
    let grid = map_thresholds();
    let geometry = MatchGeometry::Masks(preds, gts);
    let per_class: Vec<ClassAp> = classes
        .iter()
        .map(|&class| {
            let mut ap_at: Vec<(f64, f64)> =
                vec![(0.25, ap_single(&geometry, preds, gts, class, 0.25))];
            for &thr in &grid {
                ap_at.push((thr, ap_single(&geometry, preds, gts, class, thr)));
            }
            ClassAp { class, ap_at }
        })
        .collect();
    if per_class.is_empty() {
        return (per_class, 0.0, 0.0, 0.0);
    }
    fn mean_at(per_class: &[ClassAp], thr: f64) -> f64 {
        per_class
            .iter()
            .map(|c| c.ap_at.iter().find(|(t, _)| *t == thr).expect("grid value").1)
            .sum::<f64>()
            / per_class.len() as f64
    }
    let map = grid.iter().map(|&t| mean_at(&per_class, t)).sum::<f64>() / grid.len() as f64;
    let ap50 = mean_at(&per_class, 0.50);
    let ap25 = mean_at(&per_class, 0.25);
    (per_class, map, ap50, ap25)
}

/// Coverage metrics: mCov/mWCov average per-scene over ground-truth
/// instances (class-agnostic best IoU); mPrec/mRec count class-aware greedy
/// matches at IoU >= 0.5 over the whole dataset. Empty predictions report 0.
pub fn coverage_metrics(
    preds: &[Vec<InstancePrediction>],
    gts: &[GroundTruth],
) -> (f64, f64, f64, f64) {
    let mut cov_scenes = Vec::new();
    let mut wcov_scenes = Vec::new();
    let mut tp = 0usize;
    let mut total_preds = 0usize;
    let mut total_gt = 0usize;
    for (scene_preds, gt) in preds.iter().zip(gts) {
        let t_count = gt.classes.len();
        total_gt += t_count;
        total_preds += scene_preds.len();
        if t_count > 0 {
            let sizes: Vec<f64> = (0..t_count)
                .map(|t| gt.masks.row(t).iter().filter(|v| **v == 1.0).count() as f64)
                .collect();
            let size_total: f64 = sizes.iter().sum();
            let best: Vec<f64> = (0..t_count)
                .map(|t| {
                    scene_preds
                        .iter()
                        .map(|p| mask::iou(&p.mask, gt.masks.row(t)).expect("equal lengths"))
                        .fold(0.0, f64::max)
                })
                .collect();
            cov_scenes.push(best.iter().sum::<f64>() / t_count as f64);
            wcov_scenes.push(
                best.iter().zip(&sizes).map(|(b, s)| b * s / size_total).sum::<f64>(),
            );
        }
        // Greedy class-aware matching at 0.5 for precision/recall.
        let mut order: Vec<usize> = (0..scene_preds.len()).collect();
        order.sort_by(|a, b| {
            scene_preds[*b]
                .score
                .partial_cmp(&scene_preds[*a].score)
                .expect("finite scores")
                .then(a.cmp(b))
        });
        let mut used = vec![false; t_count];
        for p in order {
            let pred = &scene_preds[p];
            let mut best: Option<(usize, f64)> = None;
            for t in 0..t_count {
                if used[t] || gt.classes[t] != pred.category {
                    continue;
                }
                let iou = mask::iou(&pred.mask, gt.masks.row(t)).expect("equal lengths");
                if iou >= 0.5 && best.map_or(true, |(_, bi)| iou > bi) {
                    best = Some((t, iou));
                }
            }
            if let Some((t, _)) = best {
                used[t] = true;
                tp += 1;
            }
        }
    }
    let mcov = if cov_scenes.is_empty() {
        0.0
    } else {
        cov_scenes.iter().sum::<f64>() / cov_scenes.len() as f64
    };
    let mwcov = if wcov_scenes.is_empty() {
        0.0
    } else {
        wcov_scenes.iter().sum::<f64>() / wcov_scenes.len() as f64
    };
    let mprec = if total_preds == 0 { 0.0 } else { tp as f64 / total_preds as f64 };
    let mrec = if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 };
    (mcov, mwcov, mprec, mrec)
}

/// Detection AP@50 over fitted axis-aligned boxes.
pub fn detection_ap(preds: &[Vec<InstancePrediction>], gts: &[GroundTruth]) -> f64 {
    let classes = gt_classes(gts);
    if classes.is_empty() {
        return 0.0;
    }
    let geometry = MatchGeometry::Boxes(preds, gts);
    classes.iter().map(|&c| ap_single(&geometry, preds, gts, c, 0.5)).sum::<f64>()
        / classes.len() as f64
}

/// Runs the whole metric suite.
pub fn evaluate(preds: &[Vec<InstancePrediction>], gts: &[GroundTruth]) -> EvalReport {
    let (per_class, map, ap50, ap25) = average_precision(preds, gts);
    let (mcov, mwcov, mprec, mrec) = coverage_metrics(preds, gts);
    let detection_ap50 = detection_ap(preds, gts);
    EvalReport { per_class, map, ap50, ap25, mcov, mwcov, mprec, mrec, detection_ap50 }
}

/// Full inference for one scene with a trained model: sample, decode the
/// main head, finalise. The sampling seed derives from the scene id so
/// results do not depend on dataset order.
pub fn infer_scene(
    scene: &Scene,
    params: &NetworkParams,
    k_samples: usize,
    seed: u64,
    nms_iou: f64,
) -> Result<Vec<InstancePrediction>> {
    let k = k_samples.min(scene.len());
    let samples = farthest_point_sample(scene, k, derive_seed(seed, hash_str(&scene.id)))?;
    let enc = encode(scene, params);
    let filters = generate_filters(params, &enc.f_b, &samples, Head::Main);
    let logits = decode_head_logits(scene, &enc.f_m, &samples, &filters, &params.cfg);
    let probs = logits_to_probs(&logits);
    Ok(finalize(
        &probs,
        &enc.sem_logits,
        scene.coords(),
        scaled_min_points(scene.len()),
        nms_iou,
    ))
}

/// Inference over a dataset, parallel across scenes with a deterministic
/// merge.
pub fn infer_dataset(
    scenes: &[Scene],
    params: &NetworkParams,
    k_samples: usize,
    seed: u64,
    nms_iou: f64,
) -> Result<Vec<Vec<InstancePrediction>>> {
    par::map_indexed(scenes.len(), |i| infer_scene(&scenes[i], params, k_samples, seed, nms_iou))
        .into_iter()
        .collect()
}
