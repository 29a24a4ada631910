//! Training loop: the two-term mask loss with decaying auxiliary weight,
//! semantic cross-entropy, the three target-assignment strategies and a
//! warm-up period during which the main head sits out (or trains statically,
//! matching the no-aux variant).
//!
//! The optimal-transport assignment is treated as a constant during
//! backprop: it selects targets, it does not carry gradient.

use crate::error::{Error, Result};
use crate::mask::{self, MaskSet};
use crate::mat::Mat;
use crate::net::{
    backward, decode_head_logits, encode, forward_heads, generate_filters, logits_to_probs,
    DynamicFilterSet, ForwardTrace, Head, HeadOutputs, NetConfig, NetworkParams, OutputGrads,
};
use crate::ot::{solve_assignment, OtConfig};
use crate::rng::{derive_seed, rng_for};
use crate::scene::{farthest_point_sample_from, random_sample, SampleMethod, SampleSet, Scene};
use rand::Rng;

/// How main-head targets are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Target = the sampled point's own instance label.
    Static,
    /// Positive/negative/ignored by predicted-center distance radii.
    CenterPrior,
    /// Optimal-transport calibration from the cost head's predictions.
    DynamicOt,
}

impl Strategy {
    pub fn parse(name: &str) -> Result<Strategy> {
        match name {
            "static" => Ok(Strategy::Static),
            "center_prior" => Ok(Strategy::CenterPrior),
            "dynamic_ot" => Ok(Strategy::DynamicOt),
            other => Err(Error::invalid(format!(
                "unknown strategy `{other}`; valid: static, center_prior, dynamic_ot"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Static => "static",
            Strategy::CenterPrior => "center_prior",
            Strategy::DynamicOt => "dynamic_ot",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Train the auxiliary head (and use it for OT costs).
    pub use_aux: bool,
    pub k_samples: usize,
    pub sample_method: SampleMethod,
    pub w_a_init: f64,
    pub w_a_decay: f64,
    /// Steps per decay application; 1 decays every step.
    pub w_a_decay_period: usize,
    pub warmup_steps: usize,
    /// During warm-up, train the main head with static targets instead of
    /// excluding its loss (the no-aux dynamic variant needs this).
    pub warmup_main_static: bool,
    pub total_steps: usize,
    pub lr: f64,
    /// Polynomial decay power: `lr * (1 - step/total)^power`.
    pub lr_power: f64,
    pub seed: u64,
    pub cost_binarize: bool,
    pub sinkhorn_eps: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    /// Center-prior radii (meters).
    pub r_pos: f64,
    pub r_neg: f64,
    pub semantic_weight: f64,
    pub offset_weight: f64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::DynamicOt,
            use_aux: true,
            k_samples: 16,
            sample_method: SampleMethod::Fps,
            w_a_init: 1.0,
            w_a_decay: 0.99,
            w_a_decay_period: 1,
            warmup_steps: 300,
            warmup_main_static: false,
            total_steps: 2000,
            lr: 1e-3,
            lr_power: 0.9,
            seed: 0,
            cost_binarize: false,
            sinkhorn_eps: 0.1,
            sinkhorn_max_iter: 500,
            sinkhorn_tol: 1e-6,
            r_pos: 0.3,
            r_neg: 0.6,
            semantic_weight: 1.0,
            offset_weight: 1.0,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.w_a_decay > 0.0 && self.w_a_decay <= 1.0) {
            return Err(Error::invalid(format!("w_a decay {} outside (0, 1]", self.w_a_decay)));
        }
        if self.r_pos >= self.r_neg {
            return Err(Error::invalid(format!(
                "r_pos {} must be below r_neg {}",
                self.r_pos, self.r_neg
            )));
        }
        if self.k_samples == 0 {
            return Err(Error::invalid("k_samples must be at least 1"));
        }
        if self.w_a_decay_period == 0 {
            return Err(Error::invalid("w_a decay period must be at least 1"));
        }
        Ok(())
    }

    pub fn ot_config(&self) -> OtConfig {
        OtConfig {
            eps: self.sinkhorn_eps,
            max_iter: self.sinkhorn_max_iter,
            tol: self.sinkhorn_tol,
            cost_binarize: self.cost_binarize,
        }
    }

    /// `w_a` at a given step: `w_a_init * decay^(step / period)`.
    pub fn w_a_at(&self, step: usize) -> f64 {
        self.w_a_init * self.w_a_decay.powi((step / self.w_a_decay_period) as i32)
    }

    /// Polynomial learning-rate schedule.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let frac = 1.0 - step as f64 / self.total_steps as f64;
        self.lr * frac.max(0.0).powf(self.lr_power)
    }
}

/// One sampled point's training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSpec {
    /// Row index into the scene's instance mask set.
    Instance(usize),
    /// Train toward the zero mask (complemented Dice form).
    Background,
    /// Excluded from the loss (center-prior middle band).
    Ignored,
}

/// Per-step diagnostics. `loss_total` is exactly
/// `w_a * loss_aux + loss_main + loss_semantic + loss_offset`, where the
/// semantic and offset terms are already weighted and the offset term is
/// zero for strategies without the offset head.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss_total: f64,
    pub loss_aux: f64,
    pub loss_main: f64,
    pub loss_semantic: f64,
    pub loss_offset: f64,
    pub w_a: f64,
    pub n_background_assigned: usize,
    pub sinkhorn_converged: bool,
}

/// Static assignment: each sampled point owns the mask of its instance
/// label; unlabeled points own the background.
pub fn static_targets(scene: &Scene, samples: &SampleSet) -> Vec<TargetSpec> {
    let ids = scene.instance_ids();
    samples
        .indices
        .iter()
        .map(|&i| {
            let inst = scene.instance()[i];
            if inst < 0 {
                TargetSpec::Background
            } else {
                let row = ids.binary_search(&inst).expect("label appears in instance_ids");
                TargetSpec::Instance(row)
            }
        })
        .collect()
}

/// Center-prior assignment: shift each sampled point by its predicted
/// offset; close to its instance centroid -> positive, far -> background,
/// otherwise ignored.
pub fn center_prior_targets(
    scene: &Scene,
    samples: &SampleSet,
    predicted_offsets: &Mat,
    r_pos: f64,
    r_neg: f64,
) -> Vec<TargetSpec> {
    let ids = scene.instance_ids();
    let true_offsets = scene.centroid_offsets();
    samples
        .indices
        .iter()
        .map(|&i| {
            let inst = scene.instance()[i];
            if inst < 0 {
                return TargetSpec::Background;
            }
            // |point + predicted - centroid| = |predicted - true offset|.
            let mut d2 = 0.0;
            for d in 0..3 {
                let diff = predicted_offsets.at(i, d) - true_offsets[i][d];
                d2 += diff * diff;
            }
            let dist = d2.sqrt();
            if dist <= r_pos {
                let row = ids.binary_search(&inst).expect("label appears in instance_ids");
                TargetSpec::Instance(row)
            } else if dist > r_neg {
                TargetSpec::Background
            } else {
                TargetSpec::Ignored
            }
        })
        .collect()
}

/// Targets calibrated by the optimal-transport plan over `cost_preds`.
/// Returns the per-point specs and whether Sinkhorn converged.
pub fn calibrate_targets(
    cost_preds: &MaskSet,
    masks: &MaskSet,
    ot: &OtConfig,
) -> Result<(Vec<TargetSpec>, bool)> {
    if masks.is_empty() {
        return Ok((vec![TargetSpec::Background; cost_preds.len()], true));
    }
    let (_, plan, assignment) = solve_assignment(cost_preds, masks, ot)?;
    let specs = assignment
        .target_of
        .iter()
        .zip(&assignment.is_background)
        .map(|(t, bg)| if *bg { TargetSpec::Background } else { TargetSpec::Instance(*t) })
        .collect();
    Ok((specs, plan.converged))
}

/// Dice-style loss of one head against its per-point targets, plus
/// d(loss)/d(logit). Background points use the complemented-mask form.
fn head_loss(
    preds: &MaskSet,
    targets: &[TargetSpec],
    masks: &MaskSet,
    weight: f64,
) -> Result<(f64, Mat)> {
    let n = preds.n_points();
    let zeros = vec![0.0; n];
    let mut total = 0.0;
    let mut dlogits = Mat::zeros(preds.len(), n);
    for (k, spec) in targets.iter().enumerate() {
        let p = preds.row(k);
        let (loss, dldp) = match spec {
            TargetSpec::Instance(t) => mask::dice_loss_grad(masks.row(*t), p)?,
            TargetSpec::Background => mask::background_cost_grad(&zeros, p)?,
            TargetSpec::Ignored => continue,
        };
        total += loss;
        let row = dlogits.row_mut(k);
        for (i, g) in dldp.iter().enumerate() {
            let prob = p[i];
            row[i] = weight * g * prob * (1.0 - prob);
        }
    }
    Ok((total, dlogits))
}

/// Mean per-point softmax cross-entropy and its logit gradient (both already
/// multiplied by `weight`).
fn semantic_loss(sem_logits: &Mat, labels: &[u32], weight: f64) -> (f64, Mat) {
    let n = sem_logits.rows();
    let classes = sem_logits.cols();
    let mut total = 0.0;
    let mut grad = Mat::zeros(n, classes);
    for i in 0..n {
        let z = sem_logits.row(i);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + sum.ln();
        let y = labels[i] as usize;
        total += log_z - z[y];
        let g = grad.row_mut(i);
        for (c, gv) in g.iter_mut().enumerate() {
            let softmax = (z[c] - log_z).exp();
            *gv = weight * (softmax - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (weight * total / n as f64, grad)
}

/// Smooth-L1 toward the centroid offsets, averaged over labeled points.
fn offset_loss(offsets_pred: &Mat, scene: &Scene, weight: f64) -> (f64, Mat) {
    let targets = scene.centroid_offsets();
    let labeled: Vec<usize> =
        (0..scene.len()).filter(|i| scene.instance()[*i] >= 0).collect();
    let mut grad = Mat::zeros(scene.len(), 3);
    if labeled.is_empty() {
        return (0.0, grad);
    }
    let count = labeled.len() as f64;
    let mut total = 0.0;
    for &i in &labeled {
        for d in 0..3 {
            let diff = offsets_pred.at(i, d) - targets[i][d];
            let (l, g) = if diff.abs() <= 1.0 {
                (0.5 * diff * diff, diff)
            } else {
                (diff.abs() - 0.5, diff.signum())
            };
            total += l;
            *grad.at_mut(i, d) = weight * g / count;
        }
    }
    (weight * total / count, grad)
}

/// What enters this step's loss.
#[derive(Debug, Clone)]
pub struct LossSpec<'a> {
    pub aux_targets: Option<&'a [TargetSpec]>,
    pub main_targets: Option<&'a [TargetSpec]>,
    pub w_a: f64,
    pub semantic_weight: f64,
    /// Zero disables the offset head entirely.
    pub offset_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub aux: f64,
    pub main: f64,
    pub semantic: f64,
    pub offset: f64,
    pub total: f64,
}

/// Loss of one forward pass against fixed targets, with output-side
/// gradients. Targets are constants here, which is exactly the gradient-flow
/// isolation the assignment step requires.
pub fn loss_with_targets(
    scene: &Scene,
    masks: &MaskSet,
    out: &HeadOutputs,
    spec: &LossSpec,
) -> Result<(LossBreakdown, OutputGrads)> {
    let mut grads = OutputGrads::default();
    let mut aux = 0.0;
    let mut main = 0.0;
    if let Some(targets) = spec.aux_targets {
        let (l, d) = head_loss(&out.aux_preds, targets, masks, spec.w_a)?;
        aux = l;
        grads.dlogits_aux = Some(d);
    }
    if let Some(targets) = spec.main_targets {
        let (l, d) = head_loss(&out.main_preds, targets, masks, 1.0)?;
        main = l;
        grads.dlogits_main = Some(d);
    }
    let (sem, dsem) = semantic_loss(&out.trace.sem_logits, scene.semantic(), spec.semantic_weight);
    grads.dsem = Some(dsem);
    let mut offset = 0.0;
    if spec.offset_weight != 0.0 {
        let (l, doff) = offset_loss(&out.trace.offsets, scene, spec.offset_weight);
        offset = l;
        grads.doffsets = Some(doff);
    }
    let total = spec.w_a * aux + main + sem + offset;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: aux {aux}, main {main}, semantic {sem}, offset {offset}"
        )));
    }
    Ok((LossBreakdown { aux, main, semantic: sem, offset, total }, grads))
}

/// Forward pass that only decodes the heads a step actually needs; skipped
/// heads carry empty mask sets in the trace.
pub fn forward_selective(
    scene: &Scene,
    params: &NetworkParams,
    samples: &SampleSet,
    need_aux: bool,
    need_main: bool,
) -> HeadOutputs {
    if need_aux && need_main {
        return forward_heads(scene, params, samples);
    }
    let enc = encode(scene, params);
    let cfg = &params.cfg;
    let empty_filters = || DynamicFilterSet {
        flat: Mat::zeros(0, cfg.filter_len()),
        d_mask: cfg.d_mask,
        hidden: cfg.decoder_hidden,
    };
    let (filters_aux, logits_aux) = if need_aux {
        let f = generate_filters(params, &enc.f_b, samples, Head::Aux);
        let l = decode_head_logits(scene, &enc.f_m, samples, &f, cfg);
        (f, l)
    } else {
        (empty_filters(), Mat::zeros(0, scene.len()))
    };
    let (filters_main, logits_main) = if need_main {
        let f = generate_filters(params, &enc.f_b, samples, Head::Main);
        let l = decode_head_logits(scene, &enc.f_m, samples, &f, cfg);
        (f, l)
    } else {
        (empty_filters(), Mat::zeros(0, scene.len()))
    };
    let aux_preds = logits_to_probs(&logits_aux);
    let main_preds = logits_to_probs(&logits_main);
    let trace = ForwardTrace {
        input: enc.input,
        pre0: enc.pre0,
        act0: enc.act0,
        pre1: enc.pre1,
        act1: enc.act1,
        f_b: enc.f_b,
        f_m: enc.f_m,
        sem_logits: enc.sem_logits,
        offsets: enc.offsets,
        samples: samples.clone(),
        filters_aux,
        filters_main,
        logits_aux,
        logits_main,
    };
    HeadOutputs { trace, aux_preds, main_preds }
}

/// Mutable training state; checkpointable and resumable.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: NetworkParams,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: usize,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Self {
        let params = NetworkParams::init(cfg.net, derive_seed(cfg.seed, 0x1417));
        let n = params.n_params();
        TrainState { params, adam_m: vec![0.0; n], adam_v: vec![0.0; n], step: 0 }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(state: &mut TrainState, grads: &[f64], lr: f64) {
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let params = state.params.data_mut();
    for i in 0..params.len() {
        let g = grads[i];
        state.adam_m[i] = ADAM_BETA1 * state.adam_m[i] + (1.0 - ADAM_BETA1) * g;
        state.adam_v[i] = ADAM_BETA2 * state.adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = state.adam_m[i] / bc1;
        let vhat = state.adam_v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

fn sample_for_step(scene: &Scene, cfg: &TrainConfig, step: usize) -> Result<SampleSet> {
    let k = cfg.k_samples.min(scene.len());
    let seed = derive_seed(cfg.seed, 0x5a00_0000_0000_0000 | step as u64);
    match cfg.sample_method {
        SampleMethod::Fps => {
            let start = rng_for(seed, 0x0f5).random_range(0..scene.len());
            farthest_point_sample_from(scene, k, start)
        }
        SampleMethod::Random => random_sample(scene, k, seed),
    }
}

/// One optimisation step on one scene.
pub fn train_step(state: &mut TrainState, scene: &Scene, cfg: &TrainConfig) -> Result<StepReport> {
    let step = state.step;
    let warmup = step < cfg.warmup_steps;
    let main_active = !warmup || cfg.warmup_main_static;
    let need_aux = cfg.use_aux;
    // The no-aux dynamic variant calibrates on the main head's own masks.
    let need_main = main_active || (cfg.strategy == Strategy::DynamicOt && !cfg.use_aux);

    let samples = sample_for_step(scene, cfg, step)?;
    let masks = scene.instance_masks();
    let out = forward_selective(scene, &state.params, &samples, need_aux, need_main);

    let aux_targets = need_aux.then(|| static_targets(scene, &samples));
    let mut sinkhorn_converged = true;
    let main_targets: Option<Vec<TargetSpec>> = if !main_active {
        None
    } else if warmup {
        Some(static_targets(scene, &samples))
    } else {
        match cfg.strategy {
            Strategy::Static => Some(static_targets(scene, &samples)),
            Strategy::CenterPrior => Some(center_prior_targets(
                scene,
                &samples,
                &out.trace.offsets,
                cfg.r_pos,
                cfg.r_neg,
            )),
            Strategy::DynamicOt => {
                let cost_preds = if cfg.use_aux { &out.aux_preds } else { &out.main_preds };
                let (specs, converged) =
                    calibrate_targets(cost_preds, &masks, &cfg.ot_config())?;
                sinkhorn_converged = converged;
                Some(specs)
            }
        }
    };

    let w_a = cfg.w_a_at(step);
    let offset_weight =
        if cfg.strategy == Strategy::CenterPrior { cfg.offset_weight } else { 0.0 };
    let spec = LossSpec {
        aux_targets: aux_targets.as_deref(),
        main_targets: main_targets.as_deref(),
        w_a,
        semantic_weight: cfg.semantic_weight,
        offset_weight,
    };
    let (breakdown, out_grads) = loss_with_targets(scene, &masks, &out, &spec).map_err(|e| {
        Error::Numeric(format!("step {step} on scene {}: {e}", scene.id))
    })?;
    let grads = backward(scene, &state.params, &out.trace, &out_grads);
    adam_update(state, &grads, cfg.lr_at(step));
    state.step += 1;

    let counted = main_targets.as_deref().or(aux_targets.as_deref());
    let n_background_assigned = counted
        .map(|t| t.iter().filter(|s| matches!(s, TargetSpec::Background)).count())
        .unwrap_or(0);
    Ok(StepReport {
        step,
        loss_total: breakdown.total,
        loss_aux: breakdown.aux,
        loss_main: breakdown.main,
        loss_semantic: breakdown.semantic,
        loss_offset: breakdown.offset,
        w_a,
        n_background_assigned,
        sinkhorn_converged,
    })
}

/// Deterministic scene order: a fresh seeded shuffle per pass over the
/// dataset, addressable by step so resumed runs line up exactly.
fn scene_index_for_step(n_scenes: usize, seed: u64, step: usize) -> usize {
    let epoch = step / n_scenes;
    let slot = step % n_scenes;
    let mut order: Vec<usize> = (0..n_scenes).collect();
    let mut rng = rng_for(seed, 0xe90c_0000_0000_0000 | epoch as u64);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order[slot]
}

/// Runs `state.step .. cfg.total_steps` over the dataset. Deterministic in
/// `(dataset, cfg)`: two runs with the same seed produce bit-identical
/// reports.
pub fn fit(dataset: &[Scene], cfg: &TrainConfig, state: &mut TrainState) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let mut reports = Vec::with_capacity(cfg.total_steps.saturating_sub(state.step));
    while state.step < cfg.total_steps {
        let idx = scene_index_for_step(dataset.len(), cfg.seed, state.step);
        let report = train_step(state, &dataset[idx], cfg)?;
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskKind;
    use crate::scene::farthest_point_sample;
    use crate::synth::{generate, SceneSpec, Shape};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                input_features: 3,
                encoder_hidden: 6,
                d_backbone: 6,
                d_mask: 4,
                decoder_hidden: 2,
                classes: 3,
            },
            k_samples: 4,
            warmup_steps: 3,
            total_steps: 10,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn tiny_scene(seed: u64) -> Scene {
        generate(&SceneSpec {
            seed,
            id: format!("train-tiny-{seed}"),
            n_instances: (2, 3),
            shapes: vec![Shape::BoxSurface, Shape::SphereSurface],
            points_per_instance: (15, 25),
            classes: 3,
            min_gap: 0.1,
            noise_sigma: 0.01,
            clutter_fraction: 0.1,
        })
        .unwrap()
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = tiny_cfg();
        cfg.warmup_steps = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.w_a_decay = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.r_pos = 0.7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn w_a_follows_the_closed_form() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.w_a_at(0), 1.0);
        let expected = 0.99f64.powi(100);
        assert!((cfg.w_a_at(100) - expected).abs() < 1e-15);
        assert!((expected - 0.366).abs() < 1e-3);
        let slow = TrainConfig { w_a_decay_period: 10, ..TrainConfig::default() };
        assert_eq!(slow.w_a_at(99), 0.99f64.powi(9));
    }

    #[test]
    fn static_targets_follow_labels() {
        let scene = tiny_scene(0);
        let n = scene.len();
        let labeled = (0..n).find(|i| scene.instance()[*i] >= 0).unwrap();
        let unlabeled = (0..n).find(|i| scene.instance()[*i] < 0).unwrap();
        let samples =
            SampleSet { indices: vec![labeled, unlabeled], method: SampleMethod::Fps };
        let specs = static_targets(&scene, &samples);
        let ids = scene.instance_ids();
        let expect_row =
            ids.binary_search(&scene.instance()[labeled]).unwrap();
        assert_eq!(specs[0], TargetSpec::Instance(expect_row));
        assert_eq!(specs[1], TargetSpec::Background);
    }

    #[test]
    fn static_targets_reproduce_instance_mask_rows() {
        let scene = tiny_scene(1);
        let samples = farthest_point_sample(&scene, 6, 3).unwrap();
        let specs = static_targets(&scene, &samples);
        let masks = scene.instance_masks();
        for (slot, spec) in specs.iter().enumerate() {
            let point = samples.indices[slot];
            match spec {
                TargetSpec::Instance(t) => assert_eq!(masks.row(*t)[point], 1.0),
                TargetSpec::Background => assert!(scene.instance()[point] < 0),
                TargetSpec::Ignored => panic!("static assignment never ignores"),
            }
        }
    }

    #[test]
    fn center_prior_bands() {
        let scene = tiny_scene(2);
        let n = scene.len();
        let labeled = (0..n).find(|i| scene.instance()[*i] >= 0).unwrap();
        let unlabeled = (0..n).find(|i| scene.instance()[*i] < 0).unwrap();
        let samples = SampleSet {
            indices: vec![labeled, labeled, labeled, unlabeled],
            method: SampleMethod::Fps,
        };
        let true_offsets = scene.centroid_offsets();
        // Perfect prediction, 0.45 m miss, 0.9 m miss, and an unlabeled point.
        let mut offsets = Mat::zeros(n, 3);
        for d in 0..3 {
            *offsets.at_mut(labeled, d) = true_offsets[labeled][d];
        }
        let specs_perfect = center_prior_targets(&scene, &samples, &offsets, 0.3, 0.6);
        assert!(matches!(specs_perfect[0], TargetSpec::Instance(_)));
        assert_eq!(specs_perfect[3], TargetSpec::Background);

        *offsets.at_mut(labeled, 0) = true_offsets[labeled][0] + 0.45;
        let specs_mid = center_prior_targets(&scene, &samples, &offsets, 0.3, 0.6);
        assert_eq!(specs_mid[0], TargetSpec::Ignored);

        *offsets.at_mut(labeled, 0) = true_offsets[labeled][0] + 0.9;
        let specs_far = center_prior_targets(&scene, &samples, &offsets, 0.3, 0.6);
        assert_eq!(specs_far[0], TargetSpec::Background);
    }

    #[test]
    fn calibration_with_zero_predictions_goes_background() {
        // The trivial solution: zero aux masks mean zero supplies, so every
        // point lands on the background target.
        let scene = tiny_scene(3);
        let masks = scene.instance_masks();
        let preds = MaskSet::new(Mat::zeros(4, scene.len()), MaskKind::Soft).unwrap();
        let (specs, _) = calibrate_targets(&preds, &masks, &OtConfig::default()).unwrap();
        assert!(specs.iter().all(|s| *s == TargetSpec::Background));
    }

    #[test]
    fn calibration_with_perfect_predictions_matches_static() {
        let scene = tiny_scene(4);
        let samples = farthest_point_sample(&scene, 5, 9).unwrap();
        let masks = scene.instance_masks();
        let statics = static_targets(&scene, &samples);
        // Perfect aux predictions: each sampled point emits its own target
        // mask (zero mask for background points).
        let rows: Vec<Vec<f64>> = statics
            .iter()
            .map(|spec| match spec {
                TargetSpec::Instance(t) => masks.row(*t).to_vec(),
                _ => vec![0.0; scene.len()],
            })
            .collect();
        let preds = MaskSet::new(Mat::from_rows(&rows), MaskKind::Soft).unwrap();
        let (specs, converged) =
            calibrate_targets(&preds, &masks, &OtConfig::default()).unwrap();
        assert!(converged);
        assert_eq!(specs, statics);
    }

    #[test]
    fn warmup_excludes_main_loss() {
        let scene = tiny_scene(5);
        let cfg = tiny_cfg();
        let mut state = TrainState::init(&cfg);
        let report = train_step(&mut state, &scene, &cfg).unwrap();
        assert_eq!(report.loss_main, 0.0);
        assert!(report.loss_aux > 0.0);
        // Identity: total = w_a * aux + main + semantic + offset.
        let lhs = report.loss_total;
        let rhs = report.w_a * report.loss_aux
            + report.loss_main
            + report.loss_semantic
            + report.loss_offset;
        assert_eq!(lhs.to_bits(), rhs.to_bits());
    }

    #[test]
    fn warmup_main_static_trains_main_during_warmup() {
        let scene = tiny_scene(5);
        let cfg = TrainConfig { warmup_main_static: true, use_aux: false, ..tiny_cfg() };
        let mut state = TrainState::init(&cfg);
        let report = train_step(&mut state, &scene, &cfg).unwrap();
        assert!(report.loss_main > 0.0);
        assert_eq!(report.loss_aux, 0.0);
    }

    #[test]
    fn loss_decomposition_holds_every_step() {
        let scenes: Vec<Scene> = (0..3).map(tiny_scene).collect();
        for strategy in [Strategy::Static, Strategy::CenterPrior, Strategy::DynamicOt] {
            let cfg = TrainConfig { strategy, ..tiny_cfg() };
            let mut state = TrainState::init(&cfg);
            let reports = fit(&scenes, &cfg, &mut state).unwrap();
            assert_eq!(reports.len(), cfg.total_steps);
            for r in &reports {
                let rhs =
                    r.w_a * r.loss_aux + r.loss_main + r.loss_semantic + r.loss_offset;
                assert_eq!(r.loss_total.to_bits(), rhs.to_bits(), "step {}", r.step);
                if strategy != Strategy::CenterPrior {
                    assert_eq!(r.loss_offset, 0.0);
                }
            }
        }
    }

    #[test]
    fn fit_zero_steps_returns_initial_params() {
        let scenes = vec![tiny_scene(6)];
        let cfg = TrainConfig { total_steps: 0, warmup_steps: 0, ..tiny_cfg() };
        let mut state = TrainState::init(&cfg);
        let before = state.params.clone();
        let reports = fit(&scenes, &cfg, &mut state).unwrap();
        assert!(reports.is_empty());
        assert_eq!(state.params, before);
    }

    #[test]
    fn fit_is_bit_deterministic_and_resumable() {
        let scenes: Vec<Scene> = (0..2).map(tiny_scene).collect();
        let cfg = tiny_cfg();

        let mut s1 = TrainState::init(&cfg);
        let r1 = fit(&scenes, &cfg, &mut s1).unwrap();
        let mut s2 = TrainState::init(&cfg);
        let r2 = fit(&scenes, &cfg, &mut s2).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(s1.params.data(), s2.params.data());

        // Stop at step 4, resume to the end; the tail must line up exactly.
        let mut half = TrainState::init(&cfg);
        let head_cfg = TrainConfig { total_steps: 4, ..cfg.clone() };
        let mut head_reports = fit(&scenes, &head_cfg, &mut half).unwrap();
        let tail_reports = fit(&scenes, &cfg, &mut half).unwrap();
        head_reports.extend(tail_reports);
        assert_eq!(head_reports, r1);
        assert_eq!(half.params.data(), s1.params.data());
    }

    #[test]
    fn non_finite_loss_aborts_with_numeric_error() {
        let scene = tiny_scene(7);
        let cfg = tiny_cfg();
        let mut state = TrainState::init(&cfg);
        for v in state.params.data_mut().iter_mut() {
            *v = f64::INFINITY;
        }
        let err = train_step(&mut state, &scene, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        // Fixed targets (both heads, background included), semantic and
        // offset terms all active; a thinned parameter sweep against central
        // differences. The acceptance suite runs the full sweep.
        let scene = tiny_scene(8);
        let cfg = tiny_cfg();
        let mut params = NetworkParams::init(cfg.net, 31);
        let samples = farthest_point_sample(&scene, 4, 11).unwrap();
        let masks = scene.instance_masks();
        let aux_t = static_targets(&scene, &samples);
        let main_t = aux_t.clone();
        let spec = LossSpec {
            aux_targets: Some(&aux_t),
            main_targets: Some(&main_t),
            w_a: 0.7,
            semantic_weight: 1.0,
            offset_weight: 1.0,
        };

        let loss_of = |p: &NetworkParams| -> f64 {
            let out = forward_heads(&scene, p, &samples);
            loss_with_targets(&scene, &masks, &out, &spec).unwrap().0.total
        };
        let out = forward_heads(&scene, &params, &samples);
        let (_, out_grads) = loss_with_targets(&scene, &masks, &out, &spec).unwrap();
        let grads = backward(&scene, &params, &out.trace, &out_grads);

        let h = 1e-5;
        for i in (0..params.n_params()).step_by(5) {
            let orig = params.data()[i];
            params.data_mut()[i] = orig + h;
            let hi = loss_of(&params);
            params.data_mut()[i] = orig - h;
            let lo = loss_of(&params);
            params.data_mut()[i] = orig;
            let fd = (hi - lo) / (2.0 * h);
            let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {i}: bp {} vs fd {fd} (rel {rel})", grads[i]);
        }
    }

    #[test]
    fn background_heavy_steps_still_learn_aux() {
        // All-zero-ish predictions assign everything to background, yet the
        // aux loss keeps training signal alive.
        let scene = tiny_scene(9);
        let cfg = TrainConfig {
            strategy: Strategy::DynamicOt,
            warmup_steps: 0,
            total_steps: 6,
            ..tiny_cfg()
        };
        let mut state = TrainState::init(&cfg);
        let mut prev_aux = f64::INFINITY;
        let mut last_aux = f64::INFINITY;
        for _ in 0..6 {
            let r = train_step(&mut state, &scene, &cfg).unwrap();
            prev_aux = last_aux;
            last_aux = r.loss_aux;
            assert!(r.loss_total.is_finite());
        }
        // Not a strict-descent guarantee; just show the loop runs and the
        // aux loss moved.
        assert!(last_aux != prev_aux);
    }
}

#[cfg(test)]
mod diag_tests {
    use super::*;
    use crate::synth::{generate, SceneSpec, Shape};

    fn tiny_scene(seed: u64) -> Scene {
        generate(&SceneSpec {
            seed,
            id: format!("train-tiny-{seed}"),
            n_instances: (2, 3),
            shapes: vec![Shape::BoxSurface, Shape::SphereSurface],
            points_per_instance: (15, 25),
            classes: 3,
            min_gap: 0.1,
            noise_sigma: 0.01,
            clutter_fraction: 0.1,
        })
        .unwrap()
    }

    #[test]
    fn diag_determinism() {
        let scenes: Vec<Scene> = (0..2).map(tiny_scene).collect();
        let cfg = TrainConfig {
            net: crate::net::NetConfig {
                input_features: 3,
                encoder_hidden: 6,
                d_backbone: 6,
                d_mask: 4,
                decoder_hidden: 2,
                classes: 3,
            },
            k_samples: 4,
            warmup_steps: 3,
            total_steps: 10,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut s1 = TrainState::init(&cfg);
        let r1 = fit(&scenes, &cfg, &mut s1).unwrap();
        let mut s2 = TrainState::init(&cfg);
        let r2 = fit(&scenes, &cfg, &mut s2).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a, b, "sequential-full runs diverge at step {}", a.step);
        }
    }
}
