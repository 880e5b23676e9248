//! Multi-stage training.
//!
//! Stage 1 trains the projection and the first template bank on synthetic
//! proposals. Every later stage trains only its own bank, with the projection
//! frozen, on the surviving detections of the stages before it. Each step
//! consumes the RoIs of one scene; which scene and which proposals is a pure
//! function of the seed and the step, so a run resumed from a checkpoint
//! continues exactly as the uninterrupted one.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{cascade_detect, image_size, keep_high_recall, DetectParams};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::engine::{backward_roi, forward_roi, RoiForward, SceneIntegral};
use crate::error::{Error, Result};
use crate::geometry::{match_rois, CenterBox};
use crate::head::TemplateBank;
use crate::loss::{multi_task_loss, ohem_select, per_roi_loss, ComponentReduction, LossReport, LossSpec, RoISample};
use crate::model::CascadeModel;
use crate::optim::{add_assign, sgd_step, OptimState, Params};
use crate::proposals::{proposal_source, ProposalParams, ProposalSet};
use crate::psmap::ProjectionWeights;
use crate::rng::stream;
use crate::scene::{SceneSource, SyntheticScene};

/// RoIs per backward work unit. Partial gradients are summed in chunk order,
/// so the result does not depend on the number of worker threads.
pub const CHUNK_ROIS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Steps per cascade stage; its length is the stage count.
    pub stage_steps: Vec<usize>,
    pub lr: f64,
    /// Fraction of each stage after which the learning rate drops tenfold.
    pub lr_drop: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_task: f64,
    /// Whether the losses of the mixture components are summed or averaged.
    pub component_loss: ComponentReduction,
    pub ohem_rois: usize,
    /// Start each later stage from the bank of the stage before it.
    pub warm_start: bool,
    /// Steps between checkpoints written by the command line driver; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            stage_steps: vec![4000, 2000],
            lr: 0.01,
            lr_drop: 0.75,
            momentum: 0.9,
            weight_decay: 0.0005,
            lambda_task: 1.0,
            component_loss: ComponentReduction::Sum,
            ohem_rois: 128,
            warm_start: true,
            checkpoint_every: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_steps.is_empty() {
            return bad("stage_steps needs one entry per stage".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lr_drop) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr_drop must lie in [0, 1] and momentum in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda_task >= 0.0) || self.ohem_rois == 0 {
            return bad("weight_decay and lambda_task must be >= 0, ohem_rois >= 1".into());
        }
        Ok(())
    }

    pub fn loss_spec(&self, reg_std: &[f64; 4]) -> LossSpec {
        LossSpec {
            lambda_task: self.lambda_task,
            reg_std: *reg_std,
            components: self.component_loss,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_steps.len()
    }

    pub fn lr_at(&self, stage: usize, step: usize) -> f64 {
        let drop_at = (self.lr_drop * self.stage_steps[stage] as f64).floor() as usize;
        if step < drop_at {
            self.lr
        } else {
            self.lr * 0.1
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stage_steps.iter().sum()
    }

    /// Steps completed before `p` across all stages.
    pub fn global_step(&self, p: Progress) -> usize {
        self.stage_steps[..p.stage.min(self.stages())].iter().sum::<usize>() + p.step
    }
}

/// Position in the schedule: the next step to run is `step` of `stage`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    pub stage: usize,
    pub step: usize,
}

/// Everything a step needs besides the parameters.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub schedule: Schedule,
    pub proposals: ProposalParams,
    pub detect: DetectParams,
    pub seed: u64,
}

/// Model, schedule position and the optimizer of the current stage.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: CascadeModel,
    pub progress: Progress,
    pub optim: Option<OptimState<f32>>,
    stage_inputs: Option<(usize, Vec<ProposalSet>)>,
}

const OPTIM_PREFIX: &str = "optim.";
pub const PROGRESS_FILE: &str = "progress.txt";

impl TrainState {
    pub fn new(model: CascadeModel) -> Self {
        TrainState {
            model,
            progress: Progress::default(),
            optim: None,
            stage_inputs: None,
        }
    }

    /// Model tensors followed by the momentum buffers of the running stage.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        if let Some(opt) = &self.optim {
            let layout = zero_grads(&self.model, self.progress.stage);
            let names: Vec<(String, Vec<usize>)> = layout.blocks().into_iter().map(|b| (b.name, b.shape)).collect();
            for ((name, shape), v) in names.into_iter().zip(&opt.velocity) {
                ck.push(crate::checkpoint::Tensor::new(
                    format!("{OPTIM_PREFIX}{name}"),
                    shape,
                    v.clone(),
                )?)?;
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(
        model_cfg: &crate::psmap::ARConfig,
        ck: &Checkpoint,
        progress: Progress,
        schedule: &Schedule,
    ) -> Result<Self> {
        let model = CascadeModel::from_checkpoint(model_cfg, ck)?;
        if model.stages.len() != schedule.stages() {
            return Err(Error::Config(format!(
                "checkpoint has {} stages, schedule has {}",
                model.stages.len(),
                schedule.stages()
            )));
        }
        let mut state = TrainState::new(model);
        state.progress = progress;
        let has_optim = ck.tensors.iter().any(|t| t.name.starts_with(OPTIM_PREFIX));
        if has_optim {
            let params = zero_grads(&state.model, progress.stage);
            let mut opt = OptimState::new(&params, 0.0, schedule.momentum, schedule.weight_decay);
            for (b, v) in params.blocks().iter().zip(&mut opt.velocity) {
                let t = ck.require(&format!("{OPTIM_PREFIX}{}", b.name))?;
                if t.data.len() != v.len() {
                    return Err(Error::shape(v.len(), t.data.len()));
                }
                v.copy_from_slice(&t.data);
            }
            opt.step = progress.step as u64;
            state.optim = Some(opt);
        } else if progress.step > 0 && progress.stage < schedule.stages() {
            return Err(Error::Config(
                "checkpoint taken mid-stage lacks optimizer buffers".into(),
            ));
        }
        Ok(state)
    }
}

pub fn format_progress(p: Progress) -> String {
    format!("stage {}\nstep {}\n", p.stage, p.step)
}

pub fn parse_progress(path: &Path, text: &str) -> Result<Progress> {
    let mut p = Progress::default();
    let mut seen = [false; 2];
    for (n, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| err(format!("expected `key value`, got {line:?}")))?;
        let v: usize = value.trim().parse().map_err(|e| err(format!("{e}")))?;
        match key {
            "stage" => (p.stage, seen[0]) = (v, true),
            "step" => (p.step, seen[1]) = (v, true),
            other => return Err(err(format!("unknown key {other}"))),
        }
    }
    if seen != [true, true] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "missing stage or step".into(),
        });
    }
    Ok(p)
}

pub fn save_progress(path: &Path, p: Progress) -> Result<()> {
    write_atomic(path, format_progress(p).as_bytes())
}

type StageParams<'a> = (Option<&'a mut ProjectionWeights<f32>>, &'a mut TemplateBank<f32>);
pub type StageGrads = (Option<ProjectionWeights<f32>>, TemplateBank<f32>);

fn stage_params(model: &mut CascadeModel, stage: usize) -> StageParams<'_> {
    let proj = (stage == 0).then_some(&mut model.proj);
    (proj, &mut model.stages[stage])
}

/// Zeroed gradients shaped like the parameters `stage` trains.
pub fn zero_grads(model: &CascadeModel, stage: usize) -> StageGrads {
    let proj = (stage == 0).then(|| ProjectionWeights::zeros(&model.cfg, model.input_dim()));
    (proj, TemplateBank::zeros(&model.cfg))
}

/// One optimizer step of `stage` on the RoIs `rois` of `scene`.
///
/// Returns `None` when the scene offers no RoI.
pub fn train_step(
    ctx: &TrainContext,
    model: &mut CascadeModel,
    stage: usize,
    optim: &mut OptimState<f32>,
    scene: &SyntheticScene,
    rois: &[CenterBox],
) -> Result<Option<LossReport>> {
    if rois.is_empty() {
        return Ok(None);
    }
    let sched = &ctx.schedule;
    let cfg = &model.cfg;
    let integral = SceneIntegral::new(&scene.features);
    let matches = match_rois(rois, &scene.gts)?;
    let bank = &model.stages[stage];
    let fwd: Vec<RoiForward<f32>> = rois
        .par_iter()
        .map(|b| forward_roi(cfg, &model.proj, bank, &integral, b))
        .collect::<Result<_>>()?;
    let batch: Vec<RoISample<f32>> = fwd
        .iter()
        .zip(&matches)
        .map(|(f, m)| RoISample {
            scores: f.scores(),
            label: m.label,
            target: m.target,
        })
        .collect();
    let spec = sched.loss_spec(&cfg.reg_std);
    let losses = batch
        .iter()
        .map(|s| per_roi_loss(s, &spec))
        .collect::<Result<Vec<f64>>>()?;
    let selected = ohem_select(&losses, sched.ohem_rois.min(batch.len()));
    let (report, grads) = multi_task_loss(&batch, &selected, &spec)?;
    if !report.total.is_finite() {
        return Err(Error::Divergence {
            stage,
            step: optim.step as usize,
            msg: format!("loss is {} (cls {}, reg {})", report.total, report.l_cls, report.l_reg),
        });
    }
    let partial: Vec<StageGrads> = selected
        .par_chunks(CHUNK_ROIS)
        .map(|chunk| {
            let mut g = zero_grads(model, stage);
            for &j in chunk {
                backward_roi(cfg, &model.proj, bank, &fwd[j], &grads[j], g.0.as_mut(), &mut g.1)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut total = zero_grads(model, stage);
    for g in &partial {
        add_assign(&mut total, g)?;
    }
    let mut params = stage_params(model, stage);
    sgd_step(&mut params, &total, optim)?;
    Ok(Some(report))
}

/// Scene visited at step `step` of `stage`: a fresh permutation every pass over the data.
pub fn scene_for_step(seed: u64, stage: usize, step: usize, n: usize) -> usize {
    let epoch = step / n;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &format!("order-stage{stage}"), epoch as u64));
    order[step % n]
}

/// Proposals for training stage `stage` on scene `index`: the cascade
/// survivors of the earlier stages.
fn cascade_inputs<S: SceneSource + ?Sized>(
    ctx: &TrainContext,
    model: &CascadeModel,
    stage: usize,
    source: &S,
) -> Result<Vec<ProposalSet>> {
    let upto = model.truncated(stage)?;
    (0..source.len())
        .into_par_iter()
        .map(|idx| {
            let scene = source.scene(idx)?;
            let image = image_size(&scene.features, model.cfg.stride);
            let mut rng = stream(ctx.seed, &format!("stage{stage}-proposals"), idx as u64);
            let props = proposal_source(&scene.gts, image.0, image.1, &mut rng, &ctx.proposals);
            let integral = SceneIntegral::new(&scene.features);
            let out = cascade_detect(&integral, &upto, &props, &ctx.detect, image)?;
            Ok(keep_high_recall(
                &out.stages[stage - 1],
                ctx.detect.p_keep,
                ctx.detect.cascade_nms,
                stage - 1,
            ))
        })
        .collect()
}

/// One training log line: `step lr L_cls L_reg total`.
pub fn log_line(global_step: usize, lr: f64, r: &LossReport) -> String {
    format!("{global_step} {lr:.6} {:.6} {:.6} {:.6}", r.l_cls, r.l_reg, r.total)
}

/// Runs the schedule from `state.progress` until it completes or `until`
/// global steps have been run. `log` receives one line per step.
pub fn train_multistage<S: SceneSource + ?Sized>(
    ctx: &TrainContext,
    source: &S,
    state: &mut TrainState,
    until: Option<usize>,
    log: &mut dyn FnMut(&str) -> Result<()>,
) -> Result<()> {
    let sched = &ctx.schedule;
    sched.validate()?;
    if state.model.stages.len() != sched.stages() {
        return Err(Error::Config(format!(
            "model has {} stages, schedule has {}",
            state.model.stages.len(),
            sched.stages()
        )));
    }
    let n = source.len();
    loop {
        let Progress { stage, step } = state.progress;
        if stage >= sched.stages() {
            return Ok(());
        }
        if step >= sched.stage_steps[stage] {
            state.progress = Progress {
                stage: stage + 1,
                step: 0,
            };
            state.optim = None;
            continue;
        }
        if until.is_some_and(|u| sched.global_step(state.progress) >= u) {
            return Ok(());
        }
        if n == 0 {
            return Err(Error::InvalidSpec("training needs at least one scene".into()));
        }
        if state.optim.is_none() {
            if stage > 0 && sched.warm_start && step == 0 {
                state.model.stages[stage] = state.model.stages[stage - 1].clone();
            }
            let layout = zero_grads(&state.model, stage);
            state.optim = Some(OptimState::new(&layout, sched.lr, sched.momentum, sched.weight_decay));
        }
        if stage > 0 && state.stage_inputs.as_ref().map(|(s, _)| *s) != Some(stage) {
            state.stage_inputs = Some((stage, cascade_inputs(ctx, &state.model, stage, source)?));
        }
        let idx = scene_for_step(ctx.seed, stage, step, n);
        let scene = source.scene(idx)?;
        let rois = match &state.stage_inputs {
            Some((s, sets)) if *s == stage => sets[idx].refined()?,
            _ => {
                let image = image_size(&scene.features, state.model.cfg.stride);
                let global = sched.global_step(state.progress) as u64;
                proposal_source(
                    &scene.gts,
                    image.0,
                    image.1,
                    &mut stream(ctx.seed, "train-proposals", global),
                    &ctx.proposals,
                )
                .refined()?
            }
        };
        let lr = sched.lr_at(stage, step);
        let optim = state.optim.as_mut().expect("initialized above");
        optim.lr = lr;
        let report = train_step(ctx, &mut state.model, stage, optim, &scene, &rois).map_err(|e| match e {
            Error::Divergence { msg, .. } => Error::Divergence { stage, step, msg },
            other => other,
        })?;
        let report = report.unwrap_or(LossReport {
            l_cls: 0.0,
            l_reg: 0.0,
            lambda_task: sched.lambda_task,
            total: 0.0,
            n_cls: 0,
            n_reg: 0,
        });
        log(&log_line(sched.global_step(state.progress), lr, &report))?;
        state.progress.step += 1;
    }
}
