//! Trend studies: train and evaluate variants of one configuration.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::cascade::detect_scenes;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalResult};
use crate::model::CascadeModel;
use crate::psmap::{branch_set, ContextMode};
use crate::scene::{GeneratedScenes, SceneSource, Split};
use crate::train::{train_multistage, TrainContext, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Branch sets a) to e).
    AspectRatios,
    /// No context, global, local and global.
    Context,
    /// Every prefix of the cascade.
    Stages,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aspect_ratios" => Ok(Axis::AspectRatios),
            "context" => Ok(Axis::Context),
            "stages" => Ok(Axis::Stages),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?} (expected aspect_ratios, context or stages)"
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::AspectRatios => "aspect_ratios",
            Axis::Context => "context",
            Axis::Stages => "stages",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub cfg: RunConfig,
}

/// The configurations compared along `axis`. The stages axis has a single
/// variant whose cascade prefixes are reported separately.
pub fn variants(base: &RunConfig, axis: Axis) -> Vec<Variant> {
    let with = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Variant { name, cfg }
    };
    match axis {
        Axis::AspectRatios => ('a'..='e')
            .map(|set| {
                with(format!("set_{set}"), &|c| {
                    c.model.tilings = branch_set(set).expect("sets a to e exist")
                })
            })
            .collect(),
        Axis::Context => [ContextMode::None, ContextMode::Global, ContextMode::LocalGlobal]
            .into_iter()
            .map(|m| with(m.to_string(), &|c| c.model.context = m))
            .collect(),
        Axis::Stages => vec![with("cascade".into(), &|_| {})],
    }
}

/// Evaluation of a trained cascade after each number of stages.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    /// `per_stage[k]` evaluates the first `k + 1` stages.
    pub per_stage: Vec<EvalResult>,
}

/// Trains `cfg` on generated scenes with `seed` and evaluates every cascade prefix on the test split.
pub fn train_and_evaluate(cfg: &RunConfig, seed: u64, thresholds: &[f64]) -> Result<RunOutcome> {
    cfg.validate()?;
    let train = GeneratedScenes::new(&cfg.dataset, seed, Split::Train)?;
    let test = GeneratedScenes::new(&cfg.dataset, seed, Split::Test)?;
    let model = CascadeModel::init(&cfg.model, cfg.dataset.channels(), cfg.schedule.stages(), seed)?;
    let ctx = TrainContext {
        schedule: cfg.schedule.clone(),
        proposals: cfg.proposals.clone(),
        detect: cfg.detect.clone(),
        seed,
    };
    let mut state = TrainState::new(model);
    train_multistage(&ctx, &train, &mut state, None, &mut |_| Ok(()))?;
    let gts: Vec<_> = (0..test.len())
        .map(|i| Ok(test.scene(i)?.gt_records(i)))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let per_stage = detect_scenes(&test, &state.model, &cfg.proposals, &cfg.detect, seed)?
        .iter()
        .map(|dets| evaluate(dets, &gts, thresholds, EvalOptions::default()))
        .collect();
    Ok(RunOutcome { seed, per_stage })
}

/// One line of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub stages: usize,
    pub map: Vec<f64>,
}

/// Runs every variant of `axis` for every seed. Rows report the full cascade,
/// or every prefix of it on the stages axis.
pub fn ablate(
    base: &RunConfig,
    axis: Axis,
    seeds: &[u64],
    thresholds: &[f64],
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants(base, axis) {
        for &seed in seeds {
            let out = train_and_evaluate(&v.cfg, seed, thresholds)?;
            let n = out.per_stage.len();
            let shown = if axis == Axis::Stages { 0..n } else { n - 1..n };
            for k in shown {
                let row = AblationRow {
                    variant: v.name.clone(),
                    seed,
                    stages: k + 1,
                    map: out.per_stage[k].map.clone(),
                };
                progress(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Whitespace-separated table with one mAP column per threshold.
pub fn format_table(thresholds: &[f64], rows: &[AblationRow]) -> String {
    let mut out = String::from("variant seed stages");
    for t in thresholds {
        let _ = write!(out, " mAP@{t:.2}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{} {} {}", r.variant, r.seed, r.stages);
        for m in &r.map {
            let _ = write!(out, " {m:.6}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psmap::Tiling;

    #[test]
    fn axis_names_round_trip() {
        for a in [Axis::AspectRatios, Axis::Context, Axis::Stages] {
            assert_eq!(a.to_string().parse::<Axis>().unwrap(), a);
        }
        assert!("depth".parse::<Axis>().is_err());
    }

    #[test]
    fn variants_change_only_their_axis() {
        let base = RunConfig::default();
        let sets = variants(&base, Axis::AspectRatios);
        assert_eq!(sets.len(), 5);
        assert_eq!(sets[0].cfg.model.tilings, vec![Tiling::new(7, 7)]);
        assert_eq!(sets[2].cfg, base);
        let ctx = variants(&base, Axis::Context);
        let modes: Vec<_> = ctx.iter().map(|v| v.cfg.model.context).collect();
        assert_eq!(
            modes,
            [ContextMode::None, ContextMode::Global, ContextMode::LocalGlobal]
        );
        assert!(ctx.iter().all(|v| v.cfg.model.tilings == base.model.tilings));
        assert_eq!(variants(&base, Axis::Stages).len(), 1);
    }

    #[test]
    fn tiny_stages_ablation_reports_each_prefix() {
        let mut cfg = RunConfig::default();
        cfg.model.tilings = vec![Tiling::new(2, 2)];
        cfg.dataset.train_scenes = 3;
        cfg.dataset.test_scenes = 2;
        cfg.schedule.stage_steps = vec![3, 2];
        let mut seen = 0;
        let rows = ablate(&cfg, Axis::Stages, &[4], &[0.5, 0.7], &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        assert_eq!(rows.iter().map(|r| r.stages).collect::<Vec<_>>(), [1, 2]);
        assert!(rows
            .iter()
            .all(|r| r.map.len() == 2 && r.map.iter().all(|m| (0.0..=1.0).contains(m))));
        let table = format_table(&[0.5, 0.7], &rows);
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("variant seed stages mAP@0.50 mAP@0.70\n"));
    }
}
