use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use arcdet_core::ablation::{ablate, format_table, Axis};
use arcdet_core::cascade::{detect_scenes, image_size, test_proposals};
use arcdet_core::checkpoint::{write_atomic, Checkpoint};
use arcdet_core::config::RunConfig;
use arcdet_core::eval::{evaluate_files, ApMode, EvalOptions};
use arcdet_core::gradcheck::ChainFixture;
use arcdet_core::model::CascadeModel;
use arcdet_core::pooling::RoiCells;
use arcdet_core::psmap::Role;
use arcdet_core::scene::{save_scene, scene_file_name, GeneratedScenes, SceneDir, SceneSource, Split, GT_FILE};
use arcdet_core::train::{parse_progress, save_progress, train_multistage, TrainContext, TrainState, PROGRESS_FILE};
use arcdet_core::{DetectionRecord, Error};

use crate::{
    prepare_out_dir, AblateArgs, CliError, Command, DetectArgs, EvalArgs, GradcheckArgs, Result, SynthArgs, TrainArgs,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MODEL_FILE: &str = "model.ckpt";
const LOG_FILE: &str = "train.log";
const DETECTIONS_FILE: &str = "detections.txt";
const METRICS_FILE: &str = "metrics.txt";

pub(crate) fn dispatch(cfg: RunConfig, cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Detect(a) => detect(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Gradcheck(a) => gradcheck(cfg, a),
        Command::Ablate(a) => ablate_cmd(cfg, a),
    }
}

fn default_out(cfg: &RunConfig, out: Option<PathBuf>, sub: &str) -> PathBuf {
    out.unwrap_or_else(|| Path::new(&cfg.run.out_dir).join(sub))
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    Error::io(format!("{what} {}", path.display()), e).into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn records_text(records: &[DetectionRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

/// `sha256  relative/path` for every data file of a dataset directory, sorted by path.
pub fn manifest_lines(root: &Path) -> std::result::Result<Vec<String>, Error> {
    let mut files = Vec::new();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.name());
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n == GT_FILE || n.ends_with(".ckpt"))
            .collect();
        names.sort();
        files.extend(names.into_iter().map(|n| format!("{}/{n}", split.name())));
    }
    files
        .par_iter()
        .map(|rel| {
            let path = root.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            Ok(format!("{}  {rel}", hex(&Sha256::digest(&bytes))))
        })
        .collect()
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    if let Some(n) = a.train_scenes {
        cfg.dataset.train_scenes = n;
    }
    if let Some(n) = a.test_scenes {
        cfg.dataset.test_scenes = n;
    }
    cfg.validate()?;
    let out = default_out(&cfg, a.out, "data");
    if out.join(MANIFEST_FILE).exists() || out.join("train").exists() || out.join("test").exists() {
        if !a.force {
            return Err(CliError::Usage(format!(
                "{} already holds a dataset; pass --force to replace it",
                out.display()
            )));
        }
        for split in [Split::Train, Split::Test] {
            let dir = out.join(split.name());
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| io_err("removing", &dir, e))?;
            }
        }
    }
    prepare_out_dir(&out, &cfg)?;
    for split in [Split::Train, Split::Test] {
        let dir = out.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| io_err("creating", &dir, e))?;
        let source = GeneratedScenes::new(&cfg.dataset, cfg.run.seed, split)?;
        let gts: Vec<Vec<DetectionRecord>> = (0..source.len())
            .into_par_iter()
            .map(|i| {
                let scene = source.scene(i)?;
                save_scene(&dir.join(scene_file_name(i)), &scene)?;
                Ok(scene.gt_records(i))
            })
            .collect::<std::result::Result<_, Error>>()?;
        write_atomic(&dir.join(GT_FILE), records_text(&gts.concat()).as_bytes())?;
    }
    let mut manifest = manifest_lines(&out)?.join("\n");
    if !manifest.is_empty() {
        manifest.push('\n');
    }
    write_atomic(&out.join(MANIFEST_FILE), manifest.as_bytes())?;
    println!(
        "wrote {} train and {} test scenes to {}",
        cfg.dataset.train_scenes,
        cfg.dataset.test_scenes,
        out.display()
    );
    Ok(())
}

fn open_split(data: &Path, split: &str) -> Result<SceneDir> {
    let dir = data.join(split);
    if !dir.join(GT_FILE).exists() {
        return Err(CliError::Data(format!(
            "no dataset at {} (run `arcdet synth` first)",
            dir.display()
        )));
    }
    Ok(SceneDir::open(&dir)?)
}

// Keeps the first `lines` lines of the training log, so a resumed run
// appends exactly where the checkpoint left off.
fn truncate_log(path: &Path, lines: usize) -> Result<String> {
    if !path.exists() {
        return Ok(String::new());
    }
    let f = fs::File::open(path).map_err(|e| io_err("reading", path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines().take(lines) {
        kept.push_str(&line.map_err(|e| io_err("reading", path, e))?);
        kept.push('\n');
    }
    Ok(kept)
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(s) = a.stage_steps {
        cfg.schedule.stage_steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.schedule.lr = lr;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.schedule.checkpoint_every = n;
    }
    cfg.validate()?;
    let source = open_split(&a.data, Split::Train.name())?;
    if source.is_empty() {
        return Err(CliError::Data(format!("{} has no training scenes", a.data.display())));
    }
    let input_dim = source.scene(0)?.features.shape()[0];
    let out = default_out(&cfg, a.out, "train");
    let (model_path, progress_path, log_path) = (out.join(MODEL_FILE), out.join(PROGRESS_FILE), out.join(LOG_FILE));
    let mut state = if a.resume && progress_path.exists() {
        let text = fs::read_to_string(&progress_path).map_err(|e| io_err("reading", &progress_path, e))?;
        let progress = parse_progress(&progress_path, &text)?;
        TrainState::from_checkpoint(&cfg.model, &Checkpoint::load(&model_path)?, progress, &cfg.schedule)?
    } else {
        TrainState::new(CascadeModel::init(
            &cfg.model,
            input_dim,
            cfg.schedule.stages(),
            cfg.run.seed,
        )?)
    };
    if state.model.input_dim() != input_dim {
        return Err(CliError::Data(format!(
            "scenes have {input_dim} channels, the checkpoint expects {}",
            state.model.input_dim()
        )));
    }
    prepare_out_dir(&out, &cfg)?;
    let sched = cfg.schedule.clone();
    let mut log = truncate_log(&log_path, sched.global_step(state.progress))?;
    let ctx = TrainContext {
        schedule: sched.clone(),
        proposals: cfg.proposals.clone(),
        detect: cfg.detect.clone(),
        seed: cfg.run.seed,
    };
    let total = sched.total_steps();
    let limit = a.until.unwrap_or(total).min(total);
    loop {
        let done = sched.global_step(state.progress).min(total);
        let next = match sched.checkpoint_every {
            0 => limit,
            k => ((done / k + 1) * k).min(limit),
        };
        train_multistage(&ctx, &source, &mut state, Some(next), &mut |line| {
            log.push_str(line);
            log.push('\n');
            Ok(())
        })?;
        write_atomic(&log_path, log.as_bytes())?;
        state.to_checkpoint()?.save(&model_path)?;
        save_progress(&progress_path, state.progress)?;
        if sched.global_step(state.progress) >= limit || next >= limit {
            break;
        }
    }
    println!(
        "trained {} of {total} steps; checkpoint at {}",
        sched.global_step(state.progress).min(total),
        model_path.display()
    );
    Ok(())
}

fn dump_cells(cfg: &RunConfig, source: &SceneDir, path: &Path) -> Result<()> {
    let mut text = String::new();
    if !source.is_empty() {
        let scene = source.scene(0)?;
        let (_, mh, mw) = scene.features.dim();
        let props = test_proposals(
            &scene.gts,
            image_size(&scene.features, cfg.model.stride),
            cfg.run.seed,
            0,
            &cfg.proposals,
        );
        for (n, b) in props.refined()?.iter().enumerate() {
            for i in 0..cfg.model.components() {
                let cells = RoiCells::new(&cfg.model, b, i, mw, mh)?;
                for (r, role) in [Role::Roi, Role::Local, Role::Global].into_iter().enumerate() {
                    let _ = write!(text, "roi {n} component {i} tiling {} {}", cells.tiling, role.name());
                    for c in &cells.roles[r] {
                        let _ = write!(text, " {},{},{},{}", c.x0, c.y0, c.x1, c.y1);
                    }
                    text.push('\n');
                }
            }
        }
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn detect(cfg: RunConfig, a: DetectArgs) -> Result<()> {
    cfg.validate()?;
    let source = open_split(&a.data, &a.split)?;
    let mut model = CascadeModel::from_checkpoint(&cfg.model, &Checkpoint::load(&a.model)?)?;
    if let Some(n) = a.stages {
        model = model.truncated(n).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let out = default_out(&cfg, a.out, "detect");
    prepare_out_dir(&out, &cfg)?;
    let per_stage = detect_scenes(&source, &model, &cfg.proposals, &cfg.detect, cfg.run.seed)?;
    let last = per_stage.last().expect("a model has at least one stage");
    write_atomic(&out.join(DETECTIONS_FILE), records_text(last).as_bytes())?;
    if a.dump_cells {
        dump_cells(&cfg, &source, &out.join("cells.txt"))?;
    }
    println!(
        "{} detections over {} scenes with {} stage(s) in {}",
        last.len(),
        source.len(),
        model.stages.len(),
        out.join(DETECTIONS_FILE).display()
    );
    Ok(())
}

fn eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    if a.thresholds.is_empty() || a.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CliError::Usage("thresholds must lie in [0, 1]".into()));
    }
    let opts = EvalOptions {
        mode: if a.eleven_point {
            ApMode::ElevenPoint
        } else {
            ApMode::AllPoints
        },
        coco: a.coco,
    };
    for p in [&a.dets, &a.gts] {
        if !p.exists() {
            return Err(CliError::Data(format!("{} does not exist", p.display())));
        }
    }
    let result = evaluate_files(&a.dets, &a.gts, &a.thresholds, opts)?;
    print!("{}", result.table());
    if let Some(out) = a.out {
        prepare_out_dir(&out, &cfg)?;
        write_atomic(&out.join(METRICS_FILE), result.key_values().as_bytes())?;
    }
    Ok(())
}

fn gradcheck(cfg: RunConfig, a: GradcheckArgs) -> Result<()> {
    cfg.model.validate()?;
    let fixture = ChainFixture::new(&cfg.model, a.scenes, a.rois, a.map, a.input_dim, cfg.run.seed)?;
    let reports = fixture.check(a.eps, a.per_block)?;
    let mut text = String::from("block checked max_rel_error\n");
    let mut worst: f64 = 0.0;
    for r in &reports {
        let _ = writeln!(text, "{} {} {:.3e}", r.name, r.checked, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    let _ = writeln!(text, "max {worst:.3e} tolerance {:.1e}", a.tolerance);
    print!("{text}");
    if let Some(out) = a.out {
        prepare_out_dir(&out, &cfg)?;
        write_atomic(&out.join("gradcheck.txt"), text.as_bytes())?;
    }
    if !(worst < a.tolerance) {
        return Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {worst:.3e} >= {:.1e}",
            a.tolerance
        )));
    }
    Ok(())
}

fn ablate_cmd(cfg: RunConfig, a: AblateArgs) -> Result<()> {
    let axis: Axis = a.axis.parse()?;
    cfg.validate()?;
    if axis == Axis::Stages && cfg.schedule.stages() < 2 {
        return Err(CliError::Usage(
            "the stages axis needs a schedule with at least two stages".into(),
        ));
    }
    let seeds = a.seeds.unwrap_or_else(|| vec![cfg.run.seed]);
    let out = default_out(&cfg, a.out, &format!("ablate_{axis}"));
    prepare_out_dir(&out, &cfg)?;
    let stdout = std::io::stdout();
    let rows = ablate(&cfg, axis, &seeds, &a.thresholds, &mut |r| {
        let maps: Vec<String> = r.map.iter().map(|m| format!("{m:.4}")).collect();
        let _ = writeln!(
            stdout.lock(),
            "{} seed {} stages {}: {}",
            r.variant,
            r.seed,
            r.stages,
            maps.join(" ")
        );
    })?;
    let table = format_table(&a.thresholds, &rows);
    write_atomic(&out.join("ablation.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
