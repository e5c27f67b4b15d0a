//! The `jcra` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use jcra_core::checks;
use jcra_core::graph::OpKind;
use jcra_core::losses::{FocalParams, LossWeights};
use jcra_core::matcher::{build_cost_matrix, hungarian};
use jcra_core::metrics::{default_sigmas, evaluate, ApReport, DtInstance, EvalParams};
use jcra_core::pose::PoseOutput;
use jcra_core::synth::{generate_dataset, generate_scene, DatasetSpec};
use jcra_core::tensor::Tensor;
use jcra_core::trainer::{overfit, predict_scenes};

use crate::config::{Config, ConfigFile, ModelSection};
use crate::error::{write, Error, Result};
use crate::json::{fixed, to_canonical};
use crate::{bench, checkpoint, coco, report, trace};

#[derive(Debug, Parser)]
#[command(name = "jcra", version, about = "Toy one-stage multi-person pose regression: evaluation, training and diagnostics")]
#[command(after_help = "Exit codes: 0 ok, 1 I/O error, 2 schema or config error, 3 gradient check failure, \
4 non-finite loss, 5 checkpoint/config mismatch.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Keypoint AP (AP, AP50, AP75, AP_M, AP_L) of a COCO result file.
    Eval {
        /// COCO keypoint ground-truth JSON.
        #[arg(long)]
        gt: PathBuf,
        /// COCO keypoint results JSON (array of detections).
        #[arg(long)]
        dt: PathBuf,
        /// JSON array of per-keypoint sigmas [default: the COCO table for 17 keypoints, the mini table for 4].
        #[arg(long)]
        sigmas: Option<PathBuf>,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Config document; only its "eval" section is used [default: OKS 0.50:0.05:0.95, 20 detections per image].
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every differentiable operation, the attention layers, the losses and the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random inputs per check.
        #[arg(long, default_value_t = checks::DEFAULT_TRIALS)]
        trials: usize,
        /// Negative control: scale this op's backward rule by 1.5.
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
    /// Trains the toy model on a generated dataset, then writes the checkpoint and loss trace.
    TrainToy {
        /// Config document [default: toy model, Adam lr 1.5e-3, 5000 steps, 50 scenes from dataset seed 2024].
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Trace output path (JSON lines).
        #[arg(long)]
        trace: PathBuf,
    },
    /// Runs a checkpoint on one generated scene and prints the detections.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the generated scene.
        #[arg(long)]
        scene_seed: u64,
        /// Write the detections as COCO results JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Write the scene's ground truth as COCO JSON.
        #[arg(long)]
        dump_gt: Option<PathBuf>,
        /// Config document; its model section must match the checkpoint [default: the checkpoint's own config].
        #[arg(long)]
        config: Option<PathBuf>,
        /// Minimum score of a printed detection [default: train.score_threshold, 0.5].
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Median forward latency of the one-stage model against the two-decoder variant.
    Bench {
        /// Config document; its model section is timed [default: toy model].
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        /// Untimed runs before measuring.
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Prints the matching cost matrix and the Hungarian assignment for one image.
    MatchDemo {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        dt: PathBuf,
        /// Image to match [default: the smallest image id].
        #[arg(long)]
        image_id: Option<u64>,
        /// JSON array of per-keypoint sigmas [default: as for eval].
        #[arg(long)]
        sigmas: Option<PathBuf>,
    },
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn resolve_sigmas(path: Option<&Path>, k: usize) -> Result<Vec<f64>> {
    let sigmas = match path {
        Some(p) => coco::load_sigmas(p)?,
        None => default_sigmas(k)
            .ok_or_else(|| Error::Schema(format!("no default sigmas for {k} keypoints; pass --sigmas")))?,
    };
    if sigmas.len() != k {
        return Err(Error::Schema(format!("{} sigmas for {k} keypoints", sigmas.len())));
    }
    Ok(sigmas)
}

fn eval_params(config: Option<&Path>, sigmas: Option<&Path>, k: usize) -> Result<EvalParams> {
    let file = match config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut params = EvalParams::coco(Vec::new());
    if let Some(e) = &file.eval {
        e.apply(&mut params);
    }
    if sigmas.is_some() || params.sigmas.is_empty() {
        params.sigmas = resolve_sigmas(sigmas, k)?;
    }
    if params.sigmas.len() != k {
        return Err(Error::Schema(format!("{} sigmas for {k} keypoints", params.sigmas.len())));
    }
    params.validate()?;
    Ok(params)
}

pub fn cmd_eval(
    gt: &Path,
    dt: &Path,
    sigmas: Option<&Path>,
    json: Option<&Path>,
    config: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let gts = coco::load_gt(gt)?;
    let dts = coco::load_dt(dt, &gts)?;
    let k = gts.num_keypoints().or_else(|| dts.first().map(|d| d.keypoints.len()));
    let r = match k {
        Some(k) => evaluate(&gts.instances, &dts, &eval_params(config, sigmas, k)?)?,
        None => ApReport {
            ap: -1.0,
            ap50: -1.0,
            ap75: -1.0,
            ap_m: -1.0,
            ap_l: -1.0,
        },
    };
    emit(out, &report::table(&r))?;
    if let Some(p) = json {
        write(p, report::json_text(&r).as_bytes())?;
    }
    Ok(())
}

pub fn cmd_gradcheck(seed: u64, trials: usize, corrupt_op: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let corrupt = match corrupt_op {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::Schema(format!("unknown op {name}")))?),
        None => None,
    };
    let mut failed = 0;
    for (i, c) in checks::suite().iter().enumerate() {
        let r = checks::run_check(c, i, seed, trials, corrupt)?;
        if !r.passed() {
            failed += 1;
        }
        emit(
            out,
            &format!(
                "{:<14} {:<22} max_rel_err {:.3e}  tol {:.0e}  {}\n",
                r.group.name(),
                r.name,
                r.max_error,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            ),
        )?;
    }
    if failed > 0 {
        return Err(Error::GradCheck { failed });
    }
    Ok(())
}

pub fn cmd_train_toy(config: Option<&Path>, ckpt: &Path, trace_path: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = Config::load(config)?;
    let scenes = generate_dataset(&cfg.dataset_spec()?)?;
    let result = overfit(&scenes, &cfg.train, &cfg.model)?;
    checkpoint::save(ckpt, &result.model)?;
    write(trace_path, trace::render(&result.trace, cfg.train.log_every).as_bytes())?;

    let dts = predict_scenes(&result.model, &scenes, cfg.train.score_threshold, cfg.eval.max_detections)?;
    let gts: Vec<_> = scenes.iter().flat_map(|s| s.gts.iter().cloned()).collect();
    let r = evaluate(&gts, &dts, &cfg.eval)?;
    let last = result.trace.steps.last().expect("steps >= 1");
    emit(
        out,
        &format!(
            "steps {}  final loss {:.6}  params checksum {:016x}\n",
            result.trace.steps.len(),
            last.total,
            result.trace.checksum
        ),
    )?;
    emit(out, &report::table(&r))
}

/// Config for a checkpoint: the file's sections over the checkpoint's model.
fn infer_config(config: Option<&Path>, bytes: &[u8]) -> Result<(Config, jcra_core::model::Model)> {
    let echoed = checkpoint::read_config(bytes)?;
    let mut file = match config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let model = match &file.model {
        Some(_) => {
            let expected = file.resolve()?.model;
            checkpoint::decode_expecting(bytes, &expected)?
        }
        None => {
            file.model = Some(ModelSection::full(&echoed));
            checkpoint::decode(bytes)?
        }
    };
    Ok((file.resolve()?, model))
}

pub struct InferArgs<'a> {
    pub checkpoint: &'a Path,
    pub scene_seed: u64,
    pub dump: Option<&'a Path>,
    pub dump_gt: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub threshold: Option<f64>,
}

pub fn cmd_infer(a: &InferArgs<'_>, out: &mut dyn Write) -> Result<()> {
    let bytes = crate::error::read(a.checkpoint)?;
    let (cfg, model) = infer_config(a.config, &bytes)?;
    let threshold = a.threshold.unwrap_or(cfg.train.score_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Schema("threshold must be in [0, 1]".into()));
    }
    let spec = DatasetSpec {
        seed: a.scene_seed,
        scenes: 1,
        ..cfg.dataset_spec()?
    };
    let scene = generate_scene(&spec.scene_spec(0))?;
    let (pose, _) = model.predict(&scene.image)?;
    let dts = pose.to_detections(
        scene.image_id,
        scene.width() as f64,
        scene.height() as f64,
        threshold,
        cfg.eval.max_detections,
    );
    emit(
        out,
        &format!(
            "scene seed {} image {} persons {} detections {}\n",
            a.scene_seed,
            scene.image_id,
            scene.gts.len(),
            dts.len()
        ),
    )?;
    for d in &dts {
        let kps: Vec<String> = d
            .keypoints
            .iter()
            .map(|k| format!("({}, {}, {})", fixed(k[0]), fixed(k[1]), fixed(k[2])))
            .collect();
        emit(out, &format!("score {}  {}\n", fixed(d.score), kps.join(" ")))?;
    }
    if let Some(p) = a.dump {
        write(p, to_canonical(&coco::dt_json(&dts)).as_bytes())?;
    }
    if let Some(p) = a.dump_gt {
        let gt = coco::gt_json(std::slice::from_ref(&scene), &spec.skeleton);
        write(p, to_canonical(&gt).as_bytes())?;
    }
    Ok(())
}

pub fn cmd_bench(config: Option<&Path>, repeats: usize, warmup: usize, seed: u64, out: &mut dyn Write) -> Result<()> {
    let cfg = Config::load(config)?;
    let r = bench::run(&cfg.model, repeats, warmup, seed)?;
    emit(out, &r.render())
}

pub fn cmd_match_demo(
    gt: &Path,
    dt: &Path,
    image_id: Option<u64>,
    sigmas: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let gts = coco::load_gt(gt)?;
    let dts = coco::load_dt(dt, &gts)?;
    let image = match image_id {
        Some(id) if gts.image_ids.contains(&id) => id,
        Some(id) => return Err(Error::Schema(format!("unknown image_id {id}"))),
        None => *gts.image_ids.iter().next().ok_or_else(|| Error::Schema("no images".into()))?,
    };
    let g: Vec<_> = gts.instances.iter().filter(|x| x.image_id == image && !x.iscrowd).cloned().collect();
    let mut d: Vec<&DtInstance> = dts.iter().filter(|x| x.image_id == image).collect();
    d.sort_by(|a, b| b.score.total_cmp(&a.score));
    emit(out, &format!("image {image}: {} ground truths, {} detections\n", g.len(), d.len()))?;
    if g.is_empty() {
        return emit(out, "assignment: empty\n");
    }
    let k = g[0].keypoints.len();
    let preds = PoseOutput::new(
        Tensor::vector(d.iter().map(|x| x.score).collect()),
        Tensor::new(&[d.len(), k, 3], d.iter().flat_map(|x| x.keypoints.iter().flatten().copied()).collect())?,
    )?;
    let cost = build_cost_matrix(&preds, &g, &LossWeights::default(), &FocalParams::default(), &resolve_sigmas(sigmas, k)?)?;
    let assignment = hungarian(&cost)?;
    emit(out, "cost (rows: ground truths, columns: detections by descending score)\n")?;
    for r in 0..cost.rows() {
        let row: Vec<String> = (0..cost.cols()).map(|c| format!("{:>12}", fixed(cost.get(r, c)))).collect();
        emit(out, &format!("{}\n", row.join("")))?;
    }
    emit(out, "assignment\n")?;
    for (gi, &p) in assignment.gt_to_pred.iter().enumerate() {
        emit(out, &format!("gt {gi} -> dt {p}\n"))?;
    }
    emit(out, &format!("total cost {}\n", fixed(assignment.total_cost)))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Eval {
            gt,
            dt,
            sigmas,
            json,
            config,
        } => cmd_eval(&gt, &dt, sigmas.as_deref(), json.as_deref(), config.as_deref(), out),
        Command::Gradcheck { seed, trials, corrupt_op } => cmd_gradcheck(seed, trials, corrupt_op.as_deref(), out),
        Command::TrainToy { config, out: ckpt, trace } => cmd_train_toy(config.as_deref(), &ckpt, &trace, out),
        Command::Infer {
            checkpoint,
            scene_seed,
            dump,
            dump_gt,
            config,
            threshold,
        } => cmd_infer(
            &InferArgs {
                checkpoint: &checkpoint,
                scene_seed,
                dump: dump.as_deref(),
                dump_gt: dump_gt.as_deref(),
                config: config.as_deref(),
                threshold,
            },
            out,
        ),
        Command::Bench {
            config,
            repeats,
            warmup,
            seed,
        } => cmd_bench(config.as_deref(), repeats, warmup, seed, out),
        Command::MatchDemo {
            gt,
            dt,
            image_id,
            sigmas,
        } => cmd_match_demo(&gt, &dt, image_id, sigmas.as_deref(), out),
    }
}
