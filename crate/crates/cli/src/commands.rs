//! Command bodies. Each returns the data for its run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use clap::Parser;
use pvvae_core::checkpoint;
use pvvae_core::data::{generate_corpus, Split};
use pvvae_core::diagnostics::{encode_means, flow_pairs, flow_probe, pca_rgb};
use pvvae_core::diffusion::{FlowCheckpoint, TIME_CONVENTION};
use pvvae_core::plot::{bar_plot, clip_grid, flow_image, line_plot, rgb_frames, Image};
use pvvae_core::predictive::{partition_groups, predictive_forward_with, DropPlan, PredictiveVae};
use pvvae_core::rng::seeded;
use pvvae_core::trainer::{Stage, StepLog, Trainer};
use pvvae_core::VideoClip;
use serde_json::{json, Value};

use crate::cli::{Cli, Command, EvalGenArgs, EvalLatentArgs, EvalReconArgs, GenerateArgs, TrainArgs, TrainFlowArgs, VisualizeArgs};
use crate::config::RunConfig;
use crate::eval::{self, Metrics, METRICS_FILE};
use crate::manifest::{hash_inputs, RunManifest};
use crate::pipeline::{resume_plan, run_stages, stage_config, stage_plan, Corpus, Variant};

/// Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<pvvae_core::Error> for CliError {
    fn from(e: pvvae_core::Error) -> Self {
        match e {
            pvvae_core::Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CmdResult<T> = std::result::Result<T, CliError>;

struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    metrics: Value,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_out(cli: &Cli) -> CmdResult<PathBuf> {
    cli.out.clone().ok_or_else(|| usage("--out is required"))
}

fn to_json<T: serde::Serialize>(v: &T) -> CmdResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Runtime(e.into()))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> CmdResult<PathBuf> {
    let bytes = serde_json::to_vec_pretty(v).map_err(|e| CliError::Runtime(e.into()))?;
    std::fs::write(path, bytes).map_err(|e| pvvae_core::Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn save_png(img: &Image, path: PathBuf) -> CmdResult<PathBuf> {
    img.save_png(&path)?;
    Ok(path)
}

fn mkdir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| pvvae_core::Error::io(dir, e))?;
    Ok(())
}

/// Parses `argv`, runs the command, writes its manifest and returns the
/// process exit code.
pub fn main_with<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(m) => {
            log::info!("{} finished in {:.1}s", m.command, m.wall_clock_secs);
            0
        }
        Err(e) => {
            eprintln!("pvvae: {e}");
            e.exit_code()
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenerateData(_) => "generate-data",
        Command::Train(_) => "train",
        Command::FinetuneDecoder(_) => "finetune-decoder",
        Command::TrainFlow(_) => "train-flow",
        Command::EvalRecon(_) => "eval-recon",
        Command::EvalLatent(_) => "eval-latent",
        Command::EvalGen(_) => "eval-gen",
        Command::Visualize(_) => "visualize",
    }
}

fn cli_args(cli: &Cli) -> Vec<String> {
    let mut v = vec![command_name(&cli.command).to_string()];
    v.push(format!("{:?}", cli.command));
    for (flag, val) in [("--config", &cli.config), ("--out", &cli.out), ("--resume", &cli.resume)] {
        if let Some(p) = val {
            v.push(format!("{flag}={}", p.display()));
        }
    }
    if let Some(s) = cli.seed {
        v.push(format!("--seed={s}"));
    }
    v
}

/// Runs a parsed command and writes `run_manifest.json` into `--out`.
pub fn run(cli: &Cli) -> CmdResult<RunManifest> {
    let start = Instant::now();
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed)?;
    let out = require_out(cli)?;
    let outcome = match &cli.command {
        Command::GenerateData(a) => generate_data(&cfg, a, &out)?,
        Command::Train(a) => train(&cfg, cli, a, &out)?,
        Command::FinetuneDecoder(a) => {
            if a.init.is_none() && cli.resume.is_none() {
                return Err(usage("finetune-decoder needs --init or --resume"));
            }
            let args = TrainArgs {
                data: a.data.clone(),
                stage: Some(Stage::DecoderFinetune),
                preset: a.preset,
                init: a.init.clone(),
            };
            train(&cfg, cli, &args, &out)?
        }
        Command::TrainFlow(a) => train_flow(&cfg, a, &out)?,
        Command::EvalRecon(a) => eval_recon(&cfg, a, &out)?,
        Command::EvalLatent(a) => eval_latent(&cfg, a, &out)?,
        Command::EvalGen(a) => {
            if a.is_ablation() {
                eval_ablation(&cfg, a, &out)?
            } else {
                eval_gen(&cfg, a, &out)?
            }
        }
        Command::Visualize(a) => visualize(&cfg, a, &out)?,
    };
    let mut inputs = outcome.inputs.clone();
    if let Some(c) = &cli.config {
        inputs.insert(0, c.clone());
    }
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let manifest = RunManifest {
        command: command_name(&cli.command).into(),
        args: cli_args(cli),
        config: to_json(&cfg)?,
        seed: cfg.seed,
        input_hash: hash_inputs(&input_refs)?,
        inputs,
        outputs: outcome.outputs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        metrics: outcome.metrics,
    };
    manifest.write(&out)?;
    Ok(manifest)
}

fn generate_data(cfg: &RunConfig, a: &GenerateArgs, out: &Path) -> CmdResult<Outcome> {
    let mut ranges = cfg.data.clone();
    if let Some(f) = a.frames {
        ranges.frames = f as usize;
    }
    if let Some(r) = a.res {
        ranges.height = r as usize;
        ranges.width = r as usize;
    }
    if let Some(s) = a.max_speed {
        ranges.max_speed = s as i64;
    }
    let manifest = generate_corpus(out, a.n as usize, cfg.seed, &ranges)?;
    let val = manifest.entries.iter().filter(|e| e.split == Split::Val).count();
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![out.to_path_buf()],
        metrics: json!({"clips": manifest.entries.len(), "train": manifest.entries.len() - val, "val": val}),
    })
}

fn training_summary(log: &[StepLog]) -> Value {
    let window = (log.len() / 10).max(1);
    json!({
        "steps": log.len(),
        "final_total": log.last().map(|l| l.report.total),
        "smoothed_reconstruction": pvvae_core::trainer::smoothed_reconstruction(log, window),
    })
}

fn train(cfg: &RunConfig, cli: &Cli, a: &TrainArgs, out: &Path) -> CmdResult<Outcome> {
    let corpus = Corpus::load(&a.data)?;
    let plan = match a.stage {
        Some(stage) => vec![stage_config(&cfg.train, a.preset, cfg.schedule, stage)],
        None => stage_plan(&cfg.train, a.preset, cfg.schedule),
    };
    let mut inputs = vec![a.data.clone()];
    let (trainer, log) = if let Some(dir) = &cli.resume {
        inputs.push(dir.clone());
        resume_plan(dir, &corpus.train, &plan, Some(out))?
    } else if let Some(init) = &a.init {
        inputs.push(init.clone());
        let ck = checkpoint::load(init)?;
        let mut t = Trainer::warm_start(&ck, &ck.vae, plan[0].clone())?;
        let log = run_stages(&mut t, &corpus.train, &plan, Some(out))?;
        (t, log)
    } else {
        let mut t = Trainer::new(&cfg.vae, corpus.resolution(), plan[0].clone())?;
        let log = run_stages(&mut t, &corpus.train, &plan, Some(out))?;
        (t, log)
    };
    if log.is_empty() {
        trainer.save(out)?;
    }
    let losses: Vec<f64> = trainer.history().iter().map(|l| l.report.total).collect();
    let plot = save_png(&line_plot(&losses), out.join("loss.png"))?;
    Ok(Outcome {
        inputs,
        outputs: vec![out.to_path_buf(), plot],
        metrics: training_summary(&log),
    })
}

fn load_model(dir: &Path) -> CmdResult<PredictiveVae> {
    Ok(Trainer::from_checkpoint(&checkpoint::load(dir)?)?.model)
}

fn train_flow(cfg: &RunConfig, a: &TrainFlowArgs, out: &Path) -> CmdResult<Outcome> {
    let model = load_model(&a.latents_from)?;
    let corpus = Corpus::load(&a.data)?;
    let flow = eval::fit_flow(&model.vae, &corpus.train.clips, &cfg.flow)?;
    flow.save(out)?;
    let plot = save_png(&line_plot(&flow.losses), out.join("flow_loss.png"))?;
    Ok(Outcome {
        inputs: vec![a.latents_from.clone(), a.data.clone()],
        outputs: vec![out.to_path_buf(), plot],
        metrics: json!({
            "final_loss": flow.losses.last(),
            "time_convention": TIME_CONVENTION,
        }),
    })
}

fn write_metrics(out: &Path, m: &Metrics) -> CmdResult<PathBuf> {
    mkdir(out)?;
    write_json(&out.join(METRICS_FILE), m)
}

fn eval_recon(cfg: &RunConfig, a: &EvalReconArgs, out: &Path) -> CmdResult<Outcome> {
    let corpus = Corpus::load(&a.data)?;
    let clips = eval::eval_clips(&corpus, cfg);
    let mut inputs = vec![a.data.clone()];
    let model = match (&a.vae, a.self_eval) {
        (_, true) => None,
        (Some(dir), false) => {
            inputs.push(dir.clone());
            Some(load_model(dir)?)
        }
        (None, false) => return Err(usage("eval-recon needs --vae or --self-eval")),
    };
    let m = eval::recon_metrics(model.as_ref().map(|m| &m.vae), clips)?;
    let mut outputs = vec![write_metrics(out, &m)?];
    if let Some(model) = &model {
        let shown: Vec<VideoClip> = clips.iter().take(2).cloned().collect();
        let mut rows = Vec::new();
        for c in &shown {
            rows.push(c.clone());
            rows.push(eval::reconstruct_clip(&model.vae, c)?);
        }
        let refs: Vec<&VideoClip> = rows.iter().collect();
        outputs.push(save_png(&clip_grid(&refs), out.join("reconstructions.png"))?);
    }
    Ok(Outcome {
        inputs,
        outputs,
        metrics: to_json(&m)?,
    })
}

/// Input clip above its prediction from the first `k`-dropped prefix.
fn prediction_figure(model: &PredictiveVae, clip: &VideoClip, k: usize, seed: u64) -> CmdResult<Image> {
    let p_t = model.vae.config().p_t;
    let groups = partition_groups(clip.frames - 1, p_t)?;
    let plan = DropPlan::new(groups, k, 1.0, p_t)?;
    let x = clip.to_tensor(model.params().dtype(), model.params().device())?;
    let outp = predictive_forward_with(&model.vae, &x, plan, &model.padding, &mut seeded(seed))?;
    let pred = VideoClip::from_tensor(&outp.recon)?;
    Ok(clip_grid(&[clip, &pred]))
}

fn eval_latent(cfg: &RunConfig, a: &EvalLatentArgs, out: &Path) -> CmdResult<Outcome> {
    let corpus = Corpus::load(&a.data)?;
    let model = load_model(&a.vae)?;
    let (m, probe) = eval::latent_metrics(&model, &corpus, cfg)?;
    let mut outputs = vec![write_metrics(out, &m)?];
    if let Some(ltd) = &m.ltd {
        outputs.push(save_png(&line_plot(&ltd.normalized), out.join("ltd_profile.png"))?);
        outputs.push(save_png(&bar_plot(&ltd.histogram.counts), out.join("ltd_histogram.png"))?);
    }
    let clips = eval::eval_clips(&corpus, cfg);
    let k = eval::predict_groups(clips[0].frames, model.vae.config().p_t, cfg)?;
    if k > 0 {
        let fig = prediction_figure(&model, &clips[0], k, cfg.seed)?;
        outputs.push(save_png(&fig, out.join("prediction.png"))?);
    }
    let mut metrics = to_json(&m)?;
    metrics["probe"] = to_json(&probe)?;
    Ok(Outcome {
        inputs: vec![a.vae.clone(), a.data.clone()],
        outputs,
        metrics,
    })
}

fn eval_gen(cfg: &RunConfig, a: &EvalGenArgs, out: &Path) -> CmdResult<Outcome> {
    let flow_dir = a.flow.as_ref().ok_or_else(|| usage("eval-gen needs --flow unless an --ablate-* flag is given"))?;
    let corpus = Corpus::load(&a.data)?;
    let model = load_model(&a.vae)?;
    let flow = FlowCheckpoint::load(flow_dir)?;
    let n = a.n.map(|n| n as usize).unwrap_or(cfg.eval.n_generated);
    let (m, generated) = eval::gen_metrics(&flow, &model.vae, &corpus, n, cfg.seed)?;
    let mut outputs = vec![write_metrics(out, &m)?];
    let shown: Vec<&VideoClip> = generated.iter().take(4).collect();
    outputs.push(save_png(&clip_grid(&shown), out.join("samples.png"))?);
    let report = json!({
        "metrics": m,
        "n": n,
        "time_convention": TIME_CONVENTION,
    });
    let report_path = a.report.clone().unwrap_or_else(|| out.join("report.json"));
    outputs.push(write_json(&report_path, &report)?);
    Ok(Outcome {
        inputs: vec![a.vae.clone(), flow_dir.clone(), a.data.clone()],
        outputs,
        metrics: report,
    })
}

/// One row per requested variant, each trained from `--vae` and scored on
/// every metric.
fn eval_ablation(cfg: &RunConfig, a: &EvalGenArgs, out: &Path) -> CmdResult<Outcome> {
    let corpus = Corpus::load(&a.data)?;
    let init = checkpoint::load(&a.vae)?;
    let mut variants: Vec<Variant> = a.ablate_preset.iter().map(|&p| Variant::preset(p)).collect();
    variants.extend(a.ablate_drop_ratio.iter().map(|&r| Variant::drop_ratio(a.preset, r)));
    variants.extend(a.ablate_padding.iter().map(|&s| Variant::padding(a.preset, s)));
    let mut cfg = cfg.clone();
    if let Some(n) = a.n {
        cfg.eval.n_generated = n as usize;
    }
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for v in &variants {
        log::info!("ablation row {}", v.name);
        let dir = out.join(&v.name);
        let trainer = v.train(&init, &cfg.train, cfg.schedule, &corpus.train, Some(&dir.join("vae")))?;
        let (m, _) = eval::full_metrics(&trainer.model, &corpus, &cfg)?;
        outputs.push(write_metrics(&dir, &m)?);
        rows.push(json!({"variant": v, "metrics": m}));
    }
    let report = json!({"rows": rows, "time_convention": TIME_CONVENTION});
    mkdir(out)?;
    let report_path = a.report.clone().unwrap_or_else(|| out.join("report.json"));
    outputs.push(write_json(&report_path, &report)?);
    Ok(Outcome {
        inputs: vec![a.vae.clone(), a.data.clone()],
        outputs,
        metrics: report,
    })
}

fn visualize(cfg: &RunConfig, a: &VisualizeArgs, out: &Path) -> CmdResult<Outcome> {
    if !a.pca && !a.flow {
        return Err(usage("visualize needs --pca and/or --flow"));
    }
    let corpus = Corpus::load(&a.data)?;
    let model = load_model(&a.vae)?;
    let vcfg = model.vae.config().clone();
    let clips = eval::eval_clips(&corpus, cfg);
    mkdir(out)?;
    let mut outputs = Vec::new();
    let mut metrics = json!({});
    let shown = &clips[..clips.len().min(4)];
    if a.pca {
        let latents = encode_means(&model.vae, shown)?;
        let z = candle_core::Tensor::cat(&latents, 0)?;
        let pca = pca_rgb(&z)?;
        let (n, l, h, w) = (pca.shape[0], pca.shape[1], pca.shape[2], pca.shape[3]);
        let per = l * h * w * 3;
        let mut rows: Vec<Image> = Vec::new();
        for (i, clip) in shown.iter().enumerate().take(n) {
            rows.push(clip_grid(&[clip]));
            rows.push(rgb_frames(&pca.rgb[i * per..(i + 1) * per], l, h, w, vcfg.p_s));
        }
        let width = rows.iter().map(|r| r.width).max().unwrap_or(1);
        let height: usize = rows.iter().map(|r| r.height + 2).sum();
        let mut img = Image::new(width, height, pvvae_core::plot::WHITE);
        let mut y = 0;
        for r in &rows {
            img.blit(r, 0, y);
            y += r.height + 2;
        }
        outputs.push(save_png(&img, out.join("pca.png"))?);
        outputs.push(write_json(&out.join("pca_basis.json"), &pca.basis)?);
        metrics["pca_explained_variance"] = to_json(&pca.basis.explained_variance)?;
    }
    if a.flow {
        let train_latents = encode_means(&model.vae, &corpus.train.clips)?;
        let val_latents = encode_means(&model.vae, &shown[..1])?;
        let flows = &corpus.eval_split().flows[..1];
        let (probe, report) = flow_probe(&train_latents, &corpus.train.flows, &val_latents, flows, vcfg.p_t, vcfg.p_s, &cfg.probe)?;
        let (pairs, truth) = flow_pairs(&val_latents, flows, vcfg.p_t, vcfg.p_s)?;
        let pred: Vec<f32> = probe.forward(&pairs)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let truth: Vec<f32> = truth.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let (hh, ww) = (flows[0].height, flows[0].width);
        let frame = hh * ww * 2;
        let steps = truth.len() / frame;
        let max_mag = truth
            .chunks(2)
            .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
            .fold(0f32, f32::max);
        let mut img = Image::new(steps * (ww + 2), 2 * (hh + 2), pvvae_core::plot::WHITE);
        for s in 0..steps {
            let r = s * frame..(s + 1) * frame;
            img.blit(&flow_image(&truth[r.clone()], hh, ww, max_mag), s * (ww + 2), 0);
            img.blit(&flow_image(&pred[r], hh, ww, max_mag), s * (ww + 2), hh + 2);
        }
        outputs.push(save_png(&img.upscale(2), out.join("flow.png"))?);
        metrics["probe"] = to_json(&report)?;
    }
    Ok(Outcome {
        inputs: vec![a.vae.clone(), a.data.clone()],
        outputs,
        metrics,
    })
}
