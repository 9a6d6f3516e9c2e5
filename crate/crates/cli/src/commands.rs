use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde_json::json;

use steve::config::{RunConfig, Split};
use steve::diagnostic::{self, Diagnostic};
use steve::eval::{self, EvalSettings, MaskSource};
use steve::experiment::{self, ExperimentConfig, ExperimentReport, Variant};
use steve::synthgen::{generate_clips, VideoClip};
use steve::train::{load_model, TrainOutput, Trainer};
use steve::{dataset, Error};

use crate::output::{StagedDir, StagedFiles};
use crate::{visualize, Command};

pub const SEED_ENV: &str = "STEVE_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{} exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 for configuration and usage problems, 3 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::Core(e) if e.is_config_error() => 2,
            _ => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            config,
            out,
            split,
            num_clips,
            force,
        } => gen_data(config.as_deref(), &out, &split, num_clips, force),
        Command::Train {
            config,
            data,
            out,
            steps,
            force,
        } => train(config.as_deref(), &data, &out, steps, force),
        Command::Eval {
            checkpoint,
            data,
            report,
            sweeps,
            extra_slots,
            force,
        } => evaluate(&checkpoint, &data, &report, sweeps.as_deref(), extra_slots.as_deref(), force),
        Command::Diagnose {
            checkpoint,
            data,
            out,
            steps,
            eval_clips,
            force,
        } => diagnose(&checkpoint, &data, &out, steps, eval_clips, force),
        Command::Visualize {
            checkpoint,
            data,
            out,
            diagnostic,
            clips,
            frames,
            plot_clips,
            scale,
            force,
        } => {
            let staged = StagedDir::new(&out, force)?;
            let opts = visualize::Options {
                clips,
                frames,
                plot_clips,
                scale,
            };
            visualize::run(&checkpoint, diagnostic.as_deref(), &data, staged.path(), &opts)?;
            staged.commit()?;
            Ok(())
        }
        Command::Experiment {
            config,
            out,
            steps,
            seeds,
            force,
        } => run_experiment(config.as_deref(), &out, steps, seeds, force),
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_clips(data: &Path) -> Result<Vec<VideoClip>> {
    Ok(dataset::read_dataset(data)?)
}

/// The dataset must match the image geometry the model was built for.
fn check_geometry(cfg: &RunConfig, clips: &[VideoClip], data: &Path) -> Result<()> {
    if clips.is_empty() {
        return Err(CliError::Config(format!("{}: dataset has no clips", data.display())));
    }
    if let Some(c) = clips.iter().find(|c| c.image_size != cfg.data.image_size) {
        return Err(CliError::Config(format!(
            "{}: clip {} is {}x{} but the model expects {}x{}",
            data.display(),
            c.id,
            c.image_size,
            c.image_size,
            cfg.data.image_size,
            cfg.data.image_size
        )));
    }
    Ok(())
}

fn gen_data(config: Option<&Path>, out: &Path, split: &str, num_clips: usize, force: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed_override()? {
        cfg.data.seed = seed;
    }
    let split = Split::parse(split).ok_or_else(|| CliError::Config(format!("unknown split {split:?}")))?;
    let scene = cfg.data.scene(split);
    let clips = generate_clips(&scene, num_clips)?;
    let staged = StagedDir::new(out, force)?;
    dataset::write_dataset(&clips, staged.path(), split.name(), Some(&scene))?;
    write_json(&staged.path().join("config.json"), &cfg.to_json())?;
    let dir = staged.commit()?;
    eprintln!("wrote {} {} clips to {}", clips.len(), split.name(), dir.display());
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, steps: Option<usize>, force: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed_override()? {
        cfg.train.seed = seed;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let clips = read_clips(data)?;
    check_geometry(&cfg, &clips, data)?;
    let staged = StagedDir::new(out, force)?;
    write_json(&staged.path().join("config.json"), &cfg.to_json())?;
    let mut model = steve::model::Steve::new(&cfg, DType::F32)?;
    let output = TrainOutput {
        dir: Some(staged.path().to_path_buf()),
    };
    let report = Trainer::new(&mut model).run(&clips, &output, |row| {
        eprintln!(
            "step {:>6}  loss {:>10.3}  ce {:>10.3}  dvae {:>9.3}  tau {:.3}",
            row.step, row.total, row.ce, row.dvae, row.tau
        );
    })?;
    let dir = staged.commit()?;
    eprintln!("trained {} steps, checkpoint in {}", report.final_step, dir.join("model.ckpt").display());
    Ok(())
}

fn parse_extra_slots(model: &steve::model::Steve, clips: &[VideoClip], arg: Option<&str>) -> Result<Option<usize>> {
    match arg {
        None => Ok(None),
        Some("auto") => Ok(Some(eval::ood_extra_slots(model, clips))),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("--extra-slots {v:?} is neither a count nor `auto`"))),
    }
}

fn evaluate(checkpoint: &Path, data: &Path, report: &Path, sweeps: Option<&Path>, extra_slots: Option<&str>, force: bool) -> Result<()> {
    let model = load_model(checkpoint, DType::F32)?;
    let clips = read_clips(data)?;
    check_geometry(&model.cfg, &clips, data)?;
    let mut targets = vec![
        report.to_path_buf(),
        report.with_extension("csv"),
        report.with_extension("config.json"),
    ];
    if let Some(s) = sweeps {
        targets.push(s.to_path_buf());
    }
    let staged = StagedFiles::new(&targets, force)?;
    let settings = EvalSettings::for_model(&model);
    let source = MaskSource::default_for(&model);
    let extra = parse_extra_slots(&model, &clips, extra_slots)?;
    let result = match extra {
        Some(k) => eval::ood_eval(&model, &clips, k, source, settings)?,
        None => eval::evaluate_dataset(&model, &clips, source, settings)?,
    };
    eval::write_report(&staged.path_for(report), &result)?;
    let agg = eval::aggregate(&result);
    let echo = json!({
        "checkpoint": checkpoint,
        "data": data,
        "num_slots": settings.num_slots + extra.unwrap_or(0),
        "mask_source": match source { MaskSource::Attention => "attention", MaskSource::Decoding(_) => "decoding" },
        "aggregate": agg,
        "config": model.cfg.to_json(),
    });
    write_json(&staged.path_for(&report.with_extension("config.json")), &echo)?;
    if let Some(s) = sweeps {
        let sw = eval::sweeps(&model, &clips, source, settings)?;
        eval::write_sweeps(&staged.path_for(s), &sw)?;
    }
    staged.commit()?;
    eprintln!(
        "{} clips  image fg-ari {}  video fg-ari {}",
        agg.clips,
        fmt(agg.image_fgari),
        fmt(agg.video_fgari)
    );
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn diagnose(checkpoint: &Path, data: &Path, out: &Path, steps: Option<usize>, eval_clips: Option<usize>, force: bool) -> Result<()> {
    let mut model = load_model(checkpoint, DType::F32)?;
    if let Some(seed) = seed_override()? {
        model.cfg.train.seed = seed;
    }
    let clips = read_clips(data)?;
    check_geometry(&model.cfg, &clips, data)?;
    let steps = steps.unwrap_or(model.cfg.train.diagnostic_steps);
    let staged = StagedDir::new(out, force)?;
    let run = diagnostic::train_diagnostic(&model, &clips, steps, |step, loss| {
        if step % model.cfg.train.log_every.max(1) == 0 || step + 1 == steps {
            eprintln!("diagnostic step {step:>6}  loss {loss:>10.3}");
        }
    })?;
    let dir = staged.path();
    run.diagnostic.save(&dir.join("diagnostic.ckpt"), &model.cfg, steps)?;
    let mut w = csv::Writer::from_path(dir.join("losses.csv")).map_err(Error::from)?;
    w.write_record(["step", "loss"]).map_err(Error::from)?;
    for (i, l) in run.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(Error::from)?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: dir.join("losses.csv"),
        source,
    })?;
    let scored = &clips[..eval_clips.unwrap_or(clips.len()).min(clips.len())];
    let settings = EvalSettings::for_model(&model);
    let (decoding, attention) = diagnostic::compare_masks(&model, &run.diagnostic, scored, settings)?;
    eval::write_report(&dir.join("decoding_report.json"), &decoding)?;
    eval::write_report(&dir.join("attention_report.json"), &attention)?;
    let (d, a) = (eval::aggregate(&decoding), eval::aggregate(&attention));
    write_json(
        &dir.join("summary.json"),
        &json!({
            "checkpoint": checkpoint,
            "data": data,
            "steps": steps,
            "decoding": d,
            "attention": a,
            "config": model.cfg.to_json(),
        }),
    )?;
    let dir = staged.commit()?;
    eprintln!(
        "video fg-ari: decoding masks {}  attention masks {}  ({})",
        fmt(d.video_fgari),
        fmt(a.video_fgari),
        dir.display()
    );
    Ok(())
}

/// Loads the diagnostic decoder saved by `diagnose`.
pub fn load_diagnostic(path: &Path) -> Result<Diagnostic> {
    Ok(Diagnostic::load(path, DType::F32)?.0)
}

fn run_experiment(config: Option<&Path>, out: &Path, steps: Option<usize>, seeds: Option<Vec<u64>>, force: bool) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| CliError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = steps {
        cfg.base.train.steps = s;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    cfg.base.validate()?;
    let staged = StagedDir::new(out, force)?;
    let report = experiment::run(&cfg, |line| eprintln!("{line}"))?;
    let value = serde_json::to_value(&report).map_err(Error::from)?;
    write_json(&staged.path().join("experiment.json"), &value)?;
    let dir = staged.commit()?;
    print_experiment(&report);
    eprintln!("report in {}", dir.join("experiment.json").display());
    Ok(())
}

fn print_experiment(r: &ExperimentReport) {
    println!("random baseline video fg-ari {}", fmt(r.random.video_fgari));
    for v in Variant::ALL {
        let per_seed: Vec<String> = r.config.seeds.iter().map(|&s| fmt(r.video(v, s))).collect();
        println!("{:<18} {}  mean {}", v.name(), per_seed.join(" "), fmt(r.mean_video(v)));
    }
}
