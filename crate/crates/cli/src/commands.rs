use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use flowtrack_core::config::{parse_config_over, Config};
use flowtrack_core::flow_mask::layer_masks;
use flowtrack_core::numerics::{load_checkpoint, save_checkpoint, GRAD_TOLERANCE};
use flowtrack_core::pipeline::{
    format_predictions, read_rects, write_sequence_dir, SequenceDir, Tracker,
};
use flowtrack_core::synth_bench::{
    build_sample, check_gradients, compute_metrics, emit_heatmap, gen_dataset, gen_sequence,
    loss_trend_decreasing, run_ablation, train_toy, AblationProtocol, MetricsReport, SampleSpec,
    SynthConfig, TrendVerdict,
};
use flowtrack_core::{Error, ImageCrop, ParamStore, Rect, Variant};

use crate::{Command, GlobalArgs, Preset};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// A check ran to completion and did not pass.
    CheckFailed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Configuration problems are usage errors; everything else happened
/// while running.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 1,
        _ => 2,
    }
}

fn default_preset(command: &Command) -> Preset {
    match command {
        Command::TrainToy { .. } | Command::Ablate { .. } | Command::GradCheck { .. } => {
            Preset::Toy
        }
        _ => Preset::Full,
    }
}

/// Preset defaults, then the config file, then `--set` overrides.
pub fn load_config(global: &GlobalArgs, command: &Command) -> CliResult<Config> {
    let base = match global.preset.unwrap_or_else(|| default_preset(command)) {
        Preset::Full => Config::default(),
        Preset::Toy => Config::toy(Variant::Full),
    };
    let text = match &global.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = parse_config_over(base, &text)?;
    cfg.apply_overrides(&global.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the run directory and writes the config snapshot into it.
fn run_dir(cfg: &Config, global: &GlobalArgs, command: &Command) -> CliResult<PathBuf> {
    let name = global.run_name.as_deref().unwrap_or(command.name());
    let dir = cfg.paths.out_dir.join(name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

fn parse_variants(list: &str) -> CliResult<Vec<Variant>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<Variant>()
                .map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect()
}

fn parse_seeds(list: &str) -> CliResult<Vec<u64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|e| CliError::Usage(format!("bad seed {s:?}: {e}")))
        })
        .collect()
}

fn with_variant(cfg: &Config, v: Variant) -> Config {
    let mut c = cfg.clone();
    c.set("flow.variant", v.name())
        .expect("variant names always parse");
    c
}

fn params_for(cfg: &Config, checkpoint: Option<&Path>) -> CliResult<ParamStore> {
    let path = checkpoint.or(cfg.paths.checkpoint.as_deref());
    match path {
        Some(p) => {
            let store = load_checkpoint(p)?;
            let fresh = cfg.model.init_params(cfg.seed)?;
            for (name, param) in fresh.iter() {
                let loaded = store.get(name).ok_or_else(|| {
                    Error::Checkpoint(format!("{} lacks parameter `{name}`", p.display()))
                })?;
                if loaded.shape() != param.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` is {:?} in the checkpoint but {:?} in the config",
                        loaded.shape(),
                        param.value.shape()
                    ))
                    .into());
                }
            }
            Ok(store)
        }
        None => Err(CliError::Usage(
            "no checkpoint: pass --checkpoint or set paths.checkpoint".into(),
        )),
    }
}

/// Metrics of frames after the first against the ground truth.
fn score(pred: &[Rect], gt: &[Rect]) -> CliResult<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        ))
        .into());
    }
    let skip = usize::from(gt.len() > 1);
    Ok(compute_metrics(&pred[skip..], &gt[skip..])?)
}

pub fn dispatch(global: &GlobalArgs, command: &Command) -> CliResult {
    let cfg = load_config(global, command)?;
    let dir = run_dir(&cfg, global, command)?;
    log::info!("run directory {}", dir.display());
    match command {
        Command::TrainToy { sequences } => train(&cfg, &dir, *sequences),
        Command::GenSynth { count } => gen_synth(&cfg, &dir, *count),
        Command::Track {
            sequence,
            checkpoint,
        } => track(&cfg, &dir, sequence, checkpoint.as_deref()),
        Command::Eval {
            sequence,
            predictions,
            checkpoint,
        } => eval(
            &cfg,
            &dir,
            sequence,
            predictions.as_deref(),
            checkpoint.as_deref(),
        ),
        Command::Ablate {
            variants,
            seeds,
            train_sequences,
            eval_sequences,
        } => ablate(
            &cfg,
            &dir,
            variants,
            seeds,
            *train_sequences,
            *eval_sequences,
        ),
        Command::EmitHeatmap {
            sequence,
            frame,
            checkpoint,
        } => heatmap(
            &cfg,
            &dir,
            sequence.as_deref(),
            *frame,
            checkpoint.as_deref(),
        ),
        Command::GradCheck { eps } => grad_check(&cfg, &dir, *eps),
        Command::MaskDump { variants } => mask_dump(&cfg, &dir, variants.as_deref()),
    }
}

fn train(cfg: &Config, dir: &Path, sequences: usize) -> CliResult {
    let data = gen_dataset(&cfg.synth, sequences)?;
    let tc = cfg.train_config();
    let out = train_toy(&cfg.model, &cfg.run, &data, &tc)?;
    save_checkpoint(&out.params, &dir.join("model.ckpt"))?;
    fs::write(dir.join("loss.csv"), out.curve_csv())?;
    let summary = serde_json::json!({
        "steps": out.curve.len(),
        "initial_loss": out.curve.first(),
        "final_loss": out.curve.last(),
        "loss_decreasing": loss_trend_decreasing(&out.curve, 50),
        "data_hash": out.data_hash,
    });
    fs::write(dir.join("summary.json"), format!("{summary}\n"))?;
    println!(
        "trained {} steps, loss {:.4} -> {:.4}",
        out.curve.len(),
        out.curve.first().copied().unwrap_or(f64::NAN),
        out.curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn gen_synth(cfg: &Config, dir: &Path, count: usize) -> CliResult {
    for (i, seq) in gen_dataset(&cfg.synth, count)?.iter().enumerate() {
        write_sequence_dir(
            &dir.join(format!("seq-{:04}", i + 1)),
            &seq.frames,
            &seq.boxes,
        )?;
    }
    println!("wrote {count} sequences to {}", dir.display());
    Ok(())
}

fn load_sequence(path: &Path) -> CliResult<(SequenceDir, Vec<ImageCrop>)> {
    let seq = SequenceDir::open(path)?;
    let frames = seq.load_frames()?;
    Ok((seq, frames))
}

fn track(cfg: &Config, dir: &Path, sequence: &Path, checkpoint: Option<&Path>) -> CliResult {
    let params = params_for(cfg, checkpoint)?;
    let (seq, frames) = load_sequence(sequence)?;
    let tracker = Tracker::new(&cfg.model, &params, &cfg.run)?;
    let results = tracker.run_sequence(&frames, &seq.groundtruth[0])?;
    fs::write(dir.join("predictions.txt"), format_predictions(&results))?;
    if seq.fully_annotated() {
        let pred: Vec<Rect> = results.iter().map(|r| r.rect).collect();
        let m = score(&pred, &seq.groundtruth)?;
        fs::write(
            dir.join("summary.jsonl"),
            format!("{}\n", m.json_line(&seq.name)),
        )?;
        println!("{}: AO {:.2}%", seq.name, 100.0 * m.ao);
    }
    Ok(())
}

fn eval(
    cfg: &Config,
    dir: &Path,
    sequences: &[PathBuf],
    predictions: Option<&Path>,
    checkpoint: Option<&Path>,
) -> CliResult {
    if predictions.is_some() && sequences.len() != 1 {
        return Err(CliError::Usage(
            "--predictions needs exactly one --sequence".into(),
        ));
    }
    let params = match predictions {
        Some(_) => None,
        None => Some(params_for(cfg, checkpoint)?),
    };
    let mut lines = String::new();
    let mut reports = Vec::new();
    for path in sequences {
        let seq = SequenceDir::open(path)?;
        let pred = match (predictions, &params) {
            (Some(p), _) => read_rects(p)?,
            (None, Some(params)) => {
                let frames = seq.load_frames()?;
                let tracker = Tracker::new(&cfg.model, params, &cfg.run)?;
                let results = tracker.run_sequence(&frames, &seq.groundtruth[0])?;
                results.iter().map(|r| r.rect).collect()
            }
            (None, None) => unreachable!("parameters are loaded when no predictions are given"),
        };
        let m = score(&pred, &seq.groundtruth)?;
        lines.push_str(&m.json_line(&seq.name));
        lines.push('\n');
        reports.push(m);
    }
    let mean = MetricsReport::mean_of(&reports);
    lines.push_str(&mean.json_line("_aggregate"));
    lines.push('\n');
    fs::write(dir.join("metrics.jsonl"), &lines)?;
    println!(
        "AO {:.2}% SR50 {:.2}% SR75 {:.2}% AUC {:.2}% P {:.2}% Pn {:.2}%",
        100.0 * mean.ao,
        100.0 * mean.sr50,
        100.0 * mean.sr75,
        100.0 * mean.auc,
        100.0 * mean.precision,
        100.0 * mean.norm_precision
    );
    Ok(())
}

fn ablate(
    cfg: &Config,
    dir: &Path,
    variants: &str,
    seeds: &str,
    train_sequences: usize,
    eval_sequences: usize,
) -> CliResult {
    let variants = parse_variants(variants)?;
    let protocol = AblationProtocol {
        variants,
        seeds: parse_seeds(seeds)?,
        train_data: cfg.synth.clone(),
        train_sequences,
        eval_data: SynthConfig {
            seed: cfg.synth.seed.wrapping_add(1_000_000),
            ..cfg.synth.clone()
        },
        eval_sequences,
        train: cfg.train_config(),
        run: cfg.run.clone(),
    };
    let result = run_ablation(
        &protocol,
        |v| with_variant(cfg, v).model,
        |msg| log::info!("{msg}"),
    )?;
    let table = result.table();
    fs::write(dir.join("table.txt"), &table)?;
    fs::write(dir.join("ablation.csv"), result.csv())?;
    print!("{table}");
    if let Some(cells) = result.mask_diff_cells {
        println!("baseline vs A: {cells} mask cells differ, all template-query/search-key");
    }
    let ladder: Vec<Variant> = protocol.variants.clone();
    match result.trend(&ladder) {
        TrendVerdict::Pass => println!("trend: non-decreasing median AO"),
        TrendVerdict::Warn(w) => println!("trend warning: {}", w.join("; ")),
        TrendVerdict::Fail(f) => println!("trend inverted: {}", f.join("; ")),
    }
    Ok(())
}

fn heatmap(
    cfg: &Config,
    dir: &Path,
    sequence: Option<&Path>,
    frame: usize,
    checkpoint: Option<&Path>,
) -> CliResult {
    if frame < 2 {
        return Err(CliError::Usage("--frame must be at least 2".into()));
    }
    let params = match checkpoint.or(cfg.paths.checkpoint.as_deref()) {
        Some(_) => params_for(cfg, checkpoint)?,
        None => {
            log::warn!("no checkpoint given; using freshly initialised parameters");
            cfg.model.init_params(cfg.seed)?
        }
    };
    let (frames, first) = match sequence {
        Some(p) => {
            let (seq, frames) = load_sequence(p)?;
            (frames, seq.groundtruth[0])
        }
        None => {
            let s = gen_sequence(&cfg.synth)?;
            let first = s.boxes[0];
            (s.frames, first)
        }
    };
    if frame > frames.len() {
        return Err(CliError::Usage(format!(
            "--frame {frame} beyond the {} frames",
            frames.len()
        )));
    }
    let tracker = Tracker::new(&cfg.model, &params, &cfg.run)?;
    let mut state = tracker.init(&frames[0], &first)?;
    for f in &frames[1..frame - 1] {
        tracker.track(&mut state, f)?;
        tracker.maybe_update_dynamic(&mut state, f)?;
    }
    let (crop, out) = tracker.predict(&state, &frames[frame - 1], false)?;
    let search = crop.sample(&frames[frame - 1]);
    emit_heatmap(&out.maps.cls, &dir.join("cls.pgm"), Some(&search))?;
    fs::write(dir.join("maps.csv"), out.maps.to_csv())?;
    fs::write(dir.join("trace.txt"), out.trace.to_text())?;
    println!(
        "peak {:.4} at {:?}",
        out.confidence,
        crop.to_frame(&out.bbox)
    );
    Ok(())
}

fn grad_check(cfg: &Config, dir: &Path, eps: f64) -> CliResult {
    let model = flowtrack_core::model::ModelConfig::tiny(cfg.policy().variant);
    let params = model.init_params(cfg.seed)?;
    let seq = gen_sequence(&SynthConfig {
        length: 4,
        seed: cfg.seed,
        ..cfg.synth.clone()
    })?;
    let spec = SampleSpec {
        sequence: 0,
        frame: 2,
        dynamic_frame: 1,
        shift: (0.3, -0.2),
        log_scale: 0.1,
        flip: false,
    };
    let sample = build_sample(&model, &cfg.run, &seq, &spec)?;
    let report = check_gradients(&model, &params, &sample, cfg.train.weights, eps)?;
    let text = format!(
        "checked {} entries\nmax relative error {:.3e}\nworst {}[{}] analytic {:.9e} numeric {:.9e}\n",
        report.checked,
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric
    );
    fs::write(dir.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if report.max_rel_error >= GRAD_TOLERANCE {
        return Err(CliError::CheckFailed(format!(
            "max relative error {:.3e} >= {GRAD_TOLERANCE:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn mask_dump(cfg: &Config, dir: &Path, variants: Option<&str>) -> CliResult {
    let variants = match variants {
        Some(list) => parse_variants(list)?,
        None => Variant::ALL.to_vec(),
    };
    for v in variants {
        let c = with_variant(cfg, v);
        let layout = c.model.geometry.layout(v);
        let vdir = dir.join("masks").join(v.name());
        fs::create_dir_all(&vdir)?;
        let masks = layer_masks(c.policy(), &layout)?;
        for (i, m) in masks.iter().enumerate() {
            fs::write(
                vdir.join(format!("layer{:02}.txt", i + 1)),
                m.to_grid_text(),
            )?;
        }
        let legend = format!(
            "Z {:?}\nDT {:?}\nDB {:?}\nX {:?}\n",
            layout.z_range(),
            layout.dt_range(),
            layout.db_range(),
            layout.x_range()
        );
        fs::write(vdir.join("groups.txt"), legend)?;
        println!("{}: {} layers", v.name(), masks.len());
    }
    Ok(())
}
