use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ternatraj::bitlinear::QuantMode;
use ternatraj::data::{leave_one_out_split, load_scene, make_windows, synthetic_suite, Homography, SceneTable, TrajectoryWindow};
use ternatraj::deploy::{bench, load_export, memory_report, save_export, BenchConfig, DeployModel};
use ternatraj::metrics::{aggregate, to_csv, SceneResult, AVG_SCENE};
use ternatraj::model::{build_model, load_checkpoint, save_checkpoint, Seq2SeqModel};
use ternatraj::tokenizer::{serialize_window, train_bpe, BpeVocab, TRAJ_ALPHABET};
use ternatraj::train::{build_examples, evaluate_windows, lr_sweep, sweep_csv, train, ModelPredictor, OraclePredictor, Predictor, StepRecord, TrainLog};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG: &str = "config.resolved.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.ttc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const EXPORT_FILE: &str = "model.ttd";
pub const MEMORY_FILE: &str = "memory.csv";
pub const BENCH_FILE: &str = "bench.json";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

/// Output directory plus the resolved configuration of one invocation.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(cfg: RunConfig, out: PathBuf) -> CliResult<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let run = Self { cfg, out };
        run.write(RESOLVED_CONFIG, run.cfg.to_text())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

/// `*.txt` scene files of a directory in name order, each with an optional
/// `<stem>.homography` file next to it.
pub fn load_scene_dir(dir: &Path) -> CliResult<Vec<SceneTable>> {
    require(dir)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut scenes = Vec::with_capacity(files.len());
    for f in files {
        let mut s = load_scene(&f)?;
        let h = f.with_extension("homography");
        if h.exists() {
            s.homography = Some(Homography::load(&h)?);
        }
        scenes.push(s);
    }
    if scenes.is_empty() {
        return Err(ternatraj::Error::Invalid(format!("no scene files in {}", dir.display())).into());
    }
    Ok(scenes)
}

pub fn load_scenes(cfg: &RunConfig) -> CliResult<Vec<SceneTable>> {
    match cfg.data_dir() {
        Some(dir) => load_scene_dir(&dir),
        None => Ok(synthetic_suite(cfg.synth_agents, cfg.synth_noise, cfg.synth_seed)?),
    }
}

/// Training and test scenes: leave-one-out when a held-out scene is set,
/// otherwise every scene on both sides.
pub fn split<'a>(cfg: &RunConfig, scenes: &'a [SceneTable]) -> CliResult<(Vec<&'a SceneTable>, Vec<&'a SceneTable>)> {
    if cfg.held_out.is_empty() {
        return Ok((scenes.iter().collect(), scenes.iter().collect()));
    }
    let s = leave_one_out_split(scenes, &cfg.held_out)?;
    Ok((s.train, vec![s.test]))
}

pub fn windows_of(cfg: &RunConfig, scenes: &[&SceneTable]) -> CliResult<Vec<TrajectoryWindow>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(make_windows(s, &cfg.window)?);
    }
    Ok(out)
}

pub fn tokenizer_train(run: &Run) -> CliResult<PathBuf> {
    let scenes = load_scenes(&run.cfg)?;
    let (train_scenes, _) = split(&run.cfg, &scenes)?;
    let corpus: Vec<String> = windows_of(&run.cfg, &train_scenes)?
        .iter()
        .flat_map(|w| {
            let t = serialize_window(w, run.cfg.precision);
            [t.prompt, t.answer]
        })
        .collect();
    let vocab = train_bpe(&corpus, TRAJ_ALPHABET, run.cfg.vocab_size)?;
    let p = run.path(VOCAB_FILE);
    vocab.save(&p)?;
    Ok(p)
}

fn load_vocab(path: &Path) -> CliResult<BpeVocab> {
    require(path)?;
    Ok(BpeVocab::load(path)?)
}

pub fn train_cmd(run: &Run, vocab_path: &Path) -> CliResult<TrainLog> {
    let vocab = load_vocab(vocab_path)?;
    let scenes = load_scenes(&run.cfg)?;
    let (train_scenes, test_scenes) = split(&run.cfg, &scenes)?;
    let data = build_examples(&windows_of(&run.cfg, &train_scenes)?, &vocab, run.cfg.precision);
    let eval = if run.cfg.held_out.is_empty() {
        Vec::new()
    } else {
        build_examples(&windows_of(&run.cfg, &test_scenes)?, &vocab, run.cfg.precision)
    };
    let mut model = build_model::<f32>(run.cfg.model_config(vocab.len()), run.cfg.mode, run.cfg.bit, run.cfg.train.seed)?;
    let log = train(&mut model, &data, &eval, &run.cfg.train)?;
    save_checkpoint(&model, run.path(CHECKPOINT_FILE))?;
    run.write(TRAIN_LOG_FILE, log.to_csv())?;
    run.write(EPOCH_LOG_FILE, log.epochs_csv())?;
    Ok(log)
}

fn load_model(path: &Path) -> CliResult<Seq2SeqModel<f32>> {
    require(path)?;
    Ok(load_checkpoint(path)?)
}

/// Reads the per-scene rows of a metrics CSV, skipping the average row.
pub fn parse_metrics_csv(text: &str, source: &str) -> CliResult<Vec<SceneResult>> {
    let bad = |line: usize, msg: &str| {
        CliError::Core(ternatraj::Error::Parse {
            source_name: source.to_string(),
            line,
            msg: msg.to_string(),
        })
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let c: Vec<&str> = line.split(',').collect();
        if c.len() < 6 {
            return Err(bad(i + 1, "expected at least 6 columns"));
        }
        if c[0] == AVG_SCENE {
            continue;
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        out.push(SceneResult {
            scene: c[0].to_string(),
            variant: c[1].to_string(),
            ade: f(c[2])?,
            fde: f(c[3])?,
            failure_rate: f(c[4])?,
            samples: c[5].parse().map_err(|_| bad(i + 1, "bad sample count"))?,
        });
    }
    Ok(out)
}

pub struct EvalInputs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub vocab: Option<&'a Path>,
    pub oracle: bool,
    pub variant: Option<&'a str>,
    pub baseline: Option<&'a Path>,
}

pub fn eval_cmd(run: &Run, inputs: &EvalInputs<'_>) -> CliResult<String> {
    let scenes = load_scenes(&run.cfg)?;
    let (_, test_scenes) = split(&run.cfg, &scenes)?;
    let model;
    let vocab;
    let mut default_variant = "oracle".to_string();
    let mut predictor: Box<dyn Predictor + '_> = if inputs.oracle {
        Box::new(OraclePredictor)
    } else {
        let (Some(ck), Some(vp)) = (inputs.checkpoint, inputs.vocab) else {
            return Err(ternatraj::Error::Invalid("eval needs --checkpoint and --vocab, or --oracle".into()).into());
        };
        model = load_model(ck)?;
        vocab = load_vocab(vp)?;
        default_variant = model.mode.name().to_string();
        Box::new(ModelPredictor::new(&model, &vocab, run.cfg.precision, run.cfg.sampling))
    };
    let variant = inputs.variant.map_or(default_variant, str::to_string);
    let mut results = Vec::new();
    for scene in test_scenes {
        let mut windows = make_windows(scene, &run.cfg.window)?;
        if run.cfg.eval_max_windows > 0 {
            windows.truncate(run.cfg.eval_max_windows);
        }
        let acc = evaluate_windows(predictor.as_mut(), &windows, run.cfg.eval_k, scene.homography.as_ref())?;
        results.push(acc.finish(&scene.name, &variant));
    }
    let baseline = match inputs.baseline {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Some(parse_metrics_csv(&text, &p.display().to_string())?)
        }
        None => None,
    };
    let csv = to_csv(&aggregate(&results, baseline.as_deref())?);
    run.write(METRICS_FILE, &csv)?;
    Ok(csv)
}

pub fn sweep_cmd(run: &Run, vocab_path: &Path) -> CliResult<String> {
    let vocab = load_vocab(vocab_path)?;
    let scenes = load_scenes(&run.cfg)?;
    let (train_scenes, _) = split(&run.cfg, &scenes)?;
    let data = build_examples(&windows_of(&run.cfg, &train_scenes)?, &vocab, run.cfg.precision);
    let rows = lr_sweep::<f32>(
        &run.cfg.model_config(vocab.len()),
        run.cfg.bit,
        &data,
        &run.cfg.train,
        &run.cfg.sweep_lrs,
        &run.cfg.sweep_modes,
        &run.cfg.sweep_seeds,
        run.cfg.smoothing,
    )?;
    let csv = sweep_csv(&rows);
    run.write(SWEEP_FILE, &csv)?;
    Ok(csv)
}

pub fn export_cmd(run: &Run, checkpoint: &Path) -> CliResult<DeployModel> {
    let model = load_model(checkpoint)?;
    let deploy = DeployModel::from_model(&model, run.cfg.encoding)?;
    save_export(&deploy, run.path(EXPORT_FILE))?;
    run.write(MEMORY_FILE, memory_report(&deploy, 2).to_csv())?;
    Ok(deploy)
}

pub fn bench_cmd(run: &Run, model_path: &Path, vocab_path: &Path) -> CliResult<String> {
    require(model_path)?;
    let model = load_export(model_path)?;
    let vocab = load_vocab(vocab_path)?;
    let scenes = load_scenes(&run.cfg)?;
    let (_, test_scenes) = split(&run.cfg, &scenes)?;
    let window = windows_of(&run.cfg, &test_scenes)?
        .into_iter()
        .next()
        .ok_or_else(|| ternatraj::Error::Invalid("no window available for the benchmark prompt".into()))?;
    let src = vocab.encode(&serialize_window(&window, run.cfg.precision).prompt);
    let cfg = BenchConfig {
        repeats: run.cfg.bench_repeats,
        warmup: run.cfg.bench_warmup,
        sampling: run.cfg.sampling,
    };
    // Bytes actually held by this implementation: f32 dense tensors.
    let bytes = memory_report(&model, 4).deployed_total();
    let report = bench(&model, &src, &cfg, bytes)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    run.write(BENCH_FILE, &json)?;
    Ok(json)
}

/// Step log read back from a `train_log.csv`.
pub fn parse_train_log(text: &str, source: &str) -> CliResult<TrainLog> {
    let mut log = TrainLog::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || {
            CliError::Core(ternatraj::Error::Parse {
                source_name: source.to_string(),
                line: i + 1,
                msg: "expected step,epoch,loss,grad_norm,lr".into(),
            })
        };
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 5 {
            return Err(bad());
        }
        log.steps.push(StepRecord {
            step: c[0].parse().map_err(|_| bad())?,
            epoch: c[1].parse().map_err(|_| bad())?,
            loss: c[2].parse().map_err(|_| bad())?,
            grad_norm: c[3].parse().map_err(|_| bad())?,
            lr: c[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub mode: Option<QuantMode>,
    pub seed: Option<u64>,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub plateau: Option<usize>,
}

fn resolved_value(dir: &Path, key: &str) -> Option<String> {
    let text = std::fs::read_to_string(dir.join(RESOLVED_CONFIG)).ok()?;
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

/// Mean smoothed final loss per mode, over runs that have one.
pub fn mean_final_by_mode(runs: &[RunSummary]) -> Vec<(QuantMode, f64)> {
    let mut out = Vec::new();
    for mode in QuantMode::ALL {
        let xs: Vec<f64> = runs.iter().filter(|r| r.mode == Some(mode)).map(|r| r.final_loss).collect();
        if !xs.is_empty() {
            out.push((mode, xs.iter().sum::<f64>() / xs.len() as f64));
        }
    }
    out
}

pub fn report_cmd(run: &Run, dirs: &[PathBuf]) -> CliResult<String> {
    let smoothing = run.cfg.smoothing;
    let mut runs = Vec::new();
    let mut extras = String::new();
    for dir in dirs {
        require(dir)?;
        let log_path = dir.join(TRAIN_LOG_FILE);
        if log_path.exists() {
            let text = std::fs::read_to_string(&log_path).map_err(|e| CliError::io(&log_path, e))?;
            let log = parse_train_log(&text, &log_path.display().to_string())?;
            runs.push(RunSummary {
                dir: dir.clone(),
                mode: resolved_value(dir, "quant.mode").and_then(|m| m.parse().ok()),
                seed: resolved_value(dir, "train.seed").and_then(|s| s.parse().ok()),
                steps: log.steps.len(),
                first_loss: log.steps.first().map_or(f64::NAN, |s| s.loss),
                final_loss: log.smoothed_final_loss(smoothing),
                plateau: log.plateau_steps(smoothing, 0.5),
            });
        }
        for name in [METRICS_FILE, SWEEP_FILE, MEMORY_FILE, BENCH_FILE] {
            let p = dir.join(name);
            if let Ok(text) = std::fs::read_to_string(&p) {
                let _ = writeln!(extras, "\n== {} ==\n{}", p.display(), text.trim_end());
            }
        }
    }

    let mut csv = String::from("run,mode,seed,steps,first_loss,smoothed_final_loss,plateau_step\n");
    let mut txt = format!("Training runs (loss smoothed over {smoothing} steps)\n");
    for r in &runs {
        let mode = r.mode.map_or("?", |m| m.name());
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        let plateau = r.plateau.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{mode},{seed},{},{:.6},{:.6},{plateau}",
            r.dir.display(),
            r.steps,
            r.first_loss,
            r.final_loss
        );
        let _ = writeln!(
            txt,
            "  {:<8} seed {:<4} steps {:>6}  first {:.4}  final {:.4}  plateau {}",
            mode,
            seed,
            r.steps,
            r.first_loss,
            r.final_loss,
            r.plateau.map_or("never".to_string(), |p| p.to_string())
        );
    }
    let means = mean_final_by_mode(&runs);
    if !means.is_empty() {
        txt.push_str("Mean smoothed final loss by mode\n");
        for (m, v) in &means {
            let _ = writeln!(txt, "  {:<8} {v:.4}", m.name());
        }
        let get = |m| means.iter().find(|(x, _)| *x == m).map(|(_, v)| *v);
        if let (Some(w), Some(n), Some(a)) = (get(QuantMode::Weight), get(QuantMode::None), get(QuantMode::Activ)) {
            let _ = writeln!(
                txt,
                "Ordering weight <= none < activ: {}",
                if w <= n && n < a { "holds" } else { "does not hold" }
            );
        }
    }
    txt.push_str(&extras);
    txt.push('\n');
    run.write(REPORT_CSV, &csv)?;
    run.write(REPORT_FILE, &txt)?;
    Ok(txt)
}
