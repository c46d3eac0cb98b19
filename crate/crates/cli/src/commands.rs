use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use magicforge_core::ablation::{self, EvalOptions, Sweep};
use magicforge_core::backends::Backends;
use magicforge_core::config::AppConfig;
use magicforge_core::image_io;
use magicforge_core::metrics::{self, LabelGrid, MetricReport, Mode, DEFAULT_BG_THRESHOLD};
use magicforge_core::pipeline::{self, Pipeline, PipelineConfig};
use magicforge_core::seed;
use magicforge_core::trainer::{self, gradcheck, Checkpoint, TrainingSample};
use magicforge_core::types::{ClassMask, Manifest, Vocabulary};
use magicforge_core::{CategoryId, Execution};

use crate::{AblateArgs, Cli, Command, EvalArgs, GradcheckArgs, LabelArgs, SynthArgs, TrainArgs, ValidateArgs};

/// A failed subcommand and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Data(anyhow::Error),
    Config(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 1,
            Failure::Config(_) => 2,
        }
    }

    pub fn message(&self) -> String {
        let (Failure::Data(e) | Failure::Config(e)) = self;
        format!("{e:#}")
    }
}

type Outcome = Result<(), Failure>;

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn config<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Config(e.into())
}

pub fn run(cli: Cli) -> Outcome {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => AppConfig::load(p).map_err(config)?,
        None => AppConfig::default(),
    };
    cfg.apply_overrides(&g.overrides).map_err(config)?;
    let exec = execution(g.jobs)?;
    match cli.command {
        Command::Synth(a) => synth(a, cfg, exec),
        Command::Label(a) => label(a, cfg),
        Command::Validate(a) => validate(a),
        Command::Train(a) => train(a, cfg, exec),
        Command::Eval(a) => eval(a, cfg, exec),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a, cfg, exec),
    }
}

fn execution(jobs: Option<usize>) -> Result<Execution, Failure> {
    match jobs {
        Some(0) => Err(config(anyhow!("--jobs must be >= 1"))),
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(config)?;
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::Parallel),
    }
}

fn checked(cfg: AppConfig) -> Result<AppConfig, Failure> {
    cfg.validate().map_err(config)?;
    Ok(cfg)
}

fn load_vocabulary(path: Option<&Path>) -> Result<Vocabulary, Failure> {
    match path {
        Some(p) => Vocabulary::load(p).with_context(|| format!("vocabulary {}", p.display())).map_err(data),
        None => {
            log::info!("no --vocab given, using the built-in desk vocabulary");
            Ok(ablation::desk_vocabulary())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(data)?;
    }
    pipeline::write_json(path, value).map_err(data)
}

fn synth(a: SynthArgs, mut cfg: AppConfig, exec: Execution) -> Outcome {
    if let Some(n) = a.count {
        cfg.pipeline.samples_target = n;
    }
    if let Some(s) = a.seed {
        cfg.pipeline.seed = s;
    }
    let cfg = checked(cfg)?;
    let vocab = load_vocabulary(a.vocab.as_deref())?;
    let backends = Backends::from_config(&cfg.backend, &vocab).map_err(config)?;
    let p = Pipeline::new(vocab, cfg.pipeline.clone(), cfg.prompt.conditions.clone(), backends);
    let echo = cfg.to_value();
    let (manifest, report) = p.run_to_dir(&a.out, exec, Some(&echo)).map_err(data)?;
    println!(
        "synthesized {} samples ({} rejected, {} attempts) into {}",
        manifest.records.len(),
        report.rejected,
        report.attempts,
        a.out.display()
    );
    for (reason, n) in &report.rejected_by_reason {
        println!("  rejected {n}: {reason}");
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct LabelRequest {
    image: PathBuf,
    categories: Vec<String>,
}

#[derive(Debug, Serialize)]
struct LabelResult {
    image: PathBuf,
    categories: Vec<CategoryId>,
    masks: Vec<ClassMask>,
    rejection: Option<String>,
}

fn label(a: LabelArgs, cfg: AppConfig) -> Outcome {
    let cfg = checked(cfg)?;
    let vocab = load_vocabulary(a.vocab.as_deref())?;
    let backends = Backends::from_config(&cfg.backend, &vocab).map_err(config)?;
    let root = a.input.parent().unwrap_or(Path::new(".")).to_path_buf();
    let file = fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display())).map_err(data)?;
    let mut out = String::new();
    let (mut labeled, mut rejected) = (0usize, 0usize);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(data)?;
        if line.trim().is_empty() {
            continue;
        }
        let req: LabelRequest =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", a.input.display(), n + 1)).map_err(data)?;
        let ids = req
            .categories
            .iter()
            .map(|c| vocab.id_of(c).ok_or_else(|| anyhow!("line {}: category {c:?} not in vocabulary", n + 1)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(data)?;
        let img = image_io::load_png(&root.join(&req.image)).map_err(data)?;
        let names: Vec<&str> = req.categories.iter().map(String::as_str).collect();
        let result = pipeline::label_image(
            backends.detector.as_ref(),
            backends.segmenter.as_ref(),
            &img,
            &names,
            cfg.pipeline.detection_gate_threshold,
        )
        .map_err(data)?;
        let entry = match result {
            Ok(grids) => {
                labeled += 1;
                let masks = ids
                    .iter()
                    .zip(&grids)
                    .map(|(&c, g)| ClassMask::encode(c, &g.data, g.width, g.height))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(data)?;
                LabelResult { image: req.image, categories: ids, masks, rejection: None }
            }
            Err(r) => {
                rejected += 1;
                log::info!("{}: {r}", req.image.display());
                LabelResult { image: req.image, categories: ids, masks: vec![], rejection: Some(r.to_string()) }
            }
        };
        out += &serde_json::to_string(&entry).expect("serializable");
        out.push('\n');
    }
    fs::write(&a.out, out).with_context(|| format!("writing {}", a.out.display())).map_err(data)?;
    let report_path = a.out.with_file_name("label-report.json");
    write_json(
        &report_path,
        &serde_json::json!({ "labeled": labeled, "rejected": rejected, "config": cfg.to_value() }),
    )?;
    println!("labeled {labeled} images, rejected {rejected}; masks in {}", a.out.display());
    Ok(())
}

fn manifest_root(path: &Path) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn validate(a: ValidateArgs) -> Outcome {
    let (manifest, vocab) = Manifest::load(&a.manifest).map_err(data)?;
    let root = manifest_root(&a.manifest);
    let mut problems: Vec<String> = Vec::new();
    if let Err(e) = manifest.check_unique_ids() {
        problems.push(e.to_string());
    }
    let violations = manifest.validate(&vocab, |r| match image_io::png_dimensions(&root.join(&r.image_ref)) {
        Ok(d) => Some(d),
        Err(e) => {
            log::warn!("record {}: image not readable ({e}); checking masks only", r.id);
            None
        }
    });
    problems.extend(violations.iter().map(|(id, v)| format!("{id}: {v}")));
    for p in &problems {
        println!("{p}");
    }
    println!("{} records, {} violations", manifest.records.len(), problems.len());
    if problems.is_empty() {
        Ok(())
    } else {
        Err(data(anyhow!("{} violations in {}", problems.len(), a.manifest.display())))
    }
}

fn load_training_set(path: &Path, exec: Execution) -> Result<(Vec<TrainingSample>, Vocabulary), Failure> {
    let (manifest, vocab) = Manifest::load(path).map_err(data)?;
    let samples = trainer::load_samples(&manifest, &manifest_root(path), exec).map_err(data)?;
    Ok((samples, vocab))
}

fn train(a: TrainArgs, mut cfg: AppConfig, exec: Execution) -> Outcome {
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let cfg = checked(cfg)?;
    let (samples, vocab) = load_training_set(&a.manifest, exec)?;
    let fit = trainer::fit(&samples, vocab.len(), &cfg.train, &cfg.loss, exec).map_err(|e| match e {
        trainer::TrainError::Sampler(_) => config(e),
        other => data(other),
    })?;
    let (first, last) = (fit.history.first().copied(), fit.history.last().copied());
    Checkpoint::new(fit.model, last, cfg.to_value()).save(&a.out).map_err(data)?;
    if let (Some(f), Some(l)) = (first, last) {
        println!(
            "trained {} steps on {} samples: loss {:.5} -> {:.5} (focal {:.5}, dice {:.5}, cos {:.5}); wrote {}",
            fit.history.len(),
            samples.len(),
            f.total,
            l.total,
            l.focal,
            l.dice,
            l.cos,
            a.out.display()
        );
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PredRecord {
    id: String,
    #[serde(default)]
    masks: Vec<ClassMask>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    manifest: PathBuf,
    source: String,
    category_names: Vec<String>,
    bg_threshold: Option<f64>,
    seed: Option<u64>,
    #[serde(flatten)]
    metric: MetricReport,
    config: Value,
}

fn gt_grids(manifest: &Manifest, root: &Path) -> Result<Vec<LabelGrid>, Failure> {
    manifest
        .records
        .iter()
        .map(|r| {
            let (w, h) = image_io::png_dimensions(&root.join(&r.image_ref))
                .ok()
                .or_else(|| r.masks.first().map(|m| (m.width, m.height)))
                .ok_or_else(|| anyhow!("record {}: no image and no masks to size the label grid", r.id))?;
            LabelGrid::from_masks(w, h, &r.masks).with_context(|| format!("record {}", r.id))
        })
        .collect::<anyhow::Result<_>>()
        .map_err(data)
}

fn eval(a: EvalArgs, mut cfg: AppConfig, exec: Execution) -> Outcome {
    if let Some(m) = a.mode {
        cfg.eval.mode = m;
    }
    if let Some(p) = a.points {
        cfg.eval.points = p;
    }
    if let Some(t) = a.bg_threshold {
        cfg.eval.bg_threshold = t;
    }
    let cfg = checked(cfg)?;
    let (manifest, vocab) = Manifest::load(&a.manifest).map_err(data)?;
    let root = manifest_root(&a.manifest);
    let gts = gt_grids(&manifest, &root)?;
    let cats: Vec<CategoryId> = vocab.ids().collect();
    let (preds, source, threshold) = match (&a.pred, &a.model) {
        (Some(p), _) => (load_predictions(p, &manifest, &gts)?, p.display().to_string(), None),
        (None, Some(m)) => {
            let ckpt = Checkpoint::load(m).map_err(data)?;
            if ckpt.vocabulary_size != vocab.len() {
                return Err(data(anyhow!(
                    "model has {} categories but the vocabulary has {}",
                    ckpt.vocabulary_size,
                    vocab.len()
                )));
            }
            let samples = trainer::load_samples(&manifest, &root, exec).map_err(data)?;
            let preds = samples
                .iter()
                .map(|s| trainer::predict_labels(&ckpt.model, &s.x, &cats, cfg.eval.bg_threshold))
                .collect::<Result<Vec<_>, _>>()
                .map_err(data)?;
            (preds, m.display().to_string(), Some(cfg.eval.bg_threshold))
        }
        (None, None) => return Err(config(anyhow!("one of --pred or --model is required"))),
    };
    let (metric, seed) = match cfg.eval.mode {
        Mode::Miou => (metrics::miou(&preds, &gts, &cats, exec).map_err(data)?, None),
        Mode::Pmiou => (
            metrics::p_miou(&preds, &gts, &cats, cfg.eval.points, cfg.eval.seed, exec).map_err(data)?,
            Some(cfg.eval.seed),
        ),
    };
    let mode = match metric.mode {
        Mode::Miou => "miou",
        Mode::Pmiou => "pmiou",
    };
    println!("{mode} {:.4} over {} images", metric.mean, gts.len());
    for c in &metric.per_category {
        println!("  {:<16} {:.4}", vocab.name(c.category).unwrap_or("?"), c.iou);
    }
    let report = EvalReport {
        manifest: a.manifest.clone(),
        source,
        category_names: vocab.names().to_vec(),
        bg_threshold: threshold,
        seed,
        metric,
        config: cfg.to_value(),
    };
    write_json(&a.out, &report)
}

fn load_predictions(path: &Path, manifest: &Manifest, gts: &[LabelGrid]) -> Result<Vec<LabelGrid>, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(data)?;
    let mut by_id: HashMap<String, Vec<ClassMask>> = HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: PredRecord =
            serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), n + 1)).map_err(data)?;
        if by_id.insert(r.id.clone(), r.masks).is_some() {
            return Err(data(anyhow!("duplicate prediction id {:?}", r.id)));
        }
    }
    manifest
        .records
        .iter()
        .zip(gts)
        .map(|(r, gt)| {
            let masks = by_id.get(&r.id).ok_or_else(|| anyhow!("no prediction for record {:?}", r.id))?;
            LabelGrid::from_masks(gt.width, gt.height, masks).with_context(|| format!("prediction {}", r.id))
        })
        .collect::<anyhow::Result<_>>()
        .map_err(data)
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    if a.seeds == 0 {
        return Err(config(anyhow!("--seeds must be >= 1")));
    }
    let r = gradcheck::run(a.seeds, a.seed);
    let line = |name: &str, err: f64, tol: f64| {
        println!("{name:<11} max rel err {err:.3e}  (tol {tol:e})  {}", if err < tol { "ok" } else { "FAIL" });
    };
    line("focal", r.focal, gradcheck::LOSS_TOLERANCE);
    line("dice", r.dice, gradcheck::LOSS_TOLERANCE);
    line("cosine", r.cosine, gradcheck::LOSS_TOLERANCE);
    line("end-to-end", r.end_to_end, gradcheck::END_TO_END_TOLERANCE);
    if r.passes() {
        Ok(())
    } else {
        Err(data(anyhow!("gradient check failed over {} seeds", a.seeds)))
    }
}

fn ablate(a: AblateArgs, cfg: AppConfig, exec: Execution) -> Outcome {
    let cfg = checked(cfg)?;
    let sweeps = a.sweep.iter().map(|s| s.parse::<Sweep>()).collect::<Result<Vec<_>, _>>().map_err(config)?;
    if a.seeds == 0 || a.held_out == 0 {
        return Err(config(anyhow!("--seeds and --held-out must be >= 1")));
    }
    let vocab = load_vocabulary(a.vocab.as_deref())?;
    let split = |target: usize, seed_value: u64| -> Result<Vec<TrainingSample>, Failure> {
        let pc = PipelineConfig { samples_target: target, seed: seed_value, ..cfg.pipeline.clone() };
        let backends = Backends::from_config(&cfg.backend, &vocab).map_err(config)?;
        ablation::synthesize_split(&vocab, &pc, &cfg.prompt.conditions, backends, exec).map_err(data)
    };
    let train = split(cfg.pipeline.samples_target, cfg.pipeline.seed)?;
    let held_out = split(a.held_out, seed::derive(cfg.pipeline.seed, 1))?;
    let eval = EvalOptions {
        bg_threshold: cfg.eval.bg_threshold,
        reference_threshold: (cfg.eval.bg_threshold != DEFAULT_BG_THRESHOLD).then_some(DEFAULT_BG_THRESHOLD),
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.train.seed + i).collect();
    let mut tables = Vec::new();
    let mut stdout = std::io::stdout().lock();
    for sweep in &sweeps {
        let table =
            ablation::run_sweep(sweep, &seeds, &train, &held_out, vocab.len(), &cfg.train, &cfg.loss, eval, exec)
                .map_err(|e| match e {
                    ablation::AblationError::Train(trainer::TrainError::Sampler(_)) => config(e),
                    other => data(other),
                })?;
        let _ = writeln!(stdout, "{}", table.render());
        tables.push(table);
    }
    write_json(
        &a.out,
        &serde_json::json!({
            "train_scenes": train.len(),
            "held_out_scenes": held_out.len(),
            "tables": tables,
            "config": cfg.to_value(),
        }),
    )
}
