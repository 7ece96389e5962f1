//! Command implementations behind the `hoi-groups` binary. Every command
//! takes a resolved [`RunConfig`] and writes its artifacts under `out_dir`.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub use config::RunConfig;

use crate::diagnostics::{gradcheck_csv, gradcheck_suite, CheckRow, SuiteSettings};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, pairwise_nms, prediction_line, predictions_from_output, report_csv, scene_gt_triplets,
    EvalReport, EvalSettings, GtTriplet, Prediction,
};
use crate::model::{
    flop_estimate, load_checkpoint, lr_at_epoch, save_checkpoint, train_step, Example, FlopEstimate, HoiModel,
    LossComponents, ModelConfig,
};
use crate::numerics::ParamStore;
use crate::synth::{
    generate_scene, make_splits, rare_set, read_dataset, read_train_counts, scene_example, scene_seed, Scene,
    Split, SplitFiles, SynthConfig, INTERACTION_NAMES,
};

/// Module switched off at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    NoGeo,
    NoSem,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-geo" => Ok(Ablation::NoGeo),
            "no-sem" => Ok(Ablation::NoSem),
            _ => Err(Error::config(format!("unknown ablation `{s}` (none, no-geo, no-sem)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoGeo => "no-geo",
            Ablation::NoSem => "no-sem",
        }
    }

    /// Grouping layers are parameter-free to skip, so the architecture key
    /// and checkpoint compatibility are unchanged.
    pub fn apply(self, c: &mut ModelConfig) {
        match self {
            Ablation::None => {}
            Ablation::NoGeo => c.geo_layers = 0,
            Ablation::NoSem => c.sem_layers = 0,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Model seeds: parameters on stream 0, batch order on stream 1.
fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn build_model(c: &ModelConfig, seed: u64) -> Result<(HoiModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model = HoiModel::new(c.clone(), &mut store, &mut rng(seed, 0))?;
    Ok((model, store))
}

pub fn gen_data(cfg: &RunConfig) -> Result<SplitFiles> {
    let files = make_splits(&cfg.synth, cfg.n_train, cfg.n_val, cfg.seed, &cfg.data_dir())?;
    println!("train {}", files.train.display());
    println!("val {}", files.val.display());
    println!("counts {}", files.counts.display());
    let rare = rare_set(&files.train_counts);
    for a in 0..cfg.synth.n_interactions {
        println!(
            "{:<10} train {:>5} val {:>5}{}",
            INTERACTION_NAMES[a],
            files.train_counts[a],
            files.val_counts[a],
            if rare[a] { "  rare" } else { "" }
        );
    }
    Ok(files)
}

/// Loaded split plus the rare flags from the training counts.
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub rare: Vec<bool>,
}

/// Reads a dataset file; the rare flags come from `counts.csv` beside it.
pub fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::data(format!("{} not found; run gen-data first", path.display())));
    }
    let (synth, scenes) = read_dataset(path)?;
    if synth != cfg.synth {
        return Err(Error::data(format!(
            "{} was generated with a different generator config",
            path.display()
        )));
    }
    let counts = read_train_counts(&path.with_file_name("counts.csv"))?;
    if counts.len() != cfg.synth.n_interactions {
        return Err(Error::data("counts.csv does not cover every interaction class"));
    }
    Ok(Dataset {
        scenes,
        rare: rare_set(&counts),
    })
}

fn split_path(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.data_dir().join(format!("{}.jsonl", split.name()))
}

/// Post-NMS predictions and ground truth of every scene.
pub fn score_scenes(
    model: &HoiModel,
    store: &ParamStore,
    scenes: &[Scene],
    synth: &SynthConfig,
    settings: &EvalSettings,
) -> Result<Vec<(Vec<Prediction>, Vec<GtTriplet>)>> {
    scenes
        .iter()
        .map(|s| {
            let ex = scene_example(s, synth)?;
            let out = model.predict(store, &ex.features, &ex.pos)?;
            let preds = pairwise_nms(&predictions_from_output(&out), settings.nms_iou, settings.top_k);
            Ok((preds, scene_gt_triplets(s)))
        })
        .collect()
}

/// Line-delimited run log. The first record carries the config hash and the
/// resolved config text.
pub struct RunLog {
    file: fs::File,
    path: PathBuf,
}

impl RunLog {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            file,
            path: path.to_path_buf(),
        };
        log.record(json!({
            "event": "config",
            "config_hash": cfg.hash(),
            "config": cfg.to_text(),
        }))?;
        Ok(log)
    }

    pub fn record(&mut self, v: serde_json::Value) -> Result<()> {
        writeln!(self.file, "{v}").map_err(|e| Error::io(&self.path, e))
    }
}

fn map_json(v: Option<f64>) -> serde_json::Value {
    v.map_or(serde_json::Value::Null, |x| json!(x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    /// Batch-mean loss of every step.
    pub losses: Vec<LossComponents>,
    /// Validation report after the last epoch, if any epoch ran.
    pub val: Option<EvalReport>,
    pub checkpoint: PathBuf,
}

pub fn loss_curve_csv(losses: &[LossComponents]) -> String {
    let mut s = String::from("step,total,box_l1,giou,object,interaction\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?}",
            i + 1,
            l.total,
            l.box_l1,
            l.giou,
            l.object,
            l.interaction
        );
    }
    s
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let out = &cfg.out_dir;
    create_dir(out)?;
    let train_set = load_dataset(cfg, &split_path(cfg, Split::Train))?;
    let val_set = load_dataset(cfg, &split_path(cfg, Split::Val))?;
    let examples: Vec<Example> = train_set
        .scenes
        .iter()
        .map(|s| scene_example(s, &cfg.synth))
        .collect::<Result<_>>()?;

    let (model, mut store) = build_model(&cfg.model, cfg.seed)?;
    let mut log = RunLog::create(&out.join("train_log.jsonl"), cfg)?;
    let checkpoint = out.join("checkpoint.bin");
    let mut order_rng = rng(cfg.seed, 1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::new();
    let mut val = None;
    let cap = if cfg.max_steps == 0 { usize::MAX } else { cfg.max_steps };
    let start = Instant::now();

    save_checkpoint(&checkpoint, &store, &cfg.model)?;
    'epochs: for epoch in 0..cfg.epochs {
        if losses.len() >= cap {
            break;
        }
        let lr = lr_at_epoch(&cfg.train, epoch);
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if losses.len() >= cap {
                break 'epochs;
            }
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let r = train_step(&model, &mut store, &batch, &cfg.train, lr)?;
            losses.push(r.loss);
            let l = r.loss;
            log.record(json!({
                "event": "step",
                "epoch": epoch,
                "step": losses.len(),
                "lr": lr,
                "total": l.total,
                "box_l1": l.box_l1,
                "giou": l.giou,
                "object": l.object,
                "interaction": l.interaction,
                "grad_norm": r.grad_norm,
            }))?;
        }
        let scored = score_scenes(&model, &store, &val_set.scenes, &cfg.synth, &cfg.eval)?;
        let report = evaluate(&scored, &val_set.rare, &cfg.eval)?;
        log.record(json!({
            "event": "epoch",
            "epoch": epoch,
            "steps": losses.len(),
            "val_full": map_json(report.full),
            "val_rare": map_json(report.rare),
            "val_non_rare": map_json(report.non_rare),
        }))?;
        eprintln!(
            "epoch {epoch} step {} loss {:.4} val mAP {} ({:.0}s)",
            losses.len(),
            losses.last().map_or(f64::NAN, |l| l.total),
            report.full.map_or("-".into(), |v| format!("{v:.4}")),
            start.elapsed().as_secs_f64()
        );
        val = Some(report);
        save_checkpoint(&checkpoint, &store, &cfg.model)?;
    }
    log.record(json!({ "event": "done", "steps": losses.len() }))?;
    write_file(&out.join("loss_curve.csv"), &loss_curve_csv(&losses))?;
    Ok(TrainSummary {
        steps: losses.len(),
        losses,
        val,
        checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub csv: PathBuf,
    pub predictions: PathBuf,
}

/// Scores a checkpoint on a split. `checkpoint` defaults to
/// `<out_dir>/checkpoint.bin`, `dataset` to the val split of the data dir.
pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    dataset: Option<&Path>,
    ablation: Ablation,
) -> Result<EvalOutput> {
    let out = &cfg.out_dir;
    create_dir(out)?;
    let ck = checkpoint.map_or_else(|| out.join("checkpoint.bin"), Path::to_path_buf);
    if !ck.exists() {
        return Err(Error::data(format!("checkpoint {} not found", ck.display())));
    }
    let set = load_dataset(cfg, &dataset.map_or_else(|| split_path(cfg, Split::Val), Path::to_path_buf))?;
    let mut mc = cfg.model.clone();
    ablation.apply(&mut mc);
    let (model, mut store) = build_model(&mc, cfg.seed)?;
    load_checkpoint(&ck, &mc, &mut store)?;
    let scored = score_scenes(&model, &store, &set.scenes, &cfg.synth, &cfg.eval)?;
    let report = evaluate(&scored, &set.rare, &cfg.eval)?;

    let suffix = match ablation {
        Ablation::None => String::new(),
        a => format!("_{}", a.name()),
    };
    let csv = out.join(format!("eval{suffix}.csv"));
    write_file(&csv, &report_csv(&report))?;
    let mut dump = String::new();
    for (scene, (preds, _)) in set.scenes.iter().zip(&scored) {
        for p in preds {
            dump.push_str(&prediction_line(scene.seed, p));
            dump.push('\n');
        }
    }
    let predictions = out.join(format!("predictions{suffix}.jsonl"));
    write_file(&predictions, &dump)?;
    print!("{}", report_csv(&report));
    Ok(EvalOutput {
        report,
        csv,
        predictions,
    })
}

/// Runs the finite-difference suite; any failing check is an error after
/// the table has been written.
pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<CheckRow>> {
    create_dir(&cfg.out_dir)?;
    let start = Instant::now();
    let rows = gradcheck_suite(SuiteSettings {
        seed: cfg.seed,
        h: cfg.gradcheck_h,
        tol: cfg.gradcheck_tol,
    })?;
    let csv = gradcheck_csv(&rows);
    write_file(&cfg.out_dir.join("gradcheck.csv"), &csv)?;
    for r in &rows {
        println!(
            "{:<28} {:>6} coords  max rel err {:.3e}  {}",
            r.name,
            r.coords,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!(
        "{} checks, {} failed, {:.1}s",
        rows.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        return Err(Error::CheckFailed(format!(
            "{} above tolerance {}",
            failed.join(", "),
            cfg.gradcheck_tol
        )));
    }
    Ok(rows)
}

/// Config key behind each sweep axis.
pub fn sweep_key(axis: &str) -> Result<&'static str> {
    match axis {
        "Kg" => Ok("k_geo"),
        "Ks" => Ok("k_sem"),
        "Lg" => Ok("geo_layers"),
        "Ls" => Ok("sem_layers"),
        "group_mode" => Ok("group_mode"),
        _ => Err(Error::config(format!(
            "unknown sweep axis `{axis}` (Kg, Ks, Lg, Ls, group_mode)"
        ))),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Trains and evaluates one run per value. Runs go to
/// `<out_dir>/sweep_<axis>/<value>/` and share the dataset, which is
/// generated first if missing. Writes `<out_dir>/sweep_<axis>.csv`.
pub fn sweep(cfg: &RunConfig, axis: &str, values: &[String]) -> Result<PathBuf> {
    let key = sweep_key(axis)?;
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let data = cfg.data_dir();
    let runs = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.set(key, v)?;
            c.validate()?;
            c.data_dir = Some(data.clone());
            c.out_dir = cfg.out_dir.join(format!("sweep_{axis}")).join(v);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    if !data.join("train.jsonl").exists() {
        make_splits(&cfg.synth, cfg.n_train, cfg.n_val, cfg.seed, &data)?;
    }
    let mut csv = format!("{axis},full,rare,non_rare\n");
    for (v, c) in values.iter().zip(&runs) {
        train(c)?;
        let r = eval(c, None, None, Ablation::None)?.report;
        let _ = writeln!(csv, "{v},{},{},{}", fmt_opt(r.full), fmt_opt(r.rare), fmt_opt(r.non_rare));
    }
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("sweep_{axis}.csv"));
    write_file(&path, &csv)?;
    print!("{csv}");
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub params: usize,
    pub flops: FlopEstimate,
    pub runs: usize,
    pub seconds: f64,
    pub scenes_per_sec: f64,
}

/// Parameter count, analytic FLOPs and forward throughput on generated
/// validation scenes. Rasterization is outside the timed loop.
pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    create_dir(&cfg.out_dir)?;
    let (model, store) = build_model(&cfg.model, cfg.seed)?;
    let flops = flop_estimate(&cfg.model, cfg.synth.tokens());
    let examples = (0..cfg.bench_runs.min(16))
        .map(|i| scene_example(&generate_scene(scene_seed(cfg.seed, Split::Val, i), &cfg.synth)?, &cfg.synth))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..cfg.bench_warmup {
        let ex = &examples[i % examples.len()];
        model.predict(&store, &ex.features, &ex.pos)?;
    }
    let start = Instant::now();
    for i in 0..cfg.bench_runs {
        let ex = &examples[i % examples.len()];
        model.predict(&store, &ex.features, &ex.pos)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    let report = BenchReport {
        params: store.numel(),
        flops,
        runs: cfg.bench_runs,
        seconds,
        scenes_per_sec: cfg.bench_runs as f64 / seconds,
    };
    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "params,{}", report.params);
    for (name, v) in [
        ("flops_input", flops.input),
        ("flops_encoder", flops.encoder),
        ("flops_instance", flops.instance),
        ("flops_interaction", flops.interaction),
        ("flops_heads", flops.heads),
        ("flops_total", flops.total()),
    ] {
        let _ = writeln!(csv, "{name},{v}");
    }
    let _ = writeln!(csv, "runs,{}", report.runs);
    let _ = writeln!(csv, "seconds,{:.6}", report.seconds);
    let _ = writeln!(csv, "scenes_per_sec,{:.3}", report.scenes_per_sec);
    write_file(&cfg.out_dir.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(report)
}
