mod artifacts;
mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hydra_hgr::eval::{run_fold, table_from_subjects, FoldResult, FoldSpec, ModelKind, ResultRow, ResultTable};
use hydra_hgr::features::{macro_slots, micro_extract, normalize_stack, PreparedWindow, DEFAULT_STA_SUB_WINDOW};
use hydra_hgr::fusion::{predict, train_fusion, FusionHead, FusionSample};
use hydra_hgr::layout::from_grid;
use hydra_hgr::nn::{argmax, TrainParams};
use hydra_hgr::preprocess::{envelope, mu_law_normalize};
use hydra_hgr::signal_model::{generate_gesture_dataset, grid_windows};
use hydra_hgr::vit::{micro_slots, train, EpochStats, Sample, VitModel};
use hydra_hgr::{SeededRng, Tensor};
use ndarray::{Array4, Axis};
use rayon::prelude::*;
use serde::Serialize;

use artifacts::*;
use config::RunConfig;

/// Validation or missing-input failure; exits with status 2.
#[derive(Debug)]
pub struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "hydra-hgr", version, about = "Hybrid macro/micro ViT gesture recognition on synthetic HD-sEMG")]
struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Worker threads for window and fold parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Global seed (falls back to the config file, then HYDRA_HGR_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a labelled gesture dataset of HYDT windows.
    Generate(GenerateArgs),
    /// Decompose every raw window into spike trains and MUAP images.
    Decompose(DecomposeArgs),
    /// Train the Macro (envelope) transformer.
    TrainMacro(TrainArgs),
    /// Train the Micro (MUAP image) transformer.
    TrainMicro(TrainArgs),
    /// Train the fusion head on frozen Macro and Micro backbones.
    TrainFusion(FusionArgs),
    /// Leave-one-repetition-out cross-validation over one or more subjects.
    Evaluate(EvaluateArgs),
    /// Classify one raw window.
    Predict(PredictArgs),
    /// Rebuild the result table and boxplot data from fold results.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    windows_per_rep: Option<usize>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Defaults to `<in>/decomp`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sil: Option<f64>,
    #[arg(long)]
    max_sources: Option<usize>,
    #[arg(long)]
    ext: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Repetition left out of training (the test repetition of that fold).
    #[arg(long)]
    holdout_rep: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Decomposition directory (Micro only); defaults to `<data>/decomp`.
    #[arg(long)]
    decomp: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args, Debug)]
struct FusionArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    decomp: Option<PathBuf>,
    #[arg(long = "macro")]
    macro_ckpt: PathBuf,
    #[arg(long = "micro")]
    micro_ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset directory per subject, each decomposed into `<data>/decomp`.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "macro,micro,hydra")]
    models: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Raw [512, 8, 16] window.
    #[arg(long)]
    window: PathBuf,
    /// Macro, Micro or fusion checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// μ-law envelope window; computed from the window alone when absent.
    #[arg(long)]
    envelope: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding fold_results.csv; outputs are written next to it.
    #[arg(long)]
    results: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.chain().any(|c| c.is::<Usage>());
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.resolve_seed(cli.seed)?;
    apply_overrides(&mut cfg, &cli.command);
    cfg.validate()?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Generate(a) => generate(&cfg, a),
        Command::Decompose(a) => decompose(&cfg, a),
        Command::TrainMacro(a) => train_macro(&cfg, a),
        Command::TrainMicro(a) => train_micro(&cfg, a),
        Command::TrainFusion(a) => train_fusion_cmd(&cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Predict(a) => predict_cmd(&cfg, a),
        Command::Report(a) => report(a),
    }
}

fn override_train(p: &mut TrainParams, o: &TrainOverrides) {
    if let Some(v) = o.epochs {
        p.epochs = v;
    }
    if let Some(v) = o.lr {
        p.lr = v;
    }
    if let Some(v) = o.batch_size {
        p.batch_size = v;
    }
}

fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    match cmd {
        Command::Generate(a) => {
            let d = &mut cfg.dataset;
            d.num_classes = a.classes.unwrap_or(d.num_classes);
            d.reps_per_class = a.reps.unwrap_or(d.reps_per_class);
            d.windows_per_rep = a.windows_per_rep.unwrap_or(d.windows_per_rep);
            d.snr_db = a.snr_db.unwrap_or(d.snr_db);
        }
        Command::Decompose(a) => {
            let d = &mut cfg.decomposition;
            d.sil_threshold = a.sil.unwrap_or(d.sil_threshold);
            d.max_sources = a.max_sources.unwrap_or(d.max_sources);
            d.extension_factor = a.ext.unwrap_or(d.extension_factor);
        }
        Command::TrainMacro(a) => override_train(&mut cfg.macro_train, &a.train),
        Command::TrainMicro(a) => override_train(&mut cfg.micro_train, &a.train),
        Command::TrainFusion(a) => override_train(&mut cfg.fusion_train, &a.train),
        Command::Evaluate(_) | Command::Predict(_) | Command::Report(_) => {}
    }
}

fn generate(cfg: &RunConfig, a: &GenerateArgs) -> Result<()> {
    let recordings = generate_gesture_dataset(&cfg.dataset)?;
    let pre = &cfg.preprocess;
    if pre.window_len != cfg.dataset.window_len || pre.skip != cfg.dataset.skip {
        return Err(usage("preprocess and dataset window_len/skip must agree"));
    }
    create_dir(&a.out.join(RAW_DIR))?;
    create_dir(&a.out.join(ENV_DIR))?;
    let mut rows = Vec::new();
    for rec in &recordings {
        let env = envelope(rec.record.x.view(), pre)?;
        let env = mu_law_normalize(&env, pre.mu)?;
        let raw = grid_windows(rec.record.x.view(), pre.window_len, pre.skip)?;
        let envw = grid_windows(env.view(), pre.window_len, pre.skip)?;
        for (r, e) in raw.iter().zip(&envw) {
            let file = window_file(rows.len());
            write_array3(&a.out.join(RAW_DIR).join(&file), r)?;
            write_array3(&a.out.join(ENV_DIR).join(&file), e)?;
            rows.push(ManifestRow {
                window_path: format!("{RAW_DIR}/{file}"),
                label: rec.label,
                repetition: rec.repetition,
                subject: cfg.seed(),
            });
        }
    }
    write_manifest(&a.out, &rows)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    println!("wrote {} windows to {}", rows.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SpikeRow {
    window_id: usize,
    source_idx: usize,
    sample_idx: usize,
}

#[derive(Serialize)]
struct SilRow {
    window_id: usize,
    source_idx: usize,
    sil: f64,
    num_spikes: usize,
}

fn decompose(cfg: &RunConfig, a: &DecomposeArgs) -> Result<()> {
    let rows = read_manifest_csv(&a.input)?;
    let out = a.out.clone().unwrap_or_else(|| a.input.join(DECOMP_DIR));
    let windows = rows
        .iter()
        .map(|r| read_window(&raw_path(&a.input, r)))
        .collect::<Result<Vec<_>>>()?;
    let params = &cfg.decomposition;
    let results = windows
        .par_iter()
        .map(|w| micro_extract(w.view(), params, DEFAULT_STA_SUB_WINDOW))
        .collect::<hydra_hgr::Result<Vec<_>>>()?;
    create_dir(&out)?;
    let mut spikes = Vec::new();
    let mut sils = Vec::new();
    let mut images = Array4::zeros((rows.len(), hydra_hgr::muap::MAX_SLOTS, 8, 16));
    for (window_id, ex) in results.iter().enumerate() {
        for (source_idx, s) in ex.sources.iter().enumerate() {
            sils.push(SilRow {
                window_id,
                source_idx,
                sil: s.sil,
                num_spikes: s.spikes.len(),
            });
            spikes.extend(s.spikes.times.iter().map(|&sample_idx| SpikeRow {
                window_id,
                source_idx,
                sample_idx,
            }));
        }
        images.index_axis_mut(Axis(0), window_id).assign(&ex.stack);
    }
    write_csv(&out.join(SPIKES), &spikes)?;
    write_csv(&out.join(SIL), &sils)?;
    let path = out.join(IMAGES);
    hydra_hgr::write_tensor(&path, &Tensor::from_array_f64(&images)?)?;
    let total: usize = results.iter().map(|r| r.sources.len()).sum();
    println!("decomposed {} windows, {total} sources, into {}", rows.len(), out.display());
    Ok(())
}

fn training_windows(windows: Vec<PreparedWindow>, holdout: Option<usize>) -> Result<Vec<PreparedWindow>> {
    let kept: Vec<_> = windows.into_iter().filter(|w| Some(w.repetition) != holdout).collect();
    if kept.is_empty() {
        return Err(usage("no training windows left after the hold-out"));
    }
    Ok(kept)
}

fn load_for_training(data: &Path, decomp: Option<&Path>) -> Result<Vec<PreparedWindow>> {
    let decomp = decomp.map_or_else(|| data.join(DECOMP_DIR), Path::to_path_buf);
    load_prepared(data, &decomp)
}

fn write_curve(dir: &Path, curve: &[EpochStats]) -> Result<()> {
    write_csv(&dir.join("curve.csv"), curve)
}

fn train_vit(
    cfg: &RunConfig,
    a: &TrainArgs,
    kind: &str,
    stream: u64,
    slots: impl Fn(&PreparedWindow, &hydra_hgr::vit::VitConfig) -> hydra_hgr::Result<Vec<ndarray::Array2<f64>>>,
) -> Result<()> {
    let windows = training_windows(load_for_training(&a.data, a.decomp.as_deref())?, a.train.holdout_rep)?;
    let classes = windows.iter().map(|w| w.label).max().unwrap_or(0) + 1;
    let (vit, params) = if kind == KIND_MACRO {
        (cfg.macro_vit(classes), &cfg.macro_train)
    } else {
        (cfg.micro_vit(classes), &cfg.micro_train)
    };
    let samples = windows
        .iter()
        .map(|w| Ok(Sample { slots: slots(w, &vit)?, label: w.label }))
        .collect::<hydra_hgr::Result<Vec<_>>>()?;
    let root = SeededRng::new(cfg.seed()).derive(stream);
    let mut model = VitModel::new(vit, &mut root.derive(1))?;
    let curve = train(&mut model, &samples, params, &mut root.derive(2))?;
    save_vit(&a.out, kind, &model)?;
    write_curve(&a.out, &curve)?;
    let last = curve.last().map_or(0.0, |c| c.train_acc);
    println!("{kind}: {} windows, final train accuracy {last:.4}, checksum {}", samples.len(), checksum(&model));
    Ok(())
}

fn train_macro(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    train_vit(cfg, a, KIND_MACRO, 1, |w, v| w.macro_slots(v))
}

fn train_micro(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    train_vit(cfg, a, KIND_MICRO, 2, |w, v| w.micro_slots(v))
}

fn train_fusion_cmd(cfg: &RunConfig, a: &FusionArgs) -> Result<()> {
    let macro_model = load_vit(&a.macro_ckpt, KIND_MACRO)?;
    let micro_model = load_vit(&a.micro_ckpt, KIND_MICRO)?;
    let windows = training_windows(load_for_training(&a.data, a.decomp.as_deref())?, a.train.holdout_rep)?;
    let samples = windows
        .iter()
        .map(|w| {
            Ok(FusionSample {
                macro_slots: w.macro_slots(&macro_model.cfg)?,
                micro_slots: w.micro_slots(&micro_model.cfg)?,
                label: w.label,
            })
        })
        .collect::<hydra_hgr::Result<Vec<_>>>()?;
    let fcfg = hydra_hgr::fusion::FusionConfig {
        embed_dim: macro_model.cfg.embed_dim,
        hidden: cfg.model.fusion_hidden,
        num_classes: macro_model.cfg.num_classes,
    };
    let root = SeededRng::new(cfg.seed()).derive(3);
    let mut head = FusionHead::new(&fcfg, &mut root.derive(1));
    let curve = train_fusion(&macro_model, &micro_model, &mut head, &samples, &cfg.fusion_train, &mut root.derive(2))
        .map_err(|e| match e {
            hydra_hgr::Error::Shape(m) => usage(m),
            other => other.into(),
        })?;
    save_fusion(&a.out, &macro_model, &micro_model, &head)?;
    write_curve(&a.out, &curve)?;
    let last = curve.last().map_or(0.0, |c| c.train_acc);
    println!("fusion: {} windows, final train accuracy {last:.4}, checksum {}", samples.len(), checksum(&head));
    Ok(())
}

fn parse_models(names: &[String]) -> Result<Vec<ModelKind>> {
    let mut models = Vec::new();
    for n in names {
        let m: ModelKind = n.parse().map_err(|e: hydra_hgr::Error| usage(e.to_string()))?;
        if !models.contains(&m) {
            models.push(m);
        }
    }
    if models.is_empty() {
        return Err(usage("--models is empty"));
    }
    Ok(models)
}

fn write_report(out: &Path, table: &ResultTable) -> Result<()> {
    std::fs::write(out.join("results.csv"), table.to_csv())?;
    std::fs::write(out.join("boxplot.csv"), table.boxplot_csv())?;
    std::fs::write(out.join("table.txt"), table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}

fn evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> Result<()> {
    let models = parse_models(&a.models)?;
    let mut subjects = Vec::new();
    for data in &a.data {
        let rows = read_manifest_csv(data)?;
        let decomp = data.join(DECOMP_DIR);
        require(&decomp.join(IMAGES))?;
        let subject = rows[0].subject;
        let classes = num_classes(&rows);
        let windows = load_prepared(data, &decomp)?;
        subjects.push((subject, classes, windows));
    }
    let mut jobs = Vec::new();
    for (s, (_, classes, windows)) in subjects.iter().enumerate() {
        let items: Vec<(usize, usize)> = windows.iter().map(|w| (w.label, w.repetition)).collect();
        let folds = hydra_hgr::eval::kfold_split(&items, cfg.folds).map_err(|e| usage(e.to_string()))?;
        jobs.extend(folds.into_iter().map(|f| (s, *classes, f)));
    }
    let root = SeededRng::new(cfg.seed());
    let results: Vec<(usize, FoldResult)> = jobs
        .par_iter()
        .map(|(s, classes, fold): &(usize, usize, FoldSpec)| {
            let ex = cfg.experiment(*classes);
            let rng = root.derive(fold.fold_idx as u64);
            run_fold(&subjects[*s].2, fold, &ex, &rng)
                .map(|(r, _)| (*s, r))
                .with_context(|| format!("subject {} fold {}", subjects[*s].0, fold.fold_idx))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_subject: BTreeMap<usize, Vec<FoldResult>> = BTreeMap::new();
    for (s, r) in results {
        per_subject.entry(s).or_default().push(r);
    }
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    let mut ordered = Vec::new();
    for (s, res) in per_subject {
        rows.extend(fold_rows(subjects[s].0, &models, &res));
        ordered.push(res);
    }
    write_csv(&a.out.join(FOLD_RESULTS), &rows)?;
    let ids = subjects.iter().map(|s| s.0).collect();
    let table = table_from_subjects(&models, &ordered)?.with_subjects(ids)?;
    write_report(&a.out, &table)
}

fn report(a: &ReportArgs) -> Result<()> {
    let rows: Vec<FoldResultRow> = read_csv(&a.results.join(FOLD_RESULTS))?;
    if rows.is_empty() {
        return Err(usage(format!("{} is empty", a.results.join(FOLD_RESULTS).display())));
    }
    let mut by_model: Vec<(ModelKind, BTreeMap<usize, BTreeMap<u64, f64>>)> = Vec::new();
    let mut ids: Vec<u64> = rows.iter().map(|r| r.subject).collect();
    ids.sort_unstable();
    ids.dedup();
    for r in &rows {
        let m: ModelKind = r.model.parse()?;
        let idx = match by_model.iter().position(|(k, _)| *k == m) {
            Some(i) => i,
            None => {
                by_model.push((m, BTreeMap::new()));
                by_model.len() - 1
            }
        };
        by_model[idx].1.entry(r.fold).or_default().insert(r.subject, r.accuracy);
    }
    let table_rows = by_model
        .into_iter()
        .map(|(model, folds)| ResultRow {
            model,
            accuracies: folds.into_values().map(|s| s.into_values().collect()).collect(),
        })
        .collect();
    let table = ResultTable::new(table_rows)?.with_subjects(ids)?;
    write_report(&a.results, &table)
}

fn predict_cmd(cfg: &RunConfig, a: &PredictArgs) -> Result<()> {
    let raw = read_window(&a.window)?;
    let kind = checkpoint_kind(&a.model)?;
    let env = || -> Result<ndarray::Array3<f64>> {
        match &a.envelope {
            Some(p) => read_window(p),
            None => {
                let x = from_grid(raw.view());
                let e = mu_law_normalize(&envelope(x.view(), &cfg.preprocess)?, cfg.preprocess.mu)?;
                Ok(hydra_hgr::layout::to_grid(e.view(), 0, e.ncols()))
            }
        }
    };
    let stack = || -> Result<ndarray::Array3<f64>> {
        let mut s = micro_extract(raw.view(), &cfg.decomposition, DEFAULT_STA_SUB_WINDOW)?.stack;
        normalize_stack(&mut s);
        Ok(s)
    };
    let probs = match kind.as_str() {
        KIND_MACRO => {
            let m = load_vit(&a.model, KIND_MACRO)?;
            m.predict_proba(&macro_slots(env()?.view(), &m.cfg)?)?
        }
        KIND_MICRO => {
            let m = load_vit(&a.model, KIND_MICRO)?;
            m.predict_proba(&micro_slots(stack()?.view(), &m.cfg)?)?
        }
        KIND_FUSION => {
            let (mm, um, head) = load_fusion(&a.model)?;
            let sample = FusionSample {
                macro_slots: macro_slots(env()?.view(), &mm.cfg)?,
                micro_slots: micro_slots(stack()?.view(), &um.cfg)?,
                label: 0,
            };
            predict(&mm, &um, &head, &sample)?.probabilities
        }
        other => bail!("unknown checkpoint kind '{other}'"),
    };
    let label = argmax(probs.view());
    println!("{label},{:.6}", probs[label]);
    Ok(())
}
