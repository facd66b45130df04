//! Leave-one-repetition-out cross-validation and result reporting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use ndarray::Array1;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::PreparedWindow;
use crate::fusion::{extract_features, predict_features, train_head, FusionConfig, FusionHead, FusionSample, DEFAULT_HIDDEN};
use crate::nn::TrainParams;
use crate::tensor_io::SeededRng;
use crate::vit::{accuracy, train, Sample, VitConfig, VitModel};

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold_idx: usize,
    pub test_repetition: usize,
    pub train_repetitions: Vec<usize>,
}

impl FoldSpec {
    pub fn is_test(&self, repetition: usize) -> bool {
        repetition == self.test_repetition
    }
}

/// One fold per repetition: fold k holds out repetition k. Every class must
/// have repetitions 0..num_folds (extra repetitions always train).
pub fn kfold_split(items: &[(usize, usize)], num_folds: usize) -> Result<Vec<FoldSpec>> {
    if num_folds < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 folds, got {num_folds}")));
    }
    let mut per_class: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(label, rep) in items {
        per_class.entry(label).or_default().insert(rep);
    }
    if per_class.is_empty() {
        return Err(Error::InvalidParam("empty manifest".into()));
    }
    for (label, reps) in &per_class {
        if let Some(missing) = (0..num_folds).find(|r| !reps.contains(r)) {
            return Err(Error::InvalidParam(format!("class {label} lacks repetition {missing}")));
        }
    }
    let all: BTreeSet<usize> = per_class.values().flatten().copied().collect();
    Ok((0..num_folds)
        .map(|k| FoldSpec {
            fold_idx: k,
            test_repetition: k,
            train_repetitions: all.iter().copied().filter(|&r| r != k).collect(),
        })
        .collect())
}

/// Indices of the (train, test) windows of a fold.
pub fn split_indices(fold: &FoldSpec, repetitions: &[usize]) -> (Vec<usize>, Vec<usize>) {
    (0..repetitions.len()).partition(|&i| !fold.is_test(repetitions[i]))
}

/// Errors if any id occurs on both sides of a split.
pub fn check_disjoint<'a>(
    train: impl IntoIterator<Item = &'a str>,
    test: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let train: HashSet<&str> = train.into_iter().collect();
    if let Some(id) = test.into_iter().find(|id| train.contains(id)) {
        return Err(Error::InvalidParam(format!("window {id} is in both train and test")));
    }
    Ok(())
}

/// Fraction of predictions equal to their label; an empty fold is an error.
pub fn score(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::InvalidParam("empty test fold".into()));
    }
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKind {
    Macro,
    Micro,
    Hydra,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Macro, ModelKind::Micro, ModelKind::Hydra];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Macro => "macro",
            ModelKind::Micro => "micro",
            ModelKind::Hydra => "hydra",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "macro" => Ok(ModelKind::Macro),
            "micro" => Ok(ModelKind::Micro),
            "hydra" | "fusion" => Ok(ModelKind::Hydra),
            other => Err(Error::InvalidParam(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub model: ModelKind,
    /// accuracies[fold][subject]
    pub accuracies: Vec<Vec<f64>>,
}

impl ResultRow {
    pub fn fold_means(&self) -> Vec<f64> {
        self.accuracies.iter().map(|a| mean(a)).collect()
    }

    pub fn fold_stds(&self) -> Vec<f64> {
        self.accuracies.iter().map(|a| sample_std(a)).collect()
    }

    pub fn average(&self) -> f64 {
        mean(&self.fold_means())
    }

    pub fn average_std(&self) -> f64 {
        mean(&self.fold_stds())
    }

    /// Accuracy of each subject averaged over folds.
    pub fn subject_accuracies(&self) -> Vec<f64> {
        let n = self.accuracies.first().map_or(0, Vec::len);
        (0..n)
            .map(|s| mean(&self.accuracies.iter().map(|f| f[s]).collect::<Vec<_>>()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    /// Identifier of each subject column (generator seeds for synthetic data).
    pub subjects: Vec<u64>,
}

impl ResultTable {
    /// `acc[model][fold][subject]`; every model needs the same fold and
    /// subject counts, and no fold may be empty.
    pub fn new(rows: Vec<ResultRow>) -> Result<Self> {
        let shape = |r: &ResultRow| (r.accuracies.len(), r.accuracies.first().map_or(0, Vec::len));
        let Some(first) = rows.first() else {
            return Err(Error::InvalidParam("result table needs at least one model".into()));
        };
        let (folds, subjects) = shape(first);
        if folds == 0 || subjects == 0 {
            return Err(Error::InvalidParam("result table needs at least one fold and subject".into()));
        }
        for r in &rows {
            if r.accuracies.len() != folds || r.accuracies.iter().any(|f| f.len() != subjects) {
                return Err(Error::Shape(format!("{} results are not {folds} folds × {subjects} subjects", r.model.as_str())));
            }
        }
        Ok(Self {
            rows,
            subjects: (0..subjects as u64).collect(),
        })
    }

    pub fn with_subjects(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.subjects.len() {
            return Err(Error::Shape(format!("{} subject ids for {} subjects", ids.len(), self.subjects.len())));
        }
        self.subjects = ids;
        Ok(self)
    }

    pub fn num_folds(&self) -> usize {
        self.rows[0].accuracies.len()
    }

    pub fn row(&self, model: ModelKind) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// `model,fold,mean,std` with one `average` row per model.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,fold,mean,std\n");
        for r in &self.rows {
            for (k, (m, s)) in r.fold_means().iter().zip(r.fold_stds()).enumerate() {
                let _ = writeln!(out, "{},{k},{m:.6},{s:.6}", r.model.as_str());
            }
            let _ = writeln!(out, "{},average,{:.6},{:.6}", r.model.as_str(), r.average(), r.average_std());
        }
        out
    }

    /// Accuracy (%) ± STD per fold and on average, one line per model.
    pub fn to_text(&self) -> String {
        let folds = self.num_folds();
        let cell = 16;
        let mut out = String::from("Classification accuracy and STD (%), synthetic data\n");
        let _ = write!(out, "{:<8}", "Model");
        for k in 0..folds {
            let _ = write!(out, "{:>cell$}", format!("Fold {}", k + 1));
        }
        let _ = writeln!(out, "{:>cell$}", "Average");
        for r in &self.rows {
            let _ = write!(out, "{:<8}", r.model.as_str());
            for (m, s) in r.fold_means().iter().zip(r.fold_stds()) {
                let _ = write!(out, "{:>cell$}", format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s));
            }
            let _ = writeln!(out, "{:>cell$}", format!("{:.2} ± {:.2}", 100.0 * r.average(), 100.0 * r.average_std()));
        }
        out
    }

    /// `model,subject,accuracy`, subject accuracy averaged over folds.
    pub fn boxplot_csv(&self) -> String {
        let mut out = String::from("model,subject,accuracy\n");
        for r in &self.rows {
            for (s, a) in self.subjects.iter().zip(r.subject_accuracies()) {
                let _ = writeln!(out, "{},{s},{a:.6}", r.model.as_str());
            }
        }
        out
    }
}

/// Architectures and optimisation settings for one cross-validation run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub macro_vit: VitConfig,
    pub micro_vit: VitConfig,
    pub fusion_hidden: usize,
    pub macro_train: TrainParams,
    pub micro_train: TrainParams,
    pub fusion_train: TrainParams,
    pub num_folds: usize,
}

impl ExperimentConfig {
    pub fn paper(num_classes: usize) -> Self {
        Self {
            macro_vit: VitConfig::macro_path(num_classes),
            micro_vit: VitConfig::micro_path(num_classes),
            fusion_hidden: DEFAULT_HIDDEN,
            macro_train: TrainParams {
                lr: 1e-4,
                weight_decay: 1e-3,
                epochs: 20,
                batch_size: 128,
                ..Default::default()
            },
            micro_train: TrainParams {
                lr: 3e-4,
                weight_decay: 1e-3,
                epochs: 50,
                batch_size: 64,
                ..Default::default()
            },
            fusion_train: TrainParams {
                lr: 5e-4,
                weight_decay: 1e-4,
                epochs: 20,
                batch_size: 128,
                ..Default::default()
            },
            num_folds: DEFAULT_FOLDS,
        }
    }

    /// A small configuration that trains a 4-class synthetic subject in a
    /// few minutes on one core: d = 32, 4 heads, 2 layers, MLP 64, batch 8.
    pub fn desk(num_classes: usize) -> Self {
        let paper = Self::paper(num_classes);
        let params = |lr: f64, epochs: usize| TrainParams {
            lr,
            weight_decay: 1e-3,
            epochs,
            batch_size: 8,
            ..Default::default()
        };
        Self {
            macro_vit: paper.macro_vit.with_dims(32, 4, 2, 64),
            micro_vit: paper.micro_vit.with_dims(32, 4, 2, 64),
            macro_train: params(2e-3, 20),
            micro_train: params(1e-3, 30),
            fusion_train: params(1e-3, 20),
            ..paper
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.macro_vit.validate()?;
        self.micro_vit.validate()?;
        for p in [&self.macro_train, &self.micro_train, &self.fusion_train] {
            p.validate()?;
        }
        if self.macro_vit.embed_dim != self.micro_vit.embed_dim {
            return Err(Error::InvalidParam("macro and micro embed dims must match for fusion".into()));
        }
        if self.macro_vit.num_classes != self.micro_vit.num_classes {
            return Err(Error::InvalidParam("macro and micro class counts differ".into()));
        }
        if self.fusion_hidden == 0 {
            return Err(Error::InvalidParam("fusion hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            embed_dim: self.macro_vit.embed_dim,
            hidden: self.fusion_hidden,
            num_classes: self.macro_vit.num_classes,
        }
    }
}

/// Test accuracy of every model on one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold_idx: usize,
    pub macro_acc: f64,
    pub micro_acc: f64,
    pub hydra_acc: f64,
}

impl FoldResult {
    pub fn get(&self, model: ModelKind) -> f64 {
        match model {
            ModelKind::Macro => self.macro_acc,
            ModelKind::Micro => self.micro_acc,
            ModelKind::Hydra => self.hydra_acc,
        }
    }
}

/// Trained models of one fold.
#[derive(Debug, Clone)]
pub struct FoldModels {
    pub macro_model: VitModel,
    pub micro_model: VitModel,
    pub head: FusionHead,
}

fn samples(windows: &[&PreparedWindow], cfg: &VitConfig, micro: bool) -> Result<Vec<Sample>> {
    windows
        .iter()
        .map(|w| {
            Ok(Sample {
                slots: if micro { w.micro_slots(cfg)? } else { w.macro_slots(cfg)? },
                label: w.label,
            })
        })
        .collect()
}

/// Trains Macro and Micro on the training repetitions, then the fusion head
/// on their frozen class tokens, and scores all three on the held-out
/// repetition. Each model draws from its own child stream of `rng`.
pub fn run_fold(
    windows: &[PreparedWindow],
    fold: &FoldSpec,
    cfg: &ExperimentConfig,
    rng: &SeededRng,
) -> Result<(FoldResult, FoldModels)> {
    cfg.validate()?;
    let (train_set, test_set): (Vec<&PreparedWindow>, Vec<&PreparedWindow>) =
        windows.iter().partition(|w| !fold.is_test(w.repetition));
    if test_set.is_empty() {
        return Err(Error::InvalidParam(format!("fold {} has no test windows", fold.fold_idx)));
    }
    if train_set.is_empty() {
        return Err(Error::InvalidParam(format!("fold {} has no training windows", fold.fold_idx)));
    }
    check_disjoint(train_set.iter().map(|w| w.id.as_str()), test_set.iter().map(|w| w.id.as_str()))?;

    let macro_train = samples(&train_set, &cfg.macro_vit, false)?;
    let macro_test = samples(&test_set, &cfg.macro_vit, false)?;
    let micro_train = samples(&train_set, &cfg.micro_vit, true)?;
    let micro_test = samples(&test_set, &cfg.micro_vit, true)?;

    let mut macro_model = VitModel::new(cfg.macro_vit.clone(), &mut rng.derive(1))?;
    train(&mut macro_model, &macro_train, &cfg.macro_train, &mut rng.derive(2))?;
    let mut micro_model = VitModel::new(cfg.micro_vit.clone(), &mut rng.derive(3))?;
    train(&mut micro_model, &micro_train, &cfg.micro_train, &mut rng.derive(4))?;

    let fused = |m: &[Sample], u: &[Sample]| -> Result<Vec<Array1<f64>>> {
        m.iter()
            .zip(u)
            .map(|(a, b)| {
                extract_features(
                    &macro_model,
                    &micro_model,
                    &FusionSample {
                        macro_slots: a.slots.clone(),
                        micro_slots: b.slots.clone(),
                        label: a.label,
                    },
                )
            })
            .collect()
    };
    let train_feats = fused(&macro_train, &micro_train)?;
    let test_feats = fused(&macro_test, &micro_test)?;
    let mut head = FusionHead::new(&cfg.fusion_config(), &mut rng.derive(5));
    let labels: Vec<usize> = train_set.iter().map(|w| w.label).collect();
    train_head(&mut head, &train_feats, &labels, &cfg.fusion_train, &mut rng.derive(6))?;
    let hydra_pred: Vec<usize> = test_feats.iter().map(|f| predict_features(&head, f.view()).label).collect();
    let test_labels: Vec<usize> = test_set.iter().map(|w| w.label).collect();

    let result = FoldResult {
        fold_idx: fold.fold_idx,
        macro_acc: accuracy(&macro_model, &macro_test)?,
        micro_acc: accuracy(&micro_model, &micro_test)?,
        hydra_acc: score(&hydra_pred, &test_labels)?,
    };
    Ok((
        result,
        FoldModels {
            macro_model,
            micro_model,
            head,
        },
    ))
}

/// Runs every fold of one subject (folds in parallel on the current rayon
/// pool, results in fold order).
pub fn cross_validate(windows: &[PreparedWindow], cfg: &ExperimentConfig, seed: u64) -> Result<Vec<FoldResult>> {
    let items: Vec<(usize, usize)> = windows.iter().map(|w| (w.label, w.repetition)).collect();
    let folds = kfold_split(&items, cfg.num_folds)?;
    let root = SeededRng::new(seed);
    folds
        .par_iter()
        .map(|f| run_fold(windows, f, cfg, &root.derive(f.fold_idx as u64)).map(|(r, _)| r))
        .collect()
}

/// Assembles per-subject fold results into a table with the given models.
pub fn table_from_subjects(models: &[ModelKind], subjects: &[Vec<FoldResult>]) -> Result<ResultTable> {
    let Some(first) = subjects.first() else {
        return Err(Error::InvalidParam("no subjects".into()));
    };
    let folds = first.len();
    if subjects.iter().any(|s| s.len() != folds) {
        return Err(Error::Shape("subjects have different fold counts".into()));
    }
    let rows = models
        .iter()
        .map(|&m| ResultRow {
            model: m,
            accuracies: (0..folds).map(|k| subjects.iter().map(|s| s[k].get(m)).collect()).collect(),
        })
        .collect();
    ResultTable::new(rows)
}
