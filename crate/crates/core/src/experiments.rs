//! Repeated active-learning runs over a grid of embeddings, classifiers,
//! strategies and class distributions, averaged into curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::al::{initial_labels, run_session, Evaluator, Session, SessionConfig, SessionMode, SimulatedOracle, Strategy};
use crate::autoencoder::{embed_pool, train_autoencoder, AeConfig, AeKind};
use crate::classifiers::{ClassifierConfig, ClassifierTag, NnConfig, SvmParams};
use crate::dtw::{trajectory_distances, DtwConfig};
use crate::embedding::{Embedding, EmbeddingTag};
use crate::error::{Error, Result};
use crate::generator::{generate_dataset, Dataset, DatasetSpec, GeneratorParams};
use crate::trajectory::{ClassLabel, TrajId, Trajectory, TrajectorySource};
use crate::tsne::{embed, EmbeddingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub embeddings: Vec<EmbeddingTag>,
    pub classifiers: Vec<ClassifierTag>,
    pub strategies: Vec<Strategy>,
    pub alphas: Vec<u8>,
    pub repetitions: usize,
    pub budget: usize,
    /// Pool sizes one tenth of the full study, smaller autoencoders and
    /// shorter t-SNE runs.
    pub desk_scale: bool,
    pub base_seed: u64,
    pub mode: SessionMode,
    pub generator: GeneratorParams,
    pub dtw: DtwConfig,
    pub tsne: EmbeddingConfig,
    pub autoencoder: AeConfig,
    pub svm: SvmParams,
    pub nn: NnConfig,
    /// Worker threads for independent repetitions; 0 uses all cores.
    pub workers: usize,
}

impl ExperimentPlan {
    pub fn desk(embeddings: Vec<EmbeddingTag>, classifiers: Vec<ClassifierTag>, strategies: Vec<Strategy>, alphas: Vec<u8>) -> Self {
        ExperimentPlan {
            embeddings,
            classifiers,
            strategies,
            alphas,
            repetitions: 10,
            budget: 60,
            desk_scale: true,
            base_seed: 0,
            mode: SessionMode::Classification,
            generator: GeneratorParams::default(),
            dtw: DtwConfig {
                parallelism: 1,
                ..DtwConfig::default()
            },
            tsne: EmbeddingConfig {
                iterations: 500,
                ..EmbeddingConfig::default()
            },
            autoencoder: AeConfig::desk(),
            svm: SvmParams::default(),
            nn: NnConfig::default(),
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::invalid("repetitions must be at least 1"));
        }
        if [self.embeddings.len(), self.classifiers.len(), self.strategies.len(), self.alphas.len()].contains(&0) {
            return Err(Error::invalid("every grid axis needs at least one value"));
        }
        self.generator.validate()?;
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellId> {
        let mut cells = Vec::new();
        for &alpha in &self.alphas {
            for &embedding in &self.embeddings {
                for &classifier in &self.classifiers {
                    for &strategy in &self.strategies {
                        cells.push(CellId {
                            embedding,
                            classifier,
                            strategy,
                            alpha,
                        });
                    }
                }
            }
        }
        cells.sort();
        cells.dedup();
        cells
    }

    pub fn dataset_spec(&self, alpha: u8, seed: u64) -> Result<DatasetSpec> {
        let mut spec = if self.desk_scale {
            DatasetSpec::desk_scale(alpha, seed)?
        } else {
            DatasetSpec::full_scale(alpha, seed)?
        };
        spec.params = self.generator.clone();
        Ok(spec)
    }

    fn classifier_config(&self, tag: ClassifierTag, embedding: EmbeddingTag) -> ClassifierConfig {
        match tag {
            ClassifierTag::Svm => ClassifierConfig::Svm(self.svm),
            ClassifierTag::Nn if embedding == EmbeddingTag::Vrae && self.nn == NnConfig::default() => {
                ClassifierConfig::Nn(NnConfig::vrae_variant())
            }
            ClassifierTag::Nn => ClassifierConfig::Nn(self.nn.clone()),
        }
    }

    pub fn session_config(&self, cell: &CellId, seed: u64) -> SessionConfig {
        let classifier = self.classifier_config(cell.classifier, cell.embedding);
        match self.mode {
            SessionMode::Classification => {
                SessionConfig::classification(cell.embedding, classifier, cell.strategy, self.budget, seed)
            }
            SessionMode::UnknownClassDiscovery => {
                SessionConfig::discovery(cell.embedding, classifier, cell.strategy, self.budget, seed)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub embedding: EmbeddingTag,
    pub classifier: ClassifierTag,
    pub strategy: Strategy,
    pub alpha: u8,
}

impl CellId {
    pub fn file_stem(&self) -> String {
        format!("{}_{}_{}_a{}", self.embedding, self.classifier, self.strategy, self.alpha).to_lowercase()
    }
}

/// Per-step statistics over repetitions. Variance is the population variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub cell: CellId,
    pub seeds: Vec<u64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub runs: Vec<Vec<f64>>,
}

impl CurveSummary {
    pub fn from_runs(cell: CellId, seeds: Vec<u64>, runs: Vec<Vec<f64>>) -> Result<Self> {
        let len = runs.first().map_or(0, Vec::len);
        if runs.is_empty() || runs.iter().any(|r| r.len() != len) {
            return Err(Error::invalid("curves must be nonempty and of equal length"));
        }
        let n = runs.len() as f64;
        let mean: Vec<f64> = (0..len).map(|t| runs.iter().map(|r| r[t]).sum::<f64>() / n).collect();
        let variance = (0..len)
            .map(|t| runs.iter().map(|r| (r[t] - mean[t]).powi(2)).sum::<f64>() / n)
            .collect();
        Ok(CurveSummary {
            cell,
            seeds,
            mean,
            variance,
            runs,
        })
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    /// First step at which the mean reaches `level`.
    pub fn first_step_reaching(&self, level: f64) -> Option<usize> {
        self.mean.iter().position(|m| *m >= level)
    }

    /// Columns: step, mean, variance, std.
    pub fn to_columns(&self) -> String {
        let mut out = String::from("# step mean variance std\n");
        for (t, (m, v)) in self.mean.iter().zip(&self.variance).enumerate() {
            let _ = writeln!(out, "{t} {m:.10} {v:.10} {:.10}", v.sqrt());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: CellId,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub summaries: Vec<CurveSummary>,
    pub failures: Vec<CellFailure>,
}

impl PlanResult {
    pub fn get(&self, cell: &CellId) -> Option<&CurveSummary> {
        self.summaries.iter().find(|s| s.cell == *cell)
    }

    /// One curve file per cell plus `manifest.json`.
    pub fn write(&self, dir: &Path, plan: &ExperimentPlan) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut cells = Vec::new();
        for s in &self.summaries {
            let file = format!("{}.txt", s.cell.file_stem());
            std::fs::write(dir.join(&file), s.to_columns())?;
            cells.push(serde_json::json!({"cell": s.cell, "file": file, "seeds": s.seeds}));
        }
        let manifest = serde_json::json!({
            "plan": plan,
            "cells": cells,
            "failures": self.failures,
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Trajectories with labels and variants removed, in id order.
pub fn stripped(dataset: &Dataset) -> Vec<Trajectory> {
    dataset.store.iter().map(Trajectory::unlabeled).collect()
}

/// DTW distances between all trajectories followed by t-SNE.
pub fn mtsne_embedding(pool: &[Trajectory], dtw: &DtwConfig, tsne: &EmbeddingConfig) -> Result<Embedding> {
    let refs: Vec<&Trajectory> = pool.iter().collect();
    let ids: Vec<TrajId> = pool.iter().map(|t| t.id).collect();
    let d = trajectory_distances(&refs, dtw)?;
    Embedding::from_points(embed(&d, tsne)?.into_points(&ids))
}

/// Embeds `pool`. Autoencoders are fitted on `train` only (the whole pool
/// when `None`); t-SNE always sees the whole pool.
pub fn build_embedding(tag: EmbeddingTag, pool: &[Trajectory], train: Option<&[&Trajectory]>, plan: &ExperimentPlan, seed: u64) -> Result<Embedding> {
    match tag {
        EmbeddingTag::MTsne => {
            let tsne = EmbeddingConfig {
                seed,
                ..plan.tsne.clone()
            };
            mtsne_embedding(pool, &plan.dtw, &tsne)
        }
        EmbeddingTag::Rae | EmbeddingTag::Vrae => {
            let kind = if tag == EmbeddingTag::Rae { AeKind::Rae } else { AeKind::Vrae };
            let config = AeConfig {
                kind,
                seed,
                ..plan.autoencoder.clone()
            };
            let refs: Vec<&Trajectory> = pool.iter().collect();
            let model = train_autoencoder(train.unwrap_or(&refs), &config)?;
            embed_pool(&model, &refs)
        }
    }
}

/// Runs every cell of one repetition on one dataset. Errors are per cell.
fn run_repetition(plan: &ExperimentPlan, alpha: u8, rep: usize) -> Vec<(CellId, u64, Result<Vec<f64>>)> {
    let seed = plan.base_seed + rep as u64;
    let cells: Vec<CellId> = plan.cells().into_iter().filter(|c| c.alpha == alpha).collect();
    let fail_all = |e: Error| cells.iter().map(|c| (*c, seed, Err(Error::Session(e.to_string())))).collect();
    let dataset = match plan.dataset_spec(alpha, seed).and_then(|s| generate_dataset(&s)) {
        Ok(d) => d,
        Err(e) => return fail_all(e),
    };
    let pool = stripped(&dataset);
    let mut embeddings: BTreeMap<EmbeddingTag, Result<Arc<Embedding>>> = BTreeMap::new();
    let known = match plan.mode {
        SessionMode::Classification => ClassLabel::ALL.to_vec(),
        SessionMode::UnknownClassDiscovery => vec![ClassLabel::LeftDriveBy, ClassLabel::RightDriveBy],
    };
    let visible = dataset.store.restricted_to(&known);
    let labels = initial_labels(&visible, &dataset.partition);
    let train: Option<Vec<&Trajectory>> = (plan.mode == SessionMode::UnknownClassDiscovery)
        .then(|| visible.ids().iter().filter_map(|&id| visible.fetch(id)).collect());
    let evaluator = Evaluator::from_source(&dataset.store, &dataset.partition, plan.mode == SessionMode::UnknownClassDiscovery);
    cells
        .iter()
        .map(|cell| {
            let emb = embeddings
                .entry(cell.embedding)
                .or_insert_with(|| build_embedding(cell.embedding, &pool, train.as_deref(), plan, seed).map(Arc::new));
            let result = (|| {
                let emb = emb.as_ref().map_err(|e| Error::Session(e.to_string()))?.clone();
                let evaluator = evaluator.as_ref().map_err(|e| Error::Session(e.to_string()))?.clone();
                let session = Session::new(
                    format!("{}-s{seed}", cell.file_stem()),
                    plan.session_config(cell, seed),
                    dataset.partition.clone(),
                    emb,
                    labels.clone(),
                    evaluator,
                )?;
                let done = run_session(session, &mut SimulatedOracle::new(&dataset.store), None)?;
                Ok(done.metrics().to_vec())
            })();
            (*cell, seed, result)
        })
        .collect()
}

/// Executes the plan. Repetition `r` uses seed `base_seed + r` for the
/// dataset, the embedding and the session.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanResult> {
    plan.validate()?;
    let jobs: Vec<(u8, usize)> = plan
        .alphas
        .iter()
        .flat_map(|&a| (0..plan.repetitions).map(move |r| (a, r)))
        .collect();
    let run = || -> Vec<_> { jobs.par_iter().flat_map_iter(|&(a, r)| run_repetition(plan, a, r)).collect() };
    let outcomes = if plan.workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(plan.workers)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(run)
    };
    let mut by_cell: BTreeMap<CellId, (Vec<u64>, Vec<Vec<f64>>)> = BTreeMap::new();
    let mut failures = Vec::new();
    for (cell, seed, result) in outcomes {
        match result {
            Ok(curve) => {
                let e = by_cell.entry(cell).or_default();
                e.0.push(seed);
                e.1.push(curve);
            }
            Err(e) => failures.push(CellFailure {
                cell,
                seed,
                error: e.to_string(),
            }),
        }
    }
    // A cell with any failed repetition is dropped from the summaries.
    let failed: Vec<CellId> = failures.iter().map(|f| f.cell).collect();
    let summaries = by_cell
        .into_iter()
        .filter(|(c, _)| !failed.contains(c))
        .map(|(cell, (seeds, runs))| {
            let mut order: Vec<usize> = (0..seeds.len()).collect();
            order.sort_by_key(|&i| seeds[i]);
            CurveSummary::from_runs(cell, order.iter().map(|&i| seeds[i]).collect(), order.iter().map(|&i| runs[i].clone()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PlanResult { summaries, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub strategy: Strategy,
    pub window_mean: f64,
    /// Standard error of the window mean over repetitions.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    /// Best first.
    pub ranking: Vec<StrategyComparison>,
    /// Pairs `(a, b)` where `a` beats `b` by more than two standard errors
    /// on both sides.
    pub separated: Vec<(Strategy, Strategy)>,
}

impl ComparisonResult {
    pub fn is_separated(&self, better: Strategy, worse: Strategy) -> bool {
        self.separated.contains(&(better, worse))
    }
}

/// Mean metric over the inclusive step window, per strategy.
pub fn compare_strategies(summaries: &[&CurveSummary], window: (usize, usize)) -> Result<ComparisonResult> {
    let first = summaries.first().ok_or_else(|| Error::invalid("nothing to compare"))?;
    for s in summaries {
        let c = s.cell;
        if (c.embedding, c.classifier, c.alpha) != (first.cell.embedding, first.cell.classifier, first.cell.alpha) {
            return Err(Error::invalid("summaries differ in more than the strategy"));
        }
        if window.1 >= s.mean.len() || window.0 > window.1 {
            return Err(Error::invalid(format!("window {window:?} outside the curve")));
        }
    }
    let mut ranking: Vec<StrategyComparison> = summaries
        .iter()
        .map(|s| {
            let per_run: Vec<f64> = s
                .runs
                .iter()
                .map(|r| r[window.0..=window.1].iter().sum::<f64>() / (window.1 - window.0 + 1) as f64)
                .collect();
            let n = per_run.len() as f64;
            let mean = per_run.iter().sum::<f64>() / n;
            let var = per_run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            StrategyComparison {
                strategy: s.cell.strategy,
                window_mean: mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect();
    ranking.sort_by(|a, b| b.window_mean.total_cmp(&a.window_mean).then(a.strategy.cmp(&b.strategy)));
    let mut separated = Vec::new();
    for a in &ranking {
        for b in &ranking {
            if a.window_mean - 2.0 * a.std_error > b.window_mean + 2.0 * b.std_error {
                separated.push((a.strategy, b.strategy));
            }
        }
    }
    Ok(ComparisonResult { ranking, separated })
}
