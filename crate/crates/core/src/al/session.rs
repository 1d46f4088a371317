//! Pool-based active-learning session: train on the annotated set, score the
//! unlabeled pool, query the most informative point, retrain, repeat until
//! the budget is spent.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::journal::{Journal, JournalEvent};
use super::strategy::{informativeness_entropy, informativeness_margin, informativeness_random, top_k, Strategy};
use crate::classifiers::{ClassifierConfig, Model};
use crate::embedding::{Embedding, EmbeddingTag};
use crate::error::{Error, Result};
use crate::metrics::{f1_score, Averaging};
use crate::partition::DatasetPartition;
use crate::trajectory::{ClassLabel, TrajId, TrajectorySource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Classification,
    UnknownClassDiscovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub embedding: EmbeddingTag,
    pub classifier: ClassifierConfig,
    pub strategy: Strategy,
    pub budget: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: SessionMode,
    /// Classes the classifier is trained on. All three in classification mode.
    pub known_classes: Vec<ClassLabel>,
}

impl SessionConfig {
    pub fn classification(embedding: EmbeddingTag, classifier: ClassifierConfig, strategy: Strategy, budget: usize, seed: u64) -> Self {
        SessionConfig {
            embedding,
            classifier,
            strategy,
            budget,
            batch_size: 1,
            seed,
            mode: SessionMode::Classification,
            known_classes: ClassLabel::ALL.to_vec(),
        }
    }

    pub fn discovery(embedding: EmbeddingTag, classifier: ClassifierConfig, strategy: Strategy, budget: usize, seed: u64) -> Self {
        SessionConfig {
            mode: SessionMode::UnknownClassDiscovery,
            known_classes: vec![ClassLabel::LeftDriveBy, ClassLabel::RightDriveBy],
            ..Self::classification(embedding, classifier, strategy, budget, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let mut known = self.known_classes.clone();
        known.sort();
        known.dedup();
        if known.len() < 2 || known.len() != self.known_classes.len() {
            return Err(Error::invalid("need at least two distinct known classes"));
        }
        Ok(())
    }
}

/// Hidden truth used only to score the session, never for training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluator {
    #[serde(with = "crate::trajectory::id_map")]
    pub test: BTreeMap<TrajId, ClassLabel>,
    /// Labels of pool points, needed to count discoveries when the oracle
    /// answers "unknown".
    #[serde(default, with = "crate::trajectory::id_map")]
    pub pool: BTreeMap<TrajId, ClassLabel>,
}

impl Evaluator {
    pub fn from_source(source: &dyn TrajectorySource, partition: &DatasetPartition, with_pool: bool) -> Result<Self> {
        let label = |id: TrajId| -> Result<ClassLabel> {
            source
                .fetch(id)
                .and_then(|t| t.label)
                .ok_or_else(|| Error::invalid(format!("no ground truth for trajectory {id}")))
        };
        let test = partition.test().iter().map(|&id| Ok((id, label(id)?))).collect::<Result<_>>()?;
        let pool = if with_pool {
            partition.unlabeled().iter().map(|&id| Ok((id, label(id)?))).collect::<Result<_>>()?
        } else {
            BTreeMap::new()
        };
        Ok(Evaluator { test, pool })
    }
}

/// Labels of annotated points visible through `source`. Points the source
/// hides are left out, so the classifier never sees them.
pub fn initial_labels(source: &dyn TrajectorySource, partition: &DatasetPartition) -> BTreeMap<TrajId, ClassLabel> {
    partition
        .annotated()
        .iter()
        .filter_map(|&id| source.fetch(id).and_then(|t| t.label).map(|l| (id, l)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub step: usize,
    pub id: TrajId,
    pub informativeness: f64,
    pub strategy: Strategy,
    pub label: Option<ClassLabel>,
    /// Unix milliseconds at which the answer arrived.
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub step: usize,
    pub id: TrajId,
    pub informativeness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionStatus {
    AwaitingLabel,
    Retraining,
    Complete,
    Suspended,
}

/// Answers label queries.
pub trait Oracle {
    /// `None` stands for "other / unknown".
    fn answer(&mut self, id: TrajId) -> Result<Option<ClassLabel>>;
}

/// Replays stored ground truth.
pub struct SimulatedOracle<'a> {
    source: &'a dyn TrajectorySource,
}

impl<'a> SimulatedOracle<'a> {
    pub fn new(source: &'a dyn TrajectorySource) -> Self {
        SimulatedOracle { source }
    }
}

impl Oracle for SimulatedOracle<'_> {
    fn answer(&mut self, id: TrajId) -> Result<Option<ClassLabel>> {
        Ok(self.source.fetch(id).ok_or(Error::UnknownId(id))?.label)
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    config: SessionConfig,
    partition: DatasetPartition,
    embedding: Arc<Embedding>,
    initial_labels: BTreeMap<TrajId, ClassLabel>,
    evaluator: Evaluator,
    train_labels: BTreeMap<TrajId, ClassLabel>,
    model: Model,
    rounds: usize,
    log: Vec<QueryRecord>,
    metrics: Vec<f64>,
    pending: Vec<PendingQuery>,
    rng: ChaCha8Rng,
    outbox: Vec<JournalEvent>,
}

/// Decision-relevant state, for reproducibility comparisons (wall times excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct SessionTrace {
    pub queries: Vec<(usize, TrajId, u64, Option<ClassLabel>)>,
    pub metrics: Vec<u64>,
    pub partition: DatasetPartition,
    pub pending: Vec<PendingQuery>,
}

impl Session {
    /// Validates the inputs, trains the initial model, records the step-0
    /// metric and issues the first query.
    pub fn new(
        id: impl Into<String>,
        config: SessionConfig,
        partition: DatasetPartition,
        embedding: Arc<Embedding>,
        initial_labels: BTreeMap<TrajId, ClassLabel>,
        evaluator: Evaluator,
    ) -> Result<Self> {
        config.validate()?;
        if config.budget > partition.unlabeled().len() {
            return Err(Error::BudgetTooLarge {
                budget: config.budget,
                unlabeled: partition.unlabeled().len(),
            });
        }
        if let Some(id) = partition.all_ids().find(|id| !embedding.contains(*id)) {
            return Err(Error::invalid(format!("embedding has no point for trajectory {id}")));
        }
        if let Some(id) = initial_labels.keys().find(|id| !partition.annotated().contains(id)) {
            return Err(Error::invalid(format!("initial label for {id}, which is not annotated")));
        }
        if let Some(id) = evaluator.test.keys().find(|id| !partition.test().contains(id)) {
            return Err(Error::invalid(format!("evaluator truth for {id}, which is not a test point")));
        }
        let train_labels: BTreeMap<TrajId, ClassLabel> = initial_labels
            .iter()
            .filter(|(_, l)| config.known_classes.contains(l))
            .map(|(i, l)| (*i, *l))
            .collect();
        for class in &config.known_classes {
            if !train_labels.values().any(|l| l == class) {
                return Err(Error::invalid(format!("initial annotated set has no {class}")));
            }
        }
        let id = id.into();
        let mut outbox = vec![JournalEvent::Init {
            session_id: id.clone(),
            config: config.clone(),
            partition: partition.clone(),
            embedding: (*embedding).clone(),
            initial_labels: initial_labels.clone(),
            evaluator: evaluator.clone(),
        }];
        let model = train(&config, &embedding, &train_labels, 0)?;
        outbox.push(JournalEvent::RetrainComplete {
            step: 0,
            train_size: train_labels.len(),
        });
        let mut s = Session {
            id,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            partition,
            embedding,
            initial_labels,
            evaluator,
            train_labels,
            model,
            rounds: 0,
            log: Vec::new(),
            metrics: Vec::new(),
            pending: Vec::new(),
            outbox,
        };
        s.record_metric()?;
        s.issue_queries()?;
        Ok(s)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn partition(&self) -> &DatasetPartition {
        &self.partition
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log(&self) -> &[QueryRecord] {
        &self.log
    }

    pub fn metrics(&self) -> &[f64] {
        &self.metrics
    }

    pub fn pending(&self) -> &[PendingQuery] {
        &self.pending
    }

    pub fn train_labels(&self) -> &BTreeMap<TrajId, ClassLabel> {
        &self.train_labels
    }

    pub fn initial_labels(&self) -> &BTreeMap<TrajId, ClassLabel> {
        &self.initial_labels
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    pub fn budget_remaining(&self) -> usize {
        self.config.budget - self.log.len()
    }

    pub fn status(&self) -> SessionStatus {
        if self.pending.is_empty() {
            SessionStatus::Complete
        } else {
            SessionStatus::AwaitingLabel
        }
    }

    /// Journal events produced since the last call.
    pub fn take_events(&mut self) -> Vec<JournalEvent> {
        std::mem::take(&mut self.outbox)
    }

    /// Informativeness of every unlabeled point under the current model, in id order.
    pub fn score_unlabeled(&mut self) -> Result<Vec<(TrajId, f64)>> {
        let ids: Vec<TrajId> = self.partition.unlabeled().iter().copied().collect();
        let scores = match self.config.strategy {
            Strategy::Random => informativeness_random(ids.len(), &mut self.rng),
            s => score_with_model(&self.model, &self.embedding, &ids, s)?,
        };
        Ok(ids.into_iter().zip(scores).collect())
    }

    fn issue_queries(&mut self) -> Result<()> {
        let remaining = self.budget_remaining();
        if remaining == 0 || self.partition.unlabeled().is_empty() {
            return Ok(());
        }
        let scored = self.score_unlabeled()?;
        let scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
        let k = self.config.batch_size.min(remaining);
        for idx in top_k(&scores, k) {
            let q = PendingQuery {
                step: self.log.len() + self.pending.len() + 1,
                id: scored[idx].0,
                informativeness: scored[idx].1,
            };
            self.outbox.push(JournalEvent::QueryIssued {
                step: q.step,
                id: q.id,
                informativeness: q.informativeness,
            });
            self.pending.push(q);
        }
        Ok(())
    }

    /// Accepts the answer for a pending query. Once every pending query of
    /// the round is answered the model is retrained, the metric recorded and
    /// the next round issued.
    pub fn submit(&mut self, id: TrajId, label: Option<ClassLabel>, at_ms: u64) -> Result<()> {
        let pos = self
            .pending
            .iter()
            .position(|q| q.id == id)
            .ok_or_else(|| Error::Session(format!("trajectory {id} is not pending")))?;
        let q = self.pending.remove(pos);
        if self.config.mode == SessionMode::Classification && label.is_none() {
            self.pending.insert(pos, q);
            return Err(Error::Session("an unknown answer is only allowed in discovery mode".into()));
        }
        self.outbox.push(JournalEvent::LabelReceived {
            step: q.step,
            id,
            label,
            at_ms,
        });
        self.partition.annotate(id)?;
        if let Some(l) = label.filter(|l| self.config.known_classes.contains(l)) {
            self.train_labels.insert(id, l);
        }
        self.log.push(QueryRecord {
            step: q.step,
            id,
            informativeness: q.informativeness,
            strategy: self.config.strategy,
            label,
            wall_time_ms: at_ms,
        });
        if self.pending.is_empty() {
            self.rounds += 1;
            self.model = train(&self.config, &self.embedding, &self.train_labels, self.rounds)?;
            self.outbox.push(JournalEvent::RetrainComplete {
                step: self.log.len(),
                train_size: self.train_labels.len(),
            });
            self.record_metric()?;
            self.issue_queries()?;
        }
        Ok(())
    }

    fn record_metric(&mut self) -> Result<()> {
        let value = match self.config.mode {
            SessionMode::Classification => self.test_f1()?,
            SessionMode::UnknownClassDiscovery => {
                self.log.iter().filter(|r| self.is_discovery(r)).count() as f64
            }
        };
        self.metrics.push(value);
        self.outbox.push(JournalEvent::Metric {
            step: self.log.len(),
            value,
        });
        Ok(())
    }

    fn is_discovery(&self, r: &QueryRecord) -> bool {
        let hidden = self.evaluator.pool.get(&r.id).copied().or(r.label);
        !hidden.is_some_and(|l| self.config.known_classes.contains(&l))
    }

    /// Macro F1 of the current model on the test set.
    pub fn test_f1(&self) -> Result<f64> {
        if self.evaluator.test.is_empty() {
            return Ok(0.0);
        }
        let mut pred = Vec::with_capacity(self.evaluator.test.len());
        let mut truth = Vec::with_capacity(self.evaluator.test.len());
        for (&id, &l) in &self.evaluator.test {
            pred.push(self.model.predict(self.embedding.get(id)?)?);
            truth.push(l);
        }
        f1_score(&pred, &truth, &self.config.known_classes, Averaging::Macro)
    }

    /// Cumulative count of queried points outside the known classes, one
    /// entry per query.
    pub fn discovery_curve(&self) -> Result<Vec<usize>> {
        if self.config.mode != SessionMode::UnknownClassDiscovery {
            return Err(Error::Session("discovery metrics need a discovery-mode session".into()));
        }
        let mut count = 0;
        Ok(self
            .log
            .iter()
            .map(|r| {
                count += usize::from(self.is_discovery(r));
                count
            })
            .collect())
    }

    pub fn trace(&self) -> SessionTrace {
        SessionTrace {
            queries: self
                .log
                .iter()
                .map(|r| (r.step, r.id, r.informativeness.to_bits(), r.label))
                .collect(),
            metrics: self.metrics.iter().map(|m| m.to_bits()).collect(),
            partition: self.partition.clone(),
            pending: self.pending.clone(),
        }
    }

    /// Rebuilds a session by re-executing a journal. Every recomputed event
    /// must match the journaled one; events the journal lacks (after a crash
    /// between a label and the work it triggers) are returned for appending.
    pub fn replay(events: &[JournalEvent]) -> Result<(Session, Vec<JournalEvent>)> {
        let Some(JournalEvent::Init {
            session_id,
            config,
            partition,
            embedding,
            initial_labels,
            evaluator,
        }) = events.first()
        else {
            return Err(Error::Journal("journal does not start with an init entry".into()));
        };
        let mut s = Session::new(
            session_id.clone(),
            config.clone(),
            partition.clone(),
            Arc::new(embedding.clone()),
            initial_labels.clone(),
            evaluator.clone(),
        )?;
        let mut produced = s.take_events();
        let mut cursor = 0;
        for (n, event) in events.iter().enumerate() {
            if let JournalEvent::LabelReceived { id, label, at_ms, .. } = event {
                // Everything before the label must already have been produced.
                while cursor < n {
                    check(&produced, cursor, &events[cursor])?;
                    cursor += 1;
                }
                s.submit(*id, *label, *at_ms)?;
                produced.extend(s.take_events());
            }
        }
        while cursor < events.len() {
            check(&produced, cursor, &events[cursor])?;
            cursor += 1;
        }
        let missing = produced.split_off(events.len().min(produced.len()));
        Ok((s, missing))
    }

    /// Replays the journal at `path`, appending any missing tail.
    pub fn resume(path: &std::path::Path) -> Result<(Session, Journal)> {
        let events = super::journal::read_journal(path)?;
        let (session, missing) = Session::replay(&events)?;
        let mut journal = Journal::open(path)?;
        journal.append_all(&missing)?;
        Ok((session, journal))
    }
}

fn check(produced: &[JournalEvent], at: usize, expected: &JournalEvent) -> Result<()> {
    match produced.get(at) {
        Some(e) if e == expected => Ok(()),
        Some(e) => Err(Error::Journal(format!("entry {at} diverges on replay: journal {expected:?}, recomputed {e:?}"))),
        None => Err(Error::Journal(format!("entry {at} has no counterpart on replay"))),
    }
}

fn train(config: &SessionConfig, embedding: &Embedding, labels: &BTreeMap<TrajId, ClassLabel>, round: usize) -> Result<Model> {
    let mut points = Vec::with_capacity(labels.len());
    let mut ys = Vec::with_capacity(labels.len());
    for (&id, &l) in labels {
        points.push(embedding.get(id)?.to_vec());
        ys.push(l);
    }
    let seed = config.seed ^ (round as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    config.classifier.train(&points, &ys, seed)
}

/// Model-based informativeness for `ids`, computed in parallel.
pub fn score_with_model(model: &Model, embedding: &Embedding, ids: &[TrajId], strategy: Strategy) -> Result<Vec<f64>> {
    ids.par_iter()
        .map(|&id| {
            let dist = model.predict_proba(embedding.get(id)?)?;
            match strategy {
                Strategy::Margin => informativeness_margin(&dist),
                Strategy::Entropy => Ok(informativeness_entropy(&dist)),
                Strategy::Random => Err(Error::invalid("random scores do not depend on the model")),
            }
        })
        .collect()
}

/// Runs a session to completion against `oracle`, journaling if asked.
pub fn run_session(
    mut session: Session,
    oracle: &mut dyn Oracle,
    mut journal: Option<&mut Journal>,
) -> Result<Session> {
    loop {
        if let Some(j) = journal.as_deref_mut() {
            j.append_all(&session.take_events())?;
        } else {
            session.outbox.clear();
        }
        let Some(q) = session.pending.first().cloned() else {
            return Ok(session);
        };
        let label = oracle.answer(q.id)?;
        session.submit(q.id, label, now_ms())?;
    }
}
