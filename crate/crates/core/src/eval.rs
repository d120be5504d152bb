//! Identification-accuracy evaluation: acc(t_enr | t_use) grids over
//! enrollment and use-time lengths, repeated random enrollment sampling,
//! bootstrap confidence intervals, and grid deltas.
//!
//! Per (enrollment length, repetition) an index is built once; every
//! use-time cell then re-counts the cached per-window decisions, which keeps
//! the grid cheap. Session 1 supplies enrollment slices, session 2 supplies
//! use-time trials, so the two never mix.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::{Embedder, EncoderModel, WindowClassifier};
use crate::error::{Error, Result};
use crate::features::{window_offsets, FeatureSequence};
use crate::identify::{majority_vote, vote_among, vote_among_neighbors};
use crate::index::{Neighbor, ReferenceIndex};
use crate::util::rng_from;

/// One user's two recording sessions, preprocessed to BRA features.
#[derive(Clone, Debug)]
pub struct UserData {
    pub user_id: String,
    pub session1: FeatureSequence,
    pub session2: FeatureSequence,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnrollLength {
    Minutes(f64),
    All,
}

impl fmt::Display for EnrollLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnrollLength::All => write!(f, "all"),
            EnrollLength::Minutes(m) => write!(f, "{m}"),
        }
    }
}

impl EnrollLength {
    pub fn parse(text: &str) -> Result<EnrollLength> {
        if text.trim() == "all" {
            Ok(EnrollLength::All)
        } else {
            text.trim()
                .parse::<f64>()
                .map(EnrollLength::Minutes)
                .map_err(|_| Error::Config(format!("bad enrollment length {text:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalProtocol {
    pub enrollment: Vec<EnrollLength>,
    pub use_minutes: Vec<f64>,
    pub repetitions: usize,
    /// Step between use-time trial windows.
    pub step_seconds: u32,
    pub k: usize,
    /// Stride (frames) between reference/query windows inside a trial.
    pub window_stride: usize,
    pub seed: u64,
    /// Chance-level control: reshuffle all reference labels independently
    /// per trial, which makes trial successes i.i.d. Bernoulli(1/users).
    pub permute_labels: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            enrollment: [1.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0]
                .iter()
                .map(|m| EnrollLength::Minutes(*m))
                .chain([EnrollLength::All])
                .collect(),
            use_minutes: vec![1.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            repetitions: 5,
            step_seconds: 1,
            k: 50,
            window_stride: 1,
            seed: 0,
            permute_labels: false,
        }
    }
}

impl EvalProtocol {
    fn validate(&self, users: &[UserData]) -> Result<u32> {
        if users.is_empty() {
            return Err(Error::DegenerateData("no users to evaluate".into()));
        }
        if self.enrollment.is_empty() || self.use_minutes.is_empty() {
            return Err(Error::Config("protocol needs enrollment and use-time lengths".into()));
        }
        if self.repetitions == 0 || self.k == 0 || self.window_stride == 0 || self.step_seconds == 0
        {
            return Err(Error::Config(
                "repetitions, k, window_stride and step_seconds must be positive".into(),
            ));
        }
        if self
            .use_minutes
            .iter()
            .chain(self.enrollment.iter().filter_map(|e| match e {
                EnrollLength::Minutes(m) => Some(m),
                EnrollLength::All => None,
            }))
            .any(|m| *m <= 0.0)
        {
            return Err(Error::Config("lengths must be positive".into()));
        }
        let fps = users[0].session1.fps;
        for u in users {
            if u.session1.fps != fps || u.session2.fps != fps {
                return Err(Error::Config(format!(
                    "user {} has mixed frame rates",
                    u.user_id
                )));
            }
            // enrollment slices must never leak into use-time data
            if u.session1.session_id == u.session2.session_id {
                return Err(Error::Validation(format!(
                    "user {}: enrollment and use-time sessions share id {:?}",
                    u.user_id, u.session1.session_id
                )));
            }
        }
        Ok(fps)
    }
}

/// One identification trial inside a grid cell.
#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub user: String,
    pub start_frame: usize,
    pub predicted: String,
    pub correct: bool,
}

/// Accuracy of one (t_enr, t_use, repetition) evaluation.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub t_use_minutes: f64,
    pub accuracy: f64,
    pub trials: usize,
    pub records: Vec<TrialRecord>,
    pub excluded: Vec<String>,
}

fn frames_of_minutes(minutes: f64, fps: u32) -> usize {
    (minutes * 60.0 * f64::from(fps)).round() as usize
}

/// Enrollment slice starts per user for one repetition: None marks an
/// excluded (too short) user. Both the embedding and the classifier paths
/// draw from this so they see identical slices.
fn draw_enrollment_slices(
    users: &[UserData],
    t_enr: EnrollLength,
    window_len: usize,
    fps: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<(usize, usize)>> {
    users
        .iter()
        .map(|u| {
            let len1 = u.session1.len();
            let f_enr = match t_enr {
                EnrollLength::All => len1,
                EnrollLength::Minutes(m) => frames_of_minutes(m, fps),
            };
            if len1 < f_enr || f_enr < window_len {
                return None;
            }
            let start = match t_enr {
                EnrollLength::All => 0,
                EnrollLength::Minutes(_) => rng.random_range(0..=len1 - f_enr),
            };
            Some((start, f_enr))
        })
        .collect()
}

/// Per-user cached query-side state for one enrollment repetition.
struct QueryCache {
    offsets: Vec<usize>,
    neighbors: Vec<Vec<Neighbor>>,
    decisions: Vec<(String, f64)>,
}

/// Evaluates one enrollment length and repetition against every use-time
/// length, sharing the reference index and per-window votes across cells.
pub fn evaluate_enrollment(
    embedder: &dyn Embedder,
    users: &[UserData],
    t_enr: EnrollLength,
    rep: usize,
    use_minutes: &[f64],
    protocol: &EvalProtocol,
) -> Result<Vec<CellOutcome>> {
    let fps = protocol.validate(users)?;
    let window_len = embedder.window_len();
    let stride = protocol.window_stride;
    let mut rng = rng_from(protocol.seed, &format!("enroll:{t_enr}:{rep}"));

    let slices = draw_enrollment_slices(users, t_enr, window_len, fps, &mut rng);
    let mut index = ReferenceIndex::new(embedder.embedding_dim());
    let mut excluded_enroll: Vec<String> = Vec::new();
    for (u, slice) in users.iter().zip(&slices) {
        match slice {
            None => excluded_enroll.push(format!(
                "{}: session 1 too short for enrollment length {t_enr}",
                u.user_id
            )),
            Some((start, f_enr)) => {
                let offsets: Vec<usize> =
                    (*start..=start + f_enr - window_len).step_by(stride).collect();
                let emb = embedder.embed(&u.session1, &offsets)?;
                let offs_u32: Vec<u32> = offsets.iter().map(|o| *o as u32).collect();
                index.enroll(&u.user_id, emb.view(), &offs_u32)?;
            }
        }
    }
    if index.is_empty() {
        return Err(Error::DegenerateData(format!(
            "no user has enough session-1 data for enrollment length {t_enr}"
        )));
    }

    // query-side cache: embeddings, neighbor lists, and plain decisions
    let caches: Result<Vec<Option<QueryCache>>> = users
        .iter()
        .zip(&slices)
        .map(|(u, slice)| {
            if slice.is_none() {
                return Ok(None);
            }
            let offsets = window_offsets(u.session2.len(), window_len, stride);
            if offsets.is_empty() {
                return Ok(None);
            }
            let emb = embedder.embed(&u.session2, &offsets)?;
            let neighbors: Result<Vec<Vec<Neighbor>>> = (0..emb.nrows())
                .into_par_iter()
                .map(|i| index.knn(&emb.row(i).to_vec(), protocol.k))
                .collect();
            let neighbors = neighbors?;
            let decisions: Result<Vec<(String, f64)>> = neighbors
                .iter()
                .map(|ns| {
                    let d = vote_among_neighbors(&index, ns)?;
                    Ok((index.user_name(d.user).to_string(), d.strength))
                })
                .collect();
            Ok(Some(QueryCache { offsets, neighbors, decisions: decisions? }))
        })
        .collect();
    let caches = caches?;

    let step = protocol.step_seconds as usize * fps as usize;
    let mut outcomes = Vec::with_capacity(use_minutes.len());
    for &tu in use_minutes {
        let f_use = frames_of_minutes(tu, fps);
        if f_use < window_len {
            return Err(Error::Config(format!(
                "use-time length {tu} min is shorter than one {window_len}-frame window"
            )));
        }
        let mut records = Vec::new();
        let mut excluded = excluded_enroll.clone();
        for (u, cache) in users.iter().zip(&caches) {
            let Some(cache) = cache else {
                if slices[users.iter().position(|x| x.user_id == u.user_id).unwrap()].is_some() {
                    excluded.push(format!("{}: session 2 yields no query windows", u.user_id));
                }
                continue;
            };
            let len2 = u.session2.len();
            if len2 < f_use {
                excluded.push(format!(
                    "{}: session 2 too short for use-time length {tu} min",
                    u.user_id
                ));
                continue;
            }
            for s in (0..=len2 - f_use).step_by(step) {
                let lo = s.div_ceil(stride);
                let hi = (s + f_use - window_len) / stride;
                if lo > hi || hi >= cache.offsets.len() {
                    continue;
                }
                let predicted = if protocol.permute_labels {
                    // fresh shuffle of all reference labels per trial keeps
                    // trial outcomes independent
                    let mut trial_rng = rng_from(
                        protocol.seed,
                        &format!("perm:{t_enr}:{rep}:{}:{s}", u.user_id),
                    );
                    let mut labels: Vec<usize> =
                        (0..index.len()).map(|e| index.entry_user(e)).collect();
                    labels.shuffle(&mut trial_rng);
                    let votes: Vec<(String, f64)> = (lo..=hi)
                        .map(|i| {
                            let d = vote_among(
                                cache.neighbors[i].iter().map(|n| (labels[n.entry], n.distance)),
                                |lab| index.user_name(lab),
                            )
                            .expect("non-empty neighbor list");
                            (index.user_name(d.user).to_string(), d.strength)
                        })
                        .collect();
                    majority_vote(votes.iter().map(|(n, st)| (n.as_str(), *st)))?
                } else {
                    majority_vote(cache.decisions[lo..=hi].iter().map(|(n, st)| (n.as_str(), *st)))?
                };
                records.push(TrialRecord {
                    user: u.user_id.clone(),
                    start_frame: s,
                    correct: predicted == u.user_id,
                    predicted,
                });
            }
        }
        let trials = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        outcomes.push(CellOutcome {
            t_use_minutes: tu,
            accuracy: if trials == 0 { 0.0 } else { correct as f64 / trials as f64 },
            trials,
            records,
            excluded,
        });
    }
    Ok(outcomes)
}

/// Accuracy for a single (t_enr, t_use) pair, one repetition: the per-user
/// random enrollment slice is embedded and enrolled, then every t_use-long
/// window of session 2 (stepped by `step_seconds`) is identified.
pub fn sequence_accuracy(
    embedder: &dyn Embedder,
    users: &[UserData],
    t_enr: EnrollLength,
    t_use_minutes: f64,
    rep: usize,
    protocol: &EvalProtocol,
) -> Result<CellOutcome> {
    let mut outcomes =
        evaluate_enrollment(embedder, users, t_enr, rep, &[t_use_minutes], protocol)?;
    Ok(outcomes.remove(0))
}

/// One grid cell, aggregated over repetitions.
#[derive(Clone, Debug)]
pub struct GridCell {
    pub t_enr: EnrollLength,
    pub t_use_minutes: f64,
    pub rep_accuracies: Vec<f64>,
    pub mean: f64,
    pub trials: usize,
    /// Per-trial correctness pooled over repetitions (bootstrap input).
    pub correct: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct AccuracyGrid {
    pub cells: Vec<GridCell>,
    pub excluded: Vec<String>,
}

impl AccuracyGrid {
    pub fn cell(&self, t_enr: EnrollLength, t_use_minutes: f64) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.t_enr == t_enr && c.t_use_minutes == t_use_minutes)
    }

    /// Per-repetition CSV: `t_enr,t_use,rep,accuracy,trials`.
    pub fn to_grid_csv(&self) -> String {
        let mut out = String::from("t_enr,t_use,rep,accuracy,trials\n");
        for cell in &self.cells {
            for (rep, acc) in cell.rep_accuracies.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    cell.t_enr, cell.t_use_minutes, rep, acc, cell.trials
                ));
            }
        }
        out
    }

    /// Mean + bootstrapped 95% CI per cell:
    /// `t_enr,t_use,mean_accuracy,ci_low,ci_high,trials,reps`.
    pub fn to_summary_csv(&self, seed: u64) -> String {
        let mut out = String::from("t_enr,t_use,mean_accuracy,ci_low,ci_high,trials,reps\n");
        for cell in &self.cells {
            let values: Vec<f64> =
                cell.correct.iter().map(|c| if *c { 1.0 } else { 0.0 }).collect();
            let mut rng = rng_from(seed, &format!("ci:{}:{}", cell.t_enr, cell.t_use_minutes));
            let (lo, hi) = bootstrap_ci(&values, 0.95, 1000, &mut rng);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                cell.t_enr,
                cell.t_use_minutes,
                cell.mean,
                lo,
                hi,
                cell.trials,
                cell.rep_accuracies.len()
            ));
        }
        out
    }
}

fn grid_from_outcomes(
    protocol: &EvalProtocol,
    per_rep: Vec<(EnrollLength, usize, Vec<CellOutcome>)>,
) -> AccuracyGrid {
    let mut cells: Vec<GridCell> = Vec::new();
    let mut excluded: Vec<String> = Vec::new();
    for t_enr in &protocol.enrollment {
        for (ui, tu) in protocol.use_minutes.iter().enumerate() {
            let mut rep_accuracies = Vec::with_capacity(protocol.repetitions);
            let mut trials = 0usize;
            let mut correct = Vec::new();
            for rep in 0..protocol.repetitions {
                let (.., outcomes) = per_rep
                    .iter()
                    .find(|(e, r, _)| e == t_enr && *r == rep)
                    .expect("every repetition evaluated");
                let cell = &outcomes[ui];
                rep_accuracies.push(cell.accuracy);
                trials = cell.trials;
                correct.extend(cell.records.iter().map(|t| t.correct));
                if rep == 0 {
                    excluded.extend(cell.excluded.iter().map(|e| format!("{t_enr}|{tu}: {e}")));
                }
            }
            let mean = rep_accuracies.iter().sum::<f64>() / rep_accuracies.len() as f64;
            cells.push(GridCell {
                t_enr: *t_enr,
                t_use_minutes: *tu,
                rep_accuracies,
                mean,
                trials,
                correct,
            });
        }
    }
    excluded.sort();
    excluded.dedup();
    AccuracyGrid { cells, excluded }
}

/// Full grid: for every enrollment length, `repetitions` independent random
/// enrollment samplings, each evaluated at every use-time length. The "all"
/// enrollment length is deterministic, so its repetitions are computed once
/// and replicated.
pub fn accuracy_grid(
    embedder: &dyn Embedder,
    users: &[UserData],
    protocol: &EvalProtocol,
) -> Result<AccuracyGrid> {
    protocol.validate(users)?;
    let mut per_rep = Vec::new();
    for t_enr in &protocol.enrollment {
        let deterministic = matches!(t_enr, EnrollLength::All);
        for rep in 0..protocol.repetitions {
            if deterministic && rep > 0 {
                let first: Vec<CellOutcome> = per_rep
                    .iter()
                    .find(|(e, r, _): &&(EnrollLength, usize, Vec<CellOutcome>)| {
                        e == t_enr && *r == 0
                    })
                    .map(|(_, _, o)| o.clone())
                    .unwrap();
                per_rep.push((*t_enr, rep, first));
            } else {
                let outcomes = evaluate_enrollment(
                    embedder,
                    users,
                    *t_enr,
                    rep,
                    &protocol.use_minutes,
                    protocol,
                )?;
                per_rep.push((*t_enr, rep, outcomes));
            }
        }
    }
    Ok(grid_from_outcomes(protocol, per_rep))
}

/// Trains a classifier on enrollment slices; used by the classifier grid.
pub type ClassifierTrainer<'a> =
    &'a (dyn Fn(&[(String, FeatureSequence)], u64) -> Result<EncoderModel> + Sync);

/// Classifier counterpart of [`evaluate_enrollment`]: trains a model on the
/// repetition's enrollment slices (the same slices the embedding path would
/// draw), then majority-votes per-window argmax predictions.
pub fn evaluate_enrollment_classifier(
    trainer: ClassifierTrainer<'_>,
    users: &[UserData],
    t_enr: EnrollLength,
    rep: usize,
    use_minutes: &[f64],
    protocol: &EvalProtocol,
) -> Result<Vec<CellOutcome>> {
    let fps = protocol.validate(users)?;
    let mut rng = rng_from(protocol.seed, &format!("enroll:{t_enr}:{rep}"));
    // window length is the trained model's; draw slices against a nominal
    // window of 1 so exclusion only depends on the slice length itself
    let slices = draw_enrollment_slices(users, t_enr, 1, fps, &mut rng);
    let mut excluded_enroll = Vec::new();
    let mut training_set = Vec::new();
    for (u, slice) in users.iter().zip(&slices) {
        match slice {
            None => excluded_enroll.push(format!(
                "{}: session 1 too short for enrollment length {t_enr}",
                u.user_id
            )),
            Some((start, len)) => {
                training_set.push((u.user_id.clone(), u.session1.slice(*start, *len)));
            }
        }
    }
    if training_set.len() < 2 {
        return Err(Error::DegenerateData(
            "classifier evaluation needs at least 2 enrollable users".into(),
        ));
    }
    let model = trainer(
        &training_set,
        crate::util::derive_seed(protocol.seed, &format!("clf:{t_enr}:{rep}")),
    )?;
    let window_len = WindowClassifier::window_len(&model);
    let classes: Vec<String> = model.classes().to_vec();
    let stride = protocol.window_stride;

    let step = protocol.step_seconds as usize * fps as usize;
    let mut outcomes = Vec::with_capacity(use_minutes.len());
    // cache per-user argmax decisions once
    let mut decisions_by_user: Vec<Option<(Vec<usize>, Vec<String>)>> = Vec::new();
    for (u, slice) in users.iter().zip(&slices) {
        if slice.is_none() {
            decisions_by_user.push(None);
            continue;
        }
        let offsets = window_offsets(u.session2.len(), window_len, stride);
        if offsets.is_empty() {
            decisions_by_user.push(None);
            continue;
        }
        let logits = model.logits(&u.session2, &offsets)?;
        let votes: Vec<String> = (0..logits.nrows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0usize;
                for c in 1..row.len() {
                    if row[c] > row[best] || (row[c] == row[best] && classes[c] < classes[best]) {
                        best = c;
                    }
                }
                classes[best].clone()
            })
            .collect();
        decisions_by_user.push(Some((offsets, votes)));
    }

    for &tu in use_minutes {
        let f_use = frames_of_minutes(tu, fps);
        if f_use < window_len {
            return Err(Error::Config(format!(
                "use-time length {tu} min is shorter than one {window_len}-frame window"
            )));
        }
        let mut records = Vec::new();
        let mut excluded = excluded_enroll.clone();
        for (u, cached) in users.iter().zip(&decisions_by_user) {
            let Some((offsets, votes)) = cached else { continue };
            let len2 = u.session2.len();
            if len2 < f_use {
                excluded.push(format!(
                    "{}: session 2 too short for use-time length {tu} min",
                    u.user_id
                ));
                continue;
            }
            for s in (0..=len2 - f_use).step_by(step) {
                let lo = s.div_ceil(stride);
                let hi = (s + f_use - window_len) / stride;
                if lo > hi || hi >= offsets.len() {
                    continue;
                }
                let predicted =
                    majority_vote(votes[lo..=hi].iter().map(|v| (v.as_str(), 0.0)))?;
                records.push(TrialRecord {
                    user: u.user_id.clone(),
                    start_frame: s,
                    correct: predicted == u.user_id,
                    predicted,
                });
            }
        }
        let trials = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        outcomes.push(CellOutcome {
            t_use_minutes: tu,
            accuracy: if trials == 0 { 0.0 } else { correct as f64 / trials as f64 },
            trials,
            records,
            excluded,
        });
    }
    Ok(outcomes)
}

/// Classifier grid: a new model is trained per (enrollment length,
/// repetition), mirroring how a classification-based system would be
/// re-trained for every enrollment change.
pub fn accuracy_grid_classifier(
    trainer: ClassifierTrainer<'_>,
    users: &[UserData],
    protocol: &EvalProtocol,
) -> Result<AccuracyGrid> {
    protocol.validate(users)?;
    let mut per_rep = Vec::new();
    for t_enr in &protocol.enrollment {
        let deterministic = matches!(t_enr, EnrollLength::All);
        for rep in 0..protocol.repetitions {
            if deterministic && rep > 0 {
                let first: Vec<CellOutcome> = per_rep
                    .iter()
                    .find(|(e, r, _): &&(EnrollLength, usize, Vec<CellOutcome>)| {
                        e == t_enr && *r == 0
                    })
                    .map(|(_, _, o)| o.clone())
                    .unwrap();
                per_rep.push((*t_enr, rep, first));
            } else {
                let outcomes = evaluate_enrollment_classifier(
                    trainer,
                    users,
                    *t_enr,
                    rep,
                    &protocol.use_minutes,
                    protocol,
                )?;
                per_rep.push((*t_enr, rep, outcomes));
            }
        }
    }
    Ok(grid_from_outcomes(protocol, per_rep))
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_ci(
    values: &[f64],
    confidence: f64,
    resamples: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len();
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += values[rng.random_range(0..n)];
        }
        means.push(sum / n as f64);
    }
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - confidence) / 2.0;
    (quantile(&means, alpha), quantile(&means, 1.0 - alpha))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Cellwise mean(a) - mean(b); the axes must match exactly.
pub fn grid_delta(a: &AccuracyGrid, b: &AccuracyGrid) -> Result<Vec<(String, f64, f64)>> {
    if a.cells.len() != b.cells.len() {
        return Err(Error::Shape(format!(
            "grids have {} vs {} cells",
            a.cells.len(),
            b.cells.len()
        )));
    }
    a.cells
        .iter()
        .zip(&b.cells)
        .map(|(ca, cb)| {
            if ca.t_enr != cb.t_enr || ca.t_use_minutes != cb.t_use_minutes {
                return Err(Error::Shape(format!(
                    "grid axes differ: ({}, {}) vs ({}, {})",
                    ca.t_enr, ca.t_use_minutes, cb.t_enr, cb.t_use_minutes
                )));
            }
            Ok((ca.t_enr.to_string(), ca.t_use_minutes, ca.mean - cb.mean))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Encoding, FEATURE_DIM};
    use ndarray::Array2;

    /// Embeds every window of a user's sequence onto that user's fixed unit
    /// vector; a perfect encoder for testing the protocol machinery.
    struct OracleEmbedder {
        window_len: usize,
        users: Vec<String>,
    }

    impl Embedder for OracleEmbedder {
        fn window_len(&self) -> usize {
            self.window_len
        }
        fn embedding_dim(&self) -> usize {
            self.users.len()
        }
        fn embed(&self, seq: &FeatureSequence, offsets: &[usize]) -> Result<Array2<f32>> {
            let slot = self
                .users
                .iter()
                .position(|u| *u == seq.user_id)
                .expect("known user");
            let mut out = Array2::zeros((offsets.len(), self.users.len()));
            for i in 0..offsets.len() {
                out[[i, slot]] = 1.0;
            }
            Ok(out)
        }
    }

    fn synthetic_users(n: usize, s1_minutes: f64, s2_minutes: f64, fps: u32) -> Vec<UserData> {
        (0..n)
            .map(|i| {
                let user_id = format!("u{i:02}");
                let mk = |session: &str, minutes: f64| FeatureSequence {
                    user_id: user_id.clone(),
                    session_id: session.to_string(),
                    fps,
                    encoding: Encoding::Bra,
                    rows: Array2::zeros((frames_of_minutes(minutes, fps), FEATURE_DIM)),
                };
                UserData {
                    user_id: user_id.clone(),
                    session1: mk("1", s1_minutes),
                    session2: mk("2", s2_minutes),
                }
            })
            .collect()
    }

    fn small_protocol() -> EvalProtocol {
        EvalProtocol {
            enrollment: vec![EnrollLength::Minutes(1.0), EnrollLength::All],
            use_minutes: vec![1.0, 2.0],
            repetitions: 3,
            step_seconds: 30,
            k: 5,
            window_stride: 15,
            seed: 11,
            permute_labels: false,
        }
    }

    #[test]
    fn oracle_embedder_scores_perfectly() {
        let fps = 15;
        let users = synthetic_users(4, 3.0, 3.0, fps);
        let oracle = OracleEmbedder {
            window_len: 45,
            users: users.iter().map(|u| u.user_id.clone()).collect(),
        };
        let grid = accuracy_grid(&oracle, &users, &small_protocol()).unwrap();
        for cell in &grid.cells {
            assert_eq!(cell.mean, 1.0, "cell {} {}", cell.t_enr, cell.t_use_minutes);
            assert!(cell.trials > 0);
        }
        assert!(grid.excluded.is_empty());
    }

    #[test]
    fn trial_counts_match_step_arithmetic() {
        let fps = 15;
        let users = synthetic_users(3, 4.0, 4.0, fps);
        let oracle = OracleEmbedder {
            window_len: 45,
            users: users.iter().map(|u| u.user_id.clone()).collect(),
        };
        let protocol = EvalProtocol {
            enrollment: vec![EnrollLength::Minutes(2.0)],
            use_minutes: vec![1.0],
            repetitions: 1,
            step_seconds: 1,
            k: 3,
            window_stride: 15,
            seed: 2,
            permute_labels: false,
        };
        let out =
            sequence_accuracy(&oracle, &users, EnrollLength::Minutes(2.0), 1.0, 0, &protocol)
                .unwrap();
        // per user: (session_seconds - t_use*60) + 1 = (240 - 60) + 1 = 181
        assert_eq!(out.trials, 3 * 181);
    }

    #[test]
    fn short_sessions_are_excluded_with_warnings() {
        let fps = 15;
        let mut users = synthetic_users(3, 3.0, 3.0, fps);
        users[1].session1.rows = Array2::zeros((frames_of_minutes(0.5, fps), FEATURE_DIM));
        let oracle = OracleEmbedder {
            window_len: 45,
            users: users.iter().map(|u| u.user_id.clone()).collect(),
        };
        let protocol = small_protocol();
        let out =
            sequence_accuracy(&oracle, &users, EnrollLength::Minutes(1.0), 1.0, 0, &protocol)
                .unwrap();
        assert!(out.excluded.iter().any(|e| e.contains("u01")));
        // excluded user contributes no trials
        assert!(out.records.iter().all(|r| r.user != "u01"));
    }

    #[test]
    fn all_enrollment_repetitions_are_identical() {
        let users = synthetic_users(3, 2.0, 2.0, 15);
        let oracle = OracleEmbedder {
            window_len: 45,
            users: users.iter().map(|u| u.user_id.clone()).collect(),
        };
        let protocol = EvalProtocol {
            enrollment: vec![EnrollLength::All],
            use_minutes: vec![1.0],
            repetitions: 5,
            ..small_protocol()
        };
        let grid = accuracy_grid(&oracle, &users, &protocol).unwrap();
        let cell = &grid.cells[0];
        assert_eq!(cell.rep_accuracies.len(), 5);
        let first = cell.rep_accuracies[0];
        assert!(cell.rep_accuracies.iter().all(|a| *a == first));
    }

    #[test]
    fn grid_mean_is_average_of_repetitions_and_reruns_bit_exactly() {
        let users = synthetic_users(3, 2.0, 2.0, 15);
        let oracle = OracleEmbedder {
            window_len: 45,
            users: users.iter().map(|u| u.user_id.clone()).collect(),
        };
        let protocol = small_protocol();
        let a = accuracy_grid(&oracle, &users, &protocol).unwrap();
        let b = accuracy_grid(&oracle, &users, &protocol).unwrap();
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            let mean: f64 =
                ca.rep_accuracies.iter().sum::<f64>() / ca.rep_accuracies.len() as f64;
            assert_eq!(ca.mean, mean);
            assert_eq!(ca.mean.to_bits(), cb.mean.to_bits());
            assert_eq!(ca.rep_accuracies, cb.rep_accuracies);
            assert_eq!(ca.correct, cb.correct);
        }
    }

    #[test]
    fn bootstrap_ci_degenerate_cases() {
        let mut rng = rng_from(5, "ci");
        let ones = vec![1.0; 40];
        assert_eq!(bootstrap_ci(&ones, 0.95, 200, &mut rng), (1.0, 1.0));
        let zeros = vec![0.0; 40];
        assert_eq!(bootstrap_ci(&zeros, 0.95, 200, &mut rng), (0.0, 0.0));
    }

    #[test]
    fn bootstrap_ci_matches_binomial_standard_error() {
        // 500 ones + 500 zeros: the binomial oracle gives
        // se = 0.5/sqrt(1000) = 0.01581, so the 95% interval is
        // 0.5 -+ 1.96 * se = [0.4690, 0.5310]; allow percentile-bootstrap
        // noise of 0.01 around each endpoint.
        let mut values = vec![1.0; 500];
        values.extend(vec![0.0; 500]);
        let mut rng = rng_from(7, "ci2");
        let (lo, hi) = bootstrap_ci(&values, 0.95, 1000, &mut rng);
        assert!((lo - 0.469).abs() <= 0.01, "lo {lo}");
        assert!((hi - 0.531).abs() <= 0.01, "hi {hi}");
        assert!(lo >= 0.40 && hi <= 0.60);
    }

    #[test]
    fn grid_delta_cases() {
        let users = synthetic_users(3, 2.0, 2.0, 15);
        let oracle = OracleEmbedder {
            window_len: 45,
            users: users.iter().map(|u| u.user_id.clone()).collect(),
        };
        let protocol = small_protocol();
        let a = accuracy_grid(&oracle, &users, &protocol).unwrap();
        let deltas = grid_delta(&a, &a).unwrap();
        assert!(deltas.iter().all(|(_, _, d)| *d == 0.0));

        let mut b = a.clone();
        b.cells[1].mean -= 0.1;
        let deltas = grid_delta(&a, &b).unwrap();
        assert!((deltas[1].2 - 0.1).abs() < 1e-12);

        b.cells.swap(0, 1);
        assert!(matches!(grid_delta(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_session_ids_are_rejected() {
        let mut users = synthetic_users(2, 2.0, 2.0, 15);
        users[0].session2.session_id = "1".into();
        let oracle = OracleEmbedder {
            window_len: 45,
            users: users.iter().map(|u| u.user_id.clone()).collect(),
        };
        assert!(matches!(
            accuracy_grid(&oracle, &users, &small_protocol()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn enroll_length_parse_and_display() {
        assert_eq!(EnrollLength::parse("all").unwrap(), EnrollLength::All);
        assert_eq!(
            EnrollLength::parse("2.5").unwrap(),
            EnrollLength::Minutes(2.5)
        );
        assert!(EnrollLength::parse("bogus").is_err());
        assert_eq!(EnrollLength::All.to_string(), "all");
        assert_eq!(EnrollLength::Minutes(5.0).to_string(), "5");
    }
}
