//! Two-level majority voting: each window votes via its k nearest reference
//! neighbors, then the sequence takes a majority over the window votes.
//!
//! Votes are unweighted counts. Ties resolve by smallest summed neighbor
//! distance, then lexicographically smallest user id, so identification is
//! fully deterministic.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::encoder::{Embedder, WindowClassifier};
use crate::error::{Error, Result};
use crate::features::{window_offsets, FeatureSequence};
use crate::index::{Neighbor, ReferenceIndex};

/// Outcome of identifying one sequence.
#[derive(Clone, Debug)]
pub struct IdentificationResult {
    pub predicted: String,
    /// Per-window predicted user, in window order.
    pub window_votes: Vec<String>,
    /// Window offsets matching `window_votes`.
    pub window_offsets: Vec<usize>,
    pub tally: BTreeMap<String, usize>,
    pub window_count: usize,
}

impl IdentificationResult {
    /// One-line CLI serialization: `predicted=<id> windows=<N> tally=...`.
    pub fn summary_line(&self) -> String {
        let mut counts: Vec<(&String, &usize)> = self.tally.iter().collect();
        counts.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        let tally = counts
            .iter()
            .map(|(u, c)| format!("{u}:{c}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "predicted={} windows={} tally={}",
            self.predicted, self.window_count, tally
        )
    }
}

/// One window's decision: the winning user plus the summed distance of that
/// user's neighbors (used as the tie-break strength downstream).
#[derive(Clone, Debug)]
pub struct WindowDecision {
    pub user: usize,
    pub strength: f64,
}

/// Majority over labeled, distance-scored votes; ties by smaller summed
/// distance, then by lexicographically smaller user name. `name_of` maps a
/// label to its user id.
pub fn vote_among<'a>(
    items: impl Iterator<Item = (usize, f32)>,
    name_of: impl Fn(usize) -> &'a str,
) -> Option<WindowDecision> {
    let mut counts: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (label, distance) in items {
        let e = counts.entry(label).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += f64::from(distance);
    }
    let mut best: Option<(usize, usize, f64)> = None; // (user, count, dist)
    for (&user, &(count, dist)) in &counts {
        let better = match &best {
            None => true,
            Some((bu, bc, bd)) => {
                count > *bc
                    || (count == *bc
                        && (dist < *bd || (dist == *bd && name_of(user) < name_of(*bu))))
            }
        };
        if better {
            best = Some((user, count, dist));
        }
    }
    best.map(|(user, _, strength)| WindowDecision { user, strength })
}

/// Majority over the labels of `neighbors`; ties by smaller summed distance,
/// then by lexicographically smaller user id.
pub fn vote_among_neighbors(
    index: &ReferenceIndex,
    neighbors: &[Neighbor],
) -> Result<WindowDecision> {
    vote_among(neighbors.iter().map(|n| (n.user, n.distance)), |u| {
        index.user_name(u)
    })
    .ok_or(Error::EmptyIndex)
}

/// The most common user among the k nearest neighbors of one embedding.
pub fn identify_window(index: &ReferenceIndex, embedding: &[f32], k: usize) -> Result<String> {
    let neighbors = index.knn(embedding, k)?;
    let decision = vote_among_neighbors(index, &neighbors)?;
    Ok(index.user_name(decision.user).to_string())
}

/// Sequence-level majority over per-window (user, strength) votes, where a
/// vote's strength is the summed neighbor distance backing it (0 when no
/// distances exist). Same tie-break order as the window vote.
pub fn majority_vote<'a>(votes: impl Iterator<Item = (&'a str, f64)>) -> Result<String> {
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    let mut total = 0usize;
    for (user, strength) in votes {
        let e = tally.entry(user).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += strength;
        total += 1;
    }
    if total == 0 {
        return Err(Error::DegenerateData("no window votes to aggregate".into()));
    }
    let mut best: Option<(&str, usize, f64)> = None;
    for (&user, &(count, strength)) in &tally {
        let better = match &best {
            None => true,
            Some((bu, bc, bs)) => {
                count > *bc || (count == *bc && (strength < *bs || (strength == *bs && user < *bu)))
            }
        };
        if better {
            best = Some((user, count, strength));
        }
    }
    Ok(best.unwrap().0.to_string())
}

fn result_from_votes(
    votes: Vec<(String, f64)>,
    offsets: Vec<usize>,
) -> Result<IdentificationResult> {
    let predicted = majority_vote(votes.iter().map(|(u, s)| (u.as_str(), *s)))?;
    let mut tally = BTreeMap::new();
    for (u, _) in &votes {
        *tally.entry(u.clone()).or_insert(0) += 1;
    }
    Ok(IdentificationResult {
        predicted,
        window_count: votes.len(),
        window_votes: votes.into_iter().map(|(u, _)| u).collect(),
        window_offsets: offsets,
        tally,
    })
}

/// Embeds every sliding window of `seq` and majority-votes the per-window
/// k-NN identifications.
pub fn identify_sequence(
    model: &dyn Embedder,
    index: &ReferenceIndex,
    seq: &FeatureSequence,
    stride: usize,
    k: usize,
) -> Result<IdentificationResult> {
    let window_len = model.window_len();
    if seq.len() < window_len {
        return Err(Error::InsufficientLength { required: window_len, actual: seq.len() });
    }
    let offsets = window_offsets(seq.len(), window_len, stride);
    let embeddings = model.embed(seq, &offsets)?;
    let decisions: Result<Vec<(String, f64)>> = (0..embeddings.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f32> = embeddings.row(i).to_vec();
            let neighbors = index.knn(&row, k)?;
            let d = vote_among_neighbors(index, &neighbors)?;
            Ok((index.user_name(d.user).to_string(), d.strength))
        })
        .collect();
    result_from_votes(decisions?, offsets)
}

/// Classification-mode counterpart: per-window argmax over class logits.
/// Logit ties pick the lexicographically smallest class; the sequence vote
/// breaks ties lexicographically (no distances exist here).
pub fn identify_sequence_classifier(
    model: &dyn WindowClassifier,
    seq: &FeatureSequence,
    stride: usize,
) -> Result<IdentificationResult> {
    let window_len = model.window_len();
    if seq.len() < window_len {
        return Err(Error::InsufficientLength { required: window_len, actual: seq.len() });
    }
    let offsets = window_offsets(seq.len(), window_len, stride);
    let logits = model.logits(seq, &offsets)?;
    let classes = model.classes();
    if logits.ncols() != classes.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} classes",
            logits.ncols(),
            classes.len()
        )));
    }
    let votes: Vec<(String, f64)> = (0..logits.nrows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0usize;
            for c in 1..row.len() {
                if row[c] > row[best]
                    || (row[c] == row[best] && classes[c] < classes[best])
                {
                    best = c;
                }
            }
            (classes[best].clone(), 0.0)
        })
        .collect();
    result_from_votes(votes, offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    fn line_index(points: &[(f32, &str)]) -> ReferenceIndex {
        let mut index = ReferenceIndex::new(1);
        for (i, (x, user)) in points.iter().enumerate() {
            index
                .enroll(user, arr2(&[[*x]]).view(), &[i as u32])
                .unwrap();
        }
        index
    }

    #[test]
    fn strict_majority_wins() {
        let index = line_index(&[(0.1, "A"), (0.2, "A"), (0.3, "B"), (9.0, "C")]);
        assert_eq!(identify_window(&index, &[0.0], 3).unwrap(), "A");
    }

    #[test]
    fn k_equals_one_is_nearest_neighbor() {
        let index = line_index(&[(0.5, "A"), (0.1, "B")]);
        assert_eq!(identify_window(&index, &[0.0], 1).unwrap(), "B");
    }

    #[test]
    fn tie_broken_by_summed_distance() {
        // neighbors A(0.1), B(0.2), B(0.3), A(0.9): counts tie 2-2,
        // sums A = 1.0, B = 0.5 -> B
        let index = line_index(&[(0.1, "A"), (0.2, "B"), (0.3, "B"), (0.9, "A")]);
        assert_eq!(identify_window(&index, &[0.0], 4).unwrap(), "B");
    }

    #[test]
    fn full_tie_breaks_lexicographically() {
        let index = line_index(&[(0.5, "B"), (-0.5, "A")]);
        assert_eq!(identify_window(&index, &[0.0], 2).unwrap(), "A");
    }

    /// Embedder that returns the first feature of each window start row,
    /// mapping windows near stored points in a controlled way.
    struct FirstValueEmbedder {
        window_len: usize,
    }

    impl Embedder for FirstValueEmbedder {
        fn window_len(&self) -> usize {
            self.window_len
        }
        fn embedding_dim(&self) -> usize {
            1
        }
        fn embed(&self, seq: &FeatureSequence, offsets: &[usize]) -> Result<Array2<f32>> {
            let mut out = Array2::zeros((offsets.len(), 1));
            for (i, &o) in offsets.iter().enumerate() {
                out[[i, 0]] = seq.rows[[o, 0]] as f32;
            }
            Ok(out)
        }
    }

    fn seq_with_first_column(values: &[f64]) -> FeatureSequence {
        let mut rows = Array2::zeros((values.len(), crate::features::FEATURE_DIM));
        for (i, v) in values.iter().enumerate() {
            rows[[i, 0]] = *v;
        }
        FeatureSequence {
            user_id: "probe".into(),
            session_id: "2".into(),
            fps: 15,
            encoding: crate::features::Encoding::Bra,
            rows,
        }
    }

    #[test]
    fn sequence_majority_three_to_two() {
        let index = line_index(&[(0.0, "A"), (1.0, "B")]);
        // five windows embed to values nearest A, A, B, B, A
        let seq = seq_with_first_column(&[0.1, 0.2, 0.9, 0.8, 0.3, 0.0]);
        let model = FirstValueEmbedder { window_len: 2 };
        let result = identify_sequence(&model, &index, &seq, 1, 1).unwrap();
        assert_eq!(result.window_count, 5);
        assert_eq!(result.predicted, "A");
        assert_eq!(result.tally["A"], 3);
        assert_eq!(result.tally["B"], 2);
        assert_eq!(result.window_votes, vec!["A", "A", "B", "B", "A"]);
    }

    #[test]
    fn all_windows_voting_one_user() {
        let index = line_index(&[(0.0, "A"), (5.0, "B")]);
        let seq = seq_with_first_column(&[0.1, 0.0, 0.2, 0.1]);
        let model = FirstValueEmbedder { window_len: 2 };
        let result = identify_sequence(&model, &index, &seq, 1, 2).unwrap();
        assert_eq!(result.predicted, "A");
        assert_eq!(result.tally.len(), 1);
        assert_eq!(result.tally["A"], result.window_count);
    }

    #[test]
    fn short_sequence_reports_required_frames() {
        let index = line_index(&[(0.0, "A")]);
        let seq = seq_with_first_column(&[0.1, 0.2]);
        let model = FirstValueEmbedder { window_len: 5 };
        match identify_sequence(&model, &index, &seq, 1, 1) {
            Err(Error::InsufficientLength { required: 5, actual: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn appending_windows_for_the_winner_preserves_prediction() {
        let index = line_index(&[(0.0, "A"), (1.0, "B")]);
        let model = FirstValueEmbedder { window_len: 1 };
        let mut values = vec![0.1, 0.9, 0.05];
        let base = identify_sequence(&model, &index, &seq_with_first_column(&values), 1, 1)
            .unwrap();
        assert_eq!(base.predicted, "A");
        for _ in 0..4 {
            values.push(0.0); // one more vote for the current winner
            let next =
                identify_sequence(&model, &index, &seq_with_first_column(&values), 1, 1).unwrap();
            assert_eq!(next.predicted, "A");
        }
    }

    struct FixedLogits {
        window_len: usize,
        classes: Vec<String>,
        rows: Vec<Vec<f32>>,
    }

    impl WindowClassifier for FixedLogits {
        fn window_len(&self) -> usize {
            self.window_len
        }
        fn classes(&self) -> &[String] {
            &self.classes
        }
        fn logits(&self, _seq: &FeatureSequence, offsets: &[usize]) -> Result<Array2<f32>> {
            let mut out = Array2::zeros((offsets.len(), self.classes.len()));
            for (i, &o) in offsets.iter().enumerate() {
                for (c, v) in self.rows[o].iter().enumerate() {
                    out[[i, c]] = *v;
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn classifier_single_window_argmax() {
        let model = FixedLogits {
            window_len: 3,
            classes: vec!["a".into(), "b".into(), "c".into()],
            rows: vec![vec![0.1, 0.9, 0.2]],
        };
        let seq = seq_with_first_column(&[0.0, 0.0, 0.0]);
        let result = identify_sequence_classifier(&model, &seq, 1).unwrap();
        assert_eq!(result.predicted, "b");
    }

    #[test]
    fn classifier_uniform_logits_pick_lexicographic_minimum() {
        let model = FixedLogits {
            window_len: 1,
            classes: vec!["zeta".into(), "beta".into(), "alpha".into()],
            rows: vec![vec![0.5, 0.5, 0.5]; 3],
        };
        let seq = seq_with_first_column(&[0.0, 0.0, 0.0]);
        let result = identify_sequence_classifier(&model, &seq, 1).unwrap();
        assert_eq!(result.predicted, "alpha");
    }

    #[test]
    fn classifier_majority_over_windows() {
        let model = FixedLogits {
            window_len: 1,
            classes: vec!["c0".into(), "c1".into(), "c2".into()],
            rows: vec![
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0],
            ],
        };
        let seq = seq_with_first_column(&[0.0, 0.0, 0.0]);
        let result = identify_sequence_classifier(&model, &seq, 1).unwrap();
        assert_eq!(result.predicted, "c2");
    }

    #[test]
    fn summary_line_format() {
        let index = line_index(&[(0.0, "A"), (1.0, "B")]);
        let seq = seq_with_first_column(&[0.1, 0.9, 0.0]);
        let model = FirstValueEmbedder { window_len: 1 };
        let result = identify_sequence(&model, &index, &seq, 1, 1).unwrap();
        assert_eq!(result.summary_line(), "predicted=A windows=3 tally=A:2,B:1");
    }

    #[test]
    fn identification_is_deterministic() {
        let index = line_index(&[(0.0, "A"), (0.5, "B"), (1.0, "C")]);
        let seq = seq_with_first_column(&[0.1, 0.4, 0.8, 0.2, 0.6]);
        let model = FirstValueEmbedder { window_len: 2 };
        let a = identify_sequence(&model, &index, &seq, 1, 2).unwrap();
        let b = identify_sequence(&model, &index, &seq, 1, 2).unwrap();
        assert_eq!(a.predicted, b.predicted);
        assert_eq!(a.window_votes, b.window_votes);
    }
}
