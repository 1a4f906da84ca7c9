//! Detection metrics: equal error rate, false-accept rate at a target
//! false-reject rate, and DET staircases.
//!
//! A threshold `t` accepts a sample when `score >= t`. Candidate thresholds
//! are `-inf`, every distinct score, and `+inf`, so
//! `FR(t) = #{pos : score < t} / P` and `FA(t) = #{neg : score >= t} / N`.

use crate::error::{Error, Result};

/// Parallel lists of scores and binary labels (1 = positive / directed).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::invalid(
                "score_set",
                format!("{} scores but {} labels", scores.len(), labels.len()),
            ));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("score_set", "NaN score"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("score_set", "labels must be 0 or 1"));
        }
        Ok(ScoreSet { scores, labels })
    }

    /// Builds from separate positive and negative score lists.
    pub fn from_classes(pos: &[f64], neg: &[f64]) -> Result<Self> {
        let scores = pos.iter().chain(neg).copied().collect();
        let labels = std::iter::repeat_n(1, pos.len()).chain(std::iter::repeat_n(0, neg.len())).collect();
        ScoreSet::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    /// Same labels, scores passed through `f`.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> ScoreSet {
        ScoreSet {
            scores: self.scores.iter().map(|&s| f(s)).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// One operating point of the DET staircase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub fr: f64,
    pub fa: f64,
}

/// (FR, FA) at `-inf`, every distinct score in ascending order, and `+inf`.
/// FR is non-decreasing and FA non-increasing along the list.
pub fn det_points(s: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (p, n) = (s.n_pos(), s.n_neg());
    if p == 0 || n == 0 {
        return Err(Error::invalid("metrics", "need both positive and negative samples"));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));

    let rate = |count: usize, total: usize| count as f64 / total as f64;
    let mut points = Vec::with_capacity(s.len() + 2);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        fr: 0.0,
        fa: 1.0,
    });
    // counts of samples strictly below the current threshold
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = s.scores[order[i]];
        points.push(DetPoint {
            threshold: t,
            fr: rate(pos_below, p),
            fa: rate(n - neg_below, n),
        });
        while i < order.len() && s.scores[order[i]] == t {
            if s.labels[order[i]] == 1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        fr: 1.0,
        fa: 0.0,
    });
    Ok(points)
}

/// `(FA + FR) / 2` at the threshold minimizing `|FA - FR|`; ties go to the
/// lower threshold.
pub fn compute_eer(s: &ScoreSet) -> Result<f64> {
    let points = det_points(s)?;
    let mut best = points[0];
    for p in &points[1..] {
        if (p.fa - p.fr).abs() < (best.fa - best.fr).abs() {
            best = *p;
        }
    }
    Ok((best.fa + best.fr) / 2.0)
}

/// Smallest FA over thresholds whose FR does not exceed `fr_target`.
pub fn compute_fa_at_fr(s: &ScoreSet, fr_target: f64) -> Result<f64> {
    let points = det_points(s)?;
    Ok(points
        .iter()
        .filter(|p| p.fr <= fr_target)
        .map(|p| p.fa)
        .fold(f64::INFINITY, f64::min))
}
