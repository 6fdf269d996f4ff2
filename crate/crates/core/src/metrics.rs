//! Evaluation metrics: few-shot accuracy, open-set accuracy at a fixed
//! threshold, AUROC, AUPR, the open-set classification rate (OSCR), and
//! score histograms.
//!
//! The ranking metrics each have an independent brute-force reference in
//! [`oracle`]; the fast paths here are required to match those references to
//! 1e-9, which the test suites enforce on randomized instances.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::openset::{OpenSetScore, Technique};

/// Outcome of one evaluated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode_id: u64,
    pub known: bool,
    /// Support-class index of the query when known.
    pub true_class: Option<usize>,
    /// Argmax support-class index predicted by the closed-set head.
    pub predicted_class: usize,
    pub score: OpenSetScore,
    /// Acceptance decision: normalized score > tau, or the garbage-class
    /// argmax rule.
    pub accept: bool,
}

impl EpisodeResult {
    pub fn is_correct(&self) -> bool {
        self.true_class == Some(self.predicted_class)
    }
}

/// Number of equal-width histogram bins over [0, 1].
pub const HISTOGRAM_BINS: usize = 20;

/// Full metric report for one balanced evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub technique: String,
    pub tau: f64,
    pub n_known: usize,
    pub n_unknown: usize,
    pub fs_acc: f64,
    pub os_acc: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub oscr: f64,
    pub histogram_known: Vec<u64>,
    pub histogram_unknown: Vec<u64>,
    /// Where the raw score dump was written, when it was.
    pub scores_path: Option<String>,
}

fn check_finite(scores: &[f64]) -> Result<()> {
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::ScoreOutOfRange(s));
        }
    }
    Ok(())
}

/// Closed-set accuracy over the known-query episodes, ignoring scores.
pub fn fs_accuracy(results: &[EpisodeResult]) -> Result<f64> {
    let known: Vec<&EpisodeResult> = results.iter().filter(|r| r.known).collect();
    if known.is_empty() {
        return Err(Error::NoKnownResults);
    }
    let correct = known.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / known.len() as f64)
}

/// Accuracy of the accept/reject decision on a balanced result set.
/// Acceptance is strict (score > tau), so an exactly-tau score is rejected.
pub fn os_accuracy(results: &[EpisodeResult], tau: f64) -> Result<f64> {
    let known = results.iter().filter(|r| r.known).count();
    let unknown = results.len() - known;
    if known != unknown || results.is_empty() {
        return Err(Error::UnbalancedResults { known, unknown });
    }
    for (i, r) in results.iter().enumerate() {
        if r.score.technique.uses_threshold_accept()
            && r.accept != (r.score.normalized > tau)
        {
            return Err(Error::InconsistentAccept { index: i });
        }
    }
    let hits = results.iter().filter(|r| r.accept == r.known).count();
    Ok(hits as f64 / results.len() as f64)
}

/// AUROC of known-vs-unknown scores: the probability that a random known
/// query outscores a random unknown one, ties counting one half. Computed
/// with average ranks, which is exact under ties.
pub fn auroc(known_scores: &[f64], unknown_scores: &[f64]) -> Result<f64> {
    if known_scores.is_empty() {
        return Err(Error::EmptyInput("auroc known scores"));
    }
    if unknown_scores.is_empty() {
        return Err(Error::EmptyInput("auroc unknown scores"));
    }
    check_finite(known_scores)?;
    check_finite(unknown_scores)?;

    let mut all: Vec<(f64, bool)> = known_scores
        .iter()
        .map(|&s| (s, true))
        .chain(unknown_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut rank_sum_known = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let known_in_group = all[i..j].iter().filter(|(_, k)| *k).count();
        rank_sum_known += avg_rank * known_in_group as f64;
        i = j;
    }
    let n_k = known_scores.len() as f64;
    let n_u = unknown_scores.len() as f64;
    let u_statistic = rank_sum_known - n_k * (n_k + 1.0) / 2.0;
    Ok(u_statistic / (n_k * n_u))
}

/// Area under the precision-recall curve with known as the positive class.
/// Thresholds sweep the unique scores descending with the acceptance rule
/// score >= threshold; precision is held between recall points (step
/// interpolation), the standard conservative choice for PR areas.
pub fn aupr(known_scores: &[f64], unknown_scores: &[f64]) -> Result<f64> {
    if known_scores.is_empty() {
        return Err(Error::EmptyInput("aupr known scores"));
    }
    if unknown_scores.is_empty() {
        return Err(Error::EmptyInput("aupr unknown scores"));
    }
    check_finite(known_scores)?;
    check_finite(unknown_scores)?;

    let mut all: Vec<(f64, bool)> = known_scores
        .iter()
        .map(|&s| (s, true))
        .chain(unknown_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let n_k = known_scores.len() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let recall = tp / n_k;
        let precision = tp / (tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Open-set classification rate: area under the correct-classification-rate
/// vs false-positive-rate curve.
///
/// Thresholds sweep the unique scores descending plus sentinels above the
/// max and below the min; at each threshold theta,
/// CCR = |{known: correct and score > theta}| / n_known and
/// FPR = |{unknown: score > theta}| / n_unknown. The area is trapezoidal
/// over the (FPR, CCR) points, anchored at (0, 0) and (1, closed-set
/// accuracy).
pub fn oscr(known: &[(f64, bool)], unknown_scores: &[f64]) -> Result<f64> {
    if known.len() != unknown_scores.len() || known.is_empty() {
        return Err(Error::UnbalancedResults {
            known: known.len(),
            unknown: unknown_scores.len(),
        });
    }
    check_finite(&known.iter().map(|(s, _)| *s).collect::<Vec<_>>())?;
    check_finite(unknown_scores)?;

    let mut known_sorted = known.to_vec();
    known_sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut unknown_sorted = unknown_scores.to_vec();
    unknown_sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut thresholds: Vec<f64> = known_sorted
        .iter()
        .map(|(s, _)| *s)
        .chain(unknown_sorted.iter().copied())
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let n_k = known.len() as f64;
    let n_u = unknown_scores.len() as f64;

    // Points ordered by descending threshold; counts advance monotonically.
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(thresholds.len() + 2);
    points.push((0.0, 0.0)); // theta above every score
    let mut ki = 0;
    let mut ui = 0;
    let mut correct_above = 0.0;
    for &theta in &thresholds {
        while ki < known_sorted.len() && known_sorted[ki].0 > theta {
            if known_sorted[ki].1 {
                correct_above += 1.0;
            }
            ki += 1;
        }
        while ui < unknown_sorted.len() && unknown_sorted[ui] > theta {
            ui += 1;
        }
        points.push((ui as f64 / n_u, correct_above / n_k));
    }
    let total_correct = known_sorted.iter().filter(|(_, c)| *c).count() as f64;
    points.push((1.0, total_correct / n_k)); // theta below every score

    let mut area = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        area += (x1 - x0) * (y1 + y0) / 2.0;
    }
    Ok(area)
}

/// Equal-width histogram of scores in [0, 1]; the last bin is right-closed.
pub fn score_histogram(scores: &[f64], bins: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; bins];
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::ScoreOutOfRange(s));
        }
        let bin = ((s * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    Ok(counts)
}

/// Assemble the full report from a balanced result list. Ranking metrics
/// use raw scores; the threshold decision and histograms use normalized.
pub fn compute_report(
    results: &[EpisodeResult],
    tau: f64,
    technique: Technique,
) -> Result<MetricsReport> {
    let known_raw: Vec<f64> = results
        .iter()
        .filter(|r| r.known)
        .map(|r| r.score.raw)
        .collect();
    let unknown_raw: Vec<f64> = results
        .iter()
        .filter(|r| !r.known)
        .map(|r| r.score.raw)
        .collect();
    let known_pairs: Vec<(f64, bool)> = results
        .iter()
        .filter(|r| r.known)
        .map(|r| (r.score.raw, r.is_correct()))
        .collect();
    let known_norm: Vec<f64> = results
        .iter()
        .filter(|r| r.known)
        .map(|r| r.score.normalized)
        .collect();
    let unknown_norm: Vec<f64> = results
        .iter()
        .filter(|r| !r.known)
        .map(|r| r.score.normalized)
        .collect();

    let fs_acc = fs_accuracy(results)?;
    let os_acc = os_accuracy(results, tau)?;
    let auroc = auroc(&known_raw, &unknown_raw)?;
    let aupr = aupr(&known_raw, &unknown_raw)?;
    let oscr = oscr(&known_pairs, &unknown_raw)?;

    debug_assert!(oscr <= fs_acc + 1e-12);
    debug_assert!(oscr <= auroc + 1e-12);

    Ok(MetricsReport {
        technique: technique.as_str().to_string(),
        tau,
        n_known: known_raw.len(),
        n_unknown: unknown_raw.len(),
        fs_acc,
        os_acc,
        auroc,
        aupr,
        oscr,
        histogram_known: score_histogram(&known_norm, HISTOGRAM_BINS)?,
        histogram_unknown: score_histogram(&unknown_norm, HISTOGRAM_BINS)?,
        scores_path: None,
    })
}

/// Raw score dump: `episode_id,known_flag,true_class,predicted_class,score`
/// with -1 for the unknown true class and the normalized score. This is the
/// contract for external histogram/scatter plotting.
pub fn write_scores_csv(results: &[EpisodeResult], path: &Path) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(w, "episode_id,known_flag,true_class,predicted_class,score").map_err(io_err)?;
    for r in results {
        let true_class = r.true_class.map(|c| c as i64).unwrap_or(-1);
        writeln!(
            w,
            "{},{},{},{},{:.9e}",
            r.episode_id,
            u8::from(r.known),
            true_class,
            r.predicted_class,
            r.score.normalized
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Brute-force reference implementations. Deliberately naive (quadratic
/// pair counts, full recounts per threshold) so they share no code with the
/// fast paths they verify.
pub mod oracle {
    /// AUROC as the literal pair statistic: fraction of (known, unknown)
    /// pairs with known > unknown, ties counting one half.
    pub fn pairwise_auroc(known_scores: &[f64], unknown_scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        for &k in known_scores {
            for &u in unknown_scores {
                if k > u {
                    wins += 1.0;
                } else if k == u {
                    wins += 0.5;
                }
            }
        }
        wins / (known_scores.len() as f64 * unknown_scores.len() as f64)
    }

    /// OSCR by enumerating every threshold (all scores plus sentinels) and
    /// recounting the populations from scratch at each.
    pub fn brute_force_oscr(known: &[(f64, bool)], unknown_scores: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = known
            .iter()
            .map(|(s, _)| *s)
            .chain(unknown_scores.iter().copied())
            .collect();
        let max = thresholds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = thresholds.iter().cloned().fold(f64::INFINITY, f64::min);
        thresholds.push(max + 1.0);
        thresholds.push(min - 1.0);
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let n_k = known.len() as f64;
        let n_u = unknown_scores.len() as f64;
        let mut points = Vec::with_capacity(thresholds.len());
        for &theta in &thresholds {
            let ccr = known
                .iter()
                .filter(|(s, correct)| *correct && *s > theta)
                .count() as f64
                / n_k;
            let fpr = unknown_scores.iter().filter(|&&s| s > theta).count() as f64 / n_u;
            points.push((fpr, ccr));
        }
        let mut area = 0.0;
        for w in points.windows(2) {
            area += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
        }
        area
    }

    /// AUPR by evaluating precision/recall at a dense threshold set (every
    /// score, every midpoint, and a sentinel above the max), recounting
    /// from scratch at each threshold, with step interpolation.
    pub fn dense_threshold_aupr(known_scores: &[f64], unknown_scores: &[f64]) -> f64 {
        let mut grid: Vec<f64> = known_scores
            .iter()
            .chain(unknown_scores.iter())
            .copied()
            .collect();
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup();
        let mut thresholds: Vec<f64> = Vec::with_capacity(grid.len() * 2 + 1);
        thresholds.push(grid[grid.len() - 1] + 1.0);
        for w in grid.windows(2) {
            thresholds.push((w[0] + w[1]) / 2.0);
        }
        thresholds.extend(grid.iter().copied());
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let n_k = known_scores.len() as f64;
        let mut prev_recall = 0.0;
        let mut area = 0.0;
        for &theta in &thresholds {
            let tp = known_scores.iter().filter(|&&s| s >= theta).count() as f64;
            let fp = unknown_scores.iter().filter(|&&s| s >= theta).count() as f64;
            if tp + fp == 0.0 {
                continue;
            }
            let recall = tp / n_k;
            let precision = tp / (tp + fp);
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }
}
