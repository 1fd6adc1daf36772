//! Statistics comparing learned critics against the occupancy oracle.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{score, EncoderParams, TrainingSample};
use crate::error::{EncoderError, VerifyError};
use crate::testbed::{occupancy_oracle, Corpus, GoalId, Trajectory};

/// Residual statistics of `psi^T phi - log Q` for one goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalResidual {
    pub goal: GoalId,
    pub samples: usize,
    pub residual_mean: f64,
    pub residual_std: f64,
    /// `max log Q - min log Q` over the goal's samples.
    pub log_q_range: f64,
    /// Spearman correlation between critic value and `Q`.
    pub spearman: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / (sa * sb)
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Per-goal residuals of the critic against `log Q` under the expert.
pub fn occupancy_residuals(
    params: &EncoderParams,
    corpus: &Corpus,
    samples: &[TrainingSample],
    gamma: f64,
) -> Result<Vec<GoalResidual>, VerifyError> {
    let oracle = occupancy_oracle(&corpus.mdp, &corpus.expert(), gamma)?;
    let mut by_goal: BTreeMap<GoalId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let goal = s.crl.goal_id;
        let q = oracle.q(s.state, s.action, goal).unwrap_or(0.0);
        if !(q > 0.0) {
            return Err(VerifyError::ZeroOccupancy {
                goal,
                state: s.state,
                action: s.action,
            });
        }
        let value = score(params, &s.crl.sa_features, goal)?;
        let entry = by_goal.entry(goal).or_default();
        entry.0.push(value);
        entry.1.push(q.ln());
    }
    Ok(by_goal
        .into_iter()
        .map(|(goal, (values, log_q))| {
            let residuals: Vec<f64> = values.iter().zip(&log_q).map(|(v, l)| v - l).collect();
            let (residual_mean, residual_std) = mean_std(&residuals);
            let lo = log_q.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = log_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            GoalResidual {
                goal,
                samples: values.len(),
                residual_mean,
                residual_std,
                log_q_range: hi - lo,
                spearman: spearman(&values, &log_q),
            }
        })
        .collect())
}

/// Fraction of samples whose highest-scoring goal among `goals` is their own.
pub fn goal_discrimination(
    params: &EncoderParams,
    samples: &[TrainingSample],
    goals: &[GoalId],
) -> Result<f64, EncoderError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in samples {
        let mut best: Option<(GoalId, f64)> = None;
        for &g in goals {
            let v = score(params, &s.crl.sa_features, g)?;
            // ties resolve against the sample so chance-level encoders are not rewarded
            match best {
                Some((bg, bv)) if v < bv || (v == bv && bg != s.crl.goal_id) => {}
                _ => best = Some((g, v)),
            }
        }
        if best.is_some_and(|(g, _)| g == s.crl.goal_id) {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Critic values along one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuePoint {
    pub t: usize,
    pub score_correct: f64,
    pub score_wrong: f64,
}

pub fn value_curve(
    params: &EncoderParams,
    corpus: &Corpus,
    trajectory: &Trajectory,
    correct: GoalId,
    wrong: GoalId,
) -> Result<Vec<ValuePoint>, EncoderError> {
    trajectory
        .steps()
        .map(|(t, s, a)| {
            let x = corpus.mdp.sa_features(s, a);
            Ok(ValuePoint {
                t,
                score_correct: score(params, &x, correct)?,
                score_wrong: score(params, &x, wrong)?,
            })
        })
        .collect()
}

/// Whether the correct-goal curve stays weakly above the wrong-goal one and
/// ends above where it started.
pub fn value_curve_holds(curve: &[ValuePoint]) -> bool {
    match (curve.first(), curve.last()) {
        (Some(first), Some(last)) => {
            curve.iter().all(|p| p.score_correct >= p.score_wrong) && last.score_correct > first.score_correct
        }
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crl::NormalizationMode;
    use crate::encoders::corpus_samples;
    use crate::testbed::{generate_corpus, CorpusConfig, MdpFamily};

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_of_monotone_maps() {
        let a = [0.1, 0.5, 0.2, 0.9];
        let up: Vec<f64> = a.iter().map(|x: &f64| x.exp()).collect();
        let down: Vec<f64> = a.iter().map(|x| -x * x * x).collect();
        assert!((spearman(&a, &up) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &down) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&a, &[1.0; 4]), 0.0);
    }

    #[test]
    fn zero_critic_residual_is_minus_log_q() {
        let corpus = generate_corpus(&CorpusConfig {
            family: MdpFamily::Chain { arms: 2, arm_len: 4 },
            num_tasks: 2,
            trajectories_per_task: 2,
            seed: 0,
            gamma: 0.9,
            goal_token_len: 2,
            goal_vocab: 8,
        })
        .unwrap();
        let samples = corpus_samples(&corpus);
        let goals: Vec<GoalId> = corpus.goals.iter().map(|g| g.goal_id).collect();
        let mut params = EncoderParams::init(corpus.mdp.sa_feature_dim(), 4, 3, goals.clone(), NormalizationMode::Raw, 0.1, 0);
        params.goal_table.fill(0.0);
        let res = occupancy_residuals(&params, &corpus, &samples, 0.9).unwrap();
        for r in &res {
            // score is 0, so the residual spread is the log Q spread
            assert!(r.residual_std > 0.0 && r.log_q_range > 0.0);
            assert_eq!(r.spearman, 0.0);
        }
        // all-zero scores tie everywhere and are scored as misses
        assert_eq!(goal_discrimination(&params, &samples, &goals).unwrap(), 0.0);
    }

    #[test]
    fn value_curve_property_checks() {
        let p = |t, c, w| ValuePoint {
            t,
            score_correct: c,
            score_wrong: w,
        };
        assert!(value_curve_holds(&[p(1, 0.0, -1.0), p(2, 1.0, 1.0)]));
        assert!(!value_curve_holds(&[p(1, 0.0, 0.5), p(2, 1.0, 0.0)]));
        assert!(!value_curve_holds(&[p(1, 1.0, 0.0), p(2, 1.0, 0.0)]));
        assert!(!value_curve_holds(&[]));
    }
}
