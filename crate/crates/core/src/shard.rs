//! In-process simulation of sharded contrastive training with globally
//! gathered negatives.
//!
//! Every shard encodes its local samples, all embeddings are gathered in
//! canonical index order, and each shard evaluates only its own loss terms:
//! the state-action rows it holds and the goal columns it owns (a goal is
//! owned by the shard holding its first sample). Embedding gradients are
//! then summed per owner in shard order, and each owner backpropagates
//! through its local encoder inputs.

use std::thread;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crl::{similarity, similarity_backward, temporal_weights_for, BatchSample, CrlObjective, GoalColumns};
use crate::encoders::{crl_loss_and_grad, feature_matrix, EncoderParams};
use crate::error::{EncoderError, ShardError};
use crate::testbed::GoalId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub num_shards: usize,
    /// Shard of each batch index.
    pub assignment: Vec<usize>,
}

impl ShardPlan {
    /// Contiguous, nearly equal blocks of the batch.
    pub fn contiguous(batch_size: usize, num_shards: usize) -> Result<Self, ShardError> {
        let assignment = (0..batch_size).map(|i| i * num_shards / batch_size.max(1)).collect();
        Self::from_assignment(num_shards, assignment)
    }

    pub fn from_assignment(num_shards: usize, assignment: Vec<usize>) -> Result<Self, ShardError> {
        let plan = Self {
            num_shards,
            assignment,
        };
        plan.validate(plan.assignment.len())?;
        Ok(plan)
    }

    pub fn validate(&self, batch_size: usize) -> Result<(), ShardError> {
        if self.assignment.len() != batch_size {
            return Err(ShardError::Size {
                expected: batch_size,
                found: self.assignment.len(),
            });
        }
        let mut counts = vec![0usize; self.num_shards];
        for (index, &shard) in self.assignment.iter().enumerate() {
            if shard >= self.num_shards {
                return Err(ShardError::ShardOutOfRange {
                    index,
                    shard,
                    num_shards: self.num_shards,
                });
            }
            counts[shard] += 1;
        }
        match counts.iter().position(|&c| c == 0) {
            Some(empty) => Err(ShardError::EmptyShard(empty)),
            None if self.num_shards == 0 => Err(ShardError::EmptyShard(0)),
            None => Ok(()),
        }
    }

    /// Batch indices held by `shard`, ascending.
    pub fn local(&self, shard: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == shard).collect()
    }
}

/// Whether gathered remote embeddings pass gradients back to their owners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GatherGradient {
    /// Remote embeddings carry gradient for the local anchor terms.
    #[default]
    Through,
    /// Remote embeddings are constants; each shard keeps only the
    /// gradient reaching its own embeddings.
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedGrad {
    pub total: f64,
    pub sa_to_l: f64,
    pub l_to_sa: f64,
    pub grad: EncoderParams,
    /// Negatives seen by every state-action anchor.
    pub negatives_per_anchor: usize,
    /// Softmax width of every state-action anchor.
    pub denominator_size: usize,
}

struct LocalForward {
    rows: Vec<usize>,
    phi: Array2<f64>,
    cache: crate::encoders::MlpCache,
}

struct LocalTerms {
    total: f64,
    sa_to_l: f64,
    l_to_sa: f64,
    dphi: Array2<f64>,
    dpsi: Array2<f64>,
    dlog_temperature: f64,
    row_widths: Vec<usize>,
}

/// Sum in shard order, starting from the first term so a single shard is
/// reproduced bit for bit.
fn ordered_row_sum<'a>(rows: impl IntoIterator<Item = ndarray::ArrayView1<'a, f64>>) -> Option<ndarray::Array1<f64>> {
    let mut it = rows.into_iter();
    let mut acc = it.next()?.to_owned();
    for r in it {
        acc += &r;
    }
    Some(acc)
}

fn ordered_sum<T: Clone + std::ops::AddAssign<T>>(terms: impl IntoIterator<Item = T>) -> Option<T> {
    let mut it = terms.into_iter();
    let mut acc = it.next()?;
    for t in it {
        acc += t;
    }
    Some(acc)
}

pub fn sharded_crl_grad(
    params: &EncoderParams,
    batch: &[BatchSample],
    objective: &CrlObjective,
    plan: &ShardPlan,
    gather: GatherGradient,
) -> Result<ShardedGrad, ShardError> {
    plan.validate(batch.len())?;
    objective.validate()?;
    let cols = GoalColumns::from_batch(batch)?;
    let x = feature_matrix(batch, params.input_dim())?;
    let goal_owner: Vec<usize> = cols
        .goals
        .iter()
        .map(|g| plan.assignment[batch.iter().position(|s| s.goal_id == *g).expect("goal from batch")])
        .collect();

    // local encoder forward passes
    let locals: Vec<LocalForward> = thread::scope(|scope| {
        let handles: Vec<_> = (0..plan.num_shards)
            .map(|s| {
                let x = &x;
                scope.spawn(move || {
                    let rows = plan.local(s);
                    let (phi, cache) = params.sa_net.forward(&x.select(Axis(0), &rows));
                    LocalForward { rows, phi, cache }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("shard thread")).collect()
    });

    // all-gather in canonical index order
    let mut phi = Array2::zeros((batch.len(), params.embed_dim()));
    for local in &locals {
        for (k, &row) in local.rows.iter().enumerate() {
            phi.row_mut(row).assign(&local.phi.row(k));
        }
    }
    let psi = params.goal_embeddings(&cols.goals)?;
    let weights = temporal_weights_for(batch, &cols, objective.gamma)?;
    let (sim, sim_cache) = similarity(phi.view(), psi.view(), cols.goals.clone(), params.mode, params.log_temperature)?;

    let terms: Vec<LocalTerms> = thread::scope(|scope| {
        let handles: Vec<_> = locals
            .iter()
            .enumerate()
            .map(|(s, local)| {
                let (sim, sim_cache, cols, weights, goal_owner) = (&sim, &sim_cache, &cols, &weights, &goal_owner);
                scope.spawn(move || {
                    let owned: Vec<usize> = (0..cols.num_goals()).filter(|&c| goal_owner[c] == s).collect();
                    let loss = objective.evaluate_anchors(sim, batch, cols, weights, &local.rows, &owned);
                    let emb = similarity_backward(sim_cache, &loss.grad);
                    LocalTerms {
                        total: loss.total,
                        sa_to_l: loss.sa_to_l,
                        l_to_sa: loss.l_to_sa,
                        dphi: emb.phi,
                        dpsi: emb.psi,
                        dlog_temperature: emb.log_temperature,
                        row_widths: local.rows.iter().map(|_| sim.logits.ncols()).collect(),
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("shard thread")).collect()
    });

    // reduce-scatter to owners, fixed shard order
    let mut grad = params.zeros_like();
    let mut mlp_parts = Vec::with_capacity(plan.num_shards);
    for (s, local) in locals.iter().enumerate() {
        let mut dphi_local = Array2::zeros(local.phi.dim());
        for (k, &row) in local.rows.iter().enumerate() {
            let contributions = terms
                .iter()
                .enumerate()
                .filter(|(t, _)| gather == GatherGradient::Through || *t == s)
                .map(|(_, term)| term.dphi.row(row));
            dphi_local.row_mut(k).assign(&ordered_row_sum(contributions).expect("at least one shard"));
        }
        mlp_parts.push(params.sa_net.backward(&local.cache, &dphi_local));
    }
    grad.sa_net = ordered_sum(mlp_parts.into_iter().map(MlpSum)).expect("nonempty plan").0;
    for (c, &g) in cols.goals.iter().enumerate() {
        let owner = goal_owner[c];
        let contributions = terms
            .iter()
            .enumerate()
            .filter(|(t, _)| gather == GatherGradient::Through || *t == owner)
            .map(|(_, term)| term.dpsi.row(c));
        let row = goal_row(params, g)?;
        let mut dst = grad.goal_table.row_mut(row);
        dst += &ordered_row_sum(contributions).expect("at least one shard");
    }
    if params.mode == crate::crl::NormalizationMode::L2Temp {
        grad.log_temperature = ordered_sum(terms.iter().map(|t| t.dlog_temperature)).unwrap_or(0.0);
    }

    let widths: Vec<usize> = terms.iter().flat_map(|t| t.row_widths.iter().copied()).collect();
    let denominator_size = widths[0];
    debug_assert!(widths.iter().all(|&w| w == denominator_size));
    Ok(ShardedGrad {
        total: ordered_sum(terms.iter().map(|t| t.total)).unwrap_or(0.0),
        sa_to_l: ordered_sum(terms.iter().map(|t| t.sa_to_l)).unwrap_or(0.0),
        l_to_sa: ordered_sum(terms.iter().map(|t| t.l_to_sa)).unwrap_or(0.0),
        grad,
        negatives_per_anchor: denominator_size - 1,
        denominator_size,
    })
}

fn goal_row(params: &EncoderParams, goal: GoalId) -> Result<usize, EncoderError> {
    params
        .goal_ids
        .iter()
        .position(|&g| g == goal)
        .ok_or(EncoderError::UnknownGoal(goal))
}

/// Elementwise `+=` over every MLP tensor.
#[derive(Clone)]
struct MlpSum(crate::encoders::Mlp);

impl std::ops::AddAssign for MlpSum {
    fn add_assign(&mut self, rhs: Self) {
        self.0.w1 += &rhs.0.w1;
        self.0.b1 += &rhs.0.b1;
        self.0.w2 += &rhs.0.w2;
        self.0.b2 += &rhs.0.b2;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardReport {
    pub num_shards: usize,
    pub max_grad_diff: f64,
    pub loss_diff: f64,
    pub negatives_per_anchor: usize,
}

/// Compares a sharded evaluation against the monolithic one.
pub fn shard_report(
    params: &EncoderParams,
    batch: &[BatchSample],
    objective: &CrlObjective,
    plan: &ShardPlan,
) -> Result<ShardReport, ShardError> {
    let (mono, mono_grad) = crl_loss_and_grad(params, batch, objective)?;
    let sharded = sharded_crl_grad(params, batch, objective, plan, GatherGradient::Through)?;
    Ok(ShardReport {
        num_shards: plan.num_shards,
        max_grad_diff: max_abs_diff(&mono_grad.to_flat(), &sharded.grad.to_flat()),
        loss_diff: (mono.total - sharded.total).abs(),
        negatives_per_anchor: sharded.negatives_per_anchor,
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random contrastive batch: sample `i` belongs to task `i % num_tasks`,
/// with Gaussian features and random timesteps.
pub fn synthetic_batch(batch_size: usize, num_tasks: usize, feature_dim: usize, seed: u64) -> Vec<BatchSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch_size)
        .map(|i| {
            let horizon = rng.random_range(1..=12);
            BatchSample {
                sample_index: i,
                task_id: i % num_tasks,
                goal_id: GoalId((i % num_tasks) as u32),
                timestep: rng.random_range(1..=horizon),
                horizon,
                sa_features: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                goal_tokens: vec![(i % num_tasks) as u32],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crl::NormalizationMode;
    use rand::seq::SliceRandom;

    fn setup(b: usize, mode: NormalizationMode) -> (EncoderParams, Vec<BatchSample>, CrlObjective) {
        let goals = (0..4).map(GoalId).collect();
        let params = EncoderParams::init(6, 10, 5, goals, mode, 0.5, 1);
        let batch = synthetic_batch(b, 4, 6, 2);
        let objective = CrlObjective {
            gamma: 0.9,
            ..CrlObjective::default()
        };
        (params, batch, objective)
    }

    #[test]
    fn single_shard_is_bitwise_monolithic() {
        for mode in [NormalizationMode::Raw, NormalizationMode::L2Temp] {
            let (params, batch, objective) = setup(8, mode);
            let (mono, grad) = crl_loss_and_grad(&params, &batch, &objective).unwrap();
            let plan = ShardPlan::contiguous(8, 1).unwrap();
            let sharded = sharded_crl_grad(&params, &batch, &objective, &plan, GatherGradient::Through).unwrap();
            assert_eq!(sharded.total.to_bits(), mono.total.to_bits());
            let (a, b) = (grad.to_flat(), sharded.grad.to_flat());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn two_shards_match_monolithic() {
        let (params, batch, objective) = setup(8, NormalizationMode::L2Temp);
        let report = shard_report(&params, &batch, &objective, &ShardPlan::contiguous(8, 2).unwrap()).unwrap();
        assert!(report.max_grad_diff < 1e-10, "{report:?}");
        assert!(report.loss_diff < 1e-12, "{report:?}");
        assert_eq!(report.negatives_per_anchor, 3);
    }

    #[test]
    fn shard_count_and_assignment_do_not_matter() {
        let (params, batch, objective) = setup(16, NormalizationMode::Raw);
        let (mono, grad) = crl_loss_and_grad(&params, &batch, &objective).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for shards in [1, 2, 4, 16] {
            let mut assignment = ShardPlan::contiguous(16, shards).unwrap().assignment;
            for _ in 0..3 {
                let plan = ShardPlan::from_assignment(shards, assignment.clone()).unwrap();
                let s = sharded_crl_grad(&params, &batch, &objective, &plan, GatherGradient::Through).unwrap();
                assert!(max_abs_diff(&grad.to_flat(), &s.grad.to_flat()) < 1e-10);
                assert!((s.total - mono.total).abs() < 1e-12);
                assert_eq!(s.denominator_size, 4);
                assignment.shuffle(&mut rng);
            }
        }
    }

    #[test]
    fn invalid_plans_are_rejected() {
        assert!(matches!(
            ShardPlan::from_assignment(3, vec![0, 0, 1, 1]),
            Err(ShardError::EmptyShard(2))
        ));
        assert!(matches!(
            ShardPlan::from_assignment(2, vec![0, 2]),
            Err(ShardError::ShardOutOfRange { index: 1, .. })
        ));
        let (params, batch, objective) = setup(8, NormalizationMode::Raw);
        let plan = ShardPlan::contiguous(4, 2).unwrap();
        assert!(matches!(
            sharded_crl_grad(&params, &batch, &objective, &plan, GatherGradient::Through),
            Err(ShardError::Size { expected: 8, found: 4 })
        ));
    }

    #[test]
    fn stopping_gathered_gradients_changes_the_result() {
        let (params, batch, objective) = setup(8, NormalizationMode::Raw);
        let (_, grad) = crl_loss_and_grad(&params, &batch, &objective).unwrap();
        let plan = ShardPlan::contiguous(8, 2).unwrap();
        let s = sharded_crl_grad(&params, &batch, &objective, &plan, GatherGradient::Stop).unwrap();
        assert!(max_abs_diff(&grad.to_flat(), &s.grad.to_flat()) > 1e-6);
    }
}
