//! Temporally weighted bidirectional InfoNCE objectives.
//!
//! A batch of `B` state-action samples is scored against its `G` unique
//! goals through a `B x G` logit matrix. Two cross-entropy losses are
//! computed from it:
//!
//! * state-action to goal: each row is a softmax over the unique goals of
//!   the batch with a single positive column (the sample's own goal),
//!   weighted by `gamma^(T - t)`;
//! * goal to state-action: each column is a softmax over all `B` rows with
//!   soft targets `q_ij` spread over the goal's positive set.
//!
//! All exponentials go through log-sum-exp and all weights are formed in log
//! space.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::CrlError;
use crate::testbed::GoalId;

/// One mini-batch element: a `(s_t, a_t)` pair of a trajectory of length `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSample {
    pub sample_index: usize,
    pub task_id: usize,
    pub goal_id: GoalId,
    /// Timestep `t`, 1-based.
    pub timestep: usize,
    /// Trajectory length `T`.
    pub horizon: usize,
    pub sa_features: Vec<f64>,
    pub goal_tokens: Vec<u32>,
}

impl BatchSample {
    /// Remaining transitions `T - t` before the goal is entered.
    pub fn remaining(&self) -> usize {
        self.horizon - self.timestep
    }
}

/// Unique goals of a batch (ascending by id) and the column of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalColumns {
    pub goals: Vec<GoalId>,
    pub column_of: Vec<usize>,
    /// Sample indices of each column, in batch order.
    pub members: Vec<Vec<usize>>,
}

impl GoalColumns {
    pub fn from_batch(batch: &[BatchSample]) -> Result<Self, CrlError> {
        if batch.is_empty() {
            return Err(CrlError::EmptyBatch);
        }
        let mut task_goal: BTreeMap<usize, GoalId> = BTreeMap::new();
        let mut goal_task: BTreeMap<GoalId, usize> = BTreeMap::new();
        for (index, s) in batch.iter().enumerate() {
            if s.timestep == 0 || s.timestep > s.horizon {
                return Err(CrlError::InvalidTimestep {
                    index,
                    t: s.timestep,
                    horizon: s.horizon,
                });
            }
            if let Some(&g) = task_goal.get(&s.task_id) {
                if g != s.goal_id {
                    return Err(CrlError::InconsistentTask {
                        task: s.task_id,
                        first: g,
                        second: s.goal_id,
                    });
                }
            }
            if let Some(&t) = goal_task.get(&s.goal_id) {
                if t != s.task_id {
                    return Err(CrlError::InconsistentTask {
                        task: s.task_id,
                        first: task_goal[&t],
                        second: s.goal_id,
                    });
                }
            }
            task_goal.insert(s.task_id, s.goal_id);
            goal_task.insert(s.goal_id, s.task_id);
        }
        let goals: Vec<GoalId> = goal_task.keys().copied().collect();
        let column: BTreeMap<GoalId, usize> =
            goals.iter().enumerate().map(|(c, &g)| (g, c)).collect();
        let column_of: Vec<usize> = batch.iter().map(|s| column[&s.goal_id]).collect();
        let mut members = vec![Vec::new(); goals.len()];
        for (i, &c) in column_of.iter().enumerate() {
            members[c].push(i);
        }
        Ok(Self {
            goals,
            column_of,
            members,
        })
    }

    pub fn num_goals(&self) -> usize {
        self.goals.len()
    }
}

fn check_gamma(gamma: f64) -> Result<(), CrlError> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(CrlError::InvalidGamma(gamma))
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Soft targets `q_ij` over each anchor's positive set `S(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalWeightTable {
    /// Per task column: positive sample indices and their weights.
    rows: Vec<(Vec<usize>, Vec<f64>)>,
    anchor_column: Vec<usize>,
}

impl TemporalWeightTable {
    pub fn num_anchors(&self) -> usize {
        self.anchor_column.len()
    }

    /// `S(i)` in batch order.
    pub fn positive_set(&self, anchor: usize) -> &[usize] {
        &self.rows[self.anchor_column[anchor]].0
    }

    /// Weights aligned with [`Self::positive_set`].
    pub fn positive_weights(&self, anchor: usize) -> &[f64] {
        &self.rows[self.anchor_column[anchor]].1
    }

    /// `q_ij`, zero when `j` is not in `S(i)`.
    pub fn weight(&self, anchor: usize, sample: usize) -> f64 {
        let (set, w) = &self.rows[self.anchor_column[anchor]];
        set.iter()
            .position(|&j| j == sample)
            .map_or(0.0, |p| w[p])
    }

    /// Weights of the positive set of a goal column.
    pub(crate) fn column_row(&self, column: usize) -> (&[usize], &[f64]) {
        let (set, w) = &self.rows[column];
        (set, w)
    }
}

/// `q_ij = gamma^(T_j - t_j) / sum_{j' in S(i)} gamma^(T_j' - t_j')`.
pub fn temporal_weights(
    batch: &[BatchSample],
    gamma: f64,
) -> Result<TemporalWeightTable, CrlError> {
    check_gamma(gamma)?;
    let cols = GoalColumns::from_batch(batch)?;
    temporal_weights_for(batch, &cols, gamma)
}

pub(crate) fn temporal_weights_for(
    batch: &[BatchSample],
    cols: &GoalColumns,
    gamma: f64,
) -> Result<TemporalWeightTable, CrlError> {
    let log_gamma = gamma.ln();
    let mut rows = Vec::with_capacity(cols.num_goals());
    for (c, members) in cols.members.iter().enumerate() {
        if members.is_empty() {
            return Err(CrlError::EmptyPositiveSet(c));
        }
        let logs: Vec<f64> = members
            .iter()
            .map(|&j| batch[j].remaining() as f64 * log_gamma)
            .collect();
        let norm = log_sum_exp(logs.iter().copied());
        rows.push((members.clone(), logs.iter().map(|l| (l - norm).exp()).collect()));
    }
    Ok(TemporalWeightTable {
        rows,
        anchor_column: cols.column_of.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Plain inner products, temperature fixed at 1.
    #[default]
    Raw,
    /// Cosine similarity scaled by a learnable temperature.
    L2Temp,
}

/// Critic values `phi_j^T psi_g` for every sample row and unique goal column.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub logits: Array2<f64>,
    pub mode: NormalizationMode,
    /// Logit scale; 1 in raw mode.
    pub temperature: f64,
    pub goals: Vec<GoalId>,
}

impl SimilarityMatrix {
    /// Wraps precomputed logits (raw mode, unit temperature).
    pub fn from_logits(logits: Array2<f64>, goals: Vec<GoalId>) -> Self {
        Self {
            logits,
            mode: NormalizationMode::Raw,
            temperature: 1.0,
            goals,
        }
    }

    fn check(&self, batch: &[BatchSample], cols: &GoalColumns) -> Result<(), CrlError> {
        if self.logits.nrows() != batch.len() || self.logits.ncols() != cols.num_goals() {
            return Err(CrlError::Shape(format!(
                "logits are {}x{}, batch needs {}x{}",
                self.logits.nrows(),
                self.logits.ncols(),
                batch.len(),
                cols.num_goals()
            )));
        }
        if self.goals != cols.goals {
            return Err(CrlError::ColumnMismatch {
                expected: cols.goals.clone(),
                found: self.goals.clone(),
            });
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(CrlError::NonFinite("similarity logits".into()));
        }
        Ok(())
    }
}

/// Intermediates needed to push logit gradients back to the embeddings.
#[derive(Debug, Clone)]
pub struct SimilarityCache {
    mode: NormalizationMode,
    scale: f64,
    phi: Array2<f64>,
    psi: Array2<f64>,
    phi_norm: Vec<f64>,
    psi_norm: Vec<f64>,
    logits: Array2<f64>,
}

/// Gradients of a scalar loss with respect to the critic inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub phi: Array2<f64>,
    pub psi: Array2<f64>,
    pub log_temperature: f64,
}

fn row_norms(m: &Array2<f64>) -> Result<Vec<f64>, CrlError> {
    m.rows()
        .into_iter()
        .map(|r| {
            let n = r.dot(&r).sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(CrlError::NonFinite("zero-norm embedding in l2 mode".into()))
            }
        })
        .collect()
}

fn normalize_rows(m: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut out = m.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms) {
        row.mapv_inplace(|v| v / n);
    }
    out
}

/// Builds the critic matrix from `phi` (B x d) and `psi` (G x d).
pub fn similarity(
    phi: ArrayView2<'_, f64>,
    psi: ArrayView2<'_, f64>,
    goals: Vec<GoalId>,
    mode: NormalizationMode,
    log_temperature: f64,
) -> Result<(SimilarityMatrix, SimilarityCache), CrlError> {
    if phi.ncols() != psi.ncols() || psi.nrows() != goals.len() {
        return Err(CrlError::Shape(format!(
            "phi {:?}, psi {:?}, {} goals",
            phi.dim(),
            psi.dim(),
            goals.len()
        )));
    }
    let phi = phi.to_owned();
    let psi = psi.to_owned();
    let (scale, phi_norm, psi_norm, logits) = match mode {
        NormalizationMode::Raw => (1.0, Vec::new(), Vec::new(), phi.dot(&psi.t())),
        NormalizationMode::L2Temp => {
            let pn = row_norms(&phi)?;
            let gn = row_norms(&psi)?;
            let scale = log_temperature.exp();
            let u = normalize_rows(&phi, &pn);
            let v = normalize_rows(&psi, &gn);
            let logits = u.dot(&v.t()) * scale;
            (scale, pn, gn, logits)
        }
    };
    let sim = SimilarityMatrix {
        logits: logits.clone(),
        mode,
        temperature: scale,
        goals,
    };
    let cache = SimilarityCache {
        mode,
        scale,
        phi,
        psi,
        phi_norm,
        psi_norm,
        logits,
    };
    Ok((sim, cache))
}

/// Chain rule from `d loss / d logits` to the embeddings and log-temperature.
pub fn similarity_backward(cache: &SimilarityCache, grad_logits: &Array2<f64>) -> EmbeddingGrads {
    match cache.mode {
        NormalizationMode::Raw => EmbeddingGrads {
            phi: grad_logits.dot(&cache.psi),
            psi: grad_logits.t().dot(&cache.phi),
            log_temperature: 0.0,
        },
        NormalizationMode::L2Temp => {
            let u = normalize_rows(&cache.phi, &cache.phi_norm);
            let v = normalize_rows(&cache.psi, &cache.psi_norm);
            let du = grad_logits.dot(&v) * cache.scale;
            let dv = grad_logits.t().dot(&u) * cache.scale;
            let log_temperature = (grad_logits * &cache.logits).sum();
            EmbeddingGrads {
                phi: project_unit_grad(&u, &du, &cache.phi_norm),
                psi: project_unit_grad(&v, &dv, &cache.psi_norm),
                log_temperature,
            }
        }
    }
}

/// `d/dx (x / |x|)` applied to an upstream gradient, row by row.
fn project_unit_grad(unit: &Array2<f64>, upstream: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut out = upstream.clone();
    for ((mut o, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let radial = o.dot(&u);
        o.zip_mut_with(&u, |g, &ui| *g = (*g - radial * ui) / n);
    }
    out
}

/// Problems that do not invalidate a loss value but deserve a warning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Diagnostic {
    /// Only one task in the batch; the state-action to goal loss has no negatives.
    NoNegatives,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `d loss / d logits`, same shape as the similarity matrix.
    pub grad: Array2<f64>,
    pub diagnostics: Vec<Diagnostic>,
}

/// How the per-anchor weights of the state-action to goal loss are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SaWeighting {
    /// Divide the weighted sum by the batch size.
    #[default]
    BatchSize,
    /// Divide by the sum of the weights.
    WeightSum,
}

pub(crate) fn sa_to_l_terms(
    sim: &SimilarityMatrix,
    batch: &[BatchSample],
    cols: &GoalColumns,
    gamma: f64,
    weighting: SaWeighting,
    anchors: &[usize],
    grad: &mut Array2<f64>,
) -> f64 {
    let log_gamma = gamma.ln();
    let weight = |i: usize| (batch[i].remaining() as f64 * log_gamma).exp();
    let denom = match weighting {
        SaWeighting::BatchSize => batch.len() as f64,
        SaWeighting::WeightSum => (0..batch.len()).map(weight).sum(),
    };
    let mut loss = 0.0;
    for &i in anchors {
        let row = sim.logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        let own = cols.column_of[i];
        let w = weight(i) / denom;
        loss += -w * (row[own] - lse);
        for (c, &x) in row.iter().enumerate() {
            let p = (x - lse).exp();
            let target = if c == own { 1.0 } else { 0.0 };
            grad[[i, c]] += w * (p - target);
        }
    }
    loss
}

pub(crate) fn l_to_sa_terms(
    sim: &SimilarityMatrix,
    weights: &TemporalWeightTable,
    cols: &GoalColumns,
    anchors: &[usize],
    grad: &mut Array2<f64>,
) -> f64 {
    let num_goals = cols.num_goals() as f64;
    let mut loss = 0.0;
    for &c in anchors {
        let column = sim.logits.column(c);
        let lse = log_sum_exp(column.iter().copied());
        let (set, q) = weights.column_row(c);
        let mut term = 0.0;
        for (&j, &qj) in set.iter().zip(q) {
            term -= qj * (column[j] - lse);
        }
        loss += term / num_goals;
        let total_q: f64 = q.iter().sum();
        for (k, &x) in column.iter().enumerate() {
            grad[[k, c]] += (x - lse).exp() * total_q / num_goals;
        }
        for (&j, &qj) in set.iter().zip(q) {
            grad[[j, c]] -= qj / num_goals;
        }
    }
    loss
}

/// State-action to goal loss: mean over anchors `i` of
/// `-gamma^(T_i - t_i) log softmax(own goal | unique batch goals)`.
pub fn loss_sa_to_l(
    sim: &SimilarityMatrix,
    batch: &[BatchSample],
    gamma: f64,
) -> Result<LossOutput, CrlError> {
    loss_sa_to_l_weighted(sim, batch, gamma, SaWeighting::BatchSize)
}

pub fn loss_sa_to_l_weighted(
    sim: &SimilarityMatrix,
    batch: &[BatchSample],
    gamma: f64,
    weighting: SaWeighting,
) -> Result<LossOutput, CrlError> {
    check_gamma(gamma)?;
    let cols = GoalColumns::from_batch(batch)?;
    sim.check(batch, &cols)?;
    let mut grad = Array2::zeros(sim.logits.dim());
    let anchors: Vec<usize> = (0..batch.len()).collect();
    let loss = sa_to_l_terms(sim, batch, &cols, gamma, weighting, &anchors, &mut grad);
    Ok(LossOutput {
        loss,
        grad,
        diagnostics: no_negative_diagnostics(&cols),
    })
}

fn no_negative_diagnostics(cols: &GoalColumns) -> Vec<Diagnostic> {
    if cols.num_goals() < 2 {
        log::warn!("batch holds a single task; state-action to goal loss has no negatives");
        vec![Diagnostic::NoNegatives]
    } else {
        Vec::new()
    }
}

/// Goal to state-action loss: mean over unique goals `g` of
/// `-sum_{j in S(g)} q_gj log softmax_j(psi_g^T phi_k over all k)`.
pub fn loss_l_to_sa(
    sim: &SimilarityMatrix,
    weights: &TemporalWeightTable,
    batch: &[BatchSample],
) -> Result<LossOutput, CrlError> {
    let cols = GoalColumns::from_batch(batch)?;
    sim.check(batch, &cols)?;
    if weights.num_anchors() != batch.len() {
        return Err(CrlError::Shape(format!(
            "weight table has {} anchors, batch {}",
            weights.num_anchors(),
            batch.len()
        )));
    }
    let mut grad = Array2::zeros(sim.logits.dim());
    let anchors: Vec<usize> = (0..cols.num_goals()).collect();
    let loss = l_to_sa_terms(sim, weights, &cols, &anchors, &mut grad);
    Ok(LossOutput {
        loss,
        grad,
        diagnostics: Vec::new(),
    })
}

/// Both directions combined and scaled by `lambda_crl`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub total: f64,
    pub sa_to_l: f64,
    pub l_to_sa: f64,
    pub grad: Array2<f64>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Settings of the contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrlObjective {
    pub gamma: f64,
    pub lambda_crl: f64,
    #[serde(default)]
    pub sa_weighting: SaWeighting,
}

impl Default for CrlObjective {
    fn default() -> Self {
        Self {
            gamma: 0.995,
            lambda_crl: 1.0,
            sa_weighting: SaWeighting::BatchSize,
        }
    }
}

impl CrlObjective {
    pub fn validate(&self) -> Result<(), CrlError> {
        check_gamma(self.gamma)?;
        if !(self.lambda_crl >= 0.0) {
            return Err(CrlError::NegativeLambda(self.lambda_crl));
        }
        Ok(())
    }

    pub fn evaluate(
        &self,
        sim: &SimilarityMatrix,
        batch: &[BatchSample],
    ) -> Result<CombinedLoss, CrlError> {
        self.validate()?;
        let cols = GoalColumns::from_batch(batch)?;
        sim.check(batch, &cols)?;
        let weights = temporal_weights_for(batch, &cols, self.gamma)?;
        let rows: Vec<usize> = (0..batch.len()).collect();
        let goal_anchors: Vec<usize> = (0..cols.num_goals()).collect();
        Ok(self.evaluate_anchors(sim, batch, &cols, &weights, &rows, &goal_anchors))
    }

    /// Loss terms of a subset of anchors, normalized by the full batch.
    pub(crate) fn evaluate_anchors(
        &self,
        sim: &SimilarityMatrix,
        batch: &[BatchSample],
        cols: &GoalColumns,
        weights: &TemporalWeightTable,
        sample_anchors: &[usize],
        goal_anchors: &[usize],
    ) -> CombinedLoss {
        let mut g1 = Array2::zeros(sim.logits.dim());
        let mut g2 = Array2::zeros(sim.logits.dim());
        let sa_to_l = sa_to_l_terms(
            sim,
            batch,
            cols,
            self.gamma,
            self.sa_weighting,
            sample_anchors,
            &mut g1,
        );
        let l_to_sa = l_to_sa_terms(sim, weights, cols, goal_anchors, &mut g2);
        let grad = (g1 + g2) * self.lambda_crl;
        CombinedLoss {
            total: self.lambda_crl * (sa_to_l + l_to_sa),
            sa_to_l,
            l_to_sa,
            grad,
            diagnostics: no_negative_diagnostics(cols),
        }
    }
}

/// `lambda_crl * (L_sa_to_l + L_l_to_sa)` with summed logit gradients.
pub fn combined_crl_loss(
    sim: &SimilarityMatrix,
    batch: &[BatchSample],
    gamma: f64,
    lambda_crl: f64,
) -> Result<CombinedLoss, CrlError> {
    CrlObjective {
        gamma,
        lambda_crl,
        sa_weighting: SaWeighting::BatchSize,
    }
    .evaluate(sim, batch)
}

/// Mean token cross-entropy of `logits` (rows x vocab) against `targets`,
/// with its gradient with respect to the logits.
pub fn bc_token_loss(
    logits: ArrayView2<'_, f64>,
    targets: &[usize],
) -> Result<(f64, Array2<f64>), CrlError> {
    if logits.nrows() != targets.len() {
        return Err(CrlError::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let vocab = logits.ncols();
    let mut grad = Array2::zeros(logits.dim());
    if targets.is_empty() {
        return Ok((0.0, grad));
    }
    let n = targets.len() as f64;
    let mut loss = 0.0;
    for (row, (logit_row, &target)) in logits.axis_iter(Axis(0)).zip(targets).enumerate() {
        if target >= vocab {
            return Err(CrlError::TokenOutOfRange {
                row,
                token: target,
                vocab,
            });
        }
        let lse = log_sum_exp(logit_row.iter().copied());
        loss += (lse - logit_row[target]) / n;
        for (c, &x) in logit_row.iter().enumerate() {
            grad[[row, c]] += (x - lse).exp() / n;
        }
        grad[[row, target]] -= 1.0 / n;
    }
    Ok((loss, grad))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    pub(crate) fn sample(index: usize, task: usize, t: usize, horizon: usize) -> BatchSample {
        BatchSample {
            sample_index: index,
            task_id: task,
            goal_id: GoalId(task as u32),
            timestep: t,
            horizon,
            sa_features: vec![index as f64],
            goal_tokens: vec![task as u32],
        }
    }

    fn goals(n: usize) -> Vec<GoalId> {
        (0..n as u32).map(GoalId).collect()
    }

    #[test]
    fn single_positive_gets_unit_weight() {
        let batch = vec![sample(0, 0, 2, 5), sample(1, 1, 1, 5)];
        let w = temporal_weights(&batch, 0.9).unwrap();
        assert_eq!(w.positive_set(0), &[0]);
        assert!((w.weight(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(w.weight(0, 1), 0.0);
    }

    #[test]
    fn two_positives_half_discount() {
        // remaining steps 1 and 2
        let batch = vec![sample(0, 0, 4, 5), sample(1, 0, 3, 5)];
        let w = temporal_weights(&batch, 0.5).unwrap();
        assert!((w.weight(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.weight(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn long_horizon_ratio_matches_exact_power() {
        let batch = vec![sample(0, 0, 101, 101), sample(1, 0, 1, 101)];
        let w = temporal_weights(&batch, 0.995).unwrap();
        let ratio = w.weight(0, 0) / w.weight(0, 1);
        // (200/199)^100 by repeated multiplication; extended-precision value below
        let mut by_product = 1.0f64;
        for _ in 0..100 {
            by_product *= 200.0 / 199.0;
        }
        assert!((ratio - by_product).abs() / by_product < 1e-12);
        assert!((ratio - 1.650_790_365_064_812_4).abs() < 1e-12);
    }

    #[test]
    fn weights_survive_extreme_horizons() {
        let batch = vec![sample(0, 0, 1, 100_000), sample(1, 0, 99_000, 100_000)];
        let w = temporal_weights(&batch, 0.9).unwrap();
        let total: f64 = w.positive_weights(0).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(w.weight(0, 1) > 0.999_999);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(temporal_weights(&[], 0.9), Err(CrlError::EmptyBatch));
        assert!(matches!(
            temporal_weights(&[sample(0, 0, 1, 1)], 1.0),
            Err(CrlError::InvalidGamma(_))
        ));
        assert!(matches!(
            temporal_weights(&[sample(0, 0, 0, 3)], 0.9),
            Err(CrlError::InvalidTimestep { .. })
        ));
        let mut bad = sample(1, 0, 1, 3);
        bad.goal_id = GoalId(9);
        assert!(matches!(
            temporal_weights(&[sample(0, 0, 1, 3), bad], 0.9),
            Err(CrlError::InconsistentTask { .. })
        ));
    }

    #[test]
    fn sa_to_l_uniform_logits_give_log_n() {
        let batch: Vec<_> = (0..3).map(|k| sample(k, k, 3, 3)).collect();
        let sim = SimilarityMatrix::from_logits(Array2::zeros((3, 3)), goals(3));
        let out = loss_sa_to_l(&sim, &batch, 0.9).unwrap();
        // weight 1 at t = T
        assert!((out.loss - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn sa_to_l_without_negatives_warns() {
        let batch = vec![sample(0, 0, 1, 3), sample(1, 0, 2, 3)];
        let sim = SimilarityMatrix::from_logits(array![[0.3], [-1.0]], goals(1));
        let out = loss_sa_to_l(&sim, &batch, 0.9).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.diagnostics, vec![Diagnostic::NoNegatives]);
    }

    #[test]
    fn sa_to_l_two_by_two() {
        let batch = vec![sample(0, 0, 2, 2), sample(1, 1, 2, 2)];
        let sim = SimilarityMatrix::from_logits(array![[2.0, 0.0], [0.0, 2.0]], goals(2));
        let out = loss_sa_to_l(&sim, &batch, 0.9).unwrap();
        // -ln(e^2 / (e^2 + 1)), evaluated independently in extended precision
        assert!((out.loss - 0.126_928_011_042_972_5).abs() < 1e-12);
    }

    #[test]
    fn l_to_sa_trivial_cases() {
        let batch = vec![sample(0, 0, 1, 4)];
        let sim = SimilarityMatrix::from_logits(array![[0.7]], goals(1));
        let w = temporal_weights(&batch, 0.9).unwrap();
        assert!(loss_l_to_sa(&sim, &w, &batch).unwrap().loss.abs() < 1e-15);

        // uniform logits, positive set of size 2 inside a batch of 5
        let batch = vec![
            sample(0, 0, 1, 4),
            sample(1, 0, 3, 4),
            sample(2, 1, 2, 4),
            sample(3, 1, 2, 4),
            sample(4, 1, 1, 4),
        ];
        let sim = SimilarityMatrix::from_logits(Array2::zeros((5, 2)), goals(2));
        let w = temporal_weights(&batch, 0.9).unwrap();
        let out = loss_l_to_sa(&sim, &w, &batch).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn l_to_sa_optimum_is_the_target_entropy() {
        // q = (2/3, 1/3): remaining steps 1 and 2, gamma = 0.5
        let batch = vec![sample(0, 0, 4, 5), sample(1, 0, 3, 5)];
        let w = temporal_weights(&batch, 0.5).unwrap();
        let eval = |diff: f64| {
            let sim = SimilarityMatrix::from_logits(array![[diff], [0.0]], goals(1));
            loss_l_to_sa(&sim, &w, &batch).unwrap().loss
        };
        let at_opt = eval(2f64.ln());
        assert!((at_opt - 0.636_514_168_294_812_8).abs() < 1e-12);
        // independent sweep over the logit difference
        let mut best = (f64::INFINITY, 0.0);
        for k in -4000..=4000 {
            let d = k as f64 * 1e-3;
            let v = eval(d);
            if v < best.0 {
                best = (v, d);
            }
            if (d - 2f64.ln()).abs() > 1e-3 {
                assert!(v > at_opt);
            }
        }
        assert!((best.1 - 2f64.ln()).abs() <= 1e-3);
    }

    #[test]
    fn bc_loss_cases() {
        let (loss, _) = bc_token_loss(array![[0.0, 0.0, 0.0, 0.0]].view(), &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        let probs = array![[0.7f64, 0.1, 0.1, 0.1]].mapv(f64::ln);
        let (loss, _) = bc_token_loss(probs.view(), &[0]).unwrap();
        assert!((loss - 0.356_674_943_938_732_4).abs() < 1e-12);
        let (loss, _) = bc_token_loss(array![[60.0, 0.0, 0.0]].view(), &[0]).unwrap();
        assert!(loss < 1e-20);
        assert!(matches!(
            bc_token_loss(array![[0.0, 0.0]].view(), &[2]),
            Err(CrlError::TokenOutOfRange { token: 2, .. })
        ));
    }

    #[test]
    fn lambda_switch_and_linearity() {
        let batch = vec![sample(0, 0, 1, 3), sample(1, 1, 2, 3), sample(2, 0, 3, 3)];
        let sim = SimilarityMatrix::from_logits(
            array![[0.2, -0.4], [1.1, 0.3], [-0.5, 0.9]],
            goals(2),
        );
        let off = combined_crl_loss(&sim, &batch, 0.9, 0.0).unwrap();
        assert_eq!(off.total, 0.0);
        assert!(off.grad.iter().all(|&g| g == 0.0));
        let one = combined_crl_loss(&sim, &batch, 0.9, 1.0).unwrap();
        let two = combined_crl_loss(&sim, &batch, 0.9, 2.0).unwrap();
        assert_eq!(two.total, 2.0 * one.total);
        assert_eq!(two.grad, &one.grad * 2.0);
        assert!(matches!(
            combined_crl_loss(&sim, &batch, 0.9, -1.0),
            Err(CrlError::NegativeLambda(_))
        ));
    }

    #[test]
    fn column_mismatch_is_reported() {
        let batch = vec![sample(0, 0, 1, 3), sample(1, 1, 2, 3)];
        let sim = SimilarityMatrix::from_logits(Array2::zeros((2, 2)), vec![GoalId(0), GoalId(5)]);
        assert!(matches!(
            loss_sa_to_l(&sim, &batch, 0.9),
            Err(CrlError::ColumnMismatch { .. })
        ));
    }

    fn arb_batch() -> impl Strategy<Value = (Vec<BatchSample>, Array2<f64>)> {
        (1usize..4)
            .prop_flat_map(|g| (g.max(2)..10, Just(g)))
            .prop_flat_map(|(b, g)| {
            (
                proptest::collection::vec((0..g, 1usize..8, 0usize..8), b),
                proptest::collection::vec(-3.0f64..3.0, b * g),
            )
                .prop_map(move |(specs, logits)| {
                    let mut batch: Vec<BatchSample> = specs
                        .iter()
                        .enumerate()
                        .map(|(i, &(task, t, extra))| sample(i, task, t, t + extra))
                        .collect();
                    // make every task present so columns are 0..g
                    for (task, s) in batch.iter_mut().take(g).enumerate() {
                        s.task_id = task;
                        s.goal_id = GoalId(task as u32);
                    }
                    let logits = Array2::from_shape_vec((batch.len(), g), logits).unwrap();
                    (batch, logits)
                })
        })
    }

    proptest! {
        #[test]
        fn temporal_rows_are_distributions((batch, _) in arb_batch(), gamma in 0.05f64..0.999) {
            let w = temporal_weights(&batch, gamma).unwrap();
            for i in 0..batch.len() {
                let total: f64 = w.positive_weights(i).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                for j in 0..batch.len() {
                    let q = w.weight(i, j);
                    prop_assert_eq!(q > 0.0, batch[j].task_id == batch[i].task_id);
                    for k in 0..batch.len() {
                        if batch[k].task_id == batch[i].task_id && batch[j].task_id == batch[i].task_id
                            && batch[j].remaining() < batch[k].remaining() {
                            prop_assert!(q > w.weight(i, k));
                        }
                    }
                }
            }
        }

        #[test]
        fn row_and_column_shifts_leave_losses_unchanged(
            (batch, logits) in arb_batch(), shift in -5.0f64..5.0, pick in 0usize..64,
        ) {
            let g = logits.ncols();
            let goals = goals(g);
            let gamma = 0.9;
            let base = SimilarityMatrix::from_logits(logits.clone(), goals.clone());
            let w = temporal_weights(&batch, gamma).unwrap();
            let l1 = loss_sa_to_l(&base, &batch, gamma).unwrap().loss;
            let l2 = loss_l_to_sa(&base, &w, &batch).unwrap().loss;

            let mut row_shifted = logits.clone();
            row_shifted.row_mut(pick % batch.len()).mapv_inplace(|v| v + shift);
            let s = SimilarityMatrix::from_logits(row_shifted, goals.clone());
            prop_assert!((loss_sa_to_l(&s, &batch, gamma).unwrap().loss - l1).abs() < 1e-12);

            let mut col_shifted = logits.clone();
            col_shifted.column_mut(pick % g).mapv_inplace(|v| v + shift);
            let s = SimilarityMatrix::from_logits(col_shifted, goals);
            prop_assert!((loss_l_to_sa(&s, &w, &batch).unwrap().loss - l2).abs() < 1e-12);
        }

        #[test]
        fn permuting_the_batch_permutes_gradients(
            (batch, logits) in arb_batch(), seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let g = logits.ncols();
            let mut perm: Vec<usize> = (0..batch.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pbatch: Vec<BatchSample> = perm.iter().map(|&i| batch[i].clone()).collect();
            let plogits = logits.select(Axis(0), &perm);
            let a = combined_crl_loss(&SimilarityMatrix::from_logits(logits, goals(g)), &batch, 0.9, 1.0).unwrap();
            let b = combined_crl_loss(&SimilarityMatrix::from_logits(plogits, goals(g)), &pbatch, 0.9, 1.0).unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-12);
            for (new_row, &old_row) in perm.iter().enumerate() {
                for c in 0..g {
                    prop_assert!((a.grad[[old_row, c]] - b.grad[[new_row, c]]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn lambda_linearity(lambda in 0.0f64..10.0, (batch, logits) in arb_batch()) {
            let g = logits.ncols();
            let sim = SimilarityMatrix::from_logits(logits, goals(g));
            let one = combined_crl_loss(&sim, &batch, 0.9, 1.0).unwrap();
            let scaled = combined_crl_loss(&sim, &batch, 0.9, lambda).unwrap();
            prop_assert!((scaled.total - lambda * one.total).abs() <= 1e-12 * (1.0 + scaled.total.abs()));
        }
    }
}
