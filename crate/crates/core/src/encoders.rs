//! State-action and goal encoders and the loop that fits them to the
//! contrastive objective.
//!
//! `phi(s, a)` is a two-layer tanh perceptron over state-action features;
//! `psi(l)` is a per-goal embedding table. A small behaviour-cloning head
//! (linear softmax over actions, conditioned on state features and goal
//! one-hot) rides along so the training record carries a BC term; it has
//! its own parameters and never touches the encoders.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::crl::{
    bc_token_loss, similarity, similarity_backward, BatchSample, CombinedLoss, CrlObjective,
    GoalColumns, NormalizationMode, SaWeighting,
};
use crate::error::{CrlError, EncoderError};
use crate::gradcheck::{central_difference_check, FdReport};
use crate::optim::{Optimizer, OptimizerKind};
use crate::testbed::{Corpus, GoalId, Mdp, Trajectory};

/// Default logit scale `1 / 0.07`, stored as its logarithm.
pub fn default_log_temperature() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Two-layer perceptron `W2 tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((output, hidden)),
            b2: Array1::zeros(output),
        }
    }

    pub fn gaussian(input: usize, hidden: usize, output: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut m = Self::zeros(input, hidden, output);
        m.w1.mapv_inplace(|_| normal.sample(rng));
        m.w2.mapv_inplace(|_| normal.sample(rng));
        m
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Rows of `x` are inputs.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut hidden = x.dot(&self.w1.t());
        hidden += &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let mut out = hidden.dot(&self.w2.t());
        out += &self.b2;
        (
            out,
            MlpCache {
                input: x.clone(),
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache, grad_out: &Array2<f64>) -> Mlp {
        let w2 = grad_out.t().dot(&cache.hidden);
        let b2 = grad_out.sum_axis(Axis(0));
        let mut dz = grad_out.dot(&self.w2);
        dz.zip_mut_with(&cache.hidden, |g, &h| *g *= 1.0 - h * h);
        let w1 = dz.t().dot(&cache.input);
        let b1 = dz.sum_axis(Axis(0));
        Mlp { w1, b1, w2, b2 }
    }

    pub(crate) fn extend_flat(&self, out: &mut Vec<f64>) {
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
    }

    pub(crate) fn assign_flat(&mut self, flat: &[f64]) -> usize {
        let mut off = 0;
        for slot in [
            self.w1.as_slice_mut(),
            self.b1.as_slice_mut(),
            self.w2.as_slice_mut(),
            self.b2.as_slice_mut(),
        ] {
            let slot = slot.expect("standard layout");
            slot.copy_from_slice(&flat[off..off + slot.len()]);
            off += slot.len();
        }
        off
    }

    fn norms(&self) -> [f64; 4] {
        fn n<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
            it.map(|v| v * v).sum::<f64>().sqrt()
        }
        [n(self.w1.iter()), n(self.b1.iter()), n(self.w2.iter()), n(self.b2.iter())]
    }
}

/// Parameters of both encoders plus the logit temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub sa_net: Mlp,
    pub goal_ids: Vec<GoalId>,
    /// Row `k` embeds `goal_ids[k]`.
    pub goal_table: Array2<f64>,
    pub log_temperature: f64,
    pub mode: NormalizationMode,
}

impl EncoderParams {
    pub fn init(
        input_dim: usize,
        hidden: usize,
        embed_dim: usize,
        goal_ids: Vec<GoalId>,
        mode: NormalizationMode,
        init_std: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sa_net = Mlp::gaussian(input_dim, hidden, embed_dim, init_std, &mut rng);
        let normal = Normal::new(0.0, init_std).expect("finite std");
        let goal_table = Array2::from_shape_fn((goal_ids.len(), embed_dim), |_| normal.sample(&mut rng));
        let log_temperature = match mode {
            NormalizationMode::Raw => 0.0,
            NormalizationMode::L2Temp => default_log_temperature(),
        };
        Self {
            sa_net,
            goal_ids,
            goal_table,
            log_temperature,
            mode,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.goal_table.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.sa_net.input_dim()
    }

    pub fn temperature(&self) -> f64 {
        match self.mode {
            NormalizationMode::Raw => 1.0,
            NormalizationMode::L2Temp => self.log_temperature.exp(),
        }
    }

    /// Same shapes, all zeros; used as a gradient container.
    pub fn zeros_like(&self) -> Self {
        Self {
            sa_net: Mlp::zeros(self.input_dim(), self.sa_net.hidden_dim(), self.embed_dim()),
            goal_ids: self.goal_ids.clone(),
            goal_table: Array2::zeros(self.goal_table.dim()),
            log_temperature: 0.0,
            mode: self.mode,
        }
    }

    pub fn num_params(&self) -> usize {
        self.sa_net.num_params() + self.goal_table.len() + 1
    }

    /// `w1, b1, w2, b2, goal_table, log_temperature`, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.sa_net.extend_flat(&mut out);
        out.extend(self.goal_table.iter());
        out.push(self.log_temperature);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), EncoderError> {
        if flat.len() != self.num_params() {
            return Err(EncoderError::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let off = self.sa_net.assign_flat(flat);
        let table = self.goal_table.as_slice_mut().expect("standard layout");
        let n = table.len();
        table.copy_from_slice(&flat[off..off + n]);
        self.log_temperature = flat[off + n];
        Ok(())
    }

    pub fn norms(&self) -> Vec<f64> {
        let mut v = self.sa_net.norms().to_vec();
        v.push(self.goal_table.iter().map(|x| x * x).sum::<f64>().sqrt());
        v.push(self.log_temperature.abs());
        v
    }

    fn goal_row(&self, goal: GoalId) -> Result<usize, EncoderError> {
        self.goal_ids
            .iter()
            .position(|&g| g == goal)
            .ok_or(EncoderError::UnknownGoal(goal))
    }

    /// Raw (pre-normalization) goal embeddings for `goals`, one row each.
    pub fn goal_embeddings(&self, goals: &[GoalId]) -> Result<Array2<f64>, EncoderError> {
        let rows: Vec<usize> = goals
            .iter()
            .map(|&g| self.goal_row(g))
            .collect::<Result<_, _>>()?;
        Ok(self.goal_table.select(Axis(0), &rows))
    }
}

fn validate_features(params: &EncoderParams, features: &[f64]) -> Result<(), EncoderError> {
    if features.len() != params.input_dim() {
        return Err(EncoderError::FeatureDim {
            expected: params.input_dim(),
            found: features.len(),
        });
    }
    if let Some(i) = features.iter().position(|v| !v.is_finite()) {
        return Err(EncoderError::NonFiniteInput(i));
    }
    Ok(())
}

fn finish(params: &EncoderParams, v: Array1<f64>) -> Result<Array1<f64>, EncoderError> {
    match params.mode {
        NormalizationMode::Raw => Ok(v),
        NormalizationMode::L2Temp => {
            let n = v.dot(&v).sqrt();
            if n > 0.0 {
                Ok(v / n)
            } else {
                Err(EncoderError::ZeroNorm)
            }
        }
    }
}

/// `phi(s, a)`; unit norm in `l2_temp` mode.
pub fn encode_sa(params: &EncoderParams, features: &[f64]) -> Result<Array1<f64>, EncoderError> {
    validate_features(params, features)?;
    let x = Array2::from_shape_vec((1, features.len()), features.to_vec()).expect("row shape");
    let (out, _) = params.sa_net.forward(&x);
    finish(params, out.row(0).to_owned())
}

/// `psi(l)`; unit norm in `l2_temp` mode.
pub fn encode_goal(params: &EncoderParams, goal: GoalId) -> Result<Array1<f64>, EncoderError> {
    let row = params.goal_row(goal)?;
    finish(params, params.goal_table.row(row).to_owned())
}

/// Critic value `psi(l)^T phi(s, a)` including the temperature scale.
pub fn score(params: &EncoderParams, features: &[f64], goal: GoalId) -> Result<f64, EncoderError> {
    let phi = encode_sa(params, features)?;
    let psi = encode_goal(params, goal)?;
    Ok(params.temperature() * phi.dot(&psi))
}

pub(crate) fn feature_matrix(batch: &[BatchSample], input_dim: usize) -> Result<Array2<f64>, EncoderError> {
    let mut x = Array2::zeros((batch.len(), input_dim));
    for (mut row, s) in x.rows_mut().into_iter().zip(batch) {
        if s.sa_features.len() != input_dim {
            return Err(EncoderError::FeatureDim {
                expected: input_dim,
                found: s.sa_features.len(),
            });
        }
        if let Some(i) = s.sa_features.iter().position(|v| !v.is_finite()) {
            return Err(EncoderError::NonFiniteInput(i));
        }
        row.assign(&ndarray::ArrayView1::from(&s.sa_features[..]));
    }
    Ok(x)
}

/// Loss of the contrastive objective and its gradient with respect to every
/// encoder parameter.
pub fn crl_loss_and_grad(
    params: &EncoderParams,
    batch: &[BatchSample],
    objective: &CrlObjective,
) -> Result<(CombinedLoss, EncoderParams), EncoderError> {
    let cols = GoalColumns::from_batch(batch)?;
    let x = feature_matrix(batch, params.input_dim())?;
    let (phi, mlp_cache) = params.sa_net.forward(&x);
    let psi = params.goal_embeddings(&cols.goals)?;
    let (sim, sim_cache) = similarity(
        phi.view(),
        psi.view(),
        cols.goals.clone(),
        params.mode,
        params.log_temperature,
    )?;
    let loss = objective.evaluate(&sim, batch)?;
    let emb = similarity_backward(&sim_cache, &loss.grad);
    let mut grad = params.zeros_like();
    grad.sa_net = params.sa_net.backward(&mlp_cache, &emb.phi);
    for (k, &g) in cols.goals.iter().enumerate() {
        let row = params.goal_row(g)?;
        let mut dst = grad.goal_table.row_mut(row);
        dst += &emb.psi.row(k);
    }
    if params.mode == NormalizationMode::L2Temp {
        grad.log_temperature = emb.log_temperature;
    }
    Ok((loss, grad))
}

/// Central differences on encoder parameters against [`crl_loss_and_grad`].
/// Checks every coordinate when there are at most `max_coords`, otherwise a
/// seeded random subset of that size.
pub fn finite_diff_check(
    params: &EncoderParams,
    batch: &[BatchSample],
    objective: &CrlObjective,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport, EncoderError> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(EncoderError::InvalidConfig(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let (_, grad) = crl_loss_and_grad(params, batch, objective)?;
    let x = params.to_flat();
    let analytic = grad.to_flat();
    let mut probe = params.clone();
    Ok(central_difference_check(
        &x,
        &analytic,
        h,
        Some(max_coords.max(200)),
        seed,
        |flat| {
            probe.assign_flat(flat).expect("same layout");
            crl_loss_and_grad(&probe, batch, objective)
                .map(|(l, _)| l.total)
                .unwrap_or(f64::NAN)
        },
    ))
}

/// A contrastive sample plus what the BC head needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub crl: BatchSample,
    pub state_features: Vec<f64>,
    pub action: usize,
    pub state: usize,
}

/// Every `(s_t, a_t)` of the given trajectories, in corpus order.
pub fn trajectory_samples(corpus: &Corpus, trajectories: &[Trajectory]) -> Vec<TrainingSample> {
    let mut out = Vec::new();
    for tr in trajectories {
        let tokens = corpus
            .goal(tr.goal_id)
            .map(|g| g.token_seq.clone())
            .unwrap_or_default();
        for (t, s, a) in tr.steps() {
            out.push(TrainingSample {
                crl: BatchSample {
                    sample_index: out.len(),
                    task_id: tr.goal_id.0 as usize,
                    goal_id: tr.goal_id,
                    timestep: t,
                    horizon: tr.len(),
                    sa_features: corpus.mdp.sa_features(s, a),
                    goal_tokens: tokens.clone(),
                },
                state_features: corpus.mdp.state_features(s),
                action: a,
                state: s,
            });
        }
    }
    out
}

pub fn corpus_samples(corpus: &Corpus) -> Vec<TrainingSample> {
    trajectory_samples(corpus, &corpus.trajectories)
}

/// Linear softmax policy over actions from `[state features, goal one-hot]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub goal_ids: Vec<GoalId>,
}

impl BcHead {
    pub fn zeros(state_dim: usize, num_actions: usize, goal_ids: Vec<GoalId>) -> Self {
        Self {
            weight: Array2::zeros((num_actions, state_dim + goal_ids.len())),
            bias: Array1::zeros(num_actions),
            goal_ids,
        }
    }

    fn inputs(&self, samples: &[&TrainingSample]) -> Array2<f64> {
        let dim = self.weight.ncols();
        let state_dim = dim - self.goal_ids.len();
        let mut x = Array2::zeros((samples.len(), dim));
        for (mut row, s) in x.rows_mut().into_iter().zip(samples) {
            for (k, v) in s.state_features.iter().take(state_dim).enumerate() {
                row[k] = *v;
            }
            if let Some(g) = self.goal_ids.iter().position(|&g| g == s.crl.goal_id) {
                row[state_dim + g] = 1.0;
            }
        }
        x
    }

    pub fn logits(&self, samples: &[&TrainingSample]) -> Array2<f64> {
        let mut z = self.inputs(samples).dot(&self.weight.t());
        z += &self.bias;
        z
    }

    pub fn loss_and_grad(&self, samples: &[&TrainingSample]) -> Result<(f64, BcHead), EncoderError> {
        let x = self.inputs(samples);
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        let targets: Vec<usize> = samples.iter().map(|s| s.action).collect();
        let (loss, dz) = bc_token_loss(z.view(), &targets)?;
        Ok((
            loss,
            BcHead {
                weight: dz.t().dot(&x),
                bias: dz.sum_axis(Axis(0)),
                goal_ids: self.goal_ids.clone(),
            },
        ))
    }

    fn to_flat(&self) -> Vec<f64> {
        self.weight.iter().chain(self.bias.iter()).copied().collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let w = self.weight.as_slice_mut().expect("standard layout");
        let n = w.len();
        w.copy_from_slice(&flat[..n]);
        self.bias
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&flat[n..]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda_crl: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub normalization_mode: NormalizationMode,
    pub hidden: usize,
    pub embed_dim: usize,
    pub init_std: f64,
    /// Initial log logit-scale in `l2_temp` mode.
    pub init_log_temperature: f64,
    pub bc_weight: f64,
    pub sa_weighting: SaWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.995,
            lambda_crl: 1.0,
            learning_rate: 1e-2,
            steps: 2000,
            batch_size: 0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            normalization_mode: NormalizationMode::Raw,
            hidden: 64,
            embed_dim: 16,
            init_std: 0.05,
            init_log_temperature: default_log_temperature(),
            bc_weight: 1.0,
            sa_weighting: SaWeighting::BatchSize,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> CrlObjective {
        CrlObjective {
            gamma: self.gamma,
            lambda_crl: self.lambda_crl,
            sa_weighting: self.sa_weighting,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_owned()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.lambda_crl >= 0.0) {
            return bad("lambda_crl must be >= 0");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 1 {
            return bad("batch_size must be >= 2 (or 0 for full batch)");
        }
        if self.embed_dim < 2 || self.hidden == 0 {
            return bad("embed_dim must be >= 2 and hidden >= 1");
        }
        if !(self.init_std > 0.0) || !(self.bc_weight >= 0.0) {
            return bad("init_std must be > 0 and bc_weight >= 0");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(rename = "L_sa_to_l")]
    pub l_sa_to_l: f64,
    #[serde(rename = "L_l_to_sa")]
    pub l_l_to_sa: f64,
    #[serde(rename = "L_bc")]
    pub l_bc: f64,
    pub temperature: f64,
    pub grad_norm: f64,
}

impl LossRecord {
    /// Objective value that the step descended.
    pub fn objective(&self, lambda_crl: f64, bc_weight: f64) -> f64 {
        lambda_crl * (self.l_sa_to_l + self.l_l_to_sa) + bc_weight * self.l_bc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub bc_head: BcHead,
    pub history: Vec<LossRecord>,
}

fn sample_goal_ids(samples: &[TrainingSample]) -> Vec<GoalId> {
    let mut ids: Vec<GoalId> = samples.iter().map(|s| s.crl.goal_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Picks a mini-batch that contains at least two tasks when possible.
fn draw_batch(rng: &mut ChaCha8Rng, samples: &[TrainingSample], size: usize) -> Vec<usize> {
    let mut idx = sample(rng, samples.len(), size).into_vec();
    idx.sort_unstable();
    let first = samples[idx[0]].crl.task_id;
    if idx.iter().all(|&i| samples[i].crl.task_id == first) {
        if let Some(other) = samples.iter().position(|s| s.crl.task_id != first) {
            *idx.last_mut().expect("nonempty") = other;
            idx.sort_unstable();
        }
    }
    idx
}

/// Fits the encoders (and BC head) to
/// `bc_weight * L_bc + lambda_crl * (L_sa_to_l + L_l_to_sa)`.
pub fn train_samples(
    samples: &[TrainingSample],
    mdp: &Mdp,
    config: &TrainConfig,
) -> Result<TrainOutcome, EncoderError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(EncoderError::InvalidConfig("no training samples".into()));
    }
    let goal_ids = sample_goal_ids(samples);
    if config.lambda_crl > 0.0 && goal_ids.len() < 2 {
        return Err(EncoderError::InvalidConfig(
            "contrastive training needs at least two tasks".into(),
        ));
    }
    let mut params = EncoderParams::init(
        mdp.sa_feature_dim(),
        config.hidden,
        config.embed_dim,
        goal_ids.clone(),
        config.normalization_mode,
        config.init_std,
        config.seed,
    );
    if config.normalization_mode == NormalizationMode::L2Temp {
        params.log_temperature = config.init_log_temperature;
    }
    let state_dim = samples[0].state_features.len();
    let mut bc_head = BcHead::zeros(state_dim, mdp.num_actions(), goal_ids);
    let objective = config.objective();

    let n_enc = params.num_params();
    let mut flat_params: Vec<f64> = params.to_flat();
    flat_params.extend(bc_head.to_flat());
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, flat_params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0ba7_c4e5);
    let full: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let idx = if config.batch_size == 0 || config.batch_size >= samples.len() {
            full.clone()
        } else {
            draw_batch(&mut rng, samples, config.batch_size)
        };
        let chosen: Vec<&TrainingSample> = idx.iter().map(|&i| &samples[i]).collect();
        let batch: Vec<BatchSample> = chosen.iter().map(|s| s.crl.clone()).collect();

        let (crl, enc_grad) = match crl_loss_and_grad(&params, &batch, &objective) {
            Err(EncoderError::Crl(CrlError::NonFinite(_))) => {
                return Err(EncoderError::NonFiniteLoss {
                    step,
                    param_norms: params.norms(),
                })
            }
            other => other?,
        };
        let (bc_loss, bc_grad) = bc_head.loss_and_grad(&chosen)?;
        let total = crl.total + config.bc_weight * bc_loss;
        if !total.is_finite() {
            return Err(EncoderError::NonFiniteLoss {
                step,
                param_norms: params.norms(),
            });
        }
        let mut grad = enc_grad.to_flat();
        grad.extend(bc_grad.to_flat().into_iter().map(|g| g * config.bc_weight));
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(EncoderError::NonFiniteLoss {
                step,
                param_norms: params.norms(),
            });
        }
        history.push(LossRecord {
            step,
            l_sa_to_l: crl.sa_to_l,
            l_l_to_sa: crl.l_to_sa,
            l_bc: bc_loss,
            temperature: params.temperature(),
            grad_norm,
        });
        opt.step(&mut flat_params, &grad);
        params.assign_flat(&flat_params[..n_enc])?;
        bc_head.assign_flat(&flat_params[n_enc..]);
    }
    Ok(TrainOutcome {
        params,
        bc_head,
        history,
    })
}

/// [`train_samples`] over every expert sample of the corpus.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome, EncoderError> {
    train_samples(&corpus_samples(corpus), &corpus.mdp, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed::{generate_corpus, CorpusConfig, MdpFamily};

    fn small_corpus() -> Corpus {
        generate_corpus(&CorpusConfig {
            family: MdpFamily::Chain { arms: 2, arm_len: 5 },
            num_tasks: 2,
            trajectories_per_task: 2,
            seed: 3,
            gamma: 0.9,
            goal_token_len: 3,
            goal_vocab: 16,
        })
        .unwrap()
    }

    fn params(mode: NormalizationMode) -> EncoderParams {
        EncoderParams::init(7, 8, 4, vec![GoalId(0), GoalId(1), GoalId(2)], mode, 0.3, 11)
    }

    #[test]
    fn zero_network_encodes_to_zero() {
        let mut p = params(NormalizationMode::Raw);
        p.sa_net = Mlp::zeros(7, 8, 4);
        let v = encode_sa(&p, &[1.0; 7]).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        p.mode = NormalizationMode::L2Temp;
        assert!(matches!(encode_sa(&p, &[1.0; 7]), Err(EncoderError::ZeroNorm)));
    }

    #[test]
    fn l2_mode_gives_unit_vectors() {
        let p = params(NormalizationMode::L2Temp);
        let v = encode_sa(&p, &[0.5, -1.0, 0.0, 2.0, 0.1, 0.0, 1.0]).unwrap();
        assert!((v.dot(&v).sqrt() - 1.0).abs() < 1e-12);
        let g = encode_goal(&p, GoalId(1)).unwrap();
        assert!((g.dot(&g).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encoders_are_deterministic_and_goals_distinct() {
        let a = params(NormalizationMode::Raw);
        let b = params(NormalizationMode::Raw);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        assert_eq!(encode_sa(&a, &x).unwrap(), encode_sa(&b, &x).unwrap());
        assert_eq!(encode_goal(&a, GoalId(2)).unwrap(), encode_goal(&a, GoalId(2)).unwrap());
        for i in 0..3u32 {
            for j in (i + 1)..3 {
                let d = encode_goal(&a, GoalId(i)).unwrap() - encode_goal(&a, GoalId(j)).unwrap();
                assert!(d.dot(&d) > 0.0);
            }
        }
    }

    #[test]
    fn validation_errors() {
        let p = params(NormalizationMode::Raw);
        assert!(matches!(encode_sa(&p, &[0.0; 3]), Err(EncoderError::FeatureDim { .. })));
        let mut x = [0.0; 7];
        x[4] = f64::NAN;
        assert!(matches!(encode_sa(&p, &x), Err(EncoderError::NonFiniteInput(4))));
        assert!(matches!(encode_goal(&p, GoalId(9)), Err(EncoderError::UnknownGoal(_))));
    }

    #[test]
    fn flat_round_trip() {
        let p = params(NormalizationMode::L2Temp);
        let mut q = p.zeros_like();
        q.assign_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn lambda_zero_keeps_encoders_at_init() {
        let corpus = small_corpus();
        let cfg = TrainConfig {
            lambda_crl: 0.0,
            steps: 50,
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train(&corpus, &cfg).unwrap();
        let init = EncoderParams::init(
            corpus.mdp.sa_feature_dim(),
            cfg.hidden,
            cfg.embed_dim,
            vec![GoalId(0), GoalId(1)],
            cfg.normalization_mode,
            cfg.init_std,
            cfg.seed,
        );
        assert_eq!(out.params, init);
        // the BC head still learns
        assert!(out.history.last().unwrap().l_bc < out.history[0].l_bc);
    }

    #[test]
    fn same_seed_same_history() {
        let corpus = small_corpus();
        let cfg = TrainConfig {
            steps: 30,
            batch_size: 6,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&corpus, &cfg).unwrap();
        let b = train(&corpus, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn full_batch_gradient_descent_is_monotone() {
        let corpus = small_corpus();
        let cfg = TrainConfig {
            steps: 300,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.05,
            gamma: 0.9,
            ..TrainConfig::default()
        };
        let out = train(&corpus, &cfg).unwrap();
        let values: Vec<f64> = out
            .history
            .iter()
            .map(|r| r.objective(cfg.lambda_crl, cfg.bc_weight))
            .collect();
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert!(values.last().unwrap() < &values[0]);
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let corpus = small_corpus();
        let cfg = TrainConfig {
            steps: 200,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        match train(&corpus, &cfg) {
            Err(EncoderError::NonFiniteLoss { step, param_norms }) => {
                assert!(step > 0);
                assert_eq!(param_norms.len(), 6);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn single_task_contrastive_training_is_rejected() {
        let corpus = small_corpus();
        let samples: Vec<TrainingSample> = corpus_samples(&corpus)
            .into_iter()
            .filter(|s| s.crl.task_id == 0)
            .collect();
        let err = train_samples(&samples, &corpus.mdp, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, EncoderError::InvalidConfig(_)));
    }
}
