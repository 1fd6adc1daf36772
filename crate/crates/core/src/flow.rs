//! Flow-matching action head over continuous action chunks.
//!
//! Training pairs a clean chunk `a` with Gaussian noise `eps` at flow time
//! `tau`, regresses the velocity `a - eps` at `tau * a + (1 - tau) * eps`,
//! and samples by forward Euler from noise (`tau = 0`) to data (`tau = 1`).

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::Mlp;
use crate::error::FlowError;
use crate::optim::{Optimizer, OptimizerKind};

/// `H x d_a` block of continuous actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub values: Array2<f64>,
}

impl ActionChunk {
    pub fn new(values: Array2<f64>) -> Result<Self, FlowError> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(FlowError::Shape("action chunk must be at least 1x1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub tau: f64,
    pub noised: Array2<f64>,
    pub eps: Array2<f64>,
}

pub fn interpolate(clean: &ActionChunk, eps: &Array2<f64>, tau: f64) -> Result<FlowState, FlowError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(FlowError::InvalidTau(tau));
    }
    if eps.dim() != clean.values.dim() {
        return Err(FlowError::Shape(format!(
            "noise is {:?}, chunk is {:?}",
            eps.dim(),
            clean.values.dim()
        )));
    }
    let noised = if tau == 1.0 {
        clean.values.clone()
    } else if tau == 0.0 {
        eps.clone()
    } else {
        &clean.values * tau + eps * (1.0 - tau)
    };
    Ok(FlowState {
        tau,
        noised,
        eps: eps.clone(),
    })
}

/// A velocity field `f(x, tau, condition)` over chunks of a fixed shape.
pub trait VelocityField {
    fn chunk_shape(&self) -> (usize, usize);
    fn velocity(&self, x: ArrayView2<'_, f64>, tau: f64, condition: &[f64]) -> Array2<f64>;
}

/// A trainable field evaluated on rows `z = [vec(x), tau, condition]`.
pub trait FlowModel {
    fn shape(&self) -> (usize, usize);
    fn condition_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn to_flat(&self) -> Vec<f64>;
    fn assign_flat(&mut self, flat: &[f64]);
    fn forward_rows(&self, z: &Array2<f64>) -> Array2<f64>;
    /// Flat parameter gradient given `d loss / d output` per row.
    fn backward_rows(&self, z: &Array2<f64>, grad_out: &Array2<f64>) -> Vec<f64>;

    fn input_dim(&self) -> usize {
        let (h, d) = self.shape();
        h * d + 1 + self.condition_dim()
    }
}

impl<T: FlowModel> VelocityField for T {
    fn chunk_shape(&self) -> (usize, usize) {
        self.shape()
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, tau: f64, condition: &[f64]) -> Array2<f64> {
        let z = model_input(x, tau, condition);
        let out = self.forward_rows(&z);
        out.into_shape_with_order(self.shape()).expect("output matches chunk shape")
    }
}

fn model_input(x: ArrayView2<'_, f64>, tau: f64, condition: &[f64]) -> Array2<f64> {
    let mut z = Array2::zeros((1, x.len() + 1 + condition.len()));
    let mut row = z.row_mut(0);
    for (dst, v) in row.iter_mut().zip(x.iter().chain(std::iter::once(&tau)).chain(condition)) {
        *dst = *v;
    }
    z
}

/// Two-layer tanh perceptron velocity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMlp {
    pub horizon: usize,
    pub action_dim: usize,
    pub condition_dim: usize,
    pub net: Mlp,
}

impl FlowMlp {
    pub fn new(horizon: usize, action_dim: usize, condition_dim: usize, hidden: usize, seed: u64) -> Self {
        let input = horizon * action_dim + 1 + condition_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (input as f64).sqrt();
        let mut net = Mlp::gaussian(input, hidden, horizon * action_dim, std, &mut rng);
        net.w2.mapv_inplace(|w| w * (input as f64).sqrt() / (hidden as f64).sqrt());
        Self {
            horizon,
            action_dim,
            condition_dim,
            net,
        }
    }
}

impl FlowModel for FlowMlp {
    fn shape(&self) -> (usize, usize) {
        (self.horizon, self.action_dim)
    }

    fn condition_dim(&self) -> usize {
        self.condition_dim
    }

    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.net.extend_flat(&mut out);
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        self.net.assign_flat(flat);
    }

    fn forward_rows(&self, z: &Array2<f64>) -> Array2<f64> {
        self.net.forward(z).0
    }

    fn backward_rows(&self, z: &Array2<f64>, grad_out: &Array2<f64>) -> Vec<f64> {
        let (_, cache) = self.net.forward(z);
        let mut out = Vec::with_capacity(self.num_params());
        self.net.backward(&cache, grad_out).extend_flat(&mut out);
        out
    }
}

/// Affine velocity model `W z + b`; its loss is quadratic in the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearField {
    pub horizon: usize,
    pub action_dim: usize,
    pub condition_dim: usize,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearField {
    pub fn zeros(horizon: usize, action_dim: usize, condition_dim: usize) -> Self {
        let out = horizon * action_dim;
        Self {
            horizon,
            action_dim,
            condition_dim,
            weight: Array2::zeros((out, out + 1 + condition_dim)),
            bias: Array1::zeros(out),
        }
    }
}

impl FlowModel for LinearField {
    fn shape(&self) -> (usize, usize) {
        (self.horizon, self.action_dim)
    }

    fn condition_dim(&self) -> usize {
        self.condition_dim
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.weight.iter().chain(self.bias.iter()).copied().collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let n = self.weight.len();
        self.weight
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&flat[..n]);
        self.bias
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&flat[n..]);
    }

    fn forward_rows(&self, z: &Array2<f64>) -> Array2<f64> {
        z.dot(&self.weight.t()) + &self.bias
    }

    fn backward_rows(&self, z: &Array2<f64>, grad_out: &Array2<f64>) -> Vec<f64> {
        let gw = grad_out.t().dot(z);
        let gb = grad_out.sum_axis(ndarray::Axis(0));
        gw.iter().chain(gb.iter()).copied().collect()
    }
}

/// Field that ignores its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField(pub Array2<f64>);

impl VelocityField for ConstantField {
    fn chunk_shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    fn velocity(&self, _x: ArrayView2<'_, f64>, _tau: f64, _condition: &[f64]) -> Array2<f64> {
        self.0.clone()
    }
}

/// Exact marginal velocity for targets `a ~ N(mean, std^2)` per entry and
/// standard-normal noise:
/// `v = mean + (tau s^2 - (1 - tau)) / (tau^2 s^2 + (1 - tau)^2) * (x - tau mean)`.
///
/// Its flow maps `x0` to `mean + std * x0`; with `std = 0` it is the
/// perfectly trained field for a point-mass target.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTargetField {
    pub mean: Array2<f64>,
    pub std: f64,
}

impl GaussianTargetField {
    pub fn exact_endpoint(&self, x0: &Array2<f64>) -> Array2<f64> {
        &self.mean + &(x0 * self.std)
    }
}

impl VelocityField for GaussianTargetField {
    fn chunk_shape(&self) -> (usize, usize) {
        self.mean.dim()
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, tau: f64, _condition: &[f64]) -> Array2<f64> {
        let s2 = self.std * self.std;
        let gain = (tau * s2 - (1.0 - tau)) / (tau * tau * s2 + (1.0 - tau).powi(2));
        let mut v = &x - &(&self.mean * tau);
        v.mapv_inplace(|d| d * gain);
        v + &self.mean
    }
}

/// One regression example.
#[derive(Debug, Clone, PartialEq)]
pub struct FmTuple {
    pub clean: ActionChunk,
    pub eps: Array2<f64>,
    pub tau: f64,
    pub condition: Vec<f64>,
}

fn check_condition<M: FlowModel + ?Sized>(model: &M, condition: &[f64]) -> Result<(), FlowError> {
    if condition.len() != model.condition_dim() {
        return Err(FlowError::Shape(format!(
            "condition has {} entries, model expects {}",
            condition.len(),
            model.condition_dim()
        )));
    }
    Ok(())
}

/// Mean over tuples of the per-entry mean squared velocity error, with its
/// flat parameter gradient.
pub fn fm_batch_loss<M: FlowModel + ?Sized>(model: &M, tuples: &[FmTuple]) -> Result<(f64, Vec<f64>), FlowError> {
    if tuples.is_empty() {
        return Err(FlowError::Shape("empty batch".into()));
    }
    let (h, d) = model.shape();
    let width = h * d;
    let mut z = Array2::zeros((tuples.len(), model.input_dim()));
    let mut target = Array2::zeros((tuples.len(), width));
    for (row, t) in tuples.iter().enumerate() {
        if t.clean.values.dim() != (h, d) {
            return Err(FlowError::Shape(format!(
                "chunk is {:?}, model expects {:?}",
                t.clean.values.dim(),
                (h, d)
            )));
        }
        check_condition(model, &t.condition)?;
        let state = interpolate(&t.clean, &t.eps, t.tau)?;
        z.slice_mut(s![row, ..]).assign(&model_input(state.noised.view(), t.tau, &t.condition).row(0));
        for (dst, (a, e)) in target
            .row_mut(row)
            .iter_mut()
            .zip(t.clean.values.iter().zip(t.eps.iter()))
        {
            *dst = a - e;
        }
    }
    let pred = model.forward_rows(&z);
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite);
    }
    let diff = pred - target;
    let scale = 1.0 / (tuples.len() * width) as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() * scale;
    let grad_out = diff * (2.0 * scale);
    Ok((loss, model.backward_rows(&z, &grad_out)))
}

/// Velocity-regression loss of a single example.
pub fn fm_loss<M: FlowModel + ?Sized>(
    model: &M,
    clean: &ActionChunk,
    eps: &Array2<f64>,
    tau: f64,
    condition: &[f64],
) -> Result<(f64, Vec<f64>), FlowError> {
    fm_batch_loss(
        model,
        &[FmTuple {
            clean: clean.clone(),
            eps: eps.clone(),
            tau,
            condition: condition.to_vec(),
        }],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TauDistribution {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub sample_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub tau_distribution: TauDistribution,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            learning_rate: 3e-3,
            hidden: 64,
            sample_steps: 5,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            tau_distribution: TauDistribution::Uniform,
        }
    }
}

/// A clean chunk paired with its conditioning context.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowExample {
    pub clean: ActionChunk,
    pub condition: Vec<f64>,
}

fn gaussian_like(rng: &mut impl Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Minibatch training with fresh noise and `tau` each step; returns the
/// loss history.
pub fn train_flow<M: FlowModel + ?Sized>(
    model: &mut M,
    data: &[FlowExample],
    config: &FlowTrainConfig,
) -> Result<Vec<f64>, FlowError> {
    if data.is_empty() || config.batch_size == 0 {
        return Err(FlowError::Shape("training needs data and batch_size >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut flat = model.to_flat();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, flat.len());
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let tuples: Vec<FmTuple> = (0..config.batch_size)
            .map(|_| {
                let ex = &data[rng.random_range(0..data.len())];
                FmTuple {
                    eps: gaussian_like(&mut rng, ex.clean.values.dim()),
                    tau: match config.tau_distribution {
                        TauDistribution::Uniform => rng.random::<f64>(),
                    },
                    clean: ex.clean.clone(),
                    condition: ex.condition.clone(),
                }
            })
            .collect();
        let (loss, grad) = fm_batch_loss(model, &tuples)?;
        history.push(loss);
        opt.step(&mut flat, &grad);
        model.assign_flat(&flat);
    }
    Ok(history)
}

/// Forward Euler from `tau = 0` to `tau = 1` with `steps` equal steps.
pub fn euler_integrate<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Array2<f64>,
    condition: &[f64],
    steps: usize,
) -> Result<Array2<f64>, FlowError> {
    if steps == 0 {
        return Err(FlowError::Steps);
    }
    if x0.dim() != field.chunk_shape() {
        return Err(FlowError::Shape(format!(
            "start is {:?}, field expects {:?}",
            x0.dim(),
            field.chunk_shape()
        )));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let v = field.velocity(x.view(), k as f64 * dt, condition);
        x.scaled_add(dt, &v);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite);
    }
    Ok(x)
}

/// Standard-normal start drawn from `seed`.
pub fn initial_noise(shape: (usize, usize), seed: u64) -> Array2<f64> {
    gaussian_like(&mut ChaCha8Rng::seed_from_u64(seed), shape)
}

pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    condition: &[f64],
    steps: usize,
    seed: u64,
) -> Result<ActionChunk, FlowError> {
    let x0 = initial_noise(field.chunk_shape(), seed);
    ActionChunk::new(euler_integrate(field, &x0, condition, steps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_difference_check;
    use ndarray::array;

    fn chunk(v: Array2<f64>) -> ActionChunk {
        ActionChunk::new(v).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let clean = chunk(array![[2.0, -1.0]]);
        let eps = array![[0.3, 0.7]];
        assert_eq!(interpolate(&clean, &eps, 1.0).unwrap().noised, clean.values);
        assert_eq!(interpolate(&clean, &eps, 0.0).unwrap().noised, eps);
        let mid = interpolate(&chunk(array![[2.0]]), &array![[0.0]], 0.5).unwrap();
        assert_eq!(mid.noised[[0, 0]], 1.0);
        assert!(matches!(interpolate(&clean, &eps, 1.5), Err(FlowError::InvalidTau(_))));
        assert!(matches!(interpolate(&clean, &array![[0.0]], 0.5), Err(FlowError::Shape(_))));
    }

    #[test]
    fn loss_is_zero_for_exact_velocity_and_mean_square_for_zero_model() {
        // zero weights + bias = a - eps reproduces the target exactly
        let clean = chunk(array![[1.0, 2.0], [0.5, -1.0]]);
        let eps = array![[0.2, 0.1], [-0.3, 0.4]];
        let mut m = LinearField::zeros(2, 2, 0);
        let target = &clean.values - &eps;
        m.bias.assign(&Array1::from_iter(target.iter().copied()));
        let (loss, _) = fm_loss(&m, &clean, &eps, 0.4, &[]).unwrap();
        assert!(loss.abs() < 1e-15);

        let zero = LinearField::zeros(2, 2, 0);
        let (loss, _) = fm_loss(&zero, &clean, &eps, 0.4, &[]).unwrap();
        let m2 = target.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((loss - m2).abs() < 1e-15);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut model = FlowMlp::new(2, 2, 3, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tuples: Vec<FmTuple> = (0..4)
            .map(|_| FmTuple {
                clean: chunk(gaussian_like(&mut rng, (2, 2))),
                eps: gaussian_like(&mut rng, (2, 2)),
                tau: rng.random(),
                condition: vec![rng.random(), 1.0, -0.5],
            })
            .collect();
        let x = model.to_flat();
        let (_, grad) = fm_batch_loss(&model, &tuples).unwrap();
        let report = central_difference_check(&x, &grad, 1e-5, None, 0, |p| {
            model.assign_flat(p);
            fm_batch_loss(&model, &tuples).unwrap().0
        });
        assert!(report.passes(1e-5), "{report:?}");
    }

    #[test]
    fn non_finite_prediction_aborts() {
        let mut m = LinearField::zeros(1, 1, 0);
        m.bias[0] = f64::NAN;
        let err = fm_loss(&m, &chunk(array![[1.0]]), &array![[0.0]], 0.5, &[]).unwrap_err();
        assert!(matches!(err, FlowError::NonFinite));
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let v = array![[0.25, -1.5, 3.0]];
        let field = ConstantField(v.clone());
        let x0 = initial_noise((1, 3), 7);
        for steps in [1, 2, 5, 13] {
            let x1 = euler_integrate(&field, &x0, &[], steps).unwrap();
            for (a, b) in x1.iter().zip((&x0 + &v).iter()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        assert!(matches!(euler_integrate(&field, &x0, &[], 0), Err(FlowError::Steps)));
    }

    #[test]
    fn sampling_is_seeded() {
        let field = GaussianTargetField {
            mean: array![[1.0, 2.0]],
            std: 0.5,
        };
        assert_eq!(sample(&field, &[], 5, 3).unwrap(), sample(&field, &[], 5, 3).unwrap());
        assert_ne!(sample(&field, &[], 5, 3).unwrap(), sample(&field, &[], 5, 4).unwrap());
    }

    #[test]
    fn point_mass_field_lands_on_target() {
        let field = GaussianTargetField {
            mean: array![[0.7, -0.2], [1.1, 0.0]],
            std: 0.0,
        };
        for seed in 0..20 {
            let out = sample(&field, &[], 5, seed).unwrap();
            let err = (&out.values - &field.mean).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn euler_error_shrinks_with_step_count() {
        let field = GaussianTargetField {
            mean: array![[0.5, -1.0, 2.0]],
            std: 0.3,
        };
        let mut prev = f64::INFINITY;
        for steps in [1, 2, 5, 10, 50] {
            let mut err = 0.0;
            for seed in 0..32 {
                let x0 = initial_noise((1, 3), seed);
                let x1 = euler_integrate(&field, &x0, &[], steps).unwrap();
                err += (&x1 - &field.exact_endpoint(&x0)).iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            assert!(err < prev, "steps {steps}: {err} >= {prev}");
            prev = err;
        }
    }

    #[test]
    fn trained_linear_model_reaches_least_squares_optimum() {
        // a = 0.8 c + 0.3 + 0.1 n; features z = [x_tau, tau, c, 1]
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tuples: Vec<FmTuple> = (0..200)
            .map(|_| {
                let c: f64 = StandardNormal.sample(&mut rng);
                let n: f64 = StandardNormal.sample(&mut rng);
                FmTuple {
                    clean: chunk(array![[0.8 * c + 0.3 + 0.1 * n]]),
                    eps: gaussian_like(&mut rng, (1, 1)),
                    tau: rng.random(),
                    condition: vec![c],
                }
            })
            .collect();

        let z = nalgebra::DMatrix::from_fn(tuples.len(), 4, |i, j| {
            let t = &tuples[i];
            match j {
                0 => t.tau * t.clean.values[[0, 0]] + (1.0 - t.tau) * t.eps[[0, 0]],
                1 => t.tau,
                2 => t.condition[0],
                _ => 1.0,
            }
        });
        let y = nalgebra::DVector::from_fn(tuples.len(), |i, _| tuples[i].clean.values[[0, 0]] - tuples[i].eps[[0, 0]]);
        let w = (z.transpose() * &z).lu().solve(&(z.transpose() * &y)).unwrap();
        let optimum = (&z * &w - &y).norm_squared() / tuples.len() as f64;

        let mut model = LinearField::zeros(1, 1, 1);
        let mut flat = model.to_flat();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, flat.len());
        let mut loss = f64::INFINITY;
        for _ in 0..20_000 {
            let (l, g) = fm_batch_loss(&model, &tuples).unwrap();
            loss = l;
            opt.step(&mut flat, &g);
            model.assign_flat(&flat);
        }
        assert!((loss - optimum).abs() < 1e-6, "{loss} vs {optimum}");
        assert!(loss >= optimum - 1e-12);
    }
}
