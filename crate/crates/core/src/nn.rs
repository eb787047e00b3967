//! A small conditioned feed-forward network with hand-written gradients.
//!
//! Layout of a forward pass for a row with viewpoint `v` and features `f`:
//!
//! ```text
//! a1 = W_ctx · E[v] + b1 + W_in · f      h1 = gelu(a1)
//! a2 = W2 · h1 + b2                      h2 = gelu(a2)
//! out = W_out · h2 + b_out
//! ```
//!
//! `W_ctx · E[v] + b1` is the *context projection*. It depends only on the
//! viewpoint, so decoding computes it once and reuses it for every step.
//!
//! All parameters live in one flat vector, in the order of [`Tensor::ALL`].
//! Values are kept exactly representable as `f32`; arithmetic is `f64`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Dimensions of a [`ConditionedMlp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub viewpoints: usize,
    pub context_dim: usize,
    pub feature_dim: usize,
    pub hidden: [usize; 2],
    pub output_dim: usize,
}

/// Parameter tensors in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tensor {
    Embedding,
    ContextWeight,
    FeatureWeight,
    Bias1,
    Weight2,
    Bias2,
    OutWeight,
    OutBias,
}

impl Tensor {
    pub const ALL: [Tensor; 8] = [
        Tensor::Embedding,
        Tensor::ContextWeight,
        Tensor::FeatureWeight,
        Tensor::Bias1,
        Tensor::Weight2,
        Tensor::Bias2,
        Tensor::OutWeight,
        Tensor::OutBias,
    ];
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.viewpoints,
            self.context_dim,
            self.feature_dim,
            self.hidden[0],
            self.hidden[1],
            self.output_dim,
        ];
        if dims.contains(&0) {
            return Err(invalid(format!("network dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(rows, cols)`; vectors have one column.
    pub fn dims(&self, t: Tensor) -> (usize, usize) {
        let [h1, h2] = self.hidden;
        match t {
            Tensor::Embedding => (self.viewpoints, self.context_dim),
            Tensor::ContextWeight => (h1, self.context_dim),
            Tensor::FeatureWeight => (h1, self.feature_dim),
            Tensor::Bias1 => (h1, 1),
            Tensor::Weight2 => (h2, h1),
            Tensor::Bias2 => (h2, 1),
            Tensor::OutWeight => (self.output_dim, h2),
            Tensor::OutBias => (self.output_dim, 1),
        }
    }

    pub fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let mut start = 0;
        for u in Tensor::ALL {
            let (r, c) = self.dims(u);
            if u == t {
                return start..start + r * c;
            }
            start += r * c;
        }
        unreachable!()
    }

    pub fn param_count(&self) -> usize {
        Tensor::ALL
            .iter()
            .map(|&t| {
                let (r, c) = self.dims(t);
                r * c
            })
            .sum()
    }

    fn fan_in(&self, t: Tensor) -> usize {
        match t {
            Tensor::Embedding => 1,
            Tensor::ContextWeight | Tensor::FeatureWeight | Tensor::Bias1 => {
                self.context_dim + self.feature_dim
            }
            Tensor::Weight2 | Tensor::Bias2 => self.hidden[0],
            Tensor::OutWeight | Tensor::OutBias => self.hidden[1],
        }
    }
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() * 0.398_942_280_401_432_7;
    cdf + x * pdf
}

/// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L-1}πx), cos(2^{L-1}πx)]`.
pub fn positional_encode(x: f64, frequencies: usize) -> Vec<f64> {
    let mut out = vec![0.0; 1 + 2 * frequencies];
    positional_encode_into(x, &mut out);
    out
}

/// Writes the encoding into `out`, whose length fixes `L`.
pub fn positional_encode_into(x: f64, out: &mut [f64]) {
    debug_assert!(out.len() % 2 == 1);
    out[0] = x;
    let mut freq = std::f64::consts::PI;
    for pair in out[1..].chunks_exact_mut(2) {
        let (s, c) = (freq * x).sin_cos();
        pair[0] = s;
        pair[1] = c;
        freq *= 2.0;
    }
}

/// Activations kept for the backward pass.
pub struct Activations {
    pub a1: Array2<f64>,
    pub h1: Array2<f64>,
    pub a2: Array2<f64>,
    pub h2: Array2<f64>,
    pub out: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedMlp {
    shape: NetShape,
    params: Vec<f64>,
    version: u64,
}

pub(crate) fn round_to_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ConditionedMlp {
    /// Uniform `(-1/√fan_in, 1/√fan_in)` initialization.
    pub fn new<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let mut params = vec![0.0; shape.param_count()];
        for t in Tensor::ALL {
            let bound = 1.0 / (shape.fan_in(t) as f64).sqrt();
            for p in &mut params[shape.range(t)] {
                *p = round_to_f32(rng.random_range(-bound..bound));
            }
        }
        Ok(Self {
            shape,
            params,
            version: 0,
        })
    }

    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if params.len() != shape.param_count() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        Ok(Self {
            shape,
            params: params.into_iter().map(round_to_f32).collect(),
            version: 0,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access bumps the version, invalidating derived caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    pub fn view(&self, t: Tensor) -> ArrayView2<'_, f64> {
        view2(&self.shape, t, &self.params)
    }

    fn vector(&self, t: Tensor) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.shape.range(t)])
    }

    pub fn check_viewpoint(&self, viewpoint: usize) -> Result<()> {
        if viewpoint >= self.shape.viewpoints {
            return Err(crate::Error::UnknownViewpoint {
                viewpoint,
                count: self.shape.viewpoints,
            });
        }
        Ok(())
    }

    /// `W_ctx · E[v] + b1`.
    pub fn context_projection(&self, viewpoint: usize) -> Array1<f64> {
        let e = self.view(Tensor::Embedding).row(viewpoint).to_owned();
        self.view(Tensor::ContextWeight).dot(&e) + self.vector(Tensor::Bias1)
    }

    /// Context projections of every viewpoint, one per row.
    pub fn context_projections(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.shape.viewpoints, self.shape.hidden[0]));
        for v in 0..self.shape.viewpoints {
            out.row_mut(v).assign(&self.context_projection(v));
        }
        out
    }

    /// `W_in · f` for each row of `features`.
    pub fn feature_preactivation(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        features.dot(&self.view(Tensor::FeatureWeight).t())
    }

    /// Forward from first-layer preactivations.
    pub fn forward_from_preactivation(&self, a1: Array2<f64>) -> Activations {
        let h1 = a1.mapv(gelu);
        let mut a2 = h1.dot(&self.view(Tensor::Weight2).t());
        a2 += &self.vector(Tensor::Bias2);
        let h2 = a2.mapv(gelu);
        let mut out = h2.dot(&self.view(Tensor::OutWeight).t());
        out += &self.vector(Tensor::OutBias);
        Activations { a1, h1, a2, h2, out }
    }

    /// Forward pass for rows whose context projections are given.
    pub fn forward(&self, context: ArrayView2<'_, f64>, features: ArrayView2<'_, f64>) -> Activations {
        let mut a1 = self.feature_preactivation(features);
        a1 += &context;
        self.forward_from_preactivation(a1)
    }

    /// Accumulates gradients of the output and second layers into `grad` and
    /// returns the gradient with respect to `a1`.
    pub fn backward_to_preactivation(
        &self,
        acts: &Activations,
        d_out: ArrayView2<'_, f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let shape = self.shape;
        general_mat_mul(1.0, &d_out.t(), &acts.h2, 1.0, &mut view2_mut(&shape, Tensor::OutWeight, grad));
        view1_mut(&shape, Tensor::OutBias, grad).scaled_add(1.0, &d_out.sum_axis(Axis(0)));

        let mut d_a2 = d_out.dot(&self.view(Tensor::OutWeight));
        d_a2.zip_mut_with(&acts.a2, |d, &a| *d *= gelu_grad(a));
        general_mat_mul(1.0, &d_a2.t(), &acts.h1, 1.0, &mut view2_mut(&shape, Tensor::Weight2, grad));
        view1_mut(&shape, Tensor::Bias2, grad).scaled_add(1.0, &d_a2.sum_axis(Axis(0)));

        let mut d_a1 = d_a2.dot(&self.view(Tensor::Weight2));
        d_a1.zip_mut_with(&acts.a1, |d, &a| *d *= gelu_grad(a));
        d_a1
    }

    /// First-layer gradients. `d_context` holds, per viewpoint, the summed
    /// `a1` gradients of all rows with that viewpoint.
    pub fn backward_first_layer(
        &self,
        d_a1: ArrayView2<'_, f64>,
        features: ArrayView2<'_, f64>,
        d_context: ArrayView2<'_, f64>,
        grad: &mut [f64],
    ) {
        let shape = self.shape;
        general_mat_mul(1.0, &d_a1.t(), &features, 1.0, &mut view2_mut(&shape, Tensor::FeatureWeight, grad));
        view1_mut(&shape, Tensor::Bias1, grad).scaled_add(1.0, &d_context.sum_axis(Axis(0)));
        let emb = self.view(Tensor::Embedding);
        general_mat_mul(1.0, &d_context.t(), &emb, 1.0, &mut view2_mut(&shape, Tensor::ContextWeight, grad));
        let d_emb = d_context.dot(&self.view(Tensor::ContextWeight));
        view2_mut(&shape, Tensor::Embedding, grad).scaled_add(1.0, &d_emb);
    }

    /// Full backward pass for rows with individual viewpoints.
    pub fn backward(
        &self,
        acts: &Activations,
        d_out: ArrayView2<'_, f64>,
        viewpoints: &[usize],
        features: ArrayView2<'_, f64>,
        grad: &mut [f64],
    ) {
        let d_a1 = self.backward_to_preactivation(acts, d_out, grad);
        let mut d_ctx = Array2::zeros((self.shape.viewpoints, self.shape.hidden[0]));
        for (row, &v) in d_a1.rows().into_iter().zip(viewpoints) {
            d_ctx.row_mut(v).scaled_add(1.0, &row);
        }
        self.backward_first_layer(d_a1.view(), features, d_ctx.view(), grad);
    }
}

fn view2<'a>(shape: &NetShape, t: Tensor, data: &'a [f64]) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape(shape.dims(t), &data[shape.range(t)]).expect("layout matches shape")
}

fn view2_mut<'a>(shape: &NetShape, t: Tensor, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape(shape.dims(t), &mut data[shape.range(t)]).expect("layout matches shape")
}

fn view1_mut<'a>(shape: &NetShape, t: Tensor, data: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut data[shape.range(t)])
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
        }
    }

    /// Updates `params` in place; results are rounded to `f32` precision.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grad.len(), self.first.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = round_to_f32(*p - lr * m_hat / (v_hat.sqrt() + eps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> NetShape {
        NetShape {
            viewpoints: 3,
            context_dim: 4,
            feature_dim: 5,
            hidden: [6, 7],
            output_dim: 8,
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let s = shape();
        let mut end = 0;
        for t in Tensor::ALL {
            let r = s.range(t);
            assert_eq!(r.start, end);
            end = r.end;
        }
        assert_eq!(end, s.param_count());
    }

    #[test]
    fn positional_encoding_examples() {
        let e = positional_encode(0.0, 6);
        assert_eq!(e.len(), 13);
        assert_eq!(e[0], 0.0);
        for pair in e[1..].chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        let e = positional_encode(0.5, 2);
        assert_abs_diff_eq!(e[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[4], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(gelu(1.0), 0.841_344_746_068_542_9, epsilon = 1e-12);
    }

    #[test]
    fn backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = shape();
        let net = ConditionedMlp::new(s, &mut rng).unwrap();
        let viewpoints = [0usize, 2, 2, 1];
        let features = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let target = Array2::from_shape_fn((4, 8), |(i, j)| ((i + 3 * j) as f64).cos());
        // loss = Σ target ⊙ out
        let loss = |net: &ConditionedMlp| {
            let ctx = net.context_projections();
            let rows = ndarray::stack(
                Axis(0),
                &viewpoints.iter().map(|&v| ctx.row(v)).collect::<Vec<_>>(),
            )
            .unwrap();
            (net.forward(rows.view(), features.view()).out * &target).sum()
        };
        let ctx = net.context_projections();
        let rows = ndarray::stack(Axis(0), &viewpoints.iter().map(|&v| ctx.row(v)).collect::<Vec<_>>()).unwrap();
        let acts = net.forward(rows.view(), features.view());
        let mut grad = net.zero_grad();
        net.backward(&acts, target.view(), &viewpoints, features.view(), &mut grad);

        for i in 0..s.param_count() {
            let mut plus = net.clone();
            plus.params_mut()[i] += 1e-6;
            let mut minus = net.clone();
            minus.params_mut()[i] -= 1e-6;
            let fd = (loss(&plus) - loss(&minus)) / 2e-6;
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ConditionedMlp::new(shape(), &mut rng).unwrap();
        let before = net.params().to_vec();
        let mut adam = AdamState::new(before.len(), 1e-3, 0.9, 0.999, 1e-9);
        let zeros = net.zero_grad();
        for _ in 0..10 {
            adam.update(net.params_mut(), &zeros);
        }
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![0.5, -0.25];
        let mut adam = AdamState::new(2, 1e-2, 0.9, 0.999, 1e-9);
        adam.update(&mut p, &[3.0, -0.1]);
        assert_abs_diff_eq!(p[0], 0.49, epsilon = 1e-7);
        assert_abs_diff_eq!(p[1], -0.24, epsilon = 1e-7);
    }

    #[test]
    fn parameters_are_f32_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ConditionedMlp::new(shape(), &mut rng).unwrap();
        assert!(net.params().iter().all(|p| round_to_f32(*p) == *p));
    }
}
