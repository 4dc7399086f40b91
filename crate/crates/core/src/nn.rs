//! Dense layers, layer norm and pointwise activations with explicit backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::params::Parameters;
use crate::scalar::{lit, Scalar};

/// Standard deviation of the normal initializer for projections and embeddings.
pub const INIT_STD: f32 = 0.02;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Draws a `rows x cols` matrix from N(0, `INIT_STD`).
///
/// Samples are drawn in `f32` so that `f32` and `f64` models built from the
/// same seed hold identical values.
pub fn normal_matrix<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    let dist = Normal::new(0.0f32, INIT_STD).expect("valid normal");
    Array2::from_shape_simple_fn((rows, cols), || lit::<T>(dist.sample(rng) as f64))
}

/// Affine map `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self { weight: normal_matrix(d_in, d_out, rng), bias: Array1::zeros(d_out) }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { weight: Array2::zeros((d_in, d_out)), bias: Array1::zeros(d_out) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates weight and bias gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        self.accumulate_grads(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    pub fn accumulate_grads(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("weight".into(), self.weight.view_mut().into_dyn()),
            ("bias".into(), self.bias.view_mut().into_dyn()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

pub struct LayerNormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self { gain: Array1::ones(d), bias: Array1::zeros(d) }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = lit::<T>(x.ncols() as f64);
        let eps = lit::<T>(LAYER_NORM_EPS);
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / d;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / d;
            let r = (var + eps).sqrt().recip();
            row.mapv_inplace(|v| (v - mean) * r);
            *s = r;
        }
        let mut y = &normalized * &self.gain;
        y += &self.bias;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gain += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));

        let d = lit::<T>(dy.ncols() as f64);
        let mut dx = &dy * &self.gain;
        for ((mut row, xhat), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.iter().fold(T::zero(), |a, &v| a + v) / d;
            let mean_gx = row.iter().zip(xhat.iter()).fold(T::zero(), |a, (&g, &x)| a + g * x) / d;
            Zip::from(&mut row).and(&xhat).for_each(|g, &x| *g = r * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("gain".into(), self.gain.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("gain".into(), self.gain.view_mut().into_dyn()),
            ("bias".into(), self.bias.view_mut().into_dyn()),
        ]
    }
}

const GELU_COEF: f64 = 0.044715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + lit::<T>(GELU_COEF) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let c = lit::<T>(GELU_COEF);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = lit::<T>(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + lit::<T>(3.0) * c * x * x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `x * sigmoid(x)`.
#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for &x in &[-6.0, -1.3, -0.2, 0.0, 0.4, 2.5, 7.0] {
            assert!((gelu_grad(x) - central(gelu, x)).abs() < 1e-8, "gelu at {x}");
            assert!((silu_grad(x) - central(silu, x)).abs() < 1e-8, "silu at {x}");
            assert!((sigmoid(x) - central(softplus, x)).abs() < 1e-8, "softplus at {x}");
        }
    }

    #[test]
    fn softplus_is_positive_and_stable() {
        assert!(softplus(-50.0f64) > 0.0);
        assert_eq!(softplus(100.0f64), 100.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ln = LayerNorm::<f64>::new(4);
        let y = ln.forward(array![[1.0, 2.0, 3.0, 4.0], [-2.0, 0.0, 0.0, 2.0]].view());
        for row in y.rows() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut ln = LayerNorm::<f64>::new(3);
        ln.gain = array![0.7, -1.2, 1.5];
        ln.bias = array![0.1, 0.0, -0.3];
        let x = array![[0.3, -1.1, 2.0], [1.0, 0.5, -0.25]];
        let w = array![[1.0, 2.0, -1.0], [0.5, -0.5, 3.0]];
        let loss = |x: &Array2<f64>| (&ln.forward(x.view()) * &w).sum();
        let (_, cache) = ln.forward_cached(x.view());
        let mut grad = LayerNorm { gain: Array1::zeros(3), bias: Array1::zeros(3) };
        let dx = ln.backward(&cache, w.view(), &mut grad);
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += 1e-6;
                let mut xm = x.clone();
                xm[[i, j]] -= 1e-6;
                let fd = (loss(&xp) - loss(&xm)) / 2e-6;
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "dx[{i},{j}]");
            }
        }
    }

    #[test]
    fn linear_backward_shapes_and_values() {
        let lin = Linear { weight: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], bias: array![0.5, -0.5] };
        let x = array![[1.0, 0.0, -1.0]];
        assert_eq!(lin.forward(x.view()), array![[-3.5, -4.5]]);
        let mut grad = Linear::zeros(3, 2);
        let dx = lin.backward(x.view(), array![[1.0, 1.0]].view(), &mut grad);
        assert_eq!(dx, array![[3.0, 7.0, 11.0]]);
        assert_eq!(grad.weight, array![[1.0, 1.0], [0.0, 0.0], [-1.0, -1.0]]);
        assert_eq!(grad.bias, array![1.0, 1.0]);
    }
}
