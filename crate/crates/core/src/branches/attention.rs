use ndarray::{s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{nest, Parameters};
use crate::scalar::{lit, Scalar};

/// Layer dimensions of the attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionShape {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Multiply-adds per token when every query sees `context_len` keys.
    ///
    /// The score matrix is computed densely and then masked, so the causal
    /// mask does not reduce the count.
    pub fn macs_per_token(&self, context_len: usize) -> u64 {
        let d = self.d_model as u64;
        let ctx = context_len as u64;
        4 * d * d + 2 * ctx * d
    }
}

/// Multi-head causal self-attention over a routed token subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub n_heads: usize,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

pub struct AttentionCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Softmax weights per head, `n x n`.
    probs: Vec<Array2<T>>,
    context: Array2<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn new<R: Rng + ?Sized>(shape: AttentionShape, rng: &mut R) -> Self {
        let d = shape.d_model;
        Self {
            n_heads: shape.n_heads,
            query: Linear::new(d, d, rng),
            key: Linear::new(d, d, rng),
            value: Linear::new(d, d, rng),
            output: Linear::new(d, d, rng),
        }
    }

    pub fn shape(&self) -> AttentionShape {
        AttentionShape { d_model: self.query.d_in(), n_heads: self.n_heads }
    }

    /// Attention over a subset whose rows sit at `positions` in the full sequence.
    ///
    /// Row `i` attends to rows `j <= i` of the subset; positions only need to
    /// be strictly ascending.
    pub fn forward(&self, x: ArrayView2<T>, positions: &[usize]) -> Result<Array2<T>> {
        validate_subset(x, positions)?;
        Ok(self.forward_cached(x).0)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> (Array2<T>, AttentionCache<T>) {
        let n = x.nrows();
        let hd = self.shape().head_dim();
        let scale = lit::<T>(1.0 / (hd as f64).sqrt());

        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let mut context = Array2::zeros((n, self.query.d_out()));
        let mut probs = Vec::with_capacity(self.n_heads);

        for h in 0..self.n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                let max = row.iter().take(i + 1).fold(T::neg_infinity(), |m, &v| m.max(v * scale));
                let mut total = T::zero();
                for (j, p) in row.iter_mut().enumerate() {
                    *p = if j <= i { (*p * scale - max).exp() } else { T::zero() };
                    total = total + *p;
                }
                row.mapv_inplace(|p| p / total);
            }
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }

        let out = self.output.forward(context.view());
        (out, AttentionCache { x: x.to_owned(), q, k, v, probs, context })
    }

    pub fn backward(&self, cache: &AttentionCache<T>, dy: ArrayView2<T>, grad: &mut Attention<T>) -> Array2<T> {
        let hd = self.shape().head_dim();
        let scale = lit::<T>(1.0 / (hd as f64).sqrt());

        let d_context = self.output.backward(cache.context.view(), dy, &mut grad.output);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());

        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let d_out = d_context.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&d_out));
            let d_probs = d_out.dot(&cache.v.slice(cols).t());
            // softmax backward, then fold in the 1/sqrt(hd) score scale
            let mut d_scores = &d_probs * p;
            let row_dot = d_scores.sum_axis(Axis(1));
            for ((mut ds, pr), &rd) in d_scores.rows_mut().into_iter().zip(p.rows()).zip(row_dot.iter()) {
                ds.zip_mut_with(&pr, |g, &pv| *g = (*g - pv * rd) * scale);
            }
            dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
        }

        let x = cache.x.view();
        let mut dx = self.query.backward(x, dq.view(), &mut grad.query);
        dx += &self.key.backward(x, dk.view(), &mut grad.key);
        dx += &self.value.backward(x, dv.view(), &mut grad.value);
        dx
    }
}

impl<T: Scalar> Parameters<T> for Attention<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        nest("query", self.query.params())
            .chain(nest("key", self.key.params()))
            .chain(nest("value", self.value.params()))
            .chain(nest("output", self.output.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        nest("query", self.query.params_mut())
            .chain(nest("key", self.key.params_mut()))
            .chain(nest("value", self.value.params_mut()))
            .chain(nest("output", self.output.params_mut()))
            .collect()
    }
}

pub(crate) fn validate_subset<T: Scalar>(x: ArrayView2<T>, positions: &[usize]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Shape("branch input must contain at least one token".into()));
    }
    if positions.len() != x.nrows() {
        return Err(Error::Shape(format!("{} rows but {} positions", x.nrows(), positions.len())));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Split("positions must be strictly ascending".into()));
    }
    check_finite(x, "branch input")
}

pub(crate) fn check_finite<T: Scalar>(x: ArrayView2<T>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { tensor: what.to_string() })
    }
}
