//! Diagonal selective state-space branch.
//!
//! Per channel `c` and state `s`, with zero-order-hold discretization:
//!
//! ```text
//! u_t       = x_t W_in + b_in                 (d_inner)
//! delta_t   = softplus(x_t W_delta + b_delta) (d_inner)
//! B_t, C_t  = x_t W_B + b_B, x_t W_C + b_C    (d_state)
//! A         = -exp(a_log)                     (d_inner x d_state)
//! h_t[c,s]  = exp(delta_t[c] A[c,s]) h_{t-1}[c,s] + delta_t[c] B_t[s] u_t[c]
//! y_t[c]    = sum_s C_t[s] h_t[c,s]
//! out_t     = (y_t * silu(x_t W_gate + b_gate)) W_out + b_out
//! ```
//!
//! `h_0 = 0`. Storing `a_log` keeps every entry of `A` strictly negative.

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;

use crate::error::Result;
use crate::nn::{sigmoid, silu, silu_grad, softplus, Linear};
use crate::params::{nest, Parameters};
use crate::scalar::{lit, Scalar};

use super::attention::validate_subset;

/// Multiply-adds per (channel, state) pair per step: state decay, input
/// injection and the output contraction.
pub const RECURRENCE_MACS_PER_STATE: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmShape {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

/// Per-token multiply-add counts of each SSM sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmMacTerms {
    pub input: u64,
    pub gate: u64,
    pub delta: u64,
    pub b: u64,
    pub c: u64,
    pub recurrence: u64,
    pub output: u64,
}

impl SsmMacTerms {
    pub fn total(&self) -> u64 {
        self.input + self.gate + self.delta + self.b + self.c + self.recurrence + self.output
    }
}

impl SsmShape {
    pub fn mac_terms(&self) -> SsmMacTerms {
        let (d, di, ds) = (self.d_model as u64, self.d_inner as u64, self.d_state as u64);
        SsmMacTerms {
            input: d * di,
            gate: d * di,
            delta: d * di,
            b: d * ds,
            c: d * ds,
            recurrence: RECURRENCE_MACS_PER_STATE * di * ds,
            output: di * d,
        }
    }

    pub fn macs_per_token(&self) -> u64 {
        self.mac_terms().total()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ssm<T> {
    pub in_proj: Linear<T>,
    /// `None` disables gating (the scan output goes straight to `out_proj`).
    pub gate_proj: Option<Linear<T>>,
    pub delta_proj: Linear<T>,
    pub b_proj: Linear<T>,
    pub c_proj: Linear<T>,
    /// `log(-A)`, `d_inner x d_state`.
    pub a_log: Array2<T>,
    pub out_proj: Linear<T>,
}

/// Saved activations of [`selective_scan`].
pub struct ScanCache<T> {
    /// `exp(delta A)` per step, laid out `[t][c][s]`.
    decay: Vec<T>,
    /// Hidden state after each step, laid out `[t][c][s]`.
    states: Vec<T>,
}

pub struct SsmCache<T> {
    x: Array2<T>,
    u: Array2<T>,
    gate_pre: Option<Array2<T>>,
    delta_pre: Array2<T>,
    delta: Array2<T>,
    b: Array2<T>,
    c: Array2<T>,
    y: Array2<T>,
    gated: Array2<T>,
    scan: ScanCache<T>,
}

impl<T: Scalar> Ssm<T> {
    pub fn new<R: Rng + ?Sized>(shape: SsmShape, rng: &mut R) -> Self {
        let SsmShape { d_model: d, d_inner: di, d_state: ds } = shape;
        Self {
            in_proj: Linear::new(d, di, rng),
            gate_proj: Some(Linear::new(d, di, rng)),
            delta_proj: Linear::new(d, di, rng),
            b_proj: Linear::new(d, ds, rng),
            c_proj: Linear::new(d, ds, rng),
            // A[c, s] = -(s + 1)
            a_log: Array2::from_shape_fn((di, ds), |(_, s)| lit::<T>(((s + 1) as f64).ln())),
            out_proj: Linear::new(di, d, rng),
        }
    }

    pub fn shape(&self) -> SsmShape {
        SsmShape { d_model: self.in_proj.d_in(), d_inner: self.a_log.nrows(), d_state: self.a_log.ncols() }
    }

    pub fn state_matrix(&self) -> Array2<T> {
        self.a_log.mapv(|v| -v.exp())
    }

    pub fn forward(&self, x: ArrayView2<T>, positions: &[usize]) -> Result<Array2<T>> {
        validate_subset(x, positions)?;
        Ok(self.forward_cached(x).0)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> (Array2<T>, SsmCache<T>) {
        let u = self.in_proj.forward(x);
        let gate_pre = self.gate_proj.as_ref().map(|g| g.forward(x));
        let delta_pre = self.delta_proj.forward(x);
        let delta = delta_pre.mapv(softplus);
        let b = self.b_proj.forward(x);
        let c = self.c_proj.forward(x);
        let a = self.state_matrix();

        let (y, scan) = selective_scan(u.view(), delta.view(), a.view(), b.view(), c.view());
        let gated = match &gate_pre {
            Some(z) => {
                let mut g = y.clone();
                Zip::from(&mut g).and(z).for_each(|g, &z| *g = *g * silu(z));
                g
            }
            None => y.clone(),
        };
        let out = self.out_proj.forward(gated.view());
        let cache = SsmCache { x: x.to_owned(), u, gate_pre, delta_pre, delta, b, c, y, gated, scan };
        (out, cache)
    }

    pub fn backward(&self, cache: &SsmCache<T>, dy: ArrayView2<T>, grad: &mut Ssm<T>) -> Array2<T> {
        let d_gated = self.out_proj.backward(cache.gated.view(), dy, &mut grad.out_proj);
        let x = cache.x.view();

        let mut dx = Array2::zeros(cache.x.raw_dim());
        let d_scan_out = match (&cache.gate_pre, &self.gate_proj, grad.gate_proj.as_mut()) {
            (Some(z), Some(gate), Some(g_gate)) => {
                let mut dz = Array2::zeros(z.raw_dim());
                Zip::from(&mut dz)
                    .and(&d_gated)
                    .and(&cache.y)
                    .and(z)
                    .for_each(|dz, &dg, &y, &z| *dz = dg * y * silu_grad(z));
                dx += &gate.backward(x, dz.view(), g_gate);
                let mut dyv = d_gated.clone();
                Zip::from(&mut dyv).and(z).for_each(|d, &z| *d = *d * silu(z));
                dyv
            }
            _ => d_gated,
        };

        let a = self.state_matrix();
        let grads = selective_scan_backward(
            &cache.scan,
            cache.u.view(),
            cache.delta.view(),
            a.view(),
            cache.b.view(),
            cache.c.view(),
            d_scan_out.view(),
        );

        // dA/d(a_log) = A
        Zip::from(&mut grad.a_log)
            .and(&grads.a)
            .and(&a)
            .for_each(|g, &da, &av| *g = *g + da * av);

        let mut d_delta_pre = grads.delta;
        Zip::from(&mut d_delta_pre).and(&cache.delta_pre).for_each(|d, &p| *d = *d * sigmoid(p));

        dx += &self.in_proj.backward(x, grads.u.view(), &mut grad.in_proj);
        dx += &self.delta_proj.backward(x, d_delta_pre.view(), &mut grad.delta_proj);
        dx += &self.b_proj.backward(x, grads.b.view(), &mut grad.b_proj);
        dx += &self.c_proj.backward(x, grads.c.view(), &mut grad.c_proj);
        dx
    }
}

impl<T: Scalar> Parameters<T> for Ssm<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out: Vec<_> = nest("in_proj", self.in_proj.params()).collect();
        if let Some(g) = &self.gate_proj {
            out.extend(nest("gate_proj", g.params()));
        }
        out.extend(nest("delta_proj", self.delta_proj.params()));
        out.extend(nest("b_proj", self.b_proj.params()));
        out.extend(nest("c_proj", self.c_proj.params()));
        out.push(("a_log".into(), self.a_log.view().into_dyn()));
        out.extend(nest("out_proj", self.out_proj.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out: Vec<_> = nest("in_proj", self.in_proj.params_mut()).collect();
        if let Some(g) = &mut self.gate_proj {
            out.extend(nest("gate_proj", g.params_mut()));
        }
        out.extend(nest("delta_proj", self.delta_proj.params_mut()));
        out.extend(nest("b_proj", self.b_proj.params_mut()));
        out.extend(nest("c_proj", self.c_proj.params_mut()));
        out.push(("a_log".into(), self.a_log.view_mut().into_dyn()));
        out.extend(nest("out_proj", self.out_proj.params_mut()));
        out
    }
}

/// Sequential selective scan.
///
/// Shapes: `u`, `delta` are `n x d_inner`; `a` is `d_inner x d_state`;
/// `b`, `c` are `n x d_state`. Returns `y` (`n x d_inner`).
pub fn selective_scan<T: Scalar>(
    u: ArrayView2<T>,
    delta: ArrayView2<T>,
    a: ArrayView2<T>,
    b: ArrayView2<T>,
    c: ArrayView2<T>,
) -> (Array2<T>, ScanCache<T>) {
    let (n, di) = u.dim();
    let ds = a.ncols();
    let width = di * ds;
    let (u, delta, a, b, c) = (
        u.as_standard_layout(),
        delta.as_standard_layout(),
        a.as_standard_layout(),
        b.as_standard_layout(),
        c.as_standard_layout(),
    );
    let (u, delta, a, b, c) = (slice(&u), slice(&delta), slice(&a), slice(&b), slice(&c));

    let mut decay = vec![T::zero(); n * width];
    let mut states = vec![T::zero(); n * width];
    let mut y = vec![T::zero(); n * di];

    for t in 0..n {
        let (done, rest) = states.split_at_mut(t * width);
        let prev = if t == 0 { None } else { Some(&done[(t - 1) * width..]) };
        let cur = &mut rest[..width];
        let dec = &mut decay[t * width..(t + 1) * width];
        let b_t = &b[t * ds..(t + 1) * ds];
        let c_t = &c[t * ds..(t + 1) * ds];
        let y_t = &mut y[t * di..(t + 1) * di];
        for ch in 0..di {
            let dt = delta[t * di + ch];
            let du = dt * u[t * di + ch];
            let k = ch * ds..(ch + 1) * ds;
            let (a_ch, dec_ch, cur_ch) = (&a[k.clone()], &mut dec[k.clone()], &mut cur[k.clone()]);
            for ((d, &av), h) in dec_ch.iter_mut().zip(a_ch).zip(cur_ch.iter_mut()) {
                *d = (dt * av).exp();
                *h = T::zero();
            }
            if let Some(p) = prev {
                for ((h, &d), &hp) in cur_ch.iter_mut().zip(dec_ch.iter()).zip(&p[k]) {
                    *h = d * hp;
                }
            }
            let mut acc = T::zero();
            for ((h, &bs), &cs) in cur_ch.iter_mut().zip(b_t).zip(c_t) {
                *h += du * bs;
                acc += cs * *h;
            }
            y_t[ch] = acc;
        }
    }
    let y = Array2::from_shape_vec((n, di), y).expect("scan output shape");
    (y, ScanCache { decay, states })
}

fn slice<'a, T>(a: &'a ndarray::CowArray<'_, T, ndarray::Ix2>) -> &'a [T] {
    a.as_slice().expect("standard layout")
}

pub struct ScanGrads<T> {
    pub u: Array2<T>,
    pub delta: Array2<T>,
    pub a: Array2<T>,
    pub b: Array2<T>,
    pub c: Array2<T>,
}

pub fn selective_scan_backward<T: Scalar>(
    cache: &ScanCache<T>,
    u: ArrayView2<T>,
    delta: ArrayView2<T>,
    a: ArrayView2<T>,
    b: ArrayView2<T>,
    c: ArrayView2<T>,
    dy: ArrayView2<T>,
) -> ScanGrads<T> {
    let (n, di) = u.dim();
    let ds = a.ncols();
    let width = di * ds;
    let (u, delta, a, b, c, dy) = (
        u.as_standard_layout(),
        delta.as_standard_layout(),
        a.as_standard_layout(),
        b.as_standard_layout(),
        c.as_standard_layout(),
        dy.as_standard_layout(),
    );
    let (u, delta, a, b, c, dy) = (slice(&u), slice(&delta), slice(&a), slice(&b), slice(&c), slice(&dy));

    let mut gu = vec![T::zero(); n * di];
    let mut gdelta = vec![T::zero(); n * di];
    let mut gb = vec![T::zero(); n * ds];
    let mut gc = vec![T::zero(); n * ds];
    let mut ga = vec![T::zero(); width];
    // dL/dh_t carried backwards through the decay
    let mut dh = vec![T::zero(); width];
    let zeros = vec![T::zero(); width];

    for t in (0..n).rev() {
        let h_t = &cache.states[t * width..(t + 1) * width];
        let h_prev = if t == 0 { &zeros[..] } else { &cache.states[(t - 1) * width..t * width] };
        let dec = &cache.decay[t * width..(t + 1) * width];
        let b_t = &b[t * ds..(t + 1) * ds];
        let c_t = &c[t * ds..(t + 1) * ds];
        let gb_t = &mut gb[t * ds..(t + 1) * ds];
        let gc_t = &mut gc[t * ds..(t + 1) * ds];
        for ch in 0..di {
            let dt = delta[t * di + ch];
            let ut = u[t * di + ch];
            let dy_tc = dy[t * di + ch];
            let (mut d_u, mut d_dt) = (T::zero(), T::zero());
            let k = ch * ds..(ch + 1) * ds;
            let rows = h_t[k.clone()]
                .iter()
                .zip(&h_prev[k.clone()])
                .zip(&dec[k.clone()])
                .zip(&a[k.clone()])
                .zip(dh[k.clone()].iter_mut())
                .zip(ga[k].iter_mut());
            for (s, (((((&h, &hp), &d), &av), dh_k), ga_k)) in rows.enumerate() {
                gc_t[s] += dy_tc * h;
                // dh already holds the contribution from step t + 1
                let g_h = *dh_k + dy_tc * c_t[s];
                let da_exp = g_h * hp * d;
                d_dt += da_exp * av + g_h * ut * b_t[s];
                *ga_k += da_exp * dt;
                d_u += g_h * dt * b_t[s];
                gb_t[s] += g_h * dt * ut;
                *dh_k = g_h * d;
            }
            gu[t * di + ch] = d_u;
            gdelta[t * di + ch] = d_dt;
        }
    }
    let shaped = |rows, cols, v| Array2::from_shape_vec((rows, cols), v).expect("scan gradient shape");
    ScanGrads {
        u: shaped(n, di, gu),
        delta: shaped(n, di, gdelta),
        a: shaped(di, ds, ga),
        b: shaped(n, ds, gb),
        c: shaped(n, ds, gc),
    }
}
