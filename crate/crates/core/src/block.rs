//! One parallel hybrid block.
//!
//! ```text
//! u   = norm1(x)
//! s   = SSM(u[ssm_indices]),  a = Attention(u[attn_indices])   (two lanes)
//! z   = scatter_merge(s, a)                                     (L x 2d)
//! y   = x + z W_f + b_f
//! out = y + FFN(norm2(y))                                       (optional)
//! ```

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

use crate::branches::attention::check_finite;
use crate::branches::{Attention, AttentionCache, Ssm, SsmCache};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lanes::Lanes;
use crate::nn::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
use crate::params::{nest, Parameters};
use crate::router::{gather, scatter_merge, split_merged, SplitPlan};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub norm: LayerNorm<T>,
    pub up: Linear<T>,
    pub down: Linear<T>,
}

struct FfnCache<T> {
    norm: LayerNormCache<T>,
    normed: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Scalar> FeedForward<T> {
    fn forward_cached(&self, y: ArrayView2<T>) -> (Array2<T>, FfnCache<T>) {
        let (normed, norm) = self.norm.forward_cached(y);
        let hidden_pre = self.up.forward(normed.view());
        let hidden = hidden_pre.mapv(gelu);
        let out = self.down.forward(hidden.view());
        (out, FfnCache { norm, normed, hidden_pre, hidden })
    }

    fn backward(&self, cache: &FfnCache<T>, dy: ArrayView2<T>, grad: &mut FeedForward<T>) -> Array2<T> {
        let mut dh = self.down.backward(cache.hidden.view(), dy, &mut grad.down);
        Zip::from(&mut dh).and(&cache.hidden_pre).for_each(|g, &p| *g = *g * gelu_grad(p));
        let dn = self.up.backward(cache.normed.view(), dh.view(), &mut grad.up);
        self.norm.backward(&cache.norm, dn.view(), &mut grad.norm)
    }
}

impl<T: Scalar> Parameters<T> for FeedForward<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        nest("norm", self.norm.params())
            .chain(nest("up", self.up.params()))
            .chain(nest("down", self.down.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        nest("norm", self.norm.params_mut())
            .chain(nest("up", self.up.params_mut()))
            .chain(nest("down", self.down.params_mut()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelBlock<T> {
    pub norm: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ssm: Ssm<T>,
    /// `2d -> d`; rows `[0, d)` read the SSM half, rows `[d, 2d)` the attention half.
    pub fusion: Linear<T>,
    pub ffn: Option<FeedForward<T>>,
}

pub struct BlockCache<T> {
    plan: SplitPlan,
    norm: LayerNormCache<T>,
    ssm: Option<SsmCache<T>>,
    attn: Option<AttentionCache<T>>,
    fused_in: Array2<T>,
    ffn: Option<FfnCache<T>>,
}

impl<T> BlockCache<T> {
    pub fn plan(&self) -> &SplitPlan {
        &self.plan
    }

    /// The `L x 2d` fusion input.
    pub fn fusion_input(&self) -> &Array2<T> {
        &self.fused_in
    }
}

impl<T: Scalar> ParallelBlock<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let norm = LayerNorm::new(d);
        let attn = Attention::new(config.attention_shape(), rng);
        let ssm = Ssm::new(config.ssm_shape(), rng);
        let fusion = Linear::new(2 * d, d, rng);
        let ffn = config.ffn.then(|| FeedForward {
            norm: LayerNorm::new(d),
            up: Linear::new(d, config.d_ffn(), rng),
            down: Linear::new(config.d_ffn(), d, rng),
        });
        Self { norm, attn, ssm, fusion, ffn }
    }

    pub fn d_model(&self) -> usize {
        self.fusion.d_out()
    }

    pub fn forward(&self, x: ArrayView2<T>, plan: &SplitPlan, lanes: &Lanes) -> Result<Array2<T>> {
        Ok(self.forward_cached(x, plan, lanes)?.0)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>, plan: &SplitPlan, lanes: &Lanes) -> Result<(Array2<T>, BlockCache<T>)> {
        let d = self.d_model();
        if x.nrows() != plan.seq_len || x.ncols() != d {
            return Err(Error::Shape(format!(
                "block input is {}x{}, plan expects {}x{d}",
                x.nrows(),
                x.ncols(),
                plan.seq_len
            )));
        }
        check_finite(x, "block input")?;

        let (u, norm) = self.norm.forward_cached(x);
        let ssm_in = gather(u.view(), &plan.ssm_indices);
        let attn_in = gather(u.view(), &plan.attn_indices);
        let (ssm_res, attn_res) = lanes.join(
            || (!plan.ssm_indices.is_empty()).then(|| self.ssm.forward_cached(ssm_in.view())),
            || (!plan.attn_indices.is_empty()).then(|| self.attn.forward_cached(attn_in.view())),
        );
        let (ssm_out, ssm_cache) = unzip_branch(ssm_res, d);
        let (attn_out, attn_cache) = unzip_branch(attn_res, d);

        let fused_in = scatter_merge(plan, ssm_out.view(), attn_out.view(), d)?;
        let mut y = self.fusion.forward(fused_in.view());
        y += &x;

        let (out, ffn_cache) = match &self.ffn {
            Some(ffn) => {
                let (f, c) = ffn.forward_cached(y.view());
                (y + f, Some(c))
            }
            None => (y, None),
        };

        let cache = BlockCache {
            plan: plan.clone(),
            norm,
            ssm: ssm_cache,
            attn: attn_cache,
            fused_in,
            ffn: ffn_cache,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, cache: &BlockCache<T>, d_out: ArrayView2<T>, grad: &mut ParallelBlock<T>, lanes: &Lanes) -> Array2<T> {
        let d = self.d_model();

        let dy = match (&self.ffn, &cache.ffn, grad.ffn.as_mut()) {
            (Some(ffn), Some(fc), Some(g)) => {
                let mut dy = ffn.backward(fc, d_out, g);
                dy += &d_out;
                dy
            }
            _ => d_out.to_owned(),
        };

        let dz = self.fusion.backward(cache.fused_in.view(), dy.view(), &mut grad.fusion);
        let (d_ssm, d_attn) = split_merged(&cache.plan, dz.view(), d);

        let ParallelBlock { ssm: g_ssm, attn: g_attn, .. } = grad;
        let (du_ssm, du_attn) = lanes.join(
            || cache.ssm.as_ref().map(|c| self.ssm.backward(c, d_ssm.view(), g_ssm)),
            || cache.attn.as_ref().map(|c| self.attn.backward(c, d_attn.view(), g_attn)),
        );

        let mut du = Array2::zeros((cache.plan.seq_len, d));
        for (rows, idx) in [(du_ssm, &cache.plan.ssm_indices), (du_attn, &cache.plan.attn_indices)] {
            if let Some(rows) = rows {
                for (row, &p) in rows.axis_iter(Axis(0)).zip(idx.iter()) {
                    let mut dst = du.row_mut(p);
                    dst += &row;
                }
            }
        }

        let mut dx = self.norm.backward(&cache.norm, du.view(), &mut grad.norm);
        dx += &dy;
        dx
    }
}

fn unzip_branch<T: Scalar, C>(res: Option<(Array2<T>, C)>, d: usize) -> (Array2<T>, Option<C>) {
    match res {
        Some((out, cache)) => (out, Some(cache)),
        None => (Array2::zeros((0, d)), None),
    }
}

impl<T: Scalar> Parameters<T> for ParallelBlock<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out: Vec<_> = nest("norm", self.norm.params())
            .chain(nest("attn", self.attn.params()))
            .chain(nest("ssm", self.ssm.params()))
            .chain(nest("fusion", self.fusion.params()))
            .collect();
        if let Some(ffn) = &self.ffn {
            out.extend(nest("ffn", ffn.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out: Vec<_> = nest("norm", self.norm.params_mut())
            .chain(nest("attn", self.attn.params_mut()))
            .chain(nest("ssm", self.ssm.params_mut()))
            .chain(nest("fusion", self.fusion.params_mut()))
            .collect();
        if let Some(ffn) = &mut self.ffn {
            out.extend(nest("ffn", ffn.params_mut()));
        }
        out
    }
}
