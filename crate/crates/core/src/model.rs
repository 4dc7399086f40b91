//! Byte-level autoregressive language model built from parallel blocks.

use ndarray::{s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{BlockCache, ParallelBlock};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flops::FlopProfile;
use crate::lanes::Lanes;
use crate::nn::{normal_matrix, LayerNorm, LayerNormCache};
use crate::params::{nest, ParameterStore, Parameters};
use crate::router::{self, SplitMode, SplitPlan};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel<T> {
    config: ModelConfig,
    /// Token embedding, also used (transposed) as the output head.
    pub tok_emb: Array2<T>,
    /// Learned absolute positions, `seq_len x d`.
    pub pos_emb: Array2<T>,
    pub blocks: Vec<ParallelBlock<T>>,
    pub norm_f: LayerNorm<T>,
}

pub struct ForwardCache<T> {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
    norm_f: LayerNormCache<T>,
    hidden: Array2<T>,
    logits: Array2<T>,
}

impl<T> ForwardCache<T> {
    pub fn logits(&self) -> &Array2<T> {
        &self.logits
    }

    /// Plans used by each block, in block order.
    pub fn plans(&self) -> impl Iterator<Item = &SplitPlan> {
        self.blocks.iter().map(|b| b.plan())
    }
}

impl<T: Scalar> LanguageModel<T> {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let tok_emb = normal_matrix(config.vocab_size, d, &mut rng);
        let pos_emb = normal_matrix(config.seq_len, d, &mut rng);
        let blocks = (0..config.n_blocks).map(|_| ParallelBlock::new(&config, &mut rng)).collect();
        Ok(Self { norm_f: LayerNorm::new(d), tok_emb, pos_emb, blocks, config })
    }

    pub fn from_store(config: ModelConfig, store: &ParameterStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        store.load_into(&mut model)?;
        Ok(model)
    }

    pub fn to_store(&self) -> ParameterStore<T> {
        ParameterStore::from_module(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> LanguageModel<U> {
        LanguageModel::from_store(self.config.clone(), &self.to_store().cast())
            .expect("same config yields same parameter layout")
    }

    /// Per-block split plans for a sequence of `n` tokens; block `i` gets
    /// `block_index = i`. A single token cannot be split and is routed to
    /// both branches.
    pub fn plans(&self, n: usize) -> Result<Vec<SplitPlan>> {
        let mode = if n < 2 { SplitMode::NoSplit } else { self.config.split_mode };
        let block_size = if mode.uses_block_size() { FlopProfile::new(&self.config, n)?.block_size } else { 0 };
        (0..self.config.n_blocks)
            .map(|i| router::plan(mode, n, i, block_size))
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds seq_len {}",
                tokens.len(),
                self.config.seq_len
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// `n x vocab` logits for `tokens`.
    pub fn forward(&self, tokens: &[usize], lanes: &Lanes) -> Result<Array2<T>> {
        Ok(self.forward_cached(tokens, lanes)?.logits)
    }

    pub fn forward_cached(&self, tokens: &[usize], lanes: &Lanes) -> Result<ForwardCache<T>> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let plans = self.plans(n)?;

        let mut x = self.tok_emb.select(Axis(0), tokens);
        x += &self.pos_emb.slice(s![..n, ..]);

        let mut caches = Vec::with_capacity(self.blocks.len());
        for (block, plan) in self.blocks.iter().zip(&plans) {
            let (out, cache) = block.forward_cached(x.view(), plan, lanes)?;
            caches.push(cache);
            x = out;
        }
        let (hidden, norm_f) = self.norm_f.forward_cached(x.view());
        let logits = hidden.dot(&self.tok_emb.t());
        Ok(ForwardCache { tokens: tokens.to_vec(), blocks: caches, norm_f, hidden, logits })
    }

    /// Gradients of the loss with respect to every parameter, given
    /// `d_logits` (`n x vocab`).
    pub fn backward(&self, cache: &ForwardCache<T>, d_logits: ArrayView2<T>, lanes: &Lanes) -> Self {
        let mut grad = self.zeros_like();
        let n = cache.tokens.len();

        // tied head: logits = h E^T
        grad.tok_emb += &d_logits.t().dot(&cache.hidden);
        let d_hidden = d_logits.dot(&self.tok_emb);
        let mut dx = self.norm_f.backward(&cache.norm_f, d_hidden.view(), &mut grad.norm_f);

        for ((block, bc), g) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            dx = block.backward(bc, dx.view(), g, lanes);
        }

        for (row, &tok) in dx.rows().into_iter().zip(&cache.tokens) {
            let mut dst = grad.tok_emb.row_mut(tok);
            dst += &row;
        }
        let mut pos = grad.pos_emb.slice_mut(s![..n, ..]);
        pos += &dx;
        grad
    }

    /// Mean next-token cross-entropy of `tokens[1..]` given `tokens[..n-1]`,
    /// and its gradient.
    pub fn loss_and_grad(&self, window: &[usize], lanes: &Lanes) -> Result<(T, Self)> {
        let (inputs, targets) = split_window(window)?;
        let cache = self.forward_cached(inputs, lanes)?;
        let (loss, d_logits) = cross_entropy_with_grad(cache.logits.view(), targets)?;
        Ok((loss, self.backward(&cache, d_logits.view(), lanes)))
    }

    pub fn window_loss(&self, window: &[usize], lanes: &Lanes) -> Result<T> {
        let (inputs, targets) = split_window(window)?;
        let logits = self.forward(inputs, lanes)?;
        cross_entropy(logits.view(), targets)
    }

    /// Greedy continuation of `prompt` by `steps` tokens, keeping at most
    /// `seq_len` tokens of context.
    pub fn greedy_decode(&self, prompt: &[usize], steps: usize, lanes: &Lanes) -> Result<Vec<usize>> {
        let mut out = prompt.to_vec();
        for _ in 0..steps {
            let start = out.len().saturating_sub(self.config.seq_len);
            let logits = self.forward(&out[start..], lanes)?;
            let last = logits.row(logits.nrows() - 1);
            let next = last
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            out.push(next);
        }
        Ok(out)
    }
}

fn split_window(window: &[usize]) -> Result<(&[usize], &[usize])> {
    if window.len() < 2 {
        return Err(Error::InvalidArgument("a training window needs at least 2 tokens".into()));
    }
    Ok((&window[..window.len() - 1], &window[1..]))
}

impl<T: Scalar> Parameters<T> for LanguageModel<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(nest(&format!("blocks.{i}"), b.params()).collect::<Vec<_>>());
        }
        out.extend(nest("norm_f", self.norm_f.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(nest(&format!("blocks.{i}"), b.params_mut()).collect::<Vec<_>>());
        }
        out.extend(nest("norm_f", self.norm_f.params_mut()));
        out
    }
}

/// Mean cross-entropy (natural log) of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy<T: Scalar>(logits: ArrayView2<T>, targets: &[usize]) -> Result<T> {
    Ok(cross_entropy_with_grad(logits, targets)?.0)
}

/// Loss and `dL/dlogits`.
pub fn cross_entropy_with_grad<T: Scalar>(logits: ArrayView2<T>, targets: &[usize]) -> Result<(T, Array2<T>)> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.nrows(), targets.len())));
    }
    let vocab = logits.ncols();
    if let Some(&id) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    let m = lit::<T>(targets.len() as f64);
    let mut total = T::zero();
    let mut grad = logits.to_owned();
    for ((mut row, logit_row), &t) in grad.rows_mut().into_iter().zip(logits.rows()).zip(targets) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        total = total + z.ln() - (logit_row[t] - max);
        row.mapv_inplace(|v| v / z / m);
        row[t] = row[t] - m.recip();
    }
    Ok((total / m, grad))
}

/// Closed-form parameter count for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    let (v, d, l) = (config.vocab_size, config.d_model, config.seq_len);
    let (di, ds) = (config.d_inner, config.d_state);
    let linear = |i: usize, o: usize| i * o + o;
    let norm = 2 * d;
    let attn = 4 * linear(d, d);
    let ssm = 3 * linear(d, di) + 2 * linear(d, ds) + di * ds + linear(di, d);
    let fusion = linear(2 * d, d);
    let ffn = if config.ffn { norm + linear(d, config.d_ffn()) + linear(config.d_ffn(), d) } else { 0 };
    let block = norm + attn + ssm + fusion + ffn;
    v * d + l * d + config.n_blocks * block + norm
}
