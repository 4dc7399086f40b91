//! Independent oracles shared by the integration tests. Nothing here calls
//! into the implementation's forward code paths; the naive loops only read
//! parameter values.

#![allow(dead_code)]

pub mod corpus;

use flowhn_core::branches::{Attention, Ssm};
use flowhn_core::lanes::{ExecMode, Lanes};
use flowhn_core::{LanguageModel, ModelConfig, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counts scalar multiply-adds performed by the naive oracles.
#[derive(Default, Debug)]
pub struct MacCounter(pub u64);

impl MacCounter {
    fn mac(&mut self, acc: f64, a: f64, b: f64) -> f64 {
        self.0 += 1;
        acc + a * b
    }
}

fn naive_affine(x: &[f64], w: &ndarray::Array2<f64>, b: &ndarray::Array1<f64>, n: &mut MacCounter) -> Vec<f64> {
    (0..w.ncols())
        .map(|o| {
            let mut acc = b[o];
            for (i, &xi) in x.iter().enumerate() {
                acc = n.mac(acc, xi, w[[i, o]]);
            }
            acc
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Per-step loop evaluation of the SSM branch in double precision.
pub fn naive_ssm(ssm: &Ssm<f64>, x: &[Vec<f64>], counter: &mut MacCounter) -> Vec<Vec<f64>> {
    let di = ssm.a_log.nrows();
    let ds = ssm.a_log.ncols();
    let mut h = vec![vec![0.0; ds]; di];
    let mut out = Vec::new();
    for xt in x {
        let u = naive_affine(xt, &ssm.in_proj.weight, &ssm.in_proj.bias, counter);
        let gate = ssm.gate_proj.as_ref().map(|g| naive_affine(xt, &g.weight, &g.bias, counter));
        let delta: Vec<f64> = naive_affine(xt, &ssm.delta_proj.weight, &ssm.delta_proj.bias, counter)
            .into_iter()
            .map(softplus)
            .collect();
        let b = naive_affine(xt, &ssm.b_proj.weight, &ssm.b_proj.bias, counter);
        let c = naive_affine(xt, &ssm.c_proj.weight, &ssm.c_proj.bias, counter);
        let mut y = vec![0.0; di];
        for ch in 0..di {
            for s in 0..ds {
                let a = -ssm.a_log[[ch, s]].exp();
                let decay = (delta[ch] * a).exp();
                let decayed = counter.mac(0.0, decay, h[ch][s]);
                h[ch][s] = counter.mac(decayed, delta[ch] * u[ch], b[s]);
                y[ch] = counter.mac(y[ch], c[s], h[ch][s]);
            }
            if let Some(g) = &gate {
                y[ch] *= silu(g[ch]);
            }
        }
        out.push(naive_affine(&y, &ssm.out_proj.weight, &ssm.out_proj.bias, counter));
    }
    out
}

/// Dense (compute-all-then-mask) causal attention over a subset.
pub fn naive_attention(attn: &Attention<f64>, x: &[Vec<f64>], counter: &mut MacCounter) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = attn.query.weight.nrows();
    let hd = d / attn.n_heads;
    let proj = |l: &flowhn_core::nn::Linear<f64>, c: &mut MacCounter| -> Vec<Vec<f64>> {
        x.iter().map(|xt| naive_affine(xt, &l.weight, &l.bias, c)).collect()
    };
    let q = proj(&attn.query, counter);
    let k = proj(&attn.key, counter);
    let v = proj(&attn.value, counter);
    let mut ctx = vec![vec![0.0; d]; n];
    for h in 0..attn.n_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for (j, sc) in scores.iter_mut().enumerate() {
                for c in cols.clone() {
                    *sc = counter.mac(*sc, q[i][c], k[j][c]);
                }
                *sc /= (hd as f64).sqrt();
            }
            let max = scores[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = (0..n).map(|j| if j <= i { (scores[j] - max).exp() } else { 0.0 }).collect();
            let z: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                for c in cols.clone() {
                    ctx[i][c] = counter.mac(ctx[i][c], w / z, v[j][c]);
                }
            }
        }
    }
    ctx.iter().map(|c| naive_affine(c, &attn.output.weight, &attn.output.bias, counter)).collect()
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn to_array(rows: &[Vec<f64>]) -> ndarray::Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    ndarray::Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// Multiplies every parameter except `a_log` by a factor drawn from `[lo, hi)`
/// so tests run in a strongly nonlinear regime instead of near the 0.02 init.
pub fn scramble<T: Parameters<f64>>(module: &mut T, seed: u64, lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, mut t) in module.params_mut() {
        if name.ends_with("a_log") {
            continue;
        }
        for v in t.iter_mut() {
            let noise: f64 = rng.random_range(-0.3..0.3);
            *v = *v * rng.random_range(lo..hi) + noise;
        }
    }
}

/// Relative error `||a - b|| / max(||a||, ||b||)`; tensors whose gradients
/// are both below `floor` count as matching.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < floor {
        0.0
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `loss` with respect to each parameter
/// tensor of `model`, compared with `analytic`. Returns `(name, rel_err)`.
pub fn fd_compare<M, F>(model: &M, analytic: &M, h: f64, loss: F) -> Vec<(String, f64)>
where
    M: Parameters<f64> + Clone,
    F: Fn(&M) -> f64,
{
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = analytic.params().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let mut out = Vec::new();
    let mut probe = model.clone();
    for (ti, name) in names.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic[ti].len());
        for ei in 0..analytic[ti].len() {
            let mut eval = |delta: f64| {
                let original = {
                    let mut ps = probe.params_mut();
                    let v = ps[ti].1.iter_mut().nth(ei).unwrap();
                    let o = *v;
                    *v = o + delta;
                    o
                };
                let l = loss(&probe);
                let mut ps = probe.params_mut();
                *ps[ti].1.iter_mut().nth(ei).unwrap() = original;
                l
            };
            let plus = eval(h);
            let minus = eval(-h);
            numeric.push((plus - minus) / (2.0 * h));
        }
        out.push((name.clone(), relative_error(&analytic[ti], &numeric, 1e-9)));
    }
    out
}

/// Small double-precision model used by the gradient checks.
pub fn gradcheck_config(mode: flowhn_core::SplitMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 4,
        n_heads: 2,
        d_inner: 6,
        d_state: 3,
        n_blocks: 3,
        seq_len: 6,
        split_mode: mode,
        exec_mode: ExecMode::Serial,
        ffn: true,
        seed: 17,
    }
}

/// Worst per-tensor relative error of the full-model gradient for `mode`.
pub fn model_gradcheck(mode: flowhn_core::SplitMode) -> Vec<(String, f64)> {
    let mut model = LanguageModel::<f64>::new(gradcheck_config(mode)).unwrap();
    scramble(&mut model, 5, 2.0, 12.0);
    let window = [3usize, 7, 1, 10, 0, 4, 9];
    let lanes = Lanes::new(ExecMode::Serial);
    let (_, grad) = model.loss_and_grad(&window, &lanes).unwrap();
    fd_compare(&model, &grad, 1e-5, |m| m.window_loss(&window, &lanes).unwrap())
}

/// Widths, state sizes and lengths spanning the desk-scale configurations.
pub fn desk_matrix() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for (d, heads) in [(32, 2), (64, 4), (96, 4), (128, 8)] {
        for inner_mult in [1, 2] {
            for d_state in [4, 8, 16, 32] {
                for seq_len in [16, 64, 128, 256, 512] {
                    out.push(ModelConfig {
                        d_model: d,
                        n_heads: heads,
                        d_inner: d * inner_mult,
                        d_state,
                        seq_len,
                        ..Default::default()
                    });
                }
            }
        }
    }
    out
}
