//! Transformer building blocks with explicit forward/backward passes.
//!
//! Everything is f64 and deterministic. Backward passes write parameter
//! gradients into mirror structs so the optimizer and gradient checks can
//! walk parameters generically.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// y = x . w + b with w laid out [in, out].
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Affine {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Affine {
            w: Array2::zeros((n_in, n_out)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn init(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, std: f64) -> Self {
        Affine {
            w: gaussian2(rng, n_in, n_out, std),
            b: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn forward_row(&self, x: &Array1<f64>) -> Array1<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates dW/db into `grad` and returns dx.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Affine) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

/// Box-Muller gaussian array; avoids pulling a distributions dependency here.
pub fn gaussian2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * standard_normal(rng))
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *istd = 1.0 / (var + LN_EPS).sqrt();
            row *= *istd;
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn forward_row(&self, x: &Array1<f64>) -> Array1<f64> {
        let d = x.len() as f64;
        let mean = x.sum() / d;
        let centered = x - mean;
        let var = centered.iter().map(|v| v * v).sum::<f64>() / d;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        centered * inv_std * &self.gain + &self.bias
    }

    pub fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &LayerNormCache,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let dy_row = dy.row(i);
            let xhat = cache.xhat.row(i);
            let inv_std = cache.inv_std[i];
            let dxhat: Vec<f64> = dy_row
                .iter()
                .zip(self.gain.iter())
                .map(|(dy, g)| dy * g)
                .collect();
            let mean_dxhat = dxhat.iter().sum::<f64>() / d;
            let mean_dxhat_xhat = dxhat
                .iter()
                .zip(xhat.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / d;
            for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                *out = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

/// One pre-norm decoder block: causal self-attention and a GELU feed-forward,
/// each with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Affine,
    pub wk: Affine,
    pub wv: Affine,
    pub wo: Affine,
    pub ln2: LayerNorm,
    pub ffn1: Affine,
    pub ffn2: Affine,
}

impl Block {
    pub fn init(rng: &mut ChaCha8Rng, d_model: usize, ffn_dim: usize, std: f64) -> Self {
        Block {
            ln1: LayerNorm::identity(d_model),
            wq: Affine::init(rng, d_model, d_model, std),
            wk: Affine::init(rng, d_model, d_model, std),
            wv: Affine::init(rng, d_model, d_model, std),
            wo: Affine::init(rng, d_model, d_model, std),
            ln2: LayerNorm::identity(d_model),
            ffn1: Affine::init(rng, d_model, ffn_dim, std),
            ffn2: Affine::init(rng, ffn_dim, d_model, std),
        }
    }

    pub fn zeros(d_model: usize, ffn_dim: usize) -> Self {
        Block {
            ln1: LayerNorm::zeros(d_model),
            wq: Affine::zeros(d_model, d_model),
            wk: Affine::zeros(d_model, d_model),
            wv: Affine::zeros(d_model, d_model),
            wo: Affine::zeros(d_model, d_model),
            ln2: LayerNorm::zeros(d_model),
            ffn1: Affine::zeros(d_model, ffn_dim),
            ffn2: Affine::zeros(ffn_dim, d_model),
        }
    }
}

pub struct BlockCache {
    ln1_cache: LayerNormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2_cache: LayerNormCache,
    h2: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
}

pub fn block_forward(x: &Array2<f64>, p: &Block, heads: usize) -> (Array2<f64>, BlockCache) {
    let s_len = x.nrows();
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (h1, ln1_cache) = p.ln1.forward(x);
    let q = p.wq.forward(&h1);
    let k = p.wk.forward(&h1);
    let v = p.wv.forward(&h1);

    let mut ctx = Array2::<f64>::zeros((s_len, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        // Causal softmax over each row's prefix.
        let mut ph = Array2::<f64>::zeros((s_len, s_len));
        for i in 0..s_len {
            let row = scores.row(i);
            let m = row
                .iter()
                .take(i + 1)
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..=i {
                let e = (row[j] - m).exp();
                ph[[i, j]] = e;
                denom += e;
            }
            for j in 0..=i {
                ph[[i, j]] /= denom;
            }
        }
        let ctx_h = ph.dot(&vh);
        ctx.slice_mut(cols).assign(&ctx_h);
        probs.push(ph);
    }
    let attn_out = p.wo.forward(&ctx);
    let a = x + &attn_out;

    let (h2, ln2_cache) = p.ln2.forward(&a);
    let f1 = p.ffn1.forward(&h2);
    let g = f1.mapv(gelu);
    let f2 = p.ffn2.forward(&g);
    let y = &a + &f2;

    (
        y,
        BlockCache {
            ln1_cache,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2_cache,
            h2,
            f1,
            g,
        },
    )
}

pub fn block_backward(
    dy: &Array2<f64>,
    cache: &BlockCache,
    p: &Block,
    grad: &mut Block,
    heads: usize,
) -> Array2<f64> {
    let s_len = dy.nrows();
    let d = dy.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // FFN path.
    let dg = p.ffn2.backward(&cache.g, dy, &mut grad.ffn2);
    let df1 = &dg * &cache.f1.mapv(gelu_grad);
    let dh2 = p.ffn1.backward(&cache.h2, &df1, &mut grad.ffn1);
    let mut da = p.ln2.backward(&dh2, &cache.ln2_cache, &mut grad.ln2);
    da += dy;

    // Attention path.
    let dctx = p.wo.backward(&cache.ctx, &da, &mut grad.wo);
    let mut dq = Array2::<f64>::zeros((s_len, d));
    let mut dk = Array2::<f64>::zeros((s_len, d));
    let mut dv = Array2::<f64>::zeros((s_len, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let ph = &cache.probs[h];
        let vh = cache.v.slice(cols);
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let dctx_h = dctx.slice(cols);

        let dp = dctx_h.dot(&vh.t());
        dv.slice_mut(cols).assign(&ph.t().dot(&dctx_h));
        // Softmax backward; masked positions have p = 0 and contribute nothing.
        let mut dscores = Array2::<f64>::zeros((s_len, s_len));
        for i in 0..s_len {
            let mut dot = 0.0;
            for j in 0..=i {
                dot += dp[[i, j]] * ph[[i, j]];
            }
            for j in 0..=i {
                dscores[[i, j]] = ph[[i, j]] * (dp[[i, j]] - dot);
            }
        }
        dscores *= scale;
        dq.slice_mut(cols).assign(&dscores.dot(&kh));
        dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
    }
    let mut dh1 = p.wq.backward(&cache.h1, &dq, &mut grad.wq);
    dh1 += &p.wk.backward(&cache.h1, &dk, &mut grad.wk);
    dh1 += &p.wv.backward(&cache.h1, &dv, &mut grad.wv);

    let mut dx = p.ln1.backward(&dh1, &cache.ln1_cache, &mut grad.ln1);
    dx += &da;
    dx
}

/// Sinusoidal positional encoding table per the standard transformer recipe.
pub fn sinusoidal_pe(max_len: usize, d_model: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((max_len, d_model));
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
        if d_model % 2 == 1 {
            let i = d_model / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[[pos, 2 * i]] = angle.sin();
        }
    }
    pe
}

/// Per-block key/value store for incremental decoding.
pub struct KvCache {
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    len: usize,
    heads: usize,
}

impl KvCache {
    pub fn new(num_blocks: usize, max_seq: usize, d_model: usize, heads: usize) -> Self {
        KvCache {
            k: (0..num_blocks)
                .map(|_| Array2::zeros((max_seq, d_model)))
                .collect(),
            v: (0..num_blocks)
                .map(|_| Array2::zeros((max_seq, d_model)))
                .collect(),
            len: 0,
            heads,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Push one input row through all blocks, returning the block-stack output
    /// (before any final norm).
    pub fn feed_row(&mut self, x: &Array1<f64>, blocks: &[Block]) -> Result<Array1<f64>> {
        if self.len >= self.k[0].nrows() {
            return Err(Error::Capacity(format!(
                "kv cache capacity {} exceeded",
                self.k[0].nrows()
            )));
        }
        let d = x.len();
        let heads = self.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = self.len;
        let mut x = x.clone();
        for (bi, p) in blocks.iter().enumerate() {
            let h1 = p.ln1.forward_row(&x);
            let q = p.wq.forward_row(&h1);
            let k_row = p.wk.forward_row(&h1);
            let v_row = p.wv.forward_row(&h1);
            self.k[bi].row_mut(t).assign(&k_row);
            self.v[bi].row_mut(t).assign(&v_row);

            let mut ctx = Array1::<f64>::zeros(d);
            for h in 0..heads {
                let span = h * dh..(h + 1) * dh;
                let qh = q.slice(s![span.clone()]);
                let kh = self.k[bi].slice(s![..=t, span.clone()]);
                let vh = self.v[bi].slice(s![..=t, span.clone()]);
                let mut scores = kh.dot(&qh);
                scores *= scale;
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s_val in scores.iter_mut() {
                    *s_val = (*s_val - m).exp();
                    denom += *s_val;
                }
                scores /= denom;
                let ctx_h = scores.dot(&vh);
                ctx.slice_mut(s![span]).assign(&ctx_h);
            }
            let attn_out = p.wo.forward_row(&ctx);
            let a = &x + &attn_out;
            let h2 = p.ln2.forward_row(&a);
            let g = p.ffn1.forward_row(&h2).mapv(gelu);
            let f2 = p.ffn2.forward_row(&g);
            x = a + f2;
        }
        self.len += 1;
        Ok(x)
    }
}

/// Decoupled weight decay Adam.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr_decoder: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_decoder: 1e-3,
            lr_other: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}
