//! Double-precision forward pass and exact reverse-mode gradients with
//! respect to the adapter arrays.

use super::mat::{dot, matmul_nn, matmul_nt, matmul_tn, Mat};
use super::sample::{log_softmax_emittable, softmax_emittable};
use super::{GradientSet, LoraGrad, LoraLayer, PolicyConfig, PolicyParameters};
use crate::error::{Error, Result};
use crate::trajectory::TokenMask;
use crate::vocab::Token;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `h = W0·x + α·up·(down·x)`, without forming the merged matrix.
pub fn lora_forward(layer: &LoraLayer, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.d_in() {
        return Err(Error::Shape(format!("input length {} != d_in {}", x.len(), layer.d_in())));
    }
    let rank = layer.rank();
    let mut down_x = vec![0.0; rank];
    for (r, dx) in down_x.iter_mut().enumerate() {
        let row = &layer.down.data[r * layer.d_in()..(r + 1) * layer.d_in()];
        *dx = row.iter().zip(x).map(|(w, v)| *w as f64 * v).sum();
    }
    let mut h = vec![0.0; layer.d_out()];
    for (o, out) in h.iter_mut().enumerate() {
        let base_row = &layer.base.data[o * layer.d_in()..(o + 1) * layer.d_in()];
        let up_row = &layer.up.data[o * rank..(o + 1) * rank];
        let base: f64 = base_row.iter().zip(x).map(|(w, v)| *w as f64 * v).sum();
        let delta: f64 = up_row.iter().zip(&down_x).map(|(w, v)| *w as f64 * v).sum();
        *out = base + layer.alpha * delta;
    }
    Ok(h)
}

struct Lora64 {
    base: Mat,
    up: Mat,
    down: Mat,
    alpha: f64,
}

impl Lora64 {
    fn new(l: &LoraLayer) -> Self {
        Self {
            base: Mat::from_f32(l.base.rows, l.base.cols, &l.base.data),
            up: Mat::from_f32(l.up.rows, l.up.cols, &l.up.data),
            down: Mat::from_f32(l.down.rows, l.down.cols, &l.down.data),
            alpha: l.alpha,
        }
    }

    /// Returns the output and `x·downᵀ`, which the backward pass reuses.
    fn forward(&self, x: &Mat) -> (Mat, Mat) {
        let xd = matmul_nt(x, &self.down);
        let mut y = matmul_nt(x, &self.base);
        let mut delta = matmul_nt(&xd, &self.up);
        delta.scale(self.alpha);
        y.add_assign(&delta);
        (y, xd)
    }

    fn backward(&self, x: &Mat, xd: &Mat, dy: &Mat, grad: &mut LoraGrad) -> Mat {
        let dyu = matmul_nn(dy, &self.up);
        let mut dx = matmul_nn(dy, &self.base);
        let mut via_adapter = matmul_nn(&dyu, &self.down);
        via_adapter.scale(self.alpha);
        dx.add_assign(&via_adapter);
        let d_up = matmul_tn(dy, xd);
        let d_down = matmul_tn(&dyu, x);
        for (g, v) in grad.up.iter_mut().zip(&d_up.data) {
            *g += self.alpha * v;
        }
        for (g, v) in grad.down.iter_mut().zip(&d_down.data) {
            *g += self.alpha * v;
        }
        dx
    }
}

struct Block64 {
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
    ffn_in: Mat,
    ffn_in_bias: Vec<f64>,
    ffn_out: Mat,
    ffn_out_bias: Vec<f64>,
}

/// Compiled, double-precision view of [`PolicyParameters`].
pub struct Network {
    config: PolicyConfig,
    token_embedding: Mat,
    position_embedding: Mat,
    blocks: Vec<Block64>,
    final_gain: Vec<f64>,
    final_bias: Vec<f64>,
    adapters: Vec<Lora64>,
    /// Scoring temperature: log-probabilities and gradients use `logits / T`.
    temperature: f64,
}

/// Per-position logit rows, `len × V`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Mat);

impl Logits {
    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }
}

struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> (Mat, LnCache) {
    let d = x.cols as f64;
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(s);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * s;
        }
        let yr = y.row_mut(r);
        for c in 0..x.cols {
            yr[c] = xhat.data[r * x.cols + c] * gain[c] + bias[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Mat, gain: &[f64], cache: &LnCache) -> Mat {
    let d = dy.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    let mut dxhat = vec![0.0; dy.cols];
    for r in 0..dy.rows {
        let xh = cache.xhat.row(r);
        for ((g, dyv), gv) in dxhat.iter_mut().zip(dy.row(r)).zip(gain) {
            *g = dyv * gv;
        }
        let mean_d = dxhat.iter().sum::<f64>() / d;
        let mean_dx = dot(&dxhat, xh) / d;
        let s = cache.rstd[r];
        for ((o, g), h) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
            *o = s * (g - mean_d - h * mean_dx);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Causal attention for query rows `q_start..n` over key rows `0..n`.
/// Returns outputs (`(n - q_start) × d`) and per-head probabilities.
fn attention(q: &Mat, k: &Mat, v: &Mat, q_start: usize, n_heads: usize) -> (Mat, Vec<Mat>) {
    let n = k.rows;
    let m = q.rows;
    let d = q.cols;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros(m, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Mat::zeros(m, n);
        for i in 0..m {
            let t = q_start + i;
            let qi = &q.row(i)[cols.clone()];
            let prow = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for u in 0..=t {
                let s = dot(qi, &k.row(u)[cols.clone()]) * scale;
                prow[u] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for pu in prow[..=t].iter_mut() {
                *pu = (*pu - max).exp();
                z += *pu;
            }
            for pu in prow[..=t].iter_mut() {
                *pu /= z;
            }
            let orow = &mut out.row_mut(i)[cols.clone()];
            for u in 0..=t {
                let w = prow[u];
                for (o, vv) in orow.iter_mut().zip(&v.row(u)[cols.clone()]) {
                    *o += w * vv;
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

/// Full-sequence attention backward (`q_start = 0`).
fn attention_backward(dout: &Mat, q: &Mat, k: &Mat, v: &Mat, probs: &[Mat]) -> (Mat, Mat, Mat) {
    let n = q.rows;
    let d = q.cols;
    let n_heads = probs.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(n, d);
    let mut dk = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    let mut dp = vec![0.0; n];
    for (h, p) in probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for t in 0..n {
            let dot_row = &dout.row(t)[cols.clone()];
            if dot_row.iter().all(|x| *x == 0.0) {
                continue;
            }
            let prow = p.row(t);
            let mut weighted = 0.0;
            for u in 0..=t {
                dp[u] = dot(dot_row, &v.row(u)[cols.clone()]);
                weighted += prow[u] * dp[u];
                let w = prow[u];
                for (g, o) in dv.row_mut(u)[cols.clone()].iter_mut().zip(dot_row) {
                    *g += w * o;
                }
            }
            for u in 0..=t {
                let ds = prow[u] * (dp[u] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let (qt, ku) = (q.row(t)[cols.clone()].to_vec(), k.row(u)[cols.clone()].to_vec());
                for (g, kv) in dq.row_mut(t)[cols.clone()].iter_mut().zip(&ku) {
                    *g += ds * kv;
                }
                for (g, qv) in dk.row_mut(u)[cols.clone()].iter_mut().zip(&qt) {
                    *g += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Pre-norm feed-forward sublayer: returns the norm cache, the GELU input
/// and output, and the sublayer output.
fn feed_forward(blk: &Block64, x: &Mat) -> (LnCache, Mat, Mat, Mat) {
    let (b, ln2) = layer_norm(x, &blk.ln2_gain, &blk.ln2_bias);
    let mut hpre = matmul_nt(&b, &blk.ffn_in);
    for r in 0..hpre.rows {
        for (h, bias) in hpre.row_mut(r).iter_mut().zip(&blk.ffn_in_bias) {
            *h += bias;
        }
    }
    let mut g = hpre.clone();
    g.data.iter_mut().for_each(|v| *v = gelu(*v));
    let mut f = matmul_nt(&g, &blk.ffn_out);
    for r in 0..f.rows {
        for (fv, bias) in f.row_mut(r).iter_mut().zip(&blk.ffn_out_bias) {
            *fv += bias;
        }
    }
    (ln2, hpre, g, f)
}

struct BlockTape {
    ln1: LnCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    qd: Mat,
    kd: Mat,
    vd: Mat,
    probs: Vec<Mat>,
    o: Mat,
    od: Mat,
    ln2: LnCache,
    hpre: Mat,
    g: Mat,
}

struct Tape {
    blocks: Vec<BlockTape>,
    final_ln: LnCache,
    z: Mat,
    zd: Mat,
}

fn row_vec(m: &super::Matrix) -> Vec<f64> {
    m.data.iter().map(|&x| x as f64).collect()
}

impl Network {
    pub fn new(p: &PolicyParameters) -> Self {
        let c = &p.config;
        let blocks = p
            .blocks
            .iter()
            .map(|b| Block64 {
                ln1_gain: row_vec(&b.ln1_gain),
                ln1_bias: row_vec(&b.ln1_bias),
                ln2_gain: row_vec(&b.ln2_gain),
                ln2_bias: row_vec(&b.ln2_bias),
                ffn_in: Mat::from_f32(b.ffn_in.rows, b.ffn_in.cols, &b.ffn_in.data),
                ffn_in_bias: row_vec(&b.ffn_in_bias),
                ffn_out: Mat::from_f32(b.ffn_out.rows, b.ffn_out.cols, &b.ffn_out.data),
                ffn_out_bias: row_vec(&b.ffn_out_bias),
            })
            .collect();
        Self {
            config: *c,
            token_embedding: Mat::from_f32(c.vocab_size, c.embed_dim, &p.token_embedding.data),
            position_embedding: Mat::from_f32(c.context_len, c.embed_dim, &p.position_embedding.data),
            blocks,
            final_gain: row_vec(&p.final_gain),
            final_bias: row_vec(&p.final_bias),
            adapters: p.adapters.iter().map(Lora64::new).collect(),
            temperature: 1.0,
        }
    }

    /// Scores sequences under `softmax(logits / temperature)`, the
    /// distribution responses are sampled from. Raw logits are unchanged.
    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    fn scaled(&self, row: &[f64]) -> Vec<f64> {
        row.iter().map(|z| z / self.temperature).collect()
    }

    fn check_context(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Shape("empty context".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::ContextOverflow { len: tokens.len(), max: self.config.context_len });
        }
        if let Some(t) = tokens.iter().find(|t| t.index() >= self.config.vocab_size) {
            return Err(Error::Shape(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[Token]) -> Mat {
        let d = self.config.embed_dim;
        let mut x = Mat::zeros(tokens.len(), d);
        for (t, tok) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            for ((o, e), p) in row
                .iter_mut()
                .zip(self.token_embedding.row(tok.index()))
                .zip(self.position_embedding.row(t))
            {
                *o = e + p;
            }
        }
        x
    }

    /// Runs the model. With `last_only`, the final block and the head are
    /// evaluated for the last position only.
    fn run(&self, tokens: &[Token], last_only: bool, record: bool) -> (Mat, Option<Tape>) {
        let n = tokens.len();
        let n_layers = self.blocks.len();
        let mut x = self.embed(tokens);
        let mut tapes = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            let q_start = if last_only && l + 1 == n_layers { n - 1 } else { 0 };
            let ad = &self.adapters[4 * l..4 * l + 4];
            let (a, ln1) = layer_norm(&x, &blk.ln1_gain, &blk.ln1_bias);
            let a_q = if q_start == 0 { a.clone() } else { a.tail(q_start) };
            let (q, qd) = ad[0].forward(&a_q);
            let (k, kd) = ad[1].forward(&a);
            let (v, vd) = ad[2].forward(&a);
            let (o, probs) = attention(&q, &k, &v, q_start, self.config.n_heads);
            let (y, od) = ad[3].forward(&o);
            let mut x_mid = if q_start == 0 { x } else { x.tail(q_start) };
            x_mid.add_assign(&y);
            let (ln2, hpre, g, f) = feed_forward(blk, &x_mid);
            x_mid.add_assign(&f);
            x = x_mid;
            if record {
                tapes.push(BlockTape { ln1, a, q, k, v, qd, kd, vd, probs, o, od, ln2, hpre, g });
            }
        }
        let (z, final_ln) = layer_norm(&x, &self.final_gain, &self.final_bias);
        let (logits, zd) = self.adapters[4 * n_layers].forward(&z);
        let tape = record.then_some(Tape { blocks: tapes, final_ln, z, zd });
        (logits, tape)
    }

    /// Starts incremental decoding with cached keys and values.
    pub fn decoder(&self) -> Decoder<'_> {
        let d = self.config.embed_dim;
        Decoder { net: self, keys: vec![Mat::zeros(0, d); self.blocks.len()], values: vec![Mat::zeros(0, d); self.blocks.len()] }
    }

    pub fn forward_logits(&self, context: &[Token]) -> Result<Logits> {
        self.check_context(context)?;
        let (logits, _) = self.run(context, false, false);
        if !logits.all_finite() {
            return Err(Error::NonFiniteLogits);
        }
        Ok(Logits(logits))
    }

    /// Logits of the final position only.
    pub fn next_logits(&self, context: &[Token]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let (logits, _) = self.run(context, true, false);
        if !logits.all_finite() {
            return Err(Error::NonFiniteLogits);
        }
        Ok(logits.data)
    }

    fn check_scored(&self, stream: &[Token], mask: &TokenMask) -> Result<()> {
        self.check_context(stream)?;
        if mask.len() != stream.len() {
            return Err(Error::Shape(format!("mask length {} != stream length {}", mask.len(), stream.len())));
        }
        Ok(())
    }

    /// Per-position log-probabilities (`0.0` where the mask is off).
    pub fn token_logprobs(&self, stream: &[Token], mask: &TokenMask) -> Result<Vec<f64>> {
        self.check_scored(stream, mask)?;
        let mut out = vec![0.0; stream.len()];
        if mask.bits().iter().skip(1).all(|b| !b) {
            return Ok(out);
        }
        let logits = self.forward_logits(stream)?;
        for t in 1..stream.len() {
            if mask.bits()[t] {
                let lp = log_softmax_emittable(&self.scaled(logits.row(t - 1)));
                out[t] = token_lp(&lp, stream[t])?;
            }
        }
        Ok(out)
    }

    /// Sum of log-probabilities over masked positions; position 0 is never
    /// scored.
    pub fn sequence_logprob(&self, stream: &[Token], mask: &TokenMask) -> Result<f64> {
        Ok(self.token_logprobs(stream, mask)?.iter().sum())
    }

    /// Gradient of `Σ_t weights[t] · log π(stream[t] | stream[..t])` with
    /// respect to every adapter array. Also returns the objective value.
    pub fn backward(&self, stream: &[Token], mask: &TokenMask, weights: &[f64]) -> Result<(f64, GradientSet)> {
        self.check_scored(stream, mask)?;
        if weights.len() != stream.len() {
            return Err(Error::Shape(format!(
                "weights length {} != stream length {}",
                weights.len(),
                stream.len()
            )));
        }
        for (t, (w, m)) in weights.iter().zip(mask.bits()).enumerate() {
            if !w.is_finite() {
                return Err(Error::GradientOverflow);
            }
            if *w != 0.0 && !m {
                return Err(Error::Shape(format!("nonzero weight at unmasked position {t}")));
            }
        }
        let mut grads = GradientSet {
            grads: self
                .adapters
                .iter()
                .map(|a| LoraGrad { up: vec![0.0; a.up.data.len()], down: vec![0.0; a.down.data.len()] })
                .collect(),
        };
        if weights.iter().skip(1).all(|w| *w == 0.0) {
            return Ok((0.0, grads));
        }

        let n = stream.len();
        let (logits, tape) = self.run(stream, false, true);
        let tape = tape.expect("recorded");
        if !logits.all_finite() {
            return Err(Error::GradientOverflow);
        }
        let mut objective = 0.0;
        let mut dlogits = Mat::zeros(n, self.config.vocab_size);
        for t in 1..n {
            let w = weights[t];
            if w == 0.0 {
                continue;
            }
            let row = self.scaled(logits.row(t - 1));
            objective += w * token_lp(&log_softmax_emittable(&row), stream[t])?;
            let p = softmax_emittable(&row);
            let scale = w / self.temperature;
            let drow = dlogits.row_mut(t - 1);
            for (dv, pv) in drow.iter_mut().zip(&p) {
                *dv = -scale * pv;
            }
            drow[stream[t].index()] += scale;
        }

        let n_layers = self.blocks.len();
        let head_grad = &mut grads.grads[4 * n_layers];
        let dz = self.adapters[4 * n_layers].backward(&tape.z, &tape.zd, &dlogits, head_grad);
        let mut dx = layer_norm_backward(&dz, &self.final_gain, &tape.final_ln);

        for l in (0..n_layers).rev() {
            let blk = &self.blocks[l];
            let bt = &tape.blocks[l];
            // feed-forward branch
            let dg = matmul_nn(&dx, &blk.ffn_out);
            let mut dh = dg;
            for (d, h) in dh.data.iter_mut().zip(&bt.hpre.data) {
                *d *= gelu_grad(*h);
            }
            let db = matmul_nn(&dh, &blk.ffn_in);
            let mut dx_mid = dx;
            dx_mid.add_assign(&layer_norm_backward(&db, &blk.ln2_gain, &bt.ln2));
            let _ = &bt.g;
            // attention branch
            let (gq, rest) = grads.grads[4 * l..4 * l + 4].split_at_mut(1);
            let (gk, rest) = rest.split_at_mut(1);
            let (gv, go) = rest.split_at_mut(1);
            let ad = &self.adapters[4 * l..4 * l + 4];
            let d_o = ad[3].backward(&bt.o, &bt.od, &dx_mid, &mut go[0]);
            let (dq, dk, dv) = attention_backward(&d_o, &bt.q, &bt.k, &bt.v, &bt.probs);
            let mut da = ad[0].backward(&bt.a, &bt.qd, &dq, &mut gq[0]);
            da.add_assign(&ad[1].backward(&bt.a, &bt.kd, &dk, &mut gk[0]));
            da.add_assign(&ad[2].backward(&bt.a, &bt.vd, &dv, &mut gv[0]));
            dx_mid.add_assign(&layer_norm_backward(&da, &blk.ln1_gain, &bt.ln1));
            dx = dx_mid;
        }

        if !objective.is_finite() || !grads.all_finite() {
            return Err(Error::GradientOverflow);
        }
        Ok((objective, grads))
    }
}

fn token_lp(lp: &[f64], token: Token) -> Result<f64> {
    let v = lp[token.index()];
    if v == f64::NEG_INFINITY {
        return Err(Error::Shape(format!("token {token} cannot be emitted by the policy")));
    }
    Ok(v)
}

/// Incremental evaluation for sampling. Each [`Decoder::push`] costs one
/// position instead of a full forward pass and returns the logits for the
/// next position.
pub struct Decoder<'a> {
    net: &'a Network,
    keys: Vec<Mat>,
    values: Vec<Mat>,
}

impl Decoder<'_> {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, token: Token) -> Result<Vec<f64>> {
        let net = self.net;
        let c = &net.config;
        let t = self.len();
        if t >= c.context_len {
            return Err(Error::ContextOverflow { len: t + 1, max: c.context_len });
        }
        if token.index() >= c.vocab_size {
            return Err(Error::Shape(format!("token {token} outside vocabulary of {}", c.vocab_size)));
        }
        let mut x = Mat::zeros(1, c.embed_dim);
        for ((o, e), p) in x.data.iter_mut().zip(net.token_embedding.row(token.index())).zip(net.position_embedding.row(t)) {
            *o = e + p;
        }
        for (l, blk) in net.blocks.iter().enumerate() {
            let ad = &net.adapters[4 * l..4 * l + 4];
            let (a, _) = layer_norm(&x, &blk.ln1_gain, &blk.ln1_bias);
            let (q, _) = ad[0].forward(&a);
            let (k, _) = ad[1].forward(&a);
            let (v, _) = ad[2].forward(&a);
            self.keys[l].data.extend_from_slice(&k.data);
            self.keys[l].rows += 1;
            self.values[l].data.extend_from_slice(&v.data);
            self.values[l].rows += 1;
            let (o, _) = attention(&q, &self.keys[l], &self.values[l], t, c.n_heads);
            let (y, _) = ad[3].forward(&o);
            x.add_assign(&y);
            let (_, _, _, f) = feed_forward(blk, &x);
            x.add_assign(&f);
        }
        let (z, _) = layer_norm(&x, &net.final_gain, &net.final_bias);
        let (logits, _) = net.adapters[4 * net.blocks.len()].forward(&z);
        if !logits.all_finite() {
            return Err(Error::NonFiniteLogits);
        }
        Ok(logits.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Matrix;
    use crate::vocab::NON_EMITTABLE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> PolicyConfig {
        PolicyConfig {
            vocab_size: 16,
            embed_dim: 8,
            context_len: 16,
            n_layers: 2,
            n_heads: 2,
            lora_rank: 2,
            lora_alpha: 1.0,
        }
    }

    fn random_stream(len: usize, seed: u64) -> Vec<Token> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = vec![crate::vocab::BOS];
        while s.len() < len {
            s.push(Token(rng.random_range(2..16)));
        }
        s.into_iter().map(|t| if t == crate::vocab::OBS_MARK { Token(9) } else { t }).collect()
    }

    #[test]
    fn decoder_matches_full_forward() {
        let mut p = PolicyParameters::init(tiny(), 5).unwrap();
        p.randomize_adapters(0.3, 6);
        let net = p.network();
        let stream = random_stream(16, 7);
        let mut dec = net.decoder();
        for t in 0..stream.len() {
            let inc = dec.push(stream[t]).unwrap();
            let full = net.next_logits(&stream[..=t]).unwrap();
            for (a, b) in inc.iter().zip(&full) {
                assert!((a - b).abs() < 1e-10, "position {t}: {a} vs {b}");
            }
        }
        assert!(matches!(dec.push(Token(2)), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn lora_forward_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = LoraLayer::new(Matrix::identity(2), 1, 0.5, &mut rng);
        // zero up-projection: base only
        assert_eq!(lora_forward(&layer, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);

        // adapter product = identity(2) via rank-2 factors
        let adapter = LoraLayer {
            base: Matrix::identity(2),
            up: Matrix::identity(2),
            down: Matrix::identity(2),
            alpha: 0.5,
        };
        assert_eq!(lora_forward(&adapter, &[1.0, 2.0]).unwrap(), vec![1.5, 3.0]);

        let mut random = LoraLayer::new(Matrix::random(3, 4, 1.0, &mut rng), 2, 0.0, &mut rng);
        random.up = Matrix::random(3, 2, 1.0, &mut rng);
        let x = [0.3, -1.0, 2.0, 0.5];
        let base = LoraLayer { up: Matrix::zeros(3, 2), ..random.clone() };
        assert_eq!(lora_forward(&random, &x).unwrap(), lora_forward(&base, &x).unwrap());
        assert!(lora_forward(&random, &[1.0]).is_err());
    }

    #[test]
    fn causal_rows_ignore_future_tokens() {
        let mut p = PolicyParameters::init(tiny(), 5).unwrap();
        p.randomize_adapters(0.2, 6);
        let net = p.network();
        let a = random_stream(12, 1);
        let mut b = a.clone();
        b[8..].reverse();
        b[11] = Token(12);
        let la = net.forward_logits(&a).unwrap();
        let lb = net.forward_logits(&b).unwrap();
        for t in 0..8 {
            assert_eq!(la.row(t), lb.row(t), "row {t}");
        }
        assert_eq!(la, net.forward_logits(&a).unwrap());
    }

    #[test]
    fn next_logits_matches_last_row() {
        let mut p = PolicyParameters::init(tiny(), 5).unwrap();
        p.randomize_adapters(0.2, 7);
        let net = p.network();
        let s = random_stream(10, 2);
        let full = net.forward_logits(&s).unwrap();
        let last = net.next_logits(&s).unwrap();
        for (a, b) in full.row(9).iter().zip(&last) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_overflow_is_rejected() {
        let p = PolicyParameters::init(tiny(), 5).unwrap();
        let err = p.forward_logits(&[Token(9); 17]).unwrap_err();
        assert!(err.to_string().starts_with("context overflow"));
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = PolicyParameters::init(tiny(), 5).unwrap();
        let logits = p.forward_logits(&random_stream(16, 3)).unwrap();
        for t in 0..logits.rows() {
            let row = logits.row(t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - m).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-6);
            let emit: f64 = softmax_emittable(row).iter().sum();
            assert!((emit - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_logprob_decomposes() {
        let mut p = PolicyParameters::init(tiny(), 5).unwrap();
        p.randomize_adapters(0.2, 8);
        let s = random_stream(14, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bits: Vec<bool> = (0..s.len()).map(|_| rng.random_bool(0.5)).collect();
        let comp: Vec<bool> = bits.iter().map(|b| !b).collect();
        let all = p.sequence_logprob(&s, &TokenMask::from_bits(vec![true; s.len()])).unwrap();
        let part = p.sequence_logprob(&s, &TokenMask::from_bits(bits)).unwrap();
        let rest = p.sequence_logprob(&s, &TokenMask::from_bits(comp)).unwrap();
        assert!((part - (all - rest)).abs() < 1e-9);
        assert_eq!(p.sequence_logprob(&s, &TokenMask::zeros(s.len())).unwrap(), 0.0);
        assert!(p.sequence_logprob(&s, &TokenMask::zeros(3)).is_err());
    }

    #[test]
    fn uniform_head_gives_uniform_logprob() {
        let mut p = PolicyParameters::init(tiny(), 5).unwrap();
        p.adapters.last_mut().unwrap().base = Matrix::zeros(16, 8);
        let s = vec![crate::vocab::BOS, Token(10)];
        let lp = p.sequence_logprob(&s, &TokenMask::from_bits(vec![false, true])).unwrap();
        let emittable = 16 - NON_EMITTABLE.len();
        assert!((lp - (1.0 / emittable as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_gradient_and_weights_are_linear() {
        let mut p = PolicyParameters::init(tiny(), 5).unwrap();
        p.randomize_adapters(0.2, 10);
        let s = random_stream(12, 5);
        let mask = TokenMask::from_bits((0..12).map(|t| t % 3 != 0).collect());
        let zero = p.backward(&s, &mask, &[0.0; 12]).unwrap();
        assert!(zero.is_zero());

        let w: Vec<f64> = (0..12).map(|t| if t % 3 != 0 { 0.1 * t as f64 - 0.4 } else { 0.0 }).collect();
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let g1 = p.backward(&s, &mask, &w).unwrap().flatten();
        let g2 = p.backward(&s, &mask, &w2).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn weights_outside_mask_are_rejected() {
        let p = PolicyParameters::init(tiny(), 5).unwrap();
        let s = random_stream(6, 6);
        let mask = TokenMask::from_bits(vec![false, true, true, false, true, true]);
        let mut w = vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        assert!(p.backward(&s, &mask, &w).is_ok());
        w[3] = 0.5;
        assert!(p.backward(&s, &mask, &w).is_err());
    }

    #[test]
    fn zero_adapters_reproduce_the_base_model() {
        let p = PolicyParameters::init(tiny(), 11).unwrap();
        let mut base_only = p.clone();
        for a in &mut base_only.adapters {
            a.down = Matrix::zeros(a.down.rows, a.down.cols);
        }
        let s = random_stream(16, 7);
        assert_eq!(p.forward_logits(&s).unwrap(), base_only.forward_logits(&s).unwrap());
    }
}
