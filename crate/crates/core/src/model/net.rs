//! Forward and backward passes in `f64` over a flat parameter buffer.

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) const LAYERS_PER_BLOCK: usize = 12;

/// Additive perturbation of each block's residual-stream output,
/// one `tokens x embed_dim` row-major array per block.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub per_block: Vec<Vec<f64>>,
}

impl Perturbation {
    pub fn zeros(n_blocks: usize, hidden_len: usize) -> Self {
        Self { per_block: vec![vec![0.0; hidden_len]; n_blocks] }
    }

    pub fn norms(&self) -> Vec<f64> {
        self.per_block.iter().map(|b| norm(b)).collect()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Which weight gradients to compute, per layer.
#[derive(Clone, Copy)]
pub(crate) enum GradScope<'a> {
    All,
    /// Only the listed flat indices; layers with an empty list are skipped.
    Sparse(&'a [Vec<usize>]),
}

#[derive(Clone, Copy)]
enum Sel<'a> {
    All,
    Skip,
    Some(&'a [usize]),
}

impl<'a> GradScope<'a> {
    /// A list covering the whole layer is treated as `All` so that a full
    /// mask reproduces the unmasked arithmetic exactly.
    fn sel(&self, layer: usize, layer_len: usize) -> Sel<'a> {
        match self {
            GradScope::All => Sel::All,
            GradScope::Sparse(lists) => {
                let l = &lists[layer];
                if l.is_empty() {
                    Sel::Skip
                } else if l.len() == layer_len {
                    Sel::All
                } else {
                    Sel::Some(l)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_in: usize,
    b_in: usize,
    w_out: usize,
    b_out: usize,
}

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;

#[derive(Debug, Clone)]
pub(crate) struct Net {
    pub cfg: ModelConfig,
    pub params: Vec<f64>,
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
}

struct BlockCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct Cache {
    tokens: Vec<u8>,
    targets: Vec<(usize, u8)>,
    blocks: Vec<BlockCache>,
    xhat_f: Vec<f64>,
    rstd_f: Vec<f64>,
    fo: Vec<f64>,
    /// Softmax over the vocabulary at each target position.
    probs_out: Vec<f64>,
    pub loss: f64,
}

impl Net {
    pub fn from_state(state: &ModelState) -> Result<Self> {
        state.validate()?;
        let mut params = Vec::with_capacity(state.param_count());
        let mut offsets = Vec::with_capacity(state.layers.len());
        let mut lens = Vec::with_capacity(state.layers.len());
        for layer in &state.layers {
            offsets.push(params.len());
            lens.push(layer.values.len());
            params.extend(layer.values.iter().map(|&v| v as f64));
        }
        let n_blocks = state.config.n_blocks;
        let blocks = (0..n_blocks)
            .map(|b| {
                let o = 2 + b * LAYERS_PER_BLOCK;
                BlockIdx {
                    ln1_g: o,
                    ln1_b: o + 1,
                    wq: o + 2,
                    wk: o + 3,
                    wv: o + 4,
                    wo: o + 5,
                    ln2_g: o + 6,
                    ln2_b: o + 7,
                    w_in: o + 8,
                    b_in: o + 9,
                    w_out: o + 10,
                    b_out: o + 11,
                }
            })
            .collect();
        let tail = 2 + n_blocks * LAYERS_PER_BLOCK;
        Ok(Self {
            cfg: state.config,
            params,
            offsets,
            lens,
            blocks,
            lnf_g: tail,
            lnf_b: tail + 1,
            head: tail + 2,
        })
    }

    /// Writes parameters back, rounded to `f32`.
    pub fn write_into(&self, state: &mut ModelState) {
        for (li, layer) in state.layers.iter_mut().enumerate() {
            let src = self.layer(li);
            for (dst, &v) in layer.values.iter_mut().zip(src) {
                *dst = v as f32;
            }
        }
    }

    #[inline]
    pub fn layer(&self, li: usize) -> &[f64] {
        &self.params[self.offsets[li]..self.offsets[li] + self.lens[li]]
    }

    /// Slice of a params-shaped buffer belonging to layer `li`.
    pub fn layer_of<'b>(&self, buf: &'b [f64], li: usize) -> &'b [f64] {
        &buf[self.offsets[li]..self.offsets[li] + self.lens[li]]
    }

    pub fn set_param(&mut self, li: usize, i: usize, v: f64) {
        self.params[self.offsets[li] + i] = v;
    }

    pub fn n_layers(&self) -> usize {
        self.offsets.len()
    }

    fn check_tokens(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::EmptyBatch);
        }
        if len > self.cfg.context_len {
            return Err(Error::SequenceTooLong { len, context_len: self.cfg.context_len });
        }
        Ok(())
    }

    /// Runs the model over `tokens` and returns the mean cross-entropy of
    /// the `(position, next byte)` targets, keeping activations for
    /// [`Net::backward`].
    pub fn forward(
        &self,
        tokens: &[u8],
        targets: &[(usize, u8)],
        delta: Option<&Perturbation>,
    ) -> Result<Cache> {
        let t_len = tokens.len();
        self.check_tokens(t_len)?;
        if targets.is_empty() {
            return Err(Error::EmptyBatch);
        }
        debug_assert!(targets.iter().all(|&(p, _)| p < t_len));
        let d = self.cfg.embed_dim;
        let f = self.cfg.ffn_dim;
        if let Some(delta) = delta {
            if delta.per_block.len() != self.cfg.n_blocks {
                return Err(Error::PerturbationShape(format!(
                    "{} block arrays for {} blocks",
                    delta.per_block.len(),
                    self.cfg.n_blocks
                )));
            }
            if let Some(bad) = delta.per_block.iter().find(|b| b.len() != t_len * d) {
                return Err(Error::PerturbationShape(format!(
                    "block array of {} values, expected {} ({} tokens x {} dims)",
                    bad.len(),
                    t_len * d,
                    t_len,
                    d
                )));
            }
        }

        let mut x = self.embed(tokens);
        let mut blocks = Vec::with_capacity(self.cfg.n_blocks);
        for (bi, idx) in self.blocks.iter().enumerate() {
            let x_in = x.clone();
            let (xhat1, rstd1, a) =
                layer_norm(&x_in, self.layer(idx.ln1_g), self.layer(idx.ln1_b), d);
            let mut q = vec![0.0; t_len * d];
            let mut k = vec![0.0; t_len * d];
            let mut v = vec![0.0; t_len * d];
            matmul(&a, self.layer(idx.wq), d, d, &mut q);
            matmul(&a, self.layer(idx.wk), d, d, &mut k);
            matmul(&a, self.layer(idx.wv), d, d, &mut v);
            let (o, probs) = self.attention(&q, &k, &v, t_len);
            let mut attn_out = vec![0.0; t_len * d];
            matmul(&o, self.layer(idx.wo), d, d, &mut attn_out);
            let x1: Vec<f64> = x_in.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
            let (xhat2, rstd2, b) =
                layer_norm(&x1, self.layer(idx.ln2_g), self.layer(idx.ln2_b), d);
            let mut u = vec![0.0; t_len * f];
            matmul(&b, self.layer(idx.w_in), d, f, &mut u);
            add_bias(&mut u, self.layer(idx.b_in));
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mut mlp_out = vec![0.0; t_len * d];
            matmul(&g, self.layer(idx.w_out), f, d, &mut mlp_out);
            add_bias(&mut mlp_out, self.layer(idx.b_out));
            x = x1.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
            if let Some(delta) = delta {
                for (xv, dv) in x.iter_mut().zip(&delta.per_block[bi]) {
                    *xv += dv;
                }
            }
            blocks.push(BlockCache { xhat1, rstd1, a, q, k, v, probs, o, xhat2, rstd2, b, u, g });
        }

        let (xhat_f, rstd_f, fo) = layer_norm(&x, self.layer(self.lnf_g), self.layer(self.lnf_b), d);
        let vocab = self.cfg.vocab_size;
        let head = self.layer(self.head);
        let mut probs_out = vec![0.0; targets.len() * vocab];
        let mut loss = 0.0;
        for (ti, &(pos, next)) in targets.iter().enumerate() {
            let row = &mut probs_out[ti * vocab..(ti + 1) * vocab];
            matmul(&fo[pos * d..(pos + 1) * d], head, d, vocab, row);
            let lse = logsumexp(row);
            loss += lse - row[next as usize];
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        loss /= targets.len() as f64;
        Ok(Cache {
            tokens: tokens.to_vec(),
            targets: targets.to_vec(),
            blocks,
            xhat_f,
            rstd_f,
            fo,
            probs_out,
            loss,
        })
    }

    /// Adds, per layer, the summed magnitude of the input feeding each weight
    /// row over every position of `tokens`. One-hot and constant inputs
    /// (embeddings, biases) count 1 per use.
    pub fn accumulate_input_magnitudes(&self, tokens: &[u8], acc: &mut [Vec<f64>]) -> Result<()> {
        let t_len = tokens.len();
        let cache = self.forward(tokens, &[(t_len - 1, 0)], None)?;
        let d = self.cfg.embed_dim;
        let f = self.cfg.ffn_dim;
        let add_abs = |dst: &mut Vec<f64>, src: &[f64], width: usize| {
            for row in src.chunks(width) {
                for (a, v) in dst.iter_mut().zip(row) {
                    *a += v.abs();
                }
            }
        };
        let add_ones = |dst: &mut Vec<f64>| dst.iter_mut().for_each(|a| *a += t_len as f64);
        for &b in tokens {
            acc[TOK_EMB][b as usize] += 1.0;
        }
        for a in &mut acc[POS_EMB][..t_len] {
            *a += 1.0;
        }
        for (idx, bc) in self.blocks.iter().zip(&cache.blocks) {
            add_abs(&mut acc[idx.ln1_g], &bc.xhat1, d);
            add_ones(&mut acc[idx.ln1_b]);
            for li in [idx.wq, idx.wk, idx.wv] {
                add_abs(&mut acc[li], &bc.a, d);
            }
            add_abs(&mut acc[idx.wo], &bc.o, d);
            add_abs(&mut acc[idx.ln2_g], &bc.xhat2, d);
            add_ones(&mut acc[idx.ln2_b]);
            add_abs(&mut acc[idx.w_in], &bc.b, d);
            add_ones(&mut acc[idx.b_in]);
            add_abs(&mut acc[idx.w_out], &bc.g, f);
            add_ones(&mut acc[idx.b_out]);
        }
        add_abs(&mut acc[self.lnf_g], &cache.xhat_f, d);
        add_ones(&mut acc[self.lnf_b]);
        add_abs(&mut acc[self.head], &cache.fo, d);
        Ok(())
    }

    /// Number of input rows of each layer (the leading dimension of matrices,
    /// the full length of vectors).
    pub fn input_rows(&self) -> Vec<usize> {
        let d = self.cfg.embed_dim;
        let f = self.cfg.ffn_dim;
        let mut rows = vec![self.cfg.vocab_size, self.cfg.context_len];
        for _ in &self.blocks {
            rows.extend([d, d, d, d, d, d, d, d, d, f, f, d]);
        }
        rows.extend([d, d, d]);
        rows
    }

    fn embed(&self, tokens: &[u8]) -> Vec<f64> {
        let d = self.cfg.embed_dim;
        let tok = self.layer(TOK_EMB);
        let pos = self.layer(POS_EMB);
        let mut x = vec![0.0; tokens.len() * d];
        for (t, &b) in tokens.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            let e = &tok[b as usize * d..(b as usize + 1) * d];
            let p = &pos[t * d..(t + 1) * d];
            for c in 0..d {
                row[c] = e[c] + p[c];
            }
        }
        x
    }

    fn attention(&self, q: &[f64], k: &[f64], v: &[f64], t_len: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.cfg.embed_dim;
        let hd = self.cfg.head_dim();
        let n_heads = self.cfg.n_heads;
        let mut o = vec![0.0; t_len * d];
        let mut probs = vec![0.0; n_heads * t_len * t_len];
        for h in 0..n_heads {
            for t in 0..t_len {
                let p = &mut probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                let out = &mut o[t * d + h * hd..t * d + (h + 1) * hd];
                attend_row(&q[t * d + h * hd..t * d + (h + 1) * hd], k, v, d, h * hd, hd, p, out);
            }
        }
        (o, probs)
    }

    /// Accumulates `scale * dLoss/dParam` into `grads` (indexed like
    /// `params`). Returns `dLoss/d(block output)` per block when
    /// `want_hidden` is set (unscaled).
    pub fn backward(
        &self,
        cache: &Cache,
        scope: GradScope<'_>,
        grads: &mut [f64],
        scale: f64,
        want_hidden: bool,
    ) -> Option<Vec<Vec<f64>>> {
        let t_len = cache.tokens.len();
        let d = self.cfg.embed_dim;
        let f = self.cfg.ffn_dim;
        let vocab = self.cfg.vocab_size;
        let n_t = cache.targets.len() as f64;

        // Output head.
        let mut dfo = vec![0.0; t_len * d];
        let head = self.layer(self.head);
        let mut dlogits = vec![0.0; vocab];
        let head_sel = scope.sel(self.head, self.lens[self.head]);
        for (ti, &(pos, next)) in cache.targets.iter().enumerate() {
            let probs = &cache.probs_out[ti * vocab..(ti + 1) * vocab];
            for (dl, &p) in dlogits.iter_mut().zip(probs) {
                *dl = p / n_t;
            }
            dlogits[next as usize] -= 1.0 / n_t;
            matmul_back_x(&dlogits, head, d, vocab, &mut dfo[pos * d..(pos + 1) * d]);
            let fo_row = &cache.fo[pos * d..(pos + 1) * d];
            let g = self.grad_slice(grads, self.head);
            matmul_back_w(fo_row, &dlogits, d, vocab, g, head_sel, scale);
        }
        let mut dx = vec![0.0; t_len * d];
        self.layer_norm_back(
            &dfo,
            &cache.xhat_f,
            &cache.rstd_f,
            self.lnf_g,
            self.lnf_b,
            &mut dx,
            grads,
            scope,
            scale,
        );

        let mut hidden = want_hidden.then(|| vec![Vec::new(); self.cfg.n_blocks]);
        for (bi, idx) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[bi];
            if let Some(h) = hidden.as_mut() {
                h[bi] = dx.clone();
            }
            // x_out = x1 + W_out g + b_out
            let mut dg = vec![0.0; t_len * f];
            matmul_back_x(&dx, self.layer(idx.w_out), f, d, &mut dg);
            let sel = scope.sel(idx.w_out, self.lens[idx.w_out]);
            matmul_back_w(&c.g, &dx, f, d, self.grad_slice(grads, idx.w_out), sel, scale);
            bias_back(&dx, self.grad_slice(grads, idx.b_out), d, scope.sel(idx.b_out, self.lens[idx.b_out]), scale);
            let du: Vec<f64> = dg.iter().zip(&c.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            let mut db = vec![0.0; t_len * d];
            matmul_back_x(&du, self.layer(idx.w_in), d, f, &mut db);
            let sel = scope.sel(idx.w_in, self.lens[idx.w_in]);
            matmul_back_w(&c.b, &du, d, f, self.grad_slice(grads, idx.w_in), sel, scale);
            bias_back(&du, self.grad_slice(grads, idx.b_in), f, scope.sel(idx.b_in, self.lens[idx.b_in]), scale);
            // dx1 = dx + LN2 backward
            let mut dx1 = dx.clone();
            self.layer_norm_back(
                &db, &c.xhat2, &c.rstd2, idx.ln2_g, idx.ln2_b, &mut dx1, grads, scope, scale,
            );
            // x1 = x_in + W_o o
            let mut d_o = vec![0.0; t_len * d];
            matmul_back_x(&dx1, self.layer(idx.wo), d, d, &mut d_o);
            let sel = scope.sel(idx.wo, self.lens[idx.wo]);
            matmul_back_w(&c.o, &dx1, d, d, self.grad_slice(grads, idx.wo), sel, scale);
            let (dq, dk, dv) = self.attention_back(&d_o, c, t_len);
            let mut da = vec![0.0; t_len * d];
            for (w, dy) in [(idx.wq, &dq), (idx.wk, &dk), (idx.wv, &dv)] {
                matmul_back_x(dy, self.layer(w), d, d, &mut da);
                matmul_back_w(&c.a, dy, d, d, self.grad_slice(grads, w), scope.sel(w, self.lens[w]), scale);
            }
            let mut dx_in = dx1;
            self.layer_norm_back(
                &da, &c.xhat1, &c.rstd1, idx.ln1_g, idx.ln1_b, &mut dx_in, grads, scope, scale,
            );
            dx = dx_in;
        }

        // Embeddings.
        let tok_sel = scope.sel(TOK_EMB, self.lens[TOK_EMB]);
        let pos_sel = scope.sel(POS_EMB, self.lens[POS_EMB]);
        for (t, &b) in cache.tokens.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            if !matches!(tok_sel, Sel::Skip) {
                let g = self.grad_slice(grads, TOK_EMB);
                for c in 0..d {
                    g[b as usize * d + c] += scale * row[c];
                }
            }
            if !matches!(pos_sel, Sel::Skip) {
                let g = self.grad_slice(grads, POS_EMB);
                for c in 0..d {
                    g[t * d + c] += scale * row[c];
                }
            }
        }
        hidden
    }

    fn grad_slice<'g>(&self, grads: &'g mut [f64], li: usize) -> &'g mut [f64] {
        &mut grads[self.offsets[li]..self.offsets[li] + self.lens[li]]
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_back(
        &self,
        dy: &[f64],
        xhat: &[f64],
        rstd: &[f64],
        gain: usize,
        bias: usize,
        dx: &mut [f64],
        grads: &mut [f64],
        scope: GradScope<'_>,
        scale: f64,
    ) {
        let d = self.cfg.embed_dim;
        let g = self.layer(gain);
        let want_g = !matches!(scope.sel(gain, self.lens[gain]), Sel::Skip);
        let want_b = !matches!(scope.sel(bias, self.lens[bias]), Sel::Skip);
        let mut dxhat = vec![0.0; d];
        for (t, &r) in rstd.iter().enumerate() {
            let dy_row = &dy[t * d..(t + 1) * d];
            let xh = &xhat[t * d..(t + 1) * d];
            if want_g {
                let gg = self.grad_slice(grads, gain);
                for c in 0..d {
                    gg[c] += scale * dy_row[c] * xh[c];
                }
            }
            if want_b {
                let gb = self.grad_slice(grads, bias);
                for c in 0..d {
                    gb[c] += scale * dy_row[c];
                }
            }
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for c in 0..d {
                dxhat[c] = dy_row[c] * g[c];
                mean_dxhat += dxhat[c];
                mean_dxhat_xhat += dxhat[c] * xh[c];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            let out = &mut dx[t * d..(t + 1) * d];
            for c in 0..d {
                out[c] += r * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
            }
        }
    }

    fn attention_back(
        &self,
        d_o: &[f64],
        c: &BlockCache,
        t_len: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.cfg.embed_dim;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = vec![0.0; t_len];
        for h in 0..self.cfg.n_heads {
            let off = h * hd;
            for t in 0..t_len {
                let probs = &c.probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                let dout = &d_o[t * d + off..t * d + off + hd];
                let mut weighted = 0.0;
                for s in 0..=t {
                    let vs = &c.v[s * d + off..s * d + off + hd];
                    dp[s] = dot(dout, vs);
                    weighted += probs[s] * dp[s];
                    let dvs = &mut dv[s * d + off..s * d + off + hd];
                    for j in 0..hd {
                        dvs[j] += probs[s] * dout[j];
                    }
                }
                let qt = &c.q[t * d + off..t * d + off + hd];
                for s in 0..=t {
                    let ds = probs[s] * (dp[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ks = &c.k[s * d + off..s * d + off + hd];
                    let dqt = &mut dq[t * d + off..t * d + off + hd];
                    for j in 0..hd {
                        dqt[j] += ds * ks[j];
                    }
                    let dks = &mut dk[s * d + off..s * d + off + hd];
                    for j in 0..hd {
                        dks[j] += ds * qt[j];
                    }
                }
            }
        }
        (dq, dk, dv)
    }

}

/// Incremental decoder with a key/value cache. Each step performs exactly
/// the row-wise arithmetic of [`Net::forward`] for the newest position.
pub(crate) struct KvDecoder<'a> {
    net: &'a Net,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> KvDecoder<'a> {
    pub fn new(net: &'a Net) -> Self {
        let n = net.cfg.n_blocks;
        Self { net, keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// Feeds one byte and returns next-byte logits.
    pub fn step(&mut self, token: u8) -> Vec<f64> {
        let net = self.net;
        let d = net.cfg.embed_dim;
        let f = net.cfg.ffn_dim;
        let hd = net.cfg.head_dim();
        let pos = self.len;
        assert!(pos < net.cfg.context_len, "decoder context exhausted");
        let tok = net.layer(TOK_EMB);
        let pe = net.layer(POS_EMB);
        let mut x: Vec<f64> = (0..d)
            .map(|c| tok[token as usize * d + c] + pe[pos * d + c])
            .collect();
        for (bi, idx) in net.blocks.iter().enumerate() {
            let (_, _, a) = layer_norm(&x, net.layer(idx.ln1_g), net.layer(idx.ln1_b), d);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            matmul(&a, net.layer(idx.wq), d, d, &mut q);
            matmul(&a, net.layer(idx.wk), d, d, &mut k);
            matmul(&a, net.layer(idx.wv), d, d, &mut v);
            self.keys[bi].extend_from_slice(&k);
            self.values[bi].extend_from_slice(&v);
            let mut o = vec![0.0; d];
            let mut p = vec![0.0; pos + 1];
            for h in 0..net.cfg.n_heads {
                let out = &mut o[h * hd..(h + 1) * hd];
                attend_row(&q[h * hd..(h + 1) * hd], &self.keys[bi], &self.values[bi], d, h * hd, hd, &mut p, out);
            }
            let mut attn_out = vec![0.0; d];
            matmul(&o, net.layer(idx.wo), d, d, &mut attn_out);
            let x1: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
            let (_, _, b) = layer_norm(&x1, net.layer(idx.ln2_g), net.layer(idx.ln2_b), d);
            let mut u = vec![0.0; f];
            matmul(&b, net.layer(idx.w_in), d, f, &mut u);
            add_bias(&mut u, net.layer(idx.b_in));
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mut mlp_out = vec![0.0; d];
            matmul(&g, net.layer(idx.w_out), f, d, &mut mlp_out);
            add_bias(&mut mlp_out, net.layer(idx.b_out));
            x = x1.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();
        }
        self.len += 1;
        let (_, _, fo) = layer_norm(&x, net.layer(net.lnf_g), net.layer(net.lnf_b), d);
        let mut logits = vec![0.0; net.cfg.vocab_size];
        matmul(&fo, net.layer(net.head), d, net.cfg.vocab_size, &mut logits);
        logits
    }
}

/// Causal attention for a single query row over keys/values `0..p.len()`.
#[allow(clippy::too_many_arguments)]
fn attend_row(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    stride: usize,
    off: usize,
    hd: usize,
    p: &mut [f64],
    out: &mut [f64],
) {
    let scale = 1.0 / (hd as f64).sqrt();
    let mut max = f64::NEG_INFINITY;
    for (s, ps) in p.iter_mut().enumerate() {
        *ps = scale * dot(q, &k[s * stride + off..s * stride + off + hd]);
        max = max.max(*ps);
    }
    let mut sum = 0.0;
    for ps in p.iter_mut() {
        *ps = (*ps - max).exp();
        sum += *ps;
    }
    for ps in p.iter_mut() {
        *ps /= sum;
    }
    out.fill(0.0);
    for (s, &ps) in p.iter().enumerate() {
        let vs = &v[s * stride + off..s * stride + off + hd];
        for j in 0..hd {
            out[j] += ps * vs[j];
        }
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = logsumexp(row);
    row.iter().map(|v| v - lse).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let mut y = vec![0.0; x.len()];
    for t in 0..rows {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for c in 0..d {
            let xh = (row[c] - mean) * r;
            xhat[t * d + c] = xh;
            y[t * d + c] = xh * g[c] + b[c];
        }
    }
    (xhat, rstd, y)
}

#[inline]
fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

#[inline]
fn gelu_grad(z: f64) -> f64 {
    let inner = GELU_C * (z + 0.044715 * z * z * z);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[i * 4 + j] * b[i * 4 + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out = x W` for row-major `x: rows x n`, `W: n x m`.
fn matmul(x: &[f64], w: &[f64], n: usize, m: usize, out: &mut [f64]) {
    let rows = x.len() / n;
    out.fill(0.0);
    for t in 0..rows {
        let o = &mut out[t * m..(t + 1) * m];
        for i in 0..n {
            let xv = x[t * n + i];
            if xv == 0.0 {
                continue;
            }
            let wr = &w[i * m..(i + 1) * m];
            for j in 0..m {
                o[j] += xv * wr[j];
            }
        }
    }
}

/// `dx += dy W^T`.
fn matmul_back_x(dy: &[f64], w: &[f64], n: usize, m: usize, dx: &mut [f64]) {
    let rows = dy.len() / m;
    for t in 0..rows {
        let dyr = &dy[t * m..(t + 1) * m];
        for i in 0..n {
            dx[t * n + i] += dot(dyr, &w[i * m..(i + 1) * m]);
        }
    }
}

/// `dW += scale * x^T dy`, restricted by `sel`.
fn matmul_back_w(x: &[f64], dy: &[f64], n: usize, m: usize, dw: &mut [f64], sel: Sel<'_>, scale: f64) {
    let rows = x.len() / n;
    match sel {
        Sel::Skip => {}
        Sel::All => {
            for t in 0..rows {
                let dyr = &dy[t * m..(t + 1) * m];
                for i in 0..n {
                    let xv = scale * x[t * n + i];
                    if xv == 0.0 {
                        continue;
                    }
                    let g = &mut dw[i * m..(i + 1) * m];
                    for j in 0..m {
                        g[j] += xv * dyr[j];
                    }
                }
            }
        }
        Sel::Some(list) => {
            for &flat in list {
                let (i, j) = (flat / m, flat % m);
                let mut s = 0.0;
                for t in 0..rows {
                    s += x[t * n + i] * dy[t * m + j];
                }
                dw[flat] += scale * s;
            }
        }
    }
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    let m = b.len();
    for row in x.chunks_mut(m) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn bias_back(dy: &[f64], db: &mut [f64], m: usize, sel: Sel<'_>, scale: f64) {
    if matches!(sel, Sel::Skip) {
        return;
    }
    for row in dy.chunks(m) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += scale * v;
        }
    }
}
