//! Reference attention model: a tiny seeded transformer that *executes*
//! packed items, proving that masks and weights do what they claim.
//!
//! The model is deliberately small (16-dim, 2 layers, 2 heads, f64
//! throughout) — it exists to make statements like "tokens outside a
//! segment cannot influence this row" checkable to floating-point
//! exactness, not to be trained. Masking is hard: disallowed pairs score
//! −∞ before the softmax, so their probability is exactly zero and a
//! segment's rows are bit-for-bit independent of everything outside it.
//! The analytic gradient of the weighted loss is implemented alongside the
//! forward pass and validated by central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::masking::{make_position_ids, MaskRegime, MaskSpec};

/// Model dimensions. `small` gives the standard oracle shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Size of the learned position table; position ids must stay below it.
    pub max_positions: usize,
}

impl ToyConfig {
    pub fn small(vocab_size: usize, max_positions: usize) -> Self {
        ToyConfig {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_positions,
        }
    }
}

/// Flat-parameter offsets for one transformer layer.
#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    unembed: usize,
    total: usize,
}

impl Offsets {
    fn build(cfg: &ToyConfig) -> Self {
        let (d, f, v, p) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_positions);
        let mut at = 0;
        let mut take = |n: usize| {
            let here = at;
            at += n;
            here
        };
        let tok_emb = take(v * d);
        let pos_emb = take(p * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let unembed = take(d * v);
        Offsets {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            unembed,
            total: at,
        }
    }
}

const LN_EPS: f64 = 1e-5;
const INIT_SCALE: f64 = 0.08;

/// The seeded reference model.
#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyConfig,
    off: Offsets,
    params: Vec<f64>,
}

/// `out = x · w` for row-major `x: l×a`, `w: a×b`.
fn matmul(x: &[f64], w: &[f64], l: usize, a: usize, b: usize, out: &mut [f64]) {
    out[..l * b].fill(0.0);
    for i in 0..l {
        for k in 0..a {
            let xv = x[i * a + k];
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[k * b..(k + 1) * b];
            let orow = &mut out[i * b..(i + 1) * b];
            for j in 0..b {
                orow[j] += xv * wrow[j];
            }
        }
    }
}

/// `dw += xᵀ · dout` for `x: l×a`, `dout: l×b`.
fn matmul_acc_dw(x: &[f64], dout: &[f64], l: usize, a: usize, b: usize, dw: &mut [f64]) {
    for i in 0..l {
        for k in 0..a {
            let xv = x[i * a + k];
            if xv == 0.0 {
                continue;
            }
            let drow = &dout[i * b..(i + 1) * b];
            let wrow = &mut dw[k * b..(k + 1) * b];
            for j in 0..b {
                wrow[j] += xv * drow[j];
            }
        }
    }
}

/// `dx += dout · wᵀ` for `dout: l×b`, `w: a×b`.
fn matmul_acc_dx(dout: &[f64], w: &[f64], l: usize, a: usize, b: usize, dx: &mut [f64]) {
    for i in 0..l {
        let drow = &dout[i * b..(i + 1) * b];
        let xrow = &mut dx[i * a..(i + 1) * a];
        for k in 0..a {
            let wrow = &w[k * b..(k + 1) * b];
            let mut acc = 0.0;
            for j in 0..b {
                acc += drow[j] * wrow[j];
            }
            xrow[k] += acc;
        }
    }
}

/// Row-wise layer norm with affine params; caches what backward needs.
struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    out: Vec<f64>,
}

fn layer_norm(x: &[f64], l: usize, d: usize, g: &[f64], b: &[f64]) -> LnCache {
    let mut xhat = vec![0.0; l * d];
    let mut inv_std = vec![0.0; l];
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[i * d + j] = xh;
            out[i * d + j] = g[j] * xh + b[j];
        }
    }
    LnCache { xhat, inv_std, out }
}

/// Backward through layer norm: accumulates into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    cache: &LnCache,
    l: usize,
    d: usize,
    g: &[f64],
    dout: &[f64],
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    for i in 0..l {
        let xhat = &cache.xhat[i * d..(i + 1) * d];
        let dout_row = &dout[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dout_row[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[j];
            dg[j] += dout_row[j] * xhat[j];
            db[j] += dout_row[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let is = cache.inv_std[i];
        let dx_row = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            let dxh = dout_row[j] * g[j];
            dx_row[j] += is * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Everything the backward pass reuses from one forward run.
struct LayerCache {
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head: l×l attention probabilities; zero on disallowed pairs.
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    ln2: LnCache,
    a: Vec<f64>,
    h: Vec<f64>,
}

struct Cache {
    len: usize,
    seg_start: Vec<usize>,
    /// `x[l]` is the residual-stream input of layer `l`; `x[n_layers]` the
    /// final stream.
    x: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    log_probs: Vec<f64>,
}

impl ToyModel {
    /// Deterministically initialize from a seed; the same seed always
    /// yields the same parameters.
    pub fn new(cfg: ToyConfig, seed: u64) -> Self {
        assert!(cfg.d_model.is_multiple_of(cfg.n_heads), "heads must divide d_model");
        let off = Offsets::build(&cfg);
        let mut params = vec![0.0; off.total];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let fill = |range: std::ops::Range<usize>, params: &mut Vec<f64>, rng: &mut ChaCha20Rng| {
            for p in &mut params[range] {
                *p = rng.sample::<f64, _>(StandardNormal) * INIT_SCALE;
            }
        };
        fill(off.tok_emb..off.tok_emb + cfg.vocab_size * cfg.d_model, &mut params, &mut rng);
        fill(off.pos_emb..off.pos_emb + cfg.max_positions * cfg.d_model, &mut params, &mut rng);
        let d = cfg.d_model;
        for lo in &off.layers {
            for w in [lo.wq, lo.wk, lo.wv, lo.wo] {
                fill(w..w + d * d, &mut params, &mut rng);
            }
            fill(lo.w1..lo.w1 + d * cfg.d_ff, &mut params, &mut rng);
            fill(lo.w2..lo.w2 + cfg.d_ff * d, &mut params, &mut rng);
            params[lo.ln1_g..lo.ln1_g + d].fill(1.0);
            params[lo.ln2_g..lo.ln2_g + d].fill(1.0);
        }
        params[off.lnf_g..off.lnf_g + d].fill(1.0);
        fill(off.unembed..off.unembed + d * cfg.vocab_size, &mut params, &mut rng);
        ToyModel { cfg, off, params }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.off.total
    }

    /// Read access for tests; mutation goes through
    /// [`ToyModel::finite_difference_check`]'s perturbations only.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn validate_inputs(
        &self,
        tokens: &[u32],
        position_ids: &[u32],
        mask: &MaskSpec,
    ) -> Result<()> {
        if tokens.len() != position_ids.len() {
            return Err(Error::OracleInput {
                msg: format!(
                    "{} tokens but {} position ids",
                    tokens.len(),
                    position_ids.len()
                ),
            });
        }
        if mask.real_len > tokens.len() {
            return Err(Error::OracleInput {
                msg: format!(
                    "mask covers {} tokens but only {} were given",
                    mask.real_len,
                    tokens.len()
                ),
            });
        }
        for &t in &tokens[..mask.real_len] {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::OracleInput {
                    msg: format!("token id {t} outside vocabulary of {}", self.cfg.vocab_size),
                });
            }
        }
        for &p in &position_ids[..mask.real_len] {
            if p as usize >= self.cfg.max_positions {
                return Err(Error::OracleInput {
                    msg: format!(
                        "position id {p} outside position table of {}",
                        self.cfg.max_positions
                    ),
                });
            }
        }
        Ok(())
    }

    fn forward_cached(
        &self,
        tokens: &[u32],
        position_ids: &[u32],
        mask: &MaskSpec,
    ) -> Result<Cache> {
        self.validate_inputs(tokens, position_ids, mask)?;
        let l = mask.real_len;
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let seg_start: Vec<usize> = (0..l)
            .map(|i| mask.segment_bounds(mask.segment_of(i)).0)
            .collect();

        let mut x0 = vec![0.0; l * d];
        for i in 0..l {
            let te = self.off.tok_emb + tokens[i] as usize * d;
            let pe = self.off.pos_emb + position_ids[i] as usize * d;
            for j in 0..d {
                x0[i * d + j] = p[te + j] + p[pe + j];
            }
        }

        let mut x = vec![x0];
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for lo in &self.off.layers {
            let input = x.last().unwrap();
            let ln1 = layer_norm(input, l, d, &p[lo.ln1_g..], &p[lo.ln1_b..]);
            let mut q = vec![0.0; l * d];
            let mut k = vec![0.0; l * d];
            let mut vv = vec![0.0; l * d];
            matmul(&ln1.out, &p[lo.wq..lo.wq + d * d], l, d, d, &mut q);
            matmul(&ln1.out, &p[lo.wk..lo.wk + d * d], l, d, d, &mut k);
            matmul(&ln1.out, &p[lo.wv..lo.wv + d * d], l, d, d, &mut vv);

            let mut probs = vec![vec![0.0; l * l]; heads];
            let mut ctx = vec![0.0; l * d];
            for (h, pm) in probs.iter_mut().enumerate() {
                let col = h * dh;
                for i in 0..l {
                    let qrow = &q[i * d + col..i * d + col + dh];
                    // Hard masking: scores exist only for allowed keys
                    // (same segment, not in the future); everything else
                    // stays at probability exactly 0.
                    let js = seg_start[i]..=i;
                    let mut mx = f64::NEG_INFINITY;
                    let mut scores = Vec::with_capacity(i - seg_start[i] + 1);
                    for j in js.clone() {
                        let krow = &k[j * d + col..j * d + col + dh];
                        let mut s = 0.0;
                        for t in 0..dh {
                            s += qrow[t] * krow[t];
                        }
                        s *= scale;
                        mx = mx.max(s);
                        scores.push(s);
                    }
                    let mut denom = 0.0;
                    for s in &mut scores {
                        *s = (*s - mx).exp();
                        denom += *s;
                    }
                    for (idx, j) in js.clone().enumerate() {
                        pm[i * l + j] = scores[idx] / denom;
                    }
                    let crow = &mut ctx[i * d + col..i * d + col + dh];
                    for j in js {
                        let pij = pm[i * l + j];
                        let vrow = &vv[j * d + col..j * d + col + dh];
                        for t in 0..dh {
                            crow[t] += pij * vrow[t];
                        }
                    }
                }
            }

            let mut attn_out = vec![0.0; l * d];
            matmul(&ctx, &p[lo.wo..lo.wo + d * d], l, d, d, &mut attn_out);
            let mut resid1 = attn_out;
            for i in 0..l * d {
                resid1[i] += input[i];
            }

            let ln2 = layer_norm(&resid1, l, d, &p[lo.ln2_g..], &p[lo.ln2_b..]);
            let f = self.cfg.d_ff;
            let mut a = vec![0.0; l * f];
            matmul(&ln2.out, &p[lo.w1..lo.w1 + d * f], l, d, f, &mut a);
            for i in 0..l {
                for j in 0..f {
                    a[i * f + j] += p[lo.b1 + j];
                }
            }
            let h_act: Vec<f64> = a.iter().map(|&z| gelu(z)).collect();
            let mut mlp_out = vec![0.0; l * d];
            matmul(&h_act, &p[lo.w2..lo.w2 + f * d], l, f, d, &mut mlp_out);
            let mut resid2 = vec![0.0; l * d];
            for i in 0..l {
                for j in 0..d {
                    resid2[i * d + j] = resid1[i * d + j] + mlp_out[i * d + j] + p[lo.b2 + j];
                }
            }

            layers.push(LayerCache {
                ln1,
                q,
                k,
                v: vv,
                probs,
                ctx,
                ln2,
                a,
                h: h_act,
            });
            x.push(resid2);
        }

        let lnf = layer_norm(x.last().unwrap(), l, d, &p[self.off.lnf_g..], &p[self.off.lnf_b..]);
        let mut logits = vec![0.0; l * v];
        matmul(&lnf.out, &p[self.off.unembed..self.off.unembed + d * v], l, d, v, &mut logits);
        // Rows become log-probabilities via a numerically safe log-softmax.
        let mut log_probs = logits;
        for i in 0..l {
            let row = &mut log_probs[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln() + mx;
            row.iter_mut().for_each(|z| *z -= lse);
        }

        Ok(Cache {
            len: l,
            seg_start,
            x,
            layers,
            lnf,
            log_probs,
        })
    }

    /// Run the model over the real tokens of a masked item. Returns one
    /// log-probability row (over the vocabulary) per real position; each
    /// row predicts the *next* token of its segment. Padding is never
    /// forwarded, so nothing is returned for it.
    pub fn forward(
        &self,
        tokens: &[u32],
        position_ids: &[u32],
        mask: &MaskSpec,
    ) -> Result<Vec<Vec<f64>>> {
        let cache = self.forward_cached(tokens, position_ids, mask)?;
        let v = self.cfg.vocab_size;
        Ok((0..cache.len)
            .map(|i| cache.log_probs[i * v..(i + 1) * v].to_vec())
            .collect())
    }

    fn validate_weights(&self, mask: &MaskSpec, tokens_len: usize, weights: &[f64]) -> Result<()> {
        if weights.len() != tokens_len {
            return Err(Error::OracleInput {
                msg: format!("{} weights for {} tokens", weights.len(), tokens_len),
            });
        }
        for (k, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            if k >= mask.real_len {
                return Err(Error::OracleInput {
                    msg: format!("nonzero weight on padding position {k}"),
                });
            }
            if k == 0 || mask.segment_of(k - 1) != mask.segment_of(k) {
                return Err(Error::OracleInput {
                    msg: format!("weighted token {k} has no in-segment predecessor"),
                });
            }
        }
        Ok(())
    }

    /// Weighted negative log-likelihood: `Σ_k w_k · −log P(token_k | its
    /// visible prefix)`. Zero-weight positions are skipped entirely, so
    /// padding and prompt tokens cost nothing and a row of all-zero weights
    /// scores 0.
    pub fn eval_loss(
        &self,
        tokens: &[u32],
        position_ids: &[u32],
        mask: &MaskSpec,
        weights: &[f64],
    ) -> Result<f64> {
        self.validate_weights(mask, tokens.len(), weights)?;
        let cache = self.forward_cached(tokens, position_ids, mask)?;
        let v = self.cfg.vocab_size;
        let mut loss = 0.0;
        for (k, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                loss += w * -cache.log_probs[(k - 1) * v + tokens[k] as usize];
            }
        }
        Ok(loss)
    }

    /// The loss plus its analytic gradient over every parameter.
    pub fn loss_and_grad(
        &self,
        tokens: &[u32],
        position_ids: &[u32],
        mask: &MaskSpec,
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        self.validate_weights(mask, tokens.len(), weights)?;
        let cache = self.forward_cached(tokens, position_ids, mask)?;
        let l = cache.len;
        let (d, v, f) = (self.cfg.d_model, self.cfg.vocab_size, self.cfg.d_ff);
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let mut grad = vec![0.0; self.off.total];

        let mut loss = 0.0;
        // d(loss)/d(logits): w · (softmax − onehot) on each predicting row.
        let mut dlogits = vec![0.0; l * v];
        for (k, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let r = k - 1;
            let target = tokens[k] as usize;
            loss += w * -cache.log_probs[r * v + target];
            for j in 0..v {
                dlogits[r * v + j] += w * cache.log_probs[r * v + j].exp();
            }
            dlogits[r * v + target] -= w;
        }

        // Unembedding and final norm.
        let mut dlnf_out = vec![0.0; l * d];
        matmul_acc_dw(&cache.lnf.out, &dlogits, l, d, v, &mut grad[self.off.unembed..]);
        matmul_acc_dx(&dlogits, &p[self.off.unembed..self.off.unembed + d * v], l, d, v, &mut dlnf_out);
        let mut dstream = vec![0.0; l * d];
        {
            let (dg, db) = (self.off.lnf_g, self.off.lnf_b);
            let mut dgv = vec![0.0; d];
            let mut dbv = vec![0.0; d];
            layer_norm_backward(&cache.lnf, l, d, &p[dg..dg + d], &dlnf_out, &mut dstream, &mut dgv, &mut dbv);
            for j in 0..d {
                grad[dg + j] += dgv[j];
                grad[db + j] += dbv[j];
            }
        }

        for (li, lo) in self.off.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            let input = &cache.x[li];
            // dstream is the gradient w.r.t. this layer's output (resid2).
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..l {
                    acc += dstream[i * d + j];
                }
                grad[lo.b2 + j] += acc;
            }
            // MLP branch.
            let mut dh_act = vec![0.0; l * f];
            matmul_acc_dw(&lc.h, &dstream, l, f, d, &mut grad[lo.w2..]);
            matmul_acc_dx(&dstream, &p[lo.w2..lo.w2 + f * d], l, f, d, &mut dh_act);
            let mut da = vec![0.0; l * f];
            for i in 0..l * f {
                da[i] = dh_act[i] * gelu_grad(lc.a[i]);
            }
            for j in 0..f {
                let mut acc = 0.0;
                for i in 0..l {
                    acc += da[i * f + j];
                }
                grad[lo.b1 + j] += acc;
            }
            let mut dln2_out = vec![0.0; l * d];
            matmul_acc_dw(&lc.ln2.out, &da, l, d, f, &mut grad[lo.w1..]);
            matmul_acc_dx(&da, &p[lo.w1..lo.w1 + d * f], l, d, f, &mut dln2_out);
            // resid1 gets gradient both straight through and via ln2.
            let mut dresid1 = dstream.clone();
            {
                let mut dgv = vec![0.0; d];
                let mut dbv = vec![0.0; d];
                layer_norm_backward(&lc.ln2, l, d, &p[lo.ln2_g..lo.ln2_g + d], &dln2_out, &mut dresid1, &mut dgv, &mut dbv);
                for j in 0..d {
                    grad[lo.ln2_g + j] += dgv[j];
                    grad[lo.ln2_b + j] += dbv[j];
                }
            }

            // Attention branch: dresid1 flows into Wo and the heads.
            let mut dctx = vec![0.0; l * d];
            matmul_acc_dw(&lc.ctx, &dresid1, l, d, d, &mut grad[lo.wo..]);
            matmul_acc_dx(&dresid1, &p[lo.wo..lo.wo + d * d], l, d, d, &mut dctx);

            let mut dq = vec![0.0; l * d];
            let mut dk = vec![0.0; l * d];
            let mut dv = vec![0.0; l * d];
            for h in 0..heads {
                let col = h * dh;
                let pm = &lc.probs[h];
                for i in 0..l {
                    let js = cache.seg_start[i]..=i;
                    let dctx_row = &dctx[i * d + col..i * d + col + dh];
                    // dp and the softmax Jacobian, confined to the
                    // allowed keys — disallowed pairs have p = 0 and get
                    // no gradient by construction.
                    let mut dp = Vec::with_capacity(i - cache.seg_start[i] + 1);
                    let mut dot = 0.0;
                    for j in js.clone() {
                        let vrow = &lc.v[j * d + col..j * d + col + dh];
                        let mut acc = 0.0;
                        for t in 0..dh {
                            acc += dctx_row[t] * vrow[t];
                        }
                        dp.push(acc);
                        dot += acc * pm[i * l + j];
                    }
                    for (idx, j) in js.clone().enumerate() {
                        let pij = pm[i * l + j];
                        let ds = pij * (dp[idx] - dot) * scale;
                        let qrow = &lc.q[i * d + col..i * d + col + dh];
                        let krow = &lc.k[j * d + col..j * d + col + dh];
                        for t in 0..dh {
                            dq[i * d + col + t] += ds * krow[t];
                            dk[j * d + col + t] += ds * qrow[t];
                        }
                        let pij_dctx = pij;
                        for t in 0..dh {
                            dv[j * d + col + t] += pij_dctx * dctx_row[t];
                        }
                    }
                }
            }

            let mut dln1_out = vec![0.0; l * d];
            matmul_acc_dw(&lc.ln1.out, &dq, l, d, d, &mut grad[lo.wq..]);
            matmul_acc_dx(&dq, &p[lo.wq..lo.wq + d * d], l, d, d, &mut dln1_out);
            matmul_acc_dw(&lc.ln1.out, &dk, l, d, d, &mut grad[lo.wk..]);
            matmul_acc_dx(&dk, &p[lo.wk..lo.wk + d * d], l, d, d, &mut dln1_out);
            matmul_acc_dw(&lc.ln1.out, &dv, l, d, d, &mut grad[lo.wv..]);
            matmul_acc_dx(&dv, &p[lo.wv..lo.wv + d * d], l, d, d, &mut dln1_out);

            // Layer input: straight-through residual plus the ln1 path.
            let mut dinput = dresid1.clone();
            {
                let mut dgv = vec![0.0; d];
                let mut dbv = vec![0.0; d];
                layer_norm_backward(&lc.ln1, l, d, &p[lo.ln1_g..lo.ln1_g + d], &dln1_out, &mut dinput, &mut dgv, &mut dbv);
                for j in 0..d {
                    grad[lo.ln1_g + j] += dgv[j];
                    grad[lo.ln1_b + j] += dbv[j];
                }
            }
            let _ = input;
            dstream = dinput;
        }

        // Embedding tables.
        for i in 0..l {
            let te = self.off.tok_emb + tokens[i] as usize * d;
            let pe = self.off.pos_emb + position_ids[i] as usize * d;
            for j in 0..d {
                grad[te + j] += dstream[i * d + j];
                grad[pe + j] += dstream[i * d + j];
            }
        }

        Ok((loss, grad))
    }

    /// Maximum absolute difference between the rows of a masked forward and
    /// the rows obtained by forwarding each segment alone. Hard masking
    /// makes this essentially zero for well-formed masks; any cross-segment
    /// leak shows up as a large value.
    pub fn segment_independence(&self, tokens: &[u32], mask: &MaskSpec) -> Result<f64> {
        let ids = make_position_ids(mask, tokens.len());
        let full = self.forward(tokens, &ids.ids, mask)?;
        let mut worst: f64 = 0.0;
        for s in 0..mask.segment_count() {
            let (start, end) = mask.segment_bounds(s);
            let seg_tokens = &tokens[start..end];
            let seg_len = end - start;
            let solo_mask = MaskSpec::new(MaskRegime::None, vec![0, seg_len], seg_len)?;
            let solo_ids: Vec<u32> = (0..seg_len as u32).collect();
            let solo = self.forward(seg_tokens, &solo_ids, &solo_mask)?;
            for i in 0..seg_len {
                for (a, b) in full[start + i].iter().zip(&solo[i]) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Compare the analytic gradient against central finite differences on
    /// `n` seeded-random parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn finite_difference_check(
        &mut self,
        tokens: &[u32],
        position_ids: &[u32],
        mask: &MaskSpec,
        weights: &[f64],
        n: usize,
        step: f64,
        seed: u64,
    ) -> Result<GradCheckReport> {
        let (_, grad) = self.loss_and_grad(tokens, position_ids, mask, weights)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(n);
        let mut max_rel_err: f64 = 0.0;
        for _ in 0..n {
            let idx = rng.random_range(0..self.off.total);
            let saved = self.params[idx];
            self.params[idx] = saved + step;
            let up = self.eval_loss(tokens, position_ids, mask, weights)?;
            self.params[idx] = saved - step;
            let down = self.eval_loss(tokens, position_ids, mask, weights)?;
            self.params[idx] = saved;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grad[idx];
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel_err = max_rel_err.max(rel_err);
            samples.push(GradSample {
                index: idx,
                analytic,
                numeric,
                rel_err,
            });
        }
        Ok(GradCheckReport {
            max_rel_err,
            samples,
        })
    }
}

/// One sampled parameter of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub samples: Vec<GradSample>,
}
