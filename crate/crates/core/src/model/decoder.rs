//! The transformer stack shared by the target, GliDe and vanilla draft
//! models, with a forward pass that can record a tape and a hand-written
//! backward pass over that tape.
//!
//! Sub-layer wiring per layer is pre-norm with residuals:
//! `x += SelfAttn(norm(x))`, then (draft only) `x += CrossAttn(norm(x))`,
//! then `x += Ffn(norm(x))`.

use rand::Rng;

use super::cache::KvCache;
use super::config::{DecoderConfig, ROPE_BASE};
use crate::error::{Error, Result};
use crate::mask::{AttentionMask, BlockAssignment};
use crate::tensor::{
    dot, matmul_a_bt, matmul_acc, matmul_at_b_acc, rms, rmsnorm, softmax_row_into, Matrix,
    TokenId,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

/// Queries projected from the draft stream into every target head
/// (`wq` holds the per-head projections side by side, `d_D × h·d_k`), and
/// the output projection `wo` (`h·d_k × d_D`).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub norm: Matrix,
    pub wq: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn_norm: Matrix,
    pub attn: SelfAttention,
    pub cross: Option<CrossAttention>,
    pub ffn_norm: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: Matrix,
    pub layers: Vec<Layer>,
    pub final_norm: Matrix,
    pub lm_head: Matrix,
}

/// Which target rows a cross-attention query at a given position may see.
/// Every rule yields a prefix `0..span` of the target cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossVisibility {
    /// Inference: queries at 0-based positions `>= query_start` see the
    /// whole (delayed) cache; earlier rows skip cross-attention.
    Delayed { query_start: usize },
    /// Training: a query in block `b` sees the target tokens of blocks
    /// `1..b-1`.
    Block(BlockAssignment),
}

impl CrossVisibility {
    /// Number of leading target rows visible from 0-based `position`.
    pub fn span(&self, position: usize, kv_len: usize) -> usize {
        match *self {
            CrossVisibility::Delayed { query_start } => {
                if position >= query_start {
                    kv_len
                } else {
                    0
                }
            }
            CrossVisibility::Block(blocks) => {
                let b = blocks.block(position + 1);
                ((b - 1) * blocks.block_length).min(kv_len)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrossSource<'a> {
    pub kv: &'a KvCache,
    pub visibility: CrossVisibility,
}

/// One cross-attention read, recorded when a probe is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossSpan {
    /// 1-based draft layer.
    pub draft_layer: usize,
    /// 1-based target layer whose cache was read.
    pub target_layer: usize,
    /// 0-based absolute position of the query.
    pub position: usize,
    /// Number of leading target rows visible.
    pub visible: usize,
}

pub struct ForwardArgs<'a> {
    pub tokens: &'a [TokenId],
    /// 0-based absolute positions, one per token.
    pub positions: &'a [usize],
    /// Visibility among the new tokens; `None` means causal. Cached rows
    /// are always visible.
    pub chunk_mask: Option<&'a AttentionMask>,
    pub cross: Option<CrossSource<'a>>,
}

#[derive(Debug, Clone)]
struct CrossTape {
    xn: Matrix,
    rms: Vec<f64>,
    probs: Vec<Matrix>,
    cat: Matrix,
}

#[derive(Debug, Clone)]
struct LayerTape {
    x_in: Matrix,
    xn1: Matrix,
    rms1: Vec<f64>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    cat: Matrix,
    x1: Matrix,
    cross: Option<CrossTape>,
    x2: Matrix,
    xn2: Matrix,
    rms2: Vec<f64>,
    pre: Matrix,
    act: Matrix,
}

/// Activations recorded by a training forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    layers: Vec<LayerTape>,
    x_final: Option<Matrix>,
    xnf: Option<Matrix>,
    rmsf: Vec<f64>,
}

#[inline]
fn rope_angle(position: usize, pair: usize, dim: usize) -> f64 {
    position as f64 * ROPE_BASE.powf(-2.0 * pair as f64 / dim as f64)
}

/// Rotates consecutive pairs of `x` by the rotary angle for `position`;
/// `sign = -1` applies the inverse rotation.
fn rope(x: &mut [f64], position: usize, sign: f64) {
    let dim = x.len();
    for i in 0..dim / 2 {
        let (s, c) = (sign * rope_angle(position, i, dim)).sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

fn rope_heads(m: &mut Matrix, positions: &[usize], head_dim: usize, sign: f64) {
    for (r, &p) in positions.iter().enumerate() {
        for chunk in m.row_mut(r).chunks_mut(head_dim) {
            rope(chunk, p, sign);
        }
    }
}

fn norm_rows(x: &Matrix, gain: &Matrix) -> (Matrix, Vec<f64>) {
    let y = rmsnorm(x, gain).expect("norm gain shape checked at construction");
    let r = (0..x.rows()).map(|i| rms(x.row(i))).collect();
    (y, r)
}

fn rmsnorm_backward(x: &Matrix, r: &[f64], gain: &Matrix, dy: &Matrix, dgain: &mut Matrix) -> Matrix {
    let n = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let (xr, dyr, ri) = (x.row(i), dy.row(i), r[i]);
        let g = gain.data();
        let mut s = 0.0;
        for j in 0..xr.len() {
            dgain.data_mut()[j] += dyr[j] * xr[j] / ri;
            s += dyr[j] * g[j] * xr[j];
        }
        let k = s / (n * ri * ri * ri);
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = dyr[j] * g[j] / ri - xr[j] * k;
        }
    }
    dx
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn linear(x: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    matmul_acc(x, w, &mut out);
    out
}

/// Softmax-weighted sum over a prefix-or-masked key set for one query row.
/// `visible(idx)` selects keys; returns the attention probabilities in
/// `probs` (length = number of keys) and accumulates into `out`.
fn attend_row(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    n_keys: usize,
    visible: impl Fn(usize) -> bool,
    scale: f64,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let mut scores = vec![f64::NEG_INFINITY; n_keys];
    for (idx, s) in scores.iter_mut().enumerate() {
        if visible(idx) {
            *s = dot(q, keys.row(idx)) * scale;
        }
    }
    softmax_row_into(&scores, &visible, probs);
    for idx in 0..n_keys {
        if visible(idx) {
            let p = probs[idx];
            for (o, v) in out.iter_mut().zip(values.row(idx)) {
                *o += p * v;
            }
        }
    }
}

/// Row-wise softmax Jacobian-vector product: gradient w.r.t. the scores
/// given probabilities `p` and the gradient `dp` w.r.t. them.
fn softmax_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let (pr, dpr) = (p.row(i), dp.row(i));
        let inner = dot(pr, dpr);
        for (j, d) in ds.row_mut(i).iter_mut().enumerate() {
            *d = pr[j] * (dpr[j] - inner);
        }
    }
    ds
}

fn write_cols(dst: &mut Matrix, src: &Matrix, start: usize) {
    for i in 0..src.rows() {
        dst.row_mut(i)[start..start + src.cols()].copy_from_slice(src.row(i));
    }
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        let glorot = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let depth = (2.0 * cfg.n_layers as f64).sqrt();
        let embed = Matrix::random(cfg.vocab, d, 1.0, rng);
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let attn = SelfAttention {
                    wq: Matrix::random(d, d, glorot(d), rng),
                    wk: Matrix::random(d, d, glorot(d), rng),
                    wv: Matrix::random(d, d, glorot(d), rng),
                    wo: Matrix::random(d, d, glorot(d) / depth, rng),
                };
                let cross = cfg.cross.map(|c| {
                    let qd = c.target_heads * c.target_head_dim;
                    CrossAttention {
                        norm: Matrix::filled(1, d, 1.0),
                        wq: Matrix::random(d, qd, glorot(d), rng),
                        wo: Matrix::random(qd, d, glorot(qd) / depth, rng),
                    }
                });
                Layer {
                    attn_norm: Matrix::filled(1, d, 1.0),
                    attn,
                    cross,
                    ffn_norm: Matrix::filled(1, d, 1.0),
                    w1: Matrix::random(d, f, glorot(d), rng),
                    w2: Matrix::random(f, d, glorot(f) / depth, rng),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            embed,
            layers,
            final_norm: Matrix::filled(1, d, 1.0),
            lm_head: Matrix::random(d, cfg.vocab, glorot(d), rng),
        })
    }

    /// Same shapes, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    /// All parameter matrices with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![("embed".into(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attn_norm"), &l.attn_norm));
            out.push((p("attn.wq"), &l.attn.wq));
            out.push((p("attn.wk"), &l.attn.wk));
            out.push((p("attn.wv"), &l.attn.wv));
            out.push((p("attn.wo"), &l.attn.wo));
            if let Some(c) = &l.cross {
                out.push((p("cross.norm"), &c.norm));
                out.push((p("cross.wq"), &c.wq));
                out.push((p("cross.wo"), &c.wo));
            }
            out.push((p("ffn_norm"), &l.ffn_norm));
            out.push((p("ffn.w1"), &l.w1));
            out.push((p("ffn.w2"), &l.w2));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    /// Mutable parameters in the same order as [`Decoder::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.embed];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.attn.wq);
            out.push(&mut l.attn.wk);
            out.push(&mut l.attn.wv);
            out.push(&mut l.attn.wo);
            if let Some(c) = &mut l.cross {
                out.push(&mut c.norm);
                out.push(&mut c.wq);
                out.push(&mut c.wo);
            }
            out.push(&mut l.ffn_norm);
            out.push(&mut l.w1);
            out.push(&mut l.w2);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, m) in self.named_params() {
            for v in m.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.n_layers, self.cfg.n_heads, self.cfg.head_dim())
    }

    /// 0-based target layer read by 0-based draft layer `m`.
    fn source_layer(&self, m: usize) -> usize {
        let c = self.cfg.cross.expect("cross spec present");
        c.target_layers - self.cfg.n_layers + m
    }

    /// Runs the stack over a chunk of new tokens, appending their keys and
    /// values to `cache`, and returns one logit row per token.
    ///
    /// With a tape attached the cache must start empty; the tape then holds
    /// everything [`Decoder::backward`] needs.
    pub fn forward(
        &self,
        args: &ForwardArgs<'_>,
        cache: &mut KvCache,
        mut tape: Option<&mut Tape>,
        mut probe: Option<&mut Vec<CrossSpan>>,
    ) -> Result<Matrix> {
        let n = args.tokens.len();
        let cfg = &self.cfg;
        if n == 0 || args.positions.len() != n {
            return Err(crate::error::contract("forward needs tokens with matching positions"));
        }
        if let Some(&p) = args.positions.iter().max() {
            if p >= cfg.max_seq {
                return Err(Error::Capacity {
                    requested: p + 1,
                    max_seq: cfg.max_seq,
                });
            }
        }
        if let Some(&t) = args.tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(crate::error::contract(format!("token {t} outside vocab {}", cfg.vocab)));
        }
        if let Some(m) = args.chunk_mask {
            if (m.rows(), m.cols()) != (n, n) {
                return Err(crate::error::contract("chunk mask shape must be n x n"));
            }
        }
        if cfg.cross.is_some() != args.cross.is_some() {
            return Err(crate::error::contract(
                "cross-attention source must be given exactly for cross-attention models",
            ));
        }
        if tape.is_some() && !cache.is_empty() {
            return Err(crate::error::contract("taped forward requires an empty cache"));
        }
        let past = cache.len();
        let d = cfg.model_dim;
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Matrix::zeros(n, d);
        for (r, &t) in args.tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.embed.row(t as usize));
        }

        for (li, layer) in self.layers.iter().enumerate() {
            let x_in = x.clone();
            let (xn1, rms1) = norm_rows(&x, &layer.attn_norm);
            let mut q = linear(&xn1, &layer.attn.wq);
            let mut k = linear(&xn1, &layer.attn.wk);
            let v = linear(&xn1, &layer.attn.wv);
            rope_heads(&mut q, args.positions, dh, 1.0);
            rope_heads(&mut k, args.positions, dh, 1.0);
            for r in 0..n {
                for h in 0..heads {
                    let s = h * dh..(h + 1) * dh;
                    cache.push(li, h, &k.row(r)[s.clone()], &v.row(r)[s]);
                }
            }
            let n_keys = past + n;
            let mut cat = Matrix::zeros(n, d);
            let mut probs_tape = Vec::new();
            for h in 0..heads {
                let keys = cache.keys(li, h);
                let vals = cache.values(li, h);
                let mut pm = Matrix::zeros(n, n_keys);
                for r in 0..n {
                    let visible = |idx: usize| {
                        idx < past
                            || match args.chunk_mask {
                                Some(m) => m.allowed(r, idx - past),
                                None => idx - past <= r,
                            }
                    };
                    let mut out = vec![0.0; dh];
                    attend_row(
                        &q.row(r)[h * dh..(h + 1) * dh],
                        keys,
                        vals,
                        n_keys,
                        visible,
                        scale,
                        pm.row_mut(r),
                        &mut out,
                    );
                    cat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(&out);
                }
                if tape.is_some() {
                    probs_tape.push(pm);
                }
            }
            x.add_assign(&linear(&cat, &layer.attn.wo));
            let x1 = x.clone();

            let mut cross_tape = None;
            if let (Some(ca), Some(src)) = (&layer.cross, args.cross.as_ref()) {
                let spec = cfg.cross.expect("validated");
                let tl = self.source_layer(li);
                let (th, tdh) = (spec.target_heads, spec.target_head_dim);
                if src.kv.n_layers() != spec.target_layers
                    || src.kv.n_heads() != th
                    || src.kv.head_dim() != tdh
                {
                    return Err(crate::error::contract("target cache shape does not match cross spec"));
                }
                let kv_len = src.kv.len();
                let cscale = 1.0 / (tdh as f64).sqrt();
                let (xn, rmsc) = norm_rows(&x, &ca.norm);
                let mut qc = linear(&xn, &ca.wq);
                rope_heads(&mut qc, args.positions, tdh, 1.0);
                let mut catc = Matrix::zeros(n, th * tdh);
                let mut cprobs = Vec::new();
                let spans: Vec<usize> = args
                    .positions
                    .iter()
                    .map(|&p| src.visibility.span(p, kv_len))
                    .collect();
                if let Some(pr) = probe.as_deref_mut() {
                    for (r, &p) in args.positions.iter().enumerate() {
                        pr.push(CrossSpan {
                            draft_layer: li + 1,
                            target_layer: tl + 1,
                            position: p,
                            visible: spans[r],
                        });
                    }
                }
                for j in 0..th {
                    let keys = src.kv.keys(tl, j);
                    let vals = src.kv.values(tl, j);
                    let mut pm = Matrix::zeros(n, kv_len);
                    for r in 0..n {
                        let span = spans[r];
                        if span == 0 {
                            continue;
                        }
                        let mut out = vec![0.0; tdh];
                        attend_row(
                            &qc.row(r)[j * tdh..(j + 1) * tdh],
                            keys,
                            vals,
                            kv_len,
                            |idx| idx < span,
                            cscale,
                            pm.row_mut(r),
                            &mut out,
                        );
                        catc.row_mut(r)[j * tdh..(j + 1) * tdh].copy_from_slice(&out);
                    }
                    if tape.is_some() {
                        cprobs.push(pm);
                    }
                }
                x.add_assign(&linear(&catc, &ca.wo));
                if tape.is_some() {
                    cross_tape = Some(CrossTape {
                        xn,
                        rms: rmsc,
                        probs: cprobs,
                        cat: catc,
                    });
                }
            }
            let x2 = x.clone();

            let (xn2, rms2) = norm_rows(&x, &layer.ffn_norm);
            let pre = linear(&xn2, &layer.w1);
            let mut act = pre.clone();
            for a in act.data_mut() {
                *a *= sigmoid(*a);
            }
            x.add_assign(&linear(&act, &layer.w2));

            if let Some(t) = tape.as_deref_mut() {
                t.layers.push(LayerTape {
                    x_in,
                    xn1,
                    rms1,
                    q,
                    k,
                    v,
                    probs: probs_tape,
                    cat,
                    x1,
                    cross: cross_tape,
                    x2,
                    xn2,
                    rms2,
                    pre,
                    act,
                });
            }
        }
        cache.sync_len();

        let (xnf, rmsf) = norm_rows(&x, &self.final_norm);
        let logits = linear(&xnf, &self.lm_head);
        if let Some(t) = tape {
            t.tokens = args.tokens.to_vec();
            t.positions = args.positions.to_vec();
            t.x_final = Some(x);
            t.xnf = Some(xnf);
            t.rmsf = rmsf;
        }
        Ok(logits)
    }

    /// Backpropagates `dlogits` through a recorded tape, accumulating into
    /// `grads` (same shapes as `self`). `cross_kv` must be the target cache
    /// the forward pass read.
    pub fn backward(&self, tape: &Tape, cross_kv: Option<&KvCache>, dlogits: &Matrix, grads: &mut Decoder) {
        let cfg = &self.cfg;
        let n = tape.tokens.len();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let x_final = tape.x_final.as_ref().expect("tape recorded");
        let xnf = tape.xnf.as_ref().expect("tape recorded");

        matmul_at_b_acc(xnf, dlogits, &mut grads.lm_head);
        let dxnf = matmul_a_bt(dlogits, &self.lm_head);
        let mut dx = rmsnorm_backward(x_final, &tape.rmsf, &self.final_norm, &dxnf, &mut grads.final_norm);

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let lt = &tape.layers[li];
            let g = &mut grads.layers[li];

            // feed-forward
            matmul_at_b_acc(&lt.act, &dx, &mut g.w2);
            let mut dpre = matmul_a_bt(&dx, &layer.w2);
            for (d, &z) in dpre.data_mut().iter_mut().zip(lt.pre.data()) {
                let s = sigmoid(z);
                *d *= s * (1.0 + z * (1.0 - s));
            }
            matmul_at_b_acc(&lt.xn2, &dpre, &mut g.w1);
            let dxn2 = matmul_a_bt(&dpre, &layer.w1);
            dx.add_assign(&rmsnorm_backward(&lt.x2, &lt.rms2, &layer.ffn_norm, &dxn2, &mut g.ffn_norm));

            // cross-attention; target keys and values are constants
            if let (Some(ca), Some(ct), Some(gc), Some(kv)) =
                (&layer.cross, &lt.cross, g.cross.as_mut(), cross_kv)
            {
                let spec = cfg.cross.expect("cross spec");
                let tl = self.source_layer(li);
                let (th, tdh) = (spec.target_heads, spec.target_head_dim);
                let cscale = 1.0 / (tdh as f64).sqrt();
                matmul_at_b_acc(&ct.cat, &dx, &mut gc.wo);
                let dcat = matmul_a_bt(&dx, &ca.wo);
                let mut dq = Matrix::zeros(n, th * tdh);
                for j in 0..th {
                    let p = &ct.probs[j];
                    let dout = dcat.col_slice(j * tdh, tdh);
                    let dp = matmul_a_bt(&dout, kv.values(tl, j));
                    let mut ds = softmax_backward(p, &dp);
                    ds.scale(cscale);
                    let mut dqj = Matrix::zeros(n, tdh);
                    matmul_acc(&ds, kv.keys(tl, j), &mut dqj);
                    write_cols(&mut dq, &dqj, j * tdh);
                }
                rope_heads(&mut dq, &tape.positions, tdh, -1.0);
                matmul_at_b_acc(&ct.xn, &dq, &mut gc.wq);
                let dxn = matmul_a_bt(&dq, &ca.wq);
                dx.add_assign(&rmsnorm_backward(&lt.x1, &ct.rms, &ca.norm, &dxn, &mut gc.norm));
            }

            // self-attention
            matmul_at_b_acc(&lt.cat, &dx, &mut g.attn.wo);
            let dcat = matmul_a_bt(&dx, &layer.attn.wo);
            let d = cfg.model_dim;
            let mut dq = Matrix::zeros(n, d);
            let mut dk = Matrix::zeros(n, d);
            let mut dv = Matrix::zeros(n, d);
            for h in 0..cfg.n_heads {
                let p = &lt.probs[h];
                let qh = lt.q.col_slice(h * dh, dh);
                let kh = lt.k.col_slice(h * dh, dh);
                let vh = lt.v.col_slice(h * dh, dh);
                let dout = dcat.col_slice(h * dh, dh);
                let mut dvh = Matrix::zeros(n, dh);
                matmul_at_b_acc(p, &dout, &mut dvh);
                let dp = matmul_a_bt(&dout, &vh);
                let mut ds = softmax_backward(p, &dp);
                ds.scale(scale);
                let mut dqh = Matrix::zeros(n, dh);
                matmul_acc(&ds, &kh, &mut dqh);
                let mut dkh = Matrix::zeros(n, dh);
                matmul_at_b_acc(&ds, &qh, &mut dkh);
                write_cols(&mut dq, &dqh, h * dh);
                write_cols(&mut dk, &dkh, h * dh);
                write_cols(&mut dv, &dvh, h * dh);
            }
            rope_heads(&mut dq, &tape.positions, dh, -1.0);
            rope_heads(&mut dk, &tape.positions, dh, -1.0);
            matmul_at_b_acc(&lt.xn1, &dq, &mut g.attn.wq);
            matmul_at_b_acc(&lt.xn1, &dk, &mut g.attn.wk);
            matmul_at_b_acc(&lt.xn1, &dv, &mut g.attn.wv);
            let mut dxn1 = matmul_a_bt(&dq, &layer.attn.wq);
            dxn1.add_assign(&matmul_a_bt(&dk, &layer.attn.wk));
            dxn1.add_assign(&matmul_a_bt(&dv, &layer.attn.wv));
            dx.add_assign(&rmsnorm_backward(&lt.x_in, &lt.rms1, &layer.attn_norm, &dxn1, &mut g.attn_norm));
        }

        for (r, &t) in tape.tokens.iter().enumerate() {
            let row = grads.embed.row_mut(t as usize);
            for (a, b) in row.iter_mut().zip(dx.row(r)) {
                *a += b;
            }
        }
    }
}
