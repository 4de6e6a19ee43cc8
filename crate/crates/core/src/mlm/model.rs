//! Pre-norm transformer encoder with learned positions and an output head
//! tied to the token embeddings. Forward and backward passes are explicit.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    add_bias, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul, matmul_a_bt,
    matmul_at_b_acc, randn, softmax_in_place, sum_rows_acc,
};
use crate::rng;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 64,
            ffn_mult: 4,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 3 || self.ffn_mult == 0 {
            return Err(Error::InvalidArgument("max_len >= 3 and ffn_mult >= 1".into()));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub out_bias: Range<usize>,
    pub total: usize,
}

/// Parameter groups used for gradient checking and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    TokenEmbedding,
    PositionalEmbedding,
    Attention,
    FeedForward,
    LayerNorm,
    OutputBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::TokenEmbedding,
        ParamGroup::PositionalEmbedding,
        ParamGroup::Attention,
        ParamGroup::FeedForward,
        ParamGroup::LayerNorm,
        ParamGroup::OutputBias,
    ];
}

impl Layout {
    fn new(cfg: &MlmConfig, vocab_size: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let tok_emb = take(vocab_size * d);
        let pos_emb = take(cfg.max_len * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
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
        let out_bias = take(vocab_size);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            out_bias,
            total: at,
        }
    }

    pub fn group(&self, group: ParamGroup) -> Vec<Range<usize>> {
        match group {
            ParamGroup::TokenEmbedding => vec![self.tok_emb.clone()],
            ParamGroup::PositionalEmbedding => vec![self.pos_emb.clone()],
            ParamGroup::OutputBias => vec![self.out_bias.clone()],
            ParamGroup::Attention => self
                .layers
                .iter()
                .flat_map(|l| {
                    [&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo].map(Clone::clone)
                })
                .collect(),
            ParamGroup::FeedForward => self
                .layers
                .iter()
                .flat_map(|l| [&l.w1, &l.b1, &l.w2, &l.b2].map(Clone::clone))
                .collect(),
            ParamGroup::LayerNorm => self
                .layers
                .iter()
                .flat_map(|l| [&l.ln1_g, &l.ln1_b, &l.ln2_g, &l.ln2_b].map(Clone::clone))
                .chain([self.lnf_g.clone(), self.lnf_b.clone()])
                .collect(),
        }
    }
}

/// Trainable masked-infilling network.
#[derive(Debug, Clone)]
pub struct MlmModel {
    pub config: MlmConfig,
    pub vocab: Vocabulary,
    pub params: Vec<f64>,
    layout: Layout,
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1_xhat: Vec<f64>,
    ln1_inv: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `n_heads × T × T` attention probabilities.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_inv: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations kept from a forward pass.
pub struct ForwardCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf_xhat: Vec<f64>,
    lnf_inv: Vec<f64>,
    z: Vec<f64>,
    /// `T × V` softmax output.
    pub probs: Vec<f64>,
}

impl MlmModel {
    /// Random initialization: N(0, 0.02) embeddings, scaled-normal weights,
    /// unit layer-norm gains and zero biases (including the output bias).
    pub fn new(config: MlmConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        let mut params = vec![0.0; layout.total];
        let mut rng = rng::named_rng(seed, "mlm-init");
        let d = config.d_model;
        let f = config.ffn_dim();
        let mut fill = |r: &Range<usize>, std: f64, params: &mut Vec<f64>| {
            for p in &mut params[r.clone()] {
                *p = randn(&mut rng) * std;
            }
        };
        fill(&layout.tok_emb, 0.02, &mut params);
        fill(&layout.pos_emb, 0.02, &mut params);
        let w_std = 1.0 / (d as f64).sqrt();
        for l in &layout.layers {
            for r in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1] {
                fill(r, w_std, &mut params);
            }
            fill(&l.w2, 1.0 / (f as f64).sqrt(), &mut params);
            for r in [&l.ln1_g, &l.ln2_g] {
                params[r.clone()].fill(1.0);
            }
        }
        params[layout.lnf_g.clone()].fill(1.0);
        Ok(MlmModel {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn from_parts(config: MlmConfig, vocab: Vocabulary, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(MlmModel {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        let v = self.vocab_size();
        if let Some(&id) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id, size: v });
        }
        Ok(())
    }

    /// Per-position distributions over the vocabulary, row-major `T × V`.
    pub fn forward(&self, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(ids)?.probs)
    }

    pub fn forward_cached(&self, ids: &[usize]) -> Result<ForwardCache> {
        self.check_ids(ids)?;
        let t = ids.len();
        let d = self.config.d_model;
        let f = self.config.ffn_dim();
        let nh = self.config.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let vsz = self.vocab_size();

        let tok = self.p(&self.layout.tok_emb);
        let pos = self.p(&self.layout.pos_emb);
        let mut x = vec![0.0; t * d];
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..d {
                x[i * d + j] = tok[id * d + j] + pos[i * d + j];
            }
        }

        let mut layers = Vec::with_capacity(self.config.n_layers);
        for l in &self.layout.layers {
            let x_in = x.clone();
            let mut a = vec![0.0; t * d];
            let (ln1_xhat, ln1_inv) = layer_norm(&x, self.p(&l.ln1_g), self.p(&l.ln1_b), &mut a);
            let mut q = vec![0.0; t * d];
            let mut k = vec![0.0; t * d];
            let mut v = vec![0.0; t * d];
            matmul(&a, self.p(&l.wq), t, d, d, &mut q);
            add_bias(&mut q, self.p(&l.bq));
            matmul(&a, self.p(&l.wk), t, d, d, &mut k);
            add_bias(&mut k, self.p(&l.bk));
            matmul(&a, self.p(&l.wv), t, d, d, &mut v);
            add_bias(&mut v, self.p(&l.bv));

            let mut probs = vec![0.0; nh * t * t];
            let mut ctx = vec![0.0; t * d];
            for h in 0..nh {
                let off = h * dh;
                for i in 0..t {
                    let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                    for (j, r) in row.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for c in 0..dh {
                            s += q[i * d + off + c] * k[j * d + off + c];
                        }
                        *r = s * scale;
                    }
                    softmax_in_place(row);
                    for (j, &pij) in row.iter().enumerate() {
                        for c in 0..dh {
                            ctx[i * d + off + c] += pij * v[j * d + off + c];
                        }
                    }
                }
            }
            let mut o = vec![0.0; t * d];
            matmul(&ctx, self.p(&l.wo), t, d, d, &mut o);
            add_bias(&mut o, self.p(&l.bo));
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }

            let mut b = vec![0.0; t * d];
            let (ln2_xhat, ln2_inv) = layer_norm(&x, self.p(&l.ln2_g), self.p(&l.ln2_b), &mut b);
            let mut u = vec![0.0; t * f];
            matmul(&b, self.p(&l.w1), t, d, f, &mut u);
            add_bias(&mut u, self.p(&l.b1));
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mut ff = vec![0.0; t * d];
            matmul(&g, self.p(&l.w2), t, f, d, &mut ff);
            add_bias(&mut ff, self.p(&l.b2));
            for (xi, fi) in x.iter_mut().zip(&ff) {
                *xi += fi;
            }
            layers.push(LayerCache {
                x_in,
                ln1_xhat,
                ln1_inv,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2_xhat,
                ln2_inv,
                b,
                u,
                g,
            });
        }

        let mut z = vec![0.0; t * d];
        let (lnf_xhat, lnf_inv) = layer_norm(
            &x,
            self.p(&self.layout.lnf_g),
            self.p(&self.layout.lnf_b),
            &mut z,
        );
        let mut logits = vec![0.0; t * vsz];
        matmul_a_bt(&z, tok, t, d, vsz, &mut logits);
        add_bias(&mut logits, self.p(&self.layout.out_bias));
        for row in logits.chunks_mut(vsz) {
            softmax_in_place(row);
        }
        Ok(ForwardCache {
            ids: ids.to_vec(),
            layers,
            lnf_xhat,
            lnf_inv,
            z,
            probs: logits,
        })
    }

    /// Summed cross-entropy over `targets` (position, gold id).
    pub fn loss(&self, ids: &[usize], targets: &[(usize, usize)]) -> Result<f64> {
        let cache = self.forward_cached(ids)?;
        Ok(cross_entropy(&cache.probs, self.vocab_size(), targets))
    }

    /// Computes the summed cross-entropy over `targets` and adds
    /// `scale · ∂loss/∂θ` into `grad`.
    pub fn loss_and_grad(
        &self,
        ids: &[usize],
        targets: &[(usize, usize)],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let cache = self.forward_cached(ids)?;
        let vsz = self.vocab_size();
        let loss = cross_entropy(&cache.probs, vsz, targets);
        let t = ids.len();
        let mut dlogits = vec![0.0; t * vsz];
        for &(pos, gold) in targets {
            let row = &mut dlogits[pos * vsz..(pos + 1) * vsz];
            for (dv, pv) in row.iter_mut().zip(&cache.probs[pos * vsz..(pos + 1) * vsz]) {
                *dv += scale * pv;
            }
            row[gold] -= scale;
        }
        self.backward(&cache, &dlogits, grad);
        Ok(loss)
    }

    fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        let t = cache.ids.len();
        let d = self.config.d_model;
        let f = self.config.ffn_dim();
        let nh = self.config.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let vsz = self.vocab_size();
        let lay = &self.layout;
        let tok = self.p(&lay.tok_emb);

        sum_rows_acc(dlogits, &mut grad[lay.out_bias.clone()]);
        // logits = z · Eᵀ
        let mut dz = vec![0.0; t * d];
        matmul(dlogits, tok, t, vsz, d, &mut dz);
        matmul_at_b_acc(dlogits, &cache.z, t, vsz, d, &mut grad[lay.tok_emb.clone()]);

        let mut dx = vec![0.0; t * d];
        {
            let (dg, db) = split_two(grad, &lay.lnf_g, &lay.lnf_b);
            layer_norm_backward(
                &dz,
                &cache.lnf_xhat,
                &cache.lnf_inv,
                self.p(&lay.lnf_g),
                dg,
                db,
                &mut dx,
            );
        }

        for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
            // feed-forward branch: x2 = x1 + W2·gelu(W1·LN2(x1))
            let dff = dx.clone();
            sum_rows_acc(&dff, &mut grad[l.b2.clone()]);
            matmul_at_b_acc(&c.g, &dff, t, f, d, &mut grad[l.w2.clone()]);
            let mut dg = vec![0.0; t * f];
            matmul_a_bt(&dff, self.p(&l.w2), t, d, f, &mut dg);
            for (dgi, &ui) in dg.iter_mut().zip(&c.u) {
                *dgi *= gelu_grad(ui);
            }
            let du = dg;
            sum_rows_acc(&du, &mut grad[l.b1.clone()]);
            matmul_at_b_acc(&c.b, &du, t, d, f, &mut grad[l.w1.clone()]);
            let mut db = vec![0.0; t * d];
            matmul_a_bt(&du, self.p(&l.w1), t, f, d, &mut db);
            {
                let (gg, gb) = split_two(grad, &l.ln2_g, &l.ln2_b);
                layer_norm_backward(
                    &db,
                    &c.ln2_xhat,
                    &c.ln2_inv,
                    self.p(&l.ln2_g),
                    gg,
                    gb,
                    &mut dx,
                );
            }

            // attention branch: x1 = x0 + Wo·attn(LN1(x0))
            let d_o = dx.clone();
            sum_rows_acc(&d_o, &mut grad[l.bo.clone()]);
            matmul_at_b_acc(&c.ctx, &d_o, t, d, d, &mut grad[l.wo.clone()]);
            let mut dctx = vec![0.0; t * d];
            matmul_a_bt(&d_o, self.p(&l.wo), t, d, d, &mut dctx);

            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for h in 0..nh {
                let off = h * dh;
                for i in 0..t {
                    let prow = &c.probs[(h * t + i) * t..(h * t + i + 1) * t];
                    for j in 0..t {
                        let mut s = 0.0;
                        for cc in 0..dh {
                            s += dctx[i * d + off + cc] * c.v[j * d + off + cc];
                            dv[j * d + off + cc] += prow[j] * dctx[i * d + off + cc];
                        }
                        dp[j] = s;
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for cc in 0..dh {
                            dq[i * d + off + cc] += ds * c.k[j * d + off + cc];
                            dk[j * d + off + cc] += ds * c.q[i * d + off + cc];
                        }
                    }
                }
            }
            let mut da = vec![0.0; t * d];
            let mut tmp = vec![0.0; t * d];
            for (dw, wr, br, dy) in [
                (&l.wq, &l.wq, &l.bq, &dq),
                (&l.wk, &l.wk, &l.bk, &dk),
                (&l.wv, &l.wv, &l.bv, &dv),
            ] {
                sum_rows_acc(dy, &mut grad[br.clone()]);
                matmul_at_b_acc(&c.a, dy, t, d, d, &mut grad[dw.clone()]);
                matmul_a_bt(dy, self.p(wr), t, d, d, &mut tmp);
                for (a, b) in da.iter_mut().zip(&tmp) {
                    *a += b;
                }
            }
            {
                let (gg, gb) = split_two(grad, &l.ln1_g, &l.ln1_b);
                layer_norm_backward(
                    &da,
                    &c.ln1_xhat,
                    &c.ln1_inv,
                    self.p(&l.ln1_g),
                    gg,
                    gb,
                    &mut dx,
                );
            }
            debug_assert_eq!(c.x_in.len(), dx.len());
        }

        let (gtok, gpos) = split_two(grad, &lay.tok_emb, &lay.pos_emb);
        for (i, &id) in cache.ids.iter().enumerate() {
            for j in 0..d {
                gtok[id * d + j] += dx[i * d + j];
                gpos[i * d + j] += dx[i * d + j];
            }
        }
    }
}

fn cross_entropy(probs: &[f64], vsz: usize, targets: &[(usize, usize)]) -> f64 {
    targets
        .iter()
        .map(|&(pos, gold)| -probs[pos * vsz + gold].max(1e-300).ln())
        .sum()
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn split_two<'g>(
    grad: &'g mut [f64],
    a: &Range<usize>,
    b: &Range<usize>,
) -> (&'g mut [f64], &'g mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = grad.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokens;
    use crate::vocab::{MASK, NUM_SPECIAL};

    fn tiny() -> MlmModel {
        let words = tokens(&["a", "b", "c", "d", "e", "f"]).unwrap();
        let vocab = Vocabulary::build([words.as_slice()], 1).unwrap();
        let cfg = MlmConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_len: 8,
            ffn_mult: 2,
        };
        MlmModel::new(cfg, vocab, 11).unwrap()
    }

    #[test]
    fn rows_are_distributions() {
        let m = tiny();
        let probs = m.forward(&[3, 5, MASK, 7, 4]).unwrap();
        for row in probs.chunks(m.vocab_size()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let entropy: f64 = row.iter().map(|p| -p * p.ln()).sum();
            assert!(entropy > 0.0);
        }
    }

    #[test]
    fn rejects_long_or_out_of_range() {
        let m = tiny();
        assert!(matches!(
            m.forward(&[5; 9]),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(matches!(
            m.forward(&[5, 99]),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn permutation_equivariance() {
        let m = tiny();
        let d = m.config.d_model;
        let (i, j) = (1, 3);
        let ids = vec![3, 5, MASK, 8, 4];
        let mut swapped_ids = ids.clone();
        swapped_ids.swap(i, j);
        let mut m2 = m.clone();
        let pos = m2.layout.pos_emb.start;
        for c in 0..d {
            m2.params.swap(pos + i * d + c, pos + j * d + c);
        }
        let a = m.forward(&ids).unwrap();
        let b = m2.forward(&swapped_ids).unwrap();
        let v = m.vocab_size();
        for (x, y) in [(i, j), (j, i), (2, 2), (0, 0)] {
            for w in 0..v {
                assert!((a[x * v + w] - b[y * v + w]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_difference_on_sample() {
        let m = tiny();
        let ids = vec![3, 5, MASK, 7, MASK, 4];
        let targets = vec![(2, 6), (4, NUM_SPECIAL)];
        let mut grad = vec![0.0; m.params.len()];
        m.loss_and_grad(&ids, &targets, 1.0, &mut grad).unwrap();
        let eps = 1e-4;
        for idx in (0..m.params.len()).step_by(7) {
            let mut mp = m.clone();
            mp.params[idx] += eps;
            let lp = mp.loss(&ids, &targets).unwrap();
            mp.params[idx] -= 2.0 * eps;
            let lm = mp.loss(&ids, &targets).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-6);
            assert!(
                (fd - grad[idx]).abs() / denom < 1e-3,
                "param {idx}: fd {fd} analytic {}",
                grad[idx]
            );
        }
    }
}
