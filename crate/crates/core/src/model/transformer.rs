use crate::error::{Error, Result};
use crate::tensor::{graph::gelu, graph::LN_EPS, matmul_into, softmax_in_place, Graph, Tensor, Var};

use super::ModelParams;

/// Per-layer keys and values for every position fed so far.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

fn row_times(x: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    matmul_into(x, w.data(), &mut out, 1, x.len(), w.cols());
    out
}

/// Parameter leaves registered on a graph, indexed like [`ModelParams::tensors`].
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn register(g: &mut Graph, params: &ModelParams) -> Self {
        Self(
            params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(i, t.clone()))
                .collect(),
        )
    }

    /// Registers everything as constants (value-only evaluation).
    pub fn constants(g: &mut Graph, params: &ModelParams) -> Self {
        Self(params.tensors().iter().map(|t| g.constant(t.clone())).collect())
    }
}

impl ModelParams {
    /// Feeds new input rows `h0` (positions `cache.len()..`) through the
    /// stack, returning the matching output rows `h^L`.
    pub fn forward_stack(&self, h0: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let cfg = self.config();
        let d = cfg.embed_dim;
        let (t, cols) = h0.dims("forward_stack")?;
        if cols != d {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "forward_stack",
                lhs: h0.shape().to_vec(),
                rhs: vec![t, d],
            }
            .into());
        }
        if cache.len + t > cfg.max_seq_len {
            return Err(Error::SequenceOverflow {
                len: cache.len + t,
                max: cfg.max_seq_len,
            });
        }
        let mut out = Vec::with_capacity(t * d);
        for r in 0..t {
            let h = self.step_row(h0.row_slice(r), cache);
            out.extend(h);
        }
        Ok(Tensor::new(vec![t, d], out)?)
    }

    fn step_row(&self, h0: &[f64], cache: &mut KvCache) -> Vec<f64> {
        let cfg = self.config();
        let lay = self.layout();
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let pos = cache.len;
        let mut x: Vec<f64> = h0
            .iter()
            .zip(self.t(lay.pos_emb).row_slice(pos))
            .map(|(a, b)| a + b)
            .collect();

        for (l, b) in lay.blocks.iter().enumerate() {
            let a = layer_norm_row(&x, self.t(b.ln1_gain).data(), self.t(b.ln1_bias).data());
            let q = row_times(&a, self.t(b.wq));
            let k = row_times(&a, self.t(b.wk));
            let v = row_times(&a, self.t(b.wv));
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let keys = &cache.keys[l];
            let vals = &cache.values[l];
            let d = cfg.embed_dim;
            let mut heads = vec![0.0; d];
            for h in 0..cfg.heads {
                let qh = &q[h * hd..(h + 1) * hd];
                let mut scores: Vec<f64> = (0..=pos)
                    .map(|j| {
                        let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                        qh.iter().zip(kh).map(|(x, y)| x * y).sum::<f64>() * scale
                    })
                    .collect();
                softmax_in_place(&mut scores);
                let oh = &mut heads[h * hd..(h + 1) * hd];
                for (j, p) in scores.iter().enumerate() {
                    if *p == 0.0 {
                        continue;
                    }
                    let vh = &vals[j * d + h * hd..j * d + (h + 1) * hd];
                    for (o, vv) in oh.iter_mut().zip(vh) {
                        *o += p * vv;
                    }
                }
            }
            let attn = row_times(&heads, self.t(b.wo));
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);

            let m = layer_norm_row(&x, self.t(b.ln2_gain).data(), self.t(b.ln2_bias).data());
            let mut u = row_times(&m, self.t(b.w1));
            u.iter_mut()
                .zip(self.t(b.b1).data())
                .for_each(|(a, b)| *a = gelu(*a + b));
            let mut y = row_times(&u, self.t(b.w2));
            y.iter_mut().zip(self.t(b.b2).data()).for_each(|(a, b)| *a += b);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        }
        cache.len += 1;
        layer_norm_row(&x, self.t(lay.lnf_gain).data(), self.t(lay.lnf_bias).data())
    }

    /// Recorded full-sequence forward pass: `h0` is `t x n0` (positions
    /// `0..t`), the result is `h^L`, `t x nL`.
    pub fn forward_graph(&self, g: &mut Graph, pv: &ParamVars, h0: Var) -> Result<Var> {
        let cfg = self.config();
        let lay = self.layout();
        let (t, _) = g.value(h0).dims("forward_graph")?;
        if t > cfg.max_seq_len {
            return Err(Error::SequenceOverflow {
                len: t,
                max: cfg.max_seq_len,
            });
        }
        let p = &pv.0;
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(p[lay.pos_emb], &positions)?;
        let mut x = g.add(h0, pos)?;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        for b in &lay.blocks {
            let a = g.layer_norm(x, p[b.ln1_gain], p[b.ln1_bias])?;
            let q = g.matmul(a, p[b.wq])?;
            let k = g.matmul(a, p[b.wk])?;
            let v = g.matmul(a, p[b.wv])?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = g.slice_cols(q, h * hd, hd)?;
                let kh = g.slice_cols(k, h * hd, hd)?;
                let vh = g.slice_cols(v, h * hd, hd)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, scale);
                let att = g.causal_softmax(s)?;
                heads.push(g.matmul(att, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let attn = g.matmul(cat, p[b.wo])?;
            x = g.add(x, attn)?;

            let m = g.layer_norm(x, p[b.ln2_gain], p[b.ln2_bias])?;
            let u = g.matmul(m, p[b.w1])?;
            let u = g.add_row(u, p[b.b1])?;
            let u = g.gelu(u);
            let y = g.matmul(u, p[b.w2])?;
            let y = g.add_row(y, p[b.b2])?;
            x = g.add(x, y)?;
        }
        Ok(g.layer_norm(x, p[lay.lnf_gain], p[lay.lnf_bias])?)
    }

    /// Recorded logits `h^L W_d`.
    pub fn logits_graph(&self, g: &mut Graph, pv: &ParamVars, hl: Var) -> Result<Var> {
        Ok(g.matmul(hl, pv.0[self.layout().w_dec])?)
    }
}
