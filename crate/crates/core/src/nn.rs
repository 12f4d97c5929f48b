//! Layers shared by the teacher and the students. Each layer holds only the
//! ids of its parameters; values live in the model's [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Padded;
use crate::error::{bail, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Offset added to padded positions before max-pooling.
const PAD_OFFSET: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(&format!("{name}.w"), &[input, output], input, rng)?;
        let b = if bias {
            Some(store.add_zeros(&format!("{name}.b"), &[output])?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_ones(&format!("{name}.gamma"), &[width])?,
            beta: store.add_zeros(&format!("{name}.beta"), &[width])?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.width < 1 || self.heads < 1 || self.ffn_width < 1 {
            bail!(Teacher, "encoder dimensions must all be at least 1: {self:?}");
        }
        if !self.width.is_multiple_of(self.heads) {
            bail!(Teacher, "encoder width {} is not divisible by {} heads", self.width, self.heads);
        }
        if self.vocab_size < 1 || self.max_seq_len < 1 {
            bail!(Teacher, "encoder needs a vocabulary and a position table");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for l in [&self.query, &self.key, &self.value, &self.output, &self.ffn_in, &self.ffn_out] {
            v.extend(l.ids());
        }
        v.extend(self.attn_norm.ids());
        v.extend(self.ffn_norm.ids());
        v
    }
}

/// Post-LN transformer encoder over summed token, segment and position
/// embeddings.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub tokens: ParamId,
    pub segments: ParamId,
    pub positions: ParamId,
    pub embed_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let tokens = store.add_embedding(&format!("{name}.embed.tokens"), cfg.vocab_size, d, rng)?;
        let segments = store.add_embedding(&format!("{name}.embed.segments"), 2, d, rng)?;
        let positions = store.add_embedding(&format!("{name}.embed.positions"), cfg.max_seq_len, d, rng)?;
        let embed_norm = LayerNorm::new(store, &format!("{name}.embed.norm"), d)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{name}.layer{l}");
            layers.push(EncoderLayer {
                query: Linear::new(store, &format!("{p}.attn.query"), d, d, true, rng)?,
                key: Linear::new(store, &format!("{p}.attn.key"), d, d, true, rng)?,
                value: Linear::new(store, &format!("{p}.attn.value"), d, d, true, rng)?,
                output: Linear::new(store, &format!("{p}.attn.output"), d, d, true, rng)?,
                attn_norm: LayerNorm::new(store, &format!("{p}.attn.norm"), d)?,
                ffn_in: Linear::new(store, &format!("{p}.ffn.in"), d, cfg.ffn_width, true, rng)?,
                ffn_out: Linear::new(store, &format!("{p}.ffn.out"), cfg.ffn_width, d, true, rng)?,
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn.norm"), d)?,
            });
        }
        Ok(Self {
            cfg,
            tokens,
            segments,
            positions,
            embed_norm,
            layers,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.tokens, self.segments, self.positions];
        v.extend(self.embed_norm.ids());
        for l in &self.layers {
            v.extend(l.ids());
        }
        v
    }

    /// Ids of the embedding block plus the first `n` layers.
    pub fn prefix_ids(&self, n: usize) -> Vec<ParamId> {
        let mut v = vec![self.tokens, self.segments, self.positions];
        v.extend(self.embed_norm.ids());
        for l in self.layers.iter().take(n) {
            v.extend(l.ids());
        }
        v
    }

    /// Returns every layer's output, each (B, L, width).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Padded) -> Result<Vec<Var>> {
        let (b, l, d) = (p.batch, p.len, self.cfg.width);
        if l > self.cfg.max_seq_len {
            bail!(
                Tensor,
                "sequence length {l} exceeds the position table of {}",
                self.cfg.max_seq_len
            );
        }
        if b == 0 || l == 0 {
            bail!(Tensor, "encoder input is empty");
        }
        let ids: Vec<usize> = p.tokens.iter().map(|&t| t as usize).collect();
        let segs: Vec<usize> = p.segments.iter().map(|&s| s as usize).collect();
        let positions: Vec<usize> = (0..l).collect();
        let tok_table = g.param(self.tokens)?;
        let seg_table = g.param(self.segments)?;
        let pos_table = g.param(self.positions)?;
        let te = g.embed(tok_table, &ids, &[b, l])?;
        let se = g.embed(seg_table, &segs, &[b, l])?;
        let pe = g.embed(pos_table, &positions, &[l])?;
        let x = g.add(te, se)?;
        let x = g.add(x, pe)?;
        let mut x = self.embed_norm.forward(g, x)?;
        // keep[b, i, j]: query i may attend to key j.
        let mut keep = Vec::with_capacity(b * l * l);
        for r in 0..b {
            let row = &p.mask[r * l..(r + 1) * l];
            for _ in 0..l {
                keep.extend_from_slice(row);
            }
        }
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = layer.query.forward(g, x)?;
            let q = g.scale(q, scale)?;
            let k = layer.key.forward(g, x)?;
            let v = layer.value.forward(g, x)?;
            let mut ctx = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice(q, 2, h * dh, (h + 1) * dh)?;
                let kh = g.slice(k, 2, h * dh, (h + 1) * dh)?;
                let vh = g.slice(v, 2, h * dh, (h + 1) * dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let weights = g.masked_softmax(scores, 2, &keep)?;
                ctx.push(g.matmul(weights, vh)?);
            }
            let ctx = if heads == 1 { ctx[0] } else { g.concat(&ctx, 2)? };
            let attn = layer.output.forward(g, ctx)?;
            let res = g.add(x, attn)?;
            let h1 = layer.attn_norm.forward(g, res)?;
            let f = layer.ffn_in.forward(g, h1)?;
            let f = g.relu(f)?;
            let f = layer.ffn_out.forward(g, f)?;
            let res = g.add(h1, f)?;
            x = layer.ffn_norm.forward(g, res)?;
            outs.push(x);
        }
        Ok(outs)
    }
}

/// `[CLS]` (first position) vectors of a (B, L, D) sequence: (B, D).
pub fn first_position<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let c = g.slice(x, 1, 0, 1)?;
    g.reshape(c, &[s[0], s[2]])
}

/// One LSTM direction with separate input and recurrent biases.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub input: usize,
    pub hidden: usize,
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl BiLstm {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dir = |d: &str, rng: &mut R| -> Result<LstmDirection> {
            Ok(LstmDirection {
                w_ih: store.add_uniform(&format!("{name}.{d}.w_ih"), &[input, 4 * hidden], hidden, rng)?,
                w_hh: store.add_uniform(&format!("{name}.{d}.w_hh"), &[hidden, 4 * hidden], hidden, rng)?,
                b_ih: store.add_zeros(&format!("{name}.{d}.b_ih"), &[4 * hidden])?,
                b_hh: store.add_zeros(&format!("{name}.{d}.b_hh"), &[4 * hidden])?,
            })
        };
        let forward = dir("fwd", rng)?;
        let backward = dir("bwd", rng)?;
        Ok(Self {
            input,
            hidden,
            forward,
            backward,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.forward, &self.backward]
            .iter()
            .flat_map(|d| [d.w_ih, d.w_hh, d.b_ih, d.b_hh])
            .collect()
    }

    fn run<T: Real>(
        &self,
        g: &mut Graph<T>,
        dir: &LstmDirection,
        x: Var,
        mask: &[bool],
        n: usize,
        l: usize,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let h = self.hidden;
        let w_ih = g.param(dir.w_ih)?;
        let w_hh = g.param(dir.w_hh)?;
        let b_ih = g.param(dir.b_ih)?;
        let b_hh = g.param(dir.b_hh)?;
        let pre = g.matmul(x, w_ih)?;
        let pre = g.add(pre, b_ih)?;
        let pre = g.add(pre, b_hh)?;
        let mut state = g.constant(Tensor::zeros(&[n, 2 * h]));
        let mut hs = vec![None; l];
        let steps: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in steps {
            let keep: Vec<bool> = (0..n).map(|r| mask[r * l + t]).collect();
            let pt = g.slice(pre, 1, t, t + 1)?;
            let pt = g.reshape(pt, &[n, 4 * h])?;
            let hprev = g.slice(state, 1, 0, h)?;
            let rec = g.matmul(hprev, w_hh)?;
            let gates = g.add(pt, rec)?;
            state = g.lstm_cell(gates, state, Some(&keep))?;
            hs[t] = Some(g.slice(state, 1, 0, h)?);
        }
        Ok(hs.into_iter().map(|v| v.expect("every step visited")).collect())
    }

    /// Runs both directions over `x` (N, L, input) with right padding given
    /// by `mask` (N·L). Returns (N, L, 2·hidden) with padded positions zeroed.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mask: &[bool]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.input || mask.len() != s[0] * s[1] {
            bail!(
                Student,
                "bilstm: input {s:?} with mask of {} does not match input width {}",
                mask.len(),
                self.input
            );
        }
        let (n, l) = (s[0], s[1]);
        let fwd = self.run(g, &self.forward, x, mask, n, l, false)?;
        let bwd = self.run(g, &self.backward, x, mask, n, l, true)?;
        let f = g.stack(&fwd, 1)?;
        let b = g.stack(&bwd, 1)?;
        let out = g.concat(&[f, b], 2)?;
        let m = mask_tensor::<T>(mask, &[n, l, 1], 1.0, 0.0);
        let m = g.constant(m);
        g.mul(out, m)
    }

    /// Scalar parameter count under the two-bias convention.
    pub fn count(&self) -> usize {
        let (d, h) = (self.input, self.hidden);
        2 * 4 * (d * h + h * h + 2 * h)
    }
}

pub(crate) fn mask_tensor<T: Real>(mask: &[bool], shape: &[usize], on: f64, off: f64) -> Tensor<T> {
    let v: Vec<T> = mask.iter().map(|&m| T::lit(if m { on } else { off })).collect();
    Tensor::new(shape.to_vec(), v).expect("mask matches shape")
}

/// Max, mean and self-attentive pooling over time, concatenated:
/// (N, L, D) → (N, 3D). Padded positions never contribute.
pub fn triple_pool<T: Real>(g: &mut Graph<T>, h: Var, mask: &[bool], attn: ParamId) -> Result<Var> {
    let s = g.shape(h).to_vec();
    let (n, l, d) = (s[0], s[1], s[2]);
    let lens: Vec<usize> = (0..n).map(|r| mask[r * l..(r + 1) * l].iter().filter(|&&m| m).count()).collect();
    if let Some(r) = lens.iter().position(|&c| c == 0) {
        bail!(Student, "pooling: sequence {r} is all padding");
    }
    let offset = g.constant(mask_tensor(mask, &[n, l, 1], 0.0, PAD_OFFSET));
    let shifted = g.add(h, offset)?;
    let max = g.max_axis(shifted, 1)?;

    let sum = g.sum_axis(h, 1)?;
    let counts = Tensor::from_f64(&[n, 1], &lens.iter().map(|&c| c as f64).collect::<Vec<_>>())?;
    let counts = g.constant(counts);
    let mean = g.div(sum, counts)?;

    let v = g.param(attn)?;
    let scores = g.matmul(h, v)?;
    let scores = g.reshape(scores, &[n, l])?;
    let weights = g.masked_softmax(scores, 1, mask)?;
    let weights = g.reshape(weights, &[n, 1, l])?;
    let att = g.matmul(weights, h)?;
    let att = g.reshape(att, &[n, d])?;
    g.concat(&[max, mean, att], 1)
}
