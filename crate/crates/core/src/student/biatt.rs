//! Bi-attentive BiLSTM encoder.
//!
//! Both sequences go through embedding, a ReLU feed-forward layer and one
//! shared BiLSTM, giving X and Y. With `A = X Yᵀ`, `A_x` normalizes A over the
//! x positions and `C_x = A_xᵀ X` has one row per y position; `A_y` does the
//! same for `Aᵀ`, giving `C_y = A_yᵀ Y`. The fusions `[X ⊕ X−C_y ⊕ X⊙C_y]` and
//! `[Y ⊕ Y−C_x ⊕ Y⊙C_x]` pass through a second shared BiLSTM, then max, mean
//! and self-attentive pooling.
//!
//! Batches are computed as (B, L, ·) with x and y padded to a common length;
//! padded positions get exactly zero attention weight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::BatchInput;
use crate::error::{bail, Result};
use crate::nn::{triple_pool, BiLstm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};
use crate::tokenize::{CLS_ID, PAD_ID, SEP_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiattConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub task_layer_dim: usize,
}

impl BiattConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 || self.embed_dim < 1 || self.lstm_hidden < 1 || self.task_layer_dim < 1 {
            bail!(Student, "bi-attentive student dimensions must all be at least 1: {self:?}");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Biatt {
    pub cfg: BiattConfig,
    pub embed: ParamId,
    pub feed_forward: Linear,
    pub encoder: BiLstm,
    pub integrator: BiLstm,
    pub pool_vector: ParamId,
}

/// Intermediate values of one forward pass, all batched over B.
#[derive(Clone, Debug)]
pub struct BiattActivations {
    /// (B, L) validity of x and y positions.
    pub mask_x: Vec<bool>,
    pub mask_y: Vec<bool>,
    pub len: usize,
    /// (B, L, 2h)
    pub x: Var,
    pub y: Var,
    /// (B, Lx, Ly)
    pub a: Var,
    /// A normalized over x positions, (B, Lx, Ly).
    pub a_x: Var,
    /// Aᵀ normalized over y positions, (B, Ly, Lx).
    pub a_y: Var,
    /// (B, Ly, 2h)
    pub c_x: Var,
    /// (B, Lx, 2h)
    pub c_y: Var,
    /// (B, L, 6h)
    pub fused_x: Var,
    pub fused_y: Var,
    /// (B, 6h) for single sentences, (B, 12h) for pairs.
    pub pooled: Var,
}

/// Splits an encoding into the x and y token sequences (y = x for singles).
pub fn segments(input: &BatchInput) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>, bool)> {
    let mut xs = Vec::with_capacity(input.len());
    let mut ys = Vec::with_capacity(input.len());
    let pair = input.encodings.first().is_some_and(|e| e.is_pair());
    for (r, e) in input.encodings.iter().enumerate() {
        if e.is_pair() != pair {
            bail!(Student, "batch mixes single sentences and pairs (row {r})");
        }
        if e.token_ids.first() != Some(&CLS_ID) {
            bail!(Student, "row {r} does not start with [CLS]");
        }
        let ids = &e.token_ids;
        let sep = ids.iter().position(|&t| t == SEP_ID).unwrap_or(ids.len());
        let x = ids[1..sep].to_vec();
        let y = if pair {
            ids[(sep + 1).min(ids.len())..ids.len().saturating_sub(1)].to_vec()
        } else {
            x.clone()
        };
        if x.is_empty() || y.is_empty() {
            bail!(Student, "row {r} has an empty sentence");
        }
        xs.push(x);
        ys.push(y);
    }
    Ok((xs, ys, pair))
}

fn pad_rows(rows: &[Vec<u32>], len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids = Vec::with_capacity(rows.len() * len);
    let mut mask = Vec::with_capacity(rows.len() * len);
    for r in rows {
        for t in 0..len {
            ids.push(r.get(t).copied().unwrap_or(PAD_ID) as usize);
            mask.push(t < r.len());
        }
    }
    (ids, mask)
}

/// keep[b, i, j] = rows[b, i] && cols[b, j]
fn pair_mask(rows: &[bool], cols: &[bool], b: usize, l: usize) -> Vec<bool> {
    let mut keep = Vec::with_capacity(b * l * l);
    for r in 0..b {
        for i in 0..l {
            for j in 0..l {
                keep.push(rows[r * l + i] && cols[r * l + j]);
            }
        }
    }
    keep
}

impl Biatt {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: BiattConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (e, h) = (cfg.embed_dim, cfg.lstm_hidden);
        Ok(Self {
            cfg,
            embed: store.add_embedding("student.embed", cfg.vocab_size, e, rng)?,
            feed_forward: Linear::new(store, "student.ff", e, e, true, rng)?,
            encoder: BiLstm::new(store, "student.bilstm", e, h, rng)?,
            integrator: BiLstm::new(store, "student.integrate", 6 * h, h, rng)?,
            pool_vector: store.add_uniform("student.pool.attn", &[2 * h, 1], 2 * h, rng)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.embed];
        v.extend(self.feed_forward.ids());
        v.extend(self.encoder.ids());
        v.extend(self.integrator.ids());
        v.push(self.pool_vector);
        v
    }

    /// Width of the representation handed to the task layers.
    pub fn output_width(&self, pair: bool) -> usize {
        let single = 3 * 2 * self.cfg.lstm_hidden;
        if pair {
            2 * single
        } else {
            single
        }
    }

    /// ReLU feed-forward over token embeddings: (N, L, e).
    fn embed<T: Real>(&self, g: &mut Graph<T>, ids: &[usize], n: usize, l: usize) -> Result<Var> {
        let table = g.param(self.embed)?;
        let w = g.embed(table, ids, &[n, l])?;
        let w = self.feed_forward.forward(g, w)?;
        g.relu(w)
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, input: &BatchInput) -> Result<BiattActivations> {
        let (xs, ys, pair) = segments(input)?;
        let b = xs.len();
        if b == 0 {
            bail!(Student, "empty batch");
        }
        let l = xs.iter().chain(&ys).map(Vec::len).max().unwrap_or(0);
        let (x_ids, mask_x) = pad_rows(&xs, l);
        let (y_ids, mask_y) = pad_rows(&ys, l);
        let w = 2 * self.cfg.lstm_hidden;

        let (x, y) = if pair {
            let mut ids = x_ids;
            ids.extend(&y_ids);
            let mut mask = mask_x.clone();
            mask.extend(&mask_y);
            let e = self.embed(g, &ids, 2 * b, l)?;
            let h = self.encoder.forward(g, e, &mask)?;
            (g.slice(h, 0, 0, b)?, g.slice(h, 0, b, 2 * b)?)
        } else {
            let e = self.embed(g, &x_ids, b, l)?;
            let h = self.encoder.forward(g, e, &mask_x)?;
            (h, h)
        };

        let yt = g.transpose(y)?;
        let a = g.matmul(x, yt)?;
        let a_x = g.masked_softmax(a, 1, &pair_mask(&mask_x, &mask_y, b, l))?;
        let a_xt = g.transpose(a_x)?;
        let c_x = g.matmul(a_xt, x)?;
        let at = g.transpose(a)?;
        let a_y = g.masked_softmax(at, 1, &pair_mask(&mask_y, &mask_x, b, l))?;
        let a_yt = g.transpose(a_y)?;
        let c_y = g.matmul(a_yt, y)?;

        let fuse = |g: &mut Graph<T>, s: Var, c: Var| -> Result<Var> {
            let d = g.sub(s, c)?;
            let p = g.mul(s, c)?;
            g.concat(&[s, d, p], 2)
        };
        let fused_x = fuse(g, x, c_y)?;
        let fused_y = fuse(g, y, c_x)?;

        let pooled = if pair {
            let both = g.concat(&[fused_x, fused_y], 0)?;
            let mut mask = mask_x.clone();
            mask.extend(&mask_y);
            let h = self.integrator.forward(g, both, &mask)?;
            let p = triple_pool(g, h, &mask, self.pool_vector)?;
            let px = g.slice(p, 0, 0, b)?;
            let py = g.slice(p, 0, b, 2 * b)?;
            g.concat(&[px, py], 1)?
        } else {
            let h = self.integrator.forward(g, fused_x, &mask_x)?;
            triple_pool(g, h, &mask_x, self.pool_vector)?
        };
        debug_assert_eq!(g.shape(pooled)[1], if pair { 6 * w } else { 3 * w });
        Ok(BiattActivations {
            mask_x,
            mask_y,
            len: l,
            x,
            y,
            a,
            a_x,
            a_y,
            c_x,
            c_y,
            fused_x,
            fused_y,
            pooled,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::tokenize::Encoding;
    use rand::SeedableRng;

    fn encoding(x: &[u32], y: Option<&[u32]>) -> Encoding {
        let mut token_ids = vec![CLS_ID];
        token_ids.extend_from_slice(x);
        token_ids.push(SEP_ID);
        let mut segment_ids = vec![0u8; token_ids.len()];
        if let Some(y) = y {
            token_ids.extend_from_slice(y);
            token_ids.push(SEP_ID);
            segment_ids.resize(token_ids.len(), 1);
        }
        Encoding {
            token_ids,
            segment_ids,
        }
    }

    fn input(encodings: Vec<Encoding>) -> BatchInput {
        BatchInput {
            task: 0,
            example_ids: (0..encodings.len()).collect(),
            groups: vec![None; encodings.len()],
            encodings,
        }
    }

    fn model() -> (ParamStore<f64>, Biatt) {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cfg = BiattConfig {
            vocab_size: 30,
            embed_dim: 5,
            lstm_hidden: 3,
            task_layer_dim: 4,
        };
        let b = Biatt::new(&mut store, cfg, &mut rng).unwrap();
        (store, b)
    }

    fn run<'a>(store: &'a ParamStore<f64>, b: &Biatt, inp: &BatchInput) -> (BiattActivations, Graph<'a, f64>) {
        let mut g = Graph::inference(store);
        let act = b.encode(&mut g, inp).unwrap();
        (act, g)
    }

    #[test]
    fn splits_segments() {
        let inp = input(vec![encoding(&[5, 6], Some(&[7])), encoding(&[8], Some(&[9, 10, 11]))]);
        let (xs, ys, pair) = segments(&inp).unwrap();
        assert!(pair);
        assert_eq!(xs, vec![vec![5, 6], vec![8]]);
        assert_eq!(ys, vec![vec![7], vec![9, 10, 11]]);
        let single = input(vec![encoding(&[5, 6], None)]);
        assert_eq!(segments(&single).unwrap().1, vec![vec![5, 6]]);
        let mixed = input(vec![encoding(&[5], None), encoding(&[5], Some(&[6]))]);
        assert!(segments(&mixed).is_err());
    }

    #[test]
    fn single_tokens_attend_fully() {
        let (store, b) = model();
        let (act, g) = run(&store, &b, &input(vec![encoding(&[5], Some(&[9]))]));
        assert_eq!(g.value(act.a_x).data(), &[1.0]);
        assert_eq!(g.value(act.a_y).data(), &[1.0]);
        assert_eq!(g.value(act.c_x).data(), g.value(act.x).data());
        assert_eq!(g.value(act.c_y).data(), g.value(act.y).data());
    }

    #[test]
    fn padding_gets_no_attention() {
        let (store, b) = model();
        let inp = input(vec![encoding(&[5, 6, 7, 8], Some(&[9, 10])), encoding(&[11], Some(&[12, 13, 14]))]);
        let (act, g) = run(&store, &b, &inp);
        let l = act.len;
        let ax = g.value(act.a_x);
        for r in 0..2 {
            for i in 0..l {
                for j in 0..l {
                    let valid = act.mask_x[r * l + i] && act.mask_y[r * l + j];
                    if !valid {
                        assert_eq!(ax.at(&[r, i, j]), 0.0);
                    }
                }
            }
            // Columns of A_x over valid y positions sum to one.
            for j in (0..l).filter(|&j| act.mask_y[r * l + j]) {
                let s: f64 = (0..l).map(|i| ax.at(&[r, i, j])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batching_does_not_change_rows() {
        let (store, b) = model();
        let short = encoding(&[5, 6], Some(&[7]));
        let long = encoding(&[8, 9, 10, 11, 12], Some(&[13, 14, 15, 16]));
        let (alone, g1) = run(&store, &b, &input(vec![short.clone()]));
        let (both, g2) = run(&store, &b, &input(vec![short, long]));
        let p1: &Tensor<f64> = g1.value(alone.pooled);
        let p2 = g2.value(both.pooled);
        for (a, c) in p1.data().iter().zip(p2.row(0)) {
            assert!((a - c).abs() < 1e-12, "{a} vs {c}");
        }
    }

    #[test]
    fn rejects_empty_sentences() {
        let (store, b) = model();
        let mut g = Graph::inference(&store);
        assert!(b.encode(&mut g, &input(vec![encoding(&[], None)])).is_err());
        assert!(b.encode(&mut g, &input(vec![])).is_err());
    }
}
