use std::time::Instant;

use serde::Serialize;

use crate::data::BatchInput;
use crate::error::{bail, Result};
use crate::model::TaskModel;
use crate::tokenize::{Encoding, CLS_ID, SEP_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Untimed batches run first.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batches: 100,
            batch_size: 128,
            seq_len: 128,
            warmup: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub batches: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub total_seconds: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
}

fn cycle(src: &[u32], n: usize) -> Vec<u32> {
    src.iter().copied().cycle().take(n).collect()
}

/// Stretches an encoding to exactly `len` tokens by repeating each
/// segment's tokens.
fn fit_length(e: &Encoding, len: usize) -> Result<Encoding> {
    let ids = &e.token_ids;
    let sep = ids.iter().position(|&t| t == SEP_ID).unwrap_or(ids.len());
    let a = &ids[1.min(ids.len())..sep];
    let b = if e.is_pair() {
        &ids[(sep + 1).min(ids.len())..ids.len().saturating_sub(1)]
    } else {
        &[][..]
    };
    if a.is_empty() || (e.is_pair() && b.is_empty()) {
        bail!(Eval, "benchmark input has an empty segment");
    }
    let mut token_ids = vec![CLS_ID];
    let mut segment_ids = vec![0u8];
    if e.is_pair() {
        if len < 5 {
            bail!(Eval, "sequence length {len} is too short for a pair");
        }
        let na = (len - 3).div_ceil(2);
        let nb = len - 3 - na;
        token_ids.extend(cycle(a, na));
        token_ids.push(SEP_ID);
        segment_ids.resize(na + 2, 0);
        token_ids.extend(cycle(b, nb));
        token_ids.push(SEP_ID);
        segment_ids.resize(len, 1);
    } else {
        if len < 3 {
            bail!(Eval, "sequence length {len} is too short");
        }
        token_ids.extend(cycle(a, len - 2));
        token_ids.push(SEP_ID);
        segment_ids.resize(len, 0);
    }
    Ok(Encoding {
        token_ids,
        segment_ids,
    })
}

/// `count` batches of `cfg.batch_size` inputs of exactly `cfg.seq_len`
/// tokens, cycling through `dataset`.
pub fn bench_inputs(task: usize, dataset: &[Encoding], count: usize, cfg: &BenchConfig) -> Result<Vec<BatchInput>> {
    if dataset.is_empty() {
        bail!(Eval, "benchmark needs a non-empty dataset");
    }
    if cfg.batch_size < 1 {
        bail!(Eval, "batch_size must be at least 1");
    }
    let fitted: Vec<Encoding> = dataset.iter().map(|e| fit_length(e, cfg.seq_len)).collect::<Result<_>>()?;
    Ok((0..count)
        .map(|k| {
            let rows: Vec<usize> = (0..cfg.batch_size).map(|i| (k * cfg.batch_size + i) % fitted.len()).collect();
            BatchInput {
                task,
                example_ids: rows.clone(),
                encodings: rows.iter().map(|&r| fitted[r].clone()).collect(),
                groups: vec![None; rows.len()],
            }
        })
        .collect())
}

/// Times evaluation-mode forward passes one batch after another on the
/// calling thread. Inputs are built before timing starts.
pub fn bench_inference<M: TaskModel<f32>>(
    model: &M,
    name: &str,
    task: usize,
    dataset: &[Encoding],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if cfg.batches < 1 {
        bail!(Eval, "benchmark needs at least one timed batch");
    }
    let inputs = bench_inputs(task, dataset, cfg.warmup + cfg.batches, cfg)?;
    for input in &inputs[..cfg.warmup] {
        model.logits(input)?;
    }
    let mut times = Vec::with_capacity(cfg.batches);
    for input in &inputs[cfg.warmup..] {
        let start = Instant::now();
        let z = model.logits(input)?;
        std::hint::black_box(&z);
        times.push(start.elapsed().as_secs_f64());
    }
    let total: f64 = times.iter().sum();
    let mean = total / times.len() as f64;
    let var = if times.len() > 1 {
        times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (times.len() - 1) as f64
    } else {
        0.0
    };
    Ok(BenchReport {
        model: name.to_string(),
        batches: cfg.batches,
        batch_size: cfg.batch_size,
        seq_len: cfg.seq_len,
        total_seconds: total,
        mean_ms: mean * 1e3,
        std_ms: var.sqrt() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_have_exact_length() {
        let single = Encoding {
            token_ids: vec![CLS_ID, 7, 8, SEP_ID],
            segment_ids: vec![0; 4],
        };
        let pair = Encoding {
            token_ids: vec![CLS_ID, 7, SEP_ID, 9, SEP_ID],
            segment_ids: vec![0, 0, 0, 1, 1],
        };
        let f = fit_length(&single, 9).unwrap();
        assert_eq!(f.token_ids, vec![CLS_ID, 7, 8, 7, 8, 7, 8, 7, SEP_ID]);
        let p = fit_length(&pair, 10).unwrap();
        assert_eq!(p.token_ids, vec![CLS_ID, 7, 7, 7, 7, SEP_ID, 9, 9, 9, SEP_ID]);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1]);
        let cfg = BenchConfig {
            batches: 1,
            batch_size: 3,
            seq_len: 9,
            warmup: 0,
        };
        let b = bench_inputs(0, &[single], 2, &cfg).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 3 && x.encodings.iter().all(|e| e.len() == 9)));
    }
}
