//! Empirical smoothness of a shared representation across tasks: the largest
//! observed `‖h(x₁) − h(x₂)‖ / ‖x₁ − x₂‖` over cross-task probe pairs. This is
//! a lower bound on any Lipschitz constant of h, not an estimate of it.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::BatchInput;
use crate::error::{bail, Result};
use crate::seed;
use crate::student::{Body, Student};
use crate::tensor::{Graph, Real};
use crate::tokenize::{Encoding, PAD_ID};

/// Input pairs closer than this are skipped.
pub const MIN_INPUT_DISTANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub eta_hat: f64,
    pub pairs: usize,
    pub excluded: usize,
    pub representation: String,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Max ratio over all pairs (i from the first set, j from the second).
pub fn lipschitz_from_points(
    x1: &[Vec<f64>],
    h1: &[Vec<f64>],
    x2: &[Vec<f64>],
    h2: &[Vec<f64>],
    representation: &str,
) -> Result<LipschitzEstimate> {
    if x1.len() != h1.len() || x2.len() != h2.len() {
        bail!(Eval, "each probe needs both an input and a representation");
    }
    let mut est = LipschitzEstimate {
        eta_hat: 0.0,
        pairs: 0,
        excluded: 0,
        representation: representation.to_string(),
    };
    for (a, ha) in x1.iter().zip(h1) {
        for (b, hb) in x2.iter().zip(h2) {
            if a.len() != b.len() || ha.len() != hb.len() {
                bail!(Eval, "probe dimensions differ between the two tasks");
            }
            let dx = dist(a, b);
            if dx < MIN_INPUT_DISTANCE {
                est.excluded += 1;
                continue;
            }
            est.pairs += 1;
            est.eta_hat = est.eta_hat.max(dist(ha, hb) / dx);
        }
    }
    if est.pairs == 0 {
        bail!(Eval, "every probe pair was closer than {MIN_INPUT_DISTANCE:e}");
    }
    Ok(est)
}

/// Probe points of a student: x is the mean token embedding of the whole
/// input, h the student's shared representation. For the bi-attentive body
/// h is the pooled first-sentence half, which has the same width for single
/// sentences and pairs.
pub fn student_probes<T: Real>(
    student: &Student<T>,
    task: usize,
    encodings: &[Encoding],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (table, width) = match &student.body {
        Body::Biatt(b) => (b.embed, b.output_width(false)),
        Body::Transformer(e) => (e.tokens, e.cfg.width),
    };
    let emb = student.store.value(table);
    let dim = emb.shape()[1];
    let mut xs = Vec::with_capacity(encodings.len());
    for e in encodings {
        let mut acc = vec![0.0; dim];
        let mut n = 0usize;
        for &t in e.token_ids.iter().filter(|&&t| t != PAD_ID) {
            for (a, v) in acc.iter_mut().zip(emb.row(t as usize)) {
                *a += v.as_f64();
            }
            n += 1;
        }
        if n == 0 {
            bail!(Eval, "probe input has no tokens");
        }
        xs.push(acc.into_iter().map(|a| a / n as f64).collect());
    }
    let input = BatchInput {
        task,
        example_ids: (0..encodings.len()).collect(),
        encodings: encodings.to_vec(),
        groups: vec![None; encodings.len()],
    };
    let mut g = Graph::inference(&student.store);
    let r = student.represent(&mut g, &input)?;
    let hs = g
        .value(r)
        .to_f64_vec()
        .chunks(g.shape(r)[1])
        .map(|row| row[..width].to_vec())
        .collect();
    Ok((xs, hs))
}

/// Diagnostic over up to `samples` seeded-random probes from each task.
pub fn lipschitz_ratio<T: Real>(
    student: &Student<T>,
    first: (usize, &[Encoding]),
    second: (usize, &[Encoding]),
    samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if samples < 2 {
        bail!(Eval, "sample count must be at least 2");
    }
    let mut rng = seed::rng_for(seed, "lipschitz");
    let mut pick = |enc: &[Encoding]| {
        let mut idx: Vec<usize> = (0..enc.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(samples);
        idx.into_iter().map(|i| enc[i].clone()).collect::<Vec<_>>()
    };
    let (a, b) = (pick(first.1), pick(second.1));
    let (x1, h1) = student_probes(student, first.0, &a)?;
    let (x2, h2) = student_probes(student, second.0, &b)?;
    let tag = format!("{}:{}~{}", student.cfg.name(), student.tasks[first.0].name, student.tasks[second.0].name);
    lipschitz_from_points(&x1, &h1, &x2, &h2, &tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            vec![vec![0.0, 1.0], vec![2.0, -1.0]],
            vec![vec![1.0, 1.0], vec![0.5, 3.0], vec![2.0, -1.0]],
        )
    }

    #[test]
    fn identity_and_scaled_identity() {
        let (a, b) = pts();
        let e = lipschitz_from_points(&a, &a, &b, &b, "id").unwrap();
        assert_eq!(e.eta_hat, 1.0);
        assert_eq!((e.pairs, e.excluded), (5, 1));
        let twice = |v: &Vec<Vec<f64>>| v.iter().map(|r| r.iter().map(|x| 2.0 * x).collect()).collect::<Vec<Vec<f64>>>();
        let e2 = lipschitz_from_points(&a, &twice(&a), &b, &twice(&b), "2id").unwrap();
        assert_eq!(e2.eta_hat, 2.0);
    }

    #[test]
    fn all_pairs_excluded_is_an_error() {
        let a = vec![vec![1.0]];
        assert!(lipschitz_from_points(&a, &a, &a, &a, "id").is_err());
    }
}
