use rand::Rng;

use super::RawExample;
use crate::error::{bail, Result};
use crate::exec::Exec;
use crate::seed;
use crate::tokenize::MASK;

pub const PROVENANCE_PREFIX: &str = "#mtkd-aug";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_mask: f64,
    pub multiplier: usize,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn new(p_mask: f64, multiplier: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_mask) {
            bail!(Data, "p_mask must lie in [0, 1], got {p_mask}");
        }
        if multiplier < 1 {
            bail!(Data, "augmentation multiplier must be at least 1");
        }
        Ok(Self {
            p_mask,
            multiplier,
            seed,
        })
    }

    pub fn provenance_line(&self) -> String {
        format!(
            "{PROVENANCE_PREFIX} seed={} p={} mult={}",
            self.seed, self.p_mask, self.multiplier
        )
    }
}

/// Reads the provenance header of an augmented TSV, if present.
pub fn read_provenance(text: &str) -> Result<Option<AugmentConfig>> {
    let Some(line) = text.lines().next().filter(|l| l.starts_with(PROVENANCE_PREFIX)) else {
        return Ok(None);
    };
    let (mut seed, mut p, mut mult) = (None, None, None);
    for kv in line[PROVENANCE_PREFIX.len()..].split_whitespace() {
        match kv.split_once('=') {
            Some(("seed", v)) => seed = v.parse().ok(),
            Some(("p", v)) => p = v.parse().ok(),
            Some(("mult", v)) => mult = v.parse().ok(),
            _ => bail!(Data, "malformed provenance field {kv:?}"),
        }
    }
    match (p, mult, seed) {
        (Some(p), Some(m), Some(s)) => AugmentConfig::new(p, m, s).map(Some),
        _ => bail!(Data, "incomplete provenance line {line:?}"),
    }
}

/// Replaces each whitespace-delimited word by `[MASK]` with probability `p`.
/// Whitespace is kept verbatim; one draw is consumed per word.
pub fn mask_words<R: Rng>(text: &str, p: f64, rng: &mut R) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while !rest.is_empty() {
        let ws = rest.len() - rest.trim_start().len();
        out.push_str(&rest[..ws]);
        rest = &rest[ws..];
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        if end == 0 {
            break;
        }
        let word = &rest[..end];
        if rng.gen::<f64>() < p {
            out.push_str(MASK);
        } else {
            out.push_str(word);
        }
        rest = &rest[end..];
    }
    out
}

/// Masks both sentences of an example independently; the label is untouched.
pub fn mask_augment<R: Rng>(example: &RawExample, p_mask: f64, rng: &mut R) -> RawExample {
    RawExample {
        sentence1: mask_words(&example.sentence1, p_mask, rng),
        sentence2: example
            .sentence2
            .as_ref()
            .map(|s| mask_words(s, p_mask, rng)),
        label: example.label,
        group: example.group,
    }
}

/// The original examples once, followed by `multiplier − 1` masked copies.
///
/// Copy `k` draws from its own stream of the seeded generator, so copies can be
/// produced in parallel without changing the result. Ranking groups in copy
/// `k` get fresh ids offset by `k` times the largest original id plus one.
pub fn build_augmented_dataset(examples: &[RawExample], cfg: &AugmentConfig, exec: Exec) -> Vec<RawExample> {
    let stride = examples
        .iter()
        .filter_map(|e| e.group)
        .max()
        .map_or(0, |g| g + 1);
    let copies = exec.map_range(cfg.multiplier - 1, |k| {
        let copy = k as u64 + 1;
        let mut rng = seed::rng(cfg.seed);
        rng.set_stream(copy);
        examples
            .iter()
            .map(|ex| {
                let mut m = mask_augment(ex, cfg.p_mask, &mut rng);
                m.group = ex.group.map(|g| g + copy * stride);
                m
            })
            .collect::<Vec<_>>()
    });
    let mut out = Vec::with_capacity(examples.len() * cfg.multiplier);
    out.extend_from_slice(examples);
    for c in copies {
        out.extend(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn ex(s1: &str, s2: Option<&str>) -> RawExample {
        RawExample {
            sentence1: s1.into(),
            sentence2: s2.map(Into::into),
            label: Label::Class(1),
            group: None,
        }
    }

    #[test]
    fn degenerate_probabilities() {
        let mut rng = seed::rng(1);
        let text = "the  cat\tsat down";
        assert_eq!(mask_words(text, 0.0, &mut rng), text);
        assert_eq!(mask_words(text, 1.0, &mut rng), "[MASK]  [MASK]\t[MASK] [MASK]");
    }

    #[test]
    fn labels_and_sentence_count_preserved() {
        let mut rng = seed::rng(3);
        let out = mask_augment(&ex("a b c", Some("d e")), 0.5, &mut rng);
        assert_eq!(out.label, Label::Class(1));
        assert!(out.sentence2.is_some());
        assert_eq!(out.sentence1.split_whitespace().count(), 3);
    }

    #[test]
    fn multiplier_one_is_identity() {
        let data = vec![ex("a b", None), ex("c", None)];
        let cfg = AugmentConfig::new(0.5, 1, 0).unwrap();
        assert_eq!(build_augmented_dataset(&data, &cfg, Exec::Sequential), data);
    }

    #[test]
    fn copies_do_not_depend_on_policy() {
        let data: Vec<_> = (0..20).map(|i| ex(&format!("w{i} x y z"), Some("u v"))).collect();
        let cfg = AugmentConfig::new(0.3, 5, 11).unwrap();
        let a = build_augmented_dataset(&data, &cfg, Exec::Sequential);
        let b = build_augmented_dataset(&data, &cfg, Exec::Parallel);
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(&a[..20], &data[..]);
    }

    #[test]
    fn ranking_groups_stay_distinct_across_copies() {
        let mut data = vec![ex("q", Some("a")), ex("q", Some("b"))];
        data[0].group = Some(0);
        data[1].group = Some(2);
        let cfg = AugmentConfig::new(0.1, 3, 0).unwrap();
        let out = build_augmented_dataset(&data, &cfg, Exec::Sequential);
        let groups: Vec<_> = out.iter().map(|e| e.group.unwrap()).collect();
        assert_eq!(groups, [0, 2, 3, 5, 6, 8]);
    }

    #[test]
    fn provenance_round_trip_and_validation() {
        let cfg = AugmentConfig::new(0.1, 40, 42).unwrap();
        let text = format!("{}\nrow\n", cfg.provenance_line());
        assert_eq!(read_provenance(&text).unwrap(), Some(cfg));
        assert_eq!(read_provenance("row\n").unwrap(), None);
        assert!(AugmentConfig::new(1.5, 1, 0).is_err());
        assert!(AugmentConfig::new(0.1, 0, 0).is_err());
    }
}
