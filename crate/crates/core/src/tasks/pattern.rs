use super::{Dataset, Geometry, Split, TaskKind, TaskSpec};
use crate::autodiff::{streams, RngStream};
use crate::error::{Result, SpgError};

/// Motif shared by every split of a task.
pub(crate) fn motif(spec: &TaskSpec, vocab: usize, period: usize) -> Vec<usize> {
    let mut rng = RngStream::new(spec.seed, streams::DATA + 0x10);
    rng.permutation(vocab).into_iter().take(period).collect()
}

/// Sequences following a fixed motif of distinct tokens from a random phase.
/// Each token is independently replaced, with probability `noise`, by a
/// uniformly drawn different token. Position `l` of a sample sees tokens
/// `l..l + window` and predicts token `l + window`; it is marked clean when
/// none of the tokens it sees was replaced.
pub fn gen_pattern_lm(spec: &TaskSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let Geometry::Pattern {
        vocab,
        seq_len,
        window,
        period,
    } = spec.geometry
    else {
        return Err(SpgError::invalid("not a language modelling task"));
    };
    let motif = motif(spec, vocab, period);
    let n = spec.counts.get(split);
    let mut rng = RngStream::new(spec.seed, split.stream());
    let len = seq_len + window;
    let mut features = Vec::with_capacity(n * seq_len * window);
    let mut targets = Vec::with_capacity(n * seq_len);
    let mut clean = Vec::with_capacity(n * seq_len);
    for _ in 0..n {
        let phase = rng.below(period as u64) as usize;
        let mut tokens = Vec::with_capacity(len);
        let mut replaced = Vec::with_capacity(len);
        for j in 0..len {
            let base = motif[(phase + j) % period];
            if rng.next_f64() < spec.noise {
                let mut v = rng.below(vocab as u64 - 1) as usize;
                if v >= base {
                    v += 1;
                }
                tokens.push(v);
                replaced.push(true);
            } else {
                tokens.push(base);
                replaced.push(false);
            }
        }
        for l in 0..seq_len {
            features.extend(tokens[l..l + window].iter().map(|&t| t as f64));
            targets.push(tokens[l + window]);
            clean.push(!replaced[l..l + window].iter().any(|&r| r));
        }
    }
    Ok(Dataset {
        kind: TaskKind::LanguageModeling,
        split,
        samples: n,
        units_per_sample: seq_len,
        feature_dim: window,
        classes: vocab,
        grid: None,
        features,
        targets,
        clean: Some(clean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_targets_follow_motif() {
        let mut spec = TaskSpec::pattern_preset(4);
        spec.noise = 0.0;
        let Geometry::Pattern { vocab, period, window, .. } = spec.geometry else {
            unreachable!()
        };
        let m = motif(&spec, vocab, period);
        let d = gen_pattern_lm(&spec, Split::Train).unwrap();
        assert!(d.clean.as_ref().unwrap().iter().all(|&c| c));
        for (u, &t) in d.targets.iter().enumerate() {
            let last = d.features[u * window + window - 1] as usize;
            let pos = m.iter().position(|&x| x == last).unwrap();
            assert_eq!(t, m[(pos + 1) % period]);
        }
    }

    #[test]
    fn substitution_rate() {
        let mut spec = TaskSpec::pattern_preset(8);
        spec.noise = 0.2;
        spec.counts.train = 4000;
        let Geometry::Pattern { vocab, period, window, .. } = spec.geometry else {
            unreachable!()
        };
        let m = motif(&spec, vocab, period);
        let d = gen_pattern_lm(&spec, Split::Train).unwrap();
        // targets at clean positions deviate from the motif at rate q
        let mut n = 0usize;
        let mut off = 0usize;
        for (u, &t) in d.targets.iter().enumerate() {
            if !d.clean.as_ref().unwrap()[u] {
                continue;
            }
            let last = d.features[u * window + window - 1] as usize;
            let pos = m.iter().position(|&x| x == last).unwrap();
            n += 1;
            off += usize::from(t != m[(pos + 1) % period]);
        }
        let rate = off as f64 / n as f64;
        let sd = (0.2 * 0.8 / n as f64).sqrt();
        assert!((rate - 0.2).abs() < 4.0 * sd, "{rate}");
    }

    #[test]
    fn two_by_three_units() {
        let mut spec = TaskSpec::pattern_preset(0);
        spec.geometry = Geometry::Pattern {
            vocab: 6,
            seq_len: 3,
            window: 2,
            period: 3,
        };
        spec.counts.train = 2;
        let d = gen_pattern_lm(&spec, Split::Train).unwrap();
        assert_eq!(d.units(), 6);
    }
}
