//! Autoregressive decoding over an arbitrary next-token scorer.

use super::Result;
use crate::tensor::argmax;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam(usize),
}

impl DecodeMode {
    pub fn run<F>(self, step: F, eos: u32, max_len: usize) -> Result<Vec<u32>>
    where
        F: FnMut(&[u32]) -> Result<Vec<f64>>,
    {
        match self {
            DecodeMode::Greedy => greedy(step, eos, max_len),
            DecodeMode::Beam(k) => beam_search(step, eos, max_len, k),
        }
    }
}

/// Repeatedly appends the most likely token. `step` maps the tokens
/// generated so far to next-token log-probabilities. The returned sequence
/// includes `eos` when it was produced.
pub fn greedy<F>(mut step: F, eos: u32, max_len: usize) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    let mut out = Vec::new();
    while out.len() < max_len {
        let logp = step(&out)?;
        let tok = argmax(&logp) as u32;
        out.push(tok);
        if tok == eos {
            break;
        }
    }
    Ok(out)
}

/// Beam search; the winner maximises summed log-probability divided by
/// its token count.
pub fn beam_search<F>(mut step: F, eos: u32, max_len: usize, width: usize) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    let width = width.max(1);
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for (seq, score) in &alive {
            let logp = step(seq)?;
            let mut order: Vec<usize> = (0..logp.len()).collect();
            order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                let mut next = seq.clone();
                next.push(tok as u32);
                candidates.push((next, score + logp[tok]));
            }
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        alive.clear();
        for cand in candidates.into_iter().take(width) {
            if cand.0.last() == Some(&eos) {
                finished.push(cand);
            } else {
                alive.push(cand);
            }
        }
        if alive.is_empty() || finished.len() >= width {
            break;
        }
    }
    let normalized = |(seq, s): &(Vec<u32>, f64)| s / seq.len().max(1) as f64;
    let best = finished
        .iter()
        .chain(alive.iter())
        .fold(None::<&(Vec<u32>, f64)>, |best, c| match best {
            Some(b) if normalized(b) >= normalized(c) => Some(b),
            _ => Some(c),
        });
    Ok(best.map(|b| b.0.clone()).unwrap_or_default())
}
