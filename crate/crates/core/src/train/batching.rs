use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Batch, Example};

/// Groups examples of similar length so that no batch exceeds `max_tokens`
/// padded tokens (source plus target, counting EOS/BOS). An example longer
/// than the cap gets a batch of its own.
pub fn token_batches(examples: &[Example], max_tokens: usize) -> Result<Vec<Vec<usize>>> {
    if max_tokens == 0 {
        return Err(Error::Contract("token batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let key = |i: usize| (examples[i].src.len() + 1, examples[i].tgt.len() + 1);
    order.sort_by_key(|&i| (key(i), i));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let (mut max_s, mut max_t) = (0, 0);
    for i in order {
        let (s, t) = key(i);
        let (ns, nt) = (max_s.max(s), max_t.max(t));
        if !cur.is_empty() && (cur.len() + 1) * (ns + nt) > max_tokens {
            batches.push(std::mem::take(&mut cur));
            max_s = s;
            max_t = t;
        } else {
            max_s = ns;
            max_t = nt;
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

pub fn build_batches(examples: &[Example], groups: &[Vec<usize>]) -> Result<Vec<Batch>> {
    groups
        .iter()
        .map(|g| {
            let refs: Vec<&Example> = g.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs)
        })
        .collect()
}

/// Deterministic per-epoch visiting order.
pub fn epoch_order(num_batches: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..num_batches).collect();
    order.shuffle(&mut rng);
    order
}
