//! Importance sampling with replacement from a diversity-weight distribution.
//!
//! Draws use a Walker alias table (Vose's construction), so each draw costs
//! one uniform index, one uniform coin and a comparison. The generator is
//! ChaCha8 seeded from a `u64`, which fixes batches for a given seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vendi::ProbabilityVector;

/// Generator used by every seeded routine in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AliasTable {
    /// Probability of keeping cell `i` rather than jumping to `alias[i]`.
    probability: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    pub fn new(p: &ProbabilityVector) -> Self {
        let n = p.len();
        let mut probability = vec![0.0; n];
        let mut alias: Vec<usize> = (0..n).collect();
        let mut scaled: Vec<f64> = p.as_slice().iter().map(|v| v * n as f64).collect();

        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            probability[s] = scaled[s].clamp(0.0, 1.0);
            alias[s] = l;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers are 1 up to round-off.
        for i in large.into_iter().chain(small) {
            probability[i] = 1.0;
            alias[i] = i;
        }
        Self { probability, alias }
    }

    pub fn len(&self) -> usize {
        self.probability.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probability.is_empty()
    }

    pub fn probability(&self) -> &[f64] {
        &self.probability
    }

    pub fn alias(&self) -> &[usize] {
        &self.alias
    }

    /// Distribution induced by the table: each cell carries mass `1/n`, split
    /// between itself and its alias.
    pub fn induced_distribution(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut out = vec![0.0; self.len()];
        for (i, (&keep, &a)) in self.probability.iter().zip(&self.alias).enumerate() {
            out[i] += keep / n;
            out[a] += (1.0 - keep) / n;
        }
        out
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let cell = rng.random_range(0..self.len());
        let coin: f64 = rng.random();
        if coin < self.probability[cell] {
            cell
        } else {
            self.alias[cell]
        }
    }
}

pub fn build_alias_table(p: &ProbabilityVector) -> AliasTable {
    AliasTable::new(p)
}

/// `batch_size` i.i.d. indices drawn with replacement.
pub fn sample_batch(
    table: &AliasTable,
    batch_size: usize,
    rng_seed: u64,
    with_replacement: bool,
) -> Result<Vec<usize>> {
    if !with_replacement {
        return Err(Error::Unsupported(
            "sampling without replacement is not supported".into(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let mut rng = seeded_rng(rng_seed);
    Ok((0..batch_size).map(|_| table.draw(&mut rng)).collect())
}

/// Index list as CSV: `draw,index`.
pub fn batch_csv(indices: &[usize]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("draw,index\n");
    for (i, idx) in indices.iter().enumerate() {
        let _ = writeln!(out, "{i},{idx}");
    }
    out
}
