//! Synthetic factual-recall task.
//!
//! Token ids `0..num_relations` are relations, the rest are entities. A fact
//! is a two-token subject plus a relation, mapped to one object entity; the
//! model reads `[s1, s2, relation]` and predicts the object at the last
//! position. Every `(subject, relation)` key occurs at most once, so the
//! object is a function of the key.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Tokens per fact prompt.
pub const FACT_LEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub subject: [usize; 2],
    pub relation: usize,
    pub object: usize,
}

impl Fact {
    pub fn tokens(&self) -> [usize; FACT_LEN] {
        [self.subject[0], self.subject[1], self.relation]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactDataset {
    pub facts: Vec<Fact>,
    /// Indices into `facts` used for evaluation; always a subset of training.
    pub eval: Vec<usize>,
    pub vocab: usize,
    pub num_relations: usize,
    pub seed: u64,
}

/// Draws `num_facts` facts with distinct `(subject, relation)` keys.
pub fn gen_facts(num_facts: usize, vocab: usize, num_relations: usize, seed: u64) -> Result<FactDataset> {
    if num_relations == 0 || num_relations >= vocab {
        return Err(Error::config(format!(
            "need 1..{vocab} relations, got {num_relations}"
        )));
    }
    let entities = vocab - num_relations;
    let keys = entities * entities * num_relations;
    // rejection sampling stays fast while at most half the key space is used
    if num_facts == 0 || num_facts > keys / 2 {
        return Err(Error::config(format!(
            "{num_facts} facts do not fit in {keys} (subject, relation) keys"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(num_facts);
    let mut facts = Vec::with_capacity(num_facts);
    while facts.len() < num_facts {
        let subject = [
            num_relations + rng.gen_range(0..entities),
            num_relations + rng.gen_range(0..entities),
        ];
        let relation = rng.gen_range(0..num_relations);
        if seen.insert((subject, relation)) {
            let object = num_relations + rng.gen_range(0..entities);
            facts.push(Fact {
                subject,
                relation,
                object,
            });
        }
    }
    Ok(FactDataset {
        facts,
        eval: Vec::new(),
        vocab,
        num_relations,
        seed,
    })
}

impl FactDataset {
    /// Picks `size` distinct training facts (all of them if fewer) for evaluation.
    pub fn with_eval(mut self, size: usize) -> Self {
        let mut idx: Vec<usize> = (0..self.facts.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_e7a1);
        idx.shuffle(&mut rng);
        idx.truncate(size.min(self.facts.len()));
        idx.sort_unstable();
        self.eval = idx;
        self
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Flattened prompts `[ids.len()·FACT_LEN]` and object targets.
    pub fn batch(&self, ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut tokens = Vec::with_capacity(ids.len() * FACT_LEN);
        let mut targets = Vec::with_capacity(ids.len());
        for &i in ids {
            tokens.extend(self.facts[i].tokens());
            targets.push(self.facts[i].object);
        }
        (tokens, targets)
    }

    /// Human-readable form, e.g. `e17 e302 r3 -> e88`.
    pub fn render(&self, i: usize) -> String {
        let f = &self.facts[i];
        let e = |t: usize| format!("e{}", t - self.num_relations);
        format!("{} {} r{} -> {}", e(f.subject[0]), e(f.subject[1]), f.relation, e(f.object))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(bincode::serialize(self)?)
    }

    /// Keys that occur more than once (always empty for generated data).
    pub fn key_collisions(&self) -> Vec<([usize; 2], usize)> {
        let mut seen = HashSet::new();
        self.facts
            .iter()
            .map(|f| (f.subject, f.relation))
            .filter(|k| !seen.insert(*k))
            .collect()
    }
}
