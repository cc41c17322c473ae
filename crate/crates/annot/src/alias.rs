//! Per-instance blinding: which configured model hides behind which letter.

use rand::seq::SliceRandom;

use attnprobe::seed;

/// `A`, `B`, ..., `Z`, `AA`, `AB`, ...
pub fn alias_name(mut k: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (k % 26) as u8);
        if k < 26 {
            break;
        }
        k = k / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

/// Bijection between aliases and model indices for one instance of a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliasMap {
    /// `order[k]` is the model index shown as alias `k`.
    order: Vec<usize>,
}

impl AliasMap {
    /// Uniformly random permutation drawn from `(seed, rater_id, instance_id)`.
    pub fn new(seed: u64, rater_id: &str, instance_id: &str, n_models: usize) -> Self {
        let mut order: Vec<usize> = (0..n_models).collect();
        let mut rng = seed::derived_rng(seed, &format!("alias\u{1f}{rater_id}\u{1f}{instance_id}"));
        order.shuffle(&mut rng);
        Self { order }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn aliases(&self) -> Vec<String> {
        (0..self.order.len()).map(alias_name).collect()
    }

    pub fn model_of(&self, alias: &str) -> Option<usize> {
        (0..self.order.len())
            .find(|&k| alias_name(k) == alias)
            .map(|k| self.order[k])
    }

    pub fn alias_of(&self, model: usize) -> Option<String> {
        self.order.iter().position(|&m| m == model).map(alias_name)
    }

    /// `(alias, model index)` in alias order.
    pub fn iter(&self) -> impl Iterator<Item = (String, usize)> + '_ {
        self.order.iter().enumerate().map(|(k, &m)| (alias_name(k), m))
    }
}
