//! Brute-force reference implementations shared by the integration tests.
//! They follow the written definitions directly and share no code with the
//! library.

#![allow(dead_code)]

use saig::data::OverlapLabels;

/// `ln(1 + e^z)`, split so large `z` cannot overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Every ordered triplet as `(d_pos, d_neg)`: ground anchors compare row
/// entries, aerial anchors compare column entries.
pub fn enumerate_triplets(d: &[Vec<f64>], mask: Option<&[Vec<bool>]>) -> Vec<(f64, f64)> {
    let n = d.len();
    let skip = |i: usize, j: usize| mask.is_some_and(|m| m[i][j]);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && !skip(i, j) {
                out.push((d[i][i], d[i][j]));
            }
        }
        for j in 0..n {
            if i != j && !skip(j, i) {
                out.push((d[i][i], d[j][i]));
            }
        }
    }
    out
}

pub fn exhaustive_oracle(d: &[Vec<f64>], alpha: f64, mask: Option<&[Vec<bool>]>) -> f64 {
    let t = enumerate_triplets(d, mask);
    t.iter().map(|&(p, q)| softplus(alpha * (p - q))).sum::<f64>() / t.len() as f64
}

/// Smallest negative above `d_pos`, else the largest negative.
pub fn semi_hard_oracle_pick(d_pos: f64, negatives: &[f64]) -> f64 {
    let mut sorted = negatives.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .iter()
        .copied()
        .find(|&v| v > d_pos)
        .unwrap_or(*sorted.last().unwrap())
}

pub fn semi_hard_oracle(d: &[Vec<f64>], alpha: f64) -> f64 {
    let n = d.len();
    let mut terms = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i][j]).collect();
        let col: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[j][i]).collect();
        for negs in [row, col] {
            terms.push(softplus(alpha * (d[i][i] - semi_hard_oracle_pick(d[i][i], &negs))));
        }
    }
    terms.iter().sum::<f64>() / terms.len() as f64
}

/// Unstabilized symmetric InfoNCE; callers keep `s / tau` small.
pub fn info_nce_oracle(s: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|k| (s[i][k] / tau).exp()).sum();
        let col: f64 = (0..n).map(|k| (s[k][i] / tau).exp()).sum();
        total += -((s[i][i] / tau).exp() / row).ln();
        total += -((s[i][i] / tau).exp() / col).ln();
    }
    total / (2 * n) as f64
}

pub fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// 1-based rank of the first positive, if any.
fn first_positive_rank(ranking: &[u64], labels: &OverlapLabels) -> Option<usize> {
    let mut rank = 0;
    for id in ranking {
        rank += 1;
        if labels.positives.iter().any(|p| p == id) {
            return Some(rank);
        }
    }
    None
}

pub fn recall_oracle(rankings: &[Vec<u64>], labels: &[OverlapLabels], k: usize) -> f64 {
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, l)| first_positive_rank(r, l).is_some_and(|rank| rank <= k))
        .count();
    hits as f64 / rankings.len() as f64
}

pub fn hit_rate_oracle(rankings: &[Vec<u64>], labels: &[OverlapLabels]) -> f64 {
    let mut hits = 0;
    for (r, l) in rankings.iter().zip(labels) {
        let top = r[0];
        if l.positives.contains(&top) || l.semi_positives.contains(&top) {
            hits += 1;
        }
    }
    hits as f64 / rankings.len() as f64
}

/// Mean over queries with a positive of the precision at each positive's
/// position, semi-positives removed from the list first.
pub fn map_oracle(rankings: &[Vec<u64>], labels: &[OverlapLabels]) -> (f64, usize) {
    let mut aps = Vec::new();
    for (r, l) in rankings.iter().zip(labels) {
        if l.positives.is_empty() {
            continue;
        }
        let kept: Vec<u64> = r.iter().copied().filter(|id| !l.semi_positives.contains(id)).collect();
        let mut precisions = Vec::new();
        for (pos, id) in kept.iter().enumerate() {
            if l.positives.contains(id) {
                let relevant_so_far = kept[..=pos].iter().filter(|x| l.positives.contains(x)).count();
                precisions.push(relevant_so_far as f64 / (pos + 1) as f64);
            }
        }
        aps.push(precisions.iter().sum::<f64>() / l.positives.len() as f64);
    }
    let mean = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    (mean, aps.len())
}

/// Deterministic xorshift stream for building random test instances.
pub struct Stream(u64);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }
}

/// Random rankings over `n_ref` ids with random positive and semi-positive
/// sets; some queries get no positive at all.
pub fn random_retrieval(seed: u64, n_query: usize, n_ref: usize) -> (Vec<Vec<u64>>, Vec<OverlapLabels>) {
    let mut s = Stream::new(seed);
    let ids: Vec<u64> = (0..n_ref as u64).map(|i| i * 7 + 3).collect();
    let mut rankings = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n_query {
        let mut r = ids.clone();
        s.shuffle(&mut r);
        let mut pool = ids.clone();
        s.shuffle(&mut pool);
        let n_pos = s.below(4.min(n_ref + 1));
        let n_semi = s.below(4.min(n_ref - n_pos + 1));
        labels.push(OverlapLabels {
            positives: pool[..n_pos].to_vec(),
            semi_positives: pool[n_pos..n_pos + n_semi].to_vec(),
        });
        rankings.push(r);
    }
    (rankings, labels)
}

/// Random distance matrix with entries in `[0, 2]`.
pub fn random_distances(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut s = Stream::new(seed);
    (0..n).map(|_| (0..n).map(|_| 2.0 * s.unit()).collect()).collect()
}
