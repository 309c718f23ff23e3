//! Partition agreement scores over a contingency table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the two entropies are averaged in the NMI/AMI denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    Arithmetic,
    Geometric,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Arithmetic => "arithmetic",
            Normalization::Geometric => "geometric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "arithmetic" => Ok(Normalization::Arithmetic),
            "geometric" => Ok(Normalization::Geometric),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }

    fn mean(self, a: f64, b: f64) -> f64 {
        match self {
            Normalization::Arithmetic => 0.5 * (a + b),
            Normalization::Geometric => (a * b).sqrt(),
        }
    }
}

/// Pair counts between two labelings. Labels are compacted to their sorted
/// distinct values, so rows and columns never hold empty classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contingency {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut values = labels.to_vec();
    values.sort_unstable();
    values.dedup();
    let ids = labels
        .iter()
        .map(|l| values.binary_search(l).expect("value present"))
        .collect();
    (ids, values.len())
}

pub fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(Error::dim("contingency", format!("{} vs {} labels", a.len(), b.len())));
    }
    let (ia, ra) = compact(a);
    let (ib, rb) = compact(b);
    let mut counts = vec![vec![0u64; rb]; ra];
    for (&u, &v) in ia.iter().zip(&ib) {
        counts[u][v] += 1;
    }
    let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
    let col_sums = (0..rb).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency {
        counts,
        row_sums,
        col_sums,
        n: a.len() as u64,
    })
}

impl Contingency {
    fn entropy(sums: &[u64], n: u64) -> f64 {
        let n = n as f64;
        -sums
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    }

    pub fn entropy_rows(&self) -> f64 {
        Self::entropy(&self.row_sums, self.n)
    }

    pub fn entropy_cols(&self) -> f64 {
        Self::entropy(&self.col_sums, self.n)
    }

    /// Mutual information in nats.
    pub fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    let c = c as f64;
                    mi += c / n * (n * c / (self.row_sums[i] as f64 * self.col_sums[j] as f64)).ln();
                }
            }
        }
        mi.max(0.0)
    }

    /// Exact expectation of the mutual information under the permutation
    /// (hypergeometric) model with both marginals fixed.
    pub fn expected_mutual_information(&self) -> f64 {
        let n = self.n as usize;
        let ln_fact = ln_factorials(n);
        let nf = n as f64;
        let mut emi = 0.0;
        for &a in &self.row_sums {
            let a = a as usize;
            for &b in &self.col_sums {
                let b = b as usize;
                let lo = (a + b).saturating_sub(n).max(1);
                let hi = a.min(b);
                let fixed = ln_fact[a] + ln_fact[b] + ln_fact[n - a] + ln_fact[n - b] - ln_fact[n];
                for k in lo..=hi {
                    let kf = k as f64;
                    let ln_p = fixed - ln_fact[k] - ln_fact[a - k] - ln_fact[b - k] - ln_fact[n + k - a - b];
                    emi += kf / nf * (nf * kf / (a as f64 * b as f64)).ln() * ln_p.exp();
                }
            }
        }
        emi
    }

    fn single_cluster(sums: &[u64]) -> bool {
        sums.len() <= 1
    }

    /// Both labelings are the same partition up to relabeling.
    pub fn is_identical_partition(&self) -> bool {
        self.row_sums.len() == self.col_sums.len()
            && self.counts.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
    }
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0f64;
    out.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

/// `Some(score)` when the degenerate single-cluster conventions decide the
/// answer: both single-cluster gives 1, exactly one gives 0.
fn degenerate_score(t: &Contingency) -> Option<f64> {
    match (Contingency::single_cluster(&t.row_sums), Contingency::single_cluster(&t.col_sums)) {
        (true, true) => Some(1.0),
        (true, false) | (false, true) => Some(0.0),
        (false, false) => None,
    }
}

pub fn nmi(a: &[usize], b: &[usize], norm: Normalization) -> Result<f64> {
    let t = contingency(a, b)?;
    if let Some(s) = degenerate_score(&t) {
        return Ok(s);
    }
    let denom = norm.mean(t.entropy_rows(), t.entropy_cols());
    Ok((t.mutual_information() / denom).clamp(0.0, 1.0))
}

pub fn ami(a: &[usize], b: &[usize], norm: Normalization) -> Result<f64> {
    let t = contingency(a, b)?;
    if let Some(s) = degenerate_score(&t) {
        return Ok(s);
    }
    let mi = t.mutual_information();
    let emi = t.expected_mutual_information();
    let denom = norm.mean(t.entropy_rows(), t.entropy_cols()) - emi;
    // Only reachable when every sample is its own cluster on both sides.
    if denom.abs() < 1e-15 {
        return Ok(if t.is_identical_partition() { 1.0 } else { 0.0 });
    }
    Ok(((mi - emi) / denom).min(1.0))
}

fn pairs(c: u64) -> i128 {
    let c = i128::from(c);
    c * (c - 1) / 2
}

/// Adjusted Rand index, computed in exact integer arithmetic up to the final
/// division.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = contingency(a, b)?;
    if let Some(s) = degenerate_score(&t) {
        return Ok(s);
    }
    let index: i128 = t.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let sa: i128 = t.row_sums.iter().map(|&c| pairs(c)).sum();
    let sb: i128 = t.col_sums.iter().map(|&c| pairs(c)).sum();
    let total = pairs(t.n);
    let num = 2 * total * index - 2 * sa * sb;
    let den = total * (sa + sb) - 2 * sa * sb;
    if den == 0 {
        // Both partitions put every sample in its own cluster.
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Normalization = Normalization::Arithmetic;

    #[test]
    fn contingency_examples() {
        let t = contingency(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(t.counts, vec![vec![2, 0], vec![0, 2]]);
        let t = contingency(&[0, 0, 1, 2], &[5, 5, 9, 3]).unwrap();
        assert_eq!(t.counts, vec![vec![0, 2, 0], vec![0, 0, 1], vec![1, 0, 0]]);
        assert_eq!(t.row_sums, vec![2, 1, 1]);
        assert_eq!(t.col_sums, vec![1, 2, 1]);
        assert!(matches!(contingency(&[0], &[0, 1]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn small_examples() {
        let a = [0, 0, 1, 1];
        assert_eq!(nmi(&a, &a, A).unwrap(), 1.0);
        assert_eq!(nmi(&a, &[1, 1, 0, 0], A).unwrap(), 1.0);
        assert_eq!(nmi(&a, &[0, 1, 0, 1], A).unwrap(), 0.0);
        assert_eq!(ari(&a, &a).unwrap(), 1.0);
        assert_eq!(ari(&a, &[0, 1, 0, 1]).unwrap(), -0.5);
        assert!((ami(&a, &a, A).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_conventions() {
        let one = [0, 0, 0, 0];
        let two = [0, 1, 0, 1];
        assert_eq!(nmi(&one, &one, A).unwrap(), 1.0);
        assert_eq!(ami(&one, &one, A).unwrap(), 1.0);
        assert_eq!(ari(&one, &one).unwrap(), 1.0);
        assert_eq!(nmi(&one, &two, A).unwrap(), 0.0);
        assert_eq!(ami(&two, &one, A).unwrap(), 0.0);
        assert_eq!(ari(&one, &two).unwrap(), 0.0);
        let all = [0, 1, 2, 3];
        assert_eq!(ari(&all, &[3, 2, 1, 0]).unwrap(), 1.0);
        assert_eq!(ami(&all, &[3, 2, 1, 0], A).unwrap(), 1.0);
    }

    #[test]
    fn geometric_normalization() {
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 0, 1, 1, 2, 2];
        let t = contingency(&a, &b).unwrap();
        let expected = t.mutual_information() / (t.entropy_rows() * t.entropy_cols()).sqrt();
        assert!((nmi(&a, &b, Normalization::Geometric).unwrap() - expected).abs() < 1e-15);
        assert_eq!(Normalization::parse("geometric").unwrap(), Normalization::Geometric);
        assert!(Normalization::parse("max").is_err());
    }
}
