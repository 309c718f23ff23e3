//! NT-Xent over masked embeddings, cross-entropy over classifier logits and
//! their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BatchForward;
use crate::numerics::{l2_norm, Graph, Tensor, Var, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub supervised_weight: f64,
    /// L2-normalize embeddings so similarities are cosines.
    pub normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            supervised_weight: 1.0,
            normalize: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.supervised_weight >= 0.0 && self.supervised_weight.is_finite()) {
            return Err(Error::Config(format!(
                "supervised_weight must be non-negative, got {}",
                self.supervised_weight
            )));
        }
        Ok(())
    }
}

/// NT-Xent for `N` positive pairs given as the rows of `z_a` and `z_b`
/// (`N×d` each). The 2N views are ordered `a_0..a_{N-1}, b_0..b_{N-1}`; every
/// view is an anchor once and the loss is the mean over all 2N anchors.
pub fn nt_xent_var(g: &mut Graph, z_a: Var, z_b: Var, cfg: &LossConfig) -> Result<Var> {
    let (n, _) = g.value(z_a).dims2("nt_xent")?;
    if n < 2 {
        return Err(Error::InsufficientBatch(format!(
            "NT-Xent needs at least 2 pairs, got {n}"
        )));
    }
    let views = g.concat_rows(z_a, z_b)?;
    let views = if cfg.normalize {
        g.l2_normalize_rows(views)?
    } else {
        views
    };
    let sim = g.matmul_t(views, views)?;
    let sim = g.scale(sim, 1.0 / cfg.temperature)?;
    let positives: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    g.off_diagonal_cross_entropy(sim, &positives)
}

/// Value-only NT-Xent on plain matrices.
pub fn nt_xent(z_a: &Tensor, z_b: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.leaf(z_a.clone())?;
    let b = g.leaf(z_b.clone())?;
    let l = nt_xent_var(&mut g, a, b, cfg)?;
    g.value(l).item()
}

/// Mean negative log-softmax of the true classes.
pub fn cross_entropy_var(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone())?;
    let ce = cross_entropy_var(&mut g, l, labels)?;
    g.value(ce).item()
}

/// `contrastive + λ·supervised`.
pub fn total_loss_var(g: &mut Graph, contrastive: Var, supervised: Var, weight: f64) -> Result<Var> {
    let s = g.scale(supervised, weight)?;
    g.add(contrastive, s)
}

pub fn total_loss(contrastive: f64, supervised: f64, weight: f64) -> f64 {
    contrastive + weight * supervised
}

/// Batch loss with its per-term values and mask statistics.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub contrastive: f64,
    pub supervised: f64,
    /// Pairs dropped from the contrastive term because a masked embedding
    /// was (near) zero.
    pub degenerate: usize,
    pub kept: usize,
    /// Mean fraction of ones over the batch's masks.
    pub mask_density: f64,
}

/// Per pair: whether either masked embedding is too short to normalize.
pub fn degenerate_pairs(g: &Graph, out: &BatchForward) -> Vec<bool> {
    let a = g.value(out.z_full_masked);
    let b = g.value(out.z_crop_masked);
    a.rows()
        .zip(b.rows())
        .map(|(ra, rb)| l2_norm(ra) <= NORM_EPS || l2_norm(rb) <= NORM_EPS)
        .collect()
}

/// Full objective for one batch: NT-Xent over the masked pairs that are not
/// degenerate, plus `λ` times cross-entropy of both branches' logits.
///
/// Fails with [`Error::InsufficientBatch`] if fewer than two pairs survive.
pub fn claws_loss(
    g: &mut Graph,
    out: &BatchForward,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let degenerate = degenerate_pairs(g, out);
    let kept_rows: Vec<usize> = (0..degenerate.len()).filter(|&i| !degenerate[i]).collect();
    let n_degenerate = degenerate.len() - kept_rows.len();
    if kept_rows.len() < 2 {
        return Err(Error::InsufficientBatch(format!(
            "{} of {} pairs have degenerate masked embeddings",
            n_degenerate,
            degenerate.len()
        )));
    }
    let (za, zb) = if n_degenerate == 0 {
        (out.z_full_masked, out.z_crop_masked)
    } else {
        (
            g.gather_rows(out.z_full_masked, &kept_rows)?,
            g.gather_rows(out.z_crop_masked, &kept_rows)?,
        )
    };
    let contrastive = nt_xent_var(g, za, zb, cfg)?;

    let logits = g.concat_rows(out.logits_full, out.logits_crop)?;
    let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
    let supervised = cross_entropy_var(g, logits, &doubled)?;
    let total = total_loss_var(g, contrastive, supervised, cfg.supervised_weight)?;

    let mask = g.value(out.mask);
    let mask_density = mask.data().iter().sum::<f64>() / mask.len() as f64;
    Ok(LossBreakdown {
        total,
        contrastive: g.value(contrastive).item()?,
        supervised: g.value(supervised).item()?,
        degenerate: n_degenerate,
        kept: kept_rows.len(),
        mask_density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(tau: f64) -> LossConfig {
        LossConfig {
            temperature: tau,
            ..LossConfig::default()
        }
    }

    /// Direct softmax-over-cosine oracle, written independently of the graph.
    pub(crate) fn nt_xent_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
        let views: Vec<&Vec<f64>> = a.iter().chain(b).collect();
        let n = a.len();
        let cos = |u: &[f64], v: &[f64]| {
            let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (nu * nv)
        };
        let mut total = 0.0;
        for i in 0..2 * n {
            let j = if i < n { i + n } else { i - n };
            let num = (cos(views[i], views[j]) / tau).exp();
            let den: f64 = (0..2 * n)
                .filter(|&k| k != i)
                .map(|k| (cos(views[i], views[k]) / tau).exp())
                .sum();
            total += -(num / den).ln();
        }
        total / (2 * n) as f64
    }

    fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.rows().map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn orthogonal_duplicates_value() {
        // Each anchor: positive cos 1, two negatives cos 0.
        let a = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let l = nt_xent(&a, &a, &cfg(1.0)).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((expected - 0.551_444).abs() < 1e-6);
        assert!((l - expected).abs() < 1e-12);
        assert!((l - nt_xent_oracle(&to_rows(&a), &to_rows(&a), 1.0)).abs() < 1e-12);
    }

    #[test]
    fn temperature_changes_follow_oracle_and_beat_shuffle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let noise = Tensor::randn(&[4, 6], 0.1, &mut rng);
        let b = Tensor::new(
            vec![4, 6],
            a.data().iter().zip(noise.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let shuffled = Tensor::from_rows(&[b.row(1), b.row(2), b.row(3), b.row(0)]).unwrap();
        for tau in [0.1, 0.5, 1.0, 5.0] {
            let l = nt_xent(&a, &b, &cfg(tau)).unwrap();
            assert!((l - nt_xent_oracle(&to_rows(&a), &to_rows(&b), tau)).abs() < 1e-10);
            assert!(l < nt_xent(&a, &shuffled, &cfg(tau)).unwrap());
        }
        let l1 = nt_xent(&a, &b, &cfg(0.5)).unwrap();
        let l10 = nt_xent(&a, &b, &cfg(5.0)).unwrap();
        assert_ne!(l1, l10);
    }

    #[test]
    fn pair_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let pa = Tensor::from_rows(&perm.map(|i| a.row(i))).unwrap();
        let pb = Tensor::from_rows(&perm.map(|i| b.row(i))).unwrap();
        let l = nt_xent(&a, &b, &cfg(0.5)).unwrap();
        assert!((l - nt_xent(&pa, &pb, &cfg(0.5)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let (s, c) = (0.7f64.sin(), 0.7f64.cos());
        let rot = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = t
                .rows()
                .map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1], r[2]])
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let l = nt_xent(&a, &b, &cfg(0.3)).unwrap();
        assert!((l - nt_xent(&rot(&a), &rot(&b), &cfg(0.3)).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn decreasing_temperature_lowers_loss_for_ideal_embeddings() {
        let a = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let mut prev = f64::INFINITY;
        for tau in [2.0, 1.0, 0.5, 0.2, 0.1, 0.05, 0.01] {
            let l = nt_xent(&a, &a, &cfg(tau)).unwrap();
            assert!((l - nt_xent_oracle(&to_rows(&a), &to_rows(&a), tau)).abs() < 1e-10);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn extreme_scaling_stays_finite() {
        let a = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let l = nt_xent(&a, &a, &cfg(0.01)).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn too_few_pairs() {
        let a = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            nt_xent(&a, &a, &cfg(0.5)),
            Err(Error::InsufficientBatch(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[3, 11]);
        let l = cross_entropy(&uniform, &[0, 5, 10]).unwrap();
        assert!((l - 11f64.ln()).abs() < 1e-15);
        assert!((11f64.ln() - 2.3979).abs() < 1e-4);

        let mut peaked = Tensor::zeros(&[1, 3]);
        peaked.data_mut()[1] = 1000.0;
        assert!(cross_entropy(&peaked, &[1]).unwrap() < 1e-12);

        assert!(matches!(
            cross_entropy(&uniform, &[0, 11, 1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_logsumexp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::randn(&[4, 3], 2.0, &mut rng);
        let labels = [2, 0, 1, 1];
        let mut expected = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expected += lse - row[l];
        }
        expected /= 4.0;
        assert!((cross_entropy(&logits, &labels).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn total_is_linear() {
        assert_eq!(total_loss(1.0, 1.0, 1.0), 2.0);
        assert_eq!(total_loss(0.7, 3.0, 0.0), 0.7);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let grad_of = |lambda: Option<f64>, which: u8| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone()).unwrap();
            let yv = g.leaf(y.clone()).unwrap();
            let c = nt_xent_var(&mut g, xv, yv, &cfg(0.5)).unwrap();
            let s = cross_entropy_var(&mut g, xv, &[0, 1, 3]).unwrap();
            let t = match (lambda, which) {
                (Some(l), _) => total_loss_var(&mut g, c, s, l).unwrap(),
                (None, 0) => c,
                _ => s,
            };
            g.backward(t).unwrap().get(xv)
        };
        let lambda = 0.3;
        let total = grad_of(Some(lambda), 0);
        let c = grad_of(None, 0);
        let s = grad_of(None, 1);
        for ((t, a), b) in total.data().iter().zip(c.data()).zip(s.data()) {
            assert!((t - (a + lambda * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(cfg(0.0).validate().is_err());
        let neg = LossConfig {
            supervised_weight: -1.0,
            ..LossConfig::default()
        };
        assert!(neg.validate().is_err());
    }
}
