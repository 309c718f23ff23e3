//! Diagonal Gaussian mixtures fitted by EM, with one component designated as
//! the outlier component.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::plus_plus_seeds;
use crate::numerics::{logsumexp, Tensor};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub components: usize,
    pub seed: u64,
    /// Stop once the mean per-sample log-likelihood gains less than this.
    pub tol: f64,
    pub max_iter: usize,
    pub variance_floor: f64,
    /// Independent EM runs; the highest final log-likelihood wins, ties to
    /// the earliest run.
    pub restarts: usize,
    /// L2-normalize embeddings before fitting.
    pub normalize: bool,
    /// Z-score every column before fitting (after `normalize`).
    pub standardize: bool,
    /// Columns kept in the inspection projection.
    pub dims: usize,
    /// The broadest component is the outlier component only when its mean
    /// variance is at least this multiple of the runner-up's.
    pub broadness_ratio: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 3,
            seed: 0,
            tol: 1e-8,
            max_iter: 500,
            restarts: 5,
            variance_floor: 1e-6,
            normalize: false,
            standardize: true,
            dims: 3,
            broadness_ratio: 2.0,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Config("gmm components must be positive".into()));
        }
        if self.max_iter == 0 || self.restarts == 0 {
            return Err(Error::Config("gmm max_iter and restarts must be positive".into()));
        }
        if !(self.broadness_ratio >= 1.0) {
            return Err(Error::Config("gmm broadness_ratio must be ≥ 1".into()));
        }
        if !(self.variance_floor > 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Config("gmm variance_floor must be > 0 and tol ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Diagonal covariances.
    pub variances: Vec<Vec<f64>>,
    /// `None` when no component is diffuse enough to hold outliers.
    pub outlier_component: Option<usize>,
    /// Total log-likelihood before every M-step and once at the end.
    pub log_likelihood: Vec<f64>,
    /// Trace indices at which a collapsed component was re-seeded. The trace
    /// is non-decreasing between consecutive re-seeds.
    pub reseeds: Vec<usize>,
    pub converged: bool,
}

/// Effective sample count below which a component counts as collapsed.
const MIN_COMPONENT_MASS: f64 = 2.0;
/// Consecutive iterations with every variance at the floor before a
/// component counts as collapsed.
const FLOOR_PATIENCE: usize = 3;

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `ln π_k + ln N(x | μ_k, Σ_k)` for every component.
    fn joint_log(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len() as f64;
        for (k, o) in out.iter_mut().enumerate() {
            let mut quad = 0.0;
            let mut log_det = 0.0;
            for ((xi, m), v) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
                quad += (xi - m) * (xi - m) / v;
                log_det += v.ln();
            }
            *o = self.weights[k].ln() - 0.5 * (d * (2.0 * PI).ln() + log_det + quad);
        }
    }

    /// Responsibilities `N×K` and the total log-likelihood.
    fn e_step(&self, x: &Tensor) -> (Vec<Vec<f64>>, f64) {
        let mut joint = vec![0.0; self.components()];
        let mut total = 0.0;
        let resp = x
            .rows()
            .map(|row| {
                self.joint_log(row, &mut joint);
                let lse = logsumexp(&joint);
                total += lse;
                joint.iter().map(|j| (j - lse).exp()).collect()
            })
            .collect();
        (resp, total)
    }

    fn check_dim(&self, x: &Tensor, op: &'static str) -> Result<()> {
        let (_, d) = x.dims2(op)?;
        if d != self.dim() {
            return Err(Error::dim(op, format!("model has d = {}, data has d = {d}", self.dim())));
        }
        Ok(())
    }

    pub fn log_likelihood_of(&self, x: &Tensor) -> Result<f64> {
        self.check_dim(x, "gmm_log_likelihood")?;
        Ok(self.e_step(x).1)
    }

    pub fn mean_variance(&self, k: usize) -> f64 {
        self.variances[k].iter().sum::<f64>() / self.dim() as f64
    }

    /// The broadest component by mean variance, ties to the lower weight and
    /// then the lower index, provided it is `ratio` times broader than every
    /// other component. A single component is never an outlier component.
    pub fn designate_outlier(&mut self, ratio: f64) {
        let mut order: Vec<usize> = (0..self.components()).collect();
        order.sort_by(|&a, &b| {
            self.mean_variance(b)
                .total_cmp(&self.mean_variance(a))
                .then(self.weights[a].total_cmp(&self.weights[b]))
        });
        self.outlier_component = match order.as_slice() {
            [best, second, ..] if self.mean_variance(*best) >= ratio * self.mean_variance(*second) => Some(*best),
            _ => None,
        };
    }
}

fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.dims2("gmm").expect("checked");
    let mut mean = vec![0.0; d];
    for row in x.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for row in x.rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    (mean, var)
}

fn column_variances(x: &Tensor) -> Vec<f64> {
    column_moments(x).1
}

/// Columns shifted to zero mean and scaled to unit variance. Constant
/// columns are only centered.
pub fn standardize_columns(x: &Tensor) -> Result<Tensor> {
    let (_, d) = x.dims2("standardize_columns")?;
    let (mean, var) = column_moments(x);
    let scale: Vec<f64> = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % d]) / scale[i % d])
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Best of `cfg.restarts` EM runs.
pub fn gmm_fit(x: &Tensor, cfg: &GmmConfig) -> Result<GmmModel> {
    cfg.validate()?;
    let mut best: Option<GmmModel> = None;
    for r in 0..cfg.restarts as u64 {
        let run = gmm_fit_once(x, cfg, rng::derive_seed(&[cfg.seed, r]))?;
        let ll = |m: &GmmModel| *m.log_likelihood.last().expect("non-empty trace");
        if best.as_ref().is_none_or(|b| ll(&run) > ll(b)) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts > 0"))
}

/// One EM run from k-means++ means, the pooled variance and uniform weights.
pub fn gmm_fit_once(x: &Tensor, cfg: &GmmConfig, seed: u64) -> Result<GmmModel> {
    cfg.validate()?;
    let (n, d) = x.dims2("gmm_fit")?;
    let k = cfg.components;
    if n < k * 2 {
        return Err(Error::Fit(format!("{n} samples are too few for {k} components")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "gmm_fit" });
    }
    let mut rng = rng::stream(&[seed, tag::GMM]);
    let pooled: Vec<f64> = column_variances(x).into_iter().map(|v| v.max(cfg.variance_floor)).collect();
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: plus_plus_seeds(x, k, &mut rng),
        variances: vec![pooled.clone(); k],
        outlier_component: None,
        log_likelihood: Vec::new(),
        reseeds: Vec::new(),
        converged: false,
    };
    let mut reseeded = vec![false; k];
    let mut floored_for = vec![0usize; k];

    for _ in 0..cfg.max_iter {
        let (resp, ll) = model.e_step(x);
        if let (Some(&prev), false) = (model.log_likelihood.last(), model.reseeds.last() == Some(&model.log_likelihood.len())) {
            if (ll - prev) / (n as f64) < cfg.tol {
                model.log_likelihood.push(ll);
                model.converged = true;
                break;
            }
        }
        model.log_likelihood.push(ll);

        // M-step, fixed summation order.
        let mut collapsed = None;
        for c in 0..k {
            let mass: f64 = resp.iter().map(|r| r[c]).sum();
            if mass < MIN_COMPONENT_MASS {
                collapsed = Some(c);
                break;
            }
            let mut mean = vec![0.0; d];
            for (row, r) in x.rows().zip(&resp) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += r[c] * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= mass);
            let mut var = vec![0.0; d];
            for (row, r) in x.rows().zip(&resp) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += r[c] * (v - m) * (v - m);
                }
            }
            let mut all_floored = true;
            for s in &mut var {
                *s /= mass;
                if *s > cfg.variance_floor {
                    all_floored = false;
                } else {
                    *s = cfg.variance_floor;
                }
            }
            floored_for[c] = if all_floored { floored_for[c] + 1 } else { 0 };
            if floored_for[c] >= FLOOR_PATIENCE {
                collapsed = Some(c);
                break;
            }
            model.weights[c] = mass / n as f64;
            model.means[c] = mean;
            model.variances[c] = var;
        }
        if let Some(c) = collapsed {
            if reseeded[c] {
                return Err(Error::Fit(format!("component {c} collapsed again after re-seeding")));
            }
            reseeded[c] = true;
            floored_for[c] = 0;
            // Restart the component at the worst-explained sample.
            let mut joint = vec![0.0; k];
            let worst = x
                .rows()
                .enumerate()
                .map(|(i, row)| {
                    model.joint_log(row, &mut joint);
                    (i, logsumexp(&joint))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("n > 0")
                .0;
            model.means[c] = x.row(worst).to_vec();
            model.variances[c] = pooled.clone();
            model.weights = vec![1.0 / k as f64; k];
            model.reseeds.push(model.log_likelihood.len());
            continue;
        }
        let total: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= total);
    }
    if !model.converged {
        let (_, ll) = model.e_step(x);
        model.log_likelihood.push(ll);
    }
    model.designate_outlier(cfg.broadness_ratio);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmAssignment {
    pub labels: Vec<usize>,
    /// `N×K`, rows sum to one.
    pub responsibilities: Vec<Vec<f64>>,
}

pub fn gmm_assign(model: &GmmModel, x: &Tensor) -> Result<GmmAssignment> {
    model.check_dim(x, "gmm_assign")?;
    let (responsibilities, _) = model.e_step(x);
    let labels = responsibilities
        .iter()
        .map(|r| {
            let mut best = 0;
            for k in 1..r.len() {
                if r[k] > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(GmmAssignment {
        labels,
        responsibilities,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleComponent {
    pub id: String,
    pub component: usize,
    pub responsibilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub outlier_component: Option<usize>,
    pub outlier_ids: Vec<String>,
    pub populations: Vec<usize>,
    pub n_samples: usize,
    pub weights: Vec<f64>,
    pub checkpoint_id: String,
    pub samples: Vec<SampleComponent>,
}

impl OutlierReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn detect_outliers(model: &GmmModel, x: &Tensor, ids: &[String], checkpoint_id: &str) -> Result<OutlierReport> {
    if ids.len() != x.shape()[0] {
        return Err(Error::dim("detect_outliers", format!("{} ids for {} rows", ids.len(), x.shape()[0])));
    }
    let a = gmm_assign(model, x)?;
    let mut populations = vec![0; model.components()];
    for &l in &a.labels {
        populations[l] += 1;
    }
    let samples: Vec<SampleComponent> = ids
        .iter()
        .zip(&a.labels)
        .zip(a.responsibilities)
        .map(|((id, &component), responsibilities)| SampleComponent {
            id: id.clone(),
            component,
            responsibilities,
        })
        .collect();
    Ok(OutlierReport {
        outlier_component: model.outlier_component,
        outlier_ids: samples
            .iter()
            .filter(|s| Some(s.component) == model.outlier_component)
            .map(|s| s.id.clone())
            .collect(),
        populations,
        n_samples: ids.len(),
        weights: model.weights.clone(),
        checkpoint_id: checkpoint_id.to_string(),
        samples,
    })
}

/// A random subset of `n_dims` columns, in draw order.
pub fn select_dims(x: &Tensor, n_dims: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let (n, d) = x.dims2("select_dims")?;
    if n_dims == 0 || n_dims > d {
        return Err(Error::dim("select_dims", format!("cannot pick {n_dims} of {d} columns")));
    }
    let mut rng = rng::stream(&[seed, tag::DIMS]);
    let chosen = index::sample(&mut rng, d, n_dims).into_vec();
    let data = (0..n).flat_map(|i| chosen.iter().map(move |&j| x.data()[i * d + j])).collect();
    Ok((Tensor::new(vec![n, n_dims], data)?, chosen))
}

/// `sample_id,x,y,z,component` rows for an external scatter plot, after a
/// `#` provenance line listing the chosen dimensions.
pub fn projection_csv(ids: &[String], projection: &Tensor, dims: &[usize], components: &[usize], provenance: &str) -> Result<String> {
    let (n, k) = projection.dims2("projection_csv")?;
    if k != 3 || ids.len() != n || components.len() != n {
        return Err(Error::dim("projection_csv", format!("{n}×{k} projection, {} ids, {} components", ids.len(), components.len())));
    }
    let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    let mut out = format!("# dims={} {provenance}\nsample_id,x,y,z,component\n", dims.join(","));
    for (i, id) in ids.iter().enumerate() {
        let r = projection.row(i);
        writeln!(out, "{id},{},{},{},{}", r[0], r[1], r[2], components[i]).unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, mean: f64, std: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(&[seed]);
        (0..n)
            .map(|_| (0..d).map(|_| { let z: f64 = StandardNormal.sample(&mut r); mean + std * z }).collect())
            .collect()
    }

    #[test]
    fn single_component_is_the_mle() {
        let rows = gaussian(400, 4, 2.0, 0.5, 1);
        let x = Tensor::from_rows(&rows).unwrap();
        let m = gmm_fit(&x, &GmmConfig { components: 1, ..GmmConfig::default() }).unwrap();
        assert_eq!(m.weights, vec![1.0]);
        let var = column_variances(&x);
        for j in 0..4 {
            let mean: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / 400.0;
            assert!((m.means[0][j] - mean).abs() < 1e-12);
            assert!((m.variances[0][j] - var[j]).abs() < 1e-12);
            assert!((m.means[0][j] - 2.0).abs() < 3.0 * 0.5 / 20.0);
        }
    }

    fn blobs_with_scatter(seed: u64) -> (Tensor, Vec<bool>) {
        let mut rows = gaussian(190, 2, -5.0, 0.3, seed);
        rows.extend(gaussian(190, 2, 5.0, 0.3, seed + 1));
        let mut r = rng::stream(&[seed, 99]);
        let mut truth = vec![false; 380];
        for _ in 0..20 {
            rows.push(vec![r.random_range(-15.0..15.0), r.random_range(-15.0..15.0)]);
            truth.push(true);
        }
        (Tensor::from_rows(&rows).unwrap(), truth)
    }

    #[test]
    fn broad_component_captures_planted_scatter() {
        let (x, truth) = blobs_with_scatter(3);
        let m = gmm_fit(&x, &GmmConfig::default()).unwrap();
        for w in m.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        let lowest = (0..3).min_by(|&a, &b| m.weights[a].total_cmp(&m.weights[b])).unwrap();
        assert_eq!(Some(lowest), m.outlier_component);
        let ids: Vec<String> = (0..400).map(|i| i.to_string()).collect();
        let rep = detect_outliers(&m, &x, &ids, "ck").unwrap();
        let hits = rep.outlier_ids.iter().filter(|id| truth[id.parse::<usize>().unwrap()]).count();
        assert!(hits >= 16, "captured {hits}/20");
        assert!(hits as f64 / rep.outlier_ids.len() as f64 >= 0.5);
        assert_eq!(rep.populations.iter().sum::<usize>(), 400);
    }

    #[test]
    fn weights_form_a_simplex_and_fit_is_deterministic() {
        let (x, _) = blobs_with_scatter(5);
        let a = gmm_fit(&x, &GmmConfig::default()).unwrap();
        let b = gmm_fit(&x, &GmmConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.weights.iter().all(|&w| w > 0.0));
        assert!(a.variances.iter().flatten().all(|&v| v >= 1e-6));
    }

    #[test]
    fn responsibilities_and_relabeling() {
        let m = GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0, 0.0], vec![3.0, 3.0]],
            variances: vec![vec![0.01, 0.01], vec![1.0, 1.0]],
            outlier_component: Some(1),
            log_likelihood: vec![],
            reseeds: vec![],
            converged: true,
        };
        let x = Tensor::from_rows(&[[0.0, 0.0], [3.0, 3.0], [1.0, -1.0]]).unwrap();
        let a = gmm_assign(&m, &x).unwrap();
        assert!(a.responsibilities[0][0] > 0.99);
        for r in &a.responsibilities {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let swapped = GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![m.means[1].clone(), m.means[0].clone()],
            variances: vec![m.variances[1].clone(), m.variances[0].clone()],
            ..m.clone()
        };
        let b = gmm_assign(&swapped, &x).unwrap();
        assert!(a.labels.iter().zip(&b.labels).all(|(p, q)| *p == 1 - q));
        assert!(gmm_assign(&m, &Tensor::from_rows(&[[1.0]]).unwrap()).is_err());
    }

    #[test]
    fn clean_data_flags_few_outliers() {
        let mut rows = gaussian(500, 3, -4.0, 1.0, 11);
        rows.extend(gaussian(500, 3, 4.0, 1.0, 12));
        let x = Tensor::from_rows(&rows).unwrap();
        let m = gmm_fit(&x, &GmmConfig::default()).unwrap();
        let ids: Vec<String> = (0..1000).map(|i| i.to_string()).collect();
        let rep = detect_outliers(&m, &x, &ids, "").unwrap();
        assert!(rep.outlier_ids.len() <= 20, "{} flagged", rep.outlier_ids.len());
    }

    #[test]
    fn designation_rule() {
        let mut m = GmmModel {
            weights: vec![0.2, 0.5, 0.3],
            means: vec![vec![0.0]; 3],
            variances: vec![vec![4.0], vec![1.0], vec![4.0]],
            outlier_component: None,
            log_likelihood: vec![],
            reseeds: vec![],
            converged: true,
        };
        m.designate_outlier(2.0);
        assert_eq!(m.outlier_component, None);
        m.designate_outlier(1.0);
        assert_eq!(m.outlier_component, Some(0));
        m.variances[2] = vec![9.0];
        m.designate_outlier(2.0);
        assert_eq!(m.outlier_component, Some(2));
    }

    #[test]
    fn standardized_columns() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]).unwrap();
        let z = standardize_columns(&x).unwrap();
        let (mean, var) = column_moments(&z);
        assert!(mean.iter().all(|m| m.abs() < 1e-15));
        assert!((var[0] - 1.0).abs() < 1e-12);
        assert_eq!(var[1], 0.0);
    }

    #[test]
    fn dims_selection() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| (0..32).map(|j| (i * 100 + j) as f64).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let (p, idx) = select_dims(&x, 3, 4).unwrap();
        assert_eq!(select_dims(&x, 3, 4).unwrap().1, idx);
        for i in 0..5 {
            for (c, &j) in idx.iter().enumerate() {
                assert_eq!(p.row(i)[c].to_bits(), x.row(i)[j].to_bits());
            }
        }
        let (_, all) = select_dims(&x, 32, 4).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..32).collect::<Vec<_>>());
        assert!(select_dims(&x, 33, 4).is_err());
        let csv = projection_csv(&vec!["a".to_string(); 5], &p, &idx, &[0; 5], "checkpoint_id=x").unwrap();
        assert!(csv.lines().nth(1) == Some("sample_id,x,y,z,component"));
        assert_eq!(csv.lines().count(), 7);
    }
}
