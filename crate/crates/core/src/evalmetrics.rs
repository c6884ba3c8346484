//! kNN-manifold precision, recall, density and coverage, the F1 of
//! precision and coverage, Fréchet distance, and per-group evaluation with
//! worst-group selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::chamfer::chamfer;
use crate::error::{Error, Result};
use crate::featspace::{squared_distance, FeatureSet, NeighborIndex};
use crate::numkit::{sym_eig, sym_sqrt, Matrix};

/// Covariance ridge added before the matrix square root.
pub const FRECHET_RIDGE: f64 = 1e-6;

pub const DEFAULT_K: usize = 5;

/// Squared distance from each point to its `k`-th nearest neighbor in the
/// same set, the point itself excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldRadii {
    pub radii2: Vec<f64>,
    pub k: usize,
}

impl ManifoldRadii {
    pub fn compute(points: &Matrix, k: usize) -> Result<Self> {
        if points.rows() <= k || k == 0 {
            return Err(Error::Metric(format!("need more than k = {k} points, got {}", points.rows())));
        }
        // the k+1 nearest include the point itself at distance 0
        let idx = NeighborIndex::new(points.clone());
        let radii2 = points.iter_rows().map(|p| idx.query(p, k + 1).dist2[k]).collect();
        Ok(Self { radii2, k })
    }
}

fn check_pair(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<()> {
    real.check_compatible(gen)?;
    for (name, s) in [("real", real), ("generated", gen)] {
        if s.len() <= k {
            return Err(Error::Metric(format!("{name} set has {} points, needs more than k = {k}", s.len())));
        }
    }
    Ok(())
}

/// Number of balls `B(c_i, r_i)` containing each query point.
fn ball_counts(centers: &Matrix, radii: &ManifoldRadii, queries: &Matrix) -> Vec<usize> {
    queries
        .iter_rows()
        .map(|q| centers.iter_rows().zip(&radii.radii2).filter(|(c, &r2)| squared_distance(c, q) <= r2).count())
        .collect()
}

fn fraction_inside(centers: &Matrix, radii: &ManifoldRadii, queries: &Matrix) -> f64 {
    let mut inside = 0usize;
    for q in queries.iter_rows() {
        if centers.iter_rows().zip(&radii.radii2).any(|(c, &r2)| squared_distance(c, q) <= r2) {
            inside += 1;
        }
    }
    inside as f64 / queries.rows() as f64
}

pub fn precision_recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    check_pair(real, gen, k)?;
    let (x, y) = (&real.features, &gen.features);
    let precision = fraction_inside(x, &ManifoldRadii::compute(x, k)?, y);
    let recall = fraction_inside(y, &ManifoldRadii::compute(y, k)?, x);
    Ok((precision, recall))
}

pub fn density_coverage(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    check_pair(real, gen, k)?;
    let (x, y) = (&real.features, &gen.features);
    let radii = ManifoldRadii::compute(x, k)?;
    let total: usize = ball_counts(x, &radii, y).iter().sum();
    let density = total as f64 / (k * y.rows()) as f64;
    let nearest_gen = NeighborIndex::new(y.clone());
    let covered = x
        .iter_rows()
        .zip(&radii.radii2)
        .filter(|(p, &r2)| nearest_gen.query(p, 1).dist2[0] <= r2)
        .count();
    Ok((density, covered as f64 / x.rows() as f64))
}

/// Harmonic mean of precision and coverage.
pub fn f1_pc(precision: f64, coverage: f64) -> Result<f64> {
    for (name, v) in [("precision", precision), ("coverage", coverage)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!("{name} {v} outside [0, 1]")));
        }
    }
    if precision + coverage == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * coverage / (precision + coverage))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    a.check_compatible(b)?;
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric("Fréchet distance needs at least 2 points per set".into()));
    }
    let (fa, fb) = (&a.features, &b.features);
    frechet_from_stats(&fa.mean_rows(), &fa.covariance(), &fb.mean_rows(), &fb.covariance())
}

/// `||mu_a - mu_b||² + Tr(S_a + S_b - 2 (S_a^½ S_b S_a^½)^½)` with both
/// covariances ridged by [`FRECHET_RIDGE`].
pub fn frechet_from_stats(mu_a: &Matrix, cov_a: &Matrix, mu_b: &Matrix, cov_b: &Matrix) -> Result<f64> {
    mu_a.ensure_same_shape("frechet means", mu_b)?;
    cov_a.ensure_same_shape("frechet covariances", cov_b)?;
    let d = cov_a.rows();
    let ridge = Matrix::identity(d).scale(FRECHET_RIDGE);
    let sa = cov_a.add(&ridge)?;
    let sb = cov_b.add(&ridge)?;
    let root_a = sym_sqrt(&sa)?;
    let mut m = root_a.matmul(&sb)?.matmul(&root_a)?;
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let (vals, _) = sym_eig(&m)?;
    let tr_root: f64 = vals.as_slice().iter().map(|&v| libm::sqrt(v.max(0.0))).sum();
    let mean_term = mu_a.sub(mu_b)?.sum_sq();
    let fd = mean_term + sa.trace() + sb.trace() - 2.0 * tr_root;
    if !fd.is_finite() {
        return Err(Error::Numerical("non-finite Fréchet distance"));
    }
    Ok(fd.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub f1_pc: f64,
    pub frechet: f64,
    pub chamfer: f64,
    pub knn_k: usize,
    pub n_real: usize,
    pub n_gen: usize,
    pub per_group: Option<BTreeMap<usize, MetricsReport>>,
    /// Group with the lowest `f1_pc`, lowest id on ties.
    pub worst_group: Option<usize>,
}

impl MetricsReport {
    pub fn worst(&self) -> Option<&MetricsReport> {
        let g = self.worst_group?;
        self.per_group.as_ref()?.get(&g)
    }
}

fn report(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<MetricsReport> {
    let (precision, recall) = precision_recall(real, gen, k)?;
    let (density, coverage) = density_coverage(real, gen, k)?;
    Ok(MetricsReport {
        precision,
        recall,
        density,
        coverage,
        f1_pc: f1_pc(precision, coverage)?,
        frechet: frechet(real, gen)?,
        chamfer: chamfer(real, gen)?.total,
        knn_k: k,
        n_real: real.len(),
        n_gen: gen.len(),
        per_group: None,
        worst_group: None,
    })
}

/// Group labels for the real and generated rows.
#[derive(Clone, Copy, Debug)]
pub struct GroupLabels<'a> {
    pub real: &'a [usize],
    pub gen: &'a [usize],
}

/// Overall metrics, plus per-group metrics and the worst group when labels
/// are given.
pub fn evaluate(real: &FeatureSet, gen: &FeatureSet, k: usize, groups: Option<GroupLabels<'_>>) -> Result<MetricsReport> {
    let mut overall = report(real, gen, k)?;
    let Some(g) = groups else {
        return Ok(overall);
    };
    if g.real.len() != real.len() || g.gen.len() != gen.len() {
        return Err(Error::Metric("group labels do not match set sizes".into()));
    }
    let mut ids: Vec<usize> = g.real.iter().chain(g.gen).copied().collect();
    ids.sort_unstable();
    ids.dedup();
    let mut per_group = BTreeMap::new();
    for id in ids {
        let rr: Vec<usize> = (0..real.len()).filter(|&i| g.real[i] == id).collect();
        let gr: Vec<usize> = (0..gen.len()).filter(|&i| g.gen[i] == id).collect();
        if rr.len() <= k || gr.len() <= k {
            return Err(Error::Metric(format!(
                "group {id} has {} real and {} generated points, needs more than k = {k} of each",
                rr.len(),
                gr.len()
            )));
        }
        per_group.insert(id, report(&real.subset(&rr), &gen.subset(&gr), k)?);
    }
    let mut worst: Option<(usize, f64)> = None;
    for (&id, r) in &per_group {
        if worst.is_none_or(|(_, f)| r.f1_pc < f) {
            worst = Some((id, r.f1_pc));
        }
    }
    overall.worst_group = worst.map(|w| w.0);
    overall.per_group = Some(per_group);
    Ok(overall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featspace::{Projector, Source};
    use crate::numkit::{gauss, RngStream};

    fn fs(m: Matrix) -> FeatureSet {
        FeatureSet::new(m, Projector::identity(0).id(), Source::Real).unwrap()
    }

    #[test]
    fn identical_sets() {
        let x = fs(gauss(&mut RngStream::new(1), 40, 3));
        assert_eq!(precision_recall(&x, &x, 5).unwrap(), (1.0, 1.0));
        assert_eq!(density_coverage(&x, &x, 5).unwrap().1, 1.0);
        assert!(frechet(&x, &x).unwrap() <= 1e-6);
    }

    #[test]
    fn disjoint_sets() {
        let x = gauss(&mut RngStream::new(2), 30, 2);
        let y = x.map(|v| v + 1e4);
        let (x, y) = (fs(x), fs(y));
        assert_eq!(precision_recall(&x, &y, 3).unwrap(), (0.0, 0.0));
        assert_eq!(density_coverage(&x, &y, 3).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn f1_values() {
        assert!((f1_pc(0.950, 0.912).unwrap() - 0.931).abs() < 1e-3);
        assert!((f1_pc(0.975, 0.927).unwrap() - 0.950).abs() < 1e-3);
        assert_eq!(f1_pc(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(f1_pc(0.0, 0.7).unwrap(), 0.0);
        assert!((f1_pc(0.4, 0.4).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(f1_pc(1.2, 0.5), Err(Error::Contract(_))));
        assert!(f1_pc(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn too_few_points() {
        let x = fs(Matrix::zeros(3, 2));
        assert!(matches!(precision_recall(&x, &x, 3), Err(Error::Metric(_))));
    }

    #[test]
    fn commuting_covariances() {
        let mu = Matrix::row_vector(&[0.0, 0.0]);
        let fd = frechet_from_stats(&mu, &Matrix::identity(2), &mu, &Matrix::from_diag(&[4.0, 1.0])).unwrap();
        assert!((fd - 1.0).abs() < 1e-6, "{fd}");
    }

    #[test]
    fn single_group_matches_overall() {
        let mut r = RngStream::new(3);
        let x = fs(gauss(&mut r, 30, 2));
        let y = fs(gauss(&mut r, 30, 2));
        let rep = evaluate(&x, &y, 3, Some(GroupLabels { real: &[0; 30], gen: &[0; 30] })).unwrap();
        let g = rep.per_group.as_ref().unwrap()[&0].clone();
        assert_eq!((g.precision, g.recall, g.density, g.coverage), (rep.precision, rep.recall, rep.density, rep.coverage));
        assert_eq!(rep.worst_group, Some(0));
    }

    #[test]
    fn undersized_group_is_named() {
        let x = fs(Matrix::zeros(10, 2));
        let mut labels = [0usize; 10];
        labels[9] = 7;
        let err = evaluate(&x, &x, 3, Some(GroupLabels { real: &labels, gen: &labels })).unwrap_err();
        assert!(format!("{err}").contains("group 7"), "{err}");
    }
}
