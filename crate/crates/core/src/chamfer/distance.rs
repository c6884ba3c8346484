use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::featspace::{squared_distance, FeatureSet};
use crate::numkit::Matrix;

/// Both directional terms of the Chamfer distance between a real set `X`
/// and a generated set `Y`, with the argmin matchings used.
#[derive(Clone, Debug, PartialEq)]
pub struct ChamferBreakdown {
    pub total: f64,
    /// `(1/|X|) Σ_x min_y ||x - y||²`, every real point matched (diversity).
    pub term_real_to_gen: f64,
    /// `(1/|Y|) Σ_y min_x ||x - y||²`, every generated point matched (fidelity).
    pub term_gen_to_real: f64,
    /// For each real point, the index of its nearest generated point.
    pub real_to_gen: Vec<usize>,
    /// For each generated point, the index of its nearest real point.
    pub gen_to_real: Vec<usize>,
}

/// Chamfer distance on raw matrices. Argmin ties go to the lowest index.
pub fn chamfer_points(real: &Matrix, generated: &Matrix) -> Result<ChamferBreakdown> {
    if real.rows() == 0 || generated.rows() == 0 {
        return Err(Error::contract("chamfer distance needs two non-empty sets"));
    }
    if real.cols() != generated.cols() {
        return Err(Error::Dimension { op: "chamfer", expected: (generated.rows(), real.cols()), got: generated.shape() });
    }
    let (nx, ny) = (real.rows(), generated.rows());
    let mut best_x = vec![f64::INFINITY; nx];
    let mut real_to_gen = vec![0usize; nx];
    let mut best_y = vec![f64::INFINITY; ny];
    let mut gen_to_real = vec![0usize; ny];
    for (i, x) in real.iter_rows().enumerate() {
        for (j, y) in generated.iter_rows().enumerate() {
            let d = squared_distance(x, y);
            if d < best_x[i] {
                best_x[i] = d;
                real_to_gen[i] = j;
            }
            if d < best_y[j] {
                best_y[j] = d;
                gen_to_real[j] = i;
            }
        }
    }
    let term_real_to_gen = best_x.iter().sum::<f64>() / nx as f64;
    let term_gen_to_real = best_y.iter().sum::<f64>() / ny as f64;
    Ok(ChamferBreakdown {
        total: term_real_to_gen + term_gen_to_real,
        term_real_to_gen,
        term_gen_to_real,
        real_to_gen,
        gen_to_real,
    })
}

/// Chamfer distance between projected sets; both must share a projector.
pub fn chamfer(real: &FeatureSet, generated: &FeatureSet) -> Result<ChamferBreakdown> {
    real.check_compatible(generated)?;
    chamfer_points(&real.features, &generated.features)
}

/// Gradient of the Chamfer distance with respect to the generated rows,
/// holding the argmin matchings fixed (exact wherever they are unique).
pub fn chamfer_grad_points(real: &Matrix, generated: &Matrix) -> Result<(ChamferBreakdown, Matrix)> {
    let b = chamfer_points(real, generated)?;
    let (nx, ny) = (real.rows() as f64, generated.rows() as f64);
    let mut grad = Matrix::zeros(generated.rows(), generated.cols());
    for (i, &j) in b.real_to_gen.iter().enumerate() {
        let (x, y) = (real.row(i), generated.row(j));
        for ((g, &yv), &xv) in grad.row_mut(j).iter_mut().zip(y).zip(x) {
            *g += 2.0 / nx * (yv - xv);
        }
    }
    for (j, &i) in b.gen_to_real.iter().enumerate() {
        let (x, y) = (real.row(i), generated.row(j));
        for ((g, &yv), &xv) in grad.row_mut(j).iter_mut().zip(y).zip(x) {
            *g += 2.0 / ny * (yv - xv);
        }
    }
    Ok((b, grad))
}

pub fn chamfer_grad(real: &FeatureSet, generated: &FeatureSet) -> Result<Matrix> {
    real.check_compatible(generated)?;
    Ok(chamfer_grad_points(&real.features, &generated.features)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_are_zero() {
        let x = Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0]]).unwrap();
        let (b, g) = chamfer_grad_points(&x, &x).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn three_four_five() {
        let b = chamfer_points(&Matrix::row_vector(&[0.0, 0.0]), &Matrix::row_vector(&[3.0, 4.0])).unwrap();
        assert_eq!((b.term_real_to_gen, b.term_gen_to_real, b.total), (25.0, 25.0, 50.0));
    }

    #[test]
    fn two_to_one_matching() {
        let b = chamfer_points(&Matrix::column(&[0.0, 2.0]), &Matrix::column(&[1.0])).unwrap();
        assert_eq!((b.term_real_to_gen, b.term_gen_to_real, b.total), (1.0, 1.0, 2.0));
        assert_eq!(b.real_to_gen, vec![0, 0]);
        // both real points tie at distance 1; lowest index wins
        assert_eq!(b.gen_to_real, vec![0]);
    }

    #[test]
    fn singleton_gradient_is_four_times_offset() {
        let (_, g) = chamfer_grad_points(&Matrix::row_vector(&[1.0, -1.0]), &Matrix::row_vector(&[4.0, 1.0])).unwrap();
        assert_eq!(g.as_slice(), &[12.0, 8.0]);
    }

    #[test]
    fn empty_sets_fail() {
        assert!(matches!(chamfer_points(&Matrix::zeros(0, 2), &Matrix::zeros(1, 2)), Err(Error::Contract(_))));
    }
}
