//! Output unmixing: canonical tensor to per-frame scalar maps, and its adjoint.

use nalgebra::DMatrix;

use crate::error::{check_dim, Result};
use crate::tensor::{CanonicalTensor, Shape};

/// One scalar map per frame, obtained by substituting column `t` of the
/// realization matrix (`m × N`).
pub fn unmix_output(t: &CanonicalTensor, realizations: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
    check_dim(t.m(), realizations.nrows())?;
    realizations
        .column_iter()
        .map(|col| {
            let x: Vec<f64> = col.iter().copied().collect();
            t.evaluate(&x)
        })
        .collect()
}

/// Adjoint of [`unmix_output`] with the private terms held at zero: the mean
/// gradient sums the frame gradients, sensitivity `k` weights them by `X_k`,
/// and the noise plane gets nothing.
pub fn fold_frame_grads(
    shape: Shape,
    frame_grads: &[Vec<f64>],
    realizations: &DMatrix<f64>,
) -> Result<CanonicalTensor> {
    let m = realizations.nrows();
    check_dim(realizations.ncols(), frame_grads.len())?;
    let mut g = CanonicalTensor::zeros(shape, m);
    for (t, fg) in frame_grads.iter().enumerate() {
        check_dim(shape.len(), fg.len())?;
        for (o, v) in g.plane_mut(0).iter_mut().zip(fg) {
            *o += v;
        }
        for k in 0..m {
            let xk = realizations[(k, t)];
            for (o, v) in g.plane_mut(k + 1).iter_mut().zip(fg) {
                *o += xk * v;
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::CanonicalForm;

    #[test]
    fn zero_realizations_give_mean_maps() {
        let f = CanonicalForm::new(0.4, vec![1.0, 2.0], 0.3).unwrap();
        let t = CanonicalTensor::from_forms(Shape::new(1, 1, 1), &[f]).unwrap();
        let maps = unmix_output(&t, &DMatrix::zeros(2, 3)).unwrap();
        assert_eq!(maps, vec![vec![0.4]; 3]);
    }

    #[test]
    fn single_basis_two_frames() {
        let f = CanonicalForm::new(1.0, vec![0.5], 0.0).unwrap();
        let t = CanonicalTensor::from_forms(Shape::new(1, 1, 1), &[f]).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        assert_eq!(unmix_output(&t, &x).unwrap(), vec![vec![0.5], vec![1.5]]);
        assert!(unmix_output(&t, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn fold_is_the_adjoint() {
        // <unmix(T), G> == <T, fold(G)> over mean and sensitivity planes
        let shape = Shape::new(1, 1, 2);
        let forms = vec![
            CanonicalForm::new(0.1, vec![0.2, -0.3], 0.0).unwrap(),
            CanonicalForm::new(-0.5, vec![1.0, 0.7], 0.0).unwrap(),
        ];
        let t = CanonicalTensor::from_forms(shape, &forms).unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[0.3, -1.2, 0.9, 1.1, 0.0, -0.4]);
        let g = vec![vec![1.0, -2.0], vec![0.5, 0.25], vec![-1.0, 3.0]];
        let lhs: f64 = unmix_output(&t, &x)
            .unwrap()
            .iter()
            .zip(&g)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>())
            .sum();
        let folded = fold_frame_grads(shape, &g, &x).unwrap();
        let rhs: f64 = t.data().iter().zip(folded.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(folded.noise_plane().iter().all(|&v| v == 0.0));
    }
}
