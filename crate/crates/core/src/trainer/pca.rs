use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// 2-D coordinates of each row plus a warning when the input was degenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each returned component.
    pub variance: [f64; 2],
    /// Unit principal axes; the largest-magnitude loading of each is positive.
    pub axes: [Vec<f64>; 2],
    pub warning: Option<String>,
}

/// Projects mean-centered rows onto their top two principal components.
pub fn project_features(rows: &[Vec<f64>]) -> Result<Projection> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::Invalid(format!("projection needs at least 3 rows, got {n}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("project_features", "rows must share a non-zero width"));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    if centered.iter().all(|&v| v == 0.0) {
        return Ok(Projection {
            coords: vec![[0.0; 2]; n],
            variance: [0.0; 2],
            axes: [vec![0.0; d], vec![0.0; d]],
            warning: Some("all rows are identical; projection is all zeros".into()),
        });
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut axes = [vec![0.0; d], vec![0.0; d]];
    let mut variance = [0.0; 2];
    for (k, &col) in order.iter().take(2).enumerate() {
        let mut axis: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let lead = axis.iter().enumerate().fold(0, |best, (i, v)| if v.abs() > axis[best].abs() { i } else { best });
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        axes[k] = axis;
        variance[k] = eig.eigenvalues[col].max(0.0);
    }
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect();
    Ok(Projection { coords, variance, axes, warning: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, 0);
        (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn planar_data_reconstructs_exactly() {
        let mut r = rng::stream(3, 0);
        let (a, b) = ([1.0, 2.0, -1.0, 0.5], [0.0, -1.0, 1.0, 3.0]);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let (s, t): (f64, f64) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
                (0..4).map(|j| 0.7 + s * a[j] + t * b[j]).collect()
            })
            .collect();
        let p = project_features(&rows).unwrap();
        let mean: Vec<f64> = (0..4).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 30.0).collect();
        for (row, c) in rows.iter().zip(&p.coords) {
            for j in 0..4 {
                let rec = mean[j] + c[0] * p.axes[0][j] + c[1] * p.axes[1][j];
                assert!((rec - row[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicated_dataset_projects_identically() {
        let rows = random_rows(20, 5, 1);
        let twice: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let (a, b) = (project_features(&rows).unwrap(), project_features(&twice).unwrap());
        for (x, y) in a.coords.iter().zip(&b.coords) {
            assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn components_are_ordered_and_signed() {
        for seed in 0..20 {
            let p = project_features(&random_rows(40, 6, seed)).unwrap();
            let var = |k: usize| p.coords.iter().map(|c| c[k] * c[k]).sum::<f64>() / 40.0;
            assert!(var(0) >= var(1));
            assert!((var(0) - p.variance[0]).abs() < 1e-9);
            for axis in &p.axes {
                let lead = axis.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
                assert!(lead > 0.0);
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let same = vec![vec![1.0, 2.0]; 5];
        let p = project_features(&same).unwrap();
        assert!(p.warning.is_some());
        assert!(p.coords.iter().all(|c| *c == [0.0, 0.0]));
        assert!(project_features(&same[..2]).is_err());
    }
}
