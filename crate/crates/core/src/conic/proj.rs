//! Euclidean projections onto the supported cones. Used for witness cleanup
//! and as test oracles; each projection is idempotent and nonexpansive.

use nalgebra::DMatrix;

use super::{mat_to_tri, tri_to_mat};

pub fn project_nonneg(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Projection onto `{(t, u) : t >= ||u||}` with t stored first.
pub fn project_soc(x: &[f64]) -> Vec<f64> {
    let t = x[0];
    let u_norm = x[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if t >= u_norm {
        return x.to_vec();
    }
    if t <= -u_norm {
        return vec![0.0; x.len()];
    }
    let alpha = (t + u_norm) / 2.0;
    let mut out = Vec::with_capacity(x.len());
    out.push(alpha);
    let scale = if u_norm > 0.0 { alpha / u_norm } else { 0.0 };
    out.extend(x[1..].iter().map(|&v| v * scale));
    out
}

/// Projection onto the PSD cone in scaled-triangular coordinates.
pub fn project_psd(d: usize, coords: &[f64]) -> Vec<f64> {
    let m = tri_to_mat(d, coords);
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut acc = DMatrix::zeros(d, d);
    for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > 0.0 {
            let v = eig.eigenvectors.column(idx);
            acc += ev * &v * v.transpose();
        }
    }
    mat_to_tri(&acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn norm(a: &[f64]) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    #[test]
    fn projections_idempotent_and_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for proj in [
                project_nonneg as fn(&[f64]) -> Vec<f64>,
                project_soc as fn(&[f64]) -> Vec<f64>,
                |v: &[f64]| project_psd(3, v),
            ] {
                let px = proj(&x);
                let ppx = proj(&px);
                assert!(norm(&sub(&px, &ppx)) < 1e-9, "idempotence");
                let py = proj(&y);
                assert!(
                    norm(&sub(&px, &py)) <= norm(&sub(&x, &y)) + 1e-12,
                    "nonexpansive"
                );
            }
        }
    }

    #[test]
    fn soc_projection_hits_boundary() {
        let p = project_soc(&[0.0, 3.0, 4.0]);
        assert!((p[0] - norm(&p[1..])).abs() < 1e-12);
    }
}
