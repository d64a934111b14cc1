//! Seeded weight initialisation.
//!
//! Draws are uniform and every subsequent step uses only `+ - * /` and
//! `sqrt`, all of which are correctly rounded in IEEE arithmetic, so a seed
//! yields the same bits on every platform.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `rows × cols` row-major matrix with orthonormal rows (or columns, when
/// `rows > cols`), scaled by `gain`.
pub(crate) fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Vec<f32> {
    let transpose = rows > cols;
    let (r, c) = if transpose {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let mut m: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // Modified Gram-Schmidt over the r rows of length c (r <= c).
    for i in 0..r {
        for j in 0..i {
            let dot: f64 = (0..c).map(|k| m[i * c + k] * m[j * c + k]).sum();
            for k in 0..c {
                m[i * c + k] -= dot * m[j * c + k];
            }
        }
        let norm = (0..c)
            .map(|k| m[i * c + k] * m[i * c + k])
            .sum::<f64>()
            .sqrt();
        assert!(norm > 1e-9, "degenerate draw during orthogonalisation");
        for k in 0..c {
            m[i * c + k] /= norm;
        }
    }
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..r {
        for k in 0..c {
            let v = (m[i * c + k] * gain) as f32;
            if transpose {
                out[k * cols + i] = v;
            } else {
                out[i * cols + k] = v;
            }
        }
    }
    out
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Vec<f32> {
    (0..len)
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = orthogonal(&mut rng, 4, 9, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..9)
                    .map(|k| f64::from(m[i * 9 + k]) * f64::from(m[j * 9 + k]))
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tall_matrices_have_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = orthogonal(&mut rng, 6, 3, 2.0);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..6)
                    .map(|k| f64::from(m[k * 3 + i]) * f64::from(m[k * 3 + j]))
                    .sum();
                let want = if i == j { 4.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-5);
            }
        }
    }
}
