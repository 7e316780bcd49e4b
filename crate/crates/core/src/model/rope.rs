//! Rotary position embedding on interleaved dimension pairs `(2i, 2i+1)`.

use crate::error::{Error, Result};

/// Angle for pair `i` at `position`: `position * base^(-2i/d_head)`.
fn angle(position: usize, pair: usize, head_dim: usize, base: f64) -> f64 {
    position as f64 * base.powf(-2.0 * pair as f64 / head_dim as f64)
}

/// Rotates `x` in place by `sign * angle`. Caller guarantees even length.
pub(crate) fn rotate_in_place(x: &mut [f32], position: usize, base: f64, sign: f64) {
    let d = x.len();
    for i in 0..d / 2 {
        let theta = sign * angle(position, i, d, base);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (x[2 * i] as f64, x[2 * i + 1] as f64);
        x[2 * i] = (a * cos - b * sin) as f32;
        x[2 * i + 1] = (a * sin + b * cos) as f32;
    }
}

fn check_even(x: &[f32]) -> Result<()> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "rotary embedding needs an even head dimension, got {}",
            x.len()
        )));
    }
    Ok(())
}

/// Rotates a single head vector to absolute `position`.
pub fn rope_rotate(x: &[f32], position: usize, base: f64) -> Result<Vec<f32>> {
    check_even(x)?;
    let mut out = x.to_vec();
    rotate_in_place(&mut out, position, base, 1.0);
    Ok(out)
}

/// Undoes [`rope_rotate`] for the same `position`.
pub fn rope_inverse(x: &[f32], position: usize, base: f64) -> Result<Vec<f32>> {
    check_even(x)?;
    let mut out = x.to_vec();
    rotate_in_place(&mut out, position, base, -1.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn position_zero_is_identity() {
        let x = vec![0.3, -1.2, 4.0, 0.5];
        assert_eq!(rope_rotate(&x, 0, 10000.0).unwrap(), x);
    }

    #[test]
    fn odd_length_is_shape_error() {
        assert!(matches!(
            rope_rotate(&[1.0, 2.0, 3.0], 1, 10000.0),
            Err(Error::Shape(_))
        ));
        assert!(matches!(rope_inverse(&[1.0], 1, 10000.0), Err(Error::Shape(_))));
    }

    #[test]
    fn first_pair_rotates_by_position_radians() {
        // pair 0 has frequency base^0 = 1
        let out = rope_rotate(&[1.0, 0.0], 1, 10000.0).unwrap();
        assert!((out[0] - 1f32.cos()).abs() < 1e-7);
        assert!((out[1] - 1f32.sin()).abs() < 1e-7);
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = random_vec(&mut rng, 16);
            let p = rng.gen_range(0..4096);
            let back = rope_rotate(&rope_inverse(&x, p, 10000.0).unwrap(), p, 10000.0).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_vec(&mut rng, 32);
        let y = rope_rotate(&x, 777, 10000.0).unwrap();
        assert!((dot(&x, &x) - dot(&y, &y)).abs() < 1e-5);
    }
}
