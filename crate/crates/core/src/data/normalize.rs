use crate::error::{Error, Result};
use crate::volume::Volume;

/// Z-scores the nonzero (brain) voxels of a single-channel volume using
/// their own mean and population standard deviation. Zero voxels stay 0.
pub fn z_normalize(v: &Volume) -> Result<Volume> {
    if v.channels() != 1 {
        return Err(Error::Shape(format!(
            "z-normalisation expects one channel, got {}",
            v.channels()
        )));
    }
    let (mut n, mut sum) = (0usize, 0.0f64);
    for &x in v.data().iter().filter(|&&x| x != 0.0) {
        n += 1;
        sum += x as f64;
    }
    if n == 0 {
        return Err(Error::Empty("brain region (all voxels are zero)"));
    }
    let mean = sum / n as f64;
    let var = v
        .data()
        .iter()
        .filter(|&&x| x != 0.0)
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > f64::EPSILON * mean.abs().max(1.0)) {
        return Err(Error::ZeroVariance);
    }
    let data = v
        .data()
        .iter()
        .map(|&x| if x == 0.0 { 0.0 } else { ((x as f64 - mean) / std) as f32 })
        .collect();
    Volume::new(1, v.dims(), v.spacing(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::UNIT_SPACING;
    use rand::{Rng, SeedableRng};

    fn vol(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::new(1, [1, 1, n], UNIT_SPACING, values).unwrap()
    }

    fn stats(v: &[f32], mask: &[bool]) -> (f64, f64) {
        let sel: Vec<f64> = v.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x as f64).collect();
        let mean = sel.iter().sum::<f64>() / sel.len() as f64;
        let var = sel.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / sel.len() as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn two_value_foreground() {
        let out = z_normalize(&vol(vec![0.0, 2.0, 4.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn standardised_input_is_unchanged() {
        let v = vol(vec![0.0, -1.0, 1.0, -1.0, 1.0]);
        let out = z_normalize(&v).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-6);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(z_normalize(&vol(vec![0.0, 3.0, 3.0])), Err(Error::ZeroVariance)));
        assert!(matches!(z_normalize(&vol(vec![0.0; 4])), Err(Error::Empty(_))));
        assert!(z_normalize(&Volume::zeros(2, [1, 1, 1])).is_err());
    }

    #[test]
    fn random_volumes_meet_the_moment_contract() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(8..400);
            let scale = rng.random_range(0.1..500.0f32);
            let offset = rng.random_range(-50.0..300.0f32);
            let values: Vec<f32> = (0..n)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { offset + scale * rng.random::<f32>() })
                .collect();
            let mask: Vec<bool> = values.iter().map(|&x| x != 0.0).collect();
            if mask.iter().filter(|&&m| m).count() < 2 {
                continue;
            }
            let out = z_normalize(&vol(values.clone())).unwrap();
            let (mean, std) = stats(out.data(), &mask);
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-4, "std {std}");
            for (o, m) in out.data().iter().zip(&mask) {
                if !m {
                    assert_eq!(*o, 0.0);
                }
            }
        }
    }
}
