//! Tumor-probability attention used to gate the fusion features.

use crate::error::{Error, Result};
use crate::volume::Volume;

fn check_probs(probs: &Volume, name: &str) -> Result<()> {
    if probs.channels() != 4 {
        return Err(Error::Shape(format!("{name} must have 4 class channels, got {}", probs.channels())));
    }
    Ok(())
}

/// Per-voxel tumor attention `max(1 - bg_a, 1 - bg_b)` from the background
/// channel of two class-probability maps.
pub fn attention_map(probs_a: &Volume, probs_b: &Volume) -> Result<Volume> {
    check_probs(probs_a, "branch A probabilities")?;
    check_probs(probs_b, "branch B probabilities")?;
    if probs_a.dims() != probs_b.dims() {
        return Err(Error::Shape(format!("branch outputs differ: {:?} vs {:?}", probs_a.dims(), probs_b.dims())));
    }
    let data = probs_a.channel(0).iter().zip(probs_b.channel(0)).map(|(&a, &b)| (1.0 - a).max(1.0 - b)).collect();
    Ok(Volume::from_parts(1, probs_a.dims(), probs_a.spacing(), data))
}

/// Gradients of the attention map w.r.t. both probability maps. Only the
/// background channels receive gradient; ties route it to branch A.
pub fn attention_map_backward(probs_a: &Volume, probs_b: &Volume, grad: &Volume) -> (Volume, Volume) {
    let n = probs_a.voxels();
    let mut ga = Volume::zeros(4, probs_a.dims());
    let mut gb = Volume::zeros(4, probs_b.dims());
    for v in 0..n {
        let (a, b) = (probs_a.channel(0)[v], probs_b.channel(0)[v]);
        if 1.0 - a >= 1.0 - b {
            ga.channel_mut(0)[v] = -grad.data()[v];
        } else {
            gb.channel_mut(0)[v] = -grad.data()[v];
        }
    }
    (ga, gb)
}

/// Residual gating `features * (1 + m)` of every channel by the attention map.
pub fn apply_mask_guidance(features: &Volume, probs_a: &Volume, probs_b: &Volume) -> Result<Volume> {
    let m = attention_map(probs_a, probs_b)?;
    if features.dims() != m.dims() {
        return Err(Error::Shape(format!("features {:?} vs masks {:?}", features.dims(), m.dims())));
    }
    let mut out = features.clone();
    for c in 0..out.channels() {
        for (v, &w) in out.channel_mut(c).iter_mut().zip(m.data()) {
            *v *= 1.0 + w;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(bg: &[f32]) -> Volume {
        let n = bg.len();
        Volume::from_fn(4, [1, 1, n], |c, _, _, x| if c == 0 { bg[x] } else { (1.0 - bg[x]) / 3.0 })
    }

    #[test]
    fn all_background_leaves_features_unchanged() {
        let f = Volume::from_fn(3, [1, 1, 4], |c, _, _, x| (c * 4 + x) as f32 - 5.0);
        let p = probs(&[1.0; 4]);
        assert_eq!(apply_mask_guidance(&f, &p, &p).unwrap().data(), f.data());
    }

    #[test]
    fn certain_tumor_doubles_features() {
        let f = Volume::from_fn(2, [1, 1, 3], |c, _, _, x| (c + x) as f32 + 0.5);
        let a = probs(&[0.0, 1.0, 0.7]);
        let b = probs(&[1.0, 0.0, 0.9]);
        let out = apply_mask_guidance(&f, &a, &b).unwrap();
        for c in 0..2 {
            for x in 0..2 {
                assert_eq!(out.get(c, 0, 0, x), 2.0 * f.get(c, 0, 0, x));
            }
            let expected = f.get(c, 0, 0, 2) * (1.0 + 0.3f32);
            assert!((out.get(c, 0, 0, 2) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_routes_to_the_larger_term() {
        let a = probs(&[0.2, 0.9]);
        let b = probs(&[0.5, 0.1]);
        let g = Volume::from_fn(1, [1, 1, 2], |_, _, _, x| x as f32 + 1.0);
        let (ga, gb) = attention_map_backward(&a, &b, &g);
        assert_eq!(ga.channel(0), &[-1.0, 0.0]);
        assert_eq!(gb.channel(0), &[0.0, -2.0]);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let f = Volume::zeros(1, [2; 3]);
        assert!(apply_mask_guidance(&f, &Volume::zeros(3, [2; 3]), &Volume::zeros(4, [2; 3])).is_err());
    }
}
