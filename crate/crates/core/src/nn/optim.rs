//! Adam optimizer over a [`ParamSet`].

use super::params::{Archive, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zero = |p: &ParamSet| {
            let mut z = p.clone();
            for lp in z.values_mut() {
                lp.weight.data.fill(0.0);
                if let Some(b) = lp.bias.as_mut() {
                    b.data.fill(0.0);
                }
            }
            z
        };
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zero(params), v: zero(params) }
    }

    /// One bias-corrected update of `params` in place.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (id, p) in params.iter_mut() {
            let g = grads.get(id).ok_or_else(|| Error::layer(id, "no gradient"))?;
            let (m, v) = (self.m.get_mut(id).expect("moments"), self.v.get_mut(id).expect("moments"));
            let mut pairs = vec![(&mut p.weight.data, &g.weight.data, &mut m.weight.data, &mut v.weight.data)];
            if let (Some(pb), Some(gb), Some(mb), Some(vb)) = (p.bias.as_mut(), g.bias.as_ref(), m.bias.as_mut(), v.bias.as_mut()) {
                pairs.push((&mut pb.data, &gb.data, &mut mb.data, &mut vb.data));
            }
            for (w, g, m, v) in pairs {
                if w.len() != g.len() {
                    return Err(Error::layer(id, "gradient shape mismatch"));
                }
                for i in 0..w.len() {
                    let gi = g[i] as f64;
                    let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                    let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    let delta = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                    w[i] = (w[i] as f64 - delta) as f32;
                }
            }
        }
        Ok(())
    }

    pub fn store(&self, archive: &mut Archive, prefix: &str) {
        archive.insert_params(&format!("{prefix}adam_m/"), &self.m);
        archive.insert_params(&format!("{prefix}adam_v/"), &self.v);
    }

    pub fn restore(archive: &Archive, prefix: &str, lr: f64, step: u64) -> Result<Self> {
        let m = archive.extract_params(&format!("{prefix}adam_m/"))?;
        let v = archive.extract_params(&format!("{prefix}adam_v/"))?;
        Ok(Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{LayerParams, Tensor};

    fn single(w: f32) -> ParamSet {
        ParamSet::from([("w".to_string(), LayerParams { weight: Tensor::new(vec![1], vec![w]).unwrap(), bias: None })])
    }

    #[test]
    fn first_steps_match_closed_form() {
        // first Adam step moves each weight by lr * sign(g)
        let mut p = single(1.0);
        let mut opt = Adam::new(&p, 0.1);
        opt.update(&mut p, &single(3.0)).unwrap();
        assert!((p["w"].weight.data[0] - 0.9).abs() < 1e-6);
        // second step with the same gradient again moves by lr
        opt.update(&mut p, &single(3.0)).unwrap();
        assert!((p["w"].weight.data[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = single(0.123_456_7);
        let before = p.clone();
        let mut opt = Adam::new(&p, 0.0);
        for g in [1.0, -5.0, 1e-9] {
            opt.update(&mut p, &single(g)).unwrap();
        }
        assert_eq!(p["w"].weight.data[0].to_bits(), before["w"].weight.data[0].to_bits());
    }

    #[test]
    fn moments_round_trip_through_archive() {
        let mut p = single(2.0);
        let mut opt = Adam::new(&p, 0.01);
        opt.update(&mut p, &single(0.5)).unwrap();
        let mut a = Archive::default();
        opt.store(&mut a, "g/");
        let back = Adam::restore(&a, "g/", 0.01, opt.step).unwrap();
        assert_eq!(back, opt);
    }
}
