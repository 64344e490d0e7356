//! Key-pixel feature fusion: a learned gate blends local-plus-global key
//! features against pixel-level features.
//!
//! ```text
//! F_global = expand(gap(F_key))
//! G        = sigmoid(conv_gate(F_key + F_global))
//! out      = G * (F_key + F_global) + (1 - G) * F_pix
//! ```
//!
//! The gate convolution is 3x3 with zero padding; its bias starts at zero
//! so fusion opens at an even blend.

use crate::element::Element;
use crate::tensor::{conv2d, expand_spatial, Tensor, TensorError};

/// The three fusion inputs: local key features, pixel features, and the
/// gate convolution parameters (`3 x 3 x C x C` weight, `C` bias).
#[derive(Debug, Clone)]
pub struct FeatureMaps<E> {
    pub f_key: Tensor<E>,
    pub f_pix: Tensor<E>,
    pub gate_w: Tensor<E>,
    pub gate_b: Tensor<E>,
}

impl<E: Element> FeatureMaps<E> {
    pub fn new(
        f_key: Tensor<E>,
        f_pix: Tensor<E>,
        gate_w: Tensor<E>,
        gate_b: Tensor<E>,
    ) -> Result<Self, TensorError> {
        if f_key.rank() != 3 || f_key.shape() != f_pix.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "kpff",
                lhs: f_key.shape().to_vec(),
                rhs: f_pix.shape().to_vec(),
            });
        }
        let c = f_key.shape()[2];
        if gate_w.shape() != [3, 3, c, c] || gate_b.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "kpff",
                lhs: gate_w.shape().to_vec(),
                rhs: vec![3, 3, c, c],
            });
        }
        Ok(FeatureMaps { f_key, f_pix, gate_w, gate_b })
    }

    /// Zero-initialized gate parameters for channel width `c`.
    pub fn init_gate(c: usize) -> (Tensor<E>, Tensor<E>) {
        (Tensor::zeros(vec![3, 3, c, c]), Tensor::zeros(vec![c]))
    }
}

/// Fuse the three branches; output has the shape of `f_key`.
pub fn kpff_fuse<E: Element>(maps: &FeatureMaps<E>) -> Result<Tensor<E>, TensorError> {
    let (h, w) = (maps.f_key.shape()[0], maps.f_key.shape()[1]);
    let f_global = expand_spatial(&maps.f_key.gap_spatial()?, h, w)?;
    let local_global = maps.f_key.add(&f_global)?;
    let gate = conv2d(&local_global, &maps.gate_w, &maps.gate_b)?.sigmoid();
    let mut out = Tensor::zeros(maps.f_key.shape().to_vec());
    for ((o, (&g, &lg)), &px) in out
        .data_mut()
        .iter_mut()
        .zip(gate.data().iter().zip(local_global.data()))
        .zip(maps.f_pix.data())
    {
        *o = g * lg + (E::ONE - g) * px;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{sigmoid_scalar, Tensor64};

    fn random_maps(rng: &mut Rng, h: usize, w: usize, c: usize) -> FeatureMaps<f64> {
        FeatureMaps::new(
            Tensor64::from_fn(vec![h, w, c], |_| rng.uniform(-1.0, 1.0)),
            Tensor64::from_fn(vec![h, w, c], |_| rng.uniform(-1.0, 1.0)),
            Tensor64::from_fn(vec![3, 3, c, c], |_| rng.uniform(-0.5, 0.5)),
            Tensor64::from_fn(vec![c], |_| rng.uniform(-0.5, 0.5)),
        )
        .unwrap()
    }

    #[test]
    fn equal_branches_pass_through_any_gate() {
        let mut rng = Rng::new(1);
        let mut maps = random_maps(&mut rng, 4, 5, 2);
        let f_global =
            expand_spatial(&maps.f_key.gap_spatial().unwrap(), 4, 5).unwrap();
        maps.f_pix = maps.f_key.add(&f_global).unwrap();
        let out = kpff_fuse(&maps).unwrap();
        for (o, w) in out.data().iter().zip(maps.f_pix.data()) {
            assert!((o - w).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_key_map_doubles_through_global_branch() {
        let c = 0.37;
        let maps = FeatureMaps::new(
            Tensor64::filled(vec![3, 3, 1], c),
            Tensor64::zeros(vec![3, 3, 1]),
            Tensor64::zeros(vec![3, 3, 1, 1]),
            Tensor64::zeros(vec![1]),
        )
        .unwrap();
        // zero gate conv: G = 0.5 everywhere, local+global = 2c
        let out = kpff_fuse(&maps).unwrap();
        for &v in out.data() {
            assert!((v - 0.5 * 2.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_elementwise_oracle() {
        let mut rng = Rng::new(2);
        let maps = random_maps(&mut rng, 5, 4, 3);
        let got = kpff_fuse(&maps).unwrap();
        // direct 64-bit recomputation
        let (h, w, c) = (5, 4, 3);
        let mut mean = vec![0.0; c];
        for p in 0..h * w {
            for k in 0..c {
                mean[k] += maps.f_key.data()[p * c + k];
            }
        }
        for m in mean.iter_mut() {
            *m /= (h * w) as f64;
        }
        let lg: Vec<f64> = (0..h * w * c)
            .map(|i| maps.f_key.data()[i] + mean[i % c])
            .collect();
        let lg_t = Tensor64::new(vec![h, w, c], lg.clone()).unwrap();
        let pre = conv2d(&lg_t, &maps.gate_w, &maps.gate_b).unwrap();
        for i in 0..h * w * c {
            let g = sigmoid_scalar(pre.data()[i]);
            let want = g * lg[i] + (1.0 - g) * maps.f_pix.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn output_bounded_by_branches_and_gate_open() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let maps = random_maps(&mut rng, 4, 4, 2);
            let f_global =
                expand_spatial(&maps.f_key.gap_spatial().unwrap(), 4, 4).unwrap();
            let lg = maps.f_key.add(&f_global).unwrap();
            let out = kpff_fuse(&maps).unwrap();
            for i in 0..out.len() {
                let (a, b) = (lg.data()[i], maps.f_pix.data()[i]);
                let (lo, hi) = (a.min(b), a.max(b));
                assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn global_branch_has_zero_spatial_variance() {
        let mut rng = Rng::new(4);
        let f_key = Tensor64::from_fn(vec![6, 3, 2], |_| rng.uniform(-2.0, 2.0));
        let g = f_key.gap_spatial().unwrap();
        let f_global = expand_spatial(&g, 6, 3).unwrap();
        for c in 0..2 {
            for p in 0..18 {
                assert_eq!(f_global.data()[p * 2 + c], g.data()[c]);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let f_key = Tensor64::zeros(vec![4, 4, 2]);
        let f_pix = Tensor64::zeros(vec![4, 5, 2]);
        let (gw, gb) = FeatureMaps::<f64>::init_gate(2);
        assert!(FeatureMaps::new(f_key, f_pix, gw, gb).is_err());
    }
}
