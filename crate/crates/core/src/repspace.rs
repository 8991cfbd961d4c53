//! Invertible representation maps between pixel space and the coordinates in
//! which a perturbation ball is defined.
//!
//! Two spaces are provided: the identity (pixel basis) and a per-channel
//! orthonormal 2-D DCT-II, whose inverse is its transpose (DCT-III). Both
//! work on single images (`H×W×C`) and batches (`N×H×W×C`), and both have
//! graph versions so gradients can flow through the inverse map.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, SeparableMap, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Identity,
    Dct { map: Arc<SeparableMap>, channels: usize },
}

/// An invertible map `R` from pixels to coefficients, with `R⁻¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSpace {
    name: String,
    kind: Kind,
}

/// The canonical pixel basis.
pub fn identity_space() -> RepresentationSpace {
    RepresentationSpace {
        name: "pixel".to_string(),
        kind: Kind::Identity,
    }
}

/// Orthonormal 2-D DCT-II applied to each channel of `height × width` images.
pub fn dct2d_space(height: usize, width: usize, channels: usize) -> Result<RepresentationSpace> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::invalid(
            "dct2d_space",
            format!("dimensions must be positive, got {height}×{width}×{channels}"),
        ));
    }
    Ok(RepresentationSpace {
        name: "dct".to_string(),
        kind: Kind::Dct {
            map: Arc::new(SeparableMap {
                height,
                width,
                rows: dct_matrix(height),
                cols: dct_matrix(width),
            }),
            channels,
        },
    })
}

/// `n × n` orthonormal DCT-II matrix, `D[u][m] = α(u)·cos(π(2m+1)u / 2n)`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    let scale0 = (1.0 / n as f64).sqrt();
    let scale = (2.0 / n as f64).sqrt();
    for u in 0..n {
        let alpha = if u == 0 { scale0 } else { scale };
        for m in 0..n {
            d[u * n + m] = alpha * (PI * (2 * m + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    d
}

impl RepresentationSpace {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_linear(&self) -> bool {
        true
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, Kind::Identity)
    }

    /// Configured `(height, width, channels)`; `None` for the identity, which
    /// accepts any shape.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        match &self.kind {
            Kind::Identity => None,
            Kind::Dct { map, channels } => Some((map.height, map.width, *channels)),
        }
    }

    fn check(&self, shape: &[usize], op: &'static str) -> Result<usize> {
        let Some((h, w, c)) = self.dims() else {
            return Ok(0);
        };
        match shape {
            [sh, sw, sc] if (*sh, *sw, *sc) == (h, w, c) => Ok(1),
            [n, sh, sw, sc] if (*sh, *sw, *sc) == (h, w, c) => Ok(*n),
            _ => Err(Error::shape(op, shape, &[h, w, c])),
        }
    }

    fn apply(&self, x: &Tensor, transpose: bool, op: &'static str) -> Result<Tensor> {
        let batch = self.check(x.shape(), op)?;
        match &self.kind {
            Kind::Identity => Ok(x.clone()),
            Kind::Dct { map, channels } => {
                let mut out = vec![0.0; x.len()];
                map.apply(x.data(), batch, *channels, transpose, &mut out);
                Tensor::new(x.shape().to_vec(), out)
            }
        }
    }

    /// Pixels → coefficients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, false, "repspace forward")
    }

    /// Coefficients → pixels.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        self.apply(z, true, "repspace inverse")
    }

    fn apply_var(&self, g: &mut Graph, x: Var, transpose: bool, op: &'static str) -> Result<Var> {
        self.check(g.shape(x), op)?;
        match &self.kind {
            Kind::Identity => Ok(x),
            Kind::Dct { map, .. } => {
                if g.shape(x).len() == 4 {
                    g.separable(x, map, transpose)
                } else {
                    let single = g.shape(x).to_vec();
                    let mut batched = vec![1];
                    batched.extend_from_slice(&single);
                    let xb = g.reshape(x, &batched)?;
                    let y = g.separable(xb, map, transpose)?;
                    g.reshape(y, &single)
                }
            }
        }
    }

    /// Differentiable [`RepresentationSpace::forward`].
    pub fn forward_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.apply_var(g, x, false, "repspace forward")
    }

    /// Differentiable [`RepresentationSpace::inverse`].
    pub fn inverse_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.apply_var(g, z, true, "repspace inverse")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct evaluation of the DCT-II double sum, independent of the
    /// separable matrix route.
    fn dct_by_definition(x: &Tensor, h: usize, w: usize, c: usize) -> Vec<f64> {
        let alpha = |u: usize, n: usize| {
            if u == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        let mut out = vec![0.0; h * w * c];
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let mut s = 0.0;
                    for m in 0..h {
                        for n in 0..w {
                            s += x.data()[(m * w + n) * c + ch]
                                * (PI * (2 * m + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                                * (PI * (2 * n + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                        }
                    }
                    out[(u * w + v) * c + ch] = s * alpha(u, h) * alpha(v, w);
                }
            }
        }
        out
    }

    #[test]
    fn identity_is_identity() {
        let s = identity_space();
        let x = random(&[4, 5, 2], 1);
        assert_eq!(s.forward(&x).unwrap(), x);
        assert_eq!(s.inverse(&s.forward(&x).unwrap()).unwrap(), x);
        assert!(s.is_linear());
    }

    #[test]
    fn dct_matches_double_sum() {
        for (h, w, c) in [(5, 7, 2), (6, 4, 1)] {
            let s = dct2d_space(h, w, c).unwrap();
            let x = random(&[h, w, c], 2);
            let z = s.forward(&x).unwrap();
            for (a, b) in z.data().iter().zip(dct_by_definition(&x, h, w, c)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_has_only_dc() {
        let (h, w) = (6, 4);
        let s = dct2d_space(h, w, 3).unwrap();
        let x = Tensor::full(&[h, w, 3], 0.7);
        let z = s.forward(&x).unwrap();
        for (i, v) in z.data().iter().enumerate() {
            if i < 3 {
                assert!((v - 0.7 * ((h * w) as f64).sqrt()).abs() < 1e-12);
            } else {
                assert!(v.abs() < 1e-12, "coef {i} = {v}");
            }
        }
    }

    #[test]
    fn one_hot_round_trip() {
        let s = dct2d_space(8, 8, 1).unwrap();
        let mut x = Tensor::zeros(&[8, 8, 1]);
        x.data_mut()[19] = 1.0;
        let back = s.inverse(&s.forward(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-10);
    }

    #[test]
    fn batch_and_single_agree() {
        let s = dct2d_space(4, 4, 1).unwrap();
        let xb = random(&[3, 4, 4, 1], 3);
        let zb = s.forward(&xb).unwrap();
        for n in 0..3 {
            let single = xb.slice_leading(n, 1).unwrap().reshape(&[4, 4, 1]).unwrap();
            let z = s.forward(&single).unwrap();
            assert_eq!(z.data(), &zb.data()[n * 16..(n + 1) * 16]);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_dims() {
        assert!(dct2d_space(0, 4, 1).is_err());
        let s = dct2d_space(4, 4, 1).unwrap();
        assert!(s.forward(&Tensor::zeros(&[4, 5, 1])).is_err());
        assert!(s.inverse(&Tensor::zeros(&[16])).is_err());
    }

    #[test]
    fn inverse_gradient_matches_finite_differences() {
        let s = dct2d_space(4, 3, 2).unwrap();
        let z = random(&[4, 3, 2], 4);
        let wts = random(&[4, 3, 2], 5);
        let err = finite_diff_check(
            |g, z| {
                let x = s.inverse_var(g, z)?;
                let sq = g.mul(x, x)?;
                let wv = g.constant(wts.clone());
                let lin = g.mul(x, wv)?;
                let both = g.add(sq, lin)?;
                g.sum(both)
            },
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn graph_route_matches_direct_route() {
        let s = dct2d_space(5, 5, 1).unwrap();
        let x = random(&[2, 5, 5, 1], 6);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let zv = s.forward_var(&mut g, xv).unwrap();
        assert_eq!(g.value(zv), &s.forward(&x).unwrap());
        let back = s.inverse_var(&mut g, zv).unwrap();
        assert!(g.value(back).max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn single_pixel_change_is_bounded_by_basis_amplitude() {
        let (h, w) = (28, 28);
        let s = dct2d_space(h, w, 1).unwrap();
        let amplitude = (2.0 / h as f64).sqrt() * (2.0 / w as f64).sqrt();
        let eps = 0.3;
        for pixel in [0, 13, 400, 783] {
            let mut x = Tensor::zeros(&[h, w, 1]);
            x.data_mut()[pixel] = eps;
            let z = s.forward(&x).unwrap();
            let linf = z.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(linf <= eps * amplitude + 1e-12);
        }
    }

    /// A DCT-ℓ∞ ball is not a pixel-ℓ∞ ball: random sign patterns of size ε
    /// in coefficient space land far outside the pixel ε-cube.
    #[test]
    fn dct_linf_ball_leaves_the_pixel_cube() {
        let s = dct2d_space(28, 28, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 0.1;
        let outside = (0..100)
            .filter(|_| {
                let z: Vec<f64> = (0..784).map(|_| if rng.random::<bool>() { eps } else { -eps }).collect();
                let x = s.inverse(&Tensor::new(vec![28, 28, 1], z).unwrap()).unwrap();
                x.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) > eps
            })
            .count();
        assert!(outside >= 1, "{outside}");
    }

    #[test]
    fn round_trip_and_parseval_on_many_inputs() {
        let s = dct2d_space(28, 28, 1).unwrap();
        for seed in 0..1000 {
            let x = random(&[28, 28, 1], 1000 + seed);
            let z = s.forward(&x).unwrap();
            assert!((z.l2_norm() - x.l2_norm()).abs() <= 1e-10);
            assert!(s.inverse(&z).unwrap().max_abs_diff(&x).unwrap() <= 1e-10);
        }
    }

    proptest::proptest! {
        #[test]
        fn parseval_holds(seed in 0u64..10_000, h in 1usize..9, w in 1usize..9, c in 1usize..3) {
            let s = dct2d_space(h, w, c).unwrap();
            let x = random(&[h, w, c], seed);
            let z = s.forward(&x).unwrap();
            proptest::prop_assert!((z.l2_norm() - x.l2_norm()).abs() <= 1e-10);
            proptest::prop_assert!(s.inverse(&z).unwrap().max_abs_diff(&x).unwrap() <= 1e-10);
        }
    }
}
