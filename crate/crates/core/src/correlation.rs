//! Partial cost volume: correlation of image and depth features over a
//! local window of cell displacements.

use crate::encoders::DOWNSAMPLE;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Default search radius for the 2×3 desk-scale grid.
pub const DEFAULT_RADIUS: usize = 1;

/// Number of displacement channels for radius `d` (the full `(2d+1)²` square).
pub fn num_displacements(d: usize) -> usize {
    (2 * d + 1) * (2 * d + 1)
}

/// Channel index of displacement `(dx, dy)`, row-major over `dy` then `dx`.
pub fn displacement_channel(dx: isize, dy: isize, d: usize) -> Option<usize> {
    let d = d as isize;
    (dx.abs() <= d && dy.abs() <= d).then(|| ((dy + d) * (2 * d + 1) + (dx + d)) as usize)
}

/// Largest displacement reachable at full resolution, in pixels.
pub fn max_displacement_pixels(d: usize) -> usize {
    d * DOWNSAMPLE
}

/// `[Hc, Wc, N]` × `[Hc, Wc, N]` to `[Hc, Wc, (2d+1)²]` with entries
/// `(1/N)·⟨fi(x, y), fl(x+dx, y+dy)⟩`; neighbours outside the grid count as
/// zero vectors.
pub fn compute_cost_volume<T: Real>(fi: &Tensor<T>, fl: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    if fi.shape() != fl.shape() || fi.shape().len() != 3 || fi.shape()[2] == 0 {
        return Err(Error::shape(
            "cost_volume",
            format!(
                "feature maps must share a [Hc, Wc, N] shape, got {:?} and {:?}",
                fi.shape(),
                fl.shape()
            ),
        ));
    }
    let (h, w, n) = (fi.shape()[0], fi.shape()[1], fi.shape()[2]);
    let nd = num_displacements(d);
    let inv_n = T::one() / T::lit(n as f64);
    let di = d as isize;
    // (output index, image cell offset, lidar cell offset) for every in-bounds pair
    let mut pairs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for dy in -di..=di {
                for dx in -di..=di {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    let c = displacement_channel(dx, dy, d).unwrap();
                    pairs.push((
                        (y * w + x) * nd + c,
                        (y * w + x) * n,
                        (yy as usize * w + xx as usize) * n,
                    ));
                }
            }
        }
    }
    let (a, b) = (fi.data(), fl.data());
    let mut out = vec![T::zero(); h * w * nd];
    for &(o, i, l) in &pairs {
        let dot = a[i..i + n]
            .iter()
            .zip(&b[l..l + n])
            .fold(T::zero(), |s, (p, q)| s + *p * *q);
        out[o] = dot * inv_n;
    }
    Tensor::from_op(
        vec![h, w, nd],
        out,
        vec![fi.clone(), fl.clone()],
        move |ctx| {
            let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
            let mut ga = ctx.needs(0).then(|| vec![T::zero(); a.len()]);
            let mut gb = ctx.needs(1).then(|| vec![T::zero(); b.len()]);
            for &(o, i, l) in &pairs {
                let g = ctx.grad[o] * inv_n;
                if let Some(ga) = &mut ga {
                    for k in 0..n {
                        ga[i + k] += g * b[l + k];
                    }
                }
                if let Some(gb) = &mut gb {
                    for k in 0..n {
                        gb[l + k] += g * a[i + k];
                    }
                }
            }
            vec![ga, gb]
        },
    )
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::gradcheck::{check_gradients, random_values};

    /// Independent double loop straight from the definition.
    fn brute_force(fi: &[f64], fl: &[f64], h: usize, w: usize, n: usize, d: usize) -> Vec<f64> {
        let side = 2 * d + 1;
        let mut out = vec![0.0; h * w * side * side];
        for y in 0..h {
            for x in 0..w {
                for (ci, (dy, dx)) in (0..side)
                    .flat_map(|j| (0..side).map(move |i| (j, i)))
                    .enumerate()
                {
                    let yy = y as i64 + dy as i64 - d as i64;
                    let xx = x as i64 + dx as i64 - d as i64;
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let mut s = 0.0;
                    for k in 0..n {
                        s += fi[(y * w + x) * n + k] * fl[(yy as usize * w + xx as usize) * n + k];
                    }
                    out[(y * w + x) * side * side + ci] = s / n as f64;
                }
            }
        }
        out
    }

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn displacement_sizes() {
        assert_eq!(max_displacement_pixels(4), 256);
        assert_eq!(max_displacement_pixels(0), 0);
        assert_eq!(max_displacement_pixels(1), 64);
        assert_eq!(num_displacements(4), 81);
        assert_eq!(displacement_channel(0, 0, 1), Some(4));
        assert_eq!(displacement_channel(2, 0, 1), None);
    }

    #[test]
    fn unit_features_give_one_in_bounds() {
        let ones = t(&[2, 3, 5], vec![1.0; 30]);
        let cv = compute_cost_volume(&ones, &ones, 1).unwrap();
        assert_eq!(cv.shape(), &[2, 3, 9]);
        // cell (0,0): displacement (-1,*) and (*,-1) leave the grid
        let c00 = &cv.data()[..9];
        assert_eq!(c00, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn orthogonal_features_give_zero() {
        let mut a = vec![0.0; 2 * 3 * 4];
        let mut b = vec![0.0; 2 * 3 * 4];
        for c in 0..6 {
            a[c * 4] = 1.0 + c as f64;
            b[c * 4 + 1] = 2.0;
        }
        let cv = compute_cost_volume(&t(&[2, 3, 4], a), &t(&[2, 3, 4], b), 1).unwrap();
        assert!(cv.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_brute_force() {
        for d in [0, 1, 2] {
            let (_, a) = random_values(&[2, 3, 8], 10 + d as u64);
            let (_, b) = random_values(&[2, 3, 8], 20 + d as u64);
            let cv = compute_cost_volume(&t(&[2, 3, 8], a.clone()), &t(&[2, 3, 8], b.clone()), d)
                .unwrap();
            let oracle = brute_force(&a, &b, 2, 3, 8, d);
            assert_eq!(cv.data().len(), oracle.len());
            for (x, y) in cv.data().iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = t(&[2, 3, 4], vec![0.0; 24]);
        let b = t(&[2, 3, 3], vec![0.0; 18]);
        assert!(compute_cost_volume(&a, &b, 1).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let inputs = vec![random_values(&[3, 4, 5], 1), random_values(&[3, 4, 5], 2)];
        let r = check_gradients(&inputs, |x| compute_cost_volume(&x[0], &x[1], 1)).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn swap_reverses_displacement(seed in 0u64..10_000, d in 0usize..3) {
            let (_, a) = random_values(&[3, 4, 6], seed);
            let (_, b) = random_values(&[3, 4, 6], seed + 1);
            let ab = compute_cost_volume(&t(&[3, 4, 6], a.clone()), &t(&[3, 4, 6], b.clone()), d).unwrap();
            let ba = compute_cost_volume(&t(&[3, 4, 6], b), &t(&[3, 4, 6], a), d).unwrap();
            let nd = num_displacements(d);
            let di = d as isize;
            for y in 0..3isize {
                for x in 0..4isize {
                    for dy in -di..=di {
                        for dx in -di..=di {
                            let (xx, yy) = (x + dx, y + dy);
                            if !(0..4).contains(&xx) || !(0..3).contains(&yy) {
                                continue;
                            }
                            let c = displacement_channel(dx, dy, d).unwrap();
                            let rc = displacement_channel(-dx, -dy, d).unwrap();
                            let v1 = ab.data()[(y * 4 + x) as usize * nd + c];
                            let v2 = ba.data()[(yy * 4 + xx) as usize * nd + rc];
                            prop_assert!((v1 - v2).abs() < 1e-12);
                        }
                    }
                }
            }
        }

        #[test]
        fn bilinear_in_image_features(seed in 0u64..10_000, alpha in -3.0f64..3.0) {
            let (_, a) = random_values(&[2, 3, 4], seed);
            let (_, b) = random_values(&[2, 3, 4], seed + 7);
            let base = compute_cost_volume(&t(&[2, 3, 4], a.clone()), &t(&[2, 3, 4], b.clone()), 1).unwrap();
            let scaled = compute_cost_volume(&t(&[2, 3, 4], a.iter().map(|v| v * alpha).collect()), &t(&[2, 3, 4], b), 1).unwrap();
            for (x, y) in base.data().iter().zip(scaled.data()) {
                prop_assert!((x * alpha - y).abs() < 1e-12);
            }
        }
    }
}
