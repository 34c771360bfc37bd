//! Separable Gaussian blur over the trailing two axes of a map tensor.
//!
//! The map is periodic in longitude and bounded at the poles, so the width
//! axis wraps circularly while the height axis replicates its edge rows.
//! The blur treats its input as data: the result carries no backward node.

use super::{Element, Tensor, TensorError, TensorResult};

/// Normalized 1-D Gaussian taps with radius `ceil(3*sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Gaussian blur with the given sigma over `[..., H, W]`.
pub fn gaussian_blur<E: Element>(map: &Tensor<E>, sigma: f64) -> TensorResult<Tensor<E>> {
    if sigma <= 0.0 {
        return Err(TensorError::NonPositive {
            what: "sigma",
            value: sigma,
        });
    }
    let shape = map.shape();
    if shape.len() < 2 {
        return Err(TensorError::Rank {
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let planes = map.numel() / (h * w);
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;

    let src = map.data();
    let mut tmp = vec![0.0f64; h * w];
    let mut out = vec![E::zero(); map.numel()];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        // width pass: circular wrap
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let dx = i as i64 - radius;
                    let sx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                    acc += kv * plane[y * w + sx].to_f64();
                }
                tmp[y * w + x] = acc;
            }
        }
        // height pass: edge replicate
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let dy = i as i64 - radius;
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[sy * w + x];
                }
                dst[y * w + x] = E::from_f64(acc);
            }
        }
    }
    Tensor::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_weights_sum_to_one() {
        for sigma in [0.5, 1.0, 3.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_is_unchanged() {
        let m = Tensor::<f64>::full(&[1, 1, 20, 20], 7.25);
        let b = gaussian_blur(&m, 3.0).unwrap();
        for &v in b.data().iter() {
            assert!((v - 7.25).abs() < 1e-9);
        }
    }

    #[test]
    fn centered_impulse_is_outer_product_of_taps() {
        let (h, w) = (72, 72);
        let mut data = vec![0.0f64; h * w];
        let (cy, cx) = (36, 36);
        data[cy * w + cx] = 1.0;
        let m = Tensor::from_vec(&[h, w], data).unwrap();
        let sigma = 3.0;
        let b = gaussian_blur(&m, sigma).unwrap();
        let k = gaussian_kernel(sigma);
        let radius = (k.len() / 2) as i64;
        let bd = b.data();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let expect = k[(dy + radius) as usize] * k[(dx + radius) as usize];
                let got = bd[((cy as i64 + dy) as usize) * w + (cx as i64 + dx) as usize];
                assert!(
                    (got - expect).abs() < 1e-12,
                    "offset ({dy},{dx}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let m = Tensor::<f32>::zeros(&[4, 4]);
        assert!(gaussian_blur(&m, 0.0).is_err());
    }
}
