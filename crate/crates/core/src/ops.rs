//! Parameter-free volume operations: trilinear upsampling, softmax, sigmoid.

use crate::tensor::{FeatureMap, Real};

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Linear interpolation taps `(lower, upper, upper_weight)` for upsampling an
/// axis of length `n` by `factor` with half-pixel centers.
fn taps<T: Real>(n: usize, factor: usize) -> Vec<(usize, usize, T)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, T::of(src - lo as f64))
        })
        .collect()
}

fn split_axis(shape: [usize; 4], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn upsample_axis<T: Real>(x: &FeatureMap<T>, axis: usize, factor: usize) -> FeatureMap<T> {
    let shape = x.shape();
    let (outer, n, inner) = split_axis(shape, axis);
    let taps = taps::<T>(n, factor);
    let mut out_shape = shape;
    out_shape[axis] = n * factor;
    let mut out = FeatureMap::zeros(out_shape);
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for (j, &(lo, hi, l)) in taps.iter().enumerate() {
            let d = &mut dst[(o * n * factor + j) * inner..][..inner];
            let a = &src[(o * n + lo) * inner..][..inner];
            let b = &src[(o * n + hi) * inner..][..inner];
            for ((d, &a), &b) in d.iter_mut().zip(a).zip(b) {
                *d = a + (b - a) * l;
            }
        }
    }
    out
}

fn upsample_axis_backward<T: Real>(g: &FeatureMap<T>, axis: usize, factor: usize) -> FeatureMap<T> {
    let shape = g.shape();
    let (outer, m, inner) = split_axis(shape, axis);
    let n = m / factor;
    let taps = taps::<T>(n, factor);
    let mut in_shape = shape;
    in_shape[axis] = n;
    let mut grad = FeatureMap::zeros(in_shape);
    let src = g.data();
    let dst = grad.data_mut();
    for o in 0..outer {
        for (j, &(lo, hi, l)) in taps.iter().enumerate() {
            let gj = &src[(o * m + j) * inner..][..inner];
            for (k, &v) in gj.iter().enumerate() {
                dst[(o * n + lo) * inner + k] += v * (T::one() - l);
                dst[(o * n + hi) * inner + k] += v * l;
            }
        }
    }
    grad
}

/// Trilinear upsampling of every spatial axis by an integer factor.
pub fn upsample_trilinear<T: Real>(x: &FeatureMap<T>, factor: usize) -> FeatureMap<T> {
    if factor == 1 {
        return x.clone();
    }
    let y = upsample_axis(x, 1, factor);
    let y = upsample_axis(&y, 2, factor);
    upsample_axis(&y, 3, factor)
}

/// Adjoint of [`upsample_trilinear`].
pub fn upsample_trilinear_backward<T: Real>(g: &FeatureMap<T>, factor: usize) -> FeatureMap<T> {
    if factor == 1 {
        return g.clone();
    }
    let y = upsample_axis_backward(g, 3, factor);
    let y = upsample_axis_backward(&y, 2, factor);
    upsample_axis_backward(&y, 1, factor)
}

/// Softmax across channels at every voxel.
pub fn softmax_channels<T: Real>(logits: &FeatureMap<T>) -> FeatureMap<T> {
    let c = logits.channels();
    let n = logits.voxels();
    let src = logits.data();
    let mut out = FeatureMap::zeros(logits.shape());
    let dst = out.data_mut();
    for v in 0..n {
        let max = (0..c).map(|k| src[k * n + v]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for k in 0..c {
            let e = (src[k * n + v] - max).exp();
            dst[k * n + v] = e;
            total += e;
        }
        for k in 0..c {
            dst[k * n + v] = dst[k * n + v] / total;
        }
    }
    out
}

/// Channel index of the maximum value at every voxel (first wins on ties).
pub fn argmax_channels<T: Real>(x: &FeatureMap<T>) -> Vec<usize> {
    let c = x.channels();
    let n = x.voxels();
    let src = x.data();
    (0..n)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if src[k * n + v] > src[best * n + v] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upsample_constant_stays_constant() {
        let x = FeatureMap::<f64>::filled([2, 2, 3, 1], 1.5);
        let y = upsample_trilinear(&x, 4);
        assert_eq!(y.shape(), [2, 8, 12, 4]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn upsample_linear_ramp_interior() {
        // 1D ramp 0,1,2,3 upsampled by 2 → half-pixel interpolation, edges clamped
        let x = FeatureMap::<f64>::from_fn([1, 4, 1, 1], |[_, h, _, _]| h as f64);
        let y = upsample_trilinear(&x, 2);
        let got: Vec<f64> = (0..8).map(|h| y.get([0, h, 1, 1])).collect();
        let want = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = FeatureMap::<f64>::from_fn([2, 3, 2, 4], |_| rng.random_range(-1.0..1.0));
        let g = FeatureMap::<f64>::from_fn([2, 6, 4, 8], |_| rng.random_range(-1.0..1.0));
        let lhs = upsample_trilinear(&x, 2).dot(&g);
        let rhs = x.dot(&upsample_trilinear_backward(&g, 2));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = FeatureMap::<f32>::from_fn([4, 3, 3, 3], |_| rng.random_range(-30.0..30.0));
        let p = softmax_channels(&x);
        for v in 0..x.voxels() {
            let s: f32 = (0..4).map(|k| p.data()[k * 27 + v]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(2.0f64) - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }
}
