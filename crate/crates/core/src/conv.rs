//! Multi-channel "same" convolution operators `L: R^N -> R^S` with exact adjoints.
//!
//! `apply` is a zero-padded, stride-1 cross-correlation of one image with `C`
//! kernels; `apply_adjoint` is its transpose under the Euclidean inner
//! products, and `kernel_gradient` the derivative of `<L x, w>` with respect to
//! the kernel entries. All three share one index pattern so that the adjoint
//! identity holds to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, norm_sq, FeatureMap, Image};

pub const POWER_ITERS: usize = 200;
pub const POWER_TOL: f64 = 1e-6;
pub const POWER_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLinearOperator {
    channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    /// `channels × kernel_h × kernel_w`, row-major.
    kernels: Vec<f64>,
    height: usize,
    width: usize,
}

/// Output rows/cols `lo..hi` for which the input index `i + offset` is in `0..len`.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

impl ConvLinearOperator {
    pub fn new(
        channels: usize,
        kernel_size: (usize, usize),
        kernels: Vec<f64>,
        input_shape: (usize, usize),
    ) -> Result<Self> {
        let (kernel_h, kernel_w) = kernel_size;
        if channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::Config(
                "operator needs at least one channel and a non-empty kernel".into(),
            ));
        }
        if kernels.len() != channels * kernel_h * kernel_w {
            return Err(Error::dim(
                format!("{} kernel weights", channels * kernel_h * kernel_w),
                kernels.len(),
            ));
        }
        Ok(Self {
            channels,
            kernel_h,
            kernel_w,
            kernels,
            height: input_shape.0,
            width: input_shape.1,
        })
    }

    pub fn zeros(channels: usize, kernel_size: (usize, usize), input_shape: (usize, usize)) -> Self {
        let n = channels * kernel_size.0 * kernel_size.1;
        Self::new(channels, kernel_size, vec![0.0; n], input_shape).expect("valid zero operator")
    }

    /// `channels` copies of the centred unit impulse; `L*L = channels · Id`.
    pub fn identity(channels: usize, kernel_size: (usize, usize), input_shape: (usize, usize)) -> Self {
        let mut op = Self::zeros(channels, kernel_size, input_shape);
        let (ch, cw) = ((kernel_size.0 - 1) / 2, (kernel_size.1 - 1) / 2);
        let per = kernel_size.0 * kernel_size.1;
        for c in 0..channels {
            op.kernels[c * per + ch * kernel_size.1 + cw] = 1.0;
        }
        op
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    #[inline]
    pub fn input_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn output_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn kernels(&self) -> &[f64] {
        &self.kernels
    }

    #[inline]
    pub fn kernels_mut(&mut self) -> &mut [f64] {
        &mut self.kernels
    }

    /// Same kernels acting on images of a different size.
    pub fn with_input_shape(&self, input_shape: (usize, usize)) -> Self {
        Self {
            height: input_shape.0,
            width: input_shape.1,
            ..self.clone()
        }
    }

    /// Visits every `(channel, tap, row offset, col offset)` with its kernel index.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, isize, isize)) {
        let (ph, pw) = ((self.kernel_h - 1) / 2, (self.kernel_w - 1) / 2);
        for c in 0..self.channels {
            for a in 0..self.kernel_h {
                for b in 0..self.kernel_w {
                    let idx = (c * self.kernel_h + a) * self.kernel_w + b;
                    f(c, idx, a as isize - ph as isize, b as isize - pw as isize);
                }
            }
        }
    }

    pub fn apply(&self, x: &Image) -> Result<FeatureMap> {
        x.ensure_shape(self.input_shape())?;
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let xv = x.values();
        let mut out = vec![0.0; self.channels * plane];
        self.for_each_tap(|c, idx, dy, dx| {
            let k = self.kernels[idx];
            if k == 0.0 {
                return;
            }
            let (i0, i1) = valid_range(h, dy);
            let (j0, j1) = valid_range(w, dx);
            let dst = &mut out[c * plane..(c + 1) * plane];
            for i in i0..i1 {
                let src_row = ((i as isize + dy) as usize) * w;
                let src = &xv[(src_row as isize + j0 as isize + dx) as usize..][..j1 - j0];
                for (d, s) in dst[i * w + j0..i * w + j1].iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        });
        FeatureMap::new(self.channels, h, w, out)
    }

    pub fn apply_adjoint(&self, u: &FeatureMap) -> Result<Image> {
        u.ensure_shape(self.output_shape())?;
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let uv = u.values();
        let mut out = vec![0.0; plane];
        self.for_each_tap(|c, idx, dy, dx| {
            let k = self.kernels[idx];
            if k == 0.0 {
                return;
            }
            let (i0, i1) = valid_range(h, dy);
            let (j0, j1) = valid_range(w, dx);
            let src = &uv[c * plane..(c + 1) * plane];
            for i in i0..i1 {
                let dst_row = ((i as isize + dy) as usize) * w;
                let start = (dst_row as isize + j0 as isize + dx) as usize;
                for (d, s) in out[start..start + (j1 - j0)]
                    .iter_mut()
                    .zip(&src[i * w + j0..i * w + j1])
                {
                    *d += k * s;
                }
            }
        });
        Image::new(h, w, out)
    }

    /// Gradient of `<L x, w>` with respect to the kernel weights (same layout as
    /// [`kernels`](Self::kernels)).
    pub fn kernel_gradient(&self, x: &Image, w: &FeatureMap) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.kernels.len()];
        self.accumulate_kernel_gradient(1.0, x, w, &mut grad)?;
        Ok(grad)
    }

    /// `grad += scale * d<L x, w>/d kernels`.
    pub fn accumulate_kernel_gradient(
        &self,
        scale: f64,
        x: &Image,
        wmap: &FeatureMap,
        grad: &mut [f64],
    ) -> Result<()> {
        x.ensure_shape(self.input_shape())?;
        wmap.ensure_shape(self.output_shape())?;
        if grad.len() != self.kernels.len() {
            return Err(Error::dim(self.kernels.len(), grad.len()));
        }
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let xv = x.values();
        let wv = wmap.values();
        self.for_each_tap(|c, idx, dy, dx| {
            let (i0, i1) = valid_range(h, dy);
            let (j0, j1) = valid_range(w, dx);
            let wc = &wv[c * plane..(c + 1) * plane];
            let mut acc = 0.0;
            for i in i0..i1 {
                let src_row = ((i as isize + dy) as usize) * w;
                let src = &xv[(src_row as isize + j0 as isize + dx) as usize..][..j1 - j0];
                acc += dot(&wc[i * w + j0..i * w + j1], src);
            }
            grad[idx] += scale * acc;
        });
        Ok(())
    }

    /// `x ↦ L*(L x)`
    pub fn normal(&self, x: &Image) -> Result<Image> {
        self.apply_adjoint(&self.apply(x)?)
    }

    /// Power-iteration estimate of `‖L‖²`, the largest eigenvalue of `L*L`,
    /// started from a fixed-seed random vector.
    pub fn spectral_norm_sq(&self, iters: usize, tol: f64) -> f64 {
        let mut start = seeded_start(self.height * self.width);
        self.spectral_norm_sq_from(&mut start, iters, tol)
    }

    /// Power iteration warm-started from `start`; on return `start` holds the
    /// last normalised iterate. The result is the Rayleigh quotient of that
    /// iterate, so it never exceeds the true `‖L‖²`.
    pub fn spectral_norm_sq_from(&self, start: &mut Vec<f64>, iters: usize, tol: f64) -> f64 {
        let (h, w) = self.input_shape();
        if start.len() != h * w || norm_sq(start) == 0.0 {
            *start = seeded_start(h * w);
        }
        let iters = iters.max(1);
        let mut x = Image::new(h, w, std::mem::take(start)).expect("sized start vector");
        normalize(x.values_mut());
        let mut eig = 0.0;
        for it in 0..iters {
            let y = self.normal(&x).expect("shape checked");
            let rayleigh = dot(x.values(), y.values());
            let ny = norm_sq(y.values()).sqrt();
            if ny == 0.0 {
                // x lies in the kernel of L; for a zero operator that is everything.
                eig = 0.0;
                break;
            }
            let converged = it > 0 && (rayleigh - eig).abs() <= tol * rayleigh.abs();
            eig = rayleigh;
            if converged {
                break;
            }
            x = y;
            normalize(x.values_mut());
        }
        *start = x.into_values();
        eig.max(0.0)
    }
}

fn normalize(v: &mut [f64]) {
    let n = norm_sq(v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn seeded_start(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_op(rng: &mut ChaCha8Rng, channels: usize, k: usize, shape: (usize, usize)) -> ConvLinearOperator {
        let kernels = (0..channels * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvLinearOperator::new(channels, (k, k), kernels, shape).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Image {
        Image::from_fn(shape.0, shape.1, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_features(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> FeatureMap {
        let n = shape.0 * shape.1 * shape.2;
        FeatureMap::new(shape.0, shape.1, shape.2, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, (5, 7));
        let op = ConvLinearOperator::identity(1, (1, 1), (5, 7));
        assert_eq!(op.apply(&x).unwrap().values(), x.values());
        let u = FeatureMap::new(1, 5, 7, x.values().to_vec()).unwrap();
        assert_eq!(op.apply_adjoint(&u).unwrap().values(), x.values());
    }

    #[test]
    fn zero_kernels_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = ConvLinearOperator::zeros(3, (3, 3), (4, 4));
        let x = random_image(&mut rng, (4, 4));
        assert!(op.apply(&x).unwrap().values().iter().all(|&v| v == 0.0));
        let u = random_features(&mut rng, (3, 4, 4));
        assert!(op.apply_adjoint(&u).unwrap().values().iter().all(|&v| v == 0.0));
        assert_eq!(op.spectral_norm_sq(POWER_ITERS, POWER_TOL), 0.0);
    }

    #[test]
    fn centre_tap_scales_interior_and_border() {
        let mut k = vec![0.0; 9];
        k[4] = 2.0;
        let op = ConvLinearOperator::new(1, (3, 3), k, (4, 4)).unwrap();
        let out = op.apply(&Image::filled(4, 4, 1.0)).unwrap();
        assert!(out.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn border_taps_see_zero_padding() {
        // kernel picks the left neighbour: out[i][j] = x[i][j-1]
        let mut k = vec![0.0; 9];
        k[3] = 1.0;
        let op = ConvLinearOperator::new(1, (3, 3), k, (2, 3)).unwrap();
        let x = Image::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(op.apply(&x).unwrap().values(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let op = ConvLinearOperator::zeros(2, (3, 3), (4, 4));
        assert!(matches!(op.apply(&Image::zeros(4, 5)), Err(Error::Dimension { .. })));
        assert!(op.apply_adjoint(&FeatureMap::zeros(3, 4, 4)).is_err());
        assert!(op.kernel_gradient(&Image::zeros(4, 4), &FeatureMap::zeros(2, 4, 3)).is_err());
    }

    #[test]
    fn adjoint_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let shape = (3 + trial % 5, 4 + trial % 3);
            let k = [1, 2, 3, 5][trial % 4];
            let op = random_op(&mut rng, 1 + trial % 3, k, shape);
            let x = random_image(&mut rng, shape);
            let u = random_features(&mut rng, op.output_shape());
            let lhs = dot(op.apply(&x).unwrap().values(), u.values());
            let rhs = dot(x.values(), op.apply_adjoint(&u).unwrap().values());
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn stacked_identity_channels_have_norm_two() {
        let op = ConvLinearOperator::identity(2, (3, 3), (6, 6));
        assert!((op.spectral_norm_sq(POWER_ITERS, POWER_TOL) - 2.0).abs() < 1e-6);
        let id = ConvLinearOperator::identity(1, (1, 1), (6, 6));
        assert!((id.spectral_norm_sq(POWER_ITERS, POWER_TOL) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn spectral_estimate_bounds_rayleigh_quotients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = random_op(&mut rng, 2, 3, (8, 8));
        let est = op.spectral_norm_sq(POWER_ITERS, POWER_TOL);
        for _ in 0..50 {
            let x = random_image(&mut rng, (8, 8));
            let q = norm_sq(op.apply(&x).unwrap().values()) / norm_sq(x.values());
            assert!(q <= est * (1.0 + 1e-9));
        }
    }

    #[test]
    fn warm_start_reuses_eigenvector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = random_op(&mut rng, 4, 3, (10, 10));
        let mut v = Vec::new();
        let cold = op.spectral_norm_sq_from(&mut v, 20_000, 1e-14);
        let warm = op.spectral_norm_sq_from(&mut v, 3, 1e-10);
        assert!((cold - warm).abs() <= 1e-8 * cold);
    }

    #[test]
    fn kernel_gradient_zero_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = random_op(&mut rng, 2, 3, (5, 5));
        let w = random_features(&mut rng, (2, 5, 5));
        let x = random_image(&mut rng, (5, 5));
        assert!(op.kernel_gradient(&Image::zeros(5, 5), &w).unwrap().iter().all(|&g| g == 0.0));
        assert!(op
            .kernel_gradient(&x, &FeatureMap::zeros(2, 5, 5))
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let op = random_op(&mut rng, 2, 3, (5, 6));
        let x = random_image(&mut rng, (5, 6));
        let w = random_features(&mut rng, (2, 5, 6));
        let grad = op.kernel_gradient(&x, &w).unwrap();
        let h = 1e-6;
        for idx in 0..grad.len() {
            let mut plus = op.clone();
            plus.kernels_mut()[idx] += h;
            let mut minus = op.clone();
            minus.kernels_mut()[idx] -= h;
            let fp = dot(plus.apply(&x).unwrap().values(), w.values());
            let fm = dot(minus.apply(&x).unwrap().values(), w.values());
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[idx]).abs() <= 1e-6 * grad[idx].abs().max(1.0), "{idx}: {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn apply_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let op = random_op(&mut rng, 3, 3, (7, 7));
        let x = random_image(&mut rng, (7, 7));
        let a = op.apply(&x).unwrap();
        let b = op.apply(&x).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
