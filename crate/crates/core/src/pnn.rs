//! The unrolled dual forward-backward denoiser.
//!
//! With `u_0 = L_0 z`, each inner layer `k = 1..K-1` computes
//! `v_k = u_{k-1} − τ_k L_k (L_k* u_{k-1} − z)` and `u_k = clamp(v_k)`; the
//! output is `z − L_K* u_{K-1}`. The first inner layer is evaluated in the
//! merged form `(Id − τ_1 L_1 L_1*) L_0 z + τ_1 L_1 z` so that the lifted
//! objective and the forward pass share the exact same arithmetic.

use crate::conv::{ConvLinearOperator, POWER_ITERS, POWER_TOL};
use crate::error::{Error, Result};
use crate::prox::LinfBall;
use crate::tensor::{axpy, dot, norm_sq, sub, FeatureMap, Image};

/// `τ_k = TAU_FACTOR / ‖L_k‖²`
pub const TAU_FACTOR: f64 = 1.8;
pub const DEFAULT_TAU_FLOOR: f64 = 0.1;
/// Warm-started refreshes only need a handful of power steps.
const WARM_POWER_ITERS: usize = 50;

#[derive(Debug, Clone)]
pub struct PnnParams {
    ops: Vec<ConvLinearOperator>,
    /// `taus[k - 1]` is `τ_k`, `k = 1..=K`.
    taus: Vec<f64>,
    tau_floor: f64,
    ball: LinfBall,
    spectral_vecs: Vec<Vec<f64>>,
}

impl PartialEq for PnnParams {
    fn eq(&self, other: &Self) -> bool {
        self.ops == other.ops
            && self.taus == other.taus
            && self.tau_floor == other.tau_floor
            && self.ball == other.ball
    }
}

impl PnnParams {
    /// Builds the network and sets every `τ_k` from a cold power iteration.
    pub fn new(ops: Vec<ConvLinearOperator>, ball: LinfBall, tau_floor: f64) -> Result<Self> {
        let k = ops.len().saturating_sub(1);
        let mut params = Self::from_parts(ops, vec![1.0; k], ball, tau_floor)?;
        params.spectral_vecs.iter_mut().for_each(Vec::clear);
        params.refresh_taus();
        Ok(params)
    }

    /// Builds the network with explicit step sizes (checkpoints, tests).
    pub fn from_parts(
        ops: Vec<ConvLinearOperator>,
        taus: Vec<f64>,
        ball: LinfBall,
        tau_floor: f64,
    ) -> Result<Self> {
        if ops.len() < 3 {
            return Err(Error::Config(format!(
                "network depth must be at least 2 (got {} operators)",
                ops.len()
            )));
        }
        if taus.len() != ops.len() - 1 {
            return Err(Error::dim(format!("{} step sizes", ops.len() - 1), taus.len()));
        }
        // τ_k ‖L_k‖² = 1.8 must lie in [τ̲, 2 − τ̲]
        if !(tau_floor > 0.0 && tau_floor <= 2.0 - TAU_FACTOR + 1e-12) {
            return Err(Error::Config(format!(
                "tau floor must lie in (0, {}], got {tau_floor}",
                2.0 - TAU_FACTOR
            )));
        }
        let first = &ops[0];
        for op in &ops[1..] {
            if op.input_shape() != first.input_shape()
                || op.channels() != first.channels()
                || op.kernel_size() != first.kernel_size()
            {
                return Err(Error::dim(
                    format!("{:?} / {} channels", first.input_shape(), first.channels()),
                    format!("{:?} / {} channels", op.input_shape(), op.channels()),
                ));
            }
        }
        let spectral_vecs = vec![Vec::new(); ops.len()];
        Ok(Self {
            ops,
            taus,
            tau_floor,
            ball,
            spectral_vecs,
        })
    }

    /// Network whose operators are all zero: it returns its input unchanged.
    pub fn zeros(
        depth: usize,
        channels: usize,
        kernel_size: (usize, usize),
        input_shape: (usize, usize),
        ball: LinfBall,
    ) -> Result<Self> {
        let ops = (0..=depth)
            .map(|_| ConvLinearOperator::zeros(channels, kernel_size, input_shape))
            .collect();
        Self::new(ops, ball, DEFAULT_TAU_FLOOR)
    }

    /// Number of unrolled iterations `K`.
    #[inline]
    pub fn depth(&self) -> usize {
        self.ops.len() - 1
    }

    #[inline]
    pub fn ops(&self) -> &[ConvLinearOperator] {
        &self.ops
    }

    #[inline]
    pub fn op(&self, k: usize) -> &ConvLinearOperator {
        &self.ops[k]
    }

    /// Mutable kernels; callers refresh the step sizes afterwards if needed.
    pub fn ops_mut(&mut self) -> &mut [ConvLinearOperator] {
        &mut self.ops
    }

    /// `τ_k`, `k = 1..=K`.
    #[inline]
    pub fn tau(&self, k: usize) -> f64 {
        self.taus[k - 1]
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn set_tau(&mut self, k: usize, tau: f64) {
        self.taus[k - 1] = tau;
    }

    #[inline]
    pub fn ball(&self) -> LinfBall {
        self.ball
    }

    #[inline]
    pub fn lambda(&self) -> f64 {
        self.ball.radius()
    }

    #[inline]
    pub fn tau_floor(&self) -> f64 {
        self.tau_floor
    }

    #[inline]
    pub fn input_shape(&self) -> (usize, usize) {
        self.ops[0].input_shape()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.ops[0].channels()
    }

    #[inline]
    pub fn kernel_size(&self) -> (usize, usize) {
        self.ops[0].kernel_size()
    }

    #[inline]
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.ops[0].output_shape()
    }

    /// Same weights and step sizes applied to images of another size.
    pub fn with_input_shape(&self, shape: (usize, usize)) -> Self {
        Self {
            ops: self.ops.iter().map(|op| op.with_input_shape(shape)).collect(),
            taus: self.taus.clone(),
            tau_floor: self.tau_floor,
            ball: self.ball,
            spectral_vecs: vec![Vec::new(); self.ops.len()],
        }
    }

    /// Recomputes `τ_k = 1.8 / ‖L_k‖²` for `k = 1..=K`, warm-starting each power
    /// iteration from the previous leading eigenvector.
    pub fn refresh_taus(&mut self) {
        for k in 1..=self.depth() {
            let cold = self.spectral_vecs[k].is_empty();
            let iters = if cold { POWER_ITERS } else { WARM_POWER_ITERS };
            let norm_sq = self.ops[k].spectral_norm_sq_from(&mut self.spectral_vecs[k], iters, POWER_TOL);
            self.taus[k - 1] = if norm_sq > f64::EPSILON {
                TAU_FACTOR / norm_sq
            } else {
                // L_k = 0: τ_k multiplies nothing.
                TAU_FACTOR
            };
        }
    }

    /// Checks `τ_k ‖L_k‖² ∈ [τ̲, 2 − τ̲]` for every layer, with `‖L_k‖²` from a
    /// cold power iteration.
    pub fn step_sizes_admissible(&self) -> bool {
        (1..=self.depth()).all(|k| {
            let n = self.ops[k].spectral_norm_sq(POWER_ITERS, 1e-10);
            let scaled = self.tau(k) * n;
            n <= f64::EPSILON || (scaled >= self.tau_floor - 1e-6 && scaled <= 2.0 - self.tau_floor + 1e-6)
        })
    }

    /// `θ ← θ + alpha · d`
    pub fn add_scaled(&mut self, alpha: f64, direction: &KernelGrads) {
        for (op, d) in self.ops.iter_mut().zip(&direction.layers) {
            axpy(alpha, d, op.kernels_mut());
        }
    }

    pub fn kernel_count(&self) -> usize {
        self.ops.iter().map(|op| op.kernels().len()).sum()
    }

    /// Warm-start vectors of the step-size power iterations (empty = cold).
    pub fn spectral_vectors(&self) -> &[Vec<f64>] {
        &self.spectral_vecs
    }

    pub fn set_spectral_vectors(&mut self, vecs: Vec<Vec<f64>>) -> Result<()> {
        let (h, w) = self.input_shape();
        if vecs.len() != self.ops.len() || vecs.iter().any(|v| !v.is_empty() && v.len() != h * w) {
            return Err(Error::dim(
                format!("{} vectors of length 0 or {}", self.ops.len(), h * w),
                format!("{} vectors", vecs.len()),
            ));
        }
        self.spectral_vecs = vecs;
        Ok(())
    }

    fn check_layer(&self, k: usize, lo: usize, hi: usize) -> Result<()> {
        if k < lo || k > hi {
            return Err(Error::LayerIndex { index: k, lo, hi });
        }
        Ok(())
    }

    /// `(Id − τ_1 L_1 L_1*) L_0 z + τ_1 L_1 z`
    pub fn layer_tilde_f0(&self, z: &Image) -> Result<FeatureMap> {
        let lifted = self.ops[0].apply(z)?;
        self.first_layer_input(&lifted, z)
    }

    /// Merged first layer given `u_0 = L_0 z`.
    pub(crate) fn first_layer_input(&self, lifted: &FeatureMap, z: &Image) -> Result<FeatureMap> {
        let l1 = &self.ops[1];
        let tau = self.tau(1);
        let back = l1.apply_adjoint(lifted)?;
        let mut v = lifted.clone();
        axpy(-tau, l1.apply(&back)?.values(), v.values_mut());
        axpy(tau, l1.apply(z)?.values(), v.values_mut());
        Ok(v)
    }

    /// `u_{k-1} − τ_k L_k (L_k* u_{k-1} − z)` for `k = 2..=K-1`.
    pub fn layer_tilde_fk(&self, k: usize, u_prev: &FeatureMap, z: &Image) -> Result<FeatureMap> {
        self.check_layer(k, 2, self.depth() - 1)?;
        let lk = &self.ops[k];
        let residual = sub(lk.apply_adjoint(u_prev)?.values(), z.values());
        let residual = Image::new(z.height(), z.width(), residual)?;
        let mut v = u_prev.clone();
        axpy(-self.tau(k), lk.apply(&residual)?.values(), v.values_mut());
        Ok(v)
    }

    /// `z − L_K* u_{K-1}`
    pub fn layer_tilde_fk_final(&self, u_last: &FeatureMap, z: &Image) -> Result<Image> {
        let back = self.ops[self.depth()].apply_adjoint(u_last)?;
        z.ensure_shape(back.shape())?;
        Image::new(z.height(), z.width(), sub(z.values(), back.values()))
    }

    /// Runs the network, keeping every pre-activation `v_k` and dual `u_k`.
    pub fn forward(&self, z: &Image) -> Result<ForwardPass> {
        z.ensure_shape(self.input_shape())?;
        let depth = self.depth();
        let lifted = self.ops[0].apply(z)?;
        let mut pre = Vec::with_capacity(depth - 1);
        let mut duals: Vec<FeatureMap> = Vec::with_capacity(depth - 1);
        for k in 1..depth {
            let v = if k == 1 {
                self.first_layer_input(&lifted, z)?
            } else {
                self.layer_tilde_fk(k, &duals[k - 2], z)?
            };
            duals.push(self.ball.prox_conj(&v));
            pre.push(v);
        }
        let output = self.layer_tilde_fk_final(&duals[depth - 2], z)?;
        Ok(ForwardPass {
            lifted,
            pre_activations: pre,
            duals,
            output,
        })
    }

    /// `G_θ(z)`
    pub fn denoise(&self, z: &Image) -> Result<Image> {
        Ok(self.forward(z)?.output)
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `u_0 = L_0 z`
    pub lifted: FeatureMap,
    /// `v_1..v_{K-1}`
    pub pre_activations: Vec<FeatureMap>,
    /// `u_1..u_{K-1}`
    pub duals: Vec<FeatureMap>,
    pub output: Image,
}

impl ForwardPass {
    pub fn aux_vars(&self) -> AuxVars {
        AuxVars {
            blocks: self.duals.clone(),
        }
    }
}

/// Per-sample auxiliary duals `u_1..u_{K-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxVars {
    pub blocks: Vec<FeatureMap>,
}

impl AuxVars {
    pub fn zeros(depth: usize, shape: (usize, usize, usize)) -> Self {
        Self {
            blocks: (1..depth).map(|_| FeatureMap::zeros(shape.0, shape.1, shape.2)).collect(),
        }
    }

    pub fn is_feasible(&self, ball: &LinfBall) -> bool {
        self.blocks.iter().all(|b| ball.contains(b.values()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.blocks.iter().map(|b| norm_sq(b.values())).sum()
    }

    pub fn dot(&self, other: &AuxVars) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| dot(a.values(), b.values()))
            .sum()
    }

    /// `self + alpha · other`
    pub fn add_scaled(&self, alpha: f64, other: &AuxVars) -> AuxVars {
        let mut out = self.clone();
        for (o, d) in out.blocks.iter_mut().zip(&other.blocks) {
            axpy(alpha, d.values(), o.values_mut());
        }
        out
    }
}

/// Kernel-shaped gradients for every operator `L_0..L_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrads {
    pub layers: Vec<Vec<f64>>,
}

impl KernelGrads {
    pub fn zeros_like(params: &PnnParams) -> Self {
        Self {
            layers: params.ops().iter().map(|op| vec![0.0; op.kernels().len()]).collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| norm_sq(l)).sum()
    }

    pub fn dot(&self, other: &KernelGrads) -> f64 {
        self.layers.iter().zip(&other.layers).map(|(a, b)| dot(a, b)).sum()
    }

    pub fn add_assign(&mut self, other: &KernelGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(1.0, b, a);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.layers.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Iterates and objective values of a classical dual-FB run.
#[derive(Debug, Clone)]
pub struct DualFbTrace {
    pub solution: Image,
    pub dual: FeatureMap,
    pub iterations: usize,
    /// `½‖L*u − z‖² − ½‖z‖²` per iterate (monotone non-increasing).
    pub dual_objective: Vec<f64>,
    /// `½‖x − z‖² + λ‖L x‖₁` at `x = z − L*u` per iterate.
    pub primal_objective: Vec<f64>,
}

/// Solves `min_x ½‖x − z‖² + λ‖L x‖₁` by dual forward-backward with
/// `τ = 1.8/‖L‖²`, starting from `u = 0`.
pub fn dual_fb_solve(
    op: &ConvLinearOperator,
    z: &Image,
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Result<Image> {
    Ok(dual_fb_solve_traced(op, z, lambda, max_iters, tol)?.solution)
}

pub fn dual_fb_solve_traced(
    op: &ConvLinearOperator,
    z: &Image,
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Result<DualFbTrace> {
    let ball = LinfBall::new(lambda)?;
    z.ensure_shape(op.input_shape())?;
    let norm = op.spectral_norm_sq(POWER_ITERS, POWER_TOL);
    let tau = if norm > f64::EPSILON { TAU_FACTOR / norm } else { TAU_FACTOR };
    let (c, h, w) = op.output_shape();
    let mut u = FeatureMap::zeros(c, h, w);

    let objectives = |u: &FeatureMap| -> Result<(Image, f64, f64)> {
        let back = op.apply_adjoint(u)?;
        let x = Image::new(h, w, sub(z.values(), back.values()))?;
        let dual = 0.5 * norm_sq(&sub(back.values(), z.values())) - 0.5 * norm_sq(z.values());
        let l1: f64 = op.apply(&x)?.values().iter().map(|t| t.abs()).sum();
        let primal = 0.5 * norm_sq(&sub(x.values(), z.values())) + lambda * l1;
        Ok((x, dual, primal))
    };

    let (mut x, d0, p0) = objectives(&u)?;
    let mut dual_objective = vec![d0];
    let mut primal_objective = vec![p0];
    let mut iterations = 0;
    for _ in 0..max_iters {
        let residual = Image::new(h, w, sub(op.apply_adjoint(&u)?.values(), z.values()))?;
        let mut next = u.clone();
        axpy(-tau, op.apply(&residual)?.values(), next.values_mut());
        ball.project_in_place(next.values_mut());
        let change = norm_sq(&sub(next.values(), u.values())).sqrt();
        let scale = norm_sq(u.values()).sqrt().max(1.0);
        u = next;
        iterations += 1;
        let (xn, d, p) = objectives(&u)?;
        x = xn;
        dual_objective.push(d);
        primal_objective.push(p);
        if change / scale <= tol {
            break;
        }
    }
    Ok(DualFbTrace {
        solution: x,
        dual: u,
        iterations,
        dual_objective,
        primal_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prox::prox_l1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ball(l: f64) -> LinfBall {
        LinfBall::new(l).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, depth: usize, channels: usize, shape: (usize, usize)) -> PnnParams {
        let ops = (0..=depth)
            .map(|_| {
                let k = (0..channels * 9).map(|_| rng.random_range(-0.4..0.4)).collect();
                ConvLinearOperator::new(channels, (3, 3), k, shape).unwrap()
            })
            .collect();
        PnnParams::new(ops, ball(0.1), DEFAULT_TAU_FLOOR).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Image {
        Image::from_fn(shape.0, shape.1, |_, _| rng.random_range(0.0..1.0))
    }

    fn identity_params(depth: usize, shape: (usize, usize), lambda: f64) -> PnnParams {
        let ops = (0..=depth)
            .map(|_| ConvLinearOperator::identity(1, (1, 1), shape))
            .collect();
        let mut p = PnnParams::new(ops, ball(lambda), DEFAULT_TAU_FLOOR).unwrap();
        for k in 1..=depth {
            p.set_tau(k, 1.0);
        }
        p
    }

    /// Dense `n × m` matrix of an operator, column by column.
    fn dense(op: &ConvLinearOperator) -> Vec<Vec<f64>> {
        let (h, w) = op.input_shape();
        let mut cols = Vec::new();
        for idx in 0..h * w {
            let mut e = Image::zeros(h, w);
            e.values_mut()[idx] = 1.0;
            cols.push(op.apply(&e).unwrap().into_values());
        }
        let rows = cols[0].len();
        (0..rows).map(|r| cols.iter().map(|c| c[r]).collect()).collect()
    }

    fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        m.iter().map(|row| dot(row, x)).collect()
    }

    fn matvec_t(m: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let cols = m[0].len();
        (0..cols).map(|c| m.iter().zip(y).map(|(row, yi)| row[c] * yi).sum()).collect()
    }

    #[test]
    fn depth_and_tau_floor_validated() {
        let op = ConvLinearOperator::zeros(1, (3, 3), (4, 4));
        assert!(PnnParams::new(vec![op.clone(), op.clone()], ball(0.1), 0.1).is_err());
        assert!(PnnParams::new(vec![op.clone(), op.clone(), op.clone()], ball(0.1), 0.3).is_err());
        assert!(PnnParams::new(vec![op.clone(), op.clone(), op], ball(0.1), 0.2).is_ok());
    }

    #[test]
    fn refreshed_taus_are_admissible() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_params(&mut rng, 4, 3, (8, 8));
        assert!(p.step_sizes_admissible());
        for k in 1..=4 {
            let n = p.op(k).spectral_norm_sq(POWER_ITERS, 1e-10);
            assert!((p.tau(k) * n - TAU_FACTOR).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_params_forward_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = PnnParams::zeros(5, 4, (3, 3), (6, 6), ball(0.1)).unwrap();
        let z = random_image(&mut rng, (6, 6));
        let pass = p.forward(&z).unwrap();
        assert_eq!(pass.output, z);
        assert!(pass.duals.iter().all(|u| u.values().iter().all(|&v| v == 0.0)));
        assert_eq!(p.layer_tilde_f0(&z).unwrap().values(), FeatureMap::zeros(4, 6, 6).values());
        let u = pass.duals[0].clone();
        assert_eq!(p.layer_tilde_fk(2, &u, &z).unwrap(), u);
        assert_eq!(p.layer_tilde_fk_final(&u, &z).unwrap(), z);
    }

    #[test]
    fn identity_operator_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = identity_params(4, (3, 5), 0.2);
        let z = random_image(&mut rng, (3, 5));
        let u = FeatureMap::new(1, 3, 5, (0..15).map(|_| rng.random_range(-0.2..0.2)).collect()).unwrap();
        let f0 = p.layer_tilde_f0(&z).unwrap();
        assert!(f0.values().iter().zip(z.values()).all(|(a, b)| (a - b).abs() < 1e-15));
        let fk = p.layer_tilde_fk(2, &u, &z).unwrap();
        assert!(fk.values().iter().zip(z.values()).all(|(a, b)| (a - b).abs() < 1e-15));
        let out = p.layer_tilde_fk_final(&u, &z).unwrap();
        let expected = sub(z.values(), u.values());
        assert_eq!(out.values(), expected.as_slice());
    }

    #[test]
    fn layer_index_checked() {
        let p = identity_params(4, (3, 3), 0.1);
        let u = FeatureMap::zeros(1, 3, 3);
        let z = Image::zeros(3, 3);
        assert!(matches!(p.layer_tilde_fk(1, &u, &z), Err(Error::LayerIndex { .. })));
        assert!(matches!(p.layer_tilde_fk(4, &u, &z), Err(Error::LayerIndex { .. })));
        assert!(p.layer_tilde_fk(3, &u, &z).is_ok());
    }

    #[test]
    fn depth_two_identity_chain() {
        // u_1 = clamp(z), output = z − clamp(z)
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let lambda = 0.3;
        let p = identity_params(2, (4, 4), lambda);
        let z = Image::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let out = p.denoise(&z).unwrap();
        for (o, zi) in out.values().iter().zip(z.values()) {
            assert!((o - (zi - zi.clamp(-lambda, lambda))).abs() < 1e-15);
        }
    }

    #[test]
    fn merged_layers_match_dense_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let shape = (4, 5);
        let p = random_params(&mut rng, 3, 2, shape);
        let z = random_image(&mut rng, shape);
        let m0 = dense(p.op(0));
        let m1 = dense(p.op(1));
        let m2 = dense(p.op(2));
        let m3 = dense(p.op(3));

        // (I − τ1 M1 M1ᵀ) M0 z + τ1 M1 z
        let a = matvec(&m0, z.values());
        let t = matvec(&m1, &matvec_t(&m1, &a));
        let t2 = matvec(&m1, z.values());
        let expected: Vec<f64> = (0..a.len()).map(|i| a[i] - p.tau(1) * t[i] + p.tau(1) * t2[i]).collect();
        let got = p.layer_tilde_f0(&z).unwrap();
        for (g, e) in got.values().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }

        let u: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-0.1..0.1)).collect();
        let uf = FeatureMap::new(2, 4, 5, u.clone()).unwrap();
        let r = sub(&matvec_t(&m2, &u), z.values());
        let lr = matvec(&m2, &r);
        let expected: Vec<f64> = (0..u.len()).map(|i| u[i] - p.tau(2) * lr[i]).collect();
        let got = p.layer_tilde_fk(2, &uf, &z).unwrap();
        for (g, e) in got.values().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }

        let expected = sub(z.values(), &matvec_t(&m3, &u));
        let got = p.layer_tilde_fk_final(&uf, &z).unwrap();
        for (g, e) in got.values().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_layer_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = random_params(&mut rng, 5, 3, (7, 6));
        let z = random_image(&mut rng, (7, 6));
        let pass = p.forward(&z).unwrap();
        let mut u = p.ball().prox_conj(&p.layer_tilde_f0(&z).unwrap());
        assert_eq!(u, pass.duals[0]);
        for k in 2..5 {
            u = p.ball().prox_conj(&p.layer_tilde_fk(k, &u, &z).unwrap());
            assert_eq!(u, pass.duals[k - 1]);
        }
        assert_eq!(p.layer_tilde_fk_final(&u, &z).unwrap(), pass.output);
        for d in &pass.duals {
            assert!(d.sup_norm() <= p.lambda());
        }
    }

    /// Primal/dual sub-layer form: `T_0 = L_0`, inner layers
    /// `(x, u) = (L_k* u − z, u)` then `clamp(u − τ_k L_k x)`, output `z − L_K* u`.
    fn forward_factored(p: &PnnParams, z: &Image) -> Image {
        let mut u = p.op(0).apply(z).unwrap();
        for k in 1..p.depth() {
            let x = Image::new(z.height(), z.width(), sub(p.op(k).apply_adjoint(&u).unwrap().values(), z.values()))
                .unwrap();
            let mut next = u.clone();
            axpy(-p.tau(k), p.op(k).apply(&x).unwrap().values(), next.values_mut());
            u = p.ball().prox_conj(&next);
        }
        let back = p.op(p.depth()).apply_adjoint(&u).unwrap();
        Image::new(z.height(), z.width(), sub(z.values(), back.values())).unwrap()
    }

    #[test]
    fn factored_and_merged_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for depth in [2, 3, 6] {
            let p = random_params(&mut rng, depth, 2, (6, 6));
            let z = random_image(&mut rng, (6, 6));
            let merged = p.denoise(&z).unwrap();
            let factored = forward_factored(&p, &z);
            for (a, b) in merged.values().iter().zip(factored.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn any_admissible_tau_keeps_duals_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = random_params(&mut rng, 4, 2, (6, 6));
        let z = random_image(&mut rng, (6, 6));
        for k in 1..=4 {
            let n = p.op(k).spectral_norm_sq(POWER_ITERS, 1e-10);
            let t = rng.random_range(p.tau_floor()..(2.0 - p.tau_floor())) / n;
            p.set_tau(k, t);
        }
        let pass = p.forward(&z).unwrap();
        assert!(pass.output.is_finite());
        assert!(pass.aux_vars().is_feasible(&p.ball()));
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let p = identity_params(3, (4, 4), 0.1);
        assert!(p.forward(&Image::zeros(4, 5)).is_err());
    }

    #[test]
    fn dual_fb_identity_matches_soft_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let op = ConvLinearOperator::identity(1, (1, 1), (6, 6));
        for lambda in [0.05, 0.1, 0.5] {
            let z = random_image(&mut rng, (6, 6));
            let x = dual_fb_solve(&op, &z, lambda, 500, 1e-14).unwrap();
            let oracle = prox_l1(lambda, &z);
            for (a, b) in x.values().iter().zip(oracle.values()) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn dual_fb_vanishing_lambda_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let op = ConvLinearOperator::new(2, (3, 3), (0..18).map(|_| rng.random_range(-1.0..1.0)).collect(), (6, 6))
            .unwrap();
        let z = random_image(&mut rng, (6, 6));
        let x = dual_fb_solve(&op, &z, 1e-12, 500, 1e-14).unwrap();
        for (a, b) in x.values().iter().zip(z.values()) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn dual_fb_dual_objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let op = ConvLinearOperator::new(3, (3, 3), (0..27).map(|_| rng.random_range(-1.0..1.0)).collect(), (8, 8))
            .unwrap();
        let z = random_image(&mut rng, (8, 8));
        let trace = dual_fb_solve_traced(&op, &z, 0.1, 300, 0.0).unwrap();
        for w in trace.dual_objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        // the primal value of the returned iterate approaches the optimum
        let last = *trace.primal_objective.last().unwrap();
        let dual_bound = -trace.dual_objective.last().unwrap();
        assert!(last >= dual_bound - 1e-9);
        assert!(last - dual_bound < 1e-3 * last.abs().max(1.0));
    }
}
