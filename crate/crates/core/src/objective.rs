//! Lifted Bregman training objective for the unrolled denoiser.
//!
//! For one training pair `(x̄, z)` and duals `u_1..u_{K-1}`:
//!
//! ```text
//! E(θ, u) = ½‖z − L_K* u_{K-1} − x̄‖² + Σ_k B(u_k, v_k)
//! v_1 = (Id − τ_1 L_1 L_1*) L_0 z + τ_1 L_1 z
//! v_k = u_{k-1} − τ_k L_k (L_k* u_{k-1} − z),   k = 2..K-1
//! ```
//!
//! `E = h + f` where `h` is the indicator of the ℓ∞ ball on every `u_k` and
//! `f` is smooth in `(θ, u)`. Gradients of `f` are computed analytically with
//! `∇_v B(u, v) = clamp(v) − u`; step sizes `τ_k` are held constant.

use crate::error::{Error, Result};
use crate::pnn::{AuxVars, KernelGrads, PnnParams};
use crate::prox::BregmanPenalty;
use crate::tensor::{axpy, norm_sq, sub, FeatureMap, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: u64,
    pub clean: Image,
    pub noisy: Image,
}

impl SamplePair {
    pub fn new(id: u64, clean: Image, noisy: Image) -> Result<Self> {
        noisy.ensure_shape(clean.shape())?;
        Ok(Self { id, clean, noisy })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBreakdown {
    pub total: f64,
    pub loss_term: f64,
    /// `B(u_k, v_k)` for `k = 1..K-1`.
    pub penalty_terms: Vec<f64>,
}

impl ObjectiveBreakdown {
    pub fn is_feasible(&self) -> bool {
        self.total.is_finite()
    }
}

/// All affine layer inputs for one `(θ, u, sample)`, computed once and shared
/// by the objective and both gradients.
#[derive(Debug)]
pub struct LiftedEval<'a> {
    params: &'a PnnParams,
    aux: &'a AuxVars,
    sample: &'a SamplePair,
    lifted: FeatureMap,
    inputs: Vec<FeatureMap>,
    output: Image,
}

impl<'a> LiftedEval<'a> {
    pub fn new(params: &'a PnnParams, aux: &'a AuxVars, sample: &'a SamplePair) -> Result<Self> {
        let depth = params.depth();
        if aux.blocks.len() != depth - 1 {
            return Err(Error::dim(format!("{} auxiliary blocks", depth - 1), aux.blocks.len()));
        }
        for b in &aux.blocks {
            b.ensure_shape(params.feature_shape())?;
        }
        let z = &sample.noisy;
        z.ensure_shape(params.input_shape())?;
        let lifted = params.op(0).apply(z)?;
        let mut inputs = Vec::with_capacity(depth - 1);
        inputs.push(params.first_layer_input(&lifted, z)?);
        for k in 2..depth {
            inputs.push(params.layer_tilde_fk(k, &aux.blocks[k - 2], z)?);
        }
        let output = params.layer_tilde_fk_final(&aux.blocks[depth - 2], z)?;
        Ok(Self {
            params,
            aux,
            sample,
            lifted,
            inputs,
            output,
        })
    }

    /// `v_1..v_{K-1}`
    pub fn layer_inputs(&self) -> &[FeatureMap] {
        &self.inputs
    }

    /// `F̃_K(u_{K-1}, z)`
    pub fn output(&self) -> &Image {
        &self.output
    }

    fn penalty(&self) -> BregmanPenalty {
        BregmanPenalty::new(self.params.ball())
    }

    pub fn loss_term(&self) -> f64 {
        0.5 * norm_sq(&sub(self.output.values(), self.sample.clean.values()))
    }

    pub fn breakdown(&self) -> ObjectiveBreakdown {
        let pen = self.penalty();
        let loss_term = self.loss_term();
        let penalty_terms: Vec<f64> = self
            .aux
            .blocks
            .iter()
            .zip(&self.inputs)
            .map(|(u, v)| pen.eval(u, v))
            .collect();
        let total = loss_term + penalty_terms.iter().sum::<f64>();
        ObjectiveBreakdown {
            total,
            loss_term,
            penalty_terms,
        }
    }

    pub fn smooth(&self) -> f64 {
        let pen = self.penalty();
        self.loss_term()
            + self
                .aux
                .blocks
                .iter()
                .zip(&self.inputs)
                .map(|(u, v)| pen.smooth(u.values(), v.values()))
                .sum::<f64>()
    }

    /// `∂f/∂v_k = clamp(v_k) − u_k` for every layer.
    fn input_sensitivities(&self) -> Vec<FeatureMap> {
        let pen = self.penalty();
        self.aux
            .blocks
            .iter()
            .zip(&self.inputs)
            .map(|(u, v)| pen.grad_v(u, v))
            .collect()
    }

    fn residual(&self) -> Image {
        Image::new(
            self.output.height(),
            self.output.width(),
            sub(self.output.values(), self.sample.clean.values()),
        )
        .expect("same shape")
    }

    pub fn grad_u(&self) -> Result<AuxVars> {
        let depth = self.params.depth();
        let sens = self.input_sensitivities();
        let mut blocks = Vec::with_capacity(depth - 1);
        for k in 1..depth {
            let u = &self.aux.blocks[k - 1];
            let mut g = FeatureMap::new(u.channels(), u.height(), u.width(), sub(u.values(), self.inputs[k - 1].values()))?;
            let downstream = if k + 1 < depth {
                through_layer_input(self.params, k + 1, &sens[k])?
            } else {
                let lk = self.params.op(depth);
                let mut t = lk.apply(&self.residual())?;
                t.values_mut().iter_mut().for_each(|x| *x = -*x);
                t
            };
            axpy(1.0, downstream.values(), g.values_mut());
            blocks.push(g);
        }
        Ok(AuxVars { blocks })
    }

    pub fn grad_theta(&self) -> Result<KernelGrads> {
        let depth = self.params.depth();
        let z = &self.sample.noisy;
        let sens = self.input_sensitivities();
        let mut grads = KernelGrads::zeros_like(self.params);
        self.params
            .op(depth)
            .accumulate_kernel_gradient(-1.0, &self.residual(), &self.aux.blocks[depth - 2], &mut grads.layers[depth])?;
        for k in 1..depth {
            let prev = if k == 1 { &self.lifted } else { &self.aux.blocks[k - 2] };
            let to_prev = layer_backward(self.params, k, prev, z, &sens[k - 1], &mut grads)?;
            if k == 1 {
                self.params
                    .op(0)
                    .accumulate_kernel_gradient(1.0, z, &to_prev, &mut grads.layers[0])?;
            }
        }
        Ok(grads)
    }
}

/// `M_k w = w − τ_k L_k L_k* w`, the (self-adjoint) Jacobian of `v_k` with
/// respect to its dual input.
pub(crate) fn through_layer_input(params: &PnnParams, k: usize, w: &FeatureMap) -> Result<FeatureMap> {
    let lk = params.op(k);
    let mut out = w.clone();
    axpy(-params.tau(k), lk.apply(&lk.apply_adjoint(w)?)?.values(), out.values_mut());
    Ok(out)
}

/// Backpropagates `w = ∂/∂v_k` through `v_k = prev − τ_k L_k (L_k* prev − z)`:
/// adds the kernel gradient of `L_k` into `grads` and returns `∂/∂prev`.
pub(crate) fn layer_backward(
    params: &PnnParams,
    k: usize,
    prev: &FeatureMap,
    z: &Image,
    w: &FeatureMap,
    grads: &mut KernelGrads,
) -> Result<FeatureMap> {
    let lk = params.op(k);
    let tau = params.tau(k);
    let back_prev = lk.apply_adjoint(prev)?;
    let residual = Image::new(z.height(), z.width(), sub(z.values(), back_prev.values()))?;
    let back_w = lk.apply_adjoint(w)?;
    lk.accumulate_kernel_gradient(tau, &residual, w, &mut grads.layers[k])?;
    lk.accumulate_kernel_gradient(-tau, &back_w, prev, &mut grads.layers[k])?;
    let mut to_prev = w.clone();
    axpy(-tau, lk.apply(&back_w)?.values(), to_prev.values_mut());
    Ok(to_prev)
}

/// `E(θ, u | z, x̄)`, infinite when some `u_k` leaves the ball.
pub fn eval_lifted(params: &PnnParams, aux: &AuxVars, sample: &SamplePair) -> Result<ObjectiveBreakdown> {
    Ok(LiftedEval::new(params, aux, sample)?.breakdown())
}

/// The smooth part `f` of `E`; finite everywhere.
pub fn eval_smooth(params: &PnnParams, aux: &AuxVars, sample: &SamplePair) -> Result<f64> {
    Ok(LiftedEval::new(params, aux, sample)?.smooth())
}

pub fn grad_smooth_u(params: &PnnParams, aux: &AuxVars, sample: &SamplePair) -> Result<AuxVars> {
    LiftedEval::new(params, aux, sample)?.grad_u()
}

pub fn grad_smooth_theta(params: &PnnParams, aux: &AuxVars, sample: &SamplePair) -> Result<KernelGrads> {
    LiftedEval::new(params, aux, sample)?.grad_theta()
}

/// `½‖G_θ(z) − x̄‖²`
pub fn end_to_end_loss(params: &PnnParams, sample: &SamplePair) -> Result<f64> {
    let out = params.denoise(&sample.noisy)?;
    Ok(0.5 * norm_sq(&sub(out.values(), sample.clean.values())))
}

/// Gradient of `½‖G_θ(z) − x̄‖²` by reverse-mode differentiation through the
/// network. The clamp contributes its 0/1 mask (`|v| < λ`); `τ_k` are held
/// constant. Returns the loss alongside.
pub fn end_to_end_gradient(params: &PnnParams, sample: &SamplePair) -> Result<(f64, KernelGrads)> {
    let z = &sample.noisy;
    let pass = params.forward(z)?;
    let depth = params.depth();
    let lambda = params.lambda();
    let residual = Image::new(z.height(), z.width(), sub(pass.output.values(), sample.clean.values()))?;
    let loss = 0.5 * norm_sq(residual.values());

    let mut grads = KernelGrads::zeros_like(params);
    let last = params.op(depth);
    last.accumulate_kernel_gradient(-1.0, &residual, &pass.duals[depth - 2], &mut grads.layers[depth])?;
    let mut delta = last.apply(&residual)?;
    delta.values_mut().iter_mut().for_each(|x| *x = -*x);

    for k in (1..depth).rev() {
        for (d, v) in delta.values_mut().iter_mut().zip(pass.pre_activations[k - 1].values()) {
            if v.abs() >= lambda {
                *d = 0.0;
            }
        }
        let prev = if k == 1 { &pass.lifted } else { &pass.duals[k - 2] };
        delta = layer_backward(params, k, prev, z, &delta, &mut grads)?;
    }
    params.op(0).accumulate_kernel_gradient(1.0, z, &delta, &mut grads.layers[0])?;
    Ok((loss, grads))
}
