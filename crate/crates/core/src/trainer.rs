//! Training loops: lifted Bregman block-coordinate forward-backward (LB-FB)
//! with two-way backtracking, and plain SGD through back-propagation.
//!
//! One LB-FB step on a batch `B` with smooth objective `F(θ, U) = Σ_{s∈B} f(θ, u_s)`:
//!
//! 1. `θ⁺ = θ − β ∇_θ F(θ, U)`, accepted once
//!    `F(θ⁺, U) ≤ F(θ, U) + ⟨θ⁺ − θ, ∇_θ F⟩ + ‖θ⁺ − θ‖² / 2β`, halving `β` otherwise;
//! 2. `u_s⁺ = clamp(u_s − γ ∇_u f(θ⁺, u_s))`, accepted under the same majorant
//!    test in `u` with `γ`;
//! 3. accepted steps are doubled for the next batch.
//!
//! `τ_k` is recomputed for every θ candidate before the test, so the accepted
//! value of `F` is the one the next step starts from. Per-sample work runs on
//! the rayon pool; reductions are sequential in ascending sample id.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::ConvLinearOperator;
use crate::error::{Error, Result};
use crate::objective::{end_to_end_gradient, end_to_end_loss, eval_lifted, LiftedEval, SamplePair};
use crate::pnn::{AuxVars, KernelGrads, PnnParams};
use crate::prox::LinfBall;

/// Upper bound for `β` and `γ`.
pub const STEP_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "lb-fb")]
    LbFb,
    #[serde(rename = "sgd")]
    Sgd,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::LbFb => "lb-fb",
            Algorithm::Sgd => "sgd",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta0: f64,
    pub gamma0: f64,
    pub backtrack_up: f64,
    pub backtrack_down: f64,
    pub max_backtracks: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub sgd_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 10,
            beta0: 1e-3,
            gamma0: 1.0,
            backtrack_up: 2.0,
            backtrack_down: 0.5,
            max_backtracks: 30,
            seed: 0,
            algorithm: Algorithm::LbFb,
            sgd_lr: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.beta0 > 0.0 && self.gamma0 > 0.0) {
            return fail("beta0 and gamma0 must be positive");
        }
        if !(self.backtrack_up > 1.0) {
            return fail("backtrack_up must exceed 1");
        }
        if !(self.backtrack_down > 0.0 && self.backtrack_down < 1.0) {
            return fail("backtrack_down must lie in (0, 1)");
        }
        if self.algorithm == Algorithm::Sgd && !(self.sgd_lr > 0.0) {
            return fail("sgd_lr must be positive");
        }
        Ok(())
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))` for an image-to-features
/// convolution.
pub fn glorot_bound(channels: usize, kernel_size: (usize, usize)) -> f64 {
    let taps = (kernel_size.0 * kernel_size.1) as f64;
    let fan_in = taps;
    let fan_out = taps * channels as f64;
    (6.0 / (fan_in + fan_out)).sqrt()
}

/// Network with Glorot-uniform kernels drawn from a seeded stream and step
/// sizes set from power iteration.
pub fn init_params(
    input_shape: (usize, usize),
    depth: usize,
    channels: usize,
    kernel_size: usize,
    ball: LinfBall,
    tau_floor: f64,
    seed: u64,
) -> Result<PnnParams> {
    let ks = (kernel_size, kernel_size);
    let bound = glorot_bound(channels, ks);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = (0..=depth)
        .map(|_| {
            let kernels = (0..channels * kernel_size * kernel_size)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            ConvLinearOperator::new(channels, ks, kernels, input_shape)
        })
        .collect::<Result<Vec<_>>>()?;
    PnnParams::new(ops, ball, tau_floor)
}

/// Forward-pass intermediates of the sample's noisy image: every Bregman
/// penalty starts at zero.
pub fn init_aux(params: &PnnParams, sample: &SamplePair) -> Result<AuxVars> {
    Ok(params.forward(&sample.noisy)?.aux_vars())
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PnnParams,
    pub aux_store: BTreeMap<u64, AuxVars>,
    pub beta: f64,
    pub gamma: f64,
    /// Completed epochs.
    pub epoch: usize,
    pub batches: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: PnnParams, config: &TrainConfig, dataset: &[SamplePair]) -> Result<Self> {
        let aux_store = match config.algorithm {
            Algorithm::LbFb => dataset
                .par_iter()
                .map(|s| Ok((s.id, init_aux(&params, s)?)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .collect(),
            Algorithm::Sgd => BTreeMap::new(),
        };
        Ok(Self {
            params,
            aux_store,
            beta: config.beta0,
            gamma: config.gamma0,
            epoch: 0,
            batches: 0,
            seed: config.seed,
        })
    }

    fn aux(&self, id: u64) -> Result<&AuxVars> {
        self.aux_store
            .get(&id)
            .ok_or_else(|| Error::Data(format!("no auxiliary variables stored for sample {id}")))
    }
}

/// Outcome of one majorant-tested sub-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MajorantStep {
    pub accepted: bool,
    pub backtracks: usize,
    /// Step size of the accepted (or last rejected) trial.
    pub step: f64,
    /// `F` at the trial point.
    pub lhs: f64,
    /// Majorant value at the trial point.
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// `F(θ, U)` before the step.
    pub f_before: f64,
    /// `F(θ⁺, U)`
    pub f_mid: f64,
    /// `F(θ⁺, U⁺)`
    pub f_after: f64,
    pub theta: MajorantStep,
    pub aux: MajorantStep,
}

impl StepDiagnostics {
    pub fn backtracks(&self) -> usize {
        self.theta.backtracks + self.aux.backtracks
    }

    pub fn stalled(&self) -> bool {
        !(self.theta.accepted && self.aux.accepted)
    }
}

fn sorted_batch<'a>(batch: &[&'a SamplePair]) -> Result<Vec<&'a SamplePair>> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut b = batch.to_vec();
    b.sort_by_key(|s| s.id);
    Ok(b)
}

fn batch_smooth(params: &PnnParams, batch: &[&SamplePair], aux: &[AuxVars]) -> Result<f64> {
    let values = batch
        .par_iter()
        .zip(aux.par_iter())
        .map(|(s, u)| Ok(LiftedEval::new(params, u, s)?.smooth()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum())
}

fn kernel_delta(after: &PnnParams, before: &PnnParams) -> KernelGrads {
    KernelGrads {
        layers: after
            .ops()
            .iter()
            .zip(before.ops())
            .map(|(a, b)| crate::tensor::sub(a.kernels(), b.kernels()))
            .collect(),
    }
}

/// One LB-FB step on `batch` (θ first, then the batch's auxiliary variables).
pub fn lbfb_step(state: &mut TrainState, batch: &[&SamplePair], config: &TrainConfig) -> Result<StepDiagnostics> {
    let batch = sorted_batch(batch)?;
    let aux: Vec<AuxVars> = batch.iter().map(|s| state.aux(s.id).cloned()).collect::<Result<_>>()?;

    // θ block
    let per_sample = batch
        .par_iter()
        .zip(aux.par_iter())
        .map(|(s, u)| {
            let ev = LiftedEval::new(&state.params, u, s)?;
            Ok((ev.smooth(), ev.grad_theta()?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut f_before = 0.0;
    let mut grad = KernelGrads::zeros_like(&state.params);
    for (f, g) in &per_sample {
        f_before += f;
        grad.add_assign(g);
    }

    let mut beta = state.beta;
    let mut theta_step = MajorantStep {
        accepted: false,
        backtracks: 0,
        step: beta,
        lhs: f64::NAN,
        rhs: f64::NAN,
    };
    let mut accepted_params = None;
    for attempt in 0..=config.max_backtracks {
        let mut cand = state.params.clone();
        cand.add_scaled(-beta, &grad);
        let delta = kernel_delta(&cand, &state.params);
        let moved = delta.norm_sq();
        let (lhs, rhs) = if moved == 0.0 {
            // Nothing moved: keep the current step sizes as they are.
            cand = state.params.clone();
            (f_before, f_before)
        } else {
            cand.refresh_taus();
            let lhs = batch_smooth(&cand, &batch, &aux)?;
            (lhs, f_before + delta.dot(&grad) + moved / (2.0 * beta))
        };
        theta_step = MajorantStep {
            accepted: lhs <= rhs,
            backtracks: attempt,
            step: beta,
            lhs,
            rhs,
        };
        if theta_step.accepted {
            accepted_params = Some(cand);
            break;
        }
        beta *= config.backtrack_down;
    }
    match accepted_params {
        Some(p) => {
            state.params = p;
            state.beta = (beta * config.backtrack_up).min(STEP_CAP);
        }
        None => log::warn!(
            "θ step stalled after {} backtracks (batch {})",
            config.max_backtracks,
            state.batches
        ),
    }

    // u block at θ⁺
    let per_sample = batch
        .par_iter()
        .zip(aux.par_iter())
        .map(|(s, u)| {
            let ev = LiftedEval::new(&state.params, u, s)?;
            Ok((ev.smooth(), ev.grad_u()?))
        })
        .collect::<Result<Vec<_>>>()?;
    let f_mid: f64 = per_sample.iter().map(|(f, _)| f).sum();
    let ball = state.params.ball();

    let mut gamma = state.gamma;
    let mut aux_step = MajorantStep {
        accepted: false,
        backtracks: 0,
        step: gamma,
        lhs: f64::NAN,
        rhs: f64::NAN,
    };
    let mut accepted_aux = None;
    for attempt in 0..=config.max_backtracks {
        let cand: Vec<AuxVars> = aux
            .iter()
            .zip(&per_sample)
            .map(|(u, (_, g))| {
                let mut c = u.add_scaled(-gamma, g);
                c.blocks.iter_mut().for_each(|b| ball.project_in_place(b.values_mut()));
                c
            })
            .collect();
        let mut inner = 0.0;
        let mut moved = 0.0;
        for ((c, u), (_, g)) in cand.iter().zip(&aux).zip(&per_sample) {
            let d = c.add_scaled(-1.0, u);
            inner += d.dot(g);
            moved += d.norm_sq();
        }
        let (lhs, rhs) = if moved == 0.0 {
            (f_mid, f_mid)
        } else {
            (batch_smooth(&state.params, &batch, &cand)?, f_mid + inner + moved / (2.0 * gamma))
        };
        aux_step = MajorantStep {
            accepted: lhs <= rhs,
            backtracks: attempt,
            step: gamma,
            lhs,
            rhs,
        };
        if aux_step.accepted {
            accepted_aux = Some(cand);
            break;
        }
        gamma *= config.backtrack_down;
    }
    let f_after = match accepted_aux {
        Some(cand) => {
            for (s, c) in batch.iter().zip(cand) {
                state.aux_store.insert(s.id, c);
            }
            state.gamma = (gamma * config.backtrack_up).min(STEP_CAP);
            aux_step.lhs
        }
        None => {
            log::warn!(
                "u step stalled after {} backtracks (batch {})",
                config.max_backtracks,
                state.batches
            );
            f_mid
        }
    };
    state.batches += 1;
    Ok(StepDiagnostics {
        f_before,
        f_mid,
        f_after,
        theta: theta_step,
        aux: aux_step,
    })
}

/// Batch-mean end-to-end loss and its gradient, reduced in ascending id order.
pub fn batch_loss_gradient(params: &PnnParams, batch: &[&SamplePair]) -> Result<(f64, KernelGrads)> {
    let batch = sorted_batch(batch)?;
    let per_sample = batch
        .par_iter()
        .map(|s| end_to_end_gradient(params, s))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut grad = KernelGrads::zeros_like(params);
    for (l, g) in &per_sample {
        loss += l;
        grad.add_assign(g);
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// One plain SGD step on the batch-mean end-to-end loss; returns the loss
/// before the update.
pub fn sgd_step(state: &mut TrainState, batch: &[&SamplePair], lr: f64) -> Result<f64> {
    let (loss, grad) = batch_loss_gradient(&state.params, batch)?;
    if grad.max_abs() > 0.0 {
        state.params.add_scaled(-lr, &grad);
        state.params.refresh_taus();
    }
    state.batches += 1;
    Ok(loss)
}

/// Mean `½‖G_θ(z) − x̄‖²` over a dataset.
pub fn mean_loss(params: &PnnParams, dataset: &[SamplePair]) -> Result<f64> {
    let losses = dataset
        .par_iter()
        .map(|s| end_to_end_loss(params, s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / dataset.len() as f64)
}

/// Mean lifted objective `E` over a dataset with the stored auxiliaries.
pub fn mean_lifted(state: &TrainState, dataset: &[SamplePair]) -> Result<f64> {
    let values = dataset
        .par_iter()
        .map(|s| Ok(eval_lifted(&state.params, state.aux(s.id)?, s)?.total))
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / dataset.len() as f64)
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub algorithm: Algorithm,
    pub loss_l2: f64,
    #[serde(rename = "loss_E")]
    pub loss_e: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub lr: Option<f64>,
    pub backtracks: u64,
    pub seconds: Option<f64>,
    #[serde(skip)]
    pub stalls: u64,
}

/// Sample order for an epoch: a seeded shuffle on the epoch's own stream.
pub fn epoch_order(ids: &[u64], seed: u64, epoch: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order = ids.to_vec();
    order.sort_unstable();
    order.shuffle(&mut rng);
    order
}

/// Runs `config.epochs` further epochs from `state`. `on_epoch` is called with
/// every log row and the state it describes (checkpointing hooks in here).
pub fn train_from(
    state: &mut TrainState,
    config: &TrainConfig,
    dataset: &[SamplePair],
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let by_id: HashMap<u64, &SamplePair> = dataset.iter().map(|s| (s.id, s)).collect();
    if by_id.len() != dataset.len() {
        return Err(Error::Data("duplicate sample ids in training set".into()));
    }
    let ids: Vec<u64> = dataset.iter().map(|s| s.id).collect();
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let epoch = state.epoch + 1;
        let order = epoch_order(&ids, state.seed, epoch);
        let mut backtracks = 0u64;
        let mut stalls = 0u64;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SamplePair> = chunk.iter().map(|id| by_id[id]).collect();
            match config.algorithm {
                Algorithm::LbFb => {
                    let d = lbfb_step(state, &batch, config)?;
                    backtracks += d.backtracks() as u64;
                    stalls += u64::from(d.stalled());
                }
                Algorithm::Sgd => {
                    sgd_step(state, &batch, config.sgd_lr)?;
                }
            }
        }
        state.epoch = epoch;
        let lb = config.algorithm == Algorithm::LbFb;
        let row = EpochLog {
            epoch,
            algorithm: config.algorithm,
            loss_l2: mean_loss(&state.params, dataset)?,
            loss_e: if lb { Some(mean_lifted(state, dataset)?) } else { None },
            beta: lb.then_some(state.beta),
            gamma: lb.then_some(state.gamma),
            lr: (!lb).then_some(config.sgd_lr),
            backtracks,
            seconds: Some(start.elapsed().as_secs_f64()),
            stalls,
        };
        log::info!(
            "epoch {epoch}: loss_l2 {:.6} backtracks {backtracks} stalls {stalls}",
            row.loss_l2
        );
        on_epoch(&row, state)?;
        log.push(row);
    }
    Ok(log)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

/// Trains from the given initial parameters.
pub fn train(
    config: &TrainConfig,
    params: PnnParams,
    dataset: &[SamplePair],
    on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut state = TrainState::new(params, config, dataset)?;
    let log = train_from(&mut state, config, dataset, on_epoch)?;
    Ok(TrainOutcome { state, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Image;

    fn ball() -> LinfBall {
        LinfBall::new(0.1).unwrap()
    }

    fn toy_dataset(n: usize, shape: (usize, usize), seed: u64) -> Vec<SamplePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n as u64)
            .map(|id| {
                let level = rng.random_range(0.2..0.8);
                let edge = rng.random_range(1..shape.1);
                let clean = Image::from_fn(shape.0, shape.1, |_, j| if j < edge { level } else { 1.0 - level });
                let noisy = clean.map(|v| v + rng.random_range(-0.15..0.15));
                SamplePair::new(id, clean, noisy).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { backtrack_up: 1.0, ..Default::default() },
            TrainConfig { backtrack_down: 1.0, ..Default::default() },
            TrainConfig { beta0: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn init_params_is_seeded_and_bounded() {
        let a = init_params((8, 8), 4, 16, 3, ball(), 0.1, 7).unwrap();
        let b = init_params((8, 8), 4, 16, 3, ball(), 0.1, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params((8, 8), 4, 16, 3, ball(), 0.1, 8).unwrap();
        assert_ne!(a, c);
        let bound = glorot_bound(16, (3, 3));
        assert!((bound - (6.0f64 / (9.0 + 144.0)).sqrt()).abs() < 1e-15);
        for op in a.ops() {
            assert!(op.kernels().iter().all(|k| k.abs() <= bound));
        }
        assert!(a.step_sizes_admissible());
    }

    #[test]
    fn glorot_variance() {
        // 10⁴ draws from a 625-channel operator
        let p = init_params((4, 4), 2, 1112, 3, ball(), 0.1, 3).unwrap();
        let draws: Vec<f64> = p.op(0).kernels().to_vec();
        assert!(draws.len() >= 10_000);
        let a = glorot_bound(1112, (3, 3));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((var / (a * a / 3.0) - 1.0).abs() < 0.05, "{var} vs {}", a * a / 3.0);
    }

    #[test]
    fn init_aux_zero_params_and_penalties() {
        let data = toy_dataset(2, (6, 6), 1);
        let zero = PnnParams::zeros(4, 2, (3, 3), (6, 6), ball()).unwrap();
        let aux = init_aux(&zero, &data[0]).unwrap();
        assert!(aux.blocks.iter().all(|b| b.sup_norm() == 0.0));
        let p = init_params((6, 6), 4, 2, 3, ball(), 0.1, 1).unwrap();
        let aux = init_aux(&p, &data[1]).unwrap();
        assert!(aux.is_feasible(&p.ball()));
        let b = eval_lifted(&p, &aux, &data[1]).unwrap();
        assert!(b.penalty_terms.iter().all(|&t| t.abs() <= 1e-12));
    }

    #[test]
    fn lbfb_step_respects_majorants_and_descends() {
        let data = toy_dataset(4, (8, 8), 2);
        let config = TrainConfig {
            batch_size: 4,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100u64 {
            let p = init_params((8, 8), 3, 2, 3, ball(), 0.1, trial).unwrap();
            let mut state = TrainState::new(p, &config, &data).unwrap();
            // move the duals off the forward pass so both blocks have work to do
            for aux in state.aux_store.values_mut() {
                for b in &mut aux.blocks {
                    b.values_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.1..0.1));
                }
            }
            state.beta = rng.random_range(1e-3..1.0);
            state.gamma = rng.random_range(1e-2..10.0);
            let batch: Vec<&SamplePair> = data.iter().collect();
            let d = lbfb_step(&mut state, &batch, &config).unwrap();
            assert!(d.theta.accepted && d.aux.accepted);
            assert!(d.theta.lhs <= d.theta.rhs);
            assert!(d.aux.lhs <= d.aux.rhs);
            assert!(d.f_mid <= d.f_before, "trial {trial}: {} > {}", d.f_mid, d.f_before);
            assert!(d.f_after <= d.f_mid);
            assert!(state.aux_store.values().all(|a| a.is_feasible(&state.params.ball())));
            // recompute F at the committed point
            let aux: Vec<AuxVars> = data.iter().map(|s| state.aux_store[&s.id].clone()).collect();
            let f = batch_smooth(&state.params, &batch, &aux).unwrap();
            assert_eq!(f, d.f_after);
        }
    }

    #[test]
    fn fixed_point_only_grows_steps() {
        // clean = G_θ(z) and u = forward intermediates: both gradients vanish
        let p = init_params((6, 6), 3, 2, 3, ball(), 0.1, 3).unwrap();
        let noisy = toy_dataset(1, (6, 6), 3).remove(0).noisy;
        let clean = p.denoise(&noisy).unwrap();
        let data = vec![SamplePair::new(0, clean, noisy).unwrap()];
        let config = TrainConfig::default();
        let mut state = TrainState::new(p.clone(), &config, &data).unwrap();
        let aux_before = state.aux_store.clone();
        let d = lbfb_step(&mut state, &[&data[0]], &config).unwrap();
        assert_eq!(state.params, p);
        assert_eq!(state.aux_store, aux_before);
        assert_eq!(state.beta, config.beta0 * 2.0);
        assert_eq!(state.gamma, config.gamma0 * 2.0);
        assert_eq!(d.f_before, 0.0);
    }

    #[test]
    fn step_sizes_are_capped() {
        let p = init_params((6, 6), 3, 2, 3, ball(), 0.1, 3).unwrap();
        let noisy = toy_dataset(1, (6, 6), 3).remove(0).noisy;
        let clean = p.denoise(&noisy).unwrap();
        let data = vec![SamplePair::new(0, clean, noisy).unwrap()];
        let config = TrainConfig::default();
        let mut state = TrainState::new(p, &config, &data).unwrap();
        state.beta = 0.8 * STEP_CAP;
        lbfb_step(&mut state, &[&data[0]], &config).unwrap();
        assert_eq!(state.beta, STEP_CAP);
    }

    #[test]
    fn lbfb_step_rejects_empty_batch_and_unknown_sample() {
        let data = toy_dataset(2, (6, 6), 4);
        let config = TrainConfig::default();
        let p = init_params((6, 6), 3, 2, 3, ball(), 0.1, 3).unwrap();
        let mut state = TrainState::new(p, &config, &data[..1]).unwrap();
        assert!(lbfb_step(&mut state, &[], &config).is_err());
        assert!(lbfb_step(&mut state, &[&data[1]], &config).is_err());
    }

    #[test]
    fn sgd_step_at_zero_loss_is_noop() {
        let p = init_params((6, 6), 3, 2, 3, ball(), 0.1, 3).unwrap();
        let noisy = toy_dataset(1, (6, 6), 3).remove(0).noisy;
        let clean = p.denoise(&noisy).unwrap();
        let data = vec![SamplePair::new(0, clean, noisy).unwrap()];
        let config = TrainConfig {
            algorithm: Algorithm::Sgd,
            ..Default::default()
        };
        let mut state = TrainState::new(p.clone(), &config, &data).unwrap();
        let loss = sgd_step(&mut state, &[&data[0]], 1e-2).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(state.params, p);
    }

    #[test]
    fn sgd_trajectories_are_reproducible() {
        let data = toy_dataset(6, (8, 8), 5);
        let config = TrainConfig {
            algorithm: Algorithm::Sgd,
            epochs: 3,
            batch_size: 2,
            sgd_lr: 1e-3,
            ..Default::default()
        };
        let run = || {
            let p = init_params((8, 8), 3, 2, 3, ball(), 0.1, 9).unwrap();
            let out = train(&config, p, &data, |_, _| Ok(())).unwrap();
            (out.state.params, out.log.iter().map(|r| r.loss_l2.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let ids: Vec<u64> = (0..20).collect();
        let a = epoch_order(&ids, 3, 1);
        assert_eq!(a, epoch_order(&ids, 3, 1));
        assert_ne!(a, epoch_order(&ids, 3, 2));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, ids);
    }

    #[test]
    fn train_bookkeeping() {
        let data = toy_dataset(5, (8, 8), 6);
        let p = init_params((8, 8), 3, 2, 3, ball(), 0.1, 1).unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 5,
            ..Default::default()
        };
        let out = train(&config, p.clone(), &data, |_, _| Ok(())).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.state.batches, 1);

        let config = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let mut seen = 0;
        let out = train(&config, p.clone(), &data, |row, state| {
            seen += 1;
            assert_eq!(row.epoch, state.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(seen, 3);
        assert_eq!(out.state.batches, 9);
        assert_eq!(out.state.aux_store.len(), 5);

        assert!(matches!(train(&config, p, &[], |_, _| Ok(())), Err(Error::Config(_))));
    }

    #[test]
    fn aux_store_carries_over_between_epochs() {
        let data = toy_dataset(4, (8, 8), 7);
        let p = init_params((8, 8), 3, 2, 3, ball(), 0.1, 2).unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        };
        let mut state = TrainState::new(p, &config, &data).unwrap();
        train_from(&mut state, &config, &data, |_, _| Ok(())).unwrap();
        let stored = state.aux_store.clone();
        // the next epoch's first batch starts from exactly these
        let order = epoch_order(&[0, 1, 2, 3], state.seed, 2);
        let first: Vec<&SamplePair> = order[..2].iter().map(|&id| &data[id as usize]).collect();
        let mut replay = state.clone();
        let d = lbfb_step(&mut replay, &first, &config).unwrap();
        let aux: Vec<AuxVars> = sorted_batch(&first).unwrap().iter().map(|s| stored[&s.id].clone()).collect();
        let f = batch_smooth(&state.params, &sorted_batch(&first).unwrap(), &aux).unwrap();
        assert_eq!(f, d.f_before);
    }
}
