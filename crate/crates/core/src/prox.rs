//! Proximity operators and Bregman penalties for `g = λ‖·‖₁`.
//!
//! The conjugate `g*` is the indicator of the ℓ∞ ball of radius `λ`, so every
//! positive multiple `τ g*` is the same indicator and `prox_{τ g*}` is the
//! componentwise clamp to `[-λ, λ]` for any `τ > 0`.
//!
//! With `ψ = τ g*` the Bregman penalty
//! `B(u, v) = ½‖u‖² + ψ(u) + q*(v) − ⟨u, v⟩` has `q*(v) = Σ huber_λ(v_i)` and
//! gradient `∇_v B(u, v) = clamp(v) − u`.

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Image};

/// Slack on `‖u‖∞ ≤ λ` before a point counts as outside the ball.
pub const FEASIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinfBall {
    radius: f64,
}

impl LinfBall {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Config(format!("ball radius must be positive, got {radius}")));
        }
        Ok(Self { radius })
    }

    #[inline]
    pub fn radius(&self) -> f64 {
        self.radius
    }

    #[inline]
    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(-self.radius, self.radius)
    }

    #[inline]
    pub fn huber(&self, t: f64) -> f64 {
        let l = self.radius;
        if t.abs() <= l {
            0.5 * t * t
        } else {
            l * t.abs() - 0.5 * l * l
        }
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.iter().all(|x| x.abs() <= self.radius + FEASIBILITY_TOL)
    }

    pub fn project_in_place(&self, v: &mut [f64]) {
        for x in v {
            *x = self.clamp(*x);
        }
    }

    /// Projection onto the ball, i.e. `prox_{τ g*}` for every `τ > 0`.
    pub fn prox_conj(&self, v: &FeatureMap) -> FeatureMap {
        let mut out = v.clone();
        self.project_in_place(out.values_mut());
        out
    }

    /// `q*(v) = sup_{‖u‖∞ ≤ λ} ⟨u, v⟩ − ½‖u‖²`, a sum of Huber functions.
    pub fn q_conj(&self, v: &[f64]) -> f64 {
        v.iter().map(|&t| self.huber(t)).sum()
    }
}

/// Componentwise soft-thresholding, the prox of `threshold · ‖·‖₁`.
pub fn prox_l1(threshold: f64, v: &Image) -> Image {
    assert!(threshold >= 0.0, "threshold must be non-negative");
    v.map(|t| soft_threshold(threshold, t))
}

#[inline]
pub fn soft_threshold(threshold: f64, t: f64) -> f64 {
    t.signum() * (t.abs() - threshold).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BregmanPenalty {
    pub ball: LinfBall,
}

impl BregmanPenalty {
    pub fn new(ball: LinfBall) -> Self {
        Self { ball }
    }

    /// The penalty without the indicator of `u`'s domain: finite everywhere and
    /// equal to `½‖u‖² + q*(v) − ⟨u, v⟩`.
    ///
    /// Evaluated per component as `½(u − p)² + (p − u)(v − p)` with
    /// `p = clamp(v)`, which is the same quantity but vanishes exactly at `u = p`.
    pub fn smooth(&self, u: &[f64], v: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), v.len());
        u.iter()
            .zip(v)
            .map(|(&ui, &vi)| {
                let p = self.ball.clamp(vi);
                let d = ui - p;
                0.5 * d * d - d * (vi - p)
            })
            .sum()
    }

    /// `B(u, v)`; `+∞` when `u` lies outside the ball.
    pub fn eval(&self, u: &FeatureMap, v: &FeatureMap) -> f64 {
        self.eval_slices(u.values(), v.values())
    }

    pub fn eval_slices(&self, u: &[f64], v: &[f64]) -> f64 {
        if self.ball.contains(u) {
            self.smooth(u, v)
        } else {
            f64::INFINITY
        }
    }

    /// `∇_v B(u, v) = clamp(v) − u`.
    pub fn grad_v(&self, u: &FeatureMap, v: &FeatureMap) -> FeatureMap {
        let data = self.grad_v_slices(u.values(), v.values());
        FeatureMap::new(v.channels(), v.height(), v.width(), data).expect("same shape as v")
    }

    pub fn grad_v_slices(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        u.iter().zip(v).map(|(&ui, &vi)| self.ball.clamp(vi) - ui).collect()
    }
}
