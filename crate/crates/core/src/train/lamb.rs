use serde::{Deserialize, Serialize};

use crate::nn::{ParamGroup, ParamSet, Scalar, Tensor};

/// Hyper-parameters of the Lamb update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Trust ratios are clipped to `[rho, 1/rho]`.
    pub rho: f64,
    /// Cap on the parameter norm in the trust-ratio numerator.
    pub phi_cap: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            rho: 1e-2,
            phi_cap: 10.0,
        }
    }
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LambStats {
    /// Trust ratio applied to each tensor (1 for the no-trust group).
    pub trust_ratios: Vec<f64>,
    /// Tensors whose ratio was clipped to `rho` or `1/rho`.
    pub clipped: usize,
    /// Tensors whose norm exceeded the cap.
    pub capped: usize,
}

impl LambStats {
    /// Mean trust ratio over the default group.
    pub fn mean_trust_ratio(&self, params: &ParamSet<impl Scalar>) -> f64 {
        let rs: Vec<f64> = self
            .trust_ratios
            .iter()
            .zip(params.iter())
            .filter(|(_, p)| p.group == ParamGroup::Default)
            .map(|(&r, _)| r)
            .collect();
        if rs.is_empty() {
            1.0
        } else {
            rs.iter().sum::<f64>() / rs.len() as f64
        }
    }
}

/// One Lamb update with learning rate `lr`.
///
/// Per tensor: `s = m̂ / (√v̂ + ε)`, `u = s + λθ`,
/// `r = clip(min(‖θ‖, φ_cap) / ‖u‖, ρ, 1/ρ)` and `θ ← θ − lr·r·u`. Tensors in
/// the no-trust group use `r = 1` and no weight decay; `‖u‖ = 0` gives `r = 1`.
pub fn lamb_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &LambConfig,
) -> LambStats {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter tensor");
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() / (T::one() - T::of(cfg.beta1).powi(t));
    let c2 = T::one() / (T::one() - T::of(cfg.beta2).powi(t));
    let eps = T::of(cfg.eps);
    let mut stats = LambStats::default();
    let mut s = Vec::new();
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        s.clear();
        for i in 0..m.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            s.push((m[i] * c1) / ((v[i] * c2).sqrt() + eps));
        }
        let step = if p.group == ParamGroup::Default {
            apply_direction(p.tensor.data_mut(), &s, lr, cfg.weight_decay, cfg.rho, cfg.phi_cap)
        } else {
            apply_direction(p.tensor.data_mut(), &s, lr, 0.0, 1.0, cfg.phi_cap)
        };
        stats.clipped += step.clipped as usize;
        stats.capped += step.capped as usize;
        stats.trust_ratios.push(step.ratio);
    }
    stats
}

/// Outcome of [`apply_direction`] for one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustStep {
    pub ratio: f64,
    pub clipped: bool,
    pub capped: bool,
}

/// Applies the trust-ratio update for Adam direction `s`:
/// `u = s + λθ`, `r = clip(min(‖θ‖, φ_cap) / ‖u‖, ρ, 1/ρ)`, `θ ← θ − lr·r·u`.
pub fn apply_direction<T: Scalar>(theta: &mut [T], s: &[T], lr: f64, decay: f64, rho: f64, phi_cap: f64) -> TrustStep {
    let decay = T::of(decay);
    let u: Vec<T> = s.iter().zip(theta.iter()).map(|(&si, &th)| si + decay * th).collect();
    let theta_norm = theta.iter().map(|&x| x * x).sum::<T>().sqrt();
    let u_norm = u.iter().map(|&x| x * x).sum::<T>().sqrt();
    let phi_cap = T::of(phi_cap);
    let (rho, inv_rho) = (T::of(rho), T::one() / T::of(rho));
    let capped = theta_norm > phi_cap;
    let (r, clipped) = if u_norm == T::zero() {
        (T::one(), false)
    } else {
        let raw = theta_norm.min(phi_cap) / u_norm;
        (raw.max(rho).min(inv_rho), raw < rho || raw > inv_rho)
    };
    let lr = T::of(lr);
    for (th, &ui) in theta.iter_mut().zip(&u) {
        *th -= lr * r * ui;
    }
    TrustStep {
        ratio: r.to_f64().unwrap_or(f64::NAN),
        clipped,
        capped,
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / (norm + 1e-12));
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_update_matches_hand_values() {
        let mut theta = [3.0f64, 4.0];
        let st = apply_direction(&mut theta, &[0.6, 0.8], 0.1, 0.0, 0.01, 10.0);
        assert!((st.ratio - 5.0).abs() < 1e-12);
        assert!((theta[0] - 2.7).abs() < 1e-12 && (theta[1] - 3.6).abs() < 1e-12);
        let mut big = [30.0f64, 40.0];
        let st = apply_direction(&mut big, &[0.6, 0.8], 0.1, 0.0, 0.01, 10.0);
        assert!(st.capped && (st.ratio - 10.0).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_trust_ratio() {
        let mut ps = ParamSet::<f64>::default();
        ps.push(
            "w",
            Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap(),
            ParamGroup::Default,
        );
        let mut st = OptimizerState::new(&ps);
        let cfg = LambConfig {
            weight_decay: 0.0,
            eps: 0.0,
            ..LambConfig::default()
        };
        let g = vec![Tensor::from_vec(&[2], vec![0.6, 0.8]).unwrap()];
        let stats = lamb_step(&mut ps, &g, &mut st, 0.1, &cfg);
        // the first Adam direction is sign(g)
        let r = 5.0 / 2f64.sqrt();
        assert!((stats.trust_ratios[0] - r).abs() < 1e-12);
        assert!((ps.tensor(0).data()[0] - (3.0 - 0.1 * r)).abs() < 1e-12);
    }
}
