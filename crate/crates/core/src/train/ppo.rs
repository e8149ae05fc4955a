use crate::nn::{log_softmax_rows, Policy, RecurrentState, Scalar, SequenceInput, Tape, Tensor, COMPASS_WIDTH};

use super::{clip_grad_norm, gae, lamb_step, OptimizerState, RolloutBuffer, TrainConfig, TrainError};

/// Inputs of the clipped surrogate loss for `B` transitions.
#[derive(Debug, Clone, Copy)]
pub struct PpoBatch<'a, T> {
    /// `B × actions`
    pub logits: &'a [T],
    pub values: &'a [T],
    pub actions: &'a [usize],
    pub old_log_probs: &'a [T],
    pub advantages: &'a [T],
    pub returns: &'a [T],
    pub action_count: usize,
}

/// Loss value, its parts, and its gradient with respect to the logits and values.
#[derive(Debug, Clone)]
pub struct PpoLoss<T> {
    pub loss: T,
    pub policy: T,
    pub value: T,
    pub entropy: T,
    /// Transitions whose ratio left the clip range.
    pub clipped: usize,
    /// Sum of `log π_old − log π_new` over the batch.
    pub kl_sum: f64,
    pub dlogits: Vec<T>,
    pub dvalues: Vec<T>,
}

/// Clipped PPO objective with unclipped value loss and an entropy bonus:
/// `−mean(min(ρA, clip(ρ, 1−ε, 1+ε)A)) + c_v·mean((v − R)²) − c_e·mean(H)`.
pub fn ppo_loss<T: Scalar>(
    batch: &PpoBatch<'_, T>,
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<PpoLoss<T>, TrainError> {
    ppo_terms(batch, clip, value_coef, entropy_coef, batch.actions.len())
}

/// [`ppo_loss`] with means taken over `denom` transitions, so chunks of a
/// mini-batch sum to the mini-batch loss.
fn ppo_terms<T: Scalar>(
    batch: &PpoBatch<'_, T>,
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
    denom: usize,
) -> Result<PpoLoss<T>, TrainError> {
    let b = batch.actions.len();
    let a = batch.action_count;
    if batch.logits.len() != b * a
        || batch.values.len() != b
        || batch.old_log_probs.len() != b
        || batch.advantages.len() != b
        || batch.returns.len() != b
    {
        return Err(TrainError::Shape(format!("inconsistent PPO batch of {b} transitions")));
    }
    let finite = |s: &[T]| s.iter().all(|x| x.is_finite());
    if !(finite(batch.logits)
        && finite(batch.values)
        && finite(batch.old_log_probs)
        && finite(batch.advantages)
        && finite(batch.returns))
    {
        return Err(TrainError::Fault("non-finite values in the PPO loss inputs".into()));
    }
    if let Some(&bad) = batch.actions.iter().find(|&&x| x >= a) {
        return Err(TrainError::Shape(format!("action {bad} out of range for {a} actions")));
    }
    let inv = T::one() / T::of(denom as f64);
    let (lo, hi) = (T::of(1.0 - clip), T::of(1.0 + clip));
    let (cv, ce) = (T::of(value_coef), T::of(entropy_coef));
    let logp = log_softmax_rows(batch.logits, a);
    let mut out = PpoLoss {
        loss: T::zero(),
        policy: T::zero(),
        value: T::zero(),
        entropy: T::zero(),
        clipped: 0,
        kl_sum: 0.0,
        dlogits: vec![T::zero(); b * a],
        dvalues: vec![T::zero(); b],
    };
    for i in 0..b {
        let lp = &logp[i * a..(i + 1) * a];
        let act = batch.actions[i];
        let adv = batch.advantages[i];
        let ratio = (lp[act] - batch.old_log_probs[i]).exp();
        let surr1 = ratio * adv;
        let clipped_ratio = ratio.max(lo).min(hi);
        let surr2 = clipped_ratio * adv;
        let outside = ratio < lo || ratio > hi;
        if outside {
            out.clipped += 1;
        }
        out.kl_sum += (batch.old_log_probs[i] - lp[act]).to_f64().unwrap_or(f64::NAN);
        // d min(surr1, surr2) / d log π(a)
        let g_obj = if surr2 < surr1 && outside {
            T::zero()
        } else {
            ratio * adv
        };
        out.policy -= surr1.min(surr2) * inv;
        let h: T = -lp.iter().map(|&l| l.exp() * l).sum::<T>();
        out.entropy += h * inv;
        let dl = &mut out.dlogits[i * a..(i + 1) * a];
        for j in 0..a {
            let p = lp[j].exp();
            let onehot = if j == act { T::one() } else { T::zero() };
            let d_policy = -g_obj * (onehot - p);
            let d_entropy = -p * (lp[j] + h);
            dl[j] = (d_policy - ce * d_entropy) * inv;
        }
        let diff = batch.values[i] - batch.returns[i];
        out.value += diff * diff * inv;
        out.dvalues[i] = cv * T::of(2.0) * diff * inv;
    }
    out.loss = out.policy + cv * out.value - ce * out.entropy;
    if !out.loss.is_finite() {
        return Err(TrainError::Fault("non-finite PPO loss".into()));
    }
    Ok(out)
}

/// Losses and optimizer diagnostics of one training iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Global gradient norm before clipping, averaged over updates.
    pub grad_norm: f64,
    pub mean_trust_ratio: f64,
    /// Trust-ratio clip activations summed over updates.
    pub trust_clipped: usize,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub lr: f64,
    pub updates: usize,
}

/// Gathers env range `envs` of the buffer into time-major tensors.
fn gather(
    buf: &RolloutBuffer,
    envs: std::ops::Range<usize>,
    obs_shape: &[usize; 3],
) -> Result<(Tensor<f32>, Tensor<f32>, Vec<bool>, Vec<usize>), TrainError> {
    let (l, e) = (buf.steps, envs.len());
    let mut obs = Vec::with_capacity(l * e * buf.obs_len);
    let mut compass = Vec::with_capacity(l * e * COMPASS_WIDTH);
    let mut starts = Vec::with_capacity(l * e);
    let mut order = Vec::with_capacity(l * e);
    for t in 0..l {
        for env in envs.clone() {
            let i = buf.index(env, t);
            obs.extend_from_slice(&buf.obs[i * buf.obs_len..(i + 1) * buf.obs_len]);
            compass.extend_from_slice(&buf.compass[i * COMPASS_WIDTH..(i + 1) * COMPASS_WIDTH]);
            starts.push(buf.starts[i]);
            order.push(i);
        }
    }
    let obs = Tensor::from_vec(&[l * e, obs_shape[0], obs_shape[1], obs_shape[2]], obs)?;
    let compass = Tensor::from_vec(&[l * e, COMPASS_WIDTH], compass)?;
    Ok((obs, compass, starts, order))
}

/// One PPO epoch loop over the buffer: GAE, then for each mini-batch of whole
/// env sequences a gradient, global-norm clipping and a Lamb step.
pub fn train_iteration(
    policy: &mut Policy<f32>,
    opt: &mut OptimizerState<f32>,
    buf: &RolloutBuffer,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<IterationStats, TrainError> {
    let pcfg = policy.config().clone();
    if buf.obs_len != pcfg.obs_len() {
        return Err(TrainError::Shape(format!(
            "buffer observations have {} values, the policy expects {}",
            buf.obs_len,
            pcfg.obs_len()
        )));
    }
    if cfg.minibatches == 0 || !buf.envs.is_multiple_of(cfg.minibatches) {
        return Err(TrainError::Config(format!(
            "{} mini-batches do not divide {} environments",
            cfg.minibatches, buf.envs
        )));
    }
    let (mut adv, ret) = gae(
        &buf.rewards,
        &buf.values,
        &buf.dones,
        buf.envs,
        buf.steps,
        cfg.gamma as f32,
        cfg.gae_lambda as f32,
    )?;
    let obs_shape = [pcfg.in_channels, pcfg.resolution, pcfg.resolution];
    let per_mb = buf.envs / cfg.minibatches;
    let chunk = if cfg.chunk_envs == 0 {
        per_mb
    } else {
        cfg.chunk_envs.min(per_mb)
    };
    let lamb_cfg = cfg.lamb();
    let mut stats = IterationStats {
        lr,
        ..IterationStats::default()
    };
    let mut clipped = 0usize;
    let mut kl = 0.0;
    let mut seen = 0usize;
    for _ in 0..cfg.epochs {
        for mb in 0..cfg.minibatches {
            let mb_envs = mb * per_mb..(mb + 1) * per_mb;
            let denom = per_mb * buf.steps;
            if cfg.normalize_advantages {
                let r = mb_envs.start * buf.steps..mb_envs.end * buf.steps;
                let n = r.len() as f32;
                let mean = adv[r.clone()].iter().sum::<f32>() / n;
                let var = adv[r.clone()].iter().map(|a| (a - mean) * (a - mean)).sum::<f32>() / n;
                let sd = var.sqrt() + 1e-8;
                adv[r].iter_mut().for_each(|a| *a = (*a - mean) / sd);
            }
            let mut grads: Vec<Tensor<f32>> = policy
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect();
            let mut start = mb_envs.start;
            while start < mb_envs.end {
                let end = (start + chunk).min(mb_envs.end);
                let (obs, compass, starts, order) = gather(buf, start..end, &obs_shape)?;
                let initial: RecurrentState<f32> = buf.initial.rows(start, end - start);
                let mut tape = Tape::new(policy.params());
                let input = SequenceInput {
                    obs: &obs,
                    compass: &compass,
                    starts: &starts,
                    initial: &initial,
                    steps: buf.steps,
                };
                let rec = policy.record(&mut tape, &input, false)?;
                let pick = |v: &[f32]| order.iter().map(|&i| v[i]).collect::<Vec<f32>>();
                let actions: Vec<usize> = order.iter().map(|&i| buf.actions[i]).collect();
                let (old, a, r) = (pick(&buf.log_probs), pick(&adv), pick(&ret));
                let terms = ppo_terms(
                    &PpoBatch {
                        logits: tape.value(rec.logits).data(),
                        values: tape.value(rec.values).data(),
                        actions: &actions,
                        old_log_probs: &old,
                        advantages: &a,
                        returns: &r,
                        action_count: pcfg.actions,
                    },
                    cfg.ppo_clip,
                    cfg.value_loss_coef,
                    cfg.entropy_coef,
                    denom,
                )?;
                let frames = order.len();
                let dl = Tensor::from_vec(&[frames, pcfg.actions], terms.dlogits)?;
                let dv = Tensor::from_vec(&[frames, 1], terms.dvalues)?;
                let loss = tape.scalar_fn(&[rec.logits, rec.values], terms.loss, vec![dl, dv])?;
                let g = tape.backward(loss)?;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, &b)| *a += b);
                }
                stats.loss += terms.loss as f64;
                stats.policy_loss += terms.policy as f64;
                stats.value_loss += terms.value as f64;
                stats.entropy += terms.entropy as f64;
                clipped += terms.clipped;
                kl += terms.kl_sum;
                seen += frames;
                start = end;
            }
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(TrainError::Fault("non-finite gradient".into()));
            }
            stats.grad_norm += clip_grad_norm(&mut grads, cfg.max_grad_norm);
            let ls = lamb_step(policy.params_mut(), &grads, opt, lr, &lamb_cfg);
            stats.mean_trust_ratio += ls.mean_trust_ratio(policy.params());
            stats.trust_clipped += ls.clipped;
            stats.updates += 1;
            if policy.params().iter().any(|p| !p.tensor.all_finite()) {
                return Err(TrainError::Fault("non-finite parameters after the update".into()));
            }
        }
    }
    let u = stats.updates.max(1) as f64;
    stats.loss /= u;
    stats.policy_loss /= u;
    stats.value_loss /= u;
    stats.entropy /= u;
    stats.grad_norm /= u;
    stats.mean_trust_ratio /= u;
    stats.clip_fraction = clipped as f64 / seen.max(1) as f64;
    stats.approx_kl = kl / seen.max(1) as f64;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_policies_give_mean_advantage() {
        let logits = [0.1f64, 0.2, -0.3, 0.0, 1.0, 0.5, 0.2, -1.0];
        let lp = log_softmax_rows(&logits, 4);
        let actions = [2, 1];
        let old = [lp[2], lp[5]];
        let b = PpoBatch {
            logits: &logits,
            values: &[0.0, 0.0],
            actions: &actions,
            old_log_probs: &old,
            advantages: &[1.5, -0.5],
            returns: &[0.0, 0.0],
            action_count: 4,
        };
        let l = ppo_loss(&b, 0.2, 0.5, 0.0).unwrap();
        assert!((l.policy - (-0.5)).abs() < 1e-12);
        let nan = [f64::NAN, 0.0];
        assert!(matches!(
            ppo_loss(&PpoBatch { values: &nan, ..b }, 0.2, 0.5, 0.0),
            Err(TrainError::Fault(_))
        ));
    }
}
