//! Stage losses: controller pretraining, the signed cost weight, the
//! terminal reward and the actor-critic terms.

use mia_autograd::{Scalar, Tape, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::controller::graph::{CtrlGraph, GraphMasks};
use crate::controller::{A2cDecision, DimensionSet};
use crate::error::{MiaError, Result};
use crate::params::{ctrl_name, Bound};

/// Mask values of one block, hard or soft.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMaskValues {
    pub b: f64,
    pub h: Vec<f64>,
    pub n: Vec<f64>,
}

/// `sum_l (1 - b) + mean(1 - h) + mean(1 - n)`.
pub fn pretrain_loss(blocks: &[BlockMaskValues]) -> Result<f64> {
    if blocks.is_empty() {
        return Err(MiaError::Invalid("pretrain loss of an empty block list".into()));
    }
    let mean_off = |v: &[f64]| v.iter().map(|x| 1.0 - x).sum::<f64>() / v.len().max(1) as f64;
    Ok(blocks.iter().map(|m| (1.0 - m.b) + mean_off(&m.h) + mean_off(&m.n)).sum())
}

/// Per-sample pretrain loss on the tape from noise-free controller logits,
/// shape `(batch, 1)`.
pub fn pretrain_loss_graph<T: Scalar>(tape: &mut Tape<T>, ctrls: &[CtrlGraph]) -> Var {
    let mut total: Option<Var> = None;
    for c in ctrls {
        for logit in [c.logit_b, c.logit_h, c.logit_n] {
            let width = tape.shape(logit).1;
            let soft = tape.sigmoid(logit);
            let off = tape.affine(soft, -T::one(), T::one());
            let sum = tape.sum_cols(off);
            let term = tape.div_scalar(sum, T::of(width as f64));
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
    }
    total.expect("at least one block")
}

/// Signed weight of the cost term: magnitude `k * task / cost`, positive
/// while over budget and negative while under it.
pub fn dynamic_alpha(task_loss: f64, cost_loss: f64, exec_ratio: f64, target_ratio: f64, magnitude: f64) -> Result<f64> {
    if cost_loss <= 0.0 || !cost_loss.is_finite() {
        return Err(MiaError::Invalid(format!("cost loss must be positive, got {cost_loss}")));
    }
    let sign = if exec_ratio > target_ratio {
        1.0
    } else if exec_ratio < target_ratio {
        -1.0
    } else {
        0.0
    };
    Ok(sign * magnitude * task_loss / cost_loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub y: u8,
    pub exec_ratio: f64,
    pub target_ratio: f64,
    pub beta: f64,
    pub reward: f64,
}

impl RewardRecord {
    /// Whether `reward` re-derives exactly from the other fields.
    pub fn consistent(&self) -> bool {
        reward_value(self.y, self.exec_ratio, self.target_ratio, self.beta) == self.reward
    }
}

fn reward_value(y: u8, exec: f64, target: f64, beta: f64) -> f64 {
    f64::from(y) + beta * (target - exec)
}

pub fn compute_reward(correct: bool, exec_ratio: f64, target_ratio: f64, beta: f64) -> RewardRecord {
    let y = u8::from(correct);
    RewardRecord {
        y,
        exec_ratio,
        target_ratio,
        beta,
        reward: reward_value(y, exec_ratio, target_ratio, beta),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct A2cLosses {
    pub policy: f64,
    pub value: f64,
    pub entropy_bonus: f64,
}

/// Actor-critic terms of one sample over its decision groups, all sharing
/// the terminal `reward`.
pub fn a2c_losses(decisions: &[A2cDecision], reward: f64, entropy_coef: f64) -> Result<A2cLosses> {
    if !reward.is_finite() {
        return Err(MiaError::Invalid(format!("non-finite reward {reward}")));
    }
    let mut out = A2cLosses {
        policy: 0.0,
        value: 0.0,
        entropy_bonus: 0.0,
    };
    for d in decisions {
        let adv = reward - d.value;
        out.policy -= d.log_probs.iter().sum::<f64>() * adv;
        out.value += adv * adv;
        out.entropy_bonus -= entropy_coef * d.entropies.iter().sum::<f64>();
    }
    Ok(out)
}

/// Tape nodes of the actor-critic loss for one block.
#[derive(Debug, Clone, Copy)]
pub struct A2cGraph {
    /// `(batch, 1)`: policy + value_coef * value + entropy bonus.
    pub loss: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
}

/// Per-sample actor-critic loss of block `l`. Head and token groups of
/// skipped blocks, and groups of disabled dimensions, contribute nothing.
#[allow(clippy::too_many_arguments)]
pub fn a2c_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    l: usize,
    ctrl: &CtrlGraph,
    masks: &GraphMasks<T>,
    dims: DimensionSet,
    rewards: &[f64],
    value_coef: f64,
    entropy_coef: f64,
) -> A2cGraph {
    let batch = rewards.len();
    let kept: Vec<bool> = (0..batch).map(|s| masks.hard_b[[s, 0]] > T::zero()).collect();
    let groups = [
        (ctrl.logit_b, &masks.hard_b, ctrl.f_b, "critic_b", dims.depth, false),
        (ctrl.logit_h, &masks.hard_h, ctrl.f_h_flat, "critic_h", dims.head, true),
        (ctrl.logit_n, &masks.hard_n, ctrl.f_n_mean, "critic_n", dims.token, true),
    ];
    let mut policy: Option<Var> = None;
    let mut value: Option<Var> = None;
    let mut entropy: Option<Var> = None;
    let acc = |tape: &mut Tape<T>, slot: &mut Option<Var>, v: Var| {
        *slot = Some(match *slot {
            Some(s) => tape.add(s, v),
            None => v,
        });
    };
    for (logits, actions, feat, critic, enabled, needs_block) in groups {
        let valid = Array2::from_shape_fn((batch, 1), |(s, _)| {
            if enabled && (!needs_block || kept[s]) {
                T::one()
            } else {
                T::zero()
            }
        });
        let lp = tape.bernoulli_log_prob(logits, actions.clone());
        let lp = tape.sum_cols(lp);
        let (cw, cb) = p.lin(&ctrl_name(l, critic));
        let v = tape.matmul(feat, cw);
        let v = tape.add_broadcast(v, cb);
        let vv = tape.value(v).clone();
        let neg_adv = Array2::from_shape_fn((batch, 1), |(s, _)| {
            -(T::of(rewards[s]) - vv[[s, 0]]) * valid[[s, 0]]
        });
        let neg_adv = tape.constant(neg_adv);
        let pol = tape.mul(lp, neg_adv);
        acc(tape, &mut policy, pol);

        let r = tape.constant(Array2::from_shape_fn((batch, 1), |(s, _)| T::of(rewards[s])));
        let diff = tape.sub(r, v);
        let sq = tape.mul(diff, diff);
        let valid_c = tape.constant(valid.clone());
        let val = tape.mul(sq, valid_c);
        acc(tape, &mut value, val);

        let ent = tape.bernoulli_entropy(logits);
        let ent = tape.sum_cols(ent);
        let scale = tape.constant(valid.mapv(|m| -T::of(entropy_coef) * m));
        let ent = tape.mul(ent, scale);
        acc(tape, &mut entropy, ent);
    }
    let (policy, value, entropy) = (policy.unwrap(), value.unwrap(), entropy.unwrap());
    let scaled = tape.affine(value, T::of(value_coef), T::zero());
    let loss = tape.add(policy, scaled);
    let loss = tape.add(loss, entropy);
    A2cGraph {
        loss,
        policy,
        value,
        entropy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(b: f64, h: f64, n: f64) -> BlockMaskValues {
        BlockMaskValues {
            b,
            h: vec![h; 4],
            n: vec![n; 16],
        }
    }

    #[test]
    fn pretrain_examples() {
        assert_eq!(pretrain_loss(&vec![block(1.0, 1.0, 1.0); 4]).unwrap(), 0.0);
        assert_eq!(pretrain_loss(&vec![block(0.0, 0.0, 0.0); 4]).unwrap(), 12.0);
        assert_eq!(pretrain_loss(&vec![block(0.5, 0.5, 0.5); 4]).unwrap(), 6.0);
        assert!(pretrain_loss(&[]).is_err());
    }

    #[test]
    fn pretrain_graph_matches_scalar() {
        use crate::config::MiaConfig;
        use crate::controller::graph::controller_logits;
        use crate::controller::Heads;
        use crate::params::{init_model, ParamStore};
        let cfg = MiaConfig::tiny_vit().validate().unwrap();
        let store: ParamStore<f64> = init_model(&cfg, 3);
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &store, &|_| false);
        let spatial = tape.constant(Array2::from_shape_fn((2 * 16, 64), |(i, j)| ((i * 7 + j) % 11) as f64 * 0.1 - 0.5));
        let ctrls: Vec<CtrlGraph> = (0..4)
            .map(|l| controller_logits(&mut tape, &p, &cfg, l, spatial, 2, Heads::Finals))
            .collect();
        let loss = pretrain_loss_graph(&mut tape, &ctrls);
        for s in 0..2 {
            let blocks: Vec<BlockMaskValues> = ctrls
                .iter()
                .map(|c| {
                    let sig = |v: Var| tape.value(v).row(s).mapv(mia_autograd::sigmoid).to_vec();
                    BlockMaskValues {
                        b: sig(c.logit_b)[0],
                        h: sig(c.logit_h),
                        n: sig(c.logit_n),
                    }
                })
                .collect();
            let want = pretrain_loss(&blocks).unwrap();
            assert!((tape.value(loss)[[s, 0]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_examples() {
        assert!((dynamic_alpha(2.0, 0.8, 0.8, 0.7, 0.1).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(dynamic_alpha(2.0, 0.8, 0.7, 0.7, 0.1).unwrap(), 0.0);
        assert!((dynamic_alpha(1.0, 0.5, 0.4, 0.7, 0.1).unwrap() + 0.2).abs() < 1e-15);
        assert!(dynamic_alpha(1.0, 0.0, 0.4, 0.7, 0.1).is_err());
    }

    #[test]
    fn reward_examples() {
        assert_eq!(compute_reward(true, 0.7, 0.7, 0.5).reward, 1.0);
        assert!((compute_reward(false, 0.5, 0.7, 0.5).reward - 0.1).abs() < 1e-12);
        assert!((compute_reward(true, 0.9, 0.7, 0.5).reward - 0.9).abs() < 1e-12);
        assert!(compute_reward(true, 0.9, 0.7, 0.5).consistent());
    }

    fn decision(lp: f64, value: f64) -> A2cDecision {
        A2cDecision {
            actions: vec![true],
            probs: vec![lp.exp()],
            log_probs: vec![lp],
            entropies: vec![0.5],
            value,
        }
    }

    #[test]
    fn a2c_examples() {
        let l = a2c_losses(&[decision(-0.7, 0.0)], 1.0, 0.01).unwrap();
        assert!((l.policy - 0.7).abs() < 1e-15);
        assert_eq!(l.value, 1.0);
        assert!((l.entropy_bonus + 0.005).abs() < 1e-15);
        let z = a2c_losses(&[decision(-0.7, 0.4), decision(-2.0, 0.4)], 0.4, 0.01).unwrap();
        assert_eq!(z.policy, 0.0);
        assert!(a2c_losses(&[decision(-0.7, 0.0)], f64::NAN, 0.01).is_err());
    }
}
