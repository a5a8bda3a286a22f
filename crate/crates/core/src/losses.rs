//! Adaptation objective: mutual supervision between views, momentum
//! stabilization of the relative head pose, and the labeled gaze constraint.
//!
//! Every loss returns its gradient with respect to the [`Prediction`] it was
//! computed from; [`crate::model::backward_into`] carries it to the weights.

use serde::{Deserialize, Serialize};

use crate::geometry::{
    angle_between, clamped_acos, clamped_acos_grad, head_angle, rotation_euler_partials,
    rotation_from_euler, to_head_cs, wrap_angle, EulerPose, NormalizationTransform, UnitVec3, Vec3,
};
use crate::model::{Prediction, PredictionGrad};

pub const DEFAULT_LAMBDA_STB: f64 = 50.0;
pub const DEFAULT_LAMBDA_PRE: f64 = 10.0;
pub const DEFAULT_ETA: f64 = 0.99;

/// Which view of a pair a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    First,
    Second,
}

impl View {
    /// `0` for the first camera, `1` for the second.
    pub fn flag(self) -> u8 {
        match self {
            View::First => 0,
            View::Second => 1,
        }
    }

    pub fn index(self) -> usize {
        self.flag() as usize
    }

    pub fn other(self) -> View {
        match self {
            View::First => View::Second,
            View::Second => View::First,
        }
    }
}

/// The more reliable view and its head-frame gaze, used as a fixed target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub reliable: View,
    pub target: UnitVec3,
}

/// Picks the view with the smaller predicted head angle (ties go to the first
/// view) and returns its gaze in the head frame.
pub fn select_pseudo_label(pred1: &Prediction, pred2: &Prediction) -> PseudoLabel {
    let reliable = if head_angle(&pred1.pose) <= head_angle(&pred2.pose) {
        View::First
    } else {
        View::Second
    };
    let src = if reliable == View::First { pred1 } else { pred2 };
    PseudoLabel {
        reliable,
        target: to_head_cs(&rotation_from_euler(&src.pose), &src.gaze),
    }
}

/// Angular distance between `R(pose)^T gaze` and a fixed head-frame target,
/// with its gradient with respect to the prediction.
pub fn head_frame_angle_to(pred: &Prediction, target: &UnitVec3) -> (f64, PredictionGrad) {
    let r = rotation_from_euler(&pred.pose);
    let c = r.matrix().tr_mul_vec(&pred.gaze.vec()).dot(&target.vec());
    let value = clamped_acos(c);
    let dc = clamped_acos_grad(c);
    if dc == 0.0 {
        return (value, PredictionGrad::default());
    }
    // c = g^T R y
    let ry = r.apply(&target.vec());
    let partials = rotation_euler_partials(&pred.pose);
    let g = pred.gaze.vec();
    let mut grad = PredictionGrad {
        gaze: ry.scale(dc).0,
        pose: [0.0; 3],
    };
    for (k, dr) in partials.iter().enumerate() {
        grad.pose[k] = dc * g.dot(&dr.mul_vec(&target.vec()));
    }
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutualLoss {
    pub value: f64,
    pub label: PseudoLabel,
    /// Gradient for each view; the reliable view's entry is always zero.
    pub grads: [PredictionGrad; 2],
}

/// Mutual supervision for one pair: the less reliable view is pulled toward
/// the reliable view's head-frame gaze, which is treated as a constant.
pub fn mutual_loss(pred1: &Prediction, pred2: &Prediction) -> MutualLoss {
    let label = select_pseudo_label(pred1, pred2);
    let supervised = label.reliable.other();
    let pred = if supervised == View::First { pred1 } else { pred2 };
    let (value, grad) = head_frame_angle_to(pred, &label.target);
    let mut grads = [PredictionGrad::default(); 2];
    grads[supervised.index()] = grad;
    MutualLoss {
        value,
        label,
        grads,
    }
}

/// Exponential moving average of the rig constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub c: f64,
    pub eta: f64,
}

impl MomentumState {
    pub fn new(c: f64, eta: f64) -> Result<Self, crate::Error> {
        if !(0.0..1.0).contains(&eta) {
            return Err(crate::Error::InvalidConfig(format!("momentum {eta} outside [0, 1)")));
        }
        if !c.is_finite() || c.abs() > 1.0 + 1e-9 {
            return Err(crate::Error::InvalidConfig(format!("rig constant {c} outside [-1, 1]")));
        }
        Ok(MomentumState { c, eta })
    }
}

/// `c' = eta * c + (1 - eta) * f`.
pub fn update_momentum(m: &MomentumState, f: f64) -> MomentumState {
    MomentumState {
        c: m.eta * m.c + (1.0 - m.eta) * f,
        eta: m.eta,
    }
}

/// Rig constant of one pair computed from predicted poses after undoing each
/// view's normalization, with its gradient with respect to both poses.
///
/// `f = e3^T (W1^T R1)(W2^T R2)^T e3` with roll forced to zero, which equals
/// `(R1^T W1 e3) . (R2^T W2 e3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigConstantTerm {
    pub f: f64,
    pub d_pose1: [f64; 3],
    pub d_pose2: [f64; 3],
}

pub fn normalized_rig_constant(
    pose1: &EulerPose,
    pose2: &EulerPose,
    w1: &NormalizationTransform,
    w2: &NormalizationTransform,
) -> RigConstantTerm {
    let p1 = pose1.without_roll();
    let p2 = pose2.without_roll();
    let a1 = w1.w.matrix().col(2);
    let a2 = w2.w.matrix().col(2);
    let r1 = rotation_from_euler(&p1);
    let r2 = rotation_from_euler(&p2);
    let u1 = r1.matrix().tr_mul_vec(&a1);
    let u2 = r2.matrix().tr_mul_vec(&a2);
    let d1 = rotation_euler_partials(&p1);
    let d2 = rotation_euler_partials(&p2);
    let mut d_pose1 = [0.0; 3];
    let mut d_pose2 = [0.0; 3];
    // roll is excluded, so only yaw and pitch carry gradient
    for k in 0..2 {
        d_pose1[k] = d1[k].tr_mul_vec(&a1).dot(&u2);
        d_pose2[k] = u1.dot(&d2[k].tr_mul_vec(&a2));
    }
    RigConstantTerm {
        f: u1.dot(&u2),
        d_pose1,
        d_pose2,
    }
}

/// Inputs of the stabilization term for one pair.
#[derive(Debug, Clone, Copy)]
pub struct StabilizationInput<'a> {
    pub pose1: &'a EulerPose,
    pub pose2: &'a EulerPose,
    pub w1: &'a NormalizationTransform,
    pub w2: &'a NormalizationTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilizationLoss {
    /// `|mean f - C|`.
    pub value: f64,
    /// Batch mean of the rig constant.
    pub f_mean: f64,
    /// Pose gradients per pair, `[view1, view2]`.
    pub grads: Vec<[PredictionGrad; 2]>,
}

/// `|f - C|` where `f` is the batch mean of the de-normalized rig constant.
/// The subgradient at `f == C` is zero.
pub fn stabilization_loss(batch: &[StabilizationInput<'_>], m: &MomentumState) -> StabilizationLoss {
    if batch.is_empty() {
        return StabilizationLoss {
            value: 0.0,
            f_mean: m.c,
            grads: Vec::new(),
        };
    }
    let terms: Vec<RigConstantTerm> = batch
        .iter()
        .map(|s| normalized_rig_constant(s.pose1, s.pose2, s.w1, s.w2))
        .collect();
    let n = terms.len() as f64;
    let f_mean = terms.iter().map(|t| t.f).sum::<f64>() / n;
    let diff = f_mean - m.c;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let scale = sign / n;
    let grads = terms
        .iter()
        .map(|t| {
            [
                PredictionGrad {
                    gaze: [0.0; 3],
                    pose: t.d_pose1.map(|v| v * scale),
                },
                PredictionGrad {
                    gaze: [0.0; 3],
                    pose: t.d_pose2.map(|v| v * scale),
                },
            ]
        })
        .collect();
    StabilizationLoss {
        value: diff.abs(),
        f_mean,
        grads,
    }
}

/// Angular error between a predicted gaze and its label, with the ambient
/// gradient with respect to the prediction.
pub fn pretrain_loss(pred_gaze: &UnitVec3, label_gaze: &UnitVec3) -> (f64, [f64; 3]) {
    let c = pred_gaze.dot(label_gaze);
    let dc = clamped_acos_grad(c);
    let value = clamped_acos(c);
    (value, label_gaze.vec().scale(dc).0)
}

/// Mean absolute wrapped difference over yaw, pitch and roll.
pub fn pose_l1_loss(pred: &EulerPose, label: &EulerPose) -> (f64, [f64; 3]) {
    let p = pred.as_array();
    let l = label.as_array();
    let mut value = 0.0;
    let mut grad = [0.0; 3];
    for k in 0..3 {
        let d = wrap_angle(p[k] - l[k]);
        value += d.abs();
        grad[k] = if d > 0.0 {
            1.0 / 3.0
        } else if d < 0.0 {
            -1.0 / 3.0
        } else {
            0.0
        };
    }
    (value / 3.0, grad)
}

/// Weights of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_stb: f64,
    pub lambda_pre: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_stb: DEFAULT_LAMBDA_STB,
            lambda_pre: DEFAULT_LAMBDA_PRE,
        }
    }
}

/// The three unweighted terms of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_mut: f64,
    pub l_stb: f64,
    pub l_pre: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mut: f64,
    pub l_stb: f64,
    pub l_pre: f64,
    pub total: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_mut: parts.l_mut,
        l_stb: parts.l_stb,
        l_pre: parts.l_pre,
        total: parts.l_mut + weights.lambda_stb * parts.l_stb + weights.lambda_pre * parts.l_pre,
    }
}

/// Head-frame consistency of one pair: `<R1^T g1, R2^T g2>`.
pub fn pair_consistency(pred1: &Prediction, pred2: &Prediction) -> f64 {
    let h1 = to_head_cs(&rotation_from_euler(&pred1.pose), &pred1.gaze);
    let h2 = to_head_cs(&rotation_from_euler(&pred2.pose), &pred2.gaze);
    angle_between(&h1, &h2)
}

/// Ambient unit vector helper for tests and oracles.
pub fn unit(x: f64, y: f64, z: f64) -> UnitVec3 {
    UnitVec3::new(Vec3::new(x, y, z)).expect("non-zero vector")
}
