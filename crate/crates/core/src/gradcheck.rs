//! Finite-difference verification of every hand-written gradient.
//!
//! Each suite builds a scalar function of the estimator parameters, compares
//! the analytic gradient on a random subset of coordinates against central
//! differences, and keeps the worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_from_euler, EulerPose, NormalizationTransform, UnitVec3, Vec3};
use crate::losses::{
    head_frame_angle_to, mutual_loss, pose_l1_loss, pretrain_loss, stabilization_loss, MomentumState,
    StabilizationInput,
};
use crate::model::{
    backward_into, forward, forward_with_tape, Architecture, EstimatorParams, FeatureVec, Gradients, Prediction,
    PredictionGrad,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that near-zero gradient
/// components are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub configs: usize,
    /// Coordinates checked per configuration.
    pub coords: usize,
    pub step: f64,
    pub tolerance: f64,
    pub arch: Architecture,
    /// Test hook: perturbs every analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 1,
            configs: 100,
            coords: 24,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            arch: Architecture::default(),
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCoordinate {
    pub config: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub configs: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A scalar objective of the parameters with its analytic gradient.
trait Objective {
    fn value(&self, p: &EstimatorParams) -> f64;
    fn gradient(&self, p: &EstimatorParams) -> Gradients;
}

fn random_features(d: usize, rng: &mut impl Rng) -> FeatureVec {
    FeatureVec((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_params(arch: Architecture, rng: &mut impl Rng) -> EstimatorParams {
    EstimatorParams::random_uniform(arch, 0.4, rng)
}

fn random_w(rng: &mut impl Rng) -> NormalizationTransform {
    let pose = EulerPose::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    NormalizationTransform::new(rotation_from_euler(&pose))
}

fn random_unit(rng: &mut impl Rng) -> UnitVec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if let Some(u) = v.try_normalize(0.1) {
            return u;
        }
    }
}

fn predict(p: &EstimatorParams, x: &FeatureVec) -> Prediction {
    forward(p, x).expect("dimensions checked at construction")
}

fn accumulate(p: &EstimatorParams, x: &FeatureVec, d: &PredictionGrad, g: &mut Gradients) {
    let (_, tape) = forward_with_tape(p, x).expect("dimensions checked at construction");
    backward_into(p, &tape, d, g);
}

/// Random linear functional of the prediction; isolates the model backward.
struct Linear {
    x: FeatureVec,
    w: PredictionGrad,
}

impl Objective for Linear {
    fn value(&self, p: &EstimatorParams) -> f64 {
        let pr = predict(p, &self.x);
        let g = pr.gaze.as_array();
        let a = pr.pose.as_array();
        (0..3).map(|k| self.w.gaze[k] * g[k] + self.w.pose[k] * a[k]).sum()
    }
    fn gradient(&self, p: &EstimatorParams) -> Gradients {
        let mut g = Gradients::zeros(p.arch());
        accumulate(p, &self.x, &self.w, &mut g);
        g
    }
}

/// Mutual loss with the pseudo-label frozen at the base parameters.
struct Mutual {
    x: [FeatureVec; 2],
    supervised: usize,
    target: UnitVec3,
}

impl Objective for Mutual {
    fn value(&self, p: &EstimatorParams) -> f64 {
        head_frame_angle_to(&predict(p, &self.x[self.supervised]), &self.target).0
    }
    fn gradient(&self, p: &EstimatorParams) -> Gradients {
        let ml = mutual_loss(&predict(p, &self.x[0]), &predict(p, &self.x[1]));
        let mut g = Gradients::zeros(p.arch());
        for v in 0..2 {
            accumulate(p, &self.x[v], &ml.grads[v], &mut g);
        }
        g
    }
}

struct Stabilization {
    pairs: Vec<([FeatureVec; 2], [NormalizationTransform; 2])>,
    momentum: MomentumState,
}

impl Stabilization {
    fn preds(&self, p: &EstimatorParams) -> Vec<[Prediction; 2]> {
        self.pairs.iter().map(|(x, _)| [predict(p, &x[0]), predict(p, &x[1])]).collect()
    }
    fn loss(&self, preds: &[[Prediction; 2]]) -> crate::losses::StabilizationLoss {
        let inputs: Vec<StabilizationInput> = preds
            .iter()
            .zip(&self.pairs)
            .map(|(pr, (_, w))| StabilizationInput {
                pose1: &pr[0].pose,
                pose2: &pr[1].pose,
                w1: &w[0],
                w2: &w[1],
            })
            .collect();
        stabilization_loss(&inputs, &self.momentum)
    }
}

impl Objective for Stabilization {
    fn value(&self, p: &EstimatorParams) -> f64 {
        self.loss(&self.preds(p)).value
    }
    fn gradient(&self, p: &EstimatorParams) -> Gradients {
        let l = self.loss(&self.preds(p));
        let mut g = Gradients::zeros(p.arch());
        for ((x, _), d) in self.pairs.iter().zip(&l.grads) {
            accumulate(p, &x[0], &d[0], &mut g);
            accumulate(p, &x[1], &d[1], &mut g);
        }
        g
    }
}

struct Pretrain {
    x: FeatureVec,
    label: UnitVec3,
}

impl Objective for Pretrain {
    fn value(&self, p: &EstimatorParams) -> f64 {
        pretrain_loss(&predict(p, &self.x).gaze, &self.label).0
    }
    fn gradient(&self, p: &EstimatorParams) -> Gradients {
        let (_, dg) = pretrain_loss(&predict(p, &self.x).gaze, &self.label);
        let mut g = Gradients::zeros(p.arch());
        accumulate(p, &self.x, &PredictionGrad { gaze: dg, pose: [0.0; 3] }, &mut g);
        g
    }
}

struct PoseL1 {
    x: FeatureVec,
    label: EulerPose,
}

impl Objective for PoseL1 {
    fn value(&self, p: &EstimatorParams) -> f64 {
        pose_l1_loss(&predict(p, &self.x).pose, &self.label).0
    }
    fn gradient(&self, p: &EstimatorParams) -> Gradients {
        let (_, dp) = pose_l1_loss(&predict(p, &self.x).pose, &self.label);
        let mut g = Gradients::zeros(p.arch());
        accumulate(p, &self.x, &PredictionGrad { gaze: [0.0; 3], pose: dp }, &mut g);
        g
    }
}

/// Full adaptation objective for a small batch, pseudo-labels frozen.
struct Total {
    mutual: Vec<Mutual>,
    stb: Stabilization,
    pre: Vec<Pretrain>,
    lambda_stb: f64,
    lambda_pre: f64,
}

impl Objective for Total {
    fn value(&self, p: &EstimatorParams) -> f64 {
        let n = self.mutual.len() as f64;
        let m: f64 = self.mutual.iter().map(|o| o.value(p)).sum::<f64>() / n;
        let r: f64 = self.pre.iter().map(|o| o.value(p)).sum::<f64>() / self.pre.len() as f64;
        m + self.lambda_stb * self.stb.value(p) + self.lambda_pre * r
    }
    fn gradient(&self, p: &EstimatorParams) -> Gradients {
        let mut g = Gradients::zeros(p.arch());
        let n = self.mutual.len() as f64;
        for o in &self.mutual {
            g.add_scaled(&o.gradient(p), 1.0 / n);
        }
        g.add_scaled(&self.stb.gradient(p), self.lambda_stb);
        for o in &self.pre {
            g.add_scaled(&o.gradient(p), self.lambda_pre / self.pre.len() as f64);
        }
        g
    }
}

fn make_mutual(p: &EstimatorParams, rng: &mut impl Rng) -> Mutual {
    let d = p.arch().input;
    let x = [random_features(d, rng), random_features(d, rng)];
    let ml = mutual_loss(&predict(p, &x[0]), &predict(p, &x[1]));
    Mutual {
        x,
        supervised: ml.label.reliable.other().index(),
        target: ml.label.target,
    }
}

fn make_stabilization(p: &EstimatorParams, pairs: usize, rng: &mut impl Rng) -> Stabilization {
    let d = p.arch().input;
    let mut s = Stabilization {
        pairs: (0..pairs)
            .map(|_| ([random_features(d, rng), random_features(d, rng)], [random_w(rng), random_w(rng)]))
            .collect(),
        momentum: MomentumState { c: 0.0, eta: 0.99 },
    };
    // keep C well away from the kink of |f - C|
    let f = s.loss(&s.preds(p)).f_mean;
    let offset = if rng.random_bool(0.5) { 0.05 } else { -0.05 };
    s.momentum.c = f + offset;
    s
}

fn check_objective(o: &dyn Objective, p: &EstimatorParams, config: usize, opts: &GradcheckOptions, rng: &mut impl Rng, report: &mut SuiteReport) {
    let mut analytic = o.gradient(p);
    if opts.corrupt {
        for v in analytic.0.values_mut() {
            *v = *v * 1.01 + 1e-3;
        }
    }
    let n = p.arch().param_count();
    let mut probe = p.clone();
    for _ in 0..opts.coords {
        let i = rng.random_range(0..n);
        let base = probe.0.values()[i];
        probe.0.values_mut()[i] = base + opts.step;
        let up = o.value(&probe);
        probe.0.values_mut()[i] = base - opts.step;
        let down = o.value(&probe);
        probe.0.values_mut()[i] = base;
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic.0.values()[i];
        let rel = relative_error(a, numeric);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(WorstCoordinate {
                config,
                coordinate: i,
                analytic: a,
                numeric,
            });
        }
    }
}

pub const SUITES: [&str; 6] = ["model_backward", "mutual", "stabilization", "pretrain", "pose_l1", "total"];

/// Runs one named suite.
pub fn run_suite(name: &str, opts: &GradcheckOptions) -> Option<SuiteReport> {
    let idx = SUITES.iter().position(|s| *s == name)?;
    let mut report = SuiteReport {
        name: name.to_string(),
        configs: opts.configs,
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        passed: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(idx as u64);
    for config in 0..opts.configs {
        let p = random_params(opts.arch, &mut rng);
        let d = opts.arch.input;
        let obj: Box<dyn Objective> = match name {
            "model_backward" => Box::new(Linear {
                x: random_features(d, &mut rng),
                w: PredictionGrad {
                    gaze: random_unit(&mut rng).as_array(),
                    pose: random_unit(&mut rng).as_array(),
                },
            }),
            "mutual" => Box::new(make_mutual(&p, &mut rng)),
            "stabilization" => Box::new(make_stabilization(&p, 4, &mut rng)),
            "pretrain" => Box::new(Pretrain {
                x: random_features(d, &mut rng),
                label: random_unit(&mut rng),
            }),
            "pose_l1" => Box::new(PoseL1 {
                x: random_features(d, &mut rng),
                label: EulerPose::new(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0)),
            }),
            _ => Box::new(Total {
                mutual: (0..3).map(|_| make_mutual(&p, &mut rng)).collect(),
                stb: make_stabilization(&p, 3, &mut rng),
                pre: (0..3)
                    .map(|_| Pretrain {
                        x: random_features(d, &mut rng),
                        label: random_unit(&mut rng),
                    })
                    .collect(),
                lambda_stb: 50.0,
                lambda_pre: 10.0,
            }),
        };
        check_objective(obj.as_ref(), &p, config, opts, &mut rng, &mut report);
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Some(report)
}

pub fn run_all(opts: &GradcheckOptions) -> Vec<SuiteReport> {
    SUITES.iter().filter_map(|s| run_suite(s, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradcheckOptions {
        GradcheckOptions {
            configs: 10,
            coords: 16,
            ..GradcheckOptions::default()
        }
    }

    #[test]
    fn all_suites_pass() {
        for r in run_all(&quick()) {
            assert!(r.passed, "{}: {} at {:?}", r.name, r.max_rel_error, r.worst);
            assert_eq!(r.checked, 160);
        }
    }

    #[test]
    fn corruption_is_caught() {
        let opts = GradcheckOptions {
            corrupt: true,
            ..quick()
        };
        assert!(run_all(&opts).iter().all(|r| !r.passed));
    }

    #[test]
    fn unknown_suite() {
        assert!(run_suite("nope", &quick()).is_none());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }
}
