//! Small differentiable gaze/head-pose estimator with hand-derived gradients.
//!
//! Architecture: `d -> h -> h -> 6`, two tanh hidden layers, linear output.
//! The first three outputs plus a `(0, 0, 1)` anchor are normalized into the
//! gaze direction; the last three are squashed by `pi * tanh` into yaw, pitch
//! and roll.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{EulerPose, UnitVec3, Vec3};
use crate::Error;

pub const DEFAULT_INPUT_DIM: usize = 32;
pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const OUTPUT_DIM: usize = 6;

/// Below this raw gaze norm the gaze falls back to `(0, 0, 1)`.
const MIN_GAZE_NORM: f64 = 1e-12;

/// Feature vector standing in for a normalized face image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVec(pub Vec<f64>);

impl FeatureVec {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input: DEFAULT_INPUT_DIM,
            hidden: DEFAULT_HIDDEN_DIM,
        }
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Architecture {
    fn layout(&self) -> Layout {
        let (d, h) = (self.input, self.hidden);
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + OUTPUT_DIM * h;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + OUTPUT_DIM,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

/// Flat parameter storage shared by [`EstimatorParams`] and [`Gradients`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVec {
    arch: Architecture,
    values: Vec<f64>,
}

impl ParamVec {
    pub fn zeros(arch: Architecture) -> Self {
        ParamVec {
            arch,
            values: vec![0.0; arch.param_count()],
        }
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self, Error> {
        if values.len() != arch.param_count() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} values for {:?}, got {}",
                arch.param_count(),
                arch,
                values.len()
            )));
        }
        Ok(ParamVec { arch, values })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Estimator weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EstimatorParams(pub ParamVec);

/// Gradient of a scalar with respect to every estimator weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gradients(pub ParamVec);

impl EstimatorParams {
    pub fn zeros(arch: Architecture) -> Self {
        EstimatorParams(ParamVec::zeros(arch))
    }

    /// Xavier-style initialization for the hidden layers and a zero output
    /// layer, so a fresh model starts at the anchor prediction.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lay = arch.layout();
        let mut p = ParamVec::zeros(arch);
        let s1 = (1.0 / arch.input as f64).sqrt();
        let s2 = (1.0 / arch.hidden as f64).sqrt();
        let n1 = Normal::new(0.0, s1).expect("finite std");
        let n2 = Normal::new(0.0, s2).expect("finite std");
        for v in &mut p.values[lay.w1..lay.b1] {
            *v = n1.sample(&mut rng);
        }
        for v in &mut p.values[lay.w2..lay.b2] {
            *v = n2.sample(&mut rng);
        }
        EstimatorParams(p)
    }

    /// Every weight drawn uniformly from `[-scale, scale]`, including the
    /// output layer. Used by gradient checks.
    pub fn random_uniform(arch: Architecture, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = ParamVec::zeros(arch);
        for v in &mut p.values {
            *v = rng.random_range(-scale..scale);
        }
        EstimatorParams(p)
    }

    pub fn arch(&self) -> Architecture {
        self.0.arch
    }
}

impl Gradients {
    pub fn zeros(arch: Architecture) -> Self {
        Gradients(ParamVec::zeros(arch))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        debug_assert_eq!(self.0.arch, other.0.arch);
        for (a, b) in self.0.values.iter_mut().zip(&other.0.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0.values {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One view's estimator output: gaze and head pose, both in the (normalized)
/// camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub gaze: UnitVec3,
    pub pose: EulerPose,
}

/// Upstream gradient of a scalar loss with respect to a [`Prediction`].
///
/// `gaze` is the ambient gradient with respect to the three components of the
/// unit gaze vector; `pose` is with respect to yaw, pitch and roll.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PredictionGrad {
    pub gaze: [f64; 3],
    pub pose: [f64; 3],
}

impl PredictionGrad {
    pub fn is_zero(&self) -> bool {
        self.gaze.iter().chain(&self.pose).all(|v| *v == 0.0)
    }

    pub fn scaled(&self, s: f64) -> PredictionGrad {
        PredictionGrad {
            gaze: self.gaze.map(|v| v * s),
            pose: self.pose.map(|v| v * s),
        }
    }

    pub fn add(&self, o: &PredictionGrad) -> PredictionGrad {
        let mut out = *self;
        for k in 0..3 {
            out.gaze[k] += o.gaze[k];
            out.pose[k] += o.pose[k];
        }
        out
    }
}

/// Intermediates kept by [`forward_with_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    arch: Architecture,
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    raw: [f64; OUTPUT_DIM],
    gaze_norm: f64,
    prediction: Prediction,
}

impl Tape {
    pub fn prediction(&self) -> &Prediction {
        &self.prediction
    }

    pub fn raw_output(&self) -> [f64; OUTPUT_DIM] {
        self.raw
    }

    /// Rebuilds the prediction from the recorded raw outputs.
    pub fn replay(&self) -> Prediction {
        head_outputs(&self.raw).0
    }
}

fn check_input(params: &EstimatorParams, x: &FeatureVec) -> Result<(), Error> {
    if x.len() != params.arch().input {
        return Err(Error::DimensionMismatch {
            expected: params.arch().input,
            got: x.len(),
        });
    }
    Ok(())
}

/// `out = act(W * input + b)` for a row-major `W`.
fn dense(w: &[f64], b: &[f64], input: &[f64], out: &mut [f64], act: bool) {
    let n_in = input.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n_in..(i + 1) * n_in];
        let mut acc = b[i];
        for (wi, xi) in row.iter().zip(input) {
            acc += wi * xi;
        }
        *o = if act { acc.tanh() } else { acc };
    }
}

fn head_outputs(raw: &[f64; OUTPUT_DIM]) -> (Prediction, f64) {
    let u = Vec3::new(raw[0], raw[1], raw[2] + 1.0);
    let norm = u.norm();
    let gaze = if norm < MIN_GAZE_NORM || !norm.is_finite() {
        UnitVec3::Z
    } else {
        UnitVec3::new_unchecked(u.scale(1.0 / norm))
    };
    let pose = EulerPose::new(PI * raw[3].tanh(), PI * raw[4].tanh(), PI * raw[5].tanh());
    (Prediction { gaze, pose }, norm)
}

fn run(params: &EstimatorParams, x: &[f64]) -> Tape {
    let arch = params.arch();
    let lay = arch.layout();
    let v = params.0.values();
    let h = arch.hidden;
    let mut h1 = vec![0.0; h];
    dense(&v[lay.w1..lay.b1], &v[lay.b1..lay.w2], x, &mut h1, true);
    let mut h2 = vec![0.0; h];
    dense(&v[lay.w2..lay.b2], &v[lay.b2..lay.w3], &h1, &mut h2, true);
    let mut raw = [0.0; OUTPUT_DIM];
    dense(&v[lay.w3..lay.b3], &v[lay.b3..lay.len], &h2, &mut raw, false);
    let (prediction, gaze_norm) = head_outputs(&raw);
    Tape {
        arch,
        x: x.to_vec(),
        h1,
        h2,
        raw,
        gaze_norm,
        prediction,
    }
}

pub fn forward(params: &EstimatorParams, x: &FeatureVec) -> Result<Prediction, Error> {
    check_input(params, x)?;
    Ok(run(params, &x.0).prediction)
}

pub fn forward_with_tape(
    params: &EstimatorParams,
    x: &FeatureVec,
) -> Result<(Prediction, Tape), Error> {
    check_input(params, x)?;
    let tape = run(params, &x.0);
    Ok((tape.prediction, tape))
}

/// Gradient with respect to the six raw network outputs.
pub fn raw_output_grad(tape: &Tape, d: &PredictionGrad) -> [f64; OUTPUT_DIM] {
    let mut draw = [0.0; OUTPUT_DIM];
    if tape.gaze_norm >= MIN_GAZE_NORM && tape.gaze_norm.is_finite() {
        // d(u/|u|)/du = (I - g g^T) / |u|
        let g = tape.prediction.gaze.as_array();
        let gd: f64 = (0..3).map(|k| g[k] * d.gaze[k]).sum();
        for k in 0..3 {
            draw[k] = (d.gaze[k] - g[k] * gd) / tape.gaze_norm;
        }
    }
    for k in 0..3 {
        let t = tape.raw[3 + k].tanh();
        draw[3 + k] = d.pose[k] * PI * (1.0 - t * t);
    }
    draw
}

/// Accumulates the gradient of `<d, prediction>` into `grads`.
pub fn backward_into(params: &EstimatorParams, tape: &Tape, d: &PredictionGrad, grads: &mut Gradients) {
    debug_assert_eq!(params.arch(), tape.arch);
    debug_assert_eq!(grads.0.arch, tape.arch);
    if d.is_zero() {
        return;
    }
    let arch = tape.arch;
    let lay = arch.layout();
    let (n_in, h) = (arch.input, arch.hidden);
    let v = params.0.values();
    let g = &mut grads.0.values;

    let draw = raw_output_grad(tape, d);

    // output layer
    let mut dh2 = vec![0.0; h];
    for (i, dr) in draw.iter().enumerate() {
        if *dr == 0.0 {
            continue;
        }
        g[lay.b3 + i] += dr;
        let wrow = lay.w3 + i * h;
        for j in 0..h {
            g[wrow + j] += dr * tape.h2[j];
            dh2[j] += dr * v[wrow + j];
        }
    }

    // second hidden layer
    let mut dh1 = vec![0.0; h];
    for i in 0..h {
        let dz = dh2[i] * (1.0 - tape.h2[i] * tape.h2[i]);
        g[lay.b2 + i] += dz;
        let wrow = lay.w2 + i * h;
        for j in 0..h {
            g[wrow + j] += dz * tape.h1[j];
            dh1[j] += dz * v[wrow + j];
        }
    }

    // first hidden layer
    for i in 0..h {
        let dz = dh1[i] * (1.0 - tape.h1[i] * tape.h1[i]);
        g[lay.b1 + i] += dz;
        let wrow = lay.w1 + i * n_in;
        for j in 0..n_in {
            g[wrow + j] += dz * tape.x[j];
        }
    }
}

/// Exact gradient of `<d, prediction>` with respect to the parameters.
pub fn backward(params: &EstimatorParams, tape: &Tape, d: &PredictionGrad) -> Gradients {
    let mut grads = Gradients::zeros(tape.arch);
    backward_into(params, tape, d, &mut grads);
    grads
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(arch: Architecture) -> Self {
        let n = arch.param_count();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut EstimatorParams, grads: &Gradients, state: &mut AdamState, lr: f64) {
    assert_eq!(params.0.values.len(), grads.0.values.len());
    assert_eq!(params.0.values.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, g), m), v) in params
        .0
        .values
        .iter_mut()
        .zip(&grads.0.values)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: Architecture,
    pub params: Vec<f64>,
    pub adam: AdamState,
    /// Free-form provenance, usually the resolved run configuration.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: &EstimatorParams, state: &AdamState, provenance: serde_json::Value) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: params.arch(),
            params: params.0.values.clone(),
            adam: state.clone(),
            provenance,
        }
    }

    pub fn into_parts(self) -> Result<(EstimatorParams, AdamState), Error> {
        let n = self.arch.param_count();
        if self.adam.m.len() != n || self.adam.v.len() != n {
            return Err(Error::ArchitectureMismatch(format!(
                "optimizer state has {}/{} entries, architecture needs {n}",
                self.adam.m.len(),
                self.adam.v.len()
            )));
        }
        let params = EstimatorParams(ParamVec::from_values(self.arch, self.params)?);
        Ok((params, self.adam))
    }
}

pub fn save_checkpoint(
    params: &EstimatorParams,
    state: &AdamState,
    provenance: serde_json::Value,
    path: &Path,
) -> Result<(), Error> {
    let ck = Checkpoint::new(params, state, provenance);
    let mut text = serde_json::to_string_pretty(&ck).map_err(|e| Error::Malformed(e.to_string()))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    if ck.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Malformed(format!(
            "unsupported checkpoint format version {}",
            ck.format_version
        )));
    }
    Ok(ck)
}

pub fn load_checkpoint(path: &Path) -> Result<(EstimatorParams, AdamState), Error> {
    read_checkpoint(path)?.into_parts()
}

/// Loads a checkpoint and insists on a given architecture.
pub fn load_checkpoint_expecting(
    path: &Path,
    arch: Architecture,
) -> Result<(EstimatorParams, AdamState), Error> {
    let (p, s) = load_checkpoint(path)?;
    if p.arch() != arch {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            p.arch(),
            arch
        )));
    }
    Ok((p, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture { input: 5, hidden: 7 }
    }

    fn rand_features(n: usize, rng: &mut impl Rng) -> FeatureVec {
        FeatureVec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn objective(params: &EstimatorParams, x: &FeatureVec, d: &PredictionGrad) -> f64 {
        let p = forward(params, x).unwrap();
        let g = p.gaze.as_array();
        let a = p.pose.as_array();
        (0..3).map(|k| d.gaze[k] * g[k] + d.pose[k] * a[k]).sum()
    }

    #[test]
    fn zero_params_give_anchor() {
        let params = EstimatorParams::zeros(Architecture::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_features(32, &mut rng);
        let p = forward(&params, &x).unwrap();
        assert_eq!(p.gaze, UnitVec3::Z);
        assert_eq!(p.pose, EulerPose::default());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let params = EstimatorParams::zeros(Architecture::default());
        let err = forward(&params, &FeatureVec(vec![0.0; 3])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 32, got: 3 }));
    }

    #[test]
    fn forward_is_deterministic_and_tape_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = EstimatorParams::random_uniform(Architecture::default(), 0.3, &mut rng);
        let x = rand_features(32, &mut rng);
        let a = forward(&params, &x).unwrap();
        let b = forward(&params, &x).unwrap();
        assert_eq!(a, b);
        let (c, tape) = forward_with_tape(&params, &x).unwrap();
        assert_eq!(a, c);
        assert_eq!(tape.replay(), a);
        assert!((a.gaze.vec().norm() - 1.0).abs() < 1e-9);
        for ang in a.pose.as_array() {
            assert!(ang.abs() < PI);
        }
    }

    #[test]
    fn seeded_forward_regression() {
        let params = EstimatorParams::init(Architecture::default(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_features(32, &mut rng);
        let p = forward(&params, &x).unwrap();
        // output layer starts at zero
        assert_eq!(p.gaze, UnitVec3::Z);
        let mut params = params;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in params.0.values_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let p = forward(&params, &x).unwrap();
        assert!(p.gaze.vec().is_finite());
        assert!((p.gaze.vec().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_gaze_falls_back_to_anchor() {
        let arch = small();
        let mut params = EstimatorParams::zeros(arch);
        let lay = arch.layout();
        params.0.values_mut()[lay.b3 + 2] = -1.0;
        let p = forward(&params, &FeatureVec(vec![0.3; 5])).unwrap();
        assert_eq!(p.gaze, UnitVec3::Z);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EstimatorParams::random_uniform(small(), 0.5, &mut rng);
        let x = rand_features(5, &mut rng);
        let (_, tape) = forward_with_tape(&params, &x).unwrap();
        let g = backward(&params, &tape, &PredictionGrad::default());
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn normalization_jacobian_is_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let params = EstimatorParams::random_uniform(small(), 0.8, &mut rng);
            let x = rand_features(5, &mut rng);
            let (p, tape) = forward_with_tape(&params, &x).unwrap();
            // upstream along the gaze itself changes nothing
            let d = PredictionGrad {
                gaze: p.gaze.as_array(),
                pose: [0.0; 3],
            };
            let draw = raw_output_grad(&tape, &d);
            for v in &draw[..3] {
                assert!(v.abs() < 1e-12);
            }
            // and for arbitrary upstream the raw gradient is orthogonal to g
            let d = PredictionGrad {
                gaze: [rng.random(), rng.random(), rng.random()],
                pose: [0.0; 3],
            };
            let draw = raw_output_grad(&tape, &d);
            let g = p.gaze.as_array();
            let dot: f64 = (0..3).map(|k| draw[k] * g[k]).sum();
            assert!(dot.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..20 {
            let params = EstimatorParams::random_uniform(small(), 0.8, &mut rng);
            let x = rand_features(5, &mut rng);
            let d = PredictionGrad {
                gaze: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                pose: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            };
            let (_, tape) = forward_with_tape(&params, &x).unwrap();
            let g = backward(&params, &tape, &d);
            let mut probe = params.clone();
            for i in 0..params.0.values().len() {
                let orig = probe.0.values()[i];
                probe.0.values_mut()[i] = orig + h;
                let fp = objective(&probe, &x, &d);
                probe.0.values_mut()[i] = orig - h;
                let fm = objective(&probe, &x, &d);
                probe.0.values_mut()[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = g.0.values()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "coord {i}: analytic {an} fd {fd}");
            }
        }
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = EstimatorParams::random_uniform(small(), 0.5, &mut rng);
        let before = params.clone();
        let mut st = AdamState::new(small());
        adam_step(&mut params, &Gradients::zeros(small()), &mut st, 1e-3);
        assert_eq!(params, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = EstimatorParams::random_uniform(small(), 0.5, &mut rng);
        let before = params.clone();
        let mut grads = Gradients::zeros(small());
        for v in grads.0.values_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let lr = 1e-3;
        let mut st = AdamState::new(small());
        adam_step(&mut params, &grads, &mut st, lr);
        for ((a, b), g) in params.0.values().iter().zip(before.0.values()).zip(grads.0.values()) {
            let moved = b - a;
            assert!((moved - lr * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let start = EstimatorParams::random_uniform(small(), 0.5, &mut rng);
        let mut grads = Gradients::zeros(small());
        for v in grads.0.values_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let run = || {
            let mut p = start.clone();
            let mut st = AdamState::new(small());
            adam_step(&mut p, &grads, &mut st, 1e-3);
            adam_step(&mut p, &grads, &mut st, 1e-3);
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = EstimatorParams::random_uniform(Architecture::default(), 1.0, &mut rng);
        let mut st = AdamState::new(Architecture::default());
        let mut grads = Gradients::zeros(Architecture::default());
        for v in grads.0.values_mut() {
            *v = rng.random_range(-1.0..1.0) * 1e-3;
        }
        adam_step(&mut params, &grads, &mut st, 1e-4);
        save_checkpoint(&params, &st, serde_json::json!({"seed": 9}), &path).unwrap();
        let (p2, s2) = load_checkpoint(&path).unwrap();
        for (a, b) in params.0.values().iter().zip(p2.0.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(st, s2);
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        assert!(matches!(load_checkpoint(&missing), Err(Error::Io { .. })));

        let path = dir.path().join("ck.json");
        let params = EstimatorParams::zeros(small());
        save_checkpoint(&params, &AdamState::new(small()), serde_json::Value::Null, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let trunc = dir.path().join("trunc.json");
        fs::write(&trunc, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&trunc), Err(Error::Malformed(_))));

        assert!(matches!(
            load_checkpoint_expecting(&path, Architecture::default()),
            Err(Error::ArchitectureMismatch(_))
        ));

        // declared dims disagree with the stored arrays
        let mut ck = read_checkpoint(&path).unwrap();
        ck.arch.hidden += 1;
        let bad = dir.path().join("bad.json");
        fs::write(&bad, serde_json::to_string(&ck).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::ArchitectureMismatch(_))));
    }
}
