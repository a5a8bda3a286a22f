//! Supervised pre-training and unsupervised two-view adaptation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{PairPrediction, SelectionMode};
use crate::losses::{
    mutual_loss, pose_l1_loss, pretrain_loss, stabilization_loss, total_loss, update_momentum, LossParts,
    LossWeights, MomentumState, StabilizationInput, DEFAULT_ETA, DEFAULT_LAMBDA_PRE, DEFAULT_LAMBDA_STB,
};
use crate::model::{
    adam_step, backward_into, forward, forward_with_tape, AdamState, EstimatorParams, FeatureVec, Gradients,
    Prediction, PredictionGrad, Tape,
};
use crate::simdata::{DualViewInputs, LabeledView};
use crate::Error;

pub const LOG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub pose_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 6000,
            batch_size: 64,
            lr: 1e-4,
            pose_weight: 1.0,
            seed: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("iterations and batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.pose_weight >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0 and pose weight >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub pretrain_lr: f64,
    pub lambda_stb: f64,
    pub lambda_pre: f64,
    /// Weight of the pose L1 term inside the replayed pre-training loss.
    pub pre_pose_weight: f64,
    pub eta: f64,
    pub seed: u64,
    pub enable_stb: bool,
    pub enable_pre: bool,
    pub selection_mode: SelectionMode,
    /// Probe consistency is measured every this many iterations.
    pub probe_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            iterations: 3000,
            batch_size: 64,
            lr: 1e-4,
            pretrain_lr: 1e-4,
            lambda_stb: DEFAULT_LAMBDA_STB,
            lambda_pre: DEFAULT_LAMBDA_PRE,
            pre_pose_weight: 1.0,
            eta: DEFAULT_ETA,
            seed: 1,
            enable_stb: true,
            enable_pre: true,
            selection_mode: SelectionMode::Predicted,
            probe_every: 50,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.iterations == 0 || self.batch_size == 0 || self.probe_every == 0 {
            return Err(Error::InvalidConfig("iterations, batch size and probe cadence must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be > 0".into()));
        }
        if !(self.lambda_stb >= 0.0) || !(self.lambda_pre >= 0.0) || !(self.pre_pose_weight >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        MomentumState::new(0.0, self.eta).map(|_| ())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_stb: if self.enable_stb { self.lambda_stb } else { 0.0 },
            lambda_pre: if self.enable_pre { self.lambda_pre } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub iteration: usize,
    pub l_gaze: f64,
    pub l_pose: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub iteration: usize,
    pub l_mut: f64,
    pub l_stb: f64,
    pub l_pre: f64,
    pub total: f64,
    /// Batch mean of the de-normalized rig constant.
    pub f: f64,
    /// Momentum value used by this iteration's stabilization term.
    pub c: f64,
    /// Mean probe consistency after this iteration's update, when measured.
    #[serde(default)]
    pub probe_consistency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog<R> {
    pub records: Vec<R>,
    /// Probe consistency before the first update, if a probe set was given.
    #[serde(default)]
    pub initial_probe_consistency: Option<f64>,
}

impl<R> Default for TrainLog<R> {
    fn default() -> Self {
        TrainLog {
            records: Vec::new(),
            initial_probe_consistency: None,
        }
    }
}

/// Result of a training run. A run stopped by a non-finite value keeps the
/// records up to the failing iteration and the last finite parameters.
#[derive(Debug, Clone)]
pub struct TrainOutcome<R> {
    pub params: EstimatorParams,
    pub adam: AdamState,
    pub log: TrainLog<R>,
    pub aborted: Option<String>,
}

/// Draws batches by walking seeded permutations of `0..n`, reshuffling on
/// every pass.
#[derive(Debug, Clone)]
pub struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    pub fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchCycler { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

const STREAM_PRETRAIN: u64 = 1;
const STREAM_DUAL: u64 = 2;
const STREAM_REPLAY: u64 = 3;

fn check_dims(params: &EstimatorParams, x: &FeatureVec) -> Result<(), Error> {
    let d = params.arch().input;
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    Ok(())
}

/// Gaze angle plus `pose_weight` times pose L1 for one labeled sample, with
/// the gradient accumulated into `grads` scaled by `scale`.
fn supervised_step(
    params: &EstimatorParams,
    sample: &LabeledView,
    pose_weight: f64,
    scale: f64,
    grads: &mut Gradients,
) -> Result<(f64, f64), Error> {
    let (pred, tape) = forward_with_tape(params, &sample.x)?;
    let (lg, dg) = pretrain_loss(&pred.gaze, &sample.label.gaze);
    let (lp, dp) = if pose_weight > 0.0 {
        pose_l1_loss(&pred.pose, &sample.label.pose)
    } else {
        (0.0, [0.0; 3])
    };
    let d = PredictionGrad {
        gaze: dg.map(|v| v * scale),
        pose: dp.map(|v| v * scale * pose_weight),
    };
    backward_into(params, &tape, &d, grads);
    Ok((lg, lp))
}

/// One Adam step that is rolled back if it leaves non-finite parameters.
fn guarded_step(params: &mut EstimatorParams, grads: &Gradients, adam: &mut AdamState, lr: f64) -> bool {
    let saved = (params.clone(), adam.clone());
    adam_step(params, grads, adam, lr);
    if params.0.is_finite() {
        return true;
    }
    (*params, *adam) = saved;
    false
}

/// Supervised training on labeled single-view data: gaze angular error plus
/// a weighted pose L1 term.
pub fn pretrain(
    params: EstimatorParams,
    data: &[LabeledView],
    cfg: &PretrainConfig,
) -> Result<TrainOutcome<PretrainRecord>, Error> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("pre-training set is empty"));
    }
    for s in data {
        check_dims(&params, &s.x)?;
    }
    let mut params = params;
    let mut adam = AdamState::new(params.arch());
    let mut cycler = BatchCycler::new(data.len(), cfg.seed, STREAM_PRETRAIN);
    let mut log = TrainLog::default();
    for it in 1..=cfg.iterations {
        let batch = cycler.next_batch(cfg.batch_size);
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Gradients::zeros(params.arch());
        let (mut lg, mut lp) = (0.0, 0.0);
        for &i in &batch {
            let (g, p) = supervised_step(&params, &data[i], cfg.pose_weight, scale, &mut grads)?;
            lg += g;
            lp += p;
        }
        lg *= scale;
        lp *= scale;
        let total = lg + cfg.pose_weight * lp;
        if !total.is_finite() || !grads.0.is_finite() {
            return Ok(TrainOutcome {
                params,
                adam,
                log,
                aborted: Some(format!("non-finite loss at iteration {it}")),
            });
        }
        if !guarded_step(&mut params, &grads, &mut adam, cfg.lr) {
            return Ok(TrainOutcome {
                params,
                adam,
                log,
                aborted: Some(format!("non-finite parameters after update at iteration {it}")),
            });
        }
        log.records.push(PretrainRecord {
            iteration: it,
            l_gaze: lg,
            l_pose: lp,
            total,
        });
    }
    Ok(TrainOutcome {
        params,
        adam,
        log,
        aborted: None,
    })
}

/// Predictions for both views of every pair.
pub fn predict_pairs(params: &EstimatorParams, pairs: &[DualViewInputs]) -> Result<Vec<PairPrediction>, Error> {
    pairs
        .iter()
        .map(|p| Ok([forward(params, &p.views[0].x)?, forward(params, &p.views[1].x)?]))
        .collect()
}

/// Mean head-frame angle between the two views' predictions.
pub fn probe_consistency(params: &EstimatorParams, probe: &[DualViewInputs]) -> Result<f64, Error> {
    if probe.is_empty() {
        return Err(Error::Empty("probe set is empty"));
    }
    crate::eval::consistency(&predict_pairs(params, probe)?)
}

fn batch_rig_constant(preds: &[(Prediction, Prediction)], pairs: &[&DualViewInputs], m: &MomentumState) -> f64 {
    let inputs: Vec<StabilizationInput> = preds
        .iter()
        .zip(pairs)
        .map(|((a, b), p)| StabilizationInput {
            pose1: &a.pose,
            pose2: &b.pose,
            w1: &p.views[0].w,
            w2: &p.views[1].w,
        })
        .collect();
    stabilization_loss(&inputs, m).f_mean
}

/// Unsupervised adaptation on unlabeled synchronized pairs, regularized by
/// the rig-constant stabilization and replay of labeled single-view data.
///
/// Nothing here can see camera extrinsics or the pairs' labels: the inputs
/// only carry features and normalization rotations.
pub fn adapt(
    params: EstimatorParams,
    pairs: &[DualViewInputs],
    pretrain_data: &[LabeledView],
    probe: &[DualViewInputs],
    cfg: &AdaptConfig,
) -> Result<TrainOutcome<AdaptRecord>, Error> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("dual-view set is empty"));
    }
    if cfg.enable_pre && pretrain_data.is_empty() {
        return Err(Error::Empty("pre-training set is empty"));
    }
    for p in pairs.iter().chain(probe) {
        check_dims(&params, &p.views[0].x)?;
        check_dims(&params, &p.views[1].x)?;
    }
    for s in pretrain_data {
        check_dims(&params, &s.x)?;
    }

    let mut params = params;
    let mut adam = AdamState::new(params.arch());
    let weights = cfg.weights();
    let mut dual_cycler = BatchCycler::new(pairs.len(), cfg.seed, STREAM_DUAL);
    let mut replay_cycler = BatchCycler::new(pretrain_data.len().max(1), cfg.seed, STREAM_REPLAY);
    let mut log = TrainLog {
        records: Vec::with_capacity(cfg.iterations),
        initial_probe_consistency: if probe.is_empty() {
            None
        } else {
            Some(probe_consistency(&params, probe)?)
        },
    };
    let mut momentum: Option<MomentumState> = None;

    for it in 1..=cfg.iterations {
        let batch: Vec<&DualViewInputs> = dual_cycler.next_batch(cfg.batch_size).into_iter().map(|i| &pairs[i]).collect();
        let n = batch.len() as f64;

        let mut tapes: Vec<(Tape, Tape)> = Vec::with_capacity(batch.len());
        let mut preds: Vec<(Prediction, Prediction)> = Vec::with_capacity(batch.len());
        for p in &batch {
            let (a, ta) = forward_with_tape(&params, &p.views[0].x)?;
            let (b, tb) = forward_with_tape(&params, &p.views[1].x)?;
            preds.push((a, b));
            tapes.push((ta, tb));
        }

        let m = match momentum {
            Some(m) => m,
            None => {
                let seed = MomentumState {
                    c: 0.0,
                    eta: cfg.eta,
                };
                let f0 = batch_rig_constant(&preds, &batch, &seed);
                MomentumState::new(f0.clamp(-1.0, 1.0), cfg.eta)?
            }
        };

        // per-view upstream gradients, in batch order
        let mut upstream: Vec<[PredictionGrad; 2]> = vec![[PredictionGrad::default(); 2]; batch.len()];

        let mut l_mut = 0.0;
        for (k, (a, b)) in preds.iter().enumerate() {
            let ml = mutual_loss(a, b);
            l_mut += ml.value;
            for v in 0..2 {
                upstream[k][v] = upstream[k][v].add(&ml.grads[v].scaled(1.0 / n));
            }
        }
        l_mut /= n;

        let stb_inputs: Vec<StabilizationInput> = preds
            .iter()
            .zip(&batch)
            .map(|((a, b), p)| StabilizationInput {
                pose1: &a.pose,
                pose2: &b.pose,
                w1: &p.views[0].w,
                w2: &p.views[1].w,
            })
            .collect();
        let stb = stabilization_loss(&stb_inputs, &m);
        let l_stb = if cfg.enable_stb {
            for (k, g) in stb.grads.iter().enumerate() {
                for v in 0..2 {
                    upstream[k][v] = upstream[k][v].add(&g[v].scaled(weights.lambda_stb));
                }
            }
            stb.value
        } else {
            0.0
        };

        let mut grads = Gradients::zeros(params.arch());
        for (k, (ta, tb)) in tapes.iter().enumerate() {
            backward_into(&params, ta, &upstream[k][0], &mut grads);
            backward_into(&params, tb, &upstream[k][1], &mut grads);
        }

        let mut l_pre = 0.0;
        if cfg.enable_pre {
            let replay = replay_cycler.next_batch(cfg.batch_size);
            let scale = 1.0 / replay.len() as f64;
            for &i in &replay {
                let (lg, lp) = supervised_step(
                    &params,
                    &pretrain_data[i],
                    cfg.pre_pose_weight,
                    scale * weights.lambda_pre,
                    &mut grads,
                )?;
                l_pre += lg + cfg.pre_pose_weight * lp;
            }
            l_pre *= scale;
        }

        let parts = LossParts { l_mut, l_stb, l_pre };
        let total = total_loss(&parts, &weights).total;
        if !total.is_finite() || !stb.f_mean.is_finite() || !grads.0.is_finite() {
            return Ok(TrainOutcome {
                params,
                adam,
                log,
                aborted: Some(format!("non-finite loss at iteration {it}")),
            });
        }

        if !guarded_step(&mut params, &grads, &mut adam, cfg.lr) {
            return Ok(TrainOutcome {
                params,
                adam,
                log,
                aborted: Some(format!("non-finite parameters after update at iteration {it}")),
            });
        }
        momentum = Some(update_momentum(&m, stb.f_mean));

        let probe_consistency = if !probe.is_empty() && (it % cfg.probe_every == 0 || it == cfg.iterations) {
            Some(probe_consistency(&params, probe)?)
        } else {
            None
        };
        log.records.push(AdaptRecord {
            iteration: it,
            l_mut,
            l_stb,
            l_pre,
            total,
            f: stb.f_mean,
            c: m.c,
            probe_consistency,
        });
    }

    Ok(TrainOutcome {
        params,
        adam,
        log,
        aborted: None,
    })
}

/// Recomputes the momentum trace from logged batch means. Returns the largest
/// deviation from the logged `c` column.
pub fn replay_momentum(records: &[AdaptRecord], eta: f64) -> f64 {
    let Some(first) = records.first() else {
        return 0.0;
    };
    let mut c = first.c;
    let mut worst = 0.0f64;
    for r in records {
        worst = worst.max((r.c - c).abs());
        c = eta * c + (1.0 - eta) * r.f;
    }
    worst
}
