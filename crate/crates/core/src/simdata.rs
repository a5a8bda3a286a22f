//! Synthetic subjects, cameras and dual-view observations.
//!
//! Ground truth is geometrically exact: a subject has one head rotation and
//! one gaze in the world frame, and every camera sees the same subject, so the
//! head-frame gaze agrees across views to machine precision. Observations are
//! a fixed sinusoidal embedding of the normalized-space labels plus Gaussian
//! noise that grows with the head angle.
//!
//! This module also holds the multi-camera label refinement used to clean
//! head pose labels when extrinsics are known.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    euler_from_rotation, head_angle, rotation_euler_partials, rotation_from_euler, EulerPose, Mat3,
    NormalizationTransform, Rotation, UnitVec3, Vec3,
};
use crate::model::FeatureVec;
use crate::Error;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Seed of the appearance embedding. Every dataset shares these constants.
pub const EMBEDDING_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Number of label coordinates fed to the embedding: gaze plus the first two
/// columns of the head rotation.
const EMBED_INPUTS: usize = 9;

const SALT_PRETRAIN: u64 = 0x7072_6574;
const SALT_RIG: u64 = 0x7269_6700;
const SALT_PROBE: u64 = 0x7072_6f62;
const SALT_RIG_GEOMETRY: u64 = 0x6765_6f6d;
const SALT_RECORDING: u64 = 0x7265_636f;

/// `W` on disk: nine floats, row-major.
mod flat9 {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(w: &NormalizationTransform, s: S) -> Result<S::Ok, S::Error> {
        w.w.matrix().to_flat().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NormalizationTransform, D::Error> {
        let flat = <[f64; 9]>::deserialize(d)?;
        Rotation::try_from(Mat3::from_flat(flat))
            .map(NormalizationTransform::new)
            .map_err(D::Error::custom)
    }
}

/// Poses on disk: `[alpha, beta, gamma]`.
mod pose3 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &EulerPose, s: S) -> Result<S::Ok, S::Error> {
        p.as_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<EulerPose, D::Error> {
        <[f64; 3]>::deserialize(d).map(EulerPose::from_array)
    }
}

fn stream_rng(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index);
    rng
}

/// World-to-camera transform: `p_cam = rotation * p_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl CameraExtrinsics {
    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.rotation.apply(p_world) + self.translation
    }

    pub fn to_world(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation.transpose().apply(&(*p_cam - self.translation))
    }

    /// Camera looking at `target` from `center`, with `camera_to_world` giving
    /// its orientation.
    fn from_pose(camera_to_world: Rotation, center: Vec3) -> Self {
        let rotation = camera_to_world.transpose();
        CameraExtrinsics {
            rotation,
            translation: -rotation.apply(&center),
        }
    }

    /// Camera at `distance` from the origin, looking at it, after rotating the
    /// reference camera (on the -z axis) by yaw then pitch about the origin.
    pub fn orbiting(yaw: f64, pitch: f64, distance: f64) -> Self {
        let q = Rotation::about_y(yaw).compose(&Rotation::about_x(pitch));
        let center = q.apply(&Vec3::new(0.0, 0.0, -distance));
        CameraExtrinsics::from_pose(q, center)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub id: String,
    pub cam1: CameraExtrinsics,
    pub cam2: CameraExtrinsics,
    /// Yaw of camera 2 relative to camera 1 about the subject, radians.
    pub relative_yaw: f64,
}

impl Rig {
    pub fn new(id: String, cam1: CameraExtrinsics, cam2: CameraExtrinsics, relative_yaw: f64) -> Result<Self, Error> {
        if cam1.rotation.angle_to(&cam2.rotation) <= 1e-6 {
            return Err(Error::InvalidConfig("rig cameras share an orientation".into()));
        }
        Ok(Rig {
            id,
            cam1,
            cam2,
            relative_yaw,
        })
    }

    /// Camera 1 on the -z axis at `distance`, camera 2 yawed about the subject.
    pub fn yawed(relative_yaw: f64, distance: f64) -> Result<Self, Error> {
        Rig::new(
            format!("yaw{:.1}", relative_yaw.to_degrees()),
            CameraExtrinsics::orbiting(0.0, 0.0, distance),
            CameraExtrinsics::orbiting(relative_yaw, 0.0, distance),
            relative_yaw,
        )
    }

    pub fn from_spec(spec: &RigSpec, seed: u64) -> Result<Self, Error> {
        match *spec {
            RigSpec::Fixed {
                relative_yaw_deg,
                distance,
            } => Rig::yawed(relative_yaw_deg.to_radians(), distance),
            RigSpec::Random { distance } => {
                let mut rng = stream_rng(seed, SALT_RIG_GEOMETRY, 0);
                let yaw = rng.random_range(20f64.to_radians()..=90f64.to_radians());
                let mut rig = Rig::yawed(yaw, distance)?;
                rig.id = format!("random{seed}-{}", rig.id);
                Ok(rig)
            }
        }
    }
}

/// World-frame ground truth of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectState {
    /// Head-to-world rotation.
    pub head_rotation: Rotation,
    /// Head center, meters.
    pub head_position: Vec3,
    pub gaze: UnitVec3,
}

/// Sampling ranges for [`sample_scene`]; angles in radians, offsets in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneRanges {
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
    pub roll: (f64, f64),
    /// Largest angle between the gaze and the head's forward (+z) axis.
    pub gaze_cone: f64,
    /// Head center offset, uniform in `[-j, j]` per axis.
    pub position_jitter: f64,
    /// When set, yaw is normal around 0 with this std, truncated to `yaw`.
    #[serde(default)]
    pub yaw_std: Option<f64>,
}

impl SceneRanges {
    pub fn degrees(yaw: (f64, f64), pitch: (f64, f64), roll: (f64, f64), gaze_cone: f64, jitter: f64) -> Self {
        SceneRanges {
            yaw: (yaw.0.to_radians(), yaw.1.to_radians()),
            pitch: (pitch.0.to_radians(), pitch.1.to_radians()),
            roll: (roll.0.to_radians(), roll.1.to_radians()),
            gaze_cone: gaze_cone.to_radians(),
            position_jitter: jitter,
            yaw_std: None,
        }
    }

    fn validate(&self) -> Result<(), Error> {
        let ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if !(ok(self.yaw) && ok(self.pitch) && ok(self.roll)) {
            return Err(Error::InvalidConfig("empty angle range".into()));
        }
        if !(self.gaze_cone >= 0.0 && self.gaze_cone < PI / 2.0) {
            return Err(Error::InvalidConfig("gaze cone must be in [0, 90) degrees".into()));
        }
        if !(self.position_jitter >= 0.0) {
            return Err(Error::InvalidConfig("position jitter must be >= 0".into()));
        }
        if let Some(s) = self.yaw_std {
            if !(s > 0.0 && s.is_finite()) || self.yaw.0 > 0.0 || self.yaw.1 < 0.0 {
                return Err(Error::InvalidConfig("yaw std needs a positive value and a range around 0".into()));
            }
        }
        if self.pitch.0 <= -PI / 2.0 || self.pitch.1 >= PI / 2.0 {
            return Err(Error::InvalidConfig("pitch range must stay inside (-90, 90) degrees".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

pub fn sample_scene(rng: &mut impl Rng, ranges: &SceneRanges) -> Result<SubjectState, Error> {
    ranges.validate()?;
    let yaw = match ranges.yaw_std {
        None => uniform(rng, ranges.yaw),
        Some(s) => loop {
            let y = s * rng.sample::<f64, _>(rand_distr::StandardNormal);
            if y >= ranges.yaw.0 && y <= ranges.yaw.1 {
                break y;
            }
        },
    };
    let pose = EulerPose::new(
        yaw,
        uniform(rng, ranges.pitch),
        uniform(rng, ranges.roll),
    );
    let head_rotation = rotation_from_euler(&pose);
    let j = ranges.position_jitter;
    let head_position = Vec3::new(uniform(rng, (-j, j)), uniform(rng, (-j, j)), uniform(rng, (-j, j)));
    // polar angle uniform in [0, cone], azimuth uniform
    let polar = uniform(rng, (0.0, ranges.gaze_cone));
    let azimuth = uniform(rng, (0.0, 2.0 * PI));
    let head_gaze = Vec3::new(polar.sin() * azimuth.cos(), polar.sin() * azimuth.sin(), polar.cos());
    let gaze = UnitVec3::new(head_rotation.apply(&head_gaze)).expect("unit by construction");
    Ok(SubjectState {
        head_rotation,
        head_position,
        gaze,
    })
}

/// Ground truth of one subject as seen by one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTruth {
    pub gaze: UnitVec3,
    /// Head-to-camera rotation.
    pub rotation: Rotation,
    pub pose: EulerPose,
    pub head_angle: f64,
    pub head_position: Vec3,
}

pub fn project_to_camera(cam: &CameraExtrinsics, s: &SubjectState) -> Result<ViewTruth, Error> {
    let rotation = cam.rotation.compose(&s.head_rotation);
    let pose = euler_from_rotation(&rotation).ok_or(Error::RejectedSample("gimbal-degenerate head pose"))?;
    Ok(ViewTruth {
        gaze: cam.rotation.apply_unit(&s.gaze),
        rotation,
        pose,
        head_angle: head_angle(&pose),
        head_position: cam.to_camera(&s.head_position),
    })
}

/// Rotation taking camera coordinates to a virtual camera that looks straight
/// at the head center and whose x axis is perpendicular to the head's y axis,
/// which cancels head roll in the normalized frame.
pub fn make_normalization(cam: &CameraExtrinsics, s: &SubjectState) -> Result<NormalizationTransform, Error> {
    let center = cam.to_camera(&s.head_position);
    if center.0[2] <= 0.0 {
        return Err(Error::RejectedSample("subject behind camera"));
    }
    let z = center.try_normalize(1e-12).ok_or(Error::RejectedSample("subject at camera center"))?.vec();
    let head_y = cam.rotation.compose(&s.head_rotation).matrix().col(1);
    let x = head_y
        .cross(&z)
        .try_normalize(1e-9)
        .ok_or(Error::RejectedSample("head y axis along line of sight"))?
        .vec();
    let y = z.cross(&x);
    let w = Rotation::try_from(Mat3::from_rows(x, y, z)).map_err(|_| Error::RejectedSample("normalization not a rotation"))?;
    Ok(NormalizationTransform::new(w))
}

/// Labels of one view in the normalized frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewLabels {
    pub gaze: UnitVec3,
    #[serde(with = "pose3")]
    pub pose: EulerPose,
    pub head_angle: f64,
}

/// Expresses camera-frame truth in the normalized frame of `w`.
pub fn normalize_view(truth: &ViewTruth, w: &NormalizationTransform) -> Result<(ViewLabels, Rotation), Error> {
    let rotation = w.w.compose(&truth.rotation);
    let pose = euler_from_rotation(&rotation).ok_or(Error::RejectedSample("gimbal-degenerate normalized pose"))?;
    Ok((
        ViewLabels {
            gaze: w.w.apply_unit(&truth.gaze),
            pose,
            head_angle: head_angle(&pose),
        },
        rotation,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma0: f64,
    pub sigma1: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma0: 0.05,
            sigma1: 0.4,
        }
    }
}

impl NoiseConfig {
    /// Per-coordinate noise std at head angle `theta`.
    pub fn sigma(&self, theta: f64) -> f64 {
        let r = theta / (PI / 2.0);
        self.sigma0 + self.sigma1 * r * r
    }
}

/// Fixed random map from labels to features: `x = sin(A z + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    dim: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Embedding {
    /// `gaze_scale` and `pose_scale` set the std of the weights on the gaze
    /// and rotation inputs respectively.
    pub fn new(dim: usize, gaze_scale: f64, pose_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDING_SEED);
        let a = (0..dim * EMBED_INPUTS)
            .map(|i| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z * if i % EMBED_INPUTS < 3 { gaze_scale } else { pose_scale }
            })
            .collect();
        let b = (0..dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Embedding { dim, a, b }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clean(&self, gaze: &UnitVec3, rotation: &Rotation) -> Vec<f64> {
        let m = rotation.matrix();
        let z: [f64; EMBED_INPUTS] = {
            let g = gaze.as_array();
            let c0 = m.col(0).0;
            let c1 = m.col(1).0;
            [g[0], g[1], g[2], c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]]
        };
        (0..self.dim)
            .map(|i| {
                let row = &self.a[i * EMBED_INPUTS..(i + 1) * EMBED_INPUTS];
                let s: f64 = row.iter().zip(&z).map(|(a, z)| a * z).sum();
                (s + self.b[i]).sin()
            })
            .collect()
    }
}

/// Embeds normalized-frame labels and adds head-angle-dependent noise.
pub fn appearance_features(
    embedding: &Embedding,
    labels: &ViewLabels,
    rotation: &Rotation,
    rng: &mut impl Rng,
    noise: &NoiseConfig,
) -> FeatureVec {
    let mut x = embedding.clean(&labels.gaze, rotation);
    let sigma = noise.sigma(labels.head_angle);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in &mut x {
            *v += normal.sample(rng);
        }
    }
    FeatureVec(x)
}

/// How the dual-camera rig is placed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum RigSpec {
    Fixed { relative_yaw_deg: f64, distance: f64 },
    Random { distance: f64 },
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec::Fixed {
            relative_yaw_deg: 50.0,
            distance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub dim: usize,
    pub embedding_scale: f64,
    pub pose_embedding_scale: f64,
    pub pretrain_samples: usize,
    pub rig_samples: usize,
    pub probe_samples: usize,
    pub noise: NoiseConfig,
    /// Subject ranges for the single-camera pre-training set (degrees).
    pub pretrain_yaw_deg: (f64, f64),
    /// Concentrates pre-training yaw around frontal; `None` keeps it uniform.
    pub pretrain_yaw_std_deg: Option<f64>,
    pub pretrain_pitch_deg: (f64, f64),
    /// Head yaw in the rig set spans `[-margin, relative_yaw + margin]`.
    pub rig_yaw_margin_deg: f64,
    pub rig_pitch_deg: (f64, f64),
    pub roll_deg: (f64, f64),
    pub gaze_cone_deg: f64,
    pub position_jitter_m: f64,
    pub rig: RigSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            dim: crate::model::DEFAULT_INPUT_DIM,
            embedding_scale: 1.0,
            pose_embedding_scale: 3.0,
            pretrain_samples: 20_000,
            rig_samples: 4_000,
            probe_samples: 512,
            noise: NoiseConfig::default(),
            pretrain_yaw_deg: (-75.0, 75.0),
            pretrain_yaw_std_deg: Some(20.0),
            pretrain_pitch_deg: (-20.0, 20.0),
            rig_yaw_margin_deg: 20.0,
            rig_pitch_deg: (-20.0, 20.0),
            roll_deg: (-10.0, 10.0),
            gaze_cone_deg: 25.0,
            position_jitter_m: 0.05,
            rig: RigSpec::default(),
        }
    }
}

impl SimConfig {
    pub fn pretrain_ranges(&self) -> SceneRanges {
        SceneRanges {
            yaw_std: self.pretrain_yaw_std_deg.map(f64::to_radians),
            ..SceneRanges::degrees(
                self.pretrain_yaw_deg,
                self.pretrain_pitch_deg,
                self.roll_deg,
                self.gaze_cone_deg,
                self.position_jitter_m,
            )
        }
    }

    pub fn rig_ranges(&self, rig: &Rig) -> SceneRanges {
        let m = self.rig_yaw_margin_deg;
        let rel = rig.relative_yaw.to_degrees();
        SceneRanges::degrees(
            (-m, rel + m),
            self.rig_pitch_deg,
            self.roll_deg,
            self.gaze_cone_deg,
            self.position_jitter_m,
        )
    }

    pub fn embedding(&self) -> Embedding {
        Embedding::new(self.dim, self.embedding_scale, self.pose_embedding_scale)
    }

    pub fn rig(&self) -> Result<Rig, Error> {
        Rig::from_spec(&self.rig, self.seed)
    }
}

/// One labeled single-view observation (pre-training data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledView {
    pub id: u64,
    pub x: FeatureVec,
    #[serde(with = "flat9")]
    pub w: NormalizationTransform,
    pub label: ViewLabels,
}

/// What the adaptation loop is allowed to see of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewInput {
    pub x: FeatureVec,
    #[serde(with = "flat9")]
    pub w: NormalizationTransform,
}

/// One unlabeled synchronized pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualViewInputs {
    pub id: u64,
    pub views: [ViewInput; 2],
}

/// Evaluation-only labels of a pair, in each view's normalized frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenLabels {
    pub views: [ViewLabels; 2],
}

/// Simulator state behind a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub subject: SubjectState,
    pub cam1: CameraExtrinsics,
    pub cam2: CameraExtrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualViewSample {
    pub id: u64,
    pub subject_id: u64,
    pub rig_id: String,
    pub views: [ViewInput; 2],
    pub hidden: HiddenLabels,
    pub world: WorldTruth,
}

impl DualViewSample {
    pub fn inputs(&self) -> DualViewInputs {
        DualViewInputs {
            id: self.id,
            views: self.views.clone(),
        }
    }
}

fn labeled_view(
    cam: &CameraExtrinsics,
    s: &SubjectState,
    embedding: &Embedding,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<(ViewInput, ViewLabels), Error> {
    let truth = project_to_camera(cam, s)?;
    let w = make_normalization(cam, s)?;
    let (labels, rotation) = normalize_view(&truth, &w)?;
    let x = appearance_features(embedding, &labels, &rotation, rng, noise);
    Ok((ViewInput { x, w }, labels))
}

const MAX_RESAMPLE: usize = 1000;

pub fn generate_pretrain_sample(cfg: &SimConfig, embedding: &Embedding, index: u64) -> Result<LabeledView, Error> {
    let mut rng = stream_rng(cfg.seed, SALT_PRETRAIN, index);
    let cam = CameraExtrinsics::orbiting(0.0, 0.0, 1.0);
    let ranges = cfg.pretrain_ranges();
    for _ in 0..MAX_RESAMPLE {
        let s = sample_scene(&mut rng, &ranges)?;
        match labeled_view(&cam, &s, embedding, &cfg.noise, &mut rng) {
            Ok((input, label)) => {
                return Ok(LabeledView {
                    id: index,
                    x: input.x,
                    w: input.w,
                    label,
                })
            }
            Err(Error::RejectedSample(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::RejectedSample("could not draw a valid pre-training sample"))
}

pub fn generate_dual_sample(
    cfg: &SimConfig,
    rig: &Rig,
    embedding: &Embedding,
    salt: u64,
    index: u64,
) -> Result<DualViewSample, Error> {
    let mut rng = stream_rng(cfg.seed, salt, index);
    let ranges = cfg.rig_ranges(rig);
    for _ in 0..MAX_RESAMPLE {
        let s = sample_scene(&mut rng, &ranges)?;
        let v1 = labeled_view(&rig.cam1, &s, embedding, &cfg.noise, &mut rng);
        let v2 = labeled_view(&rig.cam2, &s, embedding, &cfg.noise, &mut rng);
        match (v1, v2) {
            (Ok((i1, l1)), Ok((i2, l2))) => {
                return Ok(DualViewSample {
                    id: index,
                    subject_id: index,
                    rig_id: rig.id.clone(),
                    views: [i1, i2],
                    hidden: HiddenLabels { views: [l1, l2] },
                    world: WorldTruth {
                        subject: s,
                        cam1: rig.cam1,
                        cam2: rig.cam2,
                    },
                })
            }
            (Err(Error::RejectedSample(_)), _) | (_, Err(Error::RejectedSample(_))) => continue,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Err(Error::RejectedSample("could not draw a valid dual-view sample"))
}

/// In-memory datasets produced by [`generate_datasets`].
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub rig: Rig,
    pub pretrain: Vec<LabeledView>,
    pub rig_set: Vec<DualViewSample>,
    pub probe: Vec<DualViewSample>,
}

pub fn generate_datasets(cfg: &SimConfig) -> Result<GeneratedData, Error> {
    if cfg.pretrain_samples == 0 || cfg.rig_samples == 0 || cfg.probe_samples == 0 {
        return Err(Error::Empty("requested dataset has zero samples"));
    }
    if cfg.dim == 0 {
        return Err(Error::InvalidConfig("feature dimension must be positive".into()));
    }
    let rig = cfg.rig()?;
    let embedding = cfg.embedding();
    let pretrain = (0..cfg.pretrain_samples as u64)
        .map(|i| generate_pretrain_sample(cfg, &embedding, i))
        .collect::<Result<Vec<_>, _>>()?;
    let rig_set = (0..cfg.rig_samples as u64)
        .map(|i| generate_dual_sample(cfg, &rig, &embedding, SALT_RIG, i))
        .collect::<Result<Vec<_>, _>>()?;
    let probe = (0..cfg.probe_samples as u64)
        .map(|i| generate_dual_sample(cfg, &rig, &embedding, SALT_PROBE, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GeneratedData {
        rig,
        pretrain,
        rig_set,
        probe,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Pretrain,
    Dual,
    Recording,
}

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub kind: DatasetKind,
    pub count: usize,
    pub d: usize,
    pub noise: NoiseConfig,
    pub seed: u64,
    #[serde(default)]
    pub rig: Option<Rig>,
    /// Resolved configuration that produced the file.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &DatasetHeader, records: &[T]) -> Result<(), Error> {
    if records.is_empty() {
        return Err(Error::Empty("refusing to write an empty dataset"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut put = |v: String| -> Result<(), Error> {
        out.write_all(v.as_bytes()).map_err(|e| Error::io(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))
    };
    put(serde_json::to_string(header).map_err(|e| Error::Malformed(e.to_string()))?)?;
    for r in records {
        put(serde_json::to_string(r).map_err(|e| Error::Malformed(e.to_string()))?)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset file. `T` decides which fields are parsed; unknown fields
/// (such as hidden labels) are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, kind: DatasetKind) -> Result<(DatasetHeader, Vec<T>), Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Malformed(format!("{}: missing header", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| Error::Malformed(format!("{}: header: {e}", path.display())))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Malformed(format!("unsupported dataset format {}", header.format_version)));
    }
    if header.kind != kind {
        return Err(Error::Malformed(format!(
            "{}: expected a {kind:?} dataset, found {:?}",
            path.display(),
            header.kind
        )));
    }
    let mut records = Vec::with_capacity(header.count);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("{}: record {}: {e}", path.display(), n + 1)))?;
        records.push(r);
    }
    if records.len() != header.count {
        return Err(Error::Malformed(format!(
            "{}: header announces {} records, found {}",
            path.display(),
            header.count,
            records.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::Empty("dataset file has no records"));
    }
    Ok((header, records))
}

/// Loads only the model inputs of a dual-view file; labels and simulator
/// state never leave the parser.
pub fn load_unlabeled(path: &Path) -> Result<(DatasetHeader, Vec<DualViewInputs>), Error> {
    read_jsonl(path, DatasetKind::Dual)
}

pub fn load_dual(path: &Path) -> Result<(DatasetHeader, Vec<DualViewSample>), Error> {
    read_jsonl(path, DatasetKind::Dual)
}

pub fn load_pretrain(path: &Path) -> Result<(DatasetHeader, Vec<LabeledView>), Error> {
    read_jsonl(path, DatasetKind::Pretrain)
}

pub const PRETRAIN_FILE: &str = "pretrain.jsonl";
pub const RIG_FILE: &str = "rig.jsonl";
pub const PROBE_FILE: &str = "probe.jsonl";

/// Writes the three dataset files into `dir`.
pub fn write_datasets(dir: &Path, cfg: &SimConfig, data: &GeneratedData, provenance: &serde_json::Value) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = |kind, count| DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        kind,
        count,
        d: cfg.dim,
        noise: cfg.noise,
        seed: cfg.seed,
        rig: if kind == DatasetKind::Dual { Some(data.rig.clone()) } else { None },
        provenance: provenance.clone(),
    };
    write_jsonl(&dir.join(PRETRAIN_FILE), &header(DatasetKind::Pretrain, data.pretrain.len()), &data.pretrain)?;
    write_jsonl(&dir.join(RIG_FILE), &header(DatasetKind::Dual, data.rig_set.len()), &data.rig_set)?;
    write_jsonl(&dir.join(PROBE_FILE), &header(DatasetKind::Dual, data.probe.len()), &data.probe)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Multi-camera label refinement
// ---------------------------------------------------------------------------

/// One camera's (possibly noisy) labels, all in that camera's frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraLabel {
    pub head_position: Vec3,
    pub head_rotation: EulerPose,
    pub gaze_target: Vec3,
}

/// One frame seen by `K >= 2` calibrated cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiCamRecording {
    pub frame: u64,
    pub cameras: Vec<CameraExtrinsics>,
    pub labels: Vec<CameraLabel>,
}

impl MultiCamRecording {
    pub fn validate(&self) -> Result<(), Error> {
        if self.cameras.len() < 2 {
            return Err(Error::InvalidConfig("recording needs at least two cameras".into()));
        }
        if self.cameras.len() != self.labels.len() {
            return Err(Error::Malformed("camera and label counts differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordingConfig {
    pub seed: u64,
    pub frames: usize,
    pub cameras: usize,
    pub rotation_noise_deg: f64,
    pub position_noise_m: f64,
}

impl Default for RecordingConfig {
    fn default() -> Self {
        RecordingConfig {
            seed: 1,
            frames: 20,
            cameras: 18,
            rotation_noise_deg: 2.0,
            position_noise_m: 0.01,
        }
    }
}

/// Cameras on a yaw/pitch grid around the subject at 1 m.
pub fn camera_dome(count: usize) -> Vec<CameraExtrinsics> {
    let rows = 3usize;
    let cols = count.div_ceil(rows);
    (0..count)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let yaw = if cols > 1 { -60.0 + 120.0 * c as f64 / (cols - 1) as f64 } else { 0.0 };
            let pitch = -25.0 + 25.0 * r as f64;
            CameraExtrinsics::orbiting(yaw.to_radians(), pitch.to_radians(), 1.0)
        })
        .collect()
}

/// Synthetic recordings with Gaussian noise on each camera's head position
/// and head angles. Returns the recordings and their noise-free world truth.
pub fn generate_recordings(cfg: &RecordingConfig) -> Result<(Vec<MultiCamRecording>, Vec<SubjectState>), Error> {
    if cfg.frames == 0 {
        return Err(Error::Empty("recording with zero frames"));
    }
    if cfg.cameras < 2 {
        return Err(Error::InvalidConfig("recording needs at least two cameras".into()));
    }
    let cameras = camera_dome(cfg.cameras);
    let ranges = SceneRanges::degrees((-20.0, 20.0), (-15.0, 15.0), (-10.0, 10.0), 25.0, 0.05);
    let rot_noise = Normal::new(0.0, cfg.rotation_noise_deg.to_radians())
        .map_err(|_| Error::InvalidConfig("rotation noise".into()))?;
    let pos_noise = Normal::new(0.0, cfg.position_noise_m).map_err(|_| Error::InvalidConfig("position noise".into()))?;
    let mut recs = Vec::with_capacity(cfg.frames);
    let mut truths = Vec::with_capacity(cfg.frames);
    for frame in 0..cfg.frames as u64 {
        let mut rng = stream_rng(cfg.seed, SALT_RECORDING, frame);
        let s = sample_scene(&mut rng, &ranges)?;
        let target_world = s.head_position + s.gaze.vec().scale(rng.random_range(0.8..1.5));
        let mut labels = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let truth = project_to_camera(cam, &s)?;
            let jitter = Vec3::new(pos_noise.sample(&mut rng), pos_noise.sample(&mut rng), pos_noise.sample(&mut rng));
            let h = truth.pose.as_array();
            labels.push(CameraLabel {
                head_position: truth.head_position + jitter,
                head_rotation: EulerPose::new(
                    h[0] + rot_noise.sample(&mut rng),
                    h[1] + rot_noise.sample(&mut rng),
                    h[2] + rot_noise.sample(&mut rng),
                ),
                gaze_target: cam.to_camera(&target_world),
            });
        }
        recs.push(MultiCamRecording {
            frame,
            cameras: cameras.clone(),
            labels,
        });
        truths.push(s);
    }
    Ok((recs, truths))
}

/// Writes recordings as a dataset file. The header's `d` holds the camera
/// count; recordings carry no feature noise.
pub fn write_recordings(
    path: &Path,
    recs: &[MultiCamRecording],
    seed: u64,
    provenance: &serde_json::Value,
) -> Result<(), Error> {
    for r in recs {
        r.validate()?;
    }
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        kind: DatasetKind::Recording,
        count: recs.len(),
        d: recs.first().map_or(0, |r| r.cameras.len()),
        noise: NoiseConfig { sigma0: 0.0, sigma1: 0.0 },
        seed,
        rig: None,
        provenance: provenance.clone(),
    };
    write_jsonl(path, &header, recs)
}

pub fn load_recordings(path: &Path) -> Result<(DatasetHeader, Vec<MultiCamRecording>), Error> {
    let (h, recs): (DatasetHeader, Vec<MultiCamRecording>) = read_jsonl(path, DatasetKind::Recording)?;
    for r in &recs {
        r.validate()?;
    }
    Ok((h, recs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedPositions {
    /// Mean of the per-camera positions mapped to the world frame.
    pub world: Vec3,
    /// `world` mapped back into each camera.
    pub per_camera: Vec<Vec3>,
}

pub fn refine_head_positions(rec: &MultiCamRecording) -> Result<RefinedPositions, Error> {
    rec.validate()?;
    let k = rec.cameras.len() as f64;
    let mut sum = Vec3::ZERO;
    for (cam, lbl) in rec.cameras.iter().zip(&rec.labels) {
        sum = sum + cam.to_world(&lbl.head_position);
    }
    let world = sum.scale(1.0 / k);
    let per_camera = rec.cameras.iter().map(|c| c.to_camera(&world)).collect();
    Ok(RefinedPositions { world, per_camera })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub delta: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Smoothing of `|x|` as `sqrt(x^2 + eps^2)`.
    pub smoothing: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            delta: 1e-3,
            steps: 2000,
            step_size: 1e-2,
            smoothing: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRefinement {
    pub corrections: Vec<[f64; 3]>,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

/// Gaze directions from each camera's head position to its gaze target.
pub fn camera_gazes(rec: &MultiCamRecording, positions: &[Vec3]) -> Result<Vec<UnitVec3>, Error> {
    rec.labels
        .iter()
        .zip(positions)
        .map(|(l, t)| UnitVec3::new(l.gaze_target - *t).ok_or(Error::RejectedSample("gaze target at head position")))
        .collect()
}

/// Trace of the covariance of a set of 3-vectors (population normalization).
pub fn spread(vs: &[Vec3]) -> f64 {
    let n = vs.len() as f64;
    let mean = vs.iter().fold(Vec3::ZERO, |a, v| a + *v).scale(1.0 / n);
    vs.iter().map(|v| (*v - mean).dot(&(*v - mean))).sum::<f64>() / n
}

/// Head-frame gazes `R(h_i)^T g_i`.
pub fn head_frame_gazes(rotations: &[EulerPose], gazes: &[UnitVec3]) -> Vec<Vec3> {
    rotations
        .iter()
        .zip(gazes)
        .map(|(h, g)| rotation_from_euler(h).matrix().tr_mul_vec(&g.vec()))
        .collect()
}

fn corrected(rec: &MultiCamRecording, corr: &[[f64; 3]]) -> Vec<EulerPose> {
    rec.labels
        .iter()
        .zip(corr)
        .map(|(l, d)| {
            let h = l.head_rotation.as_array();
            EulerPose::new(h[0] + d[0], h[1] + d[1], h[2] + d[2])
        })
        .collect()
}

fn refine_objective(rec: &MultiCamRecording, gazes: &[UnitVec3], corr: &[[f64; 3]], cfg: &RefineConfig) -> f64 {
    let vs = head_frame_gazes(&corrected(rec, corr), gazes);
    let eps2 = cfg.smoothing * cfg.smoothing;
    let reg: f64 = corr.iter().flatten().map(|d| (d * d + eps2).sqrt()).sum();
    spread(&vs) + cfg.delta * reg
}

fn refine_gradient(rec: &MultiCamRecording, gazes: &[UnitVec3], corr: &[[f64; 3]], cfg: &RefineConfig) -> Vec<[f64; 3]> {
    let poses = corrected(rec, corr);
    let vs = head_frame_gazes(&poses, gazes);
    let n = vs.len() as f64;
    let mean = vs.iter().fold(Vec3::ZERO, |a, v| a + *v).scale(1.0 / n);
    let eps2 = cfg.smoothing * cfg.smoothing;
    poses
        .iter()
        .zip(gazes)
        .zip(&vs)
        .zip(corr)
        .map(|(((p, g), v), d)| {
            let dv = (*v - mean).scale(2.0 / n);
            let partials = rotation_euler_partials(p);
            let mut out = [0.0; 3];
            for k in 0..3 {
                out[k] = dv.dot(&partials[k].tr_mul_vec(&g.vec())) + cfg.delta * d[k] / (d[k] * d[k] + eps2).sqrt();
            }
            out
        })
        .collect()
}

/// Finds per-camera angle corrections minimizing the cross-camera spread of
/// head-frame gazes plus an L1 penalty, by gradient descent with backtracking
/// (the objective never increases).
pub fn refine_head_rotations(
    rec: &MultiCamRecording,
    positions: &RefinedPositions,
    cfg: &RefineConfig,
) -> Result<RotationRefinement, Error> {
    rec.validate()?;
    if !(cfg.delta >= 0.0) || !(cfg.step_size > 0.0) {
        return Err(Error::InvalidConfig("delta must be >= 0 and step size > 0".into()));
    }
    let gazes = camera_gazes(rec, &positions.per_camera)?;
    let mut corr = vec![[0.0; 3]; rec.labels.len()];
    let mut obj = refine_objective(rec, &gazes, &corr, cfg);
    if !obj.is_finite() {
        return Err(Error::NonFinite("refinement objective".into()));
    }
    let objective_before = obj;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(obj);
    for _ in 0..cfg.steps {
        let grad = refine_gradient(rec, &gazes, &corr, cfg);
        let mut step = cfg.step_size;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<[f64; 3]> = corr
                .iter()
                .zip(&grad)
                .map(|(c, g)| [c[0] - step * g[0], c[1] - step * g[1], c[2] - step * g[2]])
                .collect();
            let cand_obj = refine_objective(rec, &gazes, &cand, cfg);
            if !cand_obj.is_finite() {
                return Err(Error::NonFinite("refinement objective".into()));
            }
            if cand_obj <= obj {
                corr = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        trace.push(obj);
        if !accepted {
            break;
        }
    }
    Ok(RotationRefinement {
        corrections: corr,
        objective_before,
        objective_after: obj,
        trace,
    })
}

/// Refined labels of one frame plus before/after spread of head-frame gazes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedFrame {
    pub frame: u64,
    pub positions: RefinedPositions,
    pub rotations: Vec<EulerPose>,
    pub corrections: Vec<[f64; 3]>,
    pub spread_before: f64,
    pub spread_after: f64,
    pub objective_before: f64,
    pub objective_after: f64,
}

/// Position refinement followed by rotation refinement.
pub fn refine_recording(rec: &MultiCamRecording, cfg: &RefineConfig) -> Result<RefinedFrame, Error> {
    rec.validate()?;
    let raw_positions: Vec<Vec3> = rec.labels.iter().map(|l| l.head_position).collect();
    let raw_rot: Vec<EulerPose> = rec.labels.iter().map(|l| l.head_rotation).collect();
    let spread_before = spread(&head_frame_gazes(&raw_rot, &camera_gazes(rec, &raw_positions)?));
    let positions = refine_head_positions(rec)?;
    let rot = refine_head_rotations(rec, &positions, cfg)?;
    let rotations = corrected(rec, &rot.corrections);
    let spread_after = spread(&head_frame_gazes(&rotations, &camera_gazes(rec, &positions.per_camera)?));
    Ok(RefinedFrame {
        frame: rec.frame,
        positions,
        rotations,
        corrections: rot.corrections,
        spread_before,
        spread_after,
        objective_before: rot.objective_before,
        objective_after: rot.objective_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{angle_between, denormalize, to_head_cs};

    fn small_cfg() -> SimConfig {
        SimConfig {
            pretrain_samples: 50,
            rig_samples: 40,
            probe_samples: 10,
            ..SimConfig::default()
        }
    }

    #[test]
    fn degenerate_ranges_give_canonical_subject() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = SceneRanges::degrees((0.0, 0.0), (0.0, 0.0), (0.0, 0.0), 0.0, 0.0);
        let s = sample_scene(&mut rng, &r).unwrap();
        assert_eq!(*s.head_rotation.matrix(), Mat3::IDENTITY);
        assert!((s.gaze.vec() - Vec3::Z).norm() < 1e-15);
        assert_eq!(s.head_position, Vec3::ZERO);
    }

    #[test]
    fn samples_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = SceneRanges::degrees((-30.0, 10.0), (-20.0, 20.0), (-5.0, 5.0), 25.0, 0.05);
        for _ in 0..10_000 {
            let s = sample_scene(&mut rng, &r).unwrap();
            let p = euler_from_rotation(&s.head_rotation).unwrap();
            assert!(p.alpha >= r.yaw.0 - 1e-12 && p.alpha <= r.yaw.1 + 1e-12);
            assert!(p.beta >= r.pitch.0 - 1e-12 && p.beta <= r.pitch.1 + 1e-12);
            assert!(p.gamma >= r.roll.0 - 1e-12 && p.gamma <= r.roll.1 + 1e-12);
            let fwd = s.head_rotation.apply_unit(&UnitVec3::Z);
            assert!(angle_between(&fwd, &s.gaze) <= r.gaze_cone + 1e-9);
            assert!(s.head_position.0.iter().all(|v| v.abs() <= 0.05));
        }
    }

    #[test]
    fn empty_range_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = SceneRanges::degrees((10.0, -10.0), (0.0, 0.0), (0.0, 0.0), 0.0, 0.0);
        assert!(matches!(sample_scene(&mut rng, &r), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn same_seed_same_scenes() {
        let r = SceneRanges::degrees((-30.0, 30.0), (-20.0, 20.0), (0.0, 0.0), 20.0, 0.05);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| sample_scene(&mut rng, &r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn identity_camera_keeps_world_labels() {
        let cam = CameraExtrinsics {
            rotation: Rotation::IDENTITY,
            translation: Vec3::new(0.0, 0.0, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = SceneRanges::degrees((-30.0, 30.0), (-20.0, 20.0), (-5.0, 5.0), 20.0, 0.0);
        let s = sample_scene(&mut rng, &r).unwrap();
        let t = project_to_camera(&cam, &s).unwrap();
        assert_eq!(t.gaze, s.gaze);
        assert_eq!(t.rotation.matrix(), s.head_rotation.matrix());
    }

    #[test]
    fn camera_aligned_with_head_sees_zero_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = SceneRanges::degrees((-30.0, 30.0), (-20.0, 20.0), (-5.0, 5.0), 20.0, 0.0);
        let s = sample_scene(&mut rng, &r).unwrap();
        let cam = CameraExtrinsics {
            rotation: s.head_rotation.transpose(),
            translation: Vec3::new(0.0, 0.0, 1.0),
        };
        let t = project_to_camera(&cam, &s).unwrap();
        assert!(t.rotation.matrix().max_abs_diff(&Mat3::IDENTITY) < 1e-12);
        assert!(t.head_angle < 1e-3);
    }

    #[test]
    fn rig_views_agree_in_head_frame() {
        let rig = Rig::yawed(50f64.to_radians(), 1.0).unwrap();
        let cfg = SimConfig::default();
        let r = cfg.rig_ranges(&rig);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let s = sample_scene(&mut rng, &r).unwrap();
            let a = project_to_camera(&rig.cam1, &s).unwrap();
            let b = project_to_camera(&rig.cam2, &s).unwrap();
            let ha = to_head_cs(&a.rotation, &a.gaze);
            let hb = to_head_cs(&b.rotation, &b.gaze);
            assert!((ha.vec() - hb.vec()).norm() < 1e-12);
        }
    }

    #[test]
    fn centered_head_gives_identity_normalization() {
        let cam = CameraExtrinsics::orbiting(0.0, 0.0, 1.0);
        let s = SubjectState {
            head_rotation: Rotation::IDENTITY,
            head_position: Vec3::ZERO,
            gaze: UnitVec3::Z,
        };
        let w = make_normalization(&cam, &s).unwrap();
        assert!(w.w.matrix().max_abs_diff(&Mat3::IDENTITY) < 1e-15);
    }

    #[test]
    fn normalization_rejects_subject_behind_camera() {
        let cam = CameraExtrinsics::orbiting(PI, 0.0, 1.0);
        let s = SubjectState {
            head_rotation: Rotation::IDENTITY,
            head_position: Vec3::new(0.0, 0.0, 3.0),
            gaze: UnitVec3::Z,
        };
        assert!(matches!(make_normalization(&cam, &s), Err(Error::RejectedSample(_))));
    }

    #[test]
    fn normalization_round_trips_and_removes_roll() {
        let rig = Rig::yawed(50f64.to_radians(), 1.0).unwrap();
        let cfg = SimConfig::default();
        let r = cfg.rig_ranges(&rig);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..2000 {
            let s = sample_scene(&mut rng, &r).unwrap();
            for cam in [&rig.cam1, &rig.cam2] {
                let w = make_normalization(cam, &s).unwrap();
                let v = s.gaze.vec();
                let back = w.w.transpose().apply(&w.w.apply(&v));
                assert!((back - v).norm() < 1e-12);
                let t = project_to_camera(cam, &s).unwrap();
                let (lbl, _) = normalize_view(&t, &w).unwrap();
                assert!(lbl.pose.gamma.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn denormalized_rig_constant_is_constant() {
        let rig = Rig::yawed(50f64.to_radians(), 1.0).unwrap();
        let data = generate_datasets(&small_cfg()).unwrap();
        let fs: Vec<f64> = data
            .rig_set
            .iter()
            .map(|s| {
                let a = denormalize(&s.views[0].w, &rotation_from_euler(&s.hidden.views[0].pose.without_roll()));
                let b = denormalize(&s.views[1].w, &rotation_from_euler(&s.hidden.views[1].pose.without_roll()));
                (*a.matrix() * b.matrix().transpose()).0[2][2]
            })
            .collect();
        let expect = rig.cam1.rotation.matrix().clone() * rig.cam2.rotation.matrix().transpose();
        for f in &fs {
            assert!((f - expect.0[2][2]).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_free_features_are_deterministic() {
        let emb = Embedding::new(32, 1.0, 1.0);
        let lbl = ViewLabels {
            gaze: UnitVec3::Z,
            pose: EulerPose::default(),
            head_angle: 0.0,
        };
        let quiet = NoiseConfig { sigma0: 0.0, sigma1: 0.0 };
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = appearance_features(&emb, &lbl, &Rotation::IDENTITY, &mut r1, &quiet);
        let b = appearance_features(&emb, &lbl, &Rotation::IDENTITY, &mut r2, &quiet);
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
    }

    #[test]
    fn noise_law() {
        let n = NoiseConfig::default();
        assert_eq!(n.sigma(0.0), 0.05);
        assert!((n.sigma(PI / 2.0) - 0.45).abs() < 1e-15);
        assert!((n.sigma(PI / 4.0) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_datasets(&small_cfg()).unwrap();
        let b = generate_datasets(&small_cfg()).unwrap();
        assert_eq!(a.pretrain, b.pretrain);
        assert_eq!(a.rig_set, b.rig_set);
        assert_eq!(a.probe, b.probe);
        // per-sample streams: sample i does not depend on how many were drawn
        let emb = small_cfg().embedding();
        let again = generate_dual_sample(&small_cfg(), &a.rig, &emb, SALT_RIG, 7).unwrap();
        assert_eq!(again, a.rig_set[7]);
    }

    #[test]
    fn zero_samples_rejected() {
        let cfg = SimConfig {
            rig_samples: 0,
            ..small_cfg()
        };
        assert!(matches!(generate_datasets(&cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn pretrain_set_is_more_frontal_than_rig_set() {
        let cfg = SimConfig { pretrain_samples: 400, rig_samples: 400, ..small_cfg() };
        let data = generate_datasets(&cfg).unwrap();
        let mean = |it: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = it.collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let pre = mean(&mut data.pretrain.iter().map(|v| v.label.head_angle));
        let rig = mean(&mut data.rig_set.iter().flat_map(|s| s.hidden.views.iter().map(|l| l.head_angle)));
        assert!(pre < 0.75 * rig, "pretrain {pre} rig {rig}");
        let wide = data.pretrain.iter().filter(|v| v.label.head_angle > 45f64.to_radians()).count();
        assert!(wide > 0 && wide < 40, "{wide}");
    }

    #[test]
    fn files_round_trip_and_hide_labels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let data = generate_datasets(&cfg).unwrap();
        write_datasets(dir.path(), &cfg, &data, &serde_json::json!({"seed": 1})).unwrap();
        let (h, dual) = load_dual(&dir.path().join(RIG_FILE)).unwrap();
        assert_eq!(h.count, 40);
        assert_eq!(dual, data.rig_set);
        let (_, unl) = load_unlabeled(&dir.path().join(RIG_FILE)).unwrap();
        assert_eq!(unl[3], data.rig_set[3].inputs());
        let (_, pre) = load_pretrain(&dir.path().join(PRETRAIN_FILE)).unwrap();
        assert_eq!(pre, data.pretrain);
        let text = std::fs::read_to_string(dir.path().join(PROBE_FILE)).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(matches!(
            load_pretrain(&dir.path().join(RIG_FILE)),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn random_rig_yaw_in_range() {
        for seed in 0..50 {
            let rig = Rig::from_spec(&RigSpec::Random { distance: 1.0 }, seed).unwrap();
            let deg = rig.relative_yaw.to_degrees();
            assert!((20.0..=90.0).contains(&deg));
            assert!((rig.cam1.rotation.angle_to(&rig.cam2.rotation) - rig.relative_yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn rig_rejects_identical_cameras() {
        let c = CameraExtrinsics::orbiting(0.0, 0.0, 1.0);
        assert!(Rig::new("x".into(), c, c, 0.0).is_err());
    }

    fn two_camera_recording(p1: Vec3, p2: Vec3) -> MultiCamRecording {
        let cam = CameraExtrinsics {
            rotation: Rotation::IDENTITY,
            translation: Vec3::ZERO,
        };
        let lbl = |p| CameraLabel {
            head_position: p,
            head_rotation: EulerPose::default(),
            gaze_target: Vec3::new(0.0, 0.0, 2.0),
        };
        MultiCamRecording {
            frame: 0,
            cameras: vec![cam, cam],
            labels: vec![lbl(p1), lbl(p2)],
        }
    }

    #[test]
    fn position_refinement_is_the_mean() {
        let rec = two_camera_recording(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 0.8));
        let r = refine_head_positions(&rec).unwrap();
        assert!((r.world - Vec3::new(0.0, 0.0, 0.9)).norm() < 1e-15);

        let agree = two_camera_recording(Vec3::new(0.1, 0.0, 1.0), Vec3::new(0.1, 0.0, 1.0));
        let r = refine_head_positions(&agree).unwrap();
        assert_eq!(r.per_camera[0], Vec3::new(0.1, 0.0, 1.0));
    }

    #[test]
    fn position_refinement_permutation_invariant() {
        let (recs, _) = generate_recordings(&RecordingConfig::default()).unwrap();
        let rec = &recs[0];
        let mut perm = rec.clone();
        perm.cameras.reverse();
        perm.labels.reverse();
        let a = refine_head_positions(rec).unwrap();
        let b = refine_head_positions(&perm).unwrap();
        assert!((a.world - b.world).norm() < 1e-15);
    }

    #[test]
    fn rotation_refinement_noise_free_stays_put() {
        let cfg = RecordingConfig {
            rotation_noise_deg: 0.0,
            position_noise_m: 0.0,
            frames: 3,
            ..RecordingConfig::default()
        };
        let (recs, _) = generate_recordings(&cfg).unwrap();
        for rec in &recs {
            let out = refine_recording(rec, &RefineConfig::default()).unwrap();
            let worst = out.corrections.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-3);
            assert!(out.spread_before < 1e-20);
        }
    }

    #[test]
    fn rotation_refinement_descends() {
        let cfg = RecordingConfig {
            frames: 2,
            ..RecordingConfig::default()
        };
        let (recs, _) = generate_recordings(&cfg).unwrap();
        let rc = RefineConfig {
            steps: 300,
            ..RefineConfig::default()
        };
        for rec in &recs {
            let pos = refine_head_positions(rec).unwrap();
            let out = refine_head_rotations(rec, &pos, &rc).unwrap();
            for w in out.trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
            assert!(out.objective_after < out.objective_before);
        }
    }

    #[test]
    fn refine_gradient_matches_finite_differences() {
        let (recs, _) = generate_recordings(&RecordingConfig { frames: 1, ..RecordingConfig::default() }).unwrap();
        let rec = &recs[0];
        let pos = refine_head_positions(rec).unwrap();
        let gazes = camera_gazes(rec, &pos.per_camera).unwrap();
        let cfg = RefineConfig { smoothing: 1e-2, ..RefineConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corr: Vec<[f64; 3]> = (0..rec.labels.len())
            .map(|_| [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)])
            .collect();
        let g = refine_gradient(rec, &gazes, &corr, &cfg);
        let h = 1e-6;
        for i in 0..corr.len() {
            for k in 0..3 {
                let mut p = corr.clone();
                p[i][k] += h;
                let mut m = corr.clone();
                m[i][k] -= h;
                let fd = (refine_objective(rec, &gazes, &p, &cfg) - refine_objective(rec, &gazes, &m, &cfg)) / (2.0 * h);
                assert!((fd - g[i][k]).abs() < 1e-7, "{i},{k}: {fd} vs {}", g[i][k]);
            }
        }
    }

    #[test]
    fn recording_needs_two_cameras() {
        let mut rec = two_camera_recording(Vec3::Z, Vec3::Z);
        rec.cameras.pop();
        rec.labels.pop();
        assert!(refine_head_positions(&rec).is_err());
    }
}
