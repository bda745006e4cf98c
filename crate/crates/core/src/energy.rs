//! Scene state (per-frame placements plus scenelet assignment) and the
//! five-term fitting energy with analytic gradients.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::db::SceneletDb;
use crate::error::{Error, Result};
use crate::geometry::{
    angle_distance, occlusion_signed_distance_with_grad, perp, rot2, smoothed_ramp, Camera, Placement, PlacedObject, PoseGrad,
    Vec2, Vec3,
};
use crate::skeleton::{Joint, Pose, NUM_JOINTS};

/// One frame of 2D detections with an optional pelvis-centered 3D guess.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedFrame {
    pub joints_px: [Vec2; NUM_JOINTS],
    pub confidence: [f64; NUM_JOINTS],
    pub local_pose: Option<Pose>,
    pub valid: bool,
}

impl ObservedFrame {
    pub fn mean_confidence(&self) -> f64 {
        if !self.valid {
            return 0.0;
        }
        self.confidence.iter().sum::<f64>() / NUM_JOINTS as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTrack {
    pub frame_rate: f64,
    pub frames: Vec<ObservedFrame>,
    /// Contiguous frame ranges, one per actor, covering all frames in order.
    pub actors: Vec<Range<usize>>,
}

impl ObservationTrack {
    pub fn single_actor(frame_rate: f64, frames: Vec<ObservedFrame>) -> Self {
        let n = frames.len();
        ObservationTrack {
            frame_rate,
            frames,
            actors: vec![0..n],
        }
    }

    /// Concatenates per-actor tracks; smoothness never links two actors.
    pub fn concat(tracks: Vec<ObservationTrack>) -> Result<Self> {
        let mut frames = Vec::new();
        let mut actors = Vec::new();
        let mut rate = None;
        for t in tracks {
            if let Some(r) = rate {
                if r != t.frame_rate {
                    return Err(Error::InvalidInput("actor tracks differ in frame rate".into()));
                }
            }
            rate = Some(t.frame_rate);
            let off = frames.len();
            for a in &t.actors {
                actors.push(a.start + off..a.end + off);
            }
            frames.extend(t.frames);
        }
        Ok(ObservationTrack {
            frame_rate: rate.unwrap_or(10.0),
            frames,
            actors,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidInput("track has no frames".into()));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidInput(format!("frame {t}: confidence outside [0, 1]")));
            }
        }
        let mut next = 0;
        for a in &self.actors {
            if a.start != next || a.end <= a.start {
                return Err(Error::InvalidInput("actor ranges must tile the track".into()));
            }
            next = a.end;
        }
        if next != self.frames.len() {
            return Err(Error::InvalidInput("actor ranges must tile the track".into()));
        }
        Ok(())
    }

    /// Effective confidence: zero on invalid frames.
    pub fn confidence(&self, t: usize, k: usize) -> f64 {
        let f = &self.frames[t];
        if f.valid {
            f.confidence[k]
        } else {
            0.0
        }
    }

    pub fn actor_of(&self, t: usize) -> usize {
        self.actors.iter().position(|r| r.contains(&t)).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AssignedScenelet {
    /// Database index.
    pub scenelet: usize,
    /// First covered video frame.
    pub start: usize,
}

/// Which scenelet starts at which frame (the sparse form of the binary
/// assignment matrix).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Assignment {
    entries: Vec<AssignedScenelet>,
}

impl Assignment {
    pub fn new(mut entries: Vec<AssignedScenelet>) -> Self {
        entries.sort();
        Assignment { entries }
    }

    pub fn empty() -> Self {
        Assignment::default()
    }

    pub fn entries(&self) -> &[AssignedScenelet] {
        &self.entries
    }

    pub fn push(&mut self, e: AssignedScenelet) {
        self.entries.push(e);
        self.entries.sort();
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn span(&self, db: &SceneletDb, i: usize) -> Range<usize> {
        let e = self.entries[i];
        e.start..e.start + db.entries[e.scenelet].scenelet.len()
    }

    /// Number of scenelets covering each frame.
    pub fn eta(&self, db: &SceneletDb, n_frames: usize) -> Vec<usize> {
        let mut eta = vec![0; n_frames];
        for i in 0..self.entries.len() {
            for t in self.span(db, i) {
                if t < n_frames {
                    eta[t] += 1;
                }
            }
        }
        eta
    }

    /// Checks non-overlap, that every span fits in the video and stays
    /// within one actor.
    pub fn validate(&self, db: &SceneletDb, track: &ObservationTrack) -> Result<()> {
        let n = track.len();
        for (i, e) in self.entries.iter().enumerate() {
            if e.scenelet >= db.len() {
                return Err(Error::InvalidInput(format!("unknown scenelet index {}", e.scenelet)));
            }
            let span = self.span(db, i);
            if span.end > n {
                return Err(Error::InvalidInput(format!(
                    "scenelet at frame {} runs past the end of the video",
                    e.start
                )));
            }
            if track.actor_of(span.start) != track.actor_of(span.end - 1) {
                return Err(Error::InvalidInput(format!(
                    "scenelet at frame {} spans two actors",
                    e.start
                )));
            }
        }
        for (t, eta) in self.eta(db, n).into_iter().enumerate() {
            if eta > 1 {
                return Err(Error::OverlappingAssignment { frame: t, eta });
            }
        }
        Ok(())
    }

    /// Per frame: the covering entry index and the offset into its clip.
    pub fn coverage(&self, db: &SceneletDb, n_frames: usize) -> Vec<Option<(usize, usize)>> {
        let mut cov = vec![None; n_frames];
        for i in 0..self.entries.len() {
            let span = self.span(db, i);
            for t in span.clone() {
                if t < n_frames {
                    cov[t] = Some((i, t - span.start));
                }
            }
        }
        cov
    }
}

/// The optimization variables: one placement per frame plus the
/// assignment. Objects of assigned scenelets can be switched off
/// individually by object selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub placements: Vec<Placement>,
    pub assignment: Assignment,
    /// (assignment entry, object index) pairs removed by object selection.
    pub removed_objects: BTreeSet<(usize, usize)>,
}

impl SceneState {
    pub fn new(placements: Vec<Placement>) -> Self {
        SceneState {
            placements,
            assignment: Assignment::empty(),
            removed_objects: BTreeSet::new(),
        }
    }

    /// Placements that influence the energy: every uncovered frame and the
    /// start frame of every assigned scenelet.
    pub fn active_frames(&self, db: &SceneletDb) -> Vec<usize> {
        let cov = self.assignment.coverage(db, self.placements.len());
        (0..self.placements.len())
            .filter(|&t| match cov[t] {
                None => true,
                Some((_, off)) => off == 0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    pub reprojection: f64,
    pub occlusion: f64,
    pub smoothness: f64,
    pub object_intersection: f64,
    pub motion_intersection: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            reprojection: 1.0,
            occlusion: 0.1,
            smoothness: 0.005,
            object_intersection: 1.0,
            motion_intersection: 1.0,
        }
    }
}

impl Weights {
    pub fn zero() -> Self {
        Weights {
            reprojection: 0.0,
            occlusion: 0.0,
            smoothness: 0.0,
            object_intersection: 0.0,
            motion_intersection: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.reprojection,
            self.occlusion,
            self.smoothness,
            self.object_intersection,
            self.motion_intersection,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("energy weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionIntersectionMode {
    /// Sum of per-frame max-min signed distances, as written.
    Literal,
    /// Only the negative part: penalizes frames whose contact joints are all
    /// inside object footprints.
    Clamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub weights: Weights,
    /// Sample spacing for the footprint integrals of the object term.
    pub intersection_pitch_m: f64,
    /// Orientation tolerance under which same-label objects are compatible.
    pub compatible_angle_rad: f64,
    /// Visible distances are capped here before the occlusion cost.
    pub occlusion_distance_cap_m: f64,
    pub motion_intersection: MotionIntersectionMode,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            weights: Weights::default(),
            intersection_pitch_m: 0.1,
            compatible_angle_rad: 5f64.to_radians(),
            occlusion_distance_cap_m: 2.0,
            motion_intersection: MotionIntersectionMode::Clamped,
        }
    }
}

/// Everything held fixed while placements are optimized.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub db: &'a SceneletDb,
    pub track: &'a ObservationTrack,
    pub camera: &'a Camera,
    pub config: &'a EnergyConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyBreakdown {
    pub reprojection: f64,
    pub occlusion: f64,
    pub smoothness: f64,
    pub object_intersection: f64,
    pub motion_intersection: f64,
    pub total: f64,
    /// Joints skipped by the reprojection term for lying behind the camera.
    pub behind_camera: usize,
}

impl EnergyBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [
            self.reprojection,
            self.occlusion,
            self.smoothness,
            self.object_intersection,
            self.motion_intersection,
        ]
    }
}

/// Gradient of the energy with respect to every frame's placement
/// (x, y, z, theta); inactive frames get zeros.
pub type PlacementGradient = Vec<[f64; 4]>;

/// World joints of every frame with the bookkeeping needed for gradients.
#[derive(Debug, Clone)]
pub struct JointField {
    pub joints: Vec<Pose>,
    /// Local (pre-placement) joint positions.
    pub local: Vec<Pose>,
    /// Frame whose placement generates each frame's joints.
    pub owner: Vec<usize>,
    pub from_scenelet: Vec<bool>,
}

pub fn joint_field(problem: &Problem, state: &SceneState) -> Result<JointField> {
    let n = problem.track.len();
    if state.placements.len() != n {
        return Err(Error::InvalidInput(format!(
            "state has {} placements for {} frames",
            state.placements.len(),
            n
        )));
    }
    let cov = state.assignment.coverage(problem.db, n);
    let mut field = JointField {
        joints: Vec::with_capacity(n),
        local: Vec::with_capacity(n),
        owner: Vec::with_capacity(n),
        from_scenelet: Vec::with_capacity(n),
    };
    for t in 0..n {
        let (owner, local, scen) = match cov[t] {
            Some((i, off)) => {
                let e = state.assignment.entries()[i];
                let frame = &problem.db.entries[e.scenelet].scenelet.frames[off];
                (e.start, frame.joints, true)
            }
            None => {
                let pose = problem.track.frames[t]
                    .local_pose
                    .ok_or(Error::MissingLocalPose { frame: t })?;
                (t, pose, false)
            }
        };
        let p = &state.placements[owner];
        field.joints.push(local.map(|j| p.apply(&j)));
        field.local.push(local);
        field.owner.push(owner);
        field.from_scenelet.push(scen);
    }
    Ok(field)
}

/// Joints contributed by scenelets (zero on frames they do not cover).
pub fn joints_from_scenelets(problem: &Problem, state: &SceneState) -> Vec<Pose> {
    let n = problem.track.len();
    let cov = state.assignment.coverage(problem.db, n);
    (0..n)
        .map(|t| match cov[t] {
            Some((i, off)) => {
                let e = state.assignment.entries()[i];
                let p = &state.placements[e.start];
                problem.db.entries[e.scenelet].scenelet.frames[off].joints.map(|j| p.apply(&j))
            }
            None => [Vec3::zeros(); NUM_JOINTS],
        })
        .collect()
}

/// Joints contributed by static skeletons (zero on scenelet frames).
pub fn joints_from_skeletons(problem: &Problem, state: &SceneState) -> Result<Vec<Pose>> {
    let n = problem.track.len();
    let eta = state.assignment.eta(problem.db, n);
    (0..n)
        .map(|t| {
            if eta[t] > 0 {
                return Ok([Vec3::zeros(); NUM_JOINTS]);
            }
            let pose = problem.track.frames[t]
                .local_pose
                .ok_or(Error::MissingLocalPose { frame: t })?;
            let p = &state.placements[t];
            Ok(pose.map(|j| p.apply(&j)))
        })
        .collect()
}

pub fn combined_joints(problem: &Problem, state: &SceneState) -> Result<Vec<Pose>> {
    let hat = joints_from_scenelets(problem, state);
    let check = joints_from_skeletons(problem, state)?;
    Ok(hat
        .iter()
        .zip(&check)
        .map(|(a, b)| std::array::from_fn(|k| a[k] + b[k]))
        .collect())
}

/// A placed object together with the frame whose placement moves it and its
/// offset from that placement (for the rotation lever arm).
#[derive(Debug, Clone)]
pub struct ObjectInstance {
    pub object: PlacedObject,
    pub owner: usize,
    pub entry: usize,
    pub index: usize,
}

/// Objects of all assigned scenelets moved into the video's world frame.
/// Heights are taken from the scenelet, so objects stay on the ground
/// whatever the placement height.
pub fn scene_objects(db: &SceneletDb, state: &SceneState) -> Vec<ObjectInstance> {
    let mut out = Vec::new();
    for (ei, e) in state.assignment.entries().iter().enumerate() {
        let p = &state.placements[e.start];
        for (oi, o) in db.entries[e.scenelet].scenelet.objects.iter().enumerate() {
            if state.removed_objects.contains(&(ei, oi)) {
                continue;
            }
            let mut placement = p.compose(&o.placement);
            placement.z = o.placement.z;
            out.push(ObjectInstance {
                object: PlacedObject {
                    label: o.label.clone(),
                    placement,
                    cuboids: o.cuboids.clone(),
                },
                owner: e.start,
                entry: ei,
                index: oi,
            });
        }
    }
    out
}

/// Accumulates gradients with respect to joints and objects, then folds
/// them into placement gradients.
struct GradAcc {
    joints: Vec<[Vec3; NUM_JOINTS]>,
    objects: Vec<PoseGrad>,
}

impl GradAcc {
    fn new(n: usize, n_obj: usize) -> Self {
        GradAcc {
            joints: vec![[Vec3::zeros(); NUM_JOINTS]; n],
            objects: vec![PoseGrad::default(); n_obj],
        }
    }

    fn into_placements(self, state: &SceneState, field: &JointField, objects: &[ObjectInstance]) -> PlacementGradient {
        let mut g = vec![[0.0; 4]; state.placements.len()];
        for (t, gj) in self.joints.iter().enumerate() {
            let owner = field.owner[t];
            let p = &state.placements[owner];
            for (k, v) in gj.iter().enumerate() {
                if v.norm_squared() == 0.0 {
                    continue;
                }
                g[owner][0] += v.x;
                g[owner][1] += v.y;
                g[owner][2] += v.z;
                g[owner][3] += v.dot(&p.d_apply_dtheta(&field.local[t][k]));
            }
        }
        for (inst, og) in objects.iter().zip(&self.objects) {
            let p = &state.placements[inst.owner];
            let lever = perp(inst.object.placement.ground() - p.ground());
            g[inst.owner][0] += og.x;
            g[inst.owner][1] += og.y;
            g[inst.owner][3] += og.theta + og.x * lever.x + og.y * lever.y;
        }
        g
    }
}

/// The asymmetric occlusion cost: only low-confidence detections of joints
/// that are visible in the synthesized scene are penalized.
pub fn asymmetric_occlusion_cost(v: f64, c: f64) -> f64 {
    if c - 0.5 < 0.0 && v > 0.0 {
        (c - 0.5) * (c - 0.5) * v * v
    } else {
        0.0
    }
}

fn reprojection(problem: &Problem, field: &JointField, acc: Option<&mut GradAcc>) -> (f64, usize) {
    let mut total = 0.0;
    let mut behind = 0;
    let mut acc = acc;
    for (t, pose) in field.joints.iter().enumerate() {
        let obs = &problem.track.frames[t];
        for k in 0..NUM_JOINTS {
            let c = problem.track.confidence(t, k);
            if c <= 0.0 {
                continue;
            }
            match problem.camera.project_with_jacobian(&pose[k]) {
                Ok((u, j)) => {
                    let r = u - obs.joints_px[k];
                    total += c * r.norm_squared();
                    if let Some(acc) = acc.as_deref_mut() {
                        acc.joints[t][k] += j.transpose() * r * (2.0 * c);
                    }
                }
                Err(_) => behind += 1,
            }
        }
    }
    (total, behind)
}

fn smoothness(problem: &Problem, field: &JointField, acc: Option<&mut GradAcc>) -> f64 {
    let pel = Joint::Pelvis.index();
    let mut total = 0.0;
    let mut acc = acc;
    for range in &problem.track.actors {
        for t in (range.start + 1)..range.end {
            let d = field.joints[t][pel] - field.joints[t - 1][pel];
            total += d.norm_squared();
            if let Some(acc) = acc.as_deref_mut() {
                acc.joints[t][pel] += d * 2.0;
                acc.joints[t - 1][pel] -= d * 2.0;
            }
        }
    }
    total
}

fn occlusion(problem: &Problem, field: &JointField, objects: &[PlacedObject], acc: Option<&mut GradAcc>) -> f64 {
    let cap = problem.config.occlusion_distance_cap_m;
    let mut total = 0.0;
    let mut acc = acc;
    for (t, pose) in field.joints.iter().enumerate() {
        for (k, q) in pose.iter().enumerate() {
            let c = problem.track.confidence(t, k);
            if c >= 0.5 {
                continue;
            }
            let (v, g) = occlusion_signed_distance_with_grad(problem.camera, objects, q);
            if v >= cap {
                total += asymmetric_occlusion_cost(cap, c);
                continue;
            }
            let f = asymmetric_occlusion_cost(v, c);
            if f == 0.0 {
                continue;
            }
            total += f;
            if let Some(acc) = acc.as_deref_mut() {
                let s = 2.0 * (c - 0.5) * (c - 0.5) * v;
                acc.joints[t][k] += g.point * s;
                if let Some((oi, pg)) = g.object {
                    acc.objects[oi] += pg * s;
                }
            }
        }
    }
    total
}

/// Integration samples of an object's footprint in its own frame, with
/// their area weights. Cells tile each cuboid footprint exactly; samples
/// inside earlier cuboids of the same object are dropped.
pub fn footprint_samples(object: &PlacedObject, pitch: f64) -> Vec<(Vec2, f64)> {
    let mut out = Vec::new();
    for (ci, c) in object.cuboids.iter().enumerate() {
        let size = c.half_extents.xy() * 2.0;
        let nx = (size.x / pitch).ceil().max(1.0) as usize;
        let ny = (size.y / pitch).ceil().max(1.0) as usize;
        let (dx, dy) = (size.x / nx as f64, size.y / ny as f64);
        let r = rot2(c.theta);
        for ix in 0..nx {
            for iy in 0..ny {
                let local = Vec2::new(
                    -size.x / 2.0 + (ix as f64 + 0.5) * dx,
                    -size.y / 2.0 + (iy as f64 + 0.5) * dy,
                );
                let p = c.center.xy() + r * local;
                let shadowed = object.cuboids[..ci].iter().any(|prev| {
                    let rel = rot2(prev.theta).transpose() * (p - prev.center.xy());
                    rel.x.abs() <= prev.half_extents.x && rel.y.abs() <= prev.half_extents.y
                });
                if !shadowed {
                    out.push((p, dx * dy));
                }
            }
        }
    }
    out
}

pub fn compatible(a: &PlacedObject, b: &PlacedObject, angle_tol: f64) -> bool {
    a.label == b.label && angle_distance(a.placement.theta(), b.placement.theta()) < angle_tol
}

/// Cell-averaged `min(0, d)` for a cell of side `width` and its derivative
/// in `d` (see [`smoothed_ramp`]). Averaging keeps the sample rule accurate
/// where the other footprint's boundary crosses a cell.
pub fn cell_penetration(d: f64, width: f64) -> (f64, f64) {
    let (p, dp) = smoothed_ramp(d, width);
    (d - p, 1.0 - dp)
}

/// `∫_{footprint(a)} min(0, sdf_b(x)) dx` with gradients w.r.t. both poses.
fn penetration_integral(a: &PlacedObject, b: &PlacedObject, pitch: f64) -> (f64, PoseGrad, PoseGrad) {
    let mut total = 0.0;
    let mut ga = PoseGrad::default();
    let mut gb = PoseGrad::default();
    let r = rot2(a.placement.theta());
    let ta = a.placement.ground();
    for (s, area) in footprint_samples(a, pitch) {
        let x = ta + r * s;
        let width = area.sqrt();
        let (d, gx, gpose) = b.cell_sdf_2d(&x, width);
        let (v, slope) = cell_penetration(d, width);
        if slope == 0.0 {
            continue;
        }
        total += area * v;
        let w = area * slope;
        let lever = perp(x - ta);
        ga += PoseGrad {
            x: w * gx.x,
            y: w * gx.y,
            theta: w * gx.dot(&lever),
        };
        gb += gpose * w;
    }
    (total, ga, gb)
}

fn object_intersection(
    objects: &[PlacedObject],
    pitch: f64,
    angle_tol: f64,
    acc: Option<&mut GradAcc>,
) -> f64 {
    let mut total = 0.0;
    let mut acc = acc;
    for i in 0..objects.len() {
        for j in (i + 1)..objects.len() {
            let (a, b) = (&objects[i], &objects[j]);
            if compatible(a, b, angle_tol) {
                continue;
            }
            let (v1, ga1, gb1) = penetration_integral(a, b, pitch);
            let (v2, gb2, ga2) = penetration_integral(b, a, pitch);
            total -= v1 + v2;
            if let Some(acc) = acc.as_deref_mut() {
                acc.objects[i] += ga1 * -1.0;
                acc.objects[i] += ga2 * -1.0;
                acc.objects[j] += gb1 * -1.0;
                acc.objects[j] += gb2 * -1.0;
            }
        }
    }
    total
}

fn motion_intersection(
    field: &JointField,
    objects: &[PlacedObject],
    mode: MotionIntersectionMode,
    acc: Option<&mut GradAcc>,
) -> f64 {
    if objects.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    let mut acc = acc;
    for (t, pose) in field.joints.iter().enumerate() {
        // (value, joint, object, d/dx, d/dobject)
        let mut frame_best: Option<(f64, usize, usize, Vec2, PoseGrad)> = None;
        for j in Joint::MOTION_CONTACT {
            let x = pose[j.index()].xy();
            let mut nearest: Option<(f64, usize, Vec2, PoseGrad)> = None;
            for (oi, o) in objects.iter().enumerate() {
                let (d, gx, gp) = o.sdf_2d(&x);
                if nearest.as_ref().is_none_or(|n| d < n.0) {
                    nearest = Some((d, oi, gx, gp));
                }
            }
            let (d, oi, gx, gp) = nearest.expect("objects is nonempty");
            if frame_best.as_ref().is_none_or(|b| d > b.0) {
                frame_best = Some((d, j.index(), oi, gx, gp));
            }
        }
        let (value, k, oi, gx, gp) = frame_best.expect("three contact joints");
        let (contrib, scale) = match mode {
            MotionIntersectionMode::Literal => (value, 1.0),
            MotionIntersectionMode::Clamped if value < 0.0 => (-value, -1.0),
            MotionIntersectionMode::Clamped => (0.0, 0.0),
        };
        total += contrib;
        if scale != 0.0 {
            if let Some(acc) = acc.as_deref_mut() {
                acc.joints[t][k] += Vec3::new(gx.x, gx.y, 0.0) * scale;
                acc.objects[oi] += gp * scale;
            }
        }
    }
    total
}

/// Reprojection term and the number of joints skipped behind the camera.
pub fn reprojection_term(problem: &Problem, state: &SceneState) -> Result<(f64, usize)> {
    let field = joint_field(problem, state)?;
    Ok(reprojection(problem, &field, None))
}

pub fn occlusion_term(problem: &Problem, state: &SceneState) -> Result<f64> {
    let field = joint_field(problem, state)?;
    let objects: Vec<PlacedObject> = scene_objects(problem.db, state).into_iter().map(|o| o.object).collect();
    Ok(occlusion(problem, &field, &objects, None))
}

pub fn smoothness_term(problem: &Problem, state: &SceneState) -> Result<f64> {
    let field = joint_field(problem, state)?;
    Ok(smoothness(problem, &field, None))
}

pub fn object_intersection_term(objects: &[PlacedObject], config: &EnergyConfig) -> f64 {
    object_intersection(objects, config.intersection_pitch_m, config.compatible_angle_rad, None)
}

pub fn motion_intersection_term(
    problem: &Problem,
    state: &SceneState,
    objects: &[PlacedObject],
    mode: MotionIntersectionMode,
) -> Result<f64> {
    let field = joint_field(problem, state)?;
    Ok(motion_intersection(&field, objects, mode, None))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: EnergyBreakdown,
    pub gradient: Option<PlacementGradient>,
}

/// Evaluates the weighted energy; terms with zero weight are skipped.
pub fn evaluate(problem: &Problem, state: &SceneState, weights: &Weights, with_gradient: bool) -> Result<Evaluation> {
    let field = joint_field(problem, state)?;
    let instances = scene_objects(problem.db, state);
    let objects: Vec<PlacedObject> = instances.iter().map(|o| o.object.clone()).collect();
    let mut b = EnergyBreakdown::default();
    let mut acc = with_gradient.then(|| GradAcc::new(field.joints.len(), objects.len()));

    // each term accumulates into a scratch buffer that is then scaled
    let run = |w: f64, acc: &mut Option<GradAcc>, f: &mut dyn FnMut(Option<&mut GradAcc>) -> f64| -> f64 {
        if w == 0.0 {
            return 0.0;
        }
        match acc {
            Some(main) => {
                let mut scratch = GradAcc::new(main.joints.len(), main.objects.len());
                let v = f(Some(&mut scratch));
                for (m, s) in main.joints.iter_mut().zip(&scratch.joints) {
                    for k in 0..NUM_JOINTS {
                        m[k] += s[k] * w;
                    }
                }
                for (m, s) in main.objects.iter_mut().zip(&scratch.objects) {
                    *m += *s * w;
                }
                v
            }
            None => f(None),
        }
    };

    let mut behind = 0;
    b.reprojection = run(weights.reprojection, &mut acc, &mut |a| {
        let (v, n) = reprojection(problem, &field, a);
        behind = n;
        v
    });
    b.behind_camera = behind;
    b.occlusion = run(weights.occlusion, &mut acc, &mut |a| occlusion(problem, &field, &objects, a));
    b.smoothness = run(weights.smoothness, &mut acc, &mut |a| smoothness(problem, &field, a));
    b.object_intersection = run(weights.object_intersection, &mut acc, &mut |a| {
        object_intersection(
            &objects,
            problem.config.intersection_pitch_m,
            problem.config.compatible_angle_rad,
            a,
        )
    });
    b.motion_intersection = run(weights.motion_intersection, &mut acc, &mut |a| {
        motion_intersection(&field, &objects, problem.config.motion_intersection, a)
    });
    b.total = weights
        .as_array()
        .iter()
        .zip(b.terms())
        .map(|(w, v)| if *w == 0.0 { 0.0 } else { w * v })
        .sum();
    let gradient = acc.map(|a| a.into_placements(state, &field, &instances));
    Ok(Evaluation { breakdown: b, gradient })
}

/// All five terms (regardless of weight) and the weighted total.
pub fn total_energy(problem: &Problem, state: &SceneState, weights: &Weights) -> Result<EnergyBreakdown> {
    let field = joint_field(problem, state)?;
    let objects: Vec<PlacedObject> = scene_objects(problem.db, state).into_iter().map(|o| o.object).collect();
    let (r, behind) = reprojection(problem, &field, None);
    let mut b = EnergyBreakdown {
        reprojection: r,
        occlusion: occlusion(problem, &field, &objects, None),
        smoothness: smoothness(problem, &field, None),
        object_intersection: object_intersection(
            &objects,
            problem.config.intersection_pitch_m,
            problem.config.compatible_angle_rad,
            None,
        ),
        motion_intersection: motion_intersection(&field, &objects, problem.config.motion_intersection, None),
        total: 0.0,
        behind_camera: behind,
    };
    b.total = weights.as_array().iter().zip(b.terms()).map(|(w, v)| w * v).sum();
    Ok(b)
}

pub fn energy_gradient(problem: &Problem, state: &SceneState, weights: &Weights) -> Result<PlacementGradient> {
    Ok(evaluate(problem, state, weights, true)?
        .gradient
        .expect("gradient requested"))
}
