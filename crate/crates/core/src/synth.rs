//! Synthetic ground truth: a procedural body model, capture recordings for
//! building databases, test scenes composed from database clips, rendered
//! observations and evaluation metrics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::db::{DbParams, Recording, SceneletDb};
use crate::energy::{ObservationTrack, ObservedFrame};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, occlusion_signed_distance, union_area, Camera, Cuboid, Placement, PlacedObject, Vec2, Vec3};
use crate::skeleton::{heading_of, Joint, Pose, SkeletonFrame, NUM_JOINTS};

const THIGH: f64 = 0.43;
const SHIN: f64 = 0.44;
const UPPER_ARM: f64 = 0.28;
const FOREARM: f64 = 0.25;
const STAND_PELVIS: f64 = 0.95;
const STRIDE: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activity {
    Stand,
    /// Gait cycle phase in radians.
    Walk(f64),
    Sit,
    /// Seated with both forearms forward, as at a desk.
    SitWork,
    Reach,
    ReachHigh,
}

fn set(p: &mut Pose, j: Joint, v: [f64; 3]) {
    p[j.index()] = Vec3::new(v[0], v[1], v[2]);
}

fn limb(from: Vec3, len: f64, angle: f64) -> Vec3 {
    from + Vec3::new(angle.sin(), 0.0, -angle.cos()) * len
}

/// Body pose in its own frame: pelvis above the origin, facing +x, with
/// the right side at +y (so the hip axis crossed with up points forward).
pub fn body_pose(activity: Activity) -> Pose {
    let mut p = [Vec3::zeros(); NUM_JOINTS];
    let upright = |p: &mut Pose, pelvis: f64| {
        set(p, Joint::Pelvis, [0.0, 0.0, pelvis]);
        set(p, Joint::HipRight, [0.0, 0.1, pelvis]);
        set(p, Joint::HipLeft, [0.0, -0.1, pelvis]);
        set(p, Joint::Thorax, [0.0, 0.0, pelvis + 0.35]);
        set(p, Joint::Neck, [0.0, 0.0, pelvis + 0.55]);
        set(p, Joint::HeadTop, [0.0, 0.0, pelvis + 0.77]);
        set(p, Joint::ShoulderRight, [0.0, 0.19, pelvis + 0.5]);
        set(p, Joint::ShoulderLeft, [0.0, -0.19, pelvis + 0.5]);
    };
    let hanging_arms = |p: &mut Pose, swing: f64| {
        for (sh, el, wr, s) in [
            (Joint::ShoulderRight, Joint::ElbowRight, Joint::WristRight, swing),
            (Joint::ShoulderLeft, Joint::ElbowLeft, Joint::WristLeft, -swing),
        ] {
            let e = limb(p[sh.index()], UPPER_ARM, s);
            p[el.index()] = e;
            p[wr.index()] = limb(e, FOREARM, s + 0.2);
        }
    };
    let standing_legs = |p: &mut Pose| {
        for (hip, knee, ankle) in [
            (Joint::HipRight, Joint::KneeRight, Joint::AnkleRight),
            (Joint::HipLeft, Joint::KneeLeft, Joint::AnkleLeft),
        ] {
            let k = limb(p[hip.index()], THIGH, 0.0);
            p[knee.index()] = k;
            p[ankle.index()] = limb(k, SHIN, 0.0);
        }
    };
    match activity {
        Activity::Stand => {
            upright(&mut p, STAND_PELVIS);
            standing_legs(&mut p);
            hanging_arms(&mut p, 0.0);
        }
        Activity::Walk(phase) => {
            let bob = 0.02 * (1.0 - (2.0 * phase).cos()) / 2.0;
            upright(&mut p, STAND_PELVIS - 0.01 - bob);
            for (hip, knee, ankle, ph) in [
                (Joint::HipRight, Joint::KneeRight, Joint::AnkleRight, phase),
                (Joint::HipLeft, Joint::KneeLeft, Joint::AnkleLeft, phase + std::f64::consts::PI),
            ] {
                let a = 0.4 * ph.sin();
                let bend = 0.35 * (ph + std::f64::consts::FRAC_PI_2).sin().max(0.0);
                let k = limb(p[hip.index()], THIGH, a);
                p[knee.index()] = k;
                p[ankle.index()] = limb(k, SHIN, a - bend);
            }
            hanging_arms(&mut p, -0.3 * phase.sin());
        }
        Activity::Sit | Activity::SitWork => {
            set(&mut p, Joint::Pelvis, [0.0, 0.0, 0.5]);
            set(&mut p, Joint::HipRight, [0.0, 0.1, 0.5]);
            set(&mut p, Joint::HipLeft, [0.0, -0.1, 0.5]);
            set(&mut p, Joint::KneeRight, [0.43, 0.12, 0.52]);
            set(&mut p, Joint::KneeLeft, [0.43, -0.12, 0.52]);
            set(&mut p, Joint::AnkleRight, [0.45, 0.12, 0.08]);
            set(&mut p, Joint::AnkleLeft, [0.45, -0.12, 0.08]);
            set(&mut p, Joint::Thorax, [-0.03, 0.0, 0.85]);
            set(&mut p, Joint::Neck, [-0.04, 0.0, 1.05]);
            set(&mut p, Joint::HeadTop, [-0.04, 0.0, 1.27]);
            set(&mut p, Joint::ShoulderRight, [-0.04, 0.19, 1.0]);
            set(&mut p, Joint::ShoulderLeft, [-0.04, -0.19, 1.0]);
            if activity == Activity::Sit {
                set(&mut p, Joint::ElbowRight, [0.05, 0.22, 0.75]);
                set(&mut p, Joint::ElbowLeft, [0.05, -0.22, 0.75]);
                set(&mut p, Joint::WristRight, [0.3, 0.18, 0.68]);
                set(&mut p, Joint::WristLeft, [0.3, -0.18, 0.68]);
            } else {
                set(&mut p, Joint::ElbowRight, [0.2, 0.22, 0.8]);
                set(&mut p, Joint::ElbowLeft, [0.2, -0.22, 0.8]);
                set(&mut p, Joint::WristRight, [0.45, 0.18, 0.78]);
                set(&mut p, Joint::WristLeft, [0.45, -0.18, 0.78]);
            }
        }
        Activity::Reach | Activity::ReachHigh => {
            upright(&mut p, STAND_PELVIS);
            standing_legs(&mut p);
            hanging_arms(&mut p, 0.0);
            let lean = if activity == Activity::Reach { 0.1 } else { 0.03 };
            for j in [
                Joint::Thorax,
                Joint::Neck,
                Joint::HeadTop,
                Joint::ShoulderRight,
                Joint::ShoulderLeft,
            ] {
                let h = p[j.index()].z - STAND_PELVIS;
                p[j.index()].x += lean * h / 0.5;
            }
            hanging_arms(&mut p, 0.0);
            let sh = p[Joint::ShoulderRight.index()];
            if activity == Activity::Reach {
                p[Joint::ElbowRight.index()] = sh + Vec3::new(0.24, 0.01, -0.15);
                p[Joint::WristRight.index()] = sh + Vec3::new(0.46, -0.02, -0.3);
            } else {
                p[Joint::ElbowRight.index()] = sh + Vec3::new(0.12, 0.01, 0.25);
                p[Joint::WristRight.index()] = sh + Vec3::new(0.22, 0.0, 0.48);
            }
        }
    }
    p
}

pub fn lerp_pose(a: &Pose, b: &Pose, s: f64) -> Pose {
    std::array::from_fn(|k| a[k] * (1.0 - s) + b[k] * s)
}

/// Splits a world-space frame into ground position, heading and the pose in
/// its own heading frame (pelvis above the origin, facing +x).
pub fn to_body_frame(joints: &Pose) -> (Vec2, f64, Pose) {
    let pel = joints[Joint::Pelvis.index()];
    let h = heading_of(joints);
    let inv = Placement::new(pel.x, pel.y, 0.0, h).inverse();
    (pel.xy(), h, joints.map(|q| inv.apply(&q)))
}

pub fn chair(placement: Placement) -> PlacedObject {
    PlacedObject {
        label: "chair".into(),
        placement,
        cuboids: vec![
            Cuboid::new(Vec3::new(0.0, 0.0, 0.225), Vec3::new(0.24, 0.24, 0.225), 0.0).unwrap(),
            Cuboid::new(Vec3::new(-0.21, 0.0, 0.6), Vec3::new(0.03, 0.24, 0.3), 0.0).unwrap(),
        ],
    }
}

pub fn couch(placement: Placement) -> PlacedObject {
    PlacedObject {
        label: "couch".into(),
        placement,
        cuboids: vec![
            Cuboid::new(Vec3::new(0.0, 0.0, 0.21), Vec3::new(0.42, 0.95, 0.21), 0.0).unwrap(),
            Cuboid::new(Vec3::new(-0.32, 0.0, 0.55), Vec3::new(0.1, 0.95, 0.25), 0.0).unwrap(),
        ],
    }
}

fn box_object(label: &str, placement: Placement, sx: f64, sy: f64, h: f64) -> PlacedObject {
    PlacedObject {
        label: label.into(),
        placement,
        cuboids: vec![Cuboid::on_ground(sx, sy, h).unwrap()],
    }
}

pub fn table(placement: Placement) -> PlacedObject {
    box_object("table", placement, 0.8, 1.2, 0.75)
}

pub fn desk(placement: Placement) -> PlacedObject {
    box_object("desk", placement, 0.7, 1.4, 0.75)
}

pub fn shelf(placement: Placement) -> PlacedObject {
    box_object("shelf", placement, 0.35, 1.0, 1.8)
}

/// A tall screen used to hide the actor from the camera.
pub fn partition(placement: Placement) -> PlacedObject {
    box_object("other", placement, 0.2, 2.6, 2.0)
}

/// Accumulates world-space frames of one actor.
struct Actor {
    pos: Vec2,
    heading: f64,
    pose: Pose,
    phase: f64,
    fps: f64,
    frames: Vec<SkeletonFrame>,
}

impl Actor {
    fn new(pos: Vec2, heading: f64, fps: f64) -> Self {
        Actor {
            pos,
            heading,
            pose: body_pose(Activity::Stand),
            phase: 0.0,
            fps,
            frames: Vec::new(),
        }
    }

    fn emit(&mut self) {
        let p = Placement::new(self.pos.x, self.pos.y, 0.0, self.heading);
        let t = self.frames.len() as f64 / self.fps;
        self.frames.push(SkeletonFrame::new(self.pose.map(|q| p.apply(&q)), t));
    }

    fn turn_to(&mut self, heading: f64, frames: usize) {
        let d = normalize_angle(heading - self.heading);
        let (h0, p0) = (self.heading, self.pose);
        let stand = body_pose(Activity::Stand);
        for i in 1..=frames {
            let s = i as f64 / frames as f64;
            self.heading = h0 + d * s;
            self.pose = lerp_pose(&p0, &stand, s);
            self.emit();
        }
        self.heading = normalize_angle(heading);
    }

    fn walk_to(&mut self, target: Vec2, speed: f64) {
        let delta = target - self.pos;
        let dist = delta.norm();
        if dist < 1e-6 {
            return;
        }
        self.turn_to(delta.y.atan2(delta.x), 3);
        let step = speed / self.fps;
        let n = (dist / step).ceil() as usize;
        let start = self.pos;
        for i in 1..=n {
            let s = i as f64 / n as f64;
            self.pos = start + delta * s;
            self.phase += 2.0 * std::f64::consts::PI * (dist / n as f64) / STRIDE;
            let ramp = (i.min(n - i + 1) as f64 / 3.0).min(1.0);
            self.pose = lerp_pose(&body_pose(Activity::Stand), &body_pose(Activity::Walk(self.phase)), ramp);
            self.emit();
        }
    }

    fn transition(&mut self, target: Pose, pos: Vec2, frames: usize) {
        let (p0, x0) = (self.pose, self.pos);
        for i in 1..=frames {
            let s = i as f64 / frames as f64;
            let s = s * s * (3.0 - 2.0 * s);
            self.pose = lerp_pose(&p0, &target, s);
            self.pos = x0 + (pos - x0) * s;
            self.emit();
        }
    }

    fn hold(&mut self, frames: usize) {
        for _ in 0..frames {
            self.emit();
        }
    }
}

/// One object the recorded actor walks to and interacts with.
fn interact(actor: &mut Actor, object: &PlacedObject, rng: &mut ChaCha8Rng) {
    let p = object.placement;
    let at = |x: f64, y: f64| p.apply(&Vec3::new(x, y, 0.0)).xy();
    let hold = rng.random_range(12..30);
    let speed = 1.0;
    match object.label.as_str() {
        "chair" => {
            let approach = at(0.5, 0.0);
            actor.walk_to(approach, speed);
            actor.turn_to(p.theta(), 6);
            actor.transition(body_pose(Activity::Sit), at(0.0, 0.0), 10);
            actor.hold(hold);
            actor.transition(body_pose(Activity::Stand), approach, 10);
        }
        "couch" => {
            let off = rng.random_range(-0.5..0.5);
            let approach = at(0.75, off);
            actor.walk_to(approach, speed);
            actor.turn_to(p.theta(), 6);
            actor.transition(body_pose(Activity::Sit), at(0.05, off), 10);
            actor.hold(hold);
            actor.transition(body_pose(Activity::Stand), approach, 10);
        }
        "table" | "shelf" => {
            let half = object.cuboids[0].half_extents.x;
            let stand = at(-(half + 0.35), 0.0);
            let activity = if object.label == "table" {
                Activity::Reach
            } else {
                Activity::ReachHigh
            };
            actor.walk_to(stand, speed);
            actor.turn_to(p.theta(), 6);
            actor.transition(body_pose(activity), stand, 6);
            actor.hold(hold);
            actor.transition(body_pose(Activity::Stand), stand, 6);
        }
        "desk" => {
            // the seat in front of a desk is its own chair object
            let half = object.cuboids[0].half_extents.x;
            let seat = at(-(half + 0.3), 0.0);
            let side = at(-(half + 0.3), -0.55);
            actor.walk_to(side, speed);
            actor.turn_to(p.theta(), 6);
            actor.transition(body_pose(Activity::SitWork), seat, 12);
            actor.hold(hold);
            actor.transition(body_pose(Activity::Stand), side, 12);
        }
        _ => {}
    }
}

fn room_objects(kind: &str, placement: Placement) -> Vec<PlacedObject> {
    match kind {
        "chair" => vec![chair(placement)],
        "couch" => vec![couch(placement)],
        "table" => vec![table(placement)],
        "shelf" => vec![shelf(placement)],
        "desk" => {
            let d = desk(placement);
            let half = d.cuboids[0].half_extents.x;
            let seat = placement.compose(&Placement::new(-(half + 0.3), 0.0, 0.0, 0.0));
            vec![d, chair(seat)]
        }
        _ => Vec::new(),
    }
}

/// Interaction kinds the recordings cover.
pub const INTERACTIONS: [&str; 5] = ["chair", "couch", "table", "shelf", "desk"];

/// A recorded room: objects in a row with their interaction side facing
/// a walking corridor, visited in order.
pub fn capture_recording(scene_id: &str, kinds: &[&str], seed: u64) -> Recording {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fps = 10.0;
    let mut objects = Vec::new();
    let mut visits = Vec::new();
    for (k, kind) in kinds.iter().enumerate() {
        let x = 3.5 * k as f64 + rng.random_range(-0.3..0.3);
        let y = rng.random_range(-0.2..0.2);
        let jitter = rng.random_range(-0.3..0.3);
        // chairs and couches face the corridor; the rest are approached from it
        let theta = match *kind {
            "chair" | "couch" => -std::f64::consts::FRAC_PI_2,
            _ => std::f64::consts::FRAC_PI_2,
        } + jitter;
        let objs = room_objects(kind, Placement::new(x, y, 0.0, theta));
        visits.push(objs[0].clone());
        objects.extend(objs);
    }
    let corridor = -1.6;
    let mut actor = Actor::new(Vec2::new(-2.0, corridor), 0.0, fps);
    actor.emit();
    for v in &visits {
        let c = v.placement.ground();
        actor.walk_to(Vec2::new(c.x - 0.6, corridor), 1.0);
        interact(&mut actor, v, &mut rng);
        actor.walk_to(Vec2::new(c.x + 0.6, corridor), 1.0);
    }
    let end = Vec2::new(actor.pos.x + 1.5, corridor);
    actor.walk_to(end, 1.0);
    Recording {
        scene_id: scene_id.to_string(),
        frames: actor.frames,
        objects,
    }
}

/// Capture recordings covering every interaction kind, `rooms` rooms with
/// one or two objects each.
pub fn capture_recordings(rooms: usize, seed: u64) -> Vec<Recording> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rooms)
        .map(|r| {
            let first = INTERACTIONS[r % INTERACTIONS.len()];
            let mut kinds = vec![first];
            if rng.random_bool(0.5) {
                kinds.push(INTERACTIONS[rng.random_range(0..INTERACTIONS.len())]);
            }
            capture_recording(&format!("room{r:02}"), &kinds, rng.random())
        })
        .collect()
}

/// A database of exactly `n` scenelets drawn evenly from synthetic
/// recordings.
pub fn synthetic_database(n: usize, seed: u64, params: DbParams) -> Result<SceneletDb> {
    if n == 0 {
        return Err(Error::EmptyDatabase);
    }
    let mut rooms = INTERACTIONS.len();
    loop {
        let recordings = capture_recordings(rooms, seed);
        let mut all = Vec::new();
        for r in &recordings {
            all.extend(crate::db::extract_scenelets(r, &params)?);
        }
        if all.len() >= n {
            let picked = (0..n).map(|i| all[i * all.len() / n].clone()).collect();
            return SceneletDb::from_scenelets(picked, crate::db::default_categories(), params);
        }
        rooms *= 2;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionTemplate {
    /// Object category the clip must interact with.
    pub category: String,
    /// Specific scenelet id; drawn at random from matching clips if absent.
    #[serde(default)]
    pub scenelet: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraTemplate {
    pub focal_px: f64,
    pub width_px: f64,
    pub height_px: f64,
    /// Minimum distance of the camera from the scene center.
    pub distance_m: f64,
    pub height_m: f64,
}

impl Default for CameraTemplate {
    fn default() -> Self {
        CameraTemplate {
            focal_px: 1000.0,
            width_px: 1920.0,
            height_px: 1080.0,
            distance_m: 6.0,
            height_m: 1.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneTemplate {
    pub interactions: Vec<InteractionTemplate>,
    pub frame_rate: f64,
    pub walk_speed_mps: f64,
    /// Distance between consecutive interaction sites.
    pub spacing_m: f64,
    pub lead_in_m: f64,
    pub lead_out_m: f64,
    /// Adds a tall screen between the camera and the first interaction.
    pub occluder: bool,
    /// Randomly drawn clips must have at least this scenelet charness.
    pub min_charness: f64,
    pub camera: CameraTemplate,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        SceneTemplate {
            interactions: Vec::new(),
            frame_rate: 10.0,
            walk_speed_mps: 1.0,
            spacing_m: 3.5,
            lead_in_m: 1.0,
            lead_out_m: 1.0,
            occluder: false,
            min_charness: 0.3,
            camera: CameraTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratingScenelet {
    pub id: String,
    pub start_frame: usize,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthObject {
    pub object: PlacedObject,
    /// Whether the actor interacts with it (as opposed to passing by).
    pub interacted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub camera: Camera,
    pub frame_rate: f64,
    pub frames: Vec<SkeletonFrame>,
    pub objects: Vec<TruthObject>,
    pub generating: Vec<GeneratingScenelet>,
}

impl GroundTruthScene {
    pub fn placed_objects(&self) -> Vec<PlacedObject> {
        self.objects.iter().map(|o| o.object.clone()).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.joints).collect()
    }
}

/// Distance within which a clip's contact joints count as interacting with
/// an object.
const INTERACTION_REACH: f64 = 0.5;

fn contact_distance(frame: &SkeletonFrame, object: &PlacedObject) -> f64 {
    [Joint::Pelvis, Joint::WristRight, Joint::WristLeft]
        .iter()
        .map(|j| object.sdf_2d(&frame.joint(*j).xy()).0)
        .fold(f64::INFINITY, f64::min)
}

fn interacted_objects(clip: &[SkeletonFrame], center: usize, objects: &[PlacedObject]) -> Vec<bool> {
    let lo = center.saturating_sub(2);
    let hi = (center + 3).min(clip.len());
    objects
        .iter()
        .map(|o| clip[lo..hi].iter().any(|f| contact_distance(f, o) <= INTERACTION_REACH))
        .collect()
}

fn pick_scenelet(db: &SceneletDb, it: &InteractionTemplate, min_charness: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    if let Some(id) = &it.scenelet {
        return db
            .get(id)
            .map(|(i, _)| i)
            .ok_or_else(|| Error::InvalidInput(format!("unknown scenelet {id}")));
    }
    let matching: Vec<usize> = (0..db.len())
        .filter(|&i| db.entries[i].charness.scenelet >= min_charness)
        .filter(|&i| {
            let s = &db.entries[i].scenelet;
            let flags = interacted_objects(&s.frames, s.center, &s.objects);
            s.objects.iter().zip(flags).any(|(o, f)| f && o.label == it.category)
        })
        .collect();
    if matching.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no scenelet with charness >= {min_charness} interacts with a {}",
            it.category
        )));
    }
    // clips that begin and end clear of their objects join walks cleanly
    let clean: Vec<usize> = matching
        .iter()
        .copied()
        .filter(|&i| {
            let s = &db.entries[i].scenelet;
            [&s.frames[0], s.frames.last().unwrap()]
                .iter()
                .all(|f| s.objects.iter().all(|o| o.sdf_2d(&f.pelvis().xy()).0 > 0.3))
        })
        .collect();
    let pool = if clean.is_empty() { &matching } else { &clean };
    Ok(pool[rng.random_range(0..pool.len())])
}

/// Frames of a straight walk from the end pose `a` to the start pose `b`
/// (both exclusive), blending the body pose at both ends.
fn connecting_walk(a: &Pose, b: &Pose, speed: f64, fps: f64, phase: &mut f64) -> Vec<Pose> {
    let (ga, ha, la) = to_body_frame(a);
    let (gb, hb, lb) = to_body_frame(b);
    let delta = gb - ga;
    let dist = delta.norm();
    let n = ((dist / (speed / fps)).ceil() as usize).max(4);
    let dir = if dist > 1e-6 { delta.y.atan2(delta.x) } else { ha };
    let ramp = 4.0_f64.min(n as f64 / 2.0);
    (1..n)
        .map(|i| {
            let s = i as f64 / n as f64;
            let g = ga + delta * s;
            *phase += 2.0 * std::f64::consts::PI * (dist / n as f64) / STRIDE;
            let wi = (1.0 - i as f64 / ramp).max(0.0);
            let wo = (1.0 - (n - i) as f64 / ramp).max(0.0);
            let walk = body_pose(Activity::Walk(*phase));
            let mut h = dir;
            let mut pose = walk;
            if wi > 0.0 {
                h = dir + normalize_angle(ha - dir) * wi;
                pose = lerp_pose(&walk, &la, wi);
            }
            if wo > 0.0 {
                h = dir + normalize_angle(hb - dir) * wo;
                pose = lerp_pose(&walk, &lb, wo);
            }
            let p = Placement::new(g.x, g.y, 0.0, h);
            pose.map(|q| p.apply(&q))
        })
        .collect()
}

fn lead_walk(from: Vec2, to: &Pose, speed: f64, fps: f64, phase: &mut f64) -> Vec<Pose> {
    let (g, _, _) = to_body_frame(to);
    let d = g - from;
    let h = d.y.atan2(d.x);
    let p = Placement::new(from.x, from.y, 0.0, h);
    let start = body_pose(Activity::Walk(0.0)).map(|q| p.apply(&q));
    let mut out = vec![start];
    out.extend(connecting_walk(&start, to, speed, fps, phase));
    out
}

fn trail_walk(from: &Pose, to: Vec2, speed: f64, fps: f64, phase: &mut f64) -> Vec<Pose> {
    let (g, _, _) = to_body_frame(from);
    let d = to - g;
    let h = d.y.atan2(d.x);
    let p = Placement::new(to.x, to.y, 0.0, h);
    let end = body_pose(Activity::Walk(0.0)).map(|q| p.apply(&q));
    let mut out = connecting_walk(from, &end, speed, fps, phase);
    out.push(end);
    out
}

/// Pelvis clearance check: clip frames keep away from other clips' objects,
/// walk frames must not enter any object except those of a clip they are
/// about to join or have just left.
fn path_is_clear(frames: &[Pose], objects: &[PlacedObject], own: &[Option<usize>], owners: &[usize]) -> bool {
    const NEAR: usize = 4;
    (0..frames.len()).all(|t| {
        let x = frames[t][Joint::Pelvis.index()].xy();
        let lo = t.saturating_sub(NEAR);
        let hi = (t + NEAR + 1).min(frames.len());
        objects.iter().zip(owners).all(|(obj, o)| match own[t] {
            Some(mine) => mine == *o || obj.sdf_2d(&x).0 > 0.25,
            None => own[lo..hi].contains(&Some(*o)) || obj.sdf_2d(&x).0 > 0.05,
        })
    })
}

/// Composes a scene from database clips placed along a line, joined by
/// walks, and a camera looking at it from the side.
pub fn generate_scene(db: &SceneletDb, template: &SceneTemplate, seed: u64) -> Result<GroundTruthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ct = &template.camera;
    let fps = template.frame_rate;
    if template.interactions.is_empty() {
        let camera = Camera::look_at(
            ct.focal_px,
            ct.focal_px,
            ct.width_px,
            ct.height_px,
            Vec3::new(0.0, -ct.distance_m, ct.height_m),
            Vec3::new(0.0, 0.0, 0.9),
        )?;
        return Ok(GroundTruthScene {
            camera,
            frame_rate: fps,
            frames: Vec::new(),
            objects: Vec::new(),
            generating: Vec::new(),
        });
    }
    let mut picks: Vec<usize> = Vec::new();
    for attempt in 0..200 {
        // a fresh draw of clips every few layouts
        if attempt % 10 == 0 {
            picks = template
                .interactions
                .iter()
                .map(|it| pick_scenelet(db, it, template.min_charness, &mut rng))
                .collect::<Result<_>>()?;
        }
        let placements: Vec<Placement> = (0..picks.len())
            .map(|i| {
                Placement::new(
                    template.spacing_m * i as f64 + rng.random_range(-0.3..0.3),
                    rng.random_range(-0.4..0.4),
                    0.0,
                    rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                )
            })
            .collect();
        let mut objects = Vec::new();
        let mut owners = Vec::new();
        let mut clips = Vec::new();
        for (i, (&l, p)) in picks.iter().zip(&placements).enumerate() {
            let s = &db.entries[l].scenelet;
            let frames: Vec<SkeletonFrame> = s.frames.iter().map(|f| f.transformed(p)).collect();
            for o in &s.objects {
                let mut placement = p.compose(&o.placement);
                placement.z = o.placement.z;
                objects.push(PlacedObject {
                    label: o.label.clone(),
                    placement,
                    cuboids: o.cuboids.clone(),
                });
                owners.push(i);
            }
            clips.push(frames);
        }
        // objects of different clips must not touch
        let feet: Vec<_> = objects.iter().map(|o| o.footprints()).collect();
        let overlap = (0..objects.len()).any(|a| {
            (a + 1..objects.len()).any(|b| {
                owners[a] != owners[b]
                    && (objects[a].centroid().metric_distance(&objects[b].centroid()) < 1.0
                        || union_area(&[feet[a].clone(), feet[b].clone()].concat())
                            < objects[a].footprint_area() + objects[b].footprint_area() - 1e-9)
            })
        });
        if overlap {
            continue;
        }

        // camera on the -y side of the layout, rotated randomly a little
        let all_pelvis: Vec<Vec2> = clips.iter().flatten().map(|f| f.pelvis().xy()).collect();
        let center = all_pelvis.iter().fold(Vec2::zeros(), |a, b| a + b) / all_pelvis.len() as f64;
        let extent = all_pelvis.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
        // far enough for the whole path to stay inside the horizontal field of view
        let dist = ct.distance_m.max(1.25 * extent * 2.0 * ct.focal_px / ct.width_px + 1.5);
        let az = -std::f64::consts::FRAC_PI_2 + rng.random_range(-0.3..0.3);
        let eye = Vec3::new(center.x + dist * az.cos(), center.y + dist * az.sin(), ct.height_m);
        let camera = Camera::look_at(
            ct.focal_px,
            ct.focal_px,
            ct.width_px,
            ct.height_px,
            eye,
            Vec3::new(center.x, center.y, 0.9),
        )?;
        let right = Vec2::new(-az.sin(), az.cos());

        if template.occluder {
            let site = placements[0].ground();
            let to_cam = (eye.xy() - site).normalize();
            let at = site + to_cam * 1.4;
            let theta = to_cam.y.atan2(to_cam.x);
            objects.push(partition(Placement::new(at.x, at.y, 0.0, theta)));
            owners.push(usize::MAX);
        }

        let mut phase = 0.0;
        let mut frames: Vec<Pose> = Vec::new();
        let mut own: Vec<Option<usize>> = Vec::new();
        let mut generating = Vec::new();
        let first = clips[0][0].joints;
        let (g0, _, _) = to_body_frame(&first);
        if template.lead_in_m > 0.0 {
            let lead = lead_walk(g0 - right * template.lead_in_m, &first, template.walk_speed_mps, fps, &mut phase);
            own.extend(std::iter::repeat_n(None, lead.len()));
            frames.extend(lead);
        }
        for (i, clip) in clips.iter().enumerate() {
            if i > 0 {
                let walk = connecting_walk(
                    frames.last().unwrap(),
                    &clip[0].joints,
                    template.walk_speed_mps,
                    fps,
                    &mut phase,
                );
                own.extend(std::iter::repeat_n(None, walk.len()));
                frames.extend(walk);
            }
            generating.push(GeneratingScenelet {
                id: db.entries[picks[i]].scenelet.id.clone(),
                start_frame: frames.len(),
                placement: placements[i],
            });
            own.extend(std::iter::repeat_n(Some(i), clip.len()));
            frames.extend(clip.iter().map(|f| f.joints));
        }
        if template.lead_out_m > 0.0 {
            let last = *frames.last().unwrap();
            let (gl, _, _) = to_body_frame(&last);
            let trail = trail_walk(&last, gl + right * template.lead_out_m, template.walk_speed_mps, fps, &mut phase);
            own.extend(std::iter::repeat_n(None, trail.len()));
            frames.extend(trail);
        }
        if !path_is_clear(&frames, &objects, &own, &owners) {
            continue;
        }
        let in_front = frames
            .iter()
            .all(|f| f.iter().all(|q| camera.to_camera(q).z > 0.5));
        if !in_front {
            continue;
        }

        let mut interacted = vec![false; objects.len()];
        for (i, &l) in picks.iter().enumerate() {
            let s = &db.entries[l].scenelet;
            let start = generating[i].start_frame;
            let world: Vec<SkeletonFrame> = frames[start..start + s.len()]
                .iter()
                .map(|p| SkeletonFrame::new(*p, 0.0))
                .collect();
            let mine: Vec<usize> = (0..objects.len()).filter(|&o| owners[o] == i).collect();
            let objs: Vec<PlacedObject> = mine.iter().map(|&o| objects[o].clone()).collect();
            for (&o, f) in mine.iter().zip(interacted_objects(&world, s.center, &objs)) {
                interacted[o] |= f;
            }
        }
        return Ok(GroundTruthScene {
            camera,
            frame_rate: fps,
            frames: frames
                .into_iter()
                .enumerate()
                .map(|(t, j)| SkeletonFrame::new(j, t as f64 / fps))
                .collect(),
            objects: objects
                .into_iter()
                .zip(interacted)
                .map(|(object, interacted)| TruthObject { object, interacted })
                .collect(),
            generating,
        });
    }
    Err(Error::InvalidInput("could not lay out the scene template without collisions".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub noise_px: f64,
    pub visible_confidence: (f64, f64),
    pub occluded_confidence: (f64, f64),
    /// Noise added to the local 3D poses of visible frames.
    pub local_pose_noise_m: f64,
    /// Frames with more than this fraction of occluded joints get an
    /// implausible local pose, as a lifting network would produce.
    pub corrupt_fraction: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            noise_px: 2.0,
            visible_confidence: (0.7, 1.0),
            occluded_confidence: (0.0, 0.3),
            local_pose_noise_m: 0.01,
            corrupt_fraction: 0.5,
        }
    }
}

/// Per-joint visibility: true when the straight line from the camera center
/// reaches the joint without entering an object.
pub fn visibility(camera: &Camera, objects: &[PlacedObject], pose: &Pose) -> [bool; NUM_JOINTS] {
    pose.map(|q| occlusion_signed_distance(camera, objects, &q) >= 0.0)
}

/// A pose with both knees lifted above the head.
pub fn implausible_pose(pose: &Pose) -> Pose {
    let mut p = *pose;
    let top = p[Joint::HeadTop.index()].z;
    p[Joint::KneeLeft.index()].z = top + 0.2;
    p[Joint::KneeRight.index()].z = top + 0.2;
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub track: ObservationTrack,
    pub visible: Vec<[bool; NUM_JOINTS]>,
}

impl Rendering {
    /// Frames where at least half of the joints are hidden.
    pub fn hidden_frames(&self) -> Vec<bool> {
        self.visible
            .iter()
            .map(|v| v.iter().filter(|x| !**x).count() * 2 >= NUM_JOINTS)
            .collect()
    }
}

pub fn render_observations(scene: &GroundTruthScene, config: &RenderConfig, seed: u64) -> Result<Rendering> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = Normal::new(0.0, config.noise_px.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let m = Normal::new(0.0, config.local_pose_noise_m.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let objects = scene.placed_objects();
    let mut frames = Vec::with_capacity(scene.frames.len());
    let mut visible = Vec::with_capacity(scene.frames.len());
    for f in &scene.frames {
        let vis = visibility(&scene.camera, &objects, &f.joints);
        let mut joints_px = [Vec2::zeros(); NUM_JOINTS];
        let mut confidence = [0.0; NUM_JOINTS];
        for k in 0..NUM_JOINTS {
            let (lo, hi) = if vis[k] {
                config.visible_confidence
            } else {
                config.occluded_confidence
            };
            confidence[k] = if hi > lo { rng.random_range(lo..hi) } else { lo };
            match scene.camera.project(&f.joints[k]) {
                Ok(u) => {
                    joints_px[k] = u + Vec2::new(px.sample(&mut rng), px.sample(&mut rng));
                }
                Err(_) => confidence[k] = 0.0,
            }
        }
        let (_, _, body) = to_body_frame(&f.joints);
        let pel = body[Joint::Pelvis.index()];
        let mut local = body.map(|q| q - pel);
        let hidden = vis.iter().filter(|v| !**v).count() as f64 / NUM_JOINTS as f64;
        if hidden > config.corrupt_fraction {
            local = implausible_pose(&local);
        } else {
            for (k, q) in local.iter_mut().enumerate() {
                if k != Joint::Pelvis.index() {
                    *q += Vec3::new(m.sample(&mut rng), m.sample(&mut rng), m.sample(&mut rng));
                }
            }
        }
        frames.push(ObservedFrame {
            joints_px,
            confidence,
            local_pose: Some(local),
            valid: true,
        });
        visible.push(vis);
    }
    Ok(Rendering {
        track: ObservationTrack::single_actor(scene.frame_rate, frames),
        visible,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub world_m: f64,
    pub local_m: f64,
    pub image_px: f64,
}

/// RMSE over the 14 metric joints of the selected frames in world,
/// pelvis-relative and image space. Joints behind the camera are left out
/// of the image error.
pub fn eval_pose(result: &[Pose], truth: &[Pose], camera: &Camera, frames: &[usize]) -> Result<PoseErrors> {
    if result.len() != truth.len() {
        return Err(Error::InvalidInput("result and truth differ in frame count".into()));
    }
    let pel = Joint::Pelvis.index();
    let (mut w, mut l, mut i) = (0.0, 0.0, 0.0);
    let (mut n, mut ni) = (0usize, 0usize);
    for &t in frames {
        let (r, g) = (&result[t], &truth[t]);
        for j in Joint::METRIC {
            let k = j.index();
            w += (r[k] - g[k]).norm_squared();
            l += ((r[k] - r[pel]) - (g[k] - g[pel])).norm_squared();
            n += 1;
            if let (Ok(a), Ok(b)) = (camera.project(&r[k]), camera.project(&g[k])) {
                i += (a - b).norm_squared();
                ni += 1;
            }
        }
    }
    let rms = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64).sqrt() };
    Ok(PoseErrors {
        world_m: rms(w, n),
        local_m: rms(l, n),
        image_px: rms(i, ni),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub truth: usize,
    pub result: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectEval {
    /// (result index, truth index, ground-plane centroid distance).
    pub matches: Vec<(usize, usize, f64)>,
    pub mean_m: f64,
    pub std_m: f64,
    pub unmatched_result: usize,
    pub unmatched_truth: usize,
    pub per_category: BTreeMap<String, CategoryCounts>,
}

impl ObjectEval {
    pub fn truth_match(&self, truth: usize) -> Option<(usize, f64)> {
        self.matches.iter().find(|m| m.1 == truth).map(|m| (m.0, m.2))
    }
}

/// Greedy same-label matching by increasing centroid distance; pairs
/// farther apart than `max_distance` stay unmatched.
pub fn eval_objects(result: &[PlacedObject], truth: &[PlacedObject], max_distance: f64) -> ObjectEval {
    let rc: Vec<Vec2> = result.iter().map(|o| o.centroid()).collect();
    let tc: Vec<Vec2> = truth.iter().map(|o| o.centroid()).collect();
    let mut pairs = Vec::new();
    for (i, r) in result.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if r.label == t.label {
                let d = (rc[i] - tc[j]).norm();
                if d <= max_distance {
                    pairs.push((d, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_r = vec![false; result.len()];
    let mut used_t = vec![false; truth.len()];
    let mut out = ObjectEval::default();
    for (d, i, j) in pairs {
        if !used_r[i] && !used_t[j] {
            used_r[i] = true;
            used_t[j] = true;
            out.matches.push((i, j, d));
        }
    }
    let n = out.matches.len();
    if n > 0 {
        out.mean_m = out.matches.iter().map(|m| m.2).sum::<f64>() / n as f64;
        out.std_m = (out.matches.iter().map(|m| (m.2 - out.mean_m).powi(2)).sum::<f64>() / n as f64).sqrt();
    }
    out.unmatched_result = result.len() - n;
    out.unmatched_truth = truth.len() - n;
    for o in truth {
        out.per_category.entry(o.label.clone()).or_default().truth += 1;
    }
    for o in result {
        out.per_category.entry(o.label.clone()).or_default().result += 1;
    }
    for m in &out.matches {
        out.per_category.entry(truth[m.1].label.clone()).or_default().matched += 1;
    }
    out
}
