//! File formats. Every document is JSON wrapped in a header naming its
//! format and version; bodies use unit-suffixed field names and reject
//! unknown fields.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;

use nalgebra::Matrix4;
use serde::de::{DeserializeOwned, IgnoredAny};
use serde::{Deserialize, Serialize};

use crate::db::{CharnessRecord, DbParams, Grid, MotionDescriptor, ObjectDescriptor, Recording, Scenelet, SceneletDb, SceneletEntry, POSE_DIMS};
use crate::energy::{EnergyBreakdown, ObservationTrack, ObservedFrame};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Cuboid, PlacedObject, Placement, Vec2, Vec3};
use crate::pipeline::{PipelineConfig, PipelineOutput, StageDiagnostic};
use crate::skeleton::{Joint, Pose, SkeletonFrame, NUM_JOINTS};
use crate::synth::{GeneratingScenelet, GroundTruthScene, RenderConfig, SceneTemplate, TruthObject};
use crate::tracker::{DetectionFrame, Pin, Skeleton2d, TrackerConfig};

pub const VERSION: u32 = 1;

/// A document body with its format tag.
pub trait Document: Serialize + DeserializeOwned {
    const FORMAT: &'static str;
    /// Large documents are written without indentation.
    const COMPACT: bool = false;
}

#[derive(Serialize)]
struct Outgoing<'a, T> {
    format: &'a str,
    version: u32,
    body: &'a T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Incoming<T> {
    #[allow(dead_code)]
    format: IgnoredAny,
    #[allow(dead_code)]
    version: IgnoredAny,
    body: T,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<u32>,
}

fn schema(file: &str, field: impl Into<String>, message: impl Display) -> Error {
    Error::Schema {
        file: file.to_string(),
        field: field.into(),
        message: message.to_string(),
    }
}

/// Offending field and what is wrong with it, found after parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct Invalid {
    pub field: String,
    pub message: String,
}

fn invalid(field: impl Into<String>, message: impl Display) -> Invalid {
    Invalid {
        field: field.into(),
        message: message.to_string(),
    }
}

impl Invalid {
    fn into_error(self, file: &str) -> Error {
        let field = if self.field.is_empty() {
            "body".to_string()
        } else {
            format!("body.{}", self.field)
        };
        schema(file, field, self.message)
    }
}

/// Parses a document; `file` names the source in error messages.
pub fn from_str<D: Document>(text: &str, file: &str) -> Result<D> {
    let header: Header = serde_json::from_str(text).map_err(|e| schema(file, "", e))?;
    match header.format.as_deref() {
        Some(f) if f == D::FORMAT => {}
        Some(f) => return Err(schema(file, "format", format!("expected `{}`, found `{f}`", D::FORMAT))),
        None => return Err(schema(file, "format", "missing field `format`")),
    }
    match header.version {
        Some(VERSION) => {}
        Some(v) => return Err(schema(file, "version", format!("unsupported version {v}, expected {VERSION}"))),
        None => return Err(schema(file, "version", "missing field `version`")),
    }
    let mut de = serde_json::Deserializer::from_str(text);
    let doc: Incoming<D> =
        serde_path_to_error::deserialize(&mut de).map_err(|e| schema(file, e.path().to_string(), e.inner()))?;
    Ok(doc.body)
}

pub fn to_string<D: Document>(doc: &D) -> Result<String> {
    let out = Outgoing {
        format: D::FORMAT,
        version: VERSION,
        body: doc,
    };
    let text = if D::COMPACT {
        serde_json::to_string(&out)
    } else {
        serde_json::to_string_pretty(&out)
    };
    text.map_err(|e| Error::InvalidInput(format!("cannot serialize {}: {e}", D::FORMAT)))
}

pub fn load<D: Document>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_str(&text, &path.display().to_string())
}

pub fn save<D: Document>(path: &Path, doc: &D) -> Result<()> {
    let mut text = to_string(doc)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

type P3 = [f64; 3];

fn p3(v: &Vec3) -> P3 {
    [v.x, v.y, v.z]
}

fn v3(a: &P3) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn finite(values: &[f64], field: &str) -> std::result::Result<(), Invalid> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(field, "non-finite value"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementDoc {
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
    pub theta_rad: f64,
}

impl From<&Placement> for PlacementDoc {
    fn from(p: &Placement) -> Self {
        PlacementDoc {
            x_m: p.x,
            y_m: p.y,
            z_m: p.z,
            theta_rad: p.theta(),
        }
    }
}

impl PlacementDoc {
    pub fn to_placement(&self, field: &str) -> std::result::Result<Placement, Invalid> {
        finite(&[self.x_m, self.y_m, self.z_m, self.theta_rad], field)?;
        Ok(Placement::new(self.x_m, self.y_m, self.z_m, self.theta_rad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuboidDoc {
    pub center_m: P3,
    pub half_extents_m: P3,
    pub theta_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectDoc {
    pub label: String,
    pub placement: PlacementDoc,
    pub cuboids: Vec<CuboidDoc>,
}

impl From<&PlacedObject> for ObjectDoc {
    fn from(o: &PlacedObject) -> Self {
        ObjectDoc {
            label: o.label.clone(),
            placement: (&o.placement).into(),
            cuboids: o
                .cuboids
                .iter()
                .map(|c| CuboidDoc {
                    center_m: p3(&c.center),
                    half_extents_m: p3(&c.half_extents),
                    theta_rad: c.theta,
                })
                .collect(),
        }
    }
}

impl ObjectDoc {
    pub fn to_object(&self, field: &str) -> std::result::Result<PlacedObject, Invalid> {
        if self.cuboids.is_empty() {
            return Err(invalid(format!("{field}.cuboids"), "an object needs at least one cuboid"));
        }
        let cuboids = self
            .cuboids
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let f = format!("{field}.cuboids[{i}]");
                finite(&c.center_m, &f)?;
                finite(&[c.theta_rad], &f)?;
                Cuboid::new(v3(&c.center_m), v3(&c.half_extents_m), c.theta_rad)
                    .map_err(|e| invalid(format!("{f}.half_extents_m"), e))
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(PlacedObject {
            label: self.label.clone(),
            placement: self.placement.to_placement(&format!("{field}.placement"))?,
            cuboids,
        })
    }
}

fn objects_from(docs: &[ObjectDoc], field: &str) -> std::result::Result<Vec<PlacedObject>, Invalid> {
    docs.iter()
        .enumerate()
        .map(|(i, o)| o.to_object(&format!("{field}[{i}]")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDoc {
    pub fx_px: f64,
    pub fy_px: f64,
    pub cx_px: f64,
    pub cy_px: f64,
    pub width_px: f64,
    pub height_px: f64,
    /// Row-major rigid transform, translation in meters.
    pub world_to_camera: [[f64; 4]; 4],
}

impl Document for CameraDoc {
    const FORMAT: &'static str = "camera";
}

impl From<&Camera> for CameraDoc {
    fn from(c: &Camera) -> Self {
        let m = c.world_to_camera();
        CameraDoc {
            fx_px: c.fx,
            fy_px: c.fy,
            cx_px: c.cx,
            cy_px: c.cy,
            width_px: c.width,
            height_px: c.height,
            world_to_camera: std::array::from_fn(|r| std::array::from_fn(|k| m[(r, k)])),
        }
    }
}

impl CameraDoc {
    pub fn to_camera(&self, field: &str) -> std::result::Result<Camera, Invalid> {
        let m = Matrix4::from_fn(|r, k| self.world_to_camera[r][k]);
        Camera::new(self.fx_px, self.fy_px, self.cx_px, self.cy_px, self.width_px, self.height_px, m)
            .map_err(|e| invalid(field, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFrameDoc {
    pub time_s: f64,
    /// Joint positions in joint-index order.
    pub joints_m: [P3; NUM_JOINTS],
}

impl From<&SkeletonFrame> for PoseFrameDoc {
    fn from(f: &SkeletonFrame) -> Self {
        PoseFrameDoc {
            time_s: f.time,
            joints_m: f.joints.map(|q| p3(&q)),
        }
    }
}

fn frames_from(docs: &[PoseFrameDoc], field: &str) -> std::result::Result<Vec<SkeletonFrame>, Invalid> {
    docs.iter()
        .enumerate()
        .map(|(i, f)| {
            let flat: Vec<f64> = f.joints_m.iter().flatten().copied().chain([f.time_s]).collect();
            finite(&flat, &format!("{field}[{i}]"))?;
            Ok(SkeletonFrame::new(f.joints_m.map(|q| v3(&q)), f.time_s))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionDoc {
    pub samples_cm: Vec<[f64; POSE_DIMS]>,
    pub pelvis_m: Vec<P3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutDoc {
    pub bin_size_m: f64,
    pub grids: BTreeMap<String, Grid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharnessDoc {
    pub bins: BTreeMap<String, Grid>,
    pub scenelet: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryDoc {
    pub id: String,
    pub source_scene: String,
    pub origin: PlacementDoc,
    pub center_frame: usize,
    pub frames: Vec<PoseFrameDoc>,
    pub objects: Vec<ObjectDoc>,
    pub motion: MotionDoc,
    pub layout: LayoutDoc,
    pub charness: CharnessDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseDoc {
    pub categories: Vec<String>,
    pub params: DbParams,
    pub scenelets: Vec<EntryDoc>,
}

impl Document for DatabaseDoc {
    const FORMAT: &'static str = "scenelet-database";
    const COMPACT: bool = true;
}

impl From<&SceneletDb> for DatabaseDoc {
    fn from(db: &SceneletDb) -> Self {
        DatabaseDoc {
            categories: db.categories.clone(),
            params: db.params.clone(),
            scenelets: db
                .entries
                .iter()
                .map(|e| {
                    let s = &e.scenelet;
                    EntryDoc {
                        id: s.id.clone(),
                        source_scene: s.source_scene.clone(),
                        origin: (&s.origin).into(),
                        center_frame: s.center,
                        frames: s.frames.iter().map(Into::into).collect(),
                        objects: s.objects.iter().map(Into::into).collect(),
                        motion: MotionDoc {
                            samples_cm: e.motion.samples.clone(),
                            pelvis_m: e.motion.pelvis.iter().map(p3).collect(),
                        },
                        layout: LayoutDoc {
                            bin_size_m: e.objects.bin_size,
                            grids: e.objects.grids.clone(),
                        },
                        charness: CharnessDoc {
                            bins: e.charness.bins.clone(),
                            scenelet: e.charness.scenelet,
                            density: e.charness.density,
                        },
                    }
                })
                .collect(),
        }
    }
}

impl DatabaseDoc {
    pub fn to_database(&self) -> std::result::Result<SceneletDb, Invalid> {
        let mut seen = std::collections::BTreeSet::new();
        let entries = self
            .scenelets
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let f = format!("scenelets[{i}]");
                if !seen.insert(d.id.as_str()) {
                    return Err(invalid(format!("{f}.id"), format!("duplicate scenelet id `{}`", d.id)));
                }
                if d.frames.is_empty() {
                    return Err(invalid(format!("{f}.frames"), "a scenelet needs at least one frame"));
                }
                if d.center_frame >= d.frames.len() {
                    return Err(invalid(
                        format!("{f}.center_frame"),
                        format!("{} is past the last of {} frames", d.center_frame, d.frames.len()),
                    ));
                }
                if d.motion.samples_cm.len() != d.motion.pelvis_m.len() {
                    return Err(invalid(format!("{f}.motion.pelvis_m"), "one pelvis location per sample"));
                }
                Ok(SceneletEntry {
                    scenelet: Scenelet {
                        id: d.id.clone(),
                        source_scene: d.source_scene.clone(),
                        origin: d.origin.to_placement(&format!("{f}.origin"))?,
                        center: d.center_frame,
                        frames: frames_from(&d.frames, &format!("{f}.frames"))?,
                        objects: objects_from(&d.objects, &format!("{f}.objects"))?,
                    },
                    motion: MotionDescriptor {
                        samples: d.motion.samples_cm.clone(),
                        pelvis: d.motion.pelvis_m.iter().map(v3).collect(),
                    },
                    objects: ObjectDescriptor {
                        bin_size: d.layout.bin_size_m,
                        grids: d.layout.grids.clone(),
                    },
                    charness: CharnessRecord {
                        bins: d.charness.bins.clone(),
                        scenelet: d.charness.scenelet,
                        density: d.charness.density,
                    },
                })
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(SceneletDb {
            categories: self.categories.clone(),
            params: self.params.clone(),
            entries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingDoc {
    pub scene_id: String,
    pub frames: Vec<PoseFrameDoc>,
    pub objects: Vec<ObjectDoc>,
}

impl Document for RecordingDoc {
    const FORMAT: &'static str = "recording";
    const COMPACT: bool = true;
}

impl From<&Recording> for RecordingDoc {
    fn from(r: &Recording) -> Self {
        RecordingDoc {
            scene_id: r.scene_id.clone(),
            frames: r.frames.iter().map(Into::into).collect(),
            objects: r.objects.iter().map(Into::into).collect(),
        }
    }
}

impl RecordingDoc {
    pub fn to_recording(&self) -> std::result::Result<Recording, Invalid> {
        Ok(Recording {
            scene_id: self.scene_id.clone(),
            frames: frames_from(&self.frames, "frames")?,
            objects: objects_from(&self.objects, "objects")?,
        })
    }
}

/// Per-joint `[u_px, v_px, confidence]`.
pub type JointDetections = BTreeMap<Joint, [f64; 3]>;

fn detections_to_map(u: &[Vec2; NUM_JOINTS], c: &[f64; NUM_JOINTS]) -> JointDetections {
    Joint::ALL.iter().map(|&j| (j, [u[j.index()].x, u[j.index()].y, c[j.index()]])).collect()
}

fn detections_from_map(
    map: &JointDetections,
    field: &str,
) -> std::result::Result<([Vec2; NUM_JOINTS], [f64; NUM_JOINTS]), Invalid> {
    let mut u = [Vec2::zeros(); NUM_JOINTS];
    let mut c = [0.0; NUM_JOINTS];
    for j in Joint::ALL {
        let f = format!("{field}.{}", j.name());
        let v = map.get(&j).ok_or_else(|| invalid(&f, "missing joint"))?;
        finite(v, &f)?;
        if !(0.0..=1.0).contains(&v[2]) {
            return Err(invalid(f, format!("confidence {} outside [0, 1]", v[2])));
        }
        u[j.index()] = Vec2::new(v[0], v[1]);
        c[j.index()] = v[2];
    }
    Ok((u, c))
}

fn pose_to_map(p: &Pose) -> BTreeMap<Joint, P3> {
    Joint::ALL.iter().map(|&j| (j, p3(&p[j.index()]))).collect()
}

fn pose_from_map(map: &BTreeMap<Joint, P3>, field: &str) -> std::result::Result<Pose, Invalid> {
    let mut p = [Vec3::zeros(); NUM_JOINTS];
    for j in Joint::ALL {
        let f = format!("{field}.{}", j.name());
        let v = map.get(&j).ok_or_else(|| invalid(&f, "missing joint"))?;
        finite(v, &f)?;
        p[j.index()] = v3(v);
    }
    Ok(p)
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFrameDoc {
    #[serde(default = "yes")]
    pub valid: bool,
    pub joints_px: JointDetections,
    /// Pelvis-centered 3D pose.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_pose_m: Option<BTreeMap<Joint, P3>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackActorDoc {
    /// Video frame of the actor's first track frame.
    #[serde(default)]
    pub first_frame: usize,
    pub frames: Vec<TrackFrameDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackDoc {
    pub frame_rate_hz: f64,
    pub actors: Vec<TrackActorDoc>,
}

impl Document for TrackDoc {
    const FORMAT: &'static str = "track";
}

impl TrackDoc {
    /// One actor per range of `track.actors`, starting at the given video
    /// frames.
    pub fn from_track(track: &ObservationTrack, first_frames: &[usize]) -> Self {
        TrackDoc {
            frame_rate_hz: track.frame_rate,
            actors: track
                .actors
                .iter()
                .enumerate()
                .map(|(a, r)| TrackActorDoc {
                    first_frame: first_frames.get(a).copied().unwrap_or(0),
                    frames: track.frames[r.clone()]
                        .iter()
                        .map(|f| TrackFrameDoc {
                            valid: f.valid,
                            joints_px: detections_to_map(&f.joints_px, &f.confidence),
                            local_pose_m: f.local_pose.as_ref().map(pose_to_map),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn first_frames(&self) -> Vec<usize> {
        self.actors.iter().map(|a| a.first_frame).collect()
    }

    pub fn to_track(&self) -> std::result::Result<ObservationTrack, Invalid> {
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return Err(invalid("frame_rate_hz", "must be positive"));
        }
        let mut tracks = Vec::new();
        for (a, actor) in self.actors.iter().enumerate() {
            if actor.frames.is_empty() {
                return Err(invalid(format!("actors[{a}].frames"), "an actor needs at least one frame"));
            }
            let frames = actor
                .frames
                .iter()
                .enumerate()
                .map(|(t, f)| {
                    let field = format!("actors[{a}].frames[{t}]");
                    let (joints_px, confidence) = detections_from_map(&f.joints_px, &format!("{field}.joints_px"))?;
                    let local_pose = f
                        .local_pose_m
                        .as_ref()
                        .map(|m| pose_from_map(m, &format!("{field}.local_pose_m")))
                        .transpose()?;
                    Ok(ObservedFrame {
                        joints_px,
                        confidence,
                        local_pose,
                        valid: f.valid,
                    })
                })
                .collect::<std::result::Result<_, Invalid>>()?;
            tracks.push(ObservationTrack::single_actor(self.frame_rate_hz, frames));
        }
        if tracks.is_empty() {
            return Err(invalid("actors", "a track needs at least one actor"));
        }
        ObservationTrack::concat(tracks).map_err(|e| invalid("actors", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectedSkeletonDoc {
    pub joints_px: JointDetections,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_pose_m: Option<BTreeMap<Joint, P3>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFrameDoc {
    pub skeletons: Vec<DetectedSkeletonDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsDoc {
    pub frame_rate_hz: f64,
    pub image_half_diagonal_px: f64,
    pub frames: Vec<DetectionFrameDoc>,
}

impl Document for DetectionsDoc {
    const FORMAT: &'static str = "detections";
}

impl DetectionsDoc {
    pub fn from_frames(frame_rate: f64, frames: &[DetectionFrame]) -> Self {
        DetectionsDoc {
            frame_rate_hz: frame_rate,
            image_half_diagonal_px: frames.first().map_or(1.0, |f| f.diag_px),
            frames: frames
                .iter()
                .map(|f| DetectionFrameDoc {
                    skeletons: f
                        .skeletons
                        .iter()
                        .map(|s| DetectedSkeletonDoc {
                            joints_px: detections_to_map(&s.joints_px, &s.confidence),
                            local_pose_m: s.local_pose.as_ref().map(pose_to_map),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_frames(&self) -> std::result::Result<Vec<DetectionFrame>, Invalid> {
        if !(self.image_half_diagonal_px > 0.0) {
            return Err(invalid("image_half_diagonal_px", "must be positive"));
        }
        self.frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let skeletons = f
                    .skeletons
                    .iter()
                    .enumerate()
                    .map(|(s, d)| {
                        let field = format!("frames[{t}].skeletons[{s}]");
                        let (joints_px, confidence) =
                            detections_from_map(&d.joints_px, &format!("{field}.joints_px"))?;
                        let local_pose = d
                            .local_pose_m
                            .as_ref()
                            .map(|m| pose_from_map(m, &format!("{field}.local_pose_m")))
                            .transpose()?;
                        Ok(Skeleton2d {
                            joints_px,
                            confidence,
                            local_pose,
                        })
                    })
                    .collect::<std::result::Result<_, Invalid>>()?;
                Ok(DetectionFrame {
                    skeletons,
                    diag_px: self.image_half_diagonal_px,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationsDoc {
    pub pins: Vec<Pin>,
}

impl Document for AnnotationsDoc {
    const FORMAT: &'static str = "annotations";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneActorDoc {
    pub first_frame: usize,
    /// Per-frame world joint positions in joint-index order.
    pub joints_m: Vec<[P3; NUM_JOINTS]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObjectDoc {
    pub label: String,
    pub placement: PlacementDoc,
    pub cuboids: Vec<CuboidDoc>,
    /// Whether the actor interacts with the object; known for ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interacted: Option<bool>,
}

impl SceneObjectDoc {
    fn new(o: &PlacedObject, interacted: Option<bool>) -> Self {
        let d = ObjectDoc::from(o);
        SceneObjectDoc {
            label: d.label,
            placement: d.placement,
            cuboids: d.cuboids,
            interacted,
        }
    }

    pub fn to_object(&self, field: &str) -> std::result::Result<PlacedObject, Invalid> {
        ObjectDoc {
            label: self.label.clone(),
            placement: self.placement,
            cuboids: self.cuboids.clone(),
        }
        .to_object(field)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneletUseDoc {
    pub id: String,
    pub start_frame: usize,
    pub placement: PlacementDoc,
}

/// A reconstructed or ground-truth scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDoc {
    pub frame_rate_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraDoc>,
    pub actors: Vec<SceneActorDoc>,
    pub objects: Vec<SceneObjectDoc>,
    #[serde(default)]
    pub scenelets: Vec<SceneletUseDoc>,
    /// Frames where at least half of the joints are hidden from the camera.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hidden_frames: Vec<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<StageDiagnostic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyBreakdown>,
}

impl Document for SceneDoc {
    const FORMAT: &'static str = "scene";
}

fn joints_doc(p: &Pose) -> [P3; NUM_JOINTS] {
    p.map(|q| p3(&q))
}

impl SceneDoc {
    pub fn from_truth(scene: &GroundTruthScene, hidden_frames: Vec<bool>) -> Self {
        SceneDoc {
            frame_rate_hz: scene.frame_rate,
            camera: Some((&scene.camera).into()),
            actors: vec![SceneActorDoc {
                first_frame: 0,
                joints_m: scene.frames.iter().map(|f| joints_doc(&f.joints)).collect(),
            }],
            objects: scene
                .objects
                .iter()
                .map(|o| SceneObjectDoc::new(&o.object, Some(o.interacted)))
                .collect(),
            scenelets: scene
                .generating
                .iter()
                .map(|g| SceneletUseDoc {
                    id: g.id.clone(),
                    start_frame: g.start_frame,
                    placement: (&g.placement).into(),
                })
                .collect(),
            hidden_frames,
            diagnostics: Vec::new(),
            energy: None,
        }
    }

    /// The pipeline result; `first_frames` places each actor of the input
    /// track in the video.
    pub fn from_output(
        out: &PipelineOutput,
        db: &SceneletDb,
        camera: &Camera,
        first_frames: &[usize],
    ) -> Self {
        SceneDoc {
            frame_rate_hz: out.track.frame_rate,
            camera: Some(camera.into()),
            actors: out
                .track
                .actors
                .iter()
                .enumerate()
                .map(|(a, r)| SceneActorDoc {
                    first_frame: first_frames.get(a).copied().unwrap_or(0),
                    joints_m: out.joints[r.clone()].iter().map(joints_doc).collect(),
                })
                .collect(),
            objects: out
                .objects
                .iter()
                .map(|o| SceneObjectDoc::new(&o.object, None))
                .collect(),
            scenelets: out
                .state
                .assignment
                .entries()
                .iter()
                .map(|e| SceneletUseDoc {
                    id: db.entries[e.scenelet].scenelet.id.clone(),
                    start_frame: e.start,
                    placement: (&out.state.placements[e.start]).into(),
                })
                .collect(),
            hidden_frames: Vec::new(),
            diagnostics: out.diagnostics.clone(),
            energy: Some(out.breakdown),
        }
    }

    /// World poses of all actors, concatenated in actor order.
    pub fn poses(&self) -> std::result::Result<Vec<Pose>, Invalid> {
        let mut out = Vec::new();
        for (a, actor) in self.actors.iter().enumerate() {
            for (t, j) in actor.joints_m.iter().enumerate() {
                let flat: Vec<f64> = j.iter().flatten().copied().collect();
                finite(&flat, &format!("actors[{a}].joints_m[{t}]"))?;
                out.push(j.map(|q| v3(&q)));
            }
        }
        Ok(out)
    }

    pub fn objects(&self) -> std::result::Result<Vec<PlacedObject>, Invalid> {
        self.objects
            .iter()
            .enumerate()
            .map(|(i, o)| o.to_object(&format!("objects[{i}]")))
            .collect()
    }

    pub fn camera(&self) -> std::result::Result<Option<Camera>, Invalid> {
        self.camera.as_ref().map(|c| c.to_camera("camera")).transpose()
    }

    pub fn to_truth(&self) -> std::result::Result<GroundTruthScene, Invalid> {
        let camera = self.camera()?.ok_or_else(|| invalid("camera", "a ground-truth scene needs a camera"))?;
        let dt = 1.0 / self.frame_rate_hz;
        let frames = self
            .poses()?
            .into_iter()
            .enumerate()
            .map(|(t, p)| SkeletonFrame::new(p, t as f64 * dt))
            .collect();
        let objects = self
            .objects()?
            .into_iter()
            .zip(&self.objects)
            .map(|(object, d)| TruthObject {
                object,
                interacted: d.interacted.unwrap_or(false),
            })
            .collect();
        let generating = self
            .scenelets
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(GeneratingScenelet {
                    id: s.id.clone(),
                    start_frame: s.start_frame,
                    placement: s.placement.to_placement(&format!("scenelets[{i}].placement"))?,
                })
            })
            .collect::<std::result::Result<_, Invalid>>()?;
        Ok(GroundTruthScene {
            camera,
            frame_rate: self.frame_rate_hz,
            frames,
            objects,
            generating,
        })
    }
}

/// Every tunable of every stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pipeline: PipelineConfig,
    pub database: DbParams,
    pub render: RenderConfig,
    pub tracker: TrackerConfig,
}

impl Document for Config {
    const FORMAT: &'static str = "config";
}

/// Recipe for a synthetic scene and its rendering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateDoc {
    pub scene: SceneTemplate,
    pub render: RenderConfig,
}

impl Document for TemplateDoc {
    const FORMAT: &'static str = "template";
}

/// Wavefront OBJ text with one box per cuboid and one polyline per actor
/// through its pelvis positions.
pub fn scene_to_obj(scene: &SceneDoc) -> std::result::Result<String, Invalid> {
    use std::fmt::Write;
    const FACES: [[usize; 4]; 6] = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let mut out = String::new();
    let mut next = 1;
    for (i, o) in scene.objects()?.iter().enumerate() {
        let _ = writeln!(out, "o {}_{i}", o.label);
        for c in &o.cuboids {
            let pose = c.world_pose(&o.placement);
            for q in c.corners_local() {
                let w = pose.apply(&q);
                let _ = writeln!(out, "v {} {} {}", w.x, w.y, w.z);
            }
            for f in FACES {
                let _ = writeln!(out, "f {} {} {} {}", next + f[0], next + f[1], next + f[2], next + f[3]);
            }
            next += 8;
        }
    }
    let pel = Joint::Pelvis.index();
    for (a, actor) in scene.actors.iter().enumerate() {
        if actor.joints_m.is_empty() {
            continue;
        }
        let _ = writeln!(out, "o pelvis_{a}");
        for j in &actor.joints_m {
            let _ = writeln!(out, "v {} {} {}", j[pel][0], j[pel][1], j[pel][2]);
        }
        let ids: Vec<String> = (next..next + actor.joints_m.len()).map(|i| i.to_string()).collect();
        let _ = writeln!(out, "l {}", ids.join(" "));
        next += actor.joints_m.len();
    }
    Ok(out)
}

fn converted<T>(r: std::result::Result<T, Invalid>, file: &str) -> Result<T> {
    r.map_err(|e| e.into_error(file))
}

fn name(path: &Path) -> String {
    path.display().to_string()
}

pub fn load_database(path: &Path) -> Result<SceneletDb> {
    converted(load::<DatabaseDoc>(path)?.to_database(), &name(path))
}

pub fn save_database(path: &Path, db: &SceneletDb) -> Result<()> {
    save(path, &DatabaseDoc::from(db))
}

pub fn load_recording(path: &Path) -> Result<Recording> {
    converted(load::<RecordingDoc>(path)?.to_recording(), &name(path))
}

pub fn save_recording(path: &Path, r: &Recording) -> Result<()> {
    save(path, &RecordingDoc::from(r))
}

/// The track with the video frame at which each actor starts.
pub fn load_track(path: &Path) -> Result<(ObservationTrack, Vec<usize>)> {
    let doc: TrackDoc = load(path)?;
    let track = converted(doc.to_track(), &name(path))?;
    Ok((track, doc.first_frames()))
}

pub fn save_track(path: &Path, track: &ObservationTrack, first_frames: &[usize]) -> Result<()> {
    save(path, &TrackDoc::from_track(track, first_frames))
}

pub fn load_camera(path: &Path) -> Result<Camera> {
    converted(load::<CameraDoc>(path)?.to_camera(""), &name(path))
}

pub fn save_camera(path: &Path, camera: &Camera) -> Result<()> {
    save(path, &CameraDoc::from(camera))
}

pub fn load_detections(path: &Path) -> Result<(Vec<DetectionFrame>, f64)> {
    let doc: DetectionsDoc = load(path)?;
    Ok((converted(doc.to_frames(), &name(path))?, doc.frame_rate_hz))
}

pub fn load_config(path: &Path) -> Result<Config> {
    let config: Config = load(path)?;
    config
        .pipeline
        .validate()
        .map_err(|e| schema(&name(path), "body.pipeline", e))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;

    fn doc_error(text: &str) -> (String, String) {
        match from_str::<CameraDoc>(text, "cam.json") {
            Err(Error::Schema { field, message, .. }) => (field, message),
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    fn camera() -> Camera {
        Camera::look_at(1000.0, 990.0, 1920.0, 1080.0, Vec3::new(0.3, -5.0, 1.6), Vec3::new(0.0, 0.0, 0.9)).unwrap()
    }

    #[test]
    fn camera_round_trips() {
        let cam = camera();
        let text = to_string(&CameraDoc::from(&cam)).unwrap();
        let back = from_str::<CameraDoc>(&text, "x").unwrap().to_camera("").unwrap();
        assert_eq!(back, cam);
        assert_eq!(to_string(&CameraDoc::from(&back)).unwrap(), text);
    }

    #[test]
    fn missing_field_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&to_string(&CameraDoc::from(&camera())).unwrap()).unwrap();
        v["body"].as_object_mut().unwrap().remove("fy_px");
        let (field, message) = doc_error(&v.to_string());
        assert_eq!(field, "body");
        assert!(message.contains("fy_px"), "{message}");
    }

    #[test]
    fn unknown_and_mistyped_fields_report_their_path() {
        let mut v: serde_json::Value = serde_json::from_str(&to_string(&CameraDoc::from(&camera())).unwrap()).unwrap();
        v["body"]["focal"] = 3.into();
        let (field, message) = doc_error(&v.to_string());
        assert_eq!(field, "body.focal");
        assert!(message.contains("unknown field"), "{message}");

        let mut v: serde_json::Value = serde_json::from_str(&to_string(&CameraDoc::from(&camera())).unwrap()).unwrap();
        v["body"]["world_to_camera"][2][1] = "x".into();
        let (field, message) = doc_error(&v.to_string());
        assert_eq!(field, "body.world_to_camera[2][1]");
        assert!(message.contains("expected f64"), "{message}");
    }

    #[test]
    fn header_is_checked() {
        let text = to_string(&CameraDoc::from(&camera())).unwrap();
        let other = text.replace("\"camera\"", "\"track\"");
        assert_eq!(doc_error(&other).0, "format");
        let newer = text.replace("\"version\": 1", "\"version\": 7");
        assert_eq!(doc_error(&newer).0, "version");
    }

    #[test]
    fn config_echoes_back() {
        let c = Config::default();
        let text = to_string(&c).unwrap();
        let back: Config = from_str(&text, "c").unwrap();
        assert_eq!(back, c);
        assert_eq!(to_string(&back).unwrap(), text);
        // partial documents fill in defaults
        let partial = r#"{"format": "config", "version": 1, "body": {"pipeline": {"stride": 7}}}"#;
        let p: Config = from_str(partial, "c").unwrap();
        assert_eq!(p.pipeline.stride, 7);
        assert_eq!(p.pipeline.energy, c.pipeline.energy);
    }

    #[test]
    fn missing_joint_is_named() {
        let track = ObservationTrack::single_actor(
            10.0,
            vec![ObservedFrame {
                joints_px: [Vec2::new(1.0, 2.0); NUM_JOINTS],
                confidence: [0.5; NUM_JOINTS],
                local_pose: None,
                valid: true,
            }],
        );
        let mut doc = TrackDoc::from_track(&track, &[0]);
        doc.actors[0].frames[0].joints_px.remove(&Joint::Neck);
        let err = converted(doc.to_track(), "t.json").unwrap_err();
        match err {
            Error::Schema { field, .. } => assert_eq!(field, "body.actors[0].frames[0].joints_px.neck"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn truth_scene_round_trips() {
        let db = synth::synthetic_database(12, 2, DbParams::default()).unwrap();
        let template = SceneTemplate {
            interactions: vec![synth::InteractionTemplate {
                category: "chair".into(),
                scenelet: None,
            }],
            min_charness: 0.0,
            ..SceneTemplate::default()
        };
        let scene = synth::generate_scene(&db, &template, 1).unwrap();
        let doc = SceneDoc::from_truth(&scene, vec![false; scene.frames.len()]);
        let text = to_string(&doc).unwrap();
        let back: SceneDoc = from_str(&text, "s").unwrap();
        assert_eq!(back, doc);
        let truth = back.to_truth().unwrap();
        assert_eq!(truth.objects, scene.objects);
        assert_eq!(truth.poses(), scene.poses());
        assert_eq!(truth.generating, scene.generating);
    }

    #[test]
    fn database_round_trips() {
        let db = synth::synthetic_database(10, 4, DbParams::default()).unwrap();
        let text = to_string(&DatabaseDoc::from(&db)).unwrap();
        let back = from_str::<DatabaseDoc>(&text, "d").unwrap().to_database().unwrap();
        assert_eq!(back, db);
        assert_eq!(to_string(&DatabaseDoc::from(&back)).unwrap(), text);
    }

    #[test]
    fn obj_has_a_box_per_cuboid_and_a_pelvis_line() {
        let scene = SceneDoc {
            frame_rate_hz: 10.0,
            camera: None,
            actors: vec![SceneActorDoc {
                first_frame: 0,
                joints_m: vec![[[0.0, 0.0, 1.0]; NUM_JOINTS]; 3],
            }],
            objects: vec![SceneObjectDoc::new(&synth::table(Placement::new(1.0, 2.0, 0.0, 0.5)), None)],
            scenelets: Vec::new(),
            hidden_frames: Vec::new(),
            diagnostics: Vec::new(),
            energy: None,
        };
        let obj = scene_to_obj(&scene).unwrap();
        let count = |p: &str| obj.lines().filter(|l| l.starts_with(p)).count();
        let cuboids = synth::table(Placement::identity()).cuboids.len();
        assert_eq!(count("v "), 8 * cuboids + 3);
        assert_eq!(count("f "), 6 * cuboids);
        assert_eq!(obj.lines().last().unwrap(), format!("l {} {} {}", 8 * cuboids + 1, 8 * cuboids + 2, 8 * cuboids + 3));
    }

    fn arb_f64() -> impl Strategy<Value = f64> {
        prop_oneof![-1e3f64..1e3, any::<f64>().prop_filter("finite", |v| v.is_finite())]
    }

    fn arb_track() -> impl Strategy<Value = ObservationTrack> {
        let frame = (
            prop::array::uniform16((arb_f64(), arb_f64())),
            prop::array::uniform16(0.0f64..=1.0),
            prop::option::of(prop::array::uniform16((arb_f64(), arb_f64(), arb_f64()))),
            any::<bool>(),
        )
            .prop_map(|(u, c, l, valid)| ObservedFrame {
                joints_px: u.map(|(x, y)| Vec2::new(x, y)),
                confidence: c,
                local_pose: l.map(|l| l.map(|(x, y, z)| Vec3::new(x, y, z))),
                valid,
            });
        (prop::collection::vec(prop::collection::vec(frame, 1..5), 1..3), 1.0f64..60.0).prop_map(|(actors, rate)| {
            ObservationTrack::concat(actors.into_iter().map(|f| ObservationTrack::single_actor(rate, f)).collect())
                .unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn track_save_load_is_identity(track in arb_track(), first in 0usize..100) {
            let firsts: Vec<usize> = (0..track.actors.len()).map(|a| first + a).collect();
            let text = to_string(&TrackDoc::from_track(&track, &firsts)).unwrap();
            let doc: TrackDoc = from_str(&text, "t").unwrap();
            prop_assert_eq!(doc.to_track().unwrap(), track);
            prop_assert_eq!(doc.first_frames(), firsts);
            prop_assert_eq!(to_string(&doc).unwrap(), text);
        }

        #[test]
        fn placement_and_object_round_trip(
            x in arb_f64(), y in arb_f64(), z in arb_f64(), theta in -10.0f64..10.0,
            h in (0.01f64..3.0, 0.01f64..3.0, 0.01f64..3.0),
        ) {
            let o = PlacedObject {
                label: "desk".into(),
                placement: Placement::new(x, y, z, theta),
                cuboids: vec![Cuboid::new(Vec3::new(x, y, z), Vec3::new(h.0, h.1, h.2), theta).unwrap()],
            };
            let text = serde_json::to_string(&ObjectDoc::from(&o)).unwrap();
            let back: ObjectDoc = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back.to_object("o").unwrap(), o);
        }
    }
}
