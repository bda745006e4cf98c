//! Scenelet database: extraction of short motion clips with nearby objects
//! from capture recordings, motion and object descriptors, spatial density
//! normalization and charness.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{union_area_in, Placement, PlacedObject, Vec2, Vec3};
use crate::skeleton::{heading_of, Joint, SkeletonFrame};

/// Number of pose samples in a motion descriptor.
pub const MOTION_SAMPLES: usize = 15;
/// Length of a static pose descriptor.
pub const POSE_DIMS: usize = 14;
/// Object descriptor grids are `GRID x GRID`.
pub const GRID: usize = 5;
/// Pose descriptors are expressed in centimeters so that the charness
/// kernel width operates on the scale it was tuned for.
pub const DESCRIPTOR_UNITS_PER_METER: f64 = 100.0;

pub const DEFAULT_CATEGORIES: [&str; 9] = [
    "chair",
    "couch",
    "table",
    "bed",
    "shelf",
    "desk",
    "monitor",
    "whiteboard",
    "other",
];

pub fn default_categories() -> Vec<String> {
    DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbParams {
    #[serde(rename = "arc_length_m")]
    pub arc_length: f64,
    #[serde(rename = "spacing_m")]
    pub spacing: f64,
    #[serde(rename = "interaction_radius_m")]
    pub interaction_radius: f64,
    #[serde(rename = "bin_size_m")]
    pub bin_size: f64,
    #[serde(rename = "kde_bandwidth_m")]
    pub kde_bandwidth: f64,
    /// Width of the motion similarity kernel, in descriptor units (cm).
    #[serde(rename = "sigma_cm")]
    pub sigma: f64,
    pub smoothing_iterations: usize,
    #[serde(rename = "smoothing_radius_m")]
    pub smoothing_radius: f64,
}

impl Default for DbParams {
    fn default() -> Self {
        DbParams {
            arc_length: 1.5,
            spacing: 0.25,
            interaction_radius: 1.0,
            bin_size: 0.4,
            kde_bandwidth: 0.5,
            sigma: 13.0,
            smoothing_iterations: 10,
            smoothing_radius: 0.01,
        }
    }
}

/// A labeled capture session: world-space motion plus the scene's objects.
#[derive(Debug, Clone)]
pub struct Recording {
    pub scene_id: String,
    pub frames: Vec<SkeletonFrame>,
    pub objects: Vec<PlacedObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenelet {
    pub id: String,
    pub source_scene: String,
    /// Local frame in source-scene coordinates (ground position + heading
    /// of the center frame's pelvis).
    pub origin: Placement,
    /// Index of the center frame within `frames`.
    pub center: usize,
    /// Motion clip in the local frame.
    pub frames: Vec<SkeletonFrame>,
    /// Objects in the local frame.
    pub objects: Vec<PlacedObject>,
}

impl Scenelet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Cumulative arc length of a polyline, starting at zero.
pub fn cumulative_arc_length(points: &[Vec3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut s = 0.0;
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            s += (p - points[i - 1]).norm();
        }
        out.push(s);
    }
    out
}

/// Average position of the polyline over the arc-length window `[a, b]`.
fn window_mean(points: &[Vec3], s: &[f64], a: f64, b: f64) -> Vec3 {
    let mut acc = Vec3::zeros();
    let mut len = 0.0;
    for i in 1..points.len() {
        let (s0, s1) = (s[i - 1], s[i]);
        let lo = s0.max(a);
        let hi = s1.min(b);
        if hi <= lo || s1 <= s0 {
            continue;
        }
        let at = |t: f64| points[i - 1] + (points[i] - points[i - 1]) * ((t - s0) / (s1 - s0));
        // the segment is linear: its mean over [lo, hi] is the midpoint
        acc += (at(lo) + at(hi)) * 0.5 * (hi - lo);
        len += hi - lo;
    }
    if len > 0.0 {
        acc / len
    } else {
        points[0]
    }
}

/// Repeated arc-length moving average. The window around each point is
/// symmetric and shrinks near the ends, so endpoints stay fixed and
/// straight segments are reproduced exactly.
pub fn smooth_trajectory(points: &[Vec3], iterations: usize, radius: f64) -> Vec<Vec3> {
    let mut cur = points.to_vec();
    if cur.len() < 2 {
        return cur;
    }
    for _ in 0..iterations {
        let s = cumulative_arc_length(&cur);
        let total = *s.last().unwrap();
        let next: Vec<Vec3> = (0..cur.len())
            .map(|i| {
                let r = radius.min(s[i]).min(total - s[i]);
                if r <= 0.0 {
                    cur[i]
                } else {
                    window_mean(&cur, &s, s[i] - r, s[i] + r)
                }
            })
            .collect();
        cur = next;
    }
    cur
}

/// Objects whose footprint comes within `radius` of the ground-projected
/// pelvis of any clip frame.
pub fn select_objects(clip: &[SkeletonFrame], objects: &[PlacedObject], radius: f64) -> Vec<PlacedObject> {
    objects
        .iter()
        .filter(|o| {
            let feet = o.footprints();
            clip.iter().any(|f| {
                let p = f.pelvis().xy();
                let d = feet
                    .iter()
                    .map(|poly| poly.signed_distance(&p).max(0.0))
                    .fold(f64::INFINITY, f64::min);
                d <= radius
            })
        })
        .cloned()
        .collect()
}

/// Moves a clip and its objects into the local frame of frame `center`.
pub fn canonicalize(
    frames: &[SkeletonFrame],
    objects: &[PlacedObject],
    center: usize,
) -> (Placement, Vec<SkeletonFrame>, Vec<PlacedObject>) {
    let c = &frames[center];
    let p = c.pelvis();
    let origin = Placement::new(p.x, p.y, 0.0, heading_of(&c.joints));
    let inv = origin.inverse();
    let frames = frames.iter().map(|f| f.transformed(&inv)).collect();
    let objects = objects
        .iter()
        .map(|o| PlacedObject {
            label: o.label.clone(),
            placement: inv.compose(&o.placement),
            cuboids: o.cuboids.clone(),
        })
        .collect();
    (origin, frames, objects)
}

/// Cuts a recording into scenelets centered at regular arc-length
/// intervals of the smoothed pelvis trajectory.
pub fn extract_scenelets(recording: &Recording, params: &DbParams) -> Result<Vec<Scenelet>> {
    if !(params.arc_length > 0.0 && params.spacing > 0.0) {
        return Err(Error::InvalidInput("arc length and spacing must be positive".into()));
    }
    let frames = &recording.frames;
    if frames.is_empty() {
        return Err(Error::InvalidInput(format!(
            "recording {} has no frames",
            recording.scene_id
        )));
    }
    let pelvis: Vec<Vec3> = frames.iter().map(|f| f.pelvis()).collect();
    let smoothed = smooth_trajectory(&pelvis, params.smoothing_iterations, params.smoothing_radius);
    let s = cumulative_arc_length(&smoothed);
    let total = *s.last().unwrap();
    let half = params.arc_length / 2.0;
    let eps = 1e-9 * params.arc_length.max(1.0);
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let c = half + i as f64 * params.spacing;
        if c + half > total + eps {
            break;
        }
        let lo = c - half;
        let hi = c + half;
        let start = s.iter().rposition(|&v| v <= lo + eps).unwrap_or(0);
        let end = s
            .iter()
            .position(|&v| v >= hi - eps)
            .unwrap_or(frames.len() - 1)
            .max(start);
        let best = (start..=end)
            .map(|k| (s[k] - c).abs())
            .fold(f64::INFINITY, f64::min);
        let tied: Vec<usize> = (start..=end).filter(|&k| (s[k] - c).abs() <= best + eps).collect();
        let center = tied[tied.len() / 2];
        let clip = &frames[start..=end];
        let objects = select_objects(clip, &recording.objects, params.interaction_radius);
        let (origin, mut local, local_objects) = canonicalize(clip, &objects, center - start);
        let t0 = frames[center].time;
        for f in &mut local {
            f.time -= t0;
        }
        out.push(Scenelet {
            id: format!("{}/{:04}", recording.scene_id, i),
            source_scene: recording.scene_id.clone(),
            origin,
            center: center - start,
            frames: local,
            objects: local_objects,
        });
        i += 1;
    }
    Ok(out)
}

/// Distance from `x` to the infinite line through `a` and `b`; collapses to
/// the point distance when the endpoints coincide.
pub fn point_line_distance(x: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let d = b - a;
    let n = d.norm();
    if n < 1e-12 {
        (x - a).norm()
    } else {
        d.cross(&(x - a)).norm() / n
    }
}

/// The 14 joint-line distances of one pose, in descriptor units.
pub fn pose_descriptor(frame: &SkeletonFrame) -> [f64; POSE_DIMS] {
    let j = |k: Joint| frame.joint(k);
    let shoulder_center = (j(Joint::ShoulderLeft) + j(Joint::ShoulderRight)) * 0.5;
    let pelvis = j(Joint::Pelvis);
    let ankle_mid = (j(Joint::AnkleLeft) + j(Joint::AnkleRight)) * 0.5;
    let torso = |k: Joint| point_line_distance(&j(k), &shoulder_center, &pelvis);
    let d = [
        torso(Joint::WristLeft),
        torso(Joint::WristRight),
        torso(Joint::ElbowLeft),
        torso(Joint::ElbowRight),
        torso(Joint::AnkleLeft),
        torso(Joint::AnkleRight),
        torso(Joint::KneeLeft),
        torso(Joint::KneeRight),
        point_line_distance(&j(Joint::WristLeft), &j(Joint::HipLeft), &j(Joint::HipRight)),
        point_line_distance(&j(Joint::WristRight), &j(Joint::HipLeft), &j(Joint::HipRight)),
        point_line_distance(&j(Joint::AnkleLeft), &j(Joint::ShoulderLeft), &j(Joint::ShoulderRight)),
        point_line_distance(&j(Joint::AnkleRight), &j(Joint::ShoulderLeft), &j(Joint::ShoulderRight)),
        point_line_distance(&j(Joint::HeadTop), &pelvis, &ankle_mid),
        point_line_distance(&pelvis, &j(Joint::AnkleLeft), &j(Joint::AnkleRight)),
    ];
    d.map(|v| v * DESCRIPTOR_UNITS_PER_METER)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionDescriptor {
    pub samples: Vec<[f64; POSE_DIMS]>,
    /// Pelvis locations (meters) at the sample positions.
    pub pelvis: Vec<Vec3>,
}

impl MotionDescriptor {
    pub fn flatten(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.iter().copied()).collect()
    }
}

/// Samples pose descriptors at even arc-length intervals of the clip's
/// trajectory in the joint pose-descriptor/pelvis space.
pub fn motion_descriptor(frames: &[SkeletonFrame]) -> Result<MotionDescriptor> {
    motion_descriptor_k(frames, MOTION_SAMPLES)
}

pub fn motion_descriptor_k(frames: &[SkeletonFrame], k: usize) -> Result<MotionDescriptor> {
    if frames.is_empty() || k < 2 {
        return Err(Error::InvalidInput(
            "motion descriptor needs a nonempty clip and at least two samples".into(),
        ));
    }
    let psi: Vec<[f64; POSE_DIMS]> = frames.iter().map(pose_descriptor).collect();
    let pel: Vec<Vec3> = frames.iter().map(|f| f.pelvis()).collect();
    let mut s = vec![0.0; frames.len()];
    for t in 1..frames.len() {
        let mut d2 = 0.0;
        for (a, b) in psi[t].iter().zip(&psi[t - 1]) {
            d2 += (a - b).powi(2);
        }
        d2 += ((pel[t] - pel[t - 1]) * DESCRIPTOR_UNITS_PER_METER).norm_squared();
        s[t] = s[t - 1] + d2.sqrt();
    }
    let total = *s.last().unwrap();
    if total <= 0.0 {
        return Ok(MotionDescriptor {
            samples: vec![psi[0]; k],
            pelvis: vec![pel[0]; k],
        });
    }
    let mut samples = Vec::with_capacity(k);
    let mut pelvis = Vec::with_capacity(k);
    let mut seg = 1;
    for i in 0..k {
        let target = total * i as f64 / (k - 1) as f64;
        while seg < frames.len() - 1 && s[seg] < target {
            seg += 1;
        }
        let (s0, s1) = (s[seg - 1], s[seg]);
        let w = if s1 > s0 {
            ((target - s0) / (s1 - s0)).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let mut v = [0.0; POSE_DIMS];
        for (d, out) in v.iter_mut().enumerate() {
            *out = psi[seg - 1][d] * (1.0 - w) + psi[seg][d] * w;
        }
        samples.push(v);
        pelvis.push(pel[seg - 1] * (1.0 - w) + pel[seg] * w);
    }
    Ok(MotionDescriptor { samples, pelvis })
}

/// Center-peaked triangular sample weights summing to one.
pub fn descriptor_weights(k: usize) -> Vec<f64> {
    let mid = (k as f64 + 1.0) / 2.0;
    let raw: Vec<f64> = (1..=k).map(|i| 1.0 - (i as f64 - mid).abs() / mid).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

pub fn descriptor_distance(a: &MotionDescriptor, b: &MotionDescriptor) -> f64 {
    assert_eq!(a.samples.len(), b.samples.len(), "descriptor sample counts differ");
    let w = descriptor_weights(a.samples.len());
    a.samples
        .iter()
        .zip(&b.samples)
        .zip(&w)
        .map(|((x, y), wi)| wi * x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

pub type Grid = [[f64; GRID]; GRID];

/// Per-category layout histograms; `grids[c][ix][iy]`, `ix` along local
/// forward.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDescriptor {
    pub bin_size: f64,
    pub grids: BTreeMap<String, Grid>,
}

/// Corners (counter-clockwise) of bin `(ix, iy)` in the scenelet frame.
pub fn bin_square(bin_size: f64, ix: usize, iy: usize) -> [Vec2; 4] {
    let x0 = -(GRID as f64) * bin_size / 2.0 + ix as f64 * bin_size;
    let y0 = -(GRID as f64) * bin_size / 2.0 + iy as f64 * bin_size;
    [
        Vec2::new(x0, y0),
        Vec2::new(x0 + bin_size, y0),
        Vec2::new(x0 + bin_size, y0 + bin_size),
        Vec2::new(x0, y0 + bin_size),
    ]
}

/// Per category and bin: the maximum over objects of the covered bin area,
/// normalized by the smaller of bin and object area.
pub fn object_descriptor(objects: &[PlacedObject], categories: &[String], bin_size: f64) -> ObjectDescriptor {
    let mut grids: BTreeMap<String, Grid> =
        categories.iter().map(|c| (c.clone(), [[0.0; GRID]; GRID])).collect();
    let bin_area = bin_size * bin_size;
    for o in objects {
        let Some(grid) = grids.get_mut(&o.label) else {
            log::warn!("object label `{}` is not in the category set; ignored", o.label);
            continue;
        };
        let feet = o.footprints();
        let area = o.footprint_area();
        let norm = area.min(bin_area);
        for (ix, row) in grid.iter_mut().enumerate() {
            for (iy, cell) in row.iter_mut().enumerate() {
                let covered = union_area_in(&feet, &bin_square(bin_size, ix, iy));
                *cell = cell.max((covered / norm).clamp(0.0, 1.0));
            }
        }
    }
    ObjectDescriptor { bin_size, grids }
}

/// Unnormalized 2D Gaussian kernel density (sum of unit-mass kernels).
pub fn kde_2d(points: &[Vec2], at: &Vec2, bandwidth: f64) -> f64 {
    let h2 = bandwidth * bandwidth;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * h2);
    points
        .iter()
        .map(|p| norm * (-(p - at).norm_squared() / (2.0 * h2)).exp())
        .sum()
}

pub fn gaussian(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharnessRecord {
    pub bins: BTreeMap<String, Grid>,
    pub scenelet: f64,
    pub density: f64,
}

/// Maximum bin charness over all categories.
pub fn scenelet_charness(bins: &BTreeMap<String, Grid>) -> f64 {
    bins.values()
        .flat_map(|g| g.iter().flat_map(|r| r.iter().copied()))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneletEntry {
    pub scenelet: Scenelet,
    pub motion: MotionDescriptor,
    pub objects: ObjectDescriptor,
    pub charness: CharnessRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneletDb {
    pub categories: Vec<String>,
    pub params: DbParams,
    pub entries: Vec<SceneletEntry>,
}

impl SceneletDb {
    pub fn empty() -> Self {
        SceneletDb {
            categories: default_categories(),
            params: DbParams::default(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<(usize, &SceneletEntry)> {
        self.entries.iter().enumerate().find(|(_, e)| e.scenelet.id == id)
    }

    /// Builds a database from recordings: extraction, descriptors, densities
    /// and charness.
    pub fn build(recordings: &[Recording], categories: Vec<String>, params: DbParams) -> Result<Self> {
        let mut scenelets = Vec::new();
        for r in recordings {
            scenelets.extend(extract_scenelets(r, &params)?);
        }
        Self::from_scenelets(scenelets, categories, params)
    }

    /// Computes descriptors, densities and charness for given scenelets.
    pub fn from_scenelets(scenelets: Vec<Scenelet>, categories: Vec<String>, params: DbParams) -> Result<Self> {
        let described: Vec<(MotionDescriptor, ObjectDescriptor)> = scenelets
            .par_iter()
            .map(|s| {
                Ok((
                    motion_descriptor(&s.frames)?,
                    object_descriptor(&s.objects, &categories, params.bin_size),
                ))
            })
            .collect::<Result<_>>()?;
        let mut entries: Vec<SceneletEntry> = scenelets
            .into_iter()
            .zip(described)
            .map(|(scenelet, (motion, objects))| SceneletEntry {
                scenelet,
                motion,
                objects,
                charness: CharnessRecord {
                    bins: BTreeMap::new(),
                    scenelet: 0.0,
                    density: 0.0,
                },
            })
            .collect();
        let densities: Vec<f64> = (0..entries.len())
            .map(|l| scenelet_density(&entries, l, params.kde_bandwidth))
            .collect();
        for (e, d) in entries.iter_mut().zip(&densities) {
            e.charness.density = *d;
        }
        let bins: Vec<BTreeMap<String, Grid>> = (0..entries.len())
            .into_par_iter()
            .map(|l| charness_bins(&entries, l, params.sigma))
            .collect();
        for (e, b) in entries.iter_mut().zip(bins) {
            e.charness.scenelet = scenelet_charness(&b);
            e.charness.bins = b;
        }
        Ok(SceneletDb {
            categories,
            params,
            entries,
        })
    }
}

/// KDE of scenelet origins from the same source scene, evaluated at the
/// origin of scenelet `l`.
pub fn scenelet_density(entries: &[SceneletEntry], l: usize, bandwidth: f64) -> f64 {
    let me = &entries[l].scenelet;
    let origins: Vec<Vec2> = entries
        .iter()
        .filter(|e| e.scenelet.source_scene == me.source_scene)
        .map(|e| e.scenelet.origin.ground())
        .collect();
    kde_2d(&origins, &me.origin.ground(), bandwidth)
}

/// Density-normalized, motion-similarity-weighted average of every bin
/// over the database.
pub fn charness_bins(entries: &[SceneletEntry], l: usize, sigma: f64) -> BTreeMap<String, Grid> {
    let me = &entries[l];
    let weights: Vec<f64> = entries
        .iter()
        .map(|e| gaussian(descriptor_distance(&e.motion, &me.motion), sigma) / e.charness.density)
        .collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.into_iter().map(|w| w / total).collect();
    me.objects
        .grids
        .keys()
        .map(|cat| {
            let mut g = [[0.0; GRID]; GRID];
            for (e, w) in entries.iter().zip(&weights) {
                if let Some(other) = e.objects.grids.get(cat) {
                    for ix in 0..GRID {
                        for iy in 0..GRID {
                            g[ix][iy] += w * other[ix][iy];
                        }
                    }
                }
            }
            (cat.clone(), g)
        })
        .collect()
}
