//! Staged scene synthesis: occluded-frame detection, static skeleton
//! fitting, charness-guided scenelet candidates, pruning, refinement over
//! candidate combinations and final object selection.

use std::collections::BTreeSet;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::percentile;
use crate::db::SceneletDb;
use crate::energy::{
    combined_joints, evaluate, scene_objects, total_energy, AssignedScenelet, Assignment, EnergyBreakdown,
    EnergyConfig, ObjectInstance, ObservationTrack, ObservedFrame, Problem, SceneState, Weights,
};
use crate::error::{Error, Result};
use crate::geometry::{angle_distance, union_area, Camera, Placement, Vec2};
use crate::optim::{minimize, LbfgsParams};
use crate::skeleton::{heading_of, Joint, Pose, NUM_JOINTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionParams {
    /// Winsorization percentile of per-frame mean joint speeds.
    pub winsor_percentile: f64,
    /// Speeds above `slack` times the percentile are flagged.
    pub velocity_slack: f64,
    pub min_mean_confidence: f64,
    /// Shortest flagged run that is given its own candidate anchor.
    pub min_run: usize,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        OcclusionParams {
            winsor_percentile: 95.0,
            velocity_slack: 2.0,
            min_mean_confidence: 0.5,
            min_run: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub energy: EnergyConfig,
    pub optimizer: LbfgsParams,
    pub occlusion: OcclusionParams,
    /// Multiply the smoothness weight by `frame_rate / 10`.
    pub scale_smoothness_with_frame_rate: bool,
    pub static_theta_starts: usize,
    pub stride: usize,
    /// Scale of the fit quality in the charness sweep, relative to the
    /// detected skeleton's image size.
    pub fit_quality: f64,
    pub min_charness: f64,
    pub nms_window: usize,
    pub max_maxima: usize,
    /// Candidate start frames are searched within this many frames of the
    /// center-aligned start.
    pub start_offsets: usize,
    pub candidate_iterations: usize,
    pub stage1_keep: usize,
    pub stage2_keep: usize,
    pub combination_budget: usize,
    pub beam_width: usize,
    pub refine_iterations: usize,
    /// Two results count as different when one has a scenelet with no
    /// same-id counterpart within this many frames in the other.
    pub diverse_window: usize,
    pub fit_scenelets: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            energy: EnergyConfig::default(),
            optimizer: LbfgsParams::default(),
            occlusion: OcclusionParams::default(),
            scale_smoothness_with_frame_rate: true,
            static_theta_starts: 8,
            stride: 5,
            fit_quality: 0.25,
            min_charness: 0.3,
            nms_window: 20,
            max_maxima: 5,
            start_offsets: 2,
            candidate_iterations: 60,
            stage1_keep: 200,
            stage2_keep: 3,
            combination_budget: 243,
            beam_width: 9,
            refine_iterations: 300,
            diverse_window: 10,
            fit_scenelets: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.energy.weights.validate()?;
        if self.stride == 0 || self.nms_window == 0 {
            return Err(Error::InvalidInput("stride and NMS window must be positive".into()));
        }
        if !(self.fit_quality > 0.0) {
            return Err(Error::InvalidInput("fit quality scale must be positive".into()));
        }
        Ok(())
    }

    /// Energy weights for a video at `frame_rate`.
    pub fn weights(&self, frame_rate: f64) -> Weights {
        let mut w = self.energy.weights;
        if self.scale_smoothness_with_frame_rate {
            w.smoothness *= frame_rate / 10.0;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMask {
    pub occluded: Vec<bool>,
    /// Flagged for a velocity outlier (detections there are discarded).
    pub velocity: Vec<bool>,
    pub reliable: Vec<[bool; NUM_JOINTS]>,
}

fn implausible(pose: &Pose) -> bool {
    let head = pose[Joint::HeadTop.index()].z;
    pose[Joint::KneeLeft.index()].z > head || pose[Joint::KneeRight.index()].z > head
}

fn mean_speed(a: &ObservedFrame, b: &ObservedFrame) -> f64 {
    a.joints_px
        .iter()
        .zip(&b.joints_px)
        .map(|(p, q)| (p - q).norm())
        .sum::<f64>()
        / NUM_JOINTS as f64
}

/// Flags frames with outlying joint velocities, implausible local poses,
/// low mean confidence or no usable detection.
pub fn detect_occluded_frames(track: &ObservationTrack, params: &OcclusionParams) -> OcclusionMask {
    let n = track.len();
    let mut velocity = vec![false; n];
    for r in &track.actors {
        if r.len() < 2 {
            continue;
        }
        let speeds: Vec<f64> = (r.start + 1..r.end)
            .map(|t| mean_speed(&track.frames[t - 1], &track.frames[t]))
            .collect();
        let bound = percentile(&speeds, params.winsor_percentile).unwrap_or(f64::INFINITY) * params.velocity_slack;
        let mut i = 0;
        while i < speeds.len() {
            if speeds[i] > bound {
                // a jump away and straight back isolates one bad frame
                velocity[r.start + 1 + i] = true;
                if i + 1 < speeds.len() && speeds[i + 1] > bound {
                    i += 1;
                }
            }
            i += 1;
        }
    }
    let occluded = (0..n)
        .map(|t| {
            let f = &track.frames[t];
            velocity[t]
                || !f.valid
                || f.local_pose.as_ref().is_none_or(implausible)
                || f.mean_confidence() < params.min_mean_confidence
        })
        .collect();
    let reliable = (0..n)
        .map(|t| std::array::from_fn(|k| !velocity[t] && track.confidence(t, k) >= 0.5))
        .collect();
    OcclusionMask {
        occluded,
        velocity,
        reliable,
    }
}

/// Replaces flagged frames' detections and local poses by linear
/// interpolation between the nearest unflagged frames of the same actor,
/// holding the end values beyond the first and last unflagged frame.
pub fn interpolate_occluded(track: &ObservationTrack, mask: &OcclusionMask) -> ObservationTrack {
    let mut out = track.clone();
    for r in &track.actors {
        let good: Vec<usize> = r.clone().filter(|&t| !mask.occluded[t]).collect();
        if good.is_empty() {
            continue;
        }
        for t in r.clone().filter(|&t| mask.occluded[t]) {
            let next = good.partition_point(|&g| g < t);
            let (a, b, s) = match (next.checked_sub(1).map(|i| good[i]), good.get(next).copied()) {
                (Some(a), Some(b)) => (a, b, (t - a) as f64 / (b - a) as f64),
                (Some(a), None) => (a, a, 0.0),
                (None, Some(b)) => (b, b, 0.0),
                (None, None) => unreachable!(),
            };
            let (fa, fb) = (&track.frames[a], &track.frames[b]);
            let f = &mut out.frames[t];
            f.joints_px = std::array::from_fn(|k| fa.joints_px[k] * (1.0 - s) + fb.joints_px[k] * s);
            if let (Some(pa), Some(pb)) = (&fa.local_pose, &fb.local_pose) {
                f.local_pose = Some(std::array::from_fn(|k| pa[k] * (1.0 - s) + pb[k] * s));
            }
        }
    }
    out
}

/// The track the energy sees: original detections and confidences, local
/// poses from the interpolated track, and velocity outliers replaced by
/// interpolated detections with zero confidence.
pub fn working_track(original: &ObservationTrack, interpolated: &ObservationTrack, mask: &OcclusionMask) -> ObservationTrack {
    let mut out = original.clone();
    for (t, f) in out.frames.iter_mut().enumerate() {
        let i = &interpolated.frames[t];
        f.local_pose = i.local_pose;
        if mask.velocity[t] {
            f.joints_px = i.joints_px;
            f.confidence = [0.0; NUM_JOINTS];
        }
    }
    out
}

/// Optimizes the placements of `active` frames, returning the new state
/// and its weighted energy.
pub fn optimize_state(
    problem: &Problem,
    state: &SceneState,
    weights: &Weights,
    active: &[usize],
    params: &LbfgsParams,
) -> Result<(SceneState, f64)> {
    let start = evaluate(problem, state, weights, false)?;
    if active.is_empty() {
        return Ok((state.clone(), start.breakdown.total));
    }
    let x0: Vec<f64> = active.iter().flat_map(|&t| state.placements[t].to_array()).collect();
    let apply = |x: &[f64]| {
        let mut s = state.clone();
        for (i, &t) in active.iter().enumerate() {
            s.placements[t] = Placement::from_array([x[4 * i], x[4 * i + 1], x[4 * i + 2], x[4 * i + 3]]);
        }
        s
    };
    let m = minimize(
        |x| {
            let s = apply(x);
            match evaluate(problem, &s, weights, true) {
                // excluded residuals must not become a way to shed error
                Ok(e) if e.breakdown.behind_camera > start.breakdown.behind_camera => {
                    (f64::INFINITY, vec![0.0; x.len()])
                }
                Ok(e) => {
                    let g = e.gradient.expect("gradient requested");
                    (e.breakdown.total, active.iter().flat_map(|&t| g[t]).collect())
                }
                Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
            }
        },
        x0,
        params,
    );
    Ok((apply(&m.x), m.value))
}

fn camera_depth_guess(camera: &Camera, frame: &ObservedFrame, local: &Pose) -> f64 {
    let pel = Joint::Pelvis.index();
    let (mut s2, mut s3, mut w) = (0.0, 0.0, 0.0);
    for k in 0..NUM_JOINTS {
        let c = frame.confidence[k].max(0.05);
        s2 += c * (frame.joints_px[k] - frame.joints_px[pel]).norm();
        s3 += c * local[k].norm();
        w += c;
    }
    let (s2, s3) = (s2 / w, s3 / w);
    if s2 < 1e-6 {
        return 5.0;
    }
    (0.5 * (camera.fx + camera.fy) * s3 / s2).clamp(0.5, 100.0)
}

/// Placement of a single frame fitted to its own detections, trying
/// several initial headings.
fn fit_single_frame(
    camera: &Camera,
    frame: &ObservedFrame,
    frame_rate: f64,
    config: &PipelineConfig,
) -> Result<Placement> {
    let local = frame.local_pose.ok_or(Error::MissingLocalPose { frame: 0 })?;
    let mut f = frame.clone();
    for c in f.confidence.iter_mut() {
        *c = c.max(0.05);
    }
    f.valid = true;
    let track = ObservationTrack::single_actor(frame_rate, vec![f]);
    let depth = camera_depth_guess(camera, frame, &local);
    let pel = camera.back_project(&frame.joints_px[Joint::Pelvis.index()], depth);
    let db = SceneletDb::empty();
    let problem = Problem {
        db: &db,
        track: &track,
        camera,
        config: &config.energy,
    };
    let weights = Weights {
        reprojection: 1.0,
        ..Weights::zero()
    };
    let params = LbfgsParams {
        max_iterations: 100,
        ..config.optimizer.clone()
    };
    let starts = config.static_theta_starts.max(1);
    let mut best: Option<(f64, Placement)> = None;
    for i in 0..starts {
        let theta = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / starts as f64;
        let state = SceneState::new(vec![Placement::new(pel.x, pel.y, pel.z, theta)]);
        let (s, e) = optimize_state(&problem, &state, &weights, &[0], &params)?;
        if best.as_ref().is_none_or(|b| e < b.0) {
            best = Some((e, s.placements[0]));
        }
    }
    Ok(best.expect("at least one start").1)
}

/// Per-frame skeleton placements minimizing reprojection and smoothness.
pub fn fit_static_skeletons(track: &ObservationTrack, camera: &Camera, config: &PipelineConfig) -> Result<Vec<Placement>> {
    track.validate()?;
    let init: Vec<Placement> = (0..track.len())
        .into_par_iter()
        .map(|t| {
            fit_single_frame(camera, &track.frames[t], track.frame_rate, config).map_err(|e| match e {
                Error::MissingLocalPose { .. } => Error::MissingLocalPose { frame: t },
                e => e,
            })
        })
        .collect::<Result<_>>()?;
    let db = SceneletDb::empty();
    let problem = Problem {
        db: &db,
        track,
        camera,
        config: &config.energy,
    };
    let w = config.weights(track.frame_rate);
    let weights = Weights {
        reprojection: w.reprojection,
        smoothness: w.smoothness,
        ..Weights::zero()
    };
    let state = SceneState::new(init);
    let active: Vec<usize> = (0..track.len()).collect();
    let (s, _) = optimize_state(&problem, &state, &weights, &active, &config.optimizer)?;
    Ok(s.placements)
}

/// Shared inputs of the scenelet stages.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub db: &'a SceneletDb,
    pub track: &'a ObservationTrack,
    pub camera: &'a Camera,
    pub config: &'a PipelineConfig,
}

impl<'a> Context<'a> {
    fn problem(&self) -> Problem<'a> {
        Problem {
            db: self.db,
            track: self.track,
            camera: self.camera,
            config: &self.config.energy,
        }
    }

    fn weights(&self) -> Weights {
        self.config.weights(self.track.frame_rate)
    }

    /// Start frame that centers scenelet `l` on `frame`, clamped so the clip
    /// stays within the frame's actor.
    fn aligned_start(&self, l: usize, frame: usize, offset: i64) -> Option<usize> {
        let s = &self.db.entries[l].scenelet;
        let r = &self.track.actors[self.track.actor_of(frame)];
        if s.len() > r.len() {
            return None;
        }
        let want = frame as i64 - s.center as i64 + offset;
        Some(want.clamp(r.start as i64, (r.end - s.len()) as i64) as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub scenelet: usize,
    pub start: usize,
    pub placement: Placement,
    /// Fitting energy per covered frame (lower is better).
    pub score: f64,
    pub charness: f64,
    /// Confidence-weighted RMS reprojection residual over the clip divided
    /// by the RMS spread of the detected joints about their centroid.
    pub residual: f64,
}

impl Candidate {
    /// Charness weighted by fit quality: the evidence that this clip
    /// explains an interaction.
    pub fn interaction(&self, fit_quality: f64) -> f64 {
        let r = self.residual / fit_quality;
        (-0.5 * r * r).exp() * self.charness
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub frame: usize,
    pub candidates: Vec<Candidate>,
}

/// A clip-sized piece of the video with one candidate scenelet and fixed
/// static neighbors on either side.
struct Window {
    offset: usize,
    track: ObservationTrack,
    state: SceneState,
}

fn window(ctx: &Context, base: &[Placement], l: usize, start: usize, placement: Placement) -> Window {
    let len = ctx.db.entries[l].scenelet.len();
    let r = &ctx.track.actors[ctx.track.actor_of(start)];
    let lo = start.saturating_sub(1).max(r.start);
    let hi = (start + len + 1).min(r.end);
    let track = ObservationTrack::single_actor(ctx.track.frame_rate, ctx.track.frames[lo..hi].to_vec());
    let mut state = SceneState::new(base[lo..hi].to_vec());
    state.assignment = Assignment::new(vec![AssignedScenelet {
        scenelet: l,
        start: start - lo,
    }]);
    state.placements[start - lo] = placement;
    Window {
        offset: lo,
        track,
        state,
    }
}

/// Placement of scenelet `l` starting at `start`, aligned with the static
/// skeleton at its center frame.
pub fn initial_placement(ctx: &Context, base: &[Placement], l: usize, start: usize) -> Result<Placement> {
    let s = &ctx.db.entries[l].scenelet;
    let t = start + s.center;
    let local = ctx.track.frames[t]
        .local_pose
        .ok_or(Error::MissingLocalPose { frame: t })?;
    let world = local.map(|q| base[t].apply(&q));
    let pel = world[Joint::Pelvis.index()];
    let z = pel.z - s.frames[s.center].pelvis().z;
    Ok(Placement::new(pel.x, pel.y, z, heading_of(&world)))
}

fn relative_residual(problem: &Problem, state: &SceneState, span: Range<usize>) -> Result<f64> {
    let joints = combined_joints(problem, state)?;
    let (mut sum, mut spread, mut w) = (0.0, 0.0, 0.0);
    for t in span {
        let f = &problem.track.frames[t];
        let (mut centroid, mut wt) = (Vec2::zeros(), 0.0);
        for k in 0..NUM_JOINTS {
            let c = problem.track.confidence(t, k);
            centroid += f.joints_px[k] * c;
            wt += c;
        }
        if wt <= 0.0 {
            continue;
        }
        centroid /= wt;
        for k in 0..NUM_JOINTS {
            let c = problem.track.confidence(t, k);
            if c <= 0.0 {
                continue;
            }
            if let Ok(u) = problem.camera.project(&joints[t][k]) {
                sum += c * (u - f.joints_px[k]).norm_squared();
                spread += c * (f.joints_px[k] - centroid).norm_squared();
                w += c;
            }
        }
    }
    Ok(if w > 0.0 && spread > 0.0 { (sum / spread).sqrt() } else { f64::INFINITY })
}

fn stage1_weights(w: &Weights) -> Weights {
    Weights {
        reprojection: w.reprojection,
        smoothness: w.smoothness,
        ..Weights::zero()
    }
}

fn stage2_weights(w: &Weights) -> Weights {
    Weights {
        motion_intersection: w.motion_intersection,
        ..stage1_weights(w)
    }
}

/// Fits one scenelet placement against the window around its span.
fn fit_in_window(
    ctx: &Context,
    base: &[Placement],
    l: usize,
    start: usize,
    init: Placement,
    weights: &Weights,
) -> Result<(Placement, f64, f64)> {
    let w = window(ctx, base, l, start, init);
    let problem = Problem {
        db: ctx.db,
        track: &w.track,
        camera: ctx.camera,
        config: &ctx.config.energy,
    };
    let params = LbfgsParams {
        max_iterations: ctx.config.candidate_iterations,
        ..ctx.config.optimizer.clone()
    };
    let local_start = start - w.offset;
    let (s, e) = optimize_state(&problem, &w.state, weights, &[local_start], &params)?;
    let len = ctx.db.entries[l].scenelet.len();
    let res = relative_residual(&problem, &s, local_start..local_start + len)?;
    Ok((s.placements[local_start], e, res))
}

fn fit_candidate(ctx: &Context, base: &[Placement], l: usize, start: usize) -> Result<Candidate> {
    let init = initial_placement(ctx, base, l, start)?;
    let (placement, e, res) = fit_in_window(ctx, base, l, start, init, &stage1_weights(&ctx.weights()))?;
    let entry = &ctx.db.entries[l];
    Ok(Candidate {
        scenelet: l,
        start,
        placement,
        score: e / entry.scenelet.len() as f64,
        charness: entry.charness.scenelet,
        residual: res,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub score: f64,
    pub scenelet: Option<usize>,
}

/// Interaction score of every `stride`-th frame: the best fit-quality
/// weighted scenelet charness over the database.
pub fn charness_sweep(ctx: &Context, base: &[Placement], stride: usize) -> Result<Vec<FrameScore>> {
    if ctx.db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be positive".into()));
    }
    let frames: Vec<usize> = (0..ctx.track.len()).step_by(stride).collect();
    // offsets up to half a stride reach every start frame
    let d = (stride / 2) as i64;
    let jobs: Vec<(usize, usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(i, &t)| {
            (0..ctx.db.len()).flat_map(move |l| {
                let starts: BTreeSet<usize> = (-d..=d).filter_map(|o| ctx.aligned_start(l, t, o)).collect();
                starts.into_iter().map(move |s| (i, l, s))
            })
        })
        .collect();
    let q = ctx.config.fit_quality;
    let fits: Vec<f64> = jobs
        .par_iter()
        .map(|&(_, l, start)| Ok(fit_candidate(ctx, base, l, start)?.interaction(q)))
        .collect::<Result<_>>()?;
    let mut out: Vec<FrameScore> = frames
        .iter()
        .map(|&t| FrameScore {
            frame: t,
            score: 0.0,
            scenelet: None,
        })
        .collect();
    for (&(i, l, _), &v) in jobs.iter().zip(&fits) {
        let best = &mut out[i];
        if best.scenelet.is_none() || v > best.score {
            best.score = v;
            best.scenelet = Some(l);
        }
    }
    Ok(out)
}

/// Frames holding the largest score within `window / 2` on either side
/// (earliest frame on plateaus) and at least `min_score`.
pub fn charness_nms(scores: &[(usize, f64)], min_score: f64, window: usize) -> Vec<usize> {
    let r = window / 2;
    (0..scores.len())
        .filter(|&i| {
            let (t, s) = scores[i];
            s >= min_score
                && scores.iter().enumerate().all(|(j, &(u, v))| {
                    if j == i || u.abs_diff(t) > r {
                        true
                    } else if j < i {
                        v < s
                    } else {
                        v <= s
                    }
                })
        })
        .map(|i| scores[i].0)
        .collect()
}

/// Flagged runs of at least `min_run` frames, longest first.
pub fn occluded_runs(track: &ObservationTrack, mask: &OcclusionMask, min_run: usize) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    for r in &track.actors {
        let mut t = r.start;
        while t < r.end {
            if mask.occluded[t] {
                let s = t;
                while t < r.end && mask.occluded[t] {
                    t += 1;
                }
                if t - s >= min_run.max(1) {
                    runs.push(s..t);
                }
            } else {
                t += 1;
            }
        }
    }
    runs.sort_by(|a, b| b.len().cmp(&a.len()).then(a.start.cmp(&b.start)));
    runs
}

/// Anchor frames for candidate fitting in priority order: charness maxima
/// by decreasing score, then the centers of occluded runs that no chosen
/// anchor lies within half a window of. At most `max` frames, none within
/// half a window of another.
pub fn select_maxima(maxima: &[(usize, f64)], runs: &[Range<usize>], window: usize, max: usize) -> Vec<usize> {
    let r = window / 2;
    let mut by_score = maxima.to_vec();
    by_score.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = Vec::new();
    for (t, _) in by_score {
        if out.len() < max && out.iter().all(|&u| u.abs_diff(t) > r) {
            out.push(t);
        }
    }
    for run in runs {
        let covered = out
            .iter()
            .any(|&u| u + r >= run.start && u < run.end + r);
        let c = (run.start + run.end - 1) / 2;
        if out.len() < max && !covered && out.iter().all(|&u| u.abs_diff(c) > r) {
            out.push(c);
        }
    }
    out
}

fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.scenelet.cmp(&b.scenelet))
            .then(a.start.cmp(&b.start))
    });
}

/// Every scenelet fitted around `frame`, keeping its best start offset.
pub fn candidates_at(ctx: &Context, base: &[Placement], frame: usize) -> Result<CandidateSet> {
    let d = ctx.config.start_offsets as i64;
    let jobs: Vec<(usize, usize)> = (0..ctx.db.len())
        .flat_map(|l| {
            let starts: BTreeSet<usize> = (-d..=d).filter_map(|o| ctx.aligned_start(l, frame, o)).collect();
            starts.into_iter().map(move |s| (l, s))
        })
        .collect();
    let fits: Vec<Candidate> = jobs
        .par_iter()
        .map(|&(l, s)| fit_candidate(ctx, base, l, s))
        .collect::<Result<_>>()?;
    let mut best: Vec<Candidate> = Vec::new();
    for c in fits {
        match best.last_mut() {
            Some(b) if b.scenelet == c.scenelet => {
                if c.score < b.score {
                    *b = c;
                }
            }
            _ => best.push(c),
        }
    }
    sort_candidates(&mut best);
    Ok(CandidateSet {
        frame,
        candidates: best,
    })
}

/// Keeps the `keep` lowest-energy candidates.
pub fn prune_stage1(set: &CandidateSet, keep: usize) -> CandidateSet {
    let mut c = set.candidates.clone();
    sort_candidates(&mut c);
    c.truncate(keep);
    CandidateSet {
        frame: set.frame,
        candidates: c,
    }
}

/// Refits with the motion intersection term, adds the occlusion term
/// evaluated once at the result, and keeps the `keep` best.
pub fn prune_stage2(ctx: &Context, base: &[Placement], set: &CandidateSet, keep: usize) -> Result<CandidateSet> {
    let w = ctx.weights();
    let occlusion_only = Weights {
        occlusion: w.occlusion,
        ..Weights::zero()
    };
    let mut c: Vec<Candidate> = set
        .candidates
        .par_iter()
        .map(|c| {
            let (placement, e, res) = fit_in_window(ctx, base, c.scenelet, c.start, c.placement, &stage2_weights(&w))?;
            let win = window(ctx, base, c.scenelet, c.start, placement);
            let problem = Problem {
                db: ctx.db,
                track: &win.track,
                camera: ctx.camera,
                config: &ctx.config.energy,
            };
            let lo = evaluate(&problem, &win.state, &occlusion_only, false)?.breakdown.total;
            Ok(Candidate {
                placement,
                score: (e + lo) / ctx.db.entries[c.scenelet].scenelet.len() as f64,
                residual: res,
                ..c.clone()
            })
        })
        .collect::<Result<_>>()?;
    sort_candidates(&mut c);
    c.truncate(keep);
    Ok(CandidateSet {
        frame: set.frame,
        candidates: c,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    /// Candidate index per set (`None` where skipped for overlap).
    pub choice: Vec<Option<usize>>,
    pub state: SceneState,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub best: Evaluated,
    /// All evaluated combinations in evaluation order.
    pub evaluated: Vec<Evaluated>,
    pub used_beam: bool,
}

fn spans_overlap(a: Range<usize>, b: Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Builds the state for one candidate choice per set. Picks are added in
/// order of decreasing interaction evidence and a pick overlapping an
/// earlier one is skipped.
fn combination_state(
    ctx: &Context,
    base: &SceneState,
    sets: &[CandidateSet],
    picks: &[Option<usize>],
) -> (SceneState, Vec<Option<usize>>) {
    let mut order: Vec<(usize, &Candidate)> = picks
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|ci| (i, &sets[i].candidates[ci])))
        .collect();
    let q = ctx.config.fit_quality;
    order.sort_by(|a, b| b.1.interaction(q).total_cmp(&a.1.interaction(q)).then(a.0.cmp(&b.0)));
    let mut state = base.clone();
    let mut used = vec![None; picks.len()];
    let mut spans: Vec<Range<usize>> = Vec::new();
    for (i, c) in order {
        let span = c.start..c.start + ctx.db.entries[c.scenelet].scenelet.len();
        if spans.iter().any(|s| spans_overlap(s.clone(), span.clone())) {
            continue;
        }
        spans.push(span);
        state.assignment.push(AssignedScenelet {
            scenelet: c.scenelet,
            start: c.start,
        });
        state.placements[c.start] = c.placement;
        used[i] = picks[i];
    }
    (state, used)
}

fn optimize_full(ctx: &Context, state: &SceneState) -> Result<(SceneState, f64)> {
    let problem = ctx.problem();
    let params = LbfgsParams {
        max_iterations: ctx.config.refine_iterations,
        ..ctx.config.optimizer.clone()
    };
    let active = state.active_frames(ctx.db);
    optimize_state(&problem, state, &ctx.weights(), &active, &params)
}

fn state_key(s: &SceneState) -> Vec<(usize, usize, [u64; 4])> {
    s.assignment
        .entries()
        .iter()
        .map(|e| {
            let p = s.placements[e.start].to_array().map(f64::to_bits);
            (e.scenelet, e.start, p)
        })
        .collect()
}

fn evaluate_choices(ctx: &Context, base: &SceneState, sets: &[CandidateSet], choices: Vec<Vec<Option<usize>>>) -> Result<Vec<Evaluated>> {
    let built: Vec<(SceneState, Vec<Option<usize>>)> = choices
        .iter()
        .map(|c| combination_state(ctx, base, sets, c))
        .collect();
    // identical effective assignments are optimized once
    let mut unique: Vec<usize> = Vec::new();
    let mut index_of = Vec::with_capacity(built.len());
    let mut keys = Vec::new();
    for (i, (s, _)) in built.iter().enumerate() {
        let k = state_key(s);
        match keys.iter().position(|x| *x == k) {
            Some(j) => index_of.push(j),
            None => {
                keys.push(k);
                index_of.push(unique.len());
                unique.push(i);
            }
        }
    }
    let solved: Vec<(SceneState, f64)> = unique
        .par_iter()
        .map(|&i| optimize_full(ctx, &built[i].0))
        .collect::<Result<_>>()?;
    Ok(built
        .into_iter()
        .zip(index_of)
        .map(|((_, used), j)| Evaluated {
            choice: used,
            state: solved[j].0.clone(),
            energy: solved[j].1,
        })
        .collect())
}

fn argmin(evaluated: &[Evaluated]) -> Option<&Evaluated> {
    // strict comparison keeps the lowest combination index on ties
    let mut best: Option<&Evaluated> = None;
    for e in evaluated {
        if best.is_none_or(|b| e.energy < b.energy) {
            best = Some(e);
        }
    }
    best
}

/// Jointly optimizes every combination of one candidate per set under the
/// full energy and keeps the lowest. Falls back to a beam search when the
/// number of combinations exceeds the budget.
pub fn refine_combinations(ctx: &Context, base: &SceneState, sets: &[CandidateSet]) -> Result<Refinement> {
    let sets: Vec<CandidateSet> = sets.iter().filter(|s| !s.candidates.is_empty()).cloned().collect();
    let total: usize = sets.iter().map(|s| s.candidates.len()).product();
    if total <= ctx.config.combination_budget.max(1) {
        let mut choices = Vec::with_capacity(total);
        for mut idx in 0..total {
            let mut c = vec![None; sets.len()];
            for i in (0..sets.len()).rev() {
                let n = sets[i].candidates.len();
                c[i] = Some(idx % n);
                idx /= n;
            }
            choices.push(c);
        }
        let evaluated = evaluate_choices(ctx, base, &sets, choices)?;
        let best = argmin(&evaluated).expect("at least one combination").clone();
        return Ok(Refinement {
            best,
            evaluated,
            used_beam: false,
        });
    }
    log::warn!(
        "{total} combinations exceed the budget of {}; using a beam of width {}",
        ctx.config.combination_budget,
        ctx.config.beam_width
    );
    let mut beam: Vec<Vec<Option<usize>>> = vec![vec![None; sets.len()]];
    let mut all = Vec::new();
    for i in 0..sets.len() {
        let mut next = Vec::new();
        for b in &beam {
            for ci in 0..sets[i].candidates.len() {
                let mut c = b.clone();
                c[i] = Some(ci);
                next.push(c);
            }
        }
        let mut evaluated = evaluate_choices(ctx, base, &sets, next.clone())?;
        let mut order: Vec<usize> = (0..evaluated.len()).collect();
        order.sort_by(|&a, &b| evaluated[a].energy.total_cmp(&evaluated[b].energy).then(a.cmp(&b)));
        order.truncate(ctx.config.beam_width.max(1));
        beam = order.iter().map(|&j| next[j].clone()).collect();
        if i + 1 == sets.len() {
            all.append(&mut evaluated);
        }
    }
    let best = argmin(&all).expect("beam is nonempty").clone();
    Ok(Refinement {
        best,
        evaluated: all,
        used_beam: true,
    })
}

/// Whether `a` holds a scenelet with no same-id counterpart in `b` within
/// `window` frames.
fn differs(a: &SceneState, b: &SceneState, window: usize) -> bool {
    a.assignment.entries().iter().any(|x| {
        !b.assignment
            .entries()
            .iter()
            .any(|y| y.scenelet == x.scenelet && y.start.abs_diff(x.start) <= window)
    })
}

/// Up to `k` lowest-energy results that pairwise differ in at least one
/// scenelet placement in time.
pub fn diverse_results(evaluated: &[Evaluated], k: usize, window: usize) -> Vec<Evaluated> {
    let mut order: Vec<usize> = (0..evaluated.len()).collect();
    order.sort_by(|&a, &b| evaluated[a].energy.total_cmp(&evaluated[b].energy).then(a.cmp(&b)));
    let mut out: Vec<Evaluated> = Vec::new();
    for i in order {
        if out.len() >= k {
            break;
        }
        let e = &evaluated[i];
        if out
            .iter()
            .all(|o| differs(&e.state, &o.state, window) || differs(&o.state, &e.state, window))
        {
            out.push(e.clone());
        }
    }
    out
}

fn footprints_overlap(a: &ObjectInstance, b: &ObjectInstance) -> bool {
    let fa = a.object.footprints();
    let fb = b.object.footprints();
    let (aa, ab) = (union_area(&fa), union_area(&fb));
    union_area(&[fa, fb].concat()) < aa + ab - 1e-9
}

/// Compatible (same label and orientation) object pairs whose footprints
/// overlap, as indices into `objects`.
pub fn compatible_overlaps(objects: &[ObjectInstance], angle_tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..objects.len() {
        for j in (i + 1)..objects.len() {
            let (a, b) = (&objects[i].object, &objects[j].object);
            if a.label == b.label
                && angle_distance(a.placement.theta(), b.placement.theta()) < angle_tol
                && footprints_overlap(&objects[i], &objects[j])
            {
                out.push((i, j));
            }
        }
    }
    out
}

/// Resolves duplicate objects: for each overlapping compatible pair, the
/// object whose removal leaves the lower energy is removed.
pub fn object_selection(ctx: &Context, state: &SceneState) -> Result<SceneState> {
    let problem = ctx.problem();
    let w = ctx.weights();
    let mut s = state.clone();
    loop {
        let objects = scene_objects(ctx.db, &s);
        let pairs = compatible_overlaps(&objects, ctx.config.energy.compatible_angle_rad);
        let Some(&(i, j)) = pairs.first() else {
            return Ok(s);
        };
        let without = |k: usize| -> Result<(SceneState, f64)> {
            let mut t = s.clone();
            t.removed_objects.insert((objects[k].entry, objects[k].index));
            let e = total_energy(&problem, &t, &w)?.total;
            Ok((t, e))
        };
        let (si, ei) = without(i)?;
        let (sj, ej) = without(j)?;
        s = if ei < ej { si } else { sj };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDiagnostic {
    pub stage: String,
    pub candidates: usize,
    pub max_eta: usize,
    pub energy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub state: SceneState,
    pub joints: Vec<Pose>,
    pub objects: Vec<ObjectInstance>,
    pub breakdown: EnergyBreakdown,
    pub mask: OcclusionMask,
    pub track: ObservationTrack,
    pub static_placements: Vec<Placement>,
    pub scores: Vec<FrameScore>,
    pub maxima: Vec<usize>,
    pub candidates: Vec<CandidateSet>,
    pub alternatives: Vec<(SceneState, EnergyBreakdown)>,
    pub diagnostics: Vec<StageDiagnostic>,
}

fn max_eta(db: &SceneletDb, s: &SceneState, n: usize) -> usize {
    s.assignment.eta(db, n).into_iter().max().unwrap_or(0)
}

/// Runs all stages. `top_diverse` > 0 also returns that many diverse
/// alternatives from the combination sweep.
pub fn run(
    db: &SceneletDb,
    track: &ObservationTrack,
    camera: &Camera,
    config: &PipelineConfig,
    top_diverse: usize,
) -> Result<PipelineOutput> {
    config.validate()?;
    track.validate()?;
    let n = track.len();
    let mask = detect_occluded_frames(track, &config.occlusion);
    let interpolated = interpolate_occluded(track, &mask);
    let static_placements = fit_static_skeletons(&interpolated, camera, config)?;
    let work = working_track(track, &interpolated, &mask);
    let ctx = Context {
        db,
        track: &work,
        camera,
        config,
    };
    let mut diagnostics = vec![StageDiagnostic {
        stage: "static".into(),
        candidates: 0,
        max_eta: 0,
        energy: None,
    }];
    let base = SceneState::new(static_placements.clone());
    let mut scores = Vec::new();
    let mut maxima = Vec::new();
    let mut sets = Vec::new();
    if config.fit_scenelets {
        scores = charness_sweep(&ctx, &static_placements, config.stride)?;
        let pairs: Vec<(usize, f64)> = scores.iter().map(|s| (s.frame, s.score)).collect();
        let peaks = charness_nms(&pairs, config.min_charness, config.nms_window);
        let peak_scores: Vec<(usize, f64)> = pairs.iter().copied().filter(|p| peaks.contains(&p.0)).collect();
        let runs = occluded_runs(&work, &mask, config.occlusion.min_run);
        maxima = select_maxima(&peak_scores, &runs, config.nms_window, config.max_maxima);
        diagnostics.push(StageDiagnostic {
            stage: "charness".into(),
            candidates: maxima.len(),
            max_eta: 0,
            energy: None,
        });
        let mut count = 0;
        for &m in &maxima {
            let all = candidates_at(&ctx, &static_placements, m)?;
            let s1 = prune_stage1(&all, config.stage1_keep);
            count += s1.candidates.len();
            sets.push(s1);
        }
        diagnostics.push(StageDiagnostic {
            stage: "stage1".into(),
            candidates: count,
            max_eta: 0,
            energy: None,
        });
        let mut count = 0;
        for s in sets.iter_mut() {
            *s = prune_stage2(&ctx, &static_placements, s, config.stage2_keep)?;
            count += s.candidates.len();
        }
        diagnostics.push(StageDiagnostic {
            stage: "stage2".into(),
            candidates: count,
            max_eta: 0,
            energy: None,
        });
    }
    let refinement = refine_combinations(&ctx, &base, &sets)?;
    let refined = refinement.best.state.clone();
    refined.assignment.validate(db, &work)?;
    diagnostics.push(StageDiagnostic {
        stage: "refine".into(),
        candidates: refinement.evaluated.len(),
        max_eta: max_eta(db, &refined, n),
        energy: Some(refinement.best.energy),
    });
    let problem = ctx.problem();
    let weights = ctx.weights();
    let state = object_selection(&ctx, &refined)?;
    let breakdown = total_energy(&problem, &state, &weights)?;
    diagnostics.push(StageDiagnostic {
        stage: "selection".into(),
        candidates: scene_objects(db, &state).len(),
        max_eta: max_eta(db, &state, n),
        energy: Some(breakdown.total),
    });
    let alternatives = if top_diverse > 0 {
        diverse_results(&refinement.evaluated, top_diverse, config.diverse_window)
            .into_iter()
            .map(|e| {
                let s = object_selection(&ctx, &e.state)?;
                let b = total_energy(&problem, &s, &weights)?;
                Ok((s, b))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(PipelineOutput {
        joints: combined_joints(&problem, &state)?,
        objects: scene_objects(db, &state),
        breakdown,
        state,
        mask,
        track: work,
        static_placements,
        scores,
        maxima,
        candidates: sets,
        alternatives,
        diagnostics,
    })
}

/// Interaction scores and the anchors the candidate stages would use.
#[derive(Debug, Clone, PartialEq)]
pub struct CharnessProfile {
    pub scores: Vec<FrameScore>,
    pub peaks: Vec<usize>,
    pub anchors: Vec<usize>,
    pub mask: OcclusionMask,
}

/// The occlusion, static and charness stages alone.
pub fn charness_profile(
    db: &SceneletDb,
    track: &ObservationTrack,
    camera: &Camera,
    config: &PipelineConfig,
) -> Result<CharnessProfile> {
    config.validate()?;
    track.validate()?;
    let mask = detect_occluded_frames(track, &config.occlusion);
    let interpolated = interpolate_occluded(track, &mask);
    let static_placements = fit_static_skeletons(&interpolated, camera, config)?;
    let work = working_track(track, &interpolated, &mask);
    let ctx = Context {
        db,
        track: &work,
        camera,
        config,
    };
    let scores = charness_sweep(&ctx, &static_placements, config.stride)?;
    let pairs: Vec<(usize, f64)> = scores.iter().map(|s| (s.frame, s.score)).collect();
    let peaks = charness_nms(&pairs, config.min_charness, config.nms_window);
    let peak_scores: Vec<(usize, f64)> = pairs.iter().copied().filter(|p| peaks.contains(&p.0)).collect();
    let runs = occluded_runs(&work, &mask, config.occlusion.min_run);
    let anchors = select_maxima(&peak_scores, &runs, config.nms_window, config.max_maxima);
    Ok(CharnessProfile {
        scores,
        peaks,
        anchors,
        mask,
    })
}

/// World joints of the static-only solution on the interpolated track.
pub fn static_joints(track: &ObservationTrack, placements: &[Placement]) -> Result<Vec<Pose>> {
    track
        .frames
        .iter()
        .zip(placements)
        .enumerate()
        .map(|(t, (f, p))| {
            let a = f.local_pose.ok_or(Error::MissingLocalPose { frame: t })?;
            Ok(a.map(|q| p.apply(&q)))
        })
        .collect()
}
