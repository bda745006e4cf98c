//! Multi-actor re-identification of per-frame skeleton detections.
//!
//! Each frame's labeling maps every actor to one detected skeleton or to the
//! dummy (invisible) target, claiming every detection exactly once. The
//! energy couples only consecutive frames, so the exact minimizer is a
//! shortest path through the chain of per-frame labelings.

use serde::{Deserialize, Serialize};

use crate::energy::{ObservationTrack, ObservedFrame};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::skeleton::{Pose, NUM_JOINTS};

/// Weight of the transition term.
pub const DEFAULT_PAIRWISE_WEIGHT: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton2d {
    pub joints_px: [Vec2; NUM_JOINTS],
    pub confidence: [f64; NUM_JOINTS],
    pub local_pose: Option<Pose>,
}

impl Skeleton2d {
    pub fn mean_confidence(&self) -> f64 {
        self.confidence.iter().sum::<f64>() / NUM_JOINTS as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub skeletons: Vec<Skeleton2d>,
    /// Half of the image diagonal.
    pub diag_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub pairwise_weight: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            pairwise_weight: DEFAULT_PAIRWISE_WEIGHT,
        }
    }
}

/// Fixes `actor` to detection `skeleton` in `frame`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pin {
    pub actor: usize,
    pub frame: usize,
    pub skeleton: usize,
}

/// One frame's labeling: the skeleton each actor claims, `None` for the dummy.
pub type Labeling = Vec<Option<usize>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ActorAssignment {
    pub labels: Vec<Labeling>,
    pub objective: f64,
}

/// Unary term with the printed sign: minus the mean confidence of a real
/// skeleton, minus one for the dummy.
pub fn unary_cost(frame: &DetectionFrame, s: Option<usize>) -> f64 {
    match s {
        Some(s) => -frame.skeletons[s].mean_confidence(),
        None => -1.0,
    }
}

/// Transition cost between consecutive frames.
pub fn binary_cost(f0: &DetectionFrame, s0: Option<usize>, f1: &DetectionFrame, s1: Option<usize>) -> f64 {
    let (Some(s0), Some(s1)) = (s0, s1) else {
        return 1.0;
    };
    let (a, b) = (&f0.skeletons[s0], &f1.skeletons[s1]);
    let diag = f0.diag_px;
    (0..NUM_JOINTS)
        .map(|k| ((a.joints_px[k] - b.joints_px[k]) / diag).norm_squared() * a.confidence[k] * b.confidence[k])
        .sum::<f64>()
        / NUM_JOINTS as f64
}

fn frame_unary(frame: &DetectionFrame, l: &Labeling) -> f64 {
    -l.iter().map(|&s| unary_cost(frame, s)).sum::<f64>()
}

fn transition(f0: &DetectionFrame, l0: &Labeling, f1: &DetectionFrame, l1: &Labeling, w_pw: f64) -> f64 {
    w_pw * l0.iter().zip(l1).map(|(&a, &b)| binary_cost(f0, a, f1, b)).sum::<f64>()
}

/// Objective of a complete labeling, summed from scratch.
pub fn objective(frames: &[DetectionFrame], labels: &[Labeling], w_pw: f64) -> f64 {
    let mut e: f64 = frames.iter().zip(labels).map(|(f, l)| frame_unary(f, l)).sum();
    for t in 1..frames.len() {
        e += transition(&frames[t - 1], &labels[t - 1], &frames[t], &labels[t], w_pw);
    }
    e
}

/// All labelings of one frame in lexicographic order (`None` first),
/// filtered by the pins that apply to it.
pub fn frame_labelings(n_skeletons: usize, n_actors: usize, pins: &[(usize, usize)]) -> Vec<Labeling> {
    let mut out = Vec::new();
    let mut cur: Labeling = Vec::with_capacity(n_actors);
    let mut used = vec![false; n_skeletons];
    fn rec(
        n_actors: usize,
        cur: &mut Labeling,
        used: &mut [bool],
        pins: &[(usize, usize)],
        out: &mut Vec<Labeling>,
    ) {
        let a = cur.len();
        if a == n_actors {
            if used.iter().all(|&u| u) {
                out.push(cur.clone());
            }
            return;
        }
        let pinned = pins.iter().find(|p| p.0 == a).map(|p| p.1);
        if pinned.is_none() {
            cur.push(None);
            rec(n_actors, cur, used, pins, out);
            cur.pop();
        }
        for s in 0..used.len() {
            if used[s] || pinned.is_some_and(|p| p != s) {
                continue;
            }
            used[s] = true;
            cur.push(Some(s));
            rec(n_actors, cur, used, pins, out);
            cur.pop();
            used[s] = false;
        }
    }
    rec(n_actors, &mut cur, &mut used, pins, &mut out);
    out
}

fn check(frames: &[DetectionFrame], n_actors: usize, pins: &[Pin]) -> Result<()> {
    for (t, f) in frames.iter().enumerate() {
        if f.skeletons.len() > n_actors {
            return Err(Error::InfeasibleTracking {
                frame: t,
                reason: format!("{} detections but only {n_actors} actors", f.skeletons.len()),
            });
        }
        if !(f.diag_px > 0.0) {
            return Err(Error::InvalidInput(format!("frame {t}: image half-diagonal must be positive")));
        }
        for s in &f.skeletons {
            if s.confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidInput(format!("frame {t}: confidence outside [0, 1]")));
            }
        }
    }
    for p in pins {
        let bad = if p.actor >= n_actors {
            Some(format!("pin names actor {} of {n_actors}", p.actor))
        } else if p.frame >= frames.len() {
            Some(format!("pin names frame {} of {}", p.frame, frames.len()))
        } else if p.skeleton >= frames[p.frame].skeletons.len() {
            Some(format!("pin names missing detection {}", p.skeleton))
        } else {
            None
        };
        if let Some(reason) = bad {
            return Err(Error::InfeasibleTracking { frame: p.frame, reason });
        }
        for q in pins.iter().filter(|q| q.frame == p.frame && *q != p) {
            if q.actor == p.actor || q.skeleton == p.skeleton {
                return Err(Error::InfeasibleTracking {
                    frame: p.frame,
                    reason: "conflicting pins".into(),
                });
            }
        }
    }
    Ok(())
}

fn pins_at(pins: &[Pin], t: usize) -> Vec<(usize, usize)> {
    pins.iter().filter(|p| p.frame == t).map(|p| (p.actor, p.skeleton)).collect()
}

/// Exact minimizer of the tracking energy. Among equal-energy solutions the
/// one whose labelings come first lexicographically, frame by frame, wins.
pub fn solve_tracking(frames: &[DetectionFrame], n_actors: usize, pins: &[Pin], w_pw: f64) -> Result<ActorAssignment> {
    check(frames, n_actors, pins)?;
    if frames.is_empty() {
        return Ok(ActorAssignment {
            labels: Vec::new(),
            objective: 0.0,
        });
    }
    let states: Vec<Vec<Labeling>> = frames
        .iter()
        .enumerate()
        .map(|(t, f)| frame_labelings(f.skeletons.len(), n_actors, &pins_at(pins, t)))
        .collect();
    let n = frames.len();
    // cost-to-go from each state of frame t, including its own unary
    let mut to_go: Vec<Vec<f64>> = vec![Vec::new(); n];
    to_go[n - 1] = states[n - 1].iter().map(|l| frame_unary(&frames[n - 1], l)).collect();
    for t in (0..n - 1).rev() {
        to_go[t] = states[t]
            .iter()
            .map(|l| {
                let best = best_successor(frames, &states, &to_go, t, l, w_pw).1;
                frame_unary(&frames[t], l) + best
            })
            .collect();
    }
    let mut idx = argmin(&to_go[0]);
    let objective = to_go[0][idx];
    let mut labels = vec![states[0][idx].clone()];
    for t in 0..n - 1 {
        idx = best_successor(frames, &states, &to_go, t, &states[t][idx], w_pw).0;
        labels.push(states[t + 1][idx].clone());
    }
    Ok(ActorAssignment { labels, objective })
}

fn best_successor(
    frames: &[DetectionFrame],
    states: &[Vec<Labeling>],
    to_go: &[Vec<f64>],
    t: usize,
    l: &Labeling,
    w_pw: f64,
) -> (usize, f64) {
    let costs: Vec<f64> = states[t + 1]
        .iter()
        .zip(&to_go[t + 1])
        .map(|(m, v)| transition(&frames[t], l, &frames[t + 1], m, w_pw) + v)
        .collect();
    let i = argmin(&costs);
    (i, costs[i])
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Splits the labeled detections into one observation track per actor,
/// trimmed to the frames between its first and last sighting. Frames where
/// the actor is invisible are kept as invalid frames holding the last seen
/// detection. Returns the first frame of each actor's track alongside it.
pub fn actor_tracks(
    frames: &[DetectionFrame],
    assignment: &ActorAssignment,
    n_actors: usize,
    frame_rate: f64,
) -> Vec<(usize, ObservationTrack)> {
    let mut out = Vec::new();
    for a in 0..n_actors {
        let seen: Vec<usize> = (0..frames.len()).filter(|&t| assignment.labels[t][a].is_some()).collect();
        let (Some(&first), Some(&last)) = (seen.first(), seen.last()) else {
            continue;
        };
        let mut held: Option<&Skeleton2d> = None;
        let obs = (first..=last)
            .map(|t| match assignment.labels[t][a] {
                Some(s) => {
                    let sk = &frames[t].skeletons[s];
                    held = Some(sk);
                    ObservedFrame {
                        joints_px: sk.joints_px,
                        confidence: sk.confidence,
                        local_pose: sk.local_pose,
                        valid: true,
                    }
                }
                None => {
                    let sk = held.expect("first frame is a sighting");
                    ObservedFrame {
                        joints_px: sk.joints_px,
                        confidence: [0.0; NUM_JOINTS],
                        local_pose: sk.local_pose,
                        valid: false,
                    }
                }
            })
            .collect();
        out.push((first, ObservationTrack::single_actor(frame_rate, obs)));
    }
    out
}
