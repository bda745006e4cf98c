//! The 16-joint skeleton used throughout: joint enumeration, frames, and
//! heading conventions.

use serde::{Deserialize, Serialize};

use crate::geometry::{Placement, Vec2, Vec3};

pub const NUM_JOINTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    AnkleRight = 0,
    KneeRight = 1,
    HipRight = 2,
    HipLeft = 3,
    KneeLeft = 4,
    AnkleLeft = 5,
    Pelvis = 6,
    Thorax = 7,
    Neck = 8,
    HeadTop = 9,
    WristRight = 10,
    ElbowRight = 11,
    ShoulderRight = 12,
    ShoulderLeft = 13,
    ElbowLeft = 14,
    WristLeft = 15,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::AnkleRight,
        Joint::KneeRight,
        Joint::HipRight,
        Joint::HipLeft,
        Joint::KneeLeft,
        Joint::AnkleLeft,
        Joint::Pelvis,
        Joint::Thorax,
        Joint::Neck,
        Joint::HeadTop,
        Joint::WristRight,
        Joint::ElbowRight,
        Joint::ShoulderRight,
        Joint::ShoulderLeft,
        Joint::ElbowLeft,
        Joint::WristLeft,
    ];

    /// Joints that enter pose metrics: everything but the pelvis (the
    /// reference point of local poses) and the head top.
    pub const METRIC: [Joint; 14] = [
        Joint::AnkleRight,
        Joint::KneeRight,
        Joint::HipRight,
        Joint::HipLeft,
        Joint::KneeLeft,
        Joint::AnkleLeft,
        Joint::Thorax,
        Joint::Neck,
        Joint::WristRight,
        Joint::ElbowRight,
        Joint::ShoulderRight,
        Joint::ShoulderLeft,
        Joint::ElbowLeft,
        Joint::WristLeft,
    ];

    /// Joints whose ground projection is tested against object footprints.
    pub const MOTION_CONTACT: [Joint; 3] = [Joint::Pelvis, Joint::KneeLeft, Joint::KneeRight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Joint::AnkleRight => "ankle_right",
            Joint::KneeRight => "knee_right",
            Joint::HipRight => "hip_right",
            Joint::HipLeft => "hip_left",
            Joint::KneeLeft => "knee_left",
            Joint::AnkleLeft => "ankle_left",
            Joint::Pelvis => "pelvis",
            Joint::Thorax => "thorax",
            Joint::Neck => "neck",
            Joint::HeadTop => "head_top",
            Joint::WristRight => "wrist_right",
            Joint::ElbowRight => "elbow_right",
            Joint::ShoulderRight => "shoulder_right",
            Joint::ShoulderLeft => "shoulder_left",
            Joint::ElbowLeft => "elbow_left",
            Joint::WristLeft => "wrist_left",
        }
    }
}

pub type Pose = [Vec3; NUM_JOINTS];

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonFrame {
    pub joints: Pose,
    pub time: f64,
}

impl SkeletonFrame {
    pub fn new(joints: Pose, time: f64) -> Self {
        SkeletonFrame { joints, time }
    }

    pub fn joint(&self, j: Joint) -> Vec3 {
        self.joints[j.index()]
    }

    pub fn pelvis(&self) -> Vec3 {
        self.joint(Joint::Pelvis)
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().all(|p| p.iter().all(|v| v.is_finite())) && self.time.is_finite()
    }

    pub fn transformed(&self, placement: &Placement) -> SkeletonFrame {
        SkeletonFrame {
            joints: self.joints.map(|p| placement.apply(&p)),
            time: self.time,
        }
    }

    pub fn forward(&self) -> Vec2 {
        forward_direction(&self.joints)
    }

    pub fn heading(&self) -> f64 {
        let f = self.forward();
        f.y.atan2(f.x)
    }
}

/// Horizontal forward direction of a pose: the left-to-right hip axis
/// crossed with up, falling back to the shoulder axis when the hips give
/// no horizontal direction.
pub fn forward_direction(joints: &Pose) -> Vec2 {
    let from_axis = |l: Joint, r: Joint| {
        let axis = joints[r.index()] - joints[l.index()];
        let f = axis.cross(&Vec3::z()).xy();
        let n = f.norm();
        (n > 1e-9).then(|| f / n)
    };
    from_axis(Joint::HipLeft, Joint::HipRight)
        .or_else(|| from_axis(Joint::ShoulderLeft, Joint::ShoulderRight))
        .unwrap_or_else(|| Vec2::new(1.0, 0.0))
}

/// Heading angle of a pose (angle of its forward direction).
pub fn heading_of(joints: &Pose) -> f64 {
    let f = forward_direction(joints);
    f.y.atan2(f.x)
}

/// The pose shifted so that its pelvis sits at the origin.
pub fn pelvis_centered(joints: &Pose) -> Pose {
    let p = joints[Joint::Pelvis.index()];
    joints.map(|q| q - p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_falls_back_to_shoulders() {
        let mut pose = [Vec3::zeros(); NUM_JOINTS];
        pose[Joint::ShoulderLeft.index()] = Vec3::new(0.0, 0.2, 1.4);
        pose[Joint::ShoulderRight.index()] = Vec3::new(0.0, -0.2, 1.4);
        let f = forward_direction(&pose);
        assert!((f - Vec2::new(-1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn joint_table_is_consistent() {
        for (i, j) in Joint::ALL.iter().enumerate() {
            assert_eq!(j.index(), i);
        }
        assert!(!Joint::METRIC.contains(&Joint::Pelvis));
        assert!(!Joint::METRIC.contains(&Joint::HeadTop));
    }
}
