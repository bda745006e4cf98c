//! World conventions, camera projection, 4-DoF placements, cuboids and
//! ground-plane signed distance fields.
//!
//! The world is right-handed with `z` pointing up and the ground plane at
//! `z = 0`. All lengths are meters, all angles radians. Ground-plane
//! quantities live in the `(x, y)` plane.

use std::f64::consts::PI;

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi for tiny negative inputs
    if t >= PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// Smallest absolute difference between two angles.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

#[inline]
pub fn rot2(theta: f64) -> nalgebra::Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    nalgebra::Matrix2::new(c, -s, s, c)
}

/// Rotates `v` by +90 degrees in the ground plane (the generator of `rot2`).
#[inline]
pub fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

/// Pinhole camera with a rigid world-to-camera transform.
///
/// Camera space follows the usual vision convention: `x` right, `y` down,
/// `z` along the optical axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx = {fx}, fy = {fy})"
            )));
        }
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if !(0.0..=width).contains(&cx) || !(0.0..=height).contains(&cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside the {width}x{height} image"
            )));
        }
        let m = world_to_camera;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite extrinsics".into()));
        }
        let bottom = m.fixed_view::<1, 4>(3, 0);
        if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).norm() > 1e-9 {
            return Err(Error::InvalidCamera(
                "last extrinsic row must be [0, 0, 0, 1]".into(),
            ));
        }
        let rotation: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = rotation.transpose() * rotation - Matrix3::identity();
        if ortho.norm() > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(
                "extrinsic rotation block is not a proper rotation".into(),
            ));
        }
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target`, with world `z` as the up hint.
    pub fn look_at(
        fx: f64,
        fy: f64,
        width: f64,
        height: f64,
        eye: Vec3,
        target: Vec3,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&Vec3::z());
        if right.norm() < 1e-9 {
            return Err(Error::InvalidCamera("look direction parallel to up".into()));
        }
        right.normalize_mut();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Camera::new(fx, fy, width / 2.0, height / 2.0, width, height, m)
    }

    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Half of the image diagonal in pixels.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * (self.width * self.width + self.height * self.height).sqrt()
    }

    pub fn project(&self, p: &Vec3) -> Result<Vec2> {
        self.project_with_jacobian(p).map(|(u, _)| u)
    }

    /// Projection together with its derivative with respect to the world point.
    pub fn project_with_jacobian(&self, p: &Vec3) -> Result<(Vec2, Matrix2x3<f64>)> {
        let pc = self.to_camera(p);
        if pc.z <= 0.0 || !pc.z.is_finite() {
            return Err(Error::BehindCamera { depth: pc.z });
        }
        let iz = 1.0 / pc.z;
        let u = Vec2::new(self.fx * pc.x * iz + self.cx, self.fy * pc.y * iz + self.cy);
        let dcam = Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz * iz,
        );
        Ok((u, dcam * self.rotation))
    }

    /// World point at camera depth `depth` along the ray through pixel `u`.
    pub fn back_project(&self, u: &Vec2, depth: f64) -> Vec3 {
        let pc = Vec3::new((u.x - self.cx) / self.fx * depth, (u.y - self.cy) / self.fy * depth, depth);
        self.rotation.transpose() * (pc - self.translation)
    }

    /// Rotates the whole camera rig about the world up axis through the origin.
    pub fn rotated_about_up(&self, angle: f64) -> Camera {
        let r = rot_z(angle);
        let mut c = self.clone();
        c.rotation = self.rotation * r.transpose();
        c
    }
}

/// 3D rotation about the up axis.
pub fn rot_z(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rigid 4-DoF placement: translation plus a rotation about the up axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    theta: f64,
}

impl Default for Placement {
    fn default() -> Self {
        Placement::identity()
    }
}

impl Placement {
    pub fn new(x: f64, y: f64, z: f64, theta: f64) -> Self {
        Placement {
            x,
            y,
            z,
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Placement::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Placement::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.theta]
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn set_theta(&mut self, theta: f64) {
        self.theta = normalize_angle(theta);
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn ground(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rot_z(self.theta)
    }

    /// Rotate about the up axis by theta, then translate.
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.theta.sin_cos();
        Vec3::new(
            c * p.x - s * p.y + self.x,
            s * p.x + c * p.y + self.y,
            p.z + self.z,
        )
    }

    /// Derivative of `apply(p)` with respect to theta.
    pub fn d_apply_dtheta(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.theta.sin_cos();
        Vec3::new(-s * p.x - c * p.y, c * p.x - s * p.y, 0.0)
    }

    pub fn inverse_apply(&self, p: &Vec3) -> Vec3 {
        let d = p - self.translation();
        let (s, c) = self.theta.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// `self ∘ other`: places something already placed by `other` in the
    /// frame described by `self`.
    pub fn compose(&self, other: &Placement) -> Placement {
        let t = self.apply(&other.translation());
        Placement::new(t.x, t.y, t.z, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Placement {
        let t = self.inverse_apply(&Vec3::zeros());
        Placement::new(t.x, t.y, t.z, -self.theta)
    }
}

/// Box in its owning object's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cuboid {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub theta: f64,
}

impl Cuboid {
    pub fn new(center: Vec3, half_extents: Vec3, theta: f64) -> Result<Self> {
        if half_extents.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "cuboid half-extents must be positive, got {:?}",
                half_extents.as_slice()
            )));
        }
        Ok(Cuboid {
            center,
            half_extents,
            theta: normalize_angle(theta),
        })
    }

    /// Cuboid resting on the ground, centered on the object origin.
    pub fn on_ground(size_x: f64, size_y: f64, height: f64) -> Result<Self> {
        Cuboid::new(
            Vec3::new(0.0, 0.0, height / 2.0),
            Vec3::new(size_x / 2.0, size_y / 2.0, height / 2.0),
            0.0,
        )
    }

    /// Pose of this cuboid in the world when its object sits at `object`.
    pub fn world_pose(&self, object: &Placement) -> Placement {
        object.compose(&Placement::new(
            self.center.x,
            self.center.y,
            self.center.z,
            self.theta,
        ))
    }

    pub fn corners_local(&self) -> [Vec3; 8] {
        let h = self.half_extents;
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *c = Vec3::new(sx * h.x, sy * h.y, sz * h.z);
        }
        out
    }

    pub fn footprint_area(&self) -> f64 {
        4.0 * self.half_extents.x * self.half_extents.y
    }
}

/// Convex, counter-clockwise polygon on the ground plane.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundPolygon {
    vertices: Vec<Vec2>,
}

impl GroundPolygon {
    pub fn new(vertices: Vec<Vec2>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::InvalidPolygon(format!("{n} vertices, need at least 3")));
        }
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            let cross = (b - a).perp(&(c - b));
            if cross <= 0.0 {
                return Err(Error::InvalidPolygon(
                    "vertices are not strictly convex in counter-clockwise order".into(),
                ));
            }
        }
        let p = GroundPolygon { vertices };
        if p.area() <= 0.0 {
            return Err(Error::InvalidPolygon("zero area".into()));
        }
        Ok(p)
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices)
    }

    pub fn contains(&self, x: &Vec2) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            (b - a).perp(&(x - a)) > 0.0
        })
    }

    /// Euclidean distance to the boundary, negative inside.
    pub fn signed_distance(&self, x: &Vec2) -> f64 {
        let n = self.vertices.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            best = best.min(point_segment_distance(x, &a, &b));
        }
        if self.contains(x) {
            -best
        } else {
            best
        }
    }

    /// Intersection with another convex polygon (Sutherland-Hodgman), as a
    /// vertex list that may be empty or degenerate.
    pub fn clip(&self, other: &GroundPolygon) -> Vec<Vec2> {
        clip_convex(&self.vertices, &other.vertices)
    }
}

pub fn point_segment_distance(x: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((x - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (x - (a + ab * t)).norm()
}

/// Shoelace area (positive for counter-clockwise input).
pub fn polygon_area(v: &[Vec2]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..v.len() {
        let a = v[i];
        let b = v[(i + 1) % v.len()];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut out: Vec<Vec2> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let edge = b - a;
        let side = |p: &Vec2| edge.perp(&(p - a));
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let sp = side(&p);
            let sq = side(&q);
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push(p + (q - p) * t);
            }
        }
    }
    out
}

/// Ground footprint of each cuboid once its object is placed at `placement`.
pub fn ground_projection(cuboids: &[Cuboid], placement: &Placement) -> Vec<GroundPolygon> {
    cuboids
        .iter()
        .map(|c| {
            let pose = c.world_pose(placement);
            let h = c.half_extents;
            let r = rot2(pose.theta());
            let center = pose.ground();
            let verts = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
                .iter()
                .map(|(sx, sy)| center + r * Vec2::new(sx * h.x, sy * h.y))
                .collect();
            GroundPolygon::new(verts).expect("cuboid footprints are valid rectangles")
        })
        .collect()
}

/// Exact signed distance to an axis-aligned rectangle with half-size `half`
/// centered at the origin, and its gradient.
pub fn rect_sdf(half: Vec2, p: Vec2) -> (f64, Vec2) {
    let ax = p.x.abs();
    let ay = p.y.abs();
    let qx = ax - half.x;
    let qy = ay - half.y;
    let sx = if p.x < 0.0 { -1.0 } else { 1.0 };
    let sy = if p.y < 0.0 { -1.0 } else { 1.0 };
    if qx > 0.0 || qy > 0.0 {
        let ox = qx.max(0.0);
        let oy = qy.max(0.0);
        let d = (ox * ox + oy * oy).sqrt();
        (d, Vec2::new(sx * ox / d, sy * oy / d))
    } else if qx > qy {
        (qx, Vec2::new(sx, 0.0))
    } else {
        (qy, Vec2::new(0.0, sy))
    }
}

/// `E[max(0, x + S)]` and its derivative, where `S` is the sum of two
/// independent uniforms whose total variance equals that of a uniform
/// interval of length `width`. The result is a C² cubic spline that equals
/// `max(0, x)` outside `|x| < width / √2`.
pub fn smoothed_ramp(x: f64, width: f64) -> (f64, f64) {
    let a2 = width / std::f64::consts::SQRT_2;
    if x <= -a2 {
        (0.0, 0.0)
    } else if x >= a2 {
        (x, 1.0)
    } else {
        let k = 6.0 * a2 * a2;
        if x <= 0.0 {
            let e = a2 + x;
            (e * e * e / k, e * e / (2.0 * a2 * a2))
        } else {
            let e = a2 - x;
            (x + e * e * e / k, 1.0 - e * e / (2.0 * a2 * a2))
        }
    }
}

/// Cell-averaged `|s|` (see [`smoothed_ramp`]) with its derivative.
pub fn smooth_abs(s: f64, width: f64) -> (f64, f64) {
    let (p, dp) = smoothed_ramp(s, width);
    (2.0 * p - s, 2.0 * dp - 1.0)
}

/// Rectangle distance averaged over a square cell of side `width` centered
/// at `p`: the absolute values and the max in the box distance
/// `max(|x| - hx, |y| - hy)` are replaced by smoothed cell means. Agrees with
/// [`rect_sdf`] inside the rectangle wherever the cell does not straddle a
/// medial-axis ridge.
pub fn rect_cell_sdf(half: Vec2, p: Vec2, width: f64) -> (f64, Vec2) {
    let (ax, dax) = smooth_abs(p.x, width);
    let (ay, day) = smooth_abs(p.y, width);
    let (qx, qy) = (ax - half.x, ay - half.y);
    let (m, dm) = smooth_abs(qx - qy, std::f64::consts::SQRT_2 * width);
    let d = 0.5 * (qx + qy + m);
    (d, Vec2::new(0.5 * (1.0 + dm) * dax, 0.5 * (1.0 - dm) * day))
}

/// Gradients of a scalar with respect to an object pose on the ground plane.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PoseGrad {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl std::ops::AddAssign for PoseGrad {
    fn add_assign(&mut self, o: PoseGrad) {
        self.x += o.x;
        self.y += o.y;
        self.theta += o.theta;
    }
}

impl std::ops::Mul<f64> for PoseGrad {
    type Output = PoseGrad;
    fn mul(self, s: f64) -> PoseGrad {
        PoseGrad {
            x: self.x * s,
            y: self.y * s,
            theta: self.theta * s,
        }
    }
}

/// Scene object in world coordinates: placement, geometry, category label.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub label: String,
    pub placement: Placement,
    pub cuboids: Vec<Cuboid>,
}

impl PlacedObject {
    pub fn footprints(&self) -> Vec<GroundPolygon> {
        ground_projection(&self.cuboids, &self.placement)
    }

    pub fn footprint_area(&self) -> f64 {
        union_area(&self.footprints())
    }

    /// Ground-plane centroid of the footprint union (cuboid-area weighted).
    pub fn centroid(&self) -> Vec2 {
        let mut acc = Vec2::zeros();
        let mut w = 0.0;
        for c in &self.cuboids {
            let a = c.footprint_area();
            acc += c.world_pose(&self.placement).ground() * a;
            w += a;
        }
        acc / w
    }

    /// Signed ground-plane distance to the object footprint (union of
    /// cuboids), its gradient with respect to `x`, and with respect to the
    /// object's own placement.
    pub fn sdf_2d(&self, x: &Vec2) -> (f64, Vec2, PoseGrad) {
        self.sdf_with(x, rect_sdf)
    }

    /// Like [`PlacedObject::sdf_2d`] with each rectangle distance averaged
    /// over a cell of side `width` (see [`rect_cell_sdf`]).
    pub fn cell_sdf_2d(&self, x: &Vec2, width: f64) -> (f64, Vec2, PoseGrad) {
        self.sdf_with(x, |half, p| rect_cell_sdf(half, p, width))
    }

    fn sdf_with(&self, x: &Vec2, rect: impl Fn(Vec2, Vec2) -> (f64, Vec2)) -> (f64, Vec2, PoseGrad) {
        let mut best = (f64::INFINITY, Vec2::zeros(), PoseGrad::default());
        let obj_xy = self.placement.ground();
        for c in &self.cuboids {
            let pose = c.world_pose(&self.placement);
            let rel = x - pose.ground();
            let r = rot2(pose.theta());
            let local = r.transpose() * rel;
            let (d, g_local) = rect(c.half_extents.xy(), local);
            if d < best.0 {
                let g_x = r * g_local;
                // d local/d alpha = -J local  (J = +90 deg rotation)
                let g_alpha = g_local.dot(&(-perp(local)));
                // the cuboid center moves with the object: d center/d theta = J (center - obj)
                let lever = perp(pose.ground() - obj_xy);
                best = (
                    d,
                    g_x,
                    PoseGrad {
                        x: -g_x.x,
                        y: -g_x.y,
                        theta: g_alpha - g_x.dot(&lever),
                    },
                );
            }
        }
        best
    }
}

/// Area of a union of convex polygons by inclusion-exclusion.
pub fn union_area(polys: &[GroundPolygon]) -> f64 {
    let n = polys.len();
    assert!(n < 16, "union_area is exponential in the cuboid count");
    let mut total = 0.0;
    for mask in 1u32..(1 << n) {
        let mut region: Option<Vec<Vec2>> = None;
        for (i, p) in polys.iter().enumerate() {
            if mask & (1 << i) != 0 {
                region = Some(match region {
                    None => p.vertices().to_vec(),
                    Some(r) => clip_convex(&r, p.vertices()),
                });
            }
        }
        let a = polygon_area(&region.unwrap_or_default());
        if mask.count_ones() % 2 == 1 {
            total += a;
        } else {
            total -= a;
        }
    }
    total
}

/// Area of (union of `polys`) ∩ `window` for a convex window.
pub fn union_area_in(polys: &[GroundPolygon], window: &[Vec2]) -> f64 {
    let clipped: Vec<Vec<Vec2>> = polys.iter().map(|p| clip_convex(p.vertices(), window)).collect();
    let n = clipped.len();
    let mut total = 0.0;
    for mask in 1u32..(1 << n) {
        let mut region: Option<Vec<Vec2>> = None;
        for (i, p) in clipped.iter().enumerate() {
            if mask & (1 << i) != 0 {
                region = Some(match region {
                    None => p.clone(),
                    Some(r) => clip_convex(&r, p),
                });
            }
        }
        let a = polygon_area(&region.unwrap_or_default());
        if mask.count_ones() % 2 == 1 {
            total += a;
        } else {
            total -= a;
        }
    }
    total.max(0.0)
}

/// Gradient of the occlusion signed distance for one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionGrad {
    /// d v / d q (world).
    pub point: Vec3,
    /// Index of the object whose shadow realizes the minimum, with the
    /// derivative with respect to that object's ground pose.
    pub object: Option<(usize, PoseGrad)>,
}

const FACE_AXES: [(usize, f64); 6] = [
    (0, 1.0),
    (0, -1.0),
    (1, 1.0),
    (1, -1.0),
    (2, 1.0),
    (2, -1.0),
];

/// Signed distance to the shadow frustum of an axis-aligned box centered at
/// the origin, seen from `eye` (both in the box frame). Returns the value
/// with gradients with respect to the query and the eye, or `None` when
/// the eye is inside the box.
fn box_shadow_sdf(half: &Vec3, eye: &Vec3, q: &Vec3) -> Option<(f64, Vec3, Vec3)> {
    let mut front = [false; 6];
    let mut any_front = false;
    for (i, (axis, sign)) in FACE_AXES.iter().enumerate() {
        front[i] = sign * eye[*axis] - half[*axis] > 0.0;
        any_front |= front[i];
    }
    if !any_front {
        return None;
    }
    let mut best = f64::NEG_INFINITY;
    let mut g_q = Vec3::zeros();
    let mut g_eye = Vec3::zeros();
    for (i, (axis, sign)) in FACE_AXES.iter().enumerate() {
        if front[i] {
            let d = sign * q[*axis] - half[*axis];
            if d > best {
                best = d;
                g_q = Vec3::zeros();
                g_q[*axis] = *sign;
                g_eye = Vec3::zeros();
            }
        }
    }
    // Edges: shared by a face on axis a (sign sa) and a face on axis b (sign sb).
    for a in 0..3 {
        for b in (a + 1)..3 {
            for &sa in &[1.0, -1.0] {
                for &sb in &[1.0, -1.0] {
                    let fa = front[2 * a + usize::from(sa < 0.0)];
                    let fb = front[2 * b + usize::from(sb < 0.0)];
                    if fa == fb {
                        continue;
                    }
                    let c = 3 - a - b;
                    let mut p0 = Vec3::zeros();
                    p0[a] = sa * half[a];
                    p0[b] = sb * half[b];
                    let mut p1 = p0;
                    p0[c] = -half[c];
                    p1[c] = half[c];
                    let mut n = (p0 - eye).cross(&(p1 - eye));
                    let mut s = 1.0;
                    if n.dot(&(-eye)) > 0.0 {
                        n = -n;
                        s = -1.0;
                    }
                    let len = n.norm();
                    if len < 1e-12 {
                        continue;
                    }
                    let m = n / len;
                    let w = q - eye;
                    let d = m.dot(&w);
                    if d > best {
                        best = d;
                        g_q = m;
                        let e = p0 - p1;
                        let w_perp = w - m * m.dot(&w);
                        g_eye = e.cross(&w_perp) * (s / len) - m;
                    }
                }
            }
        }
    }
    Some((best, g_q, g_eye))
}

/// Signed distance (meters) of `q` to the camera occlusion volume induced by
/// `objects`: negative when `q` is hidden behind (or inside) any cuboid.
/// Returns `+inf` when nothing can occlude.
pub fn occlusion_signed_distance(camera: &Camera, objects: &[PlacedObject], q: &Vec3) -> f64 {
    occlusion_signed_distance_with_grad(camera, objects, q).0
}

pub fn occlusion_signed_distance_with_grad(
    camera: &Camera,
    objects: &[PlacedObject],
    q: &Vec3,
) -> (f64, OcclusionGrad) {
    let eye = camera.center();
    let mut best = f64::INFINITY;
    let mut grad = OcclusionGrad {
        point: Vec3::zeros(),
        object: None,
    };
    for (oi, obj) in objects.iter().enumerate() {
        let obj_xy = obj.placement.ground();
        for c in &obj.cuboids {
            let pose = c.world_pose(&obj.placement);
            let q_l = pose.inverse_apply(q);
            let e_l = pose.inverse_apply(&eye);
            let Some((d, g_ql, g_el)) = box_shadow_sdf(&c.half_extents, &e_l, &q_l) else {
                continue;
            };
            if d < best {
                best = d;
                let r = pose.rotation();
                let g_q = r * g_ql;
                let g_e = r * g_el;
                // local = R(-alpha)(world - t): d/dt = -R, d/dalpha = -J local
                let g_t = -(g_q + g_e);
                let dq_alpha = Vec3::new(q_l.y, -q_l.x, 0.0);
                let de_alpha = Vec3::new(e_l.y, -e_l.x, 0.0);
                let g_alpha = g_ql.dot(&dq_alpha) + g_el.dot(&de_alpha);
                let lever = perp(pose.ground() - obj_xy);
                grad = OcclusionGrad {
                    point: g_q,
                    object: Some((
                        oi,
                        PoseGrad {
                            x: g_t.x,
                            y: g_t.y,
                            theta: g_alpha + g_t.xy().dot(&lever),
                        },
                    )),
                };
            }
        }
    }
    (best, grad)
}

/// Whether the open segment from `a` to `b` passes through the cuboid placed
/// at `pose` (slab test in the cuboid frame).
pub fn segment_hits_box(pose: &Placement, half: &Vec3, a: &Vec3, b: &Vec3) -> bool {
    let a = pose.inverse_apply(a);
    let b = pose.inverse_apply(b);
    let d = b - a;
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if a[k].abs() > half[k] {
                return false;
            }
        } else {
            let inv = 1.0 / d[k];
            let mut ta = (-half[k] - a[k]) * inv;
            let mut tb = (half[k] - a[k]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn axis_camera() -> Camera {
        Camera::new(1000.0, 1000.0, 960.0, 540.0, 1920.0, 1080.0, Matrix4::identity()).unwrap()
    }

    #[test]
    fn cell_rect_distance_is_exact_away_from_ridges() {
        let half = Vec2::new(1.0, 0.5);
        for p in [Vec2::new(0.85, 0.1), Vec2::new(-0.9, -0.15), Vec2::new(0.2, 0.4)] {
            assert_relative_eq!(rect_cell_sdf(half, p, 0.1).0, rect_sdf(half, p).0, epsilon = 1e-12);
        }
        // on the ridge the cell mean lies above the point value
        let p = Vec2::new(0.0, 0.0);
        assert!(rect_cell_sdf(Vec2::new(0.5, 0.5), p, 0.1).0 > rect_sdf(Vec2::new(0.5, 0.5), p).0);
    }

    #[test]
    fn cell_rect_distance_gradient() {
        let half = Vec2::new(0.6, 0.3);
        let h = 1e-6;
        for p in [Vec2::new(0.01, 0.02), Vec2::new(0.3, -0.01), Vec2::new(0.33, 0.02), Vec2::new(-0.5, 0.25)] {
            let (_, g) = rect_cell_sdf(half, p, 0.1);
            let fd = |e: Vec2| (rect_cell_sdf(half, p + e * h, 0.1).0 - rect_cell_sdf(half, p - e * h, 0.1).0) / (2.0 * h);
            assert_relative_eq!(g.x, fd(Vec2::x()), epsilon = 1e-6);
            assert_relative_eq!(g.y, fd(Vec2::y()), epsilon = 1e-6);
        }
    }

    #[test]
    fn smoothed_ramp_is_twice_continuously_differentiable() {
        let w = 0.2;
        let edge = w / std::f64::consts::SQRT_2;
        for x in [-edge, 0.0, edge] {
            let (a, da) = smoothed_ramp(x - 1e-9, w);
            let (b, db) = smoothed_ramp(x + 1e-9, w);
            assert_relative_eq!(a, b, epsilon = 1e-8);
            assert_relative_eq!(da, db, epsilon = 1e-7);
            let dd = |x: f64| (smoothed_ramp(x + 1e-7, w).1 - smoothed_ramp(x - 1e-7, w).1) / 2e-7;
            assert_relative_eq!(dd(x - 1e-5), dd(x + 1e-5), epsilon = 1e-3);
        }
    }

    #[test]
    fn projects_on_axis_and_offset() {
        let cam = axis_camera();
        assert_relative_eq!(cam.project(&Vec3::new(0.0, 0.0, 2.0)).unwrap(), Vec2::new(960.0, 540.0));
        assert_relative_eq!(cam.project(&Vec3::new(0.2, 0.0, 2.0)).unwrap(), Vec2::new(1060.0, 540.0));
    }

    #[test]
    fn back_projection_inverts_projection() {
        let cam = Camera::look_at(
            1000.0,
            1000.0,
            1920.0,
            1080.0,
            Vec3::new(1.0, -5.0, 1.7),
            Vec3::new(0.0, 0.0, 0.8),
        )
        .unwrap();
        let p = Vec3::new(0.4, 0.9, 1.1);
        let u = cam.project(&p).unwrap();
        let depth = cam.to_camera(&p).z;
        assert_relative_eq!(cam.back_project(&u, depth), p, epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let cam = axis_camera();
        assert!(matches!(
            cam.project(&Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(cam.project(&Vec3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn homogeneous_projection_oracle() {
        let cam = Camera::look_at(
            900.0,
            950.0,
            1280.0,
            720.0,
            Vec3::new(1.0, -4.0, 1.6),
            Vec3::new(0.3, 1.0, 0.8),
        )
        .unwrap();
        let k = Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
        let m = cam.world_to_camera();
        let rt = m.fixed_view::<3, 4>(0, 0).into_owned();
        for p in [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.5, 1.5, 1.7),
            Vec3::new(-1.0, 3.0, 0.2),
        ] {
            let h = k * (rt * p.push(1.0));
            let expect = Vec2::new(h.x / h.z, h.y / h.z);
            assert_relative_eq!(cam.project(&p).unwrap(), expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn projection_jacobian_matches_differences() {
        let cam = Camera::look_at(800.0, 800.0, 1000.0, 800.0, Vec3::new(0.0, -5.0, 1.5), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let p = Vec3::new(0.3, 0.4, 1.2);
        let (_, j) = cam.project_with_jacobian(&p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let d = (cam.project(&a).unwrap() - cam.project(&b).unwrap()) / (2.0 * h);
            assert_relative_eq!(d, j.column(k).into_owned(), epsilon = 1e-4);
        }
    }

    #[test]
    fn camera_rejects_bad_intrinsics() {
        assert!(Camera::new(0.0, 1.0, 1.0, 1.0, 2.0, 2.0, Matrix4::identity()).is_err());
        assert!(Camera::new(1.0, 1.0, 5.0, 1.0, 2.0, 2.0, Matrix4::identity()).is_err());
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(Camera::new(1.0, 1.0, 1.0, 1.0, 2.0, 2.0, m).is_err());
    }

    #[test]
    fn placement_identity_translation_rotation() {
        let p = Vec3::new(0.3, -0.2, 1.1);
        assert_eq!(Placement::identity().apply(&p), p);
        assert_relative_eq!(
            Placement::new(1.0, 0.0, 0.0, 0.0).apply(&Vec3::zeros()),
            Vec3::new(1.0, 0.0, 0.0)
        );
        let r = Placement::new(0.0, 0.0, 0.0, FRAC_PI_2);
        let oracle = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0) * Vec3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(r.apply(&Vec3::new(1.0, 0.0, 0.0)), oracle, epsilon = 1e-12);
    }

    #[test]
    fn theta_normalized() {
        let p = Placement::new(0.0, 0.0, 0.0, 3.0 * PI);
        assert!(p.theta() >= -PI && p.theta() < PI);
        assert_relative_eq!(p.theta(), -PI);
        assert_relative_eq!(normalize_angle(PI), -PI);
        assert_relative_eq!(normalize_angle(-PI), -PI);
    }

    #[test]
    fn placement_inverse_and_compose() {
        let a = Placement::new(1.0, 2.0, 0.5, 0.7);
        let b = Placement::new(-0.3, 0.4, 0.0, -1.9);
        let p = Vec3::new(0.2, 0.9, 0.1);
        assert_relative_eq!(a.compose(&b).apply(&p), a.apply(&b.apply(&p)), epsilon = 1e-12);
        assert_relative_eq!(a.inverse().apply(&a.apply(&p)), p, epsilon = 1e-12);
    }

    #[test]
    fn unit_cuboid_footprint() {
        let c = Cuboid::on_ground(1.0, 1.0, 1.0).unwrap();
        let poly = &ground_projection(&[c], &Placement::identity())[0];
        for v in poly.vertices() {
            assert_relative_eq!(v.x.abs(), 0.5);
            assert_relative_eq!(v.y.abs(), 0.5);
        }
        let rotated = &ground_projection(&[c], &Placement::new(0.0, 0.0, 0.0, PI / 4.0))[0];
        for v in rotated.vertices() {
            assert_relative_eq!(v.norm(), 2f64.sqrt() / 2.0, epsilon = 1e-12);
            assert!(v.x.abs() < 1e-12 || v.y.abs() < 1e-12);
        }
    }

    #[test]
    fn footprint_matches_corner_transform() {
        let c = Cuboid::new(Vec3::new(0.3, -0.2, 0.4), Vec3::new(0.6, 0.25, 0.4), 0.3).unwrap();
        let pl = Placement::new(1.5, -2.0, 0.0, 2.1);
        let poly = &ground_projection(&[c], &pl)[0];
        let local = Placement::new(c.center.x, c.center.y, c.center.z, c.theta);
        let mut oracle: Vec<Vec2> = c
            .corners_local()
            .iter()
            .filter(|p| p.z < 0.0)
            .map(|p| pl.apply(&local.apply(p)).xy())
            .collect();
        assert_eq!(oracle.len(), 4);
        for v in poly.vertices() {
            let (i, d) = oracle
                .iter()
                .enumerate()
                .map(|(i, o)| (i, (o - v).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(d < 1e-12);
            oracle.remove(i);
        }
    }

    #[test]
    fn square_signed_distance() {
        let sq = GroundPolygon::new(vec![
            Vec2::new(-1.0, -1.0),
            Vec2::new(1.0, -1.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(-1.0, 1.0),
        ])
        .unwrap();
        assert_relative_eq!(sq.signed_distance(&Vec2::zeros()), -1.0);
        assert_relative_eq!(sq.signed_distance(&Vec2::new(2.0, 0.0)), 1.0);
    }

    #[test]
    fn polygon_validation() {
        assert!(GroundPolygon::new(vec![Vec2::zeros(), Vec2::x()]).is_err());
        // clockwise
        assert!(GroundPolygon::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(1.0, 0.0)
        ])
        .is_err());
        // collinear
        assert!(GroundPolygon::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(2.0, 0.0),
            Vec2::new(1.0, 1.0)
        ])
        .is_err());
    }

    #[test]
    fn rect_sdf_gradient_matches_differences() {
        let half = Vec2::new(0.7, 0.3);
        for p in [
            Vec2::new(1.2, 0.9),
            Vec2::new(0.1, 0.05),
            Vec2::new(-0.2, 0.2),
            Vec2::new(-1.0, -0.1),
        ] {
            let (_, g) = rect_sdf(half, p);
            let h = 1e-7;
            let dx = (rect_sdf(half, p + Vec2::x() * h).0 - rect_sdf(half, p - Vec2::x() * h).0) / (2.0 * h);
            let dy = (rect_sdf(half, p + Vec2::y() * h).0 - rect_sdf(half, p - Vec2::y() * h).0) / (2.0 * h);
            assert_relative_eq!(g, Vec2::new(dx, dy), epsilon = 1e-6);
        }
    }

    #[test]
    fn object_sdf_pose_gradient_matches_differences() {
        let obj = PlacedObject {
            label: "table".into(),
            placement: Placement::new(0.4, -0.3, 0.0, 0.6),
            cuboids: vec![
                Cuboid::new(Vec3::new(0.3, 0.1, 0.4), Vec3::new(0.5, 0.3, 0.4), 0.2).unwrap(),
            ],
        };
        let x = Vec2::new(1.4, 0.6);
        let (_, gx, gp) = obj.sdf_2d(&x);
        let h = 1e-6;
        let eval = |o: &PlacedObject, x: &Vec2| o.sdf_2d(x).0;
        let mut o1 = obj.clone();
        let mut o2 = obj.clone();
        o1.placement.x += h;
        o2.placement.x -= h;
        assert_relative_eq!((eval(&o1, &x) - eval(&o2, &x)) / (2.0 * h), gp.x, epsilon = 1e-5);
        let mut o1 = obj.clone();
        let mut o2 = obj.clone();
        o1.placement.set_theta(obj.placement.theta() + h);
        o2.placement.set_theta(obj.placement.theta() - h);
        assert_relative_eq!((eval(&o1, &x) - eval(&o2, &x)) / (2.0 * h), gp.theta, epsilon = 1e-5);
        let dx = (eval(&obj, &(x + Vec2::y() * h)) - eval(&obj, &(x - Vec2::y() * h))) / (2.0 * h);
        assert_relative_eq!(dx, gx.y, epsilon = 1e-5);
    }

    #[test]
    fn union_area_counts_overlap_once() {
        let a = Cuboid::on_ground(1.0, 1.0, 1.0).unwrap();
        let mut b = a;
        b.center.x = 0.5;
        let polys = ground_projection(&[a, b], &Placement::identity());
        assert_relative_eq!(union_area(&polys), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn empty_scene_is_fully_visible() {
        let cam = axis_camera();
        let v = occlusion_signed_distance(&cam, &[], &Vec3::new(0.0, 0.0, 3.0));
        assert!(v.is_infinite() && v > 0.0);
    }

    #[test]
    fn point_behind_box_is_occluded() {
        let cam = Camera::look_at(800.0, 800.0, 1000.0, 800.0, Vec3::new(0.0, -4.0, 1.0), Vec3::new(0.0, 0.0, 0.5)).unwrap();
        let obj = PlacedObject {
            label: "desk".into(),
            placement: Placement::identity(),
            cuboids: vec![Cuboid::on_ground(1.0, 0.6, 1.0).unwrap()],
        };
        // hidden: directly behind the desk along the view ray
        let eye = cam.center();
        let through = Vec3::new(0.0, 0.0, 0.5);
        let q = eye + (through - eye) * 1.5;
        assert!(occlusion_signed_distance(&cam, std::slice::from_ref(&obj), &q) < 0.0);
        // inside the desk also counts
        assert!(occlusion_signed_distance(&cam, std::slice::from_ref(&obj), &through) < 0.0);
        // in front of it: visible
        let front = Vec3::new(0.0, -1.0, 0.5);
        assert!(occlusion_signed_distance(&cam, std::slice::from_ref(&obj), &front) > 0.0);
        // well above the shadow
        let above = Vec3::new(0.0, 1.0, 2.5);
        assert!(occlusion_signed_distance(&cam, &[obj], &above) > 0.0);
    }

    #[test]
    fn occlusion_gradients_match_differences() {
        let cam = Camera::look_at(800.0, 800.0, 1000.0, 800.0, Vec3::new(0.5, -4.0, 1.4), Vec3::new(0.0, 0.0, 0.5)).unwrap();
        let obj = PlacedObject {
            label: "desk".into(),
            placement: Placement::new(0.2, 0.1, 0.0, 0.4),
            cuboids: vec![Cuboid::new(Vec3::new(0.1, 0.2, 0.4), Vec3::new(0.6, 0.3, 0.4), 0.3).unwrap()],
        };
        let h = 1e-6;
        for q in [
            Vec3::new(0.1, 1.0, 0.3),
            Vec3::new(1.5, 1.0, 0.9),
            Vec3::new(-0.3, 0.6, 1.3),
            Vec3::new(0.0, -1.0, 0.6),
        ] {
            let objs = vec![obj.clone()];
            let (_, g) = occlusion_signed_distance_with_grad(&cam, &objs, &q);
            for k in 0..3 {
                let mut a = q;
                let mut b = q;
                a[k] += h;
                b[k] -= h;
                let fd = (occlusion_signed_distance(&cam, &objs, &a)
                    - occlusion_signed_distance(&cam, &objs, &b))
                    / (2.0 * h);
                assert_relative_eq!(fd, g.point[k], epsilon = 1e-5);
            }
            let (_, pg) = g.object.unwrap();
            let shift = |dx: f64, dy: f64, dt: f64| {
                let mut o = obj.clone();
                o.placement.x += dx;
                o.placement.y += dy;
                o.placement.set_theta(o.placement.theta() + dt);
                occlusion_signed_distance(&cam, &[o], &q)
            };
            assert_relative_eq!((shift(h, 0.0, 0.0) - shift(-h, 0.0, 0.0)) / (2.0 * h), pg.x, epsilon = 1e-5);
            assert_relative_eq!((shift(0.0, h, 0.0) - shift(0.0, -h, 0.0)) / (2.0 * h), pg.y, epsilon = 1e-5);
            assert_relative_eq!((shift(0.0, 0.0, h) - shift(0.0, 0.0, -h)) / (2.0 * h), pg.theta, epsilon = 1e-5);
        }
    }
}
