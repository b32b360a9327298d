//! Planar bifurcating lumens: generation from the five bifurcation
//! parameters and the geometric queries the mechanics layer needs.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Vec2::new(c, s)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    /// Rotated by +90 degrees.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// A point plus a heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid bifurcation parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("infeasible sampling range for `{field}`: {reason}")]
    InfeasibleRange { field: &'static str, reason: String },
    #[error("arclength {s} outside [0, {arclength}]")]
    OutOfRange { s: f64, arclength: f64 },
}

/// The five bifurcation scalars plus how far each lumen extends past the
/// branch point. Curvatures are signed; positive bends left of the tangent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BifurcationParams {
    pub diameter: f64,
    pub main_curvature: f64,
    pub distance_to_bifurcation: f64,
    pub branch_curvature: f64,
    pub bifurcation_angle: f64,
    pub main_length_after: f64,
    pub branch_length: f64,
}

impl BifurcationParams {
    /// Builds params with both trailing lengths at twice the distance to the
    /// bifurcation.
    pub fn with_default_extents(
        diameter: f64,
        main_curvature: f64,
        distance_to_bifurcation: f64,
        branch_curvature: f64,
        bifurcation_angle: f64,
    ) -> Self {
        BifurcationParams {
            diameter,
            main_curvature,
            distance_to_bifurcation,
            branch_curvature,
            bifurcation_angle,
            main_length_after: 2.0 * distance_to_bifurcation,
            branch_length: 2.0 * distance_to_bifurcation,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let invalid = |field, reason: &str| {
            Err(GeometryError::InvalidParams {
                field,
                reason: reason.to_string(),
            })
        };
        let all = [
            ("diameter", self.diameter),
            ("main_curvature", self.main_curvature),
            ("distance_to_bifurcation", self.distance_to_bifurcation),
            ("branch_curvature", self.branch_curvature),
            ("bifurcation_angle", self.bifurcation_angle),
            ("main_length_after", self.main_length_after),
            ("branch_length", self.branch_length),
        ];
        for (field, value) in all {
            if !value.is_finite() {
                return invalid(field, "must be finite");
            }
        }
        if self.diameter <= 0.0 {
            return invalid("diameter", "must be > 0");
        }
        if self.distance_to_bifurcation <= 0.0 {
            return invalid("distance_to_bifurcation", "must be > 0");
        }
        if !(self.bifurcation_angle > 0.0 && self.bifurcation_angle < PI) {
            return invalid("bifurcation_angle", "must lie in (0, pi)");
        }
        if self.main_curvature.abs() * self.diameter / 2.0 >= 1.0 {
            return invalid("main_curvature", "|curvature| * diameter / 2 must be < 1");
        }
        if self.branch_curvature.abs() * self.diameter / 2.0 >= 1.0 {
            return invalid("branch_curvature", "|curvature| * diameter / 2 must be < 1");
        }
        if self.main_length_after <= 0.0 {
            return invalid("main_length_after", "must be > 0");
        }
        if self.branch_length <= 0.0 {
            return invalid("branch_length", "must be > 0");
        }
        Ok(())
    }
}

/// Closed interval `[min, max]` used for uniform sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Interval { min, max }
    }

    pub const fn point(value: f64) -> Self {
        Interval {
            min: value,
            max: value,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }
}

/// Sampling intervals for every [`BifurcationParams`] field. The trailing
/// lengths are expressed as multiples of the sampled distance to the
/// bifurcation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamRanges {
    pub diameter: Interval,
    pub main_curvature: Interval,
    pub distance_to_bifurcation: Interval,
    pub branch_curvature: Interval,
    pub bifurcation_angle: Interval,
    pub main_length_after_factor: Interval,
    pub branch_length_factor: Interval,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            diameter: Interval::new(0.8, 1.5),
            main_curvature: Interval::new(-0.08, 0.08),
            distance_to_bifurcation: Interval::new(4.0, 8.0),
            branch_curvature: Interval::new(-0.08, 0.08),
            bifurcation_angle: Interval::new(PI / 6.0, PI / 2.5),
            main_length_after_factor: Interval::point(2.0),
            branch_length_factor: Interval::point(2.0),
        }
    }
}

impl ParamRanges {
    /// Rejects intervals that are empty or contain no valid value.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let infeasible = |field, reason: String| Err(GeometryError::InfeasibleRange { field, reason });
        let fields = [
            ("diameter", self.diameter),
            ("main_curvature", self.main_curvature),
            ("distance_to_bifurcation", self.distance_to_bifurcation),
            ("branch_curvature", self.branch_curvature),
            ("bifurcation_angle", self.bifurcation_angle),
            ("main_length_after_factor", self.main_length_after_factor),
            ("branch_length_factor", self.branch_length_factor),
        ];
        for (field, iv) in fields {
            if !(iv.min.is_finite() && iv.max.is_finite()) {
                return infeasible(field, "bounds must be finite".into());
            }
            if iv.min > iv.max {
                return infeasible(field, format!("empty interval [{}, {}]", iv.min, iv.max));
            }
        }
        let positive = [
            ("diameter", self.diameter),
            ("distance_to_bifurcation", self.distance_to_bifurcation),
            ("main_length_after_factor", self.main_length_after_factor),
            ("branch_length_factor", self.branch_length_factor),
        ];
        for (field, iv) in positive {
            if iv.min <= 0.0 {
                return infeasible(field, format!("lower bound {} must be > 0", iv.min));
            }
        }
        let angle = self.bifurcation_angle;
        if angle.min <= 0.0 || angle.max >= PI {
            return infeasible(
                "bifurcation_angle",
                format!("[{}, {}] must lie inside (0, pi)", angle.min, angle.max),
            );
        }
        // Every curvature must keep the widest tube from folding over itself.
        let max_radius = self.diameter.max / 2.0;
        for (field, iv) in [("main_curvature", self.main_curvature), ("branch_curvature", self.branch_curvature)] {
            let worst = iv.min.abs().max(iv.max.abs());
            if worst * max_radius >= 1.0 {
                return infeasible(
                    field,
                    format!("|curvature| up to {worst} with diameter up to {} folds the tube", self.diameter.max),
                );
            }
        }
        Ok(())
    }
}

/// Draws each field independently and uniformly from its interval.
pub fn sample_params<R: Rng + ?Sized>(
    ranges: &ParamRanges,
    rng: &mut R,
) -> Result<BifurcationParams, GeometryError> {
    ranges.validate()?;
    let diameter = ranges.diameter.sample(rng);
    let main_curvature = ranges.main_curvature.sample(rng);
    let distance_to_bifurcation = ranges.distance_to_bifurcation.sample(rng);
    let branch_curvature = ranges.branch_curvature.sample(rng);
    let bifurcation_angle = ranges.bifurcation_angle.sample(rng);
    let main_factor = ranges.main_length_after_factor.sample(rng);
    let branch_factor = ranges.branch_length_factor.sample(rng);
    let params = BifurcationParams {
        diameter,
        main_curvature,
        distance_to_bifurcation,
        branch_curvature,
        bifurcation_angle,
        main_length_after: main_factor * distance_to_bifurcation,
        branch_length: branch_factor * distance_to_bifurcation,
    };
    params.validate().map_err(|e| match e {
        GeometryError::InvalidParams { field, reason } => GeometryError::InfeasibleRange { field, reason },
        other => other,
    })?;
    Ok(params)
}

/// Circular arc (or straight segment when `curvature == 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterlineArc {
    pub start_point: Vec2,
    pub start_tangent: Vec2,
    pub curvature: f64,
    pub arclength: f64,
}

impl CenterlineArc {
    pub fn new(start_point: Vec2, heading: f64, curvature: f64, arclength: f64) -> Self {
        CenterlineArc {
            start_point,
            start_tangent: Vec2::from_angle(heading),
            curvature,
            arclength,
        }
    }

    /// Point and unit tangent at arclength `s`.
    pub fn point_at(&self, s: f64) -> Result<(Vec2, Vec2), GeometryError> {
        if !(0.0..=self.arclength).contains(&s) {
            return Err(GeometryError::OutOfRange {
                s,
                arclength: self.arclength,
            });
        }
        Ok(self.eval(s))
    }

    /// Unchecked evaluation; also valid slightly outside the arc.
    pub fn eval(&self, s: f64) -> (Vec2, Vec2) {
        let t0 = self.start_tangent;
        if self.curvature == 0.0 {
            return (self.start_point + t0 * s, t0);
        }
        let k = self.curvature;
        let turn = k * s;
        let (sin, cos) = turn.sin_cos();
        // Displacement along a circle, written to stay accurate as k -> 0.
        let along = sin / k;
        let across = (1.0 - cos) / k;
        let n0 = t0.perp();
        let point = self.start_point + t0 * along + n0 * across;
        (point, t0.rotate(turn))
    }

    pub fn end(&self) -> (Vec2, Vec2) {
        self.eval(self.arclength)
    }

    fn center(&self) -> Vec2 {
        self.start_point + self.start_tangent.perp() * (1.0 / self.curvature)
    }

    /// Distance from `p` to the full line or circle carrying the arc, a lower
    /// bound on the distance to the arc itself.
    pub fn carrier_distance(&self, p: Vec2) -> f64 {
        if self.curvature == 0.0 {
            return (p - self.start_point).cross(self.start_tangent).abs();
        }
        ((p - self.center()).norm() - 1.0 / self.curvature.abs()).abs()
    }

    /// Nearest point on the arc to `p` (endpoints clamped) and its distance.
    pub fn nearest(&self, p: Vec2) -> (Vec2, f64) {
        let n = self.nearest_feature(p);
        (n.point, n.distance)
    }

    /// Like [`nearest`](Self::nearest), also reporting the second derivative
    /// of the distance across the normal.
    pub fn nearest_feature(&self, p: Vec2) -> Nearest {
        let point_like = |q: Vec2| {
            let distance = p.distance(q);
            Nearest {
                point: q,
                distance,
                curvature: if distance > 0.0 { 1.0 / distance } else { 0.0 },
            }
        };
        if self.curvature == 0.0 {
            let t = (p - self.start_point).dot(self.start_tangent);
            if t < 0.0 {
                return point_like(self.start_point);
            }
            if t > self.arclength {
                return point_like(self.start_point + self.start_tangent * self.arclength);
            }
            let q = self.start_point + self.start_tangent * t;
            return Nearest {
                point: q,
                distance: p.distance(q),
                curvature: 0.0,
            };
        }
        let k = self.curvature;
        let radius = 1.0 / k.abs();
        let center = self.center();
        let rel = p - center;
        let sweep = k.abs() * self.arclength;
        let r = rel.norm();
        if r > 0.0 {
            let start_dir = self.start_point - center;
            // Angle from the start direction, measured in the travel direction.
            let mut offset = start_dir.cross(rel).atan2(start_dir.dot(rel));
            if k < 0.0 {
                offset = -offset;
            }
            if offset < 0.0 {
                offset += TAU;
            }
            if offset <= sweep {
                return Nearest {
                    point: center + rel * (radius / r),
                    distance: (r - radius).abs(),
                    curvature: if r > radius { 1.0 / r } else { -1.0 / r },
                };
            }
        }
        let a = self.start_point;
        let b = self.end().0;
        if p.distance(a) <= p.distance(b) {
            point_like(a)
        } else {
            point_like(b)
        }
    }
}

/// Nearest centerline feature to a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub point: Vec2,
    pub distance: f64,
    /// Second derivative of the distance along the direction normal to
    /// `p - point`: zero on a straight span, `±1/r` on an arc, `1/distance`
    /// at an endpoint.
    pub curvature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalBranch {
    Main,
    Branch,
}

/// Outward wall penetration of a point. `displacement = depth * direction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenetrationResult {
    pub depth: f64,
    pub direction: Vec2,
    pub displacement: Vec2,
}

impl PenetrationResult {
    pub const NONE: PenetrationResult = PenetrationResult {
        depth: 0.0,
        direction: Vec2::ZERO,
        displacement: Vec2::ZERO,
    };
}

/// Realized lumen: `arcs` are main-before-branch, main-after-branch, branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LumenMap {
    pub arcs: Vec<CenterlineArc>,
    pub radius: f64,
    pub entry_pose: Pose,
    pub goal_center: Vec2,
    pub goal_radius: f64,
    pub goal_branch: GoalBranch,
}

pub const MAIN_BEFORE: usize = 0;
pub const MAIN_AFTER: usize = 1;
pub const BRANCH: usize = 2;

/// Where to put the goal disk when generating a lumen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoalPlacement {
    pub branch: GoalBranch,
    /// Fraction of the chosen lumen's post-bifurcation arclength.
    pub fraction: f64,
    /// Goal radius as a multiple of the lumen diameter.
    pub radius_factor: f64,
}

impl Default for GoalPlacement {
    fn default() -> Self {
        GoalPlacement {
            branch: GoalBranch::Branch,
            fraction: 0.6,
            radius_factor: 1.0,
        }
    }
}

impl GoalPlacement {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fraction >= 0.0 && self.fraction <= 1.0) {
            return Err(format!("fraction {} must lie in [0, 1]", self.fraction));
        }
        if !(self.radius_factor > 0.0 && self.radius_factor.is_finite()) {
            return Err(format!("radius_factor {} must be > 0", self.radius_factor));
        }
        Ok(())
    }
}

/// Builds the lumen for `params` with the default goal placement.
pub fn generate_bifurcation(params: &BifurcationParams) -> Result<LumenMap, GeometryError> {
    generate_bifurcation_with_goal(params, &GoalPlacement::default())
}

pub fn generate_bifurcation_with_goal(
    params: &BifurcationParams,
    goal: &GoalPlacement,
) -> Result<LumenMap, GeometryError> {
    params.validate()?;
    let entry = Pose {
        position: Vec2::ZERO,
        heading: 0.0,
    };
    let before = CenterlineArc::new(
        entry.position,
        entry.heading,
        params.main_curvature,
        params.distance_to_bifurcation,
    );
    let (branch_point, tangent) = before.end();
    let after = CenterlineArc {
        start_point: branch_point,
        start_tangent: tangent,
        curvature: params.main_curvature,
        arclength: params.main_length_after,
    };
    let branch = CenterlineArc {
        start_point: branch_point,
        start_tangent: tangent.rotate(params.bifurcation_angle),
        curvature: params.branch_curvature,
        arclength: params.branch_length,
    };
    let target = match goal.branch {
        GoalBranch::Main => after,
        GoalBranch::Branch => branch,
    };
    let goal_center = target.eval(goal.fraction * target.arclength).0;
    Ok(LumenMap {
        arcs: vec![before, after, branch],
        radius: params.diameter / 2.0,
        entry_pose: entry,
        goal_center,
        goal_radius: goal.radius_factor * params.diameter,
        goal_branch: goal.branch,
    })
}

impl LumenMap {
    /// Nearest centerline point over all arcs and its distance.
    pub fn nearest_centerline(&self, p: Vec2) -> (Vec2, f64) {
        let n = self.nearest_feature(p);
        (n.point, n.distance)
    }

    /// Nearest centerline feature over all arcs.
    pub fn nearest_feature(&self, p: Vec2) -> Nearest {
        let mut best = Nearest {
            point: p,
            distance: f64::INFINITY,
            curvature: 0.0,
        };
        for arc in &self.arcs {
            if arc.carrier_distance(p) >= best.distance {
                continue;
            }
            let candidate = arc.nearest_feature(p);
            if candidate.distance < best.distance {
                best = candidate;
            }
        }
        best
    }

    pub fn penetration(&self, p: Vec2) -> PenetrationResult {
        let (q, dist) = self.nearest_centerline(p);
        let depth = dist - self.radius;
        if depth <= 0.0 || dist == 0.0 {
            return PenetrationResult::NONE;
        }
        let direction = (p - q) * (1.0 / dist);
        PenetrationResult {
            depth,
            direction,
            displacement: direction * depth,
        }
    }

    pub fn is_inside(&self, p: Vec2) -> bool {
        self.nearest_centerline(p).1 <= self.radius
    }

    pub fn in_goal(&self, p: Vec2) -> bool {
        p.distance(self.goal_center) <= self.goal_radius
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn branch_point(&self) -> Vec2 {
        self.arcs[MAIN_AFTER].start_point
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err("radius must be > 0".into());
        }
        if self.arcs.is_empty() {
            return Err("arcs must not be empty".into());
        }
        for (i, arc) in self.arcs.iter().enumerate() {
            if !(arc.arclength > 0.0 && arc.arclength.is_finite()) {
                return Err(format!("arcs[{i}].arclength must be > 0"));
            }
            if (arc.start_tangent.norm() - 1.0).abs() > 1e-9 {
                return Err(format!("arcs[{i}].start_tangent must be a unit vector"));
            }
            if !arc.curvature.is_finite() {
                return Err(format!("arcs[{i}].curvature must be finite"));
            }
        }
        if !(self.goal_radius > 0.0 && self.goal_radius.is_finite()) {
            return Err("goal_radius must be > 0".into());
        }
        if !self.is_inside(self.goal_center) {
            return Err("goal_center must lie inside the lumen".into());
        }
        Ok(())
    }

    /// Axis-aligned bounds of the tube union, sampled along each arc.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for arc in &self.arcs {
            let n = 64;
            for i in 0..=n {
                let p = arc.eval(arc.arclength * i as f64 / n as f64).0;
                lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
            }
        }
        let pad = self.radius.max(self.goal_radius);
        (lo - Vec2::new(pad, pad), hi + Vec2::new(pad, pad))
    }
}
