//! Planar serial-chain robot held at a fixed insertion port.
//!
//! Joint `i` (1-based) sits at the proximal end of link `i`; its angle is
//! relative to the previous link, or to the port heading for `i = 1`. The
//! distal joint is actuated (`tip_command`) and every other joint is a
//! passive rotational spring that settles against the lumen walls.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{LumenMap, PenetrationResult, Pose, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotParams {
    /// Joint spring constant.
    pub k1: f64,
    /// Wall contact spring constant.
    pub k2: f64,
    pub link_length: f64,
    pub max_links: usize,
    pub bend_step: f64,
    pub tip_limit: f64,
    /// Initial descent step for relaxation.
    pub relax_step: f64,
    /// Energy-change plateau threshold.
    pub relax_tol: f64,
    pub relax_max_iters: usize,
    /// Relax after every `relax_cadence`-th action.
    pub relax_cadence: usize,
    pub relax_method: RelaxMethod,
}

impl Default for RobotParams {
    fn default() -> Self {
        RobotParams {
            k1: 1.0,
            k2: 300.0,
            link_length: 1.25,
            max_links: 24,
            bend_step: 0.375,
            tip_limit: 1.875,
            relax_step: 0.05,
            relax_tol: 1e-8,
            relax_max_iters: 2000,
            relax_cadence: 1,
            relax_method: RelaxMethod::Newton,
        }
    }
}

impl RobotParams {
    /// Returns the offending field and reason on failure.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let positive = [
            ("k1", self.k1),
            ("k2", self.k2),
            ("link_length", self.link_length),
            ("bend_step", self.bend_step),
            ("tip_limit", self.tip_limit),
            ("relax_step", self.relax_step),
            ("relax_tol", self.relax_tol),
        ];
        for (field, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err((field, format!("must be a positive finite number, got {value}")));
            }
        }
        if self.max_links == 0 {
            return Err(("max_links", "must be >= 1".into()));
        }
        if self.relax_max_iters == 0 {
            return Err(("relax_max_iters", "must be >= 1".into()));
        }
        if self.relax_cadence == 0 {
            return Err(("relax_cadence", "must be >= 1".into()));
        }
        if self.bend_step > self.tip_limit {
            return Err(("bend_step", format!("must not exceed tip_limit ({})", self.tip_limit)));
        }
        Ok(())
    }
}

/// Point in configuration space plus the port pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub base_pose: Pose,
    /// Relative joint angles, proximal first. The last entry is the tip.
    pub angles: Vec<f64>,
    pub tip_command: f64,
}

impl RobotConfig {
    /// One inserted, straight link at `base_pose`.
    pub fn at_entry(base_pose: Pose) -> Self {
        RobotConfig {
            base_pose,
            angles: vec![0.0],
            tip_command: 0.0,
        }
    }

    pub fn n_inserted(&self) -> usize {
        self.angles.len()
    }

    /// Joints the relaxation may move: all but the distal one.
    pub fn n_relaxable(&self) -> usize {
        self.angles.len().saturating_sub(1)
    }

    /// Absolute heading of the distal link.
    pub fn tip_heading(&self) -> f64 {
        self.base_pose.heading + self.angles.iter().sum::<f64>()
    }

    pub fn check_invariants(&self, params: &RobotParams) -> Result<(), String> {
        if self.angles.is_empty() || self.angles.len() > params.max_links {
            return Err(format!("n_inserted {} outside [1, {}]", self.angles.len(), params.max_links));
        }
        if self.tip_command.abs() > params.tip_limit {
            return Err(format!("|tip_command| {} exceeds {}", self.tip_command, params.tip_limit));
        }
        if *self.angles.last().unwrap() != self.tip_command {
            return Err("distal angle differs from tip_command".into());
        }
        if self.angles.iter().any(|a| !a.is_finite()) {
            return Err("non-finite joint angle".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    BendCW,
    BendCCW,
    Advance,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::BendCW, Action::BendCCW, Action::Advance];

    pub fn index(self) -> usize {
        match self {
            Action::BendCW => 0,
            Action::BendCCW => 1,
            Action::Advance => 2,
        }
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub total: f64,
    pub spring_part: f64,
    pub contact_part: f64,
    /// Penetrating joints, 1-based.
    pub contacts: Vec<(usize, PenetrationResult)>,
}

impl EnergyReport {
    pub fn max_depth(&self) -> f64 {
        self.contacts.iter().map(|(_, p)| p.depth).fold(0.0, f64::max)
    }
}

/// Joint positions `x0..xn`, where `x0` is the port.
pub fn forward_kinematics(config: &RobotConfig, link_length: f64) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(config.angles.len() + 1);
    fk_into(&config.base_pose, &config.angles, link_length, &mut out);
    out
}

fn fk_into(base: &Pose, angles: &[f64], link_length: f64, out: &mut Vec<Vec2>) {
    out.clear();
    let mut p = base.position;
    let mut heading = base.heading;
    out.push(p);
    for &theta in angles {
        heading += theta;
        p = p + Vec2::from_angle(heading) * link_length;
        out.push(p);
    }
}

pub fn energy(config: &RobotConfig, lumen: &LumenMap, params: &RobotParams) -> EnergyReport {
    let points = forward_kinematics(config, params.link_length);
    let spring_part = 0.5 * params.k1 * config.angles.iter().map(|t| t * t).sum::<f64>();
    let mut contacts = Vec::new();
    let mut sum_sq = 0.0;
    for (j, &p) in points.iter().enumerate().skip(1) {
        let pen = lumen.penetration(p);
        if pen.depth > 0.0 {
            sum_sq += pen.displacement.norm_sq();
            contacts.push((j, pen));
        }
    }
    let contact_part = 0.5 * params.k2 * sum_sq;
    EnergyReport {
        total: spring_part + contact_part,
        spring_part,
        contact_part,
        contacts,
    }
}

/// Analytic `dE/dθi` over the relaxable joints (the tip is excluded).
pub fn energy_gradient(config: &RobotConfig, lumen: &LumenMap, params: &RobotParams) -> Vec<f64> {
    let mut ws = Workspace::default();
    ws.evaluate(&config.base_pose, &config.angles, lumen, params);
    let mut grad = Vec::new();
    ws.gradient(&config.angles, params, &mut grad);
    grad
}

/// Scratch buffers shared by energy and gradient evaluation.
#[derive(Debug, Default, Clone)]
struct Workspace {
    points: Vec<Vec2>,
    displacements: Vec<Vec2>,
    /// Penetrating joints.
    contacts: Vec<Contact>,
}

/// A joint in the Newton model of the contact energy.
#[derive(Debug, Clone, Copy)]
struct Contact {
    /// 1-based joint index.
    joint: usize,
    /// Outward wall normal.
    normal: Vec2,
    /// Second derivative of the centerline distance across the normal.
    curvature: f64,
    /// Zero for a penetrating joint. Otherwise the (negative) depth of a joint
    /// outside the wall whose contact is not in the gradient.
    residual: f64,
}

impl Workspace {
    /// Fills positions and per-joint wall displacements, returns total energy.
    fn evaluate(&mut self, base: &Pose, angles: &[f64], lumen: &LumenMap, params: &RobotParams) -> f64 {
        fk_into(base, angles, params.link_length, &mut self.points);
        self.displacements.clear();
        self.displacements.push(Vec2::ZERO);
        self.contacts.clear();
        let mut sum_sq = 0.0;
        for (j, &p) in self.points.iter().enumerate().skip(1) {
            let near = lumen.nearest_feature(p);
            let depth = near.distance - lumen.radius;
            let mut displacement = Vec2::ZERO;
            if depth > 0.0 {
                let normal = (p - near.point) * (1.0 / near.distance);
                displacement = normal * depth;
                // Same rounding as `energy`.
                sum_sq += displacement.norm_sq();
                self.contacts.push(Contact {
                    joint: j,
                    normal,
                    curvature: near.curvature,
                    residual: 0.0,
                });
            }
            self.displacements.push(displacement);
        }
        let spring: f64 = angles.iter().map(|t| t * t).sum();
        0.5 * params.k1 * spring + 0.5 * params.k2 * sum_sq
    }

    /// Uses the buffers of the last `evaluate` call.
    ///
    /// `dxj/dθi = perp(xj - x_{i-1})` for `i <= j`, so the contact term is
    /// `k2 * Σ_{j>=i} cross(xj - x_{i-1}, Δj)`, accumulated from the tip.
    fn gradient(&self, angles: &[f64], params: &RobotParams, out: &mut Vec<f64>) {
        let n = angles.len();
        let relaxable = n.saturating_sub(1);
        out.clear();
        out.resize(relaxable, 0.0);
        let mut sum_disp = Vec2::ZERO;
        let mut sum_moment = 0.0;
        for j in (1..=n).rev() {
            let d = self.displacements[j];
            sum_disp = sum_disp + d;
            sum_moment += self.points[j].cross(d);
            if j <= relaxable {
                let pivot = self.points[j - 1];
                let torque = sum_moment - pivot.cross(sum_disp);
                out[j - 1] = params.k1 * angles[j - 1] + params.k2 * torque;
            }
        }
    }

    /// Returns the Gauss-Newton matrix, the second-order contact part, and the
    /// gradient of the residual-only contacts.
    fn contact_hessian(
        &self,
        m: usize,
        contacts: &[Contact],
        params: &RobotParams,
    ) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let mut gn = DMatrix::<f64>::identity(m, m) * params.k1;
        let mut second = DMatrix::<f64>::zeros(m, m);
        let mut shift = DVector::<f64>::zeros(m);
        let mut a = vec![0.0; m];
        let mut b = vec![0.0; m];
        for c in contacts {
            let j = c.joint;
            let reach = j.min(m);
            let depth = if c.residual != 0.0 { c.residual } else { self.displacements[j].norm() };
            let tangent = c.normal.perp();
            let tip = self.points[j].dot(c.normal);
            for i in 0..reach {
                let lever = self.points[j] - self.points[i];
                a[i] = lever.cross(c.normal);
                b[i] = lever.cross(tangent);
                shift[i] += params.k2 * c.residual * a[i];
            }
            let wall = params.k2 * depth * c.curvature;
            for r in 0..reach {
                let ar = params.k2 * a[r];
                let br = wall * b[r];
                // For col <= r the later pivot is x_r.
                let chain = -params.k2 * depth * (tip - self.points[r].dot(c.normal));
                for col in 0..=r {
                    gn[(r, col)] += ar * a[col];
                    second[(r, col)] += chain + br * b[col];
                }
            }
        }
        for r in 0..m {
            for c in 0..r {
                gn[(c, r)] = gn[(r, c)];
                second[(c, r)] = second[(r, c)];
            }
        }
        (gn, second, shift)
    }

    /// Newton direction for the contact model over `contacts`.
    ///
    /// `aⱼ[i] = cross(xⱼ - x_{i-1}, nⱼ)` is the depth sensitivity of joint `j`
    /// to angle `i`, and `-nⱼ·(xⱼ - x_{max(i,k)-1})` its second derivative.
    /// The matrix is `k1·I + k2·Σ (aⱼaⱼᵀ + dⱼ·Bⱼ)`; when that is not positive
    /// definite the `dⱼ·Bⱼ` part is dropped. A nonzero residual marks a joint
    /// outside the wall whose depth `residual` is not in `grad`.
    fn newton_direction(
        &self,
        grad: &[f64],
        contacts: &[Contact],
        params: &RobotParams,
        out: &mut Vec<f64>,
    ) {
        let m = grad.len();
        let (gn, second, shift) = self.contact_hessian(m, contacts, params);
        let rhs = DVector::from_iterator(m, grad.iter().zip(shift.iter()).map(|(g, s)| -g - s));
        out.clear();
        if let Some(chol) = (&gn + &second).cholesky() {
            out.extend(chol.solve(&rhs).iter());
        } else if let Some(chol) = gn.cholesky() {
            out.extend(chol.solve(&rhs).iter());
        } else {
            out.extend(rhs.iter());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxOutcome {
    pub config: RobotConfig,
    pub iterations: usize,
    pub energy: f64,
    /// True when the energy change fell below `relax_tol`.
    pub converged: bool,
}

const MAX_HALVINGS: usize = 60;

/// Descent direction used by [`relax`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxMethod {
    /// `-∇E` scaled by a Barzilai-Borwein trial step.
    SteepestDescent,
    /// `-H⁻¹∇E` with `H` the exact Hessian of the contact model, or its
    /// Gauss-Newton part when the Hessian is not positive definite. Full
    /// trial step.
    Newton,
}

/// Descends the energy over the passive joints until it plateaus.
pub fn relax(config: &RobotConfig, lumen: &LumenMap, params: &RobotParams) -> RelaxOutcome {
    Relaxer::default().run(config, lumen, params, None)
}

/// Like [`relax`], also recording the energy of the start and of every
/// accepted iterate.
pub fn relax_traced(config: &RobotConfig, lumen: &LumenMap, params: &RobotParams) -> (RelaxOutcome, Vec<f64>) {
    let mut trace = Vec::new();
    let out = Relaxer::default().run(config, lumen, params, Some(&mut trace));
    (out, trace)
}

/// Reusable relaxation state; avoids reallocating per call.
#[derive(Debug, Default, Clone)]
pub struct Relaxer {
    ws: Workspace,
    trial: Workspace,
    active: Vec<Contact>,
    grad: Vec<f64>,
    prev_grad: Vec<f64>,
    direction: Vec<f64>,
    fallback: Vec<f64>,
    candidate: Vec<f64>,
}

impl Relaxer {
    pub fn run(
        &mut self,
        config: &RobotConfig,
        lumen: &LumenMap,
        params: &RobotParams,
        mut trace: Option<&mut Vec<f64>>,
    ) -> RelaxOutcome {
        let mut angles = config.angles.clone();
        let base = config.base_pose;
        let m = config.n_relaxable();
        let mut energy = self.ws.evaluate(&base, &angles, lumen, params);
        if let Some(t) = trace.as_deref_mut() {
            t.push(energy);
        }
        let done = |angles: Vec<f64>, iterations, energy, converged| RelaxOutcome {
            config: RobotConfig {
                base_pose: base,
                angles,
                tip_command: config.tip_command,
            },
            iterations,
            energy,
            converged,
        };
        if m == 0 {
            return done(angles, 0, energy, true);
        }
        self.ws.gradient(&angles, params, &mut self.grad);
        let mut step = match params.relax_method {
            RelaxMethod::SteepestDescent => params.relax_step,
            RelaxMethod::Newton => 1.0,
        };
        for iter in 1..=params.relax_max_iters {
            if self.grad.iter().all(|g| *g == 0.0) {
                return done(angles, iter - 1, energy, true);
            }
            let accepted = match params.relax_method {
                RelaxMethod::SteepestDescent => {
                    self.direction.clear();
                    self.direction.extend(self.grad.iter().map(|g| -g));
                    self.backtrack(&base, &angles, &mut step, energy, m, lumen, params)
                }
                RelaxMethod::Newton => {
                    self.active.clear();
                    self.active.extend_from_slice(&self.ws.contacts);
                    self.ws.newton_direction(&self.grad, &self.active, params, &mut self.direction);
                    // The local quadratic model predicts a decrease of -g·d/2;
                    // below the tolerance the next step would be a plateau.
                    let predicted: f64 = -0.5 * self.grad.iter().zip(&self.direction).map(|(g, d)| g * d).sum::<f64>();
                    if predicted < params.relax_tol {
                        return done(angles, iter - 1, energy, true);
                    }
                    self.newton_step(&base, &angles, &mut step, energy, m, lumen, params)
                }
            };
            let Some(new_energy) = accepted else {
                // No representable descent left.
                return done(angles, iter, energy, true);
            };
            let delta = energy - new_energy;
            std::mem::swap(&mut angles, &mut self.candidate);
            std::mem::swap(&mut self.ws, &mut self.trial);
            energy = new_energy;
            if let Some(t) = trace.as_deref_mut() {
                t.push(energy);
            }
            if delta < params.relax_tol {
                return done(angles, iter, energy, true);
            }
            std::mem::swap(&mut self.grad, &mut self.prev_grad);
            self.ws.gradient(&angles, params, &mut self.grad);
            if params.relax_method == RelaxMethod::SteepestDescent {
                step = self.barzilai_borwein(step, params);
            }
        }
        done(angles, params.relax_max_iters, energy, false)
    }

    /// Halves `step` from its current value until the energy does not rise.
    /// On success the trial buffers hold the accepted iterate.
    #[allow(clippy::too_many_arguments)]
    fn backtrack(
        &mut self,
        base: &Pose,
        angles: &[f64],
        step: &mut f64,
        energy: f64,
        m: usize,
        lumen: &LumenMap,
        params: &RobotParams,
    ) -> Option<f64> {
        for _ in 0..MAX_HALVINGS {
            let e = self.evaluate_trial(base, angles, *step, m, lumen, params);
            if e <= energy {
                return Some(e);
            }
            *step *= 0.5;
        }
        None
    }

    /// Full Newton step, first trying a model that also holds the joints the
    /// step would push into the wall, so they land on the wall instead of
    /// creeping toward it. Falls back to backtracking along the direction of
    /// the current contact set, which is a descent direction.
    #[allow(clippy::too_many_arguments)]
    fn newton_step(
        &mut self,
        base: &Pose,
        angles: &[f64],
        step: &mut f64,
        energy: f64,
        m: usize,
        lumen: &LumenMap,
        params: &RobotParams,
    ) -> Option<f64> {
        *step = 1.0;
        let plain = self.evaluate_trial(base, angles, 1.0, m, lumen, params);
        let before = self.active.len();
        for t in &self.trial.contacts {
            if self.active.iter().any(|c| c.joint == t.joint) {
                continue;
            }
            let p = self.ws.points[t.joint];
            let near = lumen.nearest_feature(p);
            if near.distance > 0.0 {
                self.active.push(Contact {
                    joint: t.joint,
                    normal: (p - near.point) * (1.0 / near.distance),
                    curvature: near.curvature,
                    residual: near.distance - lumen.radius,
                });
            }
        }
        if self.active.len() == before {
            return if plain <= energy {
                Some(plain)
            } else {
                *step = 0.5;
                self.backtrack(base, angles, step, energy, m, lumen, params)
            };
        }
        std::mem::swap(&mut self.direction, &mut self.fallback);
        self.ws.newton_direction(&self.grad, &self.active, params, &mut self.direction);
        let extended = self.evaluate_trial(base, angles, 1.0, m, lumen, params);
        if extended <= energy && extended <= plain {
            return Some(extended);
        }
        std::mem::swap(&mut self.direction, &mut self.fallback);
        if plain <= energy {
            return Some(self.evaluate_trial(base, angles, 1.0, m, lumen, params));
        }
        *step = 0.5;
        self.backtrack(base, angles, step, energy, m, lumen, params)
    }

    /// Evaluates `angles + step * direction` into the trial workspace.
    fn evaluate_trial(
        &mut self,
        base: &Pose,
        angles: &[f64],
        step: f64,
        m: usize,
        lumen: &LumenMap,
        params: &RobotParams,
    ) -> f64 {
        self.candidate.clear();
        self.candidate.extend_from_slice(angles);
        for (c, d) in self.candidate[..m].iter_mut().zip(&self.direction) {
            *c += step * d;
        }
        self.trial.evaluate(base, &self.candidate, lumen, params)
    }

    /// Next trial step from the last accepted move `-step * prev_grad`;
    /// falls back to `relax_step`.
    fn barzilai_borwein(&self, step: f64, params: &RobotParams) -> f64 {
        let mut s_sq = 0.0;
        let mut s_y = 0.0;
        for (g, pg) in self.grad.iter().zip(&self.prev_grad) {
            let s = -step * pg;
            s_sq += s * s;
            s_y += s * (g - pg);
        }
        if s_y > 0.0 && s_sq > 0.0 {
            (s_sq / s_y).clamp(params.relax_step * 1e-6, params.relax_step * 1e3)
        } else {
            params.relax_step
        }
    }
}

/// Outcome of [`apply_action`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActionOutcome {
    pub config: RobotConfig,
    /// Advance requested with every link already inserted.
    pub advance_exhausted: bool,
    /// Present iff relaxation ran for this action.
    pub relax_iterations: Option<usize>,
}

/// Executes one action; relaxes iff `action_counter % relax_cadence == 0`.
pub fn apply_action(
    config: &RobotConfig,
    action: Action,
    lumen: &LumenMap,
    params: &RobotParams,
    action_counter: u64,
) -> ActionOutcome {
    apply_action_with(&mut Relaxer::default(), config, action, lumen, params, action_counter)
}

pub fn apply_action_with(
    relaxer: &mut Relaxer,
    config: &RobotConfig,
    action: Action,
    lumen: &LumenMap,
    params: &RobotParams,
    action_counter: u64,
) -> ActionOutcome {
    let mut next = config.clone();
    let mut advance_exhausted = false;
    match action {
        Action::BendCW | Action::BendCCW => {
            let delta = if action == Action::BendCCW {
                params.bend_step
            } else {
                -params.bend_step
            };
            next.tip_command = (next.tip_command + delta).clamp(-params.tip_limit, params.tip_limit);
            *next.angles.last_mut().expect("at least one link") = next.tip_command;
        }
        Action::Advance => {
            if next.angles.len() >= params.max_links {
                advance_exhausted = true;
            } else {
                next.angles.insert(0, 0.0);
            }
        }
    }
    let relax_iterations = if action_counter % params.relax_cadence as u64 == 0 {
        let out = relaxer.run(&next, lumen, params, None);
        next = out.config;
        Some(out.iterations)
    } else {
        None
    };
    ActionOutcome {
        config: next,
        advance_exhausted,
        relax_iterations,
    }
}
