//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line (visible with `--nocapture`).
//!
//! The benchmark criterion trains 44 agents and is ignored in the default
//! run; execute it with
//! `cargo test --release -p endonav --test acceptance -- --ignored --nocapture`.

use std::collections::HashMap;
use std::time::Instant;

use endonav::experiments::{persist_report, run_benchmark, BenchmarkSpec, PRESET_MASTER_SEED};
use endonav::geometry::{
    generate_bifurcation, sample_params, CenterlineArc, GoalBranch, LumenMap, ParamRanges, Pose, Vec2,
};
use endonav::mechanics::{
    apply_action, energy, energy_gradient, relax_traced, Action, RobotConfig, RobotParams,
};
use endonav::qlearning::{q_update, train_in, AgentParams, Environment, QState, QTable, TerminalTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn random_lumen(rng: &mut ChaCha8Rng) -> LumenMap {
    let params = sample_params(&ParamRanges::default(), rng).unwrap();
    generate_bifurcation(&params).unwrap()
}

/// A configuration reached by random actions, then one unrelaxed bend or
/// advance so that it is off equilibrium.
fn random_reachable_config(lumen: &LumenMap, robot: &RobotParams, rng: &mut ChaCha8Rng) -> RobotConfig {
    let mut cfg = RobotConfig::at_entry(lumen.entry_pose);
    let n = rng.gen_range(0..40);
    for t in 0..n {
        let a = Action::from_index(rng.gen_range(0..3));
        cfg = apply_action(&cfg, a, lumen, robot, t).config;
    }
    let lazy = RobotParams {
        relax_cadence: usize::MAX,
        ..*robot
    };
    let a = Action::from_index(rng.gen_range(0..3));
    apply_action(&cfg, a, lumen, &lazy, 1).config
}

// Independent benchmark: trains and evaluates the preset and ten other
// master seeds.
#[test]
#[ignore = "long-running; run in release with --ignored"]
fn criterion_1_benchmark_success_rate() {
    let alternative_seeds: Vec<u64> = (1000..1010).collect();
    let started = Instant::now();
    let preset = BenchmarkSpec::default();
    assert_eq!(preset.master_seed, PRESET_MASTER_SEED);
    let t = Instant::now();
    let preset_rate = run_benchmark(&preset).unwrap().report.aggregate_success_rate;
    let preset_secs = t.elapsed().as_secs_f64();
    println!("preset seed {PRESET_MASTER_SEED}: aggregate {preset_rate:.3} in {preset_secs:.0} s");
    let mut passing = 0;
    for &seed in &alternative_seeds {
        let spec = BenchmarkSpec {
            master_seed: seed,
            ..BenchmarkSpec::default()
        };
        let run = run_benchmark(&spec).unwrap();
        let rates: Vec<String> = run.report.environments.iter().map(|e| format!("{:.2}", e.success_rate)).collect();
        println!(
            "seed {seed}: aggregate {:.3} per env [{}] in {:.0} s",
            run.report.aggregate_success_rate,
            rates.join(", "),
            run.elapsed.as_secs_f64()
        );
        if run.report.aggregate_success_rate >= 0.60 {
            passing += 1;
        }
    }
    report(
        1,
        preset_rate >= 0.70 && passing >= 8,
        format!(
            "preset {preset_rate:.3} (need >= 0.70, {preset_secs:.0} s), {passing}/10 alternative seeds >= 0.60 (need 8), total {:.0} s",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_gradient_matches_finite_differences() {
    let started = Instant::now();
    let robot = RobotParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut with_contact = 0;
    let mut worst = 0.0f64;
    let mut pairs = 0;
    while pairs < 100 {
        let lumen = random_lumen(&mut rng);
        let mut cfg = random_reachable_config(&lumen, &robot, &mut rng);
        if cfg.n_relaxable() == 0 {
            continue;
        }
        // Perturb so the joints are not sitting on a relaxed equilibrium.
        for a in cfg.angles.iter_mut().rev().skip(1) {
            *a += rng.gen_range(-0.15..0.15);
        }
        let g = energy_gradient(&cfg, &lumen, &robot);
        assert_eq!(g.len(), cfg.n_relaxable());
        if !energy(&cfg, &lumen, &robot).contacts.is_empty() {
            with_contact += 1;
        }
        for (i, gi) in g.iter().enumerate() {
            let mut plus = cfg.clone();
            plus.angles[i] += h;
            let mut minus = cfg.clone();
            minus.angles[i] -= h;
            let fd = (energy(&plus, &lumen, &robot).total - energy(&minus, &lumen, &robot).total) / (2.0 * h);
            worst = worst.max((fd - gi).abs() / gi.abs().max(1.0));
        }
        pairs += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        2,
        worst <= 1e-5 && with_contact >= 30 && secs < 5.0,
        format!("worst relative error {worst:.2e} over {pairs} pairs, {with_contact} with contact, {secs:.2} s"),
    );
}

#[test]
fn criterion_3_relaxation_is_monotone_and_plateaus() {
    let robot = RobotParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lumens: Vec<LumenMap> = (0..20).map(|_| random_lumen(&mut rng)).collect();
    let mut converged = 0;
    let mut violations = 0;
    for call in 0..1000 {
        let lumen = &lumens[call % lumens.len()];
        let cfg = random_reachable_config(lumen, &robot, &mut rng);
        let (out, trace) = relax_traced(&cfg, lumen, &robot);
        let start = energy(&cfg, lumen, &robot).total;
        if trace.windows(2).any(|w| w[1] > w[0]) || out.energy > start {
            violations += 1;
        }
        if out.converged && out.iterations < robot.relax_max_iters {
            converged += 1;
        }
    }
    report(
        3,
        violations == 0 && converged >= 990,
        format!("{violations} calls with an energy increase, {converged}/1000 reached the plateau"),
    );
}

/// 5x5 grid; the goal is the bottom-right cell. BendCW moves right,
/// BendCCW moves down, Advance moves left; moves off the grid stay put.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Cell(u8, u8);

impl QState for Cell {
    fn terminal(&self) -> TerminalTag {
        if *self == GOAL {
            TerminalTag::Goal
        } else {
            TerminalTag::None
        }
    }
}

const GOAL: Cell = Cell(4, 4);
const R_GOAL: f64 = 1.0;
const R_STEP: f64 = -0.01;
const GAMMA: f64 = 0.9;

fn grid_step(s: Cell, a: Action) -> (Cell, f64) {
    let Cell(r, c) = s;
    let next = match a {
        Action::BendCW => Cell(r, (c + 1).min(4)),
        Action::BendCCW => Cell((r + 1).min(4), c),
        Action::Advance => Cell(r, c.saturating_sub(1)),
    };
    (next, if next == GOAL { R_GOAL } else { R_STEP })
}

struct Grid {
    state: Cell,
}

impl Environment for Grid {
    type State = Cell;

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Cell {
        loop {
            let s = Cell(rng.gen_range(0..5), rng.gen_range(0..5));
            if s != GOAL {
                self.state = s;
                return s;
            }
        }
    }

    fn step(&mut self, action: Action) -> (Cell, f64) {
        let (next, r) = grid_step(self.state, action);
        self.state = next;
        (next, r)
    }
}

fn value_iteration() -> HashMap<(Cell, Action), f64> {
    let cells: Vec<Cell> = (0..5).flat_map(|r| (0..5).map(move |c| Cell(r, c))).filter(|s| *s != GOAL).collect();
    let mut v: HashMap<Cell, f64> = cells.iter().map(|s| (*s, 0.0)).collect();
    let q_of = |v: &HashMap<Cell, f64>, s: Cell, a: Action| {
        let (n, r) = grid_step(s, a);
        r + GAMMA * if n == GOAL { 0.0 } else { v[&n] }
    };
    for _ in 0..1000 {
        let next: HashMap<Cell, f64> = cells
            .iter()
            .map(|&s| (s, Action::ALL.iter().map(|&a| q_of(&v, s, a)).fold(f64::NEG_INFINITY, f64::max)))
            .collect();
        v = next;
    }
    cells.iter().flat_map(|&s| Action::ALL.map(|a| ((s, a), q_of(&v, s, a)))).collect()
}

#[test]
fn criterion_4_q_learning_matches_value_iteration() {
    let started = Instant::now();
    let q_star = value_iteration();
    let agent = AgentParams {
        alpha: 0.5,
        gamma: GAMMA,
        explore_epsilon_start: 1.0,
        explore_epsilon_end: 1.0,
        epsilon_decay_episodes: 0,
        max_steps_per_episode: 50,
        ..AgentParams::default()
    };
    let mut env = Grid { state: Cell(0, 0) };
    let (q, _) = train_in(&mut env, &agent, 3000, &mut ChaCha8Rng::seed_from_u64(4));
    let mut max_err = 0.0f64;
    let mut policy_mismatches = 0;
    for r in 0..5 {
        for c in 0..5 {
            let s = Cell(r, c);
            if s == GOAL {
                continue;
            }
            for a in Action::ALL {
                max_err = max_err.max((q.get(&s, a) - q_star[&(s, a)]).abs());
            }
            let best = Action::ALL.iter().map(|a| q_star[&(s, *a)]).fold(f64::NEG_INFINITY, f64::max);
            // Any action tied for the optimum is an optimal choice.
            if best - q_star[&(s, q.greedy(&s))] > 1e-9 {
                policy_mismatches += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        4,
        policy_mismatches == 0 && max_err <= 1e-3 && secs < 5.0,
        format!("{policy_mismatches} policy mismatches, max |Q - Q*| = {max_err:.2e}, {secs:.2} s"),
    );
}

#[test]
fn criterion_5_formula_fidelity() {
    #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
    struct S(u8);
    impl QState for S {
        fn terminal(&self) -> TerminalTag {
            TerminalTag::None
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mut q = QTable::new();
        let mut next_row = [0.0; 3];
        for a in Action::ALL {
            q.set(&S(0), a, rng.gen_range(-10.0..10.0));
            next_row[a.index()] = rng.gen_range(-10.0..10.0);
            q.set(&S(1), a, next_row[a.index()]);
        }
        let a = Action::from_index(rng.gen_range(0..3));
        let old = q.get(&S(0), a);
        let r = rng.gen_range(-5.0..5.0);
        let alpha = rng.gen_range(1e-6..=1.0);
        let gamma = rng.gen_range(0.0..1.0);
        let got = q_update(&mut q, &S(0), a, r, &S(1), alpha, gamma);
        let max_next = next_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expected = old + alpha * (r + gamma * max_next - old);
        worst = worst.max((got - expected).abs()).max((q.get(&S(0), a) - expected).abs());
    }

    let origin = Pose {
        position: Vec2::ZERO,
        heading: 0.0,
    };
    let wide = LumenMap {
        arcs: vec![CenterlineArc::new(Vec2::ZERO, 0.0, 0.0, 100.0)],
        radius: 50.0,
        entry_pose: origin,
        goal_center: Vec2::new(90.0, 0.0),
        goal_radius: 1.0,
        goal_branch: GoalBranch::Main,
    };
    let cfg = |angles: Vec<f64>| RobotConfig {
        base_pose: origin,
        tip_command: *angles.last().unwrap(),
        angles,
    };
    let base = RobotParams::default();
    let zero = energy(&cfg(vec![0.0; 4]), &wide, &base).total;
    let spring = energy(&cfg(vec![0.2]), &wide, &RobotParams { k1: 2.0, ..base }).total;
    // A unit tube ending at x = 1 with radius 0.4: a straight 1.5-long link
    // ends 0.5 past the end point, so its displacement is (0.1, 0).
    let capped = LumenMap {
        arcs: vec![CenterlineArc::new(Vec2::ZERO, 0.0, 0.0, 1.0)],
        radius: 0.4,
        ..wide.clone()
    };
    let contact_params = RobotParams {
        k2: 10.0,
        link_length: 1.5,
        ..base
    };
    let contact = energy(&cfg(vec![0.0]), &capped, &contact_params).total;
    let energies_exact = zero == 0.0 && spring == 0.5 * 2.0 * 0.2 * 0.2 && (contact - 0.05).abs() < 1e-12;
    report(
        5,
        worst <= 1e-12 && energies_exact,
        format!("q_update worst deviation {worst:.1e}; energies zero={zero}, spring={spring}, contact={contact}"),
    );
}

#[test]
fn criterion_6_benchmark_reports_are_bytewise_identical() {
    let spec = BenchmarkSpec {
        n_environments: 2,
        n_eval_episodes: 5,
        n_train_episodes: 30,
        master_seed: 6,
        agent: AgentParams {
            max_steps_per_episode: 60,
            epsilon_decay_episodes: 24,
            ..AgentParams::default()
        },
        ..BenchmarkSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let path = dir.path().join(format!("report{i}.json"));
        persist_report(&run_benchmark(&spec).unwrap().report, &path).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    report(6, files[0] == files[1], format!("{} bytes per report", files[0].len()));
}

/// Distance from `p` to the centerline sampled every `ds`. A coarse pass
/// picks candidate stretches; each is then sampled at the full density.
fn sampled_distance(arc: &CenterlineArc, p: Vec2, ds: f64) -> f64 {
    let at = |s: f64| arc.eval(s.clamp(0.0, arc.arclength)).0.distance(p);
    let coarse = 1e-2;
    let n = (arc.arclength / coarse).ceil() as usize;
    let samples: Vec<f64> = (0..=n).map(|i| at(i as f64 * coarse)).collect();
    let best = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut out = best;
    for (i, d) in samples.iter().enumerate() {
        if *d > best + coarse {
            continue;
        }
        let from = (i as f64 - 1.0) * coarse;
        let steps = (2.0 * coarse / ds).ceil() as usize;
        for k in 0..=steps {
            out = out.min(at(from + k as f64 * ds));
        }
    }
    out
}

#[test]
fn criterion_7_penetration_matches_sampling_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ds = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let lumen = random_lumen(&mut rng);
        let (lo, hi) = lumen.bounds();
        for _ in 0..1000 {
            let p = Vec2::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y));
            let dist = lumen
                .arcs
                .iter()
                .map(|a| sampled_distance(a, p, ds))
                .fold(f64::INFINITY, f64::min);
            let oracle = (dist - lumen.radius).max(0.0);
            worst = worst.max((lumen.penetration(p).depth - oracle).abs());
        }
    }
    report(7, worst <= 1e-6, format!("worst depth deviation {worst:.2e} over 20000 points"));
}
