//! Balls on Hookean springs inside a square box with elastic walls.

use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::InteractionGraph;
use super::{Integrator, SimConfig, SimError};

pub const SPRING_LAYOUT: [&str; 4] = ["x", "y", "v_x", "v_y"];

#[derive(Clone, Debug, PartialEq)]
pub struct SpringState {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
}

impl SpringState {
    pub fn n_agents(&self) -> usize {
        self.pos.len()
    }

    fn is_finite(&self) -> bool {
        self.pos
            .iter()
            .chain(&self.vel)
            .all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// Standard-normal positions (redrawn until inside the box) and standard-normal
/// velocities rescaled to unit speed.
pub fn initial_spring_state<R: Rng>(n: usize, box_half_width: f64, rng: &mut R) -> SpringState {
    let mut pos = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0.0; 2];
        for c in &mut p {
            *c = loop {
                let v: f64 = rng.sample(StandardNormal);
                if v.abs() <= box_half_width {
                    break v;
                }
            };
        }
        pos.push(p);
    }
    let mut vel = Vec::with_capacity(n);
    for _ in 0..n {
        let v: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let norm = v[0].hypot(v[1]);
        vel.push(if norm > 0.0 {
            [v[0] / norm, v[1] / norm]
        } else {
            [1.0, 0.0]
        });
    }
    SpringState { pos, vel }
}

/// Unit-mass accelerations `a_i = sum_j -k_ij (x_i - x_j)` for row-major
/// effective spring constants `k`.
pub fn spring_accelerations(k: &[f64], pos: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = pos.len();
    let mut acc = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in 0..n {
            let kij = k[i * n + j];
            if kij != 0.0 {
                acc[i][0] -= kij * (pos[i][0] - pos[j][0]);
                acc[i][1] -= kij * (pos[i][1] - pos[j][1]);
            }
        }
    }
    acc
}

/// Kinetic plus spring potential energy; `k` must be symmetric.
pub fn spring_energy(k: &[f64], state: &SpringState) -> f64 {
    let n = state.n_agents();
    let kinetic: f64 = state.vel.iter().map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1])).sum();
    let mut potential = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = state.pos[i][0] - state.pos[j][0];
            let dy = state.pos[i][1] - state.pos[j][1];
            potential += 0.5 * k[i * n + j] * (dx * dx + dy * dy);
        }
    }
    kinetic + potential
}

/// Specular reflection: folds `x` back inside `[-b, b]`, flipping `v` once per bounce.
fn reflect(x: &mut f64, v: &mut f64, b: f64) {
    while x.is_finite() {
        if *x > b {
            *x = 2.0 * b - *x;
        } else if *x < -b {
            *x = -2.0 * b - *x;
        } else {
            break;
        }
        *v = -*v;
    }
}

fn apply_walls(state: &mut SpringState, b: f64) {
    for (p, v) in state.pos.iter_mut().zip(state.vel.iter_mut()) {
        for c in 0..2 {
            reflect(&mut p[c], &mut v[c], b);
        }
    }
}

fn verlet_step(k: &[f64], dt: f64, b: f64, state: &mut SpringState, acc: &mut Vec<[f64; 2]>) {
    for ((p, v), a) in state.pos.iter_mut().zip(state.vel.iter_mut()).zip(acc.iter()) {
        for c in 0..2 {
            v[c] += 0.5 * dt * a[c];
            p[c] += dt * v[c];
        }
    }
    apply_walls(state, b);
    *acc = spring_accelerations(k, &state.pos);
    for (v, a) in state.vel.iter_mut().zip(acc.iter()) {
        for c in 0..2 {
            v[c] += 0.5 * dt * a[c];
        }
    }
}

fn rk4_step(k: &[f64], dt: f64, b: f64, state: &mut SpringState) {
    let n = state.n_agents();
    let deriv = |pos: &[[f64; 2]], vel: &[[f64; 2]]| (vel.to_vec(), spring_accelerations(k, pos));
    let shift = |base: &[[f64; 2]], d: &[[f64; 2]], h: f64| -> Vec<[f64; 2]> {
        base.iter()
            .zip(d)
            .map(|(x, d)| [x[0] + h * d[0], x[1] + h * d[1]])
            .collect()
    };
    let (k1x, k1v) = deriv(&state.pos, &state.vel);
    let (k2x, k2v) = deriv(&shift(&state.pos, &k1x, 0.5 * dt), &shift(&state.vel, &k1v, 0.5 * dt));
    let (k3x, k3v) = deriv(&shift(&state.pos, &k2x, 0.5 * dt), &shift(&state.vel, &k2v, 0.5 * dt));
    let (k4x, k4v) = deriv(&shift(&state.pos, &k3x, dt), &shift(&state.vel, &k3v, dt));
    for i in 0..n {
        for c in 0..2 {
            state.pos[i][c] += dt / 6.0 * (k1x[i][c] + 2.0 * k2x[i][c] + 2.0 * k3x[i][c] + k4x[i][c]);
            state.vel[i][c] += dt / 6.0 * (k1v[i][c] + 2.0 * k2v[i][c] + 2.0 * k3v[i][c] + k4v[i][c]);
        }
    }
    apply_walls(state, b);
}

/// Advances `state` by `config.n_steps_raw` raw steps under effective spring
/// constants `k`. `observe` sees the state before every step and once after the last.
pub fn integrate_springs(
    k: &[f64],
    config: &SimConfig,
    state: &mut SpringState,
    mut observe: impl FnMut(usize, &SpringState),
) -> Result<(), SimError> {
    let n = state.n_agents();
    if k.len() != n * n {
        return Err(SimError::Config(format!("{} spring constants for {n} balls", k.len())));
    }
    let (dt, b) = (config.dt, config.box_half_width);
    let mut acc = spring_accelerations(k, &state.pos);
    for step in 0..config.n_steps_raw {
        observe(step, state);
        match config.integrator {
            Integrator::VelocityVerlet => verlet_step(k, dt, b, state, &mut acc),
            Integrator::Rk4 => rk4_step(k, dt, b, state),
        }
        if !state.is_finite() {
            return Err(SimError::Divergence { step: step + 1 });
        }
    }
    observe(config.n_steps_raw, state);
    Ok(())
}

/// One sample: stored frames `[T, N, 4]` of `(x, y, v_x, v_y)`, row-major.
pub fn simulate_springs<R: Rng>(
    graph: &InteractionGraph,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Vec<f64>, SimError> {
    config.validate()?;
    let mut state = initial_spring_state(graph.n_agents(), config.box_half_width, rng);
    simulate_springs_from(graph, config, &mut state)
}

pub fn simulate_springs_from(
    graph: &InteractionGraph,
    config: &SimConfig,
    state: &mut SpringState,
) -> Result<Vec<f64>, SimError> {
    let k = graph.scaled(config.strength_scale);
    let n = graph.n_agents();
    let mut out = Vec::with_capacity(config.stored_steps() * n * 4);
    integrate_springs(&k, config, state, |step, s| {
        if step < config.n_steps_raw && step % config.subsample_stride == 0 {
            for (p, v) in s.pos.iter().zip(&s.vel) {
                out.extend_from_slice(&[p[0], p[1], v[0], v[1]]);
            }
        }
    })?;
    Ok(out)
}
