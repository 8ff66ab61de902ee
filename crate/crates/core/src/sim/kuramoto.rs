//! Phase-coupled oscillators integrated with classical RK4.

use rand::Rng;

use super::graph::InteractionGraph;
use super::{CouplingSign, SimConfig, SimError};

pub const KURAMOTO_LAYOUT: [&str; 3] = ["dphi_dt", "sin_phi", "omega"];

#[derive(Clone, Debug, PartialEq)]
pub struct KuramotoState {
    /// Unwrapped phases.
    pub phase: Vec<f64>,
    pub omega: Vec<f64>,
}

/// Integer natural frequencies in `1..=10` and phases uniform in `[0, 2 pi)`.
pub fn initial_kuramoto_state<R: Rng>(n: usize, rng: &mut R) -> KuramotoState {
    let omega = (0..n).map(|_| f64::from(rng.random_range(1u32..=10))).collect();
    let phase = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    KuramotoState { phase, omega }
}

/// `dphi_i/dt = omega_i + sum_j k_ij sin(phi_i - phi_j)` in the literal form,
/// or with `sin(phi_j - phi_i)` for [`CouplingSign::Standard`].
pub fn kuramoto_rates(k: &[f64], omega: &[f64], phase: &[f64], sign: CouplingSign) -> Vec<f64> {
    let n = phase.len();
    let s = match sign {
        CouplingSign::Literal => 1.0,
        CouplingSign::Standard => -1.0,
    };
    (0..n)
        .map(|i| {
            let mut r = omega[i];
            for j in 0..n {
                let kij = k[i * n + j];
                if j != i && kij != 0.0 {
                    r += s * kij * (phase[i] - phase[j]).sin();
                }
            }
            r
        })
        .collect()
}

pub fn kuramoto_rk4_step(k: &[f64], dt: f64, sign: CouplingSign, state: &mut KuramotoState) {
    let f = |p: &[f64]| kuramoto_rates(k, &state.omega, p, sign);
    let shift = |d: &[f64], h: f64| -> Vec<f64> { state.phase.iter().zip(d).map(|(p, d)| p + h * d).collect() };
    let k1 = f(&state.phase);
    let k2 = f(&shift(&k1, 0.5 * dt));
    let k3 = f(&shift(&k2, 0.5 * dt));
    let k4 = f(&shift(&k3, dt));
    for i in 0..state.phase.len() {
        state.phase[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Advances `state` by `config.n_steps_raw` RK4 steps. `observe` sees the
/// state before every step and once after the last.
pub fn integrate_kuramoto(
    k: &[f64],
    config: &SimConfig,
    state: &mut KuramotoState,
    mut observe: impl FnMut(usize, &KuramotoState),
) -> Result<(), SimError> {
    let n = state.phase.len();
    if k.len() != n * n || state.omega.len() != n {
        return Err(SimError::Config(format!("{} couplings for {n} oscillators", k.len())));
    }
    for step in 0..config.n_steps_raw {
        observe(step, state);
        kuramoto_rk4_step(k, config.dt, config.coupling_sign, state);
        if state.phase.iter().any(|p| !p.is_finite()) {
            return Err(SimError::Divergence { step: step + 1 });
        }
    }
    observe(config.n_steps_raw, state);
    Ok(())
}

/// One sample: stored frames `[T, N, 3]` of `(dphi/dt, sin phi, omega)`, row-major.
pub fn simulate_kuramoto<R: Rng>(
    graph: &InteractionGraph,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Vec<f64>, SimError> {
    config.validate()?;
    let mut state = initial_kuramoto_state(graph.n_agents(), rng);
    simulate_kuramoto_from(graph, config, &mut state)
}

pub fn simulate_kuramoto_from(
    graph: &InteractionGraph,
    config: &SimConfig,
    state: &mut KuramotoState,
) -> Result<Vec<f64>, SimError> {
    let k = graph.scaled(config.strength_scale);
    let n = graph.n_agents();
    let mut out = Vec::with_capacity(config.stored_steps() * n * 3);
    integrate_kuramoto(&k, config, state, |step, s| {
        if step < config.n_steps_raw && step % config.subsample_stride == 0 {
            let rates = kuramoto_rates(&k, &s.omega, &s.phase, config.coupling_sign);
            for ((r, p), w) in rates.iter().zip(&s.phase).zip(&s.omega) {
                out.extend_from_slice(&[*r, p.sin(), *w]);
            }
        }
    })?;
    Ok(out)
}
