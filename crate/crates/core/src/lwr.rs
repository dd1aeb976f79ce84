//! First-order LWR traffic model solved with the Godunov finite-volume scheme.
//!
//! Units: kilometres and minutes. Densities are normalised so that the jam
//! density is `rho_max` (1 by default) and speeds are in km/min.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Downstream boundary treatment while the light is green.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GreenBoundary {
    /// Ghost density 0: the exit discharges the demand of the last cell.
    FreeDischarge,
    /// Ghost density copies the last cell.
    ZeroGradient,
}

impl std::str::FromStr for GreenBoundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free_discharge" => Ok(GreenBoundary::FreeDischarge),
            "zero_gradient" => Ok(GreenBoundary::ZeroGradient),
            other => Err(Error::Config(format!("unknown green boundary `{other}`"))),
        }
    }
}

impl std::fmt::Display for GreenBoundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GreenBoundary::FreeDischarge => "free_discharge",
            GreenBoundary::ZeroGradient => "zero_gradient",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Road length in km.
    pub road_length: f64,
    /// Simulated horizon in minutes.
    pub total_time: f64,
    pub nx: usize,
    pub cfl: f64,
    pub rho_max: f64,
    /// Free-flow speed in km/min.
    pub v_max: f64,
    pub base_inflow: f64,
    /// Output sampling interval in minutes; the solver step divides it evenly.
    pub sample_dt: f64,
    pub green: GreenBoundary,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            road_length: 5.0,
            total_time: 25.0,
            nx: 100,
            cfl: 0.9,
            rho_max: 1.0,
            v_max: 1.0,
            base_inflow: 0.1,
            sample_dt: 0.05,
            green: GreenBoundary::FreeDischarge,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.nx < 2 {
            return bad("sim.nx must be at least 2");
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return bad("sim.cfl must lie in (0, 1]");
        }
        if !(self.road_length > 0.0) || !(self.total_time > 0.0) {
            return bad("sim.road_length and sim.total_time must be positive");
        }
        if !(self.rho_max > 0.0) || !(self.v_max > 0.0) {
            return bad("sim.rho_max and sim.v_max must be positive");
        }
        if !(self.base_inflow > 0.0 && self.base_inflow < self.rho_max) {
            return bad("sim.base_inflow must lie in (0, rho_max)");
        }
        if !(self.sample_dt > 0.0) {
            return bad("sim.sample_dt must be positive");
        }
        Ok(())
    }

    pub fn law(&self) -> Greenshields {
        Greenshields {
            rho_max: self.rho_max,
            v_max: self.v_max,
        }
    }

    pub fn dx(&self) -> f64 {
        self.road_length / self.nx as f64
    }

    /// Largest step allowed by the CFL bound `dt <= cfl * dx / v_max`.
    pub fn max_stable_dt(&self) -> f64 {
        self.cfl * self.dx() / self.v_max
    }

    /// Largest CFL-stable step that divides `sample_dt` evenly.
    pub fn solver_dt(&self) -> f64 {
        let sub = (self.sample_dt / self.max_stable_dt() - 1e-12).ceil().max(1.0);
        self.sample_dt / sub
    }
}

/// Greenshields fundamental diagram `v(rho) = v_max (1 - rho / rho_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Greenshields {
    pub rho_max: f64,
    pub v_max: f64,
}

impl Default for Greenshields {
    fn default() -> Self {
        Self {
            rho_max: 1.0,
            v_max: 1.0,
        }
    }
}

impl Greenshields {
    fn check(&self, rho: f64) -> Result<()> {
        if rho.is_finite() && (0.0..=self.rho_max).contains(&rho) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "density {rho} outside [0, {}]",
                self.rho_max
            )))
        }
    }

    pub fn velocity(&self, rho: f64) -> Result<f64> {
        self.check(rho)?;
        Ok(self.velocity_unchecked(rho))
    }

    pub fn flux(&self, rho: f64) -> Result<f64> {
        self.check(rho)?;
        Ok(self.flux_unchecked(rho))
    }

    pub fn godunov_flux(&self, rho_left: f64, rho_right: f64) -> Result<f64> {
        self.check(rho_left)?;
        self.check(rho_right)?;
        Ok(self.godunov_flux_unchecked(rho_left, rho_right))
    }

    #[inline]
    pub fn velocity_unchecked(&self, rho: f64) -> f64 {
        self.v_max * (1.0 - rho / self.rho_max)
    }

    #[inline]
    pub fn flux_unchecked(&self, rho: f64) -> f64 {
        rho * self.velocity_unchecked(rho)
    }

    pub fn critical_density(&self) -> f64 {
        0.5 * self.rho_max
    }

    /// Exact Riemann flux for the concave Greenshields flux.
    #[inline]
    pub fn godunov_flux_unchecked(&self, rho_left: f64, rho_right: f64) -> f64 {
        let fl = self.flux_unchecked(rho_left);
        let fr = self.flux_unchecked(rho_right);
        if rho_left <= rho_right {
            fl.min(fr)
        } else {
            let crit = self.critical_density();
            if rho_right <= crit && crit <= rho_left {
                self.flux_unchecked(crit)
            } else {
                fl.max(fr)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightState {
    Red,
    Green,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightPhase {
    /// Minutes.
    pub duration: f64,
    pub state: LightState,
}

/// Randomised initial profile and downstream light schedule of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// `(position_km, level)` pairs; the level holds from its position to the
    /// next step and is added to the base inflow density.
    pub ic_steps: Vec<(f64, f64)>,
    pub light_phases: Vec<LightPhase>,
    pub upstream_inflow: f64,
}

impl Scenario {
    /// Road at base inflow everywhere with a permanently green light.
    pub fn quiet(cfg: &SimConfig) -> Self {
        Self::constant_light(cfg, LightState::Green)
    }

    /// No initial steps, base inflow upstream and a single light state throughout.
    pub fn constant_light(cfg: &SimConfig, state: LightState) -> Self {
        Self {
            ic_steps: Vec::new(),
            light_phases: vec![LightPhase {
                duration: cfg.total_time,
                state,
            }],
            upstream_inflow: cfg.base_inflow,
        }
    }

    pub fn validate(&self, cfg: &SimConfig) -> Result<()> {
        let mut prev = 0.0;
        for &(x, level) in &self.ic_steps {
            if !(x > prev && x < cfg.road_length) {
                return Err(Error::Config(format!(
                    "initial-condition step positions must be strictly increasing inside (0, {}), got {x}",
                    cfg.road_length
                )));
            }
            if !(0.0..=cfg.rho_max).contains(&level) {
                return Err(Error::Config(format!("step density {level} out of range")));
            }
            prev = x;
        }
        if !(0.0..=cfg.rho_max).contains(&self.upstream_inflow) {
            return Err(Error::Config("upstream inflow out of range".into()));
        }
        let total: f64 = self.light_phases.iter().map(|p| p.duration).sum();
        if self.light_phases.is_empty() || total < cfg.total_time {
            return Err(Error::Config(format!(
                "light phases cover {total} min, need {}",
                cfg.total_time
            )));
        }
        if self.light_phases.iter().any(|p| !(p.duration > 0.0)) {
            return Err(Error::Config("light phase durations must be positive".into()));
        }
        Ok(())
    }

    /// Light state in force at time `t` (minutes); the last phase extends forever.
    pub fn light_at(&self, t: f64) -> LightState {
        let mut end = 0.0;
        for phase in &self.light_phases {
            end += phase.duration;
            if t < end {
                return phase.state;
            }
        }
        self.light_phases
            .last()
            .map_or(LightState::Green, |p| p.state)
    }

    /// Cell-averaged initial densities, clamped to `[0, rho_max]`.
    pub fn initial_profile(&self, cfg: &SimConfig) -> Vec<f64> {
        let dx = cfg.dx();
        (0..cfg.nx)
            .map(|i| {
                let x = (i as f64 + 0.5) * dx;
                let level = self
                    .ic_steps
                    .iter()
                    .take_while(|(pos, _)| *pos <= x)
                    .last()
                    .map_or(0.0, |&(_, level)| level);
                (cfg.base_inflow + level).clamp(0.0, cfg.rho_max)
            })
            .collect()
    }

    /// Ghost densities at time `t` given the current last-cell density.
    pub fn ghosts(&self, cfg: &SimConfig, t: f64, last_cell: f64) -> (f64, f64) {
        let downstream = match self.light_at(t) {
            LightState::Red => cfg.rho_max,
            LightState::Green => match cfg.green {
                GreenBoundary::FreeDischarge => 0.0,
                GreenBoundary::ZeroGradient => last_cell,
            },
        };
        (self.upstream_inflow, downstream)
    }
}

/// Draws a random scenario: 2..=6 initial steps, alternating 1-2 minute light phases.
pub fn sample_scenario<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Scenario {
    let n_steps = rng.random_range(2..=6usize);
    let mut positions: Vec<f64> = (0..n_steps)
        .map(|_| cfg.road_length * rng.random_range(0.1..0.9))
        .collect();
    positions.sort_by(f64::total_cmp);
    // Strictly increasing positions; a duplicate draw is vanishingly rare but possible.
    positions.dedup();
    let ic_steps = positions
        .into_iter()
        .map(|x| (x, rng.random_range(0.0..=0.9) * cfg.rho_max))
        .collect();

    let mut state = if rng.random_bool(0.5) {
        LightState::Red
    } else {
        LightState::Green
    };
    let mut light_phases = Vec::new();
    let mut covered = 0.0;
    while covered < cfg.total_time {
        let duration = rng.random_range(1.0..=2.0);
        light_phases.push(LightPhase { duration, state });
        covered += duration;
        state = match state {
            LightState::Red => LightState::Green,
            LightState::Green => LightState::Red,
        };
    }
    Scenario {
        ic_steps,
        light_phases,
        upstream_inflow: cfg.base_inflow,
    }
}

/// Conservative Godunov update of one row with explicit ghost densities.
///
/// Returns the boundary fluxes `(inflow, outflow)` used in the update.
pub fn godunov_update(
    law: &Greenshields,
    state: &[f64],
    ghosts: (f64, f64),
    dt_over_dx: f64,
    out: &mut Vec<f64>,
) -> (f64, f64) {
    let n = state.len();
    out.clear();
    out.reserve(n);
    let mut left_flux = law.godunov_flux_unchecked(ghosts.0, state[0]);
    let inflow = left_flux;
    for i in 0..n {
        let right = if i + 1 < n { state[i + 1] } else { ghosts.1 };
        let right_flux = law.godunov_flux_unchecked(state[i], right);
        let next = state[i] - dt_over_dx * (right_flux - left_flux);
        out.push(next.clamp(0.0, law.rho_max));
        left_flux = right_flux;
    }
    (inflow, left_flux)
}

fn check_row(cfg: &SimConfig, state: &[f64]) -> Result<()> {
    if state.len() != cfg.nx {
        return Err(Error::Contract(format!(
            "state has {} cells, config expects {}",
            state.len(),
            cfg.nx
        )));
    }
    let law = cfg.law();
    state.iter().try_for_each(|&r| law.check(r))
}

/// Advances one row of densities from time `t` by `dt`.
pub fn step(
    cfg: &SimConfig,
    state: &[f64],
    scenario: &Scenario,
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    let limit = cfg.max_stable_dt();
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "time step {dt} violates the CFL bound {limit}"
        )));
    }
    check_row(cfg, state)?;
    let ghosts = scenario.ghosts(cfg, t, state[state.len() - 1]);
    let mut out = Vec::with_capacity(state.len());
    godunov_update(&cfg.law(), state, ghosts, dt / cfg.dx(), &mut out);
    Ok(out)
}

/// Space-time density solution, rows ascending in time, cell-centred in space.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    /// Shape `[nt, nx]`.
    pub rho: Array2<f64>,
    pub dx: f64,
    pub dt: f64,
}

impl DensityField {
    pub fn nt(&self) -> usize {
        self.rho.nrows()
    }

    pub fn nx(&self) -> usize {
        self.rho.ncols()
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.nt() - 1)
    }

    /// Index of the cell containing `x` (boundaries belong to the right cell).
    pub fn cell_of(&self, x: f64) -> usize {
        let i = (x / self.dx + 1e-9).floor();
        (i.max(0.0) as usize).min(self.nx() - 1)
    }

    /// Nearest stored time row.
    pub fn row_of(&self, t: f64) -> usize {
        let n = (t / self.dt).round();
        (n.max(0.0) as usize).min(self.nt() - 1)
    }

    pub fn nearest(&self, x: f64, t: f64) -> f64 {
        self.rho[[self.row_of(t), self.cell_of(x)]]
    }

    /// Bilinear interpolation between cell centres and stored rows, constant
    /// extrapolation outside the outermost centres.
    pub fn bilinear(&self, x: f64, t: f64) -> f64 {
        let (i0, i1, wx) = bracket((x / self.dx) - 0.5, self.nx());
        let (n0, n1, wt) = bracket(t / self.dt, self.nt());
        let r = &self.rho;
        let lo = lerp(r[[n0, i0]], r[[n0, i1]], wx);
        let hi = lerp(r[[n1, i0]], r[[n1, i1]], wx);
        lerp(lo, hi, wt)
    }

    pub fn mass(&self, n: usize) -> f64 {
        self.dx * self.rho.row(n).sum()
    }
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w == 0.0 {
        a
    } else {
        a + w * (b - a)
    }
}

/// Bracketing indices and weight for fractional index `s` on `n` nodes.
pub(crate) fn bracket(s: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 || s <= 0.0 {
        return (0, 0, 0.0);
    }
    let last = (n - 1) as f64;
    if s >= last {
        return (n - 1, n - 1, 0.0);
    }
    let i0 = s.floor();
    let w = s - i0;
    let i0 = i0 as usize;
    (i0, (i0 + 1).min(n - 1), w)
}

/// Boundary fluxes applied at every solver step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FluxLedger {
    pub inflow: Vec<f64>,
    pub outflow: Vec<f64>,
}

pub fn simulate(cfg: &SimConfig, scenario: &Scenario) -> Result<DensityField> {
    simulate_with_ledger(cfg, scenario).map(|(field, _)| field)
}

/// Runs the solver over the full horizon and records boundary fluxes per step.
pub fn simulate_with_ledger(
    cfg: &SimConfig,
    scenario: &Scenario,
) -> Result<(DensityField, FluxLedger)> {
    cfg.validate()?;
    scenario.validate(cfg)?;
    let dt = cfg.solver_dt();
    if dt > cfg.max_stable_dt() * (1.0 + 1e-12) {
        return Err(Error::Config("solver step violates the CFL bound".into()));
    }
    let steps = (cfg.total_time / dt - 1e-9).ceil() as usize;
    let nx = cfg.nx;
    let law = cfg.law();
    let ratio = dt / cfg.dx();

    let mut rho = Array2::<f64>::zeros((steps + 1, nx));
    let mut row = scenario.initial_profile(cfg);
    rho.row_mut(0)
        .iter_mut()
        .zip(&row)
        .for_each(|(dst, &v)| *dst = v);
    let mut next = Vec::with_capacity(nx);
    let mut ledger = FluxLedger {
        inflow: Vec::with_capacity(steps),
        outflow: Vec::with_capacity(steps),
    };
    for n in 0..steps {
        let t = n as f64 * dt;
        let ghosts = scenario.ghosts(cfg, t, row[nx - 1]);
        let (fin, fout) = godunov_update(&law, &row, ghosts, ratio, &mut next);
        ledger.inflow.push(fin);
        ledger.outflow.push(fout);
        std::mem::swap(&mut row, &mut next);
        rho.row_mut(n + 1)
            .iter_mut()
            .zip(&row)
            .for_each(|(dst, &v)| *dst = v);
    }
    Ok((
        DensityField {
            rho,
            dx: cfg.dx(),
            dt,
        },
        ledger,
    ))
}

/// Solves a Riemann problem with a jump at `x0` on `[0, length]` using
/// transmissive ghosts; returns the density row at `t_end`.
pub fn solve_riemann(
    law: &Greenshields,
    nx: usize,
    length: f64,
    x0: f64,
    states: (f64, f64),
    t_end: f64,
    cfl: f64,
) -> Result<Vec<f64>> {
    law.check(states.0)?;
    law.check(states.1)?;
    let dx = length / nx as f64;
    let steps = (t_end / (cfl * dx / law.v_max) - 1e-12).ceil().max(1.0) as usize;
    let dt = t_end / steps as f64;
    let mut row: Vec<f64> = (0..nx)
        .map(|i| {
            if (i as f64 + 0.5) * dx < x0 {
                states.0
            } else {
                states.1
            }
        })
        .collect();
    let mut next = Vec::with_capacity(nx);
    for _ in 0..steps {
        let ghosts = (row[0], row[nx - 1]);
        godunov_update(law, &row, ghosts, dt / dx, &mut next);
        std::mem::swap(&mut row, &mut next);
    }
    Ok(row)
}
