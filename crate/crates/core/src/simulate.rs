//! Closed-loop time integration of the nonlinear constrained plant with a
//! linear controller: BDF2 with an extrapolated nonlinearity, one Heun step
//! to start, and a variance-based stabilization verdict.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::CentralController;
use crate::error::{dim_err, Error, Result};
use crate::flowdae::{ConstrainedSystem, NonlinearPlant, Saddle};
use crate::linalg::{block_diag, hstack, pencil_eigenvalues, vstack, C64};
use crate::lti::DescriptorSystem;

/// Variance increases below this count as roundoff.
pub const NOISE_FLOOR: f64 = 1e-14;
/// Blow-up threshold relative to the steady state norm.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initial {
    SteadyState,
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub h: f64,
    pub t_end: f64,
    pub perturb_amp: f64,
    pub perturb_window: [f64; 2],
    pub initial: Initial,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            h: 0.01,
            t_end: 30.0,
            perturb_amp: 1e-6,
            perturb_window: [0.0, 1.0],
            initial: Initial::SteadyState,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.perturb_window;
        if !(self.h > 0.0) {
            return Err(Error::InvalidArgument("h must be positive".into()));
        }
        if !(self.t_end >= 4.0 * self.h) {
            return Err(Error::InvalidArgument("t_end must be at least 4 h".into()));
        }
        if !(0.0 <= a && a <= b && b <= self.t_end) {
            return Err(Error::InvalidArgument(
                "perturbation window must lie within [0, t_end]".into(),
            ));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.h).round() as usize
    }
}

/// `amp sin(2 pi t)` inside the window, zero outside.
pub fn perturbation_scalar(t: f64, amp: f64, window: [f64; 2]) -> f64 {
    if t >= window[0] && t <= window[1] {
        amp * (2.0 * std::f64::consts::PI * t).sin()
    } else {
        0.0
    }
}

/// The perturbation applied to each of `m` input channels.
pub fn perturbation_input(t: f64, cfg: &SimulationConfig, m: usize) -> DVector<f64> {
    DVector::from_element(
        m,
        perturbation_scalar(t, cfg.perturb_amp, cfg.perturb_window),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub times: Vec<f64>,
    /// One row per time, `y = C v`.
    pub outputs: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub controller_state_norms: Vec<f64>,
    /// Largest `||J v|| / (||J|| ||v||)` along the trace.
    pub constraint_drift: f64,
    pub diverged_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rationale {
    NegativeDiff,
    NoiseFloor,
    Diverged,
    Growing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub stabilized: bool,
    pub var_q3: f64,
    pub var_q4: f64,
    pub diff: f64,
    pub rationale: Rationale,
}

/// Controller integrator state in standard form `x' = A x + B y`, `u = C x`.
struct ControllerState {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    /// LU of `(3/2) I - h A`.
    bdf: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ControllerState {
    fn new(k: &CentralController, h: f64) -> Result<Self> {
        let sys = k.system()?;
        let (a, b) = sys.to_standard()?;
        let n = a.nrows();
        let bdf = (DMatrix::identity(n, n) * 1.5 - &a * h).lu();
        Ok(Self {
            a,
            b,
            c: sys.c,
            bdf,
        })
    }

    fn rhs(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * y
    }
}

/// Integrates `E v' = A_S v + N(v, v) + J^T q + B u + f`, `J v = 0` with the
/// controller driven by `C (v - v_inf)` and `u = C_k x + u_delta(t)`.
///
/// BDF2 treats `A_S` implicitly and extrapolates `N` and the controller
/// input, `N(v_{n+1}) ~ 2 N(v_n) - N(v_{n-1})`, so each step is one solve
/// with a fixed saddle matrix.
pub fn simulate_closed_loop(
    plant: &NonlinearPlant,
    k: Option<&CentralController>,
    cfg: &SimulationConfig,
) -> Result<SimulationTrace> {
    cfg.validate()?;
    let lin = &plant.linear;
    let (n, m, p) = (lin.n_v(), lin.inputs(), lin.outputs());
    if let Some(k) = k {
        if k.inputs() != p || k.outputs() != m {
            return Err(dim_err(format!(
                "controller is {}x{}, plant needs {m}x{p}",
                k.outputs(),
                k.inputs()
            )));
        }
    }
    let h = cfg.h;
    let steps = cfg.steps();
    let e = &lin.e;
    let a_s = plant.a_s();
    let v_inf = &plant.steady_state;
    let y_inf = &lin.c * v_inf;
    let ctrl = k.map(|k| ControllerState::new(k, h)).transpose()?;
    let nk = ctrl.as_ref().map_or(0, |c| c.a.nrows());

    let mut v = match &cfg.initial {
        Initial::SteadyState => v_inf.clone(),
        Initial::Vector(x) => {
            if x.len() != n {
                return Err(dim_err("initial vector has wrong length"));
            }
            DVector::from_column_slice(x)
        }
    };
    let mut x = DVector::zeros(nk);
    let cap = DIVERGENCE_FACTOR
        * if v_inf.norm() > 0.0 {
            v_inf.norm()
        } else {
            v.norm().max(1.0)
        };
    let jnorm = lin.j.norm();

    let control = |x: &DVector<f64>, t: f64| -> DVector<f64> {
        let mut u = perturbation_input(t, cfg, m);
        if let Some(c) = &ctrl {
            u += &c.c * x;
        }
        u
    };
    let mass = Saddle::new(e, &lin.j)?;
    // index-reduced vector field: v' solves E v' + J^T q = rhs, J v' = 0
    let plant_rhs = |v: &DVector<f64>, u: &DVector<f64>| -> Result<DVector<f64>> {
        let r = &a_s * v + plant.nonlinearity(v) + &lin.b * u + &plant.forcing;
        Ok(mass
            .solve_top(&DMatrix::from_column_slice(n, 1, r.as_slice()))?
            .column(0)
            .clone_owned())
    };
    let ctrl_rhs = |x: &DVector<f64>, v: &DVector<f64>| -> DVector<f64> {
        match &ctrl {
            Some(c) => c.rhs(x, &(&lin.c * v - &y_inf)),
            None => DVector::zeros(0),
        }
    };

    let mut times = Vec::with_capacity(steps + 1);
    let mut ys: Vec<DVector<f64>> = Vec::with_capacity(steps + 1);
    let mut us: Vec<DVector<f64>> = Vec::with_capacity(steps + 1);
    let mut knorms = Vec::with_capacity(steps + 1);
    let mut drift = 0.0f64;
    let mut diverged_at = None;
    let mut record =
        |t: f64, v: &DVector<f64>, x: &DVector<f64>, u: DVector<f64>, drift: &mut f64| {
            times.push(t);
            ys.push(&lin.c * v);
            us.push(u);
            knorms.push(x.norm());
            if jnorm > 0.0 && v.norm() > 0.0 {
                *drift = drift.max((&lin.j * v).norm() / (jnorm * v.norm()));
            }
        };

    record(0.0, &v, &x, control(&x, 0.0), &mut drift);

    // Heun start
    let u0 = control(&x, 0.0);
    let k1v = plant_rhs(&v, &u0)?;
    let k1x = ctrl_rhs(&x, &v);
    let vp = &v + &k1v * h;
    let xp = &x + &k1x * h;
    let k2v = plant_rhs(&vp, &control(&xp, h))?;
    let k2x = ctrl_rhs(&xp, &vp);
    let mut v_prev = v.clone();
    let mut x_prev = x.clone();
    v = &v + (k1v + k2v) * (h / 2.0);
    x = &x + (k1x + k2x) * (h / 2.0);
    record(h, &v, &x, control(&x, h), &mut drift);

    let bdf = Saddle::new(&(e * 1.5 - &a_s * h), &lin.j)?;
    let mut f_prev = plant.nonlinearity(&v_prev);
    for step in 2..=steps {
        let t = step as f64 * h;
        if !v.iter().all(|z| z.is_finite()) || v.norm() > cap {
            diverged_at = Some(t - h);
            break;
        }
        if let Some(c) = &ctrl {
            // controller input extrapolated from the two previous plant states
            let y_ext = (&lin.c * (&v * 2.0 - &v_prev)) - &y_inf;
            let rhs = &x * 2.0 - &x_prev * 0.5 + &c.b * &y_ext * h;
            let x_new = c
                .bdf
                .solve(&rhs)
                .ok_or_else(|| Error::SaddleSingular("controller step matrix".into()))?;
            x_prev = std::mem::replace(&mut x, x_new);
        }
        let u = control(&x, t);
        let f_now = plant.nonlinearity(&v);
        let rhs = e * (&v * 2.0 - &v_prev * 0.5)
            + (&f_now * 2.0 - &f_prev + &lin.b * &u + &plant.forcing) * h;
        let v_new = bdf
            .solve_top(&DMatrix::from_column_slice(n, 1, rhs.as_slice()))?
            .column(0)
            .clone_owned();
        f_prev = f_now;
        v_prev = std::mem::replace(&mut v, v_new);
        record(t, &v, &x, u, &mut drift);
    }
    if diverged_at.is_none() && (!v.iter().all(|z| z.is_finite()) || v.norm() > cap) {
        diverged_at = times.last().copied();
    }

    let rows =
        |list: &[DVector<f64>], cols: usize| DMatrix::from_fn(list.len(), cols, |i, j| list[i][j]);
    Ok(SimulationTrace {
        outputs: rows(&ys, p),
        inputs: rows(&us, m),
        times,
        controller_state_norms: knorms,
        constraint_drift: drift,
        diverged_at,
    })
}

fn mean_variance(y: &DMatrix<f64>, rows: std::ops::Range<usize>) -> f64 {
    let count = rows.len() as f64;
    if count < 2.0 || y.ncols() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..y.ncols() {
        let mean = rows.clone().map(|i| y[(i, j)]).sum::<f64>() / count;
        let var = rows
            .clone()
            .map(|i| (y[(i, j)] - mean).powi(2))
            .sum::<f64>()
            / (count - 1.0);
        total += var;
    }
    total / y.ncols() as f64
}

/// Compares the output variance on `[T/2, 3T/4)` and `[3T/4, T]`.
pub fn stabilization_verdict(trace: &SimulationTrace) -> Result<Verdict> {
    if trace.diverged_at.is_some() {
        return Ok(Verdict {
            stabilized: false,
            var_q3: f64::NAN,
            var_q4: f64::NAN,
            diff: f64::INFINITY,
            rationale: Rationale::Diverged,
        });
    }
    if trace.times.len() < 8 {
        return Err(Error::InvalidArgument(
            "trace needs at least 8 samples".into(),
        ));
    }
    let t_end = *trace.times.last().expect("nonempty");
    let idx = |t: f64| {
        trace
            .times
            .iter()
            .position(|&s| s >= t)
            .unwrap_or(trace.times.len())
    };
    let (i2, i3) = (idx(0.5 * t_end), idx(0.75 * t_end));
    let var_q3 = mean_variance(&trace.outputs, i2..i3);
    let var_q4 = mean_variance(&trace.outputs, i3..trace.times.len());
    let diff = var_q4 - var_q3;
    let rationale = if diff <= 0.0 {
        Rationale::NegativeDiff
    } else if diff < NOISE_FLOOR {
        Rationale::NoiseFloor
    } else {
        Rationale::Growing
    };
    Ok(Verdict {
        stabilized: rationale != Rationale::Growing,
        var_q3,
        var_q4,
        diff,
        rationale,
    })
}

/// Least-squares slope of `log err` against `log h`.
pub fn observed_order(hs: &[f64], errs: &[f64]) -> f64 {
    let n = hs.len() as f64;
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Finite closed-loop eigenvalues of plant and controller in `ker J`
/// coordinates, sorted by real part descending.
pub fn closed_loop_spectrum(csys: &ConstrainedSystem, k: &CentralController) -> Result<Vec<C64>> {
    let g = csys.compress().sys;
    let ks = k.system()?;
    if ks.inputs() != g.outputs() || ks.outputs() != g.inputs() {
        return Err(dim_err("controller does not match plant channels"));
    }
    if g.order() + ks.order() > 600 {
        return Err(Error::InvalidArgument(
            "closed loop too large for a dense eigensolve".into(),
        ));
    }
    let (e, a) = closed_loop_pencil(&g, &ks);
    pencil_eigenvalues(&e, &a)
}

/// `(E, A)` of the positive feedback loop `u = K y`.
pub fn closed_loop_pencil(
    g: &DescriptorSystem,
    k: &DescriptorSystem,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let top = hstack(&[&g.a, &(&g.b * &k.c)]);
    let bottom = hstack(&[&(&k.b * &g.c), &k.a]);
    (block_diag(&g.e, &k.e), vstack(&[&top, &bottom]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowdae::{gen_toy_nonlinear, QuadraticForm, ToyParams};
    use proptest::prelude::*;

    fn trace_from(f: impl Fn(f64) -> f64, t_end: f64, h: f64) -> SimulationTrace {
        let steps = (t_end / h).round() as usize;
        let times: Vec<f64> = (0..=steps).map(|i| i as f64 * h).collect();
        let outputs = DMatrix::from_fn(times.len(), 1, |i, _| f(times[i]));
        SimulationTrace {
            inputs: DMatrix::zeros(times.len(), 0),
            controller_state_norms: vec![0.0; times.len()],
            outputs,
            times,
            constraint_drift: 0.0,
            diverged_at: None,
        }
    }

    fn decay_plant() -> NonlinearPlant {
        let lin = ConstrainedSystem::new(
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::zeros(0, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        NonlinearPlant {
            linear: lin,
            quad: QuadraticForm {
                n: 1,
                entries: Vec::new(),
            },
            steady_state: DVector::zeros(1),
            pressure: DVector::zeros(0),
            forcing: DVector::zeros(1),
            diffusion: DMatrix::identity(1, 1),
            reynolds_like: 1.0,
        }
    }

    #[test]
    fn perturbation_examples() {
        let cfg = SimulationConfig::default();
        assert!((perturbation_input(0.25, &cfg, 2)[1] - 1e-6).abs() < 1e-20);
        assert_eq!(perturbation_input(1.5, &cfg, 1)[0], 0.0);
        assert!(perturbation_input(0.5, &cfg, 1)[0].abs() < 1e-21);
    }

    #[test]
    fn steady_state_is_a_fixed_point() {
        let plant = gen_toy_nonlinear(&ToyParams::default()).unwrap();
        let cfg = SimulationConfig {
            h: 0.01,
            t_end: 1.0,
            perturb_amp: 0.0,
            ..SimulationConfig::default()
        };
        let tr = simulate_closed_loop(&plant, None, &cfg).unwrap();
        assert_eq!(tr.times.len(), 101);
        let y_inf = &plant.linear.c * &plant.steady_state;
        for i in 0..tr.times.len() {
            for j in 0..y_inf.len() {
                assert!((tr.outputs[(i, j)] - y_inf[j]).abs() < 1e-10);
            }
        }
        assert!(tr.constraint_drift < 1e-8);
    }

    #[test]
    fn bdf2_is_second_order() {
        let plant = decay_plant();
        let err = |h: f64| {
            let cfg = SimulationConfig {
                h,
                t_end: 1.0,
                perturb_amp: 0.0,
                perturb_window: [0.0, 0.0],
                initial: Initial::Vector(vec![1.0]),
            };
            let tr = simulate_closed_loop(&plant, None, &cfg).unwrap();
            (tr.outputs[(tr.times.len() - 1, 0)] - (-1.0f64).exp()).abs()
        };
        let hs = [0.1, 0.05, 0.025, 0.0125];
        let errs: Vec<f64> = hs.iter().map(|&h| err(h)).collect();
        let order = observed_order(&hs, &errs);
        assert!((order - 2.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn verdict_examples() {
        let decaying = trace_from(|t| (-t).exp() * (10.0 * t).sin(), 30.0, 0.01);
        let v = stabilization_verdict(&decaying).unwrap();
        assert!(v.stabilized && v.diff < 0.0);
        let growing = trace_from(|t| (0.1 * t).exp() * (10.0 * t).sin(), 30.0, 0.01);
        let v = stabilization_verdict(&growing).unwrap();
        assert!(!v.stabilized && v.rationale == Rationale::Growing);
        let flat = trace_from(|_| 3.0, 30.0, 0.01);
        let v = stabilization_verdict(&flat).unwrap();
        assert!(v.stabilized && v.diff == 0.0 && v.rationale == Rationale::NegativeDiff);
    }

    #[test]
    fn diverged_trace_is_not_stabilized() {
        let mut tr = trace_from(|t| t, 1.0, 0.1);
        tr.diverged_at = Some(0.5);
        let v = stabilization_verdict(&tr).unwrap();
        assert!(!v.stabilized && v.rationale == Rationale::Diverged);
    }

    #[test]
    fn simulation_is_deterministic() {
        let plant = gen_toy_nonlinear(&ToyParams::default()).unwrap();
        let cfg = SimulationConfig {
            t_end: 2.0,
            ..SimulationConfig::default()
        };
        let a = simulate_closed_loop(&plant, None, &cfg).unwrap();
        let b = simulate_closed_loop(&plant, None, &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn verdict_sign_is_scale_invariant(rate in -0.3f64..0.3, scale in 1e-3f64..1e3) {
            prop_assume!(rate.abs() > 0.01);
            let base = trace_from(|t| (rate * t).exp() * (3.0 * t).sin(), 20.0, 0.05);
            let mut scaled = base.clone();
            scaled.outputs *= scale;
            let a = stabilization_verdict(&base).unwrap();
            let b = stabilization_verdict(&scaled).unwrap();
            prop_assert_eq!(a.diff.signum(), b.diff.signum());
            if a.diff.abs() > NOISE_FLOOR * 1e6 && b.diff.abs() > NOISE_FLOOR * 1e6 {
                prop_assert_eq!(a.stabilized, b.stabilized);
            }
        }
    }
}
