//! Browser bindings: build a plant, compute its margin, certify reduced
//! controllers and simulate the closed loop. Results cross the boundary as
//! JSON strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use hinfctl::controller::{central_controller_reduced, reduced_riccati_lift, CentralController};
use hinfctl::flowdae::{
    gen_synthetic_dae, gen_toy_nonlinear, NonlinearPlant, SyntheticParams, ToyParams,
};
use hinfctl::hinfbt::{characteristic_values, reduce, Certificate, Cut};
use hinfctl::margin::{compute_margin, MarginOptions, MarginReport};
use hinfctl::simulate::{
    closed_loop_spectrum, simulate_closed_loop, stabilization_verdict, Rationale, SimulationConfig,
};
use hinfctl::Result;

/// Samples kept per simulated signal.
const PLOT_POINTS: usize = 600;

#[derive(Debug, Clone, Serialize)]
pub struct MarginView {
    pub n_v: usize,
    pub n_p: usize,
    pub gamma: f64,
    pub rho: f64,
    pub sigma: Vec<f64>,
    /// `(gamma, feasible)` for every probe.
    pub probes: Vec<(f64, bool)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateView {
    pub tol: f64,
    pub r: usize,
    pub eps: f64,
    pub apriori_ok: bool,
    pub gamma_gk: Option<f64>,
    /// Largest real part of the closed loop with the full linear plant.
    pub abscissa: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceView {
    pub t: Vec<f64>,
    /// First output channel minus its steady value.
    pub y: Vec<f64>,
    pub stabilized: bool,
    pub rationale: Rationale,
    pub diverged_at: Option<f64>,
}

/// A plant together with its margin and Riccati factors.
pub struct Session {
    plant: NonlinearPlant,
    report: MarginReport,
}

impl Session {
    /// `kind` is `"synthetic"` or `"toy"`.
    pub fn new(kind: &str, seed: u64, unstable: usize) -> Result<Self> {
        let plant = match kind {
            "toy" => gen_toy_nonlinear(&ToyParams {
                seed,
                ..ToyParams::default()
            })?,
            "synthetic" => NonlinearPlant::from_linear(gen_synthetic_dae(&SyntheticParams {
                seed,
                n_unstable: unstable,
                ..SyntheticParams::default()
            })?),
            other => {
                return Err(hinfctl::Error::InvalidArgument(format!(
                    "unknown plant kind {other}"
                )))
            }
        };
        let report = compute_margin(&plant.linear, &MarginOptions::default())?;
        Ok(Self { plant, report })
    }

    pub fn margin(&self) -> MarginView {
        let r = &self.report;
        MarginView {
            n_v: self.plant.linear.n_v(),
            n_p: self.plant.linear.n_p(),
            gamma: r.gamma,
            rho: r.rho,
            sigma: characteristic_values(&r.x_factor, &r.y_factor, &self.plant.linear.e),
            probes: r.probes.iter().map(|p| (p.gamma, p.feasible)).collect(),
        }
    }

    fn controller(&self, tol: f64) -> Result<(CentralController, Certificate)> {
        let (cs, r) = (&self.plant.linear, &self.report);
        let rom = reduce(cs, &r.x_factor, &r.y_factor, r.gamma, Cut::Tol(tol))?;
        let cert = Certificate::apriori(rom.tail(), r.gamma, rom.r);
        let (yh, xh) = reduced_riccati_lift(&rom.w, &rom.t, &cs.e, &r.y_factor, &r.x_factor);
        Ok((central_controller_reduced(&rom, &yh, &xh, r.gamma)?, cert))
    }

    pub fn certify(&self, tol: f64) -> Result<CertificateView> {
        let (k, cert) = self.controller(tol)?;
        let abscissa = closed_loop_spectrum(&self.plant.linear, &k)?[0].re;
        Ok(CertificateView {
            tol,
            r: cert.r,
            eps: cert.eps,
            apriori_ok: cert.apriori_ok,
            gamma_gk: cert.gamma_gk,
            abscissa,
        })
    }

    /// Closed loop with the controller at `tol`, or the open loop when `tol`
    /// is `None`.
    pub fn simulate(&self, tol: Option<f64>, t_end: f64) -> Result<TraceView> {
        let k = tol.map(|t| self.controller(t)).transpose()?.map(|(k, _)| k);
        let cfg = SimulationConfig {
            t_end,
            ..SimulationConfig::default()
        };
        let trace = simulate_closed_loop(&self.plant, k.as_ref(), &cfg)?;
        let verdict = stabilization_verdict(&trace)?;
        let y_inf = (&self.plant.linear.c * &self.plant.steady_state)[0];
        let stride = trace.times.len().div_ceil(PLOT_POINTS).max(1);
        let rows: Vec<usize> = (0..trace.times.len()).step_by(stride).collect();
        Ok(TraceView {
            t: rows.iter().map(|&i| trace.times[i]).collect(),
            y: rows
                .iter()
                .map(|&i| trace.outputs[(i, 0)] - y_inf)
                .collect(),
            stabilized: verdict.stabilized,
            rationale: verdict.rationale,
            diverged_at: trace.diverged_at,
        })
    }
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, seed: u32, unstable: u32) -> std::result::Result<Demo, JsError> {
        Session::new(kind, seed.into(), unstable as usize)
            .map(Demo)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn margin(&self) -> std::result::Result<String, JsError> {
        js(Ok(self.0.margin()))
    }

    pub fn certify(&self, tol: f64) -> std::result::Result<String, JsError> {
        js(self.0.certify(tol))
    }

    /// A nonpositive `tol` simulates the open loop.
    pub fn simulate(&self, tol: f64, t_end: f64) -> std::result::Result<String, JsError> {
        js(self.0.simulate((tol > 0.0).then_some(tol), t_end))
    }
}
