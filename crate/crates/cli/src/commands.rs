use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use hinfctl::flowdae::{gen_synthetic_dae, gen_toy_nonlinear, SyntheticParams, ToyParams};
use hinfctl::hinfbt::Cut;
use hinfctl::linalg::C64;
use hinfctl::lti::{eval_transfer, sweep_grid};
use hinfctl::margin::{compute_margin, MarginOptions, MarginSummary};
use hinfctl::pipeline::{design_at, sweep_cell, synthesize, undesigned_cell, SweepRow};
use hinfctl::riccati::LrOptions;
use hinfctl::simulate::{simulate_closed_loop, stabilization_verdict, Rationale, Verdict};

use crate::config::{GenConfig, MarginConfig, PlantKind, SimConfig, SweepConfig, SynthConfig};
use crate::error::CliError;
use crate::io::{num, write_csv, write_json, Provenance};
use crate::store::{Manifest, Store};

pub const EXIT_NOT_STABILIZED: u8 = 4;
pub const EXIT_DIVERGED: u8 = 5;

pub fn gen(cfg: &GenConfig, out: &Path) -> Result<u8, CliError> {
    let prov = Provenance::new("gen", cfg);
    let store = Store::new(out);
    let manifest = match cfg.kind {
        PlantKind::Synthetic => {
            let d = SyntheticParams::default();
            let params = SyntheticParams {
                n_v: cfg.nv.unwrap_or(d.n_v),
                n_p: cfg.np.unwrap_or(d.n_p),
                m: cfg.m.unwrap_or(d.m),
                p: cfg.p.unwrap_or(d.p),
                n_unstable: cfg.unstable.unwrap_or(d.n_unstable),
                seed: cfg.seed.unwrap_or(d.seed),
            };
            let sys = gen_synthetic_dae(&params)?;
            store.write_system(&sys, &prov)?;
            Manifest {
                kind: cfg.kind,
                n_v: params.n_v,
                n_p: params.n_p,
                m: params.m,
                p: params.p,
                seed: params.seed,
                n_unstable: Some(params.n_unstable),
                reynolds_like: None,
            }
        }
        PlantKind::Toy => {
            let d = ToyParams::default();
            let params = ToyParams {
                n_v: cfg.nv.unwrap_or(d.n_v),
                n_p: cfg.np.unwrap_or(d.n_p),
                m: cfg.m.unwrap_or(d.m),
                p: cfg.p.unwrap_or(d.p),
                reynolds_like: cfg.re.unwrap_or(d.reynolds_like),
                seed: cfg.seed.unwrap_or(d.seed),
            };
            let plant = gen_toy_nonlinear(&params)?;
            store.write_system(&plant.linear, &prov)?;
            store.write_nonlinear(&plant, &prov)?;
            Manifest {
                kind: cfg.kind,
                n_v: params.n_v,
                n_p: params.n_p,
                m: params.m,
                p: params.p,
                seed: params.seed,
                n_unstable: None,
                reynolds_like: Some(params.reynolds_like),
            }
        }
    };
    write_json(&store.path("manifest.json"), &manifest, &prov)?;
    println!(
        "wrote {:?} plant with n_v = {} to {}",
        manifest.kind,
        manifest.n_v,
        out.display()
    );
    Ok(0)
}

fn margin_options(cfg: &MarginConfig) -> MarginOptions {
    MarginOptions {
        gamma_max: cfg.gamma_max,
        rel_gap: cfg.rel_gap,
        safety: cfg.safety,
        solver: LrOptions {
            tol: cfg.riccati_tol,
            ..LrOptions::default()
        },
    }
}

#[derive(Serialize)]
struct MarginFile<'a> {
    #[serde(flatten)]
    summary: &'a MarginSummary,
    options: &'a MarginConfig,
}

pub fn margin(cfg: &MarginConfig, dir: &Path) -> Result<u8, CliError> {
    let store = Store::new(dir);
    let sys = store.system()?;
    let prov = Provenance::new("margin", cfg);
    let report = compute_margin(&sys, &margin_options(cfg))?;
    let summary = report.summary();
    store.write_factors(&report.x_factor, &report.y_factor, &prov)?;
    write_json(
        &store.path("margin.json"),
        &MarginFile {
            summary: &summary,
            options: cfg,
        },
        &prov,
    )?;
    println!(
        "gamma = {} after {} probes (ranks {} / {})",
        num(summary.gamma),
        summary.probes.len(),
        summary.ranks.filter,
        summary.ranks.regulator
    );
    Ok(0)
}

pub fn synth(cfg: &SynthConfig, dir: &Path) -> Result<u8, CliError> {
    let cut = match (cfg.tol, cfg.order) {
        (Some(t), None) => Cut::Tol(t),
        (None, Some(r)) => Cut::Order(r),
        _ => {
            return Err(CliError::Input(
                "give exactly one of --tol and --order".into(),
            ))
        }
    };
    let store = Store::new(dir);
    let sys = store.system()?;
    let (summary, x, y) = store.margin()?;
    let prov = Provenance::new("synth", &(cfg, summary.gamma));
    let syn = synthesize(&sys, &x, &y, summary.gamma, cut)?;
    let rom = &syn.rom;
    for (name, m) in [
        ("A", &rom.a),
        ("B", &rom.b),
        ("C", &rom.c),
        ("W", &rom.w),
        ("T", &rom.t),
    ] {
        crate::io::write_mtx(&store.path(&format!("rom/{name}.mtx")), m, &prov)?;
    }
    write_csv(
        &store.path("rom/sigma.csv"),
        &["k".into(), "sigma".into(), "kept".into()],
        rom.sigma
            .iter()
            .enumerate()
            .map(|(k, s)| vec![(k + 1).to_string(), num(*s), (k < rom.r).to_string()]),
        &prov,
    )?;
    let kdir = store.path("controller");
    store.write_controller(&kdir, &syn.controller, &syn.certificate, &prov)?;
    write_transfer(&kdir.join("transfer.csv"), &syn.controller.system()?, &prov)?;
    write_json(&store.path("certificate.json"), &syn.certificate, &prov)?;
    let c = &syn.certificate;
    println!(
        "order {} eps = {} apriori_ok = {} aposteriori_ok = {:?}",
        rom.r,
        num(c.eps),
        c.apriori_ok,
        c.aposteriori_ok
    );
    Ok(0)
}

/// Frequency response on the default sweep grid, one row per entry.
fn write_transfer(
    path: &Path,
    sys: &hinfctl::lti::DescriptorSystem,
    prov: &Provenance,
) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for w in sweep_grid() {
        let v = eval_transfer(sys, C64::new(0.0, w))?.value;
        for j in 0..v.ncols() {
            for i in 0..v.nrows() {
                let z = v[(i, j)];
                rows.push(vec![
                    num(w),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    num(z.re),
                    num(z.im),
                ]);
            }
        }
    }
    let header = ["omega", "output", "input", "re", "im"].map(String::from);
    write_csv(path, &header, rows, prov)
}

#[derive(Serialize)]
struct VerdictFile<'a> {
    #[serde(flatten)]
    verdict: &'a Verdict,
    diverged_at: Option<f64>,
    constraint_drift: f64,
    controller: Option<String>,
}

pub fn simulate(
    cfg: &SimConfig,
    dir: &Path,
    controller: Option<&Path>,
    out: Option<&Path>,
) -> Result<u8, CliError> {
    let store = Store::new(dir);
    let plant = store.plant()?;
    let kdir: Option<PathBuf> = match (cfg.open_loop, controller) {
        (true, Some(_)) => {
            return Err(CliError::Input(
                "--open-loop conflicts with --controller".into(),
            ))
        }
        (true, None) => None,
        (false, Some(p)) => Some(p.to_path_buf()),
        (false, None) => {
            let p = store.path("controller");
            p.join("controller.json").exists().then_some(p)
        }
    };
    let k = kdir
        .as_deref()
        .map(Store::controller)
        .transpose()?
        .map(|(k, _)| k);
    let prov = Provenance::new("simulate", &(cfg, kdir.is_some()));
    let trace = simulate_closed_loop(&plant, k.as_ref(), &cfg.simulation())?;
    let verdict = stabilization_verdict(&trace)?;
    let out = out.map_or_else(|| store.path("sim"), Path::to_path_buf);
    let (p, m) = (trace.outputs.ncols(), trace.inputs.ncols());
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=p).map(|i| format!("y{i}")))
        .chain((1..=m).map(|i| format!("u{i}")))
        .collect();
    let rows = trace.times.iter().enumerate().map(|(n, t)| {
        std::iter::once(num(*t))
            .chain(trace.outputs.row(n).iter().map(|x| num(*x)))
            .chain(trace.inputs.row(n).iter().map(|x| num(*x)))
            .collect()
    });
    write_csv(&out.join("trace.csv"), &header, rows, &prov)?;
    write_json(
        &out.join("verdict.json"),
        &VerdictFile {
            verdict: &verdict,
            diverged_at: trace.diverged_at,
            constraint_drift: trace.constraint_drift,
            controller: kdir.map(|p| p.display().to_string()),
        },
        &prov,
    )?;
    println!(
        "{:?}: stabilized = {}",
        verdict.rationale, verdict.stabilized
    );
    Ok(match verdict.rationale {
        Rationale::Diverged => EXIT_DIVERGED,
        _ if verdict.stabilized => 0,
        _ => EXIT_NOT_STABILIZED,
    })
}

pub fn sweep(cfg: &SweepConfig, dir: &Path) -> Result<u8, CliError> {
    let store = Store::new(dir);
    let plant = store.plant()?;
    if store.manifest()?.kind != PlantKind::Toy {
        return Err(CliError::Input("sweep needs a toy plant".into()));
    }
    let (summary, _, y) = store.margin()?;
    let gamma = summary.gamma;
    let prov = Provenance::new("sweep", &(cfg, gamma));
    let sim = SimConfig {
        h: cfg.h,
        t_end: cfg.t_end,
        amp: cfg.amp,
        ..SimConfig::default()
    }
    .simulation();
    let opts = LrOptions::default();
    let designs: Vec<_> = cfg
        .ells
        .par_iter()
        .map(
            |&ell| match design_at(&plant, cfg.mode.into(), ell, gamma, &y, &opts) {
                Ok(d) => Ok(Some(d)),
                Err(hinfctl::Error::InvalidArgument(_)) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect::<Result<_, _>>()?;
    let cells: Vec<(usize, f64)> = (0..cfg.ells.len())
        .flat_map(|i| cfg.tols.iter().map(move |&t| (i, t)))
        .collect();
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(i, tol)| match &designs[i] {
            Some(d) => sweep_cell(&plant, d, gamma, tol, &sim),
            None => undesigned_cell(&plant, cfg.ells[i], tol, &sim),
        })
        .collect::<Result<_, _>>()?;
    let header = [
        "ell",
        "tol",
        "r",
        "stabilized",
        "eps",
        "eps_hat",
        "delta_norm",
        "apriori_ok",
        "aposteriori_ok",
        "robcov_ok",
        "gamma_GK",
        "rationale",
    ]
    .map(String::from);
    let opt_num = |x: Option<f64>| x.map_or_else(String::new, num);
    let opt_bool = |x: Option<bool>| x.map_or_else(String::new, |b| b.to_string());
    write_csv(
        &store.path("sweep.csv"),
        &header,
        rows.iter().map(|r| {
            vec![
                r.ell.to_string(),
                num(r.tol),
                r.r.to_string(),
                r.stabilized.to_string(),
                num(r.eps),
                opt_num(r.eps_hat),
                num(r.delta_norm),
                r.apriori_ok.to_string(),
                opt_bool(r.aposteriori_ok),
                r.robcov_ok.to_string(),
                opt_num(r.gamma_gk),
                serde_json::to_value(r.rationale)
                    .expect("enum serializes")
                    .as_str()
                    .unwrap_or("")
                    .to_string(),
            ]
        }),
        &prov,
    )?;
    let certified = rows.iter().filter(|r| r.certified()).count();
    let stabilized = rows.iter().filter(|r| r.stabilized).count();
    let violations = rows
        .iter()
        .filter(|r| r.certified() && !r.stabilized)
        .count();
    println!(
        "{} cells: {stabilized} stabilized, {certified} certified, {violations} certified but not stabilized",
        rows.len()
    );
    Ok(0)
}
