//! End-to-end properties of the synthesis pipeline on the benchmark plants.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hinfctl::controller::{
    central_controller_full, central_controller_reduced, reduced_riccati_lift, CentralController,
    ControllerKind,
};
use hinfctl::coprime::coprime_error;
use hinfctl::flowdae::{
    gen_synthetic_dae, gen_toy_nonlinear, perturb_linearization, ConstrainedSystem, NonlinearPlant,
    PerturbationMode, SyntheticParams, ToyParams,
};
use hinfctl::hinfbt::{reduce, Certificate, Cut};
use hinfctl::lti::{
    build_normalized_plant, hinf_norm, is_stable, lft_closed_loop, DescriptorSystem,
};
use hinfctl::margin::{compute_margin, MarginOptions, MarginReport};
use hinfctl::riccati::LrOptions;
use hinfctl::simulate::{
    closed_loop_spectrum, simulate_closed_loop, stabilization_verdict, SimulationConfig,
};

fn reduced(
    cs: &ConstrainedSystem,
    rep: &MarginReport,
    tol: f64,
) -> (CentralController, Certificate) {
    let rom = reduce(cs, &rep.x_factor, &rep.y_factor, rep.gamma, Cut::Tol(tol)).unwrap();
    let cert = Certificate::apriori(rom.tail(), rep.gamma, rom.r);
    let (yh, xh) = reduced_riccati_lift(&rom.w, &rom.t, &cs.e, &rep.y_factor, &rep.x_factor);
    (
        central_controller_reduced(&rom, &yh, &xh, rep.gamma).unwrap(),
        cert,
    )
}

fn toy(seed: u64) -> NonlinearPlant {
    gen_toy_nonlinear(&ToyParams {
        seed,
        ..ToyParams::default()
    })
    .unwrap()
}

#[test]
fn toy_closed_loop_with_full_controller_is_stable() {
    let plant = toy(3);
    let rep = compute_margin(&plant.linear, &MarginOptions::default()).unwrap();
    let k =
        central_controller_full(&plant.linear, &rep.x_factor, &rep.y_factor, rep.gamma).unwrap();
    let g = plant.linear.compress().sys;
    let normalized = build_normalized_plant(&g.e, &g.a, &g.b, &g.c).unwrap();
    let cl = lft_closed_loop(&normalized, &k.system().unwrap()).unwrap();
    assert!(is_stable(&cl).unwrap().stable);
    assert!(closed_loop_spectrum(&plant.linear, &k).unwrap()[0].re < 0.0);
}

#[test]
fn coprime_error_is_symmetric() {
    let plant = toy(3);
    let rep = compute_margin(&plant.linear, &MarginOptions::default()).unwrap();
    let fam = perturb_linearization(&plant, PerturbationMode::ParameterLike, 8).unwrap();
    let opts = LrOptions::default();
    let y_d = hinfctl::coprime::filter_factor(&fam.system, rep.gamma, &opts).unwrap();
    let ab = coprime_error(
        &plant.linear,
        &fam.system,
        &rep.y_factor,
        Some(&y_d),
        rep.gamma,
        1e-8,
    )
    .unwrap();
    let ba = coprime_error(
        &fam.system,
        &plant.linear,
        &y_d,
        Some(&rep.y_factor),
        rep.gamma,
        1e-8,
    )
    .unwrap();
    assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
}

#[test]
fn linearization_error_shrinks_with_the_perturbation() {
    let plant = toy(3);
    let rep = compute_margin(&plant.linear, &MarginOptions::default()).unwrap();
    let deltas: Vec<f64> = [64, 32, 16, 8, 4]
        .iter()
        .map(|&ell| {
            let fam = perturb_linearization(&plant, PerturbationMode::ParameterLike, ell).unwrap();
            coprime_error(
                &plant.linear,
                &fam.system,
                &rep.y_factor,
                None,
                rep.gamma,
                1e-6,
            )
            .unwrap()
        })
        .collect();
    assert!(deltas.windows(2).all(|w| w[1] < w[0]), "{deltas:?}");
}

fn random_plant(seed: u64, n: usize) -> DescriptorSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let a = g(n, n) / (n as f64).sqrt() - DMatrix::identity(n, n) * 0.7;
    DescriptorSystem::standard(a, g(n, 2), g(2, n)).unwrap()
}

#[test]
fn reduced_controllers_meet_the_performance_bound() {
    let mut checked = 0;
    for seed in 1..=4 {
        let sys = random_plant(seed, 30);
        let cs = ConstrainedSystem::from_descriptor(&sys).unwrap();
        // dense random plants have full-rank Riccati solutions
        let opts = MarginOptions {
            solver: LrOptions {
                max_rank: Some(30),
                ..LrOptions::default()
            },
            ..MarginOptions::default()
        };
        let rep = compute_margin(&cs, &opts).unwrap();
        let plant = build_normalized_plant(&sys.e, &sys.a, &sys.b, &sys.c).unwrap();
        for tol in [1e-1, 1e-2, 1e-3, 1e-4] {
            let (k, cert) = reduced(&cs, &rep, tol);
            let Some(bound) = cert.gamma_gk else { continue };
            let cl = lft_closed_loop(&plant, &k.system().unwrap()).unwrap();
            let norm = hinf_norm(&cl, 1e-8).unwrap();
            assert!(
                norm <= bound + 1e-4,
                "seed {seed} tol {tol}: {norm} > {bound}"
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn seed_seven_toy_needs_the_controller() {
    let plant = toy(7);
    let rep = compute_margin(&plant.linear, &MarginOptions::default()).unwrap();
    let (k, cert) = reduced(&plant.linear, &rep, 1e-3);
    let cfg = SimulationConfig::default();
    let open = stabilization_verdict(&simulate_closed_loop(&plant, None, &cfg).unwrap()).unwrap();
    let closed =
        stabilization_verdict(&simulate_closed_loop(&plant, Some(&k), &cfg).unwrap()).unwrap();
    assert!(!open.stabilized);
    assert!(closed.stabilized, "{cert:?}");
}

#[test]
fn certified_controller_stabilizes_seed_seven() {
    let cs = gen_synthetic_dae(&SyntheticParams::default()).unwrap();
    let rep = compute_margin(&cs, &MarginOptions::default()).unwrap();
    let (k, _) = [1e-3, 1e-4, 1e-5, 1e-6]
        .iter()
        .map(|&tol| reduced(&cs, &rep, tol))
        .find(|(_, cert)| cert.apriori_ok)
        .expect("some threshold is certified");
    assert!(closed_loop_spectrum(&cs, &k).unwrap()[0].re < 0.0);
}

#[test]
fn zero_controller_leaves_the_plant_spectrum() {
    let cs = gen_synthetic_dae(&SyntheticParams {
        n_unstable: 0,
        ..SyntheticParams::default()
    })
    .unwrap();
    let k = CentralController {
        e_k: DMatrix::zeros(0, 0),
        a_k: DMatrix::zeros(0, 0),
        b_k: DMatrix::zeros(0, cs.outputs()),
        c_k: DMatrix::zeros(cs.inputs(), 0),
        j: None,
        order: 0,
        gamma: 2.0,
        kind: ControllerKind::Reduced,
    };
    let got = closed_loop_spectrum(&cs, &k).unwrap();
    let want = is_stable(&cs.compress().sys).unwrap().eigenvalues;
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).norm() < 1e-8, "{g} vs {w}");
    }
}

#[test]
fn spectrum_sign_matches_linear_verdict() {
    let cfg = SimulationConfig::default();
    let (mut agree, mut total) = (0, 0);
    for seed in 1..=5 {
        let cs = gen_synthetic_dae(&SyntheticParams {
            seed,
            ..SyntheticParams::default()
        })
        .unwrap();
        let rep = compute_margin(&cs, &MarginOptions::default()).unwrap();
        let plant = NonlinearPlant::from_linear(cs.clone());
        for tol in [1e-1, 1e-2] {
            let (k, _) = reduced(&cs, &rep, tol);
            let abscissa = closed_loop_spectrum(&cs, &k).unwrap()[0].re;
            if abscissa.abs() <= 1e-3 {
                continue;
            }
            let v = stabilization_verdict(&simulate_closed_loop(&plant, Some(&k), &cfg).unwrap())
                .unwrap();
            total += 1;
            agree += usize::from((abscissa < 0.0) == v.stabilized);
        }
    }
    assert!(
        total >= 5 && agree + total / 10 >= total,
        "{agree} of {total}"
    );
}
