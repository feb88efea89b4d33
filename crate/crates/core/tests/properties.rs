use std::sync::Arc;

use proptest::prelude::*;
use qoip_core::experiments::{energy_error, run_method, zero};
use qoip_core::forms::{assemble_extended_product, assemble_poisson_dg, estimate_eta_star};
use qoip_core::{
    DgVariant, FeFunction, FeSpace, LameCoefficients, LoadFunctional, ManufacturedSolution, Mesh, MethodConfig, Norm,
    PenaltyConfig, Problem, SamplePoint, SmootherChoice, SpaceKind,
};
use qoip_core::experiments::Regularity;
use qoip_core::spaces::Jet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quad(a: &qoip_core::SparseMatrix, s: &[f64]) -> f64 {
    s.iter().zip(a.mul_vec(s)).map(|(x, y)| x * y).sum()
}

#[test]
fn sip_coercivity_bound() {
    let mesh = Arc::new(Mesh::structured_unit_square(4).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for p in 1..=3 {
        let v = FeSpace::new(mesh.clone(), SpaceKind::BrokenP(p)).unwrap();
        let star = estimate_eta_star(&v, 1).unwrap();
        let eta = 4.0 * star;
        let sip = assemble_poisson_dg(&v, &PenaltyConfig::new(eta).unwrap(), DgVariant::Sip).unwrap();
        let ext = assemble_extended_product(&v, eta, 1, None).unwrap();
        let alpha = 1.0 - (star / eta).sqrt();
        for _ in 0..100 {
            let s: Vec<f64> = (0..v.dof_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(quad(&sip, &s) >= alpha * quad(&ext, &s) * (1.0 - 1e-12));
        }
    }
}

/// A continuous piecewise linear displacement vanishing on the boundary,
/// with the flux load `sigma(u)`, is reproduced exactly by the smoothed method.
#[test]
fn elasticity_reproduces_discrete_displacements() {
    let mesh = Arc::new(Mesh::structured_unit_square(4).unwrap());
    let p1 = Arc::new(FeSpace::new(mesh.clone(), SpaceKind::LagrangeP0BC(1)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = FeFunction::new(p1.clone(), (0..p1.dof_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
    let b = FeFunction::new(p1.clone(), (0..p1.dof_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
    let lame = LameCoefficients::new(1.0, 100.0).unwrap();
    let jets = {
        let (a, b, mesh) = (a.clone(), b.clone(), mesh.clone());
        move |sp: &SamplePoint| {
            let l = mesh.barycentric(sp.element, sp.x).map(|v| v.clamp(0.0, 1.0));
            [a.jet(sp.element, l).unwrap()[0], b.jet(sp.element, l).unwrap()[0]]
        }
    };
    let flux = {
        let jets = jets.clone();
        move |sp: &SamplePoint| {
            let u = jets(sp);
            let (g1, g2) = (u[0].grad, u[1].grad);
            let off = lame.mu * (g1[1] + g2[0]);
            let div = g1[0] + g2[1];
            [[2.0 * lame.mu * g1[0] + lame.lambda * div, off], [off, 2.0 * lame.mu * g2[1] + lame.lambda * div]]
        }
    };
    let ms = ManufacturedSolution {
        name: "p1-displacement",
        problem: Problem::Elasticity,
        regularity: Regularity::Kink,
        exact: Arc::new(jets),
        load: LoadFunctional::vector(None::<fn(&SamplePoint) -> [f64; 2]>, Some(flux)),
        needs_aligned_mesh: false,
    };
    let method = MethodConfig::elasticity(lame, 10.0);
    let run = run_method(&ms, &method, mesh).unwrap();
    let e = energy_error(&*ms.exact, &run.solution, Norm::Lame { eta: 10.0, lame }).unwrap();
    assert!(e < 1e-9, "error {e}");
}

#[test]
fn biharmonic_zero_solution_is_reproduced() {
    let mesh = Arc::new(Mesh::structured_unit_square(4).unwrap());
    let run = run_method(&zero(Problem::Biharmonic), &MethodConfig::biharmonic(None), mesh).unwrap();
    assert!(run.solution.coeffs.iter().all(|c| *c == 0.0));
    assert!(run.penalty.eta_star_estimate.is_some() && !run.penalty.below_threshold);
}

#[test]
fn solves_are_deterministic() {
    let mesh = Arc::new(Mesh::structured_unit_square(6).unwrap());
    let ms = qoip_core::experiments::ms_p1();
    let method = MethodConfig::poisson(DgVariant::Nip, 2, 40.0, SmootherChoice::EpTilde);
    let a = run_method(&ms, &method, mesh.clone()).unwrap();
    let b = run_method(&ms, &method, mesh).unwrap();
    assert_eq!(a.solution.coeffs, b.solution.coeffs);
    assert_eq!(a.report, b.report);
}

#[test]
fn below_threshold_is_flagged() {
    let mesh = Arc::new(Mesh::structured_unit_square(2).unwrap());
    let method = MethodConfig::poisson(DgVariant::Sip, 1, 5.0, SmootherChoice::Ep);
    let space = FeSpace::new(mesh, SpaceKind::BrokenP(1)).unwrap();
    let cfg = method.penalty(&space).unwrap();
    assert!(cfg.below_threshold);
    assert!(cfg.eta_star_estimate.unwrap() > 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // errors of interpolated quadratics vanish on any structured mesh
    #[test]
    fn quadratics_are_resolved(n in 1usize..5, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mesh = Arc::new(Mesh::structured_unit_square(n).unwrap());
        let v = Arc::new(FeSpace::new(mesh, SpaceKind::LagrangeP(2)).unwrap());
        let u = move |sp: &SamplePoint| {
            let [x, y] = sp.x;
            [Jet { value: a * x * x + b * x * y, grad: [2.0 * a * x + b * y, b * x], hess: [[2.0 * a, b], [b, 0.0]] }, Jet::default()]
        };
        let ui = v.interpolate(&|sp| u(sp)[0]).unwrap();
        let e = energy_error(&u, &ui, Norm::H2 { eta: 0.0 }).unwrap();
        prop_assert!(e < 1e-10);
    }
}
