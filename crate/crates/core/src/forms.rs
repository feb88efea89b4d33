//! Assembly of the discrete bilinear forms, the extended scalar products and
//! the smoothed right-hand sides.
//!
//! Face terms follow one convention throughout: on an interior face the
//! jump is `v|K1 - v|K2` and the average is `(v|K1 + v|K2) / 2`, with the
//! normal pointing out of `K1`; on a boundary face both equal the trace.
//! Penalty and consistency terms run over all faces, boundary included.
//! Matrix entry `(i, j)` is `b(Psi_j, Psi_i)`: trial in the column, test in the row.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::basis::{quad_rule_edge, quad_rule_triangle};
use crate::error::{invalid, Error, Result};
use crate::mesh::Mesh;
use crate::smoothers::{e1_vector_operator, ec0_operator, ep_operator, ep_tilde_operator, Smoother};
use crate::solver::{SparseMatrix, TripletBuilder};
use crate::spaces::{face_barycentric, FeSpace, LocalBasis, SamplePoint, SpaceKind};

/// Penalty parameter together with the estimated coercivity threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PenaltyConfig {
    pub eta: f64,
    pub eta_star_estimate: Option<f64>,
    /// Set when `eta <= eta_star_estimate`, i.e. coercivity of the symmetric
    /// forms is not guaranteed.
    pub below_threshold: bool,
}

impl PenaltyConfig {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return invalid(format!("penalty parameter must be positive, got {eta}"));
        }
        Ok(PenaltyConfig { eta, eta_star_estimate: None, below_threshold: false })
    }

    /// Records the threshold estimate and flags (and logs) a too small penalty.
    pub fn with_eta_star(mut self, eta_star: f64) -> Self {
        self.eta_star_estimate = Some(eta_star);
        self.below_threshold = self.eta <= eta_star;
        if self.below_threshold {
            log::warn!("penalty eta = {} does not exceed the estimated threshold {eta_star:.3}", self.eta);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LameCoefficients {
    pub mu: f64,
    pub lambda: f64,
}

impl LameCoefficients {
    pub fn new(mu: f64, lambda: f64) -> Result<Self> {
        if !(mu > 0.0 && lambda >= 0.0 && mu.is_finite() && lambda.is_finite()) {
            return invalid(format!("Lame coefficients need mu > 0 and lambda >= 0, got ({mu}, {lambda})"));
        }
        Ok(LameCoefficients { mu, lambda })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DgVariant {
    Sip,
    Nip,
}

pub type SourceFn = Arc<dyn Fn(&SamplePoint) -> [f64; 2] + Send + Sync>;
pub type FluxFn = Arc<dyn Fn(&SamplePoint) -> [[f64; 2]; 2] + Send + Sync>;

/// A load `<f, v> = int g0 . v + int g : grad v`. For scalar problems only
/// the first component of `g0` and the first row of `g` are used. `g` may be
/// discontinuous across lines the mesh resolves; it is evaluated per element.
#[derive(Clone)]
pub struct LoadFunctional {
    pub g0: Option<SourceFn>,
    pub g: Option<FluxFn>,
}

impl std::fmt::Debug for LoadFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadFunctional").field("g0", &self.g0.is_some()).field("g", &self.g.is_some()).finish()
    }
}

impl LoadFunctional {
    pub fn scalar(
        g0: Option<impl Fn(&SamplePoint) -> f64 + Send + Sync + 'static>,
        g: Option<impl Fn(&SamplePoint) -> [f64; 2] + Send + Sync + 'static>,
    ) -> Self {
        LoadFunctional {
            g0: g0.map(|f| Arc::new(move |p: &SamplePoint| [f(p), 0.0]) as SourceFn),
            g: g.map(|f| Arc::new(move |p: &SamplePoint| [f(p), [0.0; 2]]) as FluxFn),
        }
    }

    pub fn vector(
        g0: Option<impl Fn(&SamplePoint) -> [f64; 2] + Send + Sync + 'static>,
        g: Option<impl Fn(&SamplePoint) -> [[f64; 2]; 2] + Send + Sync + 'static>,
    ) -> Self {
        LoadFunctional { g0: g0.map(|f| Arc::new(f) as SourceFn), g: g.map(|f| Arc::new(f) as FluxFn) }
    }

    pub fn has_flux(&self) -> bool {
        self.g.is_some()
    }
}

/// Which operator is applied to test functions before the load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SmootherChoice {
    Ep,
    EpTilde,
    E1Vector,
    Ec0,
    Identity,
}

impl std::str::FromStr for SmootherChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ep" => SmootherChoice::Ep,
            "ep_tilde" => SmootherChoice::EpTilde,
            "e1_vector" => SmootherChoice::E1Vector,
            "ec0" => SmootherChoice::Ec0,
            "identity" => SmootherChoice::Identity,
            other => return invalid(format!("unknown smoother '{other}'")),
        })
    }
}

/// Builds the smoothing operator for `space`; `None` for the identity.
pub fn build_smoother(space: &Arc<FeSpace>, choice: SmootherChoice) -> Result<Option<Smoother>> {
    Ok(match choice {
        SmootherChoice::Ep => Some(ep_operator(space)?),
        SmootherChoice::EpTilde => Some(ep_tilde_operator(space)?),
        SmootherChoice::E1Vector => Some(e1_vector_operator(space)?),
        SmootherChoice::Ec0 => Some(ec0_operator(space)?),
        SmootherChoice::Identity => None,
    })
}

// Trace data of one local basis function at a face quadrature point, with
// jumps and averages already weighted for its side.
#[derive(Debug, Clone, Copy, Default)]
struct FaceDof {
    dof: usize,
    component: usize,
    jump: f64,
    avg_dn: f64,
    jump_dn: f64,
    avg_dnn: f64,
}

/// Calls `kernel(face_length, weight, dofs)` for every quadrature point of
/// every face, where `dofs` lists the traces of all basis functions of the
/// adjacent elements and `weight` already includes the face length.
fn face_loop(space: &FeSpace, degree: usize, mut kernel: impl FnMut(f64, f64, &[FaceDof])) -> Result<()> {
    let mesh = space.mesh();
    let rule = quad_rule_edge(degree)?;
    let mut basis = LocalBasis::default();
    let mut dofs = Vec::with_capacity(2 * space.local_count());
    for f in 0..mesh.num_faces() {
        let face = mesh.face(f);
        let n = face.normal;
        let sides: Vec<(usize, f64, f64)> = match face.elements.1 {
            Some(k2) => vec![(face.elements.0, 1.0, 0.5), (k2, -1.0, 0.5)],
            None => vec![(face.elements.0, 1.0, 1.0)],
        };
        for (t, w) in rule.params() {
            dofs.clear();
            for &(k, sign, avg) in &sides {
                space.eval_basis(k, face_barycentric(mesh, k, f, t), &mut basis);
                for (j, d) in space.local_dofs(k).iter().enumerate() {
                    let Some(d) = *d else { continue };
                    let g = basis.grad[j];
                    let h = basis.hess[j];
                    let dn = g[0] * n[0] + g[1] * n[1];
                    let dnn = n[0] * (h[0][0] * n[0] + h[0][1] * n[1]) + n[1] * (h[1][0] * n[0] + h[1][1] * n[1]);
                    dofs.push(FaceDof {
                        dof: d,
                        component: space.component(j),
                        jump: sign * basis.value[j],
                        avg_dn: avg * dn,
                        jump_dn: sign * dn,
                        avg_dnn: avg * dnn,
                    });
                }
            }
            kernel(face.length, w * face.length, &dofs);
        }
    }
    Ok(())
}

/// Calls `kernel(weight, basis, dofs)` for every element quadrature point.
fn element_loop(
    space: &FeSpace,
    degree: usize,
    mut kernel: impl FnMut(usize, f64, &LocalBasis, &[Option<usize>]),
) -> Result<()> {
    let mesh = space.mesh();
    let mut rule = quad_rule_triangle(degree)?;
    if space.is_split() {
        rule = rule.split_at_barycenter();
    }
    let mut basis = LocalBasis::default();
    for k in 0..mesh.num_elements() {
        let area = mesh.geometry(k).area;
        for (l, &w) in rule.points.iter().zip(&rule.weights) {
            space.eval_basis(k, *l, &mut basis);
            kernel(k, w * area, &basis, space.local_dofs(k));
        }
    }
    Ok(())
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn frobenius(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

fn push_element_block(
    t: &mut TripletBuilder,
    dofs: &[Option<usize>],
    mut entry: impl FnMut(usize, usize) -> f64,
) {
    for (i, di) in dofs.iter().enumerate() {
        let Some(di) = *di else { continue };
        for (j, dj) in dofs.iter().enumerate() {
            let Some(dj) = *dj else { continue };
            let v = entry(i, j);
            if v != 0.0 {
                t.push(di, dj, v);
            }
        }
    }
}

fn push_face_block(t: &mut TripletBuilder, dofs: &[FaceDof], mut entry: impl FnMut(&FaceDof, &FaceDof) -> f64) {
    for a in dofs {
        for b in dofs {
            let v = entry(a, b);
            if v != 0.0 {
                t.push(a.dof, b.dof, v);
            }
        }
    }
}

fn check_scalar(space: &FeSpace, what: &str) -> Result<()> {
    if space.value_dim() != 1 {
        return invalid(format!("{what} needs a scalar space"));
    }
    Ok(())
}

/// Symmetric (SIP) or nonsymmetric (NIP) interior penalty form on broken `P_p`.
pub fn assemble_poisson_dg(space: &FeSpace, cfg: &PenaltyConfig, variant: DgVariant) -> Result<SparseMatrix> {
    if !matches!(space.kind(), SpaceKind::BrokenP(_)) {
        return invalid("DG forms are assembled on broken spaces");
    }
    let p = space.degree();
    let n = space.dof_count();
    let mut t = TripletBuilder::new(n, n);
    element_loop(space, 2 * p, |_, w, b, dofs| {
        push_element_block(&mut t, dofs, |i, j| w * dot(b.grad[i], b.grad[j]));
    })?;
    let eta = cfg.eta;
    let flip = match variant {
        DgVariant::Sip => -1.0,
        DgVariant::Nip => 1.0,
    };
    face_loop(space, 2 * p, |h, w, dofs| {
        // a = test (row), b = trial (column)
        push_face_block(&mut t, dofs, |a, b| {
            w * (-b.avg_dn * a.jump + flip * b.jump * a.avg_dn + eta / h * b.jump * a.jump)
        });
    })?;
    Ok(t.build())
}

/// Gram matrix of the extended scalar products:
/// order 1 without Lame data gives `(.,.)_{1;eta}` (componentwise for vector
/// spaces), order 1 with Lame data gives `a_{lambda;eta}`, order 2 gives `(.,.)_{2;eta}`.
pub fn assemble_extended_product(
    space: &FeSpace,
    eta: f64,
    order: usize,
    lame: Option<LameCoefficients>,
) -> Result<SparseMatrix> {
    let n = space.dof_count();
    let p = space.degree();
    let mut t = TripletBuilder::new(n, n);
    match (order, lame) {
        (1, None) => {
            element_loop(space, 2 * p, |_, w, b, dofs| {
                push_element_block(&mut t, dofs, |i, j| {
                    if space.component(i) == space.component(j) {
                        w * dot(b.grad[i], b.grad[j])
                    } else {
                        0.0
                    }
                });
            })?;
        }
        (1, Some(l)) => {
            if space.value_dim() != 2 {
                return invalid("Lame form needs a vector space");
            }
            element_loop(space, 2 * p, |_, w, b, dofs| {
                push_element_block(&mut t, dofs, |i, j| w * lame_entry(space, b, i, j, l));
            })?;
        }
        (2, None) => {
            if space.kind() != SpaceKind::LagrangeP0BC(2) && space.kind() != SpaceKind::Hct {
                return invalid("order-2 products are defined on LagrangeP0BC(2) (and HCT)");
            }
            element_loop(space, 2 * p, |_, w, b, dofs| {
                push_element_block(&mut t, dofs, |i, j| w * frobenius(b.hess[i], b.hess[j]));
            })?;
        }
        _ => return invalid(format!("unsupported extended product (order {order}, lame {})", lame.is_some())),
    }
    if eta != 0.0 {
        face_loop(space, 2 * p, |h, w, dofs| {
            push_face_block(&mut t, dofs, |a, b| {
                if order == 1 {
                    if a.component == b.component {
                        w * eta / h * a.jump * b.jump
                    } else {
                        0.0
                    }
                } else {
                    w * eta / h * a.jump_dn * b.jump_dn
                }
            });
        })?;
    }
    Ok(t.build())
}

fn lame_entry(space: &FeSpace, b: &LocalBasis, i: usize, j: usize, l: LameCoefficients) -> f64 {
    let (ci, cj) = (space.component(i), space.component(j));
    let (gi, gj) = (b.grad[i], b.grad[j]);
    let same = if ci == cj { dot(gi, gj) } else { 0.0 };
    let eps = 0.5 * (same + gi[cj] * gj[ci]);
    2.0 * l.mu * eps + l.lambda * gi[ci] * gj[cj]
}

/// The penalized Crouzeix-Raviart form: elementwise Lame operator plus a
/// single `eta / h` jump penalty over all faces.
pub fn assemble_elasticity_hl(space: &FeSpace, cfg: &PenaltyConfig, lame: LameCoefficients) -> Result<SparseMatrix> {
    if space.kind() != SpaceKind::CrouzeixRaviartVec {
        return invalid("the penalized Crouzeix-Raviart form needs the Crouzeix-Raviart space");
    }
    assemble_extended_product(space, cfg.eta, 1, Some(lame))
}

/// Divergence-divergence matrix `int div_M s div_M sigma` on a vector space.
pub fn assemble_div_div(space: &FeSpace) -> Result<SparseMatrix> {
    let n = space.dof_count();
    let mut t = TripletBuilder::new(n, n);
    element_loop(space, 2 * space.degree(), |_, w, b, dofs| {
        push_element_block(&mut t, dofs, |i, j| w * b.grad[i][space.component(i)] * b.grad[j][space.component(j)]);
    })?;
    Ok(t.build())
}

/// The C0 interior penalty form on quadratic Lagrange functions.
pub fn assemble_biharmonic_c0(space: &FeSpace, cfg: &PenaltyConfig) -> Result<SparseMatrix> {
    if space.kind() != SpaceKind::LagrangeP0BC(2) {
        return invalid("the C0 interior penalty form needs LagrangeP0BC(2)");
    }
    let n = space.dof_count();
    let mut t = TripletBuilder::new(n, n);
    element_loop(space, 2, |_, w, b, dofs| {
        push_element_block(&mut t, dofs, |i, j| w * frobenius(b.hess[i], b.hess[j]));
    })?;
    let eta = cfg.eta;
    face_loop(space, 4, |h, w, dofs| {
        push_face_block(&mut t, dofs, |a, b| {
            w * (eta / h * b.jump_dn * a.jump_dn - b.avg_dnn * a.jump_dn - b.jump_dn * a.avg_dnn)
        });
    })?;
    Ok(t.build())
}

/// `<f, phi_i>` for every basis function of `space`, component `c` of the
/// load for scalar spaces, both components for vector spaces.
pub fn load_vector(space: &FeSpace, load: &LoadFunctional, component: usize, degree: usize) -> Result<Vec<f64>> {
    let mesh = space.mesh().clone();
    let mut out = vec![0.0; space.dof_count()];
    let mut rule = quad_rule_triangle(degree)?;
    if space.is_split() {
        rule = rule.split_at_barycenter();
    }
    let mut basis = LocalBasis::default();
    for k in 0..mesh.num_elements() {
        let area = mesh.geometry(k).area;
        let centroid = mesh.centroid(k);
        for (l, &w) in rule.points.iter().zip(&rule.weights) {
            let x = mesh.point(k, *l);
            let sp = SamplePoint { x, element: k, centroid };
            let g0 = load.g0.as_ref().map(|f| f(&sp));
            let g = load.g.as_ref().map(|f| f(&sp));
            space.eval_basis(k, *l, &mut basis);
            for (j, d) in space.local_dofs(k).iter().enumerate() {
                let Some(d) = *d else { continue };
                let c = if space.value_dim() == 2 { space.component(j) } else { component };
                let mut v = 0.0;
                if let Some(g0) = g0 {
                    v += g0[c] * basis.value[j];
                }
                if let Some(g) = g {
                    v += dot(g[c], basis.grad[j]);
                }
                out[d] += w * area * v;
            }
        }
    }
    Ok(out)
}

const LOAD_DEGREE_EXTRA: usize = 8;

/// Right-hand side `<f, E Psi_i>` for the basis of `space`, with `E` the
/// chosen smoother. The identity smoother pairs the load with the basis
/// directly, which is undefined for flux loads on discontinuous spaces.
pub fn assemble_rhs(load: &LoadFunctional, space: &Arc<FeSpace>, smoother: SmootherChoice) -> Result<Vec<f64>> {
    match build_smoother(space, smoother)? {
        Some(s) => assemble_rhs_with(load, &s),
        None => {
            let discontinuous = matches!(space.kind(), SpaceKind::BrokenP(_) | SpaceKind::CrouzeixRaviartVec);
            if discontinuous && load.has_flux() {
                return Err(Error::UndefinedPairing(format!(
                    "a load with a flux part cannot be paired with discontinuous {:?} test functions",
                    space.kind()
                )));
            }
            load_vector(space, load, 0, 2 * space.degree() + LOAD_DEGREE_EXTRA)
        }
    }
}

/// As [`assemble_rhs`] with a prebuilt smoother.
pub fn assemble_rhs_with(load: &LoadFunctional, smoother: &Smoother) -> Result<Vec<f64>> {
    match smoother {
        Smoother::Lagrange { output, matrix, .. } => {
            let l = load_vector(output, load, 0, 2 * output.degree() + LOAD_DEGREE_EXTRA)?;
            Ok(matrix.mul_vec_transpose(&l))
        }
        Smoother::Vector { output, matrices, .. } => {
            let mut rhs = vec![0.0; matrices[0].ncols()];
            for (c, m) in matrices.iter().enumerate() {
                let l = load_vector(output, load, c, 2 * output.degree() + LOAD_DEGREE_EXTRA)?;
                rhs.iter_mut().zip(m.mul_vec_transpose(&l)).for_each(|(r, v)| *r += v);
            }
            Ok(rhs)
        }
        Smoother::Composite { hct, hct_matrix, bubbles, bubble_matrix, .. } => {
            let l = load_vector(hct, load, 0, 3 + LOAD_DEGREE_EXTRA)?;
            let mut rhs = hct_matrix.mul_vec_transpose(&l);
            let mesh = hct.mesh();
            let rule = quad_rule_triangle(9 + LOAD_DEGREE_EXTRA)?;
            let mut lb = vec![0.0; bubbles.len()];
            for (i, b) in bubbles.iter().enumerate() {
                for k in b.elements {
                    let area = mesh.geometry(k).area;
                    let centroid = mesh.centroid(k);
                    for (l, &w) in rule.points.iter().zip(&rule.weights) {
                        let x = mesh.point(k, *l);
                        let sp = SamplePoint { x, element: k, centroid };
                        let jet = b.eval(x);
                        let mut v = 0.0;
                        if let Some(g0) = &load.g0 {
                            v += g0(&sp)[0] * jet.value;
                        }
                        if let Some(g) = &load.g {
                            v += dot(g(&sp)[0], jet.grad);
                        }
                        lb[i] += w * area * v;
                    }
                }
            }
            rhs.iter_mut().zip(bubble_matrix.mul_vec_transpose(&lb)).for_each(|(r, v)| *r += v);
            Ok(rhs)
        }
    }
}

/// Largest generalized eigenvalue of `mf x = lambda mk x` on the range of `mk`.
fn restricted_max_eigenvalue(mf: &DMatrix<f64>, mk: &DMatrix<f64>) -> Result<f64> {
    let eig = SymmetricEigen::new(mk.clone());
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-10 * top).collect();
    if keep.is_empty() {
        return Err(Error::NumericalFailure("element Gram matrix vanishes".into()));
    }
    let w = DMatrix::from_fn(mk.nrows(), keep.len(), |r, c| {
        eig.eigenvectors[(r, keep[c])] / eig.eigenvalues[keep[c]].sqrt()
    });
    let reduced = w.transpose() * mf * &w;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    Ok(SymmetricEigen::new(reduced).eigenvalues.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
}

/// Estimate of the coercivity threshold `eta_*`: the maximum over elements
/// `K` and their faces `F` of `3 h_F lambda_max`, where `lambda_max` is the
/// largest eigenvalue of `M_F x = lambda M_K x`. For `order = 1` the trace
/// quantity is the normal flux and `M_K` the gradient Gram matrix; for
/// `order = 2` it is the second normal derivative against the Hessian Gram matrix.
pub fn estimate_eta_star(space: &FeSpace, order: usize) -> Result<f64> {
    check_scalar(space, "estimate_eta_star")?;
    let p = space.degree();
    if order == 2 && p < 2 {
        return invalid("order-2 threshold needs at least quadratic functions");
    }
    if order != 1 && order != 2 {
        return invalid(format!("order must be 1 or 2, got {order}"));
    }
    let mesh: &Mesh = space.mesh();
    let n = space.local_count();
    let trule = quad_rule_triangle(2 * p)?;
    let erule = quad_rule_edge(2 * p)?;
    // a local copy of the broken space gives unconstrained local bases
    let local = FeSpace::new(space.mesh().clone(), SpaceKind::BrokenP(p))?;
    let mut basis = LocalBasis::default();
    let mut worst: f64 = 0.0;
    for k in 0..mesh.num_elements() {
        let area = mesh.geometry(k).area;
        let mut mk = DMatrix::zeros(n, n);
        for (l, &w) in trule.points.iter().zip(&trule.weights) {
            local.eval_basis(k, *l, &mut basis);
            for i in 0..n {
                for j in 0..n {
                    mk[(i, j)] += w
                        * area
                        * if order == 1 {
                            dot(basis.grad[i], basis.grad[j])
                        } else {
                            frobenius(basis.hess[i], basis.hess[j])
                        };
                }
            }
        }
        for f in mesh.element_faces(k) {
            let face = mesh.face(f);
            let nn = face.normal;
            let mut mf = DMatrix::zeros(n, n);
            for (t, w) in erule.params() {
                local.eval_basis(k, face_barycentric(mesh, k, f, t), &mut basis);
                let q: Vec<f64> = (0..n)
                    .map(|i| {
                        if order == 1 {
                            dot(basis.grad[i], nn)
                        } else {
                            let h = basis.hess[i];
                            nn[0] * (h[0][0] * nn[0] + h[0][1] * nn[1]) + nn[1] * (h[1][0] * nn[0] + h[1][1] * nn[1])
                        }
                    })
                    .collect();
                for i in 0..n {
                    for j in 0..n {
                        mf[(i, j)] += w * face.length * q[i] * q[j];
                    }
                }
            }
            let lambda = restricted_max_eigenvalue(&mf, &mk)?;
            worst = worst.max(3.0 * face.length * lambda);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve_spd;
    use crate::spaces::{FeFunction, Jet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize) -> Arc<Mesh> {
        Arc::new(Mesh::structured_unit_square(n).unwrap())
    }

    fn space(mesh: &Arc<Mesh>, kind: SpaceKind) -> Arc<FeSpace> {
        Arc::new(FeSpace::new(mesh.clone(), kind).unwrap())
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn form(a: &SparseMatrix, s: &[f64], sigma: &[f64]) -> f64 {
        sigma.iter().zip(a.mul_vec(s)).map(|(x, y)| x * y).sum()
    }

    /// Direct evaluation of the SIP/NIP formula for two broken functions
    /// (dense oracle, independent of the face bookkeeping above).
    fn dg_oracle(s: &FeFunction, sigma: &FeFunction, eta: f64, nip: bool) -> f64 {
        let mesh = s.space.mesh().clone();
        let tr = quad_rule_triangle(8).unwrap();
        let er = quad_rule_edge(8).unwrap();
        let mut total = 0.0;
        for k in 0..mesh.num_elements() {
            let a = mesh.geometry(k).area;
            for (l, &w) in tr.points.iter().zip(&tr.weights) {
                total += w * a * dot(s.jet(k, *l).unwrap()[0].grad, sigma.jet(k, *l).unwrap()[0].grad);
            }
        }
        for f in 0..mesh.num_faces() {
            let face = mesh.face(f);
            for (t, w) in er.params() {
                let (s1, s2) = s.face_traces(f, t);
                let (g1, g2) = sigma.face_traces(f, t);
                let (js, avg_s, jg, avg_g) = match (s2, g2) {
                    (Some(s2), Some(g2)) => (
                        s1[0].value - s2[0].value,
                        0.5 * dot([s1[0].grad[0] + s2[0].grad[0], s1[0].grad[1] + s2[0].grad[1]], face.normal),
                        g1[0].value - g2[0].value,
                        0.5 * dot([g1[0].grad[0] + g2[0].grad[0], g1[0].grad[1] + g2[0].grad[1]], face.normal),
                    ),
                    _ => (s1[0].value, dot(s1[0].grad, face.normal), g1[0].value, dot(g1[0].grad, face.normal)),
                };
                let sign = if nip { 1.0 } else { -1.0 };
                total += w * face.length * (-avg_s * jg + sign * js * avg_g + eta / face.length * js * jg);
            }
        }
        total
    }

    #[test]
    fn sip_symmetric_and_matches_oracle() {
        let m = square(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in 1..=3 {
            let v = space(&m, SpaceKind::BrokenP(p));
            let cfg = PenaltyConfig::new(7.0).unwrap();
            let sip = assemble_poisson_dg(&v, &cfg, DgVariant::Sip).unwrap();
            let nip = assemble_poisson_dg(&v, &cfg, DgVariant::Nip).unwrap();
            assert!(sip.is_symmetric(1e-13));
            for _ in 0..10 {
                let s = FeFunction::new(v.clone(), random_vec(v.dof_count(), &mut rng));
                let g = FeFunction::new(v.clone(), random_vec(v.dof_count(), &mut rng));
                for (a, nipflag) in [(&sip, false), (&nip, true)] {
                    let assembled = form(a, &s.coeffs, &g.coeffs);
                    let oracle = dg_oracle(&s, &g, 7.0, nipflag);
                    assert!((assembled - oracle).abs() <= 1e-11 * oracle.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn nip_identity() {
        let m = square(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in 1..=3 {
            let v = space(&m, SpaceKind::BrokenP(p));
            let cfg = PenaltyConfig::new(3.0).unwrap();
            let nip = assemble_poisson_dg(&v, &cfg, DgVariant::Nip).unwrap();
            let ext = assemble_extended_product(&v, 3.0, 1, None).unwrap();
            for _ in 0..20 {
                let s = random_vec(v.dof_count(), &mut rng);
                let (a, b) = (form(&nip, &s, &s), form(&ext, &s, &s));
                assert!((a - b).abs() <= 1e-12 * b);
            }
        }
    }

    #[test]
    fn galerkin_restriction() {
        let m = square(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in 1..=3 {
            let lag = space(&m, SpaceKind::LagrangeP0BC(p));
            let broken = space(&m, SpaceKind::BrokenP(p));
            let inj = crate::smoothers::transfer_matrix(&lag, &broken).unwrap();
            let cfg = PenaltyConfig::new(5.0).unwrap();
            let sip = assemble_poisson_dg(&broken, &cfg, DgVariant::Sip).unwrap();
            let nip = assemble_poisson_dg(&broken, &cfg, DgVariant::Nip).unwrap();
            let h1 = assemble_extended_product(&lag, 0.0, 1, None).unwrap();
            let s = random_vec(lag.dof_count(), &mut rng);
            let g = random_vec(lag.dof_count(), &mut rng);
            let (bs, bg) = (inj.mul_vec(&s), inj.mul_vec(&g));
            let exact = form(&h1, &s, &g);
            assert!((form(&sip, &bs, &bg) - exact).abs() < 1e-12 * exact.abs().max(1.0));
            assert!((form(&nip, &bs, &bg) - exact).abs() < 1e-12 * exact.abs().max(1.0));
            // conforming functions carry no jump energy
            let ext = assemble_extended_product(&broken, 5.0, 1, None).unwrap();
            assert!((form(&ext, &bs, &bs) - form(&h1, &s, &s)).abs() < 1e-12 * form(&h1, &s, &s));
        }
    }

    #[test]
    fn extended_products_are_spd() {
        let m = square(2);
        let v = space(&m, SpaceKind::BrokenP(2));
        let a = assemble_extended_product(&v, 10.0, 1, None).unwrap().to_dense();
        assert!(a.symmetric_eigenvalues().min() > 0.0);
        let q = space(&m, SpaceKind::LagrangeP0BC(2));
        let b = assemble_extended_product(&q, 10.0, 2, None).unwrap().to_dense();
        assert!(b.symmetric_eigenvalues().min() > 0.0);
        let cr = space(&m, SpaceKind::CrouzeixRaviartVec);
        let c = assemble_extended_product(&cr, 10.0, 1, Some(LameCoefficients::new(1.0, 5.0).unwrap())).unwrap();
        assert!(c.to_dense().symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn elasticity_form() {
        let m = square(3);
        let cr = space(&m, SpaceKind::CrouzeixRaviartVec);
        let cfg = PenaltyConfig::new(4.0).unwrap();
        let a1 = assemble_elasticity_hl(&cr, &cfg, LameCoefficients::new(1.0, 1e3).unwrap()).unwrap();
        let a0 = assemble_elasticity_hl(&cr, &cfg, LameCoefficients::new(1.0, 0.0).unwrap()).unwrap();
        assert!(a1.is_symmetric(1e-13));
        let dd = assemble_div_div(&cr).unwrap();
        let diff = a1.add(1.0, &a0, -1.0).add(1.0, &dd, -1e3);
        assert!(diff.max_abs() <= 1e-12 * a1.max_abs());

        // conforming P1 field: only the volume terms remain
        let p1 = space(&m, SpaceKind::LagrangeP0BC(1));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = FeFunction::new(p1.clone(), random_vec(p1.dof_count(), &mut rng));
        let t = FeFunction::new(p1.clone(), random_vec(p1.dof_count(), &mut rng));
        let u = cr
            .interpolate_vector(&|sp| {
                let l = m.barycentric(sp.element, sp.x);
                [s.jet(sp.element, l).unwrap()[0].value, t.jet(sp.element, l).unwrap()[0].value]
            })
            .unwrap();
        let mut exact = 0.0;
        let rule = quad_rule_triangle(2).unwrap();
        for k in 0..m.num_elements() {
            let a = m.geometry(k).area;
            let (gs, gt) = (s.jet(k, rule.points[0]).unwrap()[0].grad, t.jet(k, rule.points[0]).unwrap()[0].grad);
            let div = gs[0] + gt[1];
            let eps2 = gs[0] * gs[0] + gt[1] * gt[1] + 0.5 * (gs[1] + gt[0]).powi(2);
            exact += a * (2.0 * eps2 + 1e3 * div * div);
        }
        let got = form(&a1, &u.coeffs, &u.coeffs);
        assert!((got - exact).abs() <= 1e-12 * exact);
    }

    #[test]
    fn biharmonic_form() {
        let m = square(3);
        let q = space(&m, SpaceKind::LagrangeP0BC(2));
        let eta_star = estimate_eta_star(&q, 2).unwrap();
        let cfg = PenaltyConfig::new(4.0 * eta_star).unwrap().with_eta_star(eta_star);
        assert!(!cfg.below_threshold);
        let b = assemble_biharmonic_c0(&q, &cfg).unwrap();
        assert!(b.is_symmetric(1e-13));
        assert!(solve_spd(&b, &vec![1.0; q.dof_count()], 1e-10).is_ok());

        // P1 functions: only the penalty survives
        let p1 = space(&m, SpaceKind::LagrangeP0BC(1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1 = FeFunction::new(p1.clone(), random_vec(p1.dof_count(), &mut rng));
        let s = q.interpolate(&|sp| Jet { value: s1.jet(sp.element, m.barycentric(sp.element, sp.x)).unwrap()[0].value, ..Default::default() }).unwrap();
        let mut oracle = 0.0;
        for f in 0..m.num_faces() {
            let face = m.face(f);
            let (a, bb) = s1.face_traces(f, 0.5);
            let jump = match bb {
                Some(bb) => dot([a[0].grad[0] - bb[0].grad[0], a[0].grad[1] - bb[0].grad[1]], face.normal),
                None => dot(a[0].grad, face.normal),
            };
            oracle += cfg.eta / face.length * jump * jump * face.length;
        }
        let got = form(&b, &s.coeffs, &s.coeffs);
        assert!((got - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn eta_star_properties() {
        let mut prev = 0.0;
        for p in 1..=3 {
            let m = square(2);
            let e = estimate_eta_star(&FeSpace::new(m, SpaceKind::BrokenP(p)).unwrap(), 1).unwrap();
            assert!(e.is_finite() && e > 0.0);
            assert!(e >= prev - 1e-12);
            prev = e;
        }
        let values: Vec<f64> = [2, 4, 8]
            .iter()
            .map(|&n| estimate_eta_star(&FeSpace::new(square(n), SpaceKind::BrokenP(2)).unwrap(), 1).unwrap())
            .collect();
        assert!(values.iter().all(|v| (v / values[0] - 1.0).abs() < 0.02));
    }

    #[test]
    fn rhs_invariance_and_pairing() {
        let m = square(4);
        let p1 = space(&m, SpaceKind::LagrangeP0BC(1));
        let broken = space(&m, SpaceKind::BrokenP(1));
        let inj = crate::smoothers::transfer_matrix(&p1, &broken).unwrap();
        let one = LoadFunctional::scalar(Some(|_: &SamplePoint| 1.0), None::<fn(&SamplePoint) -> [f64; 2]>);
        let rhs = assemble_rhs(&one, &broken, SmootherChoice::Ep).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_vec(p1.dof_count(), &mut rng);
        let paired: f64 = rhs.iter().zip(inj.mul_vec(&s)).map(|(a, b)| a * b).sum();
        let direct: f64 = load_vector(&p1, &one, 0, 4).unwrap().iter().zip(&s).map(|(a, b)| a * b).sum();
        assert!((paired - direct).abs() < 1e-12);

        let flux = LoadFunctional::scalar(None::<fn(&SamplePoint) -> f64>, Some(|sp: &SamplePoint| [sp.x[1], 1.0]));
        assert!(matches!(assemble_rhs(&flux, &broken, SmootherChoice::Identity), Err(Error::UndefinedPairing(_))));
        let r = assemble_rhs(&flux, &broken, SmootherChoice::Ep).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
        assert!(assemble_rhs(&flux, &p1, SmootherChoice::Identity).is_ok());
        assert!(PenaltyConfig::new(0.0).is_err());
    }
}
