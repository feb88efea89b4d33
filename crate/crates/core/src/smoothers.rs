//! Smoothing operators mapping nonconforming discrete functions into
//! conforming ones while conserving the face and element moments that the
//! quasi-optimal methods rely on.
//!
//! Every smoother is linear, so it is assembled once as a sparse matrix
//! ([`Smoother`]) acting on coefficient vectors. Applying it yields a
//! [`SmootherOutput`] that can be evaluated pointwise. Ties in the choice of
//! the element used for nodal values ("`K_z`", "`K_F`") always go to the
//! adjacent element of smallest index.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::{
    edge_lagrange_eval, edge_nodes, lagrange_eval, quad_rule_edge, quad_rule_triangle, LagrangeNodeSet,
};
use crate::error::{invalid, Error, Result};
use crate::mesh::{Mesh, Point};
use crate::solver::{SparseMatrix, TripletBuilder};
use crate::spaces::{face_barycentric, FeFunction, FeSpace, Grad, Hess, Jet, LocalBasis, SpaceKind};

/// Largest polynomial degree supported by the bubble smoothers.
pub const MAX_SMOOTHER_DEGREE: usize = 3;

fn solve_dense(m: DMatrix<f64>, rhs: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure(format!("{what}: weighted Gram matrix is not positive definite")))?;
    Ok(chol.solve(&rhs))
}

/// Edge Lagrange basis of degree `p - 1` on a face, weighted Gram matrix
/// `int_F psi_i psi_j Phi_F` (the face bubble restricted to `F` is `mu_0 mu_1`).
fn face_gram(length: f64, p: usize) -> Result<DMatrix<f64>> {
    let q = p - 1;
    let nodes = edge_nodes(q);
    let rule = quad_rule_edge(2 * q + 2)?;
    let mut g = DMatrix::zeros(p, p);
    for (t, w) in rule.params() {
        let psi: Vec<f64> = nodes.iter().map(|&n| edge_lagrange_eval(q, n, t).0).collect();
        let bubble = t * (1.0 - t);
        for i in 0..p {
            for j in 0..p {
                g[(i, j)] += w * length * psi[i] * psi[j] * bubble;
            }
        }
    }
    Ok(g)
}

/// Weighted projection `Q_F v` onto polynomials of degree `p - 1` on face
/// `f`, returned as edge Lagrange coefficients (nodal values). `v` is a
/// function of the face parameter `t` running from `vertices[0]` to `vertices[1]`.
pub fn qf_project(mesh: &Mesh, f: usize, p: usize, v: &dyn Fn(f64) -> f64) -> Result<Vec<f64>> {
    if p == 0 || f >= mesh.num_faces() {
        return invalid(format!("qf_project needs p >= 1 and a valid face (p = {p}, face {f})"));
    }
    let len = mesh.face(f).length;
    let nodes = edge_nodes(p - 1);
    let rule = quad_rule_edge(2 * p + 8)?;
    let mut b = DMatrix::zeros(p, 1);
    for (t, w) in rule.params() {
        let vt = v(t);
        for (i, &n) in nodes.iter().enumerate() {
            b[(i, 0)] += w * len * vt * edge_lagrange_eval(p - 1, n, t).0;
        }
    }
    Ok(solve_dense(face_gram(len, p)?, b, "Q_F")?.column(0).iter().copied().collect())
}

/// Gram matrix `int_K r_i r_j Phi_K` for the degree `p - 2` Lagrange basis.
fn element_gram(area: f64, p: usize) -> Result<DMatrix<f64>> {
    let q = p - 2;
    let nodes = LagrangeNodeSet::new(q);
    let rule = quad_rule_triangle(2 * q + 3)?;
    let n = nodes.len();
    let mut m = DMatrix::zeros(n, n);
    for (l, &w) in rule.points.iter().zip(&rule.weights) {
        let r: Vec<f64> = nodes.nodes.iter().map(|&a| lagrange_eval(q, a, *l).0).collect();
        let bubble = l[0] * l[1] * l[2];
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += w * area * r[i] * r[j] * bubble;
            }
        }
    }
    Ok(m)
}

/// Weighted projection `Q_K v` onto polynomials of degree `p - 2` on element
/// `k`, as Lagrange coefficients; empty for `p = 1`. `v` takes barycentric coordinates.
pub fn qk_project(mesh: &Mesh, k: usize, p: usize, v: &dyn Fn([f64; 3]) -> f64) -> Result<Vec<f64>> {
    if p == 0 || k >= mesh.num_elements() {
        return invalid(format!("qk_project needs p >= 1 and a valid element (p = {p}, element {k})"));
    }
    if p == 1 {
        return Ok(Vec::new());
    }
    let area = mesh.geometry(k).area;
    let nodes = LagrangeNodeSet::new(p - 2);
    let rule = quad_rule_triangle(2 * p + 8)?;
    let mut b = DMatrix::zeros(nodes.len(), 1);
    for (l, &w) in rule.points.iter().zip(&rule.weights) {
        let vl = v(*l);
        for (i, &a) in nodes.nodes.iter().enumerate() {
            b[(i, 0)] += w * area * vl * lagrange_eval(p - 2, a, *l).0;
        }
    }
    Ok(solve_dense(element_gram(area, p)?, b, "Q_K")?.column(0).iter().copied().collect())
}

/// Applies the DOF functionals of `to` to the basis of `from`, evaluating
/// each functional on the owning (smallest-index) element of the DOF.
///
/// For Lagrange targets this is nodal interpolation; with a broken source it
/// is the simplified nodal averaging. For HCT targets the functionals are
/// vertex values and gradients and normal derivatives at face midpoints.
pub fn transfer_matrix(from: &FeSpace, to: &FeSpace) -> Result<SparseMatrix> {
    if !Arc::ptr_eq(from.mesh(), to.mesh()) {
        return invalid("transfer between spaces on different meshes");
    }
    if from.value_dim() != 1 || to.value_dim() != 1 {
        return invalid("transfer is defined for scalar spaces");
    }
    let mesh = to.mesh();
    let mut t = TripletBuilder::new(to.dof_count(), from.dof_count());
    let mut basis = LocalBasis::default();
    for d in 0..to.dof_count() {
        let (k, j) = to.dof_owner(d);
        let (lambda, functional): ([f64; 3], Box<dyn Fn(&LocalBasis, usize) -> f64>) = match to.kind() {
            SpaceKind::Hct if j < 9 => {
                let mut l = [0.0; 3];
                l[j / 3] = 1.0;
                let c = j % 3;
                (l, Box::new(move |b: &LocalBasis, i| if c == 0 { b.value[i] } else { b.grad[i][c - 1] }))
            }
            SpaceKind::Hct => {
                let f = mesh.element_faces(k)[j - 9];
                let n = mesh.face(f).normal;
                (face_barycentric(mesh, k, f, 0.5), Box::new(move |b: &LocalBasis, i| dot(b.grad[i], n)))
            }
            SpaceKind::CrouzeixRaviartVec => return invalid("transfer into vector spaces"),
            _ => (to.nodes().expect("nodes").barycentric(j), Box::new(|b: &LocalBasis, i| b.value[i])),
        };
        from.eval_basis(k, lambda, &mut basis);
        for (i, dof) in from.local_dofs(k).iter().enumerate() {
            if let Some(c) = dof {
                let v = functional(&basis, i);
                if v.abs() > 1e-14 {
                    t.push(d, *c, v);
                }
            }
        }
    }
    Ok(t.build())
}

fn dot(a: Grad, b: Grad) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// The bubble smoother `B_p = B_F + B_M (I - B_F)` from broken `P_p` into
/// `LagrangeP0BC(p + 1)`.
pub fn bubble_matrix(input: &FeSpace, output: &FeSpace) -> Result<SparseMatrix> {
    let SpaceKind::BrokenP(p) = input.kind() else {
        return invalid("bubble smoother needs a broken input space");
    };
    if output.kind() != SpaceKind::LagrangeP0BC(p + 1) || !Arc::ptr_eq(input.mesh(), output.mesh()) {
        return invalid("bubble smoother output must be LagrangeP0BC(p + 1) on the same mesh");
    }
    if p > MAX_SMOOTHER_DEGREE {
        return invalid(format!("bubble smoother supports p <= {MAX_SMOOTHER_DEGREE}, got {p}"));
    }
    let mesh = input.mesh();
    let nloc = input.local_count();
    let enodes = edge_nodes(p - 1);
    let erule = quad_rule_edge(2 * p + 2)?;
    let mut basis = LocalBasis::default();

    // C_F maps the broken DOFs of (K1, K2) to the nodal values of Q_F {sigma}
    let mut face_ops: Vec<Option<DMatrix<f64>>> = vec![None; mesh.num_faces()];
    for &f in mesh.interior_faces() {
        let face = mesh.face(f);
        let sides = [face.elements.0, face.elements.1.unwrap()];
        let mut r = DMatrix::zeros(p, 2 * nloc);
        for (t, w) in erule.params() {
            let psi: Vec<f64> = enodes.iter().map(|&n| edge_lagrange_eval(p - 1, n, t).0).collect();
            for (m, &k) in sides.iter().enumerate() {
                input.eval_basis(k, face_barycentric(mesh, k, f, t), &mut basis);
                for i in 0..p {
                    for j in 0..nloc {
                        r[(i, m * nloc + j)] += 0.5 * w * face.length * psi[i] * basis.value[j];
                    }
                }
            }
        }
        face_ops[f] = Some(solve_dense(face_gram(face.length, p)?, r, "Q_F")?);
    }

    let out_nodes = output.nodes().expect("nodes").clone();
    let rnodes = (p >= 2).then(|| LagrangeNodeSet::new(p - 2));
    let trule = quad_rule_triangle(2 * p + 3)?;
    let mut t = TripletBuilder::new(output.dof_count(), input.dof_count());
    for k in 0..mesh.num_elements() {
        let faces = mesh.element_faces(k);
        // local column slots: this element, then the neighbour across each face
        let mut slots = [Some(k), None, None, None];
        for i in 0..3 {
            let face = mesh.face(faces[i]);
            slots[i + 1] = face.elements.1.map(|k2| if k2 == k { face.elements.0 } else { k2 });
        }
        // B_F sigma on K as a row over the 4 * nloc local columns
        let face_part = |lambda: [f64; 3]| {
            let mut row = vec![0.0; 4 * nloc];
            for i in 0..3 {
                let f = faces[i];
                let Some(c) = &face_ops[f] else { continue };
                let face = mesh.face(f);
                let a = mesh.local_vertex_index(k, face.vertices[0]).unwrap();
                let b = mesh.local_vertex_index(k, face.vertices[1]).unwrap();
                let bubble = lambda[a] * lambda[b];
                if bubble == 0.0 {
                    continue;
                }
                let own = if face.elements.0 == k { 0 } else { 1 };
                for (z, &n) in enodes.iter().enumerate() {
                    let mut alpha = [0; 3];
                    alpha[a] = n[0];
                    alpha[b] = n[1];
                    let phi = lagrange_eval(p - 1, alpha, lambda).0 * bubble;
                    if phi == 0.0 {
                        continue;
                    }
                    for m in 0..2 {
                        let slot = if m == own { 0 } else { i + 1 };
                        for j in 0..nloc {
                            row[slot * nloc + j] += phi * c[(z, m * nloc + j)];
                        }
                    }
                }
            }
            row
        };
        // Q_K (sigma - B_F sigma) as rows over the local columns
        let element_op = match &rnodes {
            None => None,
            Some(rn) => {
                let area = mesh.geometry(k).area;
                let mut rhs = DMatrix::zeros(rn.len(), 4 * nloc);
                for (l, &w) in trule.points.iter().zip(&trule.weights) {
                    input.eval_basis(k, *l, &mut basis);
                    let bf = face_part(*l);
                    for (i, &a) in rn.nodes.iter().enumerate() {
                        let r = w * area * lagrange_eval(p - 2, a, *l).0;
                        for j in 0..nloc {
                            rhs[(i, j)] += r * basis.value[j];
                        }
                        for (c, v) in bf.iter().enumerate() {
                            rhs[(i, c)] -= r * v;
                        }
                    }
                }
                Some(solve_dense(element_gram(area, p)?, rhs, "Q_K")?)
            }
        };
        for (j, dof) in output.local_dofs(k).iter().enumerate() {
            let Some(d) = *dof else { continue };
            if output.dof_owner(d) != (k, j) {
                continue;
            }
            let lambda = out_nodes.barycentric(j);
            let mut row = face_part(lambda);
            if let (Some(rn), Some(q)) = (&rnodes, &element_op) {
                let bubble = lambda[0] * lambda[1] * lambda[2];
                for (i, &a) in rn.nodes.iter().enumerate() {
                    let r = lagrange_eval(p - 2, a, lambda).0 * bubble;
                    for c in 0..4 * nloc {
                        row[c] += r * q[(i, c)];
                    }
                }
            }
            for (slot, owner) in slots.iter().enumerate() {
                let Some(e) = owner else { continue };
                for jj in 0..nloc {
                    let v = row[slot * nloc + jj];
                    if v.abs() > 1e-15 {
                        t.push(d, input.local_dofs(*e)[jj].unwrap(), v);
                    }
                }
            }
        }
    }
    Ok(t.build())
}

/// The face bubble for normal derivatives, `c_F zeta_F (prod lambda^{K1} lambda^{K2})^2`
/// on `K1 u K2`, normalized so that `int_F grad . n_F = 1`.
#[derive(Debug, Clone)]
pub struct NormalBubble {
    pub face: usize,
    pub elements: [usize; 2],
    /// Normalization constant `c_F`.
    pub scale: f64,
    midpoint: Point,
    normal: [f64; 2],
    // affine factors l(x) = g . (x - x0)
    factors: [([f64; 2], Point); 4],
}

impl NormalBubble {
    pub fn new(mesh: &Mesh, f: usize) -> Result<Self> {
        if f >= mesh.num_faces() {
            return invalid(format!("face {f} out of range"));
        }
        let face = mesh.face(f);
        let Some(k2) = face.elements.1 else {
            return invalid(format!("face {f} is a boundary face"));
        };
        let k1 = face.elements.0;
        let mut factors = [([0.0; 2], [0.0; 2]); 4];
        let mut n = 0;
        for k in [k1, k2] {
            let g = &mesh.geometry(k).grad_lambda;
            for &z in &face.vertices {
                let i = mesh.local_vertex_index(k, z).unwrap();
                // lambda_i vanishes at the other two vertices
                let other = mesh.vertices()[mesh.elements()[k][(i + 1) % 3]];
                factors[n] = (g[i], other);
                n += 1;
            }
        }
        let mut bubble = NormalBubble {
            face: f,
            elements: [k1, k2],
            scale: 1.0,
            midpoint: face.midpoint,
            normal: face.normal,
            factors,
        };
        // int_F grad(zeta P^2) . n = int_F P^2 since zeta vanishes on F
        let rule = quad_rule_edge(16)?;
        let a = mesh.vertices()[face.vertices[0]];
        let b = mesh.vertices()[face.vertices[1]];
        let mut integral = 0.0;
        for (t, w) in rule.params() {
            let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            integral += w * face.length * dot(bubble.eval(x).grad, face.normal);
        }
        if integral.abs() < 1e-300 {
            return Err(Error::NumericalFailure(format!("normal bubble of face {f} has zero flux")));
        }
        bubble.scale = 1.0 / integral;
        Ok(bubble)
    }

    /// Value, gradient and Hessian at `x`, using the polynomial expression
    /// valid on `K1 u K2`. Callers must only evaluate on those two elements.
    pub fn eval(&self, x: Point) -> Jet {
        let l: [f64; 4] = std::array::from_fn(|i| dot(self.factors[i].0, sub(x, self.factors[i].1)));
        let g: [Grad; 4] = std::array::from_fn(|i| self.factors[i].0);
        let prod_except = |skip: &[usize]| -> f64 {
            (0..4).filter(|i| !skip.contains(i)).map(|i| l[i]).product()
        };
        let p = prod_except(&[]);
        let mut dp = [0.0; 2];
        let mut hp = [[0.0; 2]; 2];
        for i in 0..4 {
            let c = prod_except(&[i]);
            dp[0] += g[i][0] * c;
            dp[1] += g[i][1] * c;
            for j in 0..4 {
                if j != i {
                    let c = prod_except(&[i, j]);
                    for a in 0..2 {
                        for b in 0..2 {
                            hp[a][b] += g[i][a] * g[j][b] * c;
                        }
                    }
                }
            }
        }
        let n = self.normal;
        let zeta = dot(sub(x, self.midpoint), n);
        let s = self.scale;
        let value = s * zeta * p * p;
        let grad = [s * (n[0] * p * p + 2.0 * zeta * p * dp[0]), s * (n[1] * p * p + 2.0 * zeta * p * dp[1])];
        let mut hess: Hess = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                hess[a][b] = s
                    * (2.0 * p * (n[a] * dp[b] + dp[a] * n[b]) + 2.0 * zeta * (dp[a] * dp[b] + p * hp[a][b]));
            }
        }
        Jet { value, grad, hess }
    }
}

fn sub(a: Point, b: Point) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Builds the normal bubble of interior face `f`.
pub fn normal_bubble(mesh: &Mesh, f: usize) -> Result<NormalBubble> {
    NormalBubble::new(mesh, f)
}

/// A linear smoothing operator in matrix form.
#[derive(Debug, Clone)]
pub enum Smoother {
    /// Output in a scalar conforming Lagrange space.
    Lagrange { input: Arc<FeSpace>, output: Arc<FeSpace>, matrix: SparseMatrix },
    /// Componentwise smoothing of a vector space; both components land in `output`.
    Vector { input: Arc<FeSpace>, output: Arc<FeSpace>, matrices: [SparseMatrix; 2] },
    /// HCT part plus normal bubbles on the interior faces (in `interior_faces` order).
    Composite {
        input: Arc<FeSpace>,
        hct: Arc<FeSpace>,
        hct_matrix: SparseMatrix,
        bubbles: Arc<Vec<NormalBubble>>,
        bubble_matrix: SparseMatrix,
    },
}

/// Result of applying a [`Smoother`].
#[derive(Debug, Clone)]
pub enum SmootherOutput {
    Lagrange(FeFunction),
    Vector([FeFunction; 2]),
    Composite { hct: FeFunction, bubbles: Arc<Vec<NormalBubble>>, coeffs: Vec<f64> },
}

impl Smoother {
    pub fn input(&self) -> &Arc<FeSpace> {
        match self {
            Smoother::Lagrange { input, .. } | Smoother::Vector { input, .. } | Smoother::Composite { input, .. } => {
                input
            }
        }
    }

    pub fn apply(&self, sigma: &FeFunction) -> Result<SmootherOutput> {
        if !Arc::ptr_eq(&sigma.space, self.input()) && sigma.space.kind() != self.input().kind() {
            return invalid("smoother applied to a function from another space");
        }
        if sigma.coeffs.len() != self.input().dof_count() {
            return invalid("coefficient vector does not match the smoother input");
        }
        Ok(match self {
            Smoother::Lagrange { output, matrix, .. } => {
                SmootherOutput::Lagrange(FeFunction::new(output.clone(), matrix.mul_vec(&sigma.coeffs)))
            }
            Smoother::Vector { output, matrices, .. } => SmootherOutput::Vector([
                FeFunction::new(output.clone(), matrices[0].mul_vec(&sigma.coeffs)),
                FeFunction::new(output.clone(), matrices[1].mul_vec(&sigma.coeffs)),
            ]),
            Smoother::Composite { hct, hct_matrix, bubbles, bubble_matrix, .. } => SmootherOutput::Composite {
                hct: FeFunction::new(hct.clone(), hct_matrix.mul_vec(&sigma.coeffs)),
                bubbles: bubbles.clone(),
                coeffs: bubble_matrix.mul_vec(&sigma.coeffs),
            },
        })
    }
}

impl SmootherOutput {
    pub fn mesh(&self) -> &Arc<Mesh> {
        match self {
            SmootherOutput::Lagrange(f) => f.space.mesh(),
            SmootherOutput::Vector(f) => f[0].space.mesh(),
            SmootherOutput::Composite { hct, .. } => hct.space.mesh(),
        }
    }

    /// Values, gradients and Hessians of both components on element `k`.
    pub fn jet(&self, k: usize, lambda: [f64; 3]) -> Result<[Jet; 2]> {
        match self {
            SmootherOutput::Lagrange(f) => f.jet(k, lambda),
            SmootherOutput::Vector(f) => Ok([f[0].jet(k, lambda)?[0], f[1].jet(k, lambda)?[0]]),
            SmootherOutput::Composite { hct, bubbles, coeffs } => {
                let mut out = hct.jet(k, lambda)?;
                let mesh = hct.space.mesh();
                let x = mesh.point(k, lambda);
                for f in mesh.element_faces(k) {
                    let Some(i) = mesh.interior_face_index(f) else { continue };
                    if coeffs[i] == 0.0 {
                        continue;
                    }
                    let b = bubbles[i].eval(x);
                    let jet = &mut out[0];
                    jet.value += coeffs[i] * b.value;
                    for a in 0..2 {
                        jet.grad[a] += coeffs[i] * b.grad[a];
                        for c in 0..2 {
                            jet.hess[a][c] += coeffs[i] * b.hess[a][c];
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

fn check_broken(input: &FeSpace, allowed: std::ops::RangeInclusive<usize>, what: &str) -> Result<usize> {
    match input.kind() {
        SpaceKind::BrokenP(p) if allowed.contains(&p) => Ok(p),
        SpaceKind::BrokenP(p) => invalid(format!("{what} supports p in {allowed:?}, got p = {p}")),
        other => invalid(format!("{what} needs a broken P_p input, got {other:?}")),
    }
}

/// `A q + B_p (I - J A)` with averaging degree `q`.
fn averaged_bubble_operator(input: &Arc<FeSpace>, q: usize) -> Result<Smoother> {
    let p = input.degree();
    let mesh = input.mesh().clone();
    let avg_space = FeSpace::new(mesh.clone(), SpaceKind::LagrangeP0BC(q))?;
    let output = Arc::new(FeSpace::new(mesh, SpaceKind::LagrangeP0BC(p + 1))?);
    let a = transfer_matrix(input, &avg_space)?;
    let j = transfer_matrix(&avg_space, input)?;
    let up = transfer_matrix(&avg_space, &output)?;
    let b = bubble_matrix(input, &output)?;
    let matrix = up.matmul(&a).add(1.0, &b.add(1.0, &b.matmul(&j).matmul(&a), -1.0), 1.0);
    Ok(Smoother::Lagrange { input: input.clone(), output, matrix })
}

/// `E_p = A_p + B_p (I - A_p)` for `p` in 1..=3.
pub fn ep_operator(input: &Arc<FeSpace>) -> Result<Smoother> {
    let p = check_broken(input, 1..=MAX_SMOOTHER_DEGREE, "E_p")?;
    averaged_bubble_operator(input, p)
}

/// `E~_p = A_1 + B_p (I - A_1)` for `p` in 2..=3.
pub fn ep_tilde_operator(input: &Arc<FeSpace>) -> Result<Smoother> {
    check_broken(input, 2..=MAX_SMOOTHER_DEGREE, "E~_p (use E_1 for p = 1)")?;
    averaged_bubble_operator(input, 1)
}

/// The bubble smoother alone, `B_p`.
pub fn bubble_operator(input: &Arc<FeSpace>) -> Result<Smoother> {
    let p = check_broken(input, 1..=MAX_SMOOTHER_DEGREE, "B_p")?;
    let output = Arc::new(FeSpace::new(input.mesh().clone(), SpaceKind::LagrangeP0BC(p + 1))?);
    let matrix = bubble_matrix(input, &output)?;
    Ok(Smoother::Lagrange { input: input.clone(), output, matrix })
}

/// Componentwise `E_1` for vector Crouzeix-Raviart functions.
pub fn e1_vector_operator(input: &Arc<FeSpace>) -> Result<Smoother> {
    if input.kind() != SpaceKind::CrouzeixRaviartVec {
        return invalid("E_1 vector smoother needs a Crouzeix-Raviart input");
    }
    let mesh = input.mesh().clone();
    let broken = Arc::new(FeSpace::new(mesh, SpaceKind::BrokenP(1))?);
    let Smoother::Lagrange { output, matrix, .. } = ep_operator(&broken)? else { unreachable!() };
    // CR -> broken P1, one component at a time: psi_m(vertex i) = 1 - 2 delta_mi
    let mut to_broken = [TripletBuilder::new(broken.dof_count(), input.dof_count()), TripletBuilder::new(broken.dof_count(), input.dof_count())];
    for k in 0..input.mesh().num_elements() {
        let bd = broken.local_dofs(k);
        for (j, dof) in input.local_dofs(k).iter().enumerate() {
            let Some(d) = *dof else { continue };
            let (m, c) = (j / 2, j % 2);
            for (i, b) in bd.iter().enumerate() {
                to_broken[c].push(b.unwrap(), d, if i == m { -1.0 } else { 1.0 });
            }
        }
    }
    let [t0, t1] = to_broken;
    let matrices = [matrix.matmul(&t0.build()), matrix.matmul(&t1.build())];
    Ok(Smoother::Vector { input: input.clone(), output, matrices })
}

/// `A_HCT` from quadratic conforming functions into the HCT space.
pub fn hct_averaging_operator(input: &Arc<FeSpace>) -> Result<(Arc<FeSpace>, SparseMatrix)> {
    if input.kind() != SpaceKind::LagrangeP0BC(2) {
        return invalid("HCT averaging needs a LagrangeP0BC(2) input");
    }
    let hct = Arc::new(FeSpace::new(input.mesh().clone(), SpaceKind::Hct)?);
    let m = transfer_matrix(input, &hct)?;
    Ok((hct, m))
}

/// Rows: interior faces; entries: `int_F {grad v} . n_F` for the basis of `space`.
fn mean_normal_derivative_matrix(space: &FeSpace) -> Result<SparseMatrix> {
    let mesh = space.mesh();
    let rule = quad_rule_edge(2 * space.degree() + 2)?;
    let mut t = TripletBuilder::new(mesh.interior_faces().len(), space.dof_count());
    let mut basis = LocalBasis::default();
    for (row, &f) in mesh.interior_faces().iter().enumerate() {
        let face = mesh.face(f);
        let sides = [face.elements.0, face.elements.1.unwrap()];
        for k in sides {
            for (tt, w) in rule.params() {
                space.eval_basis(k, face_barycentric(mesh, k, f, tt), &mut basis);
                for (j, dof) in space.local_dofs(k).iter().enumerate() {
                    if let Some(d) = dof {
                        t.push(row, *d, 0.5 * w * face.length * dot(basis.grad[j], face.normal));
                    }
                }
            }
        }
    }
    Ok(t.build())
}

/// `E_C0 = A_HCT + B_dn (I - A_HCT)` for quadratic conforming functions.
pub fn ec0_operator(input: &Arc<FeSpace>) -> Result<Smoother> {
    let (hct, h) = hct_averaging_operator(input)?;
    let mesh = input.mesh();
    let bubbles: Vec<NormalBubble> =
        mesh.interior_faces().iter().map(|&f| NormalBubble::new(mesh, f)).collect::<Result<_>>()?;
    let n_in = mean_normal_derivative_matrix(input)?;
    let n_hct = mean_normal_derivative_matrix(&hct)?;
    let bubble_matrix = n_in.add(1.0, &n_hct.matmul(&h), -1.0);
    Ok(Smoother::Composite { input: input.clone(), hct, hct_matrix: h, bubbles: Arc::new(bubbles), bubble_matrix })
}

fn apply_once(build: fn(&Arc<FeSpace>) -> Result<Smoother>, sigma: &FeFunction) -> Result<SmootherOutput> {
    build(&sigma.space)?.apply(sigma)
}

/// Simplified nodal averaging of a broken function into `LagrangeP0BC(q)`.
pub fn nodal_averaging(sigma: &FeFunction, q: usize) -> Result<FeFunction> {
    let p = match sigma.space.kind() {
        SpaceKind::BrokenP(p) => p,
        other => return invalid(format!("nodal averaging needs a broken input, got {other:?}")),
    };
    if q == 0 || q > p {
        return invalid(format!("averaging degree {q} must lie in 1..={p}"));
    }
    let target = Arc::new(FeSpace::new(sigma.space.mesh().clone(), SpaceKind::LagrangeP0BC(q))?);
    let a = transfer_matrix(&sigma.space, &target)?;
    Ok(FeFunction::new(target, a.mul_vec(&sigma.coeffs)))
}

pub fn bubble_smoother(sigma: &FeFunction) -> Result<SmootherOutput> {
    apply_once(bubble_operator, sigma)
}

pub fn smoother_ep(sigma: &FeFunction) -> Result<SmootherOutput> {
    apply_once(ep_operator, sigma)
}

pub fn smoother_ep_tilde(sigma: &FeFunction) -> Result<SmootherOutput> {
    apply_once(ep_tilde_operator, sigma)
}

pub fn smoother_e1_vector(sigma: &FeFunction) -> Result<SmootherOutput> {
    apply_once(e1_vector_operator, sigma)
}

pub fn hct_averaging(sigma: &FeFunction) -> Result<FeFunction> {
    let (hct, m) = hct_averaging_operator(&sigma.space)?;
    Ok(FeFunction::new(hct, m.mul_vec(&sigma.coeffs)))
}

pub fn smoother_ec0(sigma: &FeFunction) -> Result<SmootherOutput> {
    apply_once(ec0_operator, sigma)
}

/// Largest mismatch of values (and gradients if `c1`) between the two sides
/// of every interior face, and of the trace on boundary faces, at `samples`
/// points per face. Used to check conformity of smoother outputs.
pub fn trace_mismatch(output: &SmootherOutput, samples: usize, c1: bool) -> Result<f64> {
    let mesh = output.mesh().clone();
    let mut worst: f64 = 0.0;
    for f in 0..mesh.num_faces() {
        let face = mesh.face(f);
        for s in 0..samples {
            let t = (s as f64 + 0.5) / samples as f64;
            let a = output.jet(face.elements.0, face_barycentric(&mesh, face.elements.0, f, t))?;
            let b = match face.elements.1 {
                Some(k2) => output.jet(k2, face_barycentric(&mesh, k2, f, t))?,
                None => [Jet::default(); 2],
            };
            for c in 0..2 {
                worst = worst.max((a[c].value - b[c].value).abs());
                if c1 {
                    worst = worst.max((a[c].grad[0] - b[c].grad[0]).abs());
                    worst = worst.max((a[c].grad[1] - b[c].grad[1]).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Largest violation of the moment conditions a smoother is built to keep,
/// relative to the largest moment of `sigma`:
/// face moments against `P_{p-1}(F)` and element moments against `P_{p-2}(K)`
/// for scalar smoothers, face means per component for the vector smoother,
/// vertex values and mean normal derivatives on interior faces for the
/// composite one.
pub fn moment_residual(sigma: &FeFunction, output: &SmootherOutput) -> Result<f64> {
    let mesh = output.mesh().clone();
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut record = |e: f64, s: f64| {
        diff = diff.max((e - s).abs());
        scale = scale.max(s.abs());
    };
    let erule = quad_rule_edge(16)?;
    match output {
        SmootherOutput::Lagrange(_) | SmootherOutput::Vector(_) => {
            let vector = matches!(output, SmootherOutput::Vector(_));
            let p = if vector { 1 } else { sigma.space.degree() };
            let nodes = edge_nodes(p - 1);
            for &f in mesh.interior_faces() {
                let face = mesh.face(f);
                let k = face.elements.0;
                for i in 0..p {
                    let mut q = vec![0.0; p];
                    q[i] = 1.0;
                    for c in 0..if vector { 2 } else { 1 } {
                        let mut e = 0.0;
                        for (t, w) in erule.params() {
                            let qv = edge_lagrange_eval(p - 1, nodes[i], t).0;
                            e += w * face.length * qv * output.jet(k, face_barycentric(&mesh, k, f, t))?[c].value;
                        }
                        record(e, sigma.face_moment_component(f, &q, crate::spaces::FaceMode::Average, c)?);
                    }
                }
            }
            if !vector && p >= 2 {
                let rn = LagrangeNodeSet::new(p - 2);
                let rule = quad_rule_triangle(2 * p)?;
                for k in 0..mesh.num_elements() {
                    let area = mesh.geometry(k).area;
                    for &a in &rn.nodes {
                        let (mut e, mut s) = (0.0, 0.0);
                        for (l, &w) in rule.points.iter().zip(&rule.weights) {
                            let r = lagrange_eval(p - 2, a, *l).0;
                            e += w * area * r * output.jet(k, *l)?[0].value;
                            s += w * area * r * sigma.jet(k, *l)?[0].value;
                        }
                        record(e, s);
                    }
                }
            }
        }
        SmootherOutput::Composite { .. } => {
            for v in 0..mesh.num_vertices() {
                let k = mesh.vertex_elements(v)[0];
                let mut l = [0.0; 3];
                l[mesh.local_vertex_index(k, v).expect("vertex of its element")] = 1.0;
                record(output.jet(k, l)?[0].value, sigma.jet(k, l)?[0].value);
            }
            for &f in mesh.interior_faces() {
                let face = mesh.face(f);
                let (k1, k2) = (face.elements.0, face.elements.1.expect("interior face"));
                let n = face.normal;
                let (mut e, mut s) = (0.0, 0.0);
                for (t, w) in erule.params() {
                    let ge = output.jet(k1, face_barycentric(&mesh, k1, f, t))?[0].grad;
                    let g1 = sigma.jet(k1, face_barycentric(&mesh, k1, f, t))?[0].grad;
                    let g2 = sigma.jet(k2, face_barycentric(&mesh, k2, f, t))?[0].grad;
                    e += w * face.length * (ge[0] * n[0] + ge[1] * n[1]);
                    s += w * face.length * 0.5 * ((g1[0] + g2[0]) * n[0] + (g1[1] + g2[1]) * n[1]);
                }
                record(e, s);
            }
        }
    }
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Coefficient vector as a dense column, convenient for small dense checks.
pub fn as_dvector(f: &FeFunction) -> DVector<f64> {
    f.to_dvector()
}
