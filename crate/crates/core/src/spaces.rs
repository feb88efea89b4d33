//! Finite element spaces on a [`Mesh`]: DOF maps, local bases and
//! evaluation of finite element functions on elements and faces.
//!
//! Every space exposes its local basis through [`FeSpace::eval_basis`], which
//! fills a [`LocalBasis`] with values, gradients and Hessians at one point
//! given in barycentric coordinates. Vector spaces (Crouzeix-Raviart) have
//! two components; local function `j` lives in component [`FeSpace::component`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::{edge_lagrange_eval, edge_nodes, lagrange_eval_full, quad_rule_edge, LagrangeNodeSet, NodeLocation};
use crate::error::{invalid, Error, Result};
use crate::mesh::{Mesh, Point};

pub type Grad = [f64; 2];
pub type Hess = [[f64; 2]; 2];

/// Kind of finite element space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    /// Discontinuous piecewise polynomials of degree `p`.
    BrokenP(usize),
    /// Continuous piecewise polynomials of degree `p` vanishing on the boundary.
    LagrangeP0BC(usize),
    /// Continuous piecewise polynomials of degree `p` without boundary conditions.
    LagrangeP(usize),
    /// Vector Crouzeix-Raviart functions with zero mean trace on boundary faces.
    CrouzeixRaviartVec,
    /// Hsieh-Clough-Tocher C1 cubics vanishing with their gradient on the boundary.
    Hct,
}

/// Exact values of a scalar field (or one component of a vector field) at a point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Grad,
    pub hess: Hess,
}

/// A point handed to user callbacks. `element` and `centroid` identify the
/// element the point is evaluated from, which matters for fields that are
/// only piecewise smooth.
#[derive(Debug, Clone, Copy)]
pub struct SamplePoint {
    pub x: Point,
    pub element: usize,
    pub centroid: Point,
}

impl SamplePoint {
    pub fn new(mesh: &Mesh, element: usize, x: Point) -> Self {
        SamplePoint { x, element, centroid: mesh.centroid(element) }
    }
}

/// Local basis data at one point; entry `j` belongs to local function `j`.
#[derive(Debug, Clone, Default)]
pub struct LocalBasis {
    pub value: Vec<f64>,
    pub grad: Vec<Grad>,
    pub hess: Vec<Hess>,
}

impl LocalBasis {
    fn reset(&mut self, n: usize) {
        self.value.clear();
        self.value.resize(n, 0.0);
        self.grad.clear();
        self.grad.resize(n, [0.0; 2]);
        self.hess.clear();
        self.hess.resize(n, [[0.0; 2]; 2]);
    }
}

/// Cubic coefficients of the twelve HCT shape functions of one element on
/// its three subtriangles, in scaled monomials of `(x - c) / h`.
#[derive(Debug, Clone)]
struct HctElement {
    center: Point,
    scale: f64,
    // [basis][subtriangle][monomial]
    coeffs: Vec<[[f64; 10]; 3]>,
}

/// A finite element space together with its DOF map.
#[derive(Debug, Clone)]
pub struct FeSpace {
    kind: SpaceKind,
    mesh: Arc<Mesh>,
    dof_count: usize,
    local_count: usize,
    // element-major, `local_count` entries per element; None = constrained to zero
    dofs: Vec<Option<usize>>,
    nodes: Option<LagrangeNodeSet>,
    // first (element, local index) carrying each DOF
    owners: Vec<(usize, usize)>,
    hct: Vec<HctElement>,
}

impl FeSpace {
    pub fn new(mesh: Arc<Mesh>, kind: SpaceKind) -> Result<Self> {
        match kind {
            SpaceKind::BrokenP(p) => Self::broken(mesh, p),
            SpaceKind::LagrangeP0BC(p) => Self::lagrange(mesh, p, true),
            SpaceKind::LagrangeP(p) => Self::lagrange(mesh, p, false),
            SpaceKind::CrouzeixRaviartVec => Ok(Self::crouzeix_raviart(mesh)),
            SpaceKind::Hct => Self::hct(mesh),
        }
    }

    fn finish(
        kind: SpaceKind,
        mesh: Arc<Mesh>,
        dof_count: usize,
        local_count: usize,
        dofs: Vec<Option<usize>>,
        nodes: Option<LagrangeNodeSet>,
        hct: Vec<HctElement>,
    ) -> Self {
        let mut owners = vec![(usize::MAX, 0); dof_count];
        for (i, d) in dofs.iter().enumerate() {
            if let Some(d) = *d {
                if owners[d].0 == usize::MAX {
                    owners[d] = (i / local_count, i % local_count);
                }
            }
        }
        FeSpace { kind, mesh, dof_count, local_count, dofs, nodes, owners, hct }
    }

    fn broken(mesh: Arc<Mesh>, p: usize) -> Result<Self> {
        if p == 0 {
            return invalid("broken spaces need degree p >= 1");
        }
        let nodes = LagrangeNodeSet::new(p);
        let n = nodes.len();
        let total = mesh.num_elements() * n;
        let dofs = (0..total).map(Some).collect();
        Ok(Self::finish(SpaceKind::BrokenP(p), mesh, total, n, dofs, Some(nodes), Vec::new()))
    }

    fn lagrange(mesh: Arc<Mesh>, p: usize, zero_bc: bool) -> Result<Self> {
        if p == 0 {
            return invalid("Lagrange spaces need degree p >= 1");
        }
        let nodes = LagrangeNodeSet::new(p);
        let n = nodes.len();
        let (nv, nf) = (mesh.num_vertices(), mesh.num_faces());
        let interior_per_element = n - 3 * p;
        let num_global = nv + nf * (p - 1) + mesh.num_elements() * interior_per_element;
        // global node -> dof, skipping boundary nodes when required
        let mut node_dof = vec![None; num_global];
        let mut count = 0;
        for (g, slot) in node_dof.iter_mut().enumerate() {
            let on_boundary = if g < nv {
                mesh.is_boundary_vertex(g)
            } else if g < nv + nf * (p - 1) {
                mesh.face((g - nv) / (p - 1)).is_boundary()
            } else {
                false
            };
            if !(zero_bc && on_boundary) {
                *slot = Some(count);
                count += 1;
            }
        }
        let mut dofs = Vec::with_capacity(mesh.num_elements() * n);
        let mut interior = 0;
        for k in 0..mesh.num_elements() {
            let el = mesh.elements()[k];
            let faces = mesh.element_faces(k);
            for j in 0..n {
                let g = match nodes.location(j) {
                    NodeLocation::Vertex(i) => el[i],
                    NodeLocation::Edge { edge, t } => {
                        let f = faces[edge];
                        let s = if mesh.face(f).vertices[0] == el[(edge + 1) % 3] { t } else { p - t };
                        nv + f * (p - 1) + s - 1
                    }
                    NodeLocation::Interior => {
                        interior += 1;
                        nv + nf * (p - 1) + interior - 1
                    }
                };
                dofs.push(node_dof[g]);
            }
        }
        let kind = if zero_bc { SpaceKind::LagrangeP0BC(p) } else { SpaceKind::LagrangeP(p) };
        Ok(Self::finish(kind, mesh, count, n, dofs, Some(nodes), Vec::new()))
    }

    fn crouzeix_raviart(mesh: Arc<Mesh>) -> Self {
        let mut dofs = Vec::with_capacity(6 * mesh.num_elements());
        for k in 0..mesh.num_elements() {
            for f in mesh.element_faces(k) {
                let i = mesh.interior_face_index(f);
                dofs.push(i.map(|i| 2 * i));
                dofs.push(i.map(|i| 2 * i + 1));
            }
        }
        let count = 2 * mesh.interior_faces().len();
        Self::finish(SpaceKind::CrouzeixRaviartVec, mesh, count, 6, dofs, None, Vec::new())
    }

    fn hct(mesh: Arc<Mesh>) -> Result<Self> {
        let nv = mesh.num_vertices();
        let mut vertex_base = vec![None; nv];
        let mut count = 0;
        for (v, base) in vertex_base.iter_mut().enumerate() {
            if !mesh.is_boundary_vertex(v) {
                *base = Some(count);
                count += 3;
            }
        }
        let mut face_dof = vec![None; mesh.num_faces()];
        for &f in mesh.interior_faces() {
            face_dof[f] = Some(count);
            count += 1;
        }
        let mut dofs = Vec::with_capacity(12 * mesh.num_elements());
        let mut hct = Vec::with_capacity(mesh.num_elements());
        for k in 0..mesh.num_elements() {
            for v in mesh.elements()[k] {
                for c in 0..3 {
                    dofs.push(vertex_base[v].map(|b| b + c));
                }
            }
            for f in mesh.element_faces(k) {
                dofs.push(face_dof[f]);
            }
            hct.push(HctElement::build(&mesh, k)?);
        }
        Ok(Self::finish(SpaceKind::Hct, mesh, count, 12, dofs, None, hct))
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn dof_count(&self) -> usize {
        self.dof_count
    }

    /// Number of local basis functions per element.
    pub fn local_count(&self) -> usize {
        self.local_count
    }

    pub fn value_dim(&self) -> usize {
        if self.kind == SpaceKind::CrouzeixRaviartVec {
            2
        } else {
            1
        }
    }

    /// Polynomial degree on each element (or subtriangle for HCT).
    pub fn degree(&self) -> usize {
        match self.kind {
            SpaceKind::BrokenP(p) | SpaceKind::LagrangeP0BC(p) | SpaceKind::LagrangeP(p) => p,
            SpaceKind::CrouzeixRaviartVec => 1,
            SpaceKind::Hct => 3,
        }
    }

    /// True if the basis is only piecewise polynomial on each element, so
    /// quadrature has to use the barycentric split.
    pub fn is_split(&self) -> bool {
        self.kind == SpaceKind::Hct
    }

    /// Global DOFs of the local basis functions of element `k`.
    pub fn local_dofs(&self, k: usize) -> &[Option<usize>] {
        &self.dofs[k * self.local_count..(k + 1) * self.local_count]
    }

    /// Component of local basis function `j` (always 0 for scalar spaces).
    pub fn component(&self, j: usize) -> usize {
        if self.kind == SpaceKind::CrouzeixRaviartVec {
            j % 2
        } else {
            0
        }
    }

    /// Lagrange node set of Lagrange and broken spaces.
    pub fn nodes(&self) -> Option<&LagrangeNodeSet> {
        self.nodes.as_ref()
    }

    /// The first element (smallest index) carrying DOF `d`, with the local index there.
    pub fn dof_owner(&self, d: usize) -> (usize, usize) {
        self.owners[d]
    }

    /// Point associated with DOF `d` for Lagrange-type spaces.
    pub fn dof_point(&self, d: usize) -> Option<Point> {
        let nodes = self.nodes.as_ref()?;
        let (k, j) = self.owners[d];
        Some(self.mesh.point(k, nodes.barycentric(j)))
    }

    /// Local basis of element `k` at barycentric point `lambda`.
    pub fn eval_basis(&self, k: usize, lambda: [f64; 3], out: &mut LocalBasis) {
        out.reset(self.local_count);
        let g = &self.mesh.geometry(k).grad_lambda;
        match self.kind {
            SpaceKind::BrokenP(p) | SpaceKind::LagrangeP0BC(p) | SpaceKind::LagrangeP(p) => {
                let nodes = self.nodes.as_ref().expect("Lagrange nodes");
                for (j, &alpha) in nodes.nodes.iter().enumerate() {
                    let (v, d, h) = lagrange_eval_full(p, alpha, lambda);
                    out.value[j] = v;
                    out.grad[j] = barycentric_grad(g, d);
                    out.hess[j] = barycentric_hess(g, h);
                }
            }
            SpaceKind::CrouzeixRaviartVec => {
                for i in 0..3 {
                    let v = 1.0 - 2.0 * lambda[i];
                    let d = [-2.0 * g[i][0], -2.0 * g[i][1]];
                    for c in 0..2 {
                        out.value[2 * i + c] = v;
                        out.grad[2 * i + c] = d;
                    }
                }
            }
            SpaceKind::Hct => {
                let x = self.mesh.point(k, lambda);
                self.hct[k].eval(subtriangle(lambda), x, out);
            }
        }
    }

    /// Applies the DOF functionals of the space to a scalar field.
    pub fn interpolate(self: &Arc<Self>, u: &dyn Fn(&SamplePoint) -> Jet) -> Result<FeFunction> {
        if self.value_dim() != 1 {
            return invalid("vector space: use interpolate_vector");
        }
        let mesh = &self.mesh;
        let mut coeffs = vec![0.0; self.dof_count];
        for d in 0..self.dof_count {
            let (k, j) = self.owners[d];
            coeffs[d] = match self.kind {
                SpaceKind::Hct => {
                    let el = mesh.elements()[k];
                    if j < 9 {
                        let x = mesh.vertices()[el[j / 3]];
                        let jet = u(&SamplePoint::new(mesh, k, x));
                        match j % 3 {
                            0 => jet.value,
                            c => jet.grad[c - 1],
                        }
                    } else {
                        let face = mesh.face(mesh.element_faces(k)[j - 9]);
                        let jet = u(&SamplePoint::new(mesh, k, face.midpoint));
                        dot(jet.grad, face.normal)
                    }
                }
                _ => {
                    let lambda = self.nodes.as_ref().expect("Lagrange nodes").barycentric(j);
                    u(&SamplePoint::new(mesh, k, mesh.point(k, lambda))).value
                }
            };
        }
        Ok(FeFunction::new(self.clone(), coeffs))
    }

    /// Interpolates a vector field into the Crouzeix-Raviart space by face means.
    pub fn interpolate_vector(self: &Arc<Self>, u: &dyn Fn(&SamplePoint) -> [f64; 2]) -> Result<FeFunction> {
        if self.kind != SpaceKind::CrouzeixRaviartVec {
            return invalid("interpolate_vector needs a Crouzeix-Raviart space");
        }
        let rule = quad_rule_edge(12)?;
        let mut coeffs = vec![0.0; self.dof_count];
        for (i, &f) in self.mesh.interior_faces().iter().enumerate() {
            let face = self.mesh.face(f);
            let k = face.elements.0;
            let a = self.mesh.vertices()[face.vertices[0]];
            let b = self.mesh.vertices()[face.vertices[1]];
            for (t, w) in rule.params() {
                let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                let val = u(&SamplePoint::new(&self.mesh, k, x));
                coeffs[2 * i] += w * val[0];
                coeffs[2 * i + 1] += w * val[1];
            }
        }
        Ok(FeFunction::new(self.clone(), coeffs))
    }
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Physical gradient from derivatives with respect to barycentric coordinates.
pub fn barycentric_grad(g: &[[f64; 2]; 3], d: [f64; 3]) -> Grad {
    [
        d[0] * g[0][0] + d[1] * g[1][0] + d[2] * g[2][0],
        d[0] * g[0][1] + d[1] * g[1][1] + d[2] * g[2][1],
    ]
}

/// Physical Hessian from second barycentric derivatives.
pub fn barycentric_hess(g: &[[f64; 2]; 3], h: [[f64; 3]; 3]) -> Hess {
    let mut out = [[0.0; 2]; 2];
    for i in 0..3 {
        for j in 0..3 {
            if h[i][j] == 0.0 {
                continue;
            }
            for a in 0..2 {
                for b in 0..2 {
                    out[a][b] += h[i][j] * g[i][a] * g[j][b];
                }
            }
        }
    }
    out
}

/// Index of the HCT subtriangle containing `lambda`: the one opposite the
/// vertex with the smallest barycentric coordinate (ties to the lower index).
pub fn subtriangle(lambda: [f64; 3]) -> usize {
    let mut s = 0;
    for i in 1..3 {
        if lambda[i] < lambda[s] {
            s = i;
        }
    }
    s
}

// Scaled cubic monomials 1, X, Y, X^2, XY, Y^2, X^3, X^2Y, XY^2, Y^3.
fn monomials(x: f64, y: f64) -> ([f64; 10], [[f64; 2]; 10], [[[f64; 2]; 2]; 10]) {
    let v = [1.0, x, y, x * x, x * y, y * y, x * x * x, x * x * y, x * y * y, y * y * y];
    let g = [
        [0.0, 0.0],
        [1.0, 0.0],
        [0.0, 1.0],
        [2.0 * x, 0.0],
        [y, x],
        [0.0, 2.0 * y],
        [3.0 * x * x, 0.0],
        [2.0 * x * y, x * x],
        [y * y, 2.0 * x * y],
        [0.0, 3.0 * y * y],
    ];
    let h = [
        [[0.0; 2]; 2],
        [[0.0; 2]; 2],
        [[0.0; 2]; 2],
        [[2.0, 0.0], [0.0, 0.0]],
        [[0.0, 1.0], [1.0, 0.0]],
        [[0.0, 0.0], [0.0, 2.0]],
        [[6.0 * x, 0.0], [0.0, 0.0]],
        [[2.0 * y, 2.0 * x], [2.0 * x, 0.0]],
        [[0.0, 2.0 * y], [2.0 * y, 2.0 * x]],
        [[0.0, 0.0], [0.0, 6.0 * y]],
    ];
    (v, g, h)
}

impl HctElement {
    /// Solves for the twelve shape functions of element `k`: 30 cubic
    /// coefficients per function, fixed by C1 matching across the three
    /// internal edges and the twelve nodal conditions.
    fn build(mesh: &Mesh, k: usize) -> Result<Self> {
        let v = mesh.element_vertices(k);
        let center = mesh.centroid(k);
        let scale = mesh.geometry(k).diameter;
        let local = |p: Point| [(p[0] - center[0]) / scale, (p[1] - center[1]) / scale];
        let vs: [Point; 3] = std::array::from_fn(|i| local(v[i]));

        let mut rows: Vec<[f64; 30]> = Vec::with_capacity(33);
        // internal edge j joins the barycenter (origin) to vertex j and is
        // shared by subtriangles j+1 and j+2
        for j in 0..3 {
            let (sa, sb) = ((j + 1) % 3, (j + 2) % 3);
            let e = vs[j];
            let n = [-e[1], e[0]];
            for tau in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0] {
                let (m, _, _) = monomials(tau * e[0], tau * e[1]);
                let mut row = [0.0; 30];
                for i in 0..10 {
                    row[10 * sa + i] = m[i];
                    row[10 * sb + i] = -m[i];
                }
                rows.push(row);
            }
            for tau in [0.0, 0.5, 1.0] {
                let (_, g, _) = monomials(tau * e[0], tau * e[1]);
                let mut row = [0.0; 30];
                for i in 0..10 {
                    let dn = g[i][0] * n[0] + g[i][1] * n[1];
                    row[10 * sa + i] = dn;
                    row[10 * sb + i] = -dn;
                }
                rows.push(row);
            }
        }
        let constraints = rows.len();
        for i in 0..3 {
            // vertex i lies in subtriangle i+1
            let s = (i + 1) % 3;
            let (m, g, _) = monomials(vs[i][0], vs[i][1]);
            let mut value = [0.0; 30];
            let mut dx = [0.0; 30];
            let mut dy = [0.0; 30];
            for c in 0..10 {
                value[10 * s + c] = m[c];
                dx[10 * s + c] = g[c][0] / scale;
                dy[10 * s + c] = g[c][1] / scale;
            }
            rows.extend([value, dx, dy]);
        }
        for i in 0..3 {
            let face = mesh.face(mesh.element_faces(k)[i]);
            let mid = local(face.midpoint);
            let (_, g, _) = monomials(mid[0], mid[1]);
            let mut row = [0.0; 30];
            for c in 0..10 {
                row[10 * i + c] = (g[c][0] * face.normal[0] + g[c][1] * face.normal[1]) / scale;
            }
            rows.push(row);
        }
        let a = DMatrix::from_fn(rows.len(), 30, |r, c| rows[r][c]);
        let mut b = DMatrix::zeros(rows.len(), 12);
        for j in 0..12 {
            b[(constraints + j, j)] = 1.0;
        }
        let svd = a.svd(true, true);
        let smallest = svd.singular_values.min();
        if smallest < 1e-12 * svd.singular_values.max() {
            return Err(Error::NumericalFailure(format!("HCT system of element {k} is rank deficient")));
        }
        let x = svd.solve(&b, 0.0).map_err(|e| Error::NumericalFailure(e.to_string()))?;
        let coeffs = (0..12)
            .map(|j| std::array::from_fn(|s| std::array::from_fn(|c| x[(10 * s + c, j)])))
            .collect();
        Ok(HctElement { center, scale, coeffs })
    }

    fn eval(&self, s: usize, x: Point, out: &mut LocalBasis) {
        let (m, g, h) = monomials((x[0] - self.center[0]) / self.scale, (x[1] - self.center[1]) / self.scale);
        let (s1, s2) = (1.0 / self.scale, 1.0 / (self.scale * self.scale));
        for (j, c) in self.coeffs.iter().enumerate() {
            let c = &c[s];
            let (mut v, mut gr, mut he) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
            for i in 0..10 {
                v += c[i] * m[i];
                for a in 0..2 {
                    gr[a] += c[i] * g[i][a] * s1;
                    for b in 0..2 {
                        he[a][b] += c[i] * h[i][a][b] * s2;
                    }
                }
            }
            out.value[j] = v;
            out.grad[j] = gr;
            out.hess[j] = he;
        }
    }
}

/// Whether a face functional integrates the jump or the average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceMode {
    Jump,
    Average,
}

/// Barycentric coordinates on element `k` of the point at parameter `t`
/// along face `f` (from `vertices[0]` to `vertices[1]`).
pub fn face_barycentric(mesh: &Mesh, k: usize, f: usize, t: f64) -> [f64; 3] {
    let face = mesh.face(f);
    let mut lambda = [0.0; 3];
    let a = mesh.local_vertex_index(k, face.vertices[0]).expect("face vertex in element");
    let b = mesh.local_vertex_index(k, face.vertices[1]).expect("face vertex in element");
    lambda[a] = 1.0 - t;
    lambda[b] = t;
    lambda
}

/// Coefficient vector of a function in a finite element space.
#[derive(Debug, Clone)]
pub struct FeFunction {
    pub space: Arc<FeSpace>,
    pub coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn new(space: Arc<FeSpace>, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), space.dof_count(), "coefficient vector length");
        FeFunction { space, coeffs }
    }

    pub fn zeros(space: Arc<FeSpace>) -> Self {
        let n = space.dof_count();
        FeFunction { space, coeffs: vec![0.0; n] }
    }

    /// Values, gradients and Hessians of both components at one point.
    pub fn jet(&self, k: usize, lambda: [f64; 3]) -> Result<[Jet; 2]> {
        if k >= self.space.mesh().num_elements() {
            return invalid(format!("element {k} out of range"));
        }
        if lambda.iter().any(|&l| l < -1e-12) || (lambda.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return invalid(format!("point {lambda:?} lies outside element {k}"));
        }
        let mut basis = LocalBasis::default();
        self.space.eval_basis(k, lambda, &mut basis);
        Ok(self.combine(k, &basis))
    }

    /// Combines an already evaluated local basis with the coefficients.
    pub fn combine(&self, k: usize, basis: &LocalBasis) -> [Jet; 2] {
        let mut out = [Jet::default(); 2];
        for (j, d) in self.space.local_dofs(k).iter().enumerate() {
            let Some(d) = *d else { continue };
            let c = self.coeffs[d];
            if c == 0.0 {
                continue;
            }
            let jet = &mut out[self.space.component(j)];
            jet.value += c * basis.value[j];
            for a in 0..2 {
                jet.grad[a] += c * basis.grad[j][a];
                for b in 0..2 {
                    jet.hess[a][b] += c * basis.hess[j][a][b];
                }
            }
        }
        out
    }

    pub fn eval(&self, k: usize, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        points.iter().map(|&l| Ok(self.jet(k, l)?[0].value)).collect()
    }

    pub fn eval_grad(&self, k: usize, points: &[[f64; 3]]) -> Result<Vec<Grad>> {
        points.iter().map(|&l| Ok(self.jet(k, l)?[0].grad)).collect()
    }

    pub fn eval_hessian(&self, k: usize, points: &[[f64; 3]]) -> Result<Vec<Hess>> {
        points.iter().map(|&l| Ok(self.jet(k, l)?[0].hess)).collect()
    }

    /// Traces from `K1` and (for interior faces) `K2` at parameter `t` on face `f`.
    pub fn face_traces(&self, f: usize, t: f64) -> ([Jet; 2], Option<[Jet; 2]>) {
        let mesh = self.space.mesh();
        let face = mesh.face(f);
        let side = |k: usize| {
            let mut basis = LocalBasis::default();
            self.space.eval_basis(k, face_barycentric(mesh, k, f, t), &mut basis);
            self.combine(k, &basis)
        };
        (side(face.elements.0), face.elements.1.map(side))
    }

    /// `int_F q [[u]]` or `int_F q {u}` for component `component`, with `q`
    /// given by its coefficients in the edge Lagrange basis of degree `q.len() - 1`.
    pub fn face_moment_component(&self, f: usize, q: &[f64], mode: FaceMode, component: usize) -> Result<f64> {
        if q.is_empty() {
            return invalid("empty test polynomial");
        }
        let mesh = self.space.mesh();
        if f >= mesh.num_faces() {
            return invalid(format!("face {f} out of range"));
        }
        let degree = q.len() - 1;
        let rule = quad_rule_edge(degree + self.space.degree().max(3))?;
        let enodes = edge_nodes(degree);
        let mut total = 0.0;
        for (t, w) in rule.params() {
            let qv: f64 = q.iter().zip(&enodes).map(|(c, &n)| c * edge_lagrange_eval(degree, n, t).0).sum();
            let (a, b) = self.face_traces(f, t);
            let (va, vb) = (a[component].value, b.map(|b| b[component].value));
            let val = match (vb, mode) {
                (None, _) => va,
                (Some(vb), FaceMode::Jump) => va - vb,
                (Some(vb), FaceMode::Average) => 0.5 * (va + vb),
            };
            total += w * qv * val;
        }
        Ok(total * mesh.face(f).length)
    }

    pub fn face_moment(&self, f: usize, q: &[f64], mode: FaceMode) -> Result<f64> {
        self.face_moment_component(f, q, mode, 0)
    }

    /// Coefficient vector as a dense nalgebra vector.
    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coeffs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::quad_rule_triangle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize) -> Arc<Mesh> {
        Arc::new(Mesh::structured_unit_square(n).unwrap())
    }

    fn space(mesh: &Arc<Mesh>, kind: SpaceKind) -> Arc<FeSpace> {
        Arc::new(FeSpace::new(mesh.clone(), kind).unwrap())
    }

    fn random(space: &Arc<FeSpace>, seed: u64) -> FeFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (0..space.dof_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeFunction::new(space.clone(), c)
    }

    #[test]
    fn dof_counts() {
        let m = square(2);
        // 9 vertices (1 interior), 16 faces (8 interior), 8 elements
        assert_eq!(space(&m, SpaceKind::BrokenP(2)).dof_count(), 8 * 6);
        assert_eq!(space(&m, SpaceKind::LagrangeP0BC(1)).dof_count(), 1);
        assert_eq!(space(&m, SpaceKind::LagrangeP0BC(2)).dof_count(), 1 + 8);
        assert_eq!(space(&m, SpaceKind::LagrangeP0BC(3)).dof_count(), 1 + 16 + 8);
        assert_eq!(space(&m, SpaceKind::LagrangeP(2)).dof_count(), 9 + 16);
        assert_eq!(space(&m, SpaceKind::CrouzeixRaviartVec).dof_count(), 16);
        assert_eq!(space(&m, SpaceKind::Hct).dof_count(), 3 + 8);
        assert_eq!(space(&m, SpaceKind::Hct).value_dim(), 1);
    }

    #[test]
    fn linear_interpolant_has_constant_gradient() {
        let m = square(3);
        let v = space(&m, SpaceKind::LagrangeP(1));
        let u = v.interpolate(&|p| Jet { value: p.x[0], ..Default::default() }).unwrap();
        for k in 0..m.num_elements() {
            for g in u.eval_grad(k, &[[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]]).unwrap() {
                assert!((g[0] - 1.0).abs() < 1e-13 && g[1].abs() < 1e-13);
            }
            assert_eq!(u.eval_hessian(k, &[[0.2, 0.3, 0.5]]).unwrap()[0], [[0.0; 2]; 2]);
        }
        assert!(u.eval(0, &[[-0.1, 0.5, 0.6]]).is_err());
    }

    #[test]
    fn broken_constant_has_zero_gradient() {
        let m = square(2);
        let v = space(&m, SpaceKind::BrokenP(1));
        let u = FeFunction::new(v.clone(), vec![2.5; v.dof_count()]);
        let g = u.eval_grad(3, &[[0.1, 0.2, 0.7]]).unwrap()[0];
        assert!(g[0].abs() < 1e-14 && g[1].abs() < 1e-14);
    }

    #[test]
    fn partition_of_unity() {
        let m = square(2);
        for p in 1..5 {
            let v = space(&m, SpaceKind::BrokenP(p));
            let mut b = LocalBasis::default();
            v.eval_basis(5, [0.3, 0.3, 0.4], &mut b);
            assert!((b.value.iter().sum::<f64>() - 1.0).abs() < 1e-13);
            let g: f64 = b.grad.iter().map(|g| g[0].abs().max(g[1].abs())).fold(0.0, f64::max);
            assert!(g > 0.0);
            let s = b.grad.iter().fold([0.0, 0.0], |a, g| [a[0] + g[0], a[1] + g[1]]);
            assert!(s[0].abs() < 1e-12 && s[1].abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_nodal_values() {
        let m = square(2);
        let v = space(&m, SpaceKind::LagrangeP0BC(2));
        let f = |x: Point| x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]);
        let u = v.interpolate(&|p| Jet { value: f(p.x), ..Default::default() }).unwrap();
        for d in 0..v.dof_count() {
            assert!((u.coeffs[d] - f(v.dof_point(d).unwrap())).abs() < 1e-15);
        }
        let zero = v.interpolate(&|_| Jet::default()).unwrap();
        assert!(zero.coeffs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn indicator_face_moments() {
        // two triangles sharing the diagonal of the unit square
        let m = square(1);
        let v = space(&m, SpaceKind::BrokenP(1));
        let f = m.interior_faces()[0];
        let (k1, _) = m.face(f).elements;
        let mut c = vec![0.0; v.dof_count()];
        for d in v.local_dofs(k1).iter().flatten() {
            c[*d] = 1.0;
        }
        let u = FeFunction::new(v, c);
        let len = m.face(f).length;
        assert!((u.face_moment(f, &[1.0], FaceMode::Jump).unwrap() / len - 1.0).abs() < 1e-14);
        assert!((u.face_moment(f, &[1.0], FaceMode::Average).unwrap() / len - 0.5).abs() < 1e-14);
    }

    #[test]
    fn conforming_functions_have_no_jumps() {
        let m = square(3);
        for p in 1..4 {
            let u = random(&space(&m, SpaceKind::LagrangeP0BC(p)), p as u64);
            for f in 0..m.num_faces() {
                for (t, _) in quad_rule_edge(6).unwrap().params() {
                    let (a, b) = u.face_traces(f, t);
                    match b {
                        Some(b) => assert!((a[0].value - b[0].value).abs() < 1e-12),
                        None => assert!(a[0].value.abs() < 1e-12),
                    }
                }
                let q: Vec<f64> = (0..p).map(|i| i as f64 - 0.5).collect();
                let j = u.face_moment(f, &q, FaceMode::Jump).unwrap();
                if !m.face(f).is_boundary() {
                    assert!(j.abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn crouzeix_raviart_mean_jumps_vanish() {
        let m = square(3);
        let u = random(&space(&m, SpaceKind::CrouzeixRaviartVec), 7);
        for f in 0..m.num_faces() {
            for c in 0..2 {
                assert!(u.face_moment_component(f, &[1.0], FaceMode::Jump, c).unwrap().abs() < 1e-13);
            }
        }
    }

    #[test]
    fn crouzeix_raviart_reproduces_linear_fields() {
        let m = Arc::new(Mesh::structured_unit_square(3).unwrap());
        let v = space(&m, SpaceKind::CrouzeixRaviartVec);
        // face means of a linear field must vanish on the boundary, so use a
        // field that is linear on the interior patch and compare the interior
        // elements only (all their faces are interior)
        let lin = |x: Point| [1.0 + 2.0 * x[0] - x[1], 0.5 * x[0] + 3.0 * x[1]];
        let u = v.interpolate_vector(&|p| lin(p.x)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for k in 0..m.num_elements() {
            if m.element_faces(k).iter().any(|&f| m.face(f).is_boundary()) {
                continue;
            }
            for _ in 0..20 {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                let lambda = if a + b <= 1.0 { [1.0 - a - b, a, b] } else { [a + b - 1.0, 1.0 - b, 1.0 - a] };
                let j = u.jet(k, lambda).unwrap();
                let e = lin(m.point(k, lambda));
                assert!((j[0].value - e[0]).abs() < 1e-13 && (j[1].value - e[1]).abs() < 1e-13);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn hct_nodal_basis() {
        let m = square(2);
        let v = space(&m, SpaceKind::Hct);
        // the only interior vertex is the center (index 4)
        let d = v.local_dofs(0).iter().position(|d| d.is_some()).unwrap();
        let mut c = vec![0.0; v.dof_count()];
        c[v.local_dofs(0)[d].unwrap()] = 1.0;
        let u = FeFunction::new(v.clone(), c);
        assert_eq!(d % 3, 0, "first interior DOF of an element is a vertex value");
        for k in 0..m.num_elements() {
            for i in 0..3 {
                let mut lambda = [0.0; 3];
                lambda[i] = 1.0;
                let j = u.jet(k, lambda).unwrap()[0];
                let vtx = m.elements()[k][i];
                let expected = if vtx == 4 { 1.0 } else { 0.0 };
                assert!((j.value - expected).abs() < 1e-12);
                assert!(j.grad[0].abs() < 1e-12 && j.grad[1].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hct_is_c1() {
        let m = square(3);
        let u = random(&space(&m, SpaceKind::Hct), 11);
        let rule = quad_rule_edge(6).unwrap();
        for f in 0..m.num_faces() {
            for (t, _) in rule.params() {
                let (a, b) = u.face_traces(f, t);
                let b = b.map(|b| b[0]).unwrap_or_default();
                assert!((a[0].value - b.value).abs() < 1e-10);
                assert!((a[0].grad[0] - b.grad[0]).abs() < 1e-10);
                assert!((a[0].grad[1] - b.grad[1]).abs() < 1e-10);
            }
        }
        // internal edges of the split: approach from both subtriangles
        for k in 0..m.num_elements() {
            for j in 0..3 {
                for tau in [0.2, 0.5, 0.8] {
                    let mut on = [(1.0 - tau) / 3.0; 3];
                    on[j] += tau;
                    let eps = 1e-9;
                    let (mut l1, mut l2) = (on, on);
                    l1[(j + 1) % 3] -= eps;
                    l1[(j + 2) % 3] += eps;
                    l2[(j + 1) % 3] += eps;
                    l2[(j + 2) % 3] -= eps;
                    let (a, b) = (u.jet(k, l1).unwrap()[0], u.jet(k, l2).unwrap()[0]);
                    assert_ne!(subtriangle(l1), subtriangle(l2));
                    assert!((a.value - b.value).abs() < 1e-7);
                    assert!((a.grad[0] - b.grad[0]).abs() < 1e-6 && (a.grad[1] - b.grad[1]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn hct_reproduces_cubics_in_the_interior() {
        // a polynomial times the squared boundary-vanishing factor is not
        // cubic, so test exactness on the interior patch of a local cubic
        let m = square(4);
        let v = space(&m, SpaceKind::Hct);
        let f = |x: Point| Jet {
            value: x[0].powi(3) - 2.0 * x[0] * x[1] * x[1] + x[1],
            grad: [3.0 * x[0] * x[0] - 2.0 * x[1] * x[1], -4.0 * x[0] * x[1] + 1.0],
            hess: [[6.0 * x[0], -4.0 * x[1]], [-4.0 * x[1], -4.0 * x[0]]],
        };
        let u = v.interpolate(&|p| f(p.x)).unwrap();
        let rule = quad_rule_triangle(4).unwrap().split_at_barycenter();
        for k in 0..m.num_elements() {
            let el = m.elements()[k];
            if el.iter().any(|&z| m.is_boundary_vertex(z)) {
                continue;
            }
            for &l in &rule.points {
                let j = u.jet(k, l).unwrap()[0];
                let e = f(m.point(k, l));
                assert!((j.value - e.value).abs() < 1e-12);
                assert!((j.hess[0][1] - e.hess[0][1]).abs() < 1e-9);
            }
        }
    }
}
