//! Manufactured solutions, error norms, best approximations and convergence
//! studies.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::basis::{quad_rule_edge, quad_rule_triangle, MAX_TRIANGLE_DEGREE};
use crate::error::{invalid, Error, Result};
use crate::forms::{
    assemble_biharmonic_c0, assemble_elasticity_hl, assemble_extended_product, assemble_poisson_dg, assemble_rhs_with,
    build_smoother, estimate_eta_star, load_vector, DgVariant, LameCoefficients, LoadFunctional, PenaltyConfig,
    SmootherChoice,
};
use crate::mesh::Mesh;
use crate::solver::{solve_general, solve_spd, solve_symmetric, SolveReport, SparseMatrix, DEFAULT_TOLERANCE};
use crate::spaces::{FeFunction, FeSpace, Jet, LocalBasis, SamplePoint, SpaceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Poisson,
    Elasticity,
    Biharmonic,
}

impl std::str::FromStr for Problem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "poisson" => Problem::Poisson,
            "elasticity" => Problem::Elasticity,
            "biharmonic" => Problem::Biharmonic,
            other => return invalid(format!("unknown problem '{other}'")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularity {
    Smooth,
    Kink,
}

pub type ExactFn = Arc<dyn Fn(&SamplePoint) -> [Jet; 2] + Send + Sync>;

/// An exact solution with its load. Scalar solutions use the first jet only.
#[derive(Clone)]
pub struct ManufacturedSolution {
    pub name: &'static str,
    pub problem: Problem,
    pub regularity: Regularity,
    pub exact: ExactFn,
    pub load: LoadFunctional,
    /// The solution is only piecewise smooth across `x = 1/2`.
    pub needs_aligned_mesh: bool,
}

impl std::fmt::Debug for ManufacturedSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManufacturedSolution").field("name", &self.name).field("problem", &self.problem).finish()
    }
}

impl ManufacturedSolution {
    pub fn eval(&self, sp: &SamplePoint) -> [Jet; 2] {
        (self.exact)(sp)
    }

    /// Looks up a catalog entry; `mu` only affects the elasticity load.
    pub fn by_name(name: &str, mu: f64) -> Result<Self> {
        match name {
            "ms-p1" => Ok(ms_p1()),
            "ms-p2" => Ok(ms_p2()),
            "ms-e1" => Ok(ms_e1(mu)),
            "ms-b1" => Ok(ms_b1()),
            "zero-poisson" => Ok(zero(Problem::Poisson)),
            "zero-elasticity" => Ok(zero(Problem::Elasticity)),
            "zero-biharmonic" => Ok(zero(Problem::Biharmonic)),
            other => invalid(format!("unknown manufactured solution '{other}'")),
        }
    }

    /// Rejects meshes that do not resolve the kink of piecewise solutions.
    pub fn check_mesh(&self, mesh: &Mesh) -> Result<()> {
        if !self.needs_aligned_mesh {
            return Ok(());
        }
        for k in 0..mesh.num_elements() {
            let xs = mesh.element_vertices(k).map(|v| v[0] - 0.5);
            let below = xs.iter().any(|&x| x < -1e-12);
            let above = xs.iter().any(|&x| x > 1e-12);
            if below && above {
                return invalid(format!("{} needs a mesh with x = 1/2 on element edges (even n)", self.name));
            }
        }
        Ok(())
    }
}

fn scalar_jet(value: f64, grad: [f64; 2], hess: [[f64; 2]; 2]) -> [Jet; 2] {
    [Jet { value, grad, hess }, Jet::default()]
}

/// `sin(pi x) sin(pi y)` with `-Laplace u = 2 pi^2 u`.
pub fn ms_p1() -> ManufacturedSolution {
    use std::f64::consts::PI;
    let exact = |sp: &SamplePoint| {
        let [x, y] = sp.x;
        let (sx, cx, sy, cy) = ((PI * x).sin(), (PI * x).cos(), (PI * y).sin(), (PI * y).cos());
        let pp = PI * PI;
        scalar_jet(sx * sy, [PI * cx * sy, PI * sx * cy], [[-pp * sx * sy, pp * cx * cy], [pp * cx * cy, -pp * sx * sy]])
    };
    ManufacturedSolution {
        name: "ms-p1",
        problem: Problem::Poisson,
        regularity: Regularity::Smooth,
        exact: Arc::new(exact),
        load: LoadFunctional::scalar(
            Some(move |sp: &SamplePoint| 2.0 * PI * PI * exact(sp)[0].value),
            None::<fn(&SamplePoint) -> [f64; 2]>,
        ),
        needs_aligned_mesh: false,
    }
}

// min(x, 1 - x) y (1 - y), the branch chosen by the element centroid
fn kink(sp: &SamplePoint) -> [Jet; 2] {
    let [x, y] = sp.x;
    let (m, dm) = if sp.centroid[0] < 0.5 { (x, 1.0) } else { (1.0 - x, -1.0) };
    let b = y * (1.0 - y);
    let db = 1.0 - 2.0 * y;
    scalar_jet(m * b, [dm * b, m * db], [[0.0, dm * db], [dm * db, -2.0 * m]])
}

/// The kink solution with load `<f, v> = int grad u . grad v`, which has a
/// line distribution on `x = 1/2` and is not in `L^2`.
pub fn ms_p2() -> ManufacturedSolution {
    ManufacturedSolution {
        name: "ms-p2",
        problem: Problem::Poisson,
        regularity: Regularity::Kink,
        exact: Arc::new(kink),
        load: LoadFunctional::scalar(None::<fn(&SamplePoint) -> f64>, Some(|sp: &SamplePoint| kink(sp)[0].grad)),
        needs_aligned_mesh: true,
    }
}

// x^2 (1 - x)^2 and its derivatives up to order four
fn quartic(x: f64) -> [f64; 5] {
    [
        x * x * (1.0 - x) * (1.0 - x),
        2.0 * x - 6.0 * x * x + 4.0 * x * x * x,
        2.0 - 12.0 * x + 12.0 * x * x,
        -12.0 + 24.0 * x,
        24.0,
    ]
}

/// Divergence-free `curl` of `(x y (1 - x)(1 - y))^2`; the load `-mu Laplace u`
/// does not depend on `lambda`.
pub fn ms_e1(mu: f64) -> ManufacturedSolution {
    let exact = |sp: &SamplePoint| {
        let (a, b) = (quartic(sp.x[0]), quartic(sp.x[1]));
        let u1 = Jet {
            value: a[0] * b[1],
            grad: [a[1] * b[1], a[0] * b[2]],
            hess: [[a[2] * b[1], a[1] * b[2]], [a[1] * b[2], a[0] * b[3]]],
        };
        let u2 = Jet {
            value: -a[1] * b[0],
            grad: [-a[2] * b[0], -a[1] * b[1]],
            hess: [[-a[3] * b[0], -a[2] * b[1]], [-a[2] * b[1], -a[1] * b[2]]],
        };
        [u1, u2]
    };
    let g0 = move |sp: &SamplePoint| {
        let (a, b) = (quartic(sp.x[0]), quartic(sp.x[1]));
        [-mu * (a[2] * b[1] + a[0] * b[3]), mu * (a[3] * b[0] + a[1] * b[2])]
    };
    ManufacturedSolution {
        name: "ms-e1",
        problem: Problem::Elasticity,
        regularity: Regularity::Smooth,
        exact: Arc::new(exact),
        load: LoadFunctional::vector(Some(g0), None::<fn(&SamplePoint) -> [[f64; 2]; 2]>),
        needs_aligned_mesh: false,
    }
}

/// `x^2 (1 - x)^2 y^2 (1 - y)^2` with its polynomial bilaplacian.
pub fn ms_b1() -> ManufacturedSolution {
    let exact = |sp: &SamplePoint| {
        let (a, b) = (quartic(sp.x[0]), quartic(sp.x[1]));
        scalar_jet(
            a[0] * b[0],
            [a[1] * b[0], a[0] * b[1]],
            [[a[2] * b[0], a[1] * b[1]], [a[1] * b[1], a[0] * b[2]]],
        )
    };
    let g0 = |sp: &SamplePoint| {
        let (a, b) = (quartic(sp.x[0]), quartic(sp.x[1]));
        a[4] * b[0] + 2.0 * a[2] * b[2] + a[0] * b[4]
    };
    ManufacturedSolution {
        name: "ms-b1",
        problem: Problem::Biharmonic,
        regularity: Regularity::Smooth,
        exact: Arc::new(exact),
        load: LoadFunctional::scalar(Some(g0), None::<fn(&SamplePoint) -> [f64; 2]>),
        needs_aligned_mesh: false,
    }
}

/// The zero solution with zero load.
pub fn zero(problem: Problem) -> ManufacturedSolution {
    ManufacturedSolution {
        name: "zero",
        problem,
        regularity: Regularity::Smooth,
        exact: Arc::new(|_| [Jet::default(); 2]),
        load: LoadFunctional { g0: None, g: None },
        needs_aligned_mesh: false,
    }
}

/// The extended norm an error is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Norm {
    /// `(.,.)_{1;eta}`, componentwise for vector fields.
    H1 { eta: f64 },
    /// `a_{lambda;eta}`.
    Lame { eta: f64, lame: LameCoefficients },
    /// `(.,.)_{2;eta}`.
    H2 { eta: f64 },
}

impl Norm {
    fn eta(&self) -> f64 {
        match *self {
            Norm::H1 { eta } | Norm::Lame { eta, .. } | Norm::H2 { eta } => eta,
        }
    }
}

fn error_degree(space: &FeSpace) -> usize {
    (2 * space.degree() + 8).min(MAX_TRIANGLE_DEGREE)
}

fn sym_grad(u: &[Jet; 2]) -> [[f64; 2]; 2] {
    let off = 0.5 * (u[0].grad[1] + u[1].grad[0]);
    [[u[0].grad[0], off], [off, u[1].grad[1]]]
}

fn frob(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

fn sub(a: &[Jet; 2], b: &[Jet; 2]) -> [Jet; 2] {
    let d = |x: &Jet, y: &Jet| Jet {
        value: x.value - y.value,
        grad: [x.grad[0] - y.grad[0], x.grad[1] - y.grad[1]],
        hess: [
            [x.hess[0][0] - y.hess[0][0], x.hess[0][1] - y.hess[0][1]],
            [x.hess[1][0] - y.hess[1][0], x.hess[1][1] - y.hess[1][1]],
        ],
    };
    [d(&a[0], &b[0]), d(&a[1], &b[1])]
}

// Volume energy density of a (difference) field.
fn volume_density(e: &[Jet; 2], norm: Norm, dim: usize) -> f64 {
    match norm {
        Norm::H1 { .. } => (0..dim).map(|c| e[c].grad[0].powi(2) + e[c].grad[1].powi(2)).sum(),
        Norm::Lame { lame, .. } => {
            let eps = sym_grad(e);
            let div = eps[0][0] + eps[1][1];
            2.0 * lame.mu * frob(eps, eps) + lame.lambda * div * div
        }
        Norm::H2 { .. } => frob(e[0].hess, e[0].hess),
    }
}

/// Extended-norm error `||u - U||`; the exact solution is assumed to have no
/// jumps, so the skeleton part only involves `U`.
pub fn energy_error(exact: &dyn Fn(&SamplePoint) -> [Jet; 2], u_h: &FeFunction, norm: Norm) -> Result<f64> {
    let space = &u_h.space;
    let mesh = space.mesh();
    let dim = space.value_dim();
    let mut rule = quad_rule_triangle(error_degree(space))?;
    if space.is_split() {
        rule = rule.split_at_barycenter();
    }
    let mut total = 0.0;
    for k in 0..mesh.num_elements() {
        let area = mesh.geometry(k).area;
        let centroid = mesh.centroid(k);
        for (l, &w) in rule.points.iter().zip(&rule.weights) {
            let sp = SamplePoint { x: mesh.point(k, *l), element: k, centroid };
            let e = sub(&exact(&sp), &u_h.jet(k, *l)?);
            total += w * area * volume_density(&e, norm, dim);
        }
    }
    Ok((total + jump_seminorm_squared(u_h, norm)?).max(0.0).sqrt())
}

/// `sum_F eta / h_F int_F |[U]|^2` (order 1) or the normal-derivative
/// analogue (order 2).
pub fn jump_seminorm_squared(u_h: &FeFunction, norm: Norm) -> Result<f64> {
    let space = &u_h.space;
    let mesh = space.mesh();
    let eta = norm.eta();
    if eta == 0.0 {
        return Ok(0.0);
    }
    let dim = space.value_dim();
    let erule = quad_rule_edge(2 * space.degree() + 2)?;
    let mut total = 0.0;
    for f in 0..mesh.num_faces() {
        let face = mesh.face(f);
        for (t, w) in erule.params() {
            let (a, b) = u_h.face_traces(f, t);
            let b = b.unwrap_or([Jet::default(); 2]);
            let jump = match norm {
                Norm::H2 { .. } => {
                    let d = [a[0].grad[0] - b[0].grad[0], a[0].grad[1] - b[0].grad[1]];
                    (d[0] * face.normal[0] + d[1] * face.normal[1]).powi(2)
                }
                _ => (0..dim).map(|c| (a[c].value - b[c].value).powi(2)).sum(),
            };
            total += w * face.length * eta / face.length * jump;
        }
    }
    Ok(total)
}

/// Gram matrix of `norm` on `space`.
pub fn norm_matrix(space: &FeSpace, norm: Norm) -> Result<SparseMatrix> {
    match norm {
        Norm::H1 { eta } => assemble_extended_product(space, eta, 1, None),
        Norm::Lame { eta, lame } => assemble_extended_product(space, eta, 1, Some(lame)),
        Norm::H2 { eta } => assemble_extended_product(space, eta, 2, None),
    }
}

/// Orthogonal projection of the exact solution onto `space` in the extended
/// scalar product. The right-hand side uses the quadrature of
/// [`energy_error`], so the projection minimizes exactly the computed error.
pub fn best_approximation(
    exact: &dyn Fn(&SamplePoint) -> [Jet; 2],
    space: &Arc<FeSpace>,
    norm: Norm,
) -> Result<FeFunction> {
    let gram = norm_matrix(space, norm)?;
    let mesh = space.mesh();
    let mut rule = quad_rule_triangle(error_degree(space))?;
    if space.is_split() {
        rule = rule.split_at_barycenter();
    }
    let mut rhs = vec![0.0; space.dof_count()];
    let mut basis = LocalBasis::default();
    for k in 0..mesh.num_elements() {
        let area = mesh.geometry(k).area;
        let centroid = mesh.centroid(k);
        for (l, &w) in rule.points.iter().zip(&rule.weights) {
            let sp = SamplePoint { x: mesh.point(k, *l), element: k, centroid };
            let u = exact(&sp);
            space.eval_basis(k, *l, &mut basis);
            for (j, d) in space.local_dofs(k).iter().enumerate() {
                let Some(d) = *d else { continue };
                let c = space.component(j);
                let g = basis.grad[j];
                let v = match norm {
                    Norm::H1 { .. } => u[c].grad[0] * g[0] + u[c].grad[1] * g[1],
                    Norm::Lame { lame, .. } => {
                        let eps = sym_grad(&u);
                        2.0 * lame.mu * (eps[c][0] * g[0] + eps[c][1] * g[1])
                            + lame.lambda * (eps[0][0] + eps[1][1]) * g[c]
                    }
                    Norm::H2 { .. } => frob(u[0].hess, basis.hess[j]),
                };
                rhs[d] += w * area * v;
            }
        }
    }
    let (x, _) = solve_spd(&gram, &rhs, DEFAULT_TOLERANCE)?;
    Ok(FeFunction::new(space.clone(), x))
}

/// Smallest best-approximation error for which a ratio is reported.
pub const RATIO_FLOOR: f64 = 10.0 * DEFAULT_TOLERANCE;

/// Quasi-optimality ratio `||u - U|| / ||u - R u||`.
pub fn qopt_ratio(energy_error: f64, best_error: f64) -> Result<f64> {
    if !(best_error > RATIO_FLOOR) {
        return Err(Error::DegenerateDenominator(best_error));
    }
    Ok(energy_error / best_error)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sip,
    Nip,
    Hl,
    C0ip,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sip" => Variant::Sip,
            "nip" => Variant::Nip,
            "hl" => Variant::Hl,
            "c0ip" => Variant::C0ip,
            other => return invalid(format!("unknown variant '{other}'")),
        })
    }
}

/// One discretization: which form, which space, which smoother.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodConfig {
    pub problem: Problem,
    pub variant: Variant,
    pub p: usize,
    /// `None` picks the default penalty for the problem.
    pub eta: Option<f64>,
    pub smoother: SmootherChoice,
    pub lame: Option<LameCoefficients>,
}

impl MethodConfig {
    pub fn poisson(variant: DgVariant, p: usize, eta: f64, smoother: SmootherChoice) -> Self {
        MethodConfig {
            problem: Problem::Poisson,
            variant: match variant {
                DgVariant::Sip => Variant::Sip,
                DgVariant::Nip => Variant::Nip,
            },
            p,
            eta: Some(eta),
            smoother,
            lame: None,
        }
    }

    pub fn elasticity(lame: LameCoefficients, eta: f64) -> Self {
        MethodConfig {
            problem: Problem::Elasticity,
            variant: Variant::Hl,
            p: 1,
            eta: Some(eta),
            smoother: SmootherChoice::E1Vector,
            lame: Some(lame),
        }
    }

    /// Biharmonic C0 interior penalty with `eta = 4 eta_*` unless given.
    pub fn biharmonic(eta: Option<f64>) -> Self {
        MethodConfig { problem: Problem::Biharmonic, variant: Variant::C0ip, p: 2, eta, smoother: SmootherChoice::Ec0, lame: None }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.problem {
            Problem::Poisson => {
                matches!(self.variant, Variant::Sip | Variant::Nip)
                    && (1..=3).contains(&self.p)
                    && matches!(self.smoother, SmootherChoice::Ep | SmootherChoice::EpTilde | SmootherChoice::Identity)
            }
            Problem::Elasticity => {
                self.variant == Variant::Hl
                    && self.p == 1
                    && self.lame.is_some()
                    && matches!(self.smoother, SmootherChoice::E1Vector | SmootherChoice::Identity)
            }
            Problem::Biharmonic => {
                self.variant == Variant::C0ip
                    && self.p == 2
                    && matches!(self.smoother, SmootherChoice::Ec0 | SmootherChoice::Identity)
            }
        };
        if !ok {
            return invalid(format!("incompatible method configuration {self:?}"));
        }
        if self.smoother == SmootherChoice::EpTilde && self.p < 2 {
            return invalid("the modified smoother needs p >= 2");
        }
        Ok(())
    }

    pub fn space_kind(&self) -> SpaceKind {
        match self.problem {
            Problem::Poisson => SpaceKind::BrokenP(self.p),
            Problem::Elasticity => SpaceKind::CrouzeixRaviartVec,
            Problem::Biharmonic => SpaceKind::LagrangeP0BC(2),
        }
    }

    /// Penalty for `space`, with the threshold estimate where it matters.
    pub fn penalty(&self, space: &FeSpace) -> Result<PenaltyConfig> {
        let order = match self.problem {
            Problem::Poisson => Some(1),
            Problem::Biharmonic => Some(2),
            Problem::Elasticity => None,
        };
        let eta_star = match order {
            Some(o) => Some(estimate_eta_star(space, o)?),
            None => None,
        };
        let eta = match (self.eta, self.problem) {
            (Some(e), _) => e,
            (None, Problem::Poisson) => 10.0 * (self.p * self.p) as f64,
            (None, Problem::Elasticity) => 10.0,
            (None, Problem::Biharmonic) => 4.0 * eta_star.unwrap_or(1.0),
        };
        let cfg = PenaltyConfig::new(eta)?;
        Ok(match (eta_star, self.variant) {
            (Some(s), Variant::Sip | Variant::C0ip) => cfg.with_eta_star(s),
            (Some(s), _) => PenaltyConfig { eta_star_estimate: Some(s), ..cfg },
            _ => cfg,
        })
    }

    pub fn norm(&self, cfg: &PenaltyConfig) -> Norm {
        match self.problem {
            Problem::Poisson => Norm::H1 { eta: cfg.eta },
            Problem::Elasticity => Norm::Lame { eta: cfg.eta, lame: self.lame.expect("validated") },
            Problem::Biharmonic => Norm::H2 { eta: cfg.eta },
        }
    }
}

/// A discrete solution together with how it was obtained.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub solution: FeFunction,
    pub penalty: PenaltyConfig,
    pub report: SolveReport,
    pub matrix: SparseMatrix,
}

/// Assembles and solves `b(U, sigma) = <f, E sigma>` on `mesh`.
pub fn run_method(ms: &ManufacturedSolution, method: &MethodConfig, mesh: Arc<Mesh>) -> Result<MethodRun> {
    method.validate()?;
    if ms.problem != method.problem {
        return invalid(format!("solution {} belongs to {:?}, not {:?}", ms.name, ms.problem, method.problem));
    }
    ms.check_mesh(&mesh)?;
    let space = Arc::new(FeSpace::new(mesh, method.space_kind())?);
    let penalty = method.penalty(&space)?;
    let matrix = match method.variant {
        Variant::Sip => assemble_poisson_dg(&space, &penalty, DgVariant::Sip)?,
        Variant::Nip => assemble_poisson_dg(&space, &penalty, DgVariant::Nip)?,
        Variant::Hl => assemble_elasticity_hl(&space, &penalty, method.lame.expect("validated"))?,
        Variant::C0ip => assemble_biharmonic_c0(&space, &penalty)?,
    };
    let rhs = smoothed_rhs(&ms.load, &space, method.smoother)?;
    let (x, report) = match method.variant {
        Variant::Nip => solve_general(&matrix, &rhs, DEFAULT_TOLERANCE)?,
        _ => solve_symmetric(&matrix, &rhs, DEFAULT_TOLERANCE)?,
    };
    Ok(MethodRun { solution: FeFunction::new(space, x), penalty, report, matrix })
}

fn smoothed_rhs(load: &LoadFunctional, space: &Arc<FeSpace>, choice: SmootherChoice) -> Result<Vec<f64>> {
    match build_smoother(space, choice)? {
        Some(s) => assemble_rhs_with(load, &s),
        None => crate::forms::assemble_rhs(load, space, SmootherChoice::Identity),
    }
}

/// One row of a convergence table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRecord {
    pub level: usize,
    pub h: f64,
    pub dofs: usize,
    pub energy_error: f64,
    pub best_error: f64,
    /// Absent when the best approximation error is below [`RATIO_FLOOR`].
    pub ratio: Option<f64>,
    /// Against the previous level; absent on the first.
    pub eoc: Option<f64>,
    pub eta: f64,
    pub eta_star_estimate: Option<f64>,
    pub gamma: f64,
    pub solve: SolveReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRecord {
    pub solution: String,
    pub method: MethodConfig,
    pub levels: Vec<LevelRecord>,
}

impl ConvergenceRecord {
    pub fn final_eoc(&self) -> Option<f64> {
        self.levels.last().and_then(|l| l.eoc)
    }

    /// CSV with columns `level,h,dofs,energy_error,best_error,ratio,eoc`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["level", "h", "dofs", "energy_error", "best_error", "ratio", "eoc"]).map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
        for l in &self.levels {
            out.write_record([
                l.level.to_string(),
                format!("{:.6e}", l.h),
                l.dofs.to_string(),
                format!("{:.6e}", l.energy_error),
                format!("{:.6e}", l.best_error),
                opt(l.ratio),
                opt(l.eoc),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Io(std::io::Error::other(e)))
    }
}

/// `log(e0 / e1) / log(h0 / h1)`, absent if either error vanishes.
pub fn eoc(e0: f64, e1: f64, h0: f64, h1: f64) -> Option<f64> {
    (e0 > 0.0 && e1 > 0.0).then(|| (e0 / e1).ln() / (h0 / h1).ln())
}

/// Solves on `base` and on `levels` successive red refinements of it.
pub fn convergence_study(
    ms: &ManufacturedSolution,
    method: &MethodConfig,
    base: &Mesh,
    levels: usize,
) -> Result<ConvergenceRecord> {
    let mut mesh = base.clone();
    let mut rows: Vec<LevelRecord> = Vec::with_capacity(levels + 1);
    for level in 0..=levels {
        if level > 0 {
            mesh = mesh.refine_uniform();
        }
        let shared = Arc::new(mesh.clone());
        let run = run_method(ms, method, shared)?;
        let norm = method.norm(&run.penalty);
        let energy = energy_error(&*ms.exact, &run.solution, norm)?;
        let best = best_approximation(&*ms.exact, &run.solution.space, norm)?;
        let best_error = energy_error(&*ms.exact, &best, norm)?;
        let ratio = qopt_ratio(energy, best_error).ok();
        let h = mesh.h_max();
        let eoc = rows.last().and_then(|prev| eoc(prev.energy_error, energy, prev.h, h));
        log::info!("{} level {level}: h = {h:.4e}, error = {energy:.4e}, ratio = {ratio:?}", ms.name);
        rows.push(LevelRecord {
            level,
            h,
            dofs: run.solution.space.dof_count(),
            energy_error: energy,
            best_error,
            ratio,
            eoc,
            eta: run.penalty.eta,
            eta_star_estimate: run.penalty.eta_star_estimate,
            gamma: mesh.gamma(),
            solve: run.report,
        });
    }
    Ok(ConvergenceRecord { solution: ms.name.to_string(), method: *method, levels: rows })
}

/// `||U - U_classical||_{lambda;eta}` on one mesh.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRecord {
    pub level: usize,
    pub h: f64,
    pub dofs: usize,
    pub difference: f64,
    pub eoc: Option<f64>,
}

/// Compares the smoothed penalized Crouzeix-Raviart method with the classical
/// one that pairs an `L^2` load directly with the discrete test functions.
/// Both share the matrix, so only the right-hand sides differ.
pub fn compare_variants(
    load: &LoadFunctional,
    lame: LameCoefficients,
    eta: f64,
    base: &Mesh,
    levels: usize,
) -> Result<Vec<ComparisonRecord>> {
    if load.has_flux() {
        return Err(Error::UndefinedPairing("the classical variant needs an L^2 load".into()));
    }
    let mut mesh = base.clone();
    let mut rows: Vec<ComparisonRecord> = Vec::new();
    for level in 0..=levels {
        if level > 0 {
            mesh = mesh.refine_uniform();
        }
        let space = Arc::new(FeSpace::new(Arc::new(mesh.clone()), SpaceKind::CrouzeixRaviartVec)?);
        let cfg = PenaltyConfig::new(eta)?;
        let matrix = assemble_elasticity_hl(&space, &cfg, lame)?;
        let smoothed = smoothed_rhs(load, &space, SmootherChoice::E1Vector)?;
        let classical = load_vector(&space, load, 0, 2 * space.degree() + 8)?;
        let (u, _) = solve_spd(&matrix, &smoothed, DEFAULT_TOLERANCE)?;
        let (v, _) = solve_spd(&matrix, &classical, DEFAULT_TOLERANCE)?;
        let d: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        let difference = d.iter().zip(matrix.mul_vec(&d)).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt();
        let h = mesh.h_max();
        let eoc = rows.last().and_then(|prev| eoc(prev.difference, difference, prev.h, h));
        rows.push(ComparisonRecord { level, h, dofs: space.dof_count(), difference, eoc });
    }
    Ok(rows)
}
