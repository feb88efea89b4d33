use crate::error::{Error, Result};

pub const MAX_TRIANGLE_DEGREE: usize = 30;
pub const MAX_EDGE_DEGREE: usize = 30;

/// Quadrature on a triangle in barycentric coordinates; weights sum to one,
/// so `sum_q w_q f(x_q) * |K|` approximates `int_K f`.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

/// Quadrature on an edge; points are barycentric pairs `(mu_0, mu_1)` and the
/// weights sum to one.
#[derive(Debug, Clone)]
pub struct EdgeRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl TriangleRule {
    /// The same rule applied on each of the three subtriangles obtained by
    /// joining the vertices to the barycenter; exact for piecewise polynomials
    /// on that split. Subtriangle `s` is opposite local vertex `s`.
    pub fn split_at_barycenter(&self) -> TriangleRule {
        let mut points = Vec::with_capacity(3 * self.points.len());
        let mut weights = Vec::with_capacity(3 * self.points.len());
        for s in 0..3 {
            let (a, b) = ((s + 1) % 3, (s + 2) % 3);
            for (p, &w) in self.points.iter().zip(&self.weights) {
                let mut lambda = [p[2] / 3.0; 3];
                lambda[a] += p[0];
                lambda[b] += p[1];
                points.push(lambda);
                weights.push(w / 3.0);
            }
        }
        TriangleRule { points, weights, degree: self.degree }
    }
}

impl EdgeRule {
    /// Parameter `t = mu_1` running from the first to the second end point.
    pub fn params(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().zip(&self.weights).map(|(p, &w)| (p[1], w))
    }
}

/// Gauss-Legendre nodes and weights on `[0, 1]` with `n` points.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    // P_n(z), P_{n-1}(z) by the three-term recurrence
    let legendre = |z: f64| {
        let (mut p0, mut p1) = (1.0, z);
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        (p1, p0)
    };
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (pn, pm) = legendre(z);
            let dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (pn, pm) = legendre(z);
        let dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
        pairs.push((0.5 * (1.0 - z), 1.0 / ((1.0 - z * z) * dp * dp)));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Rule exact for polynomials of total degree `degree` on a triangle,
/// obtained by collapsing a tensor Gauss rule onto the simplex.
pub fn quad_rule_triangle(degree: usize) -> Result<TriangleRule> {
    if degree > MAX_TRIANGLE_DEGREE {
        return Err(Error::UnsupportedDegree { requested: degree, max: MAX_TRIANGLE_DEGREE });
    }
    // The collapse adds the factor (1 - s), hence one more degree in s.
    let (xs, ws) = gauss_legendre(degree / 2 + 1 + usize::from(degree % 2 == 1));
    let (xt, wt) = gauss_legendre(degree / 2 + 1);
    let mut points = Vec::with_capacity(xs.len() * xt.len());
    let mut weights = Vec::with_capacity(xs.len() * xt.len());
    for (&s, &a) in xs.iter().zip(&ws) {
        for (&t, &b) in xt.iter().zip(&wt) {
            let l1 = s;
            let l2 = (1.0 - s) * t;
            points.push([1.0 - l1 - l2, l1, l2]);
            weights.push(2.0 * a * b * (1.0 - s));
        }
    }
    Ok(TriangleRule { points, weights, degree })
}

pub fn quad_rule_edge(degree: usize) -> Result<EdgeRule> {
    if degree > MAX_EDGE_DEGREE {
        return Err(Error::UnsupportedDegree { requested: degree, max: MAX_EDGE_DEGREE });
    }
    let (x, w) = gauss_legendre(degree / 2 + 1);
    Ok(EdgeRule { points: x.iter().map(|&t| [1.0 - t, t]).collect(), weights: w, degree })
}
