use crate::error::{invalid, Result};

/// Where a Lagrange node of a triangle sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeLocation {
    Vertex(usize),
    /// On the edge opposite local vertex `edge`; `t` counts steps from
    /// vertex `(edge + 1) % 3` towards vertex `(edge + 2) % 3`.
    Edge { edge: usize, t: usize },
    Interior,
}

/// Lagrange nodes of degree `degree` on a triangle, stored as integer
/// multi-indices `alpha` with barycentric coordinates `alpha / degree`.
///
/// Ordering: the three vertices, then the interior nodes of edges 0, 1, 2,
/// then the element-interior nodes in lexicographic order.
#[derive(Debug, Clone)]
pub struct LagrangeNodeSet {
    pub degree: usize,
    pub nodes: Vec<[usize; 3]>,
}

impl LagrangeNodeSet {
    pub fn new(degree: usize) -> Self {
        LagrangeNodeSet { degree, nodes: triangle_nodes(degree) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn barycentric(&self, j: usize) -> [f64; 3] {
        let q = self.degree.max(1) as f64;
        let a = self.nodes[j];
        if self.degree == 0 {
            return [1.0 / 3.0; 3];
        }
        [a[0] as f64 / q, a[1] as f64 / q, a[2] as f64 / q]
    }

    pub fn location(&self, j: usize) -> NodeLocation {
        location_of(self.degree, self.nodes[j])
    }

    pub fn index_of(&self, alpha: [usize; 3]) -> Option<usize> {
        self.nodes.iter().position(|&a| a == alpha)
    }
}

fn location_of(q: usize, a: [usize; 3]) -> NodeLocation {
    if q == 0 {
        return NodeLocation::Interior;
    }
    let zeros = a.iter().filter(|&&x| x == 0).count();
    match zeros {
        2 => NodeLocation::Vertex(a.iter().position(|&x| x == q).unwrap()),
        1 => {
            let edge = a.iter().position(|&x| x == 0).unwrap();
            NodeLocation::Edge { edge, t: a[(edge + 2) % 3] }
        }
        _ => NodeLocation::Interior,
    }
}

/// Multi-indices of the degree-`q` Lagrange nodes in the canonical order.
pub fn triangle_nodes(q: usize) -> Vec<[usize; 3]> {
    if q == 0 {
        return vec![[0, 0, 0]];
    }
    let mut nodes = Vec::with_capacity((q + 1) * (q + 2) / 2);
    for i in 0..3 {
        let mut a = [0; 3];
        a[i] = q;
        nodes.push(a);
    }
    for edge in 0..3 {
        let (from, to) = ((edge + 1) % 3, (edge + 2) % 3);
        for t in 1..q {
            let mut a = [0; 3];
            a[from] = q - t;
            a[to] = t;
            nodes.push(a);
        }
    }
    for a0 in (1..q).rev() {
        for a1 in (1..q).rev() {
            if a0 + a1 < q {
                nodes.push([a0, a1, q - a0 - a1]);
            }
        }
    }
    nodes
}

/// Edge nodes `(q - t, t)` for `t = 0..=q`.
pub fn edge_nodes(q: usize) -> Vec<[usize; 2]> {
    (0..=q).map(|t| [q - t, t]).collect()
}

/// Value and first two derivatives of `prod_{j < m} (q x - j) / (j + 1)`.
fn factor(q: usize, m: usize, x: f64) -> (f64, f64, f64) {
    let (mut f, mut d1, mut d2) = (1.0, 0.0, 0.0);
    for j in 0..m {
        let a = q as f64 / (j + 1) as f64;
        let g = a * x - j as f64 / (j + 1) as f64;
        d2 = d2 * g + 2.0 * d1 * a;
        d1 = d1 * g + f * a;
        f *= g;
    }
    (f, d1, d2)
}

/// Lagrange basis function of degree `q` attached to node `alpha`, with its
/// derivatives with respect to the three barycentric coordinates (treated as
/// independent variables).
pub fn lagrange_eval(q: usize, alpha: [usize; 3], lambda: [f64; 3]) -> (f64, [f64; 3]) {
    let (v, d, _) = lagrange_eval_full(q, alpha, lambda);
    (v, d)
}

/// As [`lagrange_eval`], adding the matrix of second barycentric derivatives.
pub fn lagrange_eval_full(q: usize, alpha: [usize; 3], lambda: [f64; 3]) -> (f64, [f64; 3], [[f64; 3]; 3]) {
    let f: [(f64, f64, f64); 3] = std::array::from_fn(|i| factor(q, alpha[i], lambda[i]));
    let value = f[0].0 * f[1].0 * f[2].0;
    let mut d = [0.0; 3];
    let mut h = [[0.0; 3]; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        d[i] = f[i].1 * f[j].0 * f[k].0;
        h[i][i] = f[i].2 * f[j].0 * f[k].0;
        h[i][j] = f[i].1 * f[j].1 * f[k].0;
        h[j][i] = h[i][j];
    }
    (value, d, h)
}

/// Checked variant used by the public API: `alpha` must be a node of degree `q`.
pub fn lagrange_eval_checked(q: usize, alpha: [usize; 3], lambda: [f64; 3]) -> Result<(f64, [f64; 3])> {
    if alpha.iter().sum::<usize>() != q {
        return invalid(format!("{alpha:?} is not a Lagrange node of degree {q}"));
    }
    Ok(lagrange_eval(q, alpha, lambda))
}

/// Degree-`q` Lagrange basis on an edge at parameter `t` (`mu = (1 - t, t)`),
/// returning the value and the derivative in `t`.
pub fn edge_lagrange_eval(q: usize, node: [usize; 2], t: f64) -> (f64, f64) {
    let (f0, d0, _) = factor(q, node[0], 1.0 - t);
    let (f1, d1, _) = factor(q, node[1], t);
    (f0 * f1, -d0 * f1 + f0 * d1)
}
