//! Barycentric calculus on triangles and edges: Lagrange bases, the closed
//! form for integrals of barycentric monomials, and quadrature rules checked
//! against it.

mod lagrange;
mod quadrature;

pub use lagrange::{
    edge_lagrange_eval, edge_nodes, lagrange_eval, lagrange_eval_checked, lagrange_eval_full, triangle_nodes, LagrangeNodeSet,
    NodeLocation,
};
pub use quadrature::{
    gauss_legendre, quad_rule_edge, quad_rule_triangle, EdgeRule, TriangleRule, MAX_EDGE_DEGREE,
    MAX_TRIANGLE_DEGREE,
};

use crate::error::{invalid, Result};

#[cfg(test)]
fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Integral of `prod_z lambda_z^{alpha_z}` over an `n`-simplex of measure
/// `measure`, i.e. `n! alpha! / (n + |alpha|)! * measure`.
pub fn integrate_barycentric_monomial(alpha: &[usize], simplex_dim: usize, measure: f64) -> Result<f64> {
    if !(1..=2).contains(&simplex_dim) {
        return invalid(format!("simplex dimension {simplex_dim} not in {{1, 2}}"));
    }
    if alpha.len() != simplex_dim + 1 {
        return invalid(format!(
            "multi-index of length {} for a {simplex_dim}-simplex",
            alpha.len()
        ));
    }
    let total: usize = alpha.iter().sum();
    // Evaluate the ratio incrementally to stay well inside f64 range.
    let mut value = measure;
    let mut denominator_terms = (simplex_dim + 1..=simplex_dim + total).rev();
    for &a in alpha {
        for k in 1..=a {
            value *= k as f64 / denominator_terms.next().unwrap() as f64;
        }
    }
    debug_assert!(denominator_terms.next().is_none());
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        let v = integrate_barycentric_monomial(&[1, 0, 0], 2, 1.0).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-16);
        assert_eq!(integrate_barycentric_monomial(&[0, 0], 1, 1.0).unwrap(), 1.0);
        let v = integrate_barycentric_monomial(&[4, 4], 1, 1.0).unwrap();
        assert!((v - 1.0 / 630.0).abs() < 1e-18);
        let v = integrate_barycentric_monomial(&[1, 1, 1], 2, 1.0).unwrap();
        assert!((v - 1.0 / 60.0).abs() < 1e-17);
    }

    #[test]
    fn bad_multi_index() {
        assert!(integrate_barycentric_monomial(&[1, 0], 2, 1.0).is_err());
        assert!(integrate_barycentric_monomial(&[1, 0, 0, 0], 3, 1.0).is_err());
    }

    #[test]
    fn agrees_with_factorials() {
        for a in 0..6 {
            for b in 0..6 {
                for c in 0..6 {
                    let exact = 2.0 * factorial(a) * factorial(b) * factorial(c) / factorial(2 + a + b + c);
                    let v = integrate_barycentric_monomial(&[a, b, c], 2, 1.0).unwrap();
                    assert!((v - exact).abs() <= 1e-14 * exact);
                }
            }
        }
    }
}
