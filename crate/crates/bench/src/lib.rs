//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use qoip_core::{FeFunction, FeSpace, Mesh, SpaceKind};

pub fn square(n: usize) -> Arc<Mesh> {
    Arc::new(Mesh::structured_unit_square(n).expect("n > 0"))
}

pub fn space(n: usize, kind: SpaceKind) -> Arc<FeSpace> {
    Arc::new(FeSpace::new(square(n), kind).expect("supported space"))
}

/// A deterministic, non-trivial coefficient vector.
pub fn wiggly(space: &Arc<FeSpace>) -> FeFunction {
    let c = (0..space.dof_count()).map(|i| ((i as f64) * 0.7).sin()).collect();
    FeFunction::new(space.clone(), c)
}
