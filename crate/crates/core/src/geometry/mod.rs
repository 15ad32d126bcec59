//! Synthetic surfaces, mesh files, surface quadrature and error metrics.

pub mod io;
mod mesh;
pub mod metrics;
pub mod quadrature;
pub mod sphere;

pub use mesh::MeshBatch;
pub use metrics::{mae, metrics, r2, rel_l2, Metrics};
pub use quadrature::{integrate_force, quadrature_convergence, FlowConstants, Force, ReferenceIntegrals};
pub use sphere::{gen_sphere_mesh, manufactured_field, sample_sphere, tangential_shear};
