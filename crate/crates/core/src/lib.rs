//! Learning global free-boundary UV parameterizations of unstructured point
//! clouds with a bi-directional cycle-mapping network.

pub mod autodiff;
pub mod geometry;
pub mod networks;
pub mod pipeline;
pub mod losses;
pub mod trainer;
pub mod analysis;
