//! Persistence (HDF5 containers), run configuration (TOML), and the
//! pipeline stages that connect them.

pub mod container;
pub mod pipeline;
pub mod runconfig;
