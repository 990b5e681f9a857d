pub mod cli;
pub mod ffcl;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod patchflow;
pub mod phantom;
pub mod raster;
pub mod refinement;
