pub mod autodiff;
pub mod cvae;
pub mod dataset;
pub mod geo_graph;
pub mod metrics;
pub mod raster;
pub mod rng;
