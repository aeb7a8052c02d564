pub mod data;
pub mod model;
pub mod raster;
pub mod tensor;
pub mod train;
