//! Multi-level Gaussian splatting.
//!
//! A scene is trained as a ladder of Gaussian sets, each with a fixed lower
//! bound on Gaussian scale that shrinks from level to level. Any single level
//! can be rendered on its own, or several levels can be mixed by camera
//! distance to trade detail for memory and speed.

pub mod camera;
pub mod defaults;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod scene;
pub mod selective;
pub mod trainer;

pub use camera::Camera;
pub use error::{Error, Result};
pub use image::Image;
pub use model::{GaussianLevelSet, MultiLevelModel};
