//! File formats: splat files, camera lists, model directories, dataset
//! directories and training checkpoints. Every format carries a version and
//! loaders reject versions they do not know.

pub mod cameras;
pub mod checkpoint;
pub mod dataset;
pub mod model;
pub mod ply;
pub mod splat;

pub use cameras::{CameraEntry, CameraFile};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{load_dataset, save_dataset};
pub use model::{load_model, read_event_log, save_model, write_event_log, Manifest, ModelMeta};
pub use splat::{load_level, save_level, LevelFile};
