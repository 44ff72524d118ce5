//! Dataset directories:
//!
//! ```text
//! cameras.json        training cameras, each naming its image
//! test_cameras.json   held-out cameras (optional)
//! images/*.png        training images
//! test_images/*.png   held-out images
//! points.ply          seed point cloud with colors
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{Dataset, View};

use super::cameras::{CameraEntry, CameraFile};
use super::splat::{decode_points, encode_points};

pub const TRAIN_CAMERAS: &str = "cameras.json";
pub const TEST_CAMERAS: &str = "test_cameras.json";
pub const POINTS: &str = "points.ply";
pub const IMAGES: &str = "images";
pub const TEST_IMAGES: &str = "test_images";

fn write_views(dir: &Path, file: &str, images: &str, views: &[View]) -> Result<()> {
    std::fs::create_dir_all(dir.join(images))?;
    let mut entries = Vec::with_capacity(views.len());
    for v in views {
        let rel = format!("{images}/{}.png", v.name);
        v.image.save_png(dir.join(&rel))?;
        entries.push(CameraEntry::new(v.name.clone(), &v.camera, Some(rel)));
    }
    CameraFile::new(entries).save(dir.join(file))
}

fn read_views(dir: &Path, file: &str) -> Result<Vec<View>> {
    let cams = CameraFile::load(dir.join(file))?;
    cams.cameras
        .iter()
        .map(|e| {
            let rel = e
                .image
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("camera {} has no image", e.id)))?;
            let view = View { name: e.id.clone(), camera: e.camera(), image: Image::load_png(dir.join(rel))? };
            view.validate()?;
            Ok(view)
        })
        .collect()
}

pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    write_views(dir, TRAIN_CAMERAS, IMAGES, &data.train)?;
    if !data.test.is_empty() {
        write_views(dir, TEST_CAMERAS, TEST_IMAGES, &data.test)?;
    }
    std::fs::write(dir.join(POINTS), encode_points(&data.points, &data.point_colors)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let train = read_views(dir, TRAIN_CAMERAS)?;
    let test = if dir.join(TEST_CAMERAS).exists() { read_views(dir, TEST_CAMERAS)? } else { Vec::new() };
    let (points, point_colors) = decode_points(&std::fs::read(dir.join(POINTS))?)?;
    let data = Dataset { train, test, points, point_colors };
    data.validate()?;
    Ok(data)
}
