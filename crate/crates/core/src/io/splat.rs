//! Per-level splat files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{scale_constraint, GaussianLevelSet};

use super::ply;

pub const SPLAT_FORMAT_VERSION: u32 = 1;

pub const SPLAT_PROPERTIES: [&str; 14] = [
    "x",
    "y",
    "z",
    "scale_opt_0",
    "scale_opt_1",
    "scale_opt_2",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
    "opacity_logit",
    "r",
    "g",
    "b",
];

/// A level set together with the ladder it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFile {
    pub set: GaussianLevelSet,
    pub tau: f64,
    pub rho: f64,
    pub l_max: u32,
}

impl LevelFile {
    /// Checks that the stored `s_min` is the ladder value for its level.
    pub fn validate(&self) -> Result<()> {
        self.set.check_consistent()?;
        let expected = scale_constraint(self.set.level, self.tau, self.rho, self.l_max)?;
        if self.set.s_min != expected {
            return Err(Error::Validation(format!(
                "level {} has s_min {} but the ladder (tau={}, rho={}, l_max={}) gives {}",
                self.set.level, self.set.s_min, self.tau, self.rho, self.l_max, expected
            )));
        }
        Ok(())
    }
}

pub fn encode_level(file: &LevelFile) -> Result<Vec<u8>> {
    file.validate()?;
    let set = &file.set;
    let mut data = Vec::with_capacity(set.len() * SPLAT_PROPERTIES.len());
    for i in 0..set.len() {
        data.extend(set.positions[i].iter().map(|&v| v as f32));
        data.extend(set.scale_params[i].iter().map(|&v| v as f32));
        data.extend(set.rotations[i].iter().map(|&v| v as f32));
        data.push(set.opacity_params[i] as f32);
        data.extend(set.colors[i].iter().map(|&v| v as f32));
    }
    let comments = [
        ("flod_format_version", SPLAT_FORMAT_VERSION.to_string()),
        ("level", set.level.to_string()),
        ("s_min", format!("{:?}", set.s_min)),
        ("tau", format!("{:?}", file.tau)),
        ("rho", format!("{:?}", file.rho)),
        ("l_max", file.l_max.to_string()),
    ];
    Ok(ply::encode(&comments, &SPLAT_PROPERTIES, &data))
}

fn header_value<T: std::str::FromStr>(ply: &ply::FloatPly, key: &str) -> Result<T> {
    let raw = ply
        .comment(key)
        .ok_or_else(|| Error::parse(0, format!("header lacks {key}")))?;
    raw.parse()
        .map_err(|_| Error::parse(0, format!("header {key} has bad value {raw:?}")))
}

pub fn decode_level(bytes: &[u8]) -> Result<LevelFile> {
    let ply = ply::decode(bytes, &SPLAT_PROPERTIES)?;
    let version: u32 = header_value(&ply, "flod_format_version")?;
    if version != SPLAT_FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: SPLAT_FORMAT_VERSION });
    }
    let level: u32 = header_value(&ply, "level")?;
    let s_min: f64 = header_value(&ply, "s_min")?;
    let tau: f64 = header_value(&ply, "tau")?;
    let rho: f64 = header_value(&ply, "rho")?;
    let l_max: u32 = header_value(&ply, "l_max")?;
    let mut set = GaussianLevelSet::empty(level, s_min);
    for i in 0..ply.rows {
        let r: Vec<f64> = ply.row(i).iter().map(|&v| v as f64).collect();
        set.positions.push([r[0], r[1], r[2]]);
        set.scale_params.push([r[3], r[4], r[5]]);
        set.rotations.push([r[6], r[7], r[8], r[9]]);
        set.opacity_params.push(r[10]);
        set.colors.push([r[11], r[12], r[13]]);
    }
    let file = LevelFile { set, tau, rho, l_max };
    file.validate()?;
    Ok(file)
}

pub fn save_level(path: impl AsRef<Path>, file: &LevelFile) -> Result<()> {
    std::fs::write(path, encode_level(file)?)?;
    Ok(())
}

pub fn load_level(path: impl AsRef<Path>) -> Result<LevelFile> {
    decode_level(&std::fs::read(path)?)
}

pub const POINTS_PROPERTIES: [&str; 6] = ["x", "y", "z", "r", "g", "b"];

/// Point cloud with colors, used to seed the first level.
pub fn encode_points(points: &[[f64; 3]], colors: &[[f64; 3]]) -> Result<Vec<u8>> {
    if points.len() != colors.len() {
        return Err(Error::Argument("point and color counts differ".into()));
    }
    let data: Vec<f32> = points
        .iter()
        .zip(colors)
        .flat_map(|(p, c)| p.iter().chain(c).map(|&v| v as f32).collect::<Vec<_>>())
        .collect();
    Ok(ply::encode(
        &[("flod_format_version", SPLAT_FORMAT_VERSION.to_string())],
        &POINTS_PROPERTIES,
        &data,
    ))
}

pub fn decode_points(bytes: &[u8]) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let ply = ply::decode(bytes, &POINTS_PROPERTIES)?;
    let version: u32 = header_value(&ply, "flod_format_version")?;
    if version != SPLAT_FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: SPLAT_FORMAT_VERSION });
    }
    let (mut points, mut colors) = (Vec::with_capacity(ply.rows), Vec::with_capacity(ply.rows));
    for i in 0..ply.rows {
        let r = ply.row(i);
        points.push([r[0] as f64, r[1] as f64, r[2] as f64]);
        colors.push([r[3] as f64, r[4] as f64, r[5] as f64]);
    }
    Ok((points, colors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Gaussian;

    fn sample(level: u32, l_max: u32) -> LevelFile {
        let s_min = scale_constraint(level, 0.2, 4.0, l_max).unwrap();
        let g = Gaussian {
            position: [0.5, -1.25, 3.0],
            scale_param: [-2.0, -1.5, -3.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_param: 0.75,
            color: [0.25, 0.5, 1.0],
        };
        LevelFile { set: GaussianLevelSet::from_gaussians(level, s_min, &[g, g]), tau: 0.2, rho: 4.0, l_max }
    }

    fn replace_in_header(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        let end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let header = std::str::from_utf8(&bytes[..end]).unwrap();
        assert!(header.contains(from));
        let mut out = header.replace(from, to).into_bytes();
        out.extend_from_slice(&bytes[end..]);
        out
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample(2, 5);
        assert_eq!(decode_level(&encode_level(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = encode_level(&sample(1, 3)).unwrap();
        bytes[1] = b'X';
        assert!(matches!(decode_level(&bytes), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn inconsistent_s_min_is_rejected() {
        let mut f = sample(2, 5);
        f.set.s_min = 0.5;
        assert!(matches!(encode_level(&f), Err(Error::Validation(_))));
        let bytes = encode_level(&sample(2, 5)).unwrap();
        let forged = replace_in_header(&bytes, "comment s_min 0.05", "comment s_min 0.07");
        assert!(matches!(decode_level(&forged), Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let bytes = encode_level(&sample(1, 2)).unwrap();
        let forged = replace_in_header(&bytes, "flod_format_version 1", "flod_format_version 9");
        assert!(matches!(decode_level(&forged), Err(Error::Version { found: 9, expected: 1 })));
    }

    #[test]
    fn points_round_trip() {
        let p = vec![[1.0, 2.0, 3.0], [-0.5, 0.25, 0.0]];
        let c = vec![[0.0, 0.5, 1.0], [1.0, 1.0, 0.0]];
        assert_eq!(decode_points(&encode_points(&p, &c).unwrap()).unwrap(), (p, c));
    }
}
