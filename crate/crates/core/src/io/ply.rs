//! Minimal binary little-endian PLY with a single vertex element of float32
//! properties.

use std::io::Cursor;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// Parsed file: `key value` comments and row-major vertex data.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatPly {
    pub comments: Vec<(String, String)>,
    pub properties: Vec<String>,
    pub rows: usize,
    pub data: Vec<f32>,
}

impl FloatPly {
    pub fn comment(&self, key: &str) -> Option<&str> {
        self.comments.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.properties.len();
        &self.data[i * w..(i + 1) * w]
    }
}

pub fn encode(comments: &[(&str, String)], properties: &[&str], data: &[f32]) -> Vec<u8> {
    debug_assert!(!properties.is_empty() && data.len() % properties.len() == 0);
    let rows = data.len() / properties.len();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    for (k, v) in comments {
        header.push_str(&format!("comment {k} {v}\n"));
    }
    header.push_str(&format!("element vertex {rows}\n"));
    for p in properties {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    out.reserve(data.len() * 4);
    for &v in data {
        out.write_f32::<LittleEndian>(v).expect("write to vec");
    }
    out
}

/// Parses a file whose vertex properties must be exactly `properties`.
pub fn decode(bytes: &[u8], properties: &[&str]) -> Result<FloatPly> {
    let mut offset = 0usize;
    let next_line = |offset: &mut usize| -> Result<(u64, String)> {
        let start = *offset;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start as u64, "unterminated header line"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::parse(start as u64, "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .to_string();
        *offset = start + end + 1;
        Ok((start as u64, line))
    };

    let (at, magic) = next_line(&mut offset).map_err(|_| Error::parse(0, "missing ply magic"))?;
    if magic != "ply" {
        return Err(Error::parse(at, "missing ply magic"));
    }
    let (at, format) = next_line(&mut offset)?;
    if format != "format binary_little_endian 1.0" {
        return Err(Error::parse(at, format!("unsupported format line {format:?}")));
    }
    let mut comments = Vec::new();
    let mut rows: Option<usize> = None;
    let mut props = Vec::new();
    loop {
        let (at, line) = next_line(&mut offset)?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("comment") => {
                let key = words.next().unwrap_or("").to_string();
                let value = words.collect::<Vec<_>>().join(" ");
                comments.push((key, value));
            }
            Some("element") => {
                if rows.is_some() || words.next() != Some("vertex") {
                    return Err(Error::parse(at, "expected a single vertex element"));
                }
                let n = words
                    .next()
                    .and_then(|w| w.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse(at, "bad vertex count"))?;
                rows = Some(n);
            }
            Some("property") => {
                if rows.is_none() {
                    return Err(Error::parse(at, "property before element"));
                }
                let (ty, name) = (words.next(), words.next());
                if ty != Some("float") || name.is_none() || words.next().is_some() {
                    return Err(Error::parse(at, format!("unsupported property line {line:?}")));
                }
                let name = name.unwrap_or_default();
                let idx = props.len();
                if properties.get(idx) != Some(&name) {
                    return Err(Error::parse(
                        at,
                        format!("property {idx} is {name:?}, expected {:?}", properties.get(idx)),
                    ));
                }
                props.push(name.to_string());
            }
            Some("end_header") => break,
            _ => return Err(Error::parse(at, format!("unexpected header line {line:?}"))),
        }
    }
    let rows = rows.ok_or_else(|| Error::parse(offset as u64, "no vertex element"))?;
    if props.len() != properties.len() {
        return Err(Error::parse(
            offset as u64,
            format!("{} properties declared, expected {}", props.len(), properties.len()),
        ));
    }
    let count = rows
        .checked_mul(props.len())
        .ok_or_else(|| Error::parse(offset as u64, "vertex count overflows"))?;
    let body = &bytes[offset..];
    if body.len() != count * 4 {
        return Err(Error::parse(
            (offset + body.len().min(count * 4)) as u64,
            format!("body holds {} bytes, expected {}", body.len(), count * 4),
        ));
    }
    let mut cur = Cursor::new(body);
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(cur.read_f32::<LittleEndian>()?);
    }
    Ok(FloatPly { comments, properties: props, rows, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let bytes = encode(&[("k", "v w".into())], &["a", "b"], &[1.0, 2.0, 3.0, -0.5]);
        let ply = decode(&bytes, &["a", "b"]).unwrap();
        assert_eq!(ply.rows, 2);
        assert_eq!(ply.row(1), &[3.0, -0.5]);
        assert_eq!(ply.comment("k"), Some("v w"));
    }

    #[test]
    fn errors_carry_offsets() {
        let bytes = encode(&[], &["a"], &[1.0]);
        let mut bad = bytes.clone();
        bad[0] = b'q';
        assert!(matches!(decode(&bad, &["a"]), Err(Error::Parse { offset: 0, .. })));
        // truncated body
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(cut, &["a"]), Err(Error::Parse { .. })));
        // wrong property name
        match decode(&bytes, &["b"]) {
            Err(Error::Parse { offset, .. }) => {
                let header = std::str::from_utf8(&bytes[..offset as usize]).unwrap();
                assert!(header.ends_with("element vertex 1\n"));
            }
            other => panic!("{other:?}"),
        }
    }
}
