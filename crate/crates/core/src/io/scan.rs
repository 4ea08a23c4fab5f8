use std::path::Path;

use super::{read_bytes, write_atomic, FormatError};
use crate::cloud::{ClassId, InstanceId, Point, PointCloud};
use crate::error::Result;

const POINT_RECORD: usize = 16;
const LABEL_RECORD: usize = 4;

pub fn decode_points(bytes: &[u8]) -> Result<Vec<Point>, FormatError> {
    let whole = bytes.len() / POINT_RECORD * POINT_RECORD;
    if whole != bytes.len() {
        return Err(FormatError::Truncated {
            field: "point record",
            offset: whole as u64,
            needed: POINT_RECORD as u64,
            available: (bytes.len() - whole) as u64,
        });
    }
    bytes
        .chunks_exact(POINT_RECORD)
        .enumerate()
        .map(|(index, rec)| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
            let v = [f(0), f(1), f(2), f(3)];
            if v.iter().all(|x| x.is_finite()) {
                Ok(Point::new(v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64))
            } else {
                Err(FormatError::NonFinite { index })
            }
        })
        .collect()
}

/// Coordinates are narrowed to f32.
pub fn encode_points(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * POINT_RECORD);
    for p in points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<(Vec<ClassId>, Vec<InstanceId>), FormatError> {
    let whole = bytes.len() / LABEL_RECORD * LABEL_RECORD;
    if whole != bytes.len() {
        return Err(FormatError::Truncated {
            field: "label record",
            offset: whole as u64,
            needed: LABEL_RECORD as u64,
            available: (bytes.len() - whole) as u64,
        });
    }
    Ok(bytes
        .chunks_exact(LABEL_RECORD)
        .map(|c| {
            let v = u32::from_le_bytes(c.try_into().expect("4 bytes"));
            ((v & 0xFFFF) as ClassId, v >> 16)
        })
        .unzip())
}

pub fn encode_labels(semantic: &[ClassId], instance: &[InstanceId]) -> Result<Vec<u8>, FormatError> {
    if semantic.len() != instance.len() {
        return Err(FormatError::CountMismatch {
            points: semantic.len(),
            labels: instance.len(),
        });
    }
    let mut out = Vec::with_capacity(semantic.len() * LABEL_RECORD);
    for (index, (&s, &i)) in semantic.iter().zip(instance).enumerate() {
        if i > 0xFFFF {
            return Err(FormatError::LabelOverflow {
                index,
                field: "instance",
                value: i as u64,
            });
        }
        out.extend_from_slice(&((i << 16) | s as u32).to_le_bytes());
    }
    Ok(out)
}

/// Read a point file and, optionally, its label file.
pub fn read_scan(points: &Path, labels: Option<&Path>) -> Result<PointCloud> {
    let pts = decode_points(&read_bytes(points)?)?;
    let mut cloud = PointCloud::new(pts);
    if let Some(path) = labels {
        let (sem, inst) = decode_labels(&read_bytes(path)?)?;
        if sem.len() != cloud.len() {
            return Err(FormatError::CountMismatch {
                points: cloud.len(),
                labels: sem.len(),
            }
            .into());
        }
        cloud.semantic = Some(sem);
        cloud.instance = Some(inst);
    }
    Ok(cloud)
}

/// Write the point file and, when `labels` is given and the cloud carries
/// semantic labels, the label file (missing instance ids are written as 0).
pub fn write_scan(cloud: &PointCloud, points: &Path, labels: Option<&Path>) -> Result<()> {
    cloud.check_shape()?;
    let label_bytes = match (labels, &cloud.semantic) {
        (Some(path), Some(sem)) => {
            let zeros;
            let inst = match &cloud.instance {
                Some(i) => i.as_slice(),
                None => {
                    zeros = vec![0; sem.len()];
                    &zeros
                }
            };
            Some((path, encode_labels(sem, inst)?))
        }
        (Some(_), None) => return Err(crate::Error::MissingLabels("semantic")),
        (None, _) => None,
    };
    write_atomic(points, &encode_points(&cloud.points))?;
    if let Some((path, bytes)) = label_bytes {
        write_atomic(path, &bytes)?;
    }
    Ok(())
}
