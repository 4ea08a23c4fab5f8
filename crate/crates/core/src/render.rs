//! BEV debug images as binary PPM.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{PixelIndex, PolarGridConfig};
use crate::io::write_atomic;
use crate::tensor::BevTensor;

pub const BACKGROUND: [u8; 3] = [0, 0, 0];
pub const MARKER: [u8; 3] = [255, 255, 255];

/// Deterministic, well-spread color for an id (never black or white).
pub fn palette(id: u32) -> [u8; 3] {
    let mut h = id.wrapping_mul(0x9E37_79B9).rotate_left(13) ^ 0x5bd1_e995;
    h = h.wrapping_mul(0x85eb_ca6b);
    h ^= h >> 16;
    [
        40 + (h & 0xff) as u8 % 200,
        40 + ((h >> 8) & 0xff) as u8 % 200,
        40 + ((h >> 16) & 0xff) as u8 % 200,
    ]
}

/// Renders an `H × W` image (row = radial bin, column = angular bin).
///
/// Each pixel shows the class of the top-most non-ignore voxel of
/// `labels` (`H × W × Z`), overridden by the group color where `groups`
/// is nonzero. Centers get a white plus-shaped marker.
pub fn render_bev(
    labels: &BevTensor<u32>,
    groups: Option<&BevTensor<u32>>,
    centers: &[PixelIndex],
    cfg: &PolarGridConfig,
) -> Result<Vec<u8>> {
    let (h, w) = labels.bev_dims();
    if let Some(g) = groups {
        g.expect_shape("group map", &[h, w])?;
    }
    let ignore = u32::from(cfg.ignore_class);
    let mut rgb = vec![0u8; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            let group = groups.map_or(0, |g| g.pixel(i, j)[0]);
            let color = if group > 0 {
                palette(group.wrapping_add(0x1000))
            } else {
                match labels.pixel(i, j).iter().rev().find(|&&c| c != ignore) {
                    Some(&c) => palette(c),
                    None => BACKGROUND,
                }
            };
            rgb[(i * w + j) * 3..][..3].copy_from_slice(&color);
        }
    }
    for c in centers {
        if c.i >= h || c.j >= w {
            return Err(Error::ShapeMismatch {
                what: "center",
                expected: vec![h, w],
                found: vec![c.i, c.j],
            });
        }
        let (i, j) = (c.i as isize, c.j as isize);
        for (di, dj) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (a, b) = (i + di, j + dj);
            if a >= 0 && b >= 0 && (a as usize) < h && (b as usize) < w {
                rgb[(a as usize * w + b as usize) * 3..][..3].copy_from_slice(&MARKER);
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

pub fn write_bev(
    path: &Path,
    labels: &BevTensor<u32>,
    groups: Option<&BevTensor<u32>>,
    centers: &[PixelIndex],
    cfg: &PolarGridConfig,
) -> Result<()> {
    write_atomic(path, &render_bev(labels, groups, centers, cfg)?)
}
