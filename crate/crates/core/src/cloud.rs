use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PolarGridConfig;

pub type ClassId = u16;
pub type InstanceId = u32;

/// One LiDAR return: position in meters relative to the sensor, reflectance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn planar_range(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// A scan with optional per-point semantic class and instance id
/// (instance 0 means "no instance").
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub semantic: Option<Vec<ClassId>>,
    pub instance: Option<Vec<InstanceId>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            semantic: None,
            instance: None,
        }
    }

    pub fn labeled(
        points: Vec<Point>,
        semantic: Vec<ClassId>,
        instance: Vec<InstanceId>,
    ) -> Result<Self> {
        let cloud = Self {
            points,
            semantic: Some(semantic),
            instance: Some(instance),
        };
        cloud.check_shape()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn semantic(&self) -> Result<&[ClassId]> {
        self.semantic
            .as_deref()
            .ok_or(Error::MissingLabels("semantic"))
    }

    pub fn instance(&self) -> Result<&[InstanceId]> {
        self.instance
            .as_deref()
            .ok_or(Error::MissingLabels("instance"))
    }

    pub fn max_instance(&self) -> InstanceId {
        self.instance
            .as_deref()
            .and_then(|ids| ids.iter().copied().max())
            .unwrap_or(0)
    }

    /// Finite coordinates and label arrays matching the point count.
    pub fn check_shape(&self) -> Result<()> {
        let n = self.points.len();
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.r.is_finite()))
        {
            return Err(Error::InvalidCloud(format!("point {i} is not finite")));
        }
        for (name, len) in [
            ("semantic", self.semantic.as_ref().map(Vec::len)),
            ("instance", self.instance.as_ref().map(Vec::len)),
        ] {
            if let Some(len) = len {
                if len != n {
                    return Err(Error::InvalidCloud(format!(
                        "{name} labels have length {len}, expected {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// [`check_shape`](Self::check_shape) plus: instance ids only on
    /// thing-class points.
    pub fn validate(&self, cfg: &PolarGridConfig) -> Result<()> {
        self.check_shape()?;
        if let (Some(sem), Some(inst)) = (&self.semantic, &self.instance) {
            if let Some(i) = (0..sem.len()).find(|&i| inst[i] > 0 && !cfg.is_thing(sem[i])) {
                return Err(Error::InvalidCloud(format!(
                    "point {i} has instance {} but class {} is not a thing class",
                    inst[i], sem[i]
                )));
            }
        }
        Ok(())
    }
}
