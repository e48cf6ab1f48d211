//! Per-pixel label grids.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::raster::GeoTransform;

/// Georeference carried by label grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    pub transform: GeoTransform,
    pub crs: String,
}

/// Row-major grid of class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
    pub georef: Option<GeoRef>,
}

impl ClassMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid!("mask must be at least 1x1, got {width}x{height}"));
        }
        if data.len() != width * height {
            return Err(invalid!(
                "mask data has {} values, expected {}",
                data.len(),
                width * height
            ));
        }
        Ok(Self { width, height, data, georef: None })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn with_georef(mut self, georef: Option<GeoRef>) -> Self {
        self.georef = georef;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn same_shape(&self, other: &ClassMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Per-class pixel counts for classes `0..num_classes`; out-of-range labels are ignored.
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes];
        for &v in &self.data {
            if let Some(c) = counts.get_mut(v as usize) {
                *c += 1;
            }
        }
        counts
    }
}

/// Damage scale used for building assessment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum DamageLevel {
    NoBuilding = 0,
    NoDamage = 1,
    Minor = 2,
    Major = 3,
    Destroyed = 4,
}

impl DamageLevel {
    pub const ALL: [DamageLevel; 5] = [
        DamageLevel::NoBuilding,
        DamageLevel::NoDamage,
        DamageLevel::Minor,
        DamageLevel::Major,
        DamageLevel::Destroyed,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DamageLevel::NoBuilding => "No Building",
            DamageLevel::NoDamage => "No Damage",
            DamageLevel::Minor => "Minor Damage",
            DamageLevel::Major => "Major Damage",
            DamageLevel::Destroyed => "Destroyed",
        }
    }
}

pub const NUM_DAMAGE_CLASSES: usize = 5;

/// A [`ClassMask`] whose labels are restricted to the 0-4 damage scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassMask", into = "ClassMask")]
pub struct DamageMask(ClassMask);

impl DamageMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::try_from(ClassMask::new(width, height, data)?)
    }

    pub fn into_inner(self) -> ClassMask {
        self.0
    }

    pub fn level(&self, x: usize, y: usize) -> DamageLevel {
        // labels are validated on construction
        DamageLevel::from_u8(self.0.get(x, y)).unwrap_or(DamageLevel::NoBuilding)
    }

    pub fn with_georef(self, georef: Option<GeoRef>) -> Self {
        DamageMask(self.0.with_georef(georef))
    }
}

impl TryFrom<ClassMask> for DamageMask {
    type Error = crate::Error;

    fn try_from(mask: ClassMask) -> Result<Self> {
        if let Some(bad) = mask.data.iter().find(|&&v| v as usize >= NUM_DAMAGE_CLASSES) {
            return Err(invalid!("damage mask label {bad} outside 0-4"));
        }
        Ok(DamageMask(mask))
    }
}

impl From<DamageMask> for ClassMask {
    fn from(m: DamageMask) -> Self {
        m.0
    }
}

impl Deref for DamageMask {
    type Target = ClassMask;

    fn deref(&self) -> &ClassMask {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn damage_mask_rejects_out_of_scale_labels() {
        assert!(DamageMask::new(2, 1, vec![0, 4]).is_ok());
        assert!(DamageMask::new(2, 1, vec![0, 5]).is_err());
    }

    #[test]
    fn histogram_counts_labels() {
        let m = ClassMask::new(3, 1, vec![0, 2, 2]).unwrap();
        assert_eq!(m.histogram(3), vec![1, 0, 2]);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(ClassMask::new(2, 2, vec![0; 3]).is_err());
        assert!(ClassMask::new(0, 2, vec![]).is_err());
    }
}
