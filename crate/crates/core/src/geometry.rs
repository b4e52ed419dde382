//! Normalized spatial grids and coordinate rotation.
//!
//! All modules share one frame: pixel (i, j) of an H x W image sits at
//! (x, y) = (i/H - 0.5, j/W - 0.5), so coordinates cover [-0.5, 0.5).
//! The first image axis is the phase-encode axis. View rotation is active:
//! coordinates move, the grid axes stay fixed, and rotated coordinates may
//! leave the unit box (downstream encoders clamp).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A row-major list of (x, y) sample positions with its image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    height: usize,
    width: usize,
    coords: Vec<[f64; 2]>,
}

impl SpatialGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Coordinate of pixel (i, j).
    pub fn coord(&self, i: usize, j: usize) -> [f64; 2] {
        self.coords[i * self.width + j]
    }

    /// Builds a grid from raw coordinates, keeping the image shape.
    /// Used for rotated grids whose coordinates may leave [-0.5, 0.5).
    pub fn from_coords(height: usize, width: usize, coords: Vec<[f64; 2]>) -> Self {
        assert_eq!(coords.len(), height * width);
        SpatialGrid {
            height,
            width,
            coords,
        }
    }
}

/// Rotation angle in degrees, normalized to [0, 360).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RotationAngle {
    degrees: f64,
}

impl RotationAngle {
    pub fn from_degrees(degrees: f64) -> Self {
        RotationAngle {
            degrees: degrees.rem_euclid(360.0),
        }
    }

    pub fn degrees(&self) -> f64 {
        self.degrees
    }

    pub fn radians(&self) -> f64 {
        self.degrees.to_radians()
    }

    pub fn sin_cos(&self) -> (f64, f64) {
        self.radians().sin_cos()
    }
}

/// Regular pixel-center grid with coordinates in [-0.5, 0.5).
pub fn make_grid(height: usize, width: usize) -> Result<SpatialGrid> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidDimension(format!(
            "grid must be at least 2x2, got {height}x{width}"
        )));
    }
    let mut coords = Vec::with_capacity(height * width);
    for i in 0..height {
        let x = i as f64 / height as f64 - 0.5;
        for j in 0..width {
            let y = j as f64 / width as f64 - 0.5;
            coords.push([x, y]);
        }
    }
    Ok(SpatialGrid {
        height,
        width,
        coords,
    })
}

/// Actively rotates every coordinate: (x, y) -> (x cos t - y sin t, x sin t + y cos t).
pub fn rotate_coords(grid: &SpatialGrid, angle: RotationAngle) -> SpatialGrid {
    let (s, c) = angle.sin_cos();
    let coords = grid
        .coords
        .iter()
        .map(|&[x, y]| [x * c - y * s, x * s + y * c])
        .collect();
    SpatialGrid {
        height: grid.height,
        width: grid.width,
        coords,
    }
}

/// Rotates a single point; shared by the analytic scene objects.
pub fn rotate_point(p: [f64; 2], angle_deg: f64) -> [f64; 2] {
    let (s, c) = angle_deg.to_radians().sin_cos();
    [p[0] * c - p[1] * s, p[0] * s + p[1] * c]
}
