//! Dense row-major 2D maps used for depth, normal, coverage and id images.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid2<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type DepthMap = Grid2<f64>;
pub type NormalMap = Grid2<Vec3>;
pub type IdMap = Grid2<u32>;
pub type Mask = Grid2<bool>;

impl<T: Clone> Grid2<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid2 {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid2<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "map data has {} entries, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(Grid2 { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Grid2 { width, height, data }
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

    pub fn same_shape<U>(&self, other: &Grid2<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn get(&self, col: usize, row: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn get_mut(&mut self, col: usize, row: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid2<U> {
        Grid2 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Validity of one ground-truth pixel: positive finite depth and a finite,
/// non-degenerate normal.
pub fn gt_valid(depth: f64, normal: &Vec3) -> bool {
    depth.is_finite() && depth > 0.0 && normal.iter().all(|c| c.is_finite()) && normal.norm() > 0.5
}

pub fn gt_valid_mask(depth: &DepthMap, normal: &NormalMap) -> Mask {
    Grid2 {
        width: depth.width,
        height: depth.height,
        data: depth.data.iter().zip(&normal.data).map(|(d, n)| gt_valid(*d, n)).collect(),
    }
}
