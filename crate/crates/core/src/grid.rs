//! Row-major 2-D grids used for images, masks, heatmaps and region maps.

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Grayscale intensities in [0, 1].
pub type Image = Grid<f64>;
/// Binary relevance mask.
pub type MaskImage = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Contract(format!("empty grid {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Contract(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.dims() == other.dims()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

pub(crate) fn check_dims<A, B>(a: &Grid<A>, b: &Grid<B>, what: &str) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{what}: shape {:?} does not match {:?}",
            a.dims(),
            b.dims()
        )))
    }
}

impl Image {
    /// `[1, H, W]` tensor view for the network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("grid dims are nonzero")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [1, h, w] | [h, w] => Grid::new(h, w, t.data().to_vec()),
            _ => Err(Error::Contract(format!("tensor {:?} is not a single-channel image", t.shape()))),
        }
    }
}

impl MaskImage {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.len() as f64
    }
}
