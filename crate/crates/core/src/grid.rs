//! Dense time-frequency matrices, row-major with one row per STFT frame.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TfGrid<T> {
    frames: usize,
    bins: usize,
    data: Vec<T>,
}

impl<T: Clone> TfGrid<T> {
    pub fn filled(frames: usize, bins: usize, value: T) -> Self {
        Self {
            frames,
            bins,
            data: vec![value; frames * bins],
        }
    }
}

impl<T> TfGrid<T> {
    pub fn from_vec(frames: usize, bins: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::mismatch(frames * bins, data.len()));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn from_fn(frames: usize, bins: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(frames * bins);
        for m in 0..frames {
            for k in 0..bins {
                data.push(f(m, k));
            }
        }
        Self { frames, bins, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
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

    pub fn row(&self, frame: usize) -> &[T] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn row_mut(&mut self, frame: usize) -> &mut [T] {
        &mut self.data[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> TfGrid<U> {
        TfGrid {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &TfGrid<U>) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_shape<U>(&self, other: &TfGrid<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::mismatch(
                format!("{}x{}", self.frames, self.bins),
                format!("{}x{}", other.frames, other.bins),
            ))
        }
    }
}

impl<T> Index<(usize, usize)> for TfGrid<T> {
    type Output = T;

    fn index(&self, (m, k): (usize, usize)) -> &T {
        &self.data[m * self.bins + k]
    }
}

impl<T> IndexMut<(usize, usize)> for TfGrid<T> {
    fn index_mut(&mut self, (m, k): (usize, usize)) -> &mut T {
        &mut self.data[m * self.bins + k]
    }
}
