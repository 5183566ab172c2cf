//! Dense row-major `f32` tensors and rectangular regions over them.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Copy out the elements covered by `region`.
    pub fn read(&self, region: &Region) -> Result<Tensor> {
        match region {
            Region::Flat(r) => {
                if r.end > self.data.len() || r.start > r.end {
                    return Err(Error::Shape(format!(
                        "flat range {r:?} outside tensor of {} elements",
                        self.data.len()
                    )));
                }
                Ok(Tensor { shape: vec![r.len()], data: self.data[r.clone()].to_vec() })
            }
            Region::Box(ranges) => {
                self.check_box(ranges)?;
                let shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
                let mut data = Vec::with_capacity(shape.iter().product());
                for_each_offset(&self.shape, ranges, |off, run| {
                    data.extend_from_slice(&self.data[off..off + run]);
                });
                Ok(Tensor { shape, data })
            }
        }
    }

    /// Overwrite the elements covered by `region` with `src` (row-major).
    pub fn write(&mut self, region: &Region, src: &[f32]) -> Result<()> {
        let n = region.len(&self.shape);
        if src.len() != n {
            return Err(Error::Shape(format!(
                "region holds {n} elements, source has {}",
                src.len()
            )));
        }
        match region {
            Region::Flat(r) => {
                if r.end > self.data.len() {
                    return Err(Error::Shape(format!("flat range {r:?} out of bounds")));
                }
                self.data[r.clone()].copy_from_slice(src);
            }
            Region::Box(ranges) => {
                self.check_box(ranges)?;
                let shape = self.shape.clone();
                let mut pos = 0;
                for_each_offset(&shape, ranges, |off, run| {
                    self.data[off..off + run].copy_from_slice(&src[pos..pos + run]);
                    pos += run;
                });
            }
        }
        Ok(())
    }

    fn check_box(&self, ranges: &[Range<usize>]) -> Result<()> {
        if ranges.len() != self.shape.len()
            || ranges.iter().zip(&self.shape).any(|(r, &d)| r.end > d || r.start > r.end)
        {
            return Err(Error::Shape(format!(
                "region {ranges:?} does not fit shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// ||self - reference|| / ||reference|| computed in f64.
    pub fn rel_l2_error(&self, reference: &Tensor) -> f64 {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (a, b) in self.data.iter().zip(&reference.data) {
            let d = *a as f64 - *b as f64;
            num += d * d;
            den += (*b as f64) * (*b as f64);
        }
        if den == 0.0 {
            return num.sqrt();
        }
        (num / den).sqrt()
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visit contiguous runs (innermost dimension) of a box region.
fn for_each_offset(shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize, usize)) {
    if ranges.iter().any(|r| r.is_empty()) {
        return;
    }
    let st = strides(shape);
    let rank = shape.len();
    if rank == 0 {
        f(0, 1);
        return;
    }
    let run = ranges[rank - 1].len();
    let mut idx: Vec<usize> = ranges.iter().map(|r| r.start).collect();
    loop {
        let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        f(off, run);
        // advance outer indices
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < ranges[d].end {
                break;
            }
            idx[d] = ranges[d].start;
            if d == 0 {
                return;
            }
        }
    }
}

/// Part of a logical tensor: either a box over its shape or a contiguous
/// range of its flattened (row-major) elements.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Box(Vec<Range<usize>>),
    Flat(Range<usize>),
}

impl Region {
    pub fn full(shape: &[usize]) -> Region {
        Region::Box(shape.iter().map(|&d| 0..d).collect())
    }

    pub fn len(&self, _shape: &[usize]) -> usize {
        match self {
            Region::Flat(r) => r.len(),
            Region::Box(rs) => rs.iter().map(|r| r.len()).product(),
        }
    }

    pub fn is_full(&self, shape: &[usize]) -> bool {
        match self {
            Region::Flat(r) => r.start == 0 && r.end == shape.iter().product::<usize>(),
            Region::Box(rs) => rs.iter().zip(shape).all(|(r, &d)| r.start == 0 && r.end == d),
        }
    }

    /// Flat element ranges covered, in ascending order, merged.
    pub fn flat_runs(&self, shape: &[usize]) -> Vec<Range<usize>> {
        match self {
            Region::Flat(r) => vec![r.clone()],
            Region::Box(rs) => {
                let mut runs: Vec<Range<usize>> = Vec::new();
                for_each_offset(shape, rs, |off, run| match runs.last_mut() {
                    Some(last) if last.end == off => last.end = off + run,
                    _ => runs.push(off..off + run),
                });
                runs
            }
        }
    }

    pub fn overlaps(&self, other: &Region, shape: &[usize]) -> bool {
        match (self, other) {
            (Region::Box(a), Region::Box(b)) => {
                a.iter().zip(b).all(|(x, y)| x.start < y.end && y.start < x.end)
            }
            _ => {
                let a = self.flat_runs(shape);
                let b = other.flat_runs(shape);
                let (mut i, mut j) = (0, 0);
                while i < a.len() && j < b.len() {
                    if a[i].start < b[j].end && b[j].start < a[i].end {
                        return true;
                    }
                    if a[i].end <= b[j].end {
                        i += 1;
                    } else {
                        j += 1;
                    }
                }
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn box_read_write() {
        let t = iota(&[2, 3, 4]);
        let r = Region::Box(vec![1..2, 0..3, 1..3]);
        let sub = t.read(&r).unwrap();
        assert_eq!(sub.shape, vec![1, 3, 2]);
        assert_eq!(sub.data, vec![13.0, 14.0, 17.0, 18.0, 21.0, 22.0]);
        let mut z = Tensor::zeros(&[2, 3, 4]);
        z.write(&r, &sub.data).unwrap();
        assert_eq!(z.data[13], 13.0);
        assert_eq!(z.data[12], 0.0);
        assert_eq!(r.flat_runs(&t.shape), vec![13..15, 17..19, 21..23]);
    }

    #[test]
    fn flat_regions_and_overlap() {
        let t = iota(&[4, 4]);
        assert_eq!(t.read(&Region::Flat(5..7)).unwrap().data, vec![5.0, 6.0]);
        let shape = [4, 4];
        let a = Region::Box(vec![0..2, 0..4]);
        assert!(a.overlaps(&Region::Flat(7..9), &shape));
        assert!(!a.overlaps(&Region::Flat(8..9), &shape));
        assert!(Region::full(&shape).is_full(&shape));
        assert!(Region::Flat(0..16).is_full(&shape));
        assert!(t.read(&Region::Box(vec![0..5, 0..1])).is_err());
    }

    #[test]
    fn errors_and_metrics() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0]).is_err());
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 2.5]).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.5);
        assert!((b.rel_l2_error(&a) - 0.5 / 5f64.sqrt()).abs() < 1e-12);
        assert!(a.bitwise_eq(&a.clone()));
        assert!(a.clone().reshape(&[1, 2]).is_ok());
        assert!(a.reshape(&[3]).is_err());
    }
}
