//! Run-length encoded binary masks and integer boxes.
//!
//! Masks are stored as maximally merged `(start, length)` runs over the
//! row-major pixel index `y * width + x`. Set algebra is a two-pointer sweep
//! over runs, so every operation is linear in the number of runs rather than
//! the number of pixels.

use alloc::vec::Vec;

use crate::error::GeometryError;

/// A binary pixel mask over a `width × height` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BinaryMask {
    width: u32,
    height: u32,
    runs: Vec<(u32, u32)>,
}

/// Axis-aligned box with inclusive `x0, y0` and exclusive `x1, y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, runs: Vec::new() }
    }

    pub fn full(width: u32, height: u32) -> Self {
        let n = width * height;
        let runs = if n == 0 { Vec::new() } else { alloc::vec![(0, n)] };
        Self { width, height, runs }
    }

    /// Builds a mask from runs that must already satisfy the canonical form:
    /// sorted, non-empty, non-overlapping, non-adjacent and in bounds.
    pub fn from_runs(width: u32, height: u32, runs: Vec<(u32, u32)>) -> Result<Self, GeometryError> {
        let n = width as u64 * height as u64;
        let mut prev_end: Option<u64> = None;
        for &(start, len) in &runs {
            let (s, l) = (start as u64, len as u64);
            if l == 0 || s + l > n {
                return Err(GeometryError::InvalidRuns);
            }
            if let Some(end) = prev_end {
                // adjacency (s == end) would not be maximally merged
                if s <= end {
                    return Err(GeometryError::InvalidRuns);
                }
            }
            prev_end = Some(s + l);
        }
        Ok(Self { width, height, runs })
    }

    /// Builds a mask from unordered, possibly overlapping runs.
    pub fn from_runs_normalized(width: u32, height: u32, mut runs: Vec<(u32, u32)>) -> Self {
        let n = width * height;
        runs.retain(|&(s, l)| l > 0 && s < n);
        runs.sort_unstable();
        let mut out: Vec<(u32, u32)> = Vec::with_capacity(runs.len());
        for (s, l) in runs {
            let e = (s + l).min(n);
            match out.last_mut() {
                Some(last) if s <= last.0 + last.1 => {
                    let end = (last.0 + last.1).max(e);
                    last.1 = end - last.0;
                }
                _ => out.push((s, e - s)),
            }
        }
        Self { width, height, runs: out }
    }

    /// Encodes a row-major dense bitmap.
    pub fn from_dense(width: u32, height: u32, pixels: &[bool]) -> Result<Self, GeometryError> {
        if pixels.len() != (width * height) as usize {
            return Err(GeometryError::SizeMismatch);
        }
        let mut runs = Vec::new();
        let mut start: Option<u32> = None;
        for (i, &p) in pixels.iter().enumerate() {
            match (p, start) {
                (true, None) => start = Some(i as u32),
                (false, Some(s)) => {
                    runs.push((s, i as u32 - s));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, pixels.len() as u32 - s));
        }
        Ok(Self { width, height, runs })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut dense = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                dense.push(f(x, y));
            }
        }
        Self::from_dense(width, height, &dense).expect("dense buffer sized from dimensions")
    }

    /// Mask covering exactly the pixels of `b`.
    pub fn from_box(width: u32, height: u32, b: BBox) -> Self {
        let x1 = b.x1.min(width);
        let y1 = b.y1.min(height);
        let mut runs = Vec::new();
        if b.x0 < x1 {
            for y in b.y0..y1 {
                runs.push((y * width + b.x0, x1 - b.x0));
            }
        }
        Self::from_runs_normalized(width, height, runs)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[(u32, u32)] {
        &self.runs
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().map(|&(_, l)| l as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut out = alloc::vec![false; (self.width * self.height) as usize];
        for &(s, l) in &self.runs {
            out[s as usize..(s + l) as usize].iter_mut().for_each(|p| *p = true);
        }
        out
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let idx = y * self.width + x;
        let pos = self.runs.partition_point(|&(s, _)| s <= idx);
        pos > 0 && {
            let (s, l) = self.runs[pos - 1];
            idx < s + l
        }
    }

    /// Iterates over set pixel indices in ascending order.
    pub fn pixel_indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.runs.iter().flat_map(|&(s, l)| s..s + l)
    }

    fn check_same_size(&self, other: &Self) -> Result<(), GeometryError> {
        if self.width != other.width || self.height != other.height {
            Err(GeometryError::SizeMismatch)
        } else {
            Ok(())
        }
    }

    pub fn intersection_area(&self, other: &Self) -> Result<u64, GeometryError> {
        self.check_same_size(other)?;
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut j, mut total) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let (s0, e0) = (a[i].0, a[i].0 + a[i].1);
            let (s1, e1) = (b[j].0, b[j].0 + b[j].1);
            let lo = s0.max(s1);
            let hi = e0.min(e1);
            if lo < hi {
                total += (hi - lo) as u64;
            }
            if e0 <= e1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(total)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self, GeometryError> {
        self.check_same_size(other)?;
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut j) = (0, 0);
        let mut runs = Vec::new();
        while i < a.len() && j < b.len() {
            let (s0, e0) = (a[i].0, a[i].0 + a[i].1);
            let (s1, e1) = (b[j].0, b[j].0 + b[j].1);
            let lo = s0.max(s1);
            let hi = e0.min(e1);
            if lo < hi {
                runs.push((lo, hi - lo));
            }
            if e0 <= e1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        // overlaps of canonical runs are themselves canonical
        Ok(Self { width: self.width, height: self.height, runs })
    }

    pub fn union(&self, other: &Self) -> Result<Self, GeometryError> {
        self.check_same_size(other)?;
        let mut runs: Vec<(u32, u32)> = Vec::with_capacity(self.runs.len() + other.runs.len());
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let next = if j >= b.len() || (i < a.len() && a[i].0 <= b[j].0) {
                i += 1;
                a[i - 1]
            } else {
                j += 1;
                b[j - 1]
            };
            match runs.last_mut() {
                Some(last) if next.0 <= last.0 + last.1 => {
                    let end = (last.0 + last.1).max(next.0 + next.1);
                    last.1 = end - last.0;
                }
                _ => runs.push(next),
            }
        }
        Ok(Self { width: self.width, height: self.height, runs })
    }

    /// Pixels of `self` that are not in `other`.
    pub fn difference(&self, other: &Self) -> Result<Self, GeometryError> {
        self.check_same_size(other)?;
        let mut runs = Vec::new();
        let b = &other.runs;
        let mut j = 0;
        for &(s, l) in &self.runs {
            let mut cur = s;
            let end = s + l;
            while j < b.len() && b[j].0 + b[j].1 <= cur {
                j += 1;
            }
            let mut k = j;
            while cur < end {
                if k >= b.len() || b[k].0 >= end {
                    runs.push((cur, end - cur));
                    break;
                }
                let (bs, be) = (b[k].0, b[k].0 + b[k].1);
                if bs > cur {
                    runs.push((cur, bs - cur));
                }
                cur = cur.max(be);
                k += 1;
            }
        }
        Ok(Self::from_runs_normalized(self.width, self.height, runs))
    }

    /// Smallest box containing every set pixel.
    pub fn bbox(&self) -> Result<BBox, GeometryError> {
        let w = self.width;
        let (first, last) = match (self.runs.first(), self.runs.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(GeometryError::EmptyMask),
        };
        let y0 = first.0 / w;
        let y1 = (last.0 + last.1 - 1) / w + 1;
        let (mut x0, mut x1) = (u32::MAX, 0);
        for &(s, l) in &self.runs {
            let e = s + l - 1;
            if s / w != e / w {
                x0 = 0;
                x1 = w;
                break;
            }
            x0 = x0.min(s % w);
            x1 = x1.max(e % w + 1);
        }
        Ok(BBox { x0, y0, x1, y1 })
    }
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, GeometryError> {
        if x0 >= x1 || y0 >= y1 {
            return Err(GeometryError::DegenerateBox);
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    fn is_degenerate(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w as u64 * h as u64
    }

    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// `(cx, cy, w, h)` normalized by the image size.
    pub fn normalized_cxcywh(&self, width: u32, height: u32) -> [f64; 4] {
        let (w, h) = (width as f64, height as f64);
        [
            (self.x0 + self.x1) as f64 / (2.0 * w),
            (self.y0 + self.y1) as f64 / (2.0 * h),
            self.width() as f64 / w,
            self.height() as f64 / h,
        ]
    }
}

/// Fraction of the patch `p` that lies inside `g`.
pub fn iop_mask(p: &BinaryMask, g: &BinaryMask) -> Result<f64, GeometryError> {
    let area = p.area();
    if area == 0 {
        return Err(GeometryError::DegeneratePatch);
    }
    Ok(p.intersection_area(g)? as f64 / area as f64)
}

/// Intersection over union. Two empty masks have IoU 0.
pub fn iou_mask(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn iop_box(p: &BBox, g: &BBox) -> Result<f64, GeometryError> {
    if p.is_degenerate() || g.is_degenerate() {
        return Err(GeometryError::DegenerateBox);
    }
    Ok(p.intersection_area(g) as f64 / p.area() as f64)
}

pub fn iou_box(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(GeometryError::DegenerateBox);
    }
    let inter = a.intersection_area(b);
    Ok(inter as f64 / (a.area() + b.area() - inter) as f64)
}

/// Generalized IoU: `IoU - |hull \ (a ∪ b)| / |hull|`, in `[-1, 1]`.
pub fn giou_box(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    let iou = iou_box(a, b)?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    Ok(iou - (hull - union) as f64 / hull as f64)
}

pub fn union_all(masks: &[BinaryMask]) -> Result<BinaryMask, GeometryError> {
    let (first, rest) = masks.split_first().ok_or(GeometryError::EmptyInput)?;
    for m in rest {
        first.check_same_size(m)?;
    }
    let runs = masks.iter().flat_map(|m| m.runs.iter().copied()).collect();
    Ok(BinaryMask::from_runs_normalized(first.width, first.height, runs))
}

pub fn merge_bboxes(boxes: &[BBox]) -> Result<BBox, GeometryError> {
    let (first, rest) = boxes.split_first().ok_or(GeometryError::EmptyInput)?;
    Ok(rest.iter().fold(*first, |acc, b| acc.hull(b)))
}
