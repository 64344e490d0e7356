//! Overlap and boundary-distance metrics between binary masks.
//!
//! Boundary pixels are mask pixels with at least one 4-neighbor outside
//! the mask or lying on the image border. Distances are Euclidean in
//! pixel units; minima and maxima are taken over exact integer squared
//! distances before the final square root, so results carry no float
//! comparison artifacts.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    DimMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    EmptyMask,
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::DimMismatch { a, b } => {
                write!(f, "mask dims {}x{} vs {}x{}", a.0, a.1, b.0, b.1)
            }
            MetricError::EmptyMask => write!(f, "surface metrics are undefined for empty masks"),
        }
    }
}

impl std::error::Error for MetricError {}

/// Binary occupancy grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl MaskGrid {
    pub fn new(width: usize, height: usize) -> Self {
        MaskGrid { width, height, bits: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        MaskGrid { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| !b)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height)
            .flat_map(move |y| (0..self.width).map(move |x| (x, y)))
            .filter(move |&(x, y)| self.get(x, y))
    }

    /// Boundary pixels in raster order: in the mask, with a 4-neighbor
    /// outside or on the image border.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let on_border = x == 0 || y == 0 || x == self.width - 1 || y == self.height - 1;
                let exposed = on_border
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
                if exposed {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    pub fn from_u8(width: usize, height: usize, data: &[u8]) -> Option<Self> {
        if data.len() != width * height {
            return None;
        }
        Some(MaskGrid {
            width,
            height,
            bits: data.iter().map(|&b| b != 0).collect(),
        })
    }
}

fn check_dims(a: &MaskGrid, b: &MaskGrid) -> Result<(), MetricError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricError::DimMismatch {
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    Ok(())
}

fn overlap_counts(a: &MaskGrid, b: &MaskGrid) -> (usize, usize, usize) {
    let mut na = 0;
    let mut nb = 0;
    let mut ni = 0;
    for (&pa, &pb) in a.bits.iter().zip(b.bits.iter()) {
        na += pa as usize;
        nb += pb as usize;
        ni += (pa && pb) as usize;
    }
    (na, nb, ni)
}

/// Dice overlap `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &MaskGrid, b: &MaskGrid) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let (na, nb, ni) = overlap_counts(a, b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * ni as f64 / (na + nb) as f64)
}

/// Intersection over union `|A n B| / |A u B|`; two empty masks score 1.
pub fn iou(a: &MaskGrid, b: &MaskGrid) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let (na, nb, ni) = overlap_counts(a, b);
    let union = na + nb - ni;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(ni as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub hausdorff: f64,
    pub asd: f64,
}

/// Exact (100th percentile) Hausdorff and average surface distance over
/// boundary pixels, with an optional physical spacing multiplier.
pub fn surface_distances_spaced(
    a: &MaskGrid,
    b: &MaskGrid,
    spacing: f64,
) -> Result<SurfaceDistances, MetricError> {
    check_dims(a, b)?;
    let ba = a.boundary();
    let bb = b.boundary();
    if ba.is_empty() || bb.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> (f64, f64) {
        let mut max_min_sq: i64 = 0;
        let mut sum = 0.0f64;
        for &(x, y) in from {
            let mut min_sq = i64::MAX;
            for &(u, v) in to {
                let dx = x as i64 - u as i64;
                let dy = y as i64 - v as i64;
                let d = dx * dx + dy * dy;
                if d < min_sq {
                    min_sq = d;
                }
            }
            max_min_sq = max_min_sq.max(min_sq);
            sum += (min_sq as f64).sqrt();
        }
        ((max_min_sq as f64).sqrt(), sum / from.len() as f64)
    };
    let (max_ab, mean_ab) = directed(&ba, &bb);
    let (max_ba, mean_ba) = directed(&bb, &ba);
    Ok(SurfaceDistances {
        hausdorff: max_ab.max(max_ba) * spacing,
        asd: 0.5 * (mean_ab + mean_ba) * spacing,
    })
}

pub fn hausdorff(a: &MaskGrid, b: &MaskGrid) -> Result<f64, MetricError> {
    Ok(surface_distances_spaced(a, b, 1.0)?.hausdorff)
}

pub fn asd(a: &MaskGrid, b: &MaskGrid) -> Result<f64, MetricError> {
    Ok(surface_distances_spaced(a, b, 1.0)?.asd)
}
