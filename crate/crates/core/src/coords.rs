//! Integer pixel lattices, random windows over them and cross-stage alignment.
//!
//! A [`CoordGrid`] is the set `{(o_r + s·a, o_c + s·b) | 0 ≤ a, b < side}`
//! of `(row, col)` pixel coordinates inside an `H × W` image, where `s = H/N`
//! is the lattice stride and `o` the pixel origin. A full grid has `o = 0`
//! and `side = N`; [`rcrop`] takes a contiguous sub-window of it, and
//! [`parent_window`] gives the sparser (stride `2s`) window over the same
//! pixel footprint.
//!
//! [`rcrop`]: CoordGrid::rcrop
//! [`parent_window`]: CoordGrid::parent_window

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Rng;

/// Training stage. Each stage samples the image at its own lattice density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::One, StageId::Two, StageId::Three];

    pub fn index(self) -> u32 {
        match self {
            StageId::One => 1,
            StageId::Two => 2,
            StageId::Three => 3,
        }
    }

    pub fn from_index(i: u32) -> Result<Self> {
        match i {
            1 => Ok(StageId::One),
            2 => Ok(StageId::Two),
            3 => Ok(StageId::Three),
            _ => invalid(format!("stage {i} is not one of 1, 2, 3")),
        }
    }

    /// Points per axis: H/4, H/2 and H for stages 1, 2, 3.
    pub fn density(self, h: usize) -> usize {
        match self {
            StageId::One => h / 4,
            StageId::Two => h / 2,
            StageId::Three => h,
        }
    }

    pub fn next(self) -> Option<StageId> {
        match self {
            StageId::One => Some(StageId::Two),
            StageId::Two => Some(StageId::Three),
            StageId::Three => None,
        }
    }

    pub fn prev(self) -> Option<StageId> {
        match self {
            StageId::One => None,
            StageId::Two => Some(StageId::One),
            StageId::Three => Some(StageId::Two),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CoordGrid {
    h: usize,
    w: usize,
    n: usize,
    origin_px: (usize, usize),
    side: usize,
    stride: usize,
}

/// `grid(H, W, N)`: the full `N × N` lattice with stride `H/N`.
pub fn make_grid(h: usize, w: usize, n: usize) -> Result<CoordGrid> {
    if h != w {
        return invalid(format!("only square grids are supported, got {h}x{w}"));
    }
    if n == 0 || !h.is_multiple_of(n) || !w.is_multiple_of(n) {
        return invalid(format!("N = {n} must divide H = {h} and W = {w}"));
    }
    Ok(CoordGrid {
        h,
        w,
        n,
        origin_px: (0, 0),
        side: n,
        stride: h / n,
    })
}

impl CoordGrid {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Lattice density of the full grid this window was taken from.
    pub fn density(&self) -> usize {
        self.n
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.side == 0
    }

    pub fn origin_px(&self) -> (usize, usize) {
        self.origin_px
    }

    /// Origin in lattice units, when the window starts on its own lattice.
    pub fn origin(&self) -> Option<(usize, usize)> {
        let (r, c) = self.origin_px;
        (r % self.stride == 0 && c % self.stride == 0).then(|| (r / self.stride, c / self.stride))
    }

    pub fn is_full(&self) -> bool {
        self.origin_px == (0, 0) && self.side == self.n
    }

    /// Pixel extent covered per axis: `side · stride`.
    pub fn extent(&self) -> usize {
        self.side * self.stride
    }

    /// `(row, col)` pixel coordinates in row-major slot order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let (r0, c0) = self.origin_px;
        let mut out = Vec::with_capacity(self.len());
        for a in 0..self.side {
            for b in 0..self.side {
                out.push((r0 + self.stride * a, c0 + self.stride * b));
            }
        }
        out
    }

    /// Same pixels as `[row, col]` reals, for the generator.
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.pixels().into_iter().map(|(r, c)| [r as f64, c as f64]).collect()
    }

    pub fn contains(&self, (r, c): (usize, usize)) -> bool {
        let (r0, c0) = self.origin_px;
        r >= r0
            && c >= c0
            && (r - r0) % self.stride == 0
            && (c - c0) % self.stride == 0
            && (r - r0) / self.stride < self.side
            && (c - c0) / self.stride < self.side
    }

    /// A uniformly placed contiguous `crop_side × crop_side` sub-window of
    /// a full grid. Origins are lattice points, so the stride is unchanged.
    pub fn rcrop(&self, crop_side: usize, rng: &mut Rng) -> Result<CoordGrid> {
        if !self.is_full() {
            return invalid("rcrop needs a full grid");
        }
        if crop_side == 0 || crop_side > self.side {
            return invalid(format!("crop side {crop_side} must be in 1..={}", self.side));
        }
        let placements = self.side - crop_side + 1;
        let r = rng.below(placements);
        let c = rng.below(placements);
        self.window((r, c), crop_side)
    }

    /// The sub-window at lattice origin `origin` of a full grid.
    pub fn window(&self, origin: (usize, usize), side: usize) -> Result<CoordGrid> {
        if !self.is_full() || origin.0 + side > self.n || origin.1 + side > self.n || side == 0 {
            return invalid(format!(
                "window at {origin:?} of side {side} does not fit a {} lattice",
                self.n
            ));
        }
        Ok(CoordGrid {
            origin_px: (origin.0 * self.stride, origin.1 * self.stride),
            side,
            ..*self
        })
    }

    /// Window of the previous (half-density) stage with the same pixel
    /// footprint: stride doubled, side halved, origin pixel unchanged. Its
    /// points are the even-index subsample of `self`.
    pub fn parent_window(&self) -> Result<CoordGrid> {
        if !self.side.is_multiple_of(2) {
            return invalid(format!("parent window needs an even side, got {}", self.side));
        }
        if !self.n.is_multiple_of(2) {
            return invalid(format!("density {} has no half-density parent", self.n));
        }
        Ok(CoordGrid {
            n: self.n / 2,
            side: self.side / 2,
            stride: self.stride * 2,
            ..*self
        })
    }
}

/// Maps a pixel coordinate on an `h × w` image to `[-1, 1]` per axis:
/// `x ↦ 2x/(w-1) - 1`. Affine, so it extends to coordinates outside the image.
/// Returns `(x, y)`.
pub fn normalize(h: usize, w: usize, row: f64, col: f64) -> (f64, f64) {
    debug_assert!(h >= 2 && w >= 2);
    (2.0 * col / (w as f64 - 1.0) - 1.0, 2.0 * row / (h as f64 - 1.0) - 1.0)
}

/// `side × side` points starting at pixel `(row0, col0)` with spacing `step`.
pub fn lattice_points(row0: f64, col0: f64, step: f64, side: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(side * side);
    for a in 0..side {
        for b in 0..side {
            out.push([row0 + step * a as f64, col0 + step * b as f64]);
        }
    }
    out
}
