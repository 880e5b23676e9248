//! Mixture RoI pooling: floor-based tiling with remainder compensation,
//! position-sensitive average pooling over roi / local / global regions, and
//! its adjoint.

use std::fmt::Write as _;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::{enlarge, CenterBox, CornerBox};
use crate::psmap::{channel_index, ARConfig, ContextMode, PSMapSet, Role, Tiling};
use crate::real::Real;

/// Half-open integer pixel range `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn from_corner(b: &CornerBox) -> Self {
        let x0 = b.x.max(0.0) as usize;
        let y0 = b.y.max(0.0) as usize;
        PixelRect {
            x0,
            y0,
            x1: (b.right().max(0.0) as usize).max(x0 + 1),
            y1: (b.bottom().max(0.0) as usize).max(y0 + 1),
        }
    }
}

/// Rounds a map-space box to the pixel lattice and clips it to `[0,W] x [0,H]`,
/// keeping at least one pixel per axis.
pub fn snap_to_map(b: &CornerBox, map_w: usize, map_h: usize) -> Result<CornerBox> {
    let (w, h) = (map_w as f64, map_h as f64);
    if map_w == 0 || map_h == 0 {
        return Err(Error::DegenerateRoi("empty map".into()));
    }
    if b.x >= w || b.y >= h || b.right() <= 0.0 || b.bottom() <= 0.0 {
        return Err(Error::DegenerateRoi(format!(
            "box {b:?} lies outside the {map_w}x{map_h} map"
        )));
    }
    let axis = |lo: f64, hi: f64, size: f64| {
        let mut a = lo.round().clamp(0.0, size);
        let mut z = hi.round().clamp(0.0, size);
        if z - a < 1.0 {
            if a >= size {
                a = size - 1.0;
            }
            z = a + 1.0;
        }
        (a, z)
    };
    let (x0, x1) = axis(b.x, b.right(), w);
    let (y0, y1) = axis(b.y, b.bottom(), h);
    Ok(CornerBox {
        x: x0,
        y: y0,
        wd: x1 - x0,
        ht: y1 - y0,
    })
}

/// Maps a pixel-space RoI onto the lattice of a map downsampled by `stride`.
pub fn to_map_coords(b: &CenterBox, stride: usize, map_w: usize, map_h: usize) -> Result<CornerBox> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let c = b.to_corner();
    let s = stride as f64;
    let scaled = CornerBox {
        x: c.x / s,
        y: c.y / s,
        wd: c.wd / s,
        ht: c.ht / s,
    };
    snap_to_map(&scaled, map_w, map_h)
}

/// The `h_i x w_i` cells of a box, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    pub tiling: Tiling,
    pub cells: Vec<CornerBox>,
}

impl CellGrid {
    pub fn cell(&self, j: usize, k: usize) -> &CornerBox {
        &self.cells[j * self.tiling.cols + k]
    }

    pub fn ranges(&self) -> Vec<PixelRect> {
        self.cells.iter().map(PixelRect::from_corner).collect()
    }
}

// Cells of one axis as (start, length). Every cell but the last is
// floor(len / n) long (at least one pixel); the last absorbs the remainder.
fn split_axis(start: f64, len: f64, n: usize) -> Vec<(f64, f64)> {
    let step = (len / n as f64).floor().max(1.0);
    let end = start + len;
    (0..n)
        .map(|c| {
            let s = (start + c as f64 * step).min(end - 1.0);
            let e = if c + 1 == n { end } else { (s + step).min(end) };
            (s, (e - s).max(1.0))
        })
        .collect()
}

/// Tiles `b` into `rows x cols` cells.
pub fn tile(b: &CornerBox, rows: usize, cols: usize) -> CellGrid {
    let xs = split_axis(b.x, b.wd.max(1.0), cols);
    let ys = split_axis(b.y, b.ht.max(1.0), rows);
    let mut cells = Vec::with_capacity(rows * cols);
    for &(y, ht) in &ys {
        for &(x, wd) in &xs {
            cells.push(CornerBox { x, y, wd, ht });
        }
    }
    CellGrid {
        tiling: Tiling::new(rows, cols),
        cells,
    }
}

/// The three pooling regions of a RoI, in role order, for the configured
/// context mode.
pub fn role_boxes(cfg: &ARConfig, b: &CenterBox, map_w: usize, map_h: usize) -> Result<[CornerBox; 3]> {
    let roi = to_map_coords(b, cfg.stride, map_w, map_h)?;
    let global = CornerBox {
        x: 0.0,
        y: 0.0,
        wd: map_w as f64,
        ht: map_h as f64,
    };
    Ok(match cfg.context {
        ContextMode::None => [roi, roi, roi],
        ContextMode::Global => [roi, roi, global],
        ContextMode::LocalGlobal => {
            let local = snap_to_map(&enlarge(&roi, cfg.lambda_ctx), map_w, map_h)?;
            [roi, local, global]
        }
    })
}

/// Cell pixel ranges of one RoI for component `i`, per role.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiCells {
    pub component: usize,
    pub tiling: Tiling,
    pub roles: [Vec<PixelRect>; 3],
}

impl RoiCells {
    pub fn new(cfg: &ARConfig, b: &CenterBox, i: usize, map_w: usize, map_h: usize) -> Result<Self> {
        let t = *cfg
            .tilings
            .get(i)
            .ok_or_else(|| Error::IndexOutOfRange(format!("component {i}")))?;
        let boxes = role_boxes(cfg, b, map_w, map_h)?;
        Ok(Self::from_boxes(i, t, &boxes))
    }

    pub fn from_boxes(component: usize, tiling: Tiling, boxes: &[CornerBox; 3]) -> Self {
        let roles = boxes.map(|bx| tile(&bx, tiling.rows, tiling.cols).ranges());
        RoiCells {
            component,
            tiling,
            roles,
        }
    }
}

/// Pooled feature `f_B^i`: a `3K x h_i x w_i` array whose channel `r*K + q`
/// holds slot `q` of role `r` (roi, local, global).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature<T> {
    pub values: Array3<T>,
    pub component: usize,
    pub source_roi: CenterBox,
}

impl<T: Real> PooledFeature<T> {
    pub fn as_slice(&self) -> &[T] {
        self.values.as_slice().expect("pooled features are contiguous")
    }
}

fn cell_mean<T: Real>(map: &Array3<T>, ch: usize, r: &PixelRect) -> T {
    let mut acc = T::zero();
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            acc += map[[ch, y, x]];
        }
    }
    acc / T::of(r.area() as f64)
}

/// Position-sensitive average pooling of RoI `b` for mixture component `i`.
pub fn pool_roi<T: Real>(maps: &PSMapSet<T>, cfg: &ARConfig, b: &CenterBox, i: usize) -> Result<PooledFeature<T>> {
    maps.check(cfg)?;
    let (h, w) = maps.spatial();
    let cells = RoiCells::new(cfg, b, i, w, h)?;
    Ok(pool_cells(maps, cfg, &cells, *b))
}

pub(crate) fn pool_cells<T: Real>(
    maps: &PSMapSet<T>,
    cfg: &ARConfig,
    cells: &RoiCells,
    source: CenterBox,
) -> PooledFeature<T> {
    let i = cells.component;
    let t = cells.tiling;
    let kk = cfg.k;
    let mut values = Array3::<T>::zeros((3 * kk, t.rows, t.cols));
    for role in Role::ALL {
        let map = maps.map(i, role);
        let ranges = &cells.roles[role as usize];
        for j in 0..t.rows {
            for k in 0..t.cols {
                let r = &ranges[j * t.cols + k];
                for q in 0..kk {
                    let ch = (j * t.cols + k) * kk + q;
                    values[[role as usize * kk + q, j, k]] = cell_mean(map, ch, r);
                }
            }
        }
    }
    PooledFeature {
        values,
        component: i,
        source_roi: source,
    }
}

/// Accumulates the adjoint of [`pool_roi`] for one RoI into `grad`.
pub fn pool_backward_into<T: Real>(
    grad: &mut PSMapSet<T>,
    cfg: &ARConfig,
    b: &CenterBox,
    i: usize,
    upstream: &Array3<T>,
) -> Result<()> {
    grad.check(cfg)?;
    let (h, w) = grad.spatial();
    let cells = RoiCells::new(cfg, b, i, w, h)?;
    let t = cells.tiling;
    if upstream.dim() != (3 * cfg.k, t.rows, t.cols) {
        return Err(Error::shape(
            format!("({}, {}, {})", 3 * cfg.k, t.rows, t.cols),
            format!("{:?}", upstream.dim()),
        ));
    }
    for role in Role::ALL {
        let map = &mut grad.comps[i][role as usize];
        for j in 0..t.rows {
            for k in 0..t.cols {
                let r = &cells.roles[role as usize][j * t.cols + k];
                let inv = T::one() / T::of(r.area() as f64);
                for q in 0..cfg.k {
                    let ch = channel_index(cfg, i, j, k, q)?;
                    let g = upstream[[role as usize * cfg.k + q, j, k]] * inv;
                    for y in r.y0..r.y1 {
                        for x in r.x0..r.x1 {
                            map[[ch, y, x]] += g;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Adjoint of [`pool_roi`] as a fresh map-shaped gradient.
pub fn pool_backward<T: Real>(
    cfg: &ARConfig,
    map_h: usize,
    map_w: usize,
    b: &CenterBox,
    i: usize,
    upstream: &Array3<T>,
) -> Result<PSMapSet<T>> {
    let mut grad = PSMapSet::zeros(cfg, map_h, map_w);
    pool_backward_into(&mut grad, cfg, b, i, upstream)?;
    Ok(grad)
}

/// Human-readable dump of the cell grids of every component for one RoI.
pub fn describe_cells(cfg: &ARConfig, b: &CenterBox, map_w: usize, map_h: usize) -> Result<String> {
    let mut out = String::new();
    let boxes = role_boxes(cfg, b, map_w, map_h)?;
    for (i, t) in cfg.tilings.iter().enumerate() {
        let cells = RoiCells::from_boxes(i, *t, &boxes);
        for role in Role::ALL {
            let bx = boxes[role as usize];
            let _ = writeln!(
                out,
                "component {i} ({t}) {} box x={} y={} wd={} ht={}",
                role.name(),
                bx.x,
                bx.y,
                bx.wd,
                bx.ht
            );
            for (n, r) in cells.roles[role as usize].iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  cell ({},{}) x=[{},{}) y=[{},{})",
                    n / t.cols,
                    n % t.cols,
                    r.x0,
                    r.x1,
                    r.y0,
                    r.y1
                );
            }
        }
    }
    Ok(out)
}
