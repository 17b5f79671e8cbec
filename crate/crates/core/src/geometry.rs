//! Polygon rasterization, spine-curve fitting and image derivatives.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{Mask2, Point};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate polygon (area {area})")]
    DegeneratePolygon { area: f64 },
    #[error("need at least {needed} points to fit degree {degree}, got {got}")]
    InsufficientPoints {
        needed: usize,
        degree: usize,
        got: usize,
    },
    #[error("rank-deficient fit: {distinct} distinct y values for degree {degree}")]
    RankDeficient { distinct: usize, degree: usize },
    #[error("array of shape {rows}x{cols} is too small for finite differences")]
    TooSmall { rows: usize, cols: usize },
}

/// Signed shoelace area; positive for clockwise order in image coordinates (y down).
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, including touching and collinear overlap.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when the closed polygon (in stored order) has no crossing edges.
/// Only non-adjacent edge pairs are tested.
pub fn is_simple_polygon(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a1 = poly[i];
        let a2 = poly[(i + 1) % n];
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let b1 = poly[j];
            let b2 = poly[(j + 1) % n];
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

/// Boundary-inclusive point-in-polygon test.
pub fn point_in_polygon(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if orient(a, b, p) == 0.0 && on_segment(a, b, p) {
            return true;
        }
    }
    // crossing number
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Rasterize a quadrilateral: a pixel is foreground when its center (integer
/// coordinates) lies inside or on the polygon. Pixels outside `shape` are clipped.
pub fn rasterize_quadrilateral(
    corners: &[Point; 4],
    shape: (usize, usize),
) -> Result<Mask2, GeometryError> {
    rasterize_polygon(corners, shape)
}

pub fn rasterize_polygon(poly: &[Point], shape: (usize, usize)) -> Result<Mask2, GeometryError> {
    let area = signed_area(poly);
    if area.abs() < 1e-12 {
        return Err(GeometryError::DegeneratePolygon { area });
    }
    let (h, w) = shape;
    let mut mask = Array2::from_elem((h, w), false);
    if h == 0 || w == 0 {
        return Ok(mask);
    }
    let min_x = poly.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = poly.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = poly.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = poly.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let x0 = min_x.ceil().max(0.0) as usize;
    let y0 = min_y.ceil().max(0.0) as usize;
    if max_x < 0.0 || max_y < 0.0 {
        return Ok(mask);
    }
    let x1 = (max_x.floor() as usize).min(w - 1);
    let y1 = (max_y.floor() as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if point_in_polygon(poly, Point::new(x as f64, y as f64)) {
                mask[[y, x]] = true;
            }
        }
    }
    Ok(mask)
}

/// Least-squares polynomial `x = f(y)` through spine centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpineCurve {
    pub degree: usize,
    /// `coeffs[k]` multiplies `y^k`.
    pub coeffs: Vec<f64>,
    pub rms_residual: f64,
    pub support: usize,
}

impl SpineCurve {
    pub fn eval(&self, y: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * y + c)
    }
}

pub fn fit_spine_curve(centers: &[Point], degree: usize) -> Result<SpineCurve, GeometryError> {
    let needed = degree + 1;
    if centers.len() < needed {
        return Err(GeometryError::InsufficientPoints {
            needed,
            degree,
            got: centers.len(),
        });
    }
    let mut ys: Vec<f64> = centers.iter().map(|p| p.y).collect();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    if ys.len() < needed {
        return Err(GeometryError::RankDeficient {
            distinct: ys.len(),
            degree,
        });
    }

    // Columns are equilibrated to unit norm so that y^2 at image scale does not
    // swamp the constant term; the scaling is undone on the solution.
    let n = centers.len();
    let mut a = DMatrix::<f64>::zeros(n, needed);
    for (i, p) in centers.iter().enumerate() {
        let mut v = 1.0;
        for k in 0..needed {
            a[(i, k)] = v;
            v *= p.y;
        }
    }
    let mut scales = vec![1.0; needed];
    for (k, s) in scales.iter_mut().enumerate() {
        let norm = a.column(k).norm();
        if norm > 0.0 {
            *s = norm;
            a.column_mut(k).unscale_mut(norm);
        }
    }
    let b = DVector::from_iterator(n, centers.iter().map(|p| p.x));
    let qr = a.clone().qr();
    let r = qr.r();
    let max_diag = (0..needed).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    if (0..needed).any(|k| r[(k, k)].abs() <= 1e-12 * max_diag.max(1.0)) {
        return Err(GeometryError::RankDeficient {
            distinct: ys.len(),
            degree,
        });
    }
    let qtb = qr.q().transpose() * &b;
    let sol = r
        .solve_upper_triangular(&qtb)
        .ok_or(GeometryError::RankDeficient {
            distinct: ys.len(),
            degree,
        })?;
    let coeffs: Vec<f64> = sol.iter().zip(&scales).map(|(c, s)| c / s).collect();
    let mut curve = SpineCurve {
        degree,
        coeffs,
        rms_residual: 0.0,
        support: n,
    };
    let ss: f64 = centers
        .iter()
        .map(|p| {
            let r = p.x - curve.eval(p.y);
            r * r
        })
        .sum();
    curve.rms_residual = (ss / n as f64).sqrt();
    Ok(curve)
}

/// Horizontal distance `|x - f(y)|` from a point to the curve.
pub fn curve_distance(curve: &SpineCurve, p: Point) -> f64 {
    (p.x - curve.eval(p.y)).abs()
}

/// First derivatives along columns (`gx`) and rows (`gy`): central differences
/// inside, one-sided differences on the border.
pub fn image_gradients(m: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>), GeometryError> {
    let (h, w) = m.dim();
    if h < 2 || w < 2 {
        return Err(GeometryError::TooSmall { rows: h, cols: w });
    }
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            gx[[y, x]] = if x == 0 {
                m[[y, 1]] - m[[y, 0]]
            } else if x == w - 1 {
                m[[y, w - 1]] - m[[y, w - 2]]
            } else {
                (m[[y, x + 1]] - m[[y, x - 1]]) / 2.0
            };
            gy[[y, x]] = if y == 0 {
                m[[1, x]] - m[[0, x]]
            } else if y == h - 1 {
                m[[h - 1, x]] - m[[h - 2, x]]
            } else {
                (m[[y + 1, x]] - m[[y - 1, x]]) / 2.0
            };
        }
    }
    Ok((gx, gy))
}

/// Adjoint of [`image_gradients`]: accumulates `Dxᵀ·ax + Dyᵀ·ay` into a new array.
pub fn image_gradients_adjoint(ax: &Array2<f64>, ay: &Array2<f64>) -> Array2<f64> {
    let (h, w) = ax.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let g = ax[[y, x]];
            if x == 0 {
                out[[y, 1]] += g;
                out[[y, 0]] -= g;
            } else if x == w - 1 {
                out[[y, w - 1]] += g;
                out[[y, w - 2]] -= g;
            } else {
                out[[y, x + 1]] += g / 2.0;
                out[[y, x - 1]] -= g / 2.0;
            }
            let g = ay[[y, x]];
            if y == 0 {
                out[[1, x]] += g;
                out[[0, x]] -= g;
            } else if y == h - 1 {
                out[[h - 1, x]] += g;
                out[[h - 2, x]] -= g;
            } else {
                out[[y + 1, x]] += g / 2.0;
                out[[y - 1, x]] -= g / 2.0;
            }
        }
    }
    out
}
