//! Periodic tensor-product Catmull–Rom interpolation.

use crate::grid::Grid;
use crate::scalar::Real;

#[inline]
fn catmull_rom_weights<T: Real>(s: T) -> [T; 4] {
    let half = T::lit(0.5);
    let s2 = s * s;
    let s3 = s2 * s;
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let four = T::lit(4.0);
    let five = T::lit(5.0);
    [
        half * (-s3 + two * s2 - s),
        half * (three * s3 - five * s2 + two),
        half * (-three * s3 + four * s2 + s),
        half * (s3 - s2),
    ]
}

/// Interpolates grid samples at arbitrary (periodically wrapped) points.
///
/// With `monotone` set, each result is clipped to the range spanned by the
/// `2^d` nodes of the enclosing cell, which gives a discrete maximum
/// principle.
#[derive(Debug, Clone, Copy)]
pub struct PeriodicCubic {
    grid: Grid,
    pub monotone: bool,
}

impl PeriodicCubic {
    pub fn new(grid: Grid) -> Self {
        PeriodicCubic {
            grid,
            monotone: false,
        }
    }

    pub fn monotone(grid: Grid) -> Self {
        PeriodicCubic {
            grid,
            monotone: true,
        }
    }

    pub fn sample<T: Real>(&self, values: &[T], point: &[T]) -> T {
        let n = self.grid.n as i64;
        let dim = self.grid.dim;
        let inv_h = T::lit(1.0 / self.grid.spacing());
        let mut base = [0i64; 3];
        let mut weights = [[T::zero(); 4]; 3];
        for axis in 0..dim {
            let u = point[axis] * inv_h;
            let fl = u.floor();
            base[axis] = fl.to_i64().unwrap_or(0);
            weights[axis] = catmull_rom_weights(u - fl);
        }
        let wrap = |i: i64| -> usize { i.rem_euclid(n) as usize };
        let nn = self.grid.n;
        let mut acc = T::zero();
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        match dim {
            1 => {
                for a in 0..4 {
                    let v = values[wrap(base[0] + a as i64 - 1)];
                    acc = acc + weights[0][a] * v;
                    if a == 1 || a == 2 {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            2 => {
                for a in 0..4 {
                    let row = wrap(base[0] + a as i64 - 1) * nn;
                    let mut line = T::zero();
                    for b in 0..4 {
                        let v = values[row + wrap(base[1] + b as i64 - 1)];
                        line = line + weights[1][b] * v;
                        if (a == 1 || a == 2) && (b == 1 || b == 2) {
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    acc = acc + weights[0][a] * line;
                }
            }
            _ => {
                for a in 0..4 {
                    let plane = wrap(base[0] + a as i64 - 1) * nn * nn;
                    let mut sheet = T::zero();
                    for b in 0..4 {
                        let row = plane + wrap(base[1] + b as i64 - 1) * nn;
                        let mut line = T::zero();
                        for c in 0..4 {
                            let v = values[row + wrap(base[2] + c as i64 - 1)];
                            line = line + weights[2][c] * v;
                            if (1..=2).contains(&a) && (1..=2).contains(&b) && (1..=2).contains(&c) {
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                        sheet = sheet + weights[1][b] * line;
                    }
                    acc = acc + weights[0][a] * sheet;
                }
            }
        }
        if self.monotone {
            acc.max(lo).min(hi)
        } else {
            acc
        }
    }
}
