//! Index maps for grid rearrangements, consumed by [`Var::gather`].
//!
//! Feature grids are stored as `[h·w × c]` matrices in raster order.
//!
//! [`Var::gather`]: crate::autodiff::Var::gather

use std::rc::Rc;

use crate::autodiff::{RowMap, GATHER_ZERO};

/// Window-major ordering of a grid zero-padded up to multiples of `win`.
///
/// Returns the gather index and the padded size `(hp, wp)`. Windows are laid
/// out in raster order and tokens within a window in raster order.
pub fn window_partition(h: usize, w: usize, win: usize, c: usize) -> (Rc<Vec<usize>>, usize, usize) {
    let hp = h.div_ceil(win) * win;
    let wp = w.div_ceil(win) * win;
    let mut idx = Vec::with_capacity(hp * wp * c);
    for wr in 0..hp / win {
        for wc in 0..wp / win {
            for i in 0..win {
                for j in 0..win {
                    let (r, col) = (wr * win + i, wc * win + j);
                    for k in 0..c {
                        idx.push(if r < h && col < w {
                            (r * w + col) * c + k
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    (Rc::new(idx), hp, wp)
}

/// Inverse of [`window_partition`] with the padding cropped away.
pub fn window_reverse(h: usize, w: usize, win: usize, c: usize) -> Rc<Vec<usize>> {
    let wp = w.div_ceil(win) * win;
    let per_row = wp / win;
    let mut idx = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            let window = (r / win) * per_row + col / win;
            let pos = window * win * win + (r % win) * win + col % win;
            for k in 0..c {
                idx.push(pos * c + k);
            }
        }
    }
    Rc::new(idx)
}

/// 2×2 neighbourhood concatenation: token `(r, c)` of the output holds
/// `[x(2r,2c), x(2r+1,2c), x(2r,2c+1), x(2r+1,2c+1)]`.
pub fn merge_2x2(h: usize, w: usize, c: usize) -> Rc<Vec<usize>> {
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(ho * wo * 4 * c);
    for r in 0..ho {
        for col in 0..wo {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let src = (2 * r + dr) * w + 2 * col + dc;
                idx.extend((0..c).map(|k| src * c + k));
            }
        }
    }
    Rc::new(idx)
}

/// Rearranges `[h·w × s²·ct]` into `[(s·h)·(s·w) × ct]`: the vector of token
/// `(r, c)` fills the `s×s` block at `(s·r, s·c)` in raster order.
pub fn expand_blocks(h: usize, w: usize, ct: usize, s: usize) -> Rc<Vec<usize>> {
    let (ho, wo) = (h * s, w * s);
    let src_c = s * s * ct;
    let mut idx = Vec::with_capacity(ho * wo * ct);
    for r in 0..ho {
        for col in 0..wo {
            let token = (r / s) * w + col / s;
            let sub = (r % s) * s + col % s;
            idx.extend((0..ct).map(|k| token * src_c + sub * ct + k));
        }
    }
    Rc::new(idx)
}

/// Inverse of [`expand_blocks`]: gathers each `s×s` block of a
/// `[H·W × ct]` grid into one token of `s²·ct` values.
pub fn partition_blocks(h: usize, w: usize, ct: usize, s: usize) -> Rc<Vec<usize>> {
    let (ho, wo) = (h / s, w / s);
    let mut idx = Vec::with_capacity(h * w * ct);
    for r in 0..ho {
        for col in 0..wo {
            for i in 0..s {
                for j in 0..s {
                    let src = (s * r + i) * w + s * col + j;
                    idx.extend((0..ct).map(|k| src * ct + k));
                }
            }
        }
    }
    Rc::new(idx)
}

/// Average pooling of `γ×γ` blocks as a row map.
pub fn avg_pool(h: usize, w: usize, gamma: usize) -> Rc<RowMap> {
    let (ho, wo) = (h / gamma, w / gamma);
    let wgt = 1.0 / (gamma * gamma) as f64;
    let rows = (0..ho * wo)
        .map(|o| {
            let (r, c) = (o / wo, o % wo);
            let mut row = Vec::with_capacity(gamma * gamma);
            for i in 0..gamma {
                for j in 0..gamma {
                    row.push(((gamma * r + i) * w + gamma * c + j, wgt));
                }
            }
            row
        })
        .collect();
    Rc::new(RowMap { in_rows: h * w, rows })
}

/// Bilinear resampling between grids, sampling the source at the
/// align-corners-free centre mapping `src = (dst + 0.5)·(in/out) − 0.5`,
/// clamped to the grid, with the tent kernel `max(0, 1 − |a − b|)`.
pub fn bilinear_resize(h: usize, w: usize, ho: usize, wo: usize) -> Rc<RowMap> {
    let coord = |dst: usize, n_in: usize, n_out: usize| -> f64 {
        let s = (dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        s.clamp(0.0, (n_in - 1) as f64)
    };
    let rows = (0..ho * wo)
        .map(|o| {
            let y = coord(o / wo, h, ho);
            let x = coord(o % wo, w, wo);
            crate::autodiff::bilinear_taps(y, x, h, w).collect()
        })
        .collect();
    Rc::new(RowMap { in_rows: h * w, rows })
}
