//! Index maps shared by the patchify, convolution and pooling steps.

use mia_autograd::PAD;

use crate::config::ValidConfig;

/// Flat pixel index (channel-major `(c, y, x)` image layout) of element `k`
/// of patch `n`. Patch vectors are ordered `(c, dy, dx)`.
pub fn patch_pixel(cfg: &ValidConfig, n: usize, k: usize) -> usize {
    let p = cfg.patch_size;
    let s = cfg.image_size;
    let (py, px) = (n / cfg.grid.1, n % cfg.grid.1);
    let c = k / (p * p);
    let (dy, dx) = ((k / p) % p, k % p);
    c * s * s + (py * p + dy) * s + (px * p + dx)
}

/// Gather index turning a `(batch, image_len)` matrix into
/// `(batch * N, patch_dim)` patch rows.
pub fn patchify_index(cfg: &ValidConfig, batch: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * cfg.num_tokens * cfg.patch_dim);
    for b in 0..batch {
        for n in 0..cfg.num_tokens {
            for k in 0..cfg.patch_dim {
                idx.push(b * cfg.image_len + patch_pixel(cfg, n, k));
            }
        }
    }
    idx
}

/// im2col gather index for a 3x3, stride-1, zero-padded convolution over
/// `batch` stacked `(h*w, cin)` feature grids. Output rows are `(b, y, x)`,
/// columns `(ky, kx, c)`.
pub fn conv3x3_index(batch: usize, h: usize, w: usize, cin: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * h * w * 9 * cin);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (yy, xx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                        for c in 0..cin {
                            idx.push(if inside {
                                ((b * h + yy as usize) * w + xx as usize) * cin + c
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Output size of one 2x2/stride-2 average pool; an axis of length 1 stays 1,
/// odd trailing rows/columns are dropped.
pub fn pooled(len: usize) -> usize {
    (len / 2).max(1)
}

/// Row groups for a 2x2 average pool over `batch` stacked `(h, w)` grids.
pub fn pool2x2_groups(batch: usize, h: usize, w: usize) -> (Vec<Vec<usize>>, (usize, usize)) {
    let (oh, ow) = (pooled(h), pooled(w));
    let mut groups = Vec::with_capacity(batch * oh * ow);
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                let mut g = Vec::with_capacity(4);
                for y in (2 * i)..(2 * i + 2).min(h) {
                    for x in (2 * j)..(2 * j + 2).min(w) {
                        g.push((b * h + y) * w + x);
                    }
                }
                groups.push(g);
            }
        }
    }
    (groups, (oh, ow))
}

/// Grid sizes after the first and second pooling of the block-skip CNN.
pub fn cnn_grids(cfg: &ValidConfig) -> [(usize, usize); 3] {
    let g0 = cfg.grid;
    let g1 = (pooled(g0.0), pooled(g0.1));
    let g2 = (pooled(g1.0), pooled(g1.1));
    [g0, g1, g2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_sizes() {
        assert_eq!(pooled(4), 2);
        assert_eq!(pooled(3), 1);
        assert_eq!(pooled(1), 1);
        let (g, dims) = pool2x2_groups(1, 3, 1);
        assert_eq!(dims, (1, 1));
        assert_eq!(g, vec![vec![0, 1]]);
    }

    #[test]
    fn conv_index_center_tap_is_identity() {
        let idx = conv3x3_index(1, 2, 3, 2);
        // center tap (ky=1,kx=1) of position (1,2), channel 1
        let pos = 3 + 2;
        let col = (1 * 3 + 1) * 2 + 1;
        assert_eq!(idx[pos * 18 + col], pos * 2 + 1);
        // top-left tap of position (0,0) is padding
        assert_eq!(idx[0], PAD);
    }
}
