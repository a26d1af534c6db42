//! Bilinear resampling as fixed linear maps.

use crate::numerics::Tensor;

/// Interpolation weights for resizing a length-`n_in` signal to `n_out`
/// samples with half-pixel centres, clamped at the borders. Row `i` holds
/// the weights of output sample `i`.
pub fn bilinear_1d(n_in: usize, n_out: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n_out, n_in]);
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let t = src - i0 as f64;
        let row = m.row_mut(i);
        row[i0] += 1.0 - t;
        row[i1] += t;
    }
    m
}

/// `(h·w)×(gh·gw)` matrix taking a row-major `gh×gw` map to `h×w`.
pub fn upsample_matrix(gh: usize, gw: usize, h: usize, w: usize) -> Tensor {
    let my = bilinear_1d(gh, h);
    let mx = bilinear_1d(gw, w);
    let mut out = Tensor::zeros(&[h * w, gh * gw]);
    for y in 0..h {
        for x in 0..w {
            let row = out.row_mut(y * w + x);
            for sy in 0..gh {
                let wy = my.at(y, sy);
                if wy == 0.0 {
                    continue;
                }
                for sx in 0..gw {
                    row[sy * gw + sx] = wy * mx.at(x, sx);
                }
            }
        }
    }
    out
}
