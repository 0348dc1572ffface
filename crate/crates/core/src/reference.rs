//! Direct loop implementations kept as oracles for the optimized kernels.

use crate::geometry::Vec3;
use crate::nn::{Conv3d, Dense};
use crate::tensor::Tensor;

/// Row-by-row `act(x · W + b)` with one f64 accumulator per output.
pub fn dense_forward_naive(layer: &Dense, x: &Tensor) -> Tensor {
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * layer.output);
    for r in 0..rows {
        let xi = x.row(r);
        for o in 0..layer.output {
            let mut acc = layer.bias[o] as f64;
            for (i, &v) in xi.iter().enumerate() {
                acc += v as f64 * layer.weight[i * layer.output + o] as f64;
            }
            out.push(layer.activation.apply(acc) as f32);
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().expect("rank >= 1") = layer.output;
    Tensor::new(dims, out).expect("sized")
}

/// Seven nested loops over a zero-padded `[C, X, Y, Z]` volume.
pub fn conv3d_forward_naive(layer: &Conv3d, x: &Tensor) -> Tensor {
    let d = x.dims();
    let (c, n) = (d[0], [d[1], d[2], d[3]]);
    let (k, s, p) = (layer.kernel, layer.stride, layer.padding);
    let o: Vec<usize> = n.iter().map(|&m| (m + 2 * p - k) / s + 1).collect();
    let at = |i: usize, a: isize, b: isize, cc: isize| -> f64 {
        if a < 0 || b < 0 || cc < 0 || a as usize >= n[0] || b as usize >= n[1] || cc as usize >= n[2] {
            return 0.0;
        }
        x.data()[((i * n[0] + a as usize) * n[1] + b as usize) * n[2] + cc as usize] as f64
    };
    let mut out = Vec::with_capacity(layer.out_ch * o[0] * o[1] * o[2]);
    for oc in 0..layer.out_ch {
        for ox in 0..o[0] {
            for oy in 0..o[1] {
                for oz in 0..o[2] {
                    let mut acc = layer.bias[oc] as f64;
                    for i in 0..c {
                        for a in 0..k {
                            for b in 0..k {
                                for cc in 0..k {
                                    let w = layer.weight[(((oc * c + i) * k + a) * k + b) * k + cc] as f64;
                                    let xa = (ox * s + a) as isize - p as isize;
                                    let xb = (oy * s + b) as isize - p as isize;
                                    let xc = (oz * s + cc) as isize - p as isize;
                                    acc += w * at(i, xa, xb, xc);
                                }
                            }
                        }
                    }
                    out.push(layer.activation.apply(acc) as f32);
                }
            }
        }
    }
    Tensor::new(vec![layer.out_ch, o[0], o[1], o[2]], out).expect("sized")
}

/// Linear scan for the closest point; ties go to the lower index.
pub fn nearest_naive(points: &[Vec3], q: &Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}
