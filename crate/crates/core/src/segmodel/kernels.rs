//! Channels-last 3x3x3 convolution kernels, zero padding, stride 1.
//!
//! Activations are `[voxel][channel]` with voxels in `(h, w, d)` row-major
//! order. Every kernel loops over the 27 offsets outermost and over valid
//! `(h, w)` rows and a contiguous `d` run innermost, so no bounds checks are
//! needed in the hot loop.

use super::{Real, HIDDEN};

pub(crate) const TAPS: usize = 27;

/// Offsets in `(dh, dw, dd)`, tap index `((dh + 1) * 3 + (dw + 1)) * 3 + (dd + 1)`.
pub(crate) fn taps() -> impl Iterator<Item = (usize, [isize; 3])> {
    (0..TAPS).map(|t| (t, [(t / 9) as isize - 1, ((t / 3) % 3) as isize - 1, (t % 3) as isize - 1]))
}

/// Output indices `o` along an axis of length `n` for which `o + delta` is in range.
fn valid(n: usize, delta: isize) -> std::ops::Range<usize> {
    match delta {
        -1 => 1.min(n)..n,
        0 => 0..n,
        _ => 0..n.saturating_sub(1),
    }
}

/// Calls `f(out_row, in_row, d_out_range, dd)` for every valid `(h, w)` row pair of a tap.
#[inline(always)]
fn for_rows(shape: [usize; 3], off: [isize; 3], mut f: impl FnMut(usize, usize, std::ops::Range<usize>)) {
    let [h, w, d] = shape;
    let dr = valid(d, off[2]);
    for i in valid(h, off[0]) {
        let si = (i as isize + off[0]) as usize;
        for j in valid(w, off[1]) {
            let sj = (j as isize + off[1]) as usize;
            f((i * w + j) * d, (si * w + sj) * d, dr.clone());
        }
    }
}

#[inline(always)]
fn shifted(d: usize, dd: isize) -> usize {
    (d as isize + dd) as usize
}

/// First layer: single input channel to `HIDDEN` channels.
pub(crate) fn conv1_forward<T: Real>(input: &[T], shape: [usize; 3], w: &[T], b: &[T], out: &mut [T]) {
    for o in out.chunks_exact_mut(HIDDEN) {
        o.copy_from_slice(b);
    }
    for (t, off) in taps() {
        let wt: [T; HIDDEN] = w[t * HIDDEN..(t + 1) * HIDDEN].try_into().unwrap();
        for_rows(shape, off, |ro, ri, dr| {
            for d in dr {
                let x = input[ri + shifted(d, off[2])];
                let o: &mut [T; HIDDEN] = (&mut out[(ro + d) * HIDDEN..(ro + d + 1) * HIDDEN]).try_into().unwrap();
                for c in 0..HIDDEN {
                    o[c] += x * wt[c];
                }
            }
        });
    }
}

/// Second layer: `HIDDEN` to `HIDDEN` channels, weights `[tap][ci][co]`.
pub(crate) fn conv2_forward<T: Real>(input: &[T], shape: [usize; 3], w: &[T], b: &[T], out: &mut [T]) {
    for o in out.chunks_exact_mut(HIDDEN) {
        o.copy_from_slice(b);
    }
    for (t, off) in taps() {
        let mut wt = [[T::zero(); HIDDEN]; HIDDEN];
        for ci in 0..HIDDEN {
            wt[ci].copy_from_slice(&w[(t * HIDDEN + ci) * HIDDEN..(t * HIDDEN + ci + 1) * HIDDEN]);
        }
        for_rows(shape, off, |ro, ri, dr| {
            for d in dr {
                let s = ri + shifted(d, off[2]);
                let x: [T; HIDDEN] = input[s * HIDDEN..(s + 1) * HIDDEN].try_into().unwrap();
                let o: &mut [T; HIDDEN] = (&mut out[(ro + d) * HIDDEN..(ro + d + 1) * HIDDEN]).try_into().unwrap();
                for ci in 0..HIDDEN {
                    for co in 0..HIDDEN {
                        o[co] += x[ci] * wt[ci][co];
                    }
                }
            }
        });
    }
}

/// Gradients of the second layer: weights, bias, and the layer input.
pub(crate) fn conv2_backward<T: Real>(
    input: &[T],
    grad_out: &[T],
    shape: [usize; 3],
    w: &[T],
    gw: &mut [T],
    gb: &mut [T],
    grad_in: &mut [T],
) {
    for g in grad_out.chunks_exact(HIDDEN) {
        for c in 0..HIDDEN {
            gb[c] += g[c];
        }
    }
    for (t, off) in taps() {
        // transposed weights [co][ci] for the input-gradient pass
        let mut wt = [[T::zero(); HIDDEN]; HIDDEN];
        for ci in 0..HIDDEN {
            for co in 0..HIDDEN {
                wt[co][ci] = w[(t * HIDDEN + ci) * HIDDEN + co];
            }
        }
        let mut acc = [[T::zero(); HIDDEN]; HIDDEN];
        for_rows(shape, off, |ro, ri, dr| {
            for d in dr {
                let s = ri + shifted(d, off[2]);
                let g: [T; HIDDEN] = grad_out[(ro + d) * HIDDEN..(ro + d + 1) * HIDDEN].try_into().unwrap();
                let x: [T; HIDDEN] = input[s * HIDDEN..(s + 1) * HIDDEN].try_into().unwrap();
                for ci in 0..HIDDEN {
                    for co in 0..HIDDEN {
                        acc[ci][co] += x[ci] * g[co];
                    }
                }
                let gi: &mut [T; HIDDEN] = (&mut grad_in[s * HIDDEN..(s + 1) * HIDDEN]).try_into().unwrap();
                for co in 0..HIDDEN {
                    for ci in 0..HIDDEN {
                        gi[ci] += g[co] * wt[co][ci];
                    }
                }
            }
        });
        for ci in 0..HIDDEN {
            for co in 0..HIDDEN {
                gw[(t * HIDDEN + ci) * HIDDEN + co] += acc[ci][co];
            }
        }
    }
}

/// Weight and bias gradients of the first layer (the network input needs no gradient).
pub(crate) fn conv1_backward<T: Real>(input: &[T], grad_out: &[T], shape: [usize; 3], gw: &mut [T], gb: &mut [T]) {
    for g in grad_out.chunks_exact(HIDDEN) {
        for c in 0..HIDDEN {
            gb[c] += g[c];
        }
    }
    for (t, off) in taps() {
        let mut acc = [T::zero(); HIDDEN];
        for_rows(shape, off, |ro, ri, dr| {
            for d in dr {
                let x = input[ri + shifted(d, off[2])];
                let g: [T; HIDDEN] = grad_out[(ro + d) * HIDDEN..(ro + d + 1) * HIDDEN].try_into().unwrap();
                for c in 0..HIDDEN {
                    acc[c] += x * g[c];
                }
            }
        });
        for c in 0..HIDDEN {
            gw[t * HIDDEN + c] += acc[c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation with explicit bounds checks.
    fn naive_conv(input: &[f64], cin: usize, shape: [usize; 3], w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let [h, wd, d] = shape;
        let mut out = vec![0.0; h * wd * d * cout];
        for i in 0..h {
            for j in 0..wd {
                for k in 0..d {
                    for co in 0..cout {
                        let mut s = b[co];
                        for (t, off) in taps() {
                            let (si, sj, sk) = (i as isize + off[0], j as isize + off[1], k as isize + off[2]);
                            if si < 0 || sj < 0 || sk < 0 || si >= h as isize || sj >= wd as isize || sk >= d as isize {
                                continue;
                            }
                            let v = (si as usize * wd + sj as usize) * d + sk as usize;
                            for ci in 0..cin {
                                s += input[v * cin + ci] * w[(t * cin + ci) * cout + co];
                            }
                        }
                        out[((i * wd + j) * d + k) * cout + co] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    #[test]
    fn conv_kernels_match_naive() {
        for shape in [[3, 4, 5], [1, 1, 1], [2, 1, 3], [5, 5, 5]] {
            let n: usize = shape.iter().product();
            let x1 = pseudo(n, 1);
            let w1 = pseudo(TAPS * HIDDEN, 2);
            let b1 = pseudo(HIDDEN, 3);
            let mut out = vec![0.0; n * HIDDEN];
            conv1_forward(&x1, shape, &w1, &b1, &mut out);
            let want = naive_conv(&x1, 1, shape, &w1, &b1, HIDDEN);
            assert!(out.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));

            let x2 = pseudo(n * HIDDEN, 4);
            let w2 = pseudo(TAPS * HIDDEN * HIDDEN, 5);
            let mut out = vec![0.0; n * HIDDEN];
            conv2_forward(&x2, shape, &w2, &b1, &mut out);
            let want = naive_conv(&x2, HIDDEN, shape, &w2, &b1, HIDDEN);
            assert!(out.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
}
