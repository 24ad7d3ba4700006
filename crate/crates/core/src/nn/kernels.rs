use super::Real;

/// Output extent of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel || stride == 0 {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

/// Unfolds `x` (`[C, H, W]`) into `cols` (`[C·k·k, Ho·Wo]`).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), c * k * k * plane);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[ii as usize * w..(ii as usize + 1) * w];
                    if stride == 1 {
                        // Contiguous interior copy with zero-padded edges.
                        let off = kj as isize - pad as isize;
                        for (oj, o) in out_row.iter_mut().enumerate() {
                            let jj = oj as isize + off;
                            *o = if jj < 0 || jj >= w as isize {
                                T::zero()
                            } else {
                                src_row[jj as usize]
                            };
                        }
                    } else {
                        for (oj, o) in out_row.iter_mut().enumerate() {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            *o = if jj < 0 || jj >= w as isize {
                                T::zero()
                            } else {
                                src_row[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `x`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    x: &mut [T],
) {
    let plane = ho * wo;
    for ch in 0..c {
        let dst = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[ii as usize * w..(ii as usize + 1) * w];
                    let src_row = &src[oi * wo..(oi + 1) * wo];
                    for (oj, &v) in src_row.iter().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst_row[jj as usize] = dst_row[jj as usize] + v;
                        }
                    }
                }
            }
        }
    }
}
