//! Dense conv/resample kernels on (C, H, W) maps.
//!
//! Naive direct loops, parallelized over output channels (forward, weight
//! gradient) or input channels (input gradient). Chunk boundaries are the
//! same in parallel and sequential mode, so outputs are bitwise identical.

use crate::par::for_each_chunk_mut;
use ndarray::{Array1, Array3, Array4};

/// Output spatial size for a same-padded conv: pad = dilation*(k-1)/2.
pub fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize, dilation: usize) -> (usize, usize) {
    let pad = dilation * (k - 1) / 2;
    let span = dilation * (k - 1) + 1;
    let ho = (h + 2 * pad - span) / stride + 1;
    let wo = (w + 2 * pad - span) / stride + 1;
    (ho, wo)
}

pub fn conv2d_fwd(
    x: &Array3<f32>,
    w: &Array4<f32>,
    b: Option<&Array1<f32>>,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Array3<f32> {
    let (cin, h, wd) = x.dim();
    let (cout, cpg, k, k2) = w.dim();
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(cin, cpg * groups, "input channels vs groups mismatch");
    assert_eq!(cout % groups, 0);
    let ocpg = cout / groups;
    let pad = dilation * (k - 1) / 2;
    let (ho, wo) = conv_out_hw(h, wd, k, stride, dilation);

    let xs = x.as_slice().expect("contiguous");
    let ws = w.as_slice().expect("contiguous");
    let mut out = Array3::<f32>::zeros((cout, ho, wo));
    {
        let os = out.as_slice_mut().expect("contiguous");
        for_each_chunk_mut(os, ho * wo, |oc, chunk| {
            let g = oc / ocpg;
            let bias = b.map(|bv| bv[oc]).unwrap_or(0.0);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias;
                    for icl in 0..cpg {
                        let ic = g * cpg + icl;
                        let xbase = ic * h * wd;
                        let wbase = oc * cpg * k * k + icl * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xs[xbase + iy as usize * wd + ix as usize]
                                    * ws[wbase + ky * k + kx];
                            }
                        }
                    }
                    chunk[oy * wo + ox] = acc;
                }
            }
        });
    }
    out
}

pub fn conv2d_bwd_x(
    gout: &Array3<f32>,
    w: &Array4<f32>,
    x_dim: (usize, usize, usize),
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Array3<f32> {
    let (cin, h, wd) = x_dim;
    let (cout, cpg, k, _) = w.dim();
    let ocpg = cout / groups;
    let pad = dilation * (k - 1) / 2;
    let (_, ho, wo) = gout.dim();

    let gs = gout.as_slice().expect("contiguous");
    let ws = w.as_slice().expect("contiguous");
    let mut gx = Array3::<f32>::zeros((cin, h, wd));
    {
        let gxs = gx.as_slice_mut().expect("contiguous");
        for_each_chunk_mut(gxs, h * wd, |ic, chunk| {
            let g = ic / cpg;
            let icl = ic - g * cpg;
            for oc in g * ocpg..(g + 1) * ocpg {
                let gbase = oc * ho * wo;
                let wbase = oc * cpg * k * k + icl * k * k;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = gs[gbase + oy * wo + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                chunk[iy as usize * wd + ix as usize] +=
                                    go * ws[wbase + ky * k + kx];
                            }
                        }
                    }
                }
            }
        });
    }
    gx
}

pub fn conv2d_bwd_w(
    gout: &Array3<f32>,
    x: &Array3<f32>,
    w_dim: (usize, usize, usize, usize),
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Array4<f32> {
    let (cin, h, wd) = x.dim();
    let (cout, cpg, k, _) = w_dim;
    let ocpg = cout / groups;
    assert_eq!(cin, cpg * groups);
    let pad = dilation * (k - 1) / 2;
    let (_, ho, wo) = gout.dim();

    let gs = gout.as_slice().expect("contiguous");
    let xs = x.as_slice().expect("contiguous");
    let mut gw = Array4::<f32>::zeros(w_dim);
    {
        let gws = gw.as_slice_mut().expect("contiguous");
        for_each_chunk_mut(gws, cpg * k * k, |oc, chunk| {
            let g = oc / ocpg;
            let gbase = oc * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = gs[gbase + oy * wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for icl in 0..cpg {
                        let ic = g * cpg + icl;
                        let xbase = ic * h * wd;
                        for ky in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                chunk[icl * k * k + ky * k + kx] +=
                                    go * xs[xbase + iy as usize * wd + ix as usize];
                            }
                        }
                    }
                }
            }
        });
    }
    gw
}

pub fn conv2d_bwd_b(gout: &Array3<f32>) -> Array1<f32> {
    let (cout, _, _) = gout.dim();
    let mut gb = Array1::<f32>::zeros(cout);
    for oc in 0..cout {
        gb[oc] = gout.index_axis(ndarray::Axis(0), oc).sum();
    }
    gb
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x_fwd(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f32>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[[ci, y, xx]];
                out[[ci, 2 * y, 2 * xx]] = v;
                out[[ci, 2 * y, 2 * xx + 1]] = v;
                out[[ci, 2 * y + 1, 2 * xx]] = v;
                out[[ci, 2 * y + 1, 2 * xx + 1]] = v;
            }
        }
    }
    out
}

pub fn upsample2x_bwd(gout: &Array3<f32>) -> Array3<f32> {
    let (c, h2, w2) = gout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                gx[[ci, y, xx]] = gout[[ci, 2 * y, 2 * xx]]
                    + gout[[ci, 2 * y, 2 * xx + 1]]
                    + gout[[ci, 2 * y + 1, 2 * xx]]
                    + gout[[ci, 2 * y + 1, 2 * xx + 1]];
            }
        }
    }
    gx
}
