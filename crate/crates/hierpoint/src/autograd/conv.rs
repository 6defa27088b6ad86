//! Convolution, transposed convolution, and fixed-factor upsampling.
//!
//! Convolutions go through im2col + GEMM. Backward recomputes the column
//! matrix instead of caching it, trading a little compute for a much smaller
//! tape.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, ArrayView2, Ix3, IxDyn};

use super::{Arr, BackFn, Graph, Var};

fn view2(a: &Arr, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape(
        (rows, cols),
        a.as_slice().expect("tensor must be standard layout"),
    )
    .expect("view2 shape")
}

/// Unfold `[cin,h,w]` into `[cin*kh*kw, ho*wo]` columns.
pub fn im2col(
    x: &Arr,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("3-d input");
    let (cin, h, w) = x3.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let out_base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = ci * h * w + iy as usize * w;
                    let dst = out_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[dst + ox] = xs[in_base + ix as usize];
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: fold `[cin*kh*kw, ho*wo]` columns back into a
/// `[cin,h,w]` map, accumulating overlaps.
pub fn col2im(
    cols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Arr {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(cols.dim(), (cin * kh * kw, ho * wo));
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[cin, h, w]));
    let os = out.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src_base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let out_base = ci * h * w + iy as usize * w;
                    let src = src_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        os[out_base + ix as usize] += cs[src + ox];
                    }
                }
            }
        }
    }
    out
}

impl Graph {
    /// 2-d convolution: `x [cin,h,w]`, `w [cout,cin,kh,kw]`, `b [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let bv = self.value_arc(b);
        let ws = wv.shape().to_vec();
        let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let xs = xv.shape().to_vec();
        assert_eq!(xs[0], cin, "conv2d: input channels");
        let (h, wdt) = (xs[1], xs[2]);
        let (cols, ho, wo) = im2col(&xv, kh, kw, stride, pad);
        let w_mat = view2(&wv, cout, cin * kh * kw);
        let mut out_mat = w_mat.dot(&cols);
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut row, &bias) in out_mat.rows_mut().into_iter().zip(b1.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let out = out_mat
            .into_dyn()
            .into_shape_with_order(IxDyn(&[cout, ho, wo]))
            .unwrap();
        let (rx, rw, rb) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(b),
        );
        let rq = rx || rw || rb;
        let (xi, wi, bi) = (x.0, w.0, b.0);
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let xv = Arc::clone(&xv);
            let wv = Arc::clone(&wv);
            Box::new(move |g, sink| {
                let g_mat = view2(g, cout, ho * wo);
                if rb {
                    let db = g_mat.sum_axis(ndarray::Axis(1));
                    sink.add(bi, db.into_dyn());
                }
                if rw {
                    let (cols, _, _) = im2col(&xv, kh, kw, stride, pad);
                    let dw = g_mat.dot(&cols.t());
                    sink.add(
                        wi,
                        dw.into_dyn()
                            .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                            .unwrap(),
                    );
                }
                if rx {
                    let w_mat = view2(&wv, cout, cin * kh * kw);
                    let dcols = w_mat.t().dot(&g_mat);
                    let dx = col2im(&dcols, cin, h, wdt, kh, kw, stride, pad);
                    sink.add(xi, dx);
                }
            })
        });
        self.push(out, rq, back)
    }

    /// Transposed 2-d convolution: `x [cin,h,w]`, `w [cin,cout,kh,kw]`,
    /// `b [cout]`. Output spatial size is `(h-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let bv = self.value_arc(b);
        let ws = wv.shape().to_vec();
        let (cin, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let xs = xv.shape().to_vec();
        assert_eq!(xs[0], cin, "conv_transpose2d: input channels");
        let (hi, wi_dim) = (xs[1], xs[2]);
        let ho = (hi - 1) * stride + kh - 2 * pad;
        let wo = (wi_dim - 1) * stride + kw - 2 * pad;
        let x_mat = view2(&xv, cin, hi * wi_dim);
        let w_mat = view2(&wv, cin, cout * kh * kw);
        let cols = w_mat.t().dot(&x_mat); // [cout*kh*kw, hi*wi]
        let mut out = col2im(&cols, cout, ho, wo, kh, kw, stride, pad);
        {
            let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for (mut plane, &bias) in o3.outer_iter_mut().zip(b1.iter()) {
                plane.mapv_inplace(|v| v + bias);
            }
        }
        let (rx, rw, rb) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(b),
        );
        let rq = rx || rw || rb;
        let (xi, wi_id, bi) = (x.0, w.0, b.0);
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let xv = Arc::clone(&xv);
            let wv = Arc::clone(&wv);
            Box::new(move |g, sink| {
                if rb {
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let db: Vec<f64> = g3.outer_iter().map(|p| p.sum()).collect();
                    sink.add(bi, ndarray::Array1::from(db).into_dyn());
                }
                let (g_cols, cho, cwo) = im2col(g, kh, kw, stride, pad);
                debug_assert_eq!((cho, cwo), (hi, wi_dim));
                if rx {
                    let w_mat = view2(&wv, cin, cout * kh * kw);
                    let dx = w_mat.dot(&g_cols);
                    sink.add(
                        xi,
                        dx.into_dyn()
                            .into_shape_with_order(IxDyn(&[cin, hi, wi_dim]))
                            .unwrap(),
                    );
                }
                if rw {
                    let x_mat = view2(&xv, cin, hi * wi_dim);
                    let dw = x_mat.dot(&g_cols.t());
                    sink.add(
                        wi_id,
                        dw.into_dyn()
                            .into_shape_with_order(IxDyn(&[cin, cout, kh, kw]))
                            .unwrap(),
                    );
                }
            })
        });
        self.push(out, rq, back)
    }

    /// Nearest-neighbor upsampling of `[c,h,w]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value_arc(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x3.dim();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, ho, wo]));
        {
            let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        o3[[ci, oy, ox]] = x3[[ci, oy / factor, ox / factor]];
                    }
                }
            }
        }
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut d = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                {
                    let mut d3 = d.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                d3[[ci, oy / factor, ox / factor]] += g3[[ci, oy, ox]];
                            }
                        }
                    }
                }
                sink.add(xi, d);
            })
        });
        self.push(out, rq, back)
    }

    /// Bilinear upsampling of `[c,h,w]` by an integer factor (half-pixel
    /// centers, edges clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value_arc(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x3.dim();
        let (ho, wo) = (h * factor, w * factor);
        let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
            (0..out_len)
                .map(|o| {
                    let src = ((o as f64 + 0.5) / factor as f64 - 0.5)
                        .clamp(0.0, (in_len - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(in_len - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ytaps = taps(ho, h);
        let xtaps = taps(wo, w);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, ho, wo]));
        {
            let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for ci in 0..c {
                for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                        o3[[ci, oy, ox]] = (1.0 - wy) * (1.0 - wx) * x3[[ci, y0, x0]]
                            + (1.0 - wy) * wx * x3[[ci, y0, x1]]
                            + wy * (1.0 - wx) * x3[[ci, y1, x0]]
                            + wy * wx * x3[[ci, y1, x1]];
                    }
                }
            }
        }
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let ytaps = ytaps.clone();
            let xtaps = xtaps.clone();
            Box::new(move |g, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut d = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                {
                    let mut d3 = d.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for ci in 0..c {
                        for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                                let gv = g3[[ci, oy, ox]];
                                d3[[ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * gv;
                                d3[[ci, y0, x1]] += (1.0 - wy) * wx * gv;
                                d3[[ci, y1, x0]] += wy * (1.0 - wx) * gv;
                                d3[[ci, y1, x1]] += wy * wx * gv;
                            }
                        }
                    }
                }
                sink.add(xi, d);
            })
        });
        self.push(out, rq, back)
    }

    /// Per-channel bias add for `[c,h,w]` maps.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value_arc(x);
        let bv = self.value_arc(b);
        let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x3.dim();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        assert_eq!(b1.len(), c);
        let mut out = xv.as_ref().clone();
        {
            let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for (mut plane, &bias) in o3.outer_iter_mut().zip(b1.iter()) {
                plane.mapv_inplace(|v| v + bias);
            }
        }
        let (rx, rb) = (self.requires_grad(x), self.requires_grad(b));
        let rq = rx || rb;
        let (xi, bi) = (x.0, b.0);
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                if rx {
                    sink.add_view(xi, g);
                }
                if rb {
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let db: Vec<f64> = g3.outer_iter().map(|p| p.sum()).collect();
                    sink.add(bi, ndarray::Array1::from(db).into_dyn());
                }
            })
        });
        let _ = (h, w);
        self.push(out, rq, back)
    }
}

#[cfg(test)]
mod tests {
    use super::super::ops::tests::fd_check;
    use super::super::{Arr, Graph, Mode, ParamId, ParamStore};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_arr(rng: &mut ChaCha12Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1 input channel, identity-ish kernel check by hand.
        let x = Arr::from_shape_vec(
            IxDyn(&[1, 3, 3]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let mut w = Arr::zeros(IxDyn(&[1, 1, 3, 3]));
        w[[0, 0, 1, 1]] = 1.0; // center tap only
        let b = Arr::zeros(IxDyn(&[1]));
        let mut g = Graph::new(Mode::Inference);
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let bv = g.constant(b);
        let y = g.conv2d(xv, wv, bv, 1, 1);
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        assert_eq!(g.value(y).as_slice().unwrap(), x.as_slice().unwrap());
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = rand_arr(&mut rng, &[2, 5, 6]);
        let w = rand_arr(&mut rng, &[2, 3, 4, 4]);
        let b = rand_arr(&mut rng, &[3]);
        let mut g = Graph::new(Mode::Inference);
        let xv = g.constant(x);
        let wv = g.constant(w);
        let bv = g.constant(b);
        let y = g.conv_transpose2d(xv, wv, bv, 2, 1);
        assert_eq!(g.value(y).shape(), &[3, 10, 12]);
    }

    #[test]
    fn fd_conv2d_weights_and_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let x = rand_arr(&mut rng, &[3, 6, 5]);
        let w = rand_arr(&mut rng, &[4, 3, 3, 3]);
        let b = rand_arr(&mut rng, &[4]);
        // check d/dw
        let (xc, bc) = (x.clone(), b.clone());
        fd_check(
            move |g, store| {
                let xv = g.constant(xc.clone());
                let wv = g.param(store, ParamId(0));
                let bv = g.constant(bc.clone());
                let y = g.conv2d(xv, wv, bv, 2, 1);
                let z = g.powi(y, 2);
                g.sum_all(z)
            },
            w.clone(),
            1e-5,
            1e-6,
        );
        // check d/dx
        let (wc, bc) = (w, b);
        fd_check(
            move |g, store| {
                let xv = g.param(store, ParamId(0));
                let wv = g.constant(wc.clone());
                let bv = g.constant(bc.clone());
                let y = g.conv2d(xv, wv, bv, 1, 1);
                let z = g.gelu(y);
                g.mean_all(z)
            },
            x,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn fd_conv_transpose_weights_and_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let x = rand_arr(&mut rng, &[3, 4, 4]);
        let w = rand_arr(&mut rng, &[3, 2, 4, 4]);
        let b = rand_arr(&mut rng, &[2]);
        let (xc, bc) = (x.clone(), b.clone());
        fd_check(
            move |g, store| {
                let xv = g.constant(xc.clone());
                let wv = g.param(store, ParamId(0));
                let bv = g.constant(bc.clone());
                let y = g.conv_transpose2d(xv, wv, bv, 2, 1);
                let z = g.powi(y, 2);
                g.sum_all(z)
            },
            w.clone(),
            1e-5,
            1e-6,
        );
        let (wc, bc) = (w, b);
        fd_check(
            move |g, store| {
                let xv = g.param(store, ParamId(0));
                let wv = g.constant(wc.clone());
                let bv = g.constant(bc.clone());
                let y = g.conv_transpose2d(xv, wv, bv, 2, 1);
                let z = g.sigmoid(y);
                g.sum_all(z)
            },
            x,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn fd_upsampling() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let x = rand_arr(&mut rng, &[2, 3, 4]);
        fd_check(
            |g, store| {
                let xv = g.param(store, ParamId(0));
                let y = g.upsample_bilinear(xv, 4);
                let z = g.powi(y, 2);
                g.sum_all(z)
            },
            x.clone(),
            1e-5,
            1e-6,
        );
        fd_check(
            |g, store| {
                let xv = g.param(store, ParamId(0));
                let y = g.upsample_nearest(xv, 2);
                let z = g.powi(y, 3);
                g.sum_all(z)
            },
            x,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn upsample_shapes() {
        let mut g = Graph::new(Mode::Inference);
        let x = g.constant(Arr::zeros(IxDyn(&[7, 8, 9])));
        let y = g.upsample_bilinear(x, 2);
        assert_eq!(g.value(y).shape(), &[7, 16, 18]);
        let z = g.upsample_nearest(y, 4);
        assert_eq!(g.value(z).shape(), &[7, 64, 72]);
    }

    #[test]
    fn parameter_store_roundtrip_keeps_values() {
        let mut store = ParamStore::new();
        let id = store.add("w", Arr::from_elem(IxDyn(&[2, 2]), 0.5));
        assert_eq!(store.name(id), "w");
        store.get_mut(id)[[0, 1]] = 2.0;
        assert_eq!(store.get(id)[[0, 1]], 2.0);
    }
}
