//! Differentiable operations. Each op computes its value eagerly and, in
//! training mode, records a closure that maps the output gradient to parent
//! gradients.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix3, IxDyn, Zip};

use super::{Arr, BackFn, Graph, Var};

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let out = av.as_ref() + bv.as_ref();
        let rq = self.requires_grad(a) || self.requires_grad(b);
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let (ai, bi) = (a.0, b.0);
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                if ra {
                    sink.add_view(ai, g);
                }
                if rb {
                    sink.add_view(bi, g);
                }
            })
        });
        self.push(out, rq, back)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let out = av.as_ref() - bv.as_ref();
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let rq = ra || rb;
        let (ai, bi) = (a.0, b.0);
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                if ra {
                    sink.add_view(ai, g);
                }
                if rb {
                    sink.add(bi, g.mapv(|x| -x));
                }
            })
        });
        self.push(out, rq, back)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let out = av.as_ref() * bv.as_ref();
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let rq = ra || rb;
        let (ai, bi) = (a.0, b.0);
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let av = Arc::clone(&av);
            let bv = Arc::clone(&bv);
            Box::new(move |g, sink| {
                if ra {
                    sink.add(ai, g * bv.as_ref());
                }
                if rb {
                    sink.add(bi, g * av.as_ref());
                }
            })
        });
        self.push(out, rq, back)
    }

    /// `k * a + c` elementwise with scalar constants.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(|x| k * x + c);
        let rq = self.requires_grad(a);
        let ai = a.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| sink.add(ai, g.mapv(|x| k * x)))
        });
        self.push(out, rq, back)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let out = xv.mapv(|v| v.max(0.0));
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let xv = Arc::clone(&xv);
            Box::new(move |g, sink| {
                let mut d = g.clone();
                Zip::from(&mut d).and(xv.as_ref()).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                sink.add(xi, d);
            })
        });
        self.push(out, rq, back)
    }

    /// Gaussian error linear unit (tanh approximation; smooth everywhere,
    /// which keeps finite-difference checks clean).
    pub fn gelu(&mut self, x: Var) -> Var {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let xv = self.value_arc(x);
        let out = xv.mapv(|v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()));
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let xv = Arc::clone(&xv);
            Box::new(move |g, sink| {
                let mut d = g.clone();
                Zip::from(&mut d).and(xv.as_ref()).for_each(|d, &v| {
                    let t = (C * (v + A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v);
                    *d *= 0.5 * (1.0 + t) + 0.5 * v * dt;
                });
                sink.add(xi, d);
            })
        });
        self.push(out, rq, back)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let out = xv.mapv(stable_sigmoid);
        let rq = self.requires_grad(x);
        let xi = x.0;
        let out_arc = Arc::new(out);
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let s = Arc::clone(&out_arc);
            Box::new(move |g, sink| {
                let mut d = g.clone();
                Zip::from(&mut d).and(s.as_ref()).for_each(|d, &s| {
                    *d *= s * (1.0 - s);
                });
                sink.add(xi, d);
            })
        });
        self.push_arc(out_arc, rq, back)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let out = Arc::new(xv.mapv(f64::exp));
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let y = Arc::clone(&out);
            Box::new(move |g, sink| sink.add(xi, g * y.as_ref()))
        });
        self.push_arc(out, rq, back)
    }

    /// `ln(1 + e^x)`, numerically stable.
    pub fn softplus(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let out = xv.mapv(stable_softplus);
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let xv = Arc::clone(&xv);
            Box::new(move |g, sink| {
                let mut d = g.clone();
                Zip::from(&mut d).and(xv.as_ref()).for_each(|d, &x| {
                    *d *= stable_sigmoid(x);
                });
                sink.add(xi, d);
            })
        });
        self.push(out, rq, back)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let out = xv.mapv(f64::abs);
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let xv = Arc::clone(&xv);
            Box::new(move |g, sink| {
                let mut d = g.clone();
                Zip::from(&mut d).and(xv.as_ref()).for_each(|d, &x| {
                    *d *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                });
                sink.add(xi, d);
            })
        });
        self.push(out, rq, back)
    }

    /// Integer power, `n >= 1`.
    pub fn powi(&mut self, x: Var, n: i32) -> Var {
        assert!(n >= 1);
        let xv = self.value_arc(x);
        let out = xv.mapv(|v| v.powi(n));
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let xv = Arc::clone(&xv);
            Box::new(move |g, sink| {
                let mut d = g.clone();
                Zip::from(&mut d).and(xv.as_ref()).for_each(|d, &x| {
                    *d *= n as f64 * x.powi(n - 1);
                });
                sink.add(xi, d);
            })
        });
        self.push(out, rq, back)
    }

    // ---- matrix ----------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let a2 = as2(&av);
        let b2 = as2(&bv);
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let rq = ra || rb;
        let (ai, bi) = (a.0, b.0);
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let av = Arc::clone(&av);
            let bv = Arc::clone(&bv);
            Box::new(move |g, sink| {
                let g2 = as2(g);
                if ra {
                    sink.add(ai, g2.dot(&as2(&bv).t()).into_dyn());
                }
                if rb {
                    sink.add(bi, as2(&av).t().dot(&g2).into_dyn());
                }
            })
        });
        self.push(out, rq, back)
    }

    /// Fused affine map `x·w + b` for `x: [t,din]`, `w: [din,dout]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let bv = self.value_arc(b);
        let x2 = as2(&xv);
        let w2 = as2(&wv);
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("bias");
        let mut out = x2.dot(&w2);
        out += &b1;
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
                let g2 = as2(g);
                if rx {
                    sink.add(xi, g2.dot(&as2(&wv).t()).into_dyn());
                }
                if rw {
                    sink.add(wi, as2(&xv).t().dot(&g2).into_dyn());
                }
                if rb {
                    sink.add(bi, g2.sum_axis(Axis(0)).into_dyn());
                }
            })
        });
        self.push(out.into_dyn(), rq, back)
    }

    pub fn transpose2(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let out = as2(&xv).t().to_owned().into_dyn();
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| sink.add(xi, as2(g).t().to_owned().into_dyn()))
        });
        self.push(out, rq, back)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value_arc(x);
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = xv
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let rq = self.requires_grad(x);
        let xi = x.0;
        let in_shape: Vec<usize> = xv.shape().to_vec();
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let d = g
                    .clone()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape grad");
                sink.add(xi, d);
            })
        });
        self.push(out, rq, back)
    }

    /// `[c,h,w] -> [h*w, c]` so per-pixel losses can use row ops.
    pub fn channels_to_rows(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().expect("3-d tensor");
        let (c, h, w) = x3.dim();
        let mut out = Array2::<f64>::zeros((h * w, c));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[hi * w + wi, ci]] = x3[[ci, hi, wi]];
                }
            }
        }
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut d = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                {
                    let mut d3 = d.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                d3[[ci, hi, wi]] = g2[[hi * w + wi, ci]];
                            }
                        }
                    }
                }
                sink.add(xi, d);
            })
        });
        self.push(out.into_dyn(), rq, back)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value_arc(x);
        let x2 = as2(&xv);
        let (t, d) = x2.dim();
        assert!(start + len <= d);
        let out = x2.slice(ndarray::s![.., start..start + len]).to_owned();
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((t, d));
                dx.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
                sink.add(xi, dx.into_dyn());
            })
        });
        self.push(out.into_dyn(), rq, back)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|&p| self.value_arc(p)).collect();
        let t = as2(&vals[0]).nrows();
        let widths: Vec<usize> = vals.iter().map(|v| as2(v).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::<f64>::zeros((t, total));
        let mut off = 0;
        for (v, &w) in vals.iter().zip(&widths) {
            out.slice_mut(ndarray::s![.., off..off + w]).assign(&as2(v));
            off += w;
        }
        let reqs: Vec<bool> = parts.iter().map(|&p| self.requires_grad(p)).collect();
        let rq = reqs.iter().any(|&r| r);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut off = 0;
                for ((&id, &w), &r) in ids.iter().zip(&widths).zip(&reqs) {
                    if r {
                        let d = g2.slice(ndarray::s![.., off..off + w]).to_owned();
                        sink.add(id, d.into_dyn());
                    }
                    off += w;
                }
            })
        });
        self.push(out.into_dyn(), rq, back)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|&p| self.value_arc(p)).collect();
        let d = as2(&vals[0]).ncols();
        let heights: Vec<usize> = vals.iter().map(|v| as2(v).nrows()).collect();
        let total: usize = heights.iter().sum();
        let mut out = Array2::<f64>::zeros((total, d));
        let mut off = 0;
        for (v, &h) in vals.iter().zip(&heights) {
            out.slice_mut(ndarray::s![off..off + h, ..]).assign(&as2(v));
            off += h;
        }
        let reqs: Vec<bool> = parts.iter().map(|&p| self.requires_grad(p)).collect();
        let rq = reqs.iter().any(|&r| r);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut off = 0;
                for ((&id, &h), &r) in ids.iter().zip(&heights).zip(&reqs) {
                    if r {
                        let dpart = g2.slice(ndarray::s![off..off + h, ..]).to_owned();
                        sink.add(id, dpart.into_dyn());
                    }
                    off += h;
                }
            })
        });
        self.push(out.into_dyn(), rq, back)
    }

    // ---- normalization & attention helpers --------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let x2 = as2(&xv);
        let mut out = x2.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let out = Arc::new(out.into_dyn());
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let s = Arc::clone(&out);
            Box::new(move |g, sink| {
                let s2 = as2(&s);
                let g2 = as2(g);
                let mut d = g2.to_owned();
                for (mut drow, (grow, srow)) in
                    d.rows_mut().into_iter().zip(g2.rows().into_iter().zip(s2.rows()))
                {
                    let dot: f64 = grow.iter().zip(srow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut drow).and(&srow).for_each(|d, &s| {
                        *d = (*d - dot) * s;
                    });
                }
                sink.add(xi, d.into_dyn());
            })
        });
        self.push_arc(out, rq, back)
    }

    /// Layer normalization over the last axis of a `[t,d]` tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value_arc(x);
        let gv = self.value_arc(gamma);
        let bv = self.value_arc(beta);
        let x2 = as2(&xv);
        let (t, d) = x2.dim();
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut xhat = Array2::<f64>::zeros((t, d));
        let mut inv_std = Array1::<f64>::zeros(t);
        for (i, row) in x2.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * istd;
            }
        }
        let mut out = Array2::<f64>::zeros((t, d));
        Zip::from(&mut out)
            .and(&xhat)
            .and_broadcast(&g1)
            .and_broadcast(&b1)
            .for_each(|o, &xh, &g, &b| *o = g * xh + b);
        let (rx, rg, rb) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let rq = rx || rg || rb;
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let gv = Arc::clone(&gv);
            let xhat = Arc::new(xhat);
            let inv_std = Arc::new(inv_std);
            Box::new(move |g, sink| {
                let g2 = as2(g);
                let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if rb {
                    sink.add(bi, g2.sum_axis(Axis(0)).into_dyn());
                }
                if rg {
                    let mut dg = Array1::<f64>::zeros(d);
                    for (grow, xrow) in g2.rows().into_iter().zip(xhat.rows()) {
                        Zip::from(&mut dg).and(&grow).and(&xrow).for_each(|dg, &g, &x| {
                            *dg += g * x;
                        });
                    }
                    sink.add(gi, dg.into_dyn());
                }
                if rx {
                    let mut dx = Array2::<f64>::zeros((t, d));
                    for i in 0..t {
                        let grow = g2.row(i);
                        let xrow = xhat.row(i);
                        // dxhat = g * gamma
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * g1[j];
                            m1 += dxh;
                            m2 += dxh * xrow[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let istd = inv_std[i];
                        for j in 0..d {
                            let dxh = grow[j] * g1[j];
                            dx[[i, j]] = (dxh - m1 - xrow[j] * m2) * istd;
                        }
                    }
                    sink.add(xi, dx.into_dyn());
                }
            })
        });
        self.push(out.into_dyn(), rq, back)
    }

    // ---- reductions & losses ----------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let s = xv.sum();
        let rq = self.requires_grad(x);
        let xi = x.0;
        let shape: Vec<usize> = xv.shape().to_vec();
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let gs = g[[0]];
                sink.add(xi, ArrayD::from_elem(IxDyn(&shape), gs));
            })
        });
        self.push(Arr::from_elem(IxDyn(&[1]), s), rq, back)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Mean cross-entropy over rows with `Some(target)`; returns 0 when no
    /// row is labeled. Logits `[n,v]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value_arc(logits);
        let l2 = as2(&lv);
        let (n, v) = l2.dim();
        assert_eq!(n, targets.len(), "cross_entropy_rows: target count");
        let labeled: Vec<(usize, usize)> = targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (i, t)))
            .collect();
        let count = labeled.len();
        let mut loss = 0.0;
        for &(i, t) in &labeled {
            debug_assert!(t < v);
            let row = l2.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        if count > 0 {
            loss /= count as f64;
        }
        let rq = self.requires_grad(logits);
        let li = logits.0;
        let back: Option<BackFn> = (rq && count > 0).then(|| -> BackFn {
            let lv = Arc::clone(&lv);
            let labeled = labeled.clone();
            Box::new(move |g, sink| {
                let gs = g[[0]] / count as f64;
                let l2 = as2(&lv);
                let mut d = Array2::<f64>::zeros((n, v));
                for &(i, t) in &labeled {
                    let row = l2.row(i);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for e in &mut exps {
                        *e /= sum;
                    }
                    for j in 0..v {
                        d[[i, j]] = gs * exps[j];
                    }
                    d[[i, t]] -= gs;
                }
                sink.add(li, d.into_dyn());
            })
        });
        self.push(Arr::from_elem(IxDyn(&[1]), loss), rq && count > 0, back)
    }

    /// Mean binary cross-entropy with logits against a constant target array
    /// of the same shape.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &Arr) -> Var {
        let lv = self.value_arc(logits);
        assert_eq!(lv.shape(), targets.shape(), "bce: shape mismatch");
        let n = lv.len().max(1) as f64;
        let mut loss = 0.0;
        Zip::from(lv.as_ref()).and(targets).for_each(|&z, &t| {
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        });
        loss /= n;
        let rq = self.requires_grad(logits);
        let li = logits.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            let lv = Arc::clone(&lv);
            let targets = targets.clone();
            Box::new(move |g, sink| {
                let gs = g[[0]] / n;
                let mut d = lv.as_ref().clone();
                Zip::from(&mut d).and(&targets).for_each(|d, &t| {
                    *d = gs * (stable_sigmoid(*d) - t);
                });
                sink.add(li, d);
            })
        });
        self.push(Arr::from_elem(IxDyn(&[1]), loss), rq, back)
    }

    // ---- gathers -----------------------------------------------------------

    /// Row lookup `table[ids] -> [n,d]`; used for token/position embeddings.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value_arc(table);
        let t2 = as2(&tv);
        let (rows, d) = t2.dim();
        let mut out = Array2::<f64>::zeros((ids.len(), d));
        for (k, &id) in ids.iter().enumerate() {
            assert!(id < rows, "gather_rows: index {id} out of {rows}");
            out.row_mut(k).assign(&t2.row(id));
        }
        let rq = self.requires_grad(table);
        let ti = table.0;
        let ids_owned: Vec<usize> = ids.to_vec();
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut d_table = Array2::<f64>::zeros((rows, d));
                for (k, &id) in ids_owned.iter().enumerate() {
                    let mut row = d_table.row_mut(id);
                    row += &g2.row(k);
                }
                sink.add(ti, d_table.into_dyn());
            })
        });
        self.push(out.into_dyn(), rq, back)
    }

    /// Gather feature vectors at integer cells of a `[c,h,w]` map -> `[n,c]`.
    pub fn gather_cells(&mut self, x: Var, cells: &[(usize, usize)]) -> Var {
        let xv = self.value_arc(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().expect("3-d map");
        let (c, h, w) = x3.dim();
        let mut out = Array2::<f64>::zeros((cells.len(), c));
        for (k, &(r, col)) in cells.iter().enumerate() {
            assert!(r < h && col < w, "gather_cells: ({r},{col}) out of {h}x{w}");
            for ci in 0..c {
                out[[k, ci]] = x3[[ci, r, col]];
            }
        }
        let rq = self.requires_grad(x);
        let xi = x.0;
        let cells_owned: Vec<(usize, usize)> = cells.to_vec();
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut d = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                {
                    let mut d3 = d.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for (k, &(r, col)) in cells_owned.iter().enumerate() {
                        for ci in 0..c {
                            d3[[ci, r, col]] += g2[[k, ci]];
                        }
                    }
                }
                sink.add(xi, d);
            })
        });
        self.push(out.into_dyn(), rq, back)
    }

    /// Bilinear sample of a `[c,h,w]` map at fractional `(col,row)` grid
    /// coordinates (clamped) -> `[n,c]`. Coordinates are constants; gradients
    /// flow to the map only.
    pub fn bilinear_sample(&mut self, x: Var, points: &[(f64, f64)]) -> Var {
        let xv = self.value_arc(x);
        let x3 = xv.view().into_dimensionality::<Ix3>().expect("3-d map");
        let (c, h, w) = x3.dim();
        let corners: Vec<[(usize, usize, f64); 4]> = points
            .iter()
            .map(|&(px, py)| {
                let fx = px.clamp(0.0, (w - 1) as f64);
                let fy = py.clamp(0.0, (h - 1) as f64);
                let x0 = fx.floor() as usize;
                let y0 = fy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let wx = fx - x0 as f64;
                let wy = fy - y0 as f64;
                [
                    (y0, x0, (1.0 - wy) * (1.0 - wx)),
                    (y0, x1, (1.0 - wy) * wx),
                    (y1, x0, wy * (1.0 - wx)),
                    (y1, x1, wy * wx),
                ]
            })
            .collect();
        let mut out = Array2::<f64>::zeros((points.len(), c));
        for (k, quad) in corners.iter().enumerate() {
            for &(r, col, wgt) in quad {
                if wgt == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    out[[k, ci]] += wgt * x3[[ci, r, col]];
                }
            }
        }
        let rq = self.requires_grad(x);
        let xi = x.0;
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut d = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                {
                    let mut d3 = d.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for (k, quad) in corners.iter().enumerate() {
                        for &(r, col, wgt) in quad {
                            if wgt == 0.0 {
                                continue;
                            }
                            for ci in 0..c {
                                d3[[ci, r, col]] += wgt * g2[[k, ci]];
                            }
                        }
                    }
                }
                sink.add(xi, d);
            })
        });
        self.push(out.into_dyn(), rq, back)
    }

    /// All pairwise differences `a[i] - b[j]` flattened to `[n*m, d]`.
    pub fn outer_diff(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let a2 = as2(&av);
        let b2 = as2(&bv);
        let (n, d) = a2.dim();
        let (m, d2) = b2.dim();
        assert_eq!(d, d2, "outer_diff: feature dims differ");
        let mut out = Array2::<f64>::zeros((n * m, d));
        for i in 0..n {
            for j in 0..m {
                let mut row = out.row_mut(i * m + j);
                Zip::from(&mut row).and(&a2.row(i)).and(&b2.row(j)).for_each(
                    |o, &ai, &bj| *o = ai - bj,
                );
            }
        }
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let rq = ra || rb;
        let (ai_id, bi_id) = (a.0, b.0);
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let g2 = as2(g);
                if ra {
                    let mut da = Array2::<f64>::zeros((n, d));
                    for i in 0..n {
                        for j in 0..m {
                            let mut row = da.row_mut(i);
                            row += &g2.row(i * m + j);
                        }
                    }
                    sink.add(ai_id, da.into_dyn());
                }
                if rb {
                    let mut db = Array2::<f64>::zeros((m, d));
                    for i in 0..n {
                        for j in 0..m {
                            let mut row = db.row_mut(j);
                            Zip::from(&mut row).and(&g2.row(i * m + j)).for_each(|d, &g| {
                                *d -= g;
                            });
                        }
                    }
                    sink.add(bi_id, db.into_dyn());
                }
            })
        });
        self.push(out.into_dyn(), rq, back)
    }

    /// Mean of selected rows per group: `x: [t,d]`, output `[groups.len(), d]`.
    /// Empty groups produce zero rows.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Var {
        let xv = self.value_arc(x);
        let x2 = as2(&xv);
        let (_t, d) = x2.dim();
        let mut out = Array2::<f64>::zeros((groups.len(), d));
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let inv = 1.0 / group.len() as f64;
            for &idx in group {
                let mut row = out.row_mut(gi);
                Zip::from(&mut row).and(&x2.row(idx)).for_each(|o, &v| *o += v * inv);
            }
        }
        let rq = self.requires_grad(x);
        let xi = x.0;
        let t = x2.nrows();
        let groups_owned: Vec<Vec<usize>> = groups.to_vec();
        let back: Option<BackFn> = rq.then(|| -> BackFn {
            Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((t, d));
                for (gi, group) in groups_owned.iter().enumerate() {
                    if group.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / group.len() as f64;
                    for &idx in group {
                        let mut row = dx.row_mut(idx);
                        Zip::from(&mut row).and(&g2.row(gi)).for_each(|d, &g| {
                            *d += g * inv;
                        });
                    }
                }
                sink.add(xi, dx.into_dyn());
            })
        });
        self.push(out.into_dyn(), rq, back)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::super::{Arr, Graph, Mode, ParamStore};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Central finite-difference check of `d loss / d param` for every
    /// element of the single parameter used by `f`.
    pub fn fd_check(
        f: impl Fn(&mut Graph, &ParamStore) -> super::Var,
        init: Arr,
        eps: f64,
        tol: f64,
    ) {
        let mut store = ParamStore::new();
        let pid = store.add("p", init);
        let mut g = Graph::new(Mode::Train);
        let loss = f(&mut g, &store);
        let grads = g.backward(loss);
        let analytic = grads.get(pid).cloned().unwrap_or_else(|| {
            Arr::zeros(store.get(pid).raw_dim())
        });
        let n = store.get(pid).len();
        for idx in 0..n {
            let orig = store.get(pid).as_slice().unwrap()[idx];
            store.get_mut(pid).as_slice_mut().unwrap()[idx] = orig + eps;
            let mut gp = Graph::new(Mode::Inference);
            let lp = f(&mut gp, &store);
            let fp = gp.scalar_value(lp);
            store.get_mut(pid).as_slice_mut().unwrap()[idx] = orig - eps;
            let mut gm = Graph::new(Mode::Inference);
            let lm = f(&mut gm, &store);
            let fm = gm.scalar_value(lm);
            store.get_mut(pid).as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / denom;
            assert!(
                rel < tol,
                "fd mismatch at {idx}: analytic={an}, fd={fd}, rel={rel}"
            );
        }
    }

    fn rand_arr(rng: &mut ChaCha12Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn fd_elementwise_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let init = rand_arr(&mut rng, &[3, 4]);
        fd_check(
            |g, store| {
                let p = g.param(store, super::super::ParamId(0));
                let a = g.gelu(p);
                let b = g.sigmoid(a);
                let c = g.softplus(b);
                let d = g.powi(c, 3);
                let e = g.exp(d);
                g.mean_all(e)
            },
            init,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn fd_matmul_linear() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let init = rand_arr(&mut rng, &[4, 3]);
        let other = rand_arr(&mut rng, &[3, 5]);
        let bias = rand_arr(&mut rng, &[5]);
        fd_check(
            move |g, store| {
                let p = g.param(store, super::super::ParamId(0));
                let w = g.constant(other.clone());
                let b = g.constant(bias.clone());
                let y = g.linear(p, w, b);
                let z = g.relu(y);
                g.sum_all(z)
            },
            init,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn fd_softmax_layernorm() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let init = rand_arr(&mut rng, &[3, 6]);
        let gamma = rand_arr(&mut rng, &[6]);
        let beta = rand_arr(&mut rng, &[6]);
        let weights = rand_arr(&mut rng, &[3, 6]);
        fd_check(
            move |g, store| {
                let p = g.param(store, super::super::ParamId(0));
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let ln = g.layer_norm(p, ga, be, 1e-5);
                let sm = g.softmax_rows(ln);
                let w = g.constant(weights.clone());
                let prod = g.mul(sm, w);
                g.sum_all(prod)
            },
            init,
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn fd_losses() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let init = rand_arr(&mut rng, &[5, 7]);
        fd_check(
            |g, store| {
                let p = g.param(store, super::super::ParamId(0));
                let targets = vec![Some(2), None, Some(6), Some(0), None];
                g.cross_entropy_rows(p, &targets)
            },
            init.clone(),
            1e-5,
            1e-6,
        );
        let mut rng2 = ChaCha12Rng::seed_from_u64(11);
        let t = Arr::from_shape_fn(IxDyn(&[5, 7]), |_| {
            if rng2.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        fd_check(
            move |g, store| {
                let p = g.param(store, super::super::ParamId(0));
                g.bce_with_logits_mean(p, &t)
            },
            init,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn fd_gathers_and_groups() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let init = rand_arr(&mut rng, &[6, 4]);
        let weights = rand_arr(&mut rng, &[5, 4]);
        fd_check(
            move |g, store| {
                let p = g.param(store, super::super::ParamId(0));
                let gathered = g.gather_rows(p, &[0, 2, 2, 5, 1]);
                let w = g.constant(weights.clone());
                let prod = g.mul(gathered, w);
                g.sum_all(prod)
            },
            init,
            1e-5,
            1e-6,
        );
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let init = rand_arr(&mut rng, &[2, 4, 5]);
        fd_check(
            |g, store| {
                let p = g.param(store, super::super::ParamId(0));
                let s = g.bilinear_sample(p, &[(0.3, 1.7), (3.9, 0.0), (4.6, 3.2)]);
                let q = g.powi(s, 2);
                g.mean_all(q)
            },
            init,
            1e-5,
            1e-6,
        );
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let init = rand_arr(&mut rng, &[5, 3]);
        let other = rand_arr(&mut rng, &[4, 3]);
        fd_check(
            move |g, store| {
                let p = g.param(store, super::super::ParamId(0));
                let o = g.constant(other.clone());
                let diff = g.outer_diff(p, o);
                let sq = g.powi(diff, 2);
                let gm = g.group_mean(sq, &[vec![0, 3], vec![], vec![7, 8, 19]]);
                g.sum_all(gm)
            },
            init,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn fd_concat_slice_transpose() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let init = rand_arr(&mut rng, &[4, 6]);
        fd_check(
            |g, store| {
                let p = g.param(store, super::super::ParamId(0));
                let a = g.slice_cols(p, 0, 2);
                let b = g.slice_cols(p, 2, 4);
                let bt = g.transpose2(b);
                let btt = g.transpose2(bt);
                let joined = g.concat_cols(&[a, btt]);
                let r = g.reshape(joined, &[2, 12]);
                let s = g.powi(r, 2);
                g.sum_all(s)
            },
            init,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let mut g = Graph::new(Mode::Inference);
        let x = g.constant(rand_arr(&mut rng, &[7, 9]));
        let s = g.softmax_rows(x);
        let v = g.value(s);
        for row in v.view().into_dimensionality::<ndarray::Ix2>().unwrap().rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_ignores_unlabeled_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let base = rand_arr(&mut rng, &[4, 5]);
        let mut altered = base.clone();
        altered[[1, 3]] += 100.0; // row 1 is unlabeled
        let targets = vec![Some(0), None, Some(4), None];
        let mut g1 = Graph::new(Mode::Inference);
        let a = g1.constant(base);
        let l1 = g1.cross_entropy_rows(a, &targets);
        let mut g2 = Graph::new(Mode::Inference);
        let b = g2.constant(altered);
        let l2 = g2.cross_entropy_rows(b, &targets);
        assert_eq!(g1.scalar_value(l1).to_bits(), g2.scalar_value(l2).to_bits());
    }
}
