//! Tensor operations recorded on the tape.
//!
//! Every method panics on shape misuse (callers validate first) and records a
//! backward closure capturing whatever values it needs. Reductions use
//! pairwise summation and parallel ops partition work by output index, so
//! results are bit-identical across runs and thread counts.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix4, IxDyn, Slice};

use crate::graph::Var;
use crate::par;
use crate::sum::pairwise_sum;

/// Spatial padding behaviour for convolution-style ops.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PadMode {
    Zero,
    Reflect,
}

fn check_same_graph(a: &Var, b: &Var, op: &str) {
    assert!(
        a.graph.same_as(&b.graph),
        "{op}: operands recorded on different graphs"
    );
}

fn check_same_shape(a: &Var, b: &Var, op: &str) {
    check_same_graph(a, b, op);
    assert_eq!(
        a.shape, b.shape,
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape, b.shape
    );
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn scalar_of(g: &ArrayD<f64>) -> f64 {
    debug_assert_eq!(g.len(), 1);
    g.iter().next().copied().expect("non-empty gradient")
}

fn collect_pairwise(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    pairwise_sum(&v)
}

impl Var {
    fn dims4(&self, op: &str) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "{op}: expected [n, c, h, w], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    fn unary<Ff, Fd>(&self, op: &'static str, f: Ff, df: Fd) -> Var
    where
        Ff: Fn(f64) -> f64,
        Fd: Fn(f64) -> f64 + 'static,
    {
        let xv = self.value();
        let out = xv.mapv(|x| f(x));
        let aid = self.id;
        self.graph.push(
            out,
            op,
            Some(Box::new(move |g, sink| {
                let d = xv.mapv(|x| df(x));
                sink(aid, g * &d);
            })),
        )
    }

    pub fn add(&self, other: &Var) -> Var {
        check_same_shape(self, other, "add");
        let out = &*self.value() + &*other.value();
        let (aid, bid) = (self.id, other.id);
        self.graph.push(
            out,
            "add",
            Some(Box::new(move |g, sink| {
                sink(aid, g.clone());
                sink(bid, g.clone());
            })),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        check_same_shape(self, other, "sub");
        let out = &*self.value() - &*other.value();
        let (aid, bid) = (self.id, other.id);
        self.graph.push(
            out,
            "sub",
            Some(Box::new(move |g, sink| {
                sink(aid, g.clone());
                sink(bid, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        check_same_shape(self, other, "mul");
        let av = self.value();
        let bv = other.value();
        let out = &*av * &*bv;
        let (aid, bid) = (self.id, other.id);
        self.graph.push(
            out,
            "mul",
            Some(Box::new(move |g, sink| {
                sink(aid, g * &*bv);
                sink(bid, g * &*av);
            })),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        check_same_shape(self, other, "div");
        let av = self.value();
        let bv = other.value();
        let out = &*av / &*bv;
        let (aid, bid) = (self.id, other.id);
        self.graph.push(
            out,
            "div",
            Some(Box::new(move |g, sink| {
                sink(aid, g / &*bv);
                let num = g * &*av;
                let den = &*bv * &*bv;
                sink(bid, -(num / den));
            })),
        )
    }

    pub fn neg(&self) -> Var {
        self.unary("neg", |x| -x, |_| -1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary("add_scalar", move |x| x + c, |_| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        self.unary("mul_scalar", move |x| x * c, move |_| c)
    }

    pub fn sqrt(&self) -> Var {
        self.unary("sqrt", f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn square(&self) -> Var {
        self.unary("square", |x| x * x, |x| 2.0 * x)
    }

    pub fn abs(&self) -> Var {
        self.unary(
            "abs",
            f64::abs,
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn exp(&self) -> Var {
        self.unary("exp", f64::exp, f64::exp)
    }

    pub fn ln(&self) -> Var {
        self.unary("ln", f64::ln, |x| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary("sigmoid", stable_sigmoid, |x| {
            let s = stable_sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn tanh(&self) -> Var {
        self.unary("tanh", f64::tanh, |x| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    pub fn relu(&self) -> Var {
        self.unary("relu", |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, alpha: f64) -> Var {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { alpha * x },
            move |x| if x > 0.0 { 1.0 } else { alpha },
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes where the input is inside the
    /// closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp: lo > hi");
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Var {
        let xv = self.value();
        let total = collect_pairwise(xv.iter().copied());
        let aid = self.id;
        let shape = self.shape.clone();
        self.graph.push(
            ArrayD::from_elem(IxDyn(&[1]), total),
            "sum_all",
            Some(Box::new(move |g, sink| {
                sink(aid, ArrayD::from_elem(IxDyn(&shape), scalar_of(g)));
            })),
        )
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&self) -> Var {
        let xv = self.value();
        let n = xv.len();
        assert!(n > 0, "mean_all: empty tensor");
        let total = collect_pairwise(xv.iter().copied());
        let aid = self.id;
        let shape = self.shape.clone();
        self.graph.push(
            ArrayD::from_elem(IxDyn(&[1]), total / n as f64),
            "mean_all",
            Some(Box::new(move |g, sink| {
                sink(
                    aid,
                    ArrayD::from_elem(IxDyn(&shape), scalar_of(g) / n as f64),
                );
            })),
        )
    }

    /// `[n, f] x [f, o] -> [n, o]`.
    pub fn matmul(&self, other: &Var) -> Var {
        check_same_graph(self, other, "matmul");
        assert_eq!(self.shape.len(), 2, "matmul lhs must be 2-d");
        assert_eq!(other.shape.len(), 2, "matmul rhs must be 2-d");
        assert_eq!(
            self.shape[1], other.shape[0],
            "matmul inner dimension mismatch"
        );
        let av = self.value();
        let bv = other.value();
        let out = {
            let a2 = av.view().into_dimensionality::<Ix2>().expect("2-d");
            let b2 = bv.view().into_dimensionality::<Ix2>().expect("2-d");
            a2.dot(&b2).into_dyn()
        };
        let (aid, bid) = (self.id, other.id);
        self.graph.push(
            out,
            "matmul",
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                let a2 = av.view().into_dimensionality::<Ix2>().expect("2-d");
                let b2 = bv.view().into_dimensionality::<Ix2>().expect("2-d");
                sink(aid, g2.dot(&b2.t()).into_dyn());
                sink(bid, a2.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Add a `[o]` bias row to every row of a `[n, o]` matrix.
    pub fn add_row(&self, bias: &Var) -> Var {
        check_same_graph(self, bias, "add_row");
        assert_eq!(self.shape.len(), 2, "add_row input must be 2-d");
        assert_eq!(
            bias.shape,
            vec![self.shape[1]],
            "add_row bias must be [cols]"
        );
        let av = self.value();
        let bv = bias.value();
        let out = {
            let a2 = av.view().into_dimensionality::<Ix2>().expect("2-d");
            let b1 = bv.view().into_dimensionality::<Ix1>().expect("1-d");
            (&a2 + &b1).into_dyn()
        };
        let (aid, bid) = (self.id, bias.id);
        let cols = self.shape[1];
        self.graph.push(
            out,
            "add_row",
            Some(Box::new(move |g, sink| {
                sink(aid, g.clone());
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                let db: Vec<f64> = (0..cols)
                    .map(|o| collect_pairwise(g2.column(o).iter().copied()))
                    .collect();
                sink(bid, Array1::from(db).into_dyn());
            })),
        )
    }

    /// Reshape to `shape` (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape: element count mismatch");
        let out = (*self.value())
            .clone()
            .into_shape(IxDyn(shape))
            .expect("standard layout");
        let aid = self.id;
        let in_shape = self.shape.clone();
        self.graph.push(
            out,
            "reshape",
            Some(Box::new(move |g, sink| {
                sink(
                    aid,
                    g.to_owned()
                        .into_shape(IxDyn(&in_shape))
                        .expect("standard layout"),
                );
            })),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        assert!(axis < self.shape.len(), "narrow: axis out of range");
        assert!(
            start + len <= self.shape[axis],
            "narrow: slice {}..{} exceeds axis length {}",
            start,
            start + len,
            self.shape[axis]
        );
        let xv = self.value();
        let out = xv
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let aid = self.id;
        let in_shape = self.shape.clone();
        self.graph.push(
            out,
            "narrow",
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::zeros(IxDyn(&in_shape));
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                sink(aid, dx);
            })),
        )
    }

    /// 2-d convolution over `[n, c, h, w]` with weight `[out, in, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Var {
        check_same_graph(self, weight, "conv2d");
        let (n, cin, h, w) = self.dims4("conv2d");
        assert_eq!(
            weight.shape.len(),
            4,
            "conv2d weight must be [out, in, kh, kw]"
        );
        let (cout, wcin, kh, kw) = (
            weight.shape[0],
            weight.shape[1],
            weight.shape[2],
            weight.shape[3],
        );
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert!(stride >= 1, "conv2d stride must be >= 1");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        if let Some(b) = bias {
            check_same_graph(self, b, "conv2d");
            assert_eq!(b.shape, vec![cout], "conv2d bias must be [out]");
        }

        let xv = self.value();
        let wv = weight.value();
        let wmat: Array2<f64> = (*wv)
            .clone()
            .into_shape((cout, cin * kh * kw))
            .expect("standard layout");
        let bias_arr: Option<Array1<f64>> = bias.map(|b| {
            b.value()
                .view()
                .into_dimensionality::<Ix1>()
                .expect("1-d")
                .to_owned()
        });

        let out = {
            let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-d");
            let samples: Vec<Array3<f64>> = par::map_indexed(n, |i| {
                let xp = pad_sample(&x4.index_axis(Axis(0), i), pad, mode);
                let cols = im2col(&xp.view(), kh, kw, stride, ho, wo);
                let mut o = wmat.dot(&cols);
                if let Some(b) = &bias_arr {
                    for (mut row, &bv) in o.rows_mut().into_iter().zip(b.iter()) {
                        row += bv;
                    }
                }
                o.into_shape((cout, ho, wo)).expect("standard layout")
            });
            let mut out = Array4::zeros((n, cout, ho, wo));
            for (i, s) in samples.into_iter().enumerate() {
                out.index_axis_mut(Axis(0), i).assign(&s);
            }
            out.into_dyn()
        };

        let (xid, wid) = (self.id, weight.id);
        let bid = bias.map(|b| b.id);
        self.graph.push(
            out,
            "conv2d",
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("4-d");
                let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-d");
                type SampleGrad = (Array2<f64>, Vec<f64>, Array3<f64>);
                let per: Vec<SampleGrad> = par::map_indexed(n, |i| {
                    let xp = pad_sample(&x4.index_axis(Axis(0), i), pad, mode);
                    let cols = im2col(&xp.view(), kh, kw, stride, ho, wo);
                    let gmat: Array2<f64> = g4
                        .index_axis(Axis(0), i)
                        .to_owned()
                        .into_shape((cout, ho * wo))
                        .expect("standard layout");
                    let dw_i = gmat.dot(&cols.t());
                    let db_i: Vec<f64> = (0..cout)
                        .map(|co| collect_pairwise(gmat.row(co).iter().copied()))
                        .collect();
                    let dcols = wmat.t().dot(&gmat);
                    let dxp =
                        col2im(&dcols.view(), cin, h + 2 * pad, w + 2 * pad, kh, kw, stride, ho, wo);
                    let mut dx_i = Array3::zeros((cin, h, w));
                    for ch in 0..cin {
                        dx_i.index_axis_mut(Axis(0), ch).assign(&unpad_plane_accumulate(
                            &dxp.index_axis(Axis(0), ch),
                            pad,
                            mode,
                            h,
                            w,
                        ));
                    }
                    (dw_i, db_i, dx_i)
                });
                let mut dw = Array2::<f64>::zeros((cout, cin * kh * kw));
                let mut db = vec![0.0; cout];
                let mut dx = Array4::<f64>::zeros((n, cin, h, w));
                for (i, (dw_i, db_i, dx_i)) in per.into_iter().enumerate() {
                    dw += &dw_i;
                    for (a, b) in db.iter_mut().zip(db_i) {
                        *a += b;
                    }
                    dx.index_axis_mut(Axis(0), i).assign(&dx_i);
                }
                sink(xid, dx.into_dyn());
                sink(
                    wid,
                    dw.into_shape((cout, cin, kh, kw))
                        .expect("standard layout")
                        .into_dyn(),
                );
                if let Some(bid) = bid {
                    sink(bid, Array1::from(db).into_dyn());
                }
            })),
        )
    }

    /// Convolve every channel with one fixed (non-trainable) odd square
    /// kernel, keeping spatial size. Used for smoothing and edge filters.
    pub fn depthwise_fixed(&self, kernel: &Array2<f64>, mode: PadMode) -> Var {
        let (n, c, h, w) = self.dims4("depthwise_fixed");
        let (kh, kw) = kernel.dim();
        assert_eq!(kh, kw, "depthwise_fixed kernel must be square");
        assert_eq!(kh % 2, 1, "depthwise_fixed kernel must be odd-sized");
        let pad = kh / 2;
        let xv = self.value();
        let k = kernel.to_owned();

        let out = {
            let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-d");
            let planes: Vec<Array2<f64>> = par::map_indexed(n * c, |p| {
                let (i, ch) = (p / c, p % c);
                let xp = pad_plane(&x4.slice(s![i, ch, .., ..]), pad, mode);
                let mut o = Array2::zeros((h, w));
                for oi in 0..h {
                    for oj in 0..w {
                        let mut acc = 0.0;
                        for u in 0..kh {
                            for v in 0..kw {
                                acc += k[(u, v)] * xp[(oi + u, oj + v)];
                            }
                        }
                        o[(oi, oj)] = acc;
                    }
                }
                o
            });
            assemble_planes(planes, n, c, h, w)
        };

        let aid = self.id;
        self.graph.push(
            out,
            "depthwise_fixed",
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("4-d");
                let planes: Vec<Array2<f64>> = par::map_indexed(n * c, |p| {
                    let (i, ch) = (p / c, p % c);
                    let g2 = g4.slice(s![i, ch, .., ..]);
                    let mut dxp = Array2::zeros((h + 2 * pad, w + 2 * pad));
                    for a in 0..h + 2 * pad {
                        for b in 0..w + 2 * pad {
                            let mut acc = 0.0;
                            for u in 0..kh {
                                for v in 0..kw {
                                    let ii = a as isize - u as isize;
                                    let jj = b as isize - v as isize;
                                    if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                                        acc += k[(u, v)] * g2[(ii as usize, jj as usize)];
                                    }
                                }
                            }
                            dxp[(a, b)] = acc;
                        }
                    }
                    unpad_plane_accumulate(&dxp.view(), pad, mode, h, w)
                });
                sink(aid, assemble_planes(planes, n, c, h, w));
            })),
        )
    }

    /// Average pooling with zero padding; the divisor is always `k*k`
    /// (padded positions count toward the average).
    pub fn avg_pool2d(&self, k: usize, stride: usize, pad: usize) -> Var {
        let (n, c, h, w) = self.dims4("avg_pool2d");
        assert!(k >= 1 && stride >= 1, "avg_pool2d k and stride must be >= 1");
        assert!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "avg_pool2d window {k} larger than padded input {h}x{w}"
        );
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let inv = 1.0 / (k * k) as f64;
        let xv = self.value();

        let out = {
            let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-d");
            let planes: Vec<Array2<f64>> = par::map_indexed(n * c, |p| {
                let (i, ch) = (p / c, p % c);
                let x2 = x4.slice(s![i, ch, .., ..]);
                let mut o = Array2::zeros((ho, wo));
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = 0.0;
                        for u in 0..k {
                            for v in 0..k {
                                let si = (oi * stride + u) as isize - pad as isize;
                                let sj = (oj * stride + v) as isize - pad as isize;
                                if si >= 0 && (si as usize) < h && sj >= 0 && (sj as usize) < w {
                                    acc += x2[(si as usize, sj as usize)];
                                }
                            }
                        }
                        o[(oi, oj)] = acc * inv;
                    }
                }
                o
            });
            assemble_planes(planes, n, c, ho, wo)
        };

        let aid = self.id;
        self.graph.push(
            out,
            "avg_pool2d",
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("4-d");
                let planes: Vec<Array2<f64>> = par::map_indexed(n * c, |p| {
                    let (i, ch) = (p / c, p % c);
                    let g2 = g4.slice(s![i, ch, .., ..]);
                    let mut dx = Array2::zeros((h, w));
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let gv = g2[(oi, oj)] * inv;
                            for u in 0..k {
                                for v in 0..k {
                                    let si = (oi * stride + u) as isize - pad as isize;
                                    let sj = (oj * stride + v) as isize - pad as isize;
                                    if si >= 0 && (si as usize) < h && sj >= 0 && (sj as usize) < w
                                    {
                                        dx[(si as usize, sj as usize)] += gv;
                                    }
                                }
                            }
                        }
                    }
                    dx
                });
                sink(aid, assemble_planes(planes, n, c, h, w));
            })),
        )
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&self) -> Var {
        let (n, c, h, w) = self.dims4("global_avg_pool");
        let m = (h * w) as f64;
        let xv = self.value();
        let out = {
            let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-d");
            let vals: Vec<f64> = par::map_indexed(n * c, |p| {
                let (i, ch) = (p / c, p % c);
                collect_pairwise(x4.slice(s![i, ch, .., ..]).iter().copied()) / m
            });
            Array2::from_shape_vec((n, c), vals)
                .expect("shape/product match")
                .into_dyn()
        };
        let aid = self.id;
        self.graph.push(
            out,
            "global_avg_pool",
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                let mut dx = Array4::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        dx.slice_mut(s![i, ch, .., ..]).fill(g2[(i, ch)] / m);
                    }
                }
                sink(aid, dx.into_dyn());
            })),
        )
    }

    /// Bilinear 2x upsampling with half-pixel-aligned sample centers.
    pub fn upsample_bilinear2x(&self) -> Var {
        let (n, c, h, w) = self.dims4("upsample_bilinear2x");
        let (h2, w2) = (2 * h, 2 * w);
        let xv = self.value();

        let out = {
            let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-d");
            let planes: Vec<Array2<f64>> = par::map_indexed(n * c, |p| {
                let (i, ch) = (p / c, p % c);
                let x2 = x4.slice(s![i, ch, .., ..]);
                let mut o = Array2::zeros((h2, w2));
                for oi in 0..h2 {
                    let (y0, y1, wy) = bilinear_taps(oi, h);
                    for oj in 0..w2 {
                        let (x0, x1, wx) = bilinear_taps(oj, w);
                        o[(oi, oj)] = (1.0 - wy) * (1.0 - wx) * x2[(y0, x0)]
                            + (1.0 - wy) * wx * x2[(y0, x1)]
                            + wy * (1.0 - wx) * x2[(y1, x0)]
                            + wy * wx * x2[(y1, x1)];
                    }
                }
                o
            });
            assemble_planes(planes, n, c, h2, w2)
        };

        let aid = self.id;
        self.graph.push(
            out,
            "upsample_bilinear2x",
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("4-d");
                let planes: Vec<Array2<f64>> = par::map_indexed(n * c, |p| {
                    let (i, ch) = (p / c, p % c);
                    let g2 = g4.slice(s![i, ch, .., ..]);
                    let mut dx = Array2::zeros((h, w));
                    for oi in 0..h2 {
                        let (y0, y1, wy) = bilinear_taps(oi, h);
                        for oj in 0..w2 {
                            let (x0, x1, wx) = bilinear_taps(oj, w);
                            let gv = g2[(oi, oj)];
                            dx[(y0, x0)] += (1.0 - wy) * (1.0 - wx) * gv;
                            dx[(y0, x1)] += (1.0 - wy) * wx * gv;
                            dx[(y1, x0)] += wy * (1.0 - wx) * gv;
                            dx[(y1, x1)] += wy * wx * gv;
                        }
                    }
                    dx
                });
                sink(aid, assemble_planes(planes, n, c, h, w));
            })),
        )
    }

    /// Per-(sample, channel) normalization to zero mean, unit variance
    /// (biased variance estimate, `eps` inside the square root).
    pub fn instance_norm(&self, eps: f64) -> Var {
        let (n, c, h, w) = self.dims4("instance_norm");
        let m = (h * w) as f64;
        assert!(h * w > 0, "instance_norm: empty plane");
        let xv = self.value();

        let mut means = vec![0.0; n * c];
        let mut inv_stds = vec![0.0; n * c];
        let out = {
            let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-d");
            let stats: Vec<(f64, f64, Array2<f64>)> = par::map_indexed(n * c, |p| {
                let (i, ch) = (p / c, p % c);
                let x2 = x4.slice(s![i, ch, .., ..]);
                let mean = collect_pairwise(x2.iter().copied()) / m;
                let var = collect_pairwise(x2.iter().map(|&x| (x - mean) * (x - mean))) / m;
                let inv_std = 1.0 / (var + eps).sqrt();
                let xhat = x2.mapv(|x| (x - mean) * inv_std);
                (mean, inv_std, xhat)
            });
            let mut out = Array4::zeros((n, c, h, w));
            for (p, (mean, inv_std, xhat)) in stats.into_iter().enumerate() {
                means[p] = mean;
                inv_stds[p] = inv_std;
                out.slice_mut(s![p / c, p % c, .., ..]).assign(&xhat);
            }
            out.into_dyn()
        };

        let aid = self.id;
        self.graph.push(
            out,
            "instance_norm",
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("4-d");
                let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-d");
                let means = &means;
                let inv_stds = &inv_stds;
                let planes: Vec<Array2<f64>> = par::map_indexed(n * c, |p| {
                    let (i, ch) = (p / c, p % c);
                    let x2 = x4.slice(s![i, ch, .., ..]);
                    let g2 = g4.slice(s![i, ch, .., ..]);
                    let (mean, inv_std) = (means[p], inv_stds[p]);
                    let xhat = x2.mapv(|x| (x - mean) * inv_std);
                    let sg = collect_pairwise(g2.iter().copied());
                    let sgx = collect_pairwise(g2.iter().zip(xhat.iter()).map(|(&a, &b)| a * b));
                    let mut dx = Array2::zeros((h, w));
                    for ii in 0..h {
                        for jj in 0..w {
                            dx[(ii, jj)] = inv_std / m
                                * (m * g2[(ii, jj)] - sg - xhat[(ii, jj)] * sgx);
                        }
                    }
                    dx
                });
                sink(aid, assemble_planes(planes, n, c, h, w));
            })),
        )
    }

    /// Per-(sample, channel) affine: `y = x * gamma[n, c] + beta[n, c]`.
    pub fn scale_shift_nc(&self, gamma: &Var, beta: &Var) -> Var {
        check_same_graph(self, gamma, "scale_shift_nc");
        check_same_graph(self, beta, "scale_shift_nc");
        let (n, c, h, w) = self.dims4("scale_shift_nc");
        assert_eq!(gamma.shape, vec![n, c], "scale_shift_nc gamma must be [n, c]");
        assert_eq!(beta.shape, vec![n, c], "scale_shift_nc beta must be [n, c]");
        let xv = self.value();
        let gv = gamma.value();
        let bv = beta.value();

        let out = {
            let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-d");
            let g2 = gv.view().into_dimensionality::<Ix2>().expect("2-d");
            let b2 = bv.view().into_dimensionality::<Ix2>().expect("2-d");
            let planes: Vec<Array2<f64>> = par::map_indexed(n * c, |p| {
                let (i, ch) = (p / c, p % c);
                let (ga, be) = (g2[(i, ch)], b2[(i, ch)]);
                x4.slice(s![i, ch, .., ..]).mapv(|x| x * ga + be)
            });
            assemble_planes(planes, n, c, h, w)
        };

        let (xid, gid, bid) = (self.id, gamma.id, beta.id);
        self.graph.push(
            out,
            "scale_shift_nc",
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("4-d");
                let x4 = xv.view().into_dimensionality::<Ix4>().expect("4-d");
                let ga2 = gv.view().into_dimensionality::<Ix2>().expect("2-d");
                type PlaneGrad = (Array2<f64>, f64, f64);
                let per: Vec<PlaneGrad> = par::map_indexed(n * c, |p| {
                    let (i, ch) = (p / c, p % c);
                    let gp = g4.slice(s![i, ch, .., ..]);
                    let xp = x4.slice(s![i, ch, .., ..]);
                    let ga = ga2[(i, ch)];
                    let dx = gp.mapv(|v| v * ga);
                    let dgamma = collect_pairwise(gp.iter().zip(xp.iter()).map(|(&a, &b)| a * b));
                    let dbeta = collect_pairwise(gp.iter().copied());
                    (dx, dgamma, dbeta)
                });
                let mut dx = Array4::zeros((n, c, h, w));
                let mut dgamma = Array2::zeros((n, c));
                let mut dbeta = Array2::zeros((n, c));
                for (p, (dx_p, dg_p, db_p)) in per.into_iter().enumerate() {
                    dx.slice_mut(s![p / c, p % c, .., ..]).assign(&dx_p);
                    dgamma[(p / c, p % c)] = dg_p;
                    dbeta[(p / c, p % c)] = db_p;
                }
                sink(xid, dx.into_dyn());
                sink(gid, dgamma.into_dyn());
                sink(bid, dbeta.into_dyn());
            })),
        )
    }
}

/// Concatenate `[n, c_i, h, w]` tensors along the channel axis.
pub fn concat_c(parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "concat_c: no inputs");
    let graph = parts[0].graph().clone();
    let (n, _, h, w) = parts[0].dims4("concat_c");
    let mut chans = Vec::with_capacity(parts.len());
    for p in parts {
        check_same_graph(&parts[0], p, "concat_c");
        let (pn, pc, ph, pw) = p.dims4("concat_c");
        assert_eq!(
            (pn, ph, pw),
            (n, h, w),
            "concat_c: non-channel dims must match"
        );
        chans.push(pc);
    }
    let ctot: usize = chans.iter().sum();
    let mut out = Array4::zeros((n, ctot, h, w));
    let mut off = 0;
    for (p, &ci) in parts.iter().zip(&chans) {
        let pv = p.value();
        out.slice_mut(s![.., off..off + ci, .., ..])
            .assign(&pv.view().into_dimensionality::<Ix4>().expect("4-d"));
        off += ci;
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    graph.push(
        out.into_dyn(),
        "concat_c",
        Some(Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("4-d");
            let mut off = 0;
            for (&id, &ci) in ids.iter().zip(&chans) {
                sink(
                    id,
                    g4.slice(s![.., off..off + ci, .., ..]).to_owned().into_dyn(),
                );
                off += ci;
            }
        })),
    )
}

/// Nearest valid source index for an out-of-range coordinate under
/// edge-exclusive reflection.
fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    debug_assert!(
        (0..n).contains(&j),
        "reflect pad exceeds input extent (index {i}, len {len})"
    );
    j as usize
}

fn pad_plane(x: &ArrayView2<f64>, pad: usize, mode: PadMode) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut out = Array2::zeros((h + 2 * pad, w + 2 * pad));
    if pad == 0 {
        out.assign(x);
        return out;
    }
    match mode {
        PadMode::Zero => out.slice_mut(s![pad..pad + h, pad..pad + w]).assign(x),
        PadMode::Reflect => {
            assert!(
                pad < h && pad < w,
                "reflect padding {pad} requires spatial dims > pad, got {h}x{w}"
            );
            for pi in 0..h + 2 * pad {
                let si = reflect_index(pi as isize - pad as isize, h);
                for pj in 0..w + 2 * pad {
                    out[(pi, pj)] = x[(si, reflect_index(pj as isize - pad as isize, w))];
                }
            }
        }
    }
    out
}

/// Fold a padded-plane gradient back onto source coordinates (crop for zero
/// padding, scatter-add through the reflection map otherwise).
fn unpad_plane_accumulate(
    gpad: &ArrayView2<f64>,
    pad: usize,
    mode: PadMode,
    h: usize,
    w: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((h, w));
    if pad == 0 {
        out.assign(gpad);
        return out;
    }
    match mode {
        PadMode::Zero => out.assign(&gpad.slice(s![pad..pad + h, pad..pad + w])),
        PadMode::Reflect => {
            for pi in 0..h + 2 * pad {
                let si = reflect_index(pi as isize - pad as isize, h);
                for pj in 0..w + 2 * pad {
                    out[(si, reflect_index(pj as isize - pad as isize, w))] += gpad[(pi, pj)];
                }
            }
        }
    }
    out
}

fn pad_sample(x: &ArrayView3<f64>, pad: usize, mode: PadMode) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    for ch in 0..c {
        out.index_axis_mut(Axis(0), ch)
            .assign(&pad_plane(&x.index_axis(Axis(0), ch), pad, mode));
    }
    out
}

fn im2col(
    xp: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, _, _) = xp.dim();
    let mut cols = Array2::zeros((c * kh * kw, ho * wo));
    for ch in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ch * kh + u) * kw + v;
                for oi in 0..ho {
                    for oj in 0..wo {
                        cols[(row, oi * wo + oj)] = xp[(ch, oi * stride + u, oj * stride + v)];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &ArrayView2<f64>,
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut dxp = Array3::zeros((c, hp, wp));
    for ch in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ch * kh + u) * kw + v;
                for oi in 0..ho {
                    for oj in 0..wo {
                        dxp[(ch, oi * stride + u, oj * stride + v)] += dcols[(row, oi * wo + oj)];
                    }
                }
            }
        }
    }
    dxp
}

fn assemble_planes(planes: Vec<Array2<f64>>, n: usize, c: usize, h: usize, w: usize) -> ArrayD<f64> {
    debug_assert_eq!(planes.len(), n * c);
    let mut out = Array4::zeros((n, c, h, w));
    for (p, plane) in planes.into_iter().enumerate() {
        out.slice_mut(s![p / c, p % c, .., ..]).assign(&plane);
    }
    out.into_dyn()
}

/// Source taps and interpolation weight for 2x upsampling with half-pixel
/// sample centers, clamped at the borders.
fn bilinear_taps(dst: usize, src_len: usize) -> (usize, usize, f64) {
    let s = (dst as f64 + 0.5) * 0.5 - 0.5;
    let f = s.floor();
    let frac = s - f;
    let max = (src_len - 1) as f64;
    let i0 = f.clamp(0.0, max) as usize;
    let i1 = (f + 1.0).clamp(0.0, max) as usize;
    (i0, i1, frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::{arr2, ArrayD};

    fn dyn4(data: Vec<f64>, shape: [usize; 4]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        let g = Graph::new();
        // 1x1x3x3 input, 1x1x2x2 kernel, stride 1, no padding.
        let x = g.leaf(dyn4((1..=9).map(f64::from).collect(), [1, 1, 3, 3]));
        let w = g.leaf(dyn4(vec![1.0, 0.0, 0.0, -1.0], [1, 1, 2, 2]));
        let y = x.conv2d(&w, None, 1, 0, PadMode::Zero);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // Each output = x[i, j] - x[i + 1, j + 1] = -4.
        assert!(y.to_array().iter().all(|&v| v == -4.0));
    }

    #[test]
    fn conv2d_bias_and_stride() {
        let g = Graph::new();
        let x = g.leaf(dyn4(vec![1.0; 16], [1, 1, 4, 4]));
        let w = g.leaf(dyn4(vec![1.0; 4], [1, 1, 2, 2]));
        let b = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let y = x.conv2d(&w, Some(&b), 2, 0, PadMode::Zero);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.to_array().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_edge() {
        let x = arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]);
        let p = pad_plane(&x.view(), 1, PadMode::Reflect);
        // Row -1 reflects to row 1, column -1 to column 1.
        assert_eq!(p[(0, 0)], 5.0);
        assert_eq!(p[(0, 1)], 4.0);
        assert_eq!(p[(1, 0)], 2.0);
        assert_eq!(p[(4, 4)], 5.0);
    }

    #[test]
    fn avg_pool_counts_padded_positions() {
        let g = Graph::new();
        let x = g.leaf(dyn4(vec![9.0; 9], [1, 1, 3, 3]));
        let y = x.avg_pool2d(3, 2, 1);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // Corner windows see four in-bounds nines out of nine slots.
        assert!(y.to_array().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn upsample_keeps_constant_planes_constant() {
        let g = Graph::new();
        let x = g.leaf(dyn4(vec![3.25; 12], [1, 3, 2, 2]));
        let y = x.upsample_bilinear2x();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.to_array().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let g = Graph::new();
        let x = g.leaf(dyn4(vec![1.0, 2.0, 3.0, 4.0], [1, 1, 2, 2]));
        let y = x.instance_norm(0.0).to_array();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_then_narrow_roundtrips() {
        let g = Graph::new();
        let a = g.leaf(dyn4(vec![1.0; 8], [1, 2, 2, 2]));
        let b = g.leaf(dyn4(vec![2.0; 4], [1, 1, 2, 2]));
        let cat = concat_c(&[a, b]);
        assert_eq!(cat.shape(), &[1, 3, 2, 2]);
        let back = cat.narrow(1, 2, 1);
        assert!(back.to_array().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn repeated_operand_accumulates_gradient() {
        let g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let y = x.mul(&x).sum_all();
        let grads = g.backward(&y);
        assert_eq!(grads.wrt(&x).unwrap()[IxDyn(&[0])], 6.0);
    }

    #[test]
    fn matmul_gradients_match_closed_form() {
        let g = Graph::new();
        let a = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let b = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
        );
        let y = a.matmul(&b).sum_all();
        let grads = g.backward(&y);
        // d(sum(AB))/dA = ones * B^T -> row sums of B^T columns.
        let da = grads.wrt(&a).unwrap();
        assert_eq!(da[IxDyn(&[0, 0])], 11.0);
        assert_eq!(da[IxDyn(&[0, 1])], 15.0);
        let db = grads.wrt(&b).unwrap();
        assert_eq!(db[IxDyn(&[0, 0])], 4.0);
        assert_eq!(db[IxDyn(&[1, 1])], 6.0);
    }

    #[test]
    fn backward_is_bitwise_repeatable() {
        use rand::SeedableRng;
        let mut rng = crate::init::Rng::seed_from_u64(11);
        let x0 = crate::init::normal(&mut rng, &[2, 3, 6, 6], 1.0);
        let w0 = crate::init::normal(&mut rng, &[4, 3, 3, 3], 0.5);
        let run = || {
            let g = Graph::new();
            let x = g.leaf(x0.clone());
            let w = g.leaf(w0.clone());
            let y = x
                .conv2d(&w, None, 1, 1, PadMode::Reflect)
                .instance_norm(1e-5)
                .relu()
                .mean_all();
            let grads = g.backward(&y);
            (
                y.scalar(),
                grads.wrt(&x).unwrap().clone(),
                grads.wrt(&w).unwrap().clone(),
            )
        };
        let (y1, dx1, dw1) = run();
        let (y2, dx2, dw2) = run();
        assert_eq!(y1, y2);
        assert_eq!(dx1, dx2);
        assert_eq!(dw1, dw2);
    }
}
