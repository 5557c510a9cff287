//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for every node. All math is
//! `f64`. Convolutions go through im2col + matrix multiply so the hot path
//! runs on `matrixmultiply` rather than scalar loops.
//!
//! The op set is exactly what the generator, fusion network, and backbone
//! need; this is not a general-purpose framework.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut [ArrayD<f64>])>;

pub struct Tape {
    values: Vec<ArrayD<f64>>,
    backs: Vec<Option<BackFn>>,
}

/// Gradients for every node of a tape, produced by [`Tape::backward`].
pub struct Grads(Vec<ArrayD<f64>>);

impl Grads {
    pub fn get(&self, v: Var) -> &ArrayD<f64> {
        &self.0[v.0]
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.values[v.0];
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// A leaf node. Gradients are accumulated for it like any other node;
    /// whether anyone reads them is up to the caller.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf3(&mut self, value: Array3<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf4(&mut self, value: Array4<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    /// Run reverse-mode accumulation from `loss` (must be a single scalar).
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.values[loss.0].len(), 1, "backward target must be scalar");
        let mut grads: Vec<ArrayD<f64>> = self
            .values
            .iter()
            .map(|v| ArrayD::zeros(v.raw_dim()))
            .collect();
        grads[loss.0].fill(1.0);
        for i in (0..self.values.len()).rev() {
            if let Some(back) = &self.backs[i] {
                let upstream = grads[i].clone();
                if upstream.iter().all(|g| *g == 0.0) {
                    continue;
                }
                back(&self.values, &upstream, &mut grads);
            }
        }
        Grads(grads)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] + &self.values[b.0];
        self.push(
            out,
            Some(Box::new(move |_v, up, g| {
                g[a.0] += up;
                g[b.0] += up;
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] - &self.values[b.0];
        self.push(
            out,
            Some(Box::new(move |_v, up, g| {
                g[a.0] += up;
                g[b.0] -= up;
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] * &self.values[b.0];
        self.push(
            out,
            Some(Box::new(move |v, up, g| {
                g[a.0] += &(up * &v[b.0]);
                g[b.0] += &(up * &v[a.0]);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.values[a.0].mapv(|x| x * c);
        self.push(
            out,
            Some(Box::new(move |_v, up, g| {
                g[a.0] += &up.mapv(|x| x * c);
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(
            out,
            Some(Box::new(move |v, up, g| {
                let mask = v[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                g[a.0] += &(up * &mask);
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(f64::tanh);
        let cached = out.clone();
        self.push(
            out,
            Some(Box::new(move |_v, up, g| {
                g[a.0] += &(up * &cached.mapv(|y| 1.0 - y * y));
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let cached = out.clone();
        self.push(
            out,
            Some(Box::new(move |_v, up, g| {
                g[a.0] += &(up * &cached.mapv(|y| y * (1.0 - y)));
            })),
        )
    }

    // ---- reductions ----

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].sum() / n);
        self.push(
            out,
            Some(Box::new(move |_v, up, g| {
                let u = up.iter().next().copied().unwrap() / n;
                g[a.0] += u;
            })),
        )
    }

    /// Mean absolute difference (L1 with mean reduction). Subgradient 0 at ties.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let n = self.values[a.0].len() as f64;
        let s: f64 = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s / n);
        self.push(
            out,
            Some(Box::new(move |v, up, g| {
                let u = up.iter().next().copied().unwrap() / n;
                let sign = ndarray::Zip::from(&v[a.0])
                    .and(&v[b.0])
                    .map_collect(|x, y| (x - y).signum() * if x == y { 0.0 } else { 1.0 });
                g[a.0] += &sign.mapv(|s| s * u);
                g[b.0] -= &sign.mapv(|s| s * u);
            })),
        )
    }

    /// Mean squared difference.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let n = self.values[a.0].len() as f64;
        let s: f64 = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s / n);
        self.push(
            out,
            Some(Box::new(move |v, up, g| {
                let u = up.iter().next().copied().unwrap() * 2.0 / n;
                let diff = &v[a.0] - &v[b.0];
                g[a.0] += &diff.mapv(|d| d * u);
                g[b.0] -= &diff.mapv(|d| d * u);
            })),
        )
    }

    /// 1-D earth-mover distance against a fixed reference: sort both vectors
    /// and take the mean absolute difference of sorted entries. Gradient flows
    /// to `z` through the sorting permutation.
    pub fn em_sorted(&mut self, z: Var, reference: &Array1<f64>) -> Var {
        let zv = self.values[z.0].clone().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(zv.len(), reference.len(), "em: dimension mismatch");
        let d = zv.len();
        let mut z_order: Vec<usize> = (0..d).collect();
        z_order.sort_by(|&i, &j| zv[i].partial_cmp(&zv[j]).unwrap());
        let mut r_sorted: Vec<f64> = reference.iter().copied().collect();
        r_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let s: f64 = z_order
            .iter()
            .zip(r_sorted.iter())
            .map(|(&i, &r)| (zv[i] - r).abs())
            .sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s / d as f64);
        self.push(
            out,
            Some(Box::new(move |v, up, g| {
                let u = up.iter().next().copied().unwrap() / d as f64;
                let zcur = &v[z.0];
                let mut gz = ArrayD::zeros(zcur.raw_dim());
                for (rank, &i) in z_order.iter().enumerate() {
                    let diff = zcur[[i]] - r_sorted[rank];
                    gz[[i]] = u * diff.signum() * if diff == 0.0 { 0.0 } else { 1.0 };
                }
                g[z.0] += &gz;
            })),
        )
    }

    // ---- linear algebra ----

    /// `x [b, in] · w^T [in, out] + bias [out] -> [b, out]`
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let xv = self.values[x.0].clone().into_dimensionality::<Ix2>().unwrap();
        let wv = self.values[w.0].clone().into_dimensionality::<Ix2>().unwrap();
        let bv = self.values[bias.0].clone().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.ncols(), wv.ncols(), "linear: in-dim mismatch");
        assert_eq!(wv.nrows(), bv.len(), "linear: bias dim mismatch");
        let mut out = xv.dot(&wv.t());
        out += &bv;
        self.push(
            out.into_dyn(),
            Some(Box::new(move |v, up, g| {
                let up2 = up.clone().into_dimensionality::<Ix2>().unwrap();
                let xv = v[x.0].clone().into_dimensionality::<Ix2>().unwrap();
                let wv = v[w.0].clone().into_dimensionality::<Ix2>().unwrap();
                g[x.0] += &up2.dot(&wv).into_dyn();
                g[w.0] += &up2.t().dot(&xv).into_dyn();
                g[bias.0] += &up2.sum_axis(Axis(0)).into_dyn();
            })),
        )
    }

    /// Select one row of a 2-D value (e.g. an embedding table) -> 1-D.
    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let xv = self.values[x.0].clone().into_dimensionality::<Ix2>().unwrap();
        let out = xv.row(i).to_owned().into_dyn();
        self.push(
            out,
            Some(Box::new(move |_v, up, g| {
                let up1 = up.clone().into_dimensionality::<Ix1>().unwrap();
                let mut gx = g[x.0].clone().into_dimensionality::<Ix2>().unwrap();
                {
                    let mut r = gx.row_mut(i);
                    r += &up1;
                }
                g[x.0] = gx.into_dyn();
            })),
        )
    }

    /// Concatenate 1-D vectors.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        let vecs: Vec<Array1<f64>> = parts
            .iter()
            .map(|p| self.values[p.0].clone().into_dimensionality::<Ix1>().unwrap())
            .collect();
        let total: usize = vecs.iter().map(|v| v.len()).sum();
        let mut out = Array1::zeros(total);
        let mut off = 0;
        for v in &vecs {
            out.slice_mut(ndarray::s![off..off + v.len()]).assign(v);
            off += v.len();
        }
        let lens: Vec<usize> = vecs.iter().map(|v| v.len()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_v, up, g| {
                let up1 = up.clone().into_dimensionality::<Ix1>().unwrap();
                let mut off = 0;
                for (id, len) in ids.iter().zip(lens.iter()) {
                    let piece = up1.slice(ndarray::s![off..off + len]).to_owned();
                    g[*id] += &piece.into_dyn();
                    off += len;
                }
            })),
        )
    }

    /// Stack equally-shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let shape = self.values[parts[0].0].shape().to_vec();
        for p in parts {
            assert_eq!(self.values[p.0].shape(), &shape[..], "stack: shape mismatch");
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&shape);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&out_shape));
        for (i, p) in parts.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&self.values[p.0]);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out,
            Some(Box::new(move |_v, up, g| {
                for (i, id) in ids.iter().enumerate() {
                    let piece = up.index_axis(Axis(0), i).to_owned();
                    g[*id] += &piece;
                }
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.values[x.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let back_shape = self.values[x.0].raw_dim();
        self.push(
            out,
            Some(Box::new(move |_v, up, g| {
                let back = up.clone().into_shape_with_order(back_shape.clone()).unwrap();
                g[x.0] += &back;
            })),
        )
    }

    // ---- convolution stack ----

    /// 3x3 convolution, stride 1, zero padding 1. `x [n,ci,h,w]`,
    /// `w [co,ci,3,3]`, `bias [co]` -> `[n,co,h,w]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let xv = self.values[x.0].clone().into_dimensionality::<Ix4>().unwrap();
        let wv = self.values[w.0].clone().into_dimensionality::<Ix4>().unwrap();
        let bv = self.values[bias.0].clone().into_dimensionality::<Ix1>().unwrap();
        let (n, ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let co = wv.shape()[0];
        assert_eq!(wv.shape()[1], ci, "conv2d: channel mismatch");
        assert_eq!(wv.shape()[2], 3);
        assert_eq!(bv.len(), co);
        let w2 = wv
            .clone()
            .into_shape_with_order((co, ci * 9))
            .unwrap();
        let mut out = Array4::<f64>::zeros((n, co, h, wd));
        let mut cols: Vec<Array2<f64>> = Vec::with_capacity(n);
        for s in 0..n {
            let col = im2col(&xv.index_axis(Axis(0), s).to_owned(), h, wd, ci);
            let mut o = w2.dot(&col); // [co, h*w]
            for c in 0..co {
                o.row_mut(c).mapv_inplace(|v| v + bv[c]);
            }
            out.index_axis_mut(Axis(0), s)
                .assign(&o.into_shape_with_order((co, h, wd)).unwrap());
            cols.push(col);
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |v, up, g| {
                let up4 = up.clone().into_dimensionality::<Ix4>().unwrap();
                let wv = v[w.0].clone().into_dimensionality::<Ix4>().unwrap();
                let w2 = wv.into_shape_with_order((co, ci * 9)).unwrap();
                let mut gw = Array2::<f64>::zeros((co, ci * 9));
                let mut gb = Array1::<f64>::zeros(co);
                let mut gx = Array4::<f64>::zeros((n, ci, h, wd));
                for s in 0..n {
                    let dout = up4
                        .index_axis(Axis(0), s)
                        .to_owned()
                        .into_shape_with_order((co, h * wd))
                        .unwrap();
                    gw += &dout.dot(&cols[s].t());
                    gb += &dout.sum_axis(Axis(1));
                    let dcol = w2.t().dot(&dout); // [ci*9, h*w]
                    col2im_into(&dcol, &mut gx.index_axis_mut(Axis(0), s), h, wd, ci);
                }
                g[w.0] += &gw.into_shape_with_order((co, ci, 3, 3)).unwrap().into_dyn();
                g[bias.0] += &gb.into_dyn();
                g[x.0] += &gx.into_dyn();
            })),
        )
    }

    /// Nearest-neighbour 2x upsample of `[n,c,h,w]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.values[x.0].clone().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = Array4::<f64>::zeros((n, c, h * 2, w * 2));
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h * 2 {
                    for xx in 0..w * 2 {
                        out[[s, ch, y, xx]] = xv[[s, ch, y / 2, xx / 2]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_v, up, g| {
                let up4 = up.clone().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..h * 2 {
                            for xx in 0..w * 2 {
                                gx[[s, ch, y / 2, xx / 2]] += up4[[s, ch, y, xx]];
                            }
                        }
                    }
                }
                g[x.0] += &gx.into_dyn();
            })),
        )
    }

    /// 2x2 max pooling, stride 2. Height and width must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.values[x.0].clone().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: odd spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, oh, ow));
        let mut arg: Vec<(usize, usize)> = Vec::with_capacity(n * c * oh * ow);
        for s in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = (0, 0);
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = xv[[s, ch, y * 2 + dy, xx * 2 + dx]];
                                if v > best {
                                    best = v;
                                    bi = (y * 2 + dy, xx * 2 + dx);
                                }
                            }
                        }
                        out[[s, ch, y, xx]] = best;
                        arg.push(bi);
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_v, up, g| {
                let up4 = up.clone().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                let mut k = 0;
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let (ay, ax) = arg[k];
                                gx[[s, ch, ay, ax]] += up4[[s, ch, y, xx]];
                                k += 1;
                            }
                        }
                    }
                }
                g[x.0] += &gx.into_dyn();
            })),
        )
    }

    /// Global average pooling `[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.values[x.0].clone().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let area = (h * w) as f64;
        let mut out = Array2::<f64>::zeros((n, c));
        for s in 0..n {
            for ch in 0..c {
                out[[s, ch]] = xv.index_axis(Axis(0), s).index_axis(Axis(0), ch).sum() / area;
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_v, up, g| {
                let up2 = up.clone().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for s in 0..n {
                    for ch in 0..c {
                        let u = up2[[s, ch]] / area;
                        gx.index_axis_mut(Axis(0), s)
                            .index_axis_mut(Axis(0), ch)
                            .mapv_inplace(|v| v + u);
                    }
                }
                g[x.0] += &gx.into_dyn();
            })),
        )
    }

    /// Batch normalization with frozen statistics: per-channel
    /// `y = gamma * (x - mean)/sqrt(var + eps) + beta` over `[n,c,h,w]`.
    /// Only `gamma` and `beta` are tape variables; the statistics are fixed.
    pub fn bn_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let xv = self.values[x.0].clone().into_dimensionality::<Ix4>().unwrap();
        let gv = self.values[gamma.0].clone().into_dimensionality::<Ix1>().unwrap();
        let bv = self.values[beta.0].clone().into_dimensionality::<Ix1>().unwrap();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(gv.len(), c, "bn: gamma width mismatch");
        assert_eq!(bv.len(), c, "bn: beta width mismatch");
        let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mean = mean.clone();
        let mut out = xv.clone();
        for s in 0..n {
            for ch in 0..c {
                let a = gv[ch] * inv_std[ch];
                let b = bv[ch] - gv[ch] * mean[ch] * inv_std[ch];
                out.index_axis_mut(Axis(0), s)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| a * v + b);
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |v, up, g| {
                let up4 = up.clone().into_dimensionality::<Ix4>().unwrap();
                let xv = v[x.0].clone().into_dimensionality::<Ix4>().unwrap();
                let gv = v[gamma.0].clone().into_dimensionality::<Ix1>().unwrap();
                let mut ggamma = Array1::<f64>::zeros(c);
                let mut gbeta = Array1::<f64>::zeros(c);
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for s in 0..n {
                    for ch in 0..c {
                        let istd = inv_std[ch];
                        let m = mean[ch];
                        let u_slice = up4.index_axis(Axis(0), s);
                        let u_slice = u_slice.index_axis(Axis(0), ch);
                        let x_slice = xv.index_axis(Axis(0), s);
                        let x_slice = x_slice.index_axis(Axis(0), ch);
                        let mut gx_slice = gx.index_axis_mut(Axis(0), s);
                        let mut gx_slice = gx_slice.index_axis_mut(Axis(0), ch);
                        for ((u, xval), gxe) in
                            u_slice.iter().zip(x_slice.iter()).zip(gx_slice.iter_mut())
                        {
                            ggamma[ch] += u * (xval - m) * istd;
                            gbeta[ch] += u;
                            *gxe += u * gv[ch] * istd;
                        }
                    }
                }
                g[gamma.0] += &ggamma.into_dyn();
                g[beta.0] += &gbeta.into_dyn();
                g[x.0] += &gx.into_dyn();
            })),
        )
    }

    // ---- classification head ----

    /// Pairwise Euclidean distances between `queries [q,d]` and `protos [n,d]`.
    /// `squared = false` gives the plain (unsquared) distance; a tiny epsilon
    /// keeps the square root differentiable at coincident points.
    pub fn pairwise_dist(&mut self, queries: Var, protos: Var, squared: bool) -> Var {
        let qv = self.values[queries.0].clone().into_dimensionality::<Ix2>().unwrap();
        let pv = self.values[protos.0].clone().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(qv.ncols(), pv.ncols(), "pairwise_dist: dim mismatch");
        let (nq, np) = (qv.nrows(), pv.nrows());
        const EPS: f64 = 1e-12;
        let mut out = Array2::<f64>::zeros((nq, np));
        for i in 0..nq {
            for j in 0..np {
                let s: f64 = qv
                    .row(i)
                    .iter()
                    .zip(pv.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out[[i, j]] = if squared { s } else { (s + EPS).sqrt() };
            }
        }
        let cached = out.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |v, up, g| {
                let up2 = up.clone().into_dimensionality::<Ix2>().unwrap();
                let qv = v[queries.0].clone().into_dimensionality::<Ix2>().unwrap();
                let pv = v[protos.0].clone().into_dimensionality::<Ix2>().unwrap();
                let mut gq = Array2::<f64>::zeros((nq, qv.ncols()));
                let mut gp = Array2::<f64>::zeros((np, pv.ncols()));
                for i in 0..nq {
                    for j in 0..np {
                        let u = up2[[i, j]];
                        if u == 0.0 {
                            continue;
                        }
                        // d(sq)/dq = 2(q-p); d(sqrt)/dq = (q-p)/dist
                        let factor = if squared { 2.0 * u } else { u / cached[[i, j]].max(EPS) };
                        for k in 0..qv.ncols() {
                            let diff = qv[[i, k]] - pv[[j, k]];
                            gq[[i, k]] += factor * diff;
                            gp[[j, k]] -= factor * diff;
                        }
                    }
                }
                g[queries.0] += &gq.into_dyn();
                g[protos.0] += &gp.into_dyn();
            })),
        )
    }

    /// Mean cross-entropy of `softmax(-distances)` against integer labels.
    /// `dists [q,n]`, one label per query row.
    pub fn cross_entropy_neg_dist(&mut self, dists: Var, labels: &[usize]) -> Var {
        let dv = self.values[dists.0].clone().into_dimensionality::<Ix2>().unwrap();
        let (nq, nc) = (dv.nrows(), dv.ncols());
        assert_eq!(labels.len(), nq);
        let labels = labels.to_vec();
        let mut total = 0.0;
        let mut probs = Array2::<f64>::zeros((nq, nc));
        for i in 0..nq {
            // softmax over -d, stabilized by subtracting min distance
            let dmin = dv.row(i).iter().cloned().fold(f64::INFINITY, f64::min);
            let exps: Vec<f64> = dv.row(i).iter().map(|&d| (-(d - dmin)).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..nc {
                probs[[i, j]] = exps[j] / z;
            }
            total += -(probs[[i, labels[i]]]).max(1e-300).ln();
        }
        let out = ArrayD::from_elem(IxDyn(&[]), total / nq as f64);
        self.push(
            out,
            Some(Box::new(move |_v, up, g| {
                let u = up.iter().next().copied().unwrap() / nq as f64;
                // dL/d d_ij = (y_ij - p_ij) since logits = -d
                let mut gd = Array2::<f64>::zeros((nq, nc));
                for i in 0..nq {
                    for j in 0..nc {
                        let y = if labels[i] == j { 1.0 } else { 0.0 };
                        gd[[i, j]] = u * (y - probs[[i, j]]);
                    }
                }
                g[dists.0] += &gd.into_dyn();
            })),
        )
    }

    /// Mean of a selected set of rows of a 2-D value -> 1-D (class prototype).
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.values[x.0].clone().into_dimensionality::<Ix2>().unwrap();
        assert!(!rows.is_empty());
        let rows = rows.to_vec();
        let d = xv.ncols();
        let mut out = Array1::<f64>::zeros(d);
        for &r in &rows {
            out += &xv.row(r);
        }
        out /= rows.len() as f64;
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_v, up, g| {
                let up1 = up.clone().into_dimensionality::<Ix1>().unwrap();
                let scaled = up1.mapv(|v| v / rows.len() as f64);
                let mut gx = g[x.0].clone().into_dimensionality::<Ix2>().unwrap();
                for &r in &rows {
                    let mut row = gx.row_mut(r);
                    row += &scaled;
                }
                g[x.0] = gx.into_dyn();
            })),
        )
    }

    /// Expand a `[gh,gw]` grid to an `[h,w]` map of constant blocks. The axis
    /// partition puts the remainder in the last block: block `i` spans
    /// `[i*h/gh, (i+1)*h/gh)`.
    pub fn upsample_grid(&mut self, grid: Var, h: usize, w: usize) -> Var {
        let gv = self.values[grid.0].clone().into_dimensionality::<Ix2>().unwrap();
        let (gh, gw) = (gv.nrows(), gv.ncols());
        assert!(h >= gh && w >= gw, "upsample_grid: target smaller than grid");
        let mut out = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                out[[y, x]] = gv[[block_index(y, h, gh), block_index(x, w, gw)]];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_v, up, g| {
                let up2 = up.clone().into_dimensionality::<Ix2>().unwrap();
                let mut gg = Array2::<f64>::zeros((gh, gw));
                for y in 0..h {
                    for x in 0..w {
                        gg[[block_index(y, h, gh), block_index(x, w, gw)]] += up2[[y, x]];
                    }
                }
                g[grid.0] += &gg.into_dyn();
            })),
        )
    }

    /// Blend two fixed images with a spatial weight map:
    /// `out[c,y,x] = map[y,x]*a[c,y,x] + (1-map[y,x])*b[c,y,x]`.
    /// Gradient flows to the map only; the images are constants.
    pub fn blend(&mut self, map: Var, a: &Array3<f64>, b: &Array3<f64>) -> Var {
        let mv = self.values[map.0].clone().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(a.shape(), b.shape(), "blend: image shape mismatch");
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(mv.nrows(), h);
        assert_eq!(mv.ncols(), w);
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let m = mv[[y, x]];
                    out[[ch, y, x]] = m * a[[ch, y, x]] + (1.0 - m) * b[[ch, y, x]];
                }
            }
        }
        let a = a.clone();
        let b = b.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_v, up, g| {
                let up3 = up.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut gm = Array2::<f64>::zeros((h, w));
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            gm[[y, x]] += up3[[ch, y, x]] * (a[[ch, y, x]] - b[[ch, y, x]]);
                        }
                    }
                }
                g[map.0] += &gm.into_dyn();
            })),
        )
    }
}

/// Index of the block covering position `pos` when `size` is split into
/// `blocks` near-equal spans (remainder in the last block).
pub fn block_index(pos: usize, size: usize, blocks: usize) -> usize {
    let mut i = 0;
    while i + 1 < blocks && pos >= (i + 1) * size / blocks {
        i += 1;
    }
    // remainder lands in the last block by construction of the edges
    i.min(blocks - 1)
}

fn im2col(x: &Array3<f64>, h: usize, w: usize, ci: usize) -> Array2<f64> {
    let mut col = Array2::<f64>::zeros((ci * 9, h * w));
    for c in 0..ci {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let r = c * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col[[r, y * w + xx]] = x[[c, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im_into(
    dcol: &Array2<f64>,
    gx: &mut ndarray::ArrayViewMut3<f64>,
    h: usize,
    w: usize,
    ci: usize,
) {
    for c in 0..ci {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let r = c * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        gx[[c, sy as usize, sx as usize]] += dcol[[r, y * w + xx]];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    /// Central finite differences of a scalar-valued rebuildable graph with
    /// respect to one leaf.
    fn finite_diff<F>(build: F, leaf_value: &ArrayD<f64>, h: f64) -> ArrayD<f64>
    where
        F: Fn(&ArrayD<f64>) -> f64,
    {
        let mut grad = ArrayD::zeros(leaf_value.raw_dim());
        let mut perturbed = leaf_value.clone();
        for idx in 0..leaf_value.len() {
            let orig = leaf_value.as_slice().unwrap()[idx];
            perturbed.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = build(&perturbed);
            perturbed.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = build(&perturbed);
            perturbed.as_slice_mut().unwrap()[idx] = orig;
            grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-8))
            .fold(0.0, f64::max)
    }

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_matches_finite_differences() {
        let x0 = rand_arr(&[4, 3], 1);
        let w0 = rand_arr(&[5, 3], 2);
        let b0 = rand_arr(&[5], 3);

        let eval = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let y = t.linear(xv, wv, bv);
            let y2 = t.tanh(y);
            let loss = t.mean(y2);
            (t, xv, wv, bv, loss)
        };
        let (t, xv, wv, bv, loss) = eval(&x0, &w0, &b0);
        let grads = t.backward(loss);

        let fd_x = finite_diff(|x| { let (t, _, _, _, l) = eval(x, &w0, &b0); t.scalar(l) }, &x0, 1e-6);
        let fd_w = finite_diff(|w| { let (t, _, _, _, l) = eval(&x0, w, &b0); t.scalar(l) }, &w0, 1e-6);
        let fd_b = finite_diff(|b| { let (t, _, _, _, l) = eval(&x0, &w0, b); t.scalar(l) }, &b0, 1e-6);
        assert!(max_rel_err(grads.get(xv), &fd_x) < 1e-6);
        assert!(max_rel_err(grads.get(wv), &fd_w) < 1e-6);
        assert!(max_rel_err(grads.get(bv), &fd_b) < 1e-6);
    }

    #[test]
    fn conv_bn_pool_match_finite_differences() {
        let x0 = rand_arr(&[2, 2, 4, 4], 10);
        let w0 = rand_arr(&[3, 2, 3, 3], 11);
        let b0 = rand_arr(&[3], 12);
        let g0 = rand_arr(&[3], 13).mapv(|v| v + 1.5);
        let be0 = rand_arr(&[3], 14);
        let mean = arr1(&[0.1, -0.2, 0.3]);
        let var = arr1(&[1.0, 0.5, 2.0]);

        let eval = |x: &ArrayD<f64>, w: &ArrayD<f64>, ga: &ArrayD<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b0.clone());
            let gv = t.leaf(ga.clone());
            let bev = t.leaf(be0.clone());
            let c = t.conv2d(xv, wv, bv);
            let n = t.bn_frozen(c, gv, bev, &mean, &var, 1e-5);
            let r = t.relu(n);
            let p = t.max_pool2(r);
            let gp = t.global_avg_pool(p);
            let loss = t.mean(gp);
            (t, xv, wv, gv, loss)
        };
        let (t, xv, wv, gv, loss) = eval(&x0, &w0, &g0);
        let grads = t.backward(loss);
        let fd_x = finite_diff(|x| { let (t, _, _, _, l) = eval(x, &w0, &g0); t.scalar(l) }, &x0, 1e-6);
        let fd_w = finite_diff(|w| { let (t, _, _, _, l) = eval(&x0, w, &g0); t.scalar(l) }, &w0, 1e-6);
        let fd_g = finite_diff(|g| { let (t, _, _, _, l) = eval(&x0, &w0, g); t.scalar(l) }, &g0, 1e-6);
        assert!(max_rel_err(grads.get(xv), &fd_x) < 1e-5);
        assert!(max_rel_err(grads.get(wv), &fd_w) < 1e-5);
        assert!(max_rel_err(grads.get(gv), &fd_g) < 1e-5);
    }

    #[test]
    fn prototype_head_matches_finite_differences() {
        let q0 = rand_arr(&[4, 3], 20);
        let p0 = rand_arr(&[3, 3], 21);
        let labels = [0usize, 1, 2, 1];
        for squared in [false, true] {
            let eval = |q: &ArrayD<f64>, p: &ArrayD<f64>| {
                let mut t = Tape::new();
                let qv = t.leaf(q.clone());
                let pv = t.leaf(p.clone());
                let d = t.pairwise_dist(qv, pv, squared);
                let loss = t.cross_entropy_neg_dist(d, &labels);
                (t, qv, pv, loss)
            };
            let (t, qv, pv, loss) = eval(&q0, &p0);
            let grads = t.backward(loss);
            let fd_q = finite_diff(|q| { let (t, _, _, l) = eval(q, &p0); t.scalar(l) }, &q0, 1e-6);
            let fd_p = finite_diff(|p| { let (t, _, _, l) = eval(&q0, p); t.scalar(l) }, &p0, 1e-6);
            assert!(max_rel_err(grads.get(qv), &fd_q) < 1e-5, "squared={squared}");
            assert!(max_rel_err(grads.get(pv), &fd_p) < 1e-5, "squared={squared}");
        }
    }

    #[test]
    fn upsample_grid_blocks_are_constant() {
        let mut t = Tape::new();
        let grid = t.leaf(arr2(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).into_dyn());
        let map = t.upsample_grid(grid, 9, 9);
        let m = t.value(map);
        for y in 0..9 {
            for x in 0..9 {
                let expect = if y < 3 && x < 3 { 1.0 } else { 0.0 };
                assert_eq!(m[[y, x]], expect);
            }
        }
    }

    #[test]
    fn block_partition_puts_remainder_last() {
        // 64 split into 3: spans of 21, 21, 22
        let counts: Vec<usize> = (0..3)
            .map(|b| (0..64).filter(|&p| block_index(p, 64, 3) == b).count())
            .collect();
        assert_eq!(counts, vec![21, 21, 22]);
    }

    #[test]
    fn em_sorted_basics() {
        let r = arr1(&[0.3, -1.2, 0.7, 0.0]);
        let mut t = Tape::new();
        let z = t.leaf(r.clone().into_dyn());
        let e = t.em_sorted(z, &r);
        assert_eq!(t.scalar(e), 0.0);

        // constant shift -> |c|
        let mut t = Tape::new();
        let z = t.leaf(r.mapv(|v| v + 0.5).into_dyn());
        let e = t.em_sorted(z, &r);
        assert!((t.scalar(e) - 0.5).abs() < 1e-12);
    }
}
