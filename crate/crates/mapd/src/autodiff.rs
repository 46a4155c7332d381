//! Minimal tape-based reverse-mode array engine. All values are f64;
//! shapes are explicit and checked. Backward closures capture the forward
//! values they need, so the backward pass needs no re-execution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {a:?} vs {b:?}")]
    ShapeMismatch { op: &'static str, a: Vec<usize>, b: Vec<usize> },
}

/// Handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Records a forward computation and differentiates it in reverse
/// topological order. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { shape, value, grad, parents, backward });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(data.len(), numel(shape), "input data length mismatch");
        self.push(shape.to_vec(), data, vec![], None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.input(&[1], vec![v])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Seed the (scalar) root with gradient 1 and sweep the tape backwards.
    pub fn backward(&mut self, root: Var) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        self.nodes[root.0].grad[0] = 1.0;
        for i in (0..=root.0).rev() {
            if self.nodes[i].backward.is_none() {
                continue;
            }
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[i].grad);
            let parent_grads = (self.nodes[i].backward.as_ref().unwrap())(&grad);
            let parents = self.nodes[i].parents.clone();
            self.nodes[i].grad = grad;
            for (p, pg) in parents.into_iter().zip(parent_grads) {
                for (dst, src) in self.nodes[p.0].grad.iter_mut().zip(pg) {
                    *dst += src;
                }
            }
        }
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AdError> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::ShapeMismatch {
                op,
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("add", a, b).unwrap();
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, vec![a, b], Some(Box::new(|dy| vec![dy.to_vec(), dy.to_vec()])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("sub", a, b).unwrap();
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            shape,
            value,
            vec![a, b],
            Some(Box::new(|dy| vec![dy.to_vec(), dy.iter().map(|g| -g).collect()])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same_shape("mul", a, b).unwrap();
        let av = self.value(a).to_vec();
        let bv = self.value(b).to_vec();
        let value: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            shape,
            value,
            vec![a, b],
            Some(Box::new(move |dy| {
                vec![
                    dy.iter().zip(&bv).map(|(g, y)| g * y).collect(),
                    dy.iter().zip(&av).map(|(g, x)| g * x).collect(),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, vec![a], Some(Box::new(move |dy| vec![dy.iter().map(|g| g * k).collect()])))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x + k).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, vec![a], Some(Box::new(|dy| vec![dy.to_vec()])))
    }

    /// Bias broadcast: `a` is `[.., d]`, `b` is `[d]`, added to every row.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let d = *self.shape(a).last().unwrap();
        if self.shape(b) != [d] {
            panic!("add_bias: bias shape {:?} does not match last axis {d}", self.shape(b));
        }
        let bv = self.value(b).to_vec();
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % d])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(
            shape,
            value,
            vec![a, b],
            Some(Box::new(move |dy| {
                let mut db = vec![0.0; d];
                for (i, g) in dy.iter().enumerate() {
                    db[i % d] += g;
                }
                vec![dy.to_vec(), db]
            })),
        )
    }

    fn unary<F, G>(&mut self, a: Var, f: F, df: G) -> Var
    where
        F: Fn(f64) -> f64,
        G: Fn(f64, f64) -> f64 + 'static,
    {
        let input = self.value(a).to_vec();
        let value: Vec<f64> = input.iter().map(|&x| f(x)).collect();
        let out = value.clone();
        let shape = self.shape(a).to_vec();
        self.push(
            shape,
            value,
            vec![a],
            Some(Box::new(move |dy| {
                vec![dy
                    .iter()
                    .zip(input.iter().zip(&out))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect()]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let value = vec![self.value(a).iter().sum()];
        self.push(vec![1], value, vec![a], Some(Box::new(move |dy| vec![vec![dy[0]; n]])))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let value = vec![self.value(a).iter().sum::<f64>() / n as f64];
        self.push(
            vec![1],
            value,
            vec![a],
            Some(Box::new(move |dy| vec![vec![dy[0] / n as f64; n]])),
        )
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).to_vec();
        let bv = self.value(b).to_vec();
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for j in 0..n {
                    value[i * n + j] += x * bv[p * n + j];
                }
            }
        }
        self.push(
            vec![m, n],
            value,
            vec![a, b],
            Some(Box::new(move |dy| {
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let g = dy[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += g * bv[p * n + j];
                            db[p * n + j] += g * av[i * k + p];
                        }
                    }
                }
                vec![da, db]
            })),
        )
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_nt shapes {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let av = self.value(a).to_vec();
        let bv = self.value(b).to_vec();
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                value[i * n + j] = acc;
            }
        }
        self.push(
            vec![m, n],
            value,
            vec![a, b],
            Some(Box::new(move |dy| {
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = dy[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += g * bv[j * k + p];
                            db[j * k + p] += g * av[i * k + p];
                        }
                    }
                }
                vec![da, db]
            })),
        )
    }

    /// `[m, k] x [k] -> [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let sw = self.shape(w).to_vec();
        let sx = self.shape(x).to_vec();
        assert!(sw.len() == 2 && sx.len() == 1 && sw[1] == sx[0], "matvec shapes {sw:?} x {sx:?}");
        let (m, k) = (sw[0], sw[1]);
        let wv = self.value(w).to_vec();
        let xv = self.value(x).to_vec();
        let value: Vec<f64> = (0..m)
            .map(|i| (0..k).map(|p| wv[i * k + p] * xv[p]).sum())
            .collect();
        self.push(
            vec![m],
            value,
            vec![w, x],
            Some(Box::new(move |dy| {
                let mut dw = vec![0.0; m * k];
                let mut dx = vec![0.0; k];
                for i in 0..m {
                    let g = dy[i];
                    if g == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        dw[i * k + p] += g * xv[p];
                        dx[p] += g * wv[i * k + p];
                    }
                }
                vec![dw, dx]
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(self.shape(a)), numel(shape), "reshape element count");
        let value = self.value(a).to_vec();
        self.push(shape.to_vec(), value, vec![a], Some(Box::new(|dy| vec![dy.to_vec()])))
    }

    /// Contiguous 1-D slice `[start, end)`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert_eq!(self.shape(a).len(), 1, "slice expects 1-D input");
        let n = self.value(a).len();
        assert!(start <= end && end <= n);
        let value = self.value(a)[start..end].to_vec();
        self.push(
            vec![end - start],
            value,
            vec![a],
            Some(Box::new(move |dy| {
                let mut dx = vec![0.0; n];
                dx[start..end].copy_from_slice(dy);
                vec![dx]
            })),
        )
    }

    /// Column slice of a `[n, d]` matrix -> `[n, end-start]`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert!(start <= end && end <= d);
        let w = end - start;
        let av = self.value(a);
        let mut value = Vec::with_capacity(n * w);
        for i in 0..n {
            value.extend_from_slice(&av[i * d + start..i * d + end]);
        }
        self.push(
            vec![n, w],
            value,
            vec![a],
            Some(Box::new(move |dy| {
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + end].copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                vec![dx]
            })),
        )
    }

    /// Concatenate `[n, d_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ws = widths.clone();
        self.push(
            vec![n, total],
            value,
            parts.to_vec(),
            Some(Box::new(move |dy| {
                let mut grads: Vec<Vec<f64>> = ws.iter().map(|&w| vec![0.0; n * w]).collect();
                for i in 0..n {
                    let mut off = 0;
                    for (gi, &w) in ws.iter().enumerate() {
                        grads[gi][i * w..(i + 1) * w]
                            .copy_from_slice(&dy[i * total + off..i * total + off + w]);
                        off += w;
                    }
                }
                grads
            })),
        )
    }

    /// Stack 1-D `[d]` vectors into `[n, d]` rows.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let d = self.shape(rows[0])[0];
        let n = rows.len();
        let mut value = Vec::with_capacity(n * d);
        for &r in rows {
            assert_eq!(self.shape(r), [d]);
            value.extend_from_slice(self.value(r));
        }
        self.push(
            vec![n, d],
            value,
            rows.to_vec(),
            Some(Box::new(move |dy| {
                (0..n).map(|i| dy[i * d..(i + 1) * d].to_vec()).collect()
            })),
        )
    }

    /// Extract row `i` of a `[n, d]` matrix as `[d]`.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert!(i < n);
        let value = self.value(a)[i * d..(i + 1) * d].to_vec();
        self.push(
            vec![d],
            value,
            vec![a],
            Some(Box::new(move |dy| {
                let mut dx = vec![0.0; n * d];
                dx[i * d..(i + 1) * d].copy_from_slice(dy);
                vec![dx]
            })),
        )
    }

    /// Row lookup in an embedding table `[v, d]`.
    pub fn embedding(&mut self, table: Var, idx: usize) -> Var {
        self.row(table, idx)
    }

    // ---- nonlinear blocks ----

    /// Softmax over the last axis (each row independently).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap();
        let rows = numel(&s) / d;
        let av = self.value(a);
        let mut value = vec![0.0; av.len()];
        for r in 0..rows {
            let row = &av[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                value[r * d + j] = e;
                z += e;
            }
            for j in 0..d {
                value[r * d + j] /= z;
            }
        }
        let out = value.clone();
        self.push(
            s,
            value,
            vec![a],
            Some(Box::new(move |dy| {
                let mut dx = vec![0.0; dy.len()];
                for r in 0..rows {
                    let y = &out[r * d..(r + 1) * d];
                    let g = &dy[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = y[j] * (g[j] - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap();
        assert_eq!(self.shape(gain), [d]);
        assert_eq!(self.shape(bias), [d]);
        let rows = numel(&s) / d;
        let av = self.value(a).to_vec();
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let mut value = vec![0.0; av.len()];
        let mut xhat = vec![0.0; av.len()];
        let mut inv_sigma = vec![0.0; rows];
        for r in 0..rows {
            let row = &av[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_sigma[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                value[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        self.push(
            s,
            value,
            vec![a, gain, bias],
            Some(Box::new(move |dy| {
                let mut dx = vec![0.0; dy.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let g = &dy[r * d..(r + 1) * d];
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dg[j] += g[j] * xh[j];
                        db[j] += g[j];
                        dxhat[j] = g[j] * gv[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            inv_sigma[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                vec![dx, dg, db]
            })),
        )
    }

    /// 2-D convolution, stride 1, zero padding preserving spatial dims.
    /// `x: [c, h, w]`, `weight: [o, c, kh, kw]`, `bias: [o]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        assert_eq!(sx.len(), 3, "conv2d input must be [c,h,w]");
        assert_eq!(sw.len(), 4, "conv2d weight must be [o,c,kh,kw]");
        assert_eq!(sx[0], sw[1], "conv2d channel mismatch");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        assert_eq!(self.shape(bias), [o]);
        let (ph, pw) = (kh / 2, kw / 2);
        let xv = self.value(x).to_vec();
        let wv = self.value(weight).to_vec();
        let bv = self.value(bias).to_vec();
        let mut value = vec![0.0; o * h * w];
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bv[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = y as i64 + ky as i64 - ph as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = xx as i64 + kx as i64 - pw as i64;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                acc += wv[((oc * c + ic) * kh + ky) * kw + kx]
                                    * xv[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    value[(oc * h + y) * w + xx] = acc;
                }
            }
        }
        self.push(
            vec![o, h, w],
            value,
            vec![x, weight, bias],
            Some(Box::new(move |dy| {
                let mut dx = vec![0.0; c * h * w];
                let mut dw = vec![0.0; o * c * kh * kw];
                let mut db = vec![0.0; o];
                for oc in 0..o {
                    for y in 0..h {
                        for xx in 0..w {
                            let g = dy[(oc * h + y) * w + xx];
                            if g == 0.0 {
                                continue;
                            }
                            db[oc] += g;
                            for ic in 0..c {
                                for ky in 0..kh {
                                    let iy = y as i64 + ky as i64 - ph as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = xx as i64 + kx as i64 - pw as i64;
                                        if ix < 0 || ix >= w as i64 {
                                            continue;
                                        }
                                        let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                                        let xi = (ic * h + iy as usize) * w + ix as usize;
                                        dx[xi] += g * wv[wi];
                                        dw[wi] += g * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx, dw, db]
            })),
        )
    }

    /// 2x2 max pooling, stride 2, floor output dims; gradient routes to the
    /// first-scanned argmax on ties.
    pub fn maxpool2d(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "maxpool2d input too small: {s:?}");
        let xv = self.value(x).to_vec();
        let mut value = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ic in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let xi = (ic * h + 2 * y + ky) * w + 2 * xx + kx;
                            if xv[xi] > best {
                                best = xv[xi];
                                best_i = xi;
                            }
                        }
                    }
                    value[(ic * oh + y) * ow + xx] = best;
                    argmax[(ic * oh + y) * ow + xx] = best_i;
                }
            }
        }
        let n_in = c * h * w;
        self.push(
            vec![c, oh, ow],
            value,
            vec![x],
            Some(Box::new(move |dy| {
                let mut dx = vec![0.0; n_in];
                for (i, &src) in argmax.iter().enumerate() {
                    dx[src] += dy[i];
                }
                vec![dx]
            })),
        )
    }
}

// ---- LSTM ----

/// Parameter handles for one LSTM cell; gate order in the stacked matrices
/// is [input, forget, output, candidate].
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

/// Standard LSTM cell step. `x: [d_in]`, `h, c: [d_h]`,
/// `wx: [4*d_h, d_in]`, `wh: [4*d_h, d_h]`, `b: [4*d_h]`.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, params: &LstmVars) -> (Var, Var) {
    let dh = tape.shape(h)[0];
    let zx = tape.matvec(params.wx, x);
    let zh = tape.matvec(params.wh, h);
    let z0 = tape.add(zx, zh);
    let z = tape.add(z0, params.b);
    let i = tape.slice(z, 0, dh);
    let f = tape.slice(z, dh, 2 * dh);
    let o = tape.slice(z, 2 * dh, 3 * dh);
    let g = tape.slice(z, 3 * dh, 4 * dh);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let o = tape.sigmoid(o);
    let g = tape.tanh(g);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc);
    (h_new, c_new)
}

// ---- gradient checking ----

/// Compare tape gradients against central finite differences. Returns the
/// max over coordinates of |g_tape - g_fd| / max(1, |g_fd|).
pub fn grad_check<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |datas: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(datas)
            .map(|((shape, _), data)| tape.input(shape, data.clone()))
            .collect();
        let out = f(&mut tape, &vars);
        tape.backward(out);
        let grads = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();
        (tape.scalar_value(out), grads)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (_, tape_grads) = run(&base);
    let mut max_err: f64 = 0.0;
    for (vi, data) in base.iter().enumerate() {
        for k in 0..data.len() {
            let mut plus = base.clone();
            plus[vi][k] += eps;
            let mut minus = base.clone();
            minus[vi][k] -= eps;
            let (fp, _) = run(&plus);
            let (fm, _) = run(&minus);
            let fd = (fp - fm) / (2.0 * eps);
            let err = (tape_grads[vi][k] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}

// ---- checkpoints ----

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub entries: Vec<CheckpointEntry>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Write named arrays as `<stem>.json` (header) + `<stem>.bin` (f64le blob).
pub fn save_checkpoint(stem: &std::path::Path, arrays: &[(String, Vec<usize>, &[f64])]) -> std::io::Result<()> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in arrays {
        entries.push(CheckpointEntry { name: name.clone(), shape: shape.clone(), offset });
        for v in *data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += data.len();
    }
    let header = CheckpointHeader { version: CHECKPOINT_VERSION, entries };
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&header).unwrap())?;
    std::fs::write(stem.with_extension("bin"), blob)
}

pub fn load_checkpoint(stem: &std::path::Path) -> std::io::Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let header: CheckpointHeader =
        serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let blob = std::fs::read(stem.with_extension("bin"))?;
    let floats: Vec<f64> = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut out = Vec::new();
    for e in header.entries {
        let n = numel(&e.shape);
        out.push((e.name, e.shape.clone(), floats[e.offset..e.offset + n].to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(&[3], vec![0.0, 0.0, 0.0]);
        let y = tape.softmax_rows(x);
        for v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(&[2], vec![1.0, 2.0]);
        let sq = tape.mul(x, x);
        let s = tape.sum(sq);
        tape.backward(s);
        assert_eq!(tape.grad(x), &[2.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel_doubles() {
        let mut tape = Tape::new();
        let x = tape.input(&[1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let w = tape.input(&[1, 1, 1, 1], vec![2.0]);
        let b = tape.input(&[1], vec![0.0]);
        let y = tape.conv2d(x, w, b);
        let expect: Vec<f64> = (1..=9).map(|v| 2.0 * v as f64).collect();
        assert_eq!(tape.value(y), &expect[..]);
    }

    #[test]
    fn lstm_zero_params() {
        let mut tape = Tape::new();
        let dh = 3;
        let x = tape.input(&[2], vec![0.1, -0.2]);
        let c0 = vec![0.5, -1.0, 2.0];
        let h = tape.input(&[dh], vec![0.0; dh]);
        let c = tape.input(&[dh], c0.clone());
        let params = LstmVars {
            wx: tape.input(&[4 * dh, 2], vec![0.0; 4 * dh * 2]),
            wh: tape.input(&[4 * dh, dh], vec![0.0; 4 * dh * dh]),
            b: tape.input(&[4 * dh], vec![0.0; 4 * dh]),
        };
        let (h1, c1) = lstm_step(&mut tape, x, h, c, &params);
        for (j, &c0j) in c0.iter().enumerate() {
            assert!((tape.value(c1)[j] - 0.5 * c0j).abs() < 1e-12);
            assert!((tape.value(h1)[j] - 0.5 * (0.5 * c0j).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_simple_sum() {
        let err = grad_check(
            |t, xs| t.sum(xs[0]),
            &[(vec![4], vec![0.3, -0.7, 1.1, 0.0])],
            1e-5,
        );
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn grad_check_softmax_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = randn(&mut rng, 12);
        let x = randn(&mut rng, 4);
        let y = randn(&mut rng, 3);
        let err = grad_check(
            |t, vs| {
                let wx = t.matvec(vs[0], vs[1]);
                let sm = t.softmax_rows(wx);
                let prod = t.mul(sm, vs[2]);
                t.sum(prod)
            },
            &[(vec![3, 4], w), (vec![4], x), (vec![3], y)],
            1e-5,
        );
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn grad_check_lstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dh = 3;
        let din = 2;
        let inputs = vec![
            (vec![din], randn(&mut rng, din)),
            (vec![dh], randn(&mut rng, dh)),
            (vec![dh], randn(&mut rng, dh)),
            (vec![4 * dh, din], randn(&mut rng, 4 * dh * din)),
            (vec![4 * dh, dh], randn(&mut rng, 4 * dh * dh)),
            (vec![4 * dh], randn(&mut rng, 4 * dh)),
        ];
        let err = grad_check(
            |t, vs| {
                let params = LstmVars { wx: vs[3], wh: vs[4], b: vs[5] };
                let (h1, c1) = lstm_step(t, vs[0], vs[1], vs[2], &params);
                let hs = t.mul(h1, h1);
                let cs = t.mul(c1, c1);
                let a = t.sum(hs);
                let b = t.sum(cs);
                let s = t.add(a, b);
                t.mean(s)
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.input(&[1, 2, 2], vec![1.0, 5.0, 3.0, 5.0]);
        let y = tape.maxpool2d(x);
        assert_eq!(tape.value(y), &[5.0]);
        let s = tape.sum(y);
        tape.backward(s);
        // first-scanned max (index 1) receives the whole gradient
        assert_eq!(tape.grad(x), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let a = vec![1.0, 2.0, 3.0];
        let b = vec![-0.5; 4];
        save_checkpoint(
            &stem,
            &[("a".into(), vec![3], &a[..]), ("b".into(), vec![2, 2], &b[..])],
        )
        .unwrap();
        let loaded = load_checkpoint(&stem).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0], ("a".to_string(), vec![3], a));
        assert_eq!(loaded[1].1, vec![2, 2]);
        assert_eq!(loaded[1].2, b);
    }
}
