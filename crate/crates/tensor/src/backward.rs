use crate::error::{Result, TensorError};
use crate::graph::{swap_mid_data, Graph, Op, Var};
use crate::kernels::{gemm, sigmoid};

fn buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph<'_> {
    /// Reverse sweep from a scalar `loss`. Tracked leaves accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.last_visits = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.last_visits += 1;
            self.backward_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Tracked) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn len_of(&self, v: Var) -> usize {
        self.value(v).len()
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Constant | Op::Tracked => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let sb = self.shape(b);
                let (s, t) = (sb[0], sb[1]);
                let r = self.len_of(a) / s;
                if self.needs(a) {
                    let ga = buf(grads, a, r * s);
                    gemm(r, t, s, g, (t as isize, 1), self.value(b), (1, t as isize), ga, 1.0);
                }
                if self.needs(b) {
                    if self.inject_fault {
                        let mut tmp = vec![0.0; s * t];
                        gemm(s, r, t, self.value(a), (1, s as isize), g, (t as isize, 1), &mut tmp, 0.0);
                        let gb = buf(grads, b, s * t);
                        gb.iter_mut().zip(&tmp).for_each(|(x, y)| *x += 0.5 * y);
                    } else {
                        let gb = buf(grads, b, s * t);
                        gemm(s, r, t, self.value(a), (1, s as isize), g, (t as isize, 1), gb, 1.0);
                    }
                }
            }
            Op::Bmm { a, b, batch, r, s, t, trans_b } => {
                let (a, b, batch, r, s, t, trans_b) = (*a, *b, *batch, *r, *s, *t, *trans_b);
                if self.needs(a) {
                    let bv = self.value(b);
                    let ga = buf(grads, a, batch * r * s);
                    for k in 0..batch {
                        let gk = &g[k * r * t..(k + 1) * r * t];
                        let bk = &bv[k * s * t..(k + 1) * s * t];
                        // dA = G · Bᵀ (B stored s×t), or G · B when B is stored t×s.
                        let strides = if trans_b { (s as isize, 1) } else { (1, t as isize) };
                        gemm(r, t, s, gk, (t as isize, 1), bk, strides, &mut ga[k * r * s..(k + 1) * r * s], 1.0);
                    }
                }
                if self.needs(b) {
                    let av = self.value(a);
                    let gb = buf(grads, b, batch * s * t);
                    for k in 0..batch {
                        let gk = &g[k * r * t..(k + 1) * r * t];
                        let ak = &av[k * r * s..(k + 1) * r * s];
                        let out = &mut gb[k * s * t..(k + 1) * s * t];
                        if trans_b {
                            // dB (t×s) = Gᵀ · A
                            gemm(t, r, s, gk, (1, t as isize), ak, (s as isize, 1), out, 1.0);
                        } else {
                            // dB (s×t) = Aᵀ · G
                            gemm(s, r, t, ak, (1, s as isize), gk, (t as isize, 1), out, 1.0);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        buf(grads, v, g.len()).iter_mut().zip(g).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if self.needs(*b) {
                    buf(grads, *b, g.len()).iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bv = self.value(b);
                    let ga = buf(grads, a, g.len());
                    for ((x, d), o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += d * o;
                    }
                }
                if self.needs(b) {
                    let av = self.value(a);
                    let gb = buf(grads, b, g.len());
                    for ((x, d), o) in gb.iter_mut().zip(g).zip(av) {
                        *x += d * o;
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs(*a) {
                    buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if self.needs(*bias) {
                    let c = self.len_of(*bias);
                    let gb = buf(grads, *bias, c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(x, d)| *x += c * d);
                }
            }
            Op::Relu(a) => self.unary_back(*a, g, grads, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Silu(a) => self.unary_back(*a, g, grads, |x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }),
            Op::Tanh(a) => {
                let a = *a;
                if self.needs(a) {
                    let ga = buf(grads, a, g.len());
                    for ((x, d), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += d * (1.0 - yv * yv);
                    }
                }
            }
            Op::Exp(a) => {
                let a = *a;
                if self.needs(a) {
                    let ga = buf(grads, a, g.len());
                    for ((x, d), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += d * yv;
                    }
                }
            }
            Op::Log(a) => self.unary_back(*a, g, grads, |x| 1.0 / x),
            Op::Softmax { a, cols } => {
                let (a, cols) = (*a, *cols);
                if self.needs(a) {
                    let ga = buf(grads, a, g.len());
                    for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                if self.needs(*a) {
                    let n = self.len_of(*a);
                    let cols = n / idx.len().max(1);
                    let ga = buf(grads, *a, n);
                    for (r, (&c, d)) in idx.iter().zip(g).enumerate() {
                        ga[r * cols + c] += d;
                    }
                }
            }
            Op::GatherCols { a, idx, k } => {
                if self.needs(*a) {
                    let n = self.len_of(*a);
                    let rows = idx.len() / k;
                    let cols = n / rows.max(1);
                    let ga = buf(grads, *a, n);
                    for (f, (&c, d)) in idx.iter().zip(g).enumerate() {
                        ga[(f / k) * cols + c] += d;
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if self.needs(*a) {
                    let n = self.len_of(*a);
                    let cols = *self.shape(Var(i)).last().unwrap();
                    let ga = buf(grads, *a, n);
                    for (r, &src) in idx.iter().enumerate() {
                        for (x, d) in ga[src * cols..(src + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *x += d;
                        }
                    }
                }
            }
            Op::ScatterRows { a, idx } => {
                if self.needs(*a) {
                    let n = self.len_of(*a);
                    let cols = *self.shape(Var(i)).last().unwrap();
                    let ga = buf(grads, *a, n);
                    for (r, &dst) in idx.iter().enumerate() {
                        for (x, d) in ga[r * cols..(r + 1) * cols].iter_mut().zip(&g[dst * cols..(dst + 1) * cols]) {
                            *x += d;
                        }
                    }
                }
            }
            Op::RowScale { a, w } => {
                let (a, w) = (*a, *w);
                let rows = self.len_of(w);
                let cols = g.len() / rows.max(1);
                if self.needs(a) {
                    let wv = self.value(w);
                    let ga = buf(grads, a, g.len());
                    for ((out, gr), s) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(wv) {
                        out.iter_mut().zip(gr).for_each(|(x, d)| *x += d * s);
                    }
                }
                if self.needs(w) {
                    let av = self.value(a);
                    let gw = buf(grads, w, rows);
                    for ((x, gr), ar) in gw.iter_mut().zip(g.chunks(cols)).zip(av.chunks(cols)) {
                        *x += gr.iter().zip(ar).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.needs(p) {
                        let gp = buf(grads, p, rows * w);
                        for r in 0..rows {
                            for (x, d) in gp[r * w..(r + 1) * w].iter_mut().zip(&g[r * total + off..r * total + off + w]) {
                                *x += d;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::MeanRows { a, groups, rows } => {
                let (a, groups, rows) = (*a, *groups, *rows);
                if self.needs(a) {
                    let cols = g.len() / groups.max(1);
                    let inv = 1.0 / rows as f64;
                    let ga = buf(grads, a, groups * rows * cols);
                    for gi in 0..groups {
                        let gr = &g[gi * cols..(gi + 1) * cols];
                        for r in 0..rows {
                            let off = (gi * rows + r) * cols;
                            ga[off..off + cols].iter_mut().zip(gr).for_each(|(x, d)| *x += d * inv);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let n = self.len_of(*a);
                    buf(grads, *a, n).iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = self.len_of(*a);
                    let d = g[0] / n as f64;
                    buf(grads, *a, n).iter_mut().for_each(|x| *x += d);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::SwapMid { a, dims } => {
                if self.needs(*a) {
                    let back = swap_mid_data(g, [dims[0], dims[2], dims[1], dims[3]]);
                    buf(grads, *a, g.len()).iter_mut().zip(&back).for_each(|(x, d)| *x += d);
                }
            }
            Op::InstanceNorm { x, gamma, beta, dims, xhat, inv_std } => {
                let [b, n, d] = *dims;
                let (x, gamma, beta) = (*x, *gamma, *beta);
                if self.needs(beta) {
                    let gb = buf(grads, beta, d);
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
                if self.needs(gamma) {
                    let gg = buf(grads, gamma, d);
                    for (row, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, v), xh) in gg.iter_mut().zip(row).zip(xr) {
                            *o += v * xh;
                        }
                    }
                }
                if self.needs(x) {
                    let gv = self.value(gamma).to_vec();
                    let gx = buf(grads, x, b * n * d);
                    let nf = n as f64;
                    for bi in 0..b {
                        let base = bi * n * d;
                        for j in 0..d {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for r in 0..n {
                                let k = base + r * d + j;
                                let dxh = g[k] * gv[j];
                                s1 += dxh;
                                s2 += dxh * xhat[k];
                            }
                            let is = inv_std[bi * d + j];
                            for r in 0..n {
                                let k = base + r * d + j;
                                let dxh = g[k] * gv[j];
                                gx[k] += is / nf * (nf * dxh - s1 - xhat[k] * s2);
                            }
                        }
                    }
                }
            }
        }
    }

    fn unary_back(&self, a: Var, g: &[f64], grads: &mut [Option<Vec<f64>>], df: impl Fn(f64) -> f64) {
        if self.needs(a) {
            let av = self.value(a);
            let ga = buf(grads, a, g.len());
            for ((o, d), &x) in ga.iter_mut().zip(g).zip(av) {
                *o += d * df(x);
            }
        }
    }
}
