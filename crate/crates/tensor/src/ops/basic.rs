use crate::error::{cfg_err, dim_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::numel;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for every element of `x.permute(axes)`, in output order.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n = numel(&out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let off: usize = idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum();
        out.push(off);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            "add",
            &[a, b],
            shape,
            data,
            Box::new(|args| vec![Some(args.grad.to_vec()), Some(args.grad.to_vec())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            "sub",
            &[a, b],
            shape,
            data,
            Box::new(|args| vec![Some(args.grad.to_vec()), Some(args.grad.iter().map(|g| -g).collect())]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            "mul",
            &[a, b],
            shape,
            data,
            Box::new(|args| {
                let (x, y) = (args.inputs[0].data(), args.inputs[1].data());
                vec![
                    args.needs[0].then(|| args.grad.iter().zip(y).map(|(g, y)| g * y).collect()),
                    args.needs[1].then(|| args.grad.iter().zip(x).map(|(g, x)| g * x).collect()),
                ]
            }),
        )
    }

    /// Sum of several same-shaped variables.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return Err(cfg_err("add_n", "no operands"));
        };
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.custom(
            "scale",
            &[x],
            shape,
            data,
            Box::new(move |args| vec![Some(args.grad.iter().map(|g| g * c).collect())]),
        )
    }

    /// `x * a + b` with scalar constants.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * a + b).collect();
        let shape = self.shape(x).to_vec();
        self.custom(
            "affine",
            &[x],
            shape,
            data,
            Box::new(move |args| vec![Some(args.grad.iter().map(|g| g * a).collect())]),
        )
    }

    /// `x + y` where the shape of `y` is a suffix of the shape of `x`.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != ys[..] {
            return Err(dim_err("add_bcast", &xs, &ys));
        }
        let inner = numel(&ys);
        let yd = self.data(y);
        let data = self
            .data(x)
            .chunks(inner)
            .flat_map(|c| c.iter().zip(yd).map(|(a, b)| a + b))
            .collect();
        self.custom(
            "add_bcast",
            &[x, y],
            xs,
            data,
            Box::new(move |args| {
                let gy = args.needs[1].then(|| {
                    let mut acc = vec![0.0; inner];
                    for c in args.grad.chunks(inner) {
                        acc.iter_mut().zip(c).for_each(|(a, g)| *a += g);
                    }
                    acc
                });
                vec![Some(args.grad.to_vec()), gy]
            }),
        )
    }

    /// Repeat `x` along a new leading axis of size `n`.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let inner = numel(&xs);
        let src = self.data(x);
        let data: Vec<f64> = (0..n).flat_map(|_| src.iter().copied()).collect();
        let mut shape = vec![n];
        shape.extend_from_slice(&xs);
        self.custom(
            "expand_leading",
            &[x],
            shape,
            data,
            Box::new(move |args| {
                let mut acc = vec![0.0; inner];
                for c in args.grad.chunks(inner) {
                    acc.iter_mut().zip(c).for_each(|(a, g)| *a += g);
                }
                vec![Some(acc)]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(dim_err("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        self.custom(
            "reshape",
            &[x],
            shape.to_vec(),
            data,
            Box::new(|args| vec![Some(args.grad.to_vec())]),
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len()
            || axes
                .iter()
                .any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(dim_err("permute", &xs, axes));
        }
        let index = permute_index(&xs, axes);
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&a| xs[a]).collect();
        self.custom(
            "permute",
            &[x],
            out_shape,
            data,
            Box::new(move |args| {
                let mut g = vec![0.0; index.len()];
                for (o, &i) in index.iter().enumerate() {
                    g[i] = args.grad[o];
                }
                vec![Some(g)]
            }),
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(dim_err("slice", &xs, &[axis, start, len]));
        }
        let outer = numel(&xs[..axis]);
        let inner = numel(&xs[axis + 1..]);
        let full = xs[axis];
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = len;
        let total = numel(&xs);
        self.custom(
            "slice",
            &[x],
            shape,
            data,
            Box::new(move |args| {
                let mut g = vec![0.0; total];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &args.grad[o * len * inner..(o + 1) * len * inner];
                    g[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(cfg_err("concat", "no operands"));
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(dim_err("concat", &s0, &[axis]));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(dim_err("concat", &s0, s));
            }
            widths.push(s[axis]);
        }
        let outer = numel(&s0[..axis]);
        let inner = numel(&s0[axis + 1..]);
        let total_w: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total_w * inner);
        for o in 0..outer {
            for (&x, &w) in xs.iter().zip(&widths) {
                let src = self.data(x);
                data.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total_w;
        self.custom(
            "concat",
            xs,
            shape,
            data,
            Box::new(move |args| {
                let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(outer * w * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, &w) in widths.iter().enumerate() {
                        out[k].extend_from_slice(&args.grad[pos..pos + w * inner]);
                        pos += w * inner;
                    }
                }
                out.into_iter().map(Some).collect()
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().sum();
        let n = self.value(x).len();
        self.custom(
            "sum_all",
            &[x],
            vec![1],
            vec![s],
            Box::new(move |args| vec![Some(vec![args.grad[0]; n])]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s: f64 = self.data(x).iter().sum::<f64>() / n as f64;
        self.custom(
            "mean_all",
            &[x],
            vec![1],
            vec![s],
            Box::new(move |args| vec![Some(vec![args.grad[0] / n as f64; n])]),
        )
    }

    /// Mean over the leading axis: `[n, ...] -> [...]`.
    pub fn mean_leading(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || xs[0] == 0 {
            return Err(dim_err("mean_leading", &xs, &[]));
        }
        let n = xs[0];
        let inner = numel(&xs[1..]);
        let mut acc = vec![0.0; inner];
        for c in self.data(x).chunks(inner) {
            acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        self.custom(
            "mean_leading",
            &[x],
            xs[1..].to_vec(),
            acc,
            Box::new(move |args| {
                let g: Vec<f64> = (0..n).flat_map(|_| args.grad.iter().map(|g| g / n as f64)).collect();
                vec![Some(g)]
            }),
        )
    }

    /// Mean squared elementwise difference; both operands receive gradients.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.custom(
            "mse",
            &[a, b],
            vec![1],
            vec![s],
            Box::new(move |args| {
                let (x, y) = (args.inputs[0].data(), args.inputs[1].data());
                let g0 = args.grad[0];
                let ga: Vec<f64> = x.iter().zip(y).map(|(x, y)| 2.0 * (x - y) / n * g0).collect();
                let gb = args.needs[1].then(|| ga.iter().map(|v| -v).collect());
                vec![Some(ga), gb]
            }),
        )
    }

    /// `Σ x_i w_i` against a constant weight vector.
    pub fn dot_const(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(dim_err("dot_const", self.shape(x), &[w.len()]));
        }
        let s = self.data(x).iter().zip(w).map(|(a, b)| a * b).sum();
        let w = w.to_vec();
        self.custom(
            "dot_const",
            &[x],
            vec![1],
            vec![s],
            Box::new(move |args| vec![Some(w.iter().map(|v| v * args.grad[0]).collect())]),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.custom(
            "tanh",
            &[x],
            shape,
            data,
            Box::new(|args| {
                let y = args.output.data();
                vec![Some(args.grad.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())]
            }),
        )
    }

    /// `[B, D] -> [B, D, h, w]`, every spatial position a copy of the row.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(dim_err("broadcast_spatial", &xs, &[0, 0]));
        }
        let (b, d) = (xs[0], xs[1]);
        let hw = h * w;
        let src = self.data(x);
        let data: Vec<f64> = src.iter().flat_map(|&v| std::iter::repeat_n(v, hw)).collect();
        debug_assert_eq!(data.len(), b * d * hw);
        self.custom(
            "broadcast_spatial",
            &[x],
            vec![b, d, h, w],
            data,
            Box::new(move |args| vec![Some(args.grad.chunks(hw).map(|c| c.iter().sum()).collect())]),
        )
    }
}
