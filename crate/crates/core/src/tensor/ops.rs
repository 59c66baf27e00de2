//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::conv::{conv1d, conv1d_backward, ConvGeom, ConvSpec};
use super::{sigmoid, softplus, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn unary<'t>(x: Var<'t>, op: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
    let xv = x.value();
    let out: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
    let out = Rc::new(Tensor::new(xv.dims(), out).unwrap());
    let yv = out.clone();
    x.tape().custom(op, &[x], (*out).clone(), move || {
        Box::new(move |g| {
            let dx = g
                .iter()
                .zip(xv.data())
                .zip(yv.data())
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(dx)]
        })
    })
}

impl<'t> Var<'t> {
    /// 2-D convolution over an NCHW input.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, spec: ConvSpec) -> Result<Var<'t>> {
        spec.validate()?;
        let xv = self.value();
        let wv = weight.value();
        let (n, c, h, w) = xv.nchw("conv2d")?;
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c} != in_channels {}", spec.in_channels),
            ));
        }
        if wv.dims() != spec.weight_dims() {
            return Err(Error::shape(
                "conv2d",
                format!("weight dims {:?} != expected {:?}", wv.dims(), spec.weight_dims()),
            ));
        }
        let bv = match (bias, spec.bias) {
            (Some(b), true) => {
                let bv = b.value();
                if bv.dims() != [spec.out_channels] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias dims {:?} != [{}]", bv.dims(), spec.out_channels),
                    ));
                }
                Some(bv)
            }
            (None, false) => None,
            (Some(_), false) => return Err(Error::shape("conv2d", "bias given but spec.bias is false")),
            (None, true) => return Err(Error::shape("conv2d", "spec.bias is true but no bias given")),
        };
        let (oh, ow) = spec.output_hw(h, w)?;
        let geom = ConvGeom { spec, h, w, oh, ow };
        let out = geom.forward(n, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let out = Tensor::new(&[n, spec.out_channels, oh, ow], out)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let want = (
            self.needs_grad(),
            weight.needs_grad(),
            bias.is_some_and(|b| b.needs_grad()),
        );
        Ok(self.tape().custom("conv2d", &inputs, out, move || {
            Box::new(move |g| {
                let (dx, dw, db) = geom.backward(n, xv.data(), wv.data(), g, want);
                let mut res = vec![dx, dw];
                if spec.bias {
                    res.push(db);
                }
                res
            })
        }))
    }

    /// Same-padded 1-D convolution across the channel axis of an `(n, c, 1, 1)` descriptor.
    pub fn conv1d_channels(self, kernel: Var<'t>) -> Result<Var<'t>> {
        let xv = self.value();
        let kv = kernel.value();
        let (n, c, h, w) = xv.nchw("conv1d")?;
        if h != 1 || w != 1 {
            return Err(Error::shape(
                "conv1d",
                format!("expected (n, c, 1, 1) descriptor, got {:?}", xv.dims()),
            ));
        }
        if kv.dims().len() != 1 {
            return Err(Error::shape(
                "conv1d",
                format!("kernel must be rank 1, got {:?}", kv.dims()),
            ));
        }
        let mut out = Vec::with_capacity(n * c);
        for row in xv.data().chunks(c) {
            out.extend(conv1d(row, kv.data())?);
        }
        let out = Tensor::new(xv.dims(), out)?;
        Ok(self.tape().custom("conv1d", &[self, kernel], out, move || {
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(n * c);
                let mut dk = vec![0.0; kv.numel()];
                for (row, gr) in xv.data().chunks(c).zip(g.chunks(c)) {
                    let (rdx, rdk) = conv1d_backward(row, kv.data(), gr);
                    dx.extend(rdx);
                    dk.iter_mut().zip(rdk).for_each(|(a, b)| *a += b);
                }
                vec![Some(dx), Some(dk)]
            })
        }))
    }

    /// Mean over the spatial extent; output `(n, c, 1, 1)`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let xv = self.value();
        let (n, c, h, w) = xv.nchw("global_avg_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], out)?;
        Ok(self.tape().custom("global_avg_pool", &[self], out, move || {
            Box::new(move |g| {
                let dx = g
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi / plane as f64, plane))
                    .collect();
                vec![Some(dx)]
            })
        }))
    }

    /// Max over the spatial extent; output `(n, c, 1, 1)`.
    ///
    /// The backward pass routes each gradient to the first maximal element in
    /// row-major order.
    pub fn global_max_pool(self) -> Result<Var<'t>> {
        let xv = self.value();
        let (n, c, h, w) = xv.nchw("global_max_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::shape("global_max_pool", "empty spatial extent"));
        }
        let argmax: Vec<usize> = xv
            .data()
            .chunks(plane)
            .map(|p| {
                let mut best = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        let out: Vec<f64> = argmax
            .iter()
            .enumerate()
            .map(|(i, &a)| xv.data()[i * plane + a])
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], out)?;
        let len = xv.numel();
        Ok(self.tape().custom("global_max_pool", &[self], out, move || {
            Box::new(move |g| {
                let mut dx = vec![0.0; len];
                for (i, (&a, &gi)) in argmax.iter().zip(g).enumerate() {
                    dx[i * plane + a] = gi;
                }
                vec![Some(dx)]
            })
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_dims("add", &a, &b)?;
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.dims(), out)?;
        Ok(self.tape().custom("add", &[self, other], out, || {
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())])
        }))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_dims("mul", &a, &b)?;
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.dims(), out)?;
        Ok(self.tape().custom("mul", &[self, other], out, move || {
            Box::new(move |g| {
                let da = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                vec![Some(da), Some(db)]
            })
        }))
    }

    /// Scales each `(n, c)` plane of `self` by the matching entry of an `(n, c, 1, 1)` tensor.
    pub fn mul_channel(self, scale: Var<'t>) -> Result<Var<'t>> {
        let (x, s) = (self.value(), scale.value());
        let (n, c, h, w) = x.nchw("mul_channel")?;
        if s.dims() != [n, c, 1, 1] {
            return Err(Error::shape(
                "mul_channel",
                format!("scale dims {:?} do not broadcast over {:?}", s.dims(), x.dims()),
            ));
        }
        let plane = h * w;
        let out: Vec<f64> = x
            .data()
            .chunks(plane)
            .zip(s.data())
            .flat_map(|(p, &sv)| p.iter().map(move |v| v * sv))
            .collect();
        let out = Tensor::new(x.dims(), out)?;
        Ok(self.tape().custom("mul_channel", &[self, scale], out, move || {
            Box::new(move |g| {
                let dx = g
                    .chunks(plane)
                    .zip(s.data())
                    .flat_map(|(p, &sv)| p.iter().map(move |v| v * sv))
                    .collect();
                let ds = g
                    .chunks(plane)
                    .zip(x.data().chunks(plane))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                vec![Some(dx), Some(ds)]
            })
        }))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        unary(self, "scale", |v| v * factor, move |_, _| factor)
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(self) -> Var<'t> {
        unary(
            self,
            "silu",
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn softplus(self) -> Var<'t> {
        unary(self, "softplus", softplus, |x, _| sigmoid(x))
    }

    /// Splits along channels into consecutive groups of the given sizes.
    pub fn split_channels(self, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let xv = self.value();
        let (n, c, h, w) = xv.nchw("split")?;
        if sizes.iter().sum::<usize>() != c {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not sum to {c} channels"),
            ));
        }
        let plane = h * w;
        let mut start = 0;
        let mut outs = Vec::with_capacity(sizes.len());
        for &size in sizes {
            let mut data = Vec::with_capacity(n * size * plane);
            for b in 0..n {
                data.extend_from_slice(&xv.data()[(b * c + start) * plane..(b * c + start + size) * plane]);
            }
            let out = Tensor::new(&[n, size, h, w], data)?;
            let offset = start;
            outs.push(self.tape().custom("split", &[self], out, move || {
                Box::new(move |g| {
                    let mut dx = vec![0.0; n * c * plane];
                    for b in 0..n {
                        dx[(b * c + offset) * plane..(b * c + offset + size) * plane]
                            .copy_from_slice(&g[b * size * plane..(b + 1) * size * plane]);
                    }
                    vec![Some(dx)]
                })
            }));
            start += size;
        }
        Ok(outs)
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let xv = self.value();
        let (n, c, h, w) = xv.nchw("upsample2x")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for (p, src) in xv.data().chunks(h * w).enumerate() {
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.tape().custom("upsample2x", &[self], out, move || {
            Box::new(move |g| {
                let mut dx = vec![0.0; n * c * h * w];
                for (p, gp) in g.chunks(oh * ow).enumerate() {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            d[(y / 2) * w + x / 2] += gp[y * ow + x];
                        }
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Max pooling with square window; padded cells never win.
    pub fn maxpool2d(self, kernel: usize, stride: usize, padding: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let (n, c, h, w) = xv.nchw("maxpool2d")?;
        if kernel == 0 || stride == 0 || padding > kernel / 2 {
            return Err(Error::shape("maxpool2d", "invalid kernel/stride/padding"));
        }
        let geom = ConvSpec::new(c, c, kernel, stride, padding);
        let (oh, ow) = geom.output_hw(h, w)?;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; n * c * oh * ow];
        let p = padding as isize;
        for (pi, src) in xv.data().chunks(h * w).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if best_i == usize::MAX || src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = pi * oh * ow + oy * ow + ox;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.tape().custom("maxpool2d", &[self], out, move || {
            Box::new(move |g| {
                let mut dx = vec![0.0; n * c * h * w];
                for (o, (&a, &gv)) in arg.iter().zip(g).enumerate() {
                    let plane = o / (oh * ow);
                    dx[plane * h * w + a] += gv;
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Normalizes each spatial position across channels, then applies a
    /// per-channel gain and bias.
    pub fn layer_norm_channels(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let xv = self.value();
        let (n, c, h, w) = xv.nchw("layer_norm")?;
        let (gv, bv) = (gain.value(), bias.value());
        if gv.dims() != [c] || bv.dims() != [c] {
            return Err(Error::shape("layer_norm", format!("gain/bias must be [{c}]")));
        }
        let plane = h * w;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; n * plane];
        let x = xv.data();
        for b in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let mean = (0..c).map(|ch| x[idx(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (x[idx(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * plane + p] = is;
                for ch in 0..c {
                    xhat[idx(ch)] = (x[idx(ch)] - mean) * is;
                }
            }
        }
        let mut out = vec![0.0; xv.numel()];
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *o = xhat[i] * gv.data()[ch] + bv.data()[ch];
        }
        let out = Tensor::new(xv.dims(), out)?;
        Ok(self.tape().custom("layer_norm", &[self, gain, bias], out, move || {
            Box::new(move |g| {
                let mut dx = vec![0.0; g.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (i, &gi) in g.iter().enumerate() {
                    let ch = (i / plane) % c;
                    dg[ch] += gi * xhat[i];
                    db[ch] += gi;
                }
                for b in 0..n {
                    for p in 0..plane {
                        let idx = |ch: usize| (b * c + ch) * plane + p;
                        let dxhat = |ch: usize| g[idx(ch)] * gv.data()[ch];
                        let m1 = (0..c).map(dxhat).sum::<f64>() / c as f64;
                        let m2 = (0..c).map(|ch| dxhat(ch) * xhat[idx(ch)]).sum::<f64>() / c as f64;
                        let is = inv_std[b * plane + p];
                        for ch in 0..c {
                            dx[idx(ch)] = is * (dxhat(ch) - m1 - xhat[idx(ch)] * m2);
                        }
                    }
                }
                vec![Some(dx), Some(dg), Some(db)]
            })
        }))
    }

    /// Normalizes each sample over groups of `c / groups` channels and all
    /// positions, then applies a per-channel gain and bias.
    pub fn group_norm(self, gain: Var<'t>, bias: Var<'t>, groups: usize, eps: f64) -> Result<Var<'t>> {
        let xv = self.value();
        let (n, c, h, w) = xv.nchw("group_norm")?;
        let (gv, bv) = (gain.value(), bias.value());
        if gv.dims() != [c] || bv.dims() != [c] {
            return Err(Error::shape("group_norm", format!("gain/bias must be [{c}]")));
        }
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        let plane = h * w;
        // contiguous in NCHW: one group is `span` consecutive values
        let span = c / groups * plane;
        let x = xv.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * groups];
        for (gi, (xs, hs)) in x.chunks(span).zip(xhat.chunks_mut(span)).enumerate() {
            let mean = xs.iter().sum::<f64>() / span as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / span as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for (o, v) in hs.iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / plane) % c;
                v * gv.data()[ch] + bv.data()[ch]
            })
            .collect();
        let out = Tensor::new(xv.dims(), out)?;
        Ok(self.tape().custom("group_norm", &[self, gain, bias], out, move || {
            Box::new(move |g| {
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dxhat = vec![0.0; g.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let ch = (i / plane) % c;
                    dg[ch] += gi * xhat[i];
                    db[ch] += gi;
                    dxhat[i] = gi * gv.data()[ch];
                }
                let mut dx = vec![0.0; g.len()];
                for (gi, ((ds, hs), out)) in dxhat
                    .chunks(span)
                    .zip(xhat.chunks(span))
                    .zip(dx.chunks_mut(span))
                    .enumerate()
                {
                    let m1 = ds.iter().sum::<f64>() / span as f64;
                    let m2 = ds.iter().zip(hs).map(|(d, h)| d * h).sum::<f64>() / span as f64;
                    for ((o, d), h) in out.iter_mut().zip(ds).zip(hs) {
                        *o = inv_std[gi] * (d - m1 - h * m2);
                    }
                }
                vec![Some(dx), Some(dg), Some(db)]
            })
        }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let xv = self.value();
        let len = xv.numel();
        let out = Tensor::scalar(xv.sum());
        self.tape().custom("sum", &[self], out, move || {
            Box::new(move |g| vec![Some(vec![g[0]; len])])
        })
    }

    /// `sum(self * weights)` for a constant weight tensor of the same size.
    pub fn dot_const(self, weights: &Tensor) -> Result<Var<'t>> {
        let xv = self.value();
        if xv.numel() != weights.numel() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", xv.dims(), weights.dims())));
        }
        let w = weights.data().to_vec();
        let out = Tensor::scalar(xv.data().iter().zip(&w).map(|(a, b)| a * b).sum());
        Ok(self.tape().custom("dot", &[self], out, move || {
            Box::new(move |g| vec![Some(w.iter().map(|v| v * g[0]).collect())])
        }))
    }
}

impl Tape {
    /// Concatenates NCHW values along channels.
    pub fn concat_channels<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].nchw("concat")?;
        let mut sizes = Vec::with_capacity(parts.len());
        for v in &values {
            let (vn, vc, vh, vw) = v.nchw("concat")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("part dims {:?} do not match n/h/w of {:?}", v.dims(), values[0].dims()),
                ));
            }
            sizes.push(vc);
        }
        let c: usize = sizes.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c * plane);
        for b in 0..n {
            for (v, &vc) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[b * vc * plane..(b + 1) * vc * plane]);
            }
        }
        let out = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.custom("concat", parts, out, move || {
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&s| Vec::with_capacity(n * s * plane)).collect();
                let mut off = 0;
                for _ in 0..n {
                    for (gr, &s) in grads.iter_mut().zip(&sizes) {
                        gr.extend_from_slice(&g[off..off + s * plane]);
                        off += s * plane;
                    }
                }
                grads.into_iter().map(Some).collect()
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_pointwise_scaling() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = x
            .conv2d(w, None, ConvSpec::new(1, 1, 1, 1, 0).with_bias(false))
            .unwrap();
        assert_eq!(y.value().data(), &[2.0; 9]);
    }

    #[test]
    fn conv2d_sum_case() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = x
            .conv2d(w, None, ConvSpec::new(1, 1, 2, 1, 0).with_bias(false))
            .unwrap();
        assert_eq!(y.dims(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[10.0]);
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[2, 3, 4, 5], &data));
        let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = x
            .conv2d(tape.constant(eye), None, ConvSpec::new(3, 3, 1, 1, 0).with_bias(false))
            .unwrap();
        assert_eq!(y.value().data(), &data[..]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
        let err = x
            .conv2d(w, None, ConvSpec::new(4, 2, 3, 1, 1).with_bias(false))
            .unwrap_err();
        assert!(err.to_string().contains("input channels 3"), "{err}");
    }

    #[test]
    fn pools_on_small_map() {
        let tape = Tape::new();
        let x = tape.var(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.global_avg_pool().unwrap().value().data(), &[2.5]);
        let m = x.global_max_pool().unwrap();
        assert_eq!(m.value().data(), &[4.0]);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pools_constant_map() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 3], 3.0));
        assert_eq!(x.global_avg_pool().unwrap().value().data(), &[3.0, 3.0]);
        assert_eq!(x.global_max_pool().unwrap().value().data(), &[3.0, 3.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_first() {
        let tape = Tape::new();
        let x = tape.var(t(&[1, 1, 2, 2], &[4.0, 1.0, 4.0, 4.0]));
        let m = x.global_max_pool().unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_spatial_extent_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 0, 3]));
        assert!(x.global_avg_pool().is_err());
        assert!(x.global_max_pool().is_err());
    }

    #[test]
    fn scalar_activations() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 1.0]));
        assert_eq!(x.sigmoid().value().data()[0], 0.5);
        let s = x.silu().value().data()[1];
        assert!((s - 0.731_058_578_630_004_9).abs() < 1e-12, "{s}");
    }

    #[test]
    fn split_then_concat_is_exact() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..2 * 8 * 3 * 3).map(|i| (i as f64).sqrt() * 1.1).collect();
        let x = tape.constant(t(&[2, 8, 3, 3], &data));
        let parts = x.split_channels(&[4, 4]).unwrap();
        let y = tape.concat_channels(&parts).unwrap();
        assert_eq!(y.value().data(), &data[..]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 4, 3]));
        assert!(tape.concat_channels(&[a, b]).is_err());
        assert!(a.split_channels(&[1, 2]).is_err());
    }

    #[test]
    fn maxpool_stride_one_keeps_shape() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[1, 2, 5, 4], -1.0, 1.0, &mut rand::thread_rng()));
        assert_eq!(x.maxpool2d(5, 1, 2).unwrap().dims(), vec![1, 2, 5, 4]);
        assert_eq!(x.maxpool2d(2, 2, 0).unwrap().dims(), vec![1, 2, 2, 2]);
    }

    #[test]
    fn upsample_repeats() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let y = x.upsample2x().unwrap();
        assert_eq!(y.value().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
