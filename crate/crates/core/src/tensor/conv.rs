use crate::error::{Error, Result};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    /// `groups == in_channels` selects a depthwise convolution.
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel, one group, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..ConvSpec::new(channels, channels, kernel, 1, kernel / 2)
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::shape("conv2d", msg));
        if self.groups == 0 || !self.in_channels.is_multiple_of(self.groups) {
            return bad(format!(
                "in_channels {} not divisible by groups {}",
                self.in_channels, self.groups
            ));
        }
        if !self.out_channels.is_multiple_of(self.groups) {
            return bad(format!(
                "out_channels {} not divisible by groups {}",
                self.out_channels, self.groups
            ));
        }
        if self.stride == 0 {
            return bad("stride must be >= 1".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad("kernel dims must be >= 1".into());
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Learnable scalars: weights plus optional bias.
    pub fn param_count(&self) -> usize {
        self.weight_dims().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh {
            return Err(Error::shape(
                "conv2d",
                format!("height {h} with padding {} smaller than kernel {kh}", self.padding),
            ));
        }
        if pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("width {w} with padding {} smaller than kernel {kw}", self.padding),
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major `a` (m x k) and `b` (k x n).
///
/// With `trans_a`, `a` is stored as k x m; with `trans_b`, `b` is stored as n x k.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) struct ConvGeom {
    pub spec: ConvSpec,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.spec.kernel == (1, 1) && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn col_rows(&self) -> usize {
        (self.spec.in_channels / self.spec.groups) * self.spec.kernel.0 * self.spec.kernel.1
    }

    /// Unfolds `x` (channels x h x w, one group) into (icg*kh*kw) x (oh*ow).
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (kh, kw) = self.spec.kernel;
        let (s, p) = (self.spec.stride, self.spec.padding as isize);
        let icg = self.spec.in_channels / self.spec.groups;
        let plane = self.oh * self.ow;
        for ic in 0..icg {
            let xc = &x[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ic * kh + ki) * kw + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * s) as isize + ki as isize - p;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kj as isize - p;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates `col` into `dx`.
    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let (kh, kw) = self.spec.kernel;
        let (s, p) = (self.spec.stride, self.spec.padding as isize);
        let icg = self.spec.in_channels / self.spec.groups;
        let plane = self.oh * self.ow;
        for ic in 0..icg {
            let xc = &mut dx[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ic * kh + ki) * kw + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * s) as isize + ki as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * s) as isize + kj as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, n: usize, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let spec = &self.spec;
        let g = spec.groups;
        let (icg, ocg) = (spec.in_channels / g, spec.out_channels / g);
        let (plane_in, plane_out) = (self.h * self.w, self.oh * self.ow);
        let k = self.col_rows();
        let mut out = vec![0.0; n * spec.out_channels * plane_out];
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; k * plane_out]
        };
        for b in 0..n {
            for gi in 0..g {
                let xs = &x[(b * spec.in_channels + gi * icg) * plane_in..][..icg * plane_in];
                let cols: &[f64] = if self.is_pointwise() {
                    xs
                } else {
                    self.im2col(xs, &mut col);
                    &col
                };
                let ws = &weight[gi * ocg * k..(gi + 1) * ocg * k];
                let os = &mut out[(b * spec.out_channels + gi * ocg) * plane_out..][..ocg * plane_out];
                gemm(ocg, k, plane_out, ws, false, cols, false, 0.0, os);
            }
            if let Some(bias) = bias {
                for oc in 0..spec.out_channels {
                    let os = &mut out[(b * spec.out_channels + oc) * plane_out..][..plane_out];
                    os.iter_mut().for_each(|v| *v += bias[oc]);
                }
            }
        }
        out
    }

    /// Returns `(dx, dweight, dbias)`; each only when requested.
    pub fn backward(
        &self,
        n: usize,
        x: &[f64],
        weight: &[f64],
        dy: &[f64],
        want: (bool, bool, bool),
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let spec = &self.spec;
        let g = spec.groups;
        let (icg, ocg) = (spec.in_channels / g, spec.out_channels / g);
        let (plane_in, plane_out) = (self.h * self.w, self.oh * self.ow);
        let k = self.col_rows();
        let mut dx = want.0.then(|| vec![0.0; n * spec.in_channels * plane_in]);
        let mut dw = want.1.then(|| vec![0.0; weight.len()]);
        let db = want.2.then(|| {
            let mut db = vec![0.0; spec.out_channels];
            for b in 0..n {
                for (oc, d) in db.iter_mut().enumerate() {
                    *d += dy[(b * spec.out_channels + oc) * plane_out..][..plane_out]
                        .iter()
                        .sum::<f64>();
                }
            }
            db
        });
        if dx.is_none() && dw.is_none() {
            return (dx, dw, db);
        }
        let pointwise = self.is_pointwise();
        let mut col = vec![0.0; k * plane_out];
        for b in 0..n {
            for gi in 0..g {
                let dys = &dy[(b * spec.out_channels + gi * ocg) * plane_out..][..ocg * plane_out];
                let ws = &weight[gi * ocg * k..(gi + 1) * ocg * k];
                if let Some(dw) = dw.as_mut() {
                    let xs = &x[(b * spec.in_channels + gi * icg) * plane_in..][..icg * plane_in];
                    let cols: &[f64] = if pointwise {
                        xs
                    } else {
                        self.im2col(xs, &mut col);
                        &col
                    };
                    gemm(
                        ocg,
                        plane_out,
                        k,
                        dys,
                        false,
                        cols,
                        true,
                        1.0,
                        &mut dw[gi * ocg * k..(gi + 1) * ocg * k],
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx[(b * spec.in_channels + gi * icg) * plane_in..][..icg * plane_in];
                    if pointwise {
                        gemm(k, ocg, plane_out, ws, true, dys, false, 1.0, dxs);
                    } else {
                        gemm(k, ocg, plane_out, ws, true, dys, false, 0.0, &mut col);
                        self.col2im(&col, dxs);
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

/// Same-padded 1-D convolution along a channel vector, no bias.
///
/// Output has the input's length; positions beyond either end read as zero.
pub fn conv1d(x: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let k = weights.len();
    if k.is_multiple_of(2) {
        return Err(Error::shape("conv1d", format!("kernel size {k} must be odd")));
    }
    let half = (k / 2) as isize;
    let len = x.len() as isize;
    Ok((0..len)
        .map(|i| {
            weights
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    let src = i + j as isize - half;
                    if src < 0 || src >= len {
                        0.0
                    } else {
                        w * x[src as usize]
                    }
                })
                .sum()
        })
        .collect())
}

/// Adjoint of [`conv1d`]: returns `(dx, dweights)`.
pub(crate) fn conv1d_backward(x: &[f64], weights: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let half = (weights.len() / 2) as isize;
    let len = x.len() as isize;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weights.len()];
    for i in 0..len {
        for (j, w) in weights.iter().enumerate() {
            let src = i + j as isize - half;
            if src >= 0 && src < len {
                dx[src as usize] += w * dy[i as usize];
                dw[j] += x[src as usize] * dy[i as usize];
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_identity_kernel() {
        let v = [3.0, -1.0, 2.5, 7.0];
        assert_eq!(conv1d(&v, &[0.0, 1.0, 0.0]).unwrap(), v.to_vec());
    }

    #[test]
    fn conv1d_ones_kernel_zero_padded() {
        assert_eq!(conv1d(&[1.0; 4], &[1.0; 3]).unwrap(), vec![2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn conv1d_single_element_keeps_center_tap() {
        assert_eq!(conv1d(&[5.0], &[0.3, 0.7, 11.0]).unwrap(), vec![5.0 * 0.7]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        assert!(conv1d(&[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn spec_validation() {
        assert!(ConvSpec {
            groups: 3,
            ..ConvSpec::new(4, 6, 3, 1, 1)
        }
        .validate()
        .is_err());
        assert!(ConvSpec {
            stride: 0,
            ..ConvSpec::new(4, 6, 3, 1, 1)
        }
        .validate()
        .is_err());
        assert!(ConvSpec::depthwise(4, 3).validate().is_ok());
        assert_eq!(ConvSpec::new(4, 8, 1, 1, 0).param_count(), 40);
        assert_eq!(ConvSpec::new(3, 8, 3, 2, 1).output_hw(64, 64).unwrap(), (32, 32));
        assert_eq!(ConvSpec::new(3, 8, 3, 2, 1).output_hw(7, 5).unwrap(), (4, 3));
    }
}
