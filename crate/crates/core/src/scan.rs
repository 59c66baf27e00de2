//! Two-dimensional selective scanning.
//!
//! A feature map is flattened into four directional token sequences (row-major
//! forwards and backwards, column-major forwards and backwards). Each sequence
//! runs through the selective state-space recurrence
//!
//! ```text
//! h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t
//! y_t = C_t · h_t + D ⊙ x_t
//! ```
//!
//! with input-dependent `Δ`, `B`, `C` and input-independent diagonal `A`, `D`.
//! The four outputs are folded back onto the grid and merged.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{softplus, ConvSpec, Tape, Tensor, Var};

/// Flattening order of a feature map into a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Row-major, left to right then top to bottom.
    RowMajor,
    /// Reverse of [`Direction::RowMajor`].
    RowMajorRev,
    /// Column-major, top to bottom then left to right.
    ColMajor,
    /// Reverse of [`Direction::ColMajor`].
    ColMajorRev,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowMajor,
        Direction::RowMajorRev,
        Direction::ColMajor,
        Direction::ColMajorRev,
    ];

    /// `order[t]` is the row-major spatial index of token `t`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let len = h * w;
        let col_major = |t: usize| (t % h) * w + t / h;
        match self {
            Direction::RowMajor => (0..len).collect(),
            Direction::RowMajorRev => (0..len).rev().collect(),
            Direction::ColMajor => (0..len).map(col_major).collect(),
            Direction::ColMajorRev => (0..len).rev().map(col_major).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::RowMajor => "LR",
            Direction::RowMajorRev => "RL",
            Direction::ColMajor => "TB",
            Direction::ColMajorRev => "BT",
        }
    }
}

/// Tokens of one sample batch laid out as `[n][t][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalSequence {
    pub direction: Direction,
    pub n: usize,
    pub len: usize,
    pub d_model: usize,
    pub tokens: Vec<f64>,
}

impl DirectionalSequence {
    pub fn flatten(x: &Tensor, direction: Direction) -> Result<Self> {
        let (n, c, h, w) = x.nchw("cross_scan")?;
        if h * w == 0 {
            return Err(Error::shape("cross_scan", "empty spatial extent"));
        }
        let order = direction.order(h, w);
        let plane = h * w;
        let mut tokens = Vec::with_capacity(n * plane * c);
        for b in 0..n {
            for &p in &order {
                tokens.extend((0..c).map(|ch| x.data()[(b * c + ch) * plane + p]));
            }
        }
        Ok(DirectionalSequence {
            direction,
            n,
            len: plane,
            d_model: c,
            tokens,
        })
    }

    pub fn token(&self, sample: usize, t: usize) -> &[f64] {
        let start = (sample * self.len + t) * self.d_model;
        &self.tokens[start..start + self.d_model]
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&self, h: usize, w: usize) -> Result<Tensor> {
        if h * w != self.len {
            return Err(Error::shape(
                "cross_merge",
                format!("{h}x{w} grid cannot hold {} tokens", self.len),
            ));
        }
        let (n, c) = (self.n, self.d_model);
        let mut data = vec![0.0; n * c * h * w];
        for b in 0..n {
            for (t, &p) in self.direction.order(h, w).iter().enumerate() {
                for (ch, &v) in self.token(b, t).iter().enumerate() {
                    data[(b * c + ch) * h * w + p] = v;
                }
            }
        }
        Tensor::new(&[n, c, h, w], data)
    }
}

/// The four directional flattenings of `x`, in [`Direction::ALL`] order.
pub fn cross_scan(x: &Tensor) -> Result<[DirectionalSequence; 4]> {
    Ok([
        DirectionalSequence::flatten(x, Direction::RowMajor)?,
        DirectionalSequence::flatten(x, Direction::RowMajorRev)?,
        DirectionalSequence::flatten(x, Direction::ColMajor)?,
        DirectionalSequence::flatten(x, Direction::ColMajorRev)?,
    ])
}

/// Selective scan over one token-major sequence with explicit parameters.
///
/// Shapes: `x`, `delta`: `len x d_model`; `a`: `d_model x d_state` (the
/// continuous decay, negative); `b`, `c`: `len x d_state`; `d`: `d_model`.
/// Returns `len x d_model`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan(
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    len: usize,
    d_model: usize,
    d_state: usize,
) -> Result<Vec<f64>> {
    let check = |name: &str, got: usize, want: usize| {
        if got == want {
            Ok(())
        } else {
            Err(Error::shape(
                "selective_scan",
                format!("{name} has {got} values, expected {want}"),
            ))
        }
    };
    if len == 0 {
        return Err(Error::shape("selective_scan", "empty sequence"));
    }
    check("x", x.len(), len * d_model)?;
    check("delta", delta.len(), len * d_model)?;
    check("a", a.len(), d_model * d_state)?;
    check("b", b.len(), len * d_state)?;
    check("c", c.len(), len * d_state)?;
    check("d", d.len(), d_model)?;
    if let Some(bad) = delta.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Invalid(format!(
            "selective_scan: step size {bad} is not positive"
        )));
    }
    let mut state = vec![0.0; d_model * d_state];
    let mut y = vec![0.0; len * d_model];
    for t in 0..len {
        for ch in 0..d_model {
            let dt = delta[t * d_model + ch];
            let u = x[t * d_model + ch];
            let mut acc = d[ch] * u;
            for s in 0..d_state {
                let h = &mut state[ch * d_state + s];
                *h = (dt * a[ch * d_state + s]).exp() * *h + dt * b[t * d_state + s] * u;
                acc += c[t * d_state + s] * *h;
            }
            y[t * d_model + ch] = acc;
        }
    }
    Ok(y)
}

/// How directional outputs are folded together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Merge {
    #[default]
    Sum,
    Mean,
}

/// Configuration of the 2-D scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Ss2dConfig {
    pub d_state: usize,
    pub directions: Vec<Direction>,
    pub merge: Merge,
}

impl Default for Ss2dConfig {
    fn default() -> Self {
        Ss2dConfig {
            d_state: 16,
            directions: Direction::ALL.to_vec(),
            merge: Merge::Sum,
        }
    }
}

/// Owned state-space parameters.
///
/// `a_log` stores `ln(-A)`, so `A = -exp(a_log)` is negative by construction.
#[derive(Debug, Clone)]
pub struct ScanParams {
    pub d_model: usize,
    pub d_state: usize,
    /// `(d_model, d_model, 1, 1)` step-size projection.
    pub w_delta: Tensor,
    /// `(d_model)` step-size bias.
    pub b_delta: Tensor,
    /// `(d_state, d_model, 1, 1)`.
    pub w_b: Tensor,
    /// `(d_state, d_model, 1, 1)`.
    pub w_c: Tensor,
    /// `(d_model, d_state)`.
    pub a_log: Tensor,
    /// `(d_model)` skip gain.
    pub d_skip: Tensor,
}

impl ScanParams {
    /// Uniform projections, `A = -(1..=d_state)` per channel, unit skip.
    pub fn init<R: Rng + ?Sized>(d_model: usize, d_state: usize, rng: &mut R) -> Self {
        let bound = (1.0 / d_model as f64).sqrt();
        ScanParams {
            d_model,
            d_state,
            w_delta: Tensor::uniform(&[d_model, d_model, 1, 1], -bound, bound, rng),
            b_delta: Tensor::full(&[d_model], DELTA_BIAS_INIT),
            w_b: Tensor::uniform(&[d_state, d_model, 1, 1], -bound, bound, rng),
            w_c: Tensor::uniform(&[d_state, d_model, 1, 1], -bound, bound, rng),
            a_log: a_log_init(d_model, d_state),
            d_skip: Tensor::full(&[d_model], 1.0),
        }
    }

    /// Records the parameters as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ScanVars<'t> {
        ScanVars {
            d_model: self.d_model,
            d_state: self.d_state,
            w_delta: tape.var(self.w_delta.clone()),
            b_delta: tape.var(self.b_delta.clone()),
            w_b: tape.var(self.w_b.clone()),
            w_c: tape.var(self.w_c.clone()),
            a_log: tape.var(self.a_log.clone()),
            d_skip: tape.var(self.d_skip.clone()),
        }
    }

    pub fn param_count(&self) -> usize {
        [
            &self.w_delta,
            &self.b_delta,
            &self.w_b,
            &self.w_c,
            &self.a_log,
            &self.d_skip,
        ]
        .iter()
        .map(|t| t.numel())
        .sum()
    }
}

/// `softplus(DELTA_BIAS_INIT)` is roughly 0.01, a slow-decay starting point.
pub const DELTA_BIAS_INIT: f64 = -4.6;

/// `ln(1..=d_state)` for every channel.
pub fn a_log_init(d_model: usize, d_state: usize) -> Tensor {
    let data = (0..d_model)
        .flat_map(|_| (1..=d_state).map(|s| (s as f64).ln()))
        .collect();
    Tensor::new(&[d_model, d_state], data).unwrap()
}

/// Scan parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ScanVars<'t> {
    pub d_model: usize,
    pub d_state: usize,
    pub w_delta: Var<'t>,
    pub b_delta: Var<'t>,
    pub w_b: Var<'t>,
    pub w_c: Var<'t>,
    pub a_log: Var<'t>,
    pub d_skip: Var<'t>,
}

struct ScanGeom {
    n: usize,
    d_model: usize,
    d_state: usize,
    plane: usize,
    orders: Vec<Vec<usize>>,
}

struct ScanData<'a> {
    x: &'a [f64],
    delta: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    a: &'a [f64],
    d: &'a [f64],
}

impl ScanGeom {
    fn forward(&self, v: &ScanData) -> Vec<f64> {
        let (dm, ds, plane) = (self.d_model, self.d_state, self.plane);
        let mut y = vec![0.0; self.n * dm * plane];
        let mut state = vec![0.0; ds];
        for order in &self.orders {
            for b in 0..self.n {
                for ch in 0..dm {
                    let base = (b * dm + ch) * plane;
                    let a = &v.a[ch * ds..(ch + 1) * ds];
                    state.fill(0.0);
                    for &p in order {
                        let dt = v.delta[base + p];
                        let u = v.x[base + p];
                        let mut acc = v.d[ch] * u;
                        for (s, h) in state.iter_mut().enumerate() {
                            let bc = (b * ds + s) * plane + p;
                            *h = (dt * a[s]).exp() * *h + dt * v.b[bc] * u;
                            acc += v.c[bc] * *h;
                        }
                        y[base + p] += acc;
                    }
                }
            }
        }
        y
    }

    /// Returns gradients for `(x, delta, b, c, a, d)`.
    fn backward(&self, v: &ScanData, gy: &[f64]) -> [Vec<f64>; 6] {
        let (dm, ds, plane) = (self.d_model, self.d_state, self.plane);
        let mut gx = vec![0.0; v.x.len()];
        let mut gdelta = vec![0.0; v.delta.len()];
        let mut gb = vec![0.0; v.b.len()];
        let mut gc = vec![0.0; v.c.len()];
        let mut ga = vec![0.0; v.a.len()];
        let mut gd = vec![0.0; v.d.len()];
        let mut hist = vec![0.0; (plane + 1) * ds];
        let mut carry = vec![0.0; ds];
        for order in &self.orders {
            for b in 0..self.n {
                for ch in 0..dm {
                    let base = (b * dm + ch) * plane;
                    let a = &v.a[ch * ds..(ch + 1) * ds];
                    // hist[t + 1] holds h_t; hist[0] is the zero initial state.
                    hist[..ds].fill(0.0);
                    for (t, &p) in order.iter().enumerate() {
                        let dt = v.delta[base + p];
                        let u = v.x[base + p];
                        for s in 0..ds {
                            let prev = hist[t * ds + s];
                            hist[(t + 1) * ds + s] = (dt * a[s]).exp() * prev + dt * v.b[(b * ds + s) * plane + p] * u;
                        }
                    }
                    carry.fill(0.0);
                    for (t, &p) in order.iter().enumerate().rev() {
                        let dt = v.delta[base + p];
                        let u = v.x[base + p];
                        let g = gy[base + p];
                        let mut gu = v.d[ch] * g;
                        let mut gdt = 0.0;
                        gd[ch] += g * u;
                        for s in 0..ds {
                            let bc = (b * ds + s) * plane + p;
                            let h = hist[(t + 1) * ds + s];
                            let prev = hist[t * ds + s];
                            let decay = (dt * a[s]).exp();
                            let gh = g * v.c[bc] + carry[s];
                            gc[bc] += g * h;
                            let gdecay = gh * prev * decay;
                            gdt += gdecay * a[s] + gh * v.b[bc] * u;
                            ga[ch * ds + s] += gdecay * dt;
                            gb[bc] += gh * dt * u;
                            gu += gh * dt * v.b[bc];
                            carry[s] = gh * decay;
                        }
                        gx[base + p] += gu;
                        gdelta[base + p] += gdt;
                    }
                }
            }
        }
        [gx, gdelta, gb, gc, ga, gd]
    }
}

/// Differentiable multi-direction scan over NCHW maps.
///
/// `x`, `delta`: `(n, d_model, h, w)`; `b`, `c`: `(n, d_state, h, w)`;
/// `a_log`: `(d_model, d_state)`; `d_skip`: `(d_model)`. The directional
/// outputs are summed.
pub fn scan_maps<'t>(
    x: Var<'t>,
    delta: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    a_log: Var<'t>,
    d_skip: Var<'t>,
    directions: &[Direction],
) -> Result<Var<'t>> {
    let (xv, dv, bv, cv, av, sv) = (
        x.value(),
        delta.value(),
        b.value(),
        c.value(),
        a_log.value(),
        d_skip.value(),
    );
    let (n, dm, h, w) = xv.nchw("selective_scan")?;
    if dv.dims() != xv.dims() {
        return Err(Error::shape(
            "selective_scan",
            format!("delta dims {:?} != x dims {:?}", dv.dims(), xv.dims()),
        ));
    }
    let ds = match av.dims() {
        [r, s] if *r == dm => *s,
        other => {
            return Err(Error::shape(
                "selective_scan",
                format!("A dims {other:?} != [{dm}, d_state]"),
            ))
        }
    };
    for (name, t) in [("B", &bv), ("C", &cv)] {
        if t.dims() != [n, ds, h, w] {
            return Err(Error::shape(
                "selective_scan",
                format!("{name} dims {:?} != [{n}, {ds}, {h}, {w}]", t.dims()),
            ));
        }
    }
    if sv.dims() != [dm] {
        return Err(Error::shape(
            "selective_scan",
            format!("D dims {:?} != [{dm}]", sv.dims()),
        ));
    }
    if h * w == 0 {
        return Err(Error::shape("selective_scan", "empty spatial extent"));
    }
    if let Some(bad) = dv.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Invalid(format!(
            "selective_scan: step size {bad} is not positive"
        )));
    }
    let a: Vec<f64> = av.data().iter().map(|l| -l.exp()).collect();
    let geom = ScanGeom {
        n,
        d_model: dm,
        d_state: ds,
        plane: h * w,
        orders: directions.iter().map(|d| d.order(h, w)).collect(),
    };
    let data = ScanData {
        x: xv.data(),
        delta: dv.data(),
        b: bv.data(),
        c: cv.data(),
        a: &a,
        d: sv.data(),
    };
    let out = Tensor::new(xv.dims(), geom.forward(&data))?;
    let tape = x.tape();
    Ok(
        tape.custom("selective_scan", &[x, delta, b, c, a_log, d_skip], out, move || {
            Box::new(move |g| {
                let data = ScanData {
                    x: xv.data(),
                    delta: dv.data(),
                    b: bv.data(),
                    c: cv.data(),
                    a: &a,
                    d: sv.data(),
                };
                let [gx, gdelta, gb, gc, mut ga, gd] = geom.backward(&data, g);
                // dA/da_log = A
                ga.iter_mut().zip(&a).for_each(|(g, a)| *g *= a);
                vec![Some(gx), Some(gdelta), Some(gb), Some(gc), Some(ga), Some(gd)]
            })
        }),
    )
}

/// Projects `x` into per-token step sizes, input and output maps.
fn project<'t>(x: Var<'t>, p: &ScanVars<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let (dm, ds) = (p.d_model, p.d_state);
    let delta = x
        .conv2d(p.w_delta, Some(p.b_delta), ConvSpec::new(dm, dm, 1, 1, 0))?
        .softplus();
    let b = x.conv2d(p.w_b, None, ConvSpec::new(dm, ds, 1, 1, 0).with_bias(false))?;
    let c = x.conv2d(p.w_c, None, ConvSpec::new(dm, ds, 1, 1, 0).with_bias(false))?;
    Ok((delta, b, c))
}

/// Selective scan over `(n, d_model, 1, len)` sequences in token order.
pub fn selective_scan_1d<'t>(seq: Var<'t>, p: &ScanVars<'t>) -> Result<Var<'t>> {
    let (_, c, h, _) = seq.value().nchw("selective_scan_1d")?;
    if h != 1 {
        return Err(Error::shape(
            "selective_scan_1d",
            format!("sequence must have height 1, got {h}"),
        ));
    }
    if c != p.d_model {
        return Err(Error::shape(
            "selective_scan_1d",
            format!("channels {c} != d_model {}", p.d_model),
        ));
    }
    let (delta, b, cm) = project(seq, p)?;
    scan_maps(seq, delta, b, cm, p.a_log, p.d_skip, &[Direction::RowMajor])
}

/// 2-D selective scan: cross-scan, per-direction recurrence, cross-merge.
pub fn ss2d<'t>(x: Var<'t>, p: &ScanVars<'t>, cfg: &Ss2dConfig) -> Result<Var<'t>> {
    let (_, c, _, _) = x.value().nchw("ss2d")?;
    if c != p.d_model {
        return Err(Error::shape("ss2d", format!("channels {c} != d_model {}", p.d_model)));
    }
    if cfg.directions.is_empty() {
        return Err(Error::Config("ss2d needs at least one scan direction".into()));
    }
    let (delta, b, cm) = project(x, p)?;
    let y = scan_maps(x, delta, b, cm, p.a_log, p.d_skip, &cfg.directions)?;
    Ok(match cfg.merge {
        Merge::Sum => y,
        Merge::Mean => y.scale(1.0 / cfg.directions.len() as f64),
    })
}

/// Forward-only `ss2d` with owned parameters, for benchmarking.
pub fn ss2d_eval(x: &Tensor, p: &ScanParams, cfg: &Ss2dConfig) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = ScanVars {
        d_model: p.d_model,
        d_state: p.d_state,
        w_delta: tape.constant(p.w_delta.clone()),
        b_delta: tape.constant(p.b_delta.clone()),
        w_b: tape.constant(p.w_b.clone()),
        w_c: tape.constant(p.w_c.clone()),
        a_log: tape.constant(p.a_log.clone()),
        d_skip: tape.constant(p.d_skip.clone()),
    };
    let xv = tape.constant(x.clone());
    let y = ss2d(xv, &vars, cfg)?;
    Ok((*y.value()).clone())
}

/// Discretized decay `exp(Δ·A)` for positive `Δ`.
pub fn discretized_decay(delta_raw: f64, a_log: f64) -> f64 {
    (softplus(delta_raw) * -a_log.exp()).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_orders() {
        // tokens a b / c d
        let names = ['a', 'b', 'c', 'd'];
        let seq = |d: Direction| d.order(2, 2).iter().map(|&i| names[i]).collect::<String>();
        assert_eq!(seq(Direction::RowMajor), "abcd");
        assert_eq!(seq(Direction::RowMajorRev), "dcba");
        assert_eq!(seq(Direction::ColMajor), "acbd");
        assert_eq!(seq(Direction::ColMajorRev), "dbca");
    }

    #[test]
    fn single_token_map() {
        let x = Tensor::new(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let seqs = cross_scan(&x).unwrap();
        for s in &seqs {
            assert_eq!(s.tokens, vec![1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn hand_unrolled_scalar_recurrence() {
        // decay 0.5 via delta = 1, A = -ln 2; B = C = 1; D = 0.
        let a = [-(2f64.ln())];
        let y = selective_scan(&[1.0, 0.0, 0.0], &[1.0; 3], &a, &[1.0; 3], &[1.0; 3], &[0.0], 3, 1, 1).unwrap();
        for (got, want) in y.iter().zip([1.0, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn single_step_has_no_history() {
        let (x, dt, b, c, d) = (1.7, 0.3, [0.4, -0.2], [1.5, 2.0], 0.6);
        let y = selective_scan(&[x], &[dt], &[-1.0, -2.0], &b, &c, &[d], 1, 1, 2).unwrap();
        let want = c[0] * dt * b[0] * x + c[1] * dt * b[1] * x + d * x;
        assert!((y[0] - want).abs() < 1e-15);
    }

    #[test]
    fn memoryless_limit() {
        let len = 4;
        let x = [0.5, -1.0, 2.0, 0.25];
        let b = [0.3, 0.7, -0.1, 0.9];
        let c = [1.1, -0.4, 0.8, 0.2];
        let y = selective_scan(&x, &[1.0; 4], &[-1e6], &b, &c, &[0.5], len, 1, 1).unwrap();
        for t in 0..len {
            let want = c[t] * b[t] * x[t] + 0.5 * x[t];
            assert!((y[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let err = selective_scan(&[1.0], &[0.0], &[-1.0], &[1.0], &[1.0], &[0.0], 1, 1, 1).unwrap_err();
        assert!(err.to_string().contains("not positive"));
    }

    #[test]
    fn map_kernel_matches_sequence_kernel() {
        // Run the NCHW kernel with a single direction and compare against the
        // token-major reference on the same flattened data.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (dm, ds, h, w) = (3, 2, 2, 3);
        let x = Tensor::uniform(&[1, dm, h, w], -1.0, 1.0, &mut rng);
        let delta = Tensor::uniform(&[1, dm, h, w], 0.1, 1.0, &mut rng);
        let b = Tensor::uniform(&[1, ds, h, w], -1.0, 1.0, &mut rng);
        let c = Tensor::uniform(&[1, ds, h, w], -1.0, 1.0, &mut rng);
        let a_log = Tensor::uniform(&[dm, ds], -0.5, 0.5, &mut rng);
        let d = Tensor::uniform(&[dm], -1.0, 1.0, &mut rng);
        for dir in Direction::ALL {
            let tape = Tape::new();
            let y = scan_maps(
                tape.constant(x.clone()),
                tape.constant(delta.clone()),
                tape.constant(b.clone()),
                tape.constant(c.clone()),
                tape.constant(a_log.clone()),
                tape.constant(d.clone()),
                &[dir],
            )
            .unwrap();
            let fx = DirectionalSequence::flatten(&x, dir).unwrap();
            let fdelta = DirectionalSequence::flatten(&delta, dir).unwrap();
            let fb = DirectionalSequence::flatten(&b, dir).unwrap();
            let fc = DirectionalSequence::flatten(&c, dir).unwrap();
            let a: Vec<f64> = a_log.data().iter().map(|l| -l.exp()).collect();
            let yr = selective_scan(
                &fx.tokens,
                &fdelta.tokens,
                &a,
                &fb.tokens,
                &fc.tokens,
                d.data(),
                h * w,
                dm,
                ds,
            )
            .unwrap();
            let seq = DirectionalSequence {
                direction: dir,
                n: 1,
                len: h * w,
                d_model: dm,
                tokens: yr,
            };
            let yr = seq.unflatten(h, w).unwrap();
            assert!(y.value().max_abs_diff(&yr) < 1e-14, "{dir:?}");
        }
    }

    #[test]
    fn decay_in_unit_interval() {
        for raw in [-20.0, -1.0, 0.0, 3.0] {
            for a_log in [-3.0, 0.0, 2.0] {
                let v = discretized_decay(raw, a_log);
                assert!(v > 0.0 && v < 1.0, "{raw} {a_log} -> {v}");
            }
        }
    }
}
