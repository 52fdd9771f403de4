//! Conditioned MLP vector field `h(z, x, t)`.
//!
//! Every hidden layer computes
//!
//! ```text
//! a = act(W a_prev + b) * (S c + 1) + T c
//! ```
//!
//! with `c = [x; t]` the condition vector, followed by a linear,
//! unconditioned output layer. Besides evaluation the network provides exact
//! reverse-mode products, including the second-order terms needed to
//! differentiate `e^T (dh/dz) e` for the log-density integrand.
//!
//! Batched routines use row-major `(batch, features)` matrices.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    /// Identity activation; used to build analytically solvable fields.
    Linear,
}

impl Activation {
    /// Value, first and second derivative at `u`.
    #[inline]
    fn eval(self, u: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let g = u.tanh();
                let d1 = 1.0 - g * g;
                (g, d1, -2.0 * g * d1)
            }
            Activation::Softplus => {
                let g = u.max(0.0) + (-u.abs()).exp().ln_1p();
                let sig = 1.0 / (1.0 + (-u).exp());
                (g, sig, sig * (1.0 - sig))
            }
            Activation::Linear => (u, 1.0, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    /// Dimension `n` of the flowing state.
    pub state_dim: usize,
    /// Length of the pose condition (7 per target); time is appended to it.
    pub condition_dim: usize,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl DynamicsConfig {
    pub fn new(state_dim: usize, condition_dim: usize, hidden_widths: Vec<usize>) -> Self {
        Self {
            state_dim,
            condition_dim,
            hidden_widths,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::Config("state_dim must be at least 1".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config(
                "hidden_widths must be a nonempty list of positive integers".into(),
            ));
        }
        Ok(())
    }

    /// Width of the conditioning input at evaluation time (pose + time).
    pub fn condition_inputs(&self) -> usize {
        self.condition_dim + 1
    }

    /// Closed-form parameter count: per hidden layer `W`, `b`, and the two
    /// conditioning maps; plus the output matrix.
    pub fn parameter_count(&self) -> usize {
        let cin = self.condition_inputs();
        let mut fan_in = self.state_dim;
        let mut total = 0;
        for &w in &self.hidden_widths {
            total += w * fan_in + w + 2 * w * cin;
            fan_in = w;
        }
        total + self.state_dim * fan_in
    }
}

#[derive(Clone, Debug)]
struct Block {
    width: usize,
    fan_in: usize,
    w: Range<usize>,
    b: Range<usize>,
    s: Range<usize>,
    t: Range<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<Block>,
    out: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &DynamicsConfig) -> Self {
        let cin = cfg.condition_inputs();
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let mut fan_in = cfg.state_dim;
        let mut blocks = Vec::with_capacity(cfg.hidden_widths.len());
        for &width in &cfg.hidden_widths {
            blocks.push(Block {
                width,
                fan_in,
                w: take(width * fan_in),
                b: take(width),
                s: take(width * cin),
                t: take(width * cin),
            });
            fan_in = width;
        }
        let out = take(cfg.state_dim * fan_in);
        Self { blocks, out, total: at }
    }
}

/// Parameters of the conditioned vector field, stored as one flat vector.
#[derive(Clone, Debug)]
pub struct DynamicsNet {
    config: DynamicsConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Read-only view of one hidden layer.
pub struct LayerView<'a> {
    pub weight: ArrayView2<'a, f64>,
    pub bias: ArrayView1<'a, f64>,
    pub cond_scale: ArrayView2<'a, f64>,
    pub cond_shift: ArrayView2<'a, f64>,
}

/// Pose conditions of a batch, with the time-independent part of every
/// conditioning map already applied.
pub struct Conditioner {
    x: Array2<f64>,
    scale: Vec<Array2<f64>>,
    shift: Vec<Array2<f64>>,
}

impl Conditioner {
    pub fn batch(&self) -> usize {
        self.x.nrows()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }
}

struct LayerTape {
    input: Array2<f64>,
    g: Array2<f64>,
    d1: Array2<f64>,
    d2: Array2<f64>,
    s: Array2<f64>,
    tan_in: Vec<Array2<f64>>,
    tan_u: Vec<Array2<f64>>,
}

/// Intermediate values of one batched evaluation, kept for the reverse pass.
pub struct Tape {
    t: f64,
    layers: Vec<LayerTape>,
    last: Array2<f64>,
    tan_last: Vec<Array2<f64>>,
}

fn mat<'a>(p: &'a [f64], r: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &p[r.clone()]).expect("layout shape")
}

fn mat_mut<'a>(p: &'a mut [f64], r: &Range<usize>, rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut p[r.clone()]).expect("layout shape")
}

impl DynamicsNet {
    /// All-zero network: the identity flow.
    pub fn zeros(config: DynamicsConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.total];
        Ok(Self { config, layout, params })
    }

    /// Hidden weights drawn from `N(0, 1/fan_in)`; biases, conditioning maps
    /// and the output layer start at zero so the initial flow is the identity.
    pub fn new<R: Rng + ?Sized>(config: DynamicsConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for blk in net.layout.blocks.clone() {
            let scale = 1.0 / (blk.fan_in as f64).sqrt();
            for v in &mut net.params[blk.w] {
                let e: f64 = rng.sample(StandardNormal);
                *v = e * scale;
            }
        }
        Ok(net)
    }

    pub fn from_params(config: DynamicsConfig, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        check_dim("dynamics parameters", net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &DynamicsConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.layout.blocks.len()
    }

    pub fn layer(&self, l: usize) -> LayerView<'_> {
        let blk = &self.layout.blocks[l];
        let cin = self.config.condition_inputs();
        LayerView {
            weight: mat(&self.params, &blk.w, blk.width, blk.fan_in),
            bias: ArrayView1::from(&self.params[blk.b.clone()]),
            cond_scale: mat(&self.params, &blk.s, blk.width, cin),
            cond_shift: mat(&self.params, &blk.t, blk.width, cin),
        }
    }

    /// Output matrix, `state_dim x last_width`.
    pub fn output(&self) -> ArrayView2<'_, f64> {
        let last = self.layout.blocks.last().expect("nonempty").width;
        mat(&self.params, &self.layout.out, self.config.state_dim, last)
    }

    /// Builds a network from explicit per-layer arrays.
    pub fn from_layers(config: DynamicsConfig, layers: &[LayerArrays], output: &Array2<f64>) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        check_dim("dynamics layers", net.layout.blocks.len(), layers.len())?;
        let cin = net.config.condition_inputs();
        for (blk, arrays) in net.layout.blocks.clone().iter().zip(layers) {
            let shapes = [
                (arrays.weight.dim(), (blk.width, blk.fan_in)),
                (arrays.cond_scale.dim(), (blk.width, cin)),
                (arrays.cond_shift.dim(), (blk.width, cin)),
            ];
            for (got, want) in shapes {
                if got != want {
                    return Err(Error::Checkpoint(format!(
                        "layer array shape {got:?}, expected {want:?}"
                    )));
                }
            }
            check_dim("layer bias", blk.width, arrays.bias.len())?;
            mat_mut(&mut net.params, &blk.w, blk.width, blk.fan_in).assign(&arrays.weight);
            net.params[blk.b.clone()]
                .iter_mut()
                .zip(&arrays.bias)
                .for_each(|(d, s)| *d = *s);
            mat_mut(&mut net.params, &blk.s, blk.width, cin).assign(&arrays.cond_scale);
            mat_mut(&mut net.params, &blk.t, blk.width, cin).assign(&arrays.cond_shift);
        }
        let last = net.layout.blocks.last().expect("nonempty").width;
        if output.dim() != (net.config.state_dim, last) {
            return Err(Error::Checkpoint(format!(
                "output shape {:?}, expected {:?}",
                output.dim(),
                (net.config.state_dim, last)
            )));
        }
        let out = net.layout.out.clone();
        mat_mut(&mut net.params, &out, net.config.state_dim, last).assign(output);
        Ok(net)
    }

    /// Applies the time-independent part of the conditioning maps to a batch
    /// of pose features (`batch x condition_dim`).
    pub fn condition(&self, x: Array2<f64>) -> Result<Conditioner> {
        check_dim("condition features", self.config.condition_dim, x.ncols())?;
        let cx = self.config.condition_dim;
        let cin = self.config.condition_inputs();
        let mut scale = Vec::with_capacity(self.layout.blocks.len());
        let mut shift = Vec::with_capacity(self.layout.blocks.len());
        for blk in &self.layout.blocks {
            let s = mat(&self.params, &blk.s, blk.width, cin);
            let t = mat(&self.params, &blk.t, blk.width, cin);
            let mut sb = x.dot(&s.slice(ndarray::s![.., ..cx]).t());
            sb += 1.0;
            scale.push(sb);
            shift.push(x.dot(&t.slice(ndarray::s![.., ..cx]).t()));
        }
        Ok(Conditioner { x, scale, shift })
    }

    /// Forward pass with optional tangent directions (one `batch x n`
    /// matrix per probe). Returns the output, the output tangents `J e`, and
    /// the tape for [`DynamicsNet::reverse`].
    pub fn forward(
        &self,
        z: ArrayView2<'_, f64>,
        cond: &Conditioner,
        t: f64,
        probes: &[ArrayView2<'_, f64>],
    ) -> (Array2<f64>, Vec<Array2<f64>>, Tape) {
        let cx = self.config.condition_dim;
        let cin = self.config.condition_inputs();
        let act = self.config.activation;
        let mut a = z.to_owned();
        let mut tan: Vec<Array2<f64>> = probes.iter().map(|p| p.to_owned()).collect();
        let mut layers = Vec::with_capacity(self.layout.blocks.len());
        for (l, blk) in self.layout.blocks.iter().enumerate() {
            let w = mat(&self.params, &blk.w, blk.width, blk.fan_in);
            let bias = ArrayView1::from(&self.params[blk.b.clone()]);
            let s_t = mat(&self.params, &blk.s, blk.width, cin).column(cx).to_owned();
            let r_t = mat(&self.params, &blk.t, blk.width, cin).column(cx).to_owned();

            let mut u = a.dot(&w.t());
            u += &bias;
            let mut s = cond.scale[l].clone();
            s.scaled_add(t, &s_t.insert_axis(Axis(0)));
            let mut r = cond.shift[l].clone();
            r.scaled_add(t, &r_t.insert_axis(Axis(0)));

            let mut g = Array2::zeros(u.raw_dim());
            let mut d1 = Array2::zeros(u.raw_dim());
            let mut d2 = Array2::zeros(u.raw_dim());
            Zip::from(&mut g)
                .and(&mut d1)
                .and(&mut d2)
                .and(&u)
                .for_each(|g, d1, d2, &u| {
                    (*g, *d1, *d2) = act.eval(u);
                });
            let mut next = &g * &s;
            next += &r;

            let mut tan_u = Vec::with_capacity(tan.len());
            let mut tan_next = Vec::with_capacity(tan.len());
            for da in &tan {
                let du = da.dot(&w.t());
                let mut dn = &du * &d1;
                dn *= &s;
                tan_u.push(du);
                tan_next.push(dn);
            }
            layers.push(LayerTape {
                input: std::mem::replace(&mut a, next),
                g,
                d1,
                d2,
                s,
                tan_in: std::mem::replace(&mut tan, tan_next),
                tan_u,
            });
        }
        let wo = self.output();
        let h = a.dot(&wo.t());
        let tan_out: Vec<Array2<f64>> = tan.iter().map(|da| da.dot(&wo.t())).collect();
        (
            h,
            tan_out,
            Tape {
                t,
                layers,
                last: a,
                tan_last: tan,
            },
        )
    }

    /// Reverse pass for the scalar
    /// `sum_b h_bar[b] . h[b] + sum_p sum_b tan_bar[p][b] . (J e_p)[b]`.
    ///
    /// Returns its gradient with respect to `z` and, if `grads` is given,
    /// accumulates its gradient with respect to the parameters into it.
    pub fn reverse(
        &self,
        tape: &Tape,
        cond: &Conditioner,
        h_bar: ArrayView2<'_, f64>,
        tan_bar: &[ArrayView2<'_, f64>],
        mut grads: Option<&mut [f64]>,
    ) -> Array2<f64> {
        debug_assert_eq!(tan_bar.len(), tape.tan_last.len());
        let cx = self.config.condition_dim;
        let cin = self.config.condition_inputs();
        let last_width = self.layout.blocks.last().expect("nonempty").width;
        let n = self.config.state_dim;
        let wo = self.output();

        if let Some(gr) = grads.as_deref_mut() {
            let mut gwo = mat_mut(gr, &self.layout.out, n, last_width);
            general_mat_mul(1.0, &h_bar.t(), &tape.last, 1.0, &mut gwo);
            for (tb, tl) in tan_bar.iter().zip(&tape.tan_last) {
                general_mat_mul(1.0, &tb.t(), tl, 1.0, &mut gwo);
            }
        }
        let mut a_bar = h_bar.dot(&wo);
        let mut tan_a_bar: Vec<Array2<f64>> = tan_bar.iter().map(|tb| tb.dot(&wo)).collect();

        for (blk, lt) in self.layout.blocks.iter().zip(&tape.layers).rev() {
            let w = mat(&self.params, &blk.w, blk.width, blk.fan_in);

            // tangent path: dn = d1 * du * s
            let mut d1_bar = Array2::<f64>::zeros(lt.g.raw_dim());
            let mut s_bar = &a_bar * &lt.g;
            let mut tan_u_bar = Vec::with_capacity(tan_a_bar.len());
            for (dab, du) in tan_a_bar.iter().zip(&lt.tan_u) {
                Zip::from(&mut d1_bar)
                    .and(&mut s_bar)
                    .and(dab)
                    .and(du)
                    .and(&lt.d1)
                    .and(&lt.s)
                    .for_each(|d1b, sb, &dab, &du, &d1, &s| {
                        *d1b += dab * du * s;
                        *sb += dab * d1 * du;
                    });
                let mut dub = dab * &lt.d1;
                dub *= &lt.s;
                tan_u_bar.push(dub);
            }
            // primal path: a = g * s + r
            let mut u_bar = &a_bar * &lt.s;
            Zip::from(&mut u_bar)
                .and(&d1_bar)
                .and(&lt.d1)
                .and(&lt.d2)
                .for_each(|ub, &d1b, &d1, &d2| {
                    *ub = *ub * d1 + d1b * d2;
                });

            if let Some(gr) = grads.as_deref_mut() {
                let t = tape.t;
                {
                    let mut gs = mat_mut(gr, &blk.s, blk.width, cin);
                    general_mat_mul(1.0, &s_bar.t(), &cond.x, 1.0, &mut gs.slice_mut(ndarray::s![.., ..cx]));
                    let mut col = gs.column_mut(cx);
                    col.scaled_add(t, &s_bar.sum_axis(Axis(0)));
                }
                {
                    let mut gt = mat_mut(gr, &blk.t, blk.width, cin);
                    general_mat_mul(1.0, &a_bar.t(), &cond.x, 1.0, &mut gt.slice_mut(ndarray::s![.., ..cx]));
                    let mut col = gt.column_mut(cx);
                    col.scaled_add(t, &a_bar.sum_axis(Axis(0)));
                }
                {
                    let mut gw = mat_mut(gr, &blk.w, blk.width, blk.fan_in);
                    general_mat_mul(1.0, &u_bar.t(), &lt.input, 1.0, &mut gw);
                    for (dub, din) in tan_u_bar.iter().zip(&lt.tan_in) {
                        general_mat_mul(1.0, &dub.t(), din, 1.0, &mut gw);
                    }
                }
                let gb = &mut gr[blk.b.clone()];
                for (d, v) in gb.iter_mut().zip(u_bar.sum_axis(Axis(0))) {
                    *d += v;
                }
            }
            a_bar = u_bar.dot(&w);
            tan_a_bar = tan_u_bar.iter().map(|dub| dub.dot(&w)).collect();
        }
        a_bar
    }

    /// Batched evaluation of `h`.
    pub fn eval_batch(&self, z: ArrayView2<'_, f64>, cond: &Conditioner, t: f64) -> Array2<f64> {
        self.forward(z, cond, t, &[]).0
    }

    fn single(&self, z: &[f64], cond: &[f64]) -> Result<(Array2<f64>, Conditioner, f64)> {
        check_dim("dynamics state", self.config.state_dim, z.len())?;
        check_dim(
            "condition vector (pose + time)",
            self.config.condition_inputs(),
            cond.len(),
        )?;
        let cx = self.config.condition_dim;
        let x = Array2::from_shape_vec((1, cx), cond[..cx].to_vec()).expect("row");
        let zr = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        Ok((zr, self.condition(x)?, cond[cx]))
    }

    /// `dz/dt` for one state; `cond` is the pose condition with time appended.
    pub fn eval(&self, z: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        let (zr, c, t) = self.single(z, cond)?;
        Ok(self.eval_batch(zr.view(), &c, t).into_raw_vec_and_offset().0)
    }

    /// `v^T dh/dz`.
    pub fn vjp_state(&self, z: &[f64], cond: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_dim("cotangent", self.config.state_dim, v.len())?;
        let (zr, c, t) = self.single(z, cond)?;
        let (_, _, tape) = self.forward(zr.view(), &c, t, &[]);
        let vb = ArrayView2::from_shape((1, v.len()), v).expect("row");
        Ok(self.reverse(&tape, &c, vb, &[], None).into_raw_vec_and_offset().0)
    }

    /// `v^T dh/dtheta`, laid out like [`DynamicsNet::params`].
    pub fn vjp_params(&self, z: &[f64], cond: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_dim("cotangent", self.config.state_dim, v.len())?;
        let (zr, c, t) = self.single(z, cond)?;
        let (_, _, tape) = self.forward(zr.view(), &c, t, &[]);
        let vb = ArrayView2::from_shape((1, v.len()), v).expect("row");
        let mut grads = vec![0.0; self.params.len()];
        self.reverse(&tape, &c, vb, &[], Some(&mut grads));
        Ok(grads)
    }

    /// Exact `tr(dh/dz)` for one state, from `n` unit-vector products.
    pub fn trace_jacobian(&self, z: &[f64], cond: &[f64]) -> Result<f64> {
        let (zr, c, t) = self.single(z, cond)?;
        let probes = unit_probes(1, self.config.state_dim);
        let views: Vec<_> = probes.iter().map(|p| p.view()).collect();
        let (_, tan, _) = self.forward(zr.view(), &c, t, &views);
        Ok(tan.iter().enumerate().map(|(k, jt)| jt[[0, k]]).sum())
    }
}

/// The `n` unit-vector probes, each broadcast over a batch.
pub(crate) fn unit_probes(batch: usize, n: usize) -> Vec<Array2<f64>> {
    (0..n)
        .map(|k| {
            let mut e = Array2::zeros((batch, n));
            e.column_mut(k).fill(1.0);
            e
        })
        .collect()
}

/// Owned per-layer arrays, as stored in checkpoints.
#[derive(Clone, Debug)]
pub struct LayerArrays {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub cond_scale: Array2<f64>,
    pub cond_shift: Array2<f64>,
}
