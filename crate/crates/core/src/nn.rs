//! Dense networks with hand-written backpropagation, Adam, and a finite-difference
//! gradient checker.
//!
//! An [`Mlp`] keeps every parameter in one flat `Vec<f64>`. Layer `l` occupies a
//! row-major weight block of shape `(out, in)` followed by its bias of length
//! `out`. Gradients use the same layout, so optimizers and gradient checks work on
//! plain slices.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Elu,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Softplus => sigmoid(z),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Elu => "elu",
            Activation::Softplus => "softplus",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "identity" => Activation::Identity,
            "tanh" => Activation::Tanh,
            "elu" => Activation::Elu,
            "softplus" => Activation::Softplus,
            _ => return None,
        })
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Multilayer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values of a batched forward pass, needed by [`Mlp::backward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`; the final entry is the network output.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.inputs.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }
}

impl Mlp {
    /// All-zero network with the given layer widths and activations
    /// (`dims.len() == activations.len() + 1`).
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "an mlp needs at least one layer".into(),
            ));
        }
        check_dim("mlp activations", dims.len() - 1, activations.len())?;
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("layer widths must be > 0".into()));
        }
        let layers: Vec<LayerShape> = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| LayerShape {
                in_dim: w[0],
                out_dim: w[1],
                activation,
            })
            .collect();
        Ok(Self::with_layers(layers))
    }

    fn with_layers(layers: Vec<LayerShape>) -> Self {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.num_params();
        }
        Self {
            layers,
            offsets,
            params: vec![0.0; total],
        }
    }

    /// Hidden layers use `hidden`, the last layer uses `output`. Weights get an
    /// orthogonal init with gain sqrt(2) on hidden layers and `output_gain` on the
    /// final layer; biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let acts: Vec<Activation> = (0..n)
            .map(|i| if i + 1 == n { output } else { hidden })
            .collect();
        let mut mlp = Self::zeros(dims, &acts)?;
        for l in 0..mlp.layers.len() {
            let gain = if l + 1 == n {
                output_gain
            } else {
                std::f64::consts::SQRT_2
            };
            let shape = mlp.layers[l];
            let w = orthogonal(shape.out_dim, shape.in_dim, gain, rng);
            mlp.weight_mut(l).assign(&w);
        }
        Ok(mlp)
    }

    /// Network from explicit `(weight, bias, activation)` triples.
    pub fn from_layers(layers: Vec<(Array2<f64>, Vec<f64>, Activation)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "an mlp needs at least one layer".into(),
            ));
        }
        let mut shapes: Vec<LayerShape> = Vec::with_capacity(layers.len());
        for (i, (w, b, a)) in layers.iter().enumerate() {
            check_dim("mlp bias length", w.nrows(), b.len())?;
            if i > 0 {
                check_dim("mlp layer chaining", shapes[i - 1usize].out_dim, w.ncols())?;
            }
            shapes.push(LayerShape {
                in_dim: w.ncols(),
                out_dim: w.nrows(),
                activation: *a,
            });
        }
        let mut mlp = Self::with_layers(shapes);
        for (l, (w, b, _)) in layers.into_iter().enumerate() {
            mlp.weight_mut(l).assign(&w);
            mlp.bias_mut(l).assign(&ArrayView1::from(&b));
        }
        mlp.check_finite()?;
        Ok(mlp)
    }

    /// Rebuild from shapes and a flat parameter vector (checkpoint loading).
    pub fn from_flat(layers: Vec<LayerShape>, params: Vec<f64>) -> Result<Self> {
        for w in layers.windows(2) {
            check_dim("mlp layer chaining", w[0].out_dim, w[1].in_dim)?;
        }
        let mut mlp = Self::with_layers(layers);
        check_dim("mlp flat parameters", mlp.params.len(), params.len())?;
        mlp.params = params;
        Ok(mlp)
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let s = self.layers[l];
        let o = self.offsets[l];
        ArrayView2::from_shape((s.out_dim, s.in_dim), &self.params[o..o + s.out_dim * s.in_dim])
            .expect("layout is consistent")
    }

    pub fn weight_mut(&mut self, l: usize) -> ArrayViewMut2<'_, f64> {
        let s = self.layers[l];
        let o = self.offsets[l];
        ArrayViewMut2::from_shape(
            (s.out_dim, s.in_dim),
            &mut self.params[o..o + s.out_dim * s.in_dim],
        )
        .expect("layout is consistent")
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let s = self.layers[l];
        let o = self.offsets[l] + s.out_dim * s.in_dim;
        ArrayView1::from(&self.params[o..o + s.out_dim])
    }

    pub fn bias_mut(&mut self, l: usize) -> ArrayViewMut1<'_, f64> {
        let s = self.layers[l];
        let o = self.offsets[l] + s.out_dim * s.in_dim;
        ArrayViewMut1::from(&mut self.params[o..o + s.out_dim])
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("mlp parameters".into()))
        }
    }

    /// Single-vector forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("mlp input", self.in_dim(), input.len())?;
        let mut x = input.to_vec();
        for (l, shape) in self.layers.iter().enumerate() {
            let w = self.weight(l);
            let b = self.bias(l);
            let mut y = Vec::with_capacity(shape.out_dim);
            for (row, bias) in w.outer_iter().zip(b.iter()) {
                let z: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + bias;
                y.push(shape.activation.apply(z));
            }
            x = y;
        }
        Ok(x)
    }

    /// Batched forward pass; rows of `input` are samples.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        check_dim("mlp batch input", self.in_dim(), input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(input.to_owned());
        for (l, shape) in self.layers.iter().enumerate() {
            let x = inputs.last().expect("non-empty");
            let mut z = x.dot(&self.weight(l).t());
            z += &self.bias(l);
            let act = shape.activation;
            let y = z.mapv(|v| act.apply(v));
            pre.push(z);
            inputs.push(y);
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Backpropagates `upstream` (dL/d output, one row per sample) through a cached
    /// forward pass. Returns parameter gradients summed over the batch and the
    /// gradient with respect to the input rows.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        check_dim("mlp upstream gradient", self.out_dim(), upstream.ncols())?;
        check_dim(
            "mlp upstream batch",
            cache.output().nrows(),
            upstream.nrows(),
        )?;
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let act = shape.activation;
            if act != Activation::Identity {
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[l])
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            let o = self.offsets[l];
            let nw = shape.out_dim * shape.in_dim;
            {
                let mut gw = ArrayViewMut2::from_shape(
                    (shape.out_dim, shape.in_dim),
                    &mut grads[o..o + nw],
                )
                .expect("layout is consistent");
                gw.assign(&delta.t().dot(&cache.inputs[l]));
            }
            {
                let gb = delta.sum_axis(Axis(0));
                grads[o + nw..o + nw + shape.out_dim].copy_from_slice(gb.as_slice().unwrap());
            }
            delta = delta.dot(&self.weight(l));
        }
        Ok((grads, delta))
    }

    /// Single-sample backward pass: `(param_grads, input_grad)`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("mlp input", self.in_dim(), input.len())?;
        check_dim("mlp upstream gradient", self.out_dim(), upstream.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let cache = self.forward_batch(x)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row vector");
        let (g, dx) = self.backward_batch(&cache, up)?;
        Ok((g, dx.into_raw_vec_and_offset().0))
    }
}

/// Random matrix with orthonormal rows (or columns, whichever is shorter),
/// scaled by `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut m = Array2::<f64>::zeros((r, c));
    m.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
    // modified Gram-Schmidt over the r <= c rows
    for i in 0..r {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        if norm > 1e-12 {
            m.row_mut(i).mapv_inplace(|v| v / norm);
        }
    }
    m.mapv_inplace(|v| v * gain);
    if transpose {
        m.t().to_owned()
    } else {
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            config,
        }
    }

    /// In-place bias-corrected Adam update. A non-finite gradient leaves both the
    /// parameters and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("adam parameters", self.m.len(), params.len())?;
        check_dim("adam gradients", self.m.len(), grads.len())?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adam gradient".into()));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Value-style Adam step on an [`Mlp`]: returns the updated network and state.
pub fn adam_step(params: &Mlp, grads: &[f64], state: &AdamState) -> Result<(Mlp, AdamState)> {
    let mut next = params.clone();
    let mut st = state.clone();
    st.step(next.params_mut(), grads)?;
    Ok((next, st))
}

/// Maximum relative error between `analytic` and central differences of `loss`
/// around `params`, using `|a - n| / max(|a|, |n|, floor)` per coordinate.
///
/// `floor` is `1e-6` times the largest analytic component (at least `1e-8`).
/// Coordinates far below the gradient's scale carry only rounding noise in
/// the difference quotient, so they are judged against that scale instead.
pub fn finite_diff_check<F>(mut loss: F, analytic: &[f64], params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    check_dim("finite-difference gradient", params.len(), analytic.len())?;
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-6 * scale).max(1e-8);
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = loss(&p);
        p[i] = orig - eps;
        let down = loss(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// L2 norm over several gradient blocks.
pub fn global_norm(blocks: &[&[f64]]) -> f64 {
    blocks
        .iter()
        .flat_map(|b| b.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all blocks so their joint norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(blocks: &mut [&mut Vec<f64>], max_norm: f64) -> f64 {
    let norm = blocks
        .iter()
        .flat_map(|b| b.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for b in blocks.iter_mut() {
            b.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::from_layers(vec![(
            array![[1.0, 0.0], [0.0, 1.0]],
            vec![0.0, 0.0],
            Activation::Identity,
        )])
        .unwrap();
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let net = Mlp::from_layers(vec![(
            Array2::zeros((1, 3)),
            vec![0.5],
            Activation::Identity,
        )])
        .unwrap();
        assert_eq!(net.forward(&[3.0, -7.0, 1e3]).unwrap(), vec![0.5]);
    }

    #[test]
    fn forward_matches_naive_recurrence() {
        let net = Mlp::new(&[4, 5, 3], Activation::Tanh, Activation::Tanh, 1.0, &mut rng(1)).unwrap();
        let x = [0.3, -1.2, 0.7, 2.0];
        // naive oracle: explicit loops over the stored layout
        let mut h = x.to_vec();
        for l in 0..2 {
            let (o, i) = (net.layers()[l].out_dim, net.layers()[l].in_dim);
            let w = net.weight(l);
            let b = net.bias(l);
            h = (0..o)
                .map(|r| {
                    let mut z = b[r];
                    for c in 0..i {
                        z += w[[r, c]] * h[c];
                    }
                    z.tanh()
                })
                .collect();
        }
        let y = net.forward(&x).unwrap();
        for (a, b) in y.iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }
        let batch = net
            .forward_batch(ArrayView2::from_shape((1, 4), &x).unwrap())
            .unwrap();
        for (a, b) in batch.output().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = Mlp::zeros(&[3, 2], &[Activation::Elu]).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn layers_must_chain() {
        let r = Mlp::from_layers(vec![
            (Array2::zeros((2, 3)), vec![0.0; 2], Activation::Elu),
            (Array2::zeros((1, 4)), vec![0.0], Activation::Identity),
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn linear_layer_gradient() {
        let net = Mlp::from_layers(vec![(
            array![[2.0, -1.0]],
            vec![0.3],
            Activation::Identity,
        )])
        .unwrap();
        let (g, dx) = net.backward(&[1.5, -4.0], &[1.0]).unwrap();
        assert_eq!(g, vec![1.5, -4.0, 1.0]);
        assert_eq!(dx, vec![2.0, -1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::new(&[3, 8, 2], Activation::Elu, Activation::Tanh, 1.0, &mut rng(2)).unwrap();
        let (g, dx) = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences_all_activations() {
        for (i, act) in [
            Activation::Tanh,
            Activation::Elu,
            Activation::Softplus,
            Activation::Identity,
        ]
        .into_iter()
        .enumerate()
        {
            let net = Mlp::new(&[3, 6, 4, 2], act, Activation::Tanh, 1.0, &mut rng(10 + i as u64)).unwrap();
            let x = [0.4, -0.9, 1.3];
            let up = [0.7, -1.1];
            let loss = |p: &[f64]| {
                let n = Mlp::from_flat(net.layers().to_vec(), p.to_vec()).unwrap();
                let y = n.forward(&x).unwrap();
                y[0] * up[0] + y[1] * up[1]
            };
            let (g, _) = net.backward(&x, &up).unwrap();
            let err = finite_diff_check(loss, &g, net.params(), 1e-5).unwrap();
            assert!(err < 1e-4, "{act:?}: {err}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Mlp::new(&[3, 7, 2], Activation::Elu, Activation::Identity, 1.0, &mut rng(3)).unwrap();
        let x = [0.2, -0.5, 0.9];
        let up = [1.0, -2.0];
        let (_, dx) = net.backward(&x, &up).unwrap();
        let err = finite_diff_check(
            |xi| {
                let y = net.forward(xi).unwrap();
                y[0] - 2.0 * y[1]
            },
            &dx,
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn quadratic_finite_difference() {
        let err = finite_diff_check(|p| 0.5 * p[0] * p[0], &[3.0], &[3.0], 1e-5).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn finite_difference_detects_corrupted_gradient() {
        let net = Mlp::new(&[2, 4, 1], Activation::Tanh, Activation::Identity, 1.0, &mut rng(4)).unwrap();
        let x = [0.5, -0.5];
        let (mut g, _) = net.backward(&x, &[1.0]).unwrap();
        g[3] += 1.0;
        let err = finite_diff_check(
            |p| {
                Mlp::from_flat(net.layers().to_vec(), p.to_vec())
                    .unwrap()
                    .forward(&x)
                    .unwrap()[0]
            },
            &g,
            net.params(),
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2);
    }

    #[test]
    fn finite_difference_floor_tracks_gradient_scale() {
        // rounding-level mismatch on a tiny coordinate is tolerated
        let loss = |p: &[f64]| 0.5 * p[0] * p[0] + 1e-9 * p[1];
        let err = finite_diff_check(loss, &[1.0, 1e-9 + 1e-14], &[1.0, 0.0], 1e-5).unwrap();
        assert!(err < 1e-4);
        // an error of 1e-3 of the scale on the same coordinate is not
        let err = finite_diff_check(loss, &[1.0, 1e-3], &[1.0, 0.0], 1e-5).unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn finite_difference_rejects_bad_step_and_nan_loss() {
        assert!(finite_diff_check(|p| p[0], &[1.0], &[0.0], 0.0).is_err());
        assert!(finite_diff_check(|_| f64::NAN, &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let net = Mlp::new(&[2, 3, 1], Activation::Elu, Activation::Identity, 1.0, &mut rng(5)).unwrap();
        let mut st = AdamState::new(net.num_params(), AdamConfig::default());
        let mut cur = net.clone();
        for t in 1..=5 {
            let (n, s) = adam_step(&cur, &vec![0.0; net.num_params()], &st).unwrap();
            assert_eq!(n, net);
            assert_eq!(s.t, t);
            cur = n;
            st = s;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(1, cfg);
        let mut p = [1.0];
        st.step(&mut p, &[-4.2]).unwrap();
        assert!((p[0] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn adam_two_steps_match_hand_recurrence() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.8,
            beta2: 0.9,
            eps: 1e-6,
        };
        let mut st = AdamState::new(1, cfg);
        let mut p = [0.5];
        st.step(&mut p, &[2.0]).unwrap();
        st.step(&mut p, &[2.0]).unwrap();
        // hand-rolled recurrence
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=2 {
            m = 0.8 * m + 0.2 * 2.0;
            v = 0.9 * v + 0.1 * 4.0;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.9f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-6);
        }
        assert!((p[0] - x).abs() < 1e-15);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn adam_rejects_nonfinite_gradient() {
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut p = [1.0, 2.0];
        assert!(st.step(&mut p, &[f64::NAN, 0.0]).is_err());
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn orthogonal_init_rows_are_orthonormal() {
        let w = orthogonal(4, 9, 1.0, &mut rng(6));
        let g = w.dot(&w.t());
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - e).abs() < 1e-10);
            }
        }
        let tall = orthogonal(9, 4, 2.0, &mut rng(7));
        let g = tall.t().dot(&tall);
        assert!((g[[2, 2]] - 4.0).abs() < 1e-10);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&[&a, &b]) - 1.0).abs() < 1e-12);
    }
}
