//! Minimal dense network engine: forward/backward passes, Adam, dropout,
//! batch normalization, seeded initialization, early stopping, and a
//! byte-exact weight checkpoint format.
//!
//! The two architectures in this crate are small fixed MLPs, so gradients
//! are computed by per-layer cached backprop rather than a general tape.
//! All arithmetic is f64; checkpoints store f32 (see [`Mlp::save`]).
//!
//! Checkpoint layout (little-endian throughout):
//! - magic `VKNN1` (5 bytes)
//! - u32 layer count L
//! - u32 x (L + 1) sizes: input width, then each layer's output width
//! - per layer: u8 activation (0 linear, 1 relu, 2 sigmoid), u8 batchnorm flag
//! - per layer, f32 arrays: weights (out x in, row-major), bias;
//!   if batchnorm: gamma, beta, running mean, running variance.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative in terms of the pre-activation z and activation a.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Sigmoid),
            _ => Err(Error::Format(format!("unknown activation code {}", c))),
        }
    }
}

/// Per-feature batch normalization applied after the activation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out x in, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub batchnorm: Option<BatchNorm>,
}

impl DenseLayer {
    pub fn new(
        weights: Vec<f64>,
        bias: Vec<f64>,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "layer expects {}x{} weights and {} biases, got {} and {}",
                out_dim,
                in_dim,
                out_dim,
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("layer parameters must be finite".into()));
        }
        Ok(Self {
            weights,
            bias,
            in_dim,
            out_dim,
            activation,
            batchnorm: None,
        })
    }
}

/// Shape/activation description used to build custom networks.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub batchnorm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    /// Dropout probability applied after every hidden layer in train mode
    /// (inverted scaling, so eval needs no rescale).
    pub dropout_p: f64,
}

/// Intermediates cached by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// Input to each layer, batch x in_dim.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    preacts: Vec<Vec<f64>>,
    /// Activations per layer (before batchnorm/dropout).
    postacts: Vec<Vec<f64>>,
    bn: Vec<Option<BnCache>>,
    /// Inverted-scale dropout masks per layer (None when not applied).
    dropout: Vec<Option<Vec<f64>>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    var: Vec<f64>,
    xhat: Vec<f64>,
}

/// Parameter gradients in the same order as [`Mlp::params_mut`]:
/// per layer weights, bias, then gamma and beta when batchnorm is present.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
    pub d_input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            tensors: net.param_shapes().iter().map(|&n| vec![0.0; n]).collect(),
            d_input: Vec::new(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl Mlp {
    /// Standard fitting-net constructor: ReLU hidden layers, linear output,
    /// no batchnorm, He-uniform/Glorot-uniform initialization. The same
    /// seed always produces bit-identical weights.
    pub fn init_seeded(sizes: &[usize], seed: u64) -> Mlp {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let specs: Vec<LayerSpec> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation: if i + 2 == sizes.len() {
                    Activation::Linear
                } else {
                    Activation::Relu
                },
                batchnorm: false,
            })
            .collect();
        Mlp::from_specs(&specs, 0.0, seed)
    }

    /// Builds a network from explicit layer specs with seeded init:
    /// He-uniform for ReLU layers, Glorot-uniform otherwise, zero biases.
    pub fn from_specs(specs: &[LayerSpec], dropout_p: f64, seed: u64) -> Mlp {
        assert!((0.0..1.0).contains(&dropout_p), "dropout_p must be in [0, 1)");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            if i > 0 {
                assert_eq!(
                    spec.in_dim,
                    specs[i - 1].out_dim,
                    "adjacent layer sizes must match"
                );
            }
            let limit = match spec.activation {
                Activation::Relu => (6.0 / spec.in_dim as f64).sqrt(),
                _ => (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt(),
            };
            let weights: Vec<f64> = (0..spec.in_dim * spec.out_dim)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            let mut layer = DenseLayer::new(
                weights,
                vec![0.0; spec.out_dim],
                spec.in_dim,
                spec.out_dim,
                spec.activation,
            )
            .expect("spec-consistent layer");
            if spec.batchnorm {
                layer.batchnorm = Some(BatchNorm::new(spec.out_dim));
            }
            layers.push(layer);
        }
        Mlp { layers, dropout_p }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("mlp has layers").in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").out_dim
    }

    /// Flat sizes of all trainable tensors, in parameter order.
    pub fn param_shapes(&self) -> Vec<usize> {
        let mut shapes = Vec::new();
        for l in &self.layers {
            shapes.push(l.weights.len());
            shapes.push(l.bias.len());
            if l.batchnorm.is_some() {
                shapes.push(l.out_dim);
                shapes.push(l.out_dim);
            }
        }
        shapes
    }

    /// Mutable views of all trainable tensors, in parameter order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            let DenseLayer {
                weights,
                bias,
                batchnorm,
                ..
            } = l;
            out.push(weights.as_mut_slice());
            out.push(bias.as_mut_slice());
            if let Some(bn) = batchnorm {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    fn check_input(&self, x: &[f64], batch: usize) -> Result<()> {
        if batch == 0 || x.len() != batch * self.input_dim() {
            return Err(Error::Shape(format!(
                "input of {} values does not form {} rows of width {}",
                x.len(),
                batch,
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Deterministic inference pass; batchnorm uses running statistics.
    pub fn forward_eval(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(x, batch)?;
        let mut cur = x.to_vec();
        for l in &self.layers {
            let mut z = linear_forward(l, &cur, batch);
            for v in z.iter_mut() {
                *v = l.activation.apply(*v);
            }
            if let Some(bn) = &l.batchnorm {
                for (i, v) in z.iter_mut().enumerate() {
                    let j = i % l.out_dim;
                    let xhat = (*v - bn.running_mean[j]) / (bn.running_var[j] + BN_EPS).sqrt();
                    *v = bn.gamma[j] * xhat + bn.beta[j];
                }
            }
            cur = z;
        }
        Ok(cur)
    }

    /// Training pass: batchnorm uses batch statistics (and updates running
    /// ones), dropout masks are drawn from `rng` for every hidden layer.
    pub fn forward_train(
        &mut self,
        x: &[f64],
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<ForwardCache> {
        self.check_input(x, batch)?;
        let n_layers = self.layers.len();
        let mut cache = ForwardCache {
            batch,
            inputs: Vec::with_capacity(n_layers),
            preacts: Vec::with_capacity(n_layers),
            postacts: Vec::with_capacity(n_layers),
            bn: Vec::with_capacity(n_layers),
            dropout: Vec::with_capacity(n_layers),
            output: Vec::new(),
        };
        let dropout_p = self.dropout_p;
        let mut cur = x.to_vec();
        for (li, l) in self.layers.iter_mut().enumerate() {
            cache.inputs.push(cur.clone());
            let z = linear_forward(l, &cur, batch);
            let mut a: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            cache.preacts.push(z);
            cache.postacts.push(a.clone());

            if let Some(bn) = &mut l.batchnorm {
                let dim = l.out_dim;
                let n = batch as f64;
                let mut mean = vec![0.0; dim];
                let mut var = vec![0.0; dim];
                for (i, &v) in a.iter().enumerate() {
                    mean[i % dim] += v;
                }
                for m in mean.iter_mut() {
                    *m /= n;
                }
                for (i, &v) in a.iter().enumerate() {
                    let d = v - mean[i % dim];
                    var[i % dim] += d * d;
                }
                // Biased variance, used consistently for normalization and
                // the running statistics.
                for v in var.iter_mut() {
                    *v /= n;
                }
                let mut xhat = vec![0.0; a.len()];
                for (i, v) in a.iter_mut().enumerate() {
                    let j = i % dim;
                    let h = (*v - mean[j]) / (var[j] + BN_EPS).sqrt();
                    xhat[i] = h;
                    *v = bn.gamma[j] * h + bn.beta[j];
                }
                for j in 0..dim {
                    bn.running_mean[j] =
                        (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * mean[j];
                    bn.running_var[j] =
                        (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * var[j];
                }
                cache.bn.push(Some(BnCache { var, xhat }));
            } else {
                cache.bn.push(None);
            }

            let is_hidden = li + 1 < n_layers;
            if is_hidden && dropout_p > 0.0 {
                let keep = 1.0 - dropout_p;
                let mask: Vec<f64> = (0..a.len())
                    .map(|_| {
                        if rng.gen::<f64>() < dropout_p {
                            0.0
                        } else {
                            1.0 / keep
                        }
                    })
                    .collect();
                for (v, m) in a.iter_mut().zip(&mask) {
                    *v *= m;
                }
                cache.dropout.push(Some(mask));
            } else {
                cache.dropout.push(None);
            }
            cur = a;
        }
        cache.output = cur;
        Ok(cache)
    }

    /// Backpropagates `d_out` (gradient of a scalar loss w.r.t. the cached
    /// output) through the cached pass.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> Result<Gradients> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Input("forward cache does not match the network".into()));
        }
        if d_out.len() != cache.output.len() {
            return Err(Error::Shape(format!(
                "loss gradient has {} values, cached output has {}",
                d_out.len(),
                cache.output.len()
            )));
        }
        let batch = cache.batch;
        let mut tensors_rev: Vec<Vec<f64>> = Vec::new();
        let mut delta = d_out.to_vec();

        for (li, l) in self.layers.iter().enumerate().rev() {
            let dim = l.out_dim;
            if let Some(mask) = &cache.dropout[li] {
                for (d, m) in delta.iter_mut().zip(mask) {
                    *d *= m;
                }
            }

            let mut d_gamma_beta: Option<(Vec<f64>, Vec<f64>)> = None;
            if let Some(bn) = &l.batchnorm {
                let bc = cache.bn[li].as_ref().expect("bn cache present");
                let n = batch as f64;
                let mut d_gamma = vec![0.0; dim];
                let mut d_beta = vec![0.0; dim];
                let mut sum_dxhat = vec![0.0; dim];
                let mut sum_dxhat_xhat = vec![0.0; dim];
                let mut dxhat = vec![0.0; delta.len()];
                for (i, &dy) in delta.iter().enumerate() {
                    let j = i % dim;
                    d_gamma[j] += dy * bc.xhat[i];
                    d_beta[j] += dy;
                    let dh = dy * bn.gamma[j];
                    dxhat[i] = dh;
                    sum_dxhat[j] += dh;
                    sum_dxhat_xhat[j] += dh * bc.xhat[i];
                }
                for (i, d) in delta.iter_mut().enumerate() {
                    let j = i % dim;
                    let inv_std = 1.0 / (bc.var[j] + BN_EPS).sqrt();
                    *d = inv_std / n
                        * (n * dxhat[i] - sum_dxhat[j] - bc.xhat[i] * sum_dxhat_xhat[j]);
                }
                d_gamma_beta = Some((d_gamma, d_beta));
            }

            let preact = &cache.preacts[li];
            let postact = &cache.postacts[li];
            for (i, d) in delta.iter_mut().enumerate() {
                *d *= l.activation.derivative(preact[i], postact[i]);
            }

            let input = &cache.inputs[li];
            let mut d_w = vec![0.0; l.weights.len()];
            let mut d_b = vec![0.0; dim];
            for s in 0..batch {
                let drow = &delta[s * dim..(s + 1) * dim];
                let xrow = &input[s * l.in_dim..(s + 1) * l.in_dim];
                for o in 0..dim {
                    let dz = drow[o];
                    d_b[o] += dz;
                    let wrow = &mut d_w[o * l.in_dim..(o + 1) * l.in_dim];
                    for (wi, &xi) in wrow.iter_mut().zip(xrow) {
                        *wi += dz * xi;
                    }
                }
            }
            let mut d_in = vec![0.0; batch * l.in_dim];
            for s in 0..batch {
                let drow = &delta[s * dim..(s + 1) * dim];
                let irow = &mut d_in[s * l.in_dim..(s + 1) * l.in_dim];
                for o in 0..dim {
                    let dz = drow[o];
                    let wrow = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                    for (ii, &w) in irow.iter_mut().zip(wrow) {
                        *ii += dz * w;
                    }
                }
            }

            if let Some((d_gamma, d_beta)) = d_gamma_beta {
                tensors_rev.push(d_beta);
                tensors_rev.push(d_gamma);
            }
            tensors_rev.push(d_b);
            tensors_rev.push(d_w);
            delta = d_in;
        }

        tensors_rev.reverse();
        Ok(Gradients {
            tensors: tensors_rev,
            d_input: delta,
        })
    }

    /// Serializes weights to the `VKNN1` checkpoint format (atomic write).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"VKNN1");
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.input_dim() as u32).to_le_bytes());
        for l in &self.layers {
            buf.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        }
        for l in &self.layers {
            buf.push(l.activation.code());
            buf.push(l.batchnorm.is_some() as u8);
        }
        let push_f32 = |buf: &mut Vec<u8>, vs: &[f64]| {
            for &v in vs {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        for l in &self.layers {
            push_f32(&mut buf, &l.weights);
            push_f32(&mut buf, &l.bias);
            if let Some(bn) = &l.batchnorm {
                push_f32(&mut buf, &bn.gamma);
                push_f32(&mut buf, &bn.beta);
                push_f32(&mut buf, &bn.running_mean);
                push_f32(&mut buf, &bn.running_var);
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a `VKNN1` checkpoint. The loaded network has dropout 0 (the
    /// file stores weights, not training configuration).
    pub fn load(path: &Path) -> Result<Mlp> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("checkpoint truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        }
        fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
            let s = take(bytes, pos, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        }
        fn read_f32s(bytes: &[u8], pos: &mut usize, n: usize) -> Result<Vec<f64>> {
            let s = take(bytes, pos, 4 * n)?;
            Ok(s.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        }
        if take(&bytes, &mut pos, 5)? != b"VKNN1" {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let n_layers = read_u32(&bytes, &mut pos)? as usize;
        if n_layers == 0 {
            return Err(Error::Format("checkpoint has no layers".into()));
        }
        let mut sizes = Vec::with_capacity(n_layers + 1);
        for _ in 0..=n_layers {
            sizes.push(read_u32(&bytes, &mut pos)? as usize);
        }
        let mut meta = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let s = take(&bytes, &mut pos, 2)?;
            meta.push((Activation::from_code(s[0])?, s[1] != 0));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (in_dim, out_dim) = (sizes[i], sizes[i + 1]);
            let weights = read_f32s(&bytes, &mut pos, in_dim * out_dim)?;
            let bias = read_f32s(&bytes, &mut pos, out_dim)?;
            let mut layer = DenseLayer::new(weights, bias, in_dim, out_dim, meta[i].0)?;
            if meta[i].1 {
                layer.batchnorm = Some(BatchNorm {
                    gamma: read_f32s(&bytes, &mut pos, out_dim)?,
                    beta: read_f32s(&bytes, &mut pos, out_dim)?,
                    running_mean: read_f32s(&bytes, &mut pos, out_dim)?,
                    running_var: read_f32s(&bytes, &mut pos, out_dim)?,
                });
            }
            layers.push(layer);
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - pos
            )));
        }
        Ok(Mlp {
            layers,
            dropout_p: 0.0,
        })
    }
}

fn linear_forward(l: &DenseLayer, x: &[f64], batch: usize) -> Vec<f64> {
    let mut z = vec![0.0; batch * l.out_dim];
    for s in 0..batch {
        let xrow = &x[s * l.in_dim..(s + 1) * l.in_dim];
        let zrow = &mut z[s * l.out_dim..(s + 1) * l.out_dim];
        for o in 0..l.out_dim {
            let wrow = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
            let mut acc = l.bias[o];
            for (w, xi) in wrow.iter().zip(xrow) {
                acc += w * xi;
            }
            zrow[o] = acc;
        }
    }
    z
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment accumulators mirroring a parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize], cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_net(net: &Mlp, cfg: AdamConfig) -> Self {
        Self::new(&net.param_shapes(), cfg)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over all tensors.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len(), "parameter list mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient list mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len(), "tensor shape mismatch");
            for i in 0..p.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Stops when the monitored loss fails to improve by more than `min_delta`
/// for `patience` consecutive updates.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one loss value; returns true when training should stop.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self::new(10, 1e-6)
    }
}
