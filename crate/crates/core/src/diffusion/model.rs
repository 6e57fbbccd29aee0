use ndarray::{s, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LairError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-x).exp());
                sig * (1.0 + x * (1.0 - sig))
            }
            Activation::Tanh => {
                let th = x.tanh();
                1.0 - th * th
            }
        }
    }
}

/// Layout of the conditional noise predictor: an MLP over
/// `[x_t, time_embedding(t), c]` returning a vector shaped like `x_t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            data_dim: 2,
            cond_dim: 4,
            time_dim: 16,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
        }
    }
}

impl Arch {
    /// Same shape as the default but with every hidden layer `width` wide.
    pub fn with_width(width: usize) -> Self {
        Arch {
            hidden: vec![width; 3],
            ..Arch::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    /// `(fan_in, fan_out)` of each dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim());
        widths.extend_from_slice(&self.hidden);
        widths.push(self.data_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden.contains(&0) {
            return Err(LairError::Config(
                "architecture has a zero-width layer".into(),
            ));
        }
        if self.time_dim % 2 != 0 {
            return Err(LairError::Config(format!(
                "time embedding dimension must be even, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of an integer timestep.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * freq).sin());
    }
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * freq).cos());
    }
    out
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each dense layer (first entry is the assembled network input).
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Array2<f64>>,
}

/// Noise predictor `eps_theta(x_t, t, c)` with a flat parameter vector.
///
/// Parameters are stored layer by layer as a row-major `fan_in x fan_out`
/// weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Arch,
    params: Vec<f64>,
    frozen: bool,
}

impl DenoiserModel {
    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(LairError::shape(
                "parameter vector",
                arch.param_count(),
                params.len(),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(LairError::NonFinite("parameters"));
        }
        Ok(DenoiserModel {
            arch,
            params,
            frozen: false,
        })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        let n = arch.param_count();
        Self::from_params(arch, vec![0.0; n])
    }

    /// Scaled Gaussian weights (variance `1/fan_in`) and zero biases.
    pub fn init(arch: Arch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::with_capacity(arch.param_count());
        for (fan_in, fan_out) in arch.layer_dims() {
            let scale = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = StandardNormal.sample(rng);
                params.push(scale * z);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self::from_params(arch, params)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable access for trainers; refused on frozen models.
    pub fn params_mut(&mut self) -> Result<&mut [f64]> {
        if self.frozen {
            return Err(LairError::Contract(
                "attempted to mutate a frozen model".into(),
            ));
        }
        Ok(&mut self.params)
    }

    /// Hex SHA-256 of the little-endian parameter bytes.
    pub fn param_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Slices of the parameter vector for each layer as `(weights, bias)`.
    fn layers(&self) -> Vec<(ArrayView2<'_, f64>, &[f64])> {
        let mut offset = 0;
        let mut out = Vec::new();
        for (fan_in, fan_out) in self.arch.layer_dims() {
            let w = ArrayView2::from_shape(
                (fan_in, fan_out),
                &self.params[offset..offset + fan_in * fan_out],
            )
            .expect("layer shape matches param layout");
            offset += fan_in * fan_out;
            out.push((w, &self.params[offset..offset + fan_out]));
            offset += fan_out;
        }
        out
    }

    /// Builds the `B x input_dim` network input from per-row `x_t`, `t`, `c`.
    fn assemble_input(
        &self,
        xt: ArrayView2<f64>,
        ts: &[usize],
        cond: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let a = &self.arch;
        let rows = xt.nrows();
        if xt.ncols() != a.data_dim {
            return Err(LairError::shape("x_t dimension", a.data_dim, xt.ncols()));
        }
        if cond.ncols() != a.cond_dim {
            return Err(LairError::shape(
                "condition dimension",
                a.cond_dim,
                cond.ncols(),
            ));
        }
        if ts.len() != rows {
            return Err(LairError::shape("timesteps per batch", rows, ts.len()));
        }
        if cond.nrows() != rows {
            return Err(LairError::shape("conditions per batch", rows, cond.nrows()));
        }
        if xt.iter().chain(cond.iter()).any(|v| !v.is_finite()) {
            return Err(LairError::NonFinite("denoiser input"));
        }
        let mut input = Array2::zeros((rows, a.input_dim()));
        input.slice_mut(s![.., ..a.data_dim]).assign(&xt);
        for (r, &t) in ts.iter().enumerate() {
            let emb = time_embedding(t, a.time_dim);
            for (k, v) in emb.into_iter().enumerate() {
                input[[r, a.data_dim + k]] = v;
            }
        }
        input
            .slice_mut(s![.., a.data_dim + a.time_dim..])
            .assign(&cond);
        Ok(input)
    }

    /// Batched prediction; each row of `xt`/`cond` is one sample.
    pub fn forward_batch(
        &self,
        xt: ArrayView2<f64>,
        ts: &[usize],
        cond: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let input = self.assemble_input(xt, ts, cond)?;
        let act = self.arch.activation;
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = input;
        for (i, (w, b)) in layers.iter().enumerate() {
            let mut z = h.dot(w);
            for mut row in z.rows_mut() {
                row.iter_mut().zip(b.iter()).for_each(|(v, bi)| *v += bi);
            }
            layer_inputs.push(h);
            if i == last {
                return Ok((
                    z,
                    ForwardCache {
                        layer_inputs,
                        pre_activations,
                    },
                ));
            }
            h = z.mapv(|v| act.apply(v));
            pre_activations.push(z);
        }
        unreachable!("architecture always has an output layer")
    }

    /// Batched prediction without keeping the cache.
    pub fn predict_batch(
        &self,
        xt: ArrayView2<f64>,
        ts: &[usize],
        cond: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.forward_batch(xt, ts, cond).map(|(out, _)| out)
    }

    /// Parameter gradient of `sum(d_out * output)` for the batch that produced `cache`.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f64>) -> Vec<f64> {
        let act = self.arch.activation;
        let layers = self.layers();
        let mut grads = vec![0.0; self.params.len()];
        // layer offsets into the flat vector
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for (fan_in, fan_out) in self.arch.layer_dims() {
            offsets.push(off);
            off += fan_in * fan_out + fan_out;
        }
        let mut delta = d_out.to_owned();
        for i in (0..layers.len()).rev() {
            let (w, _) = &layers[i];
            let (fan_in, fan_out) = w.dim();
            let gw = cache.layer_inputs[i].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let base = offsets[i];
            grads[base..base + fan_in * fan_out]
                .iter_mut()
                .zip(gw.iter())
                .for_each(|(g, v)| *g = *v);
            grads[base + fan_in * fan_out..base + fan_in * fan_out + fan_out]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(g, v)| *g = *v);
            if i > 0 {
                let mut back = delta.dot(&w.t());
                back.zip_mut_with(&cache.pre_activations[i - 1], |d, z| {
                    *d *= act.derivative(*z)
                });
                delta = back;
            }
        }
        grads
    }
}

/// Single-sample prediction `eps_hat = eps_theta(x_t, t, c)`.
pub fn denoiser_forward(
    model: &DenoiserModel,
    xt: &[f64],
    t: usize,
    c: &[f64],
) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, xt.len()), xt).expect("row view");
    let cv = ArrayView2::from_shape((1, c.len()), c).expect("row view");
    let out = model.predict_batch(x, &[t], cv)?;
    Ok(out.row(0).to_vec())
}

/// Frozen deep copy used as the preference anchor.
pub fn snapshot_reference(model: &DenoiserModel) -> DenoiserModel {
    DenoiserModel {
        arch: model.arch.clone(),
        params: model.params.clone(),
        frozen: true,
    }
}
