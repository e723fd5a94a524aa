//! Fully-convolutional VAE: three stride-2 encoder stages down to a spatial
//! latent (32 channels at 1/8 resolution), mirrored transposed-conv decoder
//! with a sigmoid output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conv::ConvSpec;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape4, Tensor4, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input spatial size {h}x{w} is not a positive multiple of {factor}; pad slices first")]
    SpatialSize { h: usize, w: usize, factor: usize },
    #[error("input must have {expected} channel(s), got {got}")]
    Channels { expected: usize, got: usize },
    #[error("parameter '{name}' has shape {got}, expected {expected}")]
    ParamShape {
        name: String,
        got: Shape4,
        expected: Shape4,
    },
    #[error("parameter set has {got} tensors, architecture needs {expected}")]
    ParamCount { got: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

impl Layer {
    fn new(
        name: &str,
        kind: LayerKind,
        cin: usize,
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
        activation: Activation,
    ) -> Self {
        Layer {
            name: name.to_string(),
            kind,
            kernel: k,
            stride: s,
            padding: p,
            in_channels: cin,
            out_channels: cout,
            activation,
        }
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::square(
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.stride,
            self.padding,
        )
    }

    pub fn weight_shape(&self) -> Shape4 {
        match self.kind {
            LayerKind::Conv => Shape4::new(
                self.out_channels,
                self.in_channels,
                self.kernel,
                self.kernel,
            ),
            LayerKind::ConvTranspose => Shape4::new(
                self.in_channels,
                self.out_channels,
                self.kernel,
                self.kernel,
            ),
        }
    }

    pub fn bias_shape(&self) -> Shape4 {
        Shape4::new(1, self.out_channels, 1, 1)
    }
}

/// Layer layout of the VAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeArchitecture {
    pub encoder: Vec<Layer>,
    pub mu_head: Layer,
    pub logvar_head: Layer,
    pub decoder: Vec<Layer>,
    pub latent_channels: usize,
    /// Total spatial downsampling of the encoder.
    pub downsample: usize,
    pub leaky_slope: f64,
    /// Range applied to the logvar head output.
    pub logvar_range: (f64, f64),
}

impl Default for VaeArchitecture {
    fn default() -> Self {
        VaeArchitecture::with_widths(32, 64, 32)
    }
}

impl VaeArchitecture {
    /// The default layer stack with channel widths `c1` (first/last stage),
    /// `c2` (inner stages) and `latent`.
    pub fn with_widths(c1: usize, c2: usize, latent: usize) -> Self {
        use Activation::*;
        use LayerKind::*;
        VaeArchitecture {
            encoder: vec![
                Layer::new("enc1", Conv, 1, c1, 4, 2, 1, LeakyRelu),
                Layer::new("enc2", Conv, c1, c2, 4, 2, 1, LeakyRelu),
                Layer::new("enc3", Conv, c2, c2, 4, 2, 1, LeakyRelu),
            ],
            mu_head: Layer::new("mu", Conv, c2, latent, 3, 1, 1, Identity),
            logvar_head: Layer::new("logvar", Conv, c2, latent, 3, 1, 1, Identity),
            decoder: vec![
                Layer::new("dec1", ConvTranspose, latent, c2, 4, 2, 1, LeakyRelu),
                Layer::new("dec2", ConvTranspose, c2, c1, 4, 2, 1, LeakyRelu),
                Layer::new("dec3", ConvTranspose, c1, c1, 4, 2, 1, LeakyRelu),
                Layer::new("out", Conv, c1, 1, 3, 1, 1, Sigmoid),
            ],
            latent_channels: latent,
            downsample: 8,
            leaky_slope: 0.01,
            logvar_range: (-20.0, 10.0),
        }
    }

    /// All layers in parameter order: encoder, mu, logvar, decoder.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder
            .iter()
            .chain([&self.mu_head, &self.logvar_head])
            .chain(self.decoder.iter())
    }

    /// Canonical text form stored in checkpoints.
    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("architecture serializes")
    }

    pub fn latent_shape(&self, n: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(
            n,
            self.latent_channels,
            h / self.downsample,
            w / self.downsample,
        )
    }

    pub fn check_input(&self, shape: Shape4) -> Result<()> {
        let cin = self.encoder[0].in_channels;
        if shape.c != cin {
            return Err(ModelError::Channels {
                expected: cin,
                got: shape.c,
            });
        }
        let f = self.downsample;
        if shape.h % f != 0 || shape.w % f != 0 {
            return Err(ModelError::SpatialSize {
                h: shape.h,
                w: shape.w,
                factor: f,
            });
        }
        Ok(())
    }

    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init<T: Scalar>(&self, seed: u64) -> VaeParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for layer in self.layers() {
            let ws = layer.weight_shape();
            let k2 = layer.kernel * layer.kernel;
            let bound = (6.0 / ((layer.in_channels + layer.out_channels) * k2) as f64).sqrt();
            let data = (0..ws.numel())
                .map(|_| T::lit(rng.random_range(-bound..=bound)))
                .collect();
            tensors.push((
                format!("{}.weight", layer.name),
                Tensor4::from_vec(ws, data).expect("weight shape"),
            ));
            tensors.push((
                format!("{}.bias", layer.name),
                Tensor4::zeros(layer.bias_shape()),
            ));
        }
        VaeParams { tensors }
    }
}

/// Named layer tensors, two per layer (`<layer>.weight`, `<layer>.bias`), in
/// architecture order.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams<T: Scalar> {
    tensors: Vec<(String, Tensor4<T>)>,
}

impl<T: Scalar> VaeParams<T> {
    /// Builds a parameter set and checks it against `arch`.
    pub fn from_named(arch: &VaeArchitecture, tensors: Vec<(String, Tensor4<T>)>) -> Result<Self> {
        let params = VaeParams { tensors };
        params.validate(arch)?;
        Ok(params)
    }

    pub fn validate(&self, arch: &VaeArchitecture) -> Result<()> {
        let expected = 2 * arch.layers().count();
        if self.tensors.len() != expected {
            return Err(ModelError::ParamCount {
                got: self.tensors.len(),
                expected,
            });
        }
        for (i, layer) in arch.layers().enumerate() {
            for (j, (suffix, shape)) in [
                ("weight", layer.weight_shape()),
                ("bias", layer.bias_shape()),
            ]
            .into_iter()
            .enumerate()
            {
                let (name, t) = &self.tensors[2 * i + j];
                let want = format!("{}.{}", layer.name, suffix);
                if *name != want || t.shape() != shape {
                    return Err(ModelError::ParamShape {
                        name: name.clone(),
                        got: t.shape(),
                        expected: shape,
                    });
                }
                if !t.is_finite() {
                    return Err(ModelError::Tensor(TensorError::NonFinite { op: "params" }));
                }
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> &[(String, Tensor4<T>)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor4<T>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> VaeParams<U> {
        VaeParams {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Records every tensor as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|(_, t)| tape.leaf(t.clone()))
                .collect(),
        )
    }

    /// Records every tensor as a constant.
    pub fn register_frozen(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|(_, t)| tape.constant(t.clone()))
                .collect(),
        )
    }
}

/// Tape handles of a registered [`VaeParams`], same order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

/// Latent posterior parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub mu: Var,
    pub logvar: Var,
}

/// Latent posterior parameters as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats<T: Scalar> {
    pub mu: Tensor4<T>,
    pub logvar: Tensor4<T>,
}

fn apply_layer<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &VaeArchitecture,
    layer: &Layer,
    index: usize,
    vars: &ParamVars,
    x: Var,
) -> Result<Var> {
    let (w, b) = (vars.0[2 * index], vars.0[2 * index + 1]);
    let y = match layer.kind {
        LayerKind::Conv => tape.conv2d(x, w, b, layer.spec())?,
        LayerKind::ConvTranspose => tape.conv_transpose2d(x, w, b, layer.spec())?,
    };
    Ok(match layer.activation {
        Activation::Identity => y,
        Activation::LeakyRelu => tape.leaky_relu(y, T::lit(arch.leaky_slope))?,
        Activation::Sigmoid => tape.sigmoid(y),
    })
}

/// Encoder on a tape. `x` is `N × 1 × H × W` with H, W multiples of 8.
pub fn encode_vars<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &VaeArchitecture,
    vars: &ParamVars,
    x: Var,
) -> Result<LatentVars> {
    arch.check_input(tape.shape(x))?;
    let mut h = x;
    for (i, layer) in arch.encoder.iter().enumerate() {
        h = apply_layer(tape, arch, layer, i, vars, h)?;
    }
    let ne = arch.encoder.len();
    let mu = apply_layer(tape, arch, &arch.mu_head, ne, vars, h)?;
    let raw = apply_layer(tape, arch, &arch.logvar_head, ne + 1, vars, h)?;
    let (lo, hi) = arch.logvar_range;
    let logvar = tape.clamp(raw, T::lit(lo), T::lit(hi));
    Ok(LatentVars { mu, logvar })
}

/// `mu + exp(logvar / 2) · ε`, or `mu` itself when `deterministic`.
pub fn reparameterize_vars<T: Scalar>(
    tape: &mut Tape<T>,
    stats: &LatentVars,
    rng: &mut impl Rng,
    deterministic: bool,
) -> Result<Var> {
    if deterministic {
        return Ok(stats.mu);
    }
    let shape = tape.shape(stats.mu);
    let eps: Vec<T> = (0..shape.numel())
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let eps = tape.constant(Tensor4::from_vec(shape, eps)?);
    let half = tape.scale(stats.logvar, T::lit(0.5));
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eps)?;
    Ok(tape.add(stats.mu, noise)?)
}

/// Decoder on a tape: `N × 32 × h × w` to `N × 1 × 8h × 8w`, values in [0, 1].
pub fn decode_vars<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &VaeArchitecture,
    vars: &ParamVars,
    z: Var,
) -> Result<Var> {
    let zc = tape.shape(z).c;
    if zc != arch.latent_channels {
        return Err(ModelError::Channels {
            expected: arch.latent_channels,
            got: zc,
        });
    }
    let offset = arch.encoder.len() + 2;
    let mut h = z;
    for (i, layer) in arch.decoder.iter().enumerate() {
        h = apply_layer(tape, arch, layer, offset + i, vars, h)?;
    }
    Ok(h)
}

/// Encode, sample, decode on a tape.
pub fn forward_vars<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &VaeArchitecture,
    vars: &ParamVars,
    x: Var,
    rng: &mut impl Rng,
    deterministic: bool,
) -> Result<(Var, LatentVars)> {
    let stats = encode_vars(tape, arch, vars, x)?;
    let z = reparameterize_vars(tape, &stats, rng, deterministic)?;
    let recon = decode_vars(tape, arch, vars, z)?;
    Ok((recon, stats))
}

/// Tape-free wrapper around a trained parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae<T: Scalar> {
    pub arch: VaeArchitecture,
    pub params: VaeParams<T>,
}

impl<T: Scalar> Vae<T> {
    pub fn new(arch: VaeArchitecture, params: VaeParams<T>) -> Result<Self> {
        params.validate(&arch)?;
        Ok(Vae { arch, params })
    }

    pub fn encode(&self, batch: &Tensor4<T>) -> Result<LatentStats<T>> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let s = encode_vars(&mut tape, &self.arch, &vars, x)?;
        Ok(LatentStats {
            mu: tape.value(s.mu).clone(),
            logvar: tape.value(s.logvar).clone(),
        })
    }

    pub fn decode(&self, z: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let out = decode_vars(&mut tape, &self.arch, &vars, zv)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward(
        &self,
        batch: &Tensor4<T>,
        rng: &mut impl Rng,
        deterministic: bool,
    ) -> Result<(Tensor4<T>, LatentStats<T>)> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let (recon, s) = forward_vars(&mut tape, &self.arch, &vars, x, rng, deterministic)?;
        Ok((
            tape.value(recon).clone(),
            LatentStats {
                mu: tape.value(s.mu).clone(),
                logvar: tape.value(s.logvar).clone(),
            },
        ))
    }

    /// Deterministic reconstruction (latent mean, no sampling).
    pub fn reconstruct(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let s = encode_vars(&mut tape, &self.arch, &vars, x)?;
        let out = decode_vars(&mut tape, &self.arch, &vars, s.mu)?;
        Ok(tape.value(out).clone())
    }
}

/// Samples `mu + exp(logvar / 2) · ε` outside a tape.
pub fn reparameterize<T: Scalar>(
    stats: &LatentStats<T>,
    rng: &mut impl Rng,
    deterministic: bool,
) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let vars = LatentVars {
        mu: tape.constant(stats.mu.clone()),
        logvar: tape.constant(stats.logvar.clone()),
    };
    let z = reparameterize_vars(&mut tape, &vars, rng, deterministic)?;
    Ok(tape.value(z).clone())
}
