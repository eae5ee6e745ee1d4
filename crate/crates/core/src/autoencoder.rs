//! Encoder/decoder pair defining the latent space and the reconstruction-error signal.

use crate::error::{Error, Result};
use crate::nn::{fit, Activation, Dense, Network, Targets, TrainConfig};
use crate::numeric::{Matrix, Rng};

/// Latent width used when the configuration does not fix one.
pub fn default_latent_dim(input_dim: usize) -> usize {
    2usize.max(input_dim.div_ceil(8))
}

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    encoder: Network,
    decoder: Network,
}

impl Autoencoder {
    pub fn new(encoder: Network, decoder: Network) -> Result<Self> {
        let k = encoder.input_dim();
        let m = encoder.output_dim();
        if m >= k {
            return Err(Error::domain(format!(
                "latent width {m} must be smaller than input width {k}"
            )));
        }
        if decoder.input_dim() != m || decoder.output_dim() != k {
            return Err(Error::shape(format!(
                "decoder maps {}→{}, expected {m}→{k}",
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        let finite = encoder
            .layers
            .iter()
            .chain(&decoder.layers)
            .all(|l| l.bias.iter().all(|b| b.is_finite()));
        if !finite {
            return Err(Error::domain("non-finite bias"));
        }
        Ok(Self { encoder, decoder })
    }

    /// Freshly initialized `k → hidden.. → m` encoder with a mirrored decoder.
    pub fn init(input_dim: usize, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut enc_widths = vec![input_dim];
        enc_widths.extend_from_slice(widths);
        if enc_widths.len() < 2 {
            return Err(Error::domain("autoencoder needs at least a latent width"));
        }
        let mut dec_widths = enc_widths.clone();
        dec_widths.reverse();
        let encoder = Network::glorot(&enc_widths, Activation::Identity, rng);
        let decoder = Network::glorot(&dec_widths, Activation::Identity, rng);
        Self::new(encoder, decoder)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.forward(x)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(z)
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(x)?)
    }

    /// `(1/k) Σ (x_i − x̂_i)²`.
    pub fn reconstruction_mse(&self, x: &[f64]) -> Result<f64> {
        let x_hat = self.reconstruct(x)?;
        Ok(mse(x, &x_hat))
    }

    /// Latent code and reconstruction error from one encoder pass.
    pub fn encode_with_error(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let z = self.encode(x)?;
        let x_hat = self.decode(&z)?;
        Ok((z, mse(x, &x_hat)))
    }

    pub fn encode_all(&self, data: &Matrix) -> Result<Matrix> {
        let mut out = Vec::with_capacity(data.rows() * self.latent_dim());
        for row in data.iter_rows() {
            out.extend(self.encode(row)?);
        }
        Matrix::new(data.rows(), self.latent_dim(), out)
    }

    /// Encoder then decoder as one network; training minimises its MSE to the input.
    pub fn stacked(&self) -> Network {
        let layers: Vec<Dense> = self
            .encoder
            .layers
            .iter()
            .chain(&self.decoder.layers)
            .cloned()
            .collect();
        Network { layers }
    }

    fn unstack(net: Network, encoder_depth: usize) -> Self {
        let mut layers = net.layers;
        let decoder = layers.split_off(encoder_depth);
        Self {
            encoder: Network { layers },
            decoder: Network { layers: decoder },
        }
    }
}

fn mse(x: &[f64], x_hat: &[f64]) -> f64 {
    x.iter()
        .zip(x_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64
}

/// Trains an autoencoder on `features` (rows in `[-1, 1]`).
///
/// `cfg.widths` lists the encoder widths after the input, ending with the
/// latent width; empty means `[64, default_latent_dim(k)]`. Returns the model
/// and its loss trace (initial loss first, then one entry per epoch).
pub fn train_autoencoder(features: &Matrix, cfg: &TrainConfig) -> Result<(Autoencoder, Vec<f64>)> {
    if features.rows() < 2 {
        return Err(Error::domain("autoencoder training needs at least 2 samples"));
    }
    if features.data().iter().any(|v| v.abs() > 1.0) {
        return Err(Error::domain("features must lie within [-1, 1]"));
    }
    let k = features.cols();
    let widths = if cfg.widths.is_empty() {
        vec![DEFAULT_HIDDEN, default_latent_dim(k)]
    } else {
        cfg.widths.clone()
    };
    let mut rng = Rng::new(cfg.seed);
    let init = Autoencoder::init(k, &widths, &mut rng)?;
    let depth = init.encoder.layers.len();
    let mut net = init.stacked();
    let trace = fit(&mut net, features, Targets::Values(features), cfg, &mut rng)?;
    Ok((Autoencoder::unstack(net, depth), trace))
}
