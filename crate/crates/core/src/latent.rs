//! Latent representation learning: a small MLP beta-VAE over raster
//! observations, plus an identity-encoder bypass for state-vector mode.
//!
//! The encoder is trained once on the offline dataset and frozen during
//! online rounds; the decoder exists for reconstruction diagnostics only.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ndmath::{
    adam_step, loss_kl_diag_gaussian, loss_mse, mlp_backward, mlp_forward, mlp_forward_cached,
    AdamHyperParams, Activation, MlpSpec, OutputHead, ParamBlock, Result, Tensor,
};

/// A d-dimensional encoding of an observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Learned,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    /// Latent dimension d.
    pub d: usize,
    /// KL regularization weight.
    pub beta: f64,
    pub hidden_dims: Vec<usize>,
    /// Random +-1-cell raster translation during VAE training.
    pub shift_augment: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            d: 8,
            beta: 1e-6,
            hidden_dims: vec![64, 64],
            shift_augment: false,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub mode: EncoderMode,
    pub d: usize,
    pub obs_dim: usize,
    pub beta: f64,
    pub enc_spec: MlpSpec,
    pub enc_params: ParamBlock,
    pub dec_spec: MlpSpec,
    pub dec_params: ParamBlock,
    /// Raster side length when the observation is a square grid, 0 otherwise.
    pub raster_size: usize,
}

impl EncoderModel {
    pub fn new_learned(
        obs_dim: usize,
        raster_size: usize,
        cfg: &LatentConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let enc_spec = MlpSpec::new(
            obs_dim,
            cfg.hidden_dims.clone(),
            cfg.d,
            Activation::Relu,
            OutputHead::Gaussian,
        );
        let mut dec_hidden = cfg.hidden_dims.clone();
        dec_hidden.reverse();
        // Raster intensities live in [0, 1]; squash reconstructions there.
        let dec_head = if raster_size > 0 {
            OutputHead::Sigmoid
        } else {
            OutputHead::Linear
        };
        let dec_spec = MlpSpec::new(cfg.d, dec_hidden, obs_dim, Activation::Relu, dec_head);
        let enc_params = ParamBlock::init(&enc_spec, rng);
        let dec_params = ParamBlock::init(&dec_spec, rng);
        EncoderModel {
            mode: EncoderMode::Learned,
            d: cfg.d,
            obs_dim,
            beta: cfg.beta,
            enc_spec,
            enc_params,
            dec_spec,
            dec_params,
            raster_size,
        }
    }

    /// Exact pass-through; `d == obs_dim`.
    pub fn new_identity(obs_dim: usize) -> Self {
        let spec = MlpSpec::new(obs_dim, vec![], obs_dim, Activation::Relu, OutputHead::Linear);
        let mut rng = crate::rng::stream(0, "identity-enc", 0);
        EncoderModel {
            mode: EncoderMode::Identity,
            d: obs_dim,
            obs_dim,
            beta: 0.0,
            enc_spec: spec.clone(),
            enc_params: ParamBlock::init(&spec, &mut rng),
            dec_spec: spec.clone(),
            dec_params: ParamBlock::init(&spec, &mut rng),
            raster_size: 0,
        }
    }

    /// Encoder distribution `(mean, variance)` for a batch of observations.
    fn encode_dist(&self, obs: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = mlp_forward(&self.enc_spec, &self.enc_params, obs)?;
        Ok(split_mean_var(&out, self.d))
    }

    /// Encode a batch; rows of the result are latent vectors.
    pub fn encode_batch(
        &self,
        obs: &Tensor,
        rng: &mut ChaCha8Rng,
        stochastic: bool,
    ) -> Result<Tensor> {
        if self.mode == EncoderMode::Identity {
            return Ok(obs.clone());
        }
        let (mean, var) = self.encode_dist(obs)?;
        if !stochastic {
            return Ok(mean);
        }
        let mut z = mean.clone();
        use rand_distr::{Distribution, StandardNormal};
        for (zi, &vi) in z.data_mut().iter_mut().zip(var.data()) {
            let eps: f64 = StandardNormal.sample(rng);
            *zi += vi.sqrt() * eps;
        }
        Ok(z)
    }

    pub fn encode(
        &self,
        obs: &[f64],
        rng: &mut ChaCha8Rng,
        stochastic: bool,
    ) -> Result<LatentState> {
        let t = Tensor::from_vec(&[1, obs.len()], obs.to_vec())?;
        let z = self.encode_batch(&t, rng, stochastic)?;
        Ok(LatentState { z: z.into_data() })
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if self.mode == EncoderMode::Identity {
            return Ok(z.to_vec());
        }
        let t = Tensor::from_vec(&[1, z.len()], z.to_vec())?;
        let out = mlp_forward(&self.dec_spec, &self.dec_params, &t)?;
        Ok(out.into_data())
    }

    /// Mean reconstruction MSE over a set of observations.
    pub fn reconstruction_mse(&self, obs: &Tensor) -> Result<f64> {
        if self.mode == EncoderMode::Identity {
            return Ok(0.0);
        }
        let (mean, _) = self.encode_dist(obs)?;
        let recon = mlp_forward(&self.dec_spec, &self.dec_params, &mean)?;
        Ok(loss_mse(&recon, obs)?.0)
    }
}

fn split_mean_var(out: &Tensor, d: usize) -> (Tensor, Tensor) {
    let batch = out.rows();
    let mut mean = Tensor::zeros(&[batch, d]);
    let mut var = Tensor::zeros(&[batch, d]);
    for r in 0..batch {
        let row = out.row(r);
        mean.data_mut()[r * d..(r + 1) * d].copy_from_slice(&row[..d]);
        var.data_mut()[r * d..(r + 1) * d].copy_from_slice(&row[d..]);
    }
    (mean, var)
}

/// Translate a square raster by `(dx, dy)` cells with zero padding.
fn shift_raster(values: &[f64], g: usize, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for y in 0..g as i64 {
        for x in 0..g as i64 {
            let sx = x - dx;
            let sy = y - dy;
            if sx >= 0 && sx < g as i64 && sy >= 0 && sy < g as i64 {
                out[(y * g as i64 + x) as usize] = values[(sy * g as i64 + sx) as usize];
            }
        }
    }
    out
}

/// One epoch of minibatch Adam on `mse + beta * kl`. Returns the epoch-mean
/// reconstruction and KL losses.
pub fn train_vae_epoch(
    model: &mut EncoderModel,
    observations: &Tensor,
    cfg: &LatentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    assert!(model.mode == EncoderMode::Learned, "identity encoder is not trained");
    let n = observations.rows();
    assert!(n > 0, "empty dataset");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let hp = AdamHyperParams::with_lr(cfg.learning_rate);
    let d = model.d;
    let obs_dim = model.obs_dim;
    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut n_batches = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let b = chunk.len();
        let mut x = Tensor::zeros(&[b, obs_dim]);
        for (r, &i) in chunk.iter().enumerate() {
            let mut row = observations.row(i).to_vec();
            if cfg.shift_augment && model.raster_size > 0 {
                let dx = rng.gen_range(-1i64..=1);
                let dy = rng.gen_range(-1i64..=1);
                row = shift_raster(&row, model.raster_size, dx, dy);
            }
            x.data_mut()[r * obs_dim..(r + 1) * obs_dim].copy_from_slice(&row);
        }

        let enc_cache = mlp_forward_cached(&model.enc_spec, &model.enc_params, &x)?;
        let (mean, var) = split_mean_var(enc_cache.output(), d);
        // Reparameterization: z = mu + sqrt(var) * eps.
        use rand_distr::{Distribution, StandardNormal};
        let mut eps = Tensor::zeros(&[b, d]);
        for e in eps.data_mut() {
            *e = StandardNormal.sample(rng);
        }
        let mut z = mean.clone();
        for ((zi, &vi), &ei) in z.data_mut().iter_mut().zip(var.data()).zip(eps.data()) {
            *zi += vi.sqrt() * ei;
        }

        let dec_cache = mlp_forward_cached(&model.dec_spec, &model.dec_params, &z)?;
        let (recon_loss, drecon) = loss_mse(dec_cache.output(), &x)?;
        let (dec_grads, dz) = mlp_backward(&model.dec_spec, &model.dec_params, &dec_cache, &drecon)?;

        let log_var = Tensor::from_vec(var.shape(), var.data().iter().map(|v| v.ln()).collect())?;
        let (kl_loss, dkl_mu, dkl_lv) = loss_kl_diag_gaussian(&mean, &log_var)?;

        // Assemble the upstream gradient for the encoder's (mean, var) output.
        let mut upstream = Tensor::zeros(&[b, 2 * d]);
        {
            let up = upstream.data_mut();
            for r in 0..b {
                for j in 0..d {
                    let i = r * d + j;
                    let v = var.data()[i];
                    let dmu = dz.data()[i] + model.beta * dkl_mu.data()[i];
                    // dz/dvar = eps / (2 sqrt(var)); d log_var / dvar = 1/var.
                    let dvar = dz.data()[i] * eps.data()[i] / (2.0 * v.sqrt())
                        + model.beta * dkl_lv.data()[i] / v;
                    up[r * 2 * d + j] = dmu;
                    up[r * 2 * d + d + j] = dvar;
                }
            }
        }
        let (enc_grads, _) = mlp_backward(&model.enc_spec, &model.enc_params, &enc_cache, &upstream)?;

        adam_step(&mut model.dec_params, &dec_grads, &hp)?;
        adam_step(&mut model.enc_params, &enc_grads, &hp)?;

        recon_sum += recon_loss;
        kl_sum += kl_loss;
        n_batches += 1.0;
    }
    Ok((recon_sum / n_batches, kl_sum / n_batches))
}
