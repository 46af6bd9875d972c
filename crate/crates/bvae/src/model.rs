//! Feed-forward VAEs with the binarized latent regularizer and the training
//! loop used everywhere in the crate.
//!
//! The reference architecture is 784-256-(2d) encoding and d-256-784
//! decoding, tanh hidden activations, sigmoid output. The encoder's output
//! splits into posterior means and log variances, log variances clamped to
//! [-10, 10]. Reconstruction loss is image-sum binary cross-entropy averaged
//! over the batch, computed from logits. The regularizer is the batch mean of
//! the per-sample binarized KL; `binarize = false` routes through the same
//! code with r = 0, which is why the two configurations produce bit-identical
//! trajectories.
//!
//! Variants share one total-loss formula family:
//! `vae`: recon + kl, `beta_vae`: recon + beta * kl,
//! `disentangling`: recon + gamma * |kl - C(t)| with C ramped linearly from 0
//! over `capacity_ramp_steps` optimizer steps.
//!
//! Everything that draws randomness takes a seed or [`Rng`]; training derives
//! one child stream for shuffling/noise and one per validation pass, so logs
//! and parameters are bit-reproducible run to run.

use crate::graph::{Tape, Var};
use crate::latent::{
    binarized_kl_var, sample_biased, sample_reduced_bias, GaussianPosterior, LatentPriorConfig,
    LatentStats,
};
use crate::optim::{AdamParams, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// Encoder log-variance outputs are clamped to this interval before any use.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("variant: {0}")]
    BadVariant(String),
    #[error("architecture: {0}")]
    BadArchitecture(String),
    #[error("biased sampling requires collected latent stats")]
    MissingStats,
    #[error("non-finite loss at epoch {epoch}, step {step}: recon {recon}, kl {kl}")]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        recon: f64,
        kl: f64,
    },
    #[error(transparent)]
    Latent(#[from] crate::latent::LatentError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

/// Layer widths of a fully connected stack, including input and output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>) -> MlpSpec {
        MlpSpec {
            layer_widths,
            hidden_activation: Activation::Tanh,
        }
    }

    pub fn input_dim(&self) -> usize {
        *self.layer_widths.first().expect("MlpSpec: empty widths")
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("MlpSpec: empty widths")
    }
}

/// Dense stack; weights are `[fan_in, fan_out]`, biases `[fan_out]`. The
/// final layer is linear, callers apply their own output nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

pub struct MlpVars<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
}

impl Mlp {
    /// Glorot-normal weights, zero biases, drawn in layer order from `rng`.
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Mlp {
        assert!(
            spec.layer_widths.len() >= 2,
            "Mlp::init: need at least input and output widths, got {:?}",
            spec.layer_widths
        );
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in spec.layer_widths.windows(2) {
            let (fi, fo) = (w[0], w[1]);
            let std = (2.0 / (fi + fo) as f64).sqrt();
            weights.push(rng.normal_tensor(&[fi, fo]).scale(std));
            biases.push(Tensor::zeros(&[fo]));
        }
        Mlp {
            spec,
            weights,
            biases,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum::<usize>()
            + self.biases.iter().map(Tensor::numel).sum::<usize>()
    }

    /// Parameter tensors in the fixed (W0, b0, W1, b1, ...) order shared with
    /// [`Mlp::leaves`] and the optimizer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w as &mut Tensor, b as &mut Tensor])
            .collect()
    }

    pub fn set_params(&mut self, flat: &[Tensor]) {
        let mut mine = self.params_mut();
        assert_eq!(flat.len(), mine.len(), "set_params: count mismatch");
        for (dst, src) in mine.iter_mut().zip(flat) {
            assert_eq!(dst.shape(), src.shape(), "set_params: shape mismatch");
            **dst = src.clone();
        }
    }

    pub fn leaves<'t>(&self, tape: &'t Tape) -> MlpVars<'t> {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Graph forward pass to the final linear output (no output activation).
    pub fn forward<'t>(&self, vars: &MlpVars<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (i, (w, b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            h = h.matmul(*w).add_row(*b);
            if i + 1 < vars.weights.len() {
                h = match self.spec.hidden_activation {
                    Activation::Tanh => h.tanh(),
                    Activation::Sigmoid => h.sigmoid(),
                };
            }
        }
        h
    }

    /// Value-level forward on a throwaway tape.
    pub fn forward_value(&self, x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let vars = self.leaves(&tape);
        self.forward(&vars, tape.leaf(x.clone())).value()
    }
}

impl<'t> MlpVars<'t> {
    pub fn flat(&self) -> Vec<Var<'t>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Vae,
    BetaVae,
    Disentangling,
}

impl VariantKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::Vae => "vae",
            VariantKind::BetaVae => "beta_vae",
            VariantKind::Disentangling => "disentangling",
        }
    }

    pub fn parse(s: &str) -> Result<VariantKind, ModelError> {
        match s {
            "vae" => Ok(VariantKind::Vae),
            "beta_vae" => Ok(VariantKind::BetaVae),
            "disentangling" => Ok(VariantKind::Disentangling),
            other => Err(ModelError::BadVariant(format!(
                "unknown kind `{}` (expected vae, beta_vae or disentangling)",
                other
            ))),
        }
    }
}

/// Loss-shaping configuration. `beta_gamma` is beta for `beta_vae` and gamma
/// for `disentangling`; `capacity`/`capacity_ramp_steps` only apply to
/// `disentangling`. `binarize = false` ignores `r` (the effective offset is
/// then 0, the standard prior).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub kind: VariantKind,
    pub beta_gamma: f64,
    pub capacity: f64,
    pub capacity_ramp_steps: usize,
    pub binarize: bool,
    pub r: f64,
}

impl VariantConfig {
    pub fn vae() -> VariantConfig {
        VariantConfig {
            kind: VariantKind::Vae,
            beta_gamma: 1.0,
            capacity: 0.0,
            capacity_ramp_steps: 0,
            binarize: false,
            r: 0.0,
        }
    }

    pub fn binarized(r: f64) -> VariantConfig {
        VariantConfig {
            binarize: true,
            r,
            ..VariantConfig::vae()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadVariant(msg));
        if !self.beta_gamma.is_finite() || self.beta_gamma <= 0.0 {
            return fail(format!(
                "beta_gamma must be positive, got {}",
                self.beta_gamma
            ));
        }
        if !self.r.is_finite() || self.r < 0.0 {
            return fail(format!("r must be non-negative, got {}", self.r));
        }
        if !self.capacity.is_finite() || self.capacity < 0.0 {
            return fail(format!(
                "capacity must be non-negative, got {}",
                self.capacity
            ));
        }
        match self.kind {
            VariantKind::Vae => {
                if self.beta_gamma != 1.0 {
                    return fail(format!(
                        "kind = vae fixes beta_gamma = 1, got {}",
                        self.beta_gamma
                    ));
                }
                if self.capacity != 0.0 {
                    return fail(format!(
                        "kind = vae fixes capacity = 0, got {}",
                        self.capacity
                    ));
                }
            }
            VariantKind::BetaVae => {
                if self.capacity != 0.0 {
                    return fail(format!(
                        "kind = beta_vae fixes capacity = 0, got {}",
                        self.capacity
                    ));
                }
            }
            VariantKind::Disentangling => {}
        }
        Ok(())
    }

    /// Offset actually applied: `r` when binarizing, else 0.
    pub fn effective_r(&self) -> f64 {
        if self.binarize {
            self.r
        } else {
            0.0
        }
    }

    /// Capacity target after `step` completed optimizer steps: linear ramp
    /// from 0 to `capacity` over `capacity_ramp_steps` (immediately at the
    /// target when the ramp is 0).
    pub fn capacity_at(&self, step: u64) -> f64 {
        if self.capacity_ramp_steps == 0 {
            self.capacity
        } else {
            self.capacity * (step as f64 / self.capacity_ramp_steps as f64).min(1.0)
        }
    }
}

/// How [`generate`](VaeModel::generate) draws latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    ReducedBias,
    Biased,
}

impl SampleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleMode::ReducedBias => "reduced_bias",
            SampleMode::Biased => "biased",
        }
    }

    pub fn parse(s: &str) -> Result<SampleMode, ModelError> {
        match s {
            "reduced_bias" => Ok(SampleMode::ReducedBias),
            "biased" => Ok(SampleMode::Biased),
            other => Err(ModelError::BadVariant(format!(
                "unknown sample mode `{}` (expected reduced_bias or biased)",
                other
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub recon_bce: f64,
    pub kl: f64,
}

#[derive(Clone)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub prior: LatentPriorConfig,
    pub variant: VariantConfig,
    latent_dim: usize,
    /// Prior with the variant's effective offset baked in; kept in sync with
    /// `prior`/`variant` by construction.
    effective_prior: LatentPriorConfig,
}

struct ModelVars<'t> {
    enc: MlpVars<'t>,
    dec: MlpVars<'t>,
}

impl<'t> ModelVars<'t> {
    fn flat(&self) -> Vec<Var<'t>> {
        let mut v = self.enc.flat();
        v.extend(self.dec.flat());
        v
    }
}

impl VaeModel {
    /// Reference architecture: `input - hidden - 2d` encoder and
    /// `d - hidden - input` decoder.
    pub fn new(
        input_dim: usize,
        hidden: usize,
        latent_dim: usize,
        prior: LatentPriorConfig,
        variant: VariantConfig,
        seed: u64,
    ) -> Result<VaeModel, ModelError> {
        VaeModel::with_specs(
            MlpSpec::new(vec![input_dim, hidden, 2 * latent_dim]),
            MlpSpec::new(vec![latent_dim, hidden, input_dim]),
            prior,
            variant,
            seed,
        )
    }

    /// Arbitrary encoder/decoder stacks (used for the oversized-decoder
    /// collapse study). The encoder must emit `2d` values, the decoder accept
    /// `d` and emit the encoder's input width.
    pub fn with_specs(
        enc_spec: MlpSpec,
        dec_spec: MlpSpec,
        prior: LatentPriorConfig,
        variant: VariantConfig,
        seed: u64,
    ) -> Result<VaeModel, ModelError> {
        variant.validate()?;
        let latent_dim = dec_spec.input_dim();
        if enc_spec.output_dim() != 2 * latent_dim {
            return Err(ModelError::BadArchitecture(format!(
                "encoder emits {} values, decoder wants 2 x {} latent parameters",
                enc_spec.output_dim(),
                latent_dim
            )));
        }
        if dec_spec.output_dim() != enc_spec.input_dim() {
            return Err(ModelError::BadArchitecture(format!(
                "decoder emits {}, encoder consumes {}",
                dec_spec.output_dim(),
                enc_spec.input_dim()
            )));
        }
        if prior.dim() != latent_dim {
            return Err(ModelError::BadArchitecture(format!(
                "prior has {} dimensions, model {}",
                prior.dim(),
                latent_dim
            )));
        }
        let mut rng = Rng::derive(seed, "model-init");
        let encoder = Mlp::init(enc_spec, &mut rng);
        let decoder = Mlp::init(dec_spec, &mut rng);
        let effective_prior = prior.with_r(variant.effective_r())?;
        Ok(VaeModel {
            encoder,
            decoder,
            prior,
            variant,
            latent_dim,
            effective_prior,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.spec().input_dim()
    }

    /// Prior with the variant's effective offset (r or 0).
    pub fn effective_prior(&self) -> &LatentPriorConfig {
        &self.effective_prior
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    /// Flat parameter list: encoder (W, b)*, then decoder (W, b)*.
    pub fn params(&self) -> Vec<Tensor> {
        self.encoder
            .params()
            .into_iter()
            .chain(self.decoder.params())
            .cloned()
            .collect()
    }

    pub fn set_params(&mut self, flat: &[Tensor]) {
        let n_enc = self.encoder.layers() * 2;
        self.encoder.set_params(&flat[..n_enc]);
        self.decoder.set_params(&flat[n_enc..]);
    }

    fn leaves<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        ModelVars {
            enc: self.encoder.leaves(tape),
            dec: self.decoder.leaves(tape),
        }
    }

    fn encode_graph<'t>(&self, vars: &ModelVars<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let out = self.encoder.forward(&vars.enc, x);
        let d = self.latent_dim;
        let mu = out.slice_cols(0, d);
        let log_var = out.slice_cols(d, d).clamp(LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1);
        (mu, log_var)
    }

    /// Posterior parameters for a batch `[n, input_dim]`, log variances
    /// already clamped. Evaluation path; build batches of a few hundred rows.
    pub fn encode(&self, x: &Tensor) -> GaussianPosterior {
        let tape = Tape::new();
        let vars = self.leaves(&tape);
        let (mu, lv) = self.encode_graph(&vars, tape.leaf(x.clone()));
        GaussianPosterior::new(mu.value(), lv.value())
    }

    /// Decoded Bernoulli means in (0, 1) for latents `[n, d]`.
    pub fn decode(&self, z: &Tensor) -> Tensor {
        let tape = Tape::new();
        let vars = self.leaves(&tape);
        self.decoder
            .forward(&vars.dec, tape.leaf(z.clone()))
            .sigmoid()
            .value()
    }

    /// Decoder pre-activation logits; the stable input to from-logits BCE.
    pub fn decode_logits(&self, z: &Tensor) -> Tensor {
        let tape = Tape::new();
        let vars = self.leaves(&tape);
        self.decoder
            .forward(&vars.dec, tape.leaf(z.clone()))
            .value()
    }

    /// `z = mu + sigma * eps` with fresh standard-normal noise; the sampled
    /// path the loss differentiates through (gradients reach `mu_q` and
    /// `log_var_q`, the noise is a constant).
    pub fn reparameterize(post: &GaussianPosterior, rng: &mut Rng) -> Tensor {
        let eps = rng.normal_tensor(post.mu_q.shape());
        post.mu_q.add(&post.sigma_q().mul(&eps))
    }

    // Shared loss graph. Returns the total plus the recon/kl scalars.
    fn loss_graph<'t>(
        &self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        x: &Tensor,
        step: u64,
        rng: &mut Rng,
    ) -> (Var<'t>, Var<'t>, Var<'t>) {
        let n = x.rows();
        let xv = tape.leaf(x.clone());
        let (mu, log_var) = self.encode_graph(vars, xv);
        // Reparametrized sample: eps enters as a leaf, so no gradient path
        // into the noise exists by construction.
        let eps = tape.leaf(rng.normal_tensor(&[n, self.latent_dim]));
        let sigma = (log_var * 0.5).exp();
        let z = mu.add(sigma.mul(eps));
        let logits = self.decoder.forward(&vars.dec, z);
        let recon = logits.bce_logits_row_sum(x).mean();
        let kl = binarized_kl_var(mu, log_var, &self.effective_prior).mean();
        let total = match self.variant.kind {
            VariantKind::Vae => recon.add(kl),
            VariantKind::BetaVae => recon.add(kl.mul_scalar(self.variant.beta_gamma)),
            VariantKind::Disentangling => {
                let c = self.variant.capacity_at(step);
                recon.add((kl + (-c)).abs().mul_scalar(self.variant.beta_gamma))
            }
        };
        (total, recon, kl)
    }

    /// Loss terms for one batch at optimizer step `step`. Consumes one
    /// `[n, d]` noise tensor from `rng`.
    pub fn loss(&self, x: &Tensor, step: u64, rng: &mut Rng) -> LossTerms {
        let tape = Tape::new();
        let vars = self.leaves(&tape);
        let (total, recon, kl) = self.loss_graph(&tape, &vars, x, step, rng);
        LossTerms {
            total: total.value().item(),
            recon_bce: recon.value().item(),
            kl: kl.value().item(),
        }
    }

    /// Loss terms plus the analytic gradient of `total` with respect to
    /// every parameter, in `params()` order. Same noise contract as [`loss`](Self::loss).
    pub fn loss_grads(&self, x: &Tensor, step: u64, rng: &mut Rng) -> (LossTerms, Vec<Tensor>) {
        let tape = Tape::new();
        let vars = self.leaves(&tape);
        let (total, recon, kl) = self.loss_graph(&tape, &vars, x, step, rng);
        tape.backward(total);
        let grads = vars.flat().iter().map(|&v| tape.grad(v)).collect();
        let terms = LossTerms {
            total: total.value().item(),
            recon_bce: recon.value().item(),
            kl: kl.value().item(),
        };
        (terms, grads)
    }

    /// Decoded samples `[n, input_dim]` from the latent prior mixture.
    /// `Biased` mode requires stats collected from a trained model's
    /// posteriors.
    pub fn generate(
        &self,
        n: usize,
        mode: SampleMode,
        stats: Option<&LatentStats>,
        rng: &mut Rng,
    ) -> Result<Tensor, ModelError> {
        let prior = &self.effective_prior;
        let z = match mode {
            SampleMode::ReducedBias => sample_reduced_bias(prior, n, rng),
            SampleMode::Biased => {
                let stats = stats.ok_or(ModelError::MissingStats)?;
                sample_biased(prior, stats, n, rng)
            }
        };
        Ok(self.decode(&z))
    }

    /// Deterministic round trip: decode the posterior means, no sampling.
    pub fn reconstruct(&self, x: &Tensor) -> Tensor {
        self.decode(&self.encode(x).mu_q)
    }

    /// Posterior means over a whole dataset, evaluated in batches: `[n, d]`.
    pub fn encode_dataset(&self, images: &Tensor, batch: usize) -> GaussianPosterior {
        let n = images.rows();
        let mut mu = Vec::with_capacity(n * self.latent_dim);
        let mut lv = Vec::with_capacity(n * self.latent_dim);
        let mut i = 0;
        while i < n {
            let hi = (i + batch).min(n);
            let rows: Vec<usize> = (i..hi).collect();
            let mut chunk = Vec::with_capacity(rows.len() * images.cols());
            for &r in &rows {
                chunk.extend_from_slice(images.row(r));
            }
            let x = Tensor::from_vec(&[rows.len(), images.cols()], chunk);
            let post = self.encode(&x);
            mu.extend_from_slice(post.mu_q.data());
            lv.extend_from_slice(post.log_var_q.data());
            i = hi;
        }
        GaussianPosterior::new(
            Tensor::from_vec(&[n, self.latent_dim], mu),
            Tensor::from_vec(&[n, self.latent_dim], lv),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

/// Per-epoch record. Every field except `seconds` is bit-deterministic given
/// the seed; `seconds` is measured wall-clock and excluded from
/// reproducibility comparisons.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon_bce: f64,
    pub kl: f64,
    pub seconds: f64,
}

impl EpochStats {
    pub fn elbo(&self) -> f64 {
        -(self.recon_bce + self.kl)
    }
}

/// Mean validation recon/kl with a single posterior sample per datum, drawn
/// from `rng` in batch order.
fn validate(model: &VaeModel, val: &Tensor, batch: usize, rng: &mut Rng) -> (f64, f64) {
    let n = val.rows();
    assert!(n > 0, "validate: empty validation set");
    let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
    let mut i = 0;
    while i < n {
        let hi = (i + batch).min(n);
        let rows: Vec<usize> = (i..hi).collect();
        let mut chunk = Vec::with_capacity(rows.len() * val.cols());
        for &r in &rows {
            chunk.extend_from_slice(val.row(r));
        }
        let x = Tensor::from_vec(&[rows.len(), val.cols()], chunk);
        let tape = Tape::new();
        let vars = model.leaves(&tape);
        let xv = tape.leaf(x.clone());
        let (mu, log_var) = model.encode_graph(&vars, xv);
        let eps = tape.leaf(rng.normal_tensor(&[rows.len(), model.latent_dim()]));
        let sigma = (log_var * 0.5).exp();
        let z = mu.add(sigma.mul(eps));
        let logits = model.decoder.forward(&vars.dec, z);
        let recon = logits.bce_logits_row_sum(&x).sum().value().item();
        let kl = binarized_kl_var(mu, log_var, model.effective_prior())
            .sum()
            .value()
            .item();
        recon_sum += recon;
        kl_sum += kl;
        i = hi;
    }
    (recon_sum / n as f64, kl_sum / n as f64)
}

/// Trains in place. Shuffles per epoch, one Adam step per minibatch
/// (trailing partial batch included), validates after each epoch, and invokes
/// `on_epoch` with the freshly validated model. Returns the per-epoch log.
///
/// With `epochs = 0` the model is returned untouched and the log is empty.
pub fn train_with(
    model: &mut VaeModel,
    train_images: &Tensor,
    val_images: &Tensor,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&VaeModel, &EpochStats),
) -> Result<Vec<EpochStats>, ModelError> {
    model.variant.validate()?;
    assert!(cfg.batch_size > 0, "train: batch_size must be positive");
    let n = train_images.rows();
    assert!(n > 0, "train: empty training set");
    let mut rng = Rng::derive(cfg.seed, "train");
    let mut params = model.params();
    let mut adam = AdamState::new(&params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let perm = rng.permutation(n);
        for rows in perm.chunks(cfg.batch_size) {
            let mut chunk = Vec::with_capacity(rows.len() * train_images.cols());
            for &r in rows {
                chunk.extend_from_slice(train_images.row(r));
            }
            let x = Tensor::from_vec(&[rows.len(), train_images.cols()], chunk);
            let tape = Tape::new();
            let vars = model.leaves(&tape);
            let (total, recon, kl) = model.loss_graph(&tape, &vars, &x, step, &mut rng);
            let total_v = total.value().item();
            if !total_v.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    step,
                    recon: recon.value().item(),
                    kl: kl.value().item(),
                });
            }
            tape.backward(total);
            let grads: Vec<Tensor> = vars.flat().iter().map(|v| tape.grad(*v)).collect();
            adam.step(&cfg.adam, &mut params, &grads);
            model.set_params(&params);
            step += 1;
        }
        let mut val_rng = Rng::derive(cfg.seed, &format!("val-epoch-{}", epoch));
        let (recon_bce, kl) = validate(model, val_images, 256, &mut val_rng);
        let stats = EpochStats {
            epoch: epoch + 1,
            recon_bce,
            kl,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(model, &stats);
        log.push(stats);
    }
    Ok(log)
}

/// [`train_with`] without an epoch callback.
pub fn train(
    model: &mut VaeModel,
    train_images: &Tensor,
    val_images: &Tensor,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>, ModelError> {
    train_with(model, train_images, val_images, cfg, |_, _| {})
}

/// Batch-mean evaluation BCE of predicted Bernoulli means against targets,
/// image-sum convention, predictions clamped to [1e-7, 1 - 1e-7].
pub fn eval_bce(pred: &Tensor, target: &Tensor) -> f64 {
    crate::metrics::bce(pred, target).expect("eval_bce: domain error")
}
