//! Pretraining loop: augmented view pairs, the optional MixMask and Un-Mix
//! query branches, the key queue, schedules, checkpoints and metrics.
//!
//! Everything random in a step is drawn from streams keyed by the run seed
//! and the global step, so a step's inputs do not depend on which worker
//! prepares them or on whether the run was resumed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentParams};
use crate::batch::ImageBatch;
use crate::datastore::{self, DatasetSpec, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{self, KnnReport};
use crate::maskgen::{default_grid_for, expand_to_pixels, gen_mask, GridMask, MaskPattern, RatioPolicy};
use crate::mixer::{
    make_pairing, mix_batch, rand_bbox, sample_unmix_lambda, unmix_global_with_lambda, unmix_local_with_box,
    FillMode, Pairing, PairingKind, UnmixMode, UnmixOutput,
};
use crate::nnet::{
    backward_tape, cosine_lr, forward, forward_tape, Activation, ArchConfig, Checkpoint, EncoderParams,
    MomentumPair, Scalar, Sgd,
};
use crate::objective::{
    info_nce_indexed, mixmask_loss_grad, total_loss, unmix_loss_grad, Branches, EmbeddingBatch, EmbeddingRole,
    KeyQueue, LossBreakdown, LossParts, MixMaskTerms,
};
use crate::rng::{self, Domain};

/// Environment variable that forces deterministic mode when set to `1`.
pub const DETERMINISTIC_ENV: &str = "MIXMASK_DETERMINISTIC";

/// Serde through `Display` / `FromStr`, so config values read as plain strings.
mod as_str {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};
    use std::fmt::Display;
    use std::str::FromStr;

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Which permutation MixMask uses while Un-Mix is also active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PermutationPolicy {
    /// Both branches use the reverse permutation.
    Same,
    /// MixMask uses a fresh random permutation per batch.
    Different,
}

impl std::str::FromStr for PermutationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(PermutationPolicy::Same),
            "different" => Ok(PermutationPolicy::Different),
            other => Err(Error::invalid(format!(
                "unknown permutation policy '{other}' (expected same|different)"
            ))),
        }
    }
}

impl std::fmt::Display for PermutationPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PermutationPolicy::Same => "same",
            PermutationPolicy::Different => "different",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
    Constant,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LrSchedule::Cosine),
            "constant" => Ok(LrSchedule::Constant),
            other => Err(Error::invalid(format!("unknown lr schedule '{other}' (expected cosine|constant)"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Constant => "constant",
        })
    }
}

/// Flat key-value run configuration. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    #[serde(with = "as_str")]
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub sgd_momentum: f64,

    pub mixmask_enabled: bool,
    /// Mask grid side; 0 picks a default from the image size.
    pub grid_n: usize,
    #[serde(with = "as_str")]
    pub mask_pattern: MaskPattern,
    #[serde(with = "as_str")]
    pub ratio_policy: RatioPolicy,
    #[serde(with = "as_str")]
    pub fill_mode: FillMode,

    pub tau: f64,
    pub queue_k: usize,
    pub momentum_m: f64,

    pub unmix_enabled: bool,
    pub unmix_global_prob: f64,
    #[serde(with = "as_str")]
    pub permutation_policy: PermutationPolicy,

    pub crop_scale_min: f64,
    pub flip_p: f64,
    pub jitter: f64,

    pub widths: Vec<usize>,
    pub groups: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    #[serde(with = "as_str")]
    pub activation: Activation,

    #[serde(with = "as_str")]
    pub dataset: DatasetSpec,
    /// Labelled set for the closing k-NN evaluation; empty to skip.
    pub eval_set: String,
    pub knn_k: usize,
    pub knn_temperature: f64,

    pub workers: usize,
    pub prefetch: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        Self {
            epochs: 100,
            batch_size: 512,
            seed: 0,
            lr: 0.06,
            lr_schedule: LrSchedule::Cosine,
            weight_decay: 5e-4,
            sgd_momentum: 0.9,
            mixmask_enabled: true,
            grid_n: 0,
            mask_pattern: MaskPattern::Blocked,
            ratio_policy: RatioPolicy::Fixed(0.5),
            fill_mode: FillMode::Image,
            tau: 0.1,
            queue_k: 4096,
            momentum_m: 0.99,
            unmix_enabled: false,
            unmix_global_prob: 0.5,
            permutation_policy: PermutationPolicy::Different,
            crop_scale_min: 0.2,
            flip_p: 0.5,
            jitter: 0.4,
            widths: arch.widths,
            groups: arch.groups,
            hidden_dim: arch.hidden_dim,
            embed_dim: arch.embed_dim,
            activation: arch.activation,
            dataset: DatasetSpec::Synthetic(SyntheticSpec {
                kind: SyntheticKind::Shapes,
                classes: 10,
                per_class: 200,
                image_size: 32,
                seed: 0,
            }),
            eval_set: String::new(),
            knn_k: eval::DEFAULT_K,
            knn_temperature: eval::DEFAULT_TEMPERATURE,
            workers: 1,
            prefetch: 4,
            deterministic: false,
        }
    }
}

fn to_toml_value(raw: &str) -> toml::Value {
    // Bare words such as `blocked` are not TOML; take them as strings.
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl TrainConfig {
    /// Parses a config file body, then applies `key=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            table.insert(k.clone(), to_toml_value(v));
        }
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if (self.mixmask_enabled || self.unmix_enabled) && self.batch_size < 2 {
            return bad(format!("batch_size {} < 2 with a mixing branch enabled", self.batch_size));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.unmix_global_prob) {
            return bad(format!("unmix_global_prob {} outside [0, 1]", self.unmix_global_prob));
        }
        if !(0.0..=1.0).contains(&self.momentum_m) {
            return bad(format!("momentum_m {} outside [0, 1]", self.momentum_m));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.sgd_momentum)) {
            return bad("lr, weight_decay must be >= 0 and sgd_momentum in [0, 1)".into());
        }
        if self.queue_k == 0 || self.queue_k % self.batch_size != 0 {
            return bad(format!(
                "queue_k {} must be a positive multiple of batch_size {}",
                self.queue_k, self.batch_size
            ));
        }
        if self.knn_k == 0 || !(self.knn_temperature > 0.0) {
            return bad("knn_k and knn_temperature must be positive".into());
        }
        self.ratio_policy.validate()?;
        self.augment_params().validate()?;
        if self.workers == 0 || self.prefetch == 0 {
            return bad("workers and prefetch must be positive".into());
        }
        Ok(())
    }

    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams {
            crop_scale: (self.crop_scale_min, 1.0),
            flip_p: self.flip_p,
            brightness: self.jitter,
            contrast: self.jitter,
            ..AugmentParams::default()
        }
    }

    pub fn arch(&self, in_channels: usize, image_size: usize) -> ArchConfig {
        ArchConfig {
            in_channels,
            image_size,
            widths: self.widths.clone(),
            groups: self.groups,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            activation: self.activation,
        }
    }

    pub fn branches(&self) -> Branches {
        Branches {
            mixmask: self.mixmask_enabled,
            unmix: self.unmix_enabled,
        }
    }

    pub fn grid_for(&self, image_size: usize) -> usize {
        if self.grid_n == 0 {
            default_grid_for(image_size)
        } else {
            self.grid_n
        }
    }

    /// Set by the config or by [`DETERMINISTIC_ENV`]; pins the pipeline to
    /// one worker.
    pub fn is_deterministic(&self) -> bool {
        self.deterministic || std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
    }

    pub fn effective_workers(&self) -> usize {
        if self.is_deterministic() {
            1
        } else {
            self.workers
        }
    }

    pub fn eval_spec(&self) -> Result<Option<DatasetSpec>> {
        let s = self.eval_set.trim();
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some)
        }
    }
}

/// The MixMask branch inputs of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct MixInputs {
    pub mixtures: ImageBatch,
    pub mask: GridMask,
    pub pairing: Pairing,
    /// Weight of the own-key term. Equals the mask coefficient when the fill
    /// is another image; erase fills have no partner, so it is 1.
    pub lambda: f64,
}

/// Everything a step consumes apart from the model state.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs {
    pub step: u64,
    pub epoch: u64,
    pub indices: Vec<usize>,
    pub view_q: ImageBatch,
    pub view_k: ImageBatch,
    pub mix: Option<MixInputs>,
    pub unmix: Option<UnmixOutput>,
}

/// Batches per epoch; the incomplete tail batch is dropped.
pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> u64 {
    (dataset_len / batch_size.max(1)) as u64
}

/// Sample indices of `step`, from the epoch's seeded shuffle.
pub fn batch_indices(seed: u64, dataset_len: usize, batch_size: usize, step: u64) -> Vec<usize> {
    let spe = steps_per_epoch(dataset_len, batch_size).max(1);
    let epoch = step / spe;
    let mut order: Vec<usize> = (0..dataset_len).collect();
    order.shuffle(&mut rng::stream(seed, Domain::Shuffle, &[epoch]));
    let start = (step % spe) as usize * batch_size;
    order[start..start + batch_size].to_vec()
}

/// Pairing MixMask uses at `step`.
pub fn mixmask_pairing(cfg: &TrainConfig, step: u64, n: usize) -> Result<Pairing> {
    if cfg.unmix_enabled && cfg.permutation_policy == PermutationPolicy::Different {
        let seed = rng::derive_seed(cfg.seed, &[Domain::Pairing as u64, step]);
        make_pairing(PairingKind::Random { seed }, n)
    } else {
        Ok(Pairing::reverse(n))
    }
}

/// Mask for `step`, with the filled ratio drawn from the ratio policy.
pub fn step_mask(cfg: &TrainConfig, step: u64, grid_n: usize) -> Result<GridMask> {
    let ratio = cfg.ratio_policy.sample(&mut rng::stream(cfg.seed, Domain::Ratio, &[step]));
    let seed = rng::derive_seed(cfg.seed, &[Domain::Mask as u64, step]);
    gen_mask(cfg.mask_pattern, grid_n, ratio, seed)
}

fn step_fill(cfg: &TrainConfig, step: u64) -> FillMode {
    match cfg.fill_mode {
        FillMode::Gaussian { .. } => FillMode::Gaussian {
            seed: rng::derive_seed(cfg.seed, &[Domain::Noise as u64, step]),
        },
        other => other,
    }
}

/// Un-Mix input for `step`: Beta(1, 1) coefficient, then mixup with
/// probability `unmix_global_prob`, otherwise cutmix with the coefficient
/// recomputed from the clipped box.
pub fn step_unmix(cfg: &TrainConfig, step: u64, view_q: &ImageBatch) -> Result<UnmixOutput> {
    let mut r = rng::stream(cfg.seed, Domain::Unmix, &[step]);
    let lam = sample_unmix_lambda(&mut r);
    if r.random::<f64>() < cfg.unmix_global_prob {
        unmix_global_with_lambda(view_q, lam)
    } else {
        let s = view_q.shape();
        let bbox = rand_bbox(s.h, s.w, lam, &mut r);
        unmix_local_with_box(view_q, bbox)
    }
}

/// Builds the inputs of `step` from the dataset. Pure in `(cfg, data, step)`.
pub fn prepare_step(cfg: &TrainConfig, data: &ImageBatch, step: u64) -> Result<StepInputs> {
    let n = cfg.batch_size;
    if data.len() < n {
        return Err(Error::Config(format!("dataset of {} images is smaller than one batch of {n}", data.len())));
    }
    let spe = steps_per_epoch(data.len(), n);
    let indices = batch_indices(cfg.seed, data.len(), n, step);
    let clean = data.select(&indices)?;
    let aug = cfg.augment_params();
    let view_q = augment_batch(&clean, &aug, cfg.seed, step, 0)?;
    let view_k = augment_batch(&clean, &aug, cfg.seed, step, 1)?;
    let s = view_q.shape();
    let mix = if cfg.mixmask_enabled {
        let mask = step_mask(cfg, step, cfg.grid_for(s.h))?;
        let pixels = expand_to_pixels(&mask, s.h, s.w)?;
        let pairing = mixmask_pairing(cfg, step, n)?;
        let fill = step_fill(cfg, step);
        let out = mix_batch(&view_q, &pixels, &pairing, fill)?;
        let lambda = if fill == FillMode::Image { out.lambda } else { 1.0 };
        Some(MixInputs {
            mixtures: out.mixtures,
            mask,
            pairing,
            lambda,
        })
    } else {
        None
    };
    let unmix = if cfg.unmix_enabled {
        Some(step_unmix(cfg, step, &view_q)?)
    } else {
        None
    };
    Ok(StepInputs {
        step,
        epoch: step / spe.max(1),
        indices,
        view_q,
        view_k,
        mix,
        unmix,
    })
}

/// Loss terms of one step and, on request, the online-encoder gradient.
#[derive(Clone, Debug)]
pub struct StepOutcome<T> {
    pub breakdown: LossBreakdown,
    pub grads: Option<EncoderParams<T>>,
    pub keys: EmbeddingBatch<T>,
}

/// The full objective of a step. Keys are target-encoder embeddings of the
/// clean second view; the original, MixMask and Un-Mix queries go through
/// the online encoder as one concatenated batch.
pub fn step_objective<T: Scalar>(
    online: &EncoderParams<T>,
    target: &EncoderParams<T>,
    queue: &KeyQueue<T>,
    inputs: &StepInputs,
    tau: f64,
    with_grad: bool,
) -> Result<StepOutcome<T>> {
    let n = inputs.view_q.len();
    let keys = forward(target, &inputs.view_k)?.with_role(EmbeddingRole::Key);
    let mut parts: Vec<&ImageBatch> = vec![&inputs.view_q];
    if let Some(m) = &inputs.mix {
        parts.push(&m.mixtures);
    }
    if let Some(u) = &inputs.unmix {
        parts.push(&u.mixed);
    }
    let queries = if parts.len() == 1 {
        inputs.view_q.clone()
    } else {
        ImageBatch::concat(&parts)?
    };
    let (emb, tape) = if with_grad {
        let (e, t) = forward_tape(online, &queries)?;
        (e, Some(t))
    } else {
        (forward(online, &queries)?, None)
    };

    let identity: Vec<usize> = (0..n).collect();
    let mut offset = 0;
    let mut next_rows = || {
        let rows = emb.slice_rows(offset, offset + n);
        offset += n;
        rows
    };
    let q = next_rows();
    let (l_orig, g_orig) = info_nce_indexed(&q, &keys, &identity, queue, tau, with_grad)?;
    let mut d_embed: Vec<T> = g_orig.unwrap_or_default();
    let mut loss_parts = LossParts {
        l_orig,
        ..Default::default()
    };
    if let Some(m) = &inputs.mix {
        let z = next_rows();
        let (terms, g): (MixMaskTerms, _) = mixmask_loss_grad(&z, &keys, &m.pairing, queue, tau, m.lambda, with_grad)?;
        loss_parts.mixmask = Some(terms);
        d_embed.extend(g.unwrap_or_default());
    }
    if let Some(u) = &inputs.unmix {
        let z = next_rows();
        let (terms, g) = unmix_loss_grad(&z, &keys, queue, tau, u.lambda_unmix, with_grad)?;
        loss_parts.unmix = Some(terms);
        d_embed.extend(g.unwrap_or_default());
    }
    let branches = Branches {
        mixmask: inputs.mix.is_some(),
        unmix: inputs.unmix.is_some(),
    };
    let breakdown = total_loss(&loss_parts, branches)?;
    let grads = match tape {
        Some(t) => Some(backward_tape(online, &t, &d_embed)?),
        None => None,
    };
    Ok(StepOutcome { breakdown, grads, keys })
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub ms_per_batch: f64,
    pub pairing: PairingKind,
    pub pairing_digest: u64,
    pub unmix_mode: Option<UnmixMode>,
    pub queue_occupancy: usize,
}

pub const METRICS_HEADER: &str = "step,epoch,l_orig,l_up,l_down,l_um,l_um_flip,lambda_mask,lambda_unmix,total,lr,ms_per_batch,pairing,pairing_digest,unmix_mode,queue_occupancy";

pub fn pairing_kind_name(kind: PairingKind) -> &'static str {
    match kind {
        PairingKind::Reverse => "reverse",
        PairingKind::Random { .. } => "random",
        PairingKind::Identity => "identity",
    }
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let l = &self.loss;
        let unmix = match self.unmix_mode {
            None => "none",
            Some(UnmixMode::Global) => "global",
            Some(UnmixMode::Local) => "local",
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.3},{},{:016x},{},{}",
            self.step,
            self.epoch,
            l.l_orig,
            l.l_up,
            l.l_down,
            l.l_um,
            l.l_um_flip,
            l.lambda_mask,
            l.lambda_unmix,
            l.total,
            self.lr,
            self.ms_per_batch,
            pairing_kind_name(self.pairing),
            self.pairing_digest,
            unmix,
            self.queue_occupancy
        )
    }
}

/// Mutable training state; the trainer is its only writer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub pair: MomentumPair<f32>,
    pub sgd: Sgd<f32>,
    pub queue: KeyQueue<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, arch: &ArchConfig) -> Result<Self> {
        let online = EncoderParams::init(arch, rng::derive_seed(cfg.seed, &[Domain::Init as u64]))?;
        let sgd = Sgd::new(&online, cfg.sgd_momentum, cfg.weight_decay);
        let queue = KeyQueue::random(
            cfg.queue_k,
            arch.embed_dim,
            rng::derive_seed(cfg.seed, &[Domain::Queue as u64]),
        )?;
        Ok(Self {
            pair: MomentumPair::new(online, cfg.momentum_m)?,
            sgd,
            queue,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, seed: u64, epoch: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(self.pair.online.arch().clone(), seed, self.step);
        ck.add_encoder("online", &self.pair.online);
        ck.add_encoder("target", &self.pair.target);
        ck.add_encoder("velocity", self.sgd.velocity());
        ck.add_tensor(
            "queue",
            vec![self.queue.capacity(), self.queue.dim()],
            self.queue.entries().to_vec(),
        );
        ck.meta.insert("epoch".into(), epoch.to_string());
        ck.meta.insert("queue_cursor".into(), self.queue.cursor().to_string());
        ck.meta.insert("queue_pushed".into(), self.queue.pushed().to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig, arch: &ArchConfig) -> Result<Self> {
        let online = ck.encoder("online", arch)?;
        let target = ck.encoder("target", arch)?;
        let velocity = ck.encoder("velocity", arch)?;
        let q = ck
            .tensor("queue")
            .ok_or_else(|| Error::Config("checkpoint has no queue tensor".into()))?;
        if q.shape != [cfg.queue_k, arch.embed_dim] {
            return Err(Error::Config(format!(
                "checkpoint queue shape {:?} does not match queue_k {} x {}",
                q.shape, cfg.queue_k, arch.embed_dim
            )));
        }
        let queue = KeyQueue::from_parts(
            cfg.queue_k,
            arch.embed_dim,
            q.data.clone(),
            ck.meta_u64("queue_cursor")? as usize,
            ck.meta_u64("queue_pushed")?,
        )?;
        Ok(Self {
            pair: MomentumPair {
                online,
                target,
                m: cfg.momentum_m,
            },
            sgd: Sgd::with_velocity(velocity, cfg.sgd_momentum, cfg.weight_decay),
            queue,
            step: ck.step,
        })
    }
}

pub fn learning_rate(cfg: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Cosine => cosine_lr(cfg.lr, step, total_steps),
        LrSchedule::Constant => cfg.lr,
    }
}

/// Loss, backward pass, SGD step, momentum update and queue push.
/// `ms_per_batch` in the returned row is left at 0 for the caller to fill.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, inputs: &StepInputs, total_steps: u64) -> Result<MetricsRow> {
    if inputs.step != state.step {
        return Err(Error::invalid(format!(
            "inputs are for step {} but the state is at step {}",
            inputs.step, state.step
        )));
    }
    let lr = learning_rate(cfg, state.step, total_steps);
    let out = step_objective(&state.pair.online, &state.pair.target, &state.queue, inputs, cfg.tau, true)?;
    let grads = out.grads.expect("gradients requested");
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!("gradient at step {}", state.step)));
    }
    state.sgd.step(&mut state.pair.online, &grads, lr);
    if !state.pair.online.is_finite() {
        return Err(Error::NonFinite(format!("parameters after step {}", state.step)));
    }
    state.pair.update();
    state.queue.push(&out.keys)?;
    let (pairing, pairing_digest) = match &inputs.mix {
        Some(m) => (m.pairing.kind(), m.pairing.digest()),
        None => (PairingKind::Identity, 0),
    };
    let row = MetricsRow {
        step: state.step,
        epoch: inputs.epoch,
        loss: out.breakdown,
        lr,
        ms_per_batch: 0.0,
        pairing,
        pairing_digest,
        unmix_mode: inputs.unmix.as_ref().map(|u| u.mode),
        queue_occupancy: state.queue.occupancy(),
    };
    state.step += 1;
    Ok(row)
}

/// Prepares steps `start..end` on `workers` threads through a channel of
/// `prefetch` slots and hands them to `consume` in step order.
pub fn pipeline<F, C>(start: u64, end: u64, workers: usize, prefetch: usize, prepare: F, mut consume: C) -> Result<()>
where
    F: Fn(u64) -> Result<StepInputs> + Sync,
    C: FnMut(StepInputs) -> Result<()>,
{
    if start >= end {
        return Ok(());
    }
    let next = AtomicU64::new(start);
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<(u64, Result<StepInputs>)>(prefetch.max(1));
        for _ in 0..workers.max(1) {
            let tx = tx.clone();
            let (next, stop, prepare) = (&next, &stop, &prepare);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let step = next.fetch_add(1, Ordering::Relaxed);
                if step >= end {
                    break;
                }
                if tx.send((step, prepare(step))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<u64, Result<StepInputs>> = BTreeMap::new();
        let mut want = start;
        let result = (|| {
            while want < end {
                while let Some(ready) = pending.remove(&want) {
                    consume(ready?)?;
                    want += 1;
                }
                if want >= end {
                    break;
                }
                let (step, item) = rx
                    .recv()
                    .map_err(|_| Error::invalid("data pipeline workers exited early"))?;
                pending.insert(step, item);
            }
            Ok(())
        })();
        stop.store(true, Ordering::Relaxed);
        drop(rx);
        result
    })
}

/// Files of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn previews(&self) -> PathBuf {
        self.root.join("previews")
    }

    pub fn checkpoint(&self, epoch: u64) -> PathBuf {
        self.checkpoints().join(format!("epoch-{epoch:04}.ckpt"))
    }

    pub fn final_params(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }

    pub fn knn(&self) -> PathBuf {
        self.root.join("knn.csv")
    }

    pub fn diagnostic(&self) -> PathBuf {
        self.root.join("diagnostic.txt")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.previews()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    /// Highest-numbered epoch checkpoint, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<(u64, PathBuf)>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(None);
        }
        let mut best = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let epoch = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("epoch-"))
                .and_then(|n| n.strip_suffix(".ckpt"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(e) = epoch {
                if best.as_ref().is_none_or(|(b, _)| e > *b) {
                    best = Some((e, path));
                }
            }
        }
        Ok(best)
    }
}

/// Knobs that shape a run without changing its results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Return after this many epochs in total, as if interrupted.
    pub stop_after_epochs: Option<u64>,
    /// Print one progress line per epoch to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub epochs_completed: u64,
    pub resumed_from: Option<u64>,
    /// Mean total loss of each epoch run by this invocation.
    pub epoch_losses: Vec<(u64, f64)>,
    pub knn: Option<KnnReport>,
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Keeps the header and the rows for steps below `step`.
fn truncate_csv(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_previews(dir: &RunDir, inputs: &StepInputs) -> Result<()> {
    let p = dir.previews();
    let count = inputs.view_q.len().min(4);
    for i in 0..count {
        datastore::write_image_png(&inputs.view_q, i, p.join(format!("view_q_{i}.png")))?;
        datastore::write_image_png(&inputs.view_k, i, p.join(format!("view_k_{i}.png")))?;
    }
    if let Some(m) = &inputs.mix {
        let s = m.mixtures.shape();
        datastore::write_mask_png(&expand_to_pixels(&m.mask, s.h, s.w)?, p.join("mask.png"))?;
        for i in 0..count {
            datastore::write_image_png(&m.mixtures, i, p.join(format!("mix_{i}.png")))?;
        }
    }
    if let Some(u) = &inputs.unmix {
        for i in 0..count {
            datastore::write_image_png(&u.mixed, i, p.join(format!("unmix_{i}.png")))?;
        }
    }
    Ok(())
}

fn write_diagnostic(dir: &RunDir, inputs: &StepInputs, state: &TrainState, err: &Error) {
    let mut s = String::new();
    let _ = writeln!(s, "error: {err}");
    let _ = writeln!(s, "step: {} epoch: {}", inputs.step, inputs.epoch);
    let _ = writeln!(s, "online finite: {}", state.pair.online.is_finite());
    let _ = writeln!(s, "target finite: {}", state.pair.target.is_finite());
    if let Some(m) = &inputs.mix {
        let _ = writeln!(s, "mask lambda: {} pairing: {:016x}", m.lambda, m.pairing.digest());
    }
    if let Some(u) = &inputs.unmix {
        let _ = writeln!(s, "unmix lambda: {} mode: {:?}", u.lambda_unmix, u.mode);
    }
    let _ = writeln!(s, "batch indices: {:?}", inputs.indices);
    let _ = fs::write(dir.diagnostic(), s);
}

/// Runs or resumes training into `out`; see [`run_with`].
pub fn run(cfg: &TrainConfig, out: impl AsRef<Path>) -> Result<RunSummary> {
    run_with(cfg, out, &RunOptions::default())
}

/// Trains for `cfg.epochs` epochs, writing `config.toml`, `metrics.csv`,
/// `timing.csv`, one checkpoint per epoch, previews of the first step and,
/// when `eval_set` is given, `knn.csv`. A directory holding checkpoints of
/// the same config resumes from the latest one.
pub fn run_with(cfg: &TrainConfig, out: impl AsRef<Path>, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = RunDir::new(out.as_ref());
    let data = datastore::load_dataset(&cfg.dataset)?;
    let shape = data.shape();
    if shape.h != shape.w {
        return Err(Error::Config(format!("images must be square, got {}x{}", shape.h, shape.w)));
    }
    let arch = cfg.arch(shape.c, shape.h);
    arch.validate()?;
    let spe = steps_per_epoch(data.len(), cfg.batch_size);
    if spe == 0 {
        return Err(Error::Config(format!(
            "dataset of {} images is smaller than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let total_steps = cfg.epochs * spe;

    dir.create()?;
    let config_text = cfg.to_toml();
    let latest = dir.latest_checkpoint()?;
    if latest.is_some() {
        let existing = fs::read_to_string(dir.config()).map_err(|e| Error::io(dir.config(), e))?;
        if existing != config_text {
            return Err(Error::Config(format!(
                "{} holds a run with a different config",
                dir.root.display()
            )));
        }
    }
    fs::write(dir.config(), &config_text).map_err(|e| Error::io(dir.config(), e))?;

    let (mut state, start_epoch, resumed_from) = match latest {
        Some((epoch, path)) => {
            let ck = Checkpoint::load(&path)?;
            let state = TrainState::from_checkpoint(&ck, cfg, &arch)?;
            if state.step != epoch * spe {
                return Err(Error::Corrupt {
                    path,
                    reason: format!("step {} does not match epoch {epoch}", state.step),
                });
            }
            truncate_csv(&dir.metrics(), state.step)?;
            truncate_csv(&dir.timing(), state.step)?;
            (state, epoch, Some(epoch))
        }
        None => {
            let state = TrainState::init(cfg, &arch)?;
            state.to_checkpoint(cfg.seed, 0).save(dir.checkpoint(0))?;
            fs::write(dir.metrics(), format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(dir.metrics(), e))?;
            fs::write(dir.timing(), "step,ms_per_batch\n").map_err(|e| Error::io(dir.timing(), e))?;
            (state, 0, None)
        }
    };

    let deterministic = cfg.is_deterministic();
    let workers = cfg.effective_workers();
    let last_epoch = opts.stop_after_epochs.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut epoch_losses = Vec::new();
    for epoch in start_epoch..last_epoch {
        let mut loss_sum = 0.0;
        let mut rows = String::new();
        let mut timings = String::new();
        let mut tick = Instant::now();
        pipeline(
            epoch * spe,
            (epoch + 1) * spe,
            workers,
            cfg.prefetch,
            |step| prepare_step(cfg, &data, step),
            |inputs| {
                if inputs.step == 0 {
                    write_previews(&dir, &inputs)?;
                }
                let mut row = match train_step(&mut state, cfg, &inputs, total_steps) {
                    Ok(r) => r,
                    Err(e) => {
                        write_diagnostic(&dir, &inputs, &state, &e);
                        return Err(e);
                    }
                };
                let ms = tick.elapsed().as_secs_f64() * 1e3;
                tick = Instant::now();
                row.ms_per_batch = if deterministic { 0.0 } else { ms };
                loss_sum += row.loss.total;
                rows.push_str(&row.to_csv_line());
                rows.push('\n');
                let _ = writeln!(timings, "{},{ms:.3}", row.step);
                Ok(())
            },
        )?;
        append(&dir.metrics(), &rows)?;
        append(&dir.timing(), &timings)?;
        state.to_checkpoint(cfg.seed, epoch + 1).save(dir.checkpoint(epoch + 1))?;
        let mean = loss_sum / spe as f64;
        epoch_losses.push((epoch, mean));
        if opts.progress {
            eprintln!("epoch {}/{} mean loss {mean:.4}", epoch + 1, cfg.epochs);
        }
    }

    let finished = last_epoch == cfg.epochs;
    let mut knn = None;
    if finished {
        crate::nnet::save_params(&state.pair.online, dir.final_params(), cfg.seed, state.step)?;
        if let Some(spec) = cfg.eval_spec()? {
            let test = datastore::load_dataset(&spec)?;
            let report = eval::knn_accuracy(&state.pair.online, &data, &test, cfg.knn_k.min(data.len()), cfg.knn_temperature)?;
            fs::write(dir.knn(), report.per_class_csv()).map_err(|e| Error::io(dir.knn(), e))?;
            knn = Some(report);
        }
    }
    Ok(RunSummary {
        steps: state.step,
        epochs_completed: last_epoch.max(start_epoch),
        resumed_from,
        epoch_losses,
        knn,
    })
}
