//! Conditional VAE over trajectories with a categorical latent.
//!
//! The condition `m` comes from two conv stacks (global plan, local scene).
//! A prior head scores the `|Z|` modes from `m`; a BiLSTM recognition head
//! scores them from `m` and the target; a GRU decodes one Gaussian sequence
//! per mode. The loss enumerates all modes exactly, no sampling.

mod checkpoint;
mod train;

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, BiLstm, Conv2d, Dense, Graph, GruCell, ParamGrads, ParamStore, Tensor, Var};
use crate::dataset::{SampleRecord, Trajectory};
use crate::raster::{PlanRaster, SceneRaster, PLAN_SIZE, SCENE_SIZE};
use crate::rng::XorShift64;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, EpochLog, LrSchedule, StepControl, StepLog, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum CvaeError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("mode {z} out of range for {modes} modes")]
    BadMode { z: usize, modes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint does not match its config: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, CvaeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub horizon: usize,
    pub num_modes: usize,
    pub plan_channels: usize,
    pub scene_channels: usize,
    pub plan_size: usize,
    pub scene_size: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    pub encoder_dim: usize,
    pub embed_dim: usize,
    pub recog_hidden: usize,
    pub decoder_hidden: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Meters per unit of decoder output; increments and GRU inputs are
    /// expressed in this unit.
    pub pos_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size configuration for the standard raster sizes.
    pub fn standard(horizon: usize, scene_channels: usize, num_modes: usize, seed: u64) -> Self {
        Self {
            horizon,
            num_modes,
            plan_channels: 2,
            scene_channels,
            plan_size: PLAN_SIZE,
            scene_size: SCENE_SIZE,
            conv_channels: vec![8, 16, 32, 32],
            conv_kernel: 3,
            conv_stride: 2,
            conv_padding: 0,
            encoder_dim: 64,
            embed_dim: 128,
            recog_hidden: 32,
            decoder_hidden: 64,
            sigma_min: 1e-3,
            sigma_max: 10.0,
            pos_scale: 10.0,
            seed,
        }
    }

    /// Hidden sizes of 4, 8x8 rasters; small enough for finite differences
    /// over every parameter.
    pub fn tiny(horizon: usize, scene_channels: usize, num_modes: usize, seed: u64) -> Self {
        Self {
            plan_size: 8,
            scene_size: 8,
            conv_channels: vec![4, 4, 4],
            conv_padding: 1,
            encoder_dim: 4,
            embed_dim: 4,
            recog_hidden: 4,
            decoder_hidden: 4,
            ..Self::standard(horizon, scene_channels, num_modes, seed)
        }
    }

    fn conv_out(&self, mut size: usize) -> Option<usize> {
        for _ in &self.conv_channels {
            let padded = size + 2 * self.conv_padding;
            if padded < self.conv_kernel {
                return None;
            }
            size = (padded - self.conv_kernel) / self.conv_stride + 1;
        }
        Some(size)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.horizon,
            self.num_modes,
            self.plan_channels,
            self.scene_channels,
            self.conv_kernel,
            self.conv_stride,
            self.encoder_dim,
            self.embed_dim,
            self.recog_hidden,
            self.decoder_hidden,
        ];
        if positive.contains(&0) || self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(CvaeError::InvalidConfig("sizes must be positive".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.pos_scale > 0.0) {
            return Err(CvaeError::InvalidConfig("need 0 < sigma_min < sigma_max and pos_scale > 0".into()));
        }
        if self.conv_out(self.plan_size).is_none_or(|s| s == 0) || self.conv_out(self.scene_size).is_none_or(|s| s == 0) {
            return Err(CvaeError::InvalidConfig("rasters too small for the conv stack".into()));
        }
        Ok(())
    }
}

/// Categorical distribution over modes, as log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    pub log_probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    /// Most probable mode; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.log_probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-step diagonal Gaussians over ego-frame positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSeq {
    pub mu: Vec<[f64; 2]>,
    pub sigma: Vec<[f64; 2]>,
}

/// Scene encoder input: class labels (one-hot implied) or a dense tensor.
#[derive(Debug, Clone)]
pub enum SceneInput {
    Labels(Arc<[u8]>),
    Dense(Tensor),
}

/// Model-ready condition `m = (G, L)`.
#[derive(Debug, Clone)]
pub struct Condition {
    /// `[plan_channels, size, size]`
    pub plan: Tensor,
    pub scene: SceneInput,
}

impl Condition {
    pub fn from_rasters(plan: &PlanRaster, scene: &SceneRaster) -> Self {
        let data: Vec<f64> = plan.roads.data.iter().chain(&plan.route.data).map(|&v| v as f64).collect();
        Self {
            plan: Tensor::new(vec![2, plan.roads.height, plan.roads.width], data).expect("plan raster shape"),
            scene: SceneInput::Labels(scene.labels.clone().into()),
        }
    }

    pub fn from_record(rec: &SampleRecord) -> Self {
        Self::from_rasters(&rec.plan, &rec.scene)
    }
}

/// Scalar loss components of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub mse: f64,
}

/// Graph nodes of the loss and its terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub nll: Var,
    pub kl: Var,
    pub mse: Var,
}

#[derive(Debug, Clone)]
struct ConvEncoder {
    convs: Vec<Conv2d>,
    fc: Dense,
    size: usize,
}

impl ConvEncoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, in_ch: usize, size: usize, rng: &mut XorShift64) -> Result<Self> {
        let mut convs = Vec::new();
        let mut ch = in_ch;
        for (i, &out) in cfg.conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(
                store,
                &format!("{name}.conv{i}"),
                ch,
                out,
                cfg.conv_kernel,
                cfg.conv_stride,
                cfg.conv_padding,
                rng,
            )?);
            ch = out;
        }
        let side = cfg.conv_out(size).expect("validated");
        let fc = Dense::new(store, &format!("{name}.fc"), ch * side * side, cfg.encoder_dim, rng)?;
        Ok(Self { convs, fc, size })
    }

    fn check(&self, shape: &[usize], channels: usize, what: &str) -> Result<()> {
        if shape != [channels, self.size, self.size] {
            return Err(CvaeError::ShapeMismatch(format!(
                "{what} raster {shape:?}, expected {:?}",
                [channels, self.size, self.size]
            )));
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.check(g.shape(x), self.convs[0].in_channels, "dense")?;
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, store, h)?;
            h = g.relu(y);
        }
        self.head(g, store, h)
    }

    fn forward_labels(&self, g: &mut Graph, store: &ParamStore, labels: &Arc<[u8]>) -> Result<Var> {
        if labels.len() != self.size * self.size {
            return Err(CvaeError::ShapeMismatch(format!(
                "{} scene labels, expected {}x{}",
                labels.len(),
                self.size,
                self.size
            )));
        }
        let y = self.convs[0].forward_onehot(g, store, labels.clone(), self.size, self.size)?;
        let mut h = g.relu(y);
        for conv in &self.convs[1..] {
            let y = conv.forward(g, store, h)?;
            h = g.relu(y);
        }
        self.head(g, store, h)
    }

    fn head(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let n = g.value(h).len();
        let flat = g.reshape(h, &[1, n])?;
        let y = self.fc.forward(g, store, flat)?;
        Ok(g.relu(y))
    }
}

/// All learnable parameters plus the architecture.
#[derive(Debug, Clone)]
pub struct CvaeModel {
    cfg: ModelConfig,
    store: ParamStore,
    plan_enc: ConvEncoder,
    scene_enc: ConvEncoder,
    fuse: Dense,
    prior_head: Dense,
    recog_rnn: BiLstm,
    recog_head: Dense,
    dec_init: Dense,
    dec_gru: GruCell,
    dec_head: Dense,
}

impl CvaeModel {
    /// Fresh model, Xavier-initialized from `cfg.seed` in construction order.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = XorShift64::new(cfg.seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let plan_enc = ConvEncoder::new(s, "plan", &cfg, cfg.plan_channels, cfg.plan_size, &mut rng)?;
        let scene_enc = ConvEncoder::new(s, "scene", &cfg, cfg.scene_channels, cfg.scene_size, &mut rng)?;
        let fuse = Dense::new(s, "fuse", 2 * cfg.encoder_dim, cfg.embed_dim, &mut rng)?;
        let prior_head = Dense::new(s, "prior", cfg.embed_dim, cfg.num_modes, &mut rng)?;
        let recog_rnn = BiLstm::new(s, "recog.rnn", 2, cfg.recog_hidden, &mut rng)?;
        let recog_head = Dense::new(s, "recog.head", 2 * cfg.recog_hidden + cfg.embed_dim, cfg.num_modes, &mut rng)?;
        let dec_init = Dense::new(s, "dec.init", cfg.embed_dim + cfg.num_modes, cfg.decoder_hidden, &mut rng)?;
        let dec_gru = GruCell::new(s, "dec.gru", 2, cfg.decoder_hidden, &mut rng)?;
        let dec_head = Dense::new(s, "dec.head", cfg.decoder_hidden, 4, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            plan_enc,
            scene_enc,
            fuse,
            prior_head,
            recog_rnn,
            recog_head,
            dec_init,
            dec_gru,
            dec_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_target(&self, y: &[[f64; 2]]) -> Result<()> {
        if y.len() != self.cfg.horizon {
            return Err(CvaeError::ShapeMismatch(format!(
                "target has {} waypoints, model horizon is {}",
                y.len(),
                self.cfg.horizon
            )));
        }
        Ok(())
    }

    /// Condition embedding `m`, shape `[1, embed_dim]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, cond: &Condition) -> Result<Var> {
        self.plan_enc.check(cond.plan.shape(), self.cfg.plan_channels, "plan")?;
        let plan = g.constant(cond.plan.clone());
        let ep = self.plan_enc.forward(g, store, plan)?;
        let es = match &cond.scene {
            SceneInput::Labels(l) => self.scene_enc.forward_labels(g, store, l)?,
            SceneInput::Dense(t) => {
                self.scene_enc.check(t.shape(), self.cfg.scene_channels, "scene")?;
                let x = g.constant(t.clone());
                self.scene_enc.forward(g, store, x)?
            }
        };
        let both = g.concat(&[ep, es], 1)?;
        let m = self.fuse.forward(g, store, both)?;
        Ok(g.relu(m))
    }

    /// Log prior `log p(z|m)`, shape `[1, Z]`.
    pub fn prior_graph(&self, g: &mut Graph, store: &ParamStore, m: Var) -> Result<Var> {
        let logits = self.prior_head.forward(g, store, m)?;
        Ok(g.log_softmax(logits, 1)?)
    }

    /// Log posterior `log q(z|m, y)`, shape `[1, Z]`.
    pub fn recognition_graph(&self, g: &mut Graph, store: &ParamStore, m: Var, y: &[[f64; 2]]) -> Result<Var> {
        self.check_target(y)?;
        let seq: Vec<f64> = y.iter().flat_map(|p| [p[0] / self.cfg.pos_scale, p[1] / self.cfg.pos_scale]).collect();
        let seq = g.constant(Tensor::new(vec![y.len(), 2], seq)?);
        let enc = self.recog_rnn.encode(g, store, seq)?;
        let both = g.concat(&[enc, m], 1)?;
        let logits = self.recog_head.forward(g, store, both)?;
        Ok(g.log_softmax(logits, 1)?)
    }

    /// Decode every row of `onehot: [R, Z]` against `m`. Returns per-step
    /// `(mu [R, 2], log_sigma [R, 2])` in meters.
    pub fn decode_graph(&self, g: &mut Graph, store: &ParamStore, m: Var, onehot: Var) -> Result<Vec<(Var, Var)>> {
        let rows = g.shape(onehot)[0];
        let mb = g.gather_rows(m, &vec![0; rows])?;
        let init_in = g.concat(&[mb, onehot], 1)?;
        let h0 = self.dec_init.forward(g, store, init_in)?;
        let mut h = g.tanh(h0);
        let mut mu = g.constant(Tensor::zeros(&[rows, 2]));
        let (lo, hi) = (self.cfg.sigma_min.ln(), self.cfg.sigma_max.ln());
        let mut out = Vec::with_capacity(self.cfg.horizon);
        for _ in 0..self.cfg.horizon {
            let x = g.scale(mu, 1.0 / self.cfg.pos_scale);
            h = self.dec_gru.forward(g, store, x, h)?;
            let head = self.dec_head.forward(g, store, h)?;
            let inc = g.slice(head, 1, 0, 2)?;
            let inc = g.scale(inc, self.cfg.pos_scale);
            mu = g.add(mu, inc)?;
            let raw = g.slice(head, 1, 2, 2)?;
            out.push((mu, g.clamp(raw, lo, hi)));
        }
        Ok(out)
    }

    fn onehot_all(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::eye(self.cfg.num_modes))
    }

    /// Loss nodes for one sample on `g`.
    pub fn loss_graph(&self, g: &mut Graph, store: &ParamStore, cond: &Condition, y: &[[f64; 2]]) -> Result<LossVars> {
        self.check_target(y)?;
        let m = self.encode(g, store, cond)?;
        let log_p = self.prior_graph(g, store, m)?;
        let log_q = self.recognition_graph(g, store, m, y)?;
        let onehot = self.onehot_all(g);
        let steps = self.decode_graph(g, store, m, onehot)?;
        assemble_loss(g, log_q, log_p, &steps, y)
    }

    pub fn loss(&self, cond: &Condition, y: &[[f64; 2]]) -> Result<LossParts> {
        let mut g = Graph::new();
        let v = self.loss_graph(&mut g, &self.store, cond, y)?;
        Ok(parts(&g, &v))
    }

    /// Loss and its gradient for every parameter.
    pub fn loss_and_grads(&self, cond: &Condition, y: &[[f64; 2]]) -> Result<(LossParts, ParamGrads)> {
        let mut g = Graph::new();
        let v = self.loss_graph(&mut g, &self.store, cond, y)?;
        let grads = g.backward(v.total)?.param_grads(&self.store);
        Ok((parts(&g, &v), grads))
    }

    pub fn encode_condition(&self, cond: &Condition) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let m = self.encode(&mut g, &self.store, cond)?;
        Ok(g.value(m).data().to_vec())
    }

    pub fn prior(&self, cond: &Condition) -> Result<CategoricalDist> {
        let mut g = Graph::new();
        let m = self.encode(&mut g, &self.store, cond)?;
        let lp = self.prior_graph(&mut g, &self.store, m)?;
        Ok(CategoricalDist {
            log_probs: g.value(lp).data().to_vec(),
        })
    }

    pub fn recognition(&self, cond: &Condition, y: &[[f64; 2]]) -> Result<CategoricalDist> {
        let mut g = Graph::new();
        let m = self.encode(&mut g, &self.store, cond)?;
        let lq = self.recognition_graph(&mut g, &self.store, m, y)?;
        Ok(CategoricalDist {
            log_probs: g.value(lq).data().to_vec(),
        })
    }

    fn read_seqs(&self, g: &Graph, steps: &[(Var, Var)]) -> Vec<GaussianSeq> {
        let rows = g.shape(steps[0].0)[0];
        (0..rows)
            .map(|r| {
                let pick = |v: Var| {
                    let d = g.value(v).data();
                    [d[2 * r], d[2 * r + 1]]
                };
                GaussianSeq {
                    mu: steps.iter().map(|&(mu, _)| pick(mu)).collect(),
                    sigma: steps
                        .iter()
                        .map(|&(_, ls)| pick(ls).map(|l| l.exp().clamp(self.cfg.sigma_min, self.cfg.sigma_max)))
                        .collect(),
                }
            })
            .collect()
    }

    /// Gaussian sequence for mode `z`.
    pub fn decode(&self, cond: &Condition, z: usize) -> Result<GaussianSeq> {
        let modes = self.cfg.num_modes;
        if z >= modes {
            return Err(CvaeError::BadMode { z, modes });
        }
        let mut g = Graph::new();
        let m = self.encode(&mut g, &self.store, cond)?;
        let mut row = vec![0.0; modes];
        row[z] = 1.0;
        let onehot = g.constant(Tensor::new(vec![1, modes], row)?);
        let steps = self.decode_graph(&mut g, &self.store, m, onehot)?;
        Ok(self.read_seqs(&g, &steps).remove(0))
    }

    /// `log p(y|m) = logsumexp_z [log p(y|m,z) + log p(z|m)]`.
    pub fn log_marginal(&self, cond: &Condition, y: &[[f64; 2]]) -> Result<f64> {
        self.check_target(y)?;
        let mut g = Graph::new();
        let m = self.encode(&mut g, &self.store, cond)?;
        let lp = self.prior_graph(&mut g, &self.store, m)?;
        let onehot = self.onehot_all(&mut g);
        let steps = self.decode_graph(&mut g, &self.store, m, onehot)?;
        let ll = log_likelihood(&mut g, &steps, y)?;
        let lp = g.reshape(lp, &[self.cfg.num_modes])?;
        let joint = g.add(ll, lp)?;
        let lm = g.logsumexp(joint, 0)?;
        Ok(g.value(lm).item())
    }

    /// Decoded mean of the most probable prior mode.
    pub fn infer_map(&self, cond: &Condition) -> Result<Trajectory> {
        let z = self.prior(cond)?.argmax();
        Ok(self.decode(cond, z)?.mu)
    }

    /// Every mode with its prior weight.
    pub fn infer_full(&self, cond: &Condition) -> Result<Vec<(f64, GaussianSeq)>> {
        let mut g = Graph::new();
        let m = self.encode(&mut g, &self.store, cond)?;
        let lp = self.prior_graph(&mut g, &self.store, m)?;
        let onehot = self.onehot_all(&mut g);
        let steps = self.decode_graph(&mut g, &self.store, m, onehot)?;
        let weights: Vec<f64> = g.value(lp).data().iter().map(|l| l.exp()).collect();
        Ok(weights.into_iter().zip(self.read_seqs(&g, &steps)).collect())
    }
}

fn parts(g: &Graph, v: &LossVars) -> LossParts {
    LossParts {
        total: g.value(v.total).item(),
        nll: g.value(v.nll).item(),
        kl: g.value(v.kl).item(),
        mse: g.value(v.mse).item(),
    }
}

fn target_rows(y: [f64; 2], rows: usize) -> Tensor {
    Tensor::new(vec![rows, 2], (0..rows).flat_map(|_| y).collect()).expect("shape")
}

/// `log p(y|m,z)` for every decoded row, shape `[R]`.
pub fn log_likelihood(g: &mut Graph, steps: &[(Var, Var)], y: &[[f64; 2]]) -> Result<Var> {
    if steps.len() != y.len() || steps.is_empty() {
        return Err(CvaeError::ShapeMismatch(format!("{} decoded steps, {} targets", steps.len(), y.len())));
    }
    let rows = g.shape(steps[0].0)[0];
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let mut acc: Option<Var> = None;
    for (&(mu, log_sigma), &yh) in steps.iter().zip(y) {
        let t = g.constant(target_rows(yh, rows));
        let diff = g.sub(t, mu)?;
        let neg = g.scale(log_sigma, -1.0);
        let inv = g.exp(neg);
        let z = g.mul(diff, inv)?;
        let z2 = g.square(z);
        let half = g.scale(z2, -0.5);
        let terms = g.sub(half, log_sigma)?;
        let terms = g.add_scalar(terms, -half_log_2pi);
        let step = g.reduce_sum(terms, Some(1))?;
        acc = Some(match acc {
            Some(a) => g.add(a, step)?,
            None => step,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Mean squared waypoint error per row, shape `[R]`.
fn mean_sq_error(g: &mut Graph, steps: &[(Var, Var)], y: &[[f64; 2]]) -> Result<Var> {
    let rows = g.shape(steps[0].0)[0];
    let mut acc: Option<Var> = None;
    for (&(mu, _), &yh) in steps.iter().zip(y) {
        let t = g.constant(target_rows(yh, rows));
        let diff = g.sub(t, mu)?;
        let sq = g.square(diff);
        let step = g.reduce_sum(sq, Some(1))?;
        acc = Some(match acc {
            Some(a) => g.add(a, step)?,
            None => step,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / y.len() as f64))
}

/// `NLL + KL + MSE` with every mode enumerated and weighted by `q`.
///
/// `log_q` and `log_p` are `[1, Z]`; `steps` hold one decoded row per mode.
pub fn assemble_loss(g: &mut Graph, log_q: Var, log_p: Var, steps: &[(Var, Var)], y: &[[f64; 2]]) -> Result<LossVars> {
    let modes = g.shape(log_q)[1];
    if g.shape(log_p) != [1, modes] || steps.first().is_none_or(|s| g.shape(s.0) != [modes, 2]) {
        return Err(CvaeError::ShapeMismatch("mode counts disagree".into()));
    }
    let lq = g.reshape(log_q, &[modes])?;
    let lp = g.reshape(log_p, &[modes])?;
    let q = g.exp(lq);

    let ll = log_likelihood(g, steps, y)?;
    let wll = g.mul(q, ll)?;
    let sum_wll = g.reduce_sum(wll, None)?;
    let nll = g.scale(sum_wll, -1.0);

    let ratio = g.sub(lq, lp)?;
    let wkl = g.mul(q, ratio)?;
    let kl = g.reduce_sum(wkl, None)?;

    let se = mean_sq_error(g, steps, y)?;
    let wse = g.mul(q, se)?;
    let mse = g.reduce_sum(wse, None)?;

    let nk = g.add(nll, kl)?;
    let total = g.add(nk, mse)?;
    Ok(LossVars { total, nll, kl, mse })
}

#[cfg(test)]
mod tests;
