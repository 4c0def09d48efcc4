//! Triplet losses, batch-hard mining, Adam and the patience-stopped training
//! loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EyeImage, Identity};
use crate::error::{Error, Result};
use crate::matcher::{choose_threshold_eer, cross_session_pairs, similarity};
use crate::net::{ActivationCache, Embedding, EmbeddingNet, NetConfig, ParamGrads, Params};

/// Absolute margin a validation loss must beat the best-so-far by to count
/// as an improvement.
pub const IMPROVEMENT_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HingeLossConfig {
    pub alpha: f64,
}

/// `max(0, d_ap^2 - d_an^2 + alpha)`.
pub fn hinge_triplet_loss(d_ap_sq: f64, d_an_sq: f64, cfg: &HingeLossConfig) -> f64 {
    (d_ap_sq - d_an_sq + cfg.alpha).max(0.0)
}

/// Partial derivatives of the hinge loss with respect to `(d_ap^2, d_an^2)`.
/// Zero on the clamped side and at the hinge itself.
pub fn hinge_triplet_grad(d_ap_sq: f64, d_an_sq: f64, cfg: &HingeLossConfig) -> (f64, f64) {
    if d_ap_sq - d_an_sq + cfg.alpha > 0.0 {
        (1.0, -1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Which form of the negative term of the logarithmic loss to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLossVariant {
    /// `-ln(eps + d_an^2 / beta)`: penalizes close negatives.
    #[default]
    Corrected,
    /// `-ln((beta - d_an^2) / beta + 1 + eps)`, kept for auditing. It rewards
    /// negatives for moving closer.
    Inverted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLossConfig {
    pub beta: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub variant: LogLossVariant,
}

impl LogLossConfig {
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    /// Scaling factor equal to the embedding dimension.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            beta: dim as f64,
            epsilon: Self::DEFAULT_EPSILON,
            variant: LogLossVariant::Corrected,
        }
    }
}

/// Loss value and its partial derivatives with respect to `d_ap^2` and `d_an^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub d_ap_sq: f64,
    pub d_an_sq: f64,
}

pub fn log_loss_terms(d_ap_sq: f64, d_an_sq: f64, cfg: &LogLossConfig) -> Result<LossTerms> {
    let (beta, eps) = (cfg.beta, cfg.epsilon);
    let pos_arg = 1.0 + eps - d_ap_sq / beta;
    if !(pos_arg > 0.0) {
        return Err(Error::invalid(format!(
            "anchor-positive distance {d_ap_sq} exceeds beta(1+eps) = {}",
            beta * (1.0 + eps)
        )));
    }
    let (neg_arg, neg_slope) = match cfg.variant {
        LogLossVariant::Corrected => (eps + d_an_sq / beta, 1.0 / beta),
        LogLossVariant::Inverted => ((beta - d_an_sq) / beta + 1.0 + eps, -1.0 / beta),
    };
    if !(neg_arg > 0.0) {
        return Err(Error::invalid(format!(
            "anchor-negative term undefined at d_an^2 = {d_an_sq}"
        )));
    }
    Ok(LossTerms {
        loss: -pos_arg.ln() - neg_arg.ln(),
        d_ap_sq: 1.0 / (beta * pos_arg),
        d_an_sq: -neg_slope / neg_arg,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Logarithmic triplet loss and its gradients with respect to each embedding.
pub fn log_triplet_loss(
    anchor: &Embedding,
    positive: &Embedding,
    negative: &Embedding,
    cfg: &LogLossConfig,
) -> Result<TripletLoss> {
    let d = anchor.dim();
    if positive.dim() != d || negative.dim() != d {
        return Err(Error::shape("triplet embeddings differ in dimension"));
    }
    if cfg.beta != d as f64 {
        return Err(Error::invalid(format!(
            "beta {} must equal the embedding dimension {d}",
            cfg.beta
        )));
    }
    let (a, p, n) = (anchor.as_slice(), positive.as_slice(), negative.as_slice());
    let terms = log_loss_terms(squared_distance(a, p), squared_distance(a, n), cfg)?;
    let mut grad_anchor = vec![0.0; d];
    let mut grad_positive = vec![0.0; d];
    let mut grad_negative = vec![0.0; d];
    for i in 0..d {
        let gp = 2.0 * terms.d_ap_sq * (a[i] - p[i]);
        let gn = 2.0 * terms.d_an_sq * (a[i] - n[i]);
        grad_anchor[i] = gp + gn;
        grad_positive[i] = -gp;
        grad_negative[i] = -gn;
    }
    Ok(TripletLoss {
        loss: terms.loss,
        grad_anchor,
        grad_positive,
        grad_negative,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Hardest positive and hardest negative per anchor; ties go to the lowest
/// index. Samples without a same-label partner are never anchors but remain
/// available as negatives.
pub fn mine_batch_hard<L: Eq>(embeddings: &[Embedding], labels: &[L]) -> Result<Vec<Triplet>> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape("one label per embedding is required"));
    }
    let n = embeddings.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(embeddings[i].as_slice(), embeddings[j].as_slice());
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut triplets = Vec::new();
    for anchor in 0..n {
        let mut positive: Option<usize> = None;
        let mut negative: Option<usize> = None;
        for j in 0..n {
            if j == anchor {
                continue;
            }
            let d = dist[anchor * n + j];
            if labels[j] == labels[anchor] {
                if positive.map_or(true, |p| d > dist[anchor * n + p]) {
                    positive = Some(j);
                }
            } else if negative.map_or(true, |q| d < dist[anchor * n + q]) {
                negative = Some(j);
            }
        }
        if let (Some(positive), Some(negative)) = (positive, negative) {
            triplets.push(Triplet {
                anchor,
                positive,
                negative,
            });
        }
    }
    if triplets.is_empty() {
        return Err(Error::invalid("batch admits no valid triplet"));
    }
    Ok(triplets)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    first: Params,
    second: Params,
}

impl Adam {
    pub fn new(params: &Params, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &ParamGrads) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.learning_rate, self.epsilon);
        self.first.zip_tensors_mut(grads, |m, g| {
            for (m, g) in m.iter_mut().zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
            }
        });
        self.second.zip_tensors_mut(grads, |v, g| {
            for (v, g) in v.iter_mut().zip(g) {
                *v = b2 * *v + (1.0 - b2) * g * g;
            }
        });
        let first = self.first.tensors();
        let second = self.second.tensors();
        let mut idx = 0;
        params.for_each_tensor_mut(|_, t| {
            let (m, v) = (first[idx].1, second[idx].1);
            for i in 0..t.len() {
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                t[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_triplets: usize,
    pub learning_rate: f64,
    pub min_iterations: usize,
    /// Hard stop regardless of patience.
    pub max_iterations: Option<usize>,
    /// Consecutive non-improving validation checks tolerated after `min_iterations`.
    pub patience: usize,
    pub validation_interval: usize,
    pub validation_triplets: usize,
    pub identities_per_batch: usize,
    pub samples_per_identity: usize,
    pub loss_variant: LogLossVariant,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_triplets: 24,
            learning_rate: 1e-3,
            min_iterations: 2000,
            max_iterations: Some(6000),
            patience: 20,
            validation_interval: 50,
            validation_triplets: 64,
            identities_per_batch: 8,
            samples_per_identity: 3,
            loss_variant: LogLossVariant::Corrected,
            epsilon: LogLossConfig::DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.batch_triplets,
            self.patience,
            self.validation_interval,
            self.validation_triplets,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("training counts must be positive"));
        }
        if self.identities_per_batch < 2 || self.samples_per_identity < 2 {
            return Err(Error::invalid(
                "batches need at least 2 identities with at least 2 samples each",
            ));
        }
        if !(self.learning_rate >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("learning rate must be >= 0 and epsilon > 0"));
        }
        Ok(())
    }
}

/// A preprocessed training sample.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub crop: EyeImage,
    pub identity: Identity,
    pub session_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration,train_loss,val_loss";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for e in &self.entries {
            match e.val_loss {
                Some(v) => out.push_str(&format!("{},{},{}\n", e.iteration, e.train_loss, v)),
                None => out.push_str(&format!("{},{},\n", e.iteration, e.train_loss)),
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_csv().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn validation_checks(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries
            .iter()
            .filter_map(|e| e.val_loss.map(|v| (e.iteration, v)))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation loss, rounded to `f32`.
    pub net: EmbeddingNet,
    /// Equal-error-rate similarity threshold on the validation pairs.
    pub threshold: f64,
    pub best_val_loss: f64,
    pub iterations: usize,
    pub log: TrainLog,
}

fn group_by_identity(samples: &[TrainSample]) -> BTreeMap<&Identity, Vec<usize>> {
    let mut groups: BTreeMap<&Identity, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(&s.identity).or_default().push(i);
    }
    groups
}

fn embed_all(net: &EmbeddingNet, crops: &[&EyeImage]) -> Result<Vec<(Embedding, ActivationCache)>> {
    crops.par_iter().map(|c| net.forward(c)).collect()
}

fn fixed_validation_triplets(samples: &[TrainSample], count: usize, seed: u64) -> Result<Vec<Triplet>> {
    let groups = group_by_identity(samples);
    if groups.len() < 2 {
        return Err(Error::invalid("validation needs at least 2 identities"));
    }
    let anchors: Vec<usize> = (0..samples.len())
        .filter(|&i| groups[&samples[i].identity].len() >= 2)
        .collect();
    if anchors.is_empty() {
        return Err(Error::invalid("no validation identity has 2 samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
    let mut triplets = Vec::with_capacity(count);
    for t in 0..count {
        let anchor = anchors[t % anchors.len()];
        let id = &samples[anchor].identity;
        let partners: Vec<usize> = groups[id].iter().copied().filter(|&j| j != anchor).collect();
        let positive = *partners.choose(&mut rng).expect("anchor has a partner");
        let negative = loop {
            let j = rng.gen_range(0..samples.len());
            if samples[j].identity != *id {
                break j;
            }
        };
        triplets.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(triplets)
}

fn mean_triplet_loss(embeddings: &[Embedding], triplets: &[Triplet], cfg: &LogLossConfig) -> Result<f64> {
    let mut total = 0.0;
    for t in triplets {
        total += log_triplet_loss(&embeddings[t.anchor], &embeddings[t.positive], &embeddings[t.negative], cfg)?.loss;
    }
    Ok(total / triplets.len() as f64)
}

/// Equal-error-rate threshold over all cross-session validation pairs.
pub fn validation_threshold(net: &EmbeddingNet, samples: &[TrainSample]) -> Result<f64> {
    let crops: Vec<&EyeImage> = samples.iter().map(|s| &s.crop).collect();
    let embeddings: Vec<Embedding> = embed_all(net, &crops)?.into_iter().map(|(e, _)| e).collect();
    let sessions: Vec<&str> = samples.iter().map(|s| s.session_id.as_str()).collect();
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for (i, j) in cross_session_pairs(&sessions) {
        let s = similarity(&embeddings[i], &embeddings[j])?;
        if samples[i].identity == samples[j].identity {
            genuine.push(s);
        } else {
            impostor.push(s);
        }
    }
    if genuine.is_empty() || impostor.is_empty() {
        return Ok(0.5);
    }
    choose_threshold_eer(&genuine, &impostor)
}

/// Trains from the network's seeded initialization.
pub fn train(
    train: &[TrainSample],
    val: &[TrainSample],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let net = EmbeddingNet::new(net_cfg.clone())?;
    train_from(net, train, val, cfg)
}

pub fn train_from(
    mut net: EmbeddingNet,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    let train_ids: BTreeSet<&Identity> = train.iter().map(|s| &s.identity).collect();
    if let Some(shared) = val.iter().find(|s| train_ids.contains(&s.identity)) {
        return Err(Error::invalid(format!(
            "identity {} appears in both training and validation sets",
            shared.identity
        )));
    }
    let groups = group_by_identity(train);
    if groups.len() < 2 {
        return Err(Error::invalid("training needs at least 2 identities"));
    }
    if let Some((id, _)) = groups.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::invalid(format!("training identity {id} has a single sample")));
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();

    let loss_cfg = LogLossConfig {
        beta: net.embed_dim() as f64,
        epsilon: cfg.epsilon,
        variant: cfg.loss_variant,
    };
    let val_triplets = fixed_validation_triplets(val, cfg.validation_triplets, cfg.seed)?;
    let val_crops: Vec<&EyeImage> = val.iter().map(|s| &s.crop).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&net.params, cfg.learning_rate);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Params)> = None;
    // Reference loss and stale count of the patience window, which opens at
    // the first check after `min_iterations`.
    let mut window: Option<(f64, usize)> = None;
    let mut ids: Vec<usize> = (0..groups.len()).collect();
    let mut iteration = 0;

    loop {
        iteration += 1;

        ids.shuffle(&mut rng);
        let mut batch = Vec::new();
        let mut labels = Vec::new();
        for &id in ids.iter().take(cfg.identities_per_batch) {
            let k = cfg.samples_per_identity.min(groups[id].len());
            for &i in groups[id].choose_multiple(&mut rng, k) {
                batch.push(i);
                labels.push(id);
            }
        }
        let crops: Vec<&EyeImage> = batch.iter().map(|&i| &train[i].crop).collect();
        let forward = embed_all(&net, &crops)?;
        let embeddings: Vec<Embedding> = forward.iter().map(|(e, _)| e.clone()).collect();
        let mut triplets = mine_batch_hard(&embeddings, &labels)?;
        triplets.truncate(cfg.batch_triplets);

        let scale = 1.0 / triplets.len() as f64;
        let dim = net.embed_dim();
        let mut grad_embed = vec![vec![0.0; dim]; batch.len()];
        let mut train_loss = 0.0;
        for t in &triplets {
            let out = log_triplet_loss(&embeddings[t.anchor], &embeddings[t.positive], &embeddings[t.negative], &loss_cfg)?;
            train_loss += out.loss * scale;
            for (slot, g) in [
                (t.anchor, &out.grad_anchor),
                (t.positive, &out.grad_positive),
                (t.negative, &out.grad_negative),
            ] {
                for (acc, v) in grad_embed[slot].iter_mut().zip(g) {
                    *acc += v * scale;
                }
            }
        }
        let per_sample: Vec<ParamGrads> = forward
            .par_iter()
            .zip(&grad_embed)
            .map(|((_, cache), g)| net.backward(cache, g))
            .collect::<Result<_>>()?;
        let mut grads = net.params.zeros_like();
        for g in &per_sample {
            grads.add_assign(g);
        }
        adam.step(&mut net.params, &grads);

        let mut val_loss = None;
        let mut stop = false;
        if iteration % cfg.validation_interval == 0 {
            let val_embeddings: Vec<Embedding> = embed_all(&net, &val_crops)?.into_iter().map(|(e, _)| e).collect();
            let loss = mean_triplet_loss(&val_embeddings, &val_triplets, &loss_cfg)?;
            val_loss = Some(loss);
            if best.as_ref().map_or(true, |(b, _)| loss < b - IMPROVEMENT_EPSILON) {
                best = Some((loss, net.params.clone()));
            }
            if iteration > cfg.min_iterations {
                window = Some(match window {
                    None => (loss, 0),
                    Some((reference, _)) if loss < reference - IMPROVEMENT_EPSILON => (loss, 0),
                    Some((reference, stale)) => (reference, stale + 1),
                });
                stop = window.is_some_and(|(_, stale)| stale >= cfg.patience);
            }
        }
        log.entries.push(LogEntry {
            iteration,
            train_loss,
            val_loss,
        });
        if stop || cfg.max_iterations.is_some_and(|m| iteration >= m) {
            break;
        }
    }

    let (best_val_loss, best_params) = match best {
        Some(b) => b,
        None => {
            let val_embeddings: Vec<Embedding> = embed_all(&net, &val_crops)?.into_iter().map(|(e, _)| e).collect();
            (mean_triplet_loss(&val_embeddings, &val_triplets, &loss_cfg)?, net.params.clone())
        }
    };
    net.params = best_params;
    net.params.round_to_f32();
    let threshold = validation_threshold(&net, val)?;
    Ok(TrainOutcome {
        net,
        threshold,
        best_val_loss,
        iterations: iteration,
        log,
    })
}
