//! Joint optimization of the encoder and the prototypes under
//! `l_ss + λ1·l_sp + λ2·l_na`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_batch, positive_negative_masks, AugmentationPolicy};
use crate::error::{HsclError, Result};
use crate::losses::{
    draw_pairs, normal_to_abnormal_with_grad, sample_to_prototype_with_grad, sample_to_sample_with_grad,
    sampling_distribution, soft_weights, total_loss, LossBreakdown,
};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::layers::Parameterized;
use crate::model::{Encoder, EncoderSpec};
use crate::optim::{Adam, LrSchedule};
use crate::scenarios::ScenarioSplit;
use crate::types::{HsclConfig, LabelStatus, LabeledSample, PrototypeBank, TrainingView, WeightVector};

/// Largest allowed |cos| between two initial prototypes.
pub const PROTOTYPE_INIT_MAX_COS: f64 = 0.9;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DIVERGENCE_DIR: &str = "divergence_snapshot";

/// An epoch whose every batch has a [`TrainState::last_ss_gap`] below this is
/// treated as diverged: the encoder does no better than a constant map.
pub const COLLAPSE_GAP: f64 = 2e-2;

/// One row of the metrics CSV. Losses are means over the epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub l_ss: f64,
    pub l_sp: f64,
    pub l_na: f64,
    pub total: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub skipped_na_count: usize,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    /// Equality on everything except wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        Self {
            wall_seconds: 0.0,
            ..self.clone()
        } == Self {
            wall_seconds: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub encoder: Encoder,
    pub prototypes: PrototypeBank,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// `ln(M - 1) - l_ss` of the most recent batch of `M` views; `ln(M - 1)` is
    /// the sample-to-sample loss when all similarities are equal. `None` when that
    /// term is off.
    pub last_ss_gap: Option<f64>,
    pub optimizer: Adam,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(encoder: Encoder, prototypes: PrototypeBank) -> Result<Self> {
        if encoder.spec().projection_dim != prototypes.dim() {
            return Err(HsclError::ShapeMismatch(format!(
                "encoder projects to {} dims, prototypes have {}",
                encoder.spec().projection_dim,
                prototypes.dim()
            )));
        }
        Ok(Self {
            encoder,
            prototypes,
            epoch: 0,
            step: 0,
            last_ss_gap: None,
            optimizer: Adam::default(),
            history: Vec::new(),
        })
    }

    pub fn is_trained(&self) -> bool {
        self.step > 0
    }

    pub fn save(&self, dir: &Path, config: &HsclConfig) -> Result<()> {
        save_checkpoint(dir, &self.encoder, &self.prototypes, config, self.epoch, self.step)?;
        Ok(())
    }

    /// Restores parameters, prototypes and counters. Optimizer moments and the
    /// metrics history are not part of a checkpoint.
    pub fn load(dir: &Path) -> Result<(Self, HsclConfig)> {
        let (encoder, prototypes, manifest) = load_checkpoint(dir)?;
        let mut state = Self::new(encoder, prototypes)?;
        state.epoch = manifest.epoch;
        state.step = manifest.step;
        Ok((state, manifest.config))
    }
}

/// `k` columns drawn uniformly on the unit sphere of `R^d`. A draw whose |cos|
/// with an accepted column exceeds 0.9 is rejected; after 1000 rejections for one
/// column the least correlated candidate is kept (only reachable when `d` is tiny).
pub fn init_prototypes<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<PrototypeBank> {
    if k == 0 || d == 0 {
        return Err(HsclError::InvalidConfig(format!("need k >= 1 and d >= 1, got k={k}, d={d}")));
    }
    let mut cols: Vec<Array1<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut best: Option<(f64, Array1<f64>)> = None;
        for _ in 0..1000 {
            let v = loop {
                let v = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
                let n = v.dot(&v).sqrt();
                if n > 1e-8 {
                    break v / n;
                }
            };
            let worst = cols.iter().map(|c| c.dot(&v).abs()).fold(0.0, f64::max);
            if best.as_ref().is_none_or(|(b, _)| worst < *b) {
                best = Some((worst, v));
            }
            if worst <= PROTOTYPE_INIT_MAX_COS {
                break;
            }
        }
        cols.push(best.expect("at least one draw").1);
    }
    let mut m = Array2::zeros((d, k));
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).assign(c);
    }
    PrototypeBank::new(m)
}

/// One optimizer step on a batch of original samples: augment, encode, compute the
/// three losses, backpropagate and update encoder and prototypes together.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[TrainingView<'_>],
    config: &HsclConfig,
    policy: &AugmentationPolicy,
    lr: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let (epoch, step) = (state.epoch, state.step);
    let diverged = |detail: String| HsclError::LossDivergence { epoch, step, detail };
    let aug = augment_batch(batch, policy, rng)?;
    let z = state.encoder.forward_train(&aug.views)?;
    let (m, d) = (z.len(), z.dim());
    let terms = config.terms;
    let mut d_z = Array2::<f64>::zeros((m, d));

    state.last_ss_gap = None;
    let l_ss = if terms.sample_to_sample {
        let masks = positive_negative_masks(&aug);
        let (l, g) = sample_to_sample_with_grad(&z, &masks, config.tau)?;
        d_z += &g;
        state.last_ss_gap = Some(((m - 1) as f64).ln() - l);
        l
    } else {
        0.0
    };

    let (nu, ab): (Vec<usize>, Vec<usize>) = (0..m).partition(|&i| aug.status[i].is_normal_or_unlabeled());
    let z_nu = z.select(&nu);
    let z_a = z.select(&ab);
    let nu_status: Vec<LabelStatus> = nu.iter().map(|&i| aug.status[i]).collect();
    // Without the prototype term the prototypes never train, so every normal or
    // unlabeled view gets weight 1.
    let w = if terms.sample_to_prototype {
        soft_weights(&z_nu, &nu_status, &state.prototypes, config.w_delta)?
    } else {
        WeightVector::new(Array1::ones(nu.len()), config.w_delta)?
    };

    let mut d_v = Array2::<f64>::zeros((d, state.prototypes.k()));
    let l_sp = if terms.sample_to_prototype {
        let attraction = terms.prototype_attraction && !nu.is_empty();
        let g = sample_to_prototype_with_grad(&z_nu, &z_a, &w, &state.prototypes, attraction, terms.prototype_repulsion)?;
        for (r, &i) in nu.iter().enumerate() {
            d_z.row_mut(i).scaled_add(config.lambda1, &g.d_nu.row(r));
        }
        for (r, &j) in ab.iter().enumerate() {
            d_z.row_mut(j).scaled_add(config.lambda1, &g.d_a.row(r));
        }
        d_v.scaled_add(config.lambda1, &g.d_v);
        g.loss()
    } else {
        0.0
    };

    let mut l_na = 0.0;
    let mut n_pairs = 0;
    let mut skipped = true;
    if terms.normal_to_abnormal && !ab.is_empty() {
        let wanted = config.na_pairs.unwrap_or(ab.len().max(1));
        if let Some(pairs) = sampling_distribution(&w).and_then(|dist| draw_pairs(&dist, wanted, rng)) {
            let (l, g_nu, g_a) = normal_to_abnormal_with_grad(&z_nu, &z_a, &pairs, config.tau)?;
            for (r, &i) in nu.iter().enumerate() {
                d_z.row_mut(i).scaled_add(config.lambda2, &g_nu.row(r));
            }
            for (r, &j) in ab.iter().enumerate() {
                d_z.row_mut(j).scaled_add(config.lambda2, &g_a.row(r));
            }
            l_na = l;
            n_pairs = pairs.len();
            skipped = false;
        }
    }

    let breakdown = total_loss(l_ss, l_sp, l_na, config, n_pairs, skipped).map_err(|e| match e {
        HsclError::LossDivergence { detail, .. } => diverged(detail),
        other => other,
    })?;
    if d_z.iter().chain(d_v.iter()).any(|g| !g.is_finite()) {
        return Err(diverged("non-finite gradient".into()));
    }

    state.encoder.zero_grad();
    state.encoder.backward(&d_z)?;
    let mut bad_grad = None;
    state.encoder.visit(&mut |p| {
        if bad_grad.is_none() && p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
            bad_grad = Some(p.name.clone());
        }
    });
    if let Some(name) = bad_grad {
        return Err(diverged(format!("non-finite gradient in {name}")));
    }

    let TrainState {
        encoder,
        prototypes,
        optimizer,
        ..
    } = state;
    optimizer.begin_step();
    let mut slot = 0;
    encoder.visit_mut(&mut |p| {
        if p.trainable {
            optimizer.update(slot, &mut p.value, &p.grad, lr);
            slot += 1;
        }
    });
    optimizer.update(slot, prototypes.as_array_mut(), &d_v, lr);
    prototypes.renormalize().map_err(|e| diverged(format!("prototype renormalization: {e}")))?;
    encoder.check_finite().map_err(|e| diverged(e.to_string()))?;
    state.step += 1;
    Ok(breakdown)
}

/// Batches of original samples: each reserves `min(|X_a|, B/8)` labeled anomalies
/// and `min(|X_n|, B/8)` labeled normals, and the rest comes from a shuffled pass
/// over `X_u ∪ X_n`. One epoch is one such pass.
#[derive(Clone, Debug)]
pub struct StratifiedSampler<'a> {
    pool: Vec<&'a LabeledSample>,
    x_n: Vec<&'a LabeledSample>,
    x_a: Vec<&'a LabeledSample>,
    reserve_a: usize,
    reserve_n: usize,
    chunk: usize,
}

impl<'a> StratifiedSampler<'a> {
    pub fn new(split: &'a ScenarioSplit, batch_size: usize) -> Result<Self> {
        let pool: Vec<&LabeledSample> = split.x_u.iter().chain(&split.x_n).collect();
        if pool.is_empty() {
            return Err(HsclError::InvalidInput("no normal or unlabeled training samples".into()));
        }
        let reserve_a = split.x_a.len().min(batch_size / 8);
        let reserve_n = split.x_n.len().min(batch_size / 8);
        Ok(Self {
            pool,
            x_n: split.x_n.iter().collect(),
            x_a: split.x_a.iter().collect(),
            reserve_a,
            reserve_n,
            chunk: (batch_size - reserve_a - reserve_n).max(1),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pool.len().div_ceil(self.chunk)
    }

    pub fn epoch_batches<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<&'a LabeledSample>> {
        let mut order = self.pool.clone();
        order.shuffle(rng);
        order
            .chunks(self.chunk)
            .map(|chunk| {
                let mut batch = chunk.to_vec();
                if self.reserve_a > 0 {
                    let picks = sample_indices(rng, self.x_a.len(), self.reserve_a);
                    batch.extend(picks.iter().map(|i| self.x_a[i]));
                }
                if self.reserve_n > 0 {
                    let present: HashSet<_> = chunk.iter().map(|s| s.id()).collect();
                    let free: Vec<_> = self.x_n.iter().filter(|s| !present.contains(&s.id())).collect();
                    let take = self.reserve_n.min(free.len());
                    let picks = sample_indices(rng, free.len(), take);
                    batch.extend(picks.iter().map(|i| *free[i]));
                }
                batch
            })
            .collect()
    }
}

/// Where `fit` writes its artifacts; nothing is written when `out_dir` is `None`.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Initializes encoder and prototypes from `config.seed`.
pub fn init_state(config: &HsclConfig, encoder_spec: &EncoderSpec) -> Result<TrainState> {
    if encoder_spec.projection_dim != config.d {
        return Err(HsclError::InvalidConfig(format!(
            "encoder projection_dim {} differs from d {}",
            encoder_spec.projection_dim, config.d
        )));
    }
    let mut rng = rng_stream(config.seed, 1);
    let encoder = Encoder::new(encoder_spec.clone(), &mut rng)?;
    let prototypes = init_prototypes(config.k, config.d, &mut rng)?;
    TrainState::new(encoder, prototypes)
}

/// Runs `config.epochs` epochs of Adam with linear warmup and cosine decay.
/// With an output directory, writes `metrics.csv` row by row, a checkpoint at
/// the end, and a snapshot of the last good state if training diverges.
pub fn fit(
    split: &ScenarioSplit,
    config: &HsclConfig,
    encoder_spec: &EncoderSpec,
    policy: &AugmentationPolicy,
    options: &FitOptions,
) -> Result<TrainState> {
    config.validate()?;
    policy.validate()?;
    if split.x_n.is_empty() && !config.allow_unlabeled_only {
        return Err(HsclError::InvalidConfig(
            "X_n is empty; set allow_unlabeled_only to train without labeled normals".into(),
        ));
    }
    let mut state = init_state(config, encoder_spec)?;
    let mut rng = rng_stream(config.seed, 2);
    let sampler = StratifiedSampler::new(split, config.batch_size)?;
    let schedule = LrSchedule {
        base: config.lr,
        warmup_epochs: config.warmup_epochs,
        epochs: config.epochs,
        steps_per_epoch: sampler.steps_per_epoch(),
    };
    let mut metrics = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join(METRICS_FILE))?)
        }
        None => None,
    };

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let batches = sampler.epoch_batches(&mut rng);
        let mut sums = [0.0; 4];
        let mut skipped = 0;
        let mut widest: Option<f64> = None;
        for (s, batch) in batches.iter().enumerate() {
            let views: Vec<TrainingView> = batch.iter().map(|x| x.training_view()).collect();
            let result = train_step(&mut state, &views, config, policy, schedule.at(epoch, s), &mut rng);
            let b = match result {
                Ok(b) => b,
                Err(e) if e.is_numerical() => {
                    if let Some(dir) = &options.out_dir {
                        state.save(&dir.join(DIVERGENCE_DIR), config)?;
                    }
                    return Err(match e {
                        HsclError::LossDivergence { .. } => e,
                        other => HsclError::LossDivergence {
                            epoch,
                            step: state.step,
                            detail: other.to_string(),
                        },
                    });
                }
                Err(e) => return Err(e),
            };
            for (acc, v) in sums.iter_mut().zip([b.l_ss, b.l_sp, b.l_na, b.total]) {
                *acc += v;
            }
            skipped += b.skipped_na as usize;
            if let Some(g) = state.last_ss_gap {
                widest = Some(widest.map_or(g, |w| w.max(g)));
            }
        }
        let n = batches.len().max(1) as f64;
        let row = EpochMetrics {
            epoch: epoch + 1,
            l_ss: sums[0] / n,
            l_sp: sums[1] / n,
            l_na: sums[2] / n,
            total: sums[3] / n,
            lr: schedule.epoch_start(epoch),
            skipped_na_count: skipped,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = metrics.as_mut() {
            w.serialize(&row)?;
            w.flush()?;
        }
        state.history.push(row);
        state.epoch = epoch + 1;
        if let Some(widest) = widest.filter(|&w| w < COLLAPSE_GAP) {
            if let Some(dir) = &options.out_dir {
                state.save(&dir.join(DIVERGENCE_DIR), config)?;
            }
            return Err(HsclError::LossDivergence {
                epoch,
                step: state.step,
                detail: format!(
                    "embeddings collapsed: sample-to-sample loss within {COLLAPSE_GAP} of its uniform value for the whole epoch (best gap {widest:.3e})"
                ),
            });
        }
    }
    if let Some(dir) = &options.out_dir {
        state.save(&dir.join(CHECKPOINT_DIR), config)?;
    }
    Ok(state)
}

/// Reads a metrics CSV written by [`fit`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<EpochMetrics>, _>>()?)
}
