//! Desk-scale training experiments with JSON reports.
//!
//! * `smr-recon`   — copy each utterance through its sink; reconstruction accuracy.
//! * `ablate-sink` — same, with the copy slot's edge to the source sink removed.
//! * `lmr-recall`  — key-value recall over a long dialogue, trained and
//!   evaluated under the LMR sink mask vs a short sliding window with one
//!   initial sink. Responses restate their key, and the model has no position
//!   embeddings; see the README for why.

use std::fmt;
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::invalid;
use convsink::mask::MaskKind;
use convsink::tasks::{random_lmr_sample, random_smr_sample, SampleConfig, SyntheticParams, Task, TrainingSample};
use convsink_model::{train, ModelConfig, Positions, Schedule, Transformer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SmrRecon,
    AblateSink,
    LmrRecall,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SmrRecon => "smr-recon",
            Self::AblateSink => "ablate-sink",
            Self::LmrRecall => "lmr-recall",
        })
    }
}

impl FromStr for Experiment {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "smr-recon" => Self::SmrRecon,
            "ablate-sink" => Self::AblateSink,
            "lmr-recall" => Self::LmrRecall,
            _ => invalid!("unknown experiment {s:?} (expected smr-recon, ablate-sink or lmr-recall)"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub samples: SampleConfig,
    pub held_out: usize,
    /// Mask of the main arm. For `lmr-recall` the second arm uses `baseline`.
    pub mask: MaskKind,
    pub baseline: Option<MaskKind>,
    /// LMR only: training dialogues draw their pair count uniformly from
    /// `train_min_pairs..=samples.dialogue.n_pairs`; held-out dialogues
    /// always use the full count.
    pub train_min_pairs: usize,
    /// Keep every n-th point of the loss curve in the report.
    pub curve_stride: usize,
}

impl ExperimentConfig {
    pub fn default_for(experiment: Experiment) -> Self {
        match experiment {
            Experiment::SmrRecon | Experiment::AblateSink => Self {
                experiment,
                seed: 0,
                model: ModelConfig { n_layers: 2, n_heads: 4, d_model: 64, d_ff: 128, vocab_size: 32, max_seq_len: 40, seed: 0, ..ModelConfig::default() },
                schedule: Schedule { lr: 3e-3, steps: 3000, batch_size: 8, grad_clip: Some(1.0), ..Schedule::default() },
                samples: SampleConfig { s: 2, smr_min_len: 7, smr_max_len: 7, ..SampleConfig::default() },
                held_out: 200,
                mask: if experiment == Experiment::SmrRecon { MaskKind::Smr } else { MaskKind::SmrNoSink },
                baseline: None,
                train_min_pairs: 1,
                curve_stride: 10,
            },
            Experiment::LmrRecall => {
                let dialogue =
                    SyntheticParams { n_pairs: 24, key_len: 1, val_len: 1, vocab: 64, split_vocab: true, echo_key: true };
                Self {
                    experiment,
                    seed: 0,
                    model: ModelConfig {
                        n_layers: 2,
                        n_heads: 4,
                        d_model: 64,
                        d_ff: 128,
                        vocab_size: 64,
                        max_seq_len: 128,
                        seed: 0,
                        positions: Positions::None,
                    },
                    schedule: Schedule { lr: 1e-3, steps: 4000, batch_size: 16, grad_clip: Some(1.0), ..Schedule::default() },
                    samples: SampleConfig { vocab: 64, dialogue, ..SampleConfig::default() },
                    held_out: 200,
                    mask: MaskKind::Lmr,
                    // window covers the repeated query and the response prefix, never the original pair
                    baseline: Some(MaskKind::StreamingLlm { n_sink: 1, window: dialogue.key_len + 1 }),
                    train_min_pairs: 1,
                    curve_stride: 10,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.mask.validate()?;
        if let Some(b) = self.baseline {
            b.validate()?;
        }
        if self.held_out == 0 {
            invalid!("held_out must be >= 1");
        }
        if self.train_min_pairs == 0 || self.train_min_pairs > self.samples.dialogue.n_pairs {
            invalid!("train_min_pairs must be in 1..=n_pairs");
        }
        if self.curve_stride == 0 {
            invalid!("curve_stride must be >= 1");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn task(&self) -> Task {
        match self.experiment {
            Experiment::SmrRecon | Experiment::AblateSink => Task::Smr,
            Experiment::LmrRecall => Task::Lmr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub train_data: u64,
    pub held_out: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        Self { model: seed, train_data: seed.wrapping_add(1), held_out: seed.wrapping_add(2) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub mask: String,
    pub loss_curve: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub token_accuracy: f64,
    pub payload_accuracy: f64,
    /// LMR only: accuracy on the value tokens of the recalled response, the
    /// part that is not a copy of the repeated query.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub arms: Vec<ArmReport>,
    /// Headline numbers: `accuracy` for SMR runs; per-arm recall and `gap` for LMR.
    pub metrics: serde_json::Map<String, serde_json::Value>,
}

fn sample(rng: &mut ChaCha8Rng, cfg: &ExperimentConfig, mask: MaskKind, train: bool) -> Result<TrainingSample> {
    let s = match cfg.task() {
        Task::Lmr if train => {
            let n_pairs = rng.gen_range(cfg.train_min_pairs..=cfg.samples.dialogue.n_pairs);
            let dialogue = SyntheticParams { n_pairs, ..cfg.samples.dialogue };
            random_lmr_sample(rng, &SampleConfig { dialogue, ..cfg.samples })?
        }
        Task::Lmr => random_lmr_sample(rng, &cfg.samples)?,
        _ => random_smr_sample(rng, &cfg.samples)?,
    };
    Ok(if s.mask_kind == mask { s } else { s.with_mask(mask)? })
}

/// Trains and evaluates a single arm under `mask`.
pub fn run_arm(cfg: &ExperimentConfig, seeds: &Seeds, mask: MaskKind) -> Result<ArmReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.held_out);
    let held_out = (0..cfg.held_out).map(|_| sample(&mut rng, cfg, mask, false)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.train_data);
    let mut data = std::iter::from_fn(|| Some(sample(&mut rng, cfg, mask, true).expect("validated sample config")));
    let mut model = Transformer::<f32>::new(ModelConfig { seed: seeds.model, ..cfg.model })?;
    log::info!("{}: training {} ({} params)", cfg.experiment, mask, model.param_count());
    let report = train(&mut model, &mut data, &held_out, &cfg.schedule, cfg.samples.eou)?;
    let acc = report.accuracy(cfg.task()).context("held-out set has no samples of the task")?;
    let loss_curve = report
        .loss_curve
        .iter()
        .enumerate()
        .filter(|(i, _)| i % cfg.curve_stride == 0 || i + 1 == report.steps)
        .map(|(i, &l)| (i, l))
        .collect();
    let recall_accuracy = match cfg.task() {
        Task::Lmr => Some(value_accuracy(&model, &held_out, cfg.samples.dialogue.val_len)?),
        _ => None,
    };
    Ok(ArmReport {
        mask: mask.to_string(),
        loss_curve,
        final_loss: report.final_loss,
        token_accuracy: acc.token_accuracy,
        payload_accuracy: acc.payload_accuracy,
        recall_accuracy,
    })
}

/// Greedy next-token accuracy on the last `val_len` payload tokens of each
/// sample (the value of the recalled pair, just before its EoU).
fn value_accuracy(model: &Transformer<f32>, samples: &[TrainingSample], val_len: usize) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for s in samples {
        let ids = s.ids.as_slice();
        let logits = model.forward(ids, &s.mask)?;
        let n = ids.len();
        for p in n - 1 - val_len..n - 1 {
            hits += usize::from(logits.argmax(p - 1) == ids[p] as usize);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Trains every arm of the experiment and gathers the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    // sample generation is checked once up front so the training iterator cannot fail
    sample(&mut ChaCha8Rng::seed_from_u64(0), cfg, cfg.mask, true)?;
    let seeds = Seeds::derive(cfg.seed);
    let mut arms = vec![run_arm(cfg, &seeds, cfg.mask)?];
    let mut metrics = serde_json::Map::new();
    match cfg.experiment {
        Experiment::SmrRecon | Experiment::AblateSink => {
            metrics.insert("accuracy".into(), arms[0].token_accuracy.into());
        }
        Experiment::LmrRecall => {
            let baseline = cfg.baseline.context("lmr-recall needs a baseline mask")?;
            arms.push(run_arm(cfg, &seeds, baseline)?);
            let recall = |a: &ArmReport| a.recall_accuracy.context("LMR arm without recall accuracy");
            let (a, b) = (recall(&arms[0])?, recall(&arms[1])?);
            metrics.insert("recall_sink".into(), a.into());
            metrics.insert("recall_baseline".into(), b.into());
            metrics.insert("gap".into(), (a - b).into());
        }
    }
    Ok(ExperimentReport { experiment: cfg.experiment, config_hash: cfg.hash(), config: cfg.clone(), seeds, arms, metrics })
}
