//! Training loop: combined loss, AdamW, per-epoch checkpoints and a step log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gcm_core::backbone::{l2_normalize, Embedder};
use gcm_core::checkpoint::Checkpoint;
use gcm_core::loss::{self, combined_loss};
use gcm_core::optim::{adamw_step, lr_schedule, AdamState};
use gcm_core::params::{seeded, Bindings, ParamStore, Scope, StatsStore};
use gcm_core::tensor::Graph;

use crate::config::RunConfig;
use crate::data::{epoch_batches, stack_chunks, FeatureBank};
use crate::CliError;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOG: &str = "train.log";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    pub proto: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub first_step: StepLosses,
    pub last_step: StepLosses,
    pub seconds: f64,
}

/// Model, classifier head and prototypical parameters for `num_speakers` classes.
pub fn init_training_state(cfg: &RunConfig, num_speakers: usize) -> Result<(Embedder, ParamStore, StatsStore), CliError> {
    let model = Embedder::new(cfg.model.clone())?;
    let mut rng = seeded(cfg.seed);
    let (mut store, stats) = model.init(&mut rng)?;
    loss::init_head(&mut store, num_speakers, cfg.model.embedding_dim, &mut rng)?;
    loss::init_proto(&mut store)?;
    Ok((model, store, stats))
}

/// One forward/backward pass; returns the losses and the gradient of every parameter.
pub fn loss_and_grads(
    model: &Embedder,
    store: &ParamStore,
    stats: &mut StatsStore,
    batch: gcm_core::tensor::Tensor,
    labels: &[usize],
    m: usize,
) -> Result<(StepLosses, ParamStore), CliError> {
    let rows = labels.len();
    let mut g = Graph::new();
    let bind = Bindings::bind(&mut g, store, true);
    let mut scope = Scope { g: &mut g, params: &bind, stats, training: true };
    let x = scope.g.constant(batch);
    let raw = model.forward(&mut scope, x)?;
    let head = loss::bind_head(&scope)?;
    let proto = loss::bind_proto(&scope)?;
    let unit = l2_normalize(&mut g, raw).map_err(numerical)?;
    let d = g.shape(unit)[1];
    let grouped = g.reshape(unit, &[rows / m, m, d])?;
    let parts = combined_loss(&mut g, grouped, raw, labels, &head, &proto).map_err(numerical)?;
    let losses = StepLosses {
        ce: g.value(parts.ce).data()[0],
        proto: g.value(parts.proto).data()[0],
        total: g.value(parts.total).data()[0],
    };
    g.backward(parts.total)?;
    let mut grads = ParamStore::new();
    for name in store.names() {
        if let Some(gr) = g.grad(bind.get(name)?) {
            grads.insert(name, gr)?;
        }
    }
    Ok((losses, grads))
}

fn numerical(e: gcm_core::Error) -> CliError {
    CliError::Numerical(e.to_string())
}

fn save_atomic(ckpt: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    ckpt.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains on `manifest`, writing `checkpoint.bin` after every epoch and one
/// `epoch step lr loss_ce loss_proto loss_total` line per step to `train.log`.
///
/// A non-finite loss or gradient aborts; the last completed epoch's checkpoint
/// is left in place.
pub fn train(cfg: &RunConfig, manifest: &Path, out_dir: &Path) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let bank = FeatureBank::load(manifest, &cfg.features)?;
    let (model, mut store, mut stats) = init_training_state(cfg, bank.speakers.len())?;
    let mut opt = AdamState::new();
    let ckpt_path = out_dir.join(CHECKPOINT);
    let mut log = fs::File::create(out_dir.join(LOG))?;
    let m = cfg.train.utts_per_speaker;
    let config_json = cfg.to_json();
    let mut epoch_loss = Vec::new();
    let (mut first, mut last) = (None, None);
    let mut step = 0usize;
    for epoch in 0..cfg.train.epochs {
        let lr = lr_schedule(epoch, &cfg.train.schedule);
        let mut rng = seeded(cfg.seed.wrapping_add(0x1000 + epoch as u64));
        let batches = epoch_batches(&bank.labels, cfg.train.speakers_per_batch, m, &mut rng);
        let mut sum = 0.0;
        for batch in &batches {
            let idx: Vec<usize> = batch.iter().flatten().copied().collect();
            let feats: Vec<_> = idx.iter().map(|&i| &bank.feats[i]).collect();
            let x = stack_chunks(&feats, cfg.features.chunk_frames, Some(&mut rng))?;
            let labels: Vec<usize> = idx.iter().map(|&i| bank.labels[i]).collect();
            let (l, grads) = loss_and_grads(&model, &store, &mut stats, x, &labels, m)?;
            if !l.total.is_finite() {
                return Err(CliError::Numerical(format!("non-finite loss at epoch {epoch} step {step}")));
            }
            adamw_step(&mut store, &grads, &mut opt, lr, &cfg.train.optimizer).map_err(numerical)?;
            loss::clamp_proto_scale(&mut store)?;
            writeln!(log, "{epoch} {step} {lr:.6e} {:.6} {:.6} {:.6}", l.ce, l.proto, l.total)?;
            first.get_or_insert(l);
            last = Some(l);
            sum += l.total;
            step += 1;
        }
        let mean = sum / batches.len().max(1) as f64;
        epoch_loss.push(mean);
        let ckpt = Checkpoint { config: config_json.clone(), params: store.clone(), stats: stats.clone() };
        save_atomic(&ckpt, &ckpt_path)?;
        eprintln!("epoch {epoch}: lr={lr:.3e} loss={mean:.4} ({:.1}s)", start.elapsed().as_secs_f64());
    }
    log.flush()?;
    let (Some(first_step), Some(last_step)) = (first, last) else {
        return Err(CliError::Usage("training ran no steps; check epochs and corpus size".into()));
    };
    Ok(TrainSummary { checkpoint: ckpt_path, epoch_loss, first_step, last_step, seconds: start.elapsed().as_secs_f64() })
}
