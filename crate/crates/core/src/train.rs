//! Two-stage training: contrastive coarse retrieval, then offset
//! regression on encoder copies seeded from the coarse checkpoint. Each epoch ends with a checkpoint that
//! carries the optimizer and RNG state, so interrupted runs resume exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::augment_pairs;
use crate::autograd::Tape;
use crate::blocks::Ctx;
use crate::checkpoint::{snapshot_params, Checkpoint, RngState};
use crate::cloud::{InstanceBatch, Submap};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::loss::{contrastive_loss, fine_loss};
use crate::optim::{clip_grad_norm, Adam};
use crate::params::ParamStore;
use crate::pipeline::{CoarseModel, Encoded, FineStage};
#[cfg(test)]
use crate::pipeline::FineEncoders;
use crate::scenegen::{sha256_hex, Dataset, Split};
use crate::tensor::Tensor;
use crate::text::{embed_queries, TextQuery};

pub const COARSE_CKPT: &str = "coarse.ckpt";
pub const FINE_CKPT: &str = "fine.ckpt";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after this many epochs in this invocation.
    pub stop_after: Option<usize>,
    /// Continue from the checkpoint at the output path if present.
    pub resume: bool,
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Validation recall@1 (coarse) or mean validation error in meters (fine).
    pub metric: f64,
}

/// Batches of at most `size` queries, never two from one cell.
///
/// Each cell's queries are shuffled; round `r` takes the `r`-th query of
/// every cell that has one, in a shuffled cell order, and is chunked.
pub fn coarse_batches<'q>(queries: &[&'q TextQuery], size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<&'q TextQuery>>> {
    if size < 2 {
        return Err(Error::Batch("contrastive batches need at least two queries".into()));
    }
    let mut cells: Vec<u32> = queries.iter().map(|q| q.cell_id).collect();
    cells.sort_unstable();
    cells.dedup();
    let mut per_cell: Vec<Vec<&TextQuery>> = cells
        .iter()
        .map(|&c| queries.iter().copied().filter(|q| q.cell_id == c).collect())
        .collect();
    for qs in &mut per_cell {
        qs.shuffle(rng);
    }
    let rounds = per_cell.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        let mut order: Vec<&TextQuery> = per_cell.iter().filter_map(|qs| qs.get(r).copied()).collect();
        order.shuffle(rng);
        let mut chunks: Vec<Vec<&TextQuery>> = order.chunks(size).map(<[_]>::to_vec).collect();
        // a singleton tail has no negatives; fold it into the previous chunk
        if chunks.len() > 1 && chunks.last().unwrap().len() == 1 {
            let tail = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(tail);
        }
        for c in chunks {
            if c.len() >= 2 {
                out.push(c);
            } else {
                // a lone query joins any earlier batch that lacks its cell
                let q = c[0];
                if let Some(b) = out.iter_mut().find(|b| b.len() <= size && b.iter().all(|o| o.cell_id != q.cell_id)) {
                    b.push(q);
                }
            }
        }
    }
    Ok(out)
}

pub fn check_distinct_cells(batch: &[&TextQuery]) -> Result<()> {
    let mut cells: Vec<u32> = batch.iter().map(|q| q.cell_id).collect();
    cells.sort_unstable();
    if let Some(w) = cells.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Batch(format!("cell {} appears twice in one batch", w[0])));
    }
    Ok(())
}

fn header(cfg: &RunConfig, stage: &str, data_digest: &str, extra: &str) -> String {
    format!("{}data_digest={data_digest}\nstage={stage}\n{extra}", cfg.canonical())
}

fn apply_grads(store: &mut ParamStore<f32>, grads: Vec<(crate::params::ParamId, Tensor<f32>)>) {
    store.zero_grad();
    for (id, g) in grads {
        store.get_mut(id).grad.add_assign(&g);
    }
}

fn log_line(log: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(log, "{line}")?;
    log.flush()?;
    Ok(())
}

/// Loads a checkpoint to resume from, checking it belongs to this run.
fn resume_point(path: &Path, expected_header: &str) -> Result<Option<Checkpoint<f32>>> {
    if !path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::<f32>::load(path)?;
    if ck.header != expected_header {
        return Err(Error::Provenance(format!(
            "{} was written by a different config or dataset",
            path.display()
        )));
    }
    Ok(Some(ck))
}

pub fn coarse_step(
    model: &mut CoarseModel,
    adam: &mut Adam<f32>,
    cfg: &RunConfig,
    batch: &[&TextQuery],
    submaps: &[&Submap],
) -> Result<f64> {
    check_distinct_cells(batch)?;
    let tokens = embed_queries::<f32>(batch)?;
    let inst = InstanceBatch::<f32>::build(submaps)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store);
    let t = model.text.encode_batch(&ctx, &tokens)?;
    let p = model.cloud.encode_batch(&ctx, &inst)?;
    let loss = contrastive_loss(p.descriptor, t.descriptor, cfg.temperature as f32, cfg.contrastive_form)?;
    let value = loss.value().item() as f64;
    let grads = tape.gradients(loss, Tensor::full(&[1], 1.0))?;
    apply_grads(&mut model.store, grads);
    clip_grad_norm(&mut model.store, cfg.clip_norm);
    adam.step(&mut model.store, cfg.coarse_lr);
    Ok(value)
}

/// Contrastive training of the text and cloud encoders; writes
/// `run_dir/coarse.ckpt` after every epoch.
pub fn train_coarse(
    cfg: &RunConfig,
    ds: &Dataset,
    data_digest: &str,
    opts: &TrainOptions,
    log: &mut dyn Write,
) -> Result<(CoarseModel, Vec<EpochLog>)> {
    let path = cfg.run_dir.join(COARSE_CKPT);
    let head = header(cfg, "coarse", data_digest, "");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = CoarseModel::new(cfg, &mut rng)?;
    let mut adam = Adam::new(&model.store);
    let mut start = 0;
    if opts.resume {
        if let Some(ck) = resume_point(&path, &head)? {
            ck.restore_params(&mut model.store)?;
            adam = Adam::from_named(&model.store, ck.step, &ck.moments)?;
            rng = ck.rng.restore();
            start = ck.epoch as usize;
        }
    }
    let train = ds.queries_in(Split::Train);
    let val = ds.queries_in(Split::Val);
    let mut logs = Vec::new();
    for epoch in start..cfg.coarse_epochs {
        if opts.stop_after.is_some_and(|n| epoch - start >= n) {
            break;
        }
        let batches = coarse_batches(&train, cfg.batch_size, &mut rng)?;
        let mut total = 0.0;
        for b in &batches {
            let submaps: Vec<&Submap> = b
                .iter()
                .map(|q| ds.submap(q.cell_id).ok_or_else(|| Error::Precondition(format!("no submap for cell {}", q.cell_id))))
                .collect::<Result<_>>()?;
            let (qs, ss) = augment_pairs(b, &submaps, cfg.augment, &mut rng)?;
            let qs: Vec<&TextQuery> = qs.iter().collect();
            let ss: Vec<&Submap> = ss.iter().collect();
            total += coarse_step(&mut model, &mut adam, cfg, &qs, &ss)?;
        }
        let loss = total / batches.len().max(1) as f64;
        let recall1 = Encoded::new(&model, ds, val.clone())?.recall_at_1()?;
        log_line(
            log,
            &format!("stage=coarse epoch={} loss={loss:.4} recall1={recall1:.4} config={}", epoch + 1, cfg.digest()),
        )?;
        logs.push(EpochLog {
            epoch: epoch + 1,
            loss,
            metric: recall1,
        });
        Checkpoint {
            header: head.clone(),
            params: snapshot_params(&model.store),
            step: adam.t,
            moments: adam.named_moments(&model.store),
            epoch: (epoch + 1) as u64,
            rng: RngState::capture(&rng),
        }
        .save(&path)?;
    }
    Ok((model, logs))
}

/// Rebuilds the coarse encoders from their checkpoint, checking provenance.
pub fn load_coarse(cfg: &RunConfig, data_digest: &str) -> Result<(CoarseModel, String)> {
    let path = cfg.run_dir.join(COARSE_CKPT);
    let bytes = std::fs::read(&path).map_err(|_| Error::Dependency(path.clone()))?;
    let ck = Checkpoint::<f32>::from_bytes(&bytes)?;
    if ck.header_value("data_digest") != Some(data_digest) {
        return Err(Error::Provenance(format!("{} was trained on different data", path.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = CoarseModel::new(cfg, &mut rng)?;
    ck.restore_params(&mut model.store)?;
    Ok((model, sha256_hex(&bytes)))
}

pub fn load_fine(cfg: &RunConfig, data_digest: &str, coarse: &CoarseModel, coarse_digest: &str) -> Result<FineStage> {
    let path = cfg.run_dir.join(FINE_CKPT);
    let ck = Checkpoint::<f32>::load(&path)?;
    if ck.header_value("data_digest") != Some(data_digest) {
        return Err(Error::Provenance(format!("{} was trained on different data", path.display())));
    }
    if ck.header_value("coarse_digest") != Some(coarse_digest) {
        return Err(Error::Provenance(format!("{} was trained on a different coarse model", path.display())));
    }
    let mut stage = FineStage::new(cfg, coarse, &mut fine_rng(cfg.seed))?;
    ck.restore_params(&mut stage.store)?;
    Ok(stage)
}

fn fine_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Cell-local ground truth of a query: target minus its cell center.
pub fn local_target(q: &TextQuery, center: [f64; 2]) -> [f64; 2] {
    [q.target_xy[0] - center[0], q.target_xy[1] - center[1]]
}

/// One regression step through the fine stage's encoders and head.
pub fn fine_step(
    stage: &mut FineStage,
    adam: &mut Adam<f32>,
    cfg: &RunConfig,
    queries: &[&TextQuery],
    submaps: &[&Submap],
) -> Result<f64> {
    let gt: Vec<f64> = queries
        .iter()
        .zip(submaps)
        .flat_map(|(q, s)| local_target(q, s.center_xy))
        .collect();
    let gt = Tensor::<f32>::from_f64(&[queries.len(), 2], &gt)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &stage.store);
    let pred = stage.forward(&ctx, queries, submaps)?;
    let loss = fine_loss(pred, ctx.constant(gt), cfg.fine_squared)?;
    let value = loss.value().item() as f64;
    let grads = tape.gradients(loss, Tensor::full(&[1], 1.0))?;
    apply_grads(&mut stage.store, grads);
    clip_grad_norm(&mut stage.store, cfg.clip_norm);
    adam.step(&mut stage.store, cfg.fine_lr);
    Ok(value)
}

/// Offset regression, each query placed in its own cell; writes
/// `run_dir/fine.ckpt` after every epoch. Fails with a dependency error
/// without a coarse checkpoint.
pub fn train_fine(
    cfg: &RunConfig,
    ds: &Dataset,
    data_digest: &str,
    opts: &TrainOptions,
    log: &mut dyn Write,
) -> Result<(FineStage, Vec<EpochLog>)> {
    let (coarse, coarse_digest) = load_coarse(cfg, data_digest)?;
    let path = cfg.run_dir.join(FINE_CKPT);
    let head = header(cfg, "fine", data_digest, &format!("coarse_digest={coarse_digest}\n"));
    let mut rng = fine_rng(cfg.seed);
    let mut stage = FineStage::new(cfg, &coarse, &mut rng)?;
    let mut adam = Adam::new(&stage.store);
    let mut start = 0;
    if opts.resume {
        if let Some(ck) = resume_point(&path, &head)? {
            ck.restore_params(&mut stage.store)?;
            adam = Adam::from_named(&stage.store, ck.step, &ck.moments)?;
            rng = ck.rng.restore();
            start = ck.epoch as usize;
        }
    }
    let samples: Vec<(&TextQuery, &Submap)> = ds
        .queries_in(Split::Train)
        .into_iter()
        .map(|q| {
            ds.submap(q.cell_id)
                .map(|s| (q, s))
                .ok_or_else(|| Error::Precondition(format!("no submap for cell {}", q.cell_id)))
        })
        .collect::<Result<_>>()?;
    let val = Encoded::new(&coarse, ds, ds.queries_in(Split::Val))?;
    let mut logs = Vec::new();
    for epoch in start..cfg.fine_epochs {
        if opts.stop_after.is_some_and(|n| epoch - start >= n) {
            break;
        }
        let mut order = samples.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let qs: Vec<&TextQuery> = chunk.iter().map(|p| p.0).collect();
            let ss: Vec<&Submap> = chunk.iter().map(|p| p.1).collect();
            let (qs, ss) = augment_pairs(&qs, &ss, cfg.augment, &mut rng)?;
            let qs: Vec<&TextQuery> = qs.iter().collect();
            let ss: Vec<&Submap> = ss.iter().collect();
            total += fine_step(&mut stage, &mut adam, cfg, &qs, &ss)?;
            batches += 1;
        }
        let loss = total / batches.max(1) as f64;
        let (err, base) = val.fine_vs_center(&stage)?;
        log_line(
            log,
            &format!(
                "stage=fine epoch={} loss={loss:.4} val_error={err:.4} center_error={base:.4} config={}",
                epoch + 1,
                cfg.digest()
            ),
        )?;
        logs.push(EpochLog {
            epoch: epoch + 1,
            loss,
            metric: err,
        });
        Checkpoint {
            header: head.clone(),
            params: snapshot_params(&stage.store),
            step: adam.t,
            moments: adam.named_moments(&stage.store),
            epoch: (epoch + 1) as u64,
            rng: RngState::capture(&rng),
        }
        .save(&path)?;
    }
    Ok((stage, logs))
}

pub fn checkpoint_path(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.run_dir.join(if stage == "fine" { FINE_CKPT } else { COARSE_CKPT })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: u32, cell: u32) -> TextQuery {
        TextQuery {
            query_id: id,
            cell_id: cell,
            target_xy: [0.0, 0.0],
            hints: vec!["x".into()],
        }
    }

    #[test]
    fn batches_hold_distinct_cells_and_cover_all() {
        let qs: Vec<TextQuery> = (0..50).map(|i| q(i, i % 7)).collect();
        let refs: Vec<&TextQuery> = qs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = coarse_batches(&refs, 4, &mut rng).unwrap();
        let mut seen: Vec<u32> = Vec::new();
        for b in &batches {
            assert!(b.len() >= 2 && b.len() <= 5);
            check_distinct_cells(b).unwrap();
            seen.extend(b.iter().map(|q| q.query_id));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    fn small() -> RunConfig {
        RunConfig::parse(
            "grid=3\nqueries_per_cell=1\nd_model=8\nd_state=2\nheads=2\nout_dim=8\n\
             tam_layers=1\npcm_blocks=1\nccam_stages=1\n",
        )
        .unwrap()
    }

    #[test]
    fn frozen_encoders_stay_fixed_and_tuned_ones_move() {
        for (mode, moves) in [(FineEncoders::Frozen, false), (FineEncoders::Tuned, true)] {
            let mut cfg = small();
            cfg.fine_encoders = mode;
            let ds = crate::scenegen::generate_world(&cfg.world()).unwrap();
            let coarse = CoarseModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let mut stage = FineStage::new(&cfg, &coarse, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let mut adam = Adam::new(&stage.store);
            let qs: Vec<&TextQuery> = ds.queries.iter().take(2).collect();
            let ss: Vec<&Submap> = qs.iter().map(|q| ds.submap(q.cell_id).unwrap()).collect();
            fine_step(&mut stage, &mut adam, &cfg, &qs, &ss).unwrap();
            let changed = coarse
                .store
                .iter()
                .filter(|p| stage.store.value(stage.store.id(&p.name).unwrap()) != p.value.as_ref())
                .count();
            assert_eq!(changed > 0, moves, "{mode} changed {changed} encoder tensors");
        }
    }

    #[test]
    fn duplicate_cells_are_rejected() {
        let (a, b) = (q(0, 3), q(1, 3));
        assert!(matches!(check_distinct_cells(&[&a, &b]), Err(Error::Batch(_))));
    }
}
