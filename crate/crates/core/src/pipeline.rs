//! Model construction, gradient-free encoding and the two-stage evaluation.

use rand::Rng;

use crate::autograd::{Segments, Tape, Var};
use crate::blocks::Ctx;
use crate::cloud::{CloudModel, InstanceBatch, Submap};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{EmbeddingIndex, EvalReport, LOC_KS};
use crate::fine::FineModel;
use crate::params::ParamStore;
use crate::scenegen::{Dataset, Split};
use crate::tensor::Tensor;
use crate::text::{embed_queries, TextModel, TextQuery};

/// Samples per forward pass when encoding without gradients.
pub const ENCODE_CHUNK: usize = 64;

/// Text and cloud encoders trained jointly by the contrastive stage.
#[derive(Clone, Debug)]
pub struct CoarseModel {
    pub store: ParamStore<f32>,
    pub text: TextModel,
    pub cloud: CloudModel,
}

impl CoarseModel {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let text = TextModel::new(&mut store, &cfg.text(), rng)?;
        let cloud = CloudModel::new(&mut store, &cfg.cloud(), rng)?;
        Ok(Self { store, text, cloud })
    }
}

/// Whether the fine stage's encoder copies receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FineEncoders {
    /// Fixed at the coarse weights.
    Frozen,
    /// Start at the coarse weights and train with the fine head.
    #[default]
    Tuned,
}

impl std::str::FromStr for FineEncoders {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "tuned" => Ok(Self::Tuned),
            other => Err(Error::Config(format!("unknown fine encoder mode {other}"))),
        }
    }
}

impl std::fmt::Display for FineEncoders {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Frozen => "frozen",
            Self::Tuned => "tuned",
        })
    }
}

/// Offset regression with its own copies of both encoders, which start
/// from the coarse weights.
#[derive(Clone, Debug)]
pub struct FineStage {
    pub store: ParamStore<f32>,
    pub text: TextModel,
    pub cloud: CloudModel,
    pub model: FineModel,
    pub encoders: FineEncoders,
}

impl FineStage {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, coarse: &CoarseModel, rng: &mut R) -> Result<Self> {
        let mut store = coarse.store.clone();
        let model = FineModel::new(&mut store, &cfg.fine(), rng)?;
        Ok(Self {
            store,
            text: coarse.text.clone(),
            cloud: coarse.cloud.clone(),
            model,
            encoders: cfg.fine_encoders,
        })
    }

    /// Cell-local offsets `[pairs × 2]` for `queries[i]` placed in `submaps[i]`.
    pub fn forward<'a>(&self, ctx: &Ctx<'a, f32>, queries: &[&TextQuery], submaps: &[&Submap]) -> Result<Var<'a, f32>> {
        if queries.len() != submaps.len() {
            return Err(Error::Batch(format!("{} queries for {} submaps", queries.len(), submaps.len())));
        }
        let t = self.text.encode(ctx, queries)?;
        let p = self.cloud.encode(ctx, submaps)?;
        let (cloud, text) = match self.encoders {
            FineEncoders::Tuned => (p.tokens, t.hint_tokens),
            // constants cut the backward pass at the encoder outputs
            FineEncoders::Frozen => (
                ctx.constant(p.tokens.value().as_ref().clone()),
                ctx.constant(t.hint_tokens.value().as_ref().clone()),
            ),
        };
        self.model.forward(ctx, cloud, &p.segs, text, &t.hint_segs)
    }
}

fn split_rows(t: &Tensor<f32>, segs: &Segments) -> Vec<Tensor<f32>> {
    let d = t.cols();
    segs.iter()
        .map(|r| Tensor::new(&[r.len(), d], t.data()[r.start * d..r.end * d].to_vec()).expect("shape"))
        .collect()
}

/// Unit descriptors and pre-pooling tokens, one entry per input.
pub struct Codes {
    pub descriptors: Vec<Vec<f64>>,
    pub tokens: Vec<Tensor<f32>>,
}

impl Codes {
    fn push(&mut self, descriptor: &Tensor<f32>, tokens: &Tensor<f32>, segs: &Segments) {
        let d = descriptor;
        self.descriptors
            .extend((0..d.rows()).map(|i| d.row(i).iter().map(|&v| v as f64).collect::<Vec<_>>()));
        self.tokens.extend(split_rows(tokens, segs));
    }
}

/// Post-stack instance tokens.
pub fn encode_submaps(store: &ParamStore<f32>, cloud: &CloudModel, submaps: &[&Submap]) -> Result<Codes> {
    let mut out = Codes {
        descriptors: Vec::new(),
        tokens: Vec::new(),
    };
    for chunk in submaps.chunks(ENCODE_CHUNK) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let enc = cloud.encode_batch(&ctx, &InstanceBatch::build(chunk)?)?;
        out.push(&enc.descriptor.value(), &enc.tokens.value(), &enc.segs);
    }
    Ok(out)
}

/// Per-hint tokens after aggregation.
pub fn encode_queries(store: &ParamStore<f32>, text: &TextModel, queries: &[&TextQuery]) -> Result<Codes> {
    let mut out = Codes {
        descriptors: Vec::new(),
        tokens: Vec::new(),
    };
    for chunk in queries.chunks(ENCODE_CHUNK) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let enc = text.encode_batch(&ctx, &embed_queries(chunk)?)?;
        out.push(&enc.descriptor.value(), &enc.hint_tokens.value(), &enc.hint_segs);
    }
    Ok(out)
}

/// Rows re-normalized in 64-bit so the index invariant holds exactly.
fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn build_index(submaps: &[&Submap], codes: &Codes) -> Result<EmbeddingIndex> {
    let dim = codes.descriptors.first().map_or(0, Vec::len);
    let rows: Vec<f64> = codes.descriptors.iter().flat_map(|d| unit(d)).collect();
    EmbeddingIndex::new(
        dim,
        rows,
        submaps.iter().map(|s| s.cell_id).collect(),
        submaps.iter().map(|s| s.center_xy).collect(),
    )
}

/// Packs `(cloud tokens, text tokens)` pairs into one fine-model batch.
pub struct FineBatch {
    pub cloud: Tensor<f32>,
    pub cloud_segs: Segments,
    pub text: Tensor<f32>,
    pub text_segs: Segments,
}

impl FineBatch {
    pub fn pack(pairs: &[(&Tensor<f32>, &Tensor<f32>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Batch("empty fine batch".into()));
        }
        let d = pairs[0].0.cols();
        let cat = |ts: Vec<&Tensor<f32>>| -> Result<(Tensor<f32>, Segments)> {
            let lens: Vec<usize> = ts.iter().map(|t| t.rows()).collect();
            let data: Vec<f32> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
            Ok((Tensor::new(&[lens.iter().sum(), d], data)?, Segments::from_lens(&lens)?))
        };
        let (cloud, cloud_segs) = cat(pairs.iter().map(|p| p.0).collect())?;
        let (text, text_segs) = cat(pairs.iter().map(|p| p.1).collect())?;
        Ok(Self {
            cloud,
            cloud_segs,
            text,
            text_segs,
        })
    }
}

/// Cell-local offsets predicted for each pair.
pub fn predict_offsets(f: &FineStage, pairs: &[(&Tensor<f32>, &Tensor<f32>)]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(ENCODE_CHUNK) {
        let b = FineBatch::pack(chunk)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &f.store);
        let y = f.model.forward(
            &ctx,
            ctx.constant(b.cloud),
            &b.cloud_segs,
            ctx.constant(b.text),
            &b.text_segs,
        )?;
        let y = y.value();
        out.extend((0..y.rows()).map(|i| [y.at(i, 0) as f64, y.at(i, 1) as f64]));
    }
    Ok(out)
}

/// Coarse encodings of every submap and of the queries being scored.
pub struct Encoded<'d> {
    pub submaps: Vec<&'d Submap>,
    pub submap_codes: Codes,
    pub index: EmbeddingIndex,
    pub queries: Vec<&'d TextQuery>,
    pub query_codes: Codes,
}

impl<'d> Encoded<'d> {
    pub fn new(m: &CoarseModel, ds: &'d Dataset, queries: Vec<&'d TextQuery>) -> Result<Self> {
        let submaps: Vec<&Submap> = ds.submaps.iter().collect();
        let submap_codes = encode_submaps(&m.store, &m.cloud, &submaps)?;
        let index = build_index(&submaps, &submap_codes)?;
        let query_codes = encode_queries(&m.store, &m.text, &queries)?;
        Ok(Self {
            submaps,
            submap_codes,
            index,
            queries,
            query_codes,
        })
    }

    fn slot(&self, cell_id: u32) -> Result<usize> {
        self.submaps
            .iter()
            .position(|s| s.cell_id == cell_id)
            .ok_or_else(|| Error::Precondition(format!("no submap for cell {cell_id}")))
    }

    /// Ranked cell ids per query.
    pub fn rankings(&self, k: usize) -> Result<Vec<Vec<u32>>> {
        self.query_codes
            .descriptors
            .iter()
            .map(|d| Ok(self.index.top_k(&unit(d), k)?.hits.into_iter().map(|h| h.0).collect()))
            .collect()
    }

    pub fn recall_at_1(&self) -> Result<f64> {
        let r = self.rankings(1)?;
        let truth: Vec<u32> = self.queries.iter().map(|q| q.cell_id).collect();
        Ok(crate::eval::submap_recall_at_k(&r, &truth, &[1])[0])
    }

    /// Fine predictions in world frame, one per `(query, cell)` pair.
    pub fn predict_world(&self, f: &FineStage, pairs: &[(usize, u32)]) -> Result<Vec<[f64; 2]>> {
        let slots: Vec<usize> = pairs.iter().map(|&(_, c)| self.slot(c)).collect::<Result<_>>()?;
        let cloud = encode_submaps(&f.store, &f.cloud, &self.submaps)?.tokens;
        let text = encode_queries(&f.store, &f.text, &self.queries)?.tokens;
        let tok: Vec<(&Tensor<f32>, &Tensor<f32>)> = pairs
            .iter()
            .zip(&slots)
            .map(|(&(q, _), &s)| (&cloud[s], &text[q]))
            .collect();
        let off = predict_offsets(f, &tok)?;
        Ok(off
            .iter()
            .zip(&slots)
            .map(|(o, &s)| {
                let c = self.submaps[s].center_xy;
                [c[0] + o[0], c[1] + o[1]]
            })
            .collect())
    }

    /// Mean planar error of fine predictions placed in each query's true cell,
    /// and of the true cell's center.
    pub fn fine_vs_center(&self, f: &FineStage) -> Result<(f64, f64)> {
        let pairs: Vec<(usize, u32)> = self.queries.iter().enumerate().map(|(i, q)| (i, q.cell_id)).collect();
        let preds = self.predict_world(f, &pairs)?;
        let n = self.queries.len().max(1) as f64;
        let mut fine = 0.0;
        let mut center = 0.0;
        for (q, p) in self.queries.iter().zip(&preds) {
            let c = self.submaps[self.slot(q.cell_id)?].center_xy;
            fine += ((p[0] - q.target_xy[0]).powi(2) + (p[1] - q.target_xy[1]).powi(2)).sqrt();
            center += ((c[0] - q.target_xy[0]).powi(2) + (c[1] - q.target_xy[1]).powi(2)).sqrt();
        }
        Ok((fine / n, center / n))
    }

    /// Full retrieval-then-regression report.
    pub fn report(&self, f: &FineStage) -> Result<EvalReport> {
        let kmax = *LOC_KS.iter().max().unwrap();
        let rankings = self.rankings(kmax)?;
        let pairs: Vec<(usize, u32)> = rankings
            .iter()
            .enumerate()
            .flat_map(|(q, r)| r.iter().map(move |&c| (q, c)))
            .collect();
        let flat = self.predict_world(f, &pairs)?;
        let mut preds = Vec::with_capacity(rankings.len());
        let mut at = 0;
        for r in &rankings {
            preds.push(flat[at..at + r.len()].to_vec());
            at += r.len();
        }
        let truth_cells: Vec<u32> = self.queries.iter().map(|q| q.cell_id).collect();
        let truth_xy: Vec<[f64; 2]> = self.queries.iter().map(|q| q.target_xy).collect();
        Ok(EvalReport::build(&rankings, &preds, &truth_cells, &truth_xy))
    }
}

/// Queries of one split.
pub fn split_queries(ds: &Dataset, split: Split) -> Vec<&TextQuery> {
    ds.queries_in(split)
}
