//! Point-cloud branch: per-instance point encoder, canonical instance
//! ordering, PCM blocks and the submap descriptor head.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Segments, Var};
use crate::blocks::{Ctx, LayerNorm, Linear, Mlp};
use crate::error::{Error, Result};
use crate::params::{normal, uniform, ParamId, ParamStore};
use crate::ssm::{ScanMode, SsmParams};
use crate::tensor::{Real, Tensor};

pub const CLASSES: [&str; 8] = [
    "building", "tree", "pole", "road", "sign", "vehicle", "terrain", "fence",
];
pub const MIN_POINTS: usize = 8;
pub const MAX_POINTS: usize = 256;
pub const MAX_INSTANCES: usize = 64;
pub const CELL_SIDE: f64 = 30.0;

const POINT_SCALE: f64 = 5.0;
const POINT_FEAT: usize = 64;
const CLASS_FEAT: usize = 32;
const COLOR_FEAT: usize = 16;
const CENTROID_FEAT: usize = 16;

pub fn class_index(label: &str) -> Option<usize> {
    CLASSES.iter().position(|&c| c == label)
}

/// One segmented object. Coordinates are cell-local (origin at the cell
/// center), meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub instance_id: u32,
    pub class_label: String,
    pub color_rgb: [f64; 3],
    pub centroid: [f64; 3],
    pub points: Vec<[f64; 3]>,
}

impl ObjectInstance {
    /// Builds an instance with its centroid set to the mean of `points`.
    pub fn from_points(
        instance_id: u32,
        class_label: &str,
        color_rgb: [f64; 3],
        points: Vec<[f64; 3]>,
    ) -> Self {
        let n = points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        Self {
            instance_id,
            class_label: class_label.to_string(),
            color_rgb,
            centroid: c.map(|v| v / n),
            points,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submap {
    pub cell_id: u32,
    /// World frame, meters.
    pub center_xy: [f64; 2],
    pub instances: Vec<ObjectInstance>,
}

fn cmp_point(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Sorted by centroid `x`, then `y`, then `z`, then id.
pub fn order_instances(instances: &[ObjectInstance]) -> Vec<&ObjectInstance> {
    let mut v: Vec<&ObjectInstance> = instances.iter().collect();
    v.sort_by(|a, b| cmp_point(&a.centroid, &b.centroid).then(a.instance_id.cmp(&b.instance_id)));
    v
}

/// Distinct points in sorted order, stride-subsampled to at most [`MAX_POINTS`].
pub fn canonical_points(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut p = points.to_vec();
    p.sort_by(cmp_point);
    p.dedup_by(|a, b| cmp_point(a, b) == Ordering::Equal);
    if p.len() > MAX_POINTS {
        let n = p.len();
        p = (0..MAX_POINTS).map(|i| p[i * n / MAX_POINTS]).collect();
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub pcm_blocks: usize,
    pub out_dim: usize,
    pub scan: ScanMode,
}

/// Stand-in for a point backbone: shared per-point MLP, max-pool, and
/// embeddings of class, color and centroid.
#[derive(Clone, Debug)]
pub struct InstanceEncoder {
    pub point1: Linear,
    pub point2: Linear,
    pub class_table: ParamId,
    pub color: Linear,
    pub centroid: Linear,
    pub proj: Mlp,
}

/// Fixed inputs of a batch of instances.
#[derive(Clone, Debug)]
pub struct InstanceBatch<F> {
    /// `[Σpoints × 3]`, centroid-relative and scaled.
    pub points: Tensor<F>,
    pub point_segs: Segments,
    pub classes: Vec<usize>,
    /// `[instances × 3]`
    pub colors: Tensor<F>,
    /// `[instances × 3]`, divided by half the cell side.
    pub centroids: Tensor<F>,
    /// One segment per submap, instances in canonical order.
    pub instance_segs: Segments,
}

impl<F: Real> InstanceBatch<F> {
    pub fn build(submaps: &[&Submap]) -> Result<Self> {
        let mut pts = Vec::new();
        let mut point_lens = Vec::new();
        let mut classes = Vec::new();
        let mut colors = Vec::new();
        let mut cents = Vec::new();
        let mut inst_lens = Vec::new();
        for s in submaps {
            if s.instances.is_empty() {
                return Err(Error::EmptySubmap(s.cell_id));
            }
            inst_lens.push(s.instances.len());
            for inst in order_instances(&s.instances) {
                let p = canonical_points(&inst.points);
                if p.len() < MIN_POINTS {
                    return Err(Error::DegenerateInstance {
                        id: inst.instance_id,
                        points: p.len(),
                        min: MIN_POINTS,
                    });
                }
                point_lens.push(p.len());
                for q in &p {
                    for k in 0..3 {
                        pts.push(F::lit((q[k] - inst.centroid[k]) / POINT_SCALE));
                    }
                }
                classes.push(class_index(&inst.class_label).ok_or_else(|| {
                    Error::Config(format!("unknown class {}", inst.class_label))
                })?);
                colors.extend(inst.color_rgb.iter().map(|&c| F::lit(c)));
                cents.extend(inst.centroid.iter().map(|&c| F::lit(c / (CELL_SIDE / 2.0))));
            }
        }
        let n_pts = point_lens.iter().sum();
        let n_inst = classes.len();
        Ok(Self {
            points: Tensor::new(&[n_pts, 3], pts)?,
            point_segs: Segments::from_lens(&point_lens)?,
            classes,
            colors: Tensor::new(&[n_inst, 3], colors)?,
            centroids: Tensor::new(&[n_inst, 3], cents)?,
            instance_segs: Segments::from_lens(&inst_lens)?,
        })
    }
}

impl InstanceEncoder {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cat = POINT_FEAT + CLASS_FEAT + COLOR_FEAT + CENTROID_FEAT;
        Ok(Self {
            point1: Linear::new(store, &format!("{name}.point1"), 3, POINT_FEAT, true, rng)?,
            point2: Linear::new(store, &format!("{name}.point2"), POINT_FEAT, POINT_FEAT, true, rng)?,
            class_table: store.add(
                format!("{name}.class_table"),
                normal(rng, &[CLASSES.len(), CLASS_FEAT], 1.0),
            )?,
            color: Linear::new(store, &format!("{name}.color"), 3, COLOR_FEAT, true, rng)?,
            centroid: Linear::new(store, &format!("{name}.centroid"), 3, CENTROID_FEAT, true, rng)?,
            proj: Mlp::new(store, &format!("{name}.proj"), cat, d_model, d_model, rng)?,
        })
    }

    /// Point-feature part only: `[instances × POINT_FEAT]`.
    pub fn point_features<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        batch: &InstanceBatch<F>,
    ) -> Result<Var<'a, F>> {
        let p = ctx.constant(batch.points.clone());
        let h = self.point1.forward(ctx, p)?.silu();
        let h = self.point2.forward(ctx, h)?.silu();
        h.max_pool(&batch.point_segs)
    }

    /// `[instances × d_model]` in canonical order.
    pub fn forward<'a, F: Real>(&self, ctx: &Ctx<'a, F>, batch: &InstanceBatch<F>) -> Result<Var<'a, F>> {
        let pf = self.point_features(ctx, batch)?;
        let cls = ctx.p(self.class_table).gather_rows(&batch.classes)?;
        let col = self.color.forward(ctx, ctx.constant(batch.colors.clone()))?.silu();
        let cen = self.centroid.forward(ctx, ctx.constant(batch.centroids.clone()))?;
        let cat = Var::concat_cols(&[pf, cls, col, cen])?;
        self.proj.forward(ctx, cat)
    }
}

/// `M = W_m LN(x)`, `G1 = silu(SSM(silu(conv(M))))`, `G2 = silu(W_2 M)`,
/// `out = W_o(G1 + G2) + x`.
#[derive(Clone, Debug)]
pub struct PcmBlock {
    pub norm: LayerNorm,
    pub lin_m: Linear,
    pub conv: ParamId,
    pub ssm: SsmParams,
    pub lin_g2: Linear,
    pub lin_out: Linear,
}

impl PcmBlock {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &CloudConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            lin_m: Linear::new(store, &format!("{name}.lin_m"), d, d, true, rng)?,
            conv: store.add(
                format!("{name}.conv"),
                uniform(rng, &[cfg.conv_width, d], 1.0 / (cfg.conv_width as f64).sqrt()),
            )?,
            ssm: SsmParams::new(store, &format!("{name}.ssm"), d, cfg.d_state, rng)?,
            lin_g2: Linear::new(store, &format!("{name}.lin_g2"), d, d, true, rng)?,
            lin_out: Linear::new(store, &format!("{name}.lin_out"), d, d, true, rng)?,
        })
    }

    pub fn forward<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        x: Var<'a, F>,
        segs: &Segments,
        mode: ScanMode,
    ) -> Result<Var<'a, F>> {
        let m = self.lin_m.forward(ctx, self.norm.forward(ctx, x)?)?;
        let u = m.depthwise_conv1d(ctx.p(self.conv), segs, true)?.silu();
        let g1 = self.ssm.forward(ctx, u, segs, mode)?.silu();
        let g2 = self.lin_g2.forward(ctx, m)?.silu();
        self.lin_out.forward(ctx, g1.add(g2)?)?.add(x)
    }
}

pub struct CloudEncoding<'a, F: Real> {
    /// `[submaps × out_dim]`, unit rows.
    pub descriptor: Var<'a, F>,
    /// Instance tokens after the PCM stack: `[Σinstances × d_model]`.
    pub tokens: Var<'a, F>,
    pub segs: Segments,
}

#[derive(Clone, Debug)]
pub struct CloudModel {
    pub cfg: CloudConfig,
    pub encoder: InstanceEncoder,
    pub blocks: Vec<PcmBlock>,
    pub head: Mlp,
}

impl CloudModel {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &CloudConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let encoder = InstanceEncoder::new(store, "cloud.instance", d, rng)?;
        let blocks = (0..cfg.pcm_blocks)
            .map(|i| PcmBlock::new(store, &format!("cloud.pcm{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let head = Mlp::new(store, "cloud.head", d, d, cfg.out_dim, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            blocks,
            head,
        })
    }

    pub fn encode_batch<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        batch: &InstanceBatch<F>,
    ) -> Result<CloudEncoding<'a, F>> {
        let segs = &batch.instance_segs;
        let mut x = self.encoder.forward(ctx, batch)?;
        for b in &self.blocks {
            x = b.forward(ctx, x, segs, self.cfg.scan)?;
        }
        let pooled = x.mean_pool(segs)?;
        let descriptor = self.head.forward(ctx, pooled)?.l2_normalize_rows()?;
        Ok(CloudEncoding {
            descriptor,
            tokens: x,
            segs: segs.clone(),
        })
    }

    pub fn encode<'a, F: Real>(&self, ctx: &Ctx<'a, F>, submaps: &[&Submap]) -> Result<CloudEncoding<'a, F>> {
        self.encode_batch(ctx, &InstanceBatch::build(submaps)?)
    }
}
