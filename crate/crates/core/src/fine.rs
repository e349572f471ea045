//! Fine localization: cross-attention fusion of text and cloud tokens, a
//! cascade of Mamba plus attention stages, and an offset regression head.

use rand::Rng;

use crate::autograd::{Segments, Var};
use crate::blocks::{Ctx, LayerNorm, Linear, Mha, TransformerLayer};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::ssm::{MambaBlock, ScanMode};
use crate::tensor::Real;

/// Predictions are clamped to this many meters per axis.
pub const GUARD: f64 = 30.0;

/// Where each cascade stage draws keys and values from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CcamMode {
    /// Queries, keys and values all come from the stage's Mamba output.
    #[default]
    Literal,
    /// Keys and values are the text tokens at every stage.
    Reinject,
}

impl std::str::FromStr for CcamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "reinject" => Ok(Self::Reinject),
            other => Err(Error::Config(format!("unknown ccam mode {other}"))),
        }
    }
}

impl std::fmt::Display for CcamMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::Reinject => "reinject",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub heads: usize,
    pub conv_width: usize,
    pub stages: usize,
    pub mode: CcamMode,
    pub gated: bool,
    pub scan: ScanMode,
}

/// `m = Mamba(h)`, then `h' = LN(m + Attn(Q'=m, K'V' = m or text))`.
#[derive(Clone, Debug)]
pub struct CcamStage {
    pub mamba: MambaBlock,
    pub attn: Mha,
    pub norm: LayerNorm,
}

impl CcamStage {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &FineConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            mamba: MambaBlock::new(store, &format!("{name}.mamba"), d, cfg.d_state, cfg.conv_width, cfg.gated, rng)?,
            attn: Mha::new(store, &format!("{name}.attn"), d, cfg.heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        h: Var<'a, F>,
        h_segs: &Segments,
        text: Var<'a, F>,
        text_segs: &Segments,
        mode: CcamMode,
        scan: ScanMode,
    ) -> Result<Var<'a, F>> {
        let m = self.mamba.forward(ctx, h, h_segs, scan)?;
        let a = match mode {
            CcamMode::Literal => self.attn.forward(ctx, m, m, m, h_segs, h_segs, false)?,
            CcamMode::Reinject => self.attn.forward(ctx, m, text, text, h_segs, text_segs, false)?,
        };
        self.norm.forward(ctx, m.add(a)?)
    }
}

#[derive(Clone, Debug)]
pub struct FineModel {
    pub cfg: FineConfig,
    pub fuse: TransformerLayer,
    pub stages: Vec<CcamStage>,
    pub head1: Linear,
    pub head2: Linear,
}

impl FineModel {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &FineConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.stages == 0 {
            return Err(Error::Config("ccam needs at least one stage".into()));
        }
        let d = cfg.d_model;
        let fuse = TransformerLayer::new(store, "fine.fuse", d, cfg.heads, false, rng)?;
        let stages = (0..cfg.stages)
            .map(|i| CcamStage::new(store, &format!("fine.stage{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            fuse,
            stages,
            head1: Linear::new(store, "fine.head1", d, d, true, rng)?,
            head2: Linear::new(store, "fine.head2", d, 2, true, rng)?,
        })
    }

    /// Cloud tokens query text tokens: `Z1 = LN(Q + MHA(Q, T, T))`,
    /// `Z1' = LN(Z1 + FFN(Z1))`.
    pub fn fuse_stage0<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        cloud: Var<'a, F>,
        cloud_segs: &Segments,
        text: Var<'a, F>,
        text_segs: &Segments,
    ) -> Result<Var<'a, F>> {
        self.fuse.forward_cross(ctx, cloud, text, cloud_segs, text_segs)
    }

    /// Runs the first `upto` cascade stages.
    #[allow(clippy::too_many_arguments)]
    pub fn cascade<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        z: Var<'a, F>,
        z_segs: &Segments,
        text: Var<'a, F>,
        text_segs: &Segments,
        upto: usize,
    ) -> Result<Var<'a, F>> {
        let mut h = z;
        for s in &self.stages[..upto.min(self.stages.len())] {
            h = s.forward(ctx, h, z_segs, text, text_segs, self.cfg.mode, self.cfg.scan)?;
        }
        Ok(h)
    }

    /// Mean-pool, two affine maps, clamp: `[segments × 2]` cell-local offsets.
    pub fn regress<'a, F: Real>(&self, ctx: &Ctx<'a, F>, h: Var<'a, F>, segs: &Segments) -> Result<Var<'a, F>> {
        let pooled = h.mean_pool(segs)?;
        let hidden = self.head1.forward(ctx, pooled)?.silu();
        Ok(self
            .head2
            .forward(ctx, hidden)?
            .clamp(F::lit(-GUARD), F::lit(GUARD)))
    }

    pub fn forward<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        cloud: Var<'a, F>,
        cloud_segs: &Segments,
        text: Var<'a, F>,
        text_segs: &Segments,
    ) -> Result<Var<'a, F>> {
        if cloud_segs.count() != text_segs.count() {
            return Err(Error::Shape(format!(
                "{} cloud samples but {} text samples",
                cloud_segs.count(),
                text_segs.count()
            )));
        }
        let z = self.fuse_stage0(ctx, cloud, cloud_segs, text, text_segs)?;
        let h = self.cascade(ctx, z, cloud_segs, text, text_segs, self.stages.len())?;
        self.regress(ctx, h, cloud_segs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::uniform;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(stages: usize) -> FineConfig {
        FineConfig {
            d_model: 8,
            d_state: 4,
            heads: 2,
            conv_width: 4,
            stages,
            mode: CcamMode::Literal,
            gated: true,
            scan: ScanMode::Parallel,
        }
    }

    #[test]
    fn constant_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let m = FineModel::new(&mut store, &cfg(2), &mut rng).unwrap();
        store.value_mut(m.head2.w).fill(0.0);
        store.set(m.head2.b.unwrap(), Tensor::vector(vec![1.5, -2.0])).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        for _ in 0..3 {
            let c = ctx.constant(uniform(&mut rng, &[4, 8], 3.0));
            let t = ctx.constant(uniform(&mut rng, &[3, 8], 3.0));
            let y = m.forward(&ctx, c, &Segments::single(4), t, &Segments::single(3)).unwrap();
            assert_eq!(y.value().data(), &[1.5, -2.0]);
        }
    }

    #[test]
    fn zeroed_fusion_is_double_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let m = FineModel::new(&mut store, &cfg(1), &mut rng).unwrap();
        m.fuse.zero_outputs(&mut store);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = uniform::<f64, _>(&mut rng, &[4, 8], 2.0);
        let c = ctx.constant(x.clone());
        let t = ctx.constant(uniform(&mut rng, &[3, 8], 2.0));
        let z = m.fuse_stage0(&ctx, c, &Segments::single(4), t, &Segments::single(3)).unwrap();
        let one = ctx.constant(Tensor::full(&[8], 1.0));
        let zero = ctx.constant(Tensor::zeros(&[8]));
        let want = c
            .layer_norm(one, zero, 1e-5)
            .unwrap()
            .layer_norm(one, zero, 1e-5)
            .unwrap();
        assert!(z.value().max_abs_diff(&want.value()) < 1e-12);
    }

    #[test]
    fn cascade_shapes_and_isolation() {
        for n in 1..=3 {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::<f64>::new();
            let m = FineModel::new(&mut store, &cfg(n), &mut rng).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let z = ctx.constant(uniform(&mut rng, &[4, 8], 1.0));
            let t = ctx.constant(uniform(&mut rng, &[3, 8], 1.0));
            let (zs, ts) = (Segments::single(4), Segments::single(3));
            let h = m.cascade(&ctx, z, &zs, t, &ts, n).unwrap();
            assert_eq!(h.shape(), vec![4, 8]);
            let first = m.cascade(&ctx, z, &zs, t, &ts, 1).unwrap().value();
            // stage 1 output does not read later stages' weights
            let mut s2 = store.clone();
            for st in &m.stages[1..] {
                st.mamba.out_proj.zero(&mut s2);
            }
            let tape2 = Tape::new();
            let ctx2 = Ctx::new(&tape2, &s2);
            let z2 = ctx2.constant((*z.value()).clone());
            let t2 = ctx2.constant((*t.value()).clone());
            let again = m.cascade(&ctx2, z2, &zs, t2, &ts, 1).unwrap().value();
            assert_eq!(first, again);
        }
    }
}
