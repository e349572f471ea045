//! Attention-side building blocks: affine maps, multi-head attention,
//! Add & Norm and the feed-forward sublayer.

use rand::Rng;

use crate::autograd::{Segments, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Forward-pass context: the tape being recorded and the weights read from.
#[derive(Clone, Copy)]
pub struct Ctx<'a, F: Real> {
    pub tape: &'a Tape<F>,
    pub store: &'a ParamStore<F>,
}

impl<'a, F: Real> Ctx<'a, F> {
    pub fn new(tape: &'a Tape<F>, store: &'a ParamStore<F>) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'a, F> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<F>) -> Var<'a, F> {
        self.tape.constant(t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[d_in, d_out], bound))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward<'a, F: Real>(&self, ctx: &Ctx<'a, F>, x: Var<'a, F>) -> Result<Var<'a, F>> {
        let y = x.matmul(ctx.p(self.w))?;
        match self.b {
            Some(b) => y.add_bias(ctx.p(b)),
            None => Ok(y),
        }
    }

    /// Sets weights and bias to zero.
    pub fn zero<F: Real>(&self, store: &mut ParamStore<F>) {
        store.value_mut(self.w).fill(F::zero());
        if let Some(b) = self.b {
            store.value_mut(b).fill(F::zero());
        }
    }
}

/// Two affine maps with SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, d_hidden, true, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), d_hidden, d_out, true, rng)?,
        })
    }

    pub fn forward<'a, F: Real>(&self, ctx: &Ctx<'a, F>, x: Var<'a, F>) -> Result<Var<'a, F>> {
        let h = self.l1.forward(ctx, x)?.silu();
        self.l2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], F::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<'a, F: Real>(&self, ctx: &Ctx<'a, F>, x: Var<'a, F>) -> Result<Var<'a, F>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), F::lit(LN_EPS))
    }
}

/// Multi-head attention parameters: query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Mha {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl Mha {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            wq: Linear::new(store, &format!("{name}.wq"), d, d, true, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), d, d, true, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), d, d, true, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), d, d, true, rng)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        q_in: Var<'a, F>,
        k_in: Var<'a, F>,
        v_in: Var<'a, F>,
        q_segs: &Segments,
        k_segs: &Segments,
        causal: bool,
    ) -> Result<Var<'a, F>> {
        let q = self.wq.forward(ctx, q_in)?;
        let k = self.wk.forward(ctx, k_in)?;
        let v = self.wv.forward(ctx, v_in)?;
        let a = q.attention(k, v, self.heads, q_segs, k_segs, causal)?;
        self.wo.forward(ctx, a)
    }
}

/// Position-wise feed-forward: `d → 4d → d` with SiLU.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub mlp: Mlp,
}

impl Ffn {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, d, 4 * d, d, rng)?,
        })
    }

    pub fn forward<'a, F: Real>(&self, ctx: &Ctx<'a, F>, x: Var<'a, F>) -> Result<Var<'a, F>> {
        self.mlp.forward(ctx, x)
    }
}

/// Post-norm transformer layer:
/// `Z = LN(x + MHA(x))`, `Z' = LN(Z + FFN(Z))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub mha: Mha,
    pub norm1: LayerNorm,
    pub ffn: Ffn,
    pub norm2: LayerNorm,
    pub causal: bool,
}

impl TransformerLayer {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            mha: Mha::new(store, &format!("{name}.mha"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            ffn: Ffn::new(store, &format!("{name}.ffn"), d, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            causal,
        })
    }

    /// Self-attention form; returns `(Z, Z')`.
    pub fn forward_both<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        x: Var<'a, F>,
        segs: &Segments,
    ) -> Result<(Var<'a, F>, Var<'a, F>)> {
        let a = self.mha.forward(ctx, x, x, x, segs, segs, self.causal)?;
        let z = self.norm1.forward(ctx, x.add(a)?)?;
        let f = self.ffn.forward(ctx, z)?;
        let zp = self.norm2.forward(ctx, z.add(f)?)?;
        Ok((z, zp))
    }

    pub fn forward<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        x: Var<'a, F>,
        segs: &Segments,
    ) -> Result<Var<'a, F>> {
        Ok(self.forward_both(ctx, x, segs)?.1)
    }

    /// Cross form: `q` rows attend to `kv` rows segment by segment.
    pub fn forward_cross<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        q: Var<'a, F>,
        kv: Var<'a, F>,
        q_segs: &Segments,
        kv_segs: &Segments,
    ) -> Result<Var<'a, F>> {
        let a = self.mha.forward(ctx, q, kv, kv, q_segs, kv_segs, false)?;
        let z = self.norm1.forward(ctx, q.add(a)?)?;
        let f = self.ffn.forward(ctx, z)?;
        self.norm2.forward(ctx, z.add(f)?)
    }

    /// Zeroes the attention and FFN output projections.
    pub fn zero_outputs<F: Real>(&self, store: &mut ParamStore<F>) {
        self.mha.wo.zero(store);
        self.ffn.mlp.l2.zero(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        uniform(rng, shape, 1.0)
    }

    #[test]
    fn single_key_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mha = Mha::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
        let q = rand_tensor(&mut rng, &[3, 8]);
        let kv = rand_tensor(&mut rng, &[1, 8]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let out = mha
            .forward(
                &ctx,
                ctx.constant(q),
                ctx.constant(kv.clone()),
                ctx.constant(kv.clone()),
                &Segments::single(3),
                &Segments::single(1),
                false,
            )
            .unwrap()
            .value();
        let v = mha.wv.forward(&ctx, ctx.constant(kv)).unwrap();
        let expect = mha.wo.forward(&ctx, v).unwrap().value();
        for i in 0..3 {
            for j in 0..8 {
                assert!((out.at(i, j) - expect.at(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_context_is_error() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        // zero-row tensors cannot exist, so an empty context is only reachable
        // through segment bookkeeping
        assert!(Segments::from_lens(&[0]).is_err());
        assert!(q.attention(q, q, 3, &Segments::single(2), &Segments::single(2), false).is_err());
    }

    #[test]
    fn transformer_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let layer = TransformerLayer::new(&mut store, "t", 8, 2, false, &mut rng).unwrap();
        for l in [1, 5, 17] {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let x = ctx.constant(uniform(&mut rng, &[l, 8], 1.0));
            let y = layer.forward(&ctx, x, &Segments::single(l)).unwrap();
            assert_eq!(y.shape(), vec![l, 8]);
        }
    }

    #[test]
    fn zeroed_sublayers_leave_double_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let layer = TransformerLayer::new(&mut store, "t", 8, 2, false, &mut rng).unwrap();
        layer.zero_outputs(&mut store);
        let x = rand_tensor(&mut rng, &[4, 8]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let y = layer.forward(&ctx, ctx.constant(x.clone()), &Segments::single(4)).unwrap();
        let n1 = layer.norm1.forward(&ctx, ctx.constant(x)).unwrap();
        let n2 = layer.norm2.forward(&ctx, n1).unwrap();
        assert!(y.value().max_abs_diff(&n2.value()) < 1e-12);
    }

    #[test]
    fn identical_keys_ignore_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let mha = Mha::new(&mut store, "mha", 8, 4, &mut rng).unwrap();
        let q = rand_tensor(&mut rng, &[2, 8]);
        let row = rand_tensor(&mut rng, &[1, 8]);
        let kv = Tensor::new(&[3, 8], row.data().repeat(3)).unwrap();
        let run = |k: &Tensor<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let out = mha
                .forward(
                    &ctx,
                    ctx.constant(q.clone()),
                    ctx.constant(k.clone()),
                    ctx.constant(k.clone()),
                    &Segments::single(2),
                    &Segments::single(3),
                    false,
                )
                .unwrap()
                .value();
            (*out).clone()
        };
        let a = run(&kv);
        let rev = Tensor::new(&[3, 8], {
            let mut rows: Vec<Vec<f64>> = (0..3).map(|i| kv.row(i).to_vec()).collect();
            rows.reverse();
            rows.concat()
        })
        .unwrap();
        assert_eq!(a, run(&rev));
    }
}
