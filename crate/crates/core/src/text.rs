//! Text branch: tokenizer, hashed token embedder, TAM layers and the
//! hint-aggregation stack producing an L2-normalized query descriptor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Segments, Var};
use crate::blocks::{Ctx, Linear, Mlp, TransformerLayer};
use crate::error::{Error, Result};
use crate::params::{uniform, ParamId, ParamStore};
use crate::ssm::{ScanMode, SsmParams};
use crate::tensor::{Real, Tensor};

/// Rows of the fixed embedding table.
pub const EMBED_ROWS: u64 = 16384;
/// Width of the fixed embedding table.
pub const EMBED_DIM: usize = 64;
pub const MAX_HINTS: usize = 12;

/// A place description: a set of hint sentences about one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextQuery {
    pub query_id: u32,
    pub cell_id: u32,
    /// World frame, meters.
    pub target_xy: [f64; 2],
    pub hints: Vec<String>,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(hint: &str) -> Vec<String> {
    hint.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Table row a token maps to.
pub fn token_row(token: &str) -> u64 {
    fnv1a(token.as_bytes()) % EMBED_ROWS
}

/// Entries of the fixed table, generated on demand; unit variance.
pub fn table_row(row: u64) -> [f64; EMBED_DIM] {
    let mut out = [0.0; EMBED_DIM];
    for (j, v) in out.iter_mut().enumerate() {
        let bits = splitmix(row * EMBED_DIM as u64 + j as u64) >> 11;
        let u = bits as f64 / (1u64 << 53) as f64;
        *v = (2.0 * u - 1.0) * 3f64.sqrt();
    }
    out
}

/// Tokens of a query's non-empty hints, in canonical (sorted) hint order.
pub fn prepare_hints(q: &TextQuery) -> Result<Vec<Vec<String>>> {
    let mut hints: Vec<&String> = q.hints.iter().collect();
    hints.sort();
    let toks: Vec<Vec<String>> = hints
        .into_iter()
        .map(|h| tokenize(h))
        .filter(|t| !t.is_empty())
        .collect();
    if toks.is_empty() {
        return Err(Error::EmptyQuery(q.query_id.to_string()));
    }
    Ok(toks)
}

/// Fixed embeddings of packed hints: `[Σtokens × EMBED_DIM]` plus token
/// segments (one per hint) and hint segments (one per query).
#[derive(Clone, Debug)]
pub struct TokenBatch<F> {
    pub embed: Tensor<F>,
    pub token_segs: Segments,
    pub hint_segs: Segments,
}

pub fn embed_queries<F: Real>(queries: &[&TextQuery]) -> Result<TokenBatch<F>> {
    let mut data = Vec::new();
    let mut tok_lens = Vec::new();
    let mut hint_lens = Vec::new();
    for q in queries {
        let hints = prepare_hints(q)?;
        hint_lens.push(hints.len());
        for h in hints {
            tok_lens.push(h.len());
            for t in &h {
                data.extend(table_row(token_row(t)).iter().map(|&v| F::lit(v)));
            }
        }
    }
    let n: usize = tok_lens.iter().sum();
    Ok(TokenBatch {
        embed: Tensor::new(&[n, EMBED_DIM], data)?,
        token_segs: Segments::from_lens(&tok_lens)?,
        hint_segs: Segments::from_lens(&hint_lens)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Combiner {
    /// `Y = (H + G1) + G2`
    #[default]
    Sum,
    /// `Y = (H + G1) ⊙ G2`
    Gate,
}

impl std::str::FromStr for Combiner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "gate" => Ok(Self::Gate),
            other => Err(Error::Config(format!("unknown combiner {other}"))),
        }
    }
}

impl std::fmt::Display for Combiner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Gate => "gate",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub heads: usize,
    pub conv_width: usize,
    pub tam_layers: usize,
    pub out_dim: usize,
    pub combiner: Combiner,
    /// Word-level attention sublayer; off means `Z = Z' = x`.
    pub tam_attention: bool,
    /// Selective-SSM branch; off means `G1 = 0`.
    pub tam_mamba: bool,
    /// Hint-aggregation attention; off means plain mean over hints.
    pub aggregate_attention: bool,
    pub scan: ScanMode,
}

/// One TAM layer over the tokens of each hint.
#[derive(Clone, Debug)]
pub struct TamLayer {
    pub attn: TransformerLayer,
    pub mlp_a: Mlp,
    pub mlp_b: Mlp,
    pub lin_h: Linear,
    pub lin_g1: Linear,
    pub lin_g2: Linear,
    pub conv: ParamId,
    pub ssm: SsmParams,
    pub combiner: Combiner,
    pub use_attention: bool,
    pub use_mamba: bool,
}

impl TamLayer {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &TextConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            attn: TransformerLayer::new(store, &format!("{name}.attn"), d, cfg.heads, true, rng)?,
            mlp_a: Mlp::new(store, &format!("{name}.mlp_a"), d, d, d, rng)?,
            mlp_b: Mlp::new(store, &format!("{name}.mlp_b"), d, d, d, rng)?,
            lin_h: Linear::new(store, &format!("{name}.lin_h"), d, d, true, rng)?,
            lin_g1: Linear::new(store, &format!("{name}.lin_g1"), d, d, true, rng)?,
            lin_g2: Linear::new(store, &format!("{name}.lin_g2"), d, d, true, rng)?,
            conv: store.add(
                format!("{name}.conv"),
                uniform(rng, &[cfg.conv_width, d], 1.0 / (cfg.conv_width as f64).sqrt()),
            )?,
            ssm: SsmParams::new(store, &format!("{name}.ssm"), d, cfg.d_state, rng)?,
            combiner: cfg.combiner,
            use_attention: cfg.tam_attention,
            use_mamba: cfg.tam_mamba,
        })
    }

    pub fn forward<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        x: Var<'a, F>,
        segs: &Segments,
        mode: ScanMode,
    ) -> Result<Var<'a, F>> {
        let (z, zp) = if self.use_attention {
            self.attn.forward_both(ctx, x, segs)?
        } else {
            (x, x)
        };
        let a = self.mlp_a.forward(ctx, z)?;
        let h = self
            .lin_h
            .forward(ctx, a)?
            .depthwise_conv1d(ctx.p(self.conv), segs, true)?
            .silu();
        let hg = if self.use_mamba {
            let g1 = self
                .ssm
                .forward(ctx, self.lin_g1.forward(ctx, a)?, segs, mode)?
                .silu();
            h.add(g1)?
        } else {
            h
        };
        let g2 = self.lin_g2.forward(ctx, self.mlp_b.forward(ctx, zp)?)?.silu();
        match self.combiner {
            Combiner::Sum => hg.add(g2),
            Combiner::Gate => hg.mul(g2),
        }
    }

    /// Zeroes the three branch output projections.
    pub fn zero_branches<F: Real>(&self, store: &mut ParamStore<F>) {
        self.lin_h.zero(store);
        self.lin_g1.zero(store);
        self.lin_g2.zero(store);
    }
}

/// Output of [`TextModel::encode`].
pub struct TextEncoding<'a, F: Real> {
    /// `[queries × out_dim]`, unit rows.
    pub descriptor: Var<'a, F>,
    /// Per-hint vectors after aggregation, before pooling: `[Σhints × d_model]`.
    pub hint_tokens: Var<'a, F>,
    pub hint_segs: Segments,
}

#[derive(Clone, Debug)]
pub struct TextModel {
    pub cfg: TextConfig,
    pub adapter: Linear,
    pub tam: Vec<TamLayer>,
    pub aggregate: TransformerLayer,
    pub head: Mlp,
}

impl TextModel {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &TextConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let adapter = Linear::new(store, "text.adapter", EMBED_DIM, d, true, rng)?;
        let tam = (0..cfg.tam_layers)
            .map(|i| TamLayer::new(store, &format!("text.tam{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let aggregate = TransformerLayer::new(store, "text.aggregate", d, cfg.heads, false, rng)?;
        let head = Mlp::new(store, "text.head", d, d, cfg.out_dim, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            adapter,
            tam,
            aggregate,
            head,
        })
    }

    /// Word-level stack: adapter then the TAM layers, per hint.
    pub fn token_features<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        embed: Var<'a, F>,
        token_segs: &Segments,
    ) -> Result<Var<'a, F>> {
        let mut x = self.adapter.forward(ctx, embed)?;
        for layer in &self.tam {
            x = layer.forward(ctx, x, token_segs, self.cfg.scan)?;
        }
        Ok(x)
    }

    pub fn encode_batch<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        batch: &TokenBatch<F>,
    ) -> Result<TextEncoding<'a, F>> {
        let words = self.token_features(ctx, ctx.constant(batch.embed.clone()), &batch.token_segs)?;
        let hints = words.mean_pool(&batch.token_segs)?;
        let hint_tokens = if self.cfg.aggregate_attention {
            self.aggregate.forward(ctx, hints, &batch.hint_segs)?
        } else {
            hints
        };
        let pooled = hint_tokens.mean_pool(&batch.hint_segs)?;
        let descriptor = self.head.forward(ctx, pooled)?.l2_normalize_rows()?;
        Ok(TextEncoding {
            descriptor,
            hint_tokens,
            hint_segs: batch.hint_segs.clone(),
        })
    }

    pub fn encode<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        queries: &[&TextQuery],
    ) -> Result<TextEncoding<'a, F>> {
        self.encode_batch(ctx, &embed_queries(queries)?)
    }
}
