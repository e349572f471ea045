//! Central-difference gradient oracle and the per-block verification suite.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Segments, Tape, Var};
use crate::blocks::{Ctx, Ffn, LayerNorm, Linear, Mha, TransformerLayer};
use crate::cloud::{CloudConfig, PcmBlock};
use crate::error::{Error, Result};
use crate::fine::{CcamMode, FineConfig, FineModel};
use crate::loss::{contrastive_loss, fine_loss, ContrastiveForm};
use crate::params::{uniform, ParamId, ParamStore};
use crate::ssm::{MambaBlock, ScanMode, SsmParams};
use crate::tensor::Tensor;
use crate::text::{Combiner, TamLayer, TextConfig};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

/// A scalar function of the parameters in a store.
pub trait Objective: for<'a> Fn(&Ctx<'a, f64>) -> Result<Var<'a, f64>> {}
impl<T: for<'a> Fn(&Ctx<'a, f64>) -> Result<Var<'a, f64>>> Objective for T {}

fn eval(store: &ParamStore<f64>, f: &impl Objective) -> Result<f64> {
    let tape = Tape::new();
    let out = f(&Ctx::new(&tape, store))?;
    let v = out.value();
    if v.len() != 1 {
        return Err(Error::Rank(format!("objective must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Max relative error between reverse-mode gradients of `f` and central
/// differences `(f(p + h·e) − f(p − h·e)) / 2h`, over the coordinates of `ids`.
pub fn grad_check_params(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    f: &impl Objective,
    h: f64,
) -> Result<f64> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Param(format!("finite-difference step must be positive, got {h}")));
    }
    let tape = Tape::new();
    let out = f(&Ctx::new(&tape, store))?;
    if out.value().len() != 1 {
        return Err(Error::Rank(format!("objective must be scalar, got {:?}", out.shape())));
    }
    let grads = tape.gradients(out, Tensor::full(out.value().shape(), 1.0))?;
    let mut probe = store.clone();
    let mut worst = 0f64;
    for &id in ids {
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe, f)?;
            probe.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe, f)?;
            probe.value_mut(id).data_mut()[k] = orig;
            worst = worst.max(relative_error(analytic.data()[k], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// [`grad_check_params`] over every parameter in the store.
pub fn grad_check(store: &ParamStore<f64>, f: &impl Objective, h: f64) -> Result<f64> {
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, &ids, f, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub block: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Contracts an output with a fixed random weighting so any shape becomes a scalar.
fn probe<'a>(y: Var<'a, f64>, w: &Tensor<f64>) -> Result<Var<'a, f64>> {
    Ok(y.mul(y.tape().constant(w.clone()))?.sum())
}

const D: usize = 8;
const HEADS: usize = 2;

fn text_cfg() -> TextConfig {
    TextConfig {
        d_model: D,
        d_state: 4,
        heads: HEADS,
        conv_width: 4,
        tam_layers: 1,
        out_dim: D,
        combiner: Combiner::Sum,
        tam_attention: true,
        tam_mamba: true,
        aggregate_attention: true,
        scan: ScanMode::Parallel,
    }
}

fn cloud_cfg() -> CloudConfig {
    CloudConfig {
        d_model: D,
        d_state: 4,
        conv_width: 4,
        pcm_blocks: 1,
        out_dim: D,
        scan: ScanMode::Parallel,
    }
}

fn fine_cfg() -> FineConfig {
    FineConfig {
        d_model: D,
        d_state: 4,
        heads: HEADS,
        conv_width: 4,
        stages: 2,
        mode: CcamMode::Literal,
        gated: true,
        scan: ScanMode::Parallel,
    }
}

/// One block's check at one seed.
pub fn check_block(block: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::<f64>::new();
    macro_rules! input {
        ($name:expr, $l:expr, $d:expr) => {
            s.add($name, uniform(&mut rng, &[$l, $d], 1.0))?
        };
    }
    match block {
        "linear" => {
            let x = input!("x", 3, D);
            let lin = Linear::new(&mut s, "lin", D, 5, true, &mut rng)?;
            let w = uniform(&mut rng, &[3, 5], 1.0);
            grad_check(&s, &|c: &Ctx<'_, f64>| probe(lin.forward(c, c.p(x))?, &w), STEP)
        }
        "layer_norm" => {
            let x = input!("x", 3, D);
            let ln = LayerNorm::new(&mut s, "ln", D)?;
            s.set(ln.gamma, uniform(&mut rng, &[D], 2.0))?;
            s.set(ln.beta, uniform(&mut rng, &[D], 1.0))?;
            let w = uniform(&mut rng, &[3, D], 1.0);
            grad_check(&s, &|c: &Ctx<'_, f64>| probe(ln.forward(c, c.p(x))?, &w), STEP)
        }
        "softmax" => {
            let x = input!("x", 3, 5);
            let w = uniform(&mut rng, &[3, 5], 1.0);
            grad_check(&s, &|c: &Ctx<'_, f64>| probe(c.p(x).softmax_rows(), &w), STEP)
        }
        "mha" => {
            let q = input!("q", 3, D);
            let kv = input!("kv", 4, D);
            let mha = Mha::new(&mut s, "mha", D, HEADS, &mut rng)?;
            let w = uniform(&mut rng, &[3, D], 1.0);
            grad_check(
                &s,
                &|c: &Ctx<'_, f64>| {
                    let y = mha.forward(c, c.p(q), c.p(kv), c.p(kv), &Segments::single(3), &Segments::single(4), false)?;
                    probe(y, &w)
                },
                STEP,
            )
        }
        "causal_attention" => {
            let x = input!("x", 5, D);
            let mha = Mha::new(&mut s, "mha", D, HEADS, &mut rng)?;
            let w = uniform(&mut rng, &[5, D], 1.0);
            let segs = Segments::from_lens(&[2, 3])?;
            grad_check(
                &s,
                &|c: &Ctx<'_, f64>| probe(mha.forward(c, c.p(x), c.p(x), c.p(x), &segs, &segs, true)?, &w),
                STEP,
            )
        }
        "ffn" => {
            let x = input!("x", 3, D);
            let ffn = Ffn::new(&mut s, "ffn", D, &mut rng)?;
            let w = uniform(&mut rng, &[3, D], 1.0);
            grad_check(&s, &|c: &Ctx<'_, f64>| probe(ffn.forward(c, c.p(x))?, &w), STEP)
        }
        "transformer_layer" => {
            let x = input!("x", 4, D);
            let tl = TransformerLayer::new(&mut s, "tl", D, HEADS, false, &mut rng)?;
            let w = uniform(&mut rng, &[4, D], 1.0);
            grad_check(&s, &|c: &Ctx<'_, f64>| probe(tl.forward(c, c.p(x), &Segments::single(4))?, &w), STEP)
        }
        "depthwise_conv" => {
            let x = input!("x", 6, D);
            let k = input!("k", 4, D);
            let w = uniform(&mut rng, &[6, D], 1.0);
            let segs = Segments::from_lens(&[2, 4])?;
            grad_check(
                &s,
                &|c: &Ctx<'_, f64>| probe(c.p(x).depthwise_conv1d(c.p(k), &segs, true)?, &w),
                STEP,
            )
        }
        "selective_scan" => {
            let x = input!("x", 8, D);
            let ssm = SsmParams::new(&mut s, "ssm", D, 4, &mut rng)?;
            // larger steps than the init range exercise the decay terms
            let bias = uniform(&mut rng, &[D], 1.0);
            s.set(ssm.delta_proj.b.unwrap(), bias)?;
            grad_check(
                &s,
                &|c: &Ctx<'_, f64>| Ok(ssm.forward(c, c.p(x), &Segments::single(8), ScanMode::Parallel)?.sum()),
                STEP,
            )
        }
        "mamba_block" => {
            let x = input!("x", 6, D);
            let mb = MambaBlock::new(&mut s, "mb", D, 4, 4, true, &mut rng)?;
            let w = uniform(&mut rng, &[6, D], 1.0);
            grad_check(
                &s,
                &|c: &Ctx<'_, f64>| probe(mb.forward(c, c.p(x), &Segments::single(6), ScanMode::Sequential)?, &w),
                STEP,
            )
        }
        "tam_layer" => {
            let x = input!("x", 5, D);
            let tam = TamLayer::new(&mut s, "tam", &text_cfg(), &mut rng)?;
            let w = uniform(&mut rng, &[5, D], 1.0);
            grad_check(
                &s,
                &|c: &Ctx<'_, f64>| probe(tam.forward(c, c.p(x), &Segments::single(5), ScanMode::Parallel)?, &w),
                STEP,
            )
        }
        "pcm_block" => {
            let x = input!("x", 6, D);
            let pcm = PcmBlock::new(&mut s, "pcm", &cloud_cfg(), &mut rng)?;
            let w = uniform(&mut rng, &[6, D], 1.0);
            grad_check(
                &s,
                &|c: &Ctx<'_, f64>| probe(pcm.forward(c, c.p(x), &Segments::single(6), ScanMode::Parallel)?, &w),
                STEP,
            )
        }
        "ccam" => {
            let cloud = input!("cloud", 4, D);
            let text = input!("text", 3, D);
            let mut cfg = fine_cfg();
            if seed % 2 == 1 {
                cfg.mode = CcamMode::Reinject;
            }
            let m = FineModel::new(&mut s, &cfg, &mut rng)?;
            let w = uniform(&mut rng, &[1, 2], 1.0);
            grad_check(
                &s,
                &|c: &Ctx<'_, f64>| {
                    let y = m.forward(c, c.p(cloud), &Segments::single(4), c.p(text), &Segments::single(3))?;
                    probe(y, &w)
                },
                STEP,
            )
        }
        "contrastive_loss" => {
            let p = input!("p", 4, D);
            let t = input!("t", 4, D);
            let form = if seed % 2 == 0 {
                ContrastiveForm::Symmetric
            } else {
                ContrastiveForm::Literal
            };
            grad_check(
                &s,
                &|c: &Ctx<'_, f64>| {
                    let pn = c.p(p).l2_normalize_rows()?;
                    let tn = c.p(t).l2_normalize_rows()?;
                    contrastive_loss(pn, tn, 0.5, form)
                },
                STEP,
            )
        }
        "fine_loss" => {
            let pred = input!("pred", 4, 2);
            let gt = Tensor::from_f64(&[4, 2], &[3.0, -2.0, 1.5, 2.5, -3.0, 0.5, 2.0, 2.0])?;
            let squared = seed % 2 == 1;
            grad_check(
                &s,
                &|c: &Ctx<'_, f64>| fine_loss(c.p(pred), c.constant(gt.clone()), squared),
                STEP,
            )
        }
        other => Err(Error::Config(format!("unknown block {other}"))),
    }
}

pub const BLOCKS: [&str; 16] = [
    "linear",
    "layer_norm",
    "softmax",
    "mha",
    "causal_attention",
    "ffn",
    "transformer_layer",
    "depthwise_conv",
    "selective_scan",
    "mamba_block",
    "tam_layer",
    "pcm_block",
    "ccam",
    "contrastive_loss",
    "fine_loss",
    "l2_normalize",
];

fn check_any(block: &str, seed: u64) -> Result<f64> {
    if block == "l2_normalize" {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::<f64>::new();
        let x = s.add("x", uniform(&mut rng, &[3, 5], 1.0))?;
        let w = uniform(&mut rng, &[3, 5], 1.0);
        return grad_check(&s, &|c: &Ctx<'_, f64>| probe(c.p(x).l2_normalize_rows()?, &w), STEP);
    }
    check_block(block, seed)
}

/// Runs every block over `seeds` seeds.
pub fn run_suite(seeds: usize) -> Result<(Vec<BlockReport>, f64)> {
    let start = Instant::now();
    let mut out = Vec::new();
    for block in BLOCKS {
        let mut worst = 0f64;
        for seed in 0..seeds as u64 {
            worst = worst.max(check_any(block, 1000 + seed)?);
        }
        out.push(BlockReport {
            block,
            seeds,
            max_rel_err: worst,
        });
    }
    Ok((out, start.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::with_flipped_backward;

    #[test]
    fn linear_functional_is_exact() {
        let mut s = ParamStore::<f64>::new();
        let p = s.add("p", Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let e = grad_check(&s, &|c: &Ctx<'_, f64>| Ok(c.p(p).sum()), STEP).unwrap();
        assert!(e < 1e-10);
    }

    #[test]
    fn step_must_be_positive() {
        let mut s = ParamStore::<f64>::new();
        let p = s.add("p", Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(
            grad_check(&s, &|c: &Ctx<'_, f64>| Ok(c.p(p).sum()), 0.0),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn scan_and_tam_pass() {
        assert!(check_block("selective_scan", 1).unwrap() < TOLERANCE);
        assert!(check_block("tam_layer", 2).unwrap() < TOLERANCE);
    }

    #[test]
    fn flipped_rule_is_caught() {
        let e = with_flipped_backward("selective_scan", || check_block("selective_scan", 1)).unwrap();
        assert!(e > TOLERANCE);
        let e = with_flipped_backward("layer_norm", || check_block("layer_norm", 1)).unwrap();
        assert!(e > TOLERANCE);
    }
}
