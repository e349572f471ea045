//! Selective state-space (S6) sequence transform.
//!
//! Per channel `d` and state slot `n`, with input-dependent step `Δₜ` and
//! projections `Bₜ`, `Cₜ`:
//!
//! ```text
//!   Āₜ = exp(Δₜ·A)          B̄ₜ = (Āₜ − 1)/A · Bₜ      (zero-order hold)
//!   hₜ = Āₜ ⊙ hₜ₋₁ + B̄ₜ xₜ
//!   yₜ = ⟨Cₜ, hₜ⟩ + D ⊙ xₜ
//! ```
//!
//! `A = −exp(a_log)` stays strictly negative, so `Ā ∈ (0, 1)`. The
//! recurrence is a first-order linear scan, evaluated either sequentially
//! or with a blocked associative scan over `(a, b)` pairs composed as
//! `(a₂, b₂)∘(a₁, b₁) = (a₂a₁, a₂b₁ + b₂)`. Both share one backward rule.

use rand::Rng;

use crate::autograd::{check_segs, Segments, Var};
use crate::blocks::{Ctx, Linear};
use crate::error::{Error, Result};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Time steps per block in the parallel scan.
pub const SCAN_BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanMode {
    Sequential,
    #[default]
    Parallel,
}

impl std::str::FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel),
            other => Err(Error::Config(format!("unknown scan mode {other}"))),
        }
    }
}

impl std::fmt::Display for ScanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sequential => "sequential",
            Self::Parallel => "parallel",
        })
    }
}

/// Zero-order-hold discretization, elementwise over matching shapes.
pub fn discretize_zoh<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    delta: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if a.shape() != b.shape() || a.shape() != delta.shape() {
        return Err(Error::Shape("discretize_zoh operands differ in shape".into()));
    }
    if delta.data().iter().any(|&d| d <= F::zero()) {
        return Err(Error::Domain("step size must be positive".into()));
    }
    if a.data().iter().any(|&x| x >= F::zero()) {
        return Err(Error::Domain("state decay must be negative".into()));
    }
    let a_bar = a.zip_map(delta, |a, d| (d * a).exp());
    let gain = a.zip_map(delta, |a, d| (d * a).exp_m1() / a);
    let b_bar = gain.zip_map(b, |g, b| g * b);
    Ok((a_bar, b_bar))
}

/// Sequential inclusive scan of `hₜ = aₜ hₜ₋₁ + bₜ` over `len` steps of
/// `width` independent lanes, `h₋₁ = 0`. Arrays are `[len × width]`.
pub fn scan_pairs_sequential<F: Real>(a: &[F], b: &[F], width: usize) -> Vec<F> {
    let mut h = vec![F::zero(); b.len()];
    let len = b.len() / width;
    for t in 0..len {
        let row = t * width..(t + 1) * width;
        if t == 0 {
            h[row.clone()].copy_from_slice(&b[row]);
        } else {
            let (prev, cur) = h.split_at_mut(t * width);
            let prev = &prev[(t - 1) * width..];
            for (((hv, &pv), &av), &bv) in cur[..width]
                .iter_mut()
                .zip(prev)
                .zip(&a[row.clone()])
                .zip(&b[row])
            {
                *hv = av * pv + bv;
            }
        }
    }
    h
}

/// `later ∘ earlier` applied lane-wise into `later`.
fn compose_into<F: Real>(earlier: (&[F], &[F]), later: (&mut [F], &mut [F])) {
    let (a1, b1) = earlier;
    let (a2, b2) = later;
    for i in 0..a2.len() {
        b2[i] = a2[i] * b1[i] + b2[i];
        a2[i] = a2[i] * a1[i];
    }
}

/// Blocked associative scan, equal to [`scan_pairs_sequential`] up to rounding.
///
/// Phase 1 scans each block of [`SCAN_BLOCK`] steps locally; phase 2 runs a
/// Blelloch up-sweep/down-sweep over the block aggregates to get each
/// block's carry-in; phase 3 applies the carries. Partitioning depends only
/// on the length.
pub fn scan_pairs_parallel<F: Real>(a: &[F], b: &[F], width: usize) -> Vec<F> {
    let len = b.len() / width;
    if len == 0 {
        return Vec::new();
    }
    let nb = len.div_ceil(SCAN_BLOCK);
    // phase 1: local inclusive scans, keeping the cumulative decay too
    let mut la = a.to_vec();
    let mut lb = b.to_vec();
    for blk in 0..nb {
        let start = blk * SCAN_BLOCK;
        let end = (start + SCAN_BLOCK).min(len);
        for t in start + 1..end {
            let (prev, cur) = la.split_at_mut(t * width);
            let (pb, cb) = lb.split_at_mut(t * width);
            compose_into(
                (&prev[(t - 1) * width..], &pb[(t - 1) * width..]),
                (&mut cur[..width], &mut cb[..width]),
            );
        }
    }
    // phase 2: exclusive Blelloch scan over block totals
    let p = nb.next_power_of_two();
    let mut ta = vec![F::one(); p * width];
    let mut tb = vec![F::zero(); p * width];
    for blk in 0..nb {
        let last = ((blk * SCAN_BLOCK + SCAN_BLOCK).min(len) - 1) * width;
        ta[blk * width..(blk + 1) * width].copy_from_slice(&la[last..last + width]);
        tb[blk * width..(blk + 1) * width].copy_from_slice(&lb[last..last + width]);
    }
    let lane = |i: usize| i * width..(i + 1) * width;
    let mut d = 1;
    while d < p {
        for i in (0..p).step_by(2 * d) {
            let (l, r) = (i + d - 1, i + 2 * d - 1);
            let (ea, eb) = (ta[lane(l)].to_vec(), tb[lane(l)].to_vec());
            let (ra, rb) = (&mut ta[lane(r)], &mut tb[lane(r)]);
            // borrowck: the two lanes are disjoint but live in one vec
            let mut na = ra.to_vec();
            let mut nbv = rb.to_vec();
            compose_into((&ea, &eb), (&mut na, &mut nbv));
            ta[lane(r)].copy_from_slice(&na);
            tb[lane(r)].copy_from_slice(&nbv);
        }
        d *= 2;
    }
    ta[lane(p - 1)].iter_mut().for_each(|x| *x = F::one());
    tb[lane(p - 1)].iter_mut().for_each(|x| *x = F::zero());
    let mut d = p / 2;
    while d >= 1 {
        for i in (0..p).step_by(2 * d) {
            let (l, r) = (i + d - 1, i + 2 * d - 1);
            let (left_a, left_b) = (ta[lane(l)].to_vec(), tb[lane(l)].to_vec());
            let (pre_a, pre_b) = (ta[lane(r)].to_vec(), tb[lane(r)].to_vec());
            ta[lane(l)].copy_from_slice(&pre_a);
            tb[lane(l)].copy_from_slice(&pre_b);
            let (mut na, mut nbv) = (left_a, left_b);
            compose_into((&pre_a, &pre_b), (&mut na, &mut nbv));
            ta[lane(r)].copy_from_slice(&na);
            tb[lane(r)].copy_from_slice(&nbv);
        }
        d /= 2;
    }
    // phase 3: the carry-in state of block k is tb[k] since h₋₁ = 0
    let mut h = lb;
    for blk in 1..nb {
        let carry = &tb[lane(blk)];
        let start = blk * SCAN_BLOCK;
        let end = (start + SCAN_BLOCK).min(len);
        for t in start..end {
            for ((hv, &av), &c) in h[lane(t)].iter_mut().zip(&la[lane(t)]).zip(carry) {
                *hv += av * c;
            }
        }
    }
    h
}

struct ScanSaved<F> {
    a_bar: Vec<F>,
    /// `(exp(Δa) − 1) / a`, the input gain before `b`.
    gain: Vec<F>,
    h: Vec<F>,
}

fn scan_forward<F: Real>(
    x: &Tensor<F>,
    delta: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    c: &Tensor<F>,
    d_skip: &Tensor<F>,
    segs: &Segments,
    mode: ScanMode,
) -> (Tensor<F>, ScanSaved<F>) {
    let (rows, dm) = (x.rows(), x.cols());
    let ns = a.cols();
    let w = dm * ns;
    let mut a_bar = vec![F::zero(); rows * w];
    let mut gain = vec![F::zero(); rows * w];
    let mut bx = vec![F::zero(); rows * w];
    for t in 0..rows {
        let (xr, dr, br) = (x.row(t), delta.row(t), b.row(t));
        for ch in 0..dm {
            let ar = a.row(ch);
            let o = t * w + ch * ns;
            for n in 0..ns {
                // one transcendental per element: exp(u) = expm1(u) + 1
                let em1 = (dr[ch] * ar[n]).exp_m1();
                a_bar[o + n] = em1 + F::one();
                gain[o + n] = em1 / ar[n];
                bx[o + n] = gain[o + n] * br[n] * xr[ch];
            }
        }
    }
    let mut h = vec![F::zero(); rows * w];
    for r in segs.iter() {
        let span = r.start * w..r.end * w;
        let hs = match mode {
            ScanMode::Sequential => scan_pairs_sequential(&a_bar[span.clone()], &bx[span.clone()], w),
            ScanMode::Parallel => scan_pairs_parallel(&a_bar[span.clone()], &bx[span.clone()], w),
        };
        h[span].copy_from_slice(&hs);
    }
    let mut y = vec![F::zero(); rows * dm];
    for t in 0..rows {
        let (xr, cr) = (x.row(t), c.row(t));
        for ch in 0..dm {
            let hs = &h[t * w + ch * ns..t * w + (ch + 1) * ns];
            let acc: F = hs.iter().zip(cr).map(|(&hv, &cv)| hv * cv).sum();
            y[t * dm + ch] = acc + d_skip.data()[ch] * xr[ch];
        }
    }
    (
        Tensor::new(&[rows, dm], y).expect("shape"),
        ScanSaved { a_bar, gain, h },
    )
}

impl<'t, F: Real> Var<'t, F> {
    /// Selective scan of `self` (`[ΣL × D]`) given post-softplus steps
    /// `delta` (`[ΣL × D]`), negative decay `a` (`[D × N]`), input and
    /// output projections `b`, `c` (`[ΣL × N]`) and skip gain `d_skip` (`[D]`).
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        self,
        delta: Var<'t, F>,
        a: Var<'t, F>,
        b: Var<'t, F>,
        c: Var<'t, F>,
        d_skip: Var<'t, F>,
        segs: &Segments,
        mode: ScanMode,
    ) -> Result<Var<'t, F>> {
        let (xv, dv, av, bv, cv, sv) = (
            self.value(),
            delta.value(),
            a.value(),
            b.value(),
            c.value(),
            d_skip.value(),
        );
        let (rows, dm) = (xv.rows(), xv.cols());
        let ns = av.cols();
        if xv.rank() != 2
            || dv.shape() != xv.shape()
            || av.rows() != dm
            || bv.rows() != rows
            || bv.cols() != ns
            || cv.shape() != bv.shape()
            || sv.len() != dm
        {
            return Err(Error::Shape(format!(
                "selective_scan operands x{:?} delta{:?} a{:?} b{:?} c{:?} d{:?}",
                xv.shape(),
                dv.shape(),
                av.shape(),
                bv.shape(),
                cv.shape(),
                sv.shape()
            )));
        }
        check_segs(segs, rows)?;
        let (y, saved) = scan_forward(&xv, &dv, &av, &bv, &cv, &sv, segs, mode);
        let segs = segs.clone();
        let dshape = sv.shape().to_vec();
        Ok(self.tape().op(
            "selective_scan",
            y,
            &[self, delta, a, b, c, d_skip],
            move |g, _| {
                let w = dm * ns;
                let mut dx = vec![F::zero(); rows * dm];
                let mut ddelta = vec![F::zero(); rows * dm];
                let mut da = vec![F::zero(); dm * ns];
                let mut db = vec![F::zero(); rows * ns];
                let mut dc = vec![F::zero(); rows * ns];
                let mut dd = vec![F::zero(); dm];
                let mut dh = vec![F::zero(); w];
                for r in segs.iter() {
                    dh.iter_mut().for_each(|v| *v = F::zero());
                    for t in r.clone().rev() {
                        let (gy, xr, dr, br, cr) =
                            (g.row(t), xv.row(t), dv.row(t), bv.row(t), cv.row(t));
                        let ht = &saved.h[t * w..(t + 1) * w];
                        for ch in 0..dm {
                            dd[ch] += gy[ch] * xr[ch];
                            dx[t * dm + ch] = gy[ch] * sv.data()[ch];
                            for n in 0..ns {
                                dh[ch * ns + n] += cr[n] * gy[ch];
                                dc[t * ns + n] += gy[ch] * ht[ch * ns + n];
                            }
                        }
                        for ch in 0..dm {
                            let ar = av.row(ch);
                            let step = dr[ch];
                            for n in 0..ns {
                                let k = ch * ns + n;
                                let dhk = dh[k];
                                let abar = saved.a_bar[t * w + k];
                                let prev = if t > r.start {
                                    saved.h[(t - 1) * w + k]
                                } else {
                                    F::zero()
                                };
                                let gain = saved.gain[t * w + k];
                                let dabar = dhk * prev;
                                dx[t * dm + ch] += dhk * gain * br[n];
                                db[t * ns + n] += dhk * gain * xr[ch];
                                let dgain = dhk * br[n] * xr[ch];
                                ddelta[t * dm + ch] += dabar * ar[n] * abar + dgain * abar;
                                da[k] += dabar * step * abar
                                    + dgain * (step * abar - gain) / ar[n];
                                dh[k] = dhk * abar;
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[rows, dm], dx).unwrap()),
                    Some(Tensor::new(&[rows, dm], ddelta).unwrap()),
                    Some(Tensor::new(&[dm, ns], da).unwrap()),
                    Some(Tensor::new(&[rows, ns], db).unwrap()),
                    Some(Tensor::new(&[rows, ns], dc).unwrap()),
                    Some(Tensor::new(&dshape, dd).unwrap()),
                ]
            },
        ))
    }
}

/// Parameters of one selective SSM over `d_model` channels.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub d_model: usize,
    pub d_state: usize,
    /// `A = −exp(a_log)`, shape `[d_model × d_state]`.
    pub a_log: ParamId,
    pub delta_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub d_skip: ParamId,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        d_state: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let a_log = Tensor::from_f64(
            &[d_model, d_state],
            &(0..d_model)
                .flat_map(|_| (1..=d_state).map(|n| (n as f64).ln()))
                .collect::<Vec<_>>(),
        )?;
        let a_log = store.add(format!("{name}.a_log"), a_log)?;
        let delta_proj = Linear::new(store, &format!("{name}.delta"), d_model, d_model, true, rng)?;
        // small initial steps: softplus(bias) uniform in [1e-3, 1e-1]
        let bias: Vec<f64> = (0..d_model)
            .map(|_| inverse_softplus(rng.random_range(1e-3..1e-1)))
            .collect();
        store.set(delta_proj.b.expect("bias"), Tensor::from_f64(&[d_model], &bias)?)?;
        let wbound = 0.1 / (d_model as f64).sqrt();
        store.set(delta_proj.w, uniform(rng, &[d_model, d_model], wbound))?;
        Ok(Self {
            d_model,
            d_state,
            a_log,
            delta_proj,
            b_proj: Linear::new(store, &format!("{name}.b"), d_model, d_state, true, rng)?,
            c_proj: Linear::new(store, &format!("{name}.c"), d_model, d_state, true, rng)?,
            d_skip: store.add(format!("{name}.d_skip"), Tensor::full(&[d_model], F::one()))?,
        })
    }

    /// `y = SelectiveSSM(x)` over each segment of `x`.
    pub fn forward<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        x: Var<'a, F>,
        segs: &Segments,
        mode: ScanMode,
    ) -> Result<Var<'a, F>> {
        let delta = self.delta_proj.forward(ctx, x)?.softplus();
        let a = ctx.p(self.a_log).exp().neg();
        let b = self.b_proj.forward(ctx, x)?;
        let c = self.c_proj.forward(ctx, x)?;
        x.selective_scan(delta, a, b, c, ctx.p(self.d_skip), segs, mode)
    }

    /// Zeroes the step, input and output projections.
    pub fn zero_projections<F: Real>(&self, store: &mut ParamStore<F>) {
        self.delta_proj.zero(store);
        self.b_proj.zero(store);
        self.c_proj.zero(store);
    }
}

/// Gated Mamba block with residual:
/// `out = W_out(SSM(silu(conv(W_in x))) ⊙ silu(W_gate x)) + x`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub in_proj: Linear,
    pub conv: ParamId,
    pub ssm: SsmParams,
    pub gate: Option<Linear>,
    pub out_proj: Linear,
}

impl MambaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        d_state: usize,
        conv_width: usize,
        gated: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let in_proj = Linear::new(store, &format!("{name}.in"), d_model, d_model, true, rng)?;
        let conv = store.add(
            format!("{name}.conv"),
            uniform(rng, &[conv_width, d_model], 1.0 / (conv_width as f64).sqrt()),
        )?;
        let ssm = SsmParams::new(store, &format!("{name}.ssm"), d_model, d_state, rng)?;
        let gate = if gated {
            Some(Linear::new(store, &format!("{name}.gate"), d_model, d_model, true, rng)?)
        } else {
            None
        };
        let out_proj = Linear::new(store, &format!("{name}.out"), d_model, d_model, true, rng)?;
        Ok(Self {
            in_proj,
            conv,
            ssm,
            gate,
            out_proj,
        })
    }

    pub fn forward<'a, F: Real>(
        &self,
        ctx: &Ctx<'a, F>,
        x: Var<'a, F>,
        segs: &Segments,
        mode: ScanMode,
    ) -> Result<Var<'a, F>> {
        let u = self
            .in_proj
            .forward(ctx, x)?
            .depthwise_conv1d(ctx.p(self.conv), segs, true)?
            .silu();
        let mut s = self.ssm.forward(ctx, u, segs, mode)?;
        if let Some(gate) = &self.gate {
            s = s.mul(gate.forward(ctx, x)?.silu())?;
        }
        self.out_proj.forward(ctx, s)?.add(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zoh_examples() {
        let t = |x: f64| Tensor::<f64>::vector(vec![x]);
        let (ab, bb) = discretize_zoh(&t(-1.0), &t(1.0), &t(2f64.ln())).unwrap();
        assert!((ab.item() - 0.5).abs() < 1e-15 && (bb.item() - 0.5).abs() < 1e-15);
        let (ab, bb) = discretize_zoh(&t(-1.0), &t(1.0), &t(1e-8)).unwrap();
        assert!((ab.item() - 1.0).abs() < 1e-6 && bb.item().abs() < 1e-6);
        assert!((bb.item() - 1e-8).abs() < 1e-15);
        let (ab, bb) = discretize_zoh(&t(-2.0), &t(3.0), &t(0.5)).unwrap();
        assert!((ab.item() - (-1f64).exp()).abs() < 1e-15);
        assert!((bb.item() - 3.0 * (1.0 - (-1f64).exp()) / 2.0).abs() < 1e-15);
        assert!((ab.item() - 0.3679).abs() < 1e-4 && (bb.item() - 0.9482).abs() < 1e-4);
        assert!(matches!(
            discretize_zoh(&t(-1.0), &t(1.0), &t(0.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pair_composition_example() {
        let a = [0.5, 0.5, 0.5];
        let b = [1.0, 0.0, 0.0];
        assert_eq!(scan_pairs_sequential(&a, &b, 1), vec![1.0, 0.5, 0.25]);
        assert_eq!(scan_pairs_parallel(&a, &b, 1), vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn parallel_pairs_match_sequential_across_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for len in [1, 2, 7, 8, 9, 33, 100] {
            let a: Vec<f64> = (0..len * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..len * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = scan_pairs_sequential(&a, &b, 3);
            let p = scan_pairs_parallel(&a, &b, 3);
            for (x, y) in s.iter().zip(&p) {
                assert!((x - y).abs() < 1e-13, "len {len}");
            }
        }
    }

    fn scan_fixed(x: Vec<f64>, a_bar: f64, mode: ScanMode) -> Vec<f64> {
        // Δ = 1, A = ln(a_bar) so Ā = a_bar; B chosen so B̄ = 1
        let l = x.len();
        let a = a_bar.ln();
        let bval = a / (a_bar - 1.0);
        let tape = Tape::<f64>::new();
        let xs = tape.constant(Tensor::new(&[l, 1], x).unwrap());
        let y = xs
            .selective_scan(
                tape.constant(Tensor::full(&[l, 1], 1.0)),
                tape.constant(Tensor::full(&[1, 1], a)),
                tape.constant(Tensor::full(&[l, 1], bval)),
                tape.constant(Tensor::full(&[l, 1], 1.0)),
                tape.constant(Tensor::zeros(&[1])),
                &Segments::single(l),
                mode,
            )
            .unwrap();
        y.value().data().to_vec()
    }

    #[test]
    fn hand_recurrence() {
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            let y = scan_fixed(vec![1.0, 0.0, 0.0], 0.5, mode);
            for (got, want) in y.iter().zip([1.0, 0.5, 0.25]) {
                assert!((got - want).abs() < 1e-12, "{mode}: {y:?}");
            }
        }
    }

    #[test]
    fn zeroed_projections_give_pure_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let ssm = SsmParams::new(&mut store, "s", 4, 3, &mut rng).unwrap();
        ssm.zero_projections(&mut store);
        let x = uniform::<f64, _>(&mut rng, &[6, 4], 1.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let y = ssm
            .forward(&ctx, ctx.constant(x.clone()), &Segments::single(6), ScanMode::Parallel)
            .unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-15);
        let z = ssm
            .forward(&ctx, ctx.constant(Tensor::zeros(&[6, 4])), &Segments::single(6), ScanMode::Sequential)
            .unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_out_proj_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let block = MambaBlock::new(&mut store, "m", 8, 4, 4, true, &mut rng).unwrap();
        block.out_proj.zero(&mut store);
        let x = uniform::<f64, _>(&mut rng, &[5, 8], 1.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let y = block
            .forward(&ctx, ctx.constant(x.clone()), &Segments::single(5), ScanMode::Parallel)
            .unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn scan_is_per_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let ssm = SsmParams::new(&mut store, "s", 4, 3, &mut rng).unwrap();
        let x1 = uniform::<f64, _>(&mut rng, &[3, 4], 1.0);
        let x2 = uniform::<f64, _>(&mut rng, &[5, 4], 1.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let packed = Var::concat_rows(&[ctx.constant(x1.clone()), ctx.constant(x2.clone())]).unwrap();
        let y = ssm
            .forward(&ctx, packed, &Segments::from_lens(&[3, 5]).unwrap(), ScanMode::Parallel)
            .unwrap();
        let y2 = ssm
            .forward(&ctx, ctx.constant(x2), &Segments::single(5), ScanMode::Parallel)
            .unwrap();
        assert_eq!(&y.value().data()[12..], y2.value().data());
    }
}
