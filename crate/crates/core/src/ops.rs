//! Fused sequence operations with hand-written backward rules.

use crate::autograd::{check_segs, softmax_in_place, Segments, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<'t, F: Real> Var<'t, F> {
    /// Standardizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, eps: F) -> Result<Var<'t, F>> {
        let x = self.value();
        let d = x.cols();
        if d == 0 {
            return Err(Error::EmptyAxis("layer_norm over an empty last axis".into()));
        }
        if eps <= F::zero() {
            return Err(Error::Param("layer_norm eps must be positive".into()));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.len() != d || bv.len() != d {
            return Err(Error::Shape(format!(
                "layer_norm affine of length {}/{} for width {d}",
                gv.len(),
                bv.len()
            )));
        }
        let rows = x.rows();
        let dn = F::lit(d as f64);
        let mut xhat = vec![F::zero(); rows * d];
        let mut inv_std = vec![F::zero(); rows];
        let mut y = vec![F::zero(); rows * d];
        for i in 0..rows {
            let r = x.row(i);
            let mu = r.iter().copied().sum::<F>() / dn;
            let var = r.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / dn;
            let is = F::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (r[j] - mu) * is;
                xhat[i * d + j] = h;
                y[i * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let y = Tensor::new(x.shape(), y)?;
        let shape = x.shape().to_vec();
        let gshape = gv.shape().to_vec();
        Ok(self
            .tape()
            .op("layer_norm", y, &[self, gamma, beta], move |g, need| {
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut dx = vec![F::zero(); rows * d];
                let mut dxh = vec![F::zero(); d];
                for i in 0..rows {
                    let gr = g.row(i);
                    let xh = &xhat[i * d..(i + 1) * d];
                    for j in 0..d {
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        dxh[j] = gr[j] * gv.data()[j];
                    }
                    if need[0] {
                        let m1 = dxh.iter().copied().sum::<F>() / dn;
                        let m2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / dn;
                        for j in 0..d {
                            dx[i * d + j] = inv_std[i] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(&shape, dx).unwrap()),
                    Some(Tensor::new(&gshape, dgamma).unwrap()),
                    Some(Tensor::new(&gshape, dbeta).unwrap()),
                ]
            }))
    }

    /// Per-channel 1-D convolution over each segment.
    ///
    /// `kernel[j, c]` weights the input `j` steps back, so with
    /// `causal = true` the output at `t` reads only inputs at `t-w+1..=t`
    /// (zeros before the segment start). Without causal padding the window
    /// is centred: it reaches `(w-1)/2` steps ahead.
    pub fn depthwise_conv1d(
        self,
        kernel: Var<'t, F>,
        segs: &Segments,
        causal: bool,
    ) -> Result<Var<'t, F>> {
        let x = self.value();
        let k = kernel.value();
        if x.rank() != 2 || k.rank() != 2 {
            return Err(Error::Rank("depthwise_conv1d expects rank-2 input and kernel".into()));
        }
        let (rows, d) = (x.rows(), x.cols());
        let (w, kc) = (k.rows(), k.cols());
        if kc != d {
            return Err(Error::Shape(format!(
                "channel mismatch: kernel has {kc} channels, input has {d}"
            )));
        }
        check_segs(segs, rows)?;
        let lead = if causal { 0 } else { (w - 1) / 2 };
        let segs_saved = segs.clone();
        let taps = move |t: usize, start: usize, end: usize| {
            (0..w).filter_map(move |j| {
                let src = t as isize + lead as isize - j as isize;
                (src >= start as isize && (src as usize) < end).then_some((j, src as usize))
            })
        };
        let mut y = vec![F::zero(); rows * d];
        for r in segs.iter() {
            for t in r.clone() {
                let out = &mut y[t * d..(t + 1) * d];
                for (j, s) in taps(t, r.start, r.end) {
                    for ((o, &kv), &xv) in out.iter_mut().zip(k.row(j)).zip(x.row(s)) {
                        *o += kv * xv;
                    }
                }
            }
        }
        let y = Tensor::new(&[rows, d], y)?;
        Ok(self
            .tape()
            .op("depthwise_conv1d", y, &[self, kernel], move |g, need| {
                let mut dx = vec![F::zero(); rows * d];
                let mut dk = vec![F::zero(); w * d];
                for r in segs_saved.iter() {
                    for t in r.clone() {
                        let gr = g.row(t);
                        for (j, s) in taps(t, r.start, r.end) {
                            if need[0] {
                                for ((o, &kv), &gv) in
                                    dx[s * d..(s + 1) * d].iter_mut().zip(k.row(j)).zip(gr)
                                {
                                    *o += kv * gv;
                                }
                            }
                            for ((o, &xv), &gv) in
                                dk[j * d..(j + 1) * d].iter_mut().zip(x.row(s)).zip(gr)
                            {
                                *o += xv * gv;
                            }
                        }
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(&[rows, d], dx).unwrap()),
                    Some(Tensor::new(&[w, d], dk).unwrap()),
                ]
            }))
    }

    /// Scaled dot-product attention with `heads` heads over projected inputs.
    ///
    /// Query segment `s` attends to key segment `s`. With `causal`, query row
    /// `i` of a segment sees key rows `0..=i` only; masked keys are skipped
    /// rather than assigned `-inf`, so earlier rows are computed exactly as if
    /// later rows were absent.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        self,
        k: Var<'t, F>,
        v: Var<'t, F>,
        heads: usize,
        q_segs: &Segments,
        k_segs: &Segments,
        causal: bool,
    ) -> Result<Var<'t, F>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(Error::Shape(format!(
                "attention operands {:?}, {:?}, {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Param(format!("width {d} not divisible into {heads} heads")));
        }
        if kv.rows() == 0 {
            return Err(Error::EmptyContext);
        }
        check_segs(q_segs, qv.rows())?;
        check_segs(k_segs, kv.rows())?;
        if q_segs.count() != k_segs.count() {
            return Err(Error::Shape("query and key segment counts differ".into()));
        }
        if causal && q_segs != k_segs {
            return Err(Error::Shape("causal attention needs matching segments".into()));
        }
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let (nq, nk) = (qv.rows(), kv.rows());

        // probs[(s, h, i)] is a row of the segment's key length; masked tail stays zero
        let mut probs: Vec<F> = Vec::new();
        let mut prob_off = Vec::with_capacity(q_segs.count());
        let mut out = vec![F::zero(); nq * d];
        for (qs, ks) in q_segs.iter().zip(k_segs.iter()) {
            prob_off.push(probs.len());
            let lk = ks.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for (qi, i) in qs.clone().enumerate() {
                    let visible = if causal { qi + 1 } else { lk };
                    let qrow = &qv.row(i)[cols.clone()];
                    let base = probs.len();
                    probs.resize(base + lk, F::zero());
                    let row = &mut probs[base..base + visible];
                    for (j, p) in row.iter_mut().enumerate() {
                        let krow = &kv.row(ks.start + j)[cols.clone()];
                        *p = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    }
                    softmax_in_place(row);
                    let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vrow = &vv.row(ks.start + j)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let y = Tensor::new(&[nq, d], out)?;
        let (qs_saved, ks_saved) = (q_segs.clone(), k_segs.clone());
        Ok(self
            .tape()
            .op("attention", y, &[self, k, v], move |g, need| {
                let mut dq = vec![F::zero(); nq * d];
                let mut dk = vec![F::zero(); nk * d];
                let mut dv = vec![F::zero(); nk * d];
                let mut ds = Vec::new();
                for ((qs, ks), &off) in qs_saved.iter().zip(ks_saved.iter()).zip(&prob_off) {
                    let lk = ks.len();
                    let mut base = off;
                    for h in 0..heads {
                        let c0 = h * dh;
                        for (qi, i) in qs.clone().enumerate() {
                            let visible = if causal { qi + 1 } else { lk };
                            let p = &probs[base..base + visible];
                            base += lk;
                            let grow = &g.row(i)[c0..c0 + dh];
                            ds.clear();
                            for (j, &pj) in p.iter().enumerate() {
                                let vrow = &vv.row(ks.start + j)[c0..c0 + dh];
                                let dp: F = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                                ds.push(dp);
                                let dvrow = &mut dv[(ks.start + j) * d + c0..(ks.start + j) * d + c0 + dh];
                                for (o, &gv) in dvrow.iter_mut().zip(grow) {
                                    *o += pj * gv;
                                }
                            }
                            let dot: F = ds.iter().zip(p).map(|(&a, &b)| a * b).sum();
                            let qrow = &qv.row(i)[c0..c0 + dh];
                            for (j, &pj) in p.iter().enumerate() {
                                let sj = pj * (ds[j] - dot) * scale;
                                if sj == F::zero() {
                                    continue;
                                }
                                let krow = &kv.row(ks.start + j)[c0..c0 + dh];
                                for (o, &kx) in dq[i * d + c0..i * d + c0 + dh].iter_mut().zip(krow) {
                                    *o += sj * kx;
                                }
                                let dkrow = &mut dk[(ks.start + j) * d + c0..(ks.start + j) * d + c0 + dh];
                                for (o, &qx) in dkrow.iter_mut().zip(qrow) {
                                    *o += sj * qx;
                                }
                            }
                        }
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(&[nq, d], dq).unwrap()),
                    need[1].then(|| Tensor::new(&[nk, d], dk).unwrap()),
                    need[2].then(|| Tensor::new(&[nk, d], dv).unwrap()),
                ]
            }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::{Segments, Tape};
    use crate::tensor::Tensor;

    fn ln(x: Vec<f64>, gamma: f64, beta: f64, eps: f64) -> Vec<f64> {
        let tape = Tape::<f64>::new();
        let d = x.len();
        let y = tape
            .constant(Tensor::vector(x))
            .layer_norm(
                tape.constant(Tensor::full(&[d], gamma)),
                tape.constant(Tensor::full(&[d], beta)),
                eps,
            )
            .unwrap();
        y.value().data().to_vec()
    }

    #[test]
    fn layer_norm_examples() {
        assert_eq!(ln(vec![5.0, 5.0, 5.0], 1.0, 0.0, 1e-5), vec![0.0, 0.0, 0.0]);
        let y = ln(vec![1.0, -1.0], 1.0, 0.0, 1e-300);
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
        assert_eq!(ln(vec![0.0, 0.0], 2.0, 3.0, 1e-5), vec![3.0, 3.0]);
    }

    fn conv(x: Vec<f64>, kernel: Vec<f64>, causal: bool) -> Vec<f64> {
        let tape = Tape::<f64>::new();
        let l = x.len();
        let w = kernel.len();
        let xs = tape.constant(Tensor::new(&[l, 1], x).unwrap());
        let k = tape.constant(Tensor::new(&[w, 1], kernel).unwrap());
        xs.depthwise_conv1d(k, &Segments::single(l), causal)
            .unwrap()
            .value()
            .data()
            .to_vec()
    }

    #[test]
    fn conv_examples() {
        assert_eq!(conv(vec![4.0, -2.0, 7.0], vec![1.0], true), vec![4.0, -2.0, 7.0]);
        assert_eq!(conv(vec![1.0, 2.0, 3.0], vec![1.0, 1.0], true), vec![1.0, 3.0, 5.0]);
        assert_eq!(conv(vec![1.0, 0.0, 0.0], vec![0.0, 1.0], true), vec![0.0, 1.0, 0.0]);
        // centred window of width 3 reaches one step ahead
        assert_eq!(conv(vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0], false), vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let k = tape.constant(Tensor::zeros(&[2, 3]));
        let err = x.depthwise_conv1d(k, &Segments::single(3), true).err().unwrap();
        assert!(err.to_string().contains("channel mismatch"));
    }

    #[test]
    fn conv_does_not_leak_across_segments() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let segs = Segments::from_lens(&[2, 2]).unwrap();
        let y = x.depthwise_conv1d(k, &segs, true).unwrap();
        assert_eq!(y.value().data(), &[1.0, 3.0, 3.0, 7.0]);
    }
}
