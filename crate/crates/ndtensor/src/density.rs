//! Per-channel univariate density model: a small stack of monotone
//! nonlinearities parameterizing a CDF, plus a location/scale transform.
//!
//! For channel c the CDF is
//!
//!   t      = (x - loc_c) * exp(-log_scale_c)
//!   l0_i   = softplus(h0_ci) * t + b0_ci
//!   m0_i   = l0_i + tanh(a0_ci) * tanh(l0_i)
//!   l1_i   = sum_j softplus(h1_cij) * m0_j + b1_ci
//!   m1_i   = l1_i + tanh(a1_ci) * tanh(l1_i)
//!   l2     = sum_j softplus(h2_cj) * m1_j + b2_c
//!   CDF(x) = sigmoid(l2)
//!
//! softplus keeps every linear gain positive and |tanh(a)| < 1 keeps the
//! residual stages monotone, so the CDF is strictly increasing. Bin
//! probability of an integer symbol q is CDF(q + 1/2) - CDF(q - 1/2).

use crate::error::TensorError;
use crate::scalar::{sigmoid, softplus, softplus_grad};
use crate::tensor::{dims4, Tensor};

pub const MAX_CHAIN_WIDTH: usize = 4;

/// Borrowed view over the ten parameter tensors of the chain, in canonical
/// order: loc, log_scale, h0, b0, a0, h1, b1, a1, h2, b2.
#[derive(Clone, Copy)]
pub struct ChainRefs<'a> {
    pub loc: &'a Tensor,
    pub log_scale: &'a Tensor,
    pub h0: &'a Tensor,
    pub b0: &'a Tensor,
    pub a0: &'a Tensor,
    pub h1: &'a Tensor,
    pub b1: &'a Tensor,
    pub a1: &'a Tensor,
    pub h2: &'a Tensor,
    pub b2: &'a Tensor,
}

impl<'a> ChainRefs<'a> {
    pub fn from_slice(params: &[&'a Tensor]) -> ChainRefs<'a> {
        assert_eq!(params.len(), 10);
        ChainRefs {
            loc: params[0],
            log_scale: params[1],
            h0: params[2],
            b0: params[3],
            a0: params[4],
            h1: params[5],
            b1: params[6],
            a1: params[7],
            h2: params[8],
            b2: params[9],
        }
    }

    pub fn channels(&self) -> usize {
        self.loc.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.h0.shape()[1]
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let c = self.channels();
        let f = self.width();
        if f > MAX_CHAIN_WIDTH {
            return Err(TensorError::BadParameter {
                what: format!("chain width {f} exceeds {MAX_CHAIN_WIDTH}"),
            });
        }
        let want: [(&Tensor, Vec<usize>); 10] = [
            (self.loc, vec![c]),
            (self.log_scale, vec![c]),
            (self.h0, vec![c, f]),
            (self.b0, vec![c, f]),
            (self.a0, vec![c, f]),
            (self.h1, vec![c, f, f]),
            (self.b1, vec![c, f]),
            (self.a1, vec![c, f]),
            (self.h2, vec![c, f]),
            (self.b2, vec![c]),
        ];
        for (i, (t, shape)) in want.iter().enumerate() {
            if t.shape() != shape.as_slice() {
                return Err(TensorError::BadShape {
                    what: format!(
                        "chain parameter #{i} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    ),
                });
            }
            if !t.all_finite() {
                return Err(TensorError::BadParameter {
                    what: format!("chain parameter #{i} is non-finite"),
                });
            }
        }
        Ok(())
    }
}

struct ChainEval {
    t: f64,
    l0: [f64; MAX_CHAIN_WIDTH],
    m0: [f64; MAX_CHAIN_WIDTH],
    l1: [f64; MAX_CHAIN_WIDTH],
    m1: [f64; MAX_CHAIN_WIDTH],
    l2: f64,
}

fn eval_chain(p: &ChainRefs, c: usize, x: f64) -> ChainEval {
    let f = p.width();
    let t = (x - p.loc.data()[c]) * (-p.log_scale.data()[c]).exp();
    let mut e = ChainEval {
        t,
        l0: [0.0; MAX_CHAIN_WIDTH],
        m0: [0.0; MAX_CHAIN_WIDTH],
        l1: [0.0; MAX_CHAIN_WIDTH],
        m1: [0.0; MAX_CHAIN_WIDTH],
        l2: 0.0,
    };
    for i in 0..f {
        e.l0[i] = softplus(p.h0.data()[c * f + i]) * t + p.b0.data()[c * f + i];
        e.m0[i] = e.l0[i] + p.a0.data()[c * f + i].tanh() * e.l0[i].tanh();
    }
    for i in 0..f {
        let mut acc = p.b1.data()[c * f + i];
        for j in 0..f {
            acc += softplus(p.h1.data()[(c * f + i) * f + j]) * e.m0[j];
        }
        e.l1[i] = acc;
        e.m1[i] = acc + p.a1.data()[c * f + i].tanh() * acc.tanh();
    }
    let mut l2 = p.b2.data()[c];
    for j in 0..f {
        l2 += softplus(p.h2.data()[c * f + j]) * e.m1[j];
    }
    e.l2 = l2;
    e
}

/// CDF of the chain for `channel` at `x`; strictly increasing in `x`.
pub fn chain_cdf(p: &ChainRefs, channel: usize, x: f64) -> f64 {
    sigmoid(eval_chain(p, channel, x).l2)
}

/// Unit-bin probability CDF(x+1/2) - CDF(x-1/2), clamped to >= 0 against
/// floating-point cancellation.
pub fn chain_bin(p: &ChainRefs, channel: usize, x: f64) -> f64 {
    (chain_cdf(p, channel, x + 0.5) - chain_cdf(p, channel, x - 0.5)).max(0.0)
}

/// Per-element bin likelihood of an [N,C,H,W] tensor.
pub fn factorized_bin_forward(x: &Tensor, p: &ChainRefs) -> Result<Tensor, TensorError> {
    p.validate()?;
    let (n, c, h, w) = dims4(x)?;
    if c != p.channels() {
        return Err(TensorError::BadShape {
            what: format!("input has {c} channels, chain has {}", p.channels()),
        });
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for s in 0..hw {
                out.data_mut()[base + s] = chain_bin(p, ci, x.data()[base + s]);
            }
        }
    }
    Ok(out)
}

/// Accumulates the backward pass of one CDF endpoint evaluation into the
/// parameter gradients; returns d(cdf)/dx at that endpoint times `g`.
#[allow(clippy::too_many_arguments)]
fn backprop_endpoint(
    p: &ChainRefs,
    c: usize,
    x: f64,
    g: f64,
    grads: &mut [Tensor; 10],
) -> f64 {
    let f = p.width();
    let e = eval_chain(p, c, x);
    let sig = sigmoid(e.l2);
    let dl2 = g * sig * (1.0 - sig);

    let [dloc, dls, dh0, db0, da0, dh1, db1, da1, dh2, db2] = grads;

    db2.data_mut()[c] += dl2;
    let mut dm1 = [0.0; MAX_CHAIN_WIDTH];
    for j in 0..f {
        let h2v = p.h2.data()[c * f + j];
        dm1[j] = dl2 * softplus(h2v);
        dh2.data_mut()[c * f + j] += dl2 * e.m1[j] * softplus_grad(h2v);
    }
    let mut dl1 = [0.0; MAX_CHAIN_WIDTH];
    for i in 0..f {
        let a = p.a1.data()[c * f + i];
        let ta = a.tanh();
        let tl = e.l1[i].tanh();
        dl1[i] = dm1[i] * (1.0 + ta * (1.0 - tl * tl));
        da1.data_mut()[c * f + i] += dm1[i] * tl * (1.0 - ta * ta);
    }
    let mut dm0 = [0.0; MAX_CHAIN_WIDTH];
    for i in 0..f {
        db1.data_mut()[c * f + i] += dl1[i];
        for j in 0..f {
            let h1v = p.h1.data()[(c * f + i) * f + j];
            dm0[j] += dl1[i] * softplus(h1v);
            dh1.data_mut()[(c * f + i) * f + j] += dl1[i] * e.m0[j] * softplus_grad(h1v);
        }
    }
    let mut dt = 0.0;
    for i in 0..f {
        let a = p.a0.data()[c * f + i];
        let ta = a.tanh();
        let tl = e.l0[i].tanh();
        let dl0 = dm0[i] * (1.0 + ta * (1.0 - tl * tl));
        da0.data_mut()[c * f + i] += dm0[i] * tl * (1.0 - ta * ta);
        db0.data_mut()[c * f + i] += dl0;
        let h0v = p.h0.data()[c * f + i];
        dt += dl0 * softplus(h0v);
        dh0.data_mut()[c * f + i] += dl0 * e.t * softplus_grad(h0v);
    }
    // t = (x - loc) * exp(-ls)
    let sinv = (-p.log_scale.data()[c]).exp();
    dloc.data_mut()[c] -= dt * sinv;
    dls.data_mut()[c] -= dt * e.t;
    dt * sinv
}

/// Gradients of `factorized_bin_forward` w.r.t. x and the ten parameters
/// (canonical order).
pub fn factorized_bin_backward(
    x: &Tensor,
    p: &ChainRefs,
    dout: &Tensor,
) -> Result<(Tensor, [Tensor; 10]), TensorError> {
    let (n, c, h, w) = dims4(x)?;
    let f = p.width();
    let mut dx = Tensor::zeros(x.shape());
    let mut grads: [Tensor; 10] = [
        Tensor::zeros(&[c]),
        Tensor::zeros(&[c]),
        Tensor::zeros(&[c, f]),
        Tensor::zeros(&[c, f]),
        Tensor::zeros(&[c, f]),
        Tensor::zeros(&[c, f, f]),
        Tensor::zeros(&[c, f]),
        Tensor::zeros(&[c, f]),
        Tensor::zeros(&[c, f]),
        Tensor::zeros(&[c]),
    ];
    let hw = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for s in 0..hw {
                let g = dout.data()[base + s];
                if g == 0.0 {
                    continue;
                }
                let xv = x.data()[base + s];
                let d_plus = backprop_endpoint(p, ci, xv + 0.5, g, &mut grads);
                let d_minus = backprop_endpoint(p, ci, xv - 0.5, -g, &mut grads);
                dx.data_mut()[base + s] += d_plus + d_minus;
            }
        }
    }
    Ok((dx, grads))
}
