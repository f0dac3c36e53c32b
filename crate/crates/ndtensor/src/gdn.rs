//! Generalized divisive normalization and its multiplicative inverse.
//!
//!   GDN:  y_c = x_c / sqrt(beta_c + sum_j gamma_cj * x_j^2)
//!   IGDN: y_c = x_c * sqrt(beta_c + sum_j gamma_cj * x_j^2)
//!
//! Parameters are stored reparameterized (squared-offset form) so the
//! effective beta stays >= BETA_MIN and gamma stays >= 0 without any
//! projection step:
//!
//!   beta  = beta_r^2  + BETA_MIN
//!   gamma = gamma_r^2

use crate::error::TensorError;
use crate::tensor::{dims4, Tensor};

pub const BETA_MIN: f64 = 1e-6;

/// Reparameterized GDN parameters: `beta_r` per channel, `gamma_r` a
/// channel-by-channel matrix.
#[derive(Clone, Debug)]
pub struct GdnParams {
    pub beta_r: Tensor,
    pub gamma_r: Tensor,
}

impl GdnParams {
    /// beta_r and gamma_r giving effective beta = 1, gamma = diag_value on
    /// the diagonal and 0 elsewhere.
    pub fn identity_init(channels: usize, diag_value: f64) -> GdnParams {
        let beta_r = Tensor::full(&[channels], (1.0f64 - BETA_MIN).sqrt());
        let gamma_r = Tensor::from_fn(&[channels, channels], |i| {
            if i[0] == i[1] {
                diag_value.sqrt()
            } else {
                0.0
            }
        });
        GdnParams { beta_r, gamma_r }
    }

    pub fn validate(&self, channels: usize) -> Result<(), TensorError> {
        if self.beta_r.shape() != [channels] || self.gamma_r.shape() != [channels, channels] {
            return Err(TensorError::BadShape {
                what: format!(
                    "gdn parameter shapes {:?}/{:?} do not match {channels} channels",
                    self.beta_r.shape(),
                    self.gamma_r.shape()
                ),
            });
        }
        if !self.beta_r.all_finite() || !self.gamma_r.all_finite() {
            return Err(TensorError::BadParameter {
                what: "non-finite gdn parameter".to_string(),
            });
        }
        Ok(())
    }
}

fn effective(beta_r: &Tensor, gamma_r: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let beta: Vec<f64> = beta_r.data().iter().map(|b| b * b + BETA_MIN).collect();
    let gamma: Vec<f64> = gamma_r.data().iter().map(|g| g * g).collect();
    (beta, gamma)
}

/// Computes t[c, s] = beta_c + sum_j gamma_cj * x_j(s)^2 for one sample.
fn pool_denominator(xs: &[f64], c: usize, hw: usize, beta: &[f64], gamma: &[f64]) -> Vec<f64> {
    let sq: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let mut t = vec![0.0; c * hw];
    for (ci, chunk) in t.chunks_mut(hw).enumerate() {
        chunk.fill(beta[ci]);
    }
    unsafe {
        matrixmultiply::dgemm(
            c,
            c,
            hw,
            1.0,
            gamma.as_ptr(),
            c as isize,
            1,
            sq.as_ptr(),
            hw as isize,
            1,
            1.0,
            t.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    t
}

pub fn gdn_forward(
    x: &Tensor,
    params: &GdnParams,
    inverse: bool,
) -> Result<Tensor, TensorError> {
    let (n, c, h, w) = dims4(x)?;
    params.validate(c)?;
    let (beta, gamma) = effective(&params.beta_r, &params.gamma_r);
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        let xs = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        let t = pool_denominator(xs, c, hw, &beta, &gamma);
        let os = &mut out.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        if inverse {
            for i in 0..c * hw {
                os[i] = xs[i] * t[i].sqrt();
            }
        } else {
            for i in 0..c * hw {
                os[i] = xs[i] / t[i].sqrt();
            }
        }
    }
    Ok(out)
}

/// Gradients w.r.t. x, beta_r and gamma_r.
pub fn gdn_backward(
    x: &Tensor,
    params: &GdnParams,
    inverse: bool,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    let (n, c, h, w) = dims4(x)?;
    let hw = h * w;
    let (beta, gamma) = effective(&params.beta_r, &params.gamma_r);
    let mut dx = Tensor::zeros(x.shape());
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c * c];
    for ni in 0..n {
        let xs = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        let gs = &dout.data()[ni * c * hw..(ni + 1) * c * hw];
        let t = pool_denominator(xs, c, hw, &beta, &gamma);
        let sq: Vec<f64> = xs.iter().map(|v| v * v).collect();
        // u_c(s) = g_c x_c t_c^{-3/2} (gdn) or v_c(s) = g_c x_c t_c^{-1/2} (igdn)
        let mut u = vec![0.0; c * hw];
        if inverse {
            for i in 0..c * hw {
                u[i] = gs[i] * xs[i] / t[i].sqrt();
            }
        } else {
            for i in 0..c * hw {
                let rt = t[i].sqrt();
                u[i] = gs[i] * xs[i] / (t[i] * rt);
            }
        }
        let sign = if inverse { 0.5 } else { -0.5 };
        // dgamma[c,j] += sign * sum_s u_c(s) * sq_j(s)
        unsafe {
            matrixmultiply::dgemm(
                c,
                hw,
                c,
                sign,
                u.as_ptr(),
                hw as isize,
                1,
                sq.as_ptr(),
                1,
                hw as isize,
                1.0,
                dgamma.as_mut_ptr(),
                c as isize,
                1,
            );
        }
        for ci in 0..c {
            dbeta[ci] += sign * u[ci * hw..(ci + 1) * hw].iter().sum::<f64>();
        }
        // dx_j = g_j * t_j^{+-1/2} + x_j * (gamma^T u)_j * (2*sign)
        let mut gtu = vec![0.0; c * hw];
        unsafe {
            matrixmultiply::dgemm(
                c,
                c,
                hw,
                2.0 * sign,
                gamma.as_ptr(),
                1,
                c as isize,
                u.as_ptr(),
                hw as isize,
                1,
                0.0,
                gtu.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        let dxs = &mut dx.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        if inverse {
            for i in 0..c * hw {
                dxs[i] = gs[i] * t[i].sqrt() + xs[i] * gtu[i];
            }
        } else {
            for i in 0..c * hw {
                dxs[i] = gs[i] / t[i].sqrt() + xs[i] * gtu[i];
            }
        }
    }
    // Chain through the squared-offset reparameterization.
    let mut dbeta_r = Tensor::zeros(&[c]);
    for (i, v) in dbeta_r.data_mut().iter_mut().enumerate() {
        *v = 2.0 * params.beta_r.data()[i] * dbeta[i];
    }
    let mut dgamma_r = Tensor::zeros(&[c, c]);
    for (i, v) in dgamma_r.data_mut().iter_mut().enumerate() {
        *v = 2.0 * params.gamma_r.data()[i] * dgamma[i];
    }
    Ok((dx, dbeta_r, dgamma_r))
}
