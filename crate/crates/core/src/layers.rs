//! Trainable building blocks: linear projection, 2D convolution,
//! dropout, and batch normalization (1D over features, 2D over channels).
//!
//! Weight matrices initialize uniformly in `±1/sqrt(fan_in)`; biases
//! start at zero. Batch norm uses biased batch variance, momentum 0.1 and
//! eps 1e-5 by default, with running statistics initialized to mean 0 /
//! variance 1 and updated only in training mode.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::Var;
use crate::numerics::tensor::Tensor;
use crate::params::{init_weight, ParamId, ParamStore, Session};

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.register(
            &format!("{name}.weight"),
            init_weight(rng, &[in_dim, out_dim], in_dim),
        )?;
        let bias = if bias {
            Some(store.register(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `[..., in_dim] @ weight (+ bias)`.
    pub fn forward<'t>(&self, sess: &mut Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        let w = sess.param(self.weight);
        let y = x.matmul(w);
        match self.bias {
            Some(b) => {
                let b = sess.param(b);
                y.add(b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    /// Omitted when the conv feeds straight into batch norm, whose mean
    /// subtraction would cancel a bias exactly.
    bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let weight = store.register(
            &format!("{name}.weight"),
            init_weight(rng, &[out_channels, in_channels, kernel.0, kernel.1], fan_in),
        )?;
        let bias = if bias {
            Some(store.register(&format!("{name}.bias"), Tensor::zeros(&[out_channels]))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<'t>(&self, sess: &mut Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        let w = sess.param(self.weight);
        let b = match self.bias {
            Some(b) => sess.param(b),
            None => sess
                .tape()
                .constant(vec![0.0; self.out_channels], vec![self.out_channels]),
        };
        x.conv2d(w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    p: f64,
}

impl Dropout {
    /// `p` must lie in `[0, 1)`.
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        Ok(Dropout { p })
    }

    pub fn probability(&self) -> f64 {
        self.p
    }

    pub fn forward<'t>(&self, sess: &mut Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        let training = sess.training();
        x.dropout(self.p, training, sess.rng())
    }
}

/// Which axes batch norm reduces over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Input `[batch, features]`; statistics per feature.
    OneD,
    /// Input `[batch, channels, h, w]`; statistics per channel.
    TwoD,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub mode: BatchNormMode,
    pub features: usize,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mode: BatchNormMode,
        features: usize,
    ) -> Result<Self> {
        let gamma = store.register(&format!("{name}.gamma"), Tensor::ones(&[features]))?;
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(&[features]))?;
        let running_mean =
            store.register_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[features]))?;
        let running_var =
            store.register_buffer(&format!("{name}.running_var"), Tensor::ones(&[features]))?;
        Ok(BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            mode,
            features,
            momentum: BATCH_NORM_MOMENTUM,
            eps: BATCH_NORM_EPS,
        })
    }

    fn stat_shape(&self) -> Vec<usize> {
        match self.mode {
            BatchNormMode::OneD => vec![1, self.features],
            BatchNormMode::TwoD => vec![1, self.features, 1, 1],
        }
    }

    fn reduce_axes(&self, rank: usize) -> Vec<usize> {
        match self.mode {
            BatchNormMode::OneD => vec![0],
            BatchNormMode::TwoD => {
                debug_assert_eq!(rank, 4);
                vec![0, 2, 3]
            }
        }
    }

    pub fn forward<'t>(&self, sess: &mut Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let expected_rank = match self.mode {
            BatchNormMode::OneD => 2,
            BatchNormMode::TwoD => 4,
        };
        assert!(
            shape.len() == expected_rank && shape[1] == self.features,
            "batch_norm expects rank {expected_rank} with {} channels, got {shape:?}",
            self.features
        );
        let stat_shape = self.stat_shape();
        let gamma = sess.param(self.gamma).reshape(&stat_shape);
        let beta = sess.param(self.beta).reshape(&stat_shape);

        if sess.training() {
            let axes = self.reduce_axes(shape.len());
            let mean = x.mean_axes(&axes, true);
            let centered = x.sub(mean);
            let var = centered.mul(centered).mean_axes(&axes, true);
            let inv_std = var.add_scalar(self.eps).sqrt();
            let normalized = centered.div(inv_std);
            // momentum update of the running statistics (detached)
            let m = self.momentum;
            let batch_mean = mean.value();
            let batch_var = var.value();
            let new_mean: Vec<f64> = sess
                .buffer(self.running_mean)
                .data()
                .iter()
                .zip(&batch_mean)
                .map(|(&r, &b)| (1.0 - m) * r + m * b)
                .collect();
            let new_var: Vec<f64> = sess
                .buffer(self.running_var)
                .data()
                .iter()
                .zip(&batch_var)
                .map(|(&r, &b)| (1.0 - m) * r + m * b)
                .collect();
            sess.update_buffer(self.running_mean, &new_mean);
            sess.update_buffer(self.running_var, &new_var);
            normalized.mul(gamma).add(beta)
        } else {
            let mean = sess
                .tape()
                .constant(sess.buffer(self.running_mean).data().to_vec(), stat_shape.clone());
            let var = sess
                .tape()
                .constant(sess.buffer(self.running_var).data().to_vec(), stat_shape);
            let inv_std = var.add_scalar(self.eps).sqrt();
            x.sub(mean).div(inv_std).mul(gamma).add(beta)
        }
    }
}
