//! Bottleneck adapter applied to a block's feed-forward output.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterOptions {
    pub activation: Activation,
    /// Add the adapter input back onto its output.
    pub residual: bool,
    /// Normalise the bottleneck. Only switched off in tests.
    pub layer_norm: bool,
    pub eps: f64,
}

impl Default for AdapterOptions {
    fn default() -> Self {
        AdapterOptions {
            activation: Activation::Relu,
            residual: true,
            layer_norm: true,
            eps: 1e-5,
        }
    }
}

/// Parameters of one block's adapter, already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    /// `[b×d]`
    pub down: Var,
    /// `[d×b]`
    pub up: Var,
    /// `[b]` each.
    pub ln_gamma: Var,
    pub ln_beta: Var,
}

/// Weighted sum of bank rows: `[1×N] · [N×(rows·cols)]`, reshaped to
/// `[rows×cols]`.
pub fn aggregate<S: Scalar>(
    tape: &mut Tape<S>,
    weights: Var,
    stacked: Var,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    let n = tape.shape(stacked)[0];
    let w = tape.reshape(weights, &[1, n])?;
    let flat = tape.matmul(w, stacked)?;
    tape.reshape(flat, &[rows, cols])
}

/// Plain average of the bank rows.
pub fn mean_aggregate<S: Scalar>(tape: &mut Tape<S>, stacked: Var, rows: usize, cols: usize) -> Result<Var> {
    let n = tape.shape(stacked)[0];
    let w = tape.constant(vec![1, n], vec![S::one() / S::lit(n as f64); n])?;
    aggregate(tape, w, stacked, rows, cols)
}

/// `x + act(LN(x·Aᵀ))·Bᵀ` on `[m×d]` rows.
pub fn adapter_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &AdapterVars,
    opts: &AdapterOptions,
) -> Result<Var> {
    let down_t = tape.transpose(p.down)?;
    let mut h = tape.matmul(x, down_t)?;
    if opts.layer_norm {
        h = tape.layer_norm(h, p.ln_gamma, p.ln_beta, S::lit(opts.eps))?;
    }
    if opts.activation == Activation::Relu {
        h = tape.relu(h);
    }
    let up_t = tape.transpose(p.up)?;
    let out = tape.matmul(h, up_t)?;
    if opts.residual {
        tape.add(x, out)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare() -> AdapterOptions {
        AdapterOptions {
            activation: Activation::Identity,
            residual: false,
            layer_norm: false,
            eps: 1e-5,
        }
    }

    fn vars(tape: &mut Tape<f64>, down: Vec<f64>, up: Vec<f64>, b: usize, d: usize) -> AdapterVars {
        AdapterVars {
            down: tape.constant(vec![b, d], down).unwrap(),
            up: tape.constant(vec![d, b], up).unwrap(),
            ln_gamma: tape.constant(vec![b], vec![1.0; b]).unwrap(),
            ln_beta: tape.constant(vec![b], vec![0.0; b]).unwrap(),
        }
    }

    #[test]
    fn one_hot_weights_pick_a_bank_row() {
        let mut t = Tape::<f64>::new();
        let stacked = t.constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = t.constant(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        let a = aggregate(&mut t, w, stacked, 1, 2).unwrap();
        assert_eq!(t.value(a), &[3.0, 4.0]);
        let m = mean_aggregate(&mut t, stacked, 2, 1).unwrap();
        assert_eq!(t.value(m), &[3.0, 4.0]);
    }

    #[test]
    fn identity_unit_bottleneck() {
        // d = 2, b = 1: A = [1, 0], B = [1, 0]ᵀ keeps the first coordinate.
        let mut t = Tape::<f64>::new();
        let p = vars(&mut t, vec![1.0, 0.0], vec![1.0, 0.0], 1, 2);
        let x = t.constant(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let y = adapter_forward(&mut t, x, &p, &bare()).unwrap();
        assert_eq!(t.value(y), &[3.0, 0.0]);
        let with_res = AdapterOptions { residual: true, ..bare() };
        let y = adapter_forward(&mut t, x, &p, &with_res).unwrap();
        assert_eq!(t.value(y), &[6.0, 4.0]);
    }

    #[test]
    fn zero_up_projection_is_identity_with_residual() {
        let mut t = Tape::<f64>::new();
        let p = vars(&mut t, vec![0.3, -0.2, 0.1, 0.4], vec![0.0; 4], 2, 2);
        let x = t.constant(vec![2, 2], vec![1.0, -2.0, 0.5, 7.0]).unwrap();
        let y = adapter_forward(&mut t, x, &p, &AdapterOptions::default()).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn relu_clips_bottleneck() {
        let mut t = Tape::<f64>::new();
        let p = vars(&mut t, vec![-1.0, 0.0], vec![1.0, 1.0], 1, 2);
        let x = t.constant(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let opts = AdapterOptions {
            activation: Activation::Relu,
            ..bare()
        };
        let y = adapter_forward(&mut t, x, &p, &opts).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0]);
    }
}
