//! Central finite-difference gradient checks in double precision.
//!
//! The relative error of one entry is `|analytic - numeric| / max(|analytic|,
//! |numeric|, DENOM_FLOOR)`. The floor keeps entries whose true gradient is
//! essentially zero from turning round-off noise into huge ratios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Result, Tape, Tensor, Var, MASK_SENTINEL};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const DENOM_FLOOR: f64 = 1e-3;

/// Builds a scalar loss from leaf handles (one per input tensor, in order).
pub type LossFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares tape gradients of `loss` against central differences for every
/// entry of every input.
pub fn check(
    inputs: &[Tensor<f64>],
    eps: f64,
    fault: Option<OpKind>,
    loss: &LossFn<'_>,
) -> Result<CheckOutcome> {
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = loss(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    tape.set_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("param gradient").data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    Ok(CheckOutcome {
        max_rel_err: worst,
        entries_checked: checked,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: OpKind,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(|r| r.passed)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Values bounded away from zero so relu's kink is never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Reduces a tensor to a scalar through fixed random weights, so that every
/// output entry contributes with a distinct coefficient.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let flat = tape.reshape(out, &[weights.len()])?;
    let prod = tape.mul(flat, w)?;
    tape.sum(prod)
}

fn case(kind: OpKind, rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let outcome = match kind {
        OpKind::MatMul => {
            let w = random(rng, &[6]);
            check(
                &[random(rng, &[3, 4]), random(rng, &[4, 2])],
                DEFAULT_EPS,
                fault,
                &|t, v| {
                    let o = t.matmul(v[0], v[1])?;
                    weighted_sum(t, o, &w)
                },
            )?
        }
        OpKind::Transpose => {
            let w = random(rng, &[6]);
            check(&[random(rng, &[2, 3])], DEFAULT_EPS, fault, &|t, v| {
                let o = t.transpose(v[0])?;
                weighted_sum(t, o, &w)
            })?
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let w = random(rng, &[8]);
            check(
                &[random(rng, &[2, 4]), random(rng, &[1, 4])],
                DEFAULT_EPS,
                fault,
                &|t, v| {
                    let o = match kind {
                        OpKind::Add => t.add(v[0], v[1])?,
                        OpKind::Sub => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    weighted_sum(t, o, &w)
                },
            )?
        }
        OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh => {
            let w = random(rng, &[6]);
            check(
                &[away_from_zero(rng, &[2, 3])],
                DEFAULT_EPS,
                fault,
                &|t, v| {
                    let o = match kind {
                        OpKind::Relu => t.relu(v[0])?,
                        OpKind::Sigmoid => t.sigmoid(v[0])?,
                        _ => t.tanh(v[0])?,
                    };
                    weighted_sum(t, o, &w)
                },
            )?
        }
        OpKind::Scale => {
            let w = random(rng, &[5]);
            check(&[random(rng, &[5])], DEFAULT_EPS, fault, &|t, v| {
                let o = t.scale(v[0], -0.37)?;
                weighted_sum(t, o, &w)
            })?
        }
        OpKind::Softmax => {
            let w = random(rng, &[8]);
            check(&[random(rng, &[2, 4])], DEFAULT_EPS, fault, &|t, v| {
                let o = t.softmax(v[0])?;
                weighted_sum(t, o, &w)
            })?
        }
        OpKind::CausalMask => {
            let w = random(rng, &[9]);
            check(&[random(rng, &[3, 3])], DEFAULT_EPS, fault, &|t, v| {
                let m = t.causal_mask(v[0])?;
                let o = t.softmax(m)?;
                weighted_sum(t, o, &w)
            })?
        }
        OpKind::ConcatCols => {
            let w = random(rng, &[8]);
            check(
                &[random(rng, &[2, 3]), random(rng, &[2, 1])],
                DEFAULT_EPS,
                fault,
                &|t, v| {
                    let o = t.concat_cols(&[v[0], v[1]])?;
                    weighted_sum(t, o, &w)
                },
            )?
        }
        OpKind::ConcatRows => {
            let w = random(rng, &[9]);
            check(
                &[random(rng, &[2, 3]), random(rng, &[1, 3])],
                DEFAULT_EPS,
                fault,
                &|t, v| {
                    let o = t.concat_rows(&[v[0], v[1]])?;
                    weighted_sum(t, o, &w)
                },
            )?
        }
        OpKind::SliceRows => {
            let w = random(rng, &[6]);
            check(&[random(rng, &[4, 3])], DEFAULT_EPS, fault, &|t, v| {
                let o = t.slice_rows(v[0], 1, 2)?;
                weighted_sum(t, o, &w)
            })?
        }
        OpKind::SliceCols => {
            let w = random(rng, &[6]);
            check(&[random(rng, &[3, 4])], DEFAULT_EPS, fault, &|t, v| {
                let o = t.slice_cols(v[0], 1, 2)?;
                weighted_sum(t, o, &w)
            })?
        }
        OpKind::Gather => {
            let w = random(rng, &[12]);
            check(&[random(rng, &[5, 3])], DEFAULT_EPS, fault, &|t, v| {
                let o = t.gather(v[0], &[4, 0, 4, 2])?;
                weighted_sum(t, o, &w)
            })?
        }
        OpKind::Reshape => {
            let w = random(rng, &[6]);
            check(&[random(rng, &[2, 3])], DEFAULT_EPS, fault, &|t, v| {
                let o = t.reshape(v[0], &[3, 2])?;
                weighted_sum(t, o, &w)
            })?
        }
        OpKind::Sum => check(&[random(rng, &[2, 3])], DEFAULT_EPS, fault, &|t, v| {
            let s = t.sum(v[0])?;
            t.scale(s, 1.7)
        })?,
        OpKind::CrossEntropy => check(&[random(rng, &[3, 5])], DEFAULT_EPS, fault, &|t, v| {
            t.cross_entropy(v[0], &[4, 0, 2])
        })?,
    };
    Ok(outcome.max_rel_err)
}

/// Runs the finite-difference check for every op the tape can record.
pub fn check_all_ops(seed: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::with_capacity(OpKind::ALL.len());
    for kind in OpKind::ALL {
        let err = case(kind, &mut rng, fault)?;
        ops.push(OpReport {
            op: kind,
            max_rel_err: err,
            passed: err <= OP_TOLERANCE,
        });
    }
    Ok(SuiteReport {
        tolerance: OP_TOLERANCE,
        ops,
    })
}

/// Softmax with one masked column, checked separately because the masked
/// entry must receive exactly zero gradient.
pub fn masked_softmax_gradient_is_zero() -> Result<bool> {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_parts(
        vec![1, 3],
        vec![0.3, -0.2, MASK_SENTINEL],
    ));
    let s = tape.softmax(x)?;
    let w = tape.constant(Tensor::from_parts(vec![1, 3], vec![0.5, -1.0, 2.0]));
    let p = tape.mul(s, w)?;
    let l = tape.sum(p)?;
    let g = tape.backward(l)?;
    Ok(g.get(x).map(|t| t.data()[2] == 0.0).unwrap_or(false))
}
