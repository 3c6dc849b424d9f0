//! Target distributions: log-density and gradient evaluation.
//!
//! Built-in targets are the diagonal Gaussian family (including the
//! ill-conditioned variant with log-spaced variances) and a 2-D banana
//! shape for uneven curvature. Gaussian log-densities include the
//! normalizing constant so fixtures can be checked by hand.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

#[derive(Debug)]
enum TargetKind {
    /// Independent Gaussian coordinates.
    DiagonalGaussian { mean: Vec<f64>, variances: Vec<f64> },
    /// log p(x, y) = -x^2/(2 scale^2) - (y - curvature x^2)^2 / 2
    Banana { curvature: f64, scale: f64 },
}

/// A d-dimensional target density with cheap analytic gradients.
///
/// The gradient-evaluation counter is the engine's cost unit; it only
/// moves when a gradient is requested and is safe under concurrent
/// increments from many chains.
#[derive(Debug)]
pub struct TargetModel {
    name: String,
    dim: usize,
    kind: TargetKind,
    analytic_mean: Option<Vec<f64>>,
    analytic_marginal_sd: Option<Vec<f64>>,
    grad_evals: AtomicU64,
}

impl TargetModel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn analytic_mean(&self) -> Option<&[f64]> {
        self.analytic_mean.as_deref()
    }

    pub fn analytic_marginal_sd(&self) -> Option<&[f64]> {
        self.analytic_marginal_sd.as_deref()
    }

    /// Total gradient evaluations recorded so far. Monotone; never reset.
    pub fn gradient_evals(&self) -> u64 {
        self.grad_evals.load(Ordering::Relaxed)
    }

    #[cfg(test)]
    pub(crate) fn diagonal_variances(&self) -> Option<&[f64]> {
        match &self.kind {
            TargetKind::DiagonalGaussian { variances, .. } => Some(variances),
            TargetKind::Banana { .. } => None,
        }
    }

    fn check_dim(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::invalid(format!(
                "dimension mismatch: model '{}' has d={}, point has d={}",
                self.name,
                self.dim,
                theta.len()
            )));
        }
        Ok(())
    }

    /// Log density up to the stated constants. Does not touch the counter.
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        self.check_dim(theta)?;
        Ok(match &self.kind {
            TargetKind::DiagonalGaussian { mean, variances } => {
                let mut lp = 0.0;
                for i in 0..self.dim {
                    let z = theta[i] - mean[i];
                    lp -= 0.5 * (z * z / variances[i] + (2.0 * PI * variances[i]).ln());
                }
                lp
            }
            TargetKind::Banana { curvature, scale } => {
                let (x, y) = (theta[0], theta[1]);
                let r = y - curvature * x * x;
                -0.5 * x * x / (scale * scale) - 0.5 * r * r
                    - 0.5 * (2.0 * PI * scale * scale).ln()
                    - 0.5 * (2.0 * PI).ln()
            }
        })
    }

    /// Log density and gradient, writing the gradient into `grad`.
    /// Increments the gradient-evaluation counter.
    pub fn evaluate_into(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check_dim(theta)?;
        if grad.len() != self.dim {
            return Err(Error::invalid("gradient buffer has wrong length"));
        }
        self.grad_evals.fetch_add(1, Ordering::Relaxed);
        Ok(match &self.kind {
            TargetKind::DiagonalGaussian { mean, variances } => {
                let mut lp = 0.0;
                for i in 0..self.dim {
                    let z = theta[i] - mean[i];
                    lp -= 0.5 * (z * z / variances[i] + (2.0 * PI * variances[i]).ln());
                    grad[i] = -z / variances[i];
                }
                lp
            }
            TargetKind::Banana { curvature, scale } => {
                let (x, y) = (theta[0], theta[1]);
                let r = y - curvature * x * x;
                grad[0] = -x / (scale * scale) + 2.0 * curvature * x * r;
                grad[1] = -r;
                -0.5 * x * x / (scale * scale) - 0.5 * r * r
                    - 0.5 * (2.0 * PI * scale * scale).ln()
                    - 0.5 * (2.0 * PI).ln()
            }
        })
    }

    /// Log density and gradient as a fresh vector.
    pub fn evaluate(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.dim];
        let lp = self.evaluate_into(theta, &mut grad)?;
        Ok((lp, grad))
    }
}

/// Diagonal-covariance Gaussian with analytic moments populated.
pub fn make_gaussian(mean: Vec<f64>, marginal_variances: Vec<f64>) -> Result<TargetModel> {
    if mean.is_empty() || mean.len() != marginal_variances.len() {
        return Err(Error::invalid(
            "mean and variance vectors must be nonempty and equal length",
        ));
    }
    if let Some(v) = marginal_variances.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(format!("non-positive variance {v}")));
    }
    let dim = mean.len();
    let sds = marginal_variances.iter().map(|v| v.sqrt()).collect();
    Ok(TargetModel {
        name: format!("gaussian(d={dim})"),
        dim,
        analytic_mean: Some(mean.clone()),
        analytic_marginal_sd: Some(sds),
        kind: TargetKind::DiagonalGaussian {
            mean,
            variances: marginal_variances,
        },
        grad_evals: AtomicU64::new(0),
    })
}

/// Zero-mean diagonal Gaussian with marginal variances log-spaced from 1 to
/// `condition_number`, endpoints exact.
pub fn make_ill_conditioned(dim: usize, condition_number: f64) -> Result<TargetModel> {
    if dim < 2 {
        return Err(Error::invalid("ill-conditioned Gaussian needs d >= 2"));
    }
    if !(condition_number >= 1.0) {
        return Err(Error::invalid("condition number must be >= 1"));
    }
    let mut variances = vec![0.0; dim];
    for (i, v) in variances.iter_mut().enumerate() {
        *v = condition_number.powf(i as f64 / (dim - 1) as f64);
    }
    variances[0] = 1.0;
    variances[dim - 1] = condition_number;
    let mut model = make_gaussian(vec![0.0; dim], variances)?;
    model.name = format!("illcond(d={dim},kappa={condition_number})");
    Ok(model)
}

/// 2-D banana (Rosenbrock-style) target. The marginal law is x ~ N(0, scale^2)
/// with y | x ~ N(curvature x^2, 1), so the moments below are exact.
pub fn make_banana(curvature: f64, scale: f64) -> Result<TargetModel> {
    if !(scale > 0.0) {
        return Err(Error::invalid("banana scale must be positive"));
    }
    let s2 = scale * scale;
    Ok(TargetModel {
        name: format!("banana(curv={curvature},scale={scale})"),
        dim: 2,
        analytic_mean: Some(vec![0.0, curvature * s2]),
        analytic_marginal_sd: Some(vec![
            scale,
            (2.0 * curvature * curvature * s2 * s2 + 1.0).sqrt(),
        ]),
        kind: TargetKind::Banana { curvature, scale },
        grad_evals: AtomicU64::new(0),
    })
}

pub const DEFAULT_BANANA_CURVATURE: f64 = 1.0;
pub const DEFAULT_BANANA_SCALE: f64 = 2.0;

/// Parses the textual target grammar used in configs and on the CLI:
///
/// ```text
/// gaussian:d=3,var=2.5          # shared variance (mean defaults to 0)
/// gaussian:d=3,var=1,var=4,var=9  # per-coordinate variances, repeated keys
/// illcond:d=51,kappa=1000
/// banana:curv=1,scale=2         # both optional
/// ```
pub fn parse_target_spec(spec: &str) -> Result<TargetModel> {
    let (kind, args_start) = match spec.find(':') {
        Some(pos) => (&spec[..pos], pos + 1),
        None => (spec, spec.len()),
    };
    let mut fields: Vec<(usize, &str, &str)> = Vec::new();
    let mut offset = args_start;
    if args_start < spec.len() {
        for part in spec[args_start..].split(',') {
            if part.is_empty() {
                return Err(Error::Parse {
                    position: offset,
                    message: "empty field".into(),
                });
            }
            match part.find('=') {
                Some(eq) => fields.push((offset, &part[..eq], &part[eq + 1..])),
                None => {
                    return Err(Error::Parse {
                        position: offset,
                        message: format!("expected key=value, found '{part}'"),
                    })
                }
            }
            offset += part.len() + 1;
        }
    }

    let parse_f64 = |pos: usize, key: &str, val: &str| -> Result<f64> {
        val.parse::<f64>().map_err(|_| Error::Parse {
            position: pos + key.len() + 1,
            message: format!("'{val}' is not a number"),
        })
    };
    let parse_usize = |pos: usize, key: &str, val: &str| -> Result<usize> {
        val.parse::<usize>().map_err(|_| Error::Parse {
            position: pos + key.len() + 1,
            message: format!("'{val}' is not a positive integer"),
        })
    };

    match kind {
        "gaussian" => {
            let mut d: Option<usize> = None;
            let mut vars: Vec<f64> = Vec::new();
            let mut means: Vec<f64> = Vec::new();
            for (pos, key, val) in &fields {
                match *key {
                    "d" => d = Some(parse_usize(*pos, key, val)?),
                    "var" => vars.push(parse_f64(*pos, key, val)?),
                    "mean" => means.push(parse_f64(*pos, key, val)?),
                    _ => {
                        return Err(Error::Parse {
                            position: *pos,
                            message: format!("unknown key '{key}' for gaussian"),
                        })
                    }
                }
            }
            let d = d.unwrap_or_else(|| vars.len().max(means.len()).max(1));
            let vars = match vars.len() {
                0 => vec![1.0; d],
                1 => vec![vars[0]; d],
                n if n == d => vars,
                _ => {
                    return Err(Error::Parse {
                        position: args_start,
                        message: format!("expected 1 or {d} var entries, got {}", vars.len()),
                    })
                }
            };
            let means = match means.len() {
                0 => vec![0.0; d],
                1 => vec![means[0]; d],
                n if n == d => means,
                _ => {
                    return Err(Error::Parse {
                        position: args_start,
                        message: format!("expected 1 or {d} mean entries, got {}", means.len()),
                    })
                }
            };
            make_gaussian(means, vars)
        }
        "illcond" => {
            let mut d: Option<usize> = None;
            let mut kappa: Option<f64> = None;
            for (pos, key, val) in &fields {
                match *key {
                    "d" => d = Some(parse_usize(*pos, key, val)?),
                    "kappa" => kappa = Some(parse_f64(*pos, key, val)?),
                    _ => {
                        return Err(Error::Parse {
                            position: *pos,
                            message: format!("unknown key '{key}' for illcond"),
                        })
                    }
                }
            }
            let d = d.ok_or_else(|| Error::Parse {
                position: args_start,
                message: "illcond requires d=".into(),
            })?;
            let kappa = kappa.ok_or_else(|| Error::Parse {
                position: args_start,
                message: "illcond requires kappa=".into(),
            })?;
            make_ill_conditioned(d, kappa)
        }
        "banana" => {
            let mut curv = DEFAULT_BANANA_CURVATURE;
            let mut scale = DEFAULT_BANANA_SCALE;
            for (pos, key, val) in &fields {
                match *key {
                    "curv" => curv = parse_f64(*pos, key, val)?,
                    "scale" => scale = parse_f64(*pos, key, val)?,
                    _ => {
                        return Err(Error::Parse {
                            position: *pos,
                            message: format!("unknown key '{key}' for banana"),
                        })
                    }
                }
            }
            make_banana(curv, scale)
        }
        other => Err(Error::Parse {
            position: 0,
            message: format!("unknown target kind '{other}'"),
        }),
    }
}
