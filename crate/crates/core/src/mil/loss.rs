use crate::error::{Error, Result};
use crate::graph::Event;
use crate::numerics::{sigmoid, softplus, CustomOp, Tape, Tensor, Var};

/// `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Validation(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Discrete-time hazard negative log-likelihood with `h_t = sigmoid(l_t)`.
///
/// Observed at `bin`: `-log S(bin-1) - log h(bin)`; censored: `-log S(bin)`.
/// Written with `-log(1-h) = softplus(l)` and `-log h = softplus(-l)`.
pub fn survival_nll(logits: &[f64], time_bin: usize, event: Event) -> Result<f64> {
    if time_bin >= logits.len() {
        return Err(Error::Validation(format!(
            "time bin {time_bin} outside {} bins",
            logits.len()
        )));
    }
    let survived: f64 = logits[..time_bin].iter().map(|&l| softplus(l)).sum();
    Ok(match event {
        Event::Observed => survived + softplus(-logits[time_bin]),
        Event::Censored => survived + softplus(logits[time_bin]),
    })
}

/// Per-bin hazards `sigmoid(l_t)`.
pub fn hazards(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&l| sigmoid(l)).collect()
}

/// `S(t) = Π_{τ≤t} (1 - h_τ)`.
pub fn survival_curve(logits: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    hazards(logits)
        .into_iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect()
}

/// Risk score `Σ_t (1 - S(t))`; larger means earlier expected event.
pub fn risk_score(logits: &[f64]) -> f64 {
    survival_curve(logits).iter().map(|s| 1.0 - s).sum()
}

#[derive(Debug)]
struct CrossEntropyOp {
    label: usize,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let logits = inputs[0].data();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        let d = logits
            .iter()
            .enumerate()
            .map(|(k, v)| g[0] * ((v - mx).exp() / z - if k == self.label { 1.0 } else { 0.0 }))
            .collect();
        vec![Some(d)]
    }
}

#[derive(Debug)]
struct SurvivalNllOp {
    time_bin: usize,
    event: Event,
}

impl CustomOp for SurvivalNllOp {
    fn name(&self) -> &'static str {
        "survival_nll"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let logits = inputs[0].data();
        let mut d = vec![0.0; logits.len()];
        for (t, &l) in logits.iter().enumerate().take(self.time_bin) {
            d[t] = g[0] * sigmoid(l);
        }
        let l = logits[self.time_bin];
        d[self.time_bin] = g[0]
            * match self.event {
                Event::Observed => sigmoid(l) - 1.0,
                Event::Censored => sigmoid(l),
            };
        vec![Some(d)]
    }
}

pub fn cross_entropy_recorded(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let loss = cross_entropy(tape.value(logits).data(), label)?;
    Ok(tape.custom(&[logits], Tensor::scalar(loss), Box::new(CrossEntropyOp { label })))
}

pub fn survival_nll_recorded(tape: &mut Tape, logits: Var, time_bin: usize, event: Event) -> Result<Var> {
    let loss = survival_nll(tape.value(logits).data(), time_bin, event)?;
    Ok(tape.custom(
        &[logits],
        Tensor::scalar(loss),
        Box::new(SurvivalNllOp { time_bin, event }),
    ))
}
