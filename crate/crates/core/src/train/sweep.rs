use super::reg::RegCoefficients;
use super::trainer::{fit, EpochMetrics, Scheme, TrainConfig, TrainState};
use crate::cost::{baseline_cost, op_counts, CostReport, ParetoPoint};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::nn::Network;

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub accuracy: f64,
    pub cost: CostReport,
    pub mean_k: f64,
    pub point: ParetoPoint,
    pub history: Vec<EpochMetrics>,
}

/// One `(λ, seed)` cell; a failed cell keeps its error and the sweep goes on.
#[derive(Debug)]
pub struct SweepCell {
    pub lambda: RegCoefficients,
    pub seed: u64,
    pub outcome: Result<SweepOutcome>,
}

/// Test accuracy, cost and Pareto point of a trained state.
pub fn summarize(state: &TrainState<f32>, model_id: &str, split: &Split) -> Result<(f64, CostReport, f64, ParetoPoint)> {
    let accuracy = state.evaluate(&split.test)?;
    let (cost, mean_k) = match state.config.scheme {
        Scheme::FullPrecision => (baseline_cost(&state.net, 32), 0.0),
        _ => {
            let model = state.quantized_model()?;
            (op_counts(&state.net, &model)?, model.mean_k())
        }
    };
    let point = ParetoPoint::new(model_id, &state.config.lambda.0, state.config.seed, accuracy, &cost, mean_k)?;
    Ok((accuracy, cost, mean_k, point))
}

/// Trains one model per `(λ, seed)` pair, λ-major.
pub fn sweep_lambda(
    net: &Network,
    base: &TrainConfig,
    lambdas: &[RegCoefficients],
    seeds: &[u64],
    split: &Split,
    model_id: &str,
) -> Result<Vec<SweepCell>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one λ setting and one seed".into()));
    }
    let mut cells = Vec::with_capacity(lambdas.len() * seeds.len());
    for lambda in lambdas {
        for &seed in seeds {
            let cfg = TrainConfig { lambda: lambda.clone(), seed, ..base.clone() };
            let outcome = fit(net, &cfg, &split.train, None, |_| {}).and_then(|(state, history)| {
                let (accuracy, cost, mean_k, point) = summarize(&state, model_id, split)?;
                Ok(SweepOutcome { accuracy, cost, mean_k, point, history })
            });
            cells.push(SweepCell { lambda: lambda.clone(), seed, outcome });
        }
    }
    Ok(cells)
}
