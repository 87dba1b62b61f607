//! Tuning-complexity weights.
//!
//! An operator's weight is a linear function of the product of log2 loop
//! extents over its nest: w = c * prod(log2(s_l)) + b, with unit-extent
//! loops excluded so a batch size of 1 does not zero the product. Subgraph
//! weight is the sum over member operators.

use thiserror::Error;

use crate::graph::{GraphError, LoopNest, OperatorNode};

#[derive(Debug, Error)]
pub enum WeightError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("slope c must be positive, got {0}")]
    NonPositiveSlope(f64),
    #[error("subgraph weight of an empty node set")]
    EmptySubgraph,
    #[error("degenerate fit: all observations have the same feature value")]
    DegenerateFit,
    #[error("fit requires at least two observations, got {0}")]
    TooFewObservations(usize),
    #[error("observation without loop nests")]
    EmptyObservation,
    #[error("tuning budget must be positive, got {0}")]
    NonPositiveBudget(f64),
}

/// Slope and bias of the weight model; log base is fixed at 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightParams {
    pub c: f64,
    pub b: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams { c: 1.0, b: 0.0 }
    }
}

impl WeightParams {
    pub fn new(c: f64, b: f64) -> Result<Self, WeightError> {
        if c <= 0.0 || !c.is_finite() {
            return Err(WeightError::NonPositiveSlope(c));
        }
        Ok(WeightParams { c, b })
    }
}

/// Product of log2 over non-unit loop extents; 0 when every loop is unit.
fn log_product(nest: &LoopNest) -> f64 {
    let mut prod = 1.0;
    let mut any = false;
    for extent in nest.extents() {
        if extent > 1 {
            prod *= (extent as f64).log2();
            any = true;
        }
    }
    if any {
        prod
    } else {
        0.0
    }
}

/// Weight of one operator's loop nest under `params`.
pub fn op_weight(nest: &LoopNest, params: &WeightParams) -> f64 {
    params.c * log_product(nest) + params.b
}

/// Sum of member operator weights; errors on an empty set.
pub fn subgraph_weight<'a, I>(nodes: I, params: &WeightParams) -> Result<f64, WeightError>
where
    I: IntoIterator<Item = &'a OperatorNode>,
{
    let mut total = 0.0;
    let mut any = false;
    for node in nodes {
        total += op_weight(&node.loop_nest()?, params);
        any = true;
    }
    if any {
        Ok(total)
    } else {
        Err(WeightError::EmptySubgraph)
    }
}

/// One measured tuning run: the loop nests of a subgraph and the budget
/// (number of explored schedules) it took to stabilize.
#[derive(Debug, Clone)]
pub struct BudgetObservation {
    pub loop_nests: Vec<LoopNest>,
    pub budget: f64,
}

impl BudgetObservation {
    pub fn new(loop_nests: Vec<LoopNest>, budget: f64) -> Result<Self, WeightError> {
        if loop_nests.is_empty() {
            return Err(WeightError::EmptyObservation);
        }
        if budget <= 0.0 || !budget.is_finite() {
            return Err(WeightError::NonPositiveBudget(budget));
        }
        Ok(BudgetObservation { loop_nests, budget })
    }

    /// Regression feature: sum over nests of the log2-extent product.
    pub fn feature(&self) -> f64 {
        self.loop_nests.iter().map(log_product).sum()
    }
}

/// Least-squares fit of (c, b) to budget = c * feature + b.
pub fn fit(observations: &[BudgetObservation]) -> Result<WeightParams, WeightError> {
    if observations.len() < 2 {
        return Err(WeightError::TooFewObservations(observations.len()));
    }
    let n = observations.len() as f64;
    let xs: Vec<f64> = observations.iter().map(|o| o.feature()).collect();
    let ys: Vec<f64> = observations.iter().map(|o| o.budget).collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return Err(WeightError::DegenerateFit);
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let c = sxy / sxx;
    let b = mean_y - c * mean_x;
    WeightParams::new(c, b)
}
