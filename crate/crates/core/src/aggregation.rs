//! Server-side fusion of collaborator updates.
//!
//! Four strategies share one pipeline:
//!
//! * `plain_mean`: every collaborator weighs `1/k`.
//! * `fedavg`: weights proportional to sample counts.
//! * `simagg`: similarity weights `u` (inverse distance to the round mean,
//!   normalised) and sample weights `v` are averaged into `w = (u+v)/Σ(u+v)`.
//! * `regsimagg`: `simagg`, and once the round index passes the configured
//!   onset each weight is divided by `drift + ε`, where drift is the mean over
//!   collaborators of `‖prev_params − params‖`, then renormalised.
//!
//! Because the drift divisor is shared by every collaborator in a weight group,
//! renormalisation cancels it: post-onset `regsimagg` weights equal the
//! `simagg` weights up to floating-point rounding (a few ulp). Up to and
//! including the onset round the two strategies are bit-identical.
//!
//! The master parameters are the convex combination `Σ final_c · p_c`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{
    axpy_combine, combine_per_tensor, global_distance, mean_params, tensor_distances, Norm,
    ParameterSet, Scope,
};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_REGULARIZATION_START: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    PlainMean,
    #[serde(rename = "simagg")]
    SimAgg,
    #[default]
    #[serde(rename = "regsimagg")]
    RegSimAgg,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FedAvg,
        Strategy::PlainMean,
        Strategy::SimAgg,
        Strategy::RegSimAgg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::PlainMean => "plain_mean",
            Strategy::SimAgg => "simagg",
            Strategy::RegSimAgg => "regsimagg",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Strategy::ALL.iter().map(|v| v.as_str()).collect();
                Error::BadConfig(format!(
                    "unknown strategy `{s}`, expected one of: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub strategy: Strategy,
    pub epsilon: f64,
    /// Regularization applies to rounds strictly greater than this index.
    pub regularization_start_round: u32,
    pub scope: Scope,
    pub norm: Norm,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::default(),
            epsilon: DEFAULT_EPSILON,
            regularization_start_round: DEFAULT_REGULARIZATION_START,
            scope: Scope::default(),
            norm: Norm::default(),
        }
    }
}

impl AggregationConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::BadConfig(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn regularizes(&self, round: u32) -> bool {
        self.strategy == Strategy::RegSimAgg && round > self.regularization_start_round
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollaboratorUpdate {
    pub collab_id: String,
    pub params: ParameterSet,
    pub sample_count: u64,
    /// Parameters the collaborator started the round from.
    pub prev_params: Option<ParameterSet>,
}

impl CollaboratorUpdate {
    pub fn new(
        collab_id: impl Into<String>,
        params: ParameterSet,
        sample_count: u64,
        prev_params: Option<ParameterSet>,
    ) -> Result<Self> {
        let update = Self {
            collab_id: collab_id.into(),
            params,
            sample_count,
            prev_params,
        };
        update.validate()?;
        Ok(update)
    }

    fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::ZeroSamples(self.collab_id.clone()));
        }
        if let Some(prev) = &self.prev_params {
            self.params.ensure_compatible(prev)?;
        }
        Ok(())
    }
}

/// Weights for one group of parameters: the whole set in global scope, or one
/// tensor in per-tensor scope. Vectors are indexed like the update list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGroup {
    /// Tensor name in per-tensor scope, `None` for the whole set.
    pub tensor: Option<String>,
    #[serde(with = "crate::hexfloat::option_vec")]
    pub similarity: Option<Vec<f64>>,
    #[serde(with = "crate::hexfloat::vec")]
    pub sample: Vec<f64>,
    #[serde(with = "crate::hexfloat::option_vec")]
    pub combined: Option<Vec<f64>>,
    /// `combined / (drift + ε)` before renormalisation; present only when the
    /// regularizer fired.
    #[serde(with = "crate::hexfloat::option_vec")]
    pub regularized: Option<Vec<f64>>,
    #[serde(with = "crate::hexfloat::option")]
    pub drift: Option<f64>,
    #[serde(rename = "final", with = "crate::hexfloat::vec")]
    pub final_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub strategy: Strategy,
    pub scope: Scope,
    pub collaborators: Vec<String>,
    pub regularized: bool,
    pub groups: Vec<WeightGroup>,
}

impl AggregationWeights {
    /// Final weights of collaborator `i` for every group.
    pub fn final_for(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        self.groups.iter().map(move |g| g.final_weights[i])
    }
}

fn validate_updates(updates: &[CollaboratorUpdate]) -> Result<()> {
    let first = updates
        .first()
        .ok_or(Error::EmptyInput("no collaborator updates"))?;
    for u in updates {
        u.validate()?;
        first.params.ensure_compatible(&u.params)?;
    }
    Ok(())
}

fn normalize(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    values.iter().map(|v| v / total).collect()
}

/// Similarity weights from each collaborator's distance to the round mean:
/// `sim_c = Σᵢ dᵢ / (d_c + ε)`, `u_c = sim_c / Σᵢ simᵢ`.
///
/// When every distance is zero all `sim_c` vanish; the weights then take their
/// limit as the distances shrink uniformly, which is `1/k`.
pub fn similarity_from_distances(distances: &[f64], epsilon: f64) -> Vec<f64> {
    let total: f64 = distances.iter().sum();
    let sims: Vec<f64> = distances.iter().map(|d| total / (d + epsilon)).collect();
    let sim_total: f64 = sims.iter().sum();
    if sim_total > 0.0 && sim_total.is_finite() {
        sims.iter().map(|s| s / sim_total).collect()
    } else {
        vec![1.0 / distances.len() as f64; distances.len()]
    }
}

/// Similarity weights over whole parameter sets.
pub fn similarity_weights(
    updates: &[CollaboratorUpdate],
    epsilon: f64,
    norm: Norm,
) -> Result<Vec<f64>> {
    validate_updates(updates)?;
    let mean = round_mean(updates)?;
    let distances = updates
        .iter()
        .map(|u| global_distance(&u.params, &mean, norm))
        .collect::<Result<Vec<_>>>()?;
    Ok(similarity_from_distances(&distances, epsilon))
}

/// Similarity weights computed separately for every tensor; `result[t][c]`.
pub fn tensor_similarity_weights(
    updates: &[CollaboratorUpdate],
    epsilon: f64,
    norm: Norm,
) -> Result<Vec<Vec<f64>>> {
    validate_updates(updates)?;
    let mean = round_mean(updates)?;
    let per_collab = updates
        .iter()
        .map(|u| tensor_distances(&u.params, &mean, norm))
        .collect::<Result<Vec<_>>>()?;
    Ok(transpose(&per_collab)
        .iter()
        .map(|d| similarity_from_distances(d, epsilon))
        .collect())
}

fn round_mean(updates: &[CollaboratorUpdate]) -> Result<ParameterSet> {
    let sets: Vec<&ParameterSet> = updates.iter().map(|u| &u.params).collect();
    mean_params(&sets)
}

fn transpose(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect()
}

/// `v_c = N_c / Σᵢ Nᵢ`.
pub fn sample_weights(updates: &[CollaboratorUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::EmptyInput("no collaborator updates"));
    }
    if let Some(u) = updates.iter().find(|u| u.sample_count == 0) {
        return Err(Error::ZeroSamples(u.collab_id.clone()));
    }
    let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
    Ok(updates
        .iter()
        .map(|u| u.sample_count as f64 / total)
        .collect())
}

/// `w_c = (u_c + v_c) / Σᵢ (uᵢ + vᵢ)`.
pub fn combine_weights(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    if u.is_empty() {
        return Err(Error::EmptyInput("no weights"));
    }
    let sums: Vec<f64> = u.iter().zip(v).map(|(a, b)| a + b).collect();
    Ok(normalize(&sums))
}

/// Mean over collaborators of `‖prev_params − params‖` over the whole set.
pub fn round_drift(updates: &[CollaboratorUpdate], norm: Norm) -> Result<f64> {
    validate_updates(updates)?;
    let mut total = 0.0;
    for u in updates {
        let prev = u
            .prev_params
            .as_ref()
            .ok_or_else(|| Error::MissingPrevParams(u.collab_id.clone()))?;
        total += global_distance(prev, &u.params, norm)?;
    }
    Ok(total / updates.len() as f64)
}

/// Per-tensor drift, in schema order.
pub fn tensor_drifts(updates: &[CollaboratorUpdate], norm: Norm) -> Result<Vec<f64>> {
    validate_updates(updates)?;
    let mut totals = vec![0.0; updates[0].params.num_tensors()];
    for u in updates {
        let prev = u
            .prev_params
            .as_ref()
            .ok_or_else(|| Error::MissingPrevParams(u.collab_id.clone()))?;
        for (t, d) in totals
            .iter_mut()
            .zip(tensor_distances(prev, &u.params, norm)?)
        {
            *t += d;
        }
    }
    let k = updates.len() as f64;
    Ok(totals.into_iter().map(|t| t / k).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regularization {
    /// `None` when the regularizer did not fire this round.
    pub drift: Option<f64>,
    pub scaled: Option<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Divides `w` by `drift + ε` and renormalises.
pub fn regularize_with_drift(w: &[f64], drift: f64, epsilon: f64) -> Regularization {
    let scaled: Vec<f64> = w.iter().map(|x| x / (drift + epsilon)).collect();
    let weights = normalize(&scaled);
    Regularization {
        drift: Some(drift),
        scaled: Some(scaled),
        weights,
    }
}

/// Regularizes whole-set weights. A no-op unless the strategy is `regsimagg`
/// and `round > regularization_start_round`.
pub fn regularize_weights(
    w: &[f64],
    updates: &[CollaboratorUpdate],
    round: u32,
    cfg: &AggregationConfig,
) -> Result<Regularization> {
    if w.len() != updates.len() {
        return Err(Error::LengthMismatch {
            expected: updates.len(),
            actual: w.len(),
        });
    }
    if !cfg.regularizes(round) {
        return Ok(Regularization {
            drift: None,
            scaled: None,
            weights: w.to_vec(),
        });
    }
    let drift = round_drift(updates, cfg.norm)?;
    Ok(regularize_with_drift(w, drift, cfg.epsilon))
}

/// Runs one round of aggregation and returns the master parameters together
/// with every intermediate weight vector.
pub fn aggregate(
    updates: &[CollaboratorUpdate],
    round: u32,
    cfg: &AggregationConfig,
) -> Result<(ParameterSet, AggregationWeights)> {
    cfg.validate()?;
    validate_updates(updates)?;
    let k = updates.len();
    let sets: Vec<&ParameterSet> = updates.iter().map(|u| &u.params).collect();
    let v = sample_weights(updates)?;
    let collaborators = updates.iter().map(|u| u.collab_id.clone()).collect();
    let regularized = cfg.regularizes(round);

    let flat_group = |final_weights: Vec<f64>| WeightGroup {
        tensor: None,
        similarity: None,
        sample: v.clone(),
        combined: None,
        regularized: None,
        drift: None,
        final_weights,
    };

    let groups = match (cfg.strategy, cfg.scope) {
        (Strategy::PlainMean, _) => vec![flat_group(vec![1.0 / k as f64; k])],
        (Strategy::FedAvg, _) => vec![flat_group(v.clone())],
        (Strategy::SimAgg | Strategy::RegSimAgg, Scope::Global) => {
            let u = similarity_weights(updates, cfg.epsilon, cfg.norm)?;
            let w = combine_weights(&u, &v)?;
            let reg = regularize_weights(&w, updates, round, cfg)?;
            vec![WeightGroup {
                tensor: None,
                similarity: Some(u),
                sample: v.clone(),
                combined: Some(w),
                regularized: reg.scaled,
                drift: reg.drift,
                final_weights: reg.weights,
            }]
        }
        (Strategy::SimAgg | Strategy::RegSimAgg, Scope::PerTensor) => {
            let per_tensor_u = tensor_similarity_weights(updates, cfg.epsilon, cfg.norm)?;
            let drifts = if regularized {
                Some(tensor_drifts(updates, cfg.norm)?)
            } else {
                None
            };
            per_tensor_u
                .into_iter()
                .zip(sets[0].tensor_names())
                .enumerate()
                .map(|(t, (u, name))| {
                    let w = combine_weights(&u, &v)?;
                    let reg = match &drifts {
                        Some(d) => regularize_with_drift(&w, d[t], cfg.epsilon),
                        None => Regularization {
                            drift: None,
                            scaled: None,
                            weights: w.clone(),
                        },
                    };
                    Ok(WeightGroup {
                        tensor: Some(name.to_string()),
                        similarity: Some(u),
                        sample: v.clone(),
                        combined: Some(w),
                        regularized: reg.scaled,
                        drift: reg.drift,
                        final_weights: reg.weights,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let master = if groups.len() == 1 && groups[0].tensor.is_none() {
        axpy_combine(&groups[0].final_weights, &sets)?
    } else {
        let per_tensor: Vec<&[f64]> = groups.iter().map(|g| g.final_weights.as_slice()).collect();
        combine_per_tensor(&per_tensor, &sets)?
    };

    Ok((
        master,
        AggregationWeights {
            strategy: cfg.strategy,
            scope: cfg.scope,
            collaborators,
            regularized,
            groups,
        },
    ))
}
