//! Self-gated multimodal query fusion.
//!
//! Supporting-modality queries are concatenated along the channel dimension,
//! linearly compressed back to (k, d), passed through sigmoid(x) * x
//! self-gating, and concatenated after the primary modality's queries. The
//! compression weight is stored as one (d, d) column group per supporting
//! modality, so adding a modality appends a zero block without disturbing
//! the others.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Modality order and the primary index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// All modalities in fixed order.
    pub order: Vec<String>,
    /// Index of the primary modality in `order`.
    pub primary: usize,
}

impl FusionConfig {
    pub fn new(order: Vec<String>, primary_name: &str) -> Result<Self, ModelError> {
        let primary = order
            .iter()
            .position(|m| m == primary_name)
            .ok_or_else(|| ModelError::UnknownModality(primary_name.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for m in &order {
            if !seen.insert(m) {
                return Err(ModelError::DuplicateModality(m.clone()));
            }
        }
        Ok(FusionConfig { order, primary })
    }

    pub fn primary_name(&self) -> &str {
        &self.order[self.primary]
    }

    /// Supporting modalities, in configured order, excluding the primary.
    pub fn supporting(&self) -> impl Iterator<Item = &String> {
        self.order
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.primary)
            .map(|(_, m)| m)
    }
}

pub fn theta_block_name(modality: &str) -> String {
    format!("smqf.theta.{modality}")
}

pub const THETA_BIAS: &str = "smqf.theta.bias";

/// Insert the compression parameters for the given supporting modalities.
/// Blocks are gaussian at stage 1; the shared bias starts at zero.
pub fn init_theta(store: &mut ParamStore, embed_dim: usize, supporting: &[&str], seed: u64) {
    for m in supporting {
        let name = theta_block_name(m);
        let mut s = Stream::named(seed, &name);
        store.insert(
            &name,
            Tensor::matrix(embed_dim, embed_dim, s.normal_vec(embed_dim * embed_dim, 0.02))
                .unwrap(),
            true,
        );
    }
    if !store.contains(THETA_BIAS) {
        store.insert(THETA_BIAS, Tensor::zeros(vec![embed_dim]), true);
    }
}

/// Append a zero column group for a newly added supporting modality; existing
/// blocks and the bias are untouched, so prior outputs are preserved exactly.
pub fn extend_theta(store: &mut ParamStore, embed_dim: usize, modality: &str) {
    store.insert(
        &theta_block_name(modality),
        Tensor::zeros(vec![embed_dim, embed_dim]),
        true,
    );
}

/// Compress the supporting queries: channel-wise concat followed by the
/// learned linear map back to (k, d). `supporting` pairs each modality name
/// with its (k, d) query tensor, in configured order.
pub fn project_supporting(
    g: &mut Graph,
    store: &ParamStore,
    config: &FusionConfig,
    supporting: &[(&str, Var)],
) -> Result<Var, ModelError> {
    let expected = config.order.len() - 1;
    if supporting.len() != expected {
        return Err(ModelError::WrongModalityCount {
            expected,
            got: supporting.len(),
        });
    }
    // block-sum form of concat-then-matmul: sum_m x_m @ theta_m^T + bias
    let mut acc: Option<Var> = None;
    for (name, x) in supporting {
        let w = store.bind(g, &theta_block_name(name));
        let term = g.linear(*x, w, None)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.expect("at least one supporting modality");
    let bias = store.bind(g, THETA_BIAS);
    Ok(g.add(acc, bias)?)
}

/// Elementwise self-gating sigmoid(x) * x.
pub fn self_gate(g: &mut Graph, x: Var) -> Result<Var, ModelError> {
    if !g.value(x).is_finite() {
        return Err(ModelError::Tensor(
            crate::error::TensorError::NonFiniteInput("self_gate".into()),
        ));
    }
    let s = g.sigmoid(x)?;
    Ok(g.hadamard(s, x)?)
}

/// Token-wise concat, primary queries first.
pub fn fuse_queries(g: &mut Graph, x_p: Var, x_gated: Var) -> Result<Var, ModelError> {
    let (sp, sg) = (g.value(x_p).shape(), g.value(x_gated).shape());
    if sp != sg {
        return Err(ModelError::Tensor(
            crate::error::TensorError::ShapeMismatch(format!(
                "fuse_queries {sp:?} vs {sg:?}"
            )),
        ));
    }
    Ok(g.concat(0, &[x_p, x_gated])?)
}

/// Full fusion: project supporting queries, gate them, concatenate after the
/// primary. With a single modality the primary queries pass through
/// unchanged.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    config: &FusionConfig,
    queries: &[(&str, Var)],
) -> Result<Var, ModelError> {
    let primary_name = config.primary_name();
    let x_p = queries
        .iter()
        .find(|(m, _)| *m == primary_name)
        .ok_or_else(|| ModelError::UnknownModality(primary_name.to_string()))?
        .1;
    if config.order.len() == 1 {
        return Ok(x_p);
    }
    let mut supporting = Vec::with_capacity(queries.len() - 1);
    for name in config.supporting() {
        let v = queries
            .iter()
            .find(|(m, _)| m == name)
            .ok_or_else(|| ModelError::UnknownModality(name.clone()))?
            .1;
        supporting.push((name.as_str(), v));
    }
    let xbar = project_supporting(g, store, config, &supporting)?;
    let gated = self_gate(g, xbar)?;
    fuse_queries(g, x_p, gated)
}
