//! Modality-specific low-rank adaptation, routed by modality name.
//!
//! Each adapter patches one base projection with a delta (alpha/r) * B * A,
//! where B (out_dim x r) starts at zero and A (r x in_dim) starts gaussian,
//! so attaching an adapter never changes the model's outputs until training
//! moves B away from zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Which projection inside a block an adapter patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProjKind {
    WQuery,
    WKey,
    WValue,
    WOutput,
    Ffn1,
    Ffn2,
}

impl ProjKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProjKind::WQuery => "wq",
            ProjKind::WKey => "wk",
            ProjKind::WValue => "wv",
            ProjKind::WOutput => "wo",
            ProjKind::Ffn1 => "ffn1",
            ProjKind::Ffn2 => "ffn2",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "wq" => Ok(ProjKind::WQuery),
            "wk" => Ok(ProjKind::WKey),
            "wv" => Ok(ProjKind::WValue),
            "wo" => Ok(ProjKind::WOutput),
            "ffn1" => Ok(ProjKind::Ffn1),
            "ffn2" => Ok(ProjKind::Ffn2),
            other => Err(ModelError::BadConfig(format!(
                "unknown projection site '{other}'"
            ))),
        }
    }

    /// Default adapter placement.
    pub fn default_sites() -> Vec<ProjKind> {
        vec![ProjKind::WQuery, ProjKind::WKey, ProjKind::WValue]
    }
}

/// A concrete patch point: one projection in one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LoraSite {
    pub layer: usize,
    pub proj: ProjKind,
}

impl LoraSite {
    pub fn new(layer: usize, proj: ProjKind) -> Self {
        LoraSite { layer, proj }
    }

    pub fn key(&self) -> String {
        format!("l{}.{}", self.layer, self.proj.as_str())
    }
}

impl std::fmt::Display for LoraSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.key())
    }
}

/// Hyperparameters of one attached adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub rank: usize,
    pub alpha: f64,
}

impl AdapterMeta {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Map from (modality, site) to adapter hyperparameters. The A/B factors
/// live in the [`ParamStore`] under the names this module hands out.
#[derive(Debug, Clone, Default)]
pub struct AdapterRegistry {
    adapters: BTreeMap<(String, LoraSite), AdapterMeta>,
}

pub fn param_a(modality: &str, site: LoraSite) -> String {
    format!("lora.{modality}.{}.a", site.key())
}

pub fn param_b(modality: &str, site: LoraSite) -> String {
    format!("lora.{modality}.{}.b", site.key())
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, modality: &str, site: LoraSite) -> Option<AdapterMeta> {
        self.adapters.get(&(modality.to_string(), site)).copied()
    }

    pub fn contains(&self, modality: &str, site: LoraSite) -> bool {
        self.adapters.contains_key(&(modality.to_string(), site))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, LoraSite), &AdapterMeta)> {
        self.adapters.iter()
    }

    pub fn sites_for(&self, modality: &str) -> Vec<LoraSite> {
        self.adapters
            .keys()
            .filter(|(m, _)| m == modality)
            .map(|(_, s)| *s)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Attach a fresh adapter at (modality, site). A is seeded gaussian
    /// (std 0.02), B is zero, and both are marked trainable.
    ///
    /// `base_dims` are the (out_dim, in_dim) of the patched projection; the
    /// rank must stay below the smaller one.
    pub fn attach(
        &mut self,
        store: &mut ParamStore,
        modality: &str,
        site: LoraSite,
        base_dims: (usize, usize),
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<(), ModelError> {
        if self.contains(modality, site) {
            return Err(ModelError::DuplicateAdapter(
                modality.to_string(),
                site.key(),
            ));
        }
        let (out_dim, in_dim) = base_dims;
        let limit = out_dim.min(in_dim);
        if rank == 0 || rank >= limit {
            return Err(ModelError::RankTooLarge { rank, dim: limit });
        }
        let a_name = param_a(modality, site);
        let mut rs = Stream::named(seed, &a_name);
        let a = Tensor::matrix(rank, in_dim, rs.normal_vec(rank * in_dim, 0.02)).unwrap();
        let b = Tensor::zeros(vec![out_dim, rank]);
        store.insert(&a_name, a, true);
        store.insert(&param_b(modality, site), b, true);
        self.adapters
            .insert((modality.to_string(), site), AdapterMeta { rank, alpha });
        Ok(())
    }
}

/// The patched projection W + (alpha/r) * B * A as a plain tensor, with W
/// stored (out_dim, in_dim). The base is never mutated.
pub fn effective_projection(
    w: &Tensor,
    a: &Tensor,
    b: &Tensor,
    meta: AdapterMeta,
) -> Result<Tensor, ModelError> {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    if a.shape() != [meta.rank, in_dim] || b.shape() != [out_dim, meta.rank] {
        return Err(ModelError::Tensor(crate::error::TensorError::ShapeMismatch(
            format!(
                "adapter A {:?} / B {:?} against base {:?}",
                a.shape(),
                b.shape(),
                w.shape()
            ),
        )));
    }
    let scale = meta.scaling();
    let mut out = w.clone();
    for i in 0..out_dim {
        for j in 0..in_dim {
            let mut acc = 0.0;
            for p in 0..meta.rank {
                acc += b.get2(i, p) * a.get2(p, j);
            }
            let v = out.get2(i, j) + scale * acc;
            out.set2(i, j, v);
        }
    }
    Ok(out)
}

/// Apply the projection at `site` for `modality`, substituting the adapted
/// weight when an adapter is registered there. Builds the delta in-graph so
/// gradients reach A and B.
pub fn route_forward(
    g: &mut Graph,
    store: &ParamStore,
    registry: &AdapterRegistry,
    modality: &str,
    site: LoraSite,
    base_name: &str,
    bias_name: Option<&str>,
    x: Var,
) -> Result<Var, ModelError> {
    let w = store.bind(g, base_name);
    let bias = bias_name.map(|n| store.bind(g, n));
    let w_eff = match registry.get(modality, site) {
        Some(meta) => {
            let a = store.bind(g, &param_a(modality, site));
            let b = store.bind(g, &param_b(modality, site));
            let delta = g.matmul(b, a)?;
            let scaled = g.scale(delta, meta.scaling())?;
            g.add(w, scaled)?
        }
        None => w,
    };
    Ok(g.linear(x, w_eff, bias)?)
}
