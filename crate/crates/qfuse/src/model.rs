//! The full survival model: shared trunk, per-modality adapters, self-gated
//! fusion and a linear risk head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ModelError;
use crate::graph::{Graph, Var};
use crate::lora::{AdapterRegistry, LoraSite, ProjKind};
use crate::params::ParamStore;
use crate::qformer::{self, QFormerConfig};
use crate::rng::Stream;
use crate::smqf::{self, FusionConfig};
use crate::tensor::Tensor;

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Everything needed to rebuild a model's architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub qformer: QFormerConfig,
    /// Low-rank adapter rank for modalities attached at construction.
    pub lora_rank: usize,
    /// Numerator of the adapter scaling alpha/r; defaults to r (scale 1).
    pub lora_alpha: Option<f64>,
    /// Which projections carry adapters, applied in every block.
    pub lora_sites: Vec<ProjKind>,
    /// Primary modality for fusion.
    pub primary: String,
    pub seed: u64,
}

impl ModelConfig {
    pub fn alpha_for(&self, rank: usize) -> f64 {
        self.lora_alpha.unwrap_or(rank as f64)
    }
}

/// A registered modality and its native feature width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub native_dim: usize,
}

/// Trainable model state plus adapter routing table.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub registry: AdapterRegistry,
    pub modalities: Vec<Modality>,
    /// Stamped at construction; modality additions keep it, so models that
    /// share a stage-1 origin can be compared.
    pub lineage: String,
}

impl Model {
    /// Build and deterministically initialize a model over the given
    /// modalities (name, native_dim). The primary modality must be listed.
    pub fn new(config: ModelConfig, modalities: &[(String, usize)]) -> Result<Self, ModelError> {
        config.qformer.validate()?;
        if modalities.is_empty() {
            return Err(ModelError::BadConfig("at least one modality".into()));
        }
        if !modalities.iter().any(|(n, _)| *n == config.primary) {
            return Err(ModelError::UnknownModality(config.primary.clone()));
        }
        let mut store = ParamStore::new();
        let seed = config.seed;
        qformer::init_base_params(&mut store, &config.qformer, seed);

        let mut registry = AdapterRegistry::new();
        let mut registered = Vec::new();
        for (name, native_dim) in modalities {
            if registered.iter().any(|m: &Modality| m.name == *name) {
                return Err(ModelError::DuplicateModality(name.clone()));
            }
            qformer::init_modality_params(&mut store, &config.qformer, name, *native_dim, seed)?;
            attach_all_sites(
                &mut store,
                &mut registry,
                &config,
                name,
                config.lora_rank,
                seed,
            )?;
            registered.push(Modality {
                name: name.clone(),
                native_dim: *native_dim,
            });
        }

        let supporting: Vec<&str> = registered
            .iter()
            .filter(|m| m.name != config.primary)
            .map(|m| m.name.as_str())
            .collect();
        smqf::init_theta(&mut store, config.qformer.embed_dim, &supporting, seed);

        let mut hs = Stream::named(seed, HEAD_W);
        store.insert(
            HEAD_W,
            Tensor::matrix(1, config.qformer.embed_dim, hs.normal_vec(config.qformer.embed_dim, 0.02))
                .unwrap(),
            true,
        );
        store.insert(HEAD_B, Tensor::zeros(vec![1]), true);

        let lineage = lineage_stamp(&config, &registered);
        Ok(Model {
            config,
            store,
            registry,
            modalities: registered,
            lineage,
        })
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    pub fn has_modality(&self, name: &str) -> bool {
        self.modalities.iter().any(|m| m.name == name)
    }

    /// Fusion layout over a subset of registered modalities (the subset must
    /// contain the primary). Order follows registration order.
    pub fn fusion_config(&self, subset: &[String]) -> Result<FusionConfig, ModelError> {
        for name in subset {
            if !self.has_modality(name) {
                return Err(ModelError::UnknownModality(name.clone()));
            }
        }
        let order: Vec<String> = self
            .modalities
            .iter()
            .filter(|m| subset.contains(&m.name))
            .map(|m| m.name.clone())
            .collect();
        FusionConfig::new(order, &self.config.primary)
    }

    /// Risk score for one patient: encode each modality in the subset, fuse,
    /// pool and apply the linear head. Output is a (1, 1) node.
    pub fn patient_eta(
        &self,
        g: &mut Graph,
        features: &BTreeMap<String, Tensor>,
        subset: &[String],
    ) -> Result<Var, ModelError> {
        let fusion = self.fusion_config(subset)?;
        let mut queries: Vec<(String, Var)> = Vec::with_capacity(fusion.order.len());
        for name in &fusion.order {
            let feats = features
                .get(name)
                .ok_or_else(|| ModelError::MissingModalityInCohort(name.clone()))?;
            let q = qformer::qformer_forward(
                g,
                &self.store,
                &self.config.qformer,
                name,
                feats,
                Some(&self.registry),
            )?;
            queries.push((name.clone(), q));
        }
        let query_refs: Vec<(&str, Var)> =
            queries.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let fused = smqf::fuse(g, &self.store, &fusion, &query_refs)?;
        let pooled = g.mean_pool(fused)?;
        let w = self.store.bind(g, HEAD_W);
        let b = self.store.bind(g, HEAD_B);
        Ok(g.linear(pooled, w, Some(b))?)
    }

    /// Plain-value risk score, no gradient bookkeeping.
    pub fn predict_eta(
        &self,
        features: &BTreeMap<String, Tensor>,
        subset: &[String],
    ) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let eta = self.patient_eta(&mut g, features, subset)?;
        Ok(g.value(eta).data()[0])
    }

    /// Register a new modality: query bank, input adapter, low-rank adapters
    /// at the configured sites (B = 0) and a zero fusion column group. No
    /// pre-existing parameter changes.
    pub fn add_modality(
        &mut self,
        name: &str,
        native_dim: usize,
        rank: usize,
        seed: u64,
    ) -> Result<(), ModelError> {
        if self.has_modality(name) {
            return Err(ModelError::DuplicateModality(name.to_string()));
        }
        qformer::init_modality_params(
            &mut self.store,
            &self.config.qformer,
            name,
            native_dim,
            seed,
        )?;
        attach_all_sites(
            &mut self.store,
            &mut self.registry,
            &self.config,
            name,
            rank,
            seed,
        )?;
        smqf::extend_theta(&mut self.store, self.config.qformer.embed_dim, name);
        self.modalities.push(Modality {
            name: name.to_string(),
            native_dim,
        });
        Ok(())
    }

    // ── trainability ─────────────────────────────────────────────────

    pub fn set_all_trainable(&mut self, on: bool) {
        self.store.set_trainable_all(on);
    }

    /// The shared trunk, including the final norm.
    pub fn set_base_trainable(&mut self, on: bool) {
        self.store.set_trainable_prefix("base.", on);
    }

    pub fn set_head_trainable(&mut self, on: bool) {
        self.store.set_trainable_prefix("head.", on);
    }

    /// Query bank, input adapter, low-rank adapters and fusion column group
    /// of one modality.
    pub fn set_modality_trainable(&mut self, name: &str, on: bool) -> Result<(), ModelError> {
        if !self.has_modality(name) {
            return Err(ModelError::UnknownModality(name.to_string()));
        }
        self.store.set_trainable_prefix(&format!("mod.{name}."), on);
        self.store.set_trainable_prefix(&format!("lora.{name}."), on);
        let theta = smqf::theta_block_name(name);
        if self.store.contains(&theta) {
            self.store.set_trainable(&theta, on);
        }
        Ok(())
    }

    /// One adapter's A/B factors.
    pub fn set_adapter_trainable(
        &mut self,
        modality: &str,
        site: LoraSite,
        on: bool,
    ) -> Result<(), ModelError> {
        if !self.registry.contains(modality, site) {
            return Err(ModelError::UnknownAdapter(
                modality.to_string(),
                site.key(),
            ));
        }
        self.store
            .set_trainable(&crate::lora::param_a(modality, site), on);
        self.store
            .set_trainable(&crate::lora::param_b(modality, site), on);
        Ok(())
    }

    pub fn set_smqf_bias_trainable(&mut self, on: bool) {
        self.store.set_trainable(smqf::THETA_BIAS, on);
    }

    // ── hashing ──────────────────────────────────────────────────────

    pub fn hash_all(&self) -> String {
        self.store.hash_all()
    }

    pub fn hash_base(&self) -> String {
        self.store.hash_filtered(|n| n.starts_with("base."))
    }

    /// Hash of every parameter currently marked frozen.
    pub fn hash_frozen(&self) -> String {
        let frozen: std::collections::BTreeSet<String> = self
            .store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        self.store.hash_filtered(|n| frozen.contains(n))
    }
}

fn attach_all_sites(
    store: &mut ParamStore,
    registry: &mut AdapterRegistry,
    config: &ModelConfig,
    modality: &str,
    rank: usize,
    seed: u64,
) -> Result<(), ModelError> {
    let alpha = config.alpha_for(rank);
    for layer in 0..config.qformer.depth {
        for &proj in &config.lora_sites {
            registry.attach(
                store,
                modality,
                LoraSite::new(layer, proj),
                config.qformer.site_dims(proj),
                rank,
                alpha,
                seed,
            )?;
        }
    }
    Ok(())
}

fn lineage_stamp(config: &ModelConfig, modalities: &[Modality]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    for m in modalities {
        hasher.update(m.name.as_bytes());
        hasher.update((m.native_dim as u64).to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
