//! The assembled model: frozen backbone plus all trainable knowledge modules,
//! and the per-query forward pass.

use std::sync::Arc;

use krlm_numerics::{EdgeIndex, ParamStore, Real, Scope, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{run_stack, LayerTrace, MemoryWeights};
use crate::backbone::{Backbone, BackboneConfig};
use crate::encoder::{encode_entities, select_memory, EncoderConfig, EntityGnn, Memory, RelationGnn, StructScorer};
use crate::error::{KrlmError, Result};
use crate::instruction::{
    assemble, build_layout, entity_tokens, relation_tokens, vocabulary_items, InstructionLayout, Paa, SlotInputs,
    SlotMaps, Template,
};
use crate::kg::{GraphContext, QueryTriplet};
use crate::predictor::{logistic, KrlmScorer};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    /// Knowledge memory size `K`.
    pub memory_k: usize,
    /// Items listed in the instruction's vocabulary block.
    pub vocab_items: usize,
    /// Description tokens kept per vocabulary item.
    pub desc_tokens: usize,
    /// Seed of the trainable-parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        if self.vocab_items < 2 {
            return Err(KrlmError::Config("vocabulary block needs at least 2 items".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub template: Template,
    pub backbone: Backbone,
    pub gnn_r: RelationGnn,
    pub gnn_e: EntityGnn,
    pub struct_scorer: StructScorer,
    pub paa_word: Paa,
    pub slot_maps: SlotMaps,
    pub memory: MemoryWeights,
    pub paa_proj: Paa,
    pub gnn_p: EntityGnn,
    pub krlm_scorer: KrlmScorer,
}

/// Everything one query's forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `I × 1` structural logits.
    pub struct_logits: Var,
    /// `I × 1` KRLM logits.
    pub krlm_logits: Var,
    pub memory: Memory,
    pub trace: Vec<LayerTrace>,
    pub layout: InstructionLayout,
}

impl Model {
    /// Builds the parameter store: frozen backbone from its own seed, then
    /// trainable modules from `config.seed`.
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, template: Template) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if config.backbone.vocab != tokenizer.vocab_size() {
            return Err(KrlmError::Config(format!(
                "backbone vocabulary {} does not match tokenizer vocabulary {}",
                config.backbone.vocab,
                tokenizer.vocab_size()
            )));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&config.backbone, &mut store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (f, d) = (config.backbone.hidden, config.encoder.dim);
        let enc = config.encoder;
        let model = Self {
            gnn_r: RelationGnn::new(&mut store, "encoder.gnn_r", enc, &mut rng)?,
            gnn_e: EntityGnn::new(&mut store, "encoder.gnn_e", enc, &mut rng)?,
            struct_scorer: StructScorer::new(&mut store, "encoder.struct_scorer", d, &mut rng)?,
            paa_word: Paa::new(&mut store, "instruction.paa", f, d, &mut rng)?,
            slot_maps: SlotMaps::new(&mut store, "instruction.slots", d, f, &mut rng)?,
            memory: MemoryWeights::new(&mut store, "attention.memory", config.backbone.layers, f, d, &mut rng)?,
            paa_proj: Paa::new(&mut store, "predictor.paa", f, d, &mut rng)?,
            gnn_p: EntityGnn::new(&mut store, "predictor.gnn_p", enc, &mut rng)?,
            krlm_scorer: KrlmScorer::new(&mut store, "predictor.scorer", f, d, &mut rng)?,
            backbone,
            config,
            tokenizer,
            template,
        };
        Ok((model, store))
    }

    /// Copies every tensor of `loaded` into `store` by name, checking that
    /// names, shapes and frozen flags agree exactly.
    pub fn adopt(store: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
        if store.len() != loaded.len() {
            return Err(KrlmError::Invalid(format!(
                "checkpoint has {} parameters, model expects {}",
                loaded.len(),
                store.len()
            )));
        }
        for (_, p) in loaded.iter() {
            let id = store.id(&p.name)?;
            let dst = store.get_mut(id);
            if dst.tensor.shape() != p.tensor.shape() || dst.trainable != p.trainable {
                return Err(KrlmError::Invalid(format!("parameter `{}` does not match the model", p.name)));
            }
            dst.tensor = p.tensor.clone();
        }
        Ok(())
    }

    /// Runs one query. `edges` is the entity edge set to propagate over
    /// (normally `ctx.entity_edges`, minus the query edge during training).
    pub fn forward<T: Real>(
        &self,
        s: &Scope<T>,
        ctx: &GraphContext,
        query: QueryTriplet,
        edges: &Arc<EdgeIndex>,
    ) -> Result<ForwardOutput> {
        let t = s.tape();
        let kg = &ctx.kg;
        let (n_ent, n_rel) = (kg.num_entities(), kg.num_relations());
        let (head, rel) = (query.head, query.rel);

        let relations = self.gnn_r.forward(s, n_rel, &ctx.relation_edges, rel)?;
        let entities = encode_entities(s, &self.gnn_e, n_ent, edges, relations, head, rel)?;
        let r_q = t.gather_rows(relations, vec![rel])?;
        let struct_logits = self.struct_scorer.logits(s, entities, r_q)?;

        let scores: Vec<f64> = t.value(struct_logits).data().iter().map(|x| logistic(x.f64())).collect();
        let memory = select_memory(&scores, self.config.memory_k);
        let ranked = select_memory(&scores, self.config.vocab_items).ids;
        let mem = t.gather_rows(entities, memory.ids.clone())?;

        let desc = self.config.desc_tokens;
        let head_tokens = entity_tokens(&self.tokenizer, kg, head, desc);
        let rel_tokens = relation_tokens(&self.tokenizer, kg, rel, desc);
        let inputs = SlotInputs {
            word_head: self.paa_word.forward(s, self.backbone.emb, &head_tokens, &kg.entities()[head].name)?,
            struct_head: t.gather_rows(entities, vec![head])?,
            word_rel: self.paa_word.forward(s, self.backbone.emb, &rel_tokens, &kg.relations()[rel].name)?,
            struct_rel: r_q,
        };
        let items = vocabulary_items(head, rel, &ranked, self.config.vocab_items);
        let layout = build_layout(
            &self.template,
            &self.tokenizer,
            kg,
            &items,
            desc,
            self.config.backbone.max_len,
        )?;
        let embeddings = assemble(s, &layout, self.backbone.emb, &self.slot_maps, &inputs)?;
        let (hidden, trace) = run_stack(s, &self.backbone, &self.memory, embeddings, mem)?;
        let h_last = t.slice_rows(hidden, layout.len() - 1, 1)?;

        let p_h = self.paa_proj.forward(s, self.backbone.proj, &head_tokens, &kg.entities()[head].name)?;
        let decoded = self.gnn_p.forward(s, n_ent, edges, relations, head, p_h)?;
        let krlm_logits = self.krlm_scorer.logits(s, decoded, r_q, h_last)?;

        Ok(ForwardOutput {
            struct_logits,
            krlm_logits,
            memory,
            trace,
            layout,
        })
    }

    /// Number of trainable scalars; independent of the graph.
    pub fn trainable_count(store: &ParamStore) -> usize {
        store.trainable_count()
    }
}
