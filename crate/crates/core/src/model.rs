//! The full network: three encoders, the fusion stack, masked-prediction
//! heads, the contrastive temperature, and the fine-tuning heads, all in
//! one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::{FeatureBag, GeneEncoder, PathwayPartition, RegionLayout, SlideEncoder, TextEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::fusion::{FusedState, Fusion, Modality, ModalityTokens};
use crate::numerics::nn::{FeedForward, Linear};
use crate::numerics::{Graph, ParamBuilder, ParamId, ParamStore, Var};
use crate::tasks::decoder::ReportDecoder;
use crate::tasks::heads::TaskHeads;

/// Parameter-name prefixes of each component.
pub mod prefix {
    pub const SLIDE: &str = "enc.h.";
    pub const GENES: &str = "enc.g.";
    pub const TEXT: &str = "enc.t.";
    pub const FUSION: &str = "fusion.";
    pub const MLM: &str = "mlm.";
    pub const CLIP: &str = "clip.";
    pub const HEADS: &str = "head.";
    pub const DECODER: &str = "decoder.";

    pub fn encoder(m: crate::fusion::Modality) -> &'static str {
        [SLIDE, GENES, TEXT][m.index()]
    }

    /// Prefix of one modality's expert in every fusion block (match with `contains`).
    pub fn expert_tag(m: crate::fusion::Modality) -> String {
        format!(".expert_{}.", m.letter())
    }
}

/// Masked-prediction readouts from fused tokens.
#[derive(Clone, Debug)]
pub struct MlmHeads {
    /// Region token → region-mean patch feature.
    pub slide: Linear,
    /// Per-gene query embedding added to its pathway token before the bin classifier.
    pub gene_query: ParamId,
    pub gene: FeedForward,
    /// Token → vocabulary logits.
    pub text: Linear,
}

/// One sample's (possibly masked) inputs. Absent modalities are `None`.
#[derive(Clone, Debug, Default)]
pub struct SampleInput<'a> {
    pub slide: Option<&'a FeatureBag>,
    /// Patches whose projected token is replaced by the mask vector.
    pub slide_mask: Option<Vec<bool>>,
    /// Per-gene bin ids (the mask bin marks masked genes).
    pub gene_bins: Option<Vec<usize>>,
    pub text: Option<TokenSequence>,
}

impl SampleInput<'_> {
    pub fn present(&self, m: Modality) -> bool {
        match m {
            Modality::Slide => self.slide.is_some(),
            Modality::Genes => self.gene_bins.is_some(),
            Modality::Text => self.text.is_some(),
        }
    }

    /// Drops every modality not in `keep`.
    pub fn restrict(mut self, keep: [bool; 3]) -> Self {
        if !keep[0] {
            self.slide = None;
            self.slide_mask = None;
        }
        if !keep[1] {
            self.gene_bins = None;
        }
        if !keep[2] {
            self.text = None;
        }
        self
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Encoder-level CLS per modality, `1 × d`.
    pub encoder_cls: [Option<Var>; 3],
    pub fused: Option<FusedState>,
    pub region_layout: Option<RegionLayout>,
}

/// Per-modality encoder outputs ahead of fusion.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub cls: [Option<Var>; 3],
    pub parts: [Option<ModalityTokens>; 3],
    pub region_layout: Option<RegionLayout>,
}

#[derive(Clone, Debug)]
pub struct AlterModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub slide: SlideEncoder,
    pub genes: GeneEncoder,
    pub text: TextEncoder,
    pub fusion: Fusion,
    pub mlm: MlmHeads,
    /// `ln τ` for the contrastive loss.
    pub log_tau: ParamId,
    pub heads: TaskHeads,
    pub decoder: ReportDecoder,
    pub partition: PathwayPartition,
    pooling: Vec<Vec<usize>>,
    gene_group: Vec<usize>,
}

impl AlterModel {
    pub fn new(config: ModelConfig, partition: PathwayPartition, tau_init: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if partition.n_genes() != config.n_genes {
            return Err(Error::config(format!(
                "pathway partition covers {} genes, model expects {}",
                partition.n_genes(),
                config.n_genes
            )));
        }
        if !(tau_init > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        let c = &config;
        let (d, heads, depth, zero) = (c.hidden_dim, c.heads, c.encoder_depth, c.zero_init_residual);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let slide = SlideEncoder::new(&mut pb.scope("enc.h"), c.patch_dim, d, heads, depth, zero)?;
        let genes = GeneEncoder::new(&mut pb.scope("enc.g"), c.n_genes, c.n_bins, d, heads, depth, zero)?;
        let text = TextEncoder::new(&mut pb.scope("enc.t"), c.vocab_size, c.max_text_len, d, heads, depth, zero)?;
        let fusion = Fusion::new(&mut pb.scope("fusion"), d, heads, c.n_blocks, c.type_embeddings, zero)?;
        let mlm = {
            let mut m = pb.scope("mlm");
            MlmHeads {
                slide: Linear::new(&mut m.scope("h"), d, c.patch_dim),
                gene_query: m.uniform_bound("g.query", &[c.n_genes, d], 1.0),
                gene: FeedForward::new(&mut m.scope("g"), d, 2 * d, c.n_bins, false),
                text: Linear::new(&mut m.scope("t"), d, c.vocab_size),
            }
        };
        let log_tau = pb.scope("clip").tensor("log_tau", crate::numerics::Tensor::scalar(tau_init.ln()));
        let heads_ = TaskHeads::new(&mut pb.scope("head"), d, heads, c.n_classes, c.n_time_bins, zero)?;
        let decoder = ReportDecoder::new(&mut pb.scope("decoder"), c.vocab_size, c.max_text_len, d, heads, c.decoder_depth)?;
        let pooling = partition.pooling_groups();
        let gene_group = partition.gene_to_group();
        Ok(AlterModel {
            config,
            store,
            slide,
            genes,
            text,
            fusion,
            mlm,
            log_tau,
            heads: heads_,
            decoder,
            partition,
            pooling,
            gene_group,
        })
    }

    pub fn width(&self) -> usize {
        self.config.hidden_dim
    }

    /// Pooling groups (declared pathways plus the catch-all).
    pub fn pathways(&self) -> &[Vec<usize>] {
        &self.pooling
    }

    pub fn gene_pathway(&self, gene: usize) -> usize {
        self.gene_group[gene]
    }

    pub fn region_layout(&self, n_patches: usize) -> Result<RegionLayout> {
        RegionLayout::new(n_patches, self.config.region_a, self.config.region_b)
    }

    /// Runs the encoder of each present modality. Absent modalities touch
    /// no parameters.
    pub fn encode(&self, g: &mut Graph<'_>, input: &SampleInput<'_>) -> Result<Encoded> {
        let mut cls = [None; 3];
        let mut parts: [Option<ModalityTokens>; 3] = [None, None, None];
        let mut region_layout = None;
        if let Some(bag) = input.slide {
            let layout = self.region_layout(bag.n_patches())?;
            let enc = self.slide.forward(g, bag, &layout, input.slide_mask.as_deref())?;
            cls[0] = Some(enc.cls);
            let n = layout.n_regions() + 1;
            parts[0] = Some(ModalityTokens { tokens: enc.sequence, real: vec![true; n] });
            region_layout = Some(layout);
        }
        if let Some(bins) = &input.gene_bins {
            let enc = self.genes.forward(g, bins, &self.pooling)?;
            cls[1] = Some(enc.cls);
            parts[1] = Some(ModalityTokens { tokens: enc.sequence, real: vec![true; self.pooling.len() + 1] });
        }
        if let Some(seq) = &input.text {
            let t = self.text.forward(g, seq)?;
            cls[2] = Some(g.slice_rows(t, 0, 1));
            parts[2] = Some(ModalityTokens { tokens: t, real: seq.real().to_vec() });
        }
        if cls.iter().all(Option::is_none) {
            return Err(Error::input("sample has no modality"));
        }
        Ok(Encoded { cls, parts, region_layout })
    }

    /// Encodes the present modalities and, when `fuse` is set, runs the
    /// fusion stack over them.
    pub fn forward(&self, g: &mut Graph<'_>, input: &SampleInput<'_>, fuse: bool) -> Result<SampleOutput> {
        let Encoded { cls, parts, region_layout } = self.encode(g, input)?;
        let fused = if fuse {
            let state = self.fusion.assemble(g, parts)?;
            Some(self.fusion.fuse(g, state))
        } else {
            None
        };
        Ok(SampleOutput { encoder_cls: cls, fused, region_layout })
    }

    /// Fused CLS slots concatenated, zeros for absent modalities: `1 × 3d`.
    pub fn sample_embedding(&self, g: &mut Graph<'_>, fused: &FusedState) -> Var {
        let d = self.width();
        let parts: Vec<Var> = Modality::ALL
            .iter()
            .map(|&m| match fused.cls(g, m) {
                Some(v) => v,
                None => g.constant(crate::numerics::Tensor::zeros(&[1, d])),
            })
            .collect();
        g.concat_cols(&parts)
    }

    /// Gradient-free encoder CLS vectors (rows of `d` values) per present modality.
    pub fn encoder_cls_values(&self, input: &SampleInput<'_>) -> Result<[Option<Vec<f64>>; 3]> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(&mut g, input, false)?;
        Ok(out.encoder_cls.map(|v| v.map(|v| g.value(v).data().to_vec())))
    }

    /// Gradient-free concatenated fused CLS vector (`3d`).
    pub fn sample_embedding_values(&self, input: &SampleInput<'_>) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(&mut g, input, true)?;
        let fused = out.fused.expect("fused");
        let e = self.sample_embedding(&mut g, &fused);
        Ok(g.value(e).data().to_vec())
    }
}

const META_PATHWAYS: &str = "model.pathways";

impl AlterModel {
    /// Parameters plus everything needed to rebuild the architecture.
    pub fn to_checkpoint(&self) -> crate::numerics::Checkpoint {
        let mut ck = crate::numerics::Checkpoint::from_store(&self.store);
        let cfg = crate::config::Config { model: self.config.clone(), ..Default::default() };
        for (k, v) in crate::config::parse_kv(&cfg.to_text()).expect("own output parses") {
            if crate::config::MODEL_KEYS.contains(&k.as_str()) {
                ck.meta.insert(format!("model.{k}"), v);
            }
        }
        ck.meta.insert(META_PATHWAYS.into(), self.partition.to_text().trim_end().replace('\n', ";"));
        ck
    }

    pub fn from_checkpoint(ck: &crate::numerics::Checkpoint) -> Result<Self> {
        let mut cfg = crate::config::Config::default();
        for (k, v) in &ck.meta {
            if let Some(key) = k.strip_prefix("model.").filter(|key| crate::config::MODEL_KEYS.contains(key)) {
                cfg.set(key, v)?;
            }
        }
        let pathways = ck.meta.get(META_PATHWAYS).ok_or_else(|| Error::Format("checkpoint lacks the pathway partition".into()))?;
        let partition = PathwayPartition::parse(&pathways.replace(';', "\n"), cfg.model.n_genes)?;
        let mut model = AlterModel::new(cfg.model, partition, 1.0, 0)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
}
