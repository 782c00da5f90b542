//! The assembled model: parameters for every stage and the end-to-end
//! forward pass shared by training and inference.

use crate::apa::{prototype_similarity, region_embed, PrototypeSet, INITIAL_PROTOTYPES};
use crate::backbone::{
    coords_matrix, feature_propagation, set_abstraction, FeaturePropagationParams, PointCloud, Point,
    RegionSet, Scale, SetAbstractionParams,
};
use crate::config::{CmfmInput, RunConfig};
use crate::data::{stream_seed, AffordanceSample};
use crate::decoder::{channel_modulate, mssm_select, patch_modulate, predict_mask, MaskHead, MssmParams};
use crate::error::{Error, Result, StageContext};
use crate::fusion::{cmfm_fuse, iorm_enhance, CmfmParams, IormParams};
use crate::objectives::{align_loss, binarize, mask_loss, proto_loss, LossConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{extract_part_embedding, InstructionRecord, TextEncoder, TextFeatures, TokenizedText, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tag for parameter initialization.
const INIT_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Parameters of one scale branch.
#[derive(Clone, Debug)]
pub struct ScaleParams {
    pub iorm: IormParams,
    pub cmfm: CmfmParams,
    pub propagate: FeaturePropagationParams,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub sa_small: SetAbstractionParams,
    pub sa_large: SetAbstractionParams,
    pub large: ScaleParams,
    pub small: ScaleParams,
    pub mssm: MssmParams,
    pub head: MaskHead,
    /// Absent when APA is disabled.
    pub prototypes: Option<PrototypeSet>,
}

/// Intermediate nodes of one scale branch.
#[derive(Clone, Debug)]
pub struct ScaleTrace {
    pub regions: RegionSet,
    /// `F̃_P`, equal to the backbone features when IORM is off.
    pub enhanced: Var,
    pub m_p: Var,
    pub m_t: Var,
    /// Decoded and modulated `C × N` features.
    pub decoded: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `M̂`, length `N`.
    pub mask: Var,
    /// `F_fuse`, `C × N`.
    pub fused: Var,
    /// `T_i`; train mode with a structured instruction only.
    pub part: Option<Var>,
    /// `z = region_embed(F_fuse, M̂)`; train mode with APA only.
    pub region: Option<Var>,
    pub text: TextFeatures,
    pub large: ScaleTrace,
    pub small: ScaleTrace,
    /// `(α_l, α_s)`.
    pub alpha: Var,
}

/// Scalar loss nodes of one sample.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub mask: Var,
    pub focal: Var,
    pub dice: Var,
    pub align: Option<Var>,
    pub proto: Option<Var>,
    pub output: ForwardOutput,
}

fn scale_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cfg: &RunConfig,
    k: usize,
) -> Result<ScaleParams> {
    Ok(ScaleParams {
        iorm: IormParams::new(store, rng, &format!("{name}.iorm"), cfg.dim, k),
        cmfm: CmfmParams::new(store, rng, &format!("{name}.cmfm"), cfg.dim, cfg.heads)?,
        propagate: FeaturePropagationParams::new(store, rng, &format!("{name}.fp"), cfg.dim, 3),
    })
}

impl ModelState {
    /// Fresh parameters drawn from the config seed.
    pub fn new(config: RunConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[INIT_STREAM]));
        let mut store = ParamStore::new();
        let c = config.dim;
        let text = TextEncoder::new(&mut store, &mut rng, vocab.len(), c, config.max_len, config.heads)?;
        let sa_small = SetAbstractionParams::new(&mut store, &mut rng, "backbone.small", 0, c);
        let sa_large = SetAbstractionParams::new(&mut store, &mut rng, "backbone.large", c, c);
        let large = scale_params(&mut store, &mut rng, "large", &config, config.top_k_large)?;
        let small = scale_params(&mut store, &mut rng, "small", &config, config.top_k_small)?;
        let mssm = MssmParams::new(&mut store, &mut rng, "mssm", c);
        let head = MaskHead::new(&mut store, &mut rng, "head", c);
        let prototypes = if config.apa {
            let ids: Vec<usize> = (0..INITIAL_PROTOTYPES).collect();
            Some(PrototypeSet::new(&mut rng, &ids, c)?)
        } else {
            None
        };
        Ok(Self {
            config,
            vocab,
            store,
            text,
            sa_small,
            sa_large,
            large,
            small,
            mssm,
            head,
            prototypes,
        })
    }

    /// Total learnable scalars, prototypes included.
    pub fn parameter_count(&self) -> usize {
        self.store.numel() + self.prototypes.as_ref().map_or(0, |p| p.prototypes.len())
    }

    /// Token ids for an instruction: the structured form, or the raw
    /// question when PIG is off.
    pub fn tokenize(&self, instruction: &InstructionRecord) -> Result<TokenizedText> {
        if self.config.pig {
            instruction.encode_structured(&self.vocab, self.config.max_len)
        } else {
            Ok(instruction.encode_raw(&self.vocab, self.config.max_len))
        }
    }

    fn branch(
        &self,
        g: &mut Graph,
        params: &ScaleParams,
        regions: RegionSet,
        text: &TextFeatures,
        points: &[Point],
        coords: Var,
    ) -> Result<ScaleTrace> {
        let stage = match regions.scale {
            Scale::Large => ["iorm_large", "cmfm_large", "decode_large"],
            Scale::Small => ["iorm_small", "cmfm_small", "decode_small"],
        };
        let enhanced = if self.config.iorm {
            iorm_enhance(g, &self.store, &params.iorm, regions.features).stage(stage[0])?
        } else {
            regions.features
        };
        let query = match self.config.cmfm_input {
            CmfmInput::Enhanced => enhanced,
            CmfmInput::Raw => regions.features,
        };
        let (m_p, m_t) = cmfm_fuse(g, &self.store, &params.cmfm, query, text).stage(stage[1])?;
        let decoded = (|| {
            let modulated = patch_modulate(g, enhanced, m_p)?;
            let up = feature_propagation(
                g,
                &self.store,
                &params.propagate,
                &regions.centers,
                modulated,
                points,
                Some(coords),
            )?;
            channel_modulate(g, up, m_t, &text.keep)
        })()
        .stage(stage[2])?;
        Ok(ScaleTrace {
            regions,
            enhanced,
            m_p,
            m_t,
            decoded,
        })
    }

    /// Runs the pipeline on one cloud and tokenized instruction.
    pub fn forward(
        &self,
        g: &mut Graph,
        cloud: &PointCloud,
        text: &TokenizedText,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if cloud.len() != cfg.points() {
            return Err(Error::invalid(
                "forward",
                format!("cloud has {} points, config expects {}", cloud.len(), cfg.points()),
            ))
            .stage("input");
        }
        let features = self.text.encode(g, &self.store, text).stage("encode_text")?;
        let points = cloud.coords();
        let small = set_abstraction(
            g,
            &self.store,
            &self.sa_small,
            points,
            None,
            cfg.small_regions,
            cfg.group_size,
            Scale::Small,
        )
        .stage("backbone_small")?;
        let large = set_abstraction(
            g,
            &self.store,
            &self.sa_large,
            &small.centers,
            Some(small.features),
            cfg.large_regions,
            cfg.group_size.min(small.len()),
            Scale::Large,
        )
        .stage("backbone_large")?;
        let coords = g.constant(coords_matrix(points));
        let large = self.branch(g, &self.large, large, &features, points, coords)?;
        let small = self.branch(g, &self.small, small, &features, points, coords)?;
        let mssm = mssm_select(g, &self.store, &self.mssm, large.decoded, small.decoded).stage("mssm")?;
        let mask = predict_mask(g, &self.store, &self.head, mssm.fused).stage("mask_head")?;
        let (part, region) = match mode {
            Mode::Infer => (None, None),
            Mode::Train => {
                let part = match text.part_index {
                    Some(i) => Some(extract_part_embedding(g, &features, i).stage("part_token")?),
                    None => None,
                };
                let region = if cfg.apa {
                    Some(region_embed(g, mssm.fused, mask).stage("region_embed")?)
                } else {
                    None
                };
                (part, region)
            }
        };
        Ok(ForwardOutput {
            mask,
            fused: mssm.fused,
            part,
            region,
            text: features,
            large,
            small,
            alpha: mssm.alpha,
        })
    }

    /// Inference on one sample: the predicted mask values.
    pub fn predict(&self, cloud: &PointCloud, instruction: &InstructionRecord) -> Result<Vec<f64>> {
        let text = self.tokenize(instruction)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, cloud, &text, Mode::Infer)?;
        Ok(g.value(out.mask).data().to_vec())
    }

    /// Training loss of one sample:
    /// `L_mask + β₁·L_align + β₂·L_proto`, with the ablated terms dropped.
    ///
    /// `prototypes` is the graph node of the `K × C` prototype matrix and
    /// `row` the target row; both are needed when APA is on.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        sample: &AffordanceSample,
        prototypes: Option<(Var, usize)>,
    ) -> Result<SampleLoss> {
        let cfg = &self.config;
        if sample.gt.len() != cfg.points() {
            return Err(Error::invalid(
                "sample_loss",
                format!("mask has {} values, config expects {}", sample.gt.len(), cfg.points()),
            ))
            .stage("input");
        }
        let text = self.tokenize(&sample.instruction).stage("tokenize")?;
        let output = self.forward(g, &sample.cloud, &text, Mode::Train)?;
        let loss_cfg = LossConfig {
            beta1: cfg.align_weight(),
            beta2: cfg.proto_weight(),
            ..cfg.loss
        };
        let target = binarize(&sample.gt);
        let m = mask_loss(g, output.mask, &target, &loss_cfg).stage("loss_mask")?;
        let mut total = m.total;
        let align = match (cfg.psga, output.part) {
            (true, Some(part)) => {
                let w = g.constant(Tensor::vector(target.clone()));
                let a = (|| {
                    let region = region_embed(g, output.fused, w)?;
                    align_loss(g, part, region)
                })()
                .stage("loss_align")?;
                let weighted = g.scale(a, loss_cfg.beta1);
                total = g.add(total, weighted)?;
                Some(a)
            }
            _ => None,
        };
        let proto = match (cfg.apa, output.region, prototypes) {
            (true, Some(z), Some((p, row))) => {
                let l = (|| {
                    let sims = prototype_similarity(g, z, p)?;
                    proto_loss(g, sims, row, loss_cfg.temperature)
                })()
                .stage("loss_proto")?;
                let weighted = g.scale(l, loss_cfg.beta2);
                total = g.add(total, weighted)?;
                Some(l)
            }
            (true, _, None) => {
                return Err(Error::invalid("sample_loss", "APA is on but no prototypes were given"))
            }
            _ => None,
        };
        Ok(SampleLoss {
            total,
            mask: m.total,
            focal: m.focal,
            dice: m.dice,
            align,
            proto,
            output,
        })
    }
}
