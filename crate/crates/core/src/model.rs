//! Full dual-encoder: embeddings, per-modality self-attention backbones,
//! cross-modal stack, pooling and projection heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::cross_modal::{AttentionUnit, CrossModalStack};
use crate::data::CorpusRecord;
use crate::encoders::{pool_cls, EncoderConfig, PatchEmbed, TokenEmbed};
use crate::error::{Error, Result};
use crate::losses::{cross_cl_terms, CrossClTerms, LossConfig};
use crate::nn::{Bound, ParamStore, ProjectionHead};
use crate::tensor::Tensor;

/// Forward-pass outputs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Encoded<'t> {
    /// `[B, d_f]` `[CLS]` features after the stack.
    pub vision_pooled: Var<'t>,
    pub language_pooled: Var<'t>,
    /// `[B, d_p]` unit-norm contrastive embeddings.
    pub vision_embedding: Var<'t>,
    pub language_embedding: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderConfig,
    pub params: ParamStore,
    patch: PatchEmbed,
    token: TokenEmbed,
    vision_backbone: Vec<AttentionUnit>,
    language_backbone: Vec<AttentionUnit>,
    stack: CrossModalStack,
    vision_head: ProjectionHead,
    language_head: ProjectionHead,
}

impl Model {
    /// Deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, encoder: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if encoder.d_f != config.d_f {
            return Err(Error::Config(format!(
                "encoder width {} differs from model width {}",
                encoder.d_f, config.d_f
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let patch = PatchEmbed::new(&mut params, "vision.embed", encoder, &mut rng)?;
        let token = TokenEmbed::new(&mut params, "language.embed", encoder, &mut rng)?;
        let mut vision_backbone = Vec::with_capacity(config.backbone_depth);
        let mut language_backbone = Vec::with_capacity(config.backbone_depth);
        for i in 0..config.backbone_depth {
            vision_backbone.push(AttentionUnit::new(&mut params, &format!("vision.backbone.{i}"), &config.stack(), &mut rng)?);
            language_backbone.push(AttentionUnit::new(&mut params, &format!("language.backbone.{i}"), &config.stack(), &mut rng)?);
        }
        let stack = CrossModalStack::new(&mut params, "stack", &config.stack(), &mut rng)?;
        let vision_head = ProjectionHead::new(&mut params, "vision.head", config.d_f, config.d_h, config.d_p, &mut rng)?;
        let language_head = ProjectionHead::new(&mut params, "language.head", config.d_f, config.d_h, config.d_p, &mut rng)?;
        Ok(Self {
            config,
            encoder,
            params,
            patch,
            token,
            vision_backbone,
            language_backbone,
            stack,
            vision_head,
            language_head,
        })
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, tape: &'t Tape, records: &[&CorpusRecord]) -> Result<Encoded<'t>> {
        let images: Vec<_> = records.iter().map(|r| &r.image).collect();
        let tokens: Vec<_> = records.iter().map(|r| &r.tokens).collect();
        let mut v = self.patch.forward(p, tape, &images)?;
        let (mut l, text_mask) = self.token.forward(p, &tokens)?;
        for unit in &self.vision_backbone {
            v = unit.forward(p, v, v, None)?;
        }
        for unit in &self.language_backbone {
            l = unit.forward(p, l, l, Some(&text_mask))?;
        }
        let (v, l) = self.stack.forward(p, v, l, Some(&text_mask))?;
        let vision_pooled = pool_cls(v)?;
        let language_pooled = pool_cls(l)?;
        Ok(Encoded {
            vision_pooled,
            language_pooled,
            vision_embedding: self.vision_head.project_and_normalize(p, vision_pooled)?,
            language_embedding: self.language_head.project_and_normalize(p, language_pooled)?,
        })
    }

    /// Contrastive loss terms for one labeled batch.
    pub fn loss<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        records: &[&CorpusRecord],
        loss: &LossConfig,
    ) -> Result<CrossClTerms<'t>> {
        let enc = self.encode(p, tape, records)?;
        let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
        cross_cl_terms(enc.vision_embedding, enc.language_embedding, &labels, loss)
    }

    /// Pooled `[N, d_f]` features per modality with frozen parameters,
    /// computed in chunks of `chunk` records.
    pub fn features(&self, records: &[CorpusRecord], chunk: usize) -> Result<(Tensor, Tensor)> {
        let chunk = chunk.max(1);
        let (mut vis, mut lang) = (Vec::new(), Vec::new());
        for part in records.chunks(chunk) {
            let tape = Tape::new();
            let p = self.params.bind_frozen(&tape);
            let refs: Vec<&CorpusRecord> = part.iter().collect();
            let enc = self.encode(&p, &tape, &refs)?;
            vis.extend_from_slice(enc.vision_pooled.value().data());
            lang.extend_from_slice(enc.language_pooled.value().data());
        }
        let d = self.config.d_f;
        let n = records.len();
        Ok((Tensor::new(vec![n, d], vis)?, Tensor::new(vec![n, d], lang)?))
    }

    /// Unit-norm `[N, d_p]` embeddings per modality with frozen parameters.
    pub fn embeddings(&self, records: &[&CorpusRecord]) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let enc = self.encode(&p, &tape, records)?;
        Ok((enc.vision_embedding.value(), enc.language_embedding.value()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{generate_corpus, SyntheticCorpusSpec};

    fn tiny() -> (Model, Vec<CorpusRecord>) {
        let spec = SyntheticCorpusSpec {
            samples_per_class: 10,
            height: 8,
            width: 8,
            n_max: 5,
            content_max: 6,
            content_min: 2,
            ..SyntheticCorpusSpec::default()
        };
        let mut cfg = RunConfig::desk().model;
        cfg.d_f = 8;
        cfg.d_ff = 16;
        cfg.d_h = 8;
        cfg.d_p = 4;
        let corpus = generate_corpus(&spec).unwrap();
        (Model::new(cfg, spec.encoder_config(8), 3).unwrap(), corpus.train)
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let (m, recs) = tiny();
        let refs: Vec<_> = recs.iter().take(6).collect();
        let (v, l) = m.embeddings(&refs).unwrap();
        assert_eq!(v.shape(), &[6, 4]);
        for t in [v, l] {
            for row in t.data().chunks(4) {
                let n: f64 = row.iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_params() {
        let (a, _) = tiny();
        let (b, _) = tiny();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn chunking_does_not_change_features() {
        let (m, recs) = tiny();
        let (v1, l1) = m.features(&recs[..10], 3).unwrap();
        let (v2, l2) = m.features(&recs[..10], 10).unwrap();
        assert!(v1.max_abs_diff(&v2) < 1e-12);
        assert!(l1.max_abs_diff(&l2) < 1e-12);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let (m, _) = tiny();
        let mut enc = m.encoder;
        enc.d_f = 16;
        assert!(matches!(Model::new(m.config, enc, 0), Err(Error::Config(_))));
    }
}
