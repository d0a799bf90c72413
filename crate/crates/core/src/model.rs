//! Full network assembly: dual encoder, per-layer fusion with the previous
//! level folded in, coarse decoding from the deepest layer up, masked
//! refinement against both encoder streams, and the low/mid/high grouping.
//! Also owns the serializable configuration and its hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{self, DecoderConfig, DecoderLayerParams, MultiLevelParams};
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::error::{Result, XmsError};
use crate::fusion::{self, FusionConfig, FusionLayerParams};
use crate::losses::{self, LossConfig, LossInputs, LossReport};
use crate::params::{Init, ParamBuilder, ParamSet};
use crate::scalar::{Dtype, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Fixture mode: the auxiliary stream reuses the RGB stream's weights.
    pub shared_encoder_weights: bool,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub precision: Precision,
}

impl ModelConfig {
    /// Reduced-width configuration for fast gradient checking.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig { stage_channels: [4, 8, 12, 16], in_channels: 3 },
            ..ModelConfig::default()
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical_json().as_bytes());
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.weights.validate()?;
        let ec = self.decoder.lgm_expansion;
        if ec == 0 {
            return Err(XmsError::Config("lgm expansion must be >= 1".into()));
        }
        for &c in &self.encoder.stage_channels {
            if (ec * c) % self.decoder.lgm_subparts != 0 {
                return Err(XmsError::Config(format!(
                    "stage width {c}: expanded channels not divisible into {} pooling subparts",
                    self.decoder.lgm_subparts
                )));
            }
        }
        Ok(())
    }
}

struct Arch {
    enc_rgb: EncoderParams,
    enc_aux: EncoderParams,
    fusion: Vec<FusionLayerParams>,
    decoder: Vec<DecoderLayerParams>,
    multilevel: Option<MultiLevelParams>,
}

pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    arch: Arch,
}

/// Closed-form total parameter count for a configuration; the registry must
/// match this exactly (asserted in tests for every ablation flag).
pub fn predicted_param_count(cfg: &ModelConfig) -> usize {
    let enc = encoder::encoder_param_count(&cfg.encoder);
    let mut total = if cfg.shared_encoder_weights { enc } else { 2 * enc };
    let chans = cfg.encoder.stage_channels;
    for i in 0..4 {
        let c_prev = if i > 0 { Some(chans[i - 1]) } else { None };
        total += fusion::fusion_layer_param_count(chans[i], c_prev, &cfg.fusion);
    }
    for i in 0..4 {
        let c_next = if i < 3 { Some(chans[i + 1]) } else { None };
        total += decoder::decoder_layer_param_count(chans[i], c_next, &cfg.decoder);
    }
    if cfg.decoder.use_multilevel {
        total += decoder::multilevel_param_count(&chans);
    }
    total
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, init: Init, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut b = ParamBuilder::new(&mut params, init, seed);
        let enc_rgb = encoder::build_encoder(&mut b, "encoder.rgb", &cfg.encoder)?;
        let enc_aux = if cfg.shared_encoder_weights {
            enc_rgb.clone()
        } else {
            encoder::build_encoder(&mut b, "encoder.aux", &cfg.encoder)?
        };
        let chans = cfg.encoder.stage_channels;
        let mut fusion_layers = Vec::with_capacity(4);
        for i in 0..4 {
            let c_prev = if i > 0 { Some(chans[i - 1]) } else { None };
            fusion_layers.push(fusion::build_fusion_layer(
                &mut b,
                &format!("fusion.l{}", i + 1),
                chans[i],
                c_prev,
                &cfg.fusion,
            )?);
        }
        let mut decoder_layers = Vec::with_capacity(4);
        for i in 0..4 {
            let c_next = if i < 3 { Some(chans[i + 1]) } else { None };
            decoder_layers.push(decoder::build_decoder_layer(
                &mut b,
                &format!("decoder.l{}", i + 1),
                chans[i],
                c_next,
                &cfg.decoder,
            )?);
        }
        let multilevel = if cfg.decoder.use_multilevel {
            Some(decoder::build_multilevel(&mut b, "multilevel", &chans)?)
        } else {
            None
        };
        Ok(Model {
            cfg,
            params,
            arch: Arch {
                enc_rgb,
                enc_aux,
                fusion: fusion_layers,
                decoder: decoder_layers,
                multilevel,
            },
        })
    }
}

pub struct GroupedOutputs {
    pub low: (NodeId, NodeId),
    pub mid: (NodeId, NodeId),
    pub high: (NodeId, NodeId),
}

pub struct ForwardOutput {
    pub enc_rgb: [NodeId; 4],
    pub enc_aux: [NodeId; 4],
    pub fused: [NodeId; 4],
    pub alphas: [Option<NodeId>; 4],
    pub decoded: [NodeId; 4],
    pub initial_logits: [NodeId; 4],
    pub refined: [NodeId; 4],
    pub grouped: Option<GroupedOutputs>,
}

impl<T: Scalar> Model<T> {
    /// One sample end to end. Every block output is checked for NaN/Inf and
    /// reported by block name.
    pub fn forward(&self, tape: &mut Tape<T>, rgb: &Tensor<T>, aux: &Tensor<T>) -> Result<ForwardOutput> {
        let (enc_rgb, enc_aux) = encoder::encode_pair(
            tape,
            &self.params,
            &self.arch.enc_rgb,
            &self.arch.enc_aux,
            rgb,
            aux,
        )?;
        for (i, (r, a)) in enc_rgb.iter().zip(&enc_aux).enumerate() {
            tape.assert_finite(*r, &format!("encoder.rgb.stage{}", i + 1))?;
            tape.assert_finite(*a, &format!("encoder.aux.stage{}", i + 1))?;
        }

        let mut fused = Vec::with_capacity(4);
        let mut alphas = Vec::with_capacity(4);
        let mut prev = None;
        for i in 0..4 {
            let out = fusion::fusion_layer(
                tape,
                &self.params,
                &self.arch.fusion[i],
                &self.cfg.fusion,
                enc_rgb[i],
                enc_aux[i],
                prev,
            )?;
            tape.assert_finite(out.f_s, &format!("fusion.l{}", i + 1))?;
            prev = Some(out.f_s);
            fused.push(out.f_s);
            alphas.push(out.alpha);
        }
        let fused: [NodeId; 4] = [fused[0], fused[1], fused[2], fused[3]];

        // decode deepest-first: layer 4 uses its own averaged feature as the
        // deeper neighbour
        let mut decoded = [None; 4];
        let mut initial = [None; 4];
        for i in (0..4).rev() {
            let layer = &self.arch.decoder[i];
            let lg = decoder::lgm(tape, &self.params, &layer.lgm, fused[i])?;
            tape.assert_finite(lg, &format!("decoder.l{}.lgm", i + 1))?;
            let f_next = if i == 3 {
                decoder::deepest_stand_in(tape, fused[3])?
            } else {
                decoded[i + 1].expect("deeper layer already decoded")
            };
            let f = decoder::fm(tape, &self.params, &layer.fm, f_next, lg)?;
            tape.assert_finite(f, &format!("decoder.l{}.fm", i + 1))?;
            let p = decoder::head(tape, &self.params, &layer.head, f)?;
            tape.assert_finite(p, &format!("decoder.l{}.head", i + 1))?;
            decoded[i] = Some(f);
            initial[i] = Some(p);
        }
        let decoded: [NodeId; 4] = [
            decoded[0].unwrap(),
            decoded[1].unwrap(),
            decoded[2].unwrap(),
            decoded[3].unwrap(),
        ];
        let initial_logits: [NodeId; 4] = [
            initial[0].unwrap(),
            initial[1].unwrap(),
            initial[2].unwrap(),
            initial[3].unwrap(),
        ];

        let mut refined = [None; 4];
        for i in 0..4 {
            let layer = &self.arch.decoder[i];
            let f_o = match &layer.msa {
                Some(msa_p) => decoder::msa(
                    tape,
                    &self.params,
                    msa_p,
                    enc_rgb[i],
                    enc_aux[i],
                    initial_logits[i],
                    decoded[i],
                )?,
                None => decoder::masked_residual(tape, initial_logits[i], decoded[i])?,
            };
            tape.assert_finite(f_o, &format!("decoder.l{}.refine", i + 1))?;
            refined[i] = Some(f_o);
        }
        let refined: [NodeId; 4] = [
            refined[0].unwrap(),
            refined[1].unwrap(),
            refined[2].unwrap(),
            refined[3].unwrap(),
        ];

        let grouped = match &self.arch.multilevel {
            Some(ml) => {
                let out = decoder::multilevel_aggregate(tape, &self.params, ml, &refined)?;
                for (name, (logits, feat)) in ["low", "mid", "high"].iter().zip(&out) {
                    tape.assert_finite(*logits, &format!("multilevel.{name}.logits"))?;
                    tape.assert_finite(*feat, &format!("multilevel.{name}.feat"))?;
                }
                Some(GroupedOutputs { low: out[0], mid: out[1], high: out[2] })
            }
            None => None,
        };

        Ok(ForwardOutput {
            enc_rgb,
            enc_aux,
            fused,
            alphas: [alphas[0], alphas[1], alphas[2], alphas[3]],
            decoded,
            initial_logits,
            refined,
            grouped,
        })
    }

    /// Objective of one forward pass.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        out: &ForwardOutput,
        gt: &Tensor<T>,
    ) -> Result<(NodeId, LossReport)> {
        let grouped = out.grouped.as_ref().map(|g| (g.low.0, g.mid.0, g.high.0));
        losses::total_loss(
            tape,
            &LossInputs { initial: &out.initial_logits, grouped },
            gt,
            &self.cfg.loss,
        )
    }

    /// Final full-resolution probability map: the finest grouped logits
    /// (or the finest initial logits without the aggregation ladder),
    /// bilinearly upsampled and squashed.
    pub fn predict_map(
        &self,
        tape: &mut Tape<T>,
        out: &ForwardOutput,
        height: usize,
        width: usize,
    ) -> Result<Tensor<T>> {
        let logits = match &out.grouped {
            Some(g) => g.high.0,
            None => out.initial_logits[0],
        };
        let up = tape.bilinear_resize(logits, height, width)?;
        let prob = tape.sigmoid(up)?;
        Ok(tape.value(prob))
    }

    /// Per-layer modal proportions of one forward pass (None with alpha
    /// weighting ablated).
    pub fn alpha_values(&self, tape: &Tape<T>, out: &ForwardOutput) -> [Option<f64>; 4] {
        let get = |a: Option<NodeId>| a.map(|id| tape.data(id)[0].to_f64());
        [
            get(out.alphas[0]),
            get(out.alphas[1]),
            get(out.alphas[2]),
            get(out.alphas[3]),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn input(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let vals: Vec<f64> = (0..3 * h * w)
            .map(|i| ((i as f64 + seed as f64 * 13.7) * 0.11).sin() * 0.5 + 0.5)
            .collect();
        Tensor::from_f64(vec![3, h, w], &vals).unwrap()
    }

    #[test]
    fn forward_extent_contract_on_64() {
        let model = Model::<f64>::new(ModelConfig::tiny(), Init::KaimingUniform, 3).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &input(0, 64, 64), &input(1, 64, 64)).unwrap();
        assert_eq!(tape.shape(out.initial_logits[0]), &[1, 16, 16]);
        assert_eq!(tape.shape(out.initial_logits[1]), &[1, 8, 8]);
        assert_eq!(tape.shape(out.initial_logits[2]), &[1, 4, 4]);
        assert_eq!(tape.shape(out.initial_logits[3]), &[1, 2, 2]);
        let g = out.grouped.as_ref().unwrap();
        assert_eq!(tape.shape(g.low.0), &[1, 4, 4]);
        assert_eq!(tape.shape(g.mid.0), &[1, 8, 8]);
        assert_eq!(tape.shape(g.high.0), &[1, 16, 16]);
    }

    #[test]
    fn identical_inputs_with_shared_encoder_give_half_alpha() {
        let cfg = ModelConfig { shared_encoder_weights: true, ..ModelConfig::tiny() };
        let model = Model::<f64>::new(cfg, Init::KaimingUniform, 3).unwrap();
        let mut tape = Tape::new();
        let x = input(0, 32, 32);
        let out = model.forward(&mut tape, &x, &x).unwrap();
        for a in model.alpha_values(&tape, &out).iter() {
            assert_relative_eq!(a.unwrap(), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let run = || {
            let model = Model::<f64>::new(ModelConfig::tiny(), Init::KaimingUniform, 11).unwrap();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &input(2, 32, 32), &input(3, 32, 32)).unwrap();
            let map = model.predict_map(&mut tape, &out, 32, 32).unwrap();
            map.into_data()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn param_count_matches_prediction_for_every_flag() {
        let mut cfgs = vec![ModelConfig::tiny()];
        for f in [
            |c: &mut ModelConfig| c.fusion.use_alpha = false,
            |c: &mut ModelConfig| c.fusion.use_tsa = false,
            |c: &mut ModelConfig| c.fusion.use_tca = false,
            |c: &mut ModelConfig| c.decoder.use_msa = false,
            |c: &mut ModelConfig| c.decoder.use_multilevel = false,
            |c: &mut ModelConfig| c.shared_encoder_weights = true,
            |c: &mut ModelConfig| c.fusion.tsa_mode = crate::fusion::TsaMode::MaxOnly,
            |c: &mut ModelConfig| c.fusion.tsa_mode = crate::fusion::TsaMode::ConvOnly,
            |c: &mut ModelConfig| c.fusion.tca_mode = crate::fusion::TcaMode::GctOnly,
            |c: &mut ModelConfig| c.fusion.tca_mode = crate::fusion::TcaMode::MeanOnly,
            |c: &mut ModelConfig| c.fusion.mean_combine = crate::fusion::MeanCombine::Elementwise,
        ] {
            let mut c = ModelConfig::tiny();
            f(&mut c);
            cfgs.push(c);
        }
        // plain-concat ablation
        let mut plain = ModelConfig::tiny();
        plain.fusion.use_alpha = false;
        plain.fusion.use_tsa = false;
        plain.fusion.use_tca = false;
        cfgs.push(plain);

        for cfg in cfgs {
            let model = Model::<f32>::new(cfg.clone(), Init::Zeros, 0).unwrap();
            assert_eq!(
                model.params.scalar_count(),
                predicted_param_count(&cfg),
                "param count mismatch for {:?}",
                cfg
            );
        }
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ModelConfig::tiny();
        let mut b = ModelConfig::tiny();
        assert_eq!(a.hash(), b.hash());
        b.fusion.use_tsa = false;
        assert_ne!(a.hash(), b.hash());
        let round: ModelConfig = serde_json::from_str(&a.canonical_json()).unwrap();
        assert_eq!(a, round);
    }

    #[test]
    fn loss_runs_end_to_end_and_reports_consistently() {
        let mut model = Model::<f64>::new(ModelConfig::tiny(), Init::KaimingUniform, 5).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &input(0, 32, 32), &input(1, 32, 32)).unwrap();
        let gt_vals: Vec<f64> = (0..32 * 32)
            .map(|i| {
                let (y, x) = (i / 32, i % 32);
                if (8..24).contains(&y) && (8..24).contains(&x) { 1.0 } else { 0.0 }
            })
            .collect();
        let gt = Tensor::from_f64(vec![1, 32, 32], &gt_vals).unwrap();
        let (total, report) = model.loss(&mut tape, &out, &gt).unwrap();
        assert!(report.total > 0.0);
        assert_relative_eq!(
            report.total,
            report.ms + report.ml + report.div,
            epsilon = 1e-6
        );
        // gradient reaches every trainable parameter
        tape.backward(total).unwrap();
        tape.export_param_grads(&mut model.params);
        for p in model.params.iter() {
            assert!(p.grad_touched(), "no gradient reached '{}'", p.name);
            assert!(p.grad.iter().all(|g| g.is_finite()));
        }
    }
}
