//! Run configuration.

use coconut_autodiff::AdamWConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::ModelConfig;
use crate::error::{Error, Result};
use crate::harness::buffer::{BufferPolicy, Selection};
use crate::losses::LossConfig;
use crate::synth::AugConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "finetune")]
    Finetune,
    #[default]
    #[serde(rename = "er")]
    Er,
    #[serde(rename = "akd")]
    Akd,
    #[serde(rename = "tkd")]
    Tkd,
    #[serde(rename = "skd")]
    Skd,
    #[serde(rename = "coconut")]
    Coconut,
    #[serde(rename = "coconut+skd")]
    CoconutSkd,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Self::Finetune,
        Self::Er,
        Self::Akd,
        Self::Tkd,
        Self::Skd,
        Self::Coconut,
        Self::CoconutSkd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Finetune => "finetune",
            Self::Er => "er",
            Self::Akd => "akd",
            Self::Tkd => "tkd",
            Self::Skd => "skd",
            Self::Coconut => "coconut",
            Self::CoconutSkd => "coconut+skd",
        }
    }

    pub fn uses_buffer(self) -> bool {
        self != Self::Finetune
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(self, Self::Coconut | Self::CoconutSkd)
    }

    pub fn uses_pseudo_transcripts(self) -> bool {
        matches!(self, Self::Skd | Self::CoconutSkd)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub buffer: BufferPolicy,
    pub selection: Selection,
    pub loss: LossConfig,
    /// Fraction of batch slots drawn from the buffer.
    pub mix_ratio: f64,
    pub batch_size: usize,
    pub num_tasks: usize,
    pub epochs_first: usize,
    pub epochs_rest: usize,
    pub optimizer: AdamWConfig,
    pub beam_width: usize,
    /// Weight of feature distillation; the NSPT schedule when absent.
    pub kd_weight: Option<f64>,
    pub augment: AugConfig,
    pub model: ModelConfig,
    /// Size-weight per-task accuracies when averaging.
    pub weighted_accuracy: bool,
    /// Score WER without the intent and separator tokens.
    pub wer_skip_prefix: bool,
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Er,
            buffer: BufferPolicy::PerClass(8),
            selection: Selection::Random,
            loss: LossConfig::default(),
            mix_ratio: 0.25,
            batch_size: 32,
            num_tasks: 6,
            epochs_first: 30,
            epochs_rest: 20,
            optimizer: AdamWConfig {
                lr: 5e-3,
                ..AdamWConfig::default()
            },
            beam_width: 3,
            kd_weight: None,
            augment: AugConfig::default(),
            model: ModelConfig::default(),
            weighted_accuracy: true,
            wer_skip_prefix: false,
            seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.mix_ratio) {
            return bad(format!("mix ratio {} outside [0, 1)", self.mix_ratio));
        }
        if self.batch_size == 0 || self.num_tasks == 0 || self.beam_width == 0 {
            return bad("batch size, task count and beam width must be positive".into());
        }
        if let Some(w) = self.kd_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("kd weight {w} must be non-negative"));
            }
        }
        if self.strategy.uses_buffer() {
            self.buffer.per_class(1, 1)?;
        }
        Ok(())
    }

    /// `epochs_first` for task 0, `epochs_rest` afterwards.
    pub fn epochs(&self, task: usize) -> usize {
        if task == 0 {
            self.epochs_first
        } else {
            self.epochs_rest
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short label: strategy plus selection for rehearsal strategies, then
    /// one `.`-separated suffix per non-default contrastive setting.
    pub fn label(&self) -> String {
        let mut label = match self.strategy {
            Strategy::Finetune => "finetune".to_string(),
            s => match self.selection {
                Selection::Random => format!("{s}-random"),
                Selection::Herding => format!("{s}-herding"),
            },
        };
        if self.strategy.uses_contrastive() {
            let l = &self.loss;
            let d = LossConfig::default();
            let mut push = |on: bool, tag: String| {
                if on {
                    label.push('.');
                    label.push_str(&tag);
                }
            };
            push(l.nspt_variant != d.nspt_variant, l.nspt_variant.name().to_string());
            push(!l.nspt_audio, "no-nspt-audio".into());
            push(!l.nspt_text, "no-nspt-text".into());
            push(!l.mm_use_cls_only, "mm-all-tokens".into());
            push(!l.mm_exclude_rehearsal_anchors, "mm-rehearsal-anchors".into());
            push(!l.include_self_in_denominator, "self-excluded".into());
            push(l.lambda_mm != d.lambda_mm, format!("lmm{}", l.lambda_mm));
            if l.learnable_tau {
                push(true, format!("learnable-tau{}", l.tau_init));
            } else {
                push(l.tau != d.tau, format!("tau{}", l.tau));
            }
        }
        label
    }

    /// Buffer setting as a short string.
    pub fn setting(&self) -> String {
        if !self.strategy.uses_buffer() {
            return "no-buffer".into();
        }
        match self.buffer {
            BufferPolicy::PerClass(m) => format!("{m}/class"),
            BufferPolicy::Fraction(f) => format!("{}%", f * 100.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
    }

    #[test]
    fn labels_name_ablations() {
        let mut c = StrategyConfig {
            strategy: Strategy::Coconut,
            selection: Selection::Herding,
            ..Default::default()
        };
        assert_eq!(c.label(), "coconut-herding");
        c.loss.nspt_variant = crate::losses::NsptVariant::NsptAn;
        c.loss.mm_use_cls_only = false;
        c.loss.tau = 0.2;
        assert_eq!(c.label(), "coconut-herding.nspt-an.mm-all-tokens.tau0.2");
        c.strategy = Strategy::Er;
        assert_eq!(c.label(), "er-herding");
    }

    #[test]
    fn defaults_are_valid() {
        StrategyConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let d = StrategyConfig::default;
        for c in [
            StrategyConfig { mix_ratio: 1.0, ..d() },
            StrategyConfig { batch_size: 0, ..d() },
            StrategyConfig {
                buffer: BufferPolicy::PerClass(0),
                ..d()
            },
            StrategyConfig {
                kd_weight: Some(-1.0),
                ..d()
            },
            StrategyConfig { beam_width: 0, ..d() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = StrategyConfig::default();
        let b = StrategyConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), StrategyConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn json_round_trip() {
        let c = StrategyConfig {
            strategy: Strategy::CoconutSkd,
            selection: Selection::Herding,
            ..StrategyConfig::default()
        };
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<StrategyConfig>(&json).unwrap(), c);
    }
}
