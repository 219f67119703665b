//! Experiment configuration: a flat TOML document controlling every run.
//!
//! The config is the unit of reproducibility. Its SHA-256 hash is embedded in
//! checkpoints, and resuming refuses a mismatched hash. Serialization is
//! canonical (field order fixed), so serialize -> parse -> serialize is
//! byte-identical.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("invalid config:\n{}", violations.join("\n"))]
    Invalid { violations: Vec<String> },
}

/// Which training variant runs. The default `Joint` trains synthesis and
/// recognition together in two stages; the others switch off one ingredient
/// each for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Two-stage joint training of synthesis and recognition (the full method).
    Joint,
    /// Recognition network alone on real images; no synthesis at all.
    ClassifierOnly,
    /// Synthesis fully trained first, then recognition on the frozen generator.
    Separate,
    /// Joint training from iteration 0, skipping the synthesis pre-training stage.
    SingleStage,
    /// Joint training without the intra-class feature loss.
    JointNoIntra,
    /// Intra-class loss back-propagates through both branches (no real-anchoring).
    JointFullGrad,
    /// Synthetic recognition inputs decoded from encoded real faces, not the prior.
    JointRealSynth,
    /// Synthesis networks only, full objective; recognition never trains.
    SynthesisOnly,
    /// Synthesis without the reconstruction and identity content losses.
    SynthesisNoContent,
    /// Synthesis without the identity-preserving loss.
    SynthesisNoIdentity,
    /// Synthesis without the image discriminator (and its classifier head).
    SynthesisNoImageDisc,
    /// Synthesis with the image discriminator's classifier head disabled.
    SynthesisNoAuxClassifier,
    /// Synthesis without the latent discriminator (unregularized code space).
    SynthesisNoLatentDisc,
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::Joint,
        Variant::ClassifierOnly,
        Variant::Separate,
        Variant::SingleStage,
        Variant::JointNoIntra,
        Variant::JointFullGrad,
        Variant::JointRealSynth,
        Variant::SynthesisOnly,
        Variant::SynthesisNoContent,
        Variant::SynthesisNoIdentity,
        Variant::SynthesisNoImageDisc,
        Variant::SynthesisNoAuxClassifier,
        Variant::SynthesisNoLatentDisc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Joint => "joint",
            Variant::ClassifierOnly => "classifier-only",
            Variant::Separate => "separate",
            Variant::SingleStage => "single-stage",
            Variant::JointNoIntra => "joint-no-intra",
            Variant::JointFullGrad => "joint-full-grad",
            Variant::JointRealSynth => "joint-real-synth",
            Variant::SynthesisOnly => "synthesis-only",
            Variant::SynthesisNoContent => "synthesis-no-content",
            Variant::SynthesisNoIdentity => "synthesis-no-identity",
            Variant::SynthesisNoImageDisc => "synthesis-no-image-disc",
            Variant::SynthesisNoAuxClassifier => "synthesis-no-aux-classifier",
            Variant::SynthesisNoLatentDisc => "synthesis-no-latent-disc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    /// Square image side; power of two >= 32.
    pub image_size: usize,
    /// 1 (grayscale toy data) or 3.
    pub channels: usize,
    /// Number of expression classes K.
    pub class_count: usize,
    /// Dimension n of the encoder's bounded face code.
    pub latent_dim: usize,
    pub batch_size: usize,
    /// Weight of the latent adversarial term in the generator objective.
    pub lambda1: f64,
    /// Weight of the reconstruction loss.
    pub lambda2: f64,
    /// Weight of the identity-preserving loss.
    pub lambda3: f64,
    /// Weight of the classification terms in the generator objective.
    pub lambda4: f64,
    /// Weight of the adversarial term in the image-discriminator objective.
    pub lambda5: f64,
    /// Weight of the intra-class feature loss in the recognizer objective.
    pub lambda6: f64,
    /// Gradient-penalty coefficient (enters the discriminator loss unweighted
    /// by lambda5).
    pub gp_coeff: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Iterations of synthesis-only pre-training (stage 1).
    pub p_pre: u64,
    /// Total iterations; joint stage runs on [p_pre, p_max).
    pub p_max: u64,
    /// Image-discriminator updates per iteration.
    pub critic_iters: u64,
    /// Checkpoint cadence in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Restrict same-class pair sampling to the anchor's subject.
    pub pair_same_subject: bool,
    /// Also apply the identity loss to the relabeled synthesis, not only the
    /// reconstruction.
    pub identity_loss_on_relabeled: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            variant: Variant::Joint,
            image_size: 32,
            channels: 1,
            class_count: 4,
            latent_dim: 64,
            batch_size: 16,
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 5.0,
            lambda4: 1.0,
            lambda5: 1.0,
            lambda6: 0.001,
            gp_coeff: 10.0,
            learning_rate: 0.0001,
            beta1: 0.5,
            beta2: 0.999,
            p_pre: 2_000,
            p_max: 6_000,
            critic_iters: 1,
            checkpoint_every: 0,
            pair_same_subject: false,
            identity_loss_on_relabeled: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization; embedded in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reports every broken invariant; an empty list means the config is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.p_pre > self.p_max {
            v.push(format!(
                "p_pre ({}) must be <= p_max ({})",
                self.p_pre, self.p_max
            ));
        }
        for (name, l) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("lambda6", self.lambda6),
        ] {
            if !(l >= 0.0) || !l.is_finite() {
                v.push(format!("{name} ({l}) must be non-negative and finite"));
            }
        }
        if self.batch_size < 1 {
            v.push("batch_size must be >= 1".into());
        }
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            v.push(format!(
                "image_size ({}) must be a power of two >= 32",
                self.image_size
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            v.push(format!("channels ({}) must be 1 or 3", self.channels));
        }
        if self.class_count < 2 {
            v.push(format!("class_count ({}) must be >= 2", self.class_count));
        }
        if self.latent_dim < 1 {
            v.push("latent_dim must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            v.push(format!(
                "learning_rate ({}) must be positive",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name} ({b}) must lie in [0, 1)"));
            }
        }
        if !(self.gp_coeff >= 0.0) || !self.gp_coeff.is_finite() {
            v.push(format!(
                "gp_coeff ({}) must be non-negative and finite",
                self.gp_coeff
            ));
        }
        if self.critic_iters < 1 {
            v.push("critic_iters must be >= 1".into());
        }
        v
    }

    pub fn validated(self) -> Result<Self, ConfigError> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid { violations })
        }
    }
}
