use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CenError, Result};
use crate::nn::AdamConfig;

/// Which attribute activation weights the distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// All-ones weights: a plain contrastive Siamese embedding.
    Siamese,
    /// Worker activation `a^w`.
    Worker,
    /// Grid context activation `a^g`.
    Context,
    /// `a^w + a^g`.
    Mixture,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Siamese, Variant::Worker, Variant::Context, Variant::Mixture];

    pub fn uses_worker(self) -> bool {
        matches!(self, Variant::Worker | Variant::Mixture)
    }

    pub fn uses_context(self) -> bool {
        matches!(self, Variant::Context | Variant::Mixture)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Siamese => "siamese",
            Variant::Worker => "worker",
            Variant::Context => "context",
            Variant::Mixture => "mixture",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "siamese" => Ok(Variant::Siamese),
            "worker" => Ok(Variant::Worker),
            "context" => Ok(Variant::Context),
            "mixture" => Ok(Variant::Mixture),
            other => Err(CenError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Model and training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Embedding and attribute dimension.
    pub k: usize,
    pub xi_pos: f64,
    pub xi_neg: f64,
    /// Weight on same-group pairs.
    pub gamma: f64,
    /// L1 coefficient on the attribute activation.
    pub lambda1: f64,
    /// Coefficient on the L2 norm of each embedding.
    pub lambda2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub variant: Variant,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Hidden width of every encoder layer.
    pub hidden: usize,
    /// When false the dissimilar-pair hinge uses the unweighted distance.
    pub negative_term_weighted: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            k: 4,
            xi_pos: 1.0,
            xi_neg: 6.0,
            gamma: 6.0,
            lambda1: 5e-6,
            lambda2: 0.001,
            batch_size: 100,
            epochs: 20,
            variant: Variant::Mixture,
            seed: 0,
            adam: AdamConfig::default(),
            hidden: 200,
            negative_term_weighted: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CenError::Config(m));
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if !(self.xi_pos >= 0.0 && self.xi_pos < self.xi_neg) {
            return fail(format!(
                "margins must satisfy 0 <= xi_pos < xi_neg, got {} and {}",
                self.xi_pos, self.xi_neg
            ));
        }
        if !(self.gamma > 0.0) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return fail("regularization coefficients must be non-negative".into());
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return fail("batch size and hidden width must be positive".into());
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return fail("invalid ADAM constants".into());
        }
        Ok(())
    }

    /// Decision threshold for same-group predictions, `(ξn + ξp) / 2`.
    pub fn threshold(&self) -> f64 {
        (self.xi_neg + self.xi_pos) / 2.0
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("hyperparameters serialize");
        hex::encode(Sha256::digest(json))
    }
}
