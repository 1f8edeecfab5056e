//! Architectural hyperparameters and ablation switches.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which component restores the final factor of two in resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Decoder stages 1-3 upsample, stage 4 keeps half resolution with a
    /// pointwise channel-halving map, and the head's stride-2 transposed
    /// convolution restores the input extents.
    #[default]
    HeadRestores,
    /// All four decoder stages upsample; the head's transposed convolution is
    /// stride 1 with a single tap.
    StagesRestore,
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::HeadRestores => "head-restores",
            HeadMode::StagesRestore => "stages-restore",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head-restores" => Ok(HeadMode::HeadRestores),
            "stages-restore" => Ok(HeadMode::StagesRestore),
            other => Err(Error::Config(format!(
                "unknown head mode `{other}` (expected head-restores or stages-restore)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Feed the stem output straight to the encoder and hold the texture map at 1.
    pub no_lspm: bool,
    /// Drop the anchor detector, FiLM modulation and position bias.
    pub no_anchors: bool,
    /// Use the resolution-matched encoder feature at every decoder stage.
    pub no_router: bool,
    /// Replace every ghost block with a dense convolution of the same geometry.
    pub no_ghost: bool,
}

impl Ablations {
    pub fn any(&self) -> bool {
        self.no_lspm || self.no_anchors || self.no_router || self.no_ghost
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub anchors: usize,
    pub stem_channels: usize,
    pub encoder_widths: [usize; 4],
    pub detector_widths: [usize; 3],
    pub detector_hidden: usize,
    pub router_width: usize,
    pub norm_groups: usize,
    pub ghost_ratio: usize,
    pub head_mode: HeadMode,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::brats()
    }
}

impl ModelConfig {
    /// Four input modalities, four classes, eight anchors.
    pub fn brats() -> Self {
        Self {
            in_channels: 4,
            num_classes: 4,
            anchors: 8,
            stem_channels: 8,
            encoder_widths: [8, 16, 32, 64],
            detector_widths: [8, 8, 8],
            detector_hidden: 128,
            router_width: 64,
            norm_groups: 4,
            ghost_ratio: 2,
            head_mode: HeadMode::HeadRestores,
            ablations: Ablations::default(),
        }
    }

    /// Single-channel, two-class variant used for phantoms and gradient checks.
    pub fn toy() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            ..Self::brats()
        }
    }

    pub fn with_anchors(mut self, k: usize) -> Self {
        self.anchors = k;
        self
    }

    pub fn with_ablations(mut self, ablations: Ablations) -> Self {
        self.ablations = ablations;
        self
    }

    pub fn with_head_mode(mut self, mode: HeadMode) -> Self {
        self.head_mode = mode;
        self
    }

    /// Decoder output widths for stages 1-4: the encoder schedule mirrored.
    pub fn decoder_widths(&self) -> [usize; 4] {
        let e = self.encoder_widths;
        [e[3], e[2], e[1], e[0]]
    }

    pub fn ghost(&self) -> bool {
        !self.ablations.no_ghost
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad(format!(
                "need at least one input channel and two classes, got {} and {}",
                self.in_channels, self.num_classes
            ));
        }
        if self.anchors == 0 || self.detector_hidden == 0 || self.router_width == 0 {
            return bad("anchor count, detector hidden width and router width must be positive".into());
        }
        if self.ghost_ratio != 2 {
            return bad(format!("only ghost ratio 2 is supported, got {}", self.ghost_ratio));
        }
        if self.encoder_widths[0] != self.stem_channels {
            return bad(format!(
                "first encoder width {} must equal the stem width {}",
                self.encoder_widths[0], self.stem_channels
            ));
        }
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.detector_widths)
            .chain(std::iter::once(&self.stem_channels));
        for &c in widths {
            if c == 0 || c % self.norm_groups != 0 || c % 2 != 0 {
                return bad(format!(
                    "width {c} must be even and divisible by {} norm groups",
                    self.norm_groups
                ));
            }
        }
        Ok(())
    }

    /// Checks a `(B, C, D, H, W)` input shape against the config.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[b, c, d, h, w] = shape else {
            return Err(Error::Config(format!("expected a rank-5 input, got {shape:?}")));
        };
        if b == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "input has {c} channels, config expects {}",
                self.in_channels
            )));
        }
        if [d, h, w].iter().any(|&n| n == 0 || n % 16 != 0) {
            return Err(Error::Config(format!(
                "spatial extents {d}x{h}x{w} must be positive multiples of 16"
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
