use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::norm::{DEFAULT_EPS, DEFAULT_MOMENTUM};

/// Architecture variant. Everything but `Mlfn` is an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Dynamic factor selection with signature fusion.
    Mlfn,
    /// Dynamic factor selection; the classifier sees only the final block.
    NoFusion,
    /// No selection modules; every factor module is always on.
    ResNeXt,
    /// One holistic residual module per block, sized to match.
    ResNet,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Mlfn, Mode::NoFusion, Mode::ResNeXt, Mode::ResNet];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mlfn => "mlfn",
            Mode::NoFusion => "nofusion",
            Mode::ResNeXt => "resnext",
            Mode::ResNet => "resnet",
        }
    }

    pub fn has_selection(self) -> bool {
        matches!(self, Mode::Mlfn | Mode::NoFusion)
    }

    pub fn fuses_signature(self) -> bool {
        self == Mode::Mlfn
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlfn" => Ok(Mode::Mlfn),
            "nofusion" | "mlfn-fusion" | "mlfn_minus_fusion" => Ok(Mode::NoFusion),
            "resnext" => Ok(Mode::ResNeXt),
            "resnet" => Ok(Mode::ResNet),
            other => Err(Error::Config(alloc::format!("unknown mode {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub stride: usize,
    /// Number of factor modules, K_n.
    pub factor_modules: usize,
    /// Bottleneck width inside each factor module.
    pub fm_width: usize,
    /// Widths of the two hidden selection-MLP layers; the third is K_n.
    pub fsm_hidden: (usize, usize),
}

impl BlockConfig {
    /// ResNeXt-style bottleneck width: half the output width split across
    /// the factor modules (32×4d at 256 channels), never below 2.
    pub fn default_width(out_channels: usize, factor_modules: usize) -> usize {
        (out_channels / (2 * factor_modules)).max(2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlfnConfig {
    pub in_channels: usize,
    /// Input (height, width).
    pub input_hw: (usize, usize),
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub blocks: Vec<BlockConfig>,
    /// Fused feature dimension d.
    pub fusion_dim: usize,
    pub num_classes: usize,
    pub mode: Mode,
    /// Stored as bit patterns so the config stays `Eq + Hash`.
    bn_eps_bits: u64,
    bn_momentum_bits: u64,
}

fn uniform_blocks(channels: &[usize], strides: &[usize], repeats: &[usize], k: usize, fsm: &[(usize, usize)]) -> Vec<BlockConfig> {
    let mut blocks = Vec::new();
    for (stage, &c) in channels.iter().enumerate() {
        for r in 0..repeats[stage] {
            blocks.push(BlockConfig {
                out_channels: c,
                stride: if r == 0 { strides[stage] } else { 1 },
                factor_modules: k,
                fm_width: BlockConfig::default_width(c, k),
                fsm_hidden: fsm[stage],
            });
        }
    }
    blocks
}

impl MlfnConfig {
    /// Desk-scale default: four blocks of four factor modules over 32×16
    /// inputs; the stem halves the resolution and blocks 2 and 3 downsample.
    pub fn toy(num_classes: usize) -> Self {
        let channels = [8, 16, 32, 64];
        let strides = [1, 2, 2, 1];
        let blocks = channels
            .iter()
            .zip(strides)
            .map(|(&c, s)| BlockConfig {
                out_channels: c,
                stride: s,
                factor_modules: 4,
                fm_width: BlockConfig::default_width(c, 4),
                fsm_hidden: (16, 8),
            })
            .collect();
        Self {
            in_channels: 3,
            input_hw: (32, 16),
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 2,
            blocks,
            fusion_dim: 64,
            num_classes,
            mode: Mode::Mlfn,
            bn_eps_bits: DEFAULT_EPS.to_bits(),
            bn_momentum_bits: DEFAULT_MOMENTUM.to_bits(),
        }
    }

    /// Re-identification scale: sixteen blocks in the ResNeXt-50 stage
    /// layout, 32 factor modules each (K = 512), d = 1024, 256×128 input.
    pub fn reid(num_classes: usize) -> Self {
        let fsm = [(128, 64), (256, 128), (512, 128), (512, 128)];
        Self {
            in_channels: 3,
            input_hw: (256, 128),
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 4,
            blocks: uniform_blocks(&[256, 512, 1024, 2048], &[1, 2, 2, 2], &[3, 4, 6, 3], 32, &fsm),
            fusion_dim: 1024,
            num_classes,
            mode: Mode::Mlfn,
            bn_eps_bits: DEFAULT_EPS.to_bits(),
            bn_momentum_bits: DEFAULT_MOMENTUM.to_bits(),
        }
    }

    /// Object-categorisation depth: nine blocks of 32 modules (K = 288).
    pub fn cifar(num_classes: usize) -> Self {
        let fsm = [(128, 64), (256, 128), (512, 128)];
        Self {
            in_channels: 3,
            input_hw: (32, 32),
            stem_channels: 64,
            stem_kernel: 3,
            stem_stride: 1,
            blocks: uniform_blocks(&[256, 512, 1024], &[1, 2, 2], &[3, 3, 3], 32, &fsm),
            fusion_dim: 1024,
            num_classes,
            mode: Mode::Mlfn,
            bn_eps_bits: DEFAULT_EPS.to_bits(),
            bn_momentum_bits: DEFAULT_MOMENTUM.to_bits(),
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_fusion_dim(mut self, d: usize) -> Self {
        self.fusion_dim = d;
        self
    }

    /// Multiply every channel width (stem, blocks, bottlenecks) by `factor`.
    pub fn scale_channels(mut self, factor: usize) -> Self {
        self.stem_channels *= factor;
        for b in &mut self.blocks {
            b.out_channels *= factor;
            b.fm_width *= factor;
        }
        self
    }

    pub fn bn_eps(&self) -> f64 {
        f64::from_bits(self.bn_eps_bits)
    }

    pub fn bn_momentum(&self) -> f64 {
        f64::from_bits(self.bn_momentum_bits)
    }

    pub fn set_bn(&mut self, eps: f64, momentum: f64) {
        self.bn_eps_bits = eps.to_bits();
        self.bn_momentum_bits = momentum.to_bits();
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// K = Σ K_n, independent of every spatial and channel extent.
    pub fn signature_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.factor_modules).sum()
    }

    /// Channels entering block `n`.
    pub fn block_in_channels(&self, n: usize) -> usize {
        if n == 0 {
            self.stem_channels
        } else {
            self.blocks[n - 1].out_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.stem_kernel == 0 || self.stem_stride == 0 {
            return bad("stem extents must be positive".into());
        }
        if self.input_hw.0 == 0 || self.input_hw.1 == 0 {
            return bad("input extents must be positive".into());
        }
        if self.fusion_dim == 0 || self.num_classes == 0 {
            return bad("fusion dim and class count must be positive".into());
        }
        let eps = self.bn_eps();
        let momentum = self.bn_momentum();
        if !(eps > 0.0) || !(0.0..1.0).contains(&momentum) {
            return bad(alloc::format!("bad batch-norm settings eps={} momentum={}", eps, momentum));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.stride == 0 || b.factor_modules == 0 || b.fm_width == 0 || b.fsm_hidden.0 == 0 || b.fsm_hidden.1 == 0 {
                return bad(alloc::format!("block {} has a zero extent", i + 1));
            }
        }
        Ok(())
    }

    /// Stable `key = value` rendering; the digest of this text identifies the
    /// architecture in checkpoints.
    pub fn canonical_text(&self) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "input_hw = {}x{}", self.input_hw.0, self.input_hw.1);
        let _ = writeln!(s, "stem = {}c k{} s{}", self.stem_channels, self.stem_kernel, self.stem_stride);
        for (i, b) in self.blocks.iter().enumerate() {
            let _ = writeln!(
                s,
                "block{} = {}c s{} k{} w{} fsm{}x{}",
                i + 1,
                b.out_channels,
                b.stride,
                b.factor_modules,
                b.fm_width,
                b.fsm_hidden.0,
                b.fsm_hidden.1
            );
        }
        let _ = writeln!(s, "fusion_dim = {}", self.fusion_dim);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "bn_eps = {:e}", self.bn_eps());
        let _ = writeln!(s, "bn_momentum = {}", self.bn_momentum());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signature_dimensions() {
        assert_eq!(MlfnConfig::reid(751).signature_dim(), 512);
        assert_eq!(MlfnConfig::reid(751).depth(), 16);
        assert_eq!(MlfnConfig::reid(751).fusion_dim, 1024);
        assert_eq!(MlfnConfig::cifar(100).signature_dim(), 288);
        assert_eq!(MlfnConfig::toy(32).signature_dim(), 16);
        assert_eq!(MlfnConfig::toy(32).scale_channels(2).signature_dim(), 16);
    }

    #[test]
    fn reid_bottlenecks_follow_resnext_32x4d() {
        let widths: Vec<usize> = MlfnConfig::reid(1).blocks.iter().map(|b| b.fm_width).collect();
        assert_eq!(&widths[..3], &[4, 4, 4]);
        assert_eq!(widths[3], 8);
        assert_eq!(widths[7], 16);
        assert_eq!(widths[15], 32);
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn validation_rejects_zero_extents() {
        let mut c = MlfnConfig::toy(4);
        assert!(c.validate().is_ok());
        c.blocks[1].factor_modules = 0;
        assert!(c.validate().is_err());
    }
}
