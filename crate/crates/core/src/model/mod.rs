//! Detector assembly: backbone, feature-fusion neck, decoupled heads, decoding.

mod decode;
mod graph;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use decode::{decode, decode_box, nms, DecodeConfig, BOX_LOG_CLAMP};
pub use graph::{HeadLayout, Model, NeckBlock, STRIDES};

use crate::error::{Error, Result};

/// Which neck C2F, counted top-down then bottom-up, becomes a C2F-VMamba.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VmambaPosition {
    #[default]
    None,
    C2f1,
    C2f2,
    C2f3,
    C2f4,
}

impl VmambaPosition {
    /// Zero-based neck slot, if any.
    pub fn slot(self) -> Option<usize> {
        match self {
            VmambaPosition::None => None,
            VmambaPosition::C2f1 => Some(0),
            VmambaPosition::C2f2 => Some(1),
            VmambaPosition::C2f3 => Some(2),
            VmambaPosition::C2f4 => Some(3),
        }
    }
}

impl FromStr for VmambaPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(VmambaPosition::None),
            "c2f1" => Ok(VmambaPosition::C2f1),
            "c2f2" => Ok(VmambaPosition::C2f2),
            "c2f3" => Ok(VmambaPosition::C2f3),
            "c2f4" => Ok(VmambaPosition::C2f4),
            other => Err(Error::Config(format!(
                "invalid vmamba position `{other}` (expected none, c2f1, c2f2, c2f3 or c2f4)"
            ))),
        }
    }
}

impl fmt::Display for VmambaPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VmambaPosition::None => "none",
            VmambaPosition::C2f1 => "c2f1",
            VmambaPosition::C2f2 => "c2f2",
            VmambaPosition::C2f3 => "c2f3",
            VmambaPosition::C2f4 => "c2f4",
        })
    }
}

/// Width/depth preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Small detector scale.
    S,
    /// Desk-scale preset for gradient checks and CPU training.
    NanoTest,
}

impl Scale {
    pub fn multipliers(self) -> (f64, f64) {
        match self {
            Scale::S => (0.5, 0.33),
            // 0.2 rounds every block count down to one
            Scale::NanoTest => (0.125, 0.2),
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(Scale::S),
            "nano-test" | "nano" => Ok(Scale::NanoTest),
            other => Err(Error::Config(format!(
                "unknown scale `{other}` (expected s or nano-test)"
            ))),
        }
    }
}

/// Named ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    FabMe,
    EmcaOnly,
    /// C2F-VMamba at the given slot, EMCA off.
    Vmamba(VmambaPosition),
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::Vmamba(VmambaPosition::C2f1),
        Variant::Vmamba(VmambaPosition::C2f2),
        Variant::Vmamba(VmambaPosition::C2f3),
        Variant::Vmamba(VmambaPosition::C2f4),
        Variant::EmcaOnly,
        Variant::FabMe,
    ];

    pub fn toggles(self) -> (bool, VmambaPosition) {
        match self {
            Variant::Baseline => (false, VmambaPosition::None),
            Variant::FabMe => (true, VmambaPosition::C2f3),
            Variant::EmcaOnly => (true, VmambaPosition::None),
            Variant::Vmamba(p) => (false, p),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "fabme" | "fab-me" => Ok(Variant::FabMe),
            "emca-only" | "emca" => Ok(Variant::EmcaOnly),
            other => match other.parse::<VmambaPosition>() {
                Ok(p) if p != VmambaPosition::None => Ok(Variant::Vmamba(p)),
                _ => Err(Error::Config(format!(
                    "unknown variant `{s}` (expected baseline, fabme, emca-only, c2f1..c2f4)"
                ))),
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => f.write_str("baseline"),
            Variant::FabMe => f.write_str("fabme"),
            Variant::EmcaOnly => f.write_str("emca-only"),
            Variant::Vmamba(p) => write!(f, "{p}"),
        }
    }
}

/// Declarative description of a detector.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Cap on any stage width before `width_mult` is applied.
    pub max_channels: usize,
    pub emca_enabled: bool,
    pub vmamba_position: VmambaPosition,
    pub num_classes: usize,
    /// Square input side; must be a positive multiple of 32.
    pub input_size: usize,
    pub in_channels: usize,
    pub d_state: usize,
    pub strict_concat: bool,
    pub seed: u64,
}

/// Keys understood by [`GraphSpec::parse`].
pub const GRAPH_KEYS: [&str; 13] = [
    "scale",
    "variant",
    "width_mult",
    "depth_mult",
    "max_channels",
    "emca_enabled",
    "vmamba_position",
    "num_classes",
    "input_size",
    "in_channels",
    "d_state",
    "strict_concat",
    "seed",
];

/// `(line, key, value)` triples of a `key = value` file; `#` starts a comment.
pub fn config_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: "<config>".into(),
            line: i + 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Base widths of stem and stages c1..c4 before scaling.
const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
/// Base block counts of the backbone C2F stages.
const BASE_DEPTHS: [usize; 4] = [3, 6, 6, 3];
/// Base block count of every neck C2F.
const BASE_NECK_DEPTH: usize = 3;

impl GraphSpec {
    pub fn preset(scale: Scale, variant: Variant) -> Self {
        let (width_mult, depth_mult) = scale.multipliers();
        let (emca_enabled, vmamba_position) = variant.toggles();
        GraphSpec {
            width_mult,
            depth_mult,
            max_channels: 1024,
            emca_enabled,
            vmamba_position,
            num_classes: 20,
            input_size: match scale {
                Scale::S => 640,
                Scale::NanoTest => 64,
            },
            in_channels: 3,
            d_state: 16,
            strict_concat: true,
            seed: 0,
        }
    }

    pub fn fabme() -> Self {
        GraphSpec::preset(Scale::S, Variant::FabMe)
    }

    pub fn baseline() -> Self {
        GraphSpec::preset(Scale::S, Variant::Baseline)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        (self.emca_enabled, self.vmamba_position) = variant.toggles();
        self
    }

    /// Channel widths of stem and stages c1..c4, each rounded to a multiple of 8.
    pub fn widths(&self) -> [usize; 5] {
        BASE_WIDTHS.map(|w| {
            let scaled = (w.min(self.max_channels) as f64 * self.width_mult / 8.0).ceil() as usize * 8;
            scaled.max(8)
        })
    }

    fn depth(&self, base: usize) -> usize {
        ((base as f64 * self.depth_mult).round() as usize).max(1)
    }

    /// Block counts of the four backbone C2F stages.
    pub fn backbone_depths(&self) -> [usize; 4] {
        BASE_DEPTHS.map(|d| self.depth(d))
    }

    pub fn neck_depth(&self) -> usize {
        self.depth(BASE_NECK_DEPTH)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.width_mult > 0.0
            && self.width_mult.is_finite()
            && self.depth_mult > 0.0
            && self.depth_mult.is_finite();
        if !positive {
            return Err(Error::Config("width_mult and depth_mult must be positive".into()));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.d_state == 0 {
            return Err(Error::Config(
                "num_classes, in_channels and d_state must be >= 1".into(),
            ));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        let w = self.widths();
        if w.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!("stage widths {w:?} must strictly increase")));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep the
    /// `nano-test` baseline defaults unless `scale`/`variant` are given.
    /// Training keys are skipped so one file can configure both.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = config_pairs(text)?;
        let lookup = |key: &str| pairs.iter().find(|(_, k, _)| k == key).map(|(_, _, v)| v.as_str());
        let scale = lookup("scale").map(str::parse).transpose()?.unwrap_or(Scale::NanoTest);
        let variant = lookup("variant")
            .map(str::parse)
            .transpose()?
            .unwrap_or(Variant::Baseline);
        let mut spec = GraphSpec::preset(scale, variant);
        for (line, key, value) in &pairs {
            let bad = |msg: String| Error::Parse {
                path: "<graph spec>".into(),
                line: *line,
                msg,
            };
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            let int = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            let flag = |v: &str| v.parse::<bool>().map_err(|e| bad(format!("{key}: {e}")));
            match key.as_str() {
                "scale" | "variant" => {}
                "width_mult" => spec.width_mult = num(value)?,
                "depth_mult" => spec.depth_mult = num(value)?,
                "max_channels" => spec.max_channels = int(value)?,
                "emca_enabled" => spec.emca_enabled = flag(value)?,
                "vmamba_position" => spec.vmamba_position = value.parse()?,
                "num_classes" => spec.num_classes = int(value)?,
                "input_size" => spec.input_size = int(value)?,
                "in_channels" => spec.in_channels = int(value)?,
                "d_state" => spec.d_state = int(value)?,
                "strict_concat" => spec.strict_concat = flag(value)?,
                "seed" => spec.seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?,
                k if crate::train::TRAIN_KEYS.contains(&k) => {}
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        GraphSpec::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                msg,
            },
            other => other,
        })
    }

    /// Serialized form accepted by [`GraphSpec::parse`].
    pub fn to_config(&self) -> String {
        format!(
            "width_mult = {}\ndepth_mult = {}\nmax_channels = {}\nemca_enabled = {}\nvmamba_position = {}\n\
             num_classes = {}\ninput_size = {}\nin_channels = {}\nd_state = {}\nstrict_concat = {}\nseed = {}\n",
            self.width_mult,
            self.depth_mult,
            self.max_channels,
            self.emca_enabled,
            self.vmamba_position,
            self.num_classes,
            self.input_size,
            self.in_channels,
            self.d_state,
            self.strict_concat,
            self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_widths() {
        assert_eq!(GraphSpec::fabme().widths(), [32, 64, 128, 256, 512]);
        assert_eq!(GraphSpec::fabme().backbone_depths(), [1, 2, 2, 1]);
        let nano = GraphSpec::preset(Scale::NanoTest, Variant::FabMe);
        assert_eq!(nano.widths(), [8, 16, 32, 64, 128]);
        assert_eq!(nano.backbone_depths(), [1; 4]);
        assert_eq!(nano.neck_depth(), 1);
    }

    #[test]
    fn default_fabme_toggles() {
        let s = GraphSpec::fabme();
        assert!(s.emca_enabled);
        assert_eq!(s.vmamba_position, VmambaPosition::C2f3);
    }

    #[test]
    fn config_round_trip() {
        let spec = GraphSpec::preset(Scale::NanoTest, Variant::Vmamba(VmambaPosition::C2f2));
        assert_eq!(GraphSpec::parse(&spec.to_config()).unwrap(), spec);
    }

    #[test]
    fn config_errors() {
        assert!(GraphSpec::parse("vmamba_position = c2f5").is_err());
        assert!(GraphSpec::parse("input_size = 100").is_err());
        match GraphSpec::parse("# header\nfoo = 1") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("c2f0".parse::<Variant>().is_err());
        assert!("none".parse::<Variant>().is_err());
    }
}
