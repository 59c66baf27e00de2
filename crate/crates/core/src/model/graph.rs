use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::GraphSpec;
use crate::error::{Error, Result};
use crate::nn::{Block, C2f, C2fVMamba, C2fVMambaConfig, ConvUnit, Ctx, Emca, EmcaConfig, Init, ParamStore, Sppf};
use crate::tensor::{Tape, Tensor, Var};

/// Output strides of the three head maps.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Objectness and class logit biases start at these priors so early
/// training is not dominated by the many empty cells.
const OBJ_BIAS_INIT: f64 = -4.6;
const CLS_BIAS_INIT: f64 = -2.2;

/// Channel layout of one head map: 4 box offsets, objectness, class logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub num_classes: usize,
}

impl HeadLayout {
    pub const OBJ: usize = 4;
    pub const CLS: usize = 5;

    pub fn channels(&self) -> usize {
        Self::CLS + self.num_classes
    }
}

/// A neck fusion block, plain or state-space.
#[derive(Debug, Clone)]
pub enum NeckBlock {
    C2f(C2f),
    VMamba(C2fVMamba),
}

impl Block for NeckBlock {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            NeckBlock::C2f(b) => b.forward(ctx, x),
            NeckBlock::VMamba(b) => b.forward(ctx, x),
        }
    }
}

/// Decoupled per-scale head: a box/objectness branch and a class branch.
#[derive(Debug, Clone)]
struct Head {
    box_branch: [ConvUnit; 2],
    box_out: ConvUnit,
    cls_branch: [ConvUnit; 2],
    cls_out: ConvUnit,
}

impl Head {
    fn new(init: &mut Init, c_in: usize, box_width: usize, cls_width: usize, num_classes: usize) -> Result<Self> {
        let mut b = init.sub("box");
        let box_branch = [
            ConvUnit::new(&mut b.sub(0), c_in, box_width, 3, 1)?,
            ConvUnit::new(&mut b.sub(1), box_width, box_width, 3, 1)?,
        ];
        let box_out = ConvUnit::linear(&mut b.sub("out"), box_width, HeadLayout::CLS)?;
        let mut c = init.sub("cls");
        let cls_branch = [
            ConvUnit::new(&mut c.sub(0), c_in, cls_width, 3, 1)?,
            ConvUnit::new(&mut c.sub(1), cls_width, cls_width, 3, 1)?,
        ];
        let cls_out = ConvUnit::linear(&mut c.sub("out"), cls_width, num_classes)?;
        Ok(Head {
            box_branch,
            box_out,
            cls_branch,
            cls_out,
        })
    }

    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut b = x;
        for unit in &self.box_branch {
            b = unit.forward(ctx, b)?;
        }
        let mut c = x;
        for unit in &self.cls_branch {
            c = unit.forward(ctx, c)?;
        }
        let parts = [self.box_out.forward(ctx, b)?, self.cls_out.forward(ctx, c)?];
        ctx.tape.concat_channels(&parts)
    }
}

/// A built detector: parameters plus the block structure referencing them.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: GraphSpec,
    pub params: ParamStore,
    stem: ConvUnit,
    stages: Vec<(ConvUnit, C2f)>,
    sppf: Sppf,
    emca: Option<Emca>,
    /// Top-down C2F1, C2F2 then bottom-up C2F3, C2F4.
    neck: Vec<NeckBlock>,
    down: [ConvUnit; 2],
    heads: Vec<Head>,
}

impl Model {
    pub fn build(spec: GraphSpec) -> Result<Self> {
        spec.validate()?;
        let w = spec.widths();
        let depths = spec.backbone_depths();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut root = Init::new(&mut params, &mut rng);

        let (stem, stages, sppf, emca) = {
            let mut bb = root.sub("backbone");
            let stem = ConvUnit::new(&mut bb.sub("stem"), spec.in_channels, w[0], 3, 2)?;
            let mut stages = Vec::with_capacity(4);
            for i in 0..4 {
                let mut st = bb.sub(i + 1);
                let down = ConvUnit::new(&mut st.sub("down"), w[i], w[i + 1], 3, 2)?;
                let c2f = C2f::new(&mut st.sub("c2f"), w[i + 1], w[i + 1], depths[i], true)?;
                stages.push((down, c2f));
            }
            let sppf = Sppf::new(&mut bb.sub("sppf"), w[4], w[4])?;
            let emca = if spec.emca_enabled {
                Some(Emca::new(&mut bb.sub("emca"), EmcaConfig::adaptive(w[4]))?)
            } else {
                None
            };
            (stem, stages, sppf, emca)
        };

        let (neck, down) = {
            let mut nk = root.sub("neck");
            let n = spec.neck_depth();
            let io = [
                (w[4] + w[3], w[3]),
                (w[3] + w[2], w[2]),
                (w[2] + w[3], w[3]),
                (w[3] + w[4], w[4]),
            ];
            let mut neck = Vec::with_capacity(4);
            for (slot, &(c_in, c_out)) in io.iter().enumerate() {
                let mut sub = nk.sub(format!("c2f{}", slot + 1));
                let block = if spec.vmamba_position.slot() == Some(slot) {
                    let cfg = C2fVMambaConfig {
                        in_channels: c_in,
                        out_channels: c_out,
                        n,
                        strict_concat: spec.strict_concat,
                        d_state: spec.d_state,
                    };
                    NeckBlock::VMamba(C2fVMamba::new(&mut sub, cfg)?)
                } else {
                    NeckBlock::C2f(C2f::new(&mut sub, c_in, c_out, n, false)?)
                };
                neck.push(block);
            }
            let down = [
                ConvUnit::new(&mut nk.sub("down1"), w[2], w[2], 3, 2)?,
                ConvUnit::new(&mut nk.sub("down2"), w[3], w[3], 3, 2)?,
            ];
            (neck, down)
        };

        let heads = {
            let mut hd = root.sub("head");
            let box_width = (w[2] / 2).max(16);
            let cls_width = w[2].max(spec.num_classes.min(100));
            [w[2], w[3], w[4]]
                .iter()
                .enumerate()
                .map(|(i, &c)| Head::new(&mut hd.sub(i), c, box_width, cls_width, spec.num_classes))
                .collect::<Result<Vec<_>>>()?
        };
        drop(root);

        for head in &heads {
            if let Some(b) = head.box_out.conv.bias {
                params.get_mut(b).value.data_mut()[HeadLayout::OBJ] = OBJ_BIAS_INIT;
            }
            if let Some(b) = head.cls_out.conv.bias {
                params.get_mut(b).value.data_mut().fill(CLS_BIAS_INIT);
            }
        }

        Ok(Model {
            spec,
            params,
            stem,
            stages,
            sppf,
            emca,
            neck,
            down,
            heads,
        })
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            num_classes: self.spec.num_classes,
        }
    }

    pub fn emca(&self) -> Option<&Emca> {
        self.emca.as_ref()
    }

    pub fn neck(&self) -> &[NeckBlock] {
        &self.neck
    }

    /// Number of VSS blocks anywhere in the graph.
    pub fn vss_block_count(&self) -> usize {
        self.neck
            .iter()
            .map(|b| match b {
                NeckBlock::VMamba(v) => v.stages.len(),
                NeckBlock::C2f(_) => 0,
            })
            .sum()
    }

    /// Raw head maps at strides 8, 16 and 32, each `(n, 5 + classes, h/s, w/s)`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, images: Var<'t>) -> Result<Vec<Var<'t>>> {
        let (_, c, h, w) = images.value().nchw("model")?;
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "model",
                format!("expected {} input channels, got {c}", self.spec.in_channels),
            ));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape("model", format!("input {h}x{w} is not a multiple of 32")));
        }
        let check = |path: &str, v: Var<'t>| -> Result<Var<'t>> {
            if v.value().is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { op: path.to_string() })
            }
        };

        let mut x = check("backbone.stem", self.stem.forward(ctx, images)?)?;
        let mut taps = Vec::with_capacity(4);
        for (i, (down, c2f)) in self.stages.iter().enumerate() {
            x = c2f.forward(ctx, down.forward(ctx, x)?)?;
            x = check(&format!("backbone.{}", i + 1), x)?;
            taps.push(x);
        }
        let mut p5 = check("backbone.sppf", self.sppf.forward(ctx, taps[3])?)?;
        if let Some(emca) = &self.emca {
            p5 = check("backbone.emca", emca.forward(ctx, p5)?)?;
        }
        let (c2, c3) = (taps[1], taps[2]);

        let tape = ctx.tape;
        let t4 = self.neck[0].forward(ctx, tape.concat_channels(&[p5.upsample2x()?, c3])?)?;
        let t4 = check("neck.c2f1", t4)?;
        let out3 = self.neck[1].forward(ctx, tape.concat_channels(&[t4.upsample2x()?, c2])?)?;
        let out3 = check("neck.c2f2", out3)?;
        let out4 = self.neck[2].forward(ctx, tape.concat_channels(&[self.down[0].forward(ctx, out3)?, t4])?)?;
        let out4 = check("neck.c2f3", out4)?;
        let out5 = self.neck[3].forward(ctx, tape.concat_channels(&[self.down[1].forward(ctx, out4)?, p5])?)?;
        let out5 = check("neck.c2f4", out5)?;

        [out3, out4, out5]
            .iter()
            .zip(&self.heads)
            .enumerate()
            .map(|(i, (&f, head))| check(&format!("head.{i}"), head.forward(ctx, f)?))
            .collect()
    }

    /// Forward pass without gradient bookkeeping.
    pub fn infer(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params, false);
        let outs = self.forward(&ctx, tape.constant(images.clone()))?;
        Ok(outs.iter().map(|v| (*v.value()).clone()).collect())
    }
}
