//! 1-D MobileNetV1: a stride-2 stem followed by depthwise-separable blocks
//! with the canonical channel progression, single input channel.

use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm1d, Binding, Conv1d, ParamStore};

use super::SizeVariant;

struct DwSepBlock {
    dw: Conv1d,
    dw_bn: BatchNorm1d,
    pw: Conv1d,
    pw_bn: BatchNorm1d,
}

impl DwSepBlock {
    fn register(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let dw = Conv1d::register(
            params,
            &format!("{name}.dw"),
            in_ch,
            in_ch,
            3,
            stride,
            1,
            in_ch,
        );
        let dw_bn = BatchNorm1d::register(params, buffers, &format!("{name}.dw_bn"), in_ch);
        let pw = Conv1d::register(params, &format!("{name}.pw"), in_ch, out_ch, 1, 1, 0, 1);
        let pw_bn = BatchNorm1d::register(params, buffers, &format!("{name}.pw_bn"), out_ch);
        DwSepBlock { dw, dw_bn, pw, pw_bn }
    }

    fn forward(&self, g: &mut Graph, ctx: &mut Binding, x: Var) -> Var {
        let mut y = self.dw.forward(g, ctx, x);
        y = self.dw_bn.forward(g, ctx, y);
        y = g.relu(y);
        y = self.pw.forward(g, ctx, y);
        y = self.pw_bn.forward(g, ctx, y);
        g.relu(y)
    }
}

pub struct MobileNetDef {
    stem_conv: Conv1d,
    stem_bn: BatchNorm1d,
    blocks: Vec<DwSepBlock>,
    pub feature_dim: usize,
}

impl MobileNetDef {
    pub(crate) fn register(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        variant: SizeVariant,
    ) -> Self {
        let (stem_ch, plan): (usize, Vec<(usize, usize)>) = match variant {
            // (out_ch, stride) per depthwise-separable block
            SizeVariant::Full => (
                32,
                vec![
                    (64, 1),
                    (128, 2),
                    (128, 1),
                    (256, 2),
                    (256, 1),
                    (512, 2),
                    (512, 1),
                    (512, 1),
                    (512, 1),
                    (512, 1),
                    (512, 1),
                    (1024, 2),
                    (1024, 1),
                ],
            ),
            SizeVariant::Tiny => (16, vec![(16, 2), (16, 1)]),
        };
        let stem_conv = Conv1d::register(params, "stem.conv", 1, stem_ch, 3, 2, 1, 1);
        let stem_bn = BatchNorm1d::register(params, buffers, "stem.bn", stem_ch);
        let mut blocks = Vec::new();
        let mut in_ch = stem_ch;
        for (bi, (out_ch, stride)) in plan.iter().enumerate() {
            blocks.push(DwSepBlock::register(
                params,
                buffers,
                &format!("block{bi}"),
                in_ch,
                *out_ch,
                *stride,
            ));
            in_ch = *out_ch;
        }
        MobileNetDef {
            stem_conv,
            stem_bn,
            blocks,
            feature_dim: in_ch,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, ctx: &mut Binding, x: Var) -> Var {
        let mut y = self.stem_conv.forward(g, ctx, x);
        y = self.stem_bn.forward(g, ctx, y);
        y = g.relu(y);
        for block in &self.blocks {
            y = block.forward(g, ctx, y);
        }
        g.global_avg_pool(y)
    }
}
