//! 1-D ResNet34: the 2-D layout with every convolution flattened to one
//! dimension (same kernel extents, strides, and channel progression),
//! single input channel, global average pooling over time.

use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm1d, Binding, Conv1d, ParamStore};

use super::SizeVariant;

pub(crate) struct BasicBlock {
    conv1: Conv1d,
    bn1: BatchNorm1d,
    conv2: Conv1d,
    bn2: BatchNorm1d,
    down: Option<(Conv1d, BatchNorm1d)>,
}

impl BasicBlock {
    fn register(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv1d::register(
            params,
            &format!("{name}.conv1"),
            in_ch,
            out_ch,
            3,
            stride,
            1,
            1,
        );
        let bn1 = BatchNorm1d::register(params, buffers, &format!("{name}.bn1"), out_ch);
        let conv2 = Conv1d::register(params, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, 1);
        let bn2 = BatchNorm1d::register(params, buffers, &format!("{name}.bn2"), out_ch);
        let down = if stride != 1 || in_ch != out_ch {
            let c = Conv1d::register(
                params,
                &format!("{name}.down.conv"),
                in_ch,
                out_ch,
                1,
                stride,
                0,
                1,
            );
            let b = BatchNorm1d::register(params, buffers, &format!("{name}.down.bn"), out_ch);
            Some((c, b))
        } else {
            None
        };
        BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            down,
        }
    }

    fn forward(&self, g: &mut Graph, ctx: &mut Binding, x: Var) -> Var {
        let mut y = self.conv1.forward(g, ctx, x);
        y = self.bn1.forward(g, ctx, y);
        y = g.relu(y);
        y = self.conv2.forward(g, ctx, y);
        y = self.bn2.forward(g, ctx, y);
        let shortcut = match &self.down {
            Some((c, b)) => {
                let s = c.forward(g, ctx, x);
                b.forward(g, ctx, s)
            }
            None => x,
        };
        let sum = g.add(y, shortcut);
        g.relu(sum)
    }
}

pub struct ResNetDef {
    stem_conv: Conv1d,
    stem_bn: BatchNorm1d,
    blocks: Vec<BasicBlock>,
    pub feature_dim: usize,
}

impl ResNetDef {
    pub(crate) fn register(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        variant: SizeVariant,
    ) -> Self {
        let (stem_ch, stages): (usize, Vec<(usize, usize, usize)>) = match variant {
            // (out_ch, blocks, first_stride) per stage
            SizeVariant::Full => (
                64,
                vec![(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)],
            ),
            SizeVariant::Tiny => (16, vec![(16, 1, 1), (16, 1, 2)]),
        };
        let stem_conv = Conv1d::register(params, "stem.conv", 1, stem_ch, 7, 2, 3, 1);
        let stem_bn = BatchNorm1d::register(params, buffers, "stem.bn", stem_ch);
        let mut blocks = Vec::new();
        let mut in_ch = stem_ch;
        for (si, (out_ch, n, first_stride)) in stages.iter().enumerate() {
            for bi in 0..*n {
                let stride = if bi == 0 { *first_stride } else { 1 };
                blocks.push(BasicBlock::register(
                    params,
                    buffers,
                    &format!("layer{}.block{}", si + 1, bi),
                    in_ch,
                    *out_ch,
                    stride,
                ));
                in_ch = *out_ch;
            }
        }
        ResNetDef {
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
        y = g.maxpool1d(y, 3, 2, 1);
        for block in &self.blocks {
            y = block.forward(g, ctx, y);
        }
        g.global_avg_pool(y)
    }
}
