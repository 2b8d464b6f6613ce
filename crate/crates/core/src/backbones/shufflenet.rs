//! 1-D ShuffleNetV1 (three groups at full size): grouped pointwise
//! convolutions with channel shuffle, depthwise 3-tap convolutions, and
//! concat shortcuts on the stride-2 units.

use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm1d, Binding, Conv1d, ParamStore};

use super::SizeVariant;

/// Interleaving permutation for the channel shuffle: view the channels as
/// `[groups, c/groups]`, transpose, flatten.
fn shuffle_perm(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    (0..channels)
        .map(|j| (j % groups) * per + j / groups)
        .collect()
}

struct ShuffleUnit {
    gconv1: Conv1d,
    bn1: BatchNorm1d,
    dw: Conv1d,
    dw_bn: BatchNorm1d,
    gconv2: Conv1d,
    bn2: BatchNorm1d,
    shuffle: Vec<usize>,
    stride: usize,
}

impl ShuffleUnit {
    #[allow(clippy::too_many_arguments)]
    fn register(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        groups: usize,
        first_of_network: bool,
    ) -> Self {
        let mid = out_ch / 4;
        // Stride-2 units concatenate the pooled input, so the convolution
        // path produces the remaining channels.
        let conv_out = if stride == 2 { out_ch - in_ch } else { out_ch };
        // The very first grouped conv of the network sees too few input
        // channels to split; it runs ungrouped.
        let g1 = if first_of_network { 1 } else { groups };
        let gconv1 = Conv1d::register(params, &format!("{name}.gconv1"), in_ch, mid, 1, 1, 0, g1);
        let bn1 = BatchNorm1d::register(params, buffers, &format!("{name}.bn1"), mid);
        let dw = Conv1d::register(params, &format!("{name}.dw"), mid, mid, 3, stride, 1, mid);
        let dw_bn = BatchNorm1d::register(params, buffers, &format!("{name}.dw_bn"), mid);
        let gconv2 = Conv1d::register(
            params,
            &format!("{name}.gconv2"),
            mid,
            conv_out,
            1,
            1,
            0,
            groups,
        );
        let bn2 = BatchNorm1d::register(params, buffers, &format!("{name}.bn2"), conv_out);
        ShuffleUnit {
            gconv1,
            bn1,
            dw,
            dw_bn,
            gconv2,
            bn2,
            shuffle: shuffle_perm(mid, groups),
            stride,
        }
    }

    fn forward(&self, g: &mut Graph, ctx: &mut Binding, x: Var) -> Var {
        let mut y = self.gconv1.forward(g, ctx, x);
        y = self.bn1.forward(g, ctx, y);
        y = g.relu(y);
        y = g.permute_channels(y, &self.shuffle);
        y = self.dw.forward(g, ctx, y);
        y = self.dw_bn.forward(g, ctx, y);
        y = self.gconv2.forward(g, ctx, y);
        y = self.bn2.forward(g, ctx, y);
        let out = if self.stride == 2 {
            let shortcut = g.avgpool1d(x, 3, 2, 1);
            g.concat_channels(shortcut, y)
        } else {
            g.add(y, x)
        };
        g.relu(out)
    }
}

pub struct ShuffleNetDef {
    stem_conv: Conv1d,
    stem_bn: BatchNorm1d,
    units: Vec<ShuffleUnit>,
    pub feature_dim: usize,
}

impl ShuffleNetDef {
    pub(crate) fn register(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        variant: SizeVariant,
    ) -> Self {
        let (stem_ch, groups, stages): (usize, usize, Vec<(usize, usize)>) = match variant {
            // (out_ch, units) per stage; the first unit of each stage has
            // stride 2.
            SizeVariant::Full => (24, 3, vec![(240, 4), (480, 8), (960, 4)]),
            SizeVariant::Tiny => (8, 2, vec![(16, 2)]),
        };
        let stem_conv = Conv1d::register(params, "stem.conv", 1, stem_ch, 3, 2, 1, 1);
        let stem_bn = BatchNorm1d::register(params, buffers, "stem.bn", stem_ch);
        let mut units = Vec::new();
        let mut in_ch = stem_ch;
        let mut first = true;
        for (si, (out_ch, n)) in stages.iter().enumerate() {
            for ui in 0..*n {
                let stride = if ui == 0 { 2 } else { 1 };
                units.push(ShuffleUnit::register(
                    params,
                    buffers,
                    &format!("stage{}.unit{}", si + 2, ui),
                    in_ch,
                    *out_ch,
                    stride,
                    groups,
                    first,
                ));
                first = false;
                in_ch = *out_ch;
            }
        }
        ShuffleNetDef {
            stem_conv,
            stem_bn,
            units,
            feature_dim: in_ch,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, ctx: &mut Binding, x: Var) -> Var {
        let mut y = self.stem_conv.forward(g, ctx, x);
        y = self.stem_bn.forward(g, ctx, y);
        y = g.relu(y);
        y = g.maxpool1d(y, 3, 2, 1);
        for unit in &self.units {
            y = unit.forward(g, ctx, y);
        }
        g.global_avg_pool(y)
    }
}
