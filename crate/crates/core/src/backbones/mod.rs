//! 1-D convolutional backbones split into a feature extractor and a linear
//! classifier head.
//!
//! Teacher and student always share an architecture, so their feature
//! dimensions and classifier shapes match and logits can be produced from
//! either model's features. Every architecture also has a tiny variant
//! (two blocks, width 16) for fast desk-scale runs and gradient checks.

mod mobilenet;
mod resnet;
mod shufflenet;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Binding, Linear, Mode, ParamStore};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

pub use mobilenet::MobileNetDef;
pub use resnet::ResNetDef;
pub use shufflenet::ShuffleNetDef;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    ResNet34,
    MobileNetV1,
    ShuffleNetV1,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::ResNet34 => "resnet34",
            Arch::MobileNetV1 => "mobilenetv1",
            Arch::ShuffleNetV1 => "shufflenetv1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resnet34" => Ok(Arch::ResNet34),
            "mobilenetv1" => Ok(Arch::MobileNetV1),
            "shufflenetv1" => Ok(Arch::ShuffleNetV1),
            other => Err(Error::Config(format!(
                "unknown arch '{other}' (expected resnet34 | mobilenetv1 | shufflenetv1)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeVariant {
    Full,
    Tiny,
}

impl SizeVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            SizeVariant::Full => "full",
            SizeVariant::Tiny => "tiny",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SizeVariant::Full),
            "tiny" => Ok(SizeVariant::Tiny),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected full | tiny)"
            ))),
        }
    }
}

/// Batch of feature embeddings with their class labels.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub values: Tensor,
    pub subject_labels: Vec<usize>,
}

/// Batch of classifier logits with their class labels.
#[derive(Clone, Debug)]
pub struct LogitsBatch {
    pub values: Tensor,
    pub subject_labels: Vec<usize>,
}

pub(crate) enum Net {
    ResNet(ResNetDef),
    MobileNet(MobileNetDef),
    ShuffleNet(ShuffleNetDef),
}

/// Feature extractor plus linear classifier over a flat parameter vector.
pub struct BackboneModel {
    pub arch: Arch,
    pub variant: SizeVariant,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub window_len: usize,
    pub params: ParamStore,
    pub buffers: ParamStore,
    net: Net,
    classifier: Linear,
}

impl BackboneModel {
    /// Build the parameter layout; values start at zero until `init`.
    pub fn new(
        arch: Arch,
        variant: SizeVariant,
        num_classes: usize,
        window_len: usize,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if window_len < 8 {
            return Err(Error::InvalidArgument(
                "window_len too short for the convolutional stems".into(),
            ));
        }
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let (net, feature_dim) = match arch {
            Arch::ResNet34 => {
                let def = ResNetDef::register(&mut params, &mut buffers, variant);
                let d = def.feature_dim;
                (Net::ResNet(def), d)
            }
            Arch::MobileNetV1 => {
                let def = MobileNetDef::register(&mut params, &mut buffers, variant);
                let d = def.feature_dim;
                (Net::MobileNet(def), d)
            }
            Arch::ShuffleNetV1 => {
                let def = ShuffleNetDef::register(&mut params, &mut buffers, variant);
                let d = def.feature_dim;
                (Net::ShuffleNet(def), d)
            }
        };
        let classifier = Linear::register(&mut params, "cls", feature_dim, num_classes);
        Ok(BackboneModel {
            arch,
            variant,
            num_classes,
            feature_dim,
            window_len,
            params,
            buffers,
            net,
            classifier,
        })
    }

    /// Deterministic seeded initialization of weights and buffers.
    pub fn seeded(
        arch: Arch,
        variant: SizeVariant,
        num_classes: usize,
        window_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::new(arch, variant, num_classes, window_len)?;
        let mut rng = derive_rng(seed, &format!("model-init/{}", arch.as_str()));
        model.init(&mut rng);
        Ok(model)
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        self.params.init(rng);
        let mut brng = rng.clone();
        self.buffers.init(&mut brng);
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// Checked conversion of a `[b, window_len]` batch to `[b, 1, l]`.
    fn to_conv_input(&self, g: &mut Graph, windows: &Tensor, trainable_input: bool) -> Result<Var> {
        if windows.shape().len() != 2 || windows.dim(1) != self.window_len {
            return Err(Error::Shape(format!(
                "expected windows of shape [*, {}], got {:?}",
                self.window_len,
                windows.shape()
            )));
        }
        if !windows.is_finite() {
            return Err(Error::InvalidData("non-finite values in input windows".into()));
        }
        let b = windows.dim(0);
        let t = windows
            .clone()
            .reshaped(vec![b, 1, self.window_len])
            .expect("reshape cannot fail");
        Ok(if trainable_input {
            g.leaf(t)
        } else {
            g.constant(t)
        })
    }

    /// In-graph feature extraction for training. The caller owns the binding
    /// and decides trainability and mode.
    pub fn forward_features(&self, g: &mut Graph, ctx: &mut Binding, x: Var) -> Var {
        match &self.net {
            Net::ResNet(def) => def.forward(g, ctx, x),
            Net::MobileNet(def) => def.forward(g, ctx, x),
            Net::ShuffleNet(def) => def.forward(g, ctx, x),
        }
    }

    /// In-graph logits from features via the classifier head.
    pub fn forward_logits(&self, g: &mut Graph, ctx: &mut Binding, features: Var) -> Var {
        self.classifier.forward(g, ctx, features)
    }

    pub fn binding(&self, trainable: bool, mode: Mode) -> Binding<'_> {
        Binding::new(&self.params, &self.buffers, trainable, mode)
    }

    /// Inference-mode embeddings as plain values (no gradients, no stat
    /// updates).
    pub fn embed(&self, windows: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = self.binding(false, Mode::Eval);
        let x = self.to_conv_input(&mut g, windows, false)?;
        let f = self.forward_features(&mut g, &mut ctx, x);
        Ok(g.value(f).clone())
    }

    /// Inference-mode logits as plain values.
    pub fn logits(&self, windows: &Tensor) -> Result<Tensor> {
        let features = self.embed(windows)?;
        self.classifier.apply_plain(&self.params, &features)
    }
}

/// Deterministic inference-mode feature extraction.
pub fn feature_extract(
    model: &BackboneModel,
    windows: &Tensor,
    subject_labels: &[usize],
) -> Result<EmbeddingBatch> {
    if !subject_labels.is_empty() && subject_labels.len() != windows.dim(0) {
        return Err(Error::Shape(format!(
            "label count {} does not match batch size {}",
            subject_labels.len(),
            windows.dim(0)
        )));
    }
    let values = model.embed(windows)?;
    Ok(EmbeddingBatch {
        values,
        subject_labels: subject_labels.to_vec(),
    })
}

/// Affine classifier head on a feature batch. Accepts features from any
/// model with a matching feature dimension, which is what permits
/// cross-feeding between a homogeneous teacher and student.
pub fn classify(model: &BackboneModel, features: &EmbeddingBatch) -> Result<LogitsBatch> {
    if features.values.shape().len() != 2 || features.values.dim(1) != model.feature_dim {
        return Err(Error::Shape(format!(
            "classifier expects [*, {}], got {:?}",
            model.feature_dim,
            features.values.shape()
        )));
    }
    let values = model.classifier.apply_plain(&model.params, &features.values)?;
    Ok(LogitsBatch {
        values,
        subject_labels: features.subject_labels.clone(),
    })
}

/// Gradient of a scalar loss with respect to the bound model parameters,
/// flattened in layout order.
pub fn backward(g: &Graph, loss: Var, binding: &Binding) -> Result<Vec<f64>> {
    let grads = g.backward(loss)?;
    Ok(binding.collect_grads(g, &grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_windows(b: usize, l: usize) -> Tensor {
        Tensor::zeros(&[b, l])
    }

    #[test]
    fn resnet_full_feature_dim_is_512() {
        let m = BackboneModel::seeded(Arch::ResNet34, SizeVariant::Full, 5, 300, 1).unwrap();
        assert_eq!(m.feature_dim, 512);
        let emb = feature_extract(&m, &zero_windows(1, 300), &[]).unwrap();
        assert_eq!(emb.values.shape(), &[1, 512]);
        assert!(emb.values.is_finite());
    }

    #[test]
    fn mobilenet_and_shufflenet_full_dims() {
        let m = BackboneModel::seeded(Arch::MobileNetV1, SizeVariant::Full, 3, 300, 1).unwrap();
        assert_eq!(m.feature_dim, 1024);
        let s = BackboneModel::seeded(Arch::ShuffleNetV1, SizeVariant::Full, 3, 300, 1).unwrap();
        assert_eq!(s.feature_dim, 960);
    }

    #[test]
    fn duplicated_rows_give_identical_embeddings() {
        let m = BackboneModel::seeded(Arch::ResNet34, SizeVariant::Tiny, 4, 300, 9).unwrap();
        let mut w = Tensor::zeros(&[2, 300]);
        for i in 0..300 {
            let v = (i as f64 * 0.1).sin();
            w.data_mut()[i] = v;
            w.data_mut()[300 + i] = v;
        }
        let e = m.embed(&w).unwrap();
        let d = m.feature_dim;
        assert_eq!(e.data()[..d], e.data()[d..2 * d]);
    }

    #[test]
    fn fixed_seed_reproduces_byte_identical_outputs() {
        let a = BackboneModel::seeded(Arch::ShuffleNetV1, SizeVariant::Tiny, 4, 300, 5).unwrap();
        let b = BackboneModel::seeded(Arch::ShuffleNetV1, SizeVariant::Tiny, 4, 300, 5).unwrap();
        assert_eq!(a.params.data(), b.params.data());
        let mut w = Tensor::zeros(&[1, 300]);
        for i in 0..300 {
            w.data_mut()[i] = (i as f64 * 0.05).cos();
        }
        let ea = a.embed(&w).unwrap();
        let eb = b.embed(&w).unwrap();
        assert_eq!(ea.data(), eb.data());
    }

    #[test]
    fn wrong_window_length_is_shape_error() {
        let m = BackboneModel::seeded(Arch::ResNet34, SizeVariant::Tiny, 4, 300, 1).unwrap();
        assert!(matches!(
            m.embed(&Tensor::zeros(&[1, 200])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn cross_feed_same_arch_is_shape_valid() {
        let teacher = BackboneModel::seeded(Arch::ResNet34, SizeVariant::Tiny, 6, 300, 1).unwrap();
        let student = BackboneModel::seeded(Arch::ResNet34, SizeVariant::Tiny, 6, 300, 2).unwrap();
        let f_s = feature_extract(&student, &zero_windows(3, 300), &[0, 1, 2]).unwrap();
        let q_t = classify(&teacher, &f_s).unwrap();
        assert_eq!(q_t.values.shape(), &[3, 6]);
    }

    #[test]
    fn classifier_zero_features_zero_bias_gives_zero_logits() {
        let m = BackboneModel::new(Arch::ResNet34, SizeVariant::Tiny, 4, 300).unwrap();
        // params left at zero
        let f = EmbeddingBatch {
            values: Tensor::zeros(&[2, m.feature_dim]),
            subject_labels: vec![0, 1],
        };
        let l = classify(&m, &f).unwrap();
        assert!(l.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_is_stable() {
        let m = BackboneModel::new(Arch::ResNet34, SizeVariant::Full, 341, 300).unwrap();
        let n_backbone = m.params.len() - (m.feature_dim + 1) * m.num_classes;
        let again = BackboneModel::new(Arch::ResNet34, SizeVariant::Full, 341, 300).unwrap();
        assert_eq!(m.params.len(), again.params.len());
        // 1-D ResNet34 backbone weight count, frozen once measured.
        assert_eq!(n_backbone, 7_226_752);
    }
}
