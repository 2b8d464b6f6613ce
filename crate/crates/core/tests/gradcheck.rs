//! Central finite-difference checks for every differentiable operation,
//! the loss family, and the tiny backbones.

mod common;

use common::{check_graph_fn, fd_max_rel_err, random_tensor, rng, scalarize};

use pulsekd_core::backbones::{backward, Arch, BackboneModel, SizeVariant};
use pulsekd_core::graph::Graph;
use pulsekd_core::losses::{
    batch_hard_triplet, cka_loss, info_nce, kd_loss, mmd_loss, task_loss, total_loss,
    triplet_loss, Bandwidth, LossConfig, TaskMode,
};
use pulsekd_core::nn::Mode;
use pulsekd_core::tensor::Tensor;

const RTOL: f64 = 1e-3;
const PROBES: usize = 24;

#[test]
fn elementwise_and_reduction_ops() {
    let mut r = rng(11);
    let a = random_tensor(&[3, 4], &mut r, 2.0);
    let b = random_tensor(&[3, 4], &mut r, 2.0);

    let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &[pulsekd_core::graph::Var]) -> pulsekd_core::graph::Var>)> = vec![
        ("add", Box::new(|g, v| { let y = g.add(v[0], v[1]); scalarize(g, y, 1) })),
        ("sub", Box::new(|g, v| { let y = g.sub(v[0], v[1]); scalarize(g, y, 2) })),
        ("mul", Box::new(|g, v| { let y = g.mul(v[0], v[1]); scalarize(g, y, 3) })),
        ("scale", Box::new(|g, v| { let y = g.scale(v[0], -1.7); scalarize(g, y, 4) })),
        ("add_scalar", Box::new(|g, v| { let y = g.add_scalar(v[0], 0.3); scalarize(g, y, 5) })),
        ("relu", Box::new(|g, v| { let y = g.relu(v[0]); scalarize(g, y, 6) })),
        ("exp", Box::new(|g, v| { let y = g.exp(v[0]); scalarize(g, y, 7) })),
        ("dot", Box::new(|g, v| g.dot(v[0], v[1]))),
        ("sum_all", Box::new(|g, v| g.sum_all(v[0]))),
        ("mean_all", Box::new(|g, v| g.mean_all(v[0]))),
        ("reshape", Box::new(|g, v| { let y = g.reshape(v[0], vec![4, 3]); scalarize(g, y, 8) })),
        ("transpose2", Box::new(|g, v| { let y = g.transpose2(v[0]); scalarize(g, y, 9) })),
        ("sum_vars", Box::new(|g, v| { let y = g.sum_vars(&[v[0], v[1], v[0]]); scalarize(g, y, 10) })),
    ];
    for (name, build) in cases {
        let err = check_graph_fn(&[a.clone(), b.clone()], build.as_ref(), PROBES, 21);
        assert!(err < RTOL, "{name}: max relative error {err}");
    }
}

#[test]
fn row_batch_linear_algebra_ops() {
    let mut r = rng(13);
    let x = random_tensor(&[4, 6], &mut r, 1.5);
    let w = random_tensor(&[3, 6], &mut r, 1.0);
    let bias = random_tensor(&[3], &mut r, 0.5);

    let err = check_graph_fn(
        &[x.clone(), w.clone()],
        &|g, v| {
            let y = g.matmul_nt(v[0], v[1]);
            scalarize(g, y, 30)
        },
        PROBES,
        31,
    );
    assert!(err < RTOL, "matmul_nt: {err}");

    let err = check_graph_fn(
        &[x.clone(), w.clone(), bias.clone()],
        &|g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            scalarize(g, y, 32)
        },
        PROBES,
        33,
    );
    assert!(err < RTOL, "linear: {err}");

    let err = check_graph_fn(
        &[x.clone()],
        &|g, v| {
            let y = g.row_l2_normalize(v[0], 1e-12);
            scalarize(g, y, 34)
        },
        PROBES,
        35,
    );
    assert!(err < RTOL, "row_l2_normalize: {err}");

    let err = check_graph_fn(
        &[x.clone()],
        &|g, v| {
            let y = g.log_softmax_rows(v[0]);
            scalarize(g, y, 36)
        },
        PROBES,
        37,
    );
    assert!(err < RTOL, "log_softmax_rows: {err}");

    let err = check_graph_fn(
        &[x.clone()],
        &|g, v| {
            let y = g.softmax_rows(v[0]);
            scalarize(g, y, 38)
        },
        PROBES,
        39,
    );
    assert!(err < RTOL, "softmax_rows: {err}");

    let err = check_graph_fn(
        &[x.clone()],
        &|g, v| {
            let lsm = g.log_softmax_rows(v[0]);
            g.nll_rows(lsm, &[0, 3, 1, 5])
        },
        PROBES,
        40,
    );
    assert!(err < RTOL, "nll_rows: {err}");

    let y2 = random_tensor(&[5, 6], &mut r, 1.5);
    let err = check_graph_fn(
        &[x.clone(), y2.clone()],
        &|g, v| {
            let y = g.pairwise_sqdist(v[0], v[1]);
            scalarize(g, y, 41)
        },
        PROBES,
        42,
    );
    assert!(err < RTOL, "pairwise_sqdist: {err}");

    let x2 = random_tensor(&[4, 6], &mut r, 1.5);
    let err = check_graph_fn(
        &[x.clone(), x2],
        &|g, v| {
            let y = g.rows_euclid(v[0], v[1]);
            scalarize(g, y, 43)
        },
        PROBES,
        44,
    );
    assert!(err < RTOL, "rows_euclid: {err}");

    let err = check_graph_fn(
        &[x.clone()],
        &|g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 3]);
            scalarize(g, y, 45)
        },
        PROBES,
        46,
    );
    assert!(err < RTOL, "gather_rows: {err}");
}

#[test]
fn convolution_and_pooling_ops() {
    let mut r = rng(17);
    let x = random_tensor(&[2, 4, 13], &mut r, 1.0);

    // plain, strided, padded, grouped convolutions
    for (name, co, k, stride, pad, groups, seed) in [
        ("conv_s1", 3usize, 3usize, 1usize, 1usize, 1usize, 50u64),
        ("conv_s2", 6, 5, 2, 2, 1, 51),
        ("conv_grouped", 4, 3, 1, 1, 2, 52),
        ("conv_depthwise", 4, 3, 2, 1, 4, 53),
    ] {
        let w = random_tensor(&[co, 4 / groups, k], &mut r, 0.8);
        let b = random_tensor(&[co], &mut r, 0.3);
        let err = check_graph_fn(
            &[x.clone(), w, b],
            &move |g, v| {
                let y = g.conv1d(v[0], v[1], v[2], stride, pad, groups);
                scalarize(g, y, seed)
            },
            PROBES,
            seed + 100,
        );
        assert!(err < RTOL, "{name}: {err}");
    }

    let gamma = random_tensor(&[4], &mut r, 0.9);
    let gamma = Tensor::new(vec![4], gamma.data().iter().map(|v| v + 1.2).collect()).unwrap();
    let beta = random_tensor(&[4], &mut r, 0.4);
    let err = check_graph_fn(
        &[x.clone(), gamma.clone(), beta.clone()],
        &|g, v| {
            let (y, _, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5);
            scalarize(g, y, 60)
        },
        PROBES,
        61,
    );
    assert!(err < RTOL, "batchnorm_train: {err}");

    let rm = vec![0.1, -0.2, 0.05, 0.3];
    let rv = vec![1.3, 0.8, 1.0, 0.6];
    let err = check_graph_fn(
        &[x.clone(), gamma, beta],
        &move |g, v| {
            let y = g.batchnorm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5);
            scalarize(g, y, 62)
        },
        PROBES,
        63,
    );
    assert!(err < RTOL, "batchnorm_eval: {err}");

    for (name, build) in [
        (
            "maxpool1d",
            Box::new(|g: &mut Graph, v: &[pulsekd_core::graph::Var]| {
                let y = g.maxpool1d(v[0], 3, 2, 1);
                scalarize(g, y, 64)
            }) as Box<dyn Fn(&mut Graph, &[pulsekd_core::graph::Var]) -> pulsekd_core::graph::Var>,
        ),
        (
            "avgpool1d",
            Box::new(|g: &mut Graph, v: &[pulsekd_core::graph::Var]| {
                let y = g.avgpool1d(v[0], 3, 2, 1);
                scalarize(g, y, 65)
            }),
        ),
        (
            "global_avg_pool",
            Box::new(|g: &mut Graph, v: &[pulsekd_core::graph::Var]| {
                let y = g.global_avg_pool(v[0]);
                scalarize(g, y, 66)
            }),
        ),
        (
            "permute_channels",
            Box::new(|g: &mut Graph, v: &[pulsekd_core::graph::Var]| {
                let y = g.permute_channels(v[0], &[2, 0, 3, 1]);
                scalarize(g, y, 67)
            }),
        ),
    ] {
        let err = check_graph_fn(&[x.clone()], build.as_ref(), PROBES, 70);
        assert!(err < RTOL, "{name}: {err}");
    }

    let x2 = random_tensor(&[2, 3, 13], &mut r, 1.0);
    let err = check_graph_fn(
        &[x.clone(), x2],
        &|g, v| {
            let y = g.concat_channels(v[0], v[1]);
            scalarize(g, y, 68)
        },
        PROBES,
        71,
    );
    assert!(err < RTOL, "concat_channels: {err}");
}

#[test]
fn loss_gradients() {
    let mut r = rng(23);
    let e = random_tensor(&[6, 8], &mut r, 1.0);
    let p = random_tensor(&[6, 8], &mut r, 1.0);

    let err = check_graph_fn(
        &[e.clone(), p.clone()],
        &|g, v| info_nce(g, v[0], v[1], 0.3).unwrap(),
        PROBES,
        80,
    );
    assert!(err < RTOL, "info_nce: {err}");

    // Fixed bandwidth only: the median heuristic is defined as a constant
    // of the batch, so finite differences (which move the median) do not
    // apply to it.
    let err = check_graph_fn(
        &[e.clone(), p.clone()],
        &|g, v| mmd_loss(g, v[0], v[1], Bandwidth::Fixed(1.4)).unwrap(),
        PROBES,
        81,
    );
    assert!(err < RTOL, "mmd_loss: {err}");

    let a = random_tensor(&[5], &mut r, 1.0);
    let pos = random_tensor(&[5], &mut r, 1.0);
    let neg = random_tensor(&[5], &mut r, 1.0);
    let err = check_graph_fn(
        &[a, pos, neg],
        &|g, v| triplet_loss(g, v[0], v[1], v[2], 2.5).unwrap(),
        PROBES,
        82,
    );
    assert!(err < RTOL, "triplet_loss: {err}");

    let teacher = random_tensor(&[4, 5], &mut r, 2.0);
    let student = random_tensor(&[4, 5], &mut r, 2.0);
    let tcopy = teacher.clone();
    let err = check_graph_fn(
        &[student.clone()],
        &move |g, v| kd_loss(g, &tcopy, v[0], 4.0).unwrap(),
        PROBES,
        83,
    );
    assert!(err < RTOL, "kd_loss: {err}");

    let p_t = random_tensor(&[4, 5], &mut r, 2.0);
    let p_s = random_tensor(&[4, 5], &mut r, 2.0);
    let (ptc, psc) = (p_t.clone(), p_s.clone());
    let err = check_graph_fn(
        &[teacher.clone(), student.clone()],
        &move |g, v| cka_loss(g, &ptc, v[0], &psc, v[1], 4.0).unwrap(),
        PROBES,
        84,
    );
    assert!(err < RTOL, "cka_loss: {err}");

    let logits = random_tensor(&[6, 4], &mut r, 2.0);
    let labels = vec![0usize, 1, 2, 3, 1, 0];
    let lcl = labels.clone();
    let err = check_graph_fn(
        &[logits.clone()],
        &move |g, v| task_loss(g, v[0], &lcl, TaskMode::SampleWise, None, 1.0).unwrap(),
        PROBES,
        85,
    );
    assert!(err < RTOL, "task_loss sample-wise: {err}");

    let emb = random_tensor(&[6, 7], &mut r, 1.0);
    let lcl = labels.clone();
    let err = check_graph_fn(
        &[logits.clone(), emb.clone()],
        &move |g, v| task_loss(g, v[0], &lcl, TaskMode::SubjectWise, Some(v[1]), 1.0).unwrap(),
        PROBES,
        86,
    );
    assert!(err < RTOL, "task_loss subject-wise: {err}");

    let lcl = labels.clone();
    let err = check_graph_fn(
        &[emb],
        &move |g, v| batch_hard_triplet(g, v[0], &lcl, 1.0).unwrap(),
        PROBES,
        87,
    );
    assert!(err < RTOL, "batch_hard_triplet: {err}");

    // Composite objective with every term live.
    let tch = teacher.clone();
    let ptc = p_t.clone();
    let psc = p_s.clone();
    let err = check_graph_fn(
        &[e, p, student, logits],
        &move |g, v| {
            let cfg = LossConfig::default();
            let task = task_loss(g, v[3], &[0, 1, 2, 3, 1, 0], TaskMode::SampleWise, None, 1.0)
                .unwrap();
            let kd = kd_loss(g, &tch, v[2], cfg.tau_kd).unwrap();
            let rel = mmd_loss(g, v[0], v[1], Bandwidth::Fixed(1.1)).unwrap();
            let cka = cka_loss(g, &ptc, v[2], &psc, v[2], cfg.tau_kd).unwrap();
            total_loss(g, task, kd, rel, cka, &cfg)
        },
        PROBES,
        88,
    );
    assert!(err < RTOL, "total_loss composite: {err}");
}

/// Cross-entropy loss through each tiny backbone, training mode, checked
/// against finite differences on randomly probed parameters.
#[test]
fn tiny_backbone_parameter_gradients() {
    for (arch, seed) in [
        (Arch::ResNet34, 901u64),
        (Arch::MobileNetV1, 902),
        (Arch::ShuffleNetV1, 903),
    ] {
        let window_len = 64;
        let classes = 3;
        let batch = 4;
        let model = BackboneModel::seeded(arch, SizeVariant::Tiny, classes, window_len, seed).unwrap();
        let mut r = rng(seed);
        let windows = random_tensor(&[batch, window_len], &mut r, 1.0);
        let labels = vec![0usize, 1, 2, 1];

        let loss_and_grads = |params: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut m = BackboneModel::new(arch, SizeVariant::Tiny, classes, window_len).unwrap();
            m.params.data_mut().copy_from_slice(params);
            m.buffers
                .data_mut()
                .copy_from_slice(model.buffers.data());
            let mut g = Graph::new();
            let mut ctx = m.binding(true, Mode::Train);
            let x = g.constant(
                windows
                    .clone()
                    .reshaped(vec![batch, 1, window_len])
                    .unwrap(),
            );
            let f = m.forward_features(&mut g, &mut ctx, x);
            let logits = m.forward_logits(&mut g, &mut ctx, f);
            let loss = task_loss(&mut g, logits, &labels, TaskMode::SampleWise, None, 1.0).unwrap();
            let value = g.value(loss).item();
            let grads = backward(&g, loss, &ctx).unwrap();
            (value, Some(grads))
        };

        let x0 = model.params.data().to_vec();
        let (_, ad) = loss_and_grads(&x0);
        let ad = ad.unwrap();
        let err = fd_max_rel_err(
            &x0,
            &ad,
            &|params| loss_and_grads(params).0,
            PROBES,
            seed + 7,
        );
        assert!(
            err < RTOL,
            "{}: max relative gradient error {err}",
            arch.as_str()
        );
    }
}
