//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.
//!
//! `ATTNET_ACCEPTANCE=1,3,5` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use attnet_core::attention::{AttentionConfig, AttentionModule, DenseHead, HeadInit};
use attnet_core::data::{
    build_dataset, generate_synthetic, hflip, hist_equalize, histogram_variance, in_split, stratified_split,
    DatasetManifest, Sample, Split, NUM_GRADES,
};
use attnet_core::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use attnet_core::kernels::{gap, one_hot, Padding};
use attnet_core::metrics::{cohens_kappa, ensemble_preactivation, AgreementBand, ConfusionMatrix};
use attnet_core::par::Execution;
use attnet_core::report::evaluate_model;
use attnet_core::train::{
    adam_step, early_stop, evaluate, fit_with, grid_search_weights, AdamConfig, AdamState, Flow, GridConfig,
    PlateauScheduler, TrainConfig,
};
use attnet_core::zoo::{
    backbone_layers, build_model, default_branches, infer_backbone_shapes, resolve_tap, Backbone, BranchSpec,
    BuiltModel, Fusion, ModelSpec,
};
use attnet_core::{Graph, NodeId, ParamId, ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------- criterion 1

/// Scalar probe `sum(out * R)` with a fixed random `R`, so every output
/// coordinate carries a distinct weight.
fn probe(g: &mut Graph, out: NodeId) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let r = g.input(random(&mut ChaCha8Rng::seed_from_u64(99), &shape, -1.0, 1.0));
    let m = g.mul(out, r)?;
    g.sum(m)
}

struct Case {
    name: &'static str,
    store: ParamStore,
    ids: Vec<ParamId>,
    loss: Box<dyn Fn(&ParamStore, &mut Graph) -> Result<NodeId>>,
}

fn params(store: &mut ParamStore, rng: &mut ChaCha8Rng, specs: &[(&str, &[usize], f64, f64)]) -> Vec<ParamId> {
    specs
        .iter()
        .map(|&(name, shape, lo, hi)| store.add(name, random(rng, shape, lo, hi)).unwrap())
        .collect()
}

fn layer_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = Vec::new();
    let mut add = |name: &'static str,
                   specs: &[(&str, &[usize], f64, f64)],
                   rng: &mut ChaCha8Rng,
                   loss: Box<dyn Fn(&ParamStore, &mut Graph) -> Result<NodeId>>| {
        let mut store = ParamStore::new();
        let ids = params(&mut store, rng, specs);
        cases.push(Case { name, store, ids, loss });
    };

    for (name, x, w, stride, pad) in [
        ("conv2d same s1", [2, 5, 6, 3], [3, 3, 3, 4], 1, Padding::Same),
        ("conv2d valid s2", [1, 7, 8, 2], [3, 3, 2, 3], 2, Padding::Valid),
        ("conv2d same s2 k5", [1, 8, 7, 2], [5, 5, 2, 2], 2, Padding::Same),
    ] {
        let cout = w[3];
        add(
            name,
            &[("x", &x, -1.0, 1.0), ("w", &w, -0.5, 0.5), ("b", &[cout], -0.2, 0.2)],
            &mut rng,
            Box::new(move |s, g| {
                let ids: Vec<NodeId> = s.ids().map(|id| g.param(s, id)).collect();
                let y = g.conv2d(ids[0], ids[1], ids[2], stride, pad)?;
                probe(g, y)
            }),
        );
    }
    for (name, k, stride, pad) in [
        ("maxpool valid k3 s2", 3, 2, Padding::Valid),
        ("maxpool same k3 s2", 3, 2, Padding::Same),
        ("maxpool valid k2 s2", 2, 2, Padding::Valid),
    ] {
        add(
            name,
            &[("x", &[2, 7, 7, 3], -1.0, 1.0)],
            &mut rng,
            Box::new(move |s, g| {
                let x = g.param(s, s.id("x").unwrap());
                let y = g.maxpool(x, k, stride, pad)?;
                probe(g, y)
            }),
        );
    }
    add(
        "dense",
        &[("x", &[3, 6], -1.0, 1.0), ("w", &[6, 4], -0.5, 0.5), ("b", &[4], -0.2, 0.2)],
        &mut rng,
        Box::new(|s, g| {
            let ids: Vec<NodeId> = s.ids().map(|id| g.param(s, id)).collect();
            let y = g.dense(ids[0], ids[1], ids[2])?;
            probe(g, y)
        }),
    );
    add(
        "locally connected 1x1",
        &[("x", &[2, 3, 4, 5], -1.0, 1.0), ("w", &[3, 4, 5], -0.5, 0.5), ("b", &[3, 4], -0.2, 0.2)],
        &mut rng,
        Box::new(|s, g| {
            let ids: Vec<NodeId> = s.ids().map(|id| g.param(s, id)).collect();
            let y = g.locally_connected(ids[0], ids[1], ids[2])?;
            probe(g, y)
        }),
    );
    type Unary = fn(&mut Graph, NodeId) -> Result<NodeId>;
    let unary: [(&'static str, Unary, &[usize]); 4] = [
        ("relu", |g, x| g.relu(x), &[2, 4, 4, 3]),
        ("sigmoid", |g, x| g.sigmoid(x), &[3, 5]),
        ("softmax", |g, x| g.softmax(x), &[3, 5]),
        ("gap", |g, x| g.gap(x), &[2, 3, 5, 4]),
    ];
    for (name, op, shape) in unary {
        add(
            name,
            &[("x", shape, -2.0, 2.0)],
            &mut rng,
            Box::new(move |s, g| {
                let x = g.param(s, s.id("x").unwrap());
                let y = op(g, x)?;
                probe(g, y)
            }),
        );
    }
    add(
        "elementwise mul (mask broadcast)",
        &[("v", &[2, 3, 4, 3], -1.0, 1.0), ("m", &[2, 3, 4, 1], 0.05, 0.95)],
        &mut rng,
        Box::new(|s, g| {
            let v = g.param(s, s.id("v").unwrap());
            let m = g.param(s, s.id("m").unwrap());
            let y = g.mul_broadcast(v, m)?;
            probe(g, y)
        }),
    );
    add(
        "concat",
        &[("a", &[2, 3], -1.0, 1.0), ("b", &[2, 4], -1.0, 1.0), ("c", &[2, 1], -1.0, 1.0)],
        &mut rng,
        Box::new(|s, g| {
            let ids: Vec<NodeId> = s.ids().map(|id| g.param(s, id)).collect();
            let y = g.concat(&ids)?;
            probe(g, y)
        }),
    );
    add(
        "softmax + cross-entropy",
        &[("z", &[4, 5], -2.0, 2.0)],
        &mut rng,
        Box::new(|s, g| {
            let z = g.param(s, s.id("z").unwrap());
            let p = g.softmax(z)?;
            g.cross_entropy(p, &one_hot(&[0, 3, 4, 1], 5)?)
        }),
    );
    add(
        "add, mul, row division, clamp, weighted sum",
        &[("a", &[3, 4], -1.0, 1.0), ("b", &[3, 4], -1.0, 1.0), ("s", &[3, 1], 0.5, 2.0)],
        &mut rng,
        Box::new(|s, g| {
            let ids: Vec<NodeId> = s.ids().map(|id| g.param(s, id)).collect();
            let sum = g.add(ids[0], ids[1])?;
            let prod = g.mul(sum, ids[0])?;
            let floored = g.clamp_min(ids[2], 0.1)?;
            let q = g.div_rows(prod, floored)?;
            let l1 = probe(g, q)?;
            let l2 = probe(g, ids[1])?;
            g.weighted_sum(&[l1, l2], &[0.7, 0.3])
        }),
    );
    cases
}

fn attention_case() -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let volume = store.add("volume", random(&mut rng, &[2, 4, 5, 6], -1.0, 1.0)).unwrap();
    let module = AttentionModule::build(&mut store, "att", &[4, 5, 6], &AttentionConfig::default(), 5).unwrap();
    let head = DenseHead::build(&mut store, "head", 6, 5, HeadInit::Glorot, 5).unwrap();
    // move the mask layer off its zero init so the mask varies spatially
    for name in ["att.mask.w", "att.mask.b"] {
        let id = store.id(name).unwrap();
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = random(&mut rng, &shape, -1.0, 1.0);
    }
    let mut ids = vec![volume];
    ids.extend(module.param_ids());
    ids.extend(head.param_ids());
    Case {
        name: "attention module end-to-end",
        store,
        ids,
        loss: Box::new(move |s, g| {
            let v = g.param(s, volume);
            let out = module.forward(s, g, v)?;
            let (_, probs) = head.forward(s, g, out.features)?;
            g.cross_entropy(probs, &one_hot(&[2, 4], 5)?)
        }),
    }
}

fn bottleneck_case() -> Case {
    let spec = ModelSpec {
        backbone: Backbone::Resnet50,
        input: [16, 16],
        width_multiplier: 1.0 / 16.0,
        branches: vec![BranchSpec { name: "att0".into(), tap: "conv3_x".into() }],
        fusion: Fusion::None,
        seed: 1,
        ..ModelSpec::default()
    };
    let model = build_model(&spec).unwrap();
    let store = model.params.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    let x = random(&mut ChaCha8Rng::seed_from_u64(3), &[1, 16, 16, 1], 0.0, 1.0);
    Case {
        name: "residual bottleneck blocks",
        store,
        ids,
        loss: Box::new(move |s, g| {
            let mut m = model.clone();
            m.params = s.clone();
            let out = m.forward(g, x.clone())?;
            // probe the logits: a fresh residual head is confident enough that
            // cross-entropy gradients drop below finite-difference resolution
            let logits = out.branches[0].head.as_ref().unwrap().logits;
            probe(g, logits)
        }),
    }
}

fn criterion_1() -> Check {
    let cfg = GradCheckConfig {
        epsilon: 1e-5,
        max_coords_per_param: 24,
        seed: 11,
    };
    let start = Instant::now();
    let mut cases = layer_cases();
    cases.push(attention_case());
    cases.push(bottleneck_case());
    let mut worst = GradCheckReport::default();
    let mut worst_case = "";
    let (mut checked, mut skipped) = (0, 0);
    for mut case in cases {
        let r = grad_check(&mut case.store, &case.ids, &case.loss, &cfg).map_err(|e| format!("{}: {e}", case.name))?;
        ensure!(r.checked > 0, "{}: no coordinates checked", case.name);
        checked += r.checked;
        skipped += r.skipped;
        if r.max_rel_error >= worst.max_rel_error {
            worst_case = case.name;
            worst = r;
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "max rel err {:.2e} ({worst_case}) over {checked} coords, {skipped} kink coords skipped, {:.1}s",
        worst.max_rel_error,
        elapsed.as_secs_f64()
    );
    ensure!(worst.max_rel_error < 1e-5, "{detail}");
    ensure!(elapsed < Duration::from_secs(120), "{detail}: over the 2 min budget");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 2

fn shapes_at(backbone: Backbone, input: [usize; 2]) -> Vec<(String, Vec<usize>)> {
    let layers = backbone_layers(backbone, 1.0);
    let shapes = infer_backbone_shapes(&layers, &[input[0], input[1], 1]).unwrap();
    layers.into_iter().map(|l| l.name).zip(shapes).collect()
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let clsf: &[(&str, [usize; 3])] = &[
        ("conv1", [100, 150, 32]),
        ("pool1", [49, 74, 32]),
        ("conv2", [49, 74, 64]),
        ("pool2", [24, 36, 64]),
        ("conv3", [24, 36, 96]),
        ("pool3", [11, 17, 96]),
        ("conv4", [11, 17, 128]),
        ("pool4", [5, 8, 128]),
    ];
    let ext: &[(&str, [usize; 3])] = &[
        ("conv1", [100, 150, 32]),
        ("pool1", [49, 74, 32]),
        ("conv2-1", [49, 74, 64]),
        ("conv2-2", [49, 74, 64]),
        ("pool2", [24, 36, 64]),
        ("conv3-1", [24, 36, 96]),
        ("conv3-2", [24, 36, 96]),
        ("pool3", [11, 17, 96]),
        ("conv4-1", [11, 17, 128]),
        ("conv4-2", [11, 17, 128]),
        ("pool4", [5, 8, 128]),
    ];
    let mut cells = 0;
    for (backbone, table) in [(Backbone::AntonyClsf, clsf), (Backbone::AntonyExt, ext)] {
        let got = shapes_at(backbone, [200, 300]);
        ensure!(got.len() == table.len(), "{}: {} layers, table has {}", backbone.id(), got.len(), table.len());
        for ((name, shape), (want_name, want)) in got.iter().zip(table) {
            ensure!(name == want_name, "{}: layer {name} where the table has {want_name}", backbone.id());
            ensure!(shape[..] == want[..], "{} {name}: {shape:?} vs table {want:?}", backbone.id());
            cells += 1;
        }
        // the model builder agrees with the shape pass at the branch taps
        let model = build_model(&ModelSpec {
            backbone,
            input: [200, 300],
            branches: default_branches(backbone, 3),
            fusion: Fusion::None,
            ..ModelSpec::default()
        })
        .map_err(|e| e.to_string())?;
        for (tap, want) in [("pool2", [24, 36, 64]), ("pool3", [11, 17, 96]), ("pool4", [5, 8, 128])] {
            ensure!(model.shape_of(tap) == Some(&want[..]), "{} built tap {tap}", backbone.id());
        }
    }

    let vgg = shapes_at(Backbone::Vgg16, [320, 224]);
    let layers = backbone_layers(Backbone::Vgg16, 1.0);
    for (i, want) in [[40, 28, 256], [20, 14, 512], [10, 7, 512]].iter().enumerate() {
        let tap = Backbone::Vgg16.default_tap(i).unwrap();
        let idx = resolve_tap(&layers, tap).unwrap();
        ensure!(vgg[idx].1[..] == want[..], "vgg16 {tap}: {:?}", vgg[idx].1);
    }

    // Only the self-consistent residual-table cells are asserted.
    let resnet = shapes_at(Backbone::Resnet50, [224, 224]);
    let rlayers = backbone_layers(Backbone::Resnet50, 1.0);
    let at = |tap: &str| resnet[resolve_tap(&rlayers, tap).unwrap()].1.clone();
    ensure!(at("conv2_x") == vec![56, 56, 256], "conv2_x {:?}", at("conv2_x"));
    ensure!(at("conv3_x") == vec![28, 28, 512], "conv3_x {:?}", at("conv3_x"));
    ensure!(at("conv4_x")[..2] == [14, 14], "conv4_x {:?}", at("conv4_x"));
    ensure!(at("conv5_x")[..2] == [7, 7], "conv5_x {:?}", at("conv5_x"));
    let elapsed = start.elapsed();
    let detail = format!(
        "{cells} small-backbone cells, 3 vgg16 taps, 4 residual cells exact; 4 inconsistent residual cells excluded; {:.0} ms",
        elapsed.as_secs_f64() * 1e3
    );
    ensure!(elapsed < Duration::from_secs(1), "{detail}: over the 1 s budget");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (h, w, n) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let b = rng.random_range(1..4);
        let mut store = ParamStore::new();
        let module = AttentionModule::build(&mut store, "att", &[h, w, n], &AttentionConfig::default(), i)
            .map_err(|e| e.to_string())?;
        // zero mask weights and a constant bias give a spatially constant mask
        let bias = store.id("att.mask.b").unwrap();
        *store.value_mut(bias) = Tensor::full(&[h, w], rng.random_range(-6.0..6.0));
        let volume = random(&mut rng, &[b, h, w, n], -3.0, 3.0);
        let mut g = Graph::new();
        let v = g.input(volume.clone());
        let out = module.forward(&store, &mut g, v).map_err(|e| e.to_string())?;
        let expected = gap(&volume).map_err(|e| e.to_string())?;
        worst = worst.max(g.value(out.features).max_abs_diff(&expected));
    }
    ensure!(worst < 1e-10, "max |F - GAP| = {worst:.2e}");
    Ok(format!("100 random volumes, max |F - GAP| = {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 4

fn small_multi_loss_model(seed: u64) -> BuiltModel {
    build_model(&ModelSpec {
        backbone: Backbone::Vgg16,
        input: [32, 32],
        width_multiplier: 0.125,
        branches: default_branches(Backbone::Vgg16, 2),
        fusion: Fusion::MultiLoss,
        loss_weights: vec![1.0, 0.8],
        seed,
        ..ModelSpec::default()
    })
    .unwrap()
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = small_multi_loss_model(4);
    let x = random(&mut rng, &[3, 32, 32, 1], 0.0, 1.0);
    let y = one_hot(&[0, 2, 4], 5).unwrap();
    let loss_at = |m: &BuiltModel, w: &[f64]| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let out = m.forward(&mut g, x.clone()).unwrap();
        let l = m.loss(&mut g, &out, &y, Some(w)).unwrap();
        (g.scalar(l.total), l.per_branch.iter().map(|&n| g.scalar(n)).collect())
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let w = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
        let (total, parts) = loss_at(&model, &w);
        worst = worst.max((total - (w[0] * parts[0] + w[1] * parts[1])).abs());
        for b in 0..2 {
            let t: f64 = rng.random_range(0.0..=1.0);
            let mut ww = w;
            ww[b] = 0.0;
            let l0 = loss_at(&model, &ww).0;
            ww[b] = 1.0;
            let l1 = loss_at(&model, &ww).0;
            ww[b] = t;
            let lt = loss_at(&model, &ww).0;
            worst = worst.max((lt - (l0 + t * (l1 - l0))).abs());
        }
    }
    ensure!(worst < 1e-10, "linearity residual {worst:.2e}");

    let mut zero_grads = 0;
    let mut fd_checked = 0;
    for gated in 0..2 {
        let mut w = [0.9, 0.6];
        w[gated] = 0.0;
        let mut g = Graph::new();
        let out = model.forward(&mut g, x.clone()).unwrap();
        let l = model.loss(&mut g, &out, &y, Some(&w)).unwrap();
        let grads = g.backward(l.total).unwrap();
        let ids = model.branches()[gated].param_ids();
        for &id in &ids {
            if let Some(t) = grads.param(id) {
                ensure!(t.data().iter().all(|&v| v == 0.0), "{} has a nonzero gradient", model.params.name(id));
            }
            zero_grads += 1;
        }
        for &id in &ids {
            let len = model.params.value(id).len();
            for k in [0, len / 2, len - 1] {
                let v = model.params.value(id).data()[k];
                model.params.value_mut(id).data_mut()[k] = v + 1e-5;
                let up = loss_at(&model, &w).0;
                model.params.value_mut(id).data_mut()[k] = v - 1e-5;
                let down = loss_at(&model, &w).0;
                model.params.value_mut(id).data_mut()[k] = v;
                ensure!((up - down) / 2e-5 == 0.0, "{}[{k}] moves the loss", model.params.name(id));
                fd_checked += 1;
            }
        }
    }
    Ok(format!(
        "linearity residual {worst:.2e}; {zero_grads} gated tensors with zero gradient, {fd_checked} finite differences exactly 0"
    ))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Check {
    let kappa = |rows: &[Vec<u64>]| cohens_kappa(&ConfusionMatrix::from_rows(rows).unwrap()).unwrap();
    let k = kappa(&[vec![3, 1], vec![1, 3]]);
    ensure!((k.value - 0.5).abs() < 1e-15 && k.band == AgreementBand::Moderate, "[[3,1],[1,3]] -> {k:?}");
    ensure!(k.band.to_string() == "moderate", "band label {}", k.band);
    for diag in [vec![4, 7], vec![1, 2, 3], vec![5, 0, 9, 2, 1]] {
        let n = diag.len();
        let rows: Vec<Vec<u64>> = (0..n).map(|i| (0..n).map(|j| if i == j { diag[i] } else { 0 }).collect()).collect();
        let k = kappa(&rows);
        ensure!(k.value == 1.0 && k.band == AgreementBand::AlmostPerfect, "diagonal {diag:?} -> {k:?}");
    }
    let k = kappa(&[vec![1, 1], vec![1, 1]]);
    ensure!(k.value == 0.0, "uniform 2x2 -> {k:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, c) = (4, 5);
    let logits: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[b, c], -6.0, 6.0)).collect();
    let fused = ensemble_preactivation(&logits).unwrap();
    let mut worst: f64 = 0.0;
    for row in 0..b {
        let mean: Vec<f64> = (0..c).map(|j| logits.iter().map(|t| t.at(&[row, j])).sum::<f64>() / 3.0).collect();
        let top = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = mean.iter().map(|v| (v - top).exp()).sum();
        for j in 0..c {
            worst = worst.max((fused.at(&[row, j]) - (mean[j] - top).exp() / z).abs());
        }
    }
    ensure!(worst < 1e-12, "ensemble differs from oracle by {worst:.2e}");
    Ok(format!("kappa 0.5 moderate / 1 / 0 as expected; ensemble max diff {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Check {
    // p0 = 0.5, gradients 1, -2, 0.5, lr 1e-3; traced with 50-digit decimals
    let expected = [
        0.49900000000999999990000000099999999,
        0.49936610353472075088205507148927149,
        0.49950279419673821725593330919549345,
    ];
    let cfg = AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut p = Tensor::scalar(0.5);
    let mut state = AdamState::new(&[1]);
    for (step, (g, want)) in [1.0, -2.0, 0.5].iter().zip(expected).enumerate() {
        adam_step(&mut p, &Tensor::scalar(*g), &mut state, &cfg).map_err(|e| e.to_string())?;
        let got = p.data()[0];
        ensure!((got - want).abs() < 1e-12, "adam step {}: {got} vs {want}", step + 1);
    }
    let mut still = Tensor::scalar(0.5);
    let mut s = AdamState::new(&[1]);
    adam_step(&mut still, &Tensor::scalar(0.0), &mut s, &cfg).unwrap();
    ensure!(still.data()[0] == 0.5 && s.t == 1, "zero gradient moved the parameter");

    let trace = |history: &[f64]| {
        let mut sched = PlateauScheduler::new(0.1, 2);
        let mut lr = 1.0;
        history.iter().map(|&l| { lr = sched.observe(l, lr); lr }).collect::<Vec<f64>>()
    };
    ensure!(trace(&[1.0, 0.9, 0.8]) == vec![1.0, 1.0, 1.0], "plateau on improving history");
    let t = trace(&[1.0, 1.1, 1.05]);
    ensure!(t[..2] == [1.0, 1.0] && (t[2] - 0.1).abs() < 1e-15, "plateau after epoch 3: {t:?}");
    ensure!(trace(&[1.0, 1.1, 0.9, 1.0]) == vec![1.0; 4], "improvement at epoch 3 did not reset the counter");
    let t = trace(&[1.0, 1.1, 1.2, 1.3, 1.4]);
    ensure!(t[2] == 0.1 && t[3] == 0.1 && (t[4] - 0.01).abs() < 1e-15, "counter not reset by a reduction: {t:?}");

    let d = early_stop(&[1.0, 0.9, 0.95, 0.92, 0.91], 3).unwrap();
    ensure!(d.stop_epoch == Some(5) && d.best_epoch == 2, "early stop trace {d:?}");
    let d = early_stop(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5], 3).unwrap();
    ensure!(d.stop_epoch.is_none() && d.best_epoch == 6, "monotone history stopped: {d:?}");
    let d = early_stop(&[1.0, 1.0], 1).unwrap();
    ensure!(d.stop_epoch == Some(2) && d.best_epoch == 1, "strictness trace {d:?}");
    Ok("3 adam steps within 1e-12; plateau and early-stop traces exact".into())
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Check {
    let start = Instant::now();
    let size = DatasetManifest::default().image_size;
    let pool = build_dataset(
        &DatasetManifest { seed: 17, counts: vec![12; NUM_GRADES], image_size: size, ..Default::default() },
        Execution::Parallel,
    )
    .map_err(|e| e.to_string())?;
    // 32 training samples balanced over grades (7, 7, 6, 6, 6); the rest only feed validation
    let mut samples = Vec::new();
    for g in 0..NUM_GRADES {
        let take = if g < 2 { 7 } else { 6 };
        for (k, s) in pool.iter().filter(|s| s.label == g).enumerate() {
            let mut s = s.clone();
            s.split = if k < take { Split::Train } else if k < take + 2 { Split::Val } else { continue };
            samples.push(s);
        }
    }
    let train: Vec<Sample> = samples.iter().filter(|s| s.split == Split::Train).cloned().collect();
    ensure!(train.len() == 32, "{} training samples", train.len());
    let train_refs: Vec<&Sample> = train.iter().collect();

    let mut model = build_model(&ModelSpec {
        backbone: Backbone::Vgg16,
        input: size,
        width_multiplier: 0.25,
        branches: default_branches(Backbone::Vgg16, 1),
        fusion: Fusion::MultiLoss,
        loss_weights: vec![1.0],
        seed: 3,
        ..ModelSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 200,
        early_stop_patience: 200,
        plateau_patience: 200,
        hflip: false,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut reached = None;
    let mut losses = Vec::new();
    let mut last_acc = 0.0;
    fit_with(&mut model, &samples, &cfg, |record, m| {
        losses.push(record.train_loss);
        last_acc = evaluate(m, &train_refs, 32, &[1.0], false)?.heads[0].accuracy;
        if last_acc >= 0.95 && reached.is_none() {
            reached = Some(record.epoch);
        }
        // keep going long enough to judge the smoothed loss curve
        Ok(if reached.is_some() && record.epoch >= 30 { Flow::Stop } else { Flow::Continue })
    })
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let smoothed: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    let rises = smoothed.windows(2).filter(|p| p[1] > p[0]).count();
    let detail = match reached {
        Some(e) => format!(
            "train accuracy >= 0.95 at epoch {e} (final {last_acc:.3}); {} epochs, smoothed-loss rises {rises}; {:.0}s",
            losses.len(),
            elapsed.as_secs_f64()
        ),
        None => format!("train accuracy {last_acc:.3} after 200 epochs"),
    };
    ensure!(reached.is_some(), "{detail}");
    ensure!(rises == 0, "{detail}: 10-epoch smoothed training loss increased");
    ensure!(elapsed < Duration::from_secs(600), "{detail}: over the 10 min budget");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 8

const LOCALIZATION_SEEDS: [u64; 3] = [11, 23, 47];

fn criterion_8() -> Check {
    let start = Instant::now();
    let size = DatasetManifest::default().image_size;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for seed in LOCALIZATION_SEEDS {
        let manifest = DatasetManifest { seed, counts: vec![160; NUM_GRADES], image_size: size, ..Default::default() };
        let samples = build_dataset(&manifest, Execution::Parallel).map_err(|e| e.to_string())?;
        let n_train = in_split(&samples, Split::Train).len();
        ensure!(n_train >= 500, "seed {seed}: only {n_train} training samples");
        let mut model = build_model(&ModelSpec {
            backbone: Backbone::Vgg16,
            input: size,
            width_multiplier: 0.125,
            branches: default_branches(Backbone::Vgg16, 2),
            fusion: Fusion::MultiLoss,
            loss_weights: vec![1.0, 0.8],
            seed,
            ..ModelSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let cfg = TrainConfig { lr: 1e-3, batch_size: 16, max_epochs: 15, hflip: false, seed, ..TrainConfig::default() };
        fit_with(&mut model, &samples, &cfg, |_, _| Ok(Flow::Continue)).map_err(|e| e.to_string())?;
        let (report, _) = evaluate_model(&model, &samples, 32).map_err(|e| e.to_string())?;
        let loc = report
            .localization
            .iter()
            .find(|l| l.branch == report.selected)
            .ok_or_else(|| format!("seed {seed}: no localization for {}", report.selected))?;
        parts.push(format!("seed {seed}: {} x{:.2}", loc.branch, loc.ratio));
        if loc.ratio < 2.0 {
            failures.push(seed);
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("{} ({:.0}s)", parts.join(", "), elapsed.as_secs_f64());
    ensure!(failures.is_empty(), "{detail}: below 2x uniform for seeds {failures:?}");
    ensure!(elapsed < Duration::from_secs(45 * 60), "{detail}: over the 45 min budget");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Check {
    let grid = GridConfig::default();
    let cells = grid.cells();
    ensure!(cells.len() == 36, "{} cells", cells.len());
    ensure!(cells.contains(&(1.0, 0.8)), "(1.0, 0.8) missing");
    let samples = build_dataset(
        &DatasetManifest { seed: 9, counts: vec![15; NUM_GRADES], image_size: [32, 32], ..Default::default() },
        Execution::Parallel,
    )
    .map_err(|e| e.to_string())?;
    let spec = small_multi_loss_model(9).spec().clone();
    let train = TrainConfig { lr: 1e-3, batch_size: 16, seed: 9, ..TrainConfig::default() };
    let quick = GridConfig { max_epochs: 1, ..grid };
    let a = grid_search_weights(&spec, &samples, &train, &quick, Execution::Parallel).map_err(|e| e.to_string())?;
    let b = grid_search_weights(&spec, &samples, &train, &quick, Execution::Serial).map_err(|e| e.to_string())?;
    ensure!(a.cells.len() == 36, "search produced {} cells", a.cells.len());
    ensure!(a == b, "repeated search differs");
    let best = a.best_cell();
    Ok(format!("36 cells incl. (1.0, 0.8); repeat identical; best ({}, {})", best.w0, best.w1))
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // at most 256 pixels: past that, distinct input levels can land in one
    // output bin and merging bins always raises the histogram variance
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..17), rng.random_range(1..17));
        let img = random(&mut rng, &[h, w, 1], 0.0, 1.0);
        ensure!(hflip(&hflip(&img)).data() == img.data(), "flip is not an involution at {h}x{w}");
        let eq = hist_equalize(&img);
        ensure!(
            histogram_variance(&eq) <= histogram_variance(&img) + 1e-12,
            "equalization widened the histogram at {h}x{w}"
        );
    }

    let manifest = DatasetManifest { seed: 21, counts: vec![23, 17, 31, 12, 9], image_size: [32, 24], ..Default::default() };
    let raw = generate_synthetic(&manifest, Execution::Parallel).map_err(|e| e.to_string())?;
    let split = stratified_split(raw.clone(), manifest.split_fractions, manifest.seed).map_err(|e| e.to_string())?;
    for (g, &n) in manifest.counts.iter().enumerate() {
        for (k, part) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
            let got = split.iter().filter(|s| s.label == g && s.split == part).count() as f64;
            let target = manifest.split_fractions[k] * n as f64;
            ensure!((got - target).abs() <= 1.0, "grade {g} {part}: {got} vs {target}");
        }
    }

    let serial = generate_synthetic(&manifest, Execution::Serial).map_err(|e| e.to_string())?;
    let again = generate_synthetic(&manifest, Execution::Parallel).map_err(|e| e.to_string())?;
    for ((a, b), c) in raw.iter().zip(&serial).zip(&again) {
        ensure!(a.image.data() == b.image.data() && a.image.data() == c.image.data(), "sample {} differs", a.id);
        ensure!(a.roi == b.roi && a.label == b.label, "sample {} metadata differs", a.id);
    }
    Ok(format!("200 flip/equalization cases up to 16x16, split within +/-1 over {} samples, regeneration bit-identical", raw.len()))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ATTNET_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient fidelity", criterion_1),
        ("shape conformance", criterion_2),
        ("attention normalization identity", criterion_3),
        ("multi-loss linearity and gating", criterion_4),
        ("metric oracles", criterion_5),
        ("optimizer and schedule traces", criterion_6),
        ("overfit smoke test", criterion_7),
        ("localization property", criterion_8),
        ("grid-search harness", criterion_9),
        ("pipeline invariants", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
