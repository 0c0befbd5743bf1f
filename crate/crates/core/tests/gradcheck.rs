//! Central finite differences against the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refdet_core::backbone::{FeaturePyramid, Fpn, StageFeatures};
use refdet_core::geometry::BBox;
use refdet_core::graph::{Graph, RoiSample, Var};
use refdet_core::heads::{roi_losses, ContextMode, RoiBatch, RoiHead, RoiHeadConfig};
use refdet_core::params::ParamStore;
use refdet_core::template::{PseudoTemplateGenerator, PtgConfig};
use refdet_core::Tensor;

const EPS: f32 = 1e-3;
const TOL: f64 = 1e-2;
/// Coordinates probed per tensor; larger tensors are subsampled.
const PROBES: usize = 40;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Relative error `|a - n| / max(|a|, |n|)` (as vector norms) over the probed
/// coordinates of every input and every parameter, with the loss rebuilt by
/// `f` each time.
fn check<F>(name: &str, store: &mut ParamStore, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut g = Graph::inference(store);
        let vs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vs);
        g.value(l).data()[0] as f64
    };
    let (input_grads, param_grads) = {
        let mut g = Graph::new(store);
        let vs: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let l = f(&mut g, &vs);
        let grads = g.backward(l);
        let ig: Vec<Vec<f32>> = vs
            .iter()
            .zip(&inputs)
            .map(|(v, t)| grads.wrt(*v).map_or(vec![0.0; t.numel()], |s| s.to_vec()))
            .collect();
        (ig, grads.params(&g))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut acc = Accumulator::default();
    let mut inputs = inputs;
    for (k, grad) in input_grads.iter().enumerate() {
        let n = inputs[k].numel();
        for _ in 0..PROBES.min(n) {
            let i = rng.random_range(0..n);
            let orig = inputs[k].data()[i];
            let mut at = |x: f32| {
                inputs[k].data_mut()[i] = x;
                let v = eval(store, &inputs);
                inputs[k].data_mut()[i] = orig;
                v
            };
            acc.probe(&mut at, orig, grad[i] as f64);
        }
    }
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let n = store.tensor(id).numel();
        let grad = param_grads.get(id).map(|g| g.to_vec()).unwrap_or(vec![0.0; n]);
        for _ in 0..PROBES.min(n) {
            let i = rng.random_range(0..n);
            let orig = store.tensor(id).data()[i];
            let mut at = |x: f32| {
                store.tensor_mut(id).data_mut()[i] = x;
                let v = eval(store, &inputs);
                store.tensor_mut(id).data_mut()[i] = orig;
                v
            };
            acc.probe(&mut at, orig, grad[i] as f64);
        }
    }
    let rel = acc.diff2.sqrt() / acc.num2.sqrt().max(acc.ana2.sqrt()).max(1e-12);
    assert!(acc.ana2 > 0.0, "{name}: analytic gradient is identically zero");
    assert!(
        acc.skipped * 10 <= acc.probes,
        "{name}: {} of {} probes sit on a non-smooth point",
        acc.skipped,
        acc.probes
    );
    assert!(rel < TOL, "{name}: relative error {rel:.3e}");
}

#[derive(Default)]
struct Accumulator {
    num2: f64,
    ana2: f64,
    diff2: f64,
    probes: usize,
    skipped: usize,
}

impl Accumulator {
    /// Central differences at two step sizes. When they disagree a ReLU kink
    /// lies inside the stencil and the probe says nothing about the backward
    /// pass, so it is skipped.
    fn probe(&mut self, at: &mut dyn FnMut(f32) -> f64, x: f32, analytic: f64) {
        let fd = |at: &mut dyn FnMut(f32) -> f64, h: f32| (at(x + h) - at(x - h)) / (2.0 * h as f64);
        let wide = fd(at, EPS);
        let narrow = fd(at, EPS / 2.0);
        self.probes += 1;
        if (wide - narrow).abs() > 0.05 * wide.abs().max(narrow.abs()) + 1e-3 {
            self.skipped += 1;
            return;
        }
        self.num2 += wide * wide;
        self.ana2 += analytic * analytic;
        self.diff2 += (wide - analytic) * (wide - analytic);
    }
}

/// Random linear read-out so vector outputs become a scalar loss.
fn readout(g: &mut Graph<'_>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(x).numel();
    let w = random(&mut rng, &[1, n], 1.0);
    let wv = g.input(w);
    let flat = g.reshape(x, &[1, n]).unwrap();
    let y = g.linear(flat, wv, None).unwrap();
    g.reshape(y, &[1]).unwrap()
}

#[test]
fn fpn_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let fpn = Fpn::new(&mut store, [3, 4, 4, 5], 4, &mut rng);
    let inputs = vec![
        random(&mut rng, &[3, 8, 7], 1.0),
        random(&mut rng, &[4, 4, 4], 1.0),
        random(&mut rng, &[4, 2, 2], 1.0),
        random(&mut rng, &[5, 1, 1], 1.0),
    ];
    check("fpn", &mut store, inputs, |g, v| {
        let p = fpn.build_fpn(g, &StageFeatures([v[0], v[1], v[2], v[3]])).unwrap();
        let mut terms = Vec::new();
        for (i, &lvl) in p.0.iter().enumerate() {
            terms.push((readout(g, lvl, 10 + i as u64), 1.0));
        }
        g.weighted_sum(&terms).unwrap()
    });
}

#[test]
fn roi_align_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let inputs = vec![random(&mut rng, &[2, 5, 5], 1.0)];
    let rois = [
        RoiSample {
            level: 0,
            x1: 0.3,
            y1: 0.7,
            x2: 3.1,
            y2: 3.9,
        },
        RoiSample {
            level: 0,
            x1: -0.6,
            y1: 1.2,
            x2: 2.2,
            y2: 4.6,
        },
        RoiSample {
            level: 0,
            x1: 2.0,
            y1: 2.0,
            x2: 2.4,
            y2: 2.3,
        },
    ];
    check("roi_align", &mut store, inputs, |g, v| {
        let y = g.roi_align(&[v[0]], &rois, 3, 2).unwrap();
        readout(g, y, 5)
    });
}

#[test]
fn ptg_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let cfg = PtgConfig {
        hidden: 3,
        ..PtgConfig::default()
    };
    let ptg = PseudoTemplateGenerator::new(&mut store, [2, 2, 3, 3], &cfg, &mut rng);
    // Zero-initialised biases leave pre-activations exactly on the ReLU kink,
    // where finite differences are meaningless.
    randomize_params(&mut store, &mut rng);
    let inputs = vec![
        random(&mut rng, &[2, 7, 6], 1.0),
        random(&mut rng, &[2, 4, 3], 1.0),
        random(&mut rng, &[3, 2, 2], 1.0),
        random(&mut rng, &[3, 1, 1], 1.0),
    ];
    check("ptg", &mut store, inputs, |g, v| {
        let s = StageFeatures([v[0], v[1], v[2], v[3]]);
        let rec = ptg.ptg_loss(g, &s).unwrap();
        let out = ptg.ptg_forward(g, &s).unwrap();
        let r = readout(g, out.0[0], 7);
        g.weighted_sum(&[(rec, 1.0), (r, 0.1)]).unwrap()
    });
}

#[test]
fn smooth_l1_gradients() {
    let mut store = ParamStore::new();
    // keep every residual away from the kink at |d| = beta
    let pred = Tensor::from_vec(&[6], vec![0.3, -0.4, 2.5, -1.9, 0.05, 3.0]).unwrap();
    let targets = [(0, 0.0), (1, 0.2), (2, 0.0), (3, 0.5), (5, -0.1)];
    check("smooth_l1", &mut store, vec![pred], |g, v| {
        g.smooth_l1(v[0], &targets, 1.0, 4.0)
    });
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let logits = random(&mut rng, &[5, 4], 2.0);
    check("softmax_ce", &mut store, vec![logits], |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 3, 1, 1, 2]).unwrap()
    });
    let logits = random(&mut rng, &[7], 3.0);
    check("bce", &mut store, vec![logits], |g, v| {
        g.bce_with_logits(v[0], &[(0, 1.0), (2, 0.0), (3, 1.0), (6, 0.0)], 4.0)
    });
}

#[test]
fn roi_head_loss_gradients() {
    for ctx in [ContextMode::Off, ContextMode::Concat] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = RoiHeadConfig {
            pooled: 2,
            fc_dim: 6,
            canonical_scale: 4.0,
            context: ctx,
            ..RoiHeadConfig::default()
        };
        let head = RoiHead::new(&mut store, 2, 2, &cfg, &mut rng);
        let inputs = vec![
            random(&mut rng, &[2, 8, 8], 1.0),
            random(&mut rng, &[2, 4, 4], 1.0),
            random(&mut rng, &[2, 2, 2], 1.0),
            random(&mut rng, &[2, 1, 1], 1.0),
        ];
        let boxes = [
            BBox::new(2.0, 3.0, 14.0, 17.0),
            BBox::new(10.0, 1.0, 30.0, 9.0),
            BBox::new(0.0, 0.0, 30.0, 31.0),
        ];
        let batch = RoiBatch {
            indices: vec![0, 1, 2],
            labels: vec![2, 0, 1],
            positive: vec![true, false, true],
            targets: vec![Some([0.3, -0.2, 0.1, 0.4]), None, Some([-0.5, 0.2, 0.6, -0.1])],
        };
        check("roi_head", &mut store, inputs, |g, v| {
            let p = FeaturePyramid([v[0], v[1], v[2], v[3]]);
            let out = head.forward_boxes(g, &p, &boxes, 32.0, 32.0).unwrap();
            let (c, r) = roi_losses(g, &out, &batch, 2, 1.0).unwrap();
            g.weighted_sum(&[(c, 1.0), (r, 1.0)]).unwrap()
        });
    }
}

#[test]
fn class_specific_regression_ignores_other_classes() {
    let mut store = ParamStore::new();
    let mut g = Graph::new(&store);
    let deltas = g.input_with_grad(Tensor::full(&[2, 8], 0.7));
    let logits = g.input(Tensor::zeros(&[2, 3]));
    let out = refdet_core::heads::RoiHeadOutput {
        cls_logits: logits,
        deltas,
        region_embedding: None,
    };
    let batch = RoiBatch {
        indices: vec![0, 1],
        labels: vec![2, 0],
        positive: vec![true, false],
        targets: vec![Some([0.0; 4]), None],
    };
    let (_, reg) = roi_losses(&mut g, &out, &batch, 2, 1.0).unwrap();
    let grads = g.backward(reg);
    let gd = grads.wrt(deltas).unwrap();
    for (i, &v) in gd.iter().enumerate() {
        let target_class_slot = (4..8).contains(&i);
        assert_eq!(v != 0.0, target_class_slot, "index {i}");
    }
    let _ = &mut store;
}

#[test]
fn strided_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    for (h, w, stride) in [(7usize, 6usize, 2usize), (4, 3, 2), (5, 5, 1), (1, 1, 2)] {
        let x = random(&mut rng, &[2, h, w], 1.0);
        let wt = random(&mut rng, &[3, 2, 3, 3], 1.0);
        let b = random(&mut rng, &[3], 1.0);
        check("conv2d", &mut store, vec![x, wt, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap();
            readout(g, y, 8)
        });
        let x = random(&mut rng, &[3, h, w], 1.0);
        let wt = random(&mut rng, &[3, 2, 3, 3], 1.0);
        let b = random(&mut rng, &[2], 1.0);
        for op in 0..stride {
            check(
                "conv_transpose2d",
                &mut store,
                vec![x.clone(), wt.clone(), b.clone()],
                |g, v| {
                    let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, 1, (op, op)).unwrap();
                    readout(g, y, 9)
                },
            );
        }
    }
}

fn randomize_params(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}
