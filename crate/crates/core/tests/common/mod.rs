//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sst_core::nn::{backward, LayerConfig, LossKind, Network};
use sst_core::Tensor;

pub type Q = Ratio<u64>;

pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-8;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random values whose pairwise gaps and distance from zero exceed `gap`,
/// so max pooling and ReLU stay differentiable under a finite step.
pub fn separated_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..len).map(|i| (i as f64 - len as f64 / 2.0 + 0.5) * gap * 4.0).collect();
    for i in (1..len).rev() {
        levels.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), levels).unwrap()
}

fn loss_at(net: &Network, loss: LossKind, input: &Tensor, target: &Tensor) -> f64 {
    let out = net.forward(input).unwrap();
    loss.value(out.data(), target.data())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Largest relative error between backpropagated and central-difference
/// gradients, over every parameter and every input element.
pub fn gradient_check(net: &Network, loss: LossKind, input: &Tensor, target: &Tensor) -> f64 {
    let grads = backward(net, loss, input, target).unwrap();
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for li in 0..net.layers().len() {
        let Some(g) = &grads.layers[li] else { continue };
        for (which, analytic) in [(0, &g.weights), (1, &g.biases)] {
            for j in 0..analytic.len() {
                let nudge = |p: &mut Network, delta: f64| {
                    let (w, b) = p.layers_mut()[li].params_mut().unwrap();
                    let t = if which == 0 { w } else { b };
                    t.data_mut()[j] += delta;
                };
                nudge(&mut probe, FD_STEP);
                let up = loss_at(&probe, loss, input, target);
                nudge(&mut probe, -2.0 * FD_STEP);
                let down = loss_at(&probe, loss, input, target);
                nudge(&mut probe, FD_STEP);
                let numeric = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic.data()[j], numeric));
            }
        }
    }
    let dinput = grads.input.as_ref().unwrap();
    let mut x = input.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + FD_STEP;
        let up = loss_at(net, loss, &x, target);
        x.data_mut()[j] = orig - FD_STEP;
        let down = loss_at(net, loss, &x, target);
        x.data_mut()[j] = orig;
        worst = worst.max(rel_err(dinput.data()[j], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// One gradient-check case per layer kind.
pub struct GradientCase {
    pub name: &'static str,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerConfig>,
    pub loss: LossKind,
    /// Input values kept apart so kinks are never crossed.
    pub separated: bool,
}

pub fn gradient_cases() -> Vec<GradientCase> {
    use sst_core::nn::Padding;
    let conv = |padding| LayerConfig::Convolution { filters: 3, height: 3, width: 3, padding };
    vec![
        GradientCase {
            name: "convolution_valid",
            input_shape: vec![6, 5, 2],
            layers: vec![conv(Padding::Valid)],
            loss: LossKind::MeanSquaredError,
            separated: false,
        },
        GradientCase {
            name: "convolution_same",
            input_shape: vec![5, 6, 2],
            layers: vec![conv(Padding::Same)],
            loss: LossKind::MeanSquaredError,
            separated: false,
        },
        GradientCase {
            name: "max_pool",
            input_shape: vec![6, 7, 2],
            layers: vec![LayerConfig::MaxPool { height: 2, width: 2 }],
            loss: LossKind::MeanSquaredError,
            separated: true,
        },
        GradientCase {
            name: "relu",
            input_shape: vec![4, 4, 3],
            layers: vec![LayerConfig::Relu],
            loss: LossKind::MeanSquaredError,
            separated: true,
        },
        GradientCase {
            name: "flatten_dense",
            input_shape: vec![3, 3, 2],
            layers: vec![LayerConfig::Flatten, LayerConfig::Dense { units: 4 }],
            loss: LossKind::MeanSquaredError,
            separated: false,
        },
        GradientCase {
            name: "sigmoid",
            input_shape: vec![3, 4, 2],
            layers: vec![LayerConfig::Sigmoid],
            loss: LossKind::MeanSquaredError,
            separated: false,
        },
        GradientCase {
            name: "stack_log_loss",
            input_shape: vec![7, 7, 3],
            layers: vec![
                conv(Padding::Valid),
                LayerConfig::Sigmoid,
                conv(Padding::Same),
                LayerConfig::Flatten,
                LayerConfig::Dense { units: 2 },
                LayerConfig::Sigmoid,
            ],
            loss: LossKind::BinaryLogLoss,
            separated: false,
        },
    ]
}

/// Worst relative error of `case` for one seed.
pub fn run_gradient_case(case: &GradientCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::initialize(&case.input_shape, &case.layers, seed).unwrap();
    let input = if case.separated {
        separated_tensor(&mut rng, &case.input_shape, 0.01)
    } else {
        random_tensor(&mut rng, &case.input_shape, -1.0, 1.0)
    };
    let target = match case.loss {
        LossKind::BinaryLogLoss => Tensor::from_fn(net.output_shape(), |_| rng.random_range(0..2) as f64),
        LossKind::MeanSquaredError => random_tensor(&mut rng, net.output_shape(), -1.0, 1.0),
    };
    gradient_check(&net, case.loss, &input, &target)
}

/// Exact rational metrics from a per-pixel recount.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMetrics {
    pub counts: [u64; 4],
    pub acc: Option<Q>,
    pub pre: Option<Q>,
    pub rec: Option<Q>,
    pub fpr: Option<Q>,
    pub fnr: Option<Q>,
    pub f1: Option<Q>,
}

fn q(n: u64, d: u64) -> Option<Q> {
    (d != 0).then(|| Q::new(n, d))
}

/// `[tp, tn, fp, fn]` by walking the pixels.
pub fn recount(pred: &[bool], truth: &[bool]) -> ExactMetrics {
    let mut c = [0u64; 4];
    for (&p, &t) in pred.iter().zip(truth) {
        let slot = match (p, t) {
            (true, true) => 0,
            (false, false) => 1,
            (true, false) => 2,
            (false, true) => 3,
        };
        c[slot] += 1;
    }
    let [tp, tn, fp, fneg] = c;
    let pre = q(tp, tp + fp);
    let rec = q(tp, tp + fneg);
    // harmonic mean, or zero when precision and recall are both defined and zero
    let f1 = match (pre, rec) {
        (Some(p), Some(r)) if p + r != Q::from(0) => Some(Q::from(2) * p * r / (p + r)),
        (Some(_), Some(_)) => Some(Q::from(0)),
        _ if tp + fp + fneg > 0 => Some(Q::new(2 * tp, 2 * tp + fp + fneg)),
        _ => None,
    };
    ExactMetrics {
        counts: c,
        acc: q(tp + tn, pred.len() as u64),
        pre,
        rec,
        fpr: q(fp, fp + tn),
        fnr: q(fneg, tp + fneg),
        f1,
    }
}

/// The correctly rounded `f64` of an exact ratio.
pub fn nearest(x: Q) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

/// 11-point AP terms by an explicit threshold sweep: every distinct score is
/// tried as "score ≥ threshold ⇒ street", precision and recall are exact
/// ratios, and each grid recall keeps the best precision among admissible
/// recalls. `full_recall_term` lets recall exactly one count at `r = 1`;
/// `inclusive` uses `≥` at every grid point.
pub fn ap_oracle_terms(scores: &[(f64, bool)], full_recall_term: bool, inclusive: bool) -> Option<Vec<Option<Q>>> {
    let positives = scores.iter().filter(|s| s.1).count() as u64;
    if positives == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let curve: Vec<(Q, Q)> = thresholds
        .iter()
        .map(|&th| {
            let tp = scores.iter().filter(|s| s.0 >= th && s.1).count() as u64;
            let predicted = scores.iter().filter(|s| s.0 >= th).count() as u64;
            (Q::new(tp, positives), Q::new(tp, predicted))
        })
        .collect();
    let terms = (0..=10u64)
        .map(|k| {
            let r = Q::new(k, 10);
            curve
                .iter()
                .filter(|(rec, _)| {
                    if inclusive {
                        *rec >= r
                    } else if k == 10 && full_recall_term {
                        *rec == Q::from(1)
                    } else {
                        *rec > r
                    }
                })
                .map(|&(_, pre)| pre)
                .max()
        })
        .collect();
    Some(terms)
}

pub fn ap_oracle(scores: &[(f64, bool)], full_recall_term: bool, inclusive: bool) -> Option<Q> {
    ap_oracle_terms(scores, full_recall_term, inclusive)
        .map(|t| t.into_iter().map(|x| x.unwrap_or(Q::from(0))).sum::<Q>() / Q::from(11))
}

/// Every multiset of at most `max_len` items over `levels` score levels and
/// both truth values. Averages depend only on the multiset, so this covers
/// every tie pattern of every list up to `max_len` when `levels ≥ max_len`.
pub fn score_multisets(levels: usize, max_len: usize) -> Vec<Vec<(f64, bool)>> {
    let kinds: Vec<(f64, bool)> = (0..levels)
        .flat_map(|l| {
            let s = l as f64 / (levels - 1).max(1) as f64;
            [(s, false), (s, true)]
        })
        .collect();
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn rec(kinds: &[(f64, bool)], from: usize, left: usize, cur: &mut Vec<(f64, bool)>, out: &mut Vec<Vec<(f64, bool)>>) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        if left == 0 {
            return;
        }
        for k in from..kinds.len() {
            cur.push(kinds[k]);
            rec(kinds, k, left - 1, cur, out);
            cur.pop();
        }
    }
    rec(&kinds, 0, max_len, &mut current, &mut out);
    // relabelling levels preserves the ranking, so only lists using levels 0..m are distinct
    out.retain(|list| {
        let mut used: Vec<u64> = list.iter().map(|s| s.0.to_bits()).collect();
        used.dedup();
        let top = list.last().unwrap().0;
        used.len() == (top * (levels - 1).max(1) as f64).round() as usize + 1
    });
    out
}

/// All binary masks with `len` pixels.
pub fn all_masks(len: usize) -> Vec<Vec<bool>> {
    (0..1u32 << len).map(|bits| (0..len).map(|i| bits >> i & 1 == 1).collect()).collect()
}

pub fn mask_tensor(bits: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w], bits.iter().map(|&b| b as u8 as f64).collect()).unwrap()
}

/// Owner of every pixel under nearest-center Euclidean distance with
/// lexicographic tie-break, by scanning all centers.
pub fn brute_force_owners(h: usize, w: usize, centers: &[(usize, usize)]) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let best = (0..centers.len())
                .min_by_key(|&i| {
                    let (r, c) = centers[i];
                    let (dy, dx) = (r.abs_diff(y), c.abs_diff(x));
                    (dy * dy + dx * dx, r, c)
                })
                .unwrap();
            out.push(best);
        }
    }
    out
}

/// A small random descriptor with initialized weights and a made-up log.
pub fn random_model(seed: u64) -> sst_core::models::ModelDescriptor {
    use sst_core::models::{EpochLog, Hyperparameters, ModelDescriptor};
    use sst_core::nn::Padding;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * rng.random_range(2..6) + 1;
    let fully = rng.random_bool(0.5);
    let mut layers = Vec::new();
    let mut side = n;
    for _ in 0..rng.random_range(1..3) {
        let k = rng.random_range(1..4);
        let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        layers.push(LayerConfig::Convolution { filters: rng.random_range(1..5), height: k, width: k, padding });
        if padding == Padding::Valid {
            side -= k - 1;
        }
        if rng.random_bool(0.7) {
            layers.push(LayerConfig::Relu);
        }
    }
    if side >= 4 && rng.random_bool(0.5) {
        layers.push(LayerConfig::MaxPool { height: 2, width: 2 });
    }
    layers.push(LayerConfig::Flatten);
    if rng.random_bool(0.5) {
        layers.push(LayerConfig::Dense { units: rng.random_range(2..8) });
        layers.push(LayerConfig::Relu);
    }
    layers.push(LayerConfig::Dense { units: if fully { n * n } else { 1 } });
    layers.push(LayerConfig::Sigmoid);
    let mut d = ModelDescriptor {
        name: format!("random-{seed}"),
        patch_size: n,
        channels: 3,
        fully,
        layers,
        loss: if fully { LossKind::MeanSquaredError } else { LossKind::BinaryLogLoss },
        hyper: Hyperparameters {
            learning_rate: rng.random_range(0.001..1.0),
            batch_size: rng.random_range(1..100),
            epochs: rng.random_range(0..50),
            seed: rng.random(),
            validation_fraction: 0.1,
        },
        training_log: (1..rng.random_range(1..6))
            .map(|epoch| EpochLog {
                epoch,
                train_loss: rng.random(),
                validation_loss: rng.random_bool(0.5).then(|| rng.random()),
            })
            .collect(),
        network: None,
    };
    d.initialize().unwrap();
    d
}

/// Saves `model` to `dir` and returns the descriptor text and weight bytes.
pub fn saved_bytes(model: &sst_core::models::ModelDescriptor, dir: &std::path::Path, stem: &str) -> (Vec<u8>, Vec<u8>) {
    let path = dir.join(format!("{stem}.toml"));
    model.save(&path).unwrap();
    (std::fs::read(&path).unwrap(), std::fs::read(path.with_extension("sstw")).unwrap())
}
