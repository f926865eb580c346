#![allow(dead_code)]

use prtr::cascade::grid::{cxcywh_to_edges, sample_box, crop_to_tokens};
use prtr::loss::{set_loss, LossWeights};
use prtr::matcher::{hungarian_solve, cost_train, Target};
use prtr::nn::{Ctx, GridConvention, HeadKind, ParamStore, PredictionHeads};
use prtr::tensor::gradcheck::{check_gradients, GradCheckConfig};
use prtr::tensor::{Conv2dSpec, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: usize = 20;

/// Worst relative error over all configurations of one primitive.
#[derive(Debug, Clone)]
pub struct PrimitiveResult {
    pub name: &'static str,
    pub configs: usize,
    pub passed: usize,
    pub worst: f64,
}

type R<T> = Result<T, TensorError>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, either sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..2.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
    .unwrap()
}

fn shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..5)).collect()
}

/// Scalar probe `Σ w ⊙ t` with fixed random weights, so every output entry matters.
fn probe(t: &Tensor, seed: u64) -> R<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, t.shape(), -1.0, 1.0);
    t.mul(&w)?.sum()
}

fn run(name: &'static str, results: &mut Vec<PrimitiveResult>, case: impl Fn(&mut ChaCha8Rng, u64) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> R<Tensor>>)) {
    let mut r = PrimitiveResult {
        name,
        configs: CONFIGS,
        passed: 0,
        worst: 0.0,
    };
    for i in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let (inputs, f) = case(&mut rng, i as u64);
        let check = vec![true; inputs.len()];
        let rep = check_gradients(&inputs, &check, |x| f(x), GradCheckConfig::default()).unwrap();
        r.worst = r.worst.max(rep.max_rel_err);
        if rep.passed {
            r.passed += 1;
        }
    }
    results.push(r);
}

macro_rules! unary {
    ($results:expr, $name:literal, $gen:expr, $op:expr) => {
        run($name, $results, |rng, s| {
            let rank = rng.gen_range(1..4);
            let sh = shape(rng, rank);
            let x = $gen(rng, &sh);
            (vec![x], Box::new(move |t: &[Tensor]| probe(&$op(&t[0])?, s)))
        })
    };
}

macro_rules! binary {
    ($results:expr, $name:literal, $gen_a:expr, $gen_b:expr, $op:expr) => {
        run($name, $results, |rng, s| {
            let rank = rng.gen_range(1..4);
            let sh = shape(rng, rank);
            // every other configuration broadcasts a trailing suffix
            let bsh = if s % 2 == 1 { sh[sh.len() - 1..].to_vec() } else { sh.clone() };
            let a = $gen_a(rng, &sh);
            let b = $gen_b(rng, &bsh);
            (vec![a, b], Box::new(move |t: &[Tensor]| probe(&$op(&t[0], &t[1])?, s)))
        })
    };
}

fn uniform(rng: &mut ChaCha8Rng, sh: &[usize]) -> Tensor {
    rand_tensor(rng, sh, -2.0, 2.0)
}

fn positive(rng: &mut ChaCha8Rng, sh: &[usize]) -> Tensor {
    rand_tensor(rng, sh, 0.2, 3.0)
}

/// Pairs whose entries differ by at least 0.1, keeping max/min away from ties.
fn offset(rng: &mut ChaCha8Rng, sh: &[usize]) -> Tensor {
    away_from_zero(rng, sh)
}

pub fn gradient_catalog() -> Vec<PrimitiveResult> {
    let mut res = Vec::new();
    let results = &mut res;
    binary!(results, "add", uniform, uniform, |a: &Tensor, b: &Tensor| a.add(b));
    binary!(results, "sub", uniform, uniform, |a: &Tensor, b: &Tensor| a.sub(b));
    binary!(results, "mul", uniform, uniform, |a: &Tensor, b: &Tensor| a.mul(b));
    binary!(results, "div", uniform, away_from_zero, |a: &Tensor, b: &Tensor| a.div(b));
    binary!(results, "maximum", offset, offset, |a: &Tensor, b: &Tensor| a.add(b)?.maximum(b));
    binary!(results, "minimum", offset, offset, |a: &Tensor, b: &Tensor| a.add(b)?.minimum(b));
    unary!(results, "scale", uniform, |x: &Tensor| x.scale(-1.7));
    unary!(results, "add_scalar", uniform, |x: &Tensor| x.add_scalar(0.3));
    unary!(results, "neg", uniform, |x: &Tensor| x.neg());
    unary!(results, "relu", away_from_zero, |x: &Tensor| x.relu());
    unary!(results, "sigmoid", uniform, |x: &Tensor| x.sigmoid());
    unary!(results, "exp", uniform, |x: &Tensor| x.exp());
    unary!(results, "ln", positive, |x: &Tensor| x.ln());
    unary!(results, "abs", away_from_zero, |x: &Tensor| x.abs());
    unary!(results, "clamp", uniform, |x: &Tensor| x.clamp(-0.95, 1.05));
    unary!(results, "sum", uniform, |x: &Tensor| x.sum()?.scale(1.3));
    unary!(results, "mean", uniform, |x: &Tensor| x.mean()?.scale(1.3));
    unary!(results, "transpose", uniform, |x: &Tensor| {
        let n = x.numel();
        x.reshape(&[1, n])?.transpose()
    });
    unary!(results, "reshape", uniform, |x: &Tensor| x.reshape(&[x.numel()]));
    run("sum_axis", results, |rng, s| {
        let sh = shape(rng, 3);
        let axis = (s % 3) as usize;
        (vec![uniform(rng, &sh)], Box::new(move |t: &[Tensor]| probe(&t[0].sum_axis(axis)?, s)))
    });
    run("mean_axis", results, |rng, s| {
        let sh = shape(rng, 3);
        let axis = (s % 3) as usize;
        (vec![uniform(rng, &sh)], Box::new(move |t: &[Tensor]| probe(&t[0].mean_axis(axis)?, s)))
    });
    run("softmax", results, |rng, s| {
        let sh = shape(rng, 2);
        let axis = (s % 2) as usize;
        (vec![uniform(rng, &sh)], Box::new(move |t: &[Tensor]| probe(&t[0].softmax(axis)?, s)))
    });
    run("log_softmax", results, |rng, s| {
        let sh = shape(rng, 2);
        let axis = (s % 2) as usize;
        (vec![uniform(rng, &sh)], Box::new(move |t: &[Tensor]| probe(&t[0].log_softmax(axis)?, s)))
    });
    run("matmul", results, |rng, s| {
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let a = uniform(rng, &[m, k]);
        let b = uniform(rng, &[k, n]);
        (vec![a, b], Box::new(move |t: &[Tensor]| probe(&t[0].matmul(&t[1])?, s)))
    });
    run("layer_norm", results, |rng, s| {
        let (r, d) = (rng.gen_range(1..4), rng.gen_range(2..6));
        let x = uniform(rng, &[r, d]);
        let g = uniform(rng, &[d]);
        let b = uniform(rng, &[d]);
        (vec![x, g, b], Box::new(move |t: &[Tensor]| probe(&t[0].layer_norm(&t[1], &t[2])?, s)))
    });
    run("conv2d", results, |rng, s| {
        let (c, o, k) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(k..k + 4), rng.gen_range(k..k + 4));
        let spec = Conv2dSpec {
            stride: rng.gen_range(1..3),
            padding: rng.gen_range(0..2),
        };
        let x = uniform(rng, &[c, h, w]);
        let wt = uniform(rng, &[o, c, k, k]);
        let b = uniform(rng, &[o]);
        (vec![x, wt, b], Box::new(move |t: &[Tensor]| probe(&t[0].conv2d(&t[1], &t[2], spec)?, s)))
    });
    run("bilinear_sample", results, |rng, s| {
        let (c, h, w) = (rng.gen_range(1..3), rng.gen_range(2..6), rng.gen_range(2..6));
        let n = rng.gen_range(1..5);
        let u = uniform(rng, &[c, h, w]);
        // keep samples off the lattice lines where the kernel has kinks
        let coord = |rng: &mut ChaCha8Rng, hi: usize| {
            let cell = rng.gen_range(-1..hi as i64) as f64;
            cell + rng.gen_range(0.1..0.9)
        };
        let xs = Tensor::new(&[n], (0..n).map(|_| coord(rng, w)).collect()).unwrap();
        let ys = Tensor::new(&[n], (0..n).map(|_| coord(rng, h)).collect()).unwrap();
        (vec![u, xs, ys], Box::new(move |t: &[Tensor]| probe(&t[0].bilinear_sample(&t[1], &t[2])?, s)))
    });
    run("concat", results, |rng, s| {
        let axis = (s % 2) as usize;
        let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (ra, ca) = if axis == 0 { (rng.gen_range(1..4), c) } else { (r, rng.gen_range(1..4)) };
        let a = uniform(rng, &[r, c]);
        let b = uniform(rng, &[ra, ca]);
        (vec![a, b], Box::new(move |t: &[Tensor]| probe(&Tensor::concat(&[t[0].clone(), t[1].clone()], axis)?, s)))
    });
    run("slice", results, |rng, s| {
        let sh = shape(rng, 2);
        let axis = (s % 2) as usize;
        let len = sh[axis];
        let start = rng.gen_range(0..len);
        let end = rng.gen_range(start + 1..=len);
        (vec![uniform(rng, &sh)], Box::new(move |t: &[Tensor]| probe(&t[0].slice(axis, start, end)?, s)))
    });
    run("gather", results, |rng, s| {
        let sh = shape(rng, 2);
        let idx: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..sh[0])).collect();
        (vec![uniform(rng, &sh)], Box::new(move |t: &[Tensor]| probe(&t[0].gather(&idx)?, s)))
    });
    run("composite: loss -> keypoint head -> grid_sample -> make_grid -> box", results, composite_case);
    res
}

/// Set loss of a keypoint head reading a bilinear crop whose box comes from
/// `(cx, cy, w, h)` parameters. Inputs: box parameters and the feature map.
fn composite_case(rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> R<Tensor>>) {
    let d = 8;
    let (hf, wf) = (rng.gen_range(6..10), rng.gen_range(6..10));
    let joints = 2;
    let kind = HeadKind::Keypoint { joints };
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(seed + 77);
    let heads = PredictionHeads::new(&mut store, "kp", d, kind, &mut prng);
    let u = uniform(rng, &[d, hf, wf]);
    let b = Tensor::vector(&[rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)]);
    let targets: Vec<Target> = (0..joints)
        .map(|j| Target {
            class: j,
            coords: vec![rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
        })
        .collect();
    let forward = move |box_params: &Tensor, map: &Tensor, store: &ParamStore| -> R<prtr::nn::HeadOutput> {
        let ctx = Ctx::inference(store);
        let edges = cxcywh_to_edges(box_params)?;
        let crop = sample_box(map, &edges, 2, 2, GridConvention::HalfOpen)?;
        heads.forward(&ctx, &crop_to_tokens(&crop)?)
    };
    // the matching is fixed at the evaluation point; it is piecewise constant
    let base = forward(&b, &u, &store).unwrap();
    let probs: Vec<Vec<f64>> = base
        .logits
        .data()
        .chunks(joints + 1)
        .map(|l| prtr::matcher::class_probabilities(l, false))
        .collect();
    let coords: Vec<Vec<f64>> = base.coords.data().chunks(2).map(<[f64]>::to_vec).collect();
    let matching = hungarian_solve(&cost_train(&targets, &probs, &coords).unwrap()).unwrap();
    let f = move |t: &[Tensor]| -> R<Tensor> {
        let out = forward(&t[0], &t[1], &store)?;
        Ok(set_loss(&targets, &out, &matching, kind, &LossWeights::keypoint())?.0)
    };
    (vec![b, u], Box::new(f))
}

use prtr::eval::{CocoMetrics, EvalImage, OksParams, Raster};
use prtr::geometry::{BoundingBox, Keypoint, PoseInstance};
use serde_json::Value;

fn pose(kps: &[Value], bbox: BoundingBox, score: f64, w: f64, h: f64, gt: bool) -> PoseInstance {
    let f = |v: &Value| v.as_f64().unwrap();
    PoseInstance {
        bbox,
        keypoints: kps
            .chunks(3)
            .enumerate()
            .map(|(j, c)| Keypoint {
                x: f(&c[0]) / w,
                y: f(&c[1]) / h,
                label: j,
                visible: !gt || f(&c[2]) > 0.0,
                score: 1.0,
            })
            .collect(),
        score,
    }
}

/// Randomized detections with their pycocotools keypoint scores, from
/// `fixtures/coco_oracle.json` (regenerated by `fixtures/coco_oracle.py`).
pub fn coco_oracle() -> (Vec<EvalImage>, OksParams, CocoMetrics) {
    let v: Value = serde_json::from_str(include_str!("../fixtures/coco_oracle.json")).unwrap();
    let f = |v: &Value| v.as_f64().unwrap();
    let mut images = Vec::new();
    for im in v["images"].as_array().unwrap() {
        let id = im["id"].as_u64().unwrap();
        let (w, h) = (f(&im["width"]), f(&im["height"]));
        let of = |key: &str| v[key].as_array().unwrap().iter().filter(move |a| a["image_id"].as_u64() == Some(id));
        let gts = of("gts")
            .map(|g| {
                let b: Vec<f64> = g["bbox"].as_array().unwrap().iter().map(f).collect();
                let bbox = BoundingBox::new(b[0] / w, (b[0] + b[2]) / w, b[1] / h, (b[1] + b[3]) / h);
                pose(g["keypoints"].as_array().unwrap(), bbox, 1.0, w, h, true)
            })
            .collect();
        let preds = of("dets")
            .map(|d| {
                let b: Vec<f64> = d["box"].as_array().unwrap().iter().map(f).collect();
                let bbox = BoundingBox::new(b[0] / w, b[2] / w, b[1] / h, b[3] / h);
                pose(d["keypoints"].as_array().unwrap(), bbox, f(&d["score"]), w, h, false)
            })
            .collect();
        images.push(EvalImage {
            raster: Raster {
                width: w as usize,
                height: h as usize,
            },
            gts,
            preds,
        });
    }
    let e = &v["expected"];
    let expected = CocoMetrics {
        ap: f(&e["ap"]),
        ap50: f(&e["ap50"]),
        ap75: f(&e["ap75"]),
        ap_m: f(&e["ap_m"]),
        ap_l: f(&e["ap_l"]),
        ar: f(&e["ar"]),
    };
    let joints = images.iter().flat_map(|i| i.gts.first()).map(|g| g.keypoints.len()).next().unwrap();
    (images, OksParams::uniform(joints, f(&v["k"])), expected)
}

/// Largest absolute difference between two metric sets.
pub fn metrics_gap(a: &CocoMetrics, b: &CocoMetrics) -> f64 {
    [a.ap - b.ap, a.ap50 - b.ap50, a.ap75 - b.ap75, a.ap_m - b.ap_m, a.ap_l - b.ap_l, a.ar - b.ar]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()))
}
