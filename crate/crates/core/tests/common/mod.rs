//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segloss::losses::{bce_loss, combined_loss, soft_dice_loss, DiceGranularity, LossConfig, LossWeights};
use segloss::tensor::gradcheck::check;
use segloss::tensor::{DiffTensor, Shape, Tensor};
use segloss::Result;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_shape(r: &mut ChaCha8Rng) -> Shape {
    Shape::new(r.gen_range(1..3), r.gen_range(1..3), r.gen_range(2..5), r.gen_range(2..5))
}

pub fn uniform(shape: Shape, lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, r)
}

/// Uniform values in `±[gap, 1]`, keeping clear of a kink at zero.
fn away_from_zero(shape: Shape, gap: f64, r: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| {
            let m = r.gen_range(gap..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn binary(shape: Shape, r: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel()).map(|_| f64::from(r.gen_bool(0.4) as u8)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Contracts a tensor to a scalar with fixed random weights, so every
/// element's gradient is distinct.
fn weighted_sum<'g>(t: DiffTensor<'g>, weights: &Tensor) -> Result<DiffTensor<'g>> {
    Ok(t.mul(&t.graph().constant(weights.clone()))?.sum())
}

fn unary(
    seed: u64,
    make: impl Fn(Shape, &mut ChaCha8Rng) -> Tensor,
    out_shape: impl Fn(Shape) -> Shape,
    op: impl for<'g> Fn(DiffTensor<'g>) -> Result<DiffTensor<'g>>,
) -> Result<f64> {
    let mut r = rng(seed);
    let shape = small_shape(&mut r);
    let x = make(shape, &mut r);
    let w = uniform(out_shape(shape), -1.0, 1.0, &mut r);
    check(|_, v| weighted_sum(op(v[0])?, &w), &[x], STEP)
}

fn binary_op(
    seed: u64,
    lo_b: f64,
    op: impl for<'g> Fn(DiffTensor<'g>, DiffTensor<'g>) -> Result<DiffTensor<'g>>,
) -> Result<f64> {
    let mut r = rng(seed);
    let shape = small_shape(&mut r);
    let a = uniform(shape, -2.0, 2.0, &mut r);
    let b = uniform(shape, lo_b, 2.0, &mut r);
    let w = uniform(shape, -1.0, 1.0, &mut r);
    check(|_, v| weighted_sum(op(v[0], v[1])?, &w), &[a, b], STEP)
}

fn conv(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let kernel = if r.gen_bool(0.5) { 3 } else { 1 };
    let stride = r.gen_range(1..3);
    let padding = if kernel == 3 { r.gen_range(0..2) } else { 0 };
    let (n, c, o) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
    let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
    let x = uniform(Shape::new(n, c, h, w), -1.0, 1.0, &mut r);
    let k = uniform(Shape::new(o, c, kernel, kernel), -1.0, 1.0, &mut r);
    let b = uniform(Shape::new(1, o, 1, 1), -1.0, 1.0, &mut r);
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let wt = uniform(Shape::new(n, o, oh, ow), -1.0, 1.0, &mut r);
    check(
        |_, v| weighted_sum(v[0].conv2d(&v[1], &v[2], stride, padding)?, &wt),
        &[x, k, b],
        STEP,
    )
}

fn concat(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let s = small_shape(&mut r);
    let c2 = r.gen_range(1..3);
    let a = uniform(s, -1.0, 1.0, &mut r);
    let b = uniform(Shape::new(s.batch(), c2, s.height(), s.width()), -1.0, 1.0, &mut r);
    let w = uniform(Shape::new(s.batch(), s.channels() + c2, s.height(), s.width()), -1.0, 1.0, &mut r);
    check(|_, v| weighted_sum(v[0].concat(&v[1])?, &w), &[a, b], STEP)
}

fn maxpool(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let s = Shape::new(r.gen_range(1..3), r.gen_range(1..3), 2 * r.gen_range(1..3), 2 * r.gen_range(1..3));
    let x = uniform(s, -1.0, 1.0, &mut r);
    let w = uniform(Shape::new(s.batch(), s.channels(), s.height() / 2, s.width() / 2), -1.0, 1.0, &mut r);
    check(|_, v| weighted_sum(v[0].maxpool2x2()?, &w), &[x], STEP)
}

/// A prediction strictly inside (0, 1) produced by a sigmoid, so the check
/// runs through the loss and the activation together.
fn loss_case(seed: u64, loss: impl for<'g> Fn(&DiffTensor<'g>, &Tensor) -> Result<DiffTensor<'g>>) -> Result<f64> {
    let mut r = rng(seed);
    let s = Shape::new(r.gen_range(1..4), 1, r.gen_range(2..5), r.gen_range(2..5));
    let logits = uniform(s, -3.0, 3.0, &mut r);
    let target = binary(s, &mut r);
    check(|_, v| loss(&v[0].sigmoid(), &target), &[logits], STEP)
}

pub type Case = fn(u64) -> Result<f64>;

/// Every differentiable operation and both losses, each checked against
/// central differences for one seed.
pub fn gradient_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv),
        ("sigmoid", |s| unary(s, |sh, r| uniform(sh, -4.0, 4.0, r), |sh| sh, |x| Ok(x.sigmoid()))),
        ("relu", |s| unary(s, |sh, r| away_from_zero(sh, 0.05, r), |sh| sh, |x| Ok(x.relu()))),
        ("log", |s| unary(s, |sh, r| uniform(sh, 0.2, 3.0, r), |sh| sh, |x| x.log())),
        ("add", |s| binary_op(s, -2.0, |a, b| a.add(&b))),
        ("sub", |s| binary_op(s, -2.0, |a, b| a.sub(&b))),
        ("mul", |s| binary_op(s, -2.0, |a, b| a.mul(&b))),
        ("ratio", |s| binary_op(s, 0.5, |a, b| a.ratio(&b))),
        ("affine", |s| unary(s, |sh, r| uniform(sh, -2.0, 2.0, r), |sh| sh, |x| Ok(x.affine(-1.7, 0.3)))),
        (
            "clamp",
            |s| unary(s, |sh, r| double_off_edge(away_from_zero(sh, 0.05, r)), |sh| sh, |x| Ok(x.clamp(-1.0, 1.0))),
        ),
        ("concat", concat),
        (
            "upsample",
            |s| unary(s, |sh, r| uniform(sh, -1.0, 1.0, r), |sh| Shape::new(sh.batch(), sh.channels(), 2 * sh.height(), 2 * sh.width()), |x| Ok(x.upsample_nearest_x2())),
        ),
        ("maxpool", maxpool),
        ("sum", |s| unary(s, |sh, r| uniform(sh, -1.0, 1.0, r), |_| Shape::SCALAR, |x| Ok(x.sum()))),
        ("mean", |s| unary(s, |sh, r| uniform(sh, -1.0, 1.0, r), |_| Shape::SCALAR, |x| Ok(x.mean()))),
        (
            "sum_per_image",
            |s| unary(s, |sh, r| uniform(sh, -1.0, 1.0, r), |sh| Shape::new(sh.batch(), 1, 1, 1), |x| Ok(x.sum_per_image())),
        ),
        ("bce", |s| loss_case(s, |p, y| bce_loss(p, y, &LossConfig::default()))),
        ("soft_dice", |s| loss_case(s, |p, y| soft_dice_loss(p, y, &LossConfig::default()))),
        (
            "soft_dice_batch_smoothed",
            |s| {
                loss_case(s, |p, y| {
                    let cfg = LossConfig {
                        dice_smooth: 1.0,
                        dice_granularity: DiceGranularity::WholeBatch,
                        ..LossConfig::default()
                    };
                    soft_dice_loss(p, y, &cfg)
                })
            },
        ),
        (
            "combined",
            |s| loss_case(s, |p, y| combined_loss(p, y, LossWeights { bce: 0.3, dice: 0.7 }, &LossConfig::default())),
        ),
    ]
}

/// Maps `±[0.05, 1]` onto `±[0.1, 0.9] ∪ ±[1.1, 2]`, away from the clamp
/// corners at ±1 and the origin.
fn double_off_edge(t: Tensor) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| {
            let m = v.abs();
            let mapped = if m < 0.5 { 0.1 + 1.6 * (m - 0.05) } else { 1.1 + 1.8 * (m - 0.5) };
            mapped.copysign(v)
        })
        .collect();
    Tensor::from_vec(t.shape(), data).unwrap()
}

/// Runs every case for `seeds`, returning `(case, worst error)` pairs.
pub fn run_gradient_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    gradient_cases()
        .into_iter()
        .map(|(name, case)| {
            let worst = seeds
                .clone()
                .map(|s| case(s).unwrap_or_else(|e| panic!("{name} seed {s}: {e}")))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
