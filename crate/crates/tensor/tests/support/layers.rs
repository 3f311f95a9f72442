//! Randomized gradient-check instances for every tape layer.

use afcyte_tensor::{grad_check, GradCheckConfig, GradCheckReport, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Case = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], grad: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap().with_requires_grad(grad)
}

/// `sum(y * w)` for a fixed random `w`, so every output element matters.
pub fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, false);
    let w = tape.leaf(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn cfg() -> GradCheckConfig {
    GradCheckConfig::default()
}

fn conv(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=k / 2);
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let h = rng.random_range(k..k + 4);
    let w = rng.random_range(k..k + 4);
    let x = tensor(rng, &[n, cin, h, w], true);
    let wt = tensor(rng, &[cout, cin, k, k], true);
    let b = tensor(rng, &[cout], true);
    let seed = rng.random();
    grad_check(
        &[x, wt, b],
        move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
            readout(t, y, seed)
        },
        cfg(),
    )
}

fn max_pool(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let ceil = rng.random_bool(0.5);
    let h = rng.random_range(3..10);
    let w = rng.random_range(3..10);
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), h, w];
    let x = tensor(rng, &shape, true);
    let seed = rng.random();
    grad_check(
        &[x],
        move |t, v| {
            let y = t.max_pool2d(v[0], 3, 2, ceil)?;
            readout(t, y, seed)
        },
        cfg(),
    )
}

fn avg_pool(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..6), rng.random_range(1..6)];
    let x = tensor(rng, &shape, true);
    let seed = rng.random();
    grad_check(
        &[x],
        move |t, v| {
            let y = t.adaptive_avg_pool2d(v[0])?;
            readout(t, y, seed)
        },
        cfg(),
    )
}

fn unary(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..4), rng.random_range(1..4)];
    let x = tensor(rng, &shape, true);
    let seed = rng.random();
    grad_check(
        &[x],
        move |t, v| {
            let y = op(t, v[0])?;
            readout(t, y, seed)
        },
        cfg(),
    )
}

fn relu(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    unary(rng, |t, x| Ok(t.relu(x)))
}

fn sigmoid(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    unary(rng, |t, x| Ok(t.sigmoid(x)))
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    unary(rng, |t, x| t.softmax(x))
}

fn dropout(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let p = rng.random_range(0.1..0.6);
    let mask_seed = rng.random();
    let x = tensor(rng, &[2, 3, 4, 4], true);
    let seed = rng.random();
    grad_check(
        &[x],
        move |t, v| {
            let y = t.dropout(v[0], p, true, &mut ChaCha8Rng::seed_from_u64(mask_seed))?;
            readout(t, y, seed)
        },
        cfg(),
    )
}

fn concat(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..4), rng.random_range(1..4));
    let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let a = tensor(rng, &[n, ca, h, w], true);
    let b = tensor(rng, &[n, cb, h, w], true);
    let seed = rng.random();
    grad_check(
        &[a, b],
        move |t, v| {
            let y = t.concat_channels(&[v[0], v[1]])?;
            readout(t, y, seed)
        },
        cfg(),
    )
}

fn reshape(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, c) = (rng.random_range(1..=3), rng.random_range(1..=4));
    let x = tensor(rng, &[n, c, 1, 1], true);
    let seed = rng.random();
    grad_check(
        &[x],
        move |t, v| {
            let y = t.reshape(v[0], &[n, c])?;
            readout(t, y, seed)
        },
        cfg(),
    )
}

fn arithmetic(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let shape = [rng.random_range(1..4), rng.random_range(1..4)];
    let a = tensor(rng, &shape, true);
    let b = tensor(rng, &shape, true);
    let f = rng.random_range(-2.0..2.0);
    grad_check(
        &[a, b],
        move |t, v| {
            let s = t.add(v[0], v[1])?;
            let m = t.mul(s, v[1])?;
            let sc = t.scale(m, f);
            Ok(t.mean(sc))
        },
        cfg(),
    )
}

fn targets(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Vec<usize> {
    (0..rows).map(|_| rng.random_range(0..classes.max(2))).collect()
}

fn weights(rng: &mut ChaCha8Rng, classes: usize) -> Option<Vec<f64>> {
    rng.random_bool(0.5).then(|| (0..classes.max(2)).map(|_| rng.random_range(0.2..2.0)).collect())
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let rows = rng.random_range(1..6);
    let classes = [1, 2, 3, 5][rng.random_range(0..4)];
    let x = tensor(rng, &[rows, classes], true);
    let y = targets(rng, rows, classes);
    let eps = rng.random_range(0.0..0.3);
    let w = weights(rng, classes);
    grad_check(&[x], move |t, v| t.cross_entropy(v[0], &y, eps, w.as_deref()), cfg())
}

/// Loss on probabilities produced by sigmoid (one column) or softmax.
fn cross_entropy_probs(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let rows = rng.random_range(1..6);
    let classes = [1, 2, 3, 5][rng.random_range(0..4)];
    let x = tensor(rng, &[rows, classes], true);
    let y = targets(rng, rows, classes);
    let eps = rng.random_range(0.0..0.3);
    let w = weights(rng, classes);
    grad_check(
        &[x],
        move |t, v| {
            let p = if classes == 1 { t.sigmoid(v[0]) } else { t.softmax(v[0])? };
            t.cross_entropy_probs(p, &y, eps, w.as_deref())
        },
        cfg(),
    )
}

/// Squeeze, two expand branches and the channel concat, with ReLUs.
fn fire(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (cin, s, e1, e3) = (rng.random_range(2..=4), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    let x = tensor(rng, &[1, cin, 5, 5], true);
    let ts = [
        tensor(rng, &[s, cin, 1, 1], true),
        tensor(rng, &[s], true),
        tensor(rng, &[e1, s, 1, 1], true),
        tensor(rng, &[e1], true),
        tensor(rng, &[e3, s, 3, 3], true),
        tensor(rng, &[e3], true),
    ];
    let seed = rng.random();
    let mut inputs = vec![x];
    inputs.extend(ts);
    grad_check(
        &inputs,
        move |t, v| {
            let sq = t.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
            let sq = t.relu(sq);
            let a = t.conv2d(sq, v[3], Some(v[4]), 1, 0)?;
            let a = t.relu(a);
            let b = t.conv2d(sq, v[5], Some(v[6]), 1, 1)?;
            let b = t.relu(b);
            let y = t.concat_channels(&[a, b])?;
            readout(t, y, seed)
        },
        cfg(),
    )
}

pub const LAYERS: [(&str, Case); 14] = [
    ("conv2d", conv),
    ("max_pool2d", max_pool),
    ("adaptive_avg_pool2d", avg_pool),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("softmax", softmax),
    ("dropout", dropout),
    ("concat_channels", concat),
    ("reshape", reshape),
    ("add/mul/scale/mean", arithmetic),
    ("cross_entropy", cross_entropy),
    ("cross_entropy_probs", cross_entropy_probs),
    ("fire", fire),
    ("sum", |rng| unary(rng, |t, x| Ok(t.sum(x)))),
];

/// Runs `instances` random checks of one layer; returns the worst error.
pub fn check_layer(case: Case, instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        worst = worst.max(case(&mut rng)?.max_rel_error());
    }
    Ok(worst)
}
