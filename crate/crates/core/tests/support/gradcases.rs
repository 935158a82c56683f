//! Finite-difference harness and one random case generator per tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xpeft::adapter::layer::{adapter_forward, aggregate, AdapterOptions, AdapterVars};
use xpeft::adapter::mask::soft_row_weights;
use xpeft::{Tape64, Tensor64, Var};

pub const SHAPES_PER_OP: usize = 20;
const H: f64 = 1e-3;
const REL: f64 = 1e-3;
const ABS: f64 = 1e-5;

pub type Build = dyn Fn(&mut Tape64, &[Var]) -> xpeft::Result<Var>;

/// Contracts the op output with a fixed random weighting so every output
/// element contributes to the scalar being differentiated.
fn scalar(tape: &mut Tape64, inputs: &[Tensor64], weights: &[f64], build: &Build) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.variable(t.shape().to_vec(), t.data().to_vec()).unwrap())
        .collect();
    let y = build(tape, &vars).unwrap();
    let w = tape.constant(tape.shape(y).to_vec(), weights[..tape.value(y).len()].to_vec()).unwrap();
    let prod = tape.mul(y, w).unwrap();
    (tape.sum(prod), vars)
}

fn check(op: &str, case: usize, inputs: Vec<Tensor64>, rng: &mut ChaCha8Rng, build: &Build) {
    let out_len = {
        let mut t = Tape64::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|x| t.constant(x.shape().to_vec(), x.data().to_vec()).unwrap())
            .collect();
        let y = build(&mut t, &vars).unwrap();
        t.value(y).len()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut tape = Tape64::new();
    let (loss, vars) = scalar(&mut tape, &inputs, &weights, build);
    tape.backward(loss).unwrap();

    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[which]).expect("inputs require grad");
        for (j, &a) in analytic.iter().enumerate().take(input.numel()) {
            let eval = |delta: f64| {
                let mut moved = inputs.clone();
                moved[which].data_mut()[j] += delta;
                let mut t = Tape64::new();
                let (l, _) = scalar(&mut t, &moved, &weights, build);
                t.item(l)
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let err = (a - numeric).abs();
            assert!(
                err <= ABS || err <= REL * a.abs().max(numeric.abs()),
                "{op} case {case} input {which} element {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    let n = shape.iter().product();
    Tensor64::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so `relu` never straddles its kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor64::new(shape.to_vec(), data).unwrap()
}

pub fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

pub type Case = (Vec<Tensor64>, Box<Build>);

/// Checks `SHAPES_PER_OP` random shapes of the named op; panics on a mismatch.
pub fn run(op: &str) {
    let (seed, case) = OPS
        .iter()
        .enumerate()
        .find(|(_, (name, _))| *name == op)
        .map(|(i, (_, case))| (i as u64 + 1, case))
        .unwrap_or_else(|| panic!("unknown op {op}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..SHAPES_PER_OP {
        let (inputs, build) = case(&mut rng);
        check(op, i, inputs, &mut rng, &*build);
    }
}


pub type CaseFn = fn(&mut ChaCha8Rng) -> Case;

pub const OPS: &[(&str, CaseFn)] = &[
    ("matmul", matmul),
    ("batched_matmul", batched_matmul),
    ("transpose", transpose),
    ("permute", permute),
    ("reshape", reshape),
    ("slice_rows", slice_rows),
    ("add", |r| elementwise(r, |t, a, b| t.add(a, b))),
    ("sub", |r| elementwise(r, |t, a, b| t.sub(a, b))),
    ("mul", |r| elementwise(r, |t, a, b| t.mul(a, b))),
    ("add_bias", add_bias),
    ("scale", scale),
    ("relu", relu),
    ("softmax", softmax),
    ("layer_norm", layer_norm),
    ("cross_entropy", cross_entropy),
    ("mean_pool", mean_pool),
    ("embedding", embedding),
    ("sum", sum),
    ("masked_adapter", masked_adapter),
];

fn matmul(r: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = (dim(r), dim(r), dim(r));
    (
        vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    )
}

fn batched_matmul(r: &mut ChaCha8Rng) -> Case {
    let (g, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
    (
        vec![rand_tensor(r, &[g, m, k]), rand_tensor(r, &[g, k, n])],
        Box::new(|t, v| t.batched_matmul(v[0], v[1])),
    )
}

fn transpose(r: &mut ChaCha8Rng) -> Case {
    let shape: Vec<usize> = (0..r.random_range(2..=4)).map(|_| dim(r)).collect();
    (vec![rand_tensor(r, &shape)], Box::new(|t, v| t.transpose(v[0])))
}

fn permute(r: &mut ChaCha8Rng) -> Case {
    let shape: Vec<usize> = (0..4).map(|_| dim(r)).collect();
    let mut perm = [0, 1, 2, 3];
    for i in (1..4).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    (vec![rand_tensor(r, &shape)], Box::new(move |t, v| t.permute(v[0], perm)))
}

fn reshape(r: &mut ChaCha8Rng) -> Case {
    let (a, b, c) = (dim(r), dim(r), dim(r));
    (vec![rand_tensor(r, &[a, b, c])], Box::new(move |t, v| t.reshape(v[0], &[a * b, c])))
}

fn slice_rows(r: &mut ChaCha8Rng) -> Case {
    let (rows, w) = (r.random_range(2..=6), dim(r));
    let start = r.random_range(0..rows);
    let len = r.random_range(1..=rows - start);
    (
        vec![rand_tensor(r, &[rows, w])],
        Box::new(move |t, v| t.slice_rows(v[0], start, len)),
    )
}

fn elementwise(r: &mut ChaCha8Rng, f: fn(&mut Tape64, Var, Var) -> xpeft::Result<Var>) -> Case {
    let shape: Vec<usize> = (0..r.random_range(1..=3)).map(|_| dim(r)).collect();
    (
        vec![rand_tensor(r, &shape), rand_tensor(r, &shape)],
        Box::new(move |t, v| f(t, v[0], v[1])),
    )
}

fn add_bias(r: &mut ChaCha8Rng) -> Case {
    let (m, n) = (dim(r), dim(r));
    (
        vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[n])],
        Box::new(|t, v| t.add_bias(v[0], v[1])),
    )
}

fn scale(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r)];
    let f: f64 = r.random_range(-2.0..2.0);
    (vec![rand_tensor(r, &shape)], Box::new(move |t, v| Ok(t.scale(v[0], f))))
}

fn relu(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r)];
    (vec![away_from_zero(r, &shape)], Box::new(|t, v| Ok(t.relu(v[0]))))
}

fn softmax(r: &mut ChaCha8Rng) -> Case {
    let shape: Vec<usize> = (0..r.random_range(1..=3)).map(|_| dim(r)).collect();
    let axis = r.random_range(0..shape.len());
    (vec![rand_tensor(r, &shape)], Box::new(move |t, v| t.softmax(v[0], axis)))
}

fn layer_norm(r: &mut ChaCha8Rng) -> Case {
    let (m, w) = (dim(r), r.random_range(2..=6));
    (
        vec![rand_tensor(r, &[m, w]), rand_tensor(r, &[w]), rand_tensor(r, &[w])],
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
    )
}

fn cross_entropy(r: &mut ChaCha8Rng) -> Case {
    let (m, c) = (dim(r), r.random_range(2..=5));
    let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..c)).collect();
    (
        vec![rand_tensor(r, &[m, c])],
        Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
    )
}

fn mean_pool(r: &mut ChaCha8Rng) -> Case {
    let shape = [dim(r), dim(r), dim(r)];
    (vec![rand_tensor(r, &shape)], Box::new(|t, v| t.mean_pool(v[0])))
}

fn embedding(r: &mut ChaCha8Rng) -> Case {
    let (vocab, w) = (dim(r), dim(r));
    let ids: Vec<usize> = (0..r.random_range(1..=6)).map(|_| r.random_range(0..vocab)).collect();
    (
        vec![rand_tensor(r, &[vocab, w])],
        Box::new(move |t, v| t.embedding(v[0], &ids)),
    )
}

fn sum(r: &mut ChaCha8Rng) -> Case {
    let shape: Vec<usize> = (0..r.random_range(1..=3)).map(|_| dim(r)).collect();
    (vec![rand_tensor(r, &shape)], Box::new(|t, v| Ok(t.sum(v[0]))))
}

/// Mask logits through the softmax, bank aggregation and the adapter body.
fn masked_adapter(r: &mut ChaCha8Rng) -> Case {
    let (n, b, d, m) = (r.random_range(2..=4), r.random_range(2..=3), r.random_range(4..=5), dim(r));
    let opts = AdapterOptions {
        activation: xpeft::adapter::Activation::Identity,
        ..Default::default()
    };
    (
        vec![
            rand_tensor(r, &[m, d]),
            rand_tensor(r, &[n]),
            rand_tensor(r, &[n]),
            rand_tensor(r, &[n, b * d]),
            rand_tensor(r, &[n, d * b]),
            rand_tensor(r, &[b]),
            rand_tensor(r, &[b]),
        ],
        Box::new(move |t, v| {
            let wa = soft_row_weights(t, v[1])?;
            let wb = soft_row_weights(t, v[2])?;
            let down = aggregate(t, wa, v[3], b, d)?;
            let up = aggregate(t, wb, v[4], d, b)?;
            let vars = AdapterVars {
                down,
                up,
                ln_gamma: v[5],
                ln_beta: v[6],
            };
            adapter_forward(t, v[0], &vars, &opts)
        }),
    )
}
