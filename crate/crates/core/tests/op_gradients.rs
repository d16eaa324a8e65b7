//! Every tape operation against central finite differences, 100 seeded
//! trials each on random tensors with dimensions at most 8.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sydes::gradcheck::{check_inputs, Tolerance};
use sydes::rng::{RngState, Stream};
use sydes::tensor::{concat, TensorError, Var};
use sydes::Tape;
use sydes::Tensor;

const TRIALS: u64 = 100;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

fn dims(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| dim(rng)).collect()
}

/// Contracts an arbitrary-shaped output with fixed random weights so every
/// output element influences the scalar.
fn weighted_sum<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, TensorError> {
    let mut rng = RngState::new(seed).substream(Stream::Probe, 1, 0);
    let w = rand_tensor(&mut rng, &out.shape(), -1.0, 1.0);
    let w = out.tape().constant(&w);
    Ok(out.mul(w)?.sum())
}

fn run<S, F>(name: &str, setup: S, f: F)
where
    S: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: for<'t> Fn(&'t Tape, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError> + Copy,
{
    for trial in 0..TRIALS {
        let mut rng = RngState::new(trial).substream(Stream::Probe, 0, name.len() as u64);
        let inputs = setup(&mut rng);
        let seed = trial * 7919 + 1;
        let report = check_inputs(&inputs, |t, v| weighted_sum(f(t, v)?, seed), Tolerance::default()).unwrap();
        assert!(report.passed(), "{name} trial {trial}: {:?}", &report.failures[..report.failures.len().min(3)]);
    }
}

#[test]
fn matmul_2d() {
    run(
        "matmul",
        |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            vec![rand_tensor(r, &[m, k], -1., 1.), rand_tensor(r, &[k, n], -1., 1.)]
        },
        |_, v| v[0].matmul(v[1]),
    );
}

#[test]
fn matmul_batched() {
    run(
        "matmul_batched",
        |r| {
            let (b, m, k, n) = (dim(r).min(3), dim(r), dim(r), dim(r));
            vec![rand_tensor(r, &[b, m, k], -1., 1.), rand_tensor(r, &[b, k, n], -1., 1.)]
        },
        |_, v| v[0].matmul(v[1]),
    );
    run(
        "matmul_shared_rhs",
        |r| {
            let (b, m, k, n) = (dim(r).min(3), dim(r), dim(r), dim(r));
            vec![rand_tensor(r, &[b, m, k], -1., 1.), rand_tensor(r, &[k, n], -1., 1.)]
        },
        |_, v| v[0].matmul(v[1]),
    );
}

#[test]
fn transpose() {
    run(
        "transpose",
        |r| {
            let s = dims(r, 2);
            vec![rand_tensor(r, &s, -1., 1.)]
        },
        |_, v| v[0].transpose(),
    );
    run(
        "transpose3",
        |r| {
            let s = [&[2][..], &dims(r, 2)].concat();
            vec![rand_tensor(r, &s, -1., 1.)]
        },
        |_, v| v[0].transpose(),
    );
}

#[test]
fn elementwise_binary() {
    let same = |r: &mut ChaCha8Rng| {
        let s = [dim(r), dim(r)];
        vec![rand_tensor(r, &s, -1., 1.), rand_tensor(r, &s, -1., 1.)]
    };
    let bcast = |r: &mut ChaCha8Rng| {
        let (a, b) = (dim(r), dim(r));
        vec![rand_tensor(r, &[a, b], -1., 1.), rand_tensor(r, &[b], -1., 1.)]
    };
    run("add", same, |_, v| v[0].add(v[1]));
    run("sub", same, |_, v| v[0].sub(v[1]));
    run("mul", same, |_, v| v[0].mul(v[1]));
    run("add_b", bcast, |_, v| v[0].add(v[1]));
    run("sub_b", bcast, |_, v| v[0].sub(v[1]));
    run("mul_b", bcast, |_, v| v[0].mul(v[1]));
}

#[test]
fn elementwise_unary() {
    let any = |r: &mut ChaCha8Rng| {
        let s = dims(r, 2);
        vec![rand_tensor(r, &s, -2., 2.)]
    };
    let pos = |r: &mut ChaCha8Rng| {
        let s = dims(r, 2);
        vec![rand_tensor(r, &s, 0.2, 2.)]
    };
    run("scale", any, |_, v| Ok(v[0].scale(-1.7)));
    run("shift", any, |_, v| Ok(v[0].shift(0.3)));
    run("tanh", any, |_, v| Ok(v[0].tanh()));
    run("sigmoid", any, |_, v| Ok(v[0].sigmoid()));
    run("gelu", any, |_, v| Ok(v[0].gelu()));
    run("exp", any, |_, v| Ok(v[0].exp()));
    run("square", any, |_, v| Ok(v[0].square()));
    run("sqrt", pos, |_, v| Ok(v[0].sqrt()));
    run("ln_floor", pos, |_, v| Ok(v[0].ln_floor(1e-12)));
}

#[test]
fn reductions() {
    let any = |r: &mut ChaCha8Rng| {
        let s = dims(r, 3);
        vec![rand_tensor(r, &s, -1., 1.)]
    };
    run("sum", any, |_, v| Ok(v[0].sum()));
    run("mean", any, |_, v| Ok(v[0].mean()));
    for axis in 0..3 {
        run("sum_axis", any, move |_, v| v[0].sum_axis(axis));
        run("mean_axis", any, move |_, v| v[0].mean_axis(axis));
    }
}

#[test]
fn softmax_family() {
    let any = |r: &mut ChaCha8Rng| {
        let s = dims(r, 3);
        vec![rand_tensor(r, &s, -3., 3.)]
    };
    for axis in 0..3 {
        run("softmax", any, move |_, v| v[0].softmax(axis));
        run("log_softmax", any, move |_, v| v[0].log_softmax(axis));
    }
}

#[test]
fn layer_norm() {
    run(
        "layer_norm",
        |r| {
            let (rows, cols) = (dim(r), dim(r).max(2));
            vec![
                rand_tensor(r, &[rows, cols], -2., 2.),
                rand_tensor(r, &[cols], 0.5, 1.5),
                rand_tensor(r, &[cols], -0.5, 0.5),
            ]
        },
        |_, v| v[0].layer_norm(v[1], v[2], 1e-5),
    );
}

#[test]
fn l2_normalize() {
    run(
        "l2",
        |r| {
            let s = dims(r, 2);
            vec![rand_tensor(r, &s, 0.1, 1.)]
        },
        |_, v| v[0].l2_normalize(),
    );
    run(
        "l2_signed",
        |r| {
            let s = [dim(r), dim(r).max(2)];
            vec![rand_tensor(r, &s, -1., 1.)]
        },
        |_, v| v[0].l2_normalize(),
    );
}

#[test]
fn shape_ops() {
    run(
        "concat",
        |r| {
            let n = dim(r);
            let (a, b) = (dim(r), dim(r));
            vec![rand_tensor(r, &[n, a], -1., 1.), rand_tensor(r, &[n, b], -1., 1.)]
        },
        |_, v| concat(&[v[0], v[1]], 1),
    );
    run(
        "concat0",
        |r| {
            let c = dim(r);
            let (a, b) = (dim(r), dim(r));
            vec![rand_tensor(r, &[a, c], -1., 1.), rand_tensor(r, &[b, c], -1., 1.)]
        },
        |_, v| concat(&[v[0], v[1], v[0]], 0),
    );
    run(
        "split",
        |r| {
            let s = [dim(r), dim(r).max(2)];
            vec![rand_tensor(r, &s, -1., 1.)]
        },
        |_, v| {
            let cols = v[0].shape()[1];
            let parts = v[0].split(1, &[1, cols - 1])?;
            parts[0].sum().add(parts[1].scale(2.0).sum())
        },
    );
    run(
        "narrow",
        |r| {
            let s = [dim(r).max(3), dim(r)];
            vec![rand_tensor(r, &s, -1., 1.)]
        },
        |_, v| v[0].narrow(0, 1, 2),
    );
    run(
        "reshape",
        |r| {
            let s = dims(r, 2);
            vec![rand_tensor(r, &s, -1., 1.)]
        },
        |_, v| {
            let n = v[0].numel();
            v[0].reshape(&[n])
        },
    );
}

#[test]
fn indexing_ops() {
    run(
        "gather_rows",
        |r| {
            let s = [dim(r).max(3), dim(r)];
            vec![rand_tensor(r, &s, -1., 1.)]
        },
        |_, v| v[0].gather_rows(&[2, 0, 2, 1]),
    );
    run(
        "pick",
        |r| {
            let s = [3, dim(r).max(3)];
            vec![rand_tensor(r, &s, -1., 1.)]
        },
        |_, v| v[0].pick(&[0, 2, 1]),
    );
}

#[test]
fn forward_examples() {
    let t = Tape::new();
    let id = t.constant(&Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
    let x = t.constant(&Tensor::from_f64(&[2, 1], &[3., 4.]).unwrap());
    assert_eq!(id.matmul(x).unwrap().values(), vec![3., 4.]);
    let a = t.constant(&Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let b = t.constant(&Tensor::from_f64(&[2, 1], &[5., 6.]).unwrap());
    assert_eq!(a.matmul(b).unwrap().values(), vec![17., 39.]);
    let err = a.matmul(t.constant(&Tensor::from_f64(&[3, 1], &[1., 2., 3.]).unwrap())).unwrap_err();
    assert_eq!(err.to_string(), "matmul: incompatible shapes [2, 2] and [3, 1]");

    let s = t.constant(&Tensor::zeros(&[4])).softmax(0).unwrap().values();
    assert_eq!(s, vec![0.25; 4]);
    let s = t.constant(&Tensor::from_f64(&[2], &[1f64.ln(), 3f64.ln()]).unwrap()).softmax(0).unwrap().values();
    assert!((s[0] - 0.25).abs() < 1e-12 && (s[1] - 0.75).abs() < 1e-12);
    let s = t.constant(&Tensor::from_f64(&[2], &[1000., 1000.]).unwrap()).softmax(0).unwrap().values();
    assert_eq!(s, vec![0.5, 0.5]);

    let n = t.constant(&Tensor::from_f64(&[2], &[3., 4.]).unwrap()).l2_normalize().unwrap().values();
    assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
    assert!(matches!(t.constant(&Tensor::zeros(&[3])).l2_normalize(), Err(TensorError::Degenerate(_))));

    let g = t.constant(&Tensor::full(&[3], 1.0));
    let z = t.constant(&Tensor::zeros(&[3]));
    let ln = t.constant(&Tensor::full(&[2, 3], 7.0)).layer_norm(g, z, 1e-5).unwrap().values();
    assert!(ln.iter().all(|&v| v == 0.0));

    let c = concat(&[t.constant(&Tensor::zeros(&[5, 2])), t.constant(&Tensor::zeros(&[5, 3]))], 1).unwrap();
    assert_eq!(c.shape(), vec![5, 5]);
    assert!(concat(&[t.constant(&Tensor::zeros(&[5, 2])), t.constant(&Tensor::zeros(&[4, 3]))], 1).is_err());

    // only leading-dimension broadcast
    let m = t.constant(&Tensor::zeros(&[2, 3]));
    assert!(m.add(t.constant(&Tensor::zeros(&[2]))).is_err());
    assert!(m.add(t.constant(&Tensor::zeros(&[3]))).is_ok());
}

#[test]
fn backward_examples() {
    let t = Tape::new();
    let x = t.leaf(&Tensor::from_f64(&[3], &[5., -1., 2.]).unwrap());
    let g = t.backward(x.sum()).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1., 1., 1.]);

    let t = Tape::new();
    let x = t.leaf(&Tensor::from_f64(&[2], &[1., 2.]).unwrap());
    let g = t.backward(x.square().sum()).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[2., 4.]);

    // gradient of sum(A B) w.r.t. A is ones * B^T
    let t = Tape::new();
    let a = t.leaf(&Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let b = t.constant(&Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let g = t.backward(a.matmul(b).unwrap().sum()).unwrap();
    assert_eq!(g.wrt(a).unwrap(), &[3., 7., 11., 3., 7., 11.]);

    let t = Tape::new();
    let x = t.leaf(&Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn repeated_backward_accumulates_into_params() {
    use sydes::params::ParamStore;
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p.x", Tensor::from_f64(&[2], &[1., 2.]).unwrap());
    for _ in 0..2 {
        let t = Tape::new();
        let x = t.param(&store, id);
        let g = t.backward(x.square().sum()).unwrap();
        store.accumulate(&g);
    }
    assert_eq!(store.get(id).tensor.grad.as_deref(), Some(&[4., 8.][..]));
    store.zero_grad();
    assert!(store.get(id).tensor.grad.is_none());
}
