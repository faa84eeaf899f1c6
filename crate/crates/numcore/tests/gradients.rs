//! Reverse-mode gradients against central differences, ten random points
//! per operation.

use std::rc::Rc;

use numcore::gradcheck::grad_check;
use numcore::{Graph, MaskVariant, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: u64 = 10;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar through a fixed random weighting so that
/// every output coordinate contributes a distinct gradient.
fn project<'g>(out: Var<'g>) -> Result<Var<'g>> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 7.0).collect();
    let w = out.graph().constant(Tensor::new(&shape, w)?);
    Ok(out.mul(&w)?.sum())
}

fn check<F>(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> + Copy,
{
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = make(&mut rng);
        let err = grad_check(f, &point, H).unwrap();
        assert!(err < TOL, "{name}: point {seed} relative error {err:e}");
    }
}

#[test]
fn matmul_all_transpose_combinations() {
    check("matmul nn", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], |_, v| {
        project(v[0].matmul_t(&v[1], false, false)?)
    });
    check("matmul tn", |r| vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], |_, v| {
        project(v[0].matmul_t(&v[1], true, false)?)
    });
    check("matmul nt", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[2, 4], -1.0, 1.0)], |_, v| {
        project(v[0].matmul_t(&v[1], false, true)?)
    });
    check("matmul tt", |r| vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[2, 4], -1.0, 1.0)], |_, v| {
        project(v[0].matmul_t(&v[1], true, true)?)
    });
    check(
        "linear",
        |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
        |_, v| project(v[0].linear(&v[1], Some(&v[2]))?),
    );
}

#[test]
fn elementwise_binary() {
    let two = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[3, 5], -2.0, 2.0)];
    check("add", two, |_, v| project(v[0].add(&v[1])?));
    check("sub", two, |_, v| project(v[0].sub(&v[1])?));
    check("mul", two, |_, v| project(v[0].mul(&v[1])?));
    let row = |r: &mut ChaCha8Rng| vec![uniform(r, &[4, 3], -2.0, 2.0), uniform(r, &[3], -2.0, 2.0)];
    check("add_row", row, |_, v| project(v[0].add_row(&v[1])?));
    check("mul_row", row, |_, v| project(v[0].mul_row(&v[1])?));
    check("modulate", |r| vec![uniform(r, &[4, 3], -2.0, 2.0), uniform(r, &[5, 3], -2.0, 2.0)], |_, v| {
        project(v[0].modulate(&v[1])?)
    });
    check("mul_scalar", |r| vec![uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[1], -2.0, 2.0)], |_, v| {
        project(v[0].mul_scalar(&v[1])?)
    });
    check("pow_scalar", |r| vec![uniform(r, &[2, 3], 0.05, 1.0), uniform(r, &[1], 0.2, 2.0)], |_, v| {
        project(v[0].pow_scalar(&v[1])?)
    });
}

#[test]
fn elementwise_unary() {
    let any = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], -2.0, 2.0)];
    let pos = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], 0.1, 2.0)];
    check("scale", any, |_, v| project(v[0].scale(-1.7)));
    check("add_scalar", any, |_, v| project(v[0].add_scalar(0.3)));
    check("neg", any, |_, v| project(v[0].neg()));
    check("exp", any, |_, v| project(v[0].exp()));
    check("log", pos, |_, v| project(v[0].log()));
    check("tanh", any, |_, v| project(v[0].tanh()));
    check("sigmoid", any, |_, v| project(v[0].sigmoid()));
    check("relu", any, |_, v| project(v[0].relu()));
    check("gelu", any, |_, v| project(v[0].gelu()));
    check("abs", any, |_, v| project(v[0].abs()));
    check("square", any, |_, v| project(v[0].square()));
    check("clamp_min", any, |_, v| project(v[0].clamp_min(0.1)));
}

#[test]
fn row_normalizers() {
    let x = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 5], -3.0, 3.0)];
    check("softmax_rows", x, |_, v| project(v[0].softmax_rows()));
    check("log_softmax_rows", x, |_, v| project(v[0].log_softmax_rows()));
    check(
        "layer_norm",
        |r| vec![uniform(r, &[3, 5], -3.0, 3.0), uniform(r, &[5], 0.5, 1.5), uniform(r, &[5], -1.0, 1.0)],
        |_, v| project(v[0].layer_norm(&v[1], &v[2], 1e-6)?),
    );
}

#[test]
fn reductions_and_reshaping() {
    let x = |r: &mut ChaCha8Rng| vec![uniform(r, &[4, 3], -2.0, 2.0)];
    check("sum", x, |_, v| Ok(v[0].square().sum()));
    check("mean", x, |_, v| Ok(v[0].square().mean()));
    check("mean_rows", x, |_, v| project(v[0].mean_rows()));
    check("slice_cols", x, |_, v| project(v[0].slice_cols(1, 3)?));
    check("slice_rows", x, |_, v| project(v[0].slice_rows(1, 3)?));
    check("mul_col", |r| vec![uniform(r, &[4, 3], -2.0, 2.0), uniform(r, &[4], -2.0, 2.0)], |_, v| {
        project(v[0].mul_col(&v[1])?)
    });
    check("reshape", x, |_, v| project(v[0].reshape(&[2, 6])?));
    check("gather", x, |_, v| {
        project(v[0].gather(Rc::new(vec![0, 5, 5, 11, 2, 7]), &[3, 2])?)
    });
    check("concat_cols", |r| vec![uniform(r, &[3, 2], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)], |_, v| {
        project(Var::concat_cols(&[v[0], v[1], v[0]])?)
    });
    check("concat_rows", |r| vec![uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[1, 3], -2.0, 2.0)], |_, v| {
        project(Var::concat_rows(&[v[1], v[0], v[1]])?)
    });
}

#[test]
fn conv2d_strides_and_padding() {
    for (k, stride, pad) in [(3, 1, 1), (2, 2, 0), (3, 2, 1), (1, 1, 0)] {
        check(
            "conv2d",
            |r| {
                vec![
                    uniform(r, &[2, 5, 6, 3], -1.0, 1.0),
                    uniform(r, &[k, k, 3, 4], -1.0, 1.0),
                    uniform(r, &[4], -1.0, 1.0),
                ]
            },
            move |_, v| project(v[0].conv2d(&v[1], &v[2], stride, pad)?),
        );
    }
    check(
        "conv2d unbatched",
        |r| vec![uniform(r, &[4, 4, 2], -1.0, 1.0), uniform(r, &[2, 2, 2, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
        |_, v| project(v[0].conv2d(&v[1], &v[2], 2, 0)?),
    );
}

#[test]
fn pairwise_distances() {
    let two = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[5, 4], -2.0, 2.0)];
    check("pairwise_dist", two, |_, v| project(v[0].pairwise_dist(&v[1])?));
    check("pairwise_sqdist", two, |_, v| project(v[0].pairwise_sqdist(&v[1])?));
}

#[test]
fn attention_masks() {
    let m = |r: &mut ChaCha8Rng| vec![uniform(r, &[6], 0.05, 0.95)];
    check("mask dot", m, |_, v| project(v[0].attention_mask(MaskVariant::Dot)?));
    check("mask arithmetic", m, |_, v| project(v[0].attention_mask(MaskVariant::Arithmetic)?));
    check("mask harmonic", m, |_, v| {
        project(v[0].attention_mask(MaskVariant::Harmonic { eps: 1e-8 })?)
    });
}

#[test]
fn gaussian_nll() {
    check("gauss_nll", |r| vec![uniform(r, &[3, 8], -1.5, 1.5), uniform(r, &[3, 2], -1.0, 1.0)], |_, v| {
        project(v[0].gauss_nll(&v[1], 4, 1e-6)?)
    });
}

#[test]
fn linear_sum_gradient_is_column_sums_of_input() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.0]]).unwrap());
    let w = g.input(Tensor::from_rows(&[vec![0.3, 0.1, -0.2], vec![1.0, 2.0, 3.0]]).unwrap());
    let loss = x.matmul(&w).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    let dw = grads.wrt(w).unwrap();
    // x^T 1 broadcast across the three output columns.
    assert_eq!(dw.shape(), &[2, 3]);
    for c in 0..3 {
        assert_eq!(dw.at2(0, c), 4.5);
        assert_eq!(dw.at2(1, c), 1.0);
    }
}

#[test]
fn cross_entropy_at_uniform_logits_gives_p_minus_onehot() {
    let g = Graph::new();
    let logits = g.input(Tensor::full(&[1, 4], 0.7));
    let onehot = g.constant(Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
    let loss = logits.log_softmax_rows().mul(&onehot).unwrap().sum().neg();
    let grads = g.backward(loss).unwrap();
    let d = grads.wrt(logits).unwrap();
    for (j, &v) in d.data().iter().enumerate() {
        let want = 0.25 - if j == 2 { 1.0 } else { 0.0 };
        assert!((v - want).abs() < 1e-15, "coordinate {j}: {v}");
    }
}

#[test]
fn non_scalar_root_is_rejected() {
    let g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 2]));
    assert!(g.backward(x.exp()).is_err());
}

fn quadratic<'g>(_: &'g Graph, v: &[Var<'g>]) -> Result<Var<'g>> {
    Ok(v[0].add_scalar(-1.5).square().scale(3.0).sum())
}

fn constant<'g>(g: &'g Graph, _: &[Var<'g>]) -> Result<Var<'g>> {
    Ok(g.constant(Tensor::scalar(2.0)).sum())
}

#[test]
fn grad_check_simple_cases() {
    let err = grad_check(quadratic, &[Tensor::scalar(0.4)], H).unwrap();
    assert!(err < 1e-8, "{err:e}");
    assert_eq!(grad_check(constant, &[Tensor::vector(vec![1.0, 2.0])], H).unwrap(), 0.0);
    assert!(grad_check(constant, &[Tensor::scalar(1.0)], 0.0).is_err());
}
