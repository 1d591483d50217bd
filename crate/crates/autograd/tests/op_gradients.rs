use genvit_autograd::{Graph, Mask, Tensor, UnaryKind, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds `loss = sum(f(inputs) * probe)` with a fixed random probe so every
/// output element feeds the loss with a distinct weight.
fn check<F>(inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Tensor<f64>], rng: &mut ChaCha8Rng| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::detached();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars);
        let probe = Tensor::randn(g.shape(out), 1.0, rng);
        let p = g.constant(probe);
        let prod = g.mul(out, p);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let gs = vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        (g.value(loss).item(), gs)
    };
    let (_, analytic) = eval(inputs, &mut rng.clone());
    let h = 1e-5;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (lp, _) = eval(&plus, &mut rng.clone());
            let (lm, _) = eval(&minus, &mut rng.clone());
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i].data()[j];
            let scale = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / scale < 1e-6,
                "input {i} elem {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand(shape, seed).map(|v| v.abs() + 0.5)
}

#[test]
fn matmul_shared_weight() {
    check(&[rand(&[2, 3, 4], 1), rand(&[4, 5], 2)], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn matmul_transposed_weight() {
    check(&[rand(&[3, 4], 1), rand(&[5, 4], 2)], |g, v| g.matmul_t(v[0], v[1]));
}

#[test]
fn matmul_batched() {
    check(&[rand(&[2, 3, 4], 3), rand(&[2, 4, 2], 4)], |g, v| g.matmul(v[0], v[1]));
    check(&[rand(&[2, 3, 4], 3), rand(&[2, 5, 4], 4)], |g, v| g.matmul_t(v[0], v[1]));
}

#[test]
fn broadcast_binaries() {
    check(&[rand(&[2, 3, 4], 5), rand(&[4], 6)], |g, v| g.add(v[0], v[1]));
    check(&[rand(&[2, 3, 4], 5), rand(&[2, 1, 4], 6)], |g, v| g.sub(v[0], v[1]));
    check(&[rand(&[2, 3, 1], 5), rand(&[3, 4], 6)], |g, v| g.mul(v[0], v[1]));
    check(&[rand(&[2, 3], 5), positive(&[2, 1], 6)], |g, v| g.div(v[0], v[1]));
}

#[test]
fn unaries() {
    let kinds = [
        UnaryKind::Gelu,
        UnaryKind::Silu,
        UnaryKind::Sigmoid,
        UnaryKind::Exp,
        UnaryKind::Tanh,
        UnaryKind::Square,
        UnaryKind::Neg,
        UnaryKind::Scale(-0.7),
        UnaryKind::Shift(2.0),
    ];
    for k in kinds {
        check(&[rand(&[3, 4], 7)], |g, v| g.unary(v[0], k));
    }
    check(&[positive(&[3, 4], 8)], |g, v| g.unary(v[0], UnaryKind::Sqrt));
    check(&[positive(&[3, 4], 8)], |g, v| g.unary(v[0], UnaryKind::Log));
}

#[test]
fn softmax_plain_and_causal() {
    check(&[rand(&[2, 3, 5], 9)], |g, v| g.softmax(v[0], Mask::None));
    check(&[rand(&[2, 3, 5], 9)], |g, v| g.softmax(v[0], Mask::Causal { offset: 2 }));
}

#[test]
fn layer_norm() {
    check(&[rand(&[3, 6], 10), rand(&[6], 11), rand(&[6], 12)], |g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn shape_ops() {
    check(&[rand(&[2, 3, 4], 13)], |g, v| g.reshape(v[0], &[6, 4]));
    check(&[rand(&[2, 3, 4], 13)], |g, v| g.permute(v[0], &[2, 0, 1]));
    check(&[rand(&[2, 3, 4], 13), rand(&[2, 1, 4], 14)], |g, v| g.concat(&[v[0], v[1]], 1));
    check(&[rand(&[2, 5, 3], 13)], |g, v| g.narrow(v[0], 1, 1, 3));
    check(&[rand(&[5, 3], 15)], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
}

#[test]
fn conv_and_upsample() {
    check(&[rand(&[2, 4, 4, 3], 16), rand(&[27, 2], 17)], |g, v| g.conv2d(v[0], v[1], 3, 1, 1));
    check(&[rand(&[1, 5, 5, 2], 16), rand(&[18, 3], 17)], |g, v| g.conv2d(v[0], v[1], 3, 2, 1));
    check(&[rand(&[1, 4, 4, 2], 16), rand(&[2, 3], 17)], |g, v| g.conv2d(v[0], v[1], 1, 1, 0));
    check(&[rand(&[2, 2, 3, 2], 18)], |g, v| g.upsample2x(v[0]));
}

#[test]
fn reductions() {
    check(&[rand(&[2, 3, 4], 19)], |g, v| g.sum_axis(v[0], 1));
    check(&[rand(&[2, 3, 4], 19)], |g, v| g.mean_axis(v[0], 0));
    check(&[rand(&[2, 3, 4], 19)], |g, v| g.mean(v[0]));
}

#[test]
fn cross_entropy_weighted() {
    check(&[rand(&[4, 6], 20)], |g, v| g.cross_entropy(v[0], &[1, 5, 0, 3], &[1.0, 0.0, 2.0, 1.0]));
}

#[test]
fn attention_composite() {
    // softmax(q kᵀ / √d) v with a causal mask, the pattern every model here uses
    check(&[rand(&[1, 4, 3], 21), rand(&[1, 4, 3], 22), rand(&[1, 4, 2], 23)], |g, v| {
        let s = g.matmul_t(v[0], v[1]);
        let s = g.scale(s, 1.0 / 3f64.sqrt());
        let a = g.softmax(s, Mask::Causal { offset: 0 });
        g.matmul(a, v[2])
    });
}

#[test]
fn shared_node_accumulates() {
    check(&[rand(&[3, 3], 24)], |g, v| {
        let a = g.matmul(v[0], v[0]);
        g.mul(a, v[0])
    });
}
