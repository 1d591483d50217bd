use genvit_autograd::{Archive, Graph, Mask, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000, causal in any::<bool>()) {
        let x = Tensor::<f64>::randn(&[rows, cols], 3.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut g = Graph::detached();
        let v = g.constant(x);
        let mask = if causal { Mask::Causal { offset: cols.saturating_sub(rows) } } else { Mask::None };
        let y = g.softmax(v, mask);
        for r in 0..rows {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn archive_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 1..40), frozen in any::<bool>()) {
        let mut p = ParamStore::<f32>::new();
        p.insert("unet/w", Tensor::from_f32(&[vals.len()], &vals), frozen);
        let a = Archive::from(&p);
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut p = ParamStore::<f64>::new();
    p.insert("a/w", Tensor::ones(&[2, 2]), false);
    p.insert("b/w", Tensor::ones(&[2, 2]), true);
    let mut g = Graph::new(&p);
    let a = g.param("a/w");
    let b = g.param("b/w");
    let c = g.matmul(a, b);
    let loss = g.sum(c);
    let grads = g.backward(loss);
    assert!(grads.get(b).is_none());
    let pg = g.param_grads(&grads);
    assert_eq!(pg.keys().collect::<Vec<_>>(), vec!["a/w"]);
    assert_eq!(pg["a/w"].data(), &[2.0; 4]);
}

#[test]
fn no_grad_graph_records_nothing_differentiable() {
    let mut p = ParamStore::<f32>::new();
    p.insert("a/w", Tensor::ones(&[2]), false);
    let mut g = Graph::new(&p).no_grad();
    let a = g.param("a/w");
    let s = g.sum(a);
    assert!(!g.requires_grad(s));
    assert!(g.backward(s).get(a).is_none());
}

#[test]
fn param_binding_is_cached() {
    let mut p = ParamStore::<f32>::new();
    p.insert("a/w", Tensor::ones(&[2]), false);
    let mut g = Graph::new(&p);
    assert_eq!(g.param("a/w"), g.param("a/w"));
}
