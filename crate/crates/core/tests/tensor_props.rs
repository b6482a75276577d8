use forge_core::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-30.0f64..30.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in matrix(4, 7)) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v);
        for r in 0..4 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {} sums to {}", r, sum);
        }
    }

    #[test]
    fn sigmoid_is_open_unit_interval(x in matrix(3, 5)) {
        let mut g = Graph::new();
        let v = g.constant(x.map(|a| a / 2.0));
        let s = g.sigmoid(v);
        prop_assert!(g.value(s).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn forward_is_pure(x in matrix(3, 4), w in matrix(4, 2)) {
        let run = || {
            let mut g = Graph::new();
            let a = g.input("x", x.clone());
            let b = g.constant(w.clone());
            let y = g.matmul(a, b).unwrap();
            let y = g.silu(y);
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
