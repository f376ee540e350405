//! Property tests over the core invariants: arithmetic against scalar-loop
//! oracles, reshape round-trips, pseudo-backward linearity and checkpoint
//! round-trips on randomized modules.

mod common;

use common::shape;
use proptest::collection::vec as pvec;
use proptest::prelude::*;
use transplant_core::checkpoint;
use transplant_core::graph::{NetModule, Role};
use transplant_core::layers::{self, LayerParams, LayerSpec, PseudoRules};
use transplant_core::tensor::{axpy_norms, Shape, Tensor};

fn finite_f64() -> impl Strategy<Value = f64> {
    (-1e6f64..1e6).prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn axpy_norms_agrees_with_scalar_loop(
        data in pvec((finite_f64(), finite_f64()), 1..512),
        alpha in -8.0f64..8.0,
    ) {
        let n = data.len();
        let a = Tensor::<f64>::from_vec(&shape(&[n]), data.iter().map(|p| p.0).collect()).unwrap();
        let b = Tensor::<f64>::from_vec(&shape(&[n]), data.iter().map(|p| p.1).collect()).unwrap();
        let got = axpy_norms(&a, &b, alpha).unwrap();
        let mut oracle = 0.0f64;
        for (x, y) in &data {
            let d = alpha * x - y;
            oracle += d * d;
        }
        let rel = (got - oracle).abs() / oracle.abs().max(1e-12);
        prop_assert!(rel <= 1e-12, "rel {rel}");
    }

    #[test]
    fn reshape_round_trip_preserves_bits(
        data in pvec(finite_f64(), 1..256),
    ) {
        let n = data.len();
        let t = Tensor::<f64>::from_vec(&shape(&[n]), data).unwrap();
        let back = t.reshape(&shape(&[1, n]))
            .unwrap()
            .reshape(&shape(&[n, 1]))
            .unwrap()
            .reshape(&shape(&[n]))
            .unwrap();
        prop_assert_eq!(t.data(), back.data());
    }

    #[test]
    fn pseudo_backward_is_linear_in_the_seed(
        w in pvec(-2.0f64..2.0, 2 * 3 * 9),
        g1 in pvec(-2.0f64..2.0, 2 * 16),
        g2 in pvec(-2.0f64..2.0, 2 * 16),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let spec = LayerSpec::Conv {
            out_channels: 2,
            in_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let in_shape = shape(&[3, 4, 4]);
        let out_shape = shape(&[2, 4, 4]);
        let params = LayerParams::new(
            Tensor::from_vec(&shape(&[2, 3, 3, 3]), w).unwrap(),
            Tensor::zeros(&shape(&[2])),
        );
        let rules = PseudoRules::default();
        let g1 = Tensor::from_vec(&out_shape, g1).unwrap();
        let g2 = Tensor::from_vec(&out_shape, g2).unwrap();
        let combo = g1.scale(a).add(&g2.scale(b)).unwrap();
        let lhs = layers::pseudo_backward(&spec, &params, &in_shape, &combo, &rules).unwrap();
        let rhs = layers::pseudo_backward(&spec, &params, &in_shape, &g1, &rules).unwrap().scale(a)
            .add(&layers::pseudo_backward(&spec, &params, &in_shape, &g2, &rules).unwrap().scale(b))
            .unwrap();
        let num = lhs.sub(&rhs).unwrap().norm_sq_f64().sqrt();
        let den = rhs.norm_sq_f64().sqrt().max(1e-9);
        prop_assert!(num / den <= 1e-10, "rel {}", num / den);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_on_random_modules(
        weights in pvec(-3.0f32..3.0, 4 * 2 * 9),
        bias in pvec(-3.0f32..3.0, 4),
        frozen in any::<bool>(),
    ) {
        let spec = LayerSpec::Conv {
            out_channels: 4,
            in_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let params = LayerParams::new(
            Tensor::from_vec(&shape(&[4, 2, 3, 3]), weights).unwrap(),
            Tensor::from_vec(&shape(&[4]), bias).unwrap(),
        );
        let mut module = NetModule::new(
            "m",
            Role::Category,
            vec![spec, LayerSpec::Relu],
            vec![params, LayerParams::none()],
            Shape::new(vec![2, 5, 5]),
        ).unwrap();
        if frozen {
            module.freeze();
        }
        let dir = std::env::temp_dir().join(format!(
            "prop-ckpt-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        checkpoint::save(&dir, &[&module]).unwrap();
        let loaded = checkpoint::load::<f32>(&dir).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        prop_assert_eq!(loaded.len(), 1);
        prop_assert_eq!(loaded[0].param_hash_hex(), module.param_hash_hex());
        prop_assert_eq!(loaded[0].frozen(), module.frozen());
    }
}
