//! Minimal dense network engine: MLPs with batch norm, manual backprop and Adam.

mod adam;
mod batchnorm;
pub mod checkpoint;
mod mlp;

pub use adam::{AdamState, DEFAULT_LEARNING_RATE};
pub use batchnorm::{BatchNormLayer, BatchNormSettings, DEFAULT_BN_DECAY, DEFAULT_BN_EPSILON};
pub use mlp::{Activation, DenseLayer, Gradients, MlpNetwork, NetworkSpec, ParamGrads, Tape};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch norm uses batch statistics and updates its running averages.
    Train,
    /// Batch norm uses stored running statistics; nothing is mutated.
    Eval,
}


#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::test_support::*;
    use super::*;
    use crate::array::DenseArray;
    use crate::error::QflowError;

    fn identity_layer() -> MlpNetwork {
        let layer = DenseLayer {
            weight: DenseArray::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
            norm: None,
        };
        MlpNetwork::from_layers("id", None, vec![layer]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = identity_layer();
        let x = DenseArray::row_vector(&[1.0, 2.0]).unwrap();
        assert_eq!(net.forward(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let net = identity_layer();
        let err = net.predict(&DenseArray::zeros(1, 3)).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn batch_norm_first_layer_normalizes() {
        let layer = DenseLayer {
            weight: DenseArray::new(1, 1, vec![1.0]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
            norm: None,
        };
        let bn = BatchNormLayer::new(1, BatchNormSettings::default()).unwrap();
        let mut net = MlpNetwork::from_layers("bn", Some(bn), vec![layer]).unwrap();
        let y = net.forward(&DenseArray::new(2, 1, vec![1.0, 3.0]).unwrap(), Mode::Train).unwrap();
        assert!((y.get(0, 0) + 0.999995).abs() < 1e-6);
        assert!((y.get(1, 0) - 0.999995).abs() < 1e-6);
    }

    /// Plain triple-loop evaluation of a tanh MLP, independent of the gemm path.
    fn oracle_forward(net: &MlpNetwork, x: &DenseArray) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = x.iter_rows().map(|r| r.to_vec()).collect();
        for l in net.layers() {
            rows = rows
                .iter()
                .map(|r| {
                    (0..l.out_dim())
                        .map(|j| {
                            let mut s = l.bias[j];
                            for (i, xi) in r.iter().enumerate() {
                                s += xi * l.weight.get(i, j);
                            }
                            match l.activation {
                                Activation::Tanh => s.tanh(),
                                Activation::Relu => s.max(0.0),
                                Activation::Identity => s,
                            }
                        })
                        .collect()
                })
                .collect();
        }
        rows
    }

    #[test]
    fn two_layer_tanh_matches_dense_oracle() {
        let mut rng = seeded(7);
        let spec = NetworkSpec {
            input_dim: 4,
            hidden: vec![9],
            output_dim: 3,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Tanh,
            batch_norm: None,
        };
        let net = MlpNetwork::new("tanh", &spec, &mut rng).unwrap();
        let x = random_array(5, 4, &mut rng);
        let y = net.predict(&x).unwrap();
        for (r, want) in oracle_forward(&net, &x).iter().enumerate() {
            for (c, w) in want.iter().enumerate() {
                assert!((y.get(r, c) - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_backward_is_transpose_product() {
        let layer = DenseLayer {
            weight: DenseArray::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            bias: vec![0.0; 3],
            activation: Activation::Identity,
            norm: None,
        };
        let mut net = MlpNetwork::from_layers("lin", None, vec![layer]).unwrap();
        net.forward(&DenseArray::row_vector(&[0.3, -0.2]).unwrap(), Mode::Eval).unwrap();
        let g = DenseArray::row_vector(&[1.0, -1.0, 2.0]).unwrap();
        let grads = net.backward(&g).unwrap();
        // W is in×out, so the input gradient is g·Wᵀ
        assert_eq!(grads.input.data(), &[1.0 - 2.0 + 6.0, 4.0 - 5.0 + 12.0]);
    }

    #[test]
    fn backward_without_forward_rejected() {
        let mut net = identity_layer();
        let err = net.backward(&DenseArray::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, QflowError::NoCachedForward(_)));
    }

    #[test]
    fn reentrant_forward_rejected() {
        let mut net = identity_layer();
        let x = DenseArray::zeros(1, 2);
        net.forward(&x, Mode::Eval).unwrap();
        assert!(matches!(net.forward(&x, Mode::Eval), Err(QflowError::ReentrantForward(_))));
        net.backward(&x).unwrap();
        assert!(net.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = seeded(3);
        let mut net = MlpNetwork::new("z", &small_spec(3, 2, Activation::Relu, true), &mut rng).unwrap();
        let x = random_array(4, 3, &mut rng);
        net.forward(&x, Mode::Train).unwrap();
        let g = net.backward(&DenseArray::zeros(4, 2)).unwrap();
        assert!(g.input.data().iter().all(|v| *v == 0.0));
        assert!(g.params.unwrap().flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = seeded(11);
        let mut net = MlpNetwork::new("p", &small_spec(3, 2, Activation::Relu, true), &mut rng).unwrap();
        perturb_norms(&mut net, &mut rng);
        let before = net.clone();
        let x = random_array(6, 3, &mut rng);
        let a = net.forward(&x, Mode::Eval).unwrap();
        net.clear_cache();
        let b = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(net, before);
        assert_eq!(net.predict(&x).unwrap(), a);
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut rng = seeded(12);
        let mut net = MlpNetwork::new("s", &small_spec(3, 1, Activation::Relu, true), &mut rng).unwrap();
        let x = random_array(8, 3, &mut rng);
        let old = net.input_norm().unwrap().clone();
        net.forward(&x, Mode::Train).unwrap();
        let (mean, var) = super::batchnorm::batch_moments(&x);
        let bn = net.input_norm().unwrap();
        for j in 0..3 {
            assert_eq!(bn.running_mean[j], 0.99 * old.running_mean[j] + (1.0 - 0.99) * mean[j]);
            assert_eq!(bn.running_var[j], 0.99 * old.running_var[j] + (1.0 - 0.99) * var[j]);
        }
    }

    /// Scalar loss used by the finite-difference checks: Σ c ⊙ net(x).
    fn weighted_sum(net: &MlpNetwork, x: &DenseArray, c: &DenseArray, mode: Mode) -> f64 {
        let (y, _) = net.run(x, mode).unwrap();
        y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    pub(crate) fn check_fd(seed: u64, act: Activation, bn: bool, mode: Mode) {
        let mut rng = seeded(seed);
        let mut net = MlpNetwork::new("fd", &small_spec(4, 3, act, bn), &mut rng).unwrap();
        if bn {
            perturb_norms(&mut net, &mut rng);
        }
        let x = random_array(5, 4, &mut rng);
        let c = random_array(5, 3, &mut rng);
        let (_, tape) = net.run(&x, mode).unwrap();
        let grads = net.backward_tape(&tape, &c, true).unwrap();
        let h = 1e-5;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (weighted_sum(&net, &xp, &c, mode) - weighted_sum(&net, &xm, &c, mode)) / (2.0 * h);
            let an = grads.input.data()[i];
            assert!(rel_err(an, fd) <= 1e-4, "seed {seed} input {i}: {an} vs {fd}");
        }
        let pg = grads.params.unwrap();
        let n_tensors = pg.tensors.len();
        for t in 0..n_tensors {
            for j in 0..pg.tensors[t].len() {
                let mut plus = net.clone();
                plus.params_mut()[t][j] += h;
                let mut minus = net.clone();
                minus.params_mut()[t][j] -= h;
                let fd = (weighted_sum(&plus, &x, &c, mode) - weighted_sum(&minus, &x, &c, mode)) / (2.0 * h);
                let an = pg.tensors[t][j];
                assert!(rel_err(an, fd) <= 1e-4, "seed {seed} tensor {t}[{j}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn finite_difference_tanh_plain() {
        for seed in 0..20 {
            check_fd(seed, Activation::Tanh, false, Mode::Train);
        }
    }

    #[test]
    fn finite_difference_relu_batchnorm_train() {
        for seed in 100..120 {
            check_fd(seed, Activation::Relu, true, Mode::Train);
        }
    }

    #[test]
    fn finite_difference_relu_batchnorm_eval() {
        for seed in 200..220 {
            check_fd(seed, Activation::Relu, true, Mode::Eval);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn outputs_finite_and_shaped(seed in 0u64..10_000, rows in 1usize..9) {
            let mut rng = seeded(seed);
            let net = MlpNetwork::new("p", &small_spec(3, 2, Activation::Relu, true), &mut rng).unwrap();
            let x = random_array(rows, 3, &mut rng);
            let (y, tape) = net.run(&x, Mode::Train).unwrap();
            prop_assert_eq!(y.shape(), (rows, 2));
            prop_assert!(y.is_finite());
            let g = net.backward_tape(&tape, &DenseArray::filled(rows, 2, rng.random_range(-1.0..1.0)), true).unwrap();
            prop_assert_eq!(g.input.shape(), (rows, 3));
            let shapes: Vec<usize> = g.params.unwrap().tensors.iter().map(|t| t.len()).collect();
            prop_assert_eq!(shapes, net.param_shapes());
        }

        #[test]
        fn adam_keeps_second_moment_nonnegative(grads in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let mut adam = AdamState::new(&[1], 3e-4);
            let mut x = [0.0];
            for g in grads {
                adam.update(vec![&mut x], &ParamGrads { tensors: vec![vec![g]] }).unwrap();
                prop_assert!(adam.second_moment()[0][0] >= 0.0);
                prop_assert!(x[0].is_finite());
            }
        }
    }

    #[test]
    fn checkpoint_fragment_round_trip() {
        let mut rng = seeded(5);
        let mut net = MlpNetwork::new("critic.q1", &small_spec(3, 1, Activation::Relu, true), &mut rng).unwrap();
        perturb_norms(&mut net, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let manifest = checkpoint::write_fragment(dir.path(), "critic.q1", &net).unwrap();
        let json = serde_json::to_string(&manifest).unwrap();
        let manifest: checkpoint::FragmentManifest = serde_json::from_str(&json).unwrap();
        let back = checkpoint::read_fragment(dir.path(), &manifest).unwrap();
        assert_eq!(back, net);
        let x = random_array(3, 3, &mut rng);
        assert_eq!(back.predict(&x).unwrap().data(), net.predict(&x).unwrap().data());
    }

    #[test]
    fn corrupt_fragment_names_key() {
        let mut rng = seeded(6);
        let net = MlpNetwork::new("policy.flow", &small_spec(3, 2, Activation::Relu, false), &mut rng).unwrap();
        let mut manifest = checkpoint::manifest_for("policy.flow", &net);
        let bytes = checkpoint::encode(&net);
        assert!(checkpoint::decode(&manifest, &bytes[..bytes.len() - 8]).unwrap_err().to_string().contains("policy.flow"));
        manifest.layers[1].in_dim = 99;
        let err = checkpoint::decode(&manifest, &bytes).unwrap_err();
        assert!(err.to_string().contains("policy.flow"), "{err}");
    }
}
