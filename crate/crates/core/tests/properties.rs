use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparserl::dataset::{generate_dataset, Batch, DataPolicy, Dataset};
use sparserl::env::EnvKind;
use sparserl::mlp::{forward, Activation, MlpParams, MlpSpec, Network};
use sparserl::optim::{adam_step, AdamConfig, AdamState, ParamGrads};
use sparserl::pruning::{build_mask, snip_scores, Criterion, Mask};
use sparserl::rl::{bc_loss, AgentDims, Algorithm, AgentBundle, Architecture, BcqConfig};
use sparserl::store::{from_coo, to_coo};
use sparserl::{Graph, Tensor};

fn activation(code: u8) -> Activation {
    match code % 3 {
        0 => Activation::Identity,
        1 => Activation::Relu,
        _ => Activation::Tanh,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Plain forward pass with no mask anywhere in the graph.
fn unmasked_forward(spec: &MlpSpec, params: &MlpParams, input: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut h = g.input(input.clone()).unwrap();
    let last = params.weights.len() - 1;
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let w = g.parameter(w.clone()).unwrap();
        let b = g.parameter(b.clone()).unwrap();
        let wt = g.transpose(w).unwrap();
        let z = g.matmul(h, wt).unwrap();
        let z = g.add(z, b).unwrap();
        let act = if l == last { spec.output_activation } else { spec.hidden_activation };
        h = match act {
            Activation::Identity => z,
            Activation::Relu => g.relu(z).unwrap(),
            Activation::Tanh => g.tanh(z).unwrap(),
        };
    }
    g.value(h).clone()
}

fn small_dataset() -> Dataset {
    generate_dataset(EnvKind::PointMass, DataPolicy::NoisyExpert { sigma: 0.05 }, 400, 3).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn all_ones_mask_is_bitwise_dense(
        dims in prop::collection::vec(1usize..12, 2..5),
        hidden in any::<u8>(),
        output in any::<u8>(),
        seed in any::<u64>(),
        batch in 1usize..6,
    ) {
        let spec = MlpSpec::new(dims.clone(), activation(hidden), activation(output)).unwrap();
        let params = MlpParams::init(&spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, batch, dims[0]);
        let masked = forward(&spec, &params, &Mask::dense(&spec), &x).unwrap();
        let plain = unmasked_forward(&spec, &params, &x);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&masked), bits(&plain));
    }

    #[test]
    fn adam_never_revives_masked_weights(
        dims in prop::collection::vec(1usize..10, 2..4),
        sparsity in 0.0f64..0.95,
        steps in 1usize..20,
        seed in any::<u64>(),
    ) {
        let spec = MlpSpec::new(dims, Activation::Relu, Activation::Identity).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new(spec.clone(), seed);
        let scores = sparserl::pruning::SaliencyScores {
            layers: spec.weight_shapes().iter().map(|&(o, i)| random_tensor(&mut rng, o, i)).collect(),
        };
        net.prune(build_mask(&scores, sparsity, Criterion::Snip).unwrap()).unwrap();
        let cfg = AdamConfig::with_lr(0.1);
        let mut state = AdamState::new(&net.params);
        for _ in 0..steps {
            let grads = ParamGrads {
                weights: spec.weight_shapes().iter().map(|&(o, i)| random_tensor(&mut rng, o, i)).collect(),
                biases: spec.weight_shapes().iter().map(|&(o, _)| random_tensor(&mut rng, 1, o).into_data()).map(Tensor::vector).collect(),
            };
            adam_step(&mut net.params, &net.mask, &grads, &mut state, &cfg).unwrap();
            prop_assert_eq!(net.masked_nonzero(), 0);
        }
    }

    #[test]
    fn coo_round_trip_preserves_forward(
        dims in prop::collection::vec(1usize..10, 2..4),
        sparsity in 0.0f64..0.95,
        seed in any::<u64>(),
    ) {
        let spec = MlpSpec::new(dims.clone(), Activation::Tanh, Activation::Identity).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new(spec.clone(), seed);
        let scores = sparserl::pruning::SaliencyScores {
            layers: spec.weight_shapes().iter().map(|&(o, i)| random_tensor(&mut rng, o, i)).collect(),
        };
        net.prune(build_mask(&scores, sparsity, Criterion::Grasp).unwrap()).unwrap();
        let mut rebuilt = net.clone();
        for (l, (w, m)) in net.params.weights.iter().zip(&net.mask.layers).enumerate() {
            let (w2, m2) = from_coo(&to_coo(w, m).unwrap()).unwrap();
            rebuilt.params.weights[l] = w2;
            rebuilt.mask.layers[l] = m2;
        }
        prop_assert_eq!(&rebuilt.mask, &net.mask);
        let x = random_tensor(&mut rng, 3, dims[0]);
        let a = net.forward(&x).unwrap();
        let b = rebuilt.forward(&x).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dataset_file_round_trip(n in 1usize..300, seed in any::<u64>(), pendulum in any::<bool>(), sigma in 0.0f64..0.3) {
        let env = if pendulum { EnvKind::Pendulum } else { EnvKind::PointMass };
        let ds = generate_dataset(env, DataPolicy::NoisyExpert { sigma }, n, seed).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn snip_mask_ignores_sample_order(seed in any::<u64>(), sparsity in 0.1f64..0.9) {
        let ds = small_dataset();
        let dims = AgentDims::for_env(&EnvKind::PointMass.spec()).unwrap();
        let bundle = AgentBundle::init(Algorithm::Bc, dims, &Architecture::toy(), BcqConfig::default(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..64).map(|_| rng.random_range(0..ds.len())).collect();
        let a = Batch::from_indices(&ds, &idx).unwrap();
        idx.shuffle(&mut rng);
        let b = Batch::from_indices(&ds, &idx).unwrap();
        let mask = |batch: &Batch| {
            let s = snip_scores(&[()], |g, _| bc_loss(g, &bundle.actor, &dims, batch)).unwrap();
            build_mask(&s[0], sparsity, Criterion::Snip).unwrap()
        };
        prop_assert_eq!(mask(&a), mask(&b));
    }
}

#[test]
fn hvp_is_linear_to_1e10() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = MlpSpec::new(vec![3, 5, 2], Activation::Tanh, Activation::Tanh).unwrap();
    let params = MlpParams::init(&spec, 4);
    let x = random_tensor(&mut rng, 4, 3);
    let y = random_tensor(&mut rng, 4, 2);
    let mut g = Graph::new();
    let nodes = sparserl::mlp::MlpNodes::bind(&mut g, &params, &Mask::dense(&spec), true).unwrap();
    let xi = g.input(x).unwrap();
    let yi = g.input(y).unwrap();
    let out = nodes.apply(&mut g, &spec, xi).unwrap();
    let loss = g.mse_loss(out, yi).unwrap();
    let ids: Vec<_> = nodes.all().collect();
    for _ in 0..20 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<(sparserl::NodeId, Tensor)> {
            ids.iter()
                .map(|&id| {
                    let s = g.value(id).shape().to_vec();
                    let n = s.iter().product();
                    (id, Tensor::new(s, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
                })
                .collect()
        };
        let (u, v) = (draw(&mut rng), draw(&mut rng));
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mix: Vec<_> = u.iter().zip(&v).map(|((id, x), (_, y))| (*id, x.scale(a).add(&y.scale(b)))).collect();
        let (hu, hv, hm) = (g.hvp(loss, &u).unwrap(), g.hvp(loss, &v).unwrap(), g.hvp(loss, &mix).unwrap());
        for &id in &ids {
            let want = hu.get(id).scale(a).add(&hv.get(id).scale(b));
            let got = hm.get(id);
            let scale = want.max_abs().max(got.max_abs()).max(f64::MIN_POSITIVE);
            let err = got.sub(&want).max_abs() / scale;
            assert!(err <= 1e-10, "relative linearity error {err:e}");
        }
    }
}
