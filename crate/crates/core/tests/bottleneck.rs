use autobot_core::bottleneck::{self, Bottlenecks, LAMBDA_INIT};
use autobot_core::graph::{identify_groups, zoo, OpKind};
use autobot_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch(seed: u64) -> Tensor {
    Tensor::uniform(&[3, 1, 28, 28], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn one_gate_per_group() {
    let g = zoo::build("vgg_tiny", &[8, 16], 10, [1, 28, 28], 0).unwrap();
    let a = identify_groups(&g).unwrap();
    let (inst, gates) = bottleneck::inject(&g, &a, LAMBDA_INIT).unwrap();
    let n = inst.nodes().iter().filter(|n| matches!(n.op, OpKind::Bottleneck { .. })).count();
    assert_eq!(n, 2);
    assert_eq!(gates.psi().iter().map(Tensor::numel).sum::<usize>(), 24);
    for l in gates.lambdas().iter().flatten() {
        assert!((l - 0.99).abs() < 1e-6);
    }
    assert!(bottleneck::inject(&inst, &a, LAMBDA_INIT).is_err());
    assert!(bottleneck::remove(&g).is_err());
}

#[test]
fn unit_gates_and_removal_are_exact() {
    for arch in ["vgg_tiny", "res_tiny", "branch_tiny"] {
        let g = zoo::build(arch, &zoo::default_widths(arch).unwrap(), 10, [1, 28, 28], 1).unwrap();
        let a = identify_groups(&g).unwrap();
        let (inst, mut gates) = bottleneck::inject(&g, &a, LAMBDA_INIT).unwrap();
        let ones: Vec<Vec<bool>> = a.channel_counts().iter().map(|&c| vec![true; c]).collect();
        gates.pseudo_prune(&ones).unwrap();
        let x = batch(2);
        assert_eq!(gates.predict(&inst, &x).unwrap().data(), g.predict(&x).unwrap().data(), "{arch}");
        let back = bottleneck::remove(&inst).unwrap();
        assert_eq!(back.spec(), g.spec());
        assert_eq!(back.predict(&x).unwrap().data(), g.predict(&x).unwrap().data());
    }
}

#[test]
fn zeroed_last_group_leaves_classifier_bias() {
    let mut g = zoo::build("vgg_tiny", &[8, 16], 10, [1, 28, 28], 0).unwrap();
    let fc = g.find("fc").unwrap();
    let bias = Tensor::uniform(&[10], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    *g.param_mut(&autobot_core::graph::ParamRef { node: fc, name: "bias".into() }).unwrap() = bias.clone();
    let a = identify_groups(&g).unwrap();
    let (inst, mut gates) = bottleneck::inject(&g, &a, LAMBDA_INIT).unwrap();
    let keep = vec![vec![true; 8], vec![false; 16]];
    gates.pseudo_prune(&keep).unwrap();
    let out = gates.predict(&inst, &batch(5)).unwrap();
    for row in out.data().chunks(10) {
        assert_eq!(row, bias.data());
    }
    assert!(gates.pseudo_prune(&[vec![true; 8]]).is_err());
}

#[test]
fn apply_examples() {
    let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(bottleneck::apply(&[1.0, 1.0], &x).unwrap().data(), x.data());
    assert_eq!(bottleneck::apply(&[0.0, 1.0], &x).unwrap().data(), &[0.0, 0.0, 3.0, 4.0]);
    let y = Tensor::new(vec![1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
    assert_eq!(bottleneck::apply(&[0.5], &y).unwrap().data(), &[1.0, 2.0]);
    assert!(bottleneck::apply(&[1.0], &x).is_err());
}

#[test]
fn psi_round_trip() {
    let b = Bottlenecks::new(&[3, 2], 0.99).unwrap();
    let c = Bottlenecks::from_psi(b.psi().to_vec()).unwrap();
    assert_eq!(b.lambdas(), c.lambdas());
    assert!(matches!(Bottlenecks::new(&[3], 1.0), Err(Error::InvalidParams(_)) | Err(Error::Bottleneck(_))));
}
