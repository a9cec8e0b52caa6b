use autobot_core::bottleneck::{self, LAMBDA_INIT};
use autobot_core::flops::{exact_flops, FlopsModel};
use autobot_core::graph::{identify_groups, validate_groups, zoo, Graph};
use autobot_core::prune::{analytic_param_count, equivalence_check, prune};
use autobot_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn zoo_models() -> Vec<Graph> {
    vec![
        zoo::build("vgg_tiny", &[6, 8, 8], 10, [1, 16, 16], 1).unwrap(),
        zoo::build("res_tiny", &[6, 6, 8], 10, [1, 16, 16], 2).unwrap(),
        zoo::build("branch_tiny", &[6, 4, 3, 6, 8], 10, [1, 16, 16], 3).unwrap(),
    ]
}

fn random_mask(rng: &mut impl Rng, counts: &[usize], p: f64) -> Vec<Vec<bool>> {
    counts
        .iter()
        .map(|&c| {
            let mut k: Vec<bool> = (0..c).map(|_| rng.gen_bool(p)).collect();
            if !k.iter().any(|&b| b) {
                k[rng.gen_range(0..c)] = true;
            }
            k
        })
        .collect()
}

#[test]
fn pseudo_prune_matches_physical_prune() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for g in zoo_models() {
        let a = identify_groups(&g).unwrap();
        let (inst, mut gates) = bottleneck::inject(&g, &a, LAMBDA_INIT).unwrap();
        for trial in 0..5 {
            let keep = random_mask(&mut rng, &a.channel_counts(), 0.5);
            gates.pseudo_prune(&keep).unwrap();
            let pruned = prune(&g, &a, &keep).unwrap();
            let diff = equivalence_check(&inst, &gates, &pruned, 4, trial).unwrap();
            assert!(diff < 1e-5, "{} trial {trial}: diff {diff}", g.arch);
        }
    }
}

#[test]
fn weighted_flops_match_pruned_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for g in zoo_models() {
        let a = identify_groups(&g).unwrap();
        let model = FlopsModel::new(&g, &a).unwrap();
        assert_eq!(model.max_flops(), exact_flops(&g) as f64);
        for _ in 0..10 {
            let keep = random_mask(&mut rng, &a.channel_counts(), 0.6);
            let pruned = prune(&g, &a, &keep).unwrap();
            assert_eq!(model.of_mask(&keep).unwrap(), exact_flops(&pruned) as f64, "{}", g.arch);
            assert_eq!(pruned.param_count(), analytic_param_count(&g, &a, &keep).unwrap());
            let pa = identify_groups(&pruned).unwrap();
            assert!(validate_groups(&pruned, &pa).is_empty());
        }
    }
}

#[test]
fn unit_gates_leave_forward_unchanged() {
    for g in zoo_models() {
        let a = identify_groups(&g).unwrap();
        let (inst, mut gates) = bottleneck::inject(&g, &a, LAMBDA_INIT).unwrap();
        let ones: Vec<Vec<bool>> = a.channel_counts().iter().map(|&c| vec![true; c]).collect();
        gates.pseudo_prune(&ones).unwrap();
        let x = Tensor::uniform(&[3, 1, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(gates.predict(&inst, &x).unwrap(), g.predict(&x).unwrap());
    }
}

#[test]
fn shared_shortcut_channel_drops_everywhere() {
    let g = zoo::build("res_tiny", &[4, 4, 6], 10, [1, 8, 8], 0).unwrap();
    let a = identify_groups(&g).unwrap();
    let shared = a.groups.iter().position(|grp| grp.members.len() > 1).unwrap();
    let mut keep: Vec<Vec<bool>> = a.channel_counts().iter().map(|&c| vec![true; c]).collect();
    keep[shared][2] = false;
    let pruned = prune(&g, &a, &keep).unwrap();
    for &m in &a.groups[shared].members {
        assert_eq!(pruned.shape(m)[0], a.groups[shared].channels - 1);
    }
    for &c in &a.groups[shared].consumers {
        assert_eq!(pruned.shape(pruned.node(c).inputs[0])[0], g.shape(g.node(c).inputs[0])[0] - 1);
    }
}

#[test]
fn concat_consumer_reads_both_groups() {
    let g = zoo::build("branch_tiny", &[6, 4, 3, 6, 8], 10, [1, 16, 16], 0).unwrap();
    let a = identify_groups(&g).unwrap();
    let head = g.find("conv_head").unwrap();
    let cat = g.node(head).inputs[0];
    let groups: Vec<usize> = a.groups_in(cat).collect();
    assert_eq!(groups.len(), 2);
    assert_eq!(g.shape(cat)[0], 10);
    assert_ne!(groups[0], groups[1]);
}
