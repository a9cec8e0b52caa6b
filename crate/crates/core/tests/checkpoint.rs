use std::path::Path;

use autobot_core::bottleneck;
use autobot_core::checkpoint::Checkpoint;
use autobot_core::graph::{identify_groups, zoo};
use autobot_core::mask::{get_pruning_mask, MaskSearchParams};
use autobot_core::flops::FlopsModel;
use autobot_core::prune::prune;
use autobot_core::Error;

// Independent reader for the on-disk layout.
struct Parsed {
    spec: serde_json::Value,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn parse(b: &[u8]) -> Parsed {
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = &b[pos..pos + n];
        pos += n;
        s
    };
    assert_eq!(take(4), b"ABOT");
    assert_eq!(u32::from_le_bytes(take(4).try_into().unwrap()), 1);
    let len = u64::from_le_bytes(take(8).try_into().unwrap()) as usize;
    let spec = serde_json::from_slice(take(len)).unwrap();
    let count = u64::from_le_bytes(take(8).try_into().unwrap());
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
        let name = String::from_utf8(take(nlen).to_vec()).unwrap();
        let ndim = u32::from_le_bytes(take(4).try_into().unwrap()) as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| u64::from_le_bytes(take(8).try_into().unwrap()) as usize).collect();
        let n: usize = dims.iter().product();
        let data = take(4 * n).chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, dims, data));
    }
    assert_eq!(pos, b.len());
    Parsed { spec, tensors }
}

#[test]
fn layout_matches_format() {
    let g = zoo::build("branch_tiny", &[6, 4, 3, 5, 8], 10, [1, 28, 28], 3).unwrap();
    let bytes = Checkpoint::new(g.clone()).to_bytes().unwrap();
    let p = parse(&bytes);
    assert_eq!(p.spec["arch"], "branch_tiny");
    assert_eq!(p.spec["nodes"][1]["op"]["kind"], "conv2d");
    assert!(p.spec.get("meta").is_none());
    let expect = g.named_tensors();
    assert_eq!(p.tensors.len(), expect.len());
    for ((name, dims, data), (en, et)) in p.tensors.iter().zip(expect) {
        assert_eq!(name, &en);
        assert_eq!(dims.as_slice(), et.shape());
        assert_eq!(data.as_slice(), et.data());
    }
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for arch in ["vgg_tiny", "res_tiny", "branch_tiny"] {
        let g = zoo::build(arch, &zoo::default_widths(arch).unwrap(), 10, [1, 28, 28], 5).unwrap();
        let a = identify_groups(&g).unwrap();
        let (inst, gates) = bottleneck::inject(&g, &a, 0.9).unwrap();
        let ck = Checkpoint { graph: inst, gates: Some(gates) };
        let path = dir.path().join(format!("{arch}.abot"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        assert_eq!(back.gates.unwrap().lambdas(), ck.gates.unwrap().lambdas());
        assert!(parse(&std::fs::read(&path).unwrap()).tensors.iter().any(|t| t.0 == "bottleneck.psi.1"));
    }
}

#[test]
fn pruned_checkpoint_embeds_mask() {
    let g = zoo::build("vgg_tiny", &[8, 16, 16], 10, [1, 28, 28], 0).unwrap();
    let a = identify_groups(&g).unwrap();
    let model = FlopsModel::new(&g, &a).unwrap();
    let lambdas: Vec<Vec<f32>> = model.channels().iter().map(|&c| (0..c).map(|i| (i as f32 + 0.5) / c as f32).collect()).collect();
    let mask = get_pruning_mask(&lambdas, &model, &MaskSearchParams::from_ratios(&model, 0.5, 0.02).unwrap()).unwrap();
    let mut pruned = prune(&g, &a, &mask.keep()).unwrap();
    pruned.meta = serde_json::to_value(&mask).unwrap();
    let bytes = Checkpoint::new(pruned).to_bytes().unwrap();
    let p = parse(&bytes);
    assert_eq!(p.spec["meta"]["met_epsilon"], serde_json::Value::Bool(mask.met_epsilon));
    let back = Checkpoint::from_bytes(Path::new("m"), &bytes).unwrap();
    assert_eq!(back.graph.meta, serde_json::to_value(&mask).unwrap());
}

#[test]
fn corrupt_bytes_are_located() {
    let g = zoo::build("vgg_tiny", &[4, 4], 10, [1, 28, 28], 0).unwrap();
    let bytes = Checkpoint::new(g).to_bytes().unwrap();
    let offset = |b: &[u8]| match Checkpoint::from_bytes(Path::new("ck.abot"), b) {
        Err(Error::Format { path, offset, .. }) => {
            assert_eq!(path, Path::new("ck.abot"));
            offset
        }
        Err(e) => panic!("unexpected {e}"),
        Ok(_) => panic!("accepted corrupt bytes"),
    };
    let mut b = bytes.clone();
    b[0] = b'X';
    assert_eq!(offset(&b), 0);
    let mut b = bytes.clone();
    b[4] = 2;
    assert_eq!(offset(&b), 4);
    assert!(offset(&bytes[..bytes.len() - 3]) > 16);
    let mut b = bytes.clone();
    b.push(0);
    assert_eq!(offset(&b), bytes.len() as u64);
}
