//! Analytic gradients against central finite differences.

mod common;

use common::{encoder_gradient_errors, rel_err, tiny_batch, tiny_config, H};
use safl::encoder::{loss_and_grads, BlockId, FreezeMask, ModelState, TaskMode};
use safl::synthdata::LabeledSequence;
use safl::tensor::{Graph, RngStream, Segment, Tensor, Var};

/// Checks every input of a graph function that ends in a scalar.
fn check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-4, "{name}: input {k} relative error {e:e}");
        worst = worst.max(e);
    }
    worst
}

fn rand(rng: &mut RngStream, shape: Vec<usize>) -> Tensor {
    rng.sample_gaussian(shape, 1.0)
}

/// Projects a non-scalar node onto a fixed random direction.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(RngStream::new(seed, "project").sample_gaussian(shape, 1.0));
    let m = g.mul(x, w).unwrap();
    g.sum(m)
}

#[test]
fn matmul_gradient() {
    let mut rng = RngStream::new(1, "matmul");
    let e = check("matmul", vec![rand(&mut rng, vec![4, 5]), rand(&mut rng, vec![5, 3])], |g, v| {
        let m = g.matmul(v[0], v[1]).unwrap();
        g.sum(m)
    });
    assert!(e < 1e-6, "matmul relative error {e:e}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = RngStream::new(2, "elementwise");
    let (a, b) = (rand(&mut rng, vec![3, 4]), rand(&mut rng, vec![3, 4]));
    check("add", vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        project(g, s, 1)
    });
    check("mul", vec![a.clone(), b.clone()], |g, v| {
        let s = g.mul(v[0], v[1]).unwrap();
        project(g, s, 2)
    });
    check("scale", vec![a.clone()], |g, v| {
        let s = g.scale(v[0], -1.7);
        project(g, s, 3)
    });
    check("gelu", vec![a.clone()], |g, v| {
        let s = g.gelu(v[0]);
        project(g, s, 4)
    });
    check("add_bias", vec![a.clone(), rand(&mut rng, vec![1, 4])], |g, v| {
        let s = g.add_bias(v[0], v[1]).unwrap();
        project(g, s, 5)
    });
    check("l2_norm", vec![a], |g, v| g.l2_norm(v[0]));
}

#[test]
fn softmax_and_layer_norm_gradients() {
    let mut rng = RngStream::new(3, "rows");
    let x = rand(&mut rng, vec![3, 5]);
    check("softmax_rows", vec![x.clone()], |g, v| {
        let s = g.softmax_rows(v[0]).unwrap();
        project(g, s, 6)
    });
    check(
        "layer_norm",
        vec![x, rand(&mut rng, vec![1, 5]), rand(&mut rng, vec![1, 5])],
        |g, v| {
            let s = g.layer_norm(v[0], v[1], v[2]).unwrap();
            project(g, s, 7)
        },
    );
}

#[test]
fn lookup_and_cross_entropy_gradients() {
    let mut rng = RngStream::new(4, "ce");
    check("embedding_lookup", vec![rand(&mut rng, vec![6, 3])], |g, v| {
        let s = g.embedding_lookup(v[0], &[2, 0, 2, 5]).unwrap();
        project(g, s, 8)
    });
    check("cross_entropy_with_logits", vec![rand(&mut rng, vec![4, 5])], |g, v| {
        g.cross_entropy_with_logits(v[0], &[0, 4, 2, 2], &[0.25, 0.5, 0.125, 1.0])
            .unwrap()
    });
}

#[test]
fn attention_gradient() {
    let mut rng = RngStream::new(5, "attn");
    let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
    let inputs = vec![
        rand(&mut rng, vec![7, 6]),
        rand(&mut rng, vec![7, 6]),
        rand(&mut rng, vec![7, 6]),
    ];
    check("attention", inputs, |g, v| {
        let s = g.attention(v[0], v[1], v[2], 2, &segs).unwrap();
        project(g, s, 9)
    });
}

fn encoder_check(task: TaskMode) {
    for (id, e) in encoder_gradient_errors(task) {
        println!("{task:?} {id}: relative error {e:.2e}");
        assert!(e < 1e-4, "{task:?} block {id}: relative error {e:e}");
    }
}

#[test]
fn encoder_token_tagging_gradient_every_block() {
    encoder_check(TaskMode::TokenTagging);
}

#[test]
fn encoder_sequence_classification_gradient_every_block() {
    encoder_check(TaskMode::SequenceClassification);
}

#[test]
fn frozen_blocks_have_no_gradient() {
    let cfg = tiny_config();
    let model = ModelState::init(&cfg, &mut RngStream::new(7, "init")).unwrap();
    let data = tiny_batch();
    let refs: Vec<&LabeledSequence> = data.iter().collect();
    let mask = FreezeMask::classifier_only(cfg.num_layers);
    let (_, grads) = loss_and_grads(&model, &refs, &mask, TaskMode::TokenTagging).unwrap();
    for id in cfg.block_ids() {
        if id == BlockId::Classifier {
            assert!(grads.get(id).iter().any(|g| *g != 0.0));
        } else {
            assert!(grads.get(id).is_empty(), "{id} should be frozen");
        }
    }
}
