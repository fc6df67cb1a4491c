//! Shared oracles for the integration suites: a central finite-difference
//! gradient checker, an instrumented naive executor that counts work by
//! actually looping over it, and a deterministic random-spec generator.

#![allow(dead_code)]

use std::collections::BTreeMap;

use condenser_forge_core::dsl::{ArchSpec, OpKind, INPUT_ID};
use condenser_forge_core::explore::{mutate, seed_prototype};
use condenser_forge_core::rng::derive_seed_indexed;
use condenser_forge_core::tape::{NodeId, Tape};
use condenser_forge_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Uniform draw bounded away from zero, so piecewise ops (relu, abs, maxpool
/// ties) are sampled away from their kinks.
pub fn kink_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = 0.2 + 1.3 * rng.gen::<f64>();
        if rng.gen::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

/// Strictly positive draw (for tensors that must stay in a clamp's linear
/// region or act as probabilities).
pub fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| 0.2 + 1.3 * rng.gen::<f64>())
}

fn run_loss(inputs: &[Tensor<f64>], build: &mut dyn FnMut(&mut Tape<f64>, &[NodeId]) -> NodeId) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).numel(), 1, "gradcheck loss must be scalar");
    tape.value(loss).data()[0]
}

/// Max relative error between tape backward and central finite differences,
/// over every element of every input.
pub fn fd_max_rel_err(
    inputs: &[Tensor<f64>],
    build: &mut dyn FnMut(&mut Tape<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).numel(), 1, "gradcheck loss must be scalar");
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf gradient missing").to_vec())
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let f_plus = run_loss(&work, build);
            work[i].data_mut()[j] = orig - FD_STEP;
            let f_minus = run_loss(&work, build);
            work[i].data_mut()[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

/// Assert the check across seeds, reporting the worst seed on failure.
pub fn assert_gradcheck(
    op_name: &str,
    seeds: std::ops::Range<u64>,
    mut case: impl FnMut(u64) -> (Vec<Tensor<f64>>, Box<dyn FnMut(&mut Tape<f64>, &[NodeId]) -> NodeId>),
) {
    for seed in seeds {
        let (inputs, mut build) = case(seed);
        let err = fd_max_rel_err(&inputs, &mut build);
        assert!(err < FD_TOL, "{op_name}: seed {seed} max rel err {err:.3e} >= {FD_TOL:.0e}");
    }
}

/// Every op and block under gradient check, as named single-seed runs
/// returning the max relative error. Shared between the per-op test file and
/// the acceptance battery.
pub mod gradcases {
    use super::{fd_max_rel_err, kink_free, positive};
    use condenser_forge_core::blocks::{
        AcondLeaves, AttentionCondenserParams, BnLeaves, DualHeadLeaves, DualHeadParams,
        ResBlockLeaves, ResBlockParams,
    };
    use condenser_forge_core::rng::{derive_seed_indexed, seeded_rng};
    use condenser_forge_core::tape::{NodeId, Tape};
    use condenser_forge_core::tensor::Tensor;
    use condenser_forge_core::train::{discrepancy_loss, one_hot};

    pub struct GradCase {
        pub name: &'static str,
        pub run: fn(u64) -> f64,
    }

    fn rng_for(op: &str, seed: u64) -> rand_chacha::ChaCha8Rng {
        seeded_rng(derive_seed_indexed(0x6AD, op, seed))
    }

    /// Scalar probe loss sum(out * probe); the probe is an input, so its
    /// gradient (the op output itself) is checked for free.
    fn probe_loss(tape: &mut Tape<f64>, out: NodeId, probe: NodeId) -> NodeId {
        let weighted = tape.mul(out, probe).unwrap();
        tape.sum_all(weighted)
    }

    fn check(
        inputs: Vec<Tensor<f64>>,
        mut build: impl FnMut(&mut Tape<f64>, &[NodeId]) -> NodeId,
    ) -> f64 {
        fd_max_rel_err(&inputs, &mut build)
    }

    fn conv_dense_s1(seed: u64) -> f64 {
        let mut rng = rng_for("conv_s1", seed);
        check(
            vec![
                kink_free(&[2, 3, 5, 5], &mut rng),
                kink_free(&[4, 3, 3, 3], &mut rng),
                kink_free(&[4], &mut rng),
                kink_free(&[2, 4, 5, 5], &mut rng),
            ],
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), (1, 1), (1, 1), 1).unwrap();
                probe_loss(tape, y, ids[3])
            },
        )
    }

    fn conv_strided(seed: u64) -> f64 {
        let mut rng = rng_for("conv_s2", seed);
        check(
            vec![
                kink_free(&[1, 2, 6, 5], &mut rng),
                kink_free(&[3, 2, 3, 3], &mut rng),
                kink_free(&[1, 3, 3, 3], &mut rng),
            ],
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], None, (2, 2), (1, 1), 1).unwrap();
                probe_loss(tape, y, ids[2])
            },
        )
    }

    fn conv_depthwise(seed: u64) -> f64 {
        let mut rng = rng_for("conv_dw", seed);
        check(
            vec![
                kink_free(&[2, 3, 4, 6], &mut rng),
                kink_free(&[3, 1, 3, 3], &mut rng),
                kink_free(&[3], &mut rng),
                kink_free(&[2, 3, 4, 6], &mut rng),
            ],
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), (1, 1), (1, 1), 3).unwrap();
                probe_loss(tape, y, ids[3])
            },
        )
    }

    fn fully_connected(seed: u64) -> f64 {
        let mut rng = rng_for("fc", seed);
        check(
            vec![
                kink_free(&[3, 5], &mut rng),
                kink_free(&[4, 5], &mut rng),
                kink_free(&[4], &mut rng),
                kink_free(&[3, 4], &mut rng),
            ],
            |tape, ids| {
                let y = tape.fully_connected(ids[0], ids[1], ids[2]).unwrap();
                probe_loss(tape, y, ids[3])
            },
        )
    }

    fn relu(seed: u64) -> f64 {
        let mut rng = rng_for("relu", seed);
        check(
            vec![kink_free(&[2, 3, 4, 4], &mut rng), kink_free(&[2, 3, 4, 4], &mut rng)],
            |tape, ids| {
                let y = tape.relu(ids[0]);
                probe_loss(tape, y, ids[1])
            },
        )
    }

    fn sigmoid(seed: u64) -> f64 {
        let mut rng = rng_for("sigmoid", seed);
        check(vec![kink_free(&[3, 7], &mut rng), kink_free(&[3, 7], &mut rng)], |tape, ids| {
            let y = tape.sigmoid(ids[0]);
            probe_loss(tape, y, ids[1])
        })
    }

    fn softmax(seed: u64) -> f64 {
        let mut rng = rng_for("softmax", seed);
        check(vec![kink_free(&[4, 5], &mut rng), kink_free(&[4, 5], &mut rng)], |tape, ids| {
            let y = tape.softmax(ids[0]).unwrap();
            probe_loss(tape, y, ids[1])
        })
    }

    fn batchnorm_train(seed: u64) -> f64 {
        let mut rng = rng_for("bn", seed);
        check(
            vec![
                kink_free(&[3, 4, 3, 3], &mut rng),
                positive(&[4], &mut rng),
                kink_free(&[4], &mut rng),
                kink_free(&[3, 4, 3, 3], &mut rng),
            ],
            |tape, ids| {
                let mut rm = vec![0.0f64; 4];
                let mut rv = vec![1.0f64; 4];
                let y = tape.batchnorm_train(ids[0], ids[1], ids[2], &mut rm, &mut rv).unwrap();
                probe_loss(tape, y, ids[3])
            },
        )
    }

    fn max_pool_2(seed: u64) -> f64 {
        let mut rng = rng_for("maxpool", seed);
        check(
            vec![kink_free(&[2, 3, 6, 6], &mut rng), kink_free(&[2, 3, 3, 3], &mut rng)],
            |tape, ids| {
                let y = tape.max_pool(ids[0], (2, 2), (2, 2)).unwrap();
                probe_loss(tape, y, ids[1])
            },
        )
    }

    fn max_pool_3(seed: u64) -> f64 {
        let mut rng = rng_for("maxpool3", seed);
        check(
            vec![kink_free(&[1, 2, 7, 7], &mut rng), kink_free(&[1, 2, 3, 3], &mut rng)],
            |tape, ids| {
                let y = tape.max_pool(ids[0], (3, 3), (2, 2)).unwrap();
                probe_loss(tape, y, ids[1])
            },
        )
    }

    fn global_avg_pool(seed: u64) -> f64 {
        let mut rng = rng_for("gap", seed);
        check(
            vec![kink_free(&[2, 4, 5, 3], &mut rng), kink_free(&[2, 4, 1, 1], &mut rng)],
            |tape, ids| {
                let y = tape.global_avg_pool(ids[0]).unwrap();
                probe_loss(tape, y, ids[1])
            },
        )
    }

    fn aads(seed: u64, k: usize, h: usize, w: usize) -> f64 {
        let mut rng = rng_for(&format!("aads{k}.{h}.{w}"), seed);
        check(
            vec![
                kink_free(&[1, 2, h, w], &mut rng),
                kink_free(&[1, 2, h.div_ceil(2), w.div_ceil(2)], &mut rng),
            ],
            move |tape, ids| {
                let y = tape.blur_down(ids[0], k).unwrap();
                probe_loss(tape, y, ids[1])
            },
        )
    }

    fn aads_k3(seed: u64) -> f64 {
        aads(seed, 3, 6, 6)
    }

    fn aads_k3_odd(seed: u64) -> f64 {
        aads(seed, 3, 7, 5)
    }

    fn aads_k5(seed: u64) -> f64 {
        aads(seed, 5, 8, 8)
    }

    fn aads_k5_odd(seed: u64) -> f64 {
        aads(seed, 5, 9, 7)
    }

    fn upsample(seed: u64, h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> f64 {
        let mut rng = rng_for(&format!("up{h_in}.{w_in}"), seed);
        check(
            vec![
                kink_free(&[2, 2, h_in, w_in], &mut rng),
                kink_free(&[2, 2, h_out, w_out], &mut rng),
            ],
            move |tape, ids| {
                let y = tape.upsample2x(ids[0], h_out, w_out).unwrap();
                probe_loss(tape, y, ids[1])
            },
        )
    }

    fn upsample_even(seed: u64) -> f64 {
        upsample(seed, 3, 3, 6, 6)
    }

    fn upsample_odd(seed: u64) -> f64 {
        upsample(seed, 4, 3, 7, 5)
    }

    fn elementwise(seed: u64) -> f64 {
        let mut rng = rng_for("arith", seed);
        check(
            vec![
                kink_free(&[3, 4], &mut rng),
                kink_free(&[3, 4], &mut rng),
                kink_free(&[3, 4], &mut rng),
                kink_free(&[3, 4], &mut rng),
            ],
            |tape, ids| {
                let s = tape.add(ids[0], ids[1]).unwrap();
                let d = tape.sub(s, ids[2]).unwrap();
                let m = tape.mul(d, ids[0]).unwrap();
                probe_loss(tape, m, ids[3])
            },
        )
    }

    fn channel_scale(seed: u64) -> f64 {
        let mut rng = rng_for("chscale", seed);
        check(
            vec![
                kink_free(&[2, 4, 3, 3], &mut rng),
                kink_free(&[4], &mut rng),
                kink_free(&[2, 4, 3, 3], &mut rng),
            ],
            |tape, ids| {
                let y = tape.channel_scale(ids[0], ids[1]).unwrap();
                probe_loss(tape, y, ids[2])
            },
        )
    }

    fn scale_reshape_sum(seed: u64) -> f64 {
        let mut rng = rng_for("scalech", seed);
        check(vec![kink_free(&[2, 3, 2, 2], &mut rng)], |tape, ids| {
            let y = tape.scale(ids[0], -0.37);
            let y = tape.reshape(y, &[2, 12]).unwrap();
            tape.sum_all(y)
        })
    }

    fn ln_clamped(seed: u64) -> f64 {
        let mut rng = rng_for("ln", seed);
        check(vec![positive(&[3, 5], &mut rng), kink_free(&[3, 5], &mut rng)], |tape, ids| {
            let y = tape.ln_clamped(ids[0], 1e-9);
            probe_loss(tape, y, ids[1])
        })
    }

    fn abs(seed: u64) -> f64 {
        let mut rng = rng_for("abs", seed);
        check(vec![kink_free(&[4, 4], &mut rng), kink_free(&[4, 4], &mut rng)], |tape, ids| {
            let y = tape.abs(ids[0]);
            probe_loss(tape, y, ids[1])
        })
    }

    fn acond(seed: u64, residual: bool) -> f64 {
        let mut rng = rng_for(if residual { "acond_r" } else { "acond" }, seed);
        let (c, e) = (3usize, 2usize);
        check(
            vec![
                kink_free(&[2, c, 6, 6], &mut rng),
                kink_free(&[c, 1, 3, 3], &mut rng),
                kink_free(&[c], &mut rng),
                kink_free(&[e, c, 1, 1], &mut rng),
                kink_free(&[e], &mut rng),
                kink_free(&[c, e, 1, 1], &mut rng),
                kink_free(&[c], &mut rng),
                kink_free(&[c], &mut rng),
                kink_free(&[2, c, 6, 6], &mut rng),
            ],
            move |tape, ids| {
                let mut shell_rng = seeded_rng(0);
                let shell = AttentionCondenserParams::<f64>::init(c, e, residual, &mut shell_rng);
                let lv = AcondLeaves {
                    dw_w: ids[1],
                    dw_b: ids[2],
                    embed_w: ids[3],
                    embed_b: ids[4],
                    expand_w: ids[5],
                    expand_b: ids[6],
                    scale: ids[7],
                };
                let y = shell.forward(tape, ids[0], &lv).unwrap();
                probe_loss(tape, y, ids[8])
            },
        )
    }

    fn acond_residual(seed: u64) -> f64 {
        acond(seed, true)
    }

    fn acond_plain(seed: u64) -> f64 {
        acond(seed, false)
    }

    fn resblock(seed: u64) -> f64 {
        let mut rng = rng_for("resblock", seed);
        let c = 3usize;
        check(
            vec![
                kink_free(&[2, c, 4, 4], &mut rng),
                kink_free(&[c, 1, 3, 3], &mut rng),
                positive(&[c], &mut rng),
                kink_free(&[c], &mut rng),
                kink_free(&[c, c, 1, 1], &mut rng),
                positive(&[c], &mut rng),
                kink_free(&[c], &mut rng),
                kink_free(&[2, c, 4, 4], &mut rng),
            ],
            move |tape, ids| {
                let mut shell_rng = seeded_rng(0);
                let mut shell = ResBlockParams::<f64>::init(c, &mut shell_rng);
                let lv = ResBlockLeaves {
                    dw_w: ids[1],
                    bn1: BnLeaves { gamma: ids[2], beta: ids[3] },
                    pw_w: ids[4],
                    bn2: BnLeaves { gamma: ids[5], beta: ids[6] },
                };
                let y = shell.forward_train(tape, ids[0], &lv).unwrap();
                probe_loss(tape, y, ids[7])
            },
        )
    }

    fn dual_head(seed: u64, lambda_d: f64) -> f64 {
        let mut rng = rng_for(&format!("head{lambda_d}"), seed);
        let (_n, d, k) = (3usize, 5usize, 2usize);
        check(
            vec![
                kink_free(&[3, d], &mut rng),
                kink_free(&[k, d], &mut rng),
                kink_free(&[k], &mut rng),
                kink_free(&[k, d], &mut rng),
                kink_free(&[k], &mut rng),
            ],
            move |tape, ids| {
                let mut shell_rng = seeded_rng(0);
                let shell = DualHeadParams::<f64>::init(d, k, &mut shell_rng);
                let lv = DualHeadLeaves { w1: ids[1], b1: ids[2], w2: ids[3], b2: ids[4] };
                let head = shell.forward(tape, ids[0], &lv).unwrap();
                let y = tape.leaf(one_hot::<f64>(&[0, 1, 0], k));
                discrepancy_loss(tape, &head, y, lambda_d).unwrap()
            },
        )
    }

    fn dual_head_plain(seed: u64) -> f64 {
        dual_head(seed, 0.0)
    }

    fn dual_head_l01(seed: u64) -> f64 {
        dual_head(seed, 0.1)
    }

    fn dual_head_l035(seed: u64) -> f64 {
        dual_head(seed, 0.35)
    }

    pub fn all() -> Vec<GradCase> {
        vec![
            GradCase { name: "conv2d dense s1", run: conv_dense_s1 },
            GradCase { name: "conv2d strided", run: conv_strided },
            GradCase { name: "conv2d depthwise", run: conv_depthwise },
            GradCase { name: "fully connected", run: fully_connected },
            GradCase { name: "relu", run: relu },
            GradCase { name: "sigmoid", run: sigmoid },
            GradCase { name: "softmax", run: softmax },
            GradCase { name: "batchnorm train", run: batchnorm_train },
            GradCase { name: "max_pool 2x2", run: max_pool_2 },
            GradCase { name: "max_pool 3x3 s2", run: max_pool_3 },
            GradCase { name: "global_avg_pool", run: global_avg_pool },
            GradCase { name: "aads k3", run: aads_k3 },
            GradCase { name: "aads k3 odd", run: aads_k3_odd },
            GradCase { name: "aads k5", run: aads_k5 },
            GradCase { name: "aads k5 odd", run: aads_k5_odd },
            GradCase { name: "upsample even", run: upsample_even },
            GradCase { name: "upsample odd", run: upsample_odd },
            GradCase { name: "add/sub/mul", run: elementwise },
            GradCase { name: "channel_scale", run: channel_scale },
            GradCase { name: "scale/reshape/sum", run: scale_reshape_sum },
            GradCase { name: "ln_clamped", run: ln_clamped },
            GradCase { name: "abs", run: abs },
            GradCase { name: "attention condenser", run: acond_residual },
            GradCase { name: "attention condenser plain", run: acond_plain },
            GradCase { name: "resblock train", run: resblock },
            GradCase { name: "dual head loss l=0", run: dual_head_plain },
            GradCase { name: "dual head loss l=0.1", run: dual_head_l01 },
            GradCase { name: "dual head loss l=0.35", run: dual_head_l035 },
        ]
    }

    /// Assert one named case over a seed range.
    pub fn assert_case(name: &str, seeds: std::ops::Range<u64>) {
        let cases = all();
        let case = cases.iter().find(|c| c.name == name).expect("unknown gradcheck case");
        for seed in seeds {
            let err = (case.run)(seed);
            assert!(
                err < super::FD_TOL,
                "{name}: seed {seed} max rel err {err:.3e} >= {:.0e}",
                super::FD_TOL
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Instrumented naive executor
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counted {
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Copy)]
enum NShape {
    S { c: usize, h: usize, w: usize },
    F { d: usize },
}

struct Meter {
    macs: u64,
    flops: u64,
    params: u64,
}

impl Meter {
    /// One multiply-accumulate, counted at the innermost loop position.
    fn mac(&mut self) {
        self.macs += 1;
    }

    /// One non-MAC floating op (activation, pool pick, add, normalize step).
    fn flop(&mut self) {
        self.flops += 1;
    }
}

fn count_conv(
    m: &mut Meter,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    s: usize,
    p: usize,
    g: usize,
    bias: bool,
) -> (usize, usize, usize) {
    let h_out = (h + 2 * p - k) / s + 1;
    let w_out = (w + 2 * p - k) / s + 1;
    let cin_g = cin / g;
    m.params += (cout * cin_g * k * k) as u64;
    if bias {
        m.params += cout as u64;
    }
    // Zero-padding convention: the full k*k window is multiplied at every
    // output position, border or not.
    for _co in 0..cout {
        for _oh in 0..h_out {
            for _ow in 0..w_out {
                for _ci in 0..cin_g {
                    for _kh in 0..k {
                        for _kw in 0..k {
                            m.mac();
                        }
                    }
                }
            }
        }
    }
    (cout, h_out, w_out)
}

fn count_elementwise(m: &mut Meter, n: usize, per_elem: usize) {
    for _ in 0..n {
        for _ in 0..per_elem {
            m.flop();
        }
    }
}

/// Walk the graph like an interpreter would, incrementing a counter for every
/// multiply-accumulate and every per-element op actually performed. Mirrors
/// the published conventions: biases and upsampling are free, activations and
/// pools cost 1 per output element, batchnorm 2 per element.
pub fn run_instrumented(spec: &ArchSpec, flops_per_mac: u64) -> Counted {
    let mut m = Meter { macs: 0, flops: 0, params: 0 };
    let mut shapes: BTreeMap<&str, NShape> = BTreeMap::new();
    let (c, h, w) = spec.input;
    shapes.insert(INPUT_ID, NShape::S { c, h, w });

    let preds_of = |id: &str| -> Vec<&str> {
        spec.edges.iter().filter(|(_, d)| d == id).map(|(s, _)| s.as_str()).collect()
    };

    let mut done = vec![false; spec.nodes.len()];
    loop {
        let mut progressed = false;
        for (i, node) in spec.nodes.iter().enumerate() {
            if done[i] {
                continue;
            }
            let preds = preds_of(&node.id);
            if !preds.iter().all(|p| shapes.contains_key(p)) {
                continue;
            }
            progressed = true;
            done[i] = true;

            let in_shape = shapes[preds[0]];
            // A join materializes as fan_in - 1 elementwise additions.
            if preds.len() > 1 {
                let n = match in_shape {
                    NShape::S { c, h, w } => c * h * w,
                    NShape::F { d } => d,
                };
                for _ in 1..preds.len() {
                    count_elementwise(&mut m, n, 1);
                }
            }

            let out = match node.op {
                OpKind::Conv { k, s, c, g } => {
                    let NShape::S { c: cin, h, w } = in_shape else { unreachable!() };
                    let (c, h, w) = count_conv(&mut m, cin, h, w, c, k, s, k / 2, g, true);
                    NShape::S { c, h, w }
                }
                OpKind::DwConv { k, s } => {
                    let NShape::S { c: cin, h, w } = in_shape else { unreachable!() };
                    let (c, h, w) = count_conv(&mut m, cin, h, w, cin, k, s, k / 2, cin, true);
                    NShape::S { c, h, w }
                }
                OpKind::PwConv { c, s } => {
                    let NShape::S { c: cin, h, w } = in_shape else { unreachable!() };
                    let (c, h, w) = count_conv(&mut m, cin, h, w, c, 1, s, 0, 1, true);
                    NShape::S { c, h, w }
                }
                OpKind::Aads { k } => {
                    let NShape::S { c, h, w } = in_shape else { unreachable!() };
                    let (h_out, w_out) = (h.div_ceil(2), w.div_ceil(2));
                    // Direct form: one k*k blur window per retained position.
                    for _c in 0..c {
                        for _oh in 0..h_out {
                            for _ow in 0..w_out {
                                for _kh in 0..k {
                                    for _kw in 0..k {
                                        m.mac();
                                    }
                                }
                            }
                        }
                    }
                    NShape::S { c, h: h_out, w: w_out }
                }
                OpKind::Acond { embed } => {
                    let NShape::S { c, h, w } = in_shape else { unreachable!() };
                    let e = embed.unwrap_or_else(|| (c / 4).max(2));
                    let (h2, w2) = ((h - 2) / 2 + 1, (w - 2) / 2 + 1);
                    count_elementwise(&mut m, c * h2 * w2, 1); // 2x2 max pool
                    count_conv(&mut m, c, h2, w2, c, 3, 1, 1, c, true);
                    count_conv(&mut m, c, h2, w2, e, 1, 1, 0, 1, true);
                    count_elementwise(&mut m, e * h2 * w2, 1); // relu
                    // nearest upsample: free
                    count_conv(&mut m, e, h, w, c, 1, 1, 0, 1, true);
                    count_elementwise(&mut m, c * h * w, 1); // sigmoid
                    m.params += c as u64; // per-channel scale S
                    count_elementwise(&mut m, c * h * w, 3); // A*S, x*(A*S), +x
                    NShape::S { c, h, w }
                }
                OpKind::ResBlock => {
                    let NShape::S { c, h, w } = in_shape else { unreachable!() };
                    count_conv(&mut m, c, h, w, c, 3, 1, 1, c, false);
                    m.params += 2 * c as u64;
                    count_elementwise(&mut m, c * h * w, 2); // bn1
                    count_elementwise(&mut m, c * h * w, 1); // relu
                    count_conv(&mut m, c, h, w, c, 1, 1, 0, 1, false);
                    m.params += 2 * c as u64;
                    count_elementwise(&mut m, c * h * w, 2); // bn2
                    count_elementwise(&mut m, c * h * w, 1); // residual add
                    NShape::S { c, h, w }
                }
                OpKind::Relu => {
                    let n = match in_shape {
                        NShape::S { c, h, w } => c * h * w,
                        NShape::F { d } => d,
                    };
                    count_elementwise(&mut m, n, 1);
                    in_shape
                }
                OpKind::Bn => {
                    let NShape::S { c, h, w } = in_shape else { unreachable!() };
                    m.params += 2 * c as u64;
                    count_elementwise(&mut m, c * h * w, 2);
                    in_shape
                }
                OpKind::MaxPool { k, s } => {
                    let NShape::S { c, h, w } = in_shape else { unreachable!() };
                    let (h_out, w_out) = ((h - k) / s + 1, (w - k) / s + 1);
                    count_elementwise(&mut m, c * h_out * w_out, 1);
                    NShape::S { c, h: h_out, w: w_out }
                }
                OpKind::Gap => {
                    let NShape::S { c, .. } = in_shape else { unreachable!() };
                    count_elementwise(&mut m, c, 1);
                    NShape::F { d: c }
                }
                OpKind::DualHead { classes } => {
                    let NShape::F { d } = in_shape else { unreachable!() };
                    for _head in 0..2 {
                        m.params += (classes * d + classes) as u64;
                        for _k in 0..classes {
                            for _d in 0..d {
                                m.mac();
                            }
                        }
                        count_elementwise(&mut m, classes, 1); // softmax
                    }
                    count_elementwise(&mut m, classes, 2); // mean aggregation
                    NShape::F { d: classes }
                }
            };
            shapes.insert(&node.id, out);
        }
        if done.iter().all(|&d| d) {
            break;
        }
        assert!(progressed, "instrumented executor stuck: graph not a DAG?");
    }

    Counted { params: m.params, flops: flops_per_mac * m.macs + m.flops }
}

// ---------------------------------------------------------------------------
// Random feasible spec generation
// ---------------------------------------------------------------------------

/// Deterministic stream of distinct shape-valid specs: mutation chains off
/// the seed prototype at two input sizes.
pub fn random_specs(want: usize, master: u64) -> Vec<ArchSpec> {
    let bases = [
        seed_prototype((1, 16, 16)).unwrap(),
        seed_prototype((1, 32, 32)).unwrap(),
        seed_prototype((3, 24, 20)).unwrap(),
    ];
    let mut out: Vec<ArchSpec> = Vec::new();
    let mut chain = 0u64;
    while out.len() < want {
        let mut spec = bases[(chain % bases.len() as u64) as usize].clone();
        for step in 0..4 {
            spec = mutate(&spec, derive_seed_indexed(master, &format!("chain:{chain}"), step));
            if !out.contains(&spec) {
                out.push(spec.clone());
                if out.len() == want {
                    break;
                }
            }
        }
        chain += 1;
        assert!(chain < 10_000, "spec generator failed to diversify");
    }
    out
}
