#![allow(dead_code)]

use mmode_ssl::{ComputationTape, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn with_value(t: &Tensor, flat: usize, v: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[flat] = v;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares tape gradients against central differences for every input
/// coordinate (or `max_coords` evenly spaced ones per input). Coordinates
/// whose ±h perturbation changes a ReLU/max-pool branch are skipped, since
/// the function is not differentiable across that kink.
pub fn check<F>(inputs: &[Tensor], max_coords: Option<usize>, build: F) -> CheckReport
where
    F: Fn(&mut ComputationTape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> (f64, u64) {
        let mut tape = ComputationTape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let root = build(&mut tape, &ids).unwrap();
        (tape.value(root).item().unwrap(), tape.branch_signature())
    };

    let mut tape = ComputationTape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let root = build(&mut tape, &ids).unwrap();
    let grads = tape.backward(root).unwrap();
    let base_sig = tape.branch_signature();

    let mut report = CheckReport { max_rel_err: 0.0, checked: 0, skipped: 0 };
    for (which, x) in inputs.iter().enumerate() {
        let g = grads.get(ids[which]).expect("gradient for every input");
        let n = x.numel();
        let step = max_coords.map_or(1, |m| (n / m).max(1));
        for flat in (0..n).step_by(step) {
            let mut plus = inputs.to_vec();
            plus[which] = with_value(x, flat, x.data()[flat] + H);
            let mut minus = inputs.to_vec();
            minus[which] = with_value(x, flat, x.data()[flat] - H);
            let (fp, sp) = eval(&plus);
            let (fm, sm) = eval(&minus);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * H);
            // The difference quotient cannot resolve changes below a few
            // ulps of f, so that much disagreement is not counted.
            let resolution = 4.0 * f64::EPSILON * fp.abs().max(fm.abs()) / (2.0 * H);
            let a = g.data()[flat];
            let gap = ((a - numeric).abs() - resolution).max(0.0);
            report.max_rel_err = report.max_rel_err.max(rel_err(a, a + gap.copysign(numeric - a)));
            report.checked += 1;
        }
    }
    report
}

/// `Σ out ⊙ w` for a fixed random weighting, turning any node into a scalar
/// whose gradient exercises every output element.
pub fn weighted_sum(tape: &mut ComputationTape, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut r = rng(seed);
    let w = uniform(&mut r, tape.value(out).shape());
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Finite-difference check of `SSL(projector(encoder(x)))` with respect to
/// the input batch and every encoder and projector parameter, for a small
/// random architecture with `n ≤ 8` pairs and embedding width `d ≤ 8`.
pub fn full_graph_check(seed: u64) -> CheckReport {
    use mmode_ssl::model::{BoundParams, EncoderSpec, InitScheme, Model, ProjectorSpec};
    use mmode_ssl::ssl::{record_on_tape, SslLossConfig, SslMethod};

    let mut r = rng(seed);
    let n = r.gen_range(2..=4);
    let d = r.gen_range(2..=8);
    let method = [SslMethod::SimClr, SslMethod::BarlowTwins, SslMethod::VicReg][seed as usize % 3];
    let c1 = r.gen_range(2..=3);
    let c2 = r.gen_range(2..=4);
    let encoder: EncoderSpec = format!("{c1}:3:1,{c2}:3:1").parse().unwrap();
    let model = Model::new(encoder, ProjectorSpec { layers: r.gen_range(1..=2), width: d }).unwrap();
    let mut params = model.initialize(seed, InitScheme::Random).unwrap();
    params.retain(|g| !matches!(g, mmode_ssl::model::ParamGroup::Head));
    // Non-zero biases so their gradients are exercised away from symmetry.
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
    let mut inputs = vec![uniform(&mut r, &[2 * n, 1, 6, 6])];
    for name in &names {
        let t = params.require(name).unwrap();
        let jitter = uniform(&mut r, t.shape());
        inputs.push(Tensor::from_fn(t.shape(), |i| t.data()[i] + 0.1 * jitter.data()[i]).unwrap());
    }
    let cfg = SslLossConfig::new(method);
    check(&inputs, None, |tape, ids| {
        let bound = BoundParams::from_nodes(names.iter().cloned().zip(ids[1..].iter().copied()));
        let f = model.forward_features(tape, ids[0], &bound)?;
        let z = model.forward_projector(tape, f.features, &bound)?;
        record_on_tape(tape, z, &cfg)
    })
}
