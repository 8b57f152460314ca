//! Central-difference checks of every differentiable primitive and of the
//! three SSL objectives, plus direct-formula oracles for the loss values.

mod common;

use common::{check, rng, uniform, weighted_sum};
use mmode_ssl::ssl::{self, EmbeddingBatch, SslLossConfig, SslMethod, VicRegParams};
use mmode_ssl::Tensor;

#[test]
fn matmul_gradient() {
    let mut r = rng(1);
    let inputs = [uniform(&mut r, &[5, 4]), uniform(&mut r, &[4, 3])];
    let rep = check(&inputs, None, |t, x| {
        let y = t.matmul(x[0], x[1])?;
        weighted_sum(t, y, 11)
    });
    assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
}

#[test]
fn conv2d_gradient() {
    let mut r = rng(2);
    let inputs = [
        uniform(&mut r, &[2, 2, 6, 5]),
        uniform(&mut r, &[3, 2, 3, 3]),
        uniform(&mut r, &[3]),
    ];
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let rep = check(&inputs, None, |t, x| {
            let y = t.conv2d(x[0], x[1], Some(x[2]), stride, pad)?;
            weighted_sum(t, y, 12)
        });
        assert!(rep.max_rel_err < 1e-6, "stride {stride} pad {pad}: {}", rep.max_rel_err);
    }
}

#[test]
fn elementwise_and_reduction_gradients() {
    let mut r = rng(3);
    let inputs = [uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4]), uniform(&mut r, &[4])];
    let rep = check(&inputs, None, |t, x| {
        let s = t.add(x[0], x[1])?;
        let p = t.mul(s, x[0])?;
        let b = t.add_bias(p, x[2])?;
        let sg = t.sigmoid(b);
        let rl = t.relu(x[1]);
        let sc = t.scale(rl, -1.5)?;
        let m = t.mean(sc)?;
        let w = weighted_sum(t, sg, 13)?;
        t.add(w, m)
    });
    assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
    assert!(rep.skipped == 0);
}

#[test]
fn pooling_and_batch_norm_gradients() {
    let mut r = rng(4);
    let inputs = [uniform(&mut r, &[2, 3, 5, 4]), uniform(&mut r, &[6, 3])];
    let rep = check(&inputs, None, |t, x| {
        let mp = t.max_pool2(x[0])?;
        let gp = t.global_avg_pool(mp)?;
        let a = weighted_sum(t, gp, 14)?;
        let bn = t.batch_norm(x[1], 1e-4)?;
        let rs = t.reshape(bn, &[18])?;
        let b = weighted_sum(t, rs, 15)?;
        t.add(a, b)
    });
    assert!(rep.max_rel_err < 1e-4, "{}", rep.max_rel_err);
}

#[test]
fn bce_gradient_through_sigmoid_head() {
    let mut r = rng(5);
    let inputs = [uniform(&mut r, &[6, 4]), uniform(&mut r, &[4, 1]), uniform(&mut r, &[1])];
    let targets = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let rep = check(&inputs, None, |t, x| {
        let z = t.matmul(x[0], x[1])?;
        let z = t.add_bias(z, x[2])?;
        t.bce_with_logits(z, &targets)
    });
    assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
}

// ---------------------------------------------------------------------------
// SSL objectives

fn loss_gradient_check(method: SslMethod, n: usize, d: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[2 * n, d])];
    let cfg = SslLossConfig::new(method);
    check(&inputs, None, |t, x| ssl::record_on_tape(t, x[0], &cfg)).max_rel_err
}

#[test]
fn simclr_gradient() {
    assert!(loss_gradient_check(SslMethod::SimClr, 4, 8, 21) < 1e-4);
}

#[test]
fn barlow_twins_gradient() {
    assert!(loss_gradient_check(SslMethod::BarlowTwins, 6, 3, 22) < 1e-4);
}

#[test]
fn vicreg_gradient() {
    assert!(loss_gradient_check(SslMethod::VicReg, 6, 4, 23) < 1e-4);
}

/// Barlow Twins written straight from its definition with explicit loops.
fn barlow_oracle(a: &Tensor, b: &Tensor, lambda: f64, eps: f64) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let standardise = |z: &Tensor| -> Vec<Vec<f64>> {
        (0..d)
            .map(|j| {
                let col: Vec<f64> = (0..n).map(|i| z.at(&[i, j])).collect();
                let mu = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
                col.iter().map(|v| (v - mu) / (var + eps).sqrt()).collect()
            })
            .collect()
    };
    let (sa, sb) = (standardise(a), standardise(b));
    let mut loss = 0.0;
    for i in 0..d {
        for j in 0..d {
            let c: f64 = (0..n).map(|k| sa[i][k] * sb[j][k]).sum::<f64>() / n as f64;
            loss += if i == j { (1.0 - c).powi(2) } else { lambda * c * c };
        }
    }
    loss
}

fn vicreg_oracle(a: &Tensor, b: &Tensor, p: &VicRegParams) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let mut inv = 0.0;
    for i in 0..n {
        for j in 0..d {
            inv += (a.at(&[i, j]) - b.at(&[i, j])).powi(2);
        }
    }
    inv /= n as f64;
    let reg = |z: &Tensor| -> (f64, f64) {
        let mu: Vec<f64> = (0..d).map(|j| (0..n).map(|i| z.at(&[i, j])).sum::<f64>() / n as f64).collect();
        let cov = |j: usize, k: usize| -> f64 {
            (0..n).map(|i| (z.at(&[i, j]) - mu[j]) * (z.at(&[i, k]) - mu[k])).sum::<f64>() / (n - 1) as f64
        };
        let v = (0..d).map(|j| (p.gamma - (cov(j, j) + p.eps).sqrt()).max(0.0)).sum::<f64>() / d as f64;
        let mut c = 0.0;
        for j in 0..d {
            for k in 0..d {
                if j != k {
                    c += cov(j, k).powi(2);
                }
            }
        }
        (v, c / d as f64)
    };
    let (va, ca) = reg(a);
    let (vb, cb) = reg(b);
    p.lambda * inv + p.mu * (va + vb) + p.nu * (ca + cb)
}

fn simclr_oracle(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let rows: Vec<Vec<f64>> = (0..2 * n)
        .map(|i| {
            let src = if i < n { (a, i) } else { (b, i - n) };
            (0..d).map(|j| src.0.at(&[src.1, j])).collect()
        })
        .collect();
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (nx * ny)
    };
    let mut total = 0.0;
    for i in 0..2 * n {
        let p = (i + n) % (2 * n);
        let num = (cos(&rows[i], &rows[p]) / tau).exp();
        let den: f64 = (0..2 * n).filter(|&k| k != i).map(|k| (cos(&rows[i], &rows[k]) / tau).exp()).sum();
        total -= (num / den).ln();
    }
    total / (2 * n) as f64
}

#[test]
fn loss_values_match_direct_formulas() {
    let mut r = rng(30);
    for trial in 0..10 {
        let a = uniform(&mut r, &[6, 3]);
        let b = uniform(&mut r, &[6, 3]);
        let e = EmbeddingBatch::new(a.clone(), b.clone()).unwrap();
        let bt = ssl::barlow_twins_loss(&e, 0.005, 1e-4).unwrap().value;
        assert!((bt - barlow_oracle(&a, &b, 0.005, 1e-4)).abs() < 1e-10, "trial {trial}");

        let a4 = uniform(&mut r, &[6, 4]);
        let b4 = uniform(&mut r, &[6, 4]);
        let e4 = EmbeddingBatch::new(a4.clone(), b4.clone()).unwrap();
        let p = VicRegParams::from(&SslLossConfig::new(SslMethod::VicReg));
        let vic = ssl::vicreg_loss(&e4, &p).unwrap().0.value;
        assert!((vic - vicreg_oracle(&a4, &b4, &p)).abs() < 1e-10, "trial {trial}");

        let sim = ssl::simclr_loss(&e4, 0.1, 1e-8).unwrap().value;
        assert!((sim - simclr_oracle(&a4, &b4, 0.1)).abs() < 1e-10, "trial {trial}");
    }
}
