//! Built-in oracle and invariant suites: each one checks the shipped
//! solver or metric code against an independent reference and prints a
//! one-line verdict. Any failing suite turns into a nonzero exit.

use anyhow::{bail, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmodal::data::Modality;
use xmodal::eval::Direction;
use xmodal::losses::{cncr_loss, collaborative_loss, reid_loss, total_loss_stage2};
use xmodal::model::{
    analytic_gradients, grad_check, numeric_gradients, BatchPart, ClosureResult, ModelDims,
    PartForward, PartGrads,
};
use xmodal::simplex::{floor_renormalize, one_hot, softmax, softmax_rows};
use xmodal::transport::sinkhorn_plan;
use xmodal::verify;
use xmodal::{LossWeights, ModelParams, TransportConfig};

pub fn run(sabotage_grad: bool) -> Result<()> {
    let mut failures = Vec::new();
    suite("ot_grid_oracle", ot_grid_oracle(), &mut failures);
    suite("metric_oracle", metric_oracle(), &mut failures);
    suite("grad_check", grad_check_suite(sabotage_grad), &mut failures);
    suite("simplex_invariants", simplex_invariants(), &mut failures);
    if failures.is_empty() {
        println!("all suites passed");
        Ok(())
    } else {
        bail!("self-test failures: {}", failures.join(", "))
    }
}

fn suite(name: &'static str, outcome: Result<String>, failures: &mut Vec<&'static str>) {
    match outcome {
        Ok(detail) => println!("{name:<20} pass  ({detail})"),
        Err(err) => {
            println!("{name:<20} FAIL  ({err})");
            failures.push(name);
        }
    }
}

fn random_predictions(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let logits = Array2::from_shape_fn((n, c), |_| rng.gen::<f64>() * 4.0 - 2.0);
    softmax_rows(logits.view())
}

/// Sinkhorn plans on 2×2 instances against the one-parameter grid
/// search over feasible plans.
fn ot_grid_oracle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0001);
    let lambdas = [1.0, 5.0, 25.0];
    let mut worst = 0.0f64;
    for i in 0..20 {
        let p = random_predictions(2, 2, &mut rng);
        let lambda = lambdas[i % lambdas.len()];
        let oracle = verify::grid_search_2x2(p.view(), lambda, 1e-6);
        let cfg = TransportConfig { lambda, tol: 1e-12, max_iter: 50_000 };
        let plan = sinkhorn_plan(p.view(), &cfg)?;
        for (a, b) in plan.plan.iter().zip(oracle.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-4 {
        bail!("max entry error {worst:.1e} exceeds 1e-4");
    }
    Ok(format!("20 instances, max entry error {worst:.1e}"))
}

/// Retrieval metrics against the brute-force rank-counting reference.
fn metric_oracle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0002);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let nq = rng.gen_range(2..=20);
        let ng = rng.gen_range(5..=60);
        let qe = Array2::from_shape_fn((nq, 4), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let ge = Array2::from_shape_fn((ng, 4), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let qids: Vec<usize> = (0..nq).map(|_| rng.gen_range(0..6)).collect();
        let mut gids: Vec<usize> = (0..ng).map(|_| rng.gen_range(0..6)).collect();
        gids[0] = qids[0];
        let report =
            xmodal::eval::evaluate(qe.view(), ge.view(), &qids, &gids, Direction::VisibleToInfrared)?;
        let mut distances = Array2::zeros((nq, ng));
        for qi in 0..nq {
            for gi in 0..ng {
                let d2: f64 =
                    qe.row(qi).iter().zip(ge.row(gi)).map(|(a, b)| (a - b) * (a - b)).sum();
                distances[[qi, gi]] = d2.sqrt();
            }
        }
        let brute = verify::brute_force_metrics(distances.view(), &qids, &gids);
        if report.num_queries != brute.num_queries {
            bail!("evaluated {} queries, reference evaluated {}", report.num_queries, brute.num_queries);
        }
        worst = worst.max((report.map - brute.map).abs());
        worst = worst.max((report.minp - brute.minp).abs());
        for (a, b) in report.cmc.iter().zip(brute.cmc.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-12 {
        bail!("max metric error {worst:.1e} exceeds 1e-12");
    }
    Ok(format!("50 instances, max error {worst:.1e}"))
}

/// Analytic gradients of the full stage-2 composition against central
/// differences. With `sabotage` one analytic coordinate is zeroed, which
/// must trip the check.
fn grad_check_suite(sabotage: bool) -> Result<String> {
    let dims = ModelDims { d_in: 5, hidden: 7, d_emb: 4, c_v: 3, c_r: 3 };
    let params: ModelParams = xmodal::model::ModelParams::init(dims, 0x5e1f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0003);
    let b = 6;
    let x_v = Array2::from_shape_fn((b, 5), |_| rng.gen::<f64>() * 2.0 - 1.0);
    let x_r = Array2::from_shape_fn((b, 5), |_| rng.gen::<f64>() * 2.0 - 1.0);
    let labels_v: Vec<usize> = (0..b).map(|i| i % 3).collect();
    let labels_r: Vec<usize> = (0..b).map(|i| (i + 1) % 3).collect();
    let targets_rv = random_predictions(b, 3, &mut rng);
    let targets_vr = random_predictions(b, 3, &mut rng);
    let neighbors: Vec<Vec<usize>> =
        (0..b).map(|i| vec![(i + 1) % b, (i + 2) % b, (i + 3) % b]).collect();
    let weights = LossWeights { alpha_cncr: 0.3, triplet_margin: 0.3 };
    let parts = vec![
        BatchPart { x: x_v.clone(), head: Modality::Visible },
        BatchPart { x: x_r.clone(), head: Modality::Visible },
        BatchPart { x: x_r, head: Modality::Infrared },
        BatchPart { x: x_v, head: Modality::Infrared },
    ];
    let closure = |fwds: &[PartForward<f64>]| {
        let reid_v =
            reid_loss(fwds[0].embeddings.view(), fwds[0].probs.view(), &labels_v, 0.3)?;
        let l_cv = collaborative_loss(fwds[1].probs.view(), targets_rv.view(), reid_v)?;
        let reid_r =
            reid_loss(fwds[2].embeddings.view(), fwds[2].probs.view(), &labels_r, 0.3)?;
        let l_cr = collaborative_loss(fwds[3].probs.view(), targets_vr.view(), reid_r)?;
        let rv = cncr_loss(fwds[0].probs.view(), fwds[1].probs.view(), &neighbors)?;
        let rr = cncr_loss(fwds[2].probs.view(), fwds[3].probs.view(), &neighbors)?;
        let l_r = rv.value + rr.value;
        let value = total_loss_stage2(&l_cv, &l_cr, l_r, &weights);
        let alpha = weights.alpha_cncr;
        let d0 = &l_cv.reid.grad_logits + &rv.grad_own_logits * alpha;
        let d1 = &l_cv.grad_cross_logits + &rv.grad_counterpart_logits * alpha;
        let d2 = &l_cr.reid.grad_logits + &rr.grad_own_logits * alpha;
        let d3 = &l_cr.grad_cross_logits + &rr.grad_counterpart_logits * alpha;
        Ok(ClosureResult {
            value,
            part_grads: vec![
                PartGrads { d_logits: Some(d0), d_embeddings: Some(l_cv.reid.grad_embeddings) },
                PartGrads { d_logits: Some(d1), d_embeddings: None },
                PartGrads { d_logits: Some(d2), d_embeddings: Some(l_cr.reid.grad_embeddings) },
                PartGrads { d_logits: Some(d3), d_embeddings: None },
            ],
        })
    };
    let step = 1e-5;
    let max_err = if sabotage {
        let (_, grads) = analytic_gradients(&params, &parts, &closure)?;
        let mut flat = grads.flatten();
        flat[0] = 0.0;
        let numeric = numeric_gradients(&params, &parts, &closure, step)?;
        let mut worst = 0.0f64;
        for (a, n) in flat.iter().zip(numeric.iter()) {
            worst = worst.max((a - n).abs() / (a.abs() + n.abs()).max(1e-8));
        }
        worst
    } else {
        grad_check(&params, &parts, &closure, step)?
    };
    if max_err > 1e-4 {
        bail!("max relative error {max_err:.1e} exceeds 1e-4");
    }
    Ok(format!("max relative error {max_err:.1e}"))
}

/// Simplex closure of softmax and renormalization, the refinement
/// contraction identity, and Sinkhorn marginal feasibility.
fn simplex_invariants() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0004);
    for _ in 0..100 {
        let logits = Array1::from_shape_fn(6, |_| rng.gen::<f64>() * 8.0 - 4.0);
        let p = softmax(logits.view());
        if (p.sum() - 1.0).abs() > 1e-12 || p.iter().any(|&x| x < 0.0) {
            bail!("softmax left the simplex");
        }
    }
    for _ in 0..100 {
        let q = Array1::from_shape_fn(5, |i| if i % 2 == 0 { rng.gen::<f64>() } else { 0.0 });
        let p = floor_renormalize(q.view(), 1e-12);
        if (p.sum() - 1.0).abs() > 1e-12 {
            bail!("floor renormalization missed the simplex");
        }
    }
    let gamma = 0.25;
    for _ in 0..200 {
        let c = 5;
        let y = one_hot::<f64>(rng.gen_range(0..c), c);
        let logits = Array1::from_shape_fn(c, |_| rng.gen::<f64>() * 4.0 - 2.0);
        let m = softmax(logits.view());
        let refined = &y * (1.0 - gamma) + &m * gamma;
        let lhs: f64 = refined.iter().zip(m.iter()).map(|(a, b)| (a - b).abs()).sum();
        let rhs: f64 =
            (1.0 - gamma) * y.iter().zip(m.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        if (lhs - rhs).abs() > 1e-12 {
            bail!("contraction identity off by {:.1e}", (lhs - rhs).abs());
        }
    }
    let mut worst = 0.0f64;
    for i in 0..20 {
        let n = rng.gen_range(2..=16);
        let c = rng.gen_range(2..=6);
        let p = random_predictions(n, c, &mut rng);
        let lambda = if i % 2 == 0 { 1.0 } else { 25.0 };
        let plan =
            sinkhorn_plan(p.view(), &TransportConfig { lambda, tol: 1e-7, max_iter: 100_000 })?;
        worst = worst.max(plan.marginal_residual());
        if (plan.plan.sum() - 1.0).abs() > 1e-9 {
            bail!("plan mass drifted from 1");
        }
    }
    if worst > 1e-6 {
        bail!("marginal residual {worst:.1e} exceeds 1e-6");
    }
    Ok(format!("softmax, renormalize, contraction, marginals; max residual {worst:.1e}"))
}
