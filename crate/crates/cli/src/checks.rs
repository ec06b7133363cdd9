//! The check command: numeric invariant suite over a fresh or loaded model.
//! Each check prints one `check <name>: ok|FAIL` line; any failure makes the
//! command exit nonzero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use puflow::diffcore::{NodeId, Tape, Tensor};
use puflow::geometry::knn_graph;
use puflow::model::Model;
use puflow::training::{pair_loss, PatchPair};
use puflow::Scalar;

use crate::commands::{load_or_fresh, random_patch};
use crate::{CheckArgs, CliError};

fn input_points(tape: &mut Tape<Scalar>, pts: &[[Scalar; 3]]) -> Result<NodeId, CliError> {
    let flat: Vec<Scalar> = pts.iter().flatten().copied().collect();
    Ok(tape.input(Tensor::from_vec(pts.len(), 3, flat)?)?)
}

fn det3(j: &[[f64; 3]; 3]) -> f64 {
    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
}

/// Forward then inverse on the same conditions; reports the worst
/// coordinate error over a few random patches.
fn flow_inversion(model: &Model<Scalar>, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let pts = random_patch(32, rng);
        let mut tape = Tape::new();
        let x = input_points(&mut tape, &pts).map_err(|e| e.message().to_string())?;
        let cond = model
            .conditions(&mut tape, x, &pts)
            .map_err(|e| e.to_string())?;
        let pass = model
            .flow
            .forward(&mut tape, &model.store, x, &cond)
            .map_err(|e| e.to_string())?;
        let back = model
            .flow
            .inverse(&mut tape, &model.store, pass.z, &cond)
            .map_err(|e| e.to_string())?;
        let orig = tape.value(x);
        let round = tape.value(back);
        for i in 0..orig.rows() {
            for c in 0..3 {
                worst = worst.max((orig.at(i, c) - round.at(i, c)).abs());
            }
        }
    }
    if worst <= 1e-6 {
        Ok(format!("max round-trip error {worst:.3e}"))
    } else {
        Err(format!("round-trip error {worst:.3e} exceeds 1e-6"))
    }
}

/// Analytic per-point log-det against the numerical 3x3 Jacobian with the
/// conditioning features frozen.
fn log_det_oracle(model: &Model<Scalar>, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let pts = random_patch(24, rng);
    let mut tape = Tape::new();
    let x = input_points(&mut tape, &pts).map_err(|e| e.message().to_string())?;
    let cond = model
        .conditions(&mut tape, x, &pts)
        .map_err(|e| e.to_string())?;
    let pass = model
        .flow
        .forward(&mut tape, &model.store, x, &cond)
        .map_err(|e| e.to_string())?;
    let analytic = tape.value(pass.log_det).clone();
    let cond_vals: Vec<Tensor<Scalar>> = cond.iter().map(|&c| tape.value(c).clone()).collect();

    let z_of = |pts: &[[Scalar; 3]]| -> Result<Tensor<Scalar>, String> {
        let mut t = Tape::new();
        let xn = input_points(&mut t, pts).map_err(|e| e.message().to_string())?;
        let mut frozen = Vec::with_capacity(cond_vals.len());
        for cv in &cond_vals {
            frozen.push(t.input(cv.clone()).map_err(|e| e.to_string())?);
        }
        let p = model
            .flow
            .forward(&mut t, &model.store, xn, &frozen)
            .map_err(|e| e.to_string())?;
        Ok(t.value(p.z).clone())
    };

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..4 {
        let mut jac = [[0.0f64; 3]; 3];
        for c in 0..3 {
            let mut plus = pts.clone();
            let mut minus = pts.clone();
            plus[i][c] += h;
            minus[i][c] -= h;
            let zp = z_of(&plus)?;
            let zm = z_of(&minus)?;
            for r in 0..3 {
                jac[r][c] = (zp.at(i, r) - zm.at(i, r)) / (2.0 * h);
            }
        }
        let numeric = det3(&jac).abs().ln();
        let exact = analytic.at(i, 0);
        let rel = (numeric - exact).abs() / exact.abs().max(1.0);
        worst = worst.max(rel);
    }
    if worst <= 1e-4 {
        Ok(format!("max relative error {worst:.3e}"))
    } else {
        Err(format!("relative error {worst:.3e} exceeds 1e-4"))
    }
}

/// Central finite differences on a spread of parameter coordinates against
/// the recorded gradient of the full loss.
fn gradient_probe(model: &mut Model<Scalar>, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let k = model.cfg.interp.k.max(model.cfg.embed.k);
    let n = k + 8;
    let pair = PatchPair {
        sparse: random_patch(n, rng),
        dense: random_patch(n * model.ratio(), rng),
        center: [0.0; 3],
        scale: 1.0,
    };
    let (alpha, beta) = (1e-4, 5e-2);
    let loss_value = |m: &Model<Scalar>| -> Result<f64, String> {
        let (tape, loss, _, _) = pair_loss(m, &pair, alpha, beta).map_err(|e| e.to_string())?;
        Ok(tape.value(loss).item())
    };

    model.store.zero_grads();
    let (tape, loss, _, _) = pair_loss(model, &pair, alpha, beta).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    grads
        .accumulate_params(&tape, &mut model.store)
        .map_err(|e| e.to_string())?;

    // Every n-th coordinate across the whole parameter table.
    let coords: Vec<(usize, usize, usize)> = {
        let sizes: Vec<(usize, usize)> = model
            .store
            .iter()
            .map(|(_, p)| (p.value.rows(), p.value.cols()))
            .collect();
        let total: usize = sizes.iter().map(|(r, c)| r * c).sum();
        let stride = (total / 24).max(1);
        let mut picked = Vec::new();
        let mut flat = 0usize;
        for (pi, (rows, cols)) in sizes.iter().enumerate() {
            for r in 0..*rows {
                for c in 0..*cols {
                    if flat % stride == 0 {
                        picked.push((pi, r, c));
                    }
                    flat += 1;
                }
            }
        }
        picked
    };

    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(pi, r, c)| model.store.grad(ids[pi]).at(r, c))
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (&(pi, r, c), &a) in coords.iter().zip(&analytic) {
        let id = ids[pi];
        let old = model.store.value(id).at(r, c);
        model.store.value_mut(id).set(r, c, old + h);
        let up = loss_value(model)?;
        model.store.value_mut(id).set(r, c, old - h);
        let down = loss_value(model)?;
        model.store.value_mut(id).set(r, c, old);
        let fd = (up - down) / (2.0 * h);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    if worst <= 1e-3 {
        Ok(format!(
            "{} coordinates, max relative error {worst:.3e}",
            coords.len()
        ))
    } else {
        Err(format!("relative error {worst:.3e} exceeds 1e-3"))
    }
}

/// Interpolation weights must be simplex rows: nonnegative, summing to one.
fn weight_simplex(model: &Model<Scalar>, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let pts = random_patch(40, rng);
    let mut tape = Tape::new();
    let x = input_points(&mut tape, &pts).map_err(|e| e.message().to_string())?;
    let graph = knn_graph(&pts, model.cfg.interp.k).map_err(|e| e.to_string())?;
    let w = model
        .interp
        .weights(&mut tape, &model.store, x, &graph)
        .map_err(|e| e.to_string())?;
    let w = tape.value(w);
    let mut worst_sum = 0.0f64;
    let mut most_negative = 0.0f64;
    for i in 0..w.rows() {
        let mut sum = 0.0;
        for j in 0..w.cols() {
            let v = w.at(i, j);
            sum += v;
            most_negative = most_negative.min(v);
        }
        worst_sum = worst_sum.max((sum - 1.0).abs());
    }
    if worst_sum <= 1e-9 && most_negative >= -1e-12 {
        Ok(format!(
            "{} rows, sum error {worst_sum:.3e}, min entry {most_negative:.3e}",
            w.rows()
        ))
    } else {
        Err(format!(
            "sum error {worst_sum:.3e} or negative entry {most_negative:.3e}"
        ))
    }
}

/// Each patch must upsample to exactly ratio times its size.
fn output_cardinality(model: &Model<Scalar>, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let pts = random_patch(40, rng);
    let out = model.upsample_patch(&pts).map_err(|e| e.to_string())?;
    let want = pts.len() * model.ratio();
    if out.len() == want {
        Ok(format!("{} -> {} points", pts.len(), out.len()))
    } else {
        Err(format!("{} points, wanted {want}", out.len()))
    }
}

pub fn run(args: &CheckArgs) -> Result<(), CliError> {
    let mut model = load_or_fresh(args.checkpoint.as_ref(), args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut failed = 0usize;
    let mut total = 0usize;
    let mut report = |name: &str, result: Result<String, String>| {
        total += 1;
        match result {
            Ok(detail) => println!("check {name}: ok ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("check {name}: FAIL ({detail})");
            }
        }
    };
    report("flow_inversion", flow_inversion(&model, &mut rng));
    report("log_det_oracle", log_det_oracle(&model, &mut rng));
    report("gradient_probe", gradient_probe(&mut model, &mut rng));
    report("weight_simplex", weight_simplex(&model, &mut rng));
    report("output_cardinality", output_cardinality(&model, &mut rng));
    if failed > 0 {
        Err(CliError::Numeric(format!(
            "{failed} of {total} checks failed"
        )))
    } else {
        Ok(())
    }
}
