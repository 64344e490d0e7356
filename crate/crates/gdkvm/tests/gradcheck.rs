//! Finite-difference verification of the reverse-mode gradients, from
//! the isolated gated recurrence up to every parameter of the full model.

use gdkvm::autodiff::{ParamId, Tape, Var};
use gdkvm::memory::UpdateStrategy;
use gdkvm::model::grad_check;
use gdkvm::rng::Rng;
use gdkvm::tensor::{Tensor, Tensor64};

/// Gradient through a 6-step gated recurrence with data-dependent gates:
/// the product-of-transitions structure is the hardest path.
#[test]
fn fd_through_six_step_gated_recurrence() {
    let mut rng = Rng::new(31);
    let (c_v, c_k) = (3, 4);
    let steps = 6;
    let keys: Vec<Tensor64> = (0..steps)
        .map(|_| Tensor64::from_fn(vec![c_k], |_| rng.uniform(-1.0, 1.0)))
        .collect();
    let values: Vec<Tensor64> = (0..steps)
        .map(|_| Tensor64::from_fn(vec![c_v], |_| rng.uniform(-1.0, 1.0)))
        .collect();
    let readout_q = Tensor64::from_fn(vec![c_k], |_| rng.uniform(-1.0, 1.0));

    // parameters: the gate projection (w_alpha, b_alpha, w_beta, b_beta)
    // packed as one vector so the FD loop is a single sweep
    let packed0 = Tensor64::from_fn(vec![2 * (c_v + c_k) + 2], |i| {
        if i == 2 * (c_v + c_k) {
            1.5 // b_alpha
        } else if i == 2 * (c_v + c_k) + 1 {
            0.0 // b_beta
        } else {
            rng.uniform(-0.5, 0.5)
        }
    });

    let build = |tape: &mut Tape<f64>, packed: Var| -> Var {
        let n = c_v + c_k;
        let mut s = tape.constant(Tensor::zeros(vec![c_v, c_k]));
        for t in 0..steps {
            let rm = tape.row_mean(s);
            let cm = tape.col_mean(s);
            let summary = tape.concat_vec(rm, cm);
            // unpack gate parameters through Row on a reshaped view
            let mat = tape.reshape(packed, vec![1, 2 * n + 2]);
            let all = tape.row(mat, 0);
            // alpha = sigmoid(w_a . summary + b_a), via elementwise ops
            let widx =
                |tape: &mut Tape<f64>, all: Var, lo: usize, len: usize| -> Var {
                    let m = tape.reshape(all, vec![2 * n + 2, 1]);
                    let rows: Vec<Var> = (lo..lo + len).map(|i| tape.row(m, i)).collect();
                    let stacked = tape.stack_rows(rows);
                    tape.reshape(stacked, vec![len])
                };
            let w_a = widx(tape, all, 0, n);
            let w_b = widx(tape, all, n, n);
            let b_a = widx(tape, all, 2 * n, 1);
            let b_b = widx(tape, all, 2 * n + 1, 1);
            let da = tape.dot(w_a, summary);
            let za = tape.add(da, b_a);
            let alpha = tape.sigmoid(za);
            let db = tape.dot(w_b, summary);
            let zb = tape.add(db, b_b);
            let beta = tape.sigmoid(zb);

            let kc = tape.constant(keys[t].clone());
            let k_hat = tape.normalize_vec(kc, true);
            let vc = tape.constant(values[t].clone());
            // gated delta rule from primitives
            let sk = tape.matvec(s, k_hat);
            let skk = tape.outer(sk, k_hat);
            let bskk = tape.mul_scalar(beta, skk);
            let erased = tape.sub(s, bskk);
            let decayed = tape.mul_scalar(alpha, erased);
            let o = tape.outer(vc, k_hat);
            let bo = tape.mul_scalar(beta, o);
            s = tape.add(decayed, bo);
        }
        let qc = tape.constant(readout_q.clone());
        let qn = tape.normalize_vec(qc, true);
        let pq = tape.phi(qn);
        let r = tape.matvec(s, pq);
        let sq = tape.mul(r, r);
        tape.mean(sq)
    };

    // analytic gradient
    let mut tape = Tape::new();
    let pv = tape.param(ParamId(0), packed0.clone());
    let loss = build(&mut tape, pv);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(ParamId(0)).unwrap().clone();

    // central differences
    let eval = |x: &Tensor64| -> f64 {
        let mut tape = Tape::new();
        let pv = tape.param(ParamId(0), x.clone());
        let loss = build(&mut tape, pv);
        tape.value(loss).item()
    };
    let h = 1e-5;
    for i in 0..packed0.len() {
        let mut plus = packed0.clone();
        plus.data_mut()[i] += h;
        let mut minus = packed0.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic.data()[i];
        if fd.abs() < 3e-6 && a.abs() < 3e-6 {
            continue;
        }
        let rel = (fd - a).abs() / fd.abs().max(a.abs());
        assert!(rel <= 1e-4, "param {i}: analytic {a}, fd {fd}, rel {rel}");
    }
}

/// Every trainable parameter of the full toy model against central
/// finite differences in 64-bit.
#[test]
fn full_model_gradients_match_finite_differences() {
    let report = grad_check(17, UpdateStrategy::Gdr, 1e-4);
    for row in &report.rows {
        println!(
            "gradcheck {:24} {:5} elems  max rel err {:.3e}  {}",
            row.name,
            row.checked,
            row.max_rel_err,
            if row.pass { "pass" } else { "FAIL" }
        );
    }
    assert!(report.pass, "finite-difference check failed");
}
