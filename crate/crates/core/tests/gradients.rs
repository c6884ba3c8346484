use chamferlab_core::chamfer::chamfer_points;
use chamferlab_core::datagen::ExemplarSet;
use chamferlab_core::diffusion::{ddim_x0_ab, make_schedule, DenoiserConfig, DenoiserModel, ScheduleKind};
use chamferlab_core::featspace::Projector;
use chamferlab_core::finetune::{refl_loss_and_grads, ReflTarget};
use chamferlab_core::numkit::{gauss, Matrix, RngStream, Tape};
use proptest::prelude::*;

fn fd(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let h = 1e-6;
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.as_mut_slice()[i] += h;
        m.as_mut_slice()[i] -= h;
        g.as_mut_slice()[i] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.sub(b).unwrap().frobenius() <= tol * b.frobenius().max(1.0)
}

/// Scalar built from every differentiable tape primitive.
fn expression(tape: &mut Tape, a: &Matrix, w: &Matrix, bias: &Matrix, table: &Matrix, labels: &[usize]) -> (f64, Vec<Matrix>) {
    let va = tape.leaf(a.clone());
    let vw = tape.leaf(w.clone());
    let vb = tape.leaf(bias.clone());
    let vt = tape.leaf(table.clone());
    let h = tape.matmul(va, vw).unwrap();
    let h = tape.add_row(h, vb).unwrap();
    let s = tape.silu(h);
    let t = tape.tanh(h);
    let m = tape.mul(s, t).unwrap();
    let idx: Vec<usize> = (0..a.rows()).map(|r| r % table.rows()).collect();
    let g = tape.gather_rows(vt, &idx).unwrap();
    let cat = tape.hcat(&[m, g]).unwrap();
    let sq = tape.square(cat);
    let sub = tape.sub(sq, cat).unwrap();
    let sc = tape.scale(sub, 0.3);
    let mean = tape.mean(sc);
    let ce = tape.cross_entropy(cat, labels).unwrap();
    let out = tape.add(mean, ce).unwrap();
    let value = tape.value(out).item().unwrap();
    (value, tape.grad(out, &[va, vw, vb, vt]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tape_matches_finite_differences(seed in any::<u64>(), rows in 1usize..5, din in 1usize..4, dout in 1usize..4) {
        let mut rng = RngStream::new(seed);
        let a = gauss(&mut rng, rows, din);
        let w = gauss(&mut rng, din, dout);
        let bias = gauss(&mut rng, 1, dout);
        let table = gauss(&mut rng, 3, 2);
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(dout + 2)).collect();
        let (_, grads) = expression(&mut Tape::new(), &a, &w, &bias, &table, &labels);
        let f = |a: &Matrix, w: &Matrix, b: &Matrix, t: &Matrix| expression(&mut Tape::new(), a, w, b, t, &labels).0;
        prop_assert!(close(&grads[0], &fd(&a, |x| f(x, &w, &bias, &table)), 1e-6));
        prop_assert!(close(&grads[1], &fd(&w, |x| f(&a, x, &bias, &table)), 1e-6));
        prop_assert!(close(&grads[2], &fd(&bias, |x| f(&a, &w, x, &table)), 1e-6));
        prop_assert!(close(&grads[3], &fd(&table, |x| f(&a, &w, &bias, x)), 1e-6));
    }
}

fn tie_free(x: &Matrix, y: &Matrix) -> bool {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let side = |a: &Matrix, b: &Matrix| {
        a.iter_rows().all(|p| {
            let mut d: Vec<f64> = b.iter_rows().map(|q| d2(p, q)).collect();
            d.sort_by(f64::total_cmp);
            d.len() < 2 || d[1] - d[0] > 1e-3
        })
    };
    side(x, y) && side(y, x)
}

#[test]
fn refl_gradient_matches_finite_differences() {
    let mut rng = RngStream::new(3);
    let mut checked = 0;
    while checked < 10 {
        let mut dc = DenoiserConfig::new(2, 2, 8);
        dc.hidden = vec![2];
        dc.time_dim = 2;
        dc.class_dim = 2;
        let mut model = DenoiserModel::new(dc, &mut rng).unwrap();
        for p in model.params_mut() {
            let noise = gauss(&mut rng, p.rows(), p.cols()).scale(0.7);
            p.axpy(1.0, &noise).unwrap();
        }
        let sched = make_schedule(8, 1e-3, 0.3, ScheduleKind::Linear).unwrap();
        let labels = [0, 0, 1, 1, 1];
        let x_t = gauss(&mut rng, labels.len(), 2);
        let t = 1 + rng.below(8);
        let omega = if checked % 2 == 0 { 1.0 } else { 3.0 };
        let ex = ExemplarSet { per_class: vec![gauss(&mut rng, 3, 2), gauss(&mut rng, 4, 2)], k: 3 };
        let proj = Projector::identity(2);
        let target = ReflTarget::new(&ex, &proj).unwrap();

        // loss recomputed without the tape
        let loss_of = |m: &DenoiserModel| -> f64 {
            let c = m.predict(&x_t, t, &labels).unwrap();
            let eps = if omega == 1.0 {
                c
            } else {
                let u = m.predict(&x_t, t, &[m.null_token(); 5]).unwrap();
                let mut e = c.scale(omega);
                e.axpy(1.0 - omega, &u).unwrap();
                e
            };
            let x0 = ddim_x0_ab(&x_t, &eps, sched.alpha_bar(t)).unwrap();
            let mut total = 0.0;
            for (c, rows) in [(0, vec![0, 1]), (1, vec![2, 3, 4])] {
                total += chamfer_points(&ex.per_class[c], &x0.select_rows(&rows)).unwrap().total;
            }
            0.5 * total
        };
        let x0 = {
            let c = model.predict(&x_t, t, &labels).unwrap();
            ddim_x0_ab(&x_t, &c, sched.alpha_bar(t)).unwrap()
        };
        if !tie_free(&ex.per_class[0], &x0.select_rows(&[0, 1])) || !tie_free(&ex.per_class[1], &x0.select_rows(&[2, 3, 4])) {
            continue;
        }
        let (loss, grads) = refl_loss_and_grads(&model, &sched, &x_t, t, &labels, &target, 1.0, omega).unwrap();
        assert!((loss - loss_of(&model)).abs() < 1e-12);
        for (i, g) in grads.iter().enumerate() {
            let base = model.params()[i].clone();
            let numeric = fd(&base, |w| {
                let mut m = model.clone();
                *m.params_mut()[i] = w.clone();
                loss_of(&m)
            });
            assert!(close(g, &numeric, 1e-5), "param {i}: {g:?} vs {numeric:?}");
        }
        checked += 1;
    }
}
