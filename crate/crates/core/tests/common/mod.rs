#![allow(dead_code)]

use minibert::tensor::{ParamStore, Tape, Var};

/// Largest relative disagreement between analytic gradients and central
/// finite differences over every scalar of every parameter in `store`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// exactly-zero gradients (unused embedding rows, say) from dividing by 0.
pub fn max_grad_rel_error<F>(store: &mut ParamStore<f64>, h: f64, floor: f64, loss: F) -> (f64, String)
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    store.zero_grad();
    let mut tape = Tape::new(0);
    let l = loss(&mut tape, store);
    tape.backward(l, store).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let analytic = match store.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; store.value(id).numel()],
        };
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(store, &loss);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(store, &loss);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]: analytic {a:e} numeric {numeric:e}", store.get(id).name));
            }
        }
    }
    worst
}

fn eval<F>(store: &ParamStore<f64>, loss: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let mut tape = Tape::new(0);
    let l = loss(&mut tape, store);
    tape.value(l).item()
}
