#![allow(dead_code)]

use mvft::views::{build_views, SensorWindow};
use mvft::{Batch, Binder, ModelConfig, MvftModel, ParamStore, SeededRng, Tensor, ViewBundle, ViewMask};

pub fn random_window(cfg: &ModelConfig, label: usize, rng: &mut SeededRng) -> SensorWindow {
    let samples = (0..cfg.window_len)
        .map(|_| (0..cfg.channels).map(|_| rng.normal(0.0, 1.0)).collect())
        .collect();
    let ts = (0..cfg.window_len as i64).map(|i| i * 3).collect();
    SensorWindow::new(samples, ts, label, None).unwrap()
}

pub fn random_bundle(cfg: &ModelConfig, rng: &mut SeededRng) -> ViewBundle {
    let label = rng.below(cfg.n_class);
    let mut b = build_views(&random_window(cfg, label, rng)).unwrap();
    // keep every view at unit scale so tiny models stay well conditioned
    for view in [&mut b.frequent.0, &mut b.statistic.0] {
        let s = view.data().iter().map(|x| x.abs()).fold(1.0, f64::max);
        for x in view.data_mut() {
            *x /= s;
        }
    }
    b
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-scale, scale)).collect()).unwrap()
}

/// Probability vector of `model` with `params` swapped in.
pub fn probs_with(model: &MvftModel, params: &ParamStore, batch: &Batch, mask: ViewMask) -> Vec<f64> {
    let mut binder = Binder::new(params, false);
    let out = model.forward(&mut binder, batch, mask, None).unwrap();
    binder.tape.value(out.probs).data().to_vec()
}

/// Worst relative error between reverse-mode and central-difference
/// derivatives of every output probability with respect to every parameter
/// whose name passes `filter`. Relative error uses a 1e-6 floor on the
/// denominator.
pub fn jacobian_check(
    model: &MvftModel,
    batch: &Batch,
    mask: ViewMask,
    filter: impl Fn(&str) -> bool,
) -> (f64, usize) {
    let h = 1e-5;
    let base = probs_with(model, &model.params, batch, mask);
    let outputs = base.len();

    // analytic rows, one backward per output
    let mut analytic = Vec::with_capacity(outputs);
    for k in 0..outputs {
        let mut binder = Binder::new(&model.params, true);
        let out = model.forward(&mut binder, batch, mask, None).unwrap();
        let mut w = vec![0.0; outputs];
        w[k] = 1.0;
        let y = binder.tape.weighted_sum(out.probs, &w).unwrap();
        analytic.push(binder.backward(y).unwrap());
    }

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let names: Vec<String> = model.params.names().filter(|n| filter(n)).cloned().collect();
    for name in names {
        let len = model.params.get(&name).unwrap().len();
        for j in 0..len {
            let mut plus = model.params.clone();
            plus.get_mut(&name).unwrap().data_mut()[j] += h;
            let mut minus = model.params.clone();
            minus.get_mut(&name).unwrap().data_mut()[j] -= h;
            let p = probs_with(model, &plus, batch, mask);
            let m = probs_with(model, &minus, batch, mask);
            for k in 0..outputs {
                let numeric = (p[k] - m[k]) / (2.0 * h);
                let a = analytic[k][&name].data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    (worst, checked)
}
