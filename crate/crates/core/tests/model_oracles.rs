//! Compositional oracles: model streams reduced to pipelines built by hand.

use mftnet::layers::norm::{BATCH_NORM_EPS, LAYER_NORM_EPS};
use mftnet::layers::{self, Mode};
use mftnet::{verify, Graph, Model, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomize(model: &mut Model<f64>, name: &str, lo: f64, hi: f64, rng: &mut ChaCha8Rng) {
    let id = model.params().id(name).unwrap_or_else(|| panic!("{name}"));
    for v in model.params_mut().get_mut(id).value.data_mut() {
        *v = rng.random_range(lo..hi);
    }
}

fn fill(model: &mut Model<f64>, name: &str, value: f64) {
    let id = model.params().id(name).unwrap_or_else(|| panic!("{name}"));
    for v in model.params_mut().get_mut(id).value.data_mut() {
        *v = value;
    }
}

fn input(rng: &mut ChaCha8Rng, c: usize, t: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..2 * c * t)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    Tensor::from_f64(&[2, c, t, 1], &data).unwrap()
}

#[test]
fn isolated_branch_equals_conv_norm_elu() {
    let cfg = verify::small_model_config(Variant::Full);
    let (c, t, f) = (cfg.channels, cfg.samples, cfg.branch_filters);
    let branches = cfg.branch_kernels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for keep in 0..branches {
        let mut model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        for j in 0..branches {
            fill(
                &mut model,
                &format!("fusion.branch{j}.scale"),
                if j == keep { 1.0 } else { 0.0 },
            );
        }
        let bn = format!("branch{keep}.bn");
        randomize(&mut model, &format!("{bn}.gamma"), 0.5, 1.5, &mut rng);
        randomize(&mut model, &format!("{bn}.beta"), -0.5, 0.5, &mut rng);
        randomize(
            &mut model,
            &format!("{bn}.running_mean"),
            -0.3,
            0.3,
            &mut rng,
        );
        randomize(&mut model, &format!("{bn}.running_var"), 0.5, 2.0, &mut rng);
        let x = input(&mut rng, c, t);

        let mut g = Graph::no_grad();
        let xv = g.input(x.clone());
        let out = model.forward(&mut g, xv, Mode::Infer, &mut rng).unwrap();
        let stream = g.value(out.trace.multiscale.unwrap()).clone();
        assert_eq!(stream.shape(), [2, c, t, branches * f]);

        let p = model.params();
        let value = |name: &str| p.by_name(name).unwrap().value.clone();
        let mut h = Graph::no_grad();
        let xv = h.input(x);
        let k = h.constant(value(&format!("branch{keep}.kernel")));
        let y = layers::conv_temporal(&mut h, xv, k).unwrap();
        let gamma = h.constant(value(&format!("{bn}.gamma")));
        let beta = h.constant(value(&format!("{bn}.beta")));
        let y = layers::batch_norm_infer(
            &mut h,
            y,
            gamma,
            beta,
            value(&format!("{bn}.running_mean")).data(),
            value(&format!("{bn}.running_var")).data(),
            BATCH_NORM_EPS,
        )
        .unwrap();
        let y = layers::elu(&mut h, y).unwrap();
        let expected = h.value(y);

        let width = branches * f;
        for (row, exp) in stream.data().chunks(width).zip(expected.data().chunks(f)) {
            for (m, &v) in row.iter().enumerate() {
                if m / f == keep {
                    assert_eq!(v, exp[m % f], "branch {keep} map {m}");
                } else {
                    assert_eq!(v, 0.0, "branch {keep}: map {m} should be silenced");
                }
            }
        }
    }
}

fn layer_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g + b)
        .collect()
}

#[test]
fn silenced_sublayers_reduce_transformer_to_two_layer_norms() {
    let cfg = verify::small_model_config(Variant::Full);
    let (c, t) = (cfg.channels, cfg.samples);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::<f64>::new(cfg, 9).unwrap();
    for name in [
        "transformer.attention.output.weight",
        "transformer.attention.output.bias",
        "transformer.ff2.weight",
        "transformer.ff2.bias",
    ] {
        fill(&mut model, name, 0.0);
    }
    fill(&mut model, "fusion.transformer.scale", 1.0);
    for norm in ["transformer.norm1", "transformer.norm2"] {
        randomize(&mut model, &format!("{norm}.gamma"), 0.5, 1.5, &mut rng);
        randomize(&mut model, &format!("{norm}.beta"), -0.5, 0.5, &mut rng);
    }
    let x = input(&mut rng, c, t);
    let mut g = Graph::no_grad();
    let xv = g.input(x.clone());
    let out = model.forward(&mut g, xv, Mode::Infer, &mut rng).unwrap();
    let stream = g.value(out.trace.transformer.unwrap());
    assert_eq!(stream.shape(), [2, c, t, 1]);

    let p = model.params();
    let data = |name: &str| p.by_name(name).unwrap().value.data().to_vec();
    let (g1, b1) = (
        data("transformer.norm1.gamma"),
        data("transformer.norm1.beta"),
    );
    let (g2, b2) = (
        data("transformer.norm2.gamma"),
        data("transformer.norm2.beta"),
    );
    for b in 0..2 {
        for s in 0..t {
            // one token per time step, its features the electrodes
            let token: Vec<f64> = (0..c).map(|ch| x.data()[(b * c + ch) * t + s]).collect();
            let want = layer_norm_rows(&layer_norm_rows(&token, &g1, &b1), &g2, &b2);
            for (ch, w) in want.iter().enumerate() {
                let got = stream.data()[(b * c + ch) * t + s];
                assert!((got - w).abs() <= 1e-12, "b{b} t{s} c{ch}: {got} vs {w}");
            }
        }
    }
}
