mod common;

use rand::seq::SliceRandom;
use rand::Rng;
use tariffshift::forecaster::{
    assemble_model, evaluate_aql, load_checkpoint, pe_query_net, predict, predict_batch, quantile_loss,
    save_checkpoint, train, ForecastWindow, ModelDims, ModelVariant, Normalization, TrainingConfig,
};
use tariffshift_autodiff::{Graph, Tensor};

fn permuted<T: Clone>(xs: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| xs[i].clone()).collect()
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    let w = t.shape()[1];
    t.values().chunks(w).collect()
}

fn max_row_gap(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn set_network_is_permutation_equivariant() {
    let mut rng = common::rng(8);
    let (n, d, dp) = (24, 10, 20);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lambda: Vec<f64> = (0..d * dp).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gamma: Vec<f64> = (0..d * dp).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |x: Vec<f64>| {
        let mut g = Graph::new();
        let xv = g.input(&Tensor::new(vec![n, d], x).unwrap()).unwrap();
        let l = g.input(&Tensor::new(vec![d, dp], lambda.clone()).unwrap()).unwrap();
        let gm = g.input(&Tensor::new(vec![d, dp], gamma.clone()).unwrap()).unwrap();
        let y = pe_query_net(&mut g, xv, l, gm).unwrap();
        g.tensor(y)
    };
    let base = run(x.clone());
    let x_rows: Vec<Vec<f64>> = x.chunks(d).map(<[f64]>::to_vec).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..50 {
        perm.shuffle(&mut rng);
        let out = run(permuted(&x_rows, &perm).concat());
        let expected = permuted(&rows(&base), &perm);
        assert!(max_row_gap(&rows(&out), &expected) <= 1e-9);
    }
}

fn tariff_equivariance_gap(variant: ModelVariant, seed: u64, queries: bool) -> Vec<f64> {
    let dims = ModelDims::default();
    let model = assemble_model(variant, &dims, seed).unwrap();
    let mut rng = common::rng(seed);
    let window = common::random_window(&mut rng, &dims, 24 * 30, variant.needs_shift_indicator());
    let pick = |w: &ForecastWindow| {
        let (q, c) = model.tariff_parts(w).unwrap();
        if queries {
            q.unwrap()
        } else {
            c.unwrap()
        }
    };
    let base = pick(&window);
    let mut perm: Vec<usize> = (0..dims.horizon).collect();
    (0..50)
        .map(|_| {
            perm.shuffle(&mut rng);
            let mut w = window.clone();
            w.future_tariffs = permuted(&window.future_tariffs, &perm);
            if let Some(ind) = &window.future_shift_indicator {
                w.future_shift_indicator = Some(permuted(ind, &perm));
            }
            max_row_gap(&rows(&pick(&w)), &permuted(&rows(&base), &perm))
        })
        .collect()
}

#[test]
fn attention_without_hour_features_is_equivariant() {
    for seed in 0..3 {
        let gaps = tariff_equivariance_gap(ModelVariant::AttNoHOD, seed, false);
        assert!(gaps.iter().all(|&g| g <= 1e-9), "{gaps:?}");
    }
}

#[test]
fn set_network_queries_are_equivariant() {
    for variant in [ModelVariant::AttPE, ModelVariant::PE] {
        let gaps = tariff_equivariance_gap(variant, 4, true);
        assert!(gaps.iter().all(|&g| g <= 1e-9), "{variant}: {gaps:?}");
    }
}

#[test]
fn dense_tariff_layer_is_not_equivariant() {
    let gaps = tariff_equivariance_gap(ModelVariant::FC, 5, false);
    assert!(gaps.iter().any(|&g| g > 1e-3), "{gaps:?}");
}

#[test]
fn no_tariff_model_ignores_future_tariffs() {
    let dims = ModelDims::default();
    let model = assemble_model(ModelVariant::NoX, &dims, 2).unwrap();
    let mut rng = common::rng(2);
    let window = common::random_window(&mut rng, &dims, 24 * 40, false);
    let base = predict(&model_with_norm(model.clone()), &window, &[0.1, 0.5, 0.9]).unwrap();
    for _ in 0..10 {
        let mut w = window.clone();
        w.future_tariffs = (0..dims.horizon).map(|_| common::random_rate(&mut rng)).collect();
        assert_eq!(predict(&model_with_norm(model.clone()), &w, &[0.1, 0.5, 0.9]).unwrap(), base);
    }
}

#[test]
fn independent_embedding_is_local_per_hour() {
    let dims = ModelDims::default();
    let model = model_with_norm(assemble_model(ModelVariant::Ind, &dims, 3).unwrap());
    let mut rng = common::rng(3);
    let window = common::random_window(&mut rng, &dims, 24 * 40, false);
    let base = predict(&model, &window, &[0.5]).unwrap();
    for hour in [0, 7, 23] {
        let mut w = window.clone();
        w.future_tariffs[hour] = if w.future_tariffs[hour] == 0.8 { 0.2 } else { 0.8 };
        let out = predict(&model, &w, &[0.5]).unwrap();
        for h in (0..dims.horizon).filter(|&h| h != hour) {
            assert_eq!(out[h], base[h], "hour {h} moved when hour {hour} changed");
        }
        assert_ne!(out[hour], base[hour]);
    }
}

fn model_with_norm(mut m: tariffshift::forecaster::TrainedModel) -> tariffshift::forecaster::TrainedModel {
    m.normalization.insert(0, Normalization { mean: 120.5, std: 30.25 });
    m
}

#[test]
fn zeroed_head_predicts_the_consumer_mean() {
    let dims = ModelDims::default();
    let mut model = model_with_norm(assemble_model(ModelVariant::AttPE, &dims, 6).unwrap());
    let last = dims.head_units.len() - 1;
    for (name, t) in model.params.iter_mut() {
        if name.starts_with(&format!("head.l{last}.")) {
            t.values_mut().fill(0.0);
        }
    }
    let mut rng = common::rng(6);
    let window = common::random_window(&mut rng, &dims, 24 * 50, false);
    let out = predict(&model, &window, &[0.1, 0.5, 0.9]).unwrap();
    assert_eq!(out.len(), 24);
    assert!(out.iter().all(|row| row.len() == 3 && row.iter().all(|&v| v == 120.5)));
}

#[test]
fn shift_indicator_is_required_by_the_upper_bound() {
    let dims = ModelDims::toy();
    let model = model_with_norm(assemble_model(ModelVariant::UB, &dims, 1).unwrap());
    let mut rng = common::rng(1);
    let window = common::random_window(&mut rng, &dims, 48, false);
    assert!(predict(&model, &window, &[0.5]).is_err());
}

fn toy_training(seed: u64) -> (tariffshift::forecaster::TrainedModel, Vec<ForecastWindow>) {
    let dims = ModelDims::toy();
    let mut rng = common::rng(seed);
    let windows: Vec<ForecastWindow> = (0..24)
        .map(|i| common::random_window(&mut rng, &dims, 24 + i * 24, false))
        .collect();
    let model = model_with_norm(assemble_model(ModelVariant::AttPE, &dims, seed).unwrap());
    let cfg = TrainingConfig {
        epochs: 3,
        batch_size: 5,
        lr: 1e-2,
        seed,
        ..Default::default()
    };
    let trained = train(model, &windows[..18], &windows[18..], &cfg).unwrap();
    (trained, windows)
}

#[test]
fn training_is_deterministic_per_seed() {
    let (a, _) = toy_training(9);
    let (b, _) = toy_training(9);
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.params, b.params);
    let untouched = assemble_model(ModelVariant::AttPE, &ModelDims::toy(), 9).unwrap();
    let cfg = TrainingConfig {
        epochs: 0,
        ..Default::default()
    };
    assert_eq!(train(untouched.clone(), &[], &[], &cfg).unwrap(), untouched);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (model, windows) = toy_training(10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&path, &model).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, model);
    let refs: Vec<&ForecastWindow> = windows.iter().collect();
    let a = predict_batch(&model, &refs, &[0.1, 0.5, 0.9]).unwrap();
    let b = predict_batch(&loaded, &refs, &[0.1, 0.5, 0.9]).unwrap();
    let bits = |v: &Vec<Vec<Vec<f64>>>| v.iter().flatten().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(
        evaluate_aql(&model, &windows, &[0.1, 0.5, 0.9]).unwrap().to_bits(),
        evaluate_aql(&loaded, &windows, &[0.1, 0.5, 0.9]).unwrap().to_bits()
    );
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (model, _) = toy_training(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&path, &model).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("head.l0.w", "head.l9.w")).unwrap();
    assert!(load_checkpoint(&path).is_err());
    assert!(load_checkpoint(&dir.path().join("absent.json")).is_err());
}

#[test]
fn quantile_loss_hand_values_and_median() {
    assert_eq!(quantile_loss(&[1.0], &[&[0.0]], &[0.9]).unwrap(), 0.9);
    assert_eq!(quantile_loss(&[1.0], &[&[0.0]], &[0.1]).unwrap(), 0.1);
    let mut rng = common::rng(12);
    for _ in 0..1000 {
        let n = rng.random_range(1..50);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mae = y.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        let l = quantile_loss(&y, &[&p], &[0.5]).unwrap();
        assert!((l - 0.5 * mae).abs() <= 1e-12);
    }
    assert!(quantile_loss(&[1.0], &[&[0.0]], &[0.0]).is_err());
}
