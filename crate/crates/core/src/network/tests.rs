use rand::RngExt;

use super::*;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, Rng, Stream};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CONFIGS: u64 = 20;

fn rng(k: u64) -> Rng {
    stream(17, Stream::Synthetic, k)
}

fn random_matrix(r: usize, c: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks are not crossed by the probe.
fn away_from_zero(r: usize, c: usize, rng: &mut Rng) -> Matrix {
    random_matrix(r, c, rng).map(|v| if v < 0.0 { v - 0.05 } else { v + 0.05 })
}

/// Norm-wise relative error. The scale is floored so that gradients which are
/// exactly zero (a bias feeding batch norm) compare against rounding noise.
fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm()).max(1e-6);
    diff / scale
}

/// Compares tape gradients of `Σ out ⊙ R` against central differences for
/// the input and every parameter.
fn check<F>(params: &ParamStore, x: &Matrix, seed: u64, f: F)
where
    F: Fn(&mut Tape, &ParamStore, NodeId) -> Result<NodeId>,
{
    let loss_of = |p: &ParamStore, x: &Matrix, r: &Matrix| -> f64 {
        let mut t = Tape::new();
        let xi = t.input(x.clone()).unwrap();
        let out = f(&mut t, p, xi).unwrap();
        t.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut t = Tape::new();
    let xi = t.input(x.clone()).unwrap();
    let out = f(&mut t, params, xi).unwrap();
    let r = random_matrix(t.value(out).rows(), t.value(out).cols(), &mut rng(1000 + seed));
    let value = t.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    let root = t.loss(value, vec![(out, r.clone())]).unwrap();
    let mut analytic = params.clone();
    analytic.zero_grad();
    t.backward(root, &mut analytic).unwrap();

    let mut num = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[k] += H;
        let mut xm = x.clone();
        xm.data_mut()[k] -= H;
        num.data_mut()[k] = (loss_of(params, &xp, &r) - loss_of(params, &xm, &r)) / (2.0 * H);
    }
    let g = t.grad(xi).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
    assert!(rel_err(&g, &num) < TOL, "input grad error {}", rel_err(&g, &num));

    for (id, p) in params.iter() {
        let mut num = Matrix::zeros(p.value.rows(), p.value.cols());
        for k in 0..p.value.data().len() {
            let mut pp = params.clone();
            pp.get_mut(id).value.data_mut()[k] += H;
            let mut pm = params.clone();
            pm.get_mut(id).value.data_mut()[k] -= H;
            num.data_mut()[k] = (loss_of(&pp, x, &r) - loss_of(&pm, x, &r)) / (2.0 * H);
        }
        let e = rel_err(&analytic.get(id).grad, &num);
        assert!(e < TOL, "grad error {e} for {}", p.name);
    }
}

fn dims(r: &mut Rng) -> (usize, usize, usize) {
    (r.random_range(2..7), r.random_range(1..6), r.random_range(1..6))
}

#[test]
fn dense_gradients() {
    for s in 0..CONFIGS {
        let mut r = rng(s);
        let (n, a, b) = dims(&mut r);
        let mut params = ParamStore::new();
        let d = Dense::new(&mut params, "d", a, b, &mut r);
        params.get_mut(d.bias).value = random_matrix(1, b, &mut r);
        let x = random_matrix(n, a, &mut r);
        check(&params, &x, s, |t, p, x| t.dense(p, x, d.weight, d.bias));
    }
}

#[test]
fn relu_gradients() {
    for s in 0..CONFIGS {
        let mut r = rng(100 + s);
        let (n, a, _) = dims(&mut r);
        let x = away_from_zero(n, a, &mut r);
        check(&ParamStore::new(), &x, s, |t, _, x| t.relu(x));
    }
}

#[test]
fn batch_norm_gradients_in_both_modes() {
    for s in 0..CONFIGS {
        let mut r = rng(200 + s);
        let (n, a, _) = dims(&mut r);
        let mut params = ParamStore::new();
        let mut bn = BatchNorm::new(&mut params, "bn", a);
        params.get_mut(bn.gamma).value = random_matrix(1, a, &mut r);
        params.get_mut(bn.beta).value = random_matrix(1, a, &mut r);
        bn.running_mean = random_matrix(1, a, &mut r).into_vec();
        bn.running_var = random_matrix(1, a, &mut r).map(|v| v.abs() + 0.5).into_vec();
        let x = random_matrix(n, a, &mut r);
        for mode in [Mode::Train, Mode::Eval] {
            check(&params, &x, s, |t, p, x| {
                let mut layer = Layer::BatchNorm(bn.clone());
                layer.forward(t, p, x, mode)
            });
        }
    }
}

#[test]
fn embedding_gradients() {
    for s in 0..CONFIGS {
        let mut r = rng(300 + s);
        let (n, c, _) = dims(&mut r);
        let cards: Vec<usize> = (0..r.random_range(1..4)).map(|_| r.random_range(2..12)).collect();
        let mut params = ParamStore::new();
        let emb = Embedding::new(&mut params, "e", c, &cards, &mut r);
        let categorical: Vec<u32> = (0..n)
            .flat_map(|_| cards.iter().map(|&k| r.random_range(0..k as u32)).collect::<Vec<_>>())
            .collect();
        let x = random_matrix(n, c, &mut r);
        let cols: Vec<(ParamId, Vec<u32>)> = emb
            .columns
            .iter()
            .enumerate()
            .map(|(j, col)| (col.table, (0..n).map(|i| categorical[i * cards.len() + j]).collect()))
            .collect();
        check(&params, &x, s, |t, p, x| t.embed(p, x, cols.clone()));
    }
}

#[test]
fn mix_gather_concat_gradients() {
    for s in 0..CONFIGS {
        let mut r = rng(400 + s);
        let (n, a, _) = dims(&mut r);
        let x = random_matrix(n, a, &mut r);
        let partner: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        let lambda: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let rows: Vec<usize> = (0..r.random_range(1..2 * n)).map(|_| r.random_range(0..n)).collect();
        check(&ParamStore::new(), &x, s, |t, _, x| {
            let m = t.mix(x, partner.clone(), lambda.clone())?;
            let g = t.gather(x, rows.clone())?;
            t.concat_rows(vec![m, g, x])
        });
    }
}

#[test]
fn weighted_sum_of_losses_gradients() {
    for s in 0..CONFIGS {
        let mut r = rng(500 + s);
        let (n, a, _) = dims(&mut r);
        let x = random_matrix(n, a, &mut r);
        let (w1, w2) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        // Two quadratic losses with caller-supplied gradients, combined and broadcast
        // to a 1 × 1 output so the generic checker can probe it.
        let f = move |t: &mut Tape, _: &ParamStore, x: NodeId| -> Result<NodeId> {
            let v = t.value(x).clone();
            let sq: f64 = v.data().iter().map(|e| e * e).sum();
            let l1 = t.loss(sq, vec![(x, v.map(|e| 2.0 * e))])?;
            let s1: f64 = v.data().iter().sum();
            let l2 = t.loss(s1, vec![(x, Matrix::filled(v.rows(), v.cols(), 1.0))])?;
            t.weighted_sum(vec![(l1, w1), (l2, w2)])
        };
        check(&ParamStore::new(), &x, s, f);
    }
}

/// Smallest |pre-activation| entering a ReLU; central differences are only
/// valid when no probe crosses the kink.
fn min_relu_margin(mlp: &Mlp, params: &ParamStore, x: &Matrix) -> f64 {
    let mut mlp = mlp.clone();
    let mut t = Tape::new();
    let mut h = t.input(x.clone()).unwrap();
    let mut margin = f64::INFINITY;
    for layer in &mut mlp.layers {
        if matches!(layer, Layer::Relu) {
            margin = t.value(h).data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
        h = layer.forward(&mut t, params, h, Mode::Train).unwrap();
    }
    margin
}

#[test]
fn mlp_gradients() {
    let mut checked = 0;
    let mut s = 0;
    while checked < CONFIGS {
        s += 1;
        let mut r = rng(600 + s);
        let n = r.random_range(3..7);
        let widths: Vec<usize> = (0..r.random_range(2..5)).map(|_| r.random_range(1..5)).collect();
        let linear = r.random::<bool>();
        let mut params = ParamStore::new();
        let mlp = Mlp::new(&mut params, "m", &widths, linear, &mut r);
        let x = random_matrix(n, widths[0], &mut r);
        if min_relu_margin(&mlp, &params, &x) < 1e-3 {
            continue;
        }
        check(&params, &x, s, |t, p, x| mlp.clone().forward(t, p, x, Mode::Train));
        checked += 1;
    }
}

fn small_network(seed: u64) -> ContrastiveNetwork {
    let spec = NetworkSpec::new(3, &[4, 3], Some(6), 3, 1, Some(5));
    ContrastiveNetwork::new(spec, seed).unwrap()
}

fn small_batch(n: usize, seed: u64) -> FeatureBatch {
    let mut r = rng(900 + seed);
    FeatureBatch {
        continuous: random_matrix(n, 3, &mut r),
        categorical: (0..n).flat_map(|_| [r.random_range(0..4u32), r.random_range(0..3u32)]).collect(),
        n_categorical: 2,
    }
}

#[test]
fn network_shapes() {
    let mut net = small_network(1);
    assert_eq!(net.spec.embedded_width(), 3 + 3 + 3);
    assert_eq!(net.encoder.n_blocks(), 3);
    assert_eq!(net.decoder.widths, vec![6, 6, 6, 3 + 4 + 3]);
    assert_eq!(net.projector.widths, vec![6, 5]);
    let z = net.encode(&small_batch(5, 0)).unwrap();
    assert_eq!(z.shape(), (5, 6));
    let (cont, probs) = net.decode(&z).unwrap();
    assert_eq!(cont.shape(), (5, 3));
    assert_eq!(probs.len(), 2);
    for p in &probs {
        for i in 0..5 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn partial_forwards_compose() {
    for mode in [Mode::Eval, Mode::Train] {
        for split in 0..=3 {
            let mut a = small_network(2);
            let mut b = a.clone();
            let batch = small_batch(8, 1);
            let mut t = Tape::new();
            let x = a.embed(&mut t, &batch).unwrap();
            let whole = a.encode_partial(&mut t, x, 0, 3, mode).unwrap();
            let mut t2 = Tape::new();
            let x2 = b.embed(&mut t2, &batch).unwrap();
            let h = b.encode_partial(&mut t2, x2, 0, split, mode).unwrap();
            let z = b.encode_partial(&mut t2, h, split, 3, mode).unwrap();
            assert!(t.value(whole).max_abs_diff(t2.value(z)) < 1e-12);
            assert_eq!(a, b);
        }
    }
    let mut net = small_network(2);
    let mut t = Tape::new();
    let x = net.embed(&mut t, &small_batch(4, 0)).unwrap();
    assert!(net.encode_partial(&mut t, x, 2, 1, Mode::Eval).is_err());
    assert!(net.encode_partial(&mut t, x, 0, 4, Mode::Eval).is_err());
    assert!(matches!(
        net.encode_partial(&mut t, x, 1, 2, Mode::Eval),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn batch_norm_train_output_is_standardized() {
    let mut r = rng(7);
    let mut params = ParamStore::new();
    let mut layer = Layer::BatchNorm(BatchNorm::new(&mut params, "bn", 4));
    let x = random_matrix(32, 4, &mut r).map(|v| 3.0 * v + 7.0);
    let mut t = Tape::new();
    let xi = t.input(x).unwrap();
    let out = layer.forward(&mut t, &params, xi, Mode::Train).unwrap();
    let y = t.value(out);
    for j in 0..4 {
        let col = y.column(j);
        let mean = col.iter().sum::<f64>() / 32.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
    let Layer::BatchNorm(bn) = &layer else { unreachable!() };
    assert!(bn.running_mean.iter().all(|&m| m > 0.3));
}

#[test]
fn relu_blocks_negative_gradient() {
    let mut t = Tape::new();
    let x = t.input(Matrix::from_rows(&[[-1.0, 2.0], [0.5, -3.0]])).unwrap();
    let y = t.relu(x).unwrap();
    let root = t.loss(0.0, vec![(y, Matrix::filled(2, 2, 1.0))]).unwrap();
    t.backward(root, &mut ParamStore::new()).unwrap();
    assert_eq!(t.grad(x).unwrap(), &Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
}

#[test]
fn tape_cannot_be_replayed() {
    let mut t = Tape::new();
    let x = t.input(Matrix::filled(1, 1, 2.0)).unwrap();
    let root = t.loss(4.0, vec![(x, Matrix::filled(1, 1, 4.0))]).unwrap();
    let mut p = ParamStore::new();
    t.backward(root, &mut p).unwrap();
    assert!(matches!(t.backward(root, &mut p), Err(Error::TapeReuse)));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut t = Tape::new();
    assert!(matches!(
        t.input(Matrix::filled(1, 2, f64::NAN)),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn frozen_encoder_receives_no_updates() {
    let mut net = small_network(3);
    let enc_ids = net.encoder_param_ids();
    net.params.set_trainable(&enc_ids, false);
    let before = net.params.clone();

    let mut t = Tape::new();
    let x = net.embed(&mut t, &small_batch(6, 2)).unwrap();
    let z = net.encode_partial(&mut t, x, 0, 3, Mode::Eval).unwrap();
    let out = net.project(&mut t, z, Mode::Train).unwrap();
    let g = t.value(out).clone();
    let root = t.loss(1.0, vec![(out, g)]).unwrap();
    t.backward(root, &mut net.params).unwrap();
    for id in &enc_ids {
        assert!(net.params.get(*id).grad.data().iter().all(|&v| v == 0.0));
    }
    assert!(net
        .projector_param_ids()
        .iter()
        .any(|id| net.params.get(*id).grad.data().iter().any(|&v| v != 0.0)));
    net.params.adam_step(&AdamConfig::default());
    for id in &enc_ids {
        assert_eq!(net.params.value(*id), before.value(*id));
    }
    for id in net.projector_param_ids() {
        if net.params.get(id).name.ends_with("weight") {
            assert_ne!(net.params.value(id), before.value(id));
        }
    }
}

#[test]
fn predictor_depth_and_input_kinds() {
    let lin = PredictorNetwork::on_raw(3, &[4], 100, 1, 2, 0).unwrap();
    assert_eq!(lin.mlp.layers.len(), 1);
    let mut mlp = PredictorNetwork::on_raw(3, &[4, 3], 100, 2, 2, 0).unwrap();
    assert_eq!(mlp.mlp.widths, vec![3 + 3 + 3, 100, 2]);
    let batch = small_batch(5, 3);
    assert_eq!(mlp.logits(PredictorInput::Raw(&batch)).unwrap().shape(), (5, 2));
    let z = Matrix::zeros(5, 9);
    assert!(mlp.logits(PredictorInput::Latent(&z)).is_err());
    assert!(PredictorNetwork::on_latents(3, 10, 0, 2, 0).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut net = small_network(4);
    let mut t = Tape::new();
    let x = net.embed(&mut t, &small_batch(6, 4)).unwrap();
    let z = net.encode_partial(&mut t, x, 0, 3, Mode::Train).unwrap();
    let g = t.value(z).map(|v| v.sin() / 3.0);
    let root = t.loss(0.0, vec![(z, g)]).unwrap();
    t.backward(root, &mut net.params).unwrap();
    net.params.adam_step(&AdamConfig::default());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    save_checkpoint(&path, "contrastive", &net).unwrap();
    let back: ContrastiveNetwork = load_checkpoint(&path, "contrastive").unwrap();
    assert_eq!(back, net);
    assert_eq!(back.params.step(), 1);
    assert!(load_checkpoint::<ContrastiveNetwork>(&path, "predictor").is_err());
}
