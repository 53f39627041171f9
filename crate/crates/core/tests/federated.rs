use ddnet_core::federated::{fedave_train, fedgs_train, sparsify, FedError, FedRun, LocalOptimizer, OverheadLedger};
use ddnet_core::numerics::{AdamState, Rng, Tensor};

type Params = Vec<Tensor>;

fn init() -> Params {
    vec![Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]), Tensor::vector(vec![0.1, -0.4, 0.9])]
}

/// Per-client quadratic `Σ c_i (θ_i − t_i)²` with client-specific targets.
fn client_grad(client: usize, p: &Params) -> Result<(f64, Vec<Tensor>), FedError> {
    let mut loss = 0.0;
    let grads = p
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let data = t
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = 1.0 + ((client + i + ti) % 3) as f64;
                    let target = (client as f64 - 1.5) * 0.7 + i as f64 * 0.1;
                    loss += c * (v - target).powi(2);
                    2.0 * c * (v - target)
                })
                .collect();
            Tensor::new(t.rows(), t.cols(), data)
        })
        .collect();
    Ok((loss, grads))
}

fn run(clients: usize, epochs: usize, local_steps: usize, delta: f64) -> FedRun {
    FedRun {
        phase: "test".into(),
        clients_per_epoch: clients,
        epochs,
        local_steps,
        lr: 0.05,
        bits: 32,
        optimizer: LocalOptimizer::Adam,
        delta,
    }
}

fn assert_params_eq(a: &Params, b: &Params, tol: f64) {
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() <= tol, "{u} vs {v}");
        }
    }
}

#[test]
fn single_client_fedave_is_centralized_adam_with_epoch_resets() {
    let (epochs, steps) = (6, 4);
    let mut ledger = OverheadLedger::default();
    let fed = fedave_train(init(), &[50], &run(1, epochs, steps, 1.0), &mut Rng::new(1), &mut ledger, client_grad, |_, _| Ok(()))
        .unwrap();

    let mut p = init();
    for _ in 0..epochs {
        let mut adam = AdamState::new(&p, 0.05);
        for _ in 0..steps {
            let (_, g) = client_grad(0, &p).unwrap();
            adam.step(&mut p, &g);
        }
    }
    assert_params_eq(&fed, &p, 0.0);
}

#[test]
fn full_density_fedgs_is_server_adam_on_weighted_gradient() {
    let sizes = [30, 10, 60, 20];
    let epochs = 8;
    let mut ledger = OverheadLedger::default();
    let fed = fedgs_train(init(), &sizes, &run(4, epochs, 1, 1.0), &mut Rng::new(2), &mut ledger, client_grad, |_, _| Ok(()))
        .unwrap();

    let total: f64 = sizes.iter().sum::<usize>() as f64;
    let mut p = init();
    let mut adam = AdamState::new(&p, 0.05);
    for _ in 0..epochs {
        let mut acc: Vec<Tensor> = p.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        for (c, &d) in sizes.iter().enumerate() {
            let (_, g) = client_grad(c, &p).unwrap();
            for (a, gi) in acc.iter_mut().zip(&g) {
                a.axpy(d as f64 / total, gi);
            }
        }
        adam.step(&mut p, &acc);
    }
    assert_params_eq(&fed, &p, 1e-12);

    // every component of every gradient is nonzero here, so δ = 1 uploads the dense payload
    let q = 7u64;
    let phase = &ledger.phases["test"];
    assert_eq!(phase.upload, 32 * q * 4 * epochs as u64);
    assert_eq!(phase.upload, phase.broadcast);
    assert_eq!(phase.index, q * 4 * epochs as u64);
}

#[test]
fn sparse_uploads_shrink_with_delta() {
    let sizes = [10; 6];
    let uploads: Vec<u64> = [1.0, 0.5, 0.2]
        .iter()
        .map(|&delta| {
            let mut ledger = OverheadLedger::default();
            fedgs_train(init(), &sizes, &run(6, 40, 1, delta), &mut Rng::new(3), &mut ledger, client_grad, |_, _| Ok(()))
                .unwrap();
            ledger.bits_upload
        })
        .collect();
    assert!(uploads[0] > uploads[1] && uploads[1] > uploads[2], "{uploads:?}");
}

#[test]
fn sparsified_gradient_is_unbiased() {
    let g = [0.5, -2.0, 0.01, 0.0, 1.3, -0.2, 0.05, 4.0];
    let draws = 40_000;
    let mut rng = Rng::new(4);
    let mut mean = [0.0; 8];
    for _ in 0..draws {
        for (m, v) in mean.iter_mut().zip(sparsify(&g, 0.4, &mut rng).dense()) {
            *m += v / draws as f64;
        }
    }
    let p = sparsify(&g, 0.4, &mut rng).p;
    for i in 0..g.len() {
        // standard error of the mean of g/p·Bernoulli(p)
        let se = if p[i] > 0.0 { g[i].abs() * ((1.0 - p[i]) / p[i] / draws as f64).sqrt() } else { 0.0 };
        assert!((mean[i] - g[i]).abs() <= 5.0 * se + 1e-9, "component {i}: {} vs {}", mean[i], g[i]);
    }
}

#[test]
fn epoch_callback_sees_every_round() {
    let mut seen = Vec::new();
    let mut ledger = OverheadLedger::default();
    fedave_train(init(), &[5, 5, 5], &run(2, 5, 1, 1.0), &mut Rng::new(5), &mut ledger, client_grad, |r, _| {
        assert_eq!(r.selected.len(), 2);
        assert!(r.selected.windows(2).all(|w| w[0] < w[1]));
        seen.push(r.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4, 5]);
    assert_eq!(ledger.bits_index, 0);
}
