//! Capacity probe: can the published architecture represent the inverse
//! map at all? Trains supervised on ground-truth labels (test-only).
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use verdict_core::acquisition::{kidney_protocol, table_normalize_average};
use verdict_core::nn::{AdamConfig, AdamState, Mlp};
use verdict_core::phantom::{generate_phantom, PhantomSpec};

#[test]
#[ignore]
fn supervised_capacity_probe() {
    let scheme = kidney_protocol();
    let spec = PhantomSpec { n_voxels: 2000, radius_range: (5.0, 15.0), seed: 47, ..Default::default() };
    let (raw, truth) = generate_phantom(&spec, &scheme).unwrap();
    let (table, _) = table_normalize_average(&raw, &scheme).unwrap();
    let n_meas = table.n_meas;

    for (lr, epochs) in [(1e-3f64, 500usize), (1e-4, 1500)] {
        let mut net = Mlp::init_seeded(&[n_meas, n_meas, n_meas, n_meas, 3], 7);
        let mut adam = AdamState::for_net(&net, AdamConfig::with_lr(lr));
        let labels: Vec<[f64; 3]> = truth
            .params
            .iter()
            .map(|p| [p.f_ic, p.f_ees, p.radius / 15.0])
            .collect();
        let mut order: Vec<usize> = (0..table.n_voxels).collect();
        let start = std::time::Instant::now();
        let mut last_loss = 0.0;
        for epoch in 0..epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(epoch as u64);
            order.shuffle(&mut rng);
            adam.cfg.lr = lr * 0.01f64.powf(epoch as f64 / epochs as f64);
            last_loss = 0.0;
            for chunk in order.chunks(128) {
                let batch = chunk.len();
                let mut x = Vec::with_capacity(batch * n_meas);
                for &r in chunk {
                    x.extend_from_slice(table.row(r));
                }
                let mut drng = ChaCha8Rng::seed_from_u64(1);
                let cache = net.forward_train(&x, batch, &mut drng).unwrap();
                let outs = cache.output();
                let mut d = vec![0.0; batch * 3];
                for (i, &r) in chunk.iter().enumerate() {
                    for k in 0..3 {
                        let res = outs[3 * i + k] - labels[r][k];
                        last_loss += res * res;
                        d[3 * i + k] = 2.0 * res / (batch * 3) as f64;
                    }
                }
                let grads = net.backward(&cache, &d).unwrap();
                adam.step(&mut net.params_mut(), &grads.tensors);
            }
            last_loss /= (table.n_voxels * 3) as f64;
        }
        let outs = net.forward_eval(&table.signals, table.n_voxels).unwrap();
        let mut mae_fic = 0.0;
        let mut mae_r = 0.0;
        for (i, p) in truth.params.iter().enumerate() {
            mae_fic += (outs[3 * i].clamp(0.0, 1.0) - p.f_ic).abs();
            mae_r += (outs[3 * i + 2].clamp(0.0, 1.0) * 15.0 - p.radius).abs();
        }
        println!(
            "supervised lr={:.0e}: MAE(f_ic)={:.5} MAE(R)={:.4} loss={:.3e} in {:.1}s",
            lr,
            mae_fic / table.n_voxels as f64,
            mae_r / table.n_voxels as f64,
            last_loss,
            start.elapsed().as_secs_f64()
        );
    }
}
