use overtake_learn::nn::{gradient_check, preactivation_margin, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn full_width_net_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(96);
    let net = Mlp::<f64>::new(&[96, 256, 256, 2], &mut rng);
    let batch = 2;
    // keep every hidden unit clear of its kink so the stencil stays differentiable
    let x = loop {
        let x: Vec<f64> = (0..batch * 96).map(|_| rng.random_range(-1.0..1.0)).collect();
        if preactivation_margin(&net, &x, batch) > 5e-4 {
            break x;
        }
    };
    let probe: Vec<f64> = (0..batch * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = gradient_check(&net, &x, batch, &probe, 1e-4);
    assert_eq!(r.kink_crossings, 0);
    assert_eq!(r.checked, net.n_params());
    assert!(r.worst_relative_error < 1e-4, "{r:?}");
}
