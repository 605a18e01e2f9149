mod common;

use common::{max_gradient_error, random_instance};

#[test]
fn full_elbo_gradients_match_central_differences() {
    let mut worst = (0.0f64, 0);
    for seed in 0..100 {
        let (data, model, beta, noise) = random_instance(seed);
        let err = max_gradient_error(&data, &model, beta, &noise, 1e-5, 1e-3);
        if err > worst.0 {
            worst = (err, seed);
        }
    }
    println!("worst relative error {:.3e} (instance {})", worst.0, worst.1);
    assert!(worst.0 < 1e-4, "instance {} has relative error {:.3e}", worst.1, worst.0);
}
