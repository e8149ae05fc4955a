mod common;

#[test]
fn policy_loss_gradients_match_finite_differences() {
    for seed in 0..3 {
        for c in common::gradient_check(seed, 10) {
            assert!(c.max_abs_gradient > 0.0, "seed {seed} {}: gradient vanished", c.layer);
            assert!(
                c.max_rel_error < 1e-4,
                "seed {seed} {}: relative error {:e}",
                c.layer,
                c.max_rel_error
            );
        }
    }
}
