mod checks;
mod oracle;

use checks::losses;

#[test]
fn hand_computed_micro_cases() {
    losses::micro_cases();
}

#[test]
fn exact_prediction_gives_zero_mask_losses() {
    losses::exact_prediction_is_free();
}

#[test]
fn total_is_weighted_sum_averaged_over_stages() {
    losses::total_over_stages();
}

#[test]
fn identity_holds_while_training() {
    losses::every_training_step(24);
}
