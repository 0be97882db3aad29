use num_bigint::BigUint;

use permnm::permlearn::{init_params, BlockPermutationParams};
use permnm::reference::count_partitions;
use permnm::{soft_permutation, Matrix, Rng, TemperatureSchedule};

#[test]
fn temperature_decays_linearly_from_one_to_a_tenth() {
    let s = TemperatureSchedule::new(1.0, 0.1, 100).unwrap();
    assert_eq!(s.tau_at(0), 1.0);
    assert!((s.tau_at(100) - 0.1).abs() < 1e-15);
    assert!((s.tau_at(50) - 0.55).abs() < 1e-15);
}

#[test]
fn block_parameters_scale_with_block_size() {
    let p: BlockPermutationParams<f32> = init_params(4096, 64, &mut Rng::new(0)).unwrap();
    assert_eq!(p.layout().num_blocks(), 64);
    assert_eq!(p.param_count(), 262_144);
    assert_eq!(4096 * 4096 / p.param_count(), 64);
}

#[test]
fn partition_space_of_sixteen_channels() {
    assert_eq!(count_partitions(16, 4).unwrap(), BigUint::from(2_627_625u32));
    assert_eq!(count_partitions(12, 4).unwrap(), BigUint::from(5_775u32));
}

#[test]
fn cold_logits_give_the_uniform_matrix() {
    let p = soft_permutation(&Matrix::<f64>::zeros(5, 5), 1.0, 5).unwrap();
    assert!(p.entries().as_slice().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}
