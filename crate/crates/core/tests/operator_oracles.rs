mod common;

use common::oracles;

#[test]
fn conv_matches_oracle() {
    oracles::conv_matches_oracle();
}

#[test]
fn gemm_matches_oracle_for_every_cluster_count() {
    oracles::gemm_matches_oracle_for_every_cluster_count();
}

#[test]
fn adaptive_pool_1d_exhaustive() {
    oracles::adaptive_pool_1d_exhaustive();
}

#[test]
fn adaptive_pool_2d_3d_grid() {
    oracles::adaptive_pool_2d_3d_grid();
}

#[test]
fn maxpool_matches_oracle() {
    oracles::maxpool_matches_oracle();
}

#[test]
fn rnn_matches_oracle() {
    oracles::rnn_matches_oracle();
}

#[test]
fn bf16_rounding_matches_half() {
    oracles::bf16_rounding_matches_half();
}

#[test]
fn silu_lut_matches_independent_interpolation() {
    oracles::silu_lut_matches_independent_interpolation();
}
