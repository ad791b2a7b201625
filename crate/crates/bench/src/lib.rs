//! Fixtures shared by the benchmarks.

use latentmoe::experts::build_cluster_plan;
use latentmoe::{ClusterPlan, ExpertBank, Rng, RouterParams, Tensor};

/// Routing input `[1, tokens, 1, d_h]` and router weights for `n_experts`.
pub fn routing_fixture(tokens: usize, d_h: usize, n_experts: usize) -> (Tensor<f32>, RouterParams<f32>) {
    let mut rng = Rng::new(1);
    let x = rng.normal_tensor(&[1, tokens, 1, d_h], 1.0);
    let p = RouterParams::init(&mut rng, 1, d_h, n_experts, (d_h as f64).powf(-0.5));
    (x, p)
}

/// Cluster-sorted replicas, their plan and an expert bank.
pub fn expert_fixture(tokens: usize, k: usize, n_experts: usize, d_e: usize, d_h: usize) -> (Tensor<f32>, ClusterPlan, ExpertBank<f32>) {
    let mut rng = Rng::new(2);
    let mut idx = Vec::with_capacity(tokens * k);
    for _ in 0..tokens {
        let mut row: Vec<u32> = Vec::with_capacity(k);
        while row.len() < k {
            let c = rng.below(n_experts) as u32;
            if !row.contains(&c) {
                row.push(c);
            }
        }
        idx.extend(row);
    }
    let plan = build_cluster_plan(&idx, k, n_experts).expect("valid routing");
    let bank = ExpertBank::init(&mut rng, n_experts, d_e, d_h, 0.1);
    let x: Vec<f32> = rng.normal_vec(tokens * d_h, 1.0);
    let xc = Tensor::from_vec(&[tokens * k, d_h], plan.permute_tokens(&x, d_h)).expect("replica shape");
    (xc, plan, bank)
}
