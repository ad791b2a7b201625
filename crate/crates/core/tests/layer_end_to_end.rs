use latentmoe::gradcheck::{finite_diff_grad, grad_rel_err};
use latentmoe::layer::{load_checkpoint, mh_latentmoe_backward, mh_latentmoe_forward, save_checkpoint};
use latentmoe::memory::write_ledger_csv;
use latentmoe::{Arena, ExecConfig, ExpertBackend, LayerDims, MHLatentMoEParams, Rng, RouterMode, Tensor, TierConfig};

fn dims(separate_routing: bool) -> LayerDims {
    LayerDims { d: 12, n_heads: 3, d_h: 4, n_experts: 6, k: 2, d_e: 5, n_layers: 12, separate_routing }
}

fn all_execs() -> Vec<ExecConfig> {
    let mut out = Vec::new();
    for router in [RouterMode::Naive, RouterMode::IoAware] {
        for backend in [ExpertBackend::Grouped, ExpertBackend::BlockSparse] {
            out.push(ExecConfig::default().with_router(router).with_backend(backend));
        }
    }
    out
}

#[test]
fn every_execution_path_gives_the_same_layer_output() {
    let mut rng = Rng::new(11);
    let mut p: MHLatentMoEParams<f64> = MHLatentMoEParams::init(&mut rng, &dims(false)).unwrap();
    p.w_out = rng.normal_tensor(p.w_out.shape(), 0.3);
    let x: Tensor<f64> = rng.normal_tensor(&[2, 9, 12], 1.0);
    let outs: Vec<Tensor<f64>> = all_execs()
        .iter()
        .map(|e| mh_latentmoe_forward(&p, &x, e, &mut Arena::unbounded("fwd")).unwrap())
        .collect();
    assert_eq!(outs[0].shape(), &[2, 9, 12]);
    for o in &outs[1..] {
        let diff = o.data().iter().zip(outs[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn input_gradient_matches_finite_differences_on_every_path() {
    for separate in [false, true] {
        let mut rng = Rng::new(12 + separate as u64);
        let mut p: MHLatentMoEParams<f64> = MHLatentMoEParams::init(&mut rng, &dims(separate)).unwrap();
        p.w_out = rng.normal_tensor(p.w_out.shape(), 0.3);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 5, 12], 1.0);
        let cot: Tensor<f64> = rng.normal_tensor(&[1, 5, 12], 1.0);
        for exec in all_execs() {
            let loss = |x: &Tensor<f64>| -> f64 {
                let o = mh_latentmoe_forward(&p, x, &exec, &mut Arena::unbounded("fd")).unwrap();
                o.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
            };
            let g = mh_latentmoe_backward(&p, &x, &cot, &exec, &mut Arena::unbounded("bwd")).unwrap();
            let fd = finite_diff_grad(loss, &x, 1e-6);
            let err = grad_rel_err(g.x.data(), fd.data(), 1e-8);
            assert!(err < 1e-4, "separate={separate} {exec:?}: {err}");
        }
    }
}

#[test]
fn checkpoint_file_roundtrip_preserves_outputs() {
    let mut rng = Rng::new(13);
    let p: MHLatentMoEParams<f32> = MHLatentMoEParams::init(&mut rng, &dims(true)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layer.ckpt");
    save_checkpoint(&p, &path).unwrap();
    let q = load_checkpoint(&path).unwrap();
    let x: Tensor<f32> = rng.normal_tensor(&[3, 12], 1.0);
    let exec = ExecConfig::default();
    let a = mh_latentmoe_forward(&p, &x, &exec, &mut Arena::unbounded("a")).unwrap();
    let b = mh_latentmoe_forward(&q, &x, &exec, &mut Arena::unbounded("b")).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    std::fs::write(&path, [1u8, 2, 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn bounded_arena_ledger_is_written_as_csv() {
    let mut rng = Rng::new(14);
    let p: MHLatentMoEParams<f32> = MHLatentMoEParams::init(&mut rng, &dims(false)).unwrap();
    let x: Tensor<f32> = rng.normal_tensor(&[8, 12], 1.0);
    let mut arena = Arena::new(TierConfig::with_capacity(4096).unwrap(), "layer");
    mh_latentmoe_forward(&p, &x, &ExecConfig::default(), &mut arena).unwrap();
    let ledger = arena.into_ledger();
    assert!(ledger.hbm_words_read > 0);
    assert!(ledger.sram_peak_words <= 4096);
    let mut buf = Vec::new();
    write_ledger_csv(&mut buf, &[ledger]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("layer,"));
}
