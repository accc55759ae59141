use tmamba::eval::{evaluate, MaskOracle};
use tmamba_core::data::{synth_generate, SynthConfig};
use tmamba_core::net::{Model, NetConfig};
use rand::SeedableRng;

#[test]
fn oracle_scores_perfectly() {
    let samples = synth_generate(&SynthConfig::new(2, &[16, 16]), 0, 5).unwrap();
    let r = evaluate(&MaskOracle, &samples, 2).unwrap();
    assert_eq!(r.per_sample.len(), 5);
    let m = &r.mean;
    assert_eq!((m.dsc, m.iou, m.miou, m.acc), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(m.hd, Some(0.0));
    assert_eq!(m.assd, Some(0.0));
    assert_eq!(m.so, Some(1.0));
    let text = r.to_jsonl();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("{\"summary\""));
}

#[test]
fn model_gates_are_proportions() {
    let cfg = NetConfig::tiny(2, &[16, 16]);
    let model = Model::build(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
    let samples = synth_generate(&SynthConfig::new(2, &[16, 16]), 0, 3).unwrap();
    let r = evaluate(&model, &samples, 2).unwrap();
    assert_eq!(r.mean.gates.len(), 3);
    for g in &r.mean.gates {
        let g = g.as_ref().expect("every scale has a gate");
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|v| *v >= 0.0));
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for m in &r.per_sample {
        assert!((0.0..=1.0).contains(&m.dsc) && (0.0..=1.0).contains(&m.iou));
    }
}

#[test]
fn conv_only_model_reports_no_gates() {
    let cfg = NetConfig::tiny(2, &[16, 16]).conv_only();
    let model = Model::build(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
    let samples = synth_generate(&SynthConfig::new(2, &[16, 16]), 0, 2).unwrap();
    let r = evaluate(&model, &samples, 2).unwrap();
    assert!(r.mean.gates.iter().all(Option::is_none));
}

#[test]
fn shape_mismatch_is_an_error() {
    let cfg = NetConfig::tiny(2, &[16, 16]);
    let model = Model::build(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
    let samples = synth_generate(&SynthConfig::new(2, &[8, 8]), 0, 1).unwrap();
    assert!(evaluate(&model, &samples, 1).is_err());
    assert!(evaluate(&MaskOracle, &[], 1).is_err());
}
