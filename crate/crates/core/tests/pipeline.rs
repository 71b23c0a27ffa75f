use owcl_core::adapt::AdaptationMode;
use owcl_core::driver::{
    ablation_variants, load_checkpoint, save_checkpoint, AblationKind, Experiment, ExperimentMode, StageLoader,
};
use owcl_core::verify::tiny_config;
use owcl_core::Error;

fn final_bytes(exp: &Experiment) -> Vec<u8> {
    save_checkpoint(&exp.checkpoint().unwrap()).unwrap()
}

#[test]
fn identical_configs_give_identical_runs() {
    let mut a = Experiment::new(tiny_config(3)).unwrap();
    let mut b = Experiment::new(tiny_config(3)).unwrap();
    a.run_to_end().unwrap();
    b.run_to_end().unwrap();
    assert_eq!(a.recalls(), b.recalls());
    assert_eq!(final_bytes(&a), final_bytes(&b));
    let s = a.summary().unwrap();
    assert_eq!(s.recalls.len(), 3);
    assert_eq!(s.config_hash, a.config.hash());
}

#[test]
fn upper_bound_trains_a_single_stage() {
    let mut cfg = tiny_config(1);
    cfg.mode = ExperimentMode::UpperBound;
    let mut exp = Experiment::new(cfg).unwrap();
    assert_eq!(exp.num_stages(), 1);
    exp.run_to_end().unwrap();
    assert_eq!(exp.recalls().len(), 1);
    assert_eq!(exp.summary().unwrap().f_n, 0.0);
}

#[test]
fn lower_bound_recall_is_constant() {
    let mut cfg = tiny_config(2);
    cfg.mode = ExperimentMode::LowerBound;
    let mut exp = Experiment::new(cfg).unwrap();
    exp.run_to_end().unwrap();
    let r = exp.recalls();
    assert!(r.iter().all(|&x| x == r[0]), "{r:?}");
}

#[test]
fn every_mode_and_adaptation_runs() {
    for mode in [ExperimentMode::DpgFrozen, ExperimentMode::StaticPool, ExperimentMode::PeftOnly] {
        let mut cfg = tiny_config(4);
        cfg.mode = mode;
        cfg.stages = 2;
        let mut exp = Experiment::new(cfg).unwrap();
        exp.run_to_end().unwrap();
        assert_eq!(exp.recalls().len(), 2, "{mode:?}");
    }
    for kind in [AblationKind::Peft, AblationKind::StageOrder] {
        let mut base = tiny_config(4);
        base.stages = 2;
        for (name, cfg) in ablation_variants(kind, &base).unwrap() {
            let mut exp = Experiment::new(cfg).unwrap();
            exp.run_to_end().unwrap();
            assert!(exp.recalls().iter().all(|r| (0.0..=1.0).contains(r)), "{name}");
        }
    }
}

#[test]
fn resume_from_each_stage_matches() {
    let cfg = tiny_config(9);
    let mut straight = Experiment::new(cfg.clone()).unwrap();
    let mut records = Vec::new();
    while !straight.is_finished() {
        straight.run_next_stage().unwrap();
        records.push(save_checkpoint(&straight.checkpoint().unwrap()).unwrap());
    }
    let want = final_bytes(&straight);
    for bytes in &records {
        let mut resumed = Experiment::resume(&load_checkpoint(bytes).unwrap()).unwrap();
        resumed.run_to_end().unwrap();
        assert_eq!(resumed.recalls(), straight.recalls());
        assert_eq!(final_bytes(&resumed), want);
    }
}

#[test]
fn resume_rejects_a_foreign_tensor() {
    let mut exp = Experiment::new(tiny_config(5)).unwrap();
    exp.run_next_stage().unwrap();
    let mut rec = exp.checkpoint().unwrap();
    rec.push_tensor("stray.weight", owcl_core::tensor::Tensor::zeros(&[1]));
    match Experiment::resume(&rec) {
        Err(Error::CheckpointEntry { name, .. }) => assert_eq!(name, "stray.weight"),
        other => panic!("expected a named checkpoint error, got {:?}", other.err()),
    }
}

#[test]
fn loader_refuses_other_stage_classes() {
    let exp = Experiment::new(tiny_config(6)).unwrap();
    let own = exp.schedule.classes(1).unwrap().to_vec();
    let other = exp.schedule.classes(2).unwrap()[0];
    let mut loader = StageLoader::new(&exp.data, 1, &own);
    assert!(loader.get(own[0], 0).is_ok());
    assert!(matches!(loader.get(other, 0), Err(Error::CrossStageAccess { stage: 1, .. })));
    let access = loader.into_access();
    assert_eq!(access.reads, 1);
    assert_eq!(access.classes.len(), 1);
}

#[test]
fn adapter_and_full_ft_peft_only() {
    for adaptation in [AdaptationMode::FullFt, AdaptationMode::Adapter { bottleneck: 2 }] {
        let mut cfg = tiny_config(8);
        cfg.mode = ExperimentMode::PeftOnly;
        cfg.stages = 2;
        cfg.adaptation = adaptation;
        let mut exp = Experiment::new(cfg).unwrap();
        exp.run_to_end().unwrap();
    }
}
