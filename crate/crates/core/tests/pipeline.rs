use crossmodal::data::{discover, load_normalized, synth_phantom, ForegroundRule, PatchSpec, PhantomConfig};
use crossmodal::nn::HEAD_ID;
use crossmodal::train::cmff::{run_cmff, CmffConfig, InitMode, Variant};
use crossmodal::train::cmft::{run_cmft, CmftConfig, GeneratorPair, GENERATORS_FILE};
use crossmodal::train::TrainingSet;
use crossmodal::volume::LABEL_CODES;

fn phantom() -> PhantomConfig {
    PhantomConfig { grid_size: [32; 3], n_subjects: 3, n_test: 1, seed: 21, ..Default::default() }
}

#[test]
fn on_disk_phantom_runs_through_both_phases() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    synth_phantom(&phantom(), &root).unwrap();
    let train = TrainingSet::load(&root, "train").unwrap();
    assert_eq!(train.len(), 2);

    let cmft_dir = tmp.path().join("cmft");
    let cmft = CmftConfig {
        base_filters: 2,
        depth: 1,
        steps: 2,
        lr: 1e-3,
        checkpoint_every: 0,
        patch: PatchSpec { size: [16; 3], foreground_rule: ForegroundRule::BrainOverlap, seed: 3 },
        ..Default::default()
    };
    run_cmft(&cmft, &train, Some(&cmft_dir), None).unwrap();
    let generators = GeneratorPair::load(&cmft_dir.join(GENERATORS_FILE)).unwrap();

    let cfg = CmffConfig {
        init_mode: InitMode::CmftTransfer,
        variant: Variant::Full,
        cmft_checkpoint: Some(cmft_dir.join(GENERATORS_FILE)),
        base_filters: 2,
        depth: 1,
        steps: 0,
        checkpoint_every: 0,
        patch: PatchSpec { size: [16; 3], foreground_rule: ForegroundRule::TumorOverlap, seed: 4 },
        ..Default::default()
    };
    let model = run_cmff(&cfg, &train, None, None).unwrap().model;
    for (id, p) in &generators.g_ab.params {
        if id != HEAD_ID {
            assert_eq!(p, &model.s_a[id], "{id}");
            assert_eq!(&generators.g_ba.params[id], &model.s_b[id], "{id}");
        }
    }

    let record = &discover(&root, "test").unwrap()[0];
    let subject = load_normalized(record).unwrap();
    let out = model.predict_subject(&subject).unwrap();
    assert_eq!(out.final_labels.dims(), [32; 3]);
    assert!(out.final_labels.labels().iter().all(|l| LABEL_CODES.contains(l)));
}
