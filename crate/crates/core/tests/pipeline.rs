mod common;

use std::sync::OnceLock;

use lieflow::ad::{ParamGroup, Tensor};
use lieflow::liegroup::{Mat3, Vec3};
use lieflow::physics_losses::RegularizerBatch;
use lieflow::pipeline::{
    encode_checkpoint, evaluate, evaluate_images, load_checkpoint, read_metrics, save_checkpoint,
    train, train_from, Dataset, Model, PipelineError, Split, Trainer, CHECKPOINT_FILE,
    METRICS_FILE,
};
use lieflow::se3field::{integrate_transform, Ablation, TwistModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use common::*;

fn tiny_dataset() -> &'static TempDir {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = TempDir::new().unwrap();
        write_dataset(&tiny_spec(), d.path());
        d
    })
}

fn bits(m: &Model) -> Vec<Vec<u64>> {
    m.store
        .entries()
        .iter()
        .map(|e| e.value.data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

#[test]
fn zero_iterations_keeps_initial_parameters() {
    let out = TempDir::new().unwrap();
    let mut c = tiny_config(tiny_dataset().path(), out.path());
    c.iterations = 0;
    let o = train(c.clone()).unwrap();
    assert_eq!(o.checkpoint.iteration, 0);
    let fresh = Model::new(
        &c,
        o.checkpoint.aabb,
        &mut ChaCha8Rng::seed_from_u64(c.seed),
    )
    .unwrap();
    assert_eq!(bits(&o.checkpoint.model), bits(&fresh));
    assert_eq!(
        std::fs::read_to_string(out.path().join(METRICS_FILE)).unwrap(),
        ""
    );
}

#[test]
fn checkpoint_file_round_trip() {
    let out = TempDir::new().unwrap();
    let o = train(tiny_config(tiny_dataset().path(), out.path())).unwrap();
    let a = std::fs::read(out.path().join(CHECKPOINT_FILE)).unwrap();
    let ck = load_checkpoint(&out.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(bits(&ck.model), bits(&o.checkpoint.model));
    let again = out.path().join("again.lfck");
    save_checkpoint(&ck, &again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), a);

    std::fs::write(&again, &a[..a.len() - 7]).unwrap();
    assert!(matches!(
        load_checkpoint(&again),
        Err(PipelineError::ChecksumError)
    ));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = tiny_dataset().path();
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let whole = train(tiny_config(ds, a.path())).unwrap();

    let mut first = tiny_config(ds, b.path());
    first.iterations = 5;
    train(first).unwrap();
    let ck = load_checkpoint(&b.path().join(CHECKPOINT_FILE)).unwrap();
    let resumed = train_from(ck, Some(10)).unwrap();

    assert_eq!(
        bits(&resumed.checkpoint.model),
        bits(&whole.checkpoint.model)
    );
    assert_eq!(resumed.checkpoint.adam, whole.checkpoint.adam);
    assert_eq!(resumed.checkpoint.rng, whole.checkpoint.rng);
    assert_eq!(
        metrics_without_time(&a.path().join(METRICS_FILE)),
        metrics_without_time(&b.path().join(METRICS_FILE))
    );
}

#[test]
fn seeded_runs_are_bit_identical() {
    let out = TempDir::new().unwrap();
    let c = tiny_config(tiny_dataset().path(), out.path());
    let first = train(c.clone()).unwrap();
    let bytes = std::fs::read(&first.checkpoint_path).unwrap();
    let log = metrics_without_time(&first.metrics_path);
    let second = train(c).unwrap();
    assert_eq!(std::fs::read(&second.checkpoint_path).unwrap(), bytes);
    assert_eq!(metrics_without_time(&second.metrics_path), log);
    assert_eq!(
        first.final_loss.unwrap().to_bits(),
        second.final_loss.unwrap().to_bits()
    );
}

#[test]
fn thread_count_does_not_change_gradients() {
    let out = TempDir::new().unwrap();
    let mut t = Trainer::new(tiny_config(tiny_dataset().path(), out.path())).unwrap();
    let batch = loop {
        let b = t.sample_batch();
        if !t.schedule.is_reference_frame(b.frame) {
            break b;
        }
    };
    let reg = RegularizerBatch::sample(
        &t.model.radiance.aabb,
        4,
        2,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| t.compute(&batch, Some(&reg)).unwrap())
    };
    let (one, three) = (run(1), run(3));
    assert_eq!(one.total.to_bits(), three.total.to_bits());
    for ((ia, ga), (ib, gb)) in one.grads.iter().zip(three.grads.iter()) {
        assert_eq!(ia, ib);
        assert_eq!(ga, gb);
    }
}

#[test]
fn supervision_routing() {
    let out = TempDir::new().unwrap();
    let mut t = Trainer::new(tiny_config(tiny_dataset().path(), out.path())).unwrap();
    // Move every weight off its initial value so no gradient vanishes by
    // construction.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for id in t.model.store.ids().collect::<Vec<_>>() {
        for x in t.model.store.value_mut(id).data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    let reg = RegularizerBatch::sample(&t.model.radiance.aabb, 4, 2, &mut rng).unwrap();
    let (mut seen_ref, mut seen_query) = (false, false);
    while !(seen_ref && seen_query) {
        let batch = t.sample_batch();
        let with = t.compute(&batch, Some(&reg)).unwrap();
        let store = &t.model.store;
        if with.reference {
            seen_ref = true;
            assert!(with.regularizers.is_none());
            for (id, g) in with.grads.iter() {
                if store.entry(id).group == ParamGroup::Motion {
                    assert!(
                        g.data().iter().all(|&x| x == 0.0),
                        "{}",
                        store.entry(id).name
                    );
                }
            }
        } else {
            seen_query = true;
            let without = t.compute(&batch, None).unwrap();
            let motion_touched = with
                .grads
                .iter()
                .any(|(id, g)| store.entry(id).group == ParamGroup::Motion && g.max_abs() > 0.0);
            assert!(motion_touched);
            for id in store.ids() {
                let (a, b) = (with.grads.get(id), without.grads.get(id));
                if store.entry(id).group == ParamGroup::Radiance {
                    assert_eq!(a, b, "regularisers reached {}", store.entry(id).name);
                }
            }
            let accel = store.id("se3.accel").unwrap();
            assert!(with.grads.get(accel).is_some_and(|g| g.max_abs() > 0.0));
            assert!(without.grads.get(accel).is_none_or(|g| g.max_abs() == 0.0));
        }
    }
}

#[test]
fn reference_steps_leave_motion_parameters_untouched() {
    let out = TempDir::new().unwrap();
    let mut t = Trainer::new(tiny_config(tiny_dataset().path(), out.path())).unwrap();
    for _ in 0..8 {
        let before = t.model.clone();
        let steps = t.adam.steps_motion;
        let rec = t.step(std::time::Instant::now()).unwrap();
        let changed = |g: ParamGroup| {
            before
                .store
                .entries()
                .iter()
                .zip(t.model.store.entries())
                .filter(|(e, _)| e.group == g)
                .any(|(a, b)| a.value != b.value)
        };
        assert!(changed(ParamGroup::Radiance));
        if rec.reference {
            assert!(!changed(ParamGroup::Motion));
            assert_eq!(t.adam.steps_motion, steps);
        } else {
            assert_eq!(t.adam.steps_motion, steps + 1);
        }
    }
}

#[test]
fn ablation_contracts() {
    let out = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for ablation in [Ablation::TranslationOnly, Ablation::RotationOnly] {
        let mut c = tiny_config(tiny_dataset().path(), out.path());
        c.ablation = ablation;
        let mut m = Model::new(&c, lieflow::aabb::Aabb::cube(1.0), &mut rng).unwrap();
        for id in m.store.ids().collect::<Vec<_>>() {
            for x in m.store.value_mut(id).data_mut() {
                *x = rng.random_range(-0.5..0.5);
            }
        }
        for _ in 0..20 {
            let p = Vec3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
            );
            let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let g = integrate_transform(&m.se3, &m.store, &p, a, b, 3, c.integration).unwrap();
            let mut tape = lieflow::ad::Tape::new(&m.store);
            let (w, v) = m.se3.twists(&mut tape, &[p], &[a]).unwrap();
            match ablation {
                Ablation::TranslationOnly => {
                    assert!((g.rotation - Mat3::identity()).abs().max() < 1e-12);
                    assert_eq!(tape.value(w), &Tensor::zeros(1, 3));
                }
                _ => {
                    assert_eq!(tape.value(v), &Tensor::zeros(1, 3));
                    assert!(tape.value(w).max_abs() > 0.0);
                }
            }
        }
    }
}

#[test]
fn static_scene_converges() {
    let ds = TempDir::new().unwrap();
    write_dataset(&static_spec(), ds.path());
    let out = TempDir::new().unwrap();
    let mut c = tiny_config(ds.path(), out.path());
    c.iterations = 2000;
    c.rays_per_batch = 64;
    c.samples_per_ray = 24;
    c.chunk_rays = 64;
    c.lr_radiance = 0.02;
    c.hexplane.resolution = 16;
    c.hexplane.features = 6;
    c.hexplane.rgb_hidden = 16;
    let o = train(c).unwrap();
    let recs = read_metrics(&o.metrics_path).unwrap();
    assert!(recs.iter().all(|r| r.reference));
    let early = recs[10].photometric;
    let late = recs[recs.len() - 20..]
        .iter()
        .map(|r| r.photometric)
        .sum::<f64>()
        / 20.0;
    assert!(late * 10.0 <= early, "iteration 10: {early}, final: {late}");

    let ck = load_checkpoint(&o.checkpoint_path).unwrap();
    let dataset = Dataset::open(ds.path()).unwrap();
    let renders: Vec<_> = dataset
        .manifest
        .splits
        .train_cameras
        .iter()
        .map(|&cam| {
            (
                cam,
                0,
                lieflow::pipeline::render_view(&ck, &dataset, cam, 0).unwrap(),
            )
        })
        .collect();
    let report = evaluate_images(&dataset, Split::Interp, &renders).unwrap();
    assert!(report.mean_psnr >= 30.0, "{report:?}");
}

#[test]
fn oracle_evaluation_and_means() {
    let ds = Dataset::open(tiny_dataset().path()).unwrap();
    let renders: Vec<_> = Split::Interp
        .pairs(&ds)
        .into_iter()
        .map(|(c, f)| (c, f, ds.load_image(c, f).unwrap()))
        .collect();
    let r = evaluate_images(&ds, Split::Interp, &renders).unwrap();
    assert_eq!(r.rows.len(), 7);
    assert!(r
        .rows
        .iter()
        .all(|row| row.psnr == 99.0 && (row.ssim - 1.0).abs() < 1e-12));

    let out = TempDir::new().unwrap();
    let mut c = tiny_config(tiny_dataset().path(), out.path());
    c.iterations = 3;
    let ck = train(c).unwrap().checkpoint;
    for split in [Split::Interp, Split::Extrap] {
        let r = evaluate(&ck, &ds, split).unwrap();
        assert_eq!(r.rows.len(), split.pairs(&ds).len());
        let mean = r.rows.iter().map(|x| x.psnr).sum::<f64>() / r.rows.len() as f64;
        assert!((mean - r.mean_psnr).abs() < 1e-9);
        let mean = r.rows.iter().map(|x| x.ssim).sum::<f64>() / r.rows.len() as f64;
        assert!((mean - r.mean_ssim).abs() < 1e-9);
    }
}

#[test]
fn empty_extrapolation_split() {
    let dir = TempDir::new().unwrap();
    let mut spec = tiny_spec();
    spec.extrapolation_frames = 0;
    write_dataset(&spec, dir.path());
    let ds = Dataset::open(dir.path()).unwrap();
    let out = TempDir::new().unwrap();
    let mut c = tiny_config(dir.path(), out.path());
    c.iterations = 0;
    let ck = train(c).unwrap().checkpoint;
    let err = evaluate(&ck, &ds, Split::Extrap).unwrap_err();
    assert!(matches!(err, PipelineError::EmptySplit(_)));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let out = TempDir::new().unwrap();
    let mut c = tiny_config(tiny_dataset().path(), out.path());
    c.iterations = 0;
    let mut ck = train(c).unwrap().checkpoint;
    let id = ck.model.store.id("hexplane.plane_xy").unwrap();
    ck.model.store.value_mut(id).data_mut().fill(f64::NAN);
    let err = train_from(ck, Some(5)).unwrap_err();
    let PipelineError::NonFiniteLoss { iteration, dump } = &err else {
        panic!("{err:?}");
    };
    assert_eq!(*iteration, 0);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dump).unwrap()).unwrap();
    assert!(!doc["rays"].as_array().unwrap().is_empty());
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn dataset_validation() {
    let empty = TempDir::new().unwrap();
    assert!(matches!(
        Dataset::open(empty.path()),
        Err(PipelineError::DatasetInvalid(_))
    ));

    let dir = TempDir::new().unwrap();
    write_dataset(&tiny_spec(), dir.path());
    std::fs::remove_file(
        dir.path()
            .join("frames")
            .join(lieflow::scenegen::frame_file_name(0, 3)),
    )
    .unwrap();
    let err = Dataset::open(dir.path()).unwrap_err();
    assert!(matches!(err, PipelineError::DatasetInvalid(_)), "{err:?}");
    assert_eq!(err.exit_code(), 1);

    let out = TempDir::new().unwrap();
    let err = train(tiny_config(dir.path(), out.path())).err().unwrap();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn checkpoint_records_config_and_state() {
    let out = TempDir::new().unwrap();
    let c = tiny_config(tiny_dataset().path(), out.path());
    let o = train(c.clone()).unwrap();
    let bytes = encode_checkpoint(&o.checkpoint);
    assert_eq!(&bytes[..8], b"LIEFLOW\0");
    let ck = load_checkpoint(&o.checkpoint_path).unwrap();
    assert_eq!(ck.config, c);
    assert_eq!(ck.iteration, 10);
    assert_eq!(ck.adam.steps_radiance, 10);
}
